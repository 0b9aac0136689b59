//! On-disk layout of one project: `events.jsonl` (append-only log, the
//! source of truth) and `project.json` (summary rewritten atomically after
//! every mutation).

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use densesort_core::events::{append_jsonl, read_jsonl, AnnotationEvent, EventBody};
use densesort_core::features::load_features;
use densesort_core::hierarchy::TreeStats;
use densesort_core::lifecycle::ClusterStatus;
use densesort_core::{Error, FeatureStore, Result};
use serde::{Deserialize, Serialize};

use crate::project::{Clock, Project, ProjectConfig};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "project.json";
const SNAPSHOT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub format: u32,
    pub project_id: String,
    pub config: ProjectConfig,
    /// Events persisted when the snapshot was written.
    pub event_count: usize,
    pub iteration: usize,
    pub clusters_by_status: BTreeMap<ClusterStatus, usize>,
    pub unassigned_objects: usize,
    pub tree: Option<TreeStats>,
}

impl Snapshot {
    pub fn of(project_id: &str, project: &Project) -> Self {
        let mut clusters_by_status = BTreeMap::new();
        for c in project.book().clusters() {
            *clusters_by_status.entry(c.status).or_default() += 1;
        }
        Snapshot {
            format: SNAPSHOT_FORMAT,
            project_id: project_id.to_string(),
            config: project.config().clone(),
            event_count: project.events().len(),
            iteration: project.iteration(),
            clusters_by_status,
            unassigned_objects: project.book().unassigned().len(),
            tree: project.tree().map(|t| t.stats()),
        }
    }
}

/// Loads the feature file and optional labels sidecar of a project.
pub fn load_store(config: &ProjectConfig) -> Result<FeatureStore> {
    let mut store = load_features(&config.features)?;
    if let Some(labels) = &config.labels {
        store.load_labels(labels)?;
    }
    Ok(store)
}

/// Reads a project's event log, cutting off a torn final line so later
/// appends start on a fresh line.
pub fn read_event_log(path: &Path) -> Result<Vec<AnnotationEvent>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if !bytes.is_empty() && bytes.last() != Some(&b'\n') {
        let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        OpenOptions::new().write(true).open(path)?.set_len(keep as u64)?;
        bytes.truncate(keep);
    }
    read_jsonl(BufReader::new(&bytes[..]))
}

/// A project bound to its directory. Mutations go through
/// [`StoredProject::mutate`], which persists the new events.
pub struct StoredProject {
    id: String,
    dir: PathBuf,
    project: Project,
    persisted: usize,
}

impl StoredProject {
    pub fn create(dir: impl Into<PathBuf>, id: impl Into<String>, project: Project) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let log = dir.join(EVENTS_FILE);
        if log.exists() {
            return Err(Error::State(format!("{} already holds a project", dir.display())));
        }
        File::create(&log)?;
        let mut stored = StoredProject { id: id.into(), dir, project, persisted: 0 };
        stored.sync()?;
        Ok(stored)
    }

    pub fn open(dir: impl Into<PathBuf>, clock: Arc<dyn Clock>) -> Result<Self> {
        let dir = dir.into();
        let events = read_event_log(&dir.join(EVENTS_FILE))?;
        let Some(EventBody::ProjectCreated { features, labels, schedule, k, .. }) = events.first().map(|e| &e.body)
        else {
            return Err(Error::Format(format!("{} has no project_created event", dir.display())));
        };
        let config = ProjectConfig { features: features.clone(), labels: labels.clone(), schedule: schedule.clone(), k: *k };
        let store = Arc::new(load_store(&config)?);
        let project = Project::replay(store, &events, clock)?;
        let id = match fs::read(dir.join(SNAPSHOT_FILE)) {
            Ok(bytes) => serde_json::from_slice::<Snapshot>(&bytes).map(|s| s.project_id).ok(),
            Err(_) => None,
        }
        .or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "p0".into());
        let persisted = project.events().len();
        let stored = StoredProject { id, dir, project, persisted };
        stored.write_snapshot()?;
        Ok(stored)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn project(&self) -> &Project {
        &self.project
    }

    /// Runs a command and persists whatever events it produced, also when
    /// the command itself fails after recording some.
    pub fn mutate<T>(&mut self, f: impl FnOnce(&mut Project) -> Result<T>) -> Result<T> {
        let out = f(&mut self.project);
        self.sync()?;
        out
    }

    fn sync(&mut self) -> Result<()> {
        let events = &self.project.events()[self.persisted..];
        if events.is_empty() && self.persisted > 0 {
            return Ok(());
        }
        let mut buf = Vec::new();
        for e in events {
            append_jsonl(&mut buf, e)?;
        }
        let mut log = OpenOptions::new().append(true).open(self.dir.join(EVENTS_FILE))?;
        log.write_all(&buf)?;
        log.sync_data()?;
        self.persisted = self.project.events().len();
        self.write_snapshot()
    }

    fn write_snapshot(&self) -> Result<()> {
        let snapshot = Snapshot::of(&self.id, &self.project);
        let json = serde_json::to_vec_pretty(&snapshot).map_err(|e| Error::Format(e.to_string()))?;
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        let mut f = File::create(&tmp)?;
        f.write_all(&json)?;
        f.sync_data()?;
        fs::rename(tmp, self.dir.join(SNAPSHOT_FILE))?;
        Ok(())
    }
}
