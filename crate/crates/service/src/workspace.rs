//! A directory of projects, each with a single writer lock and at most one
//! clustering job at a time.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use densesort_core::Error;
use parking_lot::{Mutex, MutexGuard, RwLock};

use crate::error::{ServiceError, ServiceResult};
use crate::persist::{load_store, StoredProject, EVENTS_FILE};
use crate::project::{Clock, IterationOutcome, Project, ProjectConfig};

pub struct ProjectHandle {
    id: String,
    state: Mutex<StoredProject>,
    busy: AtomicBool,
    cancel: AtomicBool,
}

/// Clears the busy flag when the clustering job ends, however it ends.
struct BusyGuard<'a>(&'a AtomicBool);

impl Drop for BusyGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

impl ProjectHandle {
    pub fn new(stored: StoredProject) -> Self {
        ProjectHandle {
            id: stored.id().to_string(),
            state: Mutex::new(stored),
            busy: AtomicBool::new(false),
            cancel: AtomicBool::new(false),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Exclusive access to the project; hold it only briefly.
    pub fn lock(&self) -> MutexGuard<'_, StoredProject> {
        self.state.lock()
    }

    pub fn read<T>(&self, f: impl FnOnce(&Project) -> T) -> T {
        f(self.state.lock().project())
    }

    pub fn mutate<T>(&self, f: impl FnOnce(&mut Project) -> densesort_core::Result<T>) -> ServiceResult<T> {
        Ok(self.state.lock().mutate(f)?)
    }

    pub fn is_busy(&self) -> bool {
        self.busy.load(Ordering::SeqCst)
    }

    /// Asks a running clustering job to stop. Returns whether one was running.
    pub fn cancel_iteration(&self) -> bool {
        let running = self.is_busy();
        if running {
            self.cancel.store(true, Ordering::SeqCst);
        }
        running
    }

    /// Runs the next clustering step. The project lock is released while
    /// the job computes, so readers are not blocked.
    pub fn run_iteration(&self) -> ServiceResult<IterationOutcome> {
        if self.busy.compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst).is_err() {
            return Err(ServiceError::Busy(self.id.clone()));
        }
        let _guard = BusyGuard(&self.busy);
        self.cancel.store(false, Ordering::SeqCst);
        let Some(plan) = self.state.lock().project().prepare_iteration()? else {
            return Ok(IterationOutcome::Done);
        };
        let seeds = plan.run(&self.cancel)?;
        self.mutate(|p| p.finish_iteration(&plan, seeds))
    }
}

pub struct Workspace {
    root: PathBuf,
    clock: Arc<dyn Clock>,
    projects: RwLock<BTreeMap<String, Arc<ProjectHandle>>>,
    /// Serializes project creation so ids are unique.
    create_lock: Mutex<()>,
}

impl Workspace {
    /// Opens every project directory under `root`, creating `root` if needed.
    pub fn open(root: impl Into<PathBuf>, clock: Arc<dyn Clock>) -> ServiceResult<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(Error::from)?;
        let mut projects = BTreeMap::new();
        let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
            .map_err(Error::from)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(EVENTS_FILE).is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            let stored = StoredProject::open(&dir, Arc::clone(&clock))?;
            let handle = Arc::new(ProjectHandle::new(stored));
            projects.insert(handle.id().to_string(), handle);
        }
        Ok(Workspace { root, clock, projects: RwLock::new(projects), create_lock: Mutex::new(()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn project(&self, id: &str) -> ServiceResult<Arc<ProjectHandle>> {
        self.projects.read().get(id).cloned().ok_or_else(|| ServiceError::not_found("project", id))
    }

    pub fn project_ids(&self) -> Vec<String> {
        self.projects.read().keys().cloned().collect()
    }

    /// Creates a project with the next free id `p<n>`. Relative feature and
    /// label paths are made absolute first.
    pub fn create_project(&self, mut config: ProjectConfig, actor: &str) -> ServiceResult<Arc<ProjectHandle>> {
        let _serial = self.create_lock.lock();
        config.features = absolute(&config.features)?;
        config.labels = config.labels.as_deref().map(absolute).transpose()?;
        config.validate()?;
        let store = Arc::new(load_store(&config).map_err(|e| match e {
            Error::Io(io) => Error::Value(format!("cannot read project inputs: {io}")),
            other => other,
        })?);
        let project = Project::create(store, config, actor, Arc::clone(&self.clock))?;
        let next = self
            .projects
            .read()
            .keys()
            .filter_map(|k| k.strip_prefix('p').and_then(|n| n.parse::<u64>().ok()))
            .max()
            .map_or(1, |n| n + 1);
        let id = format!("p{next}");
        let stored = StoredProject::create(self.root.join(&id), id.clone(), project)?;
        let handle = Arc::new(ProjectHandle::new(stored));
        self.projects.write().insert(id, Arc::clone(&handle));
        Ok(handle)
    }
}

fn absolute(path: &str) -> ServiceResult<String> {
    let p = std::path::absolute(path).map_err(Error::from)?;
    Ok(p.to_string_lossy().into_owned())
}
