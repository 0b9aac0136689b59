//! Project state as a fold over the annotation event log.
//!
//! Every mutating command validates its input, builds an event and passes
//! it through [`Project::apply`], the single state transition used both
//! live and during replay. A command that fails leaves no event behind.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use densesort_core::density::{cluster_unassigned_cancellable, ClusteringParams};
use densesort_core::events::{AnnotationEvent, EventBody};
use densesort_core::hierarchy::{build_upgma, export_labeling, Hierarchy, Labeling, NodeId};
use densesort_core::lifecycle::{Cluster, ClusterBook, ClusterId, ClusterStatus, GrowSession, PageVerdict, Verdict};
use densesort_core::metrics::{metrics_report, ClassLabeling, MetricsReport};
use densesort_core::{Error, FeatureStore, Result};
use serde::{Deserialize, Serialize};

pub trait Clock: Send + Sync {
    /// UTC seconds since the Unix epoch.
    fn now(&self) -> f64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
    }
}

/// Clock that only moves when told to; for tests and simulations.
#[derive(Debug, Default)]
pub struct ManualClock {
    bits: AtomicU64,
}

impl ManualClock {
    pub fn new(start: f64) -> Self {
        ManualClock { bits: AtomicU64::new(start.to_bits()) }
    }

    pub fn set(&self, secs: f64) {
        self.bits.store(secs.to_bits(), Ordering::SeqCst);
    }

    pub fn advance(&self, secs: f64) {
        self.set(self.now() + secs);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> f64 {
        f64::from_bits(self.bits.load(Ordering::SeqCst))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectConfig {
    /// Path of the MCFT feature file.
    pub features: String,
    /// Optional labels sidecar CSV.
    pub labels: Option<String>,
    /// Minimum cluster sizes, one per iteration.
    pub schedule: Vec<usize>,
    pub k: usize,
}

impl ProjectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::Value("schedule must not be empty".into()));
        }
        for &m in &self.schedule {
            ClusteringParams::new(self.k, m)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum IterationOutcome {
    Started { iteration: usize, m: usize, proposed: Vec<ClusterId> },
    /// The schedule is exhausted.
    Done,
}

/// Input of one clustering job, detached from the project so it can run
/// without holding the project lock.
#[derive(Debug, Clone)]
pub struct IterationPlan {
    pub iteration: usize,
    pub m: usize,
    pub k: usize,
    pub unassigned: Vec<usize>,
    store: Arc<FeatureStore>,
}

impl IterationPlan {
    /// Seeds as store indices. A residue too small for `m` yields none.
    pub fn run(&self, cancel: &AtomicBool) -> Result<Vec<Vec<usize>>> {
        if self.unassigned.len() < self.m.max(self.k + 1) {
            return Ok(Vec::new());
        }
        let params = ClusteringParams::new(self.k, self.m)?;
        let seeds = cluster_unassigned_cancellable(&self.store, &self.unassigned, params, cancel)?;
        Ok(seeds.seeds.into_iter().map(|s| s.members).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitResult {
    pub session: u64,
    pub cluster: ClusterId,
    pub added: Vec<String>,
}

pub struct Project {
    store: Arc<FeatureStore>,
    config: ProjectConfig,
    iteration: usize,
    book: ClusterBook,
    sessions: BTreeMap<u64, GrowSession>,
    open_sessions: BTreeMap<ClusterId, u64>,
    tree: Option<Hierarchy>,
    events: Vec<AnnotationEvent>,
    clock: Arc<dyn Clock>,
    actor: String,
}

impl Project {
    pub fn create(
        store: Arc<FeatureStore>,
        config: ProjectConfig,
        actor: impl Into<String>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self> {
        config.validate()?;
        let mut project = Project::empty(store, config.clone(), actor.into(), clock);
        let body = EventBody::ProjectCreated {
            features: config.features,
            labels: config.labels,
            schedule: config.schedule,
            k: config.k,
            object_count: project.store.len(),
        };
        let event = project.event(body, 0);
        project.events.push(event);
        Ok(project)
    }

    /// Rebuilds a project from its event log alone.
    pub fn replay(store: Arc<FeatureStore>, events: &[AnnotationEvent], clock: Arc<dyn Clock>) -> Result<Self> {
        let (first, rest) = events.split_first().ok_or_else(|| Error::Format("event log is empty".into()))?;
        let EventBody::ProjectCreated { features, labels, schedule, k, object_count } = &first.body else {
            return Err(Error::Format("event log must start with project_created".into()));
        };
        if *object_count != store.len() {
            return Err(Error::Format(format!(
                "event log is for {object_count} objects, feature store has {}",
                store.len()
            )));
        }
        let config = ProjectConfig { features: features.clone(), labels: labels.clone(), schedule: schedule.clone(), k: *k };
        config.validate()?;
        let mut project = Project::empty(store, config, first.actor.clone(), clock);
        project.events.push(first.clone());
        for event in rest {
            project.apply(event.clone())?;
        }
        Ok(project)
    }

    fn empty(store: Arc<FeatureStore>, config: ProjectConfig, actor: String, clock: Arc<dyn Clock>) -> Self {
        Project {
            book: ClusterBook::new(store.len()),
            store,
            config,
            iteration: 0,
            sessions: BTreeMap::new(),
            open_sessions: BTreeMap::new(),
            tree: None,
            events: Vec::new(),
            clock,
            actor,
        }
    }

    pub fn store(&self) -> &Arc<FeatureStore> {
        &self.store
    }

    pub fn config(&self) -> &ProjectConfig {
        &self.config
    }

    pub fn actor(&self) -> &str {
        &self.actor
    }

    pub fn set_actor(&mut self, actor: impl Into<String>) {
        self.actor = actor.into();
    }

    /// Number of iterations started so far.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn book(&self) -> &ClusterBook {
        &self.book
    }

    pub fn tree(&self) -> Option<&Hierarchy> {
        self.tree.as_ref()
    }

    pub fn events(&self) -> &[AnnotationEvent] {
        &self.events
    }

    pub fn session(&self, id: u64) -> Result<&GrowSession> {
        self.sessions.get(&id).ok_or_else(|| Error::NotFound { kind: "grow session", id: id.to_string() })
    }

    /// The uncommitted session of `cluster`, if one is open.
    pub fn open_session_of(&self, cluster: ClusterId) -> Option<u64> {
        self.open_sessions.get(&cluster).copied()
    }

    pub fn growth_queue(&self) -> Vec<ClusterId> {
        self.book.growth_queue()
    }

    pub fn schedule_exhausted(&self) -> bool {
        self.iteration >= self.config.schedule.len()
    }

    fn event(&self, body: EventBody, objects_affected: usize) -> AnnotationEvent {
        let last = self.events.last().map_or(f64::NEG_INFINITY, |e| e.timestamp);
        AnnotationEvent {
            timestamp: self.clock.now().max(last),
            actor: self.actor.clone(),
            body,
            objects_affected: objects_affected as u64,
        }
    }

    fn record(&mut self, body: EventBody, objects_affected: usize) -> Result<()> {
        let event = self.event(body, objects_affected);
        self.apply(event)
    }

    /// Applies one event. On error the state is unchanged and the event is
    /// not recorded.
    pub fn apply(&mut self, event: AnnotationEvent) -> Result<()> {
        if let Some(last) = self.events.last() {
            if event.timestamp < last.timestamp {
                return Err(Error::Protocol("event timestamps must not decrease".into()));
            }
        }
        match &event.body {
            EventBody::ProjectCreated { .. } => {
                return Err(Error::Protocol("project_created may only start a log".into()));
            }
            EventBody::IterationStarted { iteration, m, seeds } => self.apply_iteration(*iteration, *m, seeds)?,
            EventBody::ClusterApproved { cluster } => {
                self.book.validate(*cluster, Verdict::Approve)?;
            }
            EventBody::ClusterFlagged { cluster } => {
                self.book.validate(*cluster, Verdict::ApproveFlag)?;
            }
            EventBody::ClusterRejected { cluster } => {
                self.book.validate(*cluster, Verdict::Reject)?;
            }
            EventBody::GrowOpened { session, cluster } => {
                if *session != self.sessions.len() as u64 {
                    return Err(Error::Protocol(format!(
                        "expected grow session {}, got {session}",
                        self.sessions.len()
                    )));
                }
                if let Some(open) = self.open_sessions.get(cluster) {
                    return Err(Error::State(format!("cluster {cluster} already has open grow session {open}")));
                }
                let s = self.book.open_grow_session(&self.store, *cluster)?;
                self.sessions.insert(*session, s);
                self.open_sessions.insert(*cluster, *session);
            }
            EventBody::PageVerdict { session, page, verdict } => {
                self.session_mut(*session)?.record_page_verdict(*page, *verdict)?;
            }
            EventBody::CandidateRemoved { session, object } => {
                let o = self.store.require_index(object)?;
                self.session_mut(*session)?.remove_candidate(o)?;
            }
            EventBody::CandidateAccepted { session, object } => {
                let o = self.store.require_index(object)?;
                self.session_mut(*session)?.accept_candidate(o)?;
            }
            EventBody::GrowCommitted { session, cluster, added } => {
                let s = self.sessions.get(session).ok_or_else(|| Error::NotFound {
                    kind: "grow session",
                    id: session.to_string(),
                })?;
                if s.cluster_id != *cluster {
                    return Err(Error::Protocol(format!("session {session} grows {}, not {cluster}", s.cluster_id)));
                }
                let would_add =
                    s.accepted_candidates()?.iter().filter(|o| self.book.unassigned().contains(o)).count();
                if s.is_committed() || would_add != *added {
                    return Err(Error::Protocol(format!(
                        "commit of session {session} adds {would_add} objects, event says {added}"
                    )));
                }
                let s = self.sessions.get_mut(session).expect("checked above");
                self.book.commit_grow(s)?;
                self.open_sessions.remove(cluster);
            }
            EventBody::TreeBuilt { leaves } => {
                let tree = build_upgma(&self.grown_centroids())?;
                if tree.leaves().count() != *leaves {
                    return Err(Error::Protocol(format!(
                        "tree has {} leaves, event says {leaves}",
                        tree.leaves().count()
                    )));
                }
                self.tree = Some(tree);
            }
            EventBody::NodeMerged { into, from } => self.tree_mut()?.merge_nodes(*into, *from)?,
            EventBody::NodeMoved { node, parent } => self.tree_mut()?.move_node(*node, *parent)?,
            EventBody::NodeNamed { node, name } => self.tree_mut()?.rename_node(*node, name)?,
        }
        self.events.push(event);
        Ok(())
    }

    fn apply_iteration(&mut self, iteration: usize, m: usize, seeds: &[Vec<String>]) -> Result<()> {
        self.check_can_start()?;
        let expected = self.iteration + 1;
        if iteration != expected || self.config.schedule[iteration - 1] != m {
            return Err(Error::Protocol(format!(
                "expected iteration {expected} with m={}, got iteration {iteration} with m={m}",
                self.config.schedule[self.iteration]
            )));
        }
        let mut taken = BTreeSet::new();
        let mut indexed = Vec::with_capacity(seeds.len());
        for seed in seeds {
            if seed.is_empty() {
                return Err(Error::Protocol("empty seed".into()));
            }
            let mut members = Vec::with_capacity(seed.len());
            for id in seed {
                let o = self.store.require_index(id)?;
                if !self.book.unassigned().contains(&o) || !taken.insert(o) {
                    return Err(Error::Protocol(format!("seed object {id} is not available")));
                }
                members.push(o);
            }
            indexed.push(members);
        }
        for members in indexed {
            self.book.propose(&self.store, members, iteration)?;
        }
        self.iteration = iteration;
        Ok(())
    }

    fn session_mut(&mut self, id: u64) -> Result<&mut GrowSession> {
        self.sessions.get_mut(&id).ok_or_else(|| Error::NotFound { kind: "grow session", id: id.to_string() })
    }

    fn tree_mut(&mut self) -> Result<&mut Hierarchy> {
        self.tree.as_mut().ok_or_else(|| Error::State("no tree has been built".into()))
    }

    fn grown_centroids(&self) -> BTreeMap<ClusterId, Vec<f64>> {
        self.book
            .clusters()
            .filter(|c| c.status == ClusterStatus::Grown)
            .map(|c| (c.cluster_id, c.centroid.clone()))
            .collect()
    }

    fn check_can_start(&self) -> Result<()> {
        if self.schedule_exhausted() {
            return Err(Error::State("schedule is exhausted".into()));
        }
        if let Some(c) =
            self.book.clusters().find(|c| matches!(c.status, ClusterStatus::Proposed | ClusterStatus::Validated))
        {
            return Err(Error::State(format!(
                "cluster {} of the previous iteration is still {:?}",
                c.cluster_id, c.status
            )));
        }
        Ok(())
    }

    /// Snapshot of the next clustering job, or `None` once the schedule
    /// is exhausted.
    pub fn prepare_iteration(&self) -> Result<Option<IterationPlan>> {
        if self.schedule_exhausted() {
            return Ok(None);
        }
        self.check_can_start()?;
        Ok(Some(IterationPlan {
            iteration: self.iteration + 1,
            m: self.config.schedule[self.iteration],
            k: self.config.k,
            unassigned: self.book.unassigned().iter().copied().collect(),
            store: Arc::clone(&self.store),
        }))
    }

    /// Records the result of a job prepared by [`Project::prepare_iteration`].
    pub fn finish_iteration(&mut self, plan: &IterationPlan, seeds: Vec<Vec<usize>>) -> Result<IterationOutcome> {
        if plan.iteration != self.iteration + 1 || !plan.unassigned.iter().copied().eq(self.book.unassigned().iter().copied())
        {
            return Err(Error::State("project changed while clustering ran".into()));
        }
        let first = self.book.next_cluster_id().0;
        let clustered = seeds.iter().map(Vec::len).sum();
        let seeds: Vec<Vec<String>> =
            seeds.iter().map(|s| s.iter().map(|&o| self.store.object_id(o).to_string()).collect()).collect();
        let count = seeds.len() as u64;
        self.record(EventBody::IterationStarted { iteration: plan.iteration, m: plan.m, seeds }, clustered)?;
        Ok(IterationOutcome::Started {
            iteration: plan.iteration,
            m: plan.m,
            proposed: (first..first + count).map(ClusterId).collect(),
        })
    }

    /// Runs the next clustering step in the calling thread.
    pub fn start_iteration(&mut self, cancel: &AtomicBool) -> Result<IterationOutcome> {
        let Some(plan) = self.prepare_iteration()? else {
            return Ok(IterationOutcome::Done);
        };
        let seeds = plan.run(cancel)?;
        self.finish_iteration(&plan, seeds)
    }

    pub fn validate_cluster(&mut self, cluster: ClusterId, verdict: Verdict) -> Result<&Cluster> {
        let size = self.book.cluster(cluster)?.seed_members.len();
        let body = match verdict {
            Verdict::Approve => EventBody::ClusterApproved { cluster },
            Verdict::ApproveFlag => EventBody::ClusterFlagged { cluster },
            Verdict::Reject => EventBody::ClusterRejected { cluster },
        };
        self.record(body, size)?;
        self.book.cluster(cluster)
    }

    /// Opens a grow session for a validated cluster. An already open
    /// session is returned as is.
    pub fn open_grow(&mut self, cluster: ClusterId) -> Result<u64> {
        if let Some(s) = self.open_sessions.get(&cluster) {
            return Ok(*s);
        }
        let session = self.sessions.len() as u64;
        self.record(EventBody::GrowOpened { session, cluster }, 0)?;
        Ok(session)
    }

    pub fn page_verdict(&mut self, session: u64, page: usize, verdict: PageVerdict) -> Result<()> {
        let size = self.session(session)?.page(page).map_or(0, <[usize]>::len);
        self.record(EventBody::PageVerdict { session, page, verdict }, size)
    }

    pub fn remove_candidate(&mut self, session: u64, object: &str) -> Result<()> {
        self.store.require_index(object)?;
        self.session(session)?;
        self.record(EventBody::CandidateRemoved { session, object: object.to_string() }, 1)
    }

    pub fn accept_candidate(&mut self, session: u64, object: &str) -> Result<()> {
        self.store.require_index(object)?;
        self.session(session)?;
        self.record(EventBody::CandidateAccepted { session, object: object.to_string() }, 1)
    }

    /// Commits a grow session. Committing an already committed session
    /// returns the original result and records nothing.
    pub fn commit_grow(&mut self, session: u64) -> Result<CommitResult> {
        let s = self.session(session)?;
        let cluster = s.cluster_id;
        if !s.is_committed() {
            let added =
                s.accepted_candidates()?.iter().filter(|o| self.book.unassigned().contains(o)).count();
            self.record(EventBody::GrowCommitted { session, cluster, added }, added)?;
        }
        let s = self.session(session)?;
        Ok(CommitResult {
            session,
            cluster,
            added: s.added().iter().map(|&o| self.store.object_id(o).to_string()).collect(),
        })
    }

    /// Builds the UPGMA tree over all grown clusters, replacing any
    /// previous tree and its names.
    pub fn build_tree(&mut self) -> Result<&Hierarchy> {
        let centroids = self.grown_centroids();
        if centroids.is_empty() {
            return Err(Error::State("no grown clusters to arrange".into()));
        }
        let objects = self
            .book
            .clusters()
            .filter(|c| c.status == ClusterStatus::Grown)
            .map(Cluster::size)
            .sum();
        self.record(EventBody::TreeBuilt { leaves: centroids.len() }, objects)?;
        Ok(self.tree.as_ref().expect("just built"))
    }

    fn objects_under(&self, node: NodeId) -> Result<usize> {
        let tree = self.tree.as_ref().ok_or_else(|| Error::State("no tree has been built".into()))?;
        let mut n = 0;
        for c in tree.subtree_clusters(node)? {
            n += self.book.cluster(c)?.size();
        }
        Ok(n)
    }

    /// Folds node `from` into node `into`.
    pub fn merge_nodes(&mut self, into: NodeId, from: NodeId) -> Result<()> {
        let n = self.objects_under(from)?;
        self.record(EventBody::NodeMerged { into, from }, n)
    }

    pub fn move_node(&mut self, node: NodeId, parent: NodeId) -> Result<()> {
        let n = self.objects_under(node)?;
        self.record(EventBody::NodeMoved { node, parent }, n)
    }

    pub fn name_node(&mut self, node: NodeId, name: &str) -> Result<()> {
        let n = self.objects_under(node)?;
        self.record(EventBody::NodeNamed { node, name: name.to_string() }, n)
    }

    pub fn labeling(&self) -> Result<Labeling> {
        export_labeling(self.tree.as_ref(), &self.book, &self.store)
    }

    /// Object → prior label for every object that carries one.
    pub fn prior_labels(&self) -> ClassLabeling {
        (0..self.store.len())
            .filter_map(|i| self.store.prior_label(i).map(|l| (self.store.object_id(i).to_string(), l.to_string())))
            .collect()
    }

    /// Metrics of the current labeling. Without an explicit reference the
    /// prior labels of the store are used when there are any.
    pub fn metrics(&self, reference: Option<&ClassLabeling>) -> Result<MetricsReport> {
        let labeling = self.labeling()?;
        let priors = self.prior_labels();
        let reference = reference.or((!priors.is_empty()).then_some(&priors));
        Ok(metrics_report(&labeling.assignments, labeling.unassigned.len(), reference, &self.events))
    }

    /// Checks every cross-structure invariant of the project.
    pub fn check_invariants(&self) -> Result<()> {
        self.book.check_invariants()?;
        if self.iteration > self.config.schedule.len() {
            return Err(Error::State("iteration index exceeds the schedule".into()));
        }
        for (cluster, session) in &self.open_sessions {
            let s = self.session(*session)?;
            if s.cluster_id != *cluster || s.is_committed() {
                return Err(Error::State(format!("open session {session} is inconsistent")));
            }
        }
        if let Some(tree) = &self.tree {
            tree.check()?;
            for leaf in tree.leaves() {
                for &c in &leaf.clusters {
                    if self.book.cluster(c)?.status != ClusterStatus::Grown {
                        return Err(Error::State(format!("tree leaf holds cluster {c}, which is not grown")));
                    }
                }
            }
        }
        Ok(())
    }
}
