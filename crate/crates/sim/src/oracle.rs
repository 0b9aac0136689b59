//! Truth-driven annotator that replays the whole interactive workflow:
//! seed validation, page-wise growth, tree construction and naming.

use std::collections::BTreeMap;

use densesort_core::lifecycle::{ClusterId, PageVerdict, Probe, Verdict};
use densesort_core::metrics::ClassLabeling;
use densesort_core::{Error, Result};
use densesort_service::{IterationOutcome, Project, ProjectHandle, ServiceResult};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum PageAcceptRule {
    /// Every object on the page carries the cluster's label.
    AllMatch,
    /// At least a fraction `theta` of the page carries it.
    Majority { theta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OraclePolicy {
    pub cluster_purity_threshold: f64,
    pub page_accept_rule: PageAcceptRule,
    /// Decide the first page past the boundary object by object.
    pub turtle_enabled: bool,
}

impl Default for OraclePolicy {
    fn default() -> Self {
        OraclePolicy { cluster_purity_threshold: 0.9, page_accept_rule: PageAcceptRule::AllMatch, turtle_enabled: false }
    }
}

impl OraclePolicy {
    pub fn validate(&self) -> Result<()> {
        let in_range = |x: f64| (0.0..=1.0).contains(&x);
        if !in_range(self.cluster_purity_threshold) {
            return Err(Error::Value("cluster_purity_threshold must lie in [0, 1]".into()));
        }
        if let PageAcceptRule::Majority { theta } = self.page_accept_rule {
            if !in_range(theta) {
                return Err(Error::Value("majority theta must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Decisions taken by the oracle, per kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgments {
    pub cluster_verdicts: usize,
    pub page_verdicts: usize,
    pub object_decisions: usize,
    pub naming_acts: usize,
}

impl Judgments {
    pub fn total(&self) -> usize {
        self.cluster_verdicts + self.page_verdicts + self.object_decisions + self.naming_acts
    }
}

/// What the oracle did in one clustering iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub m: usize,
    pub proposed: Vec<ClusterId>,
    pub approved: Vec<ClusterId>,
    /// Approved seed members plus objects added by growth.
    pub objects_sorted: usize,
    /// Cluster, page and object decisions made in this iteration.
    pub decisions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationLog {
    pub iterations: Vec<IterationLog>,
    pub judgments: Judgments,
}

/// Most frequent truth label among `objects` and its share. Objects
/// without a truth label count as one extra class that never wins a tie
/// against a real label; `None` means that class dominates.
pub fn dominant_label<'a>(truth: &ClassLabeling, objects: impl IntoIterator<Item = &'a str>) -> (Option<String>, f64) {
    let mut counts: BTreeMap<Option<&str>, usize> = BTreeMap::new();
    let mut total = 0usize;
    for o in objects {
        *counts.entry(truth.get(o).map(String::as_str)).or_default() += 1;
        total += 1;
    }
    if total == 0 {
        return (None, 0.0);
    }
    // labels iterate in order, so the first strict maximum is the smallest
    let mut best: (Option<&str>, usize) = (None, counts.get(&None).copied().unwrap_or(0));
    for (label, &n) in counts.iter().filter(|(l, _)| l.is_some()) {
        if n >= best.1 && (best.0.is_none() || n > best.1) {
            best = (*label, n);
        }
    }
    (best.0.map(str::to_string), best.1 as f64 / total as f64)
}

pub struct Annotator<'a> {
    truth: &'a ClassLabeling,
    policy: OraclePolicy,
    judgments: Judgments,
}

fn ids(project: &Project, objects: &[usize]) -> Vec<String> {
    objects.iter().map(|&o| project.store().object_id(o).to_string()).collect()
}

impl<'a> Annotator<'a> {
    pub fn new(truth: &'a ClassLabeling, policy: OraclePolicy) -> Result<Self> {
        policy.validate()?;
        Ok(Annotator { truth, policy, judgments: Judgments::default() })
    }

    pub fn judgments(&self) -> Judgments {
        self.judgments
    }

    fn matches(&self, object: &str, label: &str) -> bool {
        self.truth.get(object).is_some_and(|l| l == label)
    }

    fn page_accepted(&self, objects: &[String], label: &str) -> bool {
        let hits = objects.iter().filter(|o| self.matches(o, label)).count();
        match self.policy.page_accept_rule {
            PageAcceptRule::AllMatch => hits == objects.len(),
            PageAcceptRule::Majority { theta } => hits as f64 >= theta * objects.len() as f64,
        }
    }

    /// Approves or rejects one proposed cluster. Returns whether it was approved.
    pub fn validate(&mut self, handle: &ProjectHandle, cluster: ClusterId) -> ServiceResult<bool> {
        let seed = handle.read(|p| p.book().cluster(cluster).map(|c| ids(p, &c.seed_members)))?;
        let (label, purity) = dominant_label(self.truth, seed.iter().map(String::as_str));
        let approve = label.is_some() && purity >= self.policy.cluster_purity_threshold;
        let verdict = if approve { Verdict::Approve } else { Verdict::Reject };
        handle.mutate(|p| p.validate_cluster(cluster, verdict).map(|_| ()))?;
        self.judgments.cluster_verdicts += 1;
        Ok(approve)
    }

    /// Grows one validated cluster and commits it. Returns the number of
    /// objects added and the decisions spent.
    pub fn grow(&mut self, handle: &ProjectHandle, cluster: ClusterId) -> ServiceResult<(usize, usize)> {
        let seed = handle.read(|p| p.book().cluster(cluster).map(|c| ids(p, &c.seed_members)))?;
        let label = dominant_label(self.truth, seed.iter().map(String::as_str)).0;
        let session = handle.mutate(|p| p.open_grow(cluster))?;
        let mut decisions = 0;
        loop {
            let probe = handle.read(|p| p.session(session).and_then(|s| s.next_probe()))?;
            let Probe::Page(page) = probe else { break };
            let objects = handle.read(|p| p.session(session).and_then(|s| s.page(page).map(|o| ids(p, o))))?;
            let ok = label.as_deref().is_some_and(|l| self.page_accepted(&objects, l));
            let verdict = if ok { PageVerdict::Match } else { PageVerdict::NoMatch };
            handle.mutate(|p| p.page_verdict(session, page, verdict))?;
            self.judgments.page_verdicts += 1;
            decisions += 1;
        }
        if let (true, Some(label)) = (self.policy.turtle_enabled, &label) {
            decisions += self.turtle_walk(handle, session, label)?;
        }
        let result = handle.mutate(|p| p.commit_grow(session))?;
        Ok((result.added.len(), decisions))
    }

    /// Reviews the first page past the boundary object by object, if it
    /// holds any matching object.
    fn turtle_walk(&mut self, handle: &ProjectHandle, session: u64, label: &str) -> ServiceResult<usize> {
        let objects = handle.read(|p| {
            let s = p.session(session)?;
            Ok::<_, Error>(match s.current_page() {
                Some(page) => ids(p, s.page(page)?),
                None => Vec::new(),
            })
        })?;
        let Some(first_miss) = objects.iter().position(|o| !self.matches(o, label)) else {
            return Ok(0);
        };
        if !objects.iter().any(|o| self.matches(o, label)) {
            return Ok(0);
        }
        handle.mutate(|p| p.remove_candidate(session, &objects[first_miss]))?;
        let mut decisions = 1;
        for (i, o) in objects.iter().enumerate() {
            if i == first_miss {
                continue;
            }
            if self.matches(o, label) {
                handle.mutate(|p| p.accept_candidate(session, o))?;
            } else {
                handle.mutate(|p| p.remove_candidate(session, o))?;
            }
            decisions += 1;
        }
        self.judgments.object_decisions += decisions;
        Ok(decisions)
    }

    /// Runs every remaining iteration of the schedule, validating and
    /// growing what each one proposes.
    pub fn run_iterations(&mut self, handle: &ProjectHandle) -> ServiceResult<Vec<IterationLog>> {
        let mut logs = Vec::new();
        loop {
            // clusters left over from an interrupted run come first
            self.settle(handle, None)?;
            let IterationOutcome::Started { iteration, m, proposed } = handle.run_iteration()? else { break };
            let mut log =
                IterationLog { iteration, m, proposed: proposed.clone(), approved: Vec::new(), objects_sorted: 0, decisions: 0 };
            self.settle(handle, Some(&mut log))?;
            logs.push(log);
        }
        Ok(logs)
    }

    /// Validates every proposed cluster, then grows the growth queue.
    fn settle(&mut self, handle: &ProjectHandle, mut log: Option<&mut IterationLog>) -> ServiceResult<()> {
        let proposed: Vec<ClusterId> = handle.read(|p| {
            p.book()
                .clusters()
                .filter(|c| c.status == densesort_core::lifecycle::ClusterStatus::Proposed)
                .map(|c| c.cluster_id)
                .collect()
        });
        for c in proposed {
            let approved = self.validate(handle, c)?;
            if let Some(log) = log.as_deref_mut() {
                log.decisions += 1;
                if approved {
                    log.approved.push(c);
                    log.objects_sorted += handle.read(|p| p.book().cluster(c).map(|c| c.seed_members.len()))?;
                }
            }
        }
        for c in handle.read(Project::growth_queue) {
            let (added, decisions) = self.grow(handle, c)?;
            if let Some(log) = log.as_deref_mut() {
                log.objects_sorted += added;
                log.decisions += decisions;
            }
        }
        Ok(())
    }

    /// Builds the tree over all grown clusters and names every leaf after
    /// the dominant truth label of its members. Leaves dominated by
    /// unlabeled objects stay unnamed.
    pub fn build_and_name(&mut self, handle: &ProjectHandle) -> ServiceResult<()> {
        let leaves = handle.mutate(|p| {
            p.build_tree()?;
            let tree = p.tree().expect("tree was just built");
            let mut leaves = Vec::new();
            for leaf in tree.leaves() {
                let mut members = Vec::new();
                for &c in &leaf.clusters {
                    members.extend(p.book().cluster(c)?.members());
                }
                leaves.push((leaf.node_id, ids(p, &members)));
            }
            Ok(leaves)
        })?;
        for (node, members) in leaves {
            if let (Some(label), _) = dominant_label(self.truth, members.iter().map(String::as_str)) {
                handle.mutate(|p| p.name_node(node, &label))?;
                self.judgments.naming_acts += 1;
            }
        }
        Ok(())
    }

    /// Complete workflow: all iterations, then tree and names. A project
    /// without any grown cluster gets no tree.
    pub fn annotate(mut self, handle: &ProjectHandle) -> ServiceResult<AnnotationLog> {
        let iterations = self.run_iterations(handle)?;
        let any_grown = handle.read(|p| {
            p.book().clusters().any(|c| c.status == densesort_core::lifecycle::ClusterStatus::Grown)
        });
        if any_grown {
            self.build_and_name(handle)?;
        }
        Ok(AnnotationLog { iterations, judgments: self.judgments })
    }
}
