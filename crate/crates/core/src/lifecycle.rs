//! Cluster validation and growing.
//!
//! A [`ClusterBook`] owns the assignment of objects to clusters and keeps
//! every object either unassigned or in exactly one live cluster. Growing
//! happens in a [`GrowSession`]: candidates are ordered by distance to the
//! seed centroid and split into pages; the annotator judges pages chosen by
//! a galloping search (probes 0, 1, 3, 7, ...) followed by a binary search
//! for the last matching page. Removing a single candidate switches the
//! session to turtle mode, where the remaining candidates are judged one by
//! one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{squared_distance_to_point, FeatureStore};

pub const PAGE_SIZE: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClusterId(pub u64);

impl fmt::Display for ClusterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterStatus {
    Proposed,
    Validated,
    Rejected,
    Grown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Approve,
    ApproveFlag,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub cluster_id: ClusterId,
    /// Store indices of the seed. Kept after rejection for the record, but a
    /// rejected cluster owns no objects.
    pub seed_members: Vec<usize>,
    pub grown_members: Vec<usize>,
    /// Mean of the seed vectors, fixed at creation.
    pub centroid: Vec<f64>,
    pub status: ClusterStatus,
    pub flagged: bool,
    pub created_iteration: usize,
}

impl Cluster {
    /// Objects currently owned by the cluster.
    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        let live = self.status != ClusterStatus::Rejected;
        self.seed_members.iter().chain(&self.grown_members).copied().filter(move |_| live)
    }

    pub fn size(&self) -> usize {
        if self.status == ClusterStatus::Rejected {
            0
        } else {
            self.seed_members.len() + self.grown_members.len()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterBook {
    clusters: BTreeMap<ClusterId, Cluster>,
    owner: Vec<Option<ClusterId>>,
    unassigned: BTreeSet<usize>,
    next_id: u64,
}

impl ClusterBook {
    pub fn new(object_count: usize) -> Self {
        ClusterBook {
            clusters: BTreeMap::new(),
            owner: vec![None; object_count],
            unassigned: (0..object_count).collect(),
            next_id: 0,
        }
    }

    pub fn object_count(&self) -> usize {
        self.owner.len()
    }

    pub fn unassigned(&self) -> &BTreeSet<usize> {
        &self.unassigned
    }

    pub fn owner_of(&self, object: usize) -> Option<ClusterId> {
        self.owner.get(object).copied().flatten()
    }

    pub fn clusters(&self) -> impl Iterator<Item = &Cluster> {
        self.clusters.values()
    }

    pub fn cluster(&self, id: ClusterId) -> Result<&Cluster> {
        self.clusters.get(&id).ok_or_else(|| Error::not_found("cluster", id))
    }

    pub fn next_cluster_id(&self) -> ClusterId {
        ClusterId(self.next_id)
    }

    /// Registers a seed as a proposed cluster. Every member must be
    /// unassigned.
    pub fn propose(&mut self, store: &FeatureStore, mut members: Vec<usize>, iteration: usize) -> Result<ClusterId> {
        if members.is_empty() {
            return Err(Error::Value("a cluster seed needs at least one member".into()));
        }
        members.sort_unstable();
        members.dedup();
        if let Some(&m) = members.iter().find(|m| !self.unassigned.contains(m)) {
            return Err(Error::State(format!("object {} is not unassigned", store.object_id(m))));
        }
        let id = ClusterId(self.next_id);
        self.next_id += 1;
        for &m in &members {
            self.unassigned.remove(&m);
            self.owner[m] = Some(id);
        }
        let centroid = store.centroid(&members);
        self.clusters.insert(
            id,
            Cluster {
                cluster_id: id,
                seed_members: members,
                grown_members: Vec::new(),
                centroid,
                status: ClusterStatus::Proposed,
                flagged: false,
                created_iteration: iteration,
            },
        );
        Ok(id)
    }

    pub fn validate(&mut self, id: ClusterId, verdict: Verdict) -> Result<&Cluster> {
        let cluster = self.clusters.get_mut(&id).ok_or_else(|| Error::not_found("cluster", id))?;
        if cluster.status != ClusterStatus::Proposed {
            return Err(Error::State(format!("cluster {id} is {:?}, expected proposed", cluster.status)));
        }
        match verdict {
            Verdict::Approve => cluster.status = ClusterStatus::Validated,
            Verdict::ApproveFlag => {
                cluster.status = ClusterStatus::Validated;
                cluster.flagged = true;
            }
            Verdict::Reject => {
                cluster.status = ClusterStatus::Rejected;
                for &m in &cluster.seed_members {
                    self.owner[m] = None;
                    self.unassigned.insert(m);
                }
            }
        }
        Ok(cluster)
    }

    /// Validated clusters awaiting growth: flagged first, then larger seeds,
    /// then lower id.
    pub fn growth_queue(&self) -> Vec<ClusterId> {
        let mut queue: Vec<&Cluster> =
            self.clusters.values().filter(|c| c.status == ClusterStatus::Validated).collect();
        queue.sort_by(|a, b| {
            b.flagged
                .cmp(&a.flagged)
                .then(b.seed_members.len().cmp(&a.seed_members.len()))
                .then(a.cluster_id.cmp(&b.cluster_id))
        });
        queue.into_iter().map(|c| c.cluster_id).collect()
    }

    pub fn open_grow_session(&self, store: &FeatureStore, id: ClusterId) -> Result<GrowSession> {
        let cluster = self.cluster(id)?;
        if cluster.status != ClusterStatus::Validated {
            return Err(Error::State(format!("cluster {id} is {:?}, expected validated", cluster.status)));
        }
        Ok(GrowSession::new(id, candidate_order(store, &cluster.centroid, &self.unassigned)))
    }

    /// Moves the accepted candidates of `session` into the cluster. Only
    /// candidates that are still unassigned are taken.
    pub fn commit_grow(&mut self, session: &mut GrowSession) -> Result<Vec<usize>> {
        if session.committed {
            return Err(Error::State("grow session already committed".into()));
        }
        let accepted = session.accepted_candidates()?;
        let id = session.cluster_id;
        let cluster = self.clusters.get_mut(&id).ok_or_else(|| Error::not_found("cluster", id))?;
        if cluster.status != ClusterStatus::Validated {
            return Err(Error::State(format!("cluster {id} is {:?}, expected validated", cluster.status)));
        }
        let added: Vec<usize> = accepted.into_iter().filter(|o| self.unassigned.contains(o)).collect();
        for &o in &added {
            self.unassigned.remove(&o);
            self.owner[o] = Some(id);
        }
        cluster.grown_members.extend_from_slice(&added);
        cluster.status = ClusterStatus::Grown;
        session.committed = true;
        session.added = added.clone();
        Ok(added)
    }

    /// Checks the assignment exclusivity invariant.
    pub fn check_invariants(&self) -> Result<()> {
        let mut seen = vec![false; self.owner.len()];
        for c in self.clusters.values() {
            for m in c.members() {
                if seen[m] {
                    return Err(Error::State(format!("object {m} is in two clusters")));
                }
                seen[m] = true;
                if self.owner[m] != Some(c.cluster_id) || self.unassigned.contains(&m) {
                    return Err(Error::State(format!("object {m} ownership is inconsistent")));
                }
            }
        }
        for (m, s) in seen.iter().enumerate() {
            if !s && (!self.unassigned.contains(&m) || self.owner[m].is_some()) {
                return Err(Error::State(format!("object {m} is neither assigned nor unassigned")));
            }
        }
        Ok(())
    }
}

/// Unassigned objects sorted by (distance to `centroid`, object id).
pub fn candidate_order(store: &FeatureStore, centroid: &[f64], unassigned: &BTreeSet<usize>) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> =
        unassigned.iter().map(|&o| (squared_distance_to_point(store.vector(o), centroid), o)).collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| store.object_id(a.1).cmp(store.object_id(b.1))));
    keyed.into_iter().map(|(_, o)| o).collect()
}

/// Display order for validation: start at the member closest to the member
/// centroid, then repeatedly take the remaining member farthest from the
/// previous one. Ties go to the smaller object id.
pub fn dissimilar_display_order(store: &FeatureStore, members: &[usize]) -> Result<Vec<usize>> {
    dissimilar_display_prefix(store, members, members.len())
}

/// First `limit` entries of [`dissimilar_display_order`], in O(limit · n).
pub fn dissimilar_display_prefix(store: &FeatureStore, members: &[usize], limit: usize) -> Result<Vec<usize>> {
    if members.is_empty() {
        return Err(Error::Value("cannot order an empty member list".into()));
    }
    let better = |d: f64, o: usize, best_d: f64, best_o: usize, farther: bool| {
        let ord = if farther { d.total_cmp(&best_d) } else { best_d.total_cmp(&d) };
        ord.is_gt() || (ord.is_eq() && store.object_id(o) < store.object_id(best_o))
    };
    let centroid = store.centroid(members);
    let mut remaining = members.to_vec();
    let mut pick = 0;
    let mut pick_d = f64::INFINITY;
    for (slot, &o) in remaining.iter().enumerate() {
        let d = squared_distance_to_point(store.vector(o), &centroid);
        if slot == 0 || better(d, o, pick_d, remaining[pick], false) {
            pick = slot;
            pick_d = d;
        }
    }
    let mut order = Vec::with_capacity(limit.min(members.len()));
    order.push(remaining.swap_remove(pick));
    while order.len() < limit && !remaining.is_empty() {
        let prev = *order.last().expect("non-empty");
        let mut pick = 0;
        let mut pick_d = f64::NEG_INFINITY;
        for (slot, &o) in remaining.iter().enumerate() {
            let d = store.squared_distance(prev, o);
            if slot == 0 || better(d, o, pick_d, remaining[pick], true) {
                pick = slot;
                pick_d = d;
            }
        }
        order.push(remaining.swap_remove(pick));
    }
    Ok(order)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PageVerdict {
    Match,
    NoMatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PageStatus {
    Unseen,
    Match,
    NoMatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowMode {
    Search,
    Turtle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "page")]
pub enum Probe {
    Page(usize),
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SearchState {
    /// Probing page 2^step − 1 (clamped to the last page).
    Gallop { step: u32 },
    /// `lo` is the last known matching page, `hi` the first known mismatch.
    Binary { lo: Option<usize>, hi: usize },
    Done { threshold: Option<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct TurtleState {
    /// Pages before this one are taken whole.
    start_page: usize,
    current_page: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowSession {
    pub cluster_id: ClusterId,
    candidate_order: Vec<usize>,
    page_size: usize,
    page_verdicts: Vec<PageStatus>,
    mode: GrowMode,
    turtle_removed: BTreeSet<usize>,
    turtle_accepted: BTreeSet<usize>,
    committed: bool,
    search: SearchState,
    turtle: Option<TurtleState>,
    judged_pages: usize,
    object_decisions: usize,
    added: Vec<usize>,
}

impl GrowSession {
    pub fn new(cluster_id: ClusterId, candidate_order: Vec<usize>) -> Self {
        Self::with_page_size(cluster_id, candidate_order, PAGE_SIZE)
    }

    pub fn with_page_size(cluster_id: ClusterId, candidate_order: Vec<usize>, page_size: usize) -> Self {
        assert!(page_size > 0, "page size must be positive");
        let pages = candidate_order.len().div_ceil(page_size);
        let search = if pages == 0 { SearchState::Done { threshold: None } } else { SearchState::Gallop { step: 0 } };
        GrowSession {
            cluster_id,
            candidate_order,
            page_size,
            page_verdicts: vec![PageStatus::Unseen; pages],
            mode: GrowMode::Search,
            turtle_removed: BTreeSet::new(),
            turtle_accepted: BTreeSet::new(),
            committed: false,
            search,
            turtle: None,
            judged_pages: 0,
            object_decisions: 0,
            added: Vec::new(),
        }
    }

    pub fn page_count(&self) -> usize {
        self.page_verdicts.len()
    }

    pub fn candidate_order(&self) -> &[usize] {
        &self.candidate_order
    }

    pub fn page(&self, page: usize) -> Result<&[usize]> {
        if page >= self.page_count() {
            return Err(Error::not_found("page", page));
        }
        let start = page * self.page_size;
        let end = (start + self.page_size).min(self.candidate_order.len());
        Ok(&self.candidate_order[start..end])
    }

    pub fn page_verdicts(&self) -> &[PageStatus] {
        &self.page_verdicts
    }

    pub fn mode(&self) -> GrowMode {
        self.mode
    }

    pub fn is_committed(&self) -> bool {
        self.committed
    }

    pub fn turtle_removed(&self) -> &BTreeSet<usize> {
        &self.turtle_removed
    }

    pub fn turtle_accepted(&self) -> &BTreeSet<usize> {
        &self.turtle_accepted
    }

    /// Number of page-level judgments made so far.
    pub fn judged_pages(&self) -> usize {
        self.judged_pages
    }

    /// Number of individual accept/remove decisions made so far.
    pub fn object_decisions(&self) -> usize {
        self.object_decisions
    }

    /// Objects added by the commit, once committed.
    pub fn added(&self) -> &[usize] {
        &self.added
    }

    /// Last matching page once the search has pinned the boundary.
    pub fn threshold(&self) -> Option<usize> {
        match self.search {
            SearchState::Done { threshold } => threshold,
            _ => None,
        }
    }

    pub fn is_committable(&self) -> bool {
        !self.committed && (self.mode == GrowMode::Turtle || matches!(self.search, SearchState::Done { .. }))
    }

    pub fn next_probe(&self) -> Result<Probe> {
        if self.committed {
            return Err(Error::State("grow session already committed".into()));
        }
        if self.mode == GrowMode::Turtle {
            return Err(Error::State("binary search is disabled in turtle mode".into()));
        }
        Ok(self.pending_probe())
    }

    fn pending_probe(&self) -> Probe {
        let last = self.page_count().saturating_sub(1);
        match self.search {
            SearchState::Gallop { step } => {
                let p = 1usize.checked_shl(step).map_or(usize::MAX, |x| x - 1);
                Probe::Page(p.min(last))
            }
            SearchState::Binary { lo, hi } => {
                let lo = lo.map_or(-1i64, |x| x as i64);
                Probe::Page((lo + hi as i64).div_euclid(2) as usize)
            }
            SearchState::Done { .. } => Probe::Done,
        }
    }

    /// The page the annotator is looking at: the pending probe, the first
    /// page past the boundary once the search is done, or the turtle cursor.
    pub fn current_page(&self) -> Option<usize> {
        if self.committed {
            return None;
        }
        match (self.mode, self.turtle) {
            (GrowMode::Turtle, Some(t)) => (t.current_page < self.page_count()).then_some(t.current_page),
            _ => match self.pending_probe() {
                Probe::Page(p) => Some(p),
                Probe::Done => {
                    let next = self.threshold().map_or(0, |t| t + 1);
                    (next < self.page_count()).then_some(next)
                }
            },
        }
    }

    pub fn record_page_verdict(&mut self, page: usize, verdict: PageVerdict) -> Result<()> {
        if self.committed {
            return Err(Error::State("grow session already committed".into()));
        }
        if page >= self.page_count() {
            return Err(Error::Protocol(format!("page {page} is out of range")));
        }
        // The turtle cursor only moves forward, so it may revisit a page
        // judged during the search but never one judged in turtle mode.
        if self.mode == GrowMode::Turtle {
            return self.turtle_page_verdict(page, verdict);
        }
        if self.page_verdicts[page] != PageStatus::Unseen {
            return Err(Error::Protocol(format!("page {page} was already judged")));
        }
        let probe = match self.pending_probe() {
            Probe::Page(p) => p,
            Probe::Done => return Err(Error::Protocol("search is finished, no page is pending".into())),
        };
        if page != probe {
            return Err(Error::Protocol(format!("expected a verdict for page {probe}, got page {page}")));
        }
        self.page_verdicts[page] = match verdict {
            PageVerdict::Match => PageStatus::Match,
            PageVerdict::NoMatch => PageStatus::NoMatch,
        };
        self.judged_pages += 1;
        let last = self.page_count() - 1;
        self.search = match (self.search, verdict) {
            (SearchState::Gallop { .. }, PageVerdict::Match) if page == last => {
                SearchState::Done { threshold: Some(last) }
            }
            (SearchState::Gallop { step }, PageVerdict::Match) => SearchState::Gallop { step: step + 1 },
            (SearchState::Gallop { step }, PageVerdict::NoMatch) => {
                let lo = (step > 0).then(|| (1usize << (step - 1)) - 1);
                narrow(lo, page)
            }
            (SearchState::Binary { hi, .. }, PageVerdict::Match) => narrow(Some(page), hi),
            (SearchState::Binary { lo, .. }, PageVerdict::NoMatch) => narrow(lo, page),
            (SearchState::Done { .. }, _) => unreachable!("no probe pending when done"),
        };
        Ok(())
    }

    fn turtle_page_verdict(&mut self, page: usize, verdict: PageVerdict) -> Result<()> {
        let mut turtle = self.turtle.expect("turtle state exists in turtle mode");
        if page != turtle.current_page {
            return Err(Error::Protocol(format!(
                "turtle mode reviews page {} next, got page {page}",
                turtle.current_page
            )));
        }
        if verdict == PageVerdict::Match {
            let undecided: Vec<usize> = self
                .page(page)?
                .iter()
                .copied()
                .filter(|o| !self.turtle_removed.contains(o) && !self.turtle_accepted.contains(o))
                .collect();
            self.turtle_accepted.extend(undecided);
        }
        self.page_verdicts[page] = match verdict {
            PageVerdict::Match => PageStatus::Match,
            PageVerdict::NoMatch => PageStatus::NoMatch,
        };
        self.judged_pages += 1;
        turtle.current_page += 1;
        self.turtle = Some(turtle);
        Ok(())
    }

    fn check_on_current_page(&self, object: usize) -> Result<usize> {
        if self.committed {
            return Err(Error::State("grow session already committed".into()));
        }
        let page = self.current_page().ok_or_else(|| Error::Protocol("no page is under review".into()))?;
        if !self.page(page)?.contains(&object) {
            return Err(Error::Protocol(format!("object {object} is not on the current page {page}")));
        }
        if self.turtle_removed.contains(&object) || self.turtle_accepted.contains(&object) {
            return Err(Error::Protocol(format!("object {object} was already decided")));
        }
        Ok(page)
    }

    /// Removes one candidate from the current page and enters turtle mode.
    /// Pages before the current one are then taken whole.
    pub fn remove_candidate(&mut self, object: usize) -> Result<()> {
        let page = self.check_on_current_page(object)?;
        if self.mode == GrowMode::Search {
            self.mode = GrowMode::Turtle;
            self.turtle = Some(TurtleState { start_page: page, current_page: page });
        }
        self.turtle_removed.insert(object);
        self.object_decisions += 1;
        Ok(())
    }

    /// Accepts one candidate of the current page (turtle mode only).
    pub fn accept_candidate(&mut self, object: usize) -> Result<()> {
        if self.mode != GrowMode::Turtle {
            return Err(Error::State("individual acceptance requires turtle mode".into()));
        }
        self.check_on_current_page(object)?;
        self.turtle_accepted.insert(object);
        self.object_decisions += 1;
        Ok(())
    }

    /// Candidates the session would add, in candidate order.
    pub fn accepted_candidates(&self) -> Result<Vec<usize>> {
        if !self.is_committable() {
            return Err(Error::State("boundary not pinned yet".into()));
        }
        let whole_pages = match (self.mode, self.turtle) {
            (GrowMode::Turtle, Some(t)) => t.start_page,
            _ => self.threshold().map_or(0, |t| t + 1),
        };
        let whole = (whole_pages * self.page_size).min(self.candidate_order.len());
        let mut out: Vec<usize> = self.candidate_order[..whole].to_vec();
        out.extend(self.candidate_order[whole..].iter().filter(|o| self.turtle_accepted.contains(o)));
        Ok(out)
    }
}

fn narrow(lo: Option<usize>, hi: usize) -> SearchState {
    let adjacent = match lo {
        None => hi == 0,
        Some(l) => hi == l + 1,
    };
    if adjacent {
        SearchState::Done { threshold: lo }
    } else {
        SearchState::Binary { lo, hi }
    }
}
