//! HDBSCAN* seed extraction over the unassigned pool.
//!
//! Stages: core distances (exact k-NN) → mutual reachability → minimum
//! spanning tree (Prim, weights computed on the fly) → condensed tree →
//! excess-of-mass selection. Objects are addressed by their index in the
//! [`FeatureStore`].
//!
//! Equal-weight MST edges are merged as one multi-way split when the tree is
//! condensed, so the partition depends only on the connected components at
//! each density level and never on edge order.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, Ordering as AtomicOrdering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{squared_euclidean, FeatureStore};
use crate::numeric::exact_sum;

/// Minimum cluster sizes used by default, largest first.
pub const DEFAULT_SCHEDULE: [usize; 6] = [128, 64, 32, 16, 8, 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusteringParams {
    /// Neighborhood size for the core distance.
    pub k: usize,
    /// Minimum cluster size.
    pub m: usize,
}

impl ClusteringParams {
    pub fn new(k: usize, m: usize) -> Result<Self> {
        if k < 1 {
            return Err(Error::Value("neighborhood size k must be at least 1".into()));
        }
        if m < 2 {
            return Err(Error::Value(format!("minimum cluster size must be at least 2, got {m}")));
        }
        Ok(ClusteringParams { k, m })
    }
}

/// Distance from `object` to its k-th nearest other candidate.
pub fn core_distance(store: &FeatureStore, object: usize, k: usize, candidates: &[usize]) -> Result<f64> {
    check_candidates(candidates, k)?;
    if !candidates.contains(&object) {
        return Err(Error::Value(format!("object {} is not a candidate", store.object_id(object))));
    }
    let mut nearest = KSmallest::new(k);
    for &c in candidates {
        if c != object {
            nearest.offer(store.squared_distance(object, c));
        }
    }
    Ok(nearest.kth().sqrt())
}

pub fn mutual_reachability(
    store: &FeatureStore,
    a: usize,
    b: usize,
    k: usize,
    candidates: &[usize],
) -> Result<f64> {
    let core_a = core_distance(store, a, k, candidates)?;
    let core_b = core_distance(store, b, k, candidates)?;
    if !candidates.contains(&b) {
        return Err(Error::Value(format!("object {} is not a candidate", store.object_id(b))));
    }
    Ok(core_a.max(core_b).max(store.distance(a, b)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MstEdge {
    /// Smaller store index of the two endpoints.
    pub a: usize,
    pub b: usize,
    /// Mutual reachability distance.
    pub weight: f64,
}

impl MstEdge {
    fn new(x: usize, y: usize, weight: f64) -> Self {
        MstEdge { a: x.min(y), b: x.max(y), weight }
    }
}

pub fn build_mst(store: &FeatureStore, candidates: &[usize], k: usize) -> Result<Vec<MstEdge>> {
    build_mst_cancellable(store, candidates, k, &AtomicBool::new(false))
}

pub fn build_mst_cancellable(
    store: &FeatureStore,
    candidates: &[usize],
    k: usize,
    cancel: &AtomicBool,
) -> Result<Vec<MstEdge>> {
    if candidates.len() < 2 {
        return Err(Error::InsufficientPoints { needed: 2, got: candidates.len() });
    }
    check_candidates(candidates, k)?;
    let points = PackedPoints::new(store, candidates);
    let core_sq = points.core_distances_squared(k, cancel)?;
    points.prim(&core_sq, cancel)
}

/// Contiguous copy of the candidate vectors for cache-friendly scans.
struct PackedPoints<'a> {
    dim: usize,
    data: Vec<f32>,
    ids: &'a [usize],
}

impl<'a> PackedPoints<'a> {
    fn new(store: &FeatureStore, ids: &'a [usize]) -> Self {
        let dim = store.dimensionality();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(store.vector(i));
        }
        PackedPoints { dim, data, ids }
    }

    #[inline]
    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    fn sq(&self, i: usize, j: usize) -> f64 {
        squared_euclidean(self.row(i), self.row(j))
    }

    fn core_distances_squared(&self, k: usize, cancel: &AtomicBool) -> Result<Vec<f64>> {
        let n = self.ids.len();
        if k == 1 {
            let mut best = vec![f64::INFINITY; n];
            for i in 0..n {
                if i % 256 == 0 && cancel.load(AtomicOrdering::Relaxed) {
                    return Err(Error::Cancelled);
                }
                let row = self.row(i);
                let (head, tail) = best.split_at_mut(i + 1);
                let bi = &mut head[i];
                for (j, bj) in (i + 1..n).zip(tail.iter_mut()) {
                    let d = squared_euclidean(row, self.row(j));
                    if d < *bi {
                        *bi = d;
                    }
                    if d < *bj {
                        *bj = d;
                    }
                }
            }
            return Ok(best);
        }
        let mut heaps: Vec<KSmallest> = (0..n).map(|_| KSmallest::new(k)).collect();
        for i in 0..n {
            if i % 256 == 0 && cancel.load(AtomicOrdering::Relaxed) {
                return Err(Error::Cancelled);
            }
            for j in i + 1..n {
                let d = self.sq(i, j);
                heaps[i].offer(d);
                heaps[j].offer(d);
            }
        }
        Ok(heaps.iter().map(KSmallest::kth).collect())
    }

    /// Prim's algorithm on the implicit complete mutual-reachability graph.
    /// Ties go to the lexicographically smaller (store index) edge.
    fn prim(&self, core_sq: &[f64], cancel: &AtomicBool) -> Result<Vec<MstEdge>> {
        let n = self.ids.len();
        let ids = self.ids;
        let key = |u: usize, v: usize| {
            let (x, y) = (ids[u], ids[v]);
            (x.min(y), x.max(y))
        };
        let mut best = vec![f64::INFINITY; n];
        let mut from = vec![usize::MAX; n];
        let mut remaining: Vec<usize> = (1..n).collect();
        let mut edges = Vec::with_capacity(n - 1);
        let mut current = 0usize;

        while !remaining.is_empty() {
            if edges.len() % 256 == 0 && cancel.load(AtomicOrdering::Relaxed) {
                return Err(Error::Cancelled);
            }
            let row = self.row(current);
            let core_u = core_sq[current];
            let mut pick = 0usize;
            for (slot, &v) in remaining.iter().enumerate() {
                let d = squared_euclidean(row, self.row(v)).max(core_u).max(core_sq[v]);
                if d < best[v] || (d == best[v] && key(current, v) < key(from[v], v)) {
                    best[v] = d;
                    from[v] = current;
                }
                let w = remaining[pick];
                if best[v] < best[w] || (best[v] == best[w] && key(from[v], v) < key(from[w], w)) {
                    pick = slot;
                }
            }
            let next = remaining.swap_remove(pick);
            edges.push(MstEdge::new(ids[from[next]], ids[next], best[next].sqrt()));
            current = next;
        }
        Ok(edges)
    }
}

/// Running set of the k smallest values seen.
struct KSmallest {
    k: usize,
    values: Vec<f64>,
}

impl KSmallest {
    fn new(k: usize) -> Self {
        KSmallest { k, values: Vec::with_capacity(k) }
    }

    #[inline]
    fn offer(&mut self, v: f64) {
        if self.values.len() == self.k {
            if v >= self.values[self.k - 1] {
                return;
            }
            self.values.pop();
        }
        let pos = self.values.partition_point(|&x| x <= v);
        self.values.insert(pos, v);
    }

    fn kth(&self) -> f64 {
        self.values[self.k - 1]
    }
}

fn check_candidates(candidates: &[usize], k: usize) -> Result<()> {
    if candidates.len() <= k {
        return Err(Error::InsufficientPoints { needed: k + 1, got: candidates.len() });
    }
    Ok(())
}

/// Cluster stability with support for points that persist to infinite
/// density (coincident points). Compared lexicographically: the number of
/// infinite contributions first, then the finite remainder.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    pub infinite: u64,
    pub finite: f64,
}

impl Stability {
    pub const ZERO: Stability = Stability { infinite: 0, finite: 0.0 };

    /// Σ (λ_exit − λ_birth) over the given exit densities.
    pub fn from_exits<I>(lambda_birth: f64, exits: I) -> Self
    where
        I: IntoIterator<Item = f64>,
    {
        let mut infinite = 0u64;
        let mut finite = Vec::new();
        if lambda_birth.is_infinite() {
            return Stability::ZERO;
        }
        for lambda in exits {
            if lambda.is_infinite() {
                infinite += 1;
                finite.push(-lambda_birth);
            } else {
                finite.push(lambda - lambda_birth);
            }
        }
        Stability { infinite, finite: exact_sum(finite) }
    }

    pub fn sum<'a, I>(parts: I) -> Self
    where
        I: IntoIterator<Item = &'a Stability>,
    {
        let mut infinite = 0u64;
        let mut finite = Vec::new();
        for p in parts {
            infinite += p.infinite;
            finite.push(p.finite);
        }
        Stability { infinite, finite: exact_sum(finite) }
    }

    /// Scalar view: infinite if any point persisted forever.
    pub fn value(&self) -> f64 {
        if self.infinite > 0 {
            f64::INFINITY
        } else {
            self.finite
        }
    }
}

impl PartialOrd for Stability {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.infinite.cmp(&other.infinite).then(self.finite.total_cmp(&other.finite)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FallenPoint {
    pub object: usize,
    /// Density (1 / distance) at which the point left the node.
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedNode {
    pub node_id: usize,
    pub parent_id: Option<usize>,
    pub lambda_birth: f64,
    pub lambda_death: f64,
    /// Points that leave this node individually (not via a child node).
    pub point_members: Vec<FallenPoint>,
    pub child_nodes: Vec<usize>,
    /// Number of points alive at birth.
    pub size: usize,
    pub stability: Stability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedTree {
    nodes: Vec<CondensedNode>,
    min_cluster_size: usize,
}

impl CondensedTree {
    pub fn root(&self) -> &CondensedNode {
        &self.nodes[0]
    }

    pub fn nodes(&self) -> &[CondensedNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &CondensedNode {
        &self.nodes[id]
    }

    pub fn min_cluster_size(&self) -> usize {
        self.min_cluster_size
    }

    /// All points that belong to the node, including those of descendants.
    pub fn members(&self, id: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes[id].size);
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            out.extend(node.point_members.iter().map(|p| p.object));
            stack.extend(&node.child_nodes);
        }
        out.sort_unstable();
        out
    }
}

/// Single-linkage dendrogram where equal-weight merges are one node.
struct Dendrogram {
    /// Leaf positions map to these store indices.
    points: Vec<usize>,
    /// Internal nodes, ids offset by `points.len()`.
    internal: Vec<DendroNode>,
}

struct DendroNode {
    weight: f64,
    children: Vec<usize>,
    size: usize,
}

impl Dendrogram {
    fn from_mst(mst: &[MstEdge]) -> Result<Self> {
        if mst.is_empty() {
            return Err(Error::Value("spanning tree has no edges".into()));
        }
        let points: Vec<usize> = mst
            .iter()
            .flat_map(|e| [e.a, e.b])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if points.len() != mst.len() + 1 {
            return Err(Error::Value(format!(
                "{} edges over {} points is not a spanning tree",
                mst.len(),
                points.len()
            )));
        }
        let pos = |idx: usize| points.binary_search(&idx).expect("endpoint collected above");
        let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(mst.len());
        for e in mst {
            if e.weight.is_nan() || e.weight < 0.0 {
                return Err(Error::Value(format!("edge weight {} is not a non-negative number", e.weight)));
            }
            edges.push((e.weight, pos(e.a), pos(e.b)));
        }
        edges.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));

        let n = points.len();
        let mut uf = UnionFind::new(n);
        // dendrogram node currently representing each union-find root
        let mut top: Vec<usize> = (0..n).collect();
        let mut sizes: Vec<usize> = vec![1; n];
        let mut internal: Vec<DendroNode> = Vec::with_capacity(n - 1);

        let mut start = 0;
        while start < edges.len() {
            let weight = edges[start].0;
            let mut end = start;
            while end < edges.len() && edges[end].0 == weight {
                end += 1;
            }
            // Components touched by this weight level, grouped by what they merge into.
            let mut touched: Vec<usize> = Vec::new();
            for &(_, x, y) in &edges[start..end] {
                touched.push(uf.find(x));
                touched.push(uf.find(y));
            }
            touched.sort_unstable();
            touched.dedup();
            for &(_, x, y) in &edges[start..end] {
                if !uf.union(x, y) {
                    return Err(Error::Value("spanning tree contains a cycle".into()));
                }
            }
            let mut groups: Vec<(usize, usize)> = touched.iter().map(|&r| (uf.find(r), r)).collect();
            groups.sort_unstable();
            let mut g = 0;
            while g < groups.len() {
                let root = groups[g].0;
                let mut children = Vec::new();
                let mut size = 0;
                while g < groups.len() && groups[g].0 == root {
                    let old = groups[g].1;
                    children.push(top[old]);
                    size += sizes[top[old]];
                    g += 1;
                }
                let id = n + internal.len();
                internal.push(DendroNode { weight, children, size });
                sizes.push(size);
                top[root] = id;
            }
            start = end;
        }
        Ok(Dendrogram { points, internal })
    }

    fn root(&self) -> usize {
        self.points.len() + self.internal.len() - 1
    }

    fn size(&self, node: usize) -> usize {
        if node < self.points.len() {
            1
        } else {
            self.internal[node - self.points.len()].size
        }
    }

    fn collect_points(&self, node: usize, out: &mut Vec<usize>) {
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            if x < self.points.len() {
                out.push(self.points[x]);
            } else {
                stack.extend(&self.internal[x - self.points.len()].children);
            }
        }
    }
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), rank: vec![0; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            Ordering::Less => self.parent[ra] = rb,
            Ordering::Greater => self.parent[rb] = ra,
            Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

fn lambda_of(weight: f64) -> f64 {
    if weight == 0.0 {
        f64::INFINITY
    } else {
        1.0 / weight
    }
}

/// Condenses the single-linkage hierarchy of `mst`: at every split, parts
/// with fewer than `m` points fall out of the node; two or more parts of at
/// least `m` points become child nodes.
pub fn condense_tree(mst: &[MstEdge], m: usize) -> Result<CondensedTree> {
    if m < 2 {
        return Err(Error::Value(format!("minimum cluster size must be at least 2, got {m}")));
    }
    let dendro = Dendrogram::from_mst(mst)?;
    let mut nodes = vec![CondensedNode {
        node_id: 0,
        parent_id: None,
        lambda_birth: 0.0,
        lambda_death: 0.0,
        point_members: Vec::new(),
        child_nodes: Vec::new(),
        size: dendro.points.len(),
        stability: Stability::ZERO,
    }];
    let mut stack = vec![(0usize, dendro.root())];
    let mut fallen = Vec::new();

    while let Some((cid, mut d)) = stack.pop() {
        let birth = nodes[cid].lambda_birth;
        let mut exits: Vec<f64> = Vec::new();
        loop {
            let dn = &dendro.internal[d - dendro.points.len()];
            let lambda = lambda_of(dn.weight);
            let (big, small): (Vec<usize>, Vec<usize>) =
                dn.children.iter().partition(|&&c| dendro.size(c) >= m);
            for &s in &small {
                fallen.clear();
                dendro.collect_points(s, &mut fallen);
                fallen.sort_unstable();
                for &p in &fallen {
                    nodes[cid].point_members.push(FallenPoint { object: p, lambda });
                    exits.push(lambda);
                }
            }
            match big.len() {
                0 => {
                    nodes[cid].lambda_death = lambda;
                    break;
                }
                1 => {
                    d = big[0];
                }
                _ => {
                    for &b in &big {
                        let child_id = nodes.len();
                        let size = dendro.size(b);
                        nodes.push(CondensedNode {
                            node_id: child_id,
                            parent_id: Some(cid),
                            lambda_birth: lambda,
                            lambda_death: lambda,
                            point_members: Vec::new(),
                            child_nodes: Vec::new(),
                            size,
                            stability: Stability::ZERO,
                        });
                        nodes[cid].child_nodes.push(child_id);
                        exits.extend(std::iter::repeat_n(lambda, size));
                        stack.push((child_id, b));
                    }
                    nodes[cid].lambda_death = lambda;
                    break;
                }
            }
        }
        nodes[cid].stability = Stability::from_exits(birth, exits);
    }
    Ok(CondensedTree { nodes, min_cluster_size: m })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seed {
    pub seed_id: usize,
    /// Sorted store indices.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSet {
    /// Ordered by descending size, then smallest member.
    pub seeds: Vec<Seed>,
    /// Sorted store indices.
    pub noise: Vec<usize>,
}

impl SeedSet {
    pub fn clustered_count(&self) -> usize {
        self.seeds.iter().map(|s| s.members.len()).sum()
    }
}

/// Excess-of-mass selection: a node is kept iff its stability strictly
/// exceeds the summed best stabilities of its children. The root is never
/// selected.
pub fn extract_seeds(tree: &CondensedTree) -> SeedSet {
    let nodes = tree.nodes();
    let mut value: Vec<Stability> = nodes.iter().map(|n| n.stability).collect();
    let mut selected = vec![false; nodes.len()];
    // Children always have larger ids than their parent.
    for id in (1..nodes.len()).rev() {
        let node = &nodes[id];
        if node.child_nodes.is_empty() {
            selected[id] = true;
            continue;
        }
        let children = Stability::sum(node.child_nodes.iter().map(|&c| &value[c]));
        if node.stability > children {
            selected[id] = true;
        } else {
            value[id] = children;
        }
    }

    let mut seeds: Vec<Vec<usize>> = Vec::new();
    let mut stack: Vec<usize> = nodes[0].child_nodes.clone();
    while let Some(id) = stack.pop() {
        if selected[id] {
            seeds.push(tree.members(id));
        } else {
            stack.extend(&nodes[id].child_nodes);
        }
    }
    let in_seed: BTreeSet<usize> = seeds.iter().flatten().copied().collect();
    let noise = tree.members(0).into_iter().filter(|p| !in_seed.contains(p)).collect();
    finish_seed_set(seeds, noise)
}

fn finish_seed_set(mut seeds: Vec<Vec<usize>>, noise: Vec<usize>) -> SeedSet {
    seeds.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    SeedSet {
        seeds: seeds.into_iter().enumerate().map(|(seed_id, members)| Seed { seed_id, members }).collect(),
        noise,
    }
}

/// Runs the full pipeline restricted to `unassigned`.
pub fn cluster_unassigned(store: &FeatureStore, unassigned: &[usize], params: ClusteringParams) -> Result<SeedSet> {
    cluster_unassigned_cancellable(store, unassigned, params, &AtomicBool::new(false))
}

pub fn cluster_unassigned_cancellable(
    store: &FeatureStore,
    unassigned: &[usize],
    params: ClusteringParams,
    cancel: &AtomicBool,
) -> Result<SeedSet> {
    let params = ClusteringParams::new(params.k, params.m)?;
    let needed = params.m.max(params.k + 1);
    if unassigned.len() < needed {
        return Err(Error::InsufficientPoints { needed, got: unassigned.len() });
    }
    let mut candidates = unassigned.to_vec();
    candidates.sort_unstable();
    candidates.dedup();
    if candidates.len() != unassigned.len() {
        return Err(Error::Value("unassigned set contains duplicates".into()));
    }
    let mst = build_mst_cancellable(store, &candidates, params.k, cancel)?;
    let tree = condense_tree(&mst, params.m)?;
    Ok(extract_seeds(&tree))
}
