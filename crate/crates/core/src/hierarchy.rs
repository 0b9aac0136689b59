//! Average-linkage (UPGMA) tree over cluster centroids, the edits an
//! annotator applies to it, and the transfer of node names to objects.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{point_distance, FeatureStore};
use crate::lifecycle::{ClusterBook, ClusterId};

/// Label used for objects whose leaf has no named ancestor.
pub const UNNAMED: &str = "unnamed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyNode {
    pub node_id: NodeId,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    /// Non-empty exactly for leaves; more than one after leaves are merged.
    pub clusters: Vec<ClusterId>,
    pub name: Option<String>,
    /// Average inter-group distance at which an internal node was formed.
    pub merge_height: f64,
}

impl HierarchyNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// One UPGMA merge: the two groups (as sorted cluster ids) and the height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeStep {
    pub left: Vec<ClusterId>,
    pub right: Vec<ClusterId>,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    nodes: BTreeMap<NodeId, HierarchyNode>,
    root: NodeId,
    next_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeStats {
    pub node_count: usize,
    /// Number of nodes on the longest root-to-leaf path.
    pub depth: usize,
    pub named_count: usize,
}

/// UPGMA merge sequence over the centroids. Ties in height go to the pair
/// whose smallest cluster ids are lexicographically smaller.
pub fn upgma_merges(centroids: &BTreeMap<ClusterId, Vec<f64>>) -> Result<Vec<MergeStep>> {
    Ok(upgma(centroids)?.1)
}

pub fn build_upgma(centroids: &BTreeMap<ClusterId, Vec<f64>>) -> Result<Hierarchy> {
    Ok(upgma(centroids)?.0)
}

fn upgma(centroids: &BTreeMap<ClusterId, Vec<f64>>) -> Result<(Hierarchy, Vec<MergeStep>)> {
    if centroids.is_empty() {
        return Err(Error::Value("cannot build a hierarchy without clusters".into()));
    }
    let ids: Vec<ClusterId> = centroids.keys().copied().collect();
    let points: Vec<&Vec<f64>> = centroids.values().collect();
    let n = ids.len();
    let mut tree = Hierarchy { nodes: BTreeMap::new(), root: NodeId(0), next_id: 0 };
    for &c in &ids {
        let id = tree.alloc();
        tree.nodes.insert(
            id,
            HierarchyNode { node_id: id, parent: None, children: vec![], clusters: vec![c], name: None, merge_height: 0.0 },
        );
    }

    // sums[i][j]: total pairwise distance between groups i and j (j < i).
    let mut sums: Vec<Vec<f64>> = (0..n).map(|i| (0..i).map(|j| point_distance(points[i], points[j])).collect()).collect();
    let sum = |s: &Vec<Vec<f64>>, i: usize, j: usize| if i > j { s[i][j] } else { s[j][i] };
    let mut members: Vec<Vec<ClusterId>> = ids.iter().map(|&c| vec![c]).collect();
    let mut node_of: Vec<NodeId> = (0..n as u64).map(NodeId).collect();
    let mut active: Vec<usize> = (0..n).collect();
    let mut steps = Vec::with_capacity(n.saturating_sub(1));

    while active.len() > 1 {
        let mut best: Option<(f64, (ClusterId, ClusterId), usize, usize)> = None;
        for (ai, &i) in active.iter().enumerate() {
            for &j in &active[ai + 1..] {
                let h = sum(&sums, i, j) / (members[i].len() * members[j].len()) as f64;
                let (ki, kj) = (members[i][0], members[j][0]);
                let key = (ki.min(kj), ki.max(kj));
                let better = match &best {
                    None => true,
                    Some((bh, bk, _, _)) => h < *bh || (h == *bh && key < *bk),
                };
                if better {
                    best = Some((h, key, i, j));
                }
            }
        }
        let (height, _, i, j) = best.expect("at least two active groups");
        let (keep, gone) = if members[i][0] < members[j][0] { (i, j) } else { (j, i) };
        steps.push(MergeStep { left: members[keep].clone(), right: members[gone].clone(), height });

        for &k in &active {
            if k != keep && k != gone {
                let s = sum(&sums, keep, k) + sum(&sums, gone, k);
                if keep > k {
                    sums[keep][k] = s;
                } else {
                    sums[k][keep] = s;
                }
            }
        }
        let moved = std::mem::take(&mut members[gone]);
        members[keep].extend(moved);
        members[keep].sort_unstable();

        let node = tree.alloc();
        let (a, b) = (node_of[keep], node_of[gone]);
        tree.nodes.insert(
            node,
            HierarchyNode { node_id: node, parent: None, children: vec![a, b], clusters: vec![], name: None, merge_height: height },
        );
        tree.node_mut(a).parent = Some(node);
        tree.node_mut(b).parent = Some(node);
        node_of[keep] = node;
        active.retain(|&x| x != gone);
    }
    tree.root = node_of[active[0]];
    Ok((tree, steps))
}

impl Hierarchy {
    fn alloc(&mut self) -> NodeId {
        let id = NodeId(self.next_id);
        self.next_id += 1;
        id
    }

    fn node_mut(&mut self, id: NodeId) -> &mut HierarchyNode {
        self.nodes.get_mut(&id).expect("node exists")
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node(&self, id: NodeId) -> Result<&HierarchyNode> {
        self.nodes.get(&id).ok_or_else(|| Error::not_found("node", id))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &HierarchyNode> {
        self.nodes.values()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaves(&self) -> impl Iterator<Item = &HierarchyNode> {
        self.nodes.values().filter(|n| n.is_leaf())
    }

    /// Is `ancestor` on the path from `node` to the root (inclusive)?
    pub fn is_ancestor(&self, ancestor: NodeId, node: NodeId) -> bool {
        let mut cur = Some(node);
        while let Some(c) = cur {
            if c == ancestor {
                return true;
            }
            cur = self.nodes.get(&c).and_then(|n| n.parent);
        }
        false
    }

    pub fn depth_of(&self, node: NodeId) -> Result<usize> {
        let mut depth = 0;
        let mut cur = Some(self.node(node)?.node_id);
        while let Some(c) = cur {
            depth += 1;
            cur = self.nodes[&c].parent;
        }
        Ok(depth)
    }

    /// Clusters referenced by the node and all its descendants.
    pub fn subtree_clusters(&self, node: NodeId) -> Result<Vec<ClusterId>> {
        self.node(node)?;
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[&n];
            out.extend(&node.clusters);
            stack.extend(&node.children);
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Slash-joined names from the root down to `node`; unnamed nodes are
    /// skipped. `None` when no node on the path is named.
    pub fn path_of(&self, node: NodeId) -> Result<Option<String>> {
        let mut names = Vec::new();
        let mut cur = Some(self.node(node)?.node_id);
        while let Some(c) = cur {
            let n = &self.nodes[&c];
            if let Some(name) = &n.name {
                names.push(name.as_str());
            }
            cur = n.parent;
        }
        names.reverse();
        Ok((!names.is_empty()).then(|| names.join("/")))
    }

    /// Folds `b` into `a`: clusters and children of `b` end up under `a` and
    /// `b` is deleted.
    pub fn merge_nodes(&mut self, a: NodeId, b: NodeId) -> Result<()> {
        self.node(a)?;
        self.node(b)?;
        if a == b {
            return Err(Error::Structure("cannot merge a node into itself".into()));
        }
        if self.is_ancestor(a, b) || self.is_ancestor(b, a) {
            return Err(Error::Structure(format!("{a} and {b} are in an ancestor relation")));
        }
        let old_parent = self.nodes[&b].parent;
        if let Some(p) = old_parent {
            self.node_mut(p).children.retain(|&c| c != b);
        }
        let gone = self.nodes.remove(&b).expect("checked above");

        let a_leaf = self.nodes[&a].is_leaf();
        match (a_leaf, gone.is_leaf()) {
            (true, true) => {
                let target = self.node_mut(a);
                target.clusters.extend(gone.clusters);
                target.clusters.sort_unstable();
            }
            (a_leaf, b_leaf) => {
                if a_leaf {
                    // a becomes internal; its own clusters move to a fresh leaf
                    let clusters = std::mem::take(&mut self.node_mut(a).clusters);
                    self.add_leaf(a, clusters);
                }
                if b_leaf {
                    self.add_leaf(a, gone.clusters);
                } else {
                    for c in gone.children {
                        self.node_mut(c).parent = Some(a);
                        self.node_mut(a).children.push(c);
                    }
                }
            }
        }
        if let Some(p) = old_parent {
            self.prune_empty(p);
        }
        Ok(())
    }

    fn add_leaf(&mut self, parent: NodeId, clusters: Vec<ClusterId>) -> NodeId {
        let id = self.alloc();
        self.nodes.insert(
            id,
            HierarchyNode { node_id: id, parent: Some(parent), children: vec![], clusters, name: None, merge_height: 0.0 },
        );
        self.node_mut(parent).children.push(id);
        id
    }

    /// Removes internal nodes left without children, walking upwards.
    fn prune_empty(&mut self, mut node: NodeId) {
        loop {
            let n = &self.nodes[&node];
            if node == self.root || !n.children.is_empty() || !n.clusters.is_empty() {
                return;
            }
            let parent = n.parent.expect("non-root node has a parent");
            self.nodes.remove(&node);
            self.node_mut(parent).children.retain(|&c| c != node);
            node = parent;
        }
    }

    pub fn move_node(&mut self, node: NodeId, new_parent: NodeId) -> Result<()> {
        self.node(node)?;
        if self.node(new_parent)?.is_leaf() {
            return Err(Error::Structure(format!("{new_parent} is a leaf and cannot take children")));
        }
        if self.is_ancestor(node, new_parent) {
            return Err(Error::Structure(format!("moving {node} under {new_parent} would create a cycle")));
        }
        let old = self.nodes[&node].parent.expect("only the root has no parent, and it is an ancestor of all");
        if old == new_parent {
            return Ok(());
        }
        self.node_mut(old).children.retain(|&c| c != node);
        self.node_mut(new_parent).children.push(node);
        self.node_mut(node).parent = Some(new_parent);
        self.prune_empty(old);
        Ok(())
    }

    pub fn rename_node(&mut self, node: NodeId, name: &str) -> Result<()> {
        validate_name(name)?;
        self.nodes.get_mut(&node).ok_or_else(|| Error::not_found("node", node))?.name = Some(name.to_string());
        Ok(())
    }

    pub fn stats(&self) -> TreeStats {
        let mut depth = 0;
        let mut stack = vec![(self.root, 1usize)];
        while let Some((n, d)) = stack.pop() {
            depth = depth.max(d);
            stack.extend(self.nodes[&n].children.iter().map(|&c| (c, d + 1)));
        }
        TreeStats {
            node_count: self.nodes.len(),
            depth,
            named_count: self.nodes.values().filter(|n| n.name.is_some()).count(),
        }
    }

    /// Structural self-check: parent/child links agree, every node is
    /// reachable from the root, leaves carry clusters and internal nodes
    /// do not.
    pub fn check(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![self.root];
        if self.node(self.root)?.parent.is_some() {
            return Err(Error::Structure("root has a parent".into()));
        }
        while let Some(n) = stack.pop() {
            if !seen.insert(n) {
                return Err(Error::Structure(format!("{n} reached twice")));
            }
            let node = self.node(n)?;
            if node.is_leaf() == node.clusters.is_empty() {
                return Err(Error::Structure(format!("{n} mixes leaf and internal roles")));
            }
            for &c in &node.children {
                if self.node(c)?.parent != Some(n) {
                    return Err(Error::Structure(format!("{c} does not point back to {n}")));
                }
                stack.push(c);
            }
        }
        if seen.len() != self.nodes.len() {
            return Err(Error::Structure("unreachable nodes".into()));
        }
        Ok(())
    }
}

pub fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(Error::Value("node name must not be empty".into()));
    }
    if name.contains('/') {
        return Err(Error::Value(format!("node name `{name}` must not contain `/`")));
    }
    Ok(())
}

/// Final object labels: path per labeled object plus the residual objects.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeling {
    pub assignments: BTreeMap<String, String>,
    pub unassigned: BTreeSet<String>,
}

impl Labeling {
    pub fn total(&self) -> usize {
        self.assignments.len() + self.unassigned.len()
    }

    /// `object_id,label_path` sorted by object id; residuals get an empty path.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut rows: Vec<(&str, &str)> = self.assignments.iter().map(|(o, p)| (o.as_str(), p.as_str())).collect();
        rows.extend(self.unassigned.iter().map(|o| (o.as_str(), "")));
        rows.sort_unstable();
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        w.write_record(["object_id", "label_path"])?;
        for (o, p) in rows {
            w.write_record([o, p])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv of UTF-8 input")
    }
}

/// Transfers node names to the objects of each leaf. Objects in clusters the
/// tree does not reference are reported as unassigned.
pub fn export_labeling(tree: Option<&Hierarchy>, book: &ClusterBook, store: &FeatureStore) -> Result<Labeling> {
    let mut labeling = Labeling::default();
    let mut labeled = vec![false; store.len()];
    if let Some(tree) = tree {
        for leaf in tree.leaves() {
            let path = tree.path_of(leaf.node_id)?.unwrap_or_else(|| UNNAMED.to_string());
            for &c in &leaf.clusters {
                for o in book.cluster(c)?.members() {
                    labeled[o] = true;
                    labeling.assignments.insert(store.object_id(o).to_string(), path.clone());
                }
            }
        }
    }
    for (o, done) in labeled.iter().enumerate() {
        if !done {
            labeling.unassigned.insert(store.object_id(o).to_string());
        }
    }
    Ok(labeling)
}
