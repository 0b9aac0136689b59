//! Slow, direct reference implementations for cross-checking the library.
//!
//! Nothing here shares code with `densesort-core`. Points are plain `f64`
//! vectors addressed by position.

#![allow(clippy::needless_range_loop)]

use std::collections::{BTreeMap, BTreeSet};

// ---------------------------------------------------------------------------
// Exact summation with a wide fixed-point accumulator.

const LIMBS: usize = 72;
const BIAS: i64 = 1074;

/// Correctly rounded (half-even) sum of finite values.
pub fn exact_sum(values: &[f64]) -> f64 {
    let mut acc = [0i128; LIMBS];
    for &v in values {
        assert!(v.is_finite(), "exact_sum oracle needs finite input");
        if v == 0.0 {
            continue;
        }
        let bits = v.to_bits();
        let exp = ((bits >> 52) & 0x7ff) as i64;
        let frac = bits & ((1u64 << 52) - 1);
        let (mant, e) = if exp == 0 { (frac, -1074) } else { (frac | (1u64 << 52), exp - 1075) };
        let pos = (e + BIAS) as usize;
        let wide = (mant as u128) << (pos % 32);
        let limb = pos / 32;
        for (i, chunk) in [(wide & 0xffff_ffff) as i128, ((wide >> 32) & 0xffff_ffff) as i128, (wide >> 64) as i128]
            .into_iter()
            .enumerate()
        {
            if v < 0.0 {
                acc[limb + i] -= chunk;
            } else {
                acc[limb + i] += chunk;
            }
        }
    }
    // Normalise to base-2^32 digits with a signed top limb.
    for i in 0..LIMBS - 1 {
        let carry = acc[i].div_euclid(1 << 32);
        acc[i] -= carry << 32;
        acc[i + 1] += carry;
    }
    let negative = acc[LIMBS - 1] < 0;
    if negative {
        for x in acc.iter_mut() {
            *x = -*x;
        }
        for i in 0..LIMBS - 1 {
            let carry = acc[i].div_euclid(1 << 32);
            acc[i] -= carry << 32;
            acc[i + 1] += carry;
        }
    }
    let bit = |p: usize| (acc[p / 32] >> (p % 32)) & 1 == 1;
    let Some(top_limb) = (0..LIMBS).rev().find(|&l| acc[l] != 0) else {
        return 0.0;
    };
    let top = top_limb * 32 + (127 - acc[top_limb].leading_zeros() as usize);
    let magnitude = if top < 53 {
        let m: u64 = (0..=top).filter(|&p| bit(p)).map(|p| 1u64 << p).sum();
        scale(m as f64, -BIAS)
    } else {
        let low = top - 52;
        let mut m: u64 = (low..=top).filter(|&p| bit(p)).map(|p| 1u64 << (p - low)).sum();
        let guard = bit(low - 1);
        let cut = low - 1;
        let sticky = acc[..cut / 32].iter().any(|&x| x != 0) || acc[cut / 32] & ((1i128 << (cut % 32)) - 1) != 0;
        if guard && (sticky || m & 1 == 1) {
            m += 1;
        }
        scale(m as f64, low as i64 - BIAS)
    };
    if negative {
        -magnitude
    } else {
        magnitude
    }
}

fn scale(x: f64, e: i64) -> f64 {
    let half = (e / 2) as i32;
    x * 2f64.powi(half) * 2f64.powi(e as i32 - half)
}

// ---------------------------------------------------------------------------
// Distances and neighbours.

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn distance_matrix(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    points.iter().map(|a| points.iter().map(|b| distance(a, b)).collect()).collect()
}

/// Distance from `i` to its `k`-th nearest other point, by full sort.
pub fn kth_neighbor_distance(points: &[Vec<f64>], i: usize, k: usize) -> f64 {
    let mut d: Vec<f64> = (0..points.len()).filter(|&j| j != i).map(|j| distance(&points[i], &points[j])).collect();
    d.sort_by(f64::total_cmp);
    d[k - 1]
}

pub fn mutual_reachability_matrix(points: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let n = points.len();
    let d = distance_matrix(points);
    let core: Vec<f64> = (0..n).map(|i| kth_neighbor_distance(points, i, k)).collect();
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 0.0 } else { core[i].max(core[j]).max(d[i][j]) }).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// Minimum spanning trees.

/// Sorted edge weights of a minimum spanning tree (Kruskal on the dense graph).
pub fn kruskal_weights(w: &[Vec<f64>]) -> Vec<f64> {
    let n = w.len();
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            edges.push((w[i][j], i, j));
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut comp: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    for (wt, i, j) in edges {
        let (ci, cj) = (comp[i], comp[j]);
        if ci != cj {
            for c in comp.iter_mut() {
                if *c == cj {
                    *c = ci;
                }
            }
            out.push(wt);
        }
    }
    out
}

/// Smallest total weight over every labelled spanning tree (Prüfer
/// enumeration, n ≤ 8).
pub fn brute_force_mst_total(w: &[Vec<f64>]) -> f64 {
    let n = w.len();
    assert!((2..=8).contains(&n));
    if n == 2 {
        return w[0][1];
    }
    let mut best = f64::INFINITY;
    let mut seq = vec![0usize; n - 2];
    loop {
        let edges = prufer_edges(&seq, n);
        let total = exact_sum(&edges.iter().map(|&(a, b)| w[a][b]).collect::<Vec<_>>());
        best = best.min(total);
        let mut i = 0;
        while i < seq.len() {
            seq[i] += 1;
            if seq[i] < n {
                break;
            }
            seq[i] = 0;
            i += 1;
        }
        if i == seq.len() {
            return best;
        }
    }
}

/// Minimum spanning-tree total by exhaustive include/exclude search over
/// the edge set. Branches that cannot beat the best tree found so far are
/// cut (their lower bound is the partial sum plus the cheapest remaining
/// edges), so every spanning tree is either visited or provably no better.
pub fn exhaustive_mst_total(w: &[Vec<f64>]) -> f64 {
    let n = w.len();
    assert!(n >= 2);
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            edges.push((w[i][j], i, j));
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = f64::INFINITY;
    let mut chosen = Vec::with_capacity(n - 1);
    let comp: Vec<usize> = (0..n).collect();
    branch(&edges, 0, &comp, &mut chosen, n - 1, &mut best);
    best
}

fn branch(edges: &[(f64, usize, usize)], at: usize, comp: &[usize], chosen: &mut Vec<f64>, need: usize, best: &mut f64) {
    if chosen.len() == need {
        let total = exact_sum(chosen);
        if total < *best {
            *best = total;
        }
        return;
    }
    let missing = need - chosen.len();
    if edges.len() - at < missing {
        return;
    }
    // Float bound with slack: only branches clearly worse than the best are cut.
    let bound: f64 = chosen.iter().sum::<f64>() + edges[at..at + missing].iter().map(|e| e.0).sum::<f64>();
    if bound > *best + 1e-9 * best.abs() {
        return;
    }
    let (wt, a, b) = edges[at];
    if comp[a] != comp[b] {
        let (keep, gone) = (comp[a], comp[b]);
        let merged: Vec<usize> = comp.iter().map(|&c| if c == gone { keep } else { c }).collect();
        chosen.push(wt);
        branch(edges, at + 1, &merged, chosen, need, best);
        chosen.pop();
    }
    branch(edges, at + 1, comp, chosen, need, best);
}

fn prufer_edges(seq: &[usize], n: usize) -> Vec<(usize, usize)> {
    let mut degree = vec![1usize; n];
    for &s in seq {
        degree[s] += 1;
    }
    let mut edges = Vec::with_capacity(n - 1);
    for &s in seq {
        let leaf = (0..n).find(|&v| degree[v] == 1).unwrap();
        edges.push((leaf, s));
        degree[leaf] -= 1;
        degree[s] -= 1;
    }
    let rest: Vec<usize> = (0..n).filter(|&v| degree[v] == 1).collect();
    edges.push((rest[0], rest[1]));
    edges
}

// ---------------------------------------------------------------------------
// HDBSCAN* by direct minimax distances.

#[derive(Debug, Clone, PartialEq)]
pub struct OracleClustering {
    /// Sorted members, ordered by descending size then smallest member.
    pub seeds: Vec<Vec<usize>>,
    pub noise: Vec<usize>,
}

struct Cluster {
    children: Vec<usize>,
    members: Vec<usize>,
    infinite: u64,
    finite: f64,
}

/// Seeds and noise for core neighbourhood `k` and minimum cluster size `m`.
pub fn hdbscan(points: &[Vec<f64>], k: usize, m: usize) -> OracleClustering {
    let n = points.len();
    let mut mm = mutual_reachability_matrix(points, k);
    // minimax path distance = single-linkage merge height
    for via in 0..n {
        for i in 0..n {
            for j in 0..n {
                let through = mm[i][via].max(mm[via][j]);
                if through < mm[i][j] {
                    mm[i][j] = through;
                }
            }
        }
    }
    let mut clusters: Vec<Cluster> = Vec::new();
    let all: Vec<usize> = (0..n).collect();
    grow_cluster(&mm, m, all, 0.0, &mut clusters);

    // Excess of mass, bottom-up; children always have larger indices.
    let mut best: Vec<(u64, f64)> = clusters.iter().map(|c| (c.infinite, c.finite)).collect();
    let mut selected = vec![false; clusters.len()];
    for id in (1..clusters.len()).rev() {
        let c = &clusters[id];
        if c.children.is_empty() {
            selected[id] = true;
            continue;
        }
        let inf: u64 = c.children.iter().map(|&x| best[x].0).sum();
        let fin = exact_sum(&c.children.iter().map(|&x| best[x].1).collect::<Vec<_>>());
        if c.infinite > inf || (c.infinite == inf && c.finite > fin) {
            selected[id] = true;
        } else {
            best[id] = (inf, fin);
        }
    }
    let mut seeds = Vec::new();
    let mut stack = clusters[0].children.clone();
    while let Some(id) = stack.pop() {
        if selected[id] {
            seeds.push(clusters[id].members.clone());
        } else {
            stack.extend(&clusters[id].children);
        }
    }
    for s in &mut seeds {
        s.sort_unstable();
    }
    seeds.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    let covered: BTreeSet<usize> = seeds.iter().flatten().copied().collect();
    let noise = (0..n).filter(|p| !covered.contains(p)).collect();
    OracleClustering { seeds, noise }
}

fn grow_cluster(mm: &[Vec<f64>], m: usize, members: Vec<usize>, birth: f64, out: &mut Vec<Cluster>) -> usize {
    let id = out.len();
    out.push(Cluster { children: Vec::new(), members: members.clone(), infinite: 0, finite: 0.0 });
    let mut alive = members;
    let mut exits: Vec<f64> = Vec::new();
    let mut child_sets: Vec<(Vec<usize>, f64)> = Vec::new();
    loop {
        let top = alive.iter().flat_map(|&a| alive.iter().map(move |&b| mm[a][b])).fold(0.0f64, f64::max);
        let lambda = if top == 0.0 { f64::INFINITY } else { 1.0 / top };
        let parts = components_below(mm, &alive, top);
        let (big, small): (Vec<_>, Vec<_>) = parts.into_iter().partition(|p| p.len() >= m);
        for p in &small {
            exits.extend(std::iter::repeat_n(lambda, p.len()));
        }
        match big.len() {
            0 => break,
            1 => alive = big.into_iter().next().unwrap(),
            _ => {
                for p in big {
                    exits.extend(std::iter::repeat_n(lambda, p.len()));
                    child_sets.push((p, lambda));
                }
                break;
            }
        }
    }
    if birth.is_finite() {
        let mut fin = Vec::new();
        let mut inf = 0;
        for l in exits {
            if l.is_infinite() {
                inf += 1;
                fin.push(-birth);
            } else {
                fin.push(l - birth);
            }
        }
        out[id].infinite = inf;
        out[id].finite = exact_sum(&fin);
    }
    for (set, lambda) in child_sets {
        let c = grow_cluster(mm, m, set, lambda, out);
        out[id].children.push(c);
    }
    id
}

/// Connected components of `set` using only pairs closer than `level`.
fn components_below(mm: &[Vec<f64>], set: &[usize], level: f64) -> Vec<Vec<usize>> {
    let mut seen = BTreeSet::new();
    let mut parts = Vec::new();
    for &start in set {
        if !seen.insert(start) {
            continue;
        }
        let mut part = vec![start];
        let mut i = 0;
        while i < part.len() {
            let a = part[i];
            for &b in set {
                if mm[a][b] < level && seen.insert(b) {
                    part.push(b);
                }
            }
            i += 1;
        }
        part.sort_unstable();
        parts.push(part);
    }
    parts
}

// ---------------------------------------------------------------------------
// Average-linkage agglomeration.

#[derive(Debug, Clone, PartialEq)]
pub struct OracleMerge {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub height: f64,
    /// Height difference to the runner-up pair at this step.
    pub margin: f64,
}

/// UPGMA by recomputing every group average from the raw point distances.
/// Ties go to the pair with the lexicographically smaller (min, max) of
/// their smallest members; `left` holds the group with the smaller member.
pub fn upgma(points: &[Vec<f64>]) -> Vec<OracleMerge> {
    let d = distance_matrix(points);
    let mut groups: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
    let mut out = Vec::new();
    while groups.len() > 1 {
        let mut cands: Vec<(f64, (usize, usize), usize, usize)> = Vec::new();
        for i in 0..groups.len() {
            for j in i + 1..groups.len() {
                let pair: Vec<f64> = groups[i].iter().flat_map(|&a| groups[j].iter().map(|&b| d[a][b]).collect::<Vec<_>>()).collect();
                let h = exact_sum(&pair) / pair.len() as f64;
                let (ki, kj) = (groups[i][0], groups[j][0]);
                cands.push((h, (ki.min(kj), ki.max(kj)), i, j));
            }
        }
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (h, _, i, j) = cands[0];
        let margin = cands.get(1).map_or(f64::INFINITY, |c| c.0 - h);
        let (keep, gone) = if groups[i][0] < groups[j][0] { (i, j) } else { (j, i) };
        let right = groups[gone].clone();
        out.push(OracleMerge { left: groups[keep].clone(), right: right.clone(), height: h, margin });
        groups[keep].extend(right);
        groups[keep].sort_unstable();
        groups.remove(gone);
    }
    out
}

// ---------------------------------------------------------------------------
// Boundary search.

/// Pages judged by gallop-then-bisect over `pages` pages whose first
/// `matching` pages match, in probe order.
pub fn search_trace(pages: usize, matching: usize) -> Vec<usize> {
    let is_match = |p: usize| p < matching;
    let mut probes = Vec::new();
    if pages == 0 {
        return probes;
    }
    let mut last_match: Option<usize> = None;
    let mut first_miss: Option<usize> = None;
    let mut step = 0u32;
    while first_miss.is_none() {
        let p = ((1usize << step) - 1).min(pages - 1);
        probes.push(p);
        if is_match(p) {
            last_match = Some(p);
            if p == pages - 1 {
                return probes;
            }
        } else {
            first_miss = Some(p);
        }
        step += 1;
    }
    let mut hi = first_miss.unwrap();
    loop {
        let lo = last_match.map_or(-1, |x| x as i64);
        if hi as i64 == lo + 1 {
            return probes;
        }
        let mid = ((lo + hi as i64).div_euclid(2)) as usize;
        probes.push(mid);
        if is_match(mid) {
            last_match = Some(mid);
        } else {
            hi = mid;
        }
    }
}

// ---------------------------------------------------------------------------
// Labeling comparisons by counting.

pub fn precision(predicted: &BTreeMap<String, String>, truth: &BTreeMap<String, String>, class: &str, label: &str) -> Option<f64> {
    let members: Vec<&String> = predicted.iter().filter(|(_, c)| c.as_str() == class).map(|(o, _)| o).collect();
    let labeled: Vec<&String> = members.iter().copied().filter(|o| truth.contains_key(*o)).collect();
    if labeled.is_empty() {
        return None;
    }
    let hits = labeled.iter().filter(|o| truth[**o] == label).count();
    Some(hits as f64 / labeled.len() as f64)
}

pub fn jaccard(a: &[String], b: &[String]) -> Option<f64> {
    let a: BTreeSet<&String> = a.iter().collect();
    let b: BTreeSet<&String> = b.iter().collect();
    let union = a.union(&b).count();
    (union > 0).then(|| a.intersection(&b).count() as f64 / union as f64)
}
