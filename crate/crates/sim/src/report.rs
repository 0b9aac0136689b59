//! End-of-run report of a simulated annotation: per-iteration table,
//! decision counts, quality against the truth and novelty statistics.

use std::collections::BTreeMap;

use densesort_core::lifecycle::ClusterStatus;
use densesort_core::metrics::{predominant_label_agreement, ClassLabeling};
use densesort_core::Result;
use densesort_service::Project;
use serde::{Deserialize, Serialize};

use crate::oracle::{dominant_label, AnnotationLog, Judgments};

/// Label given to unlabeled (noise) objects in the precision reference, so
/// that noise swept into a class counts against it.
pub const NOISE_LABEL: &str = "(noise)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: usize,
    pub m: usize,
    pub new_clusters: usize,
    pub validated_clusters: usize,
    pub objects_sorted: usize,
    pub decisions: usize,
    pub objects_per_decision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDiscovery {
    pub label: String,
    pub size: usize,
    /// First iteration with an approved seed dominated by the class.
    pub iteration: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutRecovery {
    pub label: String,
    pub size: usize,
    /// Grown cluster dominated by the class with the highest recall.
    pub cluster: Option<String>,
    pub iteration: Option<usize>,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub object_count: usize,
    pub iterations: Vec<IterationRow>,
    pub judgments: Judgments,
    pub total_judgments: usize,
    pub judgments_per_object: f64,
    pub assigned_objects: usize,
    pub assigned_fraction: f64,
    /// Macro precision of the final labeling against the truth, with noise
    /// as its own reference class.
    pub macro_precision: Option<f64>,
    pub class_precision: BTreeMap<String, f64>,
    pub discovery: Vec<ClassDiscovery>,
    /// Spearman correlation between class size and discovery iteration.
    /// Undiscovered classes rank after the last iteration.
    pub size_discovery_spearman: Option<f64>,
    pub holdouts: Vec<HoldoutRecovery>,
    pub wall_seconds: f64,
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks. `None` for fewer than two points
/// or when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Truth labels plus the noise label for every object without one.
pub fn reference_with_noise(project: &Project, truth: &ClassLabeling) -> ClassLabeling {
    project
        .store()
        .object_ids()
        .iter()
        .map(|o| (o.clone(), truth.get(o).cloned().unwrap_or_else(|| NOISE_LABEL.to_string())))
        .collect()
}

pub fn build_report(
    project: &Project,
    truth: &ClassLabeling,
    holdout_labels: &[String],
    log: &AnnotationLog,
    wall_seconds: f64,
) -> Result<SimulationReport> {
    let n = project.store().len();
    let iterations: Vec<IterationRow> = log
        .iterations
        .iter()
        .map(|it| IterationRow {
            iteration: it.iteration,
            m: it.m,
            new_clusters: it.proposed.len(),
            validated_clusters: it.approved.len(),
            objects_sorted: it.objects_sorted,
            decisions: it.decisions,
            objects_per_decision: (it.decisions > 0).then(|| it.objects_sorted as f64 / it.decisions as f64),
        })
        .collect();

    let labeling = project.labeling()?;
    let reference = reference_with_noise(project, truth);
    let agreement = predominant_label_agreement(&labeling.assignments, &reference);

    let mut class_sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for label in truth.values() {
        *class_sizes.entry(label).or_default() += 1;
    }
    let ids = |members: &[usize]| -> Vec<String> {
        members.iter().map(|&o| project.store().object_id(o).to_string()).collect()
    };
    let mut discovered: BTreeMap<String, usize> = BTreeMap::new();
    let mut holdouts: BTreeMap<&str, HoldoutRecovery> = holdout_labels
        .iter()
        .map(|l| {
            let size = class_sizes.get(l.as_str()).copied().unwrap_or(0);
            (l.as_str(), HoldoutRecovery { label: l.clone(), size, cluster: None, iteration: None, recall: 0.0, precision: 0.0 })
        })
        .collect();
    for c in project.book().clusters() {
        if !matches!(c.status, ClusterStatus::Validated | ClusterStatus::Grown) {
            continue;
        }
        let seed = ids(&c.seed_members);
        let Some(label) = dominant_label(truth, seed.iter().map(String::as_str)).0 else { continue };
        let first = discovered.entry(label.clone()).or_insert(c.created_iteration);
        *first = (*first).min(c.created_iteration);
        if let Some(h) = holdouts.get_mut(label.as_str()) {
            let members: Vec<usize> = c.members().collect();
            let hits = ids(&members).iter().filter(|o| truth.get(*o) == Some(&label)).count();
            let recall = if h.size > 0 { hits as f64 / h.size as f64 } else { 0.0 };
            if h.cluster.is_none() || recall > h.recall {
                h.cluster = Some(c.cluster_id.to_string());
                h.iteration = Some(c.created_iteration);
                h.recall = recall;
                h.precision = if members.is_empty() { 0.0 } else { hits as f64 / members.len() as f64 };
            }
        }
    }
    let never = log.iterations.iter().map(|i| i.iteration).max().unwrap_or(0) + 1;
    let discovery: Vec<ClassDiscovery> = class_sizes
        .iter()
        .map(|(l, &size)| ClassDiscovery { label: l.to_string(), size, iteration: discovered.get(*l).copied() })
        .collect();
    let sizes: Vec<f64> = discovery.iter().map(|d| d.size as f64).collect();
    let found: Vec<f64> = discovery.iter().map(|d| d.iteration.unwrap_or(never) as f64).collect();

    let total = log.judgments.total();
    Ok(SimulationReport {
        object_count: n,
        iterations,
        judgments: log.judgments,
        total_judgments: total,
        judgments_per_object: if n > 0 { total as f64 / n as f64 } else { 0.0 },
        assigned_objects: labeling.assignments.len(),
        assigned_fraction: if n > 0 { labeling.assignments.len() as f64 / n as f64 } else { 0.0 },
        macro_precision: agreement.macro_precision,
        class_precision: agreement.per_class.into_iter().map(|(c, a)| (c, a.precision)).collect(),
        discovery,
        size_discovery_spearman: spearman(&sizes, &found),
        holdouts: holdouts.into_values().collect(),
        wall_seconds,
    })
}
