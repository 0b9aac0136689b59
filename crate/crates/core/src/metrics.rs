//! Quality and throughput metrics.
//!
//! Precision, macro precision and relative overlap (Jaccard index) compare
//! two labelings; sessions and throughput are derived from the event log.
//! Labelings are maps from object id to class name.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{AnnotationEvent, EventBody, Phase};
use crate::numeric::quantile_linear;

/// Longest pause (seconds) that still belongs to the same session.
pub const SESSION_GAP_SECS: f64 = 600.0;

pub type ClassLabeling = BTreeMap<String, String>;

pub fn precision(tp: u64, fp: u64) -> Result<f64> {
    if tp + fp == 0 {
        return Err(Error::Undefined("precision of an empty class".into()));
    }
    Ok(tp as f64 / (tp + fp) as f64)
}

/// Unweighted mean of per-class precisions.
pub fn macro_precision<K>(per_class: &BTreeMap<K, f64>) -> Result<f64> {
    if per_class.is_empty() {
        return Err(Error::Undefined("macro precision over zero classes".into()));
    }
    Ok(per_class.values().sum::<f64>() / per_class.len() as f64)
}

/// |a ∩ b| / |a ∪ b|.
pub fn relative_overlap<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> Result<f64> {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        return Err(Error::Undefined("relative overlap of two empty classes".into()));
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub class_a: String,
    pub class_b: String,
    pub intersection: usize,
    pub size_a: usize,
    pub size_b: usize,
    pub relative_overlap: f64,
}

/// Relative overlap for every class pair sharing at least one object.
/// Only objects labeled in both labelings take part. Rows are ordered by
/// `class_a`, then by descending overlap.
pub fn correspondence_matrix(a: &ClassLabeling, b: &ClassLabeling) -> Vec<Correspondence> {
    let mut size_a: BTreeMap<&str, usize> = BTreeMap::new();
    let mut size_b: BTreeMap<&str, usize> = BTreeMap::new();
    let mut inter: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for (obj, ca) in a {
        if let Some(cb) = b.get(obj) {
            *size_a.entry(ca).or_default() += 1;
            *size_b.entry(cb).or_default() += 1;
            *inter.entry((ca, cb)).or_default() += 1;
        }
    }
    let mut rows: Vec<Correspondence> = inter
        .into_iter()
        .map(|((ca, cb), n)| {
            let (sa, sb) = (size_a[ca], size_b[cb]);
            Correspondence {
                class_a: ca.to_string(),
                class_b: cb.to_string(),
                intersection: n,
                size_a: sa,
                size_b: sb,
                relative_overlap: n as f64 / (sa + sb - n) as f64,
            }
        })
        .collect();
    rows.sort_by(|x, y| {
        x.class_a
            .cmp(&y.class_a)
            .then(y.relative_overlap.total_cmp(&x.relative_overlap))
            .then(x.class_b.cmp(&y.class_b))
    });
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAgreement {
    pub predominant: String,
    pub precision: f64,
    /// Objects of the class that carry a reference label.
    pub spiked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub per_class: BTreeMap<String, ClassAgreement>,
    pub macro_precision: Option<f64>,
    /// Classes without any reference-labeled object.
    pub excluded: Vec<String>,
}

/// Assigns each class of `labeling` its most frequent reference label
/// (ties: lexicographically smallest) and measures the fraction of
/// reference-labeled members carrying it.
pub fn predominant_label_agreement(labeling: &ClassLabeling, reference: &ClassLabeling) -> AgreementReport {
    let mut counts: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for (obj, class) in labeling {
        let entry = counts.entry(class).or_default();
        if let Some(r) = reference.get(obj) {
            *entry.entry(r).or_default() += 1;
        }
    }
    let mut per_class = BTreeMap::new();
    let mut excluded = Vec::new();
    for (class, refs) in counts {
        let total: usize = refs.values().sum();
        if total == 0 {
            excluded.push(class.to_string());
            continue;
        }
        // BTreeMap iterates labels in order, so the first maximum is the smallest label.
        let (label, best) = refs.iter().fold(("", 0usize), |acc, (l, &n)| if n > acc.1 { (l, n) } else { acc });
        per_class.insert(
            class.to_string(),
            ClassAgreement { predominant: label.to_string(), precision: best as f64 / total as f64, spiked: total },
        );
    }
    let precisions: BTreeMap<&String, f64> = per_class.iter().map(|(c, a)| (c, a.precision)).collect();
    AgreementReport { macro_precision: macro_precision(&precisions).ok(), per_class, excluded }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Session<'a> {
    pub events: &'a [AnnotationEvent],
}

impl Session<'_> {
    pub fn start(&self) -> f64 {
        self.events[0].timestamp
    }

    pub fn end(&self) -> f64 {
        self.events[self.events.len() - 1].timestamp
    }

    /// Seconds between the first and last event.
    pub fn duration(&self) -> f64 {
        self.end() - self.start()
    }
}

/// Splits a time-ordered log at every gap longer than ten minutes.
pub fn segment_sessions(events: &[AnnotationEvent]) -> Vec<Session<'_>> {
    let mut sessions = Vec::new();
    let mut start = 0;
    for i in 1..events.len() {
        if events[i].timestamp - events[i - 1].timestamp > SESSION_GAP_SECS {
            sessions.push(Session { events: &events[start..i] });
            start = i;
        }
    }
    if start < events.len() {
        sessions.push(Session { events: &events[start..] });
    }
    sessions
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationThroughput {
    pub iteration: usize,
    pub m: usize,
    pub new_clusters: usize,
    pub validated_clusters: usize,
    pub rejected_clusters: usize,
    pub objects_sorted: u64,
    /// In-session time spent on validation and growth in this iteration.
    pub hours: f64,
    pub objects_per_hour: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub sessions: usize,
    pub total_hours: f64,
    /// In-session time attributed to validation and growth actions.
    pub validation_growth_hours: f64,
    pub naming_hours: f64,
    /// Objects approved or added by growth.
    pub objects_sorted: u64,
    /// `objects_sorted` per session hour.
    pub objects_per_hour: f64,
    /// Same rate with objects under named nodes added to the numerator.
    pub objects_per_hour_including_naming: f64,
    pub per_iteration: Vec<IterationThroughput>,
}

/// Objects sorted per hour of session time, plus a per-iteration table.
/// Time between two consecutive events of a session is attributed to the
/// phase of the later event.
pub fn throughput(events: &[AnnotationEvent]) -> Result<ThroughputReport> {
    let sessions = segment_sessions(events);
    if sessions.is_empty() {
        return Err(Error::Undefined("throughput of an empty event log".into()));
    }
    let total_secs: f64 = sessions.iter().map(Session::duration).sum();
    if total_secs <= 0.0 {
        return Err(Error::Undefined("total session duration is zero".into()));
    }
    let sorted: u64 = events.iter().filter(|e| e.body.counts_as_sorted()).map(|e| e.objects_affected).sum();
    let named: u64 = events
        .iter()
        .filter(|e| matches!(e.body, EventBody::NodeNamed { .. }))
        .map(|e| e.objects_affected)
        .sum();

    let mut phase_secs: BTreeMap<Phase, f64> = BTreeMap::new();
    let mut per_iteration: Vec<IterationThroughput> = Vec::new();
    let mut iter_secs = 0.0;
    for (i, e) in events.iter().enumerate() {
        let gap = if i > 0 { e.timestamp - events[i - 1].timestamp } else { 0.0 };
        let in_session = gap <= SESSION_GAP_SECS;
        let phase = e.body.phase();
        if in_session {
            *phase_secs.entry(phase).or_default() += gap;
        }
        match &e.body {
            EventBody::IterationStarted { iteration, m, seeds } => {
                close_iteration(&mut per_iteration, &mut iter_secs);
                per_iteration.push(IterationThroughput {
                    iteration: *iteration,
                    m: *m,
                    new_clusters: seeds.len(),
                    validated_clusters: 0,
                    rejected_clusters: 0,
                    objects_sorted: 0,
                    hours: 0.0,
                    objects_per_hour: None,
                });
            }
            body => {
                if let Some(row) = per_iteration.last_mut() {
                    if in_session && matches!(phase, Phase::Validation | Phase::Growth) {
                        iter_secs += gap;
                    }
                    match body {
                        EventBody::ClusterApproved { .. } | EventBody::ClusterFlagged { .. } => {
                            row.validated_clusters += 1
                        }
                        EventBody::ClusterRejected { .. } => row.rejected_clusters += 1,
                        _ => {}
                    }
                    if body.counts_as_sorted() {
                        row.objects_sorted += e.objects_affected;
                    }
                }
            }
        }
    }
    close_iteration(&mut per_iteration, &mut iter_secs);

    let hours = |p: Phase| phase_secs.get(&p).copied().unwrap_or(0.0) / 3600.0;
    let total_hours = total_secs / 3600.0;
    Ok(ThroughputReport {
        sessions: sessions.len(),
        total_hours,
        validation_growth_hours: hours(Phase::Validation) + hours(Phase::Growth),
        naming_hours: hours(Phase::Naming),
        objects_sorted: sorted,
        objects_per_hour: sorted as f64 / total_hours,
        objects_per_hour_including_naming: (sorted + named) as f64 / total_hours,
        per_iteration,
    })
}

fn close_iteration(rows: &mut [IterationThroughput], secs: &mut f64) {
    if let Some(row) = rows.last_mut() {
        row.hours = *secs / 3600.0;
        row.objects_per_hour = (*secs > 0.0).then(|| row.objects_sorted as f64 / row.hours);
    }
    *secs = 0.0;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_precision: BTreeMap<String, f64>,
    pub macro_precision: Option<f64>,
    /// 10% quantile of per-class precisions (linear interpolation).
    pub precision_q10: Option<f64>,
    pub class_sizes: BTreeMap<String, usize>,
    pub assigned_objects: usize,
    pub residual_objects: usize,
    pub agreement: Option<AgreementReport>,
    pub relative_overlap_matrix: Vec<Correspondence>,
    pub throughput: Option<ThroughputReport>,
}

/// Builds the report for `labeling` (object → class path). Precision is
/// measured against `reference` when given; throughput needs a non-empty
/// event log with positive session time.
pub fn metrics_report(
    labeling: &ClassLabeling,
    residual_objects: usize,
    reference: Option<&ClassLabeling>,
    events: &[AnnotationEvent],
) -> MetricsReport {
    let mut class_sizes: BTreeMap<String, usize> = BTreeMap::new();
    for class in labeling.values() {
        *class_sizes.entry(class.clone()).or_default() += 1;
    }
    let agreement = reference.map(|r| predominant_label_agreement(labeling, r));
    let per_class_precision: BTreeMap<String, f64> = agreement
        .as_ref()
        .map(|a| a.per_class.iter().map(|(c, x)| (c.clone(), x.precision)).collect())
        .unwrap_or_default();
    let values: Vec<f64> = per_class_precision.values().copied().collect();
    MetricsReport {
        macro_precision: macro_precision(&per_class_precision).ok(),
        precision_q10: quantile_linear(&values, 0.1),
        per_class_precision,
        class_sizes,
        assigned_objects: labeling.len(),
        residual_objects,
        relative_overlap_matrix: reference.map(|r| correspondence_matrix(labeling, r)).unwrap_or_default(),
        agreement,
        throughput: throughput(events).ok(),
    }
}

impl MetricsReport {
    /// Per-iteration table: `iteration,m,new_clusters,validated_clusters,objects_sorted_per_hour`.
    pub fn write_iteration_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        w.write_record(["iteration", "m", "new_clusters", "validated_clusters", "objects_sorted_per_hour"])?;
        if let Some(t) = &self.throughput {
            for row in &t.per_iteration {
                w.write_record([
                    row.iteration.to_string(),
                    row.m.to_string(),
                    row.new_clusters.to_string(),
                    row.validated_clusters.to_string(),
                    row.objects_per_hour.map(|v| format!("{v:.2}")).unwrap_or_default(),
                ])?;
            }
            let new: usize = t.per_iteration.iter().map(|r| r.new_clusters).sum();
            let validated: usize = t.per_iteration.iter().map(|r| r.validated_clusters).sum();
            w.write_record([
                "total".to_string(),
                String::new(),
                new.to_string(),
                validated.to_string(),
                format!("{:.2}", t.objects_per_hour),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Precision table: `subset,agreement_macro_precision,macro_precision,precision_q10,classes`.
    pub fn write_precision_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        w.write_record(["subset", "agreement_macro_precision", "macro_precision", "precision_q10", "classes"])?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let agreement = self.agreement.as_ref().and_then(|a| a.macro_precision);
        w.write_record([
            "total".to_string(),
            fmt(agreement),
            fmt(self.macro_precision),
            fmt(self.precision_q10),
            self.class_sizes.len().to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}
