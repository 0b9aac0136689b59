#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use densesort_core::features::{save_features, DatasetRole};
use densesort_core::lifecycle::{ClusterStatus, PageVerdict, Probe, Verdict};
use densesort_core::{FeatureStore, ObjectRecord};
use densesort_service::{IterationOutcome, ManualClock, Project, ProjectConfig};

/// SplitMix64 step, enough for reproducible scatter in tests.
pub fn mix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit(state: &mut u64) -> f32 {
    (mix(state) >> 40) as f32 / (1u64 << 24) as f32
}

/// Three labeled lattice blobs with a jittered fringe, plus unlabeled
/// scatter far away.
pub fn blob_store(seed: u64) -> FeatureStore {
    let mut s = seed;
    let mut records = Vec::new();
    for (b, (cx, cy)) in [(0.0f32, 0.0f32), (60.0, 0.0), (0.0, 60.0)].into_iter().enumerate() {
        let label = ["alpha", "beta", "gamma"][b];
        for i in 0..64 {
            let x = cx + (i % 8) as f32;
            let y = cy + (i / 8) as f32;
            let mut r = ObjectRecord::new(format!("{label}-{i:03}"), vec![x, y]);
            r.prior_label = Some(label.into());
            r.dataset_role = DatasetRole::Validation;
            records.push(r);
        }
        for i in 0..40 {
            let a = unit(&mut s) * std::f32::consts::TAU;
            let d = 7.0 + unit(&mut s) * 6.0;
            let mut r = ObjectRecord::new(format!("{label}-f{i:02}"), vec![cx + 3.5 + d * a.cos(), cy + 3.5 + d * a.sin()]);
            r.prior_label = Some(label.into());
            records.push(r);
        }
    }
    for i in 0..25 {
        let x = 200.0 + unit(&mut s) * 400.0;
        let y = -300.0 - unit(&mut s) * 400.0;
        records.push(ObjectRecord::new(format!("noise-{i:02}"), vec![x, y]));
    }
    FeatureStore::from_records(2, records).unwrap()
}

pub fn config() -> ProjectConfig {
    ProjectConfig { features: "blobs.mcft".into(), labels: None, schedule: vec![32, 8, 4], k: 1 }
}

pub fn new_project(store: FeatureStore) -> (Project, Arc<ManualClock>) {
    let clock = Arc::new(ManualClock::new(1_700_000_000.0));
    let project = Project::create(Arc::new(store), config(), "tester", clock.clone()).unwrap();
    (project, clock)
}

pub fn write_store(dir: &Path, store: &FeatureStore) -> (PathBuf, PathBuf) {
    let features = dir.join("blobs.mcft");
    let labels = dir.join("blobs.labels.csv");
    save_features(store, &features).unwrap();
    store.save_labels(&labels).unwrap();
    (features, labels)
}

fn dominant(project: &Project, objects: impl Iterator<Item = usize>) -> (Option<String>, f64) {
    let mut counts: BTreeMap<Option<&str>, usize> = BTreeMap::new();
    let mut n = 0;
    for o in objects {
        *counts.entry(project.store().prior_label(o)).or_default() += 1;
        n += 1;
    }
    let (label, count) = counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).unwrap();
    (label.map(str::to_string), count as f64 / n as f64)
}

/// Plays a strict annotator against the prior labels: approves pure seeds,
/// accepts pages whose objects all share the cluster label, names leaves.
pub fn run_workflow(project: &mut Project, clock: &ManualClock) {
    let never = AtomicBool::new(false);
    loop {
        clock.advance(30.0);
        let IterationOutcome::Started { proposed, .. } = project.start_iteration(&never).unwrap() else { break };
        for c in proposed {
            clock.advance(5.0);
            let cluster = project.book().cluster(c).unwrap();
            let (label, purity) = dominant(project, cluster.seed_members.iter().copied());
            let verdict = if label.is_some() && purity >= 0.9 { Verdict::Approve } else { Verdict::Reject };
            project.validate_cluster(c, verdict).unwrap();
        }
        for c in project.growth_queue() {
            let label = dominant(project, project.book().cluster(c).unwrap().seed_members.iter().copied()).0;
            let s = project.open_grow(c).unwrap();
            while let Probe::Page(p) = project.session(s).unwrap().next_probe().unwrap() {
                clock.advance(4.0);
                let objs = project.session(s).unwrap().page(p).unwrap().to_vec();
                let all = objs.iter().all(|&o| project.store().prior_label(o).map(str::to_string) == label);
                project.page_verdict(s, p, if all { PageVerdict::Match } else { PageVerdict::NoMatch }).unwrap();
            }
            project.commit_grow(s).unwrap();
        }
    }
    assert!(project.book().clusters().all(|c| matches!(c.status, ClusterStatus::Grown | ClusterStatus::Rejected)));
    project.build_tree().unwrap();
    let leaves: Vec<_> = project.tree().unwrap().leaves().map(|l| (l.node_id, l.clusters.clone())).collect();
    for (node, clusters) in leaves {
        let members = clusters.iter().flat_map(|&c| project.book().cluster(c).unwrap().members().collect::<Vec<_>>());
        if let (Some(label), _) = dominant(project, members) {
            clock.advance(3.0);
            project.name_node(node, &label).unwrap();
        }
    }
}
