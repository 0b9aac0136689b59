//! Acceptance gate: one PASS/FAIL line per headline criterion. Exits with
//! a failure status when any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use densesort_cli::oracle::{OraclePolicy, PageAcceptRule};
use densesort_cli::synth::SyntheticSpec;
use densesort_cli::{simulate, simulate_with_clock, Simulation, SimulationOptions};
use densesort_core::density::{build_mst, cluster_unassigned, ClusteringParams, DEFAULT_SCHEDULE};
use densesort_core::events::{AnnotationEvent, EventBody};
use densesort_core::hierarchy::upgma_merges;
use densesort_core::lifecycle::{ClusterId, GrowSession, PageVerdict, Probe};
use densesort_core::metrics::{
    correspondence_matrix, predominant_label_agreement, relative_overlap, segment_sessions, throughput, ClassLabeling,
};
use densesort_core::numeric::exact_sum;
use densesort_core::{FeatureStore, ObjectRecord};
use densesort_oracles as oracle;
use densesort_service::persist::read_event_log;
use densesort_service::{load_store, ManualClock, Project};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn store_of(points: &[Vec<f32>]) -> FeatureStore {
    let dim = points.first().map_or(1, Vec::len);
    FeatureStore::from_records(dim, points.iter().enumerate().map(|(i, p)| ObjectRecord::new(format!("o{i:05}"), p.clone())))
        .expect("valid points")
}

fn as_f64(points: &[Vec<f32>]) -> Vec<Vec<f64>> {
    points.iter().map(|p| p.iter().map(|&x| x as f64).collect()).collect()
}

/// Blobs on a 1/64 grid, so squared distances are exact in any order.
fn quantized_blobs(r: &mut ChaCha8Rng, n: usize, dim: usize, blobs: usize) -> Vec<Vec<f32>> {
    let centers: Vec<Vec<f64>> = (0..blobs).map(|_| (0..dim).map(|_| r.random_range(-6.0..6.0)).collect()).collect();
    (0..n)
        .map(|_| {
            let c = &centers[r.random_range(0..blobs)];
            let spread = if r.random_bool(0.1) { 4.0 } else { 0.6 };
            c.iter()
                .map(|&x| {
                    let u: f64 = (0..4).map(|_| r.random_range(-1.0..1.0)).sum::<f64>() * spread / 2.0;
                    ((x + u).clamp(-15.0, 15.0) * 64.0).round() as f32 / 64.0
                })
                .collect()
        })
        .collect()
}

fn clustering_oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let mut r = rng(101);
    for i in 0..200 {
        let n = r.random_range(20..=200);
        let dim = [2, 8, 32][r.random_range(0..3)];
        let m = [4, 8, 16][r.random_range(0..3)];
        let blobs = r.random_range(1..=5);
        let pts = quantized_blobs(&mut r, n, dim, blobs);
        let store = store_of(&pts);
        let all: Vec<usize> = (0..n).collect();
        let got = cluster_unassigned(&store, &all, ClusteringParams::new(1, m).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let want = oracle::hdbscan(&as_f64(&pts), 1, m);
        let seeds: Vec<Vec<usize>> = got.seeds.iter().map(|s| s.members.clone()).collect();
        ensure(seeds == want.seeds && got.noise == want.noise, || {
            format!("instance {i} (n={n}, dim={dim}, m={m}) differs from the brute-force partition")
        })?;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s, limit 60 s"))?;
    Ok(format!("200 instances identical, {secs:.1} s < 60 s"))
}

fn mst_optimality() -> Outcome {
    let mut r = rng(102);
    let mut cases = 0;
    for n in 2..=12 {
        for _ in 0..5 {
            let pts: Vec<Vec<f32>> = (0..n).map(|_| (0..3).map(|_| r.random_range(-1.0f32..1.0)).collect()).collect();
            let all: Vec<usize> = (0..n).collect();
            let mst = build_mst(&store_of(&pts), &all, 1).map_err(|e| e.to_string())?;
            let total = exact_sum(mst.iter().map(|e| e.weight));
            let want = oracle::exhaustive_mst_total(&oracle::mutual_reachability_matrix(&as_f64(&pts), 1));
            ensure(total == want, || format!("n={n}: {total} vs exhaustive {want}"))?;
            cases += 1;
        }
    }
    let pts: Vec<Vec<f32>> = (0..500).map(|_| (0..8).map(|_| r.random_range(-1.0f32..1.0)).collect()).collect();
    let all: Vec<usize> = (0..500).collect();
    let mst = build_mst(&store_of(&pts), &all, 1).map_err(|e| e.to_string())?;
    let total: f64 = mst.iter().map(|e| e.weight).sum();
    let want: f64 = oracle::kruskal_weights(&oracle::mutual_reachability_matrix(&as_f64(&pts), 1)).iter().sum();
    let rel = (total - want).abs() / want;
    ensure(rel <= 1e-9, || format!("n=500: relative gap {rel:e}"))?;
    Ok(format!("{cases} instances n<=12 exact, n=500 within {rel:.1e} of Kruskal"))
}

fn drive(session: &mut GrowSession, matching: usize) -> Result<Vec<usize>, String> {
    let mut probes = Vec::new();
    while let Probe::Page(p) = session.next_probe().map_err(|e| e.to_string())? {
        probes.push(p);
        let v = if p < matching { PageVerdict::Match } else { PageVerdict::NoMatch };
        session.record_page_verdict(p, v).map_err(|e| e.to_string())?;
    }
    Ok(probes)
}

fn search_trace_exactness() -> Outcome {
    let mut instances = 0;
    for pages in 1..=256usize {
        let bound = 2 * (usize::BITS - pages.leading_zeros()) as usize + 2;
        for matching in 0..=pages {
            let mut s = GrowSession::with_page_size(ClusterId(0), (0..pages).collect(), 1);
            let probes = drive(&mut s, matching)?;
            ensure(s.threshold() == matching.checked_sub(1), || format!("P={pages}: wrong threshold"))?;
            ensure(s.judged_pages() <= bound, || format!("P={pages}: {} judgments > {bound}", s.judged_pages()))?;
            ensure(probes == oracle::search_trace(pages, matching), || format!("P={pages}: trace differs"))?;
            instances += 1;
        }
    }
    let mut s = GrowSession::new(ClusterId(0), (0..5000).collect());
    let probes = drive(&mut s, 38)?;
    ensure(probes == [0, 1, 3, 7, 15, 31, 63, 47, 39, 35, 37, 38] && s.judged_pages() == 12, || {
        format!("worked trace gave {probes:?}")
    })?;
    Ok(format!("{instances} (P, t) pairs exact and bounded, worked trace P=100 t=37 in 12 judgments"))
}

fn upgma_equivalence() -> Outcome {
    let mut r = rng(104);
    for i in 0..100 {
        let n = r.random_range(1..=50);
        let dim = r.random_range(1..=32);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| r.random_range(-5.0..5.0)).collect()).collect();
        let centroids: BTreeMap<ClusterId, Vec<f64>> =
            pts.iter().enumerate().map(|(i, p)| (ClusterId(i as u64), p.clone())).collect();
        let got = upgma_merges(&centroids).map_err(|e| e.to_string())?;
        let want = oracle::upgma(&pts);
        let ids = |v: &[usize]| v.iter().map(|&x| ClusterId(x as u64)).collect::<Vec<_>>();
        let same = got.len() == want.len()
            && got.iter().zip(&want).all(|(g, w)| {
                g.left == ids(&w.left) && g.right == ids(&w.right) && (g.height - w.height).abs() <= 1e-9 * w.height.max(1.0)
            });
        ensure(same, || format!("set {i} ({n} centroids) merges differently"))?;
    }
    let line: BTreeMap<ClusterId, Vec<f64>> =
        [0.0, 1.0, 5.0, 6.0].iter().enumerate().map(|(i, &x)| (ClusterId(i as u64), vec![x])).collect();
    let heights: Vec<f64> = upgma_merges(&line).map_err(|e| e.to_string())?.iter().map(|m| m.height).collect();
    ensure(heights == [1.0, 1.0, 5.0], || format!("{{0,1,5,6}} heights {heights:?}"))?;
    Ok("100 centroid sets identical, {0,1,5,6} heights (1, 1, 5)".into())
}

fn end_to_end_spec() -> SyntheticSpec {
    SyntheticSpec {
        class_count: 20,
        object_count: 50_000,
        zipf_exponent: 2.0,
        dim: 32,
        cluster_sigma: 1.0,
        separation: 10.0,
        noise_fraction: 0.02,
        holdout_classes: vec![19],
        holdout_fraction: 0.005,
        rng_seed: 1,
    }
}

fn end_to_end(sim: &Simulation) -> Outcome {
    let r = &sim.report;
    let n = r.object_count as f64;
    let macro_p = r.macro_precision.unwrap_or(0.0);
    let summary = format!(
        "macro precision {macro_p:.4}, assigned {:.2}%, judgments {} ({:.3}% of N), {:.0} s",
        100.0 * r.assigned_fraction,
        r.total_judgments,
        100.0 * r.total_judgments as f64 / n,
        r.wall_seconds
    );
    ensure(r.object_count == 50_000, || format!("N = {}", r.object_count))?;
    ensure(macro_p >= 0.95, || format!("{summary}: macro precision below 0.95"))?;
    ensure(r.assigned_fraction >= 0.9, || format!("{summary}: under 90% assigned"))?;
    ensure(r.total_judgments as f64 <= 0.05 * n, || format!("{summary}: judgments above 5% of N"))?;
    ensure(r.wall_seconds < 600.0, || format!("{summary}: over 10 min"))?;
    Ok(summary)
}

fn novelty(sim: &Simulation) -> Outcome {
    let r = &sim.report;
    let h = r.holdouts.first().ok_or("no holdout class in the report")?;
    let rho = r.size_discovery_spearman;
    let summary = format!(
        "holdout {} recall {:.3} precision {:.3} (iteration {:?}), size/discovery Spearman {}",
        h.label,
        h.recall,
        h.precision,
        h.iteration,
        rho.map_or("undefined".into(), |x| format!("{x:.3}"))
    );
    ensure(h.recall >= 0.9 && h.precision >= 0.9, || format!("{summary}: holdout not recovered"))?;
    ensure(rho.is_some_and(|x| x <= -0.5), || format!("{summary}: correlation above -0.5"))?;
    Ok(summary)
}

fn random_labeling(r: &mut ChaCha8Rng, objects: usize, classes: usize, coverage: f64) -> ClassLabeling {
    let mut out = ClassLabeling::new();
    for o in 0..objects {
        if r.random_bool(coverage) {
            out.insert(format!("o{o}"), format!("k{}", r.random_range(0..classes)));
        }
    }
    out
}

fn members(l: &ClassLabeling, class: &str) -> Vec<String> {
    l.iter().filter(|(_, c)| c.as_str() == class).map(|(o, _)| o.clone()).collect()
}

fn ev(ts: f64, n: u64) -> AnnotationEvent {
    AnnotationEvent { timestamp: ts, actor: "a".into(), body: EventBody::ClusterApproved { cluster: ClusterId(0) }, objects_affected: n }
}

fn metrics_exactness() -> Outcome {
    let mut r = rng(107);
    for i in 0..1000 {
        let objects = r.random_range(1..120);
        let (ca, cb) = (r.random_range(1..8), r.random_range(1..8));
        let (cov_a, cov_b) = (r.random_range(0.3..1.0), r.random_range(0.3..1.0));
        let a = random_labeling(&mut r, objects, ca, cov_a);
        let b = random_labeling(&mut r, objects, cb, cov_b);
        let report = predominant_label_agreement(&a, &b);
        let mut per_class = BTreeMap::new();
        for class in a.values().collect::<BTreeSet<_>>() {
            let mut best: Option<(f64, &String)> = None;
            for label in b.values().collect::<BTreeSet<_>>() {
                if let Some(p) = oracle::precision(&a, &b, class, label) {
                    if best.is_none_or(|(bp, _)| p > bp) {
                        best = Some((p, label));
                    }
                }
            }
            match (best, report.per_class.get(class)) {
                (None, None) => {}
                (Some((p, label)), Some(got)) if got.precision == p && &got.predominant == label => {
                    per_class.insert(class.clone(), p);
                }
                _ => return Err(format!("pair {i}: agreement of class {class} differs")),
            }
        }
        let naive = (!per_class.is_empty()).then(|| per_class.values().sum::<f64>() / per_class.len() as f64);
        ensure(report.macro_precision == naive, || format!("pair {i}: macro precision differs"))?;
        let common: BTreeSet<&String> = a.keys().filter(|o| b.contains_key(*o)).collect();
        let restrict = |l: &ClassLabeling| -> ClassLabeling {
            l.iter().filter(|(o, _)| common.contains(o)).map(|(o, c)| (o.clone(), c.clone())).collect()
        };
        let (ra, rb) = (restrict(&a), restrict(&b));
        let matrix = correspondence_matrix(&a, &b);
        let mut nonzero = 0;
        for ka in ra.values().collect::<BTreeSet<_>>() {
            for kb in rb.values().collect::<BTreeSet<_>>() {
                let (ma, mb) = (members(&ra, ka), members(&rb, kb));
                let j = oracle::jaccard(&ma, &mb).ok_or("empty union")?;
                let (sa, sb): (BTreeSet<String>, BTreeSet<String>) = (ma.into_iter().collect(), mb.into_iter().collect());
                ensure(relative_overlap(&sa, &sb).ok() == Some(j), || format!("pair {i}: overlap differs"))?;
                let entry = matrix.iter().find(|e| &e.class_a == ka && &e.class_b == kb);
                if j > 0.0 {
                    nonzero += 1;
                    ensure(entry.is_some_and(|e| e.relative_overlap == j), || format!("pair {i}: matrix entry differs"))?;
                }
            }
        }
        ensure(matrix.len() == nonzero, || format!("pair {i}: matrix has extra entries"))?;
    }

    for i in 0..500 {
        let n = r.random_range(0..60);
        let mut t = 0.0;
        let mut events = Vec::new();
        for _ in 0..n {
            t += match r.random_range(0..4) {
                0 => 600.0,
                1 => 600.5,
                2 => r.random_range(0.0..100.0),
                _ => r.random_range(0.0..2000.0),
            };
            events.push(ev(t, 1));
        }
        let sessions = segment_sessions(&events);
        let mut starts = vec![0];
        starts.extend((1..events.len()).filter(|&j| events[j].timestamp - events[j - 1].timestamp > 600.0));
        let expected: Vec<usize> = if events.is_empty() { Vec::new() } else { starts };
        let got: Vec<usize> = sessions.iter().scan(0, |pos, s| {
            let start = *pos;
            *pos += s.events.len();
            Some(start)
        }).collect();
        let total: usize = sessions.iter().map(|s| s.events.len()).sum();
        ensure(got == expected && total == events.len(), || format!("log {i}: sessions split differently"))?;
    }

    let one = vec![ev(0.0, 250), ev(120.0, 250), ev(360.0, 500)];
    let t1 = throughput(&one).map_err(|e| e.to_string())?.objects_per_hour;
    let mut two: Vec<AnnotationEvent> = (0..=6).map(|i| ev(300.0 * i as f64, 0)).collect();
    two.extend((0..=6).map(|i| ev(50_000.0 + 300.0 * i as f64, 0)));
    two[3].objects_affected = 5000;
    two[10].objects_affected = 15_000;
    let t2 = throughput(&two).map_err(|e| e.to_string())?.objects_per_hour;
    ensure(t1 == 10_000.0 && t2 == 20_000.0, || format!("worked throughput {t1} and {t2}"))?;
    Ok("1000 labeling pairs and 500 logs exact, worked throughput 10000 and 20000 obj/h".into())
}

/// Replays the persisted log of `sim` from scratch and compares labelings.
fn replays_identically(sim: &Simulation) -> Result<usize, String> {
    let (dir, live) = {
        let stored = sim.project.lock();
        (stored.dir().to_path_buf(), stored.project().labeling().map_err(|e| e.to_string())?.to_csv_string())
    };
    let events = read_event_log(&dir.join("events.jsonl")).map_err(|e| e.to_string())?;
    let config = sim.project.read(|p| p.config().clone());
    let store = Arc::new(load_store(&config).map_err(|e| e.to_string())?);
    let replayed = Project::replay(store, &events, Arc::new(ManualClock::new(0.0))).map_err(|e| e.to_string())?;
    let csv = replayed.labeling().map_err(|e| e.to_string())?.to_csv_string();
    ensure(csv.as_bytes() == live.as_bytes(), || format!("{} differs after replay", dir.display()))?;
    Ok(events.len())
}

fn replay(large: &Simulation, scratch: &Path) -> Outcome {
    let mut runs = vec![replays_identically(large)?];
    let small = SyntheticSpec { object_count: 3_000, dim: 8, holdout_fraction: 0.02, ..end_to_end_spec() };
    let policies = [
        OraclePolicy::default(),
        OraclePolicy { turtle_enabled: true, ..OraclePolicy::default() },
        OraclePolicy { page_accept_rule: PageAcceptRule::Majority { theta: 0.7 }, ..OraclePolicy::default() },
    ];
    for (i, policy) in policies.into_iter().enumerate() {
        let options = SimulationOptions {
            spec: SyntheticSpec { rng_seed: 10 + i as u64, ..small.clone() },
            policy,
            schedule: DEFAULT_SCHEDULE.to_vec(),
            k: 1,
        };
        let clock = Arc::new(ManualClock::new(1_700_000_000.0));
        let sim = simulate_with_clock(&options, &scratch.join(format!("small{i}")), clock).map_err(|e| e.to_string())?;
        runs.push(replays_identically(&sim)?);
    }
    Ok(format!("{} runs byte-identical after replay (event counts {runs:?})", runs.len()))
}

fn main() {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let mut failed = 0;
    let mut report = |name: &str, outcome: Outcome| {
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    };
    report("clustering oracle equivalence", clustering_oracle_equivalence());
    report("MST optimality", mst_optimality());
    report("search-trace exactness", search_trace_exactness());
    report("UPGMA oracle equivalence", upgma_equivalence());
    let options = SimulationOptions { spec: end_to_end_spec(), ..SimulationOptions::default() };
    match simulate(&options, &scratch.path().join("e2e")) {
        Ok(sim) => {
            report("end-to-end synthetic reproduction", end_to_end(&sim));
            report("novelty detection", novelty(&sim));
            report("metrics exactness", metrics_exactness());
            report("event-sourcing replay", replay(&sim, scratch.path()));
        }
        Err(e) => {
            report("end-to-end synthetic reproduction", Err(e.to_string()));
            report("novelty detection", Err("no simulation".into()));
            report("metrics exactness", metrics_exactness());
            report("event-sourcing replay", Err("no simulation".into()));
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
