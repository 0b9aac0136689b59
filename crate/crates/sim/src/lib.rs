//! Command-line driver, synthetic dataset generator and oracle annotator.
//!
//! [`simulate`] generates a long-tailed dataset, ingests it as a project,
//! lets the [`oracle::Annotator`] perform the full workflow against the
//! truth labels and reports decisions, quality and discovery order.

pub mod cli;
pub mod oracle;
pub mod report;
pub mod synth;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use densesort_core::density::DEFAULT_SCHEDULE;
use densesort_core::metrics::ClassLabeling;
use densesort_service::{Clock, ProjectConfig, ProjectHandle, ServiceResult, SystemClock, Workspace};

use crate::oracle::{Annotator, OraclePolicy};
use crate::report::{build_report, SimulationReport};
use crate::synth::{generate, SyntheticSpec};

pub const FEATURES_FILE: &str = "features.mcft";
pub const TRUTH_FILE: &str = "truth.csv";
pub const PROJECTS_DIR: &str = "projects";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone)]
pub struct SimulationOptions {
    pub spec: SyntheticSpec,
    pub policy: OraclePolicy,
    pub schedule: Vec<usize>,
    pub k: usize,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        SimulationOptions {
            spec: SyntheticSpec::default(),
            policy: OraclePolicy::default(),
            schedule: DEFAULT_SCHEDULE.to_vec(),
            k: 1,
        }
    }
}

pub struct Simulation {
    pub report: SimulationReport,
    pub workspace: Workspace,
    pub project: Arc<ProjectHandle>,
    pub features: PathBuf,
    pub truth_file: PathBuf,
    pub truth: ClassLabeling,
}

/// Object id → truth label for every labeled object of `store`.
pub fn truth_of(store: &densesort_core::FeatureStore) -> ClassLabeling {
    (0..store.len())
        .filter_map(|i| store.prior_label(i).map(|l| (store.object_id(i).to_string(), l.to_string())))
        .collect()
}

/// Generates the dataset into `out`, creates a project under
/// `out/projects` and annotates it completely with the oracle.
pub fn simulate(options: &SimulationOptions, out: &Path) -> ServiceResult<Simulation> {
    simulate_with_clock(options, out, Arc::new(SystemClock))
}

pub fn simulate_with_clock(options: &SimulationOptions, out: &Path, clock: Arc<dyn Clock>) -> ServiceResult<Simulation> {
    let started = Instant::now();
    options.policy.validate()?;
    std::fs::create_dir_all(out).map_err(densesort_core::Error::from)?;
    let dataset = generate(&options.spec)?;
    let features = out.join(FEATURES_FILE);
    let truth_file = out.join(TRUTH_FILE);
    dataset.write(&features, &truth_file)?;
    let truth = truth_of(&dataset.store);
    drop(dataset);

    let workspace = Workspace::open(out.join(PROJECTS_DIR), clock)?;
    let config = ProjectConfig {
        features: features.to_string_lossy().into_owned(),
        labels: Some(truth_file.to_string_lossy().into_owned()),
        schedule: options.schedule.clone(),
        k: options.k,
    };
    let project = workspace.create_project(config, "oracle")?;
    let log = Annotator::new(&truth, options.policy)?.annotate(&project)?;
    let holdouts: Vec<String> = options.spec.holdout_classes.iter().map(|&c| SyntheticSpec::class_label(c)).collect();
    let wall = started.elapsed().as_secs_f64();
    let report = project.read(|p| build_report(p, &truth, &holdouts, &log, wall))?;
    Ok(Simulation { report, workspace, project, features, truth_file, truth })
}
