//! Argument parsing and command implementations of the `densesort` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use densesort_core::density::DEFAULT_SCHEDULE;
use densesort_core::metrics::ClassLabeling;
use densesort_service::api::{self, AppState};
use densesort_service::{ProjectConfig, ProjectHandle, SystemClock, Workspace};
use serde_json::json;

use crate::oracle::OraclePolicy;
use crate::synth::{generate, SyntheticSpec};
use crate::{simulate, SimulationOptions, FEATURES_FILE, REPORT_FILE, TRUTH_FILE};

#[derive(Debug, Parser)]
#[command(name = "densesort", version, about = "Cluster-driven mass annotation of feature vectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (features.mcft, truth.csv) to --out.
    Generate(GenerateArgs),
    /// Create a project from a feature file in the workspace --out.
    Ingest(IngestArgs),
    /// Run the next clustering iteration of a project.
    Iterate(ProjectArgs),
    /// Generate a dataset, annotate it with the oracle and print the report.
    Simulate(SimulateArgs),
    /// Build the cluster tree of a project and print it.
    Tree(ProjectArgs),
    /// Print the labeling of a project as CSV.
    Export(ExportArgs),
    /// Print the metrics report of a project.
    Metrics(MetricsArgs),
    /// Serve the HTTP API for the workspace --out.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SpecArgs {
    /// JSON file with the dataset description; defaults apply when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Overrides the RNG seed of the dataset description.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SpecArgs {
    fn load(&self) -> anyhow::Result<SyntheticSpec> {
        let mut spec: SyntheticSpec = match &self.spec {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => SyntheticSpec::default(),
        };
        if let Some(seed) = self.seed {
            spec.rng_seed = seed;
        }
        Ok(spec)
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClusteringArgs {
    /// Minimum cluster size per iteration.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SCHEDULE.to_vec())]
    pub schedule: Vec<usize>,
    /// Neighbourhood size of the core distance.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// Labels sidecar CSV (object_id,role,label).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[command(flatten)]
    pub clustering: ClusteringArgs,
    /// Workspace directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Workspace directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "p1")]
    pub project: String,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// `default`, an inline JSON object or a path to a JSON file.
    #[arg(long, default_value = "default")]
    pub policy: String,
    #[command(flatten)]
    pub clustering: ClusteringArgs,
    /// Directory for the dataset, the project and report.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub project: ProjectArgs,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    pub dest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[command(flatten)]
    pub project: ProjectArgs,
    /// Reference labels CSV with `object_id` and `label` columns.
    #[arg(long)]
    pub against: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Workspace directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Require `Authorization: Bearer <token>` on every request.
    #[arg(long)]
    pub token: Option<String>,
}

pub fn parse_policy(arg: &str) -> anyhow::Result<OraclePolicy> {
    let policy: OraclePolicy = if arg == "default" {
        OraclePolicy::default()
    } else if arg.trim_start().starts_with('{') {
        serde_json::from_str(arg).context("parsing inline policy")?
    } else {
        let text = fs::read_to_string(arg).with_context(|| format!("reading policy {arg}"))?;
        serde_json::from_str(&text).with_context(|| format!("parsing policy {arg}"))?
    };
    policy.validate()?;
    Ok(policy)
}

/// Reads a CSV with `object_id` and `label` columns; rows with an empty
/// label are skipped.
pub fn read_reference(path: &Path) -> anyhow::Result<ClassLabeling> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(id_col), Some(label_col)) = (col("object_id"), col("label")) else {
        bail!("{} needs object_id and label columns", path.display());
    };
    let mut out = ClassLabeling::new();
    for row in reader.records() {
        let row = row?;
        let (Some(id), Some(label)) = (row.get(id_col), row.get(label_col)) else {
            bail!("{}: short row", path.display());
        };
        if !label.is_empty() {
            out.insert(id.to_string(), label.to_string());
        }
    }
    Ok(out)
}

fn open_project(args: &ProjectArgs) -> anyhow::Result<(Workspace, Arc<ProjectHandle>)> {
    if !args.out.is_dir() {
        bail!("workspace {} does not exist", args.out.display());
    }
    let workspace = Workspace::open(&args.out, Arc::new(SystemClock))?;
    let project = workspace.project(&args.project)?;
    Ok((workspace, project))
}

fn print_json(out: &mut dyn Write, value: &impl serde::Serialize) -> anyhow::Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

/// Executes one command, writing its result to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(args) => {
            let spec = args.spec.load()?;
            let dataset = generate(&spec)?;
            fs::create_dir_all(&args.out)?;
            dataset.write(&args.out.join(FEATURES_FILE), &args.out.join(TRUTH_FILE))?;
            print_json(
                out,
                &json!({
                    "features": args.out.join(FEATURES_FILE),
                    "labels": args.out.join(TRUTH_FILE),
                    "objects": dataset.store.len(),
                    "class_sizes": dataset.class_sizes,
                    "noise_objects": dataset.noise_count,
                }),
            )
        }
        Command::Ingest(args) => {
            let workspace = Workspace::open(&args.out, Arc::new(SystemClock))?;
            let config = ProjectConfig {
                features: args.features.to_string_lossy().into_owned(),
                labels: args.labels.map(|l| l.to_string_lossy().into_owned()),
                schedule: args.clustering.schedule,
                k: args.clustering.k,
            };
            let handle = workspace.create_project(config, "cli")?;
            let objects = handle.read(|p| p.store().len());
            print_json(out, &json!({ "project": handle.id(), "objects": objects }))
        }
        Command::Iterate(args) => {
            let (_ws, handle) = open_project(&args)?;
            let outcome = handle.run_iteration()?;
            print_json(out, &outcome)
        }
        Command::Simulate(args) => {
            let options = SimulationOptions {
                spec: args.spec.load()?,
                policy: parse_policy(&args.policy)?,
                schedule: args.clustering.schedule,
                k: args.clustering.k,
            };
            let sim = simulate(&options, &args.out)?;
            let text = serde_json::to_string_pretty(&sim.report)?;
            fs::write(args.out.join(REPORT_FILE), format!("{text}\n"))?;
            writeln!(out, "{text}")?;
            Ok(())
        }
        Command::Tree(args) => {
            let (_ws, handle) = open_project(&args)?;
            let tree = handle.mutate(|p| {
                p.build_tree()?;
                let tree = p.tree().expect("tree was just built");
                Ok(api::tree_json(handle.id(), p, tree))
            })??;
            print_json(out, &tree)
        }
        Command::Export(args) => {
            let (_ws, handle) = open_project(&args.project)?;
            let labeling = handle.read(|p| p.labeling())?;
            match args.dest {
                Some(dest) => fs::write(dest, labeling.to_csv_string())?,
                None => labeling.write_csv(&mut *out)?,
            }
            Ok(())
        }
        Command::Metrics(args) => {
            let (_ws, handle) = open_project(&args.project)?;
            let reference = args.against.as_deref().map(read_reference).transpose()?;
            let report = handle.read(|p| p.metrics(reference.as_ref()))?;
            print_json(out, &report)
        }
        Command::Serve(args) => {
            let workspace = Workspace::open(&args.out, Arc::new(SystemClock))?;
            let state = Arc::new(AppState { workspace, token: args.token, actor: "api".into() });
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&args.addr).await.with_context(|| format!("binding {}", args.addr))?;
                tracing::info!(addr = %listener.local_addr()?, "serving");
                api::serve(listener, state, async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await?;
                Ok(())
            })
        }
    }
}
