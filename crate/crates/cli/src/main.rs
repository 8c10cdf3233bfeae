use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use pice_core::ensemble::{CandidateResponse, ConfidenceWeights, Scorer, ScoringReport};
use pice_core::finetune::{label_pair, read_pairs, write_triplets, PreferenceWeights};
use pice_core::profiler::{estimate_cost_coefficient, fit_all, read_samples};
use pice_core::sim::{run, run_sweep, Policy, RunConfig, RunReport, SweepParam};

#[derive(Parser)]
#[command(name = "pice", version, about = "Cloud-edge progressive inference simulator and tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Input file for the subcommand.
    #[arg(long)]
    config: PathBuf,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suppress the printed summary.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    common: Common,
    /// Overrides the workload seed.
    #[arg(long, env = "PICE_SEED")]
    seed: Option<u64>,
    /// Overrides the policy in the config.
    #[arg(long)]
    policy: Option<Policy>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit latency models and cost coefficients from timing samples (JSON lines).
    Profile {
        #[command(flatten)]
        common: Common,
        /// Device id whose samples describe the cloud model.
        #[arg(long, default_value = "cloud")]
        cloud_device: String,
    },
    /// Run one simulation and write report.json and records.csv.
    Simulate(SimArgs),
    /// Run one simulation per value of a parameter.
    Sweep {
        #[command(flatten)]
        sim: SimArgs,
        /// rpm, queue_capacity, bandwidth or sketch_level_count.
        #[arg(long)]
        sweep_param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        sweep_values: Vec<f64>,
    },
    /// Score candidate answers against a sketch and pick the winner.
    Score {
        #[command(flatten)]
        common: Common,
        /// Overrides the sketch stored in the candidates file.
        #[arg(long)]
        sketch: Option<String>,
        /// alpha1,alpha2
        #[arg(long, value_delimiter = ',', default_values_t = [0.4, 0.2])]
        weights: Vec<f64>,
    },
    /// Label sketch pairs (JSON lines) into preference triplets.
    LabelPrefs {
        #[command(flatten)]
        common: Common,
        /// beta1,beta2
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 1.0])]
        weights: Vec<f64>,
    },
    /// Summarize a saved report.json.
    Report {
        path: PathBuf,
        /// Also write the per-query CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
}

#[derive(Debug, Serialize)]
struct FittedModel {
    model_id: String,
    device_id: String,
    base_overhead_s: f64,
    samples: Vec<(f64, f64)>,
}

#[derive(Debug, Serialize)]
struct FittedCost {
    model_id: String,
    device_id: String,
    cloud_model_id: String,
    c: f64,
}

#[derive(Debug, Serialize)]
struct ProfileOutput {
    models: Vec<FittedModel>,
    cost_coefficients: Vec<FittedCost>,
}

#[derive(Debug, Deserialize)]
struct CandidatesFile {
    #[serde(default)]
    job_id: u64,
    #[serde(default)]
    sketch: String,
    candidates: Vec<CandidateResponse>,
}

#[derive(Debug, Serialize)]
struct SweepRow {
    value: f64,
    throughput: f64,
    latency: f64,
    error: f64,
    server_cost: f64,
    edge_cost: f64,
    completed: usize,
    fallback: usize,
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    Ok(BufReader::new(fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?))
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref().context("--out is required")
}

fn load_config(args: &SimArgs) -> Result<RunConfig> {
    let text = fs::read_to_string(&args.common.config)
        .with_context(|| format!("cannot read {}", args.common.config.display()))?;
    let mut cfg = RunConfig::from_json(&text).with_context(|| format!("invalid config {}", args.common.config.display()))?;
    if let Some(seed) = args.seed {
        cfg.workload.seed = seed;
    }
    if let Some(policy) = args.policy {
        cfg.policy = policy;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_csv(path: &Path, report: &RunReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    for row in report.csv_rows() {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn print_summary(r: &RunReport) {
    let m = &r.metrics;
    let c = &r.counts;
    println!(
        "policy {} seed {}: throughput {:.2} q/min, mean latency {:.2} s, error {:.4}, server tokens {:.0}, edge tokens {:.0}",
        r.policy.name(),
        r.seed,
        m.throughput,
        m.latency,
        m.error,
        m.server_cost,
        m.edge_cost
    );
    println!(
        "  arrived {} completed {} (progressive {}, full cloud {}, fallback {}, edge {}) rejected {} in flight {}",
        c.arrived, c.completed, c.progressive, c.full_cloud, c.fallback, c.edge, c.rejected, c.in_flight
    );
}

fn cmd_profile(common: &Common, cloud_device: &str) -> Result<()> {
    let out = require_out(&common.out)?;
    let samples = read_samples(open(&common.config)?)?;
    let fitted = fit_all(&samples)?;
    let cloud: Vec<_> = fitted.iter().filter(|((_, dev), _)| dev == cloud_device).collect();
    if cloud.len() > 1 {
        bail!("more than one model profiled on {cloud_device}");
    }
    let mut costs = Vec::new();
    if let Some(((cloud_id, _), cloud_f)) = cloud.first() {
        for ((model_id, device_id), f) in fitted.iter().filter(|((_, dev), _)| dev != cloud_device) {
            let mut probes: Vec<u32> = samples
                .iter()
                .filter(|s| &s.model_id == model_id && &s.device_id == device_id)
                .map(|s| s.output_length)
                .collect();
            probes.sort_unstable();
            probes.dedup();
            let c = estimate_cost_coefficient(cloud_f, f, &probes)?;
            costs.push(FittedCost {
                model_id: model_id.clone(),
                device_id: device_id.clone(),
                cloud_model_id: cloud_id.clone(),
                c: c.value(),
            });
        }
    }
    let output = ProfileOutput {
        models: fitted
            .iter()
            .map(|((model_id, device_id), f)| FittedModel {
                model_id: model_id.clone(),
                device_id: device_id.clone(),
                base_overhead_s: f.base_overhead_s(),
                samples: f.samples().to_vec(),
            })
            .collect(),
        cost_coefficients: costs,
    };
    fs::write(out, serde_json::to_string_pretty(&output)? + "\n").with_context(|| format!("cannot write {}", out.display()))?;
    if !common.quiet {
        for m in &output.models {
            println!("{}@{}: {} points, overhead {:.4} s", m.model_id, m.device_id, m.samples.len(), m.base_overhead_s);
        }
        for c in &output.cost_coefficients {
            println!("{}@{}: c = {:.4} relative to {}", c.model_id, c.device_id, c.c, c.cloud_model_id);
        }
    }
    Ok(())
}

fn cmd_simulate(args: &SimArgs) -> Result<()> {
    let out = require_out(&args.common.out)?;
    let cfg = load_config(args)?;
    let report = run(&cfg)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    fs::write(out.join("report.json"), report.to_json() + "\n")?;
    write_csv(&out.join("records.csv"), &report)?;
    if !args.common.quiet {
        print_summary(&report);
    }
    Ok(())
}

fn cmd_sweep(args: &SimArgs, param: SweepParam, values: &[f64]) -> Result<()> {
    let out = require_out(&args.common.out)?;
    let cfg = load_config(args)?;
    let reports = run_sweep(&cfg, param, values)?;
    let rows: Vec<SweepRow> = values
        .iter()
        .zip(&reports)
        .map(|(&value, r)| SweepRow {
            value,
            throughput: r.metrics.throughput,
            latency: r.metrics.latency,
            error: r.metrics.error,
            server_cost: r.metrics.server_cost,
            edge_cost: r.metrics.edge_cost,
            completed: r.counts.completed,
            fallback: r.counts.fallback,
        })
        .collect();
    fs::create_dir_all(out)?;
    fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    if !args.common.quiet {
        println!("{:>12} {:>10} {:>10} {:>8}", "value", "q/min", "latency", "error");
        for r in &rows {
            println!("{:>12} {:>10.2} {:>10.2} {:>8.4}", r.value, r.throughput, r.latency, r.error);
        }
    }
    Ok(())
}

fn weight_pair(weights: &[f64]) -> Result<(f64, f64)> {
    match weights {
        [a, b] => Ok((*a, *b)),
        _ => bail!("--weights takes exactly two comma-separated values, got {}", weights.len()),
    }
}

fn cmd_score(common: &Common, sketch: Option<&str>, weights: &[f64]) -> Result<()> {
    let (a1, a2) = weight_pair(weights)?;
    let file: CandidatesFile = serde_json::from_reader(open(&common.config)?)
        .with_context(|| format!("invalid candidates file {}", common.config.display()))?;
    let sketch = sketch.unwrap_or(&file.sketch);
    let scorer = Scorer::new(ConfidenceWeights::new(a1, a2)?)?;
    let report = ScoringReport::build(&scorer, file.job_id, &file.candidates, sketch)?;
    if let Some(out) = &common.out {
        fs::write(out, serde_json::to_string_pretty(&report)? + "\n").with_context(|| format!("cannot write {}", out.display()))?;
    }
    if !common.quiet {
        println!("{:>3} {:<20} {:>9} {:>7} {:>7} {:>10}", "#", "model", "geo_prob", "norm", "rouge", "confidence");
        for (i, c) in report.candidates.iter().enumerate() {
            let geo = c.geo_prob.map_or_else(|| "n/a".to_string(), |g| format!("{g:.4}"));
            println!("{i:>3} {:<20} {geo:>9} {:>7.4} {:>7.4} {:>10.4}", c.model_id, c.norm, c.rouge, c.confidence);
        }
        println!("winner: #{} ({})", report.winner, report.winner_model);
    }
    Ok(())
}

fn cmd_label(common: &Common, weights: &[f64]) -> Result<()> {
    let out = require_out(&common.out)?;
    let (b1, b2) = weight_pair(weights)?;
    let w = PreferenceWeights::new(b1, b2)?;
    let pairs = read_pairs(open(&common.config)?)?;
    let triplets = pairs.iter().map(|p| label_pair(p, &w)).collect::<pice_core::Result<Vec<_>>>()?;
    let mut buf = Vec::new();
    write_triplets(&mut buf, &triplets)?;
    fs::write(out, buf).with_context(|| format!("cannot write {}", out.display()))?;
    if !common.quiet {
        println!("labelled {} pairs into {}", triplets.len(), out.display());
    }
    Ok(())
}

fn cmd_report(path: &Path, out: Option<&Path>, quiet: bool) -> Result<()> {
    let report: RunReport = serde_json::from_reader(open(path)?).with_context(|| format!("invalid report {}", path.display()))?;
    if let Some(out) = out {
        write_csv(out, &report)?;
    }
    if !quiet {
        print_summary(&report);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Profile { common, cloud_device } => cmd_profile(common, cloud_device),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Sweep { sim, sweep_param, sweep_values } => cmd_sweep(sim, *sweep_param, sweep_values),
        Command::Score { common, sketch, weights } => cmd_score(common, sketch.as_deref(), weights),
        Command::LabelPrefs { common, weights } => cmd_label(common, weights),
        Command::Report { path, out, quiet } => cmd_report(path, out.as_deref(), *quiet),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
