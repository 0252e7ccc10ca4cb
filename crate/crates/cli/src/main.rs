//! `paic` command line: calibration, true effects, Monte Carlo studies,
//! summaries and estimation on external data.
//!
//! Exit codes: 0 success, 2 validation error, 3 non-convergence (`estimate`
//! only), 4 I/O error.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use paic::harness::{
    calibrated_dgm, dgm_truth, estimate_external, run_study_with, summarize_rows, ExternalB, Preset, StudyConfig,
};
use paic::inference::BootstrapPlan;
use paic::io::{self, CalibrationRecord, SummaryFile};
use paic::metrics::ConvergencePolicy;
use paic::{Anchoring, Arm, Error, EstimatorSpec, Method, Result};

#[derive(Parser)]
#[command(name = "paic", version, about = "Population-adjusted indirect comparisons")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate the assignment intercept so that half the population is in trial b.
    Calibrate(CalibrateArgs),
    /// Compute the true effect in the trial-b population.
    Truth(TruthArgs),
    /// Run the Monte Carlo study.
    Simulate(SimulateArgs),
    /// Summarize a results CSV into performance metrics.
    Summarize(SummarizeArgs),
    /// Run one estimator on user-supplied trial data.
    Estimate(EstimateArgs),
}

#[derive(Args)]
struct CalibrateArgs {
    /// DGM number (1-8) or `all`.
    #[arg(long, default_value = "all")]
    dgm: String,
    #[arg(long, default_value_t = paic::dgm::SUPERPOPULATION_N)]
    n: usize,
    #[arg(long, default_value_t = paic::dgm::CALIBRATION_TOLERANCE)]
    tol: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Read the normal and log-normal spread parameter as a variance.
    #[arg(long)]
    variance_reading: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TruthArgs {
    #[arg(long, default_value = "all")]
    dgm: String,
    /// Population size for the effect.
    #[arg(long, default_value_t = paic::dgm::SUPERPOPULATION_N)]
    n: usize,
    /// Sample size used to calibrate the intercept first.
    #[arg(long, default_value_t = paic::dgm::SUPERPOPULATION_N)]
    calibration_n: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variance_reading: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Starting point for every setting; a config file and flags override it.
    #[arg(long, default_value = "paper")]
    preset: Preset,
    /// TOML file with StudyConfig keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated DGM numbers or `all`.
    #[arg(long)]
    dgm: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    n_per_arm: Option<usize>,
    #[arg(long)]
    superpop_n: Option<usize>,
    #[arg(long)]
    bootstrap: Option<usize>,
    /// Comma-separated subset of unweighted,psw,maic1,maic2.
    #[arg(long)]
    methods: Option<String>,
    /// anchored, unanchored or both.
    #[arg(long)]
    anchoring: Option<String>,
    /// One adjustment set per flag, covariates joined by commas (`--adjust x1,x2`).
    #[arg(long)]
    adjust: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
    /// Results CSV. Truth, summary and long-format files are written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Also write every bootstrap replicate arm mean.
    #[arg(long)]
    dump_bootstrap: bool,
}

#[derive(Args)]
struct SummarizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Long-format CSV `metric,cell,value`; defaults to the summary path with `.long.csv`.
    #[arg(long)]
    long_out: Option<PathBuf>,
    #[arg(long)]
    include_nonconverged: bool,
}

#[derive(Args)]
struct EstimateArgs {
    /// IPD CSV of the trial to be reweighted.
    #[arg(long)]
    ipd: PathBuf,
    /// IPD CSV of the target trial.
    #[arg(long, conflicts_with = "agd")]
    ipd_b: Option<PathBuf>,
    /// Aggregate-data JSON of the target trial.
    #[arg(long, required_unless_present = "ipd_b")]
    agd: Option<PathBuf>,
    #[arg(long)]
    method: Method,
    #[arg(long)]
    anchoring: Anchoring,
    /// Covariates joined by commas, or `none` for the unweighted method.
    #[arg(long, default_value = "none")]
    adjust: String,
    #[arg(long, default_value_t = BootstrapPlan::DEFAULT_REPLICATES)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Map file arm labels onto A, B, C, e.g. `drug=A,placebo=C`.
    #[arg(long, default_value = "")]
    arm_map: String,
    #[arg(long)]
    out: PathBuf,
    /// Per-subject weights CSV `id,method,weight,propensity`.
    #[arg(long)]
    weights_out: Option<PathBuf>,
    /// Bootstrap replicate CSV `replicate,trial,arm,mean,converged`.
    #[arg(long)]
    dump_bootstrap: Option<PathBuf>,
}

fn parse_dgms(s: &str) -> Result<Vec<u8>> {
    if s.trim() == "all" {
        return Ok((1..=8).collect());
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<u8>()
                .ok()
                .filter(|d| (1..=8).contains(d))
                .ok_or_else(|| Error::Config(format!("DGM must be 1..8 or `all`, got `{t}`")))
        })
        .collect()
}

fn parse_anchorings(s: &str) -> Result<Vec<Anchoring>> {
    match s.trim() {
        "both" => Ok(vec![Anchoring::Anchored, Anchoring::Unanchored]),
        other => Ok(vec![other.parse()?]),
    }
}

fn parse_arm_map(s: &str) -> Result<HashMap<String, Arm>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|pair| {
            let (label, arm) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("arm map entry `{pair}` is not label=ARM")))?;
            Ok((label.trim().to_string(), arm.parse()?))
        })
        .collect()
}

fn base_config(seed: Option<u64>, variance_reading: bool) -> StudyConfig {
    let mut config = StudyConfig::default();
    if let Some(seed) = seed {
        config.base_seed = seed;
    }
    if variance_reading {
        config.spread = paic::dgm::SpreadReading::Variance;
    }
    config
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn calibrate(args: CalibrateArgs) -> Result<()> {
    let mut config = base_config(args.seed, args.variance_reading);
    config.calibration_n = args.n;
    config.calibration_tol = args.tol;
    let records = parse_dgms(&args.dgm)?
        .into_iter()
        .map(|id| {
            let dgm = calibrated_dgm(&config, id)?;
            Ok(CalibrationRecord {
                dgm: id,
                beta0: dgm.beta0.unwrap_or_default(),
                n: args.n,
                tolerance: args.tol,
                seed: config.base_seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    io::write_string(&args.out, &serde_json::to_string_pretty(&records)?)
}

fn truth(args: TruthArgs) -> Result<()> {
    let mut config = base_config(args.seed, args.variance_reading);
    config.truth_n = args.n;
    config.calibration_n = args.calibration_n;
    let mut truths = BTreeMap::new();
    for id in parse_dgms(&args.dgm)? {
        let dgm = calibrated_dgm(&config, id)?;
        truths.insert(id, dgm_truth(&config, &dgm)?);
    }
    io::write_string(&args.out, &io::truth_to_json(&truths)?)
}

fn study_config(args: &SimulateArgs) -> Result<StudyConfig> {
    let mut config = StudyConfig::preset(args.preset);
    if let Some(path) = &args.config {
        config = config.merge_toml_file(path)?;
    }
    if let Some(d) = &args.dgm {
        config.dgms = parse_dgms(d)?;
    }
    if let Some(v) = args.iterations {
        config.iterations = v;
    }
    if let Some(v) = args.n_per_arm {
        config.n_per_arm = v;
    }
    if let Some(v) = args.superpop_n {
        config.superpop_n = v;
    }
    if let Some(v) = args.bootstrap {
        config.bootstrap = v;
    }
    if let Some(m) = &args.methods {
        config.methods = m.split(',').map(str::parse).collect::<Result<_>>()?;
    }
    if let Some(a) = &args.anchoring {
        config.anchorings = parse_anchorings(a)?;
    }
    if !args.adjust.is_empty() {
        config.adjustment_sets = args.adjust.iter().map(|s| EstimatorSpec::parse_adjustment(s)).collect();
    }
    if let Some(v) = args.seed {
        config.base_seed = v;
    }
    if let Some(v) = args.workers {
        config.workers = v;
    }
    config.dump_bootstrap |= args.dump_bootstrap;
    config.validate()?;
    Ok(config)
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let config = study_config(&args)?;
    let mut results = csv::Writer::from_writer(BufWriter::new(File::create(&args.out)?));
    let mut dump = if config.dump_bootstrap {
        Some(csv::Writer::from_writer(BufWriter::new(File::create(sibling(
            &args.out,
            "bootstrap.csv",
        ))?)))
    } else {
        None
    };
    let output = run_study_with(&config, |rows, replicates| {
        for row in rows {
            results.serialize(row)?;
        }
        results.flush()?;
        if let Some(d) = dump.as_mut() {
            for r in replicates {
                d.serialize(r)?;
            }
            d.flush()?;
        }
        Ok(())
    })?;
    drop(results);

    // Re-read what was written so the summary reflects the file on disk.
    let written = io::read_results_csv(File::open(&args.out)?)?;
    if written != output.rows {
        return Err(Error::Invalid(format!(
            "integrity check failed: {} rows on disk, {} produced",
            written.len(),
            output.rows.len()
        )));
    }
    io::write_string(&sibling(&args.out, "truth.json"), &io::truth_to_json(&output.truths)?)?;
    let mut metadata = BTreeMap::new();
    metadata.insert("config".to_string(), serde_json::to_value(&config)?);
    metadata.insert("beta0".to_string(), serde_json::to_value(&output.beta0)?);
    metadata.insert("n_records".to_string(), output.rows.len().into());
    metadata.insert(
        "n_nonconverged".to_string(),
        output.rows.iter().filter(|r| !r.converged).count().into(),
    );
    let summary = SummaryFile {
        metadata,
        cells: output.cells,
    };
    io::write_string(
        &sibling(&args.out, "summary.json"),
        &serde_json::to_string_pretty(&summary)?,
    )?;
    io::write_csv_rows(
        File::create(sibling(&args.out, "long.csv"))?,
        &io::long_rows(&summary.cells),
    )?;
    let nonconverged = summary.metadata["n_nonconverged"].as_u64().unwrap_or(0);
    eprintln!(
        "wrote {} records ({nonconverged} non-converged) to {}",
        output.rows.len(),
        args.out.display()
    );
    Ok(())
}

fn summarize(args: SummarizeArgs) -> Result<()> {
    let rows = io::read_results_csv(File::open(&args.input)?)?;
    let truths = io::truth_from_json(&io::read_to_string(&args.truth)?)?;
    let policy = if args.include_nonconverged {
        ConvergencePolicy::IncludeNonconverged
    } else {
        ConvergencePolicy::ExcludeNonconverged
    };
    let cells = summarize_rows(&rows, &truths, policy)?;
    let mut metadata = BTreeMap::new();
    metadata.insert("source".to_string(), args.input.display().to_string().into());
    metadata.insert("policy".to_string(), serde_json::to_value(policy)?);
    metadata.insert("n_records".to_string(), rows.len().into());
    metadata.insert(
        "n_nonconverged".to_string(),
        rows.iter().filter(|r| !r.converged).count().into(),
    );
    let long = io::long_rows(&cells);
    let summary = SummaryFile { metadata, cells };
    io::write_string(&args.out, &serde_json::to_string_pretty(&summary)?)?;
    let long_path = args.long_out.unwrap_or_else(|| sibling(&args.out, "long.csv"));
    io::write_csv_rows(File::create(long_path)?, &long)
}

/// Returns whether the estimate converged.
fn estimate(args: EstimateArgs) -> Result<bool> {
    let arm_map = parse_arm_map(&args.arm_map)?;
    let spec = EstimatorSpec::new(
        args.method,
        args.anchoring,
        EstimatorSpec::parse_adjustment(&args.adjust),
    )?;
    let trial_a = io::read_ipd_csv(File::open(&args.ipd)?, &arm_map)?;
    let trial_b = match (&args.ipd_b, &args.agd) {
        (Some(path), _) => ExternalB::Ipd(io::read_ipd_csv(File::open(path)?, &arm_map)?),
        (None, Some(path)) => ExternalB::Aggregate(io::aggregate_from_json(&io::read_to_string(path)?, &arm_map)?),
        (None, None) => return Err(Error::Config("one of --ipd-b or --agd is required".into())),
    };
    let plan = BootstrapPlan {
        replicates: args.bootstrap,
        seed: args.seed,
        keep_replicates: args.dump_bootstrap.is_some(),
    };
    let result = estimate_external(&trial_a, &trial_b, &spec, &plan)?;
    io::write_string(&args.out, &serde_json::to_string_pretty(&result.record)?)?;
    if let Some(path) = &args.weights_out {
        io::write_csv_rows(File::create(path)?, &result.weights)?;
    }
    if let Some(path) = &args.dump_bootstrap {
        io::write_csv_rows(File::create(path)?, &result.replicates)?;
    }
    if !result.record.converged {
        let diagnostic = result.record.diagnostic.as_deref().unwrap_or("not converged");
        let _ = writeln!(
            std::io::stderr(),
            "{}",
            serde_json::json!({ "converged": false, "diagnostic": diagnostic })
        );
    }
    Ok(result.record.converged)
}

fn exit_code(e: &Error) -> ExitCode {
    if e.is_io() {
        ExitCode::from(4)
    } else {
        ExitCode::from(2)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Calibrate(a) => calibrate(a).map(|_| true),
        Command::Truth(a) => truth(a).map(|_| true),
        Command::Simulate(a) => simulate(a).map(|_| true),
        Command::Summarize(a) => summarize(a).map(|_| true),
        Command::Estimate(a) => estimate(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
