//! `smoothhooi` command-line tool.
//!
//! Exit codes: 0 success, 1 bad arguments or other failure, 2 malformed
//! CSV/JSON input, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use smoothhooi::decomposer::{fit_penalized_components_full, Variant};
use smoothhooi::io::{
    self, gridify, quality_filter, read_long_csv_path, save_fit, write_component_curves_csv,
    write_cv_report_csv, write_effect_curves_csv, write_imputed_csv, write_json,
    write_variance_profile_csv, FitSummary, GriddedData, DEFAULT_GRID_START_HOUR,
};
use smoothhooi::postprocess::{
    component_effect_curves, component_variance_profile, explained_variance, identify,
};
use smoothhooi::sim::{run_study, SimulationConfig};
use smoothhooi::tuning::{
    grid_search, make_folds, parsimony_report, GridSpec, DEFAULT_PARSIMONY_THRESHOLD,
};
use smoothhooi::{fit_missing_full, Boundary, Error, FitOptions};

#[derive(Parser)]
#[command(
    name = "smoothhooi",
    version,
    about = "Smoothness-penalized tensor decomposition for 24-hour monitoring data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a decomposition with fixed ranks and smoothing parameter.
    Decompose(DecomposeArgs),
    /// Choose ranks and smoothing parameter by k-fold cross-validation.
    Tune(TuneArgs),
    /// Run a replicated simulation study.
    Simulate(SimulateArgs),
    /// Rotate a saved fit to its identifiable form.
    Identify(IdentifyArgs),
    /// Component curves, variance profile and effect curves for a saved fit.
    Report(ReportArgs),
}

#[derive(Args)]
struct InputArgs {
    /// Long-format CSV: subject_id,hour,measure,value (or timestamp instead of hour).
    #[arg(long)]
    input: PathBuf,
    /// Clock hour of the first grid point.
    #[arg(long, default_value_t = DEFAULT_GRID_START_HOUR)]
    grid_start_hour: u32,
    /// Skip the SBP/DBP/HR plausibility filter (needed for other measures).
    #[arg(long)]
    no_quality_filter: bool,
}

#[derive(Args)]
struct DecomposeArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Number of temporal components.
    #[arg(long)]
    r1: Option<usize>,
    /// Number of measure components.
    #[arg(long)]
    r2: Option<usize>,
    /// Smoothing parameter.
    #[arg(long)]
    lambda: Option<f64>,
    /// `periodic` (24-hour wraparound) or `open`.
    #[arg(long)]
    boundary: Option<Boundary>,
    /// Penalize the components instead of the fit (demonstration only).
    #[arg(long)]
    penalize_components: bool,
    /// FitOptions as JSON; command-line values take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = match s.split_once(':') {
        Some((a, b)) => (a, b),
        None => (s, s),
    };
    let lo: usize = lo.trim().parse().map_err(|_| format!("bad range `{s}`"))?;
    let hi: usize = hi.trim().parse().map_err(|_| format!("bad range `{s}`"))?;
    if lo > hi {
        return Err(format!("empty range `{s}`"));
    }
    Ok((lo, hi))
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda_min: f64,
    #[arg(long, default_value_t = 50.0)]
    lambda_max: f64,
    /// Inclusive, e.g. `2:6`.
    #[arg(long, value_parser = parse_range, default_value = "2:6")]
    r1_range: (usize, usize),
    #[arg(long, value_parser = parse_range, default_value = "2:3")]
    r2_range: (usize, usize),
    #[arg(long, default_value_t = 8)]
    coarse_points: usize,
    #[arg(long, default_value_t = 7)]
    fine_points: usize,
    #[arg(long)]
    no_warm_start: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    boundary: Option<Boundary>,
    /// Grid specification as JSON; replaces the grid flags.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// FitOptions as JSON for every CV fit.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// SimulationConfig as JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IdentifyArgs {
    /// Directory written by `decompose`.
    #[arg(long)]
    fit: PathBuf,
    /// Defaults to `<fit>/identified`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Directory written by `decompose`.
    #[arg(long)]
    fit: PathBuf,
    /// Share of explained variance kept by the suggested ranks.
    #[arg(long, default_value_t = DEFAULT_PARSIMONY_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

fn load_data(args: &InputArgs) -> anyhow::Result<(GriddedData, usize)> {
    let records = read_long_csv_path(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let (records, rejected) = if args.no_quality_filter {
        (records, Vec::new())
    } else {
        quality_filter(&records)
            .context("quality filter (use --no-quality-filter for other measures)")?
    };
    let data = gridify(&records, args.grid_start_hour)?;
    for w in &data.warnings {
        eprintln!("warning: {w}");
    }
    Ok((data, rejected.len()))
}

fn read_config<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    Ok(io::read_json(path)?)
}

fn decompose(args: DecomposeArgs) -> anyhow::Result<()> {
    let (data, rejected) = load_data(&args.input)?;
    let mut opts: FitOptions = match &args.config {
        Some(p) => read_config(p)?,
        None => FitOptions::default(),
    };
    if args.config.is_none() && (args.r1.is_none() || args.r2.is_none() || args.lambda.is_none()) {
        bail!("--r1, --r2 and --lambda are required without --config");
    }
    opts.r1 = args.r1.unwrap_or(opts.r1);
    opts.r2 = args.r2.unwrap_or(opts.r2);
    opts.lambda = args.lambda.unwrap_or(opts.lambda);
    opts.boundary = args.boundary.unwrap_or(opts.boundary);
    let out = if args.penalize_components {
        fit_penalized_components_full(&data.tensor, &opts)?
    } else {
        if opts.variant == Variant::PenalizeComponents {
            opts.variant = Variant::SmoothFit;
        }
        fit_missing_full(&data.tensor, &opts, None)?
    };
    let dec = &out.decomposition;
    let ev = explained_variance(&data.tensor, dec)?;
    let mut summary = FitSummary::new(dec, ev, data.subjects.clone(), data.normalization.clone());
    summary.warnings.extend(data.warnings.iter().cloned());
    if rejected > 0 {
        summary
            .warnings
            .push(format!("{rejected} implausible readings set to missing"));
    }
    save_fit(&args.out, dec, &summary)?;
    write_imputed_csv(
        &args.out.join("imputed.csv"),
        &out.imputed,
        data.tensor.mask(),
        &data.normalization,
        &data.subjects,
    )?;
    for w in &dec.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "fit r1={} r2={} lambda={} explained variance {:.4} ({} outer iterations) -> {}",
        opts.r1,
        opts.r2,
        opts.lambda,
        ev,
        dec.outer_iterations,
        args.out.display()
    );
    Ok(())
}

fn tune(args: TuneArgs) -> anyhow::Result<()> {
    let (data, _) = load_data(&args.input)?;
    let mut opts: FitOptions = match &args.config {
        Some(p) => read_config(p)?,
        None => FitOptions::default(),
    };
    opts.boundary = args.boundary.unwrap_or(opts.boundary);
    let spec = match &args.grid {
        Some(p) => read_config(p)?,
        None => GridSpec {
            r1_range: args.r1_range,
            r2_range: args.r2_range,
            lambda_min: args.lambda_min,
            lambda_max: args.lambda_max,
            coarse_points: args.coarse_points,
            fine_points: args.fine_points,
            warm_start: !args.no_warm_start,
        },
    };
    let folds = make_folds(&data.tensor, args.k, args.seed)?;
    let report = grid_search(&data.tensor, &folds, &spec, &opts)?;
    fs::create_dir_all(&args.out)?;
    write_cv_report_csv(&args.out.join("cv_report.csv"), &report)?;
    write_json(&args.out.join("cv_report.json"), &report)?;
    let sel = report.selected_entry();
    println!(
        "selected r1={} r2={} lambda={} (cv error {:.6}, {} stage) -> {}",
        sel.r1,
        sel.r2,
        sel.lambda,
        sel.error,
        sel.stage.as_str(),
        args.out.display()
    );
    Ok(())
}

fn simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let mut config: SimulationConfig = match &args.config {
        Some(p) => read_config(p)?,
        None => SimulationConfig::default(),
    };
    config.seed = args.seed.unwrap_or(config.seed);
    config.replications = args.replications.unwrap_or(config.replications);
    let result = run_study(&config)?;
    fs::create_dir_all(&args.out)?;
    result.write_csv(fs::File::create(args.out.join("results.csv"))?)?;
    write_json(&args.out.join("summary.json"), &result.summary())?;
    for (rep, e) in &result.failures {
        eprintln!("warning: replication {rep} failed: {e}");
    }
    for s in result.summary() {
        println!(
            "{:<10} median loss_M {:.5} (IQR {:.5}-{:.5}, {} runs)",
            s.method, s.median, s.q1, s.q3, s.count
        );
    }
    Ok(())
}

fn identify_cmd(args: IdentifyArgs) -> anyhow::Result<()> {
    let (dec, mut summary) = io::load_fit(&args.fit)?;
    let id = identify(&dec);
    let rotated = id.to_decomposition(&dec);
    summary.warnings.extend(id.warnings.iter().cloned());
    let out = args.out.unwrap_or_else(|| args.fit.join("identified"));
    save_fit(&out, &rotated, &summary)?;
    write_json(
        &out.join("singular_values.json"),
        &serde_json::json!({
            "mode1": id.mode1_singular_values.as_slice(),
            "mode2": id.mode2_singular_values.as_slice(),
        }),
    )?;
    for w in &id.warnings {
        eprintln!("warning: {w}");
    }
    println!("identified fit -> {}", out.display());
    Ok(())
}

fn report(args: ReportArgs) -> anyhow::Result<()> {
    let (dec, summary) = io::load_fit(&args.fit)?;
    let (data, _) = load_data(&args.input)?;
    if data.subjects != summary.subjects
        || data.normalization.measures != summary.normalization.measures
    {
        bail!("input data does not match the subjects and measures of the saved fit");
    }
    let id = identify(&dec);
    let info = &summary.normalization;
    fs::create_dir_all(&args.out)?;
    write_component_curves_csv(&args.out.join("component_curves.csv"), &id.l_tilde, info)?;
    let profile = component_variance_profile(&id, &data.tensor)?;
    write_variance_profile_csv(&args.out.join("variance_profile.csv"), &profile)?;
    let curves = (0..id.l_tilde.ncols())
        .map(|k| component_effect_curves(&id, k, info))
        .collect::<smoothhooi::Result<Vec<_>>>()?;
    write_effect_curves_csv(&args.out.join("effect_curves.csv"), &curves, info)?;
    let parsimony = parsimony_report(&id, &data.tensor, args.threshold)?;
    write_json(&args.out.join("parsimony.json"), &parsimony)?;
    println!(
        "explained variance {:.4}; suggested ranks r1={} r2={} -> {}",
        profile.total,
        parsimony.suggested_r1,
        parsimony.suggested_r2,
        args.out.display()
    );
    Ok(())
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("SMOOTHHOOI_THREADS") {
        let n: usize =
            v.trim().parse().ok().filter(|&n| n > 0).with_context(|| {
                format!("SMOOTHHOOI_THREADS must be a positive integer, got `{v}`")
            })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Parse { .. } | Error::Csv(_) | Error::Json(_) => 2,
                Error::Numerical(_) | Error::NonFinite(_) | Error::UnidentifiableFiber(_) => 3,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Decompose(a) => decompose(a),
        Command::Tune(a) => tune(a),
        Command::Simulate(a) => simulate(a),
        Command::Identify(a) => identify_cmd(a),
        Command::Report(a) => report(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
