use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use semig::dp::residual_density_estimate;
use semig::evidence::evidence;
use semig::io::{
    load_dataset, write_density_csv, write_evidence_csv, write_json, write_mip_curves_csv, write_replicates_csv,
    write_summary_files, write_trajectory_csv, write_trajectory_summary_csv, RunManifest,
};
use semig::partitions::EXACT_LIMIT;
use semig::sampler::Sampler;
use semig::sim::{mip_curves, run_replicates, Baseline, GeneratorSpec, ReplicateResult, PREDICTION_RULE};
use semig::ssvs::HyperG;
use semig::trajectory::{bf_trajectory, FixedAllocation, TrajectoryMode, TrajectorySpec};
use semig::{diagnostics, Allocation, Error, InclusionVector, ResidualModel, SamplerConfig};

#[derive(Parser)]
#[command(name = "semig", version, about = "Bayesian variable selection with Dirichlet-process residuals")]
struct Cli {
    /// Worker threads for replicate and partition parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the simulation study and write per-replicate results.
    Simulate(SimulateArgs),
    /// Fit a dataset from CSV and write posterior summaries.
    Fit(FitArgs),
    /// Compute Bayes factors between two models.
    Bf(BfArgs),
}

#[derive(Args, Clone)]
struct SamplerArgs {
    #[arg(long, default_value_t = 50_000)]
    iters: usize,
    #[arg(long, default_value_t = 5_000)]
    burnin: usize,
    #[arg(long, default_value_t = 1)]
    thin: usize,
    #[arg(long, default_value_t = 4.0)]
    hyper_g_a: f64,
    /// Gamma shape of the DP mass prior.
    #[arg(long, default_value_t = 0.1)]
    m_shape: f64,
    /// Gamma rate of the DP mass prior.
    #[arg(long, default_value_t = 1.0)]
    m_rate: f64,
    /// Number of nodes in the griddy-Gibbs grid for g.
    #[arg(long, default_value_t = 1000)]
    grid_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SamplerArgs {
    fn config(&self, residual_model: ResidualModel) -> SamplerConfig {
        SamplerConfig {
            iterations: self.iters,
            burn_in: self.burnin,
            thin: self.thin,
            hyper_g_a: self.hyper_g_a,
            m_prior_shape: self.m_shape,
            m_prior_rate: self.m_rate,
            g_grid_size: self.grid_size,
            rng_seed: self.seed,
            residual_model,
            ..SamplerConfig::default()
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Slm,
    Nlm,
    Both,
}

#[derive(Args)]
struct SimulateArgs {
    /// 1: bimodal residuals, 2: Gaussian residuals.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    case: u8,
    /// Training sample size (ignored when --n-grid is given).
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Comma-separated sample sizes for MIP curves.
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
    #[arg(long, default_value_t = 20)]
    replicates: usize,
    #[arg(long, value_enum, default_value_t = BaselineArg::Both)]
    baseline: BaselineArg,
    #[arg(long, env = "SEMIG_OUT_DIR", default_value = "semig-out")]
    out_dir: PathBuf,
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Slm,
    Nlm,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Name of the response column; every other column is a predictor.
    #[arg(long)]
    response: String,
    /// Centre and scale each predictor before fitting.
    #[arg(long)]
    standardize: bool,
    #[arg(long, value_enum, default_value_t = ModelArg::Slm)]
    model: ModelArg,
    /// Points in the residual-density grid.
    #[arg(long, default_value_t = 200)]
    density_points: usize,
    #[arg(long, env = "SEMIG_OUT_DIR", default_value = "semig-out")]
    out_dir: PathBuf,
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum BfMode {
    Exact,
    Trajectory,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum TrajectoryAllocation {
    /// Sum over all allocations (n at most the exact limit).
    Exact,
    Identity,
    Single,
}

#[derive(Args)]
struct BfArgs {
    #[arg(long, value_enum)]
    mode: BfMode,
    /// Zero-based predictor indices of model 1, comma-separated; empty for the null model.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    model1: Vec<usize>,
    /// Zero-based predictor indices of model 2.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    model2: Vec<usize>,
    /// DP mass used to sum over allocations.
    #[arg(long, default_value_t = 1.0)]
    m: f64,
    #[arg(long, default_value_t = 4.0)]
    hyper_g_a: f64,
    /// Dataset for exact mode.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    response: Option<String>,
    /// Trajectory mode: allocation treatment.
    #[arg(long, value_enum, default_value_t = TrajectoryAllocation::Exact)]
    allocation: TrajectoryAllocation,
    /// Trajectory mode: generating coefficients over all predictors.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [1.5, 0.0])]
    beta: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    phi: f64,
    /// Trajectory mode: sample sizes.
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
    /// Trajectory mode: largest n when --n-grid is absent (grid 4, 8, ... up to it).
    #[arg(long, default_value_t = 12)]
    n_max: usize,
    #[arg(long, default_value_t = 50)]
    replicates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "SEMIG_OUT_DIR", default_value = "semig-out")]
    out_dir: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::MissingColumn(_)
            | Error::InvalidConfig(_)
            | Error::InvalidModel(_)
            | Error::TooLarge { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn baselines(arg: BaselineArg) -> Vec<Baseline> {
    match arg {
        BaselineArg::Slm => vec![Baseline::Slm],
        BaselineArg::Nlm => vec![Baseline::Nlm],
        BaselineArg::Both => vec![Baseline::Slm, Baseline::Nlm],
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, k) = v.fold((0.0, 0usize), |(s, k), x| (s + x, k + 1));
    s / k as f64
}

fn simulate(args: SimulateArgs) -> CmdResult {
    if args.replicates == 0 {
        return Err(usage("--replicates must be at least 1"));
    }
    let ns = args.n_grid.clone().unwrap_or_else(|| vec![args.n]);
    if ns.is_empty() || ns.iter().any(|&n| n < 2) {
        return Err(usage("every sample size must be at least 2"));
    }
    let config = args.sampler.config(ResidualModel::Dp);
    config.validate()?;
    let baselines = baselines(args.baseline);
    let build = |n| if args.case == 1 { GeneratorSpec::case_one(n) } else { GeneratorSpec::case_two(n) };
    let mut results: Vec<ReplicateResult> = Vec::new();
    for &n in &ns {
        let spec = build(n);
        let rs = run_replicates(&spec, &config, &baselines, args.replicates, args.sampler.seed)?;
        for b in &baselines {
            let mine: Vec<&ReplicateResult> = rs.iter().filter(|r| r.baseline == *b && r.diverged.is_none()).collect();
            let failed = args.replicates - mine.len();
            println!(
                "n={n} {}: oos_mse={:.4} beta_mse={:.4} correct_median_model={}/{}{}",
                b.name(),
                mean(mine.iter().map(|r| r.oos_mse)),
                mean(mine.iter().map(|r| r.beta_mse)),
                mine.iter().filter(|r| r.median_model_correct).count(),
                args.replicates,
                if failed > 0 { format!(" diverged={failed}") } else { String::new() },
            );
        }
        results.extend(rs);
    }
    let spec = build(ns[0]);
    let names: Vec<String> = (1..=spec.p()).map(|j| format!("x{j}")).collect();
    let out = &args.out_dir;
    write_replicates_csv(&out.join("replicates.csv"), &results, &names)?;
    write_mip_curves_csv(&out.join("mip_curves.csv"), &mip_curves(&results), &names)?;
    let mut manifest = RunManifest::new(
        "simulate",
        args.sampler.seed,
        json!({
            "case": args.case,
            "n_grid": ns,
            "replicates": args.replicates,
            "baselines": baselines,
            "beta_true": spec.beta_true,
            "residual": spec.residual,
            "test_n": spec.test_n,
        }),
    );
    manifest.config = Some(config);
    manifest.prediction_rule = Some(PREDICTION_RULE.to_string());
    manifest.outputs = vec!["replicates.csv".into(), "mip_curves.csv".into()];
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(())
}

fn density_grid(centre: f64, half_width: f64, points: usize) -> Vec<f64> {
    let lo = centre - half_width;
    let step = 2.0 * half_width / (points - 1) as f64;
    (0..points).map(|i| lo + i as f64 * step).collect()
}

fn fit(args: FitArgs) -> CmdResult {
    if args.density_points < 2 {
        return Err(usage("--density-points must be at least 2"));
    }
    let loaded = load_dataset(&args.data, &args.response)?;
    eprintln!(
        "kept {} rows, dropped {} rows with missing values",
        loaded.dataset.n(),
        loaded.dropped
    );
    let data = if args.standardize { loaded.dataset.standardized()? } else { loaded.dataset };
    let residual_model = match args.model {
        ModelArg::Slm => ResidualModel::Dp,
        ModelArg::Nlm => ResidualModel::Single,
    };
    let config = args.sampler.config(residual_model);
    config.validate()?;
    let out = Sampler::new(&data, config.clone())?.keep_mixtures(true).run()?;
    let summary = diagnostics::summarize(&out.draws, data.names())?;
    let dir = &args.out_dir;
    write_summary_files(dir, "summary", &summary)?;
    let y = data.y();
    let ybar = mean(y.iter().copied());
    let sd = mean(y.iter().map(|v| (v - ybar).powi(2))).sqrt().max(f64::MIN_POSITIVE);
    let grid = density_grid(summary.intercept_hat, 4.0 * sd, args.density_points);
    let density = residual_density_estimate(&out.draws.mixtures, &grid)?;
    write_density_csv(&dir.join("residual_density.csv"), &grid, &density)?;
    for j in 0..summary.names.len() {
        println!(
            "{:>12}  mip={:.3}  beta={:+.4}  ci=[{:+.4}, {:+.4}]",
            summary.names[j], summary.mip[j], summary.beta_hat[j], summary.ci_low[j], summary.ci_high[j]
        );
    }
    println!(
        "phi={:.4} g={:.3} m={:.3} clusters={:.2} collinearity_exclusions={} g_fallbacks={}",
        summary.phi_hat,
        summary.g_hat,
        summary.m_hat,
        summary.mean_clusters,
        out.stats.collinearity_exclusions,
        out.stats.g_fallbacks
    );
    let mut manifest = RunManifest::new(
        "fit",
        args.sampler.seed,
        json!({
            "data": args.data,
            "response": args.response,
            "standardize": args.standardize,
            "rows_used": data.n(),
            "rows_dropped": loaded.dropped,
            "density_points": args.density_points,
        }),
    );
    manifest.config = Some(config);
    manifest.outputs = vec!["summary.csv".into(), "summary.json".into(), "residual_density.csv".into()];
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(())
}

fn bf(args: BfArgs) -> CmdResult {
    if !(args.m > 0.0 && args.m.is_finite()) {
        return Err(usage("--m must be positive"));
    }
    let prior = HyperG::new(args.hyper_g_a)?;
    match args.mode {
        BfMode::Exact => bf_exact(&args, prior),
        BfMode::Trajectory => bf_trajectory_cmd(&args),
    }
}

fn bf_exact(args: &BfArgs, prior: HyperG) -> CmdResult {
    let (Some(path), Some(response)) = (&args.data, &args.response) else {
        return Err(usage("exact mode needs --data and --response"));
    };
    let loaded = load_dataset(path, response)?;
    let data = loaded.dataset;
    let n = data.n();
    let limit = args.n_max.min(EXACT_LIMIT);
    if n > limit {
        return Err(usage(format!(
            "exact evaluation enumerates every allocation and is limited to n <= {limit}; the dataset has {n} rows"
        )));
    }
    let g1 = InclusionVector::from_indices(data.p(), &args.model1, n)?;
    let g2 = InclusionVector::from_indices(data.p(), &args.model2, n)?;
    let allocations = vec![
        ("identity".to_string(), Allocation::identity(n)),
        ("single".to_string(), Allocation::single(n)),
    ];
    let rows = evidence(&data, &g1, &g2, &allocations, Some(args.m), prior)?;
    if let Some(u) = rows[0].log_bf_unconditional {
        println!("log BF(model2 : model1) = {u:.6}");
    }
    let dir = &args.out_dir;
    write_evidence_csv(&dir.join("evidence.csv"), &rows)?;
    let mut manifest = RunManifest::new(
        "bf",
        args.seed,
        json!({
            "mode": "exact",
            "data": path,
            "response": response,
            "rows_dropped": loaded.dropped,
            "model1": args.model1,
            "model2": args.model2,
            "m": args.m,
            "hyper_g_a": args.hyper_g_a,
        }),
    );
    manifest.outputs = vec!["evidence.csv".into()];
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(())
}

fn bf_trajectory_cmd(args: &BfArgs) -> CmdResult {
    if args.replicates == 0 {
        return Err(usage("--replicates must be at least 1"));
    }
    let n_grid = match &args.n_grid {
        Some(g) => g.clone(),
        None => (1..=args.n_max / 4).map(|k| 4 * k).collect(),
    };
    if n_grid.is_empty() || n_grid.iter().any(|&n| n < 2) {
        return Err(usage("sample sizes must be at least 2"));
    }
    let mode = match args.allocation {
        TrajectoryAllocation::Exact => {
            let top = *n_grid.iter().max().unwrap_or(&0);
            if top > EXACT_LIMIT || args.n_max > EXACT_LIMIT {
                return Err(usage(format!(
                    "exact allocation sums are limited to n <= {EXACT_LIMIT}; requested n = {}",
                    top.max(args.n_max)
                )));
            }
            TrajectoryMode::Exact { dp_mass: args.m }
        }
        TrajectoryAllocation::Identity => TrajectoryMode::Conditional { allocation: FixedAllocation::Identity },
        TrajectoryAllocation::Single => TrajectoryMode::Conditional { allocation: FixedAllocation::Single },
    };
    let spec = TrajectorySpec {
        beta_true: args.beta.clone(),
        phi: args.phi,
        model1: args.model1.clone(),
        model2: args.model2.clone(),
        mode,
        hyper_g_a: args.hyper_g_a,
    };
    let (rows, summaries) = bf_trajectory(&spec, &n_grid, args.replicates, args.seed)?;
    for s in &summaries {
        println!(
            "n={:>5}  median log BF={:+.4}  IQR=[{:+.4}, {:+.4}]  R2=({:.4}, {:.4})",
            s.n, s.median, s.q25, s.q75, s.mean_r2_model1, s.mean_r2_model2
        );
    }
    let dir = &args.out_dir;
    write_trajectory_csv(&dir.join("trajectory.csv"), &rows)?;
    write_trajectory_summary_csv(&dir.join("trajectory_summary.csv"), &summaries)?;
    let mut manifest = RunManifest::new(
        "bf",
        args.seed,
        json!({ "mode": "trajectory", "trajectory": spec, "n_grid": n_grid, "replicates": args.replicates }),
    );
    manifest.outputs = vec!["trajectory.csv".into(), "trajectory_summary.csv".into()];
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(())
}

fn init_threads(threads: Option<usize>) -> CmdResult {
    if let Some(t) = threads {
        if t == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    init_threads(cli.threads)?;
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Bf(a) => bf(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
