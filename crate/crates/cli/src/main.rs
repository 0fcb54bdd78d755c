use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use profit_core::competitors::{run_zc_on, ZcConfig, ZcMethod, ZcResult};
use profit_core::data::{load_csv, IngestOptions};
use profit_core::marginal::WeightScheme;
use profit_core::plrt::{default_lambda_grid, simulate_null, NullSpectrum};
use profit_core::profit::{project_dataset, test_projections, ProfitReport, Timings};
use profit_core::simstudy::{
    generate, run_power_experiment, run_size_experiment, run_timing, ExperimentConfig, Method, SimConfig,
};
use profit_core::{ProfitConfig, ProfitError};

#[derive(Parser, Debug)]
#[command(name = "profit", version, about = "Test whether the mean of longitudinal functional data changes over time")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "PROFIT_THREADS", default_value_t = 0)]
    threads: usize,

    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the test on a long-format CSV (subject_id, t, s, y, covariates...).
    Test(TestArgs),
    /// Generate a synthetic dataset.
    Simulate(SimulateArgs),
    /// Empirical size under the null generator.
    Size(SizeArgs),
    /// Empirical power over a grid of trend magnitudes.
    Power(PowerArgs),
    /// Wall-clock time per replicate and method.
    Timing(TimingArgs),
    /// Draws from the asymptotic null of the likelihood ratio statistic.
    NullDist(NullDistArgs),
    /// Estimate and export the marginal eigenbasis.
    Basis(BasisArgs),
}

#[derive(Args, Debug, Clone)]
struct PipelineArgs {
    /// Fraction of variance explained along s (sets both levels unless --pve-t is given).
    #[arg(long, default_value_t = 0.9)]
    pve: f64,
    /// Fraction of variance explained along t in the pre-whitening step.
    #[arg(long)]
    pve_t: Option<f64>,
    /// Order of the truncated power basis.
    #[arg(long, default_value_t = 1)]
    p: usize,
    /// Cap on the number of directions.
    #[arg(long, default_value_t = 15)]
    max_k: usize,
    /// Subject weights in the covariance estimate: pooled or per-subject.
    #[arg(long, default_value = "pooled", value_parser = parse_weights)]
    weights: WeightScheme,
    /// Subject-level covariate adjusted for (repeatable).
    #[arg(long = "covariate")]
    covariates: Vec<String>,
}

impl PipelineArgs {
    fn config(&self, alpha: f64, n_sim: usize, seed: u64) -> ProfitConfig {
        ProfitConfig {
            pve_s: self.pve,
            pve_t: self.pve_t.unwrap_or(self.pve),
            alpha,
            p: self.p,
            n_sim,
            seed,
            weight_scheme: self.weights,
            covariates: self.covariates.clone(),
            max_k: self.max_k,
            ..ProfitConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct TestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Null draws per direction.
    #[arg(long, default_value_t = 10_000)]
    nsim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also run a competitor on the same projections: zc-mc or zc-bt.
    #[arg(long, value_parser = parse_zc)]
    method: Option<ZcMethod>,
    /// Bootstrap samples for zc-bt.
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
    /// Include stage timings in the report.
    #[arg(long)]
    timings: bool,
    /// Report path (stdout if absent).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args, Debug, Clone)]
struct GeneratorArgs {
    /// Subjects.
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Visits per subject as min:max.
    #[arg(long, default_value = "8:12", value_parser = parse_range)]
    m: (usize, usize),
    /// Points of the functional grid.
    #[arg(long, default_value_t = 101)]
    r: usize,
}

impl GeneratorArgs {
    fn sim(&self) -> SimConfig {
        SimConfig {
            r: self.r,
            ..SimConfig::cell(self.n, self.m.0, self.m.1)
        }
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    gen: GeneratorArgs,
    /// Trend magnitude (0 is the null).
    #[arg(long, default_value_t = 0.0)]
    delta: f64,
    #[arg(long)]
    seed: u64,
    /// Output file, CSV or .json (CSV on stdout if absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ExperimentArgs {
    /// Replicates per cell.
    #[arg(long, default_value_t = 400)]
    reps: usize,
    #[arg(long)]
    seed: u64,
    /// Nominal level (repeatable; default 0.01, 0.05, 0.10, 0.15).
    #[arg(long = "alpha")]
    alphas: Vec<f64>,
    /// Method: profit, zc-mc or zc-bt (repeatable).
    #[arg(long = "method", default_value = "profit", value_parser = parse_method)]
    methods: Vec<Method>,
    /// Null draws per direction for PROFIT.
    #[arg(long, default_value_t = 10_000)]
    nsim: usize,
    /// Bootstrap samples for ZC-BT.
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
    /// Refit ZC-BT bootstrap samples from summed normal equations.
    #[arg(long)]
    fast_bootstrap: bool,
    /// Project on the generating eigenfunctions.
    #[arg(long)]
    true_basis: bool,
    /// Machine-readable results (stdout if absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-cell CSV table.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

impl ExperimentArgs {
    fn config(&self) -> ExperimentConfig {
        let mut exp = ExperimentConfig {
            methods: self.methods.clone(),
            reps: self.reps,
            seed: self.seed,
            profit: self.pipeline.config(0.05, self.nsim, self.seed),
            zc: ZcConfig {
                b: self.bootstrap,
                fast_bootstrap: self.fast_bootstrap,
                ..ZcConfig::default()
            },
            use_true_basis: self.true_basis,
            ..ExperimentConfig::default()
        };
        if !self.alphas.is_empty() {
            exp.alphas = self.alphas.clone();
        }
        exp
    }
}

#[derive(Args, Debug)]
struct SizeArgs {
    #[command(flatten)]
    gen: GeneratorArgs,
    #[command(flatten)]
    exp: ExperimentArgs,
}

#[derive(Args, Debug)]
struct PowerArgs {
    /// Subjects per cell (repeatable).
    #[arg(long = "n", default_values_t = [100usize, 300])]
    ns: Vec<usize>,
    #[arg(long, default_value = "8:12", value_parser = parse_range)]
    m: (usize, usize),
    /// Trend magnitudes, comma separated; must include 0.
    #[arg(long, default_value = "0,0.5,1,1.5", value_delimiter = ',')]
    deltas: Vec<f64>,
    /// Plot data: one row per method, level, n and delta.
    #[arg(long)]
    curves: Option<PathBuf>,
    #[command(flatten)]
    exp: ExperimentArgs,
}

#[derive(Args, Debug)]
struct TimingArgs {
    #[command(flatten)]
    gen: GeneratorArgs,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Method: profit, zc-mc or zc-bt (repeatable; default all).
    #[arg(long = "method", value_parser = parse_method)]
    methods: Vec<Method>,
    #[arg(long, default_value_t = 10_000)]
    nsim: usize,
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
    #[arg(long)]
    fast_bootstrap: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct NullDistArgs {
    /// Eigenvalues of the projected random-effect cross product, comma separated.
    #[arg(long, value_delimiter = ',')]
    zeta: Vec<f64>,
    /// Eigenvalues of the random-effect cross product, comma separated.
    #[arg(long, value_delimiter = ',')]
    xi: Vec<f64>,
    /// Tested fixed effects (degrees of freedom of the chi-square part).
    #[arg(long, default_value_t = 1)]
    p: usize,
    #[arg(long, default_value_t = 10_000)]
    nsim: usize,
    #[arg(long)]
    seed: u64,
    /// Write the draws, one per line.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BasisArgs {
    #[arg(long)]
    input: PathBuf,
    /// Eigenfunction table (s, phi_1, ...); summary JSON goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').unwrap_or((s, s));
    let lo = a.trim().parse::<usize>().map_err(|e| e.to_string())?;
    let hi = b.trim().parse::<usize>().map_err(|e| e.to_string())?;
    if lo == 0 || lo > hi {
        return Err(format!("expected min:max with 1 <= min <= max, got {s}"));
    }
    Ok((lo, hi))
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).map_err(|e| e.to_string())
}

fn parse_zc(s: &str) -> Result<ZcMethod, String> {
    match Method::parse(s).map_err(|e| e.to_string())? {
        Method::ZcMc => Ok(ZcMethod::MonteCarlo),
        Method::ZcBt => Ok(ZcMethod::Bootstrap),
        Method::Profit => Err("competitor must be zc-mc or zc-bt".into()),
    }
}

fn parse_weights(s: &str) -> Result<WeightScheme, String> {
    match s.to_ascii_lowercase().replace('_', "-").as_str() {
        "pooled" => Ok(WeightScheme::Pooled),
        "per-subject" | "subject" => Ok(WeightScheme::PerSubject),
        other => Err(format!("unknown weight scheme '{other}'")),
    }
}

fn exit_code(e: &ProfitError) -> u8 {
    match e.root() {
        ProfitError::Io { .. } => 10,
        ProfitError::Csv(_) | ProfitError::Structural(_) | ProfitError::Json(_) => 11,
        ProfitError::Validation(_) => 12,
        ProfitError::Config(_) => 13,
        ProfitError::Degenerate(_) => 14,
        _ => 15,
    }
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), ProfitError> {
    let io_err = |source| ProfitError::Io {
        path: path.map(Path::to_path_buf).unwrap_or_else(|| "stdout".into()),
        source,
    };
    match path {
        Some(p) => fs::write(p, text).map_err(io_err),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes()).and_then(|_| out.flush()).map_err(io_err)
        }
    }
}

fn create(path: &Path) -> Result<io::BufWriter<fs::File>, ProfitError> {
    fs::File::create(path).map(io::BufWriter::new).map_err(|source| ProfitError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<T: Serialize>(v: &T) -> Result<String, ProfitError> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

#[derive(Serialize)]
struct CombinedReport {
    profit: ProfitReport,
    competitor: ZcResult,
}

fn cmd_test(a: &TestArgs) -> Result<u8, ProfitError> {
    let opts = IngestOptions {
        covariates: (!a.pipeline.covariates.is_empty()).then(|| a.pipeline.covariates.clone()),
        ..IngestOptions::default()
    };
    let ds = load_csv(&a.input, &opts)?;
    let mut cfg = a.pipeline.config(a.alpha, a.nsim, a.seed);
    cfg.record_timings = a.timings;
    cfg.validate()?;
    let t0 = Instant::now();
    let proj = project_dataset(&ds, &cfg)?;
    let t1 = Instant::now();
    let mut report = test_projections(&ds, &proj, &cfg)?;
    if a.timings {
        report.timings = Some(Timings {
            projection_seconds: (t1 - t0).as_secs_f64(),
            testing_seconds: t1.elapsed().as_secs_f64(),
        });
    }
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let code = report.exit_code() as u8;
    let text = match a.method {
        None => report.to_json()? + "\n",
        Some(m) => {
            let zc = ZcConfig {
                b: a.bootstrap,
                ..ZcConfig::default()
            };
            let competitor = run_zc_on(&ds, &proj, m, &cfg, &zc)?;
            to_json(&CombinedReport { profit: report, competitor })?
        }
    };
    write_output(a.out.as_deref(), &text)?;
    Ok(code)
}

fn cmd_simulate(a: &SimulateArgs) -> Result<u8, ProfitError> {
    let sim = SimConfig {
        delta: a.delta,
        seed: a.seed,
        ..a.gen.sim()
    };
    let ds = generate(&sim)?;
    match &a.out {
        Some(p) if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) => ds.save_json(p)?,
        Some(p) => ds.save_csv(p)?,
        None => ds.write_csv(io::stdout().lock())?,
    }
    Ok(0)
}

fn finish_experiment(res: &profit_core::simstudy::ExperimentResult, exp: &ExperimentArgs) -> Result<(), ProfitError> {
    if let Some(p) = &exp.csv {
        res.write_csv(create(p)?)?;
    }
    write_output(exp.out.as_deref(), &(res.to_json()? + "\n"))
}

fn cmd_size(a: &SizeArgs) -> Result<u8, ProfitError> {
    let res = run_size_experiment(&[a.gen.sim()], &a.exp.config())?;
    finish_experiment(&res, &a.exp)?;
    Ok(0)
}

fn cmd_power(a: &PowerArgs) -> Result<u8, ProfitError> {
    let cells: Vec<SimConfig> = a.ns.iter().map(|&n| SimConfig::cell(n, a.m.0, a.m.1)).collect();
    let res = run_power_experiment(&a.deltas, &cells, &a.exp.config())?;
    if let Some(p) = &a.curves {
        res.write_power_curves(create(p)?)?;
    }
    finish_experiment(&res, &a.exp)?;
    Ok(0)
}

fn cmd_timing(a: &TimingArgs) -> Result<u8, ProfitError> {
    let methods = if a.methods.is_empty() { Method::ALL.to_vec() } else { a.methods.clone() };
    let exp = ExperimentConfig {
        seed: a.seed,
        profit: ProfitConfig {
            n_sim: a.nsim,
            seed: a.seed,
            ..ProfitConfig::default()
        },
        zc: ZcConfig {
            b: a.bootstrap,
            fast_bootstrap: a.fast_bootstrap,
            ..ZcConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let sim = SimConfig {
        seed: a.seed,
        ..a.gen.sim()
    };
    let res = run_timing(&sim, &methods, a.reps, &exp)?;
    write_output(a.out.as_deref(), &to_json(&res)?)?;
    Ok(0)
}

#[derive(Serialize)]
struct NullSummary {
    n_sim: usize,
    seed: u64,
    p: usize,
    zero_mass: f64,
    mean: f64,
    quantiles: Vec<(f64, f64)>,
}

fn cmd_null_dist(a: &NullDistArgs) -> Result<u8, ProfitError> {
    if a.zeta.len() != a.xi.len() {
        return Err(ProfitError::Config(format!(
            "zeta and xi need the same length ({} vs {})",
            a.zeta.len(),
            a.xi.len()
        )));
    }
    let desc = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(|x, y| y.total_cmp(x));
        v
    };
    let spectrum = NullSpectrum {
        xi: desc(&a.xi),
        zeta: desc(&a.zeta),
        p_tested: a.p,
    };
    let lambdas = default_lambda_grid(&spectrum.xi);
    let draws = simulate_null(&spectrum, a.nsim, &lambdas, a.seed)?;
    if let Some(p) = &a.out {
        let mut w = create(p)?;
        let io_err = |source| ProfitError::Io { path: p.clone(), source };
        for d in &draws {
            writeln!(w, "{d:.17e}").map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
    }
    let mut sorted = draws.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let quantiles = [0.5, 0.9, 0.95, 0.99]
        .iter()
        .map(|&q| (q, sorted[((q * n as f64).ceil() as usize).clamp(1, n) - 1]))
        .collect();
    let summary = NullSummary {
        n_sim: n,
        seed: a.seed,
        p: a.p,
        zero_mass: draws.iter().filter(|&&d| d <= 0.0).count() as f64 / n as f64,
        mean: draws.iter().sum::<f64>() / n as f64,
        quantiles,
    };
    write_output(None, &to_json(&summary)?)?;
    Ok(0)
}

#[derive(Serialize)]
struct BasisReport {
    k: usize,
    eigenvalues: Vec<f64>,
    pve_achieved: f64,
    total_trace: f64,
    bandwidth: Option<f64>,
    hash: String,
    warnings: Vec<String>,
}

fn cmd_basis(a: &BasisArgs) -> Result<u8, ProfitError> {
    let opts = IngestOptions {
        covariates: (!a.pipeline.covariates.is_empty()).then(|| a.pipeline.covariates.clone()),
        ..IngestOptions::default()
    };
    let ds = load_csv(&a.input, &opts)?;
    let cfg = a.pipeline.config(0.05, 10_000, 0);
    cfg.validate()?;
    let proj = project_dataset(&ds, &cfg)?;
    if let Some(p) = &a.out {
        proj.basis.write_csv(create(p)?)?;
    }
    let b = &proj.basis;
    let report = BasisReport {
        k: b.k(),
        eigenvalues: b.eigenvalues.clone(),
        pve_achieved: b.pve_achieved,
        total_trace: b.total_trace,
        bandwidth: proj.bandwidth,
        hash: b.hash(),
        warnings: proj.warnings.clone(),
    };
    write_output(None, &to_json(&report)?)?;
    Ok(0)
}

fn run(cli: &Cli) -> Result<u8, ProfitError> {
    match &cli.command {
        Command::Test(a) => cmd_test(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Size(a) => cmd_size(a),
        Command::Power(a) => cmd_power(a),
        Command::Timing(a) => cmd_timing(a),
        Command::NullDist(a) => cmd_null_dist(a),
        Command::Basis(a) => cmd_basis(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(15);
        }
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
