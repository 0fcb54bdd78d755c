//! Synthetic generator and the size, power and timing experiment drivers.
//!
//! Curves follow `Y_ij(s) = μ(s, t_ij) + Σ_k (ε_ik(t_ij) + r_ijk) φ_k(s) + e_ij(s)`
//! with `μ(s, t) = cos(πs/2) + 5δ(t/4 − s)³`, `φ₁ = √2 sin 2πs`,
//! `φ₂ = √2 cos 2πs` and `ε_ik(t) = ζ_ik1 √2 sin 2πt + ζ_ik2 √2 cos 2πt`.
//! The marginal covariance is `8 φ₁φ₁' + (16/3) φ₂φ₂'`.

use std::f64::consts::{PI, SQRT_2};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::competitors::{run_zc_on, ZcConfig, ZcMethod};
use crate::data::{unit_grid, LongitudinalFunctionalDataset, SubjectRecord};
use crate::error::{ProfitError, Result};
use crate::marginal::MarginalBasis;
use crate::profit::{project_dataset, project_with_basis, test_projections, ProfitConfig, Projections};
use crate::rng::{derive_seed, substream, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub m_min: usize,
    pub m_max: usize,
    pub delta: f64,
    /// Grid length in `s`, endpoints included.
    pub r: usize,
    /// Variances of `ζ_11, ζ_12, ζ_21, ζ_22`.
    pub score_var: [f64; 4],
    /// Variances of the visit-level effects `r_ij1, r_ij2`.
    pub visit_var: [f64; 2],
    /// White-noise variance.
    pub noise_var: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 200,
            m_min: 8,
            m_max: 12,
            delta: 0.0,
            r: 101,
            score_var: [4.0, 2.0, 3.0, 1.0],
            visit_var: [2.0, 4.0 / 3.0],
            noise_var: 10.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn cell(n: usize, m_min: usize, m_max: usize) -> Self {
        SimConfig {
            n,
            m_min,
            m_max,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(ProfitError::Config("n must be positive".into()));
        }
        if self.m_min < 1 || self.m_min > self.m_max {
            return Err(ProfitError::Config(format!(
                "invalid visit range {}..{}",
                self.m_min, self.m_max
            )));
        }
        if self.r < 4 {
            return Err(ProfitError::Config("R must be at least 4".into()));
        }
        if !(self.delta >= 0.0) {
            return Err(ProfitError::Config("delta must be non-negative".into()));
        }
        let vars = self.score_var.iter().chain(&self.visit_var).chain([&self.noise_var]);
        for v in vars {
            if !(*v >= 0.0 && v.is_finite()) {
                return Err(ProfitError::Config("variances must be finite and non-negative".into()));
            }
        }
        Ok(())
    }
}

pub fn true_mean(s: f64, t: f64, delta: f64) -> f64 {
    (PI * s / 2.0).cos() + 5.0 * delta * (t / 4.0 - s).powi(3)
}

pub fn phi1(s: f64) -> f64 {
    SQRT_2 * (2.0 * PI * s).sin()
}

pub fn phi2(s: f64) -> f64 {
    SQRT_2 * (2.0 * PI * s).cos()
}

/// Eigenvalues of the marginal covariance implied by `cfg`.
pub fn true_eigenvalues(cfg: &SimConfig) -> [f64; 2] {
    let [a, b, c, d] = cfg.score_var;
    [a + b + cfg.visit_var[0], c + d + cfg.visit_var[1]]
}

/// `Ξ(s, s')` on the grid, without the white noise.
pub fn true_marginal_cov(grid: &[f64], cfg: &SimConfig) -> DMatrix<f64> {
    let [l1, l2] = true_eigenvalues(cfg);
    DMatrix::from_fn(grid.len(), grid.len(), |i, j| {
        l1 * phi1(grid[i]) * phi1(grid[j]) + l2 * phi2(grid[i]) * phi2(grid[j])
    })
}

/// The generating eigenfunctions as a basis on `grid`.
pub fn true_basis(grid: &[f64], cfg: &SimConfig) -> Result<MarginalBasis> {
    let f = DMatrix::from_fn(2, grid.len(), |k, j| if k == 0 { phi1(grid[j]) } else { phi2(grid[j]) });
    MarginalBasis::from_functions(grid, true_eigenvalues(cfg).to_vec(), f)
}

fn normal(var: f64) -> Normal<f64> {
    Normal::new(0.0, var.sqrt()).expect("variance validated")
}

/// Draw a dataset. Subject `i` uses its own seeded substream.
pub fn generate(cfg: &SimConfig) -> Result<LongitudinalFunctionalDataset> {
    cfg.validate()?;
    let grid = unit_grid(cfg.r);
    let p1: Vec<f64> = grid.iter().map(|&s| phi1(s)).collect();
    let p2: Vec<f64> = grid.iter().map(|&s| phi2(s)).collect();
    let [v11, v12, v21, v22] = cfg.score_var.map(normal);
    let [r1, r2] = cfg.visit_var.map(normal);
    let noise = normal(cfg.noise_var);
    let subjects: Vec<SubjectRecord> = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(cfg.seed, &[tag::GENERATE, i as u64]);
            let m = rng.random_range(cfg.m_min..=cfg.m_max);
            let mut times: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            times.sort_by(f64::total_cmp);
            let z = [v11.sample(&mut rng), v12.sample(&mut rng), v21.sample(&mut rng), v22.sample(&mut rng)];
            let curves = times
                .iter()
                .map(|&t| {
                    let (sn, cs) = (SQRT_2 * (2.0 * PI * t).sin(), SQRT_2 * (2.0 * PI * t).cos());
                    let e1 = z[0] * sn + z[1] * cs + r1.sample(&mut rng);
                    let e2 = z[2] * sn + z[3] * cs + r2.sample(&mut rng);
                    grid.iter()
                        .enumerate()
                        .map(|(g, &s)| true_mean(s, t, cfg.delta) + e1 * p1[g] + e2 * p2[g] + noise.sample(&mut rng))
                        .collect()
                })
                .collect();
            SubjectRecord::new(format!("s{i:04}"), times, curves)
        })
        .collect();
    let mut ds = LongitudinalFunctionalDataset::new(grid, subjects)?;
    ds.metadata.source = Some(format!(
        "simulated n={} m={}..{} delta={} seed={}",
        cfg.n, cfg.m_min, cfg.m_max, cfg.delta, cfg.seed
    ));
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "PROFIT")]
    Profit,
    #[serde(rename = "ZC-MC")]
    ZcMc,
    #[serde(rename = "ZC-BT")]
    ZcBt,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Profit, Method::ZcMc, Method::ZcBt];

    pub fn name(self) -> &'static str {
        match self {
            Method::Profit => "PROFIT",
            Method::ZcMc => "ZC-MC",
            Method::ZcBt => "ZC-BT",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "profit" => Ok(Method::Profit),
            "zc-mc" | "zcmc" => Ok(Method::ZcMc),
            "zc-bt" | "zcbt" => Ok(Method::ZcBt),
            other => Err(ProfitError::Config(format!("unknown method '{other}'"))),
        }
    }
}

/// Rejection probabilities reported for the generator at `δ = 0`
/// (PROFIT and the two competitors), and per-replicate seconds at `n = 200`.
pub mod reference {
    use super::Method;

    pub const ALPHAS: [f64; 4] = [0.01, 0.05, 0.10, 0.15];

    type Row = (usize, usize, [f64; 4]);

    const PROFIT: [Row; 10] = [
        (100, 8, [0.013, 0.057, 0.110, 0.157]),
        (150, 8, [0.010, 0.053, 0.105, 0.152]),
        (200, 8, [0.010, 0.046, 0.095, 0.145]),
        (300, 8, [0.009, 0.047, 0.096, 0.142]),
        (400, 8, [0.009, 0.048, 0.095, 0.142]),
        (100, 15, [0.010, 0.052, 0.103, 0.152]),
        (150, 15, [0.008, 0.049, 0.101, 0.146]),
        (200, 15, [0.009, 0.047, 0.096, 0.140]),
        (300, 15, [0.009, 0.048, 0.097, 0.143]),
        (400, 15, [0.008, 0.046, 0.096, 0.145]),
    ];

    const ZC_MC: [Row; 8] = [
        (100, 8, [0.017, 0.066, 0.120, 0.169]),
        (200, 8, [0.017, 0.063, 0.117, 0.168]),
        (300, 8, [0.014, 0.065, 0.114, 0.164]),
        (400, 8, [0.012, 0.062, 0.111, 0.157]),
        (100, 15, [0.009, 0.049, 0.091, 0.134]),
        (200, 15, [0.007, 0.038, 0.075, 0.117]),
        (300, 15, [0.008, 0.039, 0.081, 0.122]),
        (400, 15, [0.007, 0.038, 0.078, 0.121]),
    ];

    const ZC_BT: [Row; 8] = [
        (100, 8, [0.005, 0.017, 0.033, 0.048]),
        (200, 8, [0.005, 0.017, 0.032, 0.047]),
        (300, 8, [0.004, 0.019, 0.035, 0.051]),
        (400, 8, [0.003, 0.017, 0.032, 0.048]),
        (100, 15, [0.007, 0.034, 0.062, 0.091]),
        (200, 15, [0.006, 0.028, 0.055, 0.084]),
        (300, 15, [0.007, 0.029, 0.055, 0.086]),
        (400, 15, [0.005, 0.027, 0.055, 0.087]),
    ];

    /// Reported size for `(method, n, visit range, α)`; visit ranges are
    /// `8..=12` and `15..=20`.
    pub fn size(method: Method, n: usize, m_min: usize, m_max: usize, alpha: f64) -> Option<f64> {
        if !matches!((m_min, m_max), (8, 12) | (15, 20)) {
            return None;
        }
        let rows: &[Row] = match method {
            Method::Profit => &PROFIT,
            Method::ZcMc => &ZC_MC,
            Method::ZcBt => &ZC_BT,
        };
        let a = ALPHAS.iter().position(|&a| (a - alpha).abs() < 1e-12)?;
        rows.iter().find(|r| r.0 == n && r.1 == m_min).map(|r| r.2[a])
    }

    /// Reported seconds per replicate at `n = 200`.
    pub fn seconds(method: Method, m_min: usize, m_max: usize) -> Option<f64> {
        match ((m_min, m_max), method) {
            ((8, 12), Method::Profit) => Some(7.546),
            ((8, 12), Method::ZcMc) => Some(2.317),
            ((8, 12), Method::ZcBt) => Some(24.412),
            ((15, 20), Method::Profit) => Some(8.010),
            ((15, 20), Method::ZcMc) => Some(2.376),
            ((15, 20), Method::ZcBt) => Some(30.081),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub reps: usize,
    pub seed: u64,
    pub alphas: Vec<f64>,
    pub profit: ProfitConfig,
    pub zc: ZcConfig,
    /// Project on the generating eigenfunctions instead of estimated ones.
    pub use_true_basis: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            methods: vec![Method::Profit],
            reps: 400,
            seed: 0,
            alphas: reference::ALPHAS.to_vec(),
            profit: ProfitConfig::default(),
            zc: ZcConfig::default(),
            use_true_basis: false,
        }
    }
}

/// One replicate and method: the decision inputs and elapsed time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    /// `(K, min p)` or the failure message.
    pub result: std::result::Result<(usize, f64), String>,
    pub seconds: f64,
}

impl MethodOutcome {
    /// Bonferroni decision at level `alpha`; a level of one or more always
    /// rejects.
    pub fn rejects(&self, alpha: f64) -> Option<bool> {
        if alpha >= 1.0 {
            return Some(true);
        }
        self.result.as_ref().ok().map(|&(k, p)| p < alpha / k as f64)
    }
}

/// Seed of replicate `rep` in a `(n, visit range)` cell; shared across δ.
pub fn replicate_seed(seed: u64, sim: &SimConfig, rep: usize) -> u64 {
    derive_seed(
        seed,
        &[tag::REPLICATE, sim.n as u64, sim.m_min as u64, sim.m_max as u64, rep as u64],
    )
}

fn projections(
    ds: &LongitudinalFunctionalDataset,
    sim: &SimConfig,
    cfg: &ProfitConfig,
    use_true_basis: bool,
) -> Result<Projections> {
    if use_true_basis {
        project_with_basis(ds, true_basis(&ds.grid_s, sim)?, None, cfg, Vec::new())
    } else {
        project_dataset(ds, cfg)
    }
}

fn apply(
    method: Method,
    ds: &LongitudinalFunctionalDataset,
    proj: &Projections,
    cfg: &ProfitConfig,
    zc: &ZcConfig,
) -> Result<(usize, f64)> {
    match method {
        Method::Profit => test_projections(ds, proj, cfg).map(|r| (r.k, r.min_p)),
        Method::ZcMc => run_zc_on(ds, proj, ZcMethod::MonteCarlo, cfg, zc).map(|r| (r.k, r.min_p)),
        Method::ZcBt => run_zc_on(ds, proj, ZcMethod::Bootstrap, cfg, zc).map(|r| (r.k, r.min_p)),
    }
}

/// Generate one replicate and run every method on shared projections.
/// Reported seconds include the projection step for each method.
pub fn run_replicate(sim: &SimConfig, exp: &ExperimentConfig, rep: usize) -> Vec<MethodOutcome> {
    let seed = replicate_seed(exp.seed, sim, rep);
    let cfg = ProfitConfig {
        seed,
        ..exp.profit.clone()
    };
    let sim = SimConfig {
        seed,
        ..sim.clone()
    };
    let fail = |msg: String, seconds: f64| {
        exp.methods
            .iter()
            .map(|&method| MethodOutcome {
                method,
                result: Err(msg.clone()),
                seconds,
            })
            .collect::<Vec<_>>()
    };
    let ds = match generate(&sim) {
        Ok(ds) => ds,
        Err(e) => return fail(e.to_string(), 0.0),
    };
    let t0 = Instant::now();
    let proj = match projections(&ds, &sim, &cfg, exp.use_true_basis) {
        Ok(p) => p,
        Err(e) => return fail(e.to_string(), t0.elapsed().as_secs_f64()),
    };
    let base = t0.elapsed().as_secs_f64();
    exp.methods
        .iter()
        .map(|&method| {
            let t = Instant::now();
            let result = apply(method, &ds, &proj, &cfg, &exp.zc).map_err(|e| e.to_string());
            MethodOutcome {
                method,
                result,
                seconds: base + t.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub n: usize,
    pub m_min: usize,
    pub m_max: usize,
    pub delta: f64,
    pub alpha: f64,
    pub reps: usize,
    pub failures: usize,
    pub rejections: usize,
    /// Rejection rate over successful replicates.
    pub rate: f64,
    pub se: f64,
    pub reference: Option<f64>,
    pub median_seconds: f64,
}

impl CellResult {
    /// Whether the rate lies within `z` Monte Carlo standard errors of
    /// `target`, the standard error taken at `target`.
    pub fn within(&self, target: f64, z: f64) -> bool {
        let ok = (self.reps - self.failures).max(1) as f64;
        (self.rate - target).abs() <= z * (target * (1.0 - target) / ok).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monotonicity {
    pub method: Method,
    pub n: usize,
    pub m_min: usize,
    pub m_max: usize,
    pub alpha: f64,
    /// Power never drops by more than two standard errors along δ.
    pub non_decreasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub kind: String,
    pub seed: u64,
    pub reps: usize,
    pub use_true_basis: bool,
    pub cells: Vec<CellResult>,
    pub monotonicity: Vec<Monotonicity>,
}

impl ExperimentResult {
    pub fn find(&self, method: Method, n: usize, m_min: usize, delta: f64, alpha: f64) -> Option<&CellResult> {
        self.cells.iter().find(|c| {
            c.method == method
                && c.n == n
                && c.m_min == m_min
                && (c.delta - delta).abs() < 1e-12
                && (c.alpha - alpha).abs() < 1e-12
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "method", "n", "m_min", "m_max", "delta", "alpha", "reps", "failures", "rejections", "rate", "se",
            "reference", "median_seconds",
        ])?;
        for c in &self.cells {
            out.write_record([
                c.method.name().to_string(),
                c.n.to_string(),
                c.m_min.to_string(),
                c.m_max.to_string(),
                c.delta.to_string(),
                c.alpha.to_string(),
                c.reps.to_string(),
                c.failures.to_string(),
                c.rejections.to_string(),
                c.rate.to_string(),
                c.se.to_string(),
                c.reference.map(|r| r.to_string()).unwrap_or_default(),
                c.median_seconds.to_string(),
            ])?;
        }
        out.flush().map_err(|e| ProfitError::Csv(e.to_string()))?;
        Ok(())
    }

    /// `δ` against power, one column per method and cell, for plotting.
    pub fn write_power_curves<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["method", "n", "m_range", "alpha", "delta", "power", "se"])?;
        let mut cells: Vec<&CellResult> = self.cells.iter().collect();
        cells.sort_by(|a, b| {
            (a.method, a.n, a.m_min, a.alpha.to_bits(), a.delta.to_bits())
                .cmp(&(b.method, b.n, b.m_min, b.alpha.to_bits(), b.delta.to_bits()))
        });
        for c in cells {
            out.write_record([
                c.method.name().to_string(),
                c.n.to_string(),
                format!("{}-{}", c.m_min, c.m_max),
                c.alpha.to_string(),
                c.delta.to_string(),
                c.rate.to_string(),
                c.se.to_string(),
            ])?;
        }
        out.flush().map_err(|e| ProfitError::Csv(e.to_string()))?;
        Ok(())
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

fn tabulate(sim: &SimConfig, exp: &ExperimentConfig, outcomes: &[Vec<MethodOutcome>]) -> Vec<CellResult> {
    let mut cells = Vec::new();
    for (mi, &method) in exp.methods.iter().enumerate() {
        let col: Vec<&MethodOutcome> = outcomes.iter().map(|o| &o[mi]).collect();
        let failures = col.iter().filter(|o| o.result.is_err()).count();
        let secs: Vec<f64> = col.iter().map(|o| o.seconds).collect();
        for &alpha in &exp.alphas {
            let rejections = col.iter().filter(|o| o.rejects(alpha) == Some(true)).count();
            let ok = col.len() - failures;
            let rate = if alpha >= 1.0 {
                1.0
            } else if ok == 0 {
                f64::NAN
            } else {
                rejections as f64 / ok as f64
            };
            let se = if ok > 0 { (rate * (1.0 - rate) / ok as f64).sqrt() } else { f64::NAN };
            let reference = if sim.delta == 0.0 {
                reference::size(method, sim.n, sim.m_min, sim.m_max, alpha)
            } else {
                None
            };
            cells.push(CellResult {
                method,
                n: sim.n,
                m_min: sim.m_min,
                m_max: sim.m_max,
                delta: sim.delta,
                alpha,
                reps: col.len(),
                failures,
                rejections,
                rate,
                se,
                reference,
                median_seconds: median(&secs),
            });
        }
    }
    cells
}

fn run_cell(sim: &SimConfig, exp: &ExperimentConfig) -> Vec<CellResult> {
    let outcomes: Vec<Vec<MethodOutcome>> = (0..exp.reps)
        .into_par_iter()
        .map(|rep| run_replicate(sim, exp, rep))
        .collect();
    for (rep, o) in outcomes.iter().enumerate() {
        for m in o {
            if let Err(e) = &m.result {
                log::warn!("replicate {rep} n={} {}: {e}", sim.n, m.method.name());
            }
        }
    }
    tabulate(sim, exp, &outcomes)
}

fn check_experiment(exp: &ExperimentConfig) -> Result<()> {
    if exp.reps < 100 {
        return Err(ProfitError::Config("experiments need at least 100 replicates".into()));
    }
    if exp.alphas.iter().any(|a| !(*a > 0.0)) {
        return Err(ProfitError::Config("levels must be positive".into()));
    }
    Ok(())
}

/// Rejection rates under `δ = 0` for every cell, method and level.
pub fn run_size_experiment(cells: &[SimConfig], exp: &ExperimentConfig) -> Result<ExperimentResult> {
    check_experiment(exp)?;
    let mut out = Vec::new();
    for sim in cells {
        let sim = SimConfig {
            delta: 0.0,
            ..sim.clone()
        };
        sim.validate()?;
        out.extend(run_cell(&sim, exp));
    }
    Ok(ExperimentResult {
        kind: "size".into(),
        seed: exp.seed,
        reps: exp.reps,
        use_true_basis: exp.use_true_basis,
        cells: out,
        monotonicity: Vec::new(),
    })
}

/// Rejection rates over a δ grid (which must contain zero).
pub fn run_power_experiment(deltas: &[f64], cells: &[SimConfig], exp: &ExperimentConfig) -> Result<ExperimentResult> {
    check_experiment(exp)?;
    if !deltas.contains(&0.0) {
        return Err(ProfitError::Config("the delta grid must include 0".into()));
    }
    let mut grid = deltas.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut out = Vec::new();
    for sim in cells {
        for &delta in &grid {
            let s = SimConfig { delta, ..sim.clone() };
            s.validate()?;
            out.extend(run_cell(&s, exp));
        }
    }
    let mut monotonicity = Vec::new();
    for sim in cells {
        for &method in &exp.methods {
            for &alpha in &exp.alphas {
                let curve: Vec<&CellResult> = out
                    .iter()
                    .filter(|c| c.method == method && c.n == sim.n && c.m_min == sim.m_min && c.alpha == alpha)
                    .collect();
                let non_decreasing = curve.windows(2).all(|w| {
                    let se = (w[0].se.powi(2) + w[1].se.powi(2)).sqrt();
                    w[1].rate >= w[0].rate - 2.0 * se
                });
                monotonicity.push(Monotonicity {
                    method,
                    n: sim.n,
                    m_min: sim.m_min,
                    m_max: sim.m_max,
                    alpha,
                    non_decreasing,
                });
            }
        }
    }
    Ok(ExperimentResult {
        kind: "power".into(),
        seed: exp.seed,
        reps: exp.reps,
        use_true_basis: exp.use_true_basis,
        cells: out,
        monotonicity,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodTiming {
    pub method: Method,
    pub samples: Vec<f64>,
    pub median_seconds: f64,
    pub reference_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingResult {
    pub n: usize,
    pub m_min: usize,
    pub m_max: usize,
    pub reps: usize,
    pub threads: usize,
    pub arch: String,
    pub os: String,
    pub methods: Vec<MethodTiming>,
}

impl TimingResult {
    pub fn median(&self, method: Method) -> Option<f64> {
        self.methods.iter().find(|m| m.method == method).map(|m| m.median_seconds)
    }
}

/// Per-method wall clock per replicate: each method runs the full pipeline
/// (projection included) on the same datasets, one method at a time.
pub fn run_timing(sim: &SimConfig, methods: &[Method], reps: usize, exp: &ExperimentConfig) -> Result<TimingResult> {
    if reps < 5 && !methods.is_empty() {
        return Err(ProfitError::Config("timing needs at least 5 replicates".into()));
    }
    sim.validate()?;
    let mut timings: Vec<MethodTiming> = methods
        .iter()
        .map(|&method| MethodTiming {
            method,
            samples: Vec::with_capacity(reps),
            median_seconds: f64::NAN,
            reference_seconds: reference::seconds(method, sim.m_min, sim.m_max).filter(|_| sim.n == 200),
        })
        .collect();
    if !methods.is_empty() {
        for rep in 0..reps {
            let seed = replicate_seed(exp.seed, sim, rep);
            let s = SimConfig { seed, ..sim.clone() };
            let cfg = ProfitConfig {
                seed,
                ..exp.profit.clone()
            };
            let ds = generate(&s)?;
            for t in timings.iter_mut() {
                let start = Instant::now();
                let proj = projections(&ds, &s, &cfg, exp.use_true_basis)?;
                apply(t.method, &ds, &proj, &cfg, &exp.zc)?;
                t.samples.push(start.elapsed().as_secs_f64());
            }
        }
    }
    for t in timings.iter_mut() {
        t.median_seconds = median(&t.samples);
    }
    Ok(TimingResult {
        n: sim.n,
        m_min: sim.m_min,
        m_max: sim.m_max,
        reps,
        threads: rayon::current_num_threads(),
        arch: std::env::consts::ARCH.into(),
        os: std::env::consts::OS.into(),
        methods: timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn degenerate_generator_gives_the_mean() {
        let cfg = SimConfig {
            n: 5,
            score_var: [0.0; 4],
            visit_var: [0.0; 2],
            noise_var: 0.0,
            ..Default::default()
        };
        let ds = generate(&cfg).unwrap();
        for (_, _, y) in ds.curves() {
            for (g, v) in y.iter().enumerate() {
                assert_eq!(*v, (PI * ds.grid_s[g] / 2.0).cos());
            }
        }
    }

    #[test]
    fn deterministic_and_sorted() {
        let cfg = SimConfig { n: 20, seed: 9, ..Default::default() };
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        for s in &a.subjects {
            assert!((8..=12).contains(&s.times.len()));
            assert!(s.times.windows(2).all(|w| w[0] <= w[1]));
        }
        assert_ne!(a, generate(&SimConfig { seed: 10, ..cfg }).unwrap());
    }

    #[test]
    fn covariance_spectrum() {
        let cfg = SimConfig::default();
        assert_eq!(true_eigenvalues(&cfg), [8.0, 16.0 / 3.0]);
        let b = true_basis(&unit_grid(101), &cfg).unwrap();
        assert_eq!(b.k(), 2);
        let xi = true_marginal_cov(&unit_grid(5), &cfg);
        assert_abs_diff_eq!(xi[(1, 1)], 16.0, epsilon = 1e-12);
        assert_abs_diff_eq!(xi[(0, 0)], 32.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn references() {
        assert_eq!(reference::size(Method::Profit, 200, 8, 12, 0.05), Some(0.046));
        assert_eq!(reference::size(Method::Profit, 300, 8, 12, 0.15), Some(0.142));
        assert_eq!(reference::size(Method::ZcBt, 400, 8, 12, 0.05), Some(0.017));
        assert_eq!(reference::size(Method::ZcBt, 150, 8, 12, 0.05), None);
        assert_eq!(reference::seconds(Method::ZcBt, 8, 12), Some(24.412));
    }

    #[test]
    fn unit_level_always_rejects() {
        let o = MethodOutcome { method: Method::Profit, result: Ok((2, 0.9)), seconds: 0.0 };
        assert_eq!(o.rejects(1.0), Some(true));
        assert_eq!(o.rejects(0.05), Some(false));
        let f = MethodOutcome { method: Method::Profit, result: Err("x".into()), seconds: 0.0 };
        assert_eq!(f.rejects(0.05), None);
        assert_eq!(f.rejects(1.0), Some(true));
    }

    #[test]
    fn empty_timing() {
        let r = run_timing(&SimConfig::cell(10, 8, 12), &[], 0, &ExperimentConfig::default()).unwrap();
        assert!(r.methods.is_empty());
    }

    #[test]
    fn replicate_seed_ignores_delta() {
        let a = SimConfig::cell(100, 8, 12);
        let b = SimConfig { delta: 1.5, ..a.clone() };
        assert_eq!(replicate_seed(1, &a, 3), replicate_seed(1, &b, 3));
        assert_ne!(replicate_seed(1, &a, 3), replicate_seed(1, &a, 4));
    }
}
