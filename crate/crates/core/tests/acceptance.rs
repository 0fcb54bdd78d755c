//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `PROFIT_ACCEPTANCE_ONLY=id1,id2` restricts the run to the listed ids.

mod common;

use std::time::Instant;

use nalgebra::DMatrix;
use profit_core::competitors::ZcConfig;
use profit_core::data::{load_csv, IngestOptions, LongitudinalFunctionalDataset, SubjectRecord};
use profit_core::marginal::{
    eigen_basis, estimate_mean, quasi_project, raw_marginal_covariance, smooth_marginal_covariance,
    MeanConfig, WeightScheme,
};
use profit_core::plrt::{compute_spectrum, default_lambda_grid, plrt_statistic, simulate_null, NullSpectrum};
use profit_core::prewhiten::{assemble_blocks, fit_projected_cov, PrewhitenConfig};
use profit_core::profit::{project_dataset, run_profit, ProfitConfig};
use profit_core::simstudy::{
    generate, median, phi1, run_power_experiment, run_size_experiment, run_timing, true_marginal_cov,
    ExperimentConfig, ExperimentResult, Method, SimConfig,
};
use profit_core::smoothers::{local_linear_1d, local_linear_2d, KernelConfig, WeightedPoint2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const SEED: u64 = 20_240_611;
/// Seed of the chi-square goodness-of-fit draw.
const KS_SEED: u64 = 5;
/// Monte Carlo standard errors allowed around a reported rate.
const Z_SIZE: f64 = 3.0;
/// Standard errors a power curve may drop along δ.
const Z_MONOTONE: f64 = 2.0;

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn size_experiment(n: usize, m: (usize, usize), alphas: Vec<f64>, methods: Vec<Method>, reps: usize) -> ExperimentResult {
    let exp = ExperimentConfig {
        methods,
        reps,
        seed: SEED,
        alphas,
        profit: ProfitConfig::default(),
        zc: ZcConfig { fast_bootstrap: true, ..ZcConfig::default() },
        use_true_basis: false,
    };
    run_size_experiment(&[SimConfig::cell(n, m.0, m.1)], &exp).expect("size experiment")
}

fn size_single(id: &'static str, n: usize, m: (usize, usize), reference: f64) -> Outcome {
    let r = size_experiment(n, m, vec![0.05], vec![Method::Profit], 400);
    let c = &r.cells[0];
    let se = (reference * (1.0 - reference) / (c.reps - c.failures) as f64).sqrt();
    Outcome {
        id,
        pass: c.within(reference, Z_SIZE) && c.failures == 0,
        detail: format!(
            "n={n} m={}..{} alpha=0.05 reps={}: rate {:.4} (target {reference} +/- {:.4}), failures {}",
            m.0,
            m.1,
            c.reps,
            c.rate,
            Z_SIZE * se,
            c.failures
        ),
    }
}

fn level_sweep() -> Outcome {
    let refs = [(0.01, 0.009), (0.05, 0.047), (0.10, 0.096), (0.15, 0.142)];
    let r = size_experiment(300, (8, 12), refs.iter().map(|x| x.0).collect(), vec![Method::Profit], 400);
    let mut pass = true;
    let mut parts = Vec::new();
    for (alpha, reference) in refs {
        let c = r.find(Method::Profit, 300, 8, 0.0, alpha).unwrap();
        let ok = c.within(reference, Z_SIZE) && c.failures == 0;
        pass &= ok;
        parts.push(format!("a={alpha}: {:.4} vs {reference}", c.rate));
    }
    Outcome { id: "level_sweep_n300", pass, detail: format!("400 reps, {}", parts.join("; ")) }
}

fn power() -> Outcome {
    let exp = ExperimentConfig {
        methods: Method::ALL.to_vec(),
        reps: 300,
        seed: SEED,
        alphas: vec![0.05],
        profit: ProfitConfig::default(),
        zc: ZcConfig { fast_bootstrap: true, ..ZcConfig::default() },
        use_true_basis: false,
    };
    let deltas = [0.0, 0.5, 1.0, 1.5];
    let cells = [SimConfig::cell(100, 8, 12), SimConfig::cell(300, 8, 12)];
    let r = run_power_experiment(&deltas, &cells, &exp).expect("power experiment");
    let rate = |m: Method, n: usize, d: f64| r.find(m, n, 8, d, 0.05).unwrap();
    let mut pass = true;
    let mut notes = Vec::new();
    for n in [100, 300] {
        let curve: Vec<String> = deltas.iter().map(|&d| format!("{:.3}", rate(Method::Profit, n, d).rate)).collect();
        notes.push(format!("PROFIT n={n} [{}]", curve.join(", ")));
        for w in deltas.windows(2) {
            let (a, b) = (rate(Method::Profit, n, w[0]), rate(Method::Profit, n, w[1]));
            if b.rate < a.rate - Z_MONOTONE * (a.se.powi(2) + b.se.powi(2)).sqrt() {
                pass = false;
                notes.push(format!("drop at n={n} delta {}->{}", w[0], w[1]));
            }
        }
        for &d in &deltas[1..] {
            let p = rate(Method::Profit, n, d).rate;
            for m in [Method::ZcMc, Method::ZcBt] {
                let q = rate(m, n, d).rate;
                if p <= q {
                    pass = false;
                    notes.push(format!("{} {q:.3} >= PROFIT {p:.3} at n={n} delta={d}", m.name()));
                }
            }
        }
    }
    for &d in &deltas[1..] {
        let (a, b) = (rate(Method::Profit, 100, d).rate, rate(Method::Profit, 300, d).rate);
        if b <= a {
            pass = false;
            notes.push(format!("no gain from n=100 to 300 at delta={d}: {a:.3} vs {b:.3}"));
        }
    }
    for m in [Method::ZcMc, Method::ZcBt] {
        let curve: Vec<String> = deltas.iter().map(|&d| format!("{:.3}", rate(m, 300, d).rate)).collect();
        notes.push(format!("{} n=300 [{}]", m.name(), curve.join(", ")));
    }
    let failures: usize = r.cells.iter().map(|c| c.failures).sum();
    notes.push(format!("failures {failures}"));
    Outcome { id: "power_monotonicity", pass, detail: format!("300 reps/cell, deltas {deltas:?}: {}", notes.join("; ")) }
}

fn zc_bt_size() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for n in [200, 400] {
        let r = size_experiment(n, (8, 12), vec![0.05], vec![Method::ZcBt], 400);
        let c = &r.cells[0];
        pass &= c.rate < 0.05;
        parts.push(format!("n={n}: {:.4} (se {:.4}, failures {})", c.rate, c.se, c.failures));
    }
    Outcome { id: "zc_bt_size", pass, detail: format!("ZC-BT alpha=0.05, 400 reps, rate < 0.05: {}", parts.join("; ")) }
}

fn smoothed_covariance(ds: &LongitudinalFunctionalDataset) -> profit_core::marginal::MarginalCovariance {
    let mean = estimate_mean(ds, &MeanConfig::default(), &[]).unwrap();
    let raw = raw_marginal_covariance(ds, &mean, WeightScheme::Pooled).unwrap();
    smooth_marginal_covariance(&raw, &KernelConfig::default()).unwrap()
}

fn fpca_oracle() -> Outcome {
    let mut e1 = Vec::new();
    let mut e2 = Vec::new();
    let mut sup = Vec::new();
    for seed in 0..20 {
        let ds = generate(&SimConfig { n: 300, m_min: 15, m_max: 20, seed: SEED + seed, ..Default::default() }).unwrap();
        let b = eigen_basis(&smoothed_covariance(&ds), 0.9).unwrap();
        e1.push((b.eigenvalues[0] - 8.0).abs() / 8.0);
        e2.push(b.eigenvalues.get(1).map_or(1.0, |l| (l - 16.0 / 3.0).abs() / (16.0 / 3.0)));
        let f = b.function(0);
        let truth: Vec<f64> = ds.grid_s.iter().map(|&s| phi1(s)).collect();
        let sign = if f.iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
        sup.push(f.iter().zip(&truth).map(|(a, b)| (sign * a - b).abs()).fold(0.0, f64::max));
    }
    let (m1, m2, ms) = (median(&e1), median(&e2), median(&sup));
    Outcome {
        id: "fpca_oracle",
        pass: m1 <= 0.10 && m2 <= 0.15 && ms <= 0.25,
        detail: format!(
            "n=300 m=15..20, 20 seeds: median rel err lambda1 {m1:.4} (<= 0.10), lambda2 {m2:.4} (<= 0.15), sup|phi1 err| {ms:.4} (<= 0.25)"
        ),
    }
}

fn covariance_rate() -> Outcome {
    let mut meds = Vec::new();
    for n in [50, 100, 200] {
        let errs: Vec<f64> = (0..20)
            .map(|rep| {
                let ds = generate(&SimConfig { n, m_min: 15, m_max: 20, seed: SEED + 100 + rep, ..Default::default() }).unwrap();
                let sm = smoothed_covariance(&ds).smoothed.unwrap();
                let truth = true_marginal_cov(&ds.grid_s, &SimConfig::default());
                (sm - truth).amax()
            })
            .collect();
        meds.push(median(&errs));
    }
    Outcome {
        id: "covariance_rate",
        pass: meds.windows(2).all(|w| w[1] <= w[0]),
        detail: format!(
            "median sup|Xi_hat - Xi| over 20 reps, m=15..20: n=50 {:.3}, n=100 {:.3}, n=200 {:.3} (non-increasing)",
            meds[0], meds[1], meds[2]
        ),
    }
}

fn null_distribution() -> Outcome {
    let chi = ChiSquared::new(1.0).unwrap();
    let fixed = NullSpectrum { xi: vec![], zeta: vec![], p_tested: 1 };
    let ks_at = |seed: u64| common::ks_distance(simulate_null(&fixed, 10_000, &[0.0], seed).unwrap(), |x| chi.cdf(x));
    let ks = ks_at(KS_SEED);
    let exceed = (0..200).filter(|&s| ks_at(SEED + s) >= 0.015).count();
    let spec = NullSpectrum { xi: vec![1.0], zeta: vec![1.0], p_tested: 0 };
    let b = simulate_null(&spec, 100_000, &default_lambda_grid(&spec.xi), SEED).unwrap();
    let zero = b.iter().filter(|&&d| d <= 1e-12).count() as f64 / b.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let wm = common::random_model(&mut rng);
        let s = compute_spectrum(&wm).unwrap();
        let grid = default_lambda_grid(&s.xi);
        let fast = plrt_statistic(&wm, &s, &grid).unwrap().statistic;
        let dense = common::dense_statistic(&wm, &grid);
        worst = worst.max((fast - dense).abs() / dense.abs().max(1.0));
    }
    Outcome {
        id: "null_distribution",
        pass: ks < 0.015 && (zero - 0.68269).abs() < 0.01 && worst <= 1e-6,
        detail: format!(
            "KS to chi2_1 {ks:.4} (< 0.015; {exceed}/200 other seeds reach 0.015); zero mass {zero:.4} (0.68269 +/- 0.01); max spectral-vs-dense gap {worst:.2e} (<= 1e-6) on 50 instances"
        ),
    }
}

fn identities() -> Outcome {
    let ds = generate(&SimConfig { n: 100, seed: SEED, ..Default::default() }).unwrap();
    let cfg = ProfitConfig::default();
    let proj = project_dataset(&ds, &cfg).unwrap();
    let mut whitening: f64 = 0.0;
    let mut n_blocks = 0;
    for ps in &proj.series {
        let model = fit_projected_cov(ps, &PrewhitenConfig::default()).unwrap();
        let bc = assemble_blocks(ps, &model).unwrap();
        for (s, w) in bc.blocks.iter().zip(&bc.inv_sqrt) {
            let m = s.nrows();
            whitening = whitening.max((w * s * w - DMatrix::<f64>::identity(m, m)).amax());
            n_blocks += 1;
        }
    }

    let x: Vec<f64> = (0..60).map(|i| (i as f64 * 0.618_034).fract()).collect();
    let y: Vec<f64> = x.iter().map(|v| 2.5 - 1.7 * v).collect();
    let eval = [0.05, 0.3, 0.77, 0.95];
    let f1 = local_linear_1d(&x, &y, &vec![1.0; 60], &eval, &KernelConfig::fixed(0.2)).unwrap();
    let mut affine: f64 = f1.values.iter().zip(eval).map(|(v, e)| (v - (2.5 - 1.7 * e)).abs()).fold(0.0, f64::max);
    let pts: Vec<WeightedPoint2> = (0..200)
        .map(|i| {
            let (a, b) = ((i as f64 * 0.618_034).fract(), (i as f64 * 0.414_214 + 0.3).fract());
            WeightedPoint2::new(a, b, 1.0 + 2.0 * a - 3.0 * b, 1.0)
        })
        .collect();
    let e2 = [(0.2, 0.3), (0.5, 0.5), (0.9, 0.1)];
    let f2 = local_linear_2d(&pts, &e2, &KernelConfig::fixed(0.3)).unwrap();
    for (v, (a, b)) in f2.values.iter().zip(e2) {
        affine = affine.max((v - (1.0 + 2.0 * a - 3.0 * b)).abs());
    }

    let k = proj.basis.k();
    let gram = &proj.basis.eigenfunctions * proj.basis.eigenfunctions.transpose() / ds.grid_len() as f64;
    let ortho = (gram - DMatrix::<f64>::identity(k, k)).amax();

    let scaled = |c: f64, off: f64| {
        let subjects: Vec<SubjectRecord> = ds
            .subjects
            .iter()
            .map(|s| {
                let curves = s.curves.iter().map(|cv| cv.iter().map(|v| c * v + off).collect()).collect();
                SubjectRecord::new(s.id.clone(), s.times.clone(), curves)
            })
            .collect();
        LongitudinalFunctionalDataset::new(ds.grid_s.clone(), subjects).unwrap()
    };
    let (d2, d3) = (scaled(-2.0, 0.0), scaled(0.0, 1.5));
    let mut linear: f64 = 0.0;
    for kk in 0..k {
        let p1 = quasi_project(&ds, &proj.basis, kk, &[]).unwrap().pooled_values();
        let p2 = quasi_project(&d2, &proj.basis, kk, &[]).unwrap().pooled_values();
        let p3 = quasi_project(&d3, &proj.basis, kk, &[]).unwrap().pooled_values();
        let c = quasi_project(&scaled(-2.0, 1.5), &proj.basis, kk, &[]).unwrap().pooled_values();
        for i in 0..c.len() {
            linear = linear.max((p2[i] + p3[i] - c[i]).abs() / (1.0 + p1[i].abs()));
        }
    }
    Outcome {
        id: "identities",
        pass: whitening <= 1e-8 && affine <= 1e-9 && ortho <= 1e-6 && linear <= 1e-12,
        detail: format!(
            "max |S Sigma S - I| {whitening:.1e} over {n_blocks} blocks (<= 1e-8); affine error {affine:.1e} (<= 1e-9); orthonormality {ortho:.1e} (<= 1e-6); projection linearity {linear:.1e} (<= 1e-12)"
        ),
    }
}

fn timing() -> Outcome {
    let sim = SimConfig::cell(200, 8, 12);
    let exp = ExperimentConfig { seed: SEED, ..ExperimentConfig::default() };
    let r = run_timing(&sim, &Method::ALL, 5, &exp).unwrap();
    let (p, mc, bt) = (
        r.median(Method::Profit).unwrap(),
        r.median(Method::ZcMc).unwrap(),
        r.median(Method::ZcBt).unwrap(),
    );
    let fast = ExperimentConfig { zc: ZcConfig { fast_bootstrap: true, ..ZcConfig::default() }, ..exp.clone() };
    let bt_fast = run_timing(&sim, &[Method::ZcBt], 5, &fast).unwrap().median(Method::ZcBt).unwrap();
    Outcome {
        id: "timing_order",
        pass: mc < p && p < bt,
        detail: format!(
            "n=200 m=8..12, median of 5 on {} thread(s): ZC-MC {mc:.3}s < PROFIT {p:.3}s < ZC-BT {bt:.3}s (ZC-BT from summed normal equations: {bt_fast:.3}s)",
            r.threads
        ),
    }
}

fn determinism() -> Outcome {
    let ds = generate(&SimConfig { n: 80, seed: SEED, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    ds.save_csv(&path).unwrap();
    let cfg = ProfitConfig { seed: 7, ..Default::default() };
    let report = || {
        let d = load_csv(&path, &IngestOptions::default()).unwrap();
        run_profit(&d, &cfg).unwrap().to_json().unwrap()
    };
    let (a, b) = (report(), report());
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let c = pool.install(report);
    Outcome {
        id: "determinism",
        pass: a == b && a == c,
        detail: format!("two runs from the same file and seed, plus a 3-thread run: {} bytes, identical: {}", a.len(), a == b && a == c),
    }
}

fn main() {
    let only: Option<Vec<String>> = std::env::var("PROFIT_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("size_n200", Box::new(|| size_single("size_n200", 200, (8, 12), 0.046))),
        ("size_n100_dense", Box::new(|| size_single("size_n100_dense", 100, (15, 20), 0.052))),
        ("level_sweep_n300", Box::new(level_sweep)),
        ("power_monotonicity", Box::new(power)),
        ("zc_bt_size", Box::new(zc_bt_size)),
        ("fpca_oracle", Box::new(fpca_oracle)),
        ("covariance_rate", Box::new(covariance_rate)),
        ("null_distribution", Box::new(null_distribution)),
        ("identities", Box::new(identities)),
        ("timing_order", Box::new(timing)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (id, run) in &criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == id)) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        ran += 1;
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {}: {} [{:.0}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.id,
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
