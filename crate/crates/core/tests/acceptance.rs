//! Scaled-down acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p nfra-core --test acceptance -- <filter>` runs the criteria whose name
//! contains `filter`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::Matrix5;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nfra_core::channel::norm;
use nfra_core::fim::{fim, peb, DerivativeMethod, StateParams};
use nfra_core::harmonics::{gram_matrix, BasisSet, SphereQuadrature};
use nfra_core::precoder::{
    build_codebook, solve_allocation, AllocationOptions, AllocationProblem, Codebook,
};
use nfra_core::sim::{
    run_sweep, to_csv, to_json, Design, ExperimentConfig, Method, SweepKind, UeMode,
};
use nfra_core::{ArrayModel, Position};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Check = fn() -> Outcome;

const TABLE_UE: Position = Position::new(10.35, 1.67, 0.0);

/// 16x16 array, half-wavelength spacing, Q = 9, L = 8 candidates, N_u = 27 samples.
fn scenario() -> ExperimentConfig {
    ExperimentConfig::parse("sample_lattice = 3\nseed = 2024").unwrap()
}

fn ra_design() -> &'static Design {
    static DESIGN: OnceLock<Design> = OnceLock::new();
    DESIGN.get_or_init(|| {
        let cfg = scenario();
        Design::build(&cfg, Method::RaOptimal, cfg.num_bases).unwrap()
    })
}

fn bound_trace(
    model: &ArrayModel,
    cb: &Codebook,
    weights: &[f64],
    p: Position,
    power: f64,
    noise: f64,
    method: DerivativeMethod,
) -> f64 {
    let state = StateParams::los(model, p, 0.0).unwrap();
    let j = fim(model, weights, &cb.vectors(), &state, power, noise, method).unwrap();
    peb(&j).unwrap().trace
}

fn orthonormality() -> Outcome {
    let basis = BasisSet::new(20).unwrap();
    let g = gram_matrix(&basis, &SphereQuadrature::for_degree(basis.max_degree())).unwrap();
    let n = basis.len();
    let mut worst = 0.0f64;
    for r in 0..n {
        for c in 0..n {
            let target = if r == c { 1.0 } else { 0.0 };
            worst = worst.max((g[(r, c)] - Complex64::new(target, 0.0)).norm());
        }
    }
    Outcome::new(
        worst < 1e-6,
        format!("Q = 20, max |G - I| = {worst:.2e} (< 1e-6)"),
    )
}

/// Brute-force FIM from fourth-order central differences of the noiseless pilots in all
/// five parameters `(x, y, z, |beta|, phase)`.
fn brute_force_fim(
    model: &ArrayModel,
    cb: &Codebook,
    p: Position,
    power: f64,
    noise: f64,
) -> Matrix5<f64> {
    let magnitude = model.los_gain(&p, 0.0).unwrap().magnitude;
    let eta0 = [p.x, p.y, p.z, magnitude, 0.3];
    let pilots = |eta: &[f64; 5]| -> Vec<Complex64> {
        let d = model
            .effective_arv(&Position::new(eta[0], eta[1], eta[2]))
            .unwrap();
        let beta = Complex64::from_polar(eta[3], eta[4]);
        (0..cb.len())
            .map(|t| power.sqrt() * beta * d.dot(&cb.weighted_codeword(t)))
            .collect()
    };
    let steps = [1e-3, 1e-3, 1e-3, 1e-3 * magnitude, 1e-3];
    let derivs: Vec<Vec<Complex64>> = (0..5)
        .map(|i| {
            let at = |k: f64| {
                let mut eta = eta0;
                eta[i] += k * steps[i];
                pilots(&eta)
            };
            let (p1, m1, p2, m2) = (at(1.0), at(-1.0), at(2.0), at(-2.0));
            (0..cb.len())
                .map(|t| (8.0 * (p1[t] - m1[t]) - (p2[t] - m2[t])) / (12.0 * steps[i]))
                .collect()
        })
        .collect();
    Matrix5::from_fn(|i, j| {
        2.0 / noise
            * derivs[i]
                .iter()
                .zip(&derivs[j])
                .map(|(a, b)| (a.conj() * b).re)
                .sum::<f64>()
    })
}

fn fim_oracle() -> Outcome {
    let cfg = scenario();
    let design = ra_design();
    let noise = cfg.scenario.noise_variance();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut points = vec![TABLE_UE];
    points.extend((0..4).map(|_| cfg.region().sample(&mut rng)));
    let methods = [
        DerivativeMethod::default_for(design.model.wavelength),
        DerivativeMethod::Analytic,
    ];
    let mut worst = [0.0f64; 2];
    for p in points {
        let magnitude = design.model.los_gain(&p, 0.0).unwrap().magnitude;
        let power = cfg.scenario.power_for_snr(20.0, magnitude);
        let brute = brute_force_fim(&design.model, &design.codebook, p, power, noise);
        for (k, method) in methods.iter().enumerate() {
            let state = StateParams::los(&design.model, p, 0.3).unwrap();
            let j = fim(
                &design.model,
                design.codebook.weights(),
                &design.codebook.vectors(),
                &state,
                power,
                noise,
                *method,
            )
            .unwrap()
            .0;
            for r in 0..5 {
                for c in 0..5 {
                    let scale = (brute[(r, r)] * brute[(c, c)]).sqrt();
                    worst[k] = worst[k].max((j[(r, c)] - brute[(r, c)]).abs() / scale);
                }
            }
        }
    }
    Outcome::new(
        worst.iter().all(|w| *w < 1e-4),
        format!(
            "5 points, max relative error finite-difference {:.2e}, analytic {:.2e} (< 1e-4)",
            worst[0], worst[1]
        ),
    )
}

fn factorization_round_trip() -> Outcome {
    let cb = &ra_design().codebook;
    let mut worst_w = 0.0f64;
    let mut worst_e = 0.0f64;
    for (t, fac) in cb.factorizations().unwrap().iter().enumerate() {
        let target = cb.weighted_codeword(t);
        let got = fac.compose();
        let err = got
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        let scale = norm(&target);
        if scale > 0.0 {
            worst_w = worst_w.max(err / scale);
        }
        for e in fac.em.weights() {
            worst_e = worst_e.max((norm(e) - 1.0).abs());
        }
    }
    Outcome::new(
        worst_w <= 1e-12 && worst_e <= 1e-12,
        format!(
            "{} codewords, max relative reconstruction error {worst_w:.2e}, max | ||e_m|| - 1 | {worst_e:.2e} (<= 1e-12)",
            cb.len()
        ),
    )
}

fn convexity() -> Outcome {
    let cfg = scenario();
    let design = ra_design();
    let noise = cfg.scenario.noise_variance();
    let n = design.codebook.len();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let simplex = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        // sparse draws make some aggregates nearly singular, the demanding case
        let v: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random_bool(0.3) {
                    0.0
                } else {
                    rng.random_range(0.0..1.0)
                }
            })
            .collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    };
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..100 {
        let p = cfg.region().sample(&mut rng);
        let magnitude = design.model.los_gain(&p, 0.0).unwrap().magnitude;
        let power = cfg.scenario.power_for_snr(30.0, magnitude);
        let (w1, w2) = (simplex(&mut rng), simplex(&mut rng));
        let alpha: f64 = rng.random_range(0.0..1.0);
        let mix: Vec<f64> = w1
            .iter()
            .zip(&w2)
            .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
            .collect();
        let trace = |w: &[f64]| {
            bound_trace(
                &design.model,
                &design.codebook,
                w,
                p,
                power,
                noise,
                DerivativeMethod::Analytic,
            )
        };
        let lhs = trace(&mix);
        let rhs = alpha * trace(&w1) + (1.0 - alpha) * trace(&w2);
        worst = worst.max(lhs - rhs);
    }
    Outcome::new(
        worst <= 1e-9,
        format!("100 combinations, max PEB(mix) - mix of PEBs = {worst:.2e} (<= 1e-9)"),
    )
}

fn allocation_oracle() -> Outcome {
    let cfg = scenario();
    let model = &ra_design().model;
    let region = cfg.region();
    let cb = build_codebook(model, &region, [1, 1, 1], None, DerivativeMethod::Analytic).unwrap();
    let sample_sets = [
        vec![TABLE_UE],
        vec![
            TABLE_UE,
            Position::new(12.5, -2.0, 3.0),
            Position::new(13.5, 2.5, 1.0),
        ],
    ];
    let mut pass = cb.len() == 4;
    let mut details = Vec::new();
    for samples in sample_sets {
        let problem = AllocationProblem::new(
            model,
            &cb,
            &samples,
            &cfg.scenario,
            DerivativeMethod::Analytic,
        )
        .unwrap();
        let sol = solve_allocation(&problem, &AllocationOptions::default()).unwrap();
        let steps = 50;
        let mut grid_best = f64::INFINITY;
        for a in 0..=steps {
            for b in 0..=steps - a {
                for c in 0..=steps - a - b {
                    let d = steps - a - b - c;
                    let w = [a, b, c, d].map(|k| k as f64 / steps as f64);
                    if let Ok(v) = problem.max_peb(&w) {
                        grid_best = grid_best.min(v);
                    }
                }
            }
        }
        let ok = sol.max_peb <= 1.01 * grid_best && sol.max_peb <= sol.uniform_max_peb;
        pass &= ok;
        details.push(format!(
            "N_u = {}: solver/grid = {:.5}, solver/uniform = {:.4}",
            samples.len(),
            sol.max_peb / grid_best,
            sol.max_peb / sol.uniform_max_peb
        ));
    }
    Outcome::new(
        pass,
        format!("N_t = 4; {} (<= 1.01, <= 1)", details.join("; ")),
    )
}

fn q_sweep() -> Outcome {
    let cfg = scenario();
    let qs = [1usize, 4, 9, 16, 20];
    let values: Vec<f64> = qs
        .iter()
        .map(|&q| {
            Design::build(&cfg, Method::RaOptimal, q)
                .unwrap()
                .allocation
                .max_peb
        })
        .collect();
    let conventional = Design::build(&cfg, Method::Conventional, 1)
        .unwrap()
        .allocation
        .max_peb;
    let monotone = values.windows(2).all(|w| w[1] <= w[0]);
    let coincide = (values[0] - conventional).abs() <= 1e-10 * conventional;
    let listed: Vec<String> = qs
        .iter()
        .zip(&values)
        .map(|(q, v)| format!("Q={q}: {:.4e}", v.sqrt()))
        .collect();
    Outcome::new(
        monotone && coincide,
        format!(
            "max PEB [m] {}; Q=1 vs conventional relative gap {:.1e}",
            listed.join(", "),
            (values[0] - conventional).abs() / conventional
        ),
    )
}

fn method_ordering() -> Outcome {
    let cfg = scenario();
    let designs: Vec<Design> = Method::ALL
        .iter()
        .map(|&m| Design::build(&cfg, m, cfg.bases_for(m, 0.0)).unwrap())
        .collect();
    let magnitude = designs[0].model.los_gain(&TABLE_UE, 0.0).unwrap().magnitude;
    let mut pass = true;
    let mut strict_at_top = false;
    let mut rows = Vec::new();
    for (i, &snr) in cfg.sweep_values.iter().enumerate() {
        let power = cfg.scenario.power_for_snr(snr, magnitude);
        let pebs: Vec<f64> = designs
            .iter()
            .map(|d| d.peb_trace(&cfg, &TABLE_UE, 0.0, power).unwrap().sqrt())
            .collect();
        pass &= pebs[0] <= pebs[1] && pebs[0] <= pebs[2];
        if i + 1 == cfg.sweep_values.len() {
            strict_at_top = pebs[0] < pebs[1] && pebs[0] < pebs[2];
        }
        rows.push(format!(
            "{snr} dB: {:.3e}/{:.3e}/{:.3e}",
            pebs[0], pebs[1], pebs[2]
        ));
    }
    // context only: the same comparison averaged over random UEs at the highest SNR
    let snr = *cfg.sweep_values.last().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let ues: Vec<Position> = (0..200).map(|_| cfg.region().sample(&mut rng)).collect();
    let averaged: Vec<String> = designs
        .iter()
        .map(|d| {
            let mean = ues
                .iter()
                .map(|ue| {
                    let m = d.model.los_gain(ue, 0.0).unwrap().magnitude;
                    let power = cfg.scenario.power_for_snr(snr, m);
                    d.peb_trace(&cfg, ue, 0.0, power).unwrap()
                })
                .sum::<f64>()
                / ues.len() as f64;
            format!("{:.3e}", mean.sqrt())
        })
        .collect();
    Outcome::new(
        pass && strict_at_top,
        format!(
            "PEB [m] at the Table UE, ra-optimal/ra-directional/conventional {}; \
             averaged over 200 random UEs at {snr} dB: {}",
            rows.join(", "),
            averaged.join("/")
        ),
    )
}

fn efficiency() -> Outcome {
    let mut cfg = scenario();
    let design = ra_design();
    let magnitude = design.model.los_gain(&TABLE_UE, 0.0).unwrap().magnitude;
    let p0 = design
        .peb_trace(
            &cfg,
            &TABLE_UE,
            0.0,
            cfg.scenario.power_for_snr(0.0, magnitude),
        )
        .unwrap()
        .sqrt();
    let snr = 20.0 * (p0 / 0.05).log10();
    cfg.methods = vec![Method::RaOptimal];
    cfg.sweep = SweepKind::SnrDb;
    cfg.sweep_values = vec![snr];
    cfg.trials = 200;
    cfg.stages = true;
    let out = run_sweep(&cfg).unwrap();
    let refined = &out.points[0];
    let coarse = out
        .points
        .iter()
        .find(|p| p.method == "ra-optimal/coarse")
        .unwrap();
    let ratio = refined.rmse_m / refined.peb_m;
    let step = cfg.localizer.coarse_step.x;
    Outcome::new(
        (1.0 / 1.5..=1.5).contains(&ratio) && coarse.rmse_m > 0.25 * step && refined.failures == 0,
        format!(
            "SNR {snr:.1} dB, {} trials: RMSE {:.4} m, PEB {:.4} m, ratio {ratio:.3} (1/1.5..1.5); coarse RMSE {:.3} m (> {:.2} m)",
            refined.trials, refined.rmse_m, refined.peb_m, coarse.rmse_m, 0.25 * step
        ),
    )
}

fn noiseless_exactness() -> Outcome {
    let mut cfg = scenario();
    cfg.methods = vec![Method::RaOptimal];
    cfg.ue_mode = UeMode::Random;
    cfg.sweep = SweepKind::SnrDb;
    cfg.sweep_values = vec![f64::INFINITY];
    cfg.trials = 50;
    let out = run_sweep(&cfg).unwrap();
    let failures = out.trials.iter().filter(|t| t.failed()).count();
    let worst = out
        .trials
        .iter()
        .map(|t| t.squared_error.sqrt())
        .fold(
            0.0f64,
            |a, b| if b.is_nan() { f64::INFINITY } else { a.max(b) },
        );
    Outcome::new(
        failures == 0 && worst < 1e-3,
        format!("50 random UEs, max error {worst:.2e} m (< 1e-3), {failures} failures"),
    )
}

fn interference_trend() -> Outcome {
    let mut cfg = scenario();
    cfg.methods = vec![Method::RaOptimal];
    cfg.sweep = SweepKind::LmrDb;
    cfg.sweep_values = vec![0.0, 5.0, 10.0, 15.0];
    cfg.snr_db = Some(15.0);
    cfg.num_scatterers = 10;
    cfg.trials = 200;
    let out = run_sweep(&cfg).unwrap();
    let rmse: Vec<f64> = out.points.iter().map(|p| p.rmse_m).collect();
    let last = out.points.last().unwrap();
    let ratio = last.rmse_m / last.peb_m;
    let near_bound = (0.5..=2.0).contains(&ratio);
    let inversions: Vec<f64> = rmse
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| w[1] / w[0] - 1.0)
        .collect();
    let trend = inversions.len() <= 1 && inversions.iter().all(|r| *r <= 0.10);
    let listed: Vec<String> = out
        .points
        .iter()
        .map(|p| format!("{} dB: {:.3}", p.sweep_value, p.rmse_m))
        .collect();
    Outcome::new(
        near_bound && trend,
        format!(
            "RMSE [m] {}; at 15 dB RMSE/PEB = {ratio:.3} with PEB {:.3} m (0.5..2: {}); trend: {} inversion(s) {:?} ({})",
            listed.join(", "),
            last.peb_m,
            if near_bound { "ok" } else { "violated" },
            inversions.len(),
            inversions.iter().map(|r| format!("{:.1}%", 100.0 * r)).collect::<Vec<_>>(),
            if trend { "ok" } else { "violated" }
        ),
    )
}

fn determinism() -> Outcome {
    let cfg = ExperimentConfig::parse(
        "array_rows = 6\narray_cols = 6\nnum_bases = 4\nsample_lattice = 2\n\
         sweep_values = 0, 20\ntrials = 6\nseed = 7\nstages = true",
    )
    .unwrap();
    let render = |threads: Option<usize>| -> (String, String) {
        let run = || {
            let out = run_sweep(&cfg).unwrap();
            (to_csv(&out.points), to_json(&out.points).unwrap())
        };
        match threads {
            None => run(),
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .unwrap()
                .install(run),
        }
    };
    let base = render(None);
    let again = render(None);
    let one = render(Some(1));
    let four = render(Some(4));
    let pass = base == again && base == one && base == four;
    Outcome::new(
        pass,
        format!(
            "CSV/JSON byte-identical across 2 runs and 1/4 threads: {}",
            if pass { "yes" } else { "no" }
        ),
    )
}

fn main() {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let criteria: [(&str, Check); 11] = [
        ("orthonormality", orthonormality),
        ("fim-oracle", fim_oracle),
        ("factorization-round-trip", factorization_round_trip),
        ("peb-convexity", convexity),
        ("allocation-oracle", allocation_oracle),
        ("q-sweep", q_sweep),
        ("method-ordering", method_ordering),
        ("estimator-efficiency", efficiency),
        ("noiseless-exactness", noiseless_exactness),
        ("interference-trend", interference_trend),
        ("determinism", determinism),
    ];
    let (mut passed, mut failed) = (0, 0);
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|_| Outcome::new(false, "panicked"));
        let secs = start.elapsed().as_secs_f64();
        let tag = if outcome.pass { "PASS" } else { "FAIL" };
        println!("{tag} {name}: {} [{secs:.1} s]", outcome.detail);
        if outcome.pass {
            passed += 1;
        } else {
            failed += 1;
        }
    }
    println!("acceptance: {passed} passed, {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
