//! Monte-Carlo sweeps: design each method's codebook, synthesize pilots, localize, and
//! aggregate RMSE against the position error bound.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method, SweepKind, UeMode};
use crate::channel::{
    calibrate_lmr, complex_gaussian, random_phase, ArrayModel, MultipathScene, Scatterer,
};
use crate::error::{Error, Result};
use crate::fim::{fim, peb, StateParams};
use crate::geometry::{build_upa, Position};
use crate::harmonics::BasisSet;
use crate::localizer::{Localizer, Stage, TwoStageEstimate};
use crate::precoder::{
    allocate_power, baseline_conventional, baseline_directional, build_codebook, Codebook,
    PowerAllocation,
};

/// A power-allocated codebook for one method, with its localizer.
#[derive(Debug)]
pub struct Design {
    pub method: Method,
    pub model: ArrayModel,
    pub codebook: Codebook,
    pub allocation: PowerAllocation,
    pub localizer: Localizer,
}

impl Design {
    /// Builds and power-allocates the codebook of `method` with `q` basis functions
    /// (ignored by the conventional array, which always uses one).
    pub fn build(cfg: &ExperimentConfig, method: Method, q: usize) -> Result<Self> {
        let scenario = &cfg.scenario;
        let region = cfg.region();
        let layout = build_upa(
            cfg.bs_position,
            cfg.array_rows,
            cfg.array_cols,
            cfg.spacing(),
        )?;
        let model = ArrayModel::new(layout, BasisSet::new(q)?, scenario.wavelength())?;
        let samples = region.lattice_inclusive(cfg.sample_lattice)?;
        let deriv = cfg.derivative_method();
        let (model, codebook, allocation) = match method {
            Method::RaOptimal => {
                let full = build_codebook(&model, &region, cfg.candidate_lattice, None, deriv)?;
                let (cb, alloc) = allocate_power(&model, &full, &samples, scenario, deriv)?;
                (model, cb, alloc)
            }
            Method::RaDirectional => {
                let full = build_codebook(&model, &region, cfg.candidate_lattice, None, deriv)?;
                let (cb, alloc) = baseline_directional(&model, &full, &samples, scenario, deriv)?;
                (model, cb, alloc)
            }
            Method::Conventional => baseline_conventional(
                &model,
                &region,
                cfg.candidate_lattice,
                &samples,
                scenario,
                deriv,
            )?,
        };
        let localizer = Localizer::new(model.clone(), &codebook, region, cfg.localizer)?;
        Ok(Self {
            method,
            model,
            codebook,
            allocation,
            localizer,
        })
    }

    /// Position error bound (trace, m^2) at `ue` for transmit power `power`.
    pub fn peb_trace(
        &self,
        cfg: &ExperimentConfig,
        ue: &Position,
        los_phase: f64,
        power: f64,
    ) -> Result<f64> {
        let state = StateParams::los(&self.model, *ue, los_phase)?;
        let j = fim(
            &self.model,
            self.codebook.weights(),
            &self.codebook.vectors(),
            &state,
            power,
            cfg.scenario.noise_variance(),
            cfg.derivative_method(),
        )?;
        peb(&j).map(|p| p.trace)
    }
}

/// Outcome of one Monte-Carlo trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub method: Method,
    pub sweep_value: f64,
    pub trial: usize,
    pub truth: Position,
    pub estimate: Option<TwoStageEstimate>,
    /// Squared refined-position error (m^2); NaN for a failed trial.
    pub squared_error: f64,
    /// Bound trace at the true UE (m^2); 0 for noiseless trials.
    pub peb_trace: f64,
    /// Why the trial was excluded, if it was.
    pub failure: Option<String>,
}

impl TrialResult {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    pub fn squared_error_at(&self, stage: Stage) -> Option<f64> {
        self.estimate
            .as_ref()
            .map(|e| (e.stage(stage).position - self.truth).norm_squared())
    }
}

/// One row of a result curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Method name, suffixed with `/coarse` or `/mid` for stage rows.
    pub method: String,
    pub sweep_name: String,
    pub sweep_value: f64,
    pub rmse_m: f64,
    /// `sqrt(peb_trace_m2)`.
    pub peb_m: f64,
    /// Bound trace averaged over the successful trials.
    pub peb_trace_m2: f64,
    pub trials: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SweepOutput {
    pub points: Vec<CurvePoint>,
    pub trials: Vec<TrialResult>,
}

/// Root-mean-square refined error over the trials that did not fail.
pub fn compute_rmse(results: &[TrialResult]) -> Result<f64> {
    stage_rmse(results, Stage::Refined)
}

/// Root-mean-square error of one stage's estimate over the trials that did not fail.
pub fn stage_rmse(results: &[TrialResult], stage: Stage) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::invalid("no trials to aggregate"));
    }
    let (sum, n) = results
        .iter()
        .filter(|r| !r.failed())
        .filter_map(|r| r.squared_error_at(stage))
        .fold((0.0, 0usize), |(s, n), e| (s + e, n + 1));
    if n == 0 {
        return Err(Error::invalid("every trial failed"));
    }
    Ok((sum / n as f64).sqrt())
}

/// Random stream of one trial: depends only on the seed, the method, the sweep index and
/// the trial index, so results do not depend on thread count or the configured method list.
pub fn trial_rng(seed: u64, method: Method, sweep_index: usize, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(
        (method.stream_tag() << 56)
            | ((sweep_index as u64 & 0xff_ffff) << 32)
            | (trial as u64 & 0xffff_ffff),
    );
    rng
}

/// Draws the scene, synthesizes the pilots, and localizes.
pub fn run_trial(
    cfg: &ExperimentConfig,
    design: &Design,
    sweep_index: usize,
    sweep_value: f64,
    trial: usize,
) -> TrialResult {
    let mut rng = trial_rng(cfg.seed, design.method, sweep_index, trial);
    let truth = match cfg.ue_mode {
        UeMode::Fixed => cfg.ue_position,
        UeMode::Random => cfg.region().sample(&mut rng),
    };
    let mut result = TrialResult {
        method: design.method,
        sweep_value,
        trial,
        truth,
        estimate: None,
        squared_error: f64::NAN,
        peb_trace: f64::NAN,
        failure: None,
    };
    match simulate(cfg, design, sweep_value, truth, &mut rng) {
        Ok((estimate, peb_trace)) => {
            result.squared_error = (estimate.refined.position - truth).norm_squared();
            result.estimate = Some(estimate);
            result.peb_trace = peb_trace;
        }
        Err(e) => result.failure = Some(e.to_string()),
    }
    result
}

fn simulate(
    cfg: &ExperimentConfig,
    design: &Design,
    sweep_value: f64,
    truth: Position,
    rng: &mut ChaCha8Rng,
) -> Result<(TwoStageEstimate, f64)> {
    let model = &design.model;
    let region = cfg.region();
    let los_phase = random_phase(rng);
    let los = model.los_gain(&truth, los_phase)?;

    let lmr = cfg.lmr_for(sweep_value);
    let scatterers = if lmr.is_finite() && cfg.num_scatterers > 0 {
        let raw: Vec<Scatterer> = (0..cfg.num_scatterers)
            .map(|_| Scatterer {
                position: region.sample(rng),
                rcs: 1.0,
                phase: random_phase(rng),
            })
            .collect();
        calibrate_lmr(model, &truth, &los, &raw, lmr)?
    } else {
        Vec::new()
    };
    let scene = MultipathScene::new(model, truth, los_phase, &scatterers)?;
    let response = scene.composite_response(model)?;
    let clean = design.localizer.pilots().project(&response);

    let (power, noisy) = match cfg.snr_for(sweep_value) {
        Some(snr) if snr == f64::INFINITY => (f64::INFINITY, false),
        Some(snr) => (cfg.scenario.power_for_snr(snr, los.magnitude), true),
        None => (cfg.scenario.tx_power_w, true),
    };
    let y: Vec<Complex64> = if noisy {
        let sigma2 = cfg.scenario.noise_variance();
        let amp = power.sqrt();
        clean
            .iter()
            .map(|x| amp * x + complex_gaussian(rng, sigma2))
            .collect()
    } else {
        clean
    };
    let peb_trace = if noisy {
        design.peb_trace(cfg, &truth, los_phase, power)?
    } else {
        0.0
    };
    let estimate = design.localizer.localize(&y)?;
    Ok((estimate, peb_trace))
}

/// Aggregates one method's trials at one sweep value into curve points (refined, then
/// coarse and mid when `stages` is set).
pub fn aggregate(
    cfg: &ExperimentConfig,
    method: Method,
    sweep_value: f64,
    trials: &[TrialResult],
) -> Vec<CurvePoint> {
    let ok: Vec<&TrialResult> = trials.iter().filter(|t| !t.failed()).collect();
    let failures = trials.len() - ok.len();
    let peb_trace = if ok.is_empty() {
        f64::NAN
    } else {
        ok.iter().map(|t| t.peb_trace).sum::<f64>() / ok.len() as f64
    };
    let mut stages = vec![(Stage::Refined, method.name().to_string())];
    if cfg.stages {
        stages.push((Stage::Coarse, format!("{}/coarse", method.name())));
        stages.push((Stage::Mid, format!("{}/mid", method.name())));
    }
    stages
        .into_iter()
        .map(|(stage, name)| CurvePoint {
            method: name,
            sweep_name: cfg.sweep.name().to_string(),
            sweep_value,
            rmse_m: stage_rmse(trials, stage).unwrap_or(f64::NAN),
            peb_m: peb_trace.sqrt(),
            peb_trace_m2: peb_trace,
            trials: ok.len(),
            failures,
        })
        .collect()
}

/// Runs every (sweep value, method) pair. Designs that do not depend on the sweep value
/// are built once per method.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutput> {
    cfg.validate()?;
    let mut out = SweepOutput::default();
    let design_varies = cfg.sweep == SweepKind::NumBases;
    let mut designs: Vec<Option<Design>> = cfg.methods.iter().map(|_| None).collect();
    for (si, &value) in cfg.sweep_values.iter().enumerate() {
        for (mi, &method) in cfg.methods.iter().enumerate() {
            let rebuild = match &designs[mi] {
                None => true,
                Some(d) => design_varies && d.model.basis.len() != cfg.bases_for(method, value),
            };
            if rebuild {
                designs[mi] = None;
                designs[mi] = Some(Design::build(cfg, method, cfg.bases_for(method, value))?);
            }
            let design = designs[mi].as_ref().expect("design was just built");
            let trials: Vec<TrialResult> = (0..cfg.trials)
                .into_par_iter()
                .map(|t| run_trial(cfg, design, si, value, t))
                .collect();
            out.points.extend(aggregate(cfg, method, value, &trials));
            out.trials.extend(trials);
        }
    }
    Ok(out)
}
