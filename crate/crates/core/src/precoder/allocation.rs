//! Minimax power allocation over a discretized uncertainty region.
//!
//! `min_rho max_i PEB(sum_t rho_t W_t; p_i)` over the probability simplex. Each PEB is convex
//! in `rho` because the FIM is linear in it. The max is smoothed with a log-sum-exp whose
//! temperature is driven toward zero, and each smoothed problem is solved with spectral
//! projected gradient (Barzilai-Borwein steps, nonmonotone Armijo search, Euclidean
//! projection onto the simplex). The best unsmoothed iterate is returned.

use nalgebra::Matrix5;
use rayon::prelude::*;

use super::codebook::Codebook;
use crate::channel::{ArrayModel, ScenarioConfig};
use crate::error::{Error, Result};
use crate::fim::{checked_inverse, DerivativeMethod, InformationGradients, StateParams};
use crate::geometry::{Position, Region};

/// Per-sample, per-codeword Fisher information at full power.
#[derive(Debug, Clone)]
pub struct AllocationProblem {
    samples: Vec<Position>,
    info: Vec<Vec<Matrix5<f64>>>,
}

impl AllocationProblem {
    pub fn new(
        model: &ArrayModel,
        codebook: &Codebook,
        samples: &[Position],
        scenario: &ScenarioConfig,
        method: DerivativeMethod,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid(
                "power allocation needs at least one sample point",
            ));
        }
        if codebook.dim() != model.dim() {
            return Err(Error::DimensionMismatch {
                expected: model.dim(),
                got: codebook.dim(),
            });
        }
        let power = scenario.tx_power_w;
        let noise = scenario.noise_variance();
        let info = samples
            .par_iter()
            .map(|p| {
                // the FIM does not depend on the LOS phase
                let state = StateParams::los(model, *p, 0.0)?;
                let grads = InformationGradients::compute(model, &state, power, noise, method)?;
                Ok(codebook
                    .codewords()
                    .iter()
                    .map(|c| grads.codeword_information(&c.w))
                    .collect())
            })
            .collect::<Result<Vec<Vec<_>>>>()?;
        Ok(Self {
            samples: samples.to_vec(),
            info,
        })
    }

    pub fn samples(&self) -> &[Position] {
        &self.samples
    }

    pub fn codewords(&self) -> usize {
        self.info[0].len()
    }

    pub fn fim(&self, sample: usize, weights: &[f64]) -> Matrix5<f64> {
        self.info[sample]
            .iter()
            .zip(weights)
            .filter(|(_, w)| **w != 0.0)
            .fold(Matrix5::zeros(), |acc, (j, w)| acc + j * *w)
    }

    /// PEB trace at one sample.
    pub fn peb(&self, sample: usize, weights: &[f64]) -> Result<f64> {
        let inv =
            checked_inverse(&self.fim(sample, weights)).map_err(|e| self.locate(e, sample))?;
        Ok(inv[(0, 0)] + inv[(1, 1)] + inv[(2, 2)])
    }

    /// PEB trace and its gradient with respect to the weights.
    fn peb_with_gradient(&self, sample: usize, weights: &[f64]) -> Option<(f64, Vec<f64>)> {
        let inv = checked_inverse(&self.fim(sample, weights)).ok()?;
        let value = inv[(0, 0)] + inv[(1, 1)] + inv[(2, 2)];
        // d tr(S J^-1 S^T) / d rho_t = -sum_{k<3} b_k^T J_t b_k with b_k = J^-1 e_k
        let cols = inv.fixed_columns::<3>(0);
        let grad = self.info[sample]
            .iter()
            .map(|jt| {
                let prod = jt * cols;
                -(0..3)
                    .map(|k| cols.column(k).dot(&prod.column(k)))
                    .sum::<f64>()
            })
            .collect();
        Some((value, grad))
    }

    /// Largest PEB trace over the samples.
    pub fn max_peb(&self, weights: &[f64]) -> Result<f64> {
        let mut worst = f64::NEG_INFINITY;
        for i in 0..self.samples.len() {
            worst = worst.max(self.peb(i, weights)?);
        }
        Ok(worst)
    }

    fn locate(&self, err: Error, sample: usize) -> Error {
        match err {
            Error::Unidentifiable { min_eigenvalue, .. } => Error::Unidentifiable {
                min_eigenvalue,
                at: Some(self.samples[sample]),
            },
            other => other,
        }
    }

    /// Smoothed max `mu log sum exp(f_i / mu)` of the scaled PEBs and its gradient.
    fn smoothed(&self, weights: &[f64], scale: f64, mu: f64) -> Option<(f64, Vec<f64>)> {
        let parts: Vec<(f64, Vec<f64>)> = (0..self.samples.len())
            .map(|i| self.peb_with_gradient(i, weights))
            .collect::<Option<_>>()?;
        let fmax = parts
            .iter()
            .map(|(v, _)| v / scale)
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = parts
            .iter()
            .map(|(v, _)| ((v / scale - fmax) / mu).exp())
            .collect();
        let total: f64 = exps.iter().sum();
        let value = fmax + mu * total.ln();
        let mut grad = vec![0.0; weights.len()];
        for ((_, g), e) in parts.iter().zip(&exps) {
            let p = e / total / scale;
            for (acc, gi) in grad.iter_mut().zip(g) {
                *acc += p * gi;
            }
        }
        Some((value, grad))
    }
}

/// Solver knobs for [`allocate_power`].
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationOptions {
    /// Smoothing temperatures, relative to the uniform allocation's max PEB.
    pub temperatures: Vec<f64>,
    pub max_iterations_per_stage: usize,
    /// Stop a stage when the projected-gradient step falls below this (infinity norm).
    pub tolerance: f64,
}

impl Default for AllocationOptions {
    fn default() -> Self {
        Self {
            temperatures: vec![1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4, 3e-5, 1e-5, 3e-6],
            max_iterations_per_stage: 400,
            tolerance: 1e-10,
        }
    }
}

/// Optimized power fractions and the resulting worst-case PEB trace.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerAllocation {
    pub weights: Vec<f64>,
    pub max_peb: f64,
    pub uniform_max_peb: f64,
    pub iterations: usize,
}

/// Euclidean projection onto `{x >= 0, sum x = 1}`.
pub(crate) fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        cumulative += ui;
        let t = (cumulative - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    let mut x: Vec<f64> = v.iter().map(|vi| (vi - theta).max(0.0)).collect();
    let s: f64 = x.iter().sum();
    for xi in &mut x {
        *xi /= s;
    }
    x
}

pub fn solve_allocation(
    problem: &AllocationProblem,
    options: &AllocationOptions,
) -> Result<PowerAllocation> {
    let n = problem.codewords();
    let uniform = vec![1.0 / n as f64; n];
    let uniform_max = problem.max_peb(&uniform)?;
    if n == 1 {
        return Ok(PowerAllocation {
            weights: uniform,
            max_peb: uniform_max,
            uniform_max_peb: uniform_max,
            iterations: 0,
        });
    }
    let scale = uniform_max;
    let mut x = uniform.clone();
    let mut best = (uniform_max, uniform.clone());
    let mut iterations = 0;
    const MEMORY: usize = 10;
    const ARMIJO: f64 = 1e-4;

    for &mu in &options.temperatures {
        let Some((mut fx, mut gx)) = problem.smoothed(&x, scale, mu) else {
            break;
        };
        let mut history = vec![fx];
        let mut alpha = 1.0 / gx.iter().fold(0.0f64, |m, g| m.max(g.abs())).max(1e-12);
        for _ in 0..options.max_iterations_per_stage {
            iterations += 1;
            let trial: Vec<f64> = x.iter().zip(&gx).map(|(xi, gi)| xi - alpha * gi).collect();
            let d: Vec<f64> = project_simplex(&trial)
                .iter()
                .zip(&x)
                .map(|(p, xi)| p - xi)
                .collect();
            let step_norm = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if step_norm < options.tolerance {
                break;
            }
            let slope: f64 = d.iter().zip(&gx).map(|(a, b)| a * b).sum();
            let reference = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut lambda = 1.0;
            let accepted = loop {
                let cand: Vec<f64> = x
                    .iter()
                    .zip(&d)
                    .map(|(xi, di)| (xi + lambda * di).max(0.0))
                    .collect();
                if let Some((fc, gc)) = problem.smoothed(&cand, scale, mu) {
                    if fc <= reference + ARMIJO * lambda * slope {
                        break Some((cand, fc, gc));
                    }
                }
                lambda *= 0.5;
                if lambda < 1e-12 {
                    break None;
                }
            };
            let Some((cand, fc, gc)) = accepted else {
                break;
            };
            let s: Vec<f64> = cand.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = gc.iter().zip(&gx).map(|(a, b)| a - b).collect();
            let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
            let ss: f64 = s.iter().map(|v| v * v).sum();
            alpha = if sy > 0.0 {
                (ss / sy).clamp(1e-12, 1e12)
            } else {
                1e3 * alpha.max(1e-6)
            };
            x = cand;
            fx = fc;
            gx = gc;
            history.push(fx);
            if history.len() > MEMORY {
                history.remove(0);
            }
            if let Ok(v) = problem.max_peb(&x) {
                if v < best.0 {
                    best = (v, x.clone());
                }
            }
        }
    }
    // renormalize exactly onto the simplex
    let total: f64 = best.1.iter().sum();
    let weights: Vec<f64> = best.1.iter().map(|w| w / total).collect();
    let max_peb = problem.max_peb(&weights)?;
    Ok(PowerAllocation {
        weights,
        max_peb,
        uniform_max_peb: uniform_max,
        iterations,
    })
}

/// Optimizes the codebook's power fractions for the worst PEB over `samples`.
pub fn allocate_power(
    model: &ArrayModel,
    codebook: &Codebook,
    samples: &[Position],
    scenario: &ScenarioConfig,
    method: DerivativeMethod,
) -> Result<(Codebook, PowerAllocation)> {
    let problem = AllocationProblem::new(model, codebook, samples, scenario, method)?;
    let allocation = solve_allocation(&problem, &AllocationOptions::default())?;
    Ok((
        codebook.with_weights(allocation.weights.clone())?,
        allocation,
    ))
}

/// Directional-only baseline: the order-0 codeword of each candidate point, power-optimized.
pub fn baseline_directional(
    model: &ArrayModel,
    codebook: &Codebook,
    samples: &[Position],
    scenario: &ScenarioConfig,
    method: DerivativeMethod,
) -> Result<(Codebook, PowerAllocation)> {
    let directional = codebook.filter(|c| c.derivative_order == 0)?;
    allocate_power(model, &directional, samples, scenario, method)
}

/// Conventional fixed-pattern array: the full design pipeline with a single (isotropic)
/// basis function.
pub fn baseline_conventional(
    model: &ArrayModel,
    region: &Region,
    lattice: [usize; 3],
    samples: &[Position],
    scenario: &ScenarioConfig,
    method: DerivativeMethod,
) -> Result<(ArrayModel, Codebook, PowerAllocation)> {
    let conventional = ArrayModel::new(
        model.layout.clone(),
        crate::harmonics::BasisSet::new(1)?,
        model.wavelength,
    )?;
    let codebook = super::build_codebook(&conventional, region, lattice, None, method)?;
    let (codebook, allocation) =
        allocate_power(&conventional, &codebook, samples, scenario, method)?;
    Ok((conventional, codebook, allocation))
}
