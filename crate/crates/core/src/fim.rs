//! Derivatives of the effective array response, the 5x5 Fisher information over
//! `[p_x, p_y, p_z, rho, phi]` and the position error bound.

use nalgebra::{DMatrix, Matrix3, Matrix5, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{dot, ArrayModel, EffectiveArv};
use crate::error::{Error, Result};
use crate::geometry::{Aod, Position};

/// Equilibrated condition numbers above this make the FIM unusable.
pub const MAX_CONDITION: f64 = 1e12;

/// How `d^(i)(p) = dd/dp_i` is computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DerivativeMethod {
    /// Central differences with the given step in meters.
    FiniteDifference { step: f64 },
    /// Chain rule through the element phases and departure angles.
    Analytic,
}

impl DerivativeMethod {
    /// Central differences with a step of `lambda / 100`.
    pub fn default_for(wavelength: f64) -> Self {
        DerivativeMethod::FiniteDifference {
            step: wavelength / 100.0,
        }
    }
}

/// `d(p)` together with its three position derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ArvJacobian {
    pub value: EffectiveArv,
    pub columns: [Vec<Complex64>; 3],
}

impl ArvJacobian {
    /// `d^(i)` with `d^(0) = d` and `d^(1..=3)` the position derivatives.
    pub fn derivative(&self, order: usize) -> &[Complex64] {
        match order {
            0 => self.value.as_slice(),
            i => &self.columns[i - 1],
        }
    }
}

pub fn arv_jacobian(
    model: &ArrayModel,
    p: &Position,
    method: DerivativeMethod,
) -> Result<ArvJacobian> {
    match method {
        DerivativeMethod::FiniteDifference { step } => finite_difference_jacobian(model, p, step),
        DerivativeMethod::Analytic => analytic_jacobian(model, p),
    }
}

fn finite_difference_jacobian(model: &ArrayModel, p: &Position, step: f64) -> Result<ArvJacobian> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let value = model.effective_arv(p)?;
    let column = |axis: usize| -> Result<Vec<Complex64>> {
        let mut delta = Position::zeros();
        delta[axis] = step;
        let plus = model.effective_arv(&(p + delta))?;
        let minus = model.effective_arv(&(p - delta))?;
        Ok(plus
            .as_slice()
            .iter()
            .zip(minus.as_slice())
            .map(|(a, b)| (a - b) / (2.0 * step))
            .collect())
    };
    Ok(ArvJacobian {
        value,
        columns: [column(0)?, column(1)?, column(2)?],
    })
}

fn analytic_jacobian(model: &ArrayModel, p: &Position) -> Result<ArvJacobian> {
    let layout = &model.layout;
    let q = model.basis.len();
    let k = 2.0 * std::f64::consts::PI / model.wavelength;
    let to_center = p - layout.center();
    let r_center = to_center.norm();
    if r_center <= 1e-12 {
        return Err(Error::degenerate("point coincides with the array center"));
    }
    let u_center = to_center / r_center;

    let mut value = Vec::with_capacity(model.dim());
    let mut columns: [Vec<Complex64>; 3] = std::array::from_fn(|_| Vec::with_capacity(model.dim()));
    for (m, pm) in layout.positions().iter().enumerate() {
        let v = p - pm;
        let r = v.norm();
        if r <= 1e-12 {
            return Err(Error::degenerate(format!(
                "point coincides with element {m}"
            )));
        }
        let aod = Aod::from_direction(&v)?;
        let (sin_el, cos_el) = aod.elevation.sin_cos();
        if sin_el.abs() < 1e-9 {
            return Err(Error::degenerate(format!(
                "direction from element {m} is along the polar axis"
            )));
        }
        let (sin_az, cos_az) = aod.azimuth.sin_cos();
        let a = Complex64::from_polar(1.0, -k * (r - r_center));
        // da/dp = a * (-j k) (u_m - u_c)
        let du = v / r - u_center;
        let d_el = Position::new(cos_el * cos_az, cos_el * sin_az, -sin_el) / r;
        let d_az = Position::new(-sin_az, cos_az, 0.0) / (r * sin_el);

        let parts = model.basis.evaluate_with_partials(&aod);
        for j in 0..q {
            let b = parts.value[j];
            value.push(a * b);
            for axis in 0..3 {
                let da = a * Complex64::new(0.0, -k * du[axis]);
                let db = parts.d_elevation[j] * d_el[axis] + parts.d_azimuth[j] * d_az[axis];
                columns[axis].push(da * b + a * db);
            }
        }
    }
    Ok(ArvJacobian {
        value: EffectiveArv::from_vec(value, q)?,
        columns,
    })
}

/// Unknown parameters `eta = [p_u, rho, phi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateParams {
    pub position: Position,
    pub magnitude: f64,
    pub phase: f64,
}

impl StateParams {
    /// State with the free-space LOS magnitude at `position`.
    pub fn los(model: &ArrayModel, position: Position, phase: f64) -> Result<Self> {
        let gain = model.los_gain(&position, phase)?;
        Ok(Self {
            position,
            magnitude: gain.magnitude,
            phase,
        })
    }
}

/// Real symmetric 5x5 Fisher information matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisherMatrix(pub Matrix5<f64>);

impl FisherMatrix {
    pub fn matrix(&self) -> &Matrix5<f64> {
        &self.0
    }

    /// Information on the position alone when the path gain is known.
    pub fn position_block(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn scaled(&self, c: f64) -> Self {
        FisherMatrix(self.0 * c)
    }
}

impl std::ops::Add for FisherMatrix {
    type Output = FisherMatrix;

    fn add(self, rhs: FisherMatrix) -> FisherMatrix {
        FisherMatrix(self.0 + rhs.0)
    }
}

/// Derivatives of the noiseless pilot `x_t = sqrt(P) beta d(p)^T w_t` with respect to
/// each parameter, as vectors `g_i` with `dx_t/deta_i = g_i^T w_t`.
#[derive(Debug, Clone)]
pub struct InformationGradients {
    g: [Vec<Complex64>; 5],
    noise_variance: f64,
}

impl InformationGradients {
    pub fn new(
        jac: &ArvJacobian,
        state: &StateParams,
        power: f64,
        noise_variance: f64,
    ) -> Result<Self> {
        if !(state.magnitude > 0.0) {
            return Err(Error::invalid("path magnitude must be positive"));
        }
        if !(noise_variance > 0.0) {
            return Err(Error::invalid("noise variance must be positive"));
        }
        if !(power >= 0.0 && power.is_finite()) {
            return Err(Error::invalid(format!(
                "transmit power must be finite and non-negative, got {power}"
            )));
        }
        // J is invariant to the common phase of the path gain; evaluating at zero phase keeps
        // the bound bit-identical across random phase draws
        let unit_phase = Complex64::new(power.sqrt(), 0.0);
        let beta = unit_phase * state.magnitude;
        let scale = |v: &[Complex64], c: Complex64| v.iter().map(|x| x * c).collect::<Vec<_>>();
        let d = jac.value.as_slice();
        Ok(Self {
            g: [
                scale(&jac.columns[0], beta),
                scale(&jac.columns[1], beta),
                scale(&jac.columns[2], beta),
                scale(d, unit_phase),
                scale(d, beta * Complex64::i()),
            ],
            noise_variance,
        })
    }

    pub fn compute(
        model: &ArrayModel,
        state: &StateParams,
        power: f64,
        noise_variance: f64,
        method: DerivativeMethod,
    ) -> Result<Self> {
        let jac = arv_jacobian(model, &state.position, method)?;
        Self::new(&jac, state, power, noise_variance)
    }

    /// Information contributed by one codeword at full power.
    pub fn codeword_information(&self, w: &[Complex64]) -> Matrix5<f64> {
        let s: [Complex64; 5] = std::array::from_fn(|i| dot(&self.g[i], w));
        let c = 2.0 / self.noise_variance;
        Matrix5::from_fn(|i, j| c * (s[i].conj() * s[j]).re)
    }

    /// `J = sum_t rho_t J(w_t)`.
    pub fn weighted<W: AsRef<[Complex64]>>(
        &self,
        weights: &[f64],
        codewords: &[W],
    ) -> Result<FisherMatrix> {
        if weights.len() != codewords.len() {
            return Err(Error::DimensionMismatch {
                expected: codewords.len(),
                got: weights.len(),
            });
        }
        let mut j = Matrix5::zeros();
        for (rho, w) in weights.iter().zip(codewords) {
            if *rho != 0.0 {
                j += self.codeword_information(w.as_ref()) * *rho;
            }
        }
        Ok(FisherMatrix(j))
    }

    /// `J_ij = (2 / sigma^2) Re{ g_i^H conj(W) g_j }` for an aggregate covariance `W`.
    pub fn aggregate(&self, w: &DMatrix<Complex64>) -> Result<FisherMatrix> {
        let n = self.g[0].len();
        if w.nrows() != n || w.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: w.nrows(),
            });
        }
        let wg: Vec<Vec<Complex64>> = self
            .g
            .iter()
            .map(|g| {
                (0..n)
                    .map(|r| (0..n).map(|c| w[(r, c)].conj() * g[c]).sum())
                    .collect()
            })
            .collect();
        let c = 2.0 / self.noise_variance;
        Ok(FisherMatrix(Matrix5::from_fn(|i, j| {
            c * self.g[i]
                .iter()
                .zip(&wg[j])
                .map(|(a, b)| a.conj() * b)
                .sum::<Complex64>()
                .re
        })))
    }
}

/// FIM of the LOS-only pilot model for a weighted codeword set.
pub fn fim<W: AsRef<[Complex64]>>(
    model: &ArrayModel,
    weights: &[f64],
    codewords: &[W],
    state: &StateParams,
    power: f64,
    noise_variance: f64,
    method: DerivativeMethod,
) -> Result<FisherMatrix> {
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| *w < 0.0) || total > 1.0 + 1e-9 {
        return Err(Error::invalid(format!(
            "power weights must be non-negative with sum <= 1, got sum {total}"
        )));
    }
    InformationGradients::compute(model, state, power, noise_variance, method)?
        .weighted(weights, codewords)
}

/// Position error bound: `trace` is `tr([J^-1]_{1:3,1:3})` in m^2, `rmse` its square root in m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peb {
    pub trace: f64,
    pub rmse: f64,
}

/// Inverse of a symmetric positive-definite matrix after diagonal equilibration. Rejects
/// matrices whose equilibrated condition number exceeds [`MAX_CONDITION`].
pub fn checked_inverse(j: &Matrix5<f64>) -> Result<Matrix5<f64>> {
    let unidentifiable = || {
        let min = SymmetricEigen::new(*j).eigenvalues.min();
        Error::Unidentifiable {
            min_eigenvalue: min,
            at: None,
        }
    };
    if j.iter().any(|v| !v.is_finite()) {
        return Err(unidentifiable());
    }
    let diag = j.diagonal();
    if diag.iter().any(|d| !(*d > 0.0)) {
        return Err(unidentifiable());
    }
    let s = diag.map(|d| 1.0 / d.sqrt());
    let scaled = Matrix5::from_fn(|r, c| j[(r, c)] * s[r] * s[c]);
    let eig = SymmetricEigen::new(scaled);
    let (min, max) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if !(min > 0.0) || max / min > MAX_CONDITION {
        return Err(unidentifiable());
    }
    let inv_scaled = scaled.cholesky().ok_or_else(unidentifiable)?.inverse();
    Ok(Matrix5::from_fn(|r, c| inv_scaled[(r, c)] * s[r] * s[c]))
}

pub fn peb(j: &FisherMatrix) -> Result<Peb> {
    let inv = checked_inverse(&j.0)?;
    let trace = inv[(0, 0)] + inv[(1, 1)] + inv[(2, 2)];
    Ok(Peb {
        trace,
        rmse: trace.max(0.0).sqrt(),
    })
}
