//! Codeword design, digital/EM factorization, codebooks and power allocation.
//!
//! For a known UE position the four codewords are the normalized conjugates of `d(p)` and
//! its three position derivatives. Each codeword factors element-by-element into a digital
//! weight and a unit-norm EM weight vector. Under position uncertainty the codebook stacks
//! the four codewords of every candidate point, and only the per-codeword power fractions
//! remain to be optimized.

mod allocation;
mod codebook;

pub use allocation::{
    allocate_power, baseline_conventional, baseline_directional, solve_allocation,
    AllocationOptions, AllocationProblem, PowerAllocation,
};
pub use codebook::{build_codebook, Codebook};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{norm, ArrayModel, EmPrecoder};
use crate::error::{Error, Result};
use crate::fim::{arv_jacobian, DerivativeMethod};
use crate::geometry::Position;

/// A unit-norm composite codeword `w = E^T f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codeword {
    pub w: Vec<Complex64>,
    /// Candidate UE position the codeword was designed for.
    pub source_point: Position,
    /// 0 for the matched (directional) beam, 1..=3 for the derivative along x, y, z.
    pub derivative_order: u8,
}

/// Builds `conj(d^(i)(p)) / ||d^(i)(p)||` for `i = 0..=3`.
pub fn optimal_codewords(
    model: &ArrayModel,
    p: &Position,
    method: DerivativeMethod,
) -> Result<[Codeword; 4]> {
    let jac = arv_jacobian(model, p, method)?;
    let make = |order: usize| -> Result<Codeword> {
        let d = jac.derivative(order);
        let n = norm(d);
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::degenerate(format!(
                "derivative {order} of the array response vanishes at {p:?}"
            )));
        }
        Ok(Codeword {
            w: d.iter().map(|x| x.conj() / n).collect(),
            source_point: *p,
            derivative_order: order as u8,
        })
    };
    Ok([make(0)?, make(1)?, make(2)?, make(3)?])
}

/// Digital precoder `f` and per-element EM weights realizing `sqrt(rho) w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecoderFactorization {
    pub digital: Vec<Complex64>,
    pub em: EmPrecoder,
}

impl PrecoderFactorization {
    /// `E^T f`.
    pub fn compose(&self) -> Vec<Complex64> {
        self.em
            .compose(&self.digital)
            .expect("factorization dimensions are consistent by construction")
    }
}

/// Splits each `Q`-block of `sqrt(power) w` into `f_m e_m` with `||e_m|| = 1`:
/// `f_m = sqrt(power) ||w_m|| e^{j psi_m}` and `e_m = w_m / ||w_m|| e^{-j psi_m}`.
/// A zero block gets `f_m = 0` and `e_m` the first unit vector. `phases` defaults to zero.
pub fn factorize(
    w: &[Complex64],
    q: usize,
    power: f64,
    phases: Option<&[f64]>,
) -> Result<PrecoderFactorization> {
    if q == 0 || w.is_empty() || !w.len().is_multiple_of(q) {
        return Err(Error::DimensionMismatch {
            expected: q,
            got: w.len(),
        });
    }
    if !(0.0..=1.0).contains(&power) {
        return Err(Error::invalid(format!(
            "power fraction must lie in [0, 1], got {power}"
        )));
    }
    let elements = w.len() / q;
    if let Some(ph) = phases {
        if ph.len() != elements {
            return Err(Error::DimensionMismatch {
                expected: elements,
                got: ph.len(),
            });
        }
    }
    let amp = power.sqrt();
    let mut digital = Vec::with_capacity(elements);
    let mut em = Vec::with_capacity(elements);
    for (m, block) in w.chunks_exact(q).enumerate() {
        let n = norm(block);
        if n == 0.0 {
            digital.push(Complex64::new(0.0, 0.0));
            let mut e = vec![Complex64::new(0.0, 0.0); q];
            e[0] = Complex64::new(1.0, 0.0);
            em.push(e);
            continue;
        }
        let psi = phases.map_or(0.0, |p| p[m]);
        digital.push(Complex64::from_polar(amp * n, psi));
        let rot = Complex64::from_polar(1.0 / n, -psi);
        em.push(block.iter().map(|x| x * rot).collect());
    }
    Ok(PrecoderFactorization {
        digital,
        em: EmPrecoder::new(em)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assert_close;
    use crate::channel::{complex_gaussian, dot};
    use crate::geometry::build_upa;
    use crate::harmonics::BasisSet;
    use rand::{Rng, SeedableRng};

    fn model(q: usize) -> ArrayModel {
        let layout = build_upa(Position::new(0.0, 0.0, 5.0), 4, 4, 0.005).unwrap();
        ArrayModel::new(layout, BasisSet::new(q).unwrap(), 0.01).unwrap()
    }

    #[test]
    fn codewords_are_normalized_matched_beams() {
        let m = model(9);
        let p = Position::new(10.35, 1.67, 0.0);
        let cws = optimal_codewords(&m, &p, DerivativeMethod::default_for(m.wavelength)).unwrap();
        for (i, c) in cws.iter().enumerate() {
            assert_close!(norm(&c.w), 1.0, 1e-12);
            assert_eq!(c.derivative_order as usize, i);
        }
        let d = m.effective_arv(&p).unwrap();
        let dn = norm(d.as_slice());
        for (x, y) in cws[0].w.iter().zip(d.as_slice()) {
            assert!((x - y.conj() / dn).norm() < 1e-15);
        }
        // matched filter beats random unit vectors
        let best = d.dot(&cws[0].w).norm();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let u: Vec<Complex64> = (0..m.dim())
                .map(|_| complex_gaussian(&mut rng, 1.0))
                .collect();
            let un = norm(&u);
            let u: Vec<Complex64> = u.into_iter().map(|x| x / un).collect();
            assert!(dot(d.as_slice(), &u).norm() <= best + 1e-12);
        }
    }

    #[test]
    fn factorization_round_trip() {
        let m = model(9);
        let p = Position::new(12.0, -2.0, 3.0);
        let cws = optimal_codewords(&m, &p, DerivativeMethod::Analytic).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for c in &cws {
            let rho = 0.37;
            let fac = factorize(&c.w, 9, rho, None).unwrap();
            for e in fac.em.weights() {
                assert_close!(norm(e), 1.0, 1e-12);
            }
            let rebuilt = fac.compose();
            for (x, y) in rebuilt.iter().zip(&c.w) {
                assert!((x - y * rho.sqrt()).norm() <= 1e-12 * y.norm().max(1e-300));
            }
            let phases: Vec<f64> = (0..m.layout.len())
                .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                .collect();
            let rotated = factorize(&c.w, 9, rho, Some(&phases)).unwrap().compose();
            for (x, y) in rotated.iter().zip(&rebuilt) {
                assert!((x - y).norm() <= 1e-12 * y.norm().max(1e-300));
            }
        }
    }

    #[test]
    fn zero_block_gets_unit_em_weight() {
        let mut w = vec![Complex64::new(0.5, 0.5); 6];
        w[3] = Complex64::new(0.0, 0.0);
        w[4] = Complex64::new(0.0, 0.0);
        w[5] = Complex64::new(0.0, 0.0);
        let fac = factorize(&w, 3, 1.0, None).unwrap();
        assert_eq!(fac.digital[1], Complex64::new(0.0, 0.0));
        assert_eq!(fac.em.weights()[1][0], Complex64::new(1.0, 0.0));
        assert!(factorize(&w, 4, 1.0, None).is_err());
        assert!(factorize(&w, 3, 1.5, None).is_err());
    }

    #[test]
    fn q1_em_weights_are_unit_modulus_scalars() {
        let m = model(1);
        let p = Position::new(10.0, 0.0, 2.0);
        let cws = optimal_codewords(&m, &p, DerivativeMethod::Analytic).unwrap();
        let fac = factorize(&cws[0].w, 1, 1.0, None).unwrap();
        for e in fac.em.weights() {
            assert_eq!(e.len(), 1);
            assert_close!(e[0].norm(), 1.0, 1e-14);
        }
        // conjugate near-field steering vector, normalized
        let a = crate::geometry::nearfield_arv(&m.layout, &p, m.wavelength).unwrap();
        let scale = (m.layout.len() as f64).sqrt();
        for (x, y) in cws[0].w.iter().zip(&a) {
            assert!((x - y.conj() / scale).norm() < 1e-14);
        }
    }
}
