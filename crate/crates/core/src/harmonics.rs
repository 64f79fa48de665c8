//! Complex spherical harmonics and the truncated basis used to synthesize element patterns.
//!
//! `Y(l, u)(el, az) = (-1)^u N(l, u) P(l, u)(cos el) exp(j u az)` where `P` carries no
//! Condon-Shortley phase (the explicit `(-1)^u` supplies it). The product `N * P` is never
//! formed from factorials; it comes from the fully normalized recurrence, which is stable to
//! high degree.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Aod;

/// Degree/order pair `(l, u)` with `|u| <= l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BasisIndex {
    pub degree: u32,
    pub order: i32,
}

impl BasisIndex {
    pub fn new(degree: u32, order: i32) -> Result<Self> {
        if order.unsigned_abs() > degree {
            return Err(Error::invalid(format!(
                "order {order} exceeds degree {degree}"
            )));
        }
        Ok(Self { degree, order })
    }

    /// Position in the degree-then-order enumeration.
    pub fn linear(&self) -> usize {
        let l = self.degree as i64;
        (l * l + l + self.order as i64) as usize
    }
}

/// The first `Q` spherical harmonics ordered by degree, then order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSet {
    indices: Vec<BasisIndex>,
}

impl BasisSet {
    pub fn new(q: usize) -> Result<Self> {
        if q == 0 {
            return Err(Error::invalid("basis size must be positive"));
        }
        let mut indices = Vec::with_capacity(q);
        let mut l = 0u32;
        'outer: loop {
            for u in -(l as i32)..=(l as i32) {
                if indices.len() == q {
                    break 'outer;
                }
                indices.push(BasisIndex {
                    degree: l,
                    order: u,
                });
            }
            l += 1;
        }
        Ok(Self { indices })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[BasisIndex] {
        &self.indices
    }

    pub fn max_degree(&self) -> u32 {
        self.indices.last().map_or(0, |i| i.degree)
    }

    /// `b(theta)`: the basis functions evaluated at one direction.
    pub fn evaluate(&self, aod: &Aod) -> Vec<Complex64> {
        let table = LegendreTable::new(self.max_degree(), aod.elevation);
        self.indices
            .iter()
            .map(|idx| table.harmonic(*idx, aod.azimuth))
            .collect()
    }

    /// `b(theta)` for the direction of `v` (any nonzero length), written into `out`.
    ///
    /// Works from direction cosines, so no inverse trigonometry is needed; a direction
    /// along the z axis gets azimuth 0, matching [`Aod::from_direction`].
    pub fn evaluate_direction_into(
        &self,
        v: &nalgebra::Vector3<f64>,
        out: &mut [Complex64],
    ) -> Result<()> {
        if out.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: out.len(),
            });
        }
        let rho2 = v.x * v.x + v.y * v.y;
        let rho = rho2.sqrt();
        let r = (rho2 + v.z * v.z).sqrt();
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::degenerate("zero-length direction"));
        }
        let (x, s) = (v.z / r, rho / r);
        let unit = if rho > 0.0 {
            Complex64::new(v.x / rho, v.y / rho)
        } else {
            Complex64::new(1.0, 0.0)
        };
        let lmax = self.max_degree() as usize;
        let mut stack = [0.0f64; STACK_SLOTS];
        let mut heap = Vec::new();
        let size = LegendreTable::slot(lmax, lmax) + 1;
        let p: &mut [f64] = if size <= STACK_SLOTS {
            &mut stack[..size]
        } else {
            heap.resize(size, 0.0);
            &mut heap
        };
        LegendreTable::fill_values(lmax, x, s, p);
        let mut phases = Vec::with_capacity(lmax + 1);
        let mut ph = Complex64::new(1.0, 0.0);
        for _ in 0..=lmax {
            phases.push(ph);
            ph *= unit;
        }
        for (o, idx) in out.iter_mut().zip(&self.indices) {
            let m = idx.order.unsigned_abs() as usize;
            let val = p[LegendreTable::slot(idx.degree as usize, m)];
            *o = if idx.order >= 0 {
                let sign = if m % 2 == 1 { -1.0 } else { 1.0 };
                phases[m] * (sign * val)
            } else {
                phases[m].conj() * val
            };
        }
        Ok(())
    }

    /// `b(theta)` together with its partial derivatives in elevation and azimuth.
    pub fn evaluate_with_partials(&self, aod: &Aod) -> BasisPartials {
        let table = LegendreTable::new(self.max_degree(), aod.elevation);
        let n = self.len();
        let mut out = BasisPartials {
            value: Vec::with_capacity(n),
            d_elevation: Vec::with_capacity(n),
            d_azimuth: Vec::with_capacity(n),
        };
        for idx in &self.indices {
            let (y, dy) = table.harmonic_with_elevation_derivative(*idx, aod.azimuth);
            out.value.push(y);
            out.d_elevation.push(dy);
            out.d_azimuth
                .push(Complex64::new(0.0, idx.order as f64) * y);
        }
        out
    }
}

/// Basis values and their angular partial derivatives at one direction.
#[derive(Debug, Clone)]
pub struct BasisPartials {
    pub value: Vec<Complex64>,
    pub d_elevation: Vec<Complex64>,
    pub d_azimuth: Vec<Complex64>,
}

/// Fully normalized Legendre values `N(l,m) P(l,m)(cos el)` for `0 <= m <= l <= lmax`,
/// plus their derivatives with respect to the polar angle.
const STACK_SLOTS: usize = 231;

struct LegendreTable {
    values: Vec<f64>,
    d_elevation: Vec<f64>,
}

impl LegendreTable {
    fn slot(l: usize, m: usize) -> usize {
        l * (l + 1) / 2 + m
    }

    fn new(lmax: u32, elevation: f64) -> Self {
        let lmax = lmax as usize;
        let size = Self::slot(lmax, lmax) + 1;
        let mut p = vec![0.0; size];
        let mut dp = vec![0.0; size];
        let (s, x) = elevation.sin_cos();
        // d/d(el) of x = cos(el) is -s, of s = sin(el) is x
        p[0] = (1.0 / (4.0 * PI)).sqrt();
        for m in 0..=lmax {
            let mm = Self::slot(m, m);
            if m > 0 {
                let prev = Self::slot(m - 1, m - 1);
                let c = ((2 * m + 1) as f64 / (2 * m) as f64).sqrt();
                p[mm] = c * s * p[prev];
                dp[mm] = c * (x * p[prev] + s * dp[prev]);
            }
            if m < lmax {
                let next = Self::slot(m + 1, m);
                let c = ((2 * m + 3) as f64).sqrt();
                p[next] = c * x * p[mm];
                dp[next] = c * (-s * p[mm] + x * dp[mm]);
            }
            for l in (m + 2)..=lmax {
                let a = Self::recurrence_coeff(l, m);
                let a_prev = Self::recurrence_coeff(l - 1, m);
                let (l1, l2) = (Self::slot(l - 1, m), Self::slot(l - 2, m));
                let cur = Self::slot(l, m);
                p[cur] = a * (x * p[l1] - p[l2] / a_prev);
                dp[cur] = a * (-s * p[l1] + x * dp[l1] - dp[l2] / a_prev);
            }
        }
        Self {
            values: p,
            d_elevation: dp,
        }
    }

    /// Normalized values only, for `x = cos(el)`, `s = sin(el)`.
    fn fill_values(lmax: usize, x: f64, s: f64, p: &mut [f64]) {
        p[0] = (1.0 / (4.0 * PI)).sqrt();
        for m in 0..=lmax {
            let mm = Self::slot(m, m);
            if m > 0 {
                let c = ((2 * m + 1) as f64 / (2 * m) as f64).sqrt();
                p[mm] = c * s * p[Self::slot(m - 1, m - 1)];
            }
            if m < lmax {
                p[Self::slot(m + 1, m)] = ((2 * m + 3) as f64).sqrt() * x * p[mm];
            }
            for l in (m + 2)..=lmax {
                let a = Self::recurrence_coeff(l, m);
                let a_prev = Self::recurrence_coeff(l - 1, m);
                p[Self::slot(l, m)] =
                    a * (x * p[Self::slot(l - 1, m)] - p[Self::slot(l - 2, m)] / a_prev);
            }
        }
    }

    fn recurrence_coeff(l: usize, m: usize) -> f64 {
        let (l, m) = (l as f64, m as f64);
        ((4.0 * l * l - 1.0) / (l * l - m * m)).sqrt()
    }

    fn phase_factor(idx: BasisIndex, azimuth: f64) -> Complex64 {
        // Y(l,-m) = P~(l,m) e^{-j m az}; Y(l,m) = (-1)^m P~(l,m) e^{j m az}
        let sign = if idx.order > 0 && idx.order % 2 == 1 {
            -1.0
        } else {
            1.0
        };
        Complex64::from_polar(sign, idx.order as f64 * azimuth)
    }

    fn harmonic(&self, idx: BasisIndex, azimuth: f64) -> Complex64 {
        let slot = Self::slot(idx.degree as usize, idx.order.unsigned_abs() as usize);
        Self::phase_factor(idx, azimuth) * self.values[slot]
    }

    fn harmonic_with_elevation_derivative(
        &self,
        idx: BasisIndex,
        azimuth: f64,
    ) -> (Complex64, Complex64) {
        let slot = Self::slot(idx.degree as usize, idx.order.unsigned_abs() as usize);
        let phase = Self::phase_factor(idx, azimuth);
        (phase * self.values[slot], phase * self.d_elevation[slot])
    }
}

/// Associated Legendre function `P(l, u)(x)` without the Condon-Shortley phase.
///
/// Negative orders use `P(l,-u) = (-1)^u (l-u)!/(l+u)! P(l,u)`. Unnormalized values overflow
/// for large degrees; use [`sh_eval`] for the normalized product.
pub fn assoc_legendre(l: u32, u: i32, x: f64) -> Result<f64> {
    if u.unsigned_abs() > l {
        return Err(Error::invalid(format!("order {u} exceeds degree {l}")));
    }
    if !(-1.0..=1.0).contains(&x) {
        return Err(Error::invalid(format!("argument {x} outside [-1, 1]")));
    }
    let m = u.unsigned_abs();
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut pmm = 1.0;
    for k in 1..=m {
        pmm *= (2 * k - 1) as f64 * s;
    }
    let value = if l == m {
        pmm
    } else {
        let mut prev = pmm;
        let mut cur = x * (2 * m + 1) as f64 * pmm;
        for ll in (m + 2)..=l {
            let next =
                (x * (2 * ll - 1) as f64 * cur - (ll + m - 1) as f64 * prev) / (ll - m) as f64;
            prev = cur;
            cur = next;
        }
        cur
    };
    if u >= 0 {
        return Ok(value);
    }
    // (l-m)!/(l+m)!
    let ratio: f64 = ((l - m + 1)..=(l + m)).map(|k| 1.0 / k as f64).product();
    let sign = if m % 2 == 1 { -1.0 } else { 1.0 };
    Ok(sign * ratio * value)
}

/// Complex spherical harmonic `Y(l, u)` at the given direction.
pub fn sh_eval(idx: BasisIndex, aod: &Aod) -> Complex64 {
    LegendreTable::new(idx.degree, aod.elevation).harmonic(idx, aod.azimuth)
}

/// Product quadrature on the sphere: uniform azimuth samples times uniform polar-angle
/// midpoints with Fejer weights (exact for polynomials in `cos el` of degree `< n_elevation`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SphereQuadrature {
    pub n_elevation: usize,
    pub n_azimuth: usize,
}

impl SphereQuadrature {
    /// Smallest accepted resolution per dimension for a basis of maximum degree `lmax`.
    pub fn min_resolution(lmax: u32) -> usize {
        (4 * lmax as usize).max(1)
    }

    pub fn for_degree(lmax: u32) -> Self {
        let n = Self::min_resolution(lmax);
        Self {
            n_elevation: n,
            n_azimuth: n,
        }
    }

    /// Nodes `(elevation, weight)` with weights summing to 2.
    pub fn elevation_nodes(&self) -> Vec<(f64, f64)> {
        let n = self.n_elevation;
        (0..n)
            .map(|k| {
                let theta = (2 * k + 1) as f64 * PI / (2 * n) as f64;
                let series: f64 = (1..=n / 2)
                    .map(|j| (2.0 * j as f64 * theta).cos() / (4 * j * j - 1) as f64)
                    .sum();
                (theta, 2.0 / n as f64 * (1.0 - 2.0 * series))
            })
            .collect()
    }
}

/// Numerical `integral of b b^H` over the unit sphere.
pub fn gram_matrix(basis: &BasisSet, quadrature: &SphereQuadrature) -> Result<DMatrix<Complex64>> {
    let min = SphereQuadrature::min_resolution(basis.max_degree());
    if quadrature.n_elevation < min || quadrature.n_azimuth < min {
        return Err(Error::invalid(format!(
            "quadrature {}x{} below minimum {min} per dimension for degree {}",
            quadrature.n_elevation,
            quadrature.n_azimuth,
            basis.max_degree()
        )));
    }
    let q = basis.len();
    let mut gram = DMatrix::<Complex64>::zeros(q, q);
    let az_weight = 2.0 * PI / quadrature.n_azimuth as f64;
    for (theta, w_el) in quadrature.elevation_nodes() {
        for k in 0..quadrature.n_azimuth {
            let phi = -PI + k as f64 * az_weight;
            let b = basis.evaluate(&Aod::new(theta, phi));
            let w = w_el * az_weight;
            for i in 0..q {
                let bi = b[i] * w;
                for j in 0..q {
                    gram[(i, j)] += bi * b[j].conj();
                }
            }
        }
    }
    Ok(gram)
}
