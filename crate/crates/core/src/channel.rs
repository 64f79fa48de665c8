//! Path gains, the effective array response and pilot synthesis.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ElementLayout, Position, Region, COINCIDENT_EPS};
use crate::harmonics::BasisSet;

pub const SPEED_OF_LIGHT: f64 = 3e8;

/// Physical constants and the position uncertainty region of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub carrier_hz: f64,
    pub speed_of_light: f64,
    pub bandwidth_hz: f64,
    /// Noise power spectral density in dBm/Hz.
    pub noise_psd_dbm_hz: f64,
    /// Transmit power in watts.
    pub tx_power_w: f64,
    pub region: Region,
}

impl ScenarioConfig {
    /// 30 GHz carrier, 1 MHz bandwidth, -173.855 dBm/Hz, region 9<x<14, -3<y<3, 0<z<4.
    pub fn table_defaults() -> Self {
        Self {
            carrier_hz: 30e9,
            speed_of_light: SPEED_OF_LIGHT,
            bandwidth_hz: 1e6,
            noise_psd_dbm_hz: -173.855,
            tx_power_w: 1.0,
            region: Region {
                min: Position::new(9.0, -3.0, 0.0),
                max: Position::new(14.0, 3.0, 4.0),
            },
        }
    }

    pub fn wavelength(&self) -> f64 {
        self.speed_of_light / self.carrier_hz
    }

    /// `sigma_v^2 = 10^((N0 - 30) / 10) * B` in watts.
    pub fn noise_variance(&self) -> f64 {
        10f64.powf((self.noise_psd_dbm_hz - 30.0) / 10.0) * self.bandwidth_hz
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.carrier_hz, self.speed_of_light, self.bandwidth_hz];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(
                "carrier, speed of light and bandwidth must be positive",
            ));
        }
        if !self.noise_psd_dbm_hz.is_finite() {
            return Err(Error::invalid("noise PSD must be finite"));
        }
        if !(self.tx_power_w >= 0.0 && self.tx_power_w.is_finite()) {
            return Err(Error::invalid("transmit power must be non-negative"));
        }
        Region::new(self.region.min, self.region.max)?;
        Ok(())
    }

    /// Transmit power giving `snr = P |beta|^2 / sigma^2` for the given LOS magnitude.
    pub fn power_for_snr(&self, snr_db: f64, los_magnitude: f64) -> f64 {
        if snr_db == f64::INFINITY {
            return f64::INFINITY;
        }
        10f64.powf(snr_db / 10.0) * self.noise_variance() / (los_magnitude * los_magnitude)
    }
}

/// Complex path gain `beta = rho e^{j phi}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathGain {
    pub magnitude: f64,
    pub phase: f64,
}

impl PathGain {
    pub fn value(&self) -> Complex64 {
        Complex64::from_polar(self.magnitude, self.phase)
    }
}

/// Free-space LOS gain `lambda / (4 pi d)`.
pub fn path_gain_los(distance: f64, wavelength: f64, phase: f64) -> Result<PathGain> {
    if !(distance > 0.0) {
        return Err(Error::invalid(format!(
            "LOS distance must be positive, got {distance}"
        )));
    }
    Ok(PathGain {
        magnitude: wavelength / (4.0 * PI * distance),
        phase,
    })
}

/// Single-bounce gain `sqrt(4 pi sigma) lambda / (16 pi^2 d_b d_u)` of a point scatterer.
pub fn path_gain_nlos(
    bs_distance: f64,
    ue_distance: f64,
    rcs: f64,
    wavelength: f64,
    phase: f64,
) -> Result<PathGain> {
    if !(bs_distance > 0.0 && ue_distance > 0.0) {
        return Err(Error::invalid("scatterer distances must be positive"));
    }
    if !(rcs >= 0.0) {
        return Err(Error::invalid(format!(
            "RCS must be non-negative, got {rcs}"
        )));
    }
    Ok(PathGain {
        magnitude: (4.0 * PI * rcs).sqrt() * wavelength
            / (16.0 * PI * PI * bs_distance * ue_distance),
        phase,
    })
}

/// A point scatterer producing one reflected path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub position: Position,
    /// Radar cross-section in m^2.
    pub rcs: f64,
    pub phase: f64,
}

/// Array layout, pattern basis and wavelength: everything `d(p)` depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayModel {
    pub layout: ElementLayout,
    pub basis: BasisSet,
    pub wavelength: f64,
}

impl ArrayModel {
    pub fn new(layout: ElementLayout, basis: BasisSet, wavelength: f64) -> Result<Self> {
        if !(wavelength > 0.0 && wavelength.is_finite()) {
            return Err(Error::invalid(format!(
                "wavelength must be positive, got {wavelength}"
            )));
        }
        Ok(Self {
            layout,
            basis,
            wavelength,
        })
    }

    /// Length `M Q` of the effective array response.
    pub fn dim(&self) -> usize {
        self.layout.len() * self.basis.len()
    }

    pub fn effective_arv(&self, p: &Position) -> Result<EffectiveArv> {
        effective_arv(&self.layout, &self.basis, self.wavelength, p)
    }

    pub fn los_gain(&self, ue: &Position, phase: f64) -> Result<PathGain> {
        path_gain_los((ue - self.layout.center()).norm(), self.wavelength, phase)
    }
}

/// `d(p)`: block `m` (length `Q`) is `[a(p)]_m b(theta_m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveArv {
    data: Vec<Complex64>,
    q: usize,
}

impl EffectiveArv {
    pub fn from_vec(data: Vec<Complex64>, q: usize) -> Result<Self> {
        if q == 0 || !data.len().is_multiple_of(q) {
            return Err(Error::DimensionMismatch {
                expected: q,
                got: data.len(),
            });
        }
        Ok(Self { data, q })
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<Complex64> {
        self.data
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn elements(&self) -> usize {
        self.data.len() / self.q
    }

    pub fn block(&self, m: usize) -> &[Complex64] {
        &self.data[m * self.q..(m + 1) * self.q]
    }

    /// Unconjugated product `d^T w`.
    pub fn dot(&self, w: &[Complex64]) -> Complex64 {
        dot(&self.data, w)
    }
}

pub fn effective_arv(
    layout: &ElementLayout,
    basis: &BasisSet,
    wavelength: f64,
    p: &Position,
) -> Result<EffectiveArv> {
    let k = 2.0 * PI / wavelength;
    let ref_dist = (p - layout.center()).norm();
    if !(ref_dist > COINCIDENT_EPS) {
        return Err(Error::degenerate("point coincides with the array center"));
    }
    let q = basis.len();
    let mut data = vec![Complex64::new(0.0, 0.0); layout.len() * q];
    for (m, (pm, block)) in layout
        .positions()
        .iter()
        .zip(data.chunks_exact_mut(q))
        .enumerate()
    {
        let v = p - pm;
        let dist = v.norm();
        if !(dist > COINCIDENT_EPS) {
            return Err(Error::degenerate(format!(
                "point coincides with element {m}"
            )));
        }
        let am = Complex64::from_polar(1.0, -k * (dist - ref_dist));
        basis.evaluate_direction_into(&v, block)?;
        for b in block.iter_mut() {
            *b *= am;
        }
    }
    Ok(EffectiveArv { data, q })
}

/// Unconjugated inner product `sum a_i b_i`.
pub fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[Complex64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// Per-element basis weights `{e_m}` of one transmission.
///
/// Element `m` radiates the pattern `e_m^T b(theta)`, so `E = blkdiag(e_1^T, ..., e_M^T)` and
/// the composite codeword `E^T f` has blocks `f_m e_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmPrecoder {
    weights: Vec<Vec<Complex64>>,
}

impl EmPrecoder {
    pub fn new(weights: Vec<Vec<Complex64>>) -> Result<Self> {
        let q = weights.first().map_or(0, Vec::len);
        if q == 0 {
            return Err(Error::invalid(
                "EM precoder needs at least one element and basis function",
            ));
        }
        if let Some(bad) = weights.iter().find(|w| w.len() != q) {
            return Err(Error::DimensionMismatch {
                expected: q,
                got: bad.len(),
            });
        }
        Ok(Self { weights })
    }

    pub fn elements(&self) -> usize {
        self.weights.len()
    }

    pub fn q(&self) -> usize {
        self.weights[0].len()
    }

    pub fn weights(&self) -> &[Vec<Complex64>] {
        &self.weights
    }

    /// `E d`: the per-element pattern gains toward the point `d` was evaluated at.
    pub fn apply(&self, d: &EffectiveArv) -> Result<Vec<Complex64>> {
        self.check(d.elements(), d.q())?;
        Ok(self
            .weights
            .iter()
            .enumerate()
            .map(|(m, e)| dot(e, d.block(m)))
            .collect())
    }

    /// `E^T f`: the composite codeword.
    pub fn compose(&self, digital: &[Complex64]) -> Result<Vec<Complex64>> {
        self.check(digital.len(), self.q())?;
        Ok(self
            .weights
            .iter()
            .zip(digital)
            .flat_map(|(e, f)| e.iter().map(move |x| f * x))
            .collect())
    }

    fn check(&self, elements: usize, q: usize) -> Result<()> {
        if elements != self.elements() {
            return Err(Error::DimensionMismatch {
                expected: self.elements(),
                got: elements,
            });
        }
        if q != self.q() {
            return Err(Error::DimensionMismatch {
                expected: self.q(),
                got: q,
            });
        }
        Ok(())
    }
}

/// One propagation path: the point `d(.)` is evaluated at and its complex gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Path {
    pub position: Position,
    pub gain: PathGain,
}

/// LOS path to the UE plus one single-bounce path per scatterer.
#[derive(Debug, Clone, PartialEq)]
pub struct MultipathScene {
    pub ue: Position,
    pub paths: Vec<Path>,
}

impl MultipathScene {
    pub fn new(
        model: &ArrayModel,
        ue: Position,
        los_phase: f64,
        scatterers: &[Scatterer],
    ) -> Result<Self> {
        let bs = model.layout.center();
        let mut paths = vec![Path {
            position: ue,
            gain: model.los_gain(&ue, los_phase)?,
        }];
        for s in scatterers {
            let gain = path_gain_nlos(
                (s.position - bs).norm(),
                (s.position - ue).norm(),
                s.rcs,
                model.wavelength,
                s.phase,
            )?;
            paths.push(Path {
                position: s.position,
                gain,
            });
        }
        Ok(Self { ue, paths })
    }

    pub fn los(&self) -> &PathGain {
        &self.paths[0].gain
    }

    /// Sum of the effective responses weighted by path gain: `sum_i beta_i d(p_i)`.
    pub fn composite_response(&self, model: &ArrayModel) -> Result<Vec<Complex64>> {
        let mut acc = vec![Complex64::new(0.0, 0.0); model.dim()];
        for path in &self.paths {
            if path.gain.magnitude == 0.0 {
                continue;
            }
            let beta = path.gain.value();
            let d = model.effective_arv(&path.position)?;
            for (a, x) in acc.iter_mut().zip(d.as_slice()) {
                *a += beta * x;
            }
        }
        Ok(acc)
    }
}

/// `h_t = sum_i beta_i E_t d(p_i)`.
pub fn channel_vector(
    model: &ArrayModel,
    em: &EmPrecoder,
    scene: &MultipathScene,
) -> Result<Vec<Complex64>> {
    let mut h = vec![Complex64::new(0.0, 0.0); model.layout.len()];
    for path in &scene.paths {
        let beta = path.gain.value();
        let g = em.apply(&model.effective_arv(&path.position)?)?;
        for (acc, x) in h.iter_mut().zip(g) {
            *acc += beta * x;
        }
    }
    Ok(h)
}

/// `y_t = sqrt(P) (sum_i beta_i d(p_i))^T w_t + v_t`.
pub fn received_pilot(
    model: &ArrayModel,
    codeword: &[Complex64],
    scene: &MultipathScene,
    power: f64,
    noise: Complex64,
) -> Result<Complex64> {
    if codeword.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: codeword.len(),
        });
    }
    if power == 0.0 {
        return Ok(noise);
    }
    let response = scene.composite_response(model)?;
    Ok(power.sqrt() * dot(&response, codeword) + noise)
}

/// Scales every RCS by one common factor so that `|beta_0|^2 / sum_i |beta_i|^2` equals the
/// target LOS-to-multipath ratio. An infinite target zeroes all scatterers.
pub fn calibrate_lmr(
    model: &ArrayModel,
    ue: &Position,
    los: &PathGain,
    scatterers: &[Scatterer],
    target_lmr_db: f64,
) -> Result<Vec<Scatterer>> {
    if scatterers.is_empty() || scatterers.iter().all(|s| s.rcs <= 0.0) {
        return Err(Error::invalid(
            "LMR calibration needs a scatterer with positive RCS",
        ));
    }
    if target_lmr_db.is_nan() {
        return Err(Error::invalid("LMR target is NaN"));
    }
    if target_lmr_db == f64::INFINITY {
        return Ok(scatterers
            .iter()
            .map(|s| Scatterer { rcs: 0.0, ..*s })
            .collect());
    }
    let scene = MultipathScene::new(model, *ue, los.phase, scatterers)?;
    let multipath: f64 = scene.paths[1..]
        .iter()
        .map(|p| p.gain.magnitude.powi(2))
        .sum();
    let target = 10f64.powf(target_lmr_db / 10.0);
    // |beta_i|^2 is linear in the RCS
    let scale = los.magnitude.powi(2) / target / multipath;
    Ok(scatterers
        .iter()
        .map(|s| Scatterer {
            rcs: s.rcs * scale,
            ..*s
        })
        .collect())
}

/// Circularly-symmetric complex Gaussian sample with the given variance.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// Phase drawn uniformly on `[0, 2 pi)`.
pub fn random_phase<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>() * 2.0 * PI
}
