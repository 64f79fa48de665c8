//! Two-stage maximum-likelihood positioning.
//!
//! With the unknown complex gain concentrated out, the likelihood reduces to
//! `|x(p)^H y|^2 / ||x(p)||^2` with `x(p)_t = d(p)^T sqrt(rho_t) w_t`. The coarse stage
//! correlates `y` against a dictionary of normalized model vectors on a grid; a finer grid
//! around the winner and a quasi-Newton ascent then remove the quantization error.

use nalgebra::{DMatrix, Matrix3, Vector3};
use num_complex::Complex64;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{norm, ArrayModel};
use crate::error::{Error, Result};
use crate::geometry::{Position, Region};
use crate::precoder::Codebook;

/// Power-weighted codewords `sqrt(rho_t) w_t` as used by the pilot model.
#[derive(Debug, Clone)]
pub struct PilotModel {
    weighted: Vec<Vec<Complex64>>,
    // split real/imaginary copies for the projection kernel
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
    // the same as `dim x N_t` matrices for batched projection
    re_mat: DMatrix<f64>,
    im_mat: DMatrix<f64>,
}

impl PilotModel {
    pub fn new(codebook: &Codebook) -> Self {
        let weighted: Vec<Vec<Complex64>> = (0..codebook.len())
            .map(|t| codebook.weighted_codeword(t))
            .collect();
        let dim = weighted.first().map_or(0, Vec::len);
        let n = weighted.len();
        Self {
            re: weighted
                .iter()
                .map(|w| w.iter().map(|v| v.re).collect())
                .collect(),
            im: weighted
                .iter()
                .map(|w| w.iter().map(|v| v.im).collect())
                .collect(),
            re_mat: DMatrix::from_fn(dim, n, |i, t| weighted[t][i].re),
            im_mat: DMatrix::from_fn(dim, n, |i, t| weighted[t][i].im),
            weighted,
        }
    }

    pub fn len(&self) -> usize {
        self.weighted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weighted.is_empty()
    }

    pub fn codewords(&self) -> &[Vec<Complex64>] {
        &self.weighted
    }

    /// [`PilotModel::project`] for many `d(p)` at once, as real matrix products.
    pub fn project_many(&self, ds: &[Vec<Complex64>]) -> Vec<Vec<Complex64>> {
        if ds.is_empty() {
            return Vec::new();
        }
        let dim = self.re_mat.nrows();
        let d_re = DMatrix::from_fn(ds.len(), dim, |k, i| ds[k][i].re);
        let d_im = DMatrix::from_fn(ds.len(), dim, |k, i| ds[k][i].im);
        let x_re = &d_re * &self.re_mat - &d_im * &self.im_mat;
        let x_im = &d_re * &self.im_mat + &d_im * &self.re_mat;
        (0..ds.len())
            .map(|k| {
                (0..self.len())
                    .map(|t| Complex64::new(x_re[(k, t)], x_im[(k, t)]))
                    .collect()
            })
            .collect()
    }

    /// `x(p)` for a precomputed `d(p)`.
    pub fn project(&self, d: &[Complex64]) -> Vec<Complex64> {
        let d_re: Vec<f64> = d.iter().map(|v| v.re).collect();
        let d_im: Vec<f64> = d.iter().map(|v| v.im).collect();
        self.re
            .iter()
            .zip(&self.im)
            .map(|(w_re, w_im)| {
                let rr = real_dot(&d_re, w_re);
                let ii = real_dot(&d_im, w_im);
                let ri = real_dot(&d_re, w_im);
                let ir = real_dot(&d_im, w_re);
                Complex64::new(rr - ii, ri + ir)
            })
            .collect()
    }
}

fn real_dot(a: &[f64], b: &[f64]) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0f64; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..LANES {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// `x(p)`: the noiseless, unit-gain pilot vector for a UE at `p`.
pub fn model_vector(
    model: &ArrayModel,
    pilots: &PilotModel,
    p: &Position,
) -> Result<Vec<Complex64>> {
    let d = model.effective_arv(p)?;
    Ok(pilots.project(d.as_slice()))
}

/// Least-squares gain `x^H y / ||x||^2`.
pub fn ls_gain(y: &[Complex64], x: &[Complex64]) -> Result<Complex64> {
    if y.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    let energy: f64 = x.iter().map(|v| v.norm_sqr()).sum();
    if !(energy > 0.0) {
        return Err(Error::invalid("model vector is zero"));
    }
    Ok(hermitian_dot(x, y) / energy)
}

fn hermitian_dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Concentrated likelihood at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    /// Set when `x(p)` vanishes; `value` is then 0.
    pub degenerate: bool,
}

/// `|x(p)^H y|^2 / ||x(p)||^2`.
pub fn objective(
    model: &ArrayModel,
    pilots: &PilotModel,
    p: &Position,
    y: &[Complex64],
) -> Result<ObjectiveValue> {
    if y.len() != pilots.len() {
        return Err(Error::DimensionMismatch {
            expected: pilots.len(),
            got: y.len(),
        });
    }
    Ok(concentrated(&model_vector(model, pilots, p)?, y))
}

fn concentrated(x: &[Complex64], y: &[Complex64]) -> ObjectiveValue {
    let energy: f64 = x.iter().map(|v| v.norm_sqr()).sum();
    if !(energy > 0.0) {
        return ObjectiveValue {
            value: 0.0,
            degenerate: true,
        };
    }
    ObjectiveValue {
        value: hermitian_dot(x, y).norm_sqr() / energy,
        degenerate: false,
    }
}

/// Search grid: a region sampled with per-axis steps, endpoints included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub region: Region,
    pub step: Vector3<f64>,
}

impl GridSpec {
    pub fn points(&self) -> Result<Vec<Position>> {
        self.region.lattice_by_step(&self.step)
    }
}

/// Normalized model vectors `x(p_g) / ||x(p_g)||` for every usable grid point.
#[derive(Debug, Clone)]
pub struct DictionaryMatrix {
    points: Vec<Position>,
    columns: Vec<Vec<Complex64>>,
    dropped: usize,
    step: Vector3<f64>,
}

impl DictionaryMatrix {
    pub fn points(&self) -> &[Position] {
        &self.points
    }

    pub fn columns(&self) -> &[Vec<Complex64>] {
        &self.columns
    }

    /// Grid points skipped for degenerate geometry or a vanishing model vector.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `z = X^H y`.
    pub fn correlate(&self, y: &[Complex64]) -> Vec<Complex64> {
        self.columns
            .par_iter()
            .map(|c| hermitian_dot(c, y))
            .collect()
    }

    /// Indices of grid points whose `|z|` is not exceeded by any of their (up to 26)
    /// lattice neighbors, best first; equal values are ordered by grid index.
    pub fn local_maxima(&self, z: &[Complex64]) -> Vec<usize> {
        let mag: Vec<f64> = z.iter().map(|v| v.norm_sqr()).collect();
        let adjacent = |a: &Position, b: &Position| {
            (0..3).all(|i| (a[i] - b[i]).abs() <= self.step[i] * (1.0 + 1e-6))
        };
        let better = |g: usize, h: usize| mag[g] > mag[h] || (mag[g] == mag[h] && g < h);
        let mut peaks: Vec<usize> = (0..self.points.len())
            .filter(|&g| {
                (0..self.points.len())
                    .all(|h| h == g || !adjacent(&self.points[g], &self.points[h]) || better(g, h))
            })
            .collect();
        peaks.sort_by(|&a, &b| mag[b].total_cmp(&mag[a]).then(a.cmp(&b)));
        peaks
    }
}

pub fn build_dictionary(
    model: &ArrayModel,
    pilots: &PilotModel,
    grid: &GridSpec,
) -> Result<DictionaryMatrix> {
    let candidates = grid.points()?;
    if candidates.is_empty() {
        return Err(Error::invalid("search grid is empty"));
    }
    const BATCH: usize = 128;
    let built: Vec<Option<(Position, Vec<Complex64>)>> = candidates
        .par_chunks(BATCH)
        .flat_map_iter(|chunk| {
            let arvs: Vec<Option<Vec<Complex64>>> = chunk
                .iter()
                .map(|p| model.effective_arv(p).ok().map(|d| d.into_vec()))
                .collect();
            let usable: Vec<Vec<Complex64>> = arvs.iter().flatten().cloned().collect();
            let mut xs = pilots.project_many(&usable).into_iter();
            chunk
                .iter()
                .zip(arvs)
                .map(|(p, d)| {
                    d?;
                    let x = xs.next()?;
                    let n = norm(&x);
                    (n > 0.0 && n.is_finite()).then(|| (*p, x.into_iter().map(|v| v / n).collect()))
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let dropped = built.iter().filter(|b| b.is_none()).count();
    let (points, columns) = built.into_iter().flatten().unzip();
    Ok(DictionaryMatrix {
        points,
        columns,
        dropped,
        step: grid.step,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Mid,
    Refined,
}

/// A position estimate from one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub position: Position,
    /// Concentrated likelihood at `position`.
    pub objective: f64,
    pub stage: Stage,
    /// All correlations were equal (e.g. `y = 0`), or the model vector vanished.
    pub degenerate: bool,
    /// The refinement hit a non-finite objective and returned its best iterate.
    pub nonfinite: bool,
}

/// Grid point with the largest `|z|`; ties go to the lowest grid index.
pub fn coarse_search(y: &[Complex64], dict: &DictionaryMatrix) -> Result<Estimate> {
    coarse_search_indexed(y, dict).map(|(_, est)| est)
}

fn coarse_search_indexed(y: &[Complex64], dict: &DictionaryMatrix) -> Result<(usize, Estimate)> {
    if dict.is_empty() {
        return Err(Error::invalid("dictionary is empty"));
    }
    if let Some(c) = dict.columns.first() {
        if c.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: c.len(),
                got: y.len(),
            });
        }
    }
    let z = dict.correlate(y);
    let mut best = 0;
    let mut best_mag = z[0].norm_sqr();
    let mut all_equal = true;
    for (g, zg) in z.iter().enumerate().skip(1) {
        let mag = zg.norm_sqr();
        if mag != best_mag {
            all_equal = false;
        }
        if mag > best_mag {
            best = g;
            best_mag = mag;
        }
    }
    Ok((
        best,
        Estimate {
            position: dict.points[best],
            objective: best_mag,
            stage: Stage::Coarse,
            degenerate: all_equal && dict.len() > 1,
            nonfinite: false,
        },
    ))
}

/// Quasi-Newton refinement settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    pub max_iterations: usize,
    /// Converged once an accepted step is shorter than this (m).
    pub min_step: f64,
    /// Central-difference step is `max(gradient_step, 1e-6 ||p||)`.
    pub gradient_step: f64,
    /// Step used for the initial Hessian estimate.
    pub hessian_step: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            min_step: 1e-6,
            gradient_step: 1e-4,
            hessian_step: 1e-3,
            armijo: 1e-4,
        }
    }
}

/// Range and the two angles (scaled by the starting range, so all three are in meters)
/// about the array center, with the angular axes centered on the starting direction.
/// The weakly curved range direction then lines up with one coordinate axis.
#[derive(Debug, Clone, Copy)]
struct SphericalFrame {
    origin: Position,
    axes: Matrix3<f64>,
    scale: f64,
}

impl SphericalFrame {
    fn new(origin: Position, start: &Position) -> Option<Self> {
        let d = start - origin;
        let scale = d.norm();
        if !(scale > 0.0) || !scale.is_finite() {
            return None;
        }
        let e1 = d / scale;
        let helper = if e1.z.abs() < 0.9 {
            Vector3::z()
        } else {
            Vector3::x()
        };
        let e2 = helper.cross(&e1).normalize();
        let e3 = e1.cross(&e2);
        Some(Self {
            origin,
            axes: Matrix3::from_rows(&[e1.transpose(), e2.transpose(), e3.transpose()]),
            scale,
        })
    }

    fn to_local(self, p: &Position) -> Vector3<f64> {
        let d = self.axes * (p - self.origin);
        let r = d.norm();
        Vector3::new(
            r,
            self.scale * d.y.atan2(d.x),
            self.scale * (d.z / r).clamp(-1.0, 1.0).asin(),
        )
    }

    fn to_cartesian(self, v: &Vector3<f64>) -> Position {
        let (az, el) = (v.y / self.scale, v.z / self.scale);
        let local = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * v.x;
        self.origin + self.axes.transpose() * local
    }
}

/// Normalized objective `|x^H y|^2 / (||x||^2 ||y||^2)` in `[0, 1]`, negated for
/// minimization, as a function of local spherical coordinates.
struct AscentTarget<'a> {
    model: &'a ArrayModel,
    pilots: &'a PilotModel,
    y: &'a [Complex64],
    y_energy: f64,
    bounds: Region,
    frame: SphericalFrame,
    options: RefineOptions,
}

impl AscentTarget<'_> {
    fn position(&self, v: &Vector3<f64>) -> Position {
        self.frame.to_cartesian(v)
    }

    /// Projects local coordinates onto the clamped box.
    fn clamp(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let p = self.position(v);
        let c = self.bounds.clamp(&p);
        if c == p {
            *v
        } else {
            self.frame.to_local(&c)
        }
    }

    fn cost(&self, v: &Vector3<f64>) -> f64 {
        match model_vector(self.model, self.pilots, &self.position(v)) {
            Ok(x) => {
                let val = concentrated(&x, self.y);
                if val.degenerate {
                    f64::NAN
                } else {
                    -val.value / self.y_energy
                }
            }
            Err(_) => f64::NAN,
        }
    }

    fn gradient(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let h = self
            .options
            .gradient_step
            .max(1e-6 * self.position(v).norm());
        Vector3::from_fn(|i, _| {
            let mut e = Vector3::zeros();
            e[i] = h;
            (self.cost(&(v + e)) - self.cost(&(v - e))) / (2.0 * h)
        })
    }

    fn hessian(&self, v: &Vector3<f64>, f0: f64) -> Matrix3<f64> {
        let h = self.options.hessian_step;
        let shifted = |a: usize, sa: f64, b: Option<(usize, f64)>| {
            let mut q = *v;
            q[a] += sa * h;
            if let Some((b, sb)) = b {
                q[b] += sb * h;
            }
            self.cost(&q)
        };
        let mut hess = Matrix3::zeros();
        for i in 0..3 {
            hess[(i, i)] = (shifted(i, 1.0, None) - 2.0 * f0 + shifted(i, -1.0, None)) / (h * h);
            for j in (i + 1)..3 {
                let val = (shifted(i, 1.0, Some((j, 1.0)))
                    - shifted(i, 1.0, Some((j, -1.0)))
                    - shifted(i, -1.0, Some((j, 1.0)))
                    + shifted(i, -1.0, Some((j, -1.0))))
                    / (4.0 * h * h);
                hess[(i, j)] = val;
                hess[(j, i)] = val;
            }
        }
        hess
    }
}

/// Local maximizer of the concentrated likelihood starting at `p0`.
///
/// BFGS on the negated, normalized objective with Armijo backtracking, in range/angle
/// coordinates about the array center. The inverse Hessian starts from a
/// finite-difference Hessian when that is positive definite, else from a scaled identity.
/// Iterates are clamped to `bounds`.
pub fn refine(
    model: &ArrayModel,
    pilots: &PilotModel,
    y: &[Complex64],
    p0: &Position,
    bounds: &Region,
    options: &RefineOptions,
) -> Result<Estimate> {
    if !p0.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("refinement start point is not finite"));
    }
    if y.len() != pilots.len() {
        return Err(Error::DimensionMismatch {
            expected: pilots.len(),
            got: y.len(),
        });
    }
    let y_energy: f64 = y.iter().map(|v| v.norm_sqr()).sum();
    let finish = |p: Position, nonfinite: bool, degenerate: bool| -> Result<Estimate> {
        let value = objective(model, pilots, &p, y)
            .map(|v| v.value)
            .unwrap_or(0.0);
        Ok(Estimate {
            position: p,
            objective: value,
            stage: Stage::Refined,
            degenerate,
            nonfinite,
        })
    };
    let start = bounds.clamp(p0);
    if !(y_energy > 0.0) {
        return finish(start, false, true);
    }
    let Some(frame) = SphericalFrame::new(model.layout.center(), &start) else {
        return finish(start, true, false);
    };
    let target = AscentTarget {
        model,
        pilots,
        y,
        y_energy,
        bounds: *bounds,
        frame,
        options: *options,
    };
    let mut x = frame.to_local(&start);
    let mut fx = target.cost(&x);
    if !fx.is_finite() {
        return finish(start, true, false);
    }
    let mut g = target.gradient(&x);
    let mut inv_h = initial_inverse_hessian(&target.hessian(&x, fx), &g);
    let mut nonfinite = false;

    for _ in 0..options.max_iterations {
        if g.iter().any(|v| !v.is_finite()) {
            nonfinite = true;
            break;
        }
        let mut dir = -(inv_h * g);
        if dir.dot(&g) >= 0.0 {
            inv_h = initial_inverse_hessian(&Matrix3::zeros(), &g);
            dir = -(inv_h * g);
        }
        let slope = dir.dot(&g);
        let mut t = 1.0;
        let mut accepted = None;
        while t * dir.norm() >= options.min_step * 1e-3 {
            let cand = target.clamp(&(x + dir * t));
            let fc = target.cost(&cand);
            if !fc.is_finite() {
                nonfinite = true;
            } else if fc <= fx + options.armijo * t * slope {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            if restart(&target, &x, fx, &g, &mut inv_h) {
                continue;
            }
            break;
        };
        let s = x_new - x;
        let g_new = target.gradient(&x_new);
        let yk = g_new - g;
        let sy = s.dot(&yk);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let ident = Matrix3::identity();
            inv_h = (ident - s * yk.transpose() * rho) * inv_h * (ident - yk * s.transpose() * rho)
                + s * s.transpose() * rho;
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        if s.norm() < options.min_step && !restart(&target, &x, fx, &g, &mut inv_h) {
            break;
        }
    }
    finish(bounds.clamp(&target.position(&x)), nonfinite, false)
}

/// Replaces the inverse-Hessian estimate with a fresh finite-difference one when the
/// resulting Newton step is still longer than the stopping threshold. Along the weakly
/// curved range direction the secant updates can stall long before the maximum.
fn restart(
    target: &AscentTarget<'_>,
    x: &Vector3<f64>,
    fx: f64,
    g: &Vector3<f64>,
    inv_h: &mut Matrix3<f64>,
) -> bool {
    let fresh = initial_inverse_hessian(&target.hessian(x, fx), g);
    let step = fresh * g;
    let moves =
        step.norm() >= target.options.min_step && (*inv_h - fresh).norm() > 1e-12 * fresh.norm();
    if moves {
        *inv_h = fresh;
    }
    moves
}

fn initial_inverse_hessian(hess: &Matrix3<f64>, g: &Vector3<f64>) -> Matrix3<f64> {
    let sym = (hess + hess.transpose()) * 0.5;
    if let Some(ch) = sym.cholesky() {
        let inv = ch.inverse();
        if inv.iter().all(|v| v.is_finite()) {
            return inv;
        }
    }
    // first step of length at most 1 cm
    let gn = g.norm();
    Matrix3::identity() * if gn > 0.0 { 1e-2 / gn } else { 1.0 }
}

/// Grid steps and refinement settings of the two-stage search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizerConfig {
    pub coarse_step: Vector3<f64>,
    pub mid_step: Vector3<f64>,
    /// Edge length of the cube searched by the mid stage, centered on the coarse estimate.
    pub mid_extent: f64,
    /// Number of coarse local maxima (best first) carried through the mid and refine
    /// stages; the branch with the largest refined likelihood wins. The reported coarse
    /// estimate is always the global grid argmax.
    pub coarse_candidates: usize,
    pub refine: RefineOptions,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            coarse_step: Vector3::repeat(1.0),
            mid_step: Vector3::repeat(0.1),
            mid_extent: 1.0,
            coarse_candidates: 3,
            refine: RefineOptions::default(),
        }
    }
}

/// Results of all three stages for one observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoStageEstimate {
    pub coarse: Estimate,
    pub mid: Estimate,
    pub refined: Estimate,
}

impl TwoStageEstimate {
    pub fn stage(&self, stage: Stage) -> &Estimate {
        match stage {
            Stage::Coarse => &self.coarse,
            Stage::Mid => &self.mid,
            Stage::Refined => &self.refined,
        }
    }
}

/// Coarse dictionary built once per codebook and reused for every observation. Mid-stage
/// dictionaries are built the first time a coarse grid point wins and kept afterwards.
#[derive(Debug)]
pub struct Localizer {
    model: ArrayModel,
    pilots: PilotModel,
    region: Region,
    bounds: Region,
    dictionary: DictionaryMatrix,
    mid_cache: Vec<OnceLock<Option<DictionaryMatrix>>>,
    config: LocalizerConfig,
}

impl Localizer {
    pub fn new(
        model: ArrayModel,
        codebook: &Codebook,
        region: Region,
        config: LocalizerConfig,
    ) -> Result<Self> {
        if codebook.dim() != model.dim() {
            return Err(Error::DimensionMismatch {
                expected: model.dim(),
                got: codebook.dim(),
            });
        }
        if config.coarse_candidates == 0 {
            return Err(Error::invalid("at least one coarse candidate is required"));
        }
        if !(config.mid_extent > 0.0) {
            return Err(Error::invalid("mid-stage extent must be positive"));
        }
        let pilots = PilotModel::new(codebook);
        let dictionary = build_dictionary(
            &model,
            &pilots,
            &GridSpec {
                region,
                step: config.coarse_step,
            },
        )?;
        if dictionary.is_empty() {
            return Err(Error::invalid("every coarse grid point is degenerate"));
        }
        Ok(Self {
            bounds: region.inflate(&config.coarse_step),
            mid_cache: (0..dictionary.len()).map(|_| OnceLock::new()).collect(),
            model,
            pilots,
            region,
            dictionary,
            config,
        })
    }

    pub fn model(&self) -> &ArrayModel {
        &self.model
    }

    pub fn pilots(&self) -> &PilotModel {
        &self.pilots
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    /// Search region inflated by one coarse cell; refinement never leaves it.
    pub fn bounds(&self) -> &Region {
        &self.bounds
    }

    pub fn dictionary(&self) -> &DictionaryMatrix {
        &self.dictionary
    }

    pub fn config(&self) -> &LocalizerConfig {
        &self.config
    }

    pub fn coarse(&self, y: &[Complex64]) -> Result<Estimate> {
        coarse_search(y, &self.dictionary)
    }

    fn mid_dictionary(&self, center: &Position) -> Result<DictionaryMatrix> {
        let half = Vector3::repeat(self.config.mid_extent / 2.0);
        let cube = Region::new(center - half, center + half)?;
        let cube = cube.intersect(&self.bounds).unwrap_or(cube);
        let dict = build_dictionary(
            &self.model,
            &self.pilots,
            &GridSpec {
                region: cube,
                step: self.config.mid_step,
            },
        )?;
        if dict.is_empty() {
            return Err(Error::degenerate("mid-stage grid has no usable points"));
        }
        Ok(dict)
    }

    fn mid_search(y: &[Complex64], dict: &DictionaryMatrix) -> Result<Estimate> {
        let mut est = coarse_search(y, dict)?;
        est.stage = Stage::Mid;
        Ok(est)
    }

    /// Re-runs the grid search at the mid step inside the cube around `center`.
    pub fn mid(&self, y: &[Complex64], center: &Position) -> Result<Estimate> {
        Self::mid_search(y, &self.mid_dictionary(center)?)
    }

    pub fn refine(&self, y: &[Complex64], start: &Position) -> Result<Estimate> {
        refine(
            &self.model,
            &self.pilots,
            y,
            start,
            &self.bounds,
            &self.config.refine,
        )
    }

    /// Coarse grid, then the mid grid around it, then quasi-Newton refinement.
    pub fn localize(&self, y: &[Complex64]) -> Result<TwoStageEstimate> {
        let (best, coarse) = coarse_search_indexed(y, &self.dictionary)?;
        let mut candidates = vec![best];
        if self.config.coarse_candidates > 1 && !coarse.degenerate {
            let z = self.dictionary.correlate(y);
            let peaks = self.dictionary.local_maxima(&z);
            candidates.extend(
                peaks
                    .into_iter()
                    .filter(|&g| g != best)
                    .take(self.config.coarse_candidates - 1),
            );
        }
        let mut winner: Option<(Estimate, Estimate)> = None;
        for index in candidates {
            let center = self.dictionary.points[index];
            let cached = self.mid_cache[index].get_or_init(|| self.mid_dictionary(&center).ok());
            let mid = match cached {
                Some(dict) => Self::mid_search(y, dict)?,
                None => self.mid(y, &center)?,
            };
            let refined = self.refine(y, &mid.position)?;
            if winner
                .as_ref()
                .is_none_or(|(_, r)| refined.objective > r.objective)
            {
                winner = Some((mid, refined));
            }
        }
        let (mid, mut refined) = winner.expect("at least one coarse candidate");
        refined.degenerate |= coarse.degenerate;
        Ok(TwoStageEstimate {
            coarse,
            mid,
            refined,
        })
    }
}

/// One-shot two-stage localization; builds the coarse dictionary on the fly.
pub fn localize_two_stage(
    model: &ArrayModel,
    codebook: &Codebook,
    region: &Region,
    y: &[Complex64],
    config: &LocalizerConfig,
) -> Result<TwoStageEstimate> {
    Localizer::new(model.clone(), codebook, *region, *config)?.localize(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assert_close;
    use crate::channel::complex_gaussian;
    use crate::fim::DerivativeMethod;
    use crate::geometry::build_upa;
    use crate::harmonics::BasisSet;
    use crate::precoder::build_codebook;
    use rand::SeedableRng;

    fn fixture() -> (ArrayModel, Codebook, Region) {
        let region =
            Region::new(Position::new(9.0, -3.0, 0.0), Position::new(14.0, 3.0, 4.0)).unwrap();
        let layout = build_upa(Position::new(0.0, 0.0, 5.0), 6, 6, 0.005).unwrap();
        let model = ArrayModel::new(layout, BasisSet::new(4).unwrap(), 0.01).unwrap();
        let cb =
            build_codebook(&model, &region, [2, 2, 1], None, DerivativeMethod::Analytic).unwrap();
        (model, cb, region)
    }

    fn near_fixture() -> (ArrayModel, Codebook, Region, LocalizerConfig) {
        let region =
            Region::new(Position::new(0.8, -0.3, 0.0), Position::new(1.4, 0.3, 0.4)).unwrap();
        let layout = build_upa(Position::new(0.0, 0.0, 0.2), 10, 10, 0.005).unwrap();
        let model = ArrayModel::new(layout, BasisSet::new(4).unwrap(), 0.01).unwrap();
        let cb =
            build_codebook(&model, &region, [2, 2, 2], None, DerivativeMethod::Analytic).unwrap();
        let config = LocalizerConfig {
            coarse_step: Vector3::repeat(0.2),
            mid_step: Vector3::repeat(0.02),
            mid_extent: 0.2,
            ..LocalizerConfig::default()
        };
        (model, cb, region, config)
    }

    #[test]
    fn ls_gain_cases() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x: Vec<Complex64> = (0..6).map(|_| complex_gaussian(&mut rng, 1.0)).collect();
        let zeta = Complex64::new(0.3, -1.2);
        let y: Vec<Complex64> = x.iter().map(|v| v * zeta).collect();
        assert!((ls_gain(&y, &x).unwrap() - zeta).norm() < 1e-14);

        let orth = vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)];
        let yo = vec![Complex64::new(0.0, 0.0), Complex64::new(2.0, 1.0)];
        assert_eq!(ls_gain(&yo, &orth).unwrap(), Complex64::new(0.0, 0.0));

        let r: Vec<Complex64> = (0..6).map(|_| complex_gaussian(&mut rng, 1.0)).collect();
        let mut num = Complex64::new(0.0, 0.0);
        let mut den = 0.0;
        for k in 0..6 {
            num += x[k].conj() * r[k];
            den += x[k].re * x[k].re + x[k].im * x[k].im;
        }
        assert!((ls_gain(&r, &x).unwrap() - num / den).norm() < 1e-14);
        assert!(ls_gain(&r, &[Complex64::new(0.0, 0.0); 6]).is_err());
    }

    #[test]
    fn objective_properties() {
        let (model, cb, _) = fixture();
        let pilots = PilotModel::new(&cb);
        let truth = Position::new(10.4, 0.7, 2.2);
        let y = model_vector(&model, &pilots, &truth).unwrap();
        let energy: f64 = y.iter().map(|v| v.norm_sqr()).sum();
        let at_truth = objective(&model, &pilots, &truth, &y).unwrap();
        assert!((at_truth.value - energy).abs() < 1e-12 * energy);

        let c = Complex64::new(-2.0, 0.5);
        let scaled: Vec<Complex64> = y.iter().map(|v| v * c).collect();
        let other = Position::new(12.0, -1.0, 1.0);
        let a = objective(&model, &pilots, &other, &y).unwrap().value;
        let b = objective(&model, &pilots, &other, &scaled).unwrap().value;
        assert!((b - c.norm_sqr() * a).abs() < 1e-12 * b);

        // ||y - zeta x||^2 at the LS gain equals ||y||^2 - objective
        let x = model_vector(&model, &pilots, &other).unwrap();
        let zeta = ls_gain(&y, &x).unwrap();
        let residual: f64 = y
            .iter()
            .zip(&x)
            .map(|(yi, xi)| (yi - zeta * xi).norm_sqr())
            .sum();
        assert!((residual - (energy - a)).abs() < 1e-10 * energy);
    }

    #[test]
    fn zero_weight_codeword_contributes_nothing() {
        let (model, cb, _) = fixture();
        let mut w = vec![0.0; cb.len()];
        w[0] = 0.5;
        w[1] = 0.5;
        let cb = cb.with_weights(w).unwrap();
        let x = model_vector(
            &model,
            &PilotModel::new(&cb),
            &Position::new(11.0, 0.0, 1.0),
        )
        .unwrap();
        assert!(x[2..].iter().all(|v| *v == Complex64::new(0.0, 0.0)));
        assert!(x[0].norm() > 0.0);
    }

    #[test]
    fn batched_projection_matches_single() {
        let (model, cb, _) = fixture();
        let pilots = PilotModel::new(&cb);
        let pts = [
            Position::new(10.0, 0.0, 1.0),
            Position::new(13.2, -2.5, 3.9),
        ];
        let ds: Vec<Vec<Complex64>> = pts
            .iter()
            .map(|p| model.effective_arv(p).unwrap().into_vec())
            .collect();
        let many = pilots.project_many(&ds);
        for (d, x) in ds.iter().zip(&many) {
            for (a, b) in pilots.project(d).iter().zip(x) {
                assert!((a - b).norm() < 1e-12 * a.norm().max(1.0));
            }
        }
        assert!(pilots.project_many(&[]).is_empty());
    }

    #[test]
    fn dictionary_shape() {
        let (model, cb, region) = fixture();
        let pilots = PilotModel::new(&cb);
        let grid = GridSpec {
            region,
            step: Vector3::repeat(1.0),
        };
        let dict = build_dictionary(&model, &pilots, &grid).unwrap();
        assert_eq!(dict.len(), 210);
        assert_eq!(dict.dropped(), 0);
        for c in dict.columns() {
            assert_close!(norm(c), 1.0, 1e-12);
        }
        let again = build_dictionary(&model, &pilots, &grid).unwrap();
        assert_eq!(again.columns(), dict.columns());
    }

    #[test]
    fn coarse_search_on_grid_and_degenerate() {
        let (model, cb, region) = fixture();
        let pilots = PilotModel::new(&cb);
        let grid = GridSpec {
            region,
            step: Vector3::repeat(1.0),
        };
        let dict = build_dictionary(&model, &pilots, &grid).unwrap();
        let truth = Position::new(11.0, 1.0, 2.0);
        let y = model_vector(&model, &pilots, &truth).unwrap();
        let est = coarse_search(&y, &dict).unwrap();
        assert_eq!(est.position, truth);
        assert!(!est.degenerate);
        for p in dict.points() {
            assert!(
                objective(&model, &pilots, p, &y).unwrap().value <= est.objective * (1.0 + 1e-12)
            );
        }
        let zero = vec![Complex64::new(0.0, 0.0); y.len()];
        let flat = coarse_search(&zero, &dict).unwrap();
        assert!(flat.degenerate);
        assert_eq!(flat.position, dict.points()[0]);
    }

    #[test]
    fn refine_contract() {
        let (model, cb, region, config) = near_fixture();
        let pilots = PilotModel::new(&cb);
        let bounds = region.inflate(&config.coarse_step);
        let truth = Position::new(1.037, 0.083, 0.141);
        let y = model_vector(&model, &pilots, &truth).unwrap();
        let opts = RefineOptions::default();

        let stay = refine(&model, &pilots, &y, &truth, &bounds, &opts).unwrap();
        assert!(
            (stay.position - truth).norm() < 1e-6,
            "stay {}",
            (stay.position - truth).norm()
        );

        let start = truth + Vector3::new(0.1, -0.2, 0.2).normalize() * 0.03;
        let start_value = objective(&model, &pilots, &start, &y).unwrap().value;
        let est = refine(&model, &pilots, &y, &start, &bounds, &opts).unwrap();
        assert!(est.objective >= start_value);
        assert!(
            (est.position - truth).norm() < 1e-3,
            "error {}",
            (est.position - truth).norm()
        );
    }

    #[test]
    fn two_stage_phase_invariance() {
        let (model, cb, region, config) = near_fixture();
        let loc = Localizer::new(model.clone(), &cb, region, config).unwrap();
        let truth = Position::new(1.22, -0.06, 0.27);
        let y = model_vector(&model, loc.pilots(), &truth).unwrap();
        let a = loc.localize(&y).unwrap();
        let c = Complex64::from_polar(3.7, 2.1);
        let yc: Vec<Complex64> = y.iter().map(|v| v * c).collect();
        let b = loc.localize(&yc).unwrap();
        // the mid grid can hold near-ties along range, so only the end points are pinned
        assert_eq!(a.coarse.position, b.coarse.position);
        assert!((a.refined.position - b.refined.position).norm() < 1e-6);
        assert!(
            (a.refined.position - truth).norm() < 1e-3,
            "{:?} {:?} {:?}",
            a.coarse.position,
            a.mid.position,
            a.refined.position - truth
        );
    }
}
