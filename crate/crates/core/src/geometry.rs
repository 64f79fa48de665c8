//! Uniform planar array layout and near-field array response.
//!
//! The array lies in the plane `x = center.x` with its broadside along `+x`.
//! Rows run along `z`, columns along `y`, and element `m = row * cols + col`
//! (row-major). Row 0 is the lowest `z`, column 0 the lowest `y`.

use std::f64::consts::PI;

use nalgebra::Vector3;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the global Cartesian frame, in meters.
pub type Position = Vector3<f64>;

/// Distances below this are treated as coincident points.
pub(crate) const COINCIDENT_EPS: f64 = 1e-12;

/// Element positions of a uniform planar array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementLayout {
    center: Position,
    positions: Vec<Position>,
    rows: usize,
    cols: usize,
    spacing: f64,
}

impl ElementLayout {
    pub fn center(&self) -> Position {
        self.center
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Number of elements `M`.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Builds a `rows x cols` UPA centered at `center` with the given element spacing.
pub fn build_upa(
    center: Position,
    rows: usize,
    cols: usize,
    spacing: f64,
) -> Result<ElementLayout> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(format!(
            "array dimensions must be positive, got {rows}x{cols}"
        )));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::invalid(format!(
            "element spacing must be positive, got {spacing}"
        )));
    }
    if !center.iter().all(|c| c.is_finite()) {
        return Err(Error::invalid("array center must be finite"));
    }
    let row_mid = (rows as f64 - 1.0) / 2.0;
    let col_mid = (cols as f64 - 1.0) / 2.0;
    let mut positions = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let dz = (r as f64 - row_mid) * spacing;
            let dy = (c as f64 - col_mid) * spacing;
            positions.push(center + Vector3::new(0.0, dy, dz));
        }
    }
    Ok(ElementLayout {
        center,
        positions,
        rows,
        cols,
        spacing,
    })
}

/// Two-dimensional angle of departure: polar angle from `+z` and azimuth in the xy-plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aod {
    /// Polar angle in `[0, pi]`.
    pub elevation: f64,
    /// Azimuth in `[-pi, pi)`.
    pub azimuth: f64,
}

impl Aod {
    pub fn new(elevation: f64, azimuth: f64) -> Self {
        Self { elevation, azimuth }
    }

    /// Angles of a nonzero direction vector.
    pub fn from_direction(v: &Vector3<f64>) -> Result<Self> {
        let r = v.norm();
        if !(r > COINCIDENT_EPS) {
            return Err(Error::degenerate("zero-length direction"));
        }
        let elevation = (v.z / r).clamp(-1.0, 1.0).acos();
        let mut azimuth = v.y.atan2(v.x);
        if azimuth >= PI {
            azimuth -= 2.0 * PI;
        }
        Ok(Self { elevation, azimuth })
    }
}

/// Near-field array response `a(p)`, phase-referenced to the array center.
pub fn nearfield_arv(
    layout: &ElementLayout,
    p: &Position,
    wavelength: f64,
) -> Result<Vec<Complex64>> {
    let k = 2.0 * PI / wavelength;
    let ref_dist = (p - layout.center).norm();
    if ref_dist <= COINCIDENT_EPS {
        return Err(Error::degenerate("point coincides with the array center"));
    }
    layout
        .positions
        .iter()
        .enumerate()
        .map(|(m, pm)| {
            let dist = (p - pm).norm();
            if dist <= COINCIDENT_EPS {
                return Err(Error::degenerate(format!(
                    "point coincides with element {m}"
                )));
            }
            Ok(Complex64::from_polar(1.0, -k * (dist - ref_dist)))
        })
        .collect()
}

/// Angle of departure from element `m` toward `p`.
pub fn element_aod(layout: &ElementLayout, m: usize, p: &Position) -> Result<Aod> {
    let pm = layout.positions.get(m).ok_or_else(|| {
        Error::invalid(format!("element index {m} out of range ({})", layout.len()))
    })?;
    Aod::from_direction(&(p - pm))
        .map_err(|_| Error::degenerate(format!("point coincides with element {m}")))
}

/// Axis-aligned box, used for the position uncertainty region and search grids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub min: Position,
    pub max: Position,
}

impl Region {
    pub fn new(min: Position, max: Position) -> Result<Self> {
        let finite = min.iter().chain(max.iter()).all(|v| v.is_finite());
        if !finite || (0..3).any(|i| min[i] > max[i]) {
            return Err(Error::invalid(format!(
                "empty region: min {:?} max {:?}",
                min.as_slice(),
                max.as_slice()
            )));
        }
        Ok(Self { min, max })
    }

    pub fn center(&self) -> Position {
        (self.min + self.max) / 2.0
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn contains(&self, p: &Position) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Region grown by `margin[i]` on both sides of axis `i`.
    pub fn inflate(&self, margin: &Vector3<f64>) -> Self {
        Self {
            min: self.min - margin,
            max: self.max + margin,
        }
    }

    pub fn intersect(&self, other: &Region) -> Option<Region> {
        let min = self.min.sup(&other.min);
        let max = self.max.inf(&other.max);
        Region::new(min, max).ok()
    }

    pub fn clamp(&self, p: &Position) -> Position {
        p.sup(&self.min).inf(&self.max)
    }

    /// Uniform sample inside the box.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Position {
        let u = Vector3::new(
            rng.random::<f64>(),
            rng.random::<f64>(),
            rng.random::<f64>(),
        );
        self.min + self.extent().component_mul(&u)
    }

    /// Lattice with the given step per axis, endpoints included: coordinate `min + k * step`
    /// for every `k` with `k * step <= extent` (within 1e-9 relative). Ordered x-major.
    pub fn lattice_by_step(&self, step: &Vector3<f64>) -> Result<Vec<Position>> {
        let mut axes: [Vec<f64>; 3] = Default::default();
        for i in 0..3 {
            if !(step[i] > 0.0 && step[i].is_finite()) {
                return Err(Error::invalid(format!(
                    "grid step must be positive, got {}",
                    step[i]
                )));
            }
            let extent = self.max[i] - self.min[i];
            let n = (extent / step[i] * (1.0 + 1e-9) + 1e-9).floor() as usize + 1;
            axes[i] = (0..n).map(|k| self.min[i] + k as f64 * step[i]).collect();
        }
        Ok(product(&axes))
    }

    /// `counts[i]` points per axis with endpoints included; a single point sits at the center.
    pub fn lattice_inclusive(&self, counts: [usize; 3]) -> Result<Vec<Position>> {
        self.lattice_counts(counts, |lo, hi, k, n| {
            if n == 1 {
                (lo + hi) / 2.0
            } else {
                lo + (hi - lo) * k as f64 / (n - 1) as f64
            }
        })
    }

    /// `counts[i]` points per axis at the centers of equal cells.
    pub fn lattice_cell_centers(&self, counts: [usize; 3]) -> Result<Vec<Position>> {
        self.lattice_counts(counts, |lo, hi, k, n| {
            lo + (hi - lo) * (k as f64 + 0.5) / n as f64
        })
    }

    fn lattice_counts(
        &self,
        counts: [usize; 3],
        place: impl Fn(f64, f64, usize, usize) -> f64,
    ) -> Result<Vec<Position>> {
        if counts.contains(&0) {
            return Err(Error::invalid(format!(
                "lattice counts must be positive, got {counts:?}"
            )));
        }
        let axes: [Vec<f64>; 3] = std::array::from_fn(|i| {
            (0..counts[i])
                .map(|k| place(self.min[i], self.max[i], k, counts[i]))
                .collect()
        });
        Ok(product(&axes))
    }
}

fn product(axes: &[Vec<f64>; 3]) -> Vec<Position> {
    let mut out = Vec::with_capacity(axes.iter().map(Vec::len).product());
    for &x in &axes[0] {
        for &y in &axes[1] {
            for &z in &axes[2] {
                out.push(Position::new(x, y, z));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assert_close;

    const LAMBDA: f64 = 0.01;

    #[test]
    fn table_sized_array_has_2500_elements() {
        let layout = build_upa(Position::new(0.0, 0.0, 5.0), 50, 50, LAMBDA / 2.0).unwrap();
        assert_eq!(layout.len(), 2500);
        let centroid = layout.positions().iter().sum::<Position>() / layout.len() as f64;
        assert!((centroid - layout.center()).norm() < 1e-12 * 5.0);
    }

    #[test]
    fn single_element_sits_at_center() {
        let c = Position::new(1.0, -2.0, 3.0);
        let layout = build_upa(c, 1, 1, 0.3).unwrap();
        assert_eq!(layout.positions(), &[c]);
    }

    #[test]
    fn two_by_two_spacing_and_centroid() {
        let c = Position::new(0.0, 0.0, 5.0);
        let layout = build_upa(c, 2, 2, 0.005).unwrap();
        let p = layout.positions();
        assert_close!((p[0] - p[1]).norm(), 0.005, 1e-15);
        assert_close!((p[0] - p[2]).norm(), 0.005, 1e-15);
        let centroid = p.iter().sum::<Position>() / 4.0;
        assert!((centroid - c).norm() < 1e-12);
        // planar at x = center.x, rows along z
        assert!(p.iter().all(|q| q.x == 0.0));
        assert!(p[2].z > p[0].z && p[1].y > p[0].y);
    }

    #[test]
    fn rejects_bad_dimensions() {
        let c = Position::zeros();
        assert!(matches!(
            build_upa(c, 0, 3, 0.1),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            build_upa(c, 3, 0, 0.1),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            build_upa(c, 2, 2, 0.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            build_upa(c, 2, 2, -1.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn arv_matches_scalar_distance_oracle() {
        let layout = build_upa(Position::new(0.0, 0.0, 5.0), 2, 2, LAMBDA / 2.0).unwrap();
        let p = Position::new(10.35, 1.67, 0.0);
        let a = nearfield_arv(&layout, &p, LAMBDA).unwrap();
        let dist =
            |q: &Position| ((p.x - q.x).powi(2) + (p.y - q.y).powi(2) + (p.z - q.z).powi(2)).sqrt();
        let d0 = dist(&layout.center());
        for (m, q) in layout.positions().iter().enumerate() {
            let phase = -2.0 * PI / LAMBDA * (dist(q) - d0);
            assert_close!(a[m].re, phase.cos(), 1e-12);
            assert_close!(a[m].im, phase.sin(), 1e-12);
            assert_close!(a[m].norm(), 1.0, 1e-14);
        }
    }

    #[test]
    fn equidistant_element_has_unit_entry() {
        let layout = build_upa(Position::new(0.0, 0.0, 5.0), 1, 1, 0.1).unwrap();
        let a = nearfield_arv(&layout, &Position::new(3.0, 1.0, 2.0), LAMBDA).unwrap();
        assert_close!(a[0].re, 1.0, 1e-15);
        assert_close!(a[0].im, 0.0, 1e-15);

        // the plane y = e1.y / 2 is equidistant from element 1 and the center
        let layout = build_upa(Position::zeros(), 1, 2, 0.2).unwrap();
        let e1 = layout.positions()[1];
        let p = Position::new(3.0, e1.y / 2.0, 0.0);
        let a = nearfield_arv(&layout, &p, LAMBDA).unwrap();
        assert_close!(a[1].re, 1.0, 1e-9);
        assert_close!(a[1].im, 0.0, 1e-9);
    }

    #[test]
    fn coincident_point_is_degenerate() {
        let layout = build_upa(Position::zeros(), 2, 2, 0.1).unwrap();
        let e = layout.positions()[3];
        assert!(matches!(
            nearfield_arv(&layout, &e, LAMBDA),
            Err(Error::DegenerateGeometry(_))
        ));
        assert!(matches!(
            nearfield_arv(&layout, &Position::zeros(), LAMBDA),
            Err(Error::DegenerateGeometry(_))
        ));
        assert!(matches!(
            element_aod(&layout, 3, &e),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn aod_conventions() {
        let layout = build_upa(Position::new(0.0, 0.0, 5.0), 1, 1, 0.1).unwrap();
        let e = layout.positions()[0];
        let up = element_aod(&layout, 0, &(e + Vector3::new(0.0, 0.0, 2.0))).unwrap();
        assert_close!(up.elevation, 0.0, 1e-15);
        let flat = element_aod(&layout, 0, &(e + Vector3::new(3.0, -1.0, 0.0))).unwrap();
        assert_close!(flat.elevation, PI / 2.0, 1e-15);
        let diag =
            element_aod(&layout, 0, &(e + Vector3::new(1.0, 1.0, 0.0) / 2f64.sqrt())).unwrap();
        assert_close!(diag.azimuth, PI / 4.0, 1e-15);
        let back = Aod::from_direction(&Vector3::new(-1.0, 0.0, 0.0)).unwrap();
        assert_close!(back.azimuth, -PI, 0.0);
    }

    #[test]
    fn region_lattices() {
        let region =
            Region::new(Position::new(9.0, -3.0, 0.0), Position::new(14.0, 3.0, 4.0)).unwrap();
        let grid = region.lattice_by_step(&Vector3::repeat(1.0)).unwrap();
        assert_eq!(grid.len(), 6 * 7 * 5);
        assert_eq!(grid[0], region.min);
        assert_eq!(*grid.last().unwrap(), region.max);
        let cells = region.lattice_cell_centers([2, 2, 2]).unwrap();
        assert_eq!(cells.len(), 8);
        assert!(cells.iter().all(|p| region.contains(p)));
        assert_eq!(cells[0], Position::new(10.25, -1.5, 1.0));
        let one = region.lattice_inclusive([1, 1, 1]).unwrap();
        assert_eq!(one, vec![region.center()]);
        assert!(Region::new(Position::new(1.0, 0.0, 0.0), Position::zeros()).is_err());
    }
}
