use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{factorize, optimal_codewords, Codeword, PrecoderFactorization};
use crate::channel::ArrayModel;
use crate::error::{Error, Result};
use crate::fim::DerivativeMethod;
use crate::geometry::{Position, Region};

const FORMAT_TAG: &str = "nfra-codebook";
const FORMAT_VERSION: u32 = 1;

/// Codewords with their power fractions and the candidate points they were designed for.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    q: usize,
    codewords: Vec<Codeword>,
    weights: Vec<f64>,
    candidate_points: Vec<Position>,
}

impl Codebook {
    pub fn new(
        q: usize,
        codewords: Vec<Codeword>,
        weights: Vec<f64>,
        candidate_points: Vec<Position>,
    ) -> Result<Self> {
        if codewords.is_empty() {
            return Err(Error::invalid("codebook needs at least one codeword"));
        }
        if weights.len() != codewords.len() {
            return Err(Error::DimensionMismatch {
                expected: codewords.len(),
                got: weights.len(),
            });
        }
        let dim = codewords[0].w.len();
        if q == 0 || !dim.is_multiple_of(q) {
            return Err(Error::DimensionMismatch {
                expected: q,
                got: dim,
            });
        }
        if let Some(c) = codewords.iter().find(|c| c.w.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: c.w.len(),
            });
        }
        check_simplex(&weights)?;
        Ok(Self {
            q,
            codewords,
            weights,
            candidate_points,
        })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Number of transmissions `N_t`.
    pub fn len(&self) -> usize {
        self.codewords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codewords.is_empty()
    }

    /// Length `M Q` of each codeword.
    pub fn dim(&self) -> usize {
        self.codewords[0].w.len()
    }

    pub fn codewords(&self) -> &[Codeword] {
        &self.codewords
    }

    pub fn vectors(&self) -> Vec<&[Complex64]> {
        self.codewords.iter().map(|c| c.w.as_slice()).collect()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn candidate_points(&self) -> &[Position] {
        &self.candidate_points
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(
            self.q,
            self.codewords.clone(),
            weights,
            self.candidate_points.clone(),
        )
    }

    /// Keeps the codewords selected by `keep`, with uniform weights.
    pub fn filter(&self, keep: impl Fn(&Codeword) -> bool) -> Result<Self> {
        let codewords: Vec<Codeword> = self.codewords.iter().filter(|c| keep(c)).cloned().collect();
        let n = codewords.len();
        Self::new(
            self.q,
            codewords,
            vec![1.0 / n as f64; n],
            self.candidate_points.clone(),
        )
    }

    /// Power-weighted codewords `sqrt(rho_t) w_t`.
    pub fn weighted_codeword(&self, t: usize) -> Vec<Complex64> {
        let s = self.weights[t].sqrt();
        self.codewords[t].w.iter().map(|x| x * s).collect()
    }

    /// Digital/EM precoders for every transmission, with zero arbitrary phases.
    pub fn factorizations(&self) -> Result<Vec<PrecoderFactorization>> {
        self.codewords
            .iter()
            .zip(&self.weights)
            .map(|(c, rho)| factorize(&c.w, self.q, *rho, None))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&CodebookFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CodebookFile = serde_json::from_str(text)?;
        if file.format != FORMAT_TAG || file.version != FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported codebook format {:?} version {}",
                file.format, file.version
            )));
        }
        let (codewords, weights) = file
            .codewords
            .into_iter()
            .map(|c| {
                (
                    Codeword {
                        w: c.w,
                        source_point: Position::from(c.source_point),
                        derivative_order: c.derivative_order,
                    },
                    c.weight,
                )
            })
            .unzip();
        Self::new(
            file.q,
            codewords,
            weights,
            file.candidate_points
                .into_iter()
                .map(Position::from)
                .collect(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn check_simplex(weights: &[f64]) -> Result<()> {
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "power weights must be non-negative and sum to 1 (sum {sum})"
        )));
    }
    Ok(())
}

/// JSON container; complex entries are `[re, im]` pairs.
#[derive(Serialize, Deserialize)]
struct CodebookFile {
    format: String,
    version: u32,
    q: usize,
    elements: usize,
    candidate_points: Vec<[f64; 3]>,
    codewords: Vec<CodewordRecord>,
}

#[derive(Serialize, Deserialize)]
struct CodewordRecord {
    source_point: [f64; 3],
    derivative_order: u8,
    weight: f64,
    w: Vec<Complex64>,
}

impl From<&Codebook> for CodebookFile {
    fn from(cb: &Codebook) -> Self {
        Self {
            format: FORMAT_TAG.to_string(),
            version: FORMAT_VERSION,
            q: cb.q,
            elements: cb.dim() / cb.q,
            candidate_points: cb
                .candidate_points
                .iter()
                .map(|p| [p.x, p.y, p.z])
                .collect(),
            codewords: cb
                .codewords
                .iter()
                .zip(&cb.weights)
                .map(|(c, w)| CodewordRecord {
                    source_point: [c.source_point.x, c.source_point.y, c.source_point.z],
                    derivative_order: c.derivative_order,
                    weight: *w,
                    w: c.w.clone(),
                })
                .collect(),
        }
    }
}

/// Four codewords for each of the `L = nx ny nz` candidate points placed at the cell
/// centers of the region, ordered point-major then derivative order 0..=3.
///
/// `weights` defaults to uniform `1 / (4L)`.
pub fn build_codebook(
    model: &ArrayModel,
    region: &Region,
    lattice: [usize; 3],
    weights: Option<Vec<f64>>,
    method: DerivativeMethod,
) -> Result<Codebook> {
    let region = Region::new(region.min, region.max)?;
    let points = region.lattice_cell_centers(lattice)?;
    let per_point: Vec<[Codeword; 4]> = points
        .par_iter()
        .map(|p| optimal_codewords(model, p, method))
        .collect::<Result<_>>()?;
    let codewords: Vec<Codeword> = per_point.into_iter().flatten().collect();
    let n = codewords.len();
    let weights = weights.unwrap_or_else(|| vec![1.0 / n as f64; n]);
    Codebook::new(model.basis.len(), codewords, weights, points)
}
