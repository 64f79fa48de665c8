//! Near-field localization with reconfigurable-antenna arrays.
//!
//! Each element of a uniform planar array synthesizes its radiation pattern from a truncated
//! spherical-harmonics basis. This crate builds the resulting effective array response,
//! designs joint digital/EM codebooks that minimize the position error bound over an
//! uncertainty region, and localizes the user with a two-stage maximum-likelihood search.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN

pub mod channel;
pub mod error;
pub mod fim;
pub mod geometry;
pub mod harmonics;
pub mod localizer;
pub mod precoder;
pub mod sim;

pub use channel::{
    ArrayModel, EffectiveArv, EmPrecoder, MultipathScene, PathGain, Scatterer, ScenarioConfig,
};
pub use error::{Error, Result};
pub use fim::{arv_jacobian, peb, DerivativeMethod, FisherMatrix, Peb, StateParams};
pub use geometry::{build_upa, Aod, ElementLayout, Position, Region};
pub use harmonics::{BasisIndex, BasisSet};
pub use localizer::{Estimate, Localizer, LocalizerConfig, Stage, TwoStageEstimate};
pub use precoder::{Codebook, Codeword, PrecoderFactorization};

#[cfg(test)]
#[macro_export]
macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b): (f64, f64) = ($a, $b);
        assert!((a - b).abs() <= $tol, "{} != {} (tol {})", a, b, $tol);
    }};
}
