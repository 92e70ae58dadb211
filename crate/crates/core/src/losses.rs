//! Training criteria: the low-frequency refinement loss, a feature-domain
//! perceptual loss with a pluggable frozen extractor, Smooth L1, and the
//! weighted total with a per-term breakdown for logging.
//!
//! The refinement term compares enhanced and reference LL bands in CIELab and
//! through multi-scale SSIM on lightness. Its similarity part enters as
//! `1 - MS-SSIM` so the whole expression is a quantity to minimize. LL bands
//! of [0,1] images span [0,2] under the orthonormal transform, so they are
//! halved before any color interpretation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::color;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Channel widths of the five frozen extractor stages.
const PHI_WIDTHS: [usize; 5] = [8, 16, 32, 32, 32];

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the Lab L1 term inside the refinement loss.
    pub w_lab: f64,
    /// Weight of the `1 - MS-SSIM` term inside the refinement loss.
    pub w_ms: f64,
    /// Per-tap weights of the perceptual loss, tap 0 (raw pixels) first.
    pub lambda_l: [f64; 6],
    /// Multiplier on the refinement loss in the total.
    pub lambda_r: f64,
    /// Multiplier on the two Smooth L1 terms in the total.
    pub lambda_smooth: f64,
    /// Quadratic-to-linear transition point of Smooth L1.
    pub smooth_l1_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_lab: 1.0,
            w_ms: 0.5,
            lambda_l: [1.0; 6],
            lambda_r: 2.0,
            lambda_smooth: 2.0,
            smooth_l1_beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("w_lab", self.w_lab),
            ("w_ms", self.w_ms),
            ("lambda_r", self.lambda_r),
            ("lambda_smooth", self.lambda_smooth),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArg(format!(
                    "loss weight {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        for (k, &v) in self.lambda_l.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArg(format!(
                    "loss weight lambda_l[{k}] must be finite and nonnegative, got {v}"
                )));
            }
        }
        if !self.smooth_l1_beta.is_finite() || self.smooth_l1_beta <= 0.0 {
            return Err(Error::InvalidArg(format!(
                "smooth_l1_beta must be positive, got {}",
                self.smooth_l1_beta
            )));
        }
        Ok(())
    }
}

/// Frozen, seeded feature pyramid standing in for a pretrained backbone.
///
/// Tap 0 is the image itself; taps 1..=5 come from fixed
/// `[3x3 conv, ReLU, 2x average-pool]` stages with widths 8, 16, 32, 32, 32.
/// Parameters never receive gradients; gradient still flows through the taps
/// into the compared images.
pub struct FeatureExtractor<T: Scalar> {
    stages: Vec<Conv2d<T>>,
    seed: u64,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        for (i, &width) in PHI_WIDTHS.iter().enumerate() {
            let cin = if i == 0 { 3 } else { PHI_WIDTHS[i - 1] };
            let mut conv = Conv2d::new(&mut rng, cin, width, 3, 1, Init::Uniform);
            conv.weight = conv.weight.detach();
            conv.bias = conv.bias.map(|b| b.detach());
            stages.push(conv);
        }
        FeatureExtractor { stages, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Feature taps for `x`, most detailed first. Stops early once the map
    /// is too small to pool again, so the count is between 1 and 6.
    pub fn features(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut taps = vec![x.clone()];
        let mut cur = x.clone();
        for conv in &self.stages {
            let s = cur.shape();
            if s.h < 2 || s.w < 2 {
                break;
            }
            cur = ops::relu(tape, &conv.forward(tape, &cur)?);
            // Odd extents drop their last row/column so the pool halves.
            let s = cur.shape();
            cur = ops::crop_spatial(tape, &cur, s.h & !1, s.w & !1)?;
            cur = ops::avg_pool2(tape, &cur)?;
            taps.push(cur.clone());
        }
        Ok(taps)
    }
}

/// Lab L1 plus `1 - MS-SSIM` on lightness, both over LL bands halved into
/// [0,1] range.
pub fn refinement_loss<T: Scalar>(
    tape: &Tape<T>,
    ll_enhanced: &Tensor<T>,
    ll_target: &Tensor<T>,
    w: &LossWeights,
) -> Result<Tensor<T>> {
    if ll_enhanced.shape() != ll_target.shape() {
        return Err(Error::shape_mismatch(
            "refinement_loss",
            ll_enhanced.shape(),
            ll_target.shape(),
        ));
    }
    let half_e = ops::scale(tape, ll_enhanced, 0.5);
    let half_t = ops::scale(tape, ll_target, 0.5);
    let lab_e = color::srgb_to_lab(tape, &half_e)?;
    let lab_t = color::srgb_to_lab(tape, &half_t)?;
    let lab_l1 = ops::mean_all(tape, &ops::abs(tape, &ops::sub(tape, &lab_e, &lab_t)?));

    let light_e = color::lab_lightness01(tape, &lab_e)?;
    let light_t = color::lab_lightness01(tape, &lab_t)?;
    let ms = color::ms_ssim(tape, &light_e, &light_t)?;
    let dissim = ops::add_scalar(tape, &ops::scale(tape, &ms, -1.0), 1.0);

    let weighted_lab = ops::scale(tape, &lab_l1, w.w_lab);
    let weighted_ms = ops::scale(tape, &dissim, w.w_ms);
    ops::add(tape, &weighted_lab, &weighted_ms)
}

/// Weighted L1 distance between feature taps of the two images. Returns the
/// scalar and the number of taps that fit the spatial extent.
pub fn perceptual_loss<T: Scalar>(
    tape: &Tape<T>,
    enhanced: &Tensor<T>,
    target: &Tensor<T>,
    phi: &FeatureExtractor<T>,
    w: &LossWeights,
) -> Result<(Tensor<T>, usize)> {
    if enhanced.shape() != target.shape() {
        return Err(Error::shape_mismatch(
            "perceptual_loss",
            enhanced.shape(),
            target.shape(),
        ));
    }
    let taps_e = phi.features(tape, enhanced)?;
    let taps_t = phi.features(tape, target)?;
    debug_assert_eq!(taps_e.len(), taps_t.len());
    let mut total: Option<Tensor<T>> = None;
    for (k, (te, tt)) in taps_e.iter().zip(&taps_t).enumerate() {
        let term = ops::mean_all(tape, &ops::abs(tape, &ops::sub(tape, te, tt)?));
        let weighted = ops::scale(tape, &term, w.lambda_l[k]);
        total = Some(match total {
            None => weighted,
            Some(acc) => ops::add(tape, &acc, &weighted)?,
        });
    }
    Ok((total.expect("at least tap 0"), taps_e.len()))
}

/// Mean of the quadratic-near-zero, linear-in-the-tails penalty:
/// `0.5 d^2 / beta` for `|d| < beta`, else `|d| - 0.5 beta`.
pub fn smooth_l1<T: Scalar>(
    tape: &Tape<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    beta: f64,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape_mismatch("smooth_l1", a.shape(), b.shape()));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidArg(format!(
            "smooth_l1 beta must be positive, got {beta}"
        )));
    }
    let d = ops::sub(tape, a, b)?;
    let bt = T::lit(beta);
    let half = T::lit(0.5);
    let penalty = ops::unary_map(
        tape,
        &d,
        "smooth_l1",
        move |v| {
            if v.abs() < bt {
                half * v * v / bt
            } else {
                v.abs() - half * bt
            }
        },
        move |v| {
            if v.abs() < bt {
                v / bt
            } else if v > T::zero() {
                T::one()
            } else {
                -T::one()
            }
        },
    );
    Ok(ops::mean_all(tape, &penalty))
}

/// Raw per-term values of one total-loss evaluation. The stored terms are
/// unweighted; `total` already applies the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Breakdown {
    pub perceptual: f64,
    pub refinement: f64,
    pub smooth_final: f64,
    pub smooth_hf: f64,
    pub total: f64,
    pub taps_used: usize,
}

impl Breakdown {
    /// Re-applies the weights to the stored raw terms; matches `total` to
    /// numerical precision.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.perceptual
            + w.lambda_r * self.refinement
            + w.lambda_smooth * (self.smooth_final + self.smooth_hf)
    }
}

impl std::fmt::Display for Breakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total={:.6} perceptual={:.6} refinement={:.6} smooth_final={:.6} smooth_hf={:.6} taps={}",
            self.total,
            self.perceptual,
            self.refinement,
            self.smooth_final,
            self.smooth_hf,
            self.taps_used
        )
    }
}

/// The full training objective:
/// perceptual + lambda_r * refinement + lambda_smooth * (final + hf Smooth L1).
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Scalar>(
    tape: &Tape<T>,
    final_out: &Tensor<T>,
    final_target: &Tensor<T>,
    ll_enh: &Tensor<T>,
    ll_tgt: &Tensor<T>,
    hf_enh: &Tensor<T>,
    hf_tgt: &Tensor<T>,
    phi: &FeatureExtractor<T>,
    w: &LossWeights,
) -> Result<(Tensor<T>, Breakdown)> {
    w.validate()?;
    let (l_phi, taps_used) = perceptual_loss(tape, final_out, final_target, phi, w)?;
    let l_r = refinement_loss(tape, ll_enh, ll_tgt, w)?;
    let l_sf = smooth_l1(tape, final_out, final_target, w.smooth_l1_beta)?;
    let l_sh = smooth_l1(tape, hf_enh, hf_tgt, w.smooth_l1_beta)?;

    let weighted_r = ops::scale(tape, &l_r, w.lambda_r);
    let smooth_pair = ops::add(tape, &l_sf, &l_sh)?;
    let weighted_smooth = ops::scale(tape, &smooth_pair, w.lambda_smooth);
    let total = ops::add(tape, &ops::add(tape, &l_phi, &weighted_r)?, &weighted_smooth)?;

    let breakdown = Breakdown {
        perceptual: l_phi.item().as_f64(),
        refinement: l_r.item().as_f64(),
        smooth_final: l_sf.item().as_f64(),
        smooth_hf: l_sh.item().as_f64(),
        total: total.item().as_f64(),
        taps_used,
    };
    Ok((total, breakdown))
}
