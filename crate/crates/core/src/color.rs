//! Color conversion to CIELab and the image-quality metrics built on it:
//! PSNR, SSIM, MS-SSIM, and CIE76 ΔE.
//!
//! The Lab conversion and both structural-similarity metrics are ordinary
//! tape operations, so they can sit inside a training loss; PSNR and ΔE are
//! plain evaluation numbers.

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

/// sRGB linearization matrix rows (linear RGB -> XYZ, D65).
const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124, 0.3576, 0.1805],
    [0.2126, 0.7152, 0.0722],
    [0.0193, 0.1192, 0.9505],
];

/// Reference white taken as the matrix row sums, so that sRGB (1,1,1) maps
/// exactly onto normalized XYZ (1,1,1) and hence Lab (100,0,0).
fn white_point() -> [f64; 3] {
    let mut w = [0.0; 3];
    for (wi, row) in w.iter_mut().zip(&SRGB_TO_XYZ) {
        *wi = row.iter().sum();
    }
    w
}

const GAMMA_THRESHOLD: f64 = 0.04045;
/// delta = 6/29; the Lab `f` curve switches to its linear segment below
/// delta^3 so the conversion stays differentiable at black.
const LAB_DELTA: f64 = 6.0 / 29.0;

fn frozen_t<T: Scalar>(shape: Shape, data: &[f64]) -> Tensor<T> {
    Tensor::from_vec(shape, data.iter().map(|&v| T::lit(v)).collect())
        .expect("constant tensor shape")
}

/// Differentiable sRGB (values in `[0,1]`, clamped first) to CIELab.
/// Channels of the result are L in `[0,100]` and a, b roughly in
/// `[-128, 127]`.
pub fn srgb_to_lab<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.c != 3 {
        return Err(Error::InvalidArg(format!(
            "srgb_to_lab expects 3 channels, got {}",
            s.c
        )));
    }
    let clamped = ops::clamp01(tape, x);

    // Piecewise gamma expansion sRGB -> linear RGB.
    let thr = T::lit(GAMMA_THRESHOLD);
    let inv_1292 = T::lit(1.0 / 12.92);
    let a = T::lit(0.055);
    let inv_1055 = T::lit(1.0 / 1.055);
    let exp = T::lit(2.4);
    let linear = ops::unary_map(
        tape,
        &clamped,
        "srgb_gamma_expand",
        move |u| {
            if u <= thr {
                u * inv_1292
            } else {
                ((u + a) * inv_1055).powf(exp)
            }
        },
        move |u| {
            if u <= thr {
                inv_1292
            } else {
                exp * inv_1055 * ((u + a) * inv_1055).powf(exp - T::one())
            }
        },
    );

    // Linear RGB -> white-normalized XYZ as a frozen 1x1 convolution.
    let wp = white_point();
    let mut m = Vec::with_capacity(9);
    for (row, w) in SRGB_TO_XYZ.iter().zip(wp) {
        for &v in row {
            m.push(v / w);
        }
    }
    let to_xyz = frozen_t::<T>(Shape::new(3, 3, 1, 1), &m);
    let xyz = ops::conv2d(tape, &linear, &to_xyz, None, 1, 0, 1)?;

    // Piecewise cube-root curve.
    let cut = T::lit(LAB_DELTA * LAB_DELTA * LAB_DELTA);
    let slope = T::lit(1.0 / (3.0 * LAB_DELTA * LAB_DELTA));
    let offset = T::lit(4.0 / 29.0);
    let third = T::lit(1.0 / 3.0);
    let f = ops::unary_map(
        tape,
        &xyz,
        "lab_f_curve",
        move |t| {
            if t > cut {
                t.powf(third)
            } else {
                slope * t + offset
            }
        },
        move |t| {
            if t > cut {
                third * t.powf(third - T::one())
            } else {
                slope
            }
        },
    );

    // (fx, fy, fz) -> (L, a, b): another frozen 1x1 convolution plus bias.
    let lab_m = frozen_t::<T>(
        Shape::new(3, 3, 1, 1),
        &[0.0, 116.0, 0.0, 500.0, -500.0, 0.0, 0.0, 200.0, -200.0],
    );
    let lab_b = frozen_t::<T>(Shape::new(1, 3, 1, 1), &[-16.0, 0.0, 0.0]);
    ops::conv2d(tape, &f, &lab_m, Some(&lab_b), 1, 0, 1)
}

/// The L (lightness) channel of a Lab image, rescaled to `[0,1]` so it can
/// feed metrics that assume unit peak.
pub fn lab_lightness01<T: Scalar>(tape: &Tape<T>, lab: &Tensor<T>) -> Result<Tensor<T>> {
    let l = ops::slice_channels(tape, lab, 0, 1)?;
    Ok(ops::scale(tape, &l, 0.01))
}

/// Mean CIE76 color difference: per-pixel Euclidean distance in Lab,
/// averaged over the frame. Inputs are sRGB in `[0,1]`.
pub fn delta_e<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape_mismatch("delta_e", a.shape(), b.shape()));
    }
    let tape = Tape::disabled();
    let la = srgb_to_lab(&tape, a)?;
    let lb = srgb_to_lab(&tape, b)?;
    let s = a.shape();
    let (hw, chan_stride) = (s.h * s.w, s.h * s.w);
    let la = la.to_vec();
    let lb = lb.to_vec();
    let mut total = 0.0;
    for n in 0..s.n {
        let base = n * 3 * hw;
        for p in 0..hw {
            let mut sq = 0.0;
            for c in 0..3 {
                let idx = base + c * chan_stride + p;
                let d = la[idx].as_f64() - lb[idx].as_f64();
                sq += d * d;
            }
            total += sq.sqrt();
        }
    }
    Ok(total / (s.n * hw) as f64)
}

/// Peak signal-to-noise ratio in dB over flattened tensors; identical inputs
/// give `f64::INFINITY`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape_mismatch("psnr", a.shape(), b.shape()));
    }
    let (da, db) = (a.data(), b.data());
    let mut mse = 0.0;
    for (x, y) in da.iter().zip(db.iter()) {
        let d = x.as_f64() - y.as_f64();
        mse += d * d;
    }
    mse /= a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Normalized 11x11 Gaussian window as a depthwise convolution weight for
/// `channels` groups.
fn gaussian_window<T: Scalar>(channels: usize) -> Tensor<T> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut g1 = [0.0; SSIM_WINDOW];
    let mut sum = 0.0;
    for (i, v) in g1.iter_mut().enumerate() {
        *v = (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut g1 {
        *v /= sum;
    }
    let mut plane = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for gy in &g1 {
        for gx in &g1 {
            plane.push(gy * gx);
        }
    }
    let data: Vec<f64> = std::iter::repeat_with(|| plane.clone())
        .take(channels)
        .flatten()
        .collect();
    frozen_t(Shape::new(channels, 1, SSIM_WINDOW, SSIM_WINDOW), &data)
}

/// Windowed first and second moments shared by SSIM and the multi-scale
/// contrast-structure term.
struct SsimTerms<T: Scalar> {
    luminance: Tensor<T>,
    contrast_structure: Tensor<T>,
}

fn ssim_terms<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<SsimTerms<T>> {
    let s = a.shape();
    let window = gaussian_window::<T>(s.c);
    let c1 = SSIM_K1 * SSIM_K1; // peak = 1
    let c2 = SSIM_K2 * SSIM_K2;

    let mu_a = ops::conv2d(tape, a, &window, None, 1, 0, s.c)?;
    let mu_b = ops::conv2d(tape, b, &window, None, 1, 0, s.c)?;
    let aa = ops::mul(tape, a, a)?;
    let bb = ops::mul(tape, b, b)?;
    let ab = ops::mul(tape, a, b)?;
    let e_aa = ops::conv2d(tape, &aa, &window, None, 1, 0, s.c)?;
    let e_bb = ops::conv2d(tape, &bb, &window, None, 1, 0, s.c)?;
    let e_ab = ops::conv2d(tape, &ab, &window, None, 1, 0, s.c)?;

    let mu_a2 = ops::mul(tape, &mu_a, &mu_a)?;
    let mu_b2 = ops::mul(tape, &mu_b, &mu_b)?;
    let mu_ab = ops::mul(tape, &mu_a, &mu_b)?;
    let var_a = ops::sub(tape, &e_aa, &mu_a2)?;
    let var_b = ops::sub(tape, &e_bb, &mu_b2)?;
    let cov = ops::sub(tape, &e_ab, &mu_ab)?;

    // (2 mu_a mu_b + C1) / (mu_a^2 + mu_b^2 + C1)
    let lum_num = ops::add_scalar(tape, &ops::scale(tape, &mu_ab, 2.0), c1);
    let lum_den = ops::add_scalar(tape, &ops::add(tape, &mu_a2, &mu_b2)?, c1);
    let luminance = ops::div(tape, &lum_num, &lum_den)?;

    // (2 cov + C2) / (var_a + var_b + C2)
    let cs_num = ops::add_scalar(tape, &ops::scale(tape, &cov, 2.0), c2);
    let cs_den = ops::add_scalar(tape, &ops::add(tape, &var_a, &var_b)?, c2);
    let contrast_structure = ops::div(tape, &cs_num, &cs_den)?;

    Ok(SsimTerms {
        luminance,
        contrast_structure,
    })
}

/// Mean local structural similarity with the standard 11x11 Gaussian window
/// (sigma 1.5, K1 = 0.01, K2 = 0.03, peak 1). Differentiable.
pub fn ssim<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape_mismatch("ssim", a.shape(), b.shape()));
    }
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            op: "ssim".into(),
            h: s.h,
            w: s.w,
            min: SSIM_WINDOW,
        });
    }
    let terms = ssim_terms(tape, a, b)?;
    let map = ops::mul(tape, &terms.luminance, &terms.contrast_structure)?;
    Ok(ops::mean_all(tape, &map))
}

/// Published per-scale exponents of five-scale MS-SSIM. Their textbook sum
/// is 1.0001; we renormalize to exactly 1 so the weights read as a convex
/// combination (and prefixes renormalize the same way for small inputs).
const MS_SSIM_RAW_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Exponent weights actually used for an `n`-scale evaluation.
pub fn ms_ssim_weights(n: usize) -> Vec<f64> {
    assert!((1..=5).contains(&n));
    let sum: f64 = MS_SSIM_RAW_WEIGHTS[..n].iter().sum();
    MS_SSIM_RAW_WEIGHTS[..n].iter().map(|w| w / sum).collect()
}

/// How many dyadic scales fit an image: each coarser scale halves (flooring
/// odd extents) and still needs one full SSIM window.
fn scales_that_fit(mut h: usize, mut w: usize) -> usize {
    let mut n = 0;
    while n < 5 && h >= SSIM_WINDOW && w >= SSIM_WINDOW {
        n += 1;
        h /= 2;
        w /= 2;
    }
    n
}

/// Multi-scale structural similarity: contrast-structure terms at the finer
/// scales, full SSIM at the coarsest, combined as a weighted geometric mean.
/// Images below 176px use fewer scales with renormalized weights.
pub fn ms_ssim<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape_mismatch("ms_ssim", a.shape(), b.shape()));
    }
    let s = a.shape();
    let n_scales = scales_that_fit(s.h, s.w);
    if n_scales == 0 {
        return Err(Error::ImageTooSmall {
            op: "ms_ssim".into(),
            h: s.h,
            w: s.w,
            min: SSIM_WINDOW,
        });
    }
    let weights = ms_ssim_weights(n_scales);
    let mut cur_a = a.clone();
    let mut cur_b = b.clone();
    let mut product: Option<Tensor<T>> = None;
    for (scale, &w) in weights.iter().enumerate() {
        let last = scale + 1 == n_scales;
        let terms = ssim_terms(tape, &cur_a, &cur_b)?;
        let map = if last {
            ops::mul(tape, &terms.luminance, &terms.contrast_structure)?
        } else {
            terms.contrast_structure
        };
        let mean = ops::mean_all(tape, &map);
        // Geometric-mean exponentiation needs a positive base.
        let safe = ops::clamp_min(tape, &mean, 1e-6);
        let factor = ops::powf_const(tape, &safe, w);
        product = Some(match product {
            None => factor,
            Some(p) => ops::mul(tape, &p, &factor)?,
        });
        if !last {
            let sh = cur_a.shape();
            let (eh, ew) = (sh.h & !1, sh.w & !1);
            if eh != sh.h || ew != sh.w {
                cur_a = ops::crop_spatial(tape, &cur_a, eh, ew)?;
                cur_b = ops::crop_spatial(tape, &cur_b, eh, ew)?;
            }
            cur_a = ops::avg_pool2(tape, &cur_a)?;
            cur_b = ops::avg_pool2(tape, &cur_b)?;
        }
    }
    Ok(product.expect("at least one scale"))
}
