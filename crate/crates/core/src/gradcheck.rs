//! Numerical verification of every backward rule by 64-bit central
//! differences.
//!
//! `grad_check` compares the tape's analytic gradient of a scalar-valued
//! function against `(f(x+h) - f(x-h)) / 2h` coordinate by coordinate, and
//! `full_suite` runs one such check per registered operation plus one over a
//! complete miniature pipeline. Inputs are drawn away from the kinks of the
//! piecewise operations (ReLU, abs, clamps, Smooth L1) so the comparison is
//! made where the derivative exists.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::color;
use crate::dpr::DprConfig;
use crate::error::Result;
use crate::gsr::GsrConfig;
use crate::losses::{self, FeatureExtractor, LossWeights};
use crate::ops;
use crate::pipeline::{AblationSpec, Pipeline, PipelineConfig};
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};
use crate::unet::UnetConfig;
use crate::wavelet::{self, WaveletBands};

/// Acceptance threshold for the relative error of any single coordinate.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
const STEP: f64 = 1e-6;
/// Headroom over the single-rounding noise estimate `|f| * eps` for the
/// accumulated rounding of a long evaluation chain.
const NOISE_SAFETY: f64 = 8.0;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:32} max_rel={:10.3e} coords={:4} {}",
            self.name,
            self.max_rel_error,
            self.coords_checked,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// Checks the analytic gradient of `f` with respect to every tensor in
/// `inputs` (all must be parameters). At most `max_coords` coordinates per
/// tensor are probed; when subsampling is needed the coordinates with the
/// largest analytic gradients are chosen. Central differences carry noise of
/// about `|f| * eps / h`, so coordinates whose true gradient sits below that
/// floor are unresolvable at any tolerance — preferring large-gradient
/// coordinates keeps the comparison meaningful while still catching scaling,
/// indexing, and sign mistakes.
pub fn grad_check<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    f: F,
    max_coords: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let tape = Tape::new();
    let loss = f(&tape, inputs)?;
    tape.backward(&loss)?;
    let loss_scale = loss.item().abs().max(1.0);
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.take_grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::disabled();
        Ok(f(&tape, inputs)?.item())
    };

    // The quotient `(f(x+h) - f(x-h)) / 2h` carries rounding noise of about
    // `|f| * eps / h` in the worst case; a gradient smaller than that over
    // the tolerance cannot be certified at any accuracy, so the relative
    // error is measured against this floor when both gradients sit below it.
    let noise_floor =
        (NOISE_SAFETY * loss_scale * f64::EPSILON / STEP / GRADCHECK_TOLERANCE).max(1e-8);
    let mut max_rel = 0.0f64;
    let mut coords_checked = 0;
    for (ti, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| {
                analytic[ti][j]
                    .abs()
                    .partial_cmp(&analytic[ti][i].abs())
                    .unwrap()
                    .then(i.cmp(&j))
            });
            order.truncate(max_coords);
            order
        };
        let mut data = t.to_vec();
        for &j in &coords {
            let orig = data[j];
            data[j] = orig + STEP;
            t.load_data(&data)?;
            let plus = eval(inputs)?;
            data[j] = orig - STEP;
            t.load_data(&data)?;
            let minus = eval(inputs)?;
            data[j] = orig;
            t.load_data(&data)?;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[ti][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(noise_floor);
            max_rel = max_rel.max(rel);
            coords_checked += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.into(),
        max_rel_error: max_rel,
        coords_checked,
    })
}

/// Uniform parameter tensor on `(lo, hi)`.
fn param(seed: u64, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, lo, hi, &mut rng).into_param()
}

/// Parameter on `(-1, 1)` with values pushed at least `margin` away from 0,
/// for checking kinked maps like ReLU and abs off their kink.
fn param_nudged(seed: u64, shape: Shape, margin: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::<f64>::uniform(shape, -1.0, 1.0, &mut rng);
    let data: Vec<f64> = t
        .to_vec()
        .iter()
        .map(|&v| {
            if v.abs() < margin {
                if v >= 0.0 {
                    v + margin
                } else {
                    v - margin
                }
            } else {
                v
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap().into_param()
}

/// Frozen random projection so the probe loss weights each coordinate
/// differently; `sum(x)` alone would miss permutation mistakes.
fn probe(seed: u64, shape: Shape) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

fn project(tape: &Tape<f64>, x: &Tensor<f64>, w: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(ops::sum_all(tape, &ops::mul(tape, x, w)?))
}

type Case = (&'static str, Box<dyn Fn() -> Result<GradCheckReport>>);

fn cases() -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();
    // Probed coordinates per input tensor for the op-level cases; inputs are
    // small enough that this usually means every coordinate.
    const COORDS: usize = 24;
    let s = Shape::new(1, 2, 3, 4);

    cases.push((
        "add",
        Box::new(move || {
            let inputs = [param(100, s, -1.0, 1.0), param(101, s, -1.0, 1.0)];
            let w = probe(102, s);
            grad_check(
                "add",
                &inputs,
                move |t, x| project(t, &ops::add(t, &x[0], &x[1])?, &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "sub",
        Box::new(move || {
            let inputs = [param(103, s, -1.0, 1.0), param(104, s, -1.0, 1.0)];
            let w = probe(105, s);
            grad_check(
                "sub",
                &inputs,
                move |t, x| project(t, &ops::sub(t, &x[0], &x[1])?, &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "mul",
        Box::new(move || {
            let inputs = [param(106, s, -1.0, 1.0), param(107, s, -1.0, 1.0)];
            let w = probe(108, s);
            grad_check(
                "mul",
                &inputs,
                move |t, x| project(t, &ops::mul(t, &x[0], &x[1])?, &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "div",
        Box::new(move || {
            let inputs = [param(109, s, -1.0, 1.0), param(110, s, 0.5, 1.5)];
            let w = probe(111, s);
            grad_check(
                "div",
                &inputs,
                move |t, x| project(t, &ops::div(t, &x[0], &x[1])?, &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "scale_add_scalar",
        Box::new(move || {
            let inputs = [param(112, s, -1.0, 1.0)];
            let w = probe(113, s);
            grad_check(
                "scale_add_scalar",
                &inputs,
                move |t, x| {
                    let y = ops::scale(t, &x[0], 1.7);
                    project(t, &ops::add_scalar(t, &y, 0.3), &w)
                },
                COORDS,
            )
        }),
    ));
    cases.push((
        "sum_mean_all",
        Box::new(move || {
            let inputs = [param(114, s, -1.0, 1.0)];
            grad_check(
                "sum_mean_all",
                &inputs,
                |t, x| {
                    let a = ops::sum_all(t, &x[0]);
                    let b = ops::mean_all(t, &x[0]);
                    ops::add(t, &a, &ops::scale(t, &b, 0.5))
                },
                COORDS,
            )
        }),
    ));
    cases.push((
        "mean_spatial",
        Box::new(move || {
            let inputs = [param(115, s, -1.0, 1.0)];
            let w = probe(116, Shape::new(1, 2, 1, 1));
            grad_check(
                "mean_spatial",
                &inputs,
                move |t, x| project(t, &ops::mean_spatial(t, &x[0]), &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "relu",
        Box::new(move || {
            let inputs = [param_nudged(117, s, 0.05)];
            let w = probe(118, s);
            grad_check(
                "relu",
                &inputs,
                move |t, x| project(t, &ops::relu(t, &x[0]), &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "abs",
        Box::new(move || {
            let inputs = [param_nudged(119, s, 0.05)];
            let w = probe(120, s);
            grad_check(
                "abs",
                &inputs,
                move |t, x| project(t, &ops::abs(t, &x[0]), &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "gelu",
        Box::new(move || {
            let inputs = [param(121, s, -2.0, 2.0)];
            let w = probe(122, s);
            grad_check(
                "gelu",
                &inputs,
                move |t, x| project(t, &ops::gelu(t, &x[0]), &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "clamp01",
        Box::new(move || {
            // Interior points and saturated points, none within 1e-3 of the
            // clamp boundaries.
            let data: Vec<f64> = (0..s.numel())
                .map(|i| match i % 4 {
                    0 => 0.1 + 0.02 * i as f64 % 0.8,
                    1 => 0.5,
                    2 => 1.3,
                    _ => -0.4,
                })
                .collect();
            let inputs = [Tensor::from_vec(s, data).unwrap().into_param()];
            let w = probe(123, s);
            grad_check(
                "clamp01",
                &inputs,
                move |t, x| project(t, &ops::clamp01(t, &x[0]), &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "clamp_min",
        Box::new(move || {
            let data: Vec<f64> = (0..s.numel())
                .map(|i| if i % 2 == 0 { 0.05 } else { 0.4 + 0.01 * i as f64 })
                .collect();
            let inputs = [Tensor::from_vec(s, data).unwrap().into_param()];
            let w = probe(124, s);
            grad_check(
                "clamp_min",
                &inputs,
                move |t, x| project(t, &ops::clamp_min(t, &x[0], 0.2), &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "powf_const",
        Box::new(move || {
            let inputs = [param(125, s, 0.2, 1.2)];
            let w = probe(126, s);
            grad_check(
                "powf_const",
                &inputs,
                move |t, x| project(t, &ops::powf_const(t, &x[0], 1.3), &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "matmul",
        Box::new(move || {
            let sa = Shape::new(2, 3, 3, 4);
            let sb = Shape::new(2, 3, 4, 2);
            let inputs = [param(127, sa, -1.0, 1.0), param(128, sb, -1.0, 1.0)];
            let w = probe(129, Shape::new(2, 3, 3, 2));
            grad_check(
                "matmul",
                &inputs,
                move |t, x| project(t, &ops::matmul(t, &x[0], &x[1])?, &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "transpose_last2",
        Box::new(move || {
            let inputs = [param(130, s, -1.0, 1.0)];
            let w = probe(131, Shape::new(1, 2, 4, 3));
            grad_check(
                "transpose_last2",
                &inputs,
                move |t, x| project(t, &ops::transpose_last2(t, &x[0]), &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "softmax",
        Box::new(move || {
            let inputs = [param(132, s, -2.0, 2.0)];
            let w3 = probe(133, s);
            let w1 = probe(134, s);
            grad_check(
                "softmax",
                &inputs,
                move |t, x| {
                    let a = project(t, &ops::softmax(t, &x[0], 3), &w3)?;
                    let b = project(t, &ops::softmax(t, &x[0], 1), &w1)?;
                    ops::add(t, &a, &b)
                },
                COORDS,
            )
        }),
    ));
    cases.push((
        "layer_norm_channel",
        Box::new(move || {
            let sx = Shape::new(1, 3, 2, 2);
            let sc = Shape::new(1, 3, 1, 1);
            let inputs = [
                param(135, sx, -1.0, 1.0),
                param(136, sc, 0.5, 1.5),
                param(137, sc, -0.5, 0.5),
            ];
            let w = probe(138, sx);
            grad_check(
                "layer_norm_channel",
                &inputs,
                move |t, x| project(t, &ops::layer_norm_channel(t, &x[0], &x[1], &x[2])?, &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "l2norm_rows",
        Box::new(move || {
            let inputs = [param(139, s, 0.2, 1.0)];
            let w = probe(140, s);
            grad_check(
                "l2norm_rows",
                &inputs,
                move |t, x| project(t, &ops::l2norm_rows(t, &x[0]), &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "channel_affine",
        Box::new(move || {
            let sx = Shape::new(2, 3, 2, 2);
            let sc = Shape::new(2, 3, 1, 1);
            let inputs = [
                param(141, sx, -1.0, 1.0),
                param(142, sc, 0.5, 1.5),
                param(143, sc, -0.5, 0.5),
            ];
            let w = probe(144, sx);
            grad_check(
                "channel_affine",
                &inputs,
                move |t, x| project(t, &ops::channel_affine(t, &x[0], &x[1], &x[2])?, &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "mul_axis1",
        Box::new(move || {
            let sx = Shape::new(2, 3, 2, 2);
            let sc = Shape::new(1, 3, 1, 1);
            let inputs = [param(145, sx, -1.0, 1.0), param(146, sc, 0.5, 1.5)];
            let w = probe(147, sx);
            grad_check(
                "mul_axis1",
                &inputs,
                move |t, x| project(t, &ops::mul_axis1(t, &x[0], &x[1])?, &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "view",
        Box::new(move || {
            let inputs = [param(148, s, -1.0, 1.0)];
            let target = Shape::new(1, 4, 3, 2);
            let w = probe(149, target);
            grad_check(
                "view",
                &inputs,
                move |t, x| project(t, &ops::view(t, &x[0], target)?, &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "concat_slice_channels",
        Box::new(move || {
            let sa = Shape::new(2, 2, 2, 3);
            let sb = Shape::new(2, 3, 2, 3);
            let inputs = [param(150, sa, -1.0, 1.0), param(151, sb, -1.0, 1.0)];
            let w = probe(152, Shape::new(2, 3, 2, 3));
            grad_check(
                "concat_slice_channels",
                &inputs,
                move |t, x| {
                    let cat = ops::concat_channels(t, &[&x[0], &x[1]])?;
                    project(t, &ops::slice_channels(t, &cat, 1, 4)?, &w)
                },
                COORDS,
            )
        }),
    ));
    cases.push((
        "crop_spatial",
        Box::new(move || {
            let sx = Shape::new(1, 2, 5, 6);
            let inputs = [param(153, sx, -1.0, 1.0)];
            let w = probe(154, Shape::new(1, 2, 4, 4));
            grad_check(
                "crop_spatial",
                &inputs,
                move |t, x| project(t, &ops::crop_spatial(t, &x[0], 4, 4)?, &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "pixel_unshuffle",
        Box::new(move || {
            let sx = Shape::new(1, 2, 4, 6);
            let inputs = [param(155, sx, -1.0, 1.0)];
            let w = probe(156, Shape::new(1, 8, 2, 3));
            grad_check(
                "pixel_unshuffle",
                &inputs,
                move |t, x| project(t, &ops::pixel_unshuffle(t, &x[0], 2)?, &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "pixel_shuffle",
        Box::new(move || {
            let sx = Shape::new(1, 8, 2, 3);
            let inputs = [param(157, sx, -1.0, 1.0)];
            let w = probe(158, Shape::new(1, 2, 4, 6));
            grad_check(
                "pixel_shuffle",
                &inputs,
                move |t, x| project(t, &ops::pixel_shuffle(t, &x[0], 2)?, &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "conv2d",
        Box::new(move || {
            let sx = Shape::new(1, 4, 5, 5);
            let sw = Shape::new(3, 4, 3, 3);
            let sb = Shape::new(1, 3, 1, 1);
            let inputs = [
                param(159, sx, -1.0, 1.0),
                param(160, sw, -0.5, 0.5),
                param(161, sb, -0.5, 0.5),
            ];
            let w = probe(162, Shape::new(1, 3, 5, 5));
            grad_check(
                "conv2d",
                &inputs,
                move |t, x| {
                    project(t, &ops::conv2d(t, &x[0], &x[1], Some(&x[2]), 1, 1, 1)?, &w)
                },
                COORDS,
            )
        }),
    ));
    cases.push((
        "conv2d_strided",
        Box::new(move || {
            let sx = Shape::new(1, 2, 6, 6);
            let sw = Shape::new(4, 2, 2, 2);
            let inputs = [param(163, sx, -1.0, 1.0), param(164, sw, -0.5, 0.5)];
            let w = probe(165, Shape::new(1, 4, 3, 3));
            grad_check(
                "conv2d_strided",
                &inputs,
                move |t, x| project(t, &ops::conv2d(t, &x[0], &x[1], None, 2, 0, 1)?, &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "conv2d_grouped",
        Box::new(move || {
            let sx = Shape::new(1, 4, 4, 4);
            let sw = Shape::new(4, 1, 3, 3); // depthwise
            let inputs = [param(166, sx, -1.0, 1.0), param(167, sw, -0.5, 0.5)];
            let w = probe(168, Shape::new(1, 4, 4, 4));
            grad_check(
                "conv2d_grouped",
                &inputs,
                move |t, x| project(t, &ops::conv2d(t, &x[0], &x[1], None, 1, 1, 4)?, &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "avg_pool2",
        Box::new(move || {
            let sx = Shape::new(1, 3, 4, 6);
            let inputs = [param(169, sx, -1.0, 1.0)];
            let w = probe(170, Shape::new(1, 3, 2, 3));
            grad_check(
                "avg_pool2",
                &inputs,
                move |t, x| project(t, &ops::avg_pool2(t, &x[0])?, &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "upsample_nearest2",
        Box::new(move || {
            let sx = Shape::new(1, 2, 3, 4);
            let inputs = [param(171, sx, -1.0, 1.0)];
            let w = probe(172, Shape::new(1, 2, 6, 8));
            grad_check(
                "upsample_nearest2",
                &inputs,
                move |t, x| project(t, &ops::upsample_nearest2(t, &x[0]), &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "dwt2",
        Box::new(move || {
            let sx = Shape::new(1, 3, 6, 6);
            let inputs = [param(173, sx, -1.0, 1.0)];
            let band = Shape::new(1, 3, 3, 3);
            let ws: Vec<Tensor<f64>> = (0..4).map(|i| probe(174 + i, band)).collect();
            grad_check(
                "dwt2",
                &inputs,
                move |t, x| {
                    let b = wavelet::dwt2(t, &x[0]);
                    let mut acc = project(t, &b.ll, &ws[0])?;
                    for (band, w) in [(&b.lh, &ws[1]), (&b.hl, &ws[2]), (&b.hh, &ws[3])] {
                        acc = ops::add(t, &acc, &project(t, band, w)?)?;
                    }
                    Ok(acc)
                },
                COORDS,
            )
        }),
    ));
    cases.push((
        "dwt2_odd_extent",
        Box::new(move || {
            let sx = Shape::new(1, 1, 5, 7);
            let inputs = [param(178, sx, -1.0, 1.0)];
            let band = Shape::new(1, 1, 3, 4);
            let ws: Vec<Tensor<f64>> = (0..4).map(|i| probe(179 + i, band)).collect();
            grad_check(
                "dwt2_odd_extent",
                &inputs,
                move |t, x| {
                    let b = wavelet::dwt2(t, &x[0]);
                    let mut acc = project(t, &b.ll, &ws[0])?;
                    for (band, w) in [(&b.lh, &ws[1]), (&b.hl, &ws[2]), (&b.hh, &ws[3])] {
                        acc = ops::add(t, &acc, &project(t, band, w)?)?;
                    }
                    Ok(acc)
                },
                COORDS,
            )
        }),
    ));
    cases.push((
        "idwt2",
        Box::new(move || {
            let band = Shape::new(1, 3, 3, 3);
            let inputs: Vec<Tensor<f64>> = (0..4)
                .map(|i| param(183 + i, band, -1.0, 1.0))
                .collect();
            let w = probe(187, Shape::new(1, 3, 6, 6));
            grad_check(
                "idwt2",
                &inputs,
                move |t, x| {
                    let bands = WaveletBands::from_parts(
                        x[0].clone(),
                        x[1].clone(),
                        x[2].clone(),
                        x[3].clone(),
                        6,
                        6,
                    );
                    project(t, &wavelet::idwt2(t, &bands), &w)
                },
                COORDS,
            )
        }),
    ));
    cases.push((
        "idwt2_odd_extent",
        Box::new(move || {
            let band = Shape::new(1, 1, 3, 4);
            let inputs: Vec<Tensor<f64>> = (0..4)
                .map(|i| param(188 + i, band, -1.0, 1.0))
                .collect();
            let w = probe(192, Shape::new(1, 1, 5, 7));
            grad_check(
                "idwt2_odd_extent",
                &inputs,
                move |t, x| {
                    let bands = WaveletBands::from_parts(
                        x[0].clone(),
                        x[1].clone(),
                        x[2].clone(),
                        x[3].clone(),
                        5,
                        7,
                    );
                    project(t, &wavelet::idwt2(t, &bands), &w)
                },
                COORDS,
            )
        }),
    ));
    cases.push((
        "srgb_to_lab",
        Box::new(move || {
            // Away from the gamma threshold (0.04045) and the clamp edges.
            let sx = Shape::new(1, 3, 3, 3);
            let inputs = [param(193, sx, 0.06, 0.94)];
            let w = probe(194, sx);
            grad_check(
                "srgb_to_lab",
                &inputs,
                move |t, x| project(t, &color::srgb_to_lab(t, &x[0])?, &w),
                COORDS,
            )
        }),
    ));
    cases.push((
        "ssim",
        Box::new(move || {
            let sx = Shape::new(1, 1, 12, 12);
            let inputs = [param(195, sx, 0.1, 0.9), param(196, sx, 0.1, 0.9)];
            grad_check(
                "ssim",
                &inputs,
                |t, x| color::ssim(t, &x[0], &x[1]),
                12,
            )
        }),
    ));
    cases.push((
        "ms_ssim",
        Box::new(move || {
            let sx = Shape::new(1, 1, 22, 22);
            let inputs = [param(197, sx, 0.1, 0.9), param(198, sx, 0.1, 0.9)];
            grad_check(
                "ms_ssim",
                &inputs,
                |t, x| color::ms_ssim(t, &x[0], &x[1]),
                12,
            )
        }),
    ));
    cases.push((
        "smooth_l1",
        Box::new(move || {
            // Differences stay well inside the quadratic region (|d| < 0.7).
            let inputs = [param(199, s, 0.0, 0.6), param(200, s, 0.0, 0.6)];
            grad_check(
                "smooth_l1",
                &inputs,
                |t, x| losses::smooth_l1(t, &x[0], &x[1], 1.0),
                COORDS,
            )
        }),
    ));
    cases.push((
        "refinement_loss",
        Box::new(move || {
            let sx = Shape::new(1, 3, 16, 16);
            let inputs = [param(201, sx, 0.2, 1.8), param(202, sx, 0.2, 1.8)];
            let w = LossWeights::default();
            grad_check(
                "refinement_loss",
                &inputs,
                move |t, x| losses::refinement_loss(t, &x[0], &x[1], &w),
                8,
            )
        }),
    ));
    cases.push((
        "perceptual_loss",
        Box::new(move || {
            let sx = Shape::new(1, 3, 8, 8);
            let inputs = [param(203, sx, 0.1, 0.9), param(204, sx, 0.1, 0.9)];
            let phi = FeatureExtractor::new(1234);
            let w = LossWeights::default();
            grad_check(
                "perceptual_loss",
                &inputs,
                move |t, x| Ok(losses::perceptual_loss(t, &x[0], &x[1], &phi, &w)?.0),
                8,
            )
        }),
    ));
    cases.push((
        "pipeline_total_loss",
        Box::new(move || {
            let config = PipelineConfig {
                ablation: AblationSpec::default(),
                gsr: GsrConfig {
                    base_channels: 4,
                    blocks_per_level: [1, 1, 1, 1],
                    heads_per_level: [1, 2, 2, 4],
                    ffn_expansion: 2,
                },
                hfr: UnetConfig {
                    in_channels: 9,
                    depth: 2,
                    base_channels: 4,
                },
                dpr: DprConfig {
                    refine_layers: 2,
                    refine_channels: 8,
                    cond_dim: 4,
                    encoder_blocks: 2,
                },
                ablation_unet_depth: 2,
                ablation_unet_base_channels: 4,
            };
            let pipe = Pipeline::<f64>::new(&config, 12345)?;
            // The residual heads start at zero, which blocks every gradient
            // path into the interior layers; nudge them so all backwards are
            // actually exercised.
            let params = pipe.params();
            let mut head_seed = 207;
            for (name, tensor) in params.iter() {
                if name.ends_with("head.weight") {
                    let mut rng = ChaCha8Rng::seed_from_u64(head_seed);
                    head_seed += 1;
                    let nudged = Tensor::<f64>::uniform(tensor.shape(), -0.02, 0.02, &mut rng);
                    tensor.load_data(&nudged.to_vec())?;
                }
            }
            let img = Shape::new(1, 3, 32, 32);
            let input = param(205, img, 0.05, 0.95);
            let target = {
                let mut rng = ChaCha8Rng::seed_from_u64(206);
                Tensor::uniform(img, 0.05, 0.95, &mut rng)
            };
            let target_bands = {
                let tape = Tape::disabled();
                wavelet::dwt2(&tape, &target)
            };
            let hf_tgt = {
                let tape = Tape::disabled();
                ops::concat_channels(
                    &tape,
                    &[&target_bands.lh, &target_bands.hl, &target_bands.hh],
                )?
            };
            let phi = FeatureExtractor::new(1234);
            let w = LossWeights::default();
            let mut inputs: Vec<Tensor<f64>> = vec![input];
            inputs.extend(pipe.params().tensors());
            grad_check(
                "pipeline_total_loss",
                &inputs,
                move |t, x| {
                    let parts = pipe.forward(t, &x[0])?;
                    let (loss, _) = losses::total_loss(
                        t,
                        &parts.final_out,
                        &target,
                        &parts.ll_enh,
                        &target_bands.ll,
                        &parts.hf_enh,
                        &hf_tgt,
                        &phi,
                        &w,
                    )?;
                    Ok(loss)
                },
                2,
            )
        }),
    ));
    cases
}

/// Names of every suite entry, in run order.
pub fn suite_names() -> Vec<&'static str> {
    cases().iter().map(|(name, _)| *name).collect()
}

/// Runs the whole verification suite, or only the entries whose name
/// contains `filter`.
pub fn run_suite(filter: Option<&str>) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for (name, run) in cases() {
        if let Some(f) = filter {
            if !name.contains(f) {
                continue;
            }
        }
        reports.push(run()?);
    }
    Ok(reports)
}

/// The complete suite: every op plus the miniature end-to-end pipeline.
pub fn full_suite() -> Result<Vec<GradCheckReport>> {
    run_suite(None)
}
