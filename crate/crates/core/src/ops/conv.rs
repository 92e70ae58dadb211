//! Spatial operators: 2D convolution, average pooling, nearest upsampling.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

use super::make_output;

/// Valid output range along one axis: the `o` in `0..out_len` for which
/// `o * stride + k - pad` lands inside `0..in_len`.
fn valid_range(out_len: usize, in_len: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if in_len + pad < k + 1 {
        return (1, 0); // empty
    }
    let hi = ((in_len - 1 + pad - k) / stride).min(out_len.saturating_sub(1));
    (lo, hi)
}

/// Grouped 2D convolution with square kernels and symmetric zero padding.
///
/// `x` is `(N, C_in, H, W)`, `weight` is `(C_out, C_in/groups, K, K)`, and
/// the optional `bias` is `(1, C_out, 1, 1)`. Gradient accumulation skips any
/// input whose `requires_grad` is off, so frozen feature extractors cost
/// nothing extra on the backward pass.
pub fn conv2d<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    if groups == 0 || xs.c % groups != 0 || ws.n % groups != 0 {
        return Err(Error::BadGroups {
            channels: xs.c,
            groups,
        });
    }
    if ws.c != xs.c / groups || ws.h != ws.w {
        return Err(Error::shape_mismatch("conv2d", xs, ws));
    }
    let k = ws.h;
    if xs.h + 2 * padding < k || xs.w + 2 * padding < k {
        return Err(Error::ImageTooSmall {
            op: "conv2d".into(),
            h: xs.h,
            w: xs.w,
            min: k,
        });
    }
    if let Some(b) = bias {
        let want = Shape::new(1, ws.n, 1, 1);
        if b.shape() != want {
            return Err(Error::shape_mismatch("conv2d bias", b.shape(), want));
        }
    }
    let ho = (xs.h + 2 * padding - k) / stride + 1;
    let wo = (xs.w + 2 * padding - k) / stride + 1;
    let out_shape = Shape::new(xs.n, ws.n, ho, wo);
    let cin_g = ws.c;
    let cout_g = ws.n / groups;

    let mut data = vec![T::zero(); out_shape.numel()];
    {
        let xd = x.data();
        let wd = weight.data();
        if let Some(b) = bias {
            let bd = b.data();
            for n in 0..xs.n {
                for oc in 0..ws.n {
                    let base = (n * ws.n + oc) * ho * wo;
                    data[base..base + ho * wo].fill(bd[oc]);
                }
            }
        }
        for n in 0..xs.n {
            for g in 0..groups {
                for oc_l in 0..cout_g {
                    let oc = g * cout_g + oc_l;
                    let out_base = (n * ws.n + oc) * ho * wo;
                    for ic_l in 0..cin_g {
                        let ic = g * cin_g + ic_l;
                        let in_base = (n * xs.c + ic) * xs.h * xs.w;
                        let w_base = (oc * cin_g + ic_l) * k * k;
                        for ky in 0..k {
                            let (oy0, oy1) = valid_range(ho, xs.h, ky, padding, stride);
                            for kx in 0..k {
                                let wv = wd[w_base + ky * k + kx];
                                if wv == T::zero() {
                                    continue;
                                }
                                let (ox0, ox1) = valid_range(wo, xs.w, kx, padding, stride);
                                let mut oy = oy0;
                                while oy <= oy1 {
                                    let iy = oy * stride + ky - padding;
                                    let in_row = in_base + iy * xs.w;
                                    let out_row = out_base + oy * wo;
                                    let mut ox = ox0;
                                    while ox <= ox1 {
                                        let ix = ox * stride + kx - padding;
                                        data[out_row + ox] += wv * xd[in_row + ix];
                                        ox += 1;
                                    }
                                    oy += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let mut inputs = vec![x, weight];
    if let Some(b) = bias {
        inputs.push(b);
    }
    let out = make_output(tape, "conv2d", out_shape, data, &inputs);
    if out.requires_grad() {
        let (x, weight, o) = (x.clone(), weight.clone(), out.clone());
        let bias = bias.cloned();
        tape.record("conv2d", move || {
            let Some(grad) = o.grad() else { return };
            let xs = x.shape();
            let ws = weight.shape();
            if let Some(b) = &bias {
                if b.requires_grad() {
                    let mut db = vec![T::zero(); ws.n];
                    for n in 0..xs.n {
                        for oc in 0..ws.n {
                            let base = (n * ws.n + oc) * ho * wo;
                            db[oc] += grad[base..base + ho * wo]
                                .iter()
                                .fold(T::zero(), |a, &v| a + v);
                        }
                    }
                    b.accum_grad(&db);
                }
            }
            let want_dx = x.requires_grad();
            let want_dw = weight.requires_grad();
            if !want_dx && !want_dw {
                return;
            }
            let xd = x.data();
            let wd = weight.data();
            let mut dx = if want_dx { vec![T::zero(); x.numel()] } else { Vec::new() };
            let mut dw = if want_dw { vec![T::zero(); weight.numel()] } else { Vec::new() };
            for n in 0..xs.n {
                for g in 0..groups {
                    for oc_l in 0..cout_g {
                        let oc = g * cout_g + oc_l;
                        let out_base = (n * ws.n + oc) * ho * wo;
                        for ic_l in 0..cin_g {
                            let ic = g * cin_g + ic_l;
                            let in_base = (n * xs.c + ic) * xs.h * xs.w;
                            let w_base = (oc * cin_g + ic_l) * k * k;
                            for ky in 0..k {
                                let (oy0, oy1) = valid_range(ho, xs.h, ky, padding, stride);
                                for kx in 0..k {
                                    let (ox0, ox1) = valid_range(wo, xs.w, kx, padding, stride);
                                    let wv = wd[w_base + ky * k + kx];
                                    let mut wacc = T::zero();
                                    let mut oy = oy0;
                                    while oy <= oy1 {
                                        let iy = oy * stride + ky - padding;
                                        let in_row = in_base + iy * xs.w;
                                        let out_row = out_base + oy * wo;
                                        let mut ox = ox0;
                                        while ox <= ox1 {
                                            let ix = ox * stride + kx - padding;
                                            let gv = grad[out_row + ox];
                                            if want_dx {
                                                dx[in_row + ix] += wv * gv;
                                            }
                                            if want_dw {
                                                wacc += gv * xd[in_row + ix];
                                            }
                                            ox += 1;
                                        }
                                        oy += 1;
                                    }
                                    if want_dw {
                                        dw[w_base + ky * k + kx] += wacc;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            drop(xd);
            drop(wd);
            if want_dx {
                x.accum_grad(&dx);
            }
            if want_dw {
                weight.accum_grad(&dw);
            }
        });
    }
    Ok(out)
}

/// 2x2 average pooling with stride 2; spatial dims must be even.
pub fn avg_pool2<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h % 2 != 0 {
        return Err(Error::not_divisible("avg_pool2", "H", s.h, 2, "pad or crop the input to even dimensions"));
    }
    if s.w % 2 != 0 {
        return Err(Error::not_divisible("avg_pool2", "W", s.w, 2, "pad or crop the input to even dimensions"));
    }
    let (ho, wo) = (s.h / 2, s.w / 2);
    let out_shape = Shape::new(s.n, s.c, ho, wo);
    let quarter = T::lit(0.25);
    let mut data = vec![T::zero(); out_shape.numel()];
    {
        let xd = x.data();
        for p in 0..s.n * s.c {
            let in_base = p * s.h * s.w;
            let out_base = p * ho * wo;
            for i in 0..ho {
                let r0 = in_base + 2 * i * s.w;
                let r1 = r0 + s.w;
                let orow = out_base + i * wo;
                for j in 0..wo {
                    data[orow + j] =
                        (xd[r0 + 2 * j] + xd[r0 + 2 * j + 1] + xd[r1 + 2 * j] + xd[r1 + 2 * j + 1])
                            * quarter;
                }
            }
        }
    }
    let out = make_output(tape, "avg_pool2", out_shape, data, &[x]);
    if out.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        tape.record("avg_pool2", move || {
            let Some(g) = o.grad() else { return };
            let s = x.shape();
            let (ho, wo) = (s.h / 2, s.w / 2);
            let mut delta = vec![T::zero(); x.numel()];
            for p in 0..s.n * s.c {
                let in_base = p * s.h * s.w;
                let out_base = p * ho * wo;
                for i in 0..ho {
                    let r0 = in_base + 2 * i * s.w;
                    let r1 = r0 + s.w;
                    let orow = out_base + i * wo;
                    for j in 0..wo {
                        let v = g[orow + j] * quarter;
                        delta[r0 + 2 * j] += v;
                        delta[r0 + 2 * j + 1] += v;
                        delta[r1 + 2 * j] += v;
                        delta[r1 + 2 * j + 1] += v;
                    }
                }
            }
            x.accum_grad(&delta);
        });
    }
    Ok(out)
}

/// Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block.
pub fn upsample_nearest2<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let out_shape = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
    let mut data = vec![T::zero(); out_shape.numel()];
    {
        let xd = x.data();
        for p in 0..s.n * s.c {
            let in_base = p * s.h * s.w;
            let out_base = p * s.h * s.w * 4;
            for i in 0..s.h {
                let irow = in_base + i * s.w;
                let o0 = out_base + 2 * i * s.w * 2;
                let o1 = o0 + s.w * 2;
                for j in 0..s.w {
                    let v = xd[irow + j];
                    data[o0 + 2 * j] = v;
                    data[o0 + 2 * j + 1] = v;
                    data[o1 + 2 * j] = v;
                    data[o1 + 2 * j + 1] = v;
                }
            }
        }
    }
    let out = make_output(tape, "upsample_nearest2", out_shape, data, &[x]);
    if out.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        tape.record("upsample_nearest2", move || {
            let Some(g) = o.grad() else { return };
            let s = x.shape();
            let mut delta = vec![T::zero(); x.numel()];
            for p in 0..s.n * s.c {
                let in_base = p * s.h * s.w;
                let out_base = p * s.h * s.w * 4;
                for i in 0..s.h {
                    let irow = in_base + i * s.w;
                    let o0 = out_base + 2 * i * s.w * 2;
                    let o1 = o0 + s.w * 2;
                    for j in 0..s.w {
                        delta[irow + j] +=
                            g[o0 + 2 * j] + g[o0 + 2 * j + 1] + g[o1 + 2 * j] + g[o1 + 2 * j + 1];
                    }
                }
            }
            x.accum_grad(&delta);
        });
    }
    out
}
