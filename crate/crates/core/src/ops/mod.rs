//! Differentiable tensor operations.
//!
//! Every op computes its output eagerly, then (when the tape is enabled and
//! some input requires gradients) records a backward closure that pulls the
//! output gradient and accumulates into each input that wants one. Inputs
//! with `requires_grad == false` are skipped, which is how frozen weights
//! and target images stay out of the gradient flow.

mod conv;

pub use conv::{avg_pool2, conv2d, upsample_nearest2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{new_tensor, Shape, Tensor};

pub(crate) fn make_output<T: Scalar>(
    tape: &Tape<T>,
    _op: &'static str,
    shape: Shape,
    data: Vec<T>,
    inputs: &[&Tensor<T>],
) -> Tensor<T> {
    // Non-finite values are allowed to flow: the training loop is the single
    // place that detects them (and aborts with a per-term breakdown), so the
    // behavior is identical in debug and release builds.
    let rg = tape.is_enabled() && inputs.iter().any(|t| t.requires_grad());
    new_tensor(shape, data, rg)
}

fn ensure_same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape_mismatch(op, a.shape(), b.shape()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Elementwise binary
// ---------------------------------------------------------------------------

pub fn add<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape("add", a, b)?;
    let data = {
        let (da, db) = (a.data(), b.data());
        da.iter().zip(db.iter()).map(|(&x, &y)| x + y).collect()
    };
    let out = make_output(tape, "add", a.shape(), data, &[a, b]);
    if out.requires_grad() {
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        tape.record("add", move || {
            let Some(g) = o.grad() else { return };
            if a.requires_grad() {
                a.accum_grad(&g);
            }
            if b.requires_grad() {
                b.accum_grad(&g);
            }
        });
    }
    Ok(out)
}

pub fn sub<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape("sub", a, b)?;
    let data = {
        let (da, db) = (a.data(), b.data());
        da.iter().zip(db.iter()).map(|(&x, &y)| x - y).collect()
    };
    let out = make_output(tape, "sub", a.shape(), data, &[a, b]);
    if out.requires_grad() {
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        tape.record("sub", move || {
            let Some(g) = o.grad() else { return };
            if a.requires_grad() {
                a.accum_grad(&g);
            }
            if b.requires_grad() {
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                b.accum_grad(&neg);
            }
        });
    }
    Ok(out)
}

pub fn mul<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape("mul", a, b)?;
    let data = {
        let (da, db) = (a.data(), b.data());
        da.iter().zip(db.iter()).map(|(&x, &y)| x * y).collect()
    };
    let out = make_output(tape, "mul", a.shape(), data, &[a, b]);
    if out.requires_grad() {
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        tape.record("mul", move || {
            let Some(g) = o.grad() else { return };
            if a.requires_grad() {
                let delta: Vec<T> = {
                    let vb = b.data();
                    g.iter().zip(vb.iter()).map(|(&gi, &y)| gi * y).collect()
                };
                a.accum_grad(&delta);
            }
            if b.requires_grad() {
                let delta: Vec<T> = {
                    let va = a.data();
                    g.iter().zip(va.iter()).map(|(&gi, &x)| gi * x).collect()
                };
                b.accum_grad(&delta);
            }
        });
    }
    Ok(out)
}

pub fn div<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape("div", a, b)?;
    let data = {
        let (da, db) = (a.data(), b.data());
        da.iter().zip(db.iter()).map(|(&x, &y)| x / y).collect()
    };
    let out = make_output(tape, "div", a.shape(), data, &[a, b]);
    if out.requires_grad() {
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        tape.record("div", move || {
            let Some(g) = o.grad() else { return };
            if a.requires_grad() {
                let delta: Vec<T> = {
                    let vb = b.data();
                    g.iter().zip(vb.iter()).map(|(&gi, &y)| gi / y).collect()
                };
                a.accum_grad(&delta);
            }
            if b.requires_grad() {
                let delta: Vec<T> = {
                    let (va, vb) = (a.data(), b.data());
                    g.iter()
                        .zip(va.iter().zip(vb.iter()))
                        .map(|(&gi, (&x, &y))| -gi * x / (y * y))
                        .collect()
                };
                b.accum_grad(&delta);
            }
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Scalar broadcast
// ---------------------------------------------------------------------------

pub fn scale<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, k: f64) -> Tensor<T> {
    let kk = T::lit(k);
    let data = x.data().iter().map(|&v| v * kk).collect();
    let out = make_output(tape, "scale", x.shape(), data, &[x]);
    if out.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        tape.record("scale", move || {
            let Some(g) = o.grad() else { return };
            let delta: Vec<T> = g.iter().map(|&v| v * kk).collect();
            x.accum_grad(&delta);
        });
    }
    out
}

pub fn add_scalar<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, k: f64) -> Tensor<T> {
    let kk = T::lit(k);
    let data = x.data().iter().map(|&v| v + kk).collect();
    let out = make_output(tape, "add_scalar", x.shape(), data, &[x]);
    if out.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        tape.record("add_scalar", move || {
            let Some(g) = o.grad() else { return };
            x.accum_grad(&g);
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

pub fn sum_all<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Tensor<T> {
    let s = x.data().iter().fold(T::zero(), |acc, &v| acc + v);
    let out = make_output(tape, "sum_all", Shape::scalar(), vec![s], &[x]);
    if out.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        tape.record("sum_all", move || {
            let Some(g) = o.grad() else { return };
            x.accum_grad(&vec![g[0]; x.numel()]);
        });
    }
    out
}

pub fn mean_all<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Tensor<T> {
    let n = T::lit(x.numel() as f64);
    let s = x.data().iter().fold(T::zero(), |acc, &v| acc + v) / n;
    let out = make_output(tape, "mean_all", Shape::scalar(), vec![s], &[x]);
    if out.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        tape.record("mean_all", move || {
            let Some(g) = o.grad() else { return };
            x.accum_grad(&vec![g[0] / n; x.numel()]);
        });
    }
    out
}

/// Mean over the spatial extent, producing `(N, C, 1, 1)`.
pub fn mean_spatial<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let hw = s.h * s.w;
    let inv = T::lit(1.0 / hw as f64);
    let mut data = vec![T::zero(); s.n * s.c];
    {
        let xd = x.data();
        for (plane, out) in xd.chunks_exact(hw).zip(data.iter_mut()) {
            *out = plane.iter().fold(T::zero(), |acc, &v| acc + v) * inv;
        }
    }
    let out = make_output(
        tape,
        "mean_spatial",
        Shape::new(s.n, s.c, 1, 1),
        data,
        &[x],
    );
    if out.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        tape.record("mean_spatial", move || {
            let Some(g) = o.grad() else { return };
            let mut delta = vec![T::zero(); x.numel()];
            for (plane, &gi) in delta.chunks_exact_mut(hw).zip(g.iter()) {
                let v = gi * inv;
                plane.fill(v);
            }
            x.accum_grad(&delta);
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Elementwise unary
// ---------------------------------------------------------------------------

/// Elementwise map with an explicit derivative; the base for every pointwise
/// nonlinearity and piecewise curve in the crate.
pub fn unary_map<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    name: &'static str,
    f: impl Fn(T) -> T + 'static,
    df: impl Fn(T) -> T + 'static,
) -> Tensor<T> {
    let data = x.data().iter().map(|&v| f(v)).collect();
    let out = make_output(tape, name, x.shape(), data, &[x]);
    if out.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        tape.record(name, move || {
            let Some(g) = o.grad() else { return };
            let delta: Vec<T> = {
                let xd = x.data();
                g.iter()
                    .zip(xd.iter())
                    .map(|(&gi, &v)| gi * df(v))
                    .collect()
            };
            x.accum_grad(&delta);
        });
    }
    out
}

/// max(x, 0); the subgradient at exactly 0 is taken as 0.
pub fn relu<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Tensor<T> {
    unary_map(
        tape,
        x,
        "relu",
        |v| if v > T::zero() { v } else { T::zero() },
        |v| if v > T::zero() { T::one() } else { T::zero() },
    )
}

pub fn abs<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Tensor<T> {
    unary_map(
        tape,
        x,
        "abs",
        |v| v.abs(),
        |v| {
            if v > T::zero() {
                T::one()
            } else if v < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        },
    )
}

/// Smooth gating nonlinearity (tanh form of the Gaussian-error gate).
pub fn gelu<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Tensor<T> {
    let c = T::lit(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let one = T::one();
    let three = T::lit(3.0);
    unary_map(
        tape,
        x,
        "gelu",
        move |v| {
            let t = (c * (v + a * v * v * v)).tanh();
            half * v * (one + t)
        },
        move |v| {
            let u = c * (v + a * v * v * v);
            let t = u.tanh();
            let du = c * (one + three * a * v * v);
            half * (one + t) + half * v * (one - t * t) * du
        },
    )
}

/// Clamps into `[0, 1]`; gradient is 1 inside the range, 0 outside.
pub fn clamp01<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Tensor<T> {
    unary_map(
        tape,
        x,
        "clamp01",
        |v| v.max(T::zero()).min(T::one()),
        |v| {
            if v > T::zero() && v < T::one() {
                T::one()
            } else {
                T::zero()
            }
        },
    )
}

/// max(x, lo) with zero gradient below the floor.
pub fn clamp_min<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, lo: f64) -> Tensor<T> {
    let lo = T::lit(lo);
    unary_map(
        tape,
        x,
        "clamp_min",
        move |v| v.max(lo),
        move |v| if v > lo { T::one() } else { T::zero() },
    )
}

/// x^p for strictly positive x (callers clamp first).
pub fn powf_const<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, p: f64) -> Tensor<T> {
    let pe = T::lit(p);
    unary_map(
        tape,
        x,
        "powf_const",
        move |v| v.powf(pe),
        move |v| pe * v.powf(pe - T::one()),
    )
}

// ---------------------------------------------------------------------------
// Batched matrix product
// ---------------------------------------------------------------------------

/// Batched matrix product over the two trailing axes: `(B0, B1, m, k)` times
/// `(B0, B1, k, n)` gives `(B0, B1, m, n)`.
pub fn matmul<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.c != sb.c || sa.w != sb.h {
        return Err(Error::shape_mismatch("matmul", sa, sb));
    }
    let (batch, m, k, n) = (sa.n * sa.c, sa.h, sa.w, sb.w);
    let out_shape = Shape::new(sa.n, sa.c, m, n);
    let mut data = vec![T::zero(); out_shape.numel()];
    {
        let (da, db) = (a.data(), b.data());
        matmul_kernel(&da, &db, &mut data, batch, m, k, n);
    }
    let out = make_output(tape, "matmul", out_shape, data, &[a, b]);
    if out.requires_grad() {
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        tape.record("matmul", move || {
            let Some(g) = o.grad() else { return };
            if a.requires_grad() {
                // dA[i,l] = sum_j G[i,j] * B[l,j]
                let delta = {
                    let db = b.data();
                    let mut d = vec![T::zero(); a.numel()];
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &db[bi * k * n..(bi + 1) * k * n];
                        let da = &mut d[bi * m * k..(bi + 1) * m * k];
                        for i in 0..m {
                            let grow = &gb[i * n..(i + 1) * n];
                            for l in 0..k {
                                let brow = &bb[l * n..(l + 1) * n];
                                let mut acc = T::zero();
                                for (gv, bv) in grow.iter().zip(brow) {
                                    acc += *gv * *bv;
                                }
                                da[i * k + l] = acc;
                            }
                        }
                    }
                    d
                };
                a.accum_grad(&delta);
            }
            if b.requires_grad() {
                // dB[l,j] = sum_i A[i,l] * G[i,j]
                let delta = {
                    let da = a.data();
                    let mut d = vec![T::zero(); b.numel()];
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &da[bi * m * k..(bi + 1) * m * k];
                        let dbb = &mut d[bi * k * n..(bi + 1) * k * n];
                        for i in 0..m {
                            let grow = &gb[i * n..(i + 1) * n];
                            for l in 0..k {
                                let av = ab[i * k + l];
                                let drow = &mut dbb[l * n..(l + 1) * n];
                                for (dv, gv) in drow.iter_mut().zip(grow) {
                                    *dv += av * *gv;
                                }
                            }
                        }
                    }
                    d
                };
                b.accum_grad(&delta);
            }
        });
    }
    Ok(out)
}

fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], out: &mut [T], batch: usize, m: usize, k: usize, n: usize) {
    for bi in 0..batch {
        let ab = &a[bi * m * k..(bi + 1) * m * k];
        let bb = &b[bi * k * n..(bi + 1) * k * n];
        let ob = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let orow = &mut ob[i * n..(i + 1) * n];
            for l in 0..k {
                let av = ab[i * k + l];
                let brow = &bb[l * n..(l + 1) * n];
                for (ov, bv) in orow.iter_mut().zip(brow) {
                    *ov += av * *bv;
                }
            }
        }
    }
}

/// Swaps the two trailing axes: `(B0, B1, h, w)` to `(B0, B1, w, h)`.
pub fn transpose_last2<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (batch, h, w) = (s.n * s.c, s.h, s.w);
    let out_shape = Shape::new(s.n, s.c, s.w, s.h);
    let mut data = vec![T::zero(); x.numel()];
    {
        let xd = x.data();
        transpose_kernel(&xd, &mut data, batch, h, w);
    }
    let out = make_output(tape, "transpose_last2", out_shape, data, &[x]);
    if out.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        tape.record("transpose_last2", move || {
            let Some(g) = o.grad() else { return };
            let mut delta = vec![T::zero(); x.numel()];
            transpose_kernel(&g, &mut delta, batch, w, h);
            x.accum_grad(&delta);
        });
    }
    out
}

fn transpose_kernel<T: Scalar>(src: &[T], dst: &mut [T], batch: usize, h: usize, w: usize) {
    for bi in 0..batch {
        let sb = &src[bi * h * w..(bi + 1) * h * w];
        let db = &mut dst[bi * h * w..(bi + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                db[j * h + i] = sb[i * w + j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Numerically stable softmax along axis `dim` (0..4).
pub fn softmax<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, dim: usize) -> Tensor<T> {
    assert!(dim < 4, "softmax dim must be in 0..4");
    let s = x.shape();
    let dims = s.dims();
    let len = dims[dim];
    let stride: usize = dims[dim + 1..].iter().product();
    let rows = x.numel() / len;
    let mut data = vec![T::zero(); x.numel()];
    {
        let xd = x.data();
        for row in 0..rows {
            let base = (row / stride) * (stride * len) + (row % stride);
            let mut mx = T::neg_infinity();
            for j in 0..len {
                mx = mx.max(xd[base + j * stride]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (xd[base + j * stride] - mx).exp();
                data[base + j * stride] = e;
                sum += e;
            }
            for j in 0..len {
                data[base + j * stride] /= sum;
            }
        }
    }
    let out = make_output(tape, "softmax", s, data, &[x]);
    if out.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        tape.record("softmax", move || {
            let Some(g) = o.grad() else { return };
            // dx_j = y_j * (g_j - sum_l g_l y_l)
            let delta: Vec<T> = {
                let yd = o.data();
                let mut d = vec![T::zero(); yd.len()];
                for row in 0..rows {
                    let base = (row / stride) * (stride * len) + (row % stride);
                    let mut dot = T::zero();
                    for j in 0..len {
                        let idx = base + j * stride;
                        dot += g[idx] * yd[idx];
                    }
                    for j in 0..len {
                        let idx = base + j * stride;
                        d[idx] = yd[idx] * (g[idx] - dot);
                    }
                }
                d
            };
            x.accum_grad(&delta);
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-pixel normalization across the channel axis to zero mean and unit
/// variance, followed by a per-channel affine. `gain` and `shift` have shape
/// `(1, C, 1, 1)`.
pub fn layer_norm_channel<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = x.shape();
    let affine = Shape::new(1, s.c, 1, 1);
    if gain.shape() != affine || shift.shape() != affine {
        return Err(Error::shape_mismatch(
            "layer_norm_channel",
            s,
            format!("gain {} / shift {}", gain.shape(), shift.shape()),
        ));
    }
    let eps = T::lit(LAYER_NORM_EPS);
    let (c, hw) = (s.c, s.h * s.w);
    let inv_c = T::lit(1.0 / c as f64);
    let mut data = vec![T::zero(); x.numel()];
    {
        let xd = x.data();
        let gd = gain.data();
        let sd = shift.data();
        for n in 0..s.n {
            let base = n * c * hw;
            for p in 0..hw {
                let mut mean = T::zero();
                for ch in 0..c {
                    mean += xd[base + ch * hw + p];
                }
                mean = mean * inv_c;
                let mut var = T::zero();
                for ch in 0..c {
                    let d = xd[base + ch * hw + p] - mean;
                    var += d * d;
                }
                let inv_std = T::one() / (var * inv_c + eps).sqrt();
                for ch in 0..c {
                    let xn = (xd[base + ch * hw + p] - mean) * inv_std;
                    data[base + ch * hw + p] = gd[ch] * xn + sd[ch];
                }
            }
        }
    }
    let out = make_output(tape, "layer_norm_channel", s, data, &[x, gain, shift]);
    if out.requires_grad() {
        let (x, gain, shift, o) = (x.clone(), gain.clone(), shift.clone(), out.clone());
        tape.record("layer_norm_channel", move || {
            let Some(g) = o.grad() else { return };
            let xd = x.data();
            let gd = gain.data();
            let s = x.shape();
            let (c, hw) = (s.c, s.h * s.w);
            let inv_c = T::lit(1.0 / c as f64);
            let eps = T::lit(LAYER_NORM_EPS);
            let mut dx = vec![T::zero(); x.numel()];
            let mut dgain = vec![T::zero(); c];
            let mut dshift = vec![T::zero(); c];
            for n in 0..s.n {
                let base = n * c * hw;
                for p in 0..hw {
                    let mut mean = T::zero();
                    for ch in 0..c {
                        mean += xd[base + ch * hw + p];
                    }
                    mean = mean * inv_c;
                    let mut var = T::zero();
                    for ch in 0..c {
                        let d = xd[base + ch * hw + p] - mean;
                        var += d * d;
                    }
                    let inv_std = T::one() / (var * inv_c + eps).sqrt();
                    // h = g * gain; dx = inv_std * (h - mean(h) - xn * mean(h * xn))
                    let mut mean_h = T::zero();
                    let mut mean_hx = T::zero();
                    for ch in 0..c {
                        let idx = base + ch * hw + p;
                        let xn = (xd[idx] - mean) * inv_std;
                        let h = g[idx] * gd[ch];
                        mean_h += h;
                        mean_hx += h * xn;
                        dgain[ch] += g[idx] * xn;
                        dshift[ch] += g[idx];
                    }
                    mean_h = mean_h * inv_c;
                    mean_hx = mean_hx * inv_c;
                    for ch in 0..c {
                        let idx = base + ch * hw + p;
                        let xn = (xd[idx] - mean) * inv_std;
                        let h = g[idx] * gd[ch];
                        dx[idx] = inv_std * (h - mean_h - xn * mean_hx);
                    }
                }
            }
            drop(xd);
            drop(gd);
            if x.requires_grad() {
                x.accum_grad(&dx);
            }
            if gain.requires_grad() {
                gain.accum_grad(&dgain);
            }
            if shift.requires_grad() {
                shift.accum_grad(&dshift);
            }
        });
    }
    Ok(out)
}

/// L2-normalizes each vector along the trailing axis.
pub fn l2norm_rows<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Tensor<T> {
    let eps = T::lit(1e-12);
    let s = x.shape();
    let w = s.w;
    let mut data = vec![T::zero(); x.numel()];
    let mut norms = vec![T::zero(); x.numel() / w];
    {
        let xd = x.data();
        for (r, row) in xd.chunks_exact(w).enumerate() {
            let mut sq = T::zero();
            for &v in row {
                sq += v * v;
            }
            let nrm = (sq + eps).sqrt();
            norms[r] = nrm;
            for (o, &v) in data[r * w..(r + 1) * w].iter_mut().zip(row) {
                *o = v / nrm;
            }
        }
    }
    let out = make_output(tape, "l2norm_rows", s, data, &[x]);
    if out.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        tape.record("l2norm_rows", move || {
            let Some(g) = o.grad() else { return };
            let delta: Vec<T> = {
                let xd = x.data();
                let mut d = vec![T::zero(); xd.len()];
                for r in 0..norms.len() {
                    let row = &xd[r * w..(r + 1) * w];
                    let grow = &g[r * w..(r + 1) * w];
                    let nrm = norms[r];
                    let mut dot = T::zero();
                    for (&gv, &xv) in grow.iter().zip(row) {
                        dot += gv * xv;
                    }
                    let n3 = nrm * nrm * nrm;
                    for ((dv, &gv), &xv) in d[r * w..(r + 1) * w].iter_mut().zip(grow).zip(row) {
                        *dv = gv / nrm - xv * dot / n3;
                    }
                }
                d
            };
            x.accum_grad(&delta);
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Broadcast affine
// ---------------------------------------------------------------------------

/// Per-sample, per-channel affine `y = gamma[n,c] * x + beta[n,c]` broadcast
/// over the spatial extent. `gamma` and `beta` have shape `(N, C, 1, 1)`.
pub fn channel_affine<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = x.shape();
    let want = Shape::new(s.n, s.c, 1, 1);
    if gamma.shape() != want || beta.shape() != want {
        return Err(Error::shape_mismatch(
            "channel_affine",
            s,
            format!("gamma {} / beta {}", gamma.shape(), beta.shape()),
        ));
    }
    let hw = s.h * s.w;
    let mut data = vec![T::zero(); x.numel()];
    {
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        for (pi, (plane, out)) in xd.chunks_exact(hw).zip(data.chunks_exact_mut(hw)).enumerate() {
            let (ga, be) = (gd[pi], bd[pi]);
            for (o, &v) in out.iter_mut().zip(plane) {
                *o = ga * v + be;
            }
        }
    }
    let out = make_output(tape, "channel_affine", s, data, &[x, gamma, beta]);
    if out.requires_grad() {
        let (x, gamma, beta, o) = (x.clone(), gamma.clone(), beta.clone(), out.clone());
        tape.record("channel_affine", move || {
            let Some(g) = o.grad() else { return };
            let planes = g.len() / hw;
            if x.requires_grad() {
                let delta: Vec<T> = {
                    let gd = gamma.data();
                    let mut d = vec![T::zero(); g.len()];
                    for pi in 0..planes {
                        let ga = gd[pi];
                        for (dv, &gv) in d[pi * hw..(pi + 1) * hw].iter_mut().zip(&g[pi * hw..(pi + 1) * hw]) {
                            *dv = gv * ga;
                        }
                    }
                    d
                };
                x.accum_grad(&delta);
            }
            if gamma.requires_grad() {
                let delta: Vec<T> = {
                    let xd = x.data();
                    (0..planes)
                        .map(|pi| {
                            let mut acc = T::zero();
                            for (&gv, &xv) in g[pi * hw..(pi + 1) * hw].iter().zip(&xd[pi * hw..(pi + 1) * hw]) {
                                acc += gv * xv;
                            }
                            acc
                        })
                        .collect()
                };
                gamma.accum_grad(&delta);
            }
            if beta.requires_grad() {
                let delta: Vec<T> = (0..planes)
                    .map(|pi| {
                        g[pi * hw..(pi + 1) * hw]
                            .iter()
                            .fold(T::zero(), |acc, &v| acc + v)
                    })
                    .collect();
                beta.accum_grad(&delta);
            }
        });
    }
    Ok(out)
}

/// Multiplies by a learnable per-slot factor along axis 1, shared across the
/// batch: `y[n,j,..] = x[n,j,..] * s[j]` with `s` of shape `(1, D, 1, 1)`.
pub fn mul_axis1<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let want = Shape::new(1, xs.c, 1, 1);
    if s.shape() != want {
        return Err(Error::shape_mismatch("mul_axis1", xs, s.shape()));
    }
    let hw = xs.h * xs.w;
    let mut data = vec![T::zero(); x.numel()];
    {
        let xd = x.data();
        let sd = s.data();
        for n in 0..xs.n {
            for j in 0..xs.c {
                let sv = sd[j];
                let base = (n * xs.c + j) * hw;
                for (o, &v) in data[base..base + hw].iter_mut().zip(&xd[base..base + hw]) {
                    *o = v * sv;
                }
            }
        }
    }
    let out = make_output(tape, "mul_axis1", xs, data, &[x, s]);
    if out.requires_grad() {
        let (x, s, o) = (x.clone(), s.clone(), out.clone());
        tape.record("mul_axis1", move || {
            let Some(g) = o.grad() else { return };
            let xs = x.shape();
            let hw = xs.h * xs.w;
            if x.requires_grad() {
                let delta: Vec<T> = {
                    let sd = s.data();
                    let mut d = vec![T::zero(); g.len()];
                    for n in 0..xs.n {
                        for j in 0..xs.c {
                            let sv = sd[j];
                            let base = (n * xs.c + j) * hw;
                            for (dv, &gv) in d[base..base + hw].iter_mut().zip(&g[base..base + hw]) {
                                *dv = gv * sv;
                            }
                        }
                    }
                    d
                };
                x.accum_grad(&delta);
            }
            if s.requires_grad() {
                let delta: Vec<T> = {
                    let xd = x.data();
                    let mut d = vec![T::zero(); xs.c];
                    for n in 0..xs.n {
                        for j in 0..xs.c {
                            let base = (n * xs.c + j) * hw;
                            let mut acc = T::zero();
                            for (&gv, &xv) in g[base..base + hw].iter().zip(&xd[base..base + hw]) {
                                acc += gv * xv;
                            }
                            d[j] += acc;
                        }
                    }
                    d
                };
                s.accum_grad(&delta);
            }
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Shape rearrangement
// ---------------------------------------------------------------------------

/// Reinterprets the flat data under a new shape with the same element count.
pub fn view<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, shape: Shape) -> Result<Tensor<T>> {
    if shape.numel() != x.numel() {
        return Err(Error::shape_mismatch("view", x.shape(), shape));
    }
    let out = make_output(tape, "view", shape, x.to_vec(), &[x]);
    if out.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        tape.record("view", move || {
            let Some(g) = o.grad() else { return };
            x.accum_grad(&g);
        });
    }
    Ok(out)
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Scalar>(tape: &Tape<T>, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    assert!(!parts.is_empty(), "concat_channels of nothing");
    let first = parts[0].shape();
    let mut c_total = 0;
    for p in parts {
        let s = p.shape();
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(Error::shape_mismatch("concat_channels", first, s));
        }
        c_total += s.c;
    }
    let out_shape = Shape::new(first.n, c_total, first.h, first.w);
    let hw = first.h * first.w;
    let mut data = vec![T::zero(); out_shape.numel()];
    for n in 0..first.n {
        let mut c_off = 0;
        for p in parts {
            let pc = p.shape().c;
            let src = p.data();
            let dst_base = (n * c_total + c_off) * hw;
            let src_base = n * pc * hw;
            data[dst_base..dst_base + pc * hw].copy_from_slice(&src[src_base..src_base + pc * hw]);
            c_off += pc;
        }
    }
    let out = make_output(tape, "concat_channels", out_shape, data, parts);
    if out.requires_grad() {
        let parts: Vec<Tensor<T>> = parts.iter().map(|p| (*p).clone()).collect();
        let o = out.clone();
        tape.record("concat_channels", move || {
            let Some(g) = o.grad() else { return };
            let n_total = o.shape().n;
            for (pi, p) in parts.iter().enumerate() {
                if !p.requires_grad() {
                    continue;
                }
                let c_off: usize = parts[..pi].iter().map(|q| q.shape().c).sum();
                let pc = p.shape().c;
                let mut delta = vec![T::zero(); p.numel()];
                for n in 0..n_total {
                    let src_base = (n * c_total + c_off) * hw;
                    let dst_base = n * pc * hw;
                    delta[dst_base..dst_base + pc * hw]
                        .copy_from_slice(&g[src_base..src_base + pc * hw]);
                }
                p.accum_grad(&delta);
            }
        });
    }
    Ok(out)
}

/// Extracts channels `start..end`.
pub fn slice_channels<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    start: usize,
    end: usize,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if start >= end || end > s.c {
        return Err(Error::InvalidArg(format!(
            "slice_channels: range {start}..{end} out of bounds for C={}",
            s.c
        )));
    }
    let cs = end - start;
    let hw = s.h * s.w;
    let out_shape = Shape::new(s.n, cs, s.h, s.w);
    let mut data = vec![T::zero(); out_shape.numel()];
    {
        let xd = x.data();
        for n in 0..s.n {
            let src = (n * s.c + start) * hw;
            let dst = n * cs * hw;
            data[dst..dst + cs * hw].copy_from_slice(&xd[src..src + cs * hw]);
        }
    }
    let out = make_output(tape, "slice_channels", out_shape, data, &[x]);
    if out.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        tape.record("slice_channels", move || {
            let Some(g) = o.grad() else { return };
            let s = x.shape();
            let hw = s.h * s.w;
            let mut delta = vec![T::zero(); x.numel()];
            for n in 0..s.n {
                let dst = (n * s.c + start) * hw;
                let src = n * cs * hw;
                delta[dst..dst + cs * hw].copy_from_slice(&g[src..src + cs * hw]);
            }
            x.accum_grad(&delta);
        });
    }
    Ok(out)
}

/// Keeps the top-left `h`-by-`w` spatial window of every plane. The backward
/// pass zero-embeds the gradient into the original extent.
pub fn crop_spatial<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if h == 0 || w == 0 || h > s.h || w > s.w {
        return Err(Error::InvalidArg(format!(
            "crop_spatial: {h}x{w} does not fit inside {}x{}",
            s.h, s.w
        )));
    }
    let out_shape = Shape::new(s.n, s.c, h, w);
    let mut data = vec![T::zero(); out_shape.numel()];
    {
        let xd = x.data();
        for p in 0..s.n * s.c {
            for i in 0..h {
                let src = (p * s.h + i) * s.w;
                let dst = (p * h + i) * w;
                data[dst..dst + w].copy_from_slice(&xd[src..src + w]);
            }
        }
    }
    let out = make_output(tape, "crop_spatial", out_shape, data, &[x]);
    if out.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        tape.record("crop_spatial", move || {
            let Some(g) = o.grad() else { return };
            let s = x.shape();
            let mut delta = vec![T::zero(); x.numel()];
            for p in 0..s.n * s.c {
                for i in 0..h {
                    let dst = (p * s.h + i) * s.w;
                    let src = (p * h + i) * w;
                    delta[dst..dst + w].copy_from_slice(&g[src..src + w]);
                }
            }
            x.accum_grad(&delta);
        });
    }
    Ok(out)
}

/// Rearranges `(N, C, H, W)` to `(N, C*r^2, H/r, W/r)`; each r-by-r spatial
/// block becomes r^2 channels in row-major block order.
pub fn pixel_unshuffle<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h % r != 0 {
        return Err(Error::not_divisible("pixel_unshuffle", "H", s.h, r, ""));
    }
    if s.w % r != 0 {
        return Err(Error::not_divisible("pixel_unshuffle", "W", s.w, r, ""));
    }
    let out_shape = Shape::new(s.n, s.c * r * r, s.h / r, s.w / r);
    let mut data = vec![T::zero(); x.numel()];
    {
        let xd = x.data();
        unshuffle_kernel(&xd, &mut data, s, r);
    }
    let out = make_output(tape, "pixel_unshuffle", out_shape, data, &[x]);
    if out.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        tape.record("pixel_unshuffle", move || {
            let Some(g) = o.grad() else { return };
            let mut delta = vec![T::zero(); x.numel()];
            shuffle_kernel(&g, &mut delta, x.shape(), r);
            x.accum_grad(&delta);
        });
    }
    Ok(out)
}

/// Exact inverse of [`pixel_unshuffle`]: `(N, C, H, W)` to
/// `(N, C/r^2, H*r, W*r)`.
pub fn pixel_shuffle<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.c % (r * r) != 0 {
        return Err(Error::not_divisible("pixel_shuffle", "C", s.c, r * r, ""));
    }
    let out_shape = Shape::new(s.n, s.c / (r * r), s.h * r, s.w * r);
    let mut data = vec![T::zero(); x.numel()];
    {
        let xd = x.data();
        shuffle_kernel(&xd, &mut data, out_shape, r);
    }
    let out = make_output(tape, "pixel_shuffle", out_shape, data, &[x]);
    if out.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        tape.record("pixel_shuffle", move || {
            let Some(g) = o.grad() else { return };
            let mut delta = vec![T::zero(); x.numel()];
            unshuffle_kernel(&g, &mut delta, o.shape(), r);
            x.accum_grad(&delta);
        });
    }
    Ok(out)
}

/// `src` is laid out as `spatial_shape`; `dst` receives the unshuffled
/// `(N, C*r^2, H/r, W/r)` layout.
fn unshuffle_kernel<T: Scalar>(src: &[T], dst: &mut [T], spatial_shape: Shape, r: usize) {
    let s = spatial_shape;
    let (ho, wo) = (s.h / r, s.w / r);
    for n in 0..s.n {
        for c in 0..s.c {
            for dr in 0..r {
                for dc in 0..r {
                    let co = (c * r + dr) * r + dc;
                    for i in 0..ho {
                        let src_row = ((n * s.c + c) * s.h + i * r + dr) * s.w;
                        let dst_row = ((n * s.c * r * r + co) * ho + i) * wo;
                        for j in 0..wo {
                            dst[dst_row + j] = src[src_row + j * r + dc];
                        }
                    }
                }
            }
        }
    }
}

/// `dst` is laid out as `spatial_shape`; `src` holds the unshuffled layout.
fn shuffle_kernel<T: Scalar>(src: &[T], dst: &mut [T], spatial_shape: Shape, r: usize) {
    let s = spatial_shape;
    let (ho, wo) = (s.h / r, s.w / r);
    for n in 0..s.n {
        for c in 0..s.c {
            for dr in 0..r {
                for dc in 0..r {
                    let co = (c * r + dr) * r + dc;
                    for i in 0..ho {
                        let dst_row = ((n * s.c + c) * s.h + i * r + dr) * s.w;
                        let src_row = ((n * s.c * r * r + co) * ho + i) * wo;
                        for j in 0..wo {
                            dst[dst_row + j * r + dc] = src[src_row + j];
                        }
                    }
                }
            }
        }
    }
}
