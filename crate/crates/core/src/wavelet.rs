//! One-level orthonormal Haar decomposition and its exact inverse.
//!
//! Each 2x2 block `[[a, b], [c, d]]` maps to one coefficient in each of four
//! half-resolution bands:
//!
//! ```text
//! ll = (a + b + c + d) / 2      (coarse average, scaled)
//! lh = (-a - b + c + d) / 2     (vertical detail: row differences)
//! hl = (-a + b - c + d) / 2     (horizontal detail: column differences)
//! hh = (a - b - c + d) / 2      (diagonal detail)
//! ```
//!
//! The 4x4 block transform is orthonormal, so the inverse is its transpose,
//! energy is preserved exactly, and the backward pass of the forward
//! transform reuses the inverse formulas (and vice versa).
//!
//! Odd spatial extents are handled by replicating the last row/column up to
//! even size before the transform; the inverse crops back, making
//! `idwt2(dwt2(x))` an identity for every input size.

use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{new_tensor, Shape, Tensor};

/// The four sub-bands of a one-level decomposition plus the original spatial
/// extent needed to undo padding on inversion.
pub struct WaveletBands<T: Scalar> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
    orig_h: usize,
    orig_w: usize,
}

impl<T: Scalar> WaveletBands<T> {
    /// Assembles bands produced elsewhere (e.g. enhanced by a model). The
    /// bands must share one shape; `orig_h/w` give the spatial extent the
    /// inverse should crop to.
    pub fn from_parts(
        ll: Tensor<T>,
        lh: Tensor<T>,
        hl: Tensor<T>,
        hh: Tensor<T>,
        orig_h: usize,
        orig_w: usize,
    ) -> Self {
        assert_eq!(ll.shape(), lh.shape());
        assert_eq!(ll.shape(), hl.shape());
        assert_eq!(ll.shape(), hh.shape());
        WaveletBands {
            ll,
            lh,
            hl,
            hh,
            orig_h,
            orig_w,
        }
    }

    /// Shape shared by all four bands.
    pub fn band_shape(&self) -> Shape {
        self.ll.shape()
    }

    /// Spatial extent of the image the bands came from.
    pub fn original_hw(&self) -> (usize, usize) {
        (self.orig_h, self.orig_w)
    }

    /// Replaces the low-frequency band, keeping everything else.
    pub fn with_ll(&self, ll: Tensor<T>) -> Self {
        assert_eq!(ll.shape(), self.band_shape());
        WaveletBands {
            ll,
            lh: self.lh.clone(),
            hl: self.hl.clone(),
            hh: self.hh.clone(),
            orig_h: self.orig_h,
            orig_w: self.orig_w,
        }
    }

    /// Replaces the three high-frequency bands, keeping the low band.
    pub fn with_high(&self, lh: Tensor<T>, hl: Tensor<T>, hh: Tensor<T>) -> Self {
        assert_eq!(lh.shape(), self.band_shape());
        assert_eq!(hl.shape(), self.band_shape());
        assert_eq!(hh.shape(), self.band_shape());
        WaveletBands {
            ll: self.ll.clone(),
            lh,
            hl,
            hh,
            orig_h: self.orig_h,
            orig_w: self.orig_w,
        }
    }
}

/// Copies `src` (shape `s`) into an even-extent buffer, replicating the last
/// row/column when the corresponding extent is odd.
fn pad_to_even<T: Scalar>(src: &[T], s: Shape) -> (Vec<T>, usize, usize) {
    let h2 = s.h + s.h % 2;
    let w2 = s.w + s.w % 2;
    let mut out = vec![T::zero(); s.n * s.c * h2 * w2];
    for p in 0..s.n * s.c {
        for i in 0..h2 {
            let si = i.min(s.h - 1);
            let src_row = (p * s.h + si) * s.w;
            let dst_row = (p * h2 + i) * w2;
            for j in 0..w2 {
                let sj = j.min(s.w - 1);
                out[dst_row + j] = src[src_row + sj];
            }
        }
    }
    (out, h2, w2)
}

/// Adjoint of [`pad_to_even`]: folds gradient contributions of replicated
/// rows/columns back onto their source pixels.
fn unpad_adjoint<T: Scalar>(padded: &[T], s: Shape) -> Vec<T> {
    let h2 = s.h + s.h % 2;
    let w2 = s.w + s.w % 2;
    let mut out = vec![T::zero(); s.numel()];
    for p in 0..s.n * s.c {
        for i in 0..h2 {
            let si = i.min(s.h - 1);
            let dst_row = (p * s.h + si) * s.w;
            let src_row = (p * h2 + i) * w2;
            for j in 0..w2 {
                let sj = j.min(s.w - 1);
                out[dst_row + sj] += padded[src_row + j];
            }
        }
    }
    out
}

/// Forward block transform on an even-extent plane buffer.
fn analyze<T: Scalar>(
    x: &[T],
    planes: usize,
    h2: usize,
    w2: usize,
) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let (hb, wb) = (h2 / 2, w2 / 2);
    let half = T::lit(0.5);
    let mut ll = vec![T::zero(); planes * hb * wb];
    let mut lh = ll.clone();
    let mut hl = ll.clone();
    let mut hh = ll.clone();
    for p in 0..planes {
        for i in 0..hb {
            let r0 = (p * h2 + 2 * i) * w2;
            let r1 = r0 + w2;
            let ob = (p * hb + i) * wb;
            for j in 0..wb {
                let a = x[r0 + 2 * j];
                let b = x[r0 + 2 * j + 1];
                let c = x[r1 + 2 * j];
                let d = x[r1 + 2 * j + 1];
                ll[ob + j] = (a + b + c + d) * half;
                lh[ob + j] = (c + d - a - b) * half;
                hl[ob + j] = (b + d - a - c) * half;
                hh[ob + j] = (a + d - b - c) * half;
            }
        }
    }
    (ll, lh, hl, hh)
}

/// Inverse block transform into an even-extent plane buffer.
fn synthesize<T: Scalar>(
    ll: &[T],
    lh: &[T],
    hl: &[T],
    hh: &[T],
    planes: usize,
    hb: usize,
    wb: usize,
) -> Vec<T> {
    let (h2, w2) = (hb * 2, wb * 2);
    let half = T::lit(0.5);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        for i in 0..hb {
            let ib = (p * hb + i) * wb;
            let r0 = (p * h2 + 2 * i) * w2;
            let r1 = r0 + w2;
            for j in 0..wb {
                let (l, v, h, d) = (ll[ib + j], lh[ib + j], hl[ib + j], hh[ib + j]);
                out[r0 + 2 * j] = (l - v - h + d) * half;
                out[r0 + 2 * j + 1] = (l - v + h - d) * half;
                out[r1 + 2 * j] = (l + v - h - d) * half;
                out[r1 + 2 * j + 1] = (l + v + h + d) * half;
            }
        }
    }
    out
}

/// Decomposes into four half-resolution bands. Gradients flow back through
/// all four outputs into `x`.
pub fn dwt2<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> WaveletBands<T> {
    let s = x.shape();
    let planes = s.n * s.c;
    let (padded, h2, w2) = {
        let xd = x.data();
        pad_to_even(&xd, s)
    };
    let (ll, lh, hl, hh) = analyze(&padded, planes, h2, w2);
    let band_shape = Shape::new(s.n, s.c, h2 / 2, w2 / 2);
    let rg = tape.is_enabled() && x.requires_grad();
    let ll = new_tensor(band_shape, ll, rg);
    let lh = new_tensor(band_shape, lh, rg);
    let hl = new_tensor(band_shape, hl, rg);
    let hh = new_tensor(band_shape, hh, rg);
    if rg {
        let (x, ll, lh, hl, hh) = (x.clone(), ll.clone(), lh.clone(), hl.clone(), hh.clone());
        tape.record("dwt2", move || {
            let numel = ll.numel();
            let zero = || vec![T::zero(); numel];
            let gll = ll.take_grad().unwrap_or_else(zero);
            let glh = lh.take_grad().unwrap_or_else(zero);
            let ghl = hl.take_grad().unwrap_or_else(zero);
            let ghh = hh.take_grad().unwrap_or_else(zero);
            // Orthonormal transform: the adjoint is the inverse.
            let hb = ll.shape().h;
            let wb = ll.shape().w;
            let padded_grad = synthesize(&gll, &glh, &ghl, &ghh, planes, hb, wb);
            x.accum_grad(&unpad_adjoint(&padded_grad, x.shape()));
        });
    }
    WaveletBands {
        ll,
        lh,
        hl,
        hh,
        orig_h: s.h,
        orig_w: s.w,
    }
}

/// Reassembles the image from its bands, cropping any padding introduced by
/// the forward transform.
pub fn idwt2<T: Scalar>(tape: &Tape<T>, bands: &WaveletBands<T>) -> Tensor<T> {
    let bs = bands.band_shape();
    let planes = bs.n * bs.c;
    let (hb, wb) = (bs.h, bs.w);
    let (oh, ow) = (bands.orig_h, bands.orig_w);
    assert!(
        oh <= 2 * hb && ow <= 2 * wb && oh + 1 >= 2 * hb && ow + 1 >= 2 * wb,
        "idwt2: bands {}x{} cannot produce a {}x{} image",
        hb,
        wb,
        oh,
        ow
    );
    let padded = {
        let (ll, lh, hl, hh) = (
            bands.ll.data(),
            bands.lh.data(),
            bands.hl.data(),
            bands.hh.data(),
        );
        synthesize(&ll, &lh, &hl, &hh, planes, hb, wb)
    };
    let out_shape = Shape::new(bs.n, bs.c, oh, ow);
    let (h2, w2) = (hb * 2, wb * 2);
    let mut data = vec![T::zero(); out_shape.numel()];
    for p in 0..planes {
        for i in 0..oh {
            let src = (p * h2 + i) * w2;
            let dst = (p * oh + i) * ow;
            data[dst..dst + ow].copy_from_slice(&padded[src..src + ow]);
        }
    }
    let rg = tape.is_enabled()
        && (bands.ll.requires_grad()
            || bands.lh.requires_grad()
            || bands.hl.requires_grad()
            || bands.hh.requires_grad());
    let out = new_tensor(out_shape, data, rg);
    if rg {
        let (ll, lh, hl, hh) = (
            bands.ll.clone(),
            bands.lh.clone(),
            bands.hl.clone(),
            bands.hh.clone(),
        );
        let o = out.clone();
        tape.record("idwt2", move || {
            let Some(g) = o.grad() else { return };
            // Adjoint of the crop is zero-embedding into the padded extent.
            let mut padded_grad = vec![T::zero(); planes * h2 * w2];
            for p in 0..planes {
                for i in 0..oh {
                    let dst = (p * h2 + i) * w2;
                    let src = (p * oh + i) * ow;
                    padded_grad[dst..dst + ow].copy_from_slice(&g[src..src + ow]);
                }
            }
            // Adjoint of the orthonormal synthesis is the analysis.
            let (gll, glh, ghl, ghh) = analyze(&padded_grad, planes, h2, w2);
            if ll.requires_grad() {
                ll.accum_grad(&gll);
            }
            if lh.requires_grad() {
                lh.accum_grad(&glh);
            }
            if hl.requires_grad() {
                hl.accum_grad(&ghl);
            }
            if hh.requires_grad() {
                hh.accum_grad(&ghh);
            }
        });
    }
    out
}
