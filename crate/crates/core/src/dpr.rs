//! Detail-preserving refinement: per-pixel 1x1 conv stack whose feature maps
//! are modulated by a global condition vector summarizing the whole image.
//!
//! A small strided encoder pools the conditioning image down to one vector
//! per sample; each refinement layer derives a per-channel gain and bias from
//! that vector and applies them as `gamma * x + beta` before its ReLU. Because
//! every spatial operator is 1x1, two pixels only interact through the shared
//! condition vector.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, ParamSet};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DprConfig {
    /// Number of modulated 1x1 refinement layers.
    pub refine_layers: usize,
    /// Width of the refinement feature maps.
    pub refine_channels: usize,
    /// Length of the global condition vector.
    pub cond_dim: usize,
    /// Conv + pool stages in the global encoder; stage `i` works at width
    /// `16 * 2^i` and halves the spatial extent.
    pub encoder_blocks: usize,
}

impl Default for DprConfig {
    fn default() -> Self {
        DprConfig {
            refine_layers: 3,
            refine_channels: 64,
            cond_dim: 32,
            encoder_blocks: 3,
        }
    }
}

impl DprConfig {
    pub fn validate(&self) -> Result<()> {
        if self.refine_layers == 0 {
            return Err(Error::InvalidArg("dpr refine_layers must be >= 1".into()));
        }
        if self.refine_channels == 0 {
            return Err(Error::InvalidArg("dpr refine_channels must be >= 1".into()));
        }
        if self.cond_dim == 0 {
            return Err(Error::InvalidArg("dpr cond_dim must be >= 1".into()));
        }
        if self.encoder_blocks == 0 {
            return Err(Error::InvalidArg("dpr encoder_blocks must be >= 1".into()));
        }
        Ok(())
    }
}

/// Feature-wise modulation: `gamma * x + beta` with per-sample, per-channel
/// coefficients shaped `(N, C, 1, 1)`.
pub fn gfm<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (sx, sg, sb) = (x.shape(), gamma.shape(), beta.shape());
    let want = Shape::new(sx.n, sx.c, 1, 1);
    if sg != want {
        return Err(Error::shape_mismatch("gfm", sg, want));
    }
    if sb != want {
        return Err(Error::shape_mismatch("gfm", sb, want));
    }
    ops::channel_affine(tape, x, gamma, beta)
}

/// Pools the conditioning image down to one `(N, cond_dim, 1, 1)` vector.
pub struct GlobalEncoder<T: Scalar> {
    blocks: Vec<Conv2d<T>>,
    project: Conv2d<T>,
    stages: usize,
}

impl<T: Scalar> GlobalEncoder<T> {
    fn new<R: Rng>(rng: &mut R, config: &DprConfig) -> Self {
        let mut blocks = Vec::new();
        for i in 0..config.encoder_blocks {
            let cin = if i == 0 { 3 } else { 16 << (i - 1) };
            blocks.push(Conv2d::new(rng, cin, 16 << i, 3, 1, Init::Uniform));
        }
        let last = 16 << (config.encoder_blocks - 1);
        GlobalEncoder {
            blocks,
            project: Conv2d::new(rng, last, config.cond_dim, 1, 1, Init::Uniform),
            stages: config.encoder_blocks,
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let min = 1usize << self.stages;
        if s.h < min || s.w < min {
            return Err(Error::ImageTooSmall {
                op: "global_encoder".into(),
                h: s.h,
                w: s.w,
                min,
            });
        }
        let mut cur = x.clone();
        for conv in &self.blocks {
            cur = ops::relu(tape, &conv.forward(tape, &cur)?);
            // Odd extents lose their last row/column so pooling always halves.
            let sh = cur.shape();
            cur = ops::crop_spatial(tape, &cur, sh.h & !1, sh.w & !1)?;
            cur = ops::avg_pool2(tape, &cur)?;
        }
        let pooled = ops::mean_spatial(tape, &cur);
        self.project.forward(tape, &pooled)
    }

    fn collect(&self, params: &mut ParamSet<T>, prefix: &str) {
        for (i, conv) in self.blocks.iter().enumerate() {
            conv.collect(params, &format!("{prefix}.stage{i}"));
        }
        self.project.collect(params, &format!("{prefix}.project"));
    }
}

struct RefineLayer<T: Scalar> {
    conv: Conv2d<T>,
    gamma_map: Conv2d<T>,
    beta_map: Conv2d<T>,
}

impl<T: Scalar> RefineLayer<T> {
    fn new<R: Rng>(rng: &mut R, cin: usize, cout: usize, cond_dim: usize) -> Self {
        let mut gamma_map = Conv2d::new(rng, cond_dim, cout, 1, 1, Init::Uniform);
        // Bias 1 so modulation starts as the identity gain.
        gamma_map.fill_bias(1.0);
        RefineLayer {
            conv: Conv2d::new(rng, cin, cout, 1, 1, Init::Uniform),
            gamma_map,
            beta_map: Conv2d::new(rng, cond_dim, cout, 1, 1, Init::Uniform),
        }
    }

    fn forward(&self, tape: &Tape<T>, x: &Tensor<T>, cond: &Tensor<T>) -> Result<Tensor<T>> {
        let features = self.conv.forward(tape, x)?;
        let gamma = self.gamma_map.forward(tape, cond)?;
        let beta = self.beta_map.forward(tape, cond)?;
        let modulated = gfm(tape, &features, &gamma, &beta)?;
        Ok(ops::relu(tape, &modulated))
    }

    fn collect(&self, params: &mut ParamSet<T>, prefix: &str) {
        self.conv.collect(params, &format!("{prefix}.conv"));
        self.gamma_map.collect(params, &format!("{prefix}.gamma_map"));
        self.beta_map.collect(params, &format!("{prefix}.beta_map"));
    }
}

/// The full refinement stage: global encoder plus modulated 1x1 stack with a
/// zero-initialized head and global residual.
pub struct Dpr<T: Scalar> {
    config: DprConfig,
    encoder: GlobalEncoder<T>,
    layers: Vec<RefineLayer<T>>,
    head: Conv2d<T>,
}

impl<T: Scalar> Dpr<T> {
    pub fn new<R: Rng>(rng: &mut R, config: &DprConfig) -> Result<Self> {
        config.validate()?;
        let encoder = GlobalEncoder::new(rng, config);
        let mut layers = Vec::new();
        for i in 0..config.refine_layers {
            let cin = if i == 0 { 3 } else { config.refine_channels };
            layers.push(RefineLayer::new(
                rng,
                cin,
                config.refine_channels,
                config.cond_dim,
            ));
        }
        let head = Conv2d::new(rng, config.refine_channels, 3, 1, 1, Init::Zero);
        Ok(Dpr {
            config: config.clone(),
            encoder,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &DprConfig {
        &self.config
    }

    /// Computes the condition vector for `cond_image`, shaped
    /// `(N, cond_dim, 1, 1)`.
    pub fn condition(&self, tape: &Tape<T>, cond_image: &Tensor<T>) -> Result<Tensor<T>> {
        self.encoder.forward(tape, cond_image)
    }

    /// Refines `x` under an already-computed condition vector.
    pub fn refine(&self, tape: &Tape<T>, x: &Tensor<T>, cond: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(tape, &cur, cond)?;
        }
        let delta = self.head.forward(tape, &cur)?;
        ops::add(tape, x, &delta)
    }

    /// Convenience: condition on `cond_image`, then refine `x`.
    pub fn forward(
        &self,
        tape: &Tape<T>,
        x: &Tensor<T>,
        cond_image: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let cond = self.condition(tape, cond_image)?;
        self.refine(tape, x, &cond)
    }

    pub fn collect(&self, params: &mut ParamSet<T>, prefix: &str) {
        self.encoder.collect(params, &format!("{prefix}.encoder"));
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect(params, &format!("{prefix}.refine{i}"));
        }
        self.head.collect(params, &format!("{prefix}.head"));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DprConfig {
        DprConfig {
            refine_layers: 2,
            refine_channels: 8,
            cond_dim: 4,
            encoder_blocks: 2,
        }
    }

    #[test]
    fn condition_vector_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let model = Dpr::<f64>::new(&mut rng, &DprConfig::default()).unwrap();
        let x = Tensor::uniform(Shape::new(2, 3, 17, 23), 0.0, 1.0, &mut rng);
        let tape = Tape::disabled();
        let cond = model.condition(&tape, &x).unwrap();
        assert_eq!(cond.shape(), Shape::new(2, 32, 1, 1));
    }

    #[test]
    fn encoder_rejects_tiny_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let model = Dpr::<f64>::new(&mut rng, &DprConfig::default()).unwrap();
        let x = Tensor::zeros(Shape::new(1, 3, 4, 4)); // needs >= 8
        let tape = Tape::disabled();
        assert!(model.condition(&tape, &x).is_err());
    }

    #[test]
    fn gfm_identity_and_oracle() {
        let tape = Tape::disabled();
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![3.0, 5.0]).unwrap();
        let one = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![1.0]).unwrap();
        let zero = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![0.0]).unwrap();
        let y = gfm(&tape, &x, &one, &zero).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 5.0]);

        let two = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![2.0]).unwrap();
        let oneb = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![1.0]).unwrap();
        let y = gfm(&tape, &x, &two, &oneb).unwrap();
        assert_eq!(y.to_vec(), vec![7.0, 11.0]); // 3*2+1, 5*2+1
    }

    #[test]
    fn gfm_rejects_bad_coefficient_shapes() {
        let tape = Tape::<f64>::disabled();
        let x = Tensor::zeros(Shape::new(1, 2, 2, 2));
        let bad = Tensor::zeros(Shape::new(1, 3, 1, 1));
        let ok = Tensor::zeros(Shape::new(1, 2, 1, 1));
        assert!(gfm(&tape, &x, &bad, &ok).is_err());
        assert!(gfm(&tape, &x, &ok, &bad).is_err());
    }

    #[test]
    fn identity_at_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let model = Dpr::<f64>::new(&mut rng, &tiny()).unwrap();
        let x = Tensor::uniform(Shape::new(1, 3, 8, 8), 0.0, 1.0, &mut rng);
        let cond_img = Tensor::uniform(Shape::new(1, 3, 8, 8), 0.0, 1.0, &mut rng);
        let tape = Tape::disabled();
        let y = model.forward(&tape, &x, &cond_img).unwrap();
        for (a, b) in x.to_vec().iter().zip(y.to_vec()) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn pixels_are_refined_independently() {
        // Perturbing one pixel of x (condition held fixed) only moves that
        // pixel of the output: the refinement path is purely 1x1.
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let model = Dpr::<f64>::new(&mut rng, &tiny()).unwrap();
        let x = Tensor::uniform(Shape::new(1, 3, 6, 6), 0.0, 1.0, &mut rng);
        let cond_img = Tensor::uniform(Shape::new(1, 3, 8, 8), 0.0, 1.0, &mut rng);
        let tape = Tape::disabled();
        let cond = model.condition(&tape, &cond_img).unwrap();
        let y0 = model.refine(&tape, &x, &cond).unwrap().to_vec();

        let mut bumped = x.to_vec();
        let target = 2 * 36 + 3 * 6 + 4; // channel 2, row 3, col 4
        bumped[target] += 0.25;
        let x2 = Tensor::from_vec(x.shape(), bumped).unwrap();
        let y1 = model.refine(&tape, &x2, &cond).unwrap().to_vec();

        for (i, (a, b)) in y0.iter().zip(&y1).enumerate() {
            let (pix_a, pix_b) = (i % 36, target % 36);
            if pix_a == pix_b {
                continue;
            }
            assert_eq!(a, b, "pixel {pix_a} moved when only {pix_b} changed");
        }
    }

    #[test]
    fn refinement_is_equivariant_to_pixel_permutation() {
        // Swapping two pixels of the input (condition fixed) swaps the same
        // two pixels of the output.
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let model = Dpr::<f64>::new(&mut rng, &tiny()).unwrap();
        let x = Tensor::uniform(Shape::new(1, 3, 4, 4), 0.0, 1.0, &mut rng);
        let cond_img = Tensor::uniform(Shape::new(1, 3, 8, 8), 0.0, 1.0, &mut rng);
        let tape = Tape::disabled();
        let cond = model.condition(&tape, &cond_img).unwrap();

        let swap = |data: &[f64]| -> Vec<f64> {
            let mut out = data.to_vec();
            for c in 0..3 {
                out.swap(c * 16 + 1, c * 16 + 10);
            }
            out
        };
        let y = model.refine(&tape, &x, &cond).unwrap().to_vec();
        let xs = Tensor::from_vec(x.shape(), swap(&x.to_vec())).unwrap();
        let ys = model.refine(&tape, &xs, &cond).unwrap().to_vec();
        let y_swapped = swap(&y);
        for (a, b) in y_swapped.iter().zip(&ys) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn condition_nearly_invariant_to_small_translation() {
        // Global average pooling makes the condition vector almost blind to
        // a one-pixel shift of a smooth image.
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let model = Dpr::<f64>::new(&mut rng, &DprConfig::default()).unwrap();
        let (h, w) = (32, 32);
        let smooth = |dx: f64| {
            let mut data = Vec::with_capacity(3 * h * w);
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let fx = (x as f64 + dx) / w as f64;
                        let fy = y as f64 / h as f64;
                        data.push(
                            0.5 + 0.3 * (2.0 * std::f64::consts::PI * fx).sin() * 0.5
                                + 0.1 * fy
                                + 0.05 * c as f64,
                        );
                    }
                }
            }
            Tensor::from_vec(Shape::new(1, 3, h, w), data).unwrap()
        };
        let tape = Tape::disabled();
        let a = model.condition(&tape, &smooth(0.0)).unwrap().to_vec();
        let b = model.condition(&tape, &smooth(1.0)).unwrap().to_vec();
        let max_diff = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        let scale = a.iter().map(|v| v.abs()).fold(0.0f64, f64::max).max(1.0);
        assert!(
            max_diff / scale < 1e-2,
            "translation moved the condition by {max_diff} (scale {scale})"
        );
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let model = Dpr::<f64>::new(&mut rng, &tiny()).unwrap();
        let mut params = ParamSet::new();
        model.collect(&mut params, "dpr");
        let x = Tensor::uniform(Shape::new(1, 3, 6, 6), 0.0, 1.0, &mut rng);
        let cond_img = Tensor::uniform(Shape::new(1, 3, 8, 8), 0.0, 1.0, &mut rng);
        let tape = Tape::new();
        let y = model.forward(&tape, &x, &cond_img).unwrap();
        let loss = ops::mean_all(&tape, &ops::mul(&tape, &y, &y).unwrap());
        tape.backward(&loss).unwrap();
        for (name, p) in params.iter() {
            assert!(p.grad().is_some(), "no gradient for {name}");
        }
    }

    #[test]
    fn config_validation() {
        let mut c = DprConfig::default();
        assert!(c.validate().is_ok());
        c.refine_layers = 0;
        assert!(c.validate().is_err());
        let mut c = DprConfig::default();
        c.cond_dim = 0;
        assert!(c.validate().is_err());
    }
}
