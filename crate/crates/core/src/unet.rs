//! Plain convolutional UNet used for the high-frequency detail path and for
//! the low-frequency ablation variant.
//!
//! Each level applies two 3x3 conv + ReLU pairs; levels are joined by 2x2
//! average pooling on the way down and nearest-neighbour upsampling plus skip
//! concatenation on the way up. A zero-initialized 1x1 head plus a global
//! residual make the whole network an identity map at initialization.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, ParamSet};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct UnetConfig {
    /// Channels of the input (and output) maps.
    pub in_channels: usize,
    /// Number of resolution levels; 1 means no pooling at all.
    pub depth: usize,
    /// Channel width at the finest level; level `l` uses `base * 2^l`.
    pub base_channels: usize,
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::InvalidArg("unet in_channels must be >= 1".into()));
        }
        if self.depth == 0 {
            return Err(Error::InvalidArg("unet depth must be >= 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::InvalidArg("unet base_channels must be >= 1".into()));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

struct ConvPair<T: Scalar> {
    a: Conv2d<T>,
    b: Conv2d<T>,
}

impl<T: Scalar> ConvPair<T> {
    fn new<R: Rng>(rng: &mut R, cin: usize, cout: usize) -> Self {
        ConvPair {
            a: Conv2d::new(rng, cin, cout, 3, 1, Init::Uniform),
            b: Conv2d::new(rng, cout, cout, 3, 1, Init::Uniform),
        }
    }

    fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let x = ops::relu(tape, &self.a.forward(tape, x)?);
        Ok(ops::relu(tape, &self.b.forward(tape, &x)?))
    }

    fn collect(&self, params: &mut ParamSet<T>, prefix: &str) {
        self.a.collect(params, &format!("{prefix}.a"));
        self.b.collect(params, &format!("{prefix}.b"));
    }
}

pub struct Unet<T: Scalar> {
    config: UnetConfig,
    enc: Vec<ConvPair<T>>,
    dec: Vec<ConvPair<T>>,
    head: Conv2d<T>,
}

impl<T: Scalar> Unet<T> {
    pub fn new<R: Rng>(rng: &mut R, config: &UnetConfig) -> Result<Self> {
        config.validate()?;
        let mut enc = Vec::new();
        for level in 0..config.depth {
            let cin = if level == 0 {
                config.in_channels
            } else {
                config.width(level - 1)
            };
            enc.push(ConvPair::new(rng, cin, config.width(level)));
        }
        let mut dec = Vec::new();
        for level in (0..config.depth.saturating_sub(1)).rev() {
            // Upsampled features from below carry width(level+1); the skip
            // adds width(level).
            let cin = config.width(level + 1) + config.width(level);
            dec.push(ConvPair::new(rng, cin, config.width(level)));
        }
        let head = Conv2d::new(rng, config.base_channels, config.in_channels, 1, 1, Init::Zero);
        Ok(Unet {
            config: config.clone(),
            enc,
            dec,
            head,
        })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.config
    }

    /// Runs the network on `(N, in_channels, h, w)`; `h` and `w` must be
    /// divisible by `2^(depth-1)` so every pooling halves cleanly.
    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.c != self.config.in_channels {
            return Err(Error::shape_mismatch(
                "unet_forward",
                s,
                Shape::new(s.n, self.config.in_channels, s.h, s.w),
            ));
        }
        let need = 1usize << (self.config.depth - 1);
        for (what, value) in [("H", s.h), ("W", s.w)] {
            if value % need != 0 {
                return Err(Error::not_divisible(
                    "unet_forward",
                    what,
                    value,
                    need,
                    "; pad the image so each wavelet band divides by the pooling factor",
                ));
            }
        }
        let mut skips = Vec::new();
        let mut cur = x.clone();
        for (level, pair) in self.enc.iter().enumerate() {
            cur = pair.forward(tape, &cur)?;
            if level + 1 < self.config.depth {
                skips.push(cur.clone());
                cur = ops::avg_pool2(tape, &cur)?;
            }
        }
        for pair in &self.dec {
            let up = ops::upsample_nearest2(tape, &cur);
            let skip = skips.pop().expect("one skip per decoder level");
            let joined = ops::concat_channels(tape, &[&up, &skip])?;
            cur = pair.forward(tape, &joined)?;
        }
        let delta = self.head.forward(tape, &cur)?;
        ops::add(tape, x, &delta)
    }

    pub fn collect(&self, params: &mut ParamSet<T>, prefix: &str) {
        for (level, pair) in self.enc.iter().enumerate() {
            pair.collect(params, &format!("{prefix}.enc{level}"));
        }
        for (i, pair) in self.dec.iter().enumerate() {
            let level = self.config.depth - 2 - i;
            pair.collect(params, &format!("{prefix}.dec{level}"));
        }
        self.head.collect(params, &format!("{prefix}.head"));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(in_channels: usize, depth: usize, base: usize) -> UnetConfig {
        UnetConfig {
            in_channels,
            depth,
            base_channels: base,
        }
    }

    #[test]
    fn forward_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let model = Unet::<f64>::new(&mut rng, &cfg(9, 3, 8)).unwrap();
        let x = Tensor::uniform(Shape::new(2, 9, 16, 12), -1.0, 1.0, &mut rng);
        let tape = Tape::disabled();
        let y = model.forward(&tape, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn identity_at_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let model = Unet::<f64>::new(&mut rng, &cfg(9, 3, 8)).unwrap();
        let x = Tensor::uniform(Shape::new(1, 9, 8, 8), -1.0, 1.0, &mut rng);
        let tape = Tape::disabled();
        let y = model.forward(&tape, &x).unwrap();
        for (a, b) in x.to_vec().iter().zip(y.to_vec()) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn depth_one_needs_no_divisibility() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let model = Unet::<f64>::new(&mut rng, &cfg(3, 1, 4)).unwrap();
        let x = Tensor::uniform(Shape::new(1, 3, 5, 7), -1.0, 1.0, &mut rng);
        let tape = Tape::disabled();
        let y = model.forward(&tape, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn rejects_indivisible_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let model = Unet::<f64>::new(&mut rng, &cfg(3, 3, 4)).unwrap();
        let x = Tensor::zeros(Shape::new(1, 3, 6, 8));
        let tape = Tape::disabled();
        let err = model.forward(&tape, &x).unwrap_err().to_string();
        assert!(err.contains("divisible"), "{err}");
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let model = Unet::<f64>::new(&mut rng, &cfg(9, 2, 4)).unwrap();
        let x = Tensor::zeros(Shape::new(1, 3, 8, 8));
        let tape = Tape::disabled();
        assert!(model.forward(&tape, &x).is_err());
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let model = Unet::<f64>::new(&mut rng, &cfg(9, 2, 4)).unwrap();
        let mut params = ParamSet::new();
        model.collect(&mut params, "hfr");
        let x = Tensor::uniform(Shape::new(1, 9, 8, 8), -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let y = model.forward(&tape, &x).unwrap();
        let loss = ops::mean_all(&tape, &ops::mul(&tape, &y, &y).unwrap());
        tape.backward(&loss).unwrap();
        for (name, p) in params.iter() {
            assert!(p.grad().is_some(), "no gradient for {name}");
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        // depth 3, base 16, in 9: enc pairs (9->16->16), (16->32->32),
        // (32->64->64); dec pairs (96->32->32), (48->16->16); head 16->9.
        fn pair(cin: usize, cout: usize) -> usize {
            (cin * cout * 9 + cout) + (cout * cout * 9 + cout)
        }
        let want = pair(9, 16)
            + pair(16, 32)
            + pair(32, 64)
            + pair(64 + 32, 32)
            + pair(32 + 16, 16)
            + (16 * 9 + 9);
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let model = Unet::<f64>::new(&mut rng, &cfg(9, 3, 16)).unwrap();
        let mut params = ParamSet::new();
        model.collect(&mut params, "hfr");
        assert_eq!(params.num_scalars(), want);
    }
}
