//! Global stylization remapping: a four-level channel-attention transformer
//! encoder-decoder that re-renders the low-frequency band.
//!
//! Attention here runs across channels, not pixels: queries and keys are
//! per-channel descriptors over the whole spatial extent, so the attention
//! matrix is `(C/heads) x (C/heads)` regardless of resolution. Each block is
//! attention plus a gated feed-forward, both behind channel layer norms and
//! residual adds.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, LayerNormChannel, ParamSet};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GsrConfig {
    /// Channel width of the finest level; level `l` works at `C * 2^l`.
    pub base_channels: usize,
    /// Transformer blocks per level, finest to coarsest.
    pub blocks_per_level: [usize; 4],
    /// Attention heads per level, finest to coarsest.
    pub heads_per_level: [usize; 4],
    /// Feed-forward expansion factor.
    pub ffn_expansion: usize,
}

impl Default for GsrConfig {
    fn default() -> Self {
        GsrConfig {
            base_channels: 16,
            blocks_per_level: [1, 2, 2, 4],
            heads_per_level: [1, 2, 2, 4],
            ffn_expansion: 2,
        }
    }
}

impl GsrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.base_channels % 4 != 0 {
            return Err(Error::InvalidArg(format!(
                "gsr base_channels must be a positive multiple of 4 (pixel-shuffle upsampling), got {}",
                self.base_channels
            )));
        }
        if self
            .blocks_per_level
            .windows(2)
            .any(|w| w[0] > w[1])
        {
            return Err(Error::InvalidArg(format!(
                "gsr blocks_per_level must be non-decreasing, got {:?}",
                self.blocks_per_level
            )));
        }
        for &h in &self.heads_per_level {
            if h == 0 || self.base_channels % h != 0 {
                return Err(Error::InvalidArg(format!(
                    "gsr base_channels {} must be divisible by every head count, got heads {:?}",
                    self.base_channels, self.heads_per_level
                )));
            }
        }
        if self.ffn_expansion == 0 {
            return Err(Error::InvalidArg("gsr ffn_expansion must be >= 1".into()));
        }
        Ok(())
    }

    /// Channel width at level `l`.
    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// One transformer block: channel attention and gated feed-forward, each
/// behind a channel layer norm with a residual add.
struct TransformerBlock<T: Scalar> {
    heads: usize,
    norm_attn: LayerNormChannel<T>,
    qkv_point: Conv2d<T>,
    qkv_depth: Conv2d<T>,
    temperature: Tensor<T>,
    attn_out: Conv2d<T>,
    norm_ffn: LayerNormChannel<T>,
    ffn_expand: Conv2d<T>,
    ffn_depth: Conv2d<T>,
    ffn_project: Conv2d<T>,
}

impl<T: Scalar> TransformerBlock<T> {
    fn new<R: Rng>(rng: &mut R, channels: usize, heads: usize, ffn_expansion: usize) -> Self {
        let hidden = 2 * ffn_expansion * channels;
        TransformerBlock {
            heads,
            norm_attn: LayerNormChannel::new(channels),
            qkv_point: Conv2d::new(rng, channels, 3 * channels, 1, 1, Init::Uniform),
            qkv_depth: Conv2d::new(rng, 3 * channels, 3 * channels, 3, 3 * channels, Init::Uniform),
            temperature: Tensor::full(Shape::new(1, heads, 1, 1), T::one()).into_param(),
            attn_out: Conv2d::new(rng, channels, channels, 1, 1, Init::Uniform),
            norm_ffn: LayerNormChannel::new(channels),
            ffn_expand: Conv2d::new(rng, channels, hidden, 1, 1, Init::Uniform),
            ffn_depth: Conv2d::new(rng, hidden, hidden, 3, hidden, Init::Uniform),
            ffn_project: Conv2d::new(rng, hidden / 2, channels, 1, 1, Init::Uniform),
        }
    }

    /// Multi-head channel attention with the residual add.
    fn mca_forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let c = s.c;
        if c % self.heads != 0 {
            return Err(Error::InvalidArg(format!(
                "channel count {c} not divisible by {} heads",
                self.heads
            )));
        }
        let y = self.norm_attn.forward(tape, x)?;
        let qkv = self.qkv_depth.forward(tape, &self.qkv_point.forward(tape, &y)?)?;
        let q = ops::slice_channels(tape, &qkv, 0, c)?;
        let k = ops::slice_channels(tape, &qkv, c, 2 * c)?;
        let v = ops::slice_channels(tape, &qkv, 2 * c, 3 * c)?;

        // (N, C, h, w) -> (N, heads, C/heads, h*w): per-channel spatial rows.
        let rows = Shape::new(s.n, self.heads, c / self.heads, s.h * s.w);
        let q = ops::l2norm_rows(tape, &ops::view(tape, &q, rows)?);
        let k = ops::l2norm_rows(tape, &ops::view(tape, &k, rows)?);
        let v = ops::view(tape, &v, rows)?;

        let logits = ops::matmul(tape, &q, &ops::transpose_last2(tape, &k))?;
        let scaled = ops::mul_axis1(tape, &logits, &self.temperature)?;
        let attn = ops::softmax(tape, &scaled, 3);
        let mixed = ops::matmul(tape, &attn, &v)?;
        let merged = ops::view(tape, &mixed, s)?;
        let projected = self.attn_out.forward(tape, &merged)?;
        ops::add(tape, x, &projected)
    }

    /// Gated feed-forward with the residual add.
    fn ifm_forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.norm_ffn.forward(tape, x)?;
        let e = self.ffn_depth.forward(tape, &self.ffn_expand.forward(tape, &y)?)?;
        let hidden = e.shape().c;
        let gate = ops::slice_channels(tape, &e, 0, hidden / 2)?;
        let value = ops::slice_channels(tape, &e, hidden / 2, hidden)?;
        let gated = ops::mul(tape, &ops::gelu(tape, &gate), &value)?;
        let projected = self.ffn_project.forward(tape, &gated)?;
        ops::add(tape, x, &projected)
    }

    fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.mca_forward(tape, x)?;
        self.ifm_forward(tape, &x)
    }

    fn collect(&self, params: &mut ParamSet<T>, prefix: &str) {
        self.norm_attn.collect(params, &format!("{prefix}.norm_attn"));
        self.qkv_point.collect(params, &format!("{prefix}.qkv_point"));
        self.qkv_depth.collect(params, &format!("{prefix}.qkv_depth"));
        params.add(format!("{prefix}.temperature"), self.temperature.clone());
        self.attn_out.collect(params, &format!("{prefix}.attn_out"));
        self.norm_ffn.collect(params, &format!("{prefix}.norm_ffn"));
        self.ffn_expand.collect(params, &format!("{prefix}.ffn_expand"));
        self.ffn_depth.collect(params, &format!("{prefix}.ffn_depth"));
        self.ffn_project.collect(params, &format!("{prefix}.ffn_project"));
    }
}

/// The full low-frequency enhancement network.
pub struct Gsr<T: Scalar> {
    config: GsrConfig,
    embed: Conv2d<T>,
    enc_blocks: Vec<Vec<TransformerBlock<T>>>,
    downs: Vec<Conv2d<T>>,
    bottleneck: Vec<TransformerBlock<T>>,
    fusions: Vec<Conv2d<T>>,
    dec_blocks: Vec<Vec<TransformerBlock<T>>>,
    head: Conv2d<T>,
}

impl<T: Scalar> Gsr<T> {
    pub fn new<R: Rng>(rng: &mut R, config: &GsrConfig) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let embed = Conv2d::new(rng, 3, c, 3, 1, Init::Uniform);
        let mut enc_blocks = Vec::new();
        let mut downs = Vec::new();
        for level in 0..3 {
            let w = config.width(level);
            enc_blocks.push(
                (0..config.blocks_per_level[level])
                    .map(|_| {
                        TransformerBlock::new(
                            rng,
                            w,
                            config.heads_per_level[level],
                            config.ffn_expansion,
                        )
                    })
                    .collect(),
            );
            // pixel_unshuffle quadruples channels; the 1x1 conv halves the
            // result so each level doubles: C -> 2C -> 4C -> 8C.
            downs.push(Conv2d::new(rng, 4 * w, 2 * w, 1, 1, Init::Uniform));
        }
        let bottleneck = (0..config.blocks_per_level[3])
            .map(|_| {
                TransformerBlock::new(
                    rng,
                    config.width(3),
                    config.heads_per_level[3],
                    config.ffn_expansion,
                )
            })
            .collect();
        let mut fusions = Vec::new();
        let mut dec_blocks = Vec::new();
        for level in (0..3).rev() {
            let w = config.width(level);
            // Upsampled features carry w/2 channels, the skip carries w.
            fusions.push(Conv2d::new(rng, w / 2 + w, w, 1, 1, Init::Uniform));
            dec_blocks.push(
                (0..config.blocks_per_level[level])
                    .map(|_| {
                        TransformerBlock::new(
                            rng,
                            w,
                            config.heads_per_level[level],
                            config.ffn_expansion,
                        )
                    })
                    .collect(),
            );
        }
        let head = Conv2d::new(rng, c, 3, 3, 1, Init::Zero);
        Ok(Gsr {
            config: config.clone(),
            embed,
            enc_blocks,
            downs,
            bottleneck,
            fusions,
            dec_blocks,
            head,
        })
    }

    pub fn config(&self) -> &GsrConfig {
        &self.config
    }

    /// Enhances an LL band `(N, 3, h, w)`; `h`, `w` must be divisible by 8
    /// for the three internal downsamplings.
    pub fn forward(&self, tape: &Tape<T>, ll: &Tensor<T>) -> Result<Tensor<T>> {
        let s = ll.shape();
        for (what, value) in [("H", s.h), ("W", s.w)] {
            if value % 8 != 0 {
                return Err(Error::not_divisible(
                    "gsr_forward",
                    what,
                    value,
                    8,
                    "; pad the image so each wavelet band is a multiple of 8",
                ));
            }
        }
        let mut x = self.embed.forward(tape, ll)?;
        let mut skips = Vec::new();
        for level in 0..3 {
            for block in &self.enc_blocks[level] {
                x = block.forward(tape, &x)?;
            }
            skips.push(x.clone());
            x = self.downs[level].forward(tape, &ops::pixel_unshuffle(tape, &x, 2)?)?;
        }
        for block in &self.bottleneck {
            x = block.forward(tape, &x)?;
        }
        for (i, level) in (0..3).rev().enumerate() {
            let up = ops::pixel_shuffle(tape, &x, 2)?;
            let fused = ops::concat_channels(tape, &[&up, &skips[level]])?;
            x = self.fusions[i].forward(tape, &fused)?;
            for block in &self.dec_blocks[i] {
                x = block.forward(tape, &x)?;
            }
        }
        let delta = self.head.forward(tape, &x)?;
        ops::add(tape, ll, &delta)
    }

    pub fn collect(&self, params: &mut ParamSet<T>, prefix: &str) {
        self.embed.collect(params, &format!("{prefix}.embed"));
        for (level, blocks) in self.enc_blocks.iter().enumerate() {
            for (b, block) in blocks.iter().enumerate() {
                block.collect(params, &format!("{prefix}.enc{level}.block{b}"));
            }
            self.downs[level].collect(params, &format!("{prefix}.down{level}"));
        }
        for (b, block) in self.bottleneck.iter().enumerate() {
            block.collect(params, &format!("{prefix}.mid.block{b}"));
        }
        for (i, level) in (0..3).rev().enumerate() {
            self.fusions[i].collect(params, &format!("{prefix}.fuse{level}"));
            for (b, block) in self.dec_blocks[i].iter().enumerate() {
                block.collect(params, &format!("{prefix}.dec{level}.block{b}"));
            }
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

    fn tiny_config() -> GsrConfig {
        GsrConfig {
            base_channels: 4,
            blocks_per_level: [1, 1, 1, 1],
            heads_per_level: [1, 2, 2, 4],
            ffn_expansion: 2,
        }
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut c = GsrConfig::default();
        assert!(c.validate().is_ok());
        c.blocks_per_level = [2, 1, 2, 4];
        assert!(c.validate().is_err());
        let mut c = GsrConfig::default();
        c.heads_per_level = [1, 3, 2, 4]; // 16 % 3 != 0
        assert!(c.validate().is_err());
        let mut c = GsrConfig::default();
        c.base_channels = 6; // not a multiple of 4
        assert!(c.validate().is_err());
    }

    #[test]
    fn forward_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = Gsr::<f64>::new(&mut rng, &tiny_config()).unwrap();
        let x = Tensor::uniform(Shape::new(1, 3, 16, 24), 0.0, 2.0, &mut rng);
        let tape = Tape::disabled();
        let y = model.forward(&tape, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn rejects_indivisible_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let model = Gsr::<f64>::new(&mut rng, &tiny_config()).unwrap();
        let x = Tensor::zeros(Shape::new(1, 3, 12, 16));
        let tape = Tape::disabled();
        let err = model.forward(&tape, &x).unwrap_err().to_string();
        assert!(err.contains("pad"), "error should hint at padding: {err}");
    }

    #[test]
    fn identity_at_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let model = Gsr::<f64>::new(&mut rng, &tiny_config()).unwrap();
        let x = Tensor::uniform(Shape::new(1, 3, 16, 16), 0.0, 2.0, &mut rng);
        let tape = Tape::disabled();
        let y = model.forward(&tape, &x).unwrap();
        for (a, b) in x.to_vec().iter().zip(y.to_vec()) {
            assert_eq!(*a, b, "zero-initialized head must reproduce the input");
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(24);
            let model = Gsr::<f64>::new(&mut rng, &tiny_config()).unwrap();
            let x = Tensor::uniform(Shape::new(1, 3, 8, 8), 0.0, 1.0, &mut rng);
            let tape = Tape::disabled();
            model.forward(&tape, &x).unwrap().to_vec()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        // Reconstructed here at op level: softmax over the last axis of the
        // scaled channel-similarity logits always normalizes.
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let block = TransformerBlock::<f64>::new(&mut rng, 8, 2, 2);
        let x = Tensor::uniform(Shape::new(1, 8, 6, 6), -1.0, 1.0, &mut rng);
        let tape = Tape::disabled();
        let y = block.mca_forward(&tape, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        // The softmax property itself is covered in ops; here we check the
        // block runs with multiple heads and finite output.
        assert!(y.to_vec().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zeroed_projections_make_blocks_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let mut block = TransformerBlock::<f64>::new(&mut rng, 4, 2, 2);
        block.attn_out = {
            let mut c = Conv2d::new(&mut rng, 4, 4, 1, 1, Init::Zero);
            c.fill_bias(0.0);
            c
        };
        block.ffn_project = {
            let mut c = Conv2d::new(&mut rng, 8, 4, 1, 1, Init::Zero);
            c.fill_bias(0.0);
            c
        };
        let x = Tensor::uniform(Shape::new(1, 4, 5, 5), -1.0, 1.0, &mut rng);
        let tape = Tape::disabled();
        let y = block.forward(&tape, &x).unwrap();
        for (a, b) in x.to_vec().iter().zip(y.to_vec()) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let model = Gsr::<f64>::new(&mut rng, &tiny_config()).unwrap();
        let mut params = ParamSet::new();
        model.collect(&mut params, "gsr");
        let x = Tensor::uniform(Shape::new(1, 3, 8, 8), 0.0, 2.0, &mut rng);
        let target = Tensor::uniform(Shape::new(1, 3, 8, 8), 0.0, 2.0, &mut rng);
        let tape = Tape::new();
        let y = model.forward(&tape, &x).unwrap();
        let d = ops::sub(&tape, &y, &target).unwrap();
        let loss = ops::mean_all(&tape, &ops::mul(&tape, &d, &d).unwrap());
        tape.backward(&loss).unwrap();
        for (name, p) in params.iter() {
            let g = p.grad();
            assert!(g.is_some(), "no gradient for {name}");
            assert!(
                g.unwrap().iter().all(|v| v.is_finite()),
                "non-finite gradient for {name}"
            );
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        // Independent arithmetic over the declared layer shapes.
        fn block_params(c: usize, heads: usize, gamma: usize) -> usize {
            let hidden = 2 * gamma * c;
            let norm = 2 * c; // gain + shift
            let qkv_point = c * 3 * c + 3 * c;
            let qkv_depth = 3 * c * 9 + 3 * c;
            let temp = heads;
            let attn_out = c * c + c;
            let ffn_expand = c * hidden + hidden;
            let ffn_depth = hidden * 9 + hidden;
            let ffn_project = (hidden / 2) * c + c;
            2 * norm + qkv_point + qkv_depth + temp + attn_out + ffn_expand + ffn_depth + ffn_project
        }
        let cfg = GsrConfig::default(); // C = 16, blocks [1,2,2,4], heads [1,2,2,4]
        let c = cfg.base_channels;
        let mut want = 3 * c * 9 + c; // embed
        for level in 0..3 {
            let w = c << level;
            want += cfg.blocks_per_level[level] * block_params(w, cfg.heads_per_level[level], cfg.ffn_expansion);
            want += 4 * w * 2 * w + 2 * w; // down conv
        }
        want += cfg.blocks_per_level[3] * block_params(c << 3, cfg.heads_per_level[3], cfg.ffn_expansion);
        for level in (0..3).rev() {
            let w = c << level;
            want += (w / 2 + w) * w + w; // fusion conv
            want += cfg.blocks_per_level[level] * block_params(w, cfg.heads_per_level[level], cfg.ffn_expansion);
        }
        want += c * 3 * 9 + 3; // head

        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let model = Gsr::<f64>::new(&mut rng, &cfg).unwrap();
        let mut params = ParamSet::new();
        model.collect(&mut params, "gsr");
        assert_eq!(params.num_scalars(), want);
    }

    #[test]
    fn enhancement_changes_after_nudging_head_weights() {
        // Sanity that the head actually couples the network to the output.
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let model = Gsr::<f64>::new(&mut rng, &tiny_config()).unwrap();
        let w = model.head.weight.clone();
        let mut data = w.to_vec();
        for v in &mut data {
            *v = 0.01;
        }
        w.load_data(&data).unwrap();
        let x = Tensor::uniform(Shape::new(1, 3, 8, 8), 0.0, 2.0, &mut rng);
        let tape = Tape::disabled();
        let y = model.forward(&tape, &x).unwrap();
        let diff: f64 = x
            .to_vec()
            .iter()
            .zip(y.to_vec())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6);
        assert_abs_diff_eq!(y.shape().h as f64, 8.0); // shape still preserved
    }
}
