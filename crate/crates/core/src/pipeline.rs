//! End-to-end enhancement pipeline: wavelet split, low- and high-frequency
//! enhancement, reconstruction, and per-pixel refinement.
//!
//! The flow is `dwt2 -> stage 1 on LL, UNet on the stacked detail bands ->
//! idwt2 -> stage 2 on the reconstruction`. Stage 1 defaults to the
//! channel-attention transformer and stage 2 to the condition-modulated
//! refiner; either can be swapped for a plain 3-channel UNet to ablate its
//! contribution. Every sub-network is an identity map at initialization, and
//! the wavelet pair reconstructs perfectly, so the whole pipeline starts as
//! the identity.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dpr::{Dpr, DprConfig};
use crate::error::{Error, Result};
use crate::gsr::{Gsr, GsrConfig};
use crate::nn::ParamSet;
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::unet::{Unet, UnetConfig};
use crate::wavelet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage1Kind {
    Gsr,
    Unet,
}

impl FromStr for Stage1Kind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gsr" => Ok(Stage1Kind::Gsr),
            "unet" => Ok(Stage1Kind::Unet),
            other => Err(Error::InvalidArg(format!(
                "stage1 must be 'gsr' or 'unet', got '{other}'"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage2Kind {
    Dpr,
    Unet,
}

impl FromStr for Stage2Kind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dpr" => Ok(Stage2Kind::Dpr),
            "unet" => Ok(Stage2Kind::Unet),
            other => Err(Error::InvalidArg(format!(
                "stage2 must be 'dpr' or 'unet', got '{other}'"
            ))),
        }
    }
}

/// Which concrete network fills each enhancement stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationSpec {
    pub stage1: Stage1Kind,
    pub stage2: Stage2Kind,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec {
            stage1: Stage1Kind::Gsr,
            stage2: Stage2Kind::Dpr,
        }
    }
}

impl AblationSpec {
    /// Short tag like `gsr+dpr` for logs and metric files.
    pub fn tag(&self) -> String {
        let s1 = match self.stage1 {
            Stage1Kind::Gsr => "gsr",
            Stage1Kind::Unet => "unet",
        };
        let s2 = match self.stage2 {
            Stage2Kind::Dpr => "dpr",
            Stage2Kind::Unet => "unet",
        };
        format!("{s1}+{s2}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub ablation: AblationSpec,
    pub gsr: GsrConfig,
    /// Detail-band UNet; always 9 input channels (three stacked bands).
    pub hfr: UnetConfig,
    pub dpr: DprConfig,
    /// Depth of a UNet standing in for either ablated stage.
    pub ablation_unet_depth: usize,
    /// Base width of a stand-in UNet.
    pub ablation_unet_base_channels: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            ablation: AblationSpec::default(),
            gsr: GsrConfig::default(),
            hfr: UnetConfig {
                in_channels: 9,
                depth: 3,
                base_channels: 16,
            },
            dpr: DprConfig::default(),
            ablation_unet_depth: 3,
            ablation_unet_base_channels: 16,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.gsr.validate()?;
        self.hfr.validate()?;
        self.dpr.validate()?;
        if self.hfr.in_channels != 9 {
            return Err(Error::InvalidArg(format!(
                "hfr network must take 9 channels (three detail bands), got {}",
                self.hfr.in_channels
            )));
        }
        if self.ablation_unet_depth == 0 || self.ablation_unet_base_channels == 0 {
            return Err(Error::InvalidArg(
                "ablation unet depth and base_channels must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn stand_in_unet(&self) -> UnetConfig {
        UnetConfig {
            in_channels: 3,
            depth: self.ablation_unet_depth,
            base_channels: self.ablation_unet_base_channels,
        }
    }
}

enum Stage1<T: Scalar> {
    Gsr(Gsr<T>),
    Unet(Unet<T>),
}

enum Stage2<T: Scalar> {
    Dpr(Dpr<T>),
    Unet(Unet<T>),
}

/// All stage outputs from one pipeline pass, kept for loss wiring.
#[derive(Debug)]
pub struct ForwardParts<T: Scalar> {
    /// Output of stage 2: the enhanced image, unclamped.
    pub final_out: Tensor<T>,
    /// Enhanced LL band, range [0,2] nominally.
    pub ll_enh: Tensor<T>,
    /// Enhanced detail bands stacked as 9 channels.
    pub hf_enh: Tensor<T>,
    /// Reconstruction after IDWT, before stage 2.
    pub intermediate: Tensor<T>,
}

pub struct Pipeline<T: Scalar> {
    config: PipelineConfig,
    stage1: Stage1<T>,
    hfr: Unet<T>,
    stage2: Stage2<T>,
}

impl<T: Scalar> Pipeline<T> {
    /// Builds all stages deterministically: stage 1 draws from `seed`, the
    /// detail UNet from `seed + 1`, stage 2 from `seed + 2`, so swapping one
    /// stage never changes the others' initialization.
    pub fn new(config: &PipelineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let stage1 = {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match config.ablation.stage1 {
                Stage1Kind::Gsr => Stage1::Gsr(Gsr::new(&mut rng, &config.gsr)?),
                Stage1Kind::Unet => Stage1::Unet(Unet::new(&mut rng, &config.stand_in_unet())?),
            }
        };
        let hfr = {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            Unet::new(&mut rng, &config.hfr)?
        };
        let stage2 = {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
            match config.ablation.stage2 {
                Stage2Kind::Dpr => Stage2::Dpr(Dpr::new(&mut rng, &config.dpr)?),
                Stage2Kind::Unet => Stage2::Unet(Unet::new(&mut rng, &config.stand_in_unet())?),
            }
        };
        Ok(Pipeline {
            config: config.clone(),
            stage1,
            hfr,
            stage2,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Smallest value both image extents must divide by so every internal
    /// stage halves cleanly. 16 for all stock configurations.
    pub fn required_divisor(&self) -> usize {
        let stage1 = match &self.stage1 {
            // LL is input/2 and must divide by 8.
            Stage1::Gsr(_) => 16,
            Stage1::Unet(u) => 2usize << (u.config().depth - 1),
        };
        let hfr = 2usize << (self.config.hfr.depth - 1);
        let stage2 = match &self.stage2 {
            Stage2::Dpr(_) => 1,
            Stage2::Unet(u) => 1usize << (u.config().depth - 1),
        };
        let mut d = 2; // the wavelet split itself
        for v in [stage1, hfr, stage2] {
            d = lcm(d, v);
        }
        d
    }

    /// Runs the full pipeline. `input` is `(N, 3, H, W)` in [0,1] with both
    /// extents divisible by `required_divisor()`. The output is unclamped;
    /// clamp to [0,1] for display.
    pub fn forward(&self, tape: &Tape<T>, input: &Tensor<T>) -> Result<ForwardParts<T>> {
        let s = input.shape();
        let need = self.required_divisor();
        for (what, value) in [("H", s.h), ("W", s.w)] {
            if value % need != 0 {
                return Err(Error::not_divisible(
                    "pipeline_forward",
                    what,
                    value,
                    need,
                    "; reflect-pad the image up to the next multiple first",
                ));
            }
        }
        let bands = wavelet::dwt2(tape, input);
        let ll_enh = match &self.stage1 {
            Stage1::Gsr(m) => m.forward(tape, &bands.ll)?,
            Stage1::Unet(m) => m.forward(tape, &bands.ll)?,
        };
        let hf = ops::concat_channels(tape, &[&bands.lh, &bands.hl, &bands.hh])?;
        let hf_enh = self.hfr.forward(tape, &hf)?;
        let lh = ops::slice_channels(tape, &hf_enh, 0, 3)?;
        let hl = ops::slice_channels(tape, &hf_enh, 3, 6)?;
        let hh = ops::slice_channels(tape, &hf_enh, 6, 9)?;
        let enhanced_bands = bands.with_ll(ll_enh.clone()).with_high(lh, hl, hh);
        let intermediate = wavelet::idwt2(tape, &enhanced_bands);
        let final_out = match &self.stage2 {
            // The reconstruction also serves as the conditioning image: it is
            // the most faithful full-resolution estimate available pre-refine.
            Stage2::Dpr(m) => m.forward(tape, &intermediate, &intermediate)?,
            Stage2::Unet(m) => m.forward(tape, &intermediate)?,
        };
        Ok(ForwardParts {
            final_out,
            ll_enh,
            hf_enh,
            intermediate,
        })
    }

    /// Every trainable parameter in a stable order: stage 1, detail UNet,
    /// stage 2.
    pub fn params(&self) -> ParamSet<T> {
        let mut params = ParamSet::new();
        match &self.stage1 {
            Stage1::Gsr(m) => m.collect(&mut params, "stage1"),
            Stage1::Unet(m) => m.collect(&mut params, "stage1"),
        }
        self.hfr.collect(&mut params, "hfr");
        match &self.stage2 {
            Stage2::Dpr(m) => m.collect(&mut params, "stage2"),
            Stage2::Unet(m) => m.collect(&mut params, "stage2"),
        }
        params
    }
}

/// Small-but-complete configuration shared by tests across modules: every
/// stage present, every extent at its minimum useful size.
#[cfg(test)]
pub(crate) fn tiny_config() -> PipelineConfig {
    PipelineConfig {
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
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn required_divisor_is_sixteen_for_defaults() {
        let p = Pipeline::<f64>::new(&PipelineConfig::default(), 0).unwrap();
        assert_eq!(p.required_divisor(), 16);
        let p = Pipeline::<f64>::new(&tiny_config(), 0).unwrap();
        assert_eq!(p.required_divisor(), 16); // GSR still needs LL % 8
    }

    #[test]
    fn forward_preserves_shape_and_band_shapes() {
        let p = Pipeline::<f64>::new(&tiny_config(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let x = Tensor::uniform(Shape::new(1, 3, 32, 48), 0.0, 1.0, &mut rng);
        let tape = Tape::disabled();
        let parts = p.forward(&tape, &x).unwrap();
        assert_eq!(parts.final_out.shape(), x.shape());
        assert_eq!(parts.intermediate.shape(), x.shape());
        assert_eq!(parts.ll_enh.shape(), Shape::new(1, 3, 16, 24));
        assert_eq!(parts.hf_enh.shape(), Shape::new(1, 9, 16, 24));
    }

    #[test]
    fn identity_at_initialization_f64() {
        let p = Pipeline::<f64>::new(&tiny_config(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let x = Tensor::uniform(Shape::new(1, 3, 32, 32), 0.0, 1.0, &mut rng);
        let tape = Tape::disabled();
        let parts = p.forward(&tape, &x).unwrap();
        for (a, b) in x.to_vec().iter().zip(parts.final_out.to_vec()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn identity_at_initialization_f32() {
        let p = Pipeline::<f32>::new(&tiny_config(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let x = Tensor::<f32>::uniform(Shape::new(1, 3, 32, 32), 0.0, 1.0, &mut rng);
        let tape = Tape::disabled();
        let parts = p.forward(&tape, &x).unwrap();
        for (a, b) in x.to_vec().iter().zip(parts.final_out.to_vec()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-5);
        }
    }

    #[test]
    fn every_ablation_combination_runs_and_is_identity_at_init() {
        for (s1, s2) in [
            (Stage1Kind::Gsr, Stage2Kind::Dpr),
            (Stage1Kind::Gsr, Stage2Kind::Unet),
            (Stage1Kind::Unet, Stage2Kind::Dpr),
            (Stage1Kind::Unet, Stage2Kind::Unet),
        ] {
            let mut cfg = tiny_config();
            cfg.ablation = AblationSpec {
                stage1: s1,
                stage2: s2,
            };
            let p = Pipeline::<f64>::new(&cfg, 6).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(64);
            let x = Tensor::uniform(Shape::new(1, 3, 32, 32), 0.0, 1.0, &mut rng);
            let tape = Tape::disabled();
            let parts = p.forward(&tape, &x).unwrap();
            assert_eq!(parts.final_out.shape(), x.shape(), "{}", cfg.ablation.tag());
            for (a, b) in x.to_vec().iter().zip(parts.final_out.to_vec()) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rejects_indivisible_input_with_hint() {
        let p = Pipeline::<f64>::new(&tiny_config(), 7).unwrap();
        let x = Tensor::zeros(Shape::new(1, 3, 24, 32));
        let tape = Tape::disabled();
        let err = p.forward(&tape, &x).unwrap_err().to_string();
        assert!(err.contains("pad"), "{err}");
    }

    #[test]
    fn seeded_builds_are_identical_and_stage_seeds_are_independent() {
        let a = Pipeline::<f64>::new(&tiny_config(), 11).unwrap();
        let b = Pipeline::<f64>::new(&tiny_config(), 11).unwrap();
        let (pa, pb) = (a.params(), b.params());
        assert_eq!(pa.len(), pb.len());
        for ((na, ta), (nb, tb)) in pa.iter().zip(pb.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec());
        }
        // Swapping stage 2 must not disturb stage 1 or the detail UNet.
        let mut cfg = tiny_config();
        cfg.ablation.stage2 = Stage2Kind::Unet;
        let c = Pipeline::<f64>::new(&cfg, 11).unwrap();
        let pc = c.params();
        for ((na, ta), (nc, tc)) in pa.iter().zip(pc.iter()) {
            if na.starts_with("stage2") {
                break;
            }
            assert_eq!(na, nc);
            assert_eq!(ta.to_vec(), tc.to_vec());
        }
    }

    #[test]
    fn gradients_reach_all_parameters() {
        let p = Pipeline::<f64>::new(&tiny_config(), 13).unwrap();
        let params = p.params();
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let x = Tensor::uniform(Shape::new(1, 3, 32, 32), 0.0, 1.0, &mut rng);
        let target = Tensor::uniform(Shape::new(1, 3, 32, 32), 0.0, 1.0, &mut rng);
        let tape = Tape::new();
        let parts = p.forward(&tape, &x).unwrap();
        let d = ops::sub(&tape, &parts.final_out, &target).unwrap();
        let loss = ops::mean_all(&tape, &ops::mul(&tape, &d, &d).unwrap());
        tape.backward(&loss).unwrap();
        for (name, t) in params.iter() {
            assert!(t.grad().is_some(), "no gradient for {name}");
        }
    }

    #[test]
    fn ablation_tags() {
        assert_eq!(AblationSpec::default().tag(), "gsr+dpr");
        let spec = AblationSpec {
            stage1: Stage1Kind::Unet,
            stage2: Stage2Kind::Unet,
        };
        assert_eq!(spec.tag(), "unet+unet");
        assert_eq!("gsr".parse::<Stage1Kind>().unwrap(), Stage1Kind::Gsr);
        assert_eq!("dpr".parse::<Stage2Kind>().unwrap(), Stage2Kind::Dpr);
        assert!("vgg".parse::<Stage1Kind>().is_err());
        assert!("vgg".parse::<Stage2Kind>().is_err());
    }

    #[test]
    fn config_validation_catches_bad_hfr_channels() {
        let mut cfg = tiny_config();
        cfg.hfr.in_channels = 3;
        assert!(Pipeline::<f64>::new(&cfg, 0).is_err());
    }
}
