//! Plain-text run configuration: `key = value` lines with `#` comments.
//!
//! Unknown keys and malformed values are hard errors so a typo never silently
//! trains the wrong model. The subset of keys that fixes the model shape is
//! also serialized into checkpoints as a canonical echo string, letting a
//! checkpoint rebuild its network and refuse to load into a different one.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use crate::dpr::DprConfig;
use crate::error::{Error, Result};
use crate::gsr::GsrConfig;
use crate::losses::LossWeights;
use crate::pipeline::{AblationSpec, PipelineConfig};
use crate::unet::UnetConfig;

/// Everything a training run needs, with defaults for all but the paths.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub pipeline: PipelineConfig,
    pub weights: LossWeights,
    /// Seed of the frozen perceptual feature extractor.
    pub phi_seed: u64,
    /// Master seed; stage builds, shuffling, and augmentation derive from it.
    pub seed: u64,
    pub lr: f64,
    pub steps: usize,
    /// Square crop side used during training; must divide by 16.
    pub crop: usize,
    /// A checkpoint is written every this many steps (and at the end).
    pub checkpoint_every: usize,
    pub input_dir: PathBuf,
    pub target_dir: PathBuf,
    /// Optional train/val split file; without it every pair trains.
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl TrainConfig {
    /// Defaults for every field that has one; paths start empty and are
    /// required in parsed files.
    pub fn with_paths(input_dir: PathBuf, target_dir: PathBuf, out_dir: PathBuf) -> Self {
        TrainConfig {
            pipeline: PipelineConfig::default(),
            weights: LossWeights::default(),
            phi_seed: 1234,
            seed: 0,
            lr: 1e-4,
            steps: 2000,
            crop: 64,
            checkpoint_every: 500,
            input_dir,
            target_dir,
            manifest: None,
            out_dir,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.weights.validate()?;
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::ConfigValue {
                key: "lr".into(),
                msg: format!("must be a positive number, got {}", self.lr),
            });
        }
        if self.crop == 0 || self.crop % 16 != 0 {
            return Err(Error::ConfigValue {
                key: "crop".into(),
                msg: format!("must be a positive multiple of 16, got {}", self.crop),
            });
        }
        if self.checkpoint_every == 0 {
            return Err(Error::ConfigValue {
                key: "checkpoint_every".into(),
                msg: "must be >= 1".into(),
            });
        }
        Ok(())
    }
}

/// Splits a config text into `(key, value)` pairs, rejecting malformed lines
/// and duplicate keys.
fn split_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut pairs = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::ConfigValue {
                key: format!("line {}", lineno + 1),
                msg: format!("expected `key = value`, got `{line}`"),
            });
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if pairs.insert(key.clone(), value).is_some() {
            return Err(Error::ConfigValue {
                key,
                msg: "duplicate key".into(),
            });
        }
    }
    Ok(pairs)
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::ConfigValue {
        key: key.into(),
        msg: format!("cannot parse `{value}`"),
    })
}

fn parse_four(key: &str, value: &str) -> Result<[usize; 4]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(Error::ConfigValue {
            key: key.into(),
            msg: format!("expected four comma-separated integers, got `{value}`"),
        });
    }
    let mut out = [0usize; 4];
    for (slot, part) in out.iter_mut().zip(parts) {
        *slot = parse_num(key, part)?;
    }
    Ok(out)
}

/// Parses a full training configuration. The three directory keys
/// `input_dir`, `target_dir`, and `out_dir` are required; everything else
/// falls back to its default.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut pairs = split_pairs(text)?;
    let mut take = |key: &str| pairs.remove(key);

    let require = |key: &str, v: Option<String>| -> Result<PathBuf> {
        v.map(PathBuf::from)
            .ok_or_else(|| Error::MissingConfigKey(key.into()))
    };
    let input_dir = require("input_dir", take("input_dir"))?;
    let target_dir = require("target_dir", take("target_dir"))?;
    let out_dir = require("out_dir", take("out_dir"))?;
    let mut config = TrainConfig::with_paths(input_dir, target_dir, out_dir);
    config.manifest = take("manifest").map(PathBuf::from);

    if let Some(v) = take("stage1") {
        config.pipeline.ablation.stage1 = v.parse()?;
    }
    if let Some(v) = take("stage2") {
        config.pipeline.ablation.stage2 = v.parse()?;
    }
    if let Some(v) = take("gsr_base_channels") {
        config.pipeline.gsr.base_channels = parse_num("gsr_base_channels", &v)?;
    }
    if let Some(v) = take("gsr_blocks") {
        config.pipeline.gsr.blocks_per_level = parse_four("gsr_blocks", &v)?;
    }
    if let Some(v) = take("gsr_heads") {
        config.pipeline.gsr.heads_per_level = parse_four("gsr_heads", &v)?;
    }
    if let Some(v) = take("gsr_ffn_expansion") {
        config.pipeline.gsr.ffn_expansion = parse_num("gsr_ffn_expansion", &v)?;
    }
    if let Some(v) = take("hfr_depth") {
        config.pipeline.hfr.depth = parse_num("hfr_depth", &v)?;
    }
    if let Some(v) = take("hfr_base_channels") {
        config.pipeline.hfr.base_channels = parse_num("hfr_base_channels", &v)?;
    }
    if let Some(v) = take("dpr_refine_layers") {
        config.pipeline.dpr.refine_layers = parse_num("dpr_refine_layers", &v)?;
    }
    if let Some(v) = take("dpr_refine_channels") {
        config.pipeline.dpr.refine_channels = parse_num("dpr_refine_channels", &v)?;
    }
    if let Some(v) = take("dpr_cond_dim") {
        config.pipeline.dpr.cond_dim = parse_num("dpr_cond_dim", &v)?;
    }
    if let Some(v) = take("dpr_encoder_blocks") {
        config.pipeline.dpr.encoder_blocks = parse_num("dpr_encoder_blocks", &v)?;
    }
    if let Some(v) = take("ablation_unet_depth") {
        config.pipeline.ablation_unet_depth = parse_num("ablation_unet_depth", &v)?;
    }
    if let Some(v) = take("ablation_unet_base_channels") {
        config.pipeline.ablation_unet_base_channels =
            parse_num("ablation_unet_base_channels", &v)?;
    }

    if let Some(v) = take("phi_seed") {
        config.phi_seed = parse_num("phi_seed", &v)?;
    }
    if let Some(v) = take("w_lab") {
        config.weights.w_lab = parse_num("w_lab", &v)?;
    }
    if let Some(v) = take("w_ms") {
        config.weights.w_ms = parse_num("w_ms", &v)?;
    }
    for k in 0..6 {
        let key = format!("lambda_l{k}");
        if let Some(v) = take(&key) {
            config.weights.lambda_l[k] = parse_num(&key, &v)?;
        }
    }
    if let Some(v) = take("lambda_r") {
        config.weights.lambda_r = parse_num("lambda_r", &v)?;
    }
    if let Some(v) = take("lambda_smooth") {
        config.weights.lambda_smooth = parse_num("lambda_smooth", &v)?;
    }
    if let Some(v) = take("smooth_l1_beta") {
        config.weights.smooth_l1_beta = parse_num("smooth_l1_beta", &v)?;
    }

    if let Some(v) = take("seed") {
        config.seed = parse_num("seed", &v)?;
    }
    if let Some(v) = take("lr") {
        config.lr = parse_num("lr", &v)?;
    }
    if let Some(v) = take("steps") {
        config.steps = parse_num("steps", &v)?;
    }
    if let Some(v) = take("crop") {
        config.crop = parse_num("crop", &v)?;
    }
    if let Some(v) = take("checkpoint_every") {
        config.checkpoint_every = parse_num("checkpoint_every", &v)?;
    }

    if let Some(key) = pairs.into_keys().next() {
        return Err(Error::UnknownConfigKey(key));
    }
    config.validate()?;
    Ok(config)
}

/// Keys of the canonical model echo, in serialization order.
const ECHO_KEYS: [&str; 14] = [
    "stage1",
    "stage2",
    "gsr_base_channels",
    "gsr_blocks",
    "gsr_heads",
    "gsr_ffn_expansion",
    "hfr_depth",
    "hfr_base_channels",
    "dpr_refine_layers",
    "dpr_refine_channels",
    "dpr_cond_dim",
    "dpr_encoder_blocks",
    "ablation_unet_depth",
    "ablation_unet_base_channels",
];

fn echo_value(p: &PipelineConfig, key: &str) -> String {
    let four = |v: [usize; 4]| format!("{},{},{},{}", v[0], v[1], v[2], v[3]);
    match key {
        "stage1" => p.ablation.tag().split('+').next().unwrap().to_string(),
        "stage2" => p.ablation.tag().split('+').nth(1).unwrap().to_string(),
        "gsr_base_channels" => p.gsr.base_channels.to_string(),
        "gsr_blocks" => four(p.gsr.blocks_per_level),
        "gsr_heads" => four(p.gsr.heads_per_level),
        "gsr_ffn_expansion" => p.gsr.ffn_expansion.to_string(),
        "hfr_depth" => p.hfr.depth.to_string(),
        "hfr_base_channels" => p.hfr.base_channels.to_string(),
        "dpr_refine_layers" => p.dpr.refine_layers.to_string(),
        "dpr_refine_channels" => p.dpr.refine_channels.to_string(),
        "dpr_cond_dim" => p.dpr.cond_dim.to_string(),
        "dpr_encoder_blocks" => p.dpr.encoder_blocks.to_string(),
        "ablation_unet_depth" => p.ablation_unet_depth.to_string(),
        "ablation_unet_base_channels" => p.ablation_unet_base_channels.to_string(),
        other => unreachable!("unlisted echo key {other}"),
    }
}

/// Canonical, order-stable description of the model shape. Two configs build
/// the same network exactly when their echoes are equal.
pub fn model_echo(p: &PipelineConfig) -> String {
    ECHO_KEYS
        .iter()
        .map(|key| format!("{key} = {}", echo_value(p, key)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Rebuilds a pipeline configuration from an echo string (every key
/// required).
pub fn parse_echo(echo: &str) -> Result<PipelineConfig> {
    let mut pairs = split_pairs(echo)?;
    let mut need = |key: &str| -> Result<String> {
        pairs
            .remove(key)
            .ok_or_else(|| Error::CheckpointCorrupt(format!("config echo lacks key `{key}`")))
    };
    let config = PipelineConfig {
        ablation: AblationSpec {
            stage1: need("stage1")?.parse()?,
            stage2: need("stage2")?.parse()?,
        },
        gsr: GsrConfig {
            base_channels: parse_num("gsr_base_channels", &need("gsr_base_channels")?)?,
            blocks_per_level: parse_four("gsr_blocks", &need("gsr_blocks")?)?,
            heads_per_level: parse_four("gsr_heads", &need("gsr_heads")?)?,
            ffn_expansion: parse_num("gsr_ffn_expansion", &need("gsr_ffn_expansion")?)?,
        },
        hfr: UnetConfig {
            in_channels: 9,
            depth: parse_num("hfr_depth", &need("hfr_depth")?)?,
            base_channels: parse_num("hfr_base_channels", &need("hfr_base_channels")?)?,
        },
        dpr: DprConfig {
            refine_layers: parse_num("dpr_refine_layers", &need("dpr_refine_layers")?)?,
            refine_channels: parse_num("dpr_refine_channels", &need("dpr_refine_channels")?)?,
            cond_dim: parse_num("dpr_cond_dim", &need("dpr_cond_dim")?)?,
            encoder_blocks: parse_num("dpr_encoder_blocks", &need("dpr_encoder_blocks")?)?,
        },
        ablation_unet_depth: parse_num("ablation_unet_depth", &need("ablation_unet_depth")?)?,
        ablation_unet_base_channels: parse_num(
            "ablation_unet_base_channels",
            &need("ablation_unet_base_channels")?,
        )?,
    };
    if let Some(key) = pairs.into_keys().next() {
        return Err(Error::CheckpointCorrupt(format!(
            "config echo has unexpected key `{key}`"
        )));
    }
    config.validate()?;
    Ok(config)
}

/// Compares a checkpoint's echo against the model it is being loaded into,
/// naming the first differing field.
pub fn compare_echo(found: &str, expected: &PipelineConfig) -> Result<()> {
    let found_pairs = split_pairs(found)?;
    for key in ECHO_KEYS {
        let want = echo_value(expected, key);
        match found_pairs.get(key) {
            Some(have) if *have == want => {}
            Some(have) => {
                return Err(Error::ConfigEchoMismatch {
                    field: key.into(),
                    found: have.clone(),
                    expected: want,
                })
            }
            None => {
                return Err(Error::ConfigEchoMismatch {
                    field: key.into(),
                    found: "<absent>".into(),
                    expected: want,
                })
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{Stage1Kind, Stage2Kind};

    const MINIMAL: &str = "input_dir = in\ntarget_dir = tgt\nout_dir = out\n";

    #[test]
    fn minimal_config_gets_all_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.pipeline, PipelineConfig::default());
        assert_eq!(c.weights, LossWeights::default());
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.steps, 2000);
        assert_eq!(c.crop, 64);
        assert_eq!(c.checkpoint_every, 500);
        assert_eq!(c.seed, 0);
        assert_eq!(c.phi_seed, 1234);
        assert_eq!(c.input_dir, PathBuf::from("in"));
        assert!(c.manifest.is_none());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# a comment\n\ninput_dir = in # trailing note\ntarget_dir = tgt\nout_dir = out\n   \n# end\n";
        let c = parse_config(text).unwrap();
        assert_eq!(c.input_dir, PathBuf::from("in"));
    }

    #[test]
    fn missing_required_key_is_named() {
        let err = parse_config("input_dir = in\nout_dir = out\n").unwrap_err();
        assert!(matches!(err, Error::MissingConfigKey(ref k) if k == "target_dir"));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = format!("{MINIMAL}learning_rate = 0.1\n");
        let err = parse_config(&text).unwrap_err();
        assert!(matches!(err, Error::UnknownConfigKey(ref k) if k == "learning_rate"));
    }

    #[test]
    fn malformed_line_and_duplicate_are_rejected() {
        assert!(parse_config("just words\n").is_err());
        let text = format!("{MINIMAL}seed = 1\nseed = 2\n");
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn every_documented_key_parses() {
        let text = format!(
            "{MINIMAL}\
             manifest = split.txt\n\
             stage1 = unet\nstage2 = unet\n\
             gsr_base_channels = 8\ngsr_blocks = 1,1,2,2\ngsr_heads = 1,2,4,4\n\
             gsr_ffn_expansion = 3\n\
             hfr_depth = 2\nhfr_base_channels = 8\n\
             dpr_refine_layers = 2\ndpr_refine_channels = 16\ndpr_cond_dim = 8\n\
             dpr_encoder_blocks = 2\n\
             ablation_unet_depth = 2\nablation_unet_base_channels = 8\n\
             phi_seed = 7\nw_lab = 0.5\nw_ms = 0.25\n\
             lambda_l0 = 2\nlambda_l1 = 2\nlambda_l2 = 2\nlambda_l3 = 2\n\
             lambda_l4 = 2\nlambda_l5 = 2\n\
             lambda_r = 4\nlambda_smooth = 1\nsmooth_l1_beta = 0.5\n\
             seed = 9\nlr = 0.001\nsteps = 10\ncrop = 32\ncheckpoint_every = 5\n"
        );
        let c = parse_config(&text).unwrap();
        assert_eq!(c.pipeline.ablation.stage1, Stage1Kind::Unet);
        assert_eq!(c.pipeline.ablation.stage2, Stage2Kind::Unet);
        assert_eq!(c.pipeline.gsr.base_channels, 8);
        assert_eq!(c.pipeline.gsr.blocks_per_level, [1, 1, 2, 2]);
        assert_eq!(c.pipeline.gsr.heads_per_level, [1, 2, 4, 4]);
        assert_eq!(c.pipeline.gsr.ffn_expansion, 3);
        assert_eq!(c.pipeline.hfr.depth, 2);
        assert_eq!(c.pipeline.dpr.cond_dim, 8);
        assert_eq!(c.pipeline.ablation_unet_depth, 2);
        assert_eq!(c.weights.lambda_l, [2.0; 6]);
        assert_eq!(c.weights.lambda_r, 4.0);
        assert_eq!(c.weights.smooth_l1_beta, 0.5);
        assert_eq!(c.phi_seed, 7);
        assert_eq!(c.seed, 9);
        assert_eq!(c.crop, 32);
        assert_eq!(c.manifest, Some(PathBuf::from("split.txt")));
    }

    #[test]
    fn bad_values_name_their_key() {
        let text = format!("{MINIMAL}crop = 33\n");
        let err = parse_config(&text).unwrap_err();
        assert!(matches!(err, Error::ConfigValue { ref key, .. } if key == "crop"));
        let text = format!("{MINIMAL}gsr_blocks = 1,2,3\n");
        let err = parse_config(&text).unwrap_err();
        assert!(matches!(err, Error::ConfigValue { ref key, .. } if key == "gsr_blocks"));
        let text = format!("{MINIMAL}lr = fast\n");
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn echo_round_trips_through_parse() {
        let mut p = PipelineConfig::default();
        p.ablation.stage2 = Stage2Kind::Unet;
        p.gsr.base_channels = 8;
        p.hfr.depth = 2;
        let echo = model_echo(&p);
        let back = parse_echo(&echo).unwrap();
        assert_eq!(back, p);
        assert_eq!(model_echo(&back), echo);
    }

    #[test]
    fn compare_echo_accepts_same_and_names_first_difference() {
        let p = PipelineConfig::default();
        assert!(compare_echo(&model_echo(&p), &p).is_ok());

        let mut q = p.clone();
        q.gsr.base_channels = 32;
        let err = compare_echo(&model_echo(&p), &q).unwrap_err();
        match err {
            Error::ConfigEchoMismatch {
                field,
                found,
                expected,
            } => {
                assert_eq!(field, "gsr_base_channels");
                assert_eq!(found, "16");
                assert_eq!(expected, "32");
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn truncated_echo_is_a_checkpoint_error() {
        let echo = model_echo(&PipelineConfig::default());
        let cut = echo.lines().take(5).collect::<Vec<_>>().join("\n");
        assert!(matches!(
            parse_echo(&cut).unwrap_err(),
            Error::CheckpointCorrupt(_)
        ));
    }
}
