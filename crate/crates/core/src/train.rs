//! The end-to-end training loop, evaluation, and the padding glue that lets
//! arbitrary-sized images through a pipeline with divisibility demands.
//!
//! Everything here is deterministic under the run seed: the pipeline stages
//! draw from `seed..seed+2`, while shuffling and augmentation share one
//! stream seeded with `seed + 3`. Two runs of the same configuration produce
//! byte-identical checkpoints, loss logs, and metric tables.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::Adam;
use crate::checkpoint::{self, Checkpoint};
use crate::color;
use crate::config::{self, TrainConfig};
use crate::dataset::{self, PairedSample};
use crate::error::{Error, Result};
use crate::losses::{self, Breakdown, FeatureExtractor, LossWeights};
use crate::ops;
use crate::pipeline::Pipeline;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};
use crate::wavelet;

/// Pads the bottom and right edges by mirror reflection (edge row included)
/// until both extents divide by `divisor`. The mirror supports padding up to
/// the image's own size; anything smaller than half the divisor cannot be
/// padded and is rejected.
pub fn reflect_pad_to<T: Scalar>(x: &Tensor<T>, divisor: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    let round_up = |v: usize| v.div_ceil(divisor) * divisor;
    let (nh, nw) = (round_up(s.h), round_up(s.w));
    if nh == s.h && nw == s.w {
        return Ok(x.clone());
    }
    if nh - s.h > s.h || nw - s.w > s.w {
        return Err(Error::ImageTooSmall {
            op: "reflect_pad_to".into(),
            h: s.h,
            w: s.w,
            min: divisor.div_ceil(2),
        });
    }
    let src = x.data();
    let mirror = |v: usize, size: usize| if v < size { v } else { 2 * size - 1 - v };
    let mut out = vec![T::zero(); s.n * s.c * nh * nw];
    let mut at = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = (n * s.c + c) * s.h * s.w;
            for y in 0..nh {
                let row = plane + mirror(y, s.h) * s.w;
                for xx in 0..nw {
                    out[at] = src[row + mirror(xx, s.w)];
                    at += 1;
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(s.n, s.c, nh, nw), out)
}

/// Runs the pipeline on one input/target pair and evaluates the full
/// objective: the target is split into the same wavelet bands the stages
/// were supervised on.
pub fn pipeline_loss<T: Scalar>(
    tape: &Tape<T>,
    pipeline: &Pipeline<T>,
    phi: &FeatureExtractor<T>,
    weights: &LossWeights,
    input: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<(Tensor<T>, Breakdown)> {
    let parts = pipeline.forward(tape, input)?;
    let tb = wavelet::dwt2(tape, target);
    let hf_tgt = ops::concat_channels(tape, &[&tb.lh, &tb.hl, &tb.hh])?;
    losses::total_loss(
        tape,
        &parts.final_out,
        target,
        &parts.ll_enh,
        &tb.ll,
        &parts.hf_enh,
        &hf_tgt,
        phi,
        weights,
    )
}

/// What a finished training run leaves on disk.
#[derive(Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub loss_log: PathBuf,
    /// Per-step raw loss terms, in step order.
    pub breakdowns: Vec<Breakdown>,
}

/// Trains for the configured number of steps at batch size 1 and writes
/// `final.ckpt`, periodic `step_*.ckpt` files, and `loss_log.csv` into the
/// output directory. With zero steps the final checkpoint is exactly the
/// initialization.
pub fn train<T: Scalar>(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let ds = dataset::load_dataset::<T>(
        &config.input_dir,
        &config.target_dir,
        config.manifest.as_deref(),
    )?;
    if ds.train.is_empty() {
        return Err(Error::InvalidArg("training set is empty".into()));
    }
    std::fs::create_dir_all(&config.out_dir)?;

    let pipeline = Pipeline::new(&config.pipeline, config.seed)?;
    let divisor = pipeline.required_divisor();
    if config.crop % divisor != 0 {
        return Err(Error::ConfigValue {
            key: "crop".into(),
            msg: format!(
                "must be a multiple of the pipeline divisor {divisor} for this configuration"
            ),
        });
    }
    let params = pipeline.params();
    let phi = FeatureExtractor::new(config.phi_seed);
    let mut adam = Adam::new(config.lr);
    let echo = config::model_echo(&config.pipeline);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(3));

    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    let mut pos = order.len(); // forces a shuffle before the first step
    let mut breakdowns = Vec::with_capacity(config.steps);
    let mut log = String::from("step,perceptual,refinement,smooth_final,smooth_hf,total,taps\n");

    for step in 1..=config.steps as u64 {
        if pos == order.len() {
            order.shuffle(&mut rng);
            pos = 0;
        }
        let sample = &ds.train[order[pos]];
        pos += 1;
        let augmented = dataset::augment_pair(sample, &mut rng, config.crop)?;

        let tape = Tape::new();
        let (loss, breakdown) = pipeline_loss(
            &tape,
            &pipeline,
            &phi,
            &config.weights,
            &augmented.input,
            &augmented.target,
        )?;
        if !breakdown.total.is_finite() {
            return Err(Error::NanLoss {
                step,
                breakdown: breakdown.to_string(),
            });
        }
        tape.backward(&loss)?;
        adam.step(&params.tensors())?;

        log.push_str(&format!(
            "{step},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            breakdown.perceptual,
            breakdown.refinement,
            breakdown.smooth_final,
            breakdown.smooth_hf,
            breakdown.total,
            breakdown.taps_used
        ));
        breakdowns.push(breakdown);

        if step as usize % config.checkpoint_every == 0 {
            let ckpt = checkpoint::capture(step as u32, echo.clone(), &params, Some(&adam))?;
            checkpoint::save_checkpoint(
                &config.out_dir.join(format!("step_{step:06}.ckpt")),
                &ckpt,
            )?;
        }
    }

    let final_checkpoint = config.out_dir.join("final.ckpt");
    let ckpt = checkpoint::capture(config.steps as u32, echo, &params, Some(&adam))?;
    checkpoint::save_checkpoint(&final_checkpoint, &ckpt)?;

    let loss_log = config.out_dir.join("loss_log.csv");
    std::fs::write(&loss_log, log)?;
    Ok(TrainOutcome {
        final_checkpoint,
        loss_log,
        breakdowns,
    })
}

/// Rebuilds the network a checkpoint describes (from its config echo) and
/// installs the stored weights.
pub fn pipeline_from_checkpoint<T: Scalar>(ckpt: &Checkpoint) -> Result<Pipeline<T>> {
    let pcfg = config::parse_echo(&ckpt.config_echo)?;
    // The build seed only matters for the random initialization, which the
    // checkpoint immediately overwrites.
    let pipeline = Pipeline::new(&pcfg, 0)?;
    checkpoint::install(ckpt, &pipeline.params(), None)?;
    Ok(pipeline)
}

/// Enhances one image of arbitrary size: reflect-pad so the pipeline's
/// divisibility holds, run without gradients, crop back, clamp to `[0, 1]`.
pub fn enhance_image<T: Scalar>(pipeline: &Pipeline<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::disabled();
    let s = input.shape();
    let padded = reflect_pad_to(input, pipeline.required_divisor())?;
    let parts = pipeline.forward(&tape, &padded)?;
    let cropped = ops::crop_spatial(&tape, &parts.final_out, s.h, s.w)?;
    Ok(ops::clamp01(&tape, &cropped))
}

/// One scored image, or the final mean row.
#[derive(Clone, Debug)]
pub struct EvalRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub delta_e: f64,
}

/// Per-image metric rows plus their arithmetic mean.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean: EvalRow,
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

impl EvalReport {
    /// CSV with header `id,psnr_db,ssim,delta_e`, one row per image, and the
    /// mean as the last row. Infinite PSNR (identical images) prints `inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr_db,ssim,delta_e\n");
        for row in self.rows.iter().chain(std::iter::once(&self.mean)) {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.id,
                fmt_metric(row.psnr_db),
                fmt_metric(row.ssim),
                fmt_metric(row.delta_e)
            ));
        }
        out
    }
}

/// Scores the model on unaugmented pairs. Outputs are quantized to the 8-bit
/// grid before scoring, so the numbers match what a viewer of the written
/// PNGs would measure.
pub fn evaluate<T: Scalar>(
    pipeline: &Pipeline<T>,
    samples: &[PairedSample<T>],
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArg("evaluation set is empty".into()));
    }
    let tape = Tape::disabled();
    let mut rows = Vec::with_capacity(samples.len());
    let mut sums = [0.0f64; 3];
    for s in samples {
        let out = dataset::quantize8(&enhance_image(pipeline, &s.input)?);
        let psnr_db = color::psnr(&out, &s.target, 1.0)?;
        let ssim = color::ssim(&tape, &out, &s.target)?.item().as_f64();
        let delta_e = color::delta_e(&out, &s.target)?;
        sums[0] += psnr_db;
        sums[1] += ssim;
        sums[2] += delta_e;
        rows.push(EvalRow {
            id: s.id.clone(),
            psnr_db,
            ssim,
            delta_e,
        });
    }
    let n = rows.len() as f64;
    let mean = EvalRow {
        id: "mean".into(),
        psnr_db: sums[0] / n,
        ssim: sums[1] / n,
        delta_e: sums[2] / n,
    };
    Ok(EvalReport { rows, mean })
}
