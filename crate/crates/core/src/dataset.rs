//! Paired-image dataset: PNG decoding, train/val splitting, and training
//! augmentation.
//!
//! Images are strict 8-bit RGB PNGs mapped to `[0, 1]` by division by 255.
//! Augmentation draws its parameters from a caller-supplied RNG into an
//! [`Augmentation`] record first and then applies the record, so any draw can
//! be replayed or forced (the identity record is the no-op augmentation).
//! Crop and flip hit input and target identically; the photometric jitters
//! touch only the input, because jittering the target would corrupt the
//! supervision signal.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use image::{ImageFormat, RgbImage};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Rec.601 luma weights; the gray target of the saturation jitter.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// One resolved augmentation draw. Applying the same record twice gives the
/// same result; [`Augmentation::identity`] leaves a sample untouched.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    /// Top edge of the crop window in the source image.
    pub crop_y: usize,
    /// Left edge of the crop window in the source image.
    pub crop_x: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    /// Horizontal mirror, applied to input and target alike.
    pub flip: bool,
    /// Multiplicative brightness factor, input only.
    pub brightness: f64,
    /// Saturation factor: 1 keeps the pixel, 0 collapses it to its luma.
    pub saturation: f64,
}

impl Augmentation {
    /// The record that reproduces the sample exactly.
    pub fn identity(h: usize, w: usize) -> Self {
        Augmentation {
            crop_y: 0,
            crop_x: 0,
            crop_h: h,
            crop_w: w,
            flip: false,
            brightness: 1.0,
            saturation: 1.0,
        }
    }
}

/// A degraded input and its reference target, both `(1, 3, H, W)` in
/// `[0, 1]`, plus the augmentation that produced them (if any).
#[derive(Clone, Debug)]
pub struct PairedSample<T: Scalar> {
    pub input: Tensor<T>,
    pub target: Tensor<T>,
    /// Source filename without the `.png` extension.
    pub id: String,
    pub augmentation: Option<Augmentation>,
}

/// All pairs of a dataset directory, split into train and validation lists,
/// each ordered by filename.
#[derive(Clone, Debug)]
pub struct Dataset<T: Scalar> {
    pub train: Vec<PairedSample<T>>,
    pub val: Vec<PairedSample<T>>,
}

/// Decodes an 8-bit RGB PNG into a `(1, 3, H, W)` tensor in `[0, 1]`.
pub fn load_png<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bad = |detail: String| Error::BadImageFormat {
        path: path.display().to_string(),
        detail,
    };
    let img = image::open(path).map_err(|e| bad(e.to_string()))?;
    if img.color() != image::ColorType::Rgb8 {
        return Err(bad(format!("pixel format is {:?}", img.color())));
    }
    let rgb = img.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (x, y, pixel) in rgb.enumerate_pixels() {
        let at = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + at] = T::lit(pixel.0[c] as f64 / 255.0);
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data)
}

/// Writes a `(1, 3, H, W)` tensor as an 8-bit RGB PNG, clamping to `[0, 1]`
/// and rounding to the nearest of the 256 levels. The file appears atomically
/// (temp file + rename), so a crash never leaves a half-written image.
pub fn save_png<T: Scalar>(path: &Path, x: &Tensor<T>) -> Result<()> {
    let s = x.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape_mismatch("save_png", s, "(1,3,H,W)"));
    }
    let data = x.data();
    let plane = s.h * s.w;
    let img = RgbImage::from_fn(s.w as u32, s.h as u32, |px, py| {
        let at = py as usize * s.w + px as usize;
        let level = |c: usize| (data[c * plane + at].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([level(0), level(1), level(2)])
    });
    let dir = path.parent().unwrap_or(Path::new("."));
    let stem = path.file_name().map(|n| n.to_string_lossy().into_owned());
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        stem.unwrap_or_else(|| "image".into()),
        std::process::id()
    ));
    img.save_with_format(&tmp, ImageFormat::Png)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Snaps every value to the nearest 8-bit level in `[0, 1]` — the same
/// rounding [`save_png`] performs — so metrics computed in memory match
/// metrics computed on a written file.
pub fn quantize8<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .map(|v| T::lit((v.as_f64().clamp(0.0, 1.0) * 255.0).round() / 255.0))
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same extent")
}

fn list_pngs(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.file_type()?.is_file() && name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Parses a split manifest: one `train <file>` or `val <file>` per line,
/// `#` comments allowed. Returns filename → is-validation.
fn parse_manifest(path: &Path) -> Result<BTreeMap<String, bool>> {
    let text = std::fs::read_to_string(path)?;
    let mut split = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| {
            Error::InvalidArg(format!("{} line {}: {msg}", path.display(), lineno + 1))
        };
        let Some((kind, name)) = line.split_once(char::is_whitespace) else {
            return Err(err(format!("expected `train <file>` or `val <file>`, got `{line}`")));
        };
        let is_val = match kind {
            "train" => false,
            "val" => true,
            other => return Err(err(format!("unknown split `{other}`"))),
        };
        let name = name.trim().to_string();
        if split.insert(name.clone(), is_val).is_some() {
            return Err(err(format!("`{name}` listed twice")));
        }
    }
    Ok(split)
}

/// Loads every input/target PNG pair, ordered by filename. Filenames must
/// match one-to-one between the two directories. Without a manifest every
/// pair trains; with one, only listed pairs are used, split as listed.
pub fn load_dataset<T: Scalar>(
    input_dir: &Path,
    target_dir: &Path,
    manifest: Option<&Path>,
) -> Result<Dataset<T>> {
    let inputs = list_pngs(input_dir)?;
    let targets: BTreeSet<String> = list_pngs(target_dir)?.into_iter().collect();
    for name in &inputs {
        if !targets.contains(name) {
            return Err(Error::UnmatchedInput(name.clone()));
        }
    }
    let input_set: BTreeSet<&String> = inputs.iter().collect();
    for name in &targets {
        if !input_set.contains(name) {
            return Err(Error::UnmatchedTarget(name.clone()));
        }
    }

    let split = manifest.map(parse_manifest).transpose()?;
    if let Some(split) = &split {
        for name in split.keys() {
            if !input_set.contains(name) {
                return Err(Error::InvalidArg(format!(
                    "manifest lists `{name}` but no such pair exists"
                )));
            }
        }
    }

    let mut dataset = Dataset {
        train: Vec::new(),
        val: Vec::new(),
    };
    for name in &inputs {
        let is_val = match &split {
            Some(split) => match split.get(name) {
                Some(&is_val) => is_val,
                None => continue,
            },
            None => false,
        };
        let input = load_png(&input_dir.join(name))?;
        let target = load_png(&target_dir.join(name))?;
        if input.shape() != target.shape() {
            return Err(Error::shape_mismatch(
                "load_dataset",
                input.shape(),
                target.shape(),
            ));
        }
        let id = Path::new(name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| name.clone());
        let sample = PairedSample {
            input,
            target,
            id,
            augmentation: None,
        };
        if is_val {
            dataset.val.push(sample);
        } else {
            dataset.train.push(sample);
        }
    }
    Ok(dataset)
}

/// Crops a window and optionally mirrors it horizontally, on raw data (no
/// tape involvement — augmentation is data preparation, not a modeled op).
fn crop_flip<T: Scalar>(x: &Tensor<T>, rec: &Augmentation) -> Tensor<T> {
    let s = x.shape();
    let src = x.data();
    let mut out = vec![T::zero(); s.n * s.c * rec.crop_h * rec.crop_w];
    let mut at = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = (n * s.c + c) * s.h * s.w;
            for y in 0..rec.crop_h {
                let row = plane + (rec.crop_y + y) * s.w;
                for xx in 0..rec.crop_w {
                    let sx = if rec.flip {
                        rec.crop_x + rec.crop_w - 1 - xx
                    } else {
                        rec.crop_x + xx
                    };
                    out[at] = src[row + sx];
                    at += 1;
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(s.n, s.c, rec.crop_h, rec.crop_w), out).expect("computed extent")
}

/// Brightness then saturation, each clamped to `[0, 1]`. Factors of exactly
/// 1.0 are skipped so the identity record is bit-exact.
fn jitter<T: Scalar>(x: &Tensor<T>, rec: &Augmentation) -> Tensor<T> {
    let s = x.shape();
    debug_assert_eq!(s.c, 3);
    let src = x.data();
    let plane = s.h * s.w;
    let mut out = src.clone();
    for n in 0..s.n {
        for at in 0..plane {
            let base = n * 3 * plane + at;
            let mut px = [0.0f64; 3];
            for c in 0..3 {
                px[c] = src[base + c * plane].as_f64();
                if rec.brightness != 1.0 {
                    px[c] = (px[c] * rec.brightness).clamp(0.0, 1.0);
                }
            }
            if rec.saturation != 1.0 {
                let gray = LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2];
                for v in &mut px {
                    *v = (gray + rec.saturation * (*v - gray)).clamp(0.0, 1.0);
                }
            }
            for c in 0..3 {
                out[base + c * plane] = T::lit(px[c]);
            }
        }
    }
    Tensor::from_vec(s, out).expect("same extent")
}

/// Applies a fully specified augmentation record: identical crop and flip on
/// input and target, photometric jitter on the input only.
pub fn apply_augmentation<T: Scalar>(
    s: &PairedSample<T>,
    rec: Augmentation,
) -> Result<PairedSample<T>> {
    let shape = s.input.shape();
    if shape != s.target.shape() {
        return Err(Error::shape_mismatch(
            "apply_augmentation",
            shape,
            s.target.shape(),
        ));
    }
    if rec.crop_h == 0
        || rec.crop_w == 0
        || rec.crop_y + rec.crop_h > shape.h
        || rec.crop_x + rec.crop_w > shape.w
    {
        return Err(Error::InvalidArg(format!(
            "augmentation crop {}x{} at ({}, {}) leaves the {}x{} image",
            rec.crop_h, rec.crop_w, rec.crop_y, rec.crop_x, shape.h, shape.w
        )));
    }
    let input = jitter(&crop_flip(&s.input, &rec), &rec);
    let target = crop_flip(&s.target, &rec);
    Ok(PairedSample {
        input,
        target,
        id: s.id.clone(),
        augmentation: Some(rec),
    })
}

/// Draws one augmentation — crop origin, flip, brightness in `[0.9, 1.1]`,
/// saturation in `[0.9, 1.1]` — and applies it. The crop side must divide by
/// 16 so every stage's divisibility need is met downstream.
pub fn augment_pair<T: Scalar, R: Rng>(
    s: &PairedSample<T>,
    rng: &mut R,
    crop: usize,
) -> Result<PairedSample<T>> {
    let shape = s.input.shape();
    if crop == 0 || crop % 16 != 0 {
        return Err(Error::InvalidArg(format!(
            "crop side must be a positive multiple of 16, got {crop}"
        )));
    }
    if crop > shape.h || crop > shape.w {
        return Err(Error::InvalidArg(format!(
            "crop {crop} exceeds the {}x{} image `{}`",
            shape.h, shape.w, s.id
        )));
    }
    let rec = Augmentation {
        crop_y: rng.random_range(0..=shape.h - crop),
        crop_x: rng.random_range(0..=shape.w - crop),
        crop_h: crop,
        crop_w: crop,
        flip: rng.random::<bool>(),
        brightness: 0.9 + 0.2 * rng.random::<f64>(),
        saturation: 0.9 + 0.2 * rng.random::<f64>(),
    };
    apply_augmentation(s, rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::TempDir;

    fn write_png(dir: &Path, name: &str, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
        RgbImage::from_fn(w, h, |x, y| image::Rgb(f(x, y)))
            .save(dir.join(name))
            .unwrap();
    }

    fn sample_from(input: Tensor<f64>, target: Tensor<f64>) -> PairedSample<f64> {
        PairedSample {
            input,
            target,
            id: "s".into(),
            augmentation: None,
        }
    }

    #[test]
    fn decode_maps_endpoints_to_zero_and_one() {
        let dir = TempDir::new().unwrap();
        write_png(dir.path(), "a.png", 2, 1, |x, _| if x == 0 { [0; 3] } else { [255; 3] });
        let t: Tensor<f64> = load_png(&dir.path().join("a.png")).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 3, 1, 2));
        let d = t.to_vec();
        assert_eq!(d, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn png_round_trip_preserves_quantized_values() {
        let dir = TempDir::new().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = quantize8(&Tensor::<f64>::uniform(Shape::new(1, 3, 7, 9), 0.0, 1.0, &mut rng));
        let path = dir.path().join("x.png");
        save_png(&path, &x).unwrap();
        let back: Tensor<f64> = load_png(&path).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn non_rgb8_pngs_are_rejected() {
        let dir = TempDir::new().unwrap();
        image::GrayImage::new(4, 4).save(dir.path().join("gray.png")).unwrap();
        image::RgbaImage::new(4, 4).save(dir.path().join("rgba.png")).unwrap();
        for name in ["gray.png", "rgba.png"] {
            let err = load_png::<f64>(&dir.path().join(name)).unwrap_err();
            assert!(matches!(err, Error::BadImageFormat { .. }), "{name}: {err}");
        }
    }

    #[test]
    fn manifest_splits_four_pairs_three_one() {
        let dir = TempDir::new().unwrap();
        let (inp, tgt) = (dir.path().join("in"), dir.path().join("tgt"));
        std::fs::create_dir_all(&inp).unwrap();
        std::fs::create_dir_all(&tgt).unwrap();
        for name in ["a.png", "b.png", "c.png", "d.png"] {
            write_png(&inp, name, 4, 4, |_, _| [10, 20, 30]);
            write_png(&tgt, name, 4, 4, |_, _| [40, 50, 60]);
        }
        let manifest = dir.path().join("split.txt");
        std::fs::write(&manifest, "# split\ntrain a.png\ntrain d.png\nval c.png\ntrain b.png\n")
            .unwrap();
        let ds: Dataset<f64> = load_dataset(&inp, &tgt, Some(&manifest)).unwrap();
        let ids: Vec<&str> = ds.train.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "d"], "filename order, not manifest order");
        assert_eq!(ds.val.len(), 1);
        assert_eq!(ds.val[0].id, "c");
    }

    #[test]
    fn without_manifest_everything_trains_in_filename_order() {
        let dir = TempDir::new().unwrap();
        let (inp, tgt) = (dir.path().join("in"), dir.path().join("tgt"));
        std::fs::create_dir_all(&inp).unwrap();
        std::fs::create_dir_all(&tgt).unwrap();
        for name in ["b.png", "a.png"] {
            write_png(&inp, name, 4, 4, |_, _| [0, 0, 0]);
            write_png(&tgt, name, 4, 4, |_, _| [255, 255, 255]);
        }
        let ds: Dataset<f64> = load_dataset(&inp, &tgt, None).unwrap();
        let ids: Vec<&str> = ds.train.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        assert!(ds.val.is_empty());
    }

    #[test]
    fn unmatched_files_are_named() {
        let dir = TempDir::new().unwrap();
        let (inp, tgt) = (dir.path().join("in"), dir.path().join("tgt"));
        std::fs::create_dir_all(&inp).unwrap();
        std::fs::create_dir_all(&tgt).unwrap();
        write_png(&inp, "a.png", 4, 4, |_, _| [0; 3]);
        write_png(&inp, "b.png", 4, 4, |_, _| [0; 3]);
        write_png(&tgt, "a.png", 4, 4, |_, _| [0; 3]);
        let err = load_dataset::<f64>(&inp, &tgt, None).unwrap_err();
        assert!(matches!(err, Error::UnmatchedInput(ref n) if n == "b.png"), "{err}");

        write_png(&tgt, "b.png", 4, 4, |_, _| [0; 3]);
        write_png(&tgt, "c.png", 4, 4, |_, _| [0; 3]);
        let err = load_dataset::<f64>(&inp, &tgt, None).unwrap_err();
        assert!(matches!(err, Error::UnmatchedTarget(ref n) if n == "c.png"), "{err}");
    }

    #[test]
    fn manifest_naming_unknown_pair_is_an_error() {
        let dir = TempDir::new().unwrap();
        let (inp, tgt) = (dir.path().join("in"), dir.path().join("tgt"));
        std::fs::create_dir_all(&inp).unwrap();
        std::fs::create_dir_all(&tgt).unwrap();
        write_png(&inp, "a.png", 4, 4, |_, _| [0; 3]);
        write_png(&tgt, "a.png", 4, 4, |_, _| [0; 3]);
        let manifest = dir.path().join("split.txt");
        std::fs::write(&manifest, "train ghost.png\n").unwrap();
        assert!(load_dataset::<f64>(&inp, &tgt, Some(&manifest)).is_err());
    }

    #[test]
    fn identity_record_is_a_bit_exact_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = Tensor::<f64>::uniform(Shape::new(1, 3, 6, 10), 0.0, 1.0, &mut rng);
        let target = Tensor::<f64>::uniform(Shape::new(1, 3, 6, 10), 0.0, 1.0, &mut rng);
        let s = sample_from(input.clone(), target.clone());
        let out = apply_augmentation(&s, Augmentation::identity(6, 10)).unwrap();
        assert_eq!(out.input.to_vec(), input.to_vec());
        assert_eq!(out.target.to_vec(), target.to_vec());
        assert_eq!(out.augmentation, Some(Augmentation::identity(6, 10)));
    }

    #[test]
    fn flip_twice_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = Tensor::<f64>::uniform(Shape::new(1, 3, 5, 8), 0.0, 1.0, &mut rng);
        let target = Tensor::<f64>::uniform(Shape::new(1, 3, 5, 8), 0.0, 1.0, &mut rng);
        let s = sample_from(input.clone(), target.clone());
        let mut rec = Augmentation::identity(5, 8);
        rec.flip = true;
        let once = apply_augmentation(&s, rec).unwrap();
        let twice = apply_augmentation(&once, rec).unwrap();
        assert_eq!(twice.input.to_vec(), input.to_vec());
        assert_eq!(twice.target.to_vec(), target.to_vec());
    }

    #[test]
    fn crop_and_flip_hit_both_tensors_identically_over_100_draws() {
        // Gray-valued pixels (r = g = b) make the saturation jitter an exact
        // no-op, so the augmented input must equal brightness x the same
        // window the target was cropped from. Any divergence in origin or
        // mirroring between the two tensors breaks the equality.
        let h = 40;
        let w = 52;
        let field = |y: usize, x: usize| 0.2 + 0.6 * ((y * w + x) as f64 / (h * w) as f64);
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[c * h * w + y * w + x] = field(y, x);
                }
            }
        }
        let input = Tensor::from_vec(Shape::new(1, 3, h, w), data.clone()).unwrap();
        let target = Tensor::from_vec(Shape::new(1, 3, h, w), data).unwrap();
        let s = sample_from(input, target);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for draw in 0..100 {
            let out = augment_pair(&s, &mut rng, 16).unwrap();
            let rec = out.augmentation.unwrap();
            let u = rec.brightness;
            let inp = out.input.to_vec();
            let tgt = out.target.to_vec();
            for y in 0..16 {
                for x in 0..16 {
                    let sx = if rec.flip { rec.crop_x + 15 - x } else { rec.crop_x + x };
                    let expect = field(rec.crop_y + y, sx);
                    let at = y * 16 + x;
                    assert_eq!(tgt[at], expect, "draw {draw} target ({y},{x})");
                    let bright = (expect * u).clamp(0.0, 1.0);
                    assert!(
                        (inp[at] - bright).abs() < 1e-12,
                        "draw {draw} input ({y},{x}): {} vs {bright}",
                        inp[at]
                    );
                }
            }
        }
    }

    #[test]
    fn jitter_matches_hand_computation_and_skips_target() {
        let input = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![0.5, 0.25, 0.75]).unwrap();
        let target = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![0.1, 0.2, 0.3]).unwrap();
        let s = sample_from(input, target.clone());
        let mut rec = Augmentation::identity(1, 1);
        rec.brightness = 1.05;
        rec.saturation = 0.95;
        let out = apply_augmentation(&s, rec).unwrap();
        let b = [0.5 * 1.05, 0.25 * 1.05, 0.75 * 1.05];
        let gray = 0.299 * b[0] + 0.587 * b[1] + 0.114 * b[2];
        let expect: Vec<f64> = b.iter().map(|&v| gray + 0.95 * (v - gray)).collect();
        let got = out.input.to_vec();
        for c in 0..3 {
            assert!((got[c] - expect[c]).abs() < 1e-12, "channel {c}");
        }
        assert_eq!(out.target.to_vec(), target.to_vec());
    }

    #[test]
    fn brightness_clamps_at_one() {
        let input = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![0.95; 3]).unwrap();
        let s = sample_from(input.clone(), input);
        let mut rec = Augmentation::identity(1, 1);
        rec.brightness = 1.1;
        let out = apply_augmentation(&s, rec).unwrap();
        assert_eq!(out.input.to_vec(), vec![1.0; 3]);
    }

    #[test]
    fn bad_crops_are_rejected() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 3, 32, 32));
        let s = sample_from(x.clone(), x);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(augment_pair(&s, &mut rng, 48).is_err(), "larger than image");
        assert!(augment_pair(&s, &mut rng, 24).is_err(), "not a multiple of 16");
        assert!(augment_pair(&s, &mut rng, 0).is_err(), "zero");
        assert!(augment_pair(&s, &mut rng, 32).is_ok(), "full-size crop is fine");
    }

    #[test]
    fn quantize_snaps_to_the_256_level_grid() {
        let x = Tensor::from_vec(
            Shape::new(1, 1, 1, 4),
            vec![0.5, -0.2, 1.7, 128.4 / 255.0],
        )
        .unwrap();
        let q = quantize8(&x).to_vec();
        assert_eq!(q, vec![128.0 / 255.0, 0.0, 1.0, 128.0 / 255.0]);
    }
}
