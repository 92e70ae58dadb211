//! End-to-end tests of the `wavetone` binary: exit codes, the enhance /
//! eval round trips, training determinism, and seed precedence.

use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use wavetone::checkpoint::{capture, save_checkpoint};
use wavetone::config::model_echo;
use wavetone::dataset::{load_png, quantize8, save_png};
use wavetone::dpr::DprConfig;
use wavetone::gsr::GsrConfig;
use wavetone::pipeline::{AblationSpec, Pipeline, PipelineConfig};
use wavetone::unet::UnetConfig;
use wavetone::{Shape, Tensor};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wavetone"))
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny_config() -> PipelineConfig {
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

fn write_init_checkpoint(path: &Path, seed: u64) {
    let config = tiny_config();
    let pipeline = Pipeline::<f32>::new(&config, seed).unwrap();
    let ckpt = capture(0, model_echo(&config), &pipeline.params(), None).unwrap();
    save_checkpoint(path, &ckpt).unwrap();
}

fn write_random_png(path: &Path, h: usize, w: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = quantize8(&Tensor::<f32>::uniform(
        Shape::new(1, 3, h, w),
        0.0,
        1.0,
        &mut rng,
    ));
    save_png(path, &x).unwrap();
}

#[test]
fn missing_subcommand_and_bad_flags_are_usage_errors() {
    let out = bin().output().unwrap();
    assert_eq!(code(&out), 1);
    let out = bin().args(["enhance", "--nonsense"]).output().unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn help_and_version_exit_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("gradcheck"));
    let out = bin().arg("--version").output().unwrap();
    assert_eq!(code(&out), 0);
}

#[test]
fn gradcheck_filter_selects_and_passes() {
    let out = bin().args(["gradcheck", "--op", "relu"]).output().unwrap();
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("relu"), "{text}");
    assert!(text.contains("ok"), "{text}");
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn gradcheck_unmatched_filter_is_a_usage_error() {
    let out = bin()
        .args(["gradcheck", "--op", "no-such-case"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("matches"));
}

#[test]
fn enhance_with_init_checkpoint_reproduces_the_input() {
    let dir = TempDir::new().unwrap();
    let ckpt = dir.path().join("init.ckpt");
    write_init_checkpoint(&ckpt, 1);
    let input = dir.path().join("in.png");
    // Not a multiple of 16 on either side, so padding is exercised too.
    write_random_png(&input, 50, 70, 33);
    let output = dir.path().join("out.png");

    let out = bin()
        .args(["enhance", "--checkpoint"])
        .arg(&ckpt)
        .arg("--input")
        .arg(&input)
        .arg("--output")
        .arg(&output)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let a = load_png::<f32>(&input).unwrap().to_vec();
    let b = load_png::<f32>(&output).unwrap().to_vec();
    assert_eq!(a.len(), b.len());
    // Identity at init, up to one 8-bit quantization level.
    let worst = a
        .iter()
        .zip(&b)
        .map(|(x, y)| ((x - y).abs() * 255.0).round() as i32)
        .max()
        .unwrap();
    assert!(worst <= 1, "worst level difference {worst}");
}

#[test]
fn broken_checkpoints_are_runtime_errors() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("in.png");
    write_random_png(&input, 32, 32, 1);
    let output = dir.path().join("out.png");

    // Nonexistent checkpoint.
    let out = bin()
        .args(["enhance", "--checkpoint"])
        .arg(dir.path().join("ghost.ckpt"))
        .arg("--input")
        .arg(&input)
        .arg("--output")
        .arg(&output)
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);

    // Garbage bytes.
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint at all").unwrap();
    let out = bin()
        .args(["enhance", "--checkpoint"])
        .arg(&bad)
        .arg("--input")
        .arg(&input)
        .arg("--output")
        .arg(&output)
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn eval_on_identical_pairs_reports_perfect_metrics() {
    let dir = TempDir::new().unwrap();
    let ckpt = dir.path().join("init.ckpt");
    write_init_checkpoint(&ckpt, 2);
    let inp = dir.path().join("in");
    let tgt = dir.path().join("tgt");
    std::fs::create_dir_all(&inp).unwrap();
    std::fs::create_dir_all(&tgt).unwrap();
    for (name, seed) in [("a.png", 10), ("b.png", 11)] {
        write_random_png(&inp.join(name), 32, 48, seed);
        std::fs::copy(inp.join(name), tgt.join(name)).unwrap();
    }
    let csv_path = dir.path().join("metrics.csv");

    let out = bin()
        .args(["eval", "--checkpoint"])
        .arg(&ckpt)
        .arg("--input-dir")
        .arg(&inp)
        .arg("--target-dir")
        .arg(&tgt)
        .arg("--out")
        .arg(&csv_path)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "id,psnr_db,ssim,delta_e");
    assert_eq!(lines.len(), 4, "two rows + mean: {csv}");
    assert!(lines[1].starts_with("a,inf,1.000000,0.000000"), "{csv}");
    assert!(lines[3].starts_with("mean,inf,1.000000,0.000000"), "{csv}");
}

/// Writes a paired 32x32 dataset and a run config pointing at it; returns
/// the config path (out_dir is `{root}/{run}`).
fn write_train_fixture(root: &Path, run: &str) -> std::path::PathBuf {
    let inp = root.join("in");
    let tgt = root.join("tgt");
    if !inp.exists() {
        std::fs::create_dir_all(&inp).unwrap();
        std::fs::create_dir_all(&tgt).unwrap();
        for (name, seed) in [("a.png", 20), ("b.png", 21)] {
            write_random_png(&inp.join(name), 32, 32, seed);
            write_random_png(&tgt.join(name), 32, 32, seed + 100);
        }
    }
    let out_dir = root.join(run);
    let config = format!(
        "input_dir = {}\ntarget_dir = {}\nout_dir = {}\n\
         gsr_base_channels = 4\ngsr_blocks = 1,1,1,1\ngsr_heads = 1,2,2,4\n\
         hfr_depth = 2\nhfr_base_channels = 4\n\
         dpr_refine_layers = 2\ndpr_refine_channels = 8\ndpr_cond_dim = 4\n\
         dpr_encoder_blocks = 2\n\
         ablation_unet_depth = 2\nablation_unet_base_channels = 4\n\
         steps = 2\ncrop = 32\ncheckpoint_every = 10\n",
        inp.display(),
        tgt.display(),
        out_dir.display()
    );
    let path = root.join(format!("{run}.conf"));
    std::fs::write(&path, config).unwrap();
    path
}

#[test]
fn training_is_deterministic_and_seed_precedence_holds() {
    let dir = TempDir::new().unwrap();
    let root = dir.path();
    let ckpt_of = |run: &str| std::fs::read(root.join(run).join("final.ckpt")).unwrap();

    let run =
        |name: &str, seed_flag: Option<&str>, env_seed: Option<&str>| {
            let config = write_train_fixture(root, name);
            let mut cmd = bin();
            cmd.arg("train").arg("--config").arg(&config);
            if let Some(seed) = seed_flag {
                cmd.args(["--seed", seed]);
            }
            cmd.env_remove("WAVEN_SEED");
            if let Some(seed) = env_seed {
                cmd.env("WAVEN_SEED", seed);
            }
            let out = cmd.output().unwrap();
            assert_eq!(
                code(&out),
                0,
                "run {name}: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        };

    run("base1", None, None);
    run("base2", None, None);
    assert_eq!(ckpt_of("base1"), ckpt_of("base2"), "same seed, same bytes");

    run("flag5", Some("5"), None);
    assert_ne!(ckpt_of("base1"), ckpt_of("flag5"), "seed changes the run");

    run("env5", None, Some("5"));
    assert_eq!(ckpt_of("flag5"), ckpt_of("env5"), "env seed matches flag seed");

    run("both", Some("5"), Some("9"));
    assert_eq!(ckpt_of("flag5"), ckpt_of("both"), "flag outranks env");

    // The loss logs of identical runs also match byte for byte.
    assert_eq!(
        std::fs::read(root.join("base1").join("loss_log.csv")).unwrap(),
        std::fs::read(root.join("base2").join("loss_log.csv")).unwrap()
    );
}

#[test]
fn bad_waven_seed_is_reported() {
    let dir = TempDir::new().unwrap();
    let config = write_train_fixture(dir.path(), "badseed");
    let out = bin()
        .arg("train")
        .arg("--config")
        .arg(&config)
        .env("WAVEN_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("WAVEN_SEED"));
}
