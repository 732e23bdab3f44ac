//! End-to-end tests of the `csd` binary: spawn the real executable and
//! check artifacts and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csd_core::arch::{build_backbone, BackboneConfig, SRBackbone, WidthMultiplier, DIV2K_RGB_MEAN};
use csd_core::data::{save_image, PairedDataset};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn csd() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_csd"));
    // Tests must not pick up an ambient data root.
    cmd.env_remove("CSD_DATA_ROOT");
    cmd.env_remove("CSD_CACHE");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn csd binary")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Write `n` synthetic HR images under `<root>/<set>/HR/`; the loader
/// synthesizes the LR side on the fly.
fn write_dataset(root: &Path, set: &str, n: usize, hr_size: usize) {
    let ds = PairedDataset::synthetic(n, hr_size, 2, 7);
    let dir = root.join(set).join("HR");
    std::fs::create_dir_all(&dir).unwrap();
    for i in 0..n {
        let (_, hr) = ds.load_pair(i).unwrap();
        save_image(&dir.join(format!("img_{i:02}.png")), &hr).unwrap();
    }
}

fn tiny_backbone_cfg() -> BackboneConfig {
    BackboneConfig {
        base_width: 8,
        n_blocks: 1,
        scale: 2,
        res_scale: 1.0,
        rgb_mean: DIV2K_RGB_MEAN,
    }
}

/// A config small enough that a full `train` invocation takes well under a
/// second. Returns the config path.
fn tiny_config(dir: &Path, data_root: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"
[arch]
base_width = 8
n_blocks = 1
scale = 2

[embedding]
kind = "toy"

[loss]
lambda_c = 1.0

[data]
root = "{root}"
train_set = "tiny"
val_set = "tiny-val"
patch = 16

[data.negatives]
k = 2

[trainer]
r_w = 0.5
batch = 2
epochs = 1
steps_per_epoch = 3
validate_every = 1
seed = 3
{extra}
"#,
        root = data_root.display()
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn help_exits_zero() {
    let out = run(csd().arg("--help"));
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("train"));
}

#[test]
fn unknown_flag_exits_one() {
    let out = run(csd().args(["train", "--bogus"]));
    assert_eq!(code(&out), 1);
}

#[test]
fn train_writes_manifest_history_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    write_dataset(&root, "tiny", 3, 24);
    write_dataset(&root, "tiny-val", 2, 24);
    let cfg = tiny_config(tmp.path(), &root, "");
    let out_dir = tmp.path().join("run");

    let out = run(csd()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let manifest = std::fs::read_to_string(out_dir.join("manifest.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(parsed["strategy"], "csd");
    assert_eq!(parsed["seed"], 3);
    assert_eq!(parsed["config"]["trainer"]["batch"], 2);

    let history = std::fs::read_to_string(out_dir.join("history.csv")).unwrap();
    assert!(history.starts_with("iter,loss_total,loss_recS,loss_recT,loss_cl,lr\n"));
    assert_eq!(history.lines().count(), 4, "header + 3 iterations");
    assert!(out_dir.join("last.csdc").is_file());
    assert!(out_dir.join("best.csdc").is_file());

    // Run outputs feed straight back into the other subcommands.
    let student = tmp.path().join("student.csdc");
    let out = run(csd()
        .args(["export", "--ckpt"])
        .arg(out_dir.join("last.csdc"))
        .args(["--width", "0.5", "--out"])
        .arg(&student));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(student.is_file());

    let eval_dir = tmp.path().join("eval");
    let out = run(csd()
        .args(["eval", "--ckpt"])
        .arg(out_dir.join("best.csdc"))
        .args(["--width", "0.5", "--datasets", "tiny-val", "--data-root"])
        .arg(&root)
        .arg("--out")
        .arg(&eval_dir));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(eval_dir.join("results.csv").is_file());
}

#[test]
fn set_overrides_reach_the_manifest_and_run() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    write_dataset(&root, "tiny", 3, 24);
    let cfg = tiny_config(tmp.path(), &root, "");
    let out_dir = tmp.path().join("run");

    let out = run(csd()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .args(["--strategy", "jt1", "--set", "trainer.steps_per_epoch=2"]));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["strategy"], "jt1");
    let history = std::fs::read_to_string(out_dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3, "header + 2 iterations");
    // JT1 has no contrastive term.
    for line in history.lines().skip(1) {
        let cl: f64 = line.split(',').nth(4).unwrap().parse().unwrap();
        assert_eq!(cl, 0.0);
    }
}

#[test]
fn invalid_config_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[trainer]\nlr0 = -1.0\n").unwrap();
    let out = run(csd().args(["train", "--config"]).arg(&cfg));
    assert_eq!(code(&out), 1, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("lr0"));
}

#[test]
fn missing_data_root_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("no_root.toml");
    std::fs::write(&cfg, "[embedding]\nkind = \"toy\"\n").unwrap();
    let out = run(csd().args(["train", "--config"]).arg(&cfg));
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("CSD_DATA_ROOT"), "stderr: {}", stderr(&out));
}

#[test]
fn nan_teacher_aborts_with_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    write_dataset(&root, "tiny", 3, 24);

    // A teacher checkpoint poisoned with a NaN weight.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut net = build_backbone(&tiny_backbone_cfg(), &mut rng).unwrap();
    net.layers_mut()[0].weight[[0, 0, 0, 0]] = f64::NAN;
    let ckpt = tmp.path().join("teacher.csdc");
    net.save(&ckpt, 1.0).unwrap();

    let cfg = tiny_config(
        tmp.path(),
        &root,
        &format!("teacher_init = \"{}\"", ckpt.display()),
    );
    let out_dir = tmp.path().join("run");
    let out = run(csd()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir));
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("non-finite"), "stderr: {}", stderr(&out));
    assert!(out_dir.join("abort_state.csdc").is_file());
}

#[test]
fn resume_continues_from_the_saved_iteration() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    write_dataset(&root, "tiny", 3, 24);
    let cfg = tiny_config(tmp.path(), &root, "");
    let out_dir = tmp.path().join("run");

    let out = run(csd()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    // Resuming a finished run performs no further epochs but still succeeds.
    let out = run(csd()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .arg("--resume")
        .arg(out_dir.join("last.csdc")));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(text.contains("done"), "stdout: {text}");
}

#[test]
fn export_matches_the_sliced_forward() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = build_backbone(&tiny_backbone_cfg(), &mut rng).unwrap();
    let full = tmp.path().join("full.csdc");
    net.save(&full, 1.0).unwrap();

    let exported = tmp.path().join("student.csdc");
    let out = run(csd()
        .args(["export", "--ckpt"])
        .arg(&full)
        .args(["--width", "0.5", "--out"])
        .arg(&exported));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let student = SRBackbone::load(&exported).unwrap();
    let r = WidthMultiplier::new(0.5).unwrap();
    assert_eq!(
        student.parameter_count(WidthMultiplier::FULL),
        net.parameter_count(r)
    );
    let ds = PairedDataset::synthetic(1, 16, 2, 9);
    let (lr, _) = ds.load_pair(0).unwrap();
    let (c, h, w) = lr.dim();
    let mut x = ndarray::Array4::<f64>::zeros((1, c, h, w));
    x.index_axis_mut(ndarray::Axis(0), 0).assign(&lr);
    let a = net.forward(&x, r).unwrap();
    let b = student.forward(&x, WidthMultiplier::FULL).unwrap();
    let max = a
        .iter()
        .zip(b.iter())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0f64, f64::max);
    assert!(max <= 1e-9, "export drifted from sliced forward by {max}");
}

#[test]
fn export_rejects_width_above_one() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = build_backbone(&tiny_backbone_cfg(), &mut rng).unwrap();
    let full = tmp.path().join("full.csdc");
    net.save(&full, 1.0).unwrap();
    let out = run(csd()
        .args(["export", "--ckpt"])
        .arg(&full)
        .args(["--width", "1.5", "--out"])
        .arg(tmp.path().join("nope.csdc")));
    assert_eq!(code(&out), 1, "stderr: {}", stderr(&out));
}

#[test]
fn eval_emits_csv_and_plots() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    write_dataset(&root, "tinyset", 2, 24);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = build_backbone(&tiny_backbone_cfg(), &mut rng).unwrap();
    let ckpt = tmp.path().join("model.csdc");
    net.save(&ckpt, 1.0).unwrap();

    let out_dir = tmp.path().join("report");
    let out = run(csd()
        .args(["eval", "--ckpt"])
        .arg(&ckpt)
        .args(["--width", "0.5", "--width", "1.0"])
        .args(["--datasets", "tinyset", "--data-root"])
        .arg(&root)
        .arg("--out")
        .arg(&out_dir));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let csv = std::fs::read_to_string(out_dir.join("results.csv")).unwrap();
    assert!(csv.starts_with("dataset,width,params,psnr_db,ssim,ms_per_image\n"));
    assert_eq!(csv.lines().count(), 3, "header + two widths");
    assert!(out_dir.join("psnr_params.png").is_file());
    assert!(out_dir.join("psnr_speed.png").is_file());
}

#[test]
fn sweep_over_k_produces_per_run_dirs_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    write_dataset(&root, "tiny", 3, 24);
    write_dataset(&root, "tiny-val", 2, 24);
    let cfg = tiny_config(tmp.path(), &root, "");
    let out_dir = tmp.path().join("sweep");

    let out = run(csd()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .args(["--axis", "k", "--values", "1,2", "--out"])
        .arg(&out_dir)
        .args(["--set", "trainer.steps_per_epoch=2"]));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    for v in ["k-1", "k-2"] {
        assert!(out_dir.join(v).join("history.csv").is_file(), "missing {v}");
        assert!(out_dir.join(v).join("manifest.json").is_file());
    }
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert!(summary.starts_with("axis,value,status,iterations,final_loss,best_psnr\n"));
    assert_eq!(summary.lines().count(), 3, "header + 2 runs");
    assert!(summary.contains("k,1,ok"), "summary: {summary}");
    assert!(summary.contains("k,2,ok"), "summary: {summary}");
}

#[test]
fn sweep_with_one_bad_value_still_finishes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    write_dataset(&root, "tiny", 3, 24);
    let cfg = tiny_config(tmp.path(), &root, "");
    let out_dir = tmp.path().join("sweep");

    let out = run(csd()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .args(["--axis", "strategy", "--values", "jt1,bogus", "--out"])
        .arg(&out_dir)
        .args(["--set", "trainer.steps_per_epoch=1"]));
    assert_eq!(code(&out), 0, "one good run keeps the sweep green");
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert!(summary.contains("strategy,jt1,ok"), "summary: {summary}");
    assert!(summary.contains("error"), "summary: {summary}");
}

#[test]
fn bench_reports_per_width_timing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("arch.toml");
    std::fs::write(
        &cfg,
        "[arch]\nbase_width = 8\nn_blocks = 1\nscale = 2\n[embedding]\nkind = \"toy\"\n",
    )
    .unwrap();
    let out = run(csd()
        .args(["bench", "--config"])
        .arg(&cfg)
        .args(["--width", "0.5", "--size", "8", "--reps", "1"]));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(text.contains("ms/image"), "stdout: {text}");
    assert!(text.contains("params"), "stdout: {text}");
}
