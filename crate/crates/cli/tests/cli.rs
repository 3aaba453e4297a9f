//! End-to-end checks of the command-line surface: determinism, file
//! round-trips, mode equivalence and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn repsnet() -> Command {
    Command::new(env!("CARGO_BIN_EXE_repsnet"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn repsnet");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Small config: 3 blocks, width 8, 32x32 images, 10 samples.
const SMALL_CONFIG: &str = "\
height=32
width=32
samples=10
nuclei_min=2
nuclei_max=4
radius_min=3
radius_max=6
num_blocks=3
units_per_block=1,1,1
base_width=8
epochs=1
batch_size=2
lr=1e-3
seed=11
";

struct Workspace {
    root: PathBuf,
}

impl Workspace {
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    fn config(&self) -> PathBuf {
        self.root.join("run.cfg")
    }
    fn ckpt(&self) -> PathBuf {
        self.root.join("train").join("checkpoint_best.ckpt")
    }
}

/// Shared fixture: one synthesized dataset and one trained checkpoint.
fn ws() -> &'static Workspace {
    static WS: OnceLock<Workspace> = OnceLock::new();
    WS.get_or_init(|| {
        let root = tempfile::tempdir().expect("tempdir").keep();
        let ws = Workspace { root };
        std::fs::write(ws.config(), SMALL_CONFIG).unwrap();
        run_ok(repsnet()
            .args(["synth", "--out"])
            .arg(ws.data())
            .arg("--config")
            .arg(ws.config()));
        run_ok(repsnet()
            .args(["train", "--data"])
            .arg(ws.data())
            .arg("--out")
            .arg(ws.root.join("train"))
            .arg("--config")
            .arg(ws.config()));
        ws
    })
}

fn dir_digest(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    entries.sort();
    entries
}

#[test]
fn synth_is_byte_deterministic_and_split_7_1_2() {
    let ws = ws();
    let again = ws.root.join("data_again");
    run_ok(repsnet()
        .args(["synth", "--out"])
        .arg(&again)
        .arg("--config")
        .arg(ws.config()));
    assert_eq!(dir_digest(&ws.data()), dir_digest(&again));

    let read_lines = |p: PathBuf| -> usize {
        std::fs::read_to_string(p).unwrap().lines().count()
    };
    assert_eq!(read_lines(ws.data().join("train.txt")), 7);
    assert_eq!(read_lines(ws.data().join("val.txt")), 1);
    assert_eq!(read_lines(ws.data().join("test.txt")), 2);
    assert_eq!(read_lines(ws.data().join("index.txt")), 10);
    // run log echoes the effective config
    let log = std::fs::read_to_string(ws.data().join("run.log")).unwrap();
    assert!(log.contains("seed=11"));
    assert!(log.contains("e_t=3"));
}

#[test]
fn train_zero_epochs_emits_initial_checkpoint() {
    let ws = ws();
    let out = ws.root.join("train0");
    let cfg = ws.root.join("zero.cfg");
    std::fs::write(&cfg, SMALL_CONFIG.replace("epochs=1", "epochs=0")).unwrap();
    run_ok(repsnet()
        .args(["train", "--data"])
        .arg(ws.data())
        .arg("--out")
        .arg(&out)
        .arg("--config")
        .arg(&cfg));
    assert!(out.join("checkpoint_best.ckpt").exists());
    let log = std::fs::read_to_string(out.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1, "header only, no update rows");
}

#[test]
fn overfit_one_reaches_a_tenth_of_initial_loss() {
    let ws = ws();
    let out = ws.root.join("overfit");
    let cfg = ws.root.join("overfit.cfg");
    std::fs::write(&cfg, SMALL_CONFIG.replace("lr=1e-3", "lr=5e-3")).unwrap();
    let run = run_ok(repsnet()
        .args(["train", "--overfit-one", "--steps", "200", "--data"])
        .arg(ws.data())
        .arg("--out")
        .arg(&out)
        .arg("--config")
        .arg(&cfg));
    let stdout = String::from_utf8_lossy(&run.stdout);
    let pct: f64 = stdout
        .split('(')
        .nth(1)
        .and_then(|s| s.split('%').next())
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or_else(|| panic!("unexpected output: {stdout}"));
    assert!(pct < 10.0, "final loss {pct}% of initial");
}

#[test]
fn fuse_writes_smaller_checkpoint_and_is_idempotent() {
    let ws = ws();
    let fused = ws.root.join("fused.ckpt");
    let out = run_ok(repsnet()
        .args(["fuse", "--input"])
        .arg(ws.ckpt())
        .arg("--output")
        .arg(&fused));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("fusion verified"));
    assert!(
        std::fs::metadata(&fused).unwrap().len() < std::fs::metadata(ws.ckpt()).unwrap().len()
    );

    let fused2 = ws.root.join("fused2.ckpt");
    let out2 = run_ok(repsnet()
        .args(["fuse", "--input"])
        .arg(&fused)
        .arg("--output")
        .arg(&fused2));
    assert!(String::from_utf8_lossy(&out2.stdout).contains("already fused"));
    assert_eq!(std::fs::read(&fused).unwrap(), std::fs::read(&fused2).unwrap());
}

#[test]
fn infer_modes_agree_and_outputs_round_trip() {
    let ws = ws();
    let out_train = ws.root.join("pred_train");
    let out_fused = ws.root.join("pred_fused");
    run_ok(repsnet()
        .args(["infer", "--checkpoint"])
        .arg(ws.ckpt())
        .arg("--images")
        .arg(ws.data())
        .arg("--out")
        .arg(&out_train)
        .args(["--mode", "train", "--overlay"])
        .arg("--config")
        .arg(ws.config()));
    run_ok(repsnet()
        .args(["infer", "--checkpoint"])
        .arg(ws.ckpt())
        .arg("--images")
        .arg(ws.data())
        .arg("--out")
        .arg(&out_fused)
        .args(["--mode", "fused"])
        .arg("--config")
        .arg(ws.config()));
    for i in 0..10 {
        let name = format!("sample_{i:05}_pred.png");
        let a = repsnet_core_load(&out_train.join(&name));
        let b = repsnet_core_load(&out_fused.join(&name));
        assert_eq!(a, b, "train and fused instance maps differ for {name}");
    }
    assert!(out_train.join("sample_00000_overlay.png").exists());
    assert!(out_train.join("sample_00000_classes.csv").exists());
}

fn repsnet_core_load(path: &Path) -> Vec<u16> {
    let img = image::open(path).unwrap().to_luma16();
    img.into_raw()
}

#[test]
fn infer_blank_image_yields_zero_instances() {
    let ws = ws();
    let dir = ws.root.join("blank");
    std::fs::create_dir_all(&dir).unwrap();
    // uniform background-colored image
    let img = image::RgbImage::from_pixel(32, 32, image::Rgb([210, 205, 214]));
    img.save(dir.join("blank.png")).unwrap();
    let out = ws.root.join("blank_pred");
    run_ok(repsnet()
        .args(["infer", "--checkpoint"])
        .arg(ws.ckpt())
        .arg("--images")
        .arg(&dir)
        .arg("--out")
        .arg(&out)
        .arg("--config")
        .arg(ws.config()));
    let pred = repsnet_core_load(&out.join("blank_pred.png"));
    assert!(pred.iter().all(|&v| v == 0), "expected an empty instance map");
}

#[test]
fn infer_rejects_indivisible_images_with_pad_guidance() {
    let ws = ws();
    let dir = ws.root.join("odd");
    std::fs::create_dir_all(&dir).unwrap();
    let img = image::RgbImage::from_pixel(30, 32, image::Rgb([200, 200, 200]));
    img.save(dir.join("odd.png")).unwrap();
    let out = repsnet()
        .args(["infer", "--checkpoint"])
        .arg(ws.ckpt())
        .arg("--images")
        .arg(&dir)
        .arg("--out")
        .arg(ws.root.join("odd_pred"))
        .arg("--config")
        .arg(ws.config())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pad"));
}

#[test]
fn eval_perfect_predictions_score_one() {
    let ws = ws();
    // use the ground truth as its own prediction
    let pred = ws.root.join("perfect");
    std::fs::create_dir_all(&pred).unwrap();
    for i in 0..10 {
        let name = format!("sample_{i:05}");
        std::fs::copy(
            ws.data().join(format!("{name}_inst.png")),
            pred.join(format!("{name}_pred.png")),
        )
        .unwrap();
        // classes csv from the type map
        let inst = repsnet_core::groundtruth::dataset::load_instance_map(
            &ws.data().join(format!("{name}_inst.png")),
        )
        .unwrap();
        let types = repsnet_core::groundtruth::dataset::load_type_map(
            &ws.data().join(format!("{name}_types.png")),
        )
        .unwrap();
        let mut rows = String::from("instance_id,class,pixel_count\n");
        for l in 1..=inst.max_label() {
            let mut class = 0u8;
            let mut count = 0u32;
            for (j, &v) in inst.labels.iter().enumerate() {
                if v == l {
                    class = types.types[j];
                    count += 1;
                }
            }
            rows.push_str(&format!("{l},{class},{count}\n"));
        }
        std::fs::write(pred.join(format!("{name}_classes.csv")), rows).unwrap();
    }
    let out = run_ok(repsnet()
        .args(["eval", "--pred"])
        .arg(&pred)
        .arg("--gt")
        .arg(ws.data()));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("DICE=1.000000"), "{stdout}");
    assert!(stdout.contains("AJI=1.000000"));
    assert!(stdout.contains("PQ=1.000000"));
    assert!(stdout.contains("mPQ=1.000000"));
    assert!(pred.join("per_image.csv").exists());
    assert!(pred.join("summary.txt").exists());
}

#[test]
fn eval_empty_predictions_score_zero_and_mismatch_exits_nonzero() {
    let ws = ws();
    let pred = ws.root.join("empty_pred");
    std::fs::create_dir_all(&pred).unwrap();
    // one empty prediction for sample 0, nothing for the rest
    let empty = repsnet_core::groundtruth::InstanceMap::new(32, 32);
    repsnet_core::groundtruth::dataset::save_instance_map(
        &pred.join("sample_00000_pred.png"),
        &empty,
    )
    .unwrap();
    std::fs::write(
        pred.join("sample_00000_classes.csv"),
        "instance_id,class,pixel_count\n",
    )
    .unwrap();
    let out = repsnet()
        .args(["eval", "--pred"])
        .arg(&pred)
        .arg("--gt")
        .arg(ws.data())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "mismatched basenames exit 2");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PQ=0.000000"), "{stdout}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("sample_00001"), "mismatches listed: {stderr}");
}

#[test]
fn checkgrad_passes_and_prints_table() {
    let out = run_ok(repsnet().args(["checkgrad", "--seed", "5"]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("conv2d k3 s1 dx"));
    assert!(stdout.contains("PASS"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn bench_reports_strictly_smaller_fused_counts() {
    let ws = ws();
    let run1 = run_ok(repsnet()
        .args(["bench", "--checkpoint"])
        .arg(ws.ckpt())
        .args(["--runs", "2", "--height", "32", "--width", "32"]));
    let s1 = String::from_utf8_lossy(&run1.stdout).into_owned();
    let counts = |s: &str| -> (u64, u64, u64, u64) {
        let grab = |line: &str| {
            let f: Vec<&str> = line.split_whitespace().collect();
            (f[f.len() - 2].parse().unwrap(), f[f.len() - 1].parse().unwrap())
        };
        let multi = s.lines().find(|l| l.starts_with("multi-branch")).unwrap();
        let fused = s.lines().find(|l| l.starts_with("fused")).unwrap();
        let (mp, mf) = grab(multi);
        let (fp, ff) = grab(fused);
        (mp, mf, fp, ff)
    };
    let (mp, mf, fp, ff) = counts(&s1);
    assert!(fp < mp, "fused params {fp} !< {mp}");
    assert!(ff < mf, "fused flops {ff} !< {mf}");
    // identical counts on a second run
    let run2 = run_ok(repsnet()
        .args(["bench", "--checkpoint"])
        .arg(ws.ckpt())
        .args(["--runs", "2", "--height", "32", "--width", "32"]));
    let (mp2, mf2, fp2, ff2) = counts(&String::from_utf8_lossy(&run2.stdout));
    assert_eq!((mp, mf, fp, ff), (mp2, mf2, fp2, ff2));
}

#[test]
fn exit_codes_for_usage_validation_and_numeric_failures() {
    // usage: unknown flag
    let out = repsnet().args(["synth", "--nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    // validation: unknown config key
    let ws = ws();
    let bad_cfg = ws.root.join("bad.cfg");
    std::fs::write(&bad_cfg, "not_a_key=1\n").unwrap();
    let out = repsnet()
        .args(["synth", "--out"])
        .arg(ws.root.join("never"))
        .arg("--config")
        .arg(&bad_cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key"));

    // numeric: an absurd learning rate explodes the weights into NaN
    let nan_cfg = ws.root.join("nan.cfg");
    std::fs::write(&nan_cfg, SMALL_CONFIG.replace("lr=1e-3", "lr=1e18")).unwrap();
    let out = repsnet()
        .args(["train", "--data"])
        .arg(ws.data())
        .arg("--out")
        .arg(ws.root.join("nan_train"))
        .arg("--config")
        .arg(&nan_cfg)
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}
