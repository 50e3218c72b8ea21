use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use taskdecomp::synthdata::read_dataset;
use taskdecomp::{Prediction, Result, Segmenter, Tensor, WorldSpec};
use taskdecomp_cli::commands::{ablation_table, eval_dataset, AblationRow, ABLATION_LABELS};
use taskdecomp_cli::RunConfig;

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/tiny.toml")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taskdecomp")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn shipped_configs_parse() {
    for name in ["default.toml", "convergence.toml", "tiny.toml"] {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
        RunConfig::load(Some(&p), &[]).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    let d = RunConfig::load(Some(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/default.toml")), &[]).unwrap();
    assert_eq!(d.train, taskdecomp::TrainConfig::default());
}

#[test]
fn generate_is_deterministic_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["generate", "--config", tiny().to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "4"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["train.tds", "val.tds"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let echoed = RunConfig::load(Some(&a.join("config.resolved.toml")), &[]).unwrap();
    assert_eq!(echoed.data.seed, 4);
    assert_eq!(echoed.train.seed, 4);
    assert_eq!(read_dataset(&a.join("train.tds")).unwrap().len(), 8);
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&run(&["generate", "--out", out, "--override", "data.train_size=0"])), 1);
    assert_eq!(code(&run(&["generate", "--out", out, "--override", "train.bogus=1"])), 1);
    assert_eq!(code(&run(&["generate", "--out", out, "--override", "nonsense"])), 1);
    assert_eq!(code(&run(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&run(&["eval", "--checkpoint", "missing.tdc", "--data", "missing.tds"])), 1);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model]\nnum_classes = 7\n").unwrap();
    assert_eq!(code(&run(&["generate", "--config", bad.to_str().unwrap(), "--out", out])), 1);
}

#[test]
fn non_finite_loss_exits_two_and_keeps_last_good() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nan");
    let o = run(&[
        "train",
        "--config",
        tiny().to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--override",
        "train.lr_schedule=[[0, 1e200]]",
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"));
    let ckpt = taskdecomp::checkpoint::load_checkpoint(&out.join("last_good.tdc")).unwrap();
    assert!(ckpt.params.iter().all(|p| p.values.iter().all(|v| v.is_finite())));
}

#[test]
fn train_then_eval_agree() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let t = tiny();
    let o = run(&["train", "--config", t.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["phase1.tdc", "phase2.tdc", "phase3.tdc", "last.tdc", "history.jsonl", "metrics.txt", "metrics.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read(out.join("phase3.tdc")).unwrap(), fs::read(out.join("last.tdc")).unwrap());

    let data = dir.path().join("data");
    assert_eq!(code(&run(&["generate", "--config", t.to_str().unwrap(), "--out", data.to_str().unwrap()])), 0);
    let o = run(&[
        "eval",
        "--checkpoint",
        out.join("last.tdc").to_str().unwrap(),
        "--data",
        data.join("val.tds").to_str().unwrap(),
        "--out",
        dir.path().join("eval").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    // Same seed, same validation split as training used.
    assert_eq!(String::from_utf8(o.stdout).unwrap(), fs::read_to_string(out.join("metrics.txt")).unwrap());
    assert!(dir.path().join("eval/eval.json").exists());
}

#[test]
fn gradcheck_passes_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--seeds", "2", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("total_loss_hard") && text.contains("conv2d"));
    assert!(!text.contains("FAIL"));
}

/// Copies the ground truth through a lookup keyed on the image bits.
struct CopyStub {
    samples: Vec<taskdecomp::Sample>,
    k: usize,
}

impl Segmenter for CopyStub {
    fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let s = self.samples.iter().find(|s| &s.image == image).expect("known image");
        let hw = s.mask.len();
        let mut seg = vec![0.0; self.k * hw];
        for (p, &l) in s.mask.iter().enumerate() {
            seg[l * hw + p] = 1.0;
        }
        let mut scene = vec![0.0; 2];
        scene[s.scene] = 1.0;
        Ok(Prediction {
            seg_logits: Tensor::new(vec![self.k, s.height(), s.width()], seg)?,
            class_logits: Tensor::from_vec(s.class_presence.iter().map(|&b| if b == 1 { 5.0 } else { -5.0 }).collect()),
            scene_logits: Tensor::from_vec(scene),
        })
    }
}

#[test]
fn eval_of_ground_truth_copy_is_perfect() {
    let cfg = RunConfig::default();
    let ds = taskdecomp::Dataset::generate(&WorldSpec::default(), 12, 3).unwrap();
    let stub = CopyStub {
        samples: ds.samples.clone(),
        k: 4,
    };
    let r = eval_dataset(&stub, &cfg.model, &ds).unwrap();
    assert_eq!(r.mean_iou, Some(1.0));
    assert_eq!(r.mean_dice, Some(1.0));
    assert_eq!(r.class_accuracy, 1.0);
    assert!(r.to_text().contains("mean_iou=1.000000"));
}

#[test]
fn ablate_emits_four_labelled_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["ablate", "--config", tiny().to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].contains("IoU (%)") && lines[0].contains("Dice (%)"));
    assert!(lines[0].find("IoU").unwrap() < lines[0].find("Dice").unwrap());
    for (line, label) in lines[1..].iter().zip(ABLATION_LABELS) {
        assert!(line.starts_with(label), "{line}");
        let nums: Vec<f64> = line[label.len()..].split_whitespace().map(|x| x.parse().unwrap()).collect();
        assert_eq!(nums.len(), 2);
        assert!(nums.iter().all(|v| (0.0..=100.0).contains(v)));
    }
    assert_eq!(fs::read_to_string(dir.path().join("ablation.txt")).unwrap(), text);
    let records = fs::read_to_string(dir.path().join("ablation.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 4);
}

#[test]
fn ablation_table_marks_undefined_scores() {
    let report: taskdecomp::MetricReport = serde_json::from_str(
        r#"{"num_samples":1,"per_class_iou":[null],"per_class_dice":[null],"per_class_hd":[null],
            "mean_iou":null,"mean_dice":null,"mean_hd":null,"class_accuracy":0.0,"scene_accuracy":0.0}"#,
    )
    .unwrap();
    let row = AblationRow {
        label: "Base".into(),
        iterations: 0,
        iou_pct: None,
        dice_pct: None,
        report,
    };
    assert!(ablation_table(&[row]).lines().nth(1).unwrap().ends_with("n/a      n/a"));
}
