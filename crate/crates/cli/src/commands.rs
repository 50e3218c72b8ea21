use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use taskdecomp::checkpoint::{load_checkpoint, save_checkpoint};
use taskdecomp::gradcheck::{op_suite, GradCheckConfig};
use taskdecomp::synthdata::{read_dataset, write_dataset};
use taskdecomp::trainer::NUM_PHASES;
use taskdecomp::{evaluate, Dataset, Error, MetricReport, ModelConfig, Segmenter, TaskDecompModel, TrainConfig, Trainer};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Training and validation splits, generated or read from disk.
pub fn load_splits(cfg: &RunConfig) -> CliResult<(Dataset, Dataset)> {
    let d = &cfg.data;
    let train = match &d.train_file {
        Some(p) => read_dataset(p)?,
        None => generate_split(cfg, d.train_size, d.seed)?,
    };
    let val = match &d.val_file {
        Some(p) => read_dataset(p)?,
        None => generate_split(cfg, d.val_size, d.seed.wrapping_add(1))?,
    };
    for (name, ds) in [("train", &train), ("val", &val)] {
        check_dataset_fits(name, ds, &cfg.model)?;
    }
    Ok((train, val))
}

fn generate_split(cfg: &RunConfig, n: usize, seed: u64) -> CliResult<Dataset> {
    if n == 0 {
        return Err(CliError::Config("requested 0 samples".into()));
    }
    Ok(Dataset::generate(&cfg.world, n, seed)?)
}

fn check_dataset_fits(name: &str, ds: &Dataset, m: &ModelConfig) -> CliResult<()> {
    if ds.is_empty() {
        return Err(CliError::Config(format!("{name} split is empty")));
    }
    if (ds.height, ds.width) != m.image_size || ds.num_classes != m.num_classes || ds.num_scenes != m.num_scenes {
        return Err(CliError::Config(format!(
            "{name} split ({}x{}, K={}, S={}) does not match model ({}x{}, K={}, S={})",
            ds.height, ds.width, ds.num_classes, ds.num_scenes, m.image_size.0, m.image_size.1, m.num_classes, m.num_scenes
        )));
    }
    Ok(())
}

/// Writes `train.tds` and `val.tds` into `out`.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let train = generate_split(cfg, cfg.data.train_size, cfg.data.seed)?;
    let val = generate_split(cfg, cfg.data.val_size, cfg.data.seed.wrapping_add(1))?;
    cfg.write_resolved(out)?;
    let paths = vec![out.join("train.tds"), out.join("val.tds")];
    write_dataset(&train, &paths[0])?;
    write_dataset(&val, &paths[1])?;
    Ok(paths)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub iterations: usize,
    pub report: MetricReport,
}

fn jsonl(path: &Path, append: bool) -> CliResult<BufWriter<File>> {
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    Ok(BufWriter::new(f))
}

/// Trains per `cfg`, writing checkpoints, history and final metrics to `out`.
///
/// On a non-finite loss the pre-step state is saved to `last_good.tdc`
/// before the error is returned.
pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> CliResult<TrainOutcome> {
    cfg.write_resolved(out)?;
    let (train, val) = load_splits(cfg)?;
    let model = TaskDecompModel::build(&cfg.model, cfg.train.seed)?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            Trainer::resume(model, cfg.train.clone(), &train.samples, Some(&val.samples), &ckpt)?
        }
        None => Trainer::new(model, cfg.train.clone(), &train.samples, Some(&val.samples))?,
    };

    let append = resume.is_some();
    let mut history = jsonl(&out.join("history.jsonl"), append)?;
    let mut evals = jsonl(&out.join("evals.jsonl"), append)?;
    let mut evals_written = 0;
    let mut iterations = 0;
    loop {
        let phase = trainer.state().phase;
        let rec = match trainer.step() {
            Ok(Some(rec)) => rec,
            Ok(None) => break,
            Err(e @ Error::NonFinite { .. }) => {
                history.flush()?;
                save_checkpoint(&trainer.checkpoint(), &out.join("last_good.tdc"))?;
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        };
        iterations += 1;
        serde_json::to_writer(&mut history, &rec)?;
        history.write_all(b"\n")?;
        for e in &trainer.history().evals[evals_written..] {
            serde_json::to_writer(&mut evals, e)?;
            evals.write_all(b"\n")?;
        }
        evals_written = trainer.history().evals.len();
        if trainer.state().phase != phase {
            for done in phase..trainer.state().phase.min(NUM_PHASES) {
                save_checkpoint(&trainer.checkpoint(), &out.join(format!("phase{}.tdc", done + 1)))?;
            }
        }
    }
    history.flush()?;
    evals.flush()?;
    save_checkpoint(&trainer.checkpoint(), &out.join("last.tdc"))?;

    let report = evaluate(trainer.model(), &val.samples, cfg.model.num_classes)?;
    fs::write(out.join("metrics.txt"), report.to_text())?;
    fs::write(out.join("metrics.json"), report.to_record() + "\n")?;
    Ok(TrainOutcome { iterations, report })
}

/// Scores `predictor` on a dataset file after checking it fits `model`.
pub fn eval_dataset<P: Segmenter + ?Sized>(predictor: &P, model: &ModelConfig, data: &Dataset) -> CliResult<MetricReport> {
    check_dataset_fits("eval", data, model)?;
    Ok(evaluate(predictor, &data.samples, model.num_classes)?)
}

pub fn cmd_eval(checkpoint: &Path, data: &Path) -> CliResult<MetricReport> {
    if !checkpoint.exists() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let model = load_checkpoint(checkpoint)?.to_model()?;
    let ds = read_dataset(data)?;
    eval_dataset(&model, model.config(), &ds)
}

/// Aggregated result of one op across all seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub name: String,
    pub seeds: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub fn run_gradcheck(seeds: usize, base_seed: u64) -> CliResult<Vec<GradCheckRow>> {
    let cfg = GradCheckConfig::default();
    let mut rows: BTreeMap<String, GradCheckRow> = BTreeMap::new();
    let mut order = Vec::new();
    for s in 0..seeds as u64 {
        for r in op_suite(base_seed.wrapping_add(s), &cfg)? {
            let row = rows.entry(r.name.clone()).or_insert_with(|| {
                order.push(r.name.clone());
                GradCheckRow {
                    name: r.name.clone(),
                    seeds: 0,
                    checked: 0,
                    skipped: 0,
                    max_rel_err: 0.0,
                    passed: true,
                }
            });
            row.seeds += 1;
            row.checked += r.checked;
            row.skipped += r.skipped;
            row.max_rel_err = row.max_rel_err.max(r.max_rel_err);
            row.passed &= r.passed();
        }
    }
    Ok(order.into_iter().map(|n| rows.remove(&n).expect("recorded")).collect())
}

pub fn gradcheck_table(rows: &[GradCheckRow]) -> String {
    let mut s = format!("{:<34} {:>5} {:>8} {:>7} {:>12}  {}\n", "op", "seeds", "checked", "skipped", "max_rel_err", "result");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<34} {:>5} {:>8} {:>7} {:>12.3e}  {}",
            r.name,
            r.seeds,
            r.checked,
            r.skipped,
            r.max_rel_err,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    s
}

pub const ABLATION_LABELS: [&str; 4] = [
    "Base",
    "Base+Class (Step 1)",
    "Base+Class+Sync (Steps 1-2)",
    "Base+Class+Sync+Scene (Steps 1-3)",
];

/// The four ablation schedules derived from `base`: the same phases, with
/// the class weight zeroed for `Base` and later phases switched off.
pub fn ablation_configs(base: &TrainConfig) -> Vec<TrainConfig> {
    (0..4)
        .map(|row| {
            let mut c = base.clone();
            if row == 0 {
                c.phases[0].w1 = 0.0;
            }
            let active_phases = row.max(1);
            for p in c.phases.iter_mut().skip(active_phases) {
                p.iterations = 0;
            }
            c
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub iterations: usize,
    pub iou_pct: Option<f64>,
    pub dice_pct: Option<f64>,
    pub report: MetricReport,
}

/// Trains the four configurations concurrently from the same seed and data.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> CliResult<Vec<AblationRow>> {
    cfg.write_resolved(out)?;
    let (train, val) = load_splits(cfg)?;
    let configs = ablation_configs(&cfg.train);
    let results: Vec<CliResult<AblationRow>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .zip(ABLATION_LABELS)
            .map(|(tc, label)| {
                let (train, val) = (&train, &val);
                s.spawn(move || -> CliResult<AblationRow> {
                    let model = TaskDecompModel::build(&cfg.model, tc.seed)?;
                    let (model, _) = taskdecomp::train(model, &train.samples, None, tc)?;
                    let report = evaluate(&model, &val.samples, cfg.model.num_classes)?;
                    Ok(AblationRow {
                        label: label.to_string(),
                        iterations: tc.total_iterations(),
                        iou_pct: report.mean_iou.map(|v| 100.0 * v),
                        dice_pct: report.mean_dice.map(|v| 100.0 * v),
                        report,
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect()
    });
    let rows = results.into_iter().collect::<CliResult<Vec<_>>>()?;

    fs::write(out.join("ablation.txt"), ablation_table(&rows))?;
    let mut records = String::new();
    for r in &rows {
        records.push_str(&serde_json::to_string(r)?);
        records.push('\n');
    }
    fs::write(out.join("ablation.jsonl"), records)?;
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"));
    let mut s = format!("{:<36} {:>8} {:>8}\n", "Configuration", "IoU (%)", "Dice (%)");
    for r in rows {
        let _ = writeln!(s, "{:<36} {:>8} {:>8}", r.label, pct(r.iou_pct), pct(r.dice_pct));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_rows_differ_only_in_weights_and_activation() {
        let base = TrainConfig::default();
        let rows = ablation_configs(&base);
        assert_eq!(rows.len(), 4);
        let active: Vec<Vec<bool>> = rows
            .iter()
            .map(|c| c.phases.iter().map(|p| p.iterations > 0).collect())
            .collect();
        assert_eq!(
            active,
            vec![
                vec![true, false, false],
                vec![true, false, false],
                vec![true, true, false],
                vec![true, true, true]
            ]
        );
        assert_eq!(rows[0].phases[0].w1, 0.0);
        assert_eq!(rows[3], base);
        for c in &rows {
            c.validate().unwrap();
            let strip = |c: &TrainConfig| TrainConfig {
                phases: vec![],
                ..c.clone()
            };
            assert_eq!(strip(c), strip(&base));
        }
    }
}
