//! The `gen-data`, `train`, `sweep` and `report` commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{join, ExperimentConfig, SweepPoint};
use crate::dataset::{file_sha256, generate_dataset, Dataset};
use crate::error::{AmqError, Result};
use crate::train::{batch_hash, EvalMetrics, StepMetrics, Trainer};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const METRICS_CSV: &str = "metrics.csv";
pub const TRAIN_LOG_CSV: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.amq";
pub const SWEEP_CSV: &str = "sweep.csv";
const DONE_MARKER: &str = "done.json";

/// Receives human-readable progress lines.
pub type Progress<'a> = &'a mut dyn FnMut(&str);

fn csv_err(e: csv::Error) -> AmqError {
    AmqError::Format(e.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenDataReport {
    pub path: PathBuf,
    pub samples: usize,
    pub sha256: String,
}

pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<GenDataReport> {
    cfg.data.validate().map_err(|e| AmqError::Config(e.to_string()))?;
    let ds = generate_dataset(&cfg.data)?;
    let path = cfg.output.dataset.clone();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    ds.write_jsonl(&path)?;
    Ok(GenDataReport { samples: ds.train.len() + ds.val.len(), sha256: file_sha256(&path)?, path })
}

/// One evaluation, as written to the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub mode: String,
    pub levels: String,
    pub ratios: String,
    pub val_loss: f64,
    pub rel_l2: f64,
    pub aux_loss: f64,
    pub macs_int8eq: f64,
    pub aux_macs: f64,
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub batch_hash: String,
    pub lr_main: f64,
    pub main_loss: f64,
    pub aux_loss: f64,
    pub macs_int8eq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub dir: PathBuf,
    pub steps: usize,
    pub final_eval: EvalMetrics,
}

fn metrics_row(cfg: &ExperimentConfig, hash: &str, step: usize, m: &EvalMetrics) -> MetricsRow {
    MetricsRow {
        step,
        mode: cfg.train.mode.as_str().into(),
        levels: join(&cfg.train.levels, ";"),
        ratios: join(&cfg.train.ratios, ";"),
        val_loss: m.val_loss,
        rel_l2: m.rel_l2,
        aux_loss: m.aux_loss,
        macs_int8eq: m.macs_int8eq,
        aux_macs: m.aux_macs,
        seed: cfg.train.seed,
        config_hash: hash.into(),
        code_version: CODE_VERSION.into(),
    }
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let path = &cfg.output.dataset;
    if !path.exists() {
        return Err(AmqError::Config(format!("dataset {} does not exist", path.display())));
    }
    Dataset::read_jsonl(path)
}

/// Trains one model, evaluating and checkpointing on schedule. With
/// `resume`, continues from the checkpoint in the output directory; the
/// configuration must be unchanged.
pub fn cmd_train(cfg: &ExperimentConfig, resume: bool, progress: Progress) -> Result<TrainReport> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    train_on(cfg, &data, resume, progress)
}

/// [`cmd_train`] on an already loaded dataset.
pub fn train_on(cfg: &ExperimentConfig, data: &Dataset, resume: bool, progress: Progress) -> Result<TrainReport> {
    cfg.validate()?;
    let dir = cfg.output.dir.clone();
    fs::create_dir_all(&dir)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let hash = cfg.hash();

    let mut trainer = if resume && ckpt_path.exists() {
        let ck = Checkpoint::load(&ckpt_path)?;
        if ck.config.hash() != hash {
            return Err(AmqError::Config("checkpoint was written with a different configuration".into()));
        }
        Trainer::from_state(cfg.model.clone(), cfg.aux.clone(), cfg.train.clone(), ck.state, data)?
    } else {
        Trainer::new(cfg.model.clone(), cfg.aux.clone(), cfg.train.clone(), data)?
    };
    let start = trainer.state.step;
    let mut metrics: Vec<MetricsRow> = read_rows(&dir.join(METRICS_CSV))?;
    let mut log: Vec<TrainLogRow> = read_rows(&dir.join(TRAIN_LOG_CSV))?;
    // rows written after the last checkpoint are replayed
    metrics.retain(|r| start > 0 && r.step <= start);
    log.retain(|r| start > 0 && r.step <= start);

    let total = trainer.total_steps();
    let mut last_eval = None;
    for step in start..total {
        let batch = trainer.batch_for_step(step);
        let m: StepMetrics = trainer.train_step(&batch)?;
        log.push(TrainLogRow {
            step: m.step,
            batch_hash: batch_hash(&batch),
            lr_main: m.lr_main,
            main_loss: m.main_loss,
            aux_loss: m.aux_loss,
            macs_int8eq: m.macs_int8eq,
        });
        if trainer.eval_due(m.step) {
            let e = trainer.evaluate_val()?;
            progress(&format!(
                "step {}/{total}: train {:.4e} val {:.4e} rel_l2 {:.4} macs {:.0}",
                m.step, m.main_loss, e.val_loss, e.rel_l2, e.macs_int8eq
            ));
            metrics.push(metrics_row(cfg, &hash, m.step, &e));
            write_rows(&dir.join(METRICS_CSV), &metrics)?;
            write_rows(&dir.join(TRAIN_LOG_CSV), &log)?;
            Checkpoint { config: cfg.clone(), state: trainer.state.clone() }.save(&ckpt_path)?;
            last_eval = Some(e);
        }
    }
    let final_eval = match last_eval {
        Some(e) => e,
        None => trainer.evaluate_val()?,
    };
    Ok(TrainReport { dir, steps: trainer.state.step, final_eval })
}

/// One line of the consolidated sweep CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: String,
    pub mode: String,
    pub levels: String,
    pub ratios: String,
    pub seed: u64,
    pub status: String,
    pub val_loss: Option<f64>,
    pub rel_l2: Option<f64>,
    pub macs_int8eq: Option<f64>,
    pub aux_macs: Option<f64>,
    pub error: String,
    pub config_hash: String,
    pub code_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub csv: PathBuf,
    pub rows: Vec<SweepRow>,
    pub skipped: usize,
}

impl SweepReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.status != "ok").count()
    }
}

fn sweep_row(point: &SweepPoint, cfg: &ExperimentConfig, result: std::result::Result<&EvalMetrics, String>) -> SweepRow {
    let (status, m, error) = match result {
        Ok(m) => ("ok", Some(m), String::new()),
        Err(e) => ("failed", None, e),
    };
    SweepRow {
        point: point.label(),
        mode: point.mode.as_str().into(),
        levels: join(&point.levels, ";"),
        ratios: join(&point.ratios, ";"),
        seed: cfg.train.seed,
        status: status.into(),
        val_loss: m.map(|m| m.val_loss),
        rel_l2: m.map(|m| m.rel_l2),
        macs_int8eq: m.map(|m| m.macs_int8eq),
        aux_macs: m.map(|m| m.aux_macs),
        error,
        config_hash: cfg.hash(),
        code_version: CODE_VERSION.into(),
    }
}

/// Trains every sweep point for every seed. A failing point is recorded
/// and the sweep moves on. With `resume`, finished points are read back
/// instead of retrained.
pub fn cmd_sweep(cfg: &ExperimentConfig, resume: bool, progress: Progress) -> Result<SweepReport> {
    cfg.validate()?;
    if cfg.sweep.points.is_empty() {
        return Err(AmqError::Config("sweep grid is empty".into()));
    }
    let data = load_dataset(cfg)?;
    fs::create_dir_all(&cfg.output.dir)?;
    let mut rows = Vec::new();
    let mut skipped = 0;
    for seed in cfg.sweep_seeds() {
        for point in &cfg.sweep.points {
            let dir = cfg.output.dir.join("points").join(format!("{}-s{seed}", point.label()));
            let pcfg = cfg.for_point(point, seed, dir.clone());
            let done = dir.join(DONE_MARKER);
            if resume && done.exists() {
                let m: EvalMetrics = serde_json::from_str(&fs::read_to_string(&done)?)
                    .map_err(|e| AmqError::Format(e.to_string()))?;
                rows.push(sweep_row(point, &pcfg, Ok(&m)));
                skipped += 1;
                continue;
            }
            progress(&format!("sweep point {} seed {seed}", point.label()));
            let result = train_on(&pcfg, &data, resume, progress);
            match result {
                Ok(r) => {
                    let json = serde_json::to_string(&r.final_eval).map_err(|e| AmqError::Format(e.to_string()))?;
                    fs::write(&done, json)?;
                    rows.push(sweep_row(point, &pcfg, Ok(&r.final_eval)));
                }
                Err(e) => {
                    progress(&format!("sweep point {} seed {seed} failed: {e}", point.label()));
                    rows.push(sweep_row(point, &pcfg, Err(e.to_string())));
                }
            }
        }
    }
    let csv = cfg.output.dir.join(SWEEP_CSV);
    write_rows(&csv, &rows)?;
    Ok(SweepReport { csv, rows, skipped })
}

/// Mean over seeds of one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSummary {
    pub point: String,
    pub seeds: usize,
    pub val_loss: f64,
    pub macs_int8eq: f64,
    /// `(loss - int8) / (int4 - int8)` averaged over seeds, when both
    /// uniform baselines are present.
    pub normalized_increase: Option<f64>,
}

/// Groups sweep rows by point. Normalization uses the `uniform-8-1` and
/// `uniform-4-1` rows of the same seed.
pub fn summarize(rows: &[SweepRow]) -> Vec<PointSummary> {
    let ok: Vec<&SweepRow> = rows.iter().filter(|r| r.status == "ok" && r.val_loss.is_some()).collect();
    let baseline = |label: &str, seed: u64| {
        ok.iter().find(|r| r.point == label && r.seed == seed).and_then(|r| r.val_loss)
    };
    let mut groups: BTreeMap<&str, Vec<&SweepRow>> = BTreeMap::new();
    for r in &ok {
        groups.entry(r.point.as_str()).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(point, rs)| {
            let n = rs.len() as f64;
            let incs: Vec<f64> = rs
                .iter()
                .filter_map(|r| {
                    let (b8, b4) = (baseline("uniform-8-1", r.seed)?, baseline("uniform-4-1", r.seed)?);
                    (b4 != b8).then(|| (r.val_loss.unwrap() - b8) / (b4 - b8))
                })
                .collect();
            PointSummary {
                point: point.to_string(),
                seeds: rs.len(),
                val_loss: rs.iter().filter_map(|r| r.val_loss).sum::<f64>() / n,
                macs_int8eq: rs.iter().filter_map(|r| r.macs_int8eq).sum::<f64>() / n,
                normalized_increase: (incs.len() == rs.len()).then(|| incs.iter().sum::<f64>() / incs.len() as f64),
            }
        })
        .collect()
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    if !path.exists() {
        return Err(AmqError::Config(format!("{} does not exist", path.display())));
    }
    read_rows(path)
}

/// Text table of [`summarize`], optionally with an SVG scatter plot of
/// loss against cost.
pub fn cmd_report(sweep_csv: &Path, plot: Option<&Path>) -> Result<String> {
    let rows = read_sweep_csv(sweep_csv)?;
    let summary = summarize(&rows);
    let mut out = String::new();
    writeln!(out, "{:<32} {:>5} {:>14} {:>14} {:>10}", "point", "seeds", "val_loss", "macs_int8eq", "increase").unwrap();
    for s in &summary {
        let inc = s.normalized_increase.map_or("-".to_string(), |v| format!("{:+.1}%", 100.0 * v));
        writeln!(out, "{:<32} {:>5} {:>14.6e} {:>14.0} {:>10}", s.point, s.seeds, s.val_loss, s.macs_int8eq, inc)
            .unwrap();
    }
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        writeln!(out, "{failed} failed run(s)").unwrap();
    }
    if let Some(p) = plot {
        fs::write(p, pareto_svg(&summary))?;
    }
    Ok(out)
}

fn pareto_svg(summary: &[PointSummary]) -> String {
    let (w, h, m) = (640.0, 420.0, 60.0);
    let xs: Vec<f64> = summary.iter().map(|s| s.macs_int8eq).collect();
    let ys: Vec<f64> = summary.iter().map(|s| s.val_loss).collect();
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) }
    };
    let ((x0, x1), (y0, y1)) = (range(&xs), range(&ys));
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ty}\" text-anchor=\"middle\">Int8-equivalent MACs per sample</text>\n\
         <text x=\"14\" y=\"{cy}\" transform=\"rotate(-90 14 {cy})\" text-anchor=\"middle\">validation loss</text>\n",
        b = h - m,
        r = w - m,
        cx = w / 2.0,
        ty = h - 20.0,
        cy = h / 2.0,
    );
    for p in summary {
        let color = if p.point.starts_with("uniform") {
            "black"
        } else if p.point.starts_with("random") {
            "gray"
        } else {
            "crimson"
        };
        let (x, y) = (px(p.macs_int8eq), py(p.val_loss));
        writeln!(s, "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"4\" fill=\"{color}\"/>").unwrap();
        writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>", x + 6.0, y - 6.0, p.point).unwrap();
    }
    s.push_str("</svg>\n");
    s
}
