//! Run directory layout and report emitters.
//!
//! ```text
//! <out>/config.txt                 config echo
//! <out>/checkpoints/task_<t>/      state after task t (1-based)
//! <out>/reports/summary.json
//! <out>/reports/accuracy_matrix.csv          configured routing mode
//! <out>/reports/accuracy_matrix_<mode>.csv   every routing mode
//! <out>/reports/stage_metrics.csv            stage,bwt,ma
//! <out>/reports/confusion.csv                true_task,routed_1..routed_T
//! <out>/reports/routing_log.csv              stage,true_task,routed_task
//! <out>/reports/spectra.csv                  task,layer,rank,raw_rank,index,eigenvalue
//! <out>/reports/losses.csv                   task,step,loss
//! <out>/reports/cross_attention.csv          task,sample,prompt_row,visual_token,weight
//! <out>/logs/stages.jsonl                    one record per completed task
//! ```
//!
//! CSV values are full precision except `stage_metrics.csv`, which is rounded
//! half-up to 2 decimals like `summary.json`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;
use crate::metrics::{round_half_up, routing_confusion, AccuracyMatrix, MatrixSummary};
use crate::projector::LAYERS;
use crate::router::RoutingMode;
use crate::trainer::{RunOutcome, TaskRecord};

/// Test samples per task whose cross-attention maps are exported.
pub const ATTENTION_SAMPLES: usize = 4;

pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.checkpoints(), self.reports(), self.logs()] {
            fs::create_dir_all(d)?;
        }
        Ok(())
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, task: usize) -> PathBuf {
        self.checkpoints().join(format!("task_{}", task + 1))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }
}

fn r2(x: f64) -> f64 {
    round_half_up(x, 2)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeSummary {
    pub final_average: f64,
    pub bwt_mean: Option<f64>,
    pub ma_mean: f64,
}

impl From<&MatrixSummary> for ModeSummary {
    fn from(s: &MatrixSummary) -> Self {
        Self { final_average: r2(s.final_average), bwt_mean: s.bwt_mean.map(r2), ma_mean: r2(s.ma_mean) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub router_mode: RoutingMode,
    pub generator_mode: String,
    pub nullspace: bool,
    pub cross_attention: bool,
    pub eps: f64,
    pub prompt_len: usize,
    pub hidden: usize,
    pub tau: f64,
    pub n_tasks: usize,
}

/// Contents of `summary.json`. Values are rounded half-up to 2 decimals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub final_average: f64,
    pub bwt_mean: Option<f64>,
    pub ma_mean: f64,
    /// Learned-router accuracy (percent) on every task's test split after the last task.
    pub routing_accuracy: f64,
    pub by_mode: BTreeMap<RoutingMode, ModeSummary>,
    pub final_ranks: Vec<usize>,
    pub metadata: RunMetadata,
}

pub fn summarize(out: &RunOutcome) -> Result<Summary> {
    let cfg = &out.state.cfg;
    let primary = out.matrix().summary()?;
    let mut by_mode = BTreeMap::new();
    for (mode, m) in &out.matrices {
        by_mode.insert(*mode, ModeSummary::from(&m.summary()?));
    }
    let stream = &out.stream;
    let mut hits = 0usize;
    let mut total = 0usize;
    for s in stream.tasks.iter().flat_map(|t| &t.test) {
        hits += usize::from(out.state.router.route_sample(s)? == s.task);
        total += 1;
    }
    Ok(Summary {
        final_average: r2(primary.final_average),
        bwt_mean: primary.bwt_mean.map(r2),
        ma_mean: r2(primary.ma_mean),
        routing_accuracy: r2(100.0 * hits as f64 / total as f64),
        by_mode,
        final_ranks: out.state.projections.iter().map(|p| p.rank).collect(),
        metadata: RunMetadata {
            seed: cfg.seed,
            router_mode: cfg.router_mode,
            generator_mode: cfg.generator.mode.to_string(),
            nullspace: cfg.nullspace,
            cross_attention: cfg.generator.cross_attention,
            eps: cfg.eps,
            prompt_len: cfg.generator.prompt_len,
            hidden: cfg.generator.hidden,
            tau: cfg.refine.tau,
            n_tasks: stream.tasks.len(),
        },
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path)?)))
}

pub fn write_stage_metrics(path: &Path, m: &AccuracyMatrix) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["stage", "bwt", "ma"])?;
    for s in m.stage_metrics() {
        w.write_record([
            s.stage.to_string(),
            s.bwt.map(|b| format!("{:.2}", r2(b))).unwrap_or_default(),
            format!("{:.2}", r2(s.ma)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_records(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct StageLog<'a> {
    stage: usize,
    record: &'a TaskRecord,
    accuracy: BTreeMap<RoutingMode, &'a [f64]>,
}

/// Writes every report of a finished run into `layout`.
pub fn write_reports(layout: &RunLayout, out: &RunOutcome) -> Result<Summary> {
    layout.create()?;
    let dir = layout.reports();
    let summary = summarize(out)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;

    out.matrix().write_csv(File::create(dir.join("accuracy_matrix.csv"))?)?;
    for (mode, m) in &out.matrices {
        m.write_csv(File::create(dir.join(format!("accuracy_matrix_{mode}.csv")))?)?;
    }
    write_stage_metrics(&dir.join("stage_metrics.csv"), out.matrix())?;

    let n = out.stream.tasks.len();
    let last = out.routing_logs.last().map(Vec::as_slice).unwrap_or(&[]);
    routing_confusion(last, n)?.write_csv(File::create(dir.join("confusion.csv"))?)?;

    write_records(
        &dir.join("routing_log.csv"),
        &["stage", "true_task", "routed_task"],
        out.routing_logs.iter().enumerate().flat_map(|(t, log)| {
            log.iter().map(move |(a, b)| vec![(t + 1).to_string(), (a + 1).to_string(), (b + 1).to_string()])
        }),
    )?;

    let mut spectra = vec![];
    for r in &out.records {
        for (l, layer) in LAYERS.iter().enumerate() {
            for (k, v) in r.spectra[l].iter().enumerate() {
                spectra.push(vec![
                    (r.task + 1).to_string(),
                    layer.to_string(),
                    r.ranks[l].to_string(),
                    r.raw_ranks[l].to_string(),
                    (k + 1).to_string(),
                    v.to_string(),
                ]);
            }
        }
    }
    write_records(&dir.join("spectra.csv"), &["task", "layer", "rank", "raw_rank", "index", "eigenvalue"], spectra)?;

    write_records(
        &dir.join("losses.csv"),
        &["task", "step", "loss"],
        out.records.iter().flat_map(|r| {
            r.batch_losses
                .iter()
                .enumerate()
                .map(move |(i, l)| vec![(r.task + 1).to_string(), (i + 1).to_string(), l.to_string()])
        }),
    )?;

    let mut attn_rows = vec![];
    for task in &out.stream.tasks {
        for (i, s) in task.test.iter().take(ATTENTION_SAMPLES).enumerate() {
            if let (_, _, Some(a)) = out.state.prompt(s, task.id)? {
                for p in 0..a.nrows() {
                    for v in 0..a.ncols() {
                        attn_rows.push(vec![
                            (task.id + 1).to_string(),
                            (i + 1).to_string(),
                            (p + 1).to_string(),
                            (v + 1).to_string(),
                            a[(p, v)].to_string(),
                        ]);
                    }
                }
            }
        }
    }
    write_records(
        &dir.join("cross_attention.csv"),
        &["task", "sample", "prompt_row", "visual_token", "weight"],
        attn_rows,
    )?;

    let mut log = BufWriter::new(File::create(layout.logs().join("stages.jsonl"))?);
    for (t, rec) in out.records.iter().enumerate() {
        let accuracy = out.matrices.iter().map(|(m, a)| (*m, a.stages()[t].as_slice())).collect();
        serde_json::to_writer(&mut log, &StageLog { stage: t + 1, record: rec, accuracy })?;
        log.write_all(b"\n")?;
    }
    log.flush()?;
    Ok(summary)
}
