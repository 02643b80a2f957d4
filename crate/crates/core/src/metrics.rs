//! Continual-learning metrics over a lower-triangular accuracy matrix and
//! routing confusion diagnostics.

use std::io::{Read, Write};

use serde::Serialize;

use crate::error::{Error, Result};

/// Accuracies in percent. `stages[t][s]` holds `A_{s,t}` (0-based), i.e. the
/// accuracy on task `s` after training through task `t`; one row per stage,
/// matching how result tables are usually printed.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct AccuracyMatrix {
    stages: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_stages(stages: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for row in stages {
            m.push_stage(row)?;
        }
        Ok(m)
    }

    /// Appends stage `t`; the row must hold `t + 1` entries in `[0, 100]`.
    pub fn push_stage(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.stages.len();
        if row.len() != t + 1 {
            return Err(Error::IncompleteMatrix(format!(
                "stage {} needs {} entries, got {}",
                t + 1,
                t + 1,
                row.len()
            )));
        }
        if let Some(bad) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(Error::Malformed(format!("accuracy {bad} outside [0, 100]")));
        }
        self.stages.push(row);
        Ok(())
    }

    /// Number of completed stages.
    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn stages(&self) -> &[Vec<f64>] {
        &self.stages
    }

    /// `A_{s,t}` with 1-based task and stage indices.
    pub fn get(&self, s: usize, t: usize) -> Result<f64> {
        if s == 0 || t == 0 || s > t || t > self.len() {
            return Err(Error::UndefinedStage(format!("A[{s},{t}] with {} stages", self.len())));
        }
        Ok(self.stages[t - 1][s - 1])
    }

    /// Mean of the last stage's row.
    pub fn final_average(&self) -> Result<f64> {
        let last = self.stages.last().ok_or_else(|| Error::IncompleteMatrix("no stages".into()))?;
        Ok(last.iter().sum::<f64>() / last.len() as f64)
    }

    /// `B_t = 1/(t-1) ∑_{s<t} (A_{s,s} - A_{s,t})`, 1-based `t ≥ 2`.
    pub fn backward_transfer(&self, t: usize) -> Result<f64> {
        if t < 2 || t > self.len() {
            return Err(Error::UndefinedStage(format!(
                "backward transfer needs 2 ≤ t ≤ {}, got {t}",
                self.len()
            )));
        }
        let mut sum = 0.0;
        for s in 1..t {
            sum += self.get(s, s)? - self.get(s, t)?;
        }
        Ok(sum / (t - 1) as f64)
    }

    /// `M_t = 1/t ∑_{s≤t} A_{s,t}`, 1-based `t ≥ 1`.
    pub fn mean_accuracy(&self, t: usize) -> Result<f64> {
        if t < 1 || t > self.len() {
            return Err(Error::UndefinedStage(format!("mean accuracy needs 1 ≤ t ≤ {}, got {t}", self.len())));
        }
        Ok(self.stages[t - 1].iter().sum::<f64>() / t as f64)
    }

    pub fn stage_metrics(&self) -> Vec<StageMetrics> {
        (1..=self.len())
            .map(|t| StageMetrics {
                stage: t,
                bwt: self.backward_transfer(t).ok(),
                ma: self.mean_accuracy(t).expect("stage in range"),
            })
            .collect()
    }

    pub fn summary(&self) -> Result<MatrixSummary> {
        let final_average = self.final_average()?;
        let stages = self.stage_metrics();
        let later: Vec<&StageMetrics> = stages.iter().filter(|m| m.stage >= 2).collect();
        let (bwt_mean, ma_mean) = if later.is_empty() {
            (None, stages[0].ma)
        } else {
            let n = later.len() as f64;
            (
                Some(later.iter().map(|m| m.bwt.expect("defined for t ≥ 2")).sum::<f64>() / n),
                later.iter().map(|m| m.ma).sum::<f64>() / n,
            )
        };
        Ok(MatrixSummary { final_average, bwt_mean, ma_mean, stages })
    }

    /// Reads a matrix laid out one stage per row: a header, then a label
    /// column followed by task columns. Cells above the diagonal are ignored.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(reader);
        let mut rows = vec![];
        for (t, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let mut row = Vec::with_capacity(t + 1);
            for s in 0..=t {
                let cell = rec.get(s + 1).unwrap_or("");
                if cell.is_empty() {
                    return Err(Error::IncompleteMatrix(format!("missing A[{},{}]", s + 1, t + 1)));
                }
                row.push(
                    cell.parse::<f64>()
                        .map_err(|_| Error::Malformed(format!("stage {} task {}: `{cell}` is not a number", t + 1, s + 1)))?,
                );
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Malformed("accuracy matrix has no stages".into()));
        }
        Self::from_stages(rows)
    }

    pub fn load_csv(path: &std::path::Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    /// Writes the `stage,task_1,…,task_T` layout read by [`read_csv`](Self::read_csv),
    /// using full precision.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let n = self.len();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["stage".to_string()];
        header.extend((1..=n).map(|s| format!("task_{s}")));
        w.write_record(&header)?;
        for (t, row) in self.stages.iter().enumerate() {
            let mut rec = vec![(t + 1).to_string()];
            rec.extend((0..n).map(|s| row.get(s).map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageMetrics {
    pub stage: usize,
    /// Undefined at the first stage.
    pub bwt: Option<f64>,
    pub ma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixSummary {
    pub final_average: f64,
    /// Mean of `B_t` over stages `2..=T`; absent for a single task.
    pub bwt_mean: Option<f64>,
    /// Mean of `M_t` over stages `2..=T` (just `M_1` for a single task).
    pub ma_mean: f64,
    pub stages: Vec<StageMetrics>,
}

/// Rounds half away from zero at `decimals` places. The value is first
/// snapped to 9 decimals so that e.g. `67.475` (stored as `67.47499…`) rounds up.
pub fn round_half_up(x: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    let snapped = (x * scale * 1e9).round() / 1e9;
    (snapped.abs() + 0.5).floor().copysign(x) / scale
}

/// Row-normalized routing percentages: rows are true tasks, columns routed tasks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
    pub percent: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    pub fn n_tasks(&self) -> usize {
        self.counts.len()
    }

    /// Percentage of all logged samples routed to their own task.
    pub fn accuracy(&self) -> f64 {
        let total: usize = self.counts.iter().flatten().sum();
        let hit: usize = (0..self.n_tasks()).map(|i| self.counts[i][i]).sum();
        100.0 * hit as f64 / total as f64
    }

    pub fn per_task_accuracy(&self) -> Vec<f64> {
        (0..self.n_tasks()).map(|i| self.percent[i][i]).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let n = self.n_tasks();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["true_task".to_string()];
        header.extend((1..=n).map(|t| format!("routed_{t}")));
        w.write_record(&header)?;
        for (i, row) in self.percent.iter().enumerate() {
            let mut rec = vec![(i + 1).to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Builds the confusion matrix from `(true, routed)` pairs (0-based task ids).
pub fn routing_confusion(log: &[(usize, usize)], n_tasks: usize) -> Result<ConfusionMatrix> {
    let mut counts = vec![vec![0usize; n_tasks]; n_tasks];
    for &(t, r) in log {
        if t >= n_tasks || r >= n_tasks {
            return Err(Error::Bounds { index: t.max(r), len: n_tasks });
        }
        counts[t][r] += 1;
    }
    let mut percent = Vec::with_capacity(n_tasks);
    for (t, row) in counts.iter().enumerate() {
        let total: usize = row.iter().sum();
        if total == 0 {
            return Err(Error::EmptyStatistics(format!("task {} has no routed samples", t + 1)));
        }
        percent.push(row.iter().map(|&c| 100.0 * c as f64 / total as f64).collect());
    }
    Ok(ConfusionMatrix { counts, percent })
}
