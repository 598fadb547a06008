use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{evaluate, finetune, train_adapter, train_base, Dataset, Mode, TrainConfig, TrainOutcome};
use crate::corpus::{split_corpus, Corpus};
use crate::error::{Error, Result};
use crate::io::{atomic_write, fingerprint};
use crate::lfcc::LfccConfig;
use crate::lora::{save_adapters, AdapterSet};
use crate::metrics::write_scores;
use crate::model::{build_model, load_checkpoint, save_checkpoint, ModelParams, SENetConfig};

pub const SOM_ROW: &str = "SoM";

/// Corpora in arrival order; the first one trains the source model.
#[derive(Debug, Clone)]
pub struct SequencePlan {
    pub corpora: Vec<Corpus>,
    pub mode: Mode,
    /// Free text carried into the report.
    pub note: String,
    /// Share of each corpus used for training; the rest is evaluated.
    pub train_fraction: f64,
}

impl SequencePlan {
    pub fn validate(&self) -> Result<()> {
        if self.corpora.is_empty() {
            return Err(Error::invalid("sequence plan", "no corpora"));
        }
        let mut seen = HashSet::new();
        for c in &self.corpora {
            if c.tag.is_empty() || c.tag.contains(['.', '/', '\\', '=', ' ']) {
                return Err(Error::invalid("sequence plan", format!("bad corpus tag {:?}", c.tag)));
            }
            if !seen.insert(c.tag.as_str()) {
                return Err(Error::invalid("sequence plan", format!("duplicate corpus tag {}", c.tag)));
            }
        }
        if self.note.contains('\n') {
            return Err(Error::invalid("sequence plan", "note must be a single line"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid("sequence plan", "train_fraction must be in (0, 1)"));
        }
        Ok(())
    }
}

/// EER in percent for each model state (row) on each corpus (column).
#[derive(Debug, Clone, PartialEq)]
pub struct ReportMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: Vec<Vec<f64>>,
}

impl ReportMatrix {
    pub fn get(&self, row: &str, col: &str) -> Option<f64> {
        let r = self.rows.iter().position(|x| x == row)?;
        let c = self.cols.iter().position(|x| x == col)?;
        Some(self.cells[r][c])
    }

    pub fn to_table(&self) -> String {
        let w0 = self.rows.iter().map(String::len).max().unwrap_or(0).max(7);
        let w = self.cols.iter().map(String::len).max().unwrap_or(0).max(7);
        let mut out = String::new();
        let _ = write!(out, "{:<w0$}", "EER (%)");
        for c in &self.cols {
            let _ = write!(out, " | {c:>w$}");
        }
        out.push('\n');
        let _ = write!(out, "{}", "-".repeat(w0));
        for _ in &self.cols {
            let _ = write!(out, "-+-{}", "-".repeat(w));
        }
        out.push('\n');
        for (r, row) in self.rows.iter().zip(&self.cells) {
            let _ = write!(out, "{r:<w0$}");
            for v in row {
                let _ = write!(out, " | {v:>w$.2}");
            }
            out.push('\n');
        }
        out
    }

    /// `cell.<row>.<col>=<eer %>` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (r, row) in self.rows.iter().zip(&self.cells) {
            for (c, v) in self.cols.iter().zip(row) {
                let _ = writeln!(out, "cell.{r}.{c}={v:.6}");
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SequenceOutcome {
    pub matrix: ReportMatrix,
    pub base_fingerprint_before: u64,
    pub base_fingerprint_after: u64,
    /// `(stage, outcome)` for the base and every later corpus.
    pub training: Vec<(String, TrainOutcome)>,
    pub base_path: PathBuf,
    pub report_path: PathBuf,
    pub kv_path: PathBuf,
}

pub fn row_name(tag: &str) -> String {
    format!("after-{tag}")
}

pub fn score_path(out: &Path, row: &str, col: &str) -> PathBuf {
    out.join("scores").join(row).join(format!("{col}.txt"))
}

fn eval_row(
    out: &Path,
    row: &str,
    eval: &[Dataset],
    route: impl Fn(usize) -> (ModelParams<f32>, Option<AdapterSet<f32>>),
    jobs: usize,
) -> Result<Vec<f64>> {
    let mut cells = Vec::with_capacity(eval.len());
    for (j, data) in eval.iter().enumerate() {
        let (model, adapters) = route(j);
        let (eer, records) = evaluate(&model, adapters.as_ref(), data, jobs)?;
        write_scores(&records, &score_path(out, row, &data.tag))?;
        cells.push(100.0 * eer);
    }
    Ok(cells)
}

/// Trains the source model on the first corpus, then either trains one
/// adapter set per later corpus against the frozen base (`lora`) or finetunes
/// the whole model corpus after corpus (`finetune`). After each stage every
/// corpus is evaluated: in `lora` mode corpus `j` is routed to the base plus
/// its own adapters when they exist and to the bare base otherwise.
///
/// Writes under `out`: `base.fadckpt`, `adapters/<tag>.fadlora` or
/// `checkpoints/after-<tag>.fadckpt`, `scores/<row>/<tag>.txt`,
/// `report.txt` and `report.kv`.
pub fn run_sequence(
    plan: &SequencePlan,
    model_cfg: &SENetConfig,
    lfcc_cfg: &LfccConfig,
    cfg: &TrainConfig,
    out: &Path,
    jobs: usize,
) -> Result<SequenceOutcome> {
    plan.validate()?;
    cfg.validate()?;
    let cfg = TrainConfig {
        mode: plan.mode,
        ..cfg.clone()
    };
    let mut train = Vec::with_capacity(plan.corpora.len());
    let mut eval = Vec::with_capacity(plan.corpora.len());
    for c in &plan.corpora {
        let (tr, ev) = split_corpus(c, plan.train_fraction, cfg.seed)?;
        let (mut tr, mut ev) = (Dataset::from_corpus(&tr, lfcc_cfg)?, Dataset::from_corpus(&ev, lfcc_cfg)?);
        tr.tag = c.tag.clone();
        ev.tag = c.tag.clone();
        train.push(tr);
        eval.push(ev);
    }

    let init = build_model(model_cfg, cfg.seed)?;
    let (som, base_outcome) = train_base(&init, &train[0], &cfg)?;
    let base_path = out.join("base.fadckpt");
    let base_bytes = save_checkpoint(&som, &base_path)?;
    let before = fingerprint(&base_bytes);
    let mut training = vec![(plan.corpora[0].tag.clone(), base_outcome)];

    let mut rows = vec![SOM_ROW.to_string()];
    let mut cells = vec![eval_row(out, SOM_ROW, &eval, |_| (som.clone(), None), jobs)?];

    match plan.mode {
        Mode::Lora => {
            let mut adapters: Vec<AdapterSet<f32>> = Vec::new();
            for k in 1..plan.corpora.len() {
                let (base, _) = load_checkpoint(&base_path, model_cfg)?;
                let (set, outcome) = train_adapter(&base, &train[k], &cfg)?;
                save_adapters(&set, &out.join("adapters").join(format!("{}.fadlora", set.tag)))?;
                training.push((set.tag.clone(), outcome));
                adapters.push(set);

                let (base, bytes) = load_checkpoint(&base_path, model_cfg)?;
                let now = fingerprint(&bytes);
                if now != before {
                    return Err(Error::BaseMutated { before, after: now });
                }
                let row = row_name(&plan.corpora[k].tag);
                let route = |j: usize| {
                    let set = if j >= 1 { adapters.get(j - 1).cloned() } else { None };
                    (base.clone(), set)
                };
                cells.push(eval_row(out, &row, &eval, route, jobs)?);
                rows.push(row);
            }
        }
        Mode::Finetune => {
            let mut current = som.clone();
            for k in 1..plan.corpora.len() {
                let (next, outcome) = finetune(&current, &train[k], &cfg)?;
                let row = row_name(&plan.corpora[k].tag);
                save_checkpoint(&next, &out.join("checkpoints").join(format!("{row}.fadckpt")))?;
                training.push((plan.corpora[k].tag.clone(), outcome));
                cells.push(eval_row(out, &row, &eval, |_| (next.clone(), None), jobs)?);
                rows.push(row);
                current = next;
            }
        }
    }

    let after = fingerprint(&crate::io::read_bytes(&base_path)?);
    let matrix = ReportMatrix {
        rows,
        cols: plan.corpora.iter().map(|c| c.tag.clone()).collect(),
        cells,
    };
    let mut header = String::new();
    let _ = writeln!(header, "mode: {}", plan.mode);
    if !plan.note.is_empty() {
        let _ = writeln!(header, "note: {}", plan.note);
    }
    let _ = writeln!(header, "base fingerprint: {before:016x} -> {after:016x}");
    let report_path = out.join("report.txt");
    atomic_write(&report_path, format!("{header}\n{}", matrix.to_table()).as_bytes())?;
    let mut kv = String::new();
    let _ = writeln!(kv, "mode={}", plan.mode);
    let _ = writeln!(kv, "note={}", plan.note);
    let _ = writeln!(kv, "rows={}", matrix.rows.join(","));
    let _ = writeln!(kv, "cols={}", matrix.cols.join(","));
    let _ = writeln!(kv, "base.fingerprint.before={before:016x}");
    let _ = writeln!(kv, "base.fingerprint.after={after:016x}");
    for (stage, o) in &training {
        let _ = writeln!(kv, "train.{stage}.initial_loss={:.6}", o.initial_loss);
        let _ = writeln!(kv, "train.{stage}.final_loss={:.6}", o.final_loss());
    }
    kv.push_str(&matrix.to_kv());
    let kv_path = out.join("report.kv");
    atomic_write(&kv_path, kv.as_bytes())?;

    Ok(SequenceOutcome {
        matrix,
        base_fingerprint_before: before,
        base_fingerprint_after: after,
        training,
        base_path,
        report_path,
        kv_path,
    })
}
