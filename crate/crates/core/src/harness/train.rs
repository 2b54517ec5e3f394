use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::arena::{subsample, to_batch, Dataset, DatasetHeader, Episode};
use crate::autodiff::{adam_step, save_checkpoint, AdamState, Bindings, ModelParams, Tape, Var};
use crate::error::{Error, Result};
use crate::mac::{mac_loss, LossBreakdown, MacConfig, MacTerms};
use crate::model::{
    forward_model, init_params, predict, Batch, ModelConfig, ModelOutput, PathKind, PathVariant,
};

/// The differentiated training loss and its parts.
pub struct Objective {
    pub total: Var,
    pub cls: Var,
    pub mac: Option<MacTerms>,
    pub output: ModelOutput,
}

impl Objective {
    pub fn breakdown(&self, tape: &Tape, batch: usize) -> LossBreakdown {
        let mut b = match &self.mac {
            Some(m) => m.breakdown(tape, batch),
            None => LossBreakdown {
                batch,
                ..LossBreakdown::default()
            },
        };
        b.l_cls = tape.item(self.cls);
        b.total = tape.item(self.total);
        b
    }
}

/// Group cross-entropy on fused logits plus `action_weight` times the
/// individual cross-entropy, plus the contrastive loss for the dual model.
pub fn objective(
    tape: &mut Tape,
    batch: &Batch,
    model: &ModelConfig,
    mac: &MacConfig,
    action_weight: f64,
    b: &Bindings,
) -> Result<Objective> {
    let output = forward_model(tape, batch, model, b)?;
    let p = &output.predictions;
    let group = tape.cross_entropy(p.fused_group, &batch.group_labels)?;
    let individual = tape.cross_entropy(p.fused_individual, &batch.action_labels)?;
    let individual = tape.scale(individual, action_weight);
    let cls = tape.add(group, individual)?;
    let (total, mac) = if model.variant == PathVariant::Dual {
        let st = output.path(PathKind::ST).expect("dual model has an ST path");
        let ts = output.path(PathKind::TS).expect("dual model has a TS path");
        let terms = mac_loss(tape, st, ts, mac)?;
        (tape.add(cls, terms.total)?, Some(terms))
    } else {
        (cls, None)
    };
    Ok(Objective {
        total,
        cls,
        mac,
        output,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub group_accuracy: f64,
    pub individual_accuracy: f64,
    pub mpca: f64,
    pub per_class: Vec<f64>,
    /// Component means over the epoch's batches; `total` is
    /// `l_cls + l_mac` of those means.
    pub loss: LossBreakdown,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: usize,
        lr: f64,
        loss: LossBreakdown,
    },
    Epoch {
        lr: f64,
        #[serde(flatten)]
        metrics: MetricsRecord,
    },
}

/// Running confusion matrix and loss sums.
#[derive(Clone, Debug)]
pub struct Tally {
    pub confusion: Vec<Vec<u64>>,
    individual_correct: u64,
    individual_total: u64,
    loss_sum: LossBreakdown,
    batches: usize,
}

impl Tally {
    pub fn new(classes: usize) -> Self {
        Tally {
            confusion: vec![vec![0; classes]; classes],
            individual_correct: 0,
            individual_total: 0,
            loss_sum: LossBreakdown::default(),
            batches: 0,
        }
    }

    pub fn add_predictions(&mut self, truth: &[usize], pred: &[usize], ind_truth: &[usize], ind_pred: &[usize]) {
        for (&t, &p) in truth.iter().zip(pred) {
            self.confusion[t][p] += 1;
        }
        self.individual_correct += ind_truth.iter().zip(ind_pred).filter(|(a, b)| a == b).count() as u64;
        self.individual_total += ind_truth.len() as u64;
    }

    pub fn add_loss(&mut self, l: &LossBreakdown) {
        let s = &mut self.loss_sum;
        s.l_ff += l.l_ff;
        s.l_fv += l.l_fv;
        s.l_vv += l.l_vv;
        s.l_mac += l.l_mac;
        s.l_cls += l.l_cls;
        s.batch += l.batch;
        self.batches += 1;
    }

    /// Row-normalized diagonal; classes without episodes are left out of
    /// the mean.
    pub fn per_class(&self) -> Vec<f64> {
        self.confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: u64 = row.iter().sum();
                if n == 0 {
                    f64::NAN
                } else {
                    row[c] as f64 / n as f64
                }
            })
            .collect()
    }

    pub fn record(&self, epoch: usize, split: Split) -> MetricsRecord {
        let total: u64 = self.confusion.iter().flatten().sum();
        let correct: u64 = (0..self.confusion.len()).map(|c| self.confusion[c][c]).sum();
        let per_class = self.per_class();
        let seen: Vec<f64> = per_class.iter().copied().filter(|v| !v.is_nan()).collect();
        let n = self.batches.max(1) as f64;
        let s = &self.loss_sum;
        let mut loss = LossBreakdown {
            l_ff: s.l_ff / n,
            l_fv: s.l_fv / n,
            l_vv: s.l_vv / n,
            l_mac: s.l_mac / n,
            l_cls: s.l_cls / n,
            total: 0.0,
            batch: s.batch,
        };
        loss.total = loss.l_cls + loss.l_mac;
        MetricsRecord {
            epoch,
            split,
            group_accuracy: correct as f64 / total.max(1) as f64,
            individual_accuracy: self.individual_correct as f64 / self.individual_total.max(1) as f64,
            mpca: seen.iter().sum::<f64>() / seen.len().max(1) as f64,
            per_class: per_class.into_iter().map(|v| if v.is_nan() { 0.0 } else { v }).collect(),
            loss,
        }
    }
}

/// Fails unless the dataset dimensions are what the model expects.
pub fn check_dataset(model: &ModelConfig, h: &DatasetHeader) -> Result<()> {
    let pairs = [
        ("feature dim", model.raw_dim, h.feature_dim),
        ("scene dim", model.scene_dim, h.scene_dim),
        ("group classes", model.group_classes, h.group_classes),
        ("action classes", model.action_classes, h.action_classes),
    ];
    for (what, m, d) in pairs {
        if m != d as usize {
            return Err(Error::Config(format!("model expects {what} {m}, dataset has {d}")));
        }
    }
    Ok(())
}

/// Fails with the missing and extra tensor names (or a shape error) unless
/// `params` fits `model`.
pub fn check_compatible(model: &ModelConfig, params: &ModelParams) -> Result<()> {
    let expected = init_params(model, 0)?;
    let (missing, extra) = expected.name_diff(params);
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Incompatible { missing, extra });
    }
    for (name, t) in expected.iter() {
        let got = params.get(name).expect("names match");
        if got.shape() != t.shape() {
            return Err(Error::shape("checkpoint tensor", got.shape(), t.shape()));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub record: MetricsRecord,
    pub confusion: Vec<Vec<u64>>,
}

/// Fused-prediction metrics over a whole dataset, in file order.
pub fn evaluate(params: &ModelParams, cfg: &RunConfig, ds: &Dataset, epoch: usize) -> Result<EvalResult> {
    check_dataset(&cfg.model, &ds.header)?;
    check_compatible(&cfg.model, params)?;
    let mut tally = Tally::new(cfg.model.group_classes);
    let refs: Vec<&Episode> = ds.episodes.iter().collect();
    for chunk in refs.chunks(cfg.batch_size.max(1)) {
        let batch = to_batch(&ds.header, chunk)?;
        let mut tape = Tape::new();
        let b = params.bind_frozen(&mut tape);
        let obj = objective(&mut tape, &batch, &cfg.model, &cfg.mac, cfg.action_weight, &b)?;
        let (g, i) = predict(&tape, &obj.output.predictions);
        tally.add_predictions(&batch.group_labels, &g, &batch.action_labels, &i);
        tally.add_loss(&obj.breakdown(&tape, batch.batch));
    }
    Ok(EvalResult {
        record: tally.record(epoch, Split::Test),
        confusion: tally.confusion.clone(),
    })
}

/// Line-delimited JSON writer that also keeps the lines in memory.
struct MetricsLog {
    lines: Vec<String>,
    file: Option<BufWriter<File>>,
    path: Option<std::path::PathBuf>,
}

impl MetricsLog {
    fn open(out: Option<&Path>) -> Result<Self> {
        let (file, path) = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.jsonl");
                let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
                (Some(BufWriter::new(f)), Some(path))
            }
            None => (None, None),
        };
        Ok(MetricsLog {
            lines: Vec::new(),
            file,
            path,
        })
    }

    fn push(&mut self, rec: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("records serialize");
        if let (Some(f), Some(p)) = (self.file.as_mut(), self.path.as_ref()) {
            writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
        }
        self.lines.push(line);
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let (Some(f), Some(p)) = (self.file.as_mut(), self.path.as_ref()) {
            f.flush().map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Train-split record of every epoch.
    pub epochs: Vec<MetricsRecord>,
    /// Test-split evaluations, in epoch order; the last one follows the
    /// final epoch.
    pub evaluations: Vec<EvalResult>,
    /// The metrics log, one JSON object per line.
    pub log: Vec<String>,
}

impl TrainOutcome {
    pub fn final_eval(&self) -> Option<&EvalResult> {
        self.evaluations.last()
    }
}

fn abort_non_finite(params: &ModelParams, out: Option<&Path>, what: String) -> Error {
    let saved = out.map(|dir| {
        let p = dir.join("last_good.ckpt");
        save_checkpoint(params, &p).map(|_| p)
    });
    match saved {
        Some(Ok(p)) => Error::NonFinite(format!("{what}; last good parameters saved to {}", p.display())),
        Some(Err(e)) => e,
        None => Error::NonFinite(what),
    }
}

/// Trains from a fresh seeded initialization. With `out`, writes
/// `metrics.jsonl`, `model.ckpt` and `run.toml` there.
pub fn train(cfg: &RunConfig, train_ds: &Dataset, test_ds: Option<&Dataset>, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(&cfg.model, &train_ds.header)?;
    let mut params = init_params(&cfg.model, cfg.seed)?;
    train_from(cfg, &mut params, train_ds, test_ds, out)
}

/// Trains `params` in place.
pub fn train_from(
    cfg: &RunConfig,
    params: &mut ModelParams,
    train_ds: &Dataset,
    test_ds: Option<&Dataset>,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(&cfg.model, &train_ds.header)?;
    check_compatible(&cfg.model, params)?;
    let mut log = MetricsLog::open(out)?;
    if let Some(dir) = out {
        let p = dir.join("run.toml");
        fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))?;
    }
    let subset = subsample(&train_ds.group_labels(), cfg.data_ratio, cfg.seed)?;
    let mut adam = AdamState::new(cfg.schedule.lr(0));
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut evaluations = Vec::new();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr(epoch);
        adam.lr = lr;
        let mut order = subset.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut tally = Tally::new(cfg.model.group_classes);
        for chunk in order.chunks(cfg.batch_size) {
            let eps: Vec<&Episode> = chunk.iter().map(|&i| &train_ds.episodes[i]).collect();
            let batch = to_batch(&train_ds.header, &eps)?;
            let mut tape = Tape::new();
            let b = params.bind(&mut tape);
            let obj = match objective(&mut tape, &batch, &cfg.model, &cfg.mac, cfg.action_weight, &b) {
                Ok(o) => o,
                Err(e @ (Error::NonFinite(_) | Error::ZeroNorm(_))) => {
                    log.flush()?;
                    return Err(abort_non_finite(params, out, format!("{e} at epoch {epoch}, step {step}")));
                }
                Err(e) => return Err(e),
            };
            let loss = obj.breakdown(&tape, batch.batch);
            if !loss.total.is_finite() {
                log.flush()?;
                return Err(abort_non_finite(params, out, format!("loss {} at epoch {epoch}, step {step}", loss.total)));
            }
            let (g, i) = predict(&tape, &obj.output.predictions);
            tally.add_predictions(&batch.group_labels, &g, &batch.action_labels, &i);
            tally.add_loss(&loss);

            tape.backward(obj.total)?;
            params.zero_grads();
            params.accumulate_grads(&tape, &b);
            // adam_step validates every gradient before touching parameters
            if let Err(e) = adam_step(params, &mut adam) {
                log.flush()?;
                return Err(abort_non_finite(params, out, format!("{e} at epoch {epoch}, step {step}")));
            }
            if cfg.log_steps {
                log.push(&LogRecord::Step { epoch, step, lr, loss })?;
            }
            step += 1;
        }
        let metrics = tally.record(epoch, Split::Train);
        log.push(&LogRecord::Epoch { lr, metrics: metrics.clone() })?;
        epochs.push(metrics);

        let last = epoch + 1 == cfg.epochs;
        let due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        if let Some(test) = test_ds.filter(|_| last || due) {
            let ev = evaluate(params, cfg, test, epoch)?;
            log.push(&LogRecord::Epoch { lr, metrics: ev.record.clone() })?;
            evaluations.push(ev);
        }
        log.flush()?;
    }
    if let Some(dir) = out {
        save_checkpoint(params, &dir.join("model.ckpt"))?;
    }
    Ok(TrainOutcome {
        params: params.clone(),
        epochs,
        evaluations,
        log: log.lines,
    })
}
