//! Training loop, evaluation and the ablation grid.

mod optim;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Precision};
use crate::error::{CstsError, Result};
use crate::metrics::{aggregate, score_clip, EvalReport, DEFAULT_GAMMA};
use crate::model::{ContrastVariant, FusionStrategy, Model, ModelConfig, Sample};
use crate::tensor::Tensor;

pub use optim::{adamw_step, clip_global_norm, cosine_lr, AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub alpha: f64,
    pub temperature: f64,
    /// Overrides the model's fusion strategy when set.
    pub fusion: Option<FusionStrategy>,
    /// Overrides the model's contrastive variant when set.
    pub contrast: Option<ContrastVariant>,
    pub seed: u64,
    pub precision: Precision,
    /// Evaluate on the test split every this many epochs; 0 evaluates only
    /// after the last epoch.
    pub eval_every: usize,
    pub gamma: f64,
    /// Global gradient-norm cap; off when `None`.
    pub clip_grad: Option<f64>,
    /// Stops early after this many optimizer steps; the schedule still
    /// spans all epochs.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 0.05,
            betas: [0.9, 0.999],
            eps: 1e-8,
            alpha: 0.05,
            temperature: 0.05,
            fusion: None,
            contrast: None,
            seed: 0,
            precision: Precision::F64,
            eval_every: 0,
            gamma: DEFAULT_GAMMA,
            clip_grad: None,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { betas: self.betas, eps: self.eps, weight_decay: self.weight_decay }
    }

    /// The model configuration this run trains.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        if let Some(f) = self.fusion {
            cfg.fusion = f;
        }
        if let Some(c) = self.contrast {
            cfg.contrast = c;
        }
        cfg.contrastive.alpha = self.alpha;
        cfg.contrastive.temperature = self.temperature;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(CstsError::config("epochs and batch size must be positive"));
        }
        if !(self.lr > 0.0) || self.alpha < 0.0 || self.weight_decay < 0.0 {
            return Err(CstsError::config("lr must be positive; alpha and weight decay non-negative"));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub kld: f64,
    pub cntr: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub epoch: usize,
    pub report: EvalReport,
}

pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore,
    pub optimizer: AdamState,
    pub log: Vec<StepRecord>,
    pub evals: Vec<EpochEval>,
}

/// Heatmaps and scores for every sample, in input order.
pub fn evaluate(model: &Model, store: &ParamStore, samples: &[Sample], gamma: f64, precision: Precision) -> Result<EvalReport> {
    let kernel = model.cfg.target.kernel;
    let scores = samples
        .par_iter()
        .map(|s| {
            let pred = predict(model, store, s, precision)?;
            score_clip(&pred, &s.gaze, kernel, gamma)
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(&scores)
}

/// `[T_out, H, W]` heatmaps for one sample.
pub fn predict(model: &Model, store: &ParamStore, sample: &Sample, precision: Precision) -> Result<Tensor> {
    let mut g = Graph::with_params(store);
    g.set_precision(precision);
    let out = model.forward(&mut g, &sample.frames, &sample.spectrograms)?;
    Ok(g.value(out.heatmaps).clone())
}

/// Runs the full recipe. Every step appends a JSON line to `log` when given.
pub fn train(
    cfg: &TrainConfig,
    base: &ModelConfig,
    train_set: &[Sample],
    test_set: &[Sample],
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(CstsError::config("empty training split"));
    }
    let model_cfg = cfg.model_config(base);
    let (model, mut store) = Model::new(&model_cfg, cfg.seed)?;
    let mut state = AdamState::new(&store);
    let adam = cfg.adam();
    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_da7a);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::with_capacity(total);
    let mut evals = Vec::new();
    let mut step = 0;

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let lr = cosine_lr(cfg.lr, step, total);
            let (rec, mut grads) = {
                let mut g = Graph::with_params(&store);
                g.set_precision(cfg.precision);
                let diverged = |e: CstsError| match e {
                    CstsError::NonFinite { op } => {
                        CstsError::State(format!("non-finite value in `{op}` at step {step} (epoch {epoch}, lr {lr:e})"))
                    }
                    other => other,
                };
                let loss = model.batch_loss(&mut g, &batch).map_err(diverged)?;
                let rec = StepRecord {
                    step,
                    epoch,
                    lr,
                    kld: g.value(loss.kld).item(),
                    cntr: loss.cntr.map(|c| g.value(c).item()),
                    total: g.value(loss.total).item(),
                };
                let grads = g.backward(loss.total).map_err(diverged)?.params(&g);
                (rec, grads)
            };
            if !rec.total.is_finite() || grads.iter().any(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
                return Err(CstsError::State(format!("non-finite loss or gradient at step {step} (epoch {epoch})")));
            }
            if let Some(c) = cfg.clip_grad {
                clip_global_norm(&mut grads, c);
            }
            adamw_step(&mut store, &grads, &mut state, lr, &adam)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(|e| CstsError::io("metrics log", e))?;
            }
            records.push(rec);
            step += 1;
        }
        let last = epoch + 1 == cfg.epochs;
        if !test_set.is_empty() && (last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0)) {
            let report = evaluate(&model, &store, test_set, cfg.gamma, cfg.precision)?;
            evals.push(EpochEval { epoch, report });
        }
    }
    if cfg.max_steps.is_some() && !test_set.is_empty() && evals.is_empty() {
        let report = evaluate(&model, &store, test_set, cfg.gamma, cfg.precision)?;
        evals.push(EpochEval { epoch: records.last().map_or(0, |r| r.epoch), report });
    }
    Ok(TrainOutcome { model, store, optimizer: state, log: records, evals })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitReport {
    pub kld: Vec<f64>,
    /// `(row, col)` offset of the predicted argmax from the gaze pixel per
    /// future frame after training; `None` for frames without gaze.
    pub argmax_offset: Vec<Option<(i64, i64)>>,
}

impl OverfitReport {
    pub fn initial(&self) -> f64 {
        self.kld[0]
    }

    /// KLD of the trained model (one evaluation after the last step).
    pub fn last(&self) -> f64 {
        *self.kld.last().unwrap()
    }

    /// Largest per-axis argmax miss over frames with gaze.
    pub fn worst_axis_error(&self) -> Option<i64> {
        self.argmax_offset.iter().flatten().map(|(r, c)| r.abs().max(c.abs())).max()
    }

    pub fn worst_euclidean_error(&self) -> Option<f64> {
        self.argmax_offset.iter().flatten().map(|&(r, c)| ((r * r + c * c) as f64).sqrt()).reduce(f64::max)
    }
}

/// Fits a single sample with a constant learning rate and no weight decay.
pub fn overfit(base: &ModelConfig, sample: &Sample, steps: usize, lr: f64, seed: u64) -> Result<OverfitReport> {
    let (model, mut store) = Model::new(base, seed)?;
    let mut state = AdamState::new(&store);
    let adam = AdamConfig { weight_decay: 0.0, ..Default::default() };
    let mut kld = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let mut g = Graph::with_params(&store);
        let loss = model.batch_loss(&mut g, &[sample])?;
        kld.push(g.value(loss.kld).item());
        let grads = g.backward(loss.kld)?.params(&g);
        adamw_step(&mut store, &grads, &mut state, lr, &adam)?;
    }
    let pred = predict(&model, &store, sample, Precision::F64)?;
    {
        let mut g = Graph::with_params(&store);
        let loss = model.batch_loss(&mut g, &[sample])?;
        kld.push(g.value(loss.kld).item());
    }
    let [h, w] = base.image();
    let argmax_offset = sample
        .gaze
        .iter()
        .enumerate()
        .map(|(f, gz)| {
            gz.map(|(x, y)| {
                let frame = &pred.data()[f * h * w..(f + 1) * h * w];
                let best = (0..h * w).fold(0, |b, i| if frame[i] > frame[b] { i } else { b });
                let (r, c) = crate::heads::gaze_pixel(x, y, h, w);
                ((best / w) as i64 - r as i64, (best % w) as i64 - c as i64)
            })
        })
        .collect();
    Ok(OverfitReport { kld, argmax_offset })
}

/// One cell of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub experiment: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub experiment: String,
    pub seed: u64,
    pub f1: Option<f64>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub final_kld: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub train: TrainConfig,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        let mut s = String::from("experiment,seed,f1,recall,precision,final_kld,error\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.experiment,
                r.seed,
                opt(r.f1),
                opt(r.recall),
                opt(r.precision),
                opt(r.final_kld),
                r.error.as_deref().unwrap_or("").replace(',', ";")
            ));
        }
        s
    }

    /// Mean F1 per experiment over the seeds that finished, in first-seen order.
    pub fn mean_f1(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64, usize)> = Vec::new();
        for r in &self.rows {
            let Some(f) = r.f1 else { continue };
            match out.iter_mut().find(|(e, _, _)| *e == r.experiment) {
                Some(e) => {
                    e.1 += f;
                    e.2 += 1;
                }
                None => out.push((r.experiment.clone(), f, 1)),
            }
        }
        out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
    }
}

/// Trains and evaluates every cell. A failing cell is recorded and the grid
/// moves on.
pub fn ablate(
    cells: &[AblationCell],
    cfg: &TrainConfig,
    base: &ModelConfig,
    train_set: &[Sample],
    test_set: &[Sample],
    mut progress: impl FnMut(&AblationRow),
) -> AblationTable {
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let result = base.clone().with_experiment(&cell.experiment).and_then(|m| {
            let run = TrainConfig { seed: cell.seed, fusion: None, contrast: None, ..cfg.clone() };
            let out = train(&run, &m, train_set, test_set, None)?;
            let report = out.evals.last().map(|e| e.report.clone()).ok_or_else(|| CstsError::Eval("no test split".into()))?;
            Ok((report, out.log.last().map(|r| r.kld)))
        });
        let row = match result {
            Ok((r, kld)) => AblationRow {
                experiment: cell.experiment.clone(),
                seed: cell.seed,
                f1: Some(r.f1),
                recall: Some(r.recall),
                precision: Some(r.precision),
                final_kld: kld,
                error: None,
            },
            Err(e) => AblationRow {
                experiment: cell.experiment.clone(),
                seed: cell.seed,
                f1: None,
                recall: None,
                precision: None,
                final_kld: None,
                error: Some(e.to_string()),
            },
        };
        progress(&row);
        rows.push(row);
    }
    AblationTable { train: cfg.clone(), rows }
}
