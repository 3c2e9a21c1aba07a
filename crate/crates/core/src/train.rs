//! Mini-batch training with Adam, validation-loss early stopping and
//! exhaustive grid search.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::eval::consensus;
use crate::graph::{DatasetSplit, Endpoint, PairedSample};
use crate::model::{Model, ModelConfig, PreparedPair, Target, RATER_BIAS};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::ordinal::{self, RaterIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub endpoint: Endpoint,
    pub max_iterations: usize,
    /// Evaluations without validation improvement before stopping.
    pub patience: usize,
    pub eval_every: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Learn per-rater additive biases.
    pub rater_bias: bool,
    pub grid: GridAxes,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            endpoint: Endpoint::Fibrosis,
            max_iterations: 7000,
            patience: 10,
            eval_every: 100,
            batch_size: 16,
            lr: 1e-4,
            seed: 0,
            rater_bias: true,
            grid: GridAxes::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.patience == 0 || self.eval_every == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "max_iterations, patience, eval_every and batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// One row of the training trace, written at every validation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// Mean training loss over the iterations since the previous row.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    pub best_iteration: usize,
    pub best_val_loss: f64,
    pub iterations_run: usize,
    pub stopped_early: bool,
    /// Iteration at which a non-finite value aborted training.
    pub diverged_at: Option<usize>,
    pub numerics_warnings: usize,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,train_loss,val_loss\n");
        for r in &self.rows {
            let tl = r.train_loss.map(|v| format!("{v:.10}")).unwrap_or_default();
            out.push_str(&format!("{},{},{:.10}\n", r.iteration, tl, r.val_loss));
        }
        out
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub trace: TrainTrace,
}

/// Samples of one split with their targets for the endpoint.
struct SplitData<'a> {
    samples: Vec<&'a PairedSample>,
    /// Per sample: `(rater id, 0-based score)`.
    labels: Vec<Vec<(String, usize)>>,
}

fn select<'a>(by_id: &HashMap<String, &'a PairedSample>, ids: &[String], endpoint: Endpoint) -> Result<SplitData<'a>> {
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for id in ids {
        let s = by_id
            .get(id)
            .ok_or_else(|| Error::Validation(format!("split references unknown sample {id}")))?;
        let l: Vec<(String, usize)> = s
            .labels_for(endpoint)
            .map(|l| (l.rater_id.clone(), usize::from(l.score)))
            .collect();
        if l.is_empty() {
            log::warn!("sample {id} has no {endpoint} labels; skipped");
            continue;
        }
        samples.push(*s);
        labels.push(l);
    }
    Ok(SplitData { samples, labels })
}

/// Order in which training samples are visited in one epoch: samples are
/// shuffled within their consensus bin and bins are interleaved in
/// proportion to their size, so every contiguous batch is stratified.
pub fn stratified_order<R: Rng + ?Sized>(bins: &[usize], rng: &mut R) -> Vec<usize> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &b) in bins.iter().enumerate() {
        groups.entry(b).or_default().push(i);
    }
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(bins.len());
    for members in groups.values_mut() {
        members.shuffle(rng);
        let n = members.len() as f64;
        let offset: f64 = rng.random();
        keyed.extend(members.iter().enumerate().map(|(rank, &i)| ((rank as f64 + offset) / n, i)));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Mean NLL over every `(sample, rater label)` pair on the inference path.
pub fn evaluation_loss(model: &Model, prepared: &[&PreparedPair], labels: &[Vec<(String, usize)>]) -> Result<f64> {
    let scores = model.latent_scores(prepared)?;
    let alpha = model.alpha()?;
    let (mut total, mut n) = (0.0, 0usize);
    for (s, ls) in scores.iter().zip(labels) {
        for (_, y) in ls {
            total += ordinal::cl_loss(*s, &alpha, *y)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Contract("evaluation loss over zero labels".into()));
    }
    Ok(total / n as f64)
}

/// Trains one model on the train split, early-stopping on the validation
/// split. Test-split samples are never read.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    samples: &[PairedSample],
    split: &DatasetSplit,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    let by_id: HashMap<String, &PairedSample> = samples.iter().map(|s| (s.id(), s)).collect();
    split.validate(|id| by_id.get(id).map(|s| s.key.patient_id.clone()))?;
    let endpoint = cfg.endpoint;
    let tr = select(&by_id, &split.train, endpoint)?;
    let va = select(&by_id, &split.val, endpoint)?;
    if tr.samples.is_empty() || va.samples.is_empty() {
        return Err(Error::Validation(format!("train and validation splits need {endpoint} labels")));
    }

    let raters = RaterIndex::new(tr.labels.iter().flatten().map(|(r, _)| r.clone()));
    let first = &tr.samples[0];
    let mut model = Model::new(
        model_cfg.clone(),
        endpoint,
        first.graph_a.feature_dim(),
        first.graph_b.feature_dim(),
        raters.clone(),
        cfg.seed,
    )?;
    model.fit_normalizers(&tr.samples)?;
    let mut counts = vec![0usize; endpoint.num_classes()];
    for ls in &tr.labels {
        for &(_, y) in ls {
            counts[y] += 1;
        }
    }
    model.init_thresholds(&counts)?;

    let prep_tr: Vec<PreparedPair> = tr.samples.iter().map(|s| model.prepare(s)).collect::<Result<_>>()?;
    let prep_va: Vec<PreparedPair> = va.samples.iter().map(|s| model.prepare(s)).collect::<Result<_>>()?;
    let prep_va_refs: Vec<&PreparedPair> = prep_va.iter().collect();
    let targets: Vec<Vec<(usize, usize)>> = tr
        .labels
        .iter()
        .map(|ls| ls.iter().map(|(r, y)| Ok((raters.index(r)?, *y))).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let bins: Vec<usize> = tr
        .labels
        .iter()
        .map(|ls| usize::from(consensus(&ls.iter().map(|&(_, y)| y as u8).collect::<Vec<_>>())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0001);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::default();
    let batch = cfg.batch_size.min(prep_tr.len());

    let mut trace = TrainTrace::default();
    let initial = evaluation_loss(&model, &prep_va_refs, &va.labels)?;
    trace.rows.push(TraceRow {
        iteration: 0,
        train_loss: None,
        val_loss: initial,
    });
    trace.best_val_loss = initial;
    let mut best = (model.params.clone(), model.buffers.clone());
    let mut since_best = 0;
    let (mut window_sum, mut window_n) = (0.0, 0usize);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    for it in 1..=cfg.max_iterations {
        if cursor + batch > order.len() {
            order = stratified_order(&bins, &mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let batch_pairs: Vec<&PreparedPair> = idx.iter().map(|&i| &prep_tr[i]).collect();
        let batch_targets: Vec<Target> = idx
            .iter()
            .enumerate()
            .flat_map(|(row, &i)| targets[i].iter().map(move |&(rater, label)| Target { row, rater, label }))
            .collect();

        let step = (|| -> Result<f64> {
            let mut tape = Tape::new();
            let out = model.loss_tape(&mut tape, &batch_pairs, &batch_targets, Some(&mut rng), cfg.rater_bias)?;
            let loss = tape.value(out.loss).item();
            if !loss.is_finite() {
                return Err(Error::Diverged { iteration: it });
            }
            let mut grads = tape.backward(out.loss)?;
            let mut g = out.bound.gradients(&mut grads);
            if !cfg.rater_bias {
                g.remove(RATER_BIAS);
            }
            if g.values().any(|t| !t.is_finite()) {
                return Err(Error::Diverged { iteration: it });
            }
            adam_step(&mut model.params, &g, &mut state, &adam)?;
            model.update_running_stats(&out.observed, batch)?;
            if let Some(b) = model.params.get_mut(RATER_BIAS) {
                ordinal::center_biases(b.data_mut());
            }
            trace.numerics_warnings += tape.numerics_warnings();
            Ok(loss)
        })();
        trace.iterations_run = it;
        let loss = match step {
            Ok(l) => l,
            Err(Error::Diverged { .. }) | Err(Error::Tensor(crate::tensor::TensorError::NonFinite { .. })) => {
                log::warn!("training diverged at iteration {it}; keeping best snapshot");
                trace.diverged_at = Some(it);
                break;
            }
            Err(e) => return Err(e),
        };
        window_sum += loss;
        window_n += 1;

        if it % cfg.eval_every == 0 || it == cfg.max_iterations {
            let val = match evaluation_loss(&model, &prep_va_refs, &va.labels) {
                Ok(v) if v.is_finite() => v,
                Ok(_) | Err(Error::Tensor(crate::tensor::TensorError::NonFinite { .. })) => {
                    trace.diverged_at = Some(it);
                    break;
                }
                Err(e) => return Err(e),
            };
            trace.rows.push(TraceRow {
                iteration: it,
                train_loss: Some(window_sum / window_n as f64),
                val_loss: val,
            });
            log::debug!("iteration {it}: train {:.5} val {val:.5}", window_sum / window_n as f64);
            window_sum = 0.0;
            window_n = 0;
            if val < trace.best_val_loss {
                trace.best_val_loss = val;
                trace.best_iteration = it;
                best = (model.params.clone(), model.buffers.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    trace.stopped_early = true;
                    break;
                }
            }
        }
    }
    model.params = best.0;
    model.buffers = best.1;
    Ok(TrainOutcome { model, trace })
}

/// Value lists for a grid search. An empty axis keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridAxes {
    pub conv_layers: Vec<usize>,
    pub hidden: Vec<usize>,
    pub head_layers: Vec<usize>,
    pub head_dropout: Vec<f64>,
    pub lr: Vec<f64>,
}

impl GridAxes {
    pub fn is_empty(&self) -> bool {
        self.conv_layers.is_empty()
            && self.hidden.is_empty()
            && self.head_layers.is_empty()
            && self.head_dropout.is_empty()
            && self.lr.is_empty()
    }

    /// Every combination, first axis outermost.
    pub fn expand(&self, base_model: &ModelConfig, base_train: &TrainConfig) -> Vec<(ModelConfig, TrainConfig)> {
        fn axis<T: Clone>(v: &[T], base: T) -> Vec<T> {
            if v.is_empty() {
                vec![base]
            } else {
                v.to_vec()
            }
        }
        let base_head = base_model.head_spec();
        let mut out = Vec::new();
        for &layers in &axis(&self.conv_layers, base_model.conv_layers) {
            for &hidden in &axis(&self.hidden, base_model.hidden) {
                for &head_layers in &axis(&self.head_layers, base_head.layers) {
                    for &dropout in &axis(&self.head_dropout, base_head.dropout) {
                        for &lr in &axis(&self.lr, base_train.lr) {
                            let m = ModelConfig {
                                conv_layers: layers,
                                hidden,
                                head_layers: Some(head_layers),
                                head_dropout: Some(dropout),
                                ..base_model.clone()
                            };
                            let t = TrainConfig {
                                lr,
                                grid: GridAxes::default(),
                                ..base_train.clone()
                            };
                            out.push((m, t));
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub model: ModelConfig,
    pub lr: f64,
    pub best_val_loss: f64,
    pub best_iteration: usize,
    pub diverged: bool,
}

pub struct GridOutcome {
    /// One entry per combination, in grid order.
    pub leaderboard: Vec<Trial>,
    pub best: usize,
    pub outcome: TrainOutcome,
}

/// Trains every combination in parallel; the lowest validation loss wins,
/// ties going to the earlier combination.
pub fn grid_search(
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    samples: &[PairedSample],
    split: &DatasetSplit,
) -> Result<GridOutcome> {
    let combos = base_train.grid.expand(base_model, base_train);
    let results: Vec<Result<TrainOutcome>> = combos
        .par_iter()
        .map(|(m, t)| train(m, t, samples, split))
        .collect();
    let mut outcomes = Vec::with_capacity(results.len());
    for r in results {
        outcomes.push(r?);
    }
    let leaderboard: Vec<Trial> = combos
        .iter()
        .zip(&outcomes)
        .enumerate()
        .map(|(index, ((m, t), o))| Trial {
            index,
            model: m.clone(),
            lr: t.lr,
            best_val_loss: o.trace.best_val_loss,
            best_iteration: o.trace.best_iteration,
            diverged: o.trace.diverged_at.is_some(),
        })
        .collect();
    let mut best = 0;
    for (i, t) in leaderboard.iter().enumerate() {
        if t.best_val_loss < leaderboard[best].best_val_loss {
            best = i;
        }
    }
    let outcome = outcomes.swap_remove(best);
    Ok(GridOutcome {
        leaderboard,
        best,
        outcome,
    })
}
