//! Round-based federated learning: client selection, local SGD, sample-weighted
//! averaging, optional activation-entropy regularization, and a byte ledger.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{ClientPartition, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{capture_batched, fit, predict_batched, LayerKind, LossSpec, Model, ModelSpec, SgdConfig, TrainConfig, TrainData};
use crate::rng::{derive_seed, derived_rng};

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    pub rounds: usize,
    pub clients: usize,
    #[serde(default = "one")]
    pub fraction: f64,
    #[serde(default = "one_usize")]
    pub local_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate in round `r` (0-based) is `lr * lr_decay^r`.
    #[serde(default = "one")]
    pub lr_decay: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_loss")]
    pub loss: LossSpec,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Layer whose per-class mean activations feed the divergence metric.
    /// Defaults to the fedmax layer, else the input of the last dense layer.
    #[serde(default)]
    pub divergence_layer: Option<String>,
    #[serde(default = "default_bytes_per_param")]
    pub bytes_per_param: u64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn default_batch() -> usize {
    32
}
fn default_loss() -> LossSpec {
    LossSpec::CrossEntropy
}
fn default_eval_every() -> usize {
    10
}
fn default_bytes_per_param() -> u64 {
    8
}

impl FedConfig {
    pub fn new(rounds: usize, clients: usize, fraction: f64, lr: f64, seed: u64) -> Self {
        FedConfig {
            rounds,
            clients,
            fraction,
            local_epochs: 1,
            batch_size: default_batch(),
            lr,
            lr_decay: 1.0,
            momentum: 0.0,
            weight_decay: 0.0,
            loss: LossSpec::CrossEntropy,
            eval_every: default_eval_every(),
            divergence_layer: None,
            bytes_per_param: default_bytes_per_param(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.clients == 0 {
            return bad("clients must be at least 1".into());
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return bad(format!("participation fraction must lie in (0, 1], got {}", self.fraction));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return bad(format!("lr_decay must be positive, got {}", self.lr_decay));
        }
        match &self.loss {
            LossSpec::CrossEntropy | LossSpec::Fedmax { .. } => {}
            other => return bad(format!("federated loss must be cross_entropy or fedmax, got {other:?}")),
        }
        self.loss.validate()?;
        self.sgd(0).validate()
    }

    pub fn selected_per_round(&self) -> usize {
        selection_size(self.clients, self.fraction)
    }

    pub fn sgd(&self, round: usize) -> SgdConfig {
        SgdConfig {
            lr: self.lr * self.lr_decay.powi(round as i32),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Closed-form ledger total: `2 * ceil(f K) * R * P * bytes_per_param`.
    pub fn expected_total_bytes(&self, param_count: usize) -> u64 {
        2 * self.selected_per_round() as u64 * self.rounds as u64 * param_count as u64 * self.bytes_per_param
    }
}

fn selection_size(k: usize, f: f64) -> usize {
    // guard against 0.3 * 10 = 3.0000000000000004 rounding up to 4
    let raw = f * k as f64;
    let nearest = raw.round();
    let m = if (raw - nearest).abs() < 1e-9 { nearest } else { raw.ceil() };
    (m as usize).clamp(1, k)
}

/// `ceil(f K)` distinct client ids drawn uniformly without replacement from
/// the stream `(seed, round)`, returned in ascending order.
pub fn select_clients(round: usize, k: usize, f: f64, seed: u64) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let m = selection_size(k, f);
    if m == k {
        return (0..k).collect();
    }
    let mut rng = derived_rng(seed, &[0x5e1e_c7, round as u64]);
    let mut ids = index::sample(&mut rng, k, m).into_vec();
    ids.sort_unstable();
    ids
}

/// Result of one client's local training.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub params: Vec<f64>,
    pub samples: usize,
    /// Mean loss of the final local epoch; `None` when no epoch ran.
    pub loss: Option<f64>,
}

/// `epochs` passes of minibatch SGD on `shard` starting from `global`, with a
/// fresh optimizer state.
pub fn local_train(
    global: &Model,
    shard: &LabeledDataset,
    epochs: usize,
    batch_size: usize,
    loss: &LossSpec,
    sgd: &SgdConfig,
    seed: u64,
) -> Result<LocalUpdate> {
    if shard.is_empty() {
        return Err(Error::InvalidArgument("client shard is empty".into()));
    }
    let mut model = global.clone();
    let cfg = TrainConfig {
        epochs,
        batch_size,
        sgd: *sgd,
    };
    let history = fit(&mut model, &TrainData::labeled(&shard.inputs, &shard.labels), loss, &cfg, seed)?;
    Ok(LocalUpdate {
        params: model.into_params(),
        samples: shard.len(),
        loss: history.last().copied(),
    })
}

/// Sample-count weighted mean `sum_k (n_k / sum n) w_k`. A single update is
/// returned unchanged.
pub fn aggregate_fedavg(updates: &[(&[f64], usize)]) -> Result<Vec<f64>> {
    let (first, _) = updates
        .first()
        .ok_or_else(|| Error::InvalidArgument("no updates to aggregate".into()))?;
    if updates.len() == 1 {
        return Ok(first.to_vec());
    }
    let len = first.len();
    for (w, _) in updates {
        if w.len() != len {
            return Err(Error::LengthMismatch {
                expected: len,
                actual: w.len(),
            });
        }
    }
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("updates carry zero samples".into()));
    }
    let mut out = vec![0.0; len];
    for (w, n) in updates {
        let share = *n as f64 / total as f64;
        for (o, v) in out.iter_mut().zip(w.iter()) {
            *o += share * v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub loss: f64,
}

/// Per-class F1 from predictions. A class that is neither predicted nor
/// present scores 0.
pub fn macro_f1(predicted: &[usize], labels: &[usize], classes: usize) -> f64 {
    if classes == 0 {
        return 0.0;
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fnn = vec![0usize; classes];
    for (&p, &l) in predicted.iter().zip(labels) {
        if p == l {
            tp[l] += 1;
        } else {
            fp[p] += 1;
            fnn[l] += 1;
        }
    }
    let sum: f64 = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fnn[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    sum / classes as f64
}

/// Accuracy, macro-F1 and mean cross-entropy on a labeled set.
pub fn evaluate(model: &Model, test: &LabeledDataset) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let logits = predict_batched(model, &test.inputs, EVAL_CHUNK)?;
    let pred = logits.argmax_rows();
    let correct = pred.iter().zip(&test.labels).filter(|(p, l)| p == l).count();
    let mut loss = 0.0;
    for (row, &l) in logits.rows().zip(&test.labels) {
        if l >= row.len() {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: row.len(),
            });
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[l];
    }
    Ok(Evaluation {
        accuracy: correct as f64 / test.len() as f64,
        macro_f1: macro_f1(&pred, &test.labels, test.classes.max(logits.item_len())),
        loss: loss / test.len() as f64,
    })
}

/// Id of the layer feeding the last dense layer, the natural feature layer.
pub fn default_feature_layer(spec: &ModelSpec) -> Option<String> {
    let last_dense = spec.layers.iter().rposition(|l| matches!(l.kind, LayerKind::Dense { .. }))?;
    if last_dense == 0 {
        None
    } else {
        Some(spec.layers[last_dense - 1].id.clone())
    }
}

/// Mean over classes of the mean pairwise L2 distance between the clients'
/// per-class mean activations of `layer` on `probe`. Classes absent from the
/// probe set are skipped.
pub fn activation_divergence(models: &[&Model], probe: &LabeledDataset, layer: &str) -> Result<f64> {
    if models.len() < 2 {
        return Ok(0.0);
    }
    let counts = probe.histogram();
    let present: Vec<usize> = (0..probe.classes).filter(|&c| counts[c] > 0).collect();
    let means: Vec<Vec<Vec<f64>>> = models
        .iter()
        .map(|m| {
            let acts = capture_batched(m, &probe.inputs, layer, EVAL_CHUNK)?;
            let width = acts.item_len();
            let mut sums = vec![vec![0.0; width]; probe.classes];
            for (row, &l) in acts.rows().zip(&probe.labels) {
                for (s, v) in sums[l].iter_mut().zip(row) {
                    *s += v;
                }
            }
            for (c, s) in sums.iter_mut().enumerate() {
                if counts[c] > 0 {
                    s.iter_mut().for_each(|v| *v /= counts[c] as f64);
                }
            }
            Ok(sums)
        })
        .collect::<Result<_>>()?;
    if present.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &c in &present {
        let mut acc = 0.0;
        let mut pairs = 0usize;
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let d: f64 = means[i][c].iter().zip(&means[j][c]).map(|(a, b)| (a - b) * (a - b)).sum();
                acc += d.sqrt();
                pairs += 1;
            }
        }
        total += acc / pairs as f64;
    }
    Ok(total / present.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub test_loss: f64,
    pub divergence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based round number.
    pub round: usize,
    pub selected: Vec<usize>,
    pub lr: f64,
    /// Sample-weighted mean of the selected clients' final-epoch losses.
    pub train_loss: Option<f64>,
    pub bytes: u64,
    pub cumulative_bytes: u64,
    pub eval: Option<EvalRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedRunReport {
    pub rounds: Vec<RoundRecord>,
    pub param_count: usize,
    pub bytes_per_param: u64,
    pub total_bytes: u64,
    #[serde(skip)]
    pub final_model: Option<Model>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedSummary {
    pub rounds: usize,
    pub param_count: usize,
    pub total_bytes: u64,
    pub final_accuracy: Option<f64>,
    pub final_macro_f1: Option<f64>,
    pub final_test_loss: Option<f64>,
    pub final_divergence: Option<f64>,
}

impl FedRunReport {
    pub fn evaluations(&self) -> impl Iterator<Item = (usize, &EvalRecord)> {
        self.rounds.iter().filter_map(|r| r.eval.as_ref().map(|e| (r.round, e)))
    }

    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.rounds.last().and_then(|r| r.eval.as_ref())
    }

    /// First evaluated round whose accuracy is at least `target`.
    pub fn rounds_to_accuracy(&self, target: f64) -> Option<usize> {
        self.evaluations().find(|(_, e)| e.accuracy >= target).map(|(r, _)| r)
    }

    pub fn summary(&self) -> FedSummary {
        let last = self.final_eval();
        FedSummary {
            rounds: self.rounds.len(),
            param_count: self.param_count,
            total_bytes: self.total_bytes,
            final_accuracy: last.map(|e| e.accuracy),
            final_macro_f1: last.map(|e| e.macro_f1),
            final_test_loss: last.map(|e| e.test_loss),
            final_divergence: last.map(|e| e.divergence),
        }
    }

    /// One JSON object per round, newline terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rounds {
            out.push_str(&serde_json::to_string(r).expect("round record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,selected,lr,train_loss,bytes,cumulative_bytes,accuracy,macro_f1,test_loss,divergence\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rounds {
            let e = r.eval.as_ref();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.round,
                r.selected.len(),
                r.lr,
                opt(r.train_loss),
                r.bytes,
                r.cumulative_bytes,
                opt(e.map(|e| e.accuracy)),
                opt(e.map(|e| e.macro_f1)),
                opt(e.map(|e| e.test_loss)),
                opt(e.map(|e| e.divergence)),
            ));
        }
        out
    }
}

fn divergence_layer(config: &FedConfig, spec: &ModelSpec) -> Result<String> {
    let layer = config
        .divergence_layer
        .clone()
        .or_else(|| config.loss.capture_layer().map(str::to_string))
        .or_else(|| default_feature_layer(spec))
        .ok_or_else(|| Error::InvalidArgument("model has no feature layer for the divergence metric".into()))?;
    if spec.layer_index(&layer).is_none() {
        return Err(Error::InvalidArgument(format!("unknown divergence layer `{layer}`")));
    }
    Ok(layer)
}

/// Select, train locally in parallel, aggregate; `config.rounds` times.
/// Rounds `eval_every, 2 eval_every, ...` and the last round are evaluated
/// on `test`.
pub fn run_federated(
    config: &FedConfig,
    init: &Model,
    partition: &ClientPartition,
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<FedRunReport> {
    config.validate()?;
    if partition.n_clients() != config.clients {
        return Err(Error::InvalidArgument(format!(
            "partition has {} clients, config expects {}",
            partition.n_clients(),
            config.clients
        )));
    }
    partition.validate(train.len())?;
    let layer = divergence_layer(config, init.spec())?;
    let shards: Vec<LabeledDataset> = partition.clients.iter().map(|idx| train.subset(idx)).collect();

    let p = init.param_count();
    let mut global = init.clone();
    let mut records = Vec::with_capacity(config.rounds);
    let mut cumulative = 0u64;
    for round in 0..config.rounds {
        let selected = select_clients(round, config.clients, config.fraction, config.seed);
        let sgd = config.sgd(round);
        let updates: Vec<LocalUpdate> = selected
            .par_iter()
            .map(|&k| {
                let seed = derive_seed(config.seed, &[round as u64, k as u64]);
                local_train(&global, &shards[k], config.local_epochs, config.batch_size, &config.loss, &sgd, seed).map_err(
                    |e| Error::Client {
                        client: k,
                        source: Box::new(e),
                    },
                )
            })
            .collect::<Result<_>>()?;

        let pairs: Vec<(&[f64], usize)> = updates.iter().map(|u| (u.params.as_slice(), u.samples)).collect();
        let new_params = aggregate_fedavg(&pairs)?;
        if new_params.iter().any(|v| !v.is_finite()) {
            return Err(Error::RoundDiverged { round: round + 1 });
        }
        global.set_params(new_params)?;

        let samples: usize = updates.iter().map(|u| u.samples).sum();
        let train_loss = if updates.iter().all(|u| u.loss.is_some()) {
            Some(updates.iter().map(|u| u.loss.unwrap_or(0.0) * u.samples as f64).sum::<f64>() / samples as f64)
        } else {
            None
        };
        let bytes = 2 * selected.len() as u64 * p as u64 * config.bytes_per_param;
        cumulative += bytes;

        let is_eval = (round + 1) % config.eval_every == 0 || round + 1 == config.rounds;
        let eval = if is_eval {
            let ev = evaluate(&global, test)?;
            let locals: Vec<Model> = updates
                .iter()
                .map(|u| Model::from_params(init.spec(), u.params.clone(), init.seed()))
                .collect::<Result<_>>()?;
            let refs: Vec<&Model> = locals.iter().collect();
            let divergence = activation_divergence(&refs, test, &layer)?;
            Some(EvalRecord {
                accuracy: ev.accuracy,
                macro_f1: ev.macro_f1,
                test_loss: ev.loss,
                divergence,
            })
        } else {
            None
        };
        if let Some(e) = &eval {
            log::info!(
                "round {}: accuracy {:.4} macro-F1 {:.4} divergence {:.4}",
                round + 1,
                e.accuracy,
                e.macro_f1,
                e.divergence
            );
        }
        records.push(RoundRecord {
            round: round + 1,
            selected,
            lr: sgd.lr,
            train_loss,
            bytes,
            cumulative_bytes: cumulative,
            eval,
        });
    }
    Ok(FedRunReport {
        rounds: records,
        param_count: p,
        bytes_per_param: config.bytes_per_param,
        total_bytes: cumulative,
        final_model: Some(global),
    })
}

/// Centralized reference with the federated schedule: `rounds` blocks of
/// `local_epochs` epochs over all of `train`, restarting the optimizer and
/// reseeding the shuffle each block exactly as a lone client would.
pub fn train_centralized(config: &FedConfig, init: &Model, train: &LabeledDataset) -> Result<Model> {
    let mut model = init.clone();
    for round in 0..config.rounds {
        let seed = derive_seed(config.seed, &[round as u64, 0]);
        let update = local_train(&model, train, config.local_epochs, config.batch_size, &config.loss, &config.sgd(round), seed)?;
        model.set_params(update.params)?;
    }
    Ok(model)
}
