//! Synthetic labeled data, non-IID client partitioners and CSV ingestion.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derived_rng;
use crate::tensor::Tensor;

const DIRICHLET_RETRIES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.shape().is_empty() || inputs.batch() != labels.len() {
            return Err(Error::LengthMismatch {
                expected: labels.len(),
                actual: inputs.shape().first().copied().unwrap_or(0),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(LabeledDataset { inputs, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            inputs: self.inputs.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Same samples viewed with a different per-sample shape, e.g. 16 features as (4, 2, 2).
    pub fn reshaped(&self, feature_shape: &[usize]) -> Result<LabeledDataset> {
        let mut shape = vec![self.len()];
        shape.extend_from_slice(feature_shape);
        Ok(LabeledDataset {
            inputs: self.inputs.clone().reshape(shape)?,
            labels: self.labels.clone(),
            classes: self.classes,
        })
    }

    pub fn histogram(&self) -> Vec<usize> {
        label_histogram(&self.labels, self.classes)
    }

    /// Stratified split: within every class, a seeded `test_fraction` of the
    /// samples goes to the second dataset. Index order is preserved in both.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::InvalidArgument(format!(
                "test fraction must lie in [0, 1), got {test_fraction}"
            )));
        }
        let mut is_test = vec![false; self.len()];
        for (c, mut idx) in by_class(&self.labels, self.classes).into_iter().enumerate() {
            idx.shuffle(&mut derived_rng(seed, &[c as u64]));
            let take = (idx.len() as f64 * test_fraction).round() as usize;
            for &i in &idx[..take] {
                is_test[i] = true;
            }
        }
        let train: Vec<usize> = (0..self.len()).filter(|&i| !is_test[i]).collect();
        let test: Vec<usize> = (0..self.len()).filter(|&i| is_test[i]).collect();
        Ok((self.subset(&train), self.subset(&test)))
    }
}

pub fn label_histogram(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for &l in labels {
        h[l] += 1;
    }
    h
}

fn by_class(labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        out[l].push(i);
    }
    out
}

/// Gaussian mixture with unit isotropic noise. When `dims >= classes` the means
/// are `separation * sqrt(2) * e_c`, so every pair of means is `2 * separation`
/// apart; otherwise they are random directions of norm `separation * sqrt(2)`.
/// Samples are ordered class by class.
pub fn gen_mixture(classes: usize, dims: usize, per_class: usize, separation: f64, seed: u64) -> Result<LabeledDataset> {
    if classes < 2 || dims == 0 || per_class == 0 || !(separation > 0.0) || !separation.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gen_mixture needs classes >= 2, dims >= 1, per_class >= 1, separation > 0; got {classes}, {dims}, {per_class}, {separation}"
        )));
    }
    let radius = separation * std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            if dims >= classes {
                let mut m = vec![0.0; dims];
                m[c] = radius;
                m
            } else {
                let mut rng = derived_rng(seed, &[0, c as u64]);
                let v: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| radius * x / norm).collect()
            }
        })
        .collect();

    let mut data = Vec::with_capacity(classes * per_class * dims);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        let mut rng = derived_rng(seed, &[1, c as u64]);
        for _ in 0..per_class {
            for &m in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(m + z);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(Tensor::new(vec![classes * per_class, dims], data)?, labels, classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub clients: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl ClientPartition {
    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    /// Checks disjointness, range and non-emptiness against a dataset of `n` samples.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (k, idx) in self.clients.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::InvalidArgument(format!("client {k} has no samples")));
            }
            for &i in idx {
                if i >= n {
                    return Err(Error::InvalidArgument(format!(
                        "client {k} references index {i} beyond dataset size {n}"
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::InvalidArgument(format!("index {i} assigned twice")));
                }
            }
        }
        Ok(())
    }

    pub fn client_histograms(&self, dataset: &LabeledDataset) -> Vec<Vec<usize>> {
        self.clients
            .iter()
            .map(|idx| {
                let mut h = vec![0; dataset.classes];
                for &i in idx {
                    h[dataset.labels[i]] += 1;
                }
                h
            })
            .collect()
    }

    /// Mean total-variation distance between each client's label distribution
    /// and the dataset's global one.
    pub fn mean_tv_distance(&self, dataset: &LabeledDataset) -> f64 {
        let global = dataset.histogram();
        let total = dataset.len() as f64;
        let hists = self.client_histograms(dataset);
        let sum: f64 = hists
            .iter()
            .map(|h| {
                let n: usize = h.iter().sum();
                0.5 * h
                    .iter()
                    .zip(&global)
                    .map(|(&a, &g)| (a as f64 / n as f64 - g as f64 / total).abs())
                    .sum::<f64>()
            })
            .sum();
        sum / hists.len() as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("partition serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

fn dirichlet(alpha: f64, k: usize, rng: &mut crate::rng::Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut v: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = v.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        v.iter_mut().for_each(|x| *x /= sum);
    } else {
        // every gamma draw underflowed (tiny alpha): all mass on one uniform pick
        v = vec![0.0; k];
        v[rng.random_range(0..k)] = 1.0;
    }
    v
}

/// Label-skewed split: for every class, the class's samples are divided among
/// clients in proportions drawn from Dirichlet(alpha * 1). Draws leaving some
/// client empty are discarded and redrawn.
pub fn partition_dirichlet(dataset: &LabeledDataset, n_clients: usize, alpha: f64, seed: u64) -> Result<ClientPartition> {
    if n_clients == 0 {
        return Err(Error::InvalidArgument("n_clients must be at least 1".into()));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    if dataset.len() < n_clients {
        return Err(Error::InvalidArgument(format!(
            "dataset of {} samples cannot fill {n_clients} clients",
            dataset.len()
        )));
    }
    let classes = by_class(&dataset.labels, dataset.classes);
    for attempt in 0..DIRICHLET_RETRIES {
        let mut clients = vec![Vec::new(); n_clients];
        for (c, members) in classes.iter().enumerate() {
            let mut rng = derived_rng(seed, &[attempt as u64, c as u64]);
            let mut idx = members.clone();
            idx.shuffle(&mut rng);
            let p = dirichlet(alpha, n_clients, &mut rng);
            // rounding the cumulative cuts favours fixed positions; a fresh
            // client order per class spreads that over clients
            let mut order: Vec<usize> = (0..n_clients).collect();
            order.shuffle(&mut rng);
            let n = idx.len();
            let mut start = 0;
            let mut cum = 0.0;
            for (i, &k) in order.iter().enumerate() {
                cum += p[k];
                let end = if i + 1 == n_clients { n } else { ((cum * n as f64).round() as usize).clamp(start, n) };
                clients[k].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
        if clients.iter().all(|c| !c.is_empty()) {
            for c in &mut clients {
                c.sort_unstable();
            }
            return Ok(ClientPartition {
                clients,
                alpha: Some(alpha),
            });
        }
    }
    Err(Error::InvalidArgument(format!(
        "no Dirichlet({alpha}) draw in {DIRICHLET_RETRIES} attempts left all {n_clients} clients non-empty"
    )))
}

/// Classical shard split: sort by label, cut into `n_clients * shards_per_client`
/// equal contiguous shards, deal them out at random.
pub fn partition_shards(dataset: &LabeledDataset, n_clients: usize, shards_per_client: usize, seed: u64) -> Result<ClientPartition> {
    let shards = n_clients * shards_per_client;
    if shards == 0 || dataset.len() % shards != 0 || dataset.len() < shards {
        return Err(Error::InvalidArgument(format!(
            "{} samples cannot be cut into {n_clients} x {shards_per_client} equal shards",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by_key(|&i| (dataset.labels[i], i));
    let size = dataset.len() / shards;
    let mut shard_ids: Vec<usize> = (0..shards).collect();
    shard_ids.shuffle(&mut derived_rng(seed, &[0]));
    let clients = shard_ids
        .chunks(shards_per_client)
        .map(|ids| {
            let mut idx: Vec<usize> = ids.iter().flat_map(|&s| order[s * size..(s + 1) * size].iter().copied()).collect();
            idx.sort_unstable();
            idx
        })
        .collect();
    Ok(ClientPartition { clients, alpha: None })
}

/// Reads `label,f0,f1,...` CSV. The class count is the largest label plus one;
/// labels missing below it become empty classes and are reported with a warning.
pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut records = reader.records();
    let header = match records.next() {
        None => return Err(parse_err(1, "missing header".into())),
        Some(r) => r.map_err(|e| parse_err(1, e.to_string()))?,
    };
    let names: Vec<&str> = header.iter().collect();
    let well_formed = names.len() >= 2
        && names[0] == "label"
        && names[1..].iter().enumerate().all(|(j, n)| *n == format!("f{j}"));
    if !well_formed {
        return Err(parse_err(1, "missing header: expected `label,f0,f1,...`".into()));
    }
    let width = names.len() - 1;

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != width + 1 {
            return Err(parse_err(line, format!("expected {} fields, found {}", width + 1, rec.len())));
        }
        let label: usize = rec[0]
            .parse()
            .map_err(|_| parse_err(line, format!("label `{}` is not a non-negative integer", &rec[0])))?;
        labels.push(label);
        for (j, cell) in rec.iter().skip(1).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(line, format!("column f{j}: `{cell}` is not numeric")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column f{j}: non-finite value")));
            }
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let hist = label_histogram(&labels, classes);
    let empty: Vec<usize> = (0..classes).filter(|&c| hist[c] == 0).collect();
    if !empty.is_empty() {
        log::warn!("{}: classes {empty:?} have no samples; class count inferred as {classes}", path.display());
    }
    LabeledDataset::new(Tensor::new(vec![labels.len(), width], data)?, labels, classes)
}
