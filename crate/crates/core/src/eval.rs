//! Evaluation: expression accuracy, linear probes and `z_E`/`z_I` mutual
//! information.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mine::{estimate_mi_batch, marginal_pairing, MineConfig, MineError, MineTrainer, StatisticsNet};
use crate::model::{argmax, embeddings, loss_cross_entropy, predict, FerError, ModelBundle, Prepared};
use crate::synth::mix_seed;
use crate::tensor::init::linear_weight;
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] FerError),
    #[error(transparent)]
    Mine(#[from] MineError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n_sequences: usize,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub identity_probe_accuracy: Option<f64>,
    pub chance: Option<f64>,
    pub mi_ze_zi: Option<f64>,
    pub mi_saturated: Option<bool>,
    /// P frames per second through the expression branch.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fps: Option<f64>,
}

/// Square confusion matrix and the accuracy it implies.
pub fn confusion_matrix(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<(Vec<Vec<u64>>, f64)> {
    if truth.len() != predicted.len() || truth.is_empty() {
        return Err(EvalError::Invalid(format!(
            "{} labels vs {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= n_classes || p >= n_classes {
            return Err(EvalError::Invalid(format!("class {} out of range {n_classes}", t.max(p))));
        }
        m[t][p] += 1;
    }
    let trace: u64 = (0..n_classes).map(|k| m[k][k]).sum();
    Ok((m, trace as f64 / truth.len() as f64))
}

/// Expression accuracy, confusion matrix and throughput on `data`.
pub fn evaluate(bundle: &ModelBundle, data: &[Prepared], split: &str) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(EvalError::Invalid(format!("split `{split}` is empty")));
    }
    let (preds, seconds) = predict(bundle, data, 64)?;
    let truth: Vec<usize> = data.iter().map(|p| p.label).collect();
    let (confusion, accuracy) = confusion_matrix(&truth, &preds, bundle.dims.n_classes)?;
    let frames: usize = data.iter().map(|p| p.steps()).sum();
    Ok(EvalReport {
        split: split.to_string(),
        n_sequences: data.len(),
        accuracy,
        confusion,
        identity_probe_accuracy: None,
        chance: None,
        mi_ze_zi: None,
        mi_saturated: None,
        fps: Some(frames as f64 / seconds.max(1e-9)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// The k-th sequence of each identity is held out when `k % folds == folds - 1`.
    pub folds: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 1e-2,
            seed: 0,
            folds: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub chance: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Trains a full-batch linear softmax classifier on standardized rows of
/// `features` selected by `train` and returns its accuracy on `test`.
pub fn linear_probe(
    features: &Tensor,
    labels: &[usize],
    n_classes: usize,
    train: &[usize],
    test: &[usize],
    config: &ProbeConfig,
) -> Result<f64> {
    if features.ndim() != 2 || features.shape()[0] != labels.len() {
        return Err(EvalError::Invalid(format!(
            "features {:?} do not match {} labels",
            features.shape(),
            labels.len()
        )));
    }
    if train.is_empty() || test.is_empty() {
        return Err(EvalError::Invalid("probe needs non-empty train and test rows".into()));
    }
    let d = features.shape()[1];
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for &i in train {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v / train.len() as f64;
        }
    }
    for &i in train {
        for ((s, v), m) in var.iter_mut().zip(features.row(i)).zip(&mean) {
            *s += (v - m).powi(2) / train.len() as f64;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| v.sqrt().max(1e-8)).collect();
    let rows = |idx: &[usize]| -> Result<Tensor> {
        let data = idx
            .iter()
            .flat_map(|&i| features.row(i).iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s))
            .collect();
        Ok(Tensor::from_vec(vec![idx.len(), d], data)?)
    };
    let xtr = rows(train)?;
    let xte = rows(test)?;
    let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0x9b]));
    let mut head = ParamStore::new();
    let w = head.add("probe.w", linear_weight(&mut rng, d, n_classes));
    let b = head.add("probe.b", Tensor::zeros(&[n_classes]));
    let mut opt = Adam::new(&head, AdamConfig::default());
    for _ in 0..config.epochs {
        let mut g = Graph::new();
        let bound = head.bind(&mut g, true);
        let x = g.input(xtr.clone());
        let logits = g.linear(x, bound.var(w), bound.var(b))?;
        let p = g.softmax(logits)?;
        let loss = loss_cross_entropy(&mut g, p, &ytr)?;
        let grads = g.backward(loss)?;
        opt.step(&mut head, &grads.collect(&bound), config.lr)?;
    }
    let mut g = Graph::new();
    let bound = head.bind(&mut g, false);
    let x = g.input(xte);
    let logits = g.linear(x, bound.var(w), bound.var(b))?;
    let correct = test
        .iter()
        .enumerate()
        .filter(|(r, &i)| argmax(g.value(logits).row(*r)) == labels[i])
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Position of each row among the rows sharing its identity.
fn rank_within_identity(data: &[Prepared]) -> Vec<usize> {
    let mut seen: BTreeMap<u32, usize> = BTreeMap::new();
    data.iter()
        .map(|p| {
            let k = seen.entry(p.identity).or_default();
            *k += 1;
            *k - 1
        })
        .collect()
}

/// Identity recognition from frozen `z_E`: a linear probe trained on all
/// but every `folds`-th sequence of each identity.
pub fn probe_identity(bundle: &ModelBundle, data: &[Prepared], config: &ProbeConfig) -> Result<ProbeResult> {
    let (ze, _) = embeddings(bundle, data, 64)?;
    probe_identity_features(&ze, data, config)
}

/// [`probe_identity`] on arbitrary per-sequence features.
pub fn probe_identity_features(features: &Tensor, data: &[Prepared], config: &ProbeConfig) -> Result<ProbeResult> {
    let ids: BTreeMap<u32, usize> = data
        .iter()
        .map(|p| p.identity)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(k, id)| (id, k))
        .collect();
    if ids.len() < 2 {
        return Err(EvalError::Invalid(format!(
            "identity probe needs at least 2 identities, got {}",
            ids.len()
        )));
    }
    if config.folds < 2 {
        return Err(EvalError::Invalid("probe folds must be at least 2".into()));
    }
    let labels: Vec<usize> = data.iter().map(|p| ids[&p.identity]).collect();
    let rank = rank_within_identity(data);
    let (test, train): (Vec<usize>, Vec<usize>) =
        (0..data.len()).partition(|&i| rank[i] % config.folds == config.folds - 1);
    let accuracy = linear_probe(features, &labels, ids.len(), &train, &test, config)?;
    Ok(ProbeResult {
        accuracy,
        chance: 1.0 / ids.len() as f64,
        n_train: train.len(),
        n_test: test.len(),
    })
}

/// Expression recognition from frozen `z_I`, cross-validated over
/// `folds` folds; every sequence is predicted exactly once.
pub fn probe_expression_on_identity(bundle: &ModelBundle, data: &[Prepared], config: &ProbeConfig) -> Result<ProbeResult> {
    if config.folds < 2 {
        return Err(EvalError::Invalid("probe folds must be at least 2".into()));
    }
    let (_, zi) = embeddings(bundle, data, 64)?;
    let labels: Vec<usize> = data.iter().map(|p| p.label).collect();
    let rank = rank_within_identity(data);
    let mut correct = 0.0;
    for fold in 0..config.folds {
        let (test, train): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| rank[i] % config.folds == fold);
        if test.is_empty() {
            continue;
        }
        correct += linear_probe(&zi, &labels, bundle.dims.n_classes, &train, &test, config)? * test.len() as f64;
    }
    Ok(ProbeResult {
        accuracy: correct / data.len() as f64,
        chance: 1.0 / bundle.dims.n_classes as f64,
        n_train: data.len(),
        n_test: data.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiMeasureConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for MiMeasureConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 256,
            seed: 0,
        }
    }
}

/// Minimum number of paired rows for an MI measurement.
pub const MI_MIN_ROWS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MiMeasurement {
    /// Mean held-out estimate over the final 10% of steps.
    pub raw: f64,
    /// `raw` clipped to `[0, ln n_heldout]`.
    pub reported: f64,
    pub saturated: bool,
    pub n_train: usize,
    pub n_heldout: usize,
}

fn gather(t: &Tensor, rows: &[usize]) -> Tensor {
    let d = t.shape()[1];
    Tensor::from_vec(vec![rows.len(), d], rows.iter().flat_map(|&r| t.row(r).to_vec()).collect())
        .expect("row gather keeps shape")
}

/// DV estimate of `I(z_E; z_I)` from paired rows. A fresh statistics
/// network trains on a seeded half of the rows; the bound is read out on
/// the other half so that memorized pairs cannot inflate it.
pub fn measure_mi_features(ze: &Tensor, zi: &Tensor, config: &MiMeasureConfig) -> Result<MiMeasurement> {
    let n = ze.shape()[0];
    if n < MI_MIN_ROWS || zi.shape()[0] != n {
        return Err(EvalError::Invalid(format!(
            "MI measurement needs at least {MI_MIN_ROWS} paired rows, got {n} and {}",
            zi.shape()[0]
        )));
    }
    if config.steps == 0 {
        return Err(EvalError::Invalid("MI measurement needs at least one step".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0x31]));
    let order = sample(&mut rng, n, n).into_vec();
    let (train, held) = order.split_at(n / 2);
    let (ze_ho, zi_ho) = (gather(ze, held), gather(zi, held));
    let batch = config.batch.min(train.len());
    let (de, di) = (ze.shape()[1], zi.shape()[1]);

    let mine = MineConfig::default();
    let net = StatisticsNet::new(&mut rng, de, di, mine.hidden);
    let mut trainer = MineTrainer::new(net, mine.adam, mine.ema_rate);
    let tail = (config.steps / 10).max(1);
    let mut tail_sum = 0.0;
    for step in 0..config.steps {
        let rows: Vec<usize> = sample(&mut rng, train.len(), batch).into_iter().map(|k| train[k]).collect();
        trainer.train_step(&gather(ze, &rows), &gather(zi, &rows), &mut rng, mine.lr, true)?;
        if step >= config.steps - tail {
            let pi = marginal_pairing(held.len(), &mut rng)?;
            let est = estimate_mi_batch(&ze_ho, &zi_ho, &pi, &trainer.net)?;
            if !est.value.is_finite() {
                return Err(MineError::Diverged { step }.into());
            }
            tail_sum += est.value;
        }
    }
    let raw = tail_sum / tail as f64;
    let ceiling = (held.len() as f64).ln();
    Ok(MiMeasurement {
        raw,
        reported: raw.clamp(0.0, ceiling),
        saturated: raw >= ceiling,
        n_train: train.len(),
        n_heldout: held.len(),
    })
}

pub fn measure_mi(bundle: &ModelBundle, data: &[Prepared], config: &MiMeasureConfig) -> Result<MiMeasurement> {
    let (ze, zi) = embeddings(bundle, data, 64)?;
    measure_mi_features(&ze, &zi, config)
}
