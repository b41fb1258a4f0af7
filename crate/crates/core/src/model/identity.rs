use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{argmax, i_frames, loss_cross_entropy, FerError, IdentityDims, IdentityEncoder, Prepared, Result};
use crate::synth::mix_seed;
use crate::tensor::init::linear_weight;
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub dims: IdentityDims,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Every `holdout_every`-th sequence of each identity is held out.
    pub holdout_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            dims: IdentityDims::default(),
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            holdout_every: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub n_identities: usize,
    pub train_frames: usize,
    pub heldout_frames: usize,
    pub heldout_accuracy: f64,
}

/// Below this held-out accuracy the dataset or configuration is broken.
const FIXTURE_FLOOR: f64 = 0.6;

/// Trains the identity trunk plus a softmax head to classify identities
/// from I frames, then discards the head.
pub fn identity_pretrain(data: &[Prepared], config: &PretrainConfig) -> Result<(IdentityEncoder, PretrainReport)> {
    let mut by_id: BTreeMap<u32, Vec<&Prepared>> = BTreeMap::new();
    for p in data {
        by_id.entry(p.identity).or_default().push(p);
    }
    if by_id.len() < 2 {
        return Err(FerError::Config(format!(
            "identity pretraining needs at least 2 identities, got {}",
            by_id.len()
        )));
    }
    if config.batch_size < 2 || config.holdout_every < 2 {
        return Err(FerError::Config("batch_size and holdout_every must be at least 2".into()));
    }
    let class_of: BTreeMap<u32, usize> = by_id.keys().enumerate().map(|(i, &id)| (id, i)).collect();
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for seqs in by_id.values() {
        for (k, p) in seqs.iter().enumerate() {
            if k % config.holdout_every == config.holdout_every - 1 {
                held.push(*p);
            } else {
                train.push(*p);
            }
        }
    }
    if held.is_empty() {
        return Err(FerError::Config(format!(
            "no held-out I frames: every identity has fewer than {} sequences",
            config.holdout_every
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0x1d]));
    let mut encoder = IdentityEncoder::new(&mut rng, config.dims);
    let mut head = ParamStore::new();
    let hw = head.add("idhead.w", linear_weight(&mut rng, config.dims.d_i, by_id.len()));
    let hb = head.add("idhead.b", Tensor::zeros(&[by_id.len()]));
    let mut opt_enc = Adam::new(&encoder.params, AdamConfig::default());
    let mut opt_head = Adam::new(&head, AdamConfig::default());

    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|p| class_of[&p.identity]).collect();
            let mut g = Graph::new();
            let eb = encoder.params.bind(&mut g, true);
            let hbind = head.bind(&mut g, true);
            let x = g.input(i_frames(&batch)?);
            let z = encoder.embed(&mut g, &eb, x)?;
            let logits = g.linear(z, hbind.var(hw), hbind.var(hb))?;
            let p = g.softmax(logits)?;
            let loss = loss_cross_entropy(&mut g, p, &labels)?;
            let grads = g.backward(loss)?;
            opt_enc.step(&mut encoder.params, &grads.collect(&eb), config.lr)?;
            opt_head.step(&mut head, &grads.collect(&hbind), config.lr)?;
        }
    }

    let mut correct = 0;
    for chunk in held.chunks(64) {
        let z = encoder.embed_tensor(&i_frames(chunk)?)?;
        let mut g = Graph::new();
        let hbind = head.bind(&mut g, false);
        let zv = g.input(z);
        let logits = g.linear(zv, hbind.var(hw), hbind.var(hb))?;
        for (i, p) in chunk.iter().enumerate() {
            if argmax(g.value(logits).row(i)) == class_of[&p.identity] {
                correct += 1;
            }
        }
    }
    let report = PretrainReport {
        n_identities: by_id.len(),
        train_frames: train.len(),
        heldout_frames: held.len(),
        heldout_accuracy: correct as f64 / held.len().max(1) as f64,
    };
    if report.heldout_accuracy < FIXTURE_FLOOR {
        return Err(FerError::Fixture(format!(
            "identity encoder reached only {:.3} held-out accuracy",
            report.heldout_accuracy
        )));
    }
    Ok((encoder, report))
}
