use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    apex_targets, argmax, loss_cross_entropy, loss_reconstruction, predict, time_major, FerError, IdentityEncoder,
    ModelBundle, ModelDims, Prepared, Result,
};
use crate::mine::{dv_objective, marginal_mean_exp, marginal_pairing, DvNodes, EmaState, MiEstimate};
use crate::synth::mix_seed;
use crate::tensor::{Adam, AdamConfig, Binding, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputMode {
    #[serde(rename = "residual")]
    Residual,
    #[serde(rename = "residual+motion")]
    ResidualMotion,
}

impl InputMode {
    pub fn with_motion(self) -> bool {
        self == InputMode::ResidualMotion
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputMode::Residual => "residual",
            InputMode::ResidualMotion => "residual+motion",
        })
    }
}

impl FromStr for InputMode {
    type Err = FerError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(InputMode::Residual),
            "residual+motion" => Ok(InputMode::ResidualMotion),
            other => Err(FerError::Config(format!(
                "input_mode `{other}` (expected residual or residual+motion)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the mutual information penalty.
    pub alpha: f64,
    /// Reconstruction weight at epoch 0; decays linearly to 0.
    pub beta0: f64,
    pub beta_epochs: usize,
    pub lr: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub input_mode: InputMode,
    pub disable_mi: bool,
    pub disable_recon: bool,
    /// Fraction of training identities held out for model selection.
    pub val_fraction: f64,
    pub ema_rate: f64,
    pub d_e: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub dec_hidden: usize,
    pub stat_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let dims = ModelDims::default();
        Self {
            alpha: 0.1,
            beta0: 1.0,
            beta_epochs: 30,
            lr: 1e-3,
            lr_drop_epoch: 30,
            lr_drop_factor: 0.1,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            input_mode: InputMode::Residual,
            disable_mi: false,
            disable_recon: false,
            val_fraction: 0.125,
            ema_rate: 0.99,
            d_e: dims.d_e,
            conv1: dims.conv1,
            conv2: dims.conv2,
            dec_hidden: dims.dec_hidden,
            stat_hidden: dims.stat_hidden,
        }
    }
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys and
    /// malformed values are errors naming the line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| FerError::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| FerError::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("`{key}`: cannot parse `{v}`"))
        }
        match key {
            "alpha" => self.alpha = num(key, value)?,
            "beta0" => self.beta0 = num(key, value)?,
            "beta_epochs" => self.beta_epochs = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_drop_epoch" => self.lr_drop_epoch = num(key, value)?,
            "lr_drop_factor" => self.lr_drop_factor = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "input_mode" => self.input_mode = value.parse().map_err(|e: FerError| e.to_string())?,
            "disable_mi" => self.disable_mi = num(key, value)?,
            "disable_recon" => self.disable_recon = num(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            "ema_rate" => self.ema_rate = num(key, value)?,
            "d_e" => self.d_e = num(key, value)?,
            "conv1" => self.conv1 = num(key, value)?,
            "conv2" => self.conv2 = num(key, value)?,
            "dec_hidden" => self.dec_hidden = num(key, value)?,
            "stat_hidden" => self.stat_hidden = num(key, value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FerError::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.beta0) {
            return bad(format!("beta0 {} outside [0, 1]", self.beta0));
        }
        if !(self.lr > 0.0) || !(self.lr_drop_factor > 0.0) {
            return bad("learning rates and drop factor must be positive".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} < 2", self.batch_size));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if !(0.0..1.0).contains(&self.ema_rate) {
            return bad(format!("ema_rate {} outside [0, 1)", self.ema_rate));
        }
        if [self.d_e, self.conv1, self.conv2, self.dec_hidden, self.stat_hidden].contains(&0) {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }

    pub fn model_dims(&self, ident: &IdentityEncoder, n_classes: usize) -> ModelDims {
        ModelDims {
            identity: ident.dims,
            with_motion: self.input_mode.with_motion(),
            conv1: self.conv1,
            conv2: self.conv2,
            d_e: self.d_e,
            dec_hidden: self.dec_hidden,
            stat_hidden: self.stat_hidden,
            n_classes,
        }
    }
}

/// `beta0 · max(0, 1 − e / beta_epochs)` for zero-based epoch `e`.
pub fn beta_at(config: &TrainConfig, epoch: usize) -> f64 {
    if config.beta_epochs == 0 {
        return 0.0;
    }
    config.beta0 * (1.0 - epoch as f64 / config.beta_epochs as f64).max(0.0)
}

pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    if epoch >= config.lr_drop_epoch {
        config.lr * config.lr_drop_factor
    } else {
        config.lr
    }
}

/// Per-step weights and switches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSettings {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub use_mi: bool,
    pub use_recon: bool,
    /// Moving-average correction of the MI gradient.
    pub ema_correction: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub mi_hat: f64,
    pub reconstruction: f64,
    pub correct: usize,
    pub n: usize,
}

/// A bundle together with its optimizers and MI moving average.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub bundle: ModelBundle,
    opt_expr: Adam,
    opt_cls: Adam,
    opt_dec: Adam,
    opt_stat: Adam,
    pub ema: EmaState,
    pub steps: usize,
}

impl Trainer {
    pub fn new(bundle: ModelBundle, ema_rate: f64) -> Self {
        let cfg = AdamConfig::default();
        Self {
            opt_expr: Adam::new(&bundle.expr.params, cfg),
            opt_cls: Adam::new(&bundle.cls.params, cfg),
            opt_dec: Adam::new(&bundle.dec.params, cfg),
            opt_stat: Adam::new(&bundle.stat.params, cfg),
            ema: EmaState::new(ema_rate),
            bundle,
            steps: 0,
        }
    }
}

fn finite(value: f64, loss: &'static str, step: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(FerError::NonFiniteLoss { loss, step })
    }
}

/// Graph nodes of the expression-branch objective.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveNodes {
    pub ze: Var,
    pub probs: Var,
    pub cross_entropy: Var,
    pub mi: Option<DvNodes>,
    pub reconstruction: Option<Var>,
    /// `L_CE + α·MI + β·L_rec` over whichever terms are present.
    pub total: Var,
}

/// MI term inputs: the marginal pairing and, optionally, the moving
/// average used as the log-term denominator.
#[derive(Clone, Debug)]
pub struct MiTerm<'a> {
    pub pairing: &'a [usize],
    pub ema_denominator: Option<f64>,
    pub alpha: f64,
}

/// Forward pass of the expression branch with the cross-entropy loss.
/// `eb` and `cb` bind the expression and classifier parameters.
pub fn expression_objective(
    g: &mut Graph,
    bundle: &ModelBundle,
    eb: &Binding,
    cb: &Binding,
    batch: &[&Prepared],
) -> Result<ObjectiveNodes> {
    let labels: Vec<usize> = batch.iter().map(|p| p.label).collect();
    let x = g.input(time_major(batch)?);
    let ze = bundle.expr.embed(g, eb, x, batch.len())?;
    let logits = bundle.cls.logits(g, cb, ze)?;
    let probs = g.softmax(logits)?;
    let cross_entropy = loss_cross_entropy(g, probs, &labels)?;
    Ok(ObjectiveNodes {
        ze,
        probs,
        cross_entropy,
        mi: None,
        reconstruction: None,
        total: cross_entropy,
    })
}

/// Adds `α·MI` and `β·L_rec` to `nodes.total`. The statistics network
/// and decoder enter as constants.
pub fn add_regularizers(
    g: &mut Graph,
    bundle: &ModelBundle,
    nodes: &mut ObjectiveNodes,
    batch: &[&Prepared],
    zi: &Tensor,
    mi: Option<MiTerm<'_>>,
    beta: Option<f64>,
) -> Result<()> {
    let ziv = g.input(zi.clone());
    if let Some(term) = mi {
        let sb = bundle.stat.params.bind(g, false);
        let dv = dv_objective(g, &bundle.stat, &sb, nodes.ze, ziv, term.pairing, term.ema_denominator)?;
        let weighted = g.scale(dv.objective, term.alpha)?;
        nodes.total = g.add(nodes.total, weighted)?;
        nodes.mi = Some(dv);
    }
    if let Some(beta) = beta {
        let db = bundle.dec.params.bind(g, false);
        let recon = bundle.dec.forward(g, &db, nodes.ze, ziv)?;
        let tv = g.input(apex_targets(batch)?);
        let l = loss_reconstruction(g, recon, tv)?;
        let weighted = g.scale(l, beta)?;
        nodes.total = g.add(nodes.total, weighted)?;
        nodes.reconstruction = Some(l);
    }
    Ok(())
}

/// `L_CE + α·MI + β·L_rec` in one call.
#[allow(clippy::too_many_arguments)]
pub fn composite_objective(
    g: &mut Graph,
    bundle: &ModelBundle,
    eb: &Binding,
    cb: &Binding,
    batch: &[&Prepared],
    zi: &Tensor,
    mi: Option<MiTerm<'_>>,
    beta: Option<f64>,
) -> Result<ObjectiveNodes> {
    let mut nodes = expression_objective(g, bundle, eb, cb, batch)?;
    add_regularizers(g, bundle, &mut nodes, batch, zi, mi, beta)?;
    Ok(nodes)
}

/// One optimization step.
///
/// `f_E` and the LSTM descend on `L_CE + α·MI + β·L_rec`; the classifier
/// only sees `L_CE`; the statistics network ascends on the MI bound; the
/// decoder descends on `L_rec`. The identity encoder is never touched:
/// `zi` holds its precomputed outputs for the batch.
pub fn train_step<R: Rng + ?Sized>(
    trainer: &mut Trainer,
    batch: &[&Prepared],
    zi: &Tensor,
    settings: &StepSettings,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let n = batch.len();
    if n < 2 {
        return Err(FerError::Batch(format!("batch of {n}; at least 2 sequences are needed")));
    }
    if zi.shape().first() != Some(&n) {
        return Err(FerError::Batch(format!("{n} sequences but z_I is {:?}", zi.shape())));
    }
    let step = trainer.steps;
    let labels: Vec<usize> = batch.iter().map(|p| p.label).collect();

    let bundle = &trainer.bundle;
    let mut g = Graph::new();
    let eb = bundle.expr.params.bind(&mut g, true);
    let cb = bundle.cls.params.bind(&mut g, true);
    let mut nodes = expression_objective(&mut g, bundle, &eb, &cb, batch)?;
    let ze_value = g.value(nodes.ze).clone();

    // The moving average is updated with this batch before it is used.
    let mut pairing = None;
    if settings.use_mi {
        let pi = marginal_pairing(n, rng)?;
        let denom = if settings.ema_correction {
            let m = marginal_mean_exp(&ze_value, zi, &pi, &bundle.stat)?;
            Some(trainer.ema.update(m)?)
        } else {
            None
        };
        pairing = Some((pi, denom));
    }
    add_regularizers(
        &mut g,
        bundle,
        &mut nodes,
        batch,
        zi,
        pairing.as_ref().map(|(pi, denom)| MiTerm {
            pairing: pi,
            ema_denominator: *denom,
            alpha: settings.alpha,
        }),
        settings.use_recon.then_some(settings.beta),
    )?;
    let mut out = LossBreakdown {
        cross_entropy: finite(g.scalar_value(nodes.cross_entropy), "cross_entropy", step)?,
        n,
        correct: (0..n)
            .filter(|&i| argmax(g.value(nodes.probs).row(i)) == labels[i])
            .count(),
        ..LossBreakdown::default()
    };
    if let (Some(m), Some((pi, _))) = (&nodes.mi, &pairing) {
        let degenerate = pi.iter().enumerate().all(|(i, &p)| i == p);
        let est = MiEstimate::from_outputs(g.value(m.joint).data(), g.value(m.marginal).data(), degenerate)?;
        out.mi_hat = finite(est.value, "mi_hat", step)?;
    }
    if let Some(r) = nodes.reconstruction {
        out.reconstruction = finite(g.scalar_value(r), "reconstruction", step)?;
    }
    let total = nodes.total;
    let target = apex_targets(batch)?;
    let grads = g.backward(total)?;
    let g_expr = grads.collect(&eb);
    let g_cls = grads.collect(&cb);
    drop(g);

    // Statistics network and decoder see z_E as a constant.
    let mut g_stat = None;
    let mut g_dec = None;
    if settings.use_mi || settings.use_recon {
        let mut g2 = Graph::new();
        let zev = g2.input(ze_value.clone());
        let ziv = g2.input(zi.clone());
        let sb = bundle.stat.params.bind(&mut g2, true);
        let db = bundle.dec.params.bind(&mut g2, true);
        let mut objective = None;
        if let Some((pi, denom)) = &pairing {
            let nodes = dv_objective(&mut g2, &bundle.stat, &sb, zev, ziv, pi, *denom)?;
            objective = Some(g2.scale(nodes.objective, -1.0)?);
        }
        if settings.use_recon {
            let recon = bundle.dec.forward(&mut g2, &db, zev, ziv)?;
            let tv = g2.input(target);
            let l = loss_reconstruction(&mut g2, recon, tv)?;
            objective = Some(match objective {
                Some(o) => g2.add(o, l)?,
                None => l,
            });
        }
        let grads2 = g2.backward(objective.expect("at least one term"))?;
        if settings.use_mi {
            g_stat = Some(grads2.collect(&sb));
        }
        if settings.use_recon {
            g_dec = Some(grads2.collect(&db));
        }
    }

    let lr = settings.lr;
    let b = &mut trainer.bundle;
    trainer.opt_expr.step(&mut b.expr.params, &g_expr, lr)?;
    trainer.opt_cls.step(&mut b.cls.params, &g_cls, lr)?;
    if let Some(gd) = g_dec {
        trainer.opt_dec.step(&mut b.dec.params, &gd, lr)?;
    }
    if let Some(gs) = g_stat {
        trainer.opt_stat.step(&mut b.stat.params, &gs, lr)?;
    }
    trainer.steps += 1;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_ce: f64,
    pub mi_hat: f64,
    pub loss_recon: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    #[serde(skip)]
    pub beta: f64,
    #[serde(skip)]
    pub lr: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| FerError::Config(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| FerError::Config(format!("{}: {e}", path.display())))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub bundle: ModelBundle,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    pub train_identities: Vec<u32>,
    pub val_identities: Vec<u32>,
}

/// Splits off `round(n · fraction)` training identities (at least one
/// when `fraction > 0` and there are two or more) for validation.
fn validation_split(data: &[Prepared], fraction: f64, seed: u64) -> (Vec<u32>, Vec<u32>) {
    let ids: BTreeSet<u32> = data.iter().map(|p| p.identity).collect();
    let mut ids: Vec<u32> = ids.into_iter().collect();
    let n = ids.len();
    let k = if fraction > 0.0 && n >= 2 {
        ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x7a1])));
    let mut val = ids.split_off(n - k);
    ids.sort_unstable();
    val.sort_unstable();
    (ids, val)
}

/// Runs the full training schedule on `data` (the training split).
///
/// `observer` is called after every epoch.
pub fn fit(
    config: &TrainConfig,
    data: &[Prepared],
    ident: IdentityEncoder,
    n_classes: usize,
    mut observer: impl FnMut(&EpochMetrics),
) -> Result<FitOutcome> {
    config.validate()?;
    let dims = config.model_dims(&ident, n_classes);
    if let Some(p) = data.iter().find(|p| p.frames.shape()[1] != dims.input_channels()) {
        return Err(FerError::Config(format!(
            "input mode {} needs {} input planes, prepared data has {}",
            config.input_mode,
            dims.input_channels(),
            p.frames.shape()[1]
        )));
    }
    let (train_ids, val_ids) = validation_split(data, config.val_fraction, config.seed);
    let (train, val): (Vec<&Prepared>, Vec<&Prepared>) =
        data.iter().partition(|p| train_ids.binary_search(&p.identity).is_ok());
    if train.len() < 2 {
        return Err(FerError::Config(format!("{} training sequences", train.len())));
    }
    let val: Vec<Prepared> = val.into_iter().cloned().collect();

    let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 1]));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 2]));
    let mut mi_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 3]));

    let bundle = ModelBundle::new(&mut init_rng, dims, ident)?;
    let zi_all = bundle.identity_embeddings(&train)?;
    let d_i = dims.identity.d_i;
    let mut trainer = Trainer::new(bundle, config.ema_rate);

    let mut metrics = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelBundle)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        let settings = StepSettings {
            alpha: config.alpha,
            beta: beta_at(config, epoch),
            lr: lr_at(config, epoch),
            use_mi: !config.disable_mi,
            use_recon: !config.disable_recon,
            ema_correction: true,
        };
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossBreakdown::default();
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| train[i]).collect();
            let zi_rows: Vec<f64> = chunk.iter().flat_map(|&i| zi_all.row(i).iter().copied()).collect();
            let zi = Tensor::from_vec(vec![chunk.len(), d_i], zi_rows)?;
            let lb = train_step(&mut trainer, &batch, &zi, &settings, &mut mi_rng)?;
            let w = lb.n as f64;
            sum.cross_entropy += lb.cross_entropy * w;
            sum.mi_hat += lb.mi_hat * w;
            sum.reconstruction += lb.reconstruction * w;
            sum.correct += lb.correct;
            sum.n += lb.n;
        }
        let seen = sum.n.max(1) as f64;
        let val_acc = if val.is_empty() {
            f64::NAN
        } else {
            let (preds, _) = predict(&trainer.bundle, &val, 64)?;
            preds.iter().zip(&val).filter(|(p, s)| **p == s.label).count() as f64 / val.len() as f64
        };
        let row = EpochMetrics {
            epoch,
            loss_ce: sum.cross_entropy / seen,
            mi_hat: sum.mi_hat / seen,
            loss_recon: sum.reconstruction / seen,
            train_acc: sum.correct as f64 / seen,
            val_acc,
            beta: settings.beta,
            lr: settings.lr,
        };
        observer(&row);
        let improved = match &best {
            None => true,
            Some((b, _, _)) => val_acc > *b,
        };
        if val.is_empty() || improved {
            best = Some((val_acc, epoch, trainer.bundle.clone()));
        }
        metrics.push(row);
    }
    let (best_epoch, bundle) = match best {
        Some((_, e, b)) => (e, b),
        None => (0, trainer.bundle),
    };
    Ok(FitOutcome {
        bundle,
        best_epoch,
        metrics,
        train_identities: train_ids,
        val_identities: val_ids,
    })
}
