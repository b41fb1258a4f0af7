//! Mutual information neural estimation.
//!
//! A statistics network `T(z_e, z_i)` is trained by gradient ascent on the
//! Donsker–Varadhan lower bound
//!
//! ```text
//! I(E; I) >= mean_i T(e_i, i_i) - log mean_i exp T(e_i, i_π(i))
//! ```
//!
//! where `π` is a fresh uniform permutation of the batch, so the second
//! term sees samples from the product of marginals. The gradient of the
//! log term is bias-corrected by replacing the batch mean of `exp T` with
//! an exponential moving average.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::tensor::{
    init, Adam, AdamConfig, Binding, Graph, ParamId, ParamStore, Tensor, TensorError, Var,
};

#[derive(Debug, Error)]
pub enum MineError {
    #[error("marginal pairing needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid pairing: {0}")]
    InvalidPermutation(String),
    #[error("embedding batches disagree: {0}")]
    BatchMismatch(String),
    #[error("statistics network produced a non-finite value ({0})")]
    NonFinite(&'static str),
    #[error("moving average of exp(T) is not positive: {0}")]
    EmaNonPositive(f64),
    #[error("estimate diverged at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, MineError>;

/// `T_θ`: concat(z_e, z_i) → hidden (relu) → hidden (relu) → scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct StatisticsNet {
    pub params: ParamStore,
    layers: [(ParamId, ParamId); 3],
    input_dim: usize,
}

impl StatisticsNet {
    pub const DEFAULT_HIDDEN: usize = 128;

    pub fn new<R: Rng + ?Sized>(rng: &mut R, d_e: usize, d_i: usize, hidden: usize) -> Self {
        let mut params = ParamStore::new();
        let input_dim = d_e + d_i;
        let mut layer = |name: &str, fan_in: usize, fan_out: usize| {
            let w = params.add(format!("stat.{name}.w"), init::linear_weight(rng, fan_in, fan_out));
            let b = params.add(format!("stat.{name}.b"), Tensor::zeros(&[fan_out]));
            (w, b)
        };
        let layers = [
            layer("fc1", input_dim, hidden),
            layer("fc2", hidden, hidden),
            layer("fc3", hidden, 1),
        ];
        Self {
            params,
            layers,
            input_dim,
        }
    }

    /// Rebuilds the layer handles over a store loaded from a checkpoint.
    pub fn from_params(params: ParamStore) -> std::result::Result<Self, String> {
        let find = |n: &str| params.find(n).ok_or_else(|| format!("missing `{n}`"));
        let layers = [
            (find("stat.fc1.w")?, find("stat.fc1.b")?),
            (find("stat.fc2.w")?, find("stat.fc2.b")?),
            (find("stat.fc3.w")?, find("stat.fc3.b")?),
        ];
        let input_dim = params.get(layers[0].0).shape()[0];
        Ok(Self {
            params,
            layers,
            input_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// `x: [n, d_e + d_i]` to `[n]`.
    pub fn forward(&self, g: &mut Graph, bound: &Binding, x: Var) -> crate::tensor::Result<Var> {
        let mut h = x;
        for (k, (w, b)) in self.layers.iter().enumerate() {
            h = g.linear(h, bound.var(*w), bound.var(*b))?;
            if k < 2 {
                h = g.relu(h)?;
            }
        }
        let n = g.value(h).shape()[0];
        g.reshape(h, &[n])
    }

    /// Forward pass on plain tensors.
    pub fn evaluate(&self, pairs: &Tensor) -> crate::tensor::Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let x = g.input(pairs.clone());
        let out = self.forward(&mut g, &bound, x)?;
        Ok(g.value(out).data().to_vec())
    }
}

/// One Monte-Carlo evaluation of the DV bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiEstimate {
    /// Nats; `joint_term - marginal_log_term`.
    pub value: f64,
    pub joint_term: f64,
    pub marginal_log_term: f64,
    pub n: usize,
    /// The pairing was the identity, so the "marginal" samples are the
    /// joint samples and the estimate is degenerate.
    pub degenerate: bool,
}

impl MiEstimate {
    pub fn from_outputs(joint: &[f64], marginal: &[f64], degenerate: bool) -> Result<Self> {
        let n = joint.len();
        // Both terms are taken relative to a reference value so that a
        // constant statistic cancels exactly.
        let anchor = joint.first().copied().unwrap_or(0.0);
        let joint_term = anchor + joint.iter().map(|v| v - anchor).sum::<f64>() / n as f64;
        let marginal_log_term = log_mean_exp(marginal);
        if !joint_term.is_finite() || !marginal_log_term.is_finite() {
            return Err(MineError::NonFinite("DV terms"));
        }
        Ok(Self {
            value: joint_term - marginal_log_term,
            joint_term,
            marginal_log_term,
            n,
            degenerate,
        })
    }
}

/// Moving average of the batch mean of `exp T` over marginal pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmaState {
    pub ema: Option<f64>,
    pub rate: f64,
}

impl Default for EmaState {
    fn default() -> Self {
        Self {
            ema: None,
            rate: 0.99,
        }
    }
}

impl EmaState {
    pub fn new(rate: f64) -> Self {
        Self { ema: None, rate }
    }

    /// Folds in one batch mean; the first batch initializes the average.
    pub fn update(&mut self, batch_mean: f64) -> Result<f64> {
        let next = match self.ema {
            None => batch_mean,
            Some(prev) => self.rate * prev + (1.0 - self.rate) * batch_mean,
        };
        if !(next > 0.0) || !next.is_finite() {
            return Err(MineError::EmaNonPositive(next));
        }
        self.ema = Some(next);
        Ok(next)
    }
}

/// Uniform random permutation of `0..n`; fixed points are allowed.
pub fn marginal_pairing<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(MineError::BatchTooSmall(n));
    }
    let mut pi: Vec<usize> = (0..n).collect();
    pi.shuffle(rng);
    Ok(pi)
}

fn check_batch(ze: &Tensor, zi: &Tensor, pi: &[usize]) -> Result<usize> {
    if ze.ndim() != 2 || zi.ndim() != 2 || ze.shape()[0] != zi.shape()[0] {
        return Err(MineError::BatchMismatch(format!(
            "z_e {:?}, z_i {:?}",
            ze.shape(),
            zi.shape()
        )));
    }
    let n = ze.shape()[0];
    if n < 2 {
        return Err(MineError::BatchTooSmall(n));
    }
    let mut seen = vec![false; n];
    if pi.len() != n {
        return Err(MineError::InvalidPermutation(format!("{} entries for n = {n}", pi.len())));
    }
    for &p in pi {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(MineError::InvalidPermutation(format!("entry {p} repeated or out of range")));
        }
    }
    Ok(n)
}

/// Graph nodes of one DV evaluation.
#[derive(Clone, Copy, Debug)]
pub struct DvNodes {
    /// `[n]` statistics on joint pairs.
    pub joint: Var,
    /// `[n]` statistics on marginal pairs.
    pub marginal: Var,
    /// Scalar whose gradient is the ascent direction for the bound:
    /// exact when no moving average is given, bias-corrected otherwise.
    pub objective: Var,
}

/// Builds the DV objective for graph-resident embeddings.
///
/// With `ema_denominator = Some(m)` the log term's gradient becomes
/// `mean(exp(T) ∇T) / m`; the value of `objective` is then only a
/// surrogate and the reported estimate must come from [`MiEstimate`].
pub fn dv_objective(
    g: &mut Graph,
    net: &StatisticsNet,
    bound: &Binding,
    ze: Var,
    zi: Var,
    pi: &[usize],
    ema_denominator: Option<f64>,
) -> crate::tensor::Result<DvNodes> {
    let n = pi.len();
    let zi_shuffled = g.gather_rows(zi, pi)?;
    let joint_in = g.concat(&[ze, zi], 1)?;
    let marg_in = g.concat(&[ze, zi_shuffled], 1)?;
    let both = g.concat(&[joint_in, marg_in], 0)?;
    let t = net.forward(g, bound, both)?;
    let joint = g.slice(t, 0, 0, n)?;
    let marginal = g.slice(t, 0, n, 2 * n)?;
    let joint_mean = g.mean(joint)?;
    let log_term = match ema_denominator {
        None => {
            let lse = g.logsumexp(marginal)?;
            let ln_n = g.input(Tensor::scalar((n as f64).ln()));
            g.sub(lse, ln_n)?
        }
        Some(m) => {
            let shift = g
                .value(marginal)
                .data()
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let s = g.input(Tensor::scalar(shift));
            let centered = g.sub(marginal, s)?;
            let e = g.exp(centered)?;
            let mean_e = g.mean(e)?;
            g.scale(mean_e, (shift - m.ln()).exp())?
        }
    };
    let objective = g.sub(joint_mean, log_term)?;
    Ok(DvNodes {
        joint,
        marginal,
        objective,
    })
}

/// `log(mean(exp(values)))`, max-shifted.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + (values.iter().map(|v| (v - m).exp()).sum::<f64>() / values.len() as f64).ln()
}

/// Batch mean of `exp(values)`.
pub fn mean_exp(values: &[f64]) -> f64 {
    log_mean_exp(values).exp()
}

fn pairs_tensor(ze: &Tensor, zi: &Tensor, rows: impl Iterator<Item = usize>) -> Tensor {
    let (n, de, di) = (ze.shape()[0], ze.shape()[1], zi.shape()[1]);
    let mut data = Vec::with_capacity(n * (de + di));
    for (i, j) in rows.enumerate() {
        data.extend_from_slice(ze.row(i));
        data.extend_from_slice(zi.row(j));
    }
    Tensor::from_vec(vec![n, de + di], data).expect("n >= 2 and positive dims")
}

/// Batch mean of `exp(T)` over the marginal pairs `(z_E[i], z_I[pi[i]])`.
/// This is what the moving average in [`EmaState`] tracks.
pub fn marginal_mean_exp(ze: &Tensor, zi: &Tensor, pi: &[usize], net: &StatisticsNet) -> Result<f64> {
    check_batch(ze, zi, pi)?;
    let marginal = net.evaluate(&pairs_tensor(ze, zi, pi.iter().copied()))?;
    if marginal.iter().any(|v| !v.is_finite()) {
        return Err(MineError::NonFinite("T"));
    }
    Ok(mean_exp(&marginal))
}

/// Evaluates the DV bound on one batch with the given pairing.
pub fn estimate_mi_batch(
    ze: &Tensor,
    zi: &Tensor,
    pi: &[usize],
    net: &StatisticsNet,
) -> Result<MiEstimate> {
    let n = check_batch(ze, zi, pi)?;
    let joint = net.evaluate(&pairs_tensor(ze, zi, 0..n))?;
    let marginal = net.evaluate(&pairs_tensor(ze, zi, pi.iter().copied()))?;
    if joint.iter().chain(&marginal).any(|v| !v.is_finite()) {
        return Err(MineError::NonFinite("T"));
    }
    let degenerate = pi.iter().enumerate().all(|(i, &p)| i == p);
    MiEstimate::from_outputs(&joint, &marginal, degenerate)
}

/// Statistics network plus its optimizer and moving average.
#[derive(Clone, Debug)]
pub struct MineTrainer {
    pub net: StatisticsNet,
    pub optimizer: Adam,
    pub ema: EmaState,
}

impl MineTrainer {
    pub fn new(net: StatisticsNet, adam: AdamConfig, ema_rate: f64) -> Self {
        let optimizer = Adam::new(&net.params, adam);
        Self {
            net,
            optimizer,
            ema: EmaState::new(ema_rate),
        }
    }

    /// One ascent step on the DV bound for a batch of embeddings.
    /// `bias_correction = false` uses the exact batch gradient.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        ze: &Tensor,
        zi: &Tensor,
        rng: &mut R,
        lr: f64,
        bias_correction: bool,
    ) -> Result<MiEstimate> {
        let n = ze.shape().first().copied().unwrap_or(0);
        let pi = marginal_pairing(n, rng)?;
        check_batch(ze, zi, &pi)?;

        // The moving average needs this batch's marginal statistics first.
        let marginal_pre = marginal_mean_exp(ze, zi, &pi, &self.net)?;
        let denom = if bias_correction {
            Some(self.ema.update(marginal_pre)?)
        } else {
            None
        };

        let mut g = Graph::new();
        let bound = self.net.params.bind(&mut g, true);
        let zev = g.input(ze.clone());
        let ziv = g.input(zi.clone());
        let nodes = dv_objective(&mut g, &self.net, &bound, zev, ziv, &pi, denom)?;
        let degenerate = pi.iter().enumerate().all(|(i, &p)| i == p);
        let estimate = MiEstimate::from_outputs(
            g.value(nodes.joint).data(),
            g.value(nodes.marginal).data(),
            degenerate,
        )?;
        let grads = g.backward(nodes.objective)?;
        let ascent: Vec<Tensor> = grads
            .collect(&bound)
            .into_iter()
            .map(|mut t| {
                t.data_mut().iter_mut().for_each(|v| *v = -*v);
                t
            })
            .collect();
        self.optimizer.step(&mut self.net.params, &ascent, lr)?;
        Ok(estimate)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MineConfig {
    pub hidden: usize,
    pub lr: f64,
    pub steps: usize,
    pub ema_rate: f64,
    pub adam: AdamConfig,
}

impl Default for MineConfig {
    fn default() -> Self {
        Self {
            hidden: StatisticsNet::DEFAULT_HIDDEN,
            lr: 1e-3,
            steps: 2000,
            ema_rate: 0.99,
            adam: AdamConfig::default(),
        }
    }
}

/// Outcome of training a fresh estimator to convergence.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergedMi {
    /// Mean per-step estimate over the final 10% of steps.
    pub raw: f64,
    /// `raw` clipped to `[0, ln n]`.
    pub reported: f64,
    /// `raw` reached the `ln n` ceiling of a batch estimate.
    pub saturated: bool,
    pub trace: Vec<MiEstimate>,
}

/// Trains a fresh [`StatisticsNet`] on batches from `sampler` and reads
/// out the mean estimate over the last 10% of steps.
pub fn estimate_mi_converged<R, S>(
    mut sampler: S,
    d_e: usize,
    d_i: usize,
    config: &MineConfig,
    rng: &mut R,
) -> Result<ConvergedMi>
where
    R: Rng + ?Sized,
    S: FnMut(&mut R) -> (Tensor, Tensor),
{
    if config.steps == 0 {
        return Err(MineError::Tensor(TensorError::InvalidArgument("zero steps".into())));
    }
    let net = StatisticsNet::new(rng, d_e, d_i, config.hidden);
    let mut trainer = MineTrainer::new(net, config.adam, config.ema_rate);
    let mut trace = Vec::with_capacity(config.steps);
    let mut batch = 0;
    for step in 0..config.steps {
        let (ze, zi) = sampler(rng);
        batch = ze.shape().first().copied().unwrap_or(0);
        let est = match trainer.train_step(&ze, &zi, rng, config.lr, true) {
            Ok(e) => e,
            Err(MineError::NonFinite(_)) | Err(MineError::EmaNonPositive(_)) => {
                return Err(MineError::Diverged { step })
            }
            Err(e) => return Err(e),
        };
        if !est.value.is_finite() {
            return Err(MineError::Diverged { step });
        }
        trace.push(est);
    }
    let tail = (config.steps / 10).max(1);
    let raw = trace[trace.len() - tail..].iter().map(|e| e.value).sum::<f64>() / tail as f64;
    let ceiling = (batch as f64).ln();
    Ok(ConvergedMi {
        raw,
        reported: raw.clamp(0.0, ceiling),
        saturated: raw >= ceiling,
        trace,
    })
}

/// Correlated Gaussian pairs: `y = ρx + sqrt(1 - ρ²)ε` per coordinate.
/// True mutual information is `-dim/2 · ln(1 - ρ²)`.
pub fn gaussian_pairs<R: Rng + ?Sized>(rng: &mut R, n: usize, dim: usize, rho: f64) -> (Tensor, Tensor) {
    use rand_distr::{Distribution, StandardNormal};
    let s = (1.0 - rho * rho).sqrt();
    let mut x = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n * dim);
    for _ in 0..n * dim {
        let a: f64 = StandardNormal.sample(rng);
        let e: f64 = StandardNormal.sample(rng);
        x.push(a);
        y.push(rho * a + s * e);
    }
    (
        Tensor::from_vec(vec![n, dim], x).expect("n, dim > 0"),
        Tensor::from_vec(vec![n, dim], y).expect("n, dim > 0"),
    )
}

pub fn gaussian_mi(rho: f64, dim: usize) -> f64 {
    -0.5 * dim as f64 * (1.0 - rho * rho).ln()
}
