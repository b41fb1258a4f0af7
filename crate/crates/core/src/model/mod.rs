//! Expression and identity networks, losses, and the training loop.
//!
//! The expression branch encodes each residual frame with a small
//! convolutional network, runs an LSTM over time and classifies the final
//! hidden state `z_E`. A frozen identity encoder maps the I frame to
//! `z_I`. A decoder rebuilds the apex frame from `(z_E, z_I)`, and a
//! statistics network estimates the mutual information between the two.

mod checkpoint;
mod identity;
mod train;

pub use checkpoint::{load_checkpoint, load_identity, read_records, save_checkpoint, save_identity, write_records};
pub use identity::{identity_pretrain, PretrainConfig, PretrainReport};
pub use train::{
    add_regularizers, beta_at, composite_objective, expression_objective, fit, lr_at, train_step,
    write_metrics_csv, EpochMetrics, FitOutcome, InputMode, LossBreakdown, MiTerm, ObjectiveNodes, StepSettings,
    TrainConfig, Trainer,
};

use std::time::Instant;

use rand::Rng;
use thiserror::Error;

use crate::codec::{residual_input, CodecError, Gop};
use crate::mine::{MineError, StatisticsNet};
use crate::synth::{LoadedSequence, SynthError};
use crate::tensor::init::{conv_weight, linear_weight};
use crate::tensor::{Binding, Graph, ParamId, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum FerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Mine(#[from] MineError),
    #[error("loss `{loss}` is not finite at step {step}")]
    NonFiniteLoss { loss: &'static str, step: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("fixture error: {0}")]
    Fixture(String),
    #[error("checkpoint: bad magic, found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("checkpoint: unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("checkpoint: truncated while reading {what} of record `{record}`")]
    Truncated { record: String, what: &'static str },
    #[error("checkpoint: record `{record}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        record: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint: missing record `{0}`")]
    MissingRecord(String),
    #[error("checkpoint: unexpected record `{0}`")]
    UnexpectedRecord(String),
    #[error("checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FerError>;

/// Geometry and widths of the identity encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IdentityDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub d_i: usize,
}

impl Default for IdentityDims {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 1,
            conv1: 16,
            conv2: 32,
            d_i: 32,
        }
    }
}

/// Geometry and widths of the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub identity: IdentityDims,
    pub with_motion: bool,
    pub conv1: usize,
    pub conv2: usize,
    pub d_e: usize,
    pub dec_hidden: usize,
    pub stat_hidden: usize,
    pub n_classes: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            identity: IdentityDims::default(),
            with_motion: false,
            conv1: 16,
            conv2: 32,
            d_e: 64,
            dec_hidden: 256,
            stat_hidden: StatisticsNet::DEFAULT_HIDDEN,
            n_classes: 7,
        }
    }
}

impl ModelDims {
    pub fn image_len(&self) -> usize {
        let i = &self.identity;
        i.height * i.width * i.channels
    }

    pub fn input_channels(&self) -> usize {
        self.identity.channels + if self.with_motion { 2 } else { 0 }
    }
}

fn conv_out(n: usize) -> usize {
    (n + 1) / 2
}

/// Flattened length after two 3×3 stride-2 convolutions with padding 1.
fn trunk_features(height: usize, width: usize, channels: usize) -> usize {
    channels * conv_out(conv_out(height)) * conv_out(conv_out(width))
}

/// Two stride-2 convolutions with relu, flatten, fully connected.
#[derive(Clone, Debug, PartialEq)]
struct ConvTrunk {
    ids: [ParamId; 6],
}

impl ConvTrunk {
    #[allow(clippy::too_many_arguments)]
    fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
        c_in: usize,
        conv1: usize,
        conv2: usize,
        (h, w): (usize, usize),
        out: usize,
    ) -> Self {
        let feat = trunk_features(h, w, conv2);
        let ids = [
            store.add(format!("{prefix}.conv1.w"), conv_weight(rng, conv1, c_in, 3)),
            store.add(format!("{prefix}.conv1.b"), Tensor::zeros(&[conv1])),
            store.add(format!("{prefix}.conv2.w"), conv_weight(rng, conv2, conv1, 3)),
            store.add(format!("{prefix}.conv2.b"), Tensor::zeros(&[conv2])),
            store.add(format!("{prefix}.fc.w"), linear_weight(rng, feat, out)),
            store.add(format!("{prefix}.fc.b"), Tensor::zeros(&[out])),
        ];
        Self { ids }
    }

    fn forward(&self, g: &mut Graph, bound: &Binding, x: Var) -> crate::tensor::Result<Var> {
        let v = |i: usize| bound.var(self.ids[i]);
        let h = g.conv2d(x, v(0), Some(v(1)), 2, 1)?;
        let h = g.relu(h)?;
        let h = g.conv2d(h, v(2), Some(v(3)), 2, 1)?;
        let h = g.relu(h)?;
        let shape = g.value(h).shape().to_vec();
        let flat = g.reshape(h, &[shape[0], shape[1] * shape[2] * shape[3]])?;
        g.linear(flat, v(4), v(5))
    }
}

/// Frame encoder `f_E` followed by the LSTM aggregator.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionNet {
    pub params: ParamStore,
    trunk: ConvTrunk,
    wx: ParamId,
    wh: ParamId,
    bias: ParamId,
    d_e: usize,
}

impl ExpressionNet {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dims: &ModelDims) -> Self {
        let mut params = ParamStore::new();
        let i = &dims.identity;
        let trunk = ConvTrunk::init(
            &mut params,
            "fe",
            rng,
            dims.input_channels(),
            dims.conv1,
            dims.conv2,
            (i.height, i.width),
            dims.d_e,
        );
        let d = dims.d_e;
        let wx = params.add("lstm.wx", linear_weight(rng, d, 4 * d));
        let wh = params.add("lstm.wh", linear_weight(rng, d, 4 * d));
        // Gate order i, f, g, o; forget gate starts open.
        let mut b = vec![0.0; 4 * d];
        b[d..2 * d].iter_mut().for_each(|v| *v = 1.0);
        let bias = params.add("lstm.b", Tensor::from_vec(vec![4 * d], b).expect("d > 0"));
        Self {
            params,
            trunk,
            wx,
            wh,
            bias,
            d_e: d,
        }
    }

    /// `frames` is `[T·B, c, h, w]` in time-major order (all sequences at
    /// step 1, then step 2, ...). Returns the final hidden state `[B, d_E]`.
    pub fn embed(&self, g: &mut Graph, bound: &Binding, frames: Var, batch: usize) -> crate::tensor::Result<Var> {
        let rows = g.value(frames).shape()[0];
        if batch == 0 || rows % batch != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "{rows} frames do not split into sequences of batch {batch}"
            )));
        }
        let feats = self.trunk.forward(g, bound, frames)?;
        let d = self.d_e;
        let (wx, wh, b) = (bound.var(self.wx), bound.var(self.wh), bound.var(self.bias));
        let mut h = g.input(Tensor::zeros(&[batch, d]));
        let mut c = g.input(Tensor::zeros(&[batch, d]));
        for t in 0..rows / batch {
            let x = g.slice(feats, 0, t * batch, (t + 1) * batch)?;
            let xg = g.matmul(x, wx)?;
            let hg = g.matmul(h, wh)?;
            let gates = g.add(xg, hg)?;
            let gates = g.add(gates, b)?;
            let gate = |g: &mut Graph, k: usize| g.slice(gates, 1, k * d, (k + 1) * d);
            let i = gate(g, 0)?;
            let i = g.sigmoid(i)?;
            let f = gate(g, 1)?;
            let f = g.sigmoid(f)?;
            let cand = gate(g, 2)?;
            let cand = g.tanh(cand)?;
            let o = gate(g, 3)?;
            let o = g.sigmoid(o)?;
            let keep = g.mul(f, c)?;
            let write = g.mul(i, cand)?;
            c = g.add(keep, write)?;
            let squashed = g.tanh(c)?;
            h = g.mul(o, squashed)?;
        }
        Ok(h)
    }
}

/// Single fully connected layer `d_E → C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub params: ParamStore,
    w: ParamId,
    b: ParamId,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, d_e: usize, classes: usize) -> Self {
        let mut params = ParamStore::new();
        let w = params.add("cls.w", linear_weight(rng, d_e, classes));
        let b = params.add("cls.b", Tensor::zeros(&[classes]));
        Self { params, w, b }
    }

    pub fn logits(&self, g: &mut Graph, bound: &Binding, z: Var) -> crate::tensor::Result<Var> {
        g.linear(z, bound.var(self.w), bound.var(self.b))
    }
}

/// `(z_E, z_I) → 256 → image`, sigmoid output in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub params: ParamStore,
    ids: [ParamId; 4],
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dims: &ModelDims) -> Self {
        let mut params = ParamStore::new();
        let inp = dims.d_e + dims.identity.d_i;
        let (hid, out) = (dims.dec_hidden, dims.image_len());
        let ids = [
            params.add("dec.fc1.w", linear_weight(rng, inp, hid)),
            params.add("dec.fc1.b", Tensor::zeros(&[hid])),
            params.add("dec.fc2.w", linear_weight(rng, hid, out)),
            params.add("dec.fc2.b", Tensor::zeros(&[out])),
        ];
        Self { params, ids }
    }

    /// Flattened planar reconstruction `[B, c·h·w]`.
    pub fn forward(&self, g: &mut Graph, bound: &Binding, ze: Var, zi: Var) -> crate::tensor::Result<Var> {
        let v = |i: usize| bound.var(self.ids[i]);
        let x = g.concat(&[ze, zi], 1)?;
        let h = g.linear(x, v(0), v(1))?;
        let h = g.relu(h)?;
        let y = g.linear(h, v(2), v(3))?;
        g.sigmoid(y)
    }
}

/// Identity encoder `f_I`: the same trunk shape applied to the I frame.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityEncoder {
    pub params: ParamStore,
    pub dims: IdentityDims,
    trunk: ConvTrunk,
}

impl IdentityEncoder {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dims: IdentityDims) -> Self {
        let mut params = ParamStore::new();
        let trunk = ConvTrunk::init(
            &mut params,
            "id",
            rng,
            dims.channels,
            dims.conv1,
            dims.conv2,
            (dims.height, dims.width),
            dims.d_i,
        );
        Self { params, dims, trunk }
    }

    /// `frames: [B, c, h, w]` → `[B, d_I]`.
    pub fn embed(&self, g: &mut Graph, bound: &Binding, frames: Var) -> crate::tensor::Result<Var> {
        self.trunk.forward(g, bound, frames)
    }

    /// Inference without gradients.
    pub fn embed_tensor(&self, frames: &Tensor) -> crate::tensor::Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let x = g.input(frames.clone());
        let z = self.embed(&mut g, &bound, x)?;
        Ok(g.value(z).clone())
    }
}

/// Everything a trained model needs, frozen parts included.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub dims: ModelDims,
    pub expr: ExpressionNet,
    pub cls: Classifier,
    pub dec: Decoder,
    pub ident: IdentityEncoder,
    pub stat: StatisticsNet,
}

impl ModelBundle {
    /// Fresh trainable parts around a given (pretrained) identity encoder.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dims: ModelDims, ident: IdentityEncoder) -> Result<Self> {
        if ident.dims != dims.identity {
            return Err(FerError::Config(format!(
                "identity encoder is {:?}, model expects {:?}",
                ident.dims, dims.identity
            )));
        }
        Ok(Self {
            expr: ExpressionNet::new(rng, &dims),
            cls: Classifier::new(rng, dims.d_e, dims.n_classes),
            dec: Decoder::new(rng, &dims),
            stat: StatisticsNet::new(rng, dims.d_e, dims.identity.d_i, dims.stat_hidden),
            ident,
            dims,
        })
    }

    /// Named tensors of every part, in a fixed order.
    pub fn records(&self) -> Vec<(&str, &Tensor)> {
        [
            &self.expr.params,
            &self.cls.params,
            &self.dec.params,
            &self.ident.params,
            &self.stat.params,
        ]
        .into_iter()
        .flat_map(|s| s.iter())
        .collect()
    }

    pub fn checksum(&self) -> u64 {
        self.records()
            .iter()
            .fold(0u64, |h, (_, t)| h.rotate_left(5) ^ t.checksum())
    }

    /// Probabilities and `z_E` for a batch of prepared sequences.
    pub fn forward_expression(&self, batch: &[&Prepared]) -> Result<(Tensor, Tensor)> {
        let frames = time_major(batch)?;
        let mut g = Graph::new();
        let eb = self.expr.params.bind(&mut g, false);
        let cb = self.cls.params.bind(&mut g, false);
        let x = g.input(frames);
        let z = self.expr.embed(&mut g, &eb, x, batch.len())?;
        let logits = self.cls.logits(&mut g, &cb, z)?;
        let p = g.softmax(logits)?;
        Ok((g.value(p).clone(), g.value(z).clone()))
    }

    /// Single-sequence convenience wrapper around [`Self::forward_expression`].
    pub fn forward_gop(&self, gop: &Gop) -> Result<(Tensor, Tensor)> {
        let p = Prepared::from_gop(gop, 0, 0, gop.frame_count() - 1, self.dims.with_motion)?;
        self.forward_expression(&[&p])
    }

    /// `z_I` for a batch of I frames.
    pub fn identity_embeddings(&self, batch: &[&Prepared]) -> Result<Tensor> {
        Ok(self.ident.embed_tensor(&i_frames(batch)?)?)
    }
}

/// A sequence converted once into network inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    /// `[T, c_in, h, w]` residual inputs for P frames `1..L`.
    pub frames: Tensor,
    /// The I frame as a planar `[c, h, w]` tensor in `[0, 1]`.
    pub i_frame: Tensor,
    /// Decoded apex frame, planar and scaled to `[0, 1]`.
    pub apex: Tensor,
    pub label: usize,
    pub identity: u32,
}

impl Prepared {
    pub fn from_gop(gop: &Gop, label: usize, identity: u32, apex_idx: usize, with_motion: bool) -> Result<Self> {
        if gop.p_frames.is_empty() {
            return Err(FerError::Batch("sequence has no P frames".into()));
        }
        let steps: Vec<Tensor> = (1..gop.frame_count())
            .map(|t| residual_input(gop, t, with_motion))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            frames: Tensor::stack(&steps)?,
            i_frame: gop.i_frame.to_unit_tensor(),
            apex: crate::codec::accumulate_to_apex(gop, apex_idx)?.to_unit_tensor(),
            label,
            identity,
        })
    }

    pub fn from_loaded(seq: &LoadedSequence, with_motion: bool) -> Result<Self> {
        Self::from_gop(
            &seq.gop,
            seq.entry.expression_label,
            seq.entry.identity_label,
            seq.entry.apex_idx,
            with_motion,
        )
    }

    pub fn steps(&self) -> usize {
        self.frames.shape()[0]
    }
}

pub fn prepare_all(seqs: &[LoadedSequence], with_motion: bool) -> Result<Vec<Prepared>> {
    seqs.iter().map(|s| Prepared::from_loaded(s, with_motion)).collect()
}

/// Interleaves sequences step by step into `[T·B, c, h, w]`.
pub fn time_major(batch: &[&Prepared]) -> Result<Tensor> {
    let first = batch.first().ok_or_else(|| FerError::Batch("empty batch".into()))?;
    let shape = first.frames.shape().to_vec();
    if let Some(bad) = batch.iter().find(|p| p.frames.shape() != shape.as_slice()) {
        return Err(FerError::Batch(format!(
            "sequences of shape {:?} and {:?} in one batch",
            shape,
            bad.frames.shape()
        )));
    }
    let (steps, frame) = (shape[0], first.frames.len() / shape[0]);
    let mut data = Vec::with_capacity(steps * batch.len() * frame);
    for t in 0..steps {
        for p in batch {
            data.extend_from_slice(&p.frames.data()[t * frame..(t + 1) * frame]);
        }
    }
    let mut out_shape = vec![steps * batch.len()];
    out_shape.extend_from_slice(&shape[1..]);
    Ok(Tensor::from_vec(out_shape, data)?)
}

pub fn i_frames(batch: &[&Prepared]) -> Result<Tensor> {
    let items: Vec<Tensor> = batch.iter().map(|p| p.i_frame.clone()).collect();
    Ok(Tensor::stack(&items)?)
}

pub fn apex_targets(batch: &[&Prepared]) -> Result<Tensor> {
    let rows: Vec<f64> = batch.iter().flat_map(|p| p.apex.data().iter().copied()).collect();
    let len = batch.first().map_or(0, |p| p.apex.len());
    Ok(Tensor::from_vec(vec![batch.len(), len], rows)?)
}

/// `mean_b -ln max(p[b, y_b], 1e-12)` over a `[B, C]` probability batch.
pub fn loss_cross_entropy(g: &mut Graph, probs: Var, labels: &[usize]) -> crate::tensor::Result<Var> {
    let shape = g.value(probs).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(TensorError::InvalidArgument(format!(
            "cross entropy: probabilities {shape:?} for {} labels",
            labels.len()
        )));
    }
    let classes = shape[1];
    let mut onehot = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(TensorError::InvalidArgument(format!("label {y} for {classes} classes")));
        }
        onehot[i * classes + y] = 1.0;
    }
    let mask = g.input(Tensor::from_vec(shape, onehot)?);
    let picked = g.mul(probs, mask)?;
    let py = g.sum_axis(picked, 1)?;
    let py = g.clamp_min(py, 1e-12)?;
    let logp = g.log(py)?;
    let mean = g.mean(logp)?;
    g.scale(mean, -1.0)
}

/// Mean squared error between a reconstruction and its target.
pub fn loss_reconstruction(g: &mut Graph, output: Var, target: Var) -> crate::tensor::Result<Var> {
    let (a, b) = (g.value(output).shape().to_vec(), g.value(target).shape().to_vec());
    if a != b {
        return Err(TensorError::ShapeMismatch {
            primitive: "loss_reconstruction".into(),
            detail: format!("{a:?} vs {b:?}"),
        });
    }
    let n = g.value(output).len() as f64;
    let d = g.sub(output, target)?;
    let s = g.squared_norm(d)?;
    g.scale(s, 1.0 / n)
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Predicted classes for `data` in chunks of `chunk`, plus the seconds
/// spent inside [`ModelBundle::forward_expression`].
pub fn predict(bundle: &ModelBundle, data: &[Prepared], chunk: usize) -> Result<(Vec<usize>, f64)> {
    let mut preds = Vec::with_capacity(data.len());
    let mut seconds = 0.0;
    for part in data.chunks(chunk.max(1)) {
        let refs: Vec<&Prepared> = part.iter().collect();
        let start = Instant::now();
        let (p, _) = bundle.forward_expression(&refs)?;
        seconds += start.elapsed().as_secs_f64();
        preds.extend((0..part.len()).map(|i| argmax(p.row(i))));
    }
    Ok((preds, seconds))
}

/// `z_E` and `z_I` rows for every sequence of `data`.
pub fn embeddings(bundle: &ModelBundle, data: &[Prepared], chunk: usize) -> Result<(Tensor, Tensor)> {
    let mut ze = Vec::new();
    let mut zi = Vec::new();
    for part in data.chunks(chunk.max(1)) {
        let refs: Vec<&Prepared> = part.iter().collect();
        let (_, z) = bundle.forward_expression(&refs)?;
        ze.extend_from_slice(z.data());
        zi.extend_from_slice(bundle.identity_embeddings(&refs)?.data());
    }
    let n = data.len();
    Ok((
        Tensor::from_vec(vec![n, bundle.dims.d_e], ze)?,
        Tensor::from_vec(vec![n, bundle.dims.identity.d_i], zi)?,
    ))
}
