//! One-layer LSTM encoder–decoder over soft token rows.
//!
//! Inputs are relaxed sequences: every position is a V-dimensional row on the
//! simplex (or the zero vector), embedded as `rowᵀ · E`. For one-hot rows
//! this is an ordinary embedding lookup, so hard training is the special
//! case of soft training where every row is one-hot.
//!
//! Batches are processed position-major. Each encoder position carries a
//! per-example weight `w`: the state update is `w·new + (1−w)·old`, so
//! batch padding (`w = 0`) leaves the state untouched and a real position
//! (`w = 1`) is a plain LSTM step.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::mixer::{MixedExample, SequencePair, SoftRow, SoftSequence, TokenId};
use crate::numkit::{grad_check_many, log_softmax_plain, matmul_plain, NodeId, Tape, Tensor};
use crate::sampling::RngStream;

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub hidden: usize,
    pub embed: usize,
    pub attention: bool,
    pub tie_embeddings: bool,
}

impl ModelDims {
    pub fn new(vocab: usize, hidden: usize, embed: usize) -> Self {
        ModelDims {
            vocab,
            hidden,
            embed,
            attention: false,
            tie_embeddings: true,
        }
    }

    pub fn with_attention(mut self, on: bool) -> Self {
        self.attention = on;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// e×4h input weights, gate blocks ordered (input, forget, cell, output).
    pub w_x: Tensor,
    /// h×4h recurrent weights.
    pub w_h: Tensor,
    /// 4h bias.
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_h: Tensor,
    pub w_c: Tensor,
}

/// All learnable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub embedding: Tensor,
    /// Separate target embedding when embeddings are untied.
    pub tgt_embedding: Option<Tensor>,
    pub encoder: LstmParams,
    pub decoder: LstmParams,
    pub attention: Option<AttentionParams>,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

const INIT_SCALE: f64 = 0.08;
const FORGET_BIAS: f64 = 1.0;

fn uniform(shape: &[usize], scale: f64, rng: &mut RngStream) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.uniform(-scale, scale);
    }
    t
}

fn lstm_bias(hidden: usize) -> Tensor {
    let mut b = Tensor::zeros(&[4 * hidden]);
    for v in &mut b.data_mut()[hidden..2 * hidden] {
        *v = FORGET_BIAS;
    }
    b
}

impl ModelParams {
    /// Uniform(−0.08, 0.08) weights, zero biases, forget-gate bias +1.
    pub fn init(dims: ModelDims, rng: &mut RngStream) -> Self {
        Self::init_scaled(dims, INIT_SCALE, rng)
    }

    pub fn init_scaled(dims: ModelDims, scale: f64, rng: &mut RngStream) -> Self {
        let (v, h, e) = (dims.vocab, dims.hidden, dims.embed);
        let lstm = |rng: &mut RngStream| LstmParams {
            w_x: uniform(&[e, 4 * h], scale, rng),
            w_h: uniform(&[h, 4 * h], scale, rng),
            b: lstm_bias(h),
        };
        let embedding = uniform(&[v, e], scale, rng);
        let tgt_embedding = (!dims.tie_embeddings).then(|| uniform(&[v, e], scale, rng));
        let encoder = lstm(rng);
        let decoder = lstm(rng);
        let attention = dims.attention.then(|| AttentionParams {
            w_h: uniform(&[h, h], scale, rng),
            w_c: uniform(&[h, h], scale, rng),
        });
        ModelParams {
            dims,
            embedding,
            tgt_embedding,
            encoder,
            decoder,
            attention,
            out_w: uniform(&[h, v], scale, rng),
            out_b: Tensor::zeros(&[v]),
        }
    }

    /// Every tensor set to zero (biases included).
    pub fn zeros(dims: ModelDims) -> Self {
        let mut p = Self::init(dims, &mut RngStream::new(0));
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        p
    }

    /// Parameter names in checkpoint order.
    pub fn names(&self) -> Vec<&'static str> {
        let mut names = vec!["embedding"];
        if self.tgt_embedding.is_some() {
            names.push("tgt_embedding");
        }
        names.extend(["enc_w_x", "enc_w_h", "enc_b", "dec_w_x", "dec_w_h", "dec_b"]);
        if self.attention.is_some() {
            names.extend(["att_w_h", "att_w_c"]);
        }
        names.extend(["out_w", "out_b"]);
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embedding];
        out.extend(self.tgt_embedding.as_ref());
        for l in [&self.encoder, &self.decoder] {
            out.extend([&l.w_x, &l.w_h, &l.b]);
        }
        if let Some(a) = &self.attention {
            out.extend([&a.w_h, &a.w_c]);
        }
        out.extend([&self.out_w, &self.out_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        out.extend(self.tgt_embedding.as_mut());
        for l in [&mut self.encoder, &mut self.decoder] {
            out.extend([&mut l.w_x, &mut l.w_h, &mut l.b]);
        }
        if let Some(a) = &mut self.attention {
            out.extend([&mut a.w_h, &mut a.w_c]);
        }
        out.extend([&mut self.out_w, &mut self.out_b]);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Registers every tensor on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ParamNodes {
        let ids: Vec<NodeId> = self
            .tensors()
            .into_iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        ParamNodes::from_ids(self.dims, &ids, self.tgt_embedding.is_some())
    }

    /// Reads tape nodes given in [`ModelParams::tensors`] order as this
    /// model's parameters.
    pub fn nodes_from(&self, ids: &[NodeId]) -> ParamNodes {
        ParamNodes::from_ids(self.dims, ids, self.tgt_embedding.is_some())
    }

    fn header(&self) -> String {
        let d = self.dims;
        let shapes: Vec<String> = self
            .names()
            .iter()
            .zip(self.tensors())
            .map(|(n, t)| {
                let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
                format!("{n}:{}", dims.join("x"))
            })
            .collect();
        format!(
            "seqmix-checkpoint v1 vocab={} hidden={} embed={} attention={} tied={} params={}",
            d.vocab,
            d.hidden,
            d.embed,
            d.attention,
            d.tie_embeddings,
            shapes.join(",")
        )
    }

    /// Header line, then every parameter as little-endian `f64` in order.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = self.header().into_bytes();
        out.push(b'\n');
        for t in self.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header line"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not UTF-8"))?;
        let mut fields = header.split(' ');
        if fields.next() != Some("seqmix-checkpoint") || fields.next() != Some("v1") {
            return Err(bad("unrecognized header"));
        }
        let mut kv = std::collections::HashMap::new();
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| bad("malformed header field"))?;
            kv.insert(k, v);
        }
        let num = |k: &str| -> Result<usize> {
            kv.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| bad(&format!("missing {k}")))
        };
        let flag = |k: &str| -> Result<bool> {
            kv.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| bad(&format!("missing {k}")))
        };
        let dims = ModelDims {
            vocab: num("vocab")?,
            hidden: num("hidden")?,
            embed: num("embed")?,
            attention: flag("attention")?,
            tie_embeddings: flag("tied")?,
        };
        let mut params = ModelParams::zeros(dims);
        if params.header() != header {
            return Err(bad("parameter list does not match the declared dimensions"));
        }
        let body = &bytes[nl + 1..];
        if body.len() != params.num_scalars() * 8 {
            return Err(bad(&format!(
                "expected {} bytes of parameters, found {}",
                params.num_scalars() * 8,
                body.len()
            )));
        }
        let mut chunks = body.chunks_exact(8);
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                let c = chunks.next().expect("length checked");
                *v = f64::from_le_bytes(c.try_into().expect("chunk of 8"));
            }
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmNodes {
    pub w_x: NodeId,
    pub w_h: NodeId,
    pub b: NodeId,
}

/// [`ModelParams`] registered on a tape.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub dims: ModelDims,
    pub embedding: NodeId,
    pub tgt_embedding: NodeId,
    pub encoder: LstmNodes,
    pub decoder: LstmNodes,
    pub attention: Option<(NodeId, NodeId)>,
    pub out_w: NodeId,
    pub out_b: NodeId,
    /// Same order as [`ModelParams::tensors`].
    pub ordered: Vec<NodeId>,
}

impl ParamNodes {
    fn from_ids(dims: ModelDims, ids: &[NodeId], untied: bool) -> Self {
        let mut it = ids.iter().copied();
        let mut next = || it.next().expect("parameter count");
        let embedding = next();
        let tgt_embedding = if untied { next() } else { embedding };
        let encoder = LstmNodes { w_x: next(), w_h: next(), b: next() };
        let decoder = LstmNodes { w_x: next(), w_h: next(), b: next() };
        let attention = dims.attention.then(|| (next(), next()));
        ParamNodes {
            dims,
            embedding,
            tgt_embedding,
            encoder,
            decoder,
            attention,
            out_w: next(),
            out_b: next(),
            ordered: ids.to_vec(),
        }
    }
}

/// Hidden and cell vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

/// Loss weights per aligned position.
///
/// Weight 1 where both parents have a real token, λ (resp. 1−λ) where only
/// the parent (resp. the partner) does, 0 past both.
pub fn position_weights(len_parent: usize, len_partner: usize, aligned: usize, lambda: f64) -> Vec<f64> {
    (0..aligned)
        .map(|i| match (i < len_parent, i < len_partner) {
            (true, true) => 1.0,
            (true, false) => lambda,
            (false, true) => 1.0 - lambda,
            (false, false) => 0.0,
        })
        .collect()
}

/// Dense, position-major tensors for one minibatch.
#[derive(Clone, Debug)]
pub struct BatchInput {
    pub batch: usize,
    /// `S·B × V`, row `j·B + b` is source position j of example b.
    pub source: Tensor,
    /// S entries of B weights.
    pub source_weights: Vec<Vec<f64>>,
    /// `(T−1)·B × V` decoder inputs (target positions 0..T−1).
    pub decoder_inputs: Tensor,
    /// `(T−1)·B × V` weighted soft targets (target positions 1..T).
    pub targets: Tensor,
}

impl BatchInput {
    pub fn source_len(&self) -> usize {
        self.source_weights.len()
    }

    pub fn steps(&self) -> usize {
        self.decoder_inputs.dims2().0 / self.batch.max(1)
    }

    pub fn from_examples(examples: &[MixedExample], vocab: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let b = examples.len();
        let s_max = examples.iter().map(|e| e.soft_source.len()).max().unwrap_or(0);
        let t_max = examples.iter().map(|e| e.soft_target.len()).max().unwrap_or(0);
        if s_max == 0 {
            return Err(Error::Contract("empty source sequence".into()));
        }
        if t_max < 2 {
            return Err(Error::Contract("target needs at least BOS and one more position".into()));
        }
        let mut source = Tensor::zeros(&[s_max * b, vocab]);
        let mut source_weights = vec![vec![0.0; b]; s_max];
        let mut decoder_inputs = Tensor::zeros(&[(t_max - 1) * b, vocab]);
        let mut targets = Tensor::zeros(&[(t_max - 1) * b, vocab]);
        for (k, ex) in examples.iter().enumerate() {
            if ex.soft_source.is_empty() {
                return Err(Error::Contract(format!("example {k} has an empty source")));
            }
            let sw = position_weights(ex.source_lengths.0, ex.source_lengths.1, ex.soft_source.len(), ex.lambda);
            let tw = position_weights(ex.target_lengths.0, ex.target_lengths.1, ex.soft_target.len(), ex.lambda);
            for (j, row) in ex.soft_source.rows.iter().enumerate() {
                let r = j * b + k;
                check_row(row, vocab)?;
                row.write_dense(&mut source.data_mut()[r * vocab..(r + 1) * vocab]);
                source_weights[j][k] = sw[j];
            }
            let rows = &ex.soft_target.rows;
            for j in 0..rows.len().saturating_sub(1) {
                let r = j * b + k;
                check_row(&rows[j], vocab)?;
                check_row(&rows[j + 1], vocab)?;
                rows[j].write_dense(&mut decoder_inputs.data_mut()[r * vocab..(r + 1) * vocab]);
                let w = tw[j + 1];
                let out = &mut targets.data_mut()[r * vocab..(r + 1) * vocab];
                for &(t, p) in &rows[j + 1].entries {
                    out[t] += w * p;
                }
            }
        }
        Ok(BatchInput {
            batch: b,
            source,
            source_weights,
            decoder_inputs,
            targets,
        })
    }
}

fn check_row(row: &SoftRow, vocab: usize) -> Result<()> {
    match row.entries.iter().find(|(t, _)| *t >= vocab) {
        Some((t, _)) => Err(Error::Contract(format!("token id {t} outside vocabulary of {vocab}"))),
        None => Ok(()),
    }
}

/// Encoder outputs on the tape.
pub struct EncoderOutput {
    pub hidden: NodeId,
    pub cell: NodeId,
    /// Per-position gated hidden states (B×h each).
    pub states: Vec<NodeId>,
    pub weights: Vec<Vec<f64>>,
}

/// One LSTM cell given the precomputed input projection `x·W_x + b`.
fn lstm_cell(tape: &mut Tape, xw: NodeId, h: NodeId, c: NodeId, w_h: NodeId, hidden: usize) -> Result<(NodeId, NodeId)> {
    let hw = tape.matmul(h, w_h)?;
    let z = tape.add(xw, hw)?;
    let i = tape.slice_cols(z, 0, hidden)?;
    let f = tape.slice_cols(z, hidden, hidden)?;
    let g = tape.slice_cols(z, 2 * hidden, hidden)?;
    let o = tape.slice_cols(z, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let tc = tape.tanh(c_new);
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// `rows · E · W_x + b` for a stack of soft rows.
fn project_inputs(tape: &mut Tape, rows: NodeId, embedding: NodeId, lstm: &LstmNodes) -> Result<NodeId> {
    let emb = tape.matmul(rows, embedding)?;
    let xw = tape.matmul(emb, lstm.w_x)?;
    Ok(tape.add_bias(xw, lstm.b)?)
}

/// Left-to-right encoder over soft rows, from a zero state.
pub fn encode_on_tape(tape: &mut Tape, p: &ParamNodes, source: NodeId, weights: &[Vec<f64>]) -> Result<EncoderOutput> {
    let h_dim = p.dims.hidden;
    let steps = weights.len();
    if steps == 0 {
        return Err(Error::Contract("empty source sequence".into()));
    }
    let b = weights[0].len();
    let xw = project_inputs(tape, source, p.embedding, &p.encoder)?;
    let mut h = tape.constant(Tensor::zeros(&[b, h_dim]));
    let mut c = tape.constant(Tensor::zeros(&[b, h_dim]));
    let mut states = Vec::with_capacity(steps);
    for (j, w) in weights.iter().enumerate() {
        let x = tape.slice_rows(xw, j * b, b)?;
        let (h_new, c_new) = lstm_cell(tape, x, h, c, p.encoder.w_h, h_dim)?;
        h = tape.lerp_rows(h_new, h, w)?;
        c = tape.lerp_rows(c_new, c, w)?;
        states.push(h);
    }
    Ok(EncoderOutput {
        hidden: h,
        cell: c,
        states,
        weights: weights.to_vec(),
    })
}

/// Dot-product attention readout: `tanh(h·W_h + ctx·W_c)`.
fn attend(tape: &mut Tape, p: &ParamNodes, h: NodeId, enc: &EncoderOutput) -> Result<NodeId> {
    let (w_h, w_c) = p.attention.expect("attention parameters");
    let b = tape.shape(h)[0];
    let scores: Vec<NodeId> = enc
        .states
        .iter()
        .map(|&s| tape.row_dot(s, h))
        .collect::<std::result::Result<_, _>>()?;
    let scores = tape.concat_cols(&scores)?;
    let s_len = enc.states.len();
    let mut bias = Tensor::zeros(&[b, s_len]);
    for (j, w) in enc.weights.iter().enumerate() {
        for (k, &wk) in w.iter().enumerate() {
            bias.data_mut()[k * s_len + j] = if wk > 0.0 { wk.ln() } else { -1e30 };
        }
    }
    let bias = tape.constant(bias);
    let scores = tape.add(scores, bias)?;
    let log_probs = tape.log_softmax(scores)?;
    let probs = tape.exp(log_probs);
    let mut ctx: Option<NodeId> = None;
    for (j, &s) in enc.states.iter().enumerate() {
        let pj = tape.slice_cols(probs, j, 1)?;
        let term = tape.scale_rows(s, pj)?;
        ctx = Some(match ctx {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let ctx = ctx.expect("nonempty encoder");
    let a = tape.matmul(h, w_h)?;
    let c = tape.matmul(ctx, w_c)?;
    let z = tape.add(a, c)?;
    Ok(tape.tanh(z))
}

/// One decoder step on the tape; returns (logits, hidden, cell).
pub fn decode_step_on_tape(
    tape: &mut Tape,
    p: &ParamNodes,
    h: NodeId,
    c: NodeId,
    prev_rows: NodeId,
    enc: &EncoderOutput,
) -> Result<(NodeId, NodeId, NodeId)> {
    let xw = project_inputs(tape, prev_rows, p.tgt_embedding, &p.decoder)?;
    let (h, c) = lstm_cell(tape, xw, h, c, p.decoder.w_h, p.dims.hidden)?;
    let out = if p.attention.is_some() { attend(tape, p, h, enc)? } else { h };
    let logits = tape.matmul(out, p.out_w)?;
    let logits = tape.add_bias(logits, p.out_b)?;
    Ok((logits, h, c))
}

/// Teacher-forced decoder over the whole batch; returns `(T−1)·B × V` logits.
pub fn decode_teacher_forced(tape: &mut Tape, p: &ParamNodes, input: &BatchInput, enc: &EncoderOutput) -> Result<NodeId> {
    let b = input.batch;
    let steps = input.steps();
    let inputs = tape.constant(input.decoder_inputs.clone());
    let xw = project_inputs(tape, inputs, p.tgt_embedding, &p.decoder)?;
    let (mut h, mut c) = (enc.hidden, enc.cell);
    let mut outs = Vec::with_capacity(steps);
    for j in 0..steps {
        let x = tape.slice_rows(xw, j * b, b)?;
        let (h2, c2) = lstm_cell(tape, x, h, c, p.decoder.w_h, p.dims.hidden)?;
        h = h2;
        c = c2;
        outs.push(if p.attention.is_some() { attend(tape, p, h, enc)? } else { h });
    }
    let stacked = tape.concat_rows(&outs)?;
    let logits = tape.matmul(stacked, p.out_w)?;
    Ok(tape.add_bias(logits, p.out_b)?)
}

/// `−Σ_rows targets · log_softmax(logits)`, with position weights already
/// folded into `targets`.
pub fn soft_nll_on_tape(tape: &mut Tape, logits: NodeId, weighted_targets: NodeId) -> Result<NodeId> {
    let lsm = tape.log_softmax(logits)?;
    let prod = tape.mul(lsm, weighted_targets)?;
    let total = tape.sum(prod);
    Ok(tape.scale(total, -1.0))
}

/// Summed soft negative log-likelihood of a batch.
pub fn batch_loss_on_tape(tape: &mut Tape, p: &ParamNodes, input: &BatchInput) -> Result<NodeId> {
    let source = tape.constant(input.source.clone());
    let enc = encode_on_tape(tape, p, source, &input.source_weights)?;
    let logits = decode_teacher_forced(tape, p, input, &enc)?;
    let targets = tape.constant(input.targets.clone());
    soft_nll_on_tape(tape, logits, targets)
}

/// Loss value and parameter gradients (in [`ModelParams::tensors`] order).
pub fn loss_and_grads(params: &ModelParams, input: &BatchInput) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, true);
    let loss = batch_loss_on_tape(&mut tape, &p, input)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let g = p
        .ordered
        .iter()
        .zip(params.tensors())
        .map(|(&id, t)| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, g))
}

/// Worst relative error between backpropagated and central-difference
/// gradients of the batch objective, over every parameter.
pub fn grad_check_objective(params: &ModelParams, input: &BatchInput, eps: f64) -> Result<f64> {
    let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    grad_check_many(
        |tape, ids| {
            let p = params.nodes_from(ids);
            batch_loss_on_tape(tape, &p, input)
        },
        &tensors,
        eps,
    )
}

/// Soft embedding of a relaxed sequence: row i is `rowᵢᵀ · E`.
pub fn soft_embed(seq: &SoftSequence, embedding: &Tensor) -> Result<Tensor> {
    let (v, _) = embedding.dims2();
    let rows: Vec<Vec<f64>> = seq
        .rows
        .iter()
        .map(|r| {
            check_row(r, v)?;
            Ok(r.to_dense(v))
        })
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Ok(Tensor::zeros(&[0, embedding.dims2().1]));
    }
    Ok(matmul_plain(&Tensor::from_rows(&rows)?, embedding)?)
}

fn soft_source_input(seq: &SoftSequence, vocab: usize) -> Result<(Tensor, Vec<Vec<f64>>)> {
    if seq.is_empty() {
        return Err(Error::Contract("empty source sequence".into()));
    }
    let rows: Vec<Vec<f64>> = seq
        .rows
        .iter()
        .map(|r| {
            check_row(r, vocab)?;
            Ok(r.to_dense(vocab))
        })
        .collect::<Result<_>>()?;
    Ok((Tensor::from_rows(&rows)?, vec![vec![1.0]; seq.len()]))
}

/// Encoder result for a single sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub state: DecoderState,
    /// Hidden state after every position.
    pub hidden_states: Vec<Vec<f64>>,
}

/// Runs the encoder over one soft source sequence.
pub fn encode(seq: &SoftSequence, params: &ModelParams) -> Result<Encoded> {
    let (rows, weights) = soft_source_input(seq, params.dims.vocab)?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let src = tape.constant(rows);
    let enc = encode_on_tape(&mut tape, &p, src, &weights)?;
    Ok(Encoded {
        state: DecoderState {
            hidden: tape.value(enc.hidden).data().to_vec(),
            cell: tape.value(enc.cell).data().to_vec(),
        },
        hidden_states: enc.states.iter().map(|&s| tape.value(s).data().to_vec()).collect(),
    })
}

/// One decoder step from `state` on the soft previous token.
///
/// `memory` is the encoder result; it is only consulted with attention.
pub fn decode_step(
    state: &DecoderState,
    soft_prev: &[f64],
    params: &ModelParams,
    memory: &Encoded,
) -> Result<(Vec<f64>, DecoderState)> {
    let d = params.dims;
    if soft_prev.len() != d.vocab || state.hidden.len() != d.hidden || state.cell.len() != d.hidden {
        return Err(Error::Contract(format!(
            "decoder step expects a {}-dim token row and {}-dim state",
            d.vocab, d.hidden
        )));
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let h = tape.constant(Tensor::new(vec![1, d.hidden], state.hidden.clone())?);
    let c = tape.constant(Tensor::new(vec![1, d.hidden], state.cell.clone())?);
    let prev = tape.constant(Tensor::new(vec![1, d.vocab], soft_prev.to_vec())?);
    let states = memory
        .hidden_states
        .iter()
        .map(|s| Ok(tape.constant(Tensor::new(vec![1, d.hidden], s.clone())?)))
        .collect::<Result<Vec<_>>>()?;
    let enc = EncoderOutput {
        hidden: h,
        cell: c,
        weights: vec![vec![1.0]; states.len()],
        states,
    };
    let (logits, h2, c2) = decode_step_on_tape(&mut tape, &p, h, c, prev, &enc)?;
    Ok((
        tape.value(logits).data().to_vec(),
        DecoderState {
            hidden: tape.value(h2).data().to_vec(),
            cell: tape.value(c2).data().to_vec(),
        },
    ))
}

/// `−Σ_t w_t · (target_tᵀ · log_softmax(logits_t))` for one sequence.
pub fn soft_nll(soft_targets: &SoftSequence, logit_rows: &Tensor, weights: &[f64]) -> Result<f64> {
    let (rows, vocab) = logit_rows.dims2();
    if rows != soft_targets.len() || weights.len() != rows {
        return Err(Error::Contract(format!(
            "soft_nll: {} target rows, {} logit rows, {} weights",
            soft_targets.len(),
            rows,
            weights.len()
        )));
    }
    let lsm = log_softmax_plain(logit_rows);
    let mut total = 0.0;
    for (t, (row, &w)) in soft_targets.rows.iter().zip(weights).enumerate() {
        check_row(row, vocab)?;
        let dot: f64 = row.entries.iter().map(|&(k, p)| p * lsm.row(t)[k]).sum();
        total += w * dot;
    }
    Ok(-total)
}

/// Per-position log-probabilities of a batch of hard pairs, teacher forced.
/// Position 0 of each target (the start marker) is conditioned on, not scored.
pub fn token_logprobs(pairs: &[SequencePair], params: &ModelParams) -> Result<Vec<Vec<f64>>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let v = params.dims.vocab;
    let examples: Vec<MixedExample> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| MixedExample::identity(p, i, crate::sampling::Method::Baseline))
        .collect();
    let input = BatchInput::from_examples(&examples, v)?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let source = tape.constant(input.source.clone());
    let enc = encode_on_tape(&mut tape, &p, source, &input.source_weights)?;
    let logits = decode_teacher_forced(&mut tape, &p, &input, &enc)?;
    let lsm = log_softmax_plain(tape.value(logits));
    let b = pairs.len();
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(k, pair)| {
            (1..pair.target.len())
                .map(|j| lsm.row((j - 1) * b + k)[pair.target[j]])
                .collect()
        })
        .collect())
}

/// `log p_θ(Y | X)`: teacher-forced sum of token log-probabilities.
pub fn sequence_logprob(pair: &SequencePair, params: &ModelParams) -> Result<f64> {
    Ok(token_logprobs(std::slice::from_ref(pair), params)?[0].iter().sum())
}

/// Batched [`sequence_logprob`].
pub fn sequence_logprobs(pairs: &[SequencePair], params: &ModelParams) -> Result<Vec<f64>> {
    Ok(token_logprobs(pairs, params)?
        .into_iter()
        .map(|lp| lp.iter().sum())
        .collect())
}

/// Largest number of mask positions the exact enumeration accepts.
pub const ENUMERATION_BOUND: usize = 16;

/// Model log-likelihood of the hard mixture for every mask over an aligned
/// pair. Mask bit `i < s` selects source position i from the parent, bit
/// `s + j` target position j.
#[derive(Clone, Debug)]
pub struct MaskEnumeration {
    pub source_len: usize,
    pub target_len: usize,
    /// `log p_θ(Ŷ(m) | X̂(m))` indexed by mask.
    pub log_lik: Vec<f64>,
}

impl MaskEnumeration {
    pub fn positions(&self) -> usize {
        self.source_len + self.target_len
    }

    /// `log p_λ(m)`, −∞ for masks impossible at an endpoint.
    pub fn log_prior(&self, mask: usize, lambda: f64) -> f64 {
        let n = self.positions();
        let kept = mask.count_ones() as usize;
        let swapped = n - kept;
        if (kept > 0 && lambda == 0.0) || (swapped > 0 && lambda == 1.0) {
            return f64::NEG_INFINITY;
        }
        let k = if kept > 0 { kept as f64 * lambda.ln() } else { 0.0 };
        let sw = if swapped > 0 { swapped as f64 * (1.0 - lambda).ln() } else { 0.0 };
        k + sw
    }

    /// `log E_m p_θ(Ŷ|X̂)`: the exact log marginal likelihood.
    pub fn log_marginal(&self, lambda: f64) -> f64 {
        let terms: Vec<f64> = (0..self.log_lik.len())
            .map(|m| self.log_prior(m, lambda))
            .zip(&self.log_lik)
            .filter(|(lp, _)| lp.is_finite())
            .map(|(lp, ll)| lp + ll)
            .collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }

    /// `E_m log p_θ(Ŷ|X̂)`: the hard-mixture training objective.
    pub fn expected_log_lik(&self, lambda: f64) -> f64 {
        (0..self.log_lik.len())
            .map(|m| self.log_prior(m, lambda))
            .zip(&self.log_lik)
            .filter(|(lp, _)| lp.is_finite())
            .map(|(lp, ll)| lp.exp() * ll)
            .sum()
    }

    /// Mask index for explicit source and target keep vectors.
    pub fn index_of(&self, mask_src: &[bool], mask_tgt: &[bool]) -> usize {
        mask_src
            .iter()
            .chain(mask_tgt)
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| 1usize << i)
            .sum()
    }
}

/// Scores all `2^{s+t}` masks of the length-aligned pair in one batch.
pub fn enumerate_masks(a: &SequencePair, b: &SequencePair, params: &ModelParams) -> Result<MaskEnumeration> {
    let (a, b) = crate::mixer::align_lengths(a, b, PAD);
    let (s, t) = a.lengths();
    let n = s + t;
    if n > ENUMERATION_BOUND {
        return Err(Error::TooLarge {
            positions: n,
            bound: ENUMERATION_BOUND,
        });
    }
    let pairs: Vec<SequencePair> = (0..1usize << n)
        .map(|m| {
            let bit = |i: usize| m >> i & 1 == 1;
            let source = (0..s).map(|i| if bit(i) { a.source[i] } else { b.source[i] }).collect();
            let target = (0..t).map(|i| if bit(s + i) { a.target[i] } else { b.target[i] }).collect();
            SequencePair::new(source, target)
        })
        .collect();
    Ok(MaskEnumeration {
        source_len: s,
        target_len: t,
        log_lik: sequence_logprobs(&pairs, params)?,
    })
}

/// Exact `log E_{m∼p_λ} p_θ(Ŷ(m) | X̂(m))` by enumeration. Test oracle.
pub fn log_marginal_bruteforce(a: &SequencePair, b: &SequencePair, lambda: f64, params: &ModelParams) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!("mixing weight {lambda} outside [0, 1]")));
    }
    Ok(enumerate_masks(a, b, params)?.log_marginal(lambda))
}

/// Settings of the enumeration oracle suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub trials: usize,
    pub mc_samples: usize,
    /// Upper bound on aligned `s + t`.
    pub max_positions: usize,
    pub vocab: usize,
    pub hidden: usize,
    pub embed: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            trials: 100,
            mc_samples: 10_000,
            max_positions: 12,
            vocab: 8,
            hidden: 4,
            embed: 3,
            alpha: 1.0,
            seed: 0,
        }
    }
}

/// Per-trial oracle numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleTrial {
    pub trial: usize,
    pub positions: usize,
    pub lambda: f64,
    pub log_marginal: f64,
    pub expected_log_lik: f64,
    pub mc_mean: f64,
    pub mc_se: f64,
    /// Largest endpoint disagreement with the single-parent log-likelihoods.
    pub endpoint_error: f64,
    pub jensen_ok: bool,
    pub mc_ok: bool,
    pub endpoint_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub trials: Vec<OracleTrial>,
}

pub const ORACLE_TSV_HEADER: &str = "trial\tpositions\tlambda\tlog_marginal\texpected_log_lik\tmc_mean\tmc_se\tendpoint_error\tjensen_ok\tmc_ok\tendpoint_ok";

impl OracleReport {
    pub fn jensen_passes(&self) -> usize {
        self.trials.iter().filter(|t| t.jensen_ok).count()
    }

    pub fn mc_passes(&self) -> usize {
        self.trials.iter().filter(|t| t.mc_ok).count()
    }

    pub fn endpoint_passes(&self) -> usize {
        self.trials.iter().filter(|t| t.endpoint_ok).count()
    }

    /// Jensen and endpoints in every trial, Monte Carlo in ≥ 99%.
    pub fn passed(&self) -> bool {
        let n = self.trials.len();
        n > 0 && self.jensen_passes() == n && self.endpoint_passes() == n && 100 * self.mc_passes() >= 99 * n
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(ORACLE_TSV_HEADER);
        out.push('\n');
        for t in &self.trials {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                t.trial,
                t.positions,
                t.lambda,
                t.log_marginal,
                t.expected_log_lik,
                t.mc_mean,
                t.mc_se,
                t.endpoint_error,
                t.jensen_ok,
                t.mc_ok,
                t.endpoint_ok
            ));
        }
        out
    }

    pub fn verdict(&self) -> String {
        let n = self.trials.len();
        format!(
            "{}: jensen {}/{n}, endpoints {}/{n}, monte-carlo {}/{n}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.jensen_passes(),
            self.endpoint_passes(),
            self.mc_passes()
        )
    }
}

fn random_pair(rng: &mut RngStream, vocab: usize, max_src: usize, max_body: usize) -> SequencePair {
    let content = vocab - crate::data::NUM_RESERVED;
    let tok = |rng: &mut RngStream| crate::data::NUM_RESERVED + rng.below(content);
    let s = 1 + rng.below(max_src);
    let body = 1 + rng.below(max_body);
    let source = (0..s).map(|_| tok(rng)).collect();
    let body: Vec<TokenId> = (0..body).map(|_| tok(rng)).collect();
    SequencePair::with_markers(source, &body)
}

/// Runs the Jensen, endpoint and Monte-Carlo checks on random tiny instances.
pub fn run_oracle_check(cfg: &OracleConfig) -> Result<OracleReport> {
    if cfg.max_positions > 12 {
        return Err(Error::TooLarge {
            positions: cfg.max_positions,
            bound: 12,
        });
    }
    if cfg.max_positions < 4 {
        return Err(Error::Parameter("max_positions must be at least 4".into()));
    }
    if cfg.vocab <= crate::data::NUM_RESERVED || cfg.trials == 0 || cfg.mc_samples < 2 {
        return Err(Error::Parameter(
            "oracle check needs a content vocabulary, at least one trial and two samples".into(),
        ));
    }
    let root = RngStream::new(cfg.seed).substream("oracle");
    // Source up to ⌊(n−2)/2⌋ tokens, target body the rest, so s + t + 2 ≤ n.
    let max_src = ((cfg.max_positions - 2) / 2).max(1);
    let max_body = (cfg.max_positions - 2 - max_src).max(1);
    let mut trials = Vec::with_capacity(cfg.trials);
    for trial in 0..cfg.trials {
        let mut rng = root.split(trial as u64);
        let dims = ModelDims::new(cfg.vocab, cfg.hidden, cfg.embed);
        let params = ModelParams::init_scaled(dims, 1.0, &mut rng);
        let a = random_pair(&mut rng, cfg.vocab, max_src, max_body);
        let b = random_pair(&mut rng, cfg.vocab, max_src, max_body);
        let lambda = crate::sampling::sample_lambda_beta(cfg.alpha, &mut rng)?;
        let table = enumerate_masks(&a, &b, &params)?;
        let log_marginal = table.log_marginal(lambda);
        let expected_log_lik = table.expected_log_lik(lambda);

        let (a2, b2) = crate::mixer::align_lengths(&a, &b, PAD);
        let parents = sequence_logprobs(&[a2, b2], &params)?;
        let endpoint_error = [
            table.log_marginal(1.0) - parents[0],
            table.expected_log_lik(1.0) - parents[0],
            table.log_marginal(0.0) - parents[1],
            table.expected_log_lik(0.0) - parents[1],
        ]
        .iter()
        .fold(0.0f64, |m, d| m.max(d.abs()));

        let n = table.positions();
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..cfg.mc_samples {
            let mask = crate::sampling::sample_mask(lambda, n, &mut rng);
            let ll = table.log_lik[table.index_of(&mask, &[])];
            sum += ll;
            sum_sq += ll * ll;
        }
        let k = cfg.mc_samples as f64;
        let mc_mean = sum / k;
        let var = ((sum_sq - k * mc_mean * mc_mean) / (k - 1.0)).max(0.0);
        let mc_se = (var / k).sqrt();
        let mc_ok = if mc_se > 0.0 {
            (mc_mean - expected_log_lik).abs() <= 3.0 * mc_se
        } else {
            (mc_mean - expected_log_lik).abs() <= 1e-9
        };
        trials.push(OracleTrial {
            trial,
            positions: n,
            lambda,
            log_marginal,
            expected_log_lik,
            mc_mean,
            mc_se,
            endpoint_error,
            jensen_ok: expected_log_lik <= log_marginal + 1e-12,
            mc_ok,
            endpoint_ok: endpoint_error <= 1e-9,
        });
    }
    Ok(OracleReport { trials })
}

/// Greedy decoding for a batch of sources. Each output stops before EOS or
/// after `max_len` tokens; ties go to the lower id.
pub fn greedy_decode_batch(sources: &[Vec<TokenId>], params: &ModelParams, max_len: usize) -> Result<Vec<Vec<TokenId>>> {
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let d = params.dims;
    let b = sources.len();
    let s_max = sources.iter().map(Vec::len).max().unwrap_or(0);
    if s_max == 0 || sources.iter().any(Vec::is_empty) {
        return Err(Error::Contract("empty source sequence".into()));
    }
    let mut src = Tensor::zeros(&[s_max * b, d.vocab]);
    let mut weights = vec![vec![0.0; b]; s_max];
    for (k, s) in sources.iter().enumerate() {
        for (j, &tok) in s.iter().enumerate() {
            if tok >= d.vocab {
                return Err(Error::Contract(format!("token id {tok} outside vocabulary of {}", d.vocab)));
            }
            src.data_mut()[(j * b + k) * d.vocab + tok] = 1.0;
            weights[j][k] = 1.0;
        }
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let src = tape.constant(src);
    let enc = encode_on_tape(&mut tape, &p, src, &weights)?;
    let (mut h, mut c) = (enc.hidden, enc.cell);
    let mut prev = vec![BOS; b];
    let mut outputs: Vec<Vec<TokenId>> = vec![Vec::new(); b];
    let mut done = vec![false; b];
    for _ in 0..max_len {
        let mut rows = Tensor::zeros(&[b, d.vocab]);
        for (k, &t) in prev.iter().enumerate() {
            rows.data_mut()[k * d.vocab + t] = 1.0;
        }
        let rows = tape.constant(rows);
        let (logits, h2, c2) = decode_step_on_tape(&mut tape, &p, h, c, rows, &enc)?;
        h = h2;
        c = c2;
        let lv = tape.value(logits);
        for k in 0..b {
            if done[k] {
                continue;
            }
            let tok = argmax(lv.row(k));
            if tok == EOS {
                done[k] = true;
            } else {
                outputs[k].push(tok);
            }
            prev[k] = tok;
        }
        if done.iter().all(|&x| x) {
            break;
        }
    }
    Ok(outputs)
}

/// Greedy decoding of a single source.
pub fn greedy_decode(source: &[TokenId], params: &ModelParams, max_len: usize) -> Result<Vec<TokenId>> {
    Ok(greedy_decode_batch(&[source.to_vec()], params, max_len)?.remove(0))
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixer::{Partner, PartnerKind};
    use crate::sampling::Method;

    fn tiny_dims() -> ModelDims {
        ModelDims::new(7, 4, 3)
    }

    #[test]
    fn position_weight_rule() {
        assert_eq!(position_weights(3, 5, 5, 0.3), vec![1.0, 1.0, 1.0, 0.7, 0.7]);
        assert_eq!(position_weights(4, 2, 4, 0.25), vec![1.0, 1.0, 0.25, 0.25]);
        assert_eq!(position_weights(2, 2, 3, 0.5), vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn soft_embed_cases() {
        let mut rng = RngStream::new(1);
        let p = ModelParams::init_scaled(tiny_dims(), 1.0, &mut rng);
        let e = &p.embedding;
        let seq = SoftSequence {
            rows: vec![
                SoftRow::one_hot(5),
                SoftRow::zero(),
                SoftRow { entries: vec![(4, 0.3), (6, 0.7)] },
            ],
        };
        let out = soft_embed(&seq, e).unwrap();
        assert_eq!(out.row(0), e.row(5));
        assert_eq!(out.row(1), &[0.0; 3]);
        for c in 0..3 {
            let expected = 0.3 * e.row(4)[c] + 0.7 * e.row(6)[c];
            assert!((out.row(2)[c] - expected).abs() < 1e-15);
        }
        let bad = SoftSequence { rows: vec![SoftRow::one_hot(9)] };
        assert!(soft_embed(&bad, e).is_err());
    }

    #[test]
    fn zero_model_has_zero_states_and_bias_logits() {
        let p = ModelParams::zeros(tiny_dims());
        let enc = encode(&SoftSequence::from_tokens(&[4, 5, 6]), &p).unwrap();
        assert!(enc.state.hidden.iter().chain(&enc.state.cell).all(|&v| v == 0.0));
        let mut prev = vec![0.0; 7];
        prev[BOS] = 1.0;
        let (logits, _) = decode_step(&enc.state, &prev, &p, &enc).unwrap();
        assert_eq!(logits, vec![0.0; 7]);
    }

    #[test]
    fn empty_source_is_rejected() {
        let p = ModelParams::zeros(tiny_dims());
        assert!(encode(&SoftSequence::default(), &p).is_err());
    }

    #[test]
    fn pad_tail_does_not_change_prefix_states() {
        let mut rng = RngStream::new(2);
        let p = ModelParams::init_scaled(tiny_dims(), 0.5, &mut rng);
        let a = encode(&SoftSequence::from_tokens(&[4, 5, PAD, PAD]), &p).unwrap();
        let b = encode(&SoftSequence::from_tokens(&[4, 5, PAD, PAD, PAD]), &p).unwrap();
        assert_eq!(a.hidden_states[..2], b.hidden_states[..2]);
    }

    #[test]
    fn soft_nll_cases() {
        let v = 5;
        let uniform = Tensor::zeros(&[2, v]);
        let targets = SoftSequence::from_tokens(&[3, 1]);
        let loss = soft_nll(&targets, &uniform, &[1.0, 1.0]).unwrap();
        assert!((loss - 2.0 * (v as f64).ln()).abs() < 1e-12);

        let logits = Tensor::from_rows(&[vec![0.3, -1.0, 2.0, 0.1, 0.0]]).unwrap();
        let mixed = SoftSequence { rows: vec![SoftRow { entries: vec![(1, 0.3), (2, 0.7)] }] };
        let l1 = soft_nll(&SoftSequence::from_tokens(&[1]), &logits, &[1.0]).unwrap();
        let l2 = soft_nll(&SoftSequence::from_tokens(&[2]), &logits, &[1.0]).unwrap();
        let lm = soft_nll(&mixed, &logits, &[1.0]).unwrap();
        assert!((lm - (0.3 * l1 + 0.7 * l2)).abs() < 1e-12);
        assert!(soft_nll(&mixed, &logits, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn logprob_is_nonpositive_and_length_one_matches_softmax() {
        let mut rng = RngStream::new(3);
        let p = ModelParams::init_scaled(tiny_dims(), 0.5, &mut rng);
        let pair = SequencePair::new(vec![4, 5], vec![BOS, 6]);
        let lp = sequence_logprob(&pair, &p).unwrap();
        assert!(lp <= 0.0);
        let enc = encode(&SoftSequence::from_tokens(&pair.source), &p).unwrap();
        let mut prev = vec![0.0; 7];
        prev[BOS] = 1.0;
        let (logits, _) = decode_step(&enc.state, &prev, &p, &enc).unwrap();
        let lsm = log_softmax_plain(&Tensor::vector(logits));
        assert!((lp - lsm.data()[6]).abs() < 1e-12);
    }

    #[test]
    fn bruteforce_refuses_large_instances() {
        let p = ModelParams::zeros(tiny_dims());
        let a = SequencePair::new(vec![4; 8], vec![BOS, 4, 4, 4, 4, 4, 4, 4, EOS]);
        assert!(matches!(
            log_marginal_bruteforce(&a, &a, 0.5, &p),
            Err(Error::TooLarge { positions: 17, .. })
        ));
    }

    #[test]
    fn bruteforce_endpoints() {
        let mut rng = RngStream::new(4);
        let p = ModelParams::init_scaled(tiny_dims(), 1.0, &mut rng);
        let a = SequencePair::new(vec![4, 5], vec![BOS, 6, EOS]);
        let b = SequencePair::new(vec![6, 4], vec![BOS, 5, EOS]);
        assert_eq!(log_marginal_bruteforce(&a, &b, 1.0, &p).unwrap(), sequence_logprob(&a, &p).unwrap());
        assert_eq!(log_marginal_bruteforce(&a, &b, 0.0, &p).unwrap(), sequence_logprob(&b, &p).unwrap());
    }

    #[test]
    fn greedy_decode_limits_and_bias_shift() {
        let mut rng = RngStream::new(5);
        let p = ModelParams::init_scaled(tiny_dims(), 1.0, &mut rng);
        let out = greedy_decode(&[4, 5], &p, 1).unwrap();
        assert!(out.len() <= 1);
        let mut shifted = p.clone();
        shifted.out_b.data_mut().iter_mut().for_each(|v| *v += 3.0);
        for src in [vec![4], vec![5, 6], vec![6, 6, 4]] {
            assert_eq!(greedy_decode(&src, &p, 6).unwrap(), greedy_decode(&src, &shifted, 6).unwrap());
        }
    }

    #[test]
    fn argmax_prefers_lower_id_on_ties() {
        assert_eq!(argmax(&[0.0, 1.0, 1.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        for attention in [false, true] {
            let mut rng = RngStream::new(6);
            let mut dims = tiny_dims().with_attention(attention);
            dims.tie_embeddings = !attention;
            let p = ModelParams::init(dims, &mut rng);
            let bytes = p.to_checkpoint_bytes();
            let back = ModelParams::from_checkpoint_bytes(&bytes).unwrap();
            assert_eq!(back, p);
            assert_eq!(back.to_checkpoint_bytes(), bytes);
        }
        let p = ModelParams::zeros(tiny_dims());
        let mut bytes = p.to_checkpoint_bytes();
        bytes.pop();
        assert!(ModelParams::from_checkpoint_bytes(&bytes).is_err());
    }

    #[test]
    fn init_scheme() {
        let mut rng = RngStream::new(8);
        let p = ModelParams::init(ModelDims::new(10, 6, 5), &mut rng);
        assert!(p.encoder.w_x.data().iter().all(|v| v.abs() < 0.08));
        let b = p.decoder.b.data();
        assert!(b[..6].iter().all(|&v| v == 0.0));
        assert!(b[6..12].iter().all(|&v| v == 1.0));
        assert!(b[12..].iter().all(|&v| v == 0.0));
        assert!(p.out_b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lambda_one_mix_matches_parent_loss() {
        let mut rng = RngStream::new(9);
        let p = ModelParams::init_scaled(tiny_dims(), 0.5, &mut rng);
        let a = SequencePair::new(vec![4, 5], vec![BOS, 6, EOS]);
        let b = SequencePair::new(vec![6, 4, 5, 6], vec![BOS, 5, 5, 4, EOS]);
        let (a2, b2) = crate::mixer::align_lengths(&a, &b, PAD);
        let partner = Partner { pair: b2, kind: PartnerKind::Example(1) };
        let mixed = crate::mixer::mix_soft(&a2, 0, &partner, 1.0).unwrap();
        let plain = MixedExample::identity(&a, 0, Method::Baseline);
        let lm = loss_and_grads(&p, &BatchInput::from_examples(&[mixed], 7).unwrap()).unwrap();
        let lp = loss_and_grads(&p, &BatchInput::from_examples(&[plain], 7).unwrap()).unwrap();
        assert_eq!(lm.0, lp.0);
        assert_eq!(lm.1, lp.1);
    }
}
