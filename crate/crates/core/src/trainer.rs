//! Optimization loop, evaluation metrics and the multi-method experiment runner.

use std::collections::HashMap;
use std::hash::Hash;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::mixer::{augment_batch, AugmentOptions, MixedExample, PartnerMode, SequencePair, TokenId};
use crate::model::{greedy_decode_batch, loss_and_grads, BatchInput, ModelDims, ModelParams};
use crate::numkit::Tensor;
use crate::sampling::{Method, MethodConfig, RngStream};

/// Training-side hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: MethodConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub hidden: usize,
    pub embed: usize,
    pub attention: bool,
    pub tie_embeddings: bool,
    /// Validation every this many epochs (the last epoch is always evaluated).
    pub eval_every: usize,
    pub partner_mode: PartnerMode,
    /// Augmented copies per original in each batch; 1 replaces in place.
    pub expansion_factor: usize,
    /// Decoding stops after this many tokens.
    pub max_decode_len: usize,
    /// Also compute validation BLEU.
    pub report_bleu: bool,
    /// Record elapsed seconds in metrics (makes logs non-reproducible).
    pub record_wall_clock: bool,
    /// Fix λ for the SeqMix variants instead of sampling it.
    pub force_lambda: Option<f64>,
}

impl TrainConfig {
    pub fn new(method: MethodConfig, seed: u64) -> Self {
        TrainConfig {
            method,
            learning_rate: 3e-3,
            batch_size: 32,
            epochs: 30,
            clip_norm: 5.0,
            seed,
            hidden: 64,
            embed: 32,
            attention: true,
            tie_embeddings: true,
            eval_every: 1,
            partner_mode: PartnerMode::Batch,
            expansion_factor: 1,
            max_decode_len: 64,
            report_bleu: false,
            record_wall_clock: false,
            force_lambda: None,
        }
    }

    pub fn dims(&self, vocab: usize) -> ModelDims {
        ModelDims {
            vocab,
            hidden: self.hidden,
            embed: self.embed,
            attention: self.attention,
            tie_embeddings: self.tie_embeddings,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("eval_every", self.eval_every),
            ("expansion_factor", self.expansion_factor),
            ("max_decode_len", self.max_decode_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("learning_rate", self.learning_rate), ("clip_norm", self.clip_norm)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(l) = self.force_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Parameter(format!("force_lambda {l} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Mean per-example training loss over the epoch.
    pub loss: f64,
    pub exact_match: Option<f64>,
    pub bleu: Option<f64>,
    pub seconds: Option<f64>,
    pub method: String,
    pub seed: u64,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &[&Tensor]) -> Self {
        let zeros = || params.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((p, &g), m), v) in it {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
    norm
}

/// Reference tokens without BOS, EOS and PAD.
pub fn strip_markers(tokens: &[TokenId]) -> Vec<TokenId> {
    tokens
        .iter()
        .copied()
        .filter(|&t| t != BOS && t != EOS && t != PAD)
        .collect()
}

const EVAL_CHUNK: usize = 256;

/// Greedy decodes of every source, stripped of markers.
pub fn decode_all(params: &ModelParams, data: &[SequencePair], max_len: usize) -> Result<Vec<Vec<TokenId>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_CHUNK) {
        let sources: Vec<Vec<TokenId>> = chunk.iter().map(|p| p.source.clone()).collect();
        out.extend(greedy_decode_batch(&sources, params, max_len)?.iter().map(|h| strip_markers(h)));
    }
    Ok(out)
}

/// Fraction of hypotheses equal to their reference after marker stripping.
/// An empty list scores 0.
pub fn exact_match(hypotheses: &[Vec<TokenId>], references: &[Vec<TokenId>]) -> f64 {
    if references.is_empty() {
        return 0.0;
    }
    let hits = hypotheses
        .iter()
        .zip(references)
        .filter(|(h, r)| strip_markers(h) == strip_markers(r))
        .count();
    hits as f64 / references.len() as f64
}

/// Greedy-decode exact-match accuracy over `data`.
pub fn evaluate_exact_match(params: &ModelParams, data: &[SequencePair], max_len: usize) -> Result<f64> {
    let hyps = decode_all(params, data, max_len)?;
    let refs: Vec<Vec<TokenId>> = data.iter().map(|p| p.target.clone()).collect();
    Ok(exact_match(&hyps, &refs))
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 with add-one smoothing of zero matches for n ≥ 2.
pub fn evaluate_bleu<T: Eq + Hash + Clone>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Parameter("BLEU needs at least one hypothesis".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Parameter(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (gram, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..4 {
        let p = if matches[n] == 0 {
            1.0 / (totals[n] as f64 + 1.0)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_p += p.ln() / 4.0;
    }
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).exp().min(1.0);
    Ok(bp * log_p.exp())
}

/// Named random streams for one run; augmentation never perturbs the others.
#[derive(Clone, Debug)]
pub struct RunStreams {
    pub init: RngStream,
    pub shuffle: RngStream,
    pub augment: RngStream,
    pub data: RngStream,
}

impl RunStreams {
    pub fn new(seed: u64) -> Self {
        let root = RngStream::new(seed);
        RunStreams {
            init: root.substream("init"),
            shuffle: root.substream("shuffle"),
            augment: root.substream("augment"),
            data: root.substream("data"),
        }
    }
}

/// Builds the (possibly augmented) examples of one batch.
fn batch_examples(
    cfg: &TrainConfig,
    batch: &[(usize, &SequencePair)],
    dataset: &[SequencePair],
    vocab: usize,
    rng: &mut RngStream,
) -> Result<Vec<MixedExample>> {
    if cfg.method.method == Method::Baseline {
        return Ok(batch
            .iter()
            .map(|&(i, p)| MixedExample::identity(p, i, Method::Baseline))
            .collect());
    }
    let opts = AugmentOptions {
        partner_mode: cfg.partner_mode,
        force_lambda: cfg.force_lambda,
    };
    let mut out = Vec::with_capacity(batch.len() * cfg.expansion_factor);
    if cfg.expansion_factor > 1 {
        out.extend(batch.iter().map(|&(i, p)| MixedExample::identity(p, i, cfg.method.method)));
        for _ in 1..cfg.expansion_factor {
            out.extend(augment_batch(&cfg.method, batch, dataset, vocab, opts, rng)?);
        }
    } else {
        out = augment_batch(&cfg.method, batch, dataset, vocab, opts, rng)?;
    }
    Ok(out)
}

/// Evaluation set and what to compute on it.
pub struct Validation<'a> {
    pub data: &'a [SequencePair],
}

/// Trains `params` in place and returns one record per epoch.
///
/// `on_record` sees every record as soon as it is produced.
pub fn train(
    params: &mut ModelParams,
    data: &[SequencePair],
    vocab: usize,
    cfg: &TrainConfig,
    valid: Option<Validation<'_>>,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("training set".into()));
    }
    for (i, p) in data.iter().enumerate() {
        p.validate(vocab)
            .map_err(|e| Error::Contract(format!("training example {i}: {e}")))?;
    }
    let streams = RunStreams::new(cfg.seed);
    let mut augment_rng = streams.augment.clone();
    let mut adam = Adam::new(cfg.learning_rate, &params.tensors());
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        streams.shuffle.split(epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            step += 1;
            let batch: Vec<(usize, &SequencePair)> = chunk.iter().map(|&i| (i, &data[i])).collect();
            let examples = batch_examples(cfg, &batch, data, vocab, &mut augment_rng)?;
            let input = BatchInput::from_examples(&examples, vocab)?;
            let (loss, mut grads) = loss_and_grads(params, &input)?;
            let n = examples.len() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    value: loss,
                    epoch,
                    step,
                    batch: b,
                });
            }
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|v| *v /= n);
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam.step(&mut params.tensors_mut(), &grads);
            loss_sum += loss;
            seen += examples.len();
        }
        let evaluate = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        let (exact, bleu) = match (&valid, evaluate) {
            (Some(v), true) => {
                let hyps = decode_all(params, v.data, cfg.max_decode_len)?;
                let refs: Vec<Vec<TokenId>> = v.data.iter().map(|p| strip_markers(&p.target)).collect();
                let bleu = if cfg.report_bleu && !refs.is_empty() {
                    Some(evaluate_bleu(&hyps, &refs)?)
                } else {
                    None
                };
                (Some(exact_match(&hyps, &refs)), bleu)
            }
            _ => (None, None),
        };
        let record = MetricsRecord {
            epoch,
            loss: loss_sum / seen as f64,
            exact_match: exact,
            bleu,
            seconds: cfg.record_wall_clock.then(|| start.elapsed().as_secs_f64()),
            method: cfg.method.method.key().to_string(),
            seed: cfg.seed,
        };
        log::debug!("{} seed {} epoch {epoch}: loss {:.5}", record.method, cfg.seed, record.loss);
        on_record(&record);
        records.push(record);
    }
    Ok(records)
}

/// Fresh parameters for `cfg` drawn from the run's init stream.
pub fn init_params(cfg: &TrainConfig, vocab: usize) -> ModelParams {
    ModelParams::init(cfg.dims(vocab), &mut RunStreams::new(cfg.seed).init)
}

/// Shared data for every experiment cell.
pub struct ExperimentData {
    pub train: Vec<SequencePair>,
    pub valid: Vec<SequencePair>,
    pub test: Vec<SequencePair>,
    pub vocab: usize,
}

/// Outcome of one (method, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    pub test_exact_match: Option<f64>,
    pub test_bleu: Option<f64>,
    /// Error message when the cell aborted.
    pub failure: Option<String>,
}

/// Aggregated exact-match for one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub cells: usize,
    pub failed: usize,
    pub median: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub median_bleu: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub cells: Vec<CellResult>,
    pub summary: Vec<MethodSummary>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn run_cell(cfg: &TrainConfig, data: &ExperimentData) -> CellResult {
    let mut result = CellResult {
        method: cfg.method.method,
        seed: cfg.seed,
        records: Vec::new(),
        test_exact_match: None,
        test_bleu: None,
        failure: None,
    };
    let mut params = init_params(cfg, data.vocab);
    let valid = (!data.valid.is_empty()).then_some(Validation { data: &data.valid });
    let outcome = train(&mut params, &data.train, data.vocab, cfg, valid, |_| {}).and_then(|records| {
        result.records = records;
        let hyps = decode_all(&params, &data.test, cfg.max_decode_len)?;
        let refs: Vec<Vec<TokenId>> = data.test.iter().map(|p| strip_markers(&p.target)).collect();
        result.test_exact_match = Some(exact_match(&hyps, &refs));
        if cfg.report_bleu && !refs.is_empty() {
            result.test_bleu = Some(evaluate_bleu(&hyps, &refs)?);
        }
        Ok(())
    });
    if let Err(e) = outcome {
        log::error!("cell {} seed {} failed: {e}", cfg.method.method.key(), cfg.seed);
        result.failure = Some(e.to_string());
    }
    result
}

/// Worker count: `SEQMIX_THREADS` if set, else the available parallelism.
pub fn thread_budget() -> usize {
    std::env::var("SEQMIX_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains every cell (in parallel), then aggregates per method in the
/// canonical method order. A failed cell is reported, not propagated.
pub fn run_experiment(cells: &[TrainConfig], data: &ExperimentData) -> Result<ExperimentReport> {
    for c in cells {
        c.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_budget())
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    let results: Vec<CellResult> = pool.install(|| cells.par_iter().map(|c| run_cell(c, data)).collect());
    let summary = Method::ALL
        .iter()
        .filter(|m| results.iter().any(|r| r.method == **m))
        .map(|&method| {
            let rows: Vec<&CellResult> = results.iter().filter(|r| r.method == method).collect();
            let ems: Vec<f64> = rows.iter().filter_map(|r| r.test_exact_match).collect();
            let bleus: Vec<f64> = rows.iter().filter_map(|r| r.test_bleu).collect();
            MethodSummary {
                method,
                cells: rows.len(),
                failed: rows.iter().filter(|r| r.failure.is_some()).count(),
                median: median(&ems),
                min: ems.iter().copied().reduce(f64::min),
                max: ems.iter().copied().reduce(f64::max),
                median_bleu: median(&bleus),
            }
        })
        .collect();
    Ok(ExperimentReport { cells: results, summary })
}

pub const REPORT_HEADER: &str = "method\tcells\tfailed\tmedian_exact_match\tmin_exact_match\tmax_exact_match\tmedian_bleu";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl ExperimentReport {
    pub fn summary_for(&self, method: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    /// Tab-separated table with [`REPORT_HEADER`].
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for s in &self.summary {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                s.method.key(),
                s.cells,
                s.failed,
                opt(s.median),
                opt(s.min),
                opt(s.max),
                opt(s.median_bleu)
            ));
        }
        out
    }

    /// Human-readable rendering in percent.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x));
        let mut out = format!("{:<14} {:>8} {:>8} {:>8}  {}\n", "Method", "median", "min", "max", "cells");
        for s in &self.summary {
            let cells = if s.failed > 0 {
                format!("{} ({} failed)", s.cells, s.failed)
            } else {
                s.cells.to_string()
            };
            out.push_str(&format!(
                "{:<14} {:>8} {:>8} {:>8}  {}\n",
                s.method.display_name(),
                pct(s.median),
                pct(s.min),
                pct(s.max),
                cells
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_cases() {
        let r = vec!["a", "b", "c", "d", "e"];
        assert!((evaluate_bleu(&[r.clone()], &[r.clone()]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(evaluate_bleu(&[vec!["x", "y"]], &[r.clone()]).unwrap(), 0.0);
        let short = vec!["a", "b", "c", "d"];
        let long = vec!["a", "b", "c", "d", "e", "f", "g", "h"];
        let bleu = evaluate_bleu(&[short], &[long]).unwrap();
        assert!((bleu - 0.36787944117144233).abs() < 1e-6);
        assert!(evaluate_bleu::<&str>(&[], &[]).is_err());
        assert!(evaluate_bleu(&[vec!["a"]], &[]).is_err());
    }

    #[test]
    fn bleu_smoothing_of_missing_higher_orders() {
        // 2 of 3 unigrams, 0 of 2 bigrams: p = (2/3, 1/3, 1/2, 1), BP = 1.
        let bleu = evaluate_bleu(&[vec![1, 9, 2]], &[vec![1, 2, 3]]).unwrap();
        let expected = (((2.0f64 / 3.0).ln() + (1.0f64 / 3.0).ln() + 0.5f64.ln()) / 4.0).exp();
        assert!((bleu - expected).abs() < 1e-12);
    }

    #[test]
    fn exact_match_edge_cases() {
        let refs = vec![vec![BOS, 5, 6, EOS], vec![BOS, 7, EOS, PAD]];
        assert_eq!(exact_match(&[vec![5, 6], vec![7]], &refs), 1.0);
        assert_eq!(exact_match(&[vec![], vec![7, PAD]], &refs), 0.5);
        assert_eq!(exact_match(&[], &[]), 0.0);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // f(x) = ½‖x‖², gradient x; first bias-corrected step moves each
        // coordinate by lr·g/(|g| + ε).
        let x0 = Tensor::vector(vec![1.5, -0.25, 3.0]);
        let mut x = x0.clone();
        let mut adam = Adam::new(0.01, &[&x]);
        let g = x.clone();
        adam.step(&mut [&mut x], &[g.clone()]);
        for i in 0..3 {
            let gi = g.data()[i];
            let expected = x0.data()[i] - 0.01 * gi / (gi.abs() + 1e-8);
            assert!((x.data()[i] - expected).abs() < 1e-12);
        }
        // Second step on the same bowl, unrolled by hand.
        let g2 = x.clone();
        let before = x.clone();
        adam.step(&mut [&mut x], &[g2.clone()]);
        for i in 0..3 {
            let (a, b) = (g.data()[i], g2.data()[i]);
            let m = 0.9 * (0.1 * a) + 0.1 * b;
            let v = 0.999 * (0.001 * a * a) + 0.001 * b * b;
            let m_hat = m / (1.0 - 0.81);
            let v_hat = v / (1.0 - 0.998001);
            let expected = before.data()[i] - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((x.data()[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::vector(vec![3.0, 4.0]), Tensor::vector(vec![12.0])];
        let pre = clip_global_norm(&mut g, 5.0);
        assert_eq!(pre, 13.0);
        assert!(global_norm(&g) <= 5.0 + 1e-9);
        let mut small = vec![Tensor::vector(vec![0.3, 0.4])];
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small[0].data(), &[0.3, 0.4]);
    }

    #[test]
    fn median_and_report() {
        assert_eq!(median(&[0.3, 0.1, 0.2]), Some(0.2));
        assert_eq!(median(&[0.4, 0.1]), Some(0.25));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(MethodConfig::new(Method::Seqmix), 1);
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(MethodConfig::new(Method::Seqmix), 1);
        c.learning_rate = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn metrics_line_round_trips() {
        let r = MetricsRecord {
            epoch: 3,
            loss: 0.1 + 0.2,
            exact_match: Some(1.0 / 3.0),
            bleu: None,
            seconds: None,
            method: "seqmix".into(),
            seed: 7,
        };
        let line = r.to_json_line();
        assert_eq!(serde_json::from_str::<MetricsRecord>(&line).unwrap(), r);
        for key in ["epoch", "loss", "exact_match", "bleu", "seconds", "method", "seed"] {
            assert!(line.contains(&format!("\"{key}\"")));
        }
    }
}
