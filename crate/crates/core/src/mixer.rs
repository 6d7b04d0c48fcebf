//! Construction of augmented training examples.
//!
//! Every method is expressed as a mix of a parent pair `a` with a partner
//! drawn from some distribution `D′`: another training pair (SeqMix), random
//! vocabulary tokens (SwitchOut) or zero vectors (WordDrop). Hard variants
//! pick one parent per position through a binary mask; the relaxed variant
//! takes the convex combination `λ·a + (1−λ)·b` of the one-hot rows.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS, NUM_RESERVED, PAD};
use crate::error::{Error, Result};
use crate::sampling::{
    sample_lambda_beta, sample_mask, sample_switchout_rate, Method, MethodConfig, RngStream,
};

pub type TokenId = usize;

/// A hard source/target pair. Targets are BOS-prefixed and EOS-terminated.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SequencePair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl SequencePair {
    pub fn new(source: Vec<TokenId>, target: Vec<TokenId>) -> Self {
        SequencePair { source, target }
    }

    /// Wraps a bare target in BOS/EOS.
    pub fn with_markers(source: Vec<TokenId>, body: &[TokenId]) -> Self {
        let mut target = Vec::with_capacity(body.len() + 2);
        target.push(BOS);
        target.extend_from_slice(body);
        target.push(EOS);
        SequencePair { source, target }
    }

    pub fn lengths(&self) -> (usize, usize) {
        (self.source.len(), self.target.len())
    }

    /// Checks id bounds and target markers.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if let Some(&bad) = self.source.iter().chain(&self.target).find(|&&t| t >= vocab_size) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary of {vocab_size}")));
        }
        if self.target.first() != Some(&BOS) || self.target.last() != Some(&EOS) || self.target.len() < 2 {
            return Err(Error::Contract("target must begin with BOS and end with EOS".into()));
        }
        Ok(())
    }
}

/// Length without trailing PAD tokens.
pub fn unpadded_len(tokens: &[TokenId]) -> usize {
    tokens.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1)
}

/// One relaxed position: sparse (token, weight) entries. An empty row is the
/// zero vector.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SoftRow {
    pub entries: Vec<(TokenId, f64)>,
}

impl SoftRow {
    pub fn one_hot(token: TokenId) -> Self {
        SoftRow {
            entries: vec![(token, 1.0)],
        }
    }

    pub fn zero() -> Self {
        SoftRow::default()
    }

    /// `λ·onehot(a) + (1−λ)·onehot(b)`; coinciding tokens give an exact one-hot.
    pub fn blend(a: TokenId, b: TokenId, lambda: f64) -> Self {
        if a == b {
            return SoftRow::one_hot(a);
        }
        SoftRow {
            entries: vec![(a, lambda), (b, 1.0 - lambda)],
        }
    }

    pub fn sum(&self) -> f64 {
        self.entries.iter().map(|(_, w)| w).sum()
    }

    /// Number of nonzero entries.
    pub fn support(&self) -> usize {
        self.entries.iter().filter(|(_, w)| *w != 0.0).count()
    }

    pub fn is_one_hot(&self) -> bool {
        self.support() == 1 && self.entries.iter().any(|(_, w)| *w == 1.0)
    }

    pub fn weight_of(&self, token: TokenId) -> f64 {
        self.entries.iter().filter(|(t, _)| *t == token).map(|(_, w)| w).sum()
    }

    /// Dense V-dimensional vector; entries are added in order.
    pub fn to_dense(&self, vocab_size: usize) -> Vec<f64> {
        let mut row = vec![0.0; vocab_size];
        self.write_dense(&mut row);
        row
    }

    pub fn write_dense(&self, out: &mut [f64]) {
        for &(t, w) in &self.entries {
            out[t] += w;
        }
    }
}

/// Per-position relaxation of a token sequence onto the probability simplex.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SoftSequence {
    pub rows: Vec<SoftRow>,
}

impl SoftSequence {
    pub fn from_tokens(tokens: &[TokenId]) -> Self {
        SoftSequence {
            rows: tokens.iter().map(|&t| SoftRow::one_hot(t)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Token ids when every row is a one-hot.
    pub fn hard_tokens(&self) -> Option<Vec<TokenId>> {
        self.rows
            .iter()
            .map(|r| {
                if r.is_one_hot() {
                    r.entries.iter().find(|(_, w)| *w == 1.0).map(|(t, _)| *t)
                } else {
                    None
                }
            })
            .collect()
    }
}

/// Where a partner sequence came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartnerKind {
    /// Another training example, by dataset index.
    Example(usize),
    /// Uniform random vocabulary tokens.
    Vocabulary,
    /// Zero vectors.
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Partner {
    pub pair: SequencePair,
    pub kind: PartnerKind,
}

/// Audit trail of a mixed example.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub parent: usize,
    /// `None` when the example passed through unaugmented.
    pub partner: Option<PartnerKind>,
    pub method: Method,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedExample {
    pub soft_source: SoftSequence,
    pub soft_target: SoftSequence,
    pub lambda: f64,
    pub mask_source: Option<Vec<bool>>,
    pub mask_target: Option<Vec<bool>>,
    pub provenance: Provenance,
    /// Unpadded source lengths of (parent, partner).
    pub source_lengths: (usize, usize),
    /// Unpadded target lengths of (parent, partner).
    pub target_lengths: (usize, usize),
}

impl MixedExample {
    /// The parent as-is, for unaugmented training and evaluation.
    pub fn identity(pair: &SequencePair, parent: usize, method: Method) -> Self {
        let (s, t) = pair.lengths();
        MixedExample {
            soft_source: SoftSequence::from_tokens(&pair.source),
            soft_target: SoftSequence::from_tokens(&pair.target),
            lambda: 1.0,
            mask_source: None,
            mask_target: None,
            provenance: Provenance {
                parent,
                partner: None,
                method,
            },
            source_lengths: (s, s),
            target_lengths: (t, t),
        }
    }

    /// Tab-separated dump record: parent, partner, λ, method, source rows,
    /// target rows. Rows are space-separated `pos:index:weight` triples.
    pub fn to_dump_line(&self) -> String {
        let partner = match self.provenance.partner {
            None => "-".to_string(),
            Some(PartnerKind::Example(i)) => i.to_string(),
            Some(PartnerKind::Vocabulary) => "vocab".to_string(),
            Some(PartnerKind::Zero) => "zero".to_string(),
        };
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.provenance.parent,
            partner,
            self.lambda,
            self.provenance.method.key(),
            encode_rows(&self.soft_source),
            encode_rows(&self.soft_target)
        )
    }
}

fn encode_rows(seq: &SoftSequence) -> String {
    let mut out = String::new();
    for (pos, row) in seq.rows.iter().enumerate() {
        for &(idx, w) in &row.entries {
            if !out.is_empty() {
                out.push(' ');
            }
            let _ = write!(out, "{pos}:{idx}:{w}");
        }
    }
    out
}

/// Parsed form of one `augment-dump` record.
#[derive(Clone, Debug, PartialEq)]
pub struct DumpRecord {
    pub parent: usize,
    pub partner: String,
    pub lambda: f64,
    pub method: Method,
    pub source: Vec<(usize, TokenId, f64)>,
    pub target: Vec<(usize, TokenId, f64)>,
}

pub fn parse_dump_line(line: &str) -> Result<DumpRecord> {
    let bad = |what: &str| Error::Contract(format!("malformed dump record ({what}): {line:?}"));
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 6 {
        return Err(bad("field count"));
    }
    let triples = |s: &str| -> Result<Vec<(usize, TokenId, f64)>> {
        s.split_whitespace()
            .map(|t| {
                let mut it = t.splitn(3, ':');
                let pos = it.next().and_then(|v| v.parse().ok());
                let idx = it.next().and_then(|v| v.parse().ok());
                let w = it.next().and_then(|v| v.parse().ok());
                match (pos, idx, w) {
                    (Some(p), Some(i), Some(w)) => Ok((p, i, w)),
                    _ => Err(bad("triple")),
                }
            })
            .collect()
    };
    Ok(DumpRecord {
        parent: fields[0].parse().map_err(|_| bad("parent"))?,
        partner: fields[1].to_string(),
        lambda: fields[2].parse().map_err(|_| bad("lambda"))?,
        method: fields[3].parse()?,
        source: triples(fields[4])?,
        target: triples(fields[5])?,
    })
}

fn pad_to(tokens: &[TokenId], len: usize, pad_id: TokenId) -> Vec<TokenId> {
    let mut v = tokens.to_vec();
    v.resize(len.max(tokens.len()), pad_id);
    v
}

/// Right-pads both pairs so that sources and targets have equal lengths.
/// Never truncates.
pub fn align_lengths(a: &SequencePair, b: &SequencePair, pad_id: TokenId) -> (SequencePair, SequencePair) {
    let s = a.source.len().max(b.source.len());
    let t = a.target.len().max(b.target.len());
    (
        SequencePair::new(pad_to(&a.source, s, pad_id), pad_to(&a.target, t, pad_id)),
        SequencePair::new(pad_to(&b.source, s, pad_id), pad_to(&b.target, t, pad_id)),
    )
}

fn partner_lengths(a: &SequencePair, partner: &Partner) -> ((usize, usize), (usize, usize)) {
    let la = (unpadded_len(&a.source), unpadded_len(&a.target));
    let lb = match partner.kind {
        PartnerKind::Example(_) => (
            unpadded_len(&partner.pair.source),
            unpadded_len(&partner.pair.target),
        ),
        PartnerKind::Vocabulary | PartnerKind::Zero => la,
    };
    ((la.0, lb.0), (la.1, lb.1))
}

fn check_aligned(a: &SequencePair, b: &SequencePair) -> Result<()> {
    if a.lengths() != b.lengths() {
        return Err(Error::Contract(format!(
            "pairs are not length-aligned: {:?} vs {:?}",
            a.lengths(),
            b.lengths()
        )));
    }
    Ok(())
}

/// Per-position hard swap: the parent's token where the mask is set, the
/// partner's where it is clear. Zero partners contribute zero rows.
pub fn mix_hard(
    a: &SequencePair,
    parent: usize,
    b: &Partner,
    mask_src: &[bool],
    mask_tgt: &[bool],
    lambda: f64,
    method: Method,
) -> Result<MixedExample> {
    check_aligned(a, &b.pair)?;
    if mask_src.len() != a.source.len() || mask_tgt.len() != a.target.len() {
        return Err(Error::Contract(format!(
            "mask lengths ({}, {}) do not match sequence lengths {:?}",
            mask_src.len(),
            mask_tgt.len(),
            a.lengths()
        )));
    }
    let pick = |own: &[TokenId], other: &[TokenId], mask: &[bool]| SoftSequence {
        rows: own
            .iter()
            .zip(other)
            .zip(mask)
            .map(|((&x, &y), &keep)| match (keep, b.kind) {
                (true, _) => SoftRow::one_hot(x),
                (false, PartnerKind::Zero) => SoftRow::zero(),
                (false, _) => SoftRow::one_hot(y),
            })
            .collect(),
    };
    let (source_lengths, target_lengths) = partner_lengths(a, b);
    Ok(MixedExample {
        soft_source: pick(&a.source, &b.pair.source, mask_src),
        soft_target: pick(&a.target, &b.pair.target, mask_tgt),
        lambda,
        mask_source: Some(mask_src.to_vec()),
        mask_target: Some(mask_tgt.to_vec()),
        provenance: Provenance {
            parent,
            partner: Some(b.kind),
            method,
        },
        source_lengths,
        target_lengths,
    })
}

/// Expected sample under Bernoulli(λ) masks: every row is
/// `λ·onehot(a_i) + (1−λ)·onehot(b_i)`, with one λ for both sides.
pub fn mix_soft(a: &SequencePair, parent: usize, b: &Partner, lambda: f64) -> Result<MixedExample> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!("mixing weight {lambda} outside [0, 1]")));
    }
    check_aligned(a, &b.pair)?;
    let blend = |own: &[TokenId], other: &[TokenId]| SoftSequence {
        rows: own
            .iter()
            .zip(other)
            .map(|(&x, &y)| match b.kind {
                PartnerKind::Zero => SoftRow { entries: vec![(x, lambda)] },
                _ => SoftRow::blend(x, y, lambda),
            })
            .collect(),
    };
    let (source_lengths, target_lengths) = partner_lengths(a, b);
    Ok(MixedExample {
        soft_source: blend(&a.source, &b.pair.source),
        soft_target: blend(&a.target, &b.pair.target),
        lambda,
        mask_source: None,
        mask_target: None,
        provenance: Provenance {
            parent,
            partner: Some(b.kind),
            method: Method::Seqmix,
        },
        source_lengths,
        target_lengths,
    })
}

/// Where SeqMix partners are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PartnerMode {
    /// A derangement of the current minibatch.
    #[default]
    Batch,
    /// A uniform draw from the whole training set.
    Dataset,
}

/// Uniform random cyclic permutation (Sattolo); a derangement for n ≥ 2.
fn derangement(n: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i);
        perm.swap(i, j);
    }
    perm
}

fn random_tokens(len: usize, vocab_size: usize, rng: &mut RngStream) -> Vec<TokenId> {
    // Ids 0..NUM_RESERVED are PAD, BOS, EOS, UNK; only UNK is eligible.
    let eligible = vocab_size.saturating_sub(3);
    (0..len)
        .map(|_| {
            let k = rng.below(eligible.max(1));
            if k == 0 {
                crate::data::UNK
            } else {
                NUM_RESERVED + k - 1
            }
        })
        .collect()
}

/// Draws a partner for every element of `batch`.
///
/// `batch` holds `(dataset index, pair)`; `dataset` is consulted only in
/// [`PartnerMode::Dataset`].
pub fn partner_select(
    cfg: &MethodConfig,
    batch: &[(usize, &SequencePair)],
    dataset: &[SequencePair],
    mode: PartnerMode,
    vocab_size: usize,
    rng: &mut RngStream,
) -> Vec<Option<Partner>> {
    match cfg.method {
        Method::Baseline => vec![None; batch.len()],
        Method::Seqmix | Method::SeqmixHard => match mode {
            PartnerMode::Batch => {
                let perm = derangement(batch.len(), rng);
                perm.iter()
                    .map(|&j| {
                        let (idx, pair) = batch[j];
                        Some(Partner {
                            pair: pair.clone(),
                            kind: PartnerKind::Example(idx),
                        })
                    })
                    .collect()
            }
            PartnerMode::Dataset => batch
                .iter()
                .map(|&(own, pair)| {
                    let mut j = rng.below(dataset.len());
                    if dataset.len() > 1 {
                        while j == own {
                            j = rng.below(dataset.len());
                        }
                    }
                    let chosen = dataset.get(j).unwrap_or(pair);
                    Some(Partner {
                        pair: chosen.clone(),
                        kind: PartnerKind::Example(j),
                    })
                })
                .collect(),
        },
        Method::SwitchOut => batch
            .iter()
            .map(|(_, pair)| {
                Some(Partner {
                    pair: SequencePair::new(
                        random_tokens(pair.source.len(), vocab_size, rng),
                        random_tokens(pair.target.len(), vocab_size, rng),
                    ),
                    kind: PartnerKind::Vocabulary,
                })
            })
            .collect(),
        Method::WordDrop => batch
            .iter()
            .map(|(_, pair)| {
                Some(Partner {
                    pair: SequencePair::new(vec![PAD; pair.source.len()], vec![PAD; pair.target.len()]),
                    kind: PartnerKind::Zero,
                })
            })
            .collect(),
    }
}

/// Keep mask over a target whose BOS and EOS positions are never replaced.
fn protected_target_mask(keep: f64, len: usize, rng: &mut RngStream) -> Vec<bool> {
    let inner = len.saturating_sub(2);
    let mut mask = vec![true; len];
    for (slot, m) in mask.iter_mut().skip(1).zip(sample_mask(keep, inner, rng)) {
        *slot = m;
    }
    mask
}

/// Options for [`augment_batch`] beyond the method configuration.
#[derive(Clone, Copy, Debug, Default)]
pub struct AugmentOptions {
    pub partner_mode: PartnerMode,
    /// Fixes λ instead of sampling it (SeqMix variants only).
    pub force_lambda: Option<f64>,
}

/// Builds one mixed example per batch element.
pub fn augment_batch(
    cfg: &MethodConfig,
    batch: &[(usize, &SequencePair)],
    dataset: &[SequencePair],
    vocab_size: usize,
    opts: AugmentOptions,
    rng: &mut RngStream,
) -> Result<Vec<MixedExample>> {
    let partners = partner_select(cfg, batch, dataset, opts.partner_mode, vocab_size, rng);
    let mut out = Vec::with_capacity(batch.len());
    for (&(idx, pair), partner) in batch.iter().zip(partners) {
        let Some(partner) = partner else {
            out.push(MixedExample::identity(pair, idx, cfg.method));
            continue;
        };
        if cfg.p_mix < 1.0 && rng.next_f64() >= cfg.p_mix {
            out.push(MixedExample::identity(pair, idx, cfg.method));
            continue;
        }
        let example = match cfg.method {
            Method::Baseline => unreachable!("baseline has no partner"),
            Method::Seqmix | Method::SeqmixHard => {
                let lambda = match opts.force_lambda {
                    Some(l) => l,
                    None => sample_lambda_beta(cfg.alpha, rng)?,
                };
                let (a, b) = align_lengths(pair, &partner.pair, PAD);
                let b = Partner { pair: b, kind: partner.kind };
                if cfg.method == Method::Seqmix {
                    mix_soft(&a, idx, &b, lambda)?
                } else {
                    let ms = sample_mask(lambda, a.source.len(), rng);
                    let mt = sample_mask(lambda, a.target.len(), rng);
                    mix_hard(&a, idx, &b, &ms, &mt, lambda, Method::SeqmixHard)?
                }
            }
            Method::SwitchOut => {
                let (s, t) = pair.lengths();
                let src_rate = sample_switchout_rate(s, cfg.eta, rng)?;
                let ms = sample_mask(1.0 - src_rate, s, rng);
                let mt = if t > 2 {
                    let tgt_rate = sample_switchout_rate(t - 2, cfg.eta, rng)?;
                    protected_target_mask(1.0 - tgt_rate, t, rng)
                } else {
                    vec![true; t]
                };
                mix_hard(pair, idx, &partner, &ms, &mt, 1.0 - src_rate, Method::SwitchOut)?
            }
            Method::WordDrop => {
                let keep = 1.0 - cfg.rho;
                let (s, t) = pair.lengths();
                let ms = sample_mask(keep, s, rng);
                let mt = if cfg.word_drop_source_only {
                    vec![true; t]
                } else {
                    protected_target_mask(keep, t, rng)
                };
                mix_hard(pair, idx, &partner, &ms, &mt, keep, Method::WordDrop)?
            }
        };
        out.push(example);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(src: &[usize], body: &[usize]) -> SequencePair {
        SequencePair::with_markers(src.to_vec(), body)
    }

    fn example_partner(p: &SequencePair, id: usize) -> Partner {
        Partner { pair: p.clone(), kind: PartnerKind::Example(id) }
    }

    #[test]
    fn align_pads_and_round_trips() {
        let a = pair(&[4, 5, 6], &[7]);
        let b = pair(&[4, 5, 6, 7, 8], &[9, 9, 9]);
        let (a2, b2) = align_lengths(&a, &b, PAD);
        assert_eq!(a2.source, vec![4, 5, 6, PAD, PAD]);
        assert_eq!(a2.target, vec![BOS, 7, EOS, PAD, PAD]);
        assert_eq!(b2, b);
        assert_eq!(unpadded_len(&a2.source), 3);
        assert_eq!(&a2.target[..unpadded_len(&a2.target)], &a.target[..]);
        let (x, y) = align_lengths(&a, &a, PAD);
        assert_eq!((x, y), (a.clone(), a));
    }

    #[test]
    fn hard_swap_definition() {
        let a = SequencePair::new(vec![7, 8, 9], vec![BOS, 7, EOS]);
        let b = SequencePair::new(vec![4, 5, 6], vec![BOS, 5, EOS]);
        let m = mix_hard(&a, 0, &example_partner(&b, 1), &[true, false, true], &[true; 3], 0.5, Method::SeqmixHard)
            .unwrap();
        assert_eq!(m.soft_source.hard_tokens().unwrap(), vec![7, 5, 9]);
        let all_a = mix_hard(&a, 0, &example_partner(&b, 1), &[true; 3], &[true; 3], 1.0, Method::SeqmixHard).unwrap();
        assert_eq!(all_a.soft_source.hard_tokens().unwrap(), a.source);
        assert_eq!(all_a.soft_target.hard_tokens().unwrap(), a.target);
        let all_b = mix_hard(&a, 0, &example_partner(&b, 1), &[false; 3], &[false; 3], 0.0, Method::SeqmixHard).unwrap();
        assert_eq!(all_b.soft_source.hard_tokens().unwrap(), b.source);
        assert_eq!(all_b.soft_target.hard_tokens().unwrap(), b.target);
    }

    #[test]
    fn hard_swap_length_mismatch() {
        let a = pair(&[4, 5], &[6]);
        let b = pair(&[4], &[6]);
        assert!(matches!(
            mix_hard(&a, 0, &example_partner(&b, 1), &[true], &[true; 3], 1.0, Method::SeqmixHard),
            Err(Error::Contract(_))
        ));
        assert!(mix_hard(&a, 0, &example_partner(&a, 1), &[true], &[true; 3], 1.0, Method::SeqmixHard).is_err());
    }

    #[test]
    fn soft_rows_definition() {
        let a = SequencePair::new(vec![4], vec![BOS, 4, EOS]);
        let b = SequencePair::new(vec![9], vec![BOS, 9, EOS]);
        let m = mix_soft(&a, 0, &example_partner(&b, 1), 0.3).unwrap();
        let row = m.soft_source.rows[0].to_dense(12);
        let mut expected = vec![0.0; 12];
        expected[4] = 0.3;
        expected[9] = 0.7;
        assert_eq!(row, expected);
        assert!(m.soft_target.rows[0].is_one_hot());
        assert!(m.mask_source.is_none());
        assert!(mix_soft(&a, 0, &example_partner(&b, 1), 1.5).is_err());
        assert!(mix_soft(&a, 0, &example_partner(&b, 1), -0.1).is_err());
    }

    #[test]
    fn soft_endpoints() {
        let a = pair(&[4, 5, 6], &[7, 8]);
        let b = pair(&[6, 6, 4], &[5, 5]);
        let one = mix_soft(&a, 0, &example_partner(&b, 1), 1.0).unwrap();
        let zero = mix_soft(&a, 0, &example_partner(&b, 1), 0.0).unwrap();
        for (r, &t) in one.soft_source.rows.iter().zip(&a.source) {
            assert_eq!(r.to_dense(10), SoftRow::one_hot(t).to_dense(10));
        }
        for (r, &t) in zero.soft_target.rows.iter().zip(&b.target) {
            assert_eq!(r.to_dense(10), SoftRow::one_hot(t).to_dense(10));
        }
    }

    #[test]
    fn self_partner_returns_original_rows() {
        let a = pair(&[4, 5], &[6, 7]);
        let cfg = MethodConfig::new(Method::Seqmix);
        let mut rng = RngStream::new(1);
        let out = augment_batch(&cfg, &[(0, &a)], &[], 10, AugmentOptions::default(), &mut rng).unwrap();
        assert_eq!(out[0].soft_source.hard_tokens().unwrap(), a.source);
        assert_eq!(out[0].soft_target.hard_tokens().unwrap(), a.target);
    }

    #[test]
    fn word_drop_rows_are_zero_vectors() {
        let a = pair(&[4, 5, 6], &[7, 8]);
        let z = Partner {
            pair: SequencePair::new(vec![PAD; 3], vec![PAD; 4]),
            kind: PartnerKind::Zero,
        };
        let m = mix_hard(&a, 0, &z, &[true, false, true], &[true; 4], 0.9, Method::WordDrop).unwrap();
        assert_eq!(m.soft_source.rows[1], SoftRow::zero());
        assert_eq!(m.soft_source.rows[1].to_dense(10), vec![0.0; 10]);
        assert_eq!(m.soft_source.rows[0].sum(), 1.0);
    }

    #[test]
    fn switchout_and_worddrop_protect_markers() {
        let a = pair(&[4, 5, 6, 7], &[8, 9, 10, 11]);
        let mut rng = RngStream::new(9);
        for method in [Method::SwitchOut, Method::WordDrop] {
            let mut cfg = MethodConfig::new(method);
            cfg.rho = 0.9;
            cfg.eta = 100.0;
            for _ in 0..200 {
                let m = augment_batch(&cfg, &[(0, &a)], &[], 14, AugmentOptions::default(), &mut rng).unwrap();
                let tgt = &m[0].soft_target.rows;
                assert_eq!(tgt[0], SoftRow::one_hot(BOS));
                assert_eq!(tgt[tgt.len() - 1], SoftRow::one_hot(EOS));
            }
        }
    }

    #[test]
    fn switchout_partner_tokens_exclude_markers() {
        let a = pair(&[4; 50], &[5; 50]);
        let cfg = MethodConfig::new(Method::SwitchOut);
        let mut rng = RngStream::new(2);
        for _ in 0..50 {
            let p = partner_select(&cfg, &[(0, &a)], &[], PartnerMode::Batch, 14, &mut rng);
            let p = p[0].as_ref().unwrap();
            for &t in p.pair.source.iter().chain(&p.pair.target) {
                assert!(t != PAD && t != BOS && t != EOS && t < 14);
            }
        }
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        let mut rng = RngStream::new(4);
        for n in 2..12 {
            let p = derangement(n, &mut rng);
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
            let mut sorted = p.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        }
        assert_eq!(derangement(1, &mut rng), vec![0]);
    }

    #[test]
    fn dump_line_parses_back() {
        let a = pair(&[4, 5], &[6]);
        let b = pair(&[7], &[8, 9]);
        let (a2, b2) = align_lengths(&a, &b, PAD);
        let m = mix_soft(&a2, 3, &example_partner(&b2, 11), 0.1 + 0.2).unwrap();
        let rec = parse_dump_line(&m.to_dump_line()).unwrap();
        assert_eq!(rec.parent, 3);
        assert_eq!(rec.partner, "11");
        assert_eq!(rec.lambda, 0.1 + 0.2);
        assert_eq!(rec.method, Method::Seqmix);
        let expected: Vec<(usize, usize, f64)> = m
            .soft_target
            .rows
            .iter()
            .enumerate()
            .flat_map(|(p, r)| r.entries.iter().map(move |&(i, w)| (p, i, w)))
            .collect();
        assert_eq!(rec.target, expected);
        assert!(parse_dump_line("1\t2\t0.5").is_err());
    }
}
