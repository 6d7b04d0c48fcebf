//! Stochastic ingredients of the augmentation family: the mixing-weight
//! priors, per-position keep masks and their expectations.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Splittable ChaCha8 stream.
///
/// Child streams derive their key from the parent key and a label only, never
/// from the parent's position, so drawing from one stream cannot shift another.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    key: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            key: seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent substream for an integer label (worker index, cell id...).
    pub fn split(&self, label: u64) -> RngStream {
        let mut derive = ChaCha8Rng::seed_from_u64(self.key);
        derive.set_stream(label);
        RngStream::new(derive.next_u64())
    }

    /// Independent substream for a named purpose ("init", "shuffle", ...).
    pub fn substream(&self, name: &str) -> RngStream {
        self.split(fnv1a64(name.as_bytes()))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.rng.random()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.rng.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    /// Natural log of a Gamma(shape, 1) draw. Shapes below 1 use the
    /// `G(a) = G(a + 1) · U^{1/a}` boost in log space, so tiny shapes cannot
    /// underflow to zero.
    fn ln_gamma_draw(&mut self, shape: f64) -> f64 {
        if shape < 1.0 {
            let u = 1.0 - self.next_f64();
            return self.ln_gamma_draw(shape + 1.0) + u.ln() / shape;
        }
        let gamma = Gamma::new(shape, 1.0).expect("shape ≥ 1 is valid");
        gamma.sample(&mut self.rng).ln()
    }
}

/// The augmentation methods that share the latent-mask objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Baseline,
    WordDrop,
    SwitchOut,
    SeqmixHard,
    Seqmix,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Baseline,
        Method::WordDrop,
        Method::SwitchOut,
        Method::SeqmixHard,
        Method::Seqmix,
    ];

    /// Name used on the command line and in configs.
    pub fn key(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::WordDrop => "word-drop",
            Method::SwitchOut => "switch-out",
            Method::SeqmixHard => "seqmix-hard",
            Method::Seqmix => "seqmix",
        }
    }

    /// Row label in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Method::Baseline => "Baseline",
            Method::WordDrop => "WordDrop",
            Method::SwitchOut => "SwitchOut",
            Method::SeqmixHard => "SeqMix (Hard)",
            Method::Seqmix => "SeqMix",
        }
    }

    /// Whether the method trains on expected (relaxed) samples.
    pub fn is_relaxed(self) -> bool {
        self == Method::Seqmix
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "baseline" | "none" => Ok(Method::Baseline),
            "worddrop" => Ok(Method::WordDrop),
            "switchout" => Ok(Method::SwitchOut),
            "seqmixhard" => Ok(Method::SeqmixHard),
            "seqmix" | "seqmixsoft" => Ok(Method::Seqmix),
            _ => Err(Error::Parameter(format!(
                "unknown method {s:?}; expected one of baseline, word-drop, switch-out, seqmix-hard, seqmix"
            ))),
        }
    }
}

/// Method selection and its hyperparameters. Fields irrelevant to the
/// selected method are never read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    /// Beta(α, α) shape for the SeqMix variants.
    pub alpha: f64,
    /// SwitchOut temperature.
    pub eta: f64,
    /// WordDrop drop probability.
    pub rho: f64,
    /// Probability that a pair is augmented at all.
    pub p_mix: f64,
    /// Restrict WordDrop to the source side.
    pub word_drop_source_only: bool,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            method: Method::Baseline,
            alpha: 1.0,
            eta: 1.0,
            rho: 0.1,
            p_mix: 1.0,
            word_drop_source_only: false,
        }
    }
}

impl MethodConfig {
    pub fn new(method: Method) -> Self {
        MethodConfig {
            method,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_mix) {
            return Err(Error::Parameter(format!("p_mix {} outside [0, 1]", self.p_mix)));
        }
        match self.method {
            Method::Seqmix | Method::SeqmixHard => {
                if !(self.alpha > 0.0 && self.alpha.is_finite()) {
                    return Err(Error::Parameter(format!("alpha must be > 0, got {}", self.alpha)));
                }
                if !(0.1..=1.5).contains(&self.alpha) {
                    log::warn!("alpha {} is outside the tuned range [0.1, 1.5]", self.alpha);
                }
            }
            Method::SwitchOut => {
                if !(self.eta > 0.0) {
                    return Err(Error::Parameter(format!("eta must be > 0, got {}", self.eta)));
                }
            }
            Method::WordDrop => {
                if !(0.0..=1.0).contains(&self.rho) {
                    return Err(Error::Parameter(format!("rho {} outside [0, 1]", self.rho)));
                }
            }
            Method::Baseline => {}
        }
        Ok(())
    }
}

/// One draw of λ ~ Beta(α, α), as `g1 / (g1 + g2)` for two Gamma(α) draws.
pub fn sample_lambda_beta(alpha: f64, rng: &mut RngStream) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Parameter(format!("Beta shape must be > 0, got {alpha}")));
    }
    let ln_g1 = rng.ln_gamma_draw(alpha);
    let ln_g2 = rng.ln_gamma_draw(alpha);
    // g1 / (g1 + g2) = 1 / (1 + exp(ln g2 - ln g1))
    Ok(1.0 / (1.0 + (ln_g2 - ln_g1).exp()))
}

/// Normalizing constant `Σ_{k=0}^{s} e^{-k/η}` of the SwitchOut prior.
pub fn switchout_normalizer(s: usize, eta: f64) -> f64 {
    (0..=s).map(|k| (-(k as f64) / eta).exp()).sum()
}

/// `P(λ = k)` for `k = 0..=s` under `p(λ) ∝ e^{-λ/η}`.
pub fn switchout_distribution(s: usize, eta: f64) -> Result<Vec<f64>> {
    if s == 0 {
        return Err(Error::Parameter("SwitchOut needs a sequence length s ≥ 1".into()));
    }
    if !(eta > 0.0) {
        return Err(Error::Parameter(format!("eta must be > 0, got {eta}")));
    }
    let z = switchout_normalizer(s, eta);
    Ok((0..=s).map(|k| (-(k as f64) / eta).exp() / z).collect())
}

/// Draws the number of swapped positions λ ∈ {0..s} and returns the swap rate λ/s.
pub fn sample_switchout_rate(s: usize, eta: f64, rng: &mut RngStream) -> Result<f64> {
    let probs = switchout_distribution(s, eta)?;
    let u = rng.next_f64();
    let mut acc = 0.0;
    let mut chosen = s;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            chosen = k;
            break;
        }
    }
    Ok(chosen as f64 / s as f64)
}

/// I.i.d. Bernoulli(`lambda_keep`) entries; `true` keeps the original token.
pub fn sample_mask(lambda_keep: f64, len: usize, rng: &mut RngStream) -> Vec<bool> {
    (0..len).map(|_| rng.next_f64() < lambda_keep).collect()
}

/// Expectation of [`sample_mask`]: every entry equals `lambda_keep`.
pub fn expected_mask(lambda_keep: f64, len: usize) -> Vec<f64> {
    vec![lambda_keep; len]
}
