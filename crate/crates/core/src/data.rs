//! Datasets: SCAN/TSV file formats, the built-in command mini-grammar,
//! primitive-holdout splits and vocabularies.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixer::{SequencePair, TokenId};
use crate::sampling::{fnv1a64, RngStream};

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token ↔ id bijection with the reserved block fixed at ids 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Reserved ids, then the given tokens in sorted order.
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let unique: BTreeSet<&str> = tokens
            .into_iter()
            .filter(|t| !RESERVED.contains(t))
            .collect();
        let tokens: Vec<String> = RESERVED
            .iter()
            .copied()
            .chain(unique)
            .map(str::to_string)
            .collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < NUM_RESERVED || tokens[..NUM_RESERVED].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Contract("vocabulary file lacks the reserved token block".into()));
        }
        let ids: HashMap<String, TokenId> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if ids.len() != tokens.len() {
            return Err(Error::Contract("vocabulary file has duplicate tokens".into()));
        }
        Ok(Vocabulary { tokens, ids })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum VocabMode {
    #[default]
    Shared,
    Separate,
}

/// Source and target vocabularies; identical in shared mode.
pub fn build_vocab(data: &Dataset, mode: VocabMode) -> Result<(Vocabulary, Vocabulary)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(data.name.clone()));
    }
    let src = data.examples.iter().flat_map(|e| e.source.iter().map(String::as_str));
    let tgt = data.examples.iter().flat_map(|e| e.target.iter().map(String::as_str));
    Ok(match mode {
        VocabMode::Shared => {
            let v = Vocabulary::from_tokens(src.chain(tgt));
            (v.clone(), v)
        }
        VocabMode::Separate => (Vocabulary::from_tokens(src), Vocabulary::from_tokens(tgt)),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl Example {
    pub fn new(source: &str, target: &str) -> Self {
        Example {
            source: source.split_whitespace().map(str::to_string).collect(),
            target: target.split_whitespace().map(str::to_string).collect(),
        }
    }

    pub fn source_text(&self) -> String {
        self.source.join(" ")
    }

    pub fn target_text(&self) -> String {
        self.target.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, examples: Vec<Example>) -> Self {
        Dataset {
            name: name.into(),
            examples,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// `source<TAB>target` lines, LF-terminated.
    pub fn canonical_form(&self) -> String {
        self.examples
            .iter()
            .map(|e| format!("{}\t{}\n", e.source_text(), e.target_text()))
            .collect()
    }

    /// FNV-1a over [`Dataset::canonical_form`].
    pub fn content_hash(&self) -> u64 {
        fnv1a64(self.canonical_form().as_bytes())
    }

    /// Encodes every example; targets get BOS/EOS markers.
    pub fn encode(&self, src: &Vocabulary, tgt: &Vocabulary) -> Vec<SequencePair> {
        self.examples
            .iter()
            .map(|e| SequencePair::with_markers(src.encode(&e.source), &tgt.encode(&e.target)))
            .collect()
    }

    pub fn to_scan_text(&self) -> String {
        self.examples
            .iter()
            .map(|e| format!("IN: {} OUT: {}\n", e.source_text(), e.target_text()))
            .collect()
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

/// Parses the SCAN distribution format, one `IN: <tokens> OUT: <tokens>` per line.
pub fn parse_scan(text: &str, path: &Path) -> Result<Dataset> {
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: message.to_string(),
        };
        let rest = line
            .strip_prefix("IN:")
            .ok_or_else(|| parse_err("line does not start with `IN:`"))?;
        let (src, tgt) = rest
            .split_once(" OUT:")
            .ok_or_else(|| parse_err("line has no `OUT:` section"))?;
        let ex = Example::new(src, tgt);
        if ex.source.is_empty() || ex.target.is_empty() {
            return Err(parse_err("empty command or action sequence"));
        }
        examples.push(ex);
    }
    if examples.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    Ok(Dataset::new(dataset_name(path), examples))
}

pub fn load_scan_file(path: &Path) -> Result<Dataset> {
    parse_scan(&read(path)?, path)
}

/// `source<TAB>target` per line, whitespace-tokenized.
pub fn parse_tsv(text: &str, path: &Path) -> Result<Dataset> {
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (src, tgt) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: "expected `source<TAB>target`".into(),
        })?;
        let ex = Example::new(src, tgt);
        if ex.source.is_empty() || ex.target.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "empty side".into(),
            });
        }
        examples.push(ex);
    }
    if examples.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    Ok(Dataset::new(dataset_name(path), examples))
}

pub fn load_tsv_file(path: &Path) -> Result<Dataset> {
    parse_tsv(&read(path)?, path)
}

/// Dispatches on content: SCAN lines start with `IN:`, everything else is TSV.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = read(path)?;
    if text.trim_start().starts_with("IN:") {
        parse_scan(&text, path)
    } else {
        parse_tsv(&text, path)
    }
}

/// Rules of the built-in command language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrammarSpec {
    pub primitives: Vec<(String, String)>,
    pub directions: Vec<(String, String)>,
    pub repetitions: Vec<(String, usize)>,
    pub connectives: Vec<String>,
}

impl Default for GrammarSpec {
    fn default() -> Self {
        let pairs = |xs: &[(&str, &str)]| xs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        GrammarSpec {
            primitives: pairs(&[("jump", "JUMP"), ("walk", "WALK"), ("look", "LOOK"), ("run", "RUN")]),
            directions: pairs(&[("left", "LTURN"), ("right", "RTURN")]),
            repetitions: vec![("twice".into(), 2), ("thrice".into(), 3)],
            connectives: vec!["and".into(), "after".into()],
        }
    }
}

/// Enumerates the closed language
///
/// ```text
/// atom    := P | P d | "turn" d
/// phrase  := atom [rep]
/// command := phrase | phrase conn phrase
/// ```
///
/// `P d` turns first and then acts; `A and B` runs A then B; `A after B`
/// runs B then A.
pub fn gen_minigrammar(spec: &GrammarSpec) -> Dataset {
    let mut atoms: Vec<(String, Vec<String>)> = Vec::new();
    for (word, action) in &spec.primitives {
        atoms.push((word.clone(), vec![action.clone()]));
        for (dir, turn) in &spec.directions {
            atoms.push((format!("{word} {dir}"), vec![turn.clone(), action.clone()]));
        }
    }
    for (dir, turn) in &spec.directions {
        atoms.push((format!("turn {dir}"), vec![turn.clone()]));
    }

    let mut phrases: Vec<(String, Vec<String>)> = Vec::new();
    for (cmd, acts) in &atoms {
        phrases.push((cmd.clone(), acts.clone()));
        for (rep, times) in &spec.repetitions {
            phrases.push((format!("{cmd} {rep}"), std::iter::repeat(acts.clone()).take(*times).flatten().collect()));
        }
    }

    let mut examples: Vec<Example> = phrases
        .iter()
        .map(|(cmd, acts)| Example::new(cmd, &acts.join(" ")))
        .collect();
    for conn in &spec.connectives {
        for (c1, a1) in &phrases {
            for (c2, a2) in &phrases {
                let acts = if conn == "after" {
                    [a2.as_slice(), a1.as_slice()].concat()
                } else {
                    [a1.as_slice(), a2.as_slice()].concat()
                };
                examples.push(Example::new(&format!("{c1} {conn} {c2}"), &acts.join(" ")));
            }
        }
    }
    Dataset::new("minigrammar", examples)
}

fn contains_subsequence(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Primitive-holdout split: the held-out phrase appears in training only in
/// isolation, and every composition containing it goes to test.
///
/// Matching is on the exact contiguous token subsequence.
pub fn make_primitive_split(data: &Dataset, held_out: &str) -> Result<(Dataset, Dataset)> {
    let phrase: Vec<String> = held_out.split_whitespace().map(str::to_string).collect();
    if !data.examples.iter().any(|e| contains_subsequence(&e.source, &phrase)) {
        return Err(Error::Parameter(format!("held-out phrase {held_out:?} does not occur in {}", data.name)));
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for e in &data.examples {
        if e.source == phrase || !contains_subsequence(&e.source, &phrase) {
            train.push(e.clone());
        } else {
            test.push(e.clone());
        }
    }
    let tag = phrase.join("_");
    Ok((
        Dataset::new(format!("{}-{tag}-train", data.name), train),
        Dataset::new(format!("{}-{tag}-test", data.name), test),
    ))
}

/// Seeded validation holdout of `ceil(frac · n)` examples. Examples for which
/// `protect` returns true always stay in training.
pub fn split_validation(
    data: &Dataset,
    frac: f64,
    rng: &mut RngStream,
    protect: impl Fn(&Example) -> bool,
) -> (Dataset, Dataset) {
    let mut candidates: Vec<usize> = (0..data.len()).filter(|&i| !protect(&data.examples[i])).collect();
    rng.shuffle(&mut candidates);
    let n_valid = ((data.len() as f64 * frac).ceil() as usize).min(candidates.len());
    let mut is_valid = vec![false; data.len()];
    for &i in &candidates[..n_valid] {
        is_valid[i] = true;
    }
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for (e, v) in data.examples.iter().zip(is_valid) {
        if v {
            valid.push(e.clone());
        } else {
            train.push(e.clone());
        }
    }
    (
        Dataset::new(format!("{}-fit", data.name), train),
        Dataset::new(format!("{}-valid", data.name), valid),
    )
}

/// Seeded string-reversal corpus over tokens `w00..w{vocab-1}`.
pub fn gen_reversal(pairs: usize, vocab: usize, min_len: usize, max_len: usize, seed: u64) -> Dataset {
    let mut rng = RngStream::new(seed).substream("reversal");
    let examples = (0..pairs)
        .map(|_| {
            let len = min_len + rng.below(max_len - min_len + 1);
            let source: Vec<String> = (0..len).map(|_| format!("w{:02}", rng.below(vocab))).collect();
            let target = source.iter().rev().cloned().collect();
            Example { source, target }
        })
        .collect();
    Dataset::new("reversal", examples)
}
