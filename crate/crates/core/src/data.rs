//! Sentence-pair data: a seeded synthetic NLI-style generator, JSONL/TSV
//! readers and writers, whitespace vocabularies, and batching.
//!
//! Synthetic construction, with content ids split into a premise half and
//! a disjoint contrast half:
//!
//! - entailment: hypothesis is a sample of premise positions, plus at most
//!   one filler token (neutral hypotheses get fillers at the same rate)
//! - contradiction: hypothesis holds `NEG` directly followed by a premise
//!   token, padded out with contrast-half tokens
//! - neutral: hypothesis drawn from the premise half, with at most 30% of
//!   its tokens taken from the premise
//!
//! Only entailment vs neutral needs the two sentences compared token by
//! token; a model that encodes each sentence separately can only spot `NEG`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{TokenSeq, PAD_ID};
use crate::error::{Error, Result};

pub const NEG_ID: u32 = 1;
/// Reserved id for out-of-vocabulary words in file-built vocabularies.
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
/// How synthetic `NEG` is rendered when written to text.
pub const NEG_WORD: &str = "not";

/// Largest fraction of a neutral hypothesis drawn from its premise.
pub const NEUTRAL_MAX_OVERLAP: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Entailment = 0,
    Contradiction = 1,
    Neutral = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Entailment, Label::Contradiction, Label::Neutral];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Entailment => "entailment",
            Label::Contradiction => "contradiction",
            Label::Neutral => "neutral",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "entailment" | "0" => Ok(Label::Entailment),
            "contradiction" | "1" => Ok(Label::Contradiction),
            "neutral" | "2" => Ok(Label::Neutral),
            _ => Err(s.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub premise: TokenSeq,
    pub hypothesis: TokenSeq,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub premise_len: (usize, usize),
    pub hypothesis_len: (usize, usize),
    pub max_len: usize,
    pub seed: u64,
    pub negation_token_id: u32,
    pub n_fillers: usize,
    /// Target share of each class, indexed by [`Label::index`].
    pub class_balance: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 200,
            n_train: 3000,
            n_dev: 600,
            n_test: 600,
            premise_len: (4, 12),
            hypothesis_len: (3, 8),
            max_len: 24,
            seed: 42,
            negation_token_id: NEG_ID,
            n_fillers: 4,
            class_balance: [1.0 / 3.0; 3],
        }
    }
}

/// Token id ranges derived from a [`SynthConfig`].
#[derive(Debug, Clone)]
struct SynthVocab {
    neg: u32,
    fillers: Vec<u32>,
    premise_half: Vec<u32>,
    contrast_half: Vec<u32>,
}

impl SynthConfig {
    fn layout(&self) -> Result<SynthVocab> {
        let (pmin, pmax) = self.premise_len;
        let (hmin, hmax) = self.hypothesis_len;
        if self.n_train < 1 || self.n_dev < 1 || self.n_test < 1 {
            return Err(Error::Config("every split needs at least one example".into()));
        }
        if pmin < 1 || hmin < 1 || pmin > pmax || hmin > hmax {
            return Err(Error::Config(format!(
                "bad length ranges: premise {pmin}..={pmax}, hypothesis {hmin}..={hmax}"
            )));
        }
        if hmax < 2 {
            return Err(Error::Config("hypotheses need room for NEG plus a premise token".into()));
        }
        if pmax > self.max_len || hmax > self.max_len {
            return Err(Error::Config(format!(
                "sentence lengths exceed max_len {}",
                self.max_len
            )));
        }
        let neg = self.negation_token_id;
        if neg == PAD_ID || neg as usize >= self.vocab_size {
            return Err(Error::Config(format!("negation id {neg} must be in 1..vocab_size")));
        }
        if self.class_balance.iter().any(|w| !(*w >= 0.0)) || self.class_balance.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("class balance must be non-negative and not all zero".into()));
        }
        let free: Vec<u32> = (0..self.vocab_size as u32)
            .filter(|&id| id != PAD_ID && id != neg)
            .collect();
        if free.len() < self.n_fillers {
            return Err(Error::Config("vocabulary too small for fillers".into()));
        }
        let (fillers, content) = free.split_at(self.n_fillers);
        let half = content.len() / 2;
        let (premise_half, contrast_half) = content.split_at(half);
        // Neutral hypotheses need premise-half tokens absent from the premise.
        if premise_half.len() < pmax + hmax || contrast_half.len() < hmax {
            return Err(Error::Config(format!(
                "vocab_size {} too small for disjoint halves (need premise half >= {}, contrast half >= {})",
                self.vocab_size,
                pmax + hmax,
                hmax
            )));
        }
        Ok(SynthVocab {
            neg,
            fillers: fillers.to_vec(),
            premise_half: premise_half.to_vec(),
            contrast_half: contrast_half.to_vec(),
        })
    }
}

/// Exact per-class counts for `n` examples by largest remainder.
pub fn class_counts(n: usize, balance: &[f64; 3]) -> [usize; 3] {
    let total: f64 = balance.iter().sum();
    let shares: Vec<f64> = balance.iter().map(|w| w / total * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, s) in counts.iter_mut().zip(&shares) {
        *c = s.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = shares[a] - shares[a].floor();
        let rb = shares[b] - shares[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[c] += 1;
        left -= 1;
    }
    counts
}

/// Inserts one filler at a random position with probability 1/2, if room remains.
fn maybe_filler(rng: &mut ChaCha8Rng, hyp: &mut Vec<u32>, hmax: usize, v: &SynthVocab) {
    if !v.fillers.is_empty() && hyp.len() < hmax && rng.gen_bool(0.5) {
        let at = rng.gen_range(0..=hyp.len());
        hyp.insert(at, *v.fillers.choose(rng).expect("non-empty"));
    }
}

fn sample_hypothesis(rng: &mut ChaCha8Rng, label: Label, premise: &[u32], cfg: &SynthConfig, v: &SynthVocab) -> Vec<u32> {
    let (hmin, hmax) = cfg.hypothesis_len;
    match label {
        Label::Entailment => {
            let len = rng.gen_range(hmin..=hmax).min(premise.len());
            let mut positions: Vec<usize> = (0..premise.len()).collect();
            positions.shuffle(rng);
            let mut hyp: Vec<u32> = positions[..len].iter().map(|&p| premise[p]).collect();
            maybe_filler(rng, &mut hyp, hmax, v);
            hyp
        }
        Label::Contradiction => {
            let len = rng.gen_range(hmin.max(2)..=hmax);
            let mut rest: Vec<u32> = (0..len - 2)
                .map(|_| *v.contrast_half.choose(rng).expect("non-empty"))
                .collect();
            let at = rng.gen_range(0..=rest.len());
            let anchor = *premise.choose(rng).expect("premise non-empty");
            rest.splice(at..at, [v.neg, anchor]);
            rest
        }
        Label::Neutral => {
            let len = rng.gen_range(hmin..=hmax);
            let max_overlap = (NEUTRAL_MAX_OVERLAP * len as f64).floor() as usize;
            let overlap = rng.gen_range(0..=max_overlap.min(premise.len()));
            let in_premise: HashSet<u32> = premise.iter().copied().collect();
            let outside: Vec<u32> = v
                .premise_half
                .iter()
                .copied()
                .filter(|id| !in_premise.contains(id))
                .collect();
            let mut hyp: Vec<u32> = premise.choose_multiple(rng, overlap).copied().collect();
            while hyp.len() < len {
                hyp.push(*outside.choose(rng).expect("layout guarantees outside tokens"));
            }
            hyp.shuffle(rng);
            // same filler rate as entailment, so a filler carries no label signal
            maybe_filler(rng, &mut hyp, hmax, v);
            hyp
        }
    }
}

fn generate_split(
    rng: &mut ChaCha8Rng,
    n: usize,
    cfg: &SynthConfig,
    v: &SynthVocab,
    seen: &mut HashSet<(Vec<u32>, Vec<u32>)>,
) -> Result<Vec<Example>> {
    let counts = class_counts(n, &cfg.class_balance);
    let mut labels: Vec<Label> = Label::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&l, c)| std::iter::repeat_n(l, c))
        .collect();
    labels.shuffle(rng);
    let (pmin, pmax) = cfg.premise_len;
    let mut out = Vec::with_capacity(n);
    for label in labels {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > 1000 {
                return Err(Error::Config("cannot draw enough distinct examples; enlarge the vocabulary".into()));
            }
            let plen = rng.gen_range(pmin..=pmax);
            let premise: Vec<u32> = (0..plen)
                .map(|_| *v.premise_half.choose(rng).expect("non-empty"))
                .collect();
            let hyp = sample_hypothesis(rng, label, &premise, cfg, v);
            if seen.insert((premise.clone(), hyp.clone())) {
                out.push(Example {
                    premise: TokenSeq::new(&premise, cfg.max_len)?,
                    hypothesis: TokenSeq::new(&hyp, cfg.max_len)?,
                    label,
                });
                break;
            }
        }
    }
    Ok(out)
}

/// Deterministic train/dev/test splits; no (premise, hypothesis) pair repeats
/// within or across splits.
pub fn generate(cfg: &SynthConfig) -> Result<Splits> {
    let layout = cfg.layout()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen = HashSet::new();
    let train = generate_split(&mut rng, cfg.n_train, cfg, &layout, &mut seen)?;
    let dev = generate_split(&mut rng, cfg.n_dev, cfg, &layout, &mut seen)?;
    let test = generate_split(&mut rng, cfg.n_test, cfg, &layout, &mut seen)?;
    Ok(Splits { train, dev, test })
}

/// Filler ids of a synthetic configuration.
pub fn filler_ids(cfg: &SynthConfig) -> Result<Vec<u32>> {
    Ok(cfg.layout()?.fillers)
}

/// A labeled sentence pair as text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub premise: String,
    pub hypothesis: String,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Tsv,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(Format::Jsonl),
            "tsv" => Ok(Format::Tsv),
            other => Err(Error::Config(format!("unknown format {other:?} (expected jsonl or tsv)"))),
        }
    }
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Jsonl => "jsonl",
            Format::Tsv => "tsv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoadedSplit {
    pub records: Vec<RawExample>,
    /// Records whose label was `-` (no annotator consensus).
    pub skipped: usize,
}

fn field<'a>(obj: &'a serde_json::Map<String, serde_json::Value>, names: &[&str]) -> Option<&'a serde_json::Value> {
    names.iter().find_map(|n| obj.get(*n))
}

enum Parsed {
    Record(RawExample),
    Unlabeled,
}

fn parse_label(raw: &str, line: usize) -> Result<Option<Label>> {
    if raw.trim() == "-" {
        return Ok(None);
    }
    raw.parse().map(Some).map_err(|label| Error::Label { line, label })
}

fn parse_jsonl_line(text: &str, line: usize) -> Result<Parsed> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| Error::Parse {
        line,
        message: "expected a JSON object".into(),
    })?;
    let text_field = |names: &[&str]| -> Result<String> {
        match field(obj, names) {
            Some(serde_json::Value::String(s)) => Ok(s.clone()),
            _ => Err(Error::Parse {
                line,
                message: format!("missing string field {}", names.join("/")),
            }),
        }
    };
    let premise = text_field(&["premise", "sentence1"])?;
    let hypothesis = text_field(&["hypothesis", "sentence2"])?;
    let raw_label = match field(obj, &["label", "gold_label"]) {
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(serde_json::Value::Number(n)) => n.to_string(),
        _ => {
            return Err(Error::Parse {
                line,
                message: "missing field label/gold_label".into(),
            })
        }
    };
    Ok(match parse_label(&raw_label, line)? {
        Some(label) => Parsed::Record(RawExample {
            premise,
            hypothesis,
            label,
        }),
        None => Parsed::Unlabeled,
    })
}

fn parse_tsv_line(text: &str, line: usize) -> Result<Parsed> {
    let fields: Vec<&str> = text.split('\t').collect();
    if fields.len() != 3 {
        return Err(Error::Parse {
            line,
            message: format!("expected 3 tab-separated fields, found {}", fields.len()),
        });
    }
    Ok(match parse_label(fields[2], line)? {
        Some(label) => Parsed::Record(RawExample {
            premise: fields[0].to_string(),
            hypothesis: fields[1].to_string(),
            label,
        }),
        None => Parsed::Unlabeled,
    })
}

/// Reads a JSONL or TSV split. Blank lines are ignored; line numbers in
/// errors are 1-based.
pub fn load_file(path: &Path, format: Format) -> Result<LoadedSplit> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = LoadedSplit::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|e| Error::io(path, e))?;
        let text = text.trim_end_matches('\r');
        if text.trim().is_empty() {
            continue;
        }
        let parsed = match format {
            Format::Jsonl => parse_jsonl_line(text, line_no)?,
            Format::Tsv => parse_tsv_line(text, line_no)?,
        };
        match parsed {
            Parsed::Record(r) => out.records.push(r),
            Parsed::Unlabeled => out.skipped += 1,
        }
    }
    Ok(out)
}

pub fn save_file(path: &Path, records: &[RawExample], format: Format) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        match format {
            Format::Jsonl => {
                serde_json::to_writer(&mut buf, r)?;
                buf.push(b'\n');
            }
            Format::Tsv => {
                if [&r.premise, &r.hypothesis].iter().any(|s| s.contains('\t') || s.contains('\n')) {
                    return Err(Error::Config("TSV fields may not contain tabs or newlines".into()));
                }
                writeln!(buf, "{}\t{}\t{}", r.premise, r.hypothesis, r.label).expect("write to Vec");
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Renders synthetic token ids as words: `NEG` becomes [`NEG_WORD`], every
/// other id `i` becomes `w{i}`.
pub fn render_tokens(seq: &TokenSeq, neg_id: u32) -> String {
    seq.tokens()
        .iter()
        .map(|&id| if id == neg_id { NEG_WORD.to_string() } else { format!("w{id}") })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn to_raw(examples: &[Example], neg_id: u32) -> Vec<RawExample> {
    examples
        .iter()
        .map(|e| RawExample {
            premise: render_tokens(&e.premise, neg_id),
            hypothesis: render_tokens(&e.hypothesis, neg_id),
            label: e.label,
        })
        .collect()
}

/// Word-to-id table with `PAD = 0` and `UNK = 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(Error::Config("vocabulary must start with <pad>, <unk>".into()));
        }
        let index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        if index.len() != tokens.len() {
            return Err(Error::Config("duplicate vocabulary entry".into()));
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Most frequent words first, ties broken lexicographically. `max_size`
/// bounds the number of regular words (reserved entries not counted).
pub fn build_vocab<'a>(corpus: impl IntoIterator<Item = &'a str>, max_size: Option<usize>) -> Vocab {
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for doc in corpus {
        for w in words(doc) {
            if w == PAD_TOKEN || w == UNK_TOKEN {
                continue;
            }
            *freq.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if let Some(cap) = max_size {
        ranked.truncate(cap);
    }
    let tokens = [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
        .into_iter()
        .chain(ranked.into_iter().map(|(w, _)| w))
        .collect();
    Vocab::from_tokens(tokens).expect("reserved entries present")
}

/// Lowercased whitespace tokens, truncated to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> TokenSeq {
    let ids: Vec<u32> = words(text).take(max_len).map(|w| vocab.id(&w)).collect();
    TokenSeq::new(&ids, max_len).expect("truncated to max_len")
}

/// Tokenizes text records into examples. Empty sentences are rejected.
pub fn encode_records(records: &[RawExample], vocab: &Vocab, max_len: usize) -> Result<Vec<Example>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let premise = tokenize(&r.premise, vocab, max_len);
            let hypothesis = tokenize(&r.hypothesis, vocab, max_len);
            if premise.is_empty() || hypothesis.is_empty() {
                return Err(Error::Config(format!("record {} has an empty sentence", i + 1)));
            }
            Ok(Example {
                premise,
                hypothesis,
                label: r.label,
            })
        })
        .collect()
}

/// Splits indices `0..labels.len()` into batches of exactly `k`, shuffled by
/// `seed`. The incomplete tail is dropped.
///
/// With `stratify`, every batch holds at least two examples of each class
/// present, so every anchor has a positive. Per-class quotas are 2 plus a
/// share of the remaining `k − 2C` proportional to class frequency.
pub fn make_batches(labels: &[usize], k: usize, seed: u64, stratify: bool) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("batch size must be >= 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if !stratify {
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut rng);
        return Ok(order.chunks_exact(k).map(<[usize]>::to_vec).collect());
    }

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let n_classes = by_class.len();
    if k < 2 * n_classes {
        return Err(Error::Config(format!(
            "stratified batches of {k} cannot hold 2 of each of {n_classes} classes"
        )));
    }
    let n = labels.len() as f64;
    let extra = k - 2 * n_classes;
    let shares: Vec<f64> = by_class.values().map(|v| v.len() as f64 / n * extra as f64).collect();
    let mut quotas: Vec<usize> = shares.iter().map(|s| 2 + s.floor() as usize).collect();
    let mut order: Vec<usize> = (0..n_classes).collect();
    order.sort_by(|&a, &b| {
        (shares[b] - shares[b].floor())
            .total_cmp(&(shares[a] - shares[a].floor()))
            .then(a.cmp(&b))
    });
    let mut left = k - quotas.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        quotas[c] += 1;
        left -= 1;
    }

    let mut pools: Vec<Vec<usize>> = by_class.into_values().collect();
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let n_batches = pools
        .iter()
        .zip(&quotas)
        .map(|(p, &q)| p.len() / q)
        .min()
        .unwrap_or(0);
    let mut batches = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let mut batch: Vec<usize> = pools
            .iter()
            .zip(&quotas)
            .flat_map(|(p, &q)| p[b * q..(b + 1) * q].iter().copied())
            .collect();
        batch.shuffle(&mut rng);
        batches.push(batch);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_train: 300,
            n_dev: 60,
            n_test: 60,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_cfg()).unwrap();
        let b = generate(&small_cfg()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthConfig { seed: 43, ..small_cfg() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn entailment_is_a_sub_multiset() {
        let cfg = small_cfg();
        let fillers: HashSet<u32> = filler_ids(&cfg).unwrap().into_iter().collect();
        let splits = generate(&cfg).unwrap();
        for e in splits.train.iter().filter(|e| e.label == Label::Entailment) {
            let mut pool: HashMap<u32, usize> = HashMap::new();
            for &t in e.premise.tokens() {
                *pool.entry(t).or_default() += 1;
            }
            let mut n_fill = 0;
            for &t in e.hypothesis.tokens() {
                if fillers.contains(&t) {
                    n_fill += 1;
                    continue;
                }
                let slot = pool.get_mut(&t).expect("hypothesis token missing from premise");
                assert!(*slot > 0);
                *slot -= 1;
            }
            assert!(n_fill <= 1);
        }
    }

    #[test]
    fn contradiction_and_neutral_structure() {
        let cfg = small_cfg();
        let splits = generate(&cfg).unwrap();
        for e in &splits.train {
            let h = e.hypothesis.tokens();
            let p: HashSet<u32> = e.premise.tokens().iter().copied().collect();
            match e.label {
                Label::Contradiction => {
                    let at = h.iter().position(|&t| t == NEG_ID).expect("NEG present");
                    assert!(p.contains(&h[at + 1]));
                }
                Label::Neutral => {
                    assert!(!h.contains(&NEG_ID));
                    let overlap = h.iter().filter(|t| p.contains(t)).count();
                    assert!(overlap as f64 <= NEUTRAL_MAX_OVERLAP * h.len() as f64);
                }
                Label::Entailment => assert!(!h.contains(&NEG_ID)),
            }
        }
    }

    #[test]
    fn class_counts_are_exact() {
        let splits = generate(&small_cfg()).unwrap();
        for split in [&splits.train, &splits.dev, &splits.test] {
            let n = split.len();
            for l in Label::ALL {
                assert_eq!(split.iter().filter(|e| e.label == l).count(), n / 3);
            }
        }
        assert_eq!(class_counts(10, &[1.0, 1.0, 1.0]), [4, 3, 3]);
        assert_eq!(class_counts(10, &[0.5, 0.25, 0.25]), [5, 3, 2]);
    }

    #[test]
    fn splits_are_disjoint_and_in_vocab() {
        let cfg = small_cfg();
        let splits = generate(&cfg).unwrap();
        let mut seen = HashSet::new();
        for e in splits.train.iter().chain(&splits.dev).chain(&splits.test) {
            assert!(seen.insert((e.premise.clone(), e.hypothesis.clone())));
            assert!(e.premise.ids().iter().chain(e.hypothesis.ids()).all(|&t| (t as usize) < cfg.vocab_size));
            assert!(!e.premise.is_empty() && !e.hypothesis.is_empty());
        }
    }

    #[test]
    fn infeasible_configs() {
        assert!(generate(&SynthConfig { vocab_size: 30, ..small_cfg() }).is_err());
        assert!(generate(&SynthConfig { n_dev: 0, ..small_cfg() }).is_err());
        assert!(generate(&SynthConfig { negation_token_id: 0, ..small_cfg() }).is_err());
        assert!(generate(&SynthConfig { premise_len: (5, 4), ..small_cfg() }).is_err());
    }

    #[test]
    fn tokenize_lowercases_and_maps_unknown() {
        let vocab = build_vocab(["a b c"], None);
        let s = tokenize("A a  a", &vocab, 8);
        assert_eq!(s.len(), 3);
        assert!(s.tokens().iter().all(|&t| t == s.tokens()[0]));
        assert_ne!(s.tokens()[0], UNK_ID);
        assert_eq!(tokenize("zebra", &vocab, 8).tokens(), &[UNK_ID]);
        assert_eq!(tokenize("a b c a b c", &vocab, 4).len(), 4);
    }

    #[test]
    fn vocab_frequency_then_lexicographic() {
        // counts: the 3, cat 2, a 2, sat 1, mat 1, on 1, dog 1
        let vocab = build_vocab(["the cat sat on the mat", "a cat a dog the"], Some(5));
        assert_eq!(
            vocab.tokens(),
            &["<pad>", "<unk>", "the", "a", "cat", "dog", "mat"]
        );
        assert_eq!(vocab.id("sat"), UNK_ID);
    }

    #[test]
    fn unstratified_full_batch_is_a_permutation() {
        let labels = vec![0, 1, 2, 0, 1, 2, 0];
        let batches = make_batches(&labels, 7, 3, false).unwrap();
        assert_eq!(batches.len(), 1);
        let mut b = batches[0].clone();
        b.sort();
        assert_eq!(b, (0..7).collect::<Vec<_>>());
        assert_eq!(make_batches(&labels, 3, 3, false).unwrap().len(), 2);
    }

    #[test]
    fn stratified_batches_cover_every_class() {
        let labels: Vec<usize> = (0..120).map(|i| i % 3).collect();
        let batches = make_batches(&labels, 12, 5, true).unwrap();
        assert_eq!(batches.len(), 10);
        for b in &batches {
            assert_eq!(b.len(), 12);
            for c in 0..3 {
                assert!(b.iter().filter(|&&i| labels[i] == c).count() >= 2);
            }
        }
        let mut all: Vec<usize> = batches.concat();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 120);
        assert!(matches!(make_batches(&labels, 5, 5, true), Err(Error::Config(_))));
        assert!(make_batches(&labels, 1, 5, false).is_err());
    }

    #[test]
    fn batching_is_seeded() {
        let labels: Vec<usize> = (0..90).map(|i| i % 3).collect();
        assert_eq!(
            make_batches(&labels, 9, 11, true).unwrap(),
            make_batches(&labels, 9, 11, true).unwrap()
        );
        assert_ne!(
            make_batches(&labels, 9, 11, true).unwrap(),
            make_batches(&labels, 9, 12, true).unwrap()
        );
    }
}
