//! Tokenization, vocabularies, encoded corpora and the synthetic
//! Zipf–Mandelbrot corpus generator.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_text, write_text};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const NUM_SPECIAL: usize = 4;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Ordinary tokens per synthetic sequence, excluding BOS/EOS.
pub const SYNTH_CHUNK_LEN: usize = 64;

pub fn is_special(id: TokenId) -> bool {
    id < NUM_SPECIAL
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerScheme {
    Whitespace,
    Bytes,
}

/// Splits text into token strings. Implemented by the built-in schemes; other
/// tokenizers (BPE, sentencepiece) can plug in behind the same trait.
pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

impl Tokenizer for TokenizerScheme {
    fn tokenize(&self, text: &str) -> Vec<String> {
        match self {
            TokenizerScheme::Whitespace => text.split_whitespace().map(str::to_owned).collect(),
            TokenizerScheme::Bytes => text.bytes().map(|b| format!("{b:02X}")).collect(),
        }
    }
}

pub fn tokenize(text: &str, scheme: TokenizerScheme) -> Vec<String> {
    scheme.tokenize(text)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::specials_only()
    }
}

impl Vocab {
    pub fn specials_only() -> Self {
        let id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            token_to_id,
            id_to_token,
        }
    }

    /// Builds a vocabulary from ordinary tokens listed in id order (id 4 first).
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::specials_only();
        for tok in tokens {
            let tok = tok.into();
            if vocab.token_to_id.contains_key(&tok) {
                return Err(Error::Data(format!(
                    "duplicate token {tok:?} in vocabulary"
                )));
            }
            vocab
                .token_to_id
                .insert(tok.clone(), vocab.id_to_token.len());
            vocab.id_to_token.push(tok);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with_provenance(path, "")
    }

    pub fn save_with_provenance(&self, path: &Path, provenance: &str) -> Result<()> {
        let mut out = header_line(&format!("#vocab v1 size={}", self.len()), provenance);
        for (id, tok) in self.id_to_token.iter().enumerate() {
            out.push_str(&format!("{id}\t{tok}\n"));
        }
        write_text(path, &out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut tokens = Vec::new();
        for (i, line) in data_lines(&text).enumerate() {
            let lineno = i + 1 + usize::from(has_header(&text));
            let (id, tok) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, lineno, "expected `id<TAB>token`"))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad id {id:?}")))?;
            if id != i {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("id {id} out of order, expected {i}"),
                ));
            }
            if id < NUM_SPECIAL {
                if tok != SPECIAL_TOKENS[id] {
                    return Err(Error::parse(
                        path,
                        lineno,
                        format!("id {id} must be {}", SPECIAL_TOKENS[id]),
                    ));
                }
            } else {
                tokens.push(tok.to_string());
            }
        }
        if data_lines(&text).count() < NUM_SPECIAL {
            return Err(Error::parse(path, 0, "missing special tokens"));
        }
        Self::from_tokens(tokens).map_err(|e| Error::parse(path, 0, e.to_string()))
    }
}

/// Assigns ids 4.. to tokens seen at least `min_count` times, most frequent
/// first, ties in lexicographic order.
pub fn build_vocab<I, S>(tokens: I, min_count: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if min_count < 1 {
        return Err(Error::config("min_count", "must be >= 1"));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for tok in tokens {
        let tok = tok.as_ref();
        if SPECIAL_TOKENS.contains(&tok) {
            continue;
        }
        *counts.entry(tok.to_owned()).or_default() += 1;
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .collect();
    kept.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));
    Vocab::from_tokens(kept.into_iter().map(|(t, _)| t))
}

/// Frames a token list as `BOS body EOS`, mapping unknown tokens to UNK.
pub fn encode<S: AsRef<str>>(vocab: &Vocab, tokens: &[S]) -> Vec<TokenId> {
    let mut ids = Vec::with_capacity(tokens.len() + 2);
    ids.push(BOS);
    ids.extend(tokens.iter().map(|t| vocab.id(t.as_ref()).unwrap_or(UNK)));
    ids.push(EOS);
    ids
}

/// Inverse of [`encode`] for in-vocabulary tokens: strips the BOS/EOS frame.
pub fn decode(vocab: &Vocab, ids: &[TokenId]) -> Result<Vec<String>> {
    let body = match ids {
        [BOS, body @ .., EOS] => body,
        _ => ids,
    };
    body.iter()
        .map(|&id| {
            vocab.token(id).map(str::to_owned).ok_or_else(|| {
                Error::Data(format!("id {id} not in vocabulary of size {}", vocab.len()))
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedCorpus {
    pub sequences: Vec<Vec<TokenId>>,
    pub vocab_size: usize,
}

impl EncodedCorpus {
    pub fn new(sequences: Vec<Vec<TokenId>>, vocab_size: usize) -> Result<Self> {
        let corpus = EncodedCorpus {
            sequences,
            vocab_size,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn from_texts<S: AsRef<str>>(vocab: &Vocab, texts: &[S], scheme: TokenizerScheme) -> Self {
        let sequences = texts
            .iter()
            .map(|t| encode(vocab, &tokenize(t.as_ref(), scheme)))
            .collect();
        EncodedCorpus {
            sequences,
            vocab_size: vocab.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (s, seq) in self.sequences.iter().enumerate() {
            if seq.len() < 2 {
                return Err(Error::Data(format!(
                    "sequence {s} has length {} < 2",
                    seq.len()
                )));
            }
            if let Some((p, &id)) = seq
                .iter()
                .enumerate()
                .find(|(_, &id)| id >= self.vocab_size)
            {
                return Err(Error::Data(format!(
                    "sequence {s} position {p}: id {id} >= vocab size {}",
                    self.vocab_size
                )));
            }
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with_provenance(path, "")
    }

    pub fn save_with_provenance(&self, path: &Path, provenance: &str) -> Result<()> {
        let mut out = header_line(
            &format!(
                "#corpus v1 vocab_size={} sequences={}",
                self.vocab_size,
                self.sequences.len()
            ),
            provenance,
        );
        for seq in &self.sequences {
            let line: Vec<String> = seq.iter().map(|id| id.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        write_text(path, &out)
    }

    pub fn load(path: &Path, vocab_size: usize) -> Result<Self> {
        let text = read_text(path)?;
        let mut sequences = Vec::new();
        let skip = usize::from(has_header(&text));
        for (i, line) in data_lines(&text).enumerate() {
            let seq = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<TokenId>().map_err(|_| {
                        Error::parse(path, i + 1 + skip, format!("bad token id {t:?}"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            sequences.push(seq);
        }
        EncodedCorpus::new(sequences, vocab_size).map_err(|e| Error::parse(path, 0, e.to_string()))
    }
}

fn header_line(kind: &str, provenance: &str) -> String {
    if provenance.is_empty() {
        format!("{kind}\n")
    } else {
        format!("{kind} {provenance}\n")
    }
}

// Data lines never start with `#`, so a leading `#` line is the header.
fn has_header(text: &str) -> bool {
    text.starts_with('#')
}

fn data_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().skip(usize::from(has_header(text)))
}

/// A planted deterministic bigram: `trigger` is always followed by `target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub trigger: TokenId,
    pub target: TokenId,
}

pub fn save_rules(rules: &[Rule], path: &Path) -> Result<()> {
    save_rules_with_provenance(rules, path, "")
}

pub fn save_rules_with_provenance(rules: &[Rule], path: &Path, provenance: &str) -> Result<()> {
    let mut out = header_line(&format!("#rules v1 count={}", rules.len()), provenance);
    for r in rules {
        out.push_str(&format!("{}\t{}\n", r.trigger, r.target));
    }
    write_text(path, &out)
}

pub fn load_rules(path: &Path) -> Result<Vec<Rule>> {
    let text = read_text(path)?;
    let skip = usize::from(has_header(&text));
    data_lines(&text)
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::parse(path, i + 1 + skip, "expected `trigger<TAB>target`");
            let (a, b) = line.split_once('\t').ok_or_else(bad)?;
            Ok(Rule {
                trigger: a.parse().map_err(|_| bad())?,
                target: b.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Parameters of the synthetic corpus. `vocab_size` counts ordinary tokens
/// only; the rank-`r` token (1-based) gets id `r + 3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub zipf_exponent: f64,
    pub zipf_shift: f64,
    pub num_tokens: usize,
    pub num_rules: usize,
    /// Explicit rule ids; when both are empty and `num_rules > 0`, rules are
    /// drawn from the seed.
    #[serde(default)]
    pub rule_trigger_ids: Vec<TokenId>,
    #[serde(default)]
    pub rule_target_ids: Vec<TokenId>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 1000,
            zipf_exponent: 1.1,
            zipf_shift: 2.7,
            num_tokens: 1_000_000,
            num_rules: 0,
            rule_trigger_ids: Vec::new(),
            rule_target_ids: Vec::new(),
            seed: 0,
        }
    }
}

pub fn rank_to_id(rank: usize) -> TokenId {
    rank + NUM_SPECIAL - 1
}

pub fn id_to_rank(id: TokenId) -> usize {
    id + 1 - NUM_SPECIAL
}

/// Target pmf over ranks 1..=n: P(r) ∝ (r + q)^(-s). Index 0 is rank 1.
pub fn zipf_mandelbrot_pmf(n: usize, s: f64, q: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|r| (r as f64 + q).powf(-s)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / z).collect()
}

impl SynthConfig {
    /// Ids in the rarest quartile of the rank distribution.
    fn rarest_quartile(&self) -> std::ops::RangeInclusive<TokenId> {
        let first_rank = self.vocab_size - self.vocab_size / 4 + 1;
        rank_to_id(first_rank)..=rank_to_id(self.vocab_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::config("vocab_size", "must be >= 4"));
        }
        if !(self.zipf_exponent > 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::config(
                "zipf_exponent",
                "must be a finite positive number",
            ));
        }
        if !(self.zipf_shift >= 0.0 && self.zipf_shift.is_finite()) {
            return Err(Error::config(
                "zipf_shift",
                "must be a finite nonnegative number",
            ));
        }
        if self.num_tokens == 0 {
            return Err(Error::config("num_tokens", "must be > 0"));
        }
        if self.rule_trigger_ids.len() != self.rule_target_ids.len() {
            return Err(Error::config(
                "rule_target_ids",
                "must have the same length as rule_trigger_ids",
            ));
        }
        let explicit = !self.rule_trigger_ids.is_empty();
        if explicit && self.rule_trigger_ids.len() != self.num_rules {
            return Err(Error::config(
                "num_rules",
                "must equal the number of explicit rules",
            ));
        }
        if !explicit && 2 * self.num_rules > self.rarest_quartile().count() {
            return Err(Error::config(
                "num_rules",
                "more rules than rare-token slots",
            ));
        }
        let triggers: BTreeSet<_> = self.rule_trigger_ids.iter().collect();
        if triggers.len() != self.rule_trigger_ids.len() {
            return Err(Error::config(
                "rule_trigger_ids",
                "trigger ids must be distinct",
            ));
        }
        let last_id = rank_to_id(self.vocab_size);
        for &t in &self.rule_trigger_ids {
            if !(NUM_SPECIAL..=last_id).contains(&t) {
                return Err(Error::config(
                    "rule_trigger_ids",
                    format!("id {t} is not an ordinary token"),
                ));
            }
            if self.rule_target_ids.contains(&t) {
                return Err(Error::config(
                    "rule_trigger_ids",
                    format!("id {t} is also a rule target"),
                ));
            }
        }
        let rare = self.rarest_quartile();
        for &t in &self.rule_target_ids {
            if !rare.contains(&t) {
                return Err(Error::config(
                    "rule_target_ids",
                    format!(
                        "id {t} outside the rarest quartile {}..={}",
                        rare.start(),
                        rare.end()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Resolves the rule list. Without explicit ids, triggers and targets
    /// are distinct ids drawn from the rarest quartile, so that the targets
    /// stay rare after planting.
    pub fn rules(&self) -> Vec<Rule> {
        if !self.rule_trigger_ids.is_empty() {
            return self
                .rule_trigger_ids
                .iter()
                .zip(&self.rule_target_ids)
                .map(|(&trigger, &target)| Rule { trigger, target })
                .collect();
        }
        // Separate stream so rule choice does not perturb token sampling.
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5275_6c65_7321_0001);
        let ids = sample_distinct(&mut rng, self.rarest_quartile(), 2 * self.num_rules);
        let (triggers, targets) = ids.split_at(self.num_rules);
        triggers
            .iter()
            .zip(targets)
            .map(|(&trigger, &target)| Rule { trigger, target })
            .collect()
    }
}

fn sample_distinct(
    rng: &mut ChaCha8Rng,
    range: std::ops::RangeInclusive<TokenId>,
    k: usize,
) -> Vec<TokenId> {
    let mut pool: Vec<TokenId> = range.collect();
    // Partial Fisher–Yates.
    for i in 0..k {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Draws ranks from a finite Zipf–Mandelbrot law by inverting the CDF.
#[derive(Debug, Clone)]
pub struct ZipfSampler {
    cdf: Vec<f64>,
}

impl ZipfSampler {
    pub fn new(n: usize, s: f64, q: f64) -> Self {
        let mut acc = 0.0;
        let cdf = zipf_mandelbrot_pmf(n, s, q)
            .into_iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        ZipfSampler { cdf }
    }

    /// Returns a 1-based rank.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let idx = self.cdf.partition_point(|&c| c <= u);
        idx.min(self.cdf.len() - 1) + 1
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub vocab: Vocab,
    pub corpus: EncodedCorpus,
    pub rules: Vec<Rule>,
}

/// Generates a deterministic Zipf–Mandelbrot corpus with planted rules.
///
/// Tokens are i.i.d. by rank except that an emitted trigger is always
/// followed by its target. Sequences hold [`SYNTH_CHUNK_LEN`] ordinary tokens
/// (the last one may be shorter). A trigger drawn for the final slot of a
/// sequence is redrawn, so every trigger occurrence has its target right
/// after it inside the same sequence.
pub fn generate_zipf_corpus(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let vocab = Vocab::from_tokens((1..=config.vocab_size).map(|r| format!("w{r}")))?;
    let rules = config.rules();
    let mut rule_of = vec![None; vocab.len()];
    for r in &rules {
        rule_of[r.trigger] = Some(r.target);
    }

    let sampler = ZipfSampler::new(config.vocab_size, config.zipf_exponent, config.zipf_shift);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sequences = Vec::with_capacity(config.num_tokens / SYNTH_CHUNK_LEN + 1);
    let mut remaining = config.num_tokens;
    while remaining > 0 {
        let len = remaining.min(SYNTH_CHUNK_LEN);
        let mut seq = Vec::with_capacity(len + 2);
        seq.push(BOS);
        let mut i = 0;
        while i < len {
            let id = rank_to_id(sampler.sample(&mut rng));
            match rule_of[id] {
                Some(target) if i + 1 < len => {
                    seq.push(id);
                    seq.push(target);
                    i += 2;
                }
                Some(_) => continue,
                None => {
                    seq.push(id);
                    i += 1;
                }
            }
        }
        seq.push(EOS);
        sequences.push(seq);
        remaining -= len;
    }
    let corpus = EncodedCorpus {
        sequences,
        vocab_size: vocab.len(),
    };
    Ok(SynthCorpus {
        vocab,
        corpus,
        rules,
    })
}

/// Number of trigger occurrences not immediately followed by their target.
pub fn rule_violations(corpus: &EncodedCorpus, rules: &[Rule]) -> usize {
    let mut violations = 0;
    for seq in &corpus.sequences {
        for (i, &id) in seq.iter().enumerate() {
            if let Some(rule) = rules.iter().find(|r| r.trigger == id) {
                if seq.get(i + 1) != Some(&rule.target) {
                    violations += 1;
                }
            }
        }
    }
    violations
}
