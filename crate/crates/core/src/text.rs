//! Text similarity: tokenisation, BLEU, technical-term substitution and
//! pluggable note embedders.

use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EMBEDDING_DIM: usize = 256;

/// Lowercased maximal alphanumeric runs. "TC67" is one token, "TC 67" two.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuConfig {
    /// Highest n-gram order; precisions are weighted uniformly up to it.
    pub n_max: usize,
}

impl Default for BleuConfig {
    fn default() -> Self {
        BleuConfig { n_max: 1 }
    }
}

/// Sentence BLEU with unigram weights `[1, 0, 0, 0]`.
pub fn unigram_bleu(candidate: &str, reference: &str) -> Result<f64> {
    bleu(candidate, reference, BleuConfig::default())
}

pub fn bleu(candidate: &str, reference: &str, config: BleuConfig) -> Result<f64> {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() || r.is_empty() {
        return Err(Error::InvalidArgument(
            "BLEU needs at least one token on each side".into(),
        ));
    }
    if config.n_max == 0 {
        return Err(Error::InvalidArgument(
            "BLEU n_max must be at least 1".into(),
        ));
    }
    Ok(bleu_tokens(&c, &r, config.n_max))
}

/// BLEU over pre-tokenised input. Empty inputs score 0.
pub fn bleu_tokens<S: AsRef<str>>(candidate: &[S], reference: &[S], n_max: usize) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=n_max {
        let p = clipped_precision(candidate, reference, n);
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let precision = if n_max == 1 {
        clipped_precision(candidate, reference, 1)
    } else {
        (log_sum / n_max as f64).exp()
    };
    brevity_penalty(candidate.len(), reference.len()) * precision
}

fn clipped_precision<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> f64 {
    if candidate.len() < n {
        return 0.0;
    }
    let mut ref_counts: HashMap<Vec<&str>, usize> = HashMap::new();
    for w in reference.windows(n) {
        *ref_counts
            .entry(w.iter().map(AsRef::as_ref).collect())
            .or_default() += 1;
    }
    let mut cand_counts: HashMap<Vec<&str>, usize> = HashMap::new();
    for w in candidate.windows(n) {
        *cand_counts
            .entry(w.iter().map(AsRef::as_ref).collect())
            .or_default() += 1;
    }
    let clipped: usize = cand_counts
        .iter()
        .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
        .sum();
    clipped as f64 / (candidate.len() - n + 1) as f64
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Technical-term synonym expansions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(
    try_from = "BTreeMap<String, Vec<String>>",
    into = "BTreeMap<String, Vec<String>>"
)]
pub struct Lexicon {
    substitutions: BTreeMap<String, Vec<String>>,
}

impl Lexicon {
    pub fn new(substitutions: BTreeMap<String, Vec<String>>) -> Result<Self> {
        for (key, expansions) in &substitutions {
            if key.is_empty() || *key != key.to_lowercase() {
                return Err(Error::InvalidArgument(format!(
                    "lexicon key {key:?} must be non-empty and lowercase"
                )));
            }
            if expansions.iter().any(|e| e.trim().is_empty()) {
                return Err(Error::InvalidArgument(format!(
                    "lexicon key {key:?} has an empty expansion"
                )));
            }
        }
        Ok(Lexicon { substitutions })
    }

    /// Swedish CM vocabulary taken from typical annotation phrasing.
    pub fn seed() -> Self {
        let pairs: &[(&str, &[&str])] = &[
            ("givarfel", &["sensorfel"]),
            ("givare", &["sensor"]),
            ("kabelfel", &["sensorfel"]),
            ("kabelbrott", &["kabelfel", "sensorfel"]),
            ("lagerskada", &["lagerfel"]),
            ("lagerbyte", &["lagerfel", "bytt"]),
            ("utbytt", &["bytt"]),
            ("bpfo", &["lagerfel"]),
            ("bpfi", &["lagerfel"]),
            ("haveri", &["kritisk"]),
        ];
        let map = pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
            .collect();
        Lexicon { substitutions: map }
    }

    pub fn is_empty(&self) -> bool {
        self.substitutions.is_empty()
    }

    pub fn substitutions(&self) -> &BTreeMap<String, Vec<String>> {
        &self.substitutions
    }
}

impl TryFrom<BTreeMap<String, Vec<String>>> for Lexicon {
    type Error = Error;

    fn try_from(value: BTreeMap<String, Vec<String>>) -> Result<Self> {
        Lexicon::new(value)
    }
}

impl From<Lexicon> for BTreeMap<String, Vec<String>> {
    fn from(value: Lexicon) -> Self {
        value.substitutions
    }
}

/// Appends the expansions of every term found in `text` (case-insensitive
/// substring), skipping expansions already present. Appended expansions can
/// themselves match further terms; this repeats until nothing changes, so the
/// result is a fixed point and applying it again is the identity.
pub fn substitute_technical_terms(text: &str, lexicon: &Lexicon) -> String {
    let mut out = text.to_string();
    let mut lower = out.to_lowercase();
    loop {
        let mut changed = false;
        for (term, expansions) in &lexicon.substitutions {
            if !lower.contains(term.as_str()) {
                continue;
            }
            for e in expansions {
                let el = e.to_lowercase();
                if !lower.contains(el.as_str()) {
                    out.push(' ');
                    out.push_str(e);
                    lower.push(' ');
                    lower.push_str(&el);
                    changed = true;
                }
            }
        }
        if !changed {
            return out;
        }
    }
}

/// Maps text to a unit vector of fixed dimension.
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Signed feature hashing of tokens, L2-normalised.
#[derive(Clone, Debug)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashingEmbedder { dim }
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder::new(DEFAULT_EMBEDDING_DIM)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Embedder for HashingEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "text {text:?} has no tokens to embed"
            )));
        }
        let mut v = vec![0.0; self.dim];
        for t in &tokens {
            let h = fnv1a(t.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        if v.iter().all(|&x| x == 0.0) {
            // Colliding tokens cancelled out; fall back to the whole text.
            let h = fnv1a(tokens.join(" ").as_bytes());
            v[(h % self.dim as u64) as usize] = 1.0;
        }
        normalize(&mut v);
        Ok(v)
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Client for a hosted embedding service: POSTs `{"text": ...}` and expects
/// `{"vector": [...]}`. Any failure falls back to feature hashing.
pub struct RemoteEmbedder {
    endpoint: String,
    dim: usize,
    agent: ureq::Agent,
    fallback: HashingEmbedder,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, dim: usize, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build();
        RemoteEmbedder {
            endpoint: endpoint.into(),
            dim,
            agent: config.into(),
            fallback: HashingEmbedder::new(dim),
        }
    }

    fn fetch(&self, text: &str) -> std::result::Result<Vec<f64>, String> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(EmbedRequest { text })
            .map_err(|e| e.to_string())?;
        let body: EmbedResponse = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        if body.vector.len() != self.dim {
            return Err(format!(
                "service returned dimension {}, expected {}",
                body.vector.len(),
                self.dim
            ));
        }
        let mut v = body.vector;
        if v.iter().any(|x| !x.is_finite()) || v.iter().all(|&x| x == 0.0) {
            return Err("service returned a zero or non-finite vector".into());
        }
        normalize(&mut v);
        Ok(v)
    }
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        match self.fetch(text) {
            Ok(v) => Ok(v),
            Err(e) => {
                warn!(
                    "embedding service {} failed ({e}); using feature hashing",
                    self.endpoint
                );
                self.fallback.embed(text)
            }
        }
    }
}

pub fn embed_text(text: &str, embedder: &dyn Embedder) -> Result<Vec<f64>> {
    if text.trim().is_empty() {
        return Err(Error::InvalidArgument("cannot embed empty text".into()));
    }
    let v = embedder.embed(text)?;
    if v.len() != embedder.dimension() {
        return Err(Error::Config(format!(
            "embedder produced {} values, declared dimension {}",
            v.len(),
            embedder.dimension()
        )));
    }
    Ok(v)
}

pub fn embedding_score(q: &[f64], d: &[f64]) -> Result<f64> {
    if q.len() != d.len() {
        return Err(Error::InvalidArgument(format!(
            "embedding dimensions differ: {} vs {}",
            q.len(),
            d.len()
        )));
    }
    Ok(q.iter().zip(d).map(|(a, b)| a * b).sum())
}
