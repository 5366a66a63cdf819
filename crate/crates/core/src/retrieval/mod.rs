//! Filtered multi-metric retrieval over documents and recording chunks.

pub mod filter;
pub mod score;

use std::cmp::Ordering;

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    days_between, AssetId, AssetPath, ChunkId, DocId, DocumentChunk, NoteId, PointId,
    RecordingChunk, RecordingId, SensorType, StoredRecording, VectorStore,
};
use crate::signal::{self, cosine_from_parts, dot_f32};
use crate::text::{self, BleuConfig};

pub use filter::{evaluate_compiled, evaluate_filter, FilterTree, Target};
pub use score::{
    aggregate, date_score, normalize_scores, speed_score, variance_score, Breakdown, Metric,
    MetricRange, MetricScore, NormalizationOrder, NormalizationStats, WeightProfile,
};

pub const DEFAULT_DATE_N: f64 = 5.0;
pub const DEFAULT_SPEED_N: f64 = 50.0;
pub const DEFAULT_VARIANCE_N: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Documents,
    Chunks,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Limit {
    TopK(usize),
    /// Keep hits whose total is strictly greater than the threshold.
    Threshold(f64),
    All,
}

impl Default for Limit {
    fn default() -> Self {
        Limit::TopK(10)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoteQuery {
    /// Substituted with the store lexicon, then embedded.
    Text(String),
    Embedding(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalQuery {
    /// Use the order vector of a stored chunk.
    Chunk(ChunkId),
    /// A ready order vector of the store's width.
    Embedding(Vec<f32>),
    /// A raw spectrum, order-transformed with the store's speed bounds.
    Spectrum { values: Vec<f32>, speed: f64 },
}

fn default_date_n() -> f64 {
    DEFAULT_DATE_N
}

fn default_speed_n() -> f64 {
    DEFAULT_SPEED_N
}

fn default_variance_n() -> f64 {
    DEFAULT_VARIANCE_N
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DateTarget {
    pub target: DateTime<Utc>,
    #[serde(default = "default_date_n")]
    pub n: f64,
    #[serde(default)]
    pub inverse: bool,
}

/// Target timedelta in days relative to the note date.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedeltaTarget {
    pub target: f64,
    #[serde(default = "default_date_n")]
    pub n: f64,
    #[serde(default)]
    pub inverse: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedTarget {
    pub target: f64,
    #[serde(default = "default_speed_n")]
    pub n: f64,
    #[serde(default)]
    pub inverse: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceTarget {
    pub target: f64,
    #[serde(default = "default_variance_n")]
    pub n: f64,
}

/// Query values per metric. A metric is scored when its payload is present
/// and its weight is positive.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Payloads {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<NoteQuery>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub signal: Option<SignalQuery>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asset_text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub point_text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asset_path: Option<AssetPath>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note_date: Option<DateTarget>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recording_date: Option<DateTarget>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timedelta: Option<TimedeltaTarget>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speed: Option<SpeedTarget>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trend_variance: Option<VarianceTarget>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias_variance: Option<VarianceTarget>,
}

impl Payloads {
    pub fn has(&self, metric: Metric) -> bool {
        match metric {
            Metric::NoteEmbedding => self.note.is_some(),
            Metric::SignalEmbedding => self.signal.is_some(),
            Metric::AssetBleu => self.asset_text.is_some(),
            Metric::PointBleu => self.point_text.is_some(),
            Metric::HierarchyDistance => self.asset_path.is_some(),
            Metric::NoteDate => self.note_date.is_some(),
            Metric::RecordingDate => self.recording_date.is_some(),
            Metric::Timedelta => self.timedelta.is_some(),
            Metric::Speed => self.speed.is_some(),
            Metric::TrendVariance => self.trend_variance.is_some(),
            Metric::BiasVariance => self.bias_variance.is_some(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Query {
    pub filter: FilterTree,
    pub payloads: Payloads,
    pub weights: WeightProfile,
    pub mode: Mode,
    pub limit: Limit,
    /// Allows a filter-only query with no scored metric.
    pub return_all: bool,
    /// Attach chunk ids to document hits.
    pub expand_chunks: bool,
    pub normalization: NormalizationOrder,
    pub bleu: BleuConfig,
}

impl Query {
    /// Metrics that will be scored.
    pub fn active_metrics(&self) -> Vec<Metric> {
        Metric::ALL
            .into_iter()
            .filter(|&m| self.weights.get(m) > 0.0 && self.payloads.has(m))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitId {
    Document(DocId),
    Chunk(ChunkId),
}

impl HitId {
    pub fn doc(&self) -> DocId {
        match *self {
            HitId::Document(d) => d,
            HitId::Chunk(c) => c.doc(),
        }
    }

    pub fn chunk(&self) -> Option<ChunkId> {
        match *self {
            HitId::Chunk(c) => Some(c),
            HitId::Document(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub asset_id: AssetId,
    pub asset_path: AssetPath,
    pub point_id: PointId,
    pub point_name: String,
    pub point_type: SensorType,
    pub note_id: NoteId,
    pub note_content: String,
    pub note_date: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recording_id: Option<RecordingId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recording_date: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timedelta_days: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shaft_speed: Option<f64>,
}

impl Provenance {
    pub fn of(doc: &DocumentChunk, chunk: Option<(&RecordingChunk, &StoredRecording)>) -> Self {
        Provenance {
            asset_id: doc.asset_id,
            asset_path: doc.asset_path.clone(),
            point_id: doc.doc_id.point,
            point_name: doc.point_name.clone(),
            point_type: doc.point_type,
            note_id: doc.doc_id.note,
            note_content: doc.note_content.clone(),
            note_date: doc.note_date,
            recording_id: chunk.map(|(_, r)| r.recording.id),
            recording_date: chunk.map(|(_, r)| r.recording.recording_date),
            timedelta_days: chunk.map(|(c, _)| c.timedelta_days),
            shaft_speed: chunk.map(|(_, r)| r.recording.shaft_speed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub id: HitId,
    pub total: f64,
    pub breakdown: Breakdown,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunks: Option<Vec<ChunkId>>,
}

/// Counters from one retrieval call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalStats {
    pub targets: u64,
    pub filter_passed: u64,
    /// Individual metric evaluations. Equals `filter_passed` times the number
    /// of active metrics; rejected targets are never scored.
    pub metric_evaluations: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval {
    pub hits: Vec<ScoredHit>,
    pub stats: RetrievalStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetrieveOptions {
    /// Worker threads for scoring. 1 scores on the calling thread.
    pub threads: usize,
}

impl Default for RetrieveOptions {
    fn default() -> Self {
        RetrieveOptions { threads: 1 }
    }
}

/// Ranks documents or chunks for `query`, single-threaded.
pub fn retrieve(store: &VectorStore, query: &Query) -> Result<Vec<ScoredHit>> {
    Ok(retrieve_with(store, query, RetrieveOptions::default())?.hits)
}

pub fn retrieve_with(
    store: &VectorStore,
    query: &Query,
    options: RetrieveOptions,
) -> Result<Retrieval> {
    let prepared = Prepared::new(store, query)?;
    let n = match query.mode {
        Mode::Documents => store.documents.len(),
        Mode::Chunks => store.chunks.len(),
    };

    let scored: Vec<(Option<f64>, u32)> = if options.threads <= 1 || n < 2048 {
        (0..n).map(|i| prepared.score_index(i)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        pool.install(|| {
            (0..n)
                .into_par_iter()
                .with_min_len(1024)
                .map(|i| prepared.score_index(i))
                .collect()
        })
    };

    let mut stats = RetrievalStats {
        targets: n as u64,
        ..RetrievalStats::default()
    };
    let mut ranked: Vec<(f64, usize)> = Vec::new();
    for (i, (total, evals)) in scored.into_iter().enumerate() {
        stats.metric_evaluations += evals as u64;
        if let Some(t) = total {
            stats.filter_passed += 1;
            ranked.push((t, i));
        }
    }

    // Storage order equals id order for both documents and chunks.
    let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    match query.limit {
        Limit::TopK(k) => {
            if ranked.len() > k {
                ranked.select_nth_unstable_by(k, cmp);
                ranked.truncate(k);
            }
        }
        Limit::Threshold(t) => ranked.retain(|&(total, _)| total > t),
        Limit::All => {}
    }
    ranked.sort_unstable_by(cmp);

    let hits = ranked
        .into_iter()
        .map(|(total, i)| prepared.hit(i, total))
        .collect();
    Ok(Retrieval { hits, stats })
}

struct Prepared<'a> {
    store: &'a VectorStore,
    query: &'a Query,
    filter: FilterTree,
    trivially_true: bool,
    weights: [f64; 11],
    active: [bool; 11],
    note: Option<Vec<f64>>,
    signal: Option<(Vec<f32>, f64)>,
    asset_tokens: Vec<String>,
    point_tokens: Vec<String>,
}

impl<'a> Prepared<'a> {
    fn new(store: &'a VectorStore, query: &'a Query) -> Result<Self> {
        query.weights.validate()?;
        let active_list = query.active_metrics();
        if active_list.is_empty() && !query.return_all {
            return Err(Error::Query(
                "no metric has both a payload and a positive weight; set return_all for a filter-only query"
                    .into(),
            ));
        }
        match query.limit {
            Limit::TopK(0) => return Err(Error::Query("top_k must be at least 1".into())),
            Limit::Threshold(t) if t.is_nan() => {
                return Err(Error::Query("threshold is NaN".into()))
            }
            _ => {}
        }
        if query.bleu.n_max == 0 {
            return Err(Error::Query("bleu n_max must be at least 1".into()));
        }
        match query.mode {
            Mode::Chunks if store.document_only => {
                return Err(Error::Mode(
                    "chunk-mode query against a document-only view".into(),
                ))
            }
            Mode::Documents => {
                if query.expand_chunks && store.document_only {
                    return Err(Error::Mode(
                        "document-only view has no chunks to expand".into(),
                    ));
                }
                if let Some(m) = active_list.iter().find(|m| m.is_chunk_level()) {
                    return Err(Error::Query(format!(
                        "metric {m} needs recordings; use chunk mode"
                    )));
                }
                if query.filter.uses_recording_fields() {
                    return Err(Error::Query(
                        "filter uses recording fields; use chunk mode".into(),
                    ));
                }
            }
            Mode::Chunks => {}
        }

        let mut active = [false; 11];
        for m in &active_list {
            active[m.index()] = true;
        }
        let p = &query.payloads;
        let is_active = |m: Metric| active[m.index()];

        let note = if is_active(Metric::NoteEmbedding) {
            let v = match p.note.as_ref().expect("active implies payload") {
                NoteQuery::Text(t) => {
                    let expanded = text::substitute_technical_terms(t, &store.config.lexicon);
                    text::embed_text(&expanded, store.embedder())?
                }
                NoteQuery::Embedding(v) => v.clone(),
            };
            if v.len() != store.config.embedding_dim {
                return Err(Error::Query(format!(
                    "note embedding has dimension {}, store uses {}",
                    v.len(),
                    store.config.embedding_dim
                )));
            }
            Some(v)
        } else {
            None
        };

        let signal = if is_active(Metric::SignalEmbedding) {
            let v = match p.signal.as_ref().expect("active implies payload") {
                SignalQuery::Chunk(id) => {
                    let c = store
                        .chunk(*id)
                        .ok_or_else(|| Error::Query(format!("unknown chunk {id}")))?;
                    store.recording_of(c).signal_embedding.clone()
                }
                SignalQuery::Embedding(v) => v.clone(),
                SignalQuery::Spectrum { values, speed } => {
                    let bounds = store.speed_bounds.ok_or_else(|| {
                        Error::Query("store has no recordings to take speed bounds from".into())
                    })?;
                    signal::order_transform(values, *speed, bounds)?.values
                }
            };
            if v.len() != store.config.max_resolution {
                return Err(Error::Query(format!(
                    "order vector has length {}, store uses {}",
                    v.len(),
                    store.config.max_resolution
                )));
            }
            let n = signal::norm(&v);
            Some((v, n))
        } else {
            None
        };

        for (m, n) in [
            (Metric::NoteDate, p.note_date.map(|d| d.n)),
            (Metric::RecordingDate, p.recording_date.map(|d| d.n)),
            (Metric::Timedelta, p.timedelta.map(|d| d.n)),
            (Metric::Speed, p.speed.map(|d| d.n)),
            (Metric::TrendVariance, p.trend_variance.map(|d| d.n)),
            (Metric::BiasVariance, p.bias_variance.map(|d| d.n)),
        ] {
            if let (true, Some(n)) = (is_active(m), n) {
                if !(n > 0.0) || !n.is_finite() {
                    return Err(Error::Query(format!("{m} N must be positive, got {n}")));
                }
            }
        }
        for (m, t) in [
            (Metric::TrendVariance, p.trend_variance.map(|d| d.target)),
            (Metric::BiasVariance, p.bias_variance.map(|d| d.target)),
        ] {
            if let (true, Some(t)) = (is_active(m), t) {
                if !(t >= 0.0) {
                    return Err(Error::Query(format!("{m} target must be >= 0, got {t}")));
                }
            }
        }
        let tokens = |t: &Option<String>, m: Metric| -> Result<Vec<String>> {
            if !is_active(m) {
                return Ok(Vec::new());
            }
            let toks = text::tokenize(t.as_deref().unwrap_or(""));
            if toks.is_empty() {
                return Err(Error::Query(format!("{m} query text has no tokens")));
            }
            Ok(toks)
        };
        let asset_tokens = tokens(&p.asset_text, Metric::AssetBleu)?;
        let point_tokens = tokens(&p.point_text, Metric::PointBleu)?;

        let filter = query.filter.compiled();
        Ok(Prepared {
            store,
            query,
            trivially_true: filter.is_trivially_true(),
            filter,
            weights: query.weights.as_array(),
            active,
            note,
            signal,
            asset_tokens,
            point_tokens,
        })
    }

    fn target(
        &self,
        i: usize,
    ) -> (
        &'a DocumentChunk,
        Option<(&'a RecordingChunk, &'a StoredRecording)>,
    ) {
        let s = self.store;
        match self.query.mode {
            Mode::Documents => (&s.documents[i], None),
            Mode::Chunks => {
                let c = &s.chunks[i];
                (
                    &s.documents[s.chunk_doc[i]],
                    Some((c, &s.recordings[c.recording])),
                )
            }
        }
    }

    /// Total for target `i`, or `None` when filtered out, plus the number of
    /// metric evaluations spent.
    fn score_index(&self, i: usize) -> (Option<f64>, u32) {
        let (doc, chunk) = self.target(i);
        if !self.trivially_true {
            let t = match chunk {
                Some((c, r)) => Target::Chunk(doc, c, r),
                None => Target::Document(doc),
            };
            if !evaluate_compiled(&self.filter, t) {
                return (None, 0);
            }
        }
        let (raw, evals) = self.raw_scores(doc, chunk);
        let total = score::combine(
            &raw,
            &self.weights,
            &self.store.stats,
            self.query.normalization,
        );
        (Some(total), evals)
    }

    fn raw_scores(
        &self,
        doc: &DocumentChunk,
        chunk: Option<(&RecordingChunk, &StoredRecording)>,
    ) -> ([Option<f64>; 11], u32) {
        let mut raw = [None; 11];
        let mut evals = 0;
        let p = &self.query.payloads;
        let n_max = self.query.bleu.n_max;
        for m in Metric::ALL {
            if !self.active[m.index()] {
                continue;
            }
            evals += 1;
            let rec = || chunk.expect("chunk-level metrics only run in chunk mode");
            let v = match m {
                Metric::NoteEmbedding => {
                    let q = self.note.as_ref().expect("prepared");
                    q.iter().zip(&doc.note_embedding).map(|(a, b)| a * b).sum()
                }
                Metric::SignalEmbedding => {
                    let (q, qn) = self.signal.as_ref().expect("prepared");
                    let r = rec().1;
                    cosine_from_parts(dot_f32(q, &r.signal_embedding), *qn, r.embedding_norm).value
                }
                Metric::AssetBleu => {
                    text::bleu_tokens(&self.asset_tokens, &doc.index.path_tokens, n_max)
                }
                Metric::PointBleu => {
                    text::bleu_tokens(&self.point_tokens, &doc.index.point_tokens, n_max)
                }
                Metric::HierarchyDistance => {
                    let q = p.asset_path.as_ref().expect("prepared");
                    -(q.distance(&doc.asset_path) as f64)
                }
                Metric::NoteDate => {
                    let d = p.note_date.expect("prepared");
                    proximity(days_between(d.target, doc.note_date), d.n, d.inverse)
                }
                Metric::RecordingDate => {
                    let d = p.recording_date.expect("prepared");
                    let r = rec().1;
                    proximity(
                        days_between(d.target, r.recording.recording_date),
                        d.n,
                        d.inverse,
                    )
                }
                Metric::Timedelta => {
                    let d = p.timedelta.expect("prepared");
                    proximity(rec().0.timedelta_days - d.target, d.n, d.inverse)
                }
                Metric::Speed => {
                    let d = p.speed.expect("prepared");
                    proximity(rec().1.recording.shaft_speed - d.target, d.n, d.inverse)
                }
                Metric::TrendVariance => {
                    let d = p.trend_variance.expect("prepared");
                    proximity(d.target - rec().1.trend_variance, d.n, false)
                }
                Metric::BiasVariance => {
                    let d = p.bias_variance.expect("prepared");
                    proximity(d.target - rec().1.bias_variance, d.n, false)
                }
            };
            raw[m.index()] = Some(v);
        }
        (raw, evals)
    }

    fn hit(&self, i: usize, total: f64) -> ScoredHit {
        let (doc, chunk) = self.target(i);
        let (raw, _) = self.raw_scores(doc, chunk);
        let breakdown = Metric::ALL
            .into_iter()
            .filter_map(|m| {
                raw[m.index()].map(|r| {
                    (
                        m,
                        MetricScore {
                            raw: r,
                            normalized: self.store.stats.normalize(m, r),
                        },
                    )
                })
            })
            .collect();
        let id = match chunk {
            Some((c, _)) => HitId::Chunk(c.chunk_id),
            None => HitId::Document(doc.doc_id),
        };
        let chunks = (self.query.mode == Mode::Documents && self.query.expand_chunks).then(|| {
            self.store
                .chunks_of(doc)
                .iter()
                .map(|c| c.chunk_id)
                .collect()
        });
        ScoredHit {
            id,
            total,
            breakdown,
            provenance: Provenance::of(doc, chunk),
            chunks,
        }
    }
}

/// The validated form of [`date_score`]; `n` is checked when preparing.
fn proximity(delta: f64, n: f64, inverse: bool) -> f64 {
    let s = n / (delta.abs() + n);
    if inverse {
        1.0 - s
    } else {
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeFeature {
    Max,
    Mean,
    Variance,
    BiasVariance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureChange {
    pub point_id: PointId,
    pub point_name: String,
    pub delta: f64,
    pub first: f64,
    pub last: f64,
    pub first_recording: RecordingId,
    pub last_recording: RecordingId,
}

pub const DEFAULT_CHANGE_TOP_N: usize = 3;

/// Per point, the change of `feature` between its first and last recording
/// inside `[start, end]` among chunks passing `filter`. Ranked by `|delta|`
/// descending, ties by ascending point id.
pub fn feature_change_scan(
    store: &VectorStore,
    filter: &FilterTree,
    start: DateTime<Utc>,
    end: DateTime<Utc>,
    feature: ChangeFeature,
    top_n: usize,
) -> Result<Vec<FeatureChange>> {
    if start >= end {
        return Err(Error::InvalidArgument(format!(
            "window start {start} is not before end {end}"
        )));
    }
    let compiled = filter.compiled();
    // point -> (first, last) by (date, recording id)
    let mut spans: std::collections::BTreeMap<PointId, (usize, usize)> = Default::default();
    let key = |ri: usize| {
        let r = &store.recordings[ri].recording;
        (r.recording_date, r.id)
    };
    for (i, c) in store.chunks.iter().enumerate() {
        let rec = &store.recordings[c.recording];
        let date = rec.recording.recording_date;
        if date < start || date > end {
            continue;
        }
        let doc = &store.documents[store.chunk_doc[i]];
        if !evaluate_compiled(&compiled, Target::Chunk(doc, c, rec)) {
            continue;
        }
        let e = spans
            .entry(rec.recording.point_id)
            .or_insert((c.recording, c.recording));
        if key(c.recording) < key(e.0) {
            e.0 = c.recording;
        }
        if key(c.recording) > key(e.1) {
            e.1 = c.recording;
        }
    }
    let value = |ri: usize| -> Result<f64> {
        let r = &store.recordings[ri];
        if feature == ChangeFeature::BiasVariance {
            return Ok(r.bias_variance);
        }
        let series: Vec<f64> = r.recording.spectrum.iter().map(|&v| v as f64).collect();
        let f = signal::stat_features(&series)?;
        Ok(match feature {
            ChangeFeature::Max => f.max,
            ChangeFeature::Mean => f.mean,
            ChangeFeature::Variance => f.variance,
            ChangeFeature::BiasVariance => unreachable!(),
        })
    };
    let mut out = Vec::with_capacity(spans.len());
    for (point_id, (a, b)) in spans {
        let (first, last) = (value(a)?, value(b)?);
        out.push(FeatureChange {
            point_id,
            point_name: store
                .point(point_id)
                .map(|p| p.name.clone())
                .unwrap_or_default(),
            delta: last - first,
            first,
            last,
            first_recording: store.recordings[a].recording.id,
            last_recording: store.recordings[b].recording.id,
        });
    }
    out.sort_by(|x, y| {
        y.delta
            .abs()
            .total_cmp(&x.delta.abs())
            .then(x.point_id.cmp(&y.point_id))
    });
    out.truncate(top_n);
    Ok(out)
}

/// Sort order used for every ranking: total descending, then id ascending.
pub fn rank_order(a: &ScoredHit, b: &ScoredHit) -> Ordering {
    b.total.total_cmp(&a.total).then(a.id.cmp(&b.id))
}
