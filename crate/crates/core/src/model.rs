//! Machine hierarchy, annotation, point and recording types, and the
//! flattened multimodal vector store built from them.
//!
//! A store holds one [`DocumentChunk`] per (point, annotation) pair where the
//! point's asset owns the annotation. Each document carries the recordings of
//! its point that fall inside a timedelta window around the annotation date.
//! Recordings are stored once and shared between the documents that reference
//! them; the order-vector embedding is precomputed per recording.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::score::NormalizationStats;
use crate::signal::{self, SpeedBounds};
use crate::text::{self, Embedder, HashingEmbedder, Lexicon};

macro_rules! id_type {
    ($name:ident, $prefix:literal) => {
        #[derive(
            Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(AssetId, "a");
id_type!(PointId, "p");
id_type!(NoteId, "n");
id_type!(RecordingId, "r");

/// Identifies one document: a (point, annotation) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DocId {
    pub point: PointId,
    pub note: NoteId,
}

impl fmt::Display for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.point, self.note)
    }
}

/// Identifies one recording chunk inside a document. Indices are dense from 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChunkId {
    pub point: PointId,
    pub note: NoteId,
    pub index: u32,
}

impl ChunkId {
    pub fn doc(&self) -> DocId {
        DocId {
            point: self.point,
            note: self.note,
        }
    }
}

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-c{}", self.point, self.note, self.index)
    }
}

/// Path through the machine hierarchy, root first.
///
/// Segments are trimmed on construction; comparison afterwards is exact and
/// case-sensitive.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct AssetPath(Vec<String>);

impl AssetPath {
    pub fn new<S: AsRef<str>>(segments: impl IntoIterator<Item = S>) -> Result<Self> {
        let segments: Vec<String> = segments
            .into_iter()
            .map(|s| s.as_ref().trim().to_string())
            .collect();
        if segments.is_empty() {
            return Err(Error::InvalidArgument("asset path has no segments".into()));
        }
        if let Some(pos) = segments.iter().position(|s| s.is_empty()) {
            return Err(Error::InvalidArgument(format!(
                "asset path segment {pos} is empty"
            )));
        }
        Ok(AssetPath(segments))
    }

    pub fn segments(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn root(&self) -> &str {
        &self.0[0]
    }

    /// Segments joined with single spaces, used for BLEU tokenisation.
    pub fn as_text(&self) -> String {
        self.0.join(" ")
    }

    pub fn distance(&self, other: &AssetPath) -> usize {
        prefix_distance(&self.0, &other.0)
    }
}

impl TryFrom<Vec<String>> for AssetPath {
    type Error = Error;

    fn try_from(value: Vec<String>) -> Result<Self> {
        AssetPath::new(value)
    }
}

impl From<AssetPath> for Vec<String> {
    fn from(value: AssetPath) -> Self {
        value.0
    }
}

impl fmt::Display for AssetPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" / "))
    }
}

fn prefix_distance(a: &[String], b: &[String]) -> usize {
    let common = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    a.len() + b.len() - 2 * common
}

/// Number of right-end truncations needed to make two paths share a prefix:
/// `n + m - 2k` with `k` the longest common prefix length.
pub fn hierarchy_distance<S: AsRef<str>>(a: &[S], b: &[S]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument(
            "hierarchy distance needs two non-empty paths".into(),
        ));
    }
    let a: Vec<String> = a.iter().map(|s| s.as_ref().trim().to_string()).collect();
    let b: Vec<String> = b.iter().map(|s| s.as_ref().trim().to_string()).collect();
    Ok(prefix_distance(&a, &b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SensorType {
    #[serde(rename = "rms")]
    Rms,
    Peak,
    PtP,
}

impl SensorType {
    /// Peak and PtP points carry envelope-filtered data.
    pub fn is_envelope(self) -> bool {
        !matches!(self, SensorType::Rms)
    }
}

impl fmt::Display for SensorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SensorType::Rms => "rms",
            SensorType::Peak => "Peak",
            SensorType::PtP => "PtP",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Asset {
    pub id: AssetId,
    pub path: AssetPath,
    #[serde(default)]
    pub point_ids: Vec<PointId>,
    #[serde(default)]
    pub note_ids: Vec<NoteId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub id: PointId,
    pub name: String,
    pub sensor_type: SensorType,
    pub asset_id: AssetId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: NoteId,
    pub content: String,
    pub date: DateTime<Utc>,
    pub asset_id: AssetId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub author: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSample {
    pub time: DateTime<Utc>,
    pub value: f64,
}

/// One stored measurement on a point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub id: RecordingId,
    pub point_id: PointId,
    pub recording_date: DateTime<Utc>,
    pub shaft_speed: f64,
    pub spectrum: Vec<f32>,
    pub time_series: Vec<f32>,
    #[serde(default)]
    pub trend_levels: Vec<LevelSample>,
    #[serde(default)]
    pub bias_levels: Vec<LevelSample>,
}

/// Raw entities a store is built from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildInputs {
    pub assets: Vec<Asset>,
    pub points: Vec<Point>,
    pub annotations: Vec<Annotation>,
    pub recordings: Vec<Recording>,
}

/// Inclusive timedelta window, in days relative to the annotation date.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub days_before: f64,
    pub days_after: f64,
}

impl Default for Window {
    fn default() -> Self {
        Window {
            days_before: -50.0,
            days_after: 20.0,
        }
    }
}

impl Window {
    pub fn contains(&self, timedelta_days: f64) -> bool {
        timedelta_days >= self.days_before && timedelta_days <= self.days_after
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    #[serde(default)]
    pub window: Window,
    /// Declared spectrum length; inferred from the first recording when absent.
    #[serde(default)]
    pub spectrum_len: Option<usize>,
    #[serde(default)]
    pub time_series_len: Option<usize>,
    #[serde(default = "default_variance_window")]
    pub variance_window_days: f64,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "Lexicon::seed")]
    pub lexicon: Lexicon,
}

fn default_variance_window() -> f64 {
    10.0
}

fn default_embedding_dim() -> usize {
    text::DEFAULT_EMBEDDING_DIM
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            window: Window::default(),
            spectrum_len: None,
            time_series_len: None,
            variance_window_days: default_variance_window(),
            embedding_dim: default_embedding_dim(),
            lexicon: Lexicon::seed(),
        }
    }
}

/// Settings a built store carries so queries are scored the way it was built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreConfig {
    pub window: Window,
    pub spectrum_len: usize,
    pub time_series_len: usize,
    pub max_resolution: usize,
    pub variance_window_days: f64,
    pub embedding_dim: usize,
    pub lexicon: Lexicon,
}

/// A recording plus the values derived from it at build time.
#[derive(Clone, Debug)]
pub struct StoredRecording {
    pub recording: Recording,
    pub signal_embedding: Vec<f32>,
    pub embedding_norm: f64,
    pub trend_variance: f64,
    pub bias_variance: f64,
}

/// One (point, annotation) document.
#[derive(Clone, Debug)]
pub struct DocumentChunk {
    pub doc_id: DocId,
    pub asset_id: AssetId,
    pub asset_path: AssetPath,
    pub point_name: String,
    pub point_type: SensorType,
    pub note_content: String,
    pub note_date: DateTime<Utc>,
    pub note_embedding: Vec<f64>,
    pub(crate) chunk_range: Range<usize>,
    pub(crate) index: DocTextIndex,
}

/// Lowercased and tokenised views of a document's text fields.
#[derive(Clone, Debug, Default)]
pub(crate) struct DocTextIndex {
    pub note_lower: String,
    pub point_lower: String,
    pub path_lower: Vec<String>,
    pub path_tokens: Vec<String>,
    pub point_tokens: Vec<String>,
}

impl DocTextIndex {
    fn new(path: &AssetPath, point_name: &str, note: &str) -> Self {
        DocTextIndex {
            note_lower: note.to_lowercase(),
            point_lower: point_name.to_lowercase(),
            path_lower: path.segments().iter().map(|s| s.to_lowercase()).collect(),
            path_tokens: text::tokenize(&path.as_text()),
            point_tokens: text::tokenize(point_name),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecordingChunk {
    pub chunk_id: ChunkId,
    /// Index into [`VectorStore::recordings`].
    pub recording: usize,
    /// `recording_date - note_date`, signed fractional days.
    pub timedelta_days: f64,
}

/// Immutable multimodal store. Cheap to share behind an `Arc`.
#[derive(Clone)]
pub struct VectorStore {
    pub(crate) config: StoreConfig,
    pub(crate) assets: Vec<Asset>,
    pub(crate) points: Vec<Point>,
    pub(crate) annotations: Vec<Annotation>,
    pub(crate) recordings: Vec<StoredRecording>,
    pub(crate) documents: Vec<DocumentChunk>,
    pub(crate) chunks: Vec<RecordingChunk>,
    pub(crate) speed_bounds: Option<SpeedBounds>,
    pub(crate) stats: NormalizationStats,
    pub(crate) document_only: bool,
    pub(crate) embedder: Arc<dyn Embedder>,
    /// Owning document index per chunk.
    pub(crate) chunk_doc: Vec<usize>,
    lookup: Lookup,
}

#[derive(Clone, Debug, Default)]
struct Lookup {
    asset: HashMap<AssetId, usize>,
    point: HashMap<PointId, usize>,
    note: HashMap<NoteId, usize>,
    doc: HashMap<DocId, usize>,
    recording: HashMap<RecordingId, usize>,
}

impl fmt::Debug for VectorStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorStore")
            .field("assets", &self.assets.len())
            .field("points", &self.points.len())
            .field("annotations", &self.annotations.len())
            .field("documents", &self.documents.len())
            .field("chunks", &self.chunks.len())
            .field("speed_bounds", &self.speed_bounds)
            .field("document_only", &self.document_only)
            .finish()
    }
}

impl VectorStore {
    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn assets(&self) -> &[Asset] {
        &self.assets
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn recordings(&self) -> &[StoredRecording] {
        &self.recordings
    }

    pub fn documents(&self) -> &[DocumentChunk] {
        &self.documents
    }

    pub fn chunks(&self) -> &[RecordingChunk] {
        &self.chunks
    }

    pub fn speed_bounds(&self) -> Option<SpeedBounds> {
        self.speed_bounds
    }

    pub fn stats(&self) -> &NormalizationStats {
        &self.stats
    }

    pub fn is_document_only(&self) -> bool {
        self.document_only
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    /// Replaces the query-side embedder. Note embeddings already stored are
    /// left untouched, so the replacement must match the one used at build.
    pub fn with_embedder(mut self, embedder: Arc<dyn Embedder>) -> Self {
        self.embedder = embedder;
        self
    }

    pub fn asset(&self, id: AssetId) -> Option<&Asset> {
        self.lookup.asset.get(&id).map(|&i| &self.assets[i])
    }

    pub fn point(&self, id: PointId) -> Option<&Point> {
        self.lookup.point.get(&id).map(|&i| &self.points[i])
    }

    pub fn annotation(&self, id: NoteId) -> Option<&Annotation> {
        self.lookup.note.get(&id).map(|&i| &self.annotations[i])
    }

    pub fn document(&self, id: DocId) -> Option<&DocumentChunk> {
        self.lookup.doc.get(&id).map(|&i| &self.documents[i])
    }

    pub fn chunk(&self, id: ChunkId) -> Option<&RecordingChunk> {
        let doc = self.document(id.doc())?;
        let pos = doc.chunk_range.start + id.index as usize;
        if pos < doc.chunk_range.end {
            Some(&self.chunks[pos])
        } else {
            None
        }
    }

    pub fn chunks_of(&self, doc: &DocumentChunk) -> &[RecordingChunk] {
        &self.chunks[doc.chunk_range.clone()]
    }

    pub fn document_of(&self, chunk: &RecordingChunk) -> &DocumentChunk {
        &self.documents[self.lookup.doc[&chunk.chunk_id.doc()]]
    }

    pub fn recording_of(&self, chunk: &RecordingChunk) -> &StoredRecording {
        &self.recordings[chunk.recording]
    }

    pub fn recording(&self, id: RecordingId) -> Option<&StoredRecording> {
        self.lookup.recording.get(&id).map(|&i| &self.recordings[i])
    }

    /// Assembles a store from already-derived parts, rebuilding lookups.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        config: StoreConfig,
        assets: Vec<Asset>,
        points: Vec<Point>,
        annotations: Vec<Annotation>,
        recordings: Vec<StoredRecording>,
        documents: Vec<DocumentChunk>,
        chunks: Vec<RecordingChunk>,
        speed_bounds: Option<SpeedBounds>,
        stats: NormalizationStats,
        document_only: bool,
    ) -> Self {
        let lookup = Lookup {
            asset: assets.iter().enumerate().map(|(i, a)| (a.id, i)).collect(),
            point: points.iter().enumerate().map(|(i, p)| (p.id, i)).collect(),
            note: annotations
                .iter()
                .enumerate()
                .map(|(i, n)| (n.id, i))
                .collect(),
            doc: documents
                .iter()
                .enumerate()
                .map(|(i, d)| (d.doc_id, i))
                .collect(),
            recording: recordings
                .iter()
                .enumerate()
                .map(|(i, r)| (r.recording.id, i))
                .collect(),
        };
        let mut chunk_doc = vec![0; chunks.len()];
        for (i, d) in documents.iter().enumerate() {
            chunk_doc[d.chunk_range.clone()].fill(i);
        }
        debug_assert!(documents.windows(2).all(|w| w[0].doc_id < w[1].doc_id));
        debug_assert!(chunks.windows(2).all(|w| w[0].chunk_id < w[1].chunk_id));
        let embedder: Arc<dyn Embedder> = Arc::new(HashingEmbedder::new(config.embedding_dim));
        VectorStore {
            config,
            assets,
            points,
            annotations,
            recordings,
            documents,
            chunks,
            speed_bounds,
            stats,
            document_only,
            embedder,
            chunk_doc,
            lookup,
        }
    }

    pub(crate) fn make_document(
        doc_id: DocId,
        asset: &Asset,
        point: &Point,
        note: &Annotation,
        note_embedding: Vec<f64>,
        chunk_range: Range<usize>,
    ) -> DocumentChunk {
        DocumentChunk {
            doc_id,
            asset_id: asset.id,
            asset_path: asset.path.clone(),
            point_name: point.name.clone(),
            point_type: point.sensor_type,
            note_content: note.content.clone(),
            note_date: note.date,
            note_embedding,
            chunk_range,
            index: DocTextIndex::new(&asset.path, &point.name, &note.content),
        }
    }
}

/// Signed fractional days from `from` to `to`.
pub fn days_between(from: DateTime<Utc>, to: DateTime<Utc>) -> f64 {
    let delta = to.signed_duration_since(from);
    match delta.num_nanoseconds() {
        Some(ns) => ns as f64 / 86_400e9,
        None => delta.num_milliseconds() as f64 / 86_400e3,
    }
}

/// Checks referential integrity and per-recording constraints. Shared by
/// [`build_store`] and the importer so both reject the same inputs.
pub fn validate_inputs(inputs: &BuildInputs, config: &BuildConfig) -> Result<()> {
    let mut asset_ids = BTreeSet::new();
    let mut root: Option<&str> = None;
    for asset in &inputs.assets {
        if !asset_ids.insert(asset.id) {
            return Err(Error::Integrity(format!(
                "duplicate asset id {}",
                asset.id.0
            )));
        }
        match root {
            None => root = Some(asset.path.root()),
            Some(r) if r != asset.path.root() => {
                return Err(Error::Integrity(format!(
                    "asset {} has root segment {:?}, plant root is {:?}",
                    asset.id.0,
                    asset.path.root(),
                    r
                )))
            }
            _ => {}
        }
    }
    let mut point_asset = HashMap::new();
    for point in &inputs.points {
        if point_asset.insert(point.id, point.asset_id).is_some() {
            return Err(Error::Integrity(format!(
                "duplicate point id {}",
                point.id.0
            )));
        }
        if !asset_ids.contains(&point.asset_id) {
            return Err(Error::Integrity(format!(
                "point {} references unknown asset {}",
                point.id.0, point.asset_id.0
            )));
        }
    }
    let mut note_asset = HashMap::new();
    for note in &inputs.annotations {
        if note_asset.insert(note.id, note.asset_id).is_some() {
            return Err(Error::Integrity(format!(
                "duplicate annotation id {}",
                note.id.0
            )));
        }
        if !asset_ids.contains(&note.asset_id) {
            return Err(Error::Integrity(format!(
                "annotation {} references unknown asset {}",
                note.id.0, note.asset_id.0
            )));
        }
        if note.content.trim().is_empty() {
            return Err(Error::Integrity(format!(
                "annotation {} has empty content",
                note.id.0
            )));
        }
    }
    for asset in &inputs.assets {
        for pid in &asset.point_ids {
            match point_asset.get(pid) {
                None => {
                    return Err(Error::Integrity(format!(
                        "asset {} lists unknown point {}",
                        asset.id.0, pid.0
                    )))
                }
                Some(owner) if *owner != asset.id => {
                    return Err(Error::Integrity(format!(
                        "asset {} lists point {} owned by asset {}",
                        asset.id.0, pid.0, owner.0
                    )))
                }
                _ => {}
            }
        }
        for nid in &asset.note_ids {
            match note_asset.get(nid) {
                None => {
                    return Err(Error::Integrity(format!(
                        "asset {} lists unknown annotation {}",
                        asset.id.0, nid.0
                    )))
                }
                Some(owner) if *owner != asset.id => {
                    return Err(Error::Integrity(format!(
                        "asset {} lists annotation {} owned by asset {}",
                        asset.id.0, nid.0, owner.0
                    )))
                }
                _ => {}
            }
        }
    }

    let spectrum_len = config
        .spectrum_len
        .or_else(|| inputs.recordings.first().map(|r| r.spectrum.len()));
    let ts_len = config
        .time_series_len
        .or_else(|| inputs.recordings.first().map(|r| r.time_series.len()));
    let mut recording_ids = BTreeSet::new();
    for rec in &inputs.recordings {
        check_recording(rec, &point_asset, spectrum_len, ts_len)?;
        if !recording_ids.insert(rec.id) {
            return Err(Error::Integrity(format!(
                "duplicate recording id {}",
                rec.id.0
            )));
        }
    }
    Ok(())
}

pub(crate) fn check_recording(
    rec: &Recording,
    point_asset: &HashMap<PointId, AssetId>,
    spectrum_len: Option<usize>,
    ts_len: Option<usize>,
) -> Result<()> {
    if !point_asset.contains_key(&rec.point_id) {
        return Err(Error::Integrity(format!(
            "recording {} references unknown point {}",
            rec.id.0, rec.point_id.0
        )));
    }
    if !(rec.shaft_speed > 0.0) || !rec.shaft_speed.is_finite() {
        return Err(Error::Integrity(format!(
            "recording {} on point {} has non-positive shaft speed {}",
            rec.id.0, rec.point_id.0, rec.shaft_speed
        )));
    }
    if rec.spectrum.is_empty() {
        return Err(Error::Integrity(format!(
            "recording {} has an empty spectrum",
            rec.id.0
        )));
    }
    if let Some(len) = spectrum_len {
        if rec.spectrum.len() != len {
            return Err(Error::Integrity(format!(
                "recording {} spectrum length {} does not match store resolution {}",
                rec.id.0,
                rec.spectrum.len(),
                len
            )));
        }
    }
    if let Some(len) = ts_len {
        if rec.time_series.len() != len {
            return Err(Error::Integrity(format!(
                "recording {} time series length {} does not match store resolution {}",
                rec.id.0,
                rec.time_series.len(),
                len
            )));
        }
    }
    if let Some(name) = [
        ("spectrum", &rec.spectrum),
        ("time series", &rec.time_series),
    ]
    .into_iter()
    .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
    .map(|(n, _)| n)
    {
        return Err(Error::Integrity(format!(
            "recording {} has a non-finite {name} value",
            rec.id.0
        )));
    }
    for (name, levels) in [("trend", &rec.trend_levels), ("bias", &rec.bias_levels)] {
        if levels.iter().any(|l| !l.value.is_finite()) {
            return Err(Error::Integrity(format!(
                "recording {} has a non-finite {name} level",
                rec.id.0
            )));
        }
        if levels.windows(2).any(|w| w[1].time <= w[0].time) {
            return Err(Error::Integrity(format!(
                "recording {} {name} timestamps are not strictly increasing",
                rec.id.0
            )));
        }
    }
    Ok(())
}

/// Builds a store with the default hashing embedder.
pub fn build_store(inputs: BuildInputs, config: &BuildConfig) -> Result<VectorStore> {
    let embedder = HashingEmbedder::new(config.embedding_dim);
    build_store_with(inputs, config, Arc::new(embedder))
}

pub fn build_store_with(
    inputs: BuildInputs,
    config: &BuildConfig,
    embedder: Arc<dyn Embedder>,
) -> Result<VectorStore> {
    if config.window.days_before > config.window.days_after {
        return Err(Error::InvalidArgument(format!(
            "window start {} is after window end {}",
            config.window.days_before, config.window.days_after
        )));
    }
    if embedder.dimension() != config.embedding_dim {
        return Err(Error::Config(format!(
            "embedder dimension {} does not match configured {}",
            embedder.dimension(),
            config.embedding_dim
        )));
    }
    validate_inputs(&inputs, config)?;

    let BuildInputs {
        mut assets,
        mut points,
        mut annotations,
        recordings,
    } = inputs;
    assets.sort_by_key(|a| a.id);
    points.sort_by_key(|p| p.id);
    annotations.sort_by_key(|n| n.id);

    let spectrum_len = config
        .spectrum_len
        .or_else(|| recordings.first().map(|r| r.spectrum.len()))
        .unwrap_or(0);
    let time_series_len = config
        .time_series_len
        .or_else(|| recordings.first().map(|r| r.time_series.len()))
        .unwrap_or(0);

    let asset_index: HashMap<AssetId, usize> =
        assets.iter().enumerate().map(|(i, a)| (a.id, i)).collect();
    let mut points_of_asset: BTreeMap<AssetId, Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        points_of_asset.entry(p.asset_id).or_default().push(i);
    }
    let mut recs_of_point: HashMap<PointId, Vec<usize>> = HashMap::new();
    for (i, r) in recordings.iter().enumerate() {
        recs_of_point.entry(r.point_id).or_default().push(i);
    }
    for list in recs_of_point.values_mut() {
        list.sort_by_key(|&i| (recordings[i].recording_date, recordings[i].id));
    }

    // Join notes with the points of their asset, keeping in-window recordings.
    struct PendingDoc {
        doc_id: DocId,
        asset: usize,
        point: usize,
        note: usize,
        recs: Vec<(usize, f64)>,
    }
    let mut pending = Vec::new();
    for (ni, note) in annotations.iter().enumerate() {
        let Some(pidx) = points_of_asset.get(&note.asset_id) else {
            continue;
        };
        for &pi in pidx {
            let point = &points[pi];
            let recs = recs_of_point
                .get(&point.id)
                .map(|list| {
                    list.iter()
                        .filter_map(|&ri| {
                            let td = days_between(note.date, recordings[ri].recording_date);
                            config.window.contains(td).then_some((ri, td))
                        })
                        .collect()
                })
                .unwrap_or_default();
            pending.push(PendingDoc {
                doc_id: DocId {
                    point: point.id,
                    note: note.id,
                },
                asset: asset_index[&note.asset_id],
                point: pi,
                note: ni,
                recs,
            });
        }
    }
    pending.sort_by_key(|d| d.doc_id);

    // Keep only attached recordings, ordered by id.
    let mut attached: BTreeSet<usize> = BTreeSet::new();
    for d in &pending {
        attached.extend(d.recs.iter().map(|&(ri, _)| ri));
    }
    let mut attached: Vec<usize> = attached.into_iter().collect();
    attached.sort_by_key(|&ri| recordings[ri].id);
    let speed_bounds = attached.iter().fold(None, |acc: Option<SpeedBounds>, &ri| {
        let s = recordings[ri].shaft_speed;
        Some(match acc {
            None => SpeedBounds { min: s, max: s },
            Some(b) => SpeedBounds {
                min: b.min.min(s),
                max: b.max.max(s),
            },
        })
    });
    let max_resolution = speed_bounds
        .map(|b| b.max_resolution(spectrum_len))
        .unwrap_or(0);

    let mut slot = vec![usize::MAX; recordings.len()];
    for (new_i, &ri) in attached.iter().enumerate() {
        slot[ri] = new_i;
    }
    let mut taken: Vec<Option<Recording>> = recordings.into_iter().map(Some).collect();
    let mut stored = Vec::with_capacity(attached.len());
    for &ri in &attached {
        let recording = taken[ri].take().expect("recording attached once");
        stored.push(derive_recording(
            recording,
            speed_bounds.expect("bounds exist when recordings are attached"),
            config.variance_window_days,
        )?);
    }
    drop(taken);

    let mut note_embeddings: HashMap<NoteId, Vec<f64>> = HashMap::new();
    for note in &annotations {
        let expanded = text::substitute_technical_terms(&note.content, &config.lexicon);
        note_embeddings.insert(note.id, text::embed_text(&expanded, embedder.as_ref())?);
    }

    let mut documents = Vec::with_capacity(pending.len());
    let mut chunks = Vec::new();
    for d in pending {
        let start = chunks.len();
        for (index, &(ri, td)) in d.recs.iter().enumerate() {
            chunks.push(RecordingChunk {
                chunk_id: ChunkId {
                    point: d.doc_id.point,
                    note: d.doc_id.note,
                    index: index as u32,
                },
                recording: slot[ri],
                timedelta_days: td,
            });
        }
        let note = &annotations[d.note];
        documents.push(VectorStore::make_document(
            d.doc_id,
            &assets[d.asset],
            &points[d.point],
            note,
            note_embeddings[&note.id].clone(),
            start..chunks.len(),
        ));
    }

    let store_config = StoreConfig {
        window: config.window,
        spectrum_len,
        time_series_len,
        max_resolution,
        variance_window_days: config.variance_window_days,
        embedding_dim: config.embedding_dim,
        lexicon: config.lexicon.clone(),
    };
    let stats = NormalizationStats::compute(&assets, &stored);
    Ok(VectorStore::from_parts(
        store_config,
        assets,
        points,
        annotations,
        stored,
        documents,
        chunks,
        speed_bounds,
        stats,
        false,
    )
    .with_embedder(embedder))
}

pub(crate) fn derive_recording(
    recording: Recording,
    bounds: SpeedBounds,
    variance_window_days: f64,
) -> Result<StoredRecording> {
    let order = signal::order_transform(&recording.spectrum, recording.shaft_speed, bounds)
        .map_err(|e| {
            Error::Integrity(format!(
                "recording {} on point {}: {e}",
                recording.id.0, recording.point_id.0
            ))
        })?;
    let embedding_norm = signal::norm(&order.values);
    let trend_variance = signal::windowed_variance(&recording.trend_levels, variance_window_days);
    let bias_variance = signal::windowed_variance(&recording.bias_levels, variance_window_days);
    Ok(StoredRecording {
        recording,
        signal_embedding: order.values,
        embedding_norm,
        trend_variance,
        bias_variance,
    })
}

/// Copy of the store without recording chunks, for document-level queries.
pub fn document_view(store: &VectorStore) -> VectorStore {
    let documents = store
        .documents
        .iter()
        .map(|d| DocumentChunk {
            chunk_range: 0..0,
            ..d.clone()
        })
        .collect();
    VectorStore::from_parts(
        store.config.clone(),
        store.assets.clone(),
        store.points.clone(),
        store.annotations.clone(),
        Vec::new(),
        documents,
        Vec::new(),
        store.speed_bounds,
        store.stats.clone(),
        true,
    )
    .with_embedder(store.embedder.clone())
}
