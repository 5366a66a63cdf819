//! Store persistence and JSON-lines ingestion.
//!
//! A saved store is a directory with three files:
//!
//! - `manifest.json`: format version, entity counts, speed bounds,
//!   normalization stats, store config, the array offset table and a
//!   SHA-256 digest.
//! - `entities.jsonl`: one tagged JSON object per asset, point, annotation,
//!   recording, document and chunk, in storage order.
//! - `arrays.bin`: little-endian numeric sections listed in the manifest.
//!
//! The digest covers `entities.jsonl`, then `arrays.bin`, then the manifest
//! serialized with an empty digest field. Values derived from recordings
//! (order vectors, norms, variances) are recomputed at load; timedeltas are
//! recomputed from the stored dates.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{
    check_recording, days_between, derive_recording, document_view, validate_inputs, Annotation,
    Asset, AssetId, BuildConfig, BuildInputs, ChunkId, DocId, LevelSample, NoteId, Point, PointId,
    Recording, RecordingChunk, RecordingId, StoreConfig, VectorStore,
};
use crate::retrieval::NormalizationStats;
use crate::signal::SpeedBounds;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ENTITIES_FILE: &str = "entities.jsonl";
pub const ARRAYS_FILE: &str = "arrays.bin";

pub const ASSETS_FILE: &str = "assets.jsonl";
pub const NOTES_FILE: &str = "notes.jsonl";
pub const RECORDINGS_FILE: &str = "recordings.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub assets: usize,
    pub points: usize,
    pub annotations: usize,
    pub recordings: usize,
    pub documents: usize,
    pub chunks: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    F32,
    F64,
    I64,
}

impl DType {
    fn width(self) -> u64 {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }
}

/// One contiguous section of `arrays.bin`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub dtype: DType,
    /// Byte offset from the start of the file.
    pub offset: u64,
    /// Element count.
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format_version: u32,
    pub counts: Counts,
    pub document_only: bool,
    pub speed_bounds: Option<SpeedBounds>,
    pub stats: NormalizationStats,
    pub config: StoreConfig,
    pub entities_bytes: u64,
    pub arrays_bytes: u64,
    pub sections: Vec<Section>,
    /// `sha256:` followed by the lowercase hex digest.
    pub digest: String,
}

#[derive(Serialize, Deserialize)]
struct RecordingMeta {
    id: RecordingId,
    point_id: PointId,
    recording_date: DateTime<Utc>,
    shaft_speed: f64,
    spectrum_len: usize,
    time_series_len: usize,
    trend_len: usize,
    bias_len: usize,
}

#[derive(Serialize, Deserialize)]
struct DocumentMeta {
    doc_id: DocId,
    chunk_start: usize,
    chunk_end: usize,
}

#[derive(Serialize, Deserialize)]
struct ChunkMeta {
    chunk_id: ChunkId,
    recording: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Entity {
    Asset(Asset),
    Point(Point),
    Annotation(Annotation),
    Recording(RecordingMeta),
    Document(DocumentMeta),
    Chunk(ChunkMeta),
}

const SECTION_NAMES: [(&str, DType); 7] = [
    ("spectra", DType::F32),
    ("time_series", DType::F32),
    ("trend_times_ns", DType::I64),
    ("trend_values", DType::F64),
    ("bias_times_ns", DType::I64),
    ("bias_values", DType::F64),
    ("note_embeddings", DType::F64),
];

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn digest_of(entities: &[u8], arrays: &[u8], manifest: &StoreManifest) -> Result<String> {
    let mut blank = manifest.clone();
    blank.digest.clear();
    let mut h = Sha256::new();
    h.update(entities);
    h.update(arrays);
    h.update(serde_json::to_vec_pretty(&blank)?);
    Ok(format!("sha256:{}", hex(&h.finalize())))
}

fn time_ns(t: DateTime<Utc>, what: &str) -> Result<i64> {
    t.timestamp_nanos_opt().ok_or_else(|| {
        Error::InvalidArgument(format!("{what} {t} is outside the nanosecond range"))
    })
}

/// Serializes `store` into `dir`, creating it if needed.
pub fn save_store(store: &VectorStore, dir: impl AsRef<Path>) -> Result<StoreManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut entities = Vec::new();
    let mut line = |e: Entity| -> Result<()> {
        serde_json::to_writer(&mut entities, &e)?;
        entities.push(b'\n');
        Ok(())
    };
    for a in store.assets() {
        line(Entity::Asset(a.clone()))?;
    }
    for p in store.points() {
        line(Entity::Point(p.clone()))?;
    }
    for n in store.annotations() {
        line(Entity::Annotation(n.clone()))?;
    }
    let mut sections: Vec<Vec<u8>> = vec![Vec::new(); SECTION_NAMES.len()];
    for sr in store.recordings() {
        let r = &sr.recording;
        line(Entity::Recording(RecordingMeta {
            id: r.id,
            point_id: r.point_id,
            recording_date: r.recording_date,
            shaft_speed: r.shaft_speed,
            spectrum_len: r.spectrum.len(),
            time_series_len: r.time_series.len(),
            trend_len: r.trend_levels.len(),
            bias_len: r.bias_levels.len(),
        }))?;
        sections[0].extend(r.spectrum.iter().flat_map(|v| v.to_le_bytes()));
        sections[1].extend(r.time_series.iter().flat_map(|v| v.to_le_bytes()));
        for (times, values, levels) in [(2, 3, &r.trend_levels), (4, 5, &r.bias_levels)] {
            for s in levels {
                let ns = time_ns(s.time, "level sample time")?;
                sections[times].extend(ns.to_le_bytes());
                sections[values].extend(s.value.to_le_bytes());
            }
        }
    }
    for d in store.documents() {
        line(Entity::Document(DocumentMeta {
            doc_id: d.doc_id,
            chunk_start: d.chunk_range.start,
            chunk_end: d.chunk_range.end,
        }))?;
        sections[6].extend(d.note_embedding.iter().flat_map(|v| v.to_le_bytes()));
    }
    for c in store.chunks() {
        line(Entity::Chunk(ChunkMeta {
            chunk_id: c.chunk_id,
            recording: c.recording,
        }))?;
    }

    let mut arrays = Vec::new();
    let mut table = Vec::new();
    for ((name, dtype), bytes) in SECTION_NAMES.iter().zip(&sections) {
        table.push(Section {
            name: name.to_string(),
            dtype: *dtype,
            offset: arrays.len() as u64,
            len: bytes.len() as u64 / dtype.width(),
        });
        arrays.extend_from_slice(bytes);
    }

    let mut manifest = StoreManifest {
        format_version: FORMAT_VERSION,
        counts: Counts {
            assets: store.assets().len(),
            points: store.points().len(),
            annotations: store.annotations().len(),
            recordings: store.recordings().len(),
            documents: store.documents().len(),
            chunks: store.chunks().len(),
        },
        document_only: store.is_document_only(),
        speed_bounds: store.speed_bounds(),
        stats: store.stats().clone(),
        config: store.config().clone(),
        entities_bytes: entities.len() as u64,
        arrays_bytes: arrays.len() as u64,
        sections: table,
        digest: String::new(),
    };
    manifest.digest = digest_of(&entities, &arrays, &manifest)?;

    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))
    };
    write(ENTITIES_FILE, &entities)?;
    write(ARRAYS_FILE, &arrays)?;
    let mut m = serde_json::to_vec_pretty(&manifest)?;
    m.push(b'\n');
    write(MANIFEST_FILE, &m)?;
    Ok(manifest)
}

/// Saves the document-only view of `store`.
pub fn export_document_view(store: &VectorStore, dir: impl AsRef<Path>) -> Result<StoreManifest> {
    save_store(&document_view(store), dir)
}

fn read(path: PathBuf) -> Result<Vec<u8>> {
    fs::read(&path).map_err(|e| Error::io(path, e))
}

/// Reads the little-endian sections of `arrays.bin`.
struct Arrays<'a> {
    bytes: &'a [u8],
    table: &'a [Section],
}

impl<'a> Arrays<'a> {
    fn section(&self, i: usize) -> Result<&'a [u8]> {
        let s = &self.table[i];
        let (name, dtype) = SECTION_NAMES[i];
        if s.name != name || s.dtype != dtype {
            return Err(Error::Integrity(format!(
                "arrays section {i} is {:?}/{:?}, expected {name}/{dtype:?}",
                s.name, s.dtype
            )));
        }
        let end = s.offset + s.len * dtype.width();
        if end > self.bytes.len() as u64 {
            return Err(Error::Truncated {
                file: ARRAYS_FILE.into(),
                expected: end,
                found: self.bytes.len() as u64,
            });
        }
        Ok(&self.bytes[s.offset as usize..end as usize])
    }
}

/// Sequential reader over one section.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    name: &'static str,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self, n: usize) -> Result<impl Iterator<Item = [u8; N]> + 'a> {
        let end = self.pos + n * N;
        if end > self.bytes.len() {
            return Err(Error::Integrity(format!(
                "arrays section {} ends before the entities that reference it",
                self.name
            )));
        }
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice
            .chunks_exact(N)
            .map(|c| c.try_into().expect("exact chunk")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.take::<4>(n)?.map(f32::from_le_bytes).collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.take::<8>(n)?.map(f64::from_le_bytes).collect())
    }

    fn i64s(&mut self, n: usize) -> Result<Vec<i64>> {
        Ok(self.take::<8>(n)?.map(i64::from_le_bytes).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Integrity(format!(
                "arrays section {} has {} unreferenced bytes",
                self.name,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn levels(times: Vec<i64>, values: Vec<f64>) -> Vec<LevelSample> {
    times
        .into_iter()
        .zip(values)
        .map(|(t, value)| LevelSample {
            time: DateTime::from_timestamp_nanos(t),
            value,
        })
        .collect()
}

/// Loads a store saved by [`save_store`]. Checks the format version, then
/// file sizes, then the digest, before parsing any entity.
pub fn load_store(dir: impl AsRef<Path>) -> Result<VectorStore> {
    let dir = dir.as_ref();
    let manifest_bytes = read(dir.join(MANIFEST_FILE))?;
    let value: serde_json::Value =
        serde_json::from_slice(&manifest_bytes).map_err(|e| Error::Parse {
            file: MANIFEST_FILE.into(),
            line: e.line(),
            message: e.to_string(),
        })?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Parse {
            file: MANIFEST_FILE.into(),
            line: 1,
            message: "missing format_version".into(),
        })?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(Error::VersionMismatch {
            found: found as u32,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: StoreManifest = serde_json::from_value(value).map_err(|e| Error::Parse {
        file: MANIFEST_FILE.into(),
        line: 1,
        message: e.to_string(),
    })?;
    let entities = read(dir.join(ENTITIES_FILE))?;
    let arrays = read(dir.join(ARRAYS_FILE))?;
    for (file, expected, bytes) in [
        (ENTITIES_FILE, manifest.entities_bytes, &entities),
        (ARRAYS_FILE, manifest.arrays_bytes, &arrays),
    ] {
        if bytes.len() as u64 != expected {
            return Err(Error::Truncated {
                file: file.into(),
                expected,
                found: bytes.len() as u64,
            });
        }
    }
    let digest = digest_of(&entities, &arrays, &manifest)?;
    if digest != manifest.digest {
        return Err(Error::DigestMismatch {
            expected: manifest.digest,
            found: digest,
        });
    }
    if manifest.sections.len() != SECTION_NAMES.len() {
        return Err(Error::Integrity(format!(
            "manifest lists {} array sections, expected {}",
            manifest.sections.len(),
            SECTION_NAMES.len()
        )));
    }
    let table = Arrays {
        bytes: &arrays,
        table: &manifest.sections,
    };
    let mut cur: Vec<Cursor<'_>> = (0..SECTION_NAMES.len())
        .map(|i| {
            Ok(Cursor {
                bytes: table.section(i)?,
                pos: 0,
                name: SECTION_NAMES[i].0,
            })
        })
        .collect::<Result<_>>()?;

    let mut assets = Vec::new();
    let mut points = Vec::new();
    let mut annotations = Vec::new();
    let mut recordings = Vec::new();
    let mut doc_meta = Vec::new();
    let mut chunk_meta = Vec::new();
    for (i, raw) in entities.split(|&b| b == b'\n').enumerate() {
        if raw.is_empty() {
            continue;
        }
        let entity: Entity = serde_json::from_slice(raw).map_err(|e| Error::Parse {
            file: ENTITIES_FILE.into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        match entity {
            Entity::Asset(a) => assets.push(a),
            Entity::Point(p) => points.push(p),
            Entity::Annotation(n) => annotations.push(n),
            Entity::Recording(m) => {
                let spectrum = cur[0].f32s(m.spectrum_len)?;
                let time_series = cur[1].f32s(m.time_series_len)?;
                let trend_times = cur[2].i64s(m.trend_len)?;
                let trend_values = cur[3].f64s(m.trend_len)?;
                let bias_times = cur[4].i64s(m.bias_len)?;
                let bias_values = cur[5].f64s(m.bias_len)?;
                recordings.push(Recording {
                    id: m.id,
                    point_id: m.point_id,
                    recording_date: m.recording_date,
                    shaft_speed: m.shaft_speed,
                    spectrum,
                    time_series,
                    trend_levels: levels(trend_times, trend_values),
                    bias_levels: levels(bias_times, bias_values),
                });
            }
            Entity::Document(d) => doc_meta.push(d),
            Entity::Chunk(c) => chunk_meta.push(c),
        }
    }
    let counts = Counts {
        assets: assets.len(),
        points: points.len(),
        annotations: annotations.len(),
        recordings: recordings.len(),
        documents: doc_meta.len(),
        chunks: chunk_meta.len(),
    };
    if counts != manifest.counts {
        return Err(Error::Integrity(format!(
            "entity counts {counts:?} differ from manifest {:?}",
            manifest.counts
        )));
    }

    let stored = match manifest.speed_bounds {
        Some(b) => recordings
            .into_iter()
            .map(|r| derive_recording(r, b, manifest.config.variance_window_days))
            .collect::<Result<Vec<_>>>()?,
        None if recordings.is_empty() => Vec::new(),
        None => {
            return Err(Error::Integrity(
                "store has recordings but no speed bounds".into(),
            ))
        }
    };

    let asset_ix: HashMap<AssetId, usize> =
        assets.iter().enumerate().map(|(i, a)| (a.id, i)).collect();
    let point_ix: HashMap<PointId, usize> =
        points.iter().enumerate().map(|(i, p)| (p.id, i)).collect();
    let note_ix: HashMap<NoteId, usize> = annotations
        .iter()
        .enumerate()
        .map(|(i, n)| (n.id, i))
        .collect();
    let dim = manifest.config.embedding_dim;
    let mut documents = Vec::with_capacity(doc_meta.len());
    for d in &doc_meta {
        let embedding = cur[6].f64s(dim)?;
        let point = point_ix
            .get(&d.doc_id.point)
            .map(|&i| &points[i])
            .ok_or_else(|| Error::Integrity(format!("document {} has unknown point", d.doc_id)))?;
        let note = note_ix
            .get(&d.doc_id.note)
            .map(|&i| &annotations[i])
            .ok_or_else(|| Error::Integrity(format!("document {} has unknown note", d.doc_id)))?;
        let asset = asset_ix
            .get(&note.asset_id)
            .map(|&i| &assets[i])
            .ok_or_else(|| Error::Integrity(format!("document {} has unknown asset", d.doc_id)))?;
        if d.chunk_start > d.chunk_end || d.chunk_end > chunk_meta.len() {
            return Err(Error::Integrity(format!(
                "document {} chunk range is invalid",
                d.doc_id
            )));
        }
        documents.push(VectorStore::make_document(
            d.doc_id,
            asset,
            point,
            note,
            embedding,
            d.chunk_start..d.chunk_end,
        ));
    }
    for c in &mut cur {
        c.finish()?;
    }
    let mut chunks = Vec::with_capacity(chunk_meta.len());
    for d in &documents {
        for c in &chunk_meta[d.chunk_range.clone()] {
            let rec = stored.get(c.recording).ok_or_else(|| {
                Error::Integrity(format!("chunk {} references missing recording", c.chunk_id))
            })?;
            if c.chunk_id.doc() != d.doc_id {
                return Err(Error::Integrity(format!(
                    "chunk {} is stored under document {}",
                    c.chunk_id, d.doc_id
                )));
            }
            chunks.push(RecordingChunk {
                chunk_id: c.chunk_id,
                recording: c.recording,
                timedelta_days: days_between(d.note_date, rec.recording.recording_date),
            });
        }
    }
    if chunks.len() != chunk_meta.len() {
        return Err(Error::Integrity("some chunks belong to no document".into()));
    }
    Ok(VectorStore::from_parts(
        manifest.config,
        assets,
        points,
        annotations,
        stored,
        documents,
        chunks,
        manifest.speed_bounds,
        manifest.stats,
        manifest.document_only,
    ))
}

/// One line of the hierarchy import file.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum HierarchyLine {
    Asset(Asset),
    Point(Point),
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Parses a JSON-lines file, skipping blank lines, keeping line numbers.
fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let label = file_label(path);
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            file: label.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

/// Tracks first-seen lines of ids so duplicates can name both.
struct Seen<K> {
    what: &'static str,
    file: String,
    lines: HashMap<K, usize>,
}

impl<K: std::hash::Hash + Eq + Copy + Into<u64>> Seen<K> {
    fn new(what: &'static str, file: String) -> Self {
        Seen {
            what,
            file,
            lines: HashMap::new(),
        }
    }

    fn insert(&mut self, id: K, line: usize) -> Result<()> {
        if let Some(first) = self.lines.insert(id, line) {
            return Err(Error::Integrity(format!(
                "duplicate {} id {} at {f}:{first} and {f}:{line}",
                self.what,
                id.into(),
                f = self.file
            )));
        }
        Ok(())
    }
}

macro_rules! id_into_u64 {
    ($($t:ty),*) => {$(impl From<$t> for u64 { fn from(v: $t) -> u64 { v.0 } })*};
}
id_into_u64!(AssetId, PointId, NoteId, RecordingId);

/// Reads the three import files: hierarchy lines tagged `asset` or
/// `point`, annotation lines, and recording lines. Errors carry the file
/// name and line number.
pub fn import_inputs(
    assets_path: impl AsRef<Path>,
    notes_path: impl AsRef<Path>,
    recordings_path: impl AsRef<Path>,
) -> Result<BuildInputs> {
    let (ap, np, rp) = (
        assets_path.as_ref(),
        notes_path.as_ref(),
        recordings_path.as_ref(),
    );
    let (af, nf, rf) = (file_label(ap), file_label(np), file_label(rp));

    let mut inputs = BuildInputs::default();
    let mut asset_seen = Seen::new("asset", af.clone());
    let mut point_seen = Seen::new("point", af.clone());
    let mut point_lines = Vec::new();
    for (line, h) in read_jsonl::<HierarchyLine>(ap)? {
        match h {
            HierarchyLine::Asset(a) => {
                asset_seen.insert(a.id, line)?;
                inputs.assets.push(a);
            }
            HierarchyLine::Point(p) => {
                point_seen.insert(p.id, line)?;
                point_lines.push(line);
                inputs.points.push(p);
            }
        }
    }
    for (p, line) in inputs.points.iter().zip(&point_lines) {
        if !asset_seen.lines.contains_key(&p.asset_id) {
            return Err(Error::Integrity(format!(
                "{af}:{line}: point {} references unknown asset {}",
                p.id.0, p.asset_id.0
            )));
        }
    }
    let mut note_seen = Seen::new("annotation", nf.clone());
    for (line, n) in read_jsonl::<Annotation>(np)? {
        note_seen.insert(n.id, line)?;
        if !asset_seen.lines.contains_key(&n.asset_id) {
            return Err(Error::Integrity(format!(
                "{nf}:{line}: annotation {} references unknown asset {}",
                n.id.0, n.asset_id.0
            )));
        }
        if n.content.trim().is_empty() {
            return Err(Error::Integrity(format!(
                "{nf}:{line}: annotation {} has empty content",
                n.id.0
            )));
        }
        inputs.annotations.push(n);
    }
    let point_asset: HashMap<PointId, AssetId> =
        inputs.points.iter().map(|p| (p.id, p.asset_id)).collect();
    let mut rec_seen = Seen::new("recording", rf.clone());
    let mut dims: Option<(usize, usize)> = None;
    for (line, r) in read_jsonl::<Recording>(rp)? {
        rec_seen.insert(r.id, line)?;
        let (s, t) = *dims.get_or_insert((r.spectrum.len(), r.time_series.len()));
        check_recording(&r, &point_asset, Some(s), Some(t)).map_err(|e| match e {
            Error::Integrity(m) => Error::Integrity(format!("{rf}:{line}: {m}")),
            other => other,
        })?;
        inputs.recordings.push(r);
    }
    validate_inputs(&inputs, &BuildConfig::default())?;
    Ok(inputs)
}

/// Writes `inputs` as the three import files in `dir`; returns their paths
/// in the order [`import_inputs`] takes them.
pub fn write_inputs(inputs: &BuildInputs, dir: impl AsRef<Path>) -> Result<[PathBuf; 3]> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = [
        dir.join(ASSETS_FILE),
        dir.join(NOTES_FILE),
        dir.join(RECORDINGS_FILE),
    ];
    let open = |p: &PathBuf| -> Result<BufWriter<fs::File>> {
        Ok(BufWriter::new(
            fs::File::create(p).map_err(|e| Error::io(p, e))?,
        ))
    };
    let finish = |mut w: BufWriter<fs::File>, p: &PathBuf| w.flush().map_err(|e| Error::io(p, e));
    let newline =
        |w: &mut BufWriter<fs::File>, p: &PathBuf| w.write_all(b"\n").map_err(|e| Error::io(p, e));

    let mut w = open(&paths[0])?;
    for a in &inputs.assets {
        serde_json::to_writer(&mut w, &HierarchyLine::Asset(a.clone()))?;
        newline(&mut w, &paths[0])?;
    }
    for p in &inputs.points {
        serde_json::to_writer(&mut w, &HierarchyLine::Point(p.clone()))?;
        newline(&mut w, &paths[0])?;
    }
    finish(w, &paths[0])?;
    let mut w = open(&paths[1])?;
    for n in &inputs.annotations {
        serde_json::to_writer(&mut w, n)?;
        newline(&mut w, &paths[1])?;
    }
    finish(w, &paths[1])?;
    let mut w = open(&paths[2])?;
    for r in &inputs.recordings {
        serde_json::to_writer(&mut w, r)?;
        newline(&mut w, &paths[2])?;
    }
    finish(w, &paths[2])?;
    Ok(paths)
}

/// Imports the three files written by [`write_inputs`] from `dir`.
pub fn import_dir(dir: impl AsRef<Path>) -> Result<BuildInputs> {
    let dir = dir.as_ref();
    import_inputs(
        dir.join(ASSETS_FILE),
        dir.join(NOTES_FILE),
        dir.join(RECORDINGS_FILE),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_store, AssetPath, SensorType};
    use crate::retrieval::{retrieve, Limit, Mode, NoteQuery, Payloads, Query, SignalQuery};
    use chrono::TimeZone;

    fn inputs() -> BuildInputs {
        let t0 = Utc.with_ymd_and_hms(2024, 3, 1, 12, 0, 0).unwrap();
        let day = chrono::Duration::days(1);
        BuildInputs {
            assets: vec![
                Asset {
                    id: AssetId(1),
                    path: AssetPath::new(["PM1", "Torkparti", "Torkgrupp 3", "TC 67"]).unwrap(),
                    point_ids: vec![PointId(1), PointId(2)],
                    note_ids: vec![NoteId(1)],
                },
                Asset {
                    id: AssetId(2),
                    path: AssetPath::new(["PM1", "Pressparti", "PV 2"]).unwrap(),
                    point_ids: vec![PointId(3)],
                    note_ids: vec![NoteId(2)],
                },
            ],
            points: vec![
                Point {
                    id: PointId(1),
                    name: "TC 67 DS VE3".into(),
                    sensor_type: SensorType::Peak,
                    asset_id: AssetId(1),
                },
                Point {
                    id: PointId(2),
                    name: "TC 67 FS VV1".into(),
                    sensor_type: SensorType::Rms,
                    asset_id: AssetId(1),
                },
                Point {
                    id: PointId(3),
                    name: "PV 2 DS VE3".into(),
                    sensor_type: SensorType::Peak,
                    asset_id: AssetId(2),
                },
            ],
            annotations: vec![
                Annotation {
                    id: NoteId(1),
                    content: "BPFO låga nivåer, håll koll.".into(),
                    date: t0,
                    asset_id: AssetId(1),
                    author: None,
                },
                Annotation {
                    id: NoteId(2),
                    content: "Givaren utbytt.".into(),
                    date: t0 + day * 5,
                    asset_id: AssetId(2),
                    author: Some("cm".into()),
                },
            ],
            recordings: (0..6)
                .map(|i| Recording {
                    id: RecordingId(i + 1),
                    point_id: PointId(i % 3 + 1),
                    recording_date: t0 - day * (i as i32) + chrono::Duration::milliseconds(123),
                    shaft_speed: 300.0 + 37.5 * i as f64,
                    spectrum: (0..16)
                        .map(|j| ((j * (i + 1)) % 7) as f32 * 0.1 + 0.01)
                        .collect(),
                    time_series: vec![0.5, -0.25, 0.125, i as f32],
                    trend_levels: (0..3)
                        .map(|k| LevelSample {
                            time: t0 - day * (i as i32) + chrono::Duration::hours(k),
                            value: 1.0 / (k + 3) as f64,
                        })
                        .collect(),
                    bias_levels: vec![LevelSample {
                        time: t0,
                        value: -10.1,
                    }],
                })
                .collect(),
        }
    }

    #[test]
    fn round_trip_is_exact_and_canonical() {
        let store = build_store(inputs(), &BuildConfig::default()).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = save_store(&store, a.path()).unwrap();
        assert!(m.digest.starts_with("sha256:"));
        let loaded = load_store(a.path()).unwrap();
        save_store(&loaded, b.path()).unwrap();
        for f in [MANIFEST_FILE, ENTITIES_FILE, ARRAYS_FILE] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let q = Query {
            payloads: Payloads {
                note: Some(NoteQuery::Text("lager bpfo".into())),
                signal: Some(SignalQuery::Chunk(store.chunks()[0].chunk_id)),
                ..Payloads::default()
            },
            mode: Mode::Chunks,
            limit: Limit::All,
            ..Query::default()
        };
        let x = retrieve(&store, &q).unwrap();
        let y = retrieve(&loaded, &q).unwrap();
        assert_eq!(x.len(), y.len());
        for (h, k) in x.iter().zip(&y) {
            assert_eq!(h.id, k.id);
            assert_eq!(h.total.to_bits(), k.total.to_bits());
        }
    }

    #[test]
    fn empty_and_document_only_round_trip() {
        let empty = build_store(BuildInputs::default(), &BuildConfig::default()).unwrap();
        let d = tempfile::tempdir().unwrap();
        save_store(&empty, d.path()).unwrap();
        let l = load_store(d.path()).unwrap();
        assert!(l.documents().is_empty() && l.recordings().is_empty());

        let store = build_store(inputs(), &BuildConfig::default()).unwrap();
        let v = tempfile::tempdir().unwrap();
        export_document_view(&store, v.path()).unwrap();
        let l = load_store(v.path()).unwrap();
        assert!(l.is_document_only());
        assert_eq!(l.documents().len(), store.documents().len());
        assert!(l.chunks().is_empty());
    }

    #[test]
    fn load_errors_are_distinct() {
        let store = build_store(inputs(), &BuildConfig::default()).unwrap();
        let d = tempfile::tempdir().unwrap();
        save_store(&store, d.path()).unwrap();
        let arrays = d.path().join(ARRAYS_FILE);
        let good = fs::read(&arrays).unwrap();

        let mut bad = good.clone();
        bad[10] ^= 0x40;
        fs::write(&arrays, &bad).unwrap();
        assert!(matches!(
            load_store(d.path()),
            Err(Error::DigestMismatch { .. })
        ));

        fs::write(&arrays, &good[..good.len() - 3]).unwrap();
        assert!(matches!(load_store(d.path()), Err(Error::Truncated { .. })));
        fs::write(&arrays, &good).unwrap();

        let mpath = d.path().join(MANIFEST_FILE);
        let m = fs::read_to_string(&mpath).unwrap();
        fs::write(
            &mpath,
            m.replace("\"format_version\": 1", "\"format_version\": 2"),
        )
        .unwrap();
        assert!(matches!(
            load_store(d.path()),
            Err(Error::VersionMismatch {
                found: 2,
                expected: 1
            })
        ));
        fs::write(&mpath, m).unwrap();
        load_store(d.path()).unwrap();
    }

    #[test]
    fn import_round_trip_and_diagnostics() {
        let d = tempfile::tempdir().unwrap();
        let inp = inputs();
        write_inputs(&inp, d.path()).unwrap();
        assert_eq!(import_dir(d.path()).unwrap(), inp);

        let assets = d.path().join(ASSETS_FILE);
        let text = fs::read_to_string(&assets).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let dup = lines[2];
        lines.push(dup);
        fs::write(&assets, lines.join("\n")).unwrap();
        let err = import_dir(d.path()).unwrap_err().to_string();
        assert!(
            err.contains("duplicate point id 1") && err.contains(":3") && err.contains(":6"),
            "{err}"
        );

        fs::write(&assets, "{\"kind\":\"asset\"\n").unwrap();
        match import_dir(d.path()) {
            Err(Error::Parse { file, line, .. }) => {
                assert_eq!((file.as_str(), line), (ASSETS_FILE, 1))
            }
            other => panic!("{other:?}"),
        }

        write_inputs(&inp, d.path()).unwrap();
        let recs = d.path().join(RECORDINGS_FILE);
        let text =
            fs::read_to_string(&recs)
                .unwrap()
                .replacen("\"point_id\":1", "\"point_id\":77", 1);
        fs::write(&recs, text).unwrap();
        let err = import_dir(d.path()).unwrap_err().to_string();
        assert!(
            err.contains("unknown point 77") && err.contains("recordings.jsonl:1"),
            "{err}"
        );
    }
}
