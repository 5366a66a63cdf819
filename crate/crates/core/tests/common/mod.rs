//! Fixtures and reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::BTreeMap;

use chrono::Duration;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use cmstore::model::{
    build_store, days_between, hierarchy_distance, BuildConfig, DocumentChunk, RecordingChunk,
    StoredRecording, VectorStore,
};
use cmstore::retrieval::{
    date_score, speed_score, variance_score, DateTarget, FilterTree, HitId, Limit, Metric, Mode,
    NormalizationOrder, NoteQuery, Payloads, Query, SignalQuery, SpeedTarget, TimedeltaTarget,
    VarianceTarget, WeightProfile,
};
use cmstore::signal::cosine_f32;
use cmstore::synth::{
    generate_plant, Coverage, FaultScenario, FaultType, NoteSpec, PlantConfig, RoutineNotes,
    SectionSpec,
};
use cmstore::text::{bleu, embed_text, substitute_technical_terms, BleuConfig};

pub fn section(name: &str, groups: usize, assets: usize, archetypes: &[&str]) -> SectionSpec {
    SectionSpec {
        name: name.into(),
        groups,
        assets_per_group: assets,
        archetypes: archetypes.iter().map(|s| s.to_string()).collect(),
        group_label: "Grupp".into(),
    }
}

pub fn scenario(asset: &str, fault: FaultType, onset_day: f64, note_day: f64) -> FaultScenario {
    FaultScenario {
        asset: asset.into(),
        points: None,
        fault,
        onset_day,
        ramp_days: 20.0,
        peak_severity: 1.0,
        intermittency: 1.0,
        note: NoteSpec {
            day: note_day,
            text: None,
            replacement: None,
        },
    }
}

/// A few hundred chunks: two sections, one scenario per fault type and
/// routine notes on the healthy assets.
pub fn small_plant(seed: u64) -> PlantConfig {
    let mut c = PlantConfig::new(
        seed,
        vec![
            section("Torkparti", 2, 2, &["TC", "FU"]),
            section("Pressparti", 1, 2, &["VU"]),
        ],
    );
    c.sampling.days = 60.0;
    c.sampling.recordings_per_day = 1.0;
    c.sampling.spectrum_len = 96;
    c.sampling.time_series_len = 64;
    c.sampling.time_series_seconds = 0.5;
    c.sampling.level_window_days = 2.0;
    c.sampling.coverage = Coverage::AroundNotes {
        before: 8.0,
        after: 4.0,
    };
    c.scenarios = vec![
        scenario("TC 1", FaultType::BpfoLike, 20.0, 40.0),
        scenario("FU 1", FaultType::BpfiLike, 15.0, 35.0),
        scenario("VU 1", FaultType::CableSensor, 25.0, 45.0),
        scenario("TC 2", FaultType::Imbalance, 10.0, 30.0),
    ];
    c.routine_notes = Some(RoutineNotes {
        per_asset: 1,
        assets: None,
        texts: vec![
            "Okulär kontroll utförd.".into(),
            "Smörjning utförd enligt plan.".into(),
        ],
    });
    c
}

pub fn build(config: &PlantConfig) -> VectorStore {
    build_store(generate_plant(config).unwrap(), &BuildConfig::default()).unwrap()
}

/// One scenario per asset, fault types in rotation, notes spread over the
/// year. The onset lies `lead` days before each note.
pub fn fault_plant(seed: u64, per_class: usize, lead: f64) -> PlantConfig {
    let n = per_class * 4;
    let codes = ["TC", "FU", "VU", "PV"];
    let groups = n.div_ceil(5);
    let mut c = PlantConfig::new(
        seed,
        vec![
            section("Torkparti", groups.div_ceil(2), 5, &codes),
            section("Pressparti", groups.div_ceil(2), 5, &codes),
        ],
    );
    for a in &mut c.archetypes {
        a.points = Some(2);
    }
    c.sampling.days = 365.0;
    c.sampling.recordings_per_day = 0.5;
    c.sampling.spectrum_len = 400;
    c.sampling.time_series_len = 64;
    c.sampling.time_series_seconds = 0.5;
    c.sampling.level_window_days = 2.0;
    c.sampling.coverage = Coverage::AroundNotes {
        before: 50.0,
        after: 20.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let faults = FaultType::ALL;
    // Asset names follow per-code counters in layout order, which cycles
    // codes over groups.
    let mut names = Vec::new();
    let mut counters = BTreeMap::new();
    for s in &c.sections {
        for g in 0..s.groups {
            let code = &s.archetypes[g % s.archetypes.len()];
            for _ in 0..s.assets_per_group {
                let k = counters.entry(code.clone()).or_insert(0usize);
                *k += 1;
                names.push(format!("{code} {k}"));
            }
        }
    }
    for (i, name) in names.iter().take(n).enumerate() {
        let note_day = rng.random_range(lead + 5.0..340.0);
        c.scenarios.push(scenario(
            name,
            faults[i % faults.len()],
            note_day - lead,
            note_day,
        ));
    }
    c
}

/// Chunk-level and document-level metrics a random query may use.
const DOC_METRICS: [Metric; 5] = [
    Metric::NoteEmbedding,
    Metric::AssetBleu,
    Metric::PointBleu,
    Metric::HierarchyDistance,
    Metric::NoteDate,
];

pub fn random_filter(
    rng: &mut ChaCha8Rng,
    store: &VectorStore,
    chunks: bool,
    depth: u32,
) -> FilterTree {
    let docs = store.documents();
    let doc = &docs[rng.random_range(0..docs.len())];
    let leaf_kinds = if chunks { 8 } else { 5 };
    if depth > 0 && rng.random_bool(0.4) {
        let kids = (0..rng.random_range(1..=3))
            .map(|_| random_filter(rng, store, chunks, depth - 1))
            .collect();
        return match rng.random_range(0..3) {
            0 => FilterTree::And(kids),
            1 => FilterTree::Or(kids),
            _ => FilterTree::not(random_filter(rng, store, chunks, depth - 1)),
        };
    }
    match rng.random_range(0..leaf_kinds) {
        0 => {
            let seg = &doc.asset_path.segments()[rng.random_range(0..doc.asset_path.len())];
            FilterTree::PathContains(vec![seg.to_uppercase()])
        }
        1 => FilterTree::PointTypeIs(doc.point_type),
        2 => FilterTree::NoteKeywords(vec!["bpf".into(), "givaren".into()]),
        3 => FilterTree::AssetIdIn(vec![doc.asset_id]),
        4 => FilterTree::PointNameContains(vec![doc.point_name[..2].to_lowercase()]),
        5 => {
            let lo = rng.random_range(-10.0..0.0);
            FilterTree::TimedeltaSpan {
                lo: Some(lo),
                hi: rng.random_bool(0.5).then_some(lo + 6.0),
            }
        }
        6 => FilterTree::SpeedSpan {
            lo: None,
            hi: Some(rng.random_range(300.0..600.0)),
        },
        _ => {
            let c = &store.chunks()[rng.random_range(0..store.chunks().len())];
            FilterTree::RecordingIdIn(vec![store.recording_of(c).recording.id])
        }
    }
}

/// A query whose metrics, weights, filter and limit are all drawn at random.
pub fn random_query(rng: &mut ChaCha8Rng, store: &VectorStore) -> Query {
    let chunks = rng.random_bool(0.6);
    let docs = store.documents();
    let doc = &docs[rng.random_range(0..docs.len())];
    let chunk = &store.chunks()[rng.random_range(0..store.chunks().len())];
    let rec = store.recording_of(chunk);
    let mut metrics: Vec<Metric> = DOC_METRICS.to_vec();
    if chunks {
        metrics.extend(Metric::ALL.iter().filter(|m| m.is_chunk_level()));
    }
    let mut weights = WeightProfile::zero();
    let mut p = Payloads::default();
    let levels = [0.5, 1.0, 2.0, 5.0];
    for m in metrics {
        if !rng.random_bool(0.45) {
            continue;
        }
        weights.set(m, levels[rng.random_range(0..levels.len())]);
        match m {
            Metric::NoteEmbedding => {
                p.note = Some(if rng.random_bool(0.5) {
                    NoteQuery::Text("BPFO lager obalans".into())
                } else {
                    NoteQuery::Embedding(doc.note_embedding.clone())
                })
            }
            Metric::SignalEmbedding => p.signal = Some(SignalQuery::Chunk(chunk.chunk_id)),
            Metric::AssetBleu => p.asset_text = Some(doc.asset_path.as_text()),
            Metric::PointBleu => p.point_text = Some(doc.point_name.clone()),
            Metric::HierarchyDistance => p.asset_path = Some(doc.asset_path.clone()),
            Metric::NoteDate => {
                p.note_date = Some(DateTarget {
                    target: doc.note_date + Duration::hours(rng.random_range(-240..240)),
                    n: 5.0,
                    inverse: rng.random_bool(0.2),
                })
            }
            Metric::RecordingDate => {
                p.recording_date = Some(DateTarget {
                    target: rec.recording.recording_date,
                    n: rng.random_range(1.0..10.0),
                    inverse: false,
                })
            }
            Metric::Timedelta => {
                p.timedelta = Some(TimedeltaTarget {
                    target: -rng.random_range(0.0..10.0),
                    n: 5.0,
                    inverse: false,
                })
            }
            Metric::Speed => {
                p.speed = Some(SpeedTarget {
                    target: rec.recording.shaft_speed,
                    n: 50.0,
                    inverse: rng.random_bool(0.2),
                })
            }
            Metric::TrendVariance => {
                p.trend_variance = Some(VarianceTarget {
                    target: rec.trend_variance,
                    n: 1e-3,
                })
            }
            Metric::BiasVariance => {
                p.bias_variance = Some(VarianceTarget {
                    target: rec.bias_variance,
                    n: 1e-3,
                })
            }
        }
    }
    // A filter-only query when nothing was drawn.
    let return_all = weights.as_array().iter().all(|&w| w == 0.0);
    Query {
        filter: if rng.random_bool(0.6) {
            random_filter(rng, store, chunks, 2)
        } else {
            FilterTree::default()
        },
        payloads: p,
        weights,
        mode: if chunks {
            Mode::Chunks
        } else {
            Mode::Documents
        },
        limit: match rng.random_range(0..4) {
            0 => Limit::All,
            1 => Limit::Threshold(rng.random_range(0.0..3.0)),
            _ => Limit::TopK(rng.random_range(1..25)),
        },
        return_all,
        expand_chunks: false,
        normalization: if rng.random_bool(0.3) {
            NormalizationOrder::WeightThenNormalize
        } else {
            NormalizationOrder::NormalizeThenWeight
        },
        bleu: BleuConfig::default(),
    }
}

fn in_span<T: PartialOrd>(v: T, lo: Option<T>, hi: Option<T>) -> bool {
    lo.is_none_or(|l| v >= l) && hi.is_none_or(|h| v <= h)
}

fn reference_filter(
    f: &FilterTree,
    doc: &DocumentChunk,
    chunk: Option<(&RecordingChunk, &StoredRecording)>,
) -> bool {
    let lower = |s: &str| s.to_lowercase();
    match f {
        FilterTree::And(c) => c.iter().all(|x| reference_filter(x, doc, chunk)),
        FilterTree::Or(c) => c.iter().any(|x| reference_filter(x, doc, chunk)),
        FilterTree::Not(c) => !reference_filter(c, doc, chunk),
        FilterTree::Const(b) => *b,
        FilterTree::PathContains(frags) => frags.iter().all(|fr| {
            doc.asset_path
                .segments()
                .iter()
                .any(|s| lower(s).contains(&lower(fr)))
        }),
        FilterTree::PointNameContains(t) => {
            t.iter().all(|x| lower(&doc.point_name).contains(&lower(x)))
        }
        FilterTree::PointTypeIs(t) => doc.point_type == *t,
        FilterTree::NoteKeywords(t) => t
            .iter()
            .any(|x| lower(&doc.note_content).contains(&lower(x))),
        FilterTree::NoteDateSpan { start, end } => in_span(doc.note_date, *start, *end),
        FilterTree::AssetIdIn(ids) => ids.contains(&doc.asset_id),
        FilterTree::PointIdIn(ids) => ids.contains(&doc.doc_id.point),
        FilterTree::RecordingDateSpan { start, end } => {
            chunk.is_some_and(|(_, r)| in_span(r.recording.recording_date, *start, *end))
        }
        FilterTree::TimedeltaSpan { lo, hi } => {
            chunk.is_some_and(|(c, _)| in_span(c.timedelta_days, *lo, *hi))
        }
        FilterTree::SpeedSpan { lo, hi } => {
            chunk.is_some_and(|(_, r)| in_span(r.recording.shaft_speed, *lo, *hi))
        }
        FilterTree::RecordingIdIn(ids) => chunk.is_some_and(|(_, r)| ids.contains(&r.recording.id)),
    }
}

type ChunkParts<'a> = Option<(&'a RecordingChunk, &'a StoredRecording)>;

fn reference_raw(
    store: &VectorStore,
    q: &Query,
    m: Metric,
    doc: &DocumentChunk,
    chunk: Option<(&RecordingChunk, &StoredRecording)>,
) -> f64 {
    let p = &q.payloads;
    let rec = || chunk.unwrap();
    match m {
        Metric::NoteEmbedding => {
            let v = match p.note.as_ref().unwrap() {
                NoteQuery::Text(t) => embed_text(
                    &substitute_technical_terms(t, &store.config().lexicon),
                    store.embedder(),
                )
                .unwrap(),
                NoteQuery::Embedding(v) => v.clone(),
            };
            v.iter().zip(&doc.note_embedding).map(|(a, b)| a * b).sum()
        }
        Metric::SignalEmbedding => {
            let SignalQuery::Chunk(id) = p.signal.as_ref().unwrap() else {
                unreachable!()
            };
            let src = store.recording_of(store.chunk(*id).unwrap());
            cosine_f32(&src.signal_embedding, &rec().1.signal_embedding)
                .unwrap()
                .value
        }
        Metric::AssetBleu => bleu(
            p.asset_text.as_ref().unwrap(),
            &doc.asset_path.as_text(),
            q.bleu,
        )
        .unwrap(),
        Metric::PointBleu => bleu(p.point_text.as_ref().unwrap(), &doc.point_name, q.bleu).unwrap(),
        Metric::HierarchyDistance => {
            let a = p.asset_path.as_ref().unwrap();
            -(hierarchy_distance(a.segments(), doc.asset_path.segments()).unwrap() as f64)
        }
        Metric::NoteDate => {
            let d = p.note_date.unwrap();
            date_score(days_between(d.target, doc.note_date), d.n, d.inverse).unwrap()
        }
        Metric::RecordingDate => {
            let d = p.recording_date.unwrap();
            date_score(
                days_between(d.target, rec().1.recording.recording_date),
                d.n,
                d.inverse,
            )
            .unwrap()
        }
        Metric::Timedelta => {
            let d = p.timedelta.unwrap();
            date_score(rec().0.timedelta_days - d.target, d.n, d.inverse).unwrap()
        }
        Metric::Speed => {
            let d = p.speed.unwrap();
            speed_score(rec().1.recording.shaft_speed - d.target, d.n, d.inverse).unwrap()
        }
        Metric::TrendVariance => {
            let d = p.trend_variance.unwrap();
            variance_score(d.target, rec().1.trend_variance, d.n).unwrap()
        }
        Metric::BiasVariance => {
            let d = p.bias_variance.unwrap();
            variance_score(d.target, rec().1.bias_variance, d.n).unwrap()
        }
    }
}

/// Full-scan reference ranking: every target is filtered and scored from
/// the primitive metric functions, then sorted by total descending and id
/// ascending.
pub fn reference_rank(store: &VectorStore, q: &Query) -> Vec<(HitId, f64)> {
    let active: Vec<Metric> = Metric::ALL
        .into_iter()
        .filter(|&m| q.weights.get(m) > 0.0 && q.payloads.has(m))
        .collect();
    let stats = store.stats();
    let mut targets: Vec<(HitId, &DocumentChunk, ChunkParts<'_>)> = Vec::new();
    match q.mode {
        Mode::Documents => {
            for d in store.documents() {
                targets.push((HitId::Document(d.doc_id), d, None));
            }
        }
        Mode::Chunks => {
            for c in store.chunks() {
                let d = store.document_of(c);
                targets.push((
                    HitId::Chunk(c.chunk_id),
                    d,
                    Some((c, store.recording_of(c))),
                ));
            }
        }
    }
    let mut out: Vec<(HitId, f64)> = Vec::new();
    for (id, doc, chunk) in targets {
        if !reference_filter(&q.filter, doc, chunk) {
            continue;
        }
        let total = match q.normalization {
            NormalizationOrder::NormalizeThenWeight => {
                let mut t = 0.0;
                for &m in &active {
                    t += q.weights.get(m)
                        * stats.normalize(m, reference_raw(store, q, m, doc, chunk));
                }
                t
            }
            NormalizationOrder::WeightThenNormalize => {
                let (mut num, mut lo, mut span) = (0.0, 0.0, 0.0);
                for &m in &active {
                    let w = q.weights.get(m);
                    let r = stats.range(m);
                    num += w * reference_raw(store, q, m, doc, chunk);
                    lo += w * r.min;
                    span += w * (r.max - r.min);
                }
                if span > 0.0 {
                    ((num - lo) / span).clamp(0.0, 1.0)
                } else {
                    0.5
                }
            }
        };
        out.push((id, total));
    }
    out.sort_by(|a, b| match b.1.total_cmp(&a.1) {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
    match q.limit {
        Limit::TopK(k) => out.truncate(k),
        Limit::Threshold(t) => out.retain(|h| h.1 > t),
        Limit::All => {}
    }
    out
}
