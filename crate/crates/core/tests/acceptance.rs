//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so every criterion reports even when an
//! earlier one fails. `ACCEPTANCE_ONLY=4,9` runs a subset.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use chrono::{Duration, TimeZone, Utc};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use cmstore::gateway::{
    chunk_context, hierarchy_contains, hierarchy_tree, Gateway, LogicalClock, ToolRequest, TOOLS,
};
use cmstore::harness::{
    audit_causality, run_session, score_outcome, score_session, timeslice_eval, Outcome,
    RulePolicy, Score, Session, SessionSpec, TimesliceConfig,
};
use cmstore::inference::{
    knn_predict, majority_vote, sum_of_scores_vote, Exclusion, NoteClass, Ontology, Task, Vote,
    Weighting,
};
use cmstore::io::{load_store, save_store};
use cmstore::model::{
    build_store, hierarchy_distance, Annotation, Asset, AssetId, AssetPath, BuildConfig,
    BuildInputs, LevelSample, NoteId, Point, PointId, Recording, RecordingId, SensorType,
    VectorStore,
};
use cmstore::retrieval::{
    date_score, feature_change_scan, retrieve, retrieve_with, ChangeFeature, FilterTree, Limit,
    Metric, Mode, Payloads, Query, RetrieveOptions, SignalQuery, WeightProfile,
};
use cmstore::signal::{cosine_f32, order_transform, SpeedBounds};
use cmstore::synth::{
    default_archetypes, synth_recording, FaultState, FaultType, PointHealth, RecordingContext,
    Sampling, SpeedRange,
};
use cmstore::text::unigram_bleu;

struct Verdict {
    pass: bool,
    detail: String,
    /// Set when the failure comes from the machine, not the code.
    env_limited: bool,
}

fn check(ok: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass: ok,
        detail: detail.into(),
        env_limited: false,
    }
}

fn criterion_1() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // A small alphabet makes shared prefixes common.
    let alphabet = ["PM1", "Torkparti", "Grupp 1"];
    let path = |rng: &mut ChaCha8Rng| -> Vec<String> {
        (0..rng.random_range(1..=6))
            .map(|_| alphabet[rng.random_range(0..alphabet.len())].to_string())
            .collect()
    };
    let t = Instant::now();
    let mut bad = 0;
    for _ in 0..1000 {
        let a = path(&mut rng);
        let b = path(&mut rng);
        // Every pair of truncation depths that lands on a common node.
        let mut best = usize::MAX;
        for i in 0..=a.len() {
            for j in 0..=b.len() {
                if a[..i] == b[..j] {
                    best = best.min((a.len() - i) + (b.len() - j));
                }
            }
        }
        if hierarchy_distance(&a, &b).unwrap() != best {
            bad += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        bad == 0 && secs < 1.0,
        format!("{bad}/1000 mismatches, {secs:.3} s"),
    )
}

fn criterion_2() -> Verdict {
    let mut worst: f64 = 0.0;
    for n in [0.5, 1.0, 5.0, 7.25, 30.0, 365.0] {
        worst = worst.max((date_score(n, n, false).unwrap() - 0.5).abs());
        worst = worst.max((date_score(-n, n, false).unwrap() - 0.5).abs());
        worst = worst.max((date_score(0.0, n, false).unwrap() - 1.0).abs());
    }
    check(worst <= 1e-12, format!("max deviation {worst:e}"))
}

fn clipped_unigram_oracle(c: &[&str], r: &[&str]) -> f64 {
    let mut rc: BTreeMap<&str, usize> = BTreeMap::new();
    for w in r {
        *rc.entry(w).or_default() += 1;
    }
    let mut cc: BTreeMap<&str, usize> = BTreeMap::new();
    for w in c {
        *cc.entry(w).or_default() += 1;
    }
    let clipped: usize = cc
        .iter()
        .map(|(w, n)| (*n).min(rc.get(w).copied().unwrap_or(0)))
        .sum();
    let p = clipped as f64 / c.len() as f64;
    let bp = if c.len() > r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    };
    bp * p
}

fn criterion_3() -> Verdict {
    let vocab = ["tc", "67", "ds", "fs", "ve3", "vv1", "fu", "12", "lager"];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = 0;
    for _ in 0..200 {
        let mut draw = || -> Vec<&str> {
            (0..rng.random_range(1..=8))
                .map(|_| vocab[rng.random_range(0..vocab.len())])
                .collect()
        };
        let c = draw();
        let r = draw();
        let got = unigram_bleu(&c.join(" "), &r.join(" ")).unwrap();
        if got != clipped_unigram_oracle(&c, &r) {
            bad += 1;
        }
    }
    let example = unigram_bleu("tc 67 ds", "tc 67 fs").unwrap();
    check(
        bad == 0 && example == 2.0 / 3.0,
        format!("{bad}/200 mismatches, example {example}"),
    )
}

fn criterion_4() -> Verdict {
    let t = Instant::now();
    let mut mismatches = Vec::new();
    let mut sizes = Vec::new();
    for seed in [41u64, 42, 43] {
        let store = common::build(&common::small_plant(seed));
        sizes.push(store.chunks().len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for qi in 0..50 {
            let q = common::random_query(&mut rng, &store);
            let got: Vec<_> = retrieve(&store, &q)
                .unwrap()
                .into_iter()
                .map(|h| (h.id, h.total))
                .collect();
            if got != common::reference_rank(&store, &q) {
                mismatches.push(format!("store {seed} query {qi}"));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let small = sizes.iter().all(|&n| n <= 500);
    check(
        mismatches.is_empty() && secs < 30.0 && small,
        format!(
            "chunks {sizes:?}, {} mismatches {:?}, {secs:.2} s",
            mismatches.len(),
            mismatches.iter().take(3).collect::<Vec<_>>()
        ),
    )
}

fn criterion_5() -> Verdict {
    let arch = default_archetypes()
        .into_iter()
        .find(|a| a.code == "TC")
        .unwrap();
    let sampling = Sampling {
        spectrum_len: 3200,
        time_series_len: 32,
        speed: SpeedRange {
            min: 400.0,
            max: 800.0,
        },
        ..Sampling::default()
    };
    // A developed outer-race fault on an envelope point. At severity 1 the
    // shared noise floor alone keeps the raw cosine near 0.54.
    let health = PointHealth {
        faults: vec![FaultState {
            fault: FaultType::BpfoLike,
            onset_day: 0.0,
            ramp_days: 0.0,
            peak_severity: 2.0,
            intermittency: 1.0,
            reset_day: None,
        }],
    };
    let bounds = SpeedBounds::new(400.0, 800.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rec = |speed: f64| {
        let ctx = RecordingContext {
            id: RecordingId(1),
            point_id: PointId(1),
            sensor_type: SensorType::Peak,
            archetype: &arch,
            sampling: &sampling,
            start: sampling.start,
            day: 30.0,
        };
        synth_recording(&ctx, &health, speed, &mut rng)
    };
    let slow = rec(400.0);
    let fast = rec(800.0);
    let raw = cosine_f32(&slow.spectrum, &fast.spectrum).unwrap().value;
    let os = order_transform(&slow.spectrum, 400.0, bounds).unwrap();
    let of = order_transform(&fast.spectrum, 800.0, bounds).unwrap();
    let order = cosine_f32(&os.values, &of.values).unwrap().value;
    check(
        order >= 0.95 && raw < 0.5,
        format!("order cosine {order:.4}, raw cosine {raw:.4}"),
    )
}

fn criterion_6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let labels = NoteClass::ALL;
    let mut bad_equal = 0;
    let mut bad_scale = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=15);
        let w = rng.random_range(0.01..10.0);
        let ballot: Vec<Vote<NoteClass>> = (0..n)
            .map(|_| Vote::new(labels[rng.random_range(0..labels.len())], w))
            .collect();
        if sum_of_scores_vote(&ballot).unwrap() != majority_vote(&ballot).unwrap() {
            bad_equal += 1;
        }
        let weighted: Vec<Vote<NoteClass>> = ballot
            .iter()
            .map(|v| Vote::new(v.label, rng.random_range(0.01..5.0)))
            .collect();
        let c = rng.random_range(1e-3..1e3);
        let scaled: Vec<Vote<NoteClass>> = weighted
            .iter()
            .map(|v| Vote::new(v.label, v.weight * c))
            .collect();
        if sum_of_scores_vote(&weighted).unwrap() != sum_of_scores_vote(&scaled).unwrap() {
            bad_scale += 1;
        }
    }

    let store = common::build(&common::small_plant(6));
    let ontology = Ontology::default();
    let label = |h: &cmstore::retrieval::ScoredHit| {
        cmstore::inference::classify_note(&h.provenance.note_content, &ontology).unwrap()
    };
    let mut bad_knn = 0;
    for _ in 0..200 {
        let c = &store.chunks()[rng.random_range(0..store.chunks().len())];
        let q = Query {
            payloads: Payloads {
                signal: Some(SignalQuery::Chunk(c.chunk_id)),
                ..Payloads::default()
            },
            weights: WeightProfile::only(Metric::SignalEmbedding, 1.0),
            mode: Mode::Chunks,
            limit: Limit::All,
            ..Query::default()
        };
        let hits = retrieve(&store, &q).unwrap();
        let k = rng.random_range(1..=20);
        let knn = knn_predict(&hits, k, Weighting::Uniform, label).unwrap();
        let ballot: Vec<_> = hits[..k.min(hits.len())]
            .iter()
            .map(|h| Vote::new(label(h), 1.0))
            .collect();
        if knn != majority_vote(&ballot).unwrap() {
            bad_knn += 1;
        }
    }
    check(
        bad_equal + bad_scale + bad_knn == 0,
        format!(
            "equal-weight {bad_equal}/1000, scaling {bad_scale}/1000, kNN {bad_knn}/200 mismatches"
        ),
    )
}

struct FaultFixture {
    config: cmstore::synth::PlantConfig,
    store: VectorStore,
}

fn fault_fixture() -> &'static FaultFixture {
    use std::sync::OnceLock;
    static F: OnceLock<FaultFixture> = OnceLock::new();
    F.get_or_init(|| {
        let config = common::fault_plant(77, 30, 65.0);
        let store = common::build(&config);
        FaultFixture { config, store }
    })
}

fn criterion_7() -> Verdict {
    let t = Instant::now();
    let fx = fault_fixture();
    let mut config = TimesliceConfig::default();
    config.predict.task = Task::Note;
    config.predict.exclusion = Exclusion::SameAsset;
    config.predict.top_k = 10;
    let report = timeslice_eval(&fx.store, &config).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let m = report.overall.as_ref().unwrap();
    let acc = m.accuracy().unwrap_or(0.0);
    check(
        acc >= 0.70 && secs < 300.0 && fx.config.scenarios.len() == 120,
        format!(
            "{} scenarios, {} chunks, accuracy {acc:.3}, {secs:.1} s",
            fx.config.scenarios.len(),
            m.total()
        ),
    )
}

fn criterion_8() -> Verdict {
    let fx = fault_fixture();
    let store = &fx.store;
    let note_of = |asset: &str| -> NoteId {
        let a = store
            .assets()
            .iter()
            .find(|a| a.path.segments().last().unwrap() == asset)
            .unwrap();
        a.note_ids[0]
    };
    let mut early = Vec::new();
    let mut audited = 0;
    let mut audit_failures = 0;
    let mut voluntary = 0;
    for sc in fx.config.scenarios.iter().take(20) {
        let spec = SessionSpec::new(note_of(&sc.asset), -50, 20);
        let mut policy = RulePolicy::default();
        let trace = run_session(store, spec, &mut policy).unwrap();
        audited += trace.steps.len();
        if audit_causality(&trace).is_err() {
            audit_failures += 1;
        }
        if let Some(Outcome::VoluntaryExit { day, .. }) = trace.outcome {
            voluntary += 1;
            let onset = sc.onset_day - sc.note.day;
            if (day as f64) < onset {
                early.push(format!("{} exit {day} onset {onset}", sc.asset));
            }
        }
    }
    let replaced: Vec<_> = fx
        .config
        .scenarios
        .iter()
        .filter(|s| s.fault == FaultType::BpfiLike)
        .take(20)
        .collect();
    let mut tn = 0;
    for sc in &replaced {
        let spec = SessionSpec::new(note_of(&sc.asset), 1, 20);
        let mut policy = RulePolicy::default();
        let trace = run_session(store, spec, &mut policy).unwrap();
        let record = score_session(store, &trace, &policy.ontology).unwrap();
        if record.score == Score::TN {
            tn += 1;
        }
    }
    check(
        early.is_empty() && audit_failures == 0 && replaced.len() == 20 && tn >= 18,
        format!(
            "{voluntary}/20 voluntary exits, early {early:?}, audit failures {audit_failures} over {audited} steps, post-replacement TN {tn}/{}",
            replaced.len()
        ),
    )
}

fn criterion_9() -> Verdict {
    let store = common::build(&common::small_plant(9));
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_store(&store, a.path()).unwrap();
    let loaded = load_store(a.path()).unwrap();
    save_store(&loaded, b.path()).unwrap();
    let mut identical = true;
    for f in ["manifest.json", "entities.jsonl", "arrays.bin"] {
        identical &= fs::read(a.path().join(f)).unwrap() == fs::read(b.path().join(f)).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    let mut order_ok = true;
    for _ in 0..50 {
        let q = common::random_query(&mut rng, &store);
        let x = retrieve(&store, &q).unwrap();
        let y = retrieve(&loaded, &q).unwrap();
        order_ok &= x.len() == y.len() && x.iter().zip(&y).all(|(p, q)| p.id == q.id);
        for (p, q) in x.iter().zip(&y) {
            worst = worst.max((p.total - q.total).abs());
        }
    }
    check(
        identical && order_ok && worst <= 1e-15,
        format!("byte-identical {identical}, same ranking {order_ok}, max total delta {worst:e}"),
    )
}

/// 100k chunks of 1600-bin spectra at 300-600 RPM, so order vectors are
/// 3200 wide.
fn big_store() -> VectorStore {
    let t0 = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut inputs = BuildInputs::default();
    let (assets, points_per, per_point, len) = (250u64, 4u64, 100usize, 1600usize);
    for a in 0..assets {
        let aid = AssetId(a + 1);
        let pids: Vec<PointId> = (0..points_per)
            .map(|k| PointId(a * points_per + k + 1))
            .collect();
        let name = format!("TC {}", a + 1);
        inputs.assets.push(Asset {
            id: aid,
            path: AssetPath::new(["PM1", "Torkparti", &format!("Grupp {}", a / 10 + 1), &name])
                .unwrap(),
            point_ids: pids.clone(),
            note_ids: vec![NoteId(a + 1)],
        });
        for (k, pid) in pids.iter().enumerate() {
            inputs.points.push(Point {
                id: *pid,
                name: format!("{name} P{k}"),
                sensor_type: if k % 2 == 0 {
                    SensorType::Peak
                } else {
                    SensorType::Rms
                },
                asset_id: aid,
            });
        }
        let note_date = t0 + Duration::days(60);
        inputs.annotations.push(Annotation {
            id: NoteId(a + 1),
            content: "BPFO låga nivåer.".into(),
            date: note_date,
            asset_id: aid,
            author: None,
        });
        for pid in &pids {
            for r in 0..per_point {
                let date = note_date - Duration::hours(11 * r as i64);
                let lines = [rng.random_range(20..400), rng.random_range(20..400)];
                let spectrum: Vec<f32> = (0..len)
                    .map(|j| {
                        let peak = if lines.contains(&j) { 5.0 } else { 0.0 };
                        rng.random_range(0.0..1.0f32) + peak
                    })
                    .collect();
                inputs.recordings.push(Recording {
                    id: RecordingId(inputs.recordings.len() as u64 + 1),
                    point_id: *pid,
                    recording_date: date,
                    shaft_speed: rng.random_range(300.0..=600.0),
                    spectrum,
                    time_series: vec![0.0, 1.0, 0.0, -1.0],
                    trend_levels: vec![LevelSample {
                        time: date,
                        value: 1.0,
                    }],
                    bias_levels: vec![LevelSample {
                        time: date,
                        value: -10.0,
                    }],
                });
            }
        }
    }
    // Pin the bounds so the width is exactly 3200.
    inputs.recordings[0].shaft_speed = 300.0;
    inputs.recordings[1].shaft_speed = 600.0;
    build_store(inputs, &BuildConfig::default()).unwrap()
}

fn criterion_10() -> Verdict {
    let store = big_store();
    let width = store.config().max_resolution;
    let q = Query {
        payloads: Payloads {
            signal: Some(SignalQuery::Chunk(store.chunks()[12_345].chunk_id)),
            ..Payloads::default()
        },
        weights: WeightProfile::only(Metric::SignalEmbedding, 1.0),
        mode: Mode::Chunks,
        limit: Limit::TopK(10),
        ..Query::default()
    };
    let timed = |threads: usize| {
        let mut best = f64::INFINITY;
        let mut hits = Vec::new();
        for _ in 0..3 {
            let t = Instant::now();
            hits = retrieve_with(&store, &q, RetrieveOptions { threads })
                .unwrap()
                .hits;
            best = best.min(t.elapsed().as_secs_f64());
        }
        (best, hits)
    };
    let (t1, h1) = timed(1);
    let (t8, h8) = timed(8);
    let mut deterministic = h1 == h8;
    for threads in [2, 4] {
        deterministic &= timed(threads).1 == h1;
    }
    let speedup = t1 / t8;
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    let fast = t1 < 2.0;
    let scales = speedup >= 3.0;
    let ok = store.chunks().len() == 100_000 && width >= 3200 && fast && scales && deterministic;
    Verdict {
        pass: ok,
        detail: format!(
            "{} chunks x {width}, 1 thread {t1:.3} s, 8 threads {t8:.3} s, speedup {speedup:.2}x on {cpus} CPU(s), deterministic {deterministic}",
            store.chunks().len()
        ),
        env_limited: !ok && fast && deterministic && !scales && cpus < 8,
    }
}

fn gateway(store: Arc<VectorStore>) -> Arc<Gateway> {
    let clock = LogicalClock::new(Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap());
    Arc::new(Gateway::new(store, Arc::new(clock)))
}

/// A request log touching every tool, including failing calls.
fn request_log(store: &VectorStore) -> Vec<Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut log = Vec::new();
    let mut session = 0;
    let notes: Vec<NoteId> = store.annotations().iter().map(|n| n.id).collect();
    let t0 = store.recordings()[0].recording.recording_date;
    while log.len() < 200 {
        let id = log.len();
        let chunk = &store.chunks()[rng.random_range(0..store.chunks().len())];
        let asset = &store.assets()[rng.random_range(0..store.assets().len())];
        let req = match id % 14 {
            0 => json!({"tool": "list_tools"}),
            1 => json!({"tool": "check_hierarchy", "args": {"path": asset.path.segments()}}),
            2 => json!({"tool": "check_hierarchy", "args": {"path": ["Nowhere"]}}),
            3 => json!({"tool": "query_documents", "args": {
                "payloads": {"note": {"text": "BPFO lager"}, "asset_text": asset.path.as_text()},
                "limit": {"top_k": 5}}}),
            4 => json!({"tool": "query_chunks", "args": {
                "payloads": {"signal": {"chunk": chunk.chunk_id}},
                "weights": {"note_embedding": 0, "signal_embedding": 1},
                "filter": {"point_type_is": "Peak"},
                "limit": {"top_k": 3}}}),
            5 => json!({"tool": "get_context", "args": {"chunk_id": chunk.chunk_id}}),
            6 => {
                json!({"tool": "kb_write", "args": {"scope": {"asset": asset.id}, "text": format!("observation {id}")}})
            }
            7 => json!({"tool": "kb_read", "args": {"scope": {"asset": asset.id}}}),
            8 => {
                json!({"tool": "kb_write", "args": {"scope": "general", "text": format!("general {id}"), "timestamp": "2025-02-01T00:00:00Z"}})
            }
            9 => json!({"tool": "feature_changes", "args": {
                "start": t0, "end": t0 + Duration::days(20), "feature": "variance", "top_n": 3}}),
            10 => {
                session += 1;
                let note = notes[rng.random_range(0..notes.len())];
                json!({"tool": "start_session", "args": {"note_id": note, "from_day": -5, "to_day": 2}})
            }
            11 => {
                json!({"tool": "run_session_step", "args": {"session_id": format!("s{session}")}})
            }
            12 => {
                if rng.random_bool(0.5) {
                    json!({"tool": "session_status", "args": {"session_id": format!("s{session}")}})
                } else {
                    json!({"tool": "no_such_tool"})
                }
            }
            _ => {
                let prediction = ["bearing_faults", "no_fault", "replaced"][rng.random_range(0..3)];
                json!({"tool": "submit_prediction", "args": {
                    "session_id": format!("s{session}"), "prediction": prediction}})
            }
        };
        let mut req = req;
        req["id"] = json!(id);
        log.push(req);
    }
    log
}

fn unwrap_ok(resp: &Value) -> &Value {
    &resp["result"]
}

/// Recomputes one response from direct module calls, mirroring the
/// knowledge base and sessions the gateway keeps.
struct Mirror<'a> {
    store: &'a VectorStore,
    kb: BTreeMap<String, Vec<String>>,
    sessions: BTreeMap<String, Session>,
    next: u64,
}

impl Mirror<'_> {
    fn expect(&mut self, req: &Value, resp: &Value) -> Result<(), String> {
        let tool = req["tool"].as_str().unwrap();
        let args = req.get("args").cloned().unwrap_or(json!({}));
        let store = self.store;
        let same = |expected: Value| -> Result<(), String> {
            if unwrap_ok(resp) == &expected {
                Ok(())
            } else {
                Err(format!("{tool}: gateway {} vs direct {expected}", resp))
            }
        };
        match tool {
            "list_tools" => same(Value::Array(
                TOOLS
                    .iter()
                    .map(|(n, d)| json!({"name": n, "description": d}))
                    .collect(),
            )),
            "check_hierarchy" => {
                let path: Vec<String> = serde_json::from_value(args["path"].clone()).unwrap();
                same(if hierarchy_contains(store, &path) {
                    json!(true)
                } else {
                    serde_json::to_value(hierarchy_tree(store)).unwrap()
                })
            }
            "query_documents" | "query_chunks" => {
                let mut q: Query = serde_json::from_value(args).unwrap();
                q.mode = if tool == "query_chunks" {
                    Mode::Chunks
                } else {
                    Mode::Documents
                };
                same(serde_json::to_value(retrieve(store, &q).unwrap()).unwrap())
            }
            "get_context" => {
                let id = serde_json::from_value(args["chunk_id"].clone()).unwrap();
                same(serde_json::to_value(chunk_context(store, id).unwrap()).unwrap())
            }
            "kb_write" => {
                let key = args["scope"].to_string();
                let entries = self.kb.entry(key).or_default();
                entries.push(args["text"].as_str().unwrap().to_string());
                let index = entries.len() - 1;
                if resp["result"]["index"] != json!(index) {
                    return Err(format!(
                        "kb_write index {} vs {index}",
                        resp["result"]["index"]
                    ));
                }
                if let Some(ts) = args.get("timestamp") {
                    if &resp["result"]["timestamp"] != ts {
                        return Err("kb_write timestamp not echoed".into());
                    }
                }
                Ok(())
            }
            "kb_read" => {
                let key = args["scope"].to_string();
                let texts: Vec<Value> = resp["result"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|e| e["text"].clone())
                    .collect();
                let expected: Vec<Value> = self
                    .kb
                    .get(&key)
                    .map(|v| v.iter().map(|s| json!(s)).collect())
                    .unwrap_or_default();
                if texts == expected {
                    Ok(())
                } else {
                    Err(format!("kb_read {texts:?} vs {expected:?}"))
                }
            }
            "feature_changes" => {
                let start = serde_json::from_value(args["start"].clone()).unwrap();
                let end = serde_json::from_value(args["end"].clone()).unwrap();
                let got = feature_change_scan(
                    store,
                    &FilterTree::default(),
                    start,
                    end,
                    ChangeFeature::Variance,
                    3,
                )
                .unwrap();
                same(serde_json::to_value(got).unwrap())
            }
            "start_session" => {
                let spec: SessionSpec = serde_json::from_value(args).unwrap();
                let session = Session::new(store, spec).unwrap();
                self.next += 1;
                let id = format!("s{}", self.next);
                let expected = json!({
                    "session_id": id,
                    "asset_id": session.asset_id(),
                    "spec": session.spec(),
                });
                self.sessions.insert(id, session);
                same(expected)
            }
            "run_session_step" => {
                let id = args["session_id"].as_str().unwrap();
                match self.sessions.get_mut(id) {
                    None => not_found(resp),
                    Some(s) => same(match s.next_step(store).unwrap() {
                        Some(step) => json!({"status": "step", "step": step}),
                        None => json!({"status": "exhausted"}),
                    }),
                }
            }
            "session_status" => {
                let id = args["session_id"].as_str().unwrap();
                match self.sessions.get(id) {
                    None => not_found(resp),
                    Some(s) => {
                        same(json!({"last_day": s.last_day(), "exhausted": s.is_exhausted()}))
                    }
                }
            }
            "submit_prediction" => {
                let id = args["session_id"].as_str().unwrap();
                let Some(s) = self.sessions.get(id) else {
                    return not_found(resp);
                };
                let Some(day) = s.last_day() else {
                    return if resp["error"]["code"] == "invalid_args" {
                        Ok(())
                    } else {
                        Err(format!("submit before any step: {resp}"))
                    };
                };
                let prediction = match args["prediction"].as_str().unwrap() {
                    "no_fault" => None,
                    name => Some(NoteClass::from_name(name).unwrap()),
                };
                let outcome = match (prediction, s.is_exhausted()) {
                    (p, true) => Outcome::ForcedExit { day, prediction: p },
                    (Some(p), false) => Outcome::VoluntaryExit { day, prediction: p },
                    (None, false) => Outcome::NoFault { day },
                };
                let record = score_outcome(store, s.spec(), outcome, &Ontology::default()).unwrap();
                self.sessions.remove(id);
                same(serde_json::to_value(record).unwrap())
            }
            _ => {
                if resp["error"]["code"] == "tool_not_found" {
                    Ok(())
                } else {
                    Err(format!("unknown tool answered {resp}"))
                }
            }
        }
    }
}

fn not_found(resp: &Value) -> Result<(), String> {
    if resp["error"]["code"] == "not_found" {
        Ok(())
    } else {
        Err(format!("expected not_found, got {resp}"))
    }
}

fn criterion_11() -> Verdict {
    let store = Arc::new(common::build(&common::small_plant(11)));
    let log = request_log(&store);
    let lines: Vec<String> = log.iter().map(|r| r.to_string()).collect();
    let mut tools: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    for r in &log {
        // Requests must parse as the wire type.
        let req: ToolRequest = serde_json::from_value(r.clone()).unwrap();
        tools.insert(req.tool);
    }
    let all_tools = TOOLS.iter().all(|(n, _)| tools.contains(*n));

    let record = |store: &Arc<VectorStore>| -> String {
        let gw = gateway(Arc::clone(store));
        let mut input = lines.join("\n");
        input.push('\n');
        let mut out = Vec::new();
        gw.serve(input.as_bytes(), &mut out).unwrap();
        String::from_utf8(out).unwrap()
    };
    let recorded = record(&store);
    let replayed = record(&store);
    let byte_identical = recorded == replayed;

    let mut mirror = Mirror {
        store: &store,
        kb: BTreeMap::new(),
        sessions: BTreeMap::new(),
        next: 0,
    };
    let mut mismatches = Vec::new();
    let responses: Vec<Value> = recorded
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    for (req, resp) in log.iter().zip(&responses) {
        if let Err(e) = mirror.expect(req, resp) {
            mismatches.push(format!("#{}: {}", req["id"], e));
        }
    }
    let truncated: Vec<String> = mismatches
        .iter()
        .take(2)
        .map(|m| m.chars().take(300).collect())
        .collect();
    check(
        byte_identical && all_tools && responses.len() == 200 && mismatches.is_empty(),
        format!(
            "{} responses, all tools {all_tools}, byte-identical {byte_identical}, {} mismatches {truncated:?}",
            responses.len(),
            mismatches.len()
        ),
    )
}

type Criterion = (usize, &'static str, fn() -> Verdict);

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [Criterion; 11] = [
        (1, "hierarchy distance closed form", criterion_1),
        (2, "date score halving", criterion_2),
        (3, "unigram BLEU oracle", criterion_3),
        (4, "retrieval oracle equivalence", criterion_4),
        (5, "order coherence across speeds", criterion_5),
        (6, "voting laws", criterion_6),
        (7, "end-to-end note prediction", criterion_7),
        (8, "streaming protocol", criterion_8),
        (9, "persistence round trip", criterion_9),
        (10, "retrieval performance", criterion_10),
        (11, "gateway replay", criterion_11),
    ];
    let mut hard_failures = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let v = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict {
                pass: false,
                detail: format!("panicked: {msg}"),
                env_limited: false,
            }
        });
        let tag = match (v.pass, v.env_limited) {
            (true, _) => "PASS",
            (false, true) => "FAIL (environment)",
            (false, false) => "FAIL",
        };
        println!(
            "{tag} criterion {n:>2} {name}: {} [{:.1} s]",
            v.detail,
            t.elapsed().as_secs_f64()
        );
        if !v.pass && !v.env_limited {
            hard_failures += 1;
        }
    }
    if hard_failures > 0 {
        std::process::exit(1);
    }
}
