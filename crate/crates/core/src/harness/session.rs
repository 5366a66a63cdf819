//! Day-by-day streaming sessions anchored on one annotation.
//!
//! Session day `d` ends at the anchor note's date plus `d` days. A step
//! consumes the anchor documents' chunks recorded in the last `stride` days
//! and retrieves evidence recorded no later than the step's end.

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{
    classify_note, evidence_query, majority_vote, underlying_fault, Exclusion, NoteClass, Ontology,
    Vote,
};
use crate::model::{AssetId, ChunkId, NoteId, PointId, VectorStore};
use crate::retrieval::{retrieve, FilterTree, Provenance};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSpec {
    pub note_id: NoteId,
    #[serde(default = "default_from")]
    pub from_day: i64,
    #[serde(default = "default_to")]
    pub to_day: i64,
    #[serde(default = "default_stride")]
    pub stride: i64,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_exclusion")]
    pub exclusion: Exclusion,
}

fn default_from() -> i64 {
    -50
}
fn default_to() -> i64 {
    20
}
fn default_stride() -> i64 {
    1
}
fn default_top_k() -> usize {
    5
}
fn default_exclusion() -> Exclusion {
    Exclusion::SameAsset
}

impl SessionSpec {
    pub fn new(note_id: NoteId, from_day: i64, to_day: i64) -> Self {
        SessionSpec {
            note_id,
            from_day,
            to_day,
            stride: default_stride(),
            top_k: default_top_k(),
            exclusion: default_exclusion(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceHit {
    pub chunk_id: ChunkId,
    pub score: f64,
    pub provenance: Provenance,
}

/// Evidence retrieved for one input chunk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointEvidence {
    pub point_id: PointId,
    pub point_name: String,
    pub input_chunk: ChunkId,
    pub recording_date: DateTime<Utc>,
    pub timedelta_days: f64,
    pub hits: Vec<EvidenceHit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionStep {
    pub day: i64,
    pub end: DateTime<Utc>,
    pub evidence: Vec<PointEvidence>,
}

/// Stateful day cursor over one anchored session.
#[derive(Clone, Debug)]
pub struct Session {
    spec: SessionSpec,
    asset_id: AssetId,
    anchor_date: DateTime<Utc>,
    /// Anchor chunk indices ordered by recording date, then storage order.
    inputs: Vec<usize>,
    next_day: i64,
}

impl Session {
    pub fn new(store: &VectorStore, spec: SessionSpec) -> Result<Self> {
        if store.is_document_only() {
            return Err(Error::Mode("sessions need recording chunks".into()));
        }
        if spec.from_day > spec.to_day || spec.stride < 1 || spec.top_k == 0 {
            return Err(Error::InvalidArgument(format!(
                "session days {}..={} stride {} top_k {} are invalid",
                spec.from_day, spec.to_day, spec.stride, spec.top_k
            )));
        }
        let note = store
            .annotation(spec.note_id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown note {}", spec.note_id)))?;
        let mut inputs: Vec<usize> = Vec::new();
        for doc in store
            .documents()
            .iter()
            .filter(|d| d.doc_id.note == spec.note_id)
        {
            inputs.extend(doc.chunk_range.clone());
        }
        inputs.sort_by_key(|&i| {
            let c = &store.chunks()[i];
            (store.recording_of(c).recording.recording_date, i)
        });
        Ok(Session {
            asset_id: note.asset_id,
            anchor_date: note.date,
            next_day: spec.from_day,
            spec,
            inputs,
        })
    }

    pub fn spec(&self) -> &SessionSpec {
        &self.spec
    }

    pub fn asset_id(&self) -> AssetId {
        self.asset_id
    }

    pub fn is_exhausted(&self) -> bool {
        self.next_day > self.spec.to_day
    }

    /// Day of the most recent step, if any was taken.
    pub fn last_day(&self) -> Option<i64> {
        (self.next_day > self.spec.from_day).then(|| self.next_day - self.spec.stride)
    }

    pub fn day_end(&self, day: i64) -> DateTime<Utc> {
        self.anchor_date + Duration::days(day)
    }

    /// Advances one stride. Returns `None` once the day range is used up.
    pub fn next_step(&mut self, store: &VectorStore) -> Result<Option<SessionStep>> {
        if self.is_exhausted() {
            return Ok(None);
        }
        let day = self.next_day;
        let lo = (day - self.spec.stride) as f64;
        let hi = day as f64;
        let end = self.day_end(day);
        let mut evidence = Vec::new();
        for &i in &self.inputs {
            let c = &store.chunks()[i];
            if !(c.timedelta_days > lo && c.timedelta_days <= hi) {
                continue;
            }
            let doc = store.document_of(c);
            let rec = store.recording_of(c);
            let mut q = evidence_query(store, c.chunk_id, self.spec.top_k, self.spec.exclusion)?;
            q.filter = FilterTree::And(vec![
                q.filter,
                FilterTree::RecordingDateSpan {
                    start: None,
                    end: Some(end),
                },
            ]);
            let hits = retrieve(store, &q)?
                .into_iter()
                .map(|h| EvidenceHit {
                    chunk_id: h.id.chunk().expect("chunk mode query"),
                    score: h.total,
                    provenance: h.provenance,
                })
                .collect();
            evidence.push(PointEvidence {
                point_id: doc.doc_id.point,
                point_name: doc.point_name.clone(),
                input_chunk: c.chunk_id,
                recording_date: rec.recording.recording_date,
                timedelta_days: c.timedelta_days,
                hits,
            });
        }
        self.next_day += self.spec.stride;
        Ok(Some(SessionStep { day, end, evidence }))
    }
}

/// A policy's answer after one step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Continue,
    /// `None` declares no fault.
    Predict(Option<NoteClass>),
}

/// Decision function over the steps seen so far. `forced` is set on the
/// last step, where `Continue` is read as no fault.
pub trait Policy {
    fn decide(&mut self, steps: &[SessionStep], forced: bool) -> Result<Decision>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    VoluntaryExit {
        day: i64,
        prediction: NoteClass,
    },
    /// Exit on the last day; `None` is a no-fault answer.
    ForcedExit {
        day: i64,
        prediction: Option<NoteClass>,
    },
    /// No fault declared before the last day.
    NoFault {
        day: i64,
    },
}

impl Outcome {
    pub fn day(&self) -> i64 {
        match *self {
            Outcome::VoluntaryExit { day, .. }
            | Outcome::ForcedExit { day, .. }
            | Outcome::NoFault { day } => day,
        }
    }

    pub fn prediction(&self) -> Option<NoteClass> {
        match *self {
            Outcome::VoluntaryExit { prediction, .. } => Some(prediction),
            Outcome::ForcedExit { prediction, .. } => prediction,
            Outcome::NoFault { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionTrace {
    pub asset_id: AssetId,
    pub spec: SessionSpec,
    pub steps: Vec<SessionStep>,
    pub outcome: Option<Outcome>,
    /// Set when the policy failed; `steps` holds what ran so far.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

impl SessionTrace {
    /// One JSON object per step, newline-terminated.
    pub fn steps_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }
}

pub fn run_session(
    store: &VectorStore,
    spec: SessionSpec,
    policy: &mut dyn Policy,
) -> Result<SessionTrace> {
    let mut session = Session::new(store, spec.clone())?;
    let mut trace = SessionTrace {
        asset_id: session.asset_id(),
        spec,
        steps: Vec::new(),
        outcome: None,
        aborted: None,
    };
    while let Some(step) = session.next_step(store)? {
        let day = step.day;
        trace.steps.push(step);
        let forced = session.is_exhausted();
        let decision = match policy.decide(&trace.steps, forced) {
            Ok(d) => d,
            Err(e) => {
                trace.aborted = Some(e.to_string());
                return Ok(trace);
            }
        };
        let outcome = match (decision, forced) {
            (Decision::Continue, false) => continue,
            (Decision::Continue, true) => Outcome::ForcedExit {
                day,
                prediction: None,
            },
            (Decision::Predict(p), true) => Outcome::ForcedExit { day, prediction: p },
            (Decision::Predict(Some(p)), false) => Outcome::VoluntaryExit { day, prediction: p },
            (Decision::Predict(None), false) => Outcome::NoFault { day },
        };
        trace.outcome = Some(outcome);
        break;
    }
    Ok(trace)
}

/// Deterministic stand-in for an analyst: per point, the majority class of
/// each step's evidence must repeat over `streak` consecutive observed
/// steps. Cable/sensor faults also need `cable_support` supporting steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RulePolicy {
    pub ontology: Ontology,
    pub streak: usize,
    pub cable_support: usize,
    /// Fault evidence older than this many days before its note is read as
    /// misc, since the signature is unlikely to have developed yet.
    pub early_cutoff_days: f64,
}

impl Default for RulePolicy {
    fn default() -> Self {
        RulePolicy {
            ontology: Ontology::default(),
            streak: 3,
            cable_support: 10,
            early_cutoff_days: -30.0,
        }
    }
}

impl RulePolicy {
    /// Class a hit votes for. Post-replacement data counts as healthy and a
    /// pre-replacement note votes for the fault it names.
    pub fn evidence_class(&self, hit: &EvidenceHit) -> Result<NoteClass> {
        let content = &hit.provenance.note_content;
        let td = hit.provenance.timedelta_days.unwrap_or(0.0);
        Ok(match classify_note(content, &self.ontology)? {
            NoteClass::Replaced if td > 0.0 => NoteClass::Misc,
            NoteClass::Replaced => underlying_fault(content, &self.ontology)?,
            c if c.is_fault() && td < self.early_cutoff_days => NoteClass::Misc,
            c => c,
        })
    }

    /// Per point, the majority class of each step that had evidence, oldest
    /// first, with the step index.
    fn histories(&self, steps: &[SessionStep]) -> Result<Vec<Vec<(usize, NoteClass)>>> {
        let mut points: Vec<PointId> = steps
            .iter()
            .flat_map(|s| s.evidence.iter().map(|e| e.point_id))
            .collect();
        points.sort();
        points.dedup();
        let mut out = Vec::new();
        for p in points {
            let mut h = Vec::new();
            for (si, s) in steps.iter().enumerate() {
                let mut ballot = Vec::new();
                for e in s.evidence.iter().filter(|e| e.point_id == p) {
                    for hit in &e.hits {
                        ballot.push(Vote::new(self.evidence_class(hit)?, 1.0));
                    }
                }
                if !ballot.is_empty() {
                    h.push((si, majority_vote(&ballot)?));
                }
            }
            out.push(h);
        }
        Ok(out)
    }
}

impl Policy for RulePolicy {
    fn decide(&mut self, steps: &[SessionStep], forced: bool) -> Result<Decision> {
        let streak = self.streak.max(1);
        let histories = self.histories(steps)?;
        let current = steps.len().saturating_sub(1);
        let mut triggered: Vec<NoteClass> = Vec::new();
        for h in &histories {
            if h.len() < streak || h[h.len() - 1].0 != current {
                continue;
            }
            let c = h[h.len() - 1].1;
            if c == NoteClass::Misc || !h[h.len() - streak..].iter().all(|&(_, x)| x == c) {
                continue;
            }
            let support = h.iter().filter(|&&(_, x)| x == c).count();
            if c == NoteClass::CableSensor && support < self.cable_support {
                continue;
            }
            triggered.push(c);
        }
        if let Some(c) = triggered.into_iter().min() {
            return Ok(Decision::Predict(Some(c)));
        }
        if !forced {
            return Ok(Decision::Continue);
        }
        // Forced: answer only on a recent majority of non-misc steps.
        let mut recent: Vec<(usize, NoteClass)> = Vec::new();
        for h in &histories {
            let tail = &h[h.len().saturating_sub(streak)..];
            for c in NoteClass::ALL.into_iter().filter(|&c| c != NoteClass::Misc) {
                let n = tail.iter().filter(|&&(_, x)| x == c).count();
                if 2 * n > streak {
                    recent.push((n, c));
                }
            }
        }
        recent.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(Decision::Predict(recent.first().map(|&(_, c)| c)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    PartiallyCorrect,
    Wrong,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Score {
    TP,
    FP,
    TN,
    FN,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub asset_id: AssetId,
    pub note_id: NoteId,
    pub asset_path: String,
    pub point_names: Vec<String>,
    pub outcome: Outcome,
    pub prediction: Option<NoteClass>,
    pub prediction_text: String,
    pub true_note: String,
    pub true_class: NoteClass,
    pub verdict: Verdict,
    /// Verdict of an external judge on free-text predictions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_verdict: Option<Verdict>,
    pub score: Score,
    pub timedelta_at_exit: f64,
}

/// Scores a finished trace against its anchor note.
pub fn score_session(
    store: &VectorStore,
    trace: &SessionTrace,
    ontology: &Ontology,
) -> Result<EvaluationRecord> {
    let outcome = trace
        .outcome
        .clone()
        .ok_or_else(|| Error::InvalidArgument("session has no outcome".into()))?;
    score_outcome(store, &trace.spec, outcome, ontology)
}

/// Class-level rubric. A session that starts after a replacement note is a
/// healthy context: silence is TN and any fault claim FP. Otherwise a
/// correct claim is TP, a wrong one FP, and silence or a forced claim after
/// the note date FN on fault truths. Misc truths mirror the healthy case.
pub fn score_outcome(
    store: &VectorStore,
    spec: &SessionSpec,
    outcome: Outcome,
    ontology: &Ontology,
) -> Result<EvaluationRecord> {
    let note = store
        .annotation(spec.note_id)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown note {}", spec.note_id)))?;
    let asset = store
        .asset(note.asset_id)
        .ok_or_else(|| Error::Integrity(format!("note {} has no asset", note.id)))?;
    let truth = classify_note(&note.content, ontology)?;
    let prediction = outcome.prediction();
    let day = outcome.day();
    let forced = matches!(outcome, Outcome::ForcedExit { .. });

    let matches_truth = |p: NoteClass| {
        p == truth || (truth == NoteClass::Replaced && ontology.mentions(&note.content, p))
    };
    let healthy_context =
        truth == NoteClass::Misc || (truth == NoteClass::Replaced && spec.from_day > 0);
    let (verdict, score) = match prediction {
        None if healthy_context => (Verdict::Correct, Score::TN),
        Some(_) if healthy_context => (Verdict::Wrong, Score::FP),
        None => (Verdict::Wrong, Score::FN),
        Some(p) if matches_truth(p) && forced && day > 0 => (Verdict::Correct, Score::FN),
        Some(p) if matches_truth(p) => (Verdict::Correct, Score::TP),
        Some(_) => (Verdict::Wrong, Score::FP),
    };
    let mut point_names: Vec<String> = store
        .points()
        .iter()
        .filter(|p| p.asset_id == asset.id)
        .map(|p| p.name.clone())
        .collect();
    point_names.sort();
    Ok(EvaluationRecord {
        asset_id: asset.id,
        note_id: note.id,
        asset_path: asset.path.as_text(),
        point_names,
        prediction,
        prediction_text: prediction
            .map_or_else(|| "no_fault".to_string(), |p| p.name().to_string()),
        true_note: note.content.clone(),
        true_class: truth,
        verdict,
        external_verdict: None,
        score,
        timedelta_at_exit: day as f64,
        outcome,
    })
}

/// Checks that no evidence postdates its step and that masking held.
pub fn audit_causality(trace: &SessionTrace) -> Result<()> {
    for step in &trace.steps {
        for e in &step.evidence {
            if e.recording_date > step.end {
                return Err(Error::Integrity(format!(
                    "day {}: input chunk {} recorded after the step end",
                    step.day, e.input_chunk
                )));
            }
            for h in &e.hits {
                let late = h.provenance.recording_date.is_none_or(|d| d > step.end);
                let masked = match trace.spec.exclusion {
                    Exclusion::None => false,
                    Exclusion::SamePoint => h.provenance.point_id == e.point_id,
                    Exclusion::SameAsset => h.provenance.asset_id == trace.asset_id,
                };
                if late || masked {
                    return Err(Error::Integrity(format!(
                        "day {}: evidence {} for input {} violates {}",
                        step.day,
                        h.chunk_id,
                        e.input_chunk,
                        if late { "causality" } else { "masking" }
                    )));
                }
            }
        }
    }
    if trace.steps.windows(2).any(|w| w[0].day >= w[1].day) {
        return Err(Error::Integrity(
            "session days are not strictly increasing".into(),
        ));
    }
    Ok(())
}
