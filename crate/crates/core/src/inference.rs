//! Keyword classification of notes and component names, and vote-based
//! prediction from retrieved chunk evidence.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AssetId, ChunkId, PointId, VectorStore};
use crate::retrieval::{
    self, FilterTree, Limit, Metric, Mode, Payloads, Query, ScoredHit, SignalQuery, WeightProfile,
};

/// Five-way note ontology. Declaration order is the vote tie order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NoteClass {
    #[serde(rename = "critical_faults")]
    Critical,
    #[serde(rename = "replaced")]
    Replaced,
    #[serde(rename = "bearing_faults")]
    Bearing,
    #[serde(rename = "cable_sensor_faults")]
    CableSensor,
    #[serde(rename = "misc")]
    Misc,
}

impl NoteClass {
    pub const ALL: [NoteClass; 5] = [
        NoteClass::Critical,
        NoteClass::Replaced,
        NoteClass::Bearing,
        NoteClass::CableSensor,
        NoteClass::Misc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoteClass::Critical => "critical_faults",
            NoteClass::Replaced => "replaced",
            NoteClass::Bearing => "bearing_faults",
            NoteClass::CableSensor => "cable_sensor_faults",
            NoteClass::Misc => "misc",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        NoteClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown note class {s:?}")))
    }

    /// Classes that describe a fault rather than an action or nothing.
    pub fn is_fault(self) -> bool {
        matches!(
            self,
            NoteClass::Critical | NoteClass::Bearing | NoteClass::CableSensor
        )
    }
}

impl fmt::Display for NoteClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Keyword lists per class, matched as case-insensitive substrings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ontology {
    pub critical: Vec<String>,
    pub replaced: Vec<String>,
    pub cable_sensor: Vec<String>,
    pub bearing: Vec<String>,
    /// Phrases blanked out before the replaced keywords are tried, so that
    /// "byts inte" does not read as a replacement.
    #[serde(default)]
    pub negation_guards: Vec<String>,
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl Default for Ontology {
    fn default() -> Self {
        Ontology {
            critical: strings(&["haveri"]),
            replaced: strings(&["bytt", "utbytt", "byts", "byte"]),
            cable_sensor: strings(&["kabel", "giv", "sens"]),
            bearing: strings(&["bpfo", "bpfi", "bsf", "lager"]),
            negation_guards: strings(&["byts inte", "inte bytt", "ej bytt"]),
        }
    }
}

impl Ontology {
    pub fn keywords(&self, class: NoteClass) -> &[String] {
        match class {
            NoteClass::Critical => &self.critical,
            NoteClass::Replaced => &self.replaced,
            NoteClass::CableSensor => &self.cable_sensor,
            NoteClass::Bearing => &self.bearing,
            NoteClass::Misc => &[],
        }
    }

    fn is_empty(&self) -> bool {
        self.critical.is_empty()
            && self.replaced.is_empty()
            && self.cable_sensor.is_empty()
            && self.bearing.is_empty()
    }

    fn matches(&self, class: NoteClass, lower: &str) -> bool {
        if class == NoteClass::Replaced {
            let mut guarded = lower.to_string();
            for g in &self.negation_guards {
                guarded = guarded.replace(&g.to_lowercase(), " ");
            }
            return self
                .replaced
                .iter()
                .any(|k| guarded.contains(&k.to_lowercase()));
        }
        self.keywords(class)
            .iter()
            .any(|k| lower.contains(&k.to_lowercase()))
    }

    /// True when `content` mentions a keyword of `class`.
    pub fn mentions(&self, content: &str, class: NoteClass) -> bool {
        self.matches(class, &content.to_lowercase())
    }
}

const PRECEDENCE: [NoteClass; 4] = [
    NoteClass::Critical,
    NoteClass::Replaced,
    NoteClass::CableSensor,
    NoteClass::Bearing,
];

/// First class in the order critical, replaced, cable/sensor, bearing whose
/// keywords occur in `content`; misc otherwise.
pub fn classify_note(content: &str, ontology: &Ontology) -> Result<NoteClass> {
    if ontology.is_empty() {
        return Err(Error::InvalidArgument("ontology has no keywords".into()));
    }
    if content.trim().is_empty() {
        return Err(Error::InvalidArgument("note content is empty".into()));
    }
    let lower = content.to_lowercase();
    Ok(PRECEDENCE
        .into_iter()
        .find(|&c| ontology.matches(c, &lower))
        .unwrap_or(NoteClass::Misc))
}

/// The fault a note describes when the replacement keywords are ignored,
/// e.g. bearing for "AO skrivet på lagerbyte".
pub fn underlying_fault(content: &str, ontology: &Ontology) -> Result<NoteClass> {
    if ontology.is_empty() {
        return Err(Error::InvalidArgument("ontology has no keywords".into()));
    }
    let lower = content.to_lowercase();
    Ok(PRECEDENCE
        .into_iter()
        .filter(|&c| c != NoteClass::Replaced)
        .find(|&c| ontology.matches(c, &lower))
        .unwrap_or(NoteClass::Misc))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentLabel {
    pub label: String,
    /// Set when the name could not be reduced and is returned whole.
    pub unparsed: bool,
}

fn is_side(tok: &str) -> bool {
    matches!(tok.to_uppercase().as_str(), "DS" | "FS")
}

fn is_filter_code(tok: &str) -> bool {
    let up = tok.to_uppercase();
    ["VE", "HE", "AE", "VV", "HV", "AV"].iter().any(|p| {
        up.strip_prefix(p)
            .is_some_and(|rest| !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()))
    })
}

/// Strips trailing side tokens and sensor filter codes: "TC 67 DS VE3"
/// becomes "TC 67".
pub fn component_label(point_name: &str) -> ComponentLabel {
    let tokens: Vec<&str> = point_name.split_whitespace().collect();
    let mut end = tokens.len();
    while end > 0 && (is_side(tokens[end - 1]) || is_filter_code(tokens[end - 1])) {
        end -= 1;
    }
    if end == 0 {
        return ComponentLabel {
            label: point_name.trim().to_string(),
            unparsed: true,
        };
    }
    ComponentLabel {
        label: tokens[..end].join(" "),
        unparsed: false,
    }
}

/// Maps component labels onto merged groups by their leading code.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentMap {
    /// Uppercase leading code to group name.
    pub groups: BTreeMap<String, String>,
    pub fallback: String,
}

impl Default for ComponentMap {
    fn default() -> Self {
        let pairs = [
            ("TC", "drying_cylinder"),
            ("TORKCYLINDER", "drying_cylinder"),
            ("FU", "felt_roller"),
            ("FÖ", "felt_roller"),
            ("FILTVALS", "felt_roller"),
            ("VU", "wire_roller"),
            ("VIRAVALS", "wire_roller"),
            ("VR", "wire_return_roller"),
            ("PV", "press_roll"),
            ("LV", "guide_roller"),
            ("SV", "suction_roll"),
            ("MO", "motor"),
            ("MOTOR", "motor"),
            ("VXL", "gearbox"),
            ("FL", "fan"),
            ("FLÄKT", "fan"),
            ("PU", "pump"),
            ("PUMP", "pump"),
        ];
        ComponentMap {
            groups: pairs
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            fallback: "other".into(),
        }
    }
}

impl ComponentMap {
    /// Group of a label; the leading alphabetic run of its first token is
    /// looked up, so "TC 67" and "TC67" both map through "TC".
    pub fn merged_class(&self, label: &str) -> String {
        let first = label.split_whitespace().next().unwrap_or("");
        let code: String = first
            .chars()
            .take_while(|c| c.is_alphabetic())
            .collect::<String>()
            .to_uppercase();
        self.groups
            .get(&code)
            .cloned()
            .unwrap_or_else(|| self.fallback.clone())
    }

    /// Every distinct group name, including the fallback.
    pub fn classes(&self) -> Vec<String> {
        let mut v: Vec<String> = self.groups.values().cloned().collect();
        v.push(self.fallback.clone());
        v.sort();
        v.dedup();
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vote<L> {
    pub label: L,
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<ChunkId>,
}

impl<L> Vote<L> {
    pub fn new(label: L, weight: f64) -> Self {
        Vote {
            label,
            weight,
            source: None,
        }
    }
}

/// Sums closer than this relative gap count as tied, so rounding in the
/// summation order cannot decide a vote.
const TIE_TOLERANCE: f64 = 1e-9;

fn argmax<L: Ord + Clone>(tally: BTreeMap<L, f64>) -> L {
    // BTreeMap iterates in tie order, so the first of the tied maxima wins.
    let best = tally.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let cut = best - TIE_TOLERANCE * best.abs().max(1.0);
    tally
        .into_iter()
        .find(|(_, v)| *v >= cut)
        .map(|(k, _)| k)
        .expect("tally is non-empty")
}

/// Class with the most votes, weights ignored. Ties go to the smallest
/// label in its `Ord`, which for [`NoteClass`] is the declared tie order.
pub fn majority_vote<L: Ord + Clone>(ballot: &[Vote<L>]) -> Result<L> {
    if ballot.is_empty() {
        return Err(Error::InvalidArgument("ballot is empty".into()));
    }
    let mut tally = BTreeMap::new();
    for v in ballot {
        *tally.entry(v.label.clone()).or_insert(0.0) += 1.0;
    }
    Ok(argmax(tally))
}

/// Class with the largest summed weight, same tie rule.
pub fn sum_of_scores_vote<L: Ord + Clone>(ballot: &[Vote<L>]) -> Result<L> {
    if ballot.is_empty() {
        return Err(Error::InvalidArgument("ballot is empty".into()));
    }
    let mut tally = BTreeMap::new();
    for v in ballot {
        if !(v.weight > 0.0) || !v.weight.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "vote weight must be positive, got {}",
                v.weight
            )));
        }
        *tally.entry(v.label.clone()).or_insert(0.0) += v.weight;
    }
    Ok(argmax(tally))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Uniform,
    Score,
}

/// Votes among the first `k` neighbours (all of them when fewer). Score
/// weighting uses each hit's total; hits with a non-positive total carry
/// no weight and are left out.
pub fn knn_predict<L: Ord + Clone>(
    neighbors: &[ScoredHit],
    k: usize,
    weighting: Weighting,
    label: impl Fn(&ScoredHit) -> L,
) -> Result<L> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let top = &neighbors[..k.min(neighbors.len())];
    match weighting {
        Weighting::Uniform => {
            let ballot: Vec<Vote<L>> = top.iter().map(|h| Vote::new(label(h), 1.0)).collect();
            majority_vote(&ballot)
        }
        Weighting::Score => {
            let ballot: Vec<Vote<L>> = top
                .iter()
                .filter(|h| h.total > 0.0)
                .map(|h| Vote::new(label(h), h.total))
                .collect();
            sum_of_scores_vote(&ballot)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Note,
    /// Raw component label such as "TC 67".
    Component,
    /// Merged component group such as "drying_cylinder".
    ComponentGroup,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exclusion {
    #[default]
    None,
    SamePoint,
    SameAsset,
}

/// A predicted class for either task.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Note(NoteClass),
    Component(String),
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Note(c) => f.write_str(c.name()),
            Label::Component(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Class(Label),
    /// No evidence survived exclusion.
    NoPrediction,
}

impl Prediction {
    pub fn label(&self) -> Option<&Label> {
        match self {
            Prediction::Class(l) => Some(l),
            Prediction::NoPrediction => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteRule {
    #[default]
    Majority,
    SumOfScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictConfig {
    pub task: Task,
    pub top_k: usize,
    pub exclusion: Exclusion,
    pub vote: VoteRule,
    pub ontology: Ontology,
    pub components: ComponentMap,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            task: Task::Note,
            top_k: 10,
            exclusion: Exclusion::None,
            vote: VoteRule::Majority,
            ontology: Ontology::default(),
            components: ComponentMap::default(),
        }
    }
}

impl PredictConfig {
    /// The label one retrieved hit votes for under this task.
    pub fn label_of(&self, hit: &ScoredHit) -> Result<Label> {
        self.label_for(&hit.provenance.note_content, &hit.provenance.point_name)
    }

    pub fn label_for(&self, note_content: &str, point_name: &str) -> Result<Label> {
        Ok(match self.task {
            Task::Note => Label::Note(classify_note(note_content, &self.ontology)?),
            Task::Component => Label::Component(component_label(point_name).label),
            Task::ComponentGroup => Label::Component(
                self.components
                    .merged_class(&component_label(point_name).label),
            ),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub chunk_id: ChunkId,
    pub asset_id: AssetId,
    pub point_id: PointId,
    pub label: Label,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkPrediction {
    pub chunk_id: ChunkId,
    pub prediction: Prediction,
    pub evidence: Vec<Evidence>,
}

/// Signal-similarity query used for chunk-level evidence. The source
/// recording is always excluded.
pub fn evidence_query(
    store: &VectorStore,
    chunk: ChunkId,
    top_k: usize,
    exclusion: Exclusion,
) -> Result<Query> {
    let c = store
        .chunk(chunk)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown chunk {chunk}")))?;
    let rec = store.recording_of(c);
    let doc = store.document_of(c);
    let mut filters = vec![FilterTree::not(FilterTree::RecordingIdIn(vec![
        rec.recording.id,
    ]))];
    match exclusion {
        Exclusion::None => {}
        Exclusion::SamePoint => filters.push(FilterTree::not(FilterTree::PointIdIn(vec![
            doc.doc_id.point,
        ]))),
        Exclusion::SameAsset => {
            filters.push(FilterTree::not(FilterTree::AssetIdIn(vec![doc.asset_id])))
        }
    }
    Ok(Query {
        filter: FilterTree::And(filters),
        payloads: Payloads {
            signal: Some(SignalQuery::Chunk(chunk)),
            ..Payloads::default()
        },
        weights: WeightProfile::only(Metric::SignalEmbedding, 1.0),
        mode: Mode::Chunks,
        limit: Limit::TopK(top_k),
        ..Query::default()
    })
}

/// Votes over the labels of `hits` under `config`.
pub fn vote_hits(
    hits: &[ScoredHit],
    config: &PredictConfig,
) -> Result<(Prediction, Vec<Evidence>)> {
    let mut evidence = Vec::with_capacity(hits.len());
    for h in hits {
        let chunk_id =
            h.id.chunk()
                .ok_or_else(|| Error::InvalidArgument("evidence hits must be chunks".into()))?;
        evidence.push(Evidence {
            chunk_id,
            asset_id: h.provenance.asset_id,
            point_id: h.provenance.point_id,
            label: config.label_of(h)?,
            score: h.total,
        });
    }
    if evidence.is_empty() {
        return Ok((Prediction::NoPrediction, evidence));
    }
    let label = match config.vote {
        VoteRule::Majority => {
            let ballot: Vec<Vote<Label>> = evidence
                .iter()
                .map(|e| Vote::new(e.label.clone(), 1.0))
                .collect();
            majority_vote(&ballot)?
        }
        VoteRule::SumOfScores => {
            let ballot: Vec<Vote<Label>> = evidence
                .iter()
                .filter(|e| e.score > 0.0)
                .map(|e| Vote::new(e.label.clone(), e.score))
                .collect();
            if ballot.is_empty() {
                return Ok((Prediction::NoPrediction, evidence));
            }
            sum_of_scores_vote(&ballot)?
        }
    };
    Ok((Prediction::Class(label), evidence))
}

/// Retrieves the `top_k` most signal-similar chunks and votes over their
/// note classes or component labels.
pub fn predict_for_chunk(
    store: &VectorStore,
    chunk: ChunkId,
    config: &PredictConfig,
) -> Result<ChunkPrediction> {
    if config.top_k == 0 {
        return Err(Error::InvalidArgument("top_k must be at least 1".into()));
    }
    let query = evidence_query(store, chunk, config.top_k, config.exclusion)?;
    let hits = retrieval::retrieve(store, &query)?;
    let (prediction, evidence) = vote_hits(&hits, config)?;
    Ok(ChunkPrediction {
        chunk_id: chunk,
        prediction,
        evidence,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaRule {
    /// Majority over the chunk-level predictions.
    #[default]
    VoteOfVotes,
    /// Majority over every evidence vote of every chunk.
    SummedVotes,
}

fn meta_vote(predictions: &[&ChunkPrediction], rule: MetaRule) -> Result<Prediction> {
    let ballot: Vec<Vote<Label>> = match rule {
        MetaRule::VoteOfVotes => predictions
            .iter()
            .filter_map(|p| p.prediction.label())
            .map(|l| Vote::new(l.clone(), 1.0))
            .collect(),
        MetaRule::SummedVotes => predictions
            .iter()
            .flat_map(|p| p.evidence.iter())
            .map(|e| Vote::new(e.label.clone(), 1.0))
            .collect(),
    };
    if ballot.is_empty() {
        return Ok(Prediction::NoPrediction);
    }
    Ok(Prediction::Class(majority_vote(&ballot)?))
}

/// Point-level prediction from that point's chunk predictions.
pub fn predict_for_point(
    chunk_predictions: &[ChunkPrediction],
    rule: MetaRule,
) -> Result<Prediction> {
    let refs: Vec<&ChunkPrediction> = chunk_predictions.iter().collect();
    meta_vote(&refs, rule)
}

/// Asset-level prediction from per-point chunk predictions. Vote-of-votes
/// first votes within each point, then across point outcomes; summed votes
/// pools all evidence of the asset.
pub fn predict_for_asset(points: &[Vec<ChunkPrediction>], rule: MetaRule) -> Result<Prediction> {
    match rule {
        MetaRule::VoteOfVotes => {
            let mut ballot = Vec::new();
            for p in points {
                if let Prediction::Class(l) = predict_for_point(p, rule)? {
                    ballot.push(Vote::new(l, 1.0));
                }
            }
            if ballot.is_empty() {
                return Ok(Prediction::NoPrediction);
            }
            Ok(Prediction::Class(majority_vote(&ballot)?))
        }
        MetaRule::SummedVotes => {
            let refs: Vec<&ChunkPrediction> = points.iter().flatten().collect();
            meta_vote(&refs, rule)
        }
    }
}
