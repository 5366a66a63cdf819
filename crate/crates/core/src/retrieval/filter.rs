//! Boolean filter trees over documents and recording chunks.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::model::{
    AssetId, DocumentChunk, PointId, RecordingChunk, RecordingId, SensorType, StoredRecording,
};

/// Filter node. The default, an empty `and`, accepts everything.
///
/// Text leaves match case-insensitive substrings. `path_contains` and
/// `point_name_contains` require every term to match; `note_keywords`
/// requires any. Spans are inclusive; an open bound is `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterTree {
    And(Vec<FilterTree>),
    Or(Vec<FilterTree>),
    Not(Box<FilterTree>),
    Const(bool),
    /// Each fragment must occur inside some path segment.
    PathContains(Vec<String>),
    PointNameContains(Vec<String>),
    PointTypeIs(SensorType),
    NoteKeywords(Vec<String>),
    NoteDateSpan {
        #[serde(default)]
        start: Option<DateTime<Utc>>,
        #[serde(default)]
        end: Option<DateTime<Utc>>,
    },
    RecordingDateSpan {
        #[serde(default)]
        start: Option<DateTime<Utc>>,
        #[serde(default)]
        end: Option<DateTime<Utc>>,
    },
    TimedeltaSpan {
        #[serde(default)]
        lo: Option<f64>,
        #[serde(default)]
        hi: Option<f64>,
    },
    SpeedSpan {
        #[serde(default)]
        lo: Option<f64>,
        #[serde(default)]
        hi: Option<f64>,
    },
    AssetIdIn(Vec<AssetId>),
    PointIdIn(Vec<PointId>),
    RecordingIdIn(Vec<RecordingId>),
}

impl Default for FilterTree {
    fn default() -> Self {
        FilterTree::And(Vec::new())
    }
}

/// What a filter is evaluated against.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Document(&'a DocumentChunk),
    Chunk(&'a DocumentChunk, &'a RecordingChunk, &'a StoredRecording),
}

impl<'a> Target<'a> {
    fn document(&self) -> &'a DocumentChunk {
        match *self {
            Target::Document(d) | Target::Chunk(d, _, _) => d,
        }
    }
}

impl FilterTree {
    pub fn and(children: Vec<FilterTree>) -> Self {
        FilterTree::And(children)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(child: FilterTree) -> Self {
        FilterTree::Not(Box::new(child))
    }

    /// True when some leaf needs a recording to evaluate.
    pub fn uses_recording_fields(&self) -> bool {
        match self {
            FilterTree::And(c) | FilterTree::Or(c) => c.iter().any(|f| f.uses_recording_fields()),
            FilterTree::Not(c) => c.uses_recording_fields(),
            FilterTree::RecordingDateSpan { .. }
            | FilterTree::TimedeltaSpan { .. }
            | FilterTree::SpeedSpan { .. }
            | FilterTree::RecordingIdIn(_) => true,
            _ => false,
        }
    }

    /// Lowercases every text term once so evaluation does not allocate.
    pub fn compiled(&self) -> FilterTree {
        let lower = |v: &Vec<String>| v.iter().map(|s| s.to_lowercase()).collect();
        match self {
            FilterTree::And(c) => FilterTree::And(c.iter().map(FilterTree::compiled).collect()),
            FilterTree::Or(c) => FilterTree::Or(c.iter().map(FilterTree::compiled).collect()),
            FilterTree::Not(c) => FilterTree::Not(Box::new(c.compiled())),
            FilterTree::PathContains(v) => FilterTree::PathContains(lower(v)),
            FilterTree::PointNameContains(v) => FilterTree::PointNameContains(lower(v)),
            FilterTree::NoteKeywords(v) => FilterTree::NoteKeywords(lower(v)),
            other => other.clone(),
        }
    }

    pub fn is_trivially_true(&self) -> bool {
        match self {
            FilterTree::And(c) => c.iter().all(FilterTree::is_trivially_true),
            FilterTree::Const(b) => *b,
            _ => false,
        }
    }
}

fn in_span<T: PartialOrd>(v: T, lo: &Option<T>, hi: &Option<T>) -> bool {
    lo.as_ref().is_none_or(|l| v >= *l) && hi.as_ref().is_none_or(|h| v <= *h)
}

/// Evaluates `tree` after lowercasing its terms.
pub fn evaluate_filter(tree: &FilterTree, target: Target<'_>) -> bool {
    evaluate_compiled(&tree.compiled(), target)
}

/// Evaluates a tree whose text terms are already lowercase.
///
/// Recording leaves are false on a document target; queries reject that
/// combination before evaluation.
pub fn evaluate_compiled(tree: &FilterTree, target: Target<'_>) -> bool {
    let doc = target.document();
    let ix = &doc.index;
    let chunk = match target {
        Target::Chunk(_, c, r) => Some((c, r)),
        Target::Document(_) => None,
    };
    match tree {
        FilterTree::And(c) => c.iter().all(|f| evaluate_compiled(f, target)),
        FilterTree::Or(c) => c.iter().any(|f| evaluate_compiled(f, target)),
        FilterTree::Not(c) => !evaluate_compiled(c, target),
        FilterTree::Const(b) => *b,
        FilterTree::PathContains(frags) => frags
            .iter()
            .all(|f| ix.path_lower.iter().any(|seg| seg.contains(f.as_str()))),
        FilterTree::PointNameContains(terms) => {
            terms.iter().all(|t| ix.point_lower.contains(t.as_str()))
        }
        FilterTree::PointTypeIs(t) => doc.point_type == *t,
        FilterTree::NoteKeywords(terms) => terms.iter().any(|t| ix.note_lower.contains(t.as_str())),
        FilterTree::NoteDateSpan { start, end } => in_span(doc.note_date, start, end),
        FilterTree::AssetIdIn(ids) => ids.contains(&doc.asset_id),
        FilterTree::PointIdIn(ids) => ids.contains(&doc.doc_id.point),
        FilterTree::RecordingDateSpan { start, end } => {
            chunk.is_some_and(|(_, r)| in_span(r.recording.recording_date, start, end))
        }
        FilterTree::TimedeltaSpan { lo, hi } => {
            chunk.is_some_and(|(c, _)| in_span(c.timedelta_days, lo, hi))
        }
        FilterTree::SpeedSpan { lo, hi } => {
            chunk.is_some_and(|(_, r)| in_span(r.recording.shaft_speed, lo, hi))
        }
        FilterTree::RecordingIdIn(ids) => chunk.is_some_and(|(_, r)| ids.contains(&r.recording.id)),
    }
}
