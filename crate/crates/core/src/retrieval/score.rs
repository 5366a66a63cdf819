//! Per-metric scoring primitives, weights and store-wide normalisation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Asset, StoredRecording};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    NoteEmbedding,
    SignalEmbedding,
    AssetBleu,
    PointBleu,
    HierarchyDistance,
    NoteDate,
    RecordingDate,
    Timedelta,
    Speed,
    TrendVariance,
    BiasVariance,
}

impl Metric {
    pub const ALL: [Metric; 11] = [
        Metric::NoteEmbedding,
        Metric::SignalEmbedding,
        Metric::AssetBleu,
        Metric::PointBleu,
        Metric::HierarchyDistance,
        Metric::NoteDate,
        Metric::RecordingDate,
        Metric::Timedelta,
        Metric::Speed,
        Metric::TrendVariance,
        Metric::BiasVariance,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::NoteEmbedding => "note_embedding",
            Metric::SignalEmbedding => "signal_embedding",
            Metric::AssetBleu => "asset_bleu",
            Metric::PointBleu => "point_bleu",
            Metric::HierarchyDistance => "hierarchy_distance",
            Metric::NoteDate => "note_date",
            Metric::RecordingDate => "recording_date",
            Metric::Timedelta => "timedelta",
            Metric::Speed => "speed",
            Metric::TrendVariance => "trend_variance",
            Metric::BiasVariance => "bias_variance",
        }
    }

    /// Metrics that need a recording and so only apply in chunk mode.
    pub fn is_chunk_level(self) -> bool {
        matches!(
            self,
            Metric::SignalEmbedding
                | Metric::RecordingDate
                | Metric::Timedelta
                | Metric::Speed
                | Metric::TrendVariance
                | Metric::BiasVariance
        )
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown metric {s:?}")))
    }
}

/// Weight per metric. Zero-weight metrics are never evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightProfile {
    pub note_embedding: f64,
    pub signal_embedding: f64,
    pub asset_bleu: f64,
    pub point_bleu: f64,
    pub hierarchy_distance: f64,
    pub note_date: f64,
    pub recording_date: f64,
    pub timedelta: f64,
    pub speed: f64,
    pub trend_variance: f64,
    pub bias_variance: f64,
}

impl Default for WeightProfile {
    fn default() -> Self {
        WeightProfile {
            note_embedding: 5.0,
            signal_embedding: 5.0,
            asset_bleu: 1.0,
            point_bleu: 1.0,
            hierarchy_distance: 1.0,
            note_date: 1.0,
            recording_date: 1.0,
            timedelta: 1.0,
            speed: 1.0,
            trend_variance: 1.0,
            bias_variance: 1.0,
        }
    }
}

impl WeightProfile {
    pub fn zero() -> Self {
        WeightProfile::from_array([0.0; 11])
    }

    /// Zero everywhere except `metric`.
    pub fn only(metric: Metric, weight: f64) -> Self {
        let mut w = WeightProfile::zero();
        w.set(metric, weight);
        w
    }

    pub fn as_array(&self) -> [f64; 11] {
        [
            self.note_embedding,
            self.signal_embedding,
            self.asset_bleu,
            self.point_bleu,
            self.hierarchy_distance,
            self.note_date,
            self.recording_date,
            self.timedelta,
            self.speed,
            self.trend_variance,
            self.bias_variance,
        ]
    }

    pub fn from_array(a: [f64; 11]) -> Self {
        WeightProfile {
            note_embedding: a[0],
            signal_embedding: a[1],
            asset_bleu: a[2],
            point_bleu: a[3],
            hierarchy_distance: a[4],
            note_date: a[5],
            recording_date: a[6],
            timedelta: a[7],
            speed: a[8],
            trend_variance: a[9],
            bias_variance: a[10],
        }
    }

    pub fn get(&self, metric: Metric) -> f64 {
        self.as_array()[metric.index()]
    }

    pub fn set(&mut self, metric: Metric, weight: f64) {
        let mut a = self.as_array();
        a[metric.index()] = weight;
        *self = WeightProfile::from_array(a);
    }

    pub fn validate(&self) -> Result<()> {
        for m in Metric::ALL {
            let w = self.get(m);
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Query(format!(
                    "weight for {m} must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }
}

fn proximity(delta: f64, n: f64, inverse: bool, what: &str) -> Result<f64> {
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "{what} N must be positive, got {n}"
        )));
    }
    let s = n / (delta.abs() + n);
    Ok(if inverse { 1.0 - s } else { s })
}

/// `N / (|t_d| + N)`: 1 at the target, halved `N` days away.
pub fn date_score(t_d: f64, n: f64, inverse: bool) -> Result<f64> {
    proximity(t_d, n, inverse, "date score")
}

pub fn speed_score(delta_rpm: f64, n_rpm: f64, inverse: bool) -> Result<f64> {
    proximity(delta_rpm, n_rpm, inverse, "speed score")
}

pub fn variance_score(source_var: f64, target_var: f64, n: f64) -> Result<f64> {
    if source_var < 0.0 || target_var < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "variances must be non-negative, got {source_var} and {target_var}"
        )));
    }
    proximity(source_var - target_var, n, false, "variance score")
}

/// Which of the two aggregation orders to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationOrder {
    /// `Σ w·norm(raw)`.
    #[default]
    NormalizeThenWeight,
    /// Min-max of the weighted raw sum over the weighted metric ranges.
    WeightThenNormalize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRange {
    pub min: f64,
    pub max: f64,
}

impl MetricRange {
    pub fn normalize(&self, raw: f64) -> f64 {
        let span = self.max - self.min;
        if !(span > 0.0) {
            0.5
        } else {
            ((raw - self.min) / span).clamp(0.0, 1.0)
        }
    }
}

/// Per-metric ranges used to map raw scores onto `[0, 1]`.
///
/// Similarity and proximity metrics use the range they can attain on this
/// store. Hierarchy distance is scored as its negation over
/// `[-max pairwise distance, 0]` so closer paths score higher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub ranges: BTreeMap<Metric, MetricRange>,
}

impl Default for NormalizationStats {
    fn default() -> Self {
        NormalizationStats::compute(&[], &[])
    }
}

impl NormalizationStats {
    pub fn compute(assets: &[Asset], recordings: &[StoredRecording]) -> Self {
        let unit = MetricRange { min: 0.0, max: 1.0 };
        let signed = MetricRange {
            min: -1.0,
            max: 1.0,
        };
        let non_negative = recordings
            .iter()
            .all(|r| r.signal_embedding.iter().all(|&v| v >= 0.0));
        let mut max_distance = 0usize;
        for (i, a) in assets.iter().enumerate() {
            for b in &assets[i + 1..] {
                max_distance = max_distance.max(a.path.distance(&b.path));
            }
        }
        let mut ranges = BTreeMap::new();
        for m in Metric::ALL {
            let r = match m {
                Metric::NoteEmbedding => signed,
                Metric::SignalEmbedding if non_negative => unit,
                Metric::SignalEmbedding => signed,
                Metric::HierarchyDistance => MetricRange {
                    min: -(max_distance as f64),
                    max: 0.0,
                },
                _ => unit,
            };
            ranges.insert(m, r);
        }
        NormalizationStats { ranges }
    }

    pub fn range(&self, metric: Metric) -> MetricRange {
        self.ranges
            .get(&metric)
            .copied()
            .unwrap_or(MetricRange { min: 0.0, max: 1.0 })
    }

    pub fn normalize(&self, metric: Metric, raw: f64) -> f64 {
        self.range(metric).normalize(raw)
    }
}

/// Normalises named raw scores, rejecting unknown metric names.
pub fn normalize_scores(
    raw: &BTreeMap<String, f64>,
    stats: &NormalizationStats,
) -> Result<BTreeMap<Metric, f64>> {
    raw.iter()
        .map(|(name, &v)| {
            let m: Metric = name.parse()?;
            Ok((m, stats.normalize(m, v)))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub raw: f64,
    pub normalized: f64,
}

pub type Breakdown = BTreeMap<Metric, MetricScore>;

/// Weighted sum of normalised scores; 0 when the filter rejected the target.
pub fn aggregate(breakdown: &Breakdown, weights: &WeightProfile, filter_passed: bool) -> f64 {
    if !filter_passed {
        return 0.0;
    }
    let mut total = 0.0;
    for m in Metric::ALL {
        let w = weights.get(m);
        if w > 0.0 {
            if let Some(s) = breakdown.get(&m) {
                total += w * s.normalized;
            }
        }
    }
    total
}

/// Total under an explicit aggregation order. `raw[i]` is `Some` for the
/// active metrics only; summation follows [`Metric::ALL`].
pub(crate) fn combine(
    raw: &[Option<f64>; 11],
    weights: &[f64; 11],
    stats: &NormalizationStats,
    order: NormalizationOrder,
) -> f64 {
    match order {
        NormalizationOrder::NormalizeThenWeight => {
            let mut total = 0.0;
            for m in Metric::ALL {
                if let Some(r) = raw[m.index()] {
                    total += weights[m.index()] * stats.normalize(m, r);
                }
            }
            total
        }
        NormalizationOrder::WeightThenNormalize => {
            let (mut num, mut lo, mut span) = (0.0, 0.0, 0.0);
            for m in Metric::ALL {
                if let Some(r) = raw[m.index()] {
                    let w = weights[m.index()];
                    let range = stats.range(m);
                    num += w * r;
                    lo += w * range.min;
                    span += w * (range.max - range.min);
                }
            }
            if !(span > 0.0) {
                0.5
            } else {
                ((num - lo) / span).clamp(0.0, 1.0)
            }
        }
    }
}
