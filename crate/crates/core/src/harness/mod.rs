//! Evaluation protocols: confusion metrics, per-day prediction curves and
//! streaming sessions.

pub mod session;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{predict_for_chunk, Exclusion, PredictConfig, Task};
use crate::model::{ChunkId, VectorStore};

pub use session::{
    audit_causality, run_session, score_outcome, score_session, Decision, EvaluationRecord,
    EvidenceHit, Outcome, PointEvidence, Policy, RulePolicy, Score, Session, SessionSpec,
    SessionStep, SessionTrace, Verdict,
};

/// Prediction label used when no evidence survived exclusion.
pub const NO_PREDICTION: &str = "no_prediction";

/// Counts indexed `[truth][prediction]` over a fixed label list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

pub fn confusion<S: AsRef<str>>(
    predictions: &[S],
    truths: &[S],
    labels: &[S],
) -> Result<ConfusionMatrix> {
    if predictions.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let labels: Vec<String> = labels.iter().map(|l| l.as_ref().to_string()).collect();
    let index: BTreeMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    if index.len() != labels.len() {
        return Err(Error::InvalidArgument("duplicate label".into()));
    }
    let find = |l: &str| {
        index
            .get(l)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown label {l:?}")))
    };
    let mut counts = vec![vec![0u64; labels.len()]; labels.len()];
    for (p, t) in predictions.iter().zip(truths) {
        counts[find(t.as_ref())?][find(p.as_ref())?] += 1;
    }
    Ok(ConfusionMatrix { labels, counts })
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Truth support of label `i`.
    pub fn support(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    fn predicted(&self, i: usize) -> u64 {
        self.counts.iter().map(|r| r[i]).sum()
    }

    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| {
            let trace: u64 = (0..self.labels.len()).map(|i| self.counts[i][i]).sum();
            trace as f64 / total as f64
        })
    }

    /// Mean recall over labels with truth support.
    pub fn balanced_accuracy(&self) -> Option<f64> {
        let recalls: Vec<f64> = (0..self.labels.len())
            .filter(|&i| self.support(i) > 0)
            .map(|i| self.counts[i][i] as f64 / self.support(i) as f64)
            .collect();
        (!recalls.is_empty()).then(|| recalls.iter().sum::<f64>() / recalls.len() as f64)
    }

    /// Mean F1 over labels that occur as truth or prediction.
    pub fn macro_f1(&self) -> Option<f64> {
        let f1: Vec<f64> = (0..self.labels.len())
            .filter(|&i| self.support(i) + self.predicted(i) > 0)
            .map(|i| {
                let tp = self.counts[i][i] as f64;
                2.0 * tp / (self.support(i) + self.predicted(i)) as f64
            })
            .collect();
        (!f1.is_empty()).then(|| f1.iter().sum::<f64>() / f1.len() as f64)
    }

    /// Header row of prediction labels, then one row per truth label.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("truth\\prediction");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            out.push_str(l);
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimesliceConfig {
    pub predict: PredictConfig,
    pub day_lo: i64,
    pub day_hi: i64,
    pub threads: usize,
}

impl Default for TimesliceConfig {
    fn default() -> Self {
        TimesliceConfig {
            predict: PredictConfig::default(),
            day_lo: -50,
            day_hi: 20,
            threads: 1,
        }
    }
}

/// Metrics of one day bucket; absent when the bucket is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayMetrics {
    pub day: i64,
    pub support: usize,
    pub no_prediction: usize,
    pub accuracy: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkOutcome {
    pub chunk_id: ChunkId,
    pub day: i64,
    pub truth: String,
    pub predicted: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimesliceReport {
    pub task: Task,
    pub exclusion: Exclusion,
    pub days: Vec<DayMetrics>,
    /// Matrix over every evaluated chunk; absent when none were.
    pub overall: Option<ConfusionMatrix>,
    #[serde(default, skip_serializing)]
    pub outcomes: Vec<ChunkOutcome>,
}

impl TimesliceReport {
    pub fn accuracy(&self) -> Option<f64> {
        self.overall.as_ref().and_then(ConfusionMatrix::accuracy)
    }
}

fn outcome(
    store: &VectorStore,
    index: usize,
    day: i64,
    config: &PredictConfig,
) -> Result<ChunkOutcome> {
    let chunk = &store.chunks()[index];
    let doc = store.document_of(chunk);
    let truth = config
        .label_for(&doc.note_content, &doc.point_name)?
        .to_string();
    let pred = predict_for_chunk(store, chunk.chunk_id, config)?;
    Ok(ChunkOutcome {
        chunk_id: chunk.chunk_id,
        day,
        truth,
        predicted: pred
            .prediction
            .label()
            .map_or_else(|| NO_PREDICTION.to_string(), |l| l.to_string()),
    })
}

/// Predicts every chunk whose floored timedelta lies in the day range and
/// aggregates per day. A missing prediction counts as wrong.
pub fn timeslice_eval(store: &VectorStore, config: &TimesliceConfig) -> Result<TimesliceReport> {
    if config.day_lo > config.day_hi {
        return Err(Error::InvalidArgument(format!(
            "day range {}..={} is empty",
            config.day_lo, config.day_hi
        )));
    }
    if store.is_document_only() {
        return Err(Error::Mode(
            "timeslice evaluation needs recording chunks".into(),
        ));
    }
    let selected: Vec<(usize, i64)> = store
        .chunks()
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            let day = c.timedelta_days.floor() as i64;
            (config.day_lo..=config.day_hi)
                .contains(&day)
                .then_some((i, day))
        })
        .collect();
    let run = |&(i, day): &(usize, i64)| outcome(store, i, day, &config.predict);
    let outcomes: Vec<ChunkOutcome> = if config.threads > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| selected.par_iter().map(run).collect::<Result<_>>())?
    } else {
        selected.iter().map(run).collect::<Result<_>>()?
    };

    let mut labels: Vec<String> = outcomes
        .iter()
        .flat_map(|o| [o.truth.clone(), o.predicted.clone()])
        .collect();
    labels.sort();
    labels.dedup();
    let matrix = |os: &[&ChunkOutcome]| {
        let p: Vec<&str> = os.iter().map(|o| o.predicted.as_str()).collect();
        let t: Vec<&str> = os.iter().map(|o| o.truth.as_str()).collect();
        let l: Vec<&str> = labels.iter().map(String::as_str).collect();
        confusion(&p, &t, &l)
    };

    let mut by_day: BTreeMap<i64, Vec<&ChunkOutcome>> = BTreeMap::new();
    for o in &outcomes {
        by_day.entry(o.day).or_default().push(o);
    }
    let mut days = Vec::new();
    for day in config.day_lo..=config.day_hi {
        let bucket = by_day.get(&day).map(Vec::as_slice).unwrap_or(&[]);
        let m = if bucket.is_empty() {
            None
        } else {
            Some(matrix(bucket)?)
        };
        days.push(DayMetrics {
            day,
            support: bucket.len(),
            no_prediction: bucket
                .iter()
                .filter(|o| o.predicted == NO_PREDICTION)
                .count(),
            accuracy: m.as_ref().and_then(ConfusionMatrix::accuracy),
            balanced_accuracy: m.as_ref().and_then(ConfusionMatrix::balanced_accuracy),
            macro_f1: m.as_ref().and_then(ConfusionMatrix::macro_f1),
        });
    }
    let all: Vec<&ChunkOutcome> = outcomes.iter().collect();
    Ok(TimesliceReport {
        task: config.predict.task,
        exclusion: config.predict.exclusion,
        days,
        overall: if all.is_empty() {
            None
        } else {
            Some(matrix(&all)?)
        },
        outcomes,
    })
}
