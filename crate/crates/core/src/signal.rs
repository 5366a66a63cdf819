//! Order-domain signal embedding, cosine scoring and statistical features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{days_between, LevelSample};

/// Shaft-speed range over every recording in a store, in RPM.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedBounds {
    pub min: f64,
    pub max: f64,
}

impl SpeedBounds {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min > 0.0) || !(max >= min) || !max.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "speed bounds ({min}, {max}) must satisfy 0 < min <= max"
            )));
        }
        Ok(SpeedBounds { min, max })
    }

    pub fn contains(&self, speed: f64) -> bool {
        speed >= self.min && speed <= self.max
    }

    /// Common order-vector length for spectra of `len` bins.
    pub fn max_resolution(&self, len: usize) -> usize {
        (len as f64 * self.max / self.min).round() as usize
    }

    /// Length a spectrum recorded at `speed` is resampled to before padding.
    pub fn resample_len(&self, len: usize, speed: f64) -> usize {
        (len as f64 * self.max / speed).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderVector {
    pub values: Vec<f32>,
    pub source_speed: f64,
    pub bounds: SpeedBounds,
}

/// Resamples a spectrum so bin `i` maps to the same machine order at every
/// speed inside `bounds`, then zero-pads to the store-wide resolution.
///
/// The output at index `i` samples the input at `i * len / target_len` by
/// linear interpolation; positions past the last bin clamp to it.
pub fn order_transform(spectrum: &[f32], speed: f64, bounds: SpeedBounds) -> Result<OrderVector> {
    if spectrum.is_empty() {
        return Err(Error::InvalidArgument("spectrum is empty".into()));
    }
    if !bounds.contains(speed) {
        return Err(Error::OutOfRange {
            what: "shaft speed",
            value: speed,
            min: bounds.min,
            max: bounds.max,
        });
    }
    let len = spectrum.len();
    let target = bounds.resample_len(len, speed);
    let width = bounds.max_resolution(len);
    let mut values = vec![0.0f32; width];
    let step = len as f64 / target as f64;
    let last = len - 1;
    for (i, out) in values.iter_mut().take(target).enumerate() {
        let x = i as f64 * step;
        let j = x.floor() as usize;
        *out = if j >= last {
            spectrum[last]
        } else {
            let frac = x - j as f64;
            (spectrum[j] as f64 * (1.0 - frac) + spectrum[j + 1] as f64 * frac) as f32
        };
    }
    Ok(OrderVector {
        values,
        source_speed: speed,
        bounds,
    })
}

/// Cosine similarity with its degenerate-input flag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub value: f64,
    /// Set when either input has zero norm; `value` is then 0.
    pub degenerate: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<Similarity> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "vector lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(cosine_from_parts(dot, na, nb))
}

/// Cosine of `f32` vectors, accumulated in `f64`.
pub fn cosine_f32(a: &[f32], b: &[f32]) -> Result<Similarity> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "vector lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(cosine_from_parts(dot_f32(a, b), norm(a), norm(b)))
}

pub(crate) fn cosine_from_parts(dot: f64, na: f64, nb: f64) -> Similarity {
    if na == 0.0 || nb == 0.0 {
        return Similarity {
            value: 0.0,
            degenerate: true,
        };
    }
    Similarity {
        value: (dot / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Dot product over eight independent accumulators. The summation order is
/// fixed, so results are reproducible across calls and threads.
pub fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] as f64 * y[k] as f64;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += *x as f64 * *y as f64;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

pub fn norm(a: &[f32]) -> f64 {
    dot_f32(a, a).sqrt()
}

pub const ENTROPY_BINS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub variance: f64,
    /// Excess kurtosis.
    pub kurtosis: f64,
    pub skew: f64,
    /// Shannon entropy in nats of a 64-bin histogram over `[min, max]`.
    pub entropy: f64,
}

pub fn stat_features(series: &[f64]) -> Result<FeatureSet> {
    if series.is_empty() {
        return Err(Error::InvalidArgument("series is empty".into()));
    }
    let n = series.len() as f64;
    let min = series.iter().copied().fold(f64::INFINITY, f64::min);
    let max = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = series.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in series {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let (skew, kurtosis) = if m2 < 1e-12 {
        (0.0, 0.0)
    } else {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    };
    Ok(FeatureSet {
        min,
        mean,
        max,
        variance: m2,
        kurtosis,
        skew,
        entropy: histogram_entropy(series, min, max),
    })
}

fn histogram_entropy(series: &[f64], min: f64, max: f64) -> f64 {
    let range = max - min;
    if !(range > 0.0) {
        return 0.0;
    }
    let mut bins = [0usize; ENTROPY_BINS];
    for &x in series {
        let b = (((x - min) / range) * ENTROPY_BINS as f64) as usize;
        bins[b.min(ENTROPY_BINS - 1)] += 1;
    }
    let n = series.len() as f64;
    let h: f64 = bins
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    h.max(0.0)
}

/// Population variance of the samples within `window_days` of the latest
/// one. Fewer than two samples give 0.
pub fn windowed_variance(levels: &[LevelSample], window_days: f64) -> f64 {
    let Some(latest) = levels.iter().map(|s| s.time).max() else {
        return 0.0;
    };
    let values: Vec<f64> = levels
        .iter()
        .filter(|s| days_between(s.time, latest) <= window_days)
        .map(|s| s.value)
        .collect();
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}
