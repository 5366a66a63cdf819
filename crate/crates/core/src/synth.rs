//! Deterministic synthetic plants: hierarchy, points, annotated fault
//! timelines and vibration recordings with injected fault signatures.
//!
//! Spectra are built directly in the frequency domain. Each archetype has a
//! noise floor with resonances fixed in Hz, so healthy components of
//! different kinds look different. Fault signatures are harmonic combs at
//! fixed machine orders; their frequency follows shaft speed, so they line
//! up after the order transform while the floor does not.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Annotation, Asset, AssetId, AssetPath, BuildInputs, LevelSample, NoteId, Point, PointId,
    Recording, RecordingId, SensorType,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultType {
    BpfoLike,
    BpfiLike,
    CableSensor,
    Imbalance,
}

impl FaultType {
    pub const ALL: [FaultType; 4] = [
        FaultType::BpfoLike,
        FaultType::BpfiLike,
        FaultType::CableSensor,
        FaultType::Imbalance,
    ];

    /// Orders of the harmonic comb and their relative amplitudes.
    fn comb(self) -> Vec<(f64, f64)> {
        match self {
            FaultType::BpfoLike => (1..=5)
                .map(|k| (3.57 * k as f64, 0.8f64.powi(k - 1)))
                .collect(),
            FaultType::BpfiLike => (1..=5)
                .map(|k| (5.43 * k as f64, 0.8f64.powi(k - 1)))
                .collect(),
            FaultType::Imbalance => vec![(1.0, 1.0), (2.0, 0.5), (3.0, 0.3)],
            FaultType::CableSensor => Vec::new(),
        }
    }

    /// Comb gain relative to the floor level, per sensor kind.
    fn gain(self, envelope: bool) -> f64 {
        match (self, envelope) {
            (FaultType::BpfoLike | FaultType::BpfiLike, true) => 12.0,
            (FaultType::BpfoLike | FaultType::BpfiLike, false) => 5.0,
            (FaultType::Imbalance, true) => 5.0,
            (FaultType::Imbalance, false) => 12.0,
            (FaultType::CableSensor, _) => 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resonance {
    pub hz: f64,
    /// Peak height relative to the archetype level.
    pub amplitude: f64,
    pub width_hz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseProfile {
    pub level: f64,
    /// Low-frequency decay constant of the floor, in Hz.
    pub decay_hz: f64,
    /// Flat part of the floor relative to `level`.
    pub tilt: f64,
    #[serde(default)]
    pub resonances: Vec<Resonance>,
    /// Half-width of the uniform multiplicative jitter per bin.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_jitter() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Archetype {
    /// Leading code of asset names, e.g. "TC".
    pub code: String,
    /// Points per asset; drawn from 2..=4 when absent.
    #[serde(default)]
    pub points: Option<usize>,
    pub noise: NoiseProfile,
}

fn arch(code: &str, level: f64, decay: f64, tilt: f64, res: &[(f64, f64, f64)]) -> Archetype {
    Archetype {
        code: code.into(),
        points: None,
        noise: NoiseProfile {
            level,
            decay_hz: decay,
            tilt,
            resonances: res
                .iter()
                .map(|&(hz, amplitude, width_hz)| Resonance {
                    hz,
                    amplitude,
                    width_hz,
                })
                .collect(),
            jitter: default_jitter(),
        },
    }
}

/// Six component kinds with distinct floors.
pub fn default_archetypes() -> Vec<Archetype> {
    vec![
        arch(
            "TC",
            1.0,
            40.0,
            0.15,
            &[(120.0, 1.5, 8.0), (310.0, 0.8, 15.0)],
        ),
        arch(
            "FU",
            0.8,
            25.0,
            0.2,
            &[(85.0, 2.0, 6.0), (240.0, 1.0, 12.0)],
        ),
        arch(
            "VU",
            0.7,
            60.0,
            0.1,
            &[(150.0, 1.2, 10.0), (400.0, 0.7, 20.0)],
        ),
        arch(
            "PV",
            1.3,
            30.0,
            0.25,
            &[(60.0, 2.5, 5.0), (200.0, 1.0, 12.0)],
        ),
        arch("MO", 0.5, 80.0, 0.1, &[(50.0, 3.0, 1.5), (100.0, 1.5, 2.0)]),
        arch(
            "VXL",
            0.9,
            50.0,
            0.2,
            &[(180.0, 2.0, 4.0), (360.0, 1.2, 6.0)],
        ),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectionSpec {
    pub name: String,
    pub groups: usize,
    pub assets_per_group: usize,
    /// Archetype codes cycled over the section's groups.
    pub archetypes: Vec<String>,
    /// Group names are this label followed by the group number.
    #[serde(default = "default_group_label")]
    pub group_label: String,
}

fn default_group_label() -> String {
    "Grupp".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoteSpec {
    /// Days from the sampling start.
    pub day: f64,
    /// Defaults to the fault type's template.
    #[serde(default)]
    pub text: Option<String>,
    /// Whether the note marks a replacement that resets severity. Defaults to
    /// the template's behaviour.
    #[serde(default)]
    pub replacement: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultScenario {
    /// Asset name, e.g. "TC 3".
    pub asset: String,
    /// Indices into the asset's points; all points when absent.
    #[serde(default)]
    pub points: Option<Vec<usize>>,
    pub fault: FaultType,
    pub onset_day: f64,
    /// Severity rises linearly from 0 at onset to its peak over this span.
    #[serde(default = "default_ramp")]
    pub ramp_days: f64,
    #[serde(default = "default_peak")]
    pub peak_severity: f64,
    /// Probability that the signature shows in a given recording.
    #[serde(default = "default_intermittency")]
    pub intermittency: f64,
    pub note: NoteSpec,
}

fn default_ramp() -> f64 {
    20.0
}

fn default_peak() -> f64 {
    1.0
}

fn default_intermittency() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoteTemplate {
    pub text: String,
    pub replacement: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoteTemplates {
    pub bpfo_like: NoteTemplate,
    pub bpfi_like: NoteTemplate,
    pub cable_sensor: NoteTemplate,
    pub imbalance: NoteTemplate,
}

impl Default for NoteTemplates {
    fn default() -> Self {
        let t = |text: &str, replacement| NoteTemplate {
            text: text.into(),
            replacement,
        };
        NoteTemplates {
            bpfo_like: t("BPFO låga nivåer, håll koll.", false),
            bpfi_like: t("BPFI, AO skrivet på lagerbyte.", true),
            cable_sensor: t("Givaren skall bytas nästa stopp.", false),
            imbalance: t("Haveririsk, kraftig obalans, AO skrivet.", false),
        }
    }
}

impl NoteTemplates {
    pub fn get(&self, fault: FaultType) -> &NoteTemplate {
        match fault {
            FaultType::BpfoLike => &self.bpfo_like,
            FaultType::BpfiLike => &self.bpfi_like,
            FaultType::CableSensor => &self.cable_sensor,
            FaultType::Imbalance => &self.imbalance,
        }
    }
}

/// Misc notes added to assets without fault scenarios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutineNotes {
    #[serde(default = "default_per_asset")]
    pub per_asset: usize,
    /// Restrict to these asset names; every healthy asset when absent.
    #[serde(default)]
    pub assets: Option<Vec<String>>,
    #[serde(default = "default_routine_texts")]
    pub texts: Vec<String>,
}

fn default_per_asset() -> usize {
    1
}

fn default_routine_texts() -> Vec<String> {
    vec![
        "500 gram eftersmörjt.".into(),
        "Okulär kontroll utförd, inga anmärkningar.".into(),
        "Smörjning utförd enligt plan.".into(),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coverage {
    /// Recordings over the whole sampling span.
    Full,
    /// Only recordings within the given days around each note of the asset.
    AroundNotes { before: f64, after: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedRange {
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sampling {
    pub start: DateTime<Utc>,
    pub days: f64,
    pub recordings_per_day: f64,
    pub spectrum_len: usize,
    pub fmax_hz: f64,
    pub time_series_len: usize,
    pub time_series_seconds: f64,
    pub speed: SpeedRange,
    /// Relative spread of recording speed around the asset's nominal speed.
    pub speed_jitter: f64,
    pub coverage: Coverage,
    pub level_step_hours: f64,
    pub level_window_days: f64,
    /// Peak width as a fraction of its centre frequency.
    pub peak_rel_width: f64,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling {
            start: Utc.with_ymd_and_hms(2023, 1, 1, 0, 0, 0).unwrap(),
            days: 365.0,
            recordings_per_day: 4.0,
            spectrum_len: 3200,
            fmax_hz: 500.0,
            time_series_len: 8192,
            time_series_seconds: 6.4,
            speed: SpeedRange {
                min: 300.0,
                max: 600.0,
            },
            speed_jitter: 0.05,
            coverage: Coverage::Full,
            level_step_hours: 3.0,
            level_window_days: 10.0,
            peak_rel_width: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    pub seed: u64,
    #[serde(default = "default_plant")]
    pub plant: String,
    pub sections: Vec<SectionSpec>,
    #[serde(default = "default_archetypes")]
    pub archetypes: Vec<Archetype>,
    #[serde(default)]
    pub scenarios: Vec<FaultScenario>,
    #[serde(default)]
    pub routine_notes: Option<RoutineNotes>,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub templates: NoteTemplates,
}

fn default_plant() -> String {
    "PM1".into()
}

impl PlantConfig {
    /// A plant with the given sections and default everything else.
    pub fn new(seed: u64, sections: Vec<SectionSpec>) -> Self {
        PlantConfig {
            seed,
            plant: default_plant(),
            sections,
            archetypes: default_archetypes(),
            scenarios: Vec::new(),
            routine_notes: None,
            sampling: Sampling::default(),
            templates: NoteTemplates::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        let s = &self.sampling;
        let bad = |m: String| Err(Error::Config(m));
        if self.plant.trim().is_empty() {
            return bad("plant name is empty".into());
        }
        if !(s.recordings_per_day > 0.0) || !(s.days > 0.0) {
            return bad("sampling needs positive days and recordings_per_day".into());
        }
        if s.spectrum_len == 0 || !(s.fmax_hz > 0.0) {
            return bad("spectrum_len and fmax_hz must be positive".into());
        }
        if !(s.speed.min > 0.0) || s.speed.max < s.speed.min {
            return bad(format!(
                "invalid speed range ({}, {})",
                s.speed.min, s.speed.max
            ));
        }
        if !(s.level_step_hours > 0.0) || s.level_window_days < 0.0 {
            return bad("level_step_hours must be positive".into());
        }
        let codes: BTreeSet<&str> = self.archetypes.iter().map(|a| a.code.as_str()).collect();
        for a in &self.archetypes {
            if let Some(n) = a.points {
                if !(1..=4).contains(&n) {
                    return bad(format!(
                        "archetype {} point count {n} outside 1..=4",
                        a.code
                    ));
                }
            }
        }
        for sec in &self.sections {
            if sec.archetypes.is_empty() {
                return bad(format!("section {} lists no archetypes", sec.name));
            }
            for c in &sec.archetypes {
                if !codes.contains(c.as_str()) {
                    return bad(format!("section {} uses unknown archetype {c}", sec.name));
                }
            }
        }
        for sc in &self.scenarios {
            if sc.onset_day >= sc.note.day {
                return bad(format!(
                    "scenario on {}: onset day {} is not before note day {}",
                    sc.asset, sc.onset_day, sc.note.day
                ));
            }
            if !(0.0..=1.0).contains(&sc.peak_severity) || !(0.0..=1.0).contains(&sc.intermittency)
            {
                return bad(format!(
                    "scenario on {}: severity and intermittency must lie in [0, 1]",
                    sc.asset
                ));
            }
            if !(sc.ramp_days >= 0.0) {
                return bad(format!("scenario on {}: negative ramp", sc.asset));
            }
        }
        Ok(())
    }
}

/// Fault state of one scenario as seen by one point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultState {
    pub fault: FaultType,
    pub onset_day: f64,
    pub ramp_days: f64,
    pub peak_severity: f64,
    pub intermittency: f64,
    /// Replacement day; severity is 0 from then on.
    pub reset_day: Option<f64>,
}

impl FaultState {
    pub fn severity(&self, day: f64) -> f64 {
        if day < self.onset_day || self.reset_day.is_some_and(|r| day >= r) {
            return 0.0;
        }
        if self.ramp_days <= 0.0 {
            return self.peak_severity;
        }
        (self.peak_severity * (day - self.onset_day) / self.ramp_days).min(self.peak_severity)
    }
}

/// All fault states acting on one point.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointHealth {
    pub faults: Vec<FaultState>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthSample {
    pub day: f64,
    pub fault: FaultType,
    pub severity: f64,
    pub intermittency: f64,
}

/// Daily health timeline of one point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthState {
    pub point_id: PointId,
    pub timeline: Vec<HealthSample>,
}

struct Layout {
    assets: Vec<Asset>,
    points: Vec<Point>,
    asset_arch: Vec<usize>,
    asset_by_name: BTreeMap<String, usize>,
    points_of_asset: Vec<Vec<usize>>,
}

/// Side and filter codes per point slot; slots alternate envelope and rms.
const POINT_SLOTS: [(&str, SensorType); 4] = [
    ("DS VE3", SensorType::Peak),
    ("FS VV1", SensorType::Rms),
    ("FS VE3", SensorType::PtP),
    ("DS VV1", SensorType::Rms),
];

fn layout(config: &PlantConfig, rng: &mut ChaCha8Rng) -> Result<Layout> {
    let arch_index: BTreeMap<&str, usize> = config
        .archetypes
        .iter()
        .enumerate()
        .map(|(i, a)| (a.code.as_str(), i))
        .collect();
    let mut counters: BTreeMap<&str, usize> = BTreeMap::new();
    let mut out = Layout {
        assets: Vec::new(),
        points: Vec::new(),
        asset_arch: Vec::new(),
        asset_by_name: BTreeMap::new(),
        points_of_asset: Vec::new(),
    };
    for sec in &config.sections {
        for g in 0..sec.groups {
            let code = sec.archetypes[g % sec.archetypes.len()].as_str();
            let ai = arch_index[code];
            let group = format!("{} {}", sec.group_label, g + 1);
            for _ in 0..sec.assets_per_group {
                let n = counters.entry(code).or_insert(0);
                *n += 1;
                let name = format!("{code} {n}");
                let id = AssetId(out.assets.len() as u64 + 1);
                let n_points = config.archetypes[ai]
                    .points
                    .unwrap_or_else(|| rng.random_range(2..=4));
                let mut pids = Vec::new();
                let mut pidx = Vec::new();
                for &(suffix, sensor_type) in POINT_SLOTS.iter().take(n_points) {
                    let pid = PointId(out.points.len() as u64 + 1);
                    pidx.push(out.points.len());
                    pids.push(pid);
                    out.points.push(Point {
                        id: pid,
                        name: format!("{name} {suffix}"),
                        sensor_type,
                        asset_id: id,
                    });
                }
                out.asset_by_name.insert(name.clone(), out.assets.len());
                out.assets.push(Asset {
                    id,
                    path: AssetPath::new([
                        config.plant.as_str(),
                        sec.name.as_str(),
                        group.as_str(),
                        name.as_str(),
                    ])?,
                    point_ids: pids,
                    note_ids: Vec::new(),
                });
                out.asset_arch.push(ai);
                out.points_of_asset.push(pidx);
            }
        }
    }
    Ok(out)
}

fn day_to_time(start: DateTime<Utc>, day: f64) -> DateTime<Utc> {
    start + Duration::nanoseconds((day * 86_400e9).round() as i64)
}

/// Per-point health implied by the scenarios, indexed like the layout points.
fn point_health(config: &PlantConfig, lay: &Layout) -> Result<Vec<PointHealth>> {
    let mut health = vec![PointHealth::default(); lay.points.len()];
    for sc in &config.scenarios {
        let ai = *lay.asset_by_name.get(&sc.asset).ok_or_else(|| {
            Error::Config(format!("scenario references unknown asset {:?}", sc.asset))
        })?;
        let pidx = &lay.points_of_asset[ai];
        let chosen: Vec<usize> = match &sc.points {
            None => pidx.clone(),
            Some(sel) => sel
                .iter()
                .map(|&k| {
                    pidx.get(k).copied().ok_or_else(|| {
                        Error::Config(format!(
                            "scenario on {} selects point {k}, asset has {}",
                            sc.asset,
                            pidx.len()
                        ))
                    })
                })
                .collect::<Result<_>>()?,
        };
        let template = config.templates.get(sc.fault);
        let reset = sc.note.replacement.unwrap_or(template.replacement);
        for pi in chosen {
            health[pi].faults.push(FaultState {
                fault: sc.fault,
                onset_day: sc.onset_day,
                ramp_days: sc.ramp_days,
                peak_severity: sc.peak_severity,
                intermittency: sc.intermittency,
                reset_day: reset.then_some(sc.note.day),
            });
        }
    }
    Ok(health)
}

/// Daily health timelines for every point that carries a fault.
pub fn health_states(config: &PlantConfig) -> Result<Vec<HealthState>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lay = layout(config, &mut rng)?;
    let health = point_health(config, &lay)?;
    let days = config.sampling.days.ceil() as usize;
    Ok(lay
        .points
        .iter()
        .zip(&health)
        .filter(|(_, h)| !h.faults.is_empty())
        .map(|(p, h)| HealthState {
            point_id: p.id,
            timeline: (0..=days)
                .flat_map(|d| {
                    h.faults.iter().map(move |f| HealthSample {
                        day: d as f64,
                        fault: f.fault,
                        severity: f.severity(d as f64),
                        intermittency: f.intermittency,
                    })
                })
                .collect(),
        })
        .collect())
}

/// Inputs needed to synthesise one recording.
pub struct RecordingContext<'a> {
    pub id: RecordingId,
    pub point_id: PointId,
    pub sensor_type: SensorType,
    pub archetype: &'a Archetype,
    pub sampling: &'a Sampling,
    pub start: DateTime<Utc>,
    /// Recording time in days from `start`.
    pub day: f64,
}

fn gaussian(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp()
}

/// Synthesises one recording. Each fault shows with probability equal to
/// its intermittency; a shown fault adds its comb, or for cable/sensor
/// faults a low-frequency broadband disturbance.
pub fn synth_recording(
    ctx: &RecordingContext<'_>,
    health: &PointHealth,
    speed: f64,
    rng: &mut ChaCha8Rng,
) -> Recording {
    let s = ctx.sampling;
    let noise = &ctx.archetype.noise;
    let envelope = ctx.sensor_type.is_envelope();
    let len = s.spectrum_len;
    let bin_hz = s.fmax_hz / len as f64;
    let shaft_hz = speed / 60.0;
    let level = noise.level * if envelope { 0.5 } else { 1.0 };

    let mut active: Vec<(FaultType, f64)> = Vec::new();
    for f in &health.faults {
        let sev = f.severity(ctx.day);
        let shown = rng.random::<f64>() < f.intermittency;
        if sev > 0.0 && shown {
            active.push((f.fault, sev));
        }
    }

    let mut spectrum = vec![0.0f32; len];
    for (j, out) in spectrum.iter_mut().enumerate() {
        let f = j as f64 * bin_hz;
        let mut v = noise.tilt + (-f / noise.decay_hz).exp();
        for r in &noise.resonances {
            v += r.amplitude * gaussian(f, r.hz, r.width_hz);
        }
        let jitter = 1.0 + noise.jitter * rng.random_range(-1.0..=1.0);
        *out = (level * v * jitter) as f32;
    }
    let mut tones: Vec<(f64, f64)> = vec![(shaft_hz, 0.2 * level)];
    for &(fault, sev) in &active {
        let gain = fault.gain(envelope) * level * sev;
        if fault == FaultType::CableSensor {
            let u = rng.random_range(0.5..1.5);
            for (j, out) in spectrum.iter_mut().enumerate() {
                let f = j as f64 * bin_hz;
                *out += (gain * u * (0.3 + 3.0 * (-f / 15.0).exp())) as f32;
            }
            continue;
        }
        for (order, rel) in fault.comb() {
            let centre = order * shaft_hz;
            if centre >= s.fmax_hz {
                continue;
            }
            let sigma = (s.peak_rel_width * centre).max(0.6 * bin_hz);
            let amp = gain * rel;
            tones.push((centre, amp));
            let lo = ((centre - 5.0 * sigma) / bin_hz).floor().max(0.0) as usize;
            let hi = (((centre + 5.0 * sigma) / bin_hz).ceil() as usize).min(len - 1);
            for (j, out) in spectrum.iter_mut().enumerate().take(hi + 1).skip(lo) {
                *out += (amp * gaussian(j as f64 * bin_hz, centre, sigma)) as f32;
            }
        }
    }

    let normal = Normal::new(0.0, 0.3 * level).expect("positive sigma");
    let dt = s.time_series_seconds / s.time_series_len.max(1) as f64;
    let phases: Vec<f64> = tones
        .iter()
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();
    let time_series: Vec<f32> = (0..s.time_series_len)
        .map(|i| {
            let t = i as f64 * dt;
            let mut x = normal.sample(rng);
            for (&(f, a), &ph) in tones.iter().zip(&phases) {
                x += a * (2.0 * PI * f * t + ph).sin();
            }
            x as f32
        })
        .collect();

    let (trend_levels, bias_levels) = level_traces(ctx, health, level, rng);
    Recording {
        id: ctx.id,
        point_id: ctx.point_id,
        recording_date: day_to_time(ctx.start, ctx.day),
        shaft_speed: speed,
        spectrum,
        time_series,
        trend_levels,
        bias_levels,
    }
}

/// Trend and bias traces over the trailing window ending at the recording.
fn level_traces(
    ctx: &RecordingContext<'_>,
    health: &PointHealth,
    level: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<LevelSample>, Vec<LevelSample>) {
    let s = ctx.sampling;
    let step = s.level_step_hours / 24.0;
    let n = (s.level_window_days / step).floor() as usize;
    let trend_noise = Normal::new(0.0, 0.03).expect("positive sigma");
    let bias_noise = Normal::new(0.0, 0.02).expect("positive sigma");
    let mut trend = Vec::with_capacity(n + 1);
    let mut bias = Vec::with_capacity(n + 1);
    for k in (0..=n).rev() {
        let day = ctx.day - k as f64 * step;
        let time = day_to_time(ctx.start, day);
        let mut t = level * (1.0 + trend_noise.sample(rng));
        let mut b = -10.0 + bias_noise.sample(rng);
        for f in &health.faults {
            let sev = f.severity(day);
            if sev <= 0.0 {
                continue;
            }
            match f.fault {
                FaultType::CableSensor => {
                    if rng.random::<f64>() < f.intermittency {
                        b += 3.0 * sev * rng.random_range(-1.0..=1.0);
                    }
                }
                other => t += level * sev * other.gain(ctx.sensor_type.is_envelope()) * 0.05,
            }
        }
        trend.push(LevelSample { time, value: t });
        bias.push(LevelSample { time, value: b });
    }
    (trend, bias)
}

/// Generates the hierarchy, notes and recordings of a plant.
pub fn generate_plant(config: &PlantConfig) -> Result<BuildInputs> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lay = layout(config, &mut rng)?;
    let health = point_health(config, &lay)?;
    let s = &config.sampling;

    let mut assets = lay.assets.clone();
    let mut annotations = Vec::new();
    let mut note_days: Vec<Vec<f64>> = vec![Vec::new(); assets.len()];
    for sc in &config.scenarios {
        let ai = lay.asset_by_name[&sc.asset];
        let template = config.templates.get(sc.fault);
        let id = NoteId(annotations.len() as u64 + 1);
        annotations.push(Annotation {
            id,
            content: sc
                .note
                .text
                .clone()
                .unwrap_or_else(|| template.text.clone()),
            date: day_to_time(s.start, sc.note.day),
            asset_id: assets[ai].id,
            author: None,
        });
        assets[ai].note_ids.push(id);
        note_days[ai].push(sc.note.day);
    }
    if let Some(routine) = &config.routine_notes {
        if routine.texts.is_empty() {
            return Err(Error::Config("routine notes need at least one text".into()));
        }
        let faulty: BTreeSet<&str> = config.scenarios.iter().map(|s| s.asset.as_str()).collect();
        let targets: Vec<usize> = match &routine.assets {
            Some(names) => names
                .iter()
                .map(|n| {
                    lay.asset_by_name.get(n).copied().ok_or_else(|| {
                        Error::Config(format!("routine notes reference unknown asset {n:?}"))
                    })
                })
                .collect::<Result<_>>()?,
            None => (0..assets.len())
                .filter(|&ai| !faulty.contains(assets[ai].path.segments()[3].as_str()))
                .collect(),
        };
        let margin = (s.days * 0.1).min(60.0);
        for ai in targets {
            for _ in 0..routine.per_asset {
                let day = rng.random_range(margin..(s.days - margin).max(margin + 1e-9));
                let text = &routine.texts[rng.random_range(0..routine.texts.len())];
                let id = NoteId(annotations.len() as u64 + 1);
                annotations.push(Annotation {
                    id,
                    content: text.clone(),
                    date: day_to_time(s.start, day),
                    asset_id: assets[ai].id,
                    author: None,
                });
                assets[ai].note_ids.push(id);
                note_days[ai].push(day);
            }
        }
    }

    let nominal: Vec<f64> = (0..assets.len())
        .map(|_| rng.random_range(s.speed.min..=s.speed.max))
        .collect();
    let phase: Vec<f64> = (0..assets.len()).map(|_| rng.random::<f64>()).collect();

    let interval = 1.0 / s.recordings_per_day;
    let count = (s.days * s.recordings_per_day).floor() as usize;
    let mut recordings = Vec::new();
    for (pi, point) in lay.points.iter().enumerate() {
        let ai = (point.asset_id.0 - 1) as usize;
        let archetype = &config.archetypes[lay.asset_arch[ai]];
        let mut prng = ChaCha8Rng::seed_from_u64(config.seed);
        prng.set_stream(point.id.0);
        let slot_offset = (pi - lay.points_of_asset[ai][0]) as f64 * 2.0 / 1440.0;
        for k in 0..count {
            let day = (k as f64 + phase[ai]) * interval + slot_offset;
            if day >= s.days {
                break;
            }
            let covered = match s.coverage {
                Coverage::Full => true,
                Coverage::AroundNotes { before, after } => note_days[ai]
                    .iter()
                    .any(|&nd| day >= nd - before && day <= nd + after),
            };
            // Draw the speed jitter regardless of coverage so the stream
            // position depends only on the recording slot.
            let u: f64 = prng.random_range(-1.0..=1.0);
            if !covered {
                continue;
            }
            let speed = (nominal[ai] * (1.0 + s.speed_jitter * u)).clamp(s.speed.min, s.speed.max);
            let ctx = RecordingContext {
                id: RecordingId(0),
                point_id: point.id,
                sensor_type: point.sensor_type,
                archetype,
                sampling: s,
                start: s.start,
                day,
            };
            let mut slot_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
            slot_rng.set_stream(point.id.0);
            slot_rng.set_word_pos(k as u128 * (1 << 20));
            recordings.push(synth_recording(&ctx, &health[pi], speed, &mut slot_rng));
        }
    }
    for (i, r) in recordings.iter_mut().enumerate() {
        r.id = RecordingId(i as u64 + 1);
    }

    Ok(BuildInputs {
        assets,
        points: lay.points,
        annotations,
        recordings,
    })
}
