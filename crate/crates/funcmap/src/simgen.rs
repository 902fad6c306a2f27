//! Synthetic multi-region LFP corpus.
//!
//! Recordings are synthesized per channel from region-specific oscillatory
//! signatures (beta / spindle bursts, continuous gamma, HFO and slow
//! rhythms) with three levels of hierarchical variability: subject gains and
//! frequency offsets, session noise, and electrode gain/noise.
//!
//! Realizations (burst schedules and carrier phases) are drawn once per
//! subject-session-component and shared by every channel carrying that
//! component. Channels of one region therefore share their signature up to
//! gain, and regions carrying a common component (GPi and STN both express
//! beta) are coherent — which is what makes masked-region reconstruction a
//! meaningful task on this corpus. Per-channel Gaussian noise is drawn from
//! an independent substream so channel synthesis can run in parallel.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rngs::SeedStream;

pub const DEFAULT_REGIONS: [&str; 5] = ["GPi", "STN", "VO", "Motor", "VIM"];

/// Slot length for burst scheduling, seconds.
pub const BURST_SLOT_S: f64 = 1.0;
/// Burst duration (Hann envelope), seconds.
pub const BURST_LEN_S: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation spec: {0}")]
    InvalidSpec(String),
    #[error("unknown region `{0}`")]
    UnknownRegion(String),
    #[error("sampling rate {fs} Hz below Nyquist for component at {carrier} Hz")]
    BelowNyquist { fs: f64, carrier: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SimSpec {
    pub n_subjects: usize,
    pub n_sessions: usize,
    pub regions: Vec<String>,
    pub n_channels_per_region: usize,
    pub fs: f64,
    pub session_duration: f64,
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            n_subjects: 10,
            n_sessions: 2,
            regions: DEFAULT_REGIONS.iter().map(|s| s.to_string()).collect(),
            n_channels_per_region: 4,
            fs: 1000.0,
            session_duration: 120.0,
            seed: 0,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_subjects < 1 || self.n_sessions < 1 || self.n_channels_per_region < 1 {
            return Err(SimError::InvalidSpec("all counts must be >= 1".into()));
        }
        if self.regions.is_empty() {
            return Err(SimError::InvalidSpec("at least one region required".into()));
        }
        if self.session_duration < 20.0 {
            return Err(SimError::InvalidSpec(format!(
                "session_duration {} s too short; need >= 20 s",
                self.session_duration
            )));
        }
        for r in &self.regions {
            let sig = signature_for_region(r)?;
            for c in &sig.components {
                let carrier = c.kind.base_freq();
                if self.fs < 2.0 * carrier {
                    return Err(SimError::BelowNyquist { fs: self.fs, carrier });
                }
            }
        }
        Ok(())
    }

    pub fn n_channels(&self) -> usize {
        self.n_subjects * self.n_sessions * self.regions.len() * self.n_channels_per_region
    }

    pub fn samples_per_session(&self) -> usize {
        (self.session_duration * self.fs).round() as usize
    }
}

/// Oscillatory component kinds appearing in the region signature table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum ComponentKind {
    Beta,
    Spindle,
    Gamma,
    Hfo,
    Slow,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 5] = [
        ComponentKind::Beta,
        ComponentKind::Spindle,
        ComponentKind::Gamma,
        ComponentKind::Hfo,
        ComponentKind::Slow,
    ];

    pub fn base_freq(self) -> f64 {
        match self {
            ComponentKind::Beta => 20.0,
            ComponentKind::Spindle => 14.0, // midpoint of the 12-16 Hz spindle band
            ComponentKind::Gamma => 40.0,
            ComponentKind::Hfo => 150.0,
            ComponentKind::Slow => 1.0,
        }
    }

    pub fn is_burst(self) -> bool {
        matches!(self, ComponentKind::Beta | ComponentKind::Spindle)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignatureComponent {
    pub kind: ComponentKind,
}

/// Region → component mapping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionSignature {
    pub components: Vec<SignatureComponent>,
}

pub fn signature_for_region(region: &str) -> Result<RegionSignature, SimError> {
    let kinds: &[ComponentKind] = match region {
        "GPi" => &[ComponentKind::Beta],
        "STN" => &[ComponentKind::Beta, ComponentKind::Hfo],
        "VO" => &[ComponentKind::Spindle],
        "Motor" => &[ComponentKind::Gamma],
        "VIM" => &[ComponentKind::Slow],
        other => return Err(SimError::UnknownRegion(other.to_string())),
    };
    Ok(RegionSignature {
        components: kinds.iter().map(|&kind| SignatureComponent { kind }).collect(),
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SubjectParams {
    pub beta_gain: f64,
    pub beta_freq_offset: f64,
    pub beta_burst_prob: f64,
    pub spindle_gain: f64,
    pub spindle_freq_offset: f64,
    pub spindle_burst_prob: f64,
    pub gamma_gain: f64,
    pub gamma_freq_offset: f64,
    pub hfo_gain: f64,
    pub hfo_freq_offset: f64,
    pub slow_gain: f64,
    pub slow_freq_offset: f64,
    pub noise_level: f64,
}

impl SubjectParams {
    pub fn sample(rng: &mut ChaCha12Rng) -> Self {
        // Field order is fixed; changing it would change every downstream draw.
        Self {
            beta_gain: rng.random_range(0.8..1.5),
            beta_freq_offset: rng.random_range(-2.0..2.0),
            beta_burst_prob: rng.random_range(0.3..0.7),
            spindle_gain: rng.random_range(0.8..1.3),
            spindle_freq_offset: rng.random_range(-1.0..1.0),
            spindle_burst_prob: rng.random_range(0.2..0.5),
            gamma_gain: rng.random_range(0.3..0.7),
            gamma_freq_offset: rng.random_range(-5.0..5.0),
            hfo_gain: rng.random_range(0.1..0.3),
            hfo_freq_offset: rng.random_range(-10.0..10.0),
            slow_gain: rng.random_range(0.8..1.2),
            slow_freq_offset: rng.random_range(-0.3..0.3),
            noise_level: rng.random_range(0.3..0.4),
        }
    }

    /// All component gains zero, all offsets zero, given noise level.
    pub fn silent(noise_level: f64) -> Self {
        Self {
            beta_gain: 0.0,
            beta_freq_offset: 0.0,
            beta_burst_prob: 0.5,
            spindle_gain: 0.0,
            spindle_freq_offset: 0.0,
            spindle_burst_prob: 0.5,
            gamma_gain: 0.0,
            gamma_freq_offset: 0.0,
            hfo_gain: 0.0,
            hfo_freq_offset: 0.0,
            slow_gain: 0.0,
            slow_freq_offset: 0.0,
            noise_level,
        }
    }

    /// Interval midpoints from the sampling table.
    pub fn midpoints() -> Self {
        Self {
            beta_gain: 1.15,
            beta_freq_offset: 0.0,
            beta_burst_prob: 0.5,
            spindle_gain: 1.05,
            spindle_freq_offset: 0.0,
            spindle_burst_prob: 0.35,
            gamma_gain: 0.5,
            gamma_freq_offset: 0.0,
            hfo_gain: 0.2,
            hfo_freq_offset: 0.0,
            slow_gain: 1.0,
            slow_freq_offset: 0.0,
            noise_level: 0.35,
        }
    }

    pub fn gain(&self, kind: ComponentKind) -> f64 {
        match kind {
            ComponentKind::Beta => self.beta_gain,
            ComponentKind::Spindle => self.spindle_gain,
            ComponentKind::Gamma => self.gamma_gain,
            ComponentKind::Hfo => self.hfo_gain,
            ComponentKind::Slow => self.slow_gain,
        }
    }

    pub fn freq_offset(&self, kind: ComponentKind) -> f64 {
        match kind {
            ComponentKind::Beta => self.beta_freq_offset,
            ComponentKind::Spindle => self.spindle_freq_offset,
            ComponentKind::Gamma => self.gamma_freq_offset,
            ComponentKind::Hfo => self.hfo_freq_offset,
            ComponentKind::Slow => self.slow_freq_offset,
        }
    }

    pub fn burst_prob(&self, kind: ComponentKind) -> f64 {
        match kind {
            ComponentKind::Beta => self.beta_burst_prob,
            ComponentKind::Spindle => self.spindle_burst_prob,
            _ => 1.0, // continuous kinds are always on
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SessionParams {
    pub session_noise: f64,
}

impl SessionParams {
    pub fn sample(rng: &mut ChaCha12Rng) -> Self {
        Self { session_noise: rng.random_range(0.05..0.15) }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ElectrodeParams {
    pub gain: f64,
    pub electrode_noise: f64,
}

impl ElectrodeParams {
    pub fn sample(rng: &mut ChaCha12Rng) -> Self {
        Self {
            gain: rng.random_range(0.9..1.1),
            electrode_noise: rng.random_range(0.03..0.1),
        }
    }

    pub fn unit() -> Self {
        Self { gain: 1.0, electrode_noise: 0.0 }
    }
}

/// Full parameter hierarchy. Electrodes within a session are ordered by
/// (region index, channel index).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamHierarchy {
    pub subjects: Vec<SubjectParams>,
    /// `[subject][session]`
    pub sessions: Vec<Vec<SessionParams>>,
    /// `[subject][session][region * n_channels + channel]`
    pub electrodes: Vec<Vec<Vec<ElectrodeParams>>>,
}

/// Draw the parameter hierarchy in the fixed order: subjects, then sessions
/// within subject, then electrodes within session.
pub fn sample_param_hierarchy(spec: &SimSpec, rng: &mut ChaCha12Rng) -> ParamHierarchy {
    let mut subjects = Vec::with_capacity(spec.n_subjects);
    let mut sessions = Vec::with_capacity(spec.n_subjects);
    let mut electrodes = Vec::with_capacity(spec.n_subjects);
    let per_session = spec.regions.len() * spec.n_channels_per_region;
    for _ in 0..spec.n_subjects {
        subjects.push(SubjectParams::sample(rng));
        let mut subj_sessions = Vec::with_capacity(spec.n_sessions);
        let mut subj_elec = Vec::with_capacity(spec.n_sessions);
        for _ in 0..spec.n_sessions {
            subj_sessions.push(SessionParams::sample(rng));
            subj_elec.push((0..per_session).map(|_| ElectrodeParams::sample(rng)).collect());
        }
        sessions.push(subj_sessions);
        electrodes.push(subj_elec);
    }
    ParamHierarchy { subjects, sessions, electrodes }
}

/// One scheduled burst: onset in seconds from session start.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct BurstEvent {
    pub onset_s: f64,
    pub len_s: f64,
}

/// Realization of one component within one subject-session: the carrier
/// phase and, for burst kinds, the scheduled burst events. Shared by every
/// channel that carries the component.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentRealization {
    pub kind: ComponentKind,
    pub phase: f64,
    pub bursts: Vec<BurstEvent>,
}

pub fn draw_realization(
    kind: ComponentKind,
    subj: &SubjectParams,
    duration: f64,
    rng: &mut ChaCha12Rng,
) -> ComponentRealization {
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut bursts = Vec::new();
    if kind.is_burst() {
        let prob = subj.burst_prob(kind);
        let n_slots = (duration / BURST_SLOT_S).floor() as usize;
        for slot in 0..n_slots {
            // Two draws per slot regardless of occupancy, so burst_prob does
            // not shift the positions of later slots' draws.
            let hit: f64 = rng.random_range(0.0..1.0);
            let onset_frac: f64 = rng.random_range(0.0..1.0);
            if hit < prob {
                let onset = slot as f64 * BURST_SLOT_S + onset_frac * (BURST_SLOT_S - BURST_LEN_S);
                bursts.push(BurstEvent { onset_s: onset, len_s: BURST_LEN_S });
            }
        }
    }
    ComponentRealization { kind, phase, bursts }
}

/// All component realizations of one subject-session, keyed by kind.
pub type SessionRealizations = BTreeMap<ComponentKind, ComponentRealization>;

pub fn draw_session_realizations(
    subj: &SubjectParams,
    duration: f64,
    rng: &mut ChaCha12Rng,
) -> SessionRealizations {
    ComponentKind::ALL
        .iter()
        .map(|&kind| (kind, draw_realization(kind, subj, duration, rng)))
        .collect()
}

/// Render one component into `out` (unit electrode gain; caller scales).
fn render_component(
    out: &mut [f64],
    real: &ComponentRealization,
    subj: &SubjectParams,
    fs: f64,
) {
    let kind = real.kind;
    let amp = subj.gain(kind);
    if amp == 0.0 {
        return;
    }
    let freq = kind.base_freq() + subj.freq_offset(kind);
    let w = std::f64::consts::TAU * freq / fs;
    if kind.is_burst() {
        for b in &real.bursts {
            let start = (b.onset_s * fs).round() as usize;
            let len = (b.len_s * fs).round() as usize;
            for i in 0..len {
                let t = start + i;
                if t >= out.len() {
                    break;
                }
                // Hann envelope over the burst.
                let env = 0.5
                    - 0.5 * (std::f64::consts::TAU * i as f64 / (len.max(2) - 1) as f64).cos();
                out[t] += amp * env * (w * t as f64 + real.phase).sin();
            }
        }
    } else {
        for (t, v) in out.iter_mut().enumerate() {
            *v += amp * (w * t as f64 + real.phase).sin();
        }
    }
}

/// Synthesize one channel: signature components scaled by the electrode
/// gain, plus Gaussian noise with variance summed over the three hierarchy
/// levels. `noise_rng` is the channel's private substream.
pub fn synth_region_signal(
    signature: &RegionSignature,
    n_samples: usize,
    fs: f64,
    subj: &SubjectParams,
    sess: &SessionParams,
    elec: &ElectrodeParams,
    realizations: &SessionRealizations,
    noise_rng: &mut ChaCha12Rng,
) -> Result<Vec<f64>, SimError> {
    for c in &signature.components {
        let carrier = c.kind.base_freq() + subj.freq_offset(c.kind);
        if fs < 2.0 * carrier {
            return Err(SimError::BelowNyquist { fs, carrier });
        }
    }
    let mut x = vec![0.0f64; n_samples];
    for c in &signature.components {
        let real = &realizations[&c.kind];
        render_component(&mut x, real, subj, fs);
    }
    if elec.gain != 1.0 {
        for v in x.iter_mut() {
            *v *= elec.gain;
        }
    }
    let var = subj.noise_level.powi(2) + sess.session_noise.powi(2) + elec.electrode_noise.powi(2);
    if var > 0.0 {
        let sd = var.sqrt();
        for v in x.iter_mut() {
            let n: f64 = StandardNormal.sample(noise_rng);
            *v += sd * n;
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChannelMeta {
    pub subject: usize,
    pub session: usize,
    pub region: String,
    pub channel: usize,
    pub coordinate: Option<[f64; 3]>,
}

impl ChannelMeta {
    pub fn file_name(&self) -> String {
        format!(
            "s{}_r{}_c{}_sess{}.f32",
            self.subject, self.region, self.channel, self.session
        )
    }
}

#[derive(Debug, Clone)]
pub struct Channel {
    pub meta: ChannelMeta,
    pub samples: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct SimDataset {
    pub spec: SimSpec,
    pub params: ParamHierarchy,
    /// `[subject][session]` realizations, in spec order.
    pub realizations: Vec<Vec<SessionRealizations>>,
    pub channels: Vec<Channel>,
}

impl SimDataset {
    pub fn channels_of_session(&self, subject: usize, session: usize) -> Vec<&Channel> {
        self.channels
            .iter()
            .filter(|c| c.meta.subject == subject && c.meta.session == session)
            .collect()
    }
}

/// Generate the full corpus. Bit-identical for equal specs.
pub fn generate_dataset(spec: &SimSpec) -> Result<SimDataset, SimError> {
    spec.validate()?;
    let seeds = SeedStream::new(spec.seed);
    let mut param_rng = seeds.derive("simgen/params");
    let params = sample_param_hierarchy(spec, &mut param_rng);

    let mut realizations = Vec::with_capacity(spec.n_subjects);
    for subject in 0..spec.n_subjects {
        let mut per_session = Vec::with_capacity(spec.n_sessions);
        for session in 0..spec.n_sessions {
            let mut rng = seeds
                .derive_indexed("simgen/signature", (subject * spec.n_sessions + session) as u64);
            per_session.push(draw_session_realizations(
                &params.subjects[subject],
                spec.session_duration,
                &mut rng,
            ));
        }
        realizations.push(per_session);
    }

    let n_samples = spec.samples_per_session();
    let mut jobs = Vec::new();
    for subject in 0..spec.n_subjects {
        for session in 0..spec.n_sessions {
            for (r_idx, region) in spec.regions.iter().enumerate() {
                for channel in 0..spec.n_channels_per_region {
                    jobs.push((subject, session, r_idx, region.clone(), channel));
                }
            }
        }
    }
    let channels: Result<Vec<Channel>, SimError> = jobs
        .par_iter()
        .enumerate()
        .map(|(flat_idx, (subject, session, r_idx, region, channel))| {
            let signature = signature_for_region(region)?;
            let subj = &params.subjects[*subject];
            let sess = &params.sessions[*subject][*session];
            let elec = &params.electrodes[*subject][*session]
                [r_idx * spec.n_channels_per_region + channel];
            let mut noise_rng = seeds.derive_indexed("simgen/noise", flat_idx as u64);
            let x = synth_region_signal(
                &signature,
                n_samples,
                spec.fs,
                subj,
                sess,
                elec,
                &realizations[*subject][*session],
                &mut noise_rng,
            )?;
            Ok(Channel {
                meta: ChannelMeta {
                    subject: *subject,
                    session: *session,
                    region: region.clone(),
                    channel: *channel,
                    coordinate: None,
                },
                samples: x.iter().map(|&v| v as f32).collect(),
            })
        })
        .collect();

    Ok(SimDataset { spec: spec.clone(), params, realizations, channels: channels? })
}

/// Default synthetic region centers, spaced well apart (min pairwise
/// distance 8 units, i.e. >= 4x the default spread of 1).
pub fn default_region_centers(regions: &[String]) -> BTreeMap<String, [f64; 3]> {
    let anchor = [
        [0.0, 0.0, 0.0],
        [8.0, 0.0, 0.0],
        [0.0, 8.0, 0.0],
        [0.0, 0.0, 8.0],
        [8.0, 8.0, 0.0],
        [8.0, 0.0, 8.0],
        [0.0, 8.0, 8.0],
        [8.0, 8.0, 8.0],
    ];
    regions
        .iter()
        .enumerate()
        .map(|(i, r)| (r.clone(), anchor[i % anchor.len()]))
        .collect()
}

/// Assign a synthetic 3-D coordinate to every channel: the region center
/// plus isotropic Gaussian jitter (std `spread`). A fraction `overlap` of
/// each session-region group is additionally displaced halfway toward the
/// nearest neighboring region center, modeling imprecise localization.
pub fn assign_synthetic_coordinates(
    dataset: &mut SimDataset,
    centers: &BTreeMap<String, [f64; 3]>,
    spread: f64,
    overlap: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(), SimError> {
    assert!(spread >= 0.0, "spread must be nonnegative");
    assert!((0.0..=1.0).contains(&overlap), "overlap must lie in [0, 1]");
    for region in &dataset.spec.regions {
        if !centers.contains_key(region) {
            return Err(SimError::UnknownRegion(region.clone()));
        }
    }
    // Nearest neighboring center per region (deterministic).
    let mut nearest: BTreeMap<String, [f64; 3]> = BTreeMap::new();
    for (r, c) in centers {
        let mut best: Option<(f64, [f64; 3])> = None;
        for (r2, c2) in centers {
            if r2 == r {
                continue;
            }
            let d2: f64 = c.iter().zip(c2).map(|(a, b)| (a - b).powi(2)).sum();
            if best.map_or(true, |(bd, _)| d2 < bd) {
                best = Some((d2, *c2));
            }
        }
        nearest.insert(r.clone(), best.map(|(_, c2)| c2).unwrap_or(*c));
    }

    let spec = dataset.spec.clone();
    let n_overlap = (overlap * spec.n_channels_per_region as f64).round() as usize;
    for subject in 0..spec.n_subjects {
        for session in 0..spec.n_sessions {
            for region in &spec.regions {
                let center = centers[region];
                let neighbor = nearest[region];
                // Jitter draws first, then the displacement subset, so the
                // stream layout does not depend on `overlap`.
                let mut coords: Vec<[f64; 3]> = (0..spec.n_channels_per_region)
                    .map(|_| {
                        let mut p = center;
                        for v in p.iter_mut() {
                            let g: f64 = StandardNormal.sample(rng);
                            *v += spread * g;
                        }
                        p
                    })
                    .collect();
                let mut order: Vec<usize> = (0..spec.n_channels_per_region).collect();
                for i in (1..order.len()).rev() {
                    let j = rng.random_range(0..=i);
                    order.swap(i, j);
                }
                for &idx in order.iter().take(n_overlap) {
                    for (axis, p) in coords[idx].iter_mut().enumerate() {
                        *p += 0.5 * (neighbor[axis] - center[axis]);
                    }
                }
                for (channel, coord) in coords.into_iter().enumerate() {
                    let ch = dataset
                        .channels
                        .iter_mut()
                        .find(|c| {
                            c.meta.subject == subject
                                && c.meta.session == session
                                && &c.meta.region == region
                                && c.meta.channel == channel
                        })
                        .expect("channel present for coordinate assignment");
                    ch.meta.coordinate = Some(coord);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::welch_psd;

    fn small_spec() -> SimSpec {
        SimSpec {
            n_subjects: 2,
            n_sessions: 1,
            session_duration: 30.0,
            seed: 42,
            ..Default::default()
        }
    }

    #[test]
    fn param_hierarchy_counts_and_ranges() {
        let spec = SimSpec { seed: 42, ..Default::default() };
        let mut rng = SeedStream::new(spec.seed).derive("simgen/params");
        let h = sample_param_hierarchy(&spec, &mut rng);
        assert_eq!(h.subjects.len(), 10);
        assert_eq!(h.sessions.iter().map(|s| s.len()).sum::<usize>(), 20);
        let n_elec: usize = h.electrodes.iter().flatten().map(|e| e.len()).sum();
        assert_eq!(n_elec, 400);
        for s in &h.subjects {
            assert!((0.8..1.5).contains(&s.beta_gain));
            assert!((0.3..0.4).contains(&s.noise_level));
            assert!((-2.0..2.0).contains(&s.beta_freq_offset));
        }
        for e in h.electrodes.iter().flatten().flatten() {
            assert!((0.9..1.1).contains(&e.gain));
            assert!((0.03..0.1).contains(&e.electrode_noise));
        }
    }

    #[test]
    fn param_hierarchy_deterministic() {
        let spec = SimSpec { seed: 42, ..Default::default() };
        let mut r1 = SeedStream::new(spec.seed).derive("simgen/params");
        let mut r2 = SeedStream::new(spec.seed).derive("simgen/params");
        let a = sample_param_hierarchy(&spec, &mut r1);
        let b = sample_param_hierarchy(&spec, &mut r2);
        assert_eq!(a.subjects, b.subjects);
        assert_eq!(a.sessions, b.sessions);
        assert_eq!(a.electrodes, b.electrodes);
    }

    #[test]
    fn zero_gains_zero_noise_is_silent() {
        let subj = SubjectParams::silent(0.0);
        let sess = SessionParams { session_noise: 0.0 };
        let elec = ElectrodeParams::unit();
        let mut rng = SeedStream::new(1).derive("t");
        let reals = draw_session_realizations(&subj, 30.0, &mut rng.clone());
        let x = synth_region_signal(
            &signature_for_region("GPi").unwrap(),
            30_000,
            1000.0,
            &subj,
            &sess,
            &elec,
            &reals,
            &mut rng,
        )
        .unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn burst_prob_extremes() {
        let mut subj = SubjectParams::midpoints();
        subj.beta_burst_prob = 1.0;
        let mut rng = SeedStream::new(7).derive("t");
        let real = draw_realization(ComponentKind::Beta, &subj, 30.0, &mut rng);
        assert_eq!(real.bursts.len(), 30, "every slot bursts at prob 1");
        subj.beta_burst_prob = 0.0;
        let mut rng = SeedStream::new(7).derive("t");
        let real = draw_realization(ComponentKind::Beta, &subj, 30.0, &mut rng);
        assert!(real.bursts.is_empty(), "no bursts at prob 0");
    }

    #[test]
    fn motor_psd_peak_near_gamma() {
        let subj = SubjectParams::midpoints();
        let sess = SessionParams { session_noise: 0.1 };
        let elec = ElectrodeParams::unit();
        let seeds = SeedStream::new(9);
        let reals = draw_session_realizations(&subj, 60.0, &mut seeds.derive("sig"));
        let x = synth_region_signal(
            &signature_for_region("Motor").unwrap(),
            60_000,
            1000.0,
            &subj,
            &sess,
            &elec,
            &reals,
            &mut seeds.derive("noise"),
        )
        .unwrap();
        let psd = welch_psd(&x, 1000.0, 1000);
        let peak = psd.peak_freq_in(5.0, 495.0);
        let expect = 40.0 + subj.gamma_freq_offset;
        assert!((peak - expect).abs() <= 5.0, "peak {peak} vs {expect}");
    }

    #[test]
    fn nyquist_rejected() {
        let subj = SubjectParams::midpoints();
        let sess = SessionParams { session_noise: 0.1 };
        let elec = ElectrodeParams::unit();
        let mut rng = SeedStream::new(1).derive("t");
        let reals = draw_session_realizations(&subj, 30.0, &mut rng.clone());
        let err = synth_region_signal(
            &signature_for_region("STN").unwrap(),
            30_000,
            250.0, // below 2 x 150 Hz
            &subj,
            &sess,
            &elec,
            &reals,
            &mut rng,
        );
        assert!(matches!(err, Err(SimError::BelowNyquist { .. })));
    }

    #[test]
    fn dataset_shapes_and_determinism() {
        let spec = small_spec();
        let a = generate_dataset(&spec).unwrap();
        assert_eq!(a.channels.len(), spec.n_channels());
        assert!(a.channels.iter().all(|c| c.samples.len() == spec.samples_per_session()));
        let b = generate_dataset(&spec).unwrap();
        for (ca, cb) in a.channels.iter().zip(&b.channels) {
            assert_eq!(ca.meta, cb.meta);
            assert_eq!(ca.samples, cb.samples);
        }
        // Different seed: same shapes, different waveforms.
        let c = generate_dataset(&SimSpec { seed: 43, ..spec.clone() }).unwrap();
        assert_eq!(c.channels.len(), a.channels.len());
        assert!(c.channels[0].samples != a.channels[0].samples);
    }

    #[test]
    fn label_coverage() {
        let spec = small_spec();
        let ds = generate_dataset(&spec).unwrap();
        for region in &spec.regions {
            let n = ds.channels.iter().filter(|c| &c.meta.region == region).count();
            assert_eq!(n, spec.n_subjects * spec.n_sessions * spec.n_channels_per_region);
        }
    }

    #[test]
    fn stn_has_beta_and_hfo_mass() {
        let spec = small_spec();
        let ds = generate_dataset(&spec).unwrap();
        for ch in ds.channels.iter().filter(|c| c.meta.region == "STN") {
            let x: Vec<f64> = ch.samples.iter().map(|&v| v as f64).collect();
            let psd = welch_psd(&x, spec.fs, 1000);
            let beta = psd.band_power(16.0, 24.0);
            let hfo = psd.band_power(138.0, 162.0);
            let floor = psd.band_power(60.0, 130.0) / 70.0 * 8.0; // same-width noise band
            assert!(beta > 2.0 * floor, "beta {beta} floor {floor}");
            assert!(hfo > 2.0 * floor, "hfo {hfo} floor {floor}");
        }
    }

    #[test]
    fn noise_composition_variance() {
        let subj = SubjectParams::silent(0.35);
        let sess = SessionParams { session_noise: 0.1 };
        let elec = ElectrodeParams { gain: 1.0, electrode_noise: 0.06 };
        let seeds = SeedStream::new(3);
        let reals = draw_session_realizations(&subj, 60.0, &mut seeds.derive("sig"));
        let x = synth_region_signal(
            &signature_for_region("GPi").unwrap(),
            60_000,
            1000.0,
            &subj,
            &sess,
            &elec,
            &reals,
            &mut seeds.derive("noise"),
        )
        .unwrap();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
        let expect = 0.35f64.powi(2) + 0.1f64.powi(2) + 0.06f64.powi(2);
        assert!((var - expect).abs() / expect < 0.05, "var {var} expect {expect}");
    }

    #[test]
    fn shared_component_coherence() {
        // GPi and STN channels of one session share the beta realization:
        // band-limited content must correlate strongly across the regions.
        let spec = small_spec();
        let ds = generate_dataset(&spec).unwrap();
        let gpi = ds
            .channels
            .iter()
            .find(|c| c.meta.region == "GPi" && c.meta.subject == 0)
            .unwrap();
        let stn = ds
            .channels
            .iter()
            .find(|c| c.meta.region == "STN" && c.meta.subject == 0)
            .unwrap();
        let a: Vec<f64> = gpi.samples.iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = stn.samples.iter().map(|&v| v as f64).collect();
        let ma = a.iter().sum::<f64>() / a.len() as f64;
        let mb = b.iter().sum::<f64>() / b.len() as f64;
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        let r = cov / (va.sqrt() * vb.sqrt());
        assert!(r > 0.1, "cross-region beta coherence too weak: r = {r}");
    }

    #[test]
    fn coordinates_zero_spread_zero_overlap() {
        let spec = small_spec();
        let mut ds = generate_dataset(&spec).unwrap();
        let centers = default_region_centers(&spec.regions);
        let mut rng = SeedStream::new(spec.seed).derive("coords");
        assign_synthetic_coordinates(&mut ds, &centers, 0.0, 0.0, &mut rng).unwrap();
        for ch in &ds.channels {
            assert_eq!(ch.meta.coordinate.unwrap(), centers[&ch.meta.region]);
        }
    }

    #[test]
    fn coordinates_full_overlap_confuses_nearest_center() {
        let spec = small_spec();
        let mut ds = generate_dataset(&spec).unwrap();
        let centers = default_region_centers(&spec.regions);
        let mut rng = SeedStream::new(spec.seed).derive("coords");
        assign_synthetic_coordinates(&mut ds, &centers, 0.5, 1.0, &mut rng).unwrap();
        let mut correct = 0usize;
        for ch in &ds.channels {
            let p = ch.meta.coordinate.unwrap();
            let nearest = centers
                .iter()
                .min_by(|(_, a), (_, b)| {
                    let da: f64 = p.iter().zip(*a).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = p.iter().zip(*b).map(|(x, y)| (x - y).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(r, _)| r.clone())
                .unwrap();
            if nearest == ch.meta.region {
                correct += 1;
            }
        }
        assert!(
            (correct as f64) < ds.channels.len() as f64,
            "nearest-center accuracy should drop below 100%"
        );
    }

    #[test]
    fn coordinates_deterministic() {
        let spec = small_spec();
        let centers = default_region_centers(&spec.regions);
        let mut a = generate_dataset(&spec).unwrap();
        let mut b = generate_dataset(&spec).unwrap();
        let mut r1 = SeedStream::new(spec.seed).derive("coords");
        let mut r2 = SeedStream::new(spec.seed).derive("coords");
        assign_synthetic_coordinates(&mut a, &centers, 0.3, 0.5, &mut r1).unwrap();
        assign_synthetic_coordinates(&mut b, &centers, 0.3, 0.5, &mut r2).unwrap();
        for (ca, cb) in a.channels.iter().zip(&b.channels) {
            assert_eq!(ca.meta.coordinate, cb.meta.coordinate);
        }
    }
}
