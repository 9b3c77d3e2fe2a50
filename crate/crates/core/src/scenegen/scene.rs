use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::geometry::{classify_position, Region, DEFAULT_ROI_ANGLE_DEG};
use crate::dsp::{channel_average, fft_convolve_many, AudioBuffer, MultichannelBuffer};
use crate::error::{Error, Result};
use crate::roomsim::{simulate_rir, ArraySpec, Position, RirOptions, RoomSpec};

pub const MAX_ATTEMPTS: usize = 10_000;
pub const MIN_ARRAY_WALL_DISTANCE: f64 = 2.0;
pub const MIN_SOURCE_ARRAY_DISTANCE: f64 = 0.5;
pub const MIN_SOURCE_WALL_DISTANCE: f64 = 0.1;
/// Peak ceiling applied after level normalization.
pub const PEAK_LIMIT: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneMode {
    Simple,
    Complex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SirDraw {
    /// Uniform on `[lo, hi]` dB.
    Uniform(f64, f64),
    Fixed(f64),
    /// Uniform choice among the listed values.
    OneOf(Vec<f64>),
}

/// What to draw for one scene. Built from a [`SceneMode`] and then adjusted
/// by the scenario presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecipe {
    /// Inclusive range of target counts.
    pub targets: (usize, usize),
    pub interferers: (usize, usize),
    pub noise: bool,
    pub sir: SirDraw,
    pub roi_angle_deg: f64,
}

impl SceneRecipe {
    pub fn from_mode(mode: SceneMode) -> Self {
        let counts = match mode {
            SceneMode::Simple => (1, 1),
            SceneMode::Complex => (1, 4),
        };
        Self {
            targets: counts,
            interferers: counts,
            noise: true,
            sir: SirDraw::Uniform(0.0, 10.0),
            roi_angle_deg: DEFAULT_ROI_ANGLE_DEG,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub room: RoomSpec,
    pub array: ArraySpec,
    pub roi_angle_deg: f64,
    pub targets: Vec<Position>,
    pub interferers: Vec<Position>,
    pub noise_pos: Option<Position>,
    pub sir_db: f64,
    pub snr_db: Option<f64>,
    pub level_dbfs: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn num_sources(&self) -> usize {
        self.targets.len() + self.interferers.len() + usize::from(self.noise_pos.is_some())
    }

    /// Checks the placement invariants every sampled scene satisfies.
    pub fn validate(&self) -> Result<()> {
        let room = &self.room;
        let center = self.array.center;
        if room.side_wall_distance(&center) < MIN_ARRAY_WALL_DISTANCE - 1e-9 {
            return Err(Error::Geometry(format!("array {center:?} closer than 2 m to a wall")));
        }
        if !(1..=4).contains(&self.targets.len()) || !(1..=4).contains(&self.interferers.len()) {
            return Err(Error::Geometry(format!(
                "source counts {} / {} outside 1..=4",
                self.targets.len(),
                self.interferers.len()
            )));
        }
        let all = self.targets.iter().chain(&self.interferers).chain(self.noise_pos.iter());
        for p in all {
            if (p[2] - center[2]).abs() > 1e-9 {
                return Err(Error::Geometry(format!("source {p:?} not at array height")));
            }
            if !room.contains(p) {
                return Err(Error::Geometry(format!("source {p:?} outside the room")));
            }
        }
        for p in &self.targets {
            let region = classify_position(&self.array, self.roi_angle_deg, p)?;
            if region != Region::InsideRoi {
                return Err(Error::Geometry(format!("target {p:?} is {region:?}")));
            }
        }
        for p in &self.interferers {
            let region = classify_position(&self.array, self.roi_angle_deg, p)?;
            if region != Region::Outside {
                return Err(Error::Geometry(format!("interferer {p:?} is {region:?}")));
            }
        }
        Ok(())
    }
}

fn draw_position<R: Rng + ?Sized>(
    rng: &mut R,
    room: &RoomSpec,
    array: &ArraySpec,
    roi_angle_deg: f64,
    accept: impl Fn(Region) -> bool,
) -> Result<Position> {
    let m = MIN_SOURCE_WALL_DISTANCE;
    for _ in 0..MAX_ATTEMPTS {
        let p = [
            rng.random_range(m..room.dims[0] - m),
            rng.random_range(m..room.dims[1] - m),
            array.center[2],
        ];
        let dist = (p[0] - array.center[0]).hypot(p[1] - array.center[1]);
        if dist < MIN_SOURCE_ARRAY_DISTANCE {
            continue;
        }
        if accept(classify_position(array, roi_angle_deg, &p)?) {
            return Ok(p);
        }
    }
    Err(Error::RejectionExhausted(MAX_ATTEMPTS))
}

/// Draws a room, an array pose, and source placements for one scene.
pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R, recipe: &SceneRecipe, seed: u64) -> Result<SceneSpec> {
    let dims = [
        rng.random_range(4.0..=8.0),
        rng.random_range(4.0..=8.0),
        rng.random_range(2.0..=4.0),
    ];
    let t60 = rng.random_range(0.25..=0.7);
    let room = RoomSpec::from_t60(dims, t60)?;
    sample_scene_in_room(rng, recipe, room, seed)
}

/// Like [`sample_scene`] with the room fixed by the caller.
pub fn sample_scene_in_room<R: Rng + ?Sized>(
    rng: &mut R,
    recipe: &SceneRecipe,
    room: RoomSpec,
    seed: u64,
) -> Result<SceneSpec> {
    let w = MIN_ARRAY_WALL_DISTANCE;
    if room.dims[0] < 2.0 * w || room.dims[1] < 2.0 * w {
        return Err(Error::Geometry(format!("room {:?} too small for the array", room.dims)));
    }
    let center = [
        rng.random_range(w..=room.dims[0] - w),
        rng.random_range(w..=room.dims[1] - w),
        room.dims[2] / 2.0,
    ];
    let array = ArraySpec::horizontal(center, rng.random_range(0.0..2.0 * std::f64::consts::PI));

    let n_targets = rng.random_range(recipe.targets.0..=recipe.targets.1);
    let n_interferers = rng.random_range(recipe.interferers.0..=recipe.interferers.1);
    let alpha = recipe.roi_angle_deg;
    let targets = (0..n_targets)
        .map(|_| draw_position(rng, &room, &array, alpha, |r| r == Region::InsideRoi))
        .collect::<Result<Vec<_>>>()?;
    let interferers = (0..n_interferers)
        .map(|_| draw_position(rng, &room, &array, alpha, |r| r == Region::Outside))
        .collect::<Result<Vec<_>>>()?;
    let noise_pos = if recipe.noise {
        Some(draw_position(rng, &room, &array, alpha, |_| true)?)
    } else {
        None
    };

    let sir_db = match &recipe.sir {
        SirDraw::Uniform(lo, hi) => rng.random_range(*lo..=*hi),
        SirDraw::Fixed(v) => *v,
        SirDraw::OneOf(values) => values[rng.random_range(0..values.len())],
    };
    let snr_db = if recipe.noise {
        Some(Normal::new(7.0, 3.0).expect("valid normal").sample(rng))
    } else {
        None
    };
    let level_dbfs = Normal::new(-28.0, 10.0).expect("valid normal").sample(rng);

    Ok(SceneSpec {
        room,
        array,
        roi_angle_deg: alpha,
        targets,
        interferers,
        noise_pos,
        sir_db,
        snr_db,
        level_dbfs,
        seed,
    })
}

/// Dry (anechoic, unscaled) source signals for one scene.
#[derive(Clone, Debug)]
pub struct DrySources {
    pub targets: Vec<AudioBuffer>,
    pub interferers: Vec<AudioBuffer>,
    pub noise: Option<AudioBuffer>,
}

/// Rendered stems. `y = t + k + n` holds per sample and channel.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureClip {
    pub t: MultichannelBuffer,
    pub k: MultichannelBuffer,
    pub n: MultichannelBuffer,
    pub y: MultichannelBuffer,
    pub t_phi: AudioBuffer,
    pub y_phi: AudioBuffer,
    pub interference_gain: f64,
    pub noise_gain: f64,
    pub output_gain: f64,
    pub achieved_level_dbfs: f64,
    pub level_clamped: bool,
}

impl MixtureClip {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

type Stem = [Vec<f64>; 2];

fn render_source(scene: &SceneSpec, pos: &Position, dry: &AudioBuffer, len: usize) -> Result<Stem> {
    let opts = RirOptions::for_room(&scene.room);
    let mics = scene.array.mic_positions();
    let rirs = mics
        .iter()
        .map(|mic| simulate_rir(&scene.room, pos, mic, opts))
        .collect::<Result<Vec<_>>>()?;
    let mut padded = dry.samples().to_vec();
    padded.resize(len, 0.0);
    let kernels: Vec<&[f32]> = rirs.iter().map(|r| r.taps.as_slice()).collect();
    let wet = fft_convolve_many(&padded, &kernels)?;
    let mut out: Stem = [vec![0.0; len], vec![0.0; len]];
    for (o, w) in out.iter_mut().zip(wet) {
        for (d, s) in o.iter_mut().zip(w) {
            *d = s as f64;
        }
    }
    Ok(out)
}

fn render_group(scene: &SceneSpec, positions: &[Position], dry: &[AudioBuffer], len: usize) -> Result<Stem> {
    let mut acc: Stem = [vec![0.0; len], vec![0.0; len]];
    for (p, d) in positions.iter().zip(dry) {
        let stem = render_source(scene, p, d, len)?;
        for (a, s) in acc.iter_mut().zip(&stem) {
            for (x, y) in a.iter_mut().zip(s) {
                *x += y;
            }
        }
    }
    Ok(acc)
}

fn phi_energy(stem: &Stem) -> f64 {
    stem[0].iter().zip(&stem[1]).map(|(a, b)| (0.5 * (a + b)).powi(2)).sum()
}

fn to_db(power_ratio: f64) -> f64 {
    10.0 * power_ratio.log10()
}

/// RMS level in dB re full scale (amplitude 1.0).
pub fn rms_dbfs(x: &[f32]) -> f64 {
    let ms = x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64;
    to_db(ms)
}

/// Reverberates every source, mixes at the scene's SIR and SNR (measured on
/// channel-averaged signals), and applies one common gain so the mixture
/// average reaches `level_dbfs`, backing off to a 0.99 peak if needed.
pub fn render_scene(scene: &SceneSpec, dry: &DrySources, len: usize) -> Result<MixtureClip> {
    if dry.targets.len() != scene.targets.len() || dry.interferers.len() != scene.interferers.len() {
        return Err(Error::InvalidArgument(format!(
            "scene has {} targets and {} interferers, got {} and {} dry signals",
            scene.targets.len(),
            scene.interferers.len(),
            dry.targets.len(),
            dry.interferers.len()
        )));
    }
    if scene.noise_pos.is_some() != dry.noise.is_some() {
        return Err(Error::InvalidArgument("noise source and noise signal must both be present or absent".into()));
    }
    if len == 0 {
        return Err(Error::EmptyInput("clip length"));
    }

    let t = render_group(scene, &scene.targets, &dry.targets, len)?;
    let k = render_group(scene, &scene.interferers, &dry.interferers, len)?;
    let n = match (&scene.noise_pos, &dry.noise) {
        (Some(p), Some(d)) => render_source(scene, p, d, len)?,
        _ => [vec![0.0; len], vec![0.0; len]],
    };

    let e_t = phi_energy(&t);
    let e_k = phi_energy(&k);
    if e_t <= 0.0 {
        return Err(Error::SilentTarget);
    }
    if e_k <= 0.0 {
        return Err(Error::InvalidArgument("interference is silent".into()));
    }
    let g_k = mixing_gain(e_t, e_k, scene.sir_db);
    let g_n = match scene.snr_db {
        Some(snr) => {
            let e_s: f64 = t[0]
                .iter()
                .zip(&t[1])
                .zip(k[0].iter().zip(&k[1]))
                .map(|((a, b), (c, d))| (0.5 * (a + b) + g_k * 0.5 * (c + d)).powi(2))
                .sum();
            let e_n = phi_energy(&n);
            if e_n <= 0.0 {
                return Err(Error::InvalidArgument("noise is silent".into()));
            }
            mixing_gain(e_s, e_n, snr)
        }
        None => 0.0,
    };

    let mix = |ch: usize, i: usize| t[ch][i] + g_k * k[ch][i] + g_n * n[ch][i];
    let mix_phi_ms = (0..len).map(|i| (0.5 * (mix(0, i) + mix(1, i))).powi(2)).sum::<f64>() / len as f64;
    let mut gain = 10f64.powf(scene.level_dbfs / 20.0) / mix_phi_ms.sqrt();
    let peak = (0..2)
        .flat_map(|ch| (0..len).map(move |i| (ch, i)))
        .fold(0.0f64, |m, (ch, i)| m.max(mix(ch, i).abs()));
    let level_clamped = peak * gain > PEAK_LIMIT;
    if level_clamped {
        gain = PEAK_LIMIT / peak;
    }

    let scale = |stem: &Stem, g: f64| -> Vec<Vec<f32>> {
        stem.iter().map(|ch| ch.iter().map(|&v| (v * g) as f32).collect()).collect()
    };
    let t32 = scale(&t, gain);
    let k32 = scale(&k, gain * g_k);
    let n32 = scale(&n, gain * g_n);
    let y32: Vec<Vec<f32>> = (0..2)
        .map(|ch| (0..len).map(|i| t32[ch][i] + k32[ch][i] + n32[ch][i]).collect())
        .collect();

    let t = MultichannelBuffer::new(t32)?;
    let y = MultichannelBuffer::new(y32)?;
    let t_phi = channel_average(&t);
    let y_phi = channel_average(&y);
    let achieved_level_dbfs = rms_dbfs(y_phi.samples());
    Ok(MixtureClip {
        t,
        k: MultichannelBuffer::new(k32)?,
        n: MultichannelBuffer::new(n32)?,
        y,
        t_phi,
        y_phi,
        interference_gain: g_k,
        noise_gain: g_n,
        output_gain: gain,
        achieved_level_dbfs,
        level_clamped,
    })
}

/// Gain `g` that sets `10 log10(e_t / (g^2 e_k))` to `ratio_db`; used for
/// both the SIR and the SNR stage.
pub fn mixing_gain(target_energy: f64, interference_energy: f64, ratio_db: f64) -> f64 {
    (target_energy / (interference_energy * 10f64.powf(ratio_db / 10.0))).sqrt()
}
