//! Shoebox room acoustics via the image-source method.
//!
//! All six walls share one reflection coefficient derived from a target T60
//! with Sabine's formula. Each image source contributes `beta^hits / d` at a
//! fractional delay `d / c` rendered with an 81-tap Hann-windowed sinc, so the
//! sub-sample inter-microphone delay survives intact.

use serde::{Deserialize, Serialize};

use crate::dsp::SAMPLE_RATE;
use crate::error::{Error, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;
pub const MIC_SPACING: f64 = 0.08;
pub const MAX_ORDER_CAP: usize = 40;
/// Fractional-delay kernel length.
pub const KERNEL_TAPS: usize = 81;
const KERNEL_HALF: i64 = (KERNEL_TAPS as i64 - 1) / 2;
/// Minimum RIR length, 0.5 s.
pub const MIN_RIR_LEN: usize = 8_000;

pub type Position = [f64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub dims: [f64; 3],
    pub t60: f64,
    pub absorption: f64,
    pub speed_of_sound: f64,
}

impl RoomSpec {
    /// Room with absorption matched to `t60` via Sabine.
    pub fn from_t60(dims: [f64; 3], t60: f64) -> Result<Self> {
        let absorption = absorption_from_t60(dims, t60)?;
        Ok(Self {
            dims,
            t60,
            absorption,
            speed_of_sound: SPEED_OF_SOUND,
        })
    }

    pub fn contains(&self, p: &Position) -> bool {
        p.iter().zip(&self.dims).all(|(&v, &l)| v > 0.0 && v < l)
    }

    pub fn wall_distance(&self, p: &Position) -> f64 {
        p.iter()
            .zip(&self.dims)
            .map(|(&v, &l)| v.min(l - v))
            .fold(f64::INFINITY, f64::min)
    }

    /// Horizontal distance to the nearest of the four side walls.
    pub fn side_wall_distance(&self, p: &Position) -> f64 {
        (0..2)
            .map(|i| p[i].min(self.dims[i] - p[i]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn default_max_order(&self) -> usize {
        let min_dim = self.dims.iter().copied().fold(f64::INFINITY, f64::min);
        let order = (self.speed_of_sound * self.t60 / (2.0 * min_dim)).ceil() as usize + 1;
        order.min(MAX_ORDER_CAP)
    }

    /// Default RIR length: one T60 (at least 0.5 s) plus the kernel width.
    pub fn default_rir_len(&self) -> usize {
        let t60_len = (self.t60 * SAMPLE_RATE as f64).ceil() as usize;
        t60_len.max(MIN_RIR_LEN) + KERNEL_TAPS
    }
}

/// Two-microphone uniform linear array in the horizontal plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub center: Position,
    /// Unit vector along the array.
    pub axis: [f64; 3],
    /// Unit vector perpendicular to `axis` pointing to the front.
    pub broadside: [f64; 3],
    pub mic_count: usize,
    pub spacing: f64,
}

impl ArraySpec {
    /// Array whose axis makes angle `orientation` (radians) with +x; the
    /// broadside is the axis rotated by +90 degrees.
    pub fn horizontal(center: Position, orientation: f64) -> Self {
        let (s, c) = orientation.sin_cos();
        Self {
            center,
            axis: [c, s, 0.0],
            broadside: [-s, c, 0.0],
            mic_count: 2,
            spacing: MIC_SPACING,
        }
    }

    pub fn mic_positions(&self) -> Vec<Position> {
        let n = self.mic_count as f64;
        (0..self.mic_count)
            .map(|m| {
                let offset = (m as f64 - (n - 1.0) / 2.0) * self.spacing;
                [
                    self.center[0] + offset * self.axis[0],
                    self.center[1] + offset * self.axis[1],
                    self.center[2] + offset * self.axis[2],
                ]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rir {
    pub taps: Vec<f32>,
}

impl Rir {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|&v| (v as f64).powi(2)).sum()
    }
}

/// Sabine absorption `0.161 V / (S T60)`.
pub fn absorption_from_t60(dims: [f64; 3], t60: f64) -> Result<f64> {
    if !(t60 > 0.0) {
        return Err(Error::InvalidArgument(format!("t60 must be positive, got {t60}")));
    }
    if dims.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Geometry(format!("room dimensions must be positive: {dims:?}")));
    }
    let [lx, ly, lz] = dims;
    let volume = lx * ly * lz;
    let surface = 2.0 * (lx * ly + lx * lz + ly * lz);
    let absorption = 0.161 * volume / (surface * t60);
    if absorption > 1.0 {
        return Err(Error::AbsorptionTooHigh(absorption));
    }
    Ok(absorption)
}

#[derive(Clone, Copy, Debug)]
pub struct RirOptions {
    pub max_order: usize,
    pub len: usize,
}

impl RirOptions {
    pub fn for_room(room: &RoomSpec) -> Self {
        Self {
            max_order: room.default_max_order(),
            len: room.default_rir_len(),
        }
    }
}

/// One image source: arrival delay in samples and amplitude.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Arrival {
    pub delay: f64,
    pub gain: f64,
    pub order: usize,
}

fn check_inside(room: &RoomSpec, p: &Position, what: &str) -> Result<()> {
    if !room.contains(p) {
        return Err(Error::Geometry(format!("{what} {p:?} is outside room {:?}", room.dims)));
    }
    Ok(())
}

/// Image-source arrivals from `src` to `mic`, up to `max_order` reflections
/// and delays below `max_delay` samples (kernel tail included).
pub fn image_arrivals(
    room: &RoomSpec,
    src: &Position,
    mic: &Position,
    max_order: usize,
    max_delay: f64,
) -> Result<Vec<Arrival>> {
    check_inside(room, src, "source")?;
    check_inside(room, mic, "microphone")?;
    let direct: f64 = src.iter().zip(mic).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    if direct < 1e-9 {
        return Err(Error::Geometry("source and microphone coincide".into()));
    }
    if !(room.absorption > 0.0 && room.absorption <= 1.0) {
        return Err(Error::Geometry(format!("absorption {} outside (0, 1]", room.absorption)));
    }
    let beta = (1.0 - room.absorption).sqrt();
    let fs = SAMPLE_RATE as f64;
    let c = room.speed_of_sound;
    let max_dist = (max_delay + KERNEL_HALF as f64 + 1.0) * c / fs;

    // Per-axis image offsets: index n in Z, reflections |n|. Even n = 2k keeps
    // the source coordinate, odd n = 2k - 1 mirrors it.
    let order = max_order as i64;
    let axis_images = |axis: usize| -> Vec<(f64, usize)> {
        let l = room.dims[axis];
        (-order..=order)
            .map(|n| {
                let coord = if n % 2 == 0 {
                    n as f64 * l + src[axis]
                } else {
                    (n + 1) as f64 * l - src[axis]
                };
                (coord - mic[axis], n.unsigned_abs() as usize)
            })
            .collect()
    };
    let xs = axis_images(0);
    let ys = axis_images(1);
    let zs = axis_images(2);

    let mut arrivals = Vec::new();
    for &(dx, hx) in &xs {
        if hx > max_order || dx.abs() > max_dist {
            continue;
        }
        for &(dy, hy) in &ys {
            if hx + hy > max_order || dx * dx + dy * dy > max_dist * max_dist {
                continue;
            }
            for &(dz, hz) in &zs {
                let hits = hx + hy + hz;
                if hits > max_order {
                    continue;
                }
                let d = (dx * dx + dy * dy + dz * dz).sqrt();
                if d > max_dist {
                    continue;
                }
                arrivals.push(Arrival {
                    delay: d / c * fs,
                    gain: beta.powi(hits as i32) / d,
                    order: hits,
                });
            }
        }
    }
    Ok(arrivals)
}

/// Adds a windowed-sinc fractional delay of `delay` samples scaled by `gain`.
/// Taps falling outside `out` are dropped.
pub fn add_fractional_impulse(out: &mut [f64], delay: f64, gain: f64) {
    let base = delay.floor() as i64;
    let frac = delay - base as f64;
    // sin(pi (n - delay)) alternates sign with n, so evaluate it once.
    let s0 = (std::f64::consts::PI * frac).sin();
    let width = (KERNEL_HALF + 1) as f64;
    for k in -KERNEL_HALF..=KERNEL_HALF {
        let n = base + k;
        if n < 0 || n as usize >= out.len() {
            continue;
        }
        let t = k as f64 - frac;
        let sinc = if t.abs() < 1e-12 {
            1.0
        } else {
            // sin(pi t) = sin(pi (k - frac)) = (-1)^(k+1) sin(pi frac)
            let sign = if k.rem_euclid(2) == 0 { -1.0 } else { 1.0 };
            sign * s0 / (std::f64::consts::PI * t)
        };
        let window = 0.5 * (1.0 + (std::f64::consts::PI * t / width).cos());
        out[n as usize] += gain * window * sinc;
    }
}

/// Room impulse response from `src` to `mic`.
pub fn simulate_rir(room: &RoomSpec, src: &Position, mic: &Position, opts: RirOptions) -> Result<Rir> {
    let arrivals = image_arrivals(room, src, mic, opts.max_order, opts.len as f64)?;
    let mut acc = vec![0.0f64; opts.len];
    for a in &arrivals {
        add_fractional_impulse(&mut acc, a.delay, a.gain);
    }
    Ok(Rir {
        taps: acc.into_iter().map(|v| v as f32).collect(),
    })
}

/// T60 from the backward-integrated energy decay, fit between -5 and -25 dB
/// and extrapolated to 60 dB.
pub fn estimate_t60_schroeder(taps: &[f32]) -> Result<f64> {
    let fs = SAMPLE_RATE as f64;
    if taps.len() < (fs / 2.0) as usize {
        return Err(Error::InvalidArgument(format!(
            "need at least 0.5 s of taps, got {}",
            taps.len()
        )));
    }
    let mut edc = vec![0.0f64; taps.len()];
    let mut acc = 0.0;
    for i in (0..taps.len()).rev() {
        acc += (taps[i] as f64).powi(2);
        edc[i] = acc;
    }
    let total = edc[0];
    if total <= 0.0 {
        return Err(Error::DecayRangeNotReached);
    }
    let points: Vec<(f64, f64)> = edc
        .iter()
        .enumerate()
        .filter_map(|(i, &e)| {
            let db = 10.0 * (e / total).log10();
            (-25.0..=-5.0).contains(&db).then_some((i as f64 / fs, db))
        })
        .collect();
    let reaches_end = edc.iter().any(|&e| e > 0.0 && 10.0 * (e / total).log10() < -25.0);
    if points.len() < 2 || !reaches_end {
        return Err(Error::DecayRangeNotReached);
    }
    let n = points.len() as f64;
    let mean_t = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_d = points.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = points.iter().map(|p| (p.0 - mean_t) * (p.1 - mean_d)).sum();
    let var: f64 = points.iter().map(|p| (p.0 - mean_t).powi(2)).sum();
    let slope = cov / var;
    if !(slope < 0.0) {
        return Err(Error::DecayRangeNotReached);
    }
    Ok(-60.0 / slope)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn anechoic(dims: [f64; 3]) -> RoomSpec {
        RoomSpec {
            dims,
            t60: 0.1,
            absorption: 1.0,
            speed_of_sound: SPEED_OF_SOUND,
        }
    }

    #[test]
    fn sabine_values() {
        let a = absorption_from_t60([6.0, 6.0, 3.0], 0.5).unwrap();
        assert!((a - 0.2415).abs() < 1e-9);
        let a = absorption_from_t60([4.0, 4.0, 2.0], 0.25).unwrap();
        assert!((a - 0.322).abs() < 1e-9);
        assert!(absorption_from_t60([1.0, 1.0, 1.0], 0.1).is_ok());
        assert!(matches!(
            absorption_from_t60([1.0, 1.0, 1.0], 0.02),
            Err(Error::AbsorptionTooHigh(_))
        ));
        assert!(absorption_from_t60([1.0, 1.0, 1.0], 0.0).is_err());
    }

    /// Sub-sample arrival time from the first moment of the kernel, and its
    /// summed amplitude.
    fn centroid(taps: &[f32]) -> (f64, f64) {
        let sum: f64 = taps.iter().map(|&v| v as f64).sum();
        let moment: f64 = taps.iter().enumerate().map(|(i, &v)| i as f64 * v as f64).sum();
        (moment / sum, sum)
    }

    #[test]
    fn anechoic_direct_path() {
        let room = anechoic([10.0, 10.0, 4.0]);
        let opts = RirOptions { max_order: 0, len: 400 };
        let src = [5.0, 5.0, 2.0];
        let one = simulate_rir(&room, &src, &[6.0, 5.0, 2.0], opts).unwrap();
        let (center, amp) = centroid(&one.taps);
        assert!((center - 16_000.0 / 343.0).abs() < 0.5, "center {center}");
        assert!((amp - 1.0).abs() < 1e-3, "amplitude {amp}");

        let two = simulate_rir(&room, &src, &[7.0, 5.0, 2.0], opts).unwrap();
        let (center, amp) = centroid(&two.taps);
        assert!((center - 93.29).abs() < 0.5, "center {center}");
        assert!((amp - 0.5).abs() < 0.5e-3, "amplitude {amp}");
        assert!((centroid(&one.taps).1 / amp - 2.0).abs() < 0.02);
    }

    #[test]
    fn first_order_has_seven_arrivals() {
        let room = RoomSpec::from_t60([6.0, 5.0, 3.0], 0.4).unwrap();
        let arr = image_arrivals(&room, &[2.0, 2.0, 1.5], &[3.0, 3.5, 1.5], 1, 1e9).unwrap();
        assert_eq!(arr.len(), 7);
        assert_eq!(arr.iter().filter(|a| a.order == 0).count(), 1);
    }

    #[test]
    fn rejects_bad_positions() {
        let room = RoomSpec::from_t60([6.0, 5.0, 3.0], 0.4).unwrap();
        let opts = RirOptions::for_room(&room);
        assert!(simulate_rir(&room, &[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0], opts).is_err());
        assert!(simulate_rir(&room, &[7.0, 1.0, 1.0], &[1.0, 1.0, 1.0], opts).is_err());
    }

    #[test]
    fn default_order_is_capped() {
        let room = RoomSpec::from_t60([12.0, 12.0, 2.0], 0.5).unwrap();
        assert_eq!(room.default_max_order(), MAX_ORDER_CAP);
        let room = RoomSpec::from_t60([6.0, 6.0, 3.0], 0.5).unwrap();
        assert_eq!(room.default_max_order(), 30);
    }

    #[test]
    fn reciprocity() {
        let room = RoomSpec::from_t60([5.0, 4.5, 2.8], 0.3).unwrap();
        let opts = RirOptions { max_order: 8, len: 4000 };
        let a = [1.2, 3.1, 1.4];
        let b = [3.7, 1.9, 1.4];
        let ab = simulate_rir(&room, &a, &b, opts).unwrap();
        let ba = simulate_rir(&room, &b, &a, opts).unwrap();
        let err = ab.taps.iter().zip(&ba.taps).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn energy_falls_with_absorption() {
        let dims = [6.0, 5.0, 3.0];
        let opts = RirOptions { max_order: 10, len: 8000 };
        let energies: Vec<f64> = [0.2, 0.4, 0.8]
            .iter()
            .map(|&absorption| {
                let room = RoomSpec { dims, t60: 0.5, absorption, speed_of_sound: SPEED_OF_SOUND };
                simulate_rir(&room, &[1.0, 1.0, 1.5], &[4.0, 3.0, 1.5], opts).unwrap().energy()
            })
            .collect();
        assert!(energies.iter().all(|e| e.is_finite()));
        assert!(energies[0] > energies[1] && energies[1] > energies[2]);
    }

    #[test]
    fn schroeder_on_synthetic_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let taps: Vec<f32> = (0..16_000)
            .map(|n| {
                let t = n as f64 / 16_000.0;
                ((-6.91 * t / 0.5).exp() * rng.random_range(-1.0..1.0)) as f32
            })
            .collect();
        let t60 = estimate_t60_schroeder(&taps).unwrap();
        assert!((t60 - 0.5).abs() < 0.05, "{t60}");
    }

    #[test]
    fn schroeder_rejects_single_impulse() {
        let mut taps = vec![0.0f32; 8000];
        taps[50] = 1.0;
        assert!(matches!(estimate_t60_schroeder(&taps), Err(Error::DecayRangeNotReached)));
    }

    #[test]
    fn schroeder_on_simulated_room() {
        let room = RoomSpec::from_t60([6.0, 6.0, 3.0], 0.5).unwrap();
        let rir = simulate_rir(&room, &[2.0, 3.5, 1.5], &[4.0, 2.5, 1.5], RirOptions::for_room(&room)).unwrap();
        let t60 = estimate_t60_schroeder(&rir.taps).unwrap();
        assert!((t60 - 0.5).abs() <= 0.125, "{t60}");
    }

    #[test]
    fn mic_positions_straddle_center() {
        let arr = ArraySpec::horizontal([3.0, 3.0, 1.5], 0.0);
        let mics = arr.mic_positions();
        assert!((mics[0][0] - 2.96).abs() < 1e-12 && (mics[1][0] - 3.04).abs() < 1e-12);
        assert!(arr.broadside[1] > 0.99);
    }
}
