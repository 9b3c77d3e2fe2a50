//! Corpus-free source material: a speech-like synthesizer and a colored
//! noise generator.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dsp::{AudioBuffer, SAMPLE_RATE};

const FS: f64 = SAMPLE_RATE as f64;
const PEAK: f64 = 0.9;
/// Coefficient refresh interval for the time-varying resonators.
const BLOCK: usize = 32;

struct Syllable {
    start: usize,
    len: usize,
    voiced: bool,
    formants_from: [f64; 3],
    formants_to: [f64; 3],
    pitch_tilt: f64,
}

fn random_formants<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [
        rng.random_range(300.0..850.0),
        rng.random_range(850.0..2300.0),
        rng.random_range(2300.0..3200.0),
    ]
}

/// Two-pole resonator `y[n] = g x[n] + 2 r cos(theta) y[n-1] - r^2 y[n-2]`.
#[derive(Default)]
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn tune(&mut self, freq: f64, bandwidth: f64) {
        let r = (-PI * bandwidth / FS).exp();
        let theta = 2.0 * PI * freq / FS;
        self.a1 = 2.0 * r * theta.cos();
        self.a2 = -r * r;
        self.gain = 1.0 - r;
    }

    #[inline]
    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn plan_syllables<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<Syllable> {
    let mut out = Vec::new();
    let mut pos = (rng.random_range(0.0..0.25) * FS) as usize;
    let mut formants = random_formants(rng);
    let mut until_pause = rng.random_range(3..7);
    while pos < n {
        let dur = rng.random_range(0.12..0.35);
        let len = ((dur * FS) as usize).min(n - pos);
        let next = random_formants(rng);
        out.push(Syllable {
            start: pos,
            len,
            voiced: rng.random_bool(0.85),
            formants_from: formants,
            formants_to: next,
            pitch_tilt: rng.random_range(-0.15..0.1),
        });
        formants = next;
        // Every syllable is followed by a gap of at least half its length.
        let mut gap = (0.5 * dur).max(0.06) + rng.random_range(0.0..0.12);
        until_pause -= 1;
        if until_pause == 0 {
            gap += rng.random_range(0.2..0.6);
            until_pause = rng.random_range(3..7);
        }
        pos += len + (gap * FS) as usize;
    }
    out
}

fn normalize_peak(x: &mut [f64]) {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = PEAK / peak;
        x.iter_mut().for_each(|v| *v *= g);
    }
}

fn to_buffer(x: Vec<f64>) -> AudioBuffer {
    AudioBuffer::new(x.into_iter().map(|v| v as f32).collect()).expect("synthesized audio is finite")
}

/// Speech-like test signal: a harmonic glottal source with a drifting pitch
/// in 80-300 Hz, three time-varying formant resonators, and syllable-rate
/// amplitude bursts separated by silent gaps. Peak amplitude is 0.9.
pub fn synth_speech<R: Rng + ?Sized>(rng: &mut R, duration_s: f64) -> AudioBuffer {
    let n = (duration_s * FS).round() as usize;
    let base_f0: f64 = rng.random_range(90.0..240.0);
    let drift = [
        (rng.random_range(0.1..0.5), rng.random_range(0.0..2.0 * PI), 0.12),
        (rng.random_range(0.8..1.6), rng.random_range(0.0..2.0 * PI), 0.05),
    ];
    let bandwidths = [rng.random_range(60.0..110.0), rng.random_range(80.0..140.0), rng.random_range(120.0..200.0)];
    let formant_gains = [1.0, rng.random_range(0.4..0.8), rng.random_range(0.15..0.4)];
    let syllables = plan_syllables(rng, n);

    let mut out = vec![0.0f64; n];
    let mut phase = 0.0f64;
    for syl in &syllables {
        let mut res: [Resonator; 3] = Default::default();
        let mut fric = Resonator::default();
        fric.tune(rng.random_range(3000.0..6000.0), rng.random_range(800.0..2000.0));
        for i in 0..syl.len {
            let idx = syl.start + i;
            let u = i as f64 / syl.len as f64;
            if i % BLOCK == 0 {
                for (k, r) in res.iter_mut().enumerate() {
                    let f = syl.formants_from[k] + (syl.formants_to[k] - syl.formants_from[k]) * u;
                    r.tune(f, bandwidths[k]);
                }
            }
            let t = idx as f64 / FS;
            let mut f0 = base_f0 * (1.0 + syl.pitch_tilt * (u - 0.5));
            for &(rate, ph, depth) in &drift {
                f0 *= 1.0 + depth * (2.0 * PI * rate * t + ph).sin();
            }
            let f0 = f0.clamp(80.0, 300.0);
            phase = (phase + 2.0 * PI * f0 / FS) % (2.0 * PI);

            let aspiration: f64 = rng.sample::<f64, _>(StandardNormal);
            let sample = if syl.voiced {
                let harmonics = (3800.0 / f0) as usize;
                let mut e = 0.0;
                for h in 1..=harmonics {
                    e += (h as f64 * phase).cos() / h as f64;
                }
                let e = e + 0.03 * aspiration;
                res.iter_mut().zip(&formant_gains).map(|(r, g)| g * r.step(e)).sum::<f64>()
            } else {
                fric.step(aspiration)
            };
            let env = (PI * u).sin().powf(0.6);
            out[idx] = sample * env;
        }
    }
    normalize_peak(&mut out);
    to_buffer(out)
}

/// Stationary-ish background noise with a random spectral color and slow
/// amplitude modulation. Peak amplitude is 0.9.
pub fn synth_noise<R: Rng + ?Sized>(rng: &mut R, duration_s: f64) -> AudioBuffer {
    let n = (duration_s * FS).round() as usize;
    let kind = rng.random_range(0..3);
    let cutoff: f64 = rng.random_range(200.0..3000.0);
    let pole = (-2.0 * PI * cutoff / FS).exp();
    let hum_f0 = if rng.random_bool(0.5) { 50.0 } else { 60.0 };
    let am_rate: f64 = rng.random_range(0.1..2.0);
    let am_depth: f64 = rng.random_range(0.0..0.4);
    let am_phase: f64 = rng.random_range(0.0..2.0 * PI);

    let mut out = Vec::with_capacity(n);
    let mut lp = 0.0f64;
    let mut pink = [0.0f64; 3];
    for i in 0..n {
        let w: f64 = rng.sample(StandardNormal);
        let v = match kind {
            0 => {
                lp = pole * lp + (1.0 - pole) * w;
                lp
            }
            1 => {
                pink[0] = 0.99765 * pink[0] + w * 0.0990460;
                pink[1] = 0.96300 * pink[1] + w * 0.2965164;
                pink[2] = 0.57000 * pink[2] + w * 1.0526913;
                pink.iter().sum::<f64>() + w * 0.1848
            }
            _ => {
                let t = i as f64 / FS;
                let hum: f64 = (1..=5)
                    .map(|h| (2.0 * PI * hum_f0 * h as f64 * t).sin() / h as f64)
                    .sum();
                hum + 0.3 * w
            }
        };
        let t = i as f64 / FS;
        out.push(v * (1.0 + am_depth * (2.0 * PI * am_rate * t + am_phase).sin()));
    }
    normalize_peak(&mut out);
    to_buffer(out)
}
