use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cruse::{separate_streaming, CruseParams, StreamingSeparator};
use crate::dsp::{MultichannelBuffer, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub files: usize,
    pub duration_s: f64,
    /// Mean wall time to separate one file.
    pub mean_seconds: f64,
    pub rtf: f64,
    pub host: String,
}

fn host_description() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}-{}, {threads} hardware thread(s)", std::env::consts::OS, std::env::consts::ARCH)
}

/// Times streaming separation (framing, STFT, network, iSTFT) of `files`
/// random stereo clips of `duration_s` seconds, one after another on the
/// calling thread. RTF is the mean time per file over `duration_s`.
pub fn bench_rtf(params: &CruseParams, model: &str, files: usize, duration_s: f64, seed: u64) -> Result<BenchReport> {
    if files == 0 {
        return Err(Error::InvalidArgument("benchmark needs at least one file".into()));
    }
    if !(duration_s > 0.0) {
        return Err(Error::InvalidArgument(format!("benchmark duration must be positive, got {duration_s}")));
    }
    let len = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sep = StreamingSeparator::new(params)?;
    let mut total = 0.0;
    for _ in 0..files {
        let mut channel = || (0..len).map(|_| rng.random_range(-0.1f32..0.1)).collect::<Vec<_>>();
        let y = MultichannelBuffer::new(vec![channel(), channel()])?;
        let start = Instant::now();
        let out = separate_streaming(&mut sep, &y)?;
        total += start.elapsed().as_secs_f64();
        std::hint::black_box(out);
    }
    let mean_seconds = total / files as f64;
    Ok(BenchReport {
        model: model.to_string(),
        files,
        duration_s,
        mean_seconds,
        rtf: mean_seconds / duration_s,
        host: host_description(),
    })
}
