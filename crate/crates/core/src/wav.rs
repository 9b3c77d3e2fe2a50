//! WAV reading and writing. Input may be 16-bit PCM or 32-bit float at
//! 16 kHz; output is always 32-bit float.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::dsp::{MultichannelBuffer, SAMPLE_RATE};
use crate::error::{Error, Result};

pub fn read_wav(path: impl AsRef<Path>) -> Result<MultichannelBuffer> {
    let path = path.as_ref();
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedAudio(format!(
            "{}: sample rate {} Hz, expected {SAMPLE_RATE} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::UnsupportedAudio(format!("{}: no channels", path.display())));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader.samples::<f32>().collect::<Result<_, _>>()?,
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()?,
        (format, bits) => {
            return Err(Error::UnsupportedAudio(format!(
                "{}: {bits}-bit {format:?} samples; only 16-bit PCM and 32-bit float are supported",
                path.display()
            )))
        }
    };
    let frames = interleaved.len() / channels;
    let mut out = vec![Vec::with_capacity(frames); channels];
    for frame in interleaved.chunks_exact(channels) {
        for (ch, &v) in out.iter_mut().zip(frame) {
            ch.push(v);
        }
    }
    MultichannelBuffer::new(out)
}

pub fn write_wav(path: impl AsRef<Path>, audio: &MultichannelBuffer) -> Result<()> {
    write_channels(path, audio.channels())
}

pub fn write_channels(path: impl AsRef<Path>, channels: &[Vec<f32>]) -> Result<()> {
    let spec = WavSpec {
        channels: channels.len() as u16,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path, spec)?;
    let len = channels.first().map_or(0, Vec::len);
    for n in 0..len {
        for ch in channels {
            writer.write_sample(ch[n])?;
        }
    }
    writer.finalize()?;
    Ok(())
}
