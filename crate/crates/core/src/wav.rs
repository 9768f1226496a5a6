//! WAV front end: interleaved lane input, limited mixture output.
//!
//! Input files carry `bands * contents * mixers` lanes as interleaved
//! channels (16/24-bit PCM or 32-bit float); output mixtures are written
//! as 32-bit float by default.

use std::path::Path;

use thiserror::Error;

use crate::engine::config::LaneMap;
use crate::engine::StreamTensor;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("wav error: {0}")]
    Format(#[from] hound::Error),
    #[error("unsupported sample format: {0}")]
    Unsupported(String),
    #[error("channel count {got} does not match the lane map ({want})")]
    ChannelMismatch { got: usize, want: usize },
}

/// Read an interleaved multi-lane WAV into a stream tensor.
pub fn read_stream(
    path: &Path,
    lane_map: &LaneMap,
    n_bands: usize,
    n_contents: usize,
    n_mixers: usize,
) -> Result<(StreamTensor, u32), WavError> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels != lane_map.entries.len() {
        return Err(WavError::ChannelMismatch { got: channels, want: lane_map.entries.len() });
    }

    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()?,
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()?,
        (hound::SampleFormat::Int, 24) => reader
            .samples::<i32>()
            .map(|s| s.map(|v| v as f64 / 8_388_608.0))
            .collect::<Result<_, _>>()?,
        (fmt, bits) => {
            return Err(WavError::Unsupported(format!("{fmt:?} at {bits} bits")));
        }
    };

    let len = samples.len() / channels;
    let mut stream = StreamTensor::zeros(len, n_bands, n_contents, n_mixers);
    for t in 0..len {
        for (ch, &(j, k, m)) in lane_map.entries.iter().enumerate() {
            stream.set(t, j, k, m, samples[t * channels + ch]);
        }
    }
    Ok((stream, spec.sample_rate))
}

/// Write mixture channels as 32-bit float WAV.
pub fn write_mixtures(
    path: &Path,
    mixtures: &[Vec<f64>],
    sample_rate: u32,
) -> Result<(), WavError> {
    let spec = hound::WavSpec {
        channels: mixtures.len() as u16,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    let len = mixtures.iter().map(|m| m.len()).max().unwrap_or(0);
    for t in 0..len {
        for mix in mixtures {
            writer.write_sample(mix.get(t).copied().unwrap_or(0.0) as f32)?;
        }
    }
    writer.finalize()?;
    Ok(())
}

/// Write a lane stream as 32-bit float WAV in canonical lane order; used
/// by the benchmarks to materialize test signals.
pub fn write_stream(path: &Path, stream: &StreamTensor, sample_rate: u32) -> Result<(), WavError> {
    let spec = hound::WavSpec {
        channels: stream.n_lanes() as u16,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for t in 0..stream.len {
        for m in 0..stream.n_mixers {
            for k in 0..stream.n_contents {
                for j in 0..stream.n_bands {
                    writer.write_sample(stream.get(t, j, k, m) as f32)?;
                }
            }
        }
    }
    writer.finalize()?;
    Ok(())
}
