//! Multi-channel PCM clips and RIFF/WAVE 16-bit IO.

use std::path::Path;

use crate::error::{bail, Error, Result};

/// Largest channel count accepted from disk.
pub const MAX_CHANNELS: usize = 4;

/// A multi-channel clip with amplitudes in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub clip_id: String,
    pub sample_rate: u32,
    /// One sequence per channel, all the same length.
    pub channels: Vec<Vec<f64>>,
    pub label: Option<usize>,
}

impl AudioClip {
    pub fn new(clip_id: impl Into<String>, sample_rate: u32, channels: Vec<Vec<f64>>) -> Result<Self> {
        if sample_rate == 0 {
            bail!(Contract, "sample rate must be positive");
        }
        if channels.is_empty() {
            bail!(Contract, "clip needs at least one channel");
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            bail!(Contract, "channels differ in length");
        }
        Ok(Self { clip_id: clip_id.into(), sample_rate, channels, label: None })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn num_samples(&self) -> usize {
        self.channels[0].len()
    }

    pub fn duration_secs(&self) -> f64 {
        self.num_samples() as f64 / self.sample_rate as f64
    }
}

fn map_hound(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::FormatError(msg) => Error::Format(msg.to_string()),
        hound::Error::Unsupported => Error::UnsupportedFormat("wave encoding not supported".into()),
        other => Error::Format(other.to_string()),
    }
}

/// Reads a 16-bit signed PCM WAV file; samples are divided by 32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        bail!(
            UnsupportedFormat,
            "{}: expected 16-bit integer PCM, found {}-bit {:?}",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        );
    }
    let nch = spec.channels as usize;
    if nch == 0 || nch > MAX_CHANNELS {
        bail!(UnsupportedFormat, "{}: {} channels (1 to {} supported)", path.display(), nch, MAX_CHANNELS);
    }
    let frames = reader.duration() as usize;
    let mut channels = vec![Vec::with_capacity(frames); nch];
    for (i, s) in reader.samples::<i16>().enumerate() {
        let s = s.map_err(map_hound)?;
        channels[i % nch].push(s as f64 / 32768.0);
    }
    if channels.iter().any(|c| c.len() != channels[0].len()) {
        bail!(Format, "{}: truncated sample data", path.display());
    }
    let clip_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    AudioClip::new(clip_id, spec.sample_rate, channels)
}

/// Writes a clip as interleaved 16-bit PCM, clipping amplitudes to the representable range.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: clip.num_channels() as u16,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(map_hound)?;
    for i in 0..clip.num_samples() {
        for ch in &clip.channels {
            writer.write_sample(quantize(ch[i])).map_err(map_hound)?;
        }
    }
    writer.finalize().map_err(map_hound)
}

fn quantize(x: f64) -> i16 {
    (x * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}
