//! Log-mel filterbank frontend and the two feature normalizations.
//!
//! Frames are centered on multiples of the hop with reflection padding, so a
//! signal of `L` samples yields `floor(L / hop) + 1` frames (501 for 10 s at
//! 16 kHz with a 20 ms hop). Each frame is Hann-windowed, zero-padded to
//! `fft_size` and reduced to its magnitude spectrum; 40 triangular HTK-mel
//! filters spanning 0 Hz to Nyquist then give `ln(energy + log_floor)`.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::AudioClip;
use crate::error::{bail, Result};

/// Floor applied to standard deviations in both normalizations.
pub const STD_FLOOR: f64 = 1e-8;

const FBANK_MAGIC: &[u8; 4] = b"FBK1";

#[derive(Debug, Clone, PartialEq)]
pub struct FrontendConfig {
    /// Seconds.
    pub frame_length: f64,
    /// Seconds.
    pub frame_hop: f64,
    pub num_mel_bins: usize,
    pub sample_rate: u32,
    pub fft_size: usize,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            frame_length: 0.040,
            frame_hop: 0.020,
            num_mel_bins: 40,
            sample_rate: 16_000,
            fft_size: 1024,
            log_floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn frame_samples(&self) -> usize {
        (self.frame_length * self.sample_rate as f64).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.frame_hop * self.sample_rate as f64).round() as usize
    }

    pub fn num_fft_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count produced for a signal of `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        len / self.hop_samples() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            bail!(Config, "sample_rate must be positive");
        }
        if !(self.frame_length > 0.0) || !(self.frame_hop > 0.0) {
            bail!(Config, "frame_length and frame_hop must be positive");
        }
        if self.frame_hop > self.frame_length {
            bail!(Config, "frame_hop {} exceeds frame_length {}", self.frame_hop, self.frame_length);
        }
        if self.hop_samples() == 0 {
            bail!(Config, "frame_hop is shorter than one sample");
        }
        if self.fft_size < self.frame_samples() {
            bail!(Config, "fft_size {} shorter than frame of {} samples", self.fft_size, self.frame_samples());
        }
        if self.num_mel_bins == 0 {
            bail!(Config, "num_mel_bins must be at least 1");
        }
        if !(self.log_floor > 0.0) {
            bail!(Config, "log_floor must be positive");
        }
        Ok(())
    }
}

/// Dense row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Log-mel feature of one channel: `bins` rows by `frames` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FbankMatrix {
    pub clip_id: String,
    pub channel_index: usize,
    pub values: Matrix,
}

impl FbankMatrix {
    pub fn bins(&self) -> usize {
        self.values.rows
    }

    pub fn frames(&self) -> usize {
        self.values.cols
    }
}

/// Per-mel-bin mean and standard deviation over a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalNormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// The `num_mel_bins + 2` band edges in Hz; filter `m` spans edges `m..=m+2` and peaks at `m+1`.
pub fn mel_band_edges(cfg: &FrontendConfig) -> Vec<f64> {
    let top = hz_to_mel(cfg.sample_rate as f64 / 2.0);
    let n = cfg.num_mel_bins + 1;
    (0..=n).map(|i| mel_to_hz(top * i as f64 / n as f64)).collect()
}

/// Center (peak) frequency of every filter in Hz.
pub fn mel_center_frequencies(cfg: &FrontendConfig) -> Vec<f64> {
    let edges = mel_band_edges(cfg);
    edges[1..edges.len() - 1].to_vec()
}

/// Triangular HTK-mel filters, `num_mel_bins` by `fft_size / 2 + 1`.
pub fn mel_filterbank(cfg: &FrontendConfig) -> Result<Matrix> {
    cfg.validate()?;
    let edges = mel_band_edges(cfg);
    let nbins = cfg.num_fft_bins();
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
    let mut fb = Matrix::zeros(cfg.num_mel_bins, nbins);
    for m in 0..cfg.num_mel_bins {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut any = false;
        for k in 0..nbins {
            let f = k as f64 * bin_hz;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            if w > 0.0 {
                any = true;
                fb.set(m, k, w);
            }
        }
        if !any {
            bail!(
                Config,
                "mel filter {} ({:.1}-{:.1} Hz) covers no FFT bin; use fewer mel bins or a larger fft_size",
                m,
                lo,
                hi
            );
        }
    }
    Ok(fb)
}

/// Reflect an index into `0..len` (numpy "reflect" mode, repeated as needed).
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Reusable frontend: caches the window, FFT plan, and sparse filter rows.
pub struct Frontend {
    cfg: FrontendConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    /// Per filter: first nonzero FFT bin and its weights.
    filters: Vec<(usize, Vec<f64>)>,
}

impl Frontend {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        let fb = mel_filterbank(&cfg)?;
        let filters = (0..fb.rows)
            .map(|m| {
                let row = fb.row(m);
                let first = row.iter().position(|&w| w > 0.0).unwrap_or(0);
                let last = row.iter().rposition(|&w| w > 0.0).unwrap_or(0);
                (first, row[first..=last].to_vec())
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self { window: periodic_hann(cfg.frame_samples()), fft, filters, cfg })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn stft_magnitude(&self, samples: &[f64]) -> Result<Matrix> {
        let hop = self.cfg.hop_samples();
        if samples.len() < hop {
            bail!(DegenerateInput, "{} samples is shorter than one hop of {}", samples.len(), hop);
        }
        let frame = self.cfg.frame_samples();
        let half = (frame / 2) as isize;
        let frames = self.cfg.num_frames(samples.len());
        let nbins = self.cfg.num_fft_bins();
        let mut out = Matrix::zeros(nbins, frames);
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        for t in 0..frames {
            let start = (t * hop) as isize - half;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < frame {
                    let s = samples[reflect(start + i as isize, samples.len())];
                    Complex::new(s * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for k in 0..nbins {
                out.set(k, t, buf[k].norm());
            }
        }
        Ok(out)
    }

    /// `ln(filters . magnitude + log_floor)` for one channel.
    pub fn fbank(&self, samples: &[f64]) -> Result<Matrix> {
        let mag = self.stft_magnitude(samples)?;
        let mut out = Matrix::zeros(self.filters.len(), mag.cols);
        for (m, (first, weights)) in self.filters.iter().enumerate() {
            for t in 0..mag.cols {
                let mut e = 0.0;
                for (j, w) in weights.iter().enumerate() {
                    e += w * mag.get(first + j, t);
                }
                out.set(m, t, (e + self.cfg.log_floor).ln());
            }
        }
        Ok(out)
    }

    pub fn extract(&self, clip: &AudioClip, channel: usize) -> Result<FbankMatrix> {
        if channel >= clip.num_channels() {
            bail!(Contract, "channel {} out of range for {}-channel clip", channel, clip.num_channels());
        }
        if clip.sample_rate != self.cfg.sample_rate {
            bail!(
                Data,
                "clip {} has sample rate {} Hz, expected {} Hz",
                clip.clip_id,
                clip.sample_rate,
                self.cfg.sample_rate
            );
        }
        Ok(FbankMatrix {
            clip_id: clip.clip_id.clone(),
            channel_index: channel,
            values: self.fbank(&clip.channels[channel])?,
        })
    }
}

pub fn stft_magnitude(samples: &[f64], cfg: &FrontendConfig) -> Result<Matrix> {
    Frontend::new(cfg.clone())?.stft_magnitude(samples)
}

pub fn extract_fbank(clip: &AudioClip, channel: usize, cfg: &FrontendConfig) -> Result<FbankMatrix> {
    Frontend::new(cfg.clone())?.extract(clip, channel)
}

pub fn fit_global_stats(features: &[FbankMatrix]) -> Result<GlobalNormStats> {
    let Some(first) = features.first() else {
        bail!(DegenerateInput, "cannot fit normalization statistics on an empty set");
    };
    let bins = first.bins();
    if features.iter().any(|f| f.bins() != bins) {
        bail!(Shape, "feature matrices disagree on mel bin count");
    }
    let mut sum = vec![0.0; bins];
    let mut count = 0usize;
    for f in features {
        for (b, s) in sum.iter_mut().enumerate() {
            *s += f.values.row(b).iter().sum::<f64>();
        }
        count += f.frames();
    }
    if count == 0 {
        bail!(DegenerateInput, "feature matrices contain no frames");
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; bins];
    for f in features {
        for (b, acc) in sq.iter_mut().enumerate() {
            *acc += f.values.row(b).iter().map(|v| (v - mean[b]).powi(2)).sum::<f64>();
        }
    }
    let std = sq.iter().map(|s| (s / count as f64).sqrt().max(STD_FLOOR)).collect();
    Ok(GlobalNormStats { mean, std })
}

pub fn global_normalize(f: &FbankMatrix, stats: &GlobalNormStats) -> Result<FbankMatrix> {
    if stats.mean.len() != f.bins() || stats.std.len() != f.bins() {
        bail!(Shape, "stats have {} bins, feature has {}", stats.mean.len(), f.bins());
    }
    let mut out = f.clone();
    for b in 0..f.bins() {
        let (m, s) = (stats.mean[b], stats.std[b]);
        for t in 0..f.frames() {
            out.values.set(b, t, (f.values.get(b, t) - m) / s);
        }
    }
    Ok(out)
}

/// Standardizes each mel-bin row over its own frames.
pub fn time_normalize(f: &FbankMatrix) -> Result<FbankMatrix> {
    let frames = f.frames();
    if frames < 2 {
        bail!(DegenerateInput, "time normalization needs at least 2 frames, got {}", frames);
    }
    let mut out = f.clone();
    for b in 0..f.bins() {
        let row = f.values.row(b);
        let mean = row.iter().sum::<f64>() / frames as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / frames as f64;
        let std = var.sqrt().max(STD_FLOOR);
        for t in 0..frames {
            out.values.set(b, t, (row[t] - mean) / std);
        }
    }
    Ok(out)
}

pub fn write_fbank(path: impl AsRef<Path>, f: &FbankMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FBANK_MAGIC)?;
    w.write_all(&(f.bins() as u32).to_le_bytes())?;
    w.write_all(&(f.frames() as u32).to_le_bytes())?;
    w.write_all(&(f.channel_index as u32).to_le_bytes())?;
    for v in &f.values.data {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_fbank(path: impl AsRef<Path>, clip_id: &str) -> Result<FbankMatrix> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != FBANK_MAGIC {
        bail!(Format, "{}: not an FBK1 feature file", path.display());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (bins, frames, channel_index) = (word(4), word(8), word(12));
    let n = bins * frames;
    if bytes.len() != 16 + 4 * n {
        bail!(Format, "{}: expected {} values, file holds {} bytes of payload", path.display(), n, bytes.len() - 16);
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(FbankMatrix {
        clip_id: clip_id.to_string(),
        channel_index,
        values: Matrix { rows: bins, cols: frames, data },
    })
}

/// Text form: one `mean,...` line and one `std,...` line, shortest round-trip decimals.
pub fn write_stats(path: impl AsRef<Path>, s: &GlobalNormStats) -> Result<()> {
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    std::fs::write(path, format!("mean,{}\nstd,{}\n", join(&s.mean), join(&s.std)))?;
    Ok(())
}

pub fn read_stats(path: impl AsRef<Path>) -> Result<GlobalNormStats> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut mean = None;
    let mut std = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split(',');
        let key = parts.next().unwrap_or_default();
        let vals = parts
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| crate::error::Error::Format(format!("{}: {}", path.display(), e)))?;
        match key {
            "mean" => mean = Some(vals),
            "std" => std = Some(vals),
            other => bail!(Format, "{}: unknown row '{}'", path.display(), other),
        }
    }
    match (mean, std) {
        (Some(mean), Some(std)) if mean.len() == std.len() => Ok(GlobalNormStats { mean, std }),
        _ => bail!(Format, "{}: stats file needs matching mean and std rows", path.display()),
    }
}
