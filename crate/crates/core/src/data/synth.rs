//! Seeded synthetic corpus: nine spectrally distinct activity recipes rendered to 4-channel WAVs.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{write_wav, AudioClip};
use crate::error::{bail, Result};

use super::manifest::{Manifest, ManifestRow, Split, CLASS_NAMES, MAX_FOLD};

/// Largest per-channel delay in samples.
pub const MAX_CHANNEL_DELAY: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub clips_per_class: usize,
    /// Clips per class marked `train`; the rest are `test`.
    pub train_per_class: usize,
    pub folds: u8,
    pub sample_rate: u32,
    /// Seconds.
    pub duration: f64,
    pub channels: usize,
    pub seed: u64,
    /// Replace classes 0, 4 and 8 with near-identical recipes.
    pub confusable_trio: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            clips_per_class: 20,
            train_per_class: 12,
            folds: 1,
            sample_rate: 16_000,
            duration: 10.0,
            channels: 4,
            seed: 0,
            confusable_trio: false,
        }
    }
}

/// Short onsets with exponential decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bursts {
    /// Mean onsets per second.
    pub rate: f64,
    /// Decay time constant in seconds.
    pub decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recipe {
    /// Fundamental frequencies in Hz.
    pub tones: Vec<f64>,
    /// Harmonics per tone, amplitude 1/k.
    pub harmonics: usize,
    pub tone_level: f64,
    /// Bandpassed noise: center Hz and Q.
    pub noise_band: (f64, f64),
    pub noise_level: f64,
    /// Amplitude modulation rate in Hz and depth in [0, 1].
    pub am: (f64, f64),
    /// Gates the whole foreground when present.
    pub bursts: Option<Bursts>,
    /// Silence gaps: period in seconds and silent fraction.
    pub gaps: Option<(f64, f64)>,
    /// Extra component layered over a shared base, used by the confusable trio.
    pub marker: Option<Box<Recipe>>,
}

impl Recipe {
    fn quiet(noise_band: (f64, f64), noise_level: f64) -> Self {
        Self { tones: vec![], harmonics: 1, tone_level: 0.0, noise_band, noise_level, am: (0.0, 0.0), bursts: None, gaps: None, marker: None }
    }
}

/// The recipe for each class label.
pub fn recipes(confusable_trio: bool) -> Vec<Recipe> {
    let q = Recipe::quiet;
    let mut r = vec![
        q((300.0, 0.5), 0.01),
        Recipe { tones: vec![120.0], tone_level: 0.05, bursts: Some(Bursts { rate: 20.0, decay: 0.004 }), ..q((4000.0, 1.0), 0.3) },
        Recipe { tones: vec![2600.0, 3900.0], tone_level: 0.3, bursts: Some(Bursts { rate: 2.0, decay: 0.08 }), ..q((1500.0, 1.0), 0.05) },
        Recipe { bursts: Some(Bursts { rate: 1.5, decay: 0.05 }), ..q((900.0, 2.0), 0.4) },
        Recipe { tones: vec![1000.0], tone_level: 0.15, am: (0.5, 0.6), ..q((300.0, 0.5), 0.02) },
        Recipe { tones: vec![180.0], harmonics: 8, tone_level: 0.2, am: (4.0, 0.9), gaps: Some((3.0, 0.3)), ..q((600.0, 1.0), 0.02) },
        Recipe { tones: vec![300.0], harmonics: 4, tone_level: 0.2, ..q((1200.0, 0.4), 0.5) },
        Recipe { tones: vec![440.0, 554.0, 659.0], tone_level: 0.12, gaps: Some((4.0, 0.15)), ..q((2000.0, 0.7), 0.05) },
        Recipe { bursts: Some(Bursts { rate: 6.0, decay: 0.008 }), ..q((5000.0, 2.0), 0.25) },
    ];
    if confusable_trio {
        let base = q((1000.0, 0.3), 0.08);
        r[0] = base.clone();
        r[4] = Recipe {
            marker: Some(Box::new(Recipe { tones: vec![1500.0], tone_level: 0.015, gaps: Some((2.0, 0.6)), ..q((1500.0, 1.0), 0.0) })),
            ..base.clone()
        };
        r[8] = Recipe {
            marker: Some(Box::new(Recipe { bursts: Some(Bursts { rate: 3.0, decay: 0.01 }), ..q((4000.0, 2.0), 0.05) })),
            ..base
        };
    }
    r
}

/// Randomized quantities of one clip, drawn from its own stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipPlan {
    pub label: usize,
    pub index: usize,
    /// Multiplies every recipe frequency.
    pub freq_scale: f64,
    pub gain: f64,
    pub channel_gains: Vec<f64>,
    pub channel_delays: Vec<usize>,
    stream: u64,
}

pub fn plan_clip(spec: &SynthSpec, label: usize, index: usize) -> ClipPlan {
    let stream = (label * spec.clips_per_class.max(1) + index) as u64;
    let mut rng = clip_rng(spec.seed, stream, 0);
    let freq_scale = 1.0 + rng.gen_range(-0.03..0.03);
    let gain = db(rng.gen_range(-3.0..3.0));
    let channel_gains = (0..spec.channels).map(|_| db(rng.gen_range(-1.0..1.0))).collect();
    let channel_delays = (0..spec.channels).map(|_| rng.gen_range(0..=MAX_CHANNEL_DELAY)).collect();
    ClipPlan { label, index, freq_scale, gain, channel_gains, channel_delays, stream }
}

fn clip_rng(seed: u64, stream: u64, part: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream * 4 + part);
    rng
}

fn db(x: f64) -> f64 {
    10f64.powf(x / 20.0)
}

/// RBJ bandpass with 0 dB peak gain, applied in place.
fn bandpass(x: &mut [f64], center: f64, q: f64, rate: f64) {
    let w0 = 2.0 * PI * (center / rate).min(0.49);
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for v in x.iter_mut() {
        let y = b0 * *v + b2 * x2 - a1 * y1 - a2 * y2;
        (x2, x1, y2, y1) = (x1, *v, y1, y);
        *v = y;
    }
}

fn render_recipe(r: &Recipe, plan: &ClipPlan, n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    bandpass(&mut noise, r.noise_band.0 * plan.freq_scale, r.noise_band.1, rate);
    let phases: Vec<f64> = r.tones.iter().map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let am_phase = rng.gen_range(0.0..2.0 * PI);
    let gap_phase = rng.gen_range(0.0..1.0);

    let mut gate = vec![1.0; n];
    if let Some(b) = r.bursts {
        gate.fill(0.0);
        let mut t = rng.gen_range(0.0..1.0 / b.rate);
        while t < n as f64 / rate {
            let start = (t * rate) as usize;
            let len = ((5.0 * b.decay * rate) as usize).max(1);
            for (k, g) in gate[start..(start + len).min(n)].iter_mut().enumerate() {
                *g += (-(k as f64) / (b.decay * rate)).exp();
            }
            t += -rng.gen_range(f64::EPSILON..1.0f64).ln() / b.rate;
        }
    }

    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / rate;
        let mut tone = 0.0;
        for (f, ph) in r.tones.iter().zip(&phases) {
            for k in 1..=r.harmonics {
                tone += (2.0 * PI * f * plan.freq_scale * k as f64 * t + ph * k as f64).sin() / k as f64;
            }
        }
        let (am_rate, depth) = r.am;
        let env = 1.0 - depth * 0.5 * (1.0 + (2.0 * PI * am_rate * t + am_phase).sin());
        let silent = r.gaps.is_some_and(|(period, duty)| (t / period + gap_phase).fract() < duty);
        if !silent {
            *o = (r.tone_level * tone + r.noise_level * noise[i]) * env * gate[i];
        }
    }
    if let Some(m) = &r.marker {
        for (o, v) in out.iter_mut().zip(render_recipe(m, plan, n, rate, rng)) {
            *o += v;
        }
    }
    out
}

/// Renders one clip: the class recipe, then per-channel gain, delay and sensor noise.
pub fn render_clip(spec: &SynthSpec, plan: &ClipPlan, recipe: &Recipe) -> Result<AudioClip> {
    let rate = spec.sample_rate as f64;
    let n = (spec.duration * rate).round() as usize;
    let mut rng = clip_rng(spec.seed, plan.stream, 1);
    let source = render_recipe(recipe, plan, n + MAX_CHANNEL_DELAY, rate, &mut rng);
    let mut sensor = clip_rng(spec.seed, plan.stream, 2);
    let channels = plan
        .channel_gains
        .iter()
        .zip(&plan.channel_delays)
        .map(|(&g, &d)| {
            let start = MAX_CHANNEL_DELAY - d;
            source[start..start + n]
                .iter()
                .map(|&s| (s * plan.gain * g + sensor.gen_range(-1e-3..1e-3)).clamp(-1.0, 1.0))
                .collect()
        })
        .collect();
    Ok(AudioClip::new(clip_id(plan.label, plan.index), spec.sample_rate, channels)?.with_label(plan.label))
}

pub fn clip_id(label: usize, index: usize) -> String {
    format!("{}_{index:03}", CLASS_NAMES[label])
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clips_per_class == 0 || self.train_per_class > self.clips_per_class {
            bail!(Config, "need 0 < train_per_class <= clips_per_class");
        }
        if !(1..=MAX_FOLD).contains(&self.folds) {
            bail!(Config, "folds must be within 1..{}", MAX_FOLD);
        }
        if self.channels == 0 || self.channels > crate::audio::MAX_CHANNELS {
            bail!(Config, "channels must be within 1..{}", crate::audio::MAX_CHANNELS);
        }
        if self.sample_rate == 0 || !(self.duration > 0.0) {
            bail!(Config, "sample_rate and duration must be positive");
        }
        Ok(())
    }

    /// Fold and split of the `index`-th clip of a class. Sessions rotate over folds.
    pub fn placement(&self, index: usize) -> (u8, Split) {
        let folds = self.folds as usize;
        let fold = index % folds;
        let rank = index / folds;
        let in_fold = (self.clips_per_class + folds - 1 - fold) / folds;
        let train_in_fold = (in_fold * self.train_per_class + self.clips_per_class / 2) / self.clips_per_class;
        let split = if rank < train_in_fold { Split::Train } else { Split::Test };
        (fold as u8 + 1, split)
    }

    /// Every clip with its manifest row; audio paths are `audio/<clip_id>.wav`.
    pub fn clips(&self) -> Result<Vec<(ManifestRow, AudioClip)>> {
        self.validate()?;
        let recipes = recipes(self.confusable_trio);
        let mut out = Vec::with_capacity(CLASS_NAMES.len() * self.clips_per_class);
        for (label, recipe) in recipes.iter().enumerate() {
            for index in 0..self.clips_per_class {
                let plan = plan_clip(self, label, index);
                let clip = render_clip(self, &plan, recipe)?;
                let (fold, split) = self.placement(index);
                let row = ManifestRow {
                    clip_id: clip.clip_id.clone(),
                    path: Path::new("audio").join(format!("{}.wav", clip.clip_id)),
                    fold,
                    split,
                    label,
                    session: format!("s{index:03}"),
                };
                out.push((row, clip));
            }
        }
        Ok(out)
    }
}

/// Writes `out_dir/audio/*.wav` and `out_dir/manifest.csv`.
pub fn synth_generate(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir.join("audio"))?;
    let mut rows = Vec::new();
    for (row, clip) in spec.clips()? {
        write_wav(out_dir.join(&row.path), &clip)?;
        rows.push(row);
    }
    let mut manifest = Manifest::new(rows)?;
    manifest.save(out_dir.join("manifest.csv"))?;
    manifest.base_dir = out_dir.to_path_buf();
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{extract_fbank, mel_center_frequencies, FrontendConfig};

    fn small(seed: u64) -> SynthSpec {
        SynthSpec { clips_per_class: 2, train_per_class: 1, duration: 0.5, seed, ..SynthSpec::default() }
    }

    #[test]
    fn counts_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { clips_per_class: 10, train_per_class: 6, duration: 0.2, channels: 2, ..SynthSpec::default() };
        let m = synth_generate(&spec, dir.path()).unwrap();
        assert_eq!(m.rows.len(), 90);
        assert_eq!(fs::read_dir(dir.path().join("audio")).unwrap().count(), 90);
        assert_eq!(m.rows_for(1, Split::Train).len(), 54);
        let reread = Manifest::load(dir.path().join("manifest.csv")).unwrap();
        assert_eq!(reread.rows, m.rows);
        let clip = crate::audio::load_wav(reread.audio_path(&reread.rows[0])).unwrap();
        assert_eq!((clip.num_channels(), clip.num_samples()), (2, 3200));
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        synth_generate(&small(5), a.path()).unwrap();
        synth_generate(&small(5), b.path()).unwrap();
        for name in ["absence_000", "vacuum_cleaner_001", "working_000"] {
            let path = format!("audio/{name}.wav");
            assert_eq!(fs::read(a.path().join(&path)).unwrap(), fs::read(b.path().join(&path)).unwrap());
        }
        let other = small(6).clips().unwrap();
        assert_ne!(other[0].1, small(5).clips().unwrap()[0].1);
    }

    #[test]
    fn recipes_are_distinct() {
        for trio in [false, true] {
            let r = recipes(trio);
            assert_eq!(r.len(), 9);
            for i in 0..9 {
                for j in 0..i {
                    assert_ne!(r[i], r[j], "{i} vs {j}");
                }
            }
        }
    }

    #[test]
    fn channels_differ_by_small_gain_and_delay() {
        let spec = small(1);
        let plan = plan_clip(&spec, 6, 0);
        assert!(plan.channel_gains.iter().all(|g| (db(-1.0)..=db(1.0)).contains(g)));
        assert!(plan.channel_delays.iter().all(|&d| d <= MAX_CHANNEL_DELAY));
        let clip = render_clip(&spec, &plan, &recipes(false)[6]).unwrap();
        assert_ne!(clip.channels[0], clip.channels[1]);
    }

    #[test]
    fn placement_rotates_sessions_over_folds() {
        let spec = SynthSpec { clips_per_class: 8, train_per_class: 4, folds: 4, ..SynthSpec::default() };
        let places: Vec<_> = (0..8).map(|i| spec.placement(i)).collect();
        assert_eq!(places.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 2, 3, 4, 1, 2, 3, 4]);
        assert!(places[..4].iter().all(|p| p.1 == Split::Train));
        assert!(places[4..].iter().all(|p| p.1 == Split::Test));
        let one = SynthSpec::default();
        assert_eq!((0..20).filter(|&i| one.placement(i).1 == Split::Train).count(), 12);
    }

    #[test]
    fn tone_class_peaks_at_nearest_filter() {
        let spec = SynthSpec { duration: 2.0, ..small(3) };
        let label = 4;
        let plan = plan_clip(&spec, label, 1);
        let clip = render_clip(&spec, &plan, &recipes(false)[label]).unwrap();
        let cfg = FrontendConfig::default();
        let f = extract_fbank(&clip, 0, &cfg).unwrap();
        let mean = |b: usize| f.values.row(b).iter().sum::<f64>();
        let peak = (0..f.bins()).max_by(|&a, &b| mean(a).total_cmp(&mean(b))).unwrap();

        let tone = 1000.0 * plan.freq_scale;
        let centers = mel_center_frequencies(&cfg);
        let nearest = (0..centers.len()).min_by(|&a, &b| (centers[a] - tone).abs().total_cmp(&(centers[b] - tone).abs())).unwrap();
        assert_eq!(peak, nearest);
    }
}
