//! In-memory network inputs: both normalizations of every channel of every clip.

use crate::autodiff::Tensor;
use crate::error::{bail, Result};
use crate::features::{global_normalize, time_normalize, FbankMatrix, GlobalNormStats};

/// One channel, `bins x frames` row-major, in both normalizations.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelFeatures {
    pub global: Vec<f32>,
    pub time: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipExample {
    pub clip_id: String,
    pub label: Option<usize>,
    pub channels: Vec<ChannelFeatures>,
}

impl ClipExample {
    pub fn from_fbanks(
        clip_id: impl Into<String>,
        label: Option<usize>,
        fbanks: &[FbankMatrix],
        stats: &GlobalNormStats,
    ) -> Result<Self> {
        let clip_id = clip_id.into();
        if fbanks.is_empty() {
            bail!(DegenerateInput, "clip '{}' has no channels", clip_id);
        }
        let to_f32 = |f: &FbankMatrix| f.values.data.iter().map(|&v| v as f32).collect::<Vec<f32>>();
        let channels = fbanks
            .iter()
            .map(|f| {
                Ok(ChannelFeatures { global: to_f32(&global_normalize(f, stats)?), time: to_f32(&time_normalize(f)?) })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { clip_id, label, channels })
    }
}

/// Clips sharing one feature geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub bins: usize,
    pub frames: usize,
    pub clips: Vec<ClipExample>,
}

impl Dataset {
    pub fn new(bins: usize, frames: usize) -> Self {
        Self { bins, frames, clips: Vec::new() }
    }

    pub fn push(&mut self, clip: ClipExample) -> Result<()> {
        let n = self.bins * self.frames;
        if clip.channels.is_empty() {
            bail!(DegenerateInput, "clip '{}' has no channels", clip.clip_id);
        }
        if clip.channels.iter().any(|c| c.global.len() != n || c.time.len() != n) {
            bail!(Shape, "clip '{}' does not have {}x{} features", clip.clip_id, self.bins, self.frames);
        }
        self.clips.push(clip);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// `(clip, channel)` for every channel of every clip, in order.
    pub fn samples(&self) -> Vec<(usize, usize)> {
        self.clips.iter().enumerate().flat_map(|(i, c)| (0..c.channels.len()).map(move |ch| (i, ch))).collect()
    }

    /// Every label, erroring on an unlabeled clip or a label `>= classes`.
    pub fn labels(&self, classes: usize) -> Result<Vec<usize>> {
        self.clips
            .iter()
            .map(|c| match c.label {
                Some(l) if l < classes => Ok(l),
                Some(l) => bail!(Data, "clip '{}' has label {} but the model has {} classes", c.clip_id, l, classes),
                None => bail!(Data, "clip '{}' is unlabeled", c.clip_id),
            })
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self { bins: self.bins, frames: self.frames, clips: indices.iter().map(|&i| self.clips[i].clone()).collect() }
    }

    /// Keeps clips whose label is in `keep`, relabeled to its position there.
    pub fn restrict_labels(&self, keep: &[usize]) -> Self {
        let clips = self
            .clips
            .iter()
            .filter_map(|c| {
                let pos = keep.iter().position(|&k| Some(k) == c.label)?;
                Some(ClipExample { label: Some(pos), ..c.clone() })
            })
            .collect();
        Self { bins: self.bins, frames: self.frames, clips }
    }

    /// Stacks the chosen samples into `[B, bins, frames, 1]` global and time inputs.
    pub fn batch(&self, samples: &[(usize, usize)]) -> Result<(Tensor, Tensor)> {
        let chans = samples
            .iter()
            .map(|&(ci, ch)| {
                self.clips
                    .get(ci)
                    .and_then(|clip| clip.channels.get(ch))
                    .ok_or_else(|| crate::Error::Contract(format!("sample ({ci}, {ch}) out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        stack(&chans, self.bins, self.frames)
    }
}

impl ClipExample {
    /// All channels as one `[channels, bins, frames, 1]` batch.
    pub fn batch(&self, bins: usize, frames: usize) -> Result<(Tensor, Tensor)> {
        let chans: Vec<&ChannelFeatures> = self.channels.iter().collect();
        stack(&chans, bins, frames)
    }
}

fn stack(chans: &[&ChannelFeatures], bins: usize, frames: usize) -> Result<(Tensor, Tensor)> {
    let n = bins * frames;
    let mut g = Vec::with_capacity(chans.len() * n);
    let mut t = Vec::with_capacity(chans.len() * n);
    for c in chans {
        if c.global.len() != n || c.time.len() != n {
            bail!(Shape, "features are not {}x{}", bins, frames);
        }
        g.extend(c.global.iter().map(|&v| v as f64));
        t.extend(c.time.iter().map(|&v| v as f64));
    }
    let shape = vec![chans.len(), bins, frames, 1];
    Ok((Tensor::new(shape.clone(), g)?, Tensor::new(shape, t)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Matrix;

    fn fbank(id: &str, base: f64) -> FbankMatrix {
        let mut m = Matrix::zeros(2, 3);
        for (i, v) in m.data.iter_mut().enumerate() {
            *v = base + i as f64;
        }
        FbankMatrix { clip_id: id.into(), channel_index: 0, values: m }
    }

    fn stats() -> GlobalNormStats {
        GlobalNormStats { mean: vec![1.0, 4.0], std: vec![2.0, 2.0] }
    }

    #[test]
    fn both_normalizations_are_stored() {
        let c = ClipExample::from_fbanks("a", Some(1), &[fbank("a", 0.0)], &stats()).unwrap();
        assert_eq!(c.channels[0].global, vec![-0.5, 0.0, 0.5, -0.5, 0.0, 0.5]);
        let t = &c.channels[0].time;
        assert!((t[0] + t[1] + t[2]).abs() < 1e-6);
    }

    #[test]
    fn batch_layout() {
        let mut d = Dataset::new(2, 3);
        d.push(ClipExample::from_fbanks("a", Some(0), &[fbank("a", 0.0), fbank("a", 10.0)], &stats()).unwrap()).unwrap();
        d.push(ClipExample::from_fbanks("b", Some(2), &[fbank("b", 20.0)], &stats()).unwrap()).unwrap();
        assert_eq!(d.samples(), vec![(0, 0), (0, 1), (1, 0)]);
        let (g, _) = d.batch(&[(1, 0), (0, 1)]).unwrap();
        assert_eq!(g.shape(), &[2, 2, 3, 1]);
        assert_eq!(g.data()[0], (20.0 - 1.0) / 2.0);
        assert_eq!(g.data()[6], (10.0 - 1.0) / 2.0);
        assert!(d.batch(&[(1, 1)]).is_err());
    }

    #[test]
    fn labels_checked() {
        let mut d = Dataset::new(2, 3);
        d.push(ClipExample::from_fbanks("a", Some(4), &[fbank("a", 0.0)], &stats()).unwrap()).unwrap();
        assert_eq!(d.labels(9).unwrap(), vec![4]);
        assert!(d.labels(3).is_err());
        d.push(ClipExample::from_fbanks("b", None, &[fbank("b", 0.0)], &stats()).unwrap()).unwrap();
        assert!(d.labels(9).is_err());
    }

    #[test]
    fn wrong_geometry_rejected() {
        let mut d = Dataset::new(2, 4);
        assert!(d.push(ClipExample::from_fbanks("a", Some(0), &[fbank("a", 0.0)], &stats()).unwrap()).is_err());
    }

    #[test]
    fn restricting_relabels() {
        let mut d = Dataset::new(2, 3);
        for (i, l) in [0, 3, 4, 8, 1].into_iter().enumerate() {
            d.push(ClipExample::from_fbanks(format!("c{i}"), Some(l), &[fbank("x", 0.0)], &stats()).unwrap()).unwrap();
        }
        let r = d.restrict_labels(&[0, 4, 8]);
        let got: Vec<(String, Option<usize>)> = r.clips.iter().map(|c| (c.clip_id.clone(), c.label)).collect();
        assert_eq!(got, vec![("c0".into(), Some(0)), ("c2".into(), Some(1)), ("c3".into(), Some(2))]);
    }
}
