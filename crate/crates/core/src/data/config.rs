//! Flat `key = value` run configuration with `#` comments.

use std::fs;
use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::features::FrontendConfig;
use crate::model::ModelConfig;
use crate::train::{Selection, TrainConfig};

use super::manifest::CLASS_NAMES;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub frontend: FrontendConfig,
    pub train: TrainConfig,
    pub attention: bool,
    pub dropout: f64,
    /// Train on these labels only, relabeled to their position in the list.
    pub label_subset: Option<Vec<usize>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { frontend: FrontendConfig::default(), train: TrainConfig::default(), attention: true, dropout: 0.2, label_subset: None }
    }
}

impl RunConfig {
    pub fn num_classes(&self) -> usize {
        self.label_subset.as_ref().map_or(CLASS_NAMES.len(), Vec::len)
    }

    /// Model for features of `bins` x `frames`.
    pub fn model_config(&self, bins: usize, frames: usize) -> ModelConfig {
        let mut m = ModelConfig::new(self.num_classes(), self.attention).with_dropout(self.dropout);
        m.gcnn.input_bins = bins;
        m.sam.input_bins = bins;
        m.gcnn.input_frames = frames;
        m.sam.input_frames = frames;
        m.gcnn.stem_kernel[0] = bins;
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "dropout {} outside [0, 1)", self.dropout);
        }
        if let Some(sub) = &self.label_subset {
            if sub.len() < 2 || sub.windows(2).any(|w| w[0] >= w[1]) || sub.iter().any(|&l| l >= CLASS_NAMES.len()) {
                bail!(Config, "label_subset must list at least two sorted, distinct labels below {}", CLASS_NAMES.len());
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", i + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| at(format!("expected key = value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value).map_err(|e| at(e.to_string().trim_start_matches("config error: ").to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => bail!(Config, "invalid value '{}' for {}", v, key),
            }
        }
        let (f, t) = (&mut self.frontend, &mut self.train);
        match key {
            "frame_length" => f.frame_length = num(key, value)?,
            "frame_hop" => f.frame_hop = num(key, value)?,
            "num_mel_bins" => f.num_mel_bins = num(key, value)?,
            "sample_rate" => f.sample_rate = num(key, value)?,
            "fft_size" => f.fft_size = num(key, value)?,
            "log_floor" => f.log_floor = num(key, value)?,
            "learning_rate" => t.learning_rate = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "validation_fraction" => t.validation_fraction = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "adam_beta1" => t.adam.beta1 = num(key, value)?,
            "adam_beta2" => t.adam.beta2 = num(key, value)?,
            "adam_epsilon" => t.adam.epsilon = num(key, value)?,
            "selection" => {
                t.selection = match value {
                    "accuracy" => Selection::Accuracy,
                    "macro_f1" => Selection::MacroF1,
                    _ => bail!(Config, "selection must be accuracy or macro_f1"),
                }
            }
            "lr_decay_every" => t.lr_decay_every = num(key, value)?,
            "lr_decay_factor" => t.lr_decay_factor = num(key, value)?,
            "attention" => self.attention = flag(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "label_subset" => {
                self.label_subset = if value.is_empty() {
                    None
                } else {
                    Some(value.split(',').map(|v| num(key, v.trim())).collect::<Result<_>>()?)
                }
            }
            _ => bail!(Config, "unknown key '{}'", key),
        }
        Ok(())
    }

    /// Text that [`RunConfig::parse`] maps back to `self`.
    pub fn to_text(&self) -> String {
        let (f, t) = (&self.frontend, &self.train);
        let selection = match t.selection {
            Selection::Accuracy => "accuracy",
            Selection::MacroF1 => "macro_f1",
        };
        let subset = self.label_subset.as_ref().map_or(String::new(), |s| {
            s.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
        });
        let lines = [
            format!("frame_length = {}", f.frame_length),
            format!("frame_hop = {}", f.frame_hop),
            format!("num_mel_bins = {}", f.num_mel_bins),
            format!("sample_rate = {}", f.sample_rate),
            format!("fft_size = {}", f.fft_size),
            format!("log_floor = {}", f.log_floor),
            format!("learning_rate = {}", t.learning_rate),
            format!("batch_size = {}", t.batch_size),
            format!("epochs = {}", t.epochs),
            format!("validation_fraction = {}", t.validation_fraction),
            format!("seed = {}", t.seed),
            format!("adam_beta1 = {}", t.adam.beta1),
            format!("adam_beta2 = {}", t.adam.beta2),
            format!("adam_epsilon = {}", t.adam.epsilon),
            format!("selection = {selection}"),
            format!("lr_decay_every = {}", t.lr_decay_every),
            format!("lr_decay_factor = {}", t.lr_decay_factor),
            format!("attention = {}", self.attention),
            format!("dropout = {}", self.dropout),
            format!("label_subset = {subset}"),
        ];
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn values_and_comments() {
        let cfg = RunConfig::parse("epochs = 30  # short\nbatch_size=16\nattention = false\nlabel_subset = 0, 4, 8\nselection = macro_f1\n").unwrap();
        assert_eq!(cfg.train.epochs, 30);
        assert_eq!(cfg.train.batch_size, 16);
        assert!(!cfg.attention);
        assert_eq!(cfg.label_subset, Some(vec![0, 4, 8]));
        assert_eq!(cfg.num_classes(), 3);
        assert_eq!(cfg.train.selection, Selection::MacroF1);
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunConfig::parse("epochs = 3\nbogus = 1\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("bogus"), "{err}");
        let err = RunConfig::parse("\n\nepochs = many\n").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let err = RunConfig::parse("just words\n").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse("batch_size = 0").is_err());
        assert!(RunConfig::parse("label_subset = 4, 0").is_err());
        assert!(RunConfig::parse("label_subset = 0, 9").is_err());
        assert!(RunConfig::parse("dropout = 1.0").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.learning_rate = 3e-4;
        cfg.train.seed = 77;
        cfg.label_subset = Some(vec![0, 4, 8]);
        cfg.frontend.log_floor = 1e-12;
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn default_geometry() {
        let cfg = RunConfig::default();
        let m = cfg.model_config(40, cfg.frontend.num_frames(160_000));
        assert_eq!(m, ModelConfig::new(9, true));
    }
}
