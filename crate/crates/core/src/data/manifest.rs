//! Dataset manifest: one CSV row per clip.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{bail, Error, Result};

pub const MANIFEST_HEADER: [&str; 6] = ["clip_id", "path", "fold", "split", "label", "session"];

/// Activity names; the index is the class label.
pub const CLASS_NAMES: [&str; 9] = [
    "absence",
    "cooking",
    "dishwashing",
    "eating",
    "other",
    "social_activity",
    "vacuum_cleaner",
    "watching_tv",
    "working",
];

pub const MAX_FOLD: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => bail!(Data, "unknown split '{}'", s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub clip_id: String,
    /// Audio path, relative paths resolved against the manifest's directory.
    pub path: PathBuf,
    pub fold: u8,
    pub split: Split,
    pub label: usize,
    pub session: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>) -> Result<Self> {
        let m = Self { rows, base_dir: PathBuf::new() };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.rows {
            if r.clip_id.is_empty() || r.clip_id.chars().any(char::is_control) {
                bail!(Data, "clip id '{}' is empty or has control characters", r.clip_id.escape_debug());
            }
            if !seen.insert(r.clip_id.as_str()) {
                bail!(Data, "duplicate clip id '{}'", r.clip_id);
            }
            if r.label >= CLASS_NAMES.len() {
                bail!(Data, "clip '{}' has label {} outside 0..{}", r.clip_id, r.label, CLASS_NAMES.len() - 1);
            }
            if !(1..=MAX_FOLD).contains(&r.fold) {
                bail!(Data, "clip '{}' has fold {} outside 1..{}", r.clip_id, r.fold, MAX_FOLD);
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| Error::Data(format!("manifest header: {e}")))?;
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            bail!(Data, "manifest header must be '{}'", MANIFEST_HEADER.join(","));
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Data(format!("manifest line {line}: {e}")))?;
            let field = |k: usize| rec.get(k).unwrap_or("");
            let num = |k: usize| -> Result<usize> {
                field(k).parse().map_err(|_| Error::Data(format!("manifest line {line}: bad {} '{}'", MANIFEST_HEADER[k], field(k))))
            };
            rows.push(ManifestRow {
                clip_id: field(0).to_string(),
                path: PathBuf::from(field(1)),
                fold: u8::try_from(num(2)?).map_err(|_| Error::Data(format!("manifest line {line}: fold too large")))?,
                split: field(3).parse().map_err(|e| Error::Data(format!("manifest line {line}: {e}")))?,
                label: num(4)?,
                session: field(5).to_string(),
            });
        }
        Self::new(rows)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut write = |fields: &[&str]| w.write_record(fields).expect("writing to memory");
        write(&MANIFEST_HEADER);
        for r in &self.rows {
            let path = r.path.to_string_lossy();
            write(&[&r.clip_id, &path, &r.fold.to_string(), &r.split.to_string(), &r.label.to_string(), &r.session]);
        }
        String::from_utf8(w.into_inner().expect("flushing to memory")).expect("csv of UTF-8 fields")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut m = Self::parse(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn audio_path(&self, row: &ManifestRow) -> PathBuf {
        if row.path.is_absolute() {
            row.path.clone()
        } else {
            self.base_dir.join(&row.path)
        }
    }

    /// Rows of `fold` in `split`, in manifest order.
    pub fn rows_for(&self, fold: u8, split: Split) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.fold == fold && r.split == split).collect()
    }

    pub fn folds(&self) -> Vec<u8> {
        let mut f: Vec<u8> = self.rows.iter().map(|r| r.fold).collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    pub fn label_of(&self, clip_id: &str) -> Option<usize> {
        self.rows.iter().find(|r| r.clip_id == clip_id).map(|r| r.label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SAMPLE: &str = "clip_id,path,fold,split,label,session\n\
                          a,audio/a.wav,1,train,0,s1\n\
                          b,audio/b.wav,1,test,8,s2\n\
                          c,/abs/c.wav,2,train,4,s1\n";

    #[test]
    fn parses_rows() {
        let m = Manifest::parse(SAMPLE).unwrap();
        assert_eq!(m.rows.len(), 3);
        assert_eq!(m.rows[1].split, Split::Test);
        assert_eq!(m.rows[1].label, 8);
        assert_eq!(m.folds(), vec![1, 2]);
        assert_eq!(m.rows_for(1, Split::Train).len(), 1);
        assert_eq!(m.label_of("c"), Some(4));
    }

    #[test]
    fn resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, SAMPLE).unwrap();
        let m = Manifest::load(&p).unwrap();
        assert_eq!(m.audio_path(&m.rows[0]), dir.path().join("audio/a.wav"));
        assert_eq!(m.audio_path(&m.rows[2]), PathBuf::from("/abs/c.wav"));
    }

    #[test]
    fn rejects_bad_content() {
        let bad_header = SAMPLE.replace("session", "sess");
        assert!(Manifest::parse(&bad_header).is_err());
        let dup = format!("{SAMPLE}a,x.wav,1,train,0,s\n");
        assert!(Manifest::parse(&dup).is_err());
        for row in ["d,x.wav,5,train,0,s", "d,x.wav,0,train,0,s", "d,x.wav,1,train,9,s", "d,x.wav,1,dev,0,s", "d,x.wav,1,train,x,s"] {
            let text = format!("{SAMPLE}{row}\n");
            assert!(matches!(Manifest::parse(&text), Err(Error::Data(_))), "{row}");
        }
    }

    #[test]
    fn class_names_place_confusable_trio() {
        assert_eq!([CLASS_NAMES[0], CLASS_NAMES[4], CLASS_NAMES[8]], ["absence", "other", "working"]);
    }

    fn arb_row() -> impl Strategy<Value = ManifestRow> {
        ("[a-z0-9_]{1,8}", "[a-z/ ,.\"]{1,12}", 1u8..=4, any::<bool>(), 0usize..9, "[a-z0-9]{0,4}").prop_map(
            |(id, path, fold, train, label, session)| ManifestRow {
                clip_id: id,
                path: PathBuf::from(path.trim()).with_extension("wav"),
                fold,
                split: if train { Split::Train } else { Split::Test },
                label,
                session,
            },
        )
    }

    proptest! {
        #[test]
        fn csv_round_trip(rows in prop::collection::vec(arb_row(), 0..12)) {
            let mut seen = HashSet::new();
            let rows: Vec<ManifestRow> = rows.into_iter().filter(|r| seen.insert(r.clip_id.clone())).collect();
            let m = Manifest::new(rows).unwrap();
            prop_assert_eq!(Manifest::parse(&m.to_csv()).unwrap(), m);
        }
    }
}
