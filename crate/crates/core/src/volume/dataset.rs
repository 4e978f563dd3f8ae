//! Dataset manifests (`path<TAB>label<TAB>split` lines) and stratified
//! train/test splitting.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ClassLabel;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
    /// Not yet assigned to either side.
    None,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::None => "none",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "none" => Ok(Split::None),
            other => Err(Error::invalid(format!(
                "unknown split `{other}` (expected train, test or none)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub path: PathBuf,
    pub label: ClassLabel,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<Entry>,
    /// Seed of the split that produced the tags, if any.
    pub seed: Option<u64>,
}

const SEED_PREFIX: &str = "# seed=";

impl Manifest {
    pub fn new(entries: Vec<Entry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if !seen.insert(&e.path) {
                return Err(Error::Manifest {
                    line: i + 1,
                    msg: format!("duplicate path {}", e.path.display()),
                });
            }
        }
        Ok(Manifest {
            entries,
            seed: None,
        })
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of entries per class, indexed AD, MCI, CN.
    pub fn class_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for e in &self.entries {
            c[e.label.index()] += 1;
        }
        c
    }

    /// Parses manifest text. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let seed = text
            .lines()
            .find_map(|l| l.strip_prefix(SEED_PREFIX))
            .map(|s| {
                s.trim().parse::<u64>().map_err(|_| Error::Manifest {
                    line: 0,
                    msg: format!("bad seed `{s}`"),
                })
            })
            .transpose()?;
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .has_headers(false)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut entries = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Manifest {
                line: e.position().map_or(0, |p| p.line() as usize),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let err = |msg: String| Error::Manifest { line, msg };
            if rec.len() != 3 {
                return Err(err(format!(
                    "expected 3 tab-separated fields, got {}",
                    rec.len()
                )));
            }
            let path = Path::new(&rec[0]);
            let label = rec[1]
                .parse::<ClassLabel>()
                .map_err(|e| err(e.to_string()))?;
            let split = rec[2].parse::<Split>().map_err(|e| err(e.to_string()))?;
            entries.push(Entry {
                path: if path.is_absolute() {
                    path.to_path_buf()
                } else {
                    base.join(path)
                },
                label,
                split,
            });
        }
        let mut m = Manifest::new(entries)?;
        m.seed = seed;
        Ok(m)
    }

    /// Serializes with paths written relative to `base` where possible.
    pub fn to_tsv(&self, base: &Path) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .delimiter(b'\t')
            .has_headers(false)
            .from_writer(Vec::new());
        for e in &self.entries {
            let abs = std::path::absolute(&e.path)?;
            let rel = abs.strip_prefix(base).unwrap_or(&e.path);
            let path = rel
                .to_str()
                .ok_or_else(|| Error::invalid(format!("non UTF-8 path {}", rel.display())))?;
            w.write_record([path, e.label.as_str(), &e.split.to_string()])
                .map_err(|e| Error::invalid(e.to_string()))?;
        }
        let body = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        let mut out = String::new();
        if let Some(seed) = self.seed {
            out.push_str(&format!("{SEED_PREFIX}{seed}\n"));
        }
        out.push_str(&String::from_utf8(body).expect("written from str"));
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = std::path::absolute(path)?
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let base = std::path::absolute(path)?
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        std::fs::write(path, self.to_tsv(&base)?)?;
        Ok(())
    }

    /// Entries carrying `split`.
    pub fn with_split(&self, split: Split) -> Manifest {
        Manifest {
            entries: self
                .entries
                .iter()
                .filter(|e| e.split == split)
                .cloned()
                .collect(),
            seed: self.seed,
        }
    }
}

/// Training share of a class of `count` items: `floor(fraction * count)`.
/// The small epsilon keeps exact products such as `0.8 * 5` from rounding
/// down to 3.
pub fn train_count(count: usize, fraction: f64) -> usize {
    ((fraction * count as f64) + 1e-9).floor().min(count as f64) as usize
}

/// Per class: shuffle with `seed`, put the first `floor(fraction * count)`
/// entries in train and the rest in test. Both outputs keep manifest order.
pub fn stratified_split(m: &Manifest, fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!(
            "split fraction must lie in [0, 1], got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_train = vec![false; m.entries.len()];
    for label in ClassLabel::ALL {
        let mut idx: Vec<usize> = (0..m.entries.len())
            .filter(|&i| m.entries[i].label == label)
            .collect();
        idx.shuffle(&mut rng);
        let k = train_count(idx.len(), fraction);
        for &i in &idx[..k] {
            is_train[i] = true;
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (e, &t) in m.entries.iter().zip(&is_train) {
        let mut e = e.clone();
        if t {
            e.split = Split::Train;
            train.push(e);
        } else {
            e.split = Split::Test;
            test.push(e);
        }
    }
    Ok((
        Manifest {
            entries: train,
            seed: Some(seed),
        },
        Manifest {
            entries: test,
            seed: Some(seed),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(counts: [usize; 3]) -> Manifest {
        let mut entries = Vec::new();
        for label in ClassLabel::ALL {
            for i in 0..counts[label.index()] {
                entries.push(Entry {
                    path: PathBuf::from(format!("/d/{label}_{i}.nii")),
                    label,
                    split: Split::None,
                });
            }
        }
        Manifest::new(entries).unwrap()
    }

    #[test]
    fn floor_rule() {
        assert_eq!(train_count(476, 0.8), 380);
        assert_eq!(train_count(1116, 0.8), 892);
        assert_eq!(train_count(702, 0.8), 561);
        assert_eq!(train_count(5, 0.8), 4);
        assert_eq!(train_count(3, 1.0), 3);
    }

    #[test]
    fn halves_and_boundaries() {
        let m = manifest([4, 4, 4]);
        let (tr, te) = stratified_split(&m, 0.5, 1).unwrap();
        assert_eq!(tr.class_counts(), [2, 2, 2]);
        assert_eq!(te.class_counts(), [2, 2, 2]);
        let (tr, te) = stratified_split(&m, 1.0, 1).unwrap();
        assert_eq!(tr.len(), 12);
        assert!(te.is_empty());
        assert!(stratified_split(&m, 1.5, 1).is_err());
    }

    #[test]
    fn tsv_round_trip() {
        let (mut tr, _) = stratified_split(&manifest([2, 1, 1]), 0.5, 9).unwrap();
        tr.seed = Some(9);
        let text = tr.to_tsv(Path::new("/d")).unwrap();
        assert!(text.starts_with("# seed=9\n"));
        assert!(text.contains("AD_0.nii\tAD\ttrain") || text.contains("AD_1.nii\tAD\ttrain"));
        let back = Manifest::parse(&text, Path::new("/d")).unwrap();
        assert_eq!(back, tr);
    }

    #[test]
    fn parse_errors_carry_line() {
        let err =
            Manifest::parse("a.nii\tAD\ttrain\nb.nii\tXX\ttrain\n", Path::new("/")).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 2, .. }), "{err}");
        let err =
            Manifest::parse("a.nii\tAD\ttrain\na.nii\tCN\ttest\n", Path::new("/")).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
        assert!(Manifest::parse("a.nii\tAD\n", Path::new("/")).is_err());
    }
}
