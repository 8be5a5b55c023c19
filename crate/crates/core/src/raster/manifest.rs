use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Label, RasterError};
use crate::error::{io_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    TrainGan,
    TrainDetector,
    TrainOneclass,
    Calibrate,
    Test,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::TrainGan,
        Split::TrainDetector,
        Split::TrainOneclass,
        Split::Calibrate,
        Split::Test,
    ];

    pub fn is_training(self) -> bool {
        matches!(self, Split::TrainGan | Split::TrainDetector | Split::TrainOneclass)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::TrainGan => "train_gan",
            Split::TrainDetector => "train_detector",
            Split::TrainOneclass => "train_oneclass",
            Split::Calibrate => "calibrate",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.to_string() == s)
            .ok_or_else(|| format!("unknown split `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub locator: String,
    pub label: Label,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub entries: Vec<ManifestEntry>,
}

/// Requested tile count per split for one label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SplitCounts {
    pub train_gan: usize,
    pub train_detector: usize,
    pub train_oneclass: usize,
    pub calibrate: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::TrainGan => self.train_gan,
            Split::TrainDetector => self.train_detector,
            Split::TrainOneclass => self.train_oneclass,
            Split::Calibrate => self.calibrate,
            Split::Test => self.test,
        }
    }

    pub fn set(&mut self, split: Split, n: usize) {
        match split {
            Split::TrainGan => self.train_gan = n,
            Split::TrainDetector => self.train_detector = n,
            Split::TrainOneclass => self.train_oneclass = n,
            Split::Calibrate => self.calibrate = n,
            Split::Test => self.test = n,
        }
    }

    pub fn total(&self) -> usize {
        Split::ALL.iter().map(|&s| self.get(s)).sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SplitPlan {
    pub pristine: SplitCounts,
    pub generated: SplitCounts,
    pub shuffle_seed: u64,
}

impl SplitPlan {
    pub fn counts(&self, label: Label) -> &SplitCounts {
        match label {
            Label::Pristine => &self.pristine,
            Label::Generated => &self.generated,
        }
    }
}

/// Assigns tiles to splits: tiles of each label are shuffled under the plan's
/// seed and dealt out in split order. Tiles beyond the plan are left out.
pub fn build_manifest(
    name: &str,
    tiles: &[(String, Label)],
    plan: &SplitPlan,
) -> std::result::Result<DatasetManifest, RasterError> {
    let mut entries = Vec::new();
    for label in [Label::Pristine, Label::Generated] {
        let counts = plan.counts(label);
        let mut pool: Vec<&String> = tiles
            .iter()
            .filter(|(_, l)| *l == label)
            .map(|(loc, _)| loc)
            .collect();
        if counts.total() > pool.len() {
            return Err(RasterError::InsufficientTiles {
                label,
                needed: counts.total(),
                available: pool.len(),
            });
        }
        let stream = match label {
            Label::Pristine => 0,
            Label::Generated => 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(plan.shuffle_seed);
        rng.set_stream(stream);
        pool.shuffle(&mut rng);
        let mut it = pool.into_iter();
        for split in Split::ALL {
            for loc in it.by_ref().take(counts.get(split)) {
                entries.push(ManifestEntry {
                    locator: loc.clone(),
                    label,
                    split,
                });
            }
        }
    }
    Ok(DatasetManifest {
        name: name.to_string(),
        entries,
    })
}

impl DatasetManifest {
    pub fn select(&self, split: Split, label: Option<Label>) -> impl Iterator<Item = &ManifestEntry> {
        self.entries
            .iter()
            .filter(move |e| e.split == split && label.is_none_or(|l| e.label == l))
    }

    pub fn counts(&self) -> BTreeMap<(Split, Label), usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry((e.split, e.label)).or_insert(0) += 1;
        }
        m
    }

    /// True when no locator is assigned to more than one split.
    pub fn is_disjoint(&self) -> bool {
        let mut seen = HashSet::new();
        self.entries.iter().all(|e| seen.insert(e.locator.as_str()))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# dataset={}\n", self.name);
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.locator, e.label, e.split));
        }
        out
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, RasterError> {
        let mut m = DatasetManifest::default();
        for (i, line) in text.lines().enumerate() {
            let bad = |reason: String| RasterError::Manifest { line: i + 1, reason };
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(name) = rest.trim().strip_prefix("dataset=") {
                    m.name = name.to_string();
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [locator, label, split] = fields[..] else {
                return Err(bad(format!("expected 3 tab-separated fields, got {}", fields.len())));
            };
            m.entries.push(ManifestEntry {
                locator: locator.to_string(),
                label: label.parse().map_err(bad)?,
                split: split.parse().map_err(bad)?,
            });
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(Self::from_text(&text)?)
    }
}
