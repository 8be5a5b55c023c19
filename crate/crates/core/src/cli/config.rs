//! Experiment configuration: flat `key = value` lines grouped under
//! `[section]` headers. Dataset sections are named `[dataset <name>]`.
//! Unknown sections and keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::baseline::{AugmentationConfig, BinaryRun, CnnConfig};
use crate::error::{Error, Result};
use crate::raster::{Split, SplitCounts, SplitPlan};
use crate::seed::derive_seed;
use crate::synthgen::{PerturbationFamily, PerturbationParams, PseudoDatasetSpec, TextureParams};
use crate::vqvae2::{TrainRun, VqVae2Config};

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub name: String,
    pub texture: String,
    pub family: PerturbationFamily,
    pub strength: f64,
    pub period: usize,
    pub pristine: SplitCounts,
    pub generated: SplitCounts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqvaeSection {
    /// Channel count and seed are filled in per model.
    pub model: VqVae2Config,
    pub run: TrainRun,
    pub per_band: bool,
    pub train_sets: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineSection {
    pub width: usize,
    pub depth: usize,
    pub stem_downsample: bool,
    pub run: BinaryRun,
    pub augmentation: AugmentationConfig,
    /// Each entry names one dataset or several joined by `+` (merged with
    /// equal counts).
    pub train_sets: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluateSection {
    pub cross_test: Vec<String>,
    pub unseen: Option<String>,
    /// Baseline training set used for the unseen-family comparison.
    pub unseen_baseline: Option<String>,
    pub unseen_far: f64,
    pub scatter: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub tile_size: usize,
    pub channels: usize,
    pub far: f64,
    pub score_batch: usize,
    pub datasets: Vec<DatasetConfig>,
    pub vqvae: VqvaeSection,
    pub baseline: BaselineSection,
    pub evaluate: EvaluateSection,
}

/// Keys of one section; every key must be consumed before `finish`.
struct Fields {
    section: String,
    map: BTreeMap<String, String>,
}

impl Fields {
    fn bad(&self, msg: String) -> Error {
        Error::Config(format!("[{}] {msg}", self.section))
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.map.remove(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| self.bad(format!("cannot parse `{key} = {v}`"))),
        }
    }

    fn list(&mut self, key: &str) -> Vec<String> {
        self.map
            .remove(key)
            .map(|v| v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
            .unwrap_or_default()
    }

    fn opt(&mut self, key: &str) -> Option<String> {
        self.map.remove(key).filter(|v| !v.is_empty())
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            Some(k) => Err(self.bad(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

fn flag(v: &str) -> std::result::Result<bool, ()> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(()),
    }
}

impl Fields {
    fn flag(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.map.remove(key) {
            None => Ok(default),
            Some(v) => flag(&v).map_err(|_| self.bad(format!("`{key}` expects true or false, got `{v}`"))),
        }
    }
}

const SPLIT_KEYS: [(Split, &str); 5] = [
    (Split::TrainGan, "train_gan"),
    (Split::TrainDetector, "train_detector"),
    (Split::TrainOneclass, "train_oneclass"),
    (Split::Calibrate, "calibrate"),
    (Split::Test, "test"),
];

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut sections: BTreeMap<String, Fields> = BTreeMap::new();
        let mut dataset_order = Vec::new();
        for (name, props) in ini.iter() {
            let name = name.unwrap_or("").trim().to_string();
            if name.is_empty() {
                if let Some((k, _)) = props.iter().next() {
                    return Err(Error::Config(format!("key `{k}` outside any section")));
                }
                continue;
            }
            let mut map = BTreeMap::new();
            for (k, v) in props.iter() {
                if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                    return Err(Error::Config(format!("[{name}] duplicate key `{k}`")));
                }
            }
            if sections.contains_key(&name) {
                return Err(Error::Config(format!("duplicate section [{name}]")));
            }
            if name.starts_with("dataset ") {
                dataset_order.push(name.clone());
            } else if !["experiment", "vqvae", "baseline", "evaluate"].contains(&name.as_str()) {
                return Err(Error::Config(format!("unknown section [{name}]")));
            }
            sections.insert(name.clone(), Fields { section: name, map });
        }
        let mut take = |name: &str| {
            sections.remove(name).unwrap_or(Fields {
                section: name.to_string(),
                map: BTreeMap::new(),
            })
        };

        let mut f = take("experiment");
        let seed = f.get("seed", 0u64)?;
        let out = PathBuf::from(f.get("out", "vqdetect-out".to_string())?);
        let tile_size = f.get("tile_size", 64usize)?;
        let channels = f.get("channels", 13usize)?;
        let far = f.get("far", 0.1f64)?;
        let score_batch = f.get("score_batch", 32usize)?;
        f.finish()?;

        let mut datasets = Vec::new();
        for section in dataset_order {
            let mut f = take(&section);
            let name = section["dataset ".len()..].trim().to_string();
            if name.is_empty() || name.contains(['/', '\\', '+', ',']) {
                return Err(Error::Config(format!("bad dataset name in [{section}]")));
            }
            let texture = f.get("texture", "lc".to_string())?;
            let family = f.get("family", PerturbationFamily::Checkerboard)?;
            let strength = f.get("strength", 0.5f64)?;
            let period = f.get("period", 4usize)?;
            let mut pristine = SplitCounts::default();
            let mut generated = SplitCounts::default();
            for (split, key) in SPLIT_KEYS {
                pristine.set(split, f.get(&format!("pristine_{key}"), 0usize)?);
                generated.set(split, f.get(&format!("generated_{key}"), 0usize)?);
            }
            f.finish()?;
            datasets.push(DatasetConfig {
                name,
                texture,
                family,
                strength,
                period,
                pristine,
                generated,
            });
        }

        let d = VqVae2Config::desk(channels);
        let r = TrainRun::default();
        let mut f = take("vqvae");
        let vqvae = VqvaeSection {
            model: VqVae2Config {
                hidden_channels: f.get("hidden_channels", d.hidden_channels)?,
                res_channels: f.get("res_channels", d.res_channels)?,
                res_blocks: f.get("res_blocks", d.res_blocks)?,
                code_dim: f.get("code_dim", d.code_dim)?,
                codebook_sizes: [
                    f.get("codebook_bottom", d.codebook_sizes[0])?,
                    f.get("codebook_middle", d.codebook_sizes[1])?,
                    f.get("codebook_top", d.codebook_sizes[2])?,
                ],
                commitment_weight: f.get("commitment_weight", d.commitment_weight)?,
                ema_decay: f.get("ema_decay", d.ema_decay)?,
                ..d
            },
            run: TrainRun {
                max_epochs: f.get("max_epochs", r.max_epochs)?,
                batch_size: f.get("batch_size", r.batch_size)?,
                patience: f.get("patience", r.patience)?,
                min_delta: f.get("min_delta", r.min_delta)?,
                val_fraction: f.get("val_fraction", r.val_fraction)?,
                learning_rate: f.get("learning_rate", r.learning_rate)?,
                seed: 0,
            },
            per_band: f.flag("per_band", true)?,
            train_sets: f.list("train_sets"),
        };
        f.finish()?;

        let c = CnnConfig::desk(channels, false);
        let b = BinaryRun::default();
        let a = AugmentationConfig::default();
        let mut f = take("baseline");
        let baseline = BaselineSection {
            width: f.get("width", c.width)?,
            depth: f.get("depth", c.depth)?,
            stem_downsample: f.flag("stem_downsample", c.stem_downsample)?,
            run: BinaryRun {
                max_epochs: f.get("max_epochs", b.max_epochs)?,
                batch_size: f.get("batch_size", b.batch_size)?,
                patience: f.get("patience", b.patience)?,
                val_fraction: f.get("val_fraction", b.val_fraction)?,
                learning_rate: f.get("learning_rate", b.learning_rate)?,
                seed: 0,
            },
            augmentation: AugmentationConfig {
                blur_probability: f.get("blur_probability", a.blur_probability)?,
                blur_sigma: (f.get("blur_sigma_min", a.blur_sigma.0)?, f.get("blur_sigma_max", a.blur_sigma.1)?),
                shift_probability: f.get("shift_probability", a.shift_probability)?,
                max_shift: f.get("max_shift", a.max_shift)?,
                rotation_probability: f.get("rotation_probability", a.rotation_probability)?,
                flip_probability: f.get("flip_probability", a.flip_probability)?,
            },
            train_sets: f.list("train_sets"),
        };
        f.finish()?;

        let mut f = take("evaluate");
        let evaluate = EvaluateSection {
            cross_test: f.list("cross_test"),
            unseen: f.opt("unseen"),
            unseen_baseline: f.opt("unseen_baseline"),
            unseen_far: f.get("unseen_far", 0.05f64)?,
            scatter: f.opt("scatter"),
        };
        f.finish()?;

        let cfg = Self {
            seed,
            out,
            tile_size,
            channels,
            far,
            score_batch,
            datasets,
            vqvae,
            baseline,
            evaluate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.tile_size < 16 || self.tile_size % 16 != 0 {
            return bad(format!("tile_size {} must be a positive multiple of 16", self.tile_size));
        }
        if ![3, 13].contains(&self.channels) {
            return bad(format!("channels must be 3 or 13, got {}", self.channels));
        }
        for far in [self.far, self.evaluate.unseen_far] {
            if !(far > 0.0 && far < 1.0) {
                return bad(format!("false alarm rate {far} outside (0, 1)"));
            }
        }
        if self.score_batch == 0 {
            return bad("score_batch must be positive".into());
        }
        for d in &self.datasets {
            if TextureParams::preset(&d.texture, self.channels).is_none() {
                return bad(format!("dataset `{}`: unknown texture `{}`", d.name, d.texture));
            }
            if !(0.0..=1.0).contains(&d.strength) || d.period == 0 {
                return bad(format!("dataset `{}`: strength must lie in [0, 1] and period be positive", d.name));
            }
        }
        let known = |n: &str| self.datasets.iter().any(|d| d.name == n);
        let sets = self.vqvae.train_sets.iter().chain(&self.evaluate.cross_test).chain(
            self.evaluate
                .unseen
                .iter()
                .chain(&self.evaluate.scatter),
        );
        for n in sets {
            if !known(n) {
                return bad(format!("unknown dataset `{n}`"));
            }
        }
        for set in self.baseline.train_sets.iter().chain(&self.evaluate.unseen_baseline) {
            for n in set.split('+') {
                if !known(n) {
                    return bad(format!("unknown dataset `{n}` in baseline set `{set}`"));
                }
            }
        }
        if let Some(u) = &self.evaluate.unseen_baseline {
            if !self.baseline.train_sets.contains(u) {
                return bad(format!("unseen_baseline `{u}` is not among the baseline train_sets"));
            }
        }
        let mut model = self.vqvae.model.clone();
        model.input_channels = 1;
        model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.vqvae.run.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.baseline
            .augmentation
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn dataset(&self, name: &str) -> Result<&DatasetConfig> {
        self.datasets
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::Config(format!("unknown dataset `{name}`")))
    }

    pub fn dataset_spec(&self, d: &DatasetConfig) -> PseudoDatasetSpec {
        let seed = derive_seed(self.seed, &format!("dataset-{}", d.name));
        PseudoDatasetSpec {
            name: d.name.clone(),
            n_pristine: d.pristine.total(),
            n_generated: d.generated.total(),
            texture: TextureParams::preset(&d.texture, self.channels).expect("validated texture"),
            perturbation: PerturbationParams {
                family: d.family,
                strength: d.strength,
                period: d.period,
                seed: 0,
            },
            seed,
            tile_size: self.tile_size,
            channels: self.channels,
            plan: Some(SplitPlan {
                pristine: d.pristine,
                generated: d.generated,
                shuffle_seed: derive_seed(seed, "split"),
            }),
        }
    }

    /// Fully resolved configuration in the input format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[experiment]");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out = {}", self.out.display());
        let _ = writeln!(s, "tile_size = {}", self.tile_size);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "far = {}", self.far);
        let _ = writeln!(s, "score_batch = {}", self.score_batch);
        for d in &self.datasets {
            let _ = writeln!(s, "\n[dataset {}]", d.name);
            let _ = writeln!(s, "texture = {}", d.texture);
            let _ = writeln!(s, "family = {}", d.family);
            let _ = writeln!(s, "strength = {}", d.strength);
            let _ = writeln!(s, "period = {}", d.period);
            for (split, key) in SPLIT_KEYS {
                let _ = writeln!(s, "pristine_{key} = {}", d.pristine.get(split));
                let _ = writeln!(s, "generated_{key} = {}", d.generated.get(split));
            }
        }
        let (m, r) = (&self.vqvae.model, &self.vqvae.run);
        let _ = writeln!(s, "\n[vqvae]");
        let _ = writeln!(s, "hidden_channels = {}", m.hidden_channels);
        let _ = writeln!(s, "res_channels = {}", m.res_channels);
        let _ = writeln!(s, "res_blocks = {}", m.res_blocks);
        let _ = writeln!(s, "code_dim = {}", m.code_dim);
        let _ = writeln!(s, "codebook_bottom = {}", m.codebook_sizes[0]);
        let _ = writeln!(s, "codebook_middle = {}", m.codebook_sizes[1]);
        let _ = writeln!(s, "codebook_top = {}", m.codebook_sizes[2]);
        let _ = writeln!(s, "commitment_weight = {}", m.commitment_weight);
        let _ = writeln!(s, "ema_decay = {}", m.ema_decay);
        let _ = writeln!(s, "max_epochs = {}", r.max_epochs);
        let _ = writeln!(s, "batch_size = {}", r.batch_size);
        let _ = writeln!(s, "patience = {}", r.patience);
        let _ = writeln!(s, "min_delta = {}", r.min_delta);
        let _ = writeln!(s, "val_fraction = {}", r.val_fraction);
        let _ = writeln!(s, "learning_rate = {}", r.learning_rate);
        let _ = writeln!(s, "per_band = {}", self.vqvae.per_band);
        let _ = writeln!(s, "train_sets = {}", self.vqvae.train_sets.join(", "));
        let (b, a) = (&self.baseline, &self.baseline.augmentation);
        let _ = writeln!(s, "\n[baseline]");
        let _ = writeln!(s, "width = {}", b.width);
        let _ = writeln!(s, "depth = {}", b.depth);
        let _ = writeln!(s, "stem_downsample = {}", b.stem_downsample);
        let _ = writeln!(s, "max_epochs = {}", b.run.max_epochs);
        let _ = writeln!(s, "batch_size = {}", b.run.batch_size);
        let _ = writeln!(s, "patience = {}", b.run.patience);
        let _ = writeln!(s, "val_fraction = {}", b.run.val_fraction);
        let _ = writeln!(s, "learning_rate = {}", b.run.learning_rate);
        let _ = writeln!(s, "blur_probability = {}", a.blur_probability);
        let _ = writeln!(s, "blur_sigma_min = {}", a.blur_sigma.0);
        let _ = writeln!(s, "blur_sigma_max = {}", a.blur_sigma.1);
        let _ = writeln!(s, "shift_probability = {}", a.shift_probability);
        let _ = writeln!(s, "max_shift = {}", a.max_shift);
        let _ = writeln!(s, "rotation_probability = {}", a.rotation_probability);
        let _ = writeln!(s, "flip_probability = {}", a.flip_probability);
        let _ = writeln!(s, "train_sets = {}", b.train_sets.join(", "));
        let e = &self.evaluate;
        let _ = writeln!(s, "\n[evaluate]");
        let _ = writeln!(s, "cross_test = {}", e.cross_test.join(", "));
        let _ = writeln!(s, "unseen = {}", e.unseen.clone().unwrap_or_default());
        let _ = writeln!(s, "unseen_baseline = {}", e.unseen_baseline.clone().unwrap_or_default());
        let _ = writeln!(s, "unseen_far = {}", e.unseen_far);
        let _ = writeln!(s, "scatter = {}", e.scatter.clone().unwrap_or_default());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[experiment]\nseed = 3\n\n[dataset a]\npristine_test = 4\ngenerated_test = 2\n";

    #[test]
    fn defaults_fill_in_and_echo_round_trips() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.datasets[0].pristine.test, 4);
        assert_eq!(cfg.vqvae.model.codebook_sizes, [512, 128, 64]);
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn inline_comments_ignored() {
        let cfg = ExperimentConfig::parse("[experiment]\nseed = 3 ; root\nfar = 0.05 # target\n").unwrap();
        assert_eq!((cfg.seed, cfg.far), (3, 0.05));
    }

    #[test]
    fn unknown_keys_and_sections_rejected() {
        for bad in [
            "[experiment]\nsede = 3\n",
            "[experimant]\nseed = 3\n",
            "seed = 3\n",
            "[experiment]\nseed = x\n",
            "[experiment]\nfar = 1.5\n",
            "[vqvae]\ntrain_sets = nowhere\n",
            "[dataset a]\nfamily = blur\n",
        ] {
            assert!(matches!(ExperimentConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn dataset_spec_counts_follow_splits() {
        let cfg = ExperimentConfig::parse(
            "[dataset a]\npristine_train_oneclass = 5\npristine_calibrate = 2\ngenerated_test = 3\n",
        )
        .unwrap();
        let spec = cfg.dataset_spec(&cfg.datasets[0]);
        assert_eq!((spec.n_pristine, spec.n_generated), (7, 3));
    }
}
