//! Command-line entry point: synthesis, ingestion, training, calibration,
//! detection, evaluation and reporting, all driven by one config file.
//!
//! Output layout under `out/`:
//!
//! ```text
//! data/<name>/…tile, data/<name>.manifest   pseudo-datasets and ingested tiles
//! models/vqvae/<set>/<band|joint>.{ckpt,log,state}
//! models/baseline/<set>/cnn.{ckpt,log}
//! thresholds/<set>__<dataset>.thresholds
//! detect/<set>__<dataset>.tsv
//! reports/{results.tsv,summary.txt,report.txt,scatter_<dataset>.{svg,tsv}}
//! echo/<command>.conf                       resolved config of each run
//! ```

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use config::{BaselineSection, DatasetConfig, EvaluateSection, ExperimentConfig, VqvaeSection};

use crate::baseline::{build_classifier, train_binary, Classifier, CnnConfig};
use crate::detector::{calibrate, detect, pca_project, scatter_export, score_features, ThresholdSet};
use crate::error::{io_err, Error, Result};
use crate::eval::{
    cross_test, emit_report, equal_count_merge, parse_report_table, report_summary, BinaryDetector, ExperimentMatrix,
    OneClassDetector, TestPools, TrainedDetector, UnseenSetup,
};
use crate::raster::{
    bands_for_channels, build_manifest, filter_nodata, load_tile, retile, save_tile, sentinel2_bands, BandSpec,
    DatasetManifest, Interpolation, Label, MultispectralTile, NoDataPolicy, Raster, Scene, Split, SplitPlan,
    BAND_NAMES,
};
use crate::seed::derive_seed;
use crate::synthgen::{build_pseudo_dataset, manifest_path};
use crate::vqvae2::{score_tiles, train, OneClassModels, VqVae2Config, VqVae2Model};

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_BAD_CONFIG: i32 = 2;
pub const EXIT_MISSING_INPUT: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "vqdetect", version, about = "One-class detection of generated multispectral tiles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Root seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Train and use one single-band model per band.
    #[arg(long, global = true)]
    pub per_band: bool,
    /// Target false alarm rate; overrides `far` in the config.
    #[arg(long, global = true)]
    pub far: Option<f64>,
    /// Tile side in pixels; overrides `tile_size` in the config.
    #[arg(long, global = true)]
    pub tile_size: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the pseudo-datasets declared in the config.
    Synth,
    /// Upsample, retile and filter scenes into a dataset.
    Ingest(IngestArgs),
    /// Train the one-class autoencoders on pristine tiles.
    TrainVqvae,
    /// Train the two-class baseline.
    TrainBaseline,
    /// Calibrate per-band thresholds on pristine calibration pools.
    Calibrate,
    /// Score and flag test tiles with calibrated thresholds.
    Detect,
    /// Run the cross-dataset and unseen-family protocols.
    Evaluate,
    /// Re-render the summary from the stored result table.
    Report,
}

#[derive(Debug, clap::Args)]
pub struct IngestArgs {
    /// Dataset name under `out/data`.
    #[arg(long)]
    pub name: String,
    /// Label given to every ingested tile; by default each input keeps its
    /// own (a scene's `label` key, a tile's stored label).
    #[arg(long)]
    pub label: Option<Label>,
    /// Split the ingested tiles are assigned to.
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Largest tolerated fraction of zero samples; strict when absent.
    #[arg(long)]
    pub nodata_fraction: Option<f64>,
    /// `.tile` files or `.scene` band sidecars.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidParams(_) | Error::NameCollision(_) => EXIT_BAD_CONFIG,
        Error::MissingInput(_) | Error::MissingBandModel(_) => EXIT_MISSING_INPUT,
        _ => EXIT_RUNTIME,
    }
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    if let Command::Ingest(args) = &cli.command {
        return cmd_ingest(cli, args);
    }
    let ctx = Ctx::new(cli)?;
    ctx.echo()?;
    match &cli.command {
        Command::Synth => ctx.synth(),
        Command::TrainVqvae => ctx.train_vqvae(),
        Command::TrainBaseline => ctx.train_baseline(),
        Command::Calibrate => ctx.calibrate(),
        Command::Detect => ctx.detect(),
        Command::Evaluate => ctx.evaluate(),
        Command::Report => ctx.report(),
        Command::Ingest(_) => unreachable!("handled above"),
    }
}

/// Resolved config plus the command line it came from.
struct Ctx<'a> {
    cli: &'a Cli,
    cfg: ExperimentConfig,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(far) = cli.far {
        cfg.far = far;
    }
    if let Some(t) = cli.tile_size {
        cfg.tile_size = t;
    }
    if cli.per_band {
        cfg.vqvae.per_band = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        mkdir(parent)?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth => "synth",
        Command::Ingest(_) => "ingest",
        Command::TrainVqvae => "train-vqvae",
        Command::TrainBaseline => "train-baseline",
        Command::Calibrate => "calibrate",
        Command::Detect => "detect",
        Command::Evaluate => "evaluate",
        Command::Report => "report",
    }
}

fn dataset_context(name: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| {
        log::error!("dataset `{name}`: {e}");
        e
    }
}

impl<'a> Ctx<'a> {
    fn new(cli: &'a Cli) -> Result<Self> {
        Ok(Self {
            cli,
            cfg: load_config(cli)?,
        })
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.cfg.out.join(rel)
    }

    fn store(&self) -> PathBuf {
        self.out("data")
    }

    fn echo(&self) -> Result<()> {
        let path = self.out(&format!("echo/{}.conf", command_name(&self.cli.command)));
        write(&path, &self.cfg.to_text())
    }

    fn manifest(&self, name: &str) -> Result<DatasetManifest> {
        let path = manifest_path(&self.store(), name);
        if !path.exists() {
            return Err(Error::MissingInput(path));
        }
        DatasetManifest::load(path)
    }

    /// Tiles of `split` in dataset `name`, optionally of one label.
    fn tiles(&self, name: &str, split: Split, label: Option<Label>) -> Result<Vec<MultispectralTile>> {
        let manifest = self.manifest(name)?;
        let store = self.store();
        manifest
            .select(split, label)
            .map(|e| {
                let path = store.join(&e.locator);
                if !path.exists() {
                    return Err(Error::MissingInput(path));
                }
                load_tile(path)
            })
            .collect()
    }

    fn pools(&self, name: &str) -> Result<TestPools> {
        TestPools::from_manifest(&self.store(), &self.manifest(name)?).map_err(dataset_context(name))
    }

    fn eval_sets(&self) -> Vec<String> {
        if self.cfg.evaluate.cross_test.is_empty() {
            self.cfg.datasets.iter().map(|d| d.name.clone()).collect()
        } else {
            self.cfg.evaluate.cross_test.clone()
        }
    }

    fn synth(&self) -> Result<()> {
        let store = self.store();
        mkdir(&store)?;
        for d in &self.cfg.datasets {
            let spec = self.cfg.dataset_spec(d);
            let stamp = store.join(format!("{}.spec", d.name));
            let echo = format!("seed = {}\n{}", spec.seed, dataset_echo(&self.cfg, d));
            let exists = manifest_path(&store, &d.name).exists() || store.join(&d.name).exists();
            if exists && !self.cli.force {
                if fs::read_to_string(&stamp).ok().as_deref() == Some(echo.as_str()) {
                    println!("synth: `{}` already present, skipping (use --force to rebuild)", d.name);
                    continue;
                }
                return Err(Error::NameCollision(d.name.clone()));
            }
            let manifest = build_pseudo_dataset(&store, &spec, true).map_err(dataset_context(&d.name))?;
            write(&stamp, &echo)?;
            println!("synth: `{}` with {} tiles", d.name, manifest.entries.len());
        }
        Ok(())
    }

    fn vqvae_dir(&self, set: &str) -> PathBuf {
        self.out(&format!("models/vqvae/{set}"))
    }

    /// Band ordinals of the configured channel layout.
    fn band_indices(&self) -> Vec<usize> {
        bands_for_channels(self.cfg.channels)
            .expect("validated channel count")
            .iter()
            .map(|b| b.index)
            .collect()
    }

    fn model_config(&self, set: &str, tag: &str, channels: usize) -> VqVae2Config {
        VqVae2Config {
            input_channels: channels,
            seed: derive_seed(self.cfg.seed, &format!("vqvae-{set}-{tag}")),
            ..self.cfg.vqvae.model.clone()
        }
    }

    fn train_vqvae(&self) -> Result<()> {
        if self.cfg.vqvae.train_sets.is_empty() {
            return Err(Error::Config("[vqvae] train_sets is empty".into()));
        }
        for set in &self.cfg.vqvae.train_sets {
            let tiles = self.tiles(set, Split::TrainOneclass, None)?;
            if tiles.is_empty() {
                return Err(dataset_context(set)(Error::SplitContract(
                    "no tiles in the train_oneclass split".into(),
                )));
            }
            let dir = self.vqvae_dir(set);
            mkdir(&dir)?;
            let jobs: Vec<(String, Option<usize>, usize)> = if self.cfg.vqvae.per_band {
                self.band_indices()
                    .into_iter()
                    .map(|b| (BAND_NAMES[b].to_string(), Some(b), 1))
                    .collect()
            } else {
                vec![("joint".to_string(), None, self.cfg.channels)]
            };
            for (tag, band, channels) in jobs {
                let config = self.model_config(set, &tag, channels);
                let run = crate::vqvae2::TrainRun {
                    seed: config.seed,
                    ..self.cfg.vqvae.run.clone()
                };
                let state = dir.join(format!("{tag}.state"));
                if self.cli.force && state.exists() {
                    fs::remove_file(&state).map_err(io_err(&state))?;
                }
                let mut model = VqVae2Model::new(config)?;
                let log = train(&mut model, &tiles, band, &run, Some(&state)).map_err(dataset_context(set))?;
                model.save(dir.join(format!("{tag}.ckpt")))?;
                write(&dir.join(format!("{tag}.log")), &log.to_text())?;
                println!(
                    "train-vqvae: `{set}` {tag}: {} epochs, best {} (val {:.6e})",
                    log.epochs.len(),
                    log.best_epoch,
                    log.best_val_loss().unwrap_or(f64::NAN)
                );
            }
        }
        Ok(())
    }

    fn oneclass_models(&self, set: &str) -> Result<OneClassModels<VqVae2Model>> {
        let dir = self.vqvae_dir(set);
        if self.cfg.vqvae.per_band {
            let models = self
                .band_indices()
                .into_iter()
                .map(|b| Ok((b, VqVae2Model::load(dir.join(format!("{}.ckpt", BAND_NAMES[b])))?)))
                .collect::<Result<_>>()?;
            Ok(OneClassModels::PerBand(models))
        } else {
            Ok(OneClassModels::Joint(VqVae2Model::load(dir.join("joint.ckpt"))?))
        }
    }

    fn baseline_dir(&self, set: &str) -> PathBuf {
        self.out(&format!("models/baseline/{set}"))
    }

    fn train_baseline(&self) -> Result<()> {
        let b = &self.cfg.baseline;
        if b.train_sets.is_empty() {
            return Err(Error::Config("[baseline] train_sets is empty".into()));
        }
        for set in &b.train_sets {
            let parts: Vec<Vec<MultispectralTile>> = set
                .split('+')
                .map(|n| self.tiles(n, Split::TrainDetector, None))
                .collect::<Result<_>>()?;
            let tiles = if parts.len() == 1 {
                parts.into_iter().next().unwrap_or_default()
            } else {
                let refs: Vec<&[MultispectralTile]> = parts.iter().map(Vec::as_slice).collect();
                equal_count_merge(&refs)
            };
            let seed = derive_seed(self.cfg.seed, &format!("cnn-{set}"));
            let mut model = build_classifier(CnnConfig {
                input_channels: self.cfg.channels,
                stem_downsample: b.stem_downsample,
                width: b.width,
                depth: b.depth,
                seed,
            })?;
            let run = crate::baseline::BinaryRun {
                seed,
                ..b.run.clone()
            };
            let log = train_binary(&mut model, &tiles, &b.augmentation, &run).map_err(dataset_context(set))?;
            let dir = self.baseline_dir(set);
            mkdir(&dir)?;
            model.save(dir.join("cnn.ckpt"))?;
            write(&dir.join("cnn.log"), &log.to_text())?;
            println!(
                "train-baseline: `{set}` {} parameters, {} epochs, best {}",
                model.num_parameters(),
                log.epochs.len(),
                log.best_epoch
            );
        }
        Ok(())
    }

    fn threshold_path(&self, set: &str, dataset: &str) -> PathBuf {
        self.out(&format!("thresholds/{set}__{dataset}.thresholds"))
    }

    fn calibrate(&self) -> Result<()> {
        for set in &self.cfg.vqvae.train_sets {
            let mut models = self.oneclass_models(set)?;
            for dataset in self.eval_sets() {
                let pool = self.tiles(&dataset, Split::Calibrate, Some(Label::Pristine))?;
                let scores = score_tiles(&mut models, &pool, self.cfg.score_batch)?;
                let th = calibrate(&scores, self.cfg.far, &format!("{dataset}:calibrate")).map_err(dataset_context(&dataset))?;
                let path = self.threshold_path(set, &dataset);
                if let Some(parent) = path.parent() {
                    mkdir(parent)?;
                }
                th.save(&path)?;
                println!(
                    "calibrate: `{set}` on `{dataset}`: {} pristine tiles, far {}",
                    th.calibration_size, th.target_far
                );
            }
        }
        Ok(())
    }

    fn detect(&self) -> Result<()> {
        let names = sentinel2_bands();
        for set in &self.cfg.vqvae.train_sets {
            let mut models = self.oneclass_models(set)?;
            for dataset in self.eval_sets() {
                let th = ThresholdSet::load(self.threshold_path(set, &dataset))?;
                let tiles = self.tiles(&dataset, Split::Test, None)?;
                let scores = score_tiles(&mut models, &tiles, self.cfg.score_batch)?;
                let bands: Vec<usize> = (0..names.len()).filter(|&b| th.per_band[b].is_some()).collect();
                let mut text = String::from("tile\tlabel\ttotal\tflagged");
                for &b in &bands {
                    text.push('\t');
                    text.push_str(names[b].name());
                }
                text.push('\n');
                let mut flagged = 0;
                for s in &scores {
                    let d = detect(s, &th, true)?;
                    let any = d.aggregated == Some(true);
                    flagged += usize::from(any);
                    let label = s.label.map(|l| l.to_string()).unwrap_or_default();
                    text.push_str(&format!("{}\t{label}\t{:e}\t{}", s.tile_ref, s.total_score, u8::from(any)));
                    for &b in &bands {
                        text.push_str(&format!("\t{}", u8::from(d.per_band[b] == Some(true))));
                    }
                    text.push('\n');
                }
                write(&self.out(&format!("detect/{set}__{dataset}.tsv")), &text)?;
                println!("detect: `{set}` on `{dataset}`: {flagged} of {} tiles flagged", scores.len());
            }
        }
        Ok(())
    }

    fn baseline_name(&self) -> &'static str {
        if self.cfg.baseline.stem_downsample {
            "cnn_down"
        } else {
            "cnn_nodown"
        }
    }

    fn load_baseline(&self, set: &str) -> Result<Classifier> {
        Classifier::load(self.baseline_dir(set).join("cnn.ckpt"))
    }

    fn evaluate(&self) -> Result<()> {
        let cfg = &self.cfg;
        let batch = cfg.score_batch;
        let reports = self.out("reports");
        mkdir(&reports)?;
        let mut detectors: Vec<TrainedDetector> = Vec::new();
        for set in &cfg.vqvae.train_sets {
            detectors.push(TrainedDetector {
                train_id: set.clone(),
                name: "vqvae2".into(),
                detector: Box::new(OneClassDetector {
                    models: self.oneclass_models(set)?,
                    batch_size: batch,
                }),
            });
        }
        for set in &cfg.baseline.train_sets {
            detectors.push(TrainedDetector {
                train_id: set.clone(),
                name: self.baseline_name().into(),
                detector: Box::new(BinaryDetector {
                    model: self.load_baseline(set)?,
                    batch_size: batch,
                }),
            });
        }
        let mut matrices = Vec::new();
        let mut artifacts = Vec::new();
        let sets = self.eval_sets();
        if !detectors.is_empty() && !sets.is_empty() {
            let pools: Vec<TestPools> = sets.iter().map(|n| self.pools(n)).collect::<Result<_>>()?;
            let mut m = cross_test(&mut detectors, &pools, cfg.far, cfg.seed)?;
            for p in &pools {
                m.metadata.push((format!("pools {}", p.id), format!("{} calibrate / {} test", p.calibration.len(), p.generated.len())));
            }
            matrices.push(m);
        }
        if let Some(unseen) = &cfg.evaluate.unseen {
            matrices.push(self.unseen(unseen)?);
        }
        if let Some(name) = &cfg.evaluate.scatter {
            artifacts.push(self.scatter(name)?);
        }
        let rerun = format!(
            "vqdetect evaluate --config {} --out {} --seed {} --far {} --tile-size {}{}",
            self.cli.config.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            cfg.out.display(),
            cfg.seed,
            cfg.far,
            cfg.tile_size,
            if cfg.vqvae.per_band { " --per-band" } else { "" }
        );
        let mut echo = cfg.to_text();
        echo.push_str(&format!("\n# detector settings\n# vqvae per_band = {}\n# baseline = {}\n", cfg.vqvae.per_band, self.baseline_name()));
        let report = emit_report(&matrices, &artifacts, &echo, &rerun, &reports)?;
        print!("{}", report_summary(&matrices));
        println!("evaluate: wrote {} and {}", report.table.display(), report.summary.display());
        Ok(())
    }

    fn unseen(&self, unseen: &str) -> Result<ExperimentMatrix> {
        let cfg = &self.cfg;
        let oneclass_set = cfg
            .vqvae
            .train_sets
            .first()
            .ok_or_else(|| Error::Config("unseen-family test needs a [vqvae] train set".into()))?;
        let binary_set = cfg
            .evaluate
            .unseen_baseline
            .as_ref()
            .or_else(|| cfg.baseline.train_sets.first())
            .ok_or_else(|| Error::Config("unseen-family test needs a [baseline] train set".into()))?;
        let train_families = binary_set
            .split('+')
            .map(|n| Ok(cfg.dataset(n)?.family))
            .collect::<Result<Vec<_>>>()?;
        let setup = UnseenSetup {
            oneclass_train: oneclass_set.clone(),
            binary_train: binary_set.clone(),
            train_families,
            unseen_family: cfg.dataset(unseen)?.family,
        };
        let mut one = OneClassDetector {
            models: self.oneclass_models(oneclass_set)?,
            batch_size: cfg.score_batch,
        };
        let mut bin = BinaryDetector {
            model: self.load_baseline(binary_set)?,
            batch_size: cfg.score_batch,
        };
        let pools = self.pools(unseen)?;
        crate::eval::unseen_architecture_test(&mut one, &mut bin, &pools, &setup, cfg.evaluate.unseen_far, cfg.seed)
    }

    fn scatter(&self, name: &str) -> Result<PathBuf> {
        let set = self
            .cfg
            .vqvae
            .train_sets
            .first()
            .ok_or_else(|| Error::Config("scatter needs a [vqvae] train set".into()))?;
        let mut models = self.oneclass_models(set)?;
        let pools = self.pools(name)?;
        let mut tiles = pools.calibration;
        tiles.extend(pools.generated);
        let scores = score_tiles(&mut models, &tiles, self.cfg.score_batch)?;
        let projection = pca_project(&score_features(&scores)?)?;
        let labels: Vec<Label> = tiles.iter().map(|t| t.label).collect();
        let path = self.out(&format!("reports/scatter_{name}.svg"));
        let title = format!(
            "{name}: reconstruction scores, PC1 {:.1}% PC2 {:.1}%",
            100.0 * projection.explained_variance[0],
            100.0 * projection.explained_variance[1]
        );
        scatter_export(&projection.points, &labels, &title, &path)?;
        Ok(path)
    }

    fn report(&self) -> Result<()> {
        let table = self.out("reports/results.tsv");
        if !table.exists() {
            return Err(Error::MissingInput(table));
        }
        let text = fs::read_to_string(&table).map_err(io_err(&table))?;
        let matrices = parse_report_table(&text)?;
        let summary = report_summary(&matrices);
        write(&self.out("reports/report.txt"), &summary)?;
        print!("{summary}");
        Ok(())
    }
}

fn dataset_echo(cfg: &ExperimentConfig, d: &DatasetConfig) -> String {
    let single = ExperimentConfig {
        datasets: vec![d.clone()],
        ..cfg.clone()
    };
    let text = single.to_text();
    // the dataset section alone, plus the geometry it depends on
    let start = text.find("[dataset ").unwrap_or(0);
    let end = text[start..].find("\n[vqvae]").map_or(text.len(), |e| start + e);
    format!("tile_size = {}\nchannels = {}\n{}", cfg.tile_size, cfg.channels, &text[start..end])
}

/// Reads a `.scene` sidecar: `label`, `interpolation` and `provenance` keys
/// plus a `[bands]` section mapping band names to raw little-endian u16
/// square rasters (paths relative to the sidecar).
fn read_scene(path: &Path) -> Result<Scene> {
    let ini = ini::Ini::load_from_file(path).map_err(|e| match e {
        ini::Error::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        ini::Error::Parse(p) => Error::Config(format!("{}: {p}", path.display())),
    })?;
    let general = ini.general_section();
    let mut label = Label::Pristine;
    let mut mode = Interpolation::Nearest;
    let mut provenance = path.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
    for (k, v) in general.iter() {
        match k {
            "label" => label = v.parse().map_err(Error::Config)?,
            "interpolation" => mode = v.parse().map_err(Error::Config)?,
            "provenance" => provenance = v.to_string(),
            _ => return Err(Error::Config(format!("{}: unknown key `{k}`", path.display()))),
        }
    }
    for (section, _) in ini.iter() {
        if let Some(s) = section.filter(|s| *s != "bands") {
            return Err(Error::Config(format!("{}: unknown section [{s}]", path.display())));
        }
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let all = sentinel2_bands();
    let mut bands = Vec::new();
    let Some(listed) = ini.section(Some("bands")) else {
        return Err(Error::Config(format!("{}: no [bands] section", path.display())));
    };
    for (name, file) in listed.iter() {
        let spec = all
            .iter()
            .find(|b| b.name() == name)
            .ok_or_else(|| Error::Config(format!("{}: unknown band `{name}`", path.display())))?;
        let raw_path = dir.join(file);
        if !raw_path.exists() {
            return Err(Error::MissingInput(raw_path));
        }
        let bytes = fs::read(&raw_path).map_err(io_err(&raw_path))?;
        let n = bytes.len() / 2;
        let side = (n as f64).sqrt().round() as usize;
        if bytes.len() % 2 != 0 || side * side != n {
            return Err(Error::Config(format!("{}: not a square u16 raster", raw_path.display())));
        }
        let data = bytes.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
        bands.push((
            BandSpec::at_native(spec.index, spec.native_gsd, side as u32),
            Raster::new(side, side, data),
        ));
    }
    if bands.is_empty() {
        return Err(Error::Config(format!("{}: [bands] lists no band", path.display())));
    }
    bands.sort_by_key(|(b, _)| b.index);
    Ok(Scene::from_native_bands(bands, mode, provenance, label)?)
}

fn tile_scene(path: &Path) -> Result<Scene> {
    let tile = load_tile(path)?;
    let planes = (0..tile.channels())
        .map(|c| Raster::new(tile.height, tile.width, tile.band(c).to_vec()))
        .collect();
    Ok(Scene {
        bands: tile.bands.clone(),
        planes,
        provenance: tile.provenance.clone(),
        label: tile.label,
    })
}

fn cmd_ingest(cli: &Cli, args: &IngestArgs) -> Result<()> {
    let (out, tile_size) = match &cli.config {
        Some(_) => {
            let cfg = load_config(cli)?;
            (cfg.out, cli.tile_size.unwrap_or(cfg.tile_size))
        }
        None => (
            cli.out
                .clone()
                .ok_or_else(|| Error::Config("ingest needs --out or --config".into()))?,
            cli.tile_size.unwrap_or(512),
        ),
    };
    if let Some(f) = args.nodata_fraction {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Config(format!("nodata fraction {f} outside [0, 1]")));
        }
    }
    let store = out.join("data");
    let dir = store.join(&args.name);
    let mpath = manifest_path(&store, &args.name);
    if (dir.exists() || mpath.exists()) && !cli.force {
        return Err(Error::NameCollision(args.name.clone()));
    }
    for input in &args.inputs {
        if !input.exists() {
            return Err(Error::MissingInput(input.clone()));
        }
    }
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    mkdir(&dir)?;
    let policy = args.nodata_fraction.map_or(NoDataPolicy::Strict, NoDataPolicy::Fraction);
    let mut listed = Vec::new();
    for input in &args.inputs {
        let mut scene = if input.extension().is_some_and(|e| e == "scene") {
            read_scene(input)?
        } else {
            tile_scene(input)?
        };
        if let Some(label) = args.label {
            scene.label = label;
        }
        let tiles = retile(&scene, tile_size)?;
        let total = tiles.len();
        let kept = filter_nodata(tiles, policy);
        log::info!("{}: {} of {total} tiles kept", input.display(), kept.len());
        for t in kept {
            let loc = format!("{}/i{:05}.tile", args.name, listed.len());
            save_tile(&t, store.join(&loc))?;
            listed.push((loc, t.label));
        }
    }
    let count = |label| listed.iter().filter(|(_, l)| *l == label).count();
    let mut plan = SplitPlan::default();
    plan.pristine.set(args.split, count(Label::Pristine));
    plan.generated.set(args.split, count(Label::Generated));
    let manifest = build_manifest(&args.name, &listed, &plan)?;
    manifest.save(&mpath)?;
    println!("ingest: `{}` with {} tiles of {tile_size}×{tile_size}", args.name, listed.len());
    Ok(())
}
