use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vqdetect_nn::optim::{Adam, AdamConfig, Optimizer};
use vqdetect_nn::{Checkpoint, Graph, ParamStore, Tensor};

use super::codebook::{Codebook, Level};
use super::model::{VqVae2Config, VqVae2Model};
use crate::error::{Error, Result};
use crate::raster::{Label, MultispectralTile};
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub min_delta: f64,
    /// Share of the pristine pool held out for early stopping.
    pub val_fraction: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            batch_size: 64,
            patience: 10,
            min_delta: 1e-5,
            val_fraction: 0.1,
            learning_rate: 2e-4,
            seed: 0,
        }
    }
}

impl TrainRun {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 || self.batch_size < 1 || self.max_epochs < 1 {
            return Err(Error::InvalidParams(
                "patience, batch_size and max_epochs must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidParams("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Stops after `patience` epochs without an improvement larger than
/// `min_delta` over the best loss so far.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub min_delta: f64,
    pub best: f64,
    pub since_best: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopVerdict {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> StopVerdict {
        let improved = loss < self.best - self.min_delta;
        if improved {
            self.best = loss;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        StopVerdict {
            improved,
            stop: self.since_best >= self.patience,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub stopped: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainingLog {
    pub fn to_text(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tval_loss\tstopped\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{}\t{:.9e}\t{:.9e}\t{}\n",
                e.epoch, e.train_loss, e.val_loss, e.stopped
            ));
        }
        out
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.epochs
            .get(self.best_epoch.checked_sub(1)?)
            .map(|e| e.val_loss)
    }
}

/// Extracts the training view of a tile: all channels, or the one carrying
/// Sentinel-2 band `band`.
pub fn tile_view(tile: &MultispectralTile, band: Option<usize>) -> Result<MultispectralTile> {
    match band {
        None => Ok(tile.clone()),
        Some(b) => {
            let c = tile.channel_of(b).ok_or(Error::MissingBandModel(b))?;
            Ok(tile.select_channels(&[c]))
        }
    }
}

/// Stacks normalized tiles into a `[N, C, H, W]` batch.
pub fn batch_tensor(tiles: &[&MultispectralTile]) -> Result<Tensor<f32>> {
    let first = tiles
        .first()
        .ok_or_else(|| Error::InvalidParams("empty batch".into()))?;
    let (c, h, w) = (first.channels(), first.height, first.width);
    let mut data = Vec::with_capacity(tiles.len() * c * h * w);
    for t in tiles {
        if (t.channels(), t.height, t.width) != (c, h, w) {
            return Err(Error::InvalidParams("tiles in a batch differ in shape".into()));
        }
        data.extend(t.normalized());
    }
    Ok(Tensor::new([tiles.len(), c, h, w], data)?)
}

/// Errors unless every tile is labeled pristine.
pub fn check_one_class(tiles: &[MultispectralTile]) -> Result<()> {
    match tiles.iter().find(|t| t.label != Label::Pristine) {
        Some(t) => Err(Error::OneClassViolation(format!(
            "generated tile `{}` in a one-class training pool",
            t.provenance
        ))),
        None => Ok(()),
    }
}

/// Held-out validation indices and training indices of a pool of `n`.
fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "val-split")));
    let n_val = ((n as f64 * fraction).round() as usize).clamp(usize::from(fraction > 0.0), n.saturating_sub(1));
    let train = idx.split_off(n_val);
    (idx, train)
}

/// Mean reconstruction MSE over `tiles`, batch by batch.
pub fn mean_reconstruction_loss(model: &mut VqVae2Model, tiles: &[&MultispectralTile], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in tiles.chunks(batch_size.max(1)) {
        let (_, recon) = model.evaluate(&batch_tensor(chunk)?)?;
        total += recon * chunk.len() as f64;
    }
    Ok(total / tiles.len().max(1) as f64)
}

struct State {
    adam: Adam<f32>,
    stopper: EarlyStopper,
    log: TrainingLog,
    best_params: ParamStore<f32>,
    best_codebooks: [Codebook; 3],
    finished: bool,
}

/// Trains `model` on pristine `tiles` with early stopping, keeping the
/// parameters of the best validation epoch.
///
/// `band` restricts training to one Sentinel-2 band. When `resume` is set,
/// training state is written there after every epoch and picked up from it
/// on the next call.
pub fn train(
    model: &mut VqVae2Model,
    tiles: &[MultispectralTile],
    band: Option<usize>,
    run: &TrainRun,
    resume: Option<&Path>,
) -> Result<TrainingLog> {
    run.validate()?;
    check_one_class(tiles)?;
    if tiles.len() < 2 {
        return Err(Error::InvalidParams("training needs at least two tiles".into()));
    }
    let views: Vec<MultispectralTile> = tiles.iter().map(|t| tile_view(t, band)).collect::<Result<_>>()?;
    if views[0].channels() != model.config.input_channels {
        return Err(Error::ChannelMismatch {
            expected: model.config.input_channels,
            found: views[0].channels(),
        });
    }
    let (val_idx, train_idx) = split_indices(views.len(), run.val_fraction, run.seed);
    let val: Vec<&MultispectralTile> = val_idx.iter().map(|&i| &views[i]).collect();

    let adam_config = AdamConfig {
        lr: run.learning_rate,
        ..AdamConfig::default()
    };
    let mut state = match resume.filter(|p| p.exists()) {
        Some(path) => load_state(model, path, run, adam_config)?,
        None => State {
            adam: Adam::new(adam_config, &model.params),
            stopper: EarlyStopper::new(run.patience, run.min_delta),
            log: TrainingLog::default(),
            best_params: model.params.clone(),
            best_codebooks: model.codebooks.clone(),
            finished: false,
        },
    };

    let mut epoch = state.log.epochs.len();
    while !state.finished && epoch < run.max_epochs {
        epoch += 1;
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(run.seed, &format!("epoch-{epoch}"))));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run.seed, &format!("codebook-{epoch}")));
        let mut train_total = 0.0;
        for chunk in order.chunks(run.batch_size) {
            let batch: Vec<&MultispectralTile> = chunk.iter().map(|&i| &views[i]).collect();
            let mut g = Graph::new();
            let x = g.input(batch_tensor(&batch)?);
            let params = std::mem::take(&mut model.params);
            let out = model.forward_graph(&mut g, &params, x, Some(&mut rng));
            model.params = params;
            let out = out?;
            let loss = g.value(out.total_loss).item();
            if !loss.is_finite() {
                return Err(Error::Degenerate(format!("non-finite training loss at epoch {epoch}")));
            }
            train_total += f64::from(loss) * chunk.len() as f64;
            let grads = g.backward(out.total_loss)?;
            model.params.zero_grad();
            g.accumulate_param_grads(&grads, &mut model.params)?;
            state.adam.step(&mut model.params);
            for (level, codes) in out.codes.iter().enumerate() {
                model.codebooks[level].update_ema(&codes.latents, &codes.indices, model.config.ema_decay, &mut rng);
            }
        }
        let train_loss = train_total / order.len().max(1) as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            mean_reconstruction_loss(model, &val, run.batch_size)?
        };
        let verdict = state.stopper.observe(val_loss);
        if verdict.improved {
            state.best_params = model.params.clone();
            state.best_codebooks = model.codebooks.clone();
            state.log.best_epoch = epoch;
        }
        state.finished = verdict.stop;
        state.log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            stopped: verdict.stop,
        });
        log::info!("epoch {epoch}: train {train_loss:.6e} val {val_loss:.6e}");
        if let Some(path) = resume {
            save_state(model, &state, path)?;
        }
    }
    model.params = state.best_params.clone();
    model.codebooks = state.best_codebooks.clone();
    Ok(state.log)
}

fn bits(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn unbits(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::Config(format!("bad float field `{s}` in training state")))
}

fn push_codebooks(ckpt: &mut Checkpoint, prefix: &str, books: &[Codebook; 3]) -> Result<()> {
    for cb in books {
        let k = cb.len();
        let name = format!("{prefix}codebook.{}", cb.level);
        ckpt.push_tensor(format!("{name}.entries"), Tensor::new([k, cb.dim], cb.entries.clone())?);
        ckpt.push_tensor(format!("{name}.usage"), Tensor::new([k], cb.usage_counts.clone())?);
        ckpt.push_tensor(
            format!("{name}.idle"),
            Tensor::new([k], cb.idle_updates.iter().map(|&v| v as f32).collect())?,
        );
        ckpt.meta.push((format!("{name}.initialized"), cb.initialized.to_string()));
    }
    Ok(())
}

fn read_codebooks(ckpt: &Checkpoint, prefix: &str, config: &VqVae2Config) -> Result<[Codebook; 3]> {
    let mut out = Vec::with_capacity(3);
    for (i, level) in Level::ALL.into_iter().enumerate() {
        let name = format!("{prefix}codebook.{level}");
        let entries = ckpt.tensor(&format!("{name}.entries"))?;
        if entries.shape() != [config.codebook_sizes[i], config.code_dim] {
            return Err(Error::Config(format!("{name} has shape {:?}", entries.shape())));
        }
        out.push(Codebook {
            level,
            dim: config.code_dim,
            entries: entries.data().to_vec(),
            usage_counts: ckpt.tensor(&format!("{name}.usage"))?.data().to_vec(),
            idle_updates: ckpt
                .tensor(&format!("{name}.idle"))?
                .data()
                .iter()
                .map(|&v| v as u32)
                .collect(),
            initialized: ckpt.meta(&format!("{name}.initialized")) == Some("true"),
        });
    }
    Ok(out.try_into().expect("three levels"))
}

impl VqVae2Model {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(self.config.arch());
        ckpt.meta.push(("seed".into(), self.config.seed.to_string()));
        ckpt.push_store(&self.params);
        push_codebooks(&mut ckpt, "", &self.codebooks)?;
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut config = VqVae2Config::from_arch(&ckpt.arch)?;
        config.seed = ckpt.meta("seed").and_then(|s| s.parse().ok()).unwrap_or(0);
        let mut model = VqVae2Model::new(config)?;
        ckpt.check_arch(&model.config.arch())?;
        ckpt.load_store(&mut model.params)?;
        model.codebooks = read_codebooks(ckpt, "", &model.config)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_checkpoint()?
            .save(path)
            .map_err(|e| wrap_io(e, path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let ckpt = Checkpoint::load(path).map_err(|e| wrap_io(e, path))?;
        Self::from_checkpoint(&ckpt)
    }
}

fn wrap_io(e: vqdetect_nn::NnError, path: &Path) -> Error {
    match e {
        vqdetect_nn::NnError::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Nn(other),
    }
}

fn save_state(model: &VqVae2Model, state: &State, path: &Path) -> Result<()> {
    let mut ckpt = model.to_checkpoint()?;
    let mut best = Checkpoint::default();
    best.push_store(&state.best_params);
    for (name, t) in best.tensors {
        ckpt.push_tensor(format!("best.{name}"), t);
    }
    push_codebooks(&mut ckpt, "best.", &state.best_codebooks)?;
    for (i, (m, v)) in state.adam.m.iter().zip(&state.adam.v).enumerate() {
        ckpt.push_tensor(format!("adam.m.{i}"), m.clone());
        ckpt.push_tensor(format!("adam.v.{i}"), v.clone());
    }
    let meta = &mut ckpt.meta;
    meta.push(("adam.t".into(), state.adam.t.to_string()));
    meta.push(("stopper.best".into(), bits(state.stopper.best)));
    meta.push(("stopper.since_best".into(), state.stopper.since_best.to_string()));
    meta.push(("finished".into(), state.finished.to_string()));
    meta.push(("best_epoch".into(), state.log.best_epoch.to_string()));
    for e in &state.log.epochs {
        meta.push((
            format!("log.{}", e.epoch),
            format!("{} {} {}", bits(e.train_loss), bits(e.val_loss), e.stopped),
        ));
    }
    // write-then-rename so an interrupted save never clobbers the last state
    let tmp = path.with_extension("partial");
    ckpt.save(&tmp).map_err(|e| wrap_io(e, &tmp))?;
    std::fs::rename(&tmp, path).map_err(crate::error::io_err(path))
}

fn load_state(model: &mut VqVae2Model, path: &Path, run: &TrainRun, adam_config: AdamConfig) -> Result<State> {
    let ckpt = Checkpoint::load(path).map_err(|e| wrap_io(e, path))?;
    ckpt.check_arch(&model.config.arch())?;
    ckpt.load_store(&mut model.params)?;
    model.codebooks = read_codebooks(&ckpt, "", &model.config)?;
    let mut best_params = model.params.clone();
    for p in best_params.iter_mut() {
        p.value = ckpt.tensor(&format!("best.{}", p.name))?.clone();
    }
    let best_codebooks = read_codebooks(&ckpt, "best.", &model.config)?;
    let mut adam = Adam::new(adam_config, &model.params);
    for i in 0..adam.m.len() {
        adam.m[i] = ckpt.tensor(&format!("adam.m.{i}"))?.clone();
        adam.v[i] = ckpt.tensor(&format!("adam.v.{i}"))?.clone();
    }
    let field = |k: &str| {
        ckpt.meta(k)
            .ok_or_else(|| Error::Config(format!("training state lacks `{k}`")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        field(k)?
            .parse()
            .map_err(|_| Error::Config(format!("bad `{k}` in training state")))
    };
    adam.t = parse_usize("adam.t")? as u64;
    let mut log = TrainingLog {
        epochs: Vec::new(),
        best_epoch: parse_usize("best_epoch")?,
    };
    let mut epoch = 1;
    while let Some(line) = ckpt.meta(&format!("log.{epoch}")) {
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != 3 {
            return Err(Error::Config(format!("bad log line for epoch {epoch}")));
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss: unbits(f[0])?,
            val_loss: unbits(f[1])?,
            stopped: f[2] == "true",
        });
        epoch += 1;
    }
    Ok(State {
        adam,
        stopper: EarlyStopper {
            patience: run.patience,
            min_delta: run.min_delta,
            best: unbits(field("stopper.best")?)?,
            since_best: parse_usize("stopper.since_best")?,
        },
        log,
        best_params,
        best_codebooks,
        finished: field("finished")? == "true",
    })
}
