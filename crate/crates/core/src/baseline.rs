//! Two-class CNN detector used as the generalization foil.
//!
//! A compact convolutional stack stands in for a large image classifier. It
//! keeps the two properties the comparison depends on: the input width
//! follows the dataset's band count, and the first layer either
//! downsamples (stride 2) or keeps full resolution (stride 1).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqdetect_nn::layers::Conv2d;
use vqdetect_nn::optim::{Adam, AdamConfig, Optimizer};
use vqdetect_nn::{Checkpoint, Graph, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::raster::{Label, MultispectralTile};
use crate::seed::derive_seed;
use crate::synthgen::{convolve_separable, gaussian_kernel, quantize, Boundary};
use crate::vqvae2::{batch_tensor, EarlyStopper, EpochLog, TrainingLog};

#[derive(Clone, Debug, PartialEq)]
pub struct CnnConfig {
    pub input_channels: usize,
    /// Stride 2 in the first layer when true, stride 1 when false.
    pub stem_downsample: bool,
    pub width: usize,
    /// Stride-2 convolution blocks after the stem.
    pub depth: usize,
    pub seed: u64,
}

impl CnnConfig {
    pub fn desk(input_channels: usize, stem_downsample: bool) -> Self {
        Self {
            input_channels,
            stem_downsample,
            width: 16,
            depth: 2,
            seed: 0,
        }
    }

    pub fn arch(&self) -> Vec<(String, String)> {
        [
            ("model", "cnn".to_string()),
            ("input_channels", self.input_channels.to_string()),
            ("stem_downsample", self.stem_downsample.to_string()),
            ("width", self.width.to_string()),
            ("depth", self.depth.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    fn from_arch(arch: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| {
            arch.iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Config(format!("checkpoint lacks `{key}`")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Config(format!("bad `{key}` in checkpoint")))
        };
        if get("model")? != "cnn" {
            return Err(Error::Config("checkpoint does not hold a cnn model".into()));
        }
        Ok(Self {
            input_channels: num("input_channels")?,
            stem_downsample: get("stem_downsample")? == "true",
            width: num("width")?,
            depth: num("depth")?,
            seed: 0,
        })
    }
}

/// Conv stack → global average pool → 1×1 conv producing one logit.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: CnnConfig,
    pub params: ParamStore<f32>,
    stem: Conv2d,
    blocks: Vec<Conv2d>,
    head: Conv2d,
}

pub fn build_classifier(config: CnnConfig) -> Result<Classifier> {
    if ![1, 3, 13].contains(&config.input_channels) || config.width == 0 {
        return Err(Error::InvalidParams(format!(
            "unsupported classifier config: {} channels, width {}",
            config.input_channels, config.width
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "cnn-init"));
    let mut params = ParamStore::new();
    let w = config.width;
    let stride = if config.stem_downsample { 2 } else { 1 };
    let stem = Conv2d::new(&mut params, "stem", config.input_channels, w, 3, stride, 1, &mut rng);
    let blocks = (0..config.depth)
        .map(|i| Conv2d::new(&mut params, &format!("block{i}"), w, w, 3, 2, 1, &mut rng))
        .collect();
    let head = Conv2d::new(&mut params, "head", w, 1, 1, 1, 0, &mut rng);
    log::debug!("classifier with {} parameters", params.num_scalars());
    Ok(Classifier {
        config,
        params,
        stem,
        blocks,
        head,
    })
}

impl Classifier {
    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Spatial size of the stem's output for an `h×w` input.
    pub fn first_feature_map(&self, h: usize, w: usize) -> (usize, usize) {
        let s = if self.config.stem_downsample { 2 } else { 1 };
        ((h + 2 - 3) / s + 1, (w + 2 - 3) / s + 1)
    }

    /// Logits `[N, 1, 1, 1]` of a normalized batch.
    pub fn forward<T: vqdetect_nn::Float>(&self, g: &mut Graph<T>, params: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = g.value(x).dims4()?[1];
        if c != self.config.input_channels {
            return Err(Error::ChannelMismatch {
                expected: self.config.input_channels,
                found: c,
            });
        }
        let mut h = self.stem.forward(g, params, x)?;
        h = g.relu(h);
        for b in &self.blocks {
            h = b.forward(g, params, h)?;
            h = g.relu(h);
        }
        let pooled = g.global_avg_pool(h)?;
        Ok(self.head.forward(g, params, pooled)?)
    }

    pub fn logits(&self, batch: &Tensor<f32>) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let z = self.forward(&mut g, &self.params, x)?;
        Ok(g.value(z).data().to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut ckpt = Checkpoint::new(self.config.arch());
        ckpt.meta.push(("seed".into(), self.config.seed.to_string()));
        ckpt.push_store(&self.params);
        Ok(ckpt.save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let ckpt = Checkpoint::load(path)?;
        let mut config = CnnConfig::from_arch(&ckpt.arch)?;
        config.seed = ckpt.meta("seed").and_then(|s| s.parse().ok()).unwrap_or(0);
        let mut model = build_classifier(config)?;
        ckpt.check_arch(&model.config.arch())?;
        ckpt.load_store(&mut model.params)?;
        Ok(model)
    }
}

/// Batch tensor with every band of every tile shifted to zero mean and
/// scaled to unit deviation; the classifier sees texture, not brightness.
pub fn standardized_batch(tiles: &[&MultispectralTile]) -> Result<Tensor<f32>> {
    let mut t = batch_tensor(tiles)?;
    let plane = tiles.first().map_or(0, |t| t.height * t.width);
    for band in t.data_mut().chunks_mut(plane.max(1)) {
        let n = band.len() as f64;
        let mean = band.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = band.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / var.sqrt().max(1e-6);
        for v in band.iter_mut() {
            *v = ((f64::from(*v) - mean) * inv) as f32;
        }
    }
    Ok(t)
}

fn sigmoid(z: f32) -> f64 {
    1.0 / (1.0 + (-f64::from(z)).exp())
}

/// Probability that each tile is generated.
pub fn score_binary_batch(model: &Classifier, tiles: &[MultispectralTile], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(batch_size.max(1)) {
        let refs: Vec<&MultispectralTile> = chunk.iter().collect();
        out.extend(model.logits(&standardized_batch(&refs)?)?.into_iter().map(sigmoid));
    }
    Ok(out)
}

pub fn score_binary(model: &Classifier, tile: &MultispectralTile) -> Result<f64> {
    Ok(score_binary_batch(model, std::slice::from_ref(tile), 1)?[0])
}

/// Fraction of tiles whose probability falls on the side of 0.5 matching
/// their label.
pub fn accuracy(model: &Classifier, tiles: &[MultispectralTile], batch_size: usize) -> Result<f64> {
    let scores = score_binary_batch(model, tiles, batch_size)?;
    let correct = scores
        .iter()
        .zip(tiles)
        .filter(|(s, t)| (**s > 0.5) == (t.label == Label::Generated))
        .count();
    Ok(correct as f64 / tiles.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationConfig {
    pub blur_probability: f64,
    pub blur_sigma: (f64, f64),
    pub shift_probability: f64,
    pub max_shift: usize,
    pub rotation_probability: f64,
    pub flip_probability: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            blur_probability: 0.2,
            blur_sigma: (0.5, 1.5),
            shift_probability: 0.5,
            max_shift: 4,
            rotation_probability: 0.5,
            flip_probability: 0.5,
        }
    }
}

impl AugmentationConfig {
    pub fn none() -> Self {
        Self {
            blur_probability: 0.0,
            shift_probability: 0.0,
            rotation_probability: 0.0,
            flip_probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ps = [
            self.blur_probability,
            self.shift_probability,
            self.rotation_probability,
            self.flip_probability,
        ];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidParams("augmentation probabilities must lie in [0, 1]".into()));
        }
        if !(self.blur_sigma.0 > 0.0 && self.blur_sigma.0 <= self.blur_sigma.1) {
            return Err(Error::InvalidParams("blur sigma range must be positive and ordered".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlipAxis {
    /// Mirror left-right.
    Horizontal,
    /// Mirror top-bottom.
    Vertical,
}

fn remap(tile: &MultispectralTile, h: usize, w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> MultispectralTile {
    let mut out = tile.clone();
    out.height = h;
    out.width = w;
    out.samples.clear();
    for c in 0..tile.channels() {
        let band = tile.band(c);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = src(y, x);
                out.samples.push(band[sy * tile.width + sx]);
            }
        }
    }
    out
}

pub fn flip(tile: &MultispectralTile, axis: FlipAxis) -> MultispectralTile {
    let (h, w) = (tile.height, tile.width);
    match axis {
        FlipAxis::Horizontal => remap(tile, h, w, |y, x| (y, w - 1 - x)),
        FlipAxis::Vertical => remap(tile, h, w, |y, x| (h - 1 - y, x)),
    }
}

/// Counter-clockwise rotation by `quarter_turns` × 90°.
pub fn rotate90(tile: &MultispectralTile, quarter_turns: usize) -> MultispectralTile {
    let mut out = tile.clone();
    for _ in 0..quarter_turns % 4 {
        let (h, w) = (out.height, out.width);
        // output (y, x) of a h×w → w×h turn reads input (x, w − 1 − y)
        out = remap(&out, w, h, |y, x| (x, w - 1 - y));
    }
    out
}

/// Translation by `(dy, dx)` with edge replication.
pub fn shift(tile: &MultispectralTile, dy: isize, dx: isize) -> MultispectralTile {
    let (h, w) = (tile.height as isize, tile.width as isize);
    remap(tile, tile.height, tile.width, |y, x| {
        (
            (y as isize - dy).clamp(0, h - 1) as usize,
            (x as isize - dx).clamp(0, w - 1) as usize,
        )
    })
}

pub fn gaussian_blur(tile: &MultispectralTile, sigma: f64) -> MultispectralTile {
    assert_eq!(tile.height, tile.width, "blur expects square tiles");
    let n = tile.height;
    let kernel = gaussian_kernel(sigma, n / 2);
    let mut out = tile.clone();
    for c in 0..tile.channels() {
        let plane: Vec<f64> = tile.band(c).iter().map(|&v| f64::from(v)).collect();
        let smooth = convolve_separable(&plane, n, &kernel, Boundary::Replicate);
        for (v, s) in out.band_mut(c).iter_mut().zip(smooth) {
            *v = quantize(s);
        }
    }
    out
}

/// Applies each transform independently with its probability.
pub fn augment(tile: &MultispectralTile, config: &AugmentationConfig, seed: u64) -> MultispectralTile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = tile.clone();
    // draws happen unconditionally so each transform's randomness is fixed
    let blur = (rng.gen_bool(config.blur_probability), rng.gen_range(config.blur_sigma.0..=config.blur_sigma.1));
    let m = config.max_shift as isize;
    let shifted = (rng.gen_bool(config.shift_probability), rng.gen_range(-m..=m), rng.gen_range(-m..=m));
    let turn = (rng.gen_bool(config.rotation_probability), rng.gen_range(1..4usize));
    let flipped = (rng.gen_bool(config.flip_probability), rng.gen_bool(0.5));
    if blur.0 && out.height == out.width {
        out = gaussian_blur(&out, blur.1);
    }
    if shifted.0 {
        out = shift(&out, shifted.1, shifted.2);
    }
    if turn.0 {
        // non-square tiles only take the shape-preserving half turn
        let k = if out.height == out.width { turn.1 } else { 2 };
        out = rotate90(&out, k);
    }
    if flipped.0 {
        out = flip(&out, if flipped.1 { FlipAxis::Horizontal } else { FlipAxis::Vertical });
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryRun {
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Epochs without a validation-accuracy gain before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for BinaryRun {
    fn default() -> Self {
        Self {
            max_epochs: 30,
            batch_size: 16,
            patience: 5,
            val_fraction: 0.1,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Minimizes binary cross-entropy (generated = 1) with early stopping on
/// validation accuracy; keeps the best-accuracy parameters.
///
/// The log's `val_loss` column holds the validation error rate
/// (1 − accuracy).
pub fn train_binary(
    model: &mut Classifier,
    tiles: &[MultispectralTile],
    augmentation: &AugmentationConfig,
    run: &BinaryRun,
) -> Result<TrainingLog> {
    augmentation.validate()?;
    if run.patience < 1 || run.batch_size < 1 || run.max_epochs < 1 {
        return Err(Error::InvalidParams("patience, batch_size and max_epochs must be at least 1".into()));
    }
    let has = |l: Label| tiles.iter().any(|t| t.label == l);
    if !has(Label::Pristine) || !has(Label::Generated) {
        return Err(Error::SplitContract("binary training needs both pristine and generated tiles".into()));
    }
    if let Some(t) = tiles.iter().find(|t| t.channels() != model.config.input_channels) {
        return Err(Error::ChannelMismatch {
            expected: model.config.input_channels,
            found: t.channels(),
        });
    }
    let mut idx: Vec<usize> = (0..tiles.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(run.seed, "val-split")));
    let n_val = ((tiles.len() as f64 * run.val_fraction).round() as usize).min(tiles.len() - 1);
    let train_idx = idx.split_off(n_val);
    let val: Vec<MultispectralTile> = idx.iter().map(|&i| tiles[i].clone()).collect();

    let mut adam = Adam::new(
        AdamConfig {
            lr: run.learning_rate,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut stopper = EarlyStopper::new(run.patience, 0.0);
    let mut log = TrainingLog::default();
    let mut best = model.params.clone();
    for epoch in 1..=run.max_epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(run.seed, &format!("epoch-{epoch}"))));
        let mut total = 0.0;
        for chunk in order.chunks(run.batch_size) {
            let batch: Vec<MultispectralTile> = chunk
                .iter()
                .map(|&i| augment(&tiles[i], augmentation, derive_seed(run.seed, &format!("aug-{epoch}-{i}"))))
                .collect();
            let refs: Vec<&MultispectralTile> = batch.iter().collect();
            let targets: Vec<f32> = batch
                .iter()
                .map(|t| if t.label == Label::Generated { 1.0 } else { 0.0 })
                .collect();
            let mut g = Graph::new();
            let x = g.input(standardized_batch(&refs)?);
            let z = model.forward(&mut g, &model.params, x)?;
            let loss = g.bce_with_logits(z, &targets)?;
            total += f64::from(g.value(loss).item()) * chunk.len() as f64;
            let grads = g.backward(loss)?;
            model.params.zero_grad();
            g.accumulate_param_grads(&grads, &mut model.params)?;
            adam.step(&mut model.params);
        }
        let train_loss = total / order.len() as f64;
        let val_error = if val.is_empty() {
            1.0 - accuracy(model, &order.iter().map(|&i| tiles[i].clone()).collect::<Vec<_>>(), run.batch_size)?
        } else {
            1.0 - accuracy(model, &val, run.batch_size)?
        };
        let verdict = stopper.observe(val_error);
        if verdict.improved {
            best = model.params.clone();
            log.best_epoch = epoch;
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss: val_error,
            stopped: verdict.stop,
        });
        log::info!("epoch {epoch}: bce {train_loss:.4} val error {val_error:.3}");
        if verdict.stop {
            break;
        }
    }
    model.params = best;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::bands_for_channels;

    fn tile(side: usize) -> MultispectralTile {
        MultispectralTile {
            height: side,
            width: side,
            bands: bands_for_channels(3).unwrap(),
            samples: (0..3 * side * side).map(|i| (i * 7919 % 65536) as u16).collect(),
            label: Label::Pristine,
            provenance: "t".into(),
            seed: None,
        }
    }

    #[test]
    fn geometric_identities() {
        let t = tile(8);
        assert_eq!(flip(&flip(&t, FlipAxis::Horizontal), FlipAxis::Horizontal), t);
        assert_eq!(flip(&flip(&t, FlipAxis::Vertical), FlipAxis::Vertical), t);
        let mut r = t.clone();
        for _ in 0..4 {
            r = rotate90(&r, 1);
        }
        assert_eq!(r, t);
        assert_ne!(rotate90(&t, 1), t);
        assert_eq!(rotate90(&t, 2), flip(&flip(&t, FlipAxis::Horizontal), FlipAxis::Vertical));
        assert_eq!(shift(&t, 0, 0), t);
    }

    #[test]
    fn shift_replicates_edges() {
        let t = tile(4);
        let s = shift(&t, 0, 2);
        for y in 0..4 {
            assert_eq!(s.band(0)[y * 4], t.band(0)[y * 4]);
            assert_eq!(s.band(0)[y * 4 + 1], t.band(0)[y * 4]);
            assert_eq!(s.band(0)[y * 4 + 3], t.band(0)[y * 4 + 1]);
        }
    }

    #[test]
    fn zero_probabilities_are_identity_and_seeded_runs_repeat() {
        let t = tile(16);
        assert_eq!(augment(&t, &AugmentationConfig::none(), 5), t);
        let cfg = AugmentationConfig {
            blur_probability: 1.0,
            shift_probability: 1.0,
            rotation_probability: 1.0,
            flip_probability: 1.0,
            ..AugmentationConfig::default()
        };
        let a = augment(&t, &cfg, 5);
        assert_eq!(a, augment(&t, &cfg, 5));
        assert_eq!((a.height, a.width, a.label, a.channels()), (16, 16, t.label, 3));
    }

    #[test]
    fn stem_stride_sets_first_feature_map() {
        let down = build_classifier(CnnConfig::desk(13, true)).unwrap();
        let nodown = build_classifier(CnnConfig::desk(13, false)).unwrap();
        assert_eq!(down.first_feature_map(64, 64), (32, 32));
        assert_eq!(nodown.first_feature_map(64, 64), (64, 64));
        // identical parameter shapes: only the stride differs
        assert_eq!(down.num_parameters(), nodown.num_parameters());
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([1, 13, 64, 64]));
        let stem = down.stem.forward(&mut g, &down.params, x).unwrap();
        assert_eq!(g.value(stem).shape(), &[1, 16, 32, 32]);
    }

    #[test]
    fn channel_contract_and_zero_logit() {
        let mut m = build_classifier(CnnConfig::desk(13, true)).unwrap();
        assert!(matches!(score_binary(&m, &tile(16)), Err(Error::ChannelMismatch { .. })));
        for p in m.params.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let t13 = MultispectralTile {
            bands: bands_for_channels(13).unwrap(),
            samples: vec![1000; 13 * 256],
            ..tile(16)
        };
        assert_eq!(score_binary(&m, &t13).unwrap(), 0.5);
    }

    #[test]
    fn same_seed_same_init() {
        let a = build_classifier(CnnConfig::desk(3, false)).unwrap();
        let b = build_classifier(CnnConfig::desk(3, false)).unwrap();
        for (p, q) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(p.value, q.value);
        }
    }
}
