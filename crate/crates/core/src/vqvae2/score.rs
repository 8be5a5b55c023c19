use vqdetect_nn::Tensor;

use super::model::VqVae2Model;
use super::train::{batch_tensor, tile_view};
use crate::detector::{ScoreVector, NUM_BANDS};
use crate::error::{Error, Result};
use crate::raster::MultispectralTile;

/// Anything that maps a normalized `[N, C, H, W]` batch to a reconstruction.
pub trait Reconstructor {
    fn input_channels(&self) -> usize;
    fn reconstruct(&mut self, batch: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Reconstructor for VqVae2Model {
    fn input_channels(&self) -> usize {
        self.config.input_channels
    }

    fn reconstruct(&mut self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        VqVae2Model::reconstruct(self, batch)
    }
}

/// One joint model over all bands, or one single-band model per band
/// ordinal.
pub enum OneClassModels<R> {
    Joint(R),
    PerBand(Vec<(usize, R)>),
}

fn band_mse(x: &[f32], r: &[f32]) -> f64 {
    let sum: f64 = x
        .iter()
        .zip(r)
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .sum();
    sum / x.len().max(1) as f64
}

/// Per-band MSE between each tile (normalized) and its reconstruction.
pub fn score_tiles<R: Reconstructor>(
    models: &mut OneClassModels<R>,
    tiles: &[MultispectralTile],
    batch_size: usize,
) -> Result<Vec<ScoreVector>> {
    let mut bands: Vec<[Option<f64>; NUM_BANDS]> = vec![[None; NUM_BANDS]; tiles.len()];
    match models {
        OneClassModels::Joint(model) => {
            for (chunk_idx, chunk) in tiles.chunks(batch_size.max(1)).enumerate() {
                for t in chunk {
                    if t.channels() != model.input_channels() {
                        return Err(Error::ChannelMismatch {
                            expected: model.input_channels(),
                            found: t.channels(),
                        });
                    }
                }
                let refs: Vec<&MultispectralTile> = chunk.iter().collect();
                let x = batch_tensor(&refs)?;
                let r = model.reconstruct(&x)?;
                for (i, t) in chunk.iter().enumerate() {
                    for (c, spec) in t.bands.iter().enumerate() {
                        bands[chunk_idx * batch_size.max(1) + i][spec.index] = Some(band_mse(x.plane(i, c), r.plane(i, c)));
                    }
                }
            }
        }
        OneClassModels::PerBand(per_band) => {
            for t in tiles {
                for spec in &t.bands {
                    if !per_band.iter().any(|(b, _)| *b == spec.index) {
                        return Err(Error::MissingBandModel(spec.index));
                    }
                }
            }
            for (band, model) in per_band.iter_mut() {
                let views: Vec<(usize, MultispectralTile)> = tiles
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| t.channel_of(*band).is_some())
                    .map(|(i, t)| Ok((i, tile_view(t, Some(*band))?)))
                    .collect::<Result<_>>()?;
                for chunk in views.chunks(batch_size.max(1)) {
                    let refs: Vec<&MultispectralTile> = chunk.iter().map(|(_, v)| v).collect();
                    let x = batch_tensor(&refs)?;
                    let r = model.reconstruct(&x)?;
                    for (i, (tile_idx, _)) in chunk.iter().enumerate() {
                        bands[*tile_idx][*band] = Some(band_mse(x.plane(i, 0), r.plane(i, 0)));
                    }
                }
            }
        }
    }
    tiles
        .iter()
        .zip(bands)
        .map(|(t, b)| ScoreVector::new(b, t.provenance.clone(), Some(t.label)))
        .collect()
}

/// Score vector of a single tile.
pub fn reconstruction_score<R: Reconstructor>(models: &mut OneClassModels<R>, tile: &MultispectralTile) -> Result<ScoreVector> {
    Ok(score_tiles(models, std::slice::from_ref(tile), 1)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{bands_for_channels, Label};

    struct Identity(usize);

    impl Reconstructor for Identity {
        fn input_channels(&self) -> usize {
            self.0
        }
        fn reconstruct(&mut self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
            Ok(batch.clone())
        }
    }

    /// Adds `delta` to channel `channel` only.
    struct Offset {
        channels: usize,
        channel: usize,
        delta: f32,
    }

    impl Reconstructor for Offset {
        fn input_channels(&self) -> usize {
            self.channels
        }
        fn reconstruct(&mut self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
            let [_, c, h, w] = batch.dims4()?;
            let mut out = batch.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                if (i / (h * w)) % c == self.channel {
                    *v += self.delta;
                }
            }
            Ok(out)
        }
    }

    fn tile(channels: usize) -> MultispectralTile {
        MultispectralTile {
            height: 16,
            width: 16,
            bands: bands_for_channels(channels).unwrap(),
            samples: (0..channels * 256).map(|i| (i * 37 % 65535) as u16).collect(),
            label: Label::Pristine,
            provenance: "t".into(),
            seed: None,
        }
    }

    #[test]
    fn identity_scores_zero() {
        let t = tile(13);
        let s = reconstruction_score(&mut OneClassModels::Joint(Identity(13)), &t).unwrap();
        assert!(s.band_scores.iter().all(|b| *b == Some(0.0)));
        let mut per_band = OneClassModels::PerBand((0..13).map(|b| (b, Identity(1))).collect());
        let s2 = reconstruction_score(&mut per_band, &t).unwrap();
        assert_eq!(s, s2, "both modes share one schema");
    }

    #[test]
    fn offset_on_one_band_scores_delta_squared() {
        let t = tile(13);
        let delta = 0.125f32;
        let mut m = OneClassModels::Joint(Offset {
            channels: 13,
            channel: 4,
            delta,
        });
        let s = reconstruction_score(&mut m, &t).unwrap();
        for b in 0..13 {
            let want = if b == 4 { f64::from(delta).powi(2) } else { 0.0 };
            assert!((s.band_scores[b].unwrap() - want).abs() < 1e-9);
        }
    }

    #[test]
    fn rgb_tiles_score_only_rgb_bands_and_missing_models_error() {
        let t = tile(3);
        let mut m = OneClassModels::PerBand((0..13).map(|b| (b, Identity(1))).collect());
        let s = reconstruction_score(&mut m, &t).unwrap();
        assert_eq!(s.present_bands(), vec![1, 2, 3]);
        let mut partial = OneClassModels::PerBand(vec![(3, Identity(1)), (2, Identity(1))]);
        assert!(matches!(reconstruction_score(&mut partial, &t), Err(Error::MissingBandModel(1))));
        assert!(matches!(
            reconstruction_score(&mut OneClassModels::Joint(Identity(13)), &t),
            Err(Error::ChannelMismatch { .. })
        ));
    }
}
