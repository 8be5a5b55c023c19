//! Three-level vector-quantized autoencoder trained on pristine tiles only,
//! and the reconstruction scores it produces for the detector.
//!
//! Latent maps sit at 1/4 (bottom), 1/8 (middle) and 1/16 (top) of the input
//! resolution. Each level snaps encoder outputs to the nearest entry of its
//! own codebook; gradients bypass the snap (straight-through) and codebooks
//! follow exponential moving averages of their assigned latents.

mod codebook;
mod model;
mod score;
mod train;

pub use codebook::{quantize, Codebook, Level, Quantized, DEAD_CODE_UPDATES};
pub use model::{ForwardOutput, LevelCodes, VqVae2Config, VqVae2Model, LEVEL_FACTORS};
pub use score::{reconstruction_score, score_tiles, OneClassModels, Reconstructor};
pub use train::{
    batch_tensor, check_one_class, mean_reconstruction_loss, tile_view, train, EarlyStopper, EpochLog, StopVerdict,
    TrainRun, TrainingLog,
};
