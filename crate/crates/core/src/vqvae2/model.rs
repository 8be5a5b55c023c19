use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vqdetect_nn::layers::{Conv2d, ConvTranspose2d, ResBlock};
use vqdetect_nn::{Float, Graph, ParamStore, Tensor, Var};

use super::codebook::{quantize, Codebook, Level};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Spatial reduction of the bottom, middle and top latent maps.
pub const LEVEL_FACTORS: [usize; 3] = [4, 8, 16];

#[derive(Clone, Debug, PartialEq)]
pub struct VqVae2Config {
    pub input_channels: usize,
    pub hidden_channels: usize,
    pub res_channels: usize,
    pub res_blocks: usize,
    pub code_dim: usize,
    /// Entries per codebook: bottom, middle, top.
    pub codebook_sizes: [usize; 3],
    pub commitment_weight: f64,
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for VqVae2Config {
    fn default() -> Self {
        Self {
            input_channels: 13,
            hidden_channels: 128,
            res_channels: 64,
            res_blocks: 2,
            code_dim: 64,
            codebook_sizes: [512, 128, 64],
            commitment_weight: 0.25,
            ema_decay: 0.99,
            seed: 0,
        }
    }
}

impl VqVae2Config {
    /// Small network used for desk-scale runs.
    pub fn desk(input_channels: usize) -> Self {
        Self {
            input_channels,
            hidden_channels: 16,
            res_channels: 8,
            res_blocks: 1,
            code_dim: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        if ![1, 3, 13].contains(&self.input_channels) {
            return bad("input_channels must be 1, 3 or 13");
        }
        if self.hidden_channels == 0 || self.res_channels == 0 || self.code_dim == 0 {
            return bad("layer widths must be positive");
        }
        if self.codebook_sizes.contains(&0) {
            return bad("codebook sizes must be positive");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("ema_decay must lie in (0, 1)");
        }
        if !(self.commitment_weight >= 0.0) {
            return bad("commitment_weight must be non-negative");
        }
        Ok(())
    }

    /// Key/value echo stored with checkpoints.
    pub fn arch(&self) -> Vec<(String, String)> {
        [
            ("model", "vqvae2".to_string()),
            ("input_channels", self.input_channels.to_string()),
            ("hidden_channels", self.hidden_channels.to_string()),
            ("res_channels", self.res_channels.to_string()),
            ("res_blocks", self.res_blocks.to_string()),
            ("code_dim", self.code_dim.to_string()),
            (
                "codebook_sizes",
                self.codebook_sizes.map(|s| s.to_string()).join(","),
            ),
            ("commitment_weight", self.commitment_weight.to_string()),
            ("ema_decay", self.ema_decay.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_arch(arch: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
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
        let real = |key: &str| -> Result<f64> {
            get(key)?
                .parse()
                .map_err(|_| Error::Config(format!("bad `{key}` in checkpoint")))
        };
        if get("model")? != "vqvae2" {
            return Err(Error::Config("checkpoint does not hold a vqvae2 model".into()));
        }
        let sizes: Vec<usize> = get("codebook_sizes")?
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::Config("bad `codebook_sizes`".into())))
            .collect::<Result<_>>()?;
        let codebook_sizes: [usize; 3] = sizes
            .try_into()
            .map_err(|_| Error::Config("`codebook_sizes` needs three values".into()))?;
        Ok(Self {
            input_channels: num("input_channels")?,
            hidden_channels: num("hidden_channels")?,
            res_channels: num("res_channels")?,
            res_blocks: num("res_blocks")?,
            code_dim: num("code_dim")?,
            codebook_sizes,
            commitment_weight: real("commitment_weight")?,
            ema_decay: real("ema_decay")?,
            seed: 0,
        })
    }
}

/// Convolution stack followed by residual blocks and a final ReLU.
#[derive(Clone, Debug)]
struct Stage {
    convs: Vec<Conv2d>,
    res: Vec<ResBlock>,
}

impl Stage {
    fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mut x: Var) -> Result<Var> {
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(g, store, x)?;
            if i < last {
                x = g.relu(x);
            }
        }
        for r in &self.res {
            x = r.forward(g, store, x)?;
        }
        Ok(g.relu(x))
    }
}

#[derive(Clone, Debug)]
struct Network {
    enc_b: Stage,
    enc_m: Stage,
    enc_t: Stage,
    pre_t: Conv2d,
    dec_t: Stage,
    dec_t_out: ConvTranspose2d,
    pre_m: Conv2d,
    up_t_m: ConvTranspose2d,
    dec_m: Stage,
    dec_m_out: ConvTranspose2d,
    pre_b: Conv2d,
    up_m_b: ConvTranspose2d,
    up_t_b: ConvTranspose2d,
    dec_b: Stage,
    out1: ConvTranspose2d,
    out2: ConvTranspose2d,
}

impl Network {
    fn new(cfg: &VqVae2Config, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Self {
        let (c, r, d) = (cfg.hidden_channels, cfg.res_channels, cfg.code_dim);
        let res = |store: &mut ParamStore<f32>, name: &str, rng: &mut ChaCha8Rng| {
            (0..cfg.res_blocks)
                .map(|i| ResBlock::new(store, &format!("{name}.res{i}"), c, r, rng))
                .collect::<Vec<_>>()
        };
        let enc_b = Stage {
            convs: vec![
                Conv2d::new(store, "enc_b.conv0", cfg.input_channels, c, 4, 2, 1, rng),
                Conv2d::new(store, "enc_b.conv1", c, c, 4, 2, 1, rng),
                Conv2d::new(store, "enc_b.conv2", c, c, 3, 1, 1, rng),
            ],
            res: res(store, "enc_b", rng),
        };
        let enc_m = Stage {
            convs: vec![
                Conv2d::new(store, "enc_m.conv0", c, c, 4, 2, 1, rng),
                Conv2d::new(store, "enc_m.conv1", c, c, 3, 1, 1, rng),
            ],
            res: res(store, "enc_m", rng),
        };
        let enc_t = Stage {
            convs: vec![
                Conv2d::new(store, "enc_t.conv0", c, c, 4, 2, 1, rng),
                Conv2d::new(store, "enc_t.conv1", c, c, 3, 1, 1, rng),
            ],
            res: res(store, "enc_t", rng),
        };
        let pre_t = Conv2d::new(store, "pre_t", c, d, 1, 1, 0, rng);
        let dec_t = Stage {
            convs: vec![Conv2d::new(store, "dec_t.conv0", d, c, 3, 1, 1, rng)],
            res: res(store, "dec_t", rng),
        };
        let dec_t_out = ConvTranspose2d::new(store, "dec_t.out", c, d, 4, 2, 1, rng);
        let pre_m = Conv2d::new(store, "pre_m", c + d, d, 1, 1, 0, rng);
        let up_t_m = ConvTranspose2d::new(store, "up_t_m", d, d, 4, 2, 1, rng);
        let dec_m = Stage {
            convs: vec![Conv2d::new(store, "dec_m.conv0", 2 * d, c, 3, 1, 1, rng)],
            res: res(store, "dec_m", rng),
        };
        let dec_m_out = ConvTranspose2d::new(store, "dec_m.out", c, d, 4, 2, 1, rng);
        let pre_b = Conv2d::new(store, "pre_b", c + d, d, 1, 1, 0, rng);
        let up_m_b = ConvTranspose2d::new(store, "up_m_b", d, d, 4, 2, 1, rng);
        let up_t_b = ConvTranspose2d::new(store, "up_t_b", d, d, 8, 4, 2, rng);
        let dec_b = Stage {
            convs: vec![Conv2d::new(store, "dec_b.conv0", 3 * d, c, 3, 1, 1, rng)],
            res: res(store, "dec_b", rng),
        };
        let out1 = ConvTranspose2d::new(store, "out1", c, c, 4, 2, 1, rng);
        let out2 = ConvTranspose2d::new(store, "out2", c, cfg.input_channels, 4, 2, 1, rng);
        Self {
            enc_b,
            enc_m,
            enc_t,
            pre_t,
            dec_t,
            dec_t_out,
            pre_m,
            up_t_m,
            dec_m,
            dec_m_out,
            pre_b,
            up_m_b,
            up_t_b,
            dec_b,
            out1,
            out2,
        }
    }
}

/// Per-level latents and assignments of one forward pass, in level order
/// bottom, middle, top. Latents are rows of `code_dim` in `(n, y, x)` order.
#[derive(Clone, Debug, Default)]
pub struct LevelCodes {
    pub latents: Vec<f32>,
    pub indices: Vec<usize>,
}

pub struct ForwardOutput {
    pub reconstruction: Var,
    pub total_loss: Var,
    pub reconstruction_loss: Var,
    /// Commitment terms, bottom, middle, top.
    pub commitment: [Var; 3],
    pub codes: [LevelCodes; 3],
}

/// Three-level vector-quantized autoencoder.
#[derive(Clone, Debug)]
pub struct VqVae2Model {
    pub config: VqVae2Config,
    pub params: ParamStore<f32>,
    /// Bottom, middle, top.
    pub codebooks: [Codebook; 3],
    net: Network,
}

/// `[N, D, h, w]` → rows of `D` in `(n, y, x)` order.
fn to_rows<T: Float>(t: &Tensor<T>) -> Result<Vec<T>> {
    let [n, d, h, w] = t.dims4()?;
    let hw = h * w;
    let src = t.data();
    let mut rows = vec![T::zero(); src.len()];
    for b in 0..n {
        for c in 0..d {
            for p in 0..hw {
                rows[(b * hw + p) * d + c] = src[(b * d + c) * hw + p];
            }
        }
    }
    Ok(rows)
}

fn from_rows<T: Float>(rows: &[T], shape: [usize; 4]) -> Tensor<T> {
    let [n, d, h, w] = shape;
    let hw = h * w;
    let mut data = vec![T::zero(); rows.len()];
    for b in 0..n {
        for c in 0..d {
            for p in 0..hw {
                data[(b * d + c) * hw + p] = rows[(b * hw + p) * d + c];
            }
        }
    }
    Tensor::new(shape.to_vec(), data).expect("row count matches shape")
}

impl VqVae2Model {
    pub fn new(config: VqVae2Config) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "vqvae2-init"));
        let mut params = ParamStore::new();
        let net = Network::new(&config, &mut params, &mut rng);
        let codebooks = [0, 1, 2].map(|i| Codebook::new(Level::ALL[i], config.codebook_sizes[i], config.code_dim, &mut rng));
        Ok(Self {
            config,
            params,
            codebooks,
            net,
        })
    }

    /// Builds the forward graph over `params` (which may be a cast copy of
    /// the model's own store). When `init_rng` is given, codebooks that were
    /// never seeded are initialized from this batch's encoder outputs.
    pub fn forward_graph<T: Float>(
        &mut self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        x: Var,
        init_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        let [_, c, h, w] = g.value(x).dims4()?;
        if c != self.config.input_channels {
            return Err(Error::ChannelMismatch {
                expected: self.config.input_channels,
                found: c,
            });
        }
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidParams(format!(
                "input {h}×{w} is not a positive multiple of 16"
            )));
        }
        let net = &self.net;
        let codebooks = &mut self.codebooks;
        let mut init_rng = init_rng;
        let mut codes: [LevelCodes; 3] = Default::default();
        let mut commitment = Vec::with_capacity(3);

        let mut quantize_level = |g: &mut Graph<T>, z: Var, level: usize| -> Result<Var> {
            let zt = g.value(z).clone();
            let rows = to_rows(&zt)?;
            let cb = &mut codebooks[level];
            if let Some(rng) = init_rng.as_deref_mut() {
                if !cb.initialized {
                    let rows32: Vec<f32> = rows.iter().map(|v| v.as_f64() as f32).collect();
                    cb.init_from(&rows32, rng);
                }
            }
            let q = quantize(&rows, cb)?;
            let qt = from_rows(&q.quantized, zt.dims4()?);
            let target = g.constant(qt.clone());
            commitment.push(g.mse(z, target)?);
            codes[level] = LevelCodes {
                latents: rows.iter().map(|v| v.as_f64() as f32).collect(),
                indices: q.indices,
            };
            Ok(g.straight_through(z, qt)?)
        };

        let h_b = net.enc_b.forward(g, params, x)?;
        let h_m = net.enc_m.forward(g, params, h_b)?;
        let h_t = net.enc_t.forward(g, params, h_m)?;

        let z_t = net.pre_t.forward(g, params, h_t)?;
        let q_t = quantize_level(g, z_t, 2)?;
        let d_t = net.dec_t.forward(g, params, q_t)?;
        let d_t = net.dec_t_out.forward(g, params, d_t)?;

        let cat = g.concat_channels(&[h_m, d_t])?;
        let z_m = net.pre_m.forward(g, params, cat)?;
        let q_m = quantize_level(g, z_m, 1)?;
        let up_t = net.up_t_m.forward(g, params, q_t)?;
        let cat = g.concat_channels(&[q_m, up_t])?;
        let d_m = net.dec_m.forward(g, params, cat)?;
        let d_m = net.dec_m_out.forward(g, params, d_m)?;

        let cat = g.concat_channels(&[h_b, d_m])?;
        let z_b = net.pre_b.forward(g, params, cat)?;
        let q_b = quantize_level(g, z_b, 0)?;
        let up_m = net.up_m_b.forward(g, params, q_m)?;
        let up_t = net.up_t_b.forward(g, params, q_t)?;
        let cat = g.concat_channels(&[q_b, up_m, up_t])?;
        let y = net.dec_b.forward(g, params, cat)?;
        let y = net.out1.forward(g, params, y)?;
        let y = g.relu(y);
        let reconstruction = net.out2.forward(g, params, y)?;

        // commitment terms were pushed top, middle, bottom
        let commitment = [commitment[2], commitment[1], commitment[0]];
        let reconstruction_loss = g.mse(reconstruction, x)?;
        let c_sum = g.add(commitment[0], commitment[1])?;
        let c_sum = g.add(c_sum, commitment[2])?;
        let c_weighted = g.scale(c_sum, self.config.commitment_weight);
        let total_loss = g.add(reconstruction_loss, c_weighted)?;
        Ok(ForwardOutput {
            reconstruction,
            total_loss,
            reconstruction_loss,
            commitment,
            codes,
        })
    }

    /// Reconstruction of a `[N, C, H, W]` batch in normalized units.
    pub fn reconstruct(&mut self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let params = std::mem::take(&mut self.params);
        let out = self.forward_graph(&mut g, &params, x, None);
        self.params = params;
        Ok(g.value(out?.reconstruction).clone())
    }

    /// Total and reconstruction loss of a batch, without training.
    pub fn evaluate(&mut self, batch: &Tensor<f32>) -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let params = std::mem::take(&mut self.params);
        let out = self.forward_graph(&mut g, &params, x, None);
        self.params = params;
        let out = out?;
        Ok((
            g.value(out.total_loss).item().as_f64(),
            g.value(out.reconstruction_loss).item().as_f64(),
        ))
    }

    /// Spatial sizes of the bottom, middle and top latent maps for an
    /// `h×w` input.
    pub fn latent_shapes(h: usize, w: usize) -> [(usize, usize); 3] {
        LEVEL_FACTORS.map(|f| (h / f, w / f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let t = Tensor::<f32>::from_fn([2, 3, 2, 2], |i| i as f32);
        let rows = to_rows(&t).unwrap();
        assert_eq!(&rows[..3], &[0.0, 4.0, 8.0]);
        assert_eq!(from_rows(&rows, [2, 3, 2, 2]), t);
    }

    #[test]
    fn arch_round_trip() {
        let cfg = VqVae2Config::desk(13);
        let back = VqVae2Config::from_arch(&cfg.arch()).unwrap();
        assert_eq!(back, VqVae2Config { seed: 0, ..cfg });
    }
}
