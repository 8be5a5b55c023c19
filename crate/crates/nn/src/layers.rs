use rand::Rng;

use crate::error::Result;
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};

/// Convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add_uniform(format!("{name}.weight"), [out_ch, in_ch, kernel, kernel], fan_in, rng);
        let bias = store.add_uniform(format!("{name}.bias"), [out_ch], fan_in, rng);
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv2d(x, w, self.stride, self.padding)?;
        g.channel_bias(y, b)
    }
}

/// Transposed convolution with bias; kernel stored `[in, out, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel / (stride * stride).max(1);
        let weight = store.add_uniform(format!("{name}.weight"), [in_ch, out_ch, kernel, kernel], fan_in, rng);
        let bias = store.add_uniform(format!("{name}.bias"), [out_ch], fan_in, rng);
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv_transpose2d(x, w, self.stride, self.padding)?;
        g.channel_bias(y, b)
    }
}

/// `x + conv1x1(relu(conv3x3(relu(x))))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv3: Conv2d,
    pub conv1: Conv2d,
}

impl ResBlock {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv3: Conv2d::new(store, &format!("{name}.conv3"), channels, hidden, 3, 1, 1, rng),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), hidden, channels, 1, 1, 0, rng),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = g.relu(x);
        let h = self.conv3.forward(g, store, h)?;
        let h = g.relu(h);
        let h = self.conv1.forward(g, store, h)?;
        g.add(x, h)
    }
}
