//! Define-by-run tape with reverse-mode gradients.
//!
//! Every op appends a node holding its forward value. [`Graph::backward`]
//! walks the tape in reverse from a scalar loss and returns the gradient of
//! every node that depends on a gradient-requiring leaf.

use crate::conv::{
    conv2d, conv2d_kernel_grad, conv_transpose2d, conv_transpose2d_kernel_grad,
    conv_transpose2d_sized,
};
use crate::error::{NnError, Result};
use crate::float::Float;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        x: Var,
        k: Var,
        stride: usize,
        padding: usize,
    },
    ChannelBias {
        x: Var,
        b: Var,
    },
    Concat(Vec<Var>),
    StraightThrough(Var),
    GlobalAvgPool(Var),
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Result of [`Graph::backward`]: one optional gradient per node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient, e.g. an input under a gradient check.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; trainable parameters receive gradients.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            needs_grad: p.trainable,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        self.push(v, Op::Log(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a), &[a])
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        va.check_same_shape(vb)?;
        let n = T::from_f64(va.numel() as f64);
        let s: T = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), &[a, b]))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let v = conv2d(self.value(x), self.value(k), stride, padding)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                k,
                stride,
                padding,
            },
            &[x, k],
        ))
    }

    pub fn conv_transpose2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let v = conv_transpose2d(self.value(x), self.value(k), stride, padding)?;
        Ok(self.push(
            v,
            Op::ConvTranspose2d {
                x,
                k,
                stride,
                padding,
            },
            &[x, k],
        ))
    }

    /// Adds `b[c]` to every element of channel `c` of a 4-D tensor.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let bias = self.value(b);
        if bias.numel() != c {
            return Err(NnError::Shape(format!(
                "bias of {} values for {c} channels",
                bias.numel()
            )));
        }
        let mut v = self.value(x).clone();
        let plane = h * w;
        for (i, chunk) in v.data_mut().chunks_mut(plane).enumerate() {
            let bc = bias.data()[i % c];
            chunk.iter_mut().for_each(|e| *e += bc);
        }
        debug_assert_eq!(v.numel(), n * c * plane);
        Ok(self.push(v, Op::ChannelBias { x, b }, &[x, b]))
    }

    /// Concatenates 4-D tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).dims4()?;
        let mut channels = 0;
        for &p in parts {
            let [n, c, h, w] = self.value(p).dims4()?;
            if n != first[0] || h != first[2] || w != first[3] {
                return Err(NnError::Shape(format!(
                    "cannot concatenate {:?} with {:?}",
                    self.value(p).shape(),
                    self.value(parts[0]).shape()
                )));
            }
            channels += c;
        }
        let [n, _, h, w] = first;
        let plane = h * w;
        let mut data = Vec::with_capacity(n * channels * plane);
        for b in 0..n {
            for &p in parts {
                let v = self.value(p);
                let c = v.shape()[1];
                data.extend_from_slice(&v.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let v = Tensor::new([n, channels, h, w], data)?;
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }

    /// Forward value is `replacement`; the gradient passes to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, replacement: Tensor<T>) -> Result<Var> {
        self.value(x).check_same_shape(&replacement)?;
        Ok(self.push(replacement, Op::StraightThrough(x), &[x]))
    }

    /// `[N, C, H, W] → [N, C, 1, 1]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let plane = (h * w) as f64;
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|ch| ch.iter().copied().sum::<T>() / T::from_f64(plane))
            .collect();
        let v = Tensor::new([n, c, 1, 1], data)?;
        Ok(self.push(v, Op::GlobalAvgPool(x), &[x]))
    }

    /// Mean binary cross-entropy of logits against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let z = self.value(logits);
        if z.numel() != targets.len() {
            return Err(NnError::Shape(format!(
                "{} logits vs {} targets",
                z.numel(),
                targets.len()
            )));
        }
        let n = T::from_f64(targets.len() as f64);
        let total: T = z
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(NnError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone())?;
                self.accum(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone())?;
                self.accum(grads, *b, g.map(|x| -x))?;
            }
            Op::Mul(a, b) => {
                self.accum(grads, *a, g.zip_map(val(*b), |x, y| x * y)?)?;
                self.accum(grads, *b, g.zip_map(val(*a), |x, y| x * y)?)?;
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accum(grads, *a, g.map(|x| x * s))?;
            }
            Op::AddScalar(a) => self.accum(grads, *a, g.clone())?,
            Op::Relu(a) => {
                let d = g.zip_map(&node.value, |x, y| if y > T::zero() { x } else { T::zero() })?;
                self.accum(grads, *a, d)?;
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |x, s| x * s * (T::one() - s))?;
                self.accum(grads, *a, d)?;
            }
            Op::Log(a) => self.accum(grads, *a, g.zip_map(val(*a), |x, y| x / y)?)?,
            Op::Square(a) => {
                let two = T::from_f64(2.0);
                self.accum(grads, *a, g.zip_map(val(*a), |x, y| two * x * y)?)?;
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accum(grads, *a, Tensor::full(val(*a).shape().to_vec(), s))?;
            }
            Op::Mean(a) => {
                let s = g.item() / T::from_f64(val(*a).numel() as f64);
                self.accum(grads, *a, Tensor::full(val(*a).shape().to_vec(), s))?;
            }
            Op::Mse(a, b) => {
                let n = val(*a).numel() as f64;
                let c = g.item() * T::from_f64(2.0 / n);
                let d = val(*a).zip_map(val(*b), |x, y| c * (x - y))?;
                self.accum(grads, *b, d.map(|x| -x))?;
                self.accum(grads, *a, d)?;
            }
            Op::Conv2d {
                x,
                k,
                stride,
                padding,
            } => {
                let kv = val(*k);
                if self.nodes[x.0].needs_grad {
                    let [_, _, h, w] = val(*x).dims4()?;
                    let dx = conv_transpose2d_sized(g, kv, *stride, *padding, h, w)?;
                    self.accum(grads, *x, dx)?;
                }
                if self.nodes[k.0].needs_grad {
                    let dk = conv2d_kernel_grad(val(*x), g, kv.shape(), *stride, *padding)?;
                    self.accum(grads, *k, dk)?;
                }
            }
            Op::ConvTranspose2d {
                x,
                k,
                stride,
                padding,
            } => {
                let kv = val(*k);
                if self.nodes[x.0].needs_grad {
                    self.accum(grads, *x, conv2d(g, kv, *stride, *padding)?)?;
                }
                if self.nodes[k.0].needs_grad {
                    let dk =
                        conv_transpose2d_kernel_grad(val(*x), g, kv.shape(), *stride, *padding)?;
                    self.accum(grads, *k, dk)?;
                }
            }
            Op::ChannelBias { x, b } => {
                self.accum(grads, *x, g.clone())?;
                if self.nodes[b.0].needs_grad {
                    let [_, c, h, w] = g.dims4()?;
                    let mut db = vec![T::zero(); c];
                    for (i, chunk) in g.data().chunks(h * w).enumerate() {
                        db[i % c] += chunk.iter().copied().sum::<T>();
                    }
                    let shape = val(*b).shape().to_vec();
                    self.accum(grads, *b, Tensor::new(shape, db)?)?;
                }
            }
            Op::Concat(parts) => {
                let [n, total, h, w] = g.dims4()?;
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).shape()[1];
                    if self.nodes[p.0].needs_grad {
                        let mut data = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let start = (b * total + offset) * plane;
                            data.extend_from_slice(&g.data()[start..start + c * plane]);
                        }
                        self.accum(grads, p, Tensor::new([n, c, h, w], data)?)?;
                    }
                    offset += c;
                }
            }
            Op::StraightThrough(x) => self.accum(grads, *x, g.clone())?,
            Op::GlobalAvgPool(x) => {
                let [n, c, h, w] = val(*x).dims4()?;
                let plane = h * w;
                let inv = T::from_f64(1.0 / plane as f64);
                let mut data = Vec::with_capacity(n * c * plane);
                for &gv in g.data() {
                    data.extend(std::iter::repeat_n(gv * inv, plane));
                }
                self.accum(grads, *x, Tensor::new([n, c, h, w], data)?)?;
            }
            Op::BceWithLogits { logits, targets } => {
                let z = val(*logits);
                let c = g.item() / T::from_f64(targets.len() as f64);
                let data = z
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| c * (sigmoid(z) - y))
                    .collect();
                self.accum(grads, *logits, Tensor::new(z.shape().to_vec(), data)?)?;
            }
        }
        Ok(())
    }

    /// Adds the gradients of every parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                store.get_mut(id).grad.add_assign(g)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Float>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_parameters_has_unit_gradients() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::from_fn([2, 3], |i| i as f64), true);
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        g.accumulate_param_grads(&grads, &mut store).unwrap();
        assert!(store.get(id).grad.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::full([4], 2.0), true);
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let zero = g.scale(p, 0.0);
        let s = g.sum(zero);
        let loss = g.add_scalar(s, 3.0);
        let grads = g.backward(loss).unwrap();
        g.accumulate_param_grads(&grads, &mut store).unwrap();
        assert!(store.get(id).grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros([3]));
        assert!(matches!(g.backward(x), Err(NnError::NonScalarLoss(_))));
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("frozen", Tensor::full([2], 1.0), false);
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(p).is_none());
    }

    #[test]
    fn straight_through_forwards_replacement_and_passes_gradient() {
        let mut g = Graph::<f64>::new();
        let enc = g.input(Tensor::from_fn([1, 2, 2, 2], |i| i as f64 * 0.3));
        let quant = Tensor::from_fn([1, 2, 2, 2], |i| (i % 3) as f64);
        let st = g.straight_through(enc, quant.clone()).unwrap();
        assert_eq!(g.value(st), &quant);
        let loss = g.sum(st);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(enc).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        let mut g = Graph::<f32>::new();
        let z = g.input(Tensor::new([2], vec![80.0, -80.0]).unwrap());
        let loss = g.bce_with_logits(z, &[1.0, 0.0]).unwrap();
        assert!(g.value(loss).item().abs() < 1e-6);
    }
}
