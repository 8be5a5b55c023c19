use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqdetect_nn::conv::{conv2d, conv_output_size, conv_transpose2d_sized};
use vqdetect_nn::gradcheck::check_param_gradients;
use vqdetect_nn::layers::{Conv2d, ConvTranspose2d, ResBlock};
use vqdetect_nn::loss::{kl_diag_gaussian_var, vae_total_loss_var};
use vqdetect_nn::{Graph, ParamStore, Result, Tensor, Var};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Keeps values away from the ReLU kink so central differences are smooth.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn assert_grads<F>(store: &ParamStore<f64>, label: &str, build: F)
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let report = check_param_gradients(store, STEP, 64, build).unwrap();
    for p in &report.params {
        assert!(
            p.rel_error < TOL,
            "{label}: parameter {} relative error {:.3e}",
            p.name,
            p.rel_error
        );
    }
}

/// Projects a tensor onto a fixed random direction so non-scalar ops get a
/// generic scalar loss.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(rand_tensor(&shape, &mut rng));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn elementwise_ops_pass_gradient_check() {
    for cfg in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg);
        let n = rng.gen_range(1..12);
        let mut store = ParamStore::new();
        let a = store.add("a", away_from_zero(&[n], &mut rng), true);
        let b = store.add("b", away_from_zero(&[n], &mut rng), true);
        let pos = store.add(
            "pos",
            Tensor::from_fn([n], |_| rng.gen_range(0.2..2.0)),
            true,
        );
        assert_grads(&store, "elementwise", |g, s| {
            let a = g.param(s, a);
            let b = g.param(s, b);
            let pos = g.param(s, pos);
            let sum = g.add(a, b)?;
            let diff = g.sub(sum, b)?;
            let prod = g.mul(diff, b)?;
            let scaled = g.scale(prod, 1.7);
            let shifted = g.add_scalar(scaled, 0.3);
            let r = g.relu(shifted);
            let s1 = g.sigmoid(a);
            let l = g.log(pos);
            let sq = g.square(b);
            let t1 = g.mul(r, s1)?;
            let t2 = g.add(t1, l)?;
            let t3 = g.add(t2, sq)?;
            project(g, t3, cfg)
        });
    }
}

#[test]
fn reductions_and_losses_pass_gradient_check() {
    for cfg in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + cfg);
        let n = rng.gen_range(1..10);
        let mut store = ParamStore::new();
        let x = store.add("x", rand_tensor(&[n], &mut rng), true);
        let y = store.add("y", rand_tensor(&[n], &mut rng), true);
        let f = store.add("f", rand_tensor(&[n], &mut rng), true);
        let v = store.add("v", Tensor::from_fn([n], |_| rng.gen_range(0.3..3.0)), true);
        let beta = rng.gen_range(0.0..3.0);
        let targets: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.5) as u8)).collect();
        assert_grads(&store, "losses", |g, s| {
            let x = g.param(s, x);
            let y = g.param(s, y);
            let f = g.param(s, f);
            let v = g.param(s, v);
            let vae = vae_total_loss_var(g, x, y, f, v, beta)?;
            let kl = kl_diag_gaussian_var(g, f, v)?;
            let mse = g.mse(x, y)?;
            let bce = g.bce_with_logits(x, &targets)?;
            let m = g.mean(y);
            let a = g.add(vae, kl)?;
            let b = g.add(a, mse)?;
            let c = g.add(b, bce)?;
            g.add(c, m)
        });
    }
}

#[test]
fn convolutions_pass_gradient_check() {
    for cfg in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + cfg);
        let n = rng.gen_range(1..3);
        let c = rng.gen_range(1..4);
        let f = rng.gen_range(1..4);
        let k = rng.gen_range(1..5);
        let stride = rng.gen_range(1..3);
        let padding = rng.gen_range(0..k.min(2) + 1).min(k - 1);
        let h = rng.gen_range(k..k + 5);
        let w = rng.gen_range(k..k + 5);
        let mut store = ParamStore::new();
        let x = store.add("x", rand_tensor(&[n, c, h, w], &mut rng), true);
        let kern = store.add("k", rand_tensor(&[f, c, k, k], &mut rng), true);
        let bias = store.add("b", rand_tensor(&[f], &mut rng), true);
        let y_in = store.add("yin", rand_tensor(&[n, f, h, w], &mut rng), true);
        assert_grads(&store, "conv", |g, s| {
            let x = g.param(s, x);
            let kv = g.param(s, kern);
            let b = g.param(s, bias);
            let y = g.conv2d(x, kv, stride, padding)?;
            let y = g.channel_bias(y, b)?;
            let yin = g.param(s, y_in);
            let t = g.conv_transpose2d(yin, kv, stride, padding)?;
            let l1 = project(g, y, cfg)?;
            let l2 = project(g, t, cfg + 1)?;
            g.add(l1, l2)
        });
    }
}

#[test]
fn structural_ops_pass_gradient_check() {
    for cfg in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + cfg);
        let n = rng.gen_range(1..3);
        let (c1, c2) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let mut store = ParamStore::new();
        let a_id = store.add("a", rand_tensor(&[n, c1, h, w], &mut rng), true);
        let b_id = store.add("b", rand_tensor(&[n, c2, h, w], &mut rng), true);
        let replacement = rand_tensor(&[n, c2, h, w], &mut rng);
        // offset frozen at the base point: the smooth surrogate of a quantizer
        let offset = replacement.zip_map(store.value(b_id), |r, x| r - x).unwrap();
        assert_grads(&store, "structural", |g, s| {
            let a = g.param(s, a_id);
            let b = g.param(s, b_id);
            let off = g.constant(offset.clone());
            let st = g.add(b, off)?;
            let cat = g.concat_channels(&[a, st])?;
            let pooled = g.global_avg_pool(cat)?;
            let l1 = project(g, cat, cfg)?;
            let l2 = project(g, pooled, cfg + 7)?;
            g.add(l1, l2)
        });
    }
}

#[test]
fn layers_compose_under_gradient_check() {
    for cfg in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + cfg);
        let mut store = ParamStore::new();
        let c = rng.gen_range(1..3);
        let down = Conv2d::new(&mut store, "down", c, 3, 4, 2, 1, &mut rng);
        let res = ResBlock::new(&mut store, "res", 3, 2, &mut rng);
        let up = ConvTranspose2d::new(&mut store, "up", 3, c, 4, 2, 1, &mut rng);
        let input = rand_tensor(&[2, c, 8, 8], &mut rng);
        let target = rand_tensor(&[2, c, 8, 8], &mut rng);
        assert_grads(&store, "composed", |g, s| {
            let x = g.constant(input.clone());
            let h = down.forward(g, s, x)?;
            let h = res.forward(g, s, h)?;
            let h = g.relu(h);
            let y = up.forward(g, s, h)?;
            let t = g.constant(target.clone());
            g.mse(y, t)
        });
    }
}

#[test]
fn single_and_double_precision_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    let down = Conv2d::new(&mut store, "down", 2, 4, 4, 2, 1, &mut rng);
    let up = ConvTranspose2d::new(&mut store, "up", 4, 2, 4, 2, 1, &mut rng);
    let input = Tensor::from_fn([2, 2, 16, 16], |_| rng.gen_range(0.0..1.0));
    fn run<T: vqdetect_nn::Float>(
        store: &ParamStore<T>,
        down: &Conv2d,
        up: &ConvTranspose2d,
        input: Tensor<T>,
    ) -> Tensor<T> {
        let mut g = Graph::new();
        let x = g.constant(input);
        let h = down.forward(&mut g, store, x).unwrap();
        let h = g.relu(h);
        let y = up.forward(&mut g, store, h).unwrap();
        g.value(y).clone()
    }
    let y64 = run(&store, &down, &up, input.clone());
    let y32 = run(&store.cast::<f32>(), &down, &up, input.cast());
    for (a, b) in y64.data().iter().zip(y32.data()) {
        let rel = (a - f64::from(*b)).abs() / a.abs().max(1.0);
        assert!(rel < 1e-4);
    }
    assert_eq!(y64, run(&store, &down, &up, input));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_transpose_is_adjoint_of_conv(
        seed in any::<u64>(),
        n in 1usize..3,
        c in 1usize..4,
        f in 1usize..4,
        k in 1usize..5,
        stride in 1usize..4,
        pad_raw in 0usize..3,
        extra_h in 0usize..6,
        extra_w in 0usize..6,
    ) {
        let padding = pad_raw.min(k - 1);
        let (h, w) = (k + extra_h, k + extra_w);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[n, c, h, w], &mut rng);
        let kern = rand_tensor(&[f, c, k, k], &mut rng);
        let oh = conv_output_size(h, k, stride, padding).unwrap();
        let ow = conv_output_size(w, k, stride, padding).unwrap();
        let y = rand_tensor(&[n, f, oh, ow], &mut rng);
        let lhs = conv2d(&x, &kern, stride, padding).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&conv_transpose2d_sized(&y, &kern, stride, padding, h, w).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-6 * lhs.abs().max(1.0));
    }
}
