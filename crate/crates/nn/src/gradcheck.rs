//! Central finite-difference gradient checks in 64-bit mode.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::ParamStore;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the checked coordinates.
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }
}

/// Compares the tape gradient of `build`'s scalar loss with central
/// differences of step `step` for every trainable parameter in `store`.
///
/// At most `max_coords` coordinates are checked per parameter, spread evenly
/// over the tensor.
pub fn check_param_gradients<F>(
    store: &ParamStore<f64>,
    step: f64,
    max_coords: usize,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g, &analytic_store)?;
    let grads = g.backward(loss)?;
    g.accumulate_param_grads(&grads, &mut analytic_store)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, s)?;
        Ok(g.value(loss).item())
    };

    let mut probe = store.clone();
    let mut params = Vec::new();
    for id in store.ids() {
        let p = store.get(id);
        if !p.trainable {
            continue;
        }
        let n = p.value.numel();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        let (mut diff2, mut a2, mut n2, mut coords) = (0.0, 0.0, 0.0, 0);
        for i in (0..n).step_by(stride) {
            let orig = p.value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = analytic_store.get(id).grad.data()[i];
            diff2 += (analytic - numeric).powi(2);
            a2 += analytic * analytic;
            n2 += numeric * numeric;
            coords += 1;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        let rel_error = if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale };
        params.push(ParamCheck {
            name: p.name.clone(),
            coords,
            rel_error,
        });
    }
    Ok(GradCheckReport { params })
}
