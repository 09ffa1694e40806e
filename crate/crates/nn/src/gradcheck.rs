//! Central-difference gradient checks for single layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Grads, Layer, LayerKind, LayerSpec, ParamSet, Result, Sequential, Tensor};

pub const EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub kind: LayerKind,
    /// Largest relative error over every parameter and input element.
    pub worst_rel_err: f64,
    /// Location of the worst element, e.g. `"l.weight[3]"` or `"input[7]"`.
    pub worst_at: String,
    pub checked: usize,
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(lo..hi);
    }
    t
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn probe_loss(net: &Sequential, params: &ParamSet, x: &Tensor, probe: &Tensor) -> Result<f64> {
    let out = net
        .forward(params, x.clone(), &[net.layers.len() - 1], None)?
        .pop()
        .expect("one tap");
    Ok(out
        .data()
        .iter()
        .zip(probe.data())
        .map(|(a, b)| a * b)
        .sum())
}

/// Compare the analytic gradient of `sum(layer(x) * probe)` with central
/// differences for every parameter and input element. Parameters are moved off
/// their initial values and ReLU6 inputs are kept away from the kinks.
pub fn check_layer(spec: &LayerSpec, input_shape: &[usize], seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let layer = Layer::build(spec, &mut params, "l", &mut rng)?;
    for id in 0..params.len() {
        for v in params.get_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let net = Sequential::new(vec![layer]);
    let x = if matches!(spec.kind, LayerKind::Relu6) {
        let mut t = random_tensor(&mut rng, input_shape, -2.0, 8.0);
        for v in t.data_mut() {
            for kink in [0.0, 6.0] {
                if (*v - kink).abs() < 0.05 {
                    *v += 0.1;
                }
            }
        }
        t
    } else {
        random_tensor(&mut rng, input_shape, -1.0, 1.0)
    };
    let (outs, tape) = net.forward_train(&params, x.clone(), &[0])?;
    let probe = random_tensor(&mut rng, outs[0].shape(), -1.0, 1.0);
    let mut grads = Grads::zeros_like(&params);
    let gx = net.backward(&params, tape, &[0], vec![Some(probe.clone())], &mut grads)?;

    let mut report = GradCheck {
        kind: spec.kind,
        worst_rel_err: 0.0,
        worst_at: String::new(),
        checked: 0,
    };
    let mut note = |e: f64, at: &dyn Fn() -> String| {
        report.checked += 1;
        if e > report.worst_rel_err || report.worst_at.is_empty() {
            report.worst_rel_err = report.worst_rel_err.max(e);
            report.worst_at = at();
        }
    };
    for id in 0..params.len() {
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + EPS;
            let lp = probe_loss(&net, &params, &x, &probe)?;
            params.get_mut(id).data_mut()[i] = orig - EPS;
            let lm = probe_loss(&net, &params, &x, &probe)?;
            params.get_mut(id).data_mut()[i] = orig;
            let e = rel_err(grads.get(id).data()[i], (lp - lm) / (2.0 * EPS));
            note(e, &|| format!("{}[{i}]", params.name(id)));
        }
    }
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += EPS;
        let mut xm = x.clone();
        xm.data_mut()[i] -= EPS;
        let numeric = (probe_loss(&net, &params, &xp, &probe)?
            - probe_loss(&net, &params, &xm, &probe)?)
            / (2.0 * EPS);
        note(rel_err(gx.data()[i], numeric), &|| format!("input[{i}]"));
    }
    Ok(report)
}

/// One representative configuration per layer kind, with input shapes.
pub fn standard_cases() -> Vec<(LayerSpec, Vec<usize>)> {
    vec![
        (LayerSpec::conv(2, 3, 3, 1), vec![2, 2, 5, 6]),
        (LayerSpec::conv(3, 2, 3, 2), vec![1, 3, 7, 6]),
        (LayerSpec::conv(4, 3, 1, 1), vec![1, 4, 4, 4]),
        (LayerSpec::depthwise(3, 3, 1), vec![2, 3, 5, 5]),
        (LayerSpec::depthwise(2, 3, 2), vec![1, 2, 7, 8]),
        (LayerSpec::relu6(3), vec![1, 3, 4, 4]),
        (LayerSpec::batch_norm(3), vec![2, 3, 3, 4]),
        (LayerSpec::inverted_residual(3, 3, 4, 1), vec![1, 3, 6, 6]),
        (LayerSpec::inverted_residual(2, 4, 3, 2), vec![1, 2, 7, 7]),
        (LayerSpec::inverted_residual(3, 3, 1, 1), vec![1, 3, 5, 5]),
    ]
}
