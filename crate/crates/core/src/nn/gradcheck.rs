use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use super::{backward, forward, Gradients, NetworkSpec, Weights};
use crate::error::Result;

const H: f64 = 1e-5;
/// Inputs are kept at least this far from zero so no relu sits on its kink.
const NUDGE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// Parameter (or `input`) holding the worst element.
    pub worst: String,
    pub checked: usize,
    /// Coordinates whose ±h probes changed a relu or pool branch.
    pub excluded: usize,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite differences at `h = 1e-5` in `f64` against [`backward`]
/// for every parameter and input element of a randomly initialized net.
///
/// The loss is a fixed random projection of the output. Coordinates whose
/// probes cross a non-differentiable branch are skipped and counted.
pub fn gradcheck(spec: &NetworkSpec, seed: u64) -> Result<GradcheckReport> {
    gradcheck_with(spec, seed, |_| {})
}

/// [`gradcheck`] with a hook applied to the analytic gradients before
/// comparison, for exercising the checker itself.
pub fn gradcheck_with(spec: &NetworkSpec, seed: u64, tamper: impl Fn(&mut Gradients<f64>)) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let mut weights = Weights::<f64>::init(spec, seed)?;
    for (name, p) in weights.names.iter().zip(weights.params.iter_mut()) {
        // Random biases too, so they are exercised away from zero.
        if name.contains(".b") {
            p.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
    let mut shape = vec![2];
    shape.extend_from_slice(&spec.input);
    let n: usize = shape.iter().product();
    let input: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            v.signum() * v.abs().max(NUDGE)
        })
        .collect();
    let input = Tensor::new(shape, input)?;
    let (out, cache) = forward(spec, &weights, &input)?;
    let proj = Tensor::new(
        out.shape().to_vec(),
        (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let base = cache.pattern(spec);
    let mut grads = backward(spec, &weights, &cache, &proj)?;
    tamper(&mut grads);

    let loss = |w: &Weights<f64>, x: &Tensor<f64>| -> Result<(f64, bool)> {
        let (o, c) = forward(spec, w, x)?;
        let l = o.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum();
        Ok((l, c.pattern(spec) == base))
    };

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
        excluded: 0,
    };
    let mut record = |name: &str, analytic: f64, up: (f64, bool), dn: (f64, bool)| {
        if !(up.1 && dn.1) {
            report.excluded += 1;
            return;
        }
        report.checked += 1;
        let e = rel_err(analytic, (up.0 - dn.0) / (2.0 * H));
        if e > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = e;
            report.worst = name.to_string();
        }
    };

    for k in 0..weights.params.len() {
        for j in 0..weights.params[k].len() {
            let orig = weights.params[k].data()[j];
            weights.params[k].data_mut()[j] = orig + H;
            let up = loss(&weights, &input)?;
            weights.params[k].data_mut()[j] = orig - H;
            let dn = loss(&weights, &input)?;
            weights.params[k].data_mut()[j] = orig;
            let name = weights.names[k].clone();
            record(&name, grads.params[k].data()[j], up, dn);
        }
    }
    let mut x = input.clone();
    for j in 0..x.len() {
        let orig = x.data()[j];
        x.data_mut()[j] = orig + H;
        let up = loss(&weights, &x)?;
        x.data_mut()[j] = orig - H;
        let dn = loss(&weights, &x)?;
        x.data_mut()[j] = orig;
        record("input", grads.input.data()[j], up, dn);
    }
    Ok(report)
}
