//! Central finite-difference checks of [`Network::backward`].

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{NetError, Network};

/// Denominator floor of the relative error, so near-zero gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-5;

fn projection_loss(net: &Network, inputs: &[(&str, &[f64])], weights: &[(String, Vec<f64>)]) -> Result<f64, NetError> {
    let acts = net.forward(inputs)?;
    let mut loss = 0.0;
    for (name, w) in weights {
        let y = net.output(&acts, name)?;
        loss += y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(loss)
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Checks every parameter gradient of the scalar loss `sum_o <c_o, y_o>`
/// (fixed pseudo-random projections `c_o` of every output) against central
/// differences with step `eps`. Returns the maximum relative error.
pub fn grad_check(net: &Network, inputs: &[(&str, &[f64])], eps: f64) -> Result<f64, NetError> {
    grad_check_sampled(net, inputs, eps, usize::MAX, 0)
}

/// Like [`grad_check`] but checks at most `max_params` parameters chosen with `seed`.
pub fn grad_check_sampled(
    net: &Network,
    inputs: &[(&str, &[f64])],
    eps: f64,
    max_params: usize,
    seed: u64,
) -> Result<f64, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let acts = net.forward(inputs)?;
    let mut weights = Vec::new();
    for name in net.output_names() {
        let n = net.output(&acts, name)?.len();
        let scale = 1.0 / (n as f64).sqrt();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        weights.push((name.to_string(), w));
    }
    let out_grads: Vec<(&str, &[f64])> = weights.iter().map(|(n, w)| (n.as_str(), w.as_slice())).collect();
    let mut analytic = vec![0.0; net.num_params()];
    net.backward(&acts, &out_grads, &mut analytic)?;

    let n = net.num_params();
    let indices: Vec<usize> = if max_params >= n {
        (0..n).collect()
    } else {
        sample(&mut rng, n, max_params).into_vec()
    };

    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for i in indices {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + eps;
        let up = projection_loss(&probe, inputs, &weights)?;
        probe.params_mut()[i] = orig - eps;
        let down = projection_loss(&probe, inputs, &weights)?;
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
