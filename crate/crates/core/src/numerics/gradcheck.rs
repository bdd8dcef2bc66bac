//! Central finite differences, used as the oracle for every analytic gradient.

use super::network::{Network, Parameters};
use crate::error::Result;

/// Central-difference gradient of `f` at `params`.
pub fn finite_difference<F>(mut f: F, params: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-8)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Compares backprop against central differences for the scalar
/// `upstream · network(input)`, over every network parameter.
pub fn grad_check(network: &Network, input: &[f64], upstream: &[f64], h: f64) -> Result<f64> {
    let (grads, _) = network.backprop(input, upstream)?;
    let analytic = grads.to_flat();
    let mut probe = network.clone();
    let numeric = finite_difference(
        |p| {
            probe.read_params(p);
            let out = probe.forward(input).expect("shapes checked by backprop");
            out.iter().zip(upstream).map(|(o, u)| o * u).sum()
        },
        &network.params_vec(),
        h,
    );
    Ok(max_relative_error(&analytic, &numeric))
}
