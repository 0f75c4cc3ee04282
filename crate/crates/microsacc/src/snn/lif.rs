//! Leaky integrate-and-fire dynamics and the arctan surrogate gradient.

use ndarray::{ArrayD, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// LIF neuron constants shared by every spiking layer of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    /// Dimensionless membrane decay; the update is
    /// `v <- v + (input - (v - v_reset)) / tau`.
    pub tau: f64,
    pub v_threshold: f64,
    pub v_reset: f64,
    /// Sharpness of the arctan surrogate derivative.
    pub surrogate_alpha: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams {
            tau: 2.0,
            v_threshold: 1.0,
            v_reset: 0.0,
            surrogate_alpha: 2.0,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 1.0 {
            return Err(Error::domain("tau must exceed 1"));
        }
        if self.v_threshold <= self.v_reset {
            return Err(Error::domain("v_threshold must exceed v_reset"));
        }
        if self.surrogate_alpha <= 0.0 {
            return Err(Error::domain("surrogate_alpha must be positive"));
        }
        Ok(())
    }
}

/// Spike nonlinearity used in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeMode {
    /// Heaviside step; gradients use the surrogate.
    Hard,
    /// Smooth surrogate primitive replaces the step, making the whole
    /// network differentiable (for gradient checking).
    Soft,
}

/// Arctan surrogate derivative `alpha / (2 (1 + (pi/2 * alpha * u)^2))`,
/// evaluated at `u = v - v_threshold`.
pub fn surrogate_derivative(u: f64, alpha: f64) -> f64 {
    let z = std::f64::consts::FRAC_PI_2 * alpha * u;
    alpha / (2.0 * (1.0 + z * z))
}

/// Primitive of the surrogate: a smooth step in `[0, 1]`, used as the soft
/// spike function.
pub fn surrogate_primitive(u: f64, alpha: f64) -> f64 {
    (std::f64::consts::FRAC_PI_2 * alpha * u).atan() / std::f64::consts::PI + 0.5
}

/// One LIF step over arbitrary-shaped state: returns `(spikes, new_state)`.
///
/// Membrane update `v <- v + (input - (v - v_reset)) / tau`, binary spikes at
/// `v >= v_threshold`, hard reset of spiking units to `v_reset`.
pub fn lif_step<F: NdFloat>(
    state: &ArrayD<F>,
    input: &ArrayD<F>,
    params: &LifParams,
) -> Result<(ArrayD<F>, ArrayD<F>)> {
    if state.shape() != input.shape() {
        return Err(Error::domain("state and input shapes differ"));
    }
    params.validate()?;
    let tau = F::from(params.tau).expect("tau fits F");
    let v_th = F::from(params.v_threshold).expect("threshold fits F");
    let v_reset = F::from(params.v_reset).expect("reset fits F");
    let mut spikes = ArrayD::zeros(state.raw_dim());
    let mut new_state = ArrayD::zeros(state.raw_dim());
    ndarray::Zip::from(&mut spikes)
        .and(&mut new_state)
        .and(state)
        .and(input)
        .for_each(|s, ns, &v, &c| {
            let v_pre = v + (c - (v - v_reset)) / tau;
            if v_pre >= v_th {
                *s = F::one();
                *ns = v_reset;
            } else {
                *s = F::zero();
                *ns = v_pre;
            }
        });
    Ok((spikes, new_state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn scalar(v: f64) -> ArrayD<f64> {
        ArrayD::from_elem(ndarray::IxDyn(&[1]), v)
    }

    #[test]
    fn rest_with_zero_input_is_an_equilibrium() {
        let p = LifParams::default();
        let (s, v) = lif_step(&scalar(p.v_reset), &scalar(0.0), &p).unwrap();
        assert_eq!(s[[0]], 0.0);
        assert_eq!(v[[0]], p.v_reset);
    }

    #[test]
    fn single_step_crossing_spikes_and_resets() {
        let p = LifParams::default();
        // input large enough that one step crosses threshold from rest
        let (s, v) = lif_step(&scalar(0.0), &scalar(3.0), &p).unwrap();
        assert_eq!(s[[0]], 1.0);
        assert_eq!(v[[0]], p.v_reset);
    }

    #[test]
    fn first_passage_matches_closed_form() {
        let p = LifParams {
            tau: 3.0,
            ..LifParams::default()
        };
        for &input in &[1.2f64, 1.5, 2.5, 5.0] {
            // v_t = v_reset + I (1 - (1 - 1/tau)^t) from rest; first passage at
            // the smallest integer t with v_t >= threshold.
            let ratio: f64 = 1.0 - 1.0 / p.tau;
            let frac = (p.v_threshold - p.v_reset) / input;
            let t_star = ((1.0 - frac).ln() / ratio.ln()).ceil() as usize;

            let mut v = scalar(p.v_reset);
            let mut fired_at = None;
            for t in 1..=64 {
                let (s, nv) = lif_step(&v, &scalar(input), &p).unwrap();
                v = nv;
                if s[[0] ] == 1.0 {
                    fired_at = Some(t);
                    break;
                }
            }
            assert_eq!(fired_at, Some(t_star), "input {input}");
        }
    }

    #[test]
    fn surrogate_peaks_at_threshold_and_is_symmetric() {
        let alpha = 2.0;
        assert_eq!(surrogate_derivative(0.0, alpha), alpha / 2.0);
        for u in [0.1, 0.7, 3.0] {
            assert_eq!(
                surrogate_derivative(u, alpha),
                surrogate_derivative(-u, alpha)
            );
            assert!(surrogate_derivative(u, alpha) < alpha / 2.0);
        }
    }

    #[test]
    fn surrogate_integrates_to_one() {
        // Simpson quadrature of the surrogate over a wide symmetric range.
        let alpha = 2.0;
        let (a, b) = (-100.0 / alpha, 100.0 / alpha);
        let n = 20_000usize;
        let h = (b - a) / n as f64;
        let mut acc = surrogate_derivative(a, alpha) + surrogate_derivative(b, alpha);
        for i in 1..n {
            let w = if i % 2 == 0 { 2.0 } else { 4.0 };
            acc += w * surrogate_derivative(a + i as f64 * h, alpha);
        }
        let integral = acc * h / 3.0;
        assert!((integral - 1.0).abs() < 0.02, "integral = {integral}");
        // And it matches the primitive difference.
        let by_primitive = surrogate_primitive(b, alpha) - surrogate_primitive(a, alpha);
        assert!((integral - by_primitive).abs() < 1e-6);
    }

    #[test]
    fn invalid_params_are_rejected() {
        let bad = LifParams {
            tau: 1.0,
            ..LifParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = LifParams {
            v_threshold: -1.0,
            v_reset: 0.0,
            ..LifParams::default()
        };
        assert!(bad.validate().is_err());
    }
}
