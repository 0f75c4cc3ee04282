//! Adam optimizer with L2 weight decay and a cosine-annealing schedule.

use ndarray::{ArrayD, NdFloat};

use super::model::Param;

pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
    t: u64,
}

impl<F: NdFloat> Adam<F> {
    pub fn new(params: &[Param<F>], weight_decay: f64) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
            t: 0,
        }
    }

    /// One update from the gradients currently held in `params`.
    pub fn step(&mut self, params: &mut [Param<F>], lr: f64) {
        self.t += 1;
        let b1 = F::from(self.beta1).expect("fits");
        let b2 = F::from(self.beta2).expect("fits");
        let one = F::one();
        let wd = F::from(self.weight_decay).expect("fits");
        let eps = F::from(self.eps).expect("fits");
        let bias1 = F::from(1.0 - self.beta1.powi(self.t as i32)).expect("fits");
        let bias2 = F::from(1.0 - self.beta2.powi(self.t as i32)).expect("fits");
        let lr_f = F::from(lr).expect("fits");

        for (i, p) in params.iter_mut().enumerate() {
            ndarray::Zip::from(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&mut p.value)
                .and(&p.grad)
                .for_each(|m, v, w, &g| {
                    let g = g + wd * *w;
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *w = *w - lr_f * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}

/// Cosine-annealing learning rate with warm restarts every `period` epochs:
/// starts at `base_lr` and decreases monotonically within each segment.
pub fn cosine_lr(base_lr: f64, eta_min: f64, epoch: usize, period: usize) -> f64 {
    let phase = (epoch % period) as f64 / period as f64;
    eta_min + (base_lr - eta_min) * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_resets_and_decreases_in_segments() {
        let base = 0.01;
        assert_eq!(cosine_lr(base, 0.0, 0, 10), base);
        assert_eq!(cosine_lr(base, 0.0, 10, 10), base);
        assert_eq!(cosine_lr(base, 0.0, 20, 10), base);
        for seg in 0..3 {
            for e in 0..9 {
                let a = cosine_lr(base, 0.0, seg * 10 + e, 10);
                let b = cosine_lr(base, 0.0, seg * 10 + e + 1, 10);
                if e < 9 {
                    assert!(b < a, "epoch {} -> {}: {a} vs {b}", e, e + 1);
                }
            }
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        use ndarray::IxDyn;
        let mut params = vec![Param {
            name: "w".into(),
            value: ArrayD::from_elem(IxDyn(&[3]), 2.0f64),
            grad: ArrayD::zeros(IxDyn(&[3])),
        }];
        let mut adam = Adam::new(&params, 0.0);
        let loss = |w: &ArrayD<f64>| w.iter().map(|v| v * v).sum::<f64>();
        let initial = loss(&params[0].value);
        for _ in 0..200 {
            let g = params[0].value.mapv(|v| 2.0 * v);
            params[0].grad.assign(&g);
            adam.step(&mut params, 0.05);
        }
        assert!(loss(&params[0].value) < initial * 1e-3);
    }
}
