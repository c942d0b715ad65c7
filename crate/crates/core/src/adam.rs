//! Adam optimizer over the retriever's parameter tensors.

use crate::model::{RetrieverParams, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: RetrieverParams,
    v: RetrieverParams,
}

impl Adam {
    pub fn new(lr: f64, params: &RetrieverParams) -> Self {
        Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update with bias-corrected first and second moments.
    pub fn step(&mut self, params: &mut RetrieverParams, grads: &RetrieverParams) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        for ((p, g), (m, v)) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_params(seed: u64) -> RetrieverParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RetrieverParams::init(2, 4, &mut rng)
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut p = tiny_params(1);
        let before = p.clone();
        let g = p.zeros_like();
        let mut opt = Adam::new(1e-2, &p);
        for _ in 0..5 {
            opt.step(&mut p, &g);
        }
        assert_eq!(p, before);
        assert_eq!(opt.steps_taken(), 5);
    }

    #[test]
    fn matches_scalar_recurrence() {
        // Drive a single entry with a fixed gradient and replay the update
        // rule by hand.
        let mut p = tiny_params(2);
        let mut g = p.zeros_like();
        let grad = 0.37;
        g.input_proj[[0, 0]] = grad;
        let x0 = p.input_proj[[0, 0]];
        let mut opt = Adam::new(1e-3, &p);

        let (b1, b2, eps, lr) = (ADAM_BETA1, ADAM_BETA2, ADAM_EPS, 1e-3);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, x0);
        for t in 1..=25u32 {
            opt.step(&mut p, &g);
            m = b1 * m + (1.0 - b1) * grad;
            v = b2 * v + (1.0 - b2) * grad * grad;
            let m_hat = m / (1.0 - b1.powi(t as i32));
            let v_hat = v / (1.0 - b2.powi(t as i32));
            x -= lr * m_hat / (v_hat.sqrt() + eps);
            assert!((p.input_proj[[0, 0]] - x).abs() < 1e-12, "step {t}");
        }
        // untouched entries stay put
        assert_eq!(p.input_proj[[0, 1]], tiny_params(2).input_proj[[0, 1]]);
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // With v_hat ~= g^2 after bias correction, |delta| ~= lr regardless
        // of gradient scale.
        let mut p = tiny_params(3);
        let mut g = p.zeros_like();
        g.stop_w2[[1, 2]] = 123.456;
        let before = p.stop_w2[[1, 2]];
        let mut opt = Adam::new(1e-3, &p);
        opt.step(&mut p, &g);
        let delta = (p.stop_w2[[1, 2]] - before).abs();
        assert!((delta - 1e-3).abs() < 1e-6, "delta = {delta}");
    }
}
