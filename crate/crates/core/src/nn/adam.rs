use super::Params;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates, flat in parameter visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub settings: AdamSettings,
    pub state: AdamState<T>,
}

impl<T: Real> Adam<T> {
    pub fn new<P: Params<T>>(settings: AdamSettings, params: &P) -> Self {
        let n = params.param_count();
        Self {
            settings,
            state: AdamState {
                step: 0,
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            },
        }
    }

    pub fn step<P: Params<T>>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let g = grads.flatten();
        assert_eq!(
            g.len(),
            self.state.m.len(),
            "optimizer/parameter size mismatch"
        );
        self.state.step += 1;
        let t = self.state.step as i32;
        let s = self.settings;
        let b1 = T::lit(s.beta1);
        let b2 = T::lit(s.beta2);
        let one = T::one();
        let bc1 = T::lit(1.0 - s.beta1.powi(t));
        let bc2 = T::lit(1.0 - s.beta2.powi(t));
        let lr = T::lit(lr);
        let eps = T::lit(s.epsilon);
        let (m, v) = (&mut self.state.m, &mut self.state.v);
        let mut at = 0;
        params.visit_mut("", &mut |_, _, p| {
            for pi in p.iter_mut() {
                let gi = g[at];
                m[at] = b1 * m[at] + (one - b1) * gi;
                v[at] = b2 * v[at] + (one - b2) * gi * gi;
                let m_hat = m[at] / bc1;
                let v_hat = v[at] / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
                at += 1;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    #[test]
    fn first_step_moves_each_parameter_by_learning_rate() {
        // with bias correction the first update is lr * sign(g) (up to eps)
        let mut p = Linear::<f64>::zeros(2, 1);
        let mut g = p.zeros_like();
        g.weight = vec![0.5, -3.0];
        g.bias = vec![0.0];
        let mut opt = Adam::new(AdamSettings::default(), &p);
        opt.step(&mut p, &g, 0.01);
        assert!((p.weight[0] + 0.01).abs() < 1e-8);
        assert!((p.weight[1] - 0.01).abs() < 1e-8);
        assert_eq!(p.bias[0], 0.0);
        assert_eq!(opt.state.step, 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Linear::<f64>::zeros(1, 1);
        p.weight[0] = 3.0;
        let mut opt = Adam::new(AdamSettings::default(), &p);
        for _ in 0..2000 {
            let mut g = p.zeros_like();
            g.weight[0] = 2.0 * (p.weight[0] - 1.0);
            opt.step(&mut p, &g, 0.01);
        }
        assert!((p.weight[0] - 1.0).abs() < 1e-2);
    }
}
