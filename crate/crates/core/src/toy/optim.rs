use super::model::{OptimizerKind, Parameters};

/// Adam (β1 = 0.9, β2 = 0.999, ε = 1e-8, bias-corrected) or plain SGD.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &Parameters) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.data.len()).collect();
        let zeros = || shapes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        let (m, v) = match kind {
            OptimizerKind::Adam => (zeros(), zeros()),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &Parameters) {
        self.t += 1;
        let grads = grads.tensors();
        match self.kind {
            OptimizerKind::Sgd => {
                for ((_, p), (_, g)) in params.tensors_mut().into_iter().zip(&grads) {
                    for (w, gw) in p.data.iter_mut().zip(&g.data) {
                        *w -= self.lr * gw;
                    }
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                for (i, (_, p)) in params.tensors_mut().into_iter().enumerate() {
                    let g = &grads[i].1.data;
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..p.data.len() {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        p.data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::model::ToyLMConfig;

    fn params() -> Parameters {
        let cfg = ToyLMConfig {
            embed_dim: 3,
            hidden_dim: 4,
            window: 2,
            ..Default::default()
        };
        Parameters::init(&cfg, 6).unwrap()
    }

    #[test]
    fn zero_lr_is_identity() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut p = params();
            let before = p.clone();
            let mut g = p.clone();
            g.embed.data.iter_mut().for_each(|x| *x = 1.0);
            let mut opt = Optimizer::new(kind, 0.0, &p);
            opt.step(&mut p, &g);
            assert_eq!(p, before);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = params();
        let before = p.embed.data[0];
        let mut g = p.zeros_like();
        g.embed.data[0] = 0.37;
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, &p);
        opt.step(&mut p, &g);
        assert!((before - p.embed.data[0] - 0.01).abs() < 1e-6);
        assert_eq!(p.embed.data[1], params().embed.data[1]);
    }
}
