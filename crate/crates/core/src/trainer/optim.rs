use crate::nets::ParamSet;

/// Adam moments; updates are computed in f64 and stored in f32.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: ParamSet<f32>,
    pub v: ParamSet<f32>,
}

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: &ParamSet<f32>) -> Self {
        Adam {
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &ParamSet<f32>, lr: f64, h: AdamHyper) {
        self.t += 1;
        let c1 = 1.0 - h.beta1.powi(self.t as i32);
        let c2 = 1.0 - h.beta2.powi(self.t as i32);
        let sets = params
            .params_mut()
            .iter_mut()
            .zip(grads.params())
            .zip(self.m.params_mut().iter_mut().zip(self.v.params_mut()));
        for ((p, g), (m, v)) in sets {
            for i in 0..p.data.len() {
                let gi = g.data[i] as f64;
                let mi = h.beta1 * m.data[i] as f64 + (1.0 - h.beta1) * gi;
                let vi = h.beta2 * v.data[i] as f64 + (1.0 - h.beta2) * gi * gi;
                m.data[i] = mi as f32;
                v.data[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + h.eps);
                if update != 0.0 {
                    p.data[i] = (p.data[i] as f64 - update) as f32;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::params::Param;

    fn one(v: f32) -> ParamSet<f32> {
        ParamSet::from_params(vec![Param {
            name: "x".into(),
            shape: vec![1],
            data: vec![v],
        }])
    }

    #[test]
    fn first_step_moves_by_lr_and_minimizes_quadratic() {
        let h = AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut p = one(1.0);
        let mut opt = Adam::new(&p);
        opt.step(&mut p, &one(0.5), 0.01, h);
        assert!((p.params()[0].data[0] - 0.99).abs() < 1e-6);
        for _ in 0..2000 {
            let x = p.params()[0].data[0];
            opt.step(&mut p, &one(2.0 * (x - 3.0)), 0.01, h);
        }
        assert!((p.params()[0].data[0] - 3.0).abs() < 1e-2);
        let before = p.clone();
        opt.step(&mut p, &one(1.0), 0.0, h);
        assert_eq!(p, before);
    }
}
