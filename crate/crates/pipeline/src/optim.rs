use treefield_field::{ParamStore, Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with bias correction; moments kept in 64-bit.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<S: Scalar>(params: &ParamStore<S>, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam { lr, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update<S: Scalar>(&mut self, params: &mut ParamStore<S>, grads: &[Tensor<S>]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        for (id, g) in grads.iter().enumerate() {
            let p = params.by_id_mut(id);
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for i in 0..g.len() {
                let gi = g.data[i].f64();
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let step = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPSILON);
                p.data[i] = S::of(p.data[i].f64() - step);
            }
        }
    }
}
