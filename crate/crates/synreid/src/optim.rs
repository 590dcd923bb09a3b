//! Adam optimizer over an ordered list of parameter leaves.

use ndarray::ArrayD;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update. `pairs` must present the same leaves in the same order on
    /// every call.
    pub fn step(&mut self, pairs: &mut [(&mut ArrayD<f64>, &ArrayD<f64>)]) {
        if self.m.is_empty() {
            self.m = pairs.iter().map(|(p, _)| ArrayD::zeros(p.raw_dim())).collect();
            self.v = pairs.iter().map(|(p, _)| ArrayD::zeros(p.raw_dim())).collect();
        }
        assert_eq!(pairs.len(), self.m.len(), "optimizer leaf count changed");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (param, grad)) in pairs.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut **param)
                .and(m)
                .and(v)
                .and(*grad)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }

    pub fn state(&self) -> (u64, &[ArrayD<f64>], &[ArrayD<f64>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore(&mut self, t: u64, m: Vec<ArrayD<f64>>, v: Vec<ArrayD<f64>>) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    // Minimize (x - 3)^2; Adam should converge near 3.
    #[test]
    fn adam_converges_on_a_quadratic() {
        let mut x = ArrayD::from_elem(IxDyn(&[1]), 0.0);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = x.mapv(|v| 2.0 * (v - 3.0));
            let mut pairs = [(&mut x, &g)];
            opt.step(&mut pairs);
        }
        assert!((x[[0]] - 3.0).abs() < 1e-3, "{}", x[[0]]);
    }

    #[test]
    fn first_step_moves_by_lr_in_gradient_direction() {
        // With bias correction, the first Adam step is -lr * sign(g).
        let mut x = ArrayD::from_elem(IxDyn(&[2]), 1.0);
        let g = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.5, -2.0]).unwrap();
        let mut opt = Adam::new(0.01);
        let mut pairs = [(&mut x, &g)];
        opt.step(&mut pairs);
        assert!((x[[0]] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((x[[1]] - (1.0 + 0.01)).abs() < 1e-6);
    }
}
