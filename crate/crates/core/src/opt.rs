//! Adaptive moment estimation over flat parameter slices. Bias correction is
//! tracked per scalar so parameters excluded from a step (soft dropout) keep
//! their state untouched.

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: Vec<u32>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        let active = vec![true; params.len()];
        self.step_selective(params, grads, &active);
    }

    /// Update only scalars with `active[i]`; the rest keep params and moments.
    pub fn step_selective(&mut self, params: &mut [f64], grads: &[f64], active: &[bool]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        assert_eq!(active.len(), self.m.len());
        for i in 0..params.len() {
            if !active[i] {
                continue;
            }
            self.steps[i] += 1;
            let t = self.steps[i] as f64;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / (1.0 - self.beta1.powf(t));
            let v_hat = self.v[i] / (1.0 - self.beta2.powf(t));
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    /// Rebuild state after a topology change: entry i of the new state copies
    /// `map(i)` from the old one, or starts fresh when None.
    pub fn remap(&self, new_len: usize, map: impl Fn(usize) -> Option<usize>) -> Adam {
        let mut out = Adam::new(new_len, self.lr);
        out.beta1 = self.beta1;
        out.beta2 = self.beta2;
        out.eps = self.eps;
        for i in 0..new_len {
            if let Some(j) = map(i) {
                out.m[i] = self.m[j];
                out.v[i] = self.v[j];
                out.steps[i] = self.steps[j];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descends_a_quadratic() {
        let mut adam = Adam::new(2, 0.1);
        let mut p = vec![3.0, -2.0];
        for _ in 0..500 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            adam.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-3 && p[1].abs() < 1e-3, "p = {p:?}");
    }

    #[test]
    fn inactive_scalars_are_untouched() {
        let mut adam = Adam::new(2, 0.1);
        let mut p = vec![1.0, 1.0];
        adam.step_selective(&mut p, &[1.0, 1.0], &[true, false]);
        assert_ne!(p[0], 1.0);
        assert_eq!(p[1], 1.0);
        // the skipped scalar starts its schedule fresh later
        let before = p[1];
        adam.step_selective(&mut p, &[0.0, 1.0], &[false, true]);
        assert_ne!(p[1], before);
    }

    #[test]
    fn remap_preserves_moments() {
        let mut adam = Adam::new(3, 0.1);
        let mut p = vec![1.0, 2.0, 3.0];
        adam.step(&mut p, &[0.5, 0.25, 0.125]);
        let remapped = adam.remap(2, |i| if i == 0 { Some(2) } else { None });
        assert_eq!(remapped.m[0], adam.m[2]);
        assert_eq!(remapped.m[1], 0.0);
        assert_eq!(remapped.steps[0], 1);
        assert_eq!(remapped.steps[1], 0);
    }
}
