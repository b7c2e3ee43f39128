use crate::error::{Error, Result};

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    /// Zeroed moments for parameters of the given sizes.
    pub fn new(sizes: &[usize], beta1: f32, beta2: f32, eps: f32, weight_decay: f32) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    /// Restores state saved from an identically shaped optimizer.
    pub fn set_state(&mut self, step: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Result<()> {
        let fits = |a: &[Vec<f32>]| {
            a.len() == self.m.len() && a.iter().zip(&self.m).all(|(x, y)| x.len() == y.len())
        };
        if !fits(&m) || !fits(&v) {
            return Err(Error::Argument(
                "optimizer state does not match parameter sizes".into(),
            ));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update. `decay[i]` selects which parameters receive weight decay.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]], decay: &[bool], lr: f32) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let wd = if decay[i] { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (x, &g)) in p.iter_mut().zip(grads[i]).enumerate() {
                *x -= lr * wd * *x;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *x -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(p: f32, g: f32, lr: f32, wd: f32) -> f32 {
        let mut opt = AdamW::new(&[1], 0.9, 0.999, 1e-8, wd);
        let mut v = [p];
        opt.step(&mut [&mut v[..]], &[&[g]], &[true], lr);
        v[0]
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        assert_eq!(one(0.37, 0.0, 0.1, 0.0), 0.37);
    }

    #[test]
    fn first_step_moves_by_lr() {
        assert!((one(1.0, 1.0, 0.1, 0.0) - 0.9).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay() {
        assert!((one(1.0, 0.0, 0.1, 0.01) - 0.999).abs() < 1e-7);
    }

    #[test]
    fn decay_mask_is_respected() {
        let mut opt = AdamW::new(&[1, 1], 0.9, 0.999, 1e-8, 0.5);
        let (mut a, mut b) = ([1.0f32], [1.0f32]);
        opt.step(
            &mut [&mut a[..], &mut b[..]],
            &[&[0.0], &[0.0]],
            &[true, false],
            0.1,
        );
        assert!(a[0] < 1.0);
        assert_eq!(b[0], 1.0);
        assert_eq!(opt.steps_taken(), 1);
    }
}
