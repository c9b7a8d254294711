use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam with bias correction over a fixed, ordered list of parameter slots.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor<T>> = shapes.into_iter().map(Tensor::zeros).collect();
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn slots(&self) -> usize {
        self.m.len()
    }

    pub fn first_moment(&self, slot: usize) -> &Tensor<T> {
        &self.m[slot]
    }

    pub fn second_moment(&self, slot: usize) -> &Tensor<T> {
        &self.v[slot]
    }

    /// Applies one update. `updates` yields `(param, grad)` for every slot,
    /// in slot order.
    pub fn step<'a, I>(&mut self, updates: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a mut Tensor<T>, &'a Tensor<T>)>,
    {
        let updates: Vec<_> = updates.into_iter().collect();
        if updates.len() != self.m.len() {
            return Err(shape_err(
                "adam_step",
                format!("{} slots, {} updates", self.m.len(), updates.len()),
            ));
        }
        for (slot, (p, g)) in updates.iter().enumerate() {
            if p.shape() != self.m[slot].shape() || g.shape() != self.m[slot].shape() {
                return Err(shape_err(
                    "adam_step",
                    format!(
                        "slot {slot}: moment {:?}, param {:?}, grad {:?}",
                        self.m[slot].shape(),
                        p.shape(),
                        g.shape()
                    ),
                ));
            }
            g.ensure_finite("adam_step")?;
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.eps);
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);

        for (slot, (p, g)) in updates.into_iter().enumerate() {
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi = *pi - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
