//! WGAN critic and its differentiable input gradient.

use super::layers::Conv;
use super::ModelConfig;
use crate::autodiff::{ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};

const SLOPE: f64 = 0.2;

/// Scalar critic with an input gradient that can itself be differentiated.
pub trait CriticFn<T: Real> {
    /// `D(x)` for `x[1, nz, ny, nx]`.
    fn score(&self, t: &mut Tape<T>, x: Var) -> Result<Var>;
    /// `∇ₓD(x)` as a node whose gradient w.r.t. the critic's parameters is
    /// available (the gradient penalty differentiates its norm).
    fn input_grad(&self, t: &mut Tape<T>, x: Var) -> Result<Var>;
}

/// Five 3×3×3 convolutions, three of them stride 2, leaky ReLU between
/// layers, global mean at the end. No normalisation layers.
#[derive(Debug, Clone)]
pub struct Critic {
    pub layers: Vec<Conv>,
}

impl Critic {
    pub fn new<T: Real>(cfg: &ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        let ch = &cfg.critic_channels;
        if ch.len() != 4 {
            return Err(Error::Config(format!("critic_channels needs 4 widths, got {}", ch.len())));
        }
        let plan = [(1, ch[0], 2), (ch[0], ch[1], 2), (ch[1], ch[2], 2), (ch[2], ch[3], 1), (ch[3], 1, 1)];
        let layers = plan
            .iter()
            .enumerate()
            .map(|(l, &(i, o, s))| Conv::new(store, &format!("critic.conv{l}"), i, o, 3, s, true, None))
            .collect::<Result<_>>()?;
        Ok(Critic { layers })
    }

    /// Bound view over a parameter store for use as a [`CriticFn`].
    pub fn bind<'a, T: Real>(&'a self, store: &'a ParamStore<T>) -> BoundCritic<'a, T> {
        BoundCritic { critic: self, store }
    }
}

pub struct BoundCritic<'a, T: Real> {
    critic: &'a Critic,
    store: &'a ParamStore<T>,
}

impl<T: Real> BoundCritic<'_, T> {
    /// Pre-activations of every layer plus the last layer's output.
    fn trace(&self, t: &mut Tape<T>, x: Var) -> Result<(Vec<Var>, Vec<[usize; 4]>)> {
        let mut pre = Vec::new();
        let mut inputs = Vec::new();
        let mut h = x;
        for (l, conv) in self.critic.layers.iter().enumerate() {
            let s = t.shape(h);
            if s.len() != 4 {
                return Err(Error::Shape(format!("critic input {s:?}")));
            }
            inputs.push([s[0], s[1], s[2], s[3]]);
            let z = conv.forward(t, self.store, h)?;
            pre.push(z);
            h = if l + 1 < self.critic.layers.len() { t.leaky_relu(z, SLOPE)? } else { z };
        }
        Ok((pre, inputs))
    }
}

impl<T: Real> CriticFn<T> for BoundCritic<'_, T> {
    fn score(&self, t: &mut Tape<T>, x: Var) -> Result<Var> {
        let (pre, _) = self.trace(t, x)?;
        t.mean(*pre.last().expect("critic has layers"))
    }

    fn input_grad(&self, t: &mut Tape<T>, x: Var) -> Result<Var> {
        // forward values only: the activation masks are piecewise constant
        let (pre, inputs) = self.trace(t, x)?;
        let last = *pre.last().expect("critic has layers");
        let n = t.value(last).len();
        let shape = t.shape(last).to_vec();
        let mut g = t.constant(vec![T::one() / T::of(n as f64); n], &shape)?;
        for (l, conv) in self.critic.layers.iter().enumerate().rev() {
            if l + 1 < self.critic.layers.len() {
                let z = t.value(pre[l]);
                let slope = T::of(SLOPE);
                let mask: Vec<T> = z.iter().map(|&v| if v > T::zero() { T::one() } else { slope }).collect();
                let zshape = t.shape(pre[l]).to_vec();
                let m = t.constant(mask, &zshape)?;
                g = t.mul(g, m)?;
            }
            let w = t.param(self.store, conv.w)?;
            g = t.conv3d_input_grad(g, w, inputs[l], conv.stride, conv.pad())?;
        }
        Ok(g)
    }
}
