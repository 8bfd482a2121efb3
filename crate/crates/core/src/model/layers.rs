//! Parameterised building blocks shared by the generator and the critic.

use crate::autodiff::{Init, ParamId, ParamStore, Real, Tape, Var};
use crate::error::Result;

/// `y = x·W + b` on row vectors, `x[n, in]`, `W[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Linear {
            w: store.add(
                format!("{name}.w"),
                &[d_in, d_out],
                Init::Xavier {
                    fan_in: d_in,
                    fan_out: d_out,
                },
            )?,
            b: store.add(format!("{name}.b"), &[d_out], Init::Zeros)?,
        })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = t.param(s, self.w)?;
        let b = t.param(s, self.b)?;
        let y = t.matmul(x, w)?;
        t.add_row_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}.gain"), &[d], Init::Ones)?,
            bias: store.add(format!("{name}.bias"), &[d], Init::Zeros)?,
        })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = t.param(s, self.gain)?;
        let b = t.param(s, self.bias)?;
        t.layer_norm(x, g, b, 1e-5)
    }
}

/// Convolution weights `w[out, in, k, k]` (2D) or `w[out, in, k, k, k]` (3D).
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub three_d: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        three_d: bool,
        init: Option<Init>,
    ) -> Result<Self> {
        let vol = if three_d { kernel.pow(3) } else { kernel.pow(2) };
        let shape: Vec<usize> = if three_d {
            vec![c_out, c_in, kernel, kernel, kernel]
        } else {
            vec![c_out, c_in, kernel, kernel]
        };
        let init = init.unwrap_or(Init::Xavier {
            fan_in: c_in * vol,
            fan_out: c_out * vol,
        });
        Ok(Conv {
            w: store.add(format!("{name}.w"), &shape, init)?,
            b: store.add(format!("{name}.b"), &[c_out], Init::Zeros)?,
            c_in,
            c_out,
            kernel,
            stride,
            three_d,
        })
    }

    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = t.param(s, self.w)?;
        let b = t.param(s, self.b)?;
        if self.three_d {
            t.conv3d(x, w, Some(b), self.stride, self.pad())
        } else {
            t.conv2d(x, w, Some(b), self.pad())
        }
    }
}
