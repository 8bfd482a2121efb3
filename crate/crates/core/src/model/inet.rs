//! Image-domain refiner: two 3D U-nets of identical layout.

use super::layers::Conv;
use super::ModelConfig;
use crate::autodiff::{Init, ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};

/// Three-level encoder–decoder, `in_channels → 1`.
#[derive(Debug, Clone)]
pub struct UNet3d {
    enc: Vec<[Conv; 2]>,
    dec: Vec<[Conv; 2]>,
    out: Conv,
}

impl UNet3d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, in_channels: usize, widths: &[usize], zero_out: bool) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Config("U-net needs at least one level".into()));
        }
        let mut enc = Vec::new();
        let mut c = in_channels;
        for (l, &w) in widths.iter().enumerate() {
            enc.push([
                Conv::new(store, &format!("{name}.enc{l}.a"), c, w, 3, 1, true, None)?,
                Conv::new(store, &format!("{name}.enc{l}.b"), w, w, 3, 1, true, None)?,
            ]);
            c = w;
        }
        let mut dec = Vec::new();
        for l in (0..widths.len() - 1).rev() {
            let w = widths[l];
            dec.push([
                Conv::new(store, &format!("{name}.dec{l}.a"), c + w, w, 3, 1, true, None)?,
                Conv::new(store, &format!("{name}.dec{l}.b"), w, w, 3, 1, true, None)?,
            ]);
            c = w;
        }
        let init = zero_out.then_some(Init::Zeros);
        let out = Conv::new(store, &format!("{name}.out"), c, 1, 1, 1, true, init)?;
        Ok(UNet3d { enc, dec, out })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut skips = Vec::new();
        let mut h = x;
        for (l, [a, b]) in self.enc.iter().enumerate() {
            if l > 0 {
                h = t.avg_pool2(h)?;
            }
            h = a.forward(t, s, h)?;
            h = t.leaky_relu(h, 0.2)?;
            h = b.forward(t, s, h)?;
            h = t.leaky_relu(h, 0.2)?;
            skips.push(h);
        }
        skips.pop();
        for [a, b] in &self.dec {
            let skip = skips.pop().expect("one skip per decoder level");
            let ss = t.shape(skip).to_vec();
            h = t.upsample_nearest(h, [ss[1], ss[2], ss[3]])?;
            h = t.concat(&[h, skip], 0)?;
            h = a.forward(t, s, h)?;
            h = t.leaky_relu(h, 0.2)?;
            h = b.forward(t, s, h)?;
            h = t.leaky_relu(h, 0.2)?;
        }
        self.out.forward(t, s, h)
    }
}

#[derive(Debug, Clone)]
pub struct INet {
    pub cnn1: UNet3d,
    pub cnn2: UNet3d,
}

impl INet {
    pub fn new<T: Real>(cfg: &ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        Ok(INet {
            cnn1: UNet3d::new(store, "inet.cnn1", 3, &cfg.inet_channels, cfg.zero_init_output)?,
            cnn2: UNet3d::new(store, "inet.cnn2", 3, &cfg.inet_channels, cfg.zero_init_output)?,
        })
    }

    /// `relu(cnn2([cnn1([p, bp, mlem]), mlem, p]) + mlem)`; all volumes
    /// shaped `[1, nz, ny, nx]`.
    pub fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, img_p: Var, img_bp: Var, img_mlem: Var) -> Result<Var> {
        let shape = t.shape(img_mlem).to_vec();
        for (name, v) in [("img_p", img_p), ("img_bp", img_bp)] {
            if t.shape(v) != shape.as_slice() {
                return Err(Error::Shape(format!("{name} {:?} vs img_mlem {shape:?}", t.shape(v))));
            }
        }
        let x1 = t.concat(&[img_p, img_bp, img_mlem], 0)?;
        let h1 = self.cnn1.forward(t, s, x1)?;
        let x2 = t.concat(&[h1, img_mlem, img_p], 0)?;
        let h2 = self.cnn2.forward(t, s, x2)?;
        let r = t.add(h2, img_mlem)?;
        t.relu(r)
    }
}
