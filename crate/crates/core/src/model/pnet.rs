//! Projection-domain network: one transformer + shallow CNN group per slice.

use std::sync::Arc;

use super::layers::{Conv, LayerNorm, Linear};
use super::{ModelConfig, ModelShapes};
use crate::autodiff::{Init, ParamId, ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Parameters of the group that produces one output slice.
#[derive(Debug, Clone)]
pub struct SliceGroup {
    embed: Linear,
    pos: ParamId,
    module_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    token_head: Linear,
    slice_head: Linear,
    cnn: Vec<Conv>,
}

#[derive(Debug, Clone)]
pub struct PNet {
    pub groups: Vec<SliceGroup>,
    shapes: ModelShapes,
    n_heads: usize,
    tokens: Arc<Vec<usize>>,
    pos_idx: Arc<Vec<usize>>,
    module_idx: Arc<Vec<usize>>,
}

/// Per-slice intermediates kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct SliceTrace {
    pub transformer_slice: Var,
    pub fused: Var,
    pub output: Var,
}

impl PNet {
    pub fn new<T: Real>(cfg: &ModelConfig, shapes: &ModelShapes, store: &mut ParamStore<T>, n_groups: usize) -> Result<Self> {
        let tc = &cfg.transformer;
        let p = tc.patch_size;
        let (m, nv, nu) = (shapes.n_modules, shapes.nv, shapes.nu);
        let (pv, pu) = (nv / p, nu / p);
        let per_module = pv * pu;
        let n_tokens = m * per_module;
        let e = tc.embed_dim;
        let hidden = e * tc.mlp_ratio;
        let plane = shapes.nx * shapes.ny;

        let mut groups = Vec::with_capacity(n_groups);
        for i in 0..n_groups {
            let g = format!("pnet.slice{i:03}");
            let mut blocks = Vec::with_capacity(tc.n_layers);
            for l in 0..tc.n_layers {
                let b = format!("{g}.block{l}");
                blocks.push(Block {
                    ln1: LayerNorm::new(store, &format!("{b}.ln1"), e)?,
                    q: Linear::new(store, &format!("{b}.attn.q"), e, e)?,
                    k: Linear::new(store, &format!("{b}.attn.k"), e, e)?,
                    v: Linear::new(store, &format!("{b}.attn.v"), e, e)?,
                    proj: Linear::new(store, &format!("{b}.attn.proj"), e, e)?,
                    ln2: LayerNorm::new(store, &format!("{b}.ln2"), e)?,
                    fc1: Linear::new(store, &format!("{b}.mlp.fc1"), e, hidden)?,
                    fc2: Linear::new(store, &format!("{b}.mlp.fc2"), hidden, e)?,
                });
            }
            let channels = shapes.fused_channels();
            let mut widths = vec![channels];
            widths.extend(&cfg.pnet_cnn_channels);
            widths.push(1);
            let mut cnn = Vec::new();
            for (l, pair) in widths.windows(2).enumerate() {
                let last = l + 2 == widths.len();
                let init = (last && cfg.zero_init_output).then_some(Init::Zeros);
                cnn.push(Conv::new(store, &format!("{g}.cnn{l}"), pair[0], pair[1], 3, 1, false, init)?);
            }
            groups.push(SliceGroup {
                embed: Linear::new(store, &format!("{g}.embed"), p * p, e)?,
                pos: store.add(
                    format!("{g}.pos_embed"),
                    &[per_module, e],
                    Init::Xavier {
                        fan_in: per_module,
                        fan_out: e,
                    },
                )?,
                module_emb: store.add(format!("{g}.module_embed"), &[m, e], Init::Xavier { fan_in: m, fan_out: e })?,
                blocks,
                ln_f: LayerNorm::new(store, &format!("{g}.ln_f"), e)?,
                token_head: Linear::new(store, &format!("{g}.token_head"), e, 1)?,
                slice_head: Linear::new(store, &format!("{g}.slice_head"), n_tokens, plane)?,
                cnn,
            });
        }

        // token t = (module, patch row, patch col), element = (row, col) in patch
        let mut tokens = Vec::with_capacity(n_tokens * p * p);
        for mi in 0..m {
            for a in 0..pv {
                for b in 0..pu {
                    for r in 0..p {
                        for c in 0..p {
                            tokens.push((mi * nv + a * p + r) * nu + b * p + c);
                        }
                    }
                }
            }
        }
        Ok(PNet {
            groups,
            shapes: shapes.clone(),
            n_heads: tc.n_heads,
            tokens: Arc::new(tokens),
            pos_idx: Arc::new((0..n_tokens).map(|t| t % per_module).collect()),
            module_idx: Arc::new((0..n_tokens).map(|t| t / per_module).collect()),
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.pos_idx.len()
    }

    /// Flatten `proj[M, nv, nu]` into patch tokens `[T, p²]`.
    pub fn tokenize<T: Real>(&self, t: &mut Tape<T>, proj: Var) -> Result<Var> {
        let n = t.value(proj).len();
        let flat = t.reshape(proj, &[n, 1])?;
        let g = t.gather_rows(flat, self.tokens.clone())?;
        let per = self.tokens.len() / self.n_tokens();
        t.reshape(g, &[self.n_tokens(), per])
    }

    /// Module projections bilinearly resized to the slice plane, `[M, ny, nx]`.
    pub fn resized_projections<T: Real>(&self, t: &mut Tape<T>, proj: Var) -> Result<Var> {
        t.interpolate2d(proj, self.shapes.ny, self.shapes.nx)
    }

    fn attention<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, b: &Block, x: Var) -> Result<Var> {
        let q = b.q.forward(t, s, x)?;
        let k = b.k.forward(t, s, x)?;
        let v = b.v.forward(t, s, x)?;
        let e = t.shape(x)[1];
        let dh = e / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = t.slice(q, 1, h * dh, dh)?;
            let kh = t.slice(k, 1, h * dh, dh)?;
            let vh = t.slice(v, 1, h * dh, dh)?;
            let kt = t.transpose(kh)?;
            let scores = t.matmul(qh, kt)?;
            let scores = t.scale(scores, scale)?;
            let attn = t.softmax(scores)?;
            heads.push(t.matmul(attn, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { t.concat(&heads, 1)? };
        b.proj.forward(t, s, cat)
    }

    fn transformer_slice<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, g: &SliceGroup, tokens: Var) -> Result<Var> {
        let mut x = g.embed.forward(t, s, tokens)?;
        let pos = t.param(s, g.pos)?;
        let pos = t.gather_rows(pos, self.pos_idx.clone())?;
        let me = t.param(s, g.module_emb)?;
        let me = t.gather_rows(me, self.module_idx.clone())?;
        x = t.add(x, pos)?;
        x = t.add(x, me)?;
        for b in &g.blocks {
            let h = b.ln1.forward(t, s, x)?;
            let a = self.attention(t, s, b, h)?;
            x = t.add(x, a)?;
            let h = b.ln2.forward(t, s, x)?;
            let h = b.fc1.forward(t, s, h)?;
            let h = t.relu(h)?;
            let h = b.fc2.forward(t, s, h)?;
            x = t.add(x, h)?;
        }
        let x = g.ln_f.forward(t, s, x)?;
        let per_token = g.token_head.forward(t, s, x)?;
        let row = t.reshape(per_token, &[1, self.n_tokens()])?;
        let plane = g.slice_head.forward(t, s, row)?;
        t.reshape(plane, &[1, self.shapes.ny, self.shapes.nx])
    }

    /// Produce slice `i` from prepared inputs.
    ///
    /// `tokens` comes from [`tokenize`](Self::tokenize), `resized` from
    /// [`resized_projections`](Self::resized_projections), and `bp_slice` is
    /// slice `i` of the back-projection, shaped `[1, ny, nx]`.
    pub fn slice_forward<T: Real>(
        &self,
        t: &mut Tape<T>,
        s: &ParamStore<T>,
        i: usize,
        tokens: Var,
        resized: Var,
        bp_slice: Var,
    ) -> Result<SliceTrace> {
        let g = self
            .groups
            .get(i)
            .ok_or_else(|| Error::Shape(format!("slice {i} has no parameter group ({} groups)", self.groups.len())))?;
        let ts = self.transformer_slice(t, s, g, tokens)?;
        let fused = t.concat(&[ts, bp_slice, resized], 0)?;
        let mut h = fused;
        for (l, conv) in g.cnn.iter().enumerate() {
            h = conv.forward(t, s, h)?;
            if l + 1 < g.cnn.len() {
                h = t.leaky_relu(h, 0.2)?;
            }
        }
        Ok(SliceTrace {
            transformer_slice: ts,
            fused,
            output: h,
        })
    }

    /// Full IMG_p, shaped `[1, nz, ny, nx]`, from `proj[M, nv, nu]` and
    /// `img_bp[1, nz, ny, nx]`.
    pub fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, proj: Var, img_bp: Var) -> Result<(Var, Vec<SliceTrace>)> {
        let sh = &self.shapes;
        let expected_bp = [1, sh.nz, sh.ny, sh.nx];
        if t.shape(img_bp) != expected_bp {
            return Err(Error::Shape(format!("img_bp {:?}, expected {expected_bp:?}", t.shape(img_bp))));
        }
        let expected_proj = [sh.n_modules, sh.nv, sh.nu];
        if t.shape(proj) != expected_proj {
            return Err(Error::Shape(format!("projections {:?}, expected {expected_proj:?}", t.shape(proj))));
        }
        if self.groups.len() != sh.nz {
            return Err(Error::Shape(format!("{} slice groups for {} slices", self.groups.len(), sh.nz)));
        }
        let tokens = self.tokenize(t, proj)?;
        let resized = self.resized_projections(t, proj)?;
        let bp = t.reshape(img_bp, &[sh.nz, sh.ny, sh.nx])?;
        let mut traces = Vec::with_capacity(sh.nz);
        for i in 0..sh.nz {
            let bp_i = t.slice(bp, 0, i, 1)?;
            traces.push(self.slice_forward(t, s, i, tokens, resized, bp_i)?);
        }
        let outs: Vec<Var> = traces.iter().map(|tr| tr.output).collect();
        let stacked = t.concat(&outs, 0)?;
        let vol = t.reshape(stacked, &expected_bp)?;
        Ok((vol, traces))
    }
}
