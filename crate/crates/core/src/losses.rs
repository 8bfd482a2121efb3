//! Training objectives: the composite image loss, the generator objective and
//! the WGAN-GP critic objective, plus the Sobel edge operator and SSIM on the
//! tape.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Var};
use crate::datamodel::VolumeGrid;
use crate::error::{Error, Result};
use crate::model::CriticFn;

/// SSIM window: Gaussian, σ = 1.5 voxels, 11 taps per axis.
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_RADIUS: usize = 5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the P-net supervision term in the generator objective.
    pub lambda_a: f64,
    /// Weight of the adversarial term.
    pub lambda_b: f64,
    /// Weight of `1 − SSIM` in the composite loss.
    pub lambda_c: f64,
    /// Weight of the edge MAE in the composite loss.
    pub lambda_d: f64,
    /// Gradient-penalty weight of the critic objective.
    pub lambda_gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_a: 0.1,
            lambda_b: 0.005,
            lambda_c: 0.8,
            lambda_d: 0.1,
            lambda_gp: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_a, self.lambda_b, self.lambda_c, self.lambda_d, self.lambda_gp];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Sobel kernels `[3, 1, 3, 3, 3]` for the x, y and z derivatives of a
/// `[D, H, W]` volume (x is the fastest axis).
pub fn sobel_kernels() -> Vec<f64> {
    let smooth = [1.0, 2.0, 1.0];
    let deriv = [-1.0, 0.0, 1.0];
    let mut k = Vec::with_capacity(81);
    for axis in 0..3 {
        for z in 0..3 {
            for y in 0..3 {
                for x in 0..3 {
                    let (fz, fy, fx) = match axis {
                        0 => (smooth[z], smooth[y], deriv[x]),
                        1 => (smooth[z], deriv[y], smooth[x]),
                        _ => (deriv[z], smooth[y], smooth[x]),
                    };
                    k.push(fz * fy * fx);
                }
            }
        }
    }
    k
}

fn check_volume<T: Real>(t: &Tape<T>, x: Var, what: &str) -> Result<[usize; 3]> {
    let s = t.shape(x);
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::Shape(format!("{what} must be [1, nz, ny, nx], got {s:?}")));
    }
    Ok([s[1], s[2], s[3]])
}

/// Gradient magnitude `sqrt(Gx² + Gy² + Gz²)` of `x[1, D, H, W]`, zero padded.
pub fn sobel_edges<T: Real>(t: &mut Tape<T>, x: Var) -> Result<Var> {
    let dims = check_volume(t, x, "sobel input")?;
    if dims.iter().any(|&n| n < 3) {
        return Err(Error::Shape(format!("sobel needs at least 3 voxels per axis, got {dims:?}")));
    }
    let k = t.constant(sobel_kernels().into_iter().map(T::of).collect(), &[3, 1, 3, 3, 3])?;
    let g = t.conv3d(x, k, None, 1, 1)?;
    t.channel_norm(g)
}

/// Sobel edge magnitude of a volume.
pub fn sobel_volume(v: &VolumeGrid) -> Result<VolumeGrid> {
    let d = v.dims();
    let mut t = Tape::<f64>::new();
    let x = t.constant(v.values().iter().map(|&a| a as f64).collect(), &[1, d.nz, d.ny, d.nx])?;
    let e = sobel_edges(&mut t, x)?;
    let vals = t.value(e).iter().map(|&a| a as f32).collect();
    VolumeGrid::new(d, v.voxel_size(), vals)
}

/// Mean absolute difference.
pub fn mae<T: Real>(t: &mut Tape<T>, x: Var, y: Var) -> Result<Var> {
    let d = t.sub(x, y)?;
    let a = t.abs(d)?;
    t.mean(a)
}

/// Mean SSIM between `x` and `y` with a Gaussian window (σ 1.5, 11 taps,
/// renormalised where truncated by the border) and `C1 = (k1·peak)²`,
/// `C2 = (k2·peak)²`.
pub fn ssim<T: Real>(t: &mut Tape<T>, x: Var, y: Var, peak: f64) -> Result<Var> {
    check_volume(t, x, "ssim input")?;
    if t.shape(x) != t.shape(y) {
        return Err(Error::Shape(format!("ssim {:?} vs {:?}", t.shape(x), t.shape(y))));
    }
    if !(peak > 0.0) {
        return Err(Error::Numerical(format!("ssim peak must be positive, got {peak}")));
    }
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let blur = |t: &mut Tape<T>, v: Var| t.gaussian_blur3d(v, SSIM_SIGMA, SSIM_RADIUS);
    let mx = blur(t, x)?;
    let my = blur(t, y)?;
    let xx = t.mul(x, x)?;
    let yy = t.mul(y, y)?;
    let xy = t.mul(x, y)?;
    let exx = blur(t, xx)?;
    let eyy = blur(t, yy)?;
    let exy = blur(t, xy)?;
    let mx2 = t.mul(mx, mx)?;
    let my2 = t.mul(my, my)?;
    let mxy = t.mul(mx, my)?;
    let vx = t.sub(exx, mx2)?;
    let vy = t.sub(eyy, my2)?;
    let cxy = t.sub(exy, mxy)?;

    let a = t.scale(mxy, 2.0)?;
    let a = t.add_scalar(a, c1)?;
    let b = t.scale(cxy, 2.0)?;
    let b = t.add_scalar(b, c2)?;
    let num = t.mul(a, b)?;
    let c = t.add(mx2, my2)?;
    let c = t.add_scalar(c, c1)?;
    let d = t.add(vx, vy)?;
    let d = t.add_scalar(d, c2)?;
    let den = t.mul(c, d)?;
    let map = t.div(num, den)?;
    t.mean(map)
}

/// Per-term values of the composite loss.
#[derive(Debug, Clone, Copy)]
pub struct CompositeTerms {
    pub total: Var,
    pub mae: Var,
    pub ssim: Var,
    pub edge_mae: Var,
}

/// `MAE(X, Y) + λc·(1 − SSIM(X, Y)) + λd·MAE(SO(X), SO(Y))`, with the SSIM
/// peak taken from the reference `Y`.
pub fn composite_loss<T: Real>(t: &mut Tape<T>, x: Var, y: Var, w: &LossWeights) -> Result<CompositeTerms> {
    if t.shape(x) != t.shape(y) {
        return Err(Error::Shape(format!("loss {:?} vs {:?}", t.shape(x), t.shape(y))));
    }
    let peak = t.value(y).iter().fold(0.0f64, |m, v| m.max(v.f64()));
    let peak = if peak > 0.0 { peak } else { 1.0 };
    let m = mae(t, x, y)?;
    let s = ssim(t, x, y, peak)?;
    let ex = sobel_edges(t, x)?;
    let ey = sobel_edges(t, y)?;
    let e = mae(t, ex, ey)?;
    let one_minus = t.scale(s, -w.lambda_c)?;
    let one_minus = t.add_scalar(one_minus, w.lambda_c)?;
    let ew = t.scale(e, w.lambda_d)?;
    let total = t.add(m, one_minus)?;
    let total = t.add(total, ew)?;
    Ok(CompositeTerms {
        total,
        mae: m,
        ssim: s,
        edge_mae: e,
    })
}

/// One subject's generator outputs and its reference.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorSample {
    pub output: Var,
    /// P-net intermediate; required for the supervision term.
    pub img_p: Option<Var>,
    pub target: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct GeneratorTerms {
    pub total: Var,
    /// Batch mean of ℓ(G(I_one), I_four).
    pub main: Var,
    /// Batch mean of ℓ(P_net(I_one), I_four).
    pub intermediate: Var,
    /// Batch mean of D(G(I_one)).
    pub adversarial: Var,
}

fn batch_mean<T: Real>(t: &mut Tape<T>, vals: &[Var]) -> Result<Var> {
    let mut acc = vals[0];
    for &v in &vals[1..] {
        acc = t.add(acc, v)?;
    }
    t.scale(acc, 1.0 / vals.len() as f64)
}

/// `ℓ(G(I_one), I_four) + λa·ℓ(P_net(I_one), I_four) − λb·mean D(G(I_one))`,
/// with ℓ averaged per volume over the batch.
pub fn generator_objective<T: Real, C: CriticFn<T>>(
    t: &mut Tape<T>,
    batch: &[GeneratorSample],
    critic: &C,
    w: &LossWeights,
) -> Result<GeneratorTerms> {
    if batch.is_empty() {
        return Err(Error::Dataset("generator objective on an empty batch".into()));
    }
    let mut main = Vec::new();
    let mut inter = Vec::new();
    let mut adv = Vec::new();
    for s in batch {
        let p = s
            .img_p
            .ok_or_else(|| Error::Shape("generator objective needs the P-net intermediate IMG_p".into()))?;
        main.push(composite_loss(t, s.output, s.target, w)?.total);
        inter.push(composite_loss(t, p, s.target, w)?.total);
        adv.push(critic.score(t, s.output)?);
    }
    let main = batch_mean(t, &main)?;
    let intermediate = batch_mean(t, &inter)?;
    let adversarial = batch_mean(t, &adv)?;
    let a = t.scale(intermediate, w.lambda_a)?;
    let b = t.scale(adversarial, -w.lambda_b)?;
    let total = t.add(main, a)?;
    let total = t.add(total, b)?;
    Ok(GeneratorTerms {
        total,
        main,
        intermediate,
        adversarial,
    })
}

/// `(‖∇ₓD(x̂)‖₂ − 1)²`.
pub fn gradient_penalty<T: Real, C: CriticFn<T>>(t: &mut Tape<T>, critic: &C, x_hat: Var) -> Result<Var> {
    let g = critic.input_grad(t, x_hat)?;
    let sq = t.square(g)?;
    let n2 = t.sum(sq)?;
    let n = t.sqrt(n2)?;
    let d = t.add_scalar(n, -1.0)?;
    t.square(d)
}

#[derive(Debug, Clone, Copy)]
pub struct CriticTerms {
    pub total: Var,
    /// `mean D(fake) − mean D(real)`.
    pub wasserstein: Var,
    /// Mean penalty (unweighted).
    pub penalty: Var,
}

/// `mean D(fake) − mean D(real) + λgp·mean (‖∇D(x̂)‖ − 1)²` with
/// `x̂ = u·real + (1 − u)·fake`, one `u` per sample.
pub fn critic_objective<T: Real, C: CriticFn<T>>(
    t: &mut Tape<T>,
    critic: &C,
    real: &[Var],
    fake: &[Var],
    u: &[f64],
    lambda_gp: f64,
) -> Result<CriticTerms> {
    if real.is_empty() {
        return Err(Error::Dataset("critic objective on an empty batch".into()));
    }
    if real.len() != fake.len() || u.len() != real.len() {
        return Err(Error::Shape(format!(
            "critic batch sizes differ: {} real, {} fake, {} mixing weights",
            real.len(),
            fake.len(),
            u.len()
        )));
    }
    let mut fs = Vec::new();
    let mut rs = Vec::new();
    let mut ps = Vec::new();
    for ((&r, &f), &ui) in real.iter().zip(fake).zip(u) {
        fs.push(critic.score(t, f)?);
        rs.push(critic.score(t, r)?);
        let a = t.scale(r, ui)?;
        let b = t.scale(f, 1.0 - ui)?;
        let x_hat = t.add(a, b)?;
        ps.push(gradient_penalty(t, critic, x_hat)?);
    }
    let mf = batch_mean(t, &fs)?;
    let mr = batch_mean(t, &rs)?;
    let wasserstein = t.sub(mf, mr)?;
    let penalty = batch_mean(t, &ps)?;
    let wp = t.scale(penalty, lambda_gp)?;
    let total = t.add(wasserstein, wp)?;
    Ok(CriticTerms {
        total,
        wasserstein,
        penalty,
    })
}
