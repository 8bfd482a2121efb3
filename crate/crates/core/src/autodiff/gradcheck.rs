//! Central finite-difference verification of tape gradients.
//!
//! Finite differences are always evaluated in `f64`. The analytic side runs
//! at the requested precision, so a 32-bit check compares the `f32` backward
//! pass against a 64-bit numerical reference rather than against 32-bit
//! differences, which would be dominated by rounding noise.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kernels::Real;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Scalar-valued function that can be traced at any precision.
pub trait TapeFn {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub precision: Precision,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
    /// Per coordinate, start just inside the linearised distance to the
    /// nearest kink (capped at `step`) and halve, down to about `step·1e-4`,
    /// until neither probe point changes side of a kink (see
    /// [`Tape::kink_inputs`]).
    pub avoid_kinks: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-6,
            precision: Precision::F64,
            max_coords_per_input: None,
            seed: 0,
            avoid_kinks: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, coordinate)` of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// Step used at the worst coordinate.
    pub step: f64,
    /// Coordinates where even the smallest step crossed a kink.
    pub kinked: usize,
}

/// A differentiable input: values and shape.
#[derive(Debug, Clone)]
pub struct Input {
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Input {
    pub fn new(values: Vec<f64>, shape: &[usize]) -> Self {
        Input {
            values,
            shape: shape.to_vec(),
        }
    }
}

fn trace<T: Real, F: TapeFn>(f: &F, inputs: &[Input]) -> Result<(Tape<T>, Vec<Var>, Var)> {
    let mut tape = Tape::<T>::new();
    let vars = inputs
        .iter()
        .map(|i| tape.variable(i.values.iter().map(|&v| T::of(v)).collect(), &i.shape))
        .collect::<Result<Vec<_>>>()?;
    let out = f.eval(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

fn eval_f64<F: TapeFn>(f: &F, inputs: &[Input], kinks: bool) -> Result<(f64, Vec<f64>)> {
    let (tape, _, out) = trace::<f64, F>(f, inputs)?;
    let z = if kinks { tape.kink_inputs() } else { Vec::new() };
    Ok((tape.scalar(out), z))
}

const KINK_HALVINGS: i32 = 13;

fn same_side(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (*x > 0.0) == (*y > 0.0))
}

/// Fraction of the linearised kink distance used as the first step.
const KINK_MARGIN: f64 = 0.9;

/// Distance along the probed coordinate at which the first kink input would
/// reach zero, scaled by [`KINK_MARGIN`], from values at the centre and at a
/// tiny offset `h0`.
fn kink_free_step(centre: &[f64], moved: &[f64], h0: f64, cap: f64) -> f64 {
    centre.iter().zip(moved).fold(cap, |r, (&c, &m)| {
        let rate = (m - c) / h0;
        if rate == 0.0 {
            r
        } else {
            r.min(KINK_MARGIN * c.abs() / rate.abs())
        }
    })
}

fn analytic<T: Real, F: TapeFn>(f: &F, inputs: &[Input]) -> Result<Vec<Vec<f64>>> {
    let (tape, vars, out) = trace::<T, F>(f, inputs)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .map(|&v| grads.wrt_or_zeros(&tape, v).iter().map(|g| g.f64()).collect())
        .collect())
}

/// Worst per-coordinate relative error `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F: TapeFn>(f: &F, inputs: &[Input], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = grad_check_each(f, inputs, opts, &[opts.precision])?;
    Ok(r.remove(0))
}

/// [`grad_check`] once per entry of `precisions` (ignoring
/// `opts.precision`), sharing one set of finite differences.
pub fn grad_check_each<F: TapeFn>(
    f: &F,
    inputs: &[Input],
    opts: &GradCheckOptions,
    precisions: &[Precision],
) -> Result<Vec<GradCheckReport>> {
    if opts.step <= 0.0 {
        return Err(Error::Config(format!("grad_check step must be positive, got {}", opts.step)));
    }
    let grads = precisions
        .iter()
        .map(|p| match p {
            Precision::F32 => analytic::<f32, F>(f, inputs),
            Precision::F64 => analytic::<f64, F>(f, inputs),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = vec![
        GradCheckReport {
            max_rel_error: 0.0,
            worst: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
            coords_checked: 0,
            step: opts.step,
            kinked: 0,
        };
        precisions.len()
    ];
    let centre = if opts.avoid_kinks { eval_f64(f, inputs, true)?.1 } else { Vec::new() };
    let min_step = opts.step * 0.5f64.powi(KINK_HALVINGS);
    let mut probe: Vec<Input> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.values.len();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for k in coords {
            let x0 = input.values[k];
            let mut h = opts.step;
            let mut kinked = false;
            let numeric;
            if opts.avoid_kinks {
                let h0 = min_step * 1e-3;
                probe[i].values[k] = x0 + h0;
                let moved = eval_f64(f, &probe, true)?.1;
                h = kink_free_step(&centre, &moved, h0, opts.step).max(min_step);
                loop {
                    probe[i].values[k] = x0 + h;
                    let (fp, zp) = eval_f64(f, &probe, true)?;
                    probe[i].values[k] = x0 - h;
                    let (fm, zm) = eval_f64(f, &probe, true)?;
                    let clean = same_side(&zp, &centre) && same_side(&zm, &centre);
                    if clean || h <= min_step {
                        kinked = !clean;
                        numeric = (fp - fm) / (2.0 * h);
                        break;
                    }
                    h = (h / 2.0).max(min_step);
                }
            } else {
                probe[i].values[k] = x0 + h;
                let fp = eval_f64(f, &probe, false)?.0;
                probe[i].values[k] = x0 - h;
                let fm = eval_f64(f, &probe, false)?.0;
                numeric = (fp - fm) / (2.0 * h);
            }
            probe[i].values[k] = x0;
            for (report, g) in reports.iter_mut().zip(&grads) {
                let a = g[i][k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                report.coords_checked += 1;
                report.kinked += kinked as usize;
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = (i, k);
                    report.analytic = a;
                    report.numeric = numeric;
                    report.step = h;
                }
            }
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Linear;
    impl TapeFn for Linear {
        fn eval<T: Real>(&self, t: &mut Tape<T>, x: &[Var]) -> Result<Var> {
            let s = t.scale(x[0], 2.5)?;
            let s = t.add(s, x[1])?;
            t.sum(s)
        }
    }

    struct ReluSum;
    impl TapeFn for ReluSum {
        fn eval<T: Real>(&self, t: &mut Tape<T>, x: &[Var]) -> Result<Var> {
            let r = t.relu(x[0])?;
            let sq = t.square(r)?;
            t.sum(sq)
        }
    }

    #[test]
    fn linear_function_is_exact() {
        let inputs = [
            Input::new(vec![0.3, -1.0, 2.0], &[3]),
            Input::new(vec![1.0, 0.5, -0.25], &[3]),
        ];
        let opts = GradCheckOptions {
            step: 1e-2,
            ..Default::default()
        };
        let r = grad_check(&Linear, &inputs, &opts).unwrap();
        assert!(r.max_rel_error <= 1e-10, "{r:?}");
    }

    #[test]
    fn relu_away_from_kink() {
        let inputs = [Input::new(vec![0.5, -0.7, 1.3, -0.01, 0.02], &[5])];
        let r = grad_check(&ReluSum, &inputs, &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    struct AbsSum;
    impl TapeFn for AbsSum {
        fn eval<T: Real>(&self, t: &mut Tape<T>, x: &[Var]) -> Result<Var> {
            let a = t.abs(x[0])?;
            let s = t.square(x[0])?;
            let y = t.add(a, s)?;
            t.sum(y)
        }
    }

    #[test]
    fn steps_shrink_to_stay_off_kinks() {
        let inputs = [Input::new(vec![2e-5, -3e-4, 0.7], &[3])];
        let plain = GradCheckOptions {
            step: 1e-3,
            ..Default::default()
        };
        assert!(grad_check(&AbsSum, &inputs, &plain).unwrap().max_rel_error > 0.1);
        let safe = GradCheckOptions {
            avoid_kinks: true,
            ..plain
        };
        let r = grad_check(&AbsSum, &inputs, &safe).unwrap();
        assert!(r.max_rel_error <= 1e-8 && r.kinked == 0, "{r:?}");
    }

    #[test]
    fn shared_differences_match_single_runs() {
        let inputs = [Input::new(vec![0.5, -0.7, 1.3], &[3])];
        let opts = GradCheckOptions::default();
        let both = grad_check_each(&ReluSum, &inputs, &opts, &[Precision::F64, Precision::F32]).unwrap();
        assert_eq!(both[0], grad_check(&ReluSum, &inputs, &opts).unwrap());
        let f32_opts = GradCheckOptions {
            precision: Precision::F32,
            ..opts
        };
        assert_eq!(both[1], grad_check(&ReluSum, &inputs, &f32_opts).unwrap());
    }

    #[test]
    fn nonpositive_step_is_rejected() {
        let inputs = [Input::new(vec![1.0], &[1])];
        let opts = GradCheckOptions {
            step: 0.0,
            ..Default::default()
        };
        assert!(grad_check(&ReluSum, &inputs, &opts).is_err());
    }
}
