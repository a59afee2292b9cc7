//! Non-learned reconstructions and the separately trained registration
//! network used by the frozen-registration ablation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::models::{RegConfig, RegNet};
use crate::mri::{MeasurementModel, MeasurementPair};
use crate::objectives::RegLossConfig;
use crate::tensor::Tensor;
use crate::trainer::{batch_indices, reg_step, AdamState};

/// Zero-filled reconstruction; identical to the pseudoinverse.
pub fn zero_filled(y: &Tensor, model: &MeasurementModel) -> Result<Tensor> {
    model.pseudoinverse(y)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvConfig {
    pub tau: f64,
    /// Gradient step on the data term. The operator has norm 1, so any
    /// value in (0, 1] converges.
    pub step: f64,
    pub iterations: usize,
    /// Dual iterations per proximal solve (warm-started).
    pub inner_iterations: usize,
    /// Relative objective change that counts as converged.
    pub tolerance: f64,
}

impl Default for TvConfig {
    fn default() -> Self {
        TvConfig {
            tau: 0.01,
            step: 1.0,
            iterations: 200,
            inner_iterations: 20,
            tolerance: 1e-7,
        }
    }
}

impl TvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "tv tau must be > 0, got {}",
                self.tau
            )));
        }
        if !(self.step > 0.0 && self.step <= 1.0) {
            return Err(Error::Config(format!(
                "tv step must be in (0, 1], got {}",
                self.step
            )));
        }
        if self.iterations == 0 || self.inner_iterations == 0 {
            return Err(Error::Config("tv iteration counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Forward differences of every plane, zero on the trailing edge.
/// Output: `[planes][2][H*W]` flattened, dy block then dx block per plane.
fn grad_op(x: &[f64], planes: usize, h: usize, w: usize, out: &mut [f64]) {
    let hw = h * w;
    for c in 0..planes {
        let src = &x[c * hw..(c + 1) * hw];
        let (dy, dx) = out[2 * c * hw..2 * (c + 1) * hw].split_at_mut(hw);
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                dy[p] = if i + 1 < h { src[p + w] - src[p] } else { 0.0 };
                dx[p] = if j + 1 < w { src[p + 1] - src[p] } else { 0.0 };
            }
        }
    }
}

/// Adjoint of [`grad_op`].
fn grad_adj(q: &[f64], planes: usize, h: usize, w: usize, out: &mut [f64]) {
    let hw = h * w;
    for c in 0..planes {
        let (dy, dx) = q[2 * c * hw..2 * (c + 1) * hw].split_at(hw);
        let dst = &mut out[c * hw..(c + 1) * hw];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let mut v = 0.0;
                if i + 1 < h {
                    v -= dy[p];
                }
                if i >= 1 {
                    v += dy[p - w];
                }
                if j + 1 < w {
                    v -= dx[p];
                }
                if j >= 1 {
                    v += dx[p - 1];
                }
                dst[p] = v;
            }
        }
    }
}

/// Isotropic TV over all planes: per pixel the norm of every difference.
fn tv_norm(d: &[f64], planes: usize, hw: usize) -> f64 {
    (0..hw)
        .map(|p| {
            (0..2 * planes)
                .map(|k| d[k * hw + p] * d[k * hw + p])
                .sum::<f64>()
                .sqrt()
        })
        .sum()
}

struct TvProblem<'a> {
    model: &'a MeasurementModel,
    y: &'a Tensor,
    tau: f64,
    planes: usize,
    h: usize,
    w: usize,
}

impl TvProblem<'_> {
    fn objective(&self, x: &Tensor) -> Result<f64> {
        let r = self.model.forward(x)?.sub(self.y)?;
        let mut d = vec![0.0; 2 * x.numel()];
        grad_op(x.data(), self.planes, self.h, self.w, &mut d);
        let f = 0.5 * r.norm_sq() + self.tau * tv_norm(&d, self.planes, self.h * self.w);
        if !f.is_finite() {
            return Err(Error::NonFinite("tv objective".into()));
        }
        Ok(f)
    }

    /// `argmin_x ½‖x − z‖² + t·TV(x)` by projected gradient on the dual,
    /// warm-started from `p`.
    fn prox(&self, z: &[f64], t: f64, p: &mut [f64], iters: usize) -> Vec<f64> {
        let (planes, h, w) = (self.planes, self.h, self.w);
        let hw = h * w;
        let mut x = vec![0.0; z.len()];
        let mut d = vec![0.0; p.len()];
        let step = 1.0 / (8.0 * t);
        let primal = |p: &[f64], x: &mut [f64]| {
            grad_adj(p, planes, h, w, x);
            for (xi, zi) in x.iter_mut().zip(z) {
                *xi = zi - t * *xi;
            }
        };
        for _ in 0..iters {
            primal(p, &mut x);
            grad_op(&x, planes, h, w, &mut d);
            for k in 0..p.len() {
                p[k] += step * d[k];
            }
            for px in 0..hw {
                let n = (0..2 * planes)
                    .map(|k| p[k * hw + px].powi(2))
                    .sum::<f64>()
                    .sqrt();
                if n > 1.0 {
                    for k in 0..2 * planes {
                        p[k * hw + px] /= n;
                    }
                }
            }
        }
        primal(p, &mut x);
        x
    }
}

/// Approximately minimizes `½‖Hx − y‖² + τ TV(x)` with monotone FISTA and
/// a dual inner solve for the TV proximal step. The objective of the
/// returned iterate sequence never increases.
pub fn tv_reconstruct(y: &Tensor, model: &MeasurementModel, cfg: &TvConfig) -> Result<Tensor> {
    Ok(tv_reconstruct_traced(y, model, cfg)?.0)
}

/// As [`tv_reconstruct`], also returning the objective after each outer
/// iteration.
pub fn tv_reconstruct_traced(
    y: &Tensor,
    model: &MeasurementModel,
    cfg: &TvConfig,
) -> Result<(Tensor, Vec<f64>)> {
    cfg.validate()?;
    let s = y.shape();
    if s.len() != 3 || s[0] != 2 {
        return Err(Error::invalid(format!(
            "tv_reconstruct expects one [2, H, W] k-space, got {s:?}"
        )));
    }
    let prob = TvProblem {
        model,
        y,
        tau: cfg.tau,
        planes: 2,
        h: s[1],
        w: s[2],
    };
    let mut x = model.pseudoinverse(y)?;
    let mut fx = prob.objective(&x)?;
    let mut yk = x.clone();
    let mut x_prev = x.clone();
    let mut t: f64 = 1.0;
    let mut p = vec![0.0; 2 * x.numel()];
    let mut trace = vec![fx];
    for _ in 0..cfg.iterations {
        let resid = model.forward(&yk)?.sub(y)?;
        let g = model.adjoint(&resid)?;
        let zin: Vec<f64> = yk
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| a - cfg.step * b)
            .collect();
        let z = prob.prox(&zin, cfg.step * cfg.tau, &mut p, cfg.inner_iterations);
        let z = Tensor::from_vec(x.shape(), z)?.with_dtype(x.dtype());
        let fz = prob.objective(&z)?;
        let accepted = fz <= fx;
        let f_old = fx;
        x_prev.clone_from(&x);
        if accepted {
            x = z.clone();
            fx = fz;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let (a, b) = (t / t_next, (t - 1.0) / t_next);
        let yd: Vec<f64> = (0..x.numel())
            .map(|i| {
                x.data()[i] + a * (z.data()[i] - x.data()[i]) + b * (x.data()[i] - x_prev.data()[i])
            })
            .collect();
        yk = Tensor::from_vec(x.shape(), yd)?.with_dtype(x.dtype());
        t = t_next;
        assert!(fx <= f_old, "tv objective increased");
        trace.push(fx);
        if accepted && (f_old - fx) <= cfg.tolerance * fx.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok((x, trace))
}

/// Picks τ from `grid` by mean PSNR against oracle images of `pairs`
/// (both acquisitions). Returns `(best_tau, mean_psnr_per_tau)`.
pub fn select_tau(
    pairs: &[MeasurementPair],
    base: &TvConfig,
    grid: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if grid.is_empty() {
        return Err(Error::Config("empty tau grid".into()));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &tau in grid {
        let cfg = TvConfig { tau, ..*base };
        let mut vals = Vec::new();
        for p in pairs {
            for (y, m, o) in [
                (&p.y_r, &p.model_r, &p.oracle_x_r),
                (&p.y_m, &p.model_m, &p.oracle_x_m),
            ] {
                if let Some(o) = o {
                    vals.push(psnr(&tv_reconstruct(y, m, &cfg)?, o)?);
                }
            }
        }
        if vals.is_empty() {
            return Err(Error::invalid(
                "tau selection needs pairs with oracle images",
            ));
        }
        scores.push(vals.iter().sum::<f64>() / vals.len() as f64);
    }
    let best = scores
        .iter()
        .enumerate()
        .fold(0, |b, (i, s)| if *s > scores[b] { i } else { b });
    Ok((grid[best], scores))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub reg: RegConfig,
    pub loss: RegLossConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Trains the registration network alone on zero-filled image pairs.
pub fn pretrain_registration(pairs: &[MeasurementPair], cfg: &PretrainConfig) -> Result<RegNet> {
    if pairs.is_empty() {
        return Err(Error::invalid("registration pre-training set is empty"));
    }
    if cfg.iterations == 0 || cfg.batch_size == 0 {
        return Err(Error::Config(
            "pre-training iterations and batch size must be >= 1".into(),
        ));
    }
    cfg.loss.validate()?;
    let zf: Vec<(Tensor, Tensor)> = pairs
        .iter()
        .map(|p| {
            Ok((
                p.zero_filled_r()?.into_real(),
                p.zero_filled_m()?.into_real(),
            ))
        })
        .collect::<Result<_>>()?;
    let mut reg = RegNet::init(cfg.reg, cfg.seed.wrapping_mul(2).wrapping_add(2));
    let mut adam = AdamState::new(&reg.params, cfg.lr);
    for step in 0..cfg.iterations {
        let idx = batch_indices(pairs.len(), cfg.batch_size, cfg.seed ^ 0x7265_6721, step);
        let items: Vec<Tensor> = idx
            .iter()
            .map(|&i| zf[i].0.clone())
            .chain(idx.iter().map(|&i| zf[i].1.clone()))
            .collect();
        reg_step(
            &mut reg,
            &mut adam,
            &Tensor::stack(&items)?,
            idx.len(),
            &cfg.loss,
        )?;
    }
    Ok(reg)
}
