//! Displacement fields: synthesis of smooth random deformations and the
//! bilinear warping operator `x ∘ φ` with `φ = I + v`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel `(dy, dx)` offsets in pixel units, stored as `[2, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    v: Tensor,
}

impl DisplacementField {
    pub fn zeros(height: usize, width: usize) -> Self {
        DisplacementField {
            v: Tensor::zeros(&[2, height, width]),
        }
    }

    pub fn from_tensor(v: Tensor) -> Result<Self> {
        if v.rank() != 3 || v.shape()[0] != 2 {
            return Err(Error::invalid(format!(
                "displacement field must be [2, H, W], got {:?}",
                v.shape()
            )));
        }
        if !v.all_finite() {
            return Err(Error::NonFinite("displacement field".into()));
        }
        Ok(DisplacementField { v: v.into_real() })
    }

    /// Constant offset everywhere.
    pub fn constant(height: usize, width: usize, dy: f64, dx: f64) -> Self {
        let mut v = Tensor::zeros(&[2, height, width]);
        let plane = height * width;
        v.data_mut()[..plane].fill(dy);
        v.data_mut()[plane..].fill(dx);
        DisplacementField { v }
    }

    pub fn height(&self) -> usize {
        self.v.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.v.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.v
    }

    pub fn into_tensor(self) -> Tensor {
        self.v
    }

    pub fn dy(&self) -> &[f64] {
        &self.v.data()[..self.height() * self.width()]
    }

    pub fn dx(&self) -> &[f64] {
        &self.v.data()[self.height() * self.width()..]
    }

    pub fn max_norm(&self) -> f64 {
        self.dy()
            .iter()
            .zip(self.dx())
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max)
    }

    pub fn mean_norm(&self) -> f64 {
        let n = (self.height() * self.width()) as f64;
        self.dy()
            .iter()
            .zip(self.dx())
            .map(|(a, b)| a.hypot(*b))
            .sum::<f64>()
            / n
    }

    /// Approximate inverse `u` with `warp(warp(x, v), u) ≈ x`, from the
    /// fixed point `u(p) = -v(p + u(p))`.
    pub fn inverse(&self, iterations: usize) -> Result<DisplacementField> {
        let (h, w) = (self.height(), self.width());
        let v = self.v.clone().reshape(&[1, 2, h, w])?;
        let neg_v = v.scale(-1.0);
        let mut u = neg_v.clone();
        for _ in 0..iterations {
            u = kernels::warp(&neg_v, &u)?;
        }
        DisplacementField::from_tensor(u.reshape(&[2, h, w])?)
    }
}

/// Parameters of the random-impulse field generator, expressed on a
/// reference grid (`reference_grid` pixels wide) and rescaled to the target
/// grid by [`synthesize_field`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFieldConfig {
    /// Number of impulse sites on the reference grid.
    pub n_points: usize,
    /// Range of impulse values, reference-grid pixels.
    pub value_range: (f64, f64),
    /// Gaussian smoothing std, reference-grid pixels.
    pub sigma: f64,
    pub reference_grid: f64,
    /// Smoothing std at which the RMS displacement equals a third of the
    /// half-range of `value_range`. Fixes the amplitude gain; fields with
    /// larger `sigma` come out proportionally weaker.
    pub reference_sigma: f64,
}

impl SyntheticFieldConfig {
    pub fn new(n_points: usize, value_range: (f64, f64), sigma: f64) -> Self {
        SyntheticFieldConfig {
            n_points,
            value_range,
            sigma,
            reference_grid: 256.0,
            reference_sigma: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 {
            return Err(Error::invalid("n_points must be >= 1"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::invalid(format!("sigma {} must be > 0", self.sigma)));
        }
        let (lo, hi) = self.value_range;
        if lo > hi {
            return Err(Error::invalid(format!("value range [{lo}, {hi}] is empty")));
        }
        if !(self.reference_grid > 0.0) || !(self.reference_sigma > 0.0) {
            return Err(Error::invalid("reference grid and sigma must be > 0"));
        }
        Ok(())
    }
}

impl Default for SyntheticFieldConfig {
    fn default() -> Self {
        Self::new(2000, (-10.0, 10.0), 10.0)
    }
}

/// Normalized 1-D Gaussian of std `sigma`, radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian smoothing of one `[H, W]` plane with clamp-to-edge
/// boundary handling.
pub fn gaussian_smooth(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| {
                    let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    kv * plane[y * w + xx]
                })
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| {
                    let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    kv * tmp[yy * w + x]
                })
                .sum();
        }
    }
    out
}

/// Sparse impulses smoothed by a normalized Gaussian, before any amplitude
/// gain. Impulses are drawn on a canvas extended by the kernel radius on
/// every side and the result is cropped, so the field statistics do not
/// depend on distance to the border. Returns the field and the impulse
/// density (sites per pixel).
pub fn smoothed_impulses(
    cfg: &SyntheticFieldConfig,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<(DisplacementField, f64)> {
    cfg.validate()?;
    let scale = grid_scale(cfg, height, width);
    let sigma = cfg.sigma * scale;
    let pad = (3.0 * sigma).ceil().max(1.0) as usize;
    let (ch, cw) = (height + 2 * pad, width + 2 * pad);
    let n = ch * cw;
    let density = cfg.n_points as f64 / (cfg.reference_grid * cfg.reference_grid);
    let sites = ((density * n as f64).round() as usize).max(1);
    if sites > n {
        return Err(Error::invalid(format!(
            "{sites} impulse sites do not fit a {ch}x{cw} canvas"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = sample(&mut rng, n, sites).into_vec();
    let (lo, hi) = cfg.value_range;
    let mut v = vec![0.0; 2 * n];
    for &s in &chosen {
        for c in 0..2 {
            v[c * n + s] = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        }
    }
    let mut out = Vec::with_capacity(2 * height * width);
    for c in 0..2 {
        let smooth = gaussian_smooth(&v[c * n..(c + 1) * n], ch, cw, sigma);
        for y in 0..height {
            let row = (y + pad) * cw + pad;
            out.extend_from_slice(&smooth[row..row + width]);
        }
    }
    let field = DisplacementField::from_tensor(Tensor::from_vec(&[2, height, width], out)?)?;
    Ok((field, sites as f64 / n as f64))
}

fn grid_scale(cfg: &SyntheticFieldConfig, height: usize, width: usize) -> f64 {
    0.5 * (height + width) as f64 / cfg.reference_grid
}

/// Smooth random displacement field: impulses at random sites, Gaussian
/// smoothing, a fixed amplitude gain, then a rescale from reference-grid
/// pixels to target-grid pixels.
pub fn synthesize_field(
    cfg: &SyntheticFieldConfig,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<DisplacementField> {
    let (field, density) = smoothed_impulses(cfg, height, width, seed)?;
    let scale = grid_scale(cfg, height, width);
    // RMS of normalized-Gaussian-smoothed white impulses with zero-mean
    // values of variance q: sqrt(density * q / (4 pi sigma^2)). The gain maps
    // that RMS at `reference_sigma` to half_range / 3 for symmetric ranges.
    let sigma_ref = cfg.reference_sigma * scale;
    let gain = (4.0 * std::f64::consts::PI * sigma_ref * sigma_ref / density).sqrt() / 3f64.sqrt();
    DisplacementField::from_tensor(field.into_tensor().scale(gain * scale))
}

/// `out(p) = image(p + v(p))` per plane of a `[C, H, W]` image.
pub fn warp(image: &Tensor, field: &DisplacementField) -> Result<Tensor> {
    if image.rank() != 3 || image.shape()[1] != field.height() || image.shape()[2] != field.width()
    {
        return Err(Error::shape("warp", image.shape(), field.tensor().shape()));
    }
    let s = image.shape().to_vec();
    let dtype = image.dtype();
    let img = image.clone().reshape(&[1, s[0], s[1], s[2]])?;
    let f = field.tensor().clone().reshape(&[1, 2, s[1], s[2]])?;
    Ok(kernels::warp(&img, &f)?.reshape(&s)?.with_dtype(dtype))
}

/// Mean Euclidean norm of the per-pixel offset difference.
pub fn endpoint_error(estimated: &DisplacementField, oracle: &DisplacementField) -> Result<f64> {
    if estimated.tensor().shape() != oracle.tensor().shape() {
        return Err(Error::shape(
            "endpoint_error",
            estimated.tensor().shape(),
            oracle.tensor().shape(),
        ));
    }
    let n = (estimated.height() * estimated.width()) as f64;
    let s: f64 = estimated
        .dy()
        .iter()
        .zip(oracle.dy())
        .zip(estimated.dx().iter().zip(oracle.dx()))
        .map(|((a, b), (c, d))| (a - b).hypot(c - d))
        .sum();
    Ok(s / n)
}
