//! Single-coil Cartesian measurement operator.
//!
//! Images are paired-plane complex tensors `[.., 2, H, W]`. k-space uses the
//! unshifted DFT ordering, so the low-frequency "center" lines of k-space are
//! the rows with the smallest wrapped frequency: `0, 1, H-1, H-2, ...`.
//!
//! `forward  = P · F · S`, `adjoint = Sᴴ · Fᴴ · P`, with `F` the orthonormal
//! 2-D DFT and `P` a row mask. With a unit-modulus sensitivity the
//! pseudoinverse coincides with the adjoint (zero-filled reconstruction).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, Var};
use crate::deformation::DisplacementField;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingMask {
    pub height: usize,
    pub width: usize,
    /// Sorted ky row indices in unshifted DFT order.
    pub kept_lines: Vec<usize>,
    pub acceleration: f64,
    pub center_lines: usize,
    pub seed: u64,
}

/// Row indices of the `n` lowest-frequency lines: frequencies `-n/2 .. n/2`.
pub fn center_line_indices(height: usize, n: usize) -> Vec<usize> {
    let half = (n / 2) as isize;
    let mut v: Vec<usize> = (-half..n as isize - half)
        .map(|f| f.rem_euclid(height as isize) as usize)
        .collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Cartesian mask: all kx, a random subset of ky rows plus a fixed band of
/// center rows. The number of kept rows is `round(height / acceleration)`.
pub fn make_cartesian_mask(
    height: usize,
    width: usize,
    acceleration: f64,
    center_lines: usize,
    seed: u64,
) -> Result<SamplingMask> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("mask dimensions must be nonzero"));
    }
    if !(acceleration >= 1.0) || !acceleration.is_finite() {
        return Err(Error::invalid(format!(
            "acceleration {acceleration} must be >= 1"
        )));
    }
    let target = ((height as f64 / acceleration).round() as usize).clamp(1, height);
    if acceleration > 1.0 && center_lines as f64 >= height as f64 / acceleration {
        return Err(Error::invalid(format!(
            "{center_lines} center lines do not fit in {target} kept lines"
        )));
    }
    let mut kept = center_line_indices(height, center_lines.min(height));
    let rest: Vec<usize> = (0..height).filter(|r| !kept.contains(r)).collect();
    let extra = target.saturating_sub(kept.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in sample(&mut rng, rest.len(), extra.min(rest.len())) {
        kept.push(rest[i]);
    }
    kept.sort_unstable();
    Ok(SamplingMask {
        height,
        width,
        kept_lines: kept,
        acceleration,
        center_lines,
        seed,
    })
}

impl SamplingMask {
    pub fn full(height: usize, width: usize) -> Self {
        SamplingMask {
            height,
            width,
            kept_lines: (0..height).collect(),
            acceleration: 1.0,
            center_lines: height,
            seed: 0,
        }
    }

    pub fn sampling_fraction(&self) -> f64 {
        self.kept_lines.len() as f64 / self.height as f64
    }

    /// `[H, W]` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.height, self.width]);
        let w = self.width;
        for &r in &self.kept_lines {
            t.data_mut()[r * w..(r + 1) * w].fill(1.0);
        }
        t
    }

    pub fn from_tensor(
        t: &Tensor,
        acceleration: f64,
        center_lines: usize,
        seed: u64,
    ) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::invalid(format!(
                "mask tensor must be [H, W], got {:?}",
                t.shape()
            )));
        }
        let (h, w) = (t.shape()[0], t.shape()[1]);
        let mut kept = Vec::new();
        for r in 0..h {
            let row = &t.data()[r * w..(r + 1) * w];
            match (row.iter().all(|&v| v == 1.0), row.iter().all(|&v| v == 0.0)) {
                (true, _) => kept.push(r),
                (_, true) => {}
                _ => return Err(Error::Format(format!("mask row {r} is not all-0 or all-1"))),
            }
        }
        Ok(SamplingMask {
            height: h,
            width: w,
            kept_lines: kept,
            acceleration,
            center_lines,
            seed,
        })
    }

    /// Number of sampled complex k-space entries.
    pub fn sampled_entries(&self) -> usize {
        self.kept_lines.len() * self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementModel {
    pub mask: SamplingMask,
    /// Complex `[2, H, W]` coil sensitivity; `None` is the unit map.
    pub sensitivity: Option<Tensor>,
    mask_tensor: Tensor,
}

impl MeasurementModel {
    pub fn new(mask: SamplingMask) -> Self {
        let mask_tensor = mask.to_tensor();
        MeasurementModel {
            mask,
            sensitivity: None,
            mask_tensor,
        }
    }

    pub fn with_sensitivity(mask: SamplingMask, sensitivity: Tensor) -> Result<Self> {
        if sensitivity.shape() != [2, mask.height, mask.width] {
            return Err(Error::shape(
                "sensitivity",
                sensitivity.shape(),
                &[2, mask.height, mask.width],
            ));
        }
        let mut m = Self::new(mask);
        m.sensitivity = Some(sensitivity);
        Ok(m)
    }

    pub fn mask_tensor(&self) -> &Tensor {
        &self.mask_tensor
    }

    fn check(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        let r = shape.len();
        if r < 3
            || shape[r - 3] != 2
            || shape[r - 2] != self.mask.height
            || shape[r - 1] != self.mask.width
        {
            return Err(Error::shape(
                op,
                shape,
                &[2, self.mask.height, self.mask.width],
            ));
        }
        Ok(())
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        self.check("forward", image.shape())?;
        let x = match &self.sensitivity {
            Some(s) => complex_mul(image, s, false)?,
            None => image.clone(),
        };
        let k = kernels::fft2(&x, false)?;
        mask_mul(&k, &self.mask_tensor)
    }

    pub fn adjoint(&self, kspace: &Tensor) -> Result<Tensor> {
        self.check("adjoint", kspace.shape())?;
        let k = mask_mul(kspace, &self.mask_tensor)?;
        let x = kernels::fft2(&k, true)?;
        match &self.sensitivity {
            Some(s) => complex_mul(&x, s, true),
            None => Ok(x),
        }
    }

    /// Zero-filled reconstruction `H† y`. Equal to the adjoint for the
    /// unit-modulus sensitivities used here.
    pub fn pseudoinverse(&self, kspace: &Tensor) -> Result<Tensor> {
        self.adjoint(kspace)
    }

    /// Differentiable forward operator on a graph variable.
    pub fn forward_var(&self, g: &mut Graph, image: Var) -> Result<Var> {
        self.check("forward", g.shape(image))?;
        let x = match &self.sensitivity {
            Some(s) => complex_mul_var(g, image, s, false)?,
            None => image,
        };
        let k = g.fft2(x)?;
        g.mul_const(k, &self.mask_tensor)
    }

    pub fn adjoint_var(&self, g: &mut Graph, kspace: Var) -> Result<Var> {
        self.check("adjoint", g.shape(kspace))?;
        let k = g.mul_const(kspace, &self.mask_tensor)?;
        let x = g.ifft2(k)?;
        match &self.sensitivity {
            Some(s) => complex_mul_var(g, x, s, true),
            None => Ok(x),
        }
    }
}

fn mask_mul(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let dt = x.dtype();
    Ok(kernels::broadcast_binary("mask-mul", x, mask, |a, b| a * b)?.with_dtype(dt))
}

/// Pointwise complex product with a `[2, H, W]` map, optionally conjugated.
fn complex_mul(x: &Tensor, s: &Tensor, conj: bool) -> Result<Tensor> {
    let r = x.rank();
    let plane = x.shape()[r - 1] * x.shape()[r - 2];
    let (sr, si) = s.data().split_at(plane);
    let sign = if conj { -1.0 } else { 1.0 };
    let mut out = x.clone();
    for chunk in out.data_mut().chunks_mut(2 * plane) {
        let (re, im) = chunk.split_at_mut(plane);
        for i in 0..plane {
            let (a, b) = (re[i], im[i]);
            let (c, d) = (sr[i], sign * si[i]);
            re[i] = a * c - b * d;
            im[i] = a * d + b * c;
        }
    }
    Ok(out)
}

fn complex_mul_var(g: &mut Graph, x: Var, s: &Tensor, conj: bool) -> Result<Var> {
    let axis = g.shape(x).len() - 3;
    let plane = s.numel() / 2;
    let hw = &s.shape()[1..];
    let c = Tensor::from_vec(hw, s.data()[..plane].to_vec())?;
    let sign = if conj { -1.0 } else { 1.0 };
    let d = Tensor::from_vec(hw, s.data()[plane..].iter().map(|v| sign * v).collect())?;
    let a = g.narrow(x, axis, 0, 1)?;
    let b = g.narrow(x, axis, 1, 1)?;
    let ac = g.mul_const(a, &c)?;
    let bd = g.mul_const(b, &d)?;
    let ad = g.mul_const(a, &d)?;
    let bc = g.mul_const(b, &c)?;
    let re = g.sub(ac, bd)?;
    let im = g.add(ad, bc)?;
    g.concat(&[re, im], axis)
}

/// Adds circular complex white Gaussian noise on the sampled entries only,
/// scaled so that `10 log10(‖y‖² / E‖n‖²) = snr_db`.
pub fn add_noise(kspace: &Tensor, mask: &SamplingMask, snr_db: f64, seed: u64) -> Result<Tensor> {
    if !snr_db.is_finite() {
        return Err(Error::invalid("snr_db must be finite"));
    }
    let signal = kspace.norm_sq();
    if signal == 0.0 {
        return Err(Error::invalid("SNR undefined for all-zero k-space"));
    }
    let r = kspace.rank();
    if r < 3
        || kspace.shape()[r - 3] != 2
        || kspace.shape()[r - 2] != mask.height
        || kspace.shape()[r - 1] != mask.width
    {
        return Err(Error::shape(
            "add_noise",
            kspace.shape(),
            &[2, mask.height, mask.width],
        ));
    }
    let outer = kspace.numel() / (2 * mask.height * mask.width);
    let entries = (outer * mask.sampled_entries()) as f64;
    let noise_var = signal / (entries * 10f64.powf(snr_db / 10.0));
    let per_part = (noise_var / 2.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = kspace.clone();
    let (h, w) = (mask.height, mask.width);
    for chunk in out.data_mut().chunks_mut(2 * h * w) {
        for plane in 0..2 {
            for &row in &mask.kept_lines {
                let base = plane * h * w + row * w;
                for v in &mut chunk[base..base + w] {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += per_part * z;
                }
            }
        }
    }
    Ok(out)
}

/// `10 log10(‖signal‖² / ‖noisy − signal‖²)` over the sampled entries.
pub fn measured_snr_db(signal: &Tensor, noisy: &Tensor) -> Result<f64> {
    let noise = noisy.sub(signal)?.norm_sq();
    Ok(10.0 * (signal.norm_sq() / noise).log10())
}

/// A pair of unregistered acquisitions of one object.
#[derive(Clone, Debug)]
pub struct MeasurementPair {
    pub y_r: Tensor,
    pub y_m: Tensor,
    pub model_r: MeasurementModel,
    pub model_m: MeasurementModel,
    pub oracle_x_r: Option<Tensor>,
    pub oracle_x_m: Option<Tensor>,
    /// `φ^{r→m}`: `x_m = warp(x_r, field)`.
    pub oracle_field: Option<DisplacementField>,
}

impl MeasurementPair {
    pub fn zero_filled_r(&self) -> Result<Tensor> {
        self.model_r.pseudoinverse(&self.y_r)
    }

    pub fn zero_filled_m(&self) -> Result<Tensor> {
        self.model_m.pseudoinverse(&self.y_m)
    }

    /// Checks that both measurements vanish outside their masks.
    pub fn validate(&self) -> Result<()> {
        for (y, m) in [(&self.y_r, &self.model_r), (&self.y_m, &self.model_m)] {
            m.check("pair", y.shape())?;
            let mt = m.mask_tensor();
            let plane = mt.numel();
            for chunk in y.data().chunks(plane) {
                if chunk
                    .iter()
                    .zip(mt.data())
                    .any(|(&v, &k)| k == 0.0 && v != 0.0)
                {
                    return Err(Error::invalid("measurement has energy outside its mask"));
                }
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.model_r.mask.height
    }

    pub fn width(&self) -> usize {
        self.model_r.mask.width
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_complex(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn mask_rate_at_three_x() {
        let m = make_cartesian_mask(64, 64, 3.0, 4, 7).unwrap();
        assert_eq!(m.kept_lines.len(), 21);
        assert!((m.sampling_fraction() - 1.0 / 3.0).abs() <= 1.0 / 64.0);
        for c in center_line_indices(64, 4) {
            assert!(m.kept_lines.contains(&c));
        }
        assert_eq!(center_line_indices(64, 4), vec![0, 1, 62, 63]);
    }

    #[test]
    fn mask_full_and_deterministic() {
        let m = make_cartesian_mask(64, 64, 1.0, 4, 3).unwrap();
        assert_eq!(m.kept_lines, (0..64).collect::<Vec<_>>());
        let a = make_cartesian_mask(64, 64, 4.0, 4, 11).unwrap();
        let b = make_cartesian_mask(64, 64, 4.0, 4, 11).unwrap();
        let c = make_cartesian_mask(64, 64, 4.0, 4, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.kept_lines, c.kept_lines);
    }

    #[test]
    fn mask_errors() {
        assert!(make_cartesian_mask(64, 64, 0.5, 4, 0).is_err());
        assert!(make_cartesian_mask(0, 64, 2.0, 4, 0).is_err());
        assert!(make_cartesian_mask(16, 16, 4.0, 4, 0).is_err());
    }

    #[test]
    fn mask_tensor_roundtrip() {
        let m = make_cartesian_mask(16, 8, 2.0, 2, 5).unwrap();
        let back = SamplingMask::from_tensor(&m.to_tensor(), 2.0, 2, 5).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn fully_sampled_roundtrip() {
        let model = MeasurementModel::new(SamplingMask::full(8, 8));
        let x = random_complex(&[2, 8, 8], 1);
        let back = model.adjoint(&model.forward(&x).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        let z = model.forward(&Tensor::zeros(&[2, 8, 8])).unwrap();
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let model = MeasurementModel::new(SamplingMask::full(8, 8));
        assert!(model.forward(&Tensor::zeros(&[2, 8, 6])).is_err());
        assert!(model.adjoint(&Tensor::zeros(&[8, 8])).is_err());
    }

    #[test]
    fn adjoint_identity_with_sensitivity() {
        let mask = make_cartesian_mask(8, 8, 2.0, 2, 9).unwrap();
        let s = random_complex(&[2, 8, 8], 4);
        let model = MeasurementModel::with_sensitivity(mask, s).unwrap();
        let x = random_complex(&[2, 8, 8], 5);
        let y = model.forward(&random_complex(&[2, 8, 8], 6)).unwrap();
        let lhs = model.forward(&x).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&model.adjoint(&y).unwrap()).unwrap();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1e-12));
    }

    #[test]
    fn graph_forward_matches_plain() {
        let mask = make_cartesian_mask(8, 8, 2.0, 2, 9).unwrap();
        let model =
            MeasurementModel::with_sensitivity(mask, random_complex(&[2, 8, 8], 2)).unwrap();
        let x = random_complex(&[3, 2, 8, 8], 3);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let k = model.forward_var(&mut g, xv).unwrap();
        let back = model.adjoint_var(&mut g, k).unwrap();
        let plain_k = model.forward(&x).unwrap();
        for (a, b) in g.value(k).data().iter().zip(plain_k.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let plain_back = model.adjoint(&plain_k).unwrap();
        for (a, b) in g.value(back).data().iter().zip(plain_back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_errors_and_huge_snr() {
        let mask = make_cartesian_mask(16, 16, 2.0, 2, 1).unwrap();
        let model = MeasurementModel::new(mask.clone());
        assert!(add_noise(&Tensor::zeros(&[2, 16, 16]), &mask, 40.0, 0).is_err());
        let y = model.forward(&random_complex(&[2, 16, 16], 8)).unwrap();
        assert!(add_noise(&y, &mask, f64::INFINITY, 0).is_err());
        let n = add_noise(&y, &mask, 300.0, 0).unwrap();
        let rel = (n.sub(&y).unwrap().norm_sq() / y.norm_sq()).sqrt();
        assert!(rel < 1e-10);
        // unsampled entries stay exactly zero
        assert!(MeasurementPair {
            y_r: n.clone(),
            y_m: n,
            model_r: model.clone(),
            model_m: model,
            oracle_x_r: None,
            oracle_x_m: None,
            oracle_field: None,
        }
        .validate()
        .is_ok());
    }
}
