//! Image quality metrics against oracle images, evaluated on magnitudes.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// Reported for exact matches instead of infinity.
pub const PSNR_CAP_DB: f64 = 300.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Pixel magnitudes. Paired-plane complex tensors `[.., 2, H, W]` reduce to
/// `[.., H, W]`; real tensors pass through unchanged.
pub fn magnitude(t: &Tensor) -> Tensor {
    if t.dtype() != DType::Complex64Pair {
        return t.clone();
    }
    let shape = t.logical_shape();
    let r = t.rank();
    let plane = t.shape()[r - 1] * t.shape()[r - 2];
    let mut out = Vec::with_capacity(t.numel() / 2);
    for chunk in t.data().chunks(2 * plane) {
        let (re, im) = chunk.split_at(plane);
        out.extend(re.iter().zip(im).map(|(a, b)| a.hypot(*b)));
    }
    Tensor::from_vec(&shape, out).expect("magnitude shape")
}

pub fn psnr(x: &Tensor, reference: &Tensor) -> Result<f64> {
    let (a, b) = (magnitude(x), magnitude(reference));
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", a.shape(), b.shape()));
    }
    let peak = b.max_abs();
    if peak == 0.0 {
        return Err(Error::invalid("psnr: reference image is all zero"));
    }
    let mse = a.sub(&b)?.norm_sq() / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn as_plane(t: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let m = magnitude(t);
    let s = m.shape();
    match s.len() {
        2 => Ok((s[0], s[1], m.into_data())),
        3 if s[0] == 1 => Ok((s[1], s[2], m.into_data())),
        _ => Err(Error::invalid(format!(
            "ssim needs a single image, got {s:?}"
        ))),
    }
}

/// Mean SSIM with the dynamic range taken from `reference`.
pub fn ssim(x: &Tensor, reference: &Tensor) -> Result<f64> {
    let (_, _, r) = as_plane(reference)?;
    let lo = r.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    ssim_with_range(x, reference, hi - lo)
}

/// Mean SSIM over the valid region (windows fully inside the image) with
/// an externally fixed dynamic range; symmetric in its image arguments.
pub fn ssim_with_range(x: &Tensor, reference: &Tensor, data_range: f64) -> Result<f64> {
    let (h, w, a) = as_plane(x)?;
    let (hb, wb, b) = as_plane(reference)?;
    if (h, w) != (hb, wb) {
        return Err(Error::shape("ssim", &[h, w], &[hb, wb]));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim: image {h}x{w} smaller than window {SSIM_WINDOW}"
        )));
    }
    let l = if data_range > 0.0 { data_range } else { 1.0 };
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let k = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for y in 0..oh {
        for xx in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, ki) in k.iter().enumerate() {
                for (j, kj) in k.iter().enumerate() {
                    let wgt = ki * kj;
                    let p = (y + i) * w + xx + j;
                    ma += wgt * a[p];
                    mb += wgt * b[p];
                    saa += wgt * a[p] * a[p];
                    sbb += wgt * b[p] * b[p];
                    sab += wgt * a[p] * b[p];
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// One evaluated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sample_id: usize,
    pub method: String,
    pub acceleration: f64,
    pub sigma: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub method: String,
    pub acceleration: f64,
    pub sigma: f64,
    pub count: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (
        m,
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt(),
    )
}

/// Groups rows by (method, acceleration, sigma), keeping first-seen order.
pub fn summarize(rows: &[MetricRow]) -> Vec<MetricSummary> {
    let mut order: Vec<(String, u64, u64)> = Vec::new();
    let mut groups: BTreeMap<(String, u64, u64), Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        let key = (
            r.method.clone(),
            r.acceleration.to_bits(),
            r.sigma.to_bits(),
        );
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let (pm, ps) = mean_std(&g.iter().map(|r| r.psnr_db).collect::<Vec<_>>());
            let (sm, ss) = mean_std(&g.iter().map(|r| r.ssim).collect::<Vec<_>>());
            MetricSummary {
                method: key.0,
                acceleration: g[0].acceleration,
                sigma: g[0].sigma,
                count: g.len(),
                psnr_mean: pm,
                psnr_std: ps,
                ssim_mean: sm,
                ssim_std: ss,
            }
        })
        .collect()
}

pub fn write_rows<W: Write>(w: W, rows: &[MetricRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_summary<W: Write>(w: W, rows: &[MetricSummary]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let r = t(&[2], vec![0.0, 1.0]);
        assert_eq!(psnr(&r, &r).unwrap(), PSNR_CAP_DB);
        let x = t(&[2], vec![0.0, 0.9]);
        let want = 10.0 * (1.0f64 / 0.005).log10();
        assert!((psnr(&x, &r).unwrap() - want).abs() < 1e-9);
        assert!((want - 23.0103).abs() < 1e-4);
        assert!(psnr(&x, &t(&[2], vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn psnr_uses_complex_magnitude() {
        let r = Tensor::complex_from_planes(&[1, 2], &[0.0, 0.6], &[0.0, 0.8]).unwrap();
        let x = t(&[1, 2], vec![0.0, 0.9]);
        assert!((psnr(&x, &r).unwrap() - 10.0 * (1.0f64 / 0.005).log10()).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let img: Vec<f64> = (0..256)
            .map(|i| (((i / 16) / 4 + (i % 16) / 4) % 2) as f64)
            .collect();
        let x = t(&[16, 16], img.clone());
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        let inv = t(&[16, 16], img.iter().map(|v| 1.0 - v).collect());
        assert!(ssim(&inv, &x).unwrap() < 0.2);
        assert!(ssim(&t(&[8, 8], vec![0.0; 64]), &t(&[8, 8], vec![0.0; 64])).is_err());
    }

    #[test]
    fn summary_groups_in_order() {
        let row = |m: &str, p: f64| MetricRow {
            sample_id: 0,
            method: m.into(),
            acceleration: 3.0,
            sigma: 10.0,
            psnr_db: p,
            ssim: 0.5,
        };
        let s = summarize(&[row("b", 10.0), row("a", 1.0), row("b", 20.0)]);
        assert_eq!(s.len(), 2);
        assert_eq!(
            (s[0].method.as_str(), s[0].psnr_mean, s[0].psnr_std),
            ("b", 15.0, 5.0)
        );
        assert_eq!(s[1].count, 1);
    }
}
