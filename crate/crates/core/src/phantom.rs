//! Procedural brain-like phantoms.
//!
//! A head outline with a bright rim, a tissue body with low-frequency
//! texture, an inner white-matter region, two dark ventricles and a handful
//! of small piecewise-constant inclusions. Edges are anti-aliased over about
//! one pixel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
    angle: f64,
}

impl Ellipse {
    /// Soft inside indicator at normalized coordinates, `px` = pixel size.
    fn coverage(&self, y: f64, x: f64, px: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let r = ((u / self.ax).powi(2) + (v / self.ay).powi(2)).sqrt();
        // Approximate signed distance to the boundary in pixels.
        let d = (1.0 - r) * self.ax.min(self.ay) / px;
        (d + 0.5).clamp(0.0, 1.0)
    }

    fn scaled(&self, k: f64) -> Ellipse {
        Ellipse {
            ay: self.ay * k,
            ax: self.ax * k,
            ..*self
        }
    }
}

/// Real `[size, size]` image with values in `[0, 1]`.
pub fn make_phantom(seed: u64, size: usize) -> Result<Tensor> {
    if size < 32 {
        return Err(Error::invalid(format!(
            "phantom size must be >= 32, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = 2.0 / size as f64;
    let head = Ellipse {
        cy: rng.gen_range(-0.05..0.05),
        cx: rng.gen_range(-0.05..0.05),
        ay: rng.gen_range(0.78..0.9),
        ax: rng.gen_range(0.62..0.76),
        angle: rng.gen_range(-0.25..0.25),
    };
    let brain = head.scaled(rng.gen_range(0.86..0.92));
    let white = Ellipse {
        cy: head.cy + rng.gen_range(-0.05..0.05),
        cx: head.cx + rng.gen_range(-0.05..0.05),
        ..head.scaled(rng.gen_range(0.5..0.62))
    };
    let vent_off = rng.gen_range(0.08..0.16);
    let vent_ay = rng.gen_range(0.14..0.24);
    let vent_ax = rng.gen_range(0.05..0.09);
    let ventricles = [-1.0, 1.0].map(|side| Ellipse {
        cy: head.cy + rng.gen_range(-0.06..0.02),
        cx: head.cx + side * vent_off,
        ay: vent_ay,
        ax: vent_ax,
        angle: head.angle + side * rng.gen_range(0.1..0.35),
    });
    let n_inc = rng.gen_range(3..=6);
    let inclusions: Vec<(Ellipse, f64)> = (0..n_inc)
        .map(|_| {
            let r = rng.gen_range(0.0..0.55f64).sqrt() * 0.75;
            let t = rng.gen_range(0.0..std::f64::consts::TAU);
            let e = Ellipse {
                cy: head.cy + r * head.ay * t.sin(),
                cx: head.cx + r * head.ax * t.cos(),
                ay: rng.gen_range(0.03..0.1),
                ax: rng.gen_range(0.03..0.1),
                angle: rng.gen_range(0.0..std::f64::consts::PI),
            };
            (e, rng.gen_range(0.15..1.0))
        })
        .collect();
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(1.0..5.0),
                rng.gen_range(1.0..5.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.01..0.035),
            )
        })
        .collect();
    let rim = rng.gen_range(0.8..0.95);
    let tissue = rng.gen_range(0.38..0.5);
    let wm = rng.gen_range(0.58..0.7);
    let csf = rng.gen_range(0.05..0.15);

    let mut data = Vec::with_capacity(size * size);
    for i in 0..size {
        let y = -1.0 + (i as f64 + 0.5) * px;
        for j in 0..size {
            let x = -1.0 + (j as f64 + 0.5) * px;
            let mut v = rim * head.coverage(y, x, px);
            let b = brain.coverage(y, x, px);
            let texture: f64 = waves
                .iter()
                .map(|&(fy, fx, ph, amp)| {
                    amp * (std::f64::consts::PI * (fy * y + fx * x) + ph).sin()
                })
                .sum();
            let mut inner = tissue + texture;
            let w = white.coverage(y, x, px);
            inner += w * (wm - tissue);
            for vent in &ventricles {
                let c = vent.coverage(y, x, px);
                inner += c * (csf - inner);
            }
            for (e, val) in &inclusions {
                let c = e.coverage(y, x, px);
                inner += c * (val - inner);
            }
            v += b * (inner - v);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Tensor::from_vec(&[size, size], data)
}

/// Fraction of pixels above a small threshold.
pub fn foreground_fraction(img: &Tensor) -> f64 {
    let n = img.numel().max(1);
    img.data().iter().filter(|&&v| v > 0.05).count() as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let a = make_phantom(3, 64).unwrap();
        assert_eq!(a, make_phantom(3, 64).unwrap());
        assert_ne!(a, make_phantom(4, 64).unwrap());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn foreground_fraction_in_range() {
        let mean: f64 = (0..100)
            .map(|s| foreground_fraction(&make_phantom(s, 64).unwrap()))
            .sum::<f64>()
            / 100.0;
        assert!((0.3..=0.7).contains(&mean), "{mean}");
    }

    #[test]
    fn rejects_small() {
        assert!(make_phantom(0, 16).is_err());
    }
}
