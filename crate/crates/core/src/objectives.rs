//! Loss functions for both networks.
//!
//! Everything here builds graph nodes so the same code serves training and
//! the gradient checks. Images are batched `[N, 2, H, W]` paired-plane
//! complex tensors; displacement fields are `[N, 2, H, W]` `(dy, dx)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::mri::MeasurementModel;
use crate::tensor::Tensor;

/// Local cross-correlation variance guard.
pub const LCC_EPS: f64 = 1e-5;
/// Added under the square root when taking magnitudes so the gradient stays
/// finite at exactly zero pixels.
pub const MAGNITUDE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distance {
    L1,
    L2,
    Huber { delta: f64 },
}

impl Default for Distance {
    fn default() -> Self {
        Distance::Huber { delta: 1.0 }
    }
}

impl Distance {
    fn elementwise(self, g: &mut Graph, r: Var) -> Result<Var> {
        match self {
            Distance::L1 => g.abs(r),
            Distance::L2 => g.square(r),
            Distance::Huber { delta } => g.huber(r, delta),
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            Distance::Huber { delta } if !(delta > 0.0 && delta.is_finite()) => Err(Error::Config(
                format!("huber delta must be positive, got {delta}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn parse(s: &str, delta: f64) -> Result<Self> {
        match s {
            "l1" => Ok(Distance::L1),
            "l2" => Ok(Distance::L2),
            "huber" => Ok(Distance::Huber { delta }),
            other => Err(Error::Config(format!(
                "unknown distance '{other}' (l1, l2, huber)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Distance::L1 => "l1",
            Distance::L2 => "l2",
            Distance::Huber { .. } => "huber",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecLossConfig {
    pub gamma: f64,
    pub distance: Distance,
}

impl Default for RecLossConfig {
    fn default() -> Self {
        RecLossConfig {
            gamma: 1.0,
            distance: Distance::default(),
        }
    }
}

impl RecLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        self.distance.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegLossConfig {
    pub lambda: f64,
    pub lcc_window: usize,
}

impl Default for RegLossConfig {
    fn default() -> Self {
        RegLossConfig {
            lambda: 0.1,
            lcc_window: 9,
        }
    }
}

impl RegLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.lcc_window < 3 || self.lcc_window % 2 == 0 {
            return Err(Error::Config(format!(
                "lcc window must be odd and >= 3, got {}",
                self.lcc_window
            )));
        }
        Ok(())
    }
}

/// Mean distance over all entries.
pub fn distance(g: &mut Graph, a: Var, b: Var, kind: Distance) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape("distance", g.shape(a), g.shape(b)));
    }
    let r = g.sub(a, b)?;
    let e = kind.elementwise(g, r)?;
    g.mean(e)
}

/// Distance averaged over the `count` sampled real entries. Both operands
/// must already vanish off the mask, so the remaining terms are zero.
fn masked_distance(g: &mut Graph, pred: Var, y: Var, count: usize, kind: Distance) -> Result<Var> {
    if g.shape(pred) != g.shape(y) {
        return Err(Error::shape("distance", g.shape(pred), g.shape(y)));
    }
    if count == 0 {
        return Err(Error::invalid("no sampled entries"));
    }
    let r = g.sub(pred, y)?;
    let e = kind.elementwise(g, r)?;
    let s = g.sum(e)?;
    g.scale(s, 1.0 / count as f64)
}

/// Forward differences along rows then columns, zero on the trailing edge.
/// `[N, C, H, W]` maps to `[N, 2C, H, W]` with all `dy` channels first.
pub fn finite_diff(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return Err(Error::invalid(format!(
            "finite_diff needs [N, C, H>=2, W>=2], got {s:?}"
        )));
    }
    let (h, w) = (s[2], s[3]);
    let lo = g.narrow(x, 2, 0, h - 1)?;
    let hi = g.narrow(x, 2, 1, h - 1)?;
    let dy = g.sub(hi, lo)?;
    let dy = g.pad2d(dy, [0, 1, 0, 0])?;
    let lo = g.narrow(x, 3, 0, w - 1)?;
    let hi = g.narrow(x, 3, 1, w - 1)?;
    let dx = g.sub(hi, lo)?;
    let dx = g.pad2d(dx, [0, 0, 0, 1])?;
    g.concat(&[dy, dx], 1)
}

/// `sqrt(re² + im²)` of `[N, 2, H, W]`, giving `[N, 1, H, W]`.
pub fn magnitude(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] != 2 {
        return Err(Error::invalid(format!(
            "magnitude needs [N, 2, H, W], got {s:?}"
        )));
    }
    let re = g.narrow(x, 1, 0, 1)?;
    let im = g.narrow(x, 1, 1, 1)?;
    let re2 = g.square(re)?;
    let im2 = g.square(im)?;
    let m = g.add(re2, im2)?;
    let m = g.add_scalar(m, MAGNITUDE_EPS)?;
    g.sqrt(m)
}

/// Mean squared local normalized cross-correlation of two real images
/// `[N, 1, H, W]` over `window × window` zero-padded neighborhoods.
pub fn lcc(g: &mut Graph, a: Var, b: Var, window: usize) -> Result<Var> {
    let s = g.shape(a).to_vec();
    if s != g.shape(b) {
        return Err(Error::shape("lcc", &s, g.shape(b)));
    }
    if s.len() < 2 || window > s[s.len() - 1] || window > s[s.len() - 2] {
        return Err(Error::invalid(format!(
            "lcc window {window} larger than image {s:?}"
        )));
    }
    let n = (window * window) as f64;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let sa = g.box_filter(a, window)?;
    let sb = g.box_filter(b, window)?;
    let saa = g.box_filter(aa, window)?;
    let sbb = g.box_filter(bb, window)?;
    let sab = g.box_filter(ab, window)?;
    // cross = Σab − Σa·Σb/n, var = Σa² − (Σa)²/n
    let t = g.mul(sa, sb)?;
    let t = g.scale(t, 1.0 / n)?;
    let cross = g.sub(sab, t)?;
    let t = g.square(sa)?;
    let t = g.scale(t, 1.0 / n)?;
    let va = g.sub(saa, t)?;
    let t = g.square(sb)?;
    let t = g.scale(t, 1.0 / n)?;
    let vb = g.sub(sbb, t)?;
    let num = g.square(cross)?;
    let den = g.mul(va, vb)?;
    let den = g.add_scalar(den, LCC_EPS)?;
    let cc = g.div(num, den)?;
    g.mean(cc)
}

/// Mean of squared forward differences of both offset channels.
pub fn smoothness_loss(g: &mut Graph, v: Var) -> Result<Var> {
    let d = finite_diff(g, v)?;
    let d2 = g.square(d)?;
    g.mean(d2)
}

/// Per-batch measurement operators with their stacked masks.
pub struct BatchOperator {
    models: Vec<MeasurementModel>,
    mask: Tensor,
    sampled: usize,
}

impl BatchOperator {
    pub fn new(models: &[&MeasurementModel]) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::invalid("empty batch"))?;
        let (h, w) = (first.mask.height, first.mask.width);
        let mut data = Vec::with_capacity(models.len() * h * w);
        let mut sampled = 0;
        for m in models {
            if (m.mask.height, m.mask.width) != (h, w) {
                return Err(Error::shape(
                    "batch masks",
                    &[h, w],
                    &[m.mask.height, m.mask.width],
                ));
            }
            data.extend_from_slice(m.mask_tensor().data());
            sampled += 2 * m.mask.sampled_entries();
        }
        Ok(BatchOperator {
            models: models.iter().map(|m| (*m).clone()).collect(),
            mask: Tensor::from_vec(&[models.len(), 1, h, w], data)?,
            sampled,
        })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Number of sampled real entries (two per complex sample).
    pub fn sampled_entries(&self) -> usize {
        self.sampled
    }

    /// Applies `H` sample by sample to `[N, 2, H, W]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[0] != self.models.len() {
            return Err(Error::shape("batch forward", &s, self.mask.shape()));
        }
        if self.models.iter().all(|m| m.sensitivity.is_none()) {
            let k = g.fft2(x)?;
            return g.mul_const(k, &self.mask);
        }
        let mut outs = Vec::with_capacity(s[0]);
        for (i, m) in self.models.iter().enumerate() {
            let xi = g.narrow(x, 0, i, 1)?;
            outs.push(m.forward_var(g, xi)?);
        }
        g.concat(&outs, 0)
    }
}

/// The four warped/unwarped reconstructions that enter both losses.
#[derive(Clone, Copy, Debug)]
pub struct ImageSet {
    pub x_r: Var,
    pub x_m: Var,
    /// `T(x̂_r)`, which should resemble `x_m`.
    pub t_r: Var,
    /// `T(x̂_m)`, which should resemble `x_r`.
    pub t_m: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct RecLoss {
    pub total: Var,
    pub cross: Var,
    pub self_: Var,
}

/// `L(y_r, H_r T(x̂_m)) + L(y_m, H_m T(x̂_r)) + γ [L(y_r, H_r x̂_r) + L(y_m, H_m x̂_m)]`
/// with every distance averaged over that side's sampled entries.
pub fn rec_loss(
    g: &mut Graph,
    y_r: Var,
    y_m: Var,
    op_r: &BatchOperator,
    op_m: &BatchOperator,
    imgs: &ImageSet,
    cfg: &RecLossConfig,
) -> Result<RecLoss> {
    let d = cfg.distance;
    let (nr, nm) = (op_r.sampled_entries(), op_m.sampled_entries());
    let k = op_r.forward(g, imgs.t_m)?;
    let c1 = masked_distance(g, k, y_r, nr, d)?;
    let k = op_m.forward(g, imgs.t_r)?;
    let c2 = masked_distance(g, k, y_m, nm, d)?;
    let cross = g.add(c1, c2)?;
    let k = op_r.forward(g, imgs.x_r)?;
    let s1 = masked_distance(g, k, y_r, nr, d)?;
    let k = op_m.forward(g, imgs.x_m)?;
    let s2 = masked_distance(g, k, y_m, nm, d)?;
    let self_ = g.add(s1, s2)?;
    let ws = g.scale(self_, cfg.gamma)?;
    let total = g.add(cross, ws)?;
    Ok(RecLoss {
        total,
        cross,
        self_,
    })
}

/// `−[lcc(|T(x̂_m)|, |x̂_r|) + lcc(|T(x̂_r)|, |x̂_m|)] + λ [S(v_mr) + S(v_rm)]`.
pub fn reg_loss(
    g: &mut Graph,
    imgs: &ImageSet,
    v_mr: Var,
    v_rm: Var,
    cfg: &RegLossConfig,
) -> Result<Var> {
    let mags = |g: &mut Graph, v: Var| -> Result<Var> {
        match g.shape(v).get(1) {
            Some(2) => magnitude(g, v),
            _ => Ok(v),
        }
    };
    let tm = mags(g, imgs.t_m)?;
    let xr = mags(g, imgs.x_r)?;
    let tr = mags(g, imgs.t_r)?;
    let xm = mags(g, imgs.x_m)?;
    let l1 = lcc(g, tm, xr, cfg.lcc_window)?;
    let l2 = lcc(g, tr, xm, cfg.lcc_window)?;
    let sim = g.add(l1, l2)?;
    let sim = g.scale(sim, -1.0)?;
    if cfg.lambda == 0.0 {
        return Ok(sim);
    }
    let s1 = smoothness_loss(g, v_mr)?;
    let s2 = smoothness_loss(g, v_rm)?;
    let s = g.add(s1, s2)?;
    let s = g.scale(s, cfg.lambda)?;
    g.add(sim, s)
}
