//! The two trainable networks.
//!
//! * [`ReconNet`]: residual CNN mapping a zero-filled complex image
//!   (2 channels) to a cleaned image of the same shape. The output is the
//!   input plus a learned correction.
//! * [`RegNet`]: U-Net taking `(moving, reference)` (2 + 2 channels) and
//!   returning the `(dy, dx)` displacement that warps `moving` onto
//!   `reference`. Its last convolution starts at zero, so an untrained
//!   network returns the identity transform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.1;

/// Ordered named parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Places every tensor on the graph, as parameters or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect()
    }

    pub fn zeroed(&self) -> ParamSet {
        ParamSet {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    /// Replaces tensors by name; shapes must match.
    pub fn assign(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::invalid("parameter name lists differ"));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::shape("assign", dst.shape(), src.shape()));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

fn he_conv(rng: &mut ChaCha8Rng, cout: usize, cin: usize, k: usize) -> Tensor {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = cout * cin * k * k;
    Tensor::from_vec(
        &[cout, cin, k, k],
        (0..n).map(|_| normal.sample(rng)).collect(),
    )
    .expect("shape matches")
}

fn conv_layer(
    ps: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    zero: bool,
) {
    let w = if zero {
        Tensor::zeros(&[cout, cin, 3, 3])
    } else {
        he_conv(rng, cout, cin, 3)
    };
    ps.push(format!("{name}.weight"), w);
    ps.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

// ------------------------------------------------------------------ recon

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub blocks: usize,
    pub width: usize,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            blocks: 4,
            width: 32,
        }
    }
}

impl ReconConfig {
    /// `18·B·W² + (37 + 2B)·W + 2`.
    pub fn param_count(&self) -> usize {
        let (b, w) = (self.blocks, self.width);
        18 * b * w * w + (37 + 2 * b) * w + 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconNet {
    pub config: ReconConfig,
    pub params: ParamSet,
}

impl ReconNet {
    pub fn init(config: ReconConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::default();
        let w = config.width;
        conv_layer(&mut ps, &mut rng, "head", 2, w, false);
        for b in 0..config.blocks {
            conv_layer(&mut ps, &mut rng, &format!("block{b}.conv1"), w, w, false);
            conv_layer(&mut ps, &mut rng, &format!("block{b}.conv2"), w, w, false);
        }
        // Zero tail: the untrained network is the identity on its input.
        conv_layer(&mut ps, &mut rng, "tail", w, 2, true);
        ReconNet { config, params: ps }
    }

    /// `input`: `[N, 2, H, W]`. `params` must come from [`ParamSet::bind`].
    pub fn forward(&self, g: &mut Graph, params: &[Var], input: Var) -> Result<Var> {
        let s = g.shape(input);
        if s.len() != 4 || s[1] != 2 {
            return Err(Error::invalid(format!(
                "reconstruction input must be [N, 2, H, W], got {s:?}"
            )));
        }
        if params.len() != self.params.len() {
            return Err(Error::invalid("parameter binding does not match network"));
        }
        let mut p = params.chunks(2);
        let mut conv = |g: &mut Graph, x: Var| -> Result<Var> {
            let wb = p.next().expect("layer count checked above");
            g.conv2d(x, wb[0], Some(wb[1]), 1, 1)
        };
        let mut h = conv(g, input)?;
        for _ in 0..self.config.blocks {
            let r = conv(g, h)?;
            let r = g.leaky_relu(r, LEAKY_SLOPE)?;
            let r = conv(g, r)?;
            h = g.add(h, r)?;
        }
        let out = conv(g, h)?;
        g.add(input, out)
    }

    /// Inference on plain tensors, no gradients.
    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let (x, squeeze) = batched(&mut g, input)?;
        let y = self.forward(&mut g, &p, x)?;
        unbatch(g.value(y).clone(), squeeze)
    }
}

fn batched(g: &mut Graph, t: &Tensor) -> Result<(Var, bool)> {
    match t.rank() {
        3 => {
            let s = t.shape();
            Ok((g.constant(t.clone().reshape(&[1, s[0], s[1], s[2]])?), true))
        }
        4 => Ok((g.constant(t.clone()), false)),
        _ => Err(Error::invalid(format!(
            "expected [C, H, W] or [N, C, H, W], got {:?}",
            t.shape()
        ))),
    }
}

fn unbatch(t: Tensor, squeeze: bool) -> Result<Tensor> {
    if squeeze {
        let s = t.shape()[1..].to_vec();
        t.reshape(&s)
    } else {
        Ok(t)
    }
}

// ------------------------------------------------------------------ registration

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegConfig {
    pub levels: usize,
    pub base_width: usize,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            levels: 3,
            base_width: 16,
        }
    }
}

impl RegConfig {
    fn ch(&self, l: usize) -> usize {
        self.base_width << l
    }

    /// Sum over layers of `9·cin·cout + cout`:
    /// input conv `4 → c0`; encoder `c(l-1) → c(l)` for `l = 1..=L`;
    /// decoder `c(l) + c(l-1) → c(l-1)` for `l = L..=1`; head `c0 → 2`,
    /// with `c(l) = W_g · 2^l`.
    pub fn param_count(&self) -> usize {
        let layer = |cin: usize, cout: usize| 9 * cin * cout + cout;
        let mut n = layer(4, self.ch(0));
        for l in 1..=self.levels {
            n += layer(self.ch(l - 1), self.ch(l));
            n += layer(self.ch(l) + self.ch(l - 1), self.ch(l - 1));
        }
        n + layer(self.ch(0), 2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegNet {
    pub config: RegConfig,
    pub params: ParamSet,
}

impl RegNet {
    pub fn init(config: RegConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::default();
        conv_layer(&mut ps, &mut rng, "enc0", 4, config.ch(0), false);
        for l in 1..=config.levels {
            conv_layer(
                &mut ps,
                &mut rng,
                &format!("enc{l}"),
                config.ch(l - 1),
                config.ch(l),
                false,
            );
        }
        for l in (1..=config.levels).rev() {
            let cin = config.ch(l) + config.ch(l - 1);
            conv_layer(
                &mut ps,
                &mut rng,
                &format!("dec{l}"),
                cin,
                config.ch(l - 1),
                false,
            );
        }
        conv_layer(&mut ps, &mut rng, "flow", config.ch(0), 2, true);
        RegNet { config, params: ps }
    }

    /// `[N, 2, H, W]` displacement taking `moving` onto `reference`
    /// (both `[N, 2, H, W]`). Argument order matters.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &[Var],
        moving: Var,
        reference: Var,
    ) -> Result<Var> {
        let (ms, rs) = (g.shape(moving).to_vec(), g.shape(reference).to_vec());
        if ms != rs || ms.len() != 4 || ms[1] != 2 {
            return Err(Error::shape("reg_forward", &ms, &rs));
        }
        let div = 1usize << self.config.levels;
        if ms[2] % div != 0 || ms[3] % div != 0 {
            return Err(Error::invalid(format!(
                "registration input {}x{} must be divisible by 2^{} = {div}",
                ms[2], ms[3], self.config.levels
            )));
        }
        if params.len() != self.params.len() {
            return Err(Error::invalid("parameter binding does not match network"));
        }
        let layer = |i: usize| (params[2 * i], params[2 * i + 1]);
        let x = g.concat(&[moving, reference], 1)?;
        let (w, b) = layer(0);
        let mut skips = Vec::with_capacity(self.config.levels + 1);
        let c = g.conv2d(x, w, Some(b), 1, 1)?;
        skips.push(g.leaky_relu(c, LEAKY_SLOPE)?);
        for l in 1..=self.config.levels {
            let (w, b) = layer(l);
            let c = g.conv2d(skips[l - 1], w, Some(b), 2, 1)?;
            skips.push(g.leaky_relu(c, LEAKY_SLOPE)?);
        }
        let mut d = skips[self.config.levels];
        for (i, l) in (1..=self.config.levels).rev().enumerate() {
            let up = g.upsample_nearest(d, 2)?;
            let cat = g.concat(&[up, skips[l - 1]], 1)?;
            let (w, b) = layer(self.config.levels + 1 + i);
            let c = g.conv2d(cat, w, Some(b), 1, 1)?;
            d = g.leaky_relu(c, LEAKY_SLOPE)?;
        }
        let (w, b) = layer(2 * self.config.levels + 1);
        g.conv2d(d, w, Some(b), 1, 1)
    }

    pub fn apply(&self, moving: &Tensor, reference: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let (m, squeeze) = batched(&mut g, moving)?;
        let (r, _) = batched(&mut g, reference)?;
        let y = self.forward(&mut g, &p, m, r)?;
        unbatch(g.value(y).clone(), squeeze)
    }
}
