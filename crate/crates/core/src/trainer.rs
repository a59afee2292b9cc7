//! Alternating training of the reconstruction and registration networks.
//!
//! Each iteration takes one mini-batch of pairs and performs
//!
//! 1. a θ update on the reconstruction loss, with the registration fields
//!    held constant;
//! 2. (joint mode only) a ϕ update on the registration loss, using
//!    reconstructions recomputed under the new θ and held constant.
//!
//! The other modes differ only in where the warp fields come from.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::models::{ParamSet, ReconConfig, ReconNet, RegConfig, RegNet};
use crate::mri::MeasurementPair;
use crate::objectives::{
    rec_loss, reg_loss, BatchOperator, ImageSet, RecLossConfig, RegLossConfig,
};
use crate::tensor::{read_dclt, write_dclt, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let z = params.zeroed();
        AdamState {
            step: 0,
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            m: z.tensors().to_vec(),
            v: z.tensors().to_vec(),
        }
    }
}

/// One bias-corrected Adam step. A non-finite gradient aborts with the
/// offending parameter's name and leaves everything untouched.
pub fn adam_update(state: &mut AdamState, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid(format!(
            "adam: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter '{name}'")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *w -= state.lr * mh / (vh.sqrt() + state.eps);
        }
    }
    if let Some((name, _)) = params.iter().find(|(_, p)| !p.all_finite()) {
        return Err(Error::NonFinite(format!("parameter '{name}' after update")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Joint reconstruction and registration.
    Decolearn,
    /// Identity warp; registration never runs.
    A2aUnregistered,
    /// Warp by the synthesis-time field and its numerical inverse.
    A2aOracle,
    /// Warp by fields from a frozen, separately trained registration net.
    A2aPretrainedReg,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::Decolearn,
        TrainMode::A2aUnregistered,
        TrainMode::A2aOracle,
        TrainMode::A2aPretrainedReg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Decolearn => "decolearn",
            TrainMode::A2aUnregistered => "a2a_unregistered",
            TrainMode::A2aOracle => "a2a_oracle",
            TrainMode::A2aPretrainedReg => "a2a_pretrained_reg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown training mode '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_rec: f64,
    pub lr_reg: f64,
    pub rec_loss: RecLossConfig,
    pub reg_loss: RegLossConfig,
    pub recon: ReconConfig,
    pub reg: RegConfig,
    pub seed: u64,
    /// Steps between checkpoints; 0 saves only at the end.
    pub checkpoint_every: usize,
    /// Fixed-point iterations for inverting oracle fields.
    pub oracle_inverse_iterations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Decolearn,
            iterations: 1000,
            batch_size: 4,
            lr_rec: 5e-4,
            lr_reg: 5e-4,
            rec_loss: RecLossConfig::default(),
            reg_loss: RegLossConfig::default(),
            recon: ReconConfig::default(),
            reg: RegConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            oracle_inverse_iterations: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "iterations and batch size must be >= 1".into(),
            ));
        }
        for (name, lr) in [("lr_rec", self.lr_rec), ("lr_reg", self.lr_reg)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.recon.blocks == 0 || self.recon.width == 0 || self.reg.base_width == 0 {
            return Err(Error::Config("network sizes must be >= 1".into()));
        }
        self.rec_loss.validate()?;
        self.reg_loss.validate()
    }
}

/// θ, ϕ and both optimizers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub recon: ReconNet,
    pub reg: RegNet,
    pub adam_rec: AdamState,
    pub adam_reg: AdamState,
    /// Completed iterations.
    pub step: usize,
}

impl ModelState {
    pub fn init(cfg: &TrainConfig) -> Self {
        let recon = ReconNet::init(cfg.recon, cfg.seed.wrapping_mul(2).wrapping_add(1));
        let reg = RegNet::init(cfg.reg, cfg.seed.wrapping_mul(2).wrapping_add(2));
        ModelState {
            adam_rec: AdamState::new(&recon.params, cfg.lr_rec),
            adam_reg: AdamState::new(&reg.params, cfg.lr_reg),
            recon,
            reg,
            step: 0,
        }
    }

    /// Swaps in a trained registration network (and fresh moments for it).
    pub fn with_registration(mut self, reg: RegNet, lr: f64) -> Self {
        self.adam_reg = AdamState::new(&reg.params, lr);
        self.reg = reg;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_rec: f64,
    pub l_cross: f64,
    pub l_self: f64,
    pub l_reg: f64,
    pub wall_ms: f64,
}

/// A pair with its zero-filled images and, for fixed-field modes, the
/// warp fields `(v_mr, v_rm)`, each `[2, H, W]`.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub pair: MeasurementPair,
    pub zf_r: Tensor,
    pub zf_m: Tensor,
    pub fixed: Option<(Tensor, Tensor)>,
}

/// Zero-filled inputs plus the fields each mode warps with.
pub fn prepare(
    pairs: &[MeasurementPair],
    cfg: &TrainConfig,
    reg: Option<&RegNet>,
) -> Result<Vec<PreparedPair>> {
    pairs
        .iter()
        .map(|p| {
            let zf_r = p.zero_filled_r()?.into_real();
            let zf_m = p.zero_filled_m()?.into_real();
            let fixed = match cfg.mode {
                TrainMode::Decolearn | TrainMode::A2aUnregistered => None,
                TrainMode::A2aOracle => {
                    let f = p.oracle_field.as_ref().ok_or_else(|| {
                        Error::invalid("a2a_oracle needs pairs with oracle fields")
                    })?;
                    let inv = f.inverse(cfg.oracle_inverse_iterations)?;
                    Some((inv.into_tensor(), f.tensor().clone()))
                }
                TrainMode::A2aPretrainedReg => {
                    let reg = reg.ok_or_else(|| {
                        Error::invalid("a2a_pretrained_reg needs a registration network")
                    })?;
                    Some((reg.apply(&zf_m, &zf_r)?, reg.apply(&zf_r, &zf_m)?))
                }
            };
            Ok(PreparedPair {
                pair: p.clone(),
                zf_r,
                zf_m,
                fixed,
            })
        })
        .collect()
}

fn stack_with(batch: &[&PreparedPair], f: impl Fn(&PreparedPair) -> Tensor) -> Result<Tensor> {
    Tensor::stack(&batch.iter().map(|p| f(p).into_real()).collect::<Vec<_>>())
}

fn split_batch(g: &mut Graph, x: Var, b: usize) -> Result<(Var, Var)> {
    Ok((g.narrow(x, 0, 0, b)?, g.narrow(x, 0, b, b)?))
}

/// `[x_m; x_r]` and `[x_r; x_m]` for one batched registration pass.
fn reg_inputs(x: &Tensor, b: usize) -> Result<(Tensor, Tensor)> {
    let items: Vec<Tensor> = (0..2 * b).map(|i| x.index0(i)).collect::<Result<_>>()?;
    let (r, m) = items.split_at(b);
    let moving: Vec<Tensor> = m.iter().chain(r).cloned().collect();
    let reference: Vec<Tensor> = r.iter().chain(m).cloned().collect();
    Ok((Tensor::stack(&moving)?, Tensor::stack(&reference)?))
}

/// Registration loss and its ϕ-gradient for fixed reconstructions
/// `x = [x_r; x_m]`. Returns the loss value.
pub(crate) fn reg_step(
    reg: &mut RegNet,
    adam: &mut AdamState,
    x: &Tensor,
    b: usize,
    cfg: &RegLossConfig,
) -> Result<f64> {
    let (moving, reference) = reg_inputs(x, b)?;
    let mut g = Graph::new();
    let ph = reg.params.bind(&mut g, true);
    let mv = g.constant(moving);
    let rv = g.constant(reference);
    let f = reg.forward(&mut g, &ph, mv, rv)?;
    let t = g.warp(mv, f)?;
    let (t_m, t_r) = split_batch(&mut g, t, b)?;
    let (x_r, x_m) = split_batch(&mut g, rv, b)?;
    let (v_mr, v_rm) = split_batch(&mut g, f, b)?;
    let imgs = ImageSet { x_r, x_m, t_r, t_m };
    let l = reg_loss(&mut g, &imgs, v_mr, v_rm, cfg)?;
    g.backward(l)?;
    let grads: Vec<Tensor> = ph.iter().map(|&p| g.grad(p)).collect::<Result<_>>()?;
    adam_update(adam, &mut reg.params, &grads)?;
    g.value(l).item()
}

/// One iteration on a mini-batch.
pub fn train_step(
    state: &mut ModelState,
    batch: &[&PreparedPair],
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    let start = Instant::now();
    let b = batch.len();
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let zf = Tensor::stack(
        &batch
            .iter()
            .map(|p| p.zf_r.clone())
            .chain(batch.iter().map(|p| p.zf_m.clone()))
            .collect::<Vec<_>>(),
    )?;
    let op_r = BatchOperator::new(&batch.iter().map(|p| &p.pair.model_r).collect::<Vec<_>>())?;
    let op_m = BatchOperator::new(&batch.iter().map(|p| &p.pair.model_m).collect::<Vec<_>>())?;
    let y_r = stack_with(batch, |p| p.pair.y_r.clone())?;
    let y_m = stack_with(batch, |p| p.pair.y_m.clone())?;
    let (h, w) = (zf.shape()[2], zf.shape()[3]);

    // θ update; fields are constants.
    let mut g = Graph::new();
    let th = state.recon.params.bind(&mut g, true);
    let zv = g.constant(zf.clone());
    let x = state.recon.forward(&mut g, &th, zv)?;
    let fields = match cfg.mode {
        TrainMode::A2aUnregistered => Tensor::zeros(&[2 * b, 2, h, w]),
        TrainMode::Decolearn => {
            let (moving, reference) = reg_inputs(g.value(x), b)?;
            state.reg.apply(&moving, &reference)?
        }
        TrainMode::A2aOracle | TrainMode::A2aPretrainedReg => {
            let mut all = Vec::with_capacity(2 * b);
            for p in batch {
                all.push(
                    p.fixed
                        .as_ref()
                        .ok_or_else(|| Error::invalid("pair not prepared for mode"))?
                        .0
                        .clone(),
                );
            }
            for p in batch {
                all.push(p.fixed.as_ref().unwrap().1.clone());
            }
            Tensor::stack(&all)?
        }
    };
    let (x_r, x_m) = split_batch(&mut g, x, b)?;
    let moving = g.concat(&[x_m, x_r], 0)?;
    let fv = g.constant(fields.clone());
    let t = g.warp(moving, fv)?;
    let (t_m, t_r) = split_batch(&mut g, t, b)?;
    let imgs = ImageSet { x_r, x_m, t_r, t_m };
    let yrv = g.constant(y_r);
    let ymv = g.constant(y_m);
    let rl = rec_loss(&mut g, yrv, ymv, &op_r, &op_m, &imgs, &cfg.rec_loss)?;
    g.backward(rl.total)?;
    let grads: Vec<Tensor> = th.iter().map(|&p| g.grad(p)).collect::<Result<_>>()?;
    adam_update(&mut state.adam_rec, &mut state.recon.params, &grads)?;
    let (l_rec, l_cross, l_self) = (
        g.value(rl.total).item()?,
        g.value(rl.cross).item()?,
        g.value(rl.self_).item()?,
    );

    let l_reg = if cfg.mode == TrainMode::Decolearn {
        // ϕ update on reconstructions from the updated θ.
        let x_new = state.recon.apply(&zf)?;
        reg_step(
            &mut state.reg,
            &mut state.adam_reg,
            &x_new,
            b,
            &cfg.reg_loss,
        )?
    } else {
        // Monitoring only: the registration loss of the fields in use.
        let x_val = g.value(x).clone();
        let t_val = g.value(t).clone();
        let mut g2 = Graph::new();
        let xv = g2.constant(x_val);
        let tv = g2.constant(t_val);
        let fv = g2.constant(fields);
        let (x_r, x_m) = split_batch(&mut g2, xv, b)?;
        let (t_m, t_r) = split_batch(&mut g2, tv, b)?;
        let (v_mr, v_rm) = split_batch(&mut g2, fv, b)?;
        let l = reg_loss(
            &mut g2,
            &ImageSet { x_r, x_m, t_r, t_m },
            v_mr,
            v_rm,
            &cfg.reg_loss,
        )?;
        g2.value(l).item()?
    };
    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        l_rec,
        l_cross,
        l_self,
        l_reg,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Indices of the batch for iteration `step`: consecutive positions in a
/// per-epoch permutation drawn from `(seed, epoch)`.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (step * batch..(step + 1) * batch)
        .map(|pos| {
            let epoch = pos / n;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, epoch_order(n, seed, epoch)));
            }
            cached.as_ref().unwrap().1[pos % n]
        })
        .collect()
}

pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Mean validation PSNR of the reconstruction network over pairs with
/// oracle images (both sides of each pair).
pub fn validation_psnr(recon: &ReconNet, pairs: &[MeasurementPair]) -> Result<Option<f64>> {
    let mut vals = Vec::new();
    for p in pairs {
        for (zf, oracle) in [
            (p.zero_filled_r()?, &p.oracle_x_r),
            (p.zero_filled_m()?, &p.oracle_x_m),
        ] {
            if let Some(o) = oracle {
                let x = recon.apply(&zf.into_real())?.into_complex()?;
                vals.push(psnr(&x, o)?);
            }
        }
    }
    Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
}

pub struct TrainOutcome {
    pub state: ModelState,
    pub metrics: Vec<StepMetrics>,
    pub val_psnr: Option<f64>,
}

/// Runs iterations `state.step + 1 ..= cfg.iterations`.
pub fn train(
    pairs: &[MeasurementPair],
    val: &[MeasurementPair],
    cfg: &TrainConfig,
    mut state: ModelState,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let prepared = prepare(pairs, cfg, Some(&state.reg))?;
    let mut metrics = Vec::with_capacity(cfg.iterations.saturating_sub(state.step));
    while state.step < cfg.iterations {
        let idx = batch_indices(prepared.len(), cfg.batch_size, cfg.seed, state.step);
        let batch: Vec<&PreparedPair> = idx.iter().map(|&i| &prepared[i]).collect();
        metrics.push(train_step(&mut state, &batch, cfg)?);
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0
                && state.step % cfg.checkpoint_every == 0
                && state.step < cfg.iterations
            {
                save_checkpoint(&dir.join(format!("step_{:06}", state.step)), &state, cfg)?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(&dir.join("final"), &state, cfg)?;
    }
    let val_psnr = validation_psnr(&state.recon, val)?;
    Ok(TrainOutcome {
        state,
        metrics,
        val_psnr,
    })
}

pub fn write_metrics_csv<W: std::io::Write>(w: W, metrics: &[StepMetrics]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for m in metrics {
        out.serialize(m)?;
    }
    out.flush()?;
    Ok(())
}

// ------------------------------------------------------------ checkpoints

#[derive(Serialize, Deserialize)]
struct AdamRecord {
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: u32,
    tool_version: String,
    step: usize,
    config: TrainConfig,
    recon: ReconConfig,
    reg: RegConfig,
    theta: Vec<String>,
    phi: Vec<String>,
    adam_rec: AdamRecord,
    adam_reg: AdamRecord,
}

fn save_params(dir: &Path, names: &[String], tensors: &[Tensor]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (n, t) in names.iter().zip(tensors) {
        write_dclt(&dir.join(format!("{n}.dclt")), t)?;
    }
    Ok(())
}

fn load_params(dir: &Path, template: &ParamSet) -> Result<Vec<Tensor>> {
    template
        .iter()
        .map(|(n, t)| {
            let x = read_dclt(&dir.join(format!("{n}.dclt")))?;
            if x.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor '{n}' has shape {:?}",
                    x.shape()
                )));
            }
            Ok(x)
        })
        .collect()
}

fn adam_record(a: &AdamState) -> AdamRecord {
    AdamRecord {
        step: a.step,
        lr: a.lr,
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.eps,
    }
}

/// Layout: `manifest.toml`, `theta/`, `phi/` and `adam_{rec,reg}/{m,v}/`,
/// one DCLT file per named tensor.
pub fn save_checkpoint(dir: &Path, state: &ModelState, cfg: &TrainConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        step: state.step,
        config: cfg.clone(),
        recon: state.recon.config,
        reg: state.reg.config,
        theta: state.recon.params.names().to_vec(),
        phi: state.reg.params.names().to_vec(),
        adam_rec: adam_record(&state.adam_rec),
        adam_reg: adam_record(&state.adam_reg),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("manifest.toml"), text)?;
    let (tn, pn) = (state.recon.params.names(), state.reg.params.names());
    save_params(&dir.join("theta"), tn, state.recon.params.tensors())?;
    save_params(&dir.join("phi"), pn, state.reg.params.tensors())?;
    save_params(&dir.join("adam_rec/m"), tn, &state.adam_rec.m)?;
    save_params(&dir.join("adam_rec/v"), tn, &state.adam_rec.v)?;
    save_params(&dir.join("adam_reg/m"), pn, &state.adam_reg.m)?;
    save_params(&dir.join("adam_reg/v"), pn, &state.adam_reg.v)?;
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let text = fs::read_to_string(dir.join("manifest.toml"))?;
    let m: CheckpointManifest =
        toml::from_str(&text).map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!(
            "unsupported checkpoint format {}",
            m.format
        )));
    }
    Ok(m)
}

/// Full training state and the configuration it was trained with.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelState, TrainConfig)> {
    let m = read_manifest(dir)?;
    let mut recon = ReconNet::init(m.recon, 0);
    let mut reg = RegNet::init(m.reg, 0);
    if recon.params.names() != m.theta.as_slice() || reg.params.names() != m.phi.as_slice() {
        return Err(Error::Format(
            "checkpoint parameter names do not match the architecture".into(),
        ));
    }
    let theta = load_params(&dir.join("theta"), &recon.params)?;
    let phi = load_params(&dir.join("phi"), &reg.params)?;
    let adam = |sub: &str, a: &AdamRecord, tpl: &ParamSet| -> Result<AdamState> {
        Ok(AdamState {
            step: a.step,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            m: load_params(&dir.join(sub).join("m"), tpl)?,
            v: load_params(&dir.join(sub).join("v"), tpl)?,
        })
    };
    let adam_rec = adam("adam_rec", &m.adam_rec, &recon.params)?;
    let adam_reg = adam("adam_reg", &m.adam_reg, &reg.params)?;
    recon.params.tensors_mut().clone_from_slice(&theta);
    reg.params.tensors_mut().clone_from_slice(&phi);
    Ok((
        ModelState {
            recon,
            reg,
            adam_rec,
            adam_reg,
            step: m.step,
        },
        m.config,
    ))
}

/// Only the reconstruction network; nothing under `phi/` or `adam_*` is read.
pub fn load_reconstruction(dir: &Path) -> Result<ReconNet> {
    let m = read_manifest(dir)?;
    let mut recon = ReconNet::init(m.recon, 0);
    if recon.params.names() != m.theta.as_slice() {
        return Err(Error::Format(
            "checkpoint parameter names do not match the architecture".into(),
        ));
    }
    let theta = load_params(&dir.join("theta"), &recon.params)?;
    recon.params.tensors_mut().clone_from_slice(&theta);
    Ok(recon)
}
