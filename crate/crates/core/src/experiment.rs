//! Experiment orchestration: evaluation of every method on a dataset, the
//! ablation table, run manifests and graymap export.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{pretrain_registration, select_tau, tv_reconstruct, zero_filled};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::deformation::{endpoint_error, DisplacementField};
use crate::error::{Error, Result};
use crate::metrics::{magnitude, psnr, ssim, summarize, write_rows, MetricRow, MetricSummary};
use crate::models::{ReconNet, RegNet};
use crate::mri::MeasurementPair;
use crate::tensor::Tensor;
use crate::trainer::{
    save_checkpoint, train, write_metrics_csv, ModelState, StepMetrics, TrainMode,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ZeroFilled,
    Tv,
    A2aUnregistered,
    A2aPretrainedReg,
    A2aOracle,
    Decolearn,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::ZeroFilled,
        Method::Tv,
        Method::A2aUnregistered,
        Method::A2aPretrainedReg,
        Method::A2aOracle,
        Method::Decolearn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::ZeroFilled => "zero_filled",
            Method::Tv => "tv",
            Method::A2aUnregistered => "a2a_unregistered",
            Method::A2aPretrainedReg => "a2a_pretrained_reg",
            Method::A2aOracle => "a2a_oracle",
            Method::Decolearn => "decolearn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }

    pub fn train_mode(self) -> Option<TrainMode> {
        match self {
            Method::A2aUnregistered => Some(TrainMode::A2aUnregistered),
            Method::A2aPretrainedReg => Some(TrainMode::A2aPretrainedReg),
            Method::A2aOracle => Some(TrainMode::A2aOracle),
            Method::Decolearn => Some(TrainMode::Decolearn),
            Method::ZeroFilled | Method::Tv => None,
        }
    }
}

/// Tool version and resolved configuration, written next to every artifact.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// Values chosen during the run, e.g. the selected TV weight.
    pub selected: Vec<(String, f64)>,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            selected: Vec::new(),
            config: config.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let text = toml::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join("run_manifest.toml"), text)?;
        Ok(())
    }
}

/// Each test pair contributes two images: `sample_id = 2i` for the
/// reference acquisition and `2i + 1` for the moving one.
fn score_pairs(
    pairs: &[MeasurementPair],
    method: &str,
    acceleration: f64,
    sigma: f64,
    mut reconstruct: impl FnMut(&MeasurementPair, bool) -> Result<Tensor>,
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::with_capacity(2 * pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        for (side, oracle) in [(false, &p.oracle_x_r), (true, &p.oracle_x_m)] {
            let Some(o) = oracle else {
                return Err(Error::invalid("evaluation needs pairs with oracle images"));
            };
            let x = reconstruct(p, side)?;
            rows.push(MetricRow {
                sample_id: 2 * i + side as usize,
                method: method.to_string(),
                acceleration,
                sigma,
                psnr_db: psnr(&x, o)?,
                ssim: ssim(&x, o)?,
            });
        }
    }
    Ok(rows)
}

fn side(p: &MeasurementPair, moving: bool) -> (&Tensor, &crate::mri::MeasurementModel) {
    if moving {
        (&p.y_m, &p.model_m)
    } else {
        (&p.y_r, &p.model_r)
    }
}

pub fn evaluate_zero_filled(
    pairs: &[MeasurementPair],
    acc: f64,
    sigma: f64,
) -> Result<Vec<MetricRow>> {
    score_pairs(pairs, Method::ZeroFilled.name(), acc, sigma, |p, m| {
        let (y, model) = side(p, m);
        zero_filled(y, model)
    })
}

pub fn evaluate_tv(
    pairs: &[MeasurementPair],
    cfg: &crate::baselines::TvConfig,
    acc: f64,
    sigma: f64,
) -> Result<Vec<MetricRow>> {
    score_pairs(pairs, Method::Tv.name(), acc, sigma, |p, m| {
        let (y, model) = side(p, m);
        tv_reconstruct(y, model, cfg)
    })
}

/// Applies the reconstruction network to zero-filled inputs.
pub fn reconstruct_pair_side(net: &ReconNet, p: &MeasurementPair, moving: bool) -> Result<Tensor> {
    let (y, model) = side(p, moving);
    net.apply(&zero_filled(y, model)?.into_real())?
        .into_complex()
}

pub fn evaluate_network(
    net: &ReconNet,
    pairs: &[MeasurementPair],
    method: &str,
    acc: f64,
    sigma: f64,
) -> Result<Vec<MetricRow>> {
    score_pairs(pairs, method, acc, sigma, |p, m| {
        reconstruct_pair_side(net, p, m)
    })
}

/// Mean endpoint error of `reg(x̂_r, x̂_m)` against the oracle field, and
/// of the zero field, over pairs with oracle fields.
pub fn registration_endpoint_error(
    recon: &ReconNet,
    reg: &RegNet,
    pairs: &[MeasurementPair],
) -> Result<(f64, f64)> {
    let (mut est, mut zero, mut n) = (0.0, 0.0, 0usize);
    for p in pairs {
        let Some(oracle) = &p.oracle_field else {
            continue;
        };
        let xr = reconstruct_pair_side(recon, p, false)?.into_real();
        let xm = reconstruct_pair_side(recon, p, true)?.into_real();
        let v = DisplacementField::from_tensor(reg.apply(&xr, &xm)?)?;
        est += endpoint_error(&v, oracle)?;
        zero += endpoint_error(
            &DisplacementField::zeros(oracle.height(), oracle.width()),
            oracle,
        )?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("no pairs with oracle fields"));
    }
    Ok((est / n as f64, zero / n as f64))
}

pub struct TrainedMethod {
    pub method: Method,
    pub state: ModelState,
    pub metrics: Vec<StepMetrics>,
}

pub struct DatasetOutcome {
    pub acceleration: f64,
    pub sigma: f64,
    pub rows: Vec<MetricRow>,
    pub tau: Option<f64>,
    pub trained: Vec<TrainedMethod>,
    /// Decolearn registration endpoint error and the zero-field baseline.
    pub endpoint_error: Option<(f64, f64)>,
}

/// Trains or runs every requested method on one dataset and scores the
/// test split. Artifacts go under `out` when given.
pub fn run_methods(
    ds: &Dataset,
    cfg: &RunConfig,
    methods: &[Method],
    out: Option<&Path>,
) -> Result<DatasetOutcome> {
    let acc = ds.spec.acceleration;
    let sigma = ds.spec.field.sigma;
    let mut rows = Vec::new();
    let mut tau = None;
    let mut trained = Vec::new();
    let mut pretrained: Option<RegNet> = None;
    let mut epe = None;
    for &m in methods {
        match m {
            Method::ZeroFilled => rows.extend(evaluate_zero_filled(&ds.test, acc, sigma)?),
            Method::Tv => {
                let t = match cfg.tv.tau {
                    Some(t) => t,
                    None => select_tau(&ds.val, &cfg.tv_config(1.0), &cfg.tv.tau_grid)?.0,
                };
                tau = Some(t);
                rows.extend(evaluate_tv(&ds.test, &cfg.tv_config(t), acc, sigma)?);
            }
            _ => {
                let mode = m.train_mode().expect("learned method");
                let tcfg = cfg.train_config(mode)?;
                let mut state = ModelState::init(&tcfg);
                if mode == TrainMode::A2aPretrainedReg {
                    let reg = match &pretrained {
                        Some(r) => r.clone(),
                        None => {
                            let r = pretrain_registration(&ds.train, &cfg.pretrain_config())?;
                            pretrained = Some(r.clone());
                            r
                        }
                    };
                    state = state.with_registration(reg, tcfg.lr_reg);
                }
                let ckpt = out.map(|o| o.join("checkpoints").join(m.name()));
                let outcome = train(&ds.train, &ds.val, &tcfg, state, ckpt.as_deref())?;
                rows.extend(evaluate_network(
                    &outcome.state.recon,
                    &ds.test,
                    m.name(),
                    acc,
                    sigma,
                )?);
                if m == Method::Decolearn {
                    epe = Some(registration_endpoint_error(
                        &outcome.state.recon,
                        &outcome.state.reg,
                        &ds.test,
                    )?);
                }
                if let Some(o) = out {
                    fs::create_dir_all(o)?;
                    let f = fs::File::create(o.join(format!("train_{}.csv", m.name())))?;
                    write_metrics_csv(f, &outcome.metrics)?;
                }
                trained.push(TrainedMethod {
                    method: m,
                    state: outcome.state,
                    metrics: outcome.metrics,
                });
            }
        }
    }
    if let Some(o) = out {
        fs::create_dir_all(o)?;
        write_rows(fs::File::create(o.join("metrics.csv"))?, &rows)?;
        let mut manifest = RunManifest::new("ablation", cfg);
        if let Some(t) = tau {
            manifest.selected.push(("tv.tau".into(), t));
        }
        if let Some((e, z)) = epe {
            manifest
                .selected
                .push(("decolearn.endpoint_error".into(), e));
            manifest
                .selected
                .push(("zero_field.endpoint_error".into(), z));
        }
        manifest.write(o)?;
    }
    Ok(DatasetOutcome {
        acceleration: acc,
        sigma,
        rows,
        tau,
        trained,
        endpoint_error: epe,
    })
}

/// Method rows × `(acceleration, sigma)` column groups of mean PSNR/SSIM.
pub fn ablation_table(summaries: &[MetricSummary]) -> String {
    let mut settings: Vec<(f64, f64)> = Vec::new();
    for s in summaries {
        if !settings
            .iter()
            .any(|&(a, g)| a == s.acceleration && g == s.sigma)
        {
            settings.push((s.acceleration, s.sigma));
        }
    }
    let mut out = String::from("method");
    for (a, g) in &settings {
        let _ = write!(out, ",x{a}_s{g}_psnr,x{a}_s{g}_ssim");
    }
    out.push('\n');
    for m in Method::ALL {
        out.push_str(m.name());
        for &(a, g) in &settings {
            match summaries
                .iter()
                .find(|s| s.method == m.name() && s.acceleration == a && s.sigma == g)
            {
                Some(s) => {
                    let _ = write!(out, ",{:.4},{:.4}", s.psnr_mean, s.ssim_mean);
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

/// Runs all six methods for every configured `(acceleration, sigma)`.
pub fn run_ablation(cfg: &RunConfig, out: Option<&Path>) -> Result<(Vec<DatasetOutcome>, String)> {
    let mut outcomes = Vec::new();
    for &acc in &cfg.ablation.accelerations {
        for &sigma in &cfg.ablation.sigmas {
            let mut c = cfg.clone();
            c.dataset.acceleration = acc;
            c.dataset.sigma = sigma;
            c.validate()?;
            let ds = Dataset::synthesize(&c.dataset_spec())?;
            let sub = out.map(|o| o.join(format!("x{acc}_s{sigma}")));
            if let Some(s) = &sub {
                ds.save(&s.join("data"))?;
            }
            outcomes.push(run_methods(&ds, &c, &Method::ALL, sub.as_deref())?);
        }
    }
    let rows: Vec<MetricRow> = outcomes
        .iter()
        .flat_map(|o| o.rows.iter().cloned())
        .collect();
    let table = ablation_table(&summarize(&rows));
    if let Some(o) = out {
        fs::create_dir_all(o)?;
        fs::write(o.join("ablation_table.csv"), &table)?;
        write_rows(fs::File::create(o.join("metrics.csv"))?, &rows)?;
        RunManifest::new("ablation", cfg).write(o)?;
    }
    Ok((outcomes, table))
}

/// Binary 16-bit graymap of the magnitude of `img` (`[2, H, W]` complex or
/// `[H, W]` real), clamped to `[0, 1]`.
pub fn write_pgm16<W: Write>(mut w: W, img: &Tensor) -> Result<()> {
    let m = magnitude(img);
    let s = m.shape();
    let (h, wd) = match s.len() {
        2 => (s[0], s[1]),
        3 if s[0] == 1 => (s[1], s[2]),
        _ => {
            return Err(Error::invalid(format!(
                "graymap needs one image, got {s:?}"
            )))
        }
    };
    write!(w, "P5\n{wd} {h}\n65535\n")?;
    let mut buf = Vec::with_capacity(2 * h * wd);
    for v in m.data() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Saves a reconstruction state's network under `dir` plus its manifest.
pub fn save_trained(
    dir: &Path,
    state: &ModelState,
    cfg: &RunConfig,
    mode: TrainMode,
) -> Result<()> {
    save_checkpoint(dir, state, &cfg.train_config(mode)?)?;
    RunManifest::new("train", cfg).write(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_reloads_as_config() {
        let cfg =
            RunConfig::resolve(None, &["train.iterations=7".into(), "tv.tau=0.01".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("train", &cfg);
        m.selected.push(("val.psnr_db".into(), 20.0));
        m.write(dir.path()).unwrap();
        let back = RunConfig::load(Some(&dir.path().join("run_manifest.toml")), &[]).unwrap();
        assert_eq!(back.to_toml().unwrap(), cfg.to_toml().unwrap());
    }

    #[test]
    fn table_has_six_rows_per_setting() {
        let rows: Vec<MetricRow> = Method::ALL
            .iter()
            .flat_map(|m| {
                [(3.0, 10.0), (4.0, 10.0)].map(|(a, s)| MetricRow {
                    sample_id: 0,
                    method: m.name().into(),
                    acceleration: a,
                    sigma: s,
                    psnr_db: 30.0,
                    ssim: 0.9,
                })
            })
            .collect();
        let t = ablation_table(&summarize(&rows));
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(
            lines[0],
            "method,x3_s10_psnr,x3_s10_ssim,x4_s10_psnr,x4_s10_ssim"
        );
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 5));
    }

    #[test]
    fn pgm_header_and_size() {
        let img = Tensor::from_vec(&[2, 3], vec![0.0, 0.5, 1.0, 2.0, -1.0, 0.25]).unwrap();
        let mut buf = Vec::new();
        write_pgm16(&mut buf, &img).unwrap();
        let head = b"P5\n3 2\n65535\n";
        assert_eq!(&buf[..head.len()], head);
        assert_eq!(buf.len(), head.len() + 12);
        assert_eq!(&buf[head.len() + 4..head.len() + 6], &[0xff, 0xff]);
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(Method::parse("n2v").is_err());
    }
}
