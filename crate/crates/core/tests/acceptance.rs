//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each, and exits nonzero if any fails. Built with `harness = false`
//! so the lines are never captured.

mod common;

use std::fs;
use std::path::Path;
use std::time::Instant;

use common::{gradcheck, randn, rng, uniform};
use deco_core::config::RunConfig;
use deco_core::dataset::Dataset;
use deco_core::deformation::{endpoint_error, warp, DisplacementField};
use deco_core::experiment::{reconstruct_pair_side, run_methods, Method};
use deco_core::metrics::{psnr, ssim, summarize, write_rows, PSNR_CAP_DB};
use deco_core::models::{ParamSet, ReconConfig, ReconNet, RegConfig, RegNet};
use deco_core::mri::{add_noise, make_cartesian_mask, measured_snr_db, MeasurementModel};
use deco_core::objectives::{finite_diff, lcc, smoothness_loss, LCC_EPS};
use deco_core::phantom::make_phantom;
use deco_core::trainer::{
    adam_update, load_checkpoint, load_reconstruction, prepare, train, train_step,
    write_metrics_csv, AdamState, ModelState, PreparedPair, TrainMode,
};
use deco_core::{Graph, Tensor, Var};
use rand::Rng;

type Outcome = Result<String, String>;

/// Settings of the trend criteria. Network sizes and the step budget are
/// reduced from the library defaults so the six-method ablation fits the
/// CPU budget. The shorter budget gets larger step sizes, and the stronger
/// smoothness weight keeps the fields near zero where the images are flat.
const TREND_OVERRIDES: &[&str] = &[
    "model.recon_blocks=2",
    "model.recon_width=16",
    "model.reg_levels=2",
    "model.reg_width=8",
    "train.iterations=1000",
    "train.pretrain_iterations=400",
    "train.lr_rec=0.002",
    "train.lr_reg=0.002",
    "loss.lambda=3",
];

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

fn params_as_inputs(ps: &ParamSet, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Tensor> {
    // Every tensor random, including zero-initialized heads, so no
    // gradient is trivially zero.
    ps.tensors()
        .iter()
        .map(|t| randn(rng, t.shape()).scale(0.4))
        .collect()
}

fn criterion_autodiff() -> Outcome {
    const SEEDS: u64 = 20;
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    type Build = Box<dyn Fn(&mut Graph, &[Var]) -> deco_core::Result<Var>>;
    type Inputs = Box<dyn Fn(u64) -> Vec<Tensor>>;
    let unary =
        |f: fn(&mut Graph, Var) -> deco_core::Result<Var>, lo: f64, hi: f64| -> (Inputs, Build) {
            (
                Box::new(move |s| vec![uniform(&mut rng(s), &[5, 5], lo, hi)]),
                Box::new(move |g: &mut Graph, v: &[Var]| f(g, v[0])),
            )
        };
    let mut cases: Vec<(&str, Inputs, Build)> = Vec::new();
    let mut add = |name: &'static str, (i, b): (Inputs, Build)| cases.push((name, i, b));
    add("leaky_relu", unary(|g, x| g.leaky_relu(x, 0.1), -2.0, 2.0));
    add("abs", unary(|g, x| g.abs(x), -2.0, 2.0));
    add("square", unary(|g, x| g.square(x), -2.0, 2.0));
    add("sqrt", unary(|g, x| g.sqrt(x), 0.2, 3.0));
    add("huber", unary(|g, x| g.huber(x, 1.0), -3.0, 3.0));
    add("scale", unary(|g, x| g.scale(x, -1.7), -2.0, 2.0));
    add("add_scalar", unary(|g, x| g.add_scalar(x, 0.3), -2.0, 2.0));
    add("sum", unary(|g, x| g.sum(x), -2.0, 2.0));
    add("mean", unary(|g, x| g.mean(x), -2.0, 2.0));
    let two = |sa: &'static [usize],
               sb: &'static [usize],
               f: fn(&mut Graph, Var, Var) -> deco_core::Result<Var>|
     -> (Inputs, Build) {
        (
            Box::new(move |s| {
                let mut r = rng(s);
                vec![randn(&mut r, sa), uniform(&mut r, sb, 0.5, 2.0)]
            }),
            Box::new(move |g: &mut Graph, v: &[Var]| f(g, v[0], v[1])),
        )
    };
    add("add", two(&[2, 3, 4], &[2, 3, 4], |g, a, b| g.add(a, b)));
    add(
        "add_broadcast",
        two(&[2, 3, 4], &[3, 1], |g, a, b| g.add(a, b)),
    );
    add("sub", two(&[2, 3, 4], &[1, 4], |g, a, b| g.sub(a, b)));
    add("mul", two(&[2, 3, 4], &[2, 3, 4], |g, a, b| g.mul(a, b)));
    add(
        "mul_broadcast",
        two(&[2, 3, 4], &[3, 4], |g, a, b| g.mul(a, b)),
    );
    add("div", two(&[2, 3, 4], &[2, 1, 4], |g, a, b| g.div(a, b)));
    add("matmul", two(&[3, 4], &[4, 5], |g, a, b| g.matmul(a, b)));
    add(
        "mul_const",
        (
            Box::new(|s| vec![randn(&mut rng(s), &[2, 3, 4])]),
            Box::new(|g: &mut Graph, v: &[Var]| {
                let c = Tensor::from_vec(&[3, 4], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect())?;
                g.mul_const(v[0], &c)
            }),
        ),
    );
    for (name, stride) in [("conv2d_stride1", 1usize), ("conv2d_stride2", 2)] {
        add(
            name,
            (
                Box::new(|s| {
                    let mut r = rng(s);
                    vec![
                        randn(&mut r, &[2, 3, 6, 6]),
                        randn(&mut r, &[4, 3, 3, 3]),
                        randn(&mut r, &[4]),
                    ]
                }),
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    g.conv2d(v[0], v[1], Some(v[2]), stride, 1)
                }),
            ),
        );
    }
    let shaped = |shape: &'static [usize],
                  f: fn(&mut Graph, Var) -> deco_core::Result<Var>|
     -> (Inputs, Build) {
        (
            Box::new(move |s| vec![randn(&mut rng(s), shape)]),
            Box::new(move |g: &mut Graph, v: &[Var]| f(g, v[0])),
        )
    };
    add(
        "upsample_nearest",
        shaped(&[1, 2, 3, 3], |g, x| g.upsample_nearest(x, 2)),
    );
    add("fft2", shaped(&[1, 2, 4, 5], |g, x| g.fft2(x)));
    add("ifft2", shaped(&[1, 2, 4, 5], |g, x| g.ifft2(x)));
    add("narrow", shaped(&[2, 3, 5, 4], |g, x| g.narrow(x, 2, 1, 3)));
    add(
        "pad2d",
        shaped(&[1, 2, 3, 4], |g, x| g.pad2d(x, [1, 0, 2, 1])),
    );
    add("reshape", shaped(&[2, 3, 4], |g, x| g.reshape(x, &[6, 4])));
    add(
        "box_filter",
        shaped(&[1, 2, 6, 7], |g, x| g.box_filter(x, 3)),
    );
    add(
        "concat",
        (
            Box::new(|s| {
                let mut r = rng(s);
                vec![randn(&mut r, &[2, 1, 3, 3]), randn(&mut r, &[2, 2, 3, 3])]
            }),
            Box::new(|g: &mut Graph, v: &[Var]| g.concat(&[v[0], v[1]], 1)),
        ),
    );
    add(
        "warp",
        (
            Box::new(|s| {
                let mut r = rng(s);
                vec![
                    randn(&mut r, &[2, 2, 6, 6]),
                    uniform(&mut r, &[2, 2, 6, 6], -1.7, 1.7),
                ]
            }),
            Box::new(|g: &mut Graph, v: &[Var]| g.warp(v[0], v[1])),
        ),
    );
    let recon = ReconNet::init(
        ReconConfig {
            blocks: 1,
            width: 4,
        },
        0,
    );
    let rp = recon.params.clone();
    add(
        "recon_forward",
        (
            Box::new(move |s| {
                let mut r = rng(s);
                let mut v = vec![randn(&mut r, &[1, 2, 8, 8])];
                v.extend(params_as_inputs(&rp, &mut r));
                v
            }),
            Box::new(move |g: &mut Graph, v: &[Var]| recon.forward(g, &v[1..], v[0])),
        ),
    );
    let reg = RegNet::init(
        RegConfig {
            levels: 1,
            base_width: 4,
        },
        0,
    );
    let gp = reg.params.clone();
    add(
        "reg_forward",
        (
            Box::new(move |s| {
                let mut r = rng(s);
                let mut v = vec![randn(&mut r, &[1, 2, 8, 8]), randn(&mut r, &[1, 2, 8, 8])];
                v.extend(params_as_inputs(&gp, &mut r));
                v
            }),
            Box::new(move |g: &mut Graph, v: &[Var]| reg.forward(g, &v[2..], v[0], v[1])),
        ),
    );

    let mut worst = (0.0f64, "");
    let mut failures = Vec::new();
    let n_cases = cases.len();
    for (name, inputs, build) in &cases {
        for seed in 0..SEEDS {
            let e = gradcheck(&inputs(seed), seed, |g, v| build(g, v));
            if e > worst.0 {
                worst = (e, name);
            }
            if !(e <= TOL) {
                failures.push(format!("{name} seed {seed}: {e:.2e}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "{n_cases} ops x {SEEDS} seeds, worst rel err {:.2e} ({}), {secs:.1}s",
        worst.0, worst.1
    );
    if !failures.is_empty() {
        return Err(format!("{detail}; failing: {}", failures.join(", ")));
    }
    check(secs < 60.0, detail)
}

// ---------------------------------------------------------------- 2

/// Complex inner product `Σ a · conj(b)` of paired-plane tensors.
fn cdot(a: &Tensor, b: &Tensor) -> (f64, f64) {
    let plane = a.numel() / 2;
    let (ar, ai) = a.data().split_at(plane);
    let (br, bi) = b.data().split_at(plane);
    let mut re = 0.0;
    let mut im = 0.0;
    for i in 0..plane {
        re += ar[i] * br[i] + ai[i] * bi[i];
        im += ai[i] * br[i] - ar[i] * bi[i];
    }
    (re, im)
}

fn complex(t: Tensor) -> Tensor {
    t.into_complex().unwrap()
}

fn criterion_operators() -> Outcome {
    let mut worst_adj: f64 = 0.0;
    let mut worst_fft: f64 = 0.0;
    for seed in 0..100u64 {
        let mut r = rng(1000 + seed);
        let h = r.gen_range(8..=20);
        let w = r.gen_range(6..=20);
        let acc = r.gen_range(1.0..(h as f64 / 3.0));
        let mask = make_cartesian_mask(h, w, acc, 2, seed).map_err(|e| e.to_string())?;
        let model = if seed % 2 == 0 {
            MeasurementModel::new(mask)
        } else {
            MeasurementModel::with_sensitivity(mask, randn(&mut r, &[2, h, w]))
                .map_err(|e| e.to_string())?
        };
        let x = complex(randn(&mut r, &[2, h, w]));
        let y = complex(randn(&mut r, &[2, h, w]));
        let hx = model.forward(&x).map_err(|e| e.to_string())?;
        let hty = model.adjoint(&y).map_err(|e| e.to_string())?;
        let (lr, li) = cdot(&hx, &y);
        let (rr, ri) = cdot(&x, &hty);
        let scale = (hx.norm_sq() * y.norm_sq()).sqrt().max(1e-300);
        worst_adj = worst_adj.max((lr - rr).hypot(li - ri) / scale);

        let full = MeasurementModel::new(
            make_cartesian_mask(h, w, 1.0, 0, seed).map_err(|e| e.to_string())?,
        );
        let fx = full.forward(&x).map_err(|e| e.to_string())?;
        let back = full.adjoint(&fx).map_err(|e| e.to_string())?;
        let norm_err = (fx.norm_sq().sqrt() - x.norm_sq().sqrt()).abs() / x.norm_sq().sqrt();
        let inv_err = (back.sub(&x).unwrap().norm_sq() / x.norm_sq()).sqrt();
        worst_fft = worst_fft.max(norm_err).max(inv_err);
    }
    let mut r = rng(7);
    let img = randn(&mut r, &[2, 16, 12]);
    let same = warp(&img, &DisplacementField::zeros(16, 12)).map_err(|e| e.to_string())?;
    let bit_exact = same
        .data()
        .iter()
        .zip(img.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    check(
        worst_adj <= 1e-10 && worst_fft <= 1e-10 && bit_exact,
        format!("adjoint rel err {worst_adj:.2e} over 100 models, fft2 unitarity err {worst_fft:.2e}, zero-field warp bit-exact: {bit_exact}"),
    )
}

// ---------------------------------------------------------------- 3

fn brute_lcc(a: &[f64], b: &[f64], h: usize, w: usize, win: usize) -> f64 {
    let r = (win / 2) as isize;
    let n = (win * win) as f64;
    let at = |img: &[f64], y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            img[y as usize * w + x as usize]
        }
    };
    let mut total = 0.0;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut vals = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    vals.push((at(a, y + dy, x + dx), at(b, y + dy, x + dx)));
                }
            }
            let ma = vals.iter().map(|v| v.0).sum::<f64>() / n;
            let mb = vals.iter().map(|v| v.1).sum::<f64>() / n;
            let cross: f64 = vals.iter().map(|v| (v.0 - ma) * (v.1 - mb)).sum();
            let va: f64 = vals.iter().map(|v| (v.0 - ma).powi(2)).sum();
            let vb: f64 = vals.iter().map(|v| (v.1 - mb).powi(2)).sum();
            total += cross * cross / (va * vb + LCC_EPS);
        }
    }
    total / (h * w) as f64
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn graph_scalar(
    inputs: &[Tensor],
    f: impl Fn(&mut Graph, &[Var]) -> deco_core::Result<Var>,
) -> Tensor {
    let mut g = Graph::new();
    let v: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &v).unwrap();
    g.value(out).clone()
}

fn criterion_oracles() -> Outcome {
    let mut worst = [0.0f64; 5];
    for seed in 0..20u64 {
        let mut r = rng(2000 + seed);
        let (h, w) = (r.gen_range(5..=8), r.gen_range(5..=8));
        let a = randn(&mut r, &[1, 1, h, w]);
        let b = a.add(&randn(&mut r, &[1, 1, h, w]).scale(0.5)).unwrap();
        for win in [3usize, 5] {
            let got = graph_scalar(&[a.clone(), b.clone()], |g, v| lcc(g, v[0], v[1], win))
                .item()
                .unwrap();
            worst[0] = worst[0].max(rel(got, brute_lcc(a.data(), b.data(), h, w, win)));
        }

        let v = randn(&mut r, &[1, 2, h, w]);
        let d = graph_scalar(&[v.clone()], |g, x| finite_diff(g, x[0]));
        let mut sq = 0.0;
        for c in 0..2 {
            let p = &v.data()[c * h * w..(c + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let dy = if y + 1 < h {
                        p[(y + 1) * w + x] - p[y * w + x]
                    } else {
                        0.0
                    };
                    let dx = if x + 1 < w {
                        p[y * w + x + 1] - p[y * w + x]
                    } else {
                        0.0
                    };
                    worst[1] = worst[1]
                        .max((d.data()[c * h * w + y * w + x] - dy).abs())
                        .max((d.data()[(2 + c) * h * w + y * w + x] - dx).abs());
                    sq += dy * dy + dx * dx;
                }
            }
        }
        let smooth = graph_scalar(&[v.clone()], |g, x| smoothness_loss(g, x[0]))
            .item()
            .unwrap();
        worst[2] = worst[2].max(rel(smooth, sq / (4 * h * w) as f64));

        let e = randn(&mut r, &[2, h, w]);
        let o = randn(&mut r, &[2, h, w]);
        let mut s = 0.0;
        for i in 0..h * w {
            let ddy = e.data()[i] - o.data()[i];
            let ddx = e.data()[h * w + i] - o.data()[h * w + i];
            s += (ddy * ddy + ddx * ddx).sqrt();
        }
        let got = endpoint_error(
            &DisplacementField::from_tensor(e).unwrap(),
            &DisplacementField::from_tensor(o).unwrap(),
        )
        .unwrap();
        worst[3] = worst[3].max(rel(got, s / (h * w) as f64));

        let p0 = randn(&mut r, &[3, 4]);
        let grad = randn(&mut r, &[3, 4]);
        let mut ps = ParamSet::default();
        ps.push("w", p0.clone());
        let lr = 5e-4;
        let mut st = AdamState::new(&ps, lr);
        adam_update(&mut st, &mut ps, std::slice::from_ref(&grad)).unwrap();
        for i in 0..12 {
            let gi = grad.data()[i];
            let m = (1.0 - 0.9) * gi;
            let v2 = (1.0 - 0.999) * gi * gi;
            let mh = m / (1.0 - 0.9);
            let vh = v2 / (1.0 - 0.999);
            let want = p0.data()[i] - lr * mh / (vh.sqrt() + 1e-8);
            worst[4] = worst[4].max((ps.tensors()[0].data()[i] - want).abs());
        }
    }
    let names = ["lcc", "finite_diff", "smoothness", "endpoint_error", "adam"];
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(worst.iter().all(|&e| e <= 1e-10), detail)
}

// ---------------------------------------------------------------- 4

fn criterion_noise() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let img = make_phantom(seed, 64).unwrap();
        let x = Tensor::complex_from_planes(&[64, 64], img.data(), &vec![0.0; 64 * 64]).unwrap();
        let mask = make_cartesian_mask(64, 64, 3.0, 4, seed).unwrap();
        let clean = MeasurementModel::new(mask.clone()).forward(&x).unwrap();
        let noisy = add_noise(&clean, &mask, 40.0, seed + 77).unwrap();
        worst = worst.max((measured_snr_db(&clean, &noisy).unwrap() - 40.0).abs());
    }
    check(
        worst <= 0.5,
        format!("max |measured - 40 dB| = {worst:.3} dB over 50 pairs"),
    )
}

// ---------------------------------------------------------------- 5, 6, 8

struct Trend {
    means: Vec<(String, f64)>,
    epe: Option<(f64, f64)>,
    tv_secs: f64,
    total_secs: f64,
}

impl Trend {
    fn mean(&self, m: Method) -> f64 {
        self.means
            .iter()
            .find(|(n, _)| n == m.name())
            .map(|p| p.1)
            .unwrap_or(f64::NAN)
    }
}

fn run_trend() -> Result<Trend, String> {
    let overrides: Vec<String> = TREND_OVERRIDES.iter().map(|s| s.to_string()).collect();
    let cfg = RunConfig::resolve(None, &overrides).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let ds = Dataset::synthesize(&cfg.dataset_spec()).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    let mut tv_secs = 0.0;
    let mut epe = None;
    for m in Method::ALL {
        let t = Instant::now();
        let o = run_methods(&ds, &cfg, &[m], None).map_err(|e| e.to_string())?;
        if m == Method::Tv {
            tv_secs = t.elapsed().as_secs_f64();
        }
        if o.endpoint_error.is_some() {
            epe = o.endpoint_error;
        }
        rows.extend(o.rows);
    }
    let means = summarize(&rows)
        .into_iter()
        .map(|s| (s.method, s.psnr_mean))
        .collect();
    Ok(Trend {
        means,
        epe,
        tv_secs,
        total_secs: start.elapsed().as_secs_f64(),
    })
}

fn criterion_baseline(t: &Trend) -> Outcome {
    let (zf, tv) = (t.mean(Method::ZeroFilled), t.mean(Method::Tv));
    check(
        zf + 3.0 <= tv && t.tv_secs < 600.0,
        format!(
            "zero_filled {zf:.2} dB, tv {tv:.2} dB (gap {:.2} dB, need >= 3), tv time {:.0}s",
            tv - zf,
            t.tv_secs
        ),
    )
}

fn criterion_ablation(t: &Trend) -> Outcome {
    let d = t.mean(Method::Decolearn);
    let u = t.mean(Method::A2aUnregistered);
    let p = t.mean(Method::A2aPretrainedReg);
    let o = t.mean(Method::A2aOracle);
    let ok = d >= u + 0.5 && d >= p && d >= o - 0.5 && t.total_secs < 45.0 * 60.0;
    check(
        ok,
        format!(
            "decolearn {d:.2}, unregistered {u:.2}, pretrained_reg {p:.2}, oracle {o:.2} dB; {:.0}s total",
            t.total_secs
        ),
    )
}

fn criterion_registration(t: &Trend) -> Outcome {
    match t.epe {
        Some((e, z)) => check(
            e < z,
            format!("trained field EPE {e:.4} px vs zero field {z:.4} px on 20 test pairs"),
        ),
        None => Err("no endpoint error recorded".into()),
    }
}

// ---------------------------------------------------------------- 7

fn criterion_warm_start() -> Outcome {
    let overrides: Vec<String> = TREND_OVERRIDES
        .iter()
        .map(|s| s.to_string())
        .chain(["dataset.n_train=4", "dataset.n_val=1", "dataset.n_test=1"].map(String::from))
        .collect();
    let cfg = RunConfig::resolve(None, &overrides).map_err(|e| e.to_string())?;
    let ds = Dataset::synthesize(&cfg.dataset_spec()).map_err(|e| e.to_string())?;
    let step = |mode: TrainMode| -> deco_core::Result<ModelState> {
        let tc = cfg.train_config(mode)?;
        let mut st = ModelState::init(&tc);
        let prepared = prepare(&ds.train, &tc, None)?;
        let batch: Vec<&PreparedPair> = prepared.iter().collect();
        train_step(&mut st, &batch, &tc)?;
        Ok(st)
    };
    let a = step(TrainMode::Decolearn).map_err(|e| e.to_string())?;
    let b = step(TrainMode::A2aUnregistered).map_err(|e| e.to_string())?;
    let same = |x: &[Tensor], y: &[Tensor]| {
        x.iter().zip(y).all(|(p, q)| {
            p.data()
                .iter()
                .zip(q.data())
                .all(|(u, v)| u.to_bits() == v.to_bits())
        })
    };
    let theta = same(a.recon.params.tensors(), b.recon.params.tensors());
    let moments = same(&a.adam_rec.m, &b.adam_rec.m) && same(&a.adam_rec.v, &b.adam_rec.v);
    let moved = a.recon.params != ReconNet::init(cfg.recon(), cfg.train.seed * 2 + 1).params;
    check(
        theta && moments && moved,
        format!("theta bit-identical: {theta}, Adam moments bit-identical: {moments}, update nonzero: {moved}"),
    )
}

// ---------------------------------------------------------------- 9

fn run_from_manifest(manifest: &Path, out: &Path) -> deco_core::Result<()> {
    let text = fs::read_to_string(manifest)?;
    let cfg = RunConfig::resolve(Some(&text), &[])?;
    let ds = Dataset::synthesize(&cfg.dataset_spec())?;
    let tc = cfg.train_config(TrainMode::Decolearn)?;
    let outcome = train(
        &ds.train,
        &ds.val,
        &tc,
        ModelState::init(&tc),
        Some(&out.join("ckpt")),
    )?;
    write_metrics_csv(fs::File::create(out.join("train.csv"))?, &outcome.metrics)?;
    let rows = run_methods(&ds, &cfg, &[Method::ZeroFilled, Method::Tv], None)?.rows;
    let mut all = rows;
    all.extend(deco_core::experiment::evaluate_network(
        &outcome.state.recon,
        &ds.test,
        Method::Decolearn.name(),
        ds.spec.acceleration,
        ds.spec.field.sigma,
    )?);
    write_rows(fs::File::create(out.join("metrics.csv"))?, &all)?;
    Ok(())
}

fn without_wall_clock(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

fn criterion_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = RunConfig::resolve(
        None,
        &[
            "dataset.n_train=6",
            "dataset.n_val=2",
            "dataset.n_test=3",
            "dataset.size=32",
            "model.recon_blocks=1",
            "model.recon_width=8",
            "model.reg_levels=2",
            "model.reg_width=4",
            "train.iterations=5",
            "train.batch_size=2",
            "tv.tau=0.005",
            "tv.iterations=30",
        ]
        .map(String::from),
    )
    .map_err(|e| e.to_string())?;
    let manifest = tmp.path().join("run.toml");
    fs::write(&manifest, cfg.to_toml().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        fs::create_dir_all(dir).map_err(|e| e.to_string())?;
        run_from_manifest(&manifest, dir).map_err(|e| e.to_string())?;
    }
    let read = |p: &Path| fs::read_to_string(p).unwrap_or_default();
    let eval_same = read(&a.join("metrics.csv")) == read(&b.join("metrics.csv"));
    let train_same = without_wall_clock(&read(&a.join("train.csv")))
        == without_wall_clock(&read(&b.join("train.csv")));

    // Deployment: corrupt every registration tensor, then reconstruct.
    let ckpt = a.join("ckpt/final");
    let ds = Dataset::synthesize(&cfg.dataset_spec()).map_err(|e| e.to_string())?;
    let recon_all = |dir: &Path| -> deco_core::Result<Vec<Tensor>> {
        let net = load_reconstruction(dir)?;
        let mut out = Vec::new();
        for p in &ds.test {
            out.push(reconstruct_pair_side(&net, p, false)?);
            out.push(reconstruct_pair_side(&net, p, true)?);
        }
        Ok(out)
    };
    let before = recon_all(&ckpt).map_err(|e| e.to_string())?;
    for entry in fs::read_dir(ckpt.join("phi")).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        fs::write(&path, b"corrupted").map_err(|e| e.to_string())?;
    }
    let phi_broken = load_checkpoint(&ckpt).is_err();
    let after = recon_all(&ckpt).map_err(|e| e.to_string())?;
    let invariant = before == after;
    check(
        eval_same && train_same && phi_broken && invariant,
        format!(
            "metrics CSV identical: {eval_same}, training CSV identical (wall_ms excluded): {train_same}, \
             reconstruction unchanged after corrupting phi: {invariant} (full load rejects it: {phi_broken})"
        ),
    )
}

// ---------------------------------------------------------------- 10

fn criterion_metrics() -> Outcome {
    let t = |shape: &[usize], v: Vec<f64>| Tensor::from_vec(shape, v).unwrap();
    let mut fails = Vec::new();
    let mut expect = |name: &str, got: f64, want: f64| {
        if got != want && (got - want).abs() > 1e-12 * want.abs().max(1.0) {
            fails.push(format!("{name}: got {got}, want {want}"));
        }
    };
    let ones = t(&[2, 2], vec![1.0; 4]);
    expect("psnr identity", psnr(&ones, &ones).unwrap(), PSNR_CAP_DB);
    expect(
        "psnr zeros vs ones",
        psnr(&t(&[2, 2], vec![0.0; 4]), &ones).unwrap(),
        0.0,
    );
    expect(
        "psnr one-of-four",
        psnr(&t(&[2, 2], vec![1.0, 1.0, 1.0, 0.0]), &ones).unwrap(),
        10.0 * 4f64.log10(),
    );
    let r = t(&[1, 2], vec![0.0, 2.0]);
    expect(
        "psnr peak 2",
        psnr(&t(&[1, 2], vec![0.0, 1.0]), &r).unwrap(),
        10.0 * (4.0f64 / 0.5).log10(),
    );
    let cx = Tensor::complex_from_planes(&[1, 2], &[0.0, 0.6], &[0.0, 0.8]).unwrap();
    expect(
        "psnr complex magnitude",
        psnr(&t(&[1, 2], vec![0.0, 0.9]), &cx).unwrap(),
        10.0 * 200f64.log10(),
    );

    let img: Vec<f64> = (0..256).map(|i| ((i * 37 % 101) as f64) / 100.0).collect();
    let x = t(&[16, 16], img);
    expect("ssim identity", ssim(&x, &x).unwrap(), 1.0);
    let a = t(&[12, 12], vec![0.5; 144]);
    let b = t(&[12, 12], vec![1.0; 144]);
    // Constant reference: dynamic range falls back to 1, structure term is 1.
    let c1 = 0.01f64 * 0.01;
    expect(
        "ssim constants",
        ssim(&a, &b).unwrap(),
        (2.0 * 0.5 + c1) / (0.25 + 1.0 + c1),
    );
    let psnr_err = psnr(&a, &t(&[12, 12], vec![0.0; 144])).is_err();
    if !psnr_err {
        fails.push("psnr against all-zero reference must error".into());
    }
    check(
        fails.is_empty(),
        if fails.is_empty() {
            "8 fixed cases exact".into()
        } else {
            fails.join("; ")
        },
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        match &o {
            Ok(d) => println!("criterion {n:>2} {name:<22} PASS  {d}"),
            Err(d) => println!("criterion {n:>2} {name:<22} FAIL  {d}"),
        }
        results.push((n, name, o));
    };
    report(1, "autodiff gradients", criterion_autodiff());
    report(2, "operator algebra", criterion_operators());
    report(3, "oracle equivalence", criterion_oracles());
    report(4, "noise calibration", criterion_noise());
    report(7, "warm-start", criterion_warm_start());
    report(9, "determinism/deploy", criterion_determinism());
    report(10, "metric self-tests", criterion_metrics());
    match run_trend() {
        Ok(t) => {
            report(5, "baseline trend", criterion_baseline(&t));
            report(6, "ablation trend", criterion_ablation(&t));
            report(8, "registration sanity", criterion_registration(&t));
        }
        Err(e) => {
            for (n, name) in [
                (5, "baseline trend"),
                (6, "ablation trend"),
                (8, "registration sanity"),
            ] {
                report(n, name, Err(format!("trend run failed: {e}")));
            }
        }
    }
    let failed: Vec<u32> = results
        .iter()
        .filter(|r| r.2.is_err())
        .map(|r| r.0)
        .collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
