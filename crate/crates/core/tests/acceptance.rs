//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! criterion fails.
//!
//! Criteria 7 and 8 need the full synthetic benchmark (80 cases at 256 px,
//! 20k diffusion iterations, three seeds). By default they run a reduced
//! pipeline smoke and report SKIP; pass `--full` (or set
//! `MLSHIFT_FULL_ACCEPTANCE=1`) to run them at full scale.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use mlshift::cli::{resolve_config, AppConfig};
use mlshift::data::{Dataset, ImageSlice};
use mlshift::deform::{integrate, max_displacement, warp_array, DeformationField, VelocityField};
use mlshift::diffusion::{
    forward_noise_array, generate_counterfactual, DiffusionModelPair, DiffusionTrainer, GuidanceConfig,
    NoisePredictor, NoiseSchedule, NoiseUNet, ScheduleConfig, UNetConfig,
};
use mlshift::evaluation::evaluate;
use mlshift::losses::{pure, tensor};
use mlshift::synthetic::generate_dataset;
use mlshift::training::{infer_volume, pretrain_diffusion, split_holdout, train_deformation};

// Pinned tolerances.
const INTEGRATION_MAX_ERR_PX: f64 = 1e-2;
const INTEGRATION_BUDGET_S: f64 = 30.0;
const ROUND_TRIP_MEAN_ERR: f64 = 1e-2;
const LOSS_ORACLE_TOL: f64 = 1e-9;
const GRAD_REL_TOL: f64 = 1e-4;
const AFFINE_TOL: f64 = 1e-9;
const MC_SIGMAS: f64 = 3.0;
const MC_BUDGET_S: f64 = 60.0;
const BENCH_MAE_PX: f64 = 2.0;

// Field generation for criteria 1 and 2.
const N_FIELDS: usize = 50;
const FIELD_SIZE: usize = 64;
const FIELD_SIGMA_PX: f64 = 10.0;
const FIELD_MAX_PX: f64 = 10.0;
/// Pixels closer than this to the border are excluded from criteria 1 and 2:
/// trajectories there leave the grid, where reads are clamped to the border.
const INTERIOR_MARGIN: usize = 12;

enum Status {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    status: Status,
    detail: String,
}

fn verdict(ok: bool, detail: String) -> Outcome {
    Outcome {
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn fields() -> Vec<Array3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..N_FIELDS)
        .map(|_| common::smooth_field(&mut rng, FIELD_SIZE, FIELD_SIZE, FIELD_SIGMA_PX, FIELD_MAX_PX))
        .collect()
}

fn criterion_1() -> Outcome {
    let fields = fields();
    let started = Instant::now();
    let mut worst = 0.0f64;
    for v in &fields {
        let ss = integrate(&VelocityField(v.clone()), 7).0;
        let euler = common::euler_integrate(v, 128);
        let (m, n) = (INTERIOR_MARGIN, FIELD_SIZE - INTERIOR_MARGIN);
        for k in 0..2 {
            for r in m..n {
                for c in m..n {
                    worst = worst.max((ss[[k, r, c]] - euler[[k, r, c]]).abs());
                }
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        worst < INTEGRATION_MAX_ERR_PX && secs < INTEGRATION_BUDGET_S,
        format!("max |ss - euler| = {worst:.2e} px (< {INTEGRATION_MAX_ERR_PX:e}) over {N_FIELDS} fields in {secs:.1} s"),
    )
}

fn criterion_2() -> Outcome {
    let img = common::smooth_image(FIELD_SIZE, FIELD_SIZE);
    let identity = warp_array(&img, &DeformationField::zeros(FIELD_SIZE, FIELD_SIZE)).unwrap();
    let exact = identity.iter().zip(img.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    let (m, n) = (INTERIOR_MARGIN, FIELD_SIZE - INTERIOR_MARGIN);
    let (mut worst, mut worst_full) = (0.0f64, 0.0f64);
    for v in fields() {
        let fwd = integrate(&VelocityField(v.clone()), 7);
        let back = integrate(&VelocityField(-&v), 7);
        let there = warp_array(&img, &fwd).unwrap();
        let err = (&warp_array(&there, &back).unwrap() - &img).mapv(f64::abs);
        // Content pushed off the grid by the first warp is gone, so only the
        // interior can round-trip.
        worst = worst.max(err.slice(ndarray::s![m..n, m..n]).mean().unwrap());
        worst_full = worst_full.max(err.mean().unwrap());
    }
    verdict(
        exact && worst < ROUND_TRIP_MEAN_ERR,
        format!(
            "zero warp bit-exact: {exact}; worst interior round-trip mean |err| = {worst:.2e} (< {ROUND_TRIP_MEAN_ERR:e}), full grid {worst_full:.2e}"
        ),
    )
}

fn oracle_huber(y: [f64; 2], yh: [f64; 2], c: f64) -> f64 {
    (0..2)
        .map(|k| {
            let d = (y[k] - yh[k]).abs();
            if d >= c {
                d
            } else {
                (d * d + c * c) / (2.0 * c)
            }
        })
        .sum()
}

fn oracle_smooth(f: &Array3<f64>) -> f64 {
    let (_, h, w) = f.dim();
    let mut s = 0.0;
    for k in 0..2 {
        for r in 0..h {
            for c in 0..w {
                let x = f[[k, r, c]];
                if r + 1 < h {
                    s += (f[[k, r + 1, c]] - x).powi(2);
                }
                if c + 1 < w {
                    s += (f[[k, r, c + 1]] - x).powi(2);
                }
            }
        }
    }
    s
}

fn oracle_ceiling(f: &Array3<f64>, delta: f64) -> f64 {
    let (_, h, w) = f.dim();
    let mut s = 0.0;
    for r in 0..h {
        for c in 0..w {
            let m = (f[[0, r, c]].powi(2) + f[[1, r, c]].powi(2)).sqrt();
            if m > delta {
                s += m - delta;
            }
        }
    }
    s
}

fn oracle_warp_mse(x0: &Array2<f64>, x1: &Array2<f64>, f: &Array3<f64>) -> f64 {
    let warped = common::warp_ref(x1, f);
    let n = x0.len() as f64;
    warped.iter().zip(x0.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n
}

fn random_field<R: Rng>(rng: &mut R, h: usize, w: usize, scale: f64) -> Array3<f64> {
    Array3::from_shape_simple_fn((2, h, w), || scale * rng.sample::<f64, _>(StandardNormal))
}

fn random_image<R: Rng>(rng: &mut R, h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((h, w), || rng.random_range(-1.0..1.0))
}

fn t4(a: &Array3<f64>) -> Tensor {
    let (c, h, w) = a.dim();
    Tensor::from_vec(a.iter().copied().collect::<Vec<_>>(), (1, c, h, w), &Device::Cpu).unwrap()
}

fn t_img(a: &Array2<f64>) -> Tensor {
    let (h, w) = a.dim();
    Tensor::from_vec(a.iter().copied().collect::<Vec<_>>(), (1, 1, h, w), &Device::Cpu).unwrap()
}

fn sum_scalar(t: &Tensor) -> f64 {
    t.sum_all().unwrap().to_scalar::<f64>().unwrap()
}

/// Central differences of `f` at `x`, one coordinate at a time.
fn finite_diff(x: &Array3<f64>, f: impl Fn(&Array3<f64>) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let mut x = x.clone();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.as_slice().unwrap()[i];
        x.as_slice_mut().unwrap()[i] = orig + h;
        let up = f(&x);
        x.as_slice_mut().unwrap()[i] = orig - h;
        let down = f(&x);
        x.as_slice_mut().unwrap()[i] = orig;
        g.push((up - down) / (2.0 * h));
    }
    g
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    num / den
}

fn autograd(phi: &Array3<f64>, f: impl Fn(&Tensor) -> Tensor) -> Vec<f64> {
    let var = Var::from_tensor(&t4(phi)).unwrap();
    let loss = f(var.as_tensor()).sum_all().unwrap();
    let grads = loss.backward().unwrap();
    grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_val = 0.0f64;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(2..10), rng.random_range(2..10));
        let phi = random_field(&mut rng, h, w, 2.0);
        let df = DeformationField(phi.clone());
        let delta = rng.random_range(0.0..3.0);
        let c = rng.random_range(0.5..4.0);
        let (x0, x1) = (random_image(&mut rng, h, w), random_image(&mut rng, h, w));
        let y = [rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0)];
        let yh = [rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0)];

        let t_huber = sum_scalar(
            &tensor::huber(
                &Tensor::new(&[y], &Device::Cpu).unwrap(),
                &Tensor::new(&[yh], &Device::Cpu).unwrap(),
                c,
            )
            .unwrap(),
        );
        let pairs = [
            (pure::huber(y, yh, c), oracle_huber(y, yh, c)),
            (t_huber, oracle_huber(y, yh, c)),
            (pure::smoothness(&df), oracle_smooth(&phi)),
            (sum_scalar(&tensor::smoothness(&t4(&phi)).unwrap()), oracle_smooth(&phi)),
            (pure::ceiling(&df, delta).unwrap(), oracle_ceiling(&phi, delta)),
            (sum_scalar(&tensor::ceiling(&t4(&phi), &[delta]).unwrap()), oracle_ceiling(&phi, delta)),
            (pure::warp_consistency_array(&x0, &x1, &df).unwrap(), oracle_warp_mse(&x0, &x1, &phi)),
            (
                sum_scalar(&tensor::warp_consistency(&t_img(&x0), &t_img(&x1), &t4(&phi)).unwrap()),
                oracle_warp_mse(&x0, &x1, &phi),
            ),
        ];
        for (got, want) in pairs {
            worst_val = worst_val.max((got - want).abs());
        }
    }

    let mut worst_grad = 0.0f64;
    for _ in 0..20 {
        let phi = random_field(&mut rng, 8, 8, 2.0);
        let delta = rng.random_range(0.5..3.0);
        let (x0, x1) = (random_image(&mut rng, 8, 8), random_image(&mut rng, 8, 8));
        let checks = [
            rel_err(
                &autograd(&phi, |p| tensor::smoothness(p).unwrap()),
                &finite_diff(&phi, oracle_smooth),
            ),
            rel_err(
                &autograd(&phi, |p| tensor::ceiling(p, &[delta]).unwrap()),
                &finite_diff(&phi, |f| oracle_ceiling(f, delta)),
            ),
            rel_err(
                &autograd(&phi, |p| tensor::warp_consistency(&t_img(&x0), &t_img(&x1), p).unwrap()),
                &finite_diff(&phi, |f| oracle_warp_mse(&x0, &x1, f)),
            ),
        ];
        // Huber: gradient with respect to the predicted displacement.
        let c = rng.random_range(0.5..4.0);
        let y = [rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0)];
        let yh = Array3::from_shape_fn((1, 1, 2), |(_, _, k)| y[k] + rng.random_range(-2.0 * c..2.0 * c));
        let var = Var::from_tensor(&Tensor::from_vec(yh.iter().copied().collect(), (1, 2), &Device::Cpu).unwrap()).unwrap();
        let loss = tensor::huber(&Tensor::new(&[y], &Device::Cpu).unwrap(), var.as_tensor(), c).unwrap();
        let g = loss.sum_all().unwrap().backward().unwrap();
        let an = g.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let fd = finite_diff(&yh, |p| oracle_huber(y, [p[[0, 0, 0]], p[[0, 0, 1]]], c));
        for e in checks.into_iter().chain([rel_err(&an, &fd)]) {
            worst_grad = worst_grad.max(e);
        }
    }
    verdict(
        worst_val < LOSS_ORACLE_TOL && worst_grad < GRAD_REL_TOL,
        format!(
            "worst |loss - oracle| = {worst_val:.1e} (< {LOSS_ORACLE_TOL:e}); worst gradient rel. error = {worst_grad:.1e} (< {GRAD_REL_TOL:e})"
        ),
    )
}

fn tiny_unet_config() -> UNetConfig {
    UNetConfig {
        base_channels: 8,
        channel_mults: vec![1, 2],
        res_blocks: 1,
        attention_resolutions: vec![8],
    }
}

/// Two small noise models nudged away from their zero-output init.
fn tiny_pair() -> DiffusionModelPair<NoiseUNet> {
    let sched = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
    let mk = |seed: u64| {
        let model = NoiseUNet::new(tiny_unet_config(), seed, &Device::Cpu).unwrap();
        let opt = AdamW::new(
            model.varmap().all_vars(),
            ParamsAdamW {
                lr: 1e-2,
                ..Default::default()
            },
        )
        .unwrap();
        let mut trainer = DiffusionTrainer::new(&model, opt, ChaCha8Rng::seed_from_u64(seed), sched.clone());
        let x0 = Tensor::from_vec(
            common::smooth_image(16, 16).iter().map(|&v| v as f32).collect::<Vec<_>>(),
            (1, 1, 16, 16),
            &Device::Cpu,
        )
        .unwrap();
        for _ in 0..3 {
            trainer.step(&x0).unwrap();
        }
        drop(trainer);
        model
    };
    DiffusionModelPair::new(mk(1), mk(2))
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().map(|v| v.to_bits()).collect()
}

fn criterion_4() -> Outcome {
    let pair = tiny_pair();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise: Vec<f64> = (0..2 * 256).map(|_| rng.sample(StandardNormal)).collect();
    let x = Tensor::from_vec(noise, (2, 1, 16, 16), &Device::Cpu).unwrap();
    let t = [37, 640];
    let c = pair.model_c.predict_noise(&x, &t).unwrap().to_dtype(DType::F64).unwrap();
    let u = pair.model_u.predict_noise(&x, &t).unwrap().to_dtype(DType::F64).unwrap();
    let nontrivial = sum_scalar(&c.abs().unwrap()) > 0.0 && sum_scalar(&(&u - &c).unwrap().abs().unwrap()) > 0.0;
    let exact_c = bits(&pair.guided(&x, &t, 1.0).unwrap()) == bits(&c);
    let exact_u = bits(&pair.guided(&x, &t, 0.0).unwrap()) == bits(&u);
    let mut worst = 0.0f64;
    for gamma in [-1.5, 0.25, 0.5, 2.0, 3.7] {
        let g = pair.guided(&x, &t, gamma).unwrap();
        let expect = ((&c * gamma).unwrap() + (&u * (1.0 - gamma)).unwrap()).unwrap();
        let d = (g - expect).unwrap().abs().unwrap().max_keepdim(0).unwrap().flatten_all().unwrap();
        worst = worst.max(d.to_vec1::<f64>().unwrap().into_iter().fold(0.0, f64::max));
    }
    verdict(
        nontrivial && exact_c && exact_u && worst < AFFINE_TOL,
        format!("gamma=1 bit-exact: {exact_c}; gamma=0 bit-exact: {exact_u}; affinity error {worst:.1e} (< {AFFINE_TOL:e})"),
    )
}

fn criterion_5() -> Outcome {
    let started = Instant::now();
    let cfg = ScheduleConfig::default();
    let sched = NoiseSchedule::new(&cfg).unwrap();
    // Independent cumulative product of the linear schedule.
    let alpha_bar = |t: usize| {
        (0..=t)
            .map(|s| 1.0 - (cfg.beta_start + (cfg.beta_end - cfg.beta_start) * s as f64 / (cfg.t_train - 1) as f64))
            .product::<f64>()
    };
    let x0 = Array2::from_shape_vec((2, 2), vec![-1.0, -0.3, 0.4, 1.0]).unwrap();
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for t in [1, 500, 999] {
        let ab: f64 = alpha_bar(t);
        let mut sum = Array2::<f64>::zeros((2, 2));
        let mut sq = Array2::<f64>::zeros((2, 2));
        for _ in 0..n {
            let eps = Array2::from_shape_simple_fn((2, 2), || rng.sample::<f64, _>(StandardNormal));
            let xt = forward_noise_array(&x0, t, &eps, &sched).unwrap();
            sum += &xt;
            sq += &xt.mapv(|v| v * v);
        }
        let var_true = 1.0 - ab;
        for (i, &x) in x0.iter().enumerate() {
            let mean = sum.as_slice().unwrap()[i] / n as f64;
            let var = (sq.as_slice().unwrap()[i] - n as f64 * mean * mean) / (n - 1) as f64;
            let se_mean = (var_true / n as f64).sqrt();
            let se_var = var_true * (2.0 / (n - 1) as f64).sqrt();
            worst = worst
                .max((mean - ab.sqrt() * x).abs() / se_mean)
                .max((var - var_true).abs() / se_var);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        worst <= MC_SIGMAS && secs < MC_BUDGET_S,
        format!("worst deviation {worst:.2} SE (<= {MC_SIGMAS}) at t in {{1, 500, 999}}, 10000 draws, {secs:.1} s"),
    )
}

fn criterion_6() -> Outcome {
    let pair = tiny_pair();
    let sched = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
    let slice = ImageSlice::new(common::smooth_image(16, 16), 0.86, 0).unwrap();
    let cfg = GuidanceConfig {
        gamma: 2.0,
        ddim_steps: 20,
        start_step: 6,
    };
    let run = |seed: u64, cfg: &GuidanceConfig| {
        generate_counterfactual(&pair, &slice, cfg, &sched, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    };
    let bit_eq = |a: &ImageSlice, b: &ImageSlice| a.pixels.iter().zip(b.pixels.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
    let (a, b, other) = (run(9, &cfg), run(9, &cfg), run(10, &cfg));
    let same_seed = bit_eq(&a, &b);
    let edited = !bit_eq(&a, &slice) && !bit_eq(&a, &other);
    let identity = bit_eq(
        &run(
            9,
            &GuidanceConfig {
                start_step: 0,
                ..cfg.clone()
            },
        ),
        &slice,
    );
    verdict(
        same_seed && identity && edited,
        format!("same seed bit-identical: {same_seed}; start_step=0 returns input exactly: {identity}; edits non-trivial: {edited}"),
    )
}

fn smoke_config_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn dataset_of(cfg: &AppConfig) -> Dataset {
    Dataset::new(generate_dataset(&cfg.phantom).unwrap().into_iter().map(|c| c.volume).collect())
}

/// Volume-wise MAE in pixels for the semi-supervised, supervised-only and
/// image-only variants, all sharing one pair of noise models.
fn benchmark(cfg: &AppConfig) -> [f64; 3] {
    let all = dataset_of(cfg);
    let (train, test) = split_holdout(&all, cfg.test_fraction).unwrap();
    let pair = pretrain_diffusion(&train, &cfg.train, None).unwrap().pair;
    let px = cfg.phantom.pixel_size_mm;
    let mae = |tc: &mlshift::training::TrainConfig| {
        let net = train_deformation(&train, &pair, tc, None).unwrap().net;
        let preds: Vec<_> = test.cases.iter().map(|v| infer_volume(v, &net, &pair, tc).unwrap()).collect();
        evaluate(&preds, &test).unwrap().volume_mae_mm / px
    };
    let semi = cfg.train.clone();
    let mut supervised = semi.clone();
    supervised.deformation.unlabeled_fraction = 0.0;
    let mut image_only = semi.clone();
    image_only.deformation.use_representation = false;
    [mae(&semi), mae(&supervised), mae(&image_only)]
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn full_runs() -> Vec<[f64; 3]> {
    (0..3u64)
        .map(|seed| {
            let cfg = resolve_config(
                None,
                Some(seed),
                &[
                    "diffusion.iterations=20000".into(),
                    "diffusion.checkpoint_every=0".into(),
                    "deformation.epochs=30".into(),
                ],
            )
            .unwrap();
            assert_eq!(cfg.phantom.n_cases, 80);
            assert_eq!(cfg.phantom.positive_count(), 60);
            benchmark(&cfg)
        })
        .collect()
}

fn smoke_runs() -> [f64; 3] {
    let cfg = resolve_config(Some(&smoke_config_path()), Some(0), &[]).unwrap();
    benchmark(&cfg)
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let base = [
        "--config".to_string(),
        smoke_config_path().display().to_string(),
        "--output-dir".into(),
        dir.path().display().to_string(),
    ];
    let gen = mlshift::cli::run(["gen-data".to_string()].into_iter().chain(base.clone()));
    let code = mlshift::cli::run(
        ["ablate".to_string(), "--sweep".into(), "noise-level".into()]
            .into_iter()
            .chain(base),
    );
    let csv = std::fs::read_to_string(dir.path().join("ablate/noise-level.csv")).unwrap_or_default();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    let ts: Vec<&str> = rows.iter().filter_map(|r| r.split(',').next()).collect();
    let finite = rows
        .iter()
        .all(|r| r.split(',').skip(1).all(|v| v.parse::<f64>().is_ok_and(f64::is_finite)));
    verdict(
        gen == 0 && code == 0 && ts == ["200", "400", "600", "800"] && finite,
        format!("exit codes {gen}/{code}; rows for t = {ts:?}"),
    )
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut mismatches = 0;
    for i in 0..1000 {
        let (h, w) = (rng.random_range(1..24), rng.random_range(1..24));
        let mut f = match i % 4 {
            0 => Array3::zeros((2, h, w)),
            _ => random_field(&mut rng, h, w, 5.0),
        };
        if i % 4 == 1 && h * w > 1 {
            // Plant a tie with an earlier pixel.
            let (r, c) = (rng.random_range(0..h), rng.random_range(0..w));
            let (r2, c2) = (h - 1, w - 1);
            let v = [f[[0, r, c]], f[[1, r, c]]];
            f[[0, r2, c2]] = -v[0];
            f[[1, r2, c2]] = v[1];
        }
        let mut best = (0.0f64, (0usize, 0usize));
        for r in 0..h {
            for c in 0..w {
                let m = f[[0, r, c]].hypot(f[[1, r, c]]);
                if m > best.0 {
                    best = (m, (r, c));
                }
            }
        }
        let got = max_displacement(&DeformationField(f));
        if got.0.to_bits() != best.0.to_bits() || got.1 != best.1 {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("{mismatches} mismatches against brute force on 1000 fields"))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        }
    }
}

fn main() {
    let full = std::env::args().any(|a| a == "--full") || std::env::var("MLSHIFT_FULL_ACCEPTANCE").is_ok_and(|v| v == "1");
    let mut results: Vec<(usize, Outcome)> = vec![
        (1, guarded(criterion_1)),
        (2, guarded(criterion_2)),
        (3, guarded(criterion_3)),
        (4, guarded(criterion_4)),
        (5, guarded(criterion_5)),
        (6, guarded(criterion_6)),
    ];

    if full {
        let started = Instant::now();
        match catch_unwind(full_runs) {
            Ok(runs) => {
                let hours = started.elapsed().as_secs_f64() / 3600.0;
                let semi = median(runs.iter().map(|r| r[0]).collect());
                let sup = median(runs.iter().map(|r| r[1]).collect());
                let img = median(runs.iter().map(|r| r[2]).collect());
                results.push((
                    7,
                    verdict(
                        semi <= BENCH_MAE_PX && semi < sup,
                        format!("median volume MAE semi {semi:.3} px (<= {BENCH_MAE_PX}), supervised-only {sup:.3} px; {hours:.2} h"),
                    ),
                ));
                results.push((
                    8,
                    verdict(semi <= img, format!("median volume MAE with representation {semi:.3} px, without {img:.3} px")),
                ));
            }
            Err(_) => {
                results.push((7, verdict(false, "full benchmark panicked".into())));
                results.push((8, verdict(false, "full benchmark panicked".into())));
            }
        }
    } else {
        let smoke = guarded(|| {
            let [semi, sup, img] = smoke_runs();
            let ok = [semi, sup, img].iter().all(|v| v.is_finite());
            verdict(ok, format!("reduced pipeline MAE semi {semi:.2} / supervised {sup:.2} / image-only {img:.2} px"))
        });
        for n in [7, 8] {
            let detail = format!(
                "full benchmark not run (overnight CPU budget; use --full); {}: {}",
                if matches!(smoke.status, Status::Pass) { "smoke ok" } else { "smoke FAILED" },
                smoke.detail
            );
            let status = if matches!(smoke.status, Status::Pass) { Status::Skip } else { Status::Fail };
            results.push((n, Outcome { status, detail }));
        }
    }

    results.push((9, guarded(criterion_9)));
    results.push((10, guarded(criterion_10)));

    let mut failed = 0;
    for (n, o) in &results {
        let tag = match o.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::Skip => "SKIP",
        };
        println!("criterion {n:>2}: {tag}  {}", o.detail);
    }
    println!("acceptance: {} criteria, {failed} failed", results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
