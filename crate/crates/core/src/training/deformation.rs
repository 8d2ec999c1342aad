//! Semi-supervised training of the deformation network.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::checkpoint::{save_deform_net, DEFORM};
use super::config::TrainConfig;
use crate::data::augment::{rotate_point, rotate_vector};
use crate::data::{random_angle, Dataset, ImageSlice, LandmarkAnnotation};
use crate::deform::{ops, DeformNet};
use crate::diffusion::{generate_counterfactual_batch, DiffusionModelPair, NoisePredictor, NoiseSchedule};
use crate::error::{ensure, Error, Result};
use crate::losses::{tensor as lt, total_loss, LossTerms};
use crate::nn::{self, TrainingMeta};

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub l_huber: f64,
    pub l_smooth: f64,
    pub l_mse: f64,
    pub l_ceil: f64,
    pub u: f64,
    pub total: f64,
}

pub const METRICS_HEADER: &str = "step,l_huber,l_smooth,l_mse,l_ceil,u,total";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.l_huber, self.l_smooth, self.l_mse, self.l_ceil, self.u, self.total
        )
    }
}

#[derive(Debug, Clone)]
struct LabeledItem<'a> {
    slice: &'a ImageSlice,
    annotations: &'a [LandmarkAnnotation],
}

#[derive(Debug, Clone)]
struct UnlabeledItem<'a> {
    slice: &'a ImageSlice,
    delta_px: f64,
}

/// Labeled slices of positive cases, and unannotated slices of a seeded
/// `unlabeled_fraction` share of positive cases.
fn build_pools<'a>(
    dataset: &'a Dataset,
    unlabeled_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<LabeledItem<'a>>, Vec<UnlabeledItem<'a>>)> {
    let positives: Vec<_> = dataset.positives().collect();
    let mut labeled = Vec::new();
    for v in &positives {
        for (idx, anns) in &v.annotations {
            if anns.is_empty() {
                continue;
            }
            let slice = v
                .slice(*idx)
                .ok_or_else(|| Error::Validation(format!("case {}: missing slice {idx}", v.case_id)))?;
            labeled.push(LabeledItem {
                slice,
                annotations: anns,
            });
        }
    }
    let n_use = (unlabeled_fraction * positives.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..positives.len()).collect();
    order.shuffle(rng);
    let mut chosen: Vec<usize> = order.into_iter().take(n_use).collect();
    chosen.sort_unstable();
    let mut unlabeled = Vec::new();
    for i in chosen {
        let v = positives[i];
        for s in &v.slices {
            if v.annotations.get(&s.slice_index).is_some_and(|a| !a.is_empty()) {
                continue;
            }
            ensure!(
                v.case_mls_mm.is_finite() && v.case_mls_mm > 0.0,
                "case {}: unlabeled positive slice {} needs a case-level shift for the ceiling term",
                v.case_id,
                s.slice_index
            );
            unlabeled.push(UnlabeledItem {
                slice: s,
                delta_px: v.case_mls_mm / s.pixel_size_mm,
            });
        }
    }
    Ok((labeled, unlabeled))
}

fn rotate_image(slice: &ImageSlice, angle: f64) -> ImageSlice {
    crate::data::augment_rotation(slice, None, angle).0
}

fn rotate_annotations(anns: &[LandmarkAnnotation], h: usize, w: usize, angle: f64) -> Vec<LandmarkAnnotation> {
    anns.iter()
        .filter_map(|a| {
            let out = LandmarkAnnotation {
                landmark: rotate_point(a.landmark, h, w, angle),
                displacement: rotate_vector(a.displacement, angle),
            };
            out.validate(h, w).ok().map(|_| out)
        })
        .collect()
}

/// Cycles through a shuffled index list, reshuffling at every wrap.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn noise_like(n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng, device: &Device) -> Result<Tensor> {
    let v: Vec<f32> = (0..n * h * w).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
    Ok(Tensor::from_vec(v, (n, 1, h, w), device)?)
}

/// Network input for a batch of images: the image alone or the image with
/// its score-difference map at per-item timesteps.
pub(crate) fn network_input<M: NoisePredictor>(
    pair: &DiffusionModelPair<M>,
    x0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
    use_representation: bool,
) -> Result<Tensor> {
    if !use_representation {
        return Ok(x0.clone());
    }
    let repr = pair.representation_batch(x0, t, eps, sched)?.detach();
    Ok(Tensor::cat(&[x0, &repr.to_dtype(x0.dtype())?], 1)?)
}

pub struct DeformTraining {
    pub net: DeformNet,
    pub history: Vec<StepLog>,
}

/// Runs the full schedule of `epochs * steps_per_epoch` optimizer steps.
///
/// An epoch is one pass over the labeled pool. Each step takes the labeled
/// share of the batch from that pass and fills the rest with unlabeled
/// slices drawn cyclically. Without unlabeled slices the step uses labeled
/// items only and the loss reduces to `huber + w1 * smooth`.
///
/// The smoothness term enters the objective as a per-pixel mean.
pub fn train_deformation<M: NoisePredictor>(
    dataset: &Dataset,
    pair: &DiffusionModelPair<M>,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<DeformTraining> {
    cfg.validate()?;
    let dcfg = &cfg.deformation;
    let device = Device::Cpu;
    let sched = NoiseSchedule::new(&cfg.diffusion.schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);
    let (labeled, unlabeled) = build_pools(dataset, dcfg.unlabeled_fraction, &mut rng)?;
    ensure!(!labeled.is_empty(), "no labeled slices in the training set");
    let (h, w) = dataset.image_size().expect("non-empty dataset");

    let net = DeformNet::new(dcfg.net_config(), cfg.seed, &device)?;
    let m = net.size_multiple();
    ensure!(h % m == 0 && w % m == 0, "image size {h}x{w} must be divisible by {m}");
    let mut opt = AdamW::new(
        net.varmap().all_vars(),
        ParamsAdamW {
            lr: dcfg.lr,
            weight_decay: dcfg.weight_decay,
            ..Default::default()
        },
    )?;

    let (n_l, n_u) = if unlabeled.is_empty() {
        (dcfg.split_batch().0, 0)
    } else {
        let (l, u) = dcfg.split_batch();
        if u == 0 {
            (l.saturating_sub(1).max(1), 1)
        } else {
            (l, u)
        }
    };
    let steps_per_epoch = labeled.len().div_ceil(n_l) as u64;
    let total_steps = steps_per_epoch * dcfg.epochs as u64;
    let i_max = total_steps - 1;
    log::info!(
        "deformation training: {} labeled, {} unlabeled slices, {} steps",
        labeled.len(),
        unlabeled.len(),
        total_steps
    );

    let mut csv = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("deform_metrics.csv");
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };

    let mut labeled_cycle = Cycler::new(labeled.len());
    let mut unlabeled_cycle = Cycler::new(unlabeled.len());
    let mut history = Vec::with_capacity(total_steps as usize);
    let hw = (h * w) as f64;
    let range = if dcfg.augment { dcfg.rotation_range_deg } else { 0.0 };

    for step in 0..total_steps {
        // labeled part
        let mut l_imgs = Vec::with_capacity(n_l);
        let mut l_anns = Vec::with_capacity(n_l);
        for _ in 0..n_l {
            let item = &labeled[labeled_cycle.next(&mut rng)];
            let angle = random_angle(&mut rng, range);
            let mut anns = rotate_annotations(item.annotations, h, w, angle);
            let img = if anns.is_empty() {
                anns = item.annotations.to_vec();
                item.slice.clone()
            } else {
                rotate_image(item.slice, angle)
            };
            l_imgs.push(img.pixels);
            l_anns.push(anns);
        }
        let mut u_imgs = Vec::with_capacity(n_u);
        let mut deltas = Vec::with_capacity(n_u);
        for _ in 0..n_u {
            let item = &unlabeled[unlabeled_cycle.next(&mut rng)];
            let angle = random_angle(&mut rng, range);
            u_imgs.push(rotate_image(item.slice, angle).pixels);
            deltas.push(item.delta_px);
        }
        let all: Vec<&Array2<f64>> = l_imgs.iter().chain(u_imgs.iter()).collect();
        let x0 = nn::images_to_tensor(&all, &device)?;
        let n = all.len();
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..sched.t_train())).collect();
        let eps = noise_like(n, h, w, &mut rng, &device)?;
        let input = network_input(pair, &x0, &t, &eps, &sched, dcfg.use_representation)?;
        let (_, phi) = net.forward_deformation(&input)?;

        // supervised terms
        let mut owners = Vec::new();
        let mut points = Vec::new();
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        for (b, anns) in l_anns.iter().enumerate() {
            for a in anns {
                owners.push(b as u32);
                points.push(a.landmark);
                targets.extend(a.displacement.map(|v| v as f32));
                weights.push(1.0 / (anns.len() * n_l) as f32);
            }
        }
        let owners = Tensor::new(owners.as_slice(), &device)?;
        let sampled = ops::sample_points(&phi.index_select(&owners, 0)?, &points)?;
        let targets = Tensor::from_vec(targets, (points.len(), 2), &device)?;
        let per_ann = lt::huber(&targets, &sampled, dcfg.loss.huber_c)?;
        let l_huber = (per_ann * Tensor::new(weights.as_slice(), &device)?)?.sum_all()?;

        let l_smooth = (lt::smoothness(&phi)?.mean_all()? / hw)?;

        let u = dcfg.loss.u(step, i_max);
        let (l_mse, l_ceil) = if n_u > 0 {
            let xu = x0.narrow(0, n_l, n_u)?;
            let eps_u = noise_like(n_u, h, w, &mut rng, &device)?;
            let x_cf = generate_counterfactual_batch(pair, &xu, &eps_u, &dcfg.guidance, &sched)?.detach();
            let phi_u = phi.narrow(0, n_l, n_u)?;
            let mse = lt::warp_consistency(&xu, &x_cf, &phi_u)?.mean_all()?;
            let ceil = lt::ceiling(&phi_u, &deltas)?.mean_all()?;
            (Some(mse), Some(ceil))
        } else {
            (None, None)
        };

        let mut loss = (&l_huber + (&l_smooth * dcfg.loss.w1)?)?;
        if let (Some(mse), Some(ceil)) = (&l_mse, &l_ceil) {
            loss = (loss + ((mse + (ceil * dcfg.loss.w2)?)? * u)?)?;
        }
        let terms = LossTerms {
            huber: lt::scalar(&l_huber)?,
            smooth: lt::scalar(&l_smooth)?,
            mse: l_mse.as_ref().map(lt::scalar).transpose()?.unwrap_or(0.0),
            ceil: l_ceil.as_ref().map(lt::scalar).transpose()?.unwrap_or(0.0),
        };
        let total = total_loss(&terms, &dcfg.loss, step, i_max)?;
        let row = StepLog {
            step,
            l_huber: terms.huber,
            l_smooth: terms.smooth,
            l_mse: terms.mse,
            l_ceil: terms.ceil,
            u,
            total,
        };
        if !terms.is_finite() || !total.is_finite() {
            let tail = &history[history.len().saturating_sub(10)..];
            return Err(Error::NonFinite(format!(
                "deformation loss at step {step}: {row:?}; t = {t:?}; recent {tail:?}"
            )));
        }
        opt.backward_step(&loss.to_dtype(DType::F32)?)?;
        if let Some((f, path)) = csv.as_mut() {
            writeln!(f, "{}", row.csv_row()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        if (step + 1) % steps_per_epoch == 0 {
            log::info!("epoch {} total {:.4}", (step + 1) / steps_per_epoch, total);
        }
        history.push(row);
    }

    if let Some(dir) = out {
        save_deform_net(
            &dir.join(DEFORM),
            &net,
            &TrainingMeta {
                iteration: total_steps,
                schedule: serde_json::json!({ "u_final": dcfg.loss.u(i_max, i_max) }),
            },
        )?;
    }
    Ok(DeformTraining { net, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::stubs::ConstantEpsilon;
    use crate::synthetic::{generate_dataset, PhantomSpec};

    fn spec(positive_fraction: f64) -> PhantomSpec {
        PhantomSpec {
            image_size: 16,
            n_cases: 2,
            positive_fraction,
            shift_range_px: (1.0, 2.0),
            slices_per_case: 3,
            labeled_slices_per_case: 1,
            ..Default::default()
        }
    }

    fn small_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        let d = &mut cfg.deformation;
        d.net.levels = 2;
        d.net.base_channels = 4;
        d.batch = 4;
        d.epochs = 2;
        d.guidance.start_step = 2;
        d.guidance.ddim_steps = 10;
        cfg
    }

    fn stub_pair() -> DiffusionModelPair<ConstantEpsilon> {
        DiffusionModelPair::new(ConstantEpsilon(0.1), ConstantEpsilon(-0.1))
    }

    #[test]
    fn pools_and_fraction() {
        let ds = Dataset::new(generate_dataset(&spec(1.0)).unwrap().into_iter().map(|c| c.volume).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (l, u) = build_pools(&ds, 1.0, &mut rng).unwrap();
        assert_eq!((l.len(), u.len()), (2, 4));
        let (_, u) = build_pools(&ds, 0.0, &mut rng).unwrap();
        assert!(u.is_empty());
        let (_, u) = build_pools(&ds, 0.5, &mut rng).unwrap();
        assert_eq!(u.len(), 2);
    }

    #[test]
    fn missing_case_shift_is_rejected() {
        let mut ds = Dataset::new(generate_dataset(&spec(1.0)).unwrap().into_iter().map(|c| c.volume).collect());
        ds.cases[0].case_mls_mm = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_pools(&ds, 1.0, &mut rng).unwrap_err().is_validation());
    }

    #[test]
    fn supervised_only_logs_no_unsupervised_terms_and_u_is_monotone() {
        let ds = Dataset::new(generate_dataset(&spec(1.0)).unwrap().into_iter().map(|c| c.volume).collect());
        let mut cfg = small_cfg();
        cfg.deformation.unlabeled_fraction = 0.0;
        let out = train_deformation(&ds, &stub_pair(), &cfg, None).unwrap();
        assert!(out.history.iter().all(|r| r.l_mse == 0.0 && r.l_ceil == 0.0));
        assert!(out
            .history
            .iter()
            .all(|r| (r.total - (r.l_huber + r.l_smooth)).abs() < 1e-12));

        cfg.deformation.unlabeled_fraction = 1.0;
        let out = train_deformation(&ds, &stub_pair(), &cfg, None).unwrap();
        assert!(out.history.windows(2).all(|w| w[0].u <= w[1].u));
        assert_eq!(out.history.last().unwrap().u, 10.0);
        assert!(out.history.iter().any(|r| r.l_mse > 0.0));
    }
}
