//! Finite-difference checks of every loss and the full network on random
//! instances.

use rand::Rng;
use serde::Serialize;

use crate::diffkernel::{grad_check, Bound, Graph, Tensor, Var};
use crate::error::Result;
use crate::losses::{distillation_loss, segmentation_loss, total_loss, uncertainty_map, voxel_contrast_loss, ContrastRows};
use crate::model::{Heads, Mode, ModelConfig, SegModel};
use crate::seed;

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-6;

/// Outcome of one gradient target over all its instances.
#[derive(Clone, Debug, Serialize)]
pub struct GradTarget {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl GradTarget {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

fn probs(rng: &mut seed::Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(0.05..0.95))
}

fn binary(rng: &mut seed::Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| f64::from(u8::from(rng.random_bool(0.4))))
}

fn seg_instance(rng: &mut seed::Rng) -> Result<f64> {
    let z = probs(rng, &[2, 4, 4]);
    let y = binary(rng, &[2, 4, 4]);
    Ok(grad_check(|g, x| segmentation_loss(g, x, &y), &z, GRAD_STEP, GRAD_TOLERANCE)?.max_error)
}

fn dis_instance(rng: &mut seed::Rng) -> Result<f64> {
    let z_old = probs(rng, &[3, 4, 4]);
    let z_new = probs(rng, &[3, 4, 4]);
    let um = uncertainty_map(&z_old);
    Ok(grad_check(|g, x| distillation_loss(g, &z_old, x, &um), &z_new, GRAD_STEP, GRAD_TOLERANCE)?.max_error)
}

fn vc_instance(rng: &mut seed::Rng) -> Result<f64> {
    let (s, e, c) = (rng.random_range(4..9), rng.random_range(2..5), rng.random_range(2..5));
    let emb = Tensor::from_fn(&[s, e], |_| rng.random_range(-1.0..1.0));
    let mut labels = binary(rng, &[s, c]).into_data();
    // every row shares the first class so each anchor has a valid coefficient row
    (0..s).for_each(|r| labels[r * c] = 1.0);
    let anchors: Vec<usize> = (0..s).filter(|_| rng.random_bool(0.5)).chain([0]).collect();
    let tau = rng.random_range(0.5..2.0);
    let rows = ContrastRows {
        labels: &labels,
        classes: c,
        anchors: &anchors,
    };
    Ok(grad_check(|g, x| Ok(voxel_contrast_loss(g, x, rows, tau)?.0), &emb, GRAD_STEP, GRAD_TOLERANCE)?.max_error)
}

fn total_instance(rng: &mut seed::Rng) -> Result<f64> {
    // three component values followed by three log-variances
    let point = Tensor::from_fn(&[6], |i| if i < 3 { rng.random_range(0.1..3.0) } else { rng.random_range(-1.0..1.0) });
    let f = |g: &mut Graph, x: Var| {
        let parts: Vec<Var> = (0..3).map(|i| g.slice(x, i, i + 1)).collect::<Result<_>>()?;
        let s = g.slice(x, 3, 6)?;
        total_loss(g, [Some(parts[0]), Some(parts[1]), Some(parts[2])], Some(s))
    };
    Ok(grad_check(f, &point, GRAD_STEP, GRAD_TOLERANCE)?.max_error)
}

/// Weighted sum of every network output, so all heads carry gradient.
fn probe(model: &SegModel, g: &mut Graph, bound: &Bound, x: Var, weight_seed: u64) -> Result<Var> {
    let o = model.forward(g, bound, x, Mode::Eval, Heads::ALL)?;
    let mut rng = seed::rng(&[weight_seed]);
    let mut acc: Option<Var> = None;
    for v in [o.base, o.novel, o.embedding].into_iter().flatten() {
        let shape = g.shape(v).to_vec();
        let w = g.constant(Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0)));
        let p = g.mul(v, w)?;
        let s = g.sum(p);
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.expect("at least one head"))
}

fn model_instance(rng: &mut seed::Rng) -> Result<f64> {
    let cfg = ModelConfig {
        in_channels: 1,
        widths: vec![2, 3],
        base_classes: 2,
        novel_classes: 1,
        dropout: 0.0,
        skips: true,
    };
    let model = SegModel::new(cfg, rng.random())?;
    let x = Tensor::from_fn(&[1, 8, 8], |_| rng.random_range(-1.0..1.0));
    let wseed: u64 = rng.random();
    let input = grad_check(
        |g, xv| {
            let b = model.params.bind(g, false);
            probe(&model, g, &b, xv, wseed)
        },
        &x,
        GRAD_STEP,
        GRAD_TOLERANCE,
    )?;
    let shapes: Vec<Vec<usize>> = model.params.iter().map(|p| p.value.shape().to_vec()).collect();
    let flat: Vec<f64> = model.params.iter().flat_map(|p| p.value.data().to_vec()).collect();
    let params = grad_check(
        |g, pv| {
            let mut vars = Vec::with_capacity(shapes.len());
            let mut at = 0;
            for s in &shapes {
                let n: usize = s.iter().product();
                let part = g.slice(pv, at, at + n)?;
                vars.push(g.reshape(part, s)?);
                at += n;
            }
            let xv = g.constant(x.clone());
            probe(&model, g, &Bound::from_vars(vars), xv, wseed)
        },
        &Tensor::from_vec(flat),
        GRAD_STEP,
        GRAD_TOLERANCE,
    )?;
    Ok(input.max_error.max(params.max_error))
}

/// Runs `instances` random checks of each target.
pub fn gradient_suite(instances: usize, seed_: u64) -> Result<Vec<GradTarget>> {
    type Check = fn(&mut seed::Rng) -> Result<f64>;
    let targets: [(&str, Check); 5] = [
        ("L_seg", seg_instance),
        ("L_dis", dis_instance),
        ("L_VC", vc_instance),
        ("total (dynamic weighting)", total_instance),
        ("full model", model_instance),
    ];
    targets
        .iter()
        .enumerate()
        .map(|(t, (name, check))| {
            let mut max_error: f64 = 0.0;
            for i in 0..instances {
                let mut rng = seed::rng(&[seed_, t as u64, i as u64]);
                max_error = max_error.max(check(&mut rng)?);
            }
            Ok(GradTarget {
                name: name.to_string(),
                instances,
                max_error,
                tolerance: GRAD_TOLERANCE,
            })
        })
        .collect()
}
