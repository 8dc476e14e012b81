//! Base step, LwF initialisation and the one-shot novel step.

mod adamax;
mod config;

pub use adamax::{Adamax, Slot, BETA1, BETA2, EPSILON};
pub use config::{Optimizer, TrainConfig};

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffkernel::{Bound, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{
    distillation_loss, mean_contrast, segmentation_loss, total_loss, uncertainty_map, voxel_contrast_sum,
    ContrastRows, LossWeightState, DIS, SEG, VC,
};
use crate::model::slicing::extract_slice;
use crate::model::{lwf_init, Heads, Mode, SegModel};
use crate::sampler::{draw_samples, partition_classes, select_batch_subset};
use crate::seed;
use crate::synthgen::{augment, ClassSplit, Dataset, MultiLabelVolume, Role};

const BASE_STREAM: u64 = 0xBA5E;
const NOVEL_STREAM: u64 = 0x0E4;

/// Batch means of one epoch, as written to the CSV log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(rename = "L_seg")]
    pub l_seg: f64,
    #[serde(rename = "L_dis")]
    pub l_dis: f64,
    #[serde(rename = "L_VC")]
    pub l_vc: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub total: f64,
}

/// Per-epoch logs plus timing of the contrastive branch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Wall time spent building the contrastive loss, per epoch.
    pub vc_seconds: Vec<f64>,
    /// Batch elements that fed the contrastive loss, per batch.
    pub vc_slices: Vec<usize>,
    /// Anchors that contributed, summed over the run.
    pub vc_anchors: usize,
}

pub fn write_epoch_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in logs {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct SliceRef {
    subject: usize,
    axis: usize,
    index: usize,
}

/// Batches of one epoch. Each axis keeps its own shuffled queue and the
/// queues are interleaved, so consecutive slices cycle through the axes.
fn epoch_plan(extents: &[[usize; 3]], batch_size: usize, batches: usize, rng: &mut seed::Rng) -> Vec<Vec<SliceRef>> {
    let mut queues: Vec<Vec<SliceRef>> = (0..3)
        .map(|axis| {
            let mut q: Vec<SliceRef> = extents
                .iter()
                .enumerate()
                .flat_map(|(subject, e)| (0..e[axis]).map(move |index| SliceRef { subject, axis, index }))
                .collect();
            q.shuffle(rng);
            q
        })
        .collect();
    queues.iter_mut().for_each(|q| q.reverse());
    let mut order = Vec::new();
    while queues.iter().any(|q| !q.is_empty()) {
        for q in queues.iter_mut() {
            if let Some(s) = q.pop() {
                order.push(s);
            }
        }
    }
    let want = if batches == 0 { order.len() } else { batches * batch_size };
    let mut batch_source = order.iter().cycle().take(want).copied();
    let mut batches = Vec::new();
    loop {
        let b: Vec<SliceRef> = batch_source.by_ref().take(batch_size).collect();
        if b.is_empty() {
            break;
        }
        batches.push(b);
    }
    batches
}

/// Rows `idx` of a `[C, ...]` tensor.
fn select_channels(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let per = t.len() / t.shape()[0];
    let mut data = Vec::with_capacity(idx.len() * per);
    for &c in idx {
        data.extend_from_slice(&t.data()[c * per..(c + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

/// Per-epoch, per-subject augmented copies, made on first use.
struct VolumeCache<'a> {
    source: Vec<&'a MultiLabelVolume>,
    augmented: BTreeMap<usize, MultiLabelVolume>,
    seed: Option<u64>,
}

impl<'a> VolumeCache<'a> {
    fn new(source: Vec<&'a MultiLabelVolume>, seed: Option<u64>) -> Self {
        Self {
            source,
            augmented: BTreeMap::new(),
            seed,
        }
    }

    fn get(&mut self, subject: usize) -> Result<&MultiLabelVolume> {
        let Some(s) = self.seed else {
            return Ok(self.source[subject]);
        };
        if !self.augmented.contains_key(&subject) {
            let v = augment(self.source[subject], seed::derive(&[s, subject as u64]))?;
            self.augmented.insert(subject, v);
        }
        Ok(&self.augmented[&subject])
    }
}

/// Input slice and the label rows `classes` of one slice reference.
fn load_slice(cache: &mut VolumeCache<'_>, s: SliceRef, classes: &[usize]) -> Result<(Tensor, Tensor)> {
    let v = cache.get(s.subject)?;
    let x = extract_slice(&v.input, s.axis, s.index, true)?;
    let y = extract_slice(&v.labels, s.axis, s.index, false)?;
    Ok((x, select_channels(&y, classes)?))
}

fn mean_of(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(g.affine(acc, 1.0 / parts.len() as f64, 0.0))
}

fn model_update(opt: &mut Adamax, model: &mut SegModel, bound: &Bound, grads: &crate::diffkernel::Gradients) -> Result<()> {
    let named = model.params.gradients(bound, grads);
    let mut slots: Vec<Slot<'_>> = model
        .params
        .iter_mut()
        .zip(&named)
        .map(|(p, (_, gr))| Slot {
            name: &p.name,
            value: p.value.data_mut(),
            grad: gr.data(),
        })
        .collect();
    opt.update(&mut slots)
}

fn new_optimizer(model: &SegModel, cfg: &TrainConfig) -> Result<Adamax> {
    let sizes: Vec<usize> = model.params.iter().map(|p| p.value.len()).collect();
    Adamax::new(cfg.lr, &sizes)
}

fn check_finite(what: &str, epoch: usize, batch: usize, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} is {v} at epoch {epoch}, batch {batch}")))
    }
}

/// Trains the encoder and base decoder on the base classes of every
/// base-train subject.
pub fn train_base(dataset: &Dataset, cfg: &TrainConfig) -> Result<(SegModel, TrainReport)> {
    cfg.validate()?;
    let subjects = dataset.by_role(Role::BaseTrain);
    if subjects.is_empty() {
        return Err(Error::Config("dataset has no base-train subjects".into()));
    }
    let split = &dataset.manifest.split;
    let mut model = SegModel::new(cfg.model(split.base.len(), 0), seed::derive(&[cfg.seed, BASE_STREAM]))?;
    model.meta.seed = cfg.seed;
    model.meta.epochs = cfg.base_epochs;
    model.meta.split = Some(split.clone());
    let extents: Vec<[usize; 3]> = subjects.iter().map(|v| v.extent()).collect();
    let mut opt = new_optimizer(&model, cfg)?;
    let mut report = TrainReport::default();
    for epoch in 0..cfg.base_epochs {
        let mut rng = seed::rng(&[cfg.seed, BASE_STREAM, epoch as u64]);
        let plan = epoch_plan(&extents, cfg.batch_size, cfg.base_batches_per_epoch, &mut rng);
        let aug = cfg.augment_base.then(|| seed::derive(&[cfg.seed, BASE_STREAM, 0xA6, epoch as u64]));
        let mut cache = VolumeCache::new(subjects.clone(), aug);
        let mut sum = 0.0;
        for (b, batch) in plan.iter().enumerate() {
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g, true);
            let mut parts = Vec::with_capacity(batch.len());
            for (k, &s) in batch.iter().enumerate() {
                let (x, y) = load_slice(&mut cache, s, &split.base)?;
                let xv = g.constant(x);
                let mode = Mode::Train {
                    dropout_seed: seed::derive(&[cfg.seed, BASE_STREAM, epoch as u64, b as u64, k as u64]),
                };
                let heads = Heads {
                    base: true,
                    novel: false,
                    embedding: false,
                };
                let out = model.forward(&mut g, &bound, xv, mode, heads)?;
                parts.push(segmentation_loss(&mut g, out.base.expect("requested"), &y)?);
            }
            let loss = mean_of(&mut g, &parts)?;
            let value = g.value(loss).item();
            check_finite("base segmentation loss", epoch, b, value)?;
            let grads = g.backward(loss)?;
            model_update(&mut opt, &mut model, &bound, &grads)?;
            sum += value;
        }
        let mean = sum / plan.len() as f64;
        log::info!("base epoch {epoch}: L_seg {mean:.5}");
        report.epochs.push(EpochLog {
            epoch,
            l_seg: mean,
            l_dis: 0.0,
            l_vc: 0.0,
            w1: 1.0,
            w2: 0.0,
            w3: 0.0,
            total: mean,
        });
    }
    Ok((model, report))
}

/// Loss graph of one novel-step batch.
pub struct NovelBatch {
    pub graph: Graph,
    pub bound: Bound,
    /// The `[3]` log-variance node when dynamic weighting is on.
    pub log_variances: Option<Var>,
    pub total: Var,
    pub components: [Option<Var>; 3],
    /// `L_seg + L_dis` of each slice, the key of the subset selection.
    pub slice_losses: Vec<f64>,
    /// Batch positions that fed the contrastive loss.
    pub vc_selected: Vec<usize>,
    pub vc_anchors: usize,
    pub vc_seconds: f64,
}

/// Inputs of one novel-step batch: slices with their novel labels.
pub struct BatchSlices {
    pub inputs: Vec<Tensor>,
    /// Novel-class rows of the one-shot labels, per slice.
    pub novel_labels: Vec<Tensor>,
}

/// Frozen base-head probabilities of one slice.
fn frozen_base(frozen: &SegModel, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = frozen.params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let heads = Heads {
        base: true,
        novel: false,
        embedding: false,
    };
    let out = frozen.forward(&mut g, &bound, xv, Mode::Eval, heads)?;
    Ok(g.value(out.base.expect("requested")).clone())
}

/// Builds the combined loss of one batch. The frozen model and the base head
/// are only evaluated when a switch needs them, and the distillation and
/// contrastive nodes only exist when their switches are on.
pub fn novel_batch(
    frozen: &SegModel,
    model: &SegModel,
    weights: &LossWeightState,
    slices: &BatchSlices,
    cfg: &TrainConfig,
    batch_seed: u64,
) -> Result<NovelBatch> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, true);
    let s_var = cfg.use_dw.then(|| g.leaf(Tensor::from_vec(weights.s.to_vec()), true));
    let need_frozen = cfg.use_dis || cfg.use_vc;
    let heads = Heads {
        base: cfg.use_dis,
        novel: true,
        embedding: cfg.use_vc,
    };
    let mut seg_parts = Vec::new();
    let mut dis_parts = Vec::new();
    let mut slice_losses = Vec::new();
    let mut old = Vec::new();
    let mut embeddings = Vec::new();
    for (k, (x, y)) in slices.inputs.iter().zip(&slices.novel_labels).enumerate() {
        let z_old = if need_frozen { Some(frozen_base(frozen, x)?) } else { None };
        let xv = g.constant(x.clone());
        let mode = Mode::Train {
            dropout_seed: seed::derive(&[batch_seed, k as u64]),
        };
        let out = model.forward(&mut g, &bound, xv, mode, heads)?;
        let seg = segmentation_loss(&mut g, out.novel.expect("requested"), y)?;
        let mut key = g.value(seg).item();
        seg_parts.push(seg);
        if cfg.use_dis {
            let z = z_old.as_ref().expect("frozen pass ran");
            let dis = distillation_loss(&mut g, z, out.base.expect("requested"), &uncertainty_map(z))?;
            key += g.value(dis).item();
            dis_parts.push(dis);
        }
        slice_losses.push(key);
        old.push(z_old);
        embeddings.push(out.embedding);
    }
    let l_seg = mean_of(&mut g, &seg_parts)?;
    let l_dis = if cfg.use_dis { Some(mean_of(&mut g, &dis_parts)?) } else { None };

    let mut l_vc = None;
    let mut vc_selected = Vec::new();
    let mut vc_anchors = 0;
    let mut vc_seconds = 0.0;
    if cfg.use_vc {
        let start = Instant::now();
        vc_selected = select_batch_subset(&slice_losses, cfg.ratio)?.selected;
        let mut terms = Vec::new();
        for &k in &vc_selected {
            let z_old = old[k].as_ref().expect("frozen pass ran");
            let novel = &slices.novel_labels[k];
            let (rows, cols) = (novel.shape()[1], novel.shape()[2]);
            let n = rows * cols;
            let mut labels: Vec<f64> = z_old.data().iter().map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect();
            labels.extend_from_slice(novel.data());
            let classes = labels.len() / n;
            let planes = Tensor::new(vec![classes, rows, cols], labels)?;
            let partitions = partition_classes(&planes, cfg.theta)?;
            let flat = planes.reshape(&[classes, n])?;
            let set = draw_samples(&partitions, &flat, cfg.n_s, seed::derive(&[batch_seed, 0x5A, k as u64]), cfg.strategy)?;
            if set.is_empty() {
                continue;
            }
            let emb = embeddings[k].expect("requested");
            let e = g.shape(emb)[0];
            let per_voxel = g.reshape(emb, &[e, n])?;
            let per_voxel = g.transpose(per_voxel)?;
            let mut picked = g.gather_rows(per_voxel, &set.voxels)?;
            if cfg.embed_normalize {
                picked = g.normalize_rows(picked)?;
            }
            let anchors: Vec<usize> = set.anchors.iter().map(|a| a.row).collect();
            let rows = ContrastRows {
                labels: &set.labels,
                classes: set.classes,
                anchors: &anchors,
            };
            terms.push(voxel_contrast_sum(&mut g, picked, rows, cfg.tau)?);
        }
        let (mean, count) = mean_contrast(&mut g, &terms)?;
        if count > 0 {
            l_vc = Some(mean);
        }
        vc_anchors = count;
        vc_seconds = start.elapsed().as_secs_f64();
    }
    let mut components = [None; 3];
    components[SEG] = Some(l_seg);
    components[DIS] = l_dis;
    components[VC] = l_vc;
    let total = total_loss(&mut g, components, s_var)?;
    Ok(NovelBatch {
        graph: g,
        bound,
        log_variances: s_var,
        total,
        components,
        slice_losses,
        vc_selected,
        vc_anchors,
        vc_seconds,
    })
}

/// Result of the novel step.
#[derive(Clone, Debug)]
pub struct NovelOutcome {
    pub model: SegModel,
    /// The frozen base copy used for distillation and pseudo-labels.
    pub frozen: SegModel,
    pub weights: LossWeightState,
    pub report: TrainReport,
}

/// Learns the novel classes from the single annotated subject, starting from
/// the base model.
pub fn train_novel(base: &SegModel, oneshot: &MultiLabelVolume, split: &ClassSplit, cfg: &TrainConfig) -> Result<NovelOutcome> {
    cfg.validate()?;
    split.validate()?;
    if base.config.base_classes != split.base.len() {
        return Err(Error::Config(format!(
            "base model has {} base classes, split lists {}",
            base.config.base_classes,
            split.base.len()
        )));
    }
    split.check_classes(oneshot.classes())?;
    let (frozen, mut model) = lwf_init(base, split.novel.len(), seed::derive(&[cfg.seed, NOVEL_STREAM]))?;
    model.meta.seed = cfg.seed;
    model.meta.epochs = cfg.novel_epochs;
    model.meta.split = Some(split.clone());
    let mut opt = new_optimizer(&model, cfg)?;
    let mut weights = LossWeightState::default();
    let mut weight_opt = Adamax::new(cfg.lr, &[3])?;
    let extents = [oneshot.extent()];
    let mut report = TrainReport::default();
    for epoch in 0..cfg.novel_epochs {
        let mut rng = seed::rng(&[cfg.seed, NOVEL_STREAM, epoch as u64]);
        let plan = epoch_plan(&extents, cfg.batch_size, cfg.novel_batches_per_epoch, &mut rng);
        let aug = cfg.augment_oneshot.then(|| seed::derive(&[cfg.seed, NOVEL_STREAM, 0xA6, epoch as u64]));
        let mut cache = VolumeCache::new(vec![oneshot], aug);
        let mut sums = [0.0; 4];
        let mut vc_time = 0.0;
        for (b, batch) in plan.iter().enumerate() {
            let mut slices = BatchSlices {
                inputs: Vec::new(),
                novel_labels: Vec::new(),
            };
            for &s in batch {
                let (x, y) = load_slice(&mut cache, s, &split.novel)?;
                slices.inputs.push(x);
                slices.novel_labels.push(y);
            }
            let batch_seed = seed::derive(&[cfg.seed, NOVEL_STREAM, epoch as u64, b as u64]);
            let nb = novel_batch(&frozen, &model, &weights, &slices, cfg, batch_seed)?;
            let total = nb.graph.value(nb.total).item();
            check_finite("total loss", epoch, b, total)?;
            for (i, c) in nb.components.iter().enumerate() {
                if let Some(v) = c {
                    sums[i] += nb.graph.value(*v).item();
                }
            }
            sums[3] += total;
            vc_time += nb.vc_seconds;
            report.vc_slices.push(nb.vc_selected.len());
            report.vc_anchors += nb.vc_anchors;
            let grads = nb.graph.backward(nb.total)?;
            model_update(&mut opt, &mut model, &nb.bound, &grads)?;
            if let Some(s) = nb.log_variances {
                let gs = grads.get_or_zeros(s, &[3]);
                weight_opt.update(&mut [Slot {
                    name: "loss log-variances",
                    value: &mut weights.s,
                    grad: gs.data(),
                }])?;
            }
        }
        let n = plan.len() as f64;
        let w = if cfg.use_dw {
            weights.weights()
        } else {
            [1.0, f64::from(u8::from(cfg.use_dis)), f64::from(u8::from(cfg.use_vc))]
        };
        let log = EpochLog {
            epoch,
            l_seg: sums[SEG] / n,
            l_dis: sums[DIS] / n,
            l_vc: sums[VC] / n,
            w1: w[0],
            w2: w[1],
            w3: w[2],
            total: sums[3] / n,
        };
        log::info!(
            "novel epoch {epoch}: L_seg {:.5} L_dis {:.5} L_VC {:.5} total {:.5}",
            log.l_seg,
            log.l_dis,
            log.l_vc,
            log.total
        );
        report.epochs.push(log);
        report.vc_seconds.push(vc_time);
    }
    if cfg.use_dw {
        model.meta.loss_log_variances = Some(weights.s);
    }
    Ok(NovelOutcome {
        model,
        frozen,
        weights,
        report,
    })
}
