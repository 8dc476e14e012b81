//! Dice reports, forgetting and the ablation harness.

mod ablation;
mod gradsuite;

pub use ablation::{
    median, run_ablation, worker_threads, AblationCell, AblationMatrix, AblationRow, NamedConfig, Suite, THREADS_ENV,
};
pub use gradsuite::{gradient_suite, GradTarget, GRAD_STEP, GRAD_TOLERANCE};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffkernel::Tensor;
use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::synthgen::{ClassSplit, MultiLabelVolume};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn dice_counts(pred: &[f64], label: &[f64], threshold: f64) -> f64 {
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &l) in pred.iter().zip(label) {
        let pa = p >= threshold;
        let lb = l >= threshold;
        a += usize::from(pa);
        b += usize::from(lb);
        both += usize::from(pa && lb);
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * both as f64 / (a + b) as f64
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("threshold {t} outside (0, 1]")))
    }
}

/// Dice of `pred` binarized at `threshold` (ties positive) against `label`.
/// Two empty masks score 1.
pub fn dice(pred: &Tensor, label: &Tensor, threshold: f64) -> Result<f64> {
    check_threshold(threshold)?;
    if pred.shape() != label.shape() {
        return Err(Error::dim(
            "dice",
            format!("prediction {:?} vs label {:?}", pred.shape(), label.shape()),
        ));
    }
    Ok(dice_counts(pred.data(), label.data(), threshold))
}

/// Per-class Dice averaged over subjects, with group means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    /// Class ids in report order: base classes, then novel classes if present.
    pub classes: Vec<usize>,
    pub base_count: usize,
    pub per_class: Vec<f64>,
    pub base_mean: f64,
    /// Absent for a model without a novel head.
    pub novel_mean: Option<f64>,
    pub all_mean: f64,
    pub subjects: usize,
    pub threshold: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl DiceReport {
    /// Builds a report whose group means come from `per_class`.
    pub fn new(classes: Vec<usize>, base_count: usize, per_class: Vec<f64>, subjects: usize, threshold: f64) -> Result<Self> {
        if classes.len() != per_class.len() || base_count == 0 || base_count > classes.len() {
            return Err(Error::Contract(format!(
                "{} classes, {} values, {base_count} base classes",
                classes.len(),
                per_class.len()
            )));
        }
        let base_mean = mean(&per_class[..base_count]);
        let novel_mean = (base_count < classes.len()).then(|| mean(&per_class[base_count..]));
        let all_mean = mean(&per_class);
        Ok(Self {
            classes,
            base_count,
            per_class,
            base_mean,
            novel_mean,
            all_mean,
            subjects,
            threshold,
        })
    }

    pub fn base_dice(&self) -> &[f64] {
        &self.per_class[..self.base_count]
    }

    pub fn novel_dice(&self) -> &[f64] {
        &self.per_class[self.base_count..]
    }

    /// `class,group,dice` rows followed by one `mean` row per group.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,group,dice\n");
        for (i, (c, d)) in self.classes.iter().zip(&self.per_class).enumerate() {
            let group = if i < self.base_count { "base" } else { "novel" };
            out.push_str(&format!("{c},{group},{d}\n"));
        }
        out.push_str(&format!("mean,base,{}\n", self.base_mean));
        if let Some(n) = self.novel_mean {
            out.push_str(&format!("mean,novel,{n}\n"));
        }
        out.push_str(&format!("mean,all,{}\n", self.all_mean));
        out
    }

    pub fn write(&self, csv_path: &Path, summary_path: &Path) -> Result<()> {
        fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Evaluation(e.to_string()))?;
        fs::write(summary_path, json + "\n").map_err(|e| Error::io(summary_path, e))
    }
}

/// Checks that `split` matches the heads and recorded split of `model`.
pub fn check_split(model: &SegModel, split: &ClassSplit) -> Result<()> {
    split.validate()?;
    let novel_ok = model.config.novel_classes == 0 || model.config.novel_classes == split.novel.len();
    if model.config.base_classes != split.base.len() || !novel_ok {
        return Err(Error::Config(format!(
            "model heads ({} base, {} novel) do not match the split ({} base, {} novel)",
            model.config.base_classes,
            model.config.novel_classes,
            split.base.len(),
            split.novel.len()
        )));
    }
    if let Some(recorded) = &model.meta.split {
        if recorded != split {
            return Err(Error::Config("class split differs from the one recorded in the checkpoint".into()));
        }
    }
    Ok(())
}

/// Dice per class for each subject, using three-direction prediction.
/// Subjects are spread over [`worker_threads`] workers.
pub fn evaluate(model: &SegModel, subjects: &[&MultiLabelVolume], split: &ClassSplit, threshold: f64) -> Result<DiceReport> {
    evaluate_with(model, subjects, split, threshold, worker_threads())
}

pub fn evaluate_with(
    model: &SegModel,
    subjects: &[&MultiLabelVolume],
    split: &ClassSplit,
    threshold: f64,
    threads: usize,
) -> Result<DiceReport> {
    check_split(model, split)?;
    check_threshold(threshold)?;
    if subjects.is_empty() {
        return Err(Error::Config("no subjects to evaluate".into()));
    }
    let mut classes = split.base.clone();
    if model.config.novel_classes > 0 {
        classes.extend(&split.novel);
    }
    let per_subject = parallel_map(subjects, threads, |v| {
        split.check_classes(v.classes())?;
        let probs = model.predict_volume(&v.input)?;
        let nvox = probs.len() / classes.len();
        Ok(classes
            .iter()
            .enumerate()
            .map(|(row, &c)| {
                dice_counts(
                    &probs.data()[row * nvox..(row + 1) * nvox],
                    &v.labels.data()[c * nvox..(c + 1) * nvox],
                    threshold,
                )
            })
            .collect::<Vec<f64>>())
    })?;
    let per_class: Vec<f64> = (0..classes.len())
        .map(|k| per_subject.iter().map(|d| d[k]).sum::<f64>() / per_subject.len() as f64)
        .collect();
    DiceReport::new(classes, split.base.len(), per_class, subjects.len(), threshold)
}

/// Per base class drop `before - after`, and its mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forgetting {
    pub classes: Vec<usize>,
    pub delta: Vec<f64>,
    pub mean: f64,
}

pub fn forgetting_delta(before: &DiceReport, after: &DiceReport) -> Result<Forgetting> {
    if before.base_count != after.base_count || before.base_dice().len() != after.base_dice().len() {
        return Err(Error::Config("reports cover different base classes".into()));
    }
    let classes = before.classes[..before.base_count].to_vec();
    if classes != after.classes[..after.base_count] {
        return Err(Error::Config("reports cover different base classes".into()));
    }
    let delta: Vec<f64> = before.base_dice().iter().zip(after.base_dice()).map(|(b, a)| b - a).collect();
    let mean = mean(&delta);
    Ok(Forgetting { classes, delta, mean })
}

/// Maps `f` over `items` on up to `threads` scoped workers, keeping input
/// order in the output.
pub(crate) fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<R>>> = (0..items.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every item processed")).collect()
}
