//! Synthetic multi-label tract volumes.

mod augment;
mod dataset;
pub mod io;
mod overlap;
mod preset;
mod tract;

pub use augment::{apply_augmentation, augment, AugmentParams};
pub use dataset::{
    generate_dataset, load_dataset, load_manifest, save_dataset, split_classes, ClassSplit, Dataset, DatasetManifest, GeneratorParams, Role,
    SubjectEntry,
};
pub use overlap::{overlap_stats, pooled_overlap_stats, OverlapHistogram};
pub use preset::{OverlapPreset, OverlapTargets};
pub use tract::{TractSpec, TractTemplate, Vec3, INPUT_CHANNELS, PEAK_SLOTS};

use rand_distr::{Distribution, Normal};

use crate::diffkernel::Tensor;
use crate::error::{Error, Result};
use crate::seed;

/// One subject: peak-like input `[C_in, D, H, W]` and binary labels `[C_lab, D, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiLabelVolume {
    pub input: Tensor,
    pub labels: Tensor,
    pub subject_id: String,
}

impl MultiLabelVolume {
    pub fn new(input: Tensor, labels: Tensor, subject_id: impl Into<String>) -> Result<Self> {
        let v = Self {
            input,
            labels,
            subject_id: subject_id.into(),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.ndim() != 4 || self.labels.ndim() != 4 {
            return Err(Error::dim(
                "volume",
                format!(
                    "input {:?} and labels {:?} must be 4-d",
                    self.input.shape(),
                    self.labels.shape()
                ),
            ));
        }
        if self.input.shape()[1..] != self.labels.shape()[1..] {
            return Err(Error::dim(
                "volume",
                format!(
                    "spatial extents differ: {:?} vs {:?}",
                    &self.input.shape()[1..],
                    &self.labels.shape()[1..]
                ),
            ));
        }
        if !self.labels.is_binary() {
            return Err(Error::Contract(format!("{}: labels are not binary", self.subject_id)));
        }
        Ok(())
    }

    pub fn extent(&self) -> [usize; 3] {
        let s = self.input.shape();
        [s[1], s[2], s[3]]
    }

    pub fn classes(&self) -> usize {
        self.labels.shape()[0]
    }
}

/// Everything needed to generate a subject apart from its own seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectSpec {
    /// Seed of the shared anatomy.
    pub template_seed: u64,
    pub extent: [usize; 3],
    pub classes: usize,
    pub preset: OverlapPreset,
}

impl SubjectSpec {
    fn check(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Generation(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.extent.iter().any(|&e| e < 16) {
            return Err(Error::Generation(format!("extent {:?} below 16 per axis", self.extent)));
        }
        let t = self.preset.targets;
        if t.min_three_plus > 0.0 && self.classes < 3 {
            return Err(Error::Generation(format!(
                "preset {} asks for {:.0}% of voxels with >= 3 labels but only {} classes exist",
                self.preset.name,
                100.0 * t.min_three_plus,
                self.classes
            )));
        }
        if t.min_multi_label > 1.0 || t.min_three_plus > t.min_multi_label {
            return Err(Error::Generation(format!(
                "preset {} has inconsistent targets {:?}",
                self.preset.name, t
            )));
        }
        Ok(())
    }
}

/// Generates one subject from the shared anatomy plus subject-specific jitter
/// and noise, then verifies the preset's overlap targets.
pub fn generate_subject(spec: &SubjectSpec, subject_seed: u64) -> Result<MultiLabelVolume> {
    spec.check()?;
    let template = TractTemplate::generate(spec.template_seed, spec.extent, spec.classes, &spec.preset)?;
    generate_from_template(&template, spec, subject_seed, &format!("subject-{subject_seed}"))
}

pub(crate) fn generate_from_template(
    template: &TractTemplate,
    spec: &SubjectSpec,
    subject_seed: u64,
    subject_id: &str,
) -> Result<MultiLabelVolume> {
    let tracts = template.subject_variant(subject_seed, &spec.preset)?;
    let [d, h, w] = spec.extent;
    let nvox = d * h * w;
    let raster = tract::rasterize(&tracts, spec.extent);
    let mut input = tract::encode_peaks(&raster, spec.classes, nvox);
    if spec.preset.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.preset.noise_sigma).map_err(|e| Error::Generation(e.to_string()))?;
        let mut rng = seed::rng(&[subject_seed, 0x9015E]);
        input.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let labels = tract::labels_tensor(&raster.labels, spec.classes, spec.extent);
    let stats = overlap_stats(&labels).map_err(|_| {
        Error::Generation(format!(
            "preset {} produced no labeled voxels at extent {:?}",
            spec.preset.name, spec.extent
        ))
    })?;
    let t = spec.preset.targets;
    if stats.multi_label() < t.min_multi_label || stats.at_least(3) < t.min_three_plus {
        return Err(Error::Generation(format!(
            "preset {} unreachable at extent {:?} with {} classes: multi-label {:.3} (target {:.3}), \
             >=3 labels {:.3} (target {:.3})",
            spec.preset.name,
            spec.extent,
            spec.classes,
            stats.multi_label(),
            t.min_multi_label,
            stats.at_least(3),
            t.min_three_plus
        )));
    }
    let input = Tensor::new(vec![INPUT_CHANNELS, d, h, w], input)?;
    MultiLabelVolume::new(input, labels, subject_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(preset: OverlapPreset, classes: usize, extent: usize) -> SubjectSpec {
        SubjectSpec {
            template_seed: 42,
            extent: [extent; 3],
            classes,
            preset,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(OverlapPreset::desk(), 6, 16);
        let a = generate_subject(&s, 7).unwrap();
        let b = generate_subject(&s, 7).unwrap();
        assert_eq!(a, b);
        let bits = |v: &MultiLabelVolume| v.input.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a, generate_subject(&s, 8).unwrap());
    }

    #[test]
    fn identical_centerlines_give_fully_shared_labels() {
        let mut preset = OverlapPreset::sparse();
        preset.group_size = 2;
        preset.group_jitter = 0.0;
        preset.radius = [3.0, 3.0];
        preset.subject_jitter = 0.0;
        let s = spec(preset.clone(), 2, 16);
        let mut template = TractTemplate::generate(1, s.extent, 2, &preset).unwrap();
        let mut copy = template.tracts[0].clone();
        copy.class = 1;
        template.tracts[1] = copy;
        let v = generate_from_template(&template, &s, 5, "twin").unwrap();
        let h = overlap_stats(&v.labels).unwrap();
        assert_eq!(h.fractions, vec![0.0, 1.0]);
    }

    #[test]
    fn hcp_like_preset_meets_its_targets() {
        let s = spec(OverlapPreset::hcp_like(), 12, 32);
        for subject in 0..3 {
            let v = generate_subject(&s, subject).unwrap();
            let h = overlap_stats(&v.labels).unwrap();
            assert!(h.multi_label() >= 0.6, "{:?}", h);
            assert!(h.at_least(3) >= 0.2, "{:?}", h);
        }
    }

    #[test]
    fn desk_preset_meets_its_targets() {
        let s = spec(OverlapPreset::desk(), 12, 32);
        let v = generate_subject(&s, 0).unwrap();
        let h = overlap_stats(&v.labels).unwrap();
        assert!(h.multi_label() >= s.preset.targets.min_multi_label);
    }

    #[test]
    fn unreachable_targets_are_a_generation_error() {
        let mut preset = OverlapPreset::sparse();
        preset.targets = OverlapTargets {
            min_multi_label: 0.99,
            min_three_plus: 0.9,
        };
        let err = generate_subject(&spec(preset.clone(), 4, 16), 0).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
        assert!(err.to_string().contains("unreachable"), "{err}");
        let err = generate_subject(&spec(preset, 2, 16), 0).unwrap_err();
        assert!(err.to_string().contains(">= 3 labels"), "{err}");
    }

    #[test]
    fn rejects_small_extents_and_single_class() {
        assert!(generate_subject(&spec(OverlapPreset::desk(), 1, 16), 0).is_err());
        assert!(generate_subject(&spec(OverlapPreset::desk(), 4, 8), 0).is_err());
    }

    #[test]
    fn input_layout_is_nine_peak_channels() {
        let v = generate_subject(&spec(OverlapPreset::desk(), 4, 16), 0).unwrap();
        assert_eq!(v.input.shape(), &[9, 16, 16, 16]);
        assert_eq!(v.labels.shape(), &[4, 16, 16, 16]);
    }
}
