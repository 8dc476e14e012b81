//! Dataset generation, class splitting and on-disk layout.
//!
//! A dataset directory holds `manifest.json` plus one subdirectory per
//! subject containing `input.t` (f64) and `labels.t` (u8).

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::io::{read_tensor, write_tensor, DType};
use super::preset::OverlapPreset;
use super::tract::{dot, TractTemplate};
use super::{generate_from_template, MultiLabelVolume, SubjectSpec};
use crate::error::{Error, Result};
use crate::seed;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const INPUT_FILE: &str = "input.t";
pub const LABELS_FILE: &str = "labels.t";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    BaseTrain,
    NovelOneshot,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub role: Role,
    pub seed: u64,
}

/// Base and novel class ids, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
}

impl ClassSplit {
    pub fn new(mut base: Vec<usize>, mut novel: Vec<usize>) -> Result<Self> {
        base.sort_unstable();
        novel.sort_unstable();
        let s = Self { base, novel };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base.is_empty() || self.novel.is_empty() {
            return Err(Error::Config(format!("class split {self:?} has an empty side")));
        }
        let b: BTreeSet<_> = self.base.iter().collect();
        let n: BTreeSet<_> = self.novel.iter().collect();
        if b.len() != self.base.len() || n.len() != self.novel.len() {
            return Err(Error::Config(format!("class split {self:?} repeats a class")));
        }
        if let Some(c) = b.intersection(&n).next() {
            return Err(Error::Config(format!("class {c} is both base and novel")));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.base.len() + self.novel.len()
    }

    /// Checks that every id addresses one of `classes` label channels.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        if let Some(c) = self.base.iter().chain(&self.novel).find(|&&c| c >= classes) {
            return Err(Error::Config(format!("class {c} out of range for {classes} label channels")));
        }
        Ok(())
    }
}

/// Generator seed and parameters, stored verbatim in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub seed: u64,
    pub extent: [usize; 3],
    pub classes: usize,
    pub preset: OverlapPreset,
    /// Size of the novel class set.
    pub novel_classes: usize,
    pub base_train: usize,
    pub validation: usize,
    pub test: usize,
}

impl GeneratorParams {
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            extent: [32, 32, 32],
            classes: 12,
            preset: OverlapPreset::desk(),
            novel_classes: 4,
            base_train: 12,
            validation: 2,
            test: 4,
        }
    }

    fn spec(&self) -> SubjectSpec {
        SubjectSpec {
            template_seed: self.seed,
            extent: self.extent,
            classes: self.classes,
            preset: self.preset.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub subjects: Vec<SubjectEntry>,
    pub split: ClassSplit,
    pub generator: GeneratorParams,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.split.check_classes(self.generator.classes)?;
        let oneshot = self.subjects.iter().filter(|s| s.role == Role::NovelOneshot).count();
        if oneshot != 1 {
            return Err(Error::Config(format!(
                "manifest needs exactly one novel-oneshot subject, found {oneshot}"
            )));
        }
        let ids: BTreeSet<_> = self.subjects.iter().map(|s| &s.id).collect();
        if ids.len() != self.subjects.len() {
            return Err(Error::Config("duplicate subject ids in manifest".into()));
        }
        Ok(())
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = (usize, &SubjectEntry)> {
        self.subjects.iter().enumerate().filter(move |(_, s)| s.role == role)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// Parallel to `manifest.subjects`.
    pub volumes: Vec<MultiLabelVolume>,
}

impl Dataset {
    pub fn by_role(&self, role: Role) -> Vec<&MultiLabelVolume> {
        self.manifest.with_role(role).map(|(i, _)| &self.volumes[i]).collect()
    }

    pub fn oneshot(&self) -> &MultiLabelVolume {
        self.by_role(Role::NovelOneshot)[0]
    }
}

/// Groups classes by centroid proximity: repeatedly take the lowest free id
/// and its `size - 1` nearest free neighbours.
fn proximity_groups(template: &TractTemplate, size: usize) -> Vec<Vec<usize>> {
    let centroids = template.centroids();
    let mut free: Vec<usize> = (0..centroids.len()).collect();
    let mut groups = Vec::new();
    while !free.is_empty() {
        let seed_class = free.remove(0);
        let c = centroids[seed_class];
        let dist = |k: usize| {
            let d = [centroids[k][0] - c[0], centroids[k][1] - c[1], centroids[k][2] - c[2]];
            dot(d, d)
        };
        free.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
        let take = (size - 1).min(free.len());
        let mut group: Vec<usize> = std::iter::once(seed_class).chain(free.drain(..take)).collect();
        group.sort_unstable();
        groups.push(group);
        free.sort_unstable();
    }
    groups
}

/// Picks the novel set as one full-size proximity group chosen by `seed`.
pub fn split_classes(template: &TractTemplate, novel_classes: usize, seed_: u64) -> Result<ClassSplit> {
    let classes = template.tracts.len();
    if novel_classes == 0 || novel_classes >= classes {
        return Err(Error::Config(format!(
            "novel class count {novel_classes} must lie in 1..{classes}"
        )));
    }
    let groups: Vec<Vec<usize>> = proximity_groups(template, novel_classes)
        .into_iter()
        .filter(|g| g.len() == novel_classes)
        .collect();
    let mut rng = seed::rng(&[seed_, 0x5E71]);
    let novel = groups[rng.random_range(0..groups.len())].clone();
    let base = (0..classes).filter(|c| !novel.contains(c)).collect();
    ClassSplit::new(base, novel)
}

fn subject_plan(p: &GeneratorParams) -> Vec<SubjectEntry> {
    let mut out = Vec::new();
    let mut push = |role: Role, tag: u64, id: String, i: usize| {
        out.push(SubjectEntry {
            id,
            role,
            seed: seed::derive(&[p.seed, tag, i as u64]),
        })
    };
    for i in 0..p.base_train {
        push(Role::BaseTrain, 1, format!("base-{i:03}"), i);
    }
    push(Role::NovelOneshot, 2, "oneshot".into(), 0);
    for i in 0..p.validation {
        push(Role::Validation, 3, format!("val-{i:03}"), i);
    }
    for i in 0..p.test {
        push(Role::Test, 4, format!("test-{i:03}"), i);
    }
    out
}

/// Generates every subject of a dataset from one shared anatomy.
pub fn generate_dataset(params: &GeneratorParams) -> Result<Dataset> {
    let spec = params.spec();
    spec.check()?;
    let template = TractTemplate::generate(params.seed, params.extent, params.classes, &params.preset)?;
    let split = split_classes(&template, params.novel_classes, params.seed)?;
    let subjects = subject_plan(params);
    let volumes = std::thread::scope(|s| {
        let handles: Vec<_> = subjects
            .iter()
            .map(|e| s.spawn(|| generate_from_template(&template, &spec, e.seed, &e.id)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("subject generation panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    let manifest = DatasetManifest {
        subjects,
        split,
        generator: params.clone(),
    };
    manifest.validate()?;
    Ok(Dataset { manifest, volumes })
}

pub fn save_dataset(manifest: &DatasetManifest, volumes: &[MultiLabelVolume], dir: &Path) -> Result<()> {
    manifest.validate()?;
    if volumes.len() != manifest.subjects.len() {
        return Err(Error::Contract(format!(
            "{} volumes for {} manifest subjects",
            volumes.len(),
            manifest.subjects.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (entry, v) in manifest.subjects.iter().zip(volumes) {
        v.validate()?;
        let sub = dir.join(&entry.id);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        write_tensor(&sub.join(INPUT_FILE), &v.input, DType::F64)?;
        write_tensor(&sub.join(LABELS_FILE), &v.labels, DType::U8)?;
    }
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let mut volumes = Vec::with_capacity(manifest.subjects.len());
    for entry in &manifest.subjects {
        let sub = dir.join(&entry.id);
        let input = read_tensor(&sub.join(INPUT_FILE))?;
        let labels_path = sub.join(LABELS_FILE);
        let labels = read_tensor(&labels_path)?;
        if labels.ndim() == 4 && labels.shape()[0] != manifest.generator.classes {
            return Err(Error::format(
                &labels_path,
                format!("{} label channels, manifest declares {}", labels.shape()[0], manifest.generator.classes),
            ));
        }
        let v = MultiLabelVolume::new(input, labels, entry.id.clone())
            .map_err(|e| Error::format(&sub, e.to_string()))?;
        volumes.push(v);
    }
    Ok(Dataset { manifest, volumes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorParams {
        GeneratorParams {
            seed: 11,
            extent: [16, 16, 16],
            classes: 6,
            preset: OverlapPreset::desk(),
            novel_classes: 2,
            base_train: 2,
            validation: 1,
            test: 1,
        }
    }

    #[test]
    fn manifest_has_one_oneshot_subject_and_disjoint_split() {
        let d = generate_dataset(&small()).unwrap();
        assert_eq!(d.volumes.len(), 5);
        assert_eq!(d.by_role(Role::NovelOneshot).len(), 1);
        assert_eq!(d.manifest.split.novel.len(), 2);
        assert_eq!(d.manifest.split.total(), 6);
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let d = generate_dataset(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d.manifest, &d.volumes, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.manifest, d.manifest);
        for (a, b) in back.volumes.iter().zip(&d.volumes) {
            let bits = |v: &MultiLabelVolume| v.input.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn corrupted_file_error_names_the_file() {
        let d = generate_dataset(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d.manifest, &d.volumes, dir.path()).unwrap();
        let victim = dir.path().join("oneshot").join(LABELS_FILE);
        let mut bytes = fs::read(&victim).unwrap();
        bytes[1] = b'Z';
        fs::write(&victim, bytes).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("oneshot"), "{err}");
    }

    #[test]
    fn overlapping_split_is_rejected() {
        assert!(ClassSplit::new(vec![0, 1], vec![1, 2]).is_err());
        let mut d = generate_dataset(&small()).unwrap();
        d.manifest.subjects[0].role = Role::NovelOneshot;
        assert!(d.manifest.validate().is_err());
    }

    #[test]
    fn proximity_groups_cover_every_class_once() {
        let p = small();
        let t = TractTemplate::generate(p.seed, p.extent, 7, &p.preset).unwrap();
        let groups = proximity_groups(&t, 3);
        let mut all: Vec<usize> = groups.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        assert_eq!(groups.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 1]);
    }
}
