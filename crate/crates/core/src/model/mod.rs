//! Encoder with a base decoder and an optional novel decoder, sigmoid heads
//! and a per-pixel embedding tap.

mod checkpoint;
pub mod slicing;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffkernel::{Bound, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed;

pub const ENCODER: &str = "enc";
pub const BASE_DECODER: &str = "dec_base";
pub const NOVEL_DECODER: &str = "dec_novel";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Channels of each encoder block; the depth is its length.
    pub widths: Vec<usize>,
    pub base_classes: usize,
    /// Zero for a base-step model.
    pub novel_classes: usize,
    pub dropout: f64,
    /// Concatenate encoder features into the decoder at matching resolution.
    pub skips: bool,
}

impl ModelConfig {
    pub fn desk(base_classes: usize) -> Self {
        Self {
            in_channels: 9,
            widths: vec![8, 16],
            base_classes,
            novel_classes: 0,
            dropout: 0.4,
            skips: true,
        }
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn embedding_channels(&self) -> usize {
        *self.widths.last().expect("validated depth")
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("encoder widths {:?} must be non-empty and positive", self.widths)));
        }
        if self.in_channels == 0 || self.base_classes == 0 {
            return Err(Error::Config("model needs input channels and base classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Required divisor of slice extents.
    pub fn divisor(&self) -> usize {
        1 << self.depth()
    }
}

/// Which outputs a forward pass should build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heads {
    pub base: bool,
    pub novel: bool,
    pub embedding: bool,
}

impl Heads {
    pub const ALL: Heads = Heads {
        base: true,
        novel: true,
        embedding: true,
    };
}

/// Dropout on during training (with a mask stream), off at evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub base: Option<Var>,
    pub novel: Option<Var>,
    /// `[E, H, W]`.
    pub embedding: Option<Var>,
}

/// Concrete per-slice outputs of an evaluation forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceOutputs {
    pub base: Tensor,
    pub novel: Option<Tensor>,
    pub embedding: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Incremental step: 0 for the base model, 1 after the novel step.
    pub step: u32,
    pub meta: CheckpointMeta,
}

fn uniform_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

fn add_conv(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
) -> Result<()> {
    let w = uniform_init(rng, &[cout, cin, k, k], cin * k * k, cout * k * k);
    store.insert(format!("{name}.w"), w, true)?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]), true)?;
    Ok(())
}

fn add_decoder(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, cfg: &ModelConfig, classes: usize) -> Result<()> {
    let d = cfg.depth();
    for level in (0..d).rev() {
        let from = if level + 1 == d { cfg.widths[d - 1] } else { cfg.widths[level + 1] };
        let skip = if cfg.skips { cfg.widths[level] } else { 0 };
        add_conv(store, rng, &format!("{prefix}.{level}"), from + skip, cfg.widths[level], 3)?;
    }
    add_conv(store, rng, &format!("{prefix}.head"), cfg.widths[0], classes, 1)
}

impl SegModel {
    /// Freshly initialized model; every stream derives from `seed`.
    pub fn new(config: ModelConfig, seed_: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seed::rng(&[seed_, 0xE4C]);
        let mut cin = config.in_channels;
        for (i, &w) in config.widths.iter().enumerate() {
            add_conv(&mut store, &mut rng, &format!("{ENCODER}.{i}"), cin, w, 3)?;
            cin = w;
        }
        let mut rng = seed::rng(&[seed_, 0xDB]);
        add_decoder(&mut store, &mut rng, BASE_DECODER, &config, config.base_classes)?;
        if config.novel_classes > 0 {
            let mut rng = seed::rng(&[seed_, 0xD7]);
            add_decoder(&mut store, &mut rng, NOVEL_DECODER, &config, config.novel_classes)?;
        }
        Ok(Self {
            config,
            params: store,
            step: 0,
            meta: CheckpointMeta::default(),
        })
    }

    pub fn classes(&self) -> usize {
        self.config.base_classes + self.config.novel_classes
    }

    /// Marks every parameter of a component (`ENCODER`, ...) trainable or frozen.
    pub fn set_component_trainable(&mut self, component: &str, trainable: bool) {
        let prefix = format!("{component}.");
        self.params.set_trainable_where(|n| n.starts_with(&prefix), trainable);
    }

    pub fn freeze(&mut self) {
        self.params.set_trainable(false);
    }

    fn var(&self, bound: &Bound, name: &str) -> Var {
        bound.var(self.params.position(name).expect("parameter registered at construction"))
    }

    fn conv(&self, g: &mut Graph, bound: &Bound, name: &str, x: Var) -> Result<Var> {
        let w = self.var(bound, &format!("{name}.w"));
        let b = self.var(bound, &format!("{name}.b"));
        g.conv2d(x, w, b)
    }

    fn decoder(&self, g: &mut Graph, bound: &Bound, prefix: &str, bottom: Var, skips: &[Var]) -> Result<Var> {
        let mut x = bottom;
        for level in (0..self.config.depth()).rev() {
            x = g.upsample2x(x)?;
            if self.config.skips {
                x = g.concat(&[x, skips[level]])?;
            }
            let y = self.conv(g, bound, &format!("{prefix}.{level}"), x)?;
            x = g.relu(y);
        }
        let logits = self.conv(g, bound, &format!("{prefix}.head"), x)?;
        Ok(g.sigmoid(logits))
    }

    /// Checks a `[C_in, H, W]` slice against the architecture.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let k = self.config.divisor();
        if shape.len() != 3 || shape[0] != self.config.in_channels {
            return Err(Error::dim(
                "forward",
                format!("expected [{}, H, W], got {shape:?}", self.config.in_channels),
            ));
        }
        if shape[1] % k != 0 || shape[2] % k != 0 || shape[1] == 0 || shape[2] == 0 {
            return Err(Error::dim(
                "forward",
                format!("slice extents {:?} must be divisible by {k} for depth {}", &shape[1..], self.config.depth()),
            ));
        }
        Ok(())
    }

    /// Builds the requested outputs for one slice node `x: [C_in, H, W]`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var, mode: Mode, heads: Heads) -> Result<Outputs> {
        self.check_input(g.shape(x))?;
        let mut rng = match mode {
            Mode::Train { dropout_seed } if self.config.dropout > 0.0 => Some(seed::rng(&[dropout_seed, 0xD0])),
            _ => None,
        };
        let keep = 1.0 - self.config.dropout;
        let mut skips = Vec::with_capacity(self.config.depth());
        let mut h = x;
        let mut features = x;
        for i in 0..self.config.depth() {
            let c = self.conv(g, bound, &format!("{ENCODER}.{i}"), h)?;
            let a = g.relu(c);
            skips.push(a);
            features = g.maxpool2x(a)?;
            h = match rng.as_mut() {
                Some(rng) => {
                    let shape = g.shape(features).to_vec();
                    let mask = Tensor::from_fn(&shape, |_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 });
                    let m = g.constant(mask);
                    g.mul(features, m)?
                }
                None => features,
            };
        }
        let base = if heads.base {
            Some(self.decoder(g, bound, BASE_DECODER, h, &skips)?)
        } else {
            None
        };
        let novel = if heads.novel {
            if self.config.novel_classes == 0 {
                return Err(Error::Config("model has no novel head".into()));
            }
            Some(self.decoder(g, bound, NOVEL_DECODER, h, &skips)?)
        } else {
            None
        };
        let embedding = if heads.embedding {
            let mut e = features;
            for _ in 0..self.config.depth() {
                e = g.upsample2x(e)?;
            }
            Some(e)
        } else {
            None
        };
        Ok(Outputs { base, novel, embedding })
    }

    /// Evaluation-mode forward pass of a concrete slice.
    pub fn predict_slice(&self, x: &Tensor) -> Result<SliceOutputs> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let heads = Heads {
            base: true,
            novel: self.config.novel_classes > 0,
            embedding: true,
        };
        let out = self.forward(&mut g, &bound, xv, Mode::Eval, heads)?;
        Ok(SliceOutputs {
            base: g.value(out.base.expect("requested")).clone(),
            novel: out.novel.map(|v| g.value(v).clone()),
            embedding: g.value(out.embedding.expect("requested")).clone(),
        })
    }

    /// Probabilities `[m + n, D, H, W]`: every slice along each axis is
    /// predicted on its own, and the three restacked volumes are averaged.
    pub fn predict_volume(&self, volume: &Tensor) -> Result<Tensor> {
        if volume.ndim() != 4 || volume.shape()[0] != self.config.in_channels {
            return Err(Error::dim(
                "predict_volume",
                format!("expected [{}, D, H, W], got {:?}", self.config.in_channels, volume.shape()),
            ));
        }
        let e = [volume.shape()[1], volume.shape()[2], volume.shape()[3]];
        let k = self.config.divisor();
        if e.iter().any(|&d| d % k != 0) {
            return Err(Error::dim(
                "predict_volume",
                format!("volume extents {e:?} must be divisible by {k}"),
            ));
        }
        let classes = self.classes();
        let nvox = e[0] * e[1] * e[2];
        let mut acc = vec![0.0; classes * nvox];
        let mut per_axis = vec![0.0; classes * nvox];
        for axis in 0..3 {
            for i in 0..e[axis] {
                let x = slicing::extract_slice(volume, axis, i, true)?;
                let out = self.predict_slice(&x)?;
                let probs = match &out.novel {
                    Some(n) => {
                        let mut d = out.base.data().to_vec();
                        d.extend_from_slice(n.data());
                        let mut shape = out.base.shape().to_vec();
                        shape[0] = classes;
                        Tensor::new(shape, d)?
                    }
                    None => out.base,
                };
                slicing::insert_slice(&mut per_axis, e, &probs, axis, i);
            }
            acc.iter_mut().zip(&per_axis).for_each(|(a, p)| *a += p);
        }
        acc.iter_mut().for_each(|a| *a /= 3.0);
        Tensor::new(vec![classes, e[0], e[1], e[2]], acc)
    }
}

/// Builds the step-`t` model from a base model: encoder and base decoder are
/// copied, the novel decoder is fresh. Returns `(frozen base copy, novel model)`.
pub fn lwf_init(base: &SegModel, novel_classes: usize, seed_: u64) -> Result<(SegModel, SegModel)> {
    if base.config.novel_classes != 0 || base.step != 0 {
        return Err(Error::Checkpoint(format!(
            "expected a base-step model, got step {} with {} novel classes",
            base.step, base.config.novel_classes
        )));
    }
    if novel_classes == 0 {
        return Err(Error::Config("novel step needs at least one novel class".into()));
    }
    let mut config = base.config.clone();
    config.novel_classes = novel_classes;
    let mut novel = SegModel::new(config, seed_)?;
    let mut missing = Vec::new();
    for i in 0..novel.params.len() {
        let name = novel.params.at(i).name.clone();
        if name.starts_with(NOVEL_DECODER) {
            continue;
        }
        match base.params.get(&name) {
            Some(p) if p.value.shape() == novel.params.at(i).value.shape() => {
                novel.params.set_value(i, p.value.clone())?;
            }
            _ => missing.push(name),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "base model does not match the architecture: {}",
            missing.join(", ")
        )));
    }
    novel.step = base.step + 1;
    novel.meta = base.meta.clone();
    let mut frozen = base.clone();
    frozen.freeze();
    Ok((frozen, novel))
}

#[cfg(test)]
mod tests;
