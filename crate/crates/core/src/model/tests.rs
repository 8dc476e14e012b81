use super::*;
use crate::diffkernel::grad_check;
use crate::model::slicing::channel_order;

fn tiny(base: usize, novel: usize) -> ModelConfig {
    ModelConfig {
        in_channels: 9,
        widths: vec![3, 4],
        base_classes: base,
        novel_classes: novel,
        dropout: 0.4,
        skips: true,
    }
}

fn input(shape: &[usize], seed_: u64) -> Tensor {
    let mut rng = seed::rng(&[seed_]);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn zero_heads_output_one_half() {
    let mut m = SegModel::new(tiny(2, 3), 1).unwrap();
    for name in ["dec_base.head.w", "dec_novel.head.w"] {
        let i = m.params.position(name).unwrap();
        let shape = m.params.at(i).value.shape().to_vec();
        m.params.set_value(i, Tensor::zeros(&shape)).unwrap();
    }
    let out = m.predict_slice(&input(&[9, 8, 8], 0)).unwrap();
    assert!(out.base.data().iter().all(|&v| v == 0.5));
    assert!(out.novel.unwrap().data().iter().all(|&v| v == 0.5));
}

#[test]
fn output_shapes_follow_the_heads() {
    let m = SegModel::new(tiny(2, 3), 1).unwrap();
    let out = m.predict_slice(&input(&[9, 8, 12], 0)).unwrap();
    assert_eq!(out.base.shape(), &[2, 8, 12]);
    assert_eq!(out.novel.unwrap().shape(), &[3, 8, 12]);
    assert_eq!(out.embedding.shape(), &[4, 8, 12]);
    assert!(out.base.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn indivisible_extents_name_the_divisor() {
    let m = SegModel::new(tiny(2, 0), 1).unwrap();
    let err = m.predict_slice(&input(&[9, 8, 6], 0)).unwrap_err().to_string();
    assert!(err.contains("divisible by 4"), "{err}");
}

#[test]
fn evaluation_is_deterministic_and_training_uses_dropout() {
    let m = SegModel::new(tiny(2, 0), 5).unwrap();
    let x = input(&[9, 8, 8], 3);
    assert_eq!(m.predict_slice(&x).unwrap(), m.predict_slice(&x).unwrap());
    let run = |mode| {
        let mut g = Graph::new();
        let b = m.params.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let o = m.forward(&mut g, &b, xv, mode, Heads { base: true, novel: false, embedding: false }).unwrap();
        g.value(o.base.unwrap()).clone()
    };
    let a = run(Mode::Train { dropout_seed: 1 });
    assert_eq!(a, run(Mode::Train { dropout_seed: 1 }));
    assert_ne!(a, run(Mode::Train { dropout_seed: 2 }));
    assert_ne!(a, run(Mode::Eval));
}

#[test]
fn lwf_init_copies_base_weights_and_starts_a_fresh_novel_head() {
    let base = SegModel::new(tiny(2, 0), 7).unwrap();
    let (frozen, novel) = lwf_init(&base, 3, 8).unwrap();
    assert!(frozen.params.iter().all(|p| !p.trainable));
    let x = input(&[9, 8, 8], 1);
    assert_eq!(novel.predict_slice(&x).unwrap().base, frozen.predict_slice(&x).unwrap().base);
    let fresh: Vec<_> = novel.params.iter().filter(|p| p.name.starts_with(NOVEL_DECODER) && p.name.ends_with(".w")).collect();
    assert!(!fresh.is_empty());
    for p in fresh {
        assert!(base.params.iter().all(|q| q.value != p.value));
    }
    assert_eq!(novel.step, 1);
    assert!(lwf_init(&novel, 3, 8).is_err());
}

#[test]
fn lwf_init_reports_mismatched_names() {
    let mut base = SegModel::new(tiny(2, 0), 7).unwrap();
    let mut renamed = ParamStore::new();
    for p in base.params.iter() {
        let name = if p.name == "enc.1.w" { "enc.9.w".to_string() } else { p.name.clone() };
        renamed.insert(name, p.value.clone(), true).unwrap();
    }
    base.params = renamed;
    let err = lwf_init(&base, 3, 8).unwrap_err().to_string();
    assert!(err.contains("enc.1.w"), "{err}");
}

#[test]
fn frozen_copy_survives_updates_to_the_novel_model() {
    let base = SegModel::new(tiny(2, 0), 7).unwrap();
    let (frozen, mut novel) = lwf_init(&base, 3, 8).unwrap();
    let snapshot = frozen.clone();
    let x = input(&[9, 8, 8], 2);
    let before = frozen.predict_slice(&x).unwrap();
    let mut g = Graph::new();
    let b = novel.params.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let o = novel.forward(&mut g, &b, xv, Mode::Train { dropout_seed: 0 }, Heads::ALL).unwrap();
    let s1 = g.sum(o.base.unwrap());
    let s2 = g.sum(o.novel.unwrap());
    let l = g.add(s1, s2).unwrap();
    let grads = g.backward(l).unwrap();
    for (i, (_, gr)) in novel.params.gradients(&b, &grads).into_iter().enumerate() {
        let v = novel.params.at(i).value.clone();
        let nv = Tensor::new(v.shape().to_vec(), v.data().iter().zip(gr.data()).map(|(a, d)| a - 0.1 * d).collect()).unwrap();
        novel.params.set_value(i, nv).unwrap();
    }
    assert_ne!(novel.predict_slice(&x).unwrap().base, before.base);
    assert_eq!(frozen, snapshot);
    assert_eq!(frozen.predict_slice(&x).unwrap(), before);
}

/// Direct loops over voxel coordinates, independent of the slicing helpers.
fn volume_oracle(m: &SegModel, v: &Tensor) -> Vec<f64> {
    let (c_in, d, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
    let e = [d, h, w];
    let classes = m.classes();
    let at = |c: usize, p: [usize; 3]| v.data()[((c * d + p[0]) * h + p[1]) * w + p[2]];
    let mut out = vec![0.0; classes * d * h * w];
    for axis in 0..3 {
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        let (rows, cols) = (e[others[0]], e[others[1]]);
        let order = channel_order(c_in, axis);
        for i in 0..e[axis] {
            let mut s = Vec::new();
            for &src in &order {
                for r in 0..rows {
                    for c in 0..cols {
                        let mut p = [0; 3];
                        p[axis] = i;
                        p[others[0]] = r;
                        p[others[1]] = c;
                        s.push(at(src, p));
                    }
                }
            }
            let pred = m.predict_slice(&Tensor::new(vec![c_in, rows, cols], s).unwrap()).unwrap();
            let mut probs = pred.base.data().to_vec();
            if let Some(n) = pred.novel {
                probs.extend_from_slice(n.data());
            }
            for k in 0..classes {
                for r in 0..rows {
                    for c in 0..cols {
                        let mut p = [0; 3];
                        p[axis] = i;
                        p[others[0]] = r;
                        p[others[1]] = c;
                        out[((k * d + p[0]) * h + p[1]) * w + p[2]] += probs[(k * rows + r) * cols + c] / 3.0;
                    }
                }
            }
        }
    }
    out
}

#[test]
fn volume_prediction_matches_the_slice_stack_oracle() {
    let m = SegModel::new(tiny(2, 1), 3).unwrap();
    let v = input(&[9, 4, 8, 12], 4);
    let got = m.predict_volume(&v).unwrap();
    assert_eq!(got.shape(), &[3, 4, 8, 12]);
    let want = volume_oracle(&m, &v);
    let err = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 1e-12, "{err}");
}

#[test]
fn constant_model_predicts_a_constant_volume() {
    let mut m = SegModel::new(tiny(2, 0), 3).unwrap();
    let i = m.params.position("dec_base.head.w").unwrap();
    m.params.set_value(i, Tensor::zeros(&[2, 3, 1, 1])).unwrap();
    let out = m.predict_volume(&input(&[9, 4, 4, 8], 1)).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.5));
}

#[test]
fn checkpoint_round_trip_reproduces_the_model() {
    let mut m = SegModel::new(tiny(2, 3), 9).unwrap();
    m.step = 1;
    m.meta.seed = 9;
    m.meta.loss_log_variances = Some([0.1, -0.2, 0.3]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, m);
    let x = input(&[9, 8, 8], 0);
    assert_eq!(back.predict_slice(&x).unwrap(), m.predict_slice(&x).unwrap());
    assert_eq!(encode_checkpoint(&back).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn checkpoint_with_a_renamed_parameter_is_rejected_by_name() {
    let m = SegModel::new(tiny(2, 0), 9).unwrap();
    let bytes = encode_checkpoint(&m).unwrap();
    let needle = b"dec_base.head.b";
    let pos = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
    let mut bad = bytes.clone();
    bad[pos + 9..pos + 13].copy_from_slice(b"HEAD");
    let err = decode_checkpoint(&bad, Path::new("x.ckpt")).unwrap_err().to_string();
    assert!(err.contains("dec_base.head.b") && err.contains("dec_base.HEAD.b"), "{err}");
    let mut v = bytes.clone();
    v[4] = 2;
    assert!(matches!(decode_checkpoint(&v, Path::new("x.ckpt")), Err(Error::Checkpoint(_))));
    let mut magic = bytes;
    magic[0] = b'Z';
    assert!(matches!(decode_checkpoint(&magic, Path::new("x.ckpt")), Err(Error::Format { .. })));
}

use std::path::Path;

/// Scalar probe of the whole network: weighted sum of both heads.
fn probe(m: &SegModel, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
    let o = m.forward(g, bound, x, Mode::Eval, Heads::ALL)?;
    let mut terms = Vec::new();
    for (k, v) in [o.base.unwrap(), o.novel.unwrap(), o.embedding.unwrap()].into_iter().enumerate() {
        let shape = g.shape(v).to_vec();
        let w = g.constant(Tensor::from_fn(&shape, |i| ((i * 7 + k * 3) % 11) as f64 / 11.0 - 0.4));
        let p = g.mul(v, w)?;
        terms.push(g.sum(p));
    }
    let s = g.add(terms[0], terms[1])?;
    g.add(s, terms[2])
}

#[test]
fn full_model_passes_gradient_check_on_parameters_and_input() {
    let cfg = ModelConfig {
        in_channels: 1,
        widths: vec![2, 3],
        base_classes: 2,
        novel_classes: 1,
        dropout: 0.0,
        skips: true,
    };
    let m = SegModel::new(cfg, 11).unwrap();
    let x = input(&[1, 8, 8], 5);

    let report = grad_check(
        |g, xv| {
            let b = m.params.bind(g, false);
            probe(&m, g, &b, xv)
        },
        &x,
        1e-6,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "input max error {}", report.max_error);

    let shapes: Vec<Vec<usize>> = m.params.iter().map(|p| p.value.shape().to_vec()).collect();
    let flat: Vec<f64> = m.params.iter().flat_map(|p| p.value.data().to_vec()).collect();
    let report = grad_check(
        |g, pv| {
            let mut vars = Vec::new();
            let mut at = 0;
            for s in &shapes {
                let n: usize = s.iter().product();
                let part = g.slice(pv, at, at + n)?;
                vars.push(g.reshape(part, s)?);
                at += n;
            }
            let b = Bound::from_vars(vars);
            let xv = g.constant(x.clone());
            probe(&m, g, &b, xv)
        },
        &Tensor::from_vec(flat),
        1e-6,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "parameter max error {}", report.max_error);
}
