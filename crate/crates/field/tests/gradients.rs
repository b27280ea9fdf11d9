use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use treefield_field::{
    check_gradients, distance_weighted_fuse, encode_points, head_logits, head_probabilities, plane_rows,
    sample_query_embedding, ssa_fuse, toy_input, unet2d, Bound, FieldInput, FusionMode, GroupError, Head, Hyper, Model,
    QueryInput, Result, Tensor, Var,
};
use treefield_core::VoxelVolume;

const STEP: f64 = 1e-6;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Fixed random linear functional of `x`, as a `[1,1]` node.
fn project(b: &mut Bound<f64>, x: Var, seed: u64) -> Var {
    let n = b.g.value(x).len();
    let flat = b.g.reshape(x, &[1, n]);
    let c = b.g.constant(random(&[n, 1], seed));
    b.g.matmul(flat, c)
}

fn assert_all_below(errs: &[GroupError], tol: f64) {
    for e in errs {
        assert!(e.relative < tol, "{}: relative error {:.3e} over {} entries (|g| = {:.3e})", e.name, e.relative, e.checked, e.analytic_norm);
        assert!(e.analytic_norm > 0.0 || e.name.ends_with(".b"), "{}: gradient vanished", e.name);
        assert!(e.checked > 0, "{}: every sampled entry sits on a kink", e.name);
    }
}

fn names_with(model: &Model<f64>, prefix: &str) -> Vec<String> {
    model.params.names().iter().filter(|n| n.starts_with(prefix)).cloned().collect()
}

fn check(model: &Model<f64>, groups: &[String], per_group: usize, loss: impl Fn(&mut Bound<f64>) -> Result<Var>) -> Vec<GroupError> {
    let refs: Vec<&str> = groups.iter().map(|s| s.as_str()).collect();
    check_gradients(model, &refs, per_group, STEP, 11, loss).unwrap()
}

#[test]
fn point_encoder_matches_finite_differences() {
    let h = Hyper::toy();
    let model = Model::<f64>::new(h.clone(), 1).unwrap();
    let input = toy_input(&h, 5, 4, 2).unwrap();
    let mut groups = names_with(&model, "enc_s");
    groups.extend(names_with(&model, "enc_k"));
    let errs = check(&model, &groups, 40, |b| {
        let s = encode_points(b, &input.surface, "enc_s")?;
        let k = encode_points(b, &input.skeleton, "enc_k")?;
        let (ls, lk) = (project(b, s, 3), project(b, k, 4));
        Ok(b.g.add(ls, lk))
    });
    assert_all_below(&errs, 1e-4);
}

#[test]
fn attention_and_distance_weighting_match_finite_differences() {
    for fusion in [FusionMode::Ssa, FusionMode::DistanceWeighted] {
        let h = Hyper::toy().with_fusion(fusion);
        let mut model = Model::<f64>::new(h.clone(), 5).unwrap();
        let input = toy_input(&h, 6, 5, 6).unwrap();
        model.params.insert("x.phi_s", random(&[6, h.d], 7));
        model.params.insert("x.phi_k", random(&[5, h.d], 8));
        let mut groups = names_with(&model, if fusion == FusionMode::Ssa { "ssa." } else { "dw." });
        groups.extend(["x.phi_s".to_string(), "x.phi_k".to_string()]);
        let errs = check(&model, &groups, 30, |b| {
            let s = b.p("x.phi_s")?;
            let k = b.p("x.phi_k")?;
            let out = match fusion {
                FusionMode::Ssa => ssa_fuse(b, s, k, &input.knn, input.k)?,
                _ => distance_weighted_fuse(b, s, k, &input.knn, &input.knn_weights, input.k)?,
            };
            Ok(project(b, out, 9))
        });
        assert_all_below(&errs, 1e-4);
    }
}

#[test]
fn unet_matches_finite_differences() {
    for fusion in [FusionMode::Ssa, FusionMode::Late] {
        let h = Hyper::toy().with_fusion(fusion);
        let mut model = Model::<f64>::new(h.clone(), 12).unwrap();
        model.params.insert("x.planes", random(&[3, h.unet_input(), h.r, h.r], 13));
        let mut groups = names_with(&model, "unet.");
        groups.push("x.planes".to_string());
        let errs = check(&model, &groups, 12, |b| {
            let x = b.p("x.planes")?;
            let y = unet2d(b, x)?;
            Ok(project(b, y, 14))
        });
        assert_all_below(&errs, 1e-4);
    }
}

fn toy_queries(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| [0, 1, 2].map(|_| rng.gen_range(-1.1..1.1))).collect()
}

#[test]
fn query_sampling_matches_finite_differences() {
    let h = Hyper::toy();
    let mut model = Model::<f64>::new(h.clone(), 15).unwrap();
    model.params.insert("x.rows", random(&[3 * h.r * h.r, h.c], 16));
    let q = QueryInput::new(&toy_queries(8, 17), h.r, h.pe_bands);
    let groups = vec!["x.rows".to_string(), "pe.w".to_string(), "pe.b".to_string()];
    let errs = check(&model, &groups, 40, |b| {
        let rows = b.p("x.rows")?;
        let e = sample_query_embedding(b, rows, &q)?;
        Ok(project(b, e, 18))
    });
    assert_all_below(&errs, 1e-4);
}

#[test]
fn heads_match_finite_differences() {
    let h = Hyper::toy();
    let mut model = Model::<f64>::new(h.clone(), 19).unwrap();
    model.params.insert("x.h", random(&[8, h.head_input()], 20));
    for (head, prefix) in [(Head::Repair, "head_repair"), (Head::Label, "head_label"), (Head::Segment, "head_segment")] {
        let mut groups = names_with(&model, prefix);
        groups.push("x.h".to_string());
        let errs = check(&model, &groups, 30, |b| {
            let x = b.p("x.h")?;
            let p = head_probabilities(b, x, head)?;
            Ok(project(b, p, 21))
        });
        assert_all_below(&errs, 1e-4);
    }
}

#[test]
fn losses_match_finite_differences() {
    let h = Hyper::toy();
    let mut model = Model::<f64>::new(h, 22).unwrap();
    model.params.insert("x.z", random(&[9, 1], 23));
    model.params.insert("x.zc", random(&[9, 4], 24));
    let t: Arc<Vec<f64>> = Arc::new((0..9).map(|i| (i % 2) as f64).collect());
    let c: Arc<Vec<usize>> = Arc::new((0..9).map(|i| i % 4).collect());
    let errs = check(&model, &["x.z".to_string(), "x.zc".to_string()], 40, |b| {
        let z = b.p("x.z")?;
        let zc = b.p("x.zc")?;
        let l1 = b.g.bce_dice_with_logits(z, t.clone(), 0.5, 0.5);
        let l2 = b.g.cross_entropy_with_logits(zc, c.clone());
        Ok(b.g.add(l1, l2))
    });
    assert_all_below(&errs, 1e-5);
}

fn toy_tube() -> VoxelVolume {
    let mut v = VoxelVolume::mask([16, 16, 16]).unwrap();
    for x in 2..14 {
        for y in 6..9 {
            for z in 6..9 {
                v.set([x, y, z], 1).unwrap();
            }
        }
    }
    for y in 8..14 {
        for x in 7..10 {
            for z in 6..9 {
                v.set([x, y, z], 1).unwrap();
            }
        }
    }
    v
}

fn composite(b: &mut Bound<f64>, input: &FieldInput, q: &QueryInput) -> Result<Var> {
    let planes = Model::encode_field(b, input)?;
    let rows = plane_rows(b, planes);
    let e = sample_query_embedding(b, rows, q)?;
    let zr = head_logits(b, e, Head::Repair)?;
    let zl = head_logits(b, e, Head::Label)?;
    let zs = head_logits(b, e, Head::Segment)?;
    let lr = b.g.bce_dice_with_logits(zr, Arc::new(vec![1., 0., 0., 1., 1., 0., 1., 0.]), 0.5, 0.5);
    let ll = b.g.cross_entropy_with_logits(zl, Arc::new(vec![0, 1, 2, 3, 0, 1, 2, 3]));
    let ls = b.g.cross_entropy_with_logits(zs, Arc::new(vec![0, 1, 2, 0, 1, 2, 0, 1]));
    let s = b.g.add(lr, ll);
    Ok(b.g.add(s, ls))
}

#[test]
fn full_pipeline_matches_finite_differences_in_every_mode() {
    let tube = toy_tube();
    for fusion in FusionMode::ALL {
        let h = Hyper::toy().with_fusion(fusion);
        let mut model = Model::<f64>::new(h.clone(), 30).unwrap();
        // Near-uniform attention at this init puts W_Q/W_K gradients under the difference noise floor.
        if fusion == FusionMode::Ssa {
            for (name, gain) in [("ssa.wq", 4.0), ("ssa.wk", 4.0), ("ssa.wv", 16.0), ("ssa.wo", 16.0)] {
                for v in &mut model.params.get_mut(name).unwrap().data {
                    *v *= gain;
                }
            }
        }
        let input = FieldInput::from_volume(&h, &tube, 24, 10, 31).unwrap();
        let q = QueryInput::new(&toy_queries(8, 32), h.r, h.pe_bands);
        let groups: Vec<&str> = model.params.names().iter().map(|s| s.as_str()).collect();
        // Wider step than the stage checks: several groups carry ~1e-9 gradients here.
        let errs = check_gradients(&model, &groups, 8, 1e-4, 11, |b| composite(b, &input, &q)).unwrap();
        for e in &errs {
            assert!(e.checked > 0, "{fusion}: {}: no differentiable entry sampled", e.name);
            assert!(e.relative < 1e-3, "{fusion}: {}: relative error {:.3e}", e.name, e.relative);
        }
    }
}
