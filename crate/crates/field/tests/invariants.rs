use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use treefield_field::input::{cell_center, triplane_map};
use treefield_field::{
    decode_checkpoint, encode_checkpoint, encode_points, head_probabilities, inverse_distance_weights, plane_rows,
    sample_query_embedding, ssa_fuse, toy_input, triplane_project, unet2d, BranchInput, Bound, FieldError, FieldInput,
    FusionMode, Head, Hyper, Model, QueryInput, Scalar, Tensor,
};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn zero_params<S: Scalar>(model: &mut Model<S>, prefix: &str) {
    let names: Vec<String> = model.params.names().iter().filter(|n| n.starts_with(prefix)).cloned().collect();
    for n in names {
        for v in &mut model.params.get_mut(&n).unwrap().data {
            *v = S::zero();
        }
    }
}

#[test]
fn zero_encoder_weights_give_zero_features() {
    let h = Hyper::toy();
    let mut model = Model::<f64>::new(h.clone(), 1).unwrap();
    zero_params(&mut model, "enc_s");
    let input = toy_input(&h, 20, 6, 2).unwrap();
    let mut b = Bound::new(&model, false);
    let phi = encode_points(&mut b, &input.surface, "enc_s").unwrap();
    assert!(b.g.value(phi).data.iter().all(|&v| v == 0.0));
}

#[test]
fn encoder_is_permutation_equivariant() {
    let h = Hyper::toy();
    let model = Model::<f64>::new(h.clone(), 3).unwrap();
    let input = toy_input(&h, 30, 6, 4).unwrap();
    let s = &input.surface;
    let n = s.len();
    let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
    let coords: Vec<[f64; 3]> = perm.iter().map(|&i| s.coords[i]).collect();
    let feats: Vec<f64> = perm.iter().flat_map(|&i| s.feats[i * s.in_dim..(i + 1) * s.in_dim].to_vec()).collect();
    let permuted = BranchInput::new(coords, feats, s.in_dim, h.grid).unwrap();
    let mut b = Bound::new(&model, false);
    let a = encode_points(&mut b, s, "enc_s").unwrap();
    let p = encode_points(&mut b, &permuted, "enc_s").unwrap();
    let (a, p) = (b.g.value(a), b.g.value(p));
    for (r, &i) in perm.iter().enumerate() {
        for (x, y) in p.row(r).iter().zip(a.row(i)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn encoder_rejects_mismatched_feature_width() {
    let h = Hyper::toy();
    let model = Model::<f64>::new(h.clone(), 3).unwrap();
    let input = toy_input(&h, 10, 6, 4).unwrap();
    let mut b = Bound::new(&model, false);
    assert!(matches!(encode_points(&mut b, &input.skeleton, "enc_s"), Err(FieldError::Shape(_))));
}

fn ssa_setup(k: usize) -> (Model<f64>, FieldInput) {
    let h = Hyper { k, ..Hyper::toy() };
    let mut model = Model::<f64>::new(h.clone(), 5).unwrap();
    model.params.insert("x.phi_s", random(&[12, h.d], 6));
    model.params.insert("x.phi_k", random(&[7, h.d], 7));
    (model, toy_input(&h, 12, 7, 8).unwrap())
}

#[test]
fn ssa_with_zero_output_projection_is_the_identity() {
    let (mut model, input) = ssa_setup(3);
    zero_params(&mut model, "ssa.wo");
    let mut b = Bound::new(&model, false);
    let (s, k) = (b.p("x.phi_s").unwrap(), b.p("x.phi_k").unwrap());
    let out = ssa_fuse(&mut b, s, k, &input.knn, input.k).unwrap();
    assert_eq!(b.g.value(out), b.g.value(s));
}

#[test]
fn ssa_with_one_neighbor_has_a_closed_form() {
    let (model, input) = ssa_setup(1);
    let d = model.hyper.d;
    let mut b = Bound::new(&model, false);
    let (s, k) = (b.p("x.phi_s").unwrap(), b.p("x.phi_k").unwrap());
    let out = ssa_fuse(&mut b, s, k, &input.knn, 1).unwrap();
    let (wv, wo) = (model.params.get("ssa.wv").unwrap(), model.params.get("ssa.wo").unwrap());
    let (ps, pk) = (b.g.value(s), b.g.value(k));
    for i in 0..ps.rows() {
        let j = input.knn[i];
        let v: Vec<f64> = (0..d).map(|c| (0..d).map(|a| pk.row(j)[a] * wv.data[a * d + c]).sum()).collect();
        for c in 0..d {
            let want = ps.row(i)[c] + (0..d).map(|a| v[a] * wo.data[a * d + c]).sum::<f64>();
            assert!((b.g.value(out).row(i)[c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn ssa_is_invariant_to_neighbor_order() {
    let (model, input) = ssa_setup(3);
    let mut shuffled = input.knn.clone();
    for row in shuffled.chunks_exact_mut(3) {
        row.rotate_left(1);
        row.swap(0, 1);
    }
    let mut b = Bound::new(&model, false);
    let (s, k) = (b.p("x.phi_s").unwrap(), b.p("x.phi_k").unwrap());
    let a = ssa_fuse(&mut b, s, k, &input.knn, 3).unwrap();
    let c = ssa_fuse(&mut b, s, k, &shuffled, 3).unwrap();
    let worst = b.g.value(a).data.iter().zip(&b.g.value(c).data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-10, "{worst}");
    assert!(matches!(ssa_fuse(&mut b, s, k, &input.knn[..input.knn.len() - 1], 3), Err(FieldError::NeighborCount { .. })));
}

#[test]
fn inverse_distance_weights_favor_a_coincident_neighbor() {
    let w = inverse_distance_weights(&[0.0, 0.8]);
    assert!(w[0] > 1.0 - 1e-5 && (w[0] + w[1] - 1.0).abs() < 1e-15);
    let w = inverse_distance_weights(&[1.0, 1.0, 2.0]);
    assert!((w[0] - 0.4).abs() < 1e-6 && (w[2] - 0.2).abs() < 1e-6);
}

#[test]
fn every_fusion_mode_yields_a_finite_field_of_the_same_shape() {
    for mode in FusionMode::ALL {
        let h = Hyper::toy().with_fusion(mode);
        let model = Model::<f64>::new(h.clone(), 9).unwrap();
        let input = toy_input(&h, 40, 12, 10).unwrap();
        let f = model.field(&input).unwrap();
        assert_eq!(f.rows.shape, vec![3 * h.r * h.r, h.c], "{mode}");
        assert!(f.is_finite(), "{mode}");
        assert!(f.rows.data.iter().any(|&v| v != 0.0));
        assert_eq!(mode.as_str().parse::<FusionMode>().unwrap(), mode);
    }
    assert!(matches!("cross".parse::<FusionMode>(), Err(FieldError::UnknownMode(_))));
}

/// Copies every shared parameter of `src` into `dst`; the first `dst` U-Net input block comes from `src`.
fn transplant(src: &Model<f64>, dst: &mut Model<f64>) {
    for name in dst.params.names().to_vec() {
        let Ok(t) = src.params.get(&name) else { continue };
        let target = dst.params.get_mut(&name).unwrap();
        if target.shape == t.shape {
            *target = t.clone();
        } else {
            let (cout, kd) = (target.shape[0], target.shape[1]);
            let ks = t.shape[1];
            for co in 0..cout {
                target.data[co * kd..co * kd + kd].copy_from_slice(&t.data[co * ks..co * ks + kd]);
            }
        }
    }
}

#[test]
fn late_fusion_with_zero_skeleton_features_is_surface_only() {
    let late = {
        let mut m = Model::<f64>::new(Hyper::toy().with_fusion(FusionMode::Late), 11).unwrap();
        zero_params(&mut m, "enc_k");
        m
    };
    let mut surface_only = Model::<f64>::new(Hyper::toy(), 12).unwrap();
    transplant(&late, &mut surface_only);
    zero_params(&mut surface_only, "ssa.wo");
    let input = toy_input(&late.hyper, 40, 12, 13).unwrap();
    let a = late.field(&input).unwrap();
    let b = surface_only.field(&input).unwrap();
    let worst = a.rows.data.iter().zip(&b.rows.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-12, "{worst}");
}

fn residual_identity_holds<S: Scalar>() {
    let h = Hyper::toy();
    let mut model = Model::<S>::new(h.clone(), 14).unwrap();
    zero_params(&mut model, "ssa.wo");
    let input = toy_input(&h, 50, 16, 15).unwrap();
    let field = model.field(&input).unwrap();
    let mut b = Bound::new(&model, false);
    let phi = encode_points(&mut b, &input.surface, "enc_s").unwrap();
    let planes = triplane_project(&mut b, phi, input.surface_planes.clone(), h.r).unwrap();
    let refined = unet2d(&mut b, planes).unwrap();
    let rows = plane_rows(&mut b, refined);
    let direct = b.g.value(rows);
    assert_eq!(direct.shape, field.rows.shape);
    assert!(direct.data.iter().zip(&field.rows.data).all(|(x, y)| x.to_f64().unwrap().to_bits() == y.to_f64().unwrap().to_bits()));
}

#[test]
fn zero_output_projection_reproduces_the_surface_only_field_bit_for_bit() {
    residual_identity_holds::<f64>();
    residual_identity_holds::<f32>();
}

fn project_points(points: &[[f64; 3]], feats: &Tensor<f64>, r: usize) -> Tensor<f64> {
    let model = Model::<f64>::new(Hyper::toy(), 0).unwrap();
    let mut b = Bound::new(&model, false);
    let x = b.g.constant(feats.clone());
    let p = triplane_project(&mut b, x, Arc::new(triplane_map(points, r)), r).unwrap();
    b.g.value(p).clone()
}

#[test]
fn triplane_projection_cases() {
    let r = 8;
    let one = project_points(&[[0.1, -0.3, 0.7]], &Tensor::from_vec(&[1, 2], vec![2.0, -3.0]), r);
    assert_eq!(one.shape, vec![3, 2, r, r]);
    for p in 0..3 {
        let plane = &one.data[p * 2 * r * r..(p + 1) * 2 * r * r];
        let nonzero: Vec<usize> = (0..r * r).filter(|&c| plane[c] != 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert_eq!((plane[nonzero[0]], plane[r * r + nonzero[0]]), (2.0, -3.0));
    }
    let two = project_points(&[[0.1, 0.1, 0.1], [0.11, 0.12, 0.13]], &Tensor::from_vec(&[2, 1], vec![1.0, 4.0]), r);
    assert_eq!(two.data.iter().filter(|&&v| v != 0.0).count(), 3);
    assert!(two.data.iter().filter(|&&v| v != 0.0).all(|&v| v == 2.5));
    let empty = project_points(&[], &Tensor::from_vec(&[0, 3], vec![]), r);
    assert!(empty.data.iter().all(|&v| v == 0.0));
}

#[test]
fn triplane_projection_conserves_mass_per_channel() {
    let r = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let pts: Vec<[f64; 3]> = (0..600).map(|_| [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0))).collect();
    let feats = random(&[600, 5], 17);
    let planes = project_points(&pts, &feats, r);
    let map = triplane_map(&pts, r);
    for p in 0..3 {
        for ch in 0..5 {
            let mut mass = 0.0;
            for cell in 0..r * r {
                let count = map.entries(p * r * r + cell).count() as f64;
                mass += planes.data[(p * 5 + ch) * r * r + cell] * count;
            }
            let want: f64 = (0..600).map(|i| feats.row(i)[ch]).sum();
            assert!((mass - want).abs() < 1e-9, "plane {p} channel {ch}: {mass} vs {want}");
        }
    }
}

#[test]
fn unet_shape_determinism_and_resolution_check() {
    let h = Hyper::toy();
    let model = Model::<f64>::new(h.clone(), 18).unwrap();
    let x = random(&[3, h.d, h.r, h.r], 19);
    let mut b = Bound::new(&model, false);
    let v = b.g.constant(x.clone());
    let y1 = unet2d(&mut b, v).unwrap();
    let v2 = b.g.constant(x);
    let y2 = unet2d(&mut b, v2).unwrap();
    assert_eq!(b.g.value(y1).shape, vec![3, h.c, h.r, h.r]);
    assert_eq!(b.g.value(y1), b.g.value(y2));
    let odd = b.g.constant(random(&[3, h.d, 18, 18], 20));
    assert!(matches!(unet2d(&mut b, odd), Err(FieldError::Resolution(18))));
    assert!(matches!(Model::<f64>::new(Hyper { r: 18, ..Hyper::toy() }, 0), Err(FieldError::Resolution(18))));
}

#[test]
fn query_sampling_hits_cell_values_and_midpoints() {
    let h = Hyper::toy();
    let r = h.r;
    let model = Model::<f64>::new(h.clone(), 21).unwrap();
    let field = random(&[3 * r * r, h.c], 22);
    let (i, j, k) = (3usize, 9usize, 12usize);
    let center = [cell_center(i, r), cell_center(j, r), cell_center(k, r)];
    let mid = [(cell_center(i, r) + cell_center(i + 1, r)) / 2.0, center[1], center[2]];
    let q = QueryInput::new(&[center, mid], r, h.pe_bands);
    let mut b = Bound::new(&model, false);
    let rows = b.g.constant(field.clone());
    let e = sample_query_embedding(&mut b, rows, &q).unwrap();
    let e = b.g.value(e);
    assert_eq!(e.cols(), 3 * h.c + h.pe_dim);
    let cell = |p: usize, v: usize, u: usize| field.row(p * r * r + v * r + u);
    let expect = [cell(0, j, i), cell(1, k, j), cell(2, k, i)];
    for p in 0..3 {
        assert_eq!(&e.row(0)[p * h.c..(p + 1) * h.c], expect[p]);
    }
    for c in 0..h.c {
        let xy = (cell(0, j, i)[c] + cell(0, j, i + 1)[c]) / 2.0;
        let xz = (cell(2, k, i)[c] + cell(2, k, i + 1)[c]) / 2.0;
        assert!((e.row(1)[c] - xy).abs() < 1e-15);
        assert_eq!(e.row(1)[h.c + c], cell(1, k, j)[c]);
        assert!((e.row(1)[2 * h.c + c] - xz).abs() < 1e-15);
    }
}

#[test]
fn positional_encoding_is_projected_to_sixty_four() {
    let h = Hyper::desk();
    let model = Model::<f32>::new(h.clone(), 23).unwrap();
    assert_eq!(model.params.get("pe.w").unwrap().shape, vec![63, 64]);
    let field = Tensor::<f32>::zeros(&[3 * h.r * h.r, h.c]);
    let q = QueryInput::new(&[[0.2, -0.4, 2.0]], h.r, h.pe_bands);
    let mut b = Bound::new(&model, false);
    let rows = b.g.constant(field);
    let e = sample_query_embedding(&mut b, rows, &q).unwrap();
    assert_eq!(b.g.value(e).cols() - 3 * h.c, 64);
}

#[test]
fn heads_with_zero_final_layer_are_uninformative() {
    let h = Hyper::toy();
    let mut model = Model::<f64>::new(h.clone(), 24).unwrap();
    for prefix in ["head_repair.l3", "head_label.l3", "head_segment.l3"] {
        zero_params(&mut model, prefix);
    }
    let x = random(&[6, h.head_input()], 25);
    let mut b = Bound::new(&model, false);
    let xv = b.g.constant(x);
    let pr = head_probabilities(&mut b, xv, Head::Repair).unwrap();
    assert!(b.g.value(pr).data.iter().all(|&p| p == 0.5));
    for (head, n) in [(Head::Label, h.label_classes), (Head::Segment, h.segment_classes)] {
        let p = head_probabilities(&mut b, xv, head).unwrap();
        assert!(b.g.value(p).data.iter().all(|&v| (v - 1.0 / n as f64).abs() < 1e-15));
    }
}

#[test]
fn classifier_heads_emit_distributions() {
    let h = Hyper::toy();
    let model = Model::<f32>::new(h.clone(), 26).unwrap();
    let x = random(&[50, h.head_input()], 27).cast::<f32>();
    let mut b = Bound::new(&model, false);
    let xv = b.g.constant(x);
    for head in [Head::Label, Head::Segment] {
        let p = head_probabilities(&mut b, xv, head).unwrap();
        let p = b.g.value(p);
        for i in 0..p.rows() {
            assert!((p.row(i).iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    let pr = head_probabilities(&mut b, xv, Head::Repair).unwrap();
    assert!(b.g.value(pr).data.iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn checkpoints_round_trip_and_reject_bad_magic() {
    let model = Model::<f32>::new(Hyper::toy().with_fusion(FusionMode::DistanceWeighted), 28).unwrap();
    let bytes = encode_checkpoint(&model).unwrap();
    assert_eq!(&bytes[..4], b"TFCK");
    let back: Model<f32> = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back, model);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tfck");
    treefield_field::save_checkpoint(&model, &path).unwrap();
    assert_eq!(treefield_field::load_checkpoint::<f32>(&path).unwrap(), model);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint::<f32>(&bad), Err(FieldError::Checkpoint(m)) if m == "bad magic"));
    assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 4]).is_err());
}

#[test]
fn initialization_is_bounded_and_seeded() {
    let h = Hyper::toy();
    let a = Model::<f64>::new(h.clone(), 29).unwrap();
    assert_eq!(a, Model::<f64>::new(h.clone(), 29).unwrap());
    assert_ne!(a.params.checksum(), Model::<f64>::new(h.clone(), 30).unwrap().params.checksum());
    for (name, shape, fan_in) in treefield_field::parameter_layout(&h) {
        let t = a.params.get(&name).unwrap();
        assert_eq!(t.shape, shape);
        let bound = 1.0 / (fan_in as f64).sqrt();
        assert!(t.data.iter().all(|v| v.abs() <= bound), "{name}");
    }
}
