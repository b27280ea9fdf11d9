use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use treefield_core::pointcloud::resample;
use treefield_core::topobreak::{apply_break, polyline_position, smooth, BreakParams, DEFAULT_MIN_NODES};
use treefield_core::*;

fn random_volume(dims: [usize; 3], density: f64, seed: u64) -> VoxelVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims[0] * dims[1] * dims[2];
    let data = (0..n).map(|_| rng.gen_bool(density) as u8).collect();
    VoxelVolume::from_data(dims, [1.0; 3], 2, data).unwrap()
}

/// Union-find over every adjacent foreground pair.
fn oracle_components(v: &VoxelVolume, reach: i64) -> usize {
    let d = v.dims();
    let n = v.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut Vec<usize>, mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..n {
        if v.at(i) == 0 {
            continue;
        }
        let c = v.coord(i);
        for j in 0..n {
            if j <= i || v.at(j) == 0 {
                continue;
            }
            let e = v.coord(j);
            let dd: Vec<i64> = (0..3).map(|a| (c[a] as i64 - e[a] as i64).abs()).collect();
            let adjacent = dd.iter().all(|&x| x <= 1) && dd.iter().sum::<i64>() <= reach;
            if adjacent {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    let _ = d;
    (0..n).filter(|&i| v.at(i) > 0 && find(&mut parent, i) == i).count()
}

#[test]
fn components_match_union_find_oracle() {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..7)];
        let v = random_volume(dims, rng.gen_range(0.1..0.6), seed);
        assert_eq!(count_components(&v), oracle_components(&v, 3), "seed {seed}");
        assert_eq!(connected_components(&v, Connectivity::Six).count, oracle_components(&v, 1), "seed {seed}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distance_transform_matches_exhaustive_scan(
        dims in (1usize..7, 1usize..7, 1usize..7), density in 0.2f64..0.9, seed in any::<u64>()
    ) {
        let dims = [dims.0, dims.1, dims.2];
        let v = random_volume(dims, density, seed);
        prop_assume!(v.foreground_count() < v.len());
        let dt = distance_transform(&v).unwrap();
        let bg = v.background_indices();
        for i in 0..v.len() {
            let expected = if v.at(i) == 0 {
                0.0
            } else {
                let c = v.coord(i);
                bg.iter()
                    .map(|&j| {
                        let e = v.coord(j);
                        (0..3).map(|a| (c[a] as f64 - e[a] as f64).powi(2)).sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            };
            prop_assert!((dt.at(i) - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn dilation_matches_scan_and_is_monotone(seed in any::<u64>(), r in 0.0f64..3.5) {
        let dims = [7, 6, 5];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seeds: Vec<Voxel> = (0..3).map(|_| [rng.gen_range(0..7), rng.gen_range(0..6), rng.gen_range(0..5)]).collect();
        let d = dilate_ball(&seeds, r, dims).unwrap();
        let bigger = dilate_ball(&seeds, r + 0.7, dims).unwrap();
        prop_assert!(d.is_subset_of(&bigger));
        for i in 0..d.len() {
            let c = d.coord(i);
            let inside = seeds.iter().any(|s| (0..3).map(|a| (c[a] as f64 - s[a] as f64).powi(2)).sum::<f64>() <= r * r);
            prop_assert_eq!(d.at(i) > 0, inside);
        }
    }

    #[test]
    fn vvol_round_trip(dims in (1usize..9, 1usize..9, 1usize..9), classes in 1u16..20, seed in any::<u64>()) {
        let dims = [dims.0, dims.1, dims.2];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims[0] * dims[1] * dims[2];
        let data: Vec<u8> = (0..n).map(|_| rng.gen_range(0..classes.min(255)) as u8).collect();
        let mut v = VoxelVolume::from_data(dims, [0.5, 1.0, 2.5], classes, data).unwrap();
        v.set_spacing([0.7, 0.8, 0.9]).unwrap();
        prop_assert_eq!(decode_volume(&encode_volume(&v)).unwrap(), v);
    }

    #[test]
    fn knn_matches_brute_force(seed in any::<u64>(), k in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // coarse coordinates create many exact distance ties
        let pt = |rng: &mut ChaCha8Rng| [0; 3].map(|_| rng.gen_range(-8i32..=8) as f32 / 8.0);
        let refs: Vec<[f32; 3]> = (0..200).map(|_| pt(&mut rng)).collect();
        let queries: Vec<[f32; 3]> = (0..500).map(|_| pt(&mut rng)).collect();
        let nb = knn_indices(&queries, &refs, k).unwrap();
        for (qi, q) in queries.iter().enumerate() {
            let mut all: Vec<(f64, usize)> = refs
                .iter()
                .enumerate()
                .map(|(i, r)| ((0..3).map(|a| (q[a] as f64 - r[a] as f64).powi(2)).sum::<f64>(), i))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expected: Vec<usize> = all[..k].iter().map(|x| x.1).collect();
            prop_assert_eq!(nb.row(qi), &expected[..]);
        }
    }
}

#[test]
fn knn_handles_queries_far_outside_the_reference_box() {
    let refs: Vec<[f32; 3]> = (0..50).map(|i| [i as f32 / 50.0, 0.0, 0.0]).collect();
    let nb = knn_indices(&[[-5.0, 3.0, 0.0], [9.0, 0.0, 0.0]], &refs, 3).unwrap();
    assert_eq!(nb.row(0), &[0, 1, 2]);
    assert_eq!(nb.row(1), &[49, 48, 47]);
}

#[test]
fn thinning_preserves_components_and_is_idempotent() {
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [rng.gen_range(4..10), rng.gen_range(4..10), rng.gen_range(4..10)];
        let v = random_volume(dims, rng.gen_range(0.3..0.8), seed);
        let s = thin_3d(&v);
        assert!(s.is_subset_of(&v));
        assert_eq!(count_components(&s), count_components(&v), "seed {seed}");
        // background components counted in a one-voxel padded grid, since
        // everything outside the volume is background
        let bg = |x: &VoxelVolume| {
            let d = x.dims().map(|n| n + 2);
            let mut inv = VoxelVolume::from_indices(d, 0..d[0] * d[1] * d[2]).unwrap();
            for v in x.foreground_voxels() {
                inv.set([v[0] + 1, v[1] + 1, v[2] + 1], 0).unwrap();
            }
            connected_components(&inv, Connectivity::Six).count
        };
        assert_eq!(bg(&s), bg(&v), "seed {seed}");
        assert_eq!(thin_3d(&s), s, "seed {seed}");
    }
}

#[test]
fn resampling_rules() {
    let items: Vec<u32> = (0..30).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let sub = resample(&items, 10, &mut rng);
    assert_eq!(sub.iter().collect::<HashSet<_>>().len(), 10);
    let pad = resample(&items, 75, &mut rng);
    assert_eq!(&pad[..30], &items[..]);
    assert_eq!(pad.len(), 75);
}

#[test]
fn breakable_selection_is_a_length_filter() {
    for seed in 0..5u64 {
        let case = generate_case(&TreeSpec::desk().with_seed(seed)).unwrap();
        let v = &case.complete_tree;
        let g = build_skeleton_graph(&thin_3d(v), &distance_transform(v).unwrap());
        for min_nodes in [3, 8, 12] {
            let expected: Vec<usize> = (0..g.edges.len()).filter(|&i| g.edges[i].path.len() > min_nodes.max(7)).collect();
            assert_eq!(select_breakable_branches(&g, min_nodes), expected);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for &i in &expected {
                apply_break(v, &g, i, &mut rng).unwrap();
            }
        }
    }
}

#[test]
fn retention_falls_towards_the_middle_of_the_span() {
    // A straight rod: every candidate voxel's position along the span is
    // recomputed from the record and tallied as kept or removed.
    let dims = [40, 13, 13];
    let mut rod = VoxelVolume::mask(dims).unwrap();
    for z in 0..13 {
        for y in 0..13 {
            for x in 3..37 {
                if (y as f64 - 6.0).powi(2) + (z as f64 - 6.0).powi(2) <= 6.25 {
                    rod.set([x, y, z], 1).unwrap();
                }
            }
        }
    }
    let g = build_skeleton_graph(&thin_3d(&rod), &distance_transform(&rod).unwrap());
    assert_eq!(g.edges.len(), 1);
    let params = BreakParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut kept_edge, mut seen_edge, mut kept_mid, mut seen_mid) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..1000 {
        let (out, rec) = apply_break(&rod, &g, 0, &mut rng).unwrap();
        let pts: Vec<[f64; 3]> = rec.path.iter().map(|p| p.map(|c| c as f64)).collect();
        let axis = smooth(&pts, 2);
        let len: f64 = axis.windows(2).map(|w| (0..3).map(|a| (w[0][a] - w[1][a]).powi(2)).sum::<f64>().sqrt()).sum();
        if len < 20.0 {
            continue;
        }
        let reach = rec.capsule_radius * params.inflation;
        for i in rod.foreground_indices() {
            let c = rod.coord(i).map(|x| x as f64);
            if polyline_position(&pts, c).1 > reach {
                continue;
            }
            let t = polyline_position(&axis, c).0 / len;
            let kept = out.at(i) > 0;
            if (t - 0.05).abs() < 0.025 {
                seen_edge += 1;
                kept_edge += kept as usize;
            } else if (t - 0.45).abs() < 0.025 {
                seen_mid += 1;
                kept_mid += kept as usize;
            }
        }
    }
    assert!(seen_edge > 100 && seen_mid > 100, "{seen_edge} {seen_mid}");
    let (fe, fm) = (kept_edge as f64 / seen_edge as f64, kept_mid as f64 / seen_mid as f64);
    assert!(fe > fm, "edge {fe} vs middle {fm}");
}

#[test]
fn difference_components_match_union_find_oracle() {
    for seed in 0..4u64 {
        let case = generate_case(&TreeSpec::desk().with_seed(seed)).unwrap();
        let (corrupted, records) = corrupt(&case.complete_tree, 3, DEFAULT_MIN_NODES, seed).unwrap();
        assert!(!records.is_empty());
        let gt = gt_components(&case.complete_tree, &corrupted).unwrap();
        let diff = case.complete_tree.difference(&corrupted).unwrap();
        // the oracle is quadratic, so crop to the bounding box of the difference
        let fg = diff.foreground_voxels();
        let lo = [0, 1, 2].map(|a| fg.iter().map(|v| v[a]).min().unwrap());
        let hi = [0, 1, 2].map(|a| fg.iter().map(|v| v[a]).max().unwrap());
        let cd = [0, 1, 2].map(|a| hi[a] - lo[a] + 1);
        let crop = VoxelVolume::from_indices(
            cd,
            fg.iter().map(|v| (v[0] - lo[0]) + cd[0] * ((v[1] - lo[1]) + cd[1] * (v[2] - lo[2]))),
        )
        .unwrap();
        assert_eq!(gt.len(), oracle_components(&crop, 3));
    }
}

#[test]
fn single_break_components_equal_the_removed_set() {
    let case = generate_case(&TreeSpec::desk().with_seed(8)).unwrap();
    let (corrupted, records) = corrupt(&case.complete_tree, 1, DEFAULT_MIN_NODES, 3).unwrap();
    let gt = gt_components(&case.complete_tree, &corrupted).unwrap();
    let mut all: Vec<Voxel> = gt.components.iter().flatten().map(|&i| corrupted.coord(i)).collect();
    all.sort_unstable_by_key(|v| (v[2], v[1], v[0]));
    assert_eq!(all, records[0].removed);
}

#[test]
fn class_query_histograms_match_the_label_volume() {
    let case = generate_case(&TreeSpec::desk().with_seed(4)).unwrap();
    for (support, labels, segment) in
        [(&case.complete_tree, &case.tree_labels, false), (&case.lung_mask, &case.segment_labels, true)]
    {
        let n = 100_000;
        let b = if segment {
            sample_segment_queries(support, labels, n, 9).unwrap()
        } else {
            sample_label_queries(support, labels, n, 9).unwrap()
        };
        // more queries than voxels, so every voxel appears once and the rest
        // are uniform draws
        let fg = support.foreground_voxels();
        assert!(fg.len() < n);
        let mut hist = [0usize; 256];
        for &v in &fg {
            hist[labels.get(v) as usize] += 1;
        }
        let mut got = [0usize; 256];
        for &t in &b.targets {
            got[t as usize] += 1;
        }
        assert_eq!(got[0], 0);
        let extra = (n - fg.len()) as f64;
        for c in 1..256 {
            let p = hist[c] as f64 / fg.len() as f64;
            let expected = hist[c] as f64 + extra * p;
            let sigma = (extra * p * (1.0 - p)).sqrt();
            assert!((got[c] as f64 - expected).abs() <= 3.0 * sigma + 1e-9, "class {c}: {} vs {expected}", got[c]);
        }
    }
}

#[test]
fn weak_queries_disagree_no_more_than_the_estimate_allows() {
    use treefield_core::sampling::{weak_accuracy_estimate, NEAR_BREAK_RADIUS_FACTOR};
    for seed in 0..5u64 {
        let case = generate_case(&TreeSpec::desk().with_seed(seed)).unwrap();
        let (corrupted, _) = corrupt(&case.complete_tree, 2, DEFAULT_MIN_NODES, seed).unwrap();
        let weak = make_weak_sample(&corrupted, DEFAULT_MIN_NODES, seed).unwrap();
        let rec = std::slice::from_ref(&weak.synthetic_record);
        let b = sample_repair_queries(&weak.target_tree, &weak.input_tree, rec, 4096, 0.8, seed).unwrap();
        let norm = make_normalizer(corrupted.dims());
        let wrong = b
            .coords
            .iter()
            .zip(&b.targets)
            .filter(|(q, &t)| {
                let v = norm.containing_voxel(q.map(|c| c as f64), corrupted.dims()).unwrap();
                (case.complete_tree.get(v) > 0) != (t > 0)
            })
            .count();
        let est = weak_accuracy_estimate(&case.complete_tree, &corrupted, NEAR_BREAK_RADIUS_FACTOR).unwrap();
        let rate = wrong as f64 / b.len() as f64;
        assert!(rate <= 1.0 - est.accuracy + 0.02, "seed {seed}: {rate} vs {}", est.accuracy);
    }
}
