use articulate::diff::{Tape, Tensor};
use articulate::export;
use articulate::fixtures::synthetic_ensemble;
use articulate::geom::{self, Vec3};
use articulate::grid::{self, Grid, Mask};
use articulate::ingest::{self, FeatureMap};
use articulate::mesh;
use articulate::optim::orbit_camera;
use articulate::render::{self, MeshTopology};
use articulate::skeleton2d;
use articulate::skeleton3d;
use proptest::prelude::*;

type Capsule = ((f64, f64), (f64, f64), f64);

fn blob(w: usize, h: usize, caps: &[Capsule]) -> Mask {
    Grid::from_fn(w, h, |x, y| {
        let p = (x as f64 + 0.5, y as f64 + 0.5);
        caps.iter().any(|&((ax, ay), (bx, by), r)| {
            let (ax, ay, bx, by) = (ax * w as f64, ay * h as f64, bx * w as f64, by * h as f64);
            let (dx, dy) = (bx - ax, by - ay);
            let l2 = dx * dx + dy * dy;
            let t = if l2 > 0.0 { (((p.0 - ax) * dx + (p.1 - ay) * dy) / l2).clamp(0.0, 1.0) } else { 0.0 };
            (p.0 - ax - t * dx).powi(2) + (p.1 - ay - t * dy).powi(2) <= r * r
        })
    })
}

fn blob_strategy() -> impl Strategy<Value = Mask> {
    let cap = ((0.1..0.9f64, 0.1..0.9f64), (0.0..1.0f64, 0.0..1.0f64), 1.0..5.0f64);
    (16usize..48, 16usize..48, prop::collection::vec(cap, 1..5)).prop_map(|(w, h, caps)| blob(w, h, &caps))
}

fn connected_blob() -> impl Strategy<Value = Mask> {
    blob_strategy().prop_map(|m| grid::largest_component(&m))
}

fn constant_features(h: usize, w: usize) -> FeatureMap {
    FeatureMap {
        height: h,
        width: w,
        dim: 1,
        data: vec![1.0; h * w],
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn thinning_keeps_components_and_is_idempotent(m in blob_strategy()) {
        let t = skeleton2d::thin(&m);
        prop_assert_eq!(grid::count_components(&t), grid::count_components(&grid::largest_component(&m)));
        prop_assert_eq!(skeleton2d::thin(&t), t);
    }

    #[test]
    fn distance_field_is_lipschitz(m in blob_strategy()) {
        let d = skeleton2d::distance_transform(&m).unwrap();
        for (x, y, &v) in m.iter_xy() {
            let here = d.at(x, y);
            prop_assert!(here >= 0.0);
            prop_assert_eq!(here == 0.0, !v);
            for (dx, dy) in [(1i64, 0i64), (0, 1), (1, 1), (1, -1)] {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if m.in_bounds(nx, ny) {
                    let step = ((dx * dx + dy * dy) as f64).sqrt();
                    prop_assert!((here - d.at(nx as usize, ny as usize)).abs() <= step + 1e-12);
                }
            }
        }
    }

    #[test]
    fn filtering_only_removes_joints(m in connected_blob()) {
        let Ok((tree, _, _)) = skeleton2d::extract(&m) else { return Ok(()) };
        let df = skeleton2d::distance_transform(&m).unwrap();
        let sk = skeleton2d::thin(&m);
        let raw = skeleton2d::build_tree(&sk, &skeleton2d::classify_points(&sk), &df).unwrap();
        prop_assert!(tree.joints.len() <= raw.joints.len());
        tree.validate().unwrap();
        let original: Vec<(usize, usize)> = raw.endpoints().iter().map(|&j| (raw.joints[j].x, raw.joints[j].y)).collect();
        for e in tree.endpoints() {
            prop_assert!(original.contains(&(tree.joints[e].x, tree.joints[e].y)));
        }
        for (i, j) in tree.joints.iter().enumerate() {
            prop_assert_eq!(j.radius, df.at(j.x, j.y), "joint {}", i);
        }
    }

    #[test]
    fn uplift_is_mirror_symmetric(m in connected_blob()) {
        let Ok((tree, _, _)) = skeleton2d::extract(&m) else { return Ok(()) };
        let dims = m.dims();
        let feat = constant_features(dims.0, dims.1);
        let desc = skeleton3d::describe_branches(&tree, &feat);
        let pairs = skeleton3d::match_symmetric(&desc, &tree, 1.0, 0.5);
        let (split, split_pairs) = skeleton3d::split_shared_parents(&tree, &pairs);
        split.validate().unwrap();
        prop_assert_eq!(split.endpoints().len(), tree.endpoints().len());
        let Ok(sk) = skeleton3d::uplift(&split, &split_pairs, dims) else { return Ok(()) };
        let mut swapped: Vec<usize> = (0..sk.joints.len()).collect();
        for &(a, b) in &sk.sym_pairs {
            swapped.swap(a, b);
        }
        for (i, p) in sk.joints.iter().enumerate() {
            prop_assert_eq!(skeleton3d::reflect(sk.joints[swapped[i]]), *p);
        }
        for (b, t) in sk.bones.iter().zip(&sk.rest_transforms) {
            let dir = geom::normalize(geom::sub(sk.joints[b.child], sk.joints[b.parent]));
            let z = geom::mat_vec(&t.rotation, [0.0, 0.0, 1.0]);
            prop_assert!(geom::norm(geom::sub(z, dir)) < 1e-6);
            prop_assert!(t.scale > 0.0);
        }
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients(
        a in prop::collection::vec(-2.0..2.0f64, 6),
        b in prop::collection::vec(-2.0..2.0f64, 6),
    ) {
        let run = |which: u8| {
            let mut t = Tape::new();
            let x = t.param(Tensor::new(2, 3, a.clone()));
            let y = t.param(Tensor::new(3, 2, b.clone()));
            let f = {
                let s = t.sin(x);
                let m = t.matmul(s, y);
                t.sum(m)
            };
            let g = {
                let e = t.scale(x, 0.3);
                let e = t.exp(e);
                let sq = t.square(y);
                let p = t.sum(sq);
                let q = t.mean(e);
                t.mul(p, q)
            };
            let out = match which {
                0 => f,
                1 => g,
                _ => t.add(f, g),
            };
            let grads = t.backward(out).unwrap();
            let again = t.backward(out).unwrap();
            assert_eq!(grads.get(x), again.get(x));
            (grads.get(x), grads.get(y))
        };
        let (fx, fy) = run(0);
        let (gx, gy) = run(1);
        let (hx, hy) = run(2);
        for ((f, g), h) in fx.data.iter().chain(&fy.data).zip(gx.data.iter().chain(&gy.data)).zip(hx.data.iter().chain(&hy.data)) {
            prop_assert!((f + g - h).abs() <= 1e-12 * (1.0 + h.abs()));
            prop_assert!(h.is_finite());
        }
    }

    #[test]
    fn iou_is_a_similarity(a in blob_strategy(), b in blob_strategy()) {
        let b = Grid::from_fn(a.width(), a.height(), |x, y| x < b.width() && y < b.height() && *b.get(x, y));
        let ab = export::iou(&a, &b);
        prop_assert_eq!(ab, export::iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        if a.count() > 0 {
            prop_assert_eq!(export::iou(&a, &a), 1.0);
        }
    }

    #[test]
    fn pck_is_a_fraction(pts in prop::collection::vec((0.0..100.0f64, 0.0..100.0f64, 0.0..10.0f64, any::<bool>()), 0..12)) {
        let truth: Vec<[f64; 2]> = pts.iter().map(|p| [p.0, p.1]).collect();
        let moved: Vec<Option<[f64; 2]>> = pts.iter().map(|p| p.3.then_some([p.0 + p.2, p.1])).collect();
        let v = export::pck(&moved, &truth, (100, 100), 0.05);
        prop_assert_eq!(v.is_none(), pts.is_empty());
        if let Some(v) = v {
            let hits = pts.iter().filter(|p| p.3 && p.2 < 5.0).count();
            prop_assert_eq!(v, hits as f64 / pts.len() as f64);
        }
    }

    #[test]
    fn silhouettes_stay_in_unit_range(az in -3.1..3.1f64, el in -0.8..0.8f64, sigma in 0.1..3.0f64, r in 0.2..1.2f64) {
        let ico = mesh::icosphere(1);
        let topo = MeshTopology::new(&ico.faces);
        let parts: Vec<Vec<Vec3>> = vec![
            ico.vertices.iter().map(|&v| geom::scale(v, r)).collect(),
            ico.vertices.iter().map(|&v| geom::add([0.5, 0.0, 0.0], geom::scale(v, 0.3))).collect(),
        ];
        let rb = render::rasterize_soft(&parts, &topo, &orbit_camera(az, el, 4.0, 3.0), sigma, (24, 24));
        prop_assert!(rb.silhouette.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn texture_colors_come_from_the_image(az in -3.1..3.1f64, el in -1.2..1.2f64, dist in 1.5..6.0f64, seed in 0u64..1000) {
        let (w, h) = (20, 14);
        // colors confined to [0.2, 0.7] so any out-of-image read or bad weight shows up
        let rgb = Grid::from_fn(w, h, |x, y| {
            let v = 0.2 + 0.5 * (((x * 7 + y * 13) as u64 + seed) % 17) as f32 / 16.0;
            [v, 0.7 - (v - 0.2), 0.45]
        });
        let ico = mesh::icosphere(1);
        let topo = MeshTopology::new(&ico.faces);
        let parts: Vec<Vec<Vec3>> = vec![
            ico.vertices.iter().map(|&v| geom::scale(v, 0.6)).collect(),
            ico.vertices.iter().map(|&v| geom::add([0.0, 0.9, 0.0], geom::scale(v, 0.3))).collect(),
        ];
        let cam = orbit_camera(az, el, dist, 2.0);
        let proj: Vec<_> = parts.iter().map(|p| render::project(&cam, p, (h, w))).collect();
        let vis = render::visibility(&proj, &topo, (h, w));
        match export::sample_texture(&parts, &ico.faces, &cam, &rgb, &vis, &[]) {
            Ok(mesh) => {
                for c in &mesh.colors {
                    for &ch in c {
                        prop_assert!((0.2 - 1e-6..=0.7 + 1e-6).contains(&ch), "channel {}", ch);
                    }
                }
            }
            Err(articulate::Error::NoVisibleVertices) => {}
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 4, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn ensembles_round_trip_through_files(seed in 0u64..100) {
        let e = synthetic_ensemble(2, 32, seed);
        // colors stored as 8-bit PNG: valid records sit on the 1/255 lattice
        let records: Vec<_> = e
            .records()
            .into_iter()
            .map(|mut r| {
                r.rgb = r.rgb.map(|c| c.map(|v| (v * 255.0).round() / 255.0));
                r
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        ingest::write_ensemble(dir.path(), &records).unwrap();
        let back = ingest::load_ensemble(dir.path(), &e.config).unwrap();
        prop_assert_eq!(back.len(), records.len());
        for (a, b) in records.iter().zip(&back) {
            prop_assert_eq!(&a.pseudo_mask, &b.pseudo_mask);
            prop_assert_eq!(&a.part_clusters, &b.part_clusters);
            for (p, q) in a.rgb.data().iter().zip(b.rgb.data()) {
                for k in 0..3 {
                    prop_assert!((p[k] - q[k]).abs() <= 1e-6);
                }
            }
            prop_assert_eq!(a.feature_map.dim, b.feature_map.dim);
            for (p, q) in a.feature_map.data.iter().zip(&b.feature_map.data) {
                prop_assert!((p - q).abs() <= 1e-6);
            }
        }
        let mut cfg = e.config.clone();
        cfg.reference_index = None;
        let r = ingest::select_reference(&back, &cfg).unwrap();
        prop_assert_eq!(r, ingest::select_reference(&back, &cfg).unwrap());
        prop_assert!(r < back.len());
    }
}
