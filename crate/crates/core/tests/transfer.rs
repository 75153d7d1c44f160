use articulate::export::{self, SurfaceSamples};
use articulate::geom::{self, Vec3};
use articulate::mesh;
use articulate::render::CameraPose;

fn rot_y(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

// pinhole with the optical axis on +z and the image centre at (w/2, h/2)
fn pinhole(p: Vec3, t: Vec3, f: f64, (h, w): (usize, usize)) -> [f64; 2] {
    let s = h.max(w) as f64 / 2.0;
    let q = geom::add(p, t);
    [w as f64 / 2.0 + s * f * q[0] / q[2], h as f64 / 2.0 + s * f * q[1] / q[2]]
}

#[test]
fn rigid_rotation_transfer_matches_analytic_map() {
    let dims = (256, 256);
    let ico = mesh::icosphere(3);
    let parts: Vec<Vec<Vec3>> = vec![
        ico.vertices.iter().map(|&v| geom::scale(v, 0.5)).collect(),
        ico.vertices.iter().map(|&v| geom::add([0.6, -0.2, 0.1], [v[0] * 0.3, v[1] * 0.15, v[2] * 0.2])).collect(),
    ];
    let cam = CameraPose {
        rotation: [0.0; 3],
        translation: [0.0, 0.0, 4.0],
        focal: 2.5,
    };
    let rot = rot_y(0.7);
    let moved: Vec<Vec<Vec3>> = parts.iter().map(|p| p.iter().map(|&x| geom::mat_vec(&rot, x)).collect()).collect();
    let src = SurfaceSamples::new(&parts, &ico.faces, &cam, dims);
    let dst = SurfaceSamples::new(&moved, &ico.faces, &cam, dims);

    // keypoints placed on visible samples of the source
    let mut kps = Vec::new();
    let mut expect = Vec::new();
    for (i, part) in parts.iter().enumerate() {
        for k in (0..part.len()).step_by(37) {
            if src.visible[i][k] {
                kps.push(pinhole(part[k], cam.translation, cam.focal, dims));
                expect.push(pinhole(geom::mat_vec(&rot, part[k]), cam.translation, cam.focal, dims));
            }
        }
    }
    assert!(kps.len() > 10);
    let radius = export::TRANSFER_RADIUS * 256.0;
    let got = export::transfer_keypoints(&src, &dst, &kps, radius);
    for (g, e) in got.iter().zip(&expect) {
        let g = g.expect("keypoint sits on a visible sample");
        assert!((g[0] - e[0]).abs() < 1e-3 && (g[1] - e[1]).abs() < 1e-3, "{g:?} vs {e:?}");
    }
}

#[test]
fn hidden_side_keypoints_are_not_transferred() {
    let dims = (64, 64);
    let ico = mesh::icosphere(2);
    let cam = CameraPose {
        rotation: [0.0; 3],
        translation: [0.0, 0.0, 4.0],
        focal: 2.0,
    };
    let parts = vec![ico.vertices.iter().map(|&v| geom::scale(v, 0.4)).collect::<Vec<_>>()];
    let s = SurfaceSamples::new(&parts, &ico.faces, &cam, dims);
    // far corner of the image: nothing within the radius
    let got = export::transfer_keypoints(&s, &s, &[[0.5, 0.5], [63.5, 0.5]], export::TRANSFER_RADIUS * 64.0);
    assert!(got.iter().all(Option::is_none));
}
