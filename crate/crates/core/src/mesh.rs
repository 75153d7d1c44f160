//! Triangle-mesh helpers: icosphere construction and connectivity queries.

use std::collections::{BTreeMap, BTreeSet};

/// Vertices and counter-clockwise (outward) triangles.
#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Unit icosphere: level 0 is the icosahedron, each level splits every
/// triangle into four. Level `k` has `10 * 4^k + 2` vertices.
pub fn icosphere(level: usize) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<[f64; 3]> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .into_iter()
    .map(normalize)
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut midpoints: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut mid = |a: usize, b: usize, verts: &mut Vec<[f64; 3]>| {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                let (p, q) = (verts[a], verts[b]);
                verts.push(normalize([
                    (p[0] + q[0]) / 2.0,
                    (p[1] + q[1]) / 2.0,
                    (p[2] + q[2]) / 2.0,
                ]));
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    TriMesh { vertices, faces }
}

/// Undirected edges `(min, max)`, sorted.
pub fn edges(faces: &[[usize; 3]]) -> Vec<(usize, usize)> {
    let mut set = BTreeSet::new();
    for f in faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            set.insert((a.min(b), a.max(b)));
        }
    }
    set.into_iter().collect()
}

/// Sorted neighbour lists per vertex.
pub fn vertex_neighbors(n_vertices: usize, faces: &[[usize; 3]]) -> Vec<Vec<usize>> {
    let mut nb: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_vertices];
    for (a, b) in edges(faces) {
        nb[a].insert(b);
        nb[b].insert(a);
    }
    nb.into_iter().map(|s| s.into_iter().collect()).collect()
}

/// Each interior edge with its two incident faces: `(a, b, face1, face2)`.
pub fn edge_faces(faces: &[[usize; 3]]) -> Vec<(usize, usize, usize, usize)> {
    let mut map: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (fi, f) in faces.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            map.entry((a.min(b), a.max(b))).or_default().push(fi);
        }
    }
    map.into_iter()
        .filter(|(_, fs)| fs.len() == 2)
        .map(|((a, b), fs)| (a, b, fs[0], fs[1]))
        .collect()
}

/// Pairs of faces sharing an edge.
pub fn face_adjacency(faces: &[[usize; 3]]) -> Vec<(usize, usize)> {
    edge_faces(faces)
        .into_iter()
        .map(|(_, _, f1, f2)| (f1, f2))
        .collect()
}

pub fn euler_characteristic(n_vertices: usize, faces: &[[usize; 3]]) -> i64 {
    n_vertices as i64 - edges(faces).len() as i64 + faces.len() as i64
}

/// True when every edge is shared by exactly two faces with opposite
/// orientation.
pub fn is_closed_manifold(faces: &[[usize; 3]]) -> bool {
    let mut directed: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for f in faces {
        for k in 0..3 {
            *directed.entry((f[k], f[(k + 1) % 3])).or_default() += 1;
        }
    }
    directed
        .iter()
        .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_counts() {
        for (level, v, f) in [(0, 12, 20), (1, 42, 80), (2, 162, 320), (3, 642, 1280)] {
            let m = icosphere(level);
            assert_eq!(m.vertices.len(), v);
            assert_eq!(m.faces.len(), f);
            assert_eq!(euler_characteristic(v, &m.faces), 2);
            assert!(is_closed_manifold(&m.faces));
        }
    }

    #[test]
    fn icosphere_is_unit_and_outward() {
        let m = icosphere(2);
        for v in &m.vertices {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        for f in &m.faces {
            let [a, b, c] = f.map(|i| m.vertices[i]);
            let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
            let n = [
                e1[1] * e2[2] - e1[2] * e2[1],
                e1[2] * e2[0] - e1[0] * e2[2],
                e1[0] * e2[1] - e1[1] * e2[0],
            ];
            assert!(n[0] * a[0] + n[1] * a[1] + n[2] * a[2] > 0.0);
        }
    }
}
