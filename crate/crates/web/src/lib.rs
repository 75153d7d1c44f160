//! Browser bindings: skeleton discovery on a drawn mask, a posable soft
//! silhouette render, and a frequency-band explorer for part surfaces.

use articulate::diff::Tensor;
use articulate::fixtures;
use articulate::grid::Grid;
use articulate::ingest::{EnsembleConfig, FeatureMap};
use articulate::model::{self, Scene};
use articulate::optim::orbit_camera;
use articulate::{skeleton2d, skeleton3d};
use wasm_bindgen::prelude::*;

fn js_err(e: articulate::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Runs 2D extraction and symmetric lifting on a `width x height` mask
/// (non-zero bytes are foreground). Returns JSON with the 2D tree, the 3D
/// skeleton and the number of symmetric leaf pairs.
#[wasm_bindgen]
pub fn discover_skeleton(mask: &[u8], width: usize, height: usize) -> Result<String, JsError> {
    if mask.len() != width * height {
        return Err(JsError::new("mask length does not match width * height"));
    }
    let m = Grid::from_vec(width, height, mask.iter().map(|&b| b != 0).collect());
    let (tree, _, _) = skeleton2d::extract(&m).map_err(js_err)?;
    // no semantic features in the browser: symmetry from geometry alone
    let mut feat = FeatureMap::new(height, width, 1);
    feat.data.iter_mut().for_each(|v| *v = 1.0);
    let sk = skeleton3d::discover(&tree, &feat, 1.0, 0.5, (height, width)).map_err(js_err)?;
    let out = serde_json::json!({
        "tree": tree,
        "skeleton": sk,
        "leaf_pairs": fixtures::leaf_pairs(&sk),
    });
    Ok(out.to_string())
}

fn quadruped_scene(size: usize) -> Scene {
    let cfg = fixtures::fixture_config(1, size);
    Scene::new(fixtures::quadruped_skeleton((size, size)), &cfg, 1, 0)
}

/// Soft silhouette (row-major, `size x size`) of the quadruped seen from
/// an orbit camera, legs swung by `gait` radians.
#[wasm_bindgen]
pub fn render_quadruped(size: usize, azimuth_deg: f64, elevation_deg: f64, sigma_px: f64, gait: f64) -> Vec<f32> {
    let size = size.clamp(16, 256);
    let mut scene = quadruped_scene(size);
    let mut pose = Tensor::zeros(scene.n_parts(), 3);
    for (b, sign) in [(3, 1.0), (4, -1.0), (5, -1.0), (6, 1.0)] {
        *pose.at_mut(b, 2) = sign * gait;
    }
    scene.params.insert(model::pose_name(0), pose);
    let d = scene.camera(0).translation[2];
    let cam = orbit_camera(azimuth_deg.to_radians(), elevation_deg.to_radians(), d, scene.focal);
    scene.set_camera(0, &cam);
    scene.render(0, sigma_px.max(1e-3)).silhouette.data.iter().map(|&v| v as f32).collect()
}

/// Depth-shaded render (`size x size`, 0 on background) of one part whose
/// deformation layers up to `band` carry random weights of `amplitude`.
/// Low bands bend the whole surface, high bands add fine ripples.
#[wasm_bindgen]
pub fn frequency_band(size: usize, band: usize, amplitude: f64, seed: u32, azimuth_deg: f64) -> Vec<f32> {
    let size = size.clamp(16, 256);
    let mut cfg = EnsembleConfig::new(1, (size, size));
    cfg.icosphere_level = 3;
    cfg.hidden_width = 16;
    let sk = fixtures::sphere_skeleton(0.6, (size, size));
    let mut scene = Scene::new(sk, &cfg, 1, seed as u64);
    let layers = cfg.layers();
    let mut state = seed as u64 ^ 0x9E37_79B9_7F4A_7C15;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    for l in 1..=layers {
        let inst = (l > cfg.shared_depth).then_some(0);
        let t = scene.params.get_mut(&model::layer_name(inst, 0, l, "wo")).expect("layer");
        let a = if l == band.clamp(1, layers) { amplitude } else { 0.0 };
        t.data.iter_mut().for_each(|v| *v = a * next());
    }
    let d = scene.camera(0).translation[2];
    scene.set_camera(0, &orbit_camera(azimuth_deg.to_radians(), 0.2, d, scene.focal));
    let depth = scene.render(0, 0.01).depth;
    let finite: Vec<f64> = depth.data.iter().copied().filter(|z| z.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    depth
        .data
        .iter()
        .map(|&z| if z.is_finite() { (0.25 + 0.75 * (hi - z) / (hi - lo).max(1e-9)) as f32 } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadruped_mask_discovers_two_leaf_pairs() {
        let m = fixtures::quadruped_mask(64);
        let bytes: Vec<u8> = m.data().iter().map(|&b| b as u8).collect();
        let json = discover_skeleton(&bytes, 64, 64).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["leaf_pairs"], 2);
    }

    #[test]
    fn renders_have_foreground() {
        let img = render_quadruped(48, 30.0, 10.0, 1.0, 0.3);
        assert_eq!(img.len(), 48 * 48);
        assert!(img.iter().filter(|&&v| v > 0.5).count() > 50);
        let a = frequency_band(48, 1, 0.2, 1, 0.0);
        let b = frequency_band(48, 4, 0.2, 1, 0.0);
        assert_eq!(a.len(), 48 * 48);
        assert_ne!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }
}
