//! Ensemble loading: run configuration, per-instance silhouettes, label
//! images, RGB images and dense feature maps.
//!
//! Per instance `i` the ensemble directory holds `i.rgb.png`, `i.mask.png`
//! (`> 127` is foreground), `i.clusters.png` (8-bit labels, 0 = background)
//! and `i.feat.bin` (see [`FeatureMap::read`]).

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};

pub const FEATURE_MAGIC: &[u8; 4] = b"HLFM";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub steps: usize,
    pub lr: f64,
}

/// Run configuration. Every key of `config.json` maps onto a field here;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n_instances: usize,
    #[serde(default)]
    pub reference_index: Option<usize>,
    /// `(h, w)` of masks and renders.
    pub image_size: (usize, usize),
    #[serde(default = "defaults::alpha_sem")]
    pub alpha_sem: f64,
    #[serde(default = "defaults::loss_weights")]
    pub loss_weights: BTreeMap<String, f64>,
    #[serde(default = "defaults::pe_frequencies")]
    pub pe_frequencies: Vec<f64>,
    #[serde(default = "defaults::stage_schedule")]
    pub stage_schedule: Vec<StageSpec>,

    /// Part-network layers `<= shared_depth` are shared across instances.
    #[serde(default = "defaults::shared_depth")]
    pub shared_depth: usize,
    #[serde(default = "defaults::hidden_width")]
    pub hidden_width: usize,
    #[serde(default = "defaults::icosphere_level")]
    pub icosphere_level: usize,
    /// Weight of the feature term in the symmetry score.
    #[serde(default = "defaults::one")]
    pub sym_lambda: f64,
    /// Symmetry score acceptance threshold.
    #[serde(default = "defaults::sym_tau")]
    pub sym_tau: f64,
    /// Rasterizer edge sharpness in pixels for the first stage.
    #[serde(default = "defaults::one")]
    pub sigma_px: f64,
    /// Multiplier applied to `sigma_px` at each subsequent stage.
    #[serde(default = "defaults::sigma_anneal")]
    pub sigma_anneal: f64,
    #[serde(default = "defaults::zoom_factor")]
    pub zoom_factor: usize,
    #[serde(default = "defaults::sem_pixels")]
    pub sem_pixels: usize,
    #[serde(default = "defaults::sem_points")]
    pub sem_points: usize,
    #[serde(default = "defaults::em_period")]
    pub em_period: usize,
    #[serde(default = "defaults::em_inner_steps")]
    pub em_inner_steps: usize,
    /// Azimuth x elevation samples for the camera search.
    #[serde(default = "defaults::camera_grid")]
    pub camera_grid: (usize, usize),
    /// Elevation range (radians, symmetric) covered by the camera search.
    #[serde(default = "defaults::elevation_range")]
    pub camera_elevation_range: f64,
    #[serde(default = "defaults::focal")]
    pub focal: f64,
    #[serde(default = "defaults::camera_distance")]
    pub camera_distance: f64,
    /// Apply the symmetry loss to posed joints instead of the rest skeleton.
    #[serde(default)]
    pub sym_on_posed_joints: bool,
    #[serde(default = "defaults::convergence_window")]
    pub convergence_window: usize,
}

mod defaults {
    use super::*;

    pub fn one() -> f64 {
        1.0
    }
    pub fn alpha_sem() -> f64 {
        1.0
    }
    pub fn loss_weights() -> BTreeMap<String, f64> {
        [
            ("sil", 1.0),
            ("part", 0.5),
            ("sem", 0.5),
            ("rot", 0.1),
            ("sym", 0.1),
            ("lap", 0.05),
            ("norm", 0.05),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
    pub fn pe_frequencies() -> Vec<f64> {
        (0..=6).map(|i| 2f64.powi(i)).collect()
    }
    pub fn stage_schedule() -> Vec<StageSpec> {
        vec![
            StageSpec {
                name: "camera".into(),
                steps: 500,
                lr: 1e-2,
            },
            StageSpec {
                name: "shared".into(),
                steps: 1000,
                lr: 5e-3,
            },
            StageSpec {
                name: "instance".into(),
                steps: 500,
                lr: 2e-3,
            },
        ]
    }
    pub fn shared_depth() -> usize {
        4
    }
    pub fn hidden_width() -> usize {
        64
    }
    pub fn icosphere_level() -> usize {
        3
    }
    pub fn sym_tau() -> f64 {
        0.5
    }
    pub fn sigma_anneal() -> f64 {
        0.5
    }
    pub fn zoom_factor() -> usize {
        4
    }
    pub fn sem_pixels() -> usize {
        1024
    }
    pub fn sem_points() -> usize {
        128
    }
    pub fn em_period() -> usize {
        50
    }
    pub fn em_inner_steps() -> usize {
        100
    }
    pub fn camera_grid() -> (usize, usize) {
        (12, 3)
    }
    pub fn elevation_range() -> f64 {
        0.5
    }
    pub fn focal() -> f64 {
        5.0
    }
    pub fn camera_distance() -> f64 {
        5.0
    }
    pub fn convergence_window() -> usize {
        50
    }
}

pub const LOSS_NAMES: [&str; 7] = ["sil", "part", "sem", "rot", "sym", "lap", "norm"];

impl EnsembleConfig {
    /// Configuration with every default filled in.
    pub fn new(n_instances: usize, image_size: (usize, usize)) -> Self {
        let json = serde_json::json!({ "n_instances": n_instances, "image_size": image_size });
        serde_json::from_value(json).expect("defaults deserialize")
    }

    /// Number of part-network layers (`pe_frequencies` holds one more entry).
    pub fn layers(&self) -> usize {
        self.pe_frequencies.len().saturating_sub(1)
    }

    pub fn weight(&self, loss: &str) -> f64 {
        self.loss_weights.get(loss).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.n_instances == 0 {
            return fail("n_instances must be >= 1".into());
        }
        if let Some(r) = self.reference_index {
            if r >= self.n_instances {
                return fail(format!(
                    "reference_index {r} out of range for {} instances",
                    self.n_instances
                ));
            }
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return fail("image_size must be positive".into());
        }
        if !(self.alpha_sem >= 0.0) {
            return fail("alpha_sem must be non-negative".into());
        }
        for (k, &v) in &self.loss_weights {
            if !LOSS_NAMES.contains(&k.as_str()) {
                return fail(format!("unknown loss weight `{k}`"));
            }
            if !(v >= 0.0) {
                return fail(format!("loss weight `{k}` must be non-negative"));
            }
        }
        if self.pe_frequencies.len() < 2 {
            return fail("pe_frequencies needs at least two entries".into());
        }
        if self.pe_frequencies.iter().any(|&w| !(w > 0.0)) {
            return fail("pe_frequencies must be positive".into());
        }
        if self.pe_frequencies.windows(2).any(|p| p[1] <= p[0]) {
            return fail("pe_frequencies must be strictly increasing".into());
        }
        if self.shared_depth == 0 || self.shared_depth > self.layers() {
            return fail(format!(
                "shared_depth {} must lie in 1..={}",
                self.shared_depth,
                self.layers()
            ));
        }
        if self.hidden_width == 0 || self.zoom_factor == 0 {
            return fail("hidden_width and zoom_factor must be positive".into());
        }
        if !(self.sigma_px > 0.0) || !(self.focal > 0.0) || !(self.camera_distance > 0.0) {
            return fail("sigma_px, focal and camera_distance must be positive".into());
        }
        if self.camera_grid.0 == 0 || self.camera_grid.1 == 0 {
            return fail("camera_grid must be non-empty".into());
        }
        for s in &self.stage_schedule {
            if !["camera", "shared", "instance"].contains(&s.name.as_str()) {
                return fail(format!("unknown stage `{}`", s.name));
            }
            if !(s.lr >= 0.0) {
                return fail(format!("stage `{}` has negative learning rate", s.name));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: EnsembleConfig =
            serde_json::from_str(text).map_err(|e| Error::json("config.json", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Dense per-pixel descriptors, row-major `h x w x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize) -> Self {
        FeatureMap {
            height,
            width,
            dim,
            data: vec![0.0; height * width * dim],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[f32] {
        let o = (y * self.width + x) * self.dim;
        &self.data[o..o + self.dim]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let o = (y * self.width + x) * self.dim;
        &mut self.data[o..o + self.dim]
    }

    /// Feature at a continuous pixel position, clamped to the grid.
    pub fn sample_nearest(&self, px: f64, py: f64) -> &[f32] {
        let x = (px.floor().max(0.0) as usize).min(self.width - 1);
        let y = (py.floor().max(0.0) as usize).min(self.height - 1);
        self.at(x, y)
    }

    /// Nearest-neighbour resampling to `(height, width)`.
    pub fn upsample_nearest(&self, height: usize, width: usize) -> FeatureMap {
        let mut out = FeatureMap::new(height, width, self.dim);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                let sx = x * self.width / width;
                out.at_mut(x, y).copy_from_slice(self.at(sx, sy));
            }
        }
        out
    }

    /// Parses the `HLFM` binary layout: magic, `u32` h, w, d (little
    /// endian), then `h*w*d` little-endian `f32` in row-major order.
    pub fn read_from(mut reader: impl Read) -> std::io::Result<FeatureMap> {
        let mut header = [0u8; 16];
        reader.read_exact(&mut header)?;
        if &header[..4] != FEATURE_MAGIC {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "bad feature-map magic",
            ));
        }
        let u = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
        let (height, width, dim) = (u(4), u(8), u(12));
        let count = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(dim))
            .ok_or_else(|| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, "feature map too large")
            })?;
        let mut bytes = vec![0u8; count * 4];
        reader.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(FeatureMap {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn write_to(&self, mut writer: impl Write) -> std::io::Result<()> {
        writer.write_all(FEATURE_MAGIC)?;
        for v in [self.height, self.width, self.dim] {
            writer.write_all(&(v as u32).to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        writer.write_all(&bytes)
    }

    pub fn read(path: &Path) -> Result<FeatureMap> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        FeatureMap::read_from(std::io::BufReader::new(file)).map_err(|e| Error::io(path, e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRecord {
    pub rgb: Grid<[f32; 3]>,
    pub pseudo_mask: Mask,
    pub feature_map: FeatureMap,
    pub part_clusters: Grid<u8>,
}

impl InstanceRecord {
    pub fn dims(&self) -> (usize, usize) {
        self.pseudo_mask.dims()
    }

    /// Number of distinct non-background cluster labels.
    pub fn distinct_clusters(&self) -> usize {
        let mut seen = [false; 256];
        for &l in self.part_clusters.data() {
            seen[l as usize] = true;
        }
        seen[1..].iter().filter(|&&s| s).count()
    }

    /// Checks grid dimensions, mask/cluster agreement and feature finiteness,
    /// upsamples a coarser feature grid and renormalizes foreground features.
    fn validate(mut self, index: usize) -> Result<Self> {
        let ctx = |m: String| Error::Validation(format!("instance {index}: {m}"));
        let dims = self.pseudo_mask.dims();
        if self.rgb.dims() != dims || self.part_clusters.dims() != dims {
            return Err(ctx(format!(
                "rgb {:?} / clusters {:?} do not match mask {:?}",
                self.rgb.dims(),
                self.part_clusters.dims(),
                dims
            )));
        }
        let fm = &self.feature_map;
        if fm.dim == 0 {
            return Err(ctx("feature dimension is zero".into()));
        }
        for (i, v) in fm.data.iter().enumerate() {
            if !v.is_finite() {
                let p = i / fm.dim;
                return Err(ctx(format!(
                    "non-finite feature value at pixel ({}, {})",
                    p % fm.width,
                    p / fm.width
                )));
            }
        }
        if (fm.height, fm.width) != dims {
            if fm.height > dims.0 || fm.width > dims.1 || fm.height == 0 || fm.width == 0 {
                return Err(ctx(format!(
                    "feature grid {}x{} does not fit mask {}x{}",
                    fm.height, fm.width, dims.0, dims.1
                )));
            }
            self.feature_map = fm.upsample_nearest(dims.0, dims.1);
        }
        for (x, y, &m) in self.pseudo_mask.iter_xy() {
            if !m {
                if *self.part_clusters.get(x, y) != 0 {
                    return Err(ctx(format!(
                        "cluster label on background pixel ({x}, {y})"
                    )));
                }
                continue;
            }
            let f = self.feature_map.at_mut(x, y);
            let n = f.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(ctx(format!("zero feature vector at foreground pixel ({x}, {y})")));
            }
            f.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
        }
        Ok(self)
    }
}

fn instance_paths(dir: &Path, i: usize) -> [PathBuf; 4] {
    [
        dir.join(format!("{i}.rgb.png")),
        dir.join(format!("{i}.mask.png")),
        dir.join(format!("{i}.clusters.png")),
        dir.join(format!("{i}.feat.bin")),
    ]
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing file"),
        ));
    }
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn load_instance(dir: &Path, i: usize) -> Result<InstanceRecord> {
    let [rgb_p, mask_p, clusters_p, feat_p] = instance_paths(dir, i);
    let rgb = open_image(&rgb_p)?.to_rgb8();
    let rgb = Grid::from_fn(rgb.width() as usize, rgb.height() as usize, |x, y| {
        let p = rgb.get_pixel(x as u32, y as u32).0;
        [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0]
    });
    let mask = open_image(&mask_p)?.to_luma8();
    let pseudo_mask = Grid::from_fn(mask.width() as usize, mask.height() as usize, |x, y| {
        mask.get_pixel(x as u32, y as u32).0[0] > 127
    });
    let clusters = open_image(&clusters_p)?.to_luma8();
    let part_clusters = Grid::from_fn(
        clusters.width() as usize,
        clusters.height() as usize,
        |x, y| clusters.get_pixel(x as u32, y as u32).0[0],
    );
    let feature_map = FeatureMap::read(&feat_p)?;
    InstanceRecord {
        rgb,
        pseudo_mask,
        feature_map,
        part_clusters,
    }
    .validate(i)
}

/// Loads and validates `config.n_instances` records from `dir`.
pub fn load_ensemble(dir: &Path, config: &EnsembleConfig) -> Result<Vec<InstanceRecord>> {
    config.validate()?;
    (0..config.n_instances)
        .map(|i| load_instance(dir, i))
        .collect()
}

fn save_png(img: impl Into<image::DynamicImage>, path: &Path) -> Result<()> {
    img.into().save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes records in the ensemble layout (the inverse of [`load_ensemble`]).
pub fn write_ensemble(dir: &Path, records: &[InstanceRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, r) in records.iter().enumerate() {
        let [rgb_p, mask_p, clusters_p, feat_p] = instance_paths(dir, i);
        let (h, w) = r.dims();
        let rgb = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let c = r.rgb.get(x as usize, y as usize);
            image::Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        });
        save_png(rgb, &rgb_p)?;
        let mask = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([if *r.pseudo_mask.get(x as usize, y as usize) {
                255
            } else {
                0
            }])
        });
        save_png(mask, &mask_p)?;
        let clusters = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([*r.part_clusters.get(x as usize, y as usize)])
        });
        save_png(clusters, &clusters_p)?;
        r.feature_map.write(&feat_p)?;
    }
    Ok(())
}

/// Picks the reference instance: the configured index if any, otherwise the
/// one with the most distinct part clusters, then the largest foreground,
/// then the lowest index.
pub fn select_reference(records: &[InstanceRecord], config: &EnsembleConfig) -> Result<usize> {
    if records.is_empty() {
        return Err(Error::Validation("empty ensemble".into()));
    }
    if let Some(r) = config.reference_index {
        return Ok(r);
    }
    let keys: Vec<(usize, usize)> = records
        .iter()
        .map(|r| (r.distinct_clusters(), r.pseudo_mask.count()))
        .collect();
    Ok(best_reference(&keys))
}

/// Index maximizing `(clusters, area)`, lowest index on ties.
pub(crate) fn best_reference(keys: &[(usize, usize)]) -> usize {
    let mut best = 0;
    for (i, k) in keys.iter().enumerate().skip(1) {
        if k > &keys[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(h: usize, w: usize, d: usize) -> InstanceRecord {
        let pseudo_mask = Grid::from_fn(w, h, |x, y| x >= w / 4 && y >= h / 4);
        let part_clusters = pseudo_mask.map(|&m| m as u8);
        let mut feature_map = FeatureMap::new(h, w, d);
        for y in 0..h {
            for x in 0..w {
                feature_map.at_mut(x, y)[0] = 1.0;
            }
        }
        InstanceRecord {
            rgb: Grid::new(w, h, [0.5, 0.25, 1.0]),
            pseudo_mask,
            feature_map,
            part_clusters,
        }
    }

    #[test]
    fn default_config_is_valid() {
        let c = EnsembleConfig::new(3, (64, 64));
        c.validate().unwrap();
        assert_eq!(c.layers(), 6);
        assert_eq!(c.weight("sil"), 1.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = EnsembleConfig::from_json(
            r#"{"n_instances": 2, "image_size": [8, 8], "bogus": 1}"#,
        );
        assert!(err.is_err());
    }

    #[test]
    fn invariants_are_checked() {
        let mut c = EnsembleConfig::new(2, (8, 8));
        c.reference_index = Some(2);
        assert!(c.validate().is_err());
        let mut c = EnsembleConfig::new(2, (8, 8));
        c.pe_frequencies = vec![1.0, 1.0, 2.0];
        assert!(c.validate().is_err());
        let mut c = EnsembleConfig::new(2, (8, 8));
        c.loss_weights.insert("sil".into(), -1.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn nearest_upsample_of_toy_grid() {
        let mut f = FeatureMap::new(2, 2, 1);
        f.data = vec![1.0, 2.0, 3.0, 4.0];
        let u = f.upsample_nearest(4, 4);
        #[rustfmt::skip]
        let expected = vec![
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(u.data, expected);
    }

    #[test]
    fn coarse_feature_grid_is_upsampled_on_validate() {
        let mut r = record(8, 8, 2);
        r.feature_map = FeatureMap::new(4, 4, 2);
        r.feature_map.data.iter_mut().for_each(|v| *v = 3.0);
        let r = r.validate(0).unwrap();
        assert_eq!((r.feature_map.height, r.feature_map.width), (8, 8));
        let f = r.feature_map.at(7, 7);
        assert!((f[0] as f64 - 0.5f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn nan_feature_names_instance_and_pixel() {
        let mut r = record(4, 4, 2);
        r.feature_map.at_mut(1, 2)[1] = f32::NAN;
        let msg = r.validate(5).unwrap_err().to_string();
        assert!(msg.contains("instance 5"), "{msg}");
        assert!(msg.contains("(1, 2)"), "{msg}");
    }

    #[test]
    fn background_label_is_rejected() {
        let mut r = record(4, 4, 1);
        r.part_clusters.set(0, 0, 3);
        assert!(r.validate(0).is_err());
    }

    #[test]
    fn reference_selection_rules() {
        let recs = vec![record(4, 4, 1)];
        let mut c = EnsembleConfig::new(1, (4, 4));
        assert_eq!(select_reference(&recs, &c).unwrap(), 0);
        c.reference_index = Some(0);
        assert_eq!(select_reference(&recs, &c).unwrap(), 0);
        assert_eq!(best_reference(&[(5, 100), (7, 200), (7, 300)]), 2);
        assert_eq!(best_reference(&[(7, 300), (7, 300)]), 0);
        assert!(select_reference(&[], &c).is_err());
    }

    #[test]
    fn explicit_reference_passes_through() {
        let recs: Vec<_> = (0..5).map(|_| record(4, 4, 1)).collect();
        let mut c = EnsembleConfig::new(5, (4, 4));
        c.reference_index = Some(4);
        assert_eq!(select_reference(&recs, &c).unwrap(), 4);
    }
}
