//! Texture-enhanced surfel maps.
//!
//! Points are binned into a voxel grid of side `v`. Each occupied voxel
//! becomes one disk of radius `√3·v` fitted to its points. The square
//! `[-r, r]²` around the centroid, in the disk plane, is split into `k × k`
//! texels. Every texel keeps one color per camera-distance bin (`n` bins);
//! the color is taken from the first observation that lands in that
//! `(bin, texel)` slot and is never overwritten afterwards.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::scene::{LidarScan, ObjectClass, Rgb, STATIC_ID};

pub type VoxelKey = [i32; 3];

const SMAP_MAGIC: &[u8; 4] = b"SMAP";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurfelConfig {
    /// Voxel side, meters.
    pub voxel_size: f64,
    /// Texels per disk side (odd).
    pub texel_grid: usize,
    pub distance_bins: usize,
    /// `distance_bins + 1` ascending edges starting at 0, meters.
    pub bin_edges: Vec<f64>,
}

impl Default for SurfelConfig {
    fn default() -> Self {
        Self::linear(0.2, 5, 10, 50.0)
    }
}

impl SurfelConfig {
    /// Config whose distance bins split `[0, max_distance]` evenly.
    pub fn linear(voxel_size: f64, texel_grid: usize, distance_bins: usize, max_distance: f64) -> Self {
        let bin_edges = (0..=distance_bins)
            .map(|i| max_distance * i as f64 / distance_bins as f64)
            .collect();
        Self {
            voxel_size,
            texel_grid,
            distance_bins,
            bin_edges,
        }
    }

    /// Same bins and texel grid with a different voxel size.
    pub fn with_voxel_size(&self, voxel_size: f64) -> Self {
        Self {
            voxel_size,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return bad(format!("voxel size {} must be positive", self.voxel_size));
        }
        if self.texel_grid == 0 || self.texel_grid.is_multiple_of(2) {
            return bad(format!("texel grid {} must be odd and >= 1", self.texel_grid));
        }
        if self.distance_bins == 0 {
            return bad("need at least one distance bin".into());
        }
        if self.bin_edges.len() != self.distance_bins + 1 {
            return bad(format!(
                "expected {} bin edges, got {}",
                self.distance_bins + 1,
                self.bin_edges.len()
            ));
        }
        if self.bin_edges[0] != 0.0 || self.bin_edges.windows(2).any(|w| !(w[0] < w[1])) {
            return bad("bin edges must start at 0 and strictly ascend".into());
        }
        Ok(())
    }

    pub fn radius(&self) -> f64 {
        3f64.sqrt() * self.voxel_size
    }

    pub fn texels_per_bin(&self) -> usize {
        self.texel_grid * self.texel_grid
    }

    pub fn texel_count(&self) -> usize {
        self.distance_bins * self.texels_per_bin()
    }

    pub fn distance_bin(&self, camera_distance: f64) -> usize {
        distance_bin(camera_distance, self)
    }
}

/// Bin `i` with `edge_i <= d < edge_{i+1}`; distances past the last edge
/// clamp to the last bin.
pub fn distance_bin(camera_distance: f64, config: &SurfelConfig) -> usize {
    let n = config.distance_bins;
    // first edge strictly greater than d, minus one
    let i = config.bin_edges.partition_point(|e| *e <= camera_distance);
    i.saturating_sub(1).min(n - 1)
}

pub fn voxel_of(point: &Vector3<f64>, voxel_size: f64) -> VoxelKey {
    [
        (point.x / voxel_size).floor() as i32,
        (point.y / voxel_size).floor() as i32,
        (point.z / voxel_size).floor() as i32,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum SemanticClass {
    Background = 0,
    Vehicle = 1,
    Pedestrian = 2,
    Cyclist = 3,
}

impl SemanticClass {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Background),
            1 => Some(Self::Vehicle),
            2 => Some(Self::Pedestrian),
            3 => Some(Self::Cyclist),
            _ => None,
        }
    }
}

impl From<ObjectClass> for SemanticClass {
    fn from(c: ObjectClass) -> Self {
        match c {
            ObjectClass::Vehicle => Self::Vehicle,
            ObjectClass::Pedestrian => Self::Pedestrian,
            ObjectClass::Cyclist => Self::Cyclist,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TexturedSurfel {
    pub voxel: VoxelKey,
    pub centroid: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub radius: f64,
    pub semantic_class: SemanticClass,
    pub object_id: u32,
    /// `(bin, row, col)` row-major, `n · k · k` entries.
    pub texels: Vec<Rgb>,
    pub texel_valid: Vec<bool>,
    /// Normal came from the view-ray fallback rather than a plane fit.
    pub degenerate: bool,
}

impl TexturedSurfel {
    #[inline]
    pub fn texel(&self, k: usize, bin: usize, row: usize, col: usize) -> Option<Rgb> {
        let i = (bin * k + row) * k + col;
        self.texel_valid[i].then(|| self.texels[i])
    }

    pub fn valid_texel_count(&self) -> usize {
        self.texel_valid.iter().filter(|v| **v).count()
    }

    /// Orthonormal in-plane axes `(u, w)` of the disk.
    pub fn basis(&self) -> (Vector3<f64>, Vector3<f64>) {
        disk_basis(&self.normal)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfelMap {
    pub config: SurfelConfig,
    pub surfels: BTreeMap<VoxelKey, TexturedSurfel>,
}

impl SurfelMap {
    pub fn new(config: SurfelConfig) -> Self {
        Self {
            config,
            surfels: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TexturedSurfel> {
        self.surfels.values()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfelGeometry {
    pub centroid: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub radius: f64,
    pub degenerate: bool,
}

/// Mean, smallest-eigenvalue normal oriented toward `first_observer`, and
/// the fixed `√3·v` radius. Fewer than three points, or points without a
/// well-defined plane, fall back to the negated view ray.
pub fn fit_surfel_geometry(
    points: &[Vector3<f64>],
    first_observer: &Vector3<f64>,
    config: &SurfelConfig,
) -> SurfelGeometry {
    assert!(!points.is_empty(), "surfel fit needs at least one point");
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let ray = centroid - first_observer;
    let fallback = || {
        let norm = ray.norm();
        if norm > 0.0 {
            -ray / norm
        } else {
            Vector3::z()
        }
    };

    let mut degenerate = points.len() < 3;
    let mut normal = Vector3::zeros();
    if !degenerate {
        let mut cov = Matrix3::zeros();
        for p in points {
            let d = p - centroid;
            cov += d * d.transpose();
        }
        cov /= n;
        let eig = SymmetricEigen::new(cov);
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b]));
        let (mid, max) = (eig.eigenvalues[idx[1]], eig.eigenvalues[idx[2]]);
        if max <= 0.0 || mid <= max * 1e-10 {
            // points coincide or are collinear
            degenerate = true;
        } else {
            normal = eig.eigenvectors.column(idx[0]).normalize();
            if normal.dot(&ray) > 0.0 {
                normal = -normal;
            }
        }
    }
    if degenerate {
        normal = fallback();
    }
    SurfelGeometry {
        centroid,
        normal,
        radius: config.radius(),
        degenerate,
    }
}

/// In-plane axes for a disk with the given unit normal: `u = normalize(n × e)`
/// with `e` the canonical axis least aligned with `n`, and `w = n × u`.
pub fn disk_basis(normal: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let a = normal.abs();
    let e = if a.x <= a.y && a.x <= a.z {
        Vector3::x()
    } else if a.y <= a.z {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let u = normal.cross(&e).normalize();
    let w = normal.cross(&u);
    (u, w)
}

/// `(row, col)` of the texel containing the projection of `point` on the
/// disk plane; rows run along `u`, columns along `w`.
pub fn texel_index(point: &Vector3<f64>, surfel: &TexturedSurfel, k: usize) -> Option<(usize, usize)> {
    let (u, w) = surfel.basis();
    let d = point - surfel.centroid;
    texel_cell(d.dot(&u), d.dot(&w), surfel.radius, k)
}

#[inline]
pub(crate) fn texel_cell(a: f64, b: f64, radius: f64, k: usize) -> Option<(usize, usize)> {
    let cell = 2.0 * radius / k as f64;
    let row = ((a + radius) / cell).floor();
    let col = ((b + radius) / cell).floor();
    let kf = k as f64;
    if row >= 0.0 && row < kf && col >= 0.0 && col < kf {
        Some((row as usize, col as usize))
    } else {
        None
    }
}

/// One LiDAR return as seen by the map builder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub point: Vector3<f64>,
    pub color: Option<Rgb>,
    /// Origin of the sensor that measured the point.
    pub sensor_origin: Vector3<f64>,
    /// Center of the camera that colored the point.
    pub camera_origin: Vector3<f64>,
}

/// Builds a map from observations given in capture order. Every surfel gets
/// `class` and `object_id`.
pub fn build_map_from_observations(
    observations: &[Observation],
    config: &SurfelConfig,
    class: SemanticClass,
    object_id: u32,
    exec: Execution,
) -> SurfelMap {
    let mut groups: BTreeMap<VoxelKey, Vec<usize>> = BTreeMap::new();
    for (i, o) in observations.iter().enumerate() {
        groups.entry(voxel_of(&o.point, config.voxel_size)).or_default().push(i);
    }
    let groups: Vec<(VoxelKey, Vec<usize>)> = groups.into_iter().collect();
    let k = config.texel_grid;
    let surfels = par::map_slice(exec, &groups, |(key, members)| {
        let pts: Vec<Vector3<f64>> = members.iter().map(|&i| observations[i].point).collect();
        let first = &observations[members[0]];
        let geom = fit_surfel_geometry(&pts, &first.sensor_origin, config);
        let mut surfel = TexturedSurfel {
            voxel: *key,
            centroid: geom.centroid,
            normal: geom.normal,
            radius: geom.radius,
            semantic_class: class,
            object_id,
            texels: vec![[0, 0, 0]; config.texel_count()],
            texel_valid: vec![false; config.texel_count()],
            degenerate: geom.degenerate,
        };
        let (u, w) = surfel.basis();
        // members are ascending, i.e. in capture order
        for &i in members {
            let o = &observations[i];
            let Some(color) = o.color else { continue };
            let d = o.point - surfel.centroid;
            let Some((row, col)) = texel_cell(d.dot(&u), d.dot(&w), surfel.radius, k) else {
                continue;
            };
            let bin = distance_bin((surfel.centroid - o.camera_origin).norm(), config);
            let slot = (bin * k + row) * k + col;
            if !surfel.texel_valid[slot] {
                surfel.texel_valid[slot] = true;
                surfel.texels[slot] = color;
            }
        }
        (*key, surfel)
    });
    SurfelMap {
        config: config.clone(),
        surfels: surfels.into_iter().collect(),
    }
}

/// A point routed away from the static map because it belongs to a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawObjectPoint {
    pub scan_index: usize,
    pub observation: Observation,
}

/// Static map from all `object_id == 0` points, plus the untouched points of
/// every annotated object keyed by track id.
///
/// `camera_origins[i]` is the center of the camera that colored scan `i`.
pub fn build_surfel_map(
    scans: &[LidarScan],
    camera_origins: &[Vector3<f64>],
    config: &SurfelConfig,
    exec: Execution,
) -> Result<(SurfelMap, BTreeMap<u32, Vec<RawObjectPoint>>)> {
    config.validate()?;
    if camera_origins.len() != scans.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scans but {} camera origins",
            scans.len(),
            camera_origins.len()
        )));
    }
    let mut statics = Vec::new();
    let mut objects: BTreeMap<u32, Vec<RawObjectPoint>> = BTreeMap::new();
    for (si, scan) in scans.iter().enumerate() {
        scan.validate()?;
        let sensor_origin = scan.sensor_pose.translation;
        for (pi, p) in scan.points.iter().enumerate() {
            let observation = Observation {
                point: scan.sensor_pose.transform_point(p),
                color: scan.point_colors.as_ref().and_then(|c| c[pi]),
                sensor_origin,
                camera_origin: camera_origins[si],
            };
            let id = scan.point_object_ids.as_ref().map_or(STATIC_ID, |ids| ids[pi]);
            if id == STATIC_ID {
                statics.push(observation);
            } else {
                objects.entry(id).or_default().push(RawObjectPoint {
                    scan_index: si,
                    observation,
                });
            }
        }
    }
    let map = build_map_from_observations(&statics, config, SemanticClass::Background, STATIC_ID, exec);
    Ok((map, objects))
}

fn put_f32s(out: &mut Vec<u8>, v: &Vector3<f64>) {
    for c in v.iter() {
        out.extend_from_slice(&(*c as f32).to_le_bytes());
    }
}

pub fn encode_map(map: &SurfelMap) -> Vec<u8> {
    let cfg = &map.config;
    let mut out = Vec::new();
    out.extend_from_slice(SMAP_MAGIC);
    out.extend_from_slice(&cfg.voxel_size.to_le_bytes());
    out.extend_from_slice(&(cfg.texel_grid as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.distance_bins as u32).to_le_bytes());
    for e in &cfg.bin_edges {
        out.extend_from_slice(&e.to_le_bytes());
    }
    out.extend_from_slice(&(map.surfels.len() as u64).to_le_bytes());
    let mask_len = cfg.texel_count().div_ceil(8);
    for s in map.surfels.values() {
        for c in s.voxel {
            out.extend_from_slice(&c.to_le_bytes());
        }
        put_f32s(&mut out, &s.centroid);
        put_f32s(&mut out, &s.normal);
        out.push(s.semantic_class as u8);
        out.extend_from_slice(&s.object_id.to_le_bytes());
        let mut mask = vec![0u8; mask_len];
        for (i, v) in s.texel_valid.iter().enumerate() {
            if *v {
                mask[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&mask);
        for (i, v) in s.texel_valid.iter().enumerate() {
            if *v {
                out.extend_from_slice(&s.texels[i]);
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated surfel map".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.array()?) as f64)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn vec3(&mut self) -> Result<Vector3<f64>> {
        Ok(Vector3::new(self.f32()?, self.f32()?, self.f32()?))
    }
}

pub fn decode_map(bytes: &[u8]) -> Result<SurfelMap> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != SMAP_MAGIC {
        return Err(Error::Format("missing SMAP header".into()));
    }
    let voxel_size = r.f64()?;
    let texel_grid = r.u32()? as usize;
    let distance_bins = r.u32()? as usize;
    if distance_bins > 1 << 16 || texel_grid > 1 << 10 {
        return Err(Error::Format("implausible surfel map config".into()));
    }
    let bin_edges = (0..=distance_bins).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let config = SurfelConfig {
        voxel_size,
        texel_grid,
        distance_bins,
        bin_edges,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("surfel map config: {e}")))?;
    let count = u64::from_le_bytes(r.array()?) as usize;
    let texel_count = config.texel_count();
    let mut map = SurfelMap::new(config.clone());
    for _ in 0..count {
        let voxel = [r.i32()?, r.i32()?, r.i32()?];
        let centroid = r.vec3()?;
        let normal = r.vec3()?;
        let class = r.take(1)?[0];
        let semantic_class = SemanticClass::from_u8(class)
            .ok_or_else(|| Error::Format(format!("unknown semantic class {class}")))?;
        let object_id = r.u32()?;
        let mask = r.take(texel_count.div_ceil(8))?;
        let texel_valid: Vec<bool> = (0..texel_count).map(|i| mask[i / 8] >> (i % 8) & 1 == 1).collect();
        let mut texels = vec![[0u8; 3]; texel_count];
        for (i, _) in texel_valid.iter().enumerate().filter(|(_, v)| **v) {
            texels[i] = r.array()?;
        }
        let surfel = TexturedSurfel {
            voxel,
            centroid,
            normal,
            radius: config.radius(),
            semantic_class,
            object_id,
            texels,
            texel_valid,
            degenerate: false,
        };
        if map.surfels.insert(voxel, surfel).is_some() {
            return Err(Error::Format(format!("duplicate voxel {voxel:?}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after surfel records".into()));
    }
    Ok(map)
}

pub fn write_map(path: &Path, map: &SurfelMap) -> Result<()> {
    fs::write(path, encode_map(map)).map_err(|e| Error::io(path, e))
}

pub fn read_map(path: &Path) -> Result<SurfelMap> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Format(format!("missing surfel map {}", path.display())),
        _ => Error::io(path, e),
    })?;
    decode_map(&bytes)
}
