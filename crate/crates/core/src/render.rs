//! Z-buffered software rasterizer for surfel maps.
//!
//! Each visible surfel is split into its `k × k` texel quads in the disk
//! plane. Quads are clipped against the near plane, projected, and drawn as
//! two triangles with perspective-correct depth. The nearest fragment wins a
//! pixel; fragments within [`DEPTH_TIE`] of each other go to the smaller
//! surfel index.
//!
//! The image is processed in horizontal bands. Bands are independent, so
//! they can be rasterized in parallel without changing the result.

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::Intrinsics;
use crate::error::{Error, Result};
use crate::objects::ObjectModel;
use crate::par::{self, Execution};
use crate::pose::PoseSE3;
use crate::scene::{Rgb, STATIC_ID};
use crate::surfel::{SemanticClass, SurfelMap, TexturedSurfel};

/// `surfel_index` value of pixels no fragment reached.
pub const EMPTY_INDEX: u32 = u32::MAX;

/// Depth differences below this are ties, meters.
pub const DEPTH_TIE: f64 = 1e-6;

const BAND_ROWS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    /// camera→world
    pub pose: PoseSE3,
    pub intrinsics: Intrinsics,
    pub near_clip: f64,
}

impl CameraSpec {
    pub fn new(pose: PoseSE3, intrinsics: Intrinsics) -> Self {
        Self {
            pose,
            intrinsics,
            near_clip: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.pose.validate()?;
        if !(self.near_clip > 0.0) {
            return Err(Error::Validation(format!("near clip {} must be positive", self.near_clip)));
        }
        Ok(())
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.translation
    }
}

/// Projects a world point; `None` when it is not beyond the near plane.
pub fn project(point: &Vector3<f64>, camera: &CameraSpec) -> Option<(f64, f64, f64)> {
    let p = camera.pose.inverse().transform_point(point);
    camera.intrinsics.project(&p, camera.near_clip)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<Rgb>,
    pub semantic: Vec<SemanticClass>,
    /// Track id of the winning surfel, 0 for static surfels and empty pixels.
    pub instance: Vec<u32>,
    /// Camera-frame z, `+∞` where empty.
    pub depth: Vec<f64>,
    pub surfel_index: Vec<u32>,
    /// Pixels to the nearest non-empty pixel.
    pub distance_map: Vec<f64>,
    pub coverage_ratio: f64,
}

impl RenderOutput {
    pub fn empty(width: u32, height: u32) -> Self {
        let n = (width * height) as usize;
        Self {
            width,
            height,
            rgb: vec![[0, 0, 0]; n],
            semantic: vec![SemanticClass::Background; n],
            instance: vec![0; n],
            depth: vec![f64::INFINITY; n],
            surfel_index: vec![EMPTY_INDEX; n],
            distance_map: vec![f64::INFINITY; n],
            coverage_ratio: 0.0,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.rgb.len()
    }

    #[inline]
    pub fn is_covered(&self, i: usize) -> bool {
        self.surfel_index[i] != EMPTY_INDEX
    }

    pub fn covered_mask(&self) -> Vec<bool> {
        (0..self.pixel_count()).map(|i| self.is_covered(i)).collect()
    }

    /// Checks that the emptiness of every channel agrees.
    pub fn check_consistency(&self) -> Result<()> {
        for i in 0..self.pixel_count() {
            let covered = self.is_covered(i);
            if covered != self.depth[i].is_finite() || covered != (self.distance_map[i] == 0.0) {
                return Err(Error::Validation(format!("channels disagree at pixel {i}")));
            }
        }
        let expect = coverage_ratio(self);
        if self.coverage_ratio != expect {
            return Err(Error::Validation("stale coverage ratio".into()));
        }
        Ok(())
    }
}

pub fn coverage_ratio(output: &RenderOutput) -> f64 {
    coverage_of(&output.covered_mask())
}

fn coverage_of(covered: &[bool]) -> f64 {
    if covered.is_empty() {
        return 0.0;
    }
    covered.iter().filter(|c| **c).count() as f64 / covered.len() as f64
}

/// Where to draw an object model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub track_id: u32,
    /// object→world
    pub pose: PoseSE3,
    /// Picks among per-scan models of the same track (nearest tracked time).
    pub timestamp: Option<f64>,
}

/// Exact Euclidean distance from each pixel to the nearest `false` entry of
/// `empty` (row-major `width × height`). All-empty input yields `+∞`.
pub fn distance_map(empty: &[bool], width: usize, height: usize) -> Vec<f64> {
    distance_map_with(empty, width, height, Execution::Sequential)
}

/// Meijster's two-pass algorithm on integer squared distances.
pub fn distance_map_with(empty: &[bool], width: usize, height: usize, exec: Execution) -> Vec<f64> {
    assert_eq!(empty.len(), width * height, "mask size");
    if width == 0 || height == 0 {
        return Vec::new();
    }
    let inf = (width + height) as i64;

    // column pass: vertical distance to the nearest non-empty pixel
    let columns: Vec<Vec<i64>> = par::map_range(exec, width, |x| {
        let mut g = vec![inf; height];
        if !empty[x] {
            g[0] = 0;
        }
        for y in 1..height {
            g[y] = if !empty[y * width + x] { 0 } else { (g[y - 1] + 1).min(inf) };
        }
        for y in (0..height.saturating_sub(1)).rev() {
            if g[y + 1] < g[y] {
                g[y] = g[y + 1] + 1;
            }
        }
        g
    });

    let mut out = vec![0.0; width * height];
    let inf_sq = inf * inf;
    par::for_each_chunk_mut(exec, &mut out, width, |y, row| {
        let g = |i: usize| columns[i][y];
        let f = |x: usize, i: usize| {
            let dx = x as i64 - i as i64;
            dx * dx + g(i) * g(i)
        };
        let sep = |i: usize, u: usize| {
            let (i2, u2) = (i as i64, u as i64);
            (u2 * u2 - i2 * i2 + g(u) * g(u) - g(i) * g(i)).div_euclid(2 * (u2 - i2))
        };
        let mut s = vec![0usize; width];
        let mut t = vec![0usize; width];
        let mut q: isize = 0;
        for u in 1..width {
            while q >= 0 && f(t[q as usize], s[q as usize]) > f(t[q as usize], u) {
                q -= 1;
            }
            if q < 0 {
                q = 0;
                s[0] = u;
            } else {
                let w = 1 + sep(s[q as usize], u);
                if w >= 0 && (w as usize) < width {
                    q += 1;
                    s[q as usize] = u;
                    t[q as usize] = w as usize;
                }
            }
        }
        for u in (0..width).rev() {
            let d2 = f(u, s[q as usize]);
            row[u] = if d2 >= inf_sq { f64::INFINITY } else { (d2 as f64).sqrt() };
            if u == t[q as usize] {
                q -= 1;
            }
        }
    });
    out
}

/// A surfel ready for rasterization: camera-frame geometry plus the texel
/// colors chosen for this view.
#[derive(Debug, Clone)]
struct ScreenSurfel {
    index: u32,
    centroid: Vector3<f64>,
    u: Vector3<f64>,
    w: Vector3<f64>,
    radius: f64,
    k: usize,
    /// `k × k`, row-major.
    colors: Vec<Option<Rgb>>,
    semantic: SemanticClass,
    instance: u32,
    rows: (usize, usize),
}

/// Texel color for one cell: the requested bin, else the nearest valid bin
/// (lower bin on ties).
fn pick_texel(s: &TexturedSurfel, k: usize, bins: usize, bin: usize, row: usize, col: usize) -> Option<Rgb> {
    if let Some(c) = s.texel(k, bin, row, col) {
        return Some(c);
    }
    (1..bins).find_map(|step| {
        let below = bin.checked_sub(step).and_then(|b| s.texel(k, b, row, col));
        below.or_else(|| (bin + step < bins).then(|| s.texel(k, bin + step, row, col)).flatten())
    })
}

struct Source<'a> {
    map: &'a SurfelMap,
    /// object→world
    pose: PoseSE3,
    instance: u32,
}

fn prepare(
    source: &Source<'_>,
    first_index: u32,
    camera: &CameraSpec,
    exec: Execution,
) -> Vec<ScreenSurfel> {
    let surfels: Vec<&TexturedSurfel> = source.map.surfels.values().collect();
    let cfg = &source.map.config;
    let k = cfg.texel_grid;
    let world_to_cam = camera.pose.inverse();
    let to_cam = world_to_cam.compose(&source.pose);
    let intr = &camera.intrinsics;
    let prepared = par::map_range(exec, surfels.len(), |i| {
        let s = surfels[i];
        let centroid_world = source.pose.transform_point(&s.centroid);
        let normal_world = source.pose.transform_vector(&s.normal);
        let view = centroid_world - camera.center();
        if normal_world.dot(&view) >= 0.0 {
            return None;
        }
        let bin = cfg.distance_bin(view.norm());
        let colors: Vec<Option<Rgb>> = (0..k * k)
            .map(|c| pick_texel(s, k, cfg.distance_bins, bin, c / k, c % k))
            .collect();
        if colors.iter().all(Option::is_none) {
            return None;
        }
        let (u, w) = s.basis();
        let centroid = to_cam.transform_point(&s.centroid);
        let u = to_cam.transform_vector(&u);
        let w = to_cam.transform_vector(&w);
        let r = s.radius;
        let corners = [(-r, -r), (-r, r), (r, -r), (r, r)].map(|(a, b)| centroid + u * a + w * b);
        let rows = if corners.iter().all(|c| c.z > camera.near_clip) {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for c in &corners {
                let y = intr.fy * c.y / c.z + intr.cy;
                lo = lo.min(y);
                hi = hi.max(y);
            }
            if hi < 0.0 || lo >= intr.height as f64 {
                return None;
            }
            let xs = corners.map(|c| intr.fx * c.x / c.z + intr.cx);
            if xs.iter().all(|x| *x < 0.0) || xs.iter().all(|x| *x >= intr.width as f64) {
                return None;
            }
            ((lo.floor().max(0.0)) as usize, (hi.ceil().max(0.0) as usize + 1).min(intr.height as usize))
        } else if corners.iter().all(|c| c.z <= camera.near_clip) {
            return None;
        } else {
            (0, intr.height as usize)
        };
        Some(ScreenSurfel {
            index: first_index + i as u32,
            centroid,
            u,
            w,
            radius: r,
            k,
            colors,
            semantic: s.semantic_class,
            instance: source.instance,
            rows,
        })
    });
    prepared.into_iter().flatten().collect()
}

/// Screen vertex: pixel coordinates and reciprocal depth.
#[derive(Debug, Clone, Copy)]
struct Vert {
    p: Vector2<f64>,
    inv_z: f64,
}

fn clip_near(poly: &[Vector3<f64>], near: f64) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let (ina, inb) = (a.z >= near, b.z >= near);
        if ina {
            out.push(a);
        }
        if ina != inb {
            let t = (near - a.z) / (b.z - a.z);
            out.push(a + (b - a) * t);
        }
    }
    out
}

#[inline]
fn edge(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// Top-left fill rule for a counter-clockwise (positive area) triangle in
/// y-down image coordinates.
#[inline]
fn is_top_left(a: &Vector2<f64>, b: &Vector2<f64>) -> bool {
    let d = b - a;
    (d.y == 0.0 && d.x < 0.0) || d.y > 0.0
}

/// Calls `emit(x, y, depth)` for every pixel center of rows `[y0, y1)`
/// covered by the triangle.
fn raster_triangle(
    tri: [Vert; 3],
    width: usize,
    (y0, y1): (usize, usize),
    emit: &mut dyn FnMut(usize, usize, f64),
) {
    let [mut a, mut b, c] = tri;
    let mut area = edge(&a.p, &b.p, &c.p);
    if area.abs() < 1e-12 {
        return;
    }
    if area < 0.0 {
        std::mem::swap(&mut a, &mut b);
        area = -area;
    }
    let min_x = a.p.x.min(b.p.x).min(c.p.x);
    let max_x = a.p.x.max(b.p.x).max(c.p.x);
    let min_y = a.p.y.min(b.p.y).min(c.p.y);
    let max_y = a.p.y.max(b.p.y).max(c.p.y);
    let x_start = (min_x - 0.5).ceil().max(0.0) as usize;
    let x_end = ((max_x - 0.5).floor() + 1.0).clamp(0.0, width as f64) as usize;
    let y_start = ((min_y - 0.5).ceil().max(0.0) as usize).max(y0);
    let y_end = (((max_y - 0.5).floor() + 1.0).max(0.0) as usize).min(y1);
    let tl = [is_top_left(&b.p, &c.p), is_top_left(&c.p, &a.p), is_top_left(&a.p, &b.p)];
    for y in y_start..y_end {
        for x in x_start..x_end {
            let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let w0 = edge(&b.p, &c.p, &p);
            let w1 = edge(&c.p, &a.p, &p);
            let w2 = edge(&a.p, &b.p, &p);
            let inside = |w: f64, top_left: bool| w > 0.0 || (w == 0.0 && top_left);
            if !(inside(w0, tl[0]) && inside(w1, tl[1]) && inside(w2, tl[2])) {
                continue;
            }
            let inv_z = (w0 * a.inv_z + w1 * b.inv_z + w2 * c.inv_z) / area;
            if inv_z > 0.0 {
                emit(x, y, 1.0 / inv_z);
            }
        }
    }
}

/// Rasterizes every texel quad of `s` within rows `[y0, y1)`.
fn raster_surfel(
    s: &ScreenSurfel,
    camera: &CameraSpec,
    band: (usize, usize),
    emit: &mut dyn FnMut(usize, usize, f64, Rgb),
) {
    let intr = &camera.intrinsics;
    let cell = 2.0 * s.radius / s.k as f64;
    for (ci, color) in s.colors.iter().enumerate() {
        let Some(color) = *color else { continue };
        let (row, col) = (ci / s.k, ci % s.k);
        let a0 = -s.radius + row as f64 * cell;
        let b0 = -s.radius + col as f64 * cell;
        let quad = [(a0, b0), (a0 + cell, b0), (a0 + cell, b0 + cell), (a0, b0 + cell)]
            .map(|(a, b)| s.centroid + s.u * a + s.w * b);
        let poly = if quad.iter().all(|q| q.z >= camera.near_clip) {
            quad.to_vec()
        } else {
            clip_near(&quad, camera.near_clip)
        };
        if poly.len() < 3 {
            continue;
        }
        let verts: Vec<Vert> = poly
            .iter()
            .map(|q| Vert {
                p: Vector2::new(intr.fx * q.x / q.z + intr.cx, intr.fy * q.y / q.z + intr.cy),
                inv_z: 1.0 / q.z,
            })
            .collect();
        for i in 1..verts.len() - 1 {
            raster_triangle(
                [verts[0], verts[i], verts[i + 1]],
                intr.width as usize,
                band,
                &mut |x, y, z| emit(x, y, z, color),
            );
        }
    }
}

#[inline]
fn wins(depth: f64, index: u32, cur_depth: f64, cur_index: u32) -> bool {
    if depth < cur_depth - DEPTH_TIE {
        return true;
    }
    (depth - cur_depth).abs() <= DEPTH_TIE && index < cur_index
}

/// One rasterized fragment, as seen by [`render_fragments`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fragment {
    pub x: u32,
    pub y: u32,
    pub depth: f64,
    pub surfel_index: u32,
}

fn collect_sources<'a>(
    static_map: &'a SurfelMap,
    models: &'a [ObjectModel],
    placements: &[Placement],
) -> Result<Vec<Source<'a>>> {
    let mut by_track: BTreeMap<u32, Vec<&ObjectModel>> = BTreeMap::new();
    for m in models {
        by_track.entry(m.track_id).or_default().push(m);
    }
    let mut sources = vec![Source {
        map: static_map,
        pose: PoseSE3::identity(),
        instance: STATIC_ID,
    }];
    for p in placements {
        let candidates = by_track
            .get(&p.track_id)
            .ok_or_else(|| Error::NotFound(format!("no model for track {}", p.track_id)))?;
        let model = match p.timestamp {
            None => candidates[0],
            Some(t) => candidates
                .iter()
                .min_by(|a, b| {
                    let da = a.pose_near(t).map_or(f64::INFINITY, |x| (x.timestamp - t).abs());
                    let db = b.pose_near(t).map_or(f64::INFINITY, |x| (x.timestamp - t).abs());
                    da.total_cmp(&db)
                })
                .copied()
                .unwrap(),
        };
        sources.push(Source {
            map: &model.canonical_map,
            pose: p.pose,
            instance: p.track_id,
        });
    }
    Ok(sources)
}

fn prepare_all(sources: &[Source<'_>], camera: &CameraSpec, exec: Execution) -> Vec<ScreenSurfel> {
    let mut first = 0u32;
    let mut out = Vec::new();
    for s in sources {
        out.extend(prepare(s, first, camera, exec));
        first += s.map.len() as u32;
    }
    out
}

/// Renders the static map plus placed object models.
pub fn render(
    static_map: &SurfelMap,
    models: &[ObjectModel],
    placements: &[Placement],
    camera: &CameraSpec,
) -> Result<RenderOutput> {
    render_with(static_map, models, placements, camera, Execution::default())
}

pub fn render_with(
    static_map: &SurfelMap,
    models: &[ObjectModel],
    placements: &[Placement],
    camera: &CameraSpec,
    exec: Execution,
) -> Result<RenderOutput> {
    camera.validate()?;
    let sources = collect_sources(static_map, models, placements)?;
    let surfels = prepare_all(&sources, camera, exec);
    let (width, height) = (camera.intrinsics.width as usize, camera.intrinsics.height as usize);
    let mut out = RenderOutput::empty(width as u32, height as u32);

    #[derive(Clone, Copy)]
    struct Px {
        depth: f64,
        index: u32,
        rgb: Rgb,
        semantic: SemanticClass,
        instance: u32,
    }
    let blank = Px {
        depth: f64::INFINITY,
        index: EMPTY_INDEX,
        rgb: [0, 0, 0],
        semantic: SemanticClass::Background,
        instance: 0,
    };
    let mut buf = vec![blank; width * height];
    par::for_each_chunk_mut(exec, &mut buf, width * BAND_ROWS, |band_idx, band| {
        let y0 = band_idx * BAND_ROWS;
        let y1 = (y0 + BAND_ROWS).min(height);
        for s in surfels.iter().filter(|s| s.rows.0 < y1 && s.rows.1 > y0) {
            raster_surfel(s, camera, (y0, y1), &mut |x, y, depth, rgb| {
                let px = &mut band[(y - y0) * width + x];
                if wins(depth, s.index, px.depth, px.index) {
                    *px = Px {
                        depth,
                        index: s.index,
                        rgb,
                        semantic: s.semantic,
                        instance: s.instance,
                    };
                }
            });
        }
    });

    for (i, px) in buf.iter().enumerate() {
        out.depth[i] = px.depth;
        out.surfel_index[i] = px.index;
        out.rgb[i] = px.rgb;
        out.semantic[i] = px.semantic;
        out.instance[i] = px.instance;
    }
    let empty: Vec<bool> = out.surfel_index.iter().map(|i| *i == EMPTY_INDEX).collect();
    out.distance_map = distance_map_with(&empty, width, height, exec);
    out.coverage_ratio = coverage_ratio(&out);
    Ok(out)
}

/// Every fragment the rasterizer produces, before depth testing.
pub fn render_fragments(
    static_map: &SurfelMap,
    models: &[ObjectModel],
    placements: &[Placement],
    camera: &CameraSpec,
) -> Result<Vec<Fragment>> {
    camera.validate()?;
    let sources = collect_sources(static_map, models, placements)?;
    let surfels = prepare_all(&sources, camera, Execution::Sequential);
    let height = camera.intrinsics.height as usize;
    let mut frags = Vec::new();
    for s in &surfels {
        raster_surfel(s, camera, (0, height), &mut |x, y, depth, _| {
            frags.push(Fragment {
                x: x as u32,
                y: y as u32,
                depth,
                surfel_index: s.index,
            })
        });
    }
    Ok(frags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surfel::{SurfelConfig, TexturedSurfel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_distance(empty: &[bool], w: usize, h: usize) -> Vec<f64> {
        let full: Vec<(usize, usize)> = (0..w * h).filter(|i| !empty[*i]).map(|i| (i % w, i / w)).collect();
        (0..w * h)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                full.iter()
                    .map(|(fx, fy)| {
                        let dx = x as f64 - *fx as f64;
                        let dy = y as f64 - *fy as f64;
                        (dx * dx + dy * dy).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn distance_map_examples() {
        assert_eq!(distance_map(&[false; 12], 4, 3), vec![0.0; 12]);
        let mut mask = vec![true; 25];
        mask[0] = false;
        let d = distance_map(&mask, 5, 5);
        assert_eq!(d[4 * 5 + 3], 5.0);
        assert!(distance_map(&[true; 6], 3, 2).iter().all(|x| x.is_infinite()));
        assert!(distance_map(&[], 0, 0).is_empty());
    }

    #[test]
    fn distance_map_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..40 {
            let (w, h) = (rng.random_range(1..20), rng.random_range(1..20));
            let density = [0.01, 0.1, 0.5, 0.95][trial % 4];
            let mask: Vec<bool> = (0..w * h).map(|_| !rng.random_bool(density)).collect();
            for exec in [Execution::Sequential, Execution::Parallel] {
                assert_eq!(distance_map_with(&mask, w, h, exec), brute_distance(&mask, w, h), "{w}x{h}");
            }
        }
    }

    fn cam(width: u32, height: u32) -> CameraSpec {
        CameraSpec::new(
            PoseSE3::identity(),
            Intrinsics { fx: 100.0, fy: 100.0, cx: width as f64 / 2.0, cy: height as f64 / 2.0, width, height },
        )
    }

    /// A surfel facing the camera (-z normal in camera = world frame).
    fn facing_surfel(z: f64, x: f64, color: Rgb, full: bool) -> TexturedSurfel {
        let c = SurfelConfig::default();
        let mut s = TexturedSurfel {
            voxel: [0; 3],
            centroid: Vector3::new(x, 0.0, z),
            normal: -Vector3::z(),
            radius: c.radius(),
            semantic_class: SemanticClass::Background,
            object_id: 0,
            texels: vec![color; c.texel_count()],
            texel_valid: vec![false; c.texel_count()],
            degenerate: false,
        };
        let bin = c.distance_bin(z);
        let k = c.texel_grid;
        for cell in 0..k * k {
            if full || cell == (k * k) / 2 {
                s.texel_valid[bin * k * k + cell] = true;
            }
        }
        s
    }

    fn map_of(surfels: Vec<TexturedSurfel>) -> SurfelMap {
        let mut map = SurfelMap::new(SurfelConfig::default());
        for (i, mut s) in surfels.into_iter().enumerate() {
            s.voxel = [i as i32, 0, 0];
            map.surfels.insert(s.voxel, s);
        }
        map
    }

    #[test]
    fn project_examples() {
        let c = cam(640, 480);
        assert_eq!(project(&Vector3::new(0.0, 0.0, 5.0), &c), Some((320.0, 240.0, 5.0)));
        assert_eq!(project(&Vector3::new(0.0, 0.0, -1.0), &c), None);
        assert_eq!(project(&Vector3::new(1.0, 0.0, 10.0), &c).unwrap().0, 330.0);
    }

    #[test]
    fn empty_map_renders_empty() {
        let out = render(&SurfelMap::new(SurfelConfig::default()), &[], &[], &cam(32, 24)).unwrap();
        assert_eq!(out.coverage_ratio, 0.0);
        assert!(out.depth.iter().all(|d| d.is_infinite()));
        assert!(out.distance_map.iter().all(|d| d.is_infinite()));
        out.check_consistency().unwrap();
    }

    #[test]
    fn single_center_texel() {
        let map = map_of(vec![facing_surfel(5.0, 0.0, [255, 0, 0], false)]);
        let out = render(&map, &[], &[], &cam(64, 48)).unwrap();
        let center = 24 * 64 + 32;
        assert_eq!(out.rgb[center], [255, 0, 0]);
        assert!((out.depth[center] - 5.0).abs() < 1e-9);
        assert_eq!(out.surfel_index[center], 0);
        assert!(out.coverage_ratio > 0.0);
        out.check_consistency().unwrap();
    }

    #[test]
    fn nearer_surfel_wins() {
        let map = map_of(vec![facing_surfel(10.0, 0.0, [0, 0, 255], true), facing_surfel(5.0, 0.0, [255, 0, 0], true)]);
        let out = render(&map, &[], &[], &cam(64, 48)).unwrap();
        let center = 24 * 64 + 32;
        assert_eq!(out.surfel_index[center], 1);
        assert_eq!(out.rgb[center], [255, 0, 0]);
    }

    #[test]
    fn depth_ties_go_to_smaller_index() {
        let map = map_of(vec![facing_surfel(5.0, 0.0, [0, 0, 255], true), facing_surfel(5.0, 0.0, [255, 0, 0], true)]);
        let out = render(&map, &[], &[], &cam(64, 48)).unwrap();
        assert_eq!(out.surfel_index[24 * 64 + 32], 0);
    }

    #[test]
    fn back_faces_are_culled() {
        let mut s = facing_surfel(5.0, 0.0, [255, 0, 0], true);
        s.normal = Vector3::z();
        let out = render(&map_of(vec![s]), &[], &[], &cam(64, 48)).unwrap();
        assert_eq!(out.coverage_ratio, 0.0);
    }

    #[test]
    fn nearest_bin_fallback() {
        let c = SurfelConfig::default();
        let mut s = facing_surfel(5.0, 0.0, [0, 255, 0], true);
        // move all texels from the bin for 5 m (bin 1) to bin 3
        let kk = c.texels_per_bin();
        for cell in 0..kk {
            s.texel_valid.swap(kk + cell, 3 * kk + cell);
        }
        let out = render(&map_of(vec![s]), &[], &[], &cam(64, 48)).unwrap();
        assert_eq!(out.rgb[24 * 64 + 32], [0, 255, 0]);
    }

    #[test]
    fn near_plane_clipping_keeps_visible_part() {
        // a floor surfel straddling the near plane
        let c = SurfelConfig::default();
        let mut s = facing_surfel(0.1, 0.0, [9, 9, 9], true);
        s.centroid = Vector3::new(0.0, 0.3, 0.12);
        s.normal = -Vector3::y();
        let bin = c.distance_bin(s.centroid.norm());
        s.texel_valid.fill(false);
        for cell in 0..c.texels_per_bin() {
            s.texel_valid[bin * c.texels_per_bin() + cell] = true;
        }
        let out = render(&map_of(vec![s]), &[], &[], &cam(64, 48)).unwrap();
        out.check_consistency().unwrap();
        assert!(out.depth.iter().filter(|d| d.is_finite()).all(|d| *d >= 0.1 - 1e-9));
    }

    #[test]
    fn unresolvable_placement() {
        let p = Placement { track_id: 4, pose: PoseSE3::identity(), timestamp: None };
        assert!(matches!(
            render(&SurfelMap::new(SurfelConfig::default()), &[], &[p], &cam(8, 8)),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn recorded_depth_is_minimal_fragment() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let surfels: Vec<_> = (0..30)
            .map(|_| facing_surfel(rng.random_range(2.0..8.0), rng.random_range(-1.0..1.0), [rng.random(), 0, 0], true))
            .collect();
        let map = map_of(surfels);
        let camera = cam(48, 32);
        let out = render(&map, &[], &[], &camera).unwrap();
        let frags = render_fragments(&map, &[], &[], &camera).unwrap();
        assert!(!frags.is_empty());
        for f in &frags {
            let i = (f.y * 48 + f.x) as usize;
            assert!(out.depth[i] <= f.depth + DEPTH_TIE);
        }
        for i in 0..out.pixel_count() {
            let touched = frags.iter().any(|f| (f.y * 48 + f.x) as usize == i);
            assert_eq!(touched, out.is_covered(i));
        }
    }

    #[test]
    fn sequential_matches_parallel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let surfels: Vec<_> = (0..50)
            .map(|_| facing_surfel(rng.random_range(2.0..8.0), rng.random_range(-1.5..1.5), [rng.random(), rng.random(), 0], true))
            .collect();
        let map = map_of(surfels);
        let a = render_with(&map, &[], &[], &cam(80, 60), Execution::Sequential).unwrap();
        let b = render_with(&map, &[], &[], &cam(80, 60), Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn coverage_of_constructed_masks() {
        let mut out = RenderOutput::empty(4, 2);
        assert_eq!(coverage_ratio(&out), 0.0);
        for i in 0..4 {
            out.surfel_index[i] = 0;
        }
        assert_eq!(coverage_ratio(&out), 0.5);
        out.surfel_index.fill(1);
        assert_eq!(coverage_ratio(&out), 1.0);
    }

    #[test]
    fn clip_polygon() {
        let quad = [
            Vector3::new(0.0, 0.0, -1.0),
            Vector3::new(1.0, 0.0, -1.0),
            Vector3::new(1.0, 0.0, 1.0),
            Vector3::new(0.0, 0.0, 1.0),
        ];
        let out = clip_near(&quad, 0.5);
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|p| p.z >= 0.5 - 1e-12));
    }
}
