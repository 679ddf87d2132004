//! Point-to-point ICP with a closed-form SVD rigid fit.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::kdtree::KdTree;
use crate::pose::PoseSE3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpParams {
    pub max_iter: usize,
    /// Stop once the rmse changes by less than this, meters.
    pub tol: f64,
    /// Correspondences farther than `reject_factor × median` are dropped.
    pub reject_factor: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-5,
            reject_factor: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpResult {
    /// Maps source points onto the target.
    pub transform: PoseSE3,
    pub rmse: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The cross-covariance was rank deficient; `transform` is the initial guess.
    pub degenerate: bool,
}

/// Least-squares rigid transform taking `src[i]` onto `dst[i]` (Kabsch).
/// Returns `None` when the cross-covariance has rank < 2.
pub fn fit_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<PoseSE3> {
    assert_eq!(src.len(), dst.len());
    if src.len() < 3 {
        return None;
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let mut sv = svd.singular_values;
    sv.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= 0.0 || sv[1] <= sv[0] * 1e-12 {
        return None;
    }
    let u = svd.u?;
    let vt = svd.v_t?;
    let mut r = vt.transpose() * u.transpose();
    if r.determinant() < 0.0 {
        // reflection: flip the axis of the smallest singular value
        let mut d = Matrix3::identity();
        let min_idx = svd.singular_values.imin();
        d[(min_idx, min_idx)] = -1.0;
        r = vt.transpose() * d * u.transpose();
    }
    Some(PoseSE3 {
        rotation: r,
        translation: cd - r * cs,
    })
}

struct Matches {
    src: Vec<Vector3<f64>>,
    dst: Vec<Vector3<f64>>,
    rmse: f64,
}

fn correspond(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    tree: &KdTree,
    transform: &PoseSE3,
    reject_factor: f64,
) -> Matches {
    let pairs: Vec<(usize, usize, f64)> = source
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let q = transform.transform_point(p);
            let (j, d2) = tree.nearest(&q).expect("non-empty target");
            (i, j, d2.sqrt())
        })
        .collect();
    let mut dists: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    let mid = dists.len() / 2;
    let (_, median, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let cutoff = *median * reject_factor;
    let mut m = Matches {
        src: Vec::with_capacity(pairs.len()),
        dst: Vec::with_capacity(pairs.len()),
        rmse: 0.0,
    };
    let mut sum = 0.0;
    for (i, j, d) in pairs {
        if d <= cutoff {
            m.src.push(source[i]);
            m.dst.push(target[j]);
            sum += d * d;
        }
    }
    m.rmse = (sum / m.src.len().max(1) as f64).sqrt();
    m
}

/// Registers `source` onto `target` starting from `init`.
///
/// Each iteration matches every transformed source point to its nearest
/// target point, drops matches beyond `reject_factor` times the median
/// distance, and refits the transform in closed form. The returned rmse
/// never exceeds that of `init`: an update that would raise it is discarded.
pub fn icp_register(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    init: &PoseSE3,
    params: &IcpParams,
) -> IcpResult {
    let fail = |rmse| IcpResult {
        transform: *init,
        rmse,
        iterations: 0,
        converged: false,
        degenerate: true,
    };
    if source.len() < 3 || target.len() < 3 {
        return fail(f64::INFINITY);
    }
    let tree = KdTree::build(target);
    let mut current = *init;
    let mut matches = correspond(source, target, &tree, &current, params.reject_factor);
    let mut rmse = matches.rmse;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < params.max_iter {
        iterations += 1;
        let Some(next) = fit_rigid(&matches.src, &matches.dst) else {
            if iterations == 1 {
                return fail(rmse);
            }
            break;
        };
        let next_matches = correspond(source, target, &tree, &next, params.reject_factor);
        if next_matches.rmse > rmse {
            converged = next_matches.rmse - rmse < params.tol;
            break;
        }
        let delta = rmse - next_matches.rmse;
        current = next;
        rmse = next_matches.rmse;
        matches = next_matches;
        if delta < params.tol {
            converged = true;
            break;
        }
    }
    IcpResult {
        transform: current,
        rmse,
        iterations,
        converged,
        degenerate: false,
    }
}
