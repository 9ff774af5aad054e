//! Point-cloud normalization, farthest-point sampling, k-NN patch grouping
//! and the Chamfer-L2 distance.
//!
//! All neighbour searches are exact brute force. Every tie (equal
//! distances) resolves to the lowest point index so that runs are
//! reproducible bit for bit.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

pub type Point<T> = [T; 3];

#[inline]
pub fn sq_dist<T: Scalar>(a: &Point<T>, b: &Point<T>) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Labelled point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T> {
    pub points: Vec<Point<T>>,
    pub label: Option<u32>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(points: Vec<Point<T>>, label: Option<u32>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Contract("point cloud needs at least one point".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point cloud coordinate".into()));
        }
        Ok(Self { points, label })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> PointCloud<U> {
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| p.map(|v| U::lit(v.to_f64().unwrap_or(f64::NAN))))
                .collect(),
            label: self.label,
        }
    }
}

/// Centers the cloud on its centroid and scales the farthest point to norm 1.
pub fn normalize<T: Scalar>(cloud: &PointCloud<T>) -> Result<PointCloud<T>> {
    if cloud.is_empty() {
        return Err(Error::Contract("normalize on an empty cloud".into()));
    }
    let n = T::lit(cloud.len() as f64);
    let mut c = [T::zero(); 3];
    for p in &cloud.points {
        for d in 0..3 {
            c[d] += p[d];
        }
    }
    for v in &mut c {
        *v /= n;
    }
    let centered: Vec<Point<T>> = cloud
        .points
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let scale = centered
        .iter()
        .map(|p| sq_dist(p, &[T::zero(); 3]).sqrt())
        .fold(T::zero(), T::max);
    if !(scale > T::zero()) {
        return Err(Error::Degenerate(
            "all points coincide; the cloud has zero extent".into(),
        ));
    }
    Ok(PointCloud {
        points: centered.iter().map(|p| p.map(|v| v / scale)).collect(),
        label: cloud.label,
    })
}

/// Greedy farthest-point sampling starting at `start`.
///
/// Each step picks the point maximizing its squared distance to the chosen
/// set; the lowest index wins ties.
pub fn fps_from<T: Scalar>(points: &[Point<T>], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(Error::Contract(format!("fps needs 1 <= m <= N, got m={m}, N={n}")));
    }
    if start >= n {
        return Err(Error::Contract(format!("fps start {start} out of {n}")));
    }
    let mut chosen = Vec::with_capacity(m);
    let mut min_d = vec![T::infinity(); n];
    let mut cur = start;
    for _ in 0..m {
        chosen.push(cur);
        let cp = points[cur];
        let mut best = T::neg_infinity();
        let mut next = 0;
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, &cp);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best {
                best = min_d[i];
                next = i;
            }
        }
        cur = next;
    }
    Ok(chosen)
}

/// Farthest-point sampling whose first index is drawn from `seed`.
pub fn fps<T: Scalar>(cloud: &PointCloud<T>, m: usize, seed: u64) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::Contract(format!("fps needs 1 <= m <= N, got m={m}, N={n}")));
    }
    let start = rng::stream(seed, rng::tags::FPS, 0).gen_range(0..n);
    fps_from(&cloud.points, m, start)
}

/// Local patches around a set of centers.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet<T> {
    /// `G` center coordinates.
    pub centers: Vec<Point<T>>,
    /// `G·k` center-relative coordinates, patch-major.
    pub patches: Vec<Point<T>>,
    /// `G·k` indices into the parent cloud.
    pub source_indices: Vec<usize>,
    pub k: usize,
}

impl<T: Scalar> PatchSet<T> {
    pub fn num_patches(&self) -> usize {
        self.centers.len()
    }

    pub fn patch(&self, g: usize) -> &[Point<T>] {
        &self.patches[g * self.k..(g + 1) * self.k]
    }

    /// Absolute coordinates of patch `g`.
    pub fn absolute(&self, g: usize) -> Vec<Point<T>> {
        let c = self.centers[g];
        self.patch(g)
            .iter()
            .map(|p| [p[0] + c[0], p[1] + c[1], p[2] + c[2]])
            .collect()
    }
}

/// The `k` nearest points (center included) of every center, stored
/// center-relative and ordered by distance.
pub fn knn_group<T: Scalar>(cloud: &PointCloud<T>, center_indices: &[usize], k: usize) -> Result<PatchSet<T>> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::Contract(format!("knn needs 1 <= k <= N, got k={k}, N={n}")));
    }
    let mut centers = Vec::with_capacity(center_indices.len());
    let mut patches = Vec::with_capacity(center_indices.len() * k);
    let mut source_indices = Vec::with_capacity(center_indices.len() * k);
    let mut order: Vec<(T, usize)> = Vec::with_capacity(n);
    for &ci in center_indices {
        if ci >= n {
            return Err(Error::Contract(format!("center index {ci} out of {n}")));
        }
        let c = cloud.points[ci];
        order.clear();
        order.extend(cloud.points.iter().enumerate().map(|(i, p)| (sq_dist(p, &c), i)));
        let by_dist =
            |a: &(T, usize), b: &(T, usize)| a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1));
        if k < n {
            order.select_nth_unstable_by(k - 1, by_dist);
        }
        order[..k].sort_unstable_by(by_dist);
        centers.push(c);
        for &(_, i) in &order[..k] {
            let p = cloud.points[i];
            patches.push([p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
            source_indices.push(i);
        }
    }
    Ok(PatchSet {
        centers,
        patches,
        source_indices,
        k,
    })
}

/// FPS centers followed by k-NN grouping.
pub fn make_patches<T: Scalar>(cloud: &PointCloud<T>, num_patches: usize, k: usize, seed: u64) -> Result<PatchSet<T>> {
    let centers = fps(cloud, num_patches, seed)?;
    knn_group(cloud, &centers, k)
}

/// Symmetric Chamfer-L2 with squared distances:
/// mean over `recon` of the nearest squared distance into `target`, plus the
/// same from `target` into `recon`.
pub fn chamfer_l2<T: Scalar>(recon: &[Point<T>], target: &[Point<T>]) -> Result<T> {
    if recon.is_empty() || target.is_empty() {
        return Err(Error::Contract("chamfer on an empty point set".into()));
    }
    let one_way = |a: &[Point<T>], b: &[Point<T>]| {
        a.iter()
            .map(|p| b.iter().map(|q| sq_dist(p, q)).fold(T::infinity(), T::min))
            .sum::<T>()
            / T::lit(a.len() as f64)
    };
    Ok(one_way(recon, target) + one_way(target, recon))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud<f64> {
        PointCloud::new(pts.to_vec(), None).unwrap()
    }

    #[test]
    fn normalize_two_points() {
        let c = normalize(&cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])).unwrap();
        assert_eq!(c.points, vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_is_a_fixed_point_on_normalized_input() {
        let c = cloud(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, -0.5, 0.0]]);
        let n = normalize(&c).unwrap();
        for (a, b) in n.points.iter().flatten().zip(c.points.iter().flatten()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_rejects_coincident_points() {
        let c = cloud(&[[0.3, 0.3, 0.3]; 4]);
        assert!(matches!(normalize(&c), Err(Error::Degenerate(_))));
    }

    #[test]
    fn fps_picks_far_point_second() {
        let pts = [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(fps_from(&pts, 2, 0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn fps_full_is_permutation() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 2.0, 0.0], [3.0, 0.0, 1.0], [0.5, 0.5, 0.5]]);
        let mut idx = fps(&c, 4, 9).unwrap();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fps_single_is_seeded_start() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 2.0, 0.0], [3.0, 0.0, 1.0]]);
        let one = fps(&c, 1, 5).unwrap();
        let start = rng::stream(5, rng::tags::FPS, 0).gen_range(0..3);
        assert_eq!(one, vec![start]);
        assert!(fps(&c, 4, 5).is_err());
    }

    #[test]
    fn knn_collinear() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let p = knn_group(&c, &[0], 2).unwrap();
        assert_eq!(p.source_indices, vec![0, 1]);
        assert!(knn_group(&c, &[0], 5).is_err());
    }

    #[test]
    fn knn_tie_prefers_lowest_index() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
        let p = knn_group(&c, &[0], 2).unwrap();
        assert_eq!(p.source_indices, vec![0, 1]);
    }

    #[test]
    fn knn_k1_is_the_center() {
        let c = cloud(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 3.0]]);
        let p = knn_group(&c, &[2, 0], 1).unwrap();
        assert!(p.patches.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(p.source_indices, vec![2, 0]);
    }

    #[test]
    fn patches_reconstruct_parent_points() {
        // dyadic coordinates: subtraction and re-addition are exact
        let c = cloud(&[
            [0.125, 0.75, 0.25],
            [1.5, 0.0, -0.5],
            [2.0, 0.5, 3.0],
            [0.875, 0.875, 0.875],
        ]);
        let p = knn_group(&c, &[1, 3], 3).unwrap();
        for g in 0..2 {
            for (pt, &src) in p.absolute(g).iter().zip(&p.source_indices[g * 3..g * 3 + 3]) {
                assert_eq!(*pt, c.points[src]);
            }
        }
    }

    #[test]
    fn chamfer_examples() {
        let z = [[0.0, 0.0, 0.0]];
        let x = [[1.0, 0.0, 0.0]];
        assert_eq!(chamfer_l2(&z, &z).unwrap(), 0.0);
        assert_eq!(chamfer_l2(&z, &x).unwrap(), 2.0);
        assert_eq!(chamfer_l2(&[z[0], x[0]], &z).unwrap(), 0.5);
        assert!(chamfer_l2::<f64>(&[], &z).is_err());
    }
}
