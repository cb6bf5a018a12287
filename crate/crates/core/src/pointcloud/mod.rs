//! Point-cloud container, nearest-neighbour indexing, normal estimation and the
//! farthest-point / inverse-distance utilities used to attack large scans.

mod io;
mod kdtree;

use nalgebra::{Matrix2, Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;

pub use io::{read_cloud, read_csv, read_ply, write_cloud, write_csv, write_ply};
pub use kdtree::{Neighbor, SpatialIndex};

pub const DEFAULT_NORMAL_K: usize = 10;
pub const DEFAULT_INTERPOLATION_K: usize = 3;
/// Distance clamp for inverse-distance weights.
pub const INTERPOLATION_EPS: f64 = 1e-8;

/// A normal component with magnitude below this counts as zero for sign unification.
const AXIS_EPS: f64 = 1e-9;

/// Ordered 3D points with optional unit normals of the same length.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self {
            points,
            normals: None,
        }
    }

    pub fn with_normals(points: Vec<Vector3<f64>>, normals: Vec<Vector3<f64>>) -> Result<Self> {
        if points.len() != normals.len() {
            return Err(Error::LengthMismatch {
                left: points.len(),
                right: normals.len(),
            });
        }
        Ok(Self {
            points,
            normals: Some(normals),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn has_normals(&self) -> bool {
        self.normals.is_some()
    }

    /// True when every point lies on `z = 0` (2D data).
    pub fn is_planar(&self) -> bool {
        self.points.iter().all(|p| p.z == 0.0)
    }

    /// Rejects empty clouds, non-finite coordinates and non-unit normals.
    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::invalid("empty point cloud"));
        }
        if let Some(i) = self
            .points
            .iter()
            .position(|p| !p.iter().all(|v| v.is_finite()))
        {
            return Err(Error::invalid(format!(
                "non-finite coordinate at point {i}"
            )));
        }
        if let Some(normals) = &self.normals {
            if normals.len() != self.len() {
                return Err(Error::LengthMismatch {
                    left: self.len(),
                    right: normals.len(),
                });
            }
            if let Some(i) = normals.iter().position(|n| (n.norm() - 1.0).abs() > 1e-6) {
                return Err(Error::invalid(format!("normal {i} is not unit length")));
            }
        }
        Ok(())
    }

    /// Applies a rigid transform to points and normals.
    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| pose.transform_point(p))
                .collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| pose.rotation * n).collect()),
        }
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| indices.iter().map(|&i| ns[i]).collect()),
        }
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.points.iter().sum::<Vector3<f64>>() / self.len().max(1) as f64
    }

    pub fn build_index(&self) -> SpatialIndex {
        SpatialIndex::new(&self.points)
    }
}

pub fn build_index(cloud: &PointCloud) -> SpatialIndex {
    cloud.build_index()
}

/// Flip a bidirectional normal to the canonical orientation: positive x, or
/// positive y when x vanishes, or positive z when both vanish.
pub fn unify_normal_sign(n: Vector3<f64>) -> Vector3<f64> {
    let key = if n.x.abs() > AXIS_EPS {
        n.x
    } else if n.y.abs() > AXIS_EPS {
        n.y
    } else {
        n.z
    };
    if key < 0.0 {
        -n
    } else {
        n
    }
}

/// How neighbourhood covariances are reduced to a normal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormalMode {
    /// Full 3D PCA; needs a rank-2 neighbourhood.
    Spatial,
    /// In-plane PCA on x/y for 2D clouds; normals have zero z.
    Planar,
}

/// Normals plus the indices whose neighbourhood was degenerate.
#[derive(Clone, Debug)]
pub struct NormalEstimate {
    pub cloud: PointCloud,
    pub degenerate: Vec<usize>,
}

/// 3D PCA normals over `k` nearest neighbours (including the point itself).
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<NormalEstimate> {
    estimate_normals_with(cloud, k, NormalMode::Spatial)
}

/// Picks [`NormalMode::Planar`] for `z = 0` clouds and [`NormalMode::Spatial`] otherwise.
pub fn estimate_normals_auto(cloud: &PointCloud, k: usize) -> Result<NormalEstimate> {
    let mode = if cloud.is_planar() {
        NormalMode::Planar
    } else {
        NormalMode::Spatial
    };
    estimate_normals_with(cloud, k, mode)
}

pub fn estimate_normals_with(
    cloud: &PointCloud,
    k: usize,
    mode: NormalMode,
) -> Result<NormalEstimate> {
    if k < 3 {
        return Err(Error::invalid(format!(
            "normal estimation needs k >= 3, got {k}"
        )));
    }
    if cloud.len() < k {
        return Err(Error::SampleTooLarge {
            requested: k,
            available: cloud.len(),
        });
    }
    let index = cloud.build_index();
    let mut normals = Vec::with_capacity(cloud.len());
    let mut degenerate = Vec::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let hood = index.k_nearest(p, k);
        let mean = hood
            .iter()
            .map(|n| cloud.points[n.index])
            .sum::<Vector3<f64>>()
            / k as f64;
        let mut cov = Matrix3::zeros();
        for n in &hood {
            let d = cloud.points[n.index] - mean;
            cov += d * d.transpose();
        }
        cov /= k as f64;
        let normal = match mode {
            NormalMode::Spatial => spatial_normal(&cov),
            NormalMode::Planar => planar_normal(&cov),
        };
        match normal {
            Some(n) => normals.push(unify_normal_sign(n)),
            None => {
                normals.push(Vector3::z());
                degenerate.push(i);
            }
        }
    }
    Ok(NormalEstimate {
        cloud: PointCloud {
            points: cloud.points.clone(),
            normals: Some(normals),
        },
        degenerate,
    })
}

fn relative_rank_floor(largest: f64) -> f64 {
    1e-10 * largest.max(f64::MIN_POSITIVE)
}

fn spatial_normal(cov: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let eig = SymmetricEigen::new(*cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let largest = eig.eigenvalues[order[2]];
    if largest <= 0.0 || eig.eigenvalues[order[1]] <= relative_rank_floor(largest) {
        return None;
    }
    Some(eig.eigenvectors.column(order[0]).normalize())
}

fn planar_normal(cov: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let c2 = Matrix2::new(cov[(0, 0)], cov[(0, 1)], cov[(1, 0)], cov[(1, 1)]);
    let eig = SymmetricEigen::new(c2);
    let (small, large) = if eig.eigenvalues[0] <= eig.eigenvalues[1] {
        (0, 1)
    } else {
        (1, 0)
    };
    if eig.eigenvalues[large] <= 0.0 {
        return None;
    }
    let v = eig.eigenvectors.column(small);
    Some(Vector3::new(v[0], v[1], 0.0).normalize())
}

/// Greedy farthest-point subsampling; the seed picks the first point.
pub fn farthest_point_sampling(cloud: &PointCloud, m: usize, seed: u64) -> Result<Vec<usize>> {
    if cloud.is_empty() {
        return Err(Error::invalid("farthest-point sampling on an empty cloud"));
    }
    let first = ChaCha8Rng::seed_from_u64(seed).random_range(0..cloud.len());
    farthest_point_sampling_from(cloud, m, first)
}

pub fn farthest_point_sampling_from(
    cloud: &PointCloud,
    m: usize,
    first: usize,
) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::SampleTooLarge {
            requested: m,
            available: n,
        });
    }
    if first >= n {
        return Err(Error::invalid(format!("start index {first} out of range")));
    }
    let mut selected = Vec::with_capacity(m);
    let mut min_dist = vec![f64::INFINITY; n];
    let mut current = first;
    for _ in 0..m {
        selected.push(current);
        min_dist[current] = f64::NEG_INFINITY;
        let origin = cloud.points[current];
        let mut next = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for (i, d) in min_dist.iter_mut().enumerate() {
            if *d == f64::NEG_INFINITY {
                continue;
            }
            *d = d.min((cloud.points[i] - origin).norm_squared());
            if *d > best {
                best = *d;
                next = i;
            }
        }
        current = next;
    }
    Ok(selected)
}

/// Inverse-distance interpolation of per-point vectors onto `targets`.
pub fn interpolate_vectors(
    sources: &PointCloud,
    values: &[Vector3<f64>],
    targets: &PointCloud,
    k: usize,
) -> Result<Vec<Vector3<f64>>> {
    if sources.is_empty() {
        return Err(Error::invalid(
            "interpolation needs at least one source point",
        ));
    }
    if k == 0 {
        return Err(Error::invalid("interpolation needs k >= 1"));
    }
    if values.len() != sources.len() {
        return Err(Error::LengthMismatch {
            left: sources.len(),
            right: values.len(),
        });
    }
    let index = sources.build_index();
    Ok(targets
        .points
        .iter()
        .map(|t| {
            let mut acc = Vector3::zeros();
            let mut total = 0.0;
            for n in index.k_nearest(t, k) {
                let w = 1.0 / n.distance().max(INTERPOLATION_EPS);
                acc += values[n.index] * w;
                total += w;
            }
            acc / total
        })
        .collect())
}

/// Centres the cloud on its centroid and scales the farthest point to radius 1.
pub fn normalize_to_unit(cloud: &PointCloud) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::invalid("cannot normalize an empty cloud"));
    }
    let c = cloud.centroid();
    let radius = cloud
        .points
        .iter()
        .map(|p| (p - c).norm())
        .fold(0.0, f64::max);
    if radius <= 0.0 || !radius.is_finite() {
        return Err(Error::ZeroScale);
    }
    Ok(PointCloud {
        points: cloud.points.iter().map(|p| (p - c) / radius).collect(),
        normals: cloud.normals.clone(),
    })
}

/// Independent N(0, sigma^2) noise on every coordinate.
pub fn add_gaussian_noise(cloud: &PointCloud, sigma: f64, seed: u64) -> Result<PointCloud> {
    add_noise(cloud, sigma, seed, 3)
}

/// Like [`add_gaussian_noise`] but leaves z untouched, keeping 2D clouds on `z = 0`.
pub fn add_planar_gaussian_noise(cloud: &PointCloud, sigma: f64, seed: u64) -> Result<PointCloud> {
    add_noise(cloud, sigma, seed, 2)
}

fn add_noise(cloud: &PointCloud, sigma: f64, seed: u64, axes: usize) -> Result<PointCloud> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!(
            "noise sigma must be >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let mut q = *p;
            for a in 0..axes {
                q[a] += normal.sample(&mut rng);
            }
            q
        })
        .collect();
    Ok(PointCloud {
        points,
        normals: cloud.normals.clone(),
    })
}
