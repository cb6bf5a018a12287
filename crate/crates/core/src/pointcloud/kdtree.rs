//! Exact k-d tree over 3D points.
//!
//! Ties between equidistant points resolve to the lowest point index, so every
//! query result is a pure function of the input cloud.

use nalgebra::Vector3;

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Nearest-neighbour index over a fixed point set.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Vector3<f64>>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// A neighbour returned by a query: point index and squared distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

impl Neighbor {
    fn before(&self, other: &Neighbor) -> bool {
        self.dist_sq < other.dist_sq || (self.dist_sq == other.dist_sq && self.index < other.index)
    }

    pub fn distance(&self) -> f64 {
        self.dist_sq.sqrt()
    }
}

impl SpatialIndex {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let mut index = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            index.build(0, points.len());
        }
        index
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        if hi[axis] <= lo[axis] {
            // all points coincide
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Split {
            axis,
            value,
            left: 0,
            right: 0,
        });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        if let Node::Split {
            left: l, right: r, ..
        } = &mut self.nodes[id]
        {
            *l = left;
            *r = right;
        }
        id
    }

    /// Exact nearest neighbour. Panics on an empty index.
    pub fn nearest(&self, query: &Vector3<f64>) -> Neighbor {
        assert!(!self.is_empty(), "nearest() on an empty index");
        let mut best = Neighbor {
            index: usize::MAX,
            dist_sq: f64::INFINITY,
        };
        self.nearest_in(0, query, &mut best);
        best
    }

    fn nearest_in(&self, node: usize, q: &Vector3<f64>, best: &mut Neighbor) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = Neighbor {
                        index: i,
                        dist_sq: (self.points[i] - q).norm_squared(),
                    };
                    if cand.before(best) {
                        *best = cand;
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.nearest_in(near, q, best);
                if diff * diff <= best.dist_sq {
                    self.nearest_in(far, q, best);
                }
            }
        }
    }

    /// The `k` nearest points ordered by distance, then index.
    pub fn k_nearest(&self, query: &Vector3<f64>, k: usize) -> Vec<Neighbor> {
        let k = k.min(self.len());
        let mut found = Vec::with_capacity(k + 1);
        if k > 0 {
            self.knn_in(0, query, k, &mut found);
        }
        found
    }

    fn knn_in(&self, node: usize, q: &Vector3<f64>, k: usize, found: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = Neighbor {
                        index: i,
                        dist_sq: (self.points[i] - q).norm_squared(),
                    };
                    if found.len() == k && !cand.before(&found[k - 1]) {
                        continue;
                    }
                    let pos = found.partition_point(|n| n.before(&cand));
                    found.insert(pos, cand);
                    found.truncate(k);
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.knn_in(near, q, k, found);
                if found.len() < k || diff * diff <= found[k - 1].dist_sq {
                    self.knn_in(far, q, k, found);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_nearest(points: &[Vector3<f64>], q: &Vector3<f64>) -> Neighbor {
        let mut best = Neighbor {
            index: usize::MAX,
            dist_sq: f64::INFINITY,
        };
        for (i, p) in points.iter().enumerate() {
            let d = (p - q).norm_squared();
            if d < best.dist_sq {
                best = Neighbor {
                    index: i,
                    dist_sq: d,
                };
            }
        }
        best
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.random(), rng.random(), rng.random()))
            .collect()
    }

    #[test]
    fn single_point() {
        let idx = SpatialIndex::new(&[Vector3::new(1.0, 2.0, 3.0)]);
        let n = idx.nearest(&Vector3::new(-50.0, 3.0, 9.0));
        assert_eq!(n.index, 0);
    }

    #[test]
    fn grid_node_query() {
        let pts: Vec<_> = (0..100)
            .map(|i| Vector3::new((i % 10) as f64, (i / 10) as f64, 0.0))
            .collect();
        let idx = SpatialIndex::new(&pts);
        for (i, p) in pts.iter().enumerate() {
            let n = idx.nearest(p);
            assert_eq!((n.index, n.dist_sq), (i, 0.0));
        }
    }

    #[test]
    fn matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_points(&mut rng, 1000);
        let idx = SpatialIndex::new(&pts);
        for _ in 0..10_000 {
            let q = Vector3::new(
                rng.random_range(-0.2..1.2),
                rng.random_range(-0.2..1.2),
                rng.random_range(-0.2..1.2),
            );
            assert_eq!(idx.nearest(&q), brute_nearest(&pts, &q));
        }
    }

    #[test]
    fn ties_prefer_lowest_index() {
        let pts = vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        // pad so the tree actually splits
        let mut all = pts.clone();
        all.extend((0..40).map(|i| Vector3::new(10.0 + i as f64, 10.0, 0.0)));
        let mut rev = all.clone();
        rev.swap(0, 2);
        assert_eq!(SpatialIndex::new(&all).nearest(&Vector3::zeros()).index, 0);
        assert_eq!(SpatialIndex::new(&rev).nearest(&Vector3::zeros()).index, 0);
    }

    #[test]
    fn knn_matches_sorted_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts = random_points(&mut rng, 500);
        let idx = SpatialIndex::new(&pts);
        for _ in 0..200 {
            let q = Vector3::new(rng.random(), rng.random(), rng.random());
            let mut all: Vec<_> = pts
                .iter()
                .enumerate()
                .map(|(i, p)| Neighbor {
                    index: i,
                    dist_sq: (p - q).norm_squared(),
                })
                .collect();
            all.sort_by(|a, b| a.dist_sq.total_cmp(&b.dist_sq).then(a.index.cmp(&b.index)));
            all.truncate(7);
            assert_eq!(idx.k_nearest(&q, 7), all);
        }
        assert_eq!(idx.k_nearest(&Vector3::zeros(), 900).len(), 500);
    }
}
