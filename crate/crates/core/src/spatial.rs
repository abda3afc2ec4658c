//! Exact k-nearest-neighbor search over a point cloud.
//!
//! The index is a plain kd-tree. Results are identical to an exhaustive scan:
//! neighbors are ordered by squared Euclidean distance and then by point
//! index, so equidistant points resolve to the lower index.

use crate::error::{Error, Result};
use crate::types::Vec3;

const DEFAULT_LEAF_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

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

#[derive(Debug, Clone)]
pub struct NeighborIndex {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[inline]
pub(crate) fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

impl NeighborIndex {
    pub fn build(points: &[Vec3]) -> Self {
        Self::with_leaf_size(points, DEFAULT_LEAF_SIZE)
    }

    pub fn with_leaf_size(points: &[Vec3], leaf_size: usize) -> Self {
        let mut index = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            index.build_node(0, points.len(), leaf_size.max(1));
        }
        index
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    fn build_node(&mut self, start: usize, end: usize, leaf_size: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= leaf_size {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
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
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid, leaf_size);
        let right = self.build_node(mid, end, leaf_size);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// The `k` nearest indexed points to `query`, ascending by distance, ties
    /// broken by lower point index.
    pub fn knn(&self, query: &Vec3, k: usize) -> Result<Vec<Neighbor>> {
        if k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        if k > self.points.len() {
            return Err(Error::TooFewPoints {
                k,
                size: self.points.len(),
            });
        }
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.search(0, query, k, &mut best);
        Ok(best
            .into_iter()
            .map(|(d2, index)| Neighbor {
                index,
                distance: d2.sqrt(),
            })
            .collect())
    }

    pub fn nearest(&self, query: &Vec3) -> Result<Neighbor> {
        Ok(self.knn(query, 1)?[0])
    }

    /// The `k` nearest neighbors of indexed point `i`, excluding `i` itself.
    pub fn knn_excluding(&self, i: usize, k: usize) -> Result<Vec<Neighbor>> {
        if k + 1 > self.points.len() {
            return Err(Error::TooFewPoints {
                k,
                size: self.points.len().saturating_sub(1),
            });
        }
        let mut found = self.knn(&self.points[i], k + 1)?;
        match found.iter().position(|n| n.index == i) {
            Some(pos) => {
                found.remove(pos);
            }
            None => {
                found.pop();
            }
        }
        Ok(found)
    }

    /// All indexed points within `radius` of `query` (inclusive), ascending by
    /// distance then index.
    pub fn within_radius(&self, query: &Vec3, radius: f64) -> Vec<Neighbor> {
        let mut found = Vec::new();
        if !self.points.is_empty() {
            self.collect_radius(0, query, radius * radius, &mut found);
        }
        found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        found
            .into_iter()
            .map(|(d2, index)| Neighbor {
                index,
                distance: d2.sqrt(),
            })
            .collect()
    }

    fn collect_radius(&self, node: usize, query: &Vec3, r2: f64, out: &mut Vec<(f64, usize)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = dist2(query, &self.points[i]);
                    if d2 <= r2 {
                        out.push((d2, i));
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                if diff <= 0.0 || diff * diff <= r2 {
                    self.collect_radius(left, query, r2, out);
                }
                if diff >= 0.0 || diff * diff <= r2 {
                    self.collect_radius(right, query, r2, out);
                }
            }
        }
    }

    fn search(&self, node: usize, query: &Vec3, k: usize, best: &mut Vec<(f64, usize)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = (dist2(query, &self.points[i]), i);
                    if best.len() < k || lex_less(cand, best[best.len() - 1]) {
                        let pos = best.partition_point(|&b| lex_less(b, cand));
                        best.insert(pos, cand);
                        best.truncate(k);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, best);
                // `<=` keeps equidistant candidates reachable for the index tie-break.
                if best.len() < k || diff * diff <= best[best.len() - 1].0 {
                    self.search(far, query, k, best);
                }
            }
        }
    }
}

#[inline]
fn lex_less(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exhaustive(points: &[Vec3], q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d = p - q;
                (d.x * d.x + d.y * d.y + d.z * d.z, i)
            })
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(d2, i)| (i, d2.sqrt())).collect()
    }

    fn as_pairs(n: &[Neighbor]) -> Vec<(usize, f64)> {
        n.iter().map(|n| (n.index, n.distance)).collect()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect()
    }

    #[test]
    fn knn_hand_example() {
        let idx = NeighborIndex::build(&[Vec3::zeros(), Vec3::x(), Vec3::new(3.0, 0.0, 0.0)]);
        let got = idx.knn(&Vec3::new(0.9, 0.0, 0.0), 2).unwrap();
        assert_eq!(got[0].index, 1);
        assert_eq!(got[1].index, 0);
        assert!((got[0].distance - 0.1).abs() < 1e-12);
        assert!((got[1].distance - 0.9).abs() < 1e-12);
    }

    #[test]
    fn knn_query_on_point() {
        let pts = [Vec3::zeros(), Vec3::x()];
        let got = NeighborIndex::build(&pts).knn(&Vec3::x(), 1).unwrap();
        assert_eq!((got[0].index, got[0].distance), (1, 0.0));
    }

    #[test]
    fn knn_too_many_names_both_values() {
        let idx = NeighborIndex::build(&[Vec3::zeros(), Vec3::x()]);
        let err = idx.knn(&Vec3::zeros(), 3).unwrap_err();
        assert!(err.to_string().contains('3') && err.to_string().contains('2'));
    }

    #[test]
    fn nearest_singleton_and_tie() {
        let idx = NeighborIndex::build(&[Vec3::new(5.0, 5.0, 5.0)]);
        assert_eq!(idx.nearest(&Vec3::zeros()).unwrap().index, 0);
        let idx = NeighborIndex::build(&[Vec3::new(2.0, 0.0, 0.0), Vec3::zeros()]);
        assert_eq!(idx.nearest(&Vec3::x()).unwrap().index, 0);
    }

    #[test]
    fn knn_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 200);
        let idx = NeighborIndex::with_leaf_size(&pts, 4);
        for _ in 0..200 {
            let q = Vec3::new(rng.random(), rng.random(), rng.random());
            assert_eq!(as_pairs(&idx.knn(&q, 5).unwrap()), exhaustive(&pts, &q, 5));
        }
        let pts = random_points(&mut rng, 300);
        let idx = NeighborIndex::build(&pts);
        for _ in 0..200 {
            let q = Vec3::new(rng.random(), rng.random(), rng.random()) * 1.2;
            assert_eq!(as_pairs(&idx.knn(&q, 1).unwrap()), exhaustive(&pts, &q, 1));
        }
    }

    #[test]
    fn duplicate_points_resolve_by_index() {
        let pts = vec![Vec3::x(); 40];
        let idx = NeighborIndex::with_leaf_size(&pts, 2);
        let got: Vec<usize> = idx.knn(&Vec3::x(), 5).unwrap().iter().map(|n| n.index).collect();
        assert_eq!(got, vec![0, 1, 2, 3, 4]);
        let ex: Vec<usize> = idx.knn_excluding(2, 3).unwrap().iter().map(|n| n.index).collect();
        assert_eq!(ex, vec![0, 1, 3]);
    }

    #[test]
    fn radius_query_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_points(&mut rng, 250);
        let idx = NeighborIndex::with_leaf_size(&pts, 3);
        for _ in 0..50 {
            let q = Vec3::new(rng.random(), rng.random(), rng.random());
            let got: Vec<usize> = idx.within_radius(&q, 0.2).iter().map(|n| n.index).collect();
            let all = exhaustive(&pts, &q, pts.len());
            let expected: Vec<usize> = all.iter().filter(|(_, d)| *d <= 0.2).map(|(i, _)| *i).collect();
            assert_eq!(got, expected);
        }
    }

    proptest! {
        #[test]
        fn knn_equals_exhaustive_on_grid_points(
            coords in prop::collection::vec((0i32..6, 0i32..6, 0i32..6), 1..300),
            q in (-1i32..7, -1i32..7, -1i32..7),
            k in 1usize..8,
            leaf in 1usize..20,
        ) {
            // integer grid coordinates produce many exact distance ties
            let pts: Vec<Vec3> = coords.iter().map(|&(x, y, z)| Vec3::new(x as f64, y as f64, z as f64) * 0.5).collect();
            let q = Vec3::new(q.0 as f64, q.1 as f64, q.2 as f64) * 0.5;
            let k = k.min(pts.len());
            let idx = NeighborIndex::with_leaf_size(&pts, leaf);
            prop_assert_eq!(as_pairs(&idx.knn(&q, k).unwrap()), exhaustive(&pts, &q, k));
        }
    }
}
