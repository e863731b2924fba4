//! Bounding-volume hierarchy for closest-point queries on triangle meshes.

use crate::math::Vec3;

use super::mesh::{closest_point_on_triangle, Mesh};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosestHit {
    pub face: usize,
    pub point: Vec3,
    pub bary: [f64; 3],
    pub dist2: f64,
}

impl ClosestHit {
    pub fn distance(&self) -> f64 {
        self.dist2.sqrt()
    }

    /// Lexicographic order on (distance, face index).
    fn beats(&self, other: &ClosestHit) -> bool {
        self.dist2 < other.dist2 || (self.dist2 == other.dist2 && self.face < other.face)
    }
}

#[derive(Clone, Debug)]
struct Node {
    lo: Vec3,
    hi: Vec3,
    // leaf: start..start+count into `order`; inner: children at left/right
    left: usize,
    right: usize,
    start: usize,
    count: usize,
}

#[derive(Clone, Debug)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<usize>,
    tris: Vec<[Vec3; 3]>,
}

const LEAF_SIZE: usize = 4;

impl Bvh {
    pub fn build(mesh: &Mesh) -> Self {
        let tris: Vec<[Vec3; 3]> = (0..mesh.faces.len()).map(|f| mesh.triangle(f)).collect();
        let centroids: Vec<Vec3> = tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut order: Vec<usize> = (0..tris.len()).collect();
        let mut nodes = Vec::new();
        if !tris.is_empty() {
            build_node(&tris, &centroids, &mut order, 0, tris.len(), &mut nodes);
        }
        Bvh { nodes, order, tris }
    }

    pub fn is_empty(&self) -> bool {
        self.tris.is_empty()
    }

    /// Closest surface point; ties resolved by lowest face index.
    pub fn closest(&self, p: &Vec3) -> Option<ClosestHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best: Option<ClosestHit> = None;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if let Some(b) = &best {
                if box_dist2(p, &node.lo, &node.hi) > b.dist2 {
                    continue;
                }
            }
            if node.count > 0 {
                for &f in &self.order[node.start..node.start + node.count] {
                    let [a, b, c] = &self.tris[f];
                    let (q, bary) = closest_point_on_triangle(p, a, b, c);
                    let hit = ClosestHit {
                        face: f,
                        point: q,
                        bary,
                        dist2: (q - p).norm_squared(),
                    };
                    if best.as_ref().map_or(true, |b| hit.beats(b)) {
                        best = Some(hit);
                    }
                }
            } else {
                let (l, r) = (node.left, node.right);
                let dl = box_dist2(p, &self.nodes[l].lo, &self.nodes[l].hi);
                let dr = box_dist2(p, &self.nodes[r].lo, &self.nodes[r].hi);
                // push the farther child first so the nearer one is visited next
                if dl <= dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        best
    }
}

fn build_node(
    tris: &[[Vec3; 3]],
    centroids: &[Vec3],
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for &f in &order[start..end] {
        for v in &tris[f] {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
    }
    let idx = nodes.len();
    nodes.push(Node {
        lo,
        hi,
        left: 0,
        right: 0,
        start,
        count: end - start,
    });
    if end - start <= LEAF_SIZE {
        return idx;
    }
    let mut clo = Vec3::repeat(f64::INFINITY);
    let mut chi = Vec3::repeat(f64::NEG_INFINITY);
    for &f in &order[start..end] {
        clo = clo.inf(&centroids[f]);
        chi = chi.sup(&centroids[f]);
    }
    let ext = chi - clo;
    let axis = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    order[start..end].sort_by(|&a, &b| {
        centroids[a][axis]
            .partial_cmp(&centroids[b][axis])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mid = start + (end - start) / 2;
    let left = build_node(tris, centroids, order, start, mid, nodes);
    let right = build_node(tris, centroids, order, mid, end, nodes);
    let n = &mut nodes[idx];
    n.left = left;
    n.right = right;
    n.count = 0;
    idx
}

fn box_dist2(p: &Vec3, lo: &Vec3, hi: &Vec3) -> f64 {
    let mut d = 0.0;
    for k in 0..3 {
        let v = if p[k] < lo[k] {
            lo[k] - p[k]
        } else if p[k] > hi[k] {
            p[k] - hi[k]
        } else {
            0.0
        };
        d += v * v;
    }
    d
}

/// Nearest-neighbour search over a point set.
#[derive(Clone, Debug)]
pub struct PointTree {
    points: Vec<Vec3>,
    nodes: Vec<KdNode>,
}

#[derive(Clone, Debug)]
struct KdNode {
    idx: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

impl PointTree {
    pub fn build(points: &[Vec3]) -> Self {
        let mut ids: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(points.len());
        kd_build(points, &mut ids, 0, &mut nodes);
        PointTree {
            points: points.to_vec(),
            nodes,
        }
    }

    /// Index and squared distance of the nearest point; ties by lowest index.
    pub fn nearest(&self, p: &Vec3) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, p, &mut best);
        Some(best)
    }

    fn search(&self, ni: usize, p: &Vec3, best: &mut (usize, f64)) {
        let node = &self.nodes[ni];
        let q = &self.points[node.idx];
        let d = (q - p).norm_squared();
        if d < best.1 || (d == best.1 && node.idx < best.0) {
            *best = (node.idx, d);
        }
        let diff = p[node.axis] - q[node.axis];
        let (near, far) = if diff <= 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        if let Some(n) = near {
            self.search(n, p, best);
        }
        if let Some(f) = far {
            if diff * diff <= best.1 {
                self.search(f, p, best);
            }
        }
    }
}

fn kd_build(points: &[Vec3], ids: &mut [usize], depth: usize, nodes: &mut Vec<KdNode>) -> Option<usize> {
    if ids.is_empty() {
        return None;
    }
    let axis = depth % 3;
    ids.sort_by(|&a, &b| {
        points[a][axis]
            .partial_cmp(&points[b][axis])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mid = ids.len() / 2;
    let idx = nodes.len();
    nodes.push(KdNode {
        idx: ids[mid],
        axis,
        left: None,
        right: None,
    });
    let (l, r) = ids.split_at_mut(mid);
    let left = kd_build(points, l, depth + 1, nodes);
    let right = kd_build(points, &mut r[1..], depth + 1, nodes);
    nodes[idx].left = left;
    nodes[idx].right = right;
    Some(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geomio::mesh::unit_cube;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(mesh: &Mesh, p: &Vec3) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for f in 0..mesh.faces.len() {
            let [a, b, c] = mesh.triangle(f);
            let (q, _) = closest_point_on_triangle(p, &a, &b, &c);
            let d = (q - p).norm_squared();
            if d < best.1 {
                best = (f, d);
            }
        }
        best
    }

    #[test]
    fn bvh_matches_brute_force_including_ties() {
        let mesh = unit_cube();
        let bvh = Bvh::build(&mesh);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let p = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let hit = bvh.closest(&p).unwrap();
            let (f, d) = brute(&mesh, &p);
            assert_eq!(hit.face, f);
            assert_eq!(hit.dist2, d);
        }
        // the cube center is equidistant to every face
        let hit = bvh.closest(&Vec3::zeros()).unwrap();
        assert_eq!(hit.face, brute(&mesh, &Vec3::zeros()).0);
    }

    #[test]
    fn kd_tree_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec3> = (0..300)
            .map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let tree = PointTree::build(&pts);
        for _ in 0..200 {
            let q = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            let (i, d) = tree.nearest(&q).unwrap();
            let (bi, bd) = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (p - q).norm_squared()))
                .fold((usize::MAX, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b });
            assert_eq!((i, d), (bi, bd));
        }
    }
}
