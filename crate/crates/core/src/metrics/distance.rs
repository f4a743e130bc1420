//! Exact point-to-triangle distance and symmetric surface Hausdorff distance.

use super::MetricsError;
use crate::mesh::TriangleMesh;

type V3 = [f64; 3];

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn axpy(a: V3, s: f64, d: V3) -> V3 {
    [a[0] + s * d[0], a[1] + s * d[1], a[2] + s * d[2]]
}

/// Closest point on triangle `abc` to `p`, by Voronoi region classification.
pub fn closest_point_on_triangle(p: V3, [a, b, c]: [V3; 3]) -> V3 {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return axpy(a, d1 / (d1 - d3), ab);
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return axpy(a, d2 / (d2 - d6), ac);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && d4 - d3 >= 0.0 && d5 - d6 >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return axpy(b, w, sub(c, b));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    axpy(axpy(a, v, ab), w, ac)
}

pub fn point_triangle_distance_sq(p: V3, tri: [V3; 3]) -> f64 {
    let q = closest_point_on_triangle(p, tri);
    let d = sub(p, q);
    dot(d, d)
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: V3,
    hi: V3,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            lo: [f64::INFINITY; 3],
            hi: [f64::NEG_INFINITY; 3],
        }
    }

    fn grow(&mut self, p: V3) {
        for d in 0..3 {
            self.lo[d] = self.lo[d].min(p[d]);
            self.hi[d] = self.hi[d].max(p[d]);
        }
    }

    fn dist_sq(&self, p: V3) -> f64 {
        (0..3)
            .map(|d| {
                let e = (self.lo[d] - p[d]).max(0.0).max(p[d] - self.hi[d]);
                e * e
            })
            .sum()
    }
}

enum BvhNode {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl BvhNode {
    fn bounds(&self) -> &Aabb {
        match self {
            BvhNode::Leaf { bounds, .. } | BvhNode::Inner { bounds, .. } => bounds,
        }
    }
}

const LEAF_SIZE: usize = 4;

/// Bounding-volume hierarchy over the triangles of one mesh, answering exact
/// nearest-surface queries.
pub struct SurfaceIndex {
    triangles: Vec<[V3; 3]>,
    nodes: Vec<BvhNode>,
}

impl SurfaceIndex {
    pub fn new(mesh: &TriangleMesh) -> Self {
        let mut triangles: Vec<[V3; 3]> = (0..mesh.faces().len()).map(|f| mesh.triangle(f)).collect();
        let mut nodes = Vec::new();
        if !triangles.is_empty() {
            let n = triangles.len();
            build(&mut triangles, 0, n, &mut nodes);
        }
        Self { triangles, nodes }
    }

    /// Squared distance from `p` to the nearest triangle.
    pub fn distance_sq(&self, p: V3) -> f64 {
        let mut best = f64::INFINITY;
        if !self.nodes.is_empty() {
            self.visit(self.nodes.len() - 1, p, &mut best);
        }
        best
    }

    fn visit(&self, node: usize, p: V3, best: &mut f64) {
        match self.nodes[node] {
            BvhNode::Leaf { start, end, .. } => {
                for tri in &self.triangles[start..end] {
                    let d = point_triangle_distance_sq(p, *tri);
                    if d < *best {
                        *best = d;
                    }
                }
            }
            BvhNode::Inner { left, right, .. } => {
                let dl = self.nodes[left].bounds().dist_sq(p);
                let dr = self.nodes[right].bounds().dist_sq(p);
                let (first, df, second, ds) = if dl <= dr {
                    (left, dl, right, dr)
                } else {
                    (right, dr, left, dl)
                };
                if df <= *best {
                    self.visit(first, p, best);
                }
                if ds <= *best {
                    self.visit(second, p, best);
                }
            }
        }
    }
}

fn centroid(t: &[V3; 3]) -> V3 {
    [0, 1, 2].map(|d| (t[0][d] + t[1][d] + t[2][d]) / 3.0)
}

/// Builds the subtree over `tris[start..end]`, returning its node index.
/// Children are pushed before their parent, so the root is the last node.
fn build(tris: &mut [[V3; 3]], start: usize, end: usize, nodes: &mut Vec<BvhNode>) -> usize {
    let mut bounds = Aabb::empty();
    let mut cbounds = Aabb::empty();
    for t in &tris[start..end] {
        for &v in t {
            bounds.grow(v);
        }
        cbounds.grow(centroid(t));
    }
    if end - start <= LEAF_SIZE {
        nodes.push(BvhNode::Leaf { bounds, start, end });
        return nodes.len() - 1;
    }
    let axis = (0..3)
        .max_by(|&a, &b| {
            let ea = cbounds.hi[a] - cbounds.lo[a];
            let eb = cbounds.hi[b] - cbounds.lo[b];
            ea.total_cmp(&eb)
        })
        .unwrap();
    let mid = (start + end) / 2;
    tris[start..end].select_nth_unstable_by(mid - start, |a, b| {
        centroid(a)[axis].total_cmp(&centroid(b)[axis])
    });
    let left = build(tris, start, mid, nodes);
    let right = build(tris, mid, end, nodes);
    nodes.push(BvhNode::Inner { bounds, left, right });
    nodes.len() - 1
}

fn check_non_empty(a: &TriangleMesh, b: &TriangleMesh) -> Result<(), MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptyMesh);
    }
    Ok(())
}

/// Largest distance from a vertex of `from` to the surface of `to`.
pub fn directed_hausdorff(from: &TriangleMesh, to: &SurfaceIndex) -> f64 {
    from.vertices()
        .iter()
        .map(|&v| to.distance_sq(v))
        .fold(0.0, f64::max)
        .sqrt()
}

/// Symmetric vertex-to-surface Hausdorff distance.
pub fn hausdorff(a: &TriangleMesh, b: &TriangleMesh) -> Result<f64, MetricsError> {
    check_non_empty(a, b)?;
    let (ia, ib) = (SurfaceIndex::new(a), SurfaceIndex::new(b));
    Ok(directed_hausdorff(a, &ib).max(directed_hausdorff(b, &ia)))
}

/// [`hausdorff`] without the spatial index.
pub fn hausdorff_brute_force(a: &TriangleMesh, b: &TriangleMesh) -> Result<f64, MetricsError> {
    check_non_empty(a, b)?;
    let directed = |from: &TriangleMesh, to: &TriangleMesh| {
        let tris: Vec<[V3; 3]> = (0..to.faces().len()).map(|f| to.triangle(f)).collect();
        from.vertices()
            .iter()
            .map(|&v| {
                tris.iter()
                    .map(|&t| point_triangle_distance_sq(v, t))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
            .sqrt()
    };
    Ok(directed(a, b).max(directed(b, a)))
}
