//! Triangle meshes in world millimeters: validation, icosphere generation,
//! enclosed volume, and ASCII OBJ I/O (`v` / `f` records only).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("face {face} references vertex {index}, but the mesh has {vertices} vertices")]
    IndexOutOfRange {
        face: usize,
        index: usize,
        vertices: usize,
    },
    #[error("face {0} is degenerate (repeated vertex index)")]
    DegenerateFace(usize),
    #[error("mesh is not closed: edge ({0}, {1}) has no opposite half-edge")]
    OpenMesh(usize, usize),
    #[error("non-finite vertex coordinate at vertex {0}")]
    NonFiniteVertex(usize),
    #[error("line {line}: non-triangular face with {count} vertices")]
    NonTriangularFace { line: usize, count: usize },
    #[error("line {line}: vertex index {index} out of range")]
    ObjIndex { line: usize, index: i64 },
    #[error("line {line}: {message}")]
    ObjSyntax { line: usize, message: String },
    #[error("no geometry")]
    NoGeometry,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Vertices in world mm; faces are counter-clockwise seen from outside.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        for (i, v) in vertices.iter().enumerate() {
            if !v.iter().all(|c| c.is_finite()) {
                return Err(MeshError::NonFiniteVertex(i));
            }
        }
        for (fi, f) in faces.iter().enumerate() {
            for &index in f {
                if index >= vertices.len() {
                    return Err(MeshError::IndexOutOfRange {
                        face: fi,
                        index,
                        vertices: vertices.len(),
                    });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(MeshError::DegenerateFace(fi));
            }
        }
        Ok(Self { vertices, faces })
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty() || self.faces.is_empty()
    }

    /// Same faces, new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<[f64; 3]>) -> Result<Self, MeshError> {
        assert_eq!(vertices.len(), self.vertices.len(), "vertex count must not change");
        Self::new(vertices, self.faces.clone())
    }

    pub fn map_vertices(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        Self {
            vertices: self.vertices.iter().map(|&v| f(v)).collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn flipped(&self) -> Self {
        Self {
            vertices: self.vertices.clone(),
            faces: self.faces.iter().map(|&[a, b, c]| [a, c, b]).collect(),
        }
    }

    pub fn triangle(&self, face: usize) -> [[f64; 3]; 3] {
        let [a, b, c] = self.faces[face];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Every directed edge must be matched by its reverse in another face.
    pub fn check_closed(&self) -> Result<(), MeshError> {
        let mut half_edges: HashMap<(usize, usize), usize> = HashMap::with_capacity(self.faces.len() * 3);
        for f in &self.faces {
            for k in 0..3 {
                *half_edges.entry((f[k], f[(k + 1) % 3])).or_insert(0) += 1;
            }
        }
        let mut keys: Vec<_> = half_edges.keys().copied().collect();
        keys.sort_unstable();
        for (a, b) in keys {
            if half_edges.get(&(b, a)) != half_edges.get(&(a, b)) {
                return Err(MeshError::OpenMesh(a, b));
            }
        }
        Ok(())
    }

    /// Icosahedron subdivided `subdivisions` times and projected onto a sphere.
    pub fn icosphere(subdivisions: u32, radius: f64, center: [f64; 3]) -> Self {
        let (unit, faces) = unit_icosphere(subdivisions);
        let vertices = unit
            .iter()
            .map(|v| {
                [
                    center[0] + radius * v[0],
                    center[1] + radius * v[1],
                    center[2] + radius * v[2],
                ]
            })
            .collect();
        Self { vertices, faces }
    }

    /// Axis-aligned unit cube `[0,1]³`, 12 outward triangles.
    pub fn unit_cube() -> Self {
        let vertices = (0..8)
            .map(|i| [(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64])
            .collect();
        let faces = vec![
            [0, 2, 3],
            [0, 3, 1], // z = 0
            [4, 5, 7],
            [4, 7, 6], // z = 1
            [0, 1, 5],
            [0, 5, 4], // y = 0
            [2, 6, 7],
            [2, 7, 3], // y = 1
            [0, 4, 6],
            [0, 6, 2], // x = 0
            [1, 3, 7],
            [1, 7, 5], // x = 1
        ];
        Self { vertices, faces }
    }

    pub fn to_obj_string(&self) -> String {
        let mut s = String::with_capacity(self.vertices.len() * 40 + self.faces.len() * 20);
        for v in &self.vertices {
            let _ = writeln!(
                s,
                "v {} {} {}",
                format_significant(v[0]),
                format_significant(v[1]),
                format_significant(v[2])
            );
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }

    pub fn from_obj_str(text: &str) -> Result<Self, MeshError> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            let mut parts = content.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let coords: Vec<f64> = parts
                        .take(3)
                        .map(|p| p.parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| MeshError::ObjSyntax {
                            line,
                            message: format!("bad vertex coordinate: {e}"),
                        })?;
                    if coords.len() != 3 {
                        return Err(MeshError::ObjSyntax {
                            line,
                            message: "vertex needs three coordinates".into(),
                        });
                    }
                    vertices.push([coords[0], coords[1], coords[2]]);
                }
                Some("f") => {
                    let refs: Vec<&str> = parts.collect();
                    if refs.len() != 3 {
                        return Err(MeshError::NonTriangularFace {
                            line,
                            count: refs.len(),
                        });
                    }
                    let mut face = [0usize; 3];
                    for (slot, r) in face.iter_mut().zip(&refs) {
                        let head = r.split('/').next().unwrap_or("");
                        let index: i64 = head.parse().map_err(|_| MeshError::ObjSyntax {
                            line,
                            message: format!("bad face index {r:?}"),
                        })?;
                        let n = vertices.len() as i64;
                        let resolved = if index > 0 { index - 1 } else { n + index };
                        if index == 0 || resolved < 0 || resolved >= n {
                            return Err(MeshError::ObjIndex { line, index });
                        }
                        *slot = resolved as usize;
                    }
                    faces.push(face);
                }
                _ => {}
            }
        }
        if vertices.is_empty() || faces.is_empty() {
            return Err(MeshError::NoGeometry);
        }
        Self::new(vertices, faces)
    }

    pub fn write_obj(&self, path: impl AsRef<Path>) -> Result<(), MeshError> {
        std::fs::write(path, self.to_obj_string())?;
        Ok(())
    }

    pub fn read_obj(path: impl AsRef<Path>) -> Result<Self, MeshError> {
        Self::from_obj_str(&std::fs::read_to_string(path)?)
    }
}

/// Enclosed volume in mm³ from signed tetrahedra against a reference point.
///
/// Positive for outward orientation, negative when every face is flipped.
/// The reference is the bounding-box center, which keeps the sum well
/// conditioned for meshes far from the origin.
pub fn mesh_volume(mesh: &TriangleMesh) -> Result<f64, MeshError> {
    if mesh.is_empty() {
        return Err(MeshError::NoGeometry);
    }
    mesh.check_closed()?;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in mesh.vertices() {
        for d in 0..3 {
            lo[d] = lo[d].min(v[d]);
            hi[d] = hi[d].max(v[d]);
        }
    }
    let r = [0, 1, 2].map(|d| 0.5 * (lo[d] + hi[d]));
    let mut six_vol = 0.0;
    for f in mesh.faces() {
        let [a, b, c] = f.map(|i| {
            let v = mesh.vertices()[i];
            [v[0] - r[0], v[1] - r[1], v[2] - r[2]]
        });
        six_vol += a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
            + a[2] * (b[0] * c[1] - b[1] * c[0]);
    }
    Ok(six_vol / 6.0)
}

fn format_significant(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).clamp(0, 17) as usize;
    let mut s = format!("{x:.decimals$}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

fn unit_icosphere(subdivisions: u32) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<[f64; 3]> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|&v| normalize(v))
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<[f64; 3]>| {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                let (p, q) = (vertices[a], vertices[b]);
                vertices.push(normalize([
                    0.5 * (p[0] + q[0]),
                    0.5 * (p[1] + q[1]),
                    0.5 * (p[2] + q[2]),
                ]));
                vertices.len() - 1
            })
        };
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (vertices, faces)
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}
