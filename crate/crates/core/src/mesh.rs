//! Triangle meshes with shared connectivity, 1-ring queries and cotangent edge weights.

use std::sync::Arc;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Lower bound applied to every cotangent weight.
pub const MIN_EDGE_WEIGHT: f64 = 1e-6;

/// Vertex adjacency in compressed sparse row form. Neighbor lists are sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl Topology {
    fn build(num_vertices: usize, faces: &[[usize; 3]]) -> Self {
        let mut lists: Vec<Vec<usize>> = vec![Vec::new(); num_vertices];
        for f in faces {
            for k in 0..3 {
                let a = f[k];
                let b = f[(k + 1) % 3];
                lists[a].push(b);
                lists[b].push(a);
            }
        }
        let mut offsets = Vec::with_capacity(num_vertices + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for mut l in lists {
            l.sort_unstable();
            l.dedup();
            neighbors.extend_from_slice(&l);
            offsets.push(neighbors.len());
        }
        Self { offsets, neighbors }
    }

    pub fn num_vertices(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Neighbors of `i`, ascending.
    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Position of the `(i, j)` slot in the flattened neighbor array.
    #[inline]
    pub fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let row = self.neighbors(i);
        row.binary_search(&j).ok().map(|k| self.offsets[i] + k)
    }

    #[inline]
    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Number of directed (ordered) neighbor pairs.
    pub fn num_directed_edges(&self) -> usize {
        self.neighbors.len()
    }

    /// Undirected edges `(i, j)` with `i < j`, in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_vertices()).flat_map(move |i| {
            self.neighbors(i)
                .iter()
                .filter(move |&&j| j > i)
                .map(move |&j| (i, j))
        })
    }
}

/// Vertex positions over a connectivity that may be shared with other meshes.
#[derive(Debug, Clone)]
pub struct TriangleMesh<T: Real> {
    pub name: String,
    vertices: Vec<Vector3<T>>,
    faces: Arc<Vec<[usize; 3]>>,
    topology: Arc<Topology>,
}

impl<T: Real> TriangleMesh<T> {
    pub fn new(
        vertices: Vec<Vector3<T>>,
        faces: Vec<[usize; 3]>,
        name: impl Into<String>,
    ) -> Result<Self> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v >= n {
                    return Err(Error::InvalidMesh(format!(
                        "face {fi} references vertex {v}, mesh has {n} vertices"
                    )));
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!("face {fi} repeats a vertex")));
            }
        }
        let topology = Arc::new(Topology::build(n, &faces));
        Ok(Self {
            name: name.into(),
            vertices,
            faces: Arc::new(faces),
            topology,
        })
    }

    /// New mesh on the same connectivity with different positions.
    pub fn with_vertices(
        &self,
        vertices: Vec<Vector3<T>>,
        name: impl Into<String>,
    ) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::TopologyMismatch(format!(
                "{} vertices given, topology has {}",
                vertices.len(),
                self.vertices.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            vertices,
            faces: Arc::clone(&self.faces),
            topology: Arc::clone(&self.topology),
        })
    }

    pub fn vertices(&self) -> &[Vector3<T>] {
        &self.vertices
    }

    pub fn vertices_mut(&mut self) -> &mut [Vector3<T>] {
        &mut self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    /// True when both meshes have identical face lists.
    pub fn same_topology<U: Real>(&self, other: &TriangleMesh<U>) -> bool {
        self.vertices.len() == other.vertices.len()
            && (Arc::ptr_eq(&self.faces, &other.faces) || *self.faces == *other.faces)
    }

    pub fn ensure_same_topology<U: Real>(&self, other: &TriangleMesh<U>) -> Result<()> {
        if self.same_topology(other) {
            Ok(())
        } else {
            Err(Error::TopologyMismatch(format!(
                "'{}' vs '{}'",
                self.name, other.name
            )))
        }
    }

    /// Sorted 1-ring of vertex `i`.
    pub fn one_ring(&self, i: usize) -> Result<&[usize]> {
        if i >= self.vertices.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.vertices.len(),
            });
        }
        Ok(self.topology.neighbors(i))
    }

    /// Every vertex is used by at least one face.
    pub fn has_isolated_vertices(&self) -> bool {
        (0..self.num_vertices()).any(|i| self.topology.neighbors(i).is_empty())
    }

    pub fn map_vertices(&self, f: impl Fn(&Vector3<T>) -> Vector3<T>) -> Self {
        let vertices = self.vertices.iter().map(f).collect();
        Self {
            name: self.name.clone(),
            vertices,
            faces: Arc::clone(&self.faces),
            topology: Arc::clone(&self.topology),
        }
    }

    pub fn centroid(&self) -> Vector3<T> {
        let mut c = Vector3::zeros();
        for v in &self.vertices {
            c += v;
        }
        c / T::from_count(self.vertices.len().max(1))
    }

    /// Largest Euclidean distance between corresponding vertices.
    pub fn max_vertex_distance(&self, other: &Self) -> T {
        self.vertices
            .iter()
            .zip(other.vertices.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(T::zero(), |m, d| if d > m { d } else { m })
    }

    /// Converts to another scalar type.
    pub fn cast<U: Real>(&self) -> TriangleMesh<U> {
        TriangleMesh {
            name: self.name.clone(),
            vertices: self
                .vertices
                .iter()
                .map(|v| v.map(|x| U::lit(x.as_f64())))
                .collect(),
            faces: Arc::clone(&self.faces),
            topology: Arc::clone(&self.topology),
        }
    }
}

/// Length of the axis-aligned bounding-box diagonal.
pub fn bbox_diagonal<T: Real>(mesh: &TriangleMesh<T>) -> T {
    points_bbox_diagonal(mesh.vertices())
}

pub fn points_bbox_diagonal<T: Real>(points: &[Vector3<T>]) -> T {
    let Some(first) = points.first() else {
        return T::zero();
    };
    let (mut lo, mut hi) = (*first, *first);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).norm()
}

/// Symmetric per-edge cotangent weights stored along the topology's neighbor slots.
#[derive(Debug, Clone)]
pub struct EdgeWeights<T: Real> {
    topology: Arc<Topology>,
    values: Vec<T>,
}

impl<T: Real> EdgeWeights<T> {
    /// Weight of edge `(i, j)`, `None` when the edge does not exist.
    pub fn get(&self, i: usize, j: usize) -> Option<T> {
        if i >= self.topology.num_vertices() {
            return None;
        }
        self.topology.slot(i, j).map(|s| self.values[s])
    }

    /// Weights aligned with `topology().neighbors(i)`.
    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.values[self.topology.row_range(i)]
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    /// Sum of weights around vertex `i`.
    pub fn row_sum(&self, i: usize) -> T {
        self.row(i).iter().fold(T::zero(), |a, &b| a + b)
    }

    /// Undirected edges with their weights.
    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), T)> + '_ {
        self.topology
            .edges()
            .map(move |(i, j)| ((i, j), self.get(i, j).unwrap()))
    }
}

/// Half-sum-of-opposite-cotangents edge weights of the reference mesh, clamped below at
/// [`MIN_EDGE_WEIGHT`]. Boundary edges use their single opposite angle.
pub fn cotangent_weights<T: Real>(reference: &TriangleMesh<T>) -> Result<EdgeWeights<T>> {
    let topo = Arc::clone(&reference.topology);
    let mut values = vec![T::zero(); topo.num_directed_edges()];
    let half = T::lit(0.5);
    let v = reference.vertices();
    for (fi, f) in reference.faces().iter().enumerate() {
        for k in 0..3 {
            let o = f[k];
            let a = f[(k + 1) % 3];
            let b = f[(k + 2) % 3];
            let ea = v[a] - v[o];
            let eb = v[b] - v[o];
            let cross = ea.cross(&eb).norm();
            let scale = ea.norm() * eb.norm();
            if !(cross > T::lit(1e-14) * scale) || !(scale > T::zero()) {
                return Err(Error::DegenerateFace { face: fi });
            }
            let cot = ea.dot(&eb) / cross;
            let sab = topo.slot(a, b).expect("face edge in topology");
            let sba = topo.slot(b, a).expect("face edge in topology");
            values[sab] += half * cot;
            values[sba] += half * cot;
        }
    }
    let floor = T::lit(MIN_EDGE_WEIGHT);
    for w in &mut values {
        if *w < floor {
            *w = floor;
        }
    }
    Ok(EdgeWeights {
        topology: topo,
        values,
    })
}
