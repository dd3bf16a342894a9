//! Vertex positions from per-vertex gradients: the anchored cotangent-Laplacian solve and
//! the landmark-augmented P′-step.
//!
//! Stationarity of `E_def` in `p′ᵢ` gives, for each free vertex,
//! `2 Σⱼ cᵢⱼ (p′ᵢ − p′ⱼ) = Σⱼ cᵢⱼ (Tᵢ + Tⱼ) eᵢⱼ`. Adding `λ E_lan` contributes
//! `λ RᵀΠᵀΠR p′ᵢ` on the left and `λ RᵀΠᵀ(qᵢ − t)` on the right of landmark rows.

use std::collections::VecDeque;

use nalgebra::{DMatrix, Matrix3, Vector3};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use rayon::prelude::*;

use crate::deform::{blend_gradients, BlendWeights, DeformBasis};
use crate::error::{Error, Result};
use crate::io::LandmarkSpec;
use crate::mesh::{EdgeWeights, Topology, TriangleMesh};
use crate::projection::ProjectionParams;
use crate::scalar::Real;

/// Pinned vertex fixing the translational gauge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor<T: Real> {
    pub vertex: usize,
    pub position: Vector3<T>,
}

impl<T: Real> Anchor<T> {
    /// Anchors `vertex` at its position in `mesh`.
    pub fn at_vertex(mesh: &TriangleMesh<T>, vertex: usize) -> Self {
        Self {
            vertex,
            position: mesh.vertices()[vertex],
        }
    }
}

/// Reverse Cuthill–McKee ordering of the vertex graph, skipping `skip`.
pub fn rcm_order(topo: &Topology, skip: Option<usize>) -> Vec<usize> {
    let n = topo.num_vertices();
    let mut visited = vec![false; n];
    if let Some(s) = skip {
        visited[s] = true;
    }
    let degree = |v: usize| topo.neighbors(v).len();
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::new();
    let mut scratch = Vec::new();
    loop {
        let Some(seed) = (0..n)
            .filter(|&v| !visited[v])
            .min_by_key(|&v| (degree(v), v))
        else {
            break;
        };
        let start = peripheral(topo, seed, &visited);
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            scratch.clear();
            scratch.extend(topo.neighbors(v).iter().copied().filter(|&u| !visited[u]));
            scratch.sort_by_key(|&u| (degree(u), u));
            for &u in &scratch {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order
}

/// Last vertex of a breadth-first sweep from `seed`, iterated twice.
fn peripheral(topo: &Topology, seed: usize, blocked: &[bool]) -> usize {
    let mut start = seed;
    for _ in 0..2 {
        let mut seen = blocked.to_vec();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        let mut last = start;
        while let Some(v) = queue.pop_front() {
            last = v;
            for &u in topo.neighbors(v) {
                if !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
        start = last;
    }
    start
}

/// Right-hand side `bᵢ = Σⱼ cᵢⱼ (Tᵢ + Tⱼ) eᵢⱼ`.
pub fn gradient_rhs<T: Real>(
    reference: &TriangleMesh<T>,
    weights: &EdgeWeights<T>,
    grads: &[Matrix3<T>],
) -> Vec<Vector3<T>> {
    let p = reference.vertices();
    let topo = reference.topology();
    (0..reference.num_vertices())
        .into_par_iter()
        .map(|i| {
            let mut b = Vector3::zeros();
            for (&j, &c) in topo.neighbors(i).iter().zip(weights.row(i)) {
                b += (grads[i] + grads[j]) * (p[i] - p[j]) * c;
            }
            b
        })
        .collect()
}

/// Largest relative residual of the stationarity equations over non-anchor vertices.
pub fn normal_equation_residual<T: Real>(
    reference: &TriangleMesh<T>,
    weights: &EdgeWeights<T>,
    grads: &[Matrix3<T>],
    positions: &[Vector3<T>],
    anchor: usize,
) -> T {
    let b = gradient_rhs(reference, weights, grads);
    let topo = reference.topology();
    let two = T::lit(2.0);
    let scale = b
        .iter()
        .fold(T::zero(), |m, v| m.max(v.norm()))
        .max(T::lit(f64::MIN_POSITIVE));
    let mut worst = T::zero();
    for i in 0..reference.num_vertices() {
        if i == anchor {
            continue;
        }
        let mut lhs = Vector3::zeros();
        for (&j, &c) in topo.neighbors(i).iter().zip(weights.row(i)) {
            lhs += (positions[i] - positions[j]) * (two * c);
        }
        worst = worst.max((lhs - b[i]).norm() / scale);
    }
    worst
}

/// Anchored cotangent Laplacian of the reference, factored once.
///
/// Row `i` of the unanchored matrix carries `2 Σⱼ cᵢⱼ` on the diagonal and `−2 cᵢⱼ` off it.
/// The anchor's row and column are eliminated; the three coordinates share the factor.
pub struct LaplacianSystem<T: Real> {
    reference: TriangleMesh<T>,
    weights: EdgeWeights<T>,
    anchor: usize,
    /// Free vertex at each factor position.
    order: Vec<usize>,
    factor: CscCholesky<T>,
}

impl<T: Real> LaplacianSystem<T> {
    pub fn new(
        reference: &TriangleMesh<T>,
        weights: &EdgeWeights<T>,
        anchor: usize,
    ) -> Result<Self> {
        let n = reference.num_vertices();
        if anchor >= n {
            return Err(Error::IndexOutOfRange {
                index: anchor,
                len: n,
            });
        }
        if n < 2 {
            return Err(Error::InvalidArgument(
                "reconstruction needs at least two vertices".into(),
            ));
        }
        let topo = reference.topology();
        let order = rcm_order(topo, Some(anchor));
        let mut position = vec![usize::MAX; n];
        for (k, &v) in order.iter().enumerate() {
            position[v] = k;
        }
        let m = order.len();
        let two = T::lit(2.0);
        let mut coo = CooMatrix::new(m, m);
        for (k, &i) in order.iter().enumerate() {
            let mut diag = T::zero();
            for (&j, &c) in topo.neighbors(i).iter().zip(weights.row(i)) {
                diag += two * c;
                if j != anchor {
                    coo.push(k, position[j], -two * c);
                }
            }
            coo.push(k, k, diag);
        }
        let csc = CscMatrix::from(&coo);
        let factor = CscCholesky::factor(&csc)
            .map_err(|e| Error::Solver(format!("Laplacian factorization: {e}")))?;
        Ok(Self {
            reference: reference.clone(),
            weights: weights.clone(),
            anchor,
            order,
            factor,
        })
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    pub fn reference(&self) -> &TriangleMesh<T> {
        &self.reference
    }

    pub fn weights(&self) -> &EdgeWeights<T> {
        &self.weights
    }

    /// Positions whose gradients best match `grads`, with the anchor at `anchor_position`.
    pub fn solve(
        &self,
        grads: &[Matrix3<T>],
        anchor_position: Vector3<T>,
    ) -> Result<Vec<Vector3<T>>> {
        let n = self.reference.num_vertices();
        if grads.len() != n {
            return Err(Error::TopologyMismatch(format!(
                "{} gradients for {n} vertices",
                grads.len()
            )));
        }
        let b = gradient_rhs(&self.reference, &self.weights, grads);
        let m = self.order.len();
        let mut rhs = DMatrix::zeros(m, 3);
        let two = T::lit(2.0);
        let topo = self.reference.topology();
        for (k, &i) in self.order.iter().enumerate() {
            let mut r = b[i];
            if let Ok(slot) = topo.neighbors(i).binary_search(&self.anchor) {
                r += anchor_position * (two * self.weights.row(i)[slot]);
            }
            for d in 0..3 {
                rhs[(k, d)] = r[d];
            }
        }
        let x = self.factor.solve(&rhs);
        let mut out = vec![Vector3::zeros(); n];
        out[self.anchor] = anchor_position;
        for (k, &i) in self.order.iter().enumerate() {
            out[i] = Vector3::new(x[(k, 0)], x[(k, 1)], x[(k, 2)]);
        }
        if out.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::Solver("non-finite reconstruction".into()));
        }
        Ok(out)
    }

    /// Reconstructs the mesh for blend weights `w`.
    pub fn reconstruct(
        &self,
        basis: &DeformBasis<T>,
        w: &BlendWeights<T>,
        anchor_position: Vector3<T>,
    ) -> Result<TriangleMesh<T>> {
        let grads = blend_gradients(basis, w)?;
        let v = self.solve(&grads, anchor_position)?;
        self.reference.with_vertices(v, "reconstruction")
    }

    /// Landmark-augmented solve. With `lambda == 0` this is exactly [`Self::reconstruct`].
    ///
    /// With `lambda > 0` the anchor is released: the landmark rows fix the in-image
    /// translation and a penalty on the anchor's depth along the view axis fixes the
    /// remaining null direction without changing the minimum.
    pub fn solve_p_step(
        &self,
        basis: &DeformBasis<T>,
        w: &BlendWeights<T>,
        proj: &ProjectionParams<T>,
        lms: &LandmarkSpec<T>,
        lambda: T,
        anchor_position: Vector3<T>,
    ) -> Result<TriangleMesh<T>> {
        if !(lambda >= T::zero()) {
            return Err(Error::InvalidArgument("lambda must be non-negative".into()));
        }
        lms.validate_for(&self.reference)?;
        if lambda == T::zero() {
            return self.reconstruct(basis, w, anchor_position);
        }
        let grads = blend_gradients(basis, w)?;
        let b = gradient_rhs(&self.reference, &self.weights, &grads);
        let positions = solve_landmark_system(
            &self.reference,
            &self.weights,
            &b,
            proj,
            lms,
            lambda,
            self.anchor,
            anchor_position,
        )?;
        self.reference.with_vertices(positions, "p-step")
    }
}

#[allow(clippy::too_many_arguments)]
fn solve_landmark_system<T: Real>(
    reference: &TriangleMesh<T>,
    weights: &EdgeWeights<T>,
    b: &[Vector3<T>],
    proj: &ProjectionParams<T>,
    lms: &LandmarkSpec<T>,
    lambda: T,
    anchor: usize,
    anchor_position: Vector3<T>,
) -> Result<Vec<Vector3<T>>> {
    if lms
        .points
        .iter()
        .any(|q| !(q.x.is_finite() && q.y.is_finite()))
    {
        return Err(Error::NonFinite("landmark targets"));
    }
    let n = reference.num_vertices();
    let topo = reference.topology();
    let order = rcm_order(topo, None);
    let mut position = vec![0usize; n];
    for (k, &v) in order.iter().enumerate() {
        position[v] = k;
    }
    let r = proj.rotation_matrix();
    let s = proj.scale;
    // RᵀΠᵀΠR = s² Rᵀ diag(1, 1, 0) R.
    let mut drop_z = Matrix3::identity();
    drop_z[(2, 2)] = T::zero();
    let block = r.transpose() * drop_z * r * (s * s * lambda);
    let view_axis: Vector3<T> = r.row(2).transpose();

    let mut diag_blocks = vec![Matrix3::<T>::zeros(); n];
    let mut rhs: Vec<Vector3<T>> = b.to_vec();
    for (&i, q) in lms.indices.iter().zip(&lms.points) {
        diag_blocks[i] += block;
        let qt = q - proj.translation;
        rhs[i] += r.transpose() * Vector3::new(qt.x, qt.y, T::zero()) * (s * lambda);
    }
    let two = T::lit(2.0);
    let mu = two * weights.row_sum(anchor);
    diag_blocks[anchor] += view_axis * view_axis.transpose() * mu;
    rhs[anchor] += view_axis * (mu * view_axis.dot(&anchor_position));

    let mut coo = CooMatrix::new(3 * n, 3 * n);
    for &i in &order {
        let pi = 3 * position[i];
        let mut d = Matrix3::identity() * (two * weights.row_sum(i));
        d += diag_blocks[i];
        for a in 0..3 {
            for c in 0..3 {
                if d[(a, c)] != T::zero() {
                    coo.push(pi + a, pi + c, d[(a, c)]);
                }
            }
        }
        for (&j, &c) in topo.neighbors(i).iter().zip(weights.row(i)) {
            let pj = 3 * position[j];
            for a in 0..3 {
                coo.push(pi + a, pj + a, -two * c);
            }
        }
    }
    let csc = CscMatrix::from(&coo);
    let factor = CscCholesky::factor(&csc)
        .map_err(|e| Error::Solver(format!("P-step factorization: {e}")))?;
    let mut rv = DMatrix::zeros(3 * n, 1);
    for i in 0..n {
        for a in 0..3 {
            rv[(3 * position[i] + a, 0)] = rhs[i][a];
        }
    }
    let x = factor.solve(&rv);
    let out: Vec<Vector3<T>> = (0..n)
        .map(|i| {
            let p = 3 * position[i];
            Vector3::new(x[(p, 0)], x[(p + 1, 0)], x[(p + 2, 0)])
        })
        .collect();
    if out.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
        return Err(Error::Solver("non-finite P-step solution".into()));
    }
    Ok(out)
}

/// One-shot reconstruction with a freshly factored system.
pub fn reconstruct_from_weights<T: Real>(
    basis: &DeformBasis<T>,
    w: &BlendWeights<T>,
    anchor: Anchor<T>,
) -> Result<TriangleMesh<T>> {
    LaplacianSystem::new(&basis.reference, &basis.weights, anchor.vertex)?.reconstruct(
        basis,
        w,
        anchor.position,
    )
}

/// One-shot P′-step with a freshly factored system.
pub fn solve_p_step<T: Real>(
    basis: &DeformBasis<T>,
    w: &BlendWeights<T>,
    proj: &ProjectionParams<T>,
    lms: &LandmarkSpec<T>,
    lambda: T,
    anchor: Anchor<T>,
) -> Result<TriangleMesh<T>> {
    LaplacianSystem::new(&basis.reference, &basis.weights, anchor.vertex)?.solve_p_step(
        basis,
        w,
        proj,
        lms,
        lambda,
        anchor.position,
    )
}
