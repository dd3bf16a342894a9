//! Deformation energy `E_def(w)` at a fixed deformed mesh and its minimization over the
//! blend weights by Levenberg–Marquardt.
//!
//! The residual of ordered pair `(i, j)` is `√cᵢⱼ (e′ᵢⱼ − Tᵢ(w) eᵢⱼ)`. Normal equations are
//! assembled per vertex through the 1-ring Gram matrix `Gᵢ = Lᵢ Lᵢᵀ`, so a Jacobian
//! entry pair contributes `⟨∂Tᵢ/∂wₖ Lᵢ, ∂Tᵢ/∂wₘ Lᵢ⟩_F` without materializing the
//! residual rows.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;

use crate::deform::{blend_gradient, blend_parts, BlendWeights, DeformBasis};
use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::rotation::{exp_skew, right_jacobian, skew, SkewLog};
use crate::scalar::Real;

/// How `∂Tᵢ/∂w_R,ₗ` is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RotationJacobian {
    /// `exp(Σ w_R log R)·log R_ₗ·(I + Σ w_S S′)`. Exact only when the weighted logs commute.
    #[default]
    Commuting,
    /// Uses the right Jacobian of the exponential map; exact for any logs.
    Exact,
}

#[derive(Debug, Clone)]
pub struct LmOptions<T: Real> {
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the energy by less than this fraction.
    pub relative_tolerance: T,
    pub gradient_tolerance: T,
    /// Optional `ridge·‖w‖²` term; zero reproduces the plain deformation energy.
    pub ridge: T,
    /// Optimize a single weight per example with `w_R = w_S`.
    pub tie_weights: bool,
    pub rotation_jacobian: RotationJacobian,
}

impl<T: Real> Default for LmOptions<T> {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            relative_tolerance: T::lit(1e-8),
            gradient_tolerance: T::lit(1e-10),
            ridge: T::zero(),
            tie_weights: false,
            rotation_jacobian: RotationJacobian::Commuting,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    RelativeDecrease,
    SmallGradient,
    ZeroEnergy,
    MaxIterations,
    DampingOverflow,
}

/// Iteration state of the damped solver.
#[derive(Debug, Clone)]
pub struct LmState<T: Real> {
    pub weights: BlendWeights<T>,
    pub damping: T,
    pub iteration: usize,
    /// Energy after every accepted step, starting with the initial energy.
    pub energy_history: Vec<T>,
    pub rejected_steps: usize,
}

#[derive(Debug, Clone)]
pub struct LmReport<T: Real> {
    pub state: LmState<T>,
    pub termination: Termination,
}

impl<T: Real> LmReport<T> {
    pub fn weights(&self) -> &BlendWeights<T> {
        &self.state.weights
    }

    pub fn initial_energy(&self) -> T {
        self.state.energy_history[0]
    }

    pub fn final_energy(&self) -> T {
        *self
            .state
            .energy_history
            .last()
            .expect("history is never empty")
    }

    pub fn converged(&self) -> bool {
        !matches!(
            self.termination,
            Termination::MaxIterations | Termination::DampingOverflow
        )
    }
}

fn check_inputs<T: Real>(
    basis: &DeformBasis<T>,
    w: &BlendWeights<T>,
    deformed: &TriangleMesh<T>,
) -> Result<()> {
    basis.check_weights(w)?;
    basis.reference.ensure_same_topology(deformed)
}

fn vertex_energy<T: Real>(
    basis: &DeformBasis<T>,
    t: &Matrix3<T>,
    deformed: &TriangleMesh<T>,
    i: usize,
) -> T {
    let p = basis.reference.vertices();
    let q = deformed.vertices();
    let mut e = T::zero();
    for (&j, &c) in basis
        .reference
        .topology()
        .neighbors(i)
        .iter()
        .zip(basis.weights.row(i))
    {
        e += (q[i] - q[j] - t * (p[i] - p[j])).norm_squared() * c;
    }
    e
}

/// `Σᵢ Σⱼ cᵢⱼ ‖e′ᵢⱼ − Tᵢ(w) eᵢⱼ‖²`.
pub fn energy_def<T: Real>(
    basis: &DeformBasis<T>,
    w: &BlendWeights<T>,
    deformed: &TriangleMesh<T>,
) -> Result<T> {
    check_inputs(basis, w, deformed)?;
    let per_vertex: Vec<T> = (0..basis.num_vertices())
        .into_par_iter()
        .map(|i| vertex_energy(basis, &blend_gradient(basis, w, i), deformed, i))
        .collect();
    Ok(per_vertex.into_iter().fold(T::zero(), |a, b| a + b))
}

/// Stacked residuals `√cᵢⱼ (e′ᵢⱼ − Tᵢ eᵢⱼ)`, vertex-major then neighbor order, three per pair.
pub fn residual_vector<T: Real>(
    basis: &DeformBasis<T>,
    w: &BlendWeights<T>,
    deformed: &TriangleMesh<T>,
) -> Result<DVector<T>> {
    check_inputs(basis, w, deformed)?;
    let topo = basis.reference.topology();
    let p = basis.reference.vertices();
    let q = deformed.vertices();
    let mut r = DVector::zeros(3 * topo.num_directed_edges());
    let mut k = 0;
    for i in 0..basis.num_vertices() {
        let t = blend_gradient(basis, w, i);
        for (&j, &c) in topo.neighbors(i).iter().zip(basis.weights.row(i)) {
            let v = (q[i] - q[j] - t * (p[i] - p[j])) * c.sqrt();
            r.fixed_rows_mut::<3>(k).copy_from(&v);
            k += 3;
        }
    }
    Ok(r)
}

/// `[∂Tᵢ/∂w_R,₁ … ∂Tᵢ/∂w_R,ₙ, ∂Tᵢ/∂w_S,₁ … ∂Tᵢ/∂w_S,ₙ]` at vertex `i`.
pub fn jacobian_blocks<T: Real>(
    basis: &DeformBasis<T>,
    w: &BlendWeights<T>,
    i: usize,
    kind: RotationJacobian,
) -> Result<Vec<Matrix3<T>>> {
    basis.check_weights(w)?;
    if i >= basis.num_vertices() {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: basis.num_vertices(),
        });
    }
    let (phi, s) = blend_parts(basis, w, i);
    let e = exp_skew(&SkewLog::from_vector(phi)).into_inner();
    let jr = right_jacobian(&phi);
    let mut out = Vec::with_capacity(2 * basis.len());
    for rep in &basis.reps {
        let omega = rotation_direction(rep.0[i].log_r.vector(), &jr, kind);
        out.push(e * skew(&omega) * s);
    }
    for rep in &basis.reps {
        out.push(e * rep.0[i].s_prime);
    }
    Ok(out)
}

#[inline]
fn rotation_direction<T: Real>(
    log_r: &Vector3<T>,
    jr: &Matrix3<T>,
    kind: RotationJacobian,
) -> Vector3<T> {
    match kind {
        RotationJacobian::Commuting => *log_r,
        RotationJacobian::Exact => jr * log_r,
    }
}

/// Square root of a symmetric positive semi-definite 3×3 matrix: `L Lᵀ = G`.
fn psd_factor<T: Real>(g: &Matrix3<T>) -> Matrix3<T> {
    let eig = g.symmetric_eigen();
    let mut l = eig.eigenvectors;
    for k in 0..3 {
        let s = eig.eigenvalues[k].max(T::zero()).sqrt();
        for r in 0..3 {
            l[(r, k)] *= s;
        }
    }
    l
}

const CHUNK: usize = 128;

/// Reusable per-target data for the weight step.
pub struct WeightProblem<'a, T: Real> {
    basis: &'a DeformBasis<T>,
    deformed: &'a TriangleMesh<T>,
    gram_factor: Vec<Matrix3<T>>,
    gram: Vec<Matrix3<T>>,
    cross: Vec<Matrix3<T>>,
    options: LmOptions<T>,
}

impl<'a, T: Real> WeightProblem<'a, T> {
    pub fn new(
        basis: &'a DeformBasis<T>,
        deformed: &'a TriangleMesh<T>,
        options: LmOptions<T>,
    ) -> Result<Self> {
        basis.reference.ensure_same_topology(deformed)?;
        let p = basis.reference.vertices();
        let q = deformed.vertices();
        let topo = basis.reference.topology();
        let per: Vec<(Matrix3<T>, Matrix3<T>)> = (0..basis.num_vertices())
            .into_par_iter()
            .map(|i| {
                let mut g = Matrix3::zeros();
                let mut h = Matrix3::zeros();
                for (&j, &c) in topo.neighbors(i).iter().zip(basis.weights.row(i)) {
                    let e = p[i] - p[j];
                    g += e * e.transpose() * c;
                    h += (q[i] - q[j]) * e.transpose() * c;
                }
                (g, h)
            })
            .collect();
        let gram_factor = per.par_iter().map(|(g, _)| psd_factor(g)).collect();
        let (gram, cross) = per.into_iter().unzip();
        Ok(Self {
            basis,
            deformed,
            gram_factor,
            gram,
            cross,
            options,
        })
    }

    fn n(&self) -> usize {
        self.basis.len()
    }

    /// Number of free parameters.
    pub fn dimension(&self) -> usize {
        if self.options.tie_weights {
            self.n()
        } else {
            2 * self.n()
        }
    }

    pub fn weights_from_params(&self, x: &DVector<T>) -> BlendWeights<T> {
        let n = self.n();
        if self.options.tie_weights {
            BlendWeights::tied(x.as_slice())
        } else {
            BlendWeights {
                w_r: x.as_slice()[..n].to_vec(),
                w_s: x.as_slice()[n..].to_vec(),
            }
        }
    }

    pub fn params_from_weights(&self, w: &BlendWeights<T>) -> DVector<T> {
        if self.options.tie_weights {
            DVector::from_vec(w.w_r.clone())
        } else {
            DVector::from_vec(w.to_flat())
        }
    }

    /// Deformation energy plus the optional ridge term.
    pub fn objective(&self, x: &DVector<T>) -> T {
        let w = self.weights_from_params(x);
        let per_vertex: Vec<T> = (0..self.basis.num_vertices())
            .into_par_iter()
            .map(|i| {
                vertex_energy(
                    self.basis,
                    &blend_gradient(self.basis, &w, i),
                    self.deformed,
                    i,
                )
            })
            .collect();
        let e = per_vertex.into_iter().fold(T::zero(), |a, b| a + b);
        e + self.options.ridge * x.norm_squared()
    }

    /// Gauss–Newton matrix `JᵀJ` and gradient `Jᵀr` at `x`.
    pub fn linearize(&self, x: &DVector<T>) -> (DMatrix<T>, DVector<T>) {
        let w = self.weights_from_params(x);
        let dim = self.dimension();
        let nv = self.basis.num_vertices();
        let chunks: Vec<(usize, usize)> = (0..nv)
            .step_by(CHUNK)
            .map(|s| (s, (s + CHUNK).min(nv)))
            .collect();
        let partials: Vec<(DMatrix<T>, DVector<T>)> = chunks
            .par_iter()
            .map(|&(start, end)| self.linearize_chunk(&w, start, end, dim))
            .collect();
        let mut jtj = DMatrix::zeros(dim, dim);
        let mut g = DVector::zeros(dim);
        for (a, b) in partials {
            jtj += a;
            g += b;
        }
        if self.options.ridge != T::zero() {
            for k in 0..dim {
                jtj[(k, k)] += self.options.ridge;
            }
            g += x * self.options.ridge;
        }
        (jtj, g)
    }

    fn linearize_chunk(
        &self,
        w: &BlendWeights<T>,
        start: usize,
        end: usize,
        dim: usize,
    ) -> (DMatrix<T>, DVector<T>) {
        let n = self.n();
        let tied = self.options.tie_weights;
        let rows = 9 * (end - start);
        let mut m = DMatrix::zeros(rows, dim);
        let mut g = DVector::zeros(dim);
        for (local, i) in (start..end).enumerate() {
            let (phi, s) = blend_parts(self.basis, w, i);
            let e = exp_skew(&SkewLog::from_vector(phi)).into_inner();
            let jr = right_jacobian(&phi);
            let l = &self.gram_factor[i];
            let y = s * l;
            // Frobenius products are invariant under the common left factor E, so it is
            // applied to the residual side only.
            let resid = self.cross[i] - e * s * self.gram[i];
            let z = e.transpose() * resid * s.transpose();
            let zs = e.transpose() * resid;
            let zv = Vector3::new(
                z[(2, 1)] - z[(1, 2)],
                z[(0, 2)] - z[(2, 0)],
                z[(1, 0)] - z[(0, 1)],
            );
            let row0 = 9 * local;
            for (k, rep) in self.basis.reps.iter().enumerate() {
                let d = &rep.0[i];
                let omega =
                    rotation_direction(d.log_r.vector(), &jr, self.options.rotation_jacobian);
                let col_r = skew(&omega) * y;
                let col_s = d.s_prime * l;
                let g_r = -(omega.dot(&zv));
                let g_s = -(d.s_prime.component_mul(&zs).sum());
                if tied {
                    let col = col_r + col_s;
                    write_col(&mut m, row0, k, &col);
                    g[k] += g_r + g_s;
                } else {
                    write_col(&mut m, row0, k, &col_r);
                    write_col(&mut m, row0, n + k, &col_s);
                    g[k] += g_r;
                    g[n + k] += g_s;
                }
            }
        }
        let mt = m.transpose();
        let mut jtj = DMatrix::zeros(dim, dim);
        jtj.gemm(T::one(), &mt, &m, T::zero());
        (jtj, g)
    }
}

#[inline]
fn write_col<T: Real>(m: &mut DMatrix<T>, row0: usize, col: usize, v: &Matrix3<T>) {
    let mut c = m.column_mut(col);
    for (k, x) in v.iter().enumerate() {
        c[row0 + k] = *x;
    }
}

/// Minimizes `E_def(w)` at fixed `deformed`, starting from `w0`.
///
/// Damping starts at `1e-3·mean(diag JᵀJ)` and is scaled by 0.3 on accepted and 2 on
/// rejected steps; only strictly decreasing steps are accepted.
pub fn optimize_weights<T: Real>(
    basis: &DeformBasis<T>,
    deformed: &TriangleMesh<T>,
    w0: &BlendWeights<T>,
    options: &LmOptions<T>,
) -> Result<LmReport<T>> {
    check_inputs(basis, w0, deformed)?;
    if !w0.is_finite() {
        return Err(Error::NonFinite("initial weights"));
    }
    let problem = WeightProblem::new(basis, deformed, options.clone())?;
    let mut start = w0.clone();
    if options.tie_weights {
        start.w_s = start.w_r.clone();
    }
    let mut x = problem.params_from_weights(&start);
    let mut energy = problem.objective(&x);
    if !energy.is_finite() {
        return Err(Error::NonFinite("deformation energy at initial weights"));
    }
    let mut history = vec![energy];
    let dim = problem.dimension();
    let (mut jtj, mut g) = problem.linearize(&x);
    let mean_diag =
        (0..dim).map(|k| jtj[(k, k)]).fold(T::zero(), |a, b| a + b) / T::from_count(dim.max(1));
    let mut mu = if mean_diag > T::zero() {
        T::lit(1e-3) * mean_diag
    } else {
        T::lit(1e-3)
    };
    let mu_ceiling = (mean_diag.max(T::one())) * T::lit(1e20);
    let mut rejected = 0;
    let mut iteration = 0;
    let termination = loop {
        if energy == T::zero() {
            break Termination::ZeroEnergy;
        }
        if g.norm() < options.gradient_tolerance {
            break Termination::SmallGradient;
        }
        if iteration >= options.max_iterations {
            break Termination::MaxIterations;
        }
        if mu > mu_ceiling {
            break Termination::DampingOverflow;
        }
        iteration += 1;
        let mut a = jtj.clone();
        for k in 0..dim {
            a[(k, k)] += mu;
        }
        let Some(chol) = a.cholesky() else {
            mu *= T::lit(2.0);
            rejected += 1;
            continue;
        };
        let step = chol.solve(&(-&g));
        let candidate = &x + &step;
        let e_new = problem.objective(&candidate);
        if !e_new.is_finite() {
            return Err(Error::NonFinite("deformation energy during weight step"));
        }
        if e_new < energy {
            let rel = (energy - e_new) / energy;
            x = candidate;
            energy = e_new;
            history.push(energy);
            mu *= T::lit(0.3);
            if rel < options.relative_tolerance {
                break Termination::RelativeDecrease;
            }
            let lin = problem.linearize(&x);
            jtj = lin.0;
            g = lin.1;
        } else {
            mu *= T::lit(2.0);
            rejected += 1;
        }
    };
    Ok(LmReport {
        state: LmState {
            weights: problem.weights_from_params(&x),
            damping: mu,
            iteration,
            energy_history: history,
            rejected_steps: rejected,
        },
        termination,
    })
}
