//! Comparison fitters: a regularized linear (PCA) shape model and ARAP post-deformation,
//! plus the per-task error table.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use rayon::prelude::*;

use crate::collection::CaricatureTask;
use crate::deform::DeformBasis;
use crate::error::{Error, Result};
use crate::io::LandmarkSpec;
use crate::mesh::{cotangent_weights, EdgeWeights, TriangleMesh};
use crate::pipeline::{fit_caricature, FitConfig};
use crate::projection::{estimate_params, fitting_error_over, landmark_loss, ProjectionParams};
use crate::reconstruction::rcm_order;
use crate::scalar::Real;

/// Regularization weight of the "3DMM" preset at a reference face-box diagonal of 250 px.
pub const REFERENCE_LAMBDA_REG: f64 = 3000.0;
const REFERENCE_FACE_BOX: f64 = 250.0;

/// `3000·(d/250)²`: the preset rescaled to a landmark set whose bounding-box diagonal is `d` px.
pub fn scaled_lambda_reg(face_box_diagonal: f64) -> f64 {
    REFERENCE_LAMBDA_REG * (face_box_diagonal / REFERENCE_FACE_BOX).powi(2)
}

/// Mean shape plus orthonormal displacement modes with per-mode standard deviations.
#[derive(Debug, Clone)]
pub struct LinearModel<T: Real> {
    pub mean: TriangleMesh<T>,
    /// `3|V| × m`, columns orthonormal, coordinates interleaved per vertex.
    pub axes: DMatrix<T>,
    /// Descending, positive.
    pub sigma: Vec<T>,
}

impl<T: Real> LinearModel<T> {
    pub fn num_modes(&self) -> usize {
        self.sigma.len()
    }

    /// `mean + A α`.
    pub fn instance(&self, alpha: &DVector<T>) -> Result<TriangleMesh<T>> {
        if alpha.len() != self.num_modes() {
            return Err(Error::InvalidArgument(format!(
                "{} coefficients for {} modes",
                alpha.len(),
                self.num_modes()
            )));
        }
        let d = &self.axes * alpha;
        let verts = self
            .mean
            .vertices()
            .iter()
            .enumerate()
            .map(|(i, v)| v + Vector3::new(d[3 * i], d[3 * i + 1], d[3 * i + 2]))
            .collect();
        self.mean.with_vertices(verts, "linear_fit")
    }

    /// Coefficients of the orthogonal projection of `mesh` onto the model.
    pub fn project(&self, mesh: &TriangleMesh<T>) -> Result<DVector<T>> {
        self.mean.ensure_same_topology(mesh)?;
        let x = flatten_offset(mesh, &self.mean);
        Ok(self.axes.tr_mul(&x))
    }
}

fn flatten_offset<T: Real>(m: &TriangleMesh<T>, base: &TriangleMesh<T>) -> DVector<T> {
    DVector::from_iterator(
        3 * m.num_vertices(),
        m.vertices().iter().zip(base.vertices()).flat_map(|(a, b)| {
            let d = a - b;
            [d.x, d.y, d.z]
        }),
    )
}

/// PCA through the `n × n` Gram matrix of centered shapes; keeps the fewest modes whose
/// variance reaches `variance_kept` of the total.
pub fn build_linear_model<T: Real>(
    meshes: &[TriangleMesh<T>],
    variance_kept: T,
) -> Result<LinearModel<T>> {
    if meshes.len() < 2 {
        return Err(Error::InvalidArgument(
            "linear model needs at least two meshes".into(),
        ));
    }
    if !(variance_kept > T::zero() && variance_kept <= T::one()) {
        return Err(Error::InvalidArgument(
            "variance_kept must lie in (0, 1]".into(),
        ));
    }
    let mut mean = crate::collection::mean_shape(meshes)?;
    mean.name = "linear_mean".into();
    let n = meshes.len();
    let cols: Vec<DVector<T>> = meshes
        .par_iter()
        .map(|m| flatten_offset(m, &mean))
        .collect();
    let x = DMatrix::from_columns(&cols);
    let gram = x.tr_mul(&x);
    let eig = gram.symmetric_eigen();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let top = eig.eigenvalues[idx[0]].max(T::zero());
    let floor = top * T::lit(1e-12);
    let usable: Vec<usize> = idx
        .into_iter()
        .filter(|&k| eig.eigenvalues[k] > floor)
        .collect();
    let total = usable
        .iter()
        .fold(T::zero(), |a, &k| a + eig.eigenvalues[k]);
    if !(total > T::zero()) {
        return Err(Error::InvalidArgument("shapes do not vary".into()));
    }
    let mut keep = 0;
    let mut acc = T::zero();
    let target = total * variance_kept * (T::one() - T::lit(1e-12));
    for &k in &usable {
        acc += eig.eigenvalues[k];
        keep += 1;
        if acc >= target {
            break;
        }
    }
    let dof = T::from_count(n - 1);
    let mut axes = DMatrix::zeros(x.nrows(), keep);
    let mut sigma = Vec::with_capacity(keep);
    for (c, &k) in usable[..keep].iter().enumerate() {
        let lam = eig.eigenvalues[k];
        let mut u = &x * eig.eigenvectors.column(k);
        u /= lam.sqrt();
        // Sign convention: largest-magnitude entry positive.
        let imax = u.iamax();
        if u[imax] < T::zero() {
            u = -u;
        }
        axes.set_column(c, &u);
        sigma.push((lam / dof).sqrt());
    }
    Ok(LinearModel { mean, axes, sigma })
}

/// Outcome of a linear-model landmark fit.
#[derive(Debug, Clone)]
pub struct LinearFit<T: Real> {
    pub mesh: TriangleMesh<T>,
    pub alpha: DVector<T>,
    pub proj: ProjectionParams<T>,
    pub e_lan: T,
    pub e_error: T,
    pub iterations: usize,
}

/// Ridge solve for `α` minimizing `E_lan + λ_reg Σ (αⱼ/σⱼ)²` at a fixed camera.
pub fn solve_alpha<T: Real>(
    model: &LinearModel<T>,
    lms: &LandmarkSpec<T>,
    proj: &ProjectionParams<T>,
    lambda_reg: T,
) -> Result<DVector<T>> {
    let m = model.num_modes();
    let a = proj.linear_part();
    let mut b = DMatrix::zeros(2 * lms.len(), m);
    let mut r = DVector::zeros(2 * lms.len());
    for (k, (&i, q)) in lms.indices.iter().zip(&lms.points).enumerate() {
        for j in 0..m {
            let u = Vector3::new(
                model.axes[(3 * i, j)],
                model.axes[(3 * i + 1, j)],
                model.axes[(3 * i + 2, j)],
            );
            let au = a * u;
            b[(2 * k, j)] = au.x;
            b[(2 * k + 1, j)] = au.y;
        }
        let res = q - proj.translation - a * model.mean.vertices()[i];
        r[2 * k] = res.x;
        r[2 * k + 1] = res.y;
    }
    let mut lhs = b.tr_mul(&b);
    for j in 0..m {
        lhs[(j, j)] += lambda_reg / (model.sigma[j] * model.sigma[j]);
    }
    let rhs = b.tr_mul(&r);
    if lambda_reg > T::zero() {
        if let Some(ch) = lhs.clone().cholesky() {
            return Ok(ch.solve(&rhs));
        }
    }
    // Minimum-norm solution when underdetermined.
    let svd = lhs.svd(true, true);
    let tol = svd.singular_values.max() * T::lit(1e-12);
    svd.solve(&rhs, tol)
        .map_err(|e| Error::Solver(e.to_string()))
}

/// Alternates camera estimation and the ridge solve until `E_lan` drops by less than 1e-6.
pub fn fit_linear<T: Real>(
    model: &LinearModel<T>,
    lms: &LandmarkSpec<T>,
    lambda_reg: T,
) -> Result<LinearFit<T>> {
    if !(lambda_reg >= T::zero()) {
        return Err(Error::InvalidArgument(
            "lambda_reg must be non-negative".into(),
        ));
    }
    lms.validate_for(&model.mean)?;
    let mut alpha = DVector::zeros(model.num_modes());
    let mut mesh = model.mean.clone();
    let mut proj = estimate_params(&mesh, lms)?;
    let objective = |p: &ProjectionParams<T>, m: &TriangleMesh<T>, a: &DVector<T>| {
        let reg = a
            .iter()
            .zip(&model.sigma)
            .fold(T::zero(), |s, (x, sg)| s + (*x / *sg) * (*x / *sg));
        landmark_loss(p, m, lms) + lambda_reg * reg
    };
    let mut prev = objective(&proj, &mesh, &alpha);
    let mut iterations = 0;
    for _ in 0..200 {
        iterations += 1;
        alpha = solve_alpha(model, lms, &proj, lambda_reg)?;
        mesh = model.instance(&alpha)?;
        let est = estimate_params(&mesh, lms)?;
        if landmark_loss(&est, &mesh, lms) <= landmark_loss(&proj, &mesh, lms) {
            proj = est;
        }
        let cur = objective(&proj, &mesh, &alpha);
        let done = prev - cur < T::lit(1e-6);
        prev = cur;
        if done {
            break;
        }
    }
    let e_lan = landmark_loss(&proj, &mesh, lms);
    Ok(LinearFit {
        mesh,
        alpha,
        proj,
        e_lan,
        e_error: fitting_error_over(e_lan, lms.len()),
        iterations,
    })
}

#[derive(Debug, Clone)]
pub struct ArapResult<T: Real> {
    pub mesh: TriangleMesh<T>,
    pub energy: T,
    pub iterations: usize,
}

/// Depth-preserving lift of the 2D targets: the in-image position is back-projected and
/// the landmark vertex keeps its coordinate along the view axis.
pub fn lift_targets<T: Real>(
    mesh: &TriangleMesh<T>,
    lms: &LandmarkSpec<T>,
    proj: &ProjectionParams<T>,
) -> Vec<Vector3<T>> {
    let r = proj.rotation_matrix();
    lms.indices
        .iter()
        .zip(&lms.points)
        .map(|(&i, q)| {
            let cam = r * mesh.vertices()[i];
            let uv = (q - proj.translation) / proj.scale;
            r.transpose() * Vector3::new(uv.x, uv.y, cam.z)
        })
        .collect()
}

fn arap_energy<T: Real>(
    rest: &TriangleMesh<T>,
    w: &EdgeWeights<T>,
    cur: &[Vector3<T>],
    rots: &[Matrix3<T>],
) -> T {
    let p = rest.vertices();
    let topo = rest.topology();
    (0..p.len())
        .map(|i| {
            topo.neighbors(i)
                .iter()
                .zip(w.row(i))
                .fold(T::zero(), |s, (&j, &c)| {
                    s + (cur[i] - cur[j] - rots[i] * (p[i] - p[j])).norm_squared() * c
                })
        })
        .fold(T::zero(), |a, b| a + b)
}

fn best_rotation<T: Real>(s: &Matrix3<T>) -> Matrix3<T> {
    let svd = s.svd(true, true);
    let u = svd.u.expect("u");
    let v = svd.v_t.expect("v_t").transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < T::zero() {
        d[(2, 2)] = -T::one();
    }
    v * d * u.transpose()
}

/// As-rigid-as-possible deformation of `mesh` with its landmark vertices pinned at the
/// lifted targets. Local-global iterations with cotangent weights, at most 50 or until the
/// energy changes by less than 1e-6 relative.
pub fn arap_deform<T: Real>(
    mesh: &TriangleMesh<T>,
    lms: &LandmarkSpec<T>,
    proj: &ProjectionParams<T>,
) -> Result<ArapResult<T>> {
    proj.validate()?;
    lms.validate_for(mesh)?;
    let n = mesh.num_vertices();
    let weights = cotangent_weights(mesh)?;
    let topo = mesh.topology();
    let targets = lift_targets(mesh, lms, proj);
    let mut fixed = vec![None; n];
    for (&i, t) in lms.indices.iter().zip(&targets) {
        fixed[i] = Some(*t);
    }
    let order: Vec<usize> = rcm_order(topo, None)
        .into_iter()
        .filter(|&v| fixed[v].is_none())
        .collect();
    let mut position = vec![usize::MAX; n];
    for (k, &v) in order.iter().enumerate() {
        position[v] = k;
    }
    let m = order.len();
    let mut cur: Vec<Vector3<T>> = mesh.vertices().to_vec();
    for (i, f) in fixed.iter().enumerate() {
        if let Some(t) = f {
            cur[i] = *t;
        }
    }
    if m == 0 {
        let rots = vec![Matrix3::identity(); n];
        let energy = arap_energy(mesh, &weights, &cur, &rots);
        return Ok(ArapResult {
            mesh: mesh.with_vertices(cur, "arap")?,
            energy,
            iterations: 0,
        });
    }
    let mut coo = CooMatrix::new(m, m);
    for (k, &i) in order.iter().enumerate() {
        let mut diag = T::zero();
        for (&j, &c) in topo.neighbors(i).iter().zip(weights.row(i)) {
            diag += c;
            if fixed[j].is_none() {
                coo.push(k, position[j], -c);
            }
        }
        coo.push(k, k, diag);
    }
    let factor = CscCholesky::factor(&CscMatrix::from(&coo))
        .map_err(|e| Error::Solver(format!("ARAP factorization: {e}")))?;
    let rest = mesh.vertices();
    let half = T::lit(0.5);
    let mut prev = T::max_value().unwrap_or_else(T::one);
    let mut energy = T::zero();
    let mut iterations = 0;
    for _ in 0..50 {
        iterations += 1;
        let rots: Vec<Matrix3<T>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut s = Matrix3::zeros();
                for (&j, &c) in topo.neighbors(i).iter().zip(weights.row(i)) {
                    s += (rest[i] - rest[j]) * (cur[i] - cur[j]).transpose() * c;
                }
                best_rotation(&s)
            })
            .collect();
        let mut rhs = DMatrix::zeros(m, 3);
        for (k, &i) in order.iter().enumerate() {
            let mut b = Vector3::zeros();
            for (&j, &c) in topo.neighbors(i).iter().zip(weights.row(i)) {
                b += (rots[i] + rots[j]) * (rest[i] - rest[j]) * (c * half);
                if let Some(t) = fixed[j] {
                    b += t * c;
                }
            }
            for d in 0..3 {
                rhs[(k, d)] = b[d];
            }
        }
        let x = factor.solve(&rhs);
        for (k, &i) in order.iter().enumerate() {
            cur[i] = Vector3::new(x[(k, 0)], x[(k, 1)], x[(k, 2)]);
        }
        energy = arap_energy(mesh, &weights, &cur, &rots);
        if !energy.is_finite() {
            return Err(Error::NonFinite("ARAP energy"));
        }
        let scale = prev.abs().max(T::lit(1e-300));
        let done = (prev - energy).abs() <= T::lit(1e-6) * scale;
        prev = energy;
        if done {
            break;
        }
    }
    Ok(ArapResult {
        mesh: mesh.with_vertices(cur, "arap")?,
        energy,
        iterations,
    })
}

/// `E_error` of every method on one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRow {
    pub task: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub methods: Vec<String>,
    pub rows: Vec<TaskRow>,
}

impl ComparisonTable {
    pub fn mean(&self, method: &str) -> Option<f64> {
        let k = self.methods.iter().position(|m| m == method)?;
        let n = self.rows.len().max(1) as f64;
        Some(self.rows.iter().map(|r| r.values[k]).sum::<f64>() / n)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("task,{}\n", self.methods.join(","));
        let fmt = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:.6e}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        for r in &self.rows {
            s.push_str(&format!("{},{}\n", r.task, fmt(&r.values)));
        }
        let means: Vec<f64> = self
            .methods
            .iter()
            .map(|m| self.mean(m).unwrap_or(0.0))
            .collect();
        s.push_str(&format!("mean,{}\n", fmt(&means)));
        s
    }
}

pub const METHOD_ORACLE: &str = "oracle";
pub const METHOD_OURS: &str = "ours";
pub const METHOD_LINEAR_FREE: &str = "3dmm_free";
pub const METHOD_LINEAR_REG: &str = "3dmm";
pub const METHOD_LINEAR_FREE_ARAP: &str = "3dmm_free_arap";
pub const METHOD_LINEAR_REG_ARAP: &str = "3dmm_arap";

/// Settings for [`compare_methods`].
#[derive(Debug, Clone)]
pub struct CompareConfig<T: Real> {
    pub fit: FitConfig<T>,
    /// Fixed λ_reg for the regularized linear fit; `None` uses the rescaled preset per task.
    pub lambda_reg: Option<T>,
}

impl<T: Real> Default for CompareConfig<T> {
    fn default() -> Self {
        Self {
            fit: FitConfig::default(),
            lambda_reg: None,
        }
    }
}

/// Runs every method on every task. The ground-truth row uses the task's own mesh and camera.
pub fn compare_methods<T: Real>(
    basis: &DeformBasis<T>,
    model: &LinearModel<T>,
    tasks: &[CaricatureTask<T>],
    cfg: &CompareConfig<T>,
) -> Result<ComparisonTable> {
    let methods = [
        METHOD_ORACLE,
        METHOD_OURS,
        METHOD_LINEAR_FREE,
        METHOD_LINEAR_REG,
        METHOD_LINEAR_FREE_ARAP,
        METHOD_LINEAR_REG_ARAP,
    ];
    let mut rows = Vec::with_capacity(tasks.len());
    for task in tasks {
        let lms = &task.landmarks;
        let count = lms.len();
        let err = |p: &ProjectionParams<T>, m: &TriangleMesh<T>| {
            fitting_error_over(landmark_loss(p, m, lms), count).as_f64()
        };
        let oracle = err(&task.camera, &task.target);
        let ours = fit_caricature(basis, lms, &cfg.fit)?;
        let free = fit_linear(model, lms, T::zero())?;
        let lam = cfg
            .lambda_reg
            .unwrap_or_else(|| T::lit(scaled_lambda_reg(lms.points_bbox_diagonal().as_f64())));
        let reg = fit_linear(model, lms, lam)?;
        let free_arap = arap_deform(&free.mesh, lms, &free.proj)?;
        let reg_arap = arap_deform(&reg.mesh, lms, &reg.proj)?;
        rows.push(TaskRow {
            task: task.name.clone(),
            values: vec![
                oracle,
                ours.e_error.as_f64(),
                free.e_error.as_f64(),
                reg.e_error.as_f64(),
                err(&free.proj, &free_arap.mesh),
                err(&reg.proj, &reg_arap.mesh),
            ],
        });
    }
    Ok(ComparisonTable {
        methods: methods.iter().map(|s| s.to_string()).collect(),
        rows,
    })
}

const LM_MAGIC: &[u8; 4] = b"PLM\0";
const LM_VERSION: u32 = 1;

/// Binary model file: magic, version, vertex/face/mode counts, mean positions, faces,
/// sigmas, then the axis matrix column by column (all little-endian f64 / u32).
pub fn encode_linear_model<T: Real>(model: &LinearModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(LM_MAGIC);
    out.extend_from_slice(&LM_VERSION.to_le_bytes());
    let nv = model.mean.num_vertices() as u64;
    let nf = model.mean.num_faces() as u64;
    let m = model.num_modes() as u64;
    for x in [nv, nf, m] {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for v in model.mean.vertices() {
        for c in v.iter() {
            out.extend_from_slice(&c.as_f64().to_le_bytes());
        }
    }
    for f in model.mean.faces() {
        for &i in f {
            out.extend_from_slice(&(i as u32).to_le_bytes());
        }
    }
    for s in &model.sigma {
        out.extend_from_slice(&s.as_f64().to_le_bytes());
    }
    for x in model.axes.iter() {
        out.extend_from_slice(&x.as_f64().to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn bad(&self, message: &str) -> Error {
        Error::Format {
            path: self.origin.display().to_string(),
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(self.bad("truncated linear model"));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(8 * count)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode_linear_model<T: Real>(bytes: &[u8], origin: &Path) -> Result<LinearModel<T>> {
    let mut rd = Reader { buf: bytes, origin };
    if rd.take(4)? != LM_MAGIC {
        return Err(rd.bad("not a linear model file"));
    }
    let version = rd.u32()?;
    if version != LM_VERSION {
        return Err(rd.bad(&format!("unsupported version {version}")));
    }
    let nv = rd.u64()? as usize;
    let nf = rd.u64()? as usize;
    let m = rd.u64()? as usize;
    let expected = nv
        .checked_mul(24)
        .and_then(|a| nf.checked_mul(12).map(|b| a + b))
        .and_then(|a| m.checked_mul(8).map(|b| a + b))
        .and_then(|a| {
            nv.checked_mul(24)
                .and_then(|c| c.checked_mul(m))
                .map(|b| a + b)
        })
        .ok_or_else(|| rd.bad("size overflow"))?;
    if rd.buf.len() != expected {
        return Err(rd.bad("payload length does not match header"));
    }
    let pos = rd.f64s(3 * nv)?;
    let verts = pos
        .chunks_exact(3)
        .map(|c| Vector3::new(T::lit(c[0]), T::lit(c[1]), T::lit(c[2])))
        .collect();
    let idx: Vec<usize> = rd
        .take(12 * nf)?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let faces = idx.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let sigma: Vec<T> = rd.f64s(m)?.into_iter().map(T::lit).collect();
    let axes_raw: Vec<T> = rd.f64s(3 * nv * m)?.into_iter().map(T::lit).collect();
    if sigma.iter().any(|s| !(*s > T::zero())) {
        return Err(rd.bad("non-positive standard deviation"));
    }
    let mean = TriangleMesh::new(verts, faces, "linear_mean")?;
    Ok(LinearModel {
        mean,
        axes: DMatrix::from_vec(3 * nv, m, axes_raw),
        sigma,
    })
}

pub fn save_linear_model<T: Real>(path: impl AsRef<Path>, model: &LinearModel<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_linear_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_linear_model<T: Real>(path: impl AsRef<Path>) -> Result<LinearModel<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_linear_model(&bytes, path)
}
