//! Caricature fitting from 2D landmarks: alternating camera update, landmark-augmented
//! reconstruction (P′-step) and weight optimization (w-step).

use std::path::Path;
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage};
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::deform::{BlendWeights, DeformBasis};
use crate::error::{Error, Result};
use crate::io::LandmarkSpec;
use crate::mesh::{bbox_diagonal, TriangleMesh};
use crate::projection::{
    estimate_params, fitting_error_over, landmark_loss, reproject, CameraDocument, ProjectionParams,
};
use crate::reconstruction::LaplacianSystem;
use crate::scalar::Real;
use crate::weights::{energy_def, optimize_weights, LmOptions, Termination};

pub const RESULT_SCHEMA: &str = "fit-result/v1";

/// Which vertex fixes the translation gauge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPolicy {
    /// Reference vertex nearest the reference centroid.
    #[default]
    Centroid,
    Vertex(usize),
}

impl AnchorPolicy {
    pub fn resolve<T: Real>(&self, reference: &TriangleMesh<T>) -> Result<usize> {
        match *self {
            AnchorPolicy::Vertex(v) if v < reference.num_vertices() => Ok(v),
            AnchorPolicy::Vertex(v) => Err(Error::IndexOutOfRange {
                index: v,
                len: reference.num_vertices(),
            }),
            AnchorPolicy::Centroid => {
                let c = reference.centroid();
                let mut best = (T::max_value().unwrap_or_else(T::one), 0);
                for (i, v) in reference.vertices().iter().enumerate() {
                    let d = (v - c).norm_squared();
                    if d < best.0 {
                        best = (d, i);
                    }
                }
                Ok(best.1)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitConfig<T: Real> {
    /// Landmark weight in `E_def + λ·E_lan`.
    pub lambda: T,
    pub max_iterations: usize,
    /// Exit when the P′-step deformation energy changes by less than `ε·bbox²`.
    pub epsilon: T,
    pub tie_weights: bool,
    pub anchor: AnchorPolicy,
    /// Inner solver settings; `tie_weights` above takes precedence.
    pub lm: LmOptions<T>,
}

impl<T: Real> Default for FitConfig<T> {
    fn default() -> Self {
        Self {
            lambda: T::lit(0.01),
            max_iterations: 4,
            epsilon: T::lit(1e-2),
            tie_weights: false,
            anchor: AnchorPolicy::Centroid,
            lm: LmOptions::default(),
        }
    }
}

impl<T: Real> FitConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= T::zero()) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(
                "lambda must be a non-negative number".into(),
            ));
        }
        if self.max_iterations < 1 {
            return Err(Error::InvalidArgument(
                "max_iterations must be at least 1".into(),
            ));
        }
        if !(self.epsilon >= T::zero()) {
            return Err(Error::InvalidArgument(
                "epsilon must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EnergyConverged,
    IterationCap,
}

/// Diagnostics of one outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord<T: Real> {
    pub camera: ProjectionParams<T>,
    /// Whether the fresh camera estimate replaced the previous one.
    pub camera_updated: bool,
    /// `E_def` after the P′-step.
    pub e_def: T,
    pub e_lan: T,
    pub e_error: T,
    /// `E_def` after the w-step; absent for the iteration that exits.
    pub e_def_after_w: Option<T>,
    pub lm_iterations: usize,
    pub lm_termination: Option<Termination>,
}

#[derive(Debug, Clone)]
pub struct FitResult<T: Real> {
    pub mesh: TriangleMesh<T>,
    pub weights: BlendWeights<T>,
    pub proj: ProjectionParams<T>,
    pub iterations: Vec<IterationRecord<T>>,
    pub stop: StopReason,
    pub e_def: T,
    pub e_lan: T,
    pub e_error: T,
    pub anchor: usize,
    /// Excluded from equality and from the result document.
    pub elapsed: Duration,
}

impl<T: Real> PartialEq for FitResult<T> {
    fn eq(&self, o: &Self) -> bool {
        self.mesh.vertices() == o.mesh.vertices()
            && self.weights == o.weights
            && self.proj == o.proj
            && self.iterations == o.iterations
            && self.stop == o.stop
            && self.e_def == o.e_def
            && self.e_lan == o.e_lan
            && self.e_error == o.e_error
            && self.anchor == o.anchor
    }
}

impl<T: Real> FitResult<T> {
    pub fn reprojected(&self, lms: &LandmarkSpec<T>) -> Vec<Vector2<T>> {
        reproject(&self.proj, &self.mesh, lms)
    }

    pub fn to_document(&self, lms: &LandmarkSpec<T>) -> ResultDocument {
        let reproj = self.reprojected(lms);
        ResultDocument {
            schema: RESULT_SCHEMA.into(),
            e_def: self.e_def.as_f64(),
            e_lan: self.e_lan.as_f64(),
            e_error: self.e_error.as_f64(),
            stop: self.stop,
            anchor: self.anchor,
            camera: self.proj.to_document(),
            w_r: self.weights.w_r.iter().map(|x| x.as_f64()).collect(),
            w_s: self.weights.w_s.iter().map(|x| x.as_f64()).collect(),
            targets: lms
                .points
                .iter()
                .map(|p| [p.x.as_f64(), p.y.as_f64()])
                .collect(),
            reprojected: reproj
                .iter()
                .map(|p| [p.x.as_f64(), p.y.as_f64()])
                .collect(),
            residuals: reproj
                .iter()
                .zip(&lms.points)
                .map(|(a, b)| (a - b).norm().as_f64())
                .collect(),
            iterations: self
                .iterations
                .iter()
                .map(|r| IterationDocument {
                    e_def: r.e_def.as_f64(),
                    e_lan: r.e_lan.as_f64(),
                    e_error: r.e_error.as_f64(),
                    e_def_after_w: r.e_def_after_w.map(|x| x.as_f64()),
                    camera_updated: r.camera_updated,
                    lm_iterations: r.lm_iterations,
                })
                .collect(),
        }
    }

    /// CSV with one row per outer iteration.
    pub fn energy_trace_csv(&self) -> String {
        let mut s = String::from("iteration,e_def,e_lan,e_error,e_def_after_w,lm_iterations\n");
        for (k, r) in self.iterations.iter().enumerate() {
            let after = r
                .e_def_after_w
                .map(|x| format!("{:.12e}", x.as_f64()))
                .unwrap_or_default();
            s.push_str(&format!(
                "{},{:.12e},{:.12e},{:.12e},{},{}\n",
                k + 1,
                r.e_def.as_f64(),
                r.e_lan.as_f64(),
                r.e_error.as_f64(),
                after,
                r.lm_iterations
            ));
        }
        s
    }
}

/// Serialized fit outcome shared with the browser client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub schema: String,
    pub e_def: f64,
    pub e_lan: f64,
    pub e_error: f64,
    pub stop: StopReason,
    pub anchor: usize,
    pub camera: CameraDocument,
    pub w_r: Vec<f64>,
    pub w_s: Vec<f64>,
    pub targets: Vec<[f64; 2]>,
    pub reprojected: Vec<[f64; 2]>,
    /// Per-landmark pixel distance between target and reprojection.
    pub residuals: Vec<f64>,
    pub iterations: Vec<IterationDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDocument {
    pub e_def: f64,
    pub e_lan: f64,
    pub e_error: f64,
    pub e_def_after_w: Option<f64>,
    pub camera_updated: bool,
    pub lm_iterations: usize,
}

/// Runs the alternating fit.
///
/// Starts from `w = 0` with the reference as the current mesh. Each iteration estimates
/// the camera on the current mesh (keeping the previous camera if the estimate would
/// raise `E_lan`), solves the P′-step, exits on the energy test or the iteration cap, and
/// otherwise refits `w` to the new mesh.
pub fn fit_caricature<T: Real>(
    basis: &DeformBasis<T>,
    lms: &LandmarkSpec<T>,
    cfg: &FitConfig<T>,
) -> Result<FitResult<T>> {
    let start = Instant::now();
    cfg.validate()?;
    lms.validate_for(&basis.reference)?;
    let anchor = cfg.anchor.resolve(&basis.reference)?;
    let anchor_pos = basis.reference.vertices()[anchor];
    let system = LaplacianSystem::new(&basis.reference, &basis.weights, anchor)?;
    let bbox = bbox_diagonal(&basis.reference);
    let tol = cfg.epsilon * bbox * bbox;
    let lm = LmOptions {
        tie_weights: cfg.tie_weights,
        ..cfg.lm.clone()
    };

    let mut w = BlendWeights::zeros(basis.len());
    let mut current = basis.reference.clone();
    let mut proj: Option<ProjectionParams<T>> = None;
    let mut prev_e_def: Option<T> = None;
    let mut records = Vec::new();
    let stop = loop {
        let estimate = estimate_params(&current, lms)?;
        let (camera, updated) = match proj {
            Some(prev)
                if landmark_loss(&prev, &current, lms)
                    < landmark_loss(&estimate, &current, lms) =>
            {
                (prev, false)
            }
            _ => (estimate, true),
        };
        proj = Some(camera);
        current = system.solve_p_step(basis, &w, &camera, lms, cfg.lambda, anchor_pos)?;
        let e_def = energy_def(basis, &w, &current)?;
        let e_lan = landmark_loss(&camera, &current, lms);
        let mut record = IterationRecord {
            camera,
            camera_updated: updated,
            e_def,
            e_lan,
            e_error: fitting_error_over(e_lan, lms.len()),
            e_def_after_w: None,
            lm_iterations: 0,
            lm_termination: None,
        };
        let converged = prev_e_def.is_some_and(|p| (p - e_def).abs() < tol);
        prev_e_def = Some(e_def);
        if converged || records.len() + 1 >= cfg.max_iterations {
            records.push(record);
            break if converged {
                StopReason::EnergyConverged
            } else {
                StopReason::IterationCap
            };
        }
        let report = optimize_weights(basis, &current, &w, &lm)?;
        if !report.converged() {
            log::warn!("weight step stopped early: {:?}", report.termination);
        }
        record.e_def_after_w = Some(report.final_energy());
        record.lm_iterations = report.state.iteration;
        record.lm_termination = Some(report.termination);
        w = report.state.weights;
        records.push(record);
    };
    let last = records.last().expect("at least one iteration");
    let (e_def, e_lan, e_error) = (last.e_def, last.e_lan, last.e_error);
    current.name = "caricature".into();
    Ok(FitResult {
        mesh: current,
        weights: w,
        proj: proj.expect("camera set in first iteration"),
        iterations: records,
        stop,
        e_def,
        e_lan,
        e_error,
        anchor,
        elapsed: start.elapsed(),
    })
}

const TARGET_COLOR: Rgb<u8> = Rgb([40, 200, 60]);
const MODEL_COLOR: Rgb<u8> = Rgb([230, 40, 40]);
const SEGMENT_COLOR: Rgb<u8> = Rgb([250, 210, 40]);

/// Targets (green), reprojected model landmarks (red) and their offsets (yellow) over `base`.
pub fn draw_overlay<T: Real>(
    base: &RgbImage,
    targets: &[Vector2<T>],
    model: &[Vector2<T>],
) -> RgbImage {
    let mut img = base.clone();
    for (t, m) in targets.iter().zip(model) {
        draw_line(&mut img, to_px(t), to_px(m), SEGMENT_COLOR);
    }
    for t in targets {
        draw_cross(&mut img, to_px(t), TARGET_COLOR);
    }
    for m in model {
        draw_dot(&mut img, to_px(m), MODEL_COLOR);
    }
    img
}

/// Writes the overlay of `result` on the image at `image_path` to `out_path` as PNG.
pub fn render_overlay<T: Real>(
    result: &FitResult<T>,
    lms: &LandmarkSpec<T>,
    image_path: &Path,
    out_path: &Path,
) -> Result<()> {
    let base = image::open(image_path)
        .map_err(|e| Error::Format {
            path: image_path.display().to_string(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let img = draw_overlay(&base, &lms.points, &result.reprojected(lms));
    img.save_with_format(out_path, image::ImageFormat::Png)?;
    Ok(())
}

/// Neutral gray canvas for runs without a caricature image.
pub fn blank_canvas(width: u32, height: u32) -> RgbImage {
    RgbImage::from_pixel(width, height, Rgb([96, 96, 96]))
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

fn to_px<T: Real>(p: &Vector2<T>) -> (i64, i64) {
    (p.x.as_f64().round() as i64, p.y.as_f64().round() as i64)
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Bresenham.
fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), c: Rgb<u8>) {
    let (mut x, mut y) = a;
    let dx = (b.0 - x).abs();
    let dy = -(b.1 - y).abs();
    let sx = if x < b.0 { 1 } else { -1 };
    let sy = if y < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x, y, c);
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn draw_cross(img: &mut RgbImage, p: (i64, i64), c: Rgb<u8>) {
    for d in -3..=3 {
        put(img, p.0 + d, p.1, c);
        put(img, p.0, p.1 + d, c);
    }
}

fn draw_dot(img: &mut RgbImage, p: (i64, i64), c: Rgb<u8>) {
    for dy in -1..=1 {
        for dx in -1..=1 {
            put(img, p.0 + dx, p.1 + dy, c);
        }
    }
}
