//! Synthetic face collection: a head-like template, parameterized deformation recipes,
//! the mean-shape/selection dataset procedure, and basis construction.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::{align_rigid, extract_rep, BlendWeights, DeformBasis};
use crate::error::{Error, Result};
use crate::io::{LandmarkSpec, LANDMARK_COUNT};
use crate::mesh::{cotangent_weights, TriangleMesh};
use crate::projection::{landmark_loss, ProjectionParams};
use crate::reconstruction::{Anchor, LaplacianSystem};
use crate::rotation::Rotation;
use crate::scalar::Real;

const SEMI_X: f64 = 0.75;
const SEMI_Y: f64 = 1.0;
const SEMI_Z: f64 = 0.85;
const THETA_MAX: f64 = 0.82 * std::f64::consts::PI;

pub const DESK_GRID: (usize, usize) = (40, 50);
/// 1 + 101·114 = 11515 vertices.
pub const FULL_GRID: (usize, usize) = (101, 114);

const HINGE_PIVOT: [f64; 3] = [0.0, -0.15, -0.1];
const HINGE_AXIS: [f64; 3] = [1.0, 0.0, 0.0];

pub const EXPRESSION_COUNT: usize = 23;
pub const IDENTITY_COUNT: usize = 75;

fn smootherstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * x * (x * (6.0 * x - 15.0) + 10.0)
}

/// Point on the undeformed ellipsoid's front half at image-plane position `(x, y)`.
pub fn front_point(x: f64, y: f64) -> [f64; 3] {
    let r = 1.0 - (x / SEMI_X).powi(2) - (y / SEMI_Y).powi(2);
    [x, y, SEMI_Z * r.max(0.0).sqrt()]
}

/// Template surface point (features included) in front of image-plane position `(x, y)`.
pub fn surface_point(x: f64, y: f64) -> [f64; 3] {
    let p = Vector3::from(front_point(x, y));
    feature_recipe().displace(&p, &p).into()
}

/// Smooth [0, 1] vertex weight evaluated on template positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mask {
    /// 1 within `core` of `center`, 0 beyond `core + falloff`.
    Ball {
        center: [f64; 3],
        core: f64,
        falloff: f64,
    },
    /// 1 where `offset − normal·p ≥ band/2`, 0 where it is `≤ −band/2`.
    HalfSpace {
        normal: [f64; 3],
        offset: f64,
        band: f64,
    },
    /// Angular sector about the line through `pivot` along `axis`: the angle is measured
    /// from `zero` in the plane normal to `axis` (positive toward `axis × zero`) and the
    /// weight ramps up across `from ± from_band/2` and down across `to ± to_band/2`.
    Sector {
        pivot: [f64; 3],
        axis: [f64; 3],
        zero: [f64; 3],
        from: f64,
        to: f64,
        from_band: f64,
        to_band: f64,
    },
    Product(Vec<Mask>),
}

impl Mask {
    pub fn value(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Mask::Ball {
                center,
                core,
                falloff,
            } => {
                let d = (p - Vector3::from(*center)).norm();
                if d <= *core {
                    1.0
                } else if *falloff <= 0.0 {
                    0.0
                } else {
                    smootherstep(1.0 - (d - core) / falloff)
                }
            }
            Mask::HalfSpace {
                normal,
                offset,
                band,
            } => {
                let s = offset - Vector3::from(*normal).dot(p);
                if *band <= 0.0 {
                    if s >= 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    smootherstep(s / band + 0.5)
                }
            }
            Mask::Sector {
                pivot,
                axis,
                zero,
                from,
                to,
                from_band,
                to_band,
            } => {
                let a = Vector3::from(*axis).normalize();
                let e0 = Vector3::from(*zero);
                let e0 = (e0 - a * a.dot(&e0)).normalize();
                let e1 = a.cross(&e0);
                let d = p - Vector3::from(*pivot);
                let phi = d.dot(&e1).atan2(d.dot(&e0));
                let ramp = |s: f64, band: f64| {
                    if band <= 0.0 {
                        if s >= 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        smootherstep(s / band + 0.5)
                    }
                };
                ramp(phi - from, *from_band) * ramp(to - phi, *to_band)
            }
            Mask::Product(ms) => ms.iter().map(|m| m.value(p)).product(),
        }
    }
}

/// Parameterized deformation with its ground-truth parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    /// Rotation by `mask·angle` (radians) about the line through `pivot` along `axis`.
    Hinge {
        mask: Mask,
        pivot: [f64; 3],
        axis: [f64; 3],
        angle: f64,
    },
    /// `c + (I + mask·(A − I))(p − c)`, `A` row-major.
    RegionScale {
        mask: Mask,
        center: [f64; 3],
        matrix: [[f64; 3]; 3],
    },
    /// `p + mask·offset`.
    Shift {
        mask: Mask,
        offset: [f64; 3],
    },
    /// `p + amplitude·exp(−‖p − c‖²/2r²)·direction`.
    Bump {
        center: [f64; 3],
        radius: f64,
        amplitude: f64,
        direction: [f64; 3],
    },
    /// Anisotropic scale about the origin.
    GlobalScale {
        factors: [f64; 3],
    },
    Compose(Vec<Recipe>),
}

impl Recipe {
    /// Single-axis region scale `I + (factor − 1) d dᵀ`.
    pub fn scale_along(mask: Mask, center: [f64; 3], direction: [f64; 3], factor: f64) -> Self {
        let d = Vector3::from(direction).normalize();
        let a = Matrix3::identity() + d * d.transpose() * (factor - 1.0);
        Recipe::RegionScale {
            mask,
            center,
            matrix: rows_of(&a),
        }
    }

    fn displace(&self, rest: &Vector3<f64>, p: &Vector3<f64>) -> Vector3<f64> {
        match self {
            Recipe::Hinge {
                mask,
                pivot,
                axis,
                angle,
            } => {
                let m = mask.value(rest);
                if m == 0.0 {
                    return *p;
                }
                let c = Vector3::from(*pivot);
                let r = Rotation::from_axis_angle(&Vector3::from(*axis), m * angle);
                c + r.matrix() * (p - c)
            }
            Recipe::RegionScale {
                mask,
                center,
                matrix,
            } => {
                let m = mask.value(rest);
                let c = Vector3::from(*center);
                let a = Matrix3::from_fn(|r, k| matrix[r][k]);
                let blended = Matrix3::identity() + (a - Matrix3::identity()) * m;
                c + blended * (p - c)
            }
            Recipe::Shift { mask, offset } => p + Vector3::from(*offset) * mask.value(rest),
            Recipe::Bump {
                center,
                radius,
                amplitude,
                direction,
            } => {
                let d2 = (rest - Vector3::from(*center)).norm_squared();
                let g = (-d2 / (2.0 * radius * radius)).exp();
                p + Vector3::from(*direction) * (amplitude * g)
            }
            Recipe::GlobalScale { factors } => p.component_mul(&Vector3::from(*factors)),
            Recipe::Compose(rs) => rs.iter().fold(*p, |q, r| r.displace(rest, &q)),
        }
    }
}

fn rows_of(a: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [
        [a[(0, 0)], a[(0, 1)], a[(0, 2)]],
        [a[(1, 0)], a[(1, 1)], a[(1, 2)]],
        [a[(2, 0)], a[(2, 1)], a[(2, 2)]],
    ]
}

/// Named facial regions on the template.
#[derive(Debug, Clone)]
pub struct Regions {
    pub jaw: Mask,
    pub nose: Mask,
    pub mouth: Mask,
    pub brow: Mask,
    pub forehead: Mask,
    pub chin: Mask,
    pub cheek_left: Mask,
    pub cheek_right: Mask,
    pub eye_left: Mask,
    pub eye_right: Mask,
    /// Pivot and axis of the jaw hinge.
    pub hinge_pivot: [f64; 3],
    pub hinge_axis: [f64; 3],
}

impl Regions {
    fn new() -> Self {
        let ball = |x: f64, y: f64, core: f64, falloff: f64| Mask::Ball {
            center: surface_point(x, y),
            core,
            falloff,
        };
        Self {
            // Depends only on the angle about the hinge axis so that scaling the hinge
            // weights is the same as scaling the hinge angle. The angle wraps behind the
            // crown, and the wide rear band is the side that compresses as the jaw opens.
            jaw: Mask::Sector {
                pivot: HINGE_PIVOT,
                axis: HINGE_AXIS,
                zero: [0.0, -0.6, 0.8],
                from: -0.45,
                to: 1.8,
                from_band: 0.6,
                to_band: 2.6,
            },
            nose: ball(0.0, -0.06, 0.14, 0.14),
            mouth: ball(0.0, -0.42, 0.14, 0.16),
            brow: ball(0.0, 0.32, 0.22, 0.2),
            forehead: ball(0.0, 0.62, 0.2, 0.25),
            chin: ball(0.0, -0.72, 0.1, 0.16),
            cheek_left: ball(0.4, -0.15, 0.08, 0.16),
            cheek_right: ball(-0.4, -0.15, 0.08, 0.16),
            eye_left: ball(0.27, 0.15, 0.06, 0.1),
            eye_right: ball(-0.27, 0.15, 0.06, 0.1),
            hinge_pivot: HINGE_PIVOT,
            hinge_axis: HINGE_AXIS,
        }
    }
}

/// Head-like template: ellipsoid cap with the pole on top, an open neck boundary, and
/// nose, brow, eye-socket, lip and chin features facing `+z`.
#[derive(Debug, Clone)]
pub struct FaceTemplate {
    mesh: TriangleMesh<f64>,
    landmarks: Vec<usize>,
    regions: Regions,
    grid: (usize, usize),
}

impl FaceTemplate {
    /// About 2k vertices.
    pub fn desk() -> Self {
        Self::with_grid(DESK_GRID.0, DESK_GRID.1)
    }

    /// At least 11510 vertices.
    pub fn full_scale() -> Self {
        Self::with_grid(FULL_GRID.0, FULL_GRID.1)
    }

    /// `1 + rows·cols` vertices: the pole and `rows` latitude rings of `cols` vertices.
    pub fn with_grid(rows: usize, cols: usize) -> Self {
        assert!(rows >= 2 && cols >= 3, "grid too small");
        let mut verts = Vec::with_capacity(1 + rows * cols);
        verts.push(Vector3::new(0.0, SEMI_Y, 0.0));
        for k in 1..=rows {
            let theta = THETA_MAX * k as f64 / rows as f64;
            for j in 0..cols {
                let phi = std::f64::consts::TAU * j as f64 / cols as f64;
                verts.push(Vector3::new(
                    SEMI_X * theta.sin() * phi.sin(),
                    SEMI_Y * theta.cos(),
                    SEMI_Z * theta.sin() * phi.cos(),
                ));
            }
        }
        let features = feature_recipe();
        let rest = verts.clone();
        for (v, r) in verts.iter_mut().zip(&rest) {
            *v = features.displace(r, v);
        }
        let at = |k: usize, j: usize| 1 + (k - 1) * cols + j % cols;
        let mut faces = Vec::with_capacity(cols * (2 * rows - 1));
        for j in 0..cols {
            faces.push([0, at(1, j), at(1, j + 1)]);
        }
        for k in 1..rows {
            for j in 0..cols {
                let (a, b, c, d) = (at(k, j), at(k, j + 1), at(k + 1, j), at(k + 1, j + 1));
                faces.push([a, c, d]);
                faces.push([a, d, b]);
            }
        }
        let mesh = TriangleMesh::new(verts, faces, "template").expect("template is a valid mesh");
        let landmarks = assign_landmarks(&mesh);
        Self {
            mesh,
            landmarks,
            regions: Regions::new(),
            grid: (rows, cols),
        }
    }

    pub fn mesh(&self) -> &TriangleMesh<f64> {
        &self.mesh
    }

    pub fn mesh_as<T: Real>(&self) -> TriangleMesh<T> {
        self.mesh.cast()
    }

    /// The 68 landmark vertex indices in the usual face-annotation order
    /// (jaw 17, brows 10, nose 9, eyes 12, mouth 20).
    pub fn landmarks(&self) -> &[usize] {
        &self.landmarks
    }

    pub fn regions(&self) -> &Regions {
        &self.regions
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    /// Index of the vertex nearest the nose tip; a convenient anchor.
    pub fn nose_tip(&self) -> usize {
        self.landmarks[30]
    }

    pub fn apply(
        &self,
        mesh: &TriangleMesh<f64>,
        recipe: &Recipe,
        name: impl Into<String>,
    ) -> Result<TriangleMesh<f64>> {
        apply_recipe(self, mesh, recipe, name)
    }
}

fn feature_recipe() -> Recipe {
    let z = [0.0, 0.0, 1.0];
    let bump = |x: f64, y: f64, radius: f64, amplitude: f64| Recipe::Bump {
        center: front_point(x, y),
        radius,
        amplitude,
        direction: z,
    };
    Recipe::Compose(vec![
        bump(0.0, -0.08, 0.09, 0.2),
        bump(0.0, 0.08, 0.06, 0.05),
        bump(0.0, 0.32, 0.16, 0.04),
        bump(0.27, 0.15, 0.08, -0.05),
        bump(-0.27, 0.15, 0.08, -0.05),
        bump(0.0, -0.42, 0.08, 0.035),
        bump(0.0, -0.72, 0.1, 0.04),
    ])
}

/// Canonical front-view 2D landmark layout in template units.
pub fn canonical_landmark_layout() -> Vec<[f64; 2]> {
    use std::f64::consts::PI;
    let mut pts = Vec::with_capacity(LANDMARK_COUNT);
    for k in 0..17 {
        let u = -PI / 2.0 + PI * k as f64 / 16.0;
        pts.push([0.6 * u.sin(), 0.15 - 0.93 * u.cos()]);
    }
    for side in [-1.0, 1.0] {
        for k in 0..5 {
            let t = k as f64 / 4.0;
            let x = if side < 0.0 {
                -0.45 + 0.33 * t
            } else {
                0.12 + 0.33 * t
            };
            let arch = 0.04 * (1.0 - (2.0 * t - 1.0).powi(2));
            pts.push([x, 0.32 + arch]);
        }
    }
    for k in 0..4 {
        pts.push([0.0, 0.2 - 0.08 * k as f64]);
    }
    for k in 0..5 {
        let x = -0.12 + 0.06 * k as f64;
        pts.push([x, -0.15 - 0.02 * (1.0 - (x / 0.12).abs())]);
    }
    for cx in [-0.27, 0.27] {
        for k in 0..6 {
            let a = PI + 2.0 * PI * k as f64 / 6.0;
            pts.push([cx + 0.1 * a.cos(), 0.15 + 0.04 * a.sin()]);
        }
    }
    for k in 0..12 {
        let a = PI + 2.0 * PI * k as f64 / 12.0;
        pts.push([0.22 * a.cos(), -0.42 - 0.08 * a.sin()]);
    }
    for k in 0..8 {
        let a = PI + 2.0 * PI * k as f64 / 8.0;
        pts.push([0.13 * a.cos(), -0.42 - 0.025 * a.sin()]);
    }
    pts
}

/// Nearest distinct front-facing template vertex for every canonical landmark. Coarse
/// grids fall back to any free vertex and may carry fewer than 68 landmarks.
fn assign_landmarks(mesh: &TriangleMesh<f64>) -> Vec<usize> {
    let n = mesh.num_vertices();
    let mut used = vec![false; n];
    canonical_landmark_layout()
        .iter()
        .take(n)
        .map(|q| {
            let dist = |i: usize| {
                let v = mesh.vertices()[i];
                let front = if v.z > 0.25 { 0.0 } else { 1e3 };
                (v.x - q[0]).powi(2) + (v.y - q[1]).powi(2) + front
            };
            let i = (0..n)
                .filter(|&i| !used[i])
                .min_by(|&a, &b| {
                    dist(a)
                        .partial_cmp(&dist(b))
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .expect("a free vertex remains");
            used[i] = true;
            i
        })
        .collect()
}

/// Applies `recipe` to `mesh`; masks are evaluated at the template's rest positions.
pub fn apply_recipe(
    template: &FaceTemplate,
    mesh: &TriangleMesh<f64>,
    recipe: &Recipe,
    name: impl Into<String>,
) -> Result<TriangleMesh<f64>> {
    template.mesh.ensure_same_topology(mesh)?;
    let verts: Vec<Vector3<f64>> = template
        .mesh
        .vertices()
        .par_iter()
        .zip(mesh.vertices().par_iter())
        .map(|(rest, p)| recipe.displace(rest, p))
        .collect();
    mesh.with_vertices(verts, name)
}

/// How one entry of a synthetic collection is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecipeSpec {
    Fixed(Recipe),
    RandomExpression,
    RandomIdentity,
}

/// A generated mesh and the exact recipe that produced it.
#[derive(Debug, Clone)]
pub struct SynthExample {
    pub mesh: TriangleMesh<f64>,
    pub recipe: Recipe,
}

/// Deterministic collection on `template`: random specs draw their parameters from `seed`.
pub fn synth_collection(
    template: &FaceTemplate,
    seed: u64,
    specs: &[RecipeSpec],
) -> Result<Vec<SynthExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let recipes: Vec<Recipe> = specs
        .iter()
        .enumerate()
        .map(|(k, s)| match s {
            RecipeSpec::Fixed(r) => r.clone(),
            RecipeSpec::RandomExpression => random_expression(template, &mut rng, k),
            RecipeSpec::RandomIdentity => random_identity(template, &mut rng),
        })
        .collect();
    recipes
        .into_iter()
        .enumerate()
        .map(|(k, recipe)| {
            let mesh = apply_recipe(template, template.mesh(), &recipe, format!("synth_{k:03}"))?;
            Ok(SynthExample { mesh, recipe })
        })
        .collect()
}

/// Jaw opening by `degrees` about the template's hinge axis.
pub fn jaw_hinge(template: &FaceTemplate, degrees: f64) -> Recipe {
    let r = template.regions();
    Recipe::Hinge {
        mask: r.jaw.clone(),
        pivot: r.hinge_pivot,
        axis: r.hinge_axis,
        angle: degrees.to_radians(),
    }
}

/// Number of distinct expression families drawn by [`random_expression`].
pub const EXPRESSION_FAMILIES: usize = 10;

/// Expression recipe from family `k mod 10` with random magnitudes.
pub fn random_expression(template: &FaceTemplate, rng: &mut impl Rng, k: usize) -> Recipe {
    let r = template.regions();
    let mouth_c = surface_point(0.0, -0.42);
    let family = k % EXPRESSION_FAMILIES;
    let mut parts = Vec::new();
    match family {
        0 => parts.push(jaw_hinge(template, rng.random_range(8.0..25.0))),
        1 => {
            let lift = rng.random_range(0.02..0.06);
            for (cx, m) in [(0.2, 1.0), (-0.2, -1.0)] {
                parts.push(Recipe::Shift {
                    mask: Mask::Ball {
                        center: surface_point(cx, -0.42),
                        core: 0.04,
                        falloff: 0.14,
                    },
                    offset: [m * lift * 0.6, lift, 0.0],
                });
            }
        }
        2 => parts.push(Recipe::scale_along(
            r.mouth.clone(),
            mouth_c,
            [1.0, 0.0, 0.0],
            rng.random_range(1.15..1.4),
        )),
        3 => {
            parts.push(Recipe::scale_along(
                r.mouth.clone(),
                mouth_c,
                [1.0, 0.0, 0.0],
                rng.random_range(0.7..0.85),
            ));
            parts.push(Recipe::Shift {
                mask: r.mouth.clone(),
                offset: [0.0, 0.0, rng.random_range(0.02..0.05)],
            });
        }
        4 => parts.push(Recipe::Shift {
            mask: r.brow.clone(),
            offset: [0.0, rng.random_range(0.03..0.07), 0.0],
        }),
        5 => {
            parts.push(Recipe::Shift {
                mask: r.brow.clone(),
                offset: [0.0, -rng.random_range(0.02..0.04), 0.01],
            });
            parts.push(Recipe::scale_along(
                r.brow.clone(),
                surface_point(0.0, 0.32),
                [1.0, 0.0, 0.0],
                rng.random_range(0.85..0.95),
            ));
        }
        6 => {
            let f = rng.random_range(0.5..0.8);
            parts.push(Recipe::scale_along(
                r.eye_left.clone(),
                surface_point(0.27, 0.15),
                [0.0, 1.0, 0.0],
                f,
            ));
            parts.push(Recipe::scale_along(
                r.eye_right.clone(),
                surface_point(-0.27, 0.15),
                [0.0, 1.0, 0.0],
                f,
            ));
        }
        7 => {
            let a = rng.random_range(0.03..0.07);
            for x in [0.4, -0.4] {
                parts.push(Recipe::Bump {
                    center: surface_point(x, -0.2),
                    radius: 0.12,
                    amplitude: a,
                    direction: [x.signum() * 0.5, 0.0, 0.85],
                });
            }
        }
        8 => parts.push(Recipe::scale_along(
            r.nose.clone(),
            surface_point(0.0, -0.05),
            [0.0, 1.0, 0.0],
            rng.random_range(0.8..0.92),
        )),
        _ => {
            parts.push(jaw_hinge(template, rng.random_range(5.0..15.0)));
            parts.push(Recipe::scale_along(
                r.mouth.clone(),
                mouth_c,
                [1.0, 0.0, 0.0],
                rng.random_range(0.8..1.2),
            ));
        }
    }
    Recipe::Compose(parts)
}

/// Identity recipe: proportions, nose, jaw width, and feature bumps.
pub fn random_identity(template: &FaceTemplate, rng: &mut impl Rng) -> Recipe {
    let r = template.regions();
    let nose_c = surface_point(0.0, -0.05);
    let nose = Matrix3::from_diagonal(&Vector3::new(
        rng.random_range(0.8..1.3),
        rng.random_range(0.85..1.2),
        rng.random_range(0.75..1.5),
    ));
    let jaw_c = surface_point(0.0, -0.55);
    let z = [0.0, 0.0, 1.0];
    Recipe::Compose(vec![
        Recipe::GlobalScale {
            factors: [
                rng.random_range(0.9..1.1),
                rng.random_range(0.92..1.08),
                rng.random_range(0.9..1.1),
            ],
        },
        Recipe::RegionScale {
            mask: r.nose.clone(),
            center: nose_c,
            matrix: rows_of(&nose),
        },
        Recipe::scale_along(
            r.jaw.clone(),
            jaw_c,
            [1.0, 0.0, 0.0],
            rng.random_range(0.85..1.2),
        ),
        Recipe::Bump {
            center: surface_point(0.0, -0.72),
            radius: 0.1,
            amplitude: rng.random_range(-0.03..0.05),
            direction: z,
        },
        Recipe::Bump {
            center: surface_point(0.0, 0.6),
            radius: 0.2,
            amplitude: rng.random_range(-0.03..0.04),
            direction: z,
        },
        Recipe::Bump {
            center: surface_point(0.0, 0.32),
            radius: 0.14,
            amplitude: rng.random_range(-0.015..0.03),
            direction: z,
        },
        Recipe::Bump {
            center: surface_point(0.38, -0.1),
            radius: 0.14,
            amplitude: rng.random_range(-0.03..0.03),
            direction: [0.4, 0.0, 0.9],
        },
        Recipe::Bump {
            center: surface_point(-0.38, -0.1),
            radius: 0.14,
            amplitude: rng.random_range(-0.03..0.03),
            direction: [-0.4, 0.0, 0.9],
        },
    ])
}

/// Per-vertex arithmetic mean of positions.
pub fn mean_shape<T: Real>(meshes: &[TriangleMesh<T>]) -> Result<TriangleMesh<T>> {
    let first = meshes
        .first()
        .ok_or_else(|| Error::InvalidArgument("mean of an empty collection".into()))?;
    for m in &meshes[1..] {
        first.ensure_same_topology(m)?;
    }
    let n = T::from_count(meshes.len());
    let verts = (0..first.num_vertices())
        .map(|i| {
            meshes
                .iter()
                .fold(Vector3::zeros(), |a, m| a + m.vertices()[i])
                / n
        })
        .collect();
    first.with_vertices(verts, "mean")
}

/// Root-mean-square vertex distance.
pub fn rms_distance<T: Real>(a: &TriangleMesh<T>, b: &TriangleMesh<T>) -> T {
    let s = a
        .vertices()
        .iter()
        .zip(b.vertices())
        .map(|(p, q)| (p - q).norm_squared())
        .fold(T::zero(), |x, y| x + y);
    (s / T::from_count(a.num_vertices().max(1))).sqrt()
}

/// Greedy farthest-point selection of `k` meshes: each pick maximizes its minimum RMS
/// distance to the reference and the meshes already picked. Ties go to the lower index.
pub fn select_diverse<T: Real>(
    meshes: &[TriangleMesh<T>],
    reference: &TriangleMesh<T>,
    k: usize,
) -> Result<Vec<usize>> {
    if k > meshes.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {k} of {} meshes",
            meshes.len()
        )));
    }
    for m in meshes {
        reference.ensure_same_topology(m)?;
    }
    let mut nearest: Vec<T> = meshes
        .par_iter()
        .map(|m| rms_distance(m, reference))
        .collect();
    let mut picked = Vec::with_capacity(k);
    let mut taken = vec![false; meshes.len()];
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, d) in nearest.iter().enumerate() {
            if !taken[i] && best.is_none_or(|b| *d > nearest[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("k ≤ len");
        taken[b] = true;
        picked.push(b);
        let chosen = &meshes[b];
        let updated: Vec<T> = meshes.par_iter().map(|m| rms_distance(m, chosen)).collect();
        for (n, u) in nearest.iter_mut().zip(updated) {
            *n = n.min(u);
        }
    }
    Ok(picked)
}

/// Rigidly aligns every mesh to `reference` over all vertices and extracts its representation.
pub fn build_basis<T: Real>(
    reference: &TriangleMesh<T>,
    deformed: &[TriangleMesh<T>],
) -> Result<DeformBasis<T>> {
    let weights = cotangent_weights(reference)?;
    let all: Vec<usize> = (0..reference.num_vertices()).collect();
    let reps = deformed
        .par_iter()
        .map(|m| {
            let aligned = align_rigid(reference, m, &all)?;
            extract_rep(reference, &aligned.mesh, &weights)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = deformed.iter().map(|m| m.name.clone()).collect();
    DeformBasis::new(reference.clone(), weights, reps, labels)
}

/// The 98-model stand-in: expression means and identities selected for diversity
/// against the mean neutral face, which is also the reference.
#[derive(Debug, Clone)]
pub struct FaceDataset {
    pub reference: TriangleMesh<f64>,
    pub expressions: Vec<SynthExample>,
    pub identities: Vec<SynthExample>,
}

impl FaceDataset {
    pub fn examples(&self) -> Vec<TriangleMesh<f64>> {
        self.expressions
            .iter()
            .chain(&self.identities)
            .map(|e| e.mesh.clone())
            .collect()
    }

    pub fn recipes(&self) -> Vec<Recipe> {
        self.expressions
            .iter()
            .chain(&self.identities)
            .map(|e| e.recipe.clone())
            .collect()
    }

    pub fn basis<T: Real>(&self) -> Result<DeformBasis<T>> {
        let reference = self.reference.cast::<T>();
        let ex: Vec<TriangleMesh<T>> = self.examples().iter().map(|m| m.cast()).collect();
        build_basis(&reference, &ex)
    }
}

/// Dataset sizes for [`face_dataset_with`].
#[derive(Debug, Clone, Copy)]
pub struct DatasetShape {
    pub identity_candidates: usize,
    pub expression_candidates: usize,
    /// Identities each expression is averaged over.
    pub expression_subjects: usize,
    pub expressions: usize,
    pub identities: usize,
}

impl Default for DatasetShape {
    fn default() -> Self {
        Self {
            identity_candidates: 100,
            expression_candidates: 30,
            expression_subjects: 6,
            expressions: EXPRESSION_COUNT,
            identities: IDENTITY_COUNT,
        }
    }
}

/// 23 expression means plus 75 identities.
pub fn face_dataset(template: &FaceTemplate, seed: u64) -> Result<FaceDataset> {
    face_dataset_with(template, seed, DatasetShape::default())
}

pub fn face_dataset_with(
    template: &FaceTemplate,
    seed: u64,
    shape: DatasetShape,
) -> Result<FaceDataset> {
    if shape.expression_subjects > shape.identity_candidates || shape.expression_subjects == 0 {
        return Err(Error::InvalidArgument(
            "expression subjects must be drawn from the identity candidates".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id_recipes: Vec<Recipe> = (0..shape.identity_candidates)
        .map(|_| random_identity(template, &mut rng))
        .collect();
    let ex_recipes: Vec<Recipe> = (0..shape.expression_candidates)
        .map(|k| random_expression(template, &mut rng, k))
        .collect();
    let ids: Vec<TriangleMesh<f64>> = id_recipes
        .par_iter()
        .enumerate()
        .map(|(k, r)| apply_recipe(template, template.mesh(), r, format!("identity_{k:03}")))
        .collect::<Result<_>>()?;
    let mut reference = mean_shape(&ids)?;
    reference.name = "mean_neutral".into();
    let ex_means: Vec<TriangleMesh<f64>> = ex_recipes
        .par_iter()
        .enumerate()
        .map(|(k, r)| {
            let posed: Vec<TriangleMesh<f64>> = ids[..shape.expression_subjects]
                .iter()
                .map(|m| apply_recipe(template, m, r, "posed"))
                .collect::<Result<_>>()?;
            let mut mean = mean_shape(&posed)?;
            mean.name = format!("expression_{k:03}");
            Ok(mean)
        })
        .collect::<Result<_>>()?;
    let pick_ex = select_diverse(&ex_means, &reference, shape.expressions)?;
    let pick_id = select_diverse(&ids, &reference, shape.identities)?;
    let expressions = pick_ex
        .into_iter()
        .map(|k| SynthExample {
            mesh: ex_means[k].clone(),
            recipe: ex_recipes[k].clone(),
        })
        .collect();
    let identities = pick_id
        .into_iter()
        .map(|k| SynthExample {
            mesh: ids[k].clone(),
            recipe: id_recipes[k].clone(),
        })
        .collect();
    Ok(FaceDataset {
        reference,
        expressions,
        identities,
    })
}

/// Camera looking at the template's face in a y-down image of roughly 512 px.
pub fn front_camera<T: Real>(
    scale: f64,
    pitch_offset: f64,
    yaw: f64,
    roll: f64,
) -> ProjectionParams<T> {
    ProjectionParams {
        scale: T::lit(scale),
        pitch: T::lit(std::f64::consts::PI + pitch_offset),
        yaw: T::lit(yaw),
        roll: T::lit(roll),
        translation: Vector2::new(T::lit(256.0), T::lit(256.0)),
    }
}

/// Exact projections of `mesh`'s landmark vertices.
pub fn project_landmarks<T: Real>(
    mesh: &TriangleMesh<T>,
    indices: &[usize],
    camera: &ProjectionParams<T>,
) -> Result<LandmarkSpec<T>> {
    let pts = indices
        .iter()
        .map(|&i| camera.project(&mesh.vertices()[i]))
        .collect();
    let lms = LandmarkSpec::new(indices.to_vec(), pts)?;
    lms.validate_for(mesh)?;
    Ok(lms)
}

/// A 2D landmark target with the ground truth that generated it.
#[derive(Debug, Clone)]
pub struct CaricatureTask<T: Real> {
    pub name: String,
    pub landmarks: LandmarkSpec<T>,
    pub camera: ProjectionParams<T>,
    pub target: TriangleMesh<T>,
    pub weights: BlendWeights<T>,
}

impl<T: Real> CaricatureTask<T> {
    /// Landmark loss of the ground-truth mesh under the ground-truth camera (zero).
    pub fn oracle_loss(&self) -> T {
        landmark_loss(&self.camera, &self.target, &self.landmarks)
    }
}

/// Exaggerated targets: a few examples blended with weights in [1.5, 2.5] (outside the
/// example hull), reconstructed, and projected under a perturbed frontal camera.
pub fn caricature_tasks<T: Real>(
    basis: &DeformBasis<T>,
    landmark_indices: &[usize],
    anchor: usize,
    seed: u64,
    count: usize,
) -> Result<Vec<CaricatureTask<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let system = LaplacianSystem::new(&basis.reference, &basis.weights, anchor)?;
    let anchor_pos = Anchor::at_vertex(&basis.reference, anchor).position;
    let n = basis.len();
    let mut tasks = Vec::with_capacity(count);
    for t in 0..count {
        let mut w = BlendWeights::zeros(n);
        let active = 3.min(n);
        let mut chosen = Vec::new();
        while chosen.len() < active {
            let l = rng.random_range(0..n);
            if !chosen.contains(&l) {
                chosen.push(l);
            }
        }
        for &l in &chosen {
            let v = T::lit(rng.random_range(1.5..2.5));
            w.w_r[l] = v;
            w.w_s[l] = v;
        }
        let target = system.reconstruct(basis, &w, anchor_pos)?;
        let camera = front_camera(
            rng.random_range(180.0..220.0),
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.05..0.05),
        );
        let landmarks = project_landmarks(&target, landmark_indices, &camera)?;
        tasks.push(CaricatureTask {
            name: format!("task_{t:02}"),
            landmarks,
            camera,
            target,
            weights: w,
        });
    }
    Ok(tasks)
}
