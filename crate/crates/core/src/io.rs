//! Polygon text meshes (`v`/`f` records) and landmark documents.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::scalar::Real;

/// Default number of facial landmarks.
pub const LANDMARK_COUNT: usize = 68;

pub const LANDMARK_SCHEMA: &str = "landmarks/v1";

/// Parses a mesh from `v`/`f` text. Other record types are ignored.
pub fn parse_mesh<T: Real>(text: &str, origin: &str) -> Result<TriangleMesh<T>> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let mut c = [0f64; 3];
                for slot in &mut c {
                    let tok = it
                        .next()
                        .ok_or_else(|| parse_err(line_no, "vertex needs 3 coordinates".into()))?;
                    *slot = tok
                        .parse::<f64>()
                        .map_err(|e| parse_err(line_no, format!("bad coordinate '{tok}': {e}")))?;
                    if !slot.is_finite() {
                        return Err(parse_err(line_no, format!("non-finite coordinate '{tok}'")));
                    }
                }
                vertices.push(Vector3::new(T::lit(c[0]), T::lit(c[1]), T::lit(c[2])));
            }
            Some("f") => {
                let toks: Vec<&str> = it.collect();
                if toks.len() != 3 {
                    return Err(Error::NonTriangleFace {
                        path: origin.to_string(),
                        line: line_no,
                        count: toks.len(),
                    });
                }
                let mut f = [0usize; 3];
                for (slot, tok) in f.iter_mut().zip(toks) {
                    let idx = tok.split('/').next().unwrap_or("");
                    let k: i64 = idx
                        .parse()
                        .map_err(|e| parse_err(line_no, format!("bad face index '{tok}': {e}")))?;
                    let resolved = if k > 0 {
                        k - 1
                    } else if k < 0 {
                        vertices.len() as i64 + k
                    } else {
                        -1
                    };
                    if resolved < 0 {
                        return Err(parse_err(
                            line_no,
                            format!("face index '{tok}' out of range"),
                        ));
                    }
                    *slot = resolved as usize;
                }
                faces.push((line_no, f));
            }
            _ => {}
        }
    }
    let n = vertices.len();
    for (line_no, f) in &faces {
        if f.iter().any(|&k| k >= n) {
            return Err(parse_err(
                *line_no,
                format!("face references vertex beyond {n}"),
            ));
        }
        if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
            return Err(parse_err(*line_no, "face repeats a vertex".into()));
        }
    }
    let name = Path::new(origin)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    TriangleMesh::new(vertices, faces.into_iter().map(|(_, f)| f).collect(), name)
}

/// Formats `v`/`f` records with 9 significant digits.
pub fn format_mesh<T: Real>(mesh: &TriangleMesh<T>) -> String {
    let mut s = String::with_capacity(mesh.num_vertices() * 48 + mesh.num_faces() * 24);
    for v in mesh.vertices() {
        let _ = writeln!(
            s,
            "v {:.8e} {:.8e} {:.8e}",
            v.x.as_f64(),
            v.y.as_f64(),
            v.z.as_f64()
        );
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn read_mesh<T: Real>(path: impl AsRef<Path>) -> Result<TriangleMesh<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mesh(&text, &path.display().to_string())
}

pub fn write_mesh<T: Real>(path: impl AsRef<Path>, mesh: &TriangleMesh<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_mesh(mesh)).map_err(|e| Error::io(path, e))
}

pub const MESH_SCHEMA: &str = "mesh/v1";

/// Indexed-triangle mesh for browser viewers: flat `positions` (x, y, z per vertex) and
/// flat `indices` (three per face, counter-clockwise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshDocument {
    pub schema: String,
    pub name: String,
    pub positions: Vec<f64>,
    pub indices: Vec<u32>,
}

impl MeshDocument {
    pub fn from_mesh<T: Real>(mesh: &TriangleMesh<T>) -> Self {
        Self {
            schema: MESH_SCHEMA.into(),
            name: mesh.name.clone(),
            positions: mesh
                .vertices()
                .iter()
                .flat_map(|v| [v.x.as_f64(), v.y.as_f64(), v.z.as_f64()])
                .collect(),
            indices: mesh.faces().iter().flatten().map(|&i| i as u32).collect(),
        }
    }

    pub fn to_mesh<T: Real>(&self) -> Result<TriangleMesh<T>> {
        if self.schema != MESH_SCHEMA {
            return Err(Error::InvalidMesh(format!(
                "unsupported schema '{}'",
                self.schema
            )));
        }
        if !self.positions.len().is_multiple_of(3) || !self.indices.len().is_multiple_of(3) {
            return Err(Error::InvalidMesh(
                "positions and indices must come in triples".into(),
            ));
        }
        let verts = self
            .positions
            .chunks_exact(3)
            .map(|c| Vector3::new(T::lit(c[0]), T::lit(c[1]), T::lit(c[2])))
            .collect();
        let faces = self
            .indices
            .chunks_exact(3)
            .map(|c| [c[0] as usize, c[1] as usize, c[2] as usize])
            .collect();
        TriangleMesh::new(verts, faces, self.name.clone())
    }
}

/// Paired 3D landmark vertex indices and 2D image targets (pixels, origin top-left, y down).
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSpec<T: Real> {
    pub indices: Vec<usize>,
    pub points: Vec<Vector2<T>>,
}

impl<T: Real> LandmarkSpec<T> {
    pub fn new(indices: Vec<usize>, points: Vec<Vector2<T>>) -> Result<Self> {
        let spec = Self { indices, points };
        spec.check_shape()?;
        Ok(spec)
    }

    fn check_shape(&self) -> Result<()> {
        if self.indices.len() != self.points.len() {
            return Err(Error::InvalidLandmarks(format!(
                "{} indices but {} points",
                self.indices.len(),
                self.points.len()
            )));
        }
        let mut sorted = self.indices.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidLandmarks("duplicate landmark index".into()));
        }
        if self
            .points
            .iter()
            .any(|p| !(p.x.is_finite() && p.y.is_finite()))
        {
            return Err(Error::NonFinite("landmark targets"));
        }
        Ok(())
    }

    /// Checks lengths, distinctness and that every index is a vertex of `mesh`.
    pub fn validate_for<U: Real>(&self, mesh: &TriangleMesh<U>) -> Result<()> {
        self.check_shape()?;
        if let Some(&bad) = self.indices.iter().find(|&&i| i >= mesh.num_vertices()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: mesh.num_vertices(),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn with_points(&self, points: Vec<Vector2<T>>) -> Result<Self> {
        Self::new(self.indices.clone(), points)
    }

    pub fn to_document(&self) -> LandmarkDocument {
        LandmarkDocument {
            schema: LANDMARK_SCHEMA.to_string(),
            indices: self.indices.clone(),
            points: self
                .points
                .iter()
                .map(|p| [p.x.as_f64(), p.y.as_f64()])
                .collect(),
        }
    }

    pub fn from_document(doc: &LandmarkDocument) -> Result<Self> {
        doc.validate(None)?;
        Self::new(
            doc.indices.clone(),
            doc.points
                .iter()
                .map(|p| Vector2::new(T::lit(p[0]), T::lit(p[1])))
                .collect(),
        )
    }

    /// Bounding-box diagonal of the 2D targets.
    pub fn points_bbox_diagonal(&self) -> T {
        let Some(first) = self.points.first() else {
            return T::zero();
        };
        let (mut lo, mut hi) = (*first, *first);
        for p in &self.points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (hi - lo).norm()
    }
}

/// On-disk landmark document:
///
/// ```json
/// { "schema": "landmarks/v1", "indices": [int; 68], "points": [[x, y]; 68] }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkDocument {
    #[serde(default = "default_schema")]
    pub schema: String,
    pub indices: Vec<usize>,
    pub points: Vec<[f64; 2]>,
}

fn default_schema() -> String {
    LANDMARK_SCHEMA.to_string()
}

impl LandmarkDocument {
    /// Schema checks. `expected_count` pins the landmark count (68 for face sessions).
    pub fn validate(&self, expected_count: Option<usize>) -> Result<()> {
        if self.schema != LANDMARK_SCHEMA {
            return Err(Error::InvalidLandmarks(format!(
                "unsupported schema '{}'",
                self.schema
            )));
        }
        if let Some(n) = expected_count {
            if self.points.len() != n {
                return Err(Error::InvalidLandmarks(format!(
                    "expected {n} points, got {}",
                    self.points.len()
                )));
            }
            if self.indices.len() != n {
                return Err(Error::InvalidLandmarks(format!(
                    "expected {n} indices, got {}",
                    self.indices.len()
                )));
            }
        }
        if self.indices.len() != self.points.len() {
            return Err(Error::InvalidLandmarks(format!(
                "{} indices but {} points",
                self.indices.len(),
                self.points.len()
            )));
        }
        if self.points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("landmark points"));
        }
        Ok(())
    }
}

pub fn read_landmarks<T: Real>(path: impl AsRef<Path>) -> Result<LandmarkSpec<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: LandmarkDocument = serde_json::from_str(&text)?;
    LandmarkSpec::from_document(&doc)
}

pub fn write_landmarks<T: Real>(path: impl AsRef<Path>, lms: &LandmarkSpec<T>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&lms.to_document())?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads whitespace-separated scalars.
pub fn read_scalars(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|e| Error::Format {
                path: path.display().to_string(),
                message: format!("bad scalar '{t}': {e}"),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_triangle() {
        let m: TriangleMesh<f64> = parse_mesh(
            "# c\nv 0 0 0\nv 1 0 0\nvn 0 0 1\nv 0 1 0\nf 1 2 3\n",
            "t.obj",
        )
        .unwrap();
        assert_eq!(m.num_vertices(), 3);
        assert_eq!(m.num_faces(), 1);
        assert_eq!(m.name, "t");
    }

    #[test]
    fn slash_and_negative_indices() {
        let m: TriangleMesh<f64> =
            parse_mesh("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1/1 -2//2 3\n", "t").unwrap();
        assert_eq!(m.faces(), &[[0, 1, 2]]);
    }

    #[test]
    fn quad_is_rejected_with_line() {
        let err = parse_mesh::<f64>("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n", "q.obj")
            .unwrap_err();
        match err {
            Error::NonTriangleFace { line, count, .. } => {
                assert_eq!(line, 5);
                assert_eq!(count, 4);
            }
            other => panic!("unexpected {other}"),
        }
        assert!(err_line(parse_mesh::<f64>("v 0 0\n", "x")) == Some(1));
        assert!(
            err_line(parse_mesh::<f64>(
                "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n",
                "x"
            )) == Some(4)
        );
    }

    fn err_line(r: Result<TriangleMesh<f64>>) -> Option<usize> {
        match r {
            Err(Error::Parse { line, .. }) => Some(line),
            _ => None,
        }
    }

    #[test]
    fn landmark_document_count_checked() {
        let doc = LandmarkDocument {
            schema: LANDMARK_SCHEMA.into(),
            indices: (0..67).collect(),
            points: vec![[0.0, 0.0]; 67],
        };
        let msg = doc.validate(Some(68)).unwrap_err().to_string();
        assert!(msg.contains("67"), "{msg}");
        assert!(doc.validate(None).is_ok());
    }

    #[test]
    fn mesh_document_round_trip() {
        let m: TriangleMesh<f64> = parse_mesh(
            "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 2 3\nf 1 2 4\n",
            "pair",
        )
        .unwrap();
        let doc = MeshDocument::from_mesh(&m);
        assert_eq!(doc.indices, vec![0, 1, 2, 0, 1, 3]);
        let json = serde_json::to_string(&doc).unwrap();
        let back: MeshDocument = serde_json::from_str(&json).unwrap();
        let m2: TriangleMesh<f64> = back.to_mesh().unwrap();
        assert_eq!(m2.vertices(), m.vertices());
        assert_eq!(m2.faces(), m.faces());
    }
}
