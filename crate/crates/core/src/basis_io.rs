//! Little-endian binary basis documents (`.drb`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "DRB\0"
//! version    u32      1
//! vertices   u64
//! examples   u64
//! reference  u32 length + UTF-8 path (relative paths resolve against the basis file)
//! labels     examples × (u32 length + UTF-8)
//! records    examples × vertices × 9 f64:
//!            dual vector of log R (x, y, z), then S′ upper triangle (xx, xy, xz, yy, yz, zz)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};

use crate::deform::{DeformBasis, DeformRep, VertexDeform};
use crate::error::{Error, Result};
use crate::io::read_mesh;
use crate::mesh::{cotangent_weights, TriangleMesh};
use crate::rotation::SkewLog;
use crate::scalar::Real;

pub const BASIS_MAGIC: &[u8; 4] = b"DRB\0";
pub const BASIS_VERSION: u32 = 1;

/// Decoded basis document before the reference mesh is attached.
#[derive(Debug, Clone)]
pub struct BasisDocument<T: Real> {
    pub reference_path: String,
    pub labels: Vec<String>,
    pub reps: Vec<DeformRep<T>>,
}

pub fn encode_basis<T: Real>(basis: &DeformBasis<T>, reference_path: &str) -> Vec<u8> {
    let nv = basis.num_vertices();
    let mut out = Vec::with_capacity(32 + basis.len() * nv * 72);
    out.extend_from_slice(BASIS_MAGIC);
    out.extend_from_slice(&BASIS_VERSION.to_le_bytes());
    out.extend_from_slice(&(nv as u64).to_le_bytes());
    out.extend_from_slice(&(basis.len() as u64).to_le_bytes());
    put_str(&mut out, reference_path);
    for l in &basis.labels {
        put_str(&mut out, l);
    }
    for rep in &basis.reps {
        for d in &rep.0 {
            let v = d.log_r.vector();
            let s = &d.s_prime;
            for x in [
                v.x,
                v.y,
                v.z,
                s[(0, 0)],
                s[(0, 1)],
                s[(0, 2)],
                s[(1, 1)],
                s[(1, 2)],
                s[(2, 2)],
            ] {
                out.extend_from_slice(&x.as_f64().to_le_bytes());
            }
        }
    }
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                path: self.origin.to_string(),
                message: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| Error::Format {
            path: self.origin.to_string(),
            message: format!("invalid UTF-8: {e}"),
        })
    }
}

pub fn decode_basis<T: Real>(buf: &[u8], origin: &str) -> Result<BasisDocument<T>> {
    let mut r = Reader {
        buf,
        pos: 0,
        origin,
    };
    let fail = |message: String| Error::Format {
        path: origin.to_string(),
        message,
    };
    if r.take(4)? != BASIS_MAGIC {
        return Err(fail("not a basis document (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != BASIS_VERSION {
        return Err(fail(format!("unsupported basis version {version}")));
    }
    let nv = r.u64()? as usize;
    let ne = r.u64()? as usize;
    let expected = nv
        .checked_mul(ne)
        .and_then(|k| k.checked_mul(72))
        .ok_or_else(|| fail("header sizes overflow".into()))?;
    let reference_path = r.string()?;
    let labels = (0..ne).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    if buf.len() - r.pos != expected {
        return Err(fail(format!(
            "expected {expected} record bytes, found {}",
            buf.len() - r.pos
        )));
    }
    let mut reps = Vec::with_capacity(ne);
    for _ in 0..ne {
        let mut recs = Vec::with_capacity(nv);
        for _ in 0..nv {
            let mut x = [T::zero(); 9];
            for slot in &mut x {
                *slot = T::lit(r.f64()?);
            }
            let s = Matrix3::new(x[3], x[4], x[5], x[4], x[6], x[7], x[5], x[7], x[8]);
            recs.push(VertexDeform {
                log_r: SkewLog::from_vector(Vector3::new(x[0], x[1], x[2])),
                s_prime: s,
            });
        }
        reps.push(DeformRep(recs));
    }
    Ok(BasisDocument {
        reference_path,
        labels,
        reps,
    })
}

/// Writes `basis` to `path`; `reference_path` is stored verbatim.
pub fn save_basis<T: Real>(
    path: impl AsRef<Path>,
    basis: &DeformBasis<T>,
    reference_path: &str,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_basis(basis, reference_path)).map_err(|e| Error::io(path, e))
}

/// Reads a basis document and its reference mesh, recomputing the edge weights.
pub fn load_basis<T: Real>(path: impl AsRef<Path>) -> Result<DeformBasis<T>> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let doc: BasisDocument<T> = decode_basis(&buf, &path.display().to_string())?;
    let reference = read_mesh(resolve_reference(path, &doc.reference_path))?;
    attach_reference(doc, reference)
}

pub fn resolve_reference(basis_path: &Path, reference: &str) -> PathBuf {
    let r = Path::new(reference);
    if r.is_absolute() {
        r.to_path_buf()
    } else {
        basis_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(r)
    }
}

pub fn attach_reference<T: Real>(
    doc: BasisDocument<T>,
    reference: TriangleMesh<T>,
) -> Result<DeformBasis<T>> {
    let weights = cotangent_weights(&reference)?;
    DeformBasis::new(reference, weights, doc.reps, doc.labels)
}
