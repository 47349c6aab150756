//! File formats: the LRMX dense-matrix binary format, exp-polynomial JSON,
//! and the JSON manifests for cascade models and segment-tree bundles.
//!
//! LRMX: magic bytes `LRMX`, version u16 = 1, u32 rows, u32 cols (all
//! little-endian), then `rows * cols` f64 values row-major. Writing is
//! bit-deterministic, so identical inputs produce byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cascade::{Activation, CascadeModel};
use crate::error::{CoreError, Result};
use crate::matfun::ExpPolyMatrix;
use crate::segtree_tensor::FactorTriple;

const LRMX_MAGIC: &[u8; 4] = b"LRMX";
const LRMX_VERSION: u16 = 1;

/// Writes a dense matrix in LRMX format.
pub fn write_lrmx<W: Write>(w: &mut W, m: &DMatrix<f64>) -> Result<()> {
    w.write_all(LRMX_MAGIC)?;
    w.write_all(&LRMX_VERSION.to_le_bytes())?;
    w.write_all(&(m.nrows() as u32).to_le_bytes())?;
    w.write_all(&(m.ncols() as u32).to_le_bytes())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a dense matrix in LRMX format.
pub fn read_lrmx<R: Read>(r: &mut R) -> Result<DMatrix<f64>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != LRMX_MAGIC {
        return Err(CoreError::Format(format!(
            "bad magic {:?}, expected \"LRMX\"",
            magic
        )));
    }
    let mut buf2 = [0u8; 2];
    r.read_exact(&mut buf2)?;
    let version = u16::from_le_bytes(buf2);
    if version != LRMX_VERSION {
        return Err(CoreError::Format(format!(
            "unsupported LRMX version {version}"
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let rows = u32::from_le_bytes(buf4) as usize;
    r.read_exact(&mut buf4)?;
    let cols = u32::from_le_bytes(buf4) as usize;
    let mut values = vec![0.0f64; rows * cols];
    let mut buf8 = [0u8; 8];
    for v in values.iter_mut() {
        r.read_exact(&mut buf8)?;
        *v = f64::from_le_bytes(buf8);
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn write_lrmx_file<P: AsRef<Path>>(path: P, m: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_lrmx(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn read_lrmx_file<P: AsRef<Path>>(path: P) -> Result<DMatrix<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    read_lrmx(&mut r)
}

/// LRMX bytes encoded as base64, for embedding matrices in JSON.
pub fn lrmx_base64(m: &DMatrix<f64>) -> String {
    let mut bytes = Vec::new();
    write_lrmx(&mut bytes, m).expect("vec write cannot fail");
    BASE64.encode(bytes)
}

pub fn lrmx_from_base64(s: &str) -> Result<DMatrix<f64>> {
    let bytes = BASE64
        .decode(s)
        .map_err(|e| CoreError::Format(format!("base64: {e}")))?;
    read_lrmx(&mut bytes.as_slice())
}

/// JSON form of an exp-polynomial matrix: LRMX-base64 payloads, `exp` null
/// when the exponential part is zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpPolyMatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub exp: Option<String>,
    pub poly: Vec<String>,
}

pub fn exp_poly_to_json(f: &ExpPolyMatrix) -> ExpPolyMatrixJson {
    ExpPolyMatrixJson {
        rows: f.rows(),
        cols: f.cols(),
        exp: f.has_exp_part().then(|| lrmx_base64(f.exp_coeff())),
        poly: f.poly_coeffs().iter().map(lrmx_base64).collect(),
    }
}

pub fn exp_poly_from_json(j: &ExpPolyMatrixJson) -> Result<ExpPolyMatrix> {
    let exp = j.exp.as_deref().map(lrmx_from_base64).transpose()?;
    let poly = j
        .poly
        .iter()
        .map(|s| lrmx_from_base64(s))
        .collect::<Result<Vec<_>>>()?;
    if exp.is_none() && poly.is_empty() {
        return Ok(ExpPolyMatrix::zero(j.rows, j.cols));
    }
    let f = ExpPolyMatrix::from_parts(exp, poly)?;
    if f.rows() != j.rows || f.cols() != j.cols {
        return Err(CoreError::Format(format!(
            "declared shape {}x{} does not match payload {}x{}",
            j.rows,
            j.cols,
            f.rows(),
            f.cols()
        )));
    }
    Ok(f)
}

pub fn write_exp_poly_file<P: AsRef<Path>>(path: P, f: &ExpPolyMatrix) -> Result<()> {
    let json = serde_json::to_string_pretty(&exp_poly_to_json(f))
        .map_err(|e| CoreError::Format(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_exp_poly_file<P: AsRef<Path>>(path: P) -> Result<ExpPolyMatrix> {
    let text = std::fs::read_to_string(path)?;
    let j: ExpPolyMatrixJson =
        serde_json::from_str(&text).map_err(|e| CoreError::Format(e.to_string()))?;
    exp_poly_from_json(&j)
}

/// One adapter entry in a manifest: paths to the LRMX factor files, relative
/// to the manifest location.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterPaths {
    pub a: String,
    pub b: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<String>,
}

/// Manifest of a cascade model: the base weight, the ordered adapters, and
/// the activation name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelManifest {
    pub activation: String,
    pub w: String,
    pub adapters: Vec<AdapterPaths>,
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    base.parent().unwrap_or(Path::new(".")).join(rel)
}

/// Writes `W`, every adapter factor, and a `<stem>.json` manifest into `dir`.
/// Returns the manifest path.
pub fn save_cascade_model<P: AsRef<Path>>(
    model: &CascadeModel,
    dir: P,
    stem: &str,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let w_name = format!("{stem}_w.lrmx");
    write_lrmx_file(dir.join(&w_name), model.w())?;
    let mut adapters = Vec::new();
    for (i, (a, b)) in model.adapters().iter().enumerate() {
        let a_name = format!("{stem}_a{}.lrmx", i + 1);
        let b_name = format!("{stem}_b{}.lrmx", i + 1);
        write_lrmx_file(dir.join(&a_name), a)?;
        write_lrmx_file(dir.join(&b_name), b)?;
        adapters.push(AdapterPaths {
            a: a_name,
            b: b_name,
            c: None,
        });
    }
    let manifest = ModelManifest {
        activation: model.activation().name().to_string(),
        w: w_name,
        adapters,
    };
    let path = dir.join(format!("{stem}.json"));
    let json =
        serde_json::to_string_pretty(&manifest).map_err(|e| CoreError::Format(e.to_string()))?;
    std::fs::write(&path, json)?;
    Ok(path)
}

/// Loads a cascade model from its manifest; factor paths resolve relative to
/// the manifest.
pub fn load_cascade_model<P: AsRef<Path>>(manifest_path: P) -> Result<CascadeModel> {
    let path = manifest_path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let manifest: ModelManifest =
        serde_json::from_str(&text).map_err(|e| CoreError::Format(e.to_string()))?;
    let w = read_lrmx_file(resolve(path, &manifest.w))?;
    let adapters = manifest
        .adapters
        .iter()
        .map(|entry| {
            Ok((
                read_lrmx_file(resolve(path, &entry.a))?,
                read_lrmx_file(resolve(path, &entry.b))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    CascadeModel::new(w, adapters, Activation::from_name(&manifest.activation)?)
}

/// Manifest of a segment-tree adapter bundle (pairs) or tensor factor bundle
/// (triples, with `c` present on every entry).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleManifest {
    pub adapters: Vec<AdapterPaths>,
}

/// Writes adapter pairs plus a manifest; returns the manifest path.
pub fn save_adapter_bundle<P: AsRef<Path>>(
    adapters: &[(DMatrix<f64>, DMatrix<f64>)],
    dir: P,
    stem: &str,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (i, (a, b)) in adapters.iter().enumerate() {
        let a_name = format!("{stem}_a{}.lrmx", i + 1);
        let b_name = format!("{stem}_b{}.lrmx", i + 1);
        write_lrmx_file(dir.join(&a_name), a)?;
        write_lrmx_file(dir.join(&b_name), b)?;
        entries.push(AdapterPaths {
            a: a_name,
            b: b_name,
            c: None,
        });
    }
    let path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(&BundleManifest { adapters: entries })
        .map_err(|e| CoreError::Format(e.to_string()))?;
    std::fs::write(&path, json)?;
    Ok(path)
}

pub fn load_adapter_bundle<P: AsRef<Path>>(
    manifest_path: P,
) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
    let path = manifest_path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let manifest: BundleManifest =
        serde_json::from_str(&text).map_err(|e| CoreError::Format(e.to_string()))?;
    manifest
        .adapters
        .iter()
        .map(|entry| {
            Ok((
                read_lrmx_file(resolve(path, &entry.a))?,
                read_lrmx_file(resolve(path, &entry.b))?,
            ))
        })
        .collect()
}

/// Writes factor triples plus a manifest; returns the manifest path.
pub fn save_factor_bundle<P: AsRef<Path>>(
    factors: &[FactorTriple],
    dir: P,
    stem: &str,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (i, (a, b, c)) in factors.iter().enumerate() {
        let a_name = format!("{stem}_a{}.lrmx", i + 1);
        let b_name = format!("{stem}_b{}.lrmx", i + 1);
        let c_name = format!("{stem}_c{}.lrmx", i + 1);
        write_lrmx_file(dir.join(&a_name), a)?;
        write_lrmx_file(dir.join(&b_name), b)?;
        write_lrmx_file(dir.join(&c_name), c)?;
        entries.push(AdapterPaths {
            a: a_name,
            b: b_name,
            c: Some(c_name),
        });
    }
    let path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(&BundleManifest { adapters: entries })
        .map_err(|e| CoreError::Format(e.to_string()))?;
    std::fs::write(&path, json)?;
    Ok(path)
}

pub fn load_factor_bundle<P: AsRef<Path>>(manifest_path: P) -> Result<Vec<FactorTriple>> {
    let path = manifest_path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let manifest: BundleManifest =
        serde_json::from_str(&text).map_err(|e| CoreError::Format(e.to_string()))?;
    manifest
        .adapters
        .iter()
        .map(|entry| {
            let c = entry.c.as_deref().ok_or_else(|| {
                CoreError::Format("tensor bundle entry is missing the c factor".into())
            })?;
            Ok((
                read_lrmx_file(resolve(path, &entry.a))?,
                read_lrmx_file(resolve(path, &entry.b))?,
                read_lrmx_file(resolve(path, c))?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from_seed;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_from_seed(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.gen::<f64>() - 0.5)
    }

    #[test]
    fn lrmx_roundtrip_bytes() {
        let m = random_matrix(5, 3, 1);
        let mut bytes = Vec::new();
        write_lrmx(&mut bytes, &m).unwrap();
        assert_eq!(&bytes[..4], b"LRMX");
        assert_eq!(bytes.len(), 4 + 2 + 4 + 4 + 5 * 3 * 8);
        let back = read_lrmx(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn lrmx_writing_is_deterministic() {
        let m = random_matrix(4, 4, 2);
        let mut b1 = Vec::new();
        let mut b2 = Vec::new();
        write_lrmx(&mut b1, &m).unwrap();
        write_lrmx(&mut b2, &m).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn lrmx_rejects_bad_magic_and_version() {
        let m = random_matrix(2, 2, 3);
        let mut bytes = Vec::new();
        write_lrmx(&mut bytes, &m).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_lrmx(&mut bad.as_slice()).is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(read_lrmx(&mut wrong_version.as_slice()).is_err());
        let truncated = &bytes[..bytes.len() - 3];
        assert!(read_lrmx(&mut &truncated[..]).is_err());
    }

    #[test]
    fn base64_roundtrip() {
        let m = random_matrix(3, 7, 4);
        assert_eq!(lrmx_from_base64(&lrmx_base64(&m)).unwrap(), m);
    }

    #[test]
    fn exp_poly_json_roundtrip_exact() {
        let f = ExpPolyMatrix::from_parts(
            Some(random_matrix(3, 3, 5)),
            vec![random_matrix(3, 3, 6), random_matrix(3, 3, 7)],
        )
        .unwrap();
        let j = exp_poly_to_json(&f);
        let back = exp_poly_from_json(&j).unwrap();
        assert!(back.coeff_eq(&f));
        // polynomial-only: exp serializes as null
        let g = ExpPolyMatrix::from_poly(vec![random_matrix(2, 2, 8)]).unwrap();
        let gj = exp_poly_to_json(&g);
        assert!(gj.exp.is_none());
        assert!(exp_poly_from_json(&gj).unwrap().coeff_eq(&g));
        // zero function
        let z = ExpPolyMatrix::zero(4, 2);
        let zj = exp_poly_to_json(&z);
        let zback = exp_poly_from_json(&zj).unwrap();
        assert!(zback.is_zero());
        assert_eq!((zback.rows(), zback.cols()), (4, 2));
    }

    #[test]
    fn model_manifest_roundtrip() {
        use crate::cascade::{eval_all_orders, Activation, CascadeModel};
        let dir = std::env::temp_dir().join(format!("lrmx_model_{}", std::process::id()));
        let model = CascadeModel::random(6, &[2, 1], Activation::Tanh, 11).unwrap();
        let manifest = save_cascade_model(&model, &dir, "m").unwrap();
        let loaded = load_cascade_model(&manifest).unwrap();
        assert_eq!(loaded.n(), 6);
        assert_eq!(loaded.ranks(), vec![2, 1]);
        assert_eq!(loaded.activation(), Activation::Tanh);
        let x = random_matrix(6, 3, 12);
        let a = eval_all_orders(&model, &x).unwrap();
        let b = eval_all_orders(&loaded, &x).unwrap();
        for (x1, x2) in a.orders.iter().zip(&b.orders) {
            assert_eq!(x1, x2);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bundle_roundtrips() {
        let dir = std::env::temp_dir().join(format!("lrmx_bundle_{}", std::process::id()));
        let adapters = vec![
            (random_matrix(4, 2, 13), random_matrix(2, 4, 14)),
            (random_matrix(4, 1, 15), random_matrix(1, 4, 16)),
        ];
        let manifest = save_adapter_bundle(&adapters, &dir, "pairs").unwrap();
        let loaded = load_adapter_bundle(&manifest).unwrap();
        assert_eq!(loaded, adapters);

        let factors = vec![(
            random_matrix(4, 2, 17),
            random_matrix(4, 2, 18),
            random_matrix(4, 2, 19),
        )];
        let manifest = save_factor_bundle(&factors, &dir, "triples").unwrap();
        let loaded = load_factor_bundle(&manifest).unwrap();
        assert_eq!(loaded, factors);
        // pair bundle is rejected by the triple loader
        let pair_manifest = dir.join("pairs.json");
        assert!(load_factor_bundle(&pair_manifest).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
