//! Tensor files: a text manifest `<stem>.manifest` next to a raw little-endian
//! blob `<stem>.bin` of 32-bit floats in row-major order (complex values as
//! interleaved real/imaginary pairs).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    Float32,
    Complex64,
}

impl DType {
    fn name(self) -> &'static str {
        match self {
            DType::Float32 => "float32",
            DType::Complex64 => "complex64",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    Real(ArrayD<f32>),
    Complex(ArrayD<Complex<f32>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub axes: Vec<String>,
    pub data: TensorData,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        match &self.data {
            TensorData::Real(a) => a.shape(),
            TensorData::Complex(a) => a.shape(),
        }
    }

    pub fn into_real(self, path: &Path) -> Result<ArrayD<f32>> {
        match self.data {
            TensorData::Real(a) => Ok(a),
            TensorData::Complex(_) => Err(format_error(path, "expected float32 data, found complex64")),
        }
    }

    pub fn into_complex(self, path: &Path) -> Result<ArrayD<Complex<f32>>> {
        match self.data {
            TensorData::Complex(a) => Ok(a),
            TensorData::Real(_) => Err(format_error(path, "expected complex64 data, found float32")),
        }
    }
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("manifest")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

fn format_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn write_pair(stem: &Path, dtype: DType, shape: &[usize], axes: &[&str], floats: &[f32]) -> Result<()> {
    if axes.len() != shape.len() {
        return Err(Error::Dimension(format!("{} axis names for a rank-{} tensor", axes.len(), shape.len())));
    }
    let per = if dtype == DType::Complex64 { 2 } else { 1 };
    let n: usize = shape.iter().product();
    if floats.len() != n * per {
        return Err(Error::ShapeMismatch {
            axis: "element",
            expected: n,
            got: floats.len() / per,
        });
    }
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut manifest = String::new();
    let join = |v: Vec<String>| v.join(",");
    writeln!(manifest, "version = {FORMAT_VERSION}").unwrap();
    writeln!(manifest, "dtype = {}", dtype.name()).unwrap();
    writeln!(manifest, "endianness = little").unwrap();
    writeln!(manifest, "shape = {}", join(shape.iter().map(|s| s.to_string()).collect())).unwrap();
    writeln!(manifest, "axes = {}", join(axes.iter().map(|s| s.to_string()).collect())).unwrap();
    let mut bytes = Vec::with_capacity(floats.len() * 4);
    for f in floats {
        bytes.extend_from_slice(&f.to_le_bytes());
    }
    fs::write(blob_path(stem), bytes)?;
    fs::write(manifest_path(stem), manifest)?;
    Ok(())
}

pub fn write_real(stem: &Path, shape: &[usize], axes: &[&str], data: &[f32]) -> Result<()> {
    write_pair(stem, DType::Float32, shape, axes, data)
}

pub fn write_complex(stem: &Path, shape: &[usize], axes: &[&str], data: &[Complex<f32>]) -> Result<()> {
    let floats: Vec<f32> = data.iter().flat_map(|z| [z.re, z.im]).collect();
    write_pair(stem, DType::Complex64, shape, axes, &floats)
}

/// Writes any real array, rounding to 32-bit floats.
pub fn write_real_array<T: Scalar, D: ndarray::Dimension>(stem: &Path, a: &ndarray::Array<T, D>, axes: &[&str]) -> Result<()> {
    let data: Vec<f32> = a.iter().map(|v| v.as_f64() as f32).collect();
    write_real(stem, a.shape(), axes, &data)
}

/// Writes any complex array, rounding to 32-bit floats.
pub fn write_complex_array<T: Scalar, D: ndarray::Dimension>(stem: &Path, a: &ndarray::Array<Complex<T>, D>, axes: &[&str]) -> Result<()> {
    let data: Vec<Complex<f32>> = a.iter().map(|z| Complex::new(z.re.as_f64() as f32, z.im.as_f64() as f32)).collect();
    write_complex(stem, a.shape(), axes, &data)
}

pub fn read_tensor(stem: &Path) -> Result<Tensor> {
    let mpath = manifest_path(stem);
    if !mpath.exists() {
        return Err(Error::MissingArtifact(mpath.display().to_string()));
    }
    let text = fs::read_to_string(&mpath)?;
    let mut version = None;
    let mut dtype = None;
    let mut shape = None;
    let mut axes = None;
    let mut little = false;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format_error(&mpath, format!("malformed line {line:?}")))?;
        let value = value.trim();
        match key.trim() {
            "version" => version = value.parse::<u32>().ok(),
            "dtype" => {
                dtype = Some(match value {
                    "float32" => DType::Float32,
                    "complex64" => DType::Complex64,
                    other => return Err(format_error(&mpath, format!("unknown dtype {other}"))),
                })
            }
            "endianness" => little = value == "little",
            "shape" => {
                let dims: std::result::Result<Vec<usize>, _> = if value.is_empty() {
                    Ok(Vec::new())
                } else {
                    value.split(',').map(|s| s.trim().parse::<usize>()).collect()
                };
                shape = Some(dims.map_err(|_| format_error(&mpath, "bad shape"))?);
            }
            "axes" => axes = Some(value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect::<Vec<_>>()),
            other => return Err(format_error(&mpath, format!("unknown key {other}"))),
        }
    }
    if version != Some(FORMAT_VERSION) {
        return Err(format_error(&mpath, "unsupported version"));
    }
    if !little {
        return Err(format_error(&mpath, "only little-endian data is supported"));
    }
    let dtype = dtype.ok_or_else(|| format_error(&mpath, "missing dtype"))?;
    let shape = shape.ok_or_else(|| format_error(&mpath, "missing shape"))?;
    let axes = axes.unwrap_or_default();
    if axes.len() != shape.len() {
        return Err(format_error(&mpath, "axis names do not match the shape"));
    }
    let bpath = blob_path(stem);
    if !bpath.exists() {
        return Err(Error::MissingArtifact(bpath.display().to_string()));
    }
    let bytes = fs::read(&bpath)?;
    let n: usize = shape.iter().product();
    let per = if dtype == DType::Complex64 { 2 } else { 1 };
    if bytes.len() != n * per * 4 {
        return Err(format_error(&bpath, format!("expected {} bytes, found {}", n * per * 4, bytes.len())));
    }
    let floats: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let data = match dtype {
        DType::Float32 => TensorData::Real(ArrayD::from_shape_vec(IxDyn(&shape), floats).expect("checked length")),
        DType::Complex64 => {
            let values = floats.chunks_exact(2).map(|c| Complex::new(c[0], c[1])).collect();
            TensorData::Complex(ArrayD::from_shape_vec(IxDyn(&shape), values).expect("checked length"))
        }
    };
    Ok(Tensor { axes, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn round_trip_real_and_complex() {
        let dir = tempfile::tempdir().unwrap();
        let a = Array3::from_shape_fn((2, 3, 4), |(i, j, k)| (i * 12 + j * 4 + k) as f64 * 0.5);
        let stem = dir.path().join("t1");
        write_real_array(&stem, &a, &["x", "y", "z"]).unwrap();
        let t = read_tensor(&stem).unwrap();
        assert_eq!(t.axes, vec!["x", "y", "z"]);
        assert_eq!(t.into_real(&stem).unwrap(), a.mapv(|v| v as f32).into_dyn());
        let text = fs::read_to_string(manifest_path(&stem)).unwrap();
        assert!(text.contains("dtype = float32") && text.contains("endianness = little"));

        let c = ndarray::Array2::from_shape_fn((2, 2), |(i, j)| Complex::new(i as f32, -(j as f32)));
        let stem = dir.path().join("c");
        write_complex_array(&stem, &c, &["coil", "x"]).unwrap();
        assert_eq!(fs::metadata(blob_path(&stem)).unwrap().len(), 32);
        assert_eq!(read_tensor(&stem).unwrap().into_complex(&stem).unwrap(), c.into_dyn());
    }

    #[test]
    fn errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("absent");
        match read_tensor(&stem) {
            Err(Error::MissingArtifact(p)) => assert!(p.ends_with("absent.manifest")),
            other => panic!("{other:?}"),
        }
        write_real(&stem, &[2], &["n"], &[1.0, 2.0]).unwrap();
        fs::write(blob_path(&stem), [0u8; 4]).unwrap();
        assert!(matches!(read_tensor(&stem), Err(Error::Format { .. })));
        assert!(write_real(&stem, &[3], &["n"], &[1.0]).is_err());
    }
}
