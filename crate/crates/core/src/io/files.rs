use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::foundation::{Real, Tensor};
use crate::io::checkpoint::{read_array, write_array, Reader};

pub const TENSOR_MAGIC: &[u8; 8] = b"DFTENS01";

/// Magic, `u32` rank, `u32` dims, little-endian `f32` data.
pub fn tensor_to_bytes<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = TENSOR_MAGIC.to_vec();
    write_array(&mut out, &t.cast::<f32>());
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != TENSOR_MAGIC {
        return Err(Error::InvalidArgument("not a tensor file (bad magic)".into()));
    }
    let t = read_array(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::InvalidArgument("trailing bytes after tensor data".into()));
    }
    Ok(t)
}

pub fn write_tensor_file<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, tensor_to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    tensor_from_bytes(&bytes)
}

/// `x,y[,class]` rows for 2-D points; `x1,…,xd` columns otherwise.
pub fn points_csv<T: Real>(points: &Tensor<T>, classes: Option<&[usize]>) -> Result<String> {
    if points.rank() != 2 {
        return Err(Error::InvalidArgument(format!("points must be (n, d), got {:?}", points.shape())));
    }
    let d = points.last_dim();
    let mut cols: Vec<String> = if d == 2 {
        vec!["x".into(), "y".into()]
    } else {
        (1..=d).map(|i| format!("x{i}")).collect()
    };
    if classes.is_some() {
        cols.push("class".into());
    }
    let mut out = cols.join(",");
    out.push('\n');
    for i in 0..points.rows() {
        let row: Vec<String> = points.row(i).iter().map(|v| v.as_f64().to_string()).collect();
        out.push_str(&row.join(","));
        if let Some(c) = classes {
            let _ = write!(out, ",{}", c[i]);
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
