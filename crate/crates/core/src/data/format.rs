//! Flat little-endian dataset file.
//!
//! ```text
//! magic      8 bytes  "FEDECHOD"
//! version    u32      1
//! dim        u32
//! classes    u32
//! n_train    u32
//! n_test     u32
//! n_pool     u32
//! train x    n_train * dim f64
//! train y    n_train u32
//! test x     n_test * dim f64
//! test y     n_test u32
//! pool x     n_pool * dim f64
//! ```

use std::io::{Read, Write};

use super::Dataset;
use crate::error::{Error, Result};
use crate::model::Batch;
use crate::tensor::DenseMatrix;

pub const FORMAT_MAGIC: &[u8; 8] = b"FEDECHOD";
pub const FORMAT_VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> Error {
    Error::Format(e.to_string())
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}

fn put_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut b = [0u8; 8];
    (0..n)
        .map(|_| {
            r.read_exact(&mut b).map_err(io_err)?;
            Ok(f64::from_le_bytes(b))
        })
        .collect()
}

pub fn write_dataset(w: &mut impl Write, ds: &Dataset) -> Result<()> {
    w.write_all(FORMAT_MAGIC).map_err(io_err)?;
    put_u32(w, FORMAT_VERSION as usize)?;
    put_u32(w, ds.dim())?;
    put_u32(w, ds.classes)?;
    put_u32(w, ds.train.len())?;
    put_u32(w, ds.test.len())?;
    put_u32(w, ds.unlabeled.rows())?;
    for split in [&ds.train, &ds.test] {
        put_f64s(w, split.inputs().data())?;
        for &l in split.labels() {
            put_u32(w, l)?;
        }
    }
    put_f64s(w, ds.unlabeled.data())
}

pub fn read_dataset(r: &mut impl Read) -> Result<Dataset> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != FORMAT_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = get_u32(r)?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dim = get_u32(r)?;
    let classes = get_u32(r)?;
    let (n_train, n_test, n_pool) = (get_u32(r)?, get_u32(r)?, get_u32(r)?);
    let mut split = |n: usize| -> Result<Batch> {
        let x = DenseMatrix::from_vec(n, dim, get_f64s(r, n * dim)?)?;
        let y = (0..n).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        Batch::new(x, y, classes)
    };
    let train = split(n_train)?;
    let test = split(n_test)?;
    let unlabeled = DenseMatrix::from_vec(n_pool, dim, get_f64s(r, n_pool * dim)?)?;
    Ok(Dataset {
        train,
        test,
        unlabeled,
        classes,
    })
}
