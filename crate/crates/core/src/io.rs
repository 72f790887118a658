//! On-disk formats. One container covers everything:
//!
//!   magic "POUF" · version u16 LE · dtype u8 · body
//!
//! dtype 0 is a real f64 array (rank u8, dims u64 LE, row-major f64 LE),
//! dtype 1 the complex analogue with interleaved re/im, and dtype 255 a
//! named table: a JSON meta blob followed by name → real-array entries.
//! Checkpoints are named tables carrying parameters and optimizer moments
//! under reserved prefixes.

use crate::error::{Error, Result};
use crate::spectral::{Field, GridSpec};
use crate::tape::ParamStore;
use ndarray::{ArrayD, IxDyn};
use num_complex::Complex64;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"POUF";
pub const VERSION: u16 = 1;

const DTYPE_REAL: u8 = 0;
const DTYPE_COMPLEX: u8 = 1;
const DTYPE_TABLE: u8 = 255;

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_header<W: Write>(w: &mut W, dtype: u8) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[dtype])?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<u8> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::format(format!("bad magic {magic:?}")));
    }
    let mut vb = [0u8; 2];
    r.read_exact(&mut vb)?;
    let version = u16::from_le_bytes(vb);
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let mut d = [0u8; 1];
    r.read_exact(&mut d)?;
    Ok(d[0])
}

fn write_dims<W: Write>(w: &mut W, shape: &[usize]) -> Result<()> {
    if shape.len() > u8::MAX as usize {
        return Err(Error::format("rank too large"));
    }
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        write_u64(w, d as u64)?;
    }
    Ok(())
}

fn read_dims<R: Read>(r: &mut R) -> Result<Vec<usize>> {
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)?;
    let mut dims = Vec::with_capacity(rank[0] as usize);
    let mut total: u128 = 1;
    for _ in 0..rank[0] {
        let d = read_u64(r)? as usize;
        total *= d as u128;
        if total > (1 << 40) {
            return Err(Error::format("array too large"));
        }
        dims.push(d);
    }
    Ok(dims)
}

fn write_real_body<W: Write>(w: &mut W, a: &ArrayD<f64>) -> Result<()> {
    write_dims(w, a.shape())?;
    for &v in a.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_real_body<R: Read>(r: &mut R) -> Result<ArrayD<f64>> {
    let dims = read_dims(r)?;
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| Error::format(format!("{e}")))
}

pub fn write_array(path: &Path, a: &ArrayD<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, DTYPE_REAL)?;
    write_real_body(&mut w, a)?;
    w.flush()?;
    Ok(())
}

pub fn read_array(path: &Path) -> Result<ArrayD<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    if read_header(&mut r)? != DTYPE_REAL {
        return Err(Error::format(format!(
            "{} is not a real array file",
            path.display()
        )));
    }
    read_real_body(&mut r)
}

pub fn write_complex_array(path: &Path, a: &ArrayD<Complex64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, DTYPE_COMPLEX)?;
    write_dims(&mut w, a.shape())?;
    for v in a.iter() {
        w.write_all(&v.re.to_le_bytes())?;
        w.write_all(&v.im.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_complex_array(path: &Path) -> Result<ArrayD<Complex64>> {
    let mut r = BufReader::new(File::open(path)?);
    if read_header(&mut r)? != DTYPE_COMPLEX {
        return Err(Error::format(format!(
            "{} is not a complex array file",
            path.display()
        )));
    }
    let dims = read_dims(&mut r)?;
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        let re = f64::from_le_bytes(b);
        r.read_exact(&mut b)?;
        let im = f64::from_le_bytes(b);
        data.push(Complex64::new(re, im));
    }
    ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| Error::format(format!("{e}")))
}

/// Store a field's value array; the grid comes back from configuration, so
/// only the dims are checked on load.
pub fn write_field(path: &Path, f: &Field) -> Result<()> {
    write_array(path, &f.values)
}

pub fn read_field(path: &Path, grid: &GridSpec) -> Result<Field> {
    let a = read_array(path)?;
    Field::new(grid.clone(), a).map_err(|_| {
        Error::format(format!(
            "{}: stored dims do not match the grid {:?}",
            path.display(),
            grid.n
        ))
    })
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u64(r)? as usize;
    if n > (1 << 30) {
        return Err(Error::format("string too large"));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::format("invalid utf-8 string"))
}

/// Named table: JSON meta plus name → real array entries, insertion order
/// preserved.
pub fn write_table(path: &Path, meta: &serde_json::Value, entries: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, DTYPE_TABLE)?;
    write_string(&mut w, &meta.to_string())?;
    write_u64(&mut w, entries.len() as u64)?;
    for (name, a) in entries {
        write_string(&mut w, name)?;
        w.write_all(&[DTYPE_REAL])?;
        write_real_body(&mut w, a)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table(path: &Path) -> Result<(serde_json::Value, ParamStore)> {
    let mut r = BufReader::new(File::open(path)?);
    if read_header(&mut r)? != DTYPE_TABLE {
        return Err(Error::format(format!(
            "{} is not a named-table file",
            path.display()
        )));
    }
    let meta_str = read_string(&mut r)?;
    let meta =
        serde_json::from_str(&meta_str).map_err(|e| Error::format(format!("bad meta json: {e}")))?;
    let count = read_u64(&mut r)?;
    let mut entries = ParamStore::new();
    for _ in 0..count {
        let name = read_string(&mut r)?;
        let mut d = [0u8; 1];
        r.read_exact(&mut d)?;
        if d[0] != DTYPE_REAL {
            return Err(Error::format(format!("entry '{name}' has dtype {}", d[0])));
        }
        let a = read_real_body(&mut r)?;
        if entries.insert(name.clone(), a).is_some() {
            return Err(Error::format(format!("duplicate entry '{name}'")));
        }
    }
    Ok((meta, entries))
}

/// Model parameters plus optimizer state; `meta` carries step counters and
/// the configuration echo as JSON.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: ParamStore,
    pub opt_m: ParamStore,
    pub opt_v: ParamStore,
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut entries = ParamStore::new();
    for (k, v) in &ck.params {
        entries.insert(format!("param.{k}"), v.clone());
    }
    for (k, v) in &ck.opt_m {
        entries.insert(format!("adam_m.{k}"), v.clone());
    }
    for (k, v) in &ck.opt_v {
        entries.insert(format!("adam_v.{k}"), v.clone());
    }
    write_table(path, &ck.meta, &entries)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (meta, entries) = read_table(path)?;
    let mut ck = Checkpoint {
        meta,
        params: ParamStore::new(),
        opt_m: ParamStore::new(),
        opt_v: ParamStore::new(),
    };
    for (name, a) in entries {
        if let Some(k) = name.strip_prefix("param.") {
            ck.params.insert(k.to_string(), a);
        } else if let Some(k) = name.strip_prefix("adam_m.") {
            ck.opt_m.insert(k.to_string(), a);
        } else if let Some(k) = name.strip_prefix("adam_v.") {
            ck.opt_v.insert(k.to_string(), a);
        } else {
            return Err(Error::format(format!("unknown checkpoint entry '{name}'")));
        }
    }
    Ok(ck)
}
