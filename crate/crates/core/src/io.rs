//! File formats: snapshot CSV, binary snapshot and basis containers, JSON
//! helpers.
//!
//! Binary container layout (all integers and floats little-endian):
//!
//! | field      | type        | notes                                      |
//! |------------|-------------|--------------------------------------------|
//! | magic      | 8 bytes     | `BROMSNAP` (snapshots) or `BROMBASE` (basis) |
//! | version    | u32         | currently 1                                |
//! | n, k, r    | 3 × u64     | rows, columns, rank (0 for snapshots)       |
//! | header_len | u64         | byte length of the JSON header             |
//! | header     | UTF-8 JSON  | layout, trajectories, scaling, input count |
//! | payload    | f64 values  | see below                                  |
//!
//! Snapshot payload: `k` times, the `n × k` states column-major, then the
//! `m × k` inputs column-major when the header's `inputs` is nonzero.
//! Basis payload: the `n × r` basis column-major, then `k` singular values.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RomError};
use crate::pod::{ReducedBasis, ScalingRecord, SnapshotSet, VariableBlock};
use crate::regselect::format_float;

const SNAPSHOT_MAGIC: &[u8; 8] = b"BROMSNAP";
const BASIS_MAGIC: &[u8; 8] = b"BROMBASE";
const VERSION: u32 = 1;

/// Write through a temporary sibling file, renamed into place only on success.
pub fn write_atomic<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| RomError::InvalidArgument(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.partial", name.to_string_lossy()));
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        body(&mut w)?;
        w.flush()?;
        Ok(())
    })();
    match result {
        Ok(()) => {
            fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

/// Snapshot CSV: header `variable,index,t_0,…,t_{k−1}`, then one row per
/// degree of freedom. Trajectory boundaries are where the time decreases or
/// repeats.
pub fn write_snapshot_csv<W: Write>(set: &SnapshotSet, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["variable".to_string(), "index".to_string()];
    header.extend(set.times.iter().map(|&t| format_float(t)));
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(set.k() + 2);
    for b in &set.layout {
        for (local, i) in b.range.clone().enumerate() {
            row.clear();
            row.push(b.name.clone());
            row.push(local.to_string());
            row.extend(set.states.row(i).iter().map(|&v| format_float(v)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| RomError::Format(format!("cannot parse {what} `{s}` as a number")))
}

pub fn read_snapshot_csv<R: Read>(reader: R) -> Result<SnapshotSet> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = r.headers()?.clone();
    if header.len() < 3 || &header[0] != "variable" || &header[1] != "index" {
        return Err(RomError::Format(
            "snapshot CSV header must start with `variable,index` followed by times".into(),
        ));
    }
    let times = header
        .iter()
        .skip(2)
        .map(|s| parse_f64(s, "time"))
        .collect::<Result<Vec<_>>>()?;
    let k = times.len();
    let mut values = Vec::new();
    let mut layout: Vec<VariableBlock> = Vec::new();
    let mut n = 0;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != k + 2 {
            return Err(RomError::Format(format!(
                "row {} has {} fields, expected {}",
                n + 1,
                rec.len(),
                k + 2
            )));
        }
        let name = &rec[0];
        match layout.last_mut() {
            Some(b) if b.name == name => b.range.end = n + 1,
            _ => {
                if layout.iter().any(|b| b.name == name) {
                    return Err(RomError::Format(format!("variable `{name}` rows are not contiguous")));
                }
                layout.push(VariableBlock::new(name, n..n + 1, ""));
            }
        }
        for s in rec.iter().skip(2) {
            values.push(parse_f64(s, "value")?);
        }
        n += 1;
    }
    if n == 0 {
        return Err(RomError::Format("snapshot CSV has no data rows".into()));
    }
    let states = DMatrix::from_row_slice(n, k, &values);
    let mut trajectories = Vec::new();
    let mut start = 0;
    for j in 1..k {
        if times[j] <= times[j - 1] {
            trajectories.push(start..j);
            start = j;
        }
    }
    trajectories.push(start..k);
    SnapshotSet::new(states, times, layout, trajectories)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotHeader {
    layout: Vec<VariableBlock>,
    trajectories: Vec<Range<usize>>,
    scaling: Option<ScalingRecord>,
    inputs: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BasisHeader {
    scaling: Option<ScalingRecord>,
}

fn write_preamble<W: Write, H: Serialize>(
    w: &mut W,
    magic: &[u8; 8],
    dims: [usize; 3],
    header: &H,
) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let json = serde_json::to_vec(header)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    Ok(())
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 * 4096);
    for chunk in values.chunks(4096) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, out: &mut [f64]) -> Result<()> {
    let mut buf = vec![0u8; 8 * 4096];
    for chunk in out.chunks_mut(4096) {
        let bytes = &mut buf[..8 * chunk.len()];
        r.read_exact(bytes).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => RomError::Format("container payload is truncated".into()),
            _ => RomError::Io(e),
        })?;
        for (v, b) in chunk.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().expect("8-byte chunk"));
        }
    }
    Ok(())
}

fn read_preamble<R: Read, H: DeserializeOwned>(r: &mut R, magic: &[u8; 8]) -> Result<([usize; 3], H)> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m)
        .map_err(|_| RomError::Format("file too short for a container header".into()))?;
    if &m != magic {
        return Err(RomError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(RomError::Format(format!("unsupported container version {version}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = usize::try_from(read_u64(r)?).map_err(|_| RomError::Format("dimension overflows usize".into()))?;
    }
    let len = read_u64(r)?;
    if len > 1 << 30 {
        return Err(RomError::Format(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)
        .map_err(|_| RomError::Format("container header is truncated".into()))?;
    let header = serde_json::from_slice(&json)?;
    Ok((dims, header))
}

fn ensure_end<R: Read>(r: &mut R) -> Result<()> {
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(RomError::Format("trailing bytes after container payload".into()));
    }
    Ok(())
}

pub fn write_snapshot_binary<W: Write>(set: &SnapshotSet, mut w: W) -> Result<()> {
    let header = SnapshotHeader {
        layout: set.layout.clone(),
        trajectories: set.trajectories.clone(),
        scaling: set.scaling.clone(),
        inputs: set.inputs.as_ref().map_or(0, |u| u.nrows()),
    };
    write_preamble(&mut w, SNAPSHOT_MAGIC, [set.n(), set.k(), 0], &header)?;
    write_f64s(&mut w, &set.times)?;
    write_f64s(&mut w, set.states.as_slice())?;
    if let Some(u) = &set.inputs {
        write_f64s(&mut w, u.as_slice())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_snapshot_binary<R: Read>(mut r: R) -> Result<SnapshotSet> {
    let ([n, k, _], header): (_, SnapshotHeader) = read_preamble(&mut r, SNAPSHOT_MAGIC)?;
    let mut times = vec![0.0; k];
    read_f64s(&mut r, &mut times)?;
    let mut states = DMatrix::zeros(n, k);
    read_f64s(&mut r, states.as_mut_slice())?;
    let inputs = if header.inputs > 0 {
        let mut u = DMatrix::zeros(header.inputs, k);
        read_f64s(&mut r, u.as_mut_slice())?;
        Some(u)
    } else {
        None
    };
    ensure_end(&mut r)?;
    let set = SnapshotSet {
        states,
        times,
        inputs,
        layout: header.layout,
        trajectories: header.trajectories,
        scaling: header.scaling,
    };
    set.validate()?;
    Ok(set)
}

pub fn write_basis_binary<W: Write>(basis: &ReducedBasis, mut w: W) -> Result<()> {
    let header = BasisHeader {
        scaling: basis.scaling.clone(),
    };
    write_preamble(&mut w, BASIS_MAGIC, [basis.n(), basis.singular_values.len(), basis.r()], &header)?;
    write_f64s(&mut w, basis.vectors.as_slice())?;
    write_f64s(&mut w, &basis.singular_values)?;
    w.flush()?;
    Ok(())
}

pub fn read_basis_binary<R: Read>(mut r: R) -> Result<ReducedBasis> {
    let ([n, k, rank], header): (_, BasisHeader) = read_preamble(&mut r, BASIS_MAGIC)?;
    let mut vectors = DMatrix::zeros(n, rank);
    read_f64s(&mut r, vectors.as_mut_slice())?;
    let mut singular_values = vec![0.0; k];
    read_f64s(&mut r, &mut singular_values)?;
    ensure_end(&mut r)?;
    Ok(ReducedBasis {
        vectors,
        singular_values,
        scaling: header.scaling,
    })
}

pub fn save_snapshots(path: &Path, set: &SnapshotSet) -> Result<()> {
    write_atomic(path, |w| write_snapshot_binary(set, w))
}

pub fn load_snapshots(path: &Path) -> Result<SnapshotSet> {
    let file = File::open(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        read_snapshot_csv(BufReader::new(file))
    } else {
        read_snapshot_binary(BufReader::new(file))
    }
}

pub fn save_basis(path: &Path, basis: &ReducedBasis) -> Result<()> {
    write_atomic(path, |w| write_basis_binary(basis, w))
}

pub fn load_basis(path: &Path) -> Result<ReducedBasis> {
    read_basis_binary(BufReader::new(File::open(path)?))
}

/// Matrix CSV with a header row; row `j` holds column `j` of `columns`
/// preceded by `lead[j]`.
pub fn write_columns_csv<W: Write>(
    writer: W,
    header: &[String],
    lead: &[f64],
    columns: &DMatrix<f64>,
) -> Result<()> {
    if header.len() != columns.nrows() + 1 || lead.len() != columns.ncols() {
        return Err(RomError::DimensionMismatch(format!(
            "{} header fields and {} leading values for a {}×{} table",
            header.len(),
            lead.len(),
            columns.nrows(),
            columns.ncols()
        )));
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header)?;
    let mut row = Vec::with_capacity(header.len());
    for (j, &t) in lead.iter().enumerate() {
        row.clear();
        row.push(format_float(t));
        row.extend(columns.column(j).iter().map(|&v| format_float(v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
