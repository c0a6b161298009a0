//! Chip files and chip manifests.
//!
//! A chip file is `GEOCHIP1`, a dtype byte (1 = f32, 2 = f64), a rank byte,
//! one little-endian u32 per dimension, then the little-endian payload.
//! A chip manifest is a CSV with header `file,lat,lon,dates`; `dates` holds
//! `YYYY-DDD` entries separated by `;`, and all three metadata columns are
//! either filled or empty.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::posenc::{AcqDate, GeoTemporalMetadata};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GEOCHIP1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn encode_chip(t: &Tensor, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * t.ndim() + t.len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        match dtype {
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub fn decode_chip(bytes: &[u8]) -> Result<Tensor> {
    let bad = |detail: String| Error::Format { what: "chip file", detail };
    if bytes.len() < 10 || &bytes[..8] != MAGIC {
        return Err(bad("missing GEOCHIP1 header".into()));
    }
    let dtype = match bytes[8] {
        1 => DType::F32,
        2 => DType::F64,
        c => return Err(bad(format!("unknown dtype code {c}"))),
    };
    let ndim = bytes[9] as usize;
    let body = 10 + 4 * ndim;
    if bytes.len() < body {
        return Err(bad("truncated shape".into()));
    }
    let shape: Vec<usize> = bytes[10..body]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let payload = &bytes[body..];
    if payload.len() != n * dtype.width() {
        return Err(bad(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            payload.len(),
            n * dtype.width()
        )));
    }
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Tensor::from_vec(&shape, data)
}

pub fn write_chip(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    fs::write(path, encode_chip(t, dtype)).map_err(|e| Error::io(path, e))
}

pub fn read_chip(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_chip(&bytes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChipRecord {
    /// Resolved against the manifest's directory when read.
    pub file: PathBuf,
    pub meta: Option<GeoTemporalMetadata>,
}

pub fn format_date(d: AcqDate) -> String {
    format!("{:04}-{:03}", d.year, d.doy)
}

pub fn parse_date(s: &str) -> Result<AcqDate> {
    let bad = || Error::InvalidArgument(format!("date {s:?} is not YYYY-DDD"));
    let (y, d) = s.trim().split_once('-').ok_or_else(bad)?;
    AcqDate::new(y.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?)
}

pub fn write_manifest(path: &Path, records: &[ChipRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Format {
        what: "chip manifest",
        detail: e.to_string(),
    };
    w.write_record(["file", "lat", "lon", "dates"]).map_err(err)?;
    for r in records {
        let file = r.file.to_string_lossy();
        match &r.meta {
            Some(m) => {
                let dates: Vec<String> = m.dates.iter().map(|d| format_date(*d)).collect();
                w.write_record([&*file, &m.lat.to_string(), &m.lon.to_string(), &dates.join(";")])
            }
            None => w.write_record([&*file, "", "", ""]),
        }
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| err(csv::Error::from(e.into_error())))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ChipRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let bad = |detail: String| Error::Format {
            what: "chip manifest",
            detail: format!("row {row}: {detail}"),
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 4 {
            return Err(bad(format!("expected 4 columns, found {}", rec.len())));
        }
        let meta = match (&rec[1], &rec[2], &rec[3]) {
            ("", "", "") => None,
            (lat, lon, dates) => {
                let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
                let dates = dates
                    .split(';')
                    .map(parse_date)
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| bad(e.to_string()))?;
                Some(GeoTemporalMetadata {
                    lat: num(lat)?,
                    lon: num(lon)?,
                    dates,
                })
            }
        };
        out.push(ChipRecord {
            file: base.join(&rec[0]),
            meta,
        });
    }
    Ok(out)
}
