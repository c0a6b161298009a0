//! Checkpoint directory: `manifest.csv` (name, dtype, shape, offset),
//! `meta.csv` (key, value) and one little-endian blob `params.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.csv";
pub const META: &str = "meta.csv";
pub const BLOB: &str = "params.bin";
pub const FORMAT: &str = "geomae-checkpoint/1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: ParamStore,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(tensors: ParamStore, meta: BTreeMap<String, String>) -> Self {
        Checkpoint { tensors, meta }
    }

    pub fn meta_value(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| Error::Format {
            what: "checkpoint",
            detail: format!("missing meta key {key:?}"),
        })
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta_value(key)?;
        v.parse().map_err(|_| Error::Format {
            what: "checkpoint",
            detail: format!("meta {key} = {v:?} does not parse"),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::with_capacity(self.tensors.numel() * 8);
        let mut man = csv::Writer::from_writer(Vec::new());
        man.write_record(["name", "dtype", "shape", "offset"]).map_err(csv_err)?;
        for (_, name, t) in self.tensors.iter() {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let offset = blob.len().to_string();
            man.write_record([name, "f64", &shape.join("x"), &offset]).map_err(csv_err)?;
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut meta = csv::Writer::from_writer(Vec::new());
        meta.write_record(["key", "value"]).map_err(csv_err)?;
        meta.write_record(["format", FORMAT]).map_err(csv_err)?;
        for (k, v) in &self.meta {
            meta.write_record([k, v]).map_err(csv_err)?;
        }
        write(&dir.join(MANIFEST), &man.into_inner().map_err(|e| csv_err(csv::Error::from(e.into_error())))?)?;
        write(&dir.join(META), &meta.into_inner().map_err(|e| csv_err(csv::Error::from(e.into_error())))?)?;
        write(&dir.join(BLOB), &blob)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| Error::io(p, e))
        };
        let blob = read(BLOB)?;
        let mut meta = BTreeMap::new();
        let mut format = None;
        for rec in csv::Reader::from_reader(read(META)?.as_slice()).records() {
            let rec = rec.map_err(csv_err)?;
            let (k, v) = (field(&rec, 0)?, field(&rec, 1)?);
            if k == "format" {
                format = Some(v.to_string());
            } else {
                meta.insert(k.to_string(), v.to_string());
            }
        }
        if format.as_deref() != Some(FORMAT) {
            return Err(bad(format!("unsupported format {format:?}")));
        }
        let mut tensors = ParamStore::new();
        for (row, rec) in csv::Reader::from_reader(read(MANIFEST)?.as_slice()).records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let name = field(&rec, 0)?;
            if field(&rec, 1)? != "f64" {
                return Err(bad(format!("row {}: dtype {:?}", row + 2, field(&rec, 1)?)));
            }
            let shape_s = field(&rec, 2)?;
            let shape = if shape_s.is_empty() {
                Vec::new()
            } else {
                shape_s
                    .split('x')
                    .map(|d| d.parse::<usize>().map_err(|_| bad(format!("row {}: shape {shape_s:?}", row + 2))))
                    .collect::<Result<Vec<_>>>()?
            };
            let offset: usize = field(&rec, 3)?
                .parse()
                .map_err(|_| bad(format!("row {}: offset", row + 2)))?;
            let n: usize = shape.iter().product();
            let bytes = blob
                .get(offset..offset + 8 * n)
                .ok_or_else(|| bad(format!("tensor {name} runs past the end of {BLOB}")))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if tensors.id(name).is_some() {
                return Err(bad(format!("duplicate tensor {name}")));
            }
            tensors.push(name, Tensor::from_vec(&shape, data)?);
        }
        Ok(Checkpoint { tensors, meta })
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn field(rec: &csv::StringRecord, i: usize) -> Result<&str> {
    rec.get(i).ok_or_else(|| bad(format!("record {rec:?} lacks column {i}")))
}

fn bad(detail: String) -> Error {
    Error::Format {
        what: "checkpoint",
        detail,
    }
}

fn csv_err(e: csv::Error) -> Error {
    bad(e.to_string())
}
