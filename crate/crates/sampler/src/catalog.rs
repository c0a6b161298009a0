//! Tile catalog and scene index records, and their CSV forms.
//!
//! Catalog CSV: `tile_id,ecoregions,urban_frac,lat,lon` followed by one
//! column per land-cover class holding that class's fraction of the tile.
//! `ecoregions` is a `;`-separated id list.
//!
//! Scene index CSV: `tile_id,date,row,col,cloud_frac,water_frac,missing`,
//! one row per 256×256 block of a scene. `date` is `YYYY-DDD` and `missing`
//! holds the per-band missing fractions separated by `;`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use geomae_core::chip::{format_date, parse_date};
use geomae_core::posenc::AcqDate;

use crate::error::{invalid, Error, Result};

pub const FIRST_YEAR: i32 = 2014;
pub const LAST_YEAR: i32 = 2023;

/// Class holding bare and sparse vegetation.
pub const BARE: &str = "bare";
pub const WATER: &str = "water";

#[derive(Clone, Debug, PartialEq)]
pub struct TileRecord {
    pub tile_id: String,
    pub class_props: BTreeMap<String, f64>,
    pub ecoregions: BTreeSet<u32>,
    pub urban_frac: f64,
    pub lat: f64,
    pub lon: f64,
}

impl TileRecord {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.class_props.is_empty() || !self.class_props.values().all(|&p| in_unit(p)) {
            return Err(invalid!("tile {}: class fractions must lie in [0, 1]", self.tile_id));
        }
        let total: f64 = self.class_props.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid!("tile {}: class fractions sum to {total}", self.tile_id));
        }
        if !in_unit(self.urban_frac) {
            return Err(invalid!("tile {}: urban_frac {} outside [0, 1]", self.tile_id, self.urban_frac));
        }
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(invalid!("tile {}: centroid ({}, {}) out of range", self.tile_id, self.lat, self.lon));
        }
        Ok(())
    }

    pub fn prop(&self, class: &str) -> f64 {
        self.class_props.get(class).copied().unwrap_or(0.0)
    }
}

/// Sums every `closed_forest*` class into `closed_forest` and every
/// `open_forest*` class into `open_forest`.
pub fn merge_forest_classes(props: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for (k, &v) in props {
        let key = ["closed_forest", "open_forest"]
            .into_iter()
            .find(|p| k.starts_with(p))
            .map_or_else(|| k.clone(), str::to_string);
        *out.entry(key).or_insert(0.0) += v;
    }
    out
}

/// Quality statistics of one block of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockQa {
    pub cloud_frac: f64,
    pub water_frac: f64,
    /// One entry per band.
    pub missing_frac: Vec<f64>,
}

pub type Block = (u32, u32);

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub tile_id: String,
    pub date: AcqDate,
    pub blocks: BTreeMap<Block, BlockQa>,
}

impl SceneRecord {
    pub fn validate(&self) -> Result<()> {
        if !(FIRST_YEAR..=LAST_YEAR).contains(&self.date.year) {
            return Err(invalid!(
                "scene {} {}: year outside {FIRST_YEAR}-{LAST_YEAR}",
                self.tile_id,
                format_date(self.date)
            ));
        }
        Ok(())
    }
}

const CATALOG_FIXED: [&str; 5] = ["tile_id", "ecoregions", "urban_frac", "lat", "lon"];
const SCENE_HEADER: [&str; 7] = ["tile_id", "date", "row", "col", "cloud_frac", "water_frac", "missing"];

fn csv_bytes(what: &'static str, w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Format {
        what,
        detail: e.into_error().to_string(),
    })
}

fn fmt_err(what: &'static str) -> impl Fn(csv::Error) -> Error {
    move |e| Error::Format {
        what,
        detail: e.to_string(),
    }
}

pub fn write_catalog(path: &Path, tiles: &[TileRecord]) -> Result<()> {
    let classes: BTreeSet<&String> = tiles.iter().flat_map(|t| t.class_props.keys()).collect();
    let err = fmt_err("catalog");
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = CATALOG_FIXED.iter().copied().chain(classes.iter().map(|c| c.as_str())).collect();
    w.write_record(&header).map_err(&err)?;
    for t in tiles {
        let eco: Vec<String> = t.ecoregions.iter().map(u32::to_string).collect();
        let mut row = vec![
            t.tile_id.clone(),
            eco.join(";"),
            t.urban_frac.to_string(),
            t.lat.to_string(),
            t.lon.to_string(),
        ];
        row.extend(classes.iter().map(|c| t.prop(c).to_string()));
        w.write_record(&row).map_err(&err)?;
    }
    fs::write(path, csv_bytes("catalog", w)?).map_err(|e| Error::io(path, e))
}

pub fn read_catalog(path: &Path) -> Result<Vec<TileRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    let header = rdr.headers().map_err(fmt_err("catalog"))?.clone();
    let col = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Format {
            what: "catalog",
            detail: format!("missing column {name:?}"),
        })
    };
    let mut fixed = [0usize; 5];
    for (slot, name) in fixed.iter_mut().zip(CATALOG_FIXED) {
        *slot = col(name)?;
    }
    let [id, eco, urban, lat, lon] = fixed;
    let class_cols: Vec<(usize, String)> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| !CATALOG_FIXED.contains(h))
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    if class_cols.is_empty() {
        return Err(Error::Format {
            what: "catalog",
            detail: "no class columns".into(),
        });
    }
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let bad = |detail: String| Error::Row {
            what: "catalog",
            row,
            detail,
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |c: usize| {
            let s = rec.get(c).unwrap_or("");
            s.trim().parse::<f64>().map_err(|_| bad(format!("column {:?}: bad number {s:?}", &header[c])))
        };
        let ecoregions = match rec.get(eco).unwrap_or("").trim() {
            "" => BTreeSet::new(),
            s => s
                .split(';')
                .map(|e| e.trim().parse::<u32>().map_err(|_| bad(format!("bad ecoregion id {e:?}"))))
                .collect::<Result<_>>()?,
        };
        let class_props = class_cols
            .iter()
            .map(|(c, name)| Ok((name.clone(), num(*c)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let t = TileRecord {
            tile_id: rec.get(id).unwrap_or("").to_string(),
            class_props,
            ecoregions,
            urban_frac: num(urban)?,
            lat: num(lat)?,
            lon: num(lon)?,
        };
        if t.tile_id.is_empty() || !seen.insert(t.tile_id.clone()) {
            return Err(bad(format!("empty or duplicate tile id {:?}", t.tile_id)));
        }
        t.validate().map_err(|e| bad(e.to_string()))?;
        out.push(t);
    }
    Ok(out)
}

pub fn write_scenes(path: &Path, scenes: &[SceneRecord]) -> Result<()> {
    let err = fmt_err("scene index");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SCENE_HEADER).map_err(&err)?;
    for s in scenes {
        for (&(r, c), qa) in &s.blocks {
            let missing: Vec<String> = qa.missing_frac.iter().map(f64::to_string).collect();
            w.write_record([
                s.tile_id.as_str(),
                &format_date(s.date),
                &r.to_string(),
                &c.to_string(),
                &qa.cloud_frac.to_string(),
                &qa.water_frac.to_string(),
                &missing.join(";"),
            ])
            .map_err(&err)?;
        }
    }
    fs::write(path, csv_bytes("scene index", w)?).map_err(|e| Error::io(path, e))
}

/// Rows grouped into scenes, sorted by tile then date.
pub fn read_scenes(path: &Path) -> Result<Vec<SceneRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    let header = rdr.headers().map_err(fmt_err("scene index"))?;
    if header.iter().ne(SCENE_HEADER) {
        return Err(Error::Format {
            what: "scene index",
            detail: format!("header must be {}", SCENE_HEADER.join(",")),
        });
    }
    let mut scenes: BTreeMap<(String, AcqDate), SceneRecord> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let bad = |detail: String| Error::Row {
            what: "scene index",
            row,
            detail,
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let frac = |k: usize| {
            let v: f64 = rec[k].trim().parse().map_err(|_| bad(format!("bad fraction {:?}", &rec[k])))?;
            if (0.0..=1.0).contains(&v) {
                Ok(v)
            } else {
                Err(bad(format!("fraction {v} outside [0, 1]")))
            }
        };
        let int = |k: usize| rec[k].trim().parse::<u32>().map_err(|_| bad(format!("bad block index {:?}", &rec[k])));
        let date = parse_date(&rec[1]).map_err(|e| bad(e.to_string()))?;
        let missing = rec[6]
            .split(';')
            .map(|s| {
                let v: f64 = s.trim().parse().map_err(|_| bad(format!("bad missing fraction {s:?}")))?;
                if (0.0..=1.0).contains(&v) {
                    Ok(v)
                } else {
                    Err(bad(format!("fraction {v} outside [0, 1]")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let qa = BlockQa {
            cloud_frac: frac(4)?,
            water_frac: frac(5)?,
            missing_frac: missing,
        };
        let block = (int(2)?, int(3)?);
        let scene = scenes.entry((rec[0].to_string(), date)).or_insert_with(|| SceneRecord {
            tile_id: rec[0].to_string(),
            date,
            blocks: BTreeMap::new(),
        });
        scene.validate().map_err(|e| bad(e.to_string()))?;
        if scene.blocks.insert(block, qa).is_some() {
            return Err(bad(format!("block {block:?} listed twice")));
        }
    }
    Ok(scenes.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile(id: &str) -> TileRecord {
        TileRecord {
            tile_id: id.into(),
            class_props: [("bare".to_string(), 0.25), ("cropland".to_string(), 0.75)].into(),
            ecoregions: [3, 17].into(),
            urban_frac: 0.1,
            lat: 12.5,
            lon: -70.0,
        }
    }

    #[test]
    fn catalog_round_trip_and_row_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("catalog.csv");
        let mut b = tile("T2");
        b.class_props = [("water".to_string(), 1.0)].into();
        b.ecoregions.clear();
        write_catalog(&p, &[tile("T1"), b.clone()]).unwrap();
        let back = read_catalog(&p).unwrap();
        assert_eq!(back[0], {
            let mut t = tile("T1");
            t.class_props.insert("water".into(), 0.0);
            t
        });
        assert_eq!(back[1].ecoregions, BTreeSet::new());
        assert_eq!(back[1].prop("water"), 1.0);

        fs::write(&p, "tile_id,ecoregions,urban_frac,lat,lon,a,b\nX,1,0,0,0,0.5,0.5\nY,1,0,0,0,0.5,0.6\n").unwrap();
        let e = read_catalog(&p).unwrap_err().to_string();
        assert!(e.contains("row 3"), "{e}");
    }

    #[test]
    fn scene_rows_group_into_scenes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scenes.csv");
        fs::write(
            &p,
            "tile_id,date,row,col,cloud_frac,water_frac,missing\n\
             T1,2020-032,0,1,0.1,0,0;0\n\
             T1,2020-001,0,0,0.5,0.2,0.01;0\n\
             T1,2020-032,0,0,0,0,0;0\n",
        )
        .unwrap();
        let s = read_scenes(&p).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].date, AcqDate::new(2020, 1).unwrap());
        assert_eq!(s[1].blocks.len(), 2);
        let p2 = dir.path().join("again.csv");
        write_scenes(&p2, &s).unwrap();
        assert_eq!(read_scenes(&p2).unwrap(), s);

        fs::write(&p, "tile_id,date,row,col,cloud_frac,water_frac,missing\nT1,2011-001,0,0,0,0,0\n").unwrap();
        assert!(read_scenes(&p).unwrap_err().to_string().contains("row 2"));
    }

    #[test]
    fn forest_classes_merge() {
        let m = merge_forest_classes(
            &[
                ("closed_forest_evergreen".to_string(), 0.2),
                ("closed_forest_deciduous".to_string(), 0.1),
                ("open_forest_mixed".to_string(), 0.3),
                ("urban".to_string(), 0.4),
            ]
            .into(),
        );
        assert_eq!(m.len(), 3);
        assert!((m["closed_forest"] - 0.3).abs() < 1e-15);
        assert_eq!(m["open_forest"], 0.3);
    }
}
