//! Append-only results registry and the markdown summary built from it.
//!
//! Registry CSV columns: `experiment,kind,id,seed,lr,weight_decay,
//! decoder_depth,metric,value,status,error,wall_secs`. `kind` is `search`
//! or `repeat`; `value` is empty for failed rows. `wall_secs` is the only
//! column that varies between identical reruns.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::protocol::{cross_dataset_mean, HParams, RunAggregate, SearchResult};

const HEADER: [&str; 12] = [
    "experiment",
    "kind",
    "id",
    "seed",
    "lr",
    "weight_decay",
    "decoder_depth",
    "metric",
    "value",
    "status",
    "error",
    "wall_secs",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RegistryRow {
    pub experiment: String,
    pub kind: String,
    pub id: usize,
    pub seed: u64,
    pub params: HParams,
    pub metric: String,
    pub value: Option<f64>,
    pub error: String,
    pub wall_secs: f64,
}

pub fn search_rows(experiment: &str, metric: &str, seed: u64, r: &SearchResult) -> Vec<RegistryRow> {
    r.trials
        .iter()
        .map(|t| RegistryRow {
            experiment: experiment.into(),
            kind: "search".into(),
            id: t.id,
            seed,
            params: t.params.clone(),
            metric: metric.into(),
            value: t.outcome.as_ref().ok().copied(),
            error: t.outcome.as_ref().err().cloned().unwrap_or_default(),
            wall_secs: t.wall_secs,
        })
        .collect()
}

pub fn repeat_rows(experiment: &str, metric: &str, params: &HParams, agg: &RunAggregate) -> Vec<RegistryRow> {
    agg.runs
        .iter()
        .enumerate()
        .map(|(id, r)| RegistryRow {
            experiment: experiment.into(),
            kind: "repeat".into(),
            id,
            seed: r.seed,
            params: params.clone(),
            metric: metric.into(),
            value: r.outcome.as_ref().ok().copied(),
            error: r.outcome.as_ref().err().cloned().unwrap_or_default(),
            wall_secs: r.wall_secs,
        })
        .collect()
}

pub struct Registry {
    path: PathBuf,
}

impl Registry {
    /// Creates the file with its header if absent, and otherwise checks the
    /// header of the existing file.
    pub fn open(path: &Path) -> Result<Self> {
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let first = text.lines().next().unwrap_or("");
            if first != HEADER.join(",") {
                return Err(Error::Format {
                    what: "registry",
                    detail: format!("{}: unexpected header {first:?}", path.display()),
                });
            }
        } else {
            fs::write(path, format!("{}\n", HEADER.join(","))).map_err(|e| Error::io(path, e))?;
        }
        Ok(Registry { path: path.to_path_buf() })
    }

    pub fn append(&self, rows: &[RegistryRow]) -> Result<()> {
        let fmt = |e: csv::Error| Error::Format {
            what: "registry",
            detail: e.to_string(),
        };
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for r in rows {
            w.write_record([
                r.experiment.clone(),
                r.kind.clone(),
                r.id.to_string(),
                r.seed.to_string(),
                r.params.lr.to_string(),
                r.params.weight_decay.to_string(),
                r.params.decoder_depth.to_string(),
                r.metric.clone(),
                r.value.map(|v| v.to_string()).unwrap_or_default(),
                if r.value.is_some() { "ok" } else { "failed" }.to_string(),
                r.error.clone(),
                format!("{:.3}", r.wall_secs),
            ])
            .map_err(fmt)?;
        }
        let bytes = w.into_inner().map_err(|e| fmt(csv::Error::from(e.into_error())))?;
        let mut f = OpenOptions::new().append(true).open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&self.path, e))
    }

    pub fn read(&self) -> Result<Vec<RegistryRow>> {
        read_registry(&self.path)
    }
}

pub fn read_registry(path: &Path) -> Result<Vec<RegistryRow>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let bad = |detail: String| Error::Format {
            what: "registry",
            detail: format!("row {}: {detail}", i + 2),
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != HEADER.len() {
            return Err(bad(format!("expected {} columns", HEADER.len())));
        }
        fn num<T: std::str::FromStr>(s: &str, bad: &dyn Fn(String) -> Error) -> Result<T> {
            s.parse().map_err(|_| bad(format!("bad number {s:?}")))
        }
        out.push(RegistryRow {
            experiment: rec[0].into(),
            kind: rec[1].into(),
            id: num(&rec[2], &bad)?,
            seed: num(&rec[3], &bad)?,
            params: HParams {
                lr: num(&rec[4], &bad)?,
                weight_decay: num(&rec[5], &bad)?,
                decoder_depth: num(&rec[6], &bad)?,
            },
            metric: rec[7].into(),
            value: if rec[8].is_empty() { None } else { Some(num(&rec[8], &bad)?) },
            error: rec[10].into(),
            wall_secs: num(&rec[11], &bad)?,
        });
    }
    Ok(out)
}

pub struct ReportEntry<'a> {
    pub dataset: &'a str,
    pub metric: &'a str,
    pub params: &'a HParams,
    pub aggregate: &'a RunAggregate,
}

/// Markdown table of per-dataset results. When every mean lies in
/// `[0, 1]` a final row gives their unweighted mean.
pub fn markdown_report(entries: &[ReportEntry]) -> String {
    let mut s = String::from("| dataset | metric | runs | mean | std | lr | weight decay | decoder depth | notes |\n");
    s.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for e in entries {
        let a = e.aggregate;
        let mut notes = Vec::new();
        if !a.std_defined {
            notes.push("single run, std not defined".to_string());
        }
        if a.partial {
            notes.push(format!("{} failed runs", a.failures().count()));
        }
        s.push_str(&format!(
            "| {} | {} | {} | {:.4} | {:.4} | {:.2e} | {:.2e} | {} | {} |\n",
            e.dataset,
            e.metric,
            a.scores().len(),
            a.mean,
            a.std,
            e.params.lr,
            e.params.weight_decay,
            e.params.decoder_depth,
            notes.join("; ")
        ));
    }
    let means: Vec<(String, f64)> = entries.iter().map(|e| (e.dataset.to_string(), e.aggregate.mean)).collect();
    if let Ok(m) = cross_dataset_mean(&means) {
        s.push_str(&format!("| **mean over datasets** | | | {m:.4} | | | | | |\n"));
    }
    s
}
