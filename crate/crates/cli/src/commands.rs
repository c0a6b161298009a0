//! One function per subcommand. Each takes the resolved config and writes
//! its artifacts under the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use geomae_bench::protocol::{hparam_search, repeat_eval, HParams, RandomSearch, SearchSpace};
use geomae_bench::registry::{markdown_report, repeat_rows, search_rows, Registry, ReportEntry};
use geomae_core::autograd::Graph;
use geomae_core::checkpoint::Checkpoint;
use geomae_core::chip::{write_chip, write_manifest, ChipRecord, DType};
use geomae_core::data::{stack, ChipSource, ManifestChips, SyntheticChips};
use geomae_core::finetune::{encoder_config_from_meta, write_task_manifest, FineTuneModel, LabeledSample, Target, TargetKind, TaskRecord};
use geomae_core::mae::{Encoder, Mae};
use geomae_core::seed::{indexed_seed, rng_for, sub_seed};
use geomae_core::trainer::{train, ChannelStats, PretrainObjective, Preprocess, TrainState};
use geomae_core::Tensor;
use geomae_sampler::catalog::{read_catalog, read_scenes, write_catalog, write_scenes};
use geomae_sampler::patches::write_patches;
use geomae_sampler::pipeline::{build_dataset, save_dataset, PipelineConfig};
use geomae_sampler::synth::{synth_catalog, SynthConfig};
use geomae_sampler::verify::verify;

use crate::config::{ExperimentConfig, Task};
use crate::exit::{CliError, Result};
use crate::tasks::{evaluate, fine_tune, finetune_config, head_depth, load_task_data, synthetic_splits, Evaluation};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

/// The config as run, minus the output directory it is saved into.
fn save_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let mut c = cfg.clone();
    c.out = None;
    write_file(&dir.join("config.toml"), c.to_toml())
}

/// Accepts either a run directory or the checkpoint directory inside it.
pub fn resolve_checkpoint(path: &Path) -> PathBuf {
    let inner = path.join("checkpoint");
    if inner.is_dir() {
        inner
    } else {
        path.to_path_buf()
    }
}

fn load_checkpoint(cfg: &ExperimentConfig) -> Result<Checkpoint> {
    let path = cfg
        .checkpoint
        .as_deref()
        .ok_or_else(|| CliError::config("no checkpoint: set `checkpoint` in the config"))?;
    if !path.exists() {
        return Err(CliError::config(format!("checkpoint not found: {}", path.display())));
    }
    Checkpoint::load(&resolve_checkpoint(path)).map_err(|e| CliError::from(e).context("checkpoint"))
}

/// Chips from the configured manifest, or the synthetic generator.
fn chip_source(cfg: &ExperimentConfig) -> Result<Box<dyn ChipSource>> {
    cfg.check_manifests()?;
    match &cfg.data.manifest {
        Some(m) => {
            let src = ManifestChips::open(m)?;
            if src.is_empty() {
                return Err(CliError::data(format!("{}: no chips", m.display())));
            }
            Ok(Box::new(src))
        }
        None => {
            let s = &cfg.data.synthetic;
            Ok(Box::new(SyntheticChips::new(s.count, s.frames, s.channels, s.size, sub_seed(cfg.seed, "data"))))
        }
    }
}

pub fn pretrain(cfg: &ExperimentConfig) -> Result<TrainState> {
    if cfg.task != Task::Pretrain {
        return Err(CliError::config(format!("pretrain needs task = \"pretrain\", got {:?}", cfg.task)));
    }
    let out = cfg.out_dir()?;
    let source = chip_source(cfg)?;
    let mae_cfg = cfg.model.mae_config()?;
    let channels = source.chip(0)?.values.shape()[1];
    if channels != mae_cfg.encoder.channels {
        return Err(CliError::config(format!(
            "model expects {} channels but the data has {channels}",
            mae_cfg.encoder.channels
        )));
    }
    let lc = cfg.schedule.loop_config(cfg.seed)?;
    let prep = Preprocess {
        crop: cfg.pretrain.crop.map(|[h, w]| (h, w)),
        flip: cfg.pretrain.flip,
        norm: Some(ChannelStats::estimate(source.as_ref(), cfg.data.stats_chips)?),
    };
    let mut obj = PretrainObjective {
        model: Mae::new(mae_cfg, &mut rng_for(cfg.seed, "init"))?,
        source: source.as_ref(),
        settings: cfg.pretrain_settings()?,
        prep,
        seed: cfg.seed,
    };
    create_dir(out)?;
    save_config(cfg, out)?;
    let state = TrainState::fresh(&obj, &lc)?;
    let state = train(&mut obj, &lc, state, Some(out))?;
    if let (Some(a), Some(b)) = (state.trace.first(), state.trace.last()) {
        log::info!("{} steps, loss {:.4} -> {:.4}", state.step, a.loss, b.loss);
    }
    Ok(state)
}

pub fn finetune(cfg: &ExperimentConfig) -> Result<Option<Evaluation>> {
    let out = cfg.out_dir()?;
    let data = load_task_data(cfg)?;
    create_dir(out)?;
    save_config(cfg, out)?;
    let t = fine_tune(cfg, &data, None, cfg.seed, Some(out))?;
    let Some(test) = &data.test else {
        log::info!("no test split; skipping evaluation");
        return Ok(None);
    };
    let e = evaluate(&t.model, t.norm.as_ref(), test.as_ref(), cfg.finetune.eval_batch)?;
    write_file(&out.join("metrics.csv"), e.to_csv())?;
    let (k, v) = e.primary();
    log::info!("test {k} {v:.4}");
    Ok(Some(e))
}

pub fn eval(cfg: &ExperimentConfig) -> Result<Evaluation> {
    let out = cfg.out_dir()?;
    let ck = load_checkpoint(cfg)?;
    let model = FineTuneModel::from_checkpoint(&ck)?;
    let want = cfg.head()?.target();
    if model.cfg.head.target() != want {
        return Err(CliError::config(format!(
            "checkpoint has a {} head, which does not fit task {:?}",
            model.cfg.head.name(),
            cfg.task
        )));
    }
    let norm = ChannelStats::from_meta(&ck.meta)?;
    let data = load_task_data(cfg)?;
    let source = data
        .test
        .ok_or_else(|| CliError::config("eval needs a test split: set data.test_manifest or data.test_fraction"))?;
    let e = evaluate(&model, norm.as_ref(), source.as_ref(), cfg.finetune.eval_batch)?;
    create_dir(out)?;
    write_file(&out.join("metrics.csv"), e.to_csv())?;
    Ok(e)
}

fn primary_metric(kind: TargetKind) -> &'static str {
    match kind {
        TargetKind::Class => "overall_acc",
        TargetKind::Mask => "miou",
        TargetKind::Value => "r2",
    }
}

pub struct BenchmarkOutcome {
    pub search: geomae_bench::protocol::SearchResult,
    pub best: HParams,
    pub aggregate: geomae_bench::protocol::RunAggregate,
}

/// Search scores on validation; the chosen setting is then retrained with
/// seeds `seed..seed + repeats` and scored on test. Batch size stays as
/// configured.
pub fn benchmark(cfg: &ExperimentConfig) -> Result<BenchmarkOutcome> {
    let out = cfg.out_dir()?;
    let b = &cfg.benchmark;
    let data = load_task_data(cfg)?;
    let val = data
        .val
        .as_deref()
        .ok_or_else(|| CliError::config("benchmark needs a validation split"))?;
    let test = data
        .test
        .as_deref()
        .ok_or_else(|| CliError::config("benchmark needs a test split"))?;
    let ft = finetune_config(cfg, &data)?;
    let depth = head_depth(&ft)?;
    let depths = b.decoder_depth.clone().unwrap_or_else(|| vec![depth]);
    if let Some(d) = depths.iter().find(|&&d| d != depth) {
        return Err(CliError::config(format!(
            "benchmark.decoder_depth {d}: head {} is built with depth {depth}",
            ft.head.name()
        )));
    }
    let space = SearchSpace {
        lr: (b.lr[0], b.lr[1]),
        weight_decay: (b.weight_decay[0], b.weight_decay[1]),
        decoder_depth: depths,
    };
    let metric = primary_metric(ft.head.target());
    let score = |hp: &HParams, seed: u64, on: &dyn geomae_core::finetune::LabeledSource| -> Result<f64> {
        let t = fine_tune(cfg, &data, Some(hp), seed, None)?;
        Ok(evaluate(&t.model, t.norm.as_ref(), on, cfg.finetune.eval_batch)?.primary().1)
    };
    create_dir(out)?;
    save_config(cfg, out)?;
    let registry = Registry::open(&out.join("registry.csv"))?;

    let mut strategy = RandomSearch::new(sub_seed(cfg.seed, "search"));
    let search = hparam_search(
        |id, hp| {
            let r = score(hp, indexed_seed(cfg.seed, "trial", id as u64), val).map_err(|e| e.message);
            log::info!("trial {id} lr {:.2e} wd {:.2e}: {r:?}", hp.lr, hp.weight_decay);
            r
        },
        &space,
        b.budget,
        &mut strategy,
    )?;
    registry.append(&search_rows(&b.dataset, metric, cfg.seed, &search))?;
    let best = search
        .best_trial()
        .ok_or_else(|| CliError::numeric("every search trial failed"))?
        .params
        .clone();

    let aggregate = repeat_eval(
        |seed| {
            let r = score(&best, seed, test).map_err(|e| e.message);
            log::info!("repeat seed {seed}: {r:?}");
            r
        },
        cfg.seed,
        b.repeats,
    )?;
    registry.append(&repeat_rows(&b.dataset, metric, &best, &aggregate))?;
    let report = markdown_report(&[ReportEntry {
        dataset: &b.dataset,
        metric,
        params: &best,
        aggregate: &aggregate,
    }]);
    write_file(&out.join("report.md"), report)?;
    log::info!("{} {metric} {:.4} ± {:.4}", b.dataset, aggregate.mean, aggregate.std);
    Ok(BenchmarkOutcome { search, best, aggregate })
}

/// One row of `embeddings.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub index: usize,
    pub file: String,
    pub tokens: usize,
    pub dim: usize,
    pub grid: (usize, usize, usize),
}

/// Latents of the full token grid, one `[L, D]` f64 chip per input chip.
pub fn embed(cfg: &ExperimentConfig, limit: Option<usize>) -> Result<Vec<EmbeddingRecord>> {
    let out = cfg.out_dir()?;
    let ck = load_checkpoint(cfg)?;
    let enc_cfg = encoder_config_from_meta(&ck)?;
    let want = cfg.model.mae_config()?.encoder;
    if let Some(d) = crate::tasks::encoder_mismatch(&enc_cfg, &want) {
        return Err(CliError::config(format!("checkpoint does not match the model config: {d}")));
    }
    let encoder = Encoder::bind(enc_cfg, &ck.tensors)?;
    let norm = ChannelStats::from_meta(&ck.meta)?;
    let source = chip_source(cfg)?;
    let n = limit.map_or(source.len(), |l| l.min(source.len()));
    create_dir(&out.join("embeddings"))?;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut chip = source.chip(i)?;
        if chip.values.shape()[1] != enc_cfg.channels {
            return Err(CliError::config(format!(
                "chip {i} has {} channels, the checkpoint expects {}",
                chip.values.shape()[1],
                enc_cfg.channels
            )));
        }
        if let Some(n) = &norm {
            n.apply(&mut chip.values)?;
        }
        let batch = stack(&[chip])?;
        let mut g = Graph::new();
        let (z, grid) = encoder.encode_all(&mut g, &ck.tensors, &batch)?;
        let s = g.shape(z).to_vec();
        let latent = g.value(z).clone().reshape(&[s[1], s[2]])?;
        let file = format!("embeddings/{i:05}.chip");
        write_chip(&out.join(&file), &latent, DType::F64)?;
        rows.push(EmbeddingRecord {
            index: i,
            file,
            tokens: s[1],
            dim: s[2],
            grid,
        });
    }
    let mut csv = String::from("index,file,tokens,dim,grid\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}x{}x{}\n",
            r.index, r.file, r.tokens, r.dim, r.grid.0, r.grid.1, r.grid.2
        ));
    }
    write_file(&out.join("embeddings.csv"), csv)?;
    Ok(rows)
}

/// Runs the sampler end to end. Returns whether the verifier passed.
pub fn sample_dataset(cfg: &ExperimentConfig, catalog: &Path, scenes: &Path) -> Result<bool> {
    let out = cfg.out_dir()?;
    for p in [catalog, scenes] {
        if !p.is_file() {
            return Err(CliError::config(format!("manifest not found: {}", p.display())));
        }
    }
    let tiles = read_catalog(catalog)?;
    let scene_rows = read_scenes(scenes)?;
    create_dir(out)?;
    if scene_rows.is_empty() {
        log::warn!("{}: no scenes; writing an empty dataset", scenes.display());
        write_patches(&out.join("patches.csv"), &[])?;
        return Ok(true);
    }
    let pc = PipelineConfig::default();
    let ds = build_dataset(&tiles, &scene_rows, &pc, sub_seed(cfg.seed, "sample"))?;
    save_dataset(out, &tiles, &ds)?;
    let report = verify(&ds, &pc);
    write_file(&out.join("verify.txt"), report.to_string())?;
    let c = &ds.counts;
    log::info!(
        "{} patches from {} candidates ({} missing, {} cloud, {} homogeneous, {} capped)",
        ds.records.len(),
        c.candidates,
        c.rejected_missing,
        c.rejected_cloud,
        c.dropped_homogeneous,
        c.dropped_cap
    );
    Ok(report.passed())
}

pub fn synth_catalog_cmd(cfg: &ExperimentConfig, tiles: usize, scenes: usize) -> Result<()> {
    let out = cfg.out_dir()?;
    let sc = SynthConfig {
        tiles,
        scenes,
        ..SynthConfig::default()
    };
    let (t, s) = synth_catalog(&sc, sub_seed(cfg.seed, "catalog"))?;
    create_dir(out)?;
    write_catalog(&out.join("catalog.csv"), &t)?;
    write_scenes(&out.join("scenes.csv"), &s)?;
    Ok(())
}

/// Chips are stored as f32, which is what real reflectance products carry.
pub fn synth_chips(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = cfg.out_dir()?;
    let s = &cfg.data.synthetic;
    let chips = SyntheticChips::new(s.count, s.frames, s.channels, s.size, sub_seed(cfg.seed, "data"));
    create_dir(&out.join("chips"))?;
    let mut records = Vec::with_capacity(chips.len());
    for i in 0..chips.len() {
        let c = chips.chip(i)?;
        let file = PathBuf::from(format!("chips/{i:05}.chip"));
        write_chip(&out.join(&file), &c.values, DType::F32)?;
        records.push(ChipRecord { file, meta: c.meta });
    }
    let manifest = out.join("manifest.csv");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

/// Writes `{train,val,test}.csv` task manifests with their chips, label
/// chips and auxiliary grids.
pub fn synth_task(cfg: &ExperimentConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let (train, val, test) = synthetic_splits(cfg)?;
    for dir in ["chips", "labels", "aux"] {
        create_dir(&out.join(dir))?;
    }
    let mut next = 0usize;
    for (name, samples) in [("train", train), ("val", val), ("test", test)] {
        let mut records = Vec::with_capacity(samples.len());
        for s in samples {
            records.push(write_sample(out, next, s)?);
            next += 1;
        }
        write_task_manifest(&out.join(format!("{name}.csv")), &records)?;
    }
    Ok(())
}

fn write_sample(out: &Path, i: usize, s: LabeledSample) -> Result<TaskRecord> {
    let file = PathBuf::from(format!("chips/{i:05}.chip"));
    write_chip(&out.join(&file), &s.chip.values, DType::F32)?;
    let target = match s.target {
        Target::Class(c) => c.to_string(),
        Target::Value(v) => v.to_string(),
        Target::Mask(m) => {
            let sh = s.chip.values.shape();
            let labels = Tensor::from_vec(&[sh[2], sh[3]], m.iter().map(|&v| v as f64).collect())?;
            let name = format!("labels/{i:05}.chip");
            write_chip(&out.join(&name), &labels, DType::F32)?;
            name
        }
    };
    let aux = match &s.aux {
        Some(a) => {
            let name = PathBuf::from(format!("aux/{i:05}.chip"));
            write_chip(&out.join(&name), a, DType::F64)?;
            Some(name)
        }
        None => None,
    };
    Ok(TaskRecord {
        input: ChipRecord { file, meta: s.chip.meta },
        target,
        aux,
    })
}
