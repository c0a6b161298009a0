use std::collections::BTreeMap;
use std::time::Instant;

use geomae_sampler::catalog::{merge_forest_classes, read_catalog, read_scenes, write_catalog, write_scenes, TileRecord};
use geomae_sampler::patches::read_patches;
use geomae_sampler::pipeline::{build_dataset, save_dataset, PipelineConfig};
use geomae_sampler::select::{lulc_entropy, Reason};
use geomae_sampler::synth::{synth_catalog, SynthConfig};
use geomae_sampler::verify::verify;
use proptest::prelude::*;

#[test]
fn full_synthetic_catalog_passes_every_check() {
    let t0 = Instant::now();
    let (catalog, scenes) = synth_catalog(&SynthConfig::default(), 11).unwrap();
    let cfg = PipelineConfig::default();
    let ds = build_dataset(&catalog, &scenes, &cfg, 11).unwrap();
    let report = verify(&ds, &cfg);
    println!("{report}{:?}\n{} records, {:.1?}", ds.counts, ds.records.len(), t0.elapsed());
    assert!(report.passed());
    assert!(ds.counts.rejected_cloud > 0 && ds.counts.rejected_missing > 0);
    assert!(ds.counts.dropped_homogeneous > 0 && ds.counts.dropped_cap > 0);
    assert!(!ds.selection.val.is_empty());

    // Per-class picks come from that class's 500 highest-fraction tiles,
    // ranked here by a plain sort over the merged catalog.
    let merged: Vec<TileRecord> = catalog
        .iter()
        .map(|t| TileRecord { class_props: merge_forest_classes(&t.class_props), ..t.clone() })
        .collect();
    let mut checked = 0;
    for (tile, reasons) in &ds.selection.reasons {
        for r in reasons {
            if let Reason::Class(c) = r {
                let mine = merged.iter().find(|t| &t.tile_id == tile).unwrap().prop(c);
                let better = merged.iter().filter(|t| t.prop(c) > mine).count();
                assert!(mine > 0.0 && better < 500, "{tile} for {c}: {better} tiles rank higher");
                checked += 1;
            }
        }
    }
    assert!(checked > 500);

    // Every ecoregion with at least three catalog tiles has at least three
    // selected tiles.
    let mut avail: BTreeMap<u32, usize> = BTreeMap::new();
    let mut chosen: BTreeMap<u32, usize> = BTreeMap::new();
    for t in &catalog {
        for &e in &t.ecoregions {
            *avail.entry(e).or_default() += 1;
            if ds.selection.reasons.contains_key(&t.tile_id) {
                *chosen.entry(e).or_default() += 1;
            }
        }
    }
    for (e, n) in avail {
        if n >= 3 {
            assert!(chosen.get(&e).copied().unwrap_or(0) >= 3, "ecoregion {e}");
        }
    }
    assert!(ds.selection.reasons.values().any(|r| r.iter().any(|x| matches!(x, Reason::Ecoregion(_)))));

    let again = build_dataset(&catalog, &scenes, &cfg, 11).unwrap();
    assert_eq!(again, ds);
}

#[test]
fn files_round_trip_through_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig { tiles: 120, ..SynthConfig::default() };
    let (catalog, scenes) = synth_catalog(&synth, 2).unwrap();
    write_catalog(&dir.path().join("catalog.csv"), &catalog).unwrap();
    write_scenes(&dir.path().join("scenes.csv"), &scenes).unwrap();
    let catalog = read_catalog(&dir.path().join("catalog.csv")).unwrap();
    let scenes = read_scenes(&dir.path().join("scenes.csv")).unwrap();
    let cfg = PipelineConfig::default();
    let ds = build_dataset(&catalog, &scenes, &cfg, 2).unwrap();
    assert!(verify(&ds, &cfg).passed());
    save_dataset(&dir.path().join("out"), &catalog, &ds).unwrap();
    let back = read_patches(&dir.path().join("out/patches.csv")).unwrap();
    assert_eq!(back.len(), ds.records.len());
    assert!(back.iter().zip(&ds.records).all(|(a, b)| a.area == b.area && a.dates == b.dates));
    let tiles = std::fs::read_to_string(dir.path().join("out/tiles.csv")).unwrap();
    assert_eq!(tiles.lines().count(), ds.sequences.len() + 1);
}

#[test]
fn verifier_flags_broken_datasets() {
    let synth = SynthConfig { tiles: 60, ..SynthConfig::default() };
    let (catalog, scenes) = synth_catalog(&synth, 3).unwrap();
    let cfg = PipelineConfig::default();
    let ds = build_dataset(&catalog, &scenes, &cfg, 3).unwrap();
    assert!(verify(&ds, &cfg).passed());

    let mut cloudy = ds.clone();
    cloudy.records[0].qa[1].cloud_frac = 0.5;
    let r = verify(&cloudy, &cfg);
    assert_eq!(r.failures().map(|c| c.name).collect::<Vec<_>>(), ["cloud <= 20%"]);

    let mut gap = ds.clone();
    gap.records[0].dates[3] = geomae_core::posenc::AcqDate::new(gap.records[0].dates[2].year + 1, 1).unwrap();
    assert!(!verify(&gap, &cfg).passed());

    let mut crowded = ds.clone();
    let first = crowded.records[0].clone();
    crowded.records.extend(std::iter::repeat_n(first, 11));
    assert!(verify(&crowded, &cfg).failures().any(|c| c.name == "per-area caps"));
}

fn distribution() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..1.0, 2..12).prop_filter_map("nonzero", |w| {
        let s: f64 = w.iter().sum();
        (s > 1e-6).then(|| w.iter().map(|x| x / s).collect())
    })
}

proptest! {
    #[test]
    fn entropy_is_maximal_only_at_uniform(p in distribution()) {
        let k = p.len() as f64;
        let h = lulc_entropy(&p);
        prop_assert!(h >= 0.0);
        prop_assert!(h <= k.ln() + 1e-12);
        let spread = p.iter().fold(0.0f64, |m, &x| m.max((x - 1.0 / k).abs()));
        if spread > 1e-3 {
            prop_assert!(h < k.ln() - 1e-9);
        }
    }
}
