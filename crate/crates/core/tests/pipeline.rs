use std::fs;
use std::path::Path;

use hptscreen_core::dataset::{self, ClassLabel};
use hptscreen_core::error::Error;
use hptscreen_core::pipeline::{self, ExportFormat, PipelineConfig, Stage};

fn corpus(dir: &Path) -> PipelineConfig {
    let mut manifest = String::from("@trim_prefix_hpt,300\n");
    for r in 0..4 {
        let label = if r < 2 { ClassLabel::Hpt } else { ClassLabel::Normal };
        let hz = if label == ClassLabel::Hpt { 2.5 } else { 7.0 };
        let x: Vec<f64> = (0..3300)
            .map(|i| (2.0 * std::f64::consts::PI * hz * i as f64 / 128.0 + r as f64).sin())
            .collect();
        let name = format!("r{r}.txt");
        dataset::write_text_samples(&dir.join(&name), &x).unwrap();
        manifest.push_str(&format!("{name},r{r},{label}\n"));
    }
    fs::write(dir.join("m.csv"), manifest).unwrap();
    let mut cfg = PipelineConfig::new(dir.join("m.csv"), dir.join("out"));
    cfg.workers = Some(2);
    cfg.segment.segment_len = 1000;
    cfg.features.apen_max_samples = Some(200);
    cfg.eval.k_folds = 2;
    cfg
}

#[test]
fn dumps_and_exports_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = corpus(dir.path());
    cfg.output.dump_segments = true;
    cfg.output.dump_imfs = true;
    cfg.output.export_denoised = Some(ExportFormat::Text);
    for stage in [Stage::Ingest, Stage::Denoise, Stage::Segment, Stage::Features] {
        pipeline::run_stage(stage, &cfg).unwrap();
    }
    let out = dir.path().join("out");
    let segs = pipeline::read_dump(&out.join("segment/segments.bin")).unwrap();
    // HPT: (3300 - 300) / 1000 = 3 each, Normal: 3 each
    assert_eq!(segs.len(), 12);
    assert!(segs.iter().all(|e| e.series.len() == 1 && e.series[0].len() == 1000));

    let imfs = pipeline::read_dump(&out.join("features/imfs.bin")).unwrap();
    assert_eq!(imfs.len(), 12);
    for (seg, dec) in segs.iter().zip(&imfs) {
        assert_eq!((&seg.record_id, seg.offset), (&dec.record_id, dec.offset));
        assert_eq!(dec.series.len(), 6);
        for i in 0..1000 {
            let sum: f64 = dec.series.iter().map(|s| s[i]).sum();
            assert!((sum - seg.series[0][i]).abs() < 1e-9);
        }
    }

    let (_, label, clean) = pipeline::read_signal(&out.join("denoise/0000_r0.sig")).unwrap();
    assert_eq!((label, clean.len()), (ClassLabel::Hpt, 3000));
    let exported = dataset::load_record(
        &out.join("denoise/export/r0.txt"),
        "r0",
        label,
        dataset::SampleFormat::Text,
    )
    .unwrap();
    assert_eq!(exported.samples, clean);
}

#[test]
fn config_change_invalidates_downstream_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = corpus(dir.path());
    let (first, _) = pipeline::run_all(&cfg).unwrap();
    assert!(first.iter().all(|o| !o.cached));
    cfg.eval.shuffle_seed = 9;
    let (second, report) = pipeline::run_all(&cfg).unwrap();
    let cached: Vec<bool> = second.iter().map(|o| o.cached).collect();
    assert_eq!(cached, [true, true, true, true, true, false]);
    assert!(report.config.contains("shuffle_seed = 9"));
    assert_eq!(report.segments_per_class["HPT"], 6);
}

#[test]
fn tampered_output_is_rebuilt() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = corpus(dir.path());
    pipeline::run_stage(Stage::Ingest, &cfg).unwrap();
    pipeline::run_stage(Stage::Denoise, &cfg).unwrap();
    let idx = dir.path().join("out/denoise/index.csv");
    fs::write(&idx, "garbage").unwrap();
    assert!(!pipeline::run_stage(Stage::Denoise, &cfg).unwrap().cached);
    assert!(fs::read_to_string(&idx).unwrap().starts_with("# hptscreen-denoised"));
}

#[test]
fn stage_without_upstream_names_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = corpus(dir.path());
    match pipeline::run_stage(Stage::Evaluate, &cfg) {
        Err(Error::MissingArtifact { stage, path }) => {
            assert_eq!(stage, "features");
            assert!(path.ends_with("features/features.csv"));
        }
        other => panic!("unexpected {other:?}"),
    }
}
