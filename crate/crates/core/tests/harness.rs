use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use neurodecode::harness::commands::{evaluate, Frozen};
use neurodecode::harness::dataset::{generate, SplitFile};
use neurodecode::harness::{
    cmd_ablate, cmd_decode, cmd_evaluate, cmd_gen_data, cmd_roi_probe, cmd_train, ExperimentConfig,
    HarnessError, RunManifest,
};
use neurodecode::metrics::{IMAGE_COLUMNS, TEXT_COLUMNS};
use neurodecode::pipeline::Variant;
use neurodecode::world::{Image, TokenSeq};

fn small(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.train = 96;
    cfg.data.test = 12;
    cfg.diffusion.epochs = 2;
    cfg.diffusion.steps = 10;
    cfg.eval.trials = 20;
    cfg.ridge.folds = 3;
    cfg.output_dir = dir.to_path_buf();
    cfg
}

type Step = fn(&ExperimentConfig) -> Result<RunManifest, HarnessError>;

fn run_all(cfg: &ExperimentConfig) -> Vec<RunManifest> {
    let steps: [Step; 6] =
        [cmd_gen_data, cmd_train, cmd_decode, cmd_evaluate, cmd_ablate, cmd_roi_probe];
    steps.iter().map(|f| f(cfg).unwrap()).collect()
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn full_run_is_byte_deterministic_and_manifests_are_complete() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let manifests = run_all(&small(a.path()));
    run_all(&small(b.path()));
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (path, bytes) in &fa {
        assert!(bytes == &fb[path], "{} differs between identical runs", path.display());
    }

    let listed: BTreeSet<PathBuf> = manifests.iter().flat_map(|m| m.files.iter().cloned()).collect();
    let written: BTreeSet<PathBuf> = fa.keys().cloned().collect();
    assert_eq!(listed, written);
    let hashes: HashSet<&str> = manifests.iter().map(|m| m.config_hash.as_str()).collect();
    assert_eq!(hashes.len(), 1);

    // report schema
    let csv = String::from_utf8(fa[Path::new("reports/full/image_metrics.csv")].clone()).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header[0], "item");
    assert_eq!(&header[1..], IMAGE_COLUMNS);
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 13);
    assert!(rows[12].starts_with("mean,"));
    let csv = String::from_utf8(fa[Path::new("reports/full/text_metrics.csv")].clone()).unwrap();
    assert_eq!(&csv.lines().next().unwrap().split(',').collect::<Vec<_>>()[1..], TEXT_COLUMNS);

    let ablation = String::from_utf8(fa[Path::new("reports/ablation.csv")].clone()).unwrap();
    let names: Vec<&str> = ablation.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["full", "only_z", "only_ci", "only_ct", "wo_z", "wo_ci", "wo_ct"]);
    assert_eq!(ablation.lines().next().unwrap().split(',').count(), 10);

    let roi = String::from_utf8(fa[Path::new("roi_probe/summary.csv")].clone()).unwrap();
    assert_eq!(roi.lines().count(), 1 + 4 * 3);
}

#[test]
fn splits_are_disjoint_and_repeats_follow_the_rule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    cmd_gen_data(&cfg).unwrap();
    let read = |name: &str| -> SplitFile {
        serde_json::from_slice(&fs::read(dir.path().join(format!("data/{name}.json"))).unwrap()).unwrap()
    };
    let (train, test) = (read("train"), read("test"));
    let seeds: HashSet<u64> = train.items.iter().map(|it| it.scene.seed).collect();
    assert_eq!(seeds.len(), train.items.len());
    assert!(test.items.iter().all(|it| !seeds.contains(&it.scene.seed)));

    assert!(!train.averaged && test.averaged);
    assert_eq!(train.repeat_histogram.values().sum::<usize>(), 96);
    assert!(train.repeat_histogram.keys().all(|r| (1..=3).contains(r)));
    for it in &train.items {
        assert_eq!(it.voxels.len(), it.repeats as usize);
    }
    assert_eq!(test.repeat_histogram, BTreeMap::from([(3, 12)]));
    assert!(test.items.iter().all(|it| it.voxels.len() == 1));
}

#[test]
fn ground_truth_scores_perfectly_against_itself() {
    let cfg = small(Path::new("unused"));
    let data = generate(&cfg).unwrap();
    let frozen = Frozen::build().unwrap();
    let images: Vec<Image> = data.test.iter().map(|it| it.render()).collect();
    let captions: Vec<TokenSeq> = data.test.iter().map(|it| it.caption_tokens()).collect();
    let (img, txt) = evaluate(&cfg, &frozen, &images, &captions, &images, &captions).unwrap();
    let img = img.summary();
    for (name, v) in IMAGE_COLUMNS.iter().zip(&img) {
        let want = if *name == "Dist-High" { 0.0 } else { 1.0 };
        assert!((v.unwrap() - want).abs() < 1e-12, "{name}: {v:?}");
    }
    let txt = txt.summary();
    // METEOR keeps a fragmentation penalty of 0.5 / m³ for one chunk
    assert!(txt[0].unwrap() > 0.99);
    for v in &txt[1..] {
        assert_eq!(v.unwrap(), 1.0);
    }
    assert!(evaluate(&cfg, &frozen, &images, &captions, &images[1..], &captions).is_err());
}

#[test]
fn later_stages_report_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    for f in [cmd_train, cmd_decode, cmd_evaluate, cmd_ablate, cmd_roi_probe] {
        let err = f(&cfg).unwrap_err();
        assert!(matches!(err, HarnessError::MissingArtifact(_)), "{err}");
        assert_eq!(err.exit_code(), 3);
    }
}

#[test]
fn variant_names_round_trip() {
    let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
    assert_eq!(names, ["full", "only_z", "only_ci", "only_ct", "wo_z", "wo_ci", "wo_ct"]);
    for v in Variant::ALL {
        assert_eq!(Variant::parse(v.name()).unwrap(), v);
    }
}

fn cli(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_neurodecode"))
        .args(args)
        .arg("--output_dir")
        .arg(dir)
        .env_remove("NEURODECODE_OUT")
        .output()
        .unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = cli(dir.path(), &["decode", "--diffusion.strength", "1.5"]);
    assert_eq!(code, 2);
    assert!(err.contains("diffusion.strength"), "{err}");
    let (code, err) = cli(dir.path(), &["gen-data", "--diffusion.colour=3"]);
    assert_eq!(code, 2);
    assert!(err.contains("diffusion.colour"), "{err}");
    assert_eq!(cli(dir.path(), &["decode"]).0, 3);

    let config = dir.path().join("config.json");
    fs::write(&config, r#"{"data": {"train": 64, "test": 4}}"#).unwrap();
    let (code, err) = cli(dir.path(), &["gen-data", "--config", config.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(dir.path().join("manifest_gen-data.json").exists());
    let test: SplitFile = serde_json::from_slice(&fs::read(dir.path().join("data/test.json")).unwrap()).unwrap();
    assert_eq!(test.items.len(), 4);
}

#[test]
fn averaged_training_rows_are_optional() {
    let mut cfg = small(Path::new("unused"));
    cfg.data.average_train = true;
    let data = generate(&cfg).unwrap();
    assert!(data.info.train_averaged);
    assert!(data.train.iter().all(|it| it.voxels.len() == 1));
    assert!(data.train.iter().any(|it| it.repeats > 1));
}
