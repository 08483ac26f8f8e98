use std::fs::File;

use esoseg_core::inference::InferenceOptions;
use esoseg_core::metrics::{read_metrics_csv, write_metrics_csv};
use esoseg_core::network::{load_checkpoint, NetworkConfig, Variant};
use esoseg_core::phantom::{generate_corpus, CorpusConfig, Split};
use esoseg_core::report::run_report;
use esoseg_core::trainer::{evaluate_split, split_dir, train, TrainLog, BEST_CHECKPOINT, FINAL_CHECKPOINT, TRAIN_LOG};
use esoseg_core::{SamplerConfig, TrainConfig};

fn tiny_config(split_id: u32) -> TrainConfig {
    TrainConfig {
        network: NetworkConfig::for_variant(Variant::DUnet),
        sampler: SamplerConfig {
            patch_size: [16, 16, 8],
            ..SamplerConfig::default()
        },
        epochs: 2,
        steps_per_epoch: 2,
        batch_size: 2,
        patches_per_case: 2,
        seed: 4,
        split_id,
        ..TrainConfig::default()
    }
}

#[test]
fn corpus_train_evaluate_report() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = CorpusConfig {
        n: 6,
        split_fractions: [0.5, 1.0 / 6.0, 1.0 / 3.0],
        dims: [64, 64, 32],
        ..CorpusConfig::default()
    };
    let manifest = generate_corpus(&corpus, dir.path().join("data")).unwrap();
    assert_eq!(manifest.split(Split::Test).count(), 2);

    let runs = dir.path().join("runs");
    let mut tables = Vec::new();
    for k in 1..=3 {
        let out = split_dir(&runs, k);
        let outcome = train(&tiny_config(k), &manifest, Some(&out)).unwrap();
        for f in [BEST_CHECKPOINT, FINAL_CHECKPOINT, TRAIN_LOG] {
            assert!(out.join(f).is_file(), "missing {f}");
        }
        let log = TrainLog::read_csv(File::open(out.join(TRAIN_LOG)).unwrap()).unwrap();
        assert_eq!(log.steps, outcome.log.steps);
        assert_eq!(log.steps.len(), 4);
        assert_eq!(log.val_dsc().len(), 2);

        let net = load_checkpoint(&out.join(BEST_CHECKPOINT)).unwrap();
        let evals = evaluate_split(
            &net,
            &manifest,
            Split::Test,
            &k.to_string(),
            &InferenceOptions::default(),
        )
        .unwrap();
        let rows: Vec<_> = evals.into_iter().map(|e| e.row).collect();
        let path = out.join("metrics.csv");
        write_metrics_csv(File::create(&path).unwrap(), &rows).unwrap();
        assert_eq!(read_metrics_csv(File::open(&path).unwrap()).unwrap(), rows);
        tables.push((k.to_string(), path));
    }

    let inputs: Vec<_> = tables.iter().map(|(l, p)| (l.clone(), p.as_path())).collect();
    let report = run_report(&inputs).unwrap();
    assert_eq!(report.splits.len(), 3);
    assert!(report.splits.iter().all(|r| r.scans == 2));
    let text = report.to_text();
    assert!(text.contains("Mean"), "{text}");
    let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(json["splits"].as_array().unwrap().len(), 3);
}
