//! Every file the library emits parses back into the value that produced it.

use std::fs;
use std::path::Path;

use reluattn::bench::{run_bench, BenchReport, BenchSpec};
use reluattn::checkpoint::load_checkpoint;
use reluattn::data::{Dataset, DatasetName, Split};
use reluattn::gradcheck::{self, CellReport};
use reluattn::init_stats::{read_stats_csv, run_stats, write_stats_csv, StatsSpec};
use reluattn::sweep::{read_sweep_csv, run_sweep, SweepSpec};
use reluattn::train::{
    evaluate, lr_at, train, Outputs, RunRecord, TrainConfig, TrainData, CHECKPOINT_FILE, RECORD_FILE, STEPS_FILE,
};
use reluattn::{Activation, Tensor};

fn configs_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn toy(n: usize, split: Split) -> Dataset {
    let images = Tensor::new(
        [n, 28, 28, 1],
        (0..n * 784).map(|i| ((i * 31 + i / 784) % 17) as f32 / 16.0).collect(),
    )
    .unwrap();
    Dataset::new(images, (0..n).map(|i| i % 10).collect(), "toy", split).unwrap()
}

fn tiny_config() -> TrainConfig {
    let vit = gradcheck::full_matrix()[0].vit_config();
    let mut cfg = TrainConfig::new(vit, DatasetName::Mnist, 2);
    cfg.batch_size = 10;
    cfg.base_lr = 1e-2;
    cfg
}

#[derive(serde::Deserialize)]
struct StepRow {
    step: usize,
    loss: f64,
    lr: f64,
}

#[test]
fn run_record_checkpoint_and_steps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let data = TrainData::from_splits(&cfg, &toy(40, Split::Train), toy(20, Split::Test)).unwrap();
    let record = train(&cfg, &data, &Outputs::to_dir(dir.path())).unwrap();

    assert_eq!(RunRecord::read_json(&dir.path().join(RECORD_FILE)).unwrap(), record);

    let (header, params) = load_checkpoint(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(header.config, cfg.vit);
    assert_eq!(header.step, record.total_steps);
    assert_eq!(header.seed, cfg.seed);
    assert_eq!(evaluate(&params, &data.test, &cfg.vit).unwrap(), record.final_accuracy);

    let mut reader = csv::Reader::from_path(dir.path().join(STEPS_FILE)).unwrap();
    let rows: Vec<StepRow> = reader.deserialize().map(Result::unwrap).collect();
    assert_eq!(rows.len(), record.total_steps);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.step, i + 1);
        assert_eq!(r.loss.to_bits(), record.step_losses[i].to_bits());
        assert_eq!(
            r.lr,
            lr_at(r.step, record.total_steps, record.warmup_steps, cfg.base_lr)
        );
    }
}

#[test]
fn sweep_csv_matches_records() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SweepSpec {
        alphas: vec![0.5],
        activations: vec![Activation::Relu, Activation::Softmax],
        qk_layernorm: vec![true],
        gated: vec![false],
        seeds: vec![3],
        base: tiny_config(),
    };
    let res = run_sweep(
        &spec,
        &toy(20, Split::Train),
        &toy(10, Split::Test),
        dir.path(),
        &|_, _| {},
    )
    .unwrap();
    let rows = read_sweep_csv(&res.csv_path).unwrap();
    assert_eq!(rows.len(), spec.cardinality());
    for ((row, cell), outcome) in rows.iter().zip(&res.cells).zip(&res.outcomes) {
        let rec = outcome.record().unwrap();
        let on_disk = RunRecord::read_json(&dir.path().join("cells").join(cell.key()).join(RECORD_FILE)).unwrap();
        assert_eq!(&on_disk, rec);
        assert_eq!(row.activation, cell.activation);
        assert_eq!(row.seed, 3);
        assert_eq!(row.final_accuracy, Some(rec.final_accuracy));
        assert_eq!(row.core_seconds, Some(rec.core_seconds));
        assert_eq!(rec.config, spec.train_config(cell));
    }
}

#[test]
fn stats_csv_bench_json_and_gradcheck_json() {
    let dir = tempfile::tempdir().unwrap();
    let rows = run_stats(&StatsSpec {
        head_dims: vec![4],
        seq_lens: vec![4],
        activations: vec![Activation::Softplus, Activation::Softmax],
        alphas: vec![0.5],
        trials: 1000,
        seed: 0,
    })
    .unwrap();
    let path = dir.path().join("stats.csv");
    write_stats_csv(&rows, &path).unwrap();
    assert_eq!(read_stats_csv(&path).unwrap(), rows);

    let report = run_bench(&BenchSpec {
        seq_lens: vec![8],
        head_dim: 4,
        activations: vec![Activation::Softmax],
        chunk_sizes: vec![2],
        reps: 3,
        linear_seq_lens: vec![8],
        linear_head_dim: 4,
        seed: 0,
    })
    .unwrap();
    let json = serde_json::to_string_pretty(&report).unwrap();
    assert_eq!(serde_json::from_str::<BenchReport>(&json).unwrap(), report);

    let cells = gradcheck::filter_cells(&gradcheck::full_matrix(), "sigmoid/ln0/g0").unwrap();
    let reports = gradcheck::run(&cells, gradcheck::Options::default()).unwrap();
    let json = serde_json::to_string(&reports).unwrap();
    let back: Vec<CellReport> = serde_json::from_str(&json).unwrap();
    assert_eq!(back.len(), 1);
    assert_eq!(
        back[0].max_relative_error.to_bits(),
        reports[0].max_relative_error.to_bits()
    );
    assert_eq!(back[0].params.len(), reports[0].params.len());
}

#[test]
fn shipped_configs_parse_and_round_trip() {
    let mut seen = 0;
    for entry in fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name.starts_with("sweep") {
            let spec = SweepSpec::from_json(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(spec.cells().len(), spec.cardinality());
            let again = SweepSpec::from_json(&serde_json::to_string(&spec).unwrap()).unwrap();
            assert_eq!(again, spec);
        } else {
            let cfg = TrainConfig::from_json(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
            let again = TrainConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
            assert_eq!(again, cfg);
        }
        seen += 1;
    }
    assert!(seen >= 5);
}
