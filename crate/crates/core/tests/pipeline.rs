use std::path::Path;

use protomem::checkpoint::{load_checkpoint, save_checkpoint};
use protomem::config::RunConfig;
use protomem::datagen::{load_csv, save_csv, Split};
use protomem::eval::evaluate;
use protomem::trainer::{train, NoObserver, TrainConfig, Trainer};

const CFG: &str = "\
generator = rings
n = 300
epsilon = 0.3
epochs = 4
batch_size = 50
slots = 8
cache_capacity = 100
lr = 0.01
";

fn config() -> RunConfig {
    RunConfig::parse(CFG, Path::new("pipeline.cfg")).unwrap()
}

#[test]
fn checkpoint_file_resume_matches_uninterrupted_run() {
    let cfg = config();
    let ds = cfg.dataset().unwrap();
    let full = train(&cfg.train, &ds).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    let mut first = Trainer::new(&TrainConfig { epochs: 2, ..cfg.train.clone() }, &ds).unwrap();
    first.run(&mut NoObserver).unwrap();
    save_checkpoint(first.state(), &path).unwrap();

    let mut second = Trainer::resume(&cfg.train, &ds, load_checkpoint(&path).unwrap()).unwrap();
    second.run(&mut NoObserver).unwrap();
    assert_eq!(second.state().log.to_csv(), full.log.to_csv());
    assert_eq!(second.state().params, full.params);
    assert_eq!(second.state().memory, full.memory);
}

#[test]
fn dataset_csv_feeds_training_identically() {
    let cfg = config();
    let ds = cfg.dataset().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    save_csv(&ds, &path).unwrap();
    let loaded = load_csv(&path).unwrap();
    assert_eq!(loaded.y_noisy, ds.y_noisy);
    assert_eq!(loaded.rows_in(Split::Test), ds.rows_in(Split::Test));

    let a = train(&cfg.train, &ds).unwrap();
    let b = train(&cfg.train, &loaded).unwrap();
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    let m = evaluate(&b.params, &loaded, Split::Test).unwrap();
    assert_eq!(m.total(), ds.rows_in(Split::Test).len());
}

#[test]
fn config_echo_reproduces_the_run() {
    let cfg = config();
    let echoed = RunConfig::parse(&cfg.to_text(), Path::new("echo.cfg")).unwrap();
    assert_eq!(echoed, cfg);
    let a = train(&cfg.train, &cfg.dataset().unwrap()).unwrap();
    let b = train(&echoed.train, &echoed.dataset().unwrap()).unwrap();
    assert_eq!(a.log.to_csv(), b.log.to_csv());
}
