//! The synthetic task is learnable and the default zoo learns it.

mod common;

use semlab::nets::{build_model, train, ArchTemplate, ArchitectureSpec, TrainConfig};
use semlab::rng::RngStream;
use semlab::workbench::config::RunConfig;
use semlab::workbench::dataset::{gen_dataset, SIDE};

fn fit(template: ArchTemplate, seed: u64) -> f64 {
    let cfg = RunConfig::default();
    let data = gen_dataset(&cfg.dataset).unwrap();
    let arch = ArchitectureSpec::from_template("probe", &template, &[1, SIDE, SIDE], cfg.dataset.classes).unwrap();
    let m = build_model(&arch, seed).unwrap();
    let trained = train(&m, &data.train, &data.test, &TrainConfig::default(), &mut RngStream::new(seed)).unwrap();
    trained.accuracy(&data.test).unwrap()
}

#[test]
fn logistic_regression_learns_the_task() {
    let acc = fit(ArchTemplate::Mlp { hidden: vec![] }, 5);
    assert!(acc >= 0.8, "logistic accuracy {acc}");
}

#[test]
fn small_cnn_learns_the_task() {
    let acc = fit(
        ArchTemplate::Cnn {
            channels: vec![4],
            kernel: 3,
            pool: 2,
            hidden: vec![],
        },
        6,
    );
    assert!(acc >= 0.9, "cnn accuracy {acc}");
}

#[test]
fn training_is_deterministic() {
    assert_eq!(fit(ArchTemplate::Mlp { hidden: vec![8] }, 9), fit(ArchTemplate::Mlp { hidden: vec![8] }, 9));
}

#[test]
fn every_unsmoothed_zoo_member_beats_chance() {
    let s = common::setup();
    let chance = 1.0 / s.cfg.dataset.classes as f64;
    for p in s.collection.plain() {
        let acc = p.model.accuracy(&s.data.test).unwrap();
        assert!(acc > chance + 0.3, "plain {}: {acc}", p.arch_id);
    }
}
