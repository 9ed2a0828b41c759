//! End-to-end behaviour of the offline pipeline on a small experiment.

use std::sync::OnceLock;

use covertwatch_core::neural::train::chronological_split;
use covertwatch_core::pipeline::experiment::{
    quiet, read_models, run_experiment, train_offline, write_models, ExperimentConfig, ExperimentData, ExperimentReport, Method,
    OfflineModels,
};
use covertwatch_core::pipeline::{parameter_hash, reconstruction_mse, TRAIN_FRACTION};

fn config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = 21;
    c.levels = vec![0.0, 0.2];
    c.severities = vec![];
    c.data.hours = 48;
    c.data.normal_episodes = 6;
    c.data.contaminant_episodes = 2;
    c.data.dnn_episodes = 2;
    c.data.test_episodes = 1;
    c.model.samples = 4;
    for s in [&mut c.train.vae, &mut c.train.lstm, &mut c.train.dnn, &mut c.train.ae] {
        s.max_epochs = 25;
    }
    c
}

struct Run {
    config: ExperimentConfig,
    data: ExperimentData,
    models: OfflineModels,
    report: ExperimentReport,
}

fn shared() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let config = config();
        let (data, models, report) = run_experiment(&config, &[Method::Proposed, Method::Ae], 1, &quiet).unwrap();
        Run { config, data, models, report }
    })
}

#[test]
fn vae_beats_the_mean_predictor_on_held_out_frames() {
    let r = shared();
    let clean = &r.models.proposed.as_ref().unwrap().levels[0];
    let normal = &r.data.normal;
    let (train, test) = chronological_split(normal.len(), TRAIN_FRACTION);
    let d = normal.frames[0].z.len();
    let mut mean = vec![0.0; d];
    for &i in &train {
        for (m, v) in mean.iter_mut().zip(&normal.frames[i].z) {
            *m += v / train.len() as f64;
        }
    }
    let mean_std = clean.norm.apply(&mean);
    let baseline = reconstruction_mse(normal, &clean.norm, &test, |_| Ok(mean_std.clone())).unwrap();
    let vae = reconstruction_mse(normal, &clean.norm, &test, |x| {
        let (mu, _) = clean.vae.encode(x)?;
        Ok(clean.vae.decode(&mu)?)
    })
    .unwrap();
    assert!(vae < baseline, "vae {vae} vs mean predictor {baseline}");
}

#[test]
fn classifier_learns_its_training_split() {
    let r = shared();
    let acc = r.models.proposed.as_ref().unwrap().dnn.train_accuracy;
    assert!(acc > 0.25 + 0.3, "train accuracy {acc}");
}

#[test]
fn report_covers_every_level_and_method() {
    let r = shared();
    assert_eq!(r.report.entries.len(), 4);
    for e in &r.report.entries {
        assert!((0.0..=1.0).contains(&e.report.accuracy));
        assert_eq!(e.report.confusion.len(), 4);
    }
}

#[test]
fn contamination_levels_never_change_the_classifier() {
    let r = shared();
    let mut only_clean = r.config.clone();
    only_clean.levels = vec![0.0];
    let m = train_offline(&r.data, &only_clean, &[Method::Proposed], 1, &quiet).unwrap();
    assert_eq!(parameter_hash(&m.proposed.unwrap().dnn.dnn), r.report.dnn_hash.clone().unwrap());
}

#[test]
fn parallel_training_matches_sequential() {
    let r = shared();
    let par = train_offline(&r.data, &r.config, &[Method::Proposed, Method::Ae], 2, &quiet).unwrap();
    assert_eq!(par, r.models);
}

#[test]
fn saved_models_load_back_exactly() {
    let r = shared();
    let dir = tempfile::tempdir().unwrap();
    write_models(dir.path(), &r.config, &r.models).unwrap();
    let back = read_models(dir.path(), &[Method::Proposed, Method::Ae]).unwrap();
    let (p, q) = (r.models.proposed.as_ref().unwrap(), back.proposed.as_ref().unwrap());
    assert_eq!(p.levels, q.levels);
    assert_eq!(p.dnn.dnn, q.dnn.dnn);
    let (a, b) = (r.models.baseline.as_ref().unwrap(), back.baseline.as_ref().unwrap());
    assert_eq!(a.levels, b.levels);
    assert_eq!(a.dnn.dnn, b.dnn.dnn);
}
