use unirobust_core::data::{gen_preferences, gen_two_moons, split, TwoMoons};
use unirobust_core::hpo::{run_trial, search, Preset, Sampler, TpeConfig};
use unirobust_core::pipeline::train;
use unirobust_core::{RobustSpec, Selection, Split, StageFlags, TrainSettings};

fn moons() -> unirobust_core::Dataset {
    let cfg = TwoMoons { n: 80, n_eval: Some(40), noise_sd: 0.1, gap: None, shift: Default::default() };
    gen_two_moons(&cfg, 3).unwrap()
}

fn settings() -> TrainSettings {
    TrainSettings { epochs: 2, batch_size: 16, hidden: vec![6] }
}

#[test]
fn each_preset_runs_only_its_stages() {
    let ds = moons();
    // Joint is a search space; its default point is ERM.
    for p in Preset::ALL.into_iter().filter(|p| *p != Preset::Joint) {
        let mut spec = p.spec();
        spec.learning_rate = 0.01;
        let rec = run_trial(&spec, &ds, &settings(), &Selection::default(), 1).unwrap();
        assert_eq!(rec.stages, p.stages(), "{p}");
        assert_eq!(rec.epoch_losses.len(), 2);
    }
    assert_eq!(Preset::Erm.stages(), StageFlags::default());
}

#[test]
fn search_replays_bit_identically() {
    let ds = moons();
    for sampler in [Sampler::Random, Sampler::Tpe(TpeConfig { startup: 2, ..TpeConfig::default() })] {
        let a = search(&Preset::Joint.space(), &sampler, 4, &ds, &settings(), &Selection::default(), 9, false).unwrap();
        let b = search(&Preset::Joint.space(), &sampler, 4, &ds, &settings(), &Selection::default(), 9, false).unwrap();
        let strip = |h: &[unirobust_core::TrialRecord]| -> Vec<_> {
            h.iter().map(|r| (r.spec, r.seed, r.epoch_losses.clone(), r.reports.clone())).collect()
        };
        assert_eq!(strip(&a.history), strip(&b.history));
        assert_eq!(a.best, b.best);
    }
}

#[test]
fn training_selects_the_best_epoch() {
    let ds = moons();
    let sel = Selection::default();
    let mut spec = RobustSpec::erm();
    spec.learning_rate = 0.02;
    let out = train(&spec, &ds, &TrainSettings { epochs: 6, ..settings() }, &sel, 5).unwrap();
    let values: Vec<f64> = out
        .epoch_reports
        .iter()
        .map(|rs| rs.iter().find(|r| r.split == sel.split).unwrap().cvar10)
        .collect();
    let best = values.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_value, best);
    assert_eq!(values[out.best_epoch.unwrap()], best);
}

#[test]
fn preference_data_trains_with_bradley_terry() {
    let ds = gen_preferences(120, &[1.0, -1.0, 0.5], 1.0, 2).unwrap();
    let ds = split(&ds, [0.6, 0.1, 0.1, 0.1, 0.1], 2).unwrap();
    let mut spec = RobustSpec::erm();
    spec.learning_rate = 0.05;
    spec.aggregate = Preset::KlDro.spec().aggregate;
    let out = train(&spec, &ds, &TrainSettings { epochs: 10, ..settings() }, &Selection::default(), 0).unwrap();
    assert!(!out.diverged);
    let test = out.best_reports().into_iter().find(|r| r.split == Split::TestId).unwrap();
    assert!(test.accuracy > 0.6, "accuracy {}", test.accuracy);
}

#[test]
fn label_stages_are_rejected_on_regression_targets() {
    let ds = unirobust_core::Dataset::new(
        nalgebra::DMatrix::from_element(4, 1, 1.0),
        unirobust_core::Labels::Real(vec![0.0; 4]),
        vec![Split::Train; 4],
        0,
    )
    .unwrap();
    let spec = Preset::Ls.spec();
    assert!(train(&spec, &ds, &settings(), &Selection { split: Split::Train, ..Selection::default() }, 0).is_err());
}
