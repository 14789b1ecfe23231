use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use unirobust_core::aggregate::{agg, agg_with_weights};
use unirobust_core::data::{gen_blobs, gen_two_moons, inject_label_noise, split, Blobs, Gap, Shift, TwoMoons};
use unirobust_core::enrich::{mixup_with, smooth_labels, vrm_expand};
use unirobust_core::hpo::{decode, encode, sample_random, Preset};
use unirobust_core::metrics::{brier, cvar10};
use unirobust_core::numgrad::{Evaluation, Layer, Activation};
use unirobust_core::perturb_x::pgd_perturb;
use unirobust_core::perturb_y::{loss_neutral_ls, loss_optimistic_lr, loss_pessimistic, CredalTarget};
use unirobust_core::shapley::{interaction_indices, shapley_values, CoalitionGame};
use unirobust_core::{
    AggSpec, Batch, Head, InputPerturbSpec, LossSpec, Model, Norm, Split, Stance, Targets,
};

fn stance() -> impl Strategy<Value = Stance> {
    prop_oneof![Just(Stance::Pessimistic), Just(Stance::Neutral), Just(Stance::Optimistic)]
}

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-6f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn small_model(seed: u64, d: usize) -> Model {
    Model::mlp(d, &[5], Head::Classes(3), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn class_batch(x: Vec<f64>, n: usize, d: usize) -> Batch {
    Batch::new(DMatrix::from_row_slice(n, d, &x), Targets::Classes((0..n).map(|i| i % 3).collect())).unwrap()
}

proptest! {
    #[test]
    fn aggregation_is_bracketed(l in prop::collection::vec(0.0f64..1e3, 1..50), tau in 1e-3f64..1e3) {
        let lo = l.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = l.iter().sum::<f64>() / l.len() as f64;
        let tol = 1e-12 * hi.max(1.0);
        let o = agg(&l, &AggSpec { stance: Stance::Optimistic, tau }).unwrap();
        let p = agg(&l, &AggSpec { stance: Stance::Pessimistic, tau }).unwrap();
        prop_assert!(lo - tol <= o && o <= mean + tol);
        prop_assert!(mean - tol <= p && p <= hi + tol);
    }

    #[test]
    fn aggregation_weights_are_its_gradient(l in prop::collection::vec(0.0f64..5.0, 2..12), tau in 0.1f64..5.0, s in stance()) {
        let spec = AggSpec { stance: s, tau };
        let (_, w) = agg_with_weights(&l, &spec).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12 || s == Stance::Neutral);
        prop_assert!(w.iter().all(|v| *v >= 0.0));
        let h = 1e-6;
        for i in 0..l.len() {
            let mut up = l.clone();
            up[i] += h;
            let mut dn = l.clone();
            dn[i] -= h;
            let fd = (agg(&up, &spec).unwrap() - agg(&dn, &spec).unwrap()) / (2.0 * h);
            prop_assert!((fd - w[i]).abs() < 1e-6, "i {} fd {} w {}", i, fd, w[i]);
        }
    }

    #[test]
    fn aggregation_survives_huge_losses(l in prop::collection::vec(0.0f64..1e6, 1..20), s in stance()) {
        let v = agg(&l, &AggSpec { stance: s, tau: 1e-3 }).unwrap();
        prop_assert!(v.is_finite());
    }

    #[test]
    fn pgd_stays_in_the_ball(
        seed in 0u64..1000,
        x in prop::collection::vec(-2.0f64..2.0, 12),
        radius in 1e-3f64..2.0,
        steps in 1usize..10,
        linf in any::<bool>(),
        s in stance(),
        step_size in prop::option::of(1e-3f64..3.0),
    ) {
        let model = small_model(seed, 2);
        let batch = class_batch(x, 6, 2);
        let norm = if linf { Norm::Linf } else { Norm::L2 };
        let spec = InputPerturbSpec { stance: s, radius, norm, steps, step_size };
        let out = pgd_perturb(&model, &batch, &LossSpec::CrossEntropy, &spec).unwrap();
        for i in 0..6 {
            let d: Vec<f64> = (0..2).map(|j| out[(i, j)] - batch.x[(i, j)]).collect();
            let n = match norm {
                Norm::L2 => d.iter().map(|v| v * v).sum::<f64>().sqrt(),
                Norm::Linf => d.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            };
            prop_assert!(n <= radius + 1e-9);
            if s == Stance::Neutral {
                prop_assert_eq!(n, 0.0);
            }
        }
    }

    #[test]
    fn pgd_stance_orders_losses(seed in 0u64..1000, x in prop::collection::vec(-2.0f64..2.0, 12)) {
        let model = small_model(seed, 2);
        let batch = class_batch(x, 6, 2);
        let loss = |m: &DMatrix<f64>| {
            let b = Batch::new(m.clone(), batch.targets.clone()).unwrap();
            Evaluation::new(&model, &b, &LossSpec::CrossEntropy).unwrap().into_losses()
        };
        let base = loss(&batch.x);
        let mk = |s| InputPerturbSpec { stance: s, radius: 1e-4, norm: Norm::L2, steps: 1, step_size: None };
        let up = loss(&pgd_perturb(&model, &batch, &LossSpec::CrossEntropy, &mk(Stance::Pessimistic)).unwrap());
        let dn = loss(&pgd_perturb(&model, &batch, &LossSpec::CrossEntropy, &mk(Stance::Optimistic)).unwrap());
        for i in 0..6 {
            prop_assert!(up[i] >= base[i] - 1e-9 && base[i] >= dn[i] - 1e-9);
        }
    }

    #[test]
    fn zero_radius_is_identity(seed in 0u64..1000, x in prop::collection::vec(-2.0f64..2.0, 12), s in stance()) {
        let model = small_model(seed, 2);
        let batch = class_batch(x, 6, 2);
        let spec = InputPerturbSpec { stance: s, radius: 0.0, ..Default::default() };
        prop_assert_eq!(pgd_perturb(&model, &batch, &LossSpec::CrossEntropy, &spec).unwrap(), batch.x);
    }

    #[test]
    fn credal_optimism_below_pessimism(p in (2usize..6).prop_flat_map(simplex), alpha in 0.0f64..0.99, y in 0usize..6) {
        let k = p.len();
        let t = CredalTarget::new(y % k, alpha, k).unwrap();
        let opt = loss_optimistic_lr(&p, &t).unwrap();
        let ls = loss_neutral_ls(&p, &t).unwrap();
        let pess = loss_pessimistic(&p, &t).unwrap();
        prop_assert!(opt <= pess + 1e-9);
        prop_assert!(opt <= ls + 1e-9);
        prop_assert!(opt >= 0.0);
    }

    #[test]
    fn smoothed_and_mixed_targets_are_distributions(
        y in prop::collection::vec(0usize..4, 1..10),
        alpha in 0.0f64..=1.0,
        lambdas in prop::collection::vec(0.0f64..=1.0, 10),
        partners in prop::collection::vec(0usize..10, 10),
    ) {
        let n = y.len();
        let t = smooth_labels(&y, alpha, 4).unwrap();
        for i in 0..n {
            prop_assert!(t.row(i).iter().all(|v| *v >= 0.0));
            prop_assert!((t.row(i).sum() - 1.0).abs() < 1e-12);
        }
        let b = Batch::new(DMatrix::zeros(n, 2), Targets::Classes(y.clone())).unwrap();
        let partners: Vec<usize> = partners[..n].iter().map(|p| p % n).collect();
        let mixed = mixup_with(&b, &partners, &lambdas[..n], Some(4)).unwrap();
        let Targets::Soft(m) = mixed.targets else { panic!("soft targets expected") };
        for i in 0..n {
            prop_assert!(m.row(i).iter().all(|v| *v >= 0.0));
            prop_assert!((m.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vrm_keeps_labels(seed in 0u64..1000, k in 1usize..4, y in prop::collection::vec(0usize..3, 1..8)) {
        let n = y.len();
        let b = Batch::new(DMatrix::zeros(n, 2), Targets::Classes(y.clone())).unwrap();
        let out = vrm_expand(&b, 0.5, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let Targets::Classes(oy) = out.targets else { panic!("classes expected") };
        let expected: Vec<usize> = y.iter().flat_map(|v| std::iter::repeat_n(*v, k)).collect();
        prop_assert_eq!(oy, expected);
        let again = vrm_expand(&b, 0.5, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(out.x, again.x);
    }

    #[test]
    fn cvar_properties(l in prop::collection::vec(0.0f64..10.0, 1..60), bump in 0.0f64..5.0, idx in 0usize..60, seed in any::<u64>()) {
        let c = cvar10(&l).unwrap();
        let mean = l.iter().sum::<f64>() / l.len() as f64;
        prop_assert!(c >= mean - 1e-12);
        let mut up = l.clone();
        up[idx % l.len()] += bump;
        prop_assert!(cvar10(&up).unwrap() >= c);
        let mut perm = l.clone();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(cvar10(&perm).unwrap(), c);
    }

    #[test]
    fn brier_bounded_and_permutation_invariant(rows in prop::collection::vec((simplex(3), 0usize..3), 1..20), seed in any::<u64>()) {
        let n = rows.len();
        let probs = DMatrix::from_fn(n, 3, |i, j| rows[i].0[j]);
        let y: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let b = brier(&probs, &y).unwrap();
        prop_assert!((0.0..=2.0).contains(&b));
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pp = DMatrix::from_fn(n, 3, |i, j| probs[(order[i], j)]);
        let py: Vec<usize> = order.iter().map(|&i| y[i]).collect();
        prop_assert!((brier(&pp, &py).unwrap() - b).abs() < 1e-12);
    }

    #[test]
    fn shapley_efficiency_symmetry_dummy(vals in prop::collection::vec(-1.0f64..1.0, 16)) {
        let names: Vec<String> = (0..4).map(|i| format!("p{i}")).collect();
        let g = CoalitionGame::new(names.clone(), vals.clone()).unwrap();
        let phi = shapley_values(&g);
        prop_assert!((phi.iter().sum::<f64>() - (vals[15] - vals[0])).abs() < 1e-12);

        // Symmetric in players 0 and 1.
        let swap = |m: usize| (m & !3) | ((m & 1) << 1) | ((m >> 1) & 1);
        let sym = CoalitionGame::from_fn(names.clone(), |m| vals[m] + vals[swap(m)]).unwrap();
        let ps = shapley_values(&sym);
        prop_assert!((ps[0] - ps[1]).abs() < 1e-12);

        // Player 3 is a dummy.
        let dummy = CoalitionGame::from_fn(names, |m| vals[m & 7]).unwrap();
        let pd = shapley_values(&dummy);
        prop_assert!(pd[3].abs() < 1e-12);
        let ix = interaction_indices(&dummy).unwrap();
        prop_assert!(ix.mains[3].abs() < 1e-9);
        for j in 0..3 {
            prop_assert!(ix.pair(j, 3).abs() < 1e-9);
        }
    }

    #[test]
    fn shapley_is_linear(a in prop::collection::vec(-1.0f64..1.0, 8), b in prop::collection::vec(-1.0f64..1.0, 8), c in -2.0f64..2.0) {
        let names: Vec<String> = (0..3).map(|i| format!("p{i}")).collect();
        let pa = shapley_values(&CoalitionGame::new(names.clone(), a.clone()).unwrap());
        let pb = shapley_values(&CoalitionGame::new(names.clone(), b.clone()).unwrap());
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + c * y).collect();
        let pm = shapley_values(&CoalitionGame::new(names, mix).unwrap());
        for i in 0..3 {
            prop_assert!((pm[i] - (pa[i] + c * pb[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn hpo_encoding_roundtrips(preset in prop::sample::select(Preset::ALL.to_vec()), seed in any::<u64>()) {
        let spec = sample_random(&preset.space(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(decode(&encode(&spec)), spec);
        prop_assert!(spec.validate().is_ok());
    }

    #[test]
    fn losses_are_non_negative(seed in 0u64..1000, x in prop::collection::vec(-3.0f64..3.0, 12)) {
        let model = small_model(seed, 2);
        let batch = class_batch(x, 6, 2);
        let ce = Evaluation::new(&model, &batch, &LossSpec::CrossEntropy).unwrap();
        prop_assert!(ce.losses().iter().all(|l| *l >= 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generators_replay_and_split_cleanly(seed in any::<u64>(), rate in 0.0f64..0.5) {
        let moons = TwoMoons {
            n: 60,
            n_eval: Some(20),
            noise_sd: 0.1,
            gap: Some(Gap { from_deg: 60.0, to_deg: 120.0 }),
            shift: Shift { dx: 0.3, dy: 0.0, rotation_deg: 10.0 },
        };
        let a = gen_two_moons(&moons, seed).unwrap();
        prop_assert_eq!(&a, &gen_two_moons(&moons, seed).unwrap());
        let blobs = Blobs { n: 30, n_eval: None, k: 3, spread: 3.0, sd: 0.3, ood_offset: 1.0 };
        prop_assert_eq!(gen_blobs(&blobs, seed).unwrap(), gen_blobs(&blobs, seed).unwrap());

        let s = split(&a, [0.5, 0.2, 0.1, 0.1, 0.1], seed).unwrap();
        let total: usize = Split::ALL.iter().map(|sp| s.indices(*sp).len()).sum();
        prop_assert_eq!(total, s.len());
        prop_assert_eq!(&s.x, &a.x);

        let noisy = inject_label_noise(&a, rate, seed).unwrap();
        prop_assert_eq!(&noisy.x, &a.x);
        prop_assert_eq!(&noisy.splits, &a.splits);
        let (unirobust_core::Labels::Classes { y: y0, .. }, unirobust_core::Labels::Classes { y: y1, .. }) = (&a.labels, &noisy.labels) else {
            panic!("class labels expected")
        };
        for i in 0..a.len() {
            if a.splits[i] != Split::Train {
                prop_assert_eq!(y0[i], y1[i]);
            }
        }
    }
}

#[test]
fn adam_worked_values() {
    use unirobust_core::numgrad::adam_step;
    use unirobust_core::OptState;
    let mut p = vec![1.0, -2.0];
    let mut s = OptState::new(2, 0.1);
    adam_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
    assert_eq!(p, vec![1.0, -2.0]);
    // First step moves each coordinate by lr * g / (|g| + eps).
    let mut s = OptState::new(2, 0.1);
    let mut p = vec![1.0, -2.0];
    adam_step(&mut p, &[0.5, -3.0], &mut s).unwrap();
    assert!((p[0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-12);
    assert!((p[1] - (-2.0 + 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-12);
    // A constant gradient converges to steps of size lr.
    let mut p = vec![0.0];
    let mut s = OptState::new(1, 0.01);
    let mut last = 0.0;
    for _ in 0..5000 {
        let before = p[0];
        adam_step(&mut p, &[2.0], &mut s).unwrap();
        last = before - p[0];
    }
    assert!((last - 0.01).abs() < 1e-6);
}

#[test]
fn linear_layer_shapes_are_checked() {
    assert!(Layer::new(DMatrix::zeros(2, 3), nalgebra::DVector::zeros(3), Activation::Identity).is_err());
}
