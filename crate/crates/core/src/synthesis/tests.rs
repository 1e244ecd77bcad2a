use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;

use super::*;
use crate::experiments::gen_general_position_dataset;
use crate::model::Task;
use crate::random::{seeded, uniform_vec};

fn model(heads: usize, d: usize, d_h: usize) -> AttentionConfig {
    AttentionConfig::new(heads, d, d_h, 1, 1).unwrap()
}

fn data(t: usize, n: usize, d: usize, seed: u64) -> Dataset {
    gen_general_position_dataset(t, n, d, Task::Regression, seed).unwrap()
}

fn fast(cfg: SynthesisConfig) -> SynthesisConfig {
    SynthesisConfig {
        assumption_trials: 300,
        ..cfg
    }
}

#[test]
fn invert_uniform_is_zero() {
    let a = invert_softmax_targets(&[0.25; 4]).unwrap();
    assert!(a.iter().all(|x| x.abs() < 1e-15));
}

#[test]
fn invert_two_entries() {
    let a = invert_softmax_targets(&[0.25, 0.75]).unwrap();
    let h = libm::log(3.0) / 2.0;
    assert!((a[0] + h).abs() < 1e-15 && (a[1] - h).abs() < 1e-15);
}

#[test]
fn invert_rejects_boundary_and_unnormalized() {
    assert!(invert_softmax_targets(&[1.0, 0.0]).is_err());
    assert!(invert_softmax_targets(&[0.5, 0.6]).is_err());
    assert!(invert_softmax_targets(&[]).is_err());
}

proptest! {
    #[test]
    fn invert_round_trips(raw in proptest::collection::vec(0.01f64..1.0, 1..12)) {
        let s: f64 = raw.iter().sum();
        let theta: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let alpha = invert_softmax_targets(&theta).unwrap();
        prop_assert!(alpha.iter().sum::<f64>().abs() < 1e-12);
        for (a, b) in softmax(&alpha).iter().zip(&theta) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn solve_single_uniform_target_gives_zero() {
    let ds = data(1, 3, 8, 1);
    let w = solve_head_for_targets(&[ds.example(0)], &[vec![1.0 / 3.0; 3]], 4, RankTolerance::default()).unwrap();
    assert!(w.max_abs() < 1e-14);
}

#[test]
fn solve_hits_targets_at_full_budget() {
    let (n, d, d_h) = (5, 12, 8);
    let ds = data(n, n, d, 2);
    let mut rng = seeded(3);
    let exs: Vec<&Example> = ds.examples().iter().collect();
    let targets: Vec<Vec<f64>> = (0..n).map(|_| interior_target(&mut rng, n)).collect();
    let w = solve_head_for_targets(&exs, &targets, d_h, RankTolerance::default()).unwrap();
    assert!(numerical_rank(&w, RankTolerance::default()).unwrap() <= n);
    for (ex, theta) in exs.iter().zip(&targets) {
        let got = softmax(&ex.context.mul_vec(&w.mul_vec(&ex.query).unwrap()).unwrap());
        for (a, b) in got.iter().zip(theta) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}

#[test]
fn solve_rejects_too_many_examples() {
    let ds = data(4, 3, 8, 4);
    let exs: Vec<&Example> = ds.examples().iter().collect();
    let targets = vec![vec![1.0 / 3.0; 3]; 4];
    assert!(matches!(
        solve_head_for_targets(&exs, &targets, 8, RankTolerance::default()),
        Err(Error::InvalidArgument(_))
    ));
    assert!(solve_head_for_targets(&exs[..3], &targets[..3], 2, RankTolerance::default()).is_err());
}

#[test]
fn solve_rejects_dependent_queries() {
    let ds = data(2, 3, 8, 5);
    let mut exs: Vec<Example> = ds.examples().to_vec();
    exs[1].query = exs[0].query.iter().map(|x| 2.0 * x).collect();
    let refs: Vec<&Example> = exs.iter().collect();
    let targets = vec![vec![1.0 / 3.0; 3]; 2];
    assert!(matches!(
        solve_head_for_targets(&refs, &targets, 4, RankTolerance::default()),
        Err(Error::AssumptionFailed { .. })
    ));
}

#[test]
fn w_plus_forced_orthogonality() {
    let context = Matrix::from_rows(&[[1.0, 2.0, 0.5], [0.3, -1.0, 2.0]]).unwrap();
    let examples = vec![
        Example {
            context: context.clone(),
            query: vec![1.0, 0.0, 0.0],
            label: vec![0.0],
        },
        Example {
            context,
            query: vec![0.2, 1.0, 0.4],
            label: vec![0.0],
        },
    ];
    let ds = Dataset::new(examples, None).unwrap();
    let wp = construct_w_plus(&ds, &[0], RankTolerance::default(), 7, 64).unwrap();
    // The first column of W⁺ is what e₁ picks out.
    for i in 0..3 {
        assert!(wp[(i, 0)].abs() < 1e-15);
    }
    let logits = ds.example(0).context.mul_vec(&wp.mul_vec(&[1.0, 0.0, 0.0]).unwrap()).unwrap();
    assert!(logits.iter().all(|x| x.abs() < 1e-15));
    assert_eq!(numerical_rank(&wp, RankTolerance::default()).unwrap(), 1);
}

#[test]
fn w_plus_random_instance() {
    let ds = data(20, 6, 16, 8);
    let protected = [3, 7, 11, 12, 19];
    let wp = construct_w_plus(&ds, &protected, RankTolerance::default(), 9, 64).unwrap();
    assert_eq!(numerical_rank(&wp, RankTolerance::default()).unwrap(), 1);
    let mut min_top = f64::INFINITY;
    for (t, ex) in ds.examples().iter().enumerate() {
        let l = ex.context.mul_vec(&wp.mul_vec(&ex.query).unwrap()).unwrap();
        if protected.contains(&t) {
            assert!(l.iter().all(|x| x.abs() < 1e-10), "{l:?}");
        } else {
            assert!(min_pairwise_gap(&l) > 0.0);
            min_top = min_top.min(top_gap(&l));
        }
    }
    assert!((min_top - 1.0).abs() < 1e-9);
}

#[test]
fn w_plus_without_protection_and_limits() {
    let ds = data(6, 4, 10, 10);
    let wp = construct_w_plus(&ds, &[], RankTolerance::default(), 1, 64).unwrap();
    for ex in ds.examples() {
        let l = ex.context.mul_vec(&wp.mul_vec(&ex.query).unwrap()).unwrap();
        assert!(min_pairwise_gap(&l) > 0.0);
    }
    assert!(construct_w_plus(&ds, &[0, 1, 2, 3], RankTolerance::default(), 1, 64).is_err());
}

fn two_token_instance() -> (Dataset, Matrix) {
    let ex = Example {
        context: Matrix::from_rows(&[[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap(),
        query: vec![0.0, 1.0, 0.0],
        label: vec![0.0],
    };
    let ds = Dataset::new(vec![ex], None).unwrap();
    // gamma = e1, w = e2: logits (1, 2), gap 1.
    let mut wp = Matrix::zeros(3, 3);
    wp[(0, 1)] = 1.0;
    (ds, wp)
}

#[test]
fn scale_for_two_tokens_is_sixteen() {
    let (ds, wp) = two_token_instance();
    let path = SaturationPath::new(&Matrix::zeros(3, 3), &wp, &ds, &[]).unwrap();
    let cfg = SynthesisConfig {
        delta: 1e-6,
        ..SynthesisConfig::new(model(1, 3, 1))
    };
    let choice = select_saturation_scale(&path, &ds, &Matrix::zeros(0, 3), None, 0, &cfg).unwrap();
    assert_eq!(choice.c, 16.0);
    // Closed form: 2 / (1 + e^c) <= delta.
    let c_min = libm::log(2.0 / 1e-6 - 1.0);
    assert!(c_min > 8.0 && c_min <= 16.0);
    assert_eq!(choice.history.len(), 5);
}

#[test]
fn scale_cap_is_reported() {
    let (ds, wp) = two_token_instance();
    let path = SaturationPath::new(&Matrix::zeros(3, 3), &wp, &ds, &[]).unwrap();
    let cfg = SynthesisConfig {
        delta: 1e-6,
        c_max: 8.0,
        ..SynthesisConfig::new(model(1, 3, 1))
    };
    assert!(matches!(
        select_saturation_scale(&path, &ds, &Matrix::zeros(0, 3), None, 0, &cfg),
        Err(Error::ScaleCapExceeded { .. })
    ));
}

#[test]
fn protected_logits_do_not_move_and_gaps_shrink() {
    let ds = data(12, 5, 12, 11);
    let protected = [2, 5, 9];
    let wp = construct_w_plus(&ds, &protected, RankTolerance::default(), 3, 64).unwrap();
    let mut rng = seeded(4);
    let exs: Vec<&Example> = protected.iter().map(|&t| ds.example(t)).collect();
    let targets: Vec<Vec<f64>> = (0..3).map(|_| interior_target(&mut rng, 5)).collect();
    let ws = solve_head_for_targets(&exs, &targets, 8, RankTolerance::default()).unwrap();
    let path = SaturationPath::new(&ws, &wp, &ds, &protected).unwrap();
    for &t in &protected {
        let at0 = path.logits(t, 0.0);
        let mut c = 1.0;
        while c < 1e12 {
            let at_c = path.logits(t, c);
            assert!(at0.iter().zip(&at_c).all(|(a, b)| a.to_bits() == b.to_bits()));
            c *= 2.0;
        }
    }
    let mut prev = f64::INFINITY;
    let mut c = 1.0;
    for _ in 0..12 {
        let g = path.max_l1_gap(c);
        assert!(g <= prev);
        prev = g;
        c *= 2.0;
    }
    assert!(prev < 1e-9);
}

#[test]
fn greedy_single_example_is_accepted() {
    let ds = data(1, 2, 6, 12);
    let cfg = SynthesisConfig::new(model(1, 6, 2));
    let t = greedy_row_targets(&[ds.example(0)], &Matrix::zeros(1, 6), &cfg, &mut seeded(0)).unwrap();
    assert_eq!(t.len(), 1);
    assert!(t[0].iter().all(|&x| x >= TARGET_FLOOR * 0.99));
    assert!((t[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn greedy_base_case_reaches_rank_r() {
    let (n, d) = (6, 16);
    let ds = data(n, n, d, 13);
    let cfg = SynthesisConfig::new(model(1, d, n));
    let exs: Vec<&Example> = ds.examples().iter().collect();
    let targets = greedy_row_targets(&exs, &Matrix::zeros(n, d), &cfg, &mut seeded(1)).unwrap();
    let rows: Vec<Vec<f64>> = exs.iter().zip(&targets).map(|(e, t)| e.context.tr_mul_vec(t).unwrap()).collect();
    assert_eq!(numerical_rank(&Matrix::from_rows(&rows).unwrap(), cfg.tol).unwrap(), n);
}

#[test]
fn greedy_with_offset_reaches_n_minus_one() {
    let (n, d) = (6, 16);
    let ds = data(n - 1, n, d, 14);
    let cfg = SynthesisConfig::new(model(1, d, n));
    let exs: Vec<&Example> = ds.examples().iter().collect();
    let offset = crate::random::gaussian_matrix(&mut seeded(2), n - 1, d, 1.0);
    let targets = greedy_row_targets(&exs, &offset, &cfg, &mut seeded(3)).unwrap();
    let mut block = Matrix::zeros(n - 1, d);
    for (i, (e, t)) in exs.iter().zip(&targets).enumerate() {
        let mut row = e.context.tr_mul_vec(t).unwrap();
        axpy(1.0, offset.row(i), &mut row);
        block.row_mut(i).copy_from_slice(&row);
    }
    assert_eq!(numerical_rank(&block, cfg.tol).unwrap(), n - 1);
    assert!(greedy_row_targets(&ds.examples().iter().chain(ds.examples()).take(n).collect::<Vec<_>>(), &Matrix::from_fn(n, d, |_, _| 1.0), &cfg, &mut seeded(3)).is_err());
}

#[test]
fn single_example_is_memorized() {
    let ds = data(1, 3, 8, 15);
    let cfg = fast(SynthesisConfig::new(model(2, 8, 2)));
    let (w, rep) = synthesize(&ds, &cfg).unwrap();
    assert!(verify_memorization(&w, &cfg.model, &ds, 1e-6).unwrap().passed);
    assert_eq!(rep.final_rank, 1);
}

#[test]
fn desk_instance_is_memorized() {
    let ds = data(22, 8, 16, 16);
    let cfg = fast(SynthesisConfig::new(model(3, 16, 16)).with_seed(16));
    let (w, rep) = synthesize(&ds, &cfg).unwrap();
    let v = verify_memorization(&w, &cfg.model, &ds, 1e-6).unwrap();
    assert!(v.passed, "{v:?}");
    assert_eq!(rep.final_rank, 22);
    assert_eq!(rep.capacity, 22);
    assert!(rep.assigned_disjoint());
    assert_eq!(rep.heads[0].assigned.len(), 8);
    for h in &rep.heads {
        assert!(h.factorization_error < 1e-8, "{h:?}");
        assert!(h.assigned.len() <= 8);
        if let Some(g) = h.saturation_gap {
            assert!(g <= 1e-9);
        }
    }
}

#[test]
fn capacity_is_enforced() {
    let cfg = fast(SynthesisConfig::new(model(3, 16, 4)));
    let ok = data(10, 8, 16, 17);
    let (w, _) = synthesize(&ok, &cfg).unwrap();
    assert!(verify_memorization(&w, &cfg.model, &ok, 1e-6).unwrap().passed);
    let too_many = data(11, 8, 16, 17);
    assert_eq!(
        synthesize(&too_many, &cfg).unwrap_err(),
        Error::CapacityExceeded {
            examples: 11,
            capacity: 10
        }
    );
}

#[test]
fn assumption_failures_are_distinct() {
    let ds = data(5, 3, 8, 18);
    let mut exs = ds.examples().to_vec();
    for e in exs.iter_mut() {
        e.query = exs_query();
    }
    let same = Dataset::new(exs, None).unwrap();
    let cfg = fast(SynthesisConfig::new(model(2, 8, 3)));
    assert!(matches!(
        synthesize(&same, &cfg),
        Err(Error::AssumptionFailed {
            assumption: "Assumption 1 (query Kruskal rank)",
            ..
        })
    ));

    let mut exs = ds.examples().to_vec();
    let row = exs[1].context.row(0).to_vec();
    exs[1].context.row_mut(2).copy_from_slice(&row);
    let dup = Dataset::new(exs, None).unwrap();
    assert!(matches!(
        synthesize(&dup, &cfg),
        Err(Error::AssumptionFailed {
            assumption: "Assumption 2 (full-rank contexts)",
            ..
        })
    ));

    let wide = Dataset::new(
        vec![Example {
            context: crate::random::uniform_matrix(&mut seeded(0), 4, 4),
            query: uniform_vec(&mut seeded(1), 4),
            label: vec![1.0],
        }],
        None,
    )
    .unwrap();
    assert!(matches!(
        synthesize(&wide, &fast(SynthesisConfig::new(model(1, 4, 4)))),
        Err(Error::AssumptionFailed { assumption: "n < d", .. })
    ));
}

fn exs_query() -> Vec<f64> {
    vec![0.3, 0.1, 0.9, 0.4, 0.2, 0.8, 0.5, 0.7]
}

#[test]
fn skip_with_zero_labels() {
    let base = data(6, 4, 8, 19);
    let ds = base.with_labels(vec![vec![0.0]; 6], None).unwrap();
    let shifted = skip_shifted_labels(&ds);
    for (y, ex) in shifted.iter().zip(ds.examples()) {
        assert_eq!(y[0], -ex.query[0]);
    }
    let cfg = fast(SynthesisConfig::new(model(2, 8, 4)));
    let (w, _) = synthesize_skip(&ds, &cfg).unwrap();
    let skip = cfg.model.with_skip(true);
    let v = verify_memorization(&w, &skip, &ds, 1e-6).unwrap();
    assert!(v.passed && v.max_abs_error < 1e-6);
    assert!(!verify_memorization(&w, &cfg.model, &ds, 1e-6).unwrap().passed);
}

#[test]
fn skip_desk_instance() {
    let ds = data(22, 8, 16, 20);
    let cfg = fast(SynthesisConfig::new(model(3, 16, 16)).with_seed(3));
    let (w, _) = synthesize_skip(&ds, &cfg).unwrap();
    let skip = cfg.model.with_skip(true);
    for ex in ds.examples() {
        let y = forward(&w, &skip, &ex.context, &ex.query).unwrap().prediction;
        assert!((y[0] - ex.label[0]).abs() <= 1e-6 * ex.label[0].abs().max(1.0));
    }
}

#[test]
fn verify_zero_weights_and_infinite_tolerance() {
    let ds = data(4, 3, 8, 21);
    let m = model(1, 8, 2);
    let w = AttentionWeights::zeros(&m);
    assert!(!verify_memorization(&w, &m, &ds, 1e-6).unwrap().passed);
    assert!(verify_memorization(&w, &m, &ds, f64::INFINITY).unwrap().passed);
}

#[test]
fn partition_prefers_priority_rows() {
    let z = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 0.0]]).unwrap();
    let (chosen, rest) = partition_rows(&z, 2, &[2], 1e-8);
    assert_eq!(chosen[0], 2);
    assert_eq!(chosen.len(), 2);
    assert_eq!(rest.len(), 2);
    assert!(rest[0].1 <= rest[1].1);
}

#[test]
fn config_validation() {
    let m = model(1, 4, 2);
    assert!(SynthesisConfig { delta: 0.0, ..SynthesisConfig::new(m) }.validate().is_err());
    assert!(SynthesisConfig { c_max: 0.5, ..SynthesisConfig::new(m) }.validate().is_err());
    assert!(SynthesisConfig::new(m).validate().is_ok());
    assert_eq!(SynthesisConfig::new(m).c_max, (1u64 << 40) as f64);
}
