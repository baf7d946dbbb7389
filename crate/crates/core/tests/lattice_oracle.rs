mod common;

use common::*;
use eer_ner::corpus::ObservedTags;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn continuous_potentials_match_enumeration() {
    let mut r = rng(11);
    for case in 0..150 {
        let n = r.gen_range(1..=6);
        let classes = r.gen_range(1..=2);
        let biluo = case % 2 == 0;
        let lattice = random_lattice(&mut r, n, classes, biluo, false);
        let observed = random_observations(&mut r, n, lattice.num_tags());
        let o_bias = if case % 3 == 0 { r.gen_range(0.0..2.0) } else { 0.0 };
        if let Some(m) = lattice_mismatch(&lattice, &observed, o_bias, 1e-9) {
            panic!("case {case} (n={n}, classes={classes}, biluo={biluo}): {m}");
        }
    }
}

#[test]
fn viterbi_ties_follow_the_tie_rule() {
    let mut r = rng(12);
    for case in 0..150 {
        let n = r.gen_range(1..=5);
        let classes = r.gen_range(1..=2);
        let lattice = random_lattice(&mut r, n, classes, case % 2 == 0, true);
        let o_bias = [0.0, 0.5, 1.0][case % 3];
        let (path, _) = lattice.viterbi(o_bias).unwrap();
        let (best, _) = brute_viterbi(&lattice, o_bias);
        assert_eq!(path.iter().map(|t| t.index()).collect::<Vec<_>>(), best, "case {case}");
    }
}

#[test]
fn all_zero_potentials_pick_the_all_o_path() {
    let lattice = random_lattice(&mut rng(0), 4, 2, true, false);
    let zero = eer_ner::lattice::PotentialLattice::new(
        ndarray::Array2::zeros((4, 9)),
        ndarray::Array2::zeros((9, 9)),
        lattice.mask().clone(),
    )
    .unwrap();
    let (path, _) = zero.viterbi(0.0).unwrap();
    assert!(path.iter().all(|t| t.is_outside()));
    // Every valid path has the same score, so the constrained sum counts paths.
    let count = valid_paths(&zero).len() as f64;
    assert!((zero.log_partition().unwrap() - count.ln()).abs() < 1e-12);
    assert!(zero.constrained_log_partition(&ObservedTags::new()).unwrap() == zero.log_partition().unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn marginals_are_distributions(seed in any::<u64>(), n in 1usize..7, classes in 1usize..3) {
        let mut r = rng(seed);
        let lattice = random_lattice(&mut r, n, classes, true, false);
        let m = lattice.tag_marginals().unwrap();
        for row in m.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| (-1e-12..=1.0 + 1e-12).contains(&p)));
        }
        let e = lattice.expected_entity_count().unwrap();
        let from_marginals: f64 = m.rows().into_iter().map(|r| 1.0 - r[0]).sum();
        prop_assert!((e - from_marginals).abs() < 1e-9);
    }

    #[test]
    fn observing_restricts_mass(seed in any::<u64>(), n in 1usize..7) {
        let mut r = rng(seed);
        let lattice = random_lattice(&mut r, n, 2, true, false);
        let observed = random_observations(&mut r, n, lattice.num_tags());
        if let Ok(c) = lattice.constrained_log_partition(&observed) {
            prop_assert!(c <= lattice.log_partition().unwrap() + 1e-9);
        }
    }

    #[test]
    fn viterbi_output_is_grammatical(seed in any::<u64>(), n in 1usize..7, bias in 0.0f64..3.0) {
        let mut r = rng(seed);
        let lattice = random_lattice(&mut r, n, 2, true, false);
        let (path, score) = lattice.viterbi(bias).unwrap();
        let idx: Vec<usize> = path.iter().map(|t| t.index()).collect();
        prop_assert!(lattice.mask().is_valid(&idx));
        let o = idx.iter().filter(|&&y| y == 0).count() as f64;
        prop_assert!((lattice.path_score(&idx).unwrap() - bias * o - score).abs() < 1e-9);
    }
}
