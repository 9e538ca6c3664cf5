mod common;

use std::sync::Arc;

use proptest::prelude::*;

use msdesign_core::aberration::{
    compute_bki_matrix, compute_bki_partial, compute_bki_regular, regular_table,
};
use msdesign_core::cli;
use msdesign_core::gf2::{letters, BitMatrix, BitVector};
use msdesign_core::key::{
    algorithm2_fractional, expand_design, template_for, to_pm1, FactorSplit, GeneratorSet, PoolSet,
};
use msdesign_core::sib::particle_rng;
use msdesign_core::structure::BlockStructure;

use common::*;

const STRUCTURES: &[&str] = &[
    "8", "2/4", "4/2", "8/4", "2/8", "4/4", "4x4", "2x8", "2/2/2", "2/(2x4)", "2/(4x4)", "(2x2)/4",
    "7x4", "3x5",
];

/// Regular configurations: structure, n, l0 and a row/column split when
/// the structure is crossed.
const REGULAR: &[(&str, usize, usize, Option<&str>)] = &[
    ("8/4", 5, 0, None),
    ("8/4", 7, 2, None),
    ("2/8", 5, 1, None),
    ("4/4", 6, 2, None),
    ("2/2/2", 4, 1, None),
    ("4x4", 5, 1, Some("rows=A..C,cols=D..E")),
    ("2/(4x4)", 7, 2, Some("rows=A..D,cols=E..G")),
];

/// Complete factorials (no treatment generators) with at most one nesting
/// step.
const COMPLETE: &[(&str, usize, Option<&str>)] = &[
    ("8/4", 5, None),
    ("2/8", 4, None),
    ("4/4", 4, None),
    ("4x4", 4, Some("rows=A..B,cols=C..D")),
];

fn sample(
    expr: &str,
    n: usize,
    l0: usize,
    split: Option<&str>,
    seed: u64,
) -> (BlockStructure, GeneratorSet) {
    let b = BlockStructure::parse(expr).unwrap();
    let split = split.map(|s| FactorSplit::parse(s, &letters(n)).unwrap());
    let t = Arc::new(template_for(&b, n, l0, split.as_ref()).unwrap());
    let pools = PoolSet::for_template(&t, l0 > 0).unwrap();
    let gs = algorithm2_fractional(&t, &pools, &mut particle_rng(seed, 0)).unwrap();
    (b, gs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn projectors_are_orthogonal_idempotent_and_complete(i in 0..STRUCTURES.len()) {
        let b = BlockStructure::parse_any(STRUCTURES[i]).unwrap();
        prop_assert!(projectors_ok(&b));
    }

    #[test]
    fn three_word_count_paths_agree(i in 0..REGULAR.len(), seed in any::<u64>()) {
        let (expr, n, l0, split) = REGULAR[i];
        let (b, gs) = sample(expr, n, l0, split, seed);
        let design = to_pm1(&expand_design(&gs).unwrap());
        let matrix = compute_bki_matrix(&design, &b.strata().unwrap()).unwrap();
        let words = compute_bki_regular(&gs.words_by_stratum().unwrap(), b.n_units());
        prop_assert_eq!(&matrix, &words);
        prop_assert_eq!(&regular_table(&gs).unwrap(), &words);
        prop_assert!(close_to(&matrix, &eigen_oracle(&design, &b)));
    }

    #[test]
    fn complete_keys_are_involutions(i in 0..COMPLETE.len(), seed in any::<u64>()) {
        let (expr, n, split) = COMPLETE[i];
        let (_, gs) = sample(expr, n, 0, split, seed);
        let k = gs.key().unwrap();
        let inv = k.invert().unwrap();
        prop_assert_eq!(inv.rows(), k.rows());
        let stored = gs.key_inverse();
        prop_assert_eq!(k.rows(), stored.rows());
    }

    #[test]
    fn keys_times_their_inverse_are_identity(i in 0..REGULAR.len(), seed in any::<u64>()) {
        let (expr, n, l0, split) = REGULAR[i];
        let (_, gs) = sample(expr, n, l0, split, seed);
        let k = gs.key().unwrap();
        prop_assert!(k.mul(&gs.key_inverse()).unwrap().is_identity());
    }

    #[test]
    fn inverse_of_random_full_rank_matrix(bits in proptest::collection::vec(any::<u8>(), 6)) {
        let rows: Vec<BitVector> = bits.iter().map(|&b| BitVector::from_u64(6, b as u64 & 63)).collect();
        let m = BitMatrix::from_rows(rows).unwrap();
        if m.rank() == 6 {
            prop_assert!(m.mul(&m.invert().unwrap()).unwrap().is_identity());
        } else {
            prop_assert!(m.invert().is_err());
        }
    }

    #[test]
    fn full_presence_matches_the_matrix_path(i in 0..STRUCTURES.len(), seed in any::<u64>()) {
        let b = BlockStructure::parse_any(STRUCTURES[i]).unwrap();
        let n = 4;
        let mut rng = particle_rng(seed, 0);
        let design: Vec<Vec<i8>> = (0..b.n_units())
            .map(|_| (0..n).map(|_| if rand::Rng::gen_bool(&mut rng, 0.5) { 1 } else { -1 }).collect())
            .collect();
        let s = b.strata().unwrap();
        let full = compute_bki_matrix(&design, &s).unwrap();
        let partial = compute_bki_partial(&design, &vec![true; b.n_units()], &s).unwrap();
        prop_assert_eq!(&full, &partial);
        prop_assert!(close_to(&full, &eigen_oracle(&design, &b)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn global_best_is_monotone_and_reproducible(i in 0..4usize, seed in 0u64..1000) {
        let seed = seed.to_string();
        let args: Vec<&str> = match i {
            0 => vec!["--structure", "8/4", "--n", "9"],
            1 => vec!["--structure", "2/(4x4)", "--n", "8", "--split", "rows=A..E,cols=F..H"],
            2 => vec!["--mode", "nonregular", "--structure", "8", "--n", "5"],
            _ => vec!["--mode", "nonregular", "--structure", "4/4", "--n", "4"],
        };
        let mut args = args;
        args.extend_from_slice(&["--S", "10", "--T", "10", "--seed", &seed]);
        let c = config(&args);
        let a = cli::search(&c).unwrap();
        let b = cli::search(&c).unwrap();
        prop_assert_eq!(&a.design, &b.design);
        prop_assert_eq!(&a.criterion, &b.criterion);
        prop_assert!(a.trace.windows(2).all(|w| w[1].best <= w[0].best));
        prop_assert_eq!(a.trace.last().unwrap().best.clone(), a.criterion.clone());
    }
}
