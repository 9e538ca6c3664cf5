#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::{DMatrix, SymmetricEigen};
use num_traits::{One, Zero};

use msdesign_core::aberration::{format_vector, WordlengthTable};
use msdesign_core::cli::{self, Cli, Command, Config};
use msdesign_core::structure::BlockStructure;
use msdesign_core::Rational;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

pub fn fixture_str(name: &str) -> String {
    fixture(name).to_string_lossy().into_owned()
}

/// Runs the command line and returns what it printed.
pub fn run_cli(args: &[&str]) -> msdesign_core::Result<String> {
    let mut out = Vec::new();
    let mut full = vec!["msdesign"];
    full.extend_from_slice(args);
    cli::run(full, &mut out)?;
    Ok(String::from_utf8(out).expect("utf-8 output"))
}

/// Search configuration from command-line style arguments.
pub fn config(args: &[&str]) -> Config {
    let mut full = vec!["msdesign", "search"];
    full.extend_from_slice(args);
    match <Cli as clap::Parser>::try_parse_from(full).unwrap().command {
        Command::Search(c) => c.merged().unwrap(),
        _ => unreachable!(),
    }
}

/// `G<i>-MA {...}` lines from a printed report.
pub fn report_lines(out: &str) -> Vec<String> {
    out.lines()
        .filter(|l| l.starts_with('G') && l.contains("-MA"))
        .map(str::to_string)
        .collect()
}

pub fn line(label: &str, values: &[Rational]) -> String {
    format!("{label}-MA {}", format_vector(values))
}

pub fn ints(v: &[i64]) -> Vec<Rational> {
    v.iter()
        .map(|&x| Rational::from_integer(x as i128))
        .collect()
}

pub fn matmul(a: &[Vec<Rational>], b: &[Vec<Rational>]) -> Vec<Vec<Rational>> {
    let n = a.len();
    let m = b[0].len();
    let mut c = vec![vec![Rational::zero(); m]; n];
    for i in 0..n {
        for (k, bk) in b.iter().enumerate() {
            if a[i][k].is_zero() {
                continue;
            }
            for j in 0..m {
                c[i][j] += a[i][k] * bk[j];
            }
        }
    }
    c
}

/// Idempotence, mutual orthogonality and completeness of the stratum
/// projectors.
pub fn projectors_ok(b: &BlockStructure) -> bool {
    let s = b.strata().unwrap();
    let n = b.n_units();
    let ps: Vec<Vec<Vec<Rational>>> = (0..s.n_strata()).map(|f| s.projector(f)).collect();
    let zero = vec![vec![Rational::zero(); n]; n];
    let mut sum = zero.clone();
    for (f, p) in ps.iter().enumerate() {
        if &matmul(p, p) != p {
            return false;
        }
        for (g, q) in ps.iter().enumerate() {
            if f != g && matmul(p, q) != zero {
                return false;
            }
        }
        for i in 0..n {
            for j in 0..n {
                sum[i][j] += p[i][j];
            }
        }
    }
    (0..n).all(|i| {
        (0..n).all(|j| {
            sum[i][j]
                == if i == j {
                    Rational::one()
                } else {
                    Rational::zero()
                }
        })
    })
}

/// Word counts from a numeric eigendecomposition of `Σ_G 2^g A_G`, where
/// `A_G` averages over the classes of unit factor `G`. Each eigenspace is
/// assigned to the coarsest factor whose class-constant vectors contain it.
pub fn eigen_oracle(design: &[Vec<i8>], b: &BlockStructure) -> Vec<Vec<f64>> {
    let n_units = b.n_units();
    let m = b.n_factors();
    let averaging = |g: usize| {
        let f = b.factor(g);
        let sizes = f.class_sizes();
        DMatrix::from_fn(n_units, n_units, |i, j| {
            let c = f.class_of()[i];
            if c == f.class_of()[j] {
                1.0 / sizes[c] as f64
            } else {
                0.0
            }
        })
    };
    let avg: Vec<DMatrix<f64>> = (0..m).map(averaging).collect();
    let mut mix = DMatrix::zeros(n_units, n_units);
    for (g, a) in avg.iter().enumerate() {
        mix += a * (1u64 << g) as f64;
    }
    let eig = SymmetricEigen::new(mix);
    let mut order: Vec<usize> = (0..n_units).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
    let mut projector_of = vec![DMatrix::<f64>::zeros(n_units, n_units); m];
    let mut start = 0;
    while start < n_units {
        let lambda = eig.eigenvalues[order[start]];
        let mut end = start;
        while end < n_units && (eig.eigenvalues[order[end]] - lambda).abs() < 1e-6 {
            end += 1;
        }
        let mut q = DMatrix::<f64>::zeros(n_units, n_units);
        for &i in &order[start..end] {
            let v = eig.eigenvectors.column(i);
            q += v * v.transpose();
        }
        let owner = (0..m)
            .filter(|&g| (&avg[g] * &q - &q).norm() < 1e-6)
            .min_by_key(|&g| b.factor(g).n_classes())
            .expect("every eigenspace lies in the finest class space");
        projector_of[owner] += q;
        start = end;
    }
    let n = design[0].len();
    let mut out = vec![vec![0.0; m]; n];
    for set in 1u64..(1u64 << n) {
        let k = set.count_ones() as usize;
        let u = nalgebra::DVector::from_fn(n_units, |r, _| {
            (0..n)
                .filter(|&j| set >> j & 1 == 1)
                .map(|j| design[r][j] as f64)
                .product::<f64>()
        });
        for (f, p) in projector_of.iter().enumerate() {
            out[k - 1][f] += (u.transpose() * p * &u)[(0, 0)] / n_units as f64;
        }
    }
    out
}

pub fn close_to(table: &WordlengthTable, oracle: &[Vec<f64>]) -> bool {
    table.b.iter().zip(oracle).all(|(r, o)| {
        r.iter()
            .zip(o)
            .all(|(x, y)| (msdesign_core::aberration::to_f64(x) - y).abs() < 1e-8)
    })
}
