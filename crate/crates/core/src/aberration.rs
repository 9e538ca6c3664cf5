//! Generalized word counts per stratum and the aberration criteria built on
//! them.

use std::cmp::Ordering;
use std::fmt;

use num_traits::{Signed, ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::key::{GeneratorSet, StratifiedWordSet};
use crate::structure::{BlockStructure, StratumDecomposition, VarianceVector};
use crate::Rational;

/// Largest factor count for the projection-based computation.
pub const MAX_MATRIX_FACTORS: usize = 16;

/// `B_{k,i}` for `k = 1..n` and every stratum `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordlengthTable {
    pub n: usize,
    pub n_units: usize,
    pub strata: Vec<String>,
    /// `b[k - 1][i]`.
    pub b: Vec<Vec<Rational>>,
}

impl WordlengthTable {
    pub fn zeros(n: usize, n_units: usize, strata: Vec<String>) -> Self {
        let m = strata.len();
        WordlengthTable {
            n,
            n_units,
            strata,
            b: vec![vec![Rational::zero(); m]; n],
        }
    }

    /// Table from integer word counts `[k - 1][i]`.
    pub fn from_counts(counts: &[Vec<u64>], n_units: usize, strata: Vec<String>) -> Self {
        WordlengthTable {
            n: counts.len(),
            n_units,
            strata,
            b: counts
                .iter()
                .map(|r| {
                    r.iter()
                        .map(|&c| Rational::from_integer(c as i128))
                        .collect()
                })
                .collect(),
        }
    }

    /// `(B_{1,i}, ..., B_{n,i})`.
    pub fn stratum_row(&self, i: usize) -> Vec<Rational> {
        self.b.iter().map(|r| r[i]).collect()
    }

    /// Sum over all strata for each length.
    pub fn totals(&self) -> Vec<Rational> {
        self.b
            .iter()
            .map(|r| r.iter().fold(Rational::zero(), |a, b| a + b))
            .collect()
    }
}

/// Generalized word counts from the stratum projections of every factorial
/// effect column of a ±1 design.
pub fn compute_bki_matrix(
    design: &[Vec<i8>],
    strata: &StratumDecomposition,
) -> Result<WordlengthTable> {
    let present = vec![true; design.len()];
    compute_bki_partial(design, &present, strata)
}

/// As [`compute_bki_matrix`] when only the units flagged in `present` carry
/// runs; class averages use the surviving members and the normalizing run
/// count is the number of present units.
pub fn compute_bki_partial(
    design: &[Vec<i8>],
    present: &[bool],
    strata: &StratumDecomposition,
) -> Result<WordlengthTable> {
    let n_units = strata.n_units();
    if design.len() != n_units || present.len() != n_units {
        return Err(Error::DimensionMismatch(format!(
            "design has {} rows, structure has {n_units} units",
            design.len()
        )));
    }
    let n = design
        .iter()
        .zip(present)
        .find(|(_, &p)| p)
        .map_or(0, |(r, _)| r.len());
    if design.iter().zip(present).any(|(r, &p)| p && r.len() != n) {
        return Err(Error::DimensionMismatch("ragged design rows".into()));
    }
    if n > MAX_MATRIX_FACTORS {
        return Err(Error::TooManyFactors(n, MAX_MATRIX_FACTORS));
    }
    if let Some(x) = design.iter().flatten().find(|&&x| x != 1 && x != -1) {
        return Err(Error::Invalid(format!("design entry {x} is not ±1")));
    }
    let m = strata.n_strata();
    let live: Vec<usize> = (0..n_units).filter(|&u| present[u]).collect();
    let n_live = live.len();
    if n_live == 0 {
        return Ok(WordlengthTable::zeros(n, 0, strata.names().to_vec()));
    }

    // Class membership and surviving counts per factor.
    let class_of: Vec<Vec<usize>> = (0..m)
        .map(|g| live.iter().map(|&u| strata.class_of(g)[u]).collect())
        .collect();
    let counts: Vec<Vec<i128>> = (0..m)
        .map(|g| {
            let mut c = vec![0i128; strata.n_classes(g)];
            for &k in &class_of[g] {
                c[k] += 1;
            }
            c
        })
        .collect();

    // acc[k][g][class] = Σ_{|S| = k} (class sum of u_S)².
    let mut acc: Vec<Vec<Vec<i64>>> = (0..=n)
        .map(|_| (0..m).map(|g| vec![0i64; strata.n_classes(g)]).collect())
        .collect();
    let columns: Vec<Vec<i64>> = (0..n)
        .map(|j| live.iter().map(|&unit| design[unit][j] as i64).collect())
        .collect();
    let mut u = vec![1i64; n_live];
    let mut set = 0u64;
    let mut sums: Vec<Vec<i64>> = (0..m).map(|g| vec![0i64; strata.n_classes(g)]).collect();
    for i in 1u64..(1u64 << n) {
        let bit = i.trailing_zeros() as usize;
        set ^= 1 << bit;
        for (x, &c) in u.iter_mut().zip(&columns[bit]) {
            *x *= c;
        }
        let k = set.count_ones() as usize;
        for g in 0..m {
            let sg = &mut sums[g];
            sg.iter_mut().for_each(|s| *s = 0);
            for (x, &c) in u.iter().zip(&class_of[g]) {
                sg[c] += x;
            }
            for (a, &s) in acc[k][g].iter_mut().zip(sg.iter()) {
                *a += s * s;
            }
        }
    }

    // Every class term shares the denominator lcm(counts) · n_live.
    let lcm = counts
        .iter()
        .flatten()
        .filter(|&&c| c > 0)
        .fold(1i128, |l, &c| l / gcd(l, c) * c);
    let mobius = strata.mobius();
    let mut table = WordlengthTable::zeros(n, n_live, strata.names().to_vec());
    let den = lcm * n_live as i128;
    for k in 1..=n {
        let q: Vec<i128> = (0..m)
            .map(|g| {
                acc[k][g]
                    .iter()
                    .zip(&counts[g])
                    .filter(|(_, &c)| c > 0)
                    .map(|(&s, &c)| s as i128 * (lcm / c))
                    .sum()
            })
            .collect();
        for f in 0..m {
            let num: i128 = (0..m).map(|g| q[g] * mobius[f][g] as i128).sum();
            table.b[k - 1][f] = Rational::new(num, den);
        }
    }
    Ok(table)
}

fn gcd(mut a: i128, mut b: i128) -> i128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.abs()
}

/// Word counts of a regular design: stratum words are counted directly and
/// the finest stratum receives the remaining effects of each length.
pub fn compute_bki_regular(words: &StratifiedWordSet, n_units: usize) -> WordlengthTable {
    let m = words.strata.len();
    let n = words.n;
    let e = m - 1;
    let mut counts = vec![vec![0u64; m]; n];
    for (&i, list) in &words.words {
        if i == e {
            continue;
        }
        for &(_, len) in list {
            counts[len - 1][i] += 1;
        }
    }
    for k in 1..=n {
        let rest: u64 = counts[k - 1][..e].iter().sum();
        counts[k - 1][e] = binomial(n, k) - rest;
    }
    WordlengthTable::from_counts(&counts, n_units, words.strata.clone())
}

pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) as u64 / (i + 1) as u64)
}

/// Variance-weighted pattern
/// `Σ_{i<m} (1/ξ_m − 1/ξ_i)·(B_{1,i}, ..., B_{n,i})`.
pub fn compute_w(
    table: &WordlengthTable,
    xi: &VarianceVector,
    b: &BlockStructure,
) -> Result<Vec<Rational>> {
    let m = table.strata.len();
    if xi.xi.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "{} variances for {m} strata",
            xi.xi.len()
        )));
    }
    if !b.is_feasible(xi) {
        return Err(Error::InfeasibleXi(
            "coarser strata must not have smaller variance".into(),
        ));
    }
    let inv_last = xi.xi[m - 1]
        .reciprocal()
        .filter(|r| r.is_positive())
        .ok_or_else(|| {
            Error::InfeasibleXi("the finest stratum variance must be finite and positive".into())
        })?;
    let mut w = vec![Rational::zero(); table.n];
    for i in 0..m - 1 {
        let inv = xi.xi[i].reciprocal().ok_or_else(|| {
            Error::InfeasibleXi(format!("zero variance in stratum {}", table.strata[i]))
        })?;
        let weight = inv_last - inv;
        for (k, acc) in w.iter_mut().enumerate() {
            *acc += weight * table.b[k][i];
        }
    }
    Ok(w)
}

/// Whether `g` is upward closed in `B \ {E}` and contains `U`.
pub fn is_admissible(b: &BlockStructure, g: &[usize]) -> bool {
    let e = b.equality_index();
    !g.is_empty()
        && g.contains(&0)
        && g.iter()
            .all(|&f| f < b.n_factors() && (f != e || b.n_factors() == 1))
        && g.iter().all(|&f| {
            (0..b.n_factors())
                .filter(|&h| h != e && b.lt(f, h))
                .all(|h| g.contains(&h))
        })
}

/// `W_G`: entrywise sum of the stratum rows over `G`.
pub fn compute_wg(
    table: &WordlengthTable,
    b: &BlockStructure,
    g: &[usize],
) -> Result<Vec<Rational>> {
    if !is_admissible(b, g) {
        let names: Vec<&str> = g
            .iter()
            .filter_map(|&i| b.factors().get(i).map(|f| f.name()))
            .collect();
        return Err(Error::NotAdmissible(format!("{{{}}}", names.join(","))));
    }
    Ok(table
        .b
        .iter()
        .map(|r| g.iter().fold(Rational::zero(), |a, &i| a + r[i]))
        .collect())
}

/// Concatenated `W_G` vectors for a criterion sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CriterionVector(pub Vec<Rational>);

impl CriterionVector {
    pub fn from_table(
        table: &WordlengthTable,
        b: &BlockStructure,
        sequence: &[Vec<usize>],
    ) -> Result<Self> {
        let mut v = Vec::with_capacity(table.n * sequence.len());
        for g in sequence {
            v.extend(compute_wg(table, b, g)?);
        }
        Ok(CriterionVector(v))
    }

    pub fn values(&self) -> &[Rational] {
        &self.0
    }
}

/// Lexicographic comparison of criterion vectors.
pub fn compare(a: &CriterionVector, b: &CriterionVector) -> Result<Ordering> {
    if a.0.len() != b.0.len() {
        return Err(Error::LengthMismatch(a.0.len(), b.0.len()));
    }
    Ok(a.0.cmp(&b.0))
}

/// Renders a value as an integer, a short exact decimal, or rounded to five
/// decimals.
pub fn format_value(v: &Rational) -> String {
    if v.is_integer() {
        return v.to_integer().to_string();
    }
    let mut den = *v.denom();
    let (mut twos, mut fives) = (0, 0);
    while den % 2 == 0 {
        den /= 2;
        twos += 1;
    }
    while den % 5 == 0 {
        den /= 5;
        fives += 1;
    }
    let places = twos.max(fives);
    if den == 1 && places <= 5 {
        let scaled = (v * Rational::from_integer(10i128.pow(places))).to_integer();
        return decimal(scaled, places as usize);
    }
    let scaled = (v * Rational::from_integer(100_000)).round().to_integer();
    decimal(scaled, 5)
}

fn decimal(scaled: i128, places: usize) -> String {
    let sign = if scaled < 0 { "-" } else { "" };
    let digits = format!("{:0width$}", scaled.abs(), width = places + 1);
    let (int, frac) = digits.split_at(digits.len() - places);
    format!("{sign}{int}.{frac}")
}

pub fn format_vector(v: &[Rational]) -> String {
    let parts: Vec<String> = v.iter().map(format_value).collect();
    format!("{{{}}}", parts.join(", "))
}

/// One `W_G` line of a report.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportLine {
    pub label: String,
    pub members: Vec<String>,
    pub values: Vec<Rational>,
}

impl fmt::Display for ReportLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-MA {}", self.label, format_vector(&self.values))
    }
}

/// `W_G` for every admissible subset, labeled `G1, G2, ...` in the
/// structure's admissible order.
pub fn report(table: &WordlengthTable, b: &BlockStructure) -> Result<Vec<ReportLine>> {
    b.admissible_subsets()
        .iter()
        .enumerate()
        .map(|(i, g)| {
            Ok(ReportLine {
                label: format!("G{}", i + 1),
                members: g.iter().map(|&f| b.factor(f).name().to_string()).collect(),
                values: compute_wg(table, b, g)?,
            })
        })
        .collect()
}

/// Float view of a rational, for summaries.
pub fn to_f64(v: &Rational) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Word-count table of a regular design straight from its generator set.
pub fn regular_table(gs: &GeneratorSet) -> Result<WordlengthTable> {
    let b = gs.template().structure();
    Ok(WordlengthTable::from_counts(
        &gs.word_counts()?,
        b.n_units(),
        b.names(),
    ))
}
