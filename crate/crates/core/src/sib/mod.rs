//! Swarm-intelligence-based search over regular and nonregular designs.
//!
//! Every particle keeps its own random stream derived from the master seed,
//! so a run is reproducible regardless of how rayon schedules the particles.

use std::cmp::Ordering;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aberration::CriterionVector;
use crate::error::{Error, Result};
use crate::Rational;

pub mod nonregular;
pub mod regular;

pub use nonregular::{Constraints, Layout, NonregularProblem, Predicate};
pub use regular::RegularProblem;

/// Substitutions per source for one stratum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub gb: usize,
    pub lb: usize,
    pub new: usize,
}

impl SourceCounts {
    pub fn new(gb: usize, lb: usize, new: usize) -> Self {
        SourceCounts { gb, lb, new }
    }

    pub fn total(&self) -> usize {
        self.gb + self.lb + self.new
    }
}

/// Substitution counts per stratum (regular search) or for the whole design
/// (nonregular search, a single entry).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QVector {
    pub per_stratum: Vec<(String, SourceCounts)>,
}

impl QVector {
    pub fn single(counts: SourceCounts) -> Self {
        QVector {
            per_stratum: vec![("*".into(), counts)],
        }
    }

    /// Splits overall totals across strata in proportion to their number of
    /// free rows (largest remainder), never exceeding a stratum's capacity.
    pub fn distribute(totals: SourceCounts, slot_counts: &[(String, usize)]) -> Result<Self> {
        let capacity: usize = slot_counts.iter().map(|(_, c)| c).sum();
        if totals.total() > capacity {
            return Err(Error::InvalidQ(format!(
                "{} substitutions requested but only {capacity} free rows",
                totals.total()
            )));
        }
        let mut left: Vec<usize> = slot_counts.iter().map(|(_, c)| *c).collect();
        let mut out: Vec<SourceCounts> = vec![SourceCounts::default(); slot_counts.len()];
        for source in 0..3 {
            let want = [totals.gb, totals.lb, totals.new][source];
            let share = apportion(want, &left, capacity);
            for (i, s) in share.into_iter().enumerate() {
                left[i] -= s;
                match source {
                    0 => out[i].gb = s,
                    1 => out[i].lb = s,
                    _ => out[i].new = s,
                }
            }
        }
        Ok(QVector {
            per_stratum: slot_counts
                .iter()
                .map(|(l, _)| l.clone())
                .zip(out)
                .collect(),
        })
    }

    pub fn get(&self, label: &str) -> SourceCounts {
        self.per_stratum
            .iter()
            .find(|(l, _)| l == label || l == "*")
            .map(|(_, c)| *c)
            .unwrap_or_default()
    }

    pub fn totals(&self) -> SourceCounts {
        self.per_stratum
            .iter()
            .fold(SourceCounts::default(), |a, (_, c)| SourceCounts {
                gb: a.gb + c.gb,
                lb: a.lb + c.lb,
                new: a.new + c.new,
            })
    }

    /// Checks the per-stratum bounds; returns advisory warnings when the
    /// suggested ordering `new ≥ gb ≥ lb` does not hold.
    pub fn validate(&self, slot_counts: &[(String, usize)]) -> Result<Vec<String>> {
        for (label, c) in &self.per_stratum {
            let Some((_, l)) = slot_counts.iter().find(|(s, _)| s == label) else {
                return Err(Error::InvalidQ(format!(
                    "no stratum `{label}` in the template"
                )));
            };
            if c.total() > *l {
                return Err(Error::InvalidQ(format!(
                    "stratum {label}: {} substitutions for {l} generators",
                    c.total()
                )));
            }
        }
        Ok(ordering_warnings(self.totals()))
    }
}

pub(crate) fn ordering_warnings(t: SourceCounts) -> Vec<String> {
    let mut w = Vec::new();
    if !(t.new >= t.gb && t.gb >= t.lb) {
        w.push(format!(
            "substitution counts (gb {}, lb {}, new {}) do not satisfy new ≥ gb ≥ lb",
            t.gb, t.lb, t.new
        ));
    }
    w
}

fn apportion(want: usize, left: &[usize], capacity: usize) -> Vec<usize> {
    let mut share = vec![0usize; left.len()];
    if want == 0 || capacity == 0 {
        return share;
    }
    let total_left: usize = left.iter().sum();
    let mut rem: Vec<(usize, usize)> = Vec::new();
    let mut given = 0;
    for (i, &l) in left.iter().enumerate() {
        let exact = want * l;
        share[i] = (exact / total_left.max(1)).min(l);
        given += share[i];
        rem.push((exact % total_left.max(1), i));
    }
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut k = 0;
    while given < want && k < rem.len() * (want + 1) {
        let i = rem[k % rem.len()].1;
        if share[i] < left[i] {
            share[i] += 1;
            given += 1;
        }
        k += 1;
    }
    share
}

/// Outcome of the MOVE decision for one particle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MoveDecision {
    /// The mixed particle beats the local best: adopt it as both.
    NewLocalBest,
    /// The mixed particle is no worse than the current one: adopt it.
    Adopt,
    /// The mixed particle is worse than both: perturb the current one.
    Perturb,
}

/// MOVE: ties keep the incumbent local best.
pub fn move_decision(
    candidate: &CriterionVector,
    current: &CriterionVector,
    local_best: &CriterionVector,
) -> MoveDecision {
    if candidate.0 < local_best.0 {
        MoveDecision::NewLocalBest
    } else if candidate.0 <= current.0 {
        MoveDecision::Adopt
    } else {
        MoveDecision::Perturb
    }
}

/// A search space for the swarm driver.
pub trait SwarmProblem: Sync {
    type Particle: Clone + Send + Sync + PartialEq + std::fmt::Debug;

    fn random_particle(&self, rng: &mut ChaCha8Rng) -> Result<Self::Particle>;
    fn evaluate(&self, p: &Self::Particle) -> Result<CriterionVector>;
    fn mix(
        &self,
        x: &Self::Particle,
        gb: &Self::Particle,
        lb: &Self::Particle,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self::Particle>;
    /// Random replacement of `q_new` positions of `x`.
    fn perturb(&self, x: &Self::Particle, rng: &mut ChaCha8Rng) -> Result<Self::Particle>;
    /// Structural check of a visited particle.
    fn audit(&self, _p: &Self::Particle) -> bool {
        true
    }
}

/// Swarm size, iteration count and seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SibParams {
    pub swarm_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Stop after this many iterations without improvement of the global best.
    pub patience: Option<usize>,
    /// Largest number of co-optimal designs kept.
    pub max_co_optimal: usize,
}

impl SibParams {
    pub fn new(swarm_size: usize, iterations: usize, seed: u64) -> Self {
        SibParams {
            swarm_size,
            iterations,
            seed,
            patience: None,
            max_co_optimal: 64,
        }
    }
}

/// Global best after one iteration (iteration 0 is the initial swarm).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub best: Vec<Rational>,
}

#[derive(Clone, Debug)]
pub struct SearchResult<P> {
    pub best: P,
    pub best_value: CriterionVector,
    /// Distinct particles seen with the best value.
    pub co_optimal: Vec<P>,
    pub trace: Vec<TraceRecord>,
    pub iterations_run: usize,
    pub elapsed: Duration,
}

struct Member<P> {
    x: P,
    xv: CriterionVector,
    lb: P,
    lbv: CriterionVector,
    rng: ChaCha8Rng,
}

/// Per-particle random stream `j` of the master seed.
pub fn particle_rng(seed: u64, j: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(j as u64 + 1);
    r
}

/// Runs the swarm: MIX toward the global and local bests, MOVE, and update
/// the bests once per iteration.
pub fn run_sib<Pr: SwarmProblem>(
    problem: &Pr,
    params: &SibParams,
) -> Result<SearchResult<Pr::Particle>> {
    if params.swarm_size == 0 || params.iterations == 0 {
        return Err(Error::Invalid(
            "swarm size and iteration count must be positive".into(),
        ));
    }
    let start = Instant::now();
    let mut members: Vec<Member<Pr::Particle>> = (0..params.swarm_size)
        .into_par_iter()
        .map(|j| {
            let mut rng = particle_rng(params.seed, j);
            let x = problem.random_particle(&mut rng)?;
            let xv = problem.evaluate(&x)?;
            Ok(Member {
                lb: x.clone(),
                lbv: xv.clone(),
                x,
                xv,
                rng,
            })
        })
        .collect::<Result<_>>()?;

    let (mut gb, mut gbv) = best_of(&members);
    let mut co_optimal: Vec<Pr::Particle> = Vec::new();
    collect_co_optimal(&members, &gbv, &mut co_optimal, params.max_co_optimal);
    let mut trace = vec![TraceRecord {
        iteration: 0,
        best: gbv.0.clone(),
    }];
    let mut stale = 0;
    let mut iterations_run = 0;

    for t in 1..=params.iterations {
        let gb_ref = &gb;
        members.par_iter_mut().try_for_each(|m| -> Result<()> {
            let cand = problem.mix(&m.x, gb_ref, &m.lb, &mut m.rng)?;
            let cv = problem.evaluate(&cand)?;
            match move_decision(&cv, &m.xv, &m.lbv) {
                MoveDecision::NewLocalBest => {
                    m.lb = cand.clone();
                    m.lbv = cv.clone();
                    m.x = cand;
                    m.xv = cv;
                }
                MoveDecision::Adopt => {
                    m.x = cand;
                    m.xv = cv;
                }
                MoveDecision::Perturb => {
                    m.x = problem.perturb(&m.x, &mut m.rng)?;
                    m.xv = problem.evaluate(&m.x)?;
                    if m.xv.0 < m.lbv.0 {
                        m.lb = m.x.clone();
                        m.lbv = m.xv.clone();
                    }
                }
            }
            debug_assert!(
                problem.audit(&m.x),
                "visited particle violates its constraints"
            );
            Ok(())
        })?;
        iterations_run = t;

        let (cand, candv) = best_of(&members);
        if candv.0 < gbv.0 {
            gb = cand;
            gbv = candv;
            co_optimal.clear();
            stale = 0;
        } else {
            stale += 1;
        }
        collect_co_optimal(&members, &gbv, &mut co_optimal, params.max_co_optimal);
        trace.push(TraceRecord {
            iteration: t,
            best: gbv.0.clone(),
        });
        if params.patience.is_some_and(|p| stale >= p) {
            break;
        }
    }
    if !co_optimal.contains(&gb) {
        co_optimal.insert(0, gb.clone());
    }
    Ok(SearchResult {
        best: gb,
        best_value: gbv,
        co_optimal,
        trace,
        iterations_run,
        elapsed: start.elapsed(),
    })
}

fn best_of<P: Clone>(members: &[Member<P>]) -> (P, CriterionVector) {
    let mut best = 0;
    for (j, m) in members.iter().enumerate() {
        if m.lbv.0.cmp(&members[best].lbv.0) == Ordering::Less {
            best = j;
        }
    }
    (members[best].lb.clone(), members[best].lbv.clone())
}

fn collect_co_optimal<P: Clone + PartialEq>(
    members: &[Member<P>],
    value: &CriterionVector,
    out: &mut Vec<P>,
    cap: usize,
) {
    for m in members {
        if out.len() >= cap {
            return;
        }
        if m.lbv == *value && !out.contains(&m.lb) {
            out.push(m.lb.clone());
        }
    }
}

/// One step of continuous particle swarm optimization with a third
/// attractor: `v' = v + c1(gb − x) + c2(lb − x) + c3(new − x)` and
/// `x' = x + v'·dt`.
#[allow(clippy::too_many_arguments)]
pub fn continuous_pso_reference(
    position: &[f64],
    velocity: &[f64],
    gb: &[f64],
    lb: &[f64],
    new: &[f64],
    c1: f64,
    c2: f64,
    c3: f64,
    dt: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = position.len();
    assert!(
        [velocity.len(), gb.len(), lb.len(), new.len()]
            .iter()
            .all(|&l| l == n),
        "vectors must share a dimension"
    );
    let v: Vec<f64> = (0..n)
        .map(|i| {
            let x = position[i];
            velocity[i] + c1 * (gb[i] - x) + c2 * (lb[i] - x) + c3 * (new[i] - x)
        })
        .collect();
    let x = (0..n).map(|i| position[i] + v[i] * dt).collect();
    (x, v)
}

/// Number of multisets of size `k` from `n` kinds, or of `k`-subsets when
/// `distinct`; saturates at `u128::MAX`.
pub fn choose_count(n: u128, k: u128, distinct: bool) -> u128 {
    let (top, k) = if distinct {
        (n, k)
    } else {
        ((n + k).saturating_sub(1), k)
    };
    if k > top {
        return 0;
    }
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul(top - i) {
            Some(v) => v / (i + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Calls `f` with every non-decreasing (or strictly increasing when
/// `distinct`) index sequence of length `k` over `0..n`.
pub fn for_each_combination(
    n: usize,
    k: usize,
    distinct: bool,
    f: &mut dyn FnMut(&[usize]) -> Result<()>,
) -> Result<()> {
    if k == 0 {
        return f(&[]);
    }
    if n == 0 || (distinct && k > n) {
        return Ok(());
    }
    let mut idx: Vec<usize> = if distinct {
        (0..k).collect()
    } else {
        vec![0; k]
    };
    loop {
        f(&idx)?;
        // Advance to the next sequence.
        let mut i = k;
        loop {
            if i == 0 {
                return Ok(());
            }
            i -= 1;
            let limit = if distinct { n - (k - i) } else { n - 1 };
            if idx[i] < limit {
                idx[i] += 1;
                for j in i + 1..k {
                    idx[j] = if distinct { idx[j - 1] + 1 } else { idx[i] };
                }
                break;
            }
        }
    }
}

/// Exhaustive optimum over a finite space.
#[derive(Clone, Debug)]
pub struct OracleResult<P> {
    pub best: P,
    pub best_value: CriterionVector,
    /// Enumerated candidates attaining the optimum.
    pub n_optimal: usize,
    pub n_evaluated: usize,
}

/// Default cap on the number of enumerated candidates.
pub const ORACLE_CAP: u128 = 1_000_000;

#[cfg(test)]
mod tests {
    use super::*;

    fn cv(v: &[i128]) -> CriterionVector {
        CriterionVector(v.iter().map(|&x| Rational::from_integer(x)).collect())
    }

    #[test]
    fn move_rules() {
        assert_eq!(
            move_decision(&cv(&[0, 1]), &cv(&[0, 3]), &cv(&[0, 2])),
            MoveDecision::NewLocalBest
        );
        assert_eq!(
            move_decision(&cv(&[0, 2]), &cv(&[0, 3]), &cv(&[0, 2])),
            MoveDecision::Adopt
        );
        assert_eq!(
            move_decision(&cv(&[0, 4]), &cv(&[0, 3]), &cv(&[0, 2])),
            MoveDecision::Perturb
        );
    }

    #[test]
    fn pso_reference() {
        let (x, v) =
            continuous_pso_reference(&[0.5], &[2.0], &[9.0], &[9.0], &[9.0], 0.0, 0.0, 0.0, 0.5);
        assert_eq!((x, v), (vec![1.5], vec![2.0]));
        let (_, v) =
            continuous_pso_reference(&[1.0], &[0.3], &[1.0], &[1.0], &[1.0], 2.0, 3.0, 4.0, 1.0);
        assert_eq!(v, vec![0.3]);
        let (x, _) =
            continuous_pso_reference(&[0.0], &[0.0], &[1.0], &[2.0], &[3.0], 1.0, 1.0, 1.0, 1.0);
        assert_eq!(x, vec![6.0]);
    }

    #[test]
    fn distribute_totals() {
        let slots = vec![("B".to_string(), 3), ("U".to_string(), 8)];
        let q = QVector::distribute(SourceCounts::new(4, 1, 5), &slots).unwrap();
        assert_eq!(q.totals(), SourceCounts::new(4, 1, 5));
        assert!(q.validate(&slots).unwrap().is_empty());
        assert!(q.get("B").total() <= 3 && q.get("U").total() <= 8);
        assert!(matches!(
            QVector::distribute(SourceCounts::new(6, 6, 0), &slots),
            Err(Error::InvalidQ(_))
        ));
        let warn = QVector::distribute(SourceCounts::new(1, 3, 0), &slots).unwrap();
        assert_eq!(warn.validate(&slots).unwrap().len(), 1);
    }

    #[test]
    fn combinations() {
        let mut seen = Vec::new();
        for_each_combination(3, 2, false, &mut |c| {
            seen.push(c.to_vec());
            Ok(())
        })
        .unwrap();
        assert_eq!(seen.len(), 6);
        assert_eq!(choose_count(3, 2, false), 6);
        let mut n = 0;
        for_each_combination(5, 3, true, &mut |_| {
            n += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(n, 10);
        assert_eq!(choose_count(5, 3, true), 10);
        assert_eq!(choose_count(8, 4, false), 330);
    }
}
