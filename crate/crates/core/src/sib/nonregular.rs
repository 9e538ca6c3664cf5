//! Search over run assignments for nonregular designs.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{
    choose_count, for_each_combination, OracleResult, SearchResult, SibParams, SourceCounts,
    SwarmProblem,
};
use crate::aberration::{compute_bki_partial, CriterionVector};
use crate::error::{Error, Result};
use crate::structure::{BlockStructure, Shape, StratumDecomposition};

/// How particle slots map onto units.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layout {
    /// One slot per unit.
    Direct,
    /// For a crossed structure `a x b`, the slots are the `a` rows (or the
    /// `b` columns) and the other side carries a fixed table of levels.
    /// Full runs list the fixed factors first.
    Crossed {
        search_rows: bool,
        fixed: Vec<Vec<i8>>,
    },
}

/// Restrictions on candidate runs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Predicate {
    /// Candidate runs matching this pattern (`None` = any level) are
    /// excluded.
    Forbidden(Vec<Option<i8>>),
    /// Column `column` of the run must be constant within each class of
    /// unit factor `factor` (direct layout only).
    ConstantWithin { column: usize, factor: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Constraints {
    pub predicates: Vec<Predicate>,
    /// No candidate run may be used twice.
    pub distinct: bool,
}

/// A nonregular search problem.
#[derive(Clone, Debug)]
pub struct NonregularProblem {
    structure: BlockStructure,
    strata: StratumDecomposition,
    candidates: Vec<Vec<i8>>,
    layout: Layout,
    constraints: Constraints,
    sequence: Vec<Vec<usize>>,
    q: SourceCounts,
    units_of_slot: Vec<Vec<usize>>,
    /// Fixed part of each unit's run (crossed layout).
    fixed_of_unit: Vec<Vec<i8>>,
    exchangeable: bool,
}

impl NonregularProblem {
    pub fn new(
        structure: BlockStructure,
        candidates: Vec<Vec<i8>>,
        layout: Layout,
        constraints: Constraints,
        sequence: Vec<Vec<usize>>,
        q: SourceCounts,
    ) -> Result<Self> {
        let strata = structure.strata()?;
        let width = candidates.first().map_or(0, Vec::len);
        if candidates.iter().any(|c| c.len() != width) {
            return Err(Error::DimensionMismatch(
                "candidate runs of different lengths".into(),
            ));
        }
        let candidates: Vec<Vec<i8>> = candidates
            .into_iter()
            .filter(|c| {
                !constraints.predicates.iter().any(|p| match p {
                    Predicate::Forbidden(pat) => {
                        pat.len() <= c.len()
                            && pat.iter().zip(c).all(|(p, x)| p.is_none_or(|p| p == *x))
                    }
                    Predicate::ConstantWithin { .. } => false,
                })
            })
            .collect();
        if candidates.is_empty() {
            return Err(Error::EmptyCandidateSet);
        }
        let n_units = structure.n_units();
        let (units_of_slot, fixed_of_unit, exchangeable) = match &layout {
            Layout::Direct => (
                (0..n_units).map(|u| vec![u]).collect::<Vec<_>>(),
                vec![Vec::new(); n_units],
                structure.n_factors() <= 2,
            ),
            Layout::Crossed { search_rows, fixed } => {
                let (a, b) = match structure.shape() {
                    Some(Shape::Cross(x, y)) => match (&**x, &**y) {
                        (Shape::Leaf(a), Shape::Leaf(b)) => (*a, *b),
                        _ => {
                            return Err(Error::UnsupportedStructure(
                                "crossed layout needs `a x b`".into(),
                            ))
                        }
                    },
                    _ => {
                        return Err(Error::UnsupportedStructure(
                            "crossed layout needs `a x b`".into(),
                        ))
                    }
                };
                let (slots, other) = if *search_rows { (a, b) } else { (b, a) };
                if fixed.len() != other {
                    return Err(Error::DimensionMismatch(format!(
                        "fixed side has {} runs, structure needs {other}",
                        fixed.len()
                    )));
                }
                let unit = |s: usize, o: usize| if *search_rows { s * b + o } else { o * b + s };
                let units: Vec<Vec<usize>> = (0..slots)
                    .map(|s| (0..other).map(|o| unit(s, o)).collect())
                    .collect();
                let mut fixed_of_unit = vec![Vec::new(); n_units];
                for s in 0..slots {
                    for o in 0..other {
                        fixed_of_unit[unit(s, o)] = fixed[o].clone();
                    }
                }
                (units, fixed_of_unit, true)
            }
        };
        if !matches!(layout, Layout::Direct)
            && constraints
                .predicates
                .iter()
                .any(|p| matches!(p, Predicate::ConstantWithin { .. }))
        {
            return Err(Error::Invalid(
                "constancy constraints apply to the direct layout only".into(),
            ));
        }
        for p in &constraints.predicates {
            if let Predicate::ConstantWithin { column, factor } = p {
                if *column >= width || *factor >= structure.n_factors() {
                    return Err(Error::Invalid("constancy constraint out of range".into()));
                }
            }
        }
        if q.total() > units_of_slot.len() {
            return Err(Error::InvalidQ(format!(
                "{} substitutions for {} runs",
                q.total(),
                units_of_slot.len()
            )));
        }
        Ok(NonregularProblem {
            structure,
            strata,
            candidates,
            layout,
            constraints,
            sequence,
            q,
            units_of_slot,
            fixed_of_unit,
            exchangeable,
        })
    }

    pub fn structure(&self) -> &BlockStructure {
        &self.structure
    }

    pub fn candidates(&self) -> &[Vec<i8>] {
        &self.candidates
    }

    pub fn n_slots(&self) -> usize {
        self.units_of_slot.len()
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn q(&self) -> SourceCounts {
        self.q
    }

    /// Full `N × n` design for an assignment; holes leave units empty.
    pub fn design(&self, slots: &[Option<usize>]) -> (Vec<Vec<i8>>, Vec<bool>) {
        let n_units = self.structure.n_units();
        let width = self.fixed_of_unit.first().map_or(0, Vec::len) + self.candidates[0].len();
        let mut table = vec![vec![1i8; width]; n_units];
        let mut present = vec![false; n_units];
        for (s, c) in slots.iter().enumerate() {
            let Some(c) = c else { continue };
            for &u in &self.units_of_slot[s] {
                let mut row = self.fixed_of_unit[u].clone();
                row.extend_from_slice(&self.candidates[*c]);
                table[u] = row;
                present[u] = true;
            }
        }
        (table, present)
    }

    pub fn full_design(&self, p: &[usize]) -> Vec<Vec<i8>> {
        let slots: Vec<Option<usize>> = p.iter().map(|&c| Some(c)).collect();
        self.design(&slots).0
    }

    fn evaluate_partial(&self, slots: &[Option<usize>]) -> Result<CriterionVector> {
        let (table, present) = self.design(slots);
        let t = compute_bki_partial(&table, &present, &self.strata)?;
        CriterionVector::from_table(&t, &self.structure, &self.sequence)
    }

    /// Whether candidate `c` may occupy slot `s` given the other slots.
    pub fn allowed(&self, slots: &[Option<usize>], s: usize, c: usize) -> bool {
        if self.constraints.distinct
            && slots
                .iter()
                .enumerate()
                .any(|(t, &o)| t != s && o == Some(c))
        {
            return false;
        }
        for p in &self.constraints.predicates {
            if let Predicate::ConstantWithin { column, factor } = p {
                let class = self.structure.factor(*factor).class_of();
                let level = self.candidates[c][*column];
                for (t, o) in slots.iter().enumerate() {
                    if let Some(o) = o {
                        if t != s && class[t] == class[s] && self.candidates[*o][*column] != level {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }

    fn satisfies(&self, p: &[usize]) -> bool {
        let slots: Vec<Option<usize>> = p.iter().map(|&c| Some(c)).collect();
        (0..p.len()).all(|s| p[s] < self.candidates.len() && self.allowed(&slots, s, p[s]))
    }

    fn random_fill(
        &self,
        slots: &mut [Option<usize>],
        s: usize,
        avoid: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let ok: Vec<usize> = (0..self.candidates.len())
            .filter(|&c| Some(c) != avoid && self.allowed(slots, s, c))
            .collect();
        if ok.is_empty() {
            if avoid.is_some() {
                return Ok(());
            }
            return Err(Error::EmptyCandidateSet);
        }
        slots[s] = Some(ok[rng.gen_range(0..ok.len())]);
        Ok(())
    }

    /// Greedy deletion of `k` runs followed by greedy addition of `k` runs
    /// drawn from `source`; ties are broken uniformly at random.
    fn exchange(
        &self,
        cur: &mut [Option<usize>],
        source: &[usize],
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        for _ in 0..k {
            let mut best: Option<(usize, CriterionVector)> = None;
            let mut ties = 0u32;
            for s in 0..cur.len() {
                let Some(c) = cur[s] else { continue };
                cur[s] = None;
                let v = self.evaluate_partial(cur)?;
                cur[s] = Some(c);
                if keep(&mut best, &mut ties, &v, rng) {
                    best = Some((s, v));
                }
            }
            if let Some((s, _)) = best {
                cur[s] = None;
            }
        }
        let mut rows: Vec<usize> = source.to_vec();
        rows.sort_unstable();
        rows.dedup();
        let one_hole = self.exchangeable
            && self
                .constraints
                .predicates
                .iter()
                .all(|p| matches!(p, Predicate::Forbidden(_)));
        for _ in 0..k {
            let mut best: Option<((usize, usize), CriterionVector)> = None;
            let mut ties = 0u32;
            let holes: Vec<usize> = (0..cur.len()).filter(|&s| cur[s].is_none()).collect();
            let holes = if one_hole {
                &holes[..holes.len().min(1)]
            } else {
                &holes[..]
            };
            for &s in holes {
                for &c in &rows {
                    if !self.allowed(cur, s, c) {
                        continue;
                    }
                    cur[s] = Some(c);
                    let v = self.evaluate_partial(cur)?;
                    cur[s] = None;
                    if keep(&mut best, &mut ties, &v, rng) {
                        best = Some(((s, c), v));
                    }
                }
            }
            let ((s, c), _) = best.ok_or(Error::EmptyCandidateSet)?;
            cur[s] = Some(c);
        }
        Ok(())
    }

    /// MIX for run assignments: starting from `x`, exchanges `q.gb` runs with
    /// the global best, then `q.lb` runs with the local best, then `q.new`
    /// runs with fresh draws from the candidate pool. Each exchange deletes
    /// the runs whose removal helps most and adds back the best runs of the
    /// source.
    pub fn mix_nonregular(
        &self,
        x: &[usize],
        gb: &[usize],
        lb: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>> {
        let mut cur: Vec<Option<usize>> = x.iter().map(|&c| Some(c)).collect();
        let fresh = if self.q.new > 0 {
            self.random_assignment(rng)?
        } else {
            Vec::new()
        };
        for (source, k) in [(gb, self.q.gb), (lb, self.q.lb), (&fresh[..], self.q.new)] {
            self.exchange(&mut cur, source, k, rng)?;
        }
        Ok(cur
            .into_iter()
            .map(|c| c.expect("every hole is refilled"))
            .collect())
    }

    pub fn random_assignment(&self, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        let mut slots = vec![None; self.n_slots()];
        for s in 0..slots.len() {
            self.random_fill(&mut slots, s, None, rng)?;
        }
        Ok(slots.into_iter().map(|c| c.unwrap()).collect())
    }

    /// Replaces `q_new` random runs by different admissible runs.
    pub fn perturb_nonregular(&self, x: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        let mut slots: Vec<Option<usize>> = x.iter().map(|&c| Some(c)).collect();
        let k = self.q.new.min(slots.len());
        for s in sample(rng, slots.len(), k).into_iter() {
            let old = slots[s];
            self.random_fill(&mut slots, s, old, rng)?;
        }
        Ok(slots.into_iter().map(|c| c.unwrap()).collect())
    }

    pub fn criterion(&self, p: &[usize]) -> Result<CriterionVector> {
        let slots: Vec<Option<usize>> = p.iter().map(|&c| Some(c)).collect();
        self.evaluate_partial(&slots)
    }

    /// Size of the space enumerated by [`NonregularProblem::exhaustive`].
    pub fn space_size(&self) -> u128 {
        let (c, k) = (self.candidates.len() as u128, self.n_slots() as u128);
        if self.exchangeable {
            choose_count(c, k, self.constraints.distinct)
        } else {
            (0..k).fold(1u128, |a, _| a.saturating_mul(c))
        }
    }

    /// Exhaustive minimum over all admissible assignments (as multisets when
    /// the slots are exchangeable).
    pub fn exhaustive(&self, cap: u128) -> Result<OracleResult<Vec<usize>>> {
        let size = self.space_size();
        if size > cap {
            return Err(Error::SpaceTooLarge(size, cap));
        }
        let mut best: Option<OracleResult<Vec<usize>>> = None;
        let mut visit = |p: &[usize]| -> Result<()> {
            if !self.satisfies(p) {
                return Ok(());
            }
            let v = self.criterion(p)?;
            match &mut best {
                None => {
                    best = Some(OracleResult {
                        best: p.to_vec(),
                        best_value: v,
                        n_optimal: 1,
                        n_evaluated: 1,
                    })
                }
                Some(b) => {
                    b.n_evaluated += 1;
                    if v.0 < b.best_value.0 {
                        b.best = p.to_vec();
                        b.best_value = v;
                        b.n_optimal = 1;
                    } else if v == b.best_value {
                        b.n_optimal += 1;
                    }
                }
            }
            Ok(())
        };
        let (c, k) = (self.candidates.len(), self.n_slots());
        if self.exchangeable {
            for_each_combination(c, k, self.constraints.distinct, &mut visit)?;
        } else {
            let mut p = vec![0usize; k];
            'outer: loop {
                visit(&p)?;
                for i in (0..k).rev() {
                    p[i] += 1;
                    if p[i] < c {
                        continue 'outer;
                    }
                    p[i] = 0;
                }
                break;
            }
        }
        best.ok_or(Error::EmptyCandidateSet)
    }
}

impl SwarmProblem for NonregularProblem {
    type Particle = Vec<usize>;

    fn random_particle(&self, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        self.random_assignment(rng)
    }

    fn evaluate(&self, p: &Vec<usize>) -> Result<CriterionVector> {
        self.criterion(p)
    }

    fn mix(
        &self,
        x: &Vec<usize>,
        gb: &Vec<usize>,
        lb: &Vec<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>> {
        self.mix_nonregular(x, gb, lb, rng)
    }

    fn perturb(&self, x: &Vec<usize>, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        self.perturb_nonregular(x, rng)
    }

    fn audit(&self, p: &Vec<usize>) -> bool {
        self.satisfies(p)
    }
}

/// Nonregular search driver.
pub fn run_algorithm4(
    problem: &NonregularProblem,
    params: &SibParams,
) -> Result<SearchResult<Vec<usize>>> {
    super::run_sib(problem, params)
}

/// Running minimum with uniform choice among ties: returns whether the new
/// value should replace the current best.
fn keep<T>(
    best: &mut Option<(T, CriterionVector)>,
    ties: &mut u32,
    v: &CriterionVector,
    rng: &mut ChaCha8Rng,
) -> bool {
    match best {
        None => {
            *ties = 1;
            true
        }
        Some((_, b)) => match v.0.cmp(&b.0) {
            std::cmp::Ordering::Less => {
                *ties = 1;
                true
            }
            std::cmp::Ordering::Equal => {
                *ties += 1;
                rng.gen_range(0..*ties) == 0
            }
            std::cmp::Ordering::Greater => false,
        },
    }
}

/// All `2^n` two-level runs in standard order (first factor alternating
/// fastest), coded `+1` for level 0.
pub fn full_factorial(n: usize) -> Vec<Vec<i8>> {
    (0..1usize << n)
        .map(|r| {
            (0..n)
                .map(|j| if r >> j & 1 == 0 { 1 } else { -1 })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sib::particle_rng;
    use crate::structure::Direction;

    fn unstructured(
        n_units: usize,
        n: usize,
        q: SourceCounts,
        constraints: Constraints,
    ) -> NonregularProblem {
        let b = BlockStructure::unstructured(n_units);
        let seq = b.criterion_sequence(Direction::Forward, None).unwrap();
        NonregularProblem::new(b, full_factorial(n), Layout::Direct, constraints, seq, q).unwrap()
    }

    #[test]
    fn zero_q_is_identity() {
        let p = unstructured(8, 4, SourceCounts::default(), Constraints::default());
        let mut rng = particle_rng(5, 0);
        let x = p.random_assignment(&mut rng).unwrap();
        let gb = p.random_assignment(&mut rng).unwrap();
        assert_eq!(p.mix_nonregular(&x, &gb, &gb, &mut rng).unwrap(), x);
    }

    #[test]
    fn forbidden_runs_never_proposed() {
        let cons = Constraints {
            predicates: vec![Predicate::Forbidden(vec![Some(-1), Some(-1), Some(-1)])],
            distinct: false,
        };
        let p = unstructured(8, 4, SourceCounts::new(2, 2, 4), cons);
        assert_eq!(p.candidates().len(), 14);
        let mut rng = particle_rng(6, 0);
        let mut x = p.random_assignment(&mut rng).unwrap();
        for _ in 0..10 {
            let gb = p.random_assignment(&mut rng).unwrap();
            x = p.mix_nonregular(&x, &gb, &gb, &mut rng).unwrap();
            for row in p.full_design(&x) {
                assert_ne!(&row[..3], &[-1, -1, -1]);
            }
        }
    }

    #[test]
    fn everything_forbidden() {
        let b = BlockStructure::unstructured(4);
        let seq = b.criterion_sequence(Direction::Forward, None).unwrap();
        let cons = Constraints {
            predicates: vec![Predicate::Forbidden(vec![None])],
            distinct: false,
        };
        assert_eq!(
            NonregularProblem::new(
                b,
                full_factorial(2),
                Layout::Direct,
                cons,
                seq,
                SourceCounts::default()
            )
            .err(),
            Some(Error::EmptyCandidateSet)
        );
    }

    #[test]
    fn perturb_changes_q_new_runs() {
        let p = unstructured(4, 2, SourceCounts::new(0, 0, 2), Constraints::default());
        let mut rng = particle_rng(7, 0);
        let x = p.random_assignment(&mut rng).unwrap();
        let y = p.perturb_nonregular(&x, &mut rng).unwrap();
        assert_eq!(x.iter().zip(&y).filter(|(a, b)| a != b).count(), 2);
    }

    #[test]
    fn constancy_within_blocks() {
        let b = BlockStructure::parse("4/4").unwrap();
        let seq = b.criterion_sequence(Direction::Forward, None).unwrap();
        let cons = Constraints {
            predicates: vec![Predicate::ConstantWithin {
                column: 0,
                factor: 1,
            }],
            distinct: true,
        };
        let p = NonregularProblem::new(
            b,
            full_factorial(4),
            Layout::Direct,
            cons,
            seq,
            SourceCounts::new(2, 2, 4),
        )
        .unwrap();
        let mut rng = particle_rng(8, 0);
        let mut x = p.random_assignment(&mut rng).unwrap();
        for _ in 0..5 {
            let gb = p.random_assignment(&mut rng).unwrap();
            x = p.mix_nonregular(&x, &gb, &x, &mut rng).unwrap();
            assert!(p.audit(&x));
        }
    }

    #[test]
    fn invalid_q() {
        let b = BlockStructure::unstructured(4);
        let seq = b.criterion_sequence(Direction::Forward, None).unwrap();
        assert!(matches!(
            NonregularProblem::new(
                b,
                full_factorial(2),
                Layout::Direct,
                Constraints::default(),
                seq,
                SourceCounts::new(2, 2, 2)
            ),
            Err(Error::InvalidQ(_))
        ));
    }
}
