//! Search over design-key generator sets.

use std::sync::Arc;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use super::{
    choose_count, for_each_combination, OracleResult, QVector, SearchResult, SibParams,
    SwarmProblem,
};
use crate::aberration::{regular_table, CriterionVector};
use crate::error::{Error, Result};
use crate::gf2::BitVector;
use crate::key::{algorithm2_fractional, GeneratorSet, KeyTemplate, PoolSet, RETRY_CAP};

/// A regular multi-stratum search: template, pools, criterion sequence and
/// substitution counts.
#[derive(Clone, Debug)]
pub struct RegularProblem {
    pub template: Arc<KeyTemplate>,
    pub pools: PoolSet,
    pub sequence: Vec<Vec<usize>>,
    pub q: QVector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Source {
    Global,
    Local,
    Fresh,
}

impl RegularProblem {
    pub fn new(
        template: Arc<KeyTemplate>,
        pools: PoolSet,
        sequence: Vec<Vec<usize>>,
        q: QVector,
    ) -> Result<Self> {
        pools.check(&template)?;
        q.validate(&template.slot_counts())?;
        Ok(RegularProblem {
            template,
            pools,
            sequence,
            q,
        })
    }

    pub fn criterion(&self, gs: &GeneratorSet) -> Result<CriterionVector> {
        let table = regular_table(gs)?;
        CriterionVector::from_table(&table, self.template.structure(), &self.sequence)
    }

    fn draw_valid(
        &self,
        x: &GeneratorSet,
        slot: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<GeneratorSet>> {
        for _ in 0..RETRY_CAP {
            let cand = x.with_fill(slot, self.pools.draw(&self.template, slot, rng)?);
            if cand.is_valid(self.pools.distinct) {
                return Ok(Some(cand));
            }
        }
        Ok(None)
    }

    /// MIX: per stratum, replace generator positions one at a time with the
    /// matching generator of the global best, the local best, or a fresh
    /// pool row, each time choosing the position that gives the best
    /// criterion. A replacement that breaks the key is resampled from the
    /// pool.
    pub fn mix_regular(
        &self,
        x: &GeneratorSet,
        gb: &GeneratorSet,
        lb: &GeneratorSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<GeneratorSet> {
        let mut cur = x.clone();
        for label in self.template.pool_labels() {
            let counts = self.q.get(label);
            let mut open = self.template.slots_of(label);
            let steps = [
                (Source::Global, counts.gb),
                (Source::Local, counts.lb),
                (Source::Fresh, counts.new),
            ];
            for (source, k) in steps {
                for _ in 0..k {
                    let mut best: Option<(usize, GeneratorSet, CriterionVector)> = None;
                    for &r in &open {
                        let proposal = match source {
                            Source::Global => Some(cur.with_fill(r, gb.fill(r).clone())),
                            Source::Local => Some(cur.with_fill(r, lb.fill(r).clone())),
                            Source::Fresh => None,
                        };
                        let cand = match proposal {
                            Some(c) if c.is_valid(self.pools.distinct) => Some(c),
                            _ => self.draw_valid(&cur, r, rng)?,
                        };
                        let Some(cand) = cand else { continue };
                        let v = self.criterion(&cand)?;
                        if best.as_ref().is_none_or(|(_, _, bv)| v.0 < bv.0) {
                            best = Some((r, cand, v));
                        }
                    }
                    let (r, cand, _) = best.ok_or(Error::ExhaustedRetries(RETRY_CAP))?;
                    cur = cand;
                    open.retain(|&s| s != r);
                }
            }
        }
        Ok(cur)
    }

    /// Replaces `q_new` randomly chosen generators with different valid
    /// pool rows.
    pub fn perturb_regular(&self, x: &GeneratorSet, rng: &mut ChaCha8Rng) -> Result<GeneratorSet> {
        let n_slots = self.template.slots().len();
        let k = self.q.totals().new.min(n_slots);
        let mut cur = x.clone();
        for r in sample(rng, n_slots, k).into_iter() {
            for _ in 0..RETRY_CAP {
                let fill = self.pools.draw(&self.template, r, rng)?;
                if &fill == cur.fill(r) {
                    continue;
                }
                let cand = cur.with_fill(r, fill);
                if cand.is_valid(self.pools.distinct) {
                    cur = cand;
                    break;
                }
            }
        }
        Ok(cur)
    }

    /// Number of generator sets enumerated by [`RegularProblem::exhaustive`]:
    /// generators within a stratum are exchangeable, so each stratum
    /// contributes the multisets (or subsets, with distinct rows) of its pool.
    pub fn space_size(&self) -> u128 {
        self.template
            .slot_counts()
            .iter()
            .map(|(label, l)| {
                let pool = self.pools.get(label).map_or(0, |p| p.len());
                choose_count(pool as u128, *l as u128, self.pools.distinct)
            })
            .fold(1u128, |a, b| a.saturating_mul(b))
    }

    /// Exhaustive minimum of the criterion.
    pub fn exhaustive(&self, cap: u128) -> Result<OracleResult<GeneratorSet>> {
        let size = self.space_size();
        if size > cap {
            return Err(Error::SpaceTooLarge(size, cap));
        }
        let labels: Vec<(String, Vec<usize>)> = self
            .template
            .pool_labels()
            .iter()
            .map(|l| (l.clone(), self.template.slots_of(l)))
            .collect();
        let mut fills: Vec<BitVector> = self
            .template
            .slots()
            .iter()
            .map(|s| BitVector::zeros(s.stars.len()))
            .collect();
        let mut best: Option<OracleResult<GeneratorSet>> = None;
        self.enumerate(&labels, 0, &mut fills, &mut best)?;
        best.ok_or(Error::ExhaustedRetries(0))
    }

    fn enumerate(
        &self,
        labels: &[(String, Vec<usize>)],
        depth: usize,
        fills: &mut Vec<BitVector>,
        best: &mut Option<OracleResult<GeneratorSet>>,
    ) -> Result<()> {
        if depth == labels.len() {
            let gs = GeneratorSet::new(self.template.clone(), fills.clone())?;
            if !gs.is_valid(self.pools.distinct) {
                return Ok(());
            }
            let v = self.criterion(&gs)?;
            match best {
                None => {
                    *best = Some(OracleResult {
                        best: gs,
                        best_value: v,
                        n_optimal: 1,
                        n_evaluated: 1,
                    })
                }
                Some(b) => {
                    b.n_evaluated += 1;
                    if v.0 < b.best_value.0 {
                        b.best = gs;
                        b.best_value = v;
                        b.n_optimal = 1;
                    } else if v == b.best_value {
                        b.n_optimal += 1;
                    }
                }
            }
            return Ok(());
        }
        let (label, slots) = &labels[depth];
        let pool = self.pools.get(label)?.clone();
        for_each_combination(pool.len(), slots.len(), self.pools.distinct, &mut |idx| {
            for (&s, &i) in slots.iter().zip(idx) {
                fills[s] = pool.rows[i].clone();
            }
            self.enumerate(labels, depth + 1, fills, best)
        })
    }
}

impl SwarmProblem for RegularProblem {
    type Particle = GeneratorSet;

    fn random_particle(&self, rng: &mut ChaCha8Rng) -> Result<GeneratorSet> {
        algorithm2_fractional(&self.template, &self.pools, rng)
    }

    fn evaluate(&self, p: &GeneratorSet) -> Result<CriterionVector> {
        self.criterion(p)
    }

    fn mix(
        &self,
        x: &GeneratorSet,
        gb: &GeneratorSet,
        lb: &GeneratorSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<GeneratorSet> {
        self.mix_regular(x, gb, lb, rng)
    }

    fn perturb(&self, x: &GeneratorSet, rng: &mut ChaCha8Rng) -> Result<GeneratorSet> {
        self.perturb_regular(x, rng)
    }

    fn audit(&self, p: &GeneratorSet) -> bool {
        p.is_valid(self.pools.distinct)
    }
}

/// Regular search driver.
pub fn run_algorithm3(
    problem: &RegularProblem,
    params: &SibParams,
) -> Result<SearchResult<GeneratorSet>> {
    super::run_sib(problem, params)
}
