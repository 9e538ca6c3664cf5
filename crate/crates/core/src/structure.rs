//! Unit factors, block structures and their strata.
//!
//! A block structure is a set of partitions of the experimental units. Simple
//! block structures are built from unstructured sets by nesting (`/`) and
//! crossing (`x`); they remember the "leaves" of that construction so that
//! design keys can map unit pseudo-factors onto them. Orthogonal structures
//! that are not simple (a Latin square, say) come from a class table.

use std::collections::HashMap;
use std::fmt;

use num_traits::{One, Zero};

use crate::error::{Error, Result};
use crate::Rational;

/// A partition of the units into classes.
#[derive(Clone, PartialEq, Eq)]
pub struct UnitFactor {
    name: String,
    class_of: Vec<usize>,
    n_classes: usize,
}

impl UnitFactor {
    /// Class labels are renumbered `0..` in order of first appearance.
    pub fn new(name: impl Into<String>, labels: &[usize]) -> Self {
        let mut map = HashMap::new();
        let class_of = labels
            .iter()
            .map(|l| {
                let next = map.len();
                *map.entry(*l).or_insert(next)
            })
            .collect();
        UnitFactor {
            name: name.into(),
            class_of,
            n_classes: map.len(),
        }
    }

    pub fn universal(n_units: usize) -> Self {
        Self::new("U", &vec![0; n_units])
    }

    pub fn equality(n_units: usize) -> Self {
        Self::new("E", &(0..n_units).collect::<Vec<_>>())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_units(&self) -> usize {
        self.class_of.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn class_of(&self) -> &[usize] {
        &self.class_of
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_classes];
        for &c in &self.class_of {
            sizes[c] += 1;
        }
        sizes
    }

    pub fn is_uniform(&self) -> bool {
        let sizes = self.class_sizes();
        sizes.iter().all(|&s| s == sizes[0])
    }

    /// `self ⪯ other`: every class of `self` lies inside a class of `other`.
    pub fn is_finer_or_equal(&self, other: &UnitFactor) -> bool {
        let mut image = vec![usize::MAX; self.n_classes];
        self.class_of.iter().zip(&other.class_of).all(|(&a, &b)| {
            if image[a] == usize::MAX {
                image[a] = b;
                true
            } else {
                image[a] == b
            }
        })
    }

    pub fn is_equivalent(&self, other: &UnitFactor) -> bool {
        self.is_finer_or_equal(other) && other.is_finer_or_equal(self)
    }

    /// Finest factor coarser than both: the join of the two partitions.
    pub fn sup(&self, other: &UnitFactor) -> UnitFactor {
        assert_eq!(
            self.n_units(),
            other.n_units(),
            "factors on different unit sets"
        );
        let mut parent: Vec<usize> = (0..self.n_units()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for f in [self, other] {
            let mut first = vec![usize::MAX; f.n_classes];
            for (u, &c) in f.class_of.iter().enumerate() {
                if first[c] == usize::MAX {
                    first[c] = u;
                } else {
                    let (a, b) = (find(&mut parent, first[c]), find(&mut parent, u));
                    parent[a] = b;
                }
            }
        }
        let labels: Vec<usize> = (0..self.n_units()).map(|u| find(&mut parent, u)).collect();
        UnitFactor::new(format!("{}∨{}", self.name, other.name), &labels)
    }

    /// Coarsest factor finer than both: the common refinement.
    pub fn inf(&self, other: &UnitFactor) -> UnitFactor {
        assert_eq!(
            self.n_units(),
            other.n_units(),
            "factors on different unit sets"
        );
        let labels: Vec<usize> = self
            .class_of
            .iter()
            .zip(&other.class_of)
            .map(|(&a, &b)| a * other.n_classes + b)
            .collect();
        UnitFactor::new(format!("{}∧{}", self.name, other.name), &labels)
    }

    fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

impl fmt::Debug for UnitFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({} classes)", self.name, self.n_classes)
    }
}

/// One unstructured set in the nesting/crossing construction of a simple
/// block structure.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Leaf {
    pub size: usize,
    /// Index of the coarsest factor that distinguishes units within this leaf.
    pub owner: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct SimpleLayout {
    leaves: Vec<Leaf>,
    /// Per factor, the set of leaves whose coordinates define its classes.
    masks: Vec<u64>,
    /// Syntactic shape, used by the design-key templates.
    shape: Shape,
}

/// Syntactic shape of a simple block structure.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Shape {
    Leaf(usize),
    Nest(Box<Shape>, Box<Shape>),
    Cross(Box<Shape>, Box<Shape>),
}

/// A set of unit factors on the same units, always containing `U` and `E`.
///
/// Factor 0 is the universal factor, the last factor is the equality factor
/// and the others are ordered from coarse (few classes) to fine.
#[derive(Clone, PartialEq, Eq)]
pub struct BlockStructure {
    n_units: usize,
    factors: Vec<UnitFactor>,
    /// `leq[i][j]` iff factor i ⪯ factor j.
    leq: Vec<Vec<bool>>,
    simple: Option<SimpleLayout>,
}

impl fmt::Debug for BlockStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BlockStructure(N={}, {:?})", self.n_units, self.factors)
    }
}

impl BlockStructure {
    /// Builds a structure from arbitrary factors, adding `U` and `E` when no
    /// equivalent factor is present. No orthogonality check is made here; see
    /// [`BlockStructure::validate`].
    pub fn new(n_units: usize, factors: Vec<UnitFactor>) -> Result<Self> {
        if n_units == 0 {
            return Err(Error::Invalid(
                "a block structure needs at least one unit".into(),
            ));
        }
        if let Some(f) = factors.iter().find(|f| f.n_units() != n_units) {
            return Err(Error::DimensionMismatch(format!(
                "factor {} covers {} units, expected {n_units}",
                f.name,
                f.n_units()
            )));
        }
        let u = UnitFactor::universal(n_units);
        let e = UnitFactor::equality(n_units);
        let mut middle = Vec::new();
        let (mut u_found, mut e_found) = (None, None);
        for f in factors {
            if f.n_classes == 1 && u_found.is_none() {
                u_found = Some(f);
            } else if f.n_classes == n_units && e_found.is_none() && n_units > 1 {
                e_found = Some(f);
            } else {
                middle.push(f);
            }
        }
        middle.sort_by_key(|f| f.n_classes);
        let mut all = vec![u_found.unwrap_or(u)];
        all.extend(middle);
        if n_units > 1 {
            all.push(e_found.unwrap_or(e));
        }
        Ok(Self::from_ordered(all, None))
    }

    fn from_ordered(factors: Vec<UnitFactor>, simple: Option<SimpleLayout>) -> Self {
        let n_units = factors[0].n_units();
        let leq = factors
            .iter()
            .map(|a| factors.iter().map(|b| a.is_finer_or_equal(b)).collect())
            .collect();
        BlockStructure {
            n_units,
            factors,
            leq,
            simple,
        }
    }

    /// `n` unstructured units: `{U, E}`.
    pub fn unstructured(n: usize) -> Self {
        Self::from_shape(&Shape::Leaf(n))
    }

    /// Builds a structure from class-table columns (one label per unit).
    pub fn from_class_table(names: &[String], columns: &[Vec<usize>]) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::DimensionMismatch("names vs columns".into()));
        }
        let n = columns.first().map_or(0, Vec::len);
        let factors = names
            .iter()
            .zip(columns)
            .map(|(name, col)| UnitFactor::new(name.clone(), col))
            .collect();
        Self::new(n, factors)
    }

    /// Parses a simple block structure expression in two-level mode: every
    /// integer must be a power of two.
    ///
    /// Grammar: `S ::= T ("/" S)?`, `T ::= INT | "(" S ("x" S)? ")"`, with a
    /// top-level `S "x" S` also accepted. `/` is right-associative.
    pub fn parse(expr: &str) -> Result<Self> {
        Self::parse_with(expr, true)
    }

    /// Like [`BlockStructure::parse`] but allows any positive integer.
    pub fn parse_any(expr: &str) -> Result<Self> {
        Self::parse_with(expr, false)
    }

    fn parse_with(expr: &str, two_level: bool) -> Result<Self> {
        let shape = Parser::new(expr, two_level).parse_all()?;
        Ok(Self::from_shape(&shape))
    }

    /// Builds the simple structure for a shape.
    pub fn from_shape(shape: &Shape) -> Self {
        let built = build_shape(shape, 0, "");
        let n_leaves = built.leaves.len();
        let sizes: Vec<usize> = built.leaves.iter().map(|l| l.0).collect();
        let n_units: usize = sizes.iter().product();

        // Drop factors inducing the same partition (only happens with size-1
        // leaves).
        let mut partitions: Vec<(u64, Vec<usize>)> = Vec::new();
        for &m in &built.masks {
            let p = mask_partition(&sizes, m);
            if !partitions.iter().any(|(_, q)| same_partition(q, &p)) {
                partitions.push((m, p));
            }
        }
        let full = (1u64 << n_leaves) - 1;
        let names = factor_names(
            &built,
            &partitions.iter().map(|p| p.0).collect::<Vec<_>>(),
            full,
        );
        let mut factors: Vec<(u64, UnitFactor)> = partitions
            .into_iter()
            .zip(names)
            .map(|((m, p), name)| (m, UnitFactor::new(name, &p)))
            .collect();

        // U first, E last, the rest coarse to fine (stable).
        let key = |f: &UnitFactor| {
            if f.n_classes == 1 {
                0
            } else if f.n_classes == n_units {
                2
            } else {
                1
            }
        };
        factors.sort_by_key(|(_, f)| (key(f), if key(f) == 1 { f.n_classes } else { 0 }));
        if n_units == 1 {
            factors.truncate(1);
        }
        let masks: Vec<u64> = factors.iter().map(|(m, _)| *m).collect();
        let factors: Vec<UnitFactor> = factors.into_iter().map(|(_, f)| f).collect();

        let leaves = (0..n_leaves)
            .map(|l| {
                let bit = 1u64 << l;
                // Coarsest factor whose classes separate units of this leaf.
                let owner = (0..masks.len())
                    .filter(|&i| masks[i] & bit != 0)
                    .min_by_key(|&i| masks[i].count_ones())
                    .unwrap_or(masks.len() - 1);
                Leaf {
                    size: sizes[l],
                    owner,
                }
            })
            .collect();
        Self::from_ordered(
            factors,
            Some(SimpleLayout {
                leaves,
                masks,
                shape: shape.clone(),
            }),
        )
    }

    /// `b1 × b2` on `N1·N2` units; unit `(w1, w2)` has index `w1·N2 + w2`.
    pub fn cross(b1: &BlockStructure, b2: &BlockStructure) -> BlockStructure {
        if let (Some(s1), Some(s2)) = (&b1.simple, &b2.simple) {
            return Self::from_shape(&Shape::Cross(
                Box::new(s1.shape.clone()),
                Box::new(s2.shape.clone()),
            ));
        }
        let mut factors = Vec::new();
        for f2 in &b2.factors {
            for f1 in &b1.factors {
                factors.push(product_factor(f1, f2, format!("{}x{}", f1.name, f2.name)));
            }
        }
        general_from(factors)
    }

    /// `b1 / b2`: each unit of `b1` is split into the units of `b2`.
    pub fn nest(b1: &BlockStructure, b2: &BlockStructure) -> BlockStructure {
        if let (Some(s1), Some(s2)) = (&b1.simple, &b2.simple) {
            return Self::from_shape(&Shape::Nest(
                Box::new(s1.shape.clone()),
                Box::new(s2.shape.clone()),
            ));
        }
        let u2 = UnitFactor::universal(b2.n_units);
        let e1 = UnitFactor::equality(b1.n_units);
        let mut factors = Vec::new();
        for f1 in &b1.factors {
            if !f1.is_equivalent(&e1) || b1.n_units == 1 {
                factors.push(product_factor(f1, &u2, f1.name.clone()));
            }
        }
        for f2 in &b2.factors {
            factors.push(product_factor(&e1, f2, format!("E/{}", f2.name)));
        }
        general_from(factors)
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn factors(&self) -> &[UnitFactor] {
        &self.factors
    }

    pub fn factor(&self, i: usize) -> &UnitFactor {
        &self.factors[i]
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.factors.iter().map(|f| f.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.factors.iter().position(|f| f.name == name)
    }

    pub fn universal_index(&self) -> usize {
        0
    }

    pub fn equality_index(&self) -> usize {
        self.factors.len() - 1
    }

    /// `F_i ⪯ F_j`.
    pub fn leq(&self, i: usize, j: usize) -> bool {
        self.leq[i][j]
    }

    /// `F_i ≺ F_j`.
    pub fn lt(&self, i: usize, j: usize) -> bool {
        self.leq[i][j] && !self.leq[j][i]
    }

    pub fn comparable(&self, i: usize, j: usize) -> bool {
        self.leq[i][j] || self.leq[j][i]
    }

    /// Leaves of a simple structure, `None` for class-table structures.
    pub fn leaves(&self) -> Option<&[Leaf]> {
        self.simple.as_ref().map(|s| s.leaves.as_slice())
    }

    /// Per factor, the set of leaves (as a bitmask) whose coordinates
    /// determine its classes. Only available for simple structures.
    pub fn factor_masks(&self) -> Option<&[u64]> {
        self.simple.as_ref().map(|s| s.masks.as_slice())
    }

    pub fn shape(&self) -> Option<&Shape> {
        self.simple.as_ref().map(|s| &s.shape)
    }

    /// Leaf coordinates of a unit (first leaf varies slowest).
    pub fn leaf_coordinates(&self, unit: usize) -> Option<Vec<usize>> {
        let leaves = self.leaves()?;
        let mut rest = unit;
        let mut coords = vec![0; leaves.len()];
        for (i, l) in leaves.iter().enumerate().rev() {
            coords[i] = rest % l.size;
            rest /= l.size;
        }
        Some(coords)
    }

    /// Renames a factor.
    pub fn rename(&mut self, index: usize, name: impl Into<String>) -> Result<()> {
        let name = name.into();
        if self
            .factors
            .iter()
            .enumerate()
            .any(|(i, f)| i != index && f.name == name)
        {
            return Err(Error::Invalid(format!("factor name `{name}` already used")));
        }
        let f = self.factors[index].clone().renamed(name);
        self.factors[index] = f;
        Ok(())
    }

    /// Index of the member equivalent to `f`, if any.
    pub fn find_equivalent(&self, f: &UnitFactor) -> Option<usize> {
        self.factors.iter().position(|g| g.is_equivalent(f))
    }

    pub fn sup(&self, i: usize, j: usize) -> UnitFactor {
        self.factors[i].sup(&self.factors[j])
    }

    pub fn inf(&self, i: usize, j: usize) -> UnitFactor {
        self.factors[i].inf(&self.factors[j])
    }

    /// Checks uniformity, pairwise orthogonality, presence of `U` and `E`,
    /// non-equivalence and closure under ∨ and ∧.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let n = self.n_units;
        let u_count = self.factors.iter().filter(|f| f.n_classes == 1).count();
        let e_count = self.factors.iter().filter(|f| f.n_classes == n).count();
        if u_count != 1 {
            violations.push(Violation::UniversalCount(u_count));
        }
        if e_count != 1 && n > 1 {
            violations.push(Violation::EqualityCount(e_count));
        }
        for f in &self.factors {
            if !f.is_uniform() {
                violations.push(Violation::NotUniform(f.name.clone()));
            }
        }
        for i in 0..self.factors.len() {
            for j in i + 1..self.factors.len() {
                let (a, b) = (&self.factors[i], &self.factors[j]);
                if a.is_equivalent(b) {
                    violations.push(Violation::Equivalent(a.name.clone(), b.name.clone()));
                    continue;
                }
                if !orthogonal(a, b) {
                    violations.push(Violation::NotOrthogonal(a.name.clone(), b.name.clone()));
                }
                if self.find_equivalent(&a.sup(b)).is_none() {
                    violations.push(Violation::SupMissing(a.name.clone(), b.name.clone()));
                }
                if self.find_equivalent(&a.inf(b)).is_none() {
                    violations.push(Violation::InfMissing(a.name.clone(), b.name.clone()));
                }
            }
        }
        ValidationReport { violations }
    }

    /// Möbius function of the factor poset: `mobius[i][j] = μ(F_i, F_j)`,
    /// zero unless `F_i ⪯ F_j`.
    pub fn mobius(&self) -> Vec<Vec<i64>> {
        let m = self.factors.len();
        // Order indices from fine to coarse so that every H with F ⪯ H ≺ G is
        // handled before G.
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(self.factors[i].n_classes));
        let mut mu = vec![vec![0i64; m]; m];
        for f in 0..m {
            for &g in &order {
                if !self.leq[f][g] {
                    continue;
                }
                if g == f {
                    mu[f][g] = 1;
                    continue;
                }
                let s: i64 = (0..m)
                    .filter(|&h| self.leq[f][h] && self.lt(h, g))
                    .map(|h| mu[f][h])
                    .sum();
                mu[f][g] = -s;
            }
        }
        mu
    }

    /// Strata projectors by Möbius inversion of the class-averaging matrices.
    pub fn strata(&self) -> Result<StratumDecomposition> {
        let report = self.validate();
        if !report.is_valid() {
            return Err(Error::NotOrthogonal(report.to_string()));
        }
        let mobius = self.mobius();
        let dimensions = (0..self.factors.len())
            .map(|f| {
                let d: i64 = (0..self.factors.len())
                    .map(|g| mobius[f][g] * self.factors[g].n_classes as i64)
                    .sum();
                d as usize
            })
            .collect();
        Ok(StratumDecomposition {
            n_units: self.n_units,
            names: self.names(),
            class_of: self.factors.iter().map(|f| f.class_of.clone()).collect(),
            class_size: self
                .factors
                .iter()
                .map(|f| self.n_units / f.n_classes)
                .collect(),
            n_classes: self.factors.iter().map(|f| f.n_classes).collect(),
            mobius,
            dimensions,
        })
    }

    /// All upward-closed subsets of `B \ {E}` that contain `U`, ordered by
    /// size and then by the factor order of the structure.
    pub fn admissible_subsets(&self) -> Vec<Vec<usize>> {
        let ranks: Vec<usize> = (0..self.factors.len()).collect();
        self.ordered_admissible(&ranks)
    }

    fn ordered_admissible(&self, rank: &[usize]) -> Vec<Vec<usize>> {
        let e = self.equality_index();
        let middle: Vec<usize> = (1..self.factors.len()).filter(|&i| i != e).collect();
        if self.factors.len() == 1 {
            return vec![vec![0]];
        }
        let mut out = Vec::new();
        for mask in 0u64..(1u64 << middle.len()) {
            let mut set = vec![0usize];
            set.extend(
                middle
                    .iter()
                    .enumerate()
                    .filter(|(b, _)| mask >> b & 1 == 1)
                    .map(|(_, &f)| f),
            );
            let closed = set.iter().all(|&f| {
                (0..self.factors.len())
                    .filter(|&g| g != e && self.lt(f, g))
                    .all(|g| set.contains(&g))
            });
            if closed {
                out.push(set);
            }
        }
        let key = |s: &Vec<usize>| {
            let mut r: Vec<usize> = s.iter().map(|&f| rank[f]).collect();
            r.sort_unstable();
            (s.len(), r)
        };
        out.sort_by_key(key);
        out
    }

    /// Priority order of the factors of `B \ {E}`: a linear extension from
    /// coarse to fine in which incomparable factors are ordered by descending
    /// weight and then by structure order.
    pub fn priority_order(&self, weights: Option<&[u64]>) -> Result<Vec<usize>> {
        let e = self.equality_index();
        let m = self.factors.len();
        let candidates: Vec<usize> = (0..m).filter(|&i| i != e || m == 1).collect();
        if weights.is_none() {
            for (a, &i) in candidates.iter().enumerate() {
                for &j in &candidates[a + 1..] {
                    if !self.comparable(i, j) {
                        return Err(Error::AmbiguousOrder(
                            self.factors[i].name.clone(),
                            self.factors[j].name.clone(),
                        ));
                    }
                }
            }
        }
        if let Some(w) = weights {
            if w.len() != m {
                return Err(Error::DimensionMismatch(format!(
                    "{} tiebreak weights for {m} factors",
                    w.len()
                )));
            }
        }
        let weight = |i: usize| weights.map_or(0, |w| w[i]);
        let mut order = Vec::new();
        let mut remaining = candidates;
        while !remaining.is_empty() {
            let ready: Vec<usize> = remaining
                .iter()
                .copied()
                .filter(|&f| remaining.iter().all(|&g| g == f || !self.lt(f, g)))
                .collect();
            let pick = *ready
                .iter()
                .min_by_key(|&&f| (std::cmp::Reverse(weight(f)), f))
                .expect("a finite poset has a maximal element");
            order.push(pick);
            remaining.retain(|&f| f != pick);
        }
        Ok(order)
    }

    /// Sequence of admissible subsets for the forward or backward criterion.
    pub fn criterion_sequence(
        &self,
        direction: Direction,
        weights: Option<&[u64]>,
    ) -> Result<Vec<Vec<usize>>> {
        let order = self.priority_order(weights)?;
        let mut rank = vec![usize::MAX; self.factors.len()];
        for (r, &f) in order.iter().enumerate() {
            rank[f] = r;
        }
        let mut seq = self.ordered_admissible(&rank);
        if direction == Direction::Backward {
            seq.reverse();
        }
        Ok(seq)
    }

    /// Stratum variances `ξ_F = Σ_{G ⪯ F} (N / n_G) σ²_G`.
    pub fn stratum_variance(&self, sigma2: &[Variance]) -> Result<VarianceVector> {
        if sigma2.len() != self.factors.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} variance components for {} factors",
                sigma2.len(),
                self.factors.len()
            )));
        }
        let n = self.n_units as i128;
        let xi = (0..self.factors.len())
            .map(|f| {
                let mut acc = Variance::Finite(Rational::zero());
                for g in 0..self.factors.len() {
                    if !self.leq[g][f] {
                        continue;
                    }
                    let w = Rational::new(n, self.factors[g].n_classes as i128);
                    acc = acc.add(&sigma2[g].scale(&w));
                }
                acc
            })
            .collect();
        Ok(VarianceVector { xi })
    }

    /// Whether ξ respects the order: `F_i ≺ F_j ⇒ ξ_i ≤ ξ_j`.
    pub fn is_feasible(&self, xi: &VarianceVector) -> bool {
        let m = self.factors.len();
        xi.xi.len() == m && (0..m).all(|i| (0..m).all(|j| !self.lt(i, j) || xi.xi[i] <= xi.xi[j]))
    }
}

fn general_from(factors: Vec<UnitFactor>) -> BlockStructure {
    let n = factors[0].n_units();
    let mut kept: Vec<UnitFactor> = Vec::new();
    for f in factors {
        if !kept.iter().any(|g| g.is_equivalent(&f)) {
            kept.push(f);
        }
    }
    let mut b = BlockStructure::new(n, kept).expect("factors share the unit set");
    b.rename(0, "U").ok();
    let e = b.equality_index();
    if e != 0 {
        b.rename(e, "E").ok();
    }
    b
}

fn product_factor(f1: &UnitFactor, f2: &UnitFactor, name: String) -> UnitFactor {
    let n2 = f2.n_units();
    let labels: Vec<usize> = (0..f1.n_units() * n2)
        .map(|u| f1.class_of[u / n2] * f2.n_classes + f2.class_of[u % n2])
        .collect();
    UnitFactor::new(name, &labels)
}

/// Proportional frequencies within every class of the join.
fn orthogonal(a: &UnitFactor, b: &UnitFactor) -> bool {
    let join = a.sup(b);
    let mut nij: HashMap<(usize, usize), usize> = HashMap::new();
    for u in 0..a.n_units() {
        *nij.entry((a.class_of[u], b.class_of[u])).or_default() += 1;
    }
    let asz = a.class_sizes();
    let bsz = b.class_sizes();
    let gsz = join.class_sizes();
    // Class of the join containing each a-class / b-class.
    let mut a_gamma = vec![0; a.n_classes];
    let mut b_gamma = vec![0; b.n_classes];
    for u in 0..a.n_units() {
        a_gamma[a.class_of[u]] = join.class_of[u];
        b_gamma[b.class_of[u]] = join.class_of[u];
    }
    for i in 0..a.n_classes {
        for j in 0..b.n_classes {
            if a_gamma[i] != b_gamma[j] {
                continue;
            }
            let n = nij.get(&(i, j)).copied().unwrap_or(0);
            if n * gsz[a_gamma[i]] != asz[i] * bsz[j] {
                return false;
            }
        }
    }
    true
}

fn mask_partition(sizes: &[usize], mask: u64) -> Vec<usize> {
    let n: usize = sizes.iter().product();
    (0..n)
        .map(|u| {
            let mut rest = u;
            let mut coords = vec![0; sizes.len()];
            for i in (0..sizes.len()).rev() {
                coords[i] = rest % sizes[i];
                rest /= sizes[i];
            }
            let mut id = 0;
            for i in 0..sizes.len() {
                if mask >> i & 1 == 1 {
                    id = id * sizes[i] + coords[i];
                }
            }
            id
        })
        .collect()
}

fn same_partition(a: &[usize], b: &[usize]) -> bool {
    UnitFactor::new("", a).is_equivalent(&UnitFactor::new("", b))
}

struct BuiltShape {
    /// (size, tag) per leaf.
    leaves: Vec<(usize, String)>,
    masks: Vec<u64>,
}

fn nest_tag(depth: usize) -> String {
    match depth {
        0 => "B".into(),
        1 => "T".into(),
        d => format!("B{}", d + 1),
    }
}

fn build_shape(shape: &Shape, depth: usize, prefix: &str) -> BuiltShape {
    match shape {
        Shape::Leaf(n) => BuiltShape {
            leaves: vec![(*n, prefix.to_string())],
            masks: vec![0, 1],
        },
        Shape::Nest(a, b) => {
            let ba = build_shape(a, 0, &format!("{prefix}{}", nest_tag(depth)));
            let bb = build_shape(b, depth + 1, prefix);
            let la = ba.leaves.len();
            let full_a = (1u64 << la) - 1;
            let mut masks: Vec<u64> = ba.masks.iter().copied().filter(|&m| m != full_a).collect();
            masks.extend(bb.masks.iter().map(|&m| full_a | (m << la)));
            let mut leaves = ba.leaves;
            leaves.extend(bb.leaves);
            BuiltShape { leaves, masks }
        }
        Shape::Cross(a, b) => {
            let ba = build_shape(a, 0, &format!("{prefix}R"));
            let bb = build_shape(b, 0, &format!("{prefix}C"));
            let la = ba.leaves.len();
            let mut masks = Vec::new();
            for &mb in &bb.masks {
                for &ma in &ba.masks {
                    masks.push(ma | (mb << la));
                }
            }
            let mut leaves = ba.leaves;
            leaves.extend(bb.leaves);
            BuiltShape { leaves, masks }
        }
    }
}

fn factor_names(built: &BuiltShape, masks: &[u64], full: u64) -> Vec<String> {
    let tag_of = |m: u64| -> String {
        (0..built.leaves.len())
            .filter(|&l| m >> l & 1 == 1)
            .map(|l| built.leaves[l].1.as_str())
            .collect()
    };
    let mut names: Vec<String> = masks
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            if m == 0 {
                return "U".to_string();
            }
            if m == full {
                return "E".to_string();
            }
            let coarser: u64 = masks
                .iter()
                .filter(|&&o| o != m && o & m == o)
                .fold(0, |acc, &o| acc | o);
            let fresh = tag_of(m & !coarser);
            if !fresh.is_empty() {
                fresh
            } else {
                let all = tag_of(m);
                if all.is_empty() {
                    format!("F{i}")
                } else {
                    all
                }
            }
        })
        .collect();
    // Disambiguate collisions.
    for i in 0..names.len() {
        let dup = (0..i).any(|j| names[j] == names[i]);
        if dup {
            let mut k = 2;
            while names.contains(&format!("{}{k}", names[i])) {
                k += 1;
            }
            names[i] = format!("{}{k}", names[i]);
        }
    }
    names
}

struct Parser<'a> {
    src: &'a str,
    chars: Vec<(usize, char)>,
    pos: usize,
    two_level: bool,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str, two_level: bool) -> Self {
        let chars = src
            .char_indices()
            .filter(|(_, c)| !c.is_whitespace())
            .collect();
        Parser {
            src,
            chars,
            pos: 0,
            two_level,
        }
    }

    fn offset(&self) -> usize {
        self.chars.get(self.pos).map_or(self.src.len(), |(i, _)| *i)
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            position: self.offset(),
            message: message.into(),
        })
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).map(|(_, c)| *c)
    }

    fn is_cross(c: char) -> bool {
        matches!(c, 'x' | 'X' | '×' | '*')
    }

    fn parse_all(&mut self) -> Result<Shape> {
        let s = self.parse_cross()?;
        if self.peek().is_some() {
            return self.err("unexpected trailing input");
        }
        Ok(s)
    }

    fn parse_cross(&mut self) -> Result<Shape> {
        let left = self.parse_nest()?;
        if self.peek().is_some_and(Self::is_cross) {
            self.pos += 1;
            let right = self.parse_nest()?;
            if self.peek().is_some_and(Self::is_cross) {
                return self.err("chained crossing needs parentheses");
            }
            return Ok(Shape::Cross(Box::new(left), Box::new(right)));
        }
        Ok(left)
    }

    fn parse_nest(&mut self) -> Result<Shape> {
        let left = self.parse_term()?;
        if self.peek() == Some('/') {
            self.pos += 1;
            let right = self.parse_nest()?;
            return Ok(Shape::Nest(Box::new(left), Box::new(right)));
        }
        Ok(left)
    }

    fn parse_term(&mut self) -> Result<Shape> {
        match self.peek() {
            Some('(') => {
                self.pos += 1;
                let inner = self.parse_cross()?;
                if self.peek() != Some(')') {
                    return self.err("expected `)`");
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() => {
                let start = self.offset();
                let mut value = String::new();
                while let Some(d) = self.peek().filter(char::is_ascii_digit) {
                    value.push(d);
                    self.pos += 1;
                }
                let n: usize = value.parse().map_err(|_| Error::Parse {
                    position: start,
                    message: format!("integer `{value}` out of range"),
                })?;
                if n == 0 {
                    return Err(Error::Parse {
                        position: start,
                        message: "unit count must be positive".into(),
                    });
                }
                if self.two_level && !n.is_power_of_two() {
                    return Err(Error::NonPowerOfTwo(n));
                }
                Ok(Shape::Leaf(n))
            }
            Some(c) => self.err(format!("unexpected `{c}`")),
            None => self.err("unexpected end of input"),
        }
    }
}

/// One violation of the orthogonal-block-structure conditions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    UniversalCount(usize),
    EqualityCount(usize),
    NotUniform(String),
    Equivalent(String, String),
    NotOrthogonal(String, String),
    SupMissing(String, String),
    InfMissing(String, String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UniversalCount(c) => write!(f, "{c} universal factors (expected 1)"),
            Violation::EqualityCount(c) => write!(f, "{c} equality factors (expected 1)"),
            Violation::NotUniform(a) => write!(f, "{a} is not uniform"),
            Violation::Equivalent(a, b) => write!(f, "{a} and {b} are equivalent"),
            Violation::NotOrthogonal(a, b) => write!(f, "{a} and {b} are not orthogonal"),
            Violation::SupMissing(a, b) => write!(f, "{a}∨{b} is not in the structure"),
            Violation::InfMissing(a, b) => write!(f, "{a}∧{b} is not in the structure"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(Violation::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

/// Forward or backward criterion ordering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl std::str::FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "forward" => Ok(Direction::Forward),
            "backward" => Ok(Direction::Backward),
            other => Err(Error::Invalid(format!("unknown direction `{other}`"))),
        }
    }
}

/// The strata of an orthogonal block structure.
///
/// Projectors are never stored: `P_F = Σ_{G ⪰ F} μ(F, G) A_G`, and the
/// squared norm `‖P_F u‖²` is evaluated from class sums.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StratumDecomposition {
    n_units: usize,
    names: Vec<String>,
    class_of: Vec<Vec<usize>>,
    class_size: Vec<usize>,
    n_classes: Vec<usize>,
    mobius: Vec<Vec<i64>>,
    dimensions: Vec<usize>,
}

impl StratumDecomposition {
    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn n_strata(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dimensions(&self) -> &[usize] {
        &self.dimensions
    }

    pub fn mobius(&self) -> &[Vec<i64>] {
        &self.mobius
    }

    pub fn class_of(&self, factor: usize) -> &[usize] {
        &self.class_of[factor]
    }

    pub fn n_classes(&self, factor: usize) -> usize {
        self.n_classes[factor]
    }

    pub fn class_size(&self, factor: usize) -> usize {
        self.class_size[factor]
    }

    /// The class-averaging matrix `A_F`.
    pub fn averaging_matrix(&self, factor: usize) -> Vec<Vec<Rational>> {
        let n = self.n_units;
        let c = &self.class_of[factor];
        let w = Rational::new(1, self.class_size[factor] as i128);
        (0..n)
            .map(|u| {
                (0..n)
                    .map(|v| if c[u] == c[v] { w } else { Rational::zero() })
                    .collect()
            })
            .collect()
    }

    /// The orthogonal projector onto stratum `W_F`.
    pub fn projector(&self, factor: usize) -> Vec<Vec<Rational>> {
        let n = self.n_units;
        let mut p = vec![vec![Rational::zero(); n]; n];
        for g in 0..self.n_strata() {
            let mu = self.mobius[factor][g];
            if mu == 0 {
                continue;
            }
            let a = self.averaging_matrix(g);
            let mu = Rational::from_integer(mu as i128);
            for (prow, arow) in p.iter_mut().zip(a) {
                for (x, y) in prow.iter_mut().zip(arow) {
                    *x += mu * y;
                }
            }
        }
        p
    }

    /// Per factor, the sum of squared class totals `Σ_classes (Σ u)²`.
    pub fn class_square_sums(&self, u: &[i64]) -> Vec<i128> {
        let mut sums = Vec::with_capacity(self.n_strata());
        let mut buf = Vec::new();
        for g in 0..self.n_strata() {
            buf.clear();
            buf.resize(self.n_classes[g], 0i64);
            for (x, &c) in u.iter().zip(&self.class_of[g]) {
                buf[c] += x;
            }
            sums.push(buf.iter().map(|&s| (s as i128) * (s as i128)).sum());
        }
        sums
    }

    /// `‖P_F u‖²` for every stratum.
    pub fn squared_norms(&self, u: &[i64]) -> Vec<Rational> {
        let q = self.class_square_sums(u);
        self.combine(&q)
    }

    /// Combines per-factor squared class sums into stratum squared norms.
    pub fn combine(&self, q: &[i128]) -> Vec<Rational> {
        (0..self.n_strata())
            .map(|f| {
                let mut acc = Rational::zero();
                for g in 0..self.n_strata() {
                    let mu = self.mobius[f][g];
                    if mu != 0 {
                        acc += Rational::new(mu as i128 * q[g], self.class_size[g] as i128);
                    }
                }
                acc
            })
            .collect()
    }

    /// Squared norms when only the units flagged in `present` carry data:
    /// averaging uses the surviving members of each class.
    pub fn squared_norms_restricted(&self, u: &[i64], present: &[bool]) -> Vec<Rational> {
        let q: Vec<Rational> = (0..self.n_strata())
            .map(|g| {
                let k = self.n_classes[g];
                let mut sum = vec![0i64; k];
                let mut cnt = vec![0i64; k];
                for ((x, &c), &p) in u.iter().zip(&self.class_of[g]).zip(present) {
                    if p {
                        sum[c] += x;
                        cnt[c] += 1;
                    }
                }
                sum.iter()
                    .zip(&cnt)
                    .filter(|(_, &c)| c > 0)
                    .map(|(&s, &c)| Rational::new(s as i128 * s as i128, c as i128))
                    .fold(Rational::zero(), |a, b| a + b)
            })
            .collect();
        (0..self.n_strata())
            .map(|f| {
                (0..self.n_strata())
                    .filter(|&g| self.mobius[f][g] != 0)
                    .fold(Rational::zero(), |acc, g| {
                        acc + q[g] * Rational::from_integer(self.mobius[f][g] as i128)
                    })
            })
            .collect()
    }
}

/// A stratum variance or variance component: finite and nonnegative, or
/// infinite (fixed effects).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variance {
    Finite(Rational),
    Infinite,
}

impl Variance {
    pub fn finite(num: i128, den: i128) -> Self {
        Variance::Finite(Rational::new(num, den))
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Variance::Infinite)
    }

    fn add(&self, other: &Variance) -> Variance {
        match (self, other) {
            (Variance::Finite(a), Variance::Finite(b)) => Variance::Finite(a + b),
            _ => Variance::Infinite,
        }
    }

    fn scale(&self, w: &Rational) -> Variance {
        match self {
            Variance::Finite(a) => Variance::Finite(a * w),
            Variance::Infinite => {
                if w.is_zero() {
                    Variance::Finite(Rational::zero())
                } else {
                    Variance::Infinite
                }
            }
        }
    }

    /// `1/ξ`, with `1/∞ = 0`. `None` for a zero variance.
    pub fn reciprocal(&self) -> Option<Rational> {
        match self {
            Variance::Infinite => Some(Rational::zero()),
            Variance::Finite(a) if a.is_zero() => None,
            Variance::Finite(a) => Some(Rational::one() / a),
        }
    }
}

impl PartialOrd for Variance {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        use std::cmp::Ordering::*;
        Some(match (self, other) {
            (Variance::Infinite, Variance::Infinite) => Equal,
            (Variance::Infinite, _) => Greater,
            (_, Variance::Infinite) => Less,
            (Variance::Finite(a), Variance::Finite(b)) => a.cmp(b),
        })
    }
}

/// Stratum variances, one per factor in structure order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VarianceVector {
    pub xi: Vec<Variance>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(b: &BlockStructure) -> Vec<String> {
        b.names()
    }

    #[test]
    fn cross_of_two_pairs() {
        let b = BlockStructure::cross(
            &BlockStructure::unstructured(2),
            &BlockStructure::unstructured(2),
        );
        assert_eq!(b.n_units(), 4);
        assert_eq!(b.n_factors(), 4);
        assert!(b.validate().is_valid());
    }

    #[test]
    fn nest_gives_blocks() {
        let b = BlockStructure::nest(
            &BlockStructure::unstructured(8),
            &BlockStructure::unstructured(4),
        );
        assert_eq!(b.n_units(), 32);
        assert_eq!(names(&b), ["U", "B", "E"]);
        assert_eq!(b.factor(1).n_classes(), 8);
        assert_eq!(b.factor(1).class_sizes(), vec![4; 8]);
    }

    #[test]
    fn nest_with_single_unit_is_identity() {
        let inner = BlockStructure::parse("2/(4x4)").unwrap();
        let b = BlockStructure::nest(&BlockStructure::unstructured(1), &inner);
        assert_eq!(b.n_units(), inner.n_units());
        assert_eq!(b.n_factors(), inner.n_factors());
        for (f, g) in b.factors().iter().zip(inner.factors()) {
            assert!(f.is_equivalent(g));
        }
    }

    #[test]
    fn strip_plot_structure() {
        let b = BlockStructure::parse("2/(4x4)").unwrap();
        assert_eq!(b.n_units(), 32);
        assert_eq!(names(&b), ["U", "B", "R", "C", "E"]);
        assert!(b.validate().is_valid());
        let nested = BlockStructure::nest(
            &BlockStructure::unstructured(2),
            &BlockStructure::cross(
                &BlockStructure::unstructured(4),
                &BlockStructure::unstructured(4),
            ),
        );
        assert_eq!(names(&nested), names(&b));
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            BlockStructure::parse("8/(4x4"),
            Err(Error::Parse { .. })
        ));
        assert_eq!(BlockStructure::parse("6/4"), Err(Error::NonPowerOfTwo(6)));
        assert!(BlockStructure::parse_any("4x7").is_ok());
        assert!(matches!(
            BlockStructure::parse(""),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            BlockStructure::parse("8/4)"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn parse_blocked() {
        let b = BlockStructure::parse("8/4").unwrap();
        assert_eq!(b.n_units(), 32);
        assert_eq!(b.n_factors(), 3);
        let chain = BlockStructure::parse("4/2/2").unwrap();
        assert_eq!(names(&chain), ["U", "B", "T", "E"]);
    }

    #[test]
    fn nonuniform_factor_reported() {
        let f = UnitFactor::new("S", &[0, 0, 0, 1]);
        let b = BlockStructure::new(4, vec![f]).unwrap();
        let report = b.validate();
        assert!(report
            .violations
            .contains(&Violation::NotUniform("S".into())));
    }

    #[test]
    fn sup_inf_basics() {
        let b = BlockStructure::parse("2/(4x4)").unwrap();
        let (u, bl, r, c, e) = (0, 1, 2, 3, 4);
        assert!(b.sup(r, u).is_equivalent(b.factor(u)));
        assert!(b.inf(r, e).is_equivalent(b.factor(e)));
        assert!(b.sup(r, r).is_equivalent(b.factor(r)));
        assert!(b.inf(r, c).is_equivalent(b.factor(e)));
        assert!(b.sup(r, c).is_equivalent(b.factor(bl)));
    }

    #[test]
    fn strata_dimensions() {
        assert_eq!(
            BlockStructure::parse("8/4")
                .unwrap()
                .strata()
                .unwrap()
                .dimensions(),
            [1, 7, 24]
        );
        assert_eq!(
            BlockStructure::parse("2/(4x4)")
                .unwrap()
                .strata()
                .unwrap()
                .dimensions(),
            [1, 1, 6, 6, 18]
        );
    }

    #[test]
    fn two_element_projectors() {
        let s = BlockStructure::unstructured(4).strata().unwrap();
        let pu = s.projector(0);
        let pe = s.projector(1);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(pu[i][j], Rational::new(1, 4));
                let id = if i == j {
                    Rational::one()
                } else {
                    Rational::zero()
                };
                assert_eq!(pe[i][j], id - Rational::new(1, 4));
            }
        }
    }

    #[test]
    fn admissible_examples() {
        let b = BlockStructure::parse("8/4").unwrap();
        assert_eq!(b.admissible_subsets(), vec![vec![0], vec![0, 1]]);
        let s = BlockStructure::parse("2/(4x4)").unwrap();
        assert_eq!(
            s.admissible_subsets(),
            vec![
                vec![0],
                vec![0, 1],
                vec![0, 1, 2],
                vec![0, 1, 3],
                vec![0, 1, 2, 3]
            ]
        );
    }

    #[test]
    fn criterion_sequences() {
        let s = BlockStructure::parse("2/(4x4)").unwrap();
        // R carries more added generators than C.
        let w = [0, 0, 3, 1, 0];
        let fwd = s.criterion_sequence(Direction::Forward, Some(&w)).unwrap();
        assert_eq!(fwd, s.admissible_subsets());
        let mut bwd = s.criterion_sequence(Direction::Backward, Some(&w)).unwrap();
        bwd.reverse();
        assert_eq!(bwd, fwd);
        // C heavier: G4 precedes G3.
        let w = [0, 0, 1, 3, 0];
        let fwd = s.criterion_sequence(Direction::Forward, Some(&w)).unwrap();
        assert_eq!(fwd[2], vec![0, 1, 3]);
        assert_eq!(fwd[3], vec![0, 1, 2]);
        assert!(matches!(
            s.criterion_sequence(Direction::Forward, None),
            Err(Error::AmbiguousOrder(..))
        ));
        let b = BlockStructure::parse("8/4").unwrap();
        assert_eq!(
            b.criterion_sequence(Direction::Forward, None).unwrap(),
            vec![vec![0], vec![0, 1]]
        );
    }

    #[test]
    fn variance_examples() {
        let b = BlockStructure::unstructured(5);
        let xi = b
            .stratum_variance(&[Variance::finite(0, 1), Variance::finite(1, 1)])
            .unwrap();
        assert_eq!(xi.xi, vec![Variance::finite(1, 1), Variance::finite(1, 1)]);

        let b = BlockStructure::parse("8/4").unwrap();
        let xi = b
            .stratum_variance(&[
                Variance::finite(0, 1),
                Variance::Infinite,
                Variance::finite(1, 1),
            ])
            .unwrap();
        assert!(xi.xi[0].is_infinite() && xi.xi[1].is_infinite());
        assert_eq!(xi.xi[2], Variance::finite(1, 1));

        let xi = b
            .stratum_variance(&[
                Variance::finite(0, 1),
                Variance::finite(2, 1),
                Variance::finite(1, 1),
            ])
            .unwrap();
        assert_eq!(xi.xi[2], Variance::finite(1, 1));
        assert_eq!(xi.xi[1], Variance::finite(9, 1));
        assert!(b.is_feasible(&xi));
    }

    #[test]
    fn mobius_of_chain() {
        let b = BlockStructure::parse("8/4").unwrap();
        let mu = b.mobius();
        assert_eq!(mu[2], vec![0, -1, 1]);
        assert_eq!(mu[1], vec![-1, 1, 0]);
    }
}
