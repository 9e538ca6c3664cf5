//! Design-key templates, generator pools and regular design construction.
//!
//! A regular two-level design on a simple block structure is described by the
//! rows of `K^{-1}`: one defining word per unit pseudo-factor, plus one
//! defining word per added treatment factor. Each unit pseudo-factor belongs
//! to a leaf of the structure; the stratum of any treatment word follows from
//! the leaves its unit alias touches.
//!
//! Templates fix which positions of those words are free (`*`). A
//! [`GeneratorSet`] fills every free position with a row of the matching
//! [`PoolMatrix`].

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gf2::{letters, BitMatrix, BitVector};
use crate::structure::{BlockStructure, Shape};

/// Largest number of unit pseudo-factors (log2 of the run size) handled.
pub const MAX_PSEUDO_FACTORS: usize = 24;
/// Largest number of treatment factors handled by the word enumeration.
pub const MAX_TREATMENT_FACTORS: usize = 30;
/// Resamples attempted before giving up on a valid generator set.
pub const RETRY_CAP: usize = 100;

/// A unit pseudo-factor: one bit of one leaf's coordinate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoFactor {
    pub label: String,
    pub leaf: usize,
    pub bit: usize,
}

/// One free row of a template.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slot {
    /// Pool (and stratum) label, e.g. `B`, `U` or `U.row`.
    pub pool: String,
    /// Treatment factor carrying the fixed 1 of this row.
    pub target: usize,
    /// Treatment factors covered by the free positions, in pool column order.
    pub stars: Vec<usize>,
    pub kind: SlotKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    /// Row `row` of the unit-pseudo-factor part of `K^{-1}`.
    Unit { row: usize },
    /// Added factor: `target = Σ fill·stars`.
    Added,
}

/// A factor fixed by a crossing constraint: the same blocking pseudo-factor
/// must be defined both by a row word and by a column word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharedFactor {
    pub target: usize,
    /// Pseudo-factor row whose word supplies one side of the product.
    pub row: usize,
    pub stars: Vec<usize>,
    pub fill: BitVector,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Step {
    Slot(usize),
    Shared(usize),
}

/// Assignment of treatment factors to the rows and columns of a crossed
/// structure.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactorSplit {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl FactorSplit {
    /// Parses `rows=A..F,cols=G..J` or `rows=ABC,cols=DE` against labels.
    pub fn parse(spec: &str, labels: &[String]) -> Result<Self> {
        let mut rows = None;
        let mut cols = None;
        for part in split_top(spec) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("expected key=value in `{part}`")))?;
            let list = parse_factor_list(value.trim(), labels)?;
            match key.trim() {
                "rows" | "row" => rows = Some(list),
                "cols" | "col" | "columns" => cols = Some(list),
                other => return Err(Error::Invalid(format!("unknown split key `{other}`"))),
            }
        }
        match (rows, cols) {
            (Some(rows), Some(cols)) => Ok(FactorSplit { rows, cols }),
            _ => Err(Error::Invalid("split needs both rows= and cols=".into())),
        }
    }
}

fn split_top(spec: &str) -> Vec<&str> {
    // Commas separate the two assignments; a comma inside a list is only
    // allowed before the next `key=`.
    let mut parts = Vec::new();
    let mut start = 0;
    let bytes = spec.as_bytes();
    for (i, &c) in bytes.iter().enumerate() {
        if c == b',' || c == b';' {
            let rest = &spec[i + 1..];
            let next_is_key = rest.split_once('=').is_some_and(|(k, _)| {
                !k.contains(',') && k.trim().chars().all(char::is_alphabetic)
            });
            if next_is_key {
                parts.push(&spec[start..i]);
                start = i + 1;
            }
        }
    }
    parts.push(&spec[start..]);
    parts
}

fn parse_factor_list(value: &str, labels: &[String]) -> Result<Vec<usize>> {
    let find = |name: &str| {
        labels
            .iter()
            .position(|l| l == name)
            .ok_or_else(|| Error::UnknownLabel(name.to_string()))
    };
    if let Some((a, b)) = value.split_once("..") {
        let (a, b) = (find(a.trim())?, find(b.trim())?);
        if a > b {
            return Err(Error::Invalid(format!("empty range `{value}`")));
        }
        return Ok((a..=b).collect());
    }
    if value.contains(',') || value.contains(' ') {
        return value
            .split([',', ' '])
            .filter(|s| !s.is_empty())
            .map(find)
            .collect();
    }
    if labels.iter().all(|l| l.len() == 1) {
        return value.chars().map(|c| find(&c.to_string())).collect();
    }
    Ok(vec![find(value)?])
}

/// Free positions and fixed entries of a design key for one structure.
#[derive(Clone, Debug)]
pub struct KeyTemplate {
    structure: BlockStructure,
    labels: Vec<String>,
    n: usize,
    l0: usize,
    pseudo: Vec<PseudoFactor>,
    /// Basic treatment factor of each pseudo-factor row.
    basic: Vec<usize>,
    /// Fixed star-free rows have no slot.
    row_slot: Vec<Option<usize>>,
    slots: Vec<Slot>,
    shared: Vec<SharedFactor>,
    /// Order in which added and shared factors are defined.
    steps: Vec<Step>,
    /// Pool labels in slot order, one per stratum with free rows.
    pool_labels: Vec<String>,
    /// Stratum index for every unit alias, indexed by the alias bits.
    stratum_of_alias: Vec<u8>,
    weights: Vec<u64>,
}

impl KeyTemplate {
    pub fn structure(&self) -> &BlockStructure {
        &self.structure
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn l0(&self) -> usize {
        self.l0
    }

    /// Number of unit pseudo-factors, `n - l0`.
    pub fn n_pseudo(&self) -> usize {
        self.pseudo.len()
    }

    pub fn pseudo_factors(&self) -> &[PseudoFactor] {
        &self.pseudo
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn shared_factors(&self) -> &[SharedFactor] {
        &self.shared
    }

    /// Basic treatment factor of each pseudo-factor row.
    pub fn basic_factors(&self) -> &[usize] {
        &self.basic
    }

    /// Pool labels with at least one free row, in slot order.
    pub fn pool_labels(&self) -> &[String] {
        &self.pool_labels
    }

    /// Number of free rows per pool label.
    pub fn slot_counts(&self) -> Vec<(String, usize)> {
        self.pool_labels
            .iter()
            .map(|l| {
                (
                    l.clone(),
                    self.slots.iter().filter(|s| &s.pool == l).count(),
                )
            })
            .collect()
    }

    /// Indices of the slots drawing from `pool`.
    pub fn slots_of(&self, pool: &str) -> Vec<usize> {
        (0..self.slots.len())
            .filter(|&i| self.slots[i].pool == pool)
            .collect()
    }

    /// Tiebreak weights for incomparable strata: the number of added factors
    /// attached to each stratum (zero where not applicable).
    pub fn tiebreak_weights(&self) -> &[u64] {
        &self.weights
    }

    /// Stratum (factor index) of a unit alias given as pseudo-factor bits.
    pub fn stratum_of_alias(&self, alias: u64) -> usize {
        self.stratum_of_alias[alias as usize] as usize
    }

    /// Star mask as a matrix over the treatment factors: one row per slot.
    pub fn star_mask(&self) -> BitMatrix {
        let rows = self
            .slots
            .iter()
            .map(|s| {
                let mut v = BitVector::zeros(self.n);
                for &c in &s.stars {
                    v.set(c, true);
                }
                v
            })
            .collect();
        let row_labels = self
            .slots
            .iter()
            .map(|s| format!("{}:{}", s.pool, self.labels[s.target]))
            .collect();
        BitMatrix::new(rows, row_labels, self.labels.clone()).expect("consistent shape")
    }

    /// Renders the template of `K^{-1}` with `*` at free positions.
    pub fn render(&self) -> String {
        let mut out = self.labels.join(" ");
        out.push('\n');
        let mut line = |cells: Vec<String>, label: &str| {
            out.push_str(&cells.join(" "));
            out.push_str("  ");
            out.push_str(label);
            out.push('\n');
        };
        for (r, p) in self.pseudo.iter().enumerate() {
            let mut cells = vec!["0".to_string(); self.n];
            cells[self.basic[r]] = "1".into();
            if let Some(s) = self.row_slot[r] {
                for &c in &self.slots[s].stars {
                    cells[c] = "*".into();
                }
            }
            line(cells, &p.label);
        }
        for step in &self.steps {
            let mut cells = vec!["0".to_string(); self.n];
            match step {
                Step::Slot(s) => {
                    let slot = &self.slots[*s];
                    cells[slot.target] = "1".into();
                    for &c in &slot.stars {
                        cells[c] = "*".into();
                    }
                    line(cells, &slot.pool);
                }
                Step::Shared(i) => {
                    let sh = &self.shared[*i];
                    cells[sh.target] = "1".into();
                    cells[self.basic[sh.row]] = "1".into();
                    if let Some(s) = self.row_slot[sh.row] {
                        for &c in &self.slots[s].stars {
                            cells[c] = "*".into();
                        }
                    }
                    for c in sh.fill.ones() {
                        cells[sh.stars[c]] = "1".into();
                    }
                    line(cells, "U");
                }
            }
        }
        out
    }

    /// Row word (over treatment factors) of pseudo-factor `r` for given fills.
    fn unit_word(&self, r: usize, fills: &[u64]) -> u64 {
        let mut w = 1u64 << self.basic[r];
        if let Some(s) = self.row_slot[r] {
            w ^= spread(fills[s], &self.slots[s].stars);
        }
        w
    }
}

/// Maps the low bits of `fill` onto the listed positions.
fn spread(fill: u64, positions: &[usize]) -> u64 {
    positions
        .iter()
        .enumerate()
        .filter(|(i, _)| fill >> i & 1 == 1)
        .fold(0, |acc, (_, &p)| acc | 1u64 << p)
}

/// Builds the design-key template for a simple block structure.
///
/// Supported shapes are nested chains `s1/s2/.../sL` (including a single
/// unstructured set) and blocked crossings `s0/(s1 x s2)` or `s1 x s2`; the
/// latter need a row/column split of the treatment factors.
pub fn template_for(
    b: &BlockStructure,
    n: usize,
    l0: usize,
    split: Option<&FactorSplit>,
) -> Result<KeyTemplate> {
    template_with_labels(b, letters(n), l0, split)
}

/// As [`template_for`] with explicit treatment-factor labels.
pub fn template_with_labels(
    b: &BlockStructure,
    labels: Vec<String>,
    l0: usize,
    split: Option<&FactorSplit>,
) -> Result<KeyTemplate> {
    let n = labels.len();
    let shape = b
        .shape()
        .ok_or_else(|| {
            Error::UnsupportedStructure("class-table structures have no key template".into())
        })?
        .clone();
    let leaves = b.leaves().expect("simple structure").to_vec();
    if n > MAX_TREATMENT_FACTORS {
        return Err(Error::TooManyFactors(n, MAX_TREATMENT_FACTORS));
    }
    let bits: Vec<usize> = leaves
        .iter()
        .map(|l| {
            if l.size.is_power_of_two() {
                Ok(l.size.trailing_zeros() as usize)
            } else {
                Err(Error::NonPowerOfTwo(l.size))
            }
        })
        .collect::<Result<_>>()?;
    let p: usize = bits.iter().sum();
    if p > MAX_PSEUDO_FACTORS {
        return Err(Error::TooManyFactors(p, MAX_PSEUDO_FACTORS));
    }
    if l0 > n || n - l0 != p {
        return Err(Error::Infeasible(format!(
            "{} units need n - l0 = {p}, got n = {n}, l0 = {l0}",
            b.n_units()
        )));
    }

    let names = b.names();
    let mut builder = Builder {
        labels: labels.clone(),
        pseudo: Vec::new(),
        basic: Vec::new(),
        row_slot: Vec::new(),
        slots: Vec::new(),
        shared: Vec::new(),
        steps: Vec::new(),
    };
    let mut weights = vec![0u64; b.n_factors()];
    let mut pseudo_count: BTreeMap<String, usize> = BTreeMap::new();
    let mut pseudo_label = |leaf: usize| {
        let owner = &names[leaves[leaf].owner];
        let c = pseudo_count.entry(owner.clone()).or_default();
        *c += 1;
        format!("{owner}{c}")
    };

    match classify(&shape) {
        Some(Layout::Chain(sizes)) => {
            if split.is_some() {
                return Err(Error::Invalid(
                    "a factor split applies only to crossed structures".into(),
                ));
            }
            // Group order: the finest leaf first, then from coarse to fine.
            let last = sizes.len() - 1;
            let mut order = vec![last];
            order.extend(0..last);
            let mut next = 0;
            let mut earlier: Vec<usize> = Vec::new();
            for &leaf in &order {
                let pool = names[leaves[leaf].owner].clone();
                let mut group = Vec::new();
                for bit in 0..bits[leaf] {
                    let target = next;
                    next += 1;
                    let label = pseudo_label(leaf);
                    let stars = if leaf == last {
                        Vec::new()
                    } else {
                        earlier.clone()
                    };
                    builder.unit_row(label, leaf, bit, target, &pool, stars);
                    group.push(target);
                }
                earlier.extend(group);
            }
            for target in p..n {
                builder.added(target, "U", (0..p).collect());
            }
        }
        Some(Layout::Crossed { block, row, col }) => {
            let split = split.ok_or_else(|| {
                Error::Infeasible("crossed structures need a row/column factor split".into())
            })?;
            check_split(split, n)?;
            let l1 = block.map_or(0, |l| bits[l]);
            let (a, c_bits) = (bits[row], bits[col]);
            let (r, c) = (l1 + a, l1 + c_bits);
            let (n1, n2) = (split.rows.len(), split.cols.len());
            if n1 < r || n2 < c {
                return Err(Error::Infeasible(format!(
                    "{n1} row and {n2} column factors cannot fill {r} row and {c} column pseudo-factors"
                )));
            }
            for bit in 0..a {
                let label = pseudo_label(row);
                builder.unit_row(label, row, bit, split.rows[bit], "R", Vec::new());
            }
            for bit in 0..c_bits {
                let label = pseudo_label(col);
                builder.unit_row(label, col, bit, split.cols[bit], "C", Vec::new());
            }
            let mut bgen_rows = Vec::new();
            if let Some(bl) = block {
                let pool = names[leaves[bl].owner].clone();
                for bit in 0..l1 {
                    let label = pseudo_label(bl);
                    bgen_rows.push(builder.pseudo.len());
                    builder.unit_row(
                        label,
                        bl,
                        bit,
                        split.rows[a + bit],
                        &pool,
                        split.rows[..a].to_vec(),
                    );
                }
            }
            for &t in &split.rows[r..] {
                builder.added(t, "U.row", split.rows[..r].to_vec());
            }
            // Column blocking words are fixed to successive admissible rows
            // of the reduced column pool.
            let col_pool = PoolMatrix::full("B.col", c_bits).reduce();
            for (i, &row_idx) in bgen_rows.iter().enumerate() {
                let fill = col_pool
                    .rows
                    .get(i)
                    .cloned()
                    .unwrap_or_else(|| BitVector::zeros(c_bits));
                builder.shared(
                    split.cols[c_bits + i],
                    row_idx,
                    split.cols[..c_bits].to_vec(),
                    fill,
                );
            }
            for &t in &split.cols[c..] {
                builder.added(t, "U.col", split.cols[..c].to_vec());
            }
            let ri = b.index_of("R").expect("crossed structure has R");
            let ci = b.index_of("C").expect("crossed structure has C");
            weights[ri] = (n1 - r) as u64;
            weights[ci] = (n2 - c) as u64;
        }
        None => {
            return Err(Error::UnsupportedStructure(format!(
                "no template for {} (supported: nested chains and blocked crossings)",
                describe(&shape)
            )))
        }
    }

    let stratum_of_alias = alias_table(b, &builder.pseudo)?;
    let mut pool_labels: Vec<String> = Vec::new();
    for s in &builder.slots {
        if !pool_labels.contains(&s.pool) {
            pool_labels.push(s.pool.clone());
        }
    }
    // Slots are kept stratum-major, index-minor.
    let mut perm: Vec<usize> = (0..builder.slots.len()).collect();
    perm.sort_by_key(|&i| {
        (
            pool_labels
                .iter()
                .position(|l| *l == builder.slots[i].pool)
                .unwrap(),
            i,
        )
    });
    let mut inverse = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inverse[old] = new;
    }
    let slots = perm.iter().map(|&i| builder.slots[i].clone()).collect();
    let row_slot = builder
        .row_slot
        .iter()
        .map(|s| s.map(|s| inverse[s]))
        .collect();
    let steps = builder
        .steps
        .iter()
        .map(|s| match s {
            Step::Slot(i) => Step::Slot(inverse[*i]),
            Step::Shared(i) => Step::Shared(*i),
        })
        .collect();

    Ok(KeyTemplate {
        structure: b.clone(),
        labels,
        n,
        l0,
        pseudo: builder.pseudo,
        basic: builder.basic,
        row_slot,
        slots,
        shared: builder.shared,
        steps,
        pool_labels,
        stratum_of_alias,
        weights,
    })
}

struct Builder {
    labels: Vec<String>,
    pseudo: Vec<PseudoFactor>,
    basic: Vec<usize>,
    row_slot: Vec<Option<usize>>,
    slots: Vec<Slot>,
    shared: Vec<SharedFactor>,
    steps: Vec<Step>,
}

impl Builder {
    fn unit_row(
        &mut self,
        label: String,
        leaf: usize,
        bit: usize,
        target: usize,
        pool: &str,
        stars: Vec<usize>,
    ) {
        let row = self.pseudo.len();
        self.pseudo.push(PseudoFactor { label, leaf, bit });
        self.basic.push(target);
        if stars.is_empty() {
            self.row_slot.push(None);
        } else {
            self.row_slot.push(Some(self.slots.len()));
            self.slots.push(Slot {
                pool: pool.to_string(),
                target,
                stars,
                kind: SlotKind::Unit { row },
            });
        }
    }

    fn added(&mut self, target: usize, pool: &str, stars: Vec<usize>) {
        debug_assert!(target < self.labels.len());
        self.steps.push(Step::Slot(self.slots.len()));
        self.slots.push(Slot {
            pool: pool.to_string(),
            target,
            stars,
            kind: SlotKind::Added,
        });
    }

    fn shared(&mut self, target: usize, row: usize, stars: Vec<usize>, fill: BitVector) {
        self.steps.push(Step::Shared(self.shared.len()));
        self.shared.push(SharedFactor {
            target,
            row,
            stars,
            fill,
        });
    }
}

fn check_split(split: &FactorSplit, n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &f in split.rows.iter().chain(&split.cols) {
        if f >= n {
            return Err(Error::Invalid(format!("split names factor {f} of {n}")));
        }
        if seen[f] {
            return Err(Error::Invalid("split lists a factor twice".into()));
        }
        seen[f] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Invalid(
            "split must assign every treatment factor".into(),
        ));
    }
    Ok(())
}

enum Layout {
    Chain(Vec<usize>),
    Crossed {
        block: Option<usize>,
        row: usize,
        col: usize,
    },
}

fn classify(shape: &Shape) -> Option<Layout> {
    fn chain(s: &Shape, out: &mut Vec<usize>) -> bool {
        match s {
            Shape::Leaf(n) => {
                out.push(*n);
                true
            }
            Shape::Nest(a, b) => match **a {
                Shape::Leaf(n) => {
                    out.push(n);
                    chain(b, out)
                }
                _ => false,
            },
            Shape::Cross(..) => false,
        }
    }
    let mut sizes = Vec::new();
    if chain(shape, &mut sizes) {
        return Some(Layout::Chain(sizes));
    }
    match shape {
        Shape::Cross(a, b) if matches!(**a, Shape::Leaf(_)) && matches!(**b, Shape::Leaf(_)) => {
            Some(Layout::Crossed {
                block: None,
                row: 0,
                col: 1,
            })
        }
        Shape::Nest(a, b) if matches!(**a, Shape::Leaf(_)) => match &**b {
            Shape::Cross(x, y)
                if matches!(**x, Shape::Leaf(_)) && matches!(**y, Shape::Leaf(_)) =>
            {
                Some(Layout::Crossed {
                    block: Some(0),
                    row: 1,
                    col: 2,
                })
            }
            _ => None,
        },
        _ => None,
    }
}

fn describe(shape: &Shape) -> String {
    match shape {
        Shape::Leaf(n) => n.to_string(),
        Shape::Nest(a, b) => format!("{}/{}", describe(a), describe(b)),
        Shape::Cross(a, b) => format!("({} x {})", describe(a), describe(b)),
    }
}

fn alias_table(b: &BlockStructure, pseudo: &[PseudoFactor]) -> Result<Vec<u8>> {
    let masks = b.factor_masks().expect("simple structure");
    let leaves = b.leaves().expect("simple structure");
    if b.n_factors() > u8::MAX as usize {
        return Err(Error::TooManyFactors(b.n_factors(), u8::MAX as usize));
    }
    let owner_mask: Vec<u64> = pseudo
        .iter()
        .map(|pf| masks[leaves[pf.leaf].owner])
        .collect();
    let mut by_mask = std::collections::HashMap::new();
    for (i, &m) in masks.iter().enumerate() {
        by_mask.entry(m).or_insert(i as u8);
    }
    let p = pseudo.len();
    let mut table = vec![0u8; 1 << p];
    let mut union = vec![0u64; 1 << p];
    for a in 1usize..(1 << p) {
        let low = a.trailing_zeros() as usize;
        union[a] = union[a & (a - 1)] | owner_mask[low];
        table[a] = *by_mask.get(&union[a]).ok_or_else(|| {
            Error::Invalid(format!(
                "leaf set {:#b} is not a factor of the structure",
                union[a]
            ))
        })?;
    }
    Ok(table)
}

/// Candidate fill-ins for the free positions of one stratum.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolMatrix {
    pub stratum: String,
    pub width: usize,
    pub rows: Vec<BitVector>,
    pub reduced: bool,
}

impl PoolMatrix {
    /// All `2^w` rows in counting order, column 0 as the low bit.
    pub fn full(stratum: &str, width: usize) -> Self {
        assert!(width < 32, "pool width {width} too large");
        PoolMatrix {
            stratum: stratum.to_string(),
            width,
            rows: (0..1u64 << width)
                .map(|v| BitVector::from_u64(width, v))
                .collect(),
            reduced: false,
        }
    }

    /// Treatment-fraction pools keep rows with at least two ones; stratum
    /// pools drop the zero row.
    pub fn reduce(&self) -> Self {
        let min = if is_u_pool(&self.stratum) { 2 } else { 1 };
        PoolMatrix {
            stratum: self.stratum.clone(),
            width: self.width,
            rows: self
                .rows
                .iter()
                .filter(|r| r.weight() >= min)
                .cloned()
                .collect(),
            reduced: true,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn as_matrix(&self) -> BitMatrix {
        let labels = (1..=self.width).map(|i| format!("*{i}")).collect();
        let row_labels = (0..self.rows.len()).map(|i| i.to_string()).collect();
        BitMatrix::new(self.rows.clone(), row_labels, labels).expect("consistent pool")
    }
}

fn is_u_pool(label: &str) -> bool {
    label == "U" || label.starts_with("U.")
}

/// Pool for one label of a template.
pub fn pool_for(template: &KeyTemplate, stratum: &str, reduced: bool) -> Result<PoolMatrix> {
    let slot = template
        .slots
        .iter()
        .find(|s| s.pool == stratum)
        .ok_or_else(|| Error::UnknownLabel(stratum.to_string()))?;
    let full = PoolMatrix::full(stratum, slot.stars.len());
    Ok(if reduced { full.reduce() } else { full })
}

/// One pool per label of a template, plus the sampling rules.
#[derive(Clone, Debug)]
pub struct PoolSet {
    pools: BTreeMap<String, PoolMatrix>,
    /// Rows drawn for the same stratum must differ.
    pub distinct: bool,
}

impl PoolSet {
    pub fn for_template(template: &KeyTemplate, reduced: bool) -> Result<Self> {
        let mut pools = BTreeMap::new();
        for label in &template.pool_labels {
            pools.insert(label.clone(), pool_for(template, label, reduced)?);
        }
        Ok(PoolSet {
            pools,
            distinct: false,
        })
    }

    pub fn from_pools(pools: Vec<PoolMatrix>, distinct: bool) -> Self {
        PoolSet {
            pools: pools.into_iter().map(|p| (p.stratum.clone(), p)).collect(),
            distinct,
        }
    }

    pub fn get(&self, label: &str) -> Result<&PoolMatrix> {
        self.pools
            .get(label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn check(&self, template: &KeyTemplate) -> Result<()> {
        for s in &template.slots {
            let pool = self.get(&s.pool)?;
            if pool.width != s.stars.len() {
                return Err(Error::DimensionMismatch(format!(
                    "pool {} has width {}, template needs {}",
                    s.pool,
                    pool.width,
                    s.stars.len()
                )));
            }
            if pool.is_empty() {
                return Err(Error::EmptyPool(s.pool.clone()));
            }
        }
        Ok(())
    }

    /// Draws one row of the pool for `slot`.
    pub fn draw<R: Rng + ?Sized>(
        &self,
        template: &KeyTemplate,
        slot: usize,
        rng: &mut R,
    ) -> Result<BitVector> {
        let pool = self.get(&template.slots[slot].pool)?;
        if pool.is_empty() {
            return Err(Error::EmptyPool(pool.stratum.clone()));
        }
        Ok(pool.rows[rng.gen_range(0..pool.rows.len())].clone())
    }
}

/// Fill-ins for every free row of a template.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorSet {
    template: Arc<KeyTemplate>,
    fills: Vec<BitVector>,
}

impl PartialEq for KeyTemplate {
    fn eq(&self, other: &Self) -> bool {
        self.labels == other.labels
            && self.pseudo == other.pseudo
            && self.basic == other.basic
            && self.slots == other.slots
            && self.shared == other.shared
            && self.structure == other.structure
    }
}

impl Eq for KeyTemplate {}

impl GeneratorSet {
    pub fn new(template: Arc<KeyTemplate>, fills: Vec<BitVector>) -> Result<Self> {
        if fills.len() != template.slots.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} fills for {} free rows",
                fills.len(),
                template.slots.len()
            )));
        }
        for (f, s) in fills.iter().zip(&template.slots) {
            if f.len() != s.stars.len() {
                return Err(Error::DimensionMismatch(format!(
                    "fill of width {} for a {}-wide row of pool {}",
                    f.len(),
                    s.stars.len(),
                    s.pool
                )));
            }
        }
        Ok(GeneratorSet { template, fills })
    }

    pub fn template(&self) -> &Arc<KeyTemplate> {
        &self.template
    }

    pub fn fills(&self) -> &[BitVector] {
        &self.fills
    }

    pub fn fill(&self, slot: usize) -> &BitVector {
        &self.fills[slot]
    }

    /// Returns a copy with one fill replaced.
    pub fn with_fill(&self, slot: usize, fill: BitVector) -> GeneratorSet {
        let mut fills = self.fills.clone();
        fills[slot] = fill;
        GeneratorSet {
            template: self.template.clone(),
            fills,
        }
    }

    fn fill_bits(&self) -> Vec<u64> {
        self.fills.iter().map(BitVector::to_u64).collect()
    }

    /// Defining words (over treatment factors) of every row of `K^{-1}`:
    /// pseudo-factor rows first, then one treatment word per added factor.
    pub fn inverse_rows(&self) -> Vec<u64> {
        let t = &self.template;
        let fills = self.fill_bits();
        let mut rows: Vec<u64> = (0..t.pseudo.len())
            .map(|r| t.unit_word(r, &fills))
            .collect();
        for step in &t.steps {
            rows.push(match step {
                Step::Slot(s) => {
                    (1u64 << t.slots[*s].target) ^ spread(fills[*s], &t.slots[*s].stars)
                }
                Step::Shared(i) => {
                    let sh = &t.shared[*i];
                    (1u64 << sh.target)
                        ^ t.unit_word(sh.row, &fills)
                        ^ spread(sh.fill.to_u64(), &sh.stars)
                }
            });
        }
        rows
    }

    /// The assembled `K^{-1}` (rows: pseudo-factors then added factors).
    pub fn key_inverse(&self) -> BitMatrix {
        let t = &self.template;
        let rows = self
            .inverse_rows()
            .into_iter()
            .map(|w| BitVector::from_u64(t.n, w))
            .collect();
        BitMatrix::new(rows, self.row_labels(), t.labels.clone()).expect("square key")
    }

    fn row_labels(&self) -> Vec<String> {
        let t = &self.template;
        let mut labels: Vec<String> = t.pseudo.iter().map(|p| p.label.clone()).collect();
        labels.extend((1..=t.l0).map(|i| format!("I{i}")));
        labels
    }

    /// The design key `K` mapping pseudo-factor levels (and the identity
    /// part of the added factors) to treatment levels.
    pub fn key(&self) -> Result<BitMatrix> {
        self.key_inverse().invert().map_err(|_| Error::SingularKey)
    }

    /// Unit alias of every treatment factor, as pseudo-factor bits.
    pub fn aliases(&self) -> Result<Vec<u64>> {
        let t = &self.template;
        let p = t.pseudo.len();
        let fills = self.fill_bits();
        // Invert the basic part: rows are pseudo-factors, columns the basics.
        let rows: Vec<BitVector> = (0..p)
            .map(|r| {
                let w = t.unit_word(r, &fills);
                BitVector::from_bools(&t.basic.iter().map(|&f| w >> f & 1 == 1).collect::<Vec<_>>())
            })
            .collect();
        let inv = BitMatrix::from_rows(rows)?
            .invert()
            .map_err(|_| Error::SingularKey)?;
        let mut alias = vec![0u64; t.n];
        for (j, &f) in t.basic.iter().enumerate() {
            alias[f] = inv.row(j).to_u64();
        }
        for step in &t.steps {
            match step {
                Step::Slot(s) => {
                    let slot = &t.slots[*s];
                    alias[slot.target] = slot
                        .stars
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| fills[*s] >> i & 1 == 1)
                        .fold(0, |acc, (_, &c)| acc ^ alias[c]);
                }
                Step::Shared(i) => {
                    let sh = &t.shared[*i];
                    // The column word `target + fill` must alias the same
                    // blocking pseudo-factor as the row word.
                    let others = sh
                        .stars
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| sh.fill.get(*i))
                        .fold(0, |acc, (_, &c)| acc ^ alias[c]);
                    alias[sh.target] = (1u64 << sh.row) ^ others;
                }
            }
        }
        Ok(alias)
    }

    /// Valid when the assembled key is invertible and, if required, rows of
    /// the same stratum are distinct.
    pub fn is_valid(&self, distinct: bool) -> bool {
        if distinct {
            let t = &self.template;
            for label in &t.pool_labels {
                let idx = t.slots_of(label);
                for (a, &i) in idx.iter().enumerate() {
                    if idx[a + 1..].iter().any(|&j| self.fills[i] == self.fills[j]) {
                        return false;
                    }
                }
            }
        }
        self.key_inverse().rank() == self.template.n
    }

    /// Words of the group spanned by all rows of `K^{-1}` except those of
    /// the finest leaf, classified by stratum.
    pub fn words_by_stratum(&self) -> Result<StratifiedWordSet> {
        let t = &self.template;
        let alias = self.aliases()?;
        let b = &t.structure;
        let finest: u64 = t
            .pseudo
            .iter()
            .enumerate()
            .filter(|(_, pf)| b.leaves().unwrap()[pf.leaf].owner == b.equality_index())
            .fold(0, |acc, (i, _)| acc | 1 << i);
        let mut words: BTreeMap<usize, Vec<(u64, usize)>> = BTreeMap::new();
        let mut set = 0u64;
        let mut a = 0u64;
        for i in 1u64..(1u64 << t.n) {
            let bit = i.trailing_zeros() as usize;
            set ^= 1 << bit;
            a ^= alias[bit];
            if a & finest == 0 {
                words
                    .entry(t.stratum_of_alias(a))
                    .or_default()
                    .push((set, set.count_ones() as usize));
            }
        }
        for list in words.values_mut() {
            list.sort();
        }
        Ok(StratifiedWordSet {
            n: t.n,
            labels: t.labels.clone(),
            strata: b.names(),
            words,
        })
    }

    /// Word counts by length and stratum: entry `[k-1][i]`.
    pub fn word_counts(&self) -> Result<Vec<Vec<u64>>> {
        let t = &self.template;
        let alias = self.aliases()?;
        let m = t.structure.n_factors();
        let mut counts = vec![vec![0u64; m]; t.n];
        let mut set = 0u64;
        let mut a = 0u64;
        for i in 1u64..(1u64 << t.n) {
            let bit = i.trailing_zeros() as usize;
            set ^= 1 << bit;
            a ^= alias[bit];
            counts[set.count_ones() as usize - 1][t.stratum_of_alias(a)] += 1;
        }
        Ok(counts)
    }

    /// Expands to the `N × n` table of 0/1 levels, units in structure order.
    pub fn expand(&self) -> Result<Vec<Vec<u8>>> {
        let t = &self.template;
        let alias = self.aliases()?;
        let b = &t.structure;
        Ok((0..b.n_units())
            .map(|u| {
                let coords = b.leaf_coordinates(u).expect("simple structure");
                let y: u64 = t
                    .pseudo
                    .iter()
                    .enumerate()
                    .filter(|(_, pf)| coords[pf.leaf] >> pf.bit & 1 == 1)
                    .fold(0, |acc, (i, _)| acc | 1 << i);
                alias
                    .iter()
                    .map(|&a| ((a & y).count_ones() & 1) as u8)
                    .collect()
            })
            .collect())
    }

    /// Generator words per pool label, rendered with factor letters.
    pub fn generator_words(&self) -> Vec<(String, String)> {
        let t = &self.template;
        let rows = self.inverse_rows();
        let mut out = Vec::new();
        for (s, slot) in t.slots.iter().enumerate() {
            let w = match slot.kind {
                SlotKind::Unit { row } => rows[row],
                SlotKind::Added => {
                    let step = t.steps.iter().position(|x| *x == Step::Slot(s)).unwrap();
                    rows[t.pseudo.len() + step]
                }
            };
            out.push((
                slot.pool.clone(),
                BitVector::from_u64(t.n, w).word(&t.labels),
            ));
        }
        for (i, _) in t.shared.iter().enumerate() {
            let step = t.steps.iter().position(|x| *x == Step::Shared(i)).unwrap();
            let w = rows[t.pseudo.len() + step];
            out.push(("U".into(), BitVector::from_u64(t.n, w).word(&t.labels)));
        }
        out
    }
}

/// Expands a generator set; see [`GeneratorSet::expand`].
pub fn expand_design(gs: &GeneratorSet) -> Result<Vec<Vec<u8>>> {
    gs.expand()
}

/// Recodes 0/1 levels as `(-1)^level`.
pub fn to_pm1(table: &[Vec<u8>]) -> Vec<Vec<i8>> {
    table
        .iter()
        .map(|r| r.iter().map(|&x| if x == 0 { 1 } else { -1 }).collect())
        .collect()
}

/// Defining words grouped by stratum.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StratifiedWordSet {
    pub n: usize,
    pub labels: Vec<String>,
    pub strata: Vec<String>,
    /// Stratum index → (word bits, length).
    pub words: BTreeMap<usize, Vec<(u64, usize)>>,
}

impl StratifiedWordSet {
    pub fn words_in(&self, stratum: &str) -> Vec<String> {
        let Some(i) = self.strata.iter().position(|s| s == stratum) else {
            return Vec::new();
        };
        self.words
            .get(&i)
            .map(|ws| {
                ws.iter()
                    .map(|(w, _)| BitVector::from_u64(self.n, *w).word(&self.labels))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn total(&self) -> usize {
        self.words.values().map(Vec::len).sum()
    }
}

/// Draws a generator set with every free row taken from its pool,
/// resampling until the key is valid.
fn sample<R: Rng + ?Sized>(
    template: &Arc<KeyTemplate>,
    pools: &PoolSet,
    rng: &mut R,
) -> Result<GeneratorSet> {
    pools.check(template)?;
    for _ in 0..RETRY_CAP {
        let fills = (0..template.slots.len())
            .map(|s| pools.draw(template, s, rng))
            .collect::<Result<Vec<_>>>()?;
        let gs = GeneratorSet::new(template.clone(), fills)?;
        if gs.is_valid(pools.distinct) {
            return Ok(gs);
        }
    }
    Err(Error::ExhaustedRetries(RETRY_CAP))
}

/// Random generator set for a complete factorial (`l0 = 0`).
pub fn algorithm1_complete<R: Rng + ?Sized>(
    template: &Arc<KeyTemplate>,
    pools: &PoolSet,
    rng: &mut R,
) -> Result<GeneratorSet> {
    if template.l0 != 0 {
        return Err(Error::Infeasible(format!(
            "complete-factorial construction with {} added factors",
            template.l0
        )));
    }
    sample(template, pools, rng)
}

/// Random generator set for a fractional factorial: unit rows as for a
/// complete factorial on the basic factors, then one treatment generator per
/// added factor.
pub fn algorithm2_fractional<R: Rng + ?Sized>(
    template: &Arc<KeyTemplate>,
    pools: &PoolSet,
    rng: &mut R,
) -> Result<GeneratorSet> {
    sample(template, pools, rng)
}
