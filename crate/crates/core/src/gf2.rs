//! Dense linear algebra over GF(2).
//!
//! Vectors are packed into machine words but every public accessor is
//! positional. Matrices carry row and column labels so that defining words can
//! be rendered as factor-letter strings such as `ABE`.

use std::collections::HashSet;
use std::fmt;

use crate::error::{Error, Result};

const WORD: usize = 64;

/// A fixed-length vector over GF(2).
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitVector {
    len: usize,
    words: Vec<u64>,
}

impl BitVector {
    pub fn zeros(len: usize) -> Self {
        BitVector {
            len,
            words: vec![0; len.div_ceil(WORD)],
        }
    }

    /// Unit vector with a single one at `pos`.
    pub fn unit(len: usize, pos: usize) -> Self {
        let mut v = Self::zeros(len);
        v.set(pos, true);
        v
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut v = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            v.set(i, b);
        }
        v
    }

    /// Builds a vector of length `len` from the low bits of `value`
    /// (position 0 is the least significant bit).
    pub fn from_u64(len: usize, value: u64) -> Self {
        assert!(len <= WORD, "from_u64 supports at most 64 positions");
        let mut v = Self::zeros(len);
        if len > 0 {
            let mask = if len == WORD {
                u64::MAX
            } else {
                (1u64 << len) - 1
            };
            v.words[0] = value & mask;
        }
        v
    }

    /// Parses a string of `0`/`1` characters, position 0 first.
    pub fn parse(s: &str) -> Result<Self> {
        let bits: Vec<bool> = s
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Invalid(format!("bad bit character `{other}`"))),
            })
            .collect::<Result<_>>()?;
        Ok(Self::from_bools(&bits))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        (self.words[i / WORD] >> (i % WORD)) & 1 == 1
    }

    pub fn set(&mut self, i: usize, b: bool) {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        let m = 1u64 << (i % WORD);
        if b {
            self.words[i / WORD] |= m;
        } else {
            self.words[i / WORD] &= !m;
        }
    }

    /// Low 64 positions as an integer (position 0 = bit 0).
    pub fn to_u64(&self) -> u64 {
        assert!(self.len <= WORD, "vector longer than 64 positions");
        self.words.first().copied().unwrap_or(0)
    }

    pub fn xor_assign(&mut self, other: &BitVector) {
        assert_eq!(self.len, other.len, "length mismatch in xor");
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a ^= b;
        }
    }

    pub fn xor(&self, other: &BitVector) -> BitVector {
        let mut out = self.clone();
        out.xor_assign(other);
        out
    }

    /// Inner product mod 2.
    pub fn dot(&self, other: &BitVector) -> bool {
        assert_eq!(self.len, other.len, "length mismatch in dot");
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones())
            .sum::<u32>()
            % 2
            == 1
    }

    pub fn weight(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(move |&i| self.get(i))
    }

    /// Renders the support as concatenated labels, e.g. `ABE`.
    pub fn word(&self, labels: &[String]) -> String {
        assert_eq!(labels.len(), self.len, "label count mismatch");
        let s: String = self.ones().map(|i| labels[i].as_str()).collect();
        if s.is_empty() {
            "I".to_string()
        } else {
            s
        }
    }
}

impl fmt::Debug for BitVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitVector({self})")
    }
}

impl fmt::Display for BitVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len {
            f.write_str(if self.get(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Default factor letters: `A`, `B`, ..., `Z`, then `F27`, `F28`, ...
pub fn letters(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            if i < 26 {
                ((b'A' + i as u8) as char).to_string()
            } else {
                format!("F{}", i + 1)
            }
        })
        .collect()
}

/// A dense labeled matrix over GF(2).
#[derive(Clone, PartialEq, Eq)]
pub struct BitMatrix {
    rows: Vec<BitVector>,
    ncols: usize,
    row_labels: Vec<String>,
    col_labels: Vec<String>,
}

impl BitMatrix {
    pub fn new(
        rows: Vec<BitVector>,
        row_labels: Vec<String>,
        col_labels: Vec<String>,
    ) -> Result<Self> {
        let ncols = col_labels.len();
        if rows.len() != row_labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} rows but {} row labels",
                rows.len(),
                row_labels.len()
            )));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != ncols) {
            return Err(Error::DimensionMismatch(format!(
                "row of length {} in a matrix with {} columns",
                r.len(),
                ncols
            )));
        }
        check_unique(&row_labels, "row")?;
        check_unique(&col_labels, "column")?;
        Ok(BitMatrix {
            rows,
            ncols,
            row_labels,
            col_labels,
        })
    }

    /// Unlabeled matrix; rows are labeled `r0..`, columns `c0..`.
    pub fn from_rows(rows: Vec<BitVector>) -> Result<Self> {
        let ncols = rows.first().map_or(0, BitVector::len);
        let rl = (0..rows.len()).map(|i| format!("r{i}")).collect();
        let cl = (0..ncols).map(|i| format!("c{i}")).collect();
        Self::new(rows, rl, cl)
    }

    /// Parses rows such as `["110", "011"]`.
    pub fn parse_rows(rows: &[&str]) -> Result<Self> {
        Self::from_rows(
            rows.iter()
                .map(|r| BitVector::parse(r))
                .collect::<Result<_>>()?,
        )
    }

    pub fn identity(labels: Vec<String>) -> Self {
        let n = labels.len();
        let rows = (0..n).map(|i| BitVector::unit(n, i)).collect();
        BitMatrix {
            rows,
            ncols: n,
            row_labels: labels.clone(),
            col_labels: labels,
        }
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn rows(&self) -> &[BitVector] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &BitVector {
        &self.rows[i]
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.rows[r].get(c)
    }

    pub fn row_labels(&self) -> &[String] {
        &self.row_labels
    }

    pub fn col_labels(&self) -> &[String] {
        &self.col_labels
    }

    pub fn with_labels(mut self, row_labels: Vec<String>, col_labels: Vec<String>) -> Result<Self> {
        if row_labels.len() != self.nrows() || col_labels.len() != self.ncols {
            return Err(Error::DimensionMismatch("label counts".into()));
        }
        check_unique(&row_labels, "row")?;
        check_unique(&col_labels, "column")?;
        self.row_labels = row_labels;
        self.col_labels = col_labels;
        Ok(self)
    }

    pub fn transpose(&self) -> BitMatrix {
        let rows = (0..self.ncols)
            .map(|c| {
                let mut v = BitVector::zeros(self.nrows());
                for (r, row) in self.rows.iter().enumerate() {
                    if row.get(c) {
                        v.set(r, true);
                    }
                }
                v
            })
            .collect();
        BitMatrix {
            rows,
            ncols: self.nrows(),
            row_labels: self.col_labels.clone(),
            col_labels: self.row_labels.clone(),
        }
    }

    /// Matrix product over GF(2). Labels: rows of `self`, columns of `other`.
    pub fn mul(&self, other: &BitMatrix) -> Result<BitMatrix> {
        if self.ncols != other.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} times {}x{}",
                self.nrows(),
                self.ncols,
                other.nrows(),
                other.ncols
            )));
        }
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut acc = BitVector::zeros(other.ncols);
                for k in r.ones() {
                    acc.xor_assign(&other.rows[k]);
                }
                acc
            })
            .collect();
        Ok(BitMatrix {
            rows,
            ncols: other.ncols,
            row_labels: self.row_labels.clone(),
            col_labels: other.col_labels.clone(),
        })
    }

    /// Row rank over GF(2).
    pub fn rank(&self) -> usize {
        let mut rows = self.rows.clone();
        let mut rank = 0;
        for col in 0..self.ncols {
            let Some(p) = (rank..rows.len()).find(|&r| rows[r].get(col)) else {
                continue;
            };
            rows.swap(rank, p);
            let pivot = rows[rank].clone();
            for (r, row) in rows.iter_mut().enumerate() {
                if r != rank && row.get(col) {
                    row.xor_assign(&pivot);
                }
            }
            rank += 1;
            if rank == rows.len() {
                break;
            }
        }
        rank
    }

    /// Inverse over GF(2). The result's rows are labeled by this matrix's
    /// columns and its columns by this matrix's rows.
    pub fn invert(&self) -> Result<BitMatrix> {
        let n = self.nrows();
        if n != self.ncols {
            return Err(Error::DimensionMismatch(format!(
                "cannot invert a {}x{} matrix",
                n, self.ncols
            )));
        }
        let mut a = self.rows.clone();
        let mut inv: Vec<BitVector> = (0..n).map(|i| BitVector::unit(n, i)).collect();
        for col in 0..n {
            let p = (col..n).find(|&r| a[r].get(col)).ok_or(Error::Singular)?;
            a.swap(col, p);
            inv.swap(col, p);
            let (pa, pi) = (a[col].clone(), inv[col].clone());
            for r in 0..n {
                if r != col && a[r].get(col) {
                    a[r].xor_assign(&pa);
                    inv[r].xor_assign(&pi);
                }
            }
        }
        Ok(BitMatrix {
            rows: inv,
            ncols: n,
            row_labels: self.col_labels.clone(),
            col_labels: self.row_labels.clone(),
        })
    }

    pub fn is_identity(&self) -> bool {
        self.nrows() == self.ncols
            && self
                .rows
                .iter()
                .enumerate()
                .all(|(i, r)| r.weight() == 1 && r.get(i))
    }

    /// Labeled 0/1 grid: a header line of column labels, then one line per
    /// row followed by its label.
    pub fn render(&self) -> String {
        let width = self
            .col_labels
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(1)
            .max(1);
        let mut out = String::new();
        let header: Vec<String> = self
            .col_labels
            .iter()
            .map(|l| format!("{l:>width$}"))
            .collect();
        out.push_str(&header.join(" "));
        out.push('\n');
        for (row, label) in self.rows.iter().zip(&self.row_labels) {
            let cells: Vec<String> = (0..self.ncols)
                .map(|c| format!("{:>width$}", u8::from(row.get(c))))
                .collect();
            out.push_str(&cells.join(" "));
            out.push_str("  ");
            out.push_str(label);
            out.push('\n');
        }
        out
    }
}

impl fmt::Debug for BitMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

fn check_unique(labels: &[String], axis: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for l in labels {
        if !seen.insert(l) {
            return Err(Error::Invalid(format!("duplicate {axis} label `{l}`")));
        }
    }
    Ok(())
}

/// All distinct nonzero GF(2) combinations of `generators`, in order of first
/// appearance when the combinations are visited by increasing subset mask.
pub fn span_enumerate(generators: &[BitVector]) -> Result<Vec<BitVector>> {
    let Some(first) = generators.first() else {
        return Ok(Vec::new());
    };
    let len = first.len();
    if generators.iter().any(|g| g.len() != len) {
        return Err(Error::DimensionMismatch(
            "generators differ in length".into(),
        ));
    }
    if generators.len() >= 32 {
        return Err(Error::TooManyFactors(generators.len(), 31));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for mask in 1u64..(1u64 << generators.len()) {
        let mut v = BitVector::zeros(len);
        for (i, g) in generators.iter().enumerate() {
            if mask >> i & 1 == 1 {
                v.xor_assign(g);
            }
        }
        if !v.is_zero() && seen.insert(v.clone()) {
            out.push(v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&str]) -> BitMatrix {
        BitMatrix::parse_rows(rows).unwrap()
    }

    #[test]
    fn rank_examples() {
        assert_eq!(BitMatrix::identity(letters(5)).rank(), 5);
        assert_eq!(m(&["000", "000", "000"]).rank(), 0);
        assert_eq!(m(&["110", "011", "101"]).rank(), 2);
    }

    #[test]
    fn invert_identity() {
        let id = BitMatrix::identity(letters(4));
        assert!(id.invert().unwrap().is_identity());
    }

    #[test]
    fn invert_singular() {
        assert_eq!(m(&["110", "011", "101"]).invert(), Err(Error::Singular));
    }

    #[test]
    fn inverse_of_blocked_key() {
        // Rows A..E, columns E1 E2 B1 B2 B3; block stars (00), (10), (11).
        let k = m(&["10000", "01000", "00100", "10010", "11001"])
            .with_labels(
                letters(5),
                ["E1", "E2", "B1", "B2", "B3"].map(String::from).to_vec(),
            )
            .unwrap();
        let kinv = k.invert().unwrap();
        assert_eq!(kinv.row_labels(), &["E1", "E2", "B1", "B2", "B3"]);
        let words: Vec<String> = kinv
            .rows()
            .iter()
            .map(|r| r.word(kinv.col_labels()))
            .collect();
        assert_eq!(words, ["A", "B", "C", "AD", "ABE"]);
        // K = K^{-1} for this template shape.
        assert_eq!(kinv.rows(), k.rows());
        assert!(k.mul(&kinv).unwrap().is_identity());
    }

    #[test]
    fn span_of_block_words() {
        let labels = letters(5);
        let gens: Vec<BitVector> = ["00100", "10010", "11001"]
            .iter()
            .map(|s| BitVector::parse(s).unwrap())
            .collect();
        let mut words: Vec<String> = span_enumerate(&gens)
            .unwrap()
            .iter()
            .map(|w| w.word(&labels))
            .collect();
        words.sort();
        let mut expected = vec!["C", "AD", "ABE", "ACD", "ABCE", "BDE", "BCDE"];
        expected.sort();
        assert_eq!(words, expected);
    }

    #[test]
    fn span_single_and_dependent() {
        let g = BitVector::parse("11000").unwrap();
        assert_eq!(span_enumerate(std::slice::from_ref(&g)).unwrap(), vec![g]);
        let d = BitVector::parse("10").unwrap();
        assert_eq!(span_enumerate(&[d.clone(), d.clone()]).unwrap(), vec![d]);
    }

    #[test]
    fn render_has_header() {
        let s = BitMatrix::identity(letters(2)).render();
        assert_eq!(s, "A B\n1 0  A\n0 1  B\n");
    }

    #[test]
    fn duplicate_labels_rejected() {
        let r = BitMatrix::new(
            vec![BitVector::zeros(1), BitVector::zeros(1)],
            vec!["a".into(), "a".into()],
            vec!["x".into()],
        );
        assert!(r.is_err());
    }
}
