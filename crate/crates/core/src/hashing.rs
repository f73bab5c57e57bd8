//! N-gram context extraction over token grids and multiplicative-XOR hashing
//! into memory tables.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::numerics::{Real, Tensor};
use crate::rng;
use crate::tokens::TokenGrid;

/// Additive constant folded into every token before mixing.
pub const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankLabel {
    Seq2,
    Seq3,
    #[serde(rename = "b0_1x2")]
    B0_1x2,
    #[serde(rename = "b1_2x1")]
    B1_2x1,
    #[serde(rename = "b2_1x3")]
    B2_1x3,
    #[serde(rename = "b3_3x1")]
    B3_3x1,
    #[serde(rename = "b4_2x2")]
    B4_2x2,
}

impl BankLabel {
    pub const ALL: [BankLabel; 7] = [
        BankLabel::Seq2,
        BankLabel::Seq3,
        BankLabel::B0_1x2,
        BankLabel::B1_2x1,
        BankLabel::B2_1x3,
        BankLabel::B3_3x1,
        BankLabel::B4_2x2,
    ];

    /// Relative neighbour offsets, current token first. Sequential banks use
    /// `(0, -j)` to mean "j positions earlier in the flattened sequence".
    pub fn offsets(self) -> Vec<(i32, i32)> {
        match self {
            BankLabel::Seq2 | BankLabel::B0_1x2 => vec![(0, 0), (0, -1)],
            BankLabel::Seq3 | BankLabel::B2_1x3 => vec![(0, 0), (0, -1), (0, -2)],
            BankLabel::B1_2x1 => vec![(0, 0), (-1, 0)],
            BankLabel::B3_3x1 => vec![(0, 0), (-1, 0), (-2, 0)],
            BankLabel::B4_2x2 => vec![(0, 0), (0, -1), (-1, 0), (-1, -1)],
        }
    }

    pub fn is_sequential(self) -> bool {
        matches!(self, BankLabel::Seq2 | BankLabel::Seq3)
    }

    pub fn name(self) -> &'static str {
        match self {
            BankLabel::Seq2 => "seq2",
            BankLabel::Seq3 => "seq3",
            BankLabel::B0_1x2 => "b0_1x2",
            BankLabel::B1_2x1 => "b1_2x1",
            BankLabel::B2_1x3 => "b2_1x3",
            BankLabel::B3_3x1 => "b3_3x1",
            BankLabel::B4_2x2 => "b4_2x2",
        }
    }
}

/// Which family of banks an engram layer uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankVariant {
    /// 2-gram and 3-gram banks over the raster sequence.
    Seq1d,
    /// The five spatial banks 1x2, 2x1, 1x3, 3x1, 2x2.
    Spatial2d,
}

impl BankVariant {
    pub fn banks(self) -> Vec<BankSpec> {
        let labels: &[BankLabel] = match self {
            BankVariant::Seq1d => &[BankLabel::Seq2, BankLabel::Seq3],
            BankVariant::Spatial2d => &[
                BankLabel::B0_1x2,
                BankLabel::B1_2x1,
                BankLabel::B2_1x3,
                BankLabel::B3_3x1,
                BankLabel::B4_2x2,
            ],
        };
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| BankSpec::new(i, l))
            .collect()
    }
}

impl std::str::FromStr for BankVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq1d" => Ok(BankVariant::Seq1d),
            "spatial2d" => Ok(BankVariant::Spatial2d),
            other => config_err(format!("unknown bank variant {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankSpec {
    pub bank_id: usize,
    pub label: BankLabel,
    pub offsets: Vec<(i32, i32)>,
}

impl BankSpec {
    pub fn new(bank_id: usize, label: BankLabel) -> Self {
        BankSpec {
            bank_id,
            label,
            offsets: label.offsets(),
        }
    }

    pub fn order(&self) -> usize {
        self.offsets.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.offsets.first() != Some(&(0, 0)) {
            return config_err(format!("bank {}: first offset must be (0,0)", self.bank_id));
        }
        for (i, &(dr, dc)) in self.offsets.iter().enumerate() {
            if !(dr < 0 || (dr == 0 && dc <= 0)) {
                return config_err(format!("bank {}: offset ({dr},{dc}) is not causal", self.bank_id));
            }
            if self.offsets[..i].contains(&(dr, dc)) {
                return config_err(format!("bank {}: duplicate offset ({dr},{dc})", self.bank_id));
            }
        }
        if self.label.is_sequential() && self.offsets.iter().any(|&(dr, _)| dr != 0) {
            return config_err("sequential banks only take (0, -j) offsets");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashHead {
    pub head_index: usize,
    pub seed: u64,
    pub multiplier: u64,
    pub table_size: usize,
}

impl HashHead {
    pub fn new(head_index: usize, seed: u64, table_size: usize) -> Self {
        HashHead {
            head_index,
            seed,
            multiplier: rng::splitmix64(seed) | 1,
            table_size,
        }
    }

    /// Head `head_index` of `bank_id` in engram layer `layer`.
    pub fn derive(root: u64, layer: usize, bank_id: usize, head_index: usize, table_size: usize) -> Self {
        let seed = rng::derive_seed(root, &[layer as u64, bank_id as u64, head_index as u64]);
        Self::new(head_index, seed, table_size)
    }
}

/// Smallest prime `>= n`, by trial division.
pub fn next_prime_at_least(n: u64) -> Result<u64> {
    if n < 2 {
        return Err(Error::Domain(format!("next_prime_at_least needs n >= 2, got {n}")));
    }
    let is_prime = |m: u64| {
        if m < 4 {
            return m >= 2;
        }
        if m.is_multiple_of(2) {
            return false;
        }
        let mut d = 3;
        while d * d <= m {
            if m.is_multiple_of(d) {
                return false;
            }
            d += 2;
        }
        true
    };
    let mut m = n;
    while !is_prime(m) {
        m += 1;
    }
    Ok(m)
}

/// `h <- seed; h <- (h ^ (z + GOLDEN)) * multiplier` over the context, then
/// `h mod M`.
pub fn hash_ngram(context: &[u32], head: &HashHead) -> usize {
    let mut h = head.seed;
    for &z in context {
        h = (h ^ u64::from(z).wrapping_add(GOLDEN)).wrapping_mul(head.multiplier);
    }
    (h % head.table_size as u64) as usize
}

/// Read-only view of a (possibly partially decoded) sequence with its grid
/// geometry. `prefix` holds global ids; `cells` may be shorter than
/// `height * width` during incremental decoding.
#[derive(Clone, Copy, Debug)]
pub struct ContextView<'a> {
    pub prefix: &'a [u32],
    pub cells: &'a [u32],
    pub height: usize,
    pub width: usize,
    pub sentinel: u32,
}

impl<'a> ContextView<'a> {
    /// View over a flattened global-id sequence `prefix ++ cells`.
    pub fn from_sequence(seq: &'a [u32], prefix_len: usize, height: usize, width: usize, sentinel: u32) -> Self {
        let p = prefix_len.min(seq.len());
        ContextView {
            prefix: &seq[..p],
            cells: &seq[p..],
            height,
            width,
            sentinel,
        }
    }

    fn seq_token(&self, s: isize) -> u32 {
        if s < 0 {
            return self.sentinel;
        }
        let s = s as usize;
        if s < self.prefix.len() {
            self.prefix[s]
        } else {
            self.cells[s - self.prefix.len()]
        }
    }

    /// Context tuple for the cell at `(row, col)`.
    pub fn context(&self, row: usize, col: usize, bank: &BankSpec, out: &mut Vec<u32>) -> Result<()> {
        if row >= self.height || col >= self.width {
            return Err(Error::OutOfRange {
                what: "grid position",
                value: row * self.width + col,
                limit: self.height * self.width,
            });
        }
        let idx = row * self.width + col;
        if idx >= self.cells.len() {
            return Err(Error::OutOfRange {
                what: "decoded cell",
                value: idx,
                limit: self.cells.len(),
            });
        }
        out.clear();
        if bank.label.is_sequential() {
            let s = (self.prefix.len() + idx) as isize;
            for &(_, dc) in &bank.offsets {
                out.push(self.seq_token(s + dc as isize));
            }
        } else {
            for &(dr, dc) in &bank.offsets {
                let r = row as isize + dr as isize;
                let c = col as isize + dc as isize;
                if r < 0 || c < 0 || r >= self.height as isize || c >= self.width as isize {
                    out.push(self.sentinel);
                } else {
                    out.push(self.cells[r as usize * self.width + c as usize]);
                }
            }
        }
        Ok(())
    }
}

/// Context tuple of `bank` at `(row, col)` in a full grid.
pub fn extract_context(grid: &TokenGrid, pos: (usize, usize), bank: &BankSpec) -> Result<Vec<u32>> {
    let offset = grid.vocab_size as u32;
    let prefix: Vec<u32> = grid.prefix.iter().map(|&p| p + offset).collect();
    let view = ContextView {
        prefix: &prefix,
        cells: &grid.cells,
        height: grid.height,
        width: grid.width,
        sentinel: grid.sentinel(),
    };
    let mut out = Vec::with_capacity(bank.order());
    view.context(pos.0, pos.1, bank, &mut out)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableMode {
    Learned,
    FrozenNoise,
    BucketCollapsed,
    RandomizedAtProbe,
}

impl TableMode {
    pub fn code(self) -> u8 {
        match self {
            TableMode::Learned => 0,
            TableMode::FrozenNoise => 1,
            TableMode::BucketCollapsed => 2,
            TableMode::RandomizedAtProbe => 3,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => TableMode::Learned,
            1 => TableMode::FrozenNoise,
            2 => TableMode::BucketCollapsed,
            3 => TableMode::RandomizedAtProbe,
            _ => return Err(Error::Format(format!("unknown table mode code {c}"))),
        })
    }
}

impl std::str::FromStr for TableMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "learned" => Ok(TableMode::Learned),
            "frozen_noise" => Ok(TableMode::FrozenNoise),
            "bucket_collapsed" => Ok(TableMode::BucketCollapsed),
            "randomized_at_probe" => Ok(TableMode::RandomizedAtProbe),
            other => config_err(format!("unknown table mode {other:?}")),
        }
    }
}

/// One `M x d_head` memory table.
#[derive(Clone, Debug, PartialEq)]
pub struct EngramTable<T> {
    pub entries: Tensor<T>,
    pub mode: TableMode,
}

impl<T: Real> EngramTable<T> {
    /// Standard-normal table drawn from a keyed stream.
    pub fn standard_normal(rows: usize, d_head: usize, mode: TableMode, seed: u64, key: &[u64]) -> Self {
        let mut r = rng::stream(seed, "table", key);
        let data = (0..rows * d_head)
            .map(|_| T::from_f64(rng::standard_normal(&mut r)))
            .collect();
        EngramTable {
            entries: Tensor::from_vec(vec![rows, d_head], data).expect("shape matches"),
            mode,
        }
    }

    pub fn rows(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn d_head(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn address(&self, context: &[u32], head: &HashHead) -> usize {
        match self.mode {
            TableMode::BucketCollapsed => 0,
            _ => hash_ngram(context, head),
        }
    }
}

/// Aggregated memory vector for one cell: concatenation over banks (in
/// `bank_id` order) then heads of the addressed table rows.
///
/// `tables[b * H + k]` is the table for bank `b`, head `k`.
pub fn retrieve_memory<T: Real>(
    grid: &TokenGrid,
    pos: (usize, usize),
    banks: &[BankSpec],
    heads: &[Vec<HashHead>],
    tables: &[EngramTable<T>],
) -> Result<Vec<T>> {
    let h = heads.first().map_or(0, Vec::len);
    if heads.len() != banks.len() || heads.iter().any(|v| v.len() != h) {
        return config_err("one head list of equal length per bank required");
    }
    if tables.len() != banks.len() * h {
        return config_err(format!(
            "expected {} tables for {} banks x {h} heads, found {}",
            banks.len() * h,
            banks.len(),
            tables.len()
        ));
    }
    let mut order: Vec<usize> = (0..banks.len()).collect();
    order.sort_by_key(|&i| banks[i].bank_id);
    let mut out = Vec::new();
    for b in order {
        let ctx = extract_context(grid, pos, &banks[b])?;
        for (k, head) in heads[b].iter().enumerate() {
            let table = &tables[b * h + k];
            if head.table_size != table.rows() {
                return config_err("hash head table size does not match table rows");
            }
            let row = table.address(&ctx, head);
            out.extend_from_slice(table.entries.row(row));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::{PrefixLayout, TokenGrid};

    fn abcd() -> TokenGrid {
        // [[a,b],[c,d]] = [[1,2],[3,4]], class 0, prefix token 0 -> global 10
        TokenGrid::new(
            2,
            2,
            10,
            PrefixLayout {
                num_classes: 2,
                aux_tokens: 0,
            },
            0,
            vec![1, 2, 3, 4],
        )
        .unwrap()
    }

    #[test]
    fn primes() {
        assert_eq!(next_prime_at_least(2).unwrap(), 2);
        assert_eq!(next_prime_at_least(10).unwrap(), 11);
        assert_eq!(next_prime_at_least(5240).unwrap(), 5261);
        assert!(next_prime_at_least(1).is_err());
    }

    #[test]
    fn primes_match_sieve() {
        let n = 3000;
        let mut composite = vec![false; n + 200];
        for i in 2..composite.len() {
            if !composite[i] {
                let mut j = i * i;
                while j < composite.len() {
                    composite[j] = true;
                    j += i;
                }
            }
        }
        for m in 2..n {
            let want = (m..).find(|&k| !composite[k]).unwrap();
            assert_eq!(next_prime_at_least(m as u64).unwrap(), want as u64);
        }
    }

    #[test]
    fn reference_table_size_is_composite() {
        assert_ne!(next_prime_at_least(36_715).unwrap(), 36_715);
    }

    #[test]
    fn contexts() {
        let g = abcd();
        let sent = g.sentinel();
        let b1 = BankSpec::new(1, BankLabel::B1_2x1);
        assert_eq!(extract_context(&g, (0, 0), &b1).unwrap(), vec![1, sent]);
        let b4 = BankSpec::new(4, BankLabel::B4_2x2);
        assert_eq!(extract_context(&g, (1, 1), &b4).unwrap(), vec![4, 3, 2, 1]);
        let s2 = BankSpec::new(0, BankLabel::Seq2);
        assert_eq!(extract_context(&g, (0, 0), &s2).unwrap(), vec![1, 10]);
        let s3 = BankSpec::new(1, BankLabel::Seq3);
        assert_eq!(extract_context(&g, (0, 0), &s3).unwrap(), vec![1, 10, sent]);
        // sequential banks wrap across rows
        assert_eq!(extract_context(&g, (1, 0), &s3).unwrap(), vec![3, 2, 1]);
        assert!(extract_context(&g, (2, 0), &s2).is_err());
    }

    #[test]
    fn bank_specs_are_causal() {
        for l in BankLabel::ALL {
            BankSpec::new(0, l).validate().unwrap();
        }
        let bad = BankSpec {
            bank_id: 0,
            label: BankLabel::B0_1x2,
            offsets: vec![(0, 0), (0, 1)],
        };
        assert!(bad.validate().is_err());
        let dup = BankSpec {
            bank_id: 0,
            label: BankLabel::B0_1x2,
            offsets: vec![(0, 0), (0, -1), (0, -1)],
        };
        assert!(dup.validate().is_err());
    }

    #[test]
    fn hash_single_bucket_and_purity() {
        let head = HashHead::new(0, 99, 1);
        assert_eq!(hash_ngram(&[5, 6, 7], &head), 0);
        let head = HashHead::new(0, 99, 997);
        assert_eq!(hash_ngram(&[5, 6], &head), hash_ngram(&[5, 6], &head));
        assert!(hash_ngram(&[5, 6], &head) < 997);
        assert_eq!(head.multiplier % 2, 1);
    }

    #[test]
    fn head_seeds_distinct() {
        let mut seen = std::collections::HashSet::new();
        for layer in 0..4 {
            for bank in 0..5 {
                for head in 0..4 {
                    assert!(seen.insert(HashHead::derive(1, layer, bank, head, 101).seed));
                }
            }
        }
    }

    #[test]
    fn retrieval_single_lookup_and_collapse() {
        let g = abcd();
        let banks = vec![BankSpec::new(0, BankLabel::Seq2)];
        let head = HashHead::new(0, 3, 5);
        let data: Vec<f64> = (0..10).map(f64::from).collect();
        let table = EngramTable {
            entries: Tensor::from_vec(vec![5, 2], data).unwrap(),
            mode: TableMode::Learned,
        };
        let ctx = extract_context(&g, (1, 0), &banks[0]).unwrap();
        let row = hash_ngram(&ctx, &head);
        let e = retrieve_memory(&g, (1, 0), &banks, &[vec![head]], std::slice::from_ref(&table)).unwrap();
        assert_eq!(e, vec![2.0 * row as f64, 2.0 * row as f64 + 1.0]);

        let collapsed = EngramTable {
            mode: TableMode::BucketCollapsed,
            ..table.clone()
        };
        for pos in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let e = retrieve_memory(&g, pos, &banks, &[vec![head]], std::slice::from_ref(&collapsed)).unwrap();
            assert_eq!(e, vec![0.0, 1.0]);
        }
        assert!(retrieve_memory::<f64>(&g, (0, 0), &banks, &[vec![head]], &[]).is_err());
    }

    #[test]
    fn default_memory_width() {
        let banks = BankVariant::Seq1d.banks();
        let heads: Vec<Vec<HashHead>> = banks
            .iter()
            .map(|b| (0..4).map(|k| HashHead::derive(0, 0, b.bank_id, k, 7)).collect())
            .collect();
        let tables: Vec<EngramTable<f32>> = (0..8)
            .map(|i| EngramTable::standard_normal(7, 64, TableMode::Learned, 0, &[i]))
            .collect();
        let e = retrieve_memory(&abcd(), (1, 1), &banks, &heads, &tables).unwrap();
        assert_eq!(e.len(), 512);
    }
}
