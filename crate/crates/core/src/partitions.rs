//! Set partitions, subsets and the precomputed partition table.
//!
//! Partitions of `{0, .., n-1}` are enumerated as restricted growth strings
//! (RGS): position `i` holds the label of the block containing element `i`,
//! labels appear in order of first use, so `a[0] = 0` and
//! `a[i] <= 1 + max(a[..i])`. Lexicographic RGS order is the enumeration
//! order everywhere in this crate.
//!
//! The [`PartitionTable`] stores every partition of an `n`-set as the list of
//! bitmask ranks of its blocks. A block `S` has rank `sum_{i in S} 2^i`, which
//! is also its slot in a [`crate::models::DerivativeVector`], so assembling a
//! full density is a gather over the table.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest dimension accepted by the enumeration routines and the table.
pub const MAX_PARTITION_DIM: usize = 13;

/// Largest `n` for exact Bell and Stirling numbers.
pub const MAX_COUNT_DIM: usize = 30;

/// Default memory cap for a partition table: 2 GiB.
pub const DEFAULT_TABLE_MEMORY_CAP: u128 = 2 << 30;

/// Bell number `B_n` from the Bell triangle, exact.
pub fn bell_number(n: usize) -> Result<u128> {
    if n > MAX_COUNT_DIM {
        return Err(Error::domain(format!(
            "bell_number: n = {n} exceeds {MAX_COUNT_DIM}"
        )));
    }
    if n == 0 {
        return Ok(1);
    }
    let mut row = vec![1u128];
    for _ in 1..n {
        let mut next = Vec::with_capacity(row.len() + 1);
        next.push(*row.last().unwrap());
        for v in &row {
            let prev = *next.last().unwrap();
            next.push(prev + v);
        }
        row = next;
    }
    Ok(*row.last().unwrap())
}

/// Stirling number of the second kind `S(n, k)`, exact.
pub fn stirling2(n: usize, k: usize) -> Result<u128> {
    if n > MAX_COUNT_DIM {
        return Err(Error::domain(format!(
            "stirling2: n = {n} exceeds {MAX_COUNT_DIM}"
        )));
    }
    if k > n {
        return Ok(0);
    }
    // S(i, j) = j S(i-1, j) + S(i-1, j-1)
    let mut row = vec![0u128; k + 1];
    row[0] = 1;
    for i in 1..=n {
        for j in (1..=k.min(i)).rev() {
            row[j] = j as u128 * row[j] + row[j - 1];
        }
        row[0] = 0;
    }
    Ok(row[k])
}

/// Binomial coefficient `C(n, k)`, or `None` on `u128` overflow.
pub fn binomial(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// A set partition of `{0, .., n-1}`; displayed 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Partition {
    blocks: Vec<Vec<u16>>,
}

impl Partition {
    /// Build from a restricted growth string.
    pub fn from_rgs(rgs: &[u8]) -> Self {
        let mut blocks: Vec<Vec<u16>> = Vec::new();
        for (i, &label) in rgs.iter().enumerate() {
            let label = label as usize;
            if label == blocks.len() {
                blocks.push(Vec::new());
            }
            blocks[label].push(i as u16);
        }
        Partition { blocks }
    }

    /// Build from block bitmasks, in any order.
    pub fn from_masks(masks: &[u16]) -> Self {
        let mut blocks: Vec<Vec<u16>> = masks
            .iter()
            .map(|&m| (0..16u16).filter(|i| m & (1 << i) != 0).collect())
            .collect();
        blocks.sort_by_key(|b| b.first().copied().unwrap_or(u16::MAX));
        Partition { blocks }
    }

    /// Blocks in canonical order (sorted by minimal element), 0-based members.
    pub fn blocks(&self) -> &[Vec<u16>] {
        &self.blocks
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Number of elements covered.
    pub fn size(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn masks(&self) -> Vec<u16> {
        self.blocks
            .iter()
            .map(|b| b.iter().fold(0u16, |m, &i| m | (1 << i)))
            .collect()
    }

    pub fn rgs(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.size()];
        for (label, block) in self.blocks.iter().enumerate() {
            for &i in block {
                out[i as usize] = label as u8;
            }
        }
        out
    }

    /// Checks the partition invariants against `{0, .., n-1}`.
    pub fn is_valid_for(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        let mut last_min = None;
        for block in &self.blocks {
            if block.is_empty() || block.windows(2).any(|w| w[0] >= w[1]) {
                return false;
            }
            if last_min.is_some_and(|m| m >= block[0]) {
                return false;
            }
            last_min = Some(block[0]);
            for &i in block {
                let i = i as usize;
                if i >= n || seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (bi, block) in self.blocks.iter().enumerate() {
            if bi > 0 {
                write!(f, ",")?;
            }
            write!(f, "{{")?;
            for (j, i) in block.iter().enumerate() {
                if j > 0 {
                    write!(f, ",")?;
                }
                write!(f, "{}", i + 1)?;
            }
            write!(f, "}}")?;
        }
        write!(f, "}}")
    }
}

/// Restricted growth strings of length `n` in lexicographic order, optionally
/// restricted to exactly `k` blocks.
#[derive(Debug, Clone)]
pub struct RgsIter {
    rgs: Vec<u8>,
    // prefix_max[i] = max(rgs[..=i])
    prefix_max: Vec<u8>,
    blocks: Option<usize>,
    started: bool,
    done: bool,
}

impl RgsIter {
    fn new(n: usize, blocks: Option<usize>) -> Self {
        let mut it = RgsIter {
            rgs: vec![0; n],
            prefix_max: vec![0; n],
            blocks,
            started: false,
            done: n == 0,
        };
        if let Some(k) = blocks {
            if k == 0 || k > n {
                it.done = true;
            } else {
                it.fill_suffix(0, 0);
            }
        }
        it
    }

    /// Smallest completion of positions `from..` given the prefix maximum.
    fn fill_suffix(&mut self, from: usize, prefix_max: u8) {
        let n = self.rgs.len();
        let mut cur = prefix_max;
        let needed = match self.blocks {
            Some(k) => k.saturating_sub(prefix_max as usize + 1),
            None => 0,
        };
        for i in from..n {
            let remaining = n - i;
            if remaining <= needed - (cur - prefix_max) as usize && needed > 0 {
                cur += 1;
                self.rgs[i] = cur;
            } else {
                self.rgs[i] = 0;
            }
            self.prefix_max[i] = cur;
        }
    }

    fn advance(&mut self) -> bool {
        let n = self.rgs.len();
        for i in (1..n).rev() {
            let pm = self.prefix_max[i - 1];
            let candidate = self.rgs[i] + 1;
            if candidate > pm + 1 {
                continue;
            }
            let new_max = pm.max(candidate);
            if let Some(k) = self.blocks {
                let used = new_max as usize + 1;
                if used > k || used + (n - 1 - i) < k {
                    continue;
                }
            }
            self.rgs[i] = candidate;
            self.prefix_max[i] = new_max;
            self.fill_suffix(i + 1, new_max);
            return true;
        }
        false
    }
}

impl Iterator for RgsIter {
    type Item = Vec<u8>;

    fn next(&mut self) -> Option<Vec<u8>> {
        if self.done {
            return None;
        }
        if self.started && !self.advance() {
            self.done = true;
            return None;
        }
        self.started = true;
        Some(self.rgs.clone())
    }
}

fn check_partition_dim(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::domain("partition dimension must be at least 1"));
    }
    if n > MAX_PARTITION_DIM {
        return Err(Error::ResourceLimit(format!(
            "partition enumeration of n = {n} exceeds the supported maximum {MAX_PARTITION_DIM}"
        )));
    }
    Ok(())
}

/// Every partition of `{0, .., n-1}` in lexicographic RGS order.
pub fn enumerate_partitions(n: usize) -> Result<impl Iterator<Item = Partition>> {
    check_partition_dim(n)?;
    Ok(RgsIter::new(n, None).map(|r| Partition::from_rgs(&r)))
}

/// Partitions of `{0, .., n-1}` with exactly `k` blocks (one Stirling group).
pub fn enumerate_partitions_with_blocks(
    n: usize,
    k: usize,
) -> Result<impl Iterator<Item = Partition>> {
    check_partition_dim(n)?;
    if k == 0 || k > n {
        return Err(Error::domain(format!(
            "block count k = {k} must lie in 1..={n}"
        )));
    }
    Ok(RgsIter::new(n, Some(k)).map(|r| Partition::from_rgs(&r)))
}

/// Raw RGS stream, used by the CLI printer and the streaming density.
pub fn rgs_iter(n: usize, blocks: Option<usize>) -> Result<RgsIter> {
    check_partition_dim(n)?;
    if let Some(k) = blocks {
        if k == 0 || k > n {
            return Err(Error::domain(format!(
                "block count k = {k} must lie in 1..={n}"
            )));
        }
    }
    Ok(RgsIter::new(n, blocks))
}

/// Every partition of `{0, .., n-1}` stored as 16-bit block ranks.
///
/// Rows are laid out back to back in `blocks`; `row_len[r]` is the number of
/// blocks in row `r`. Rows follow lexicographic RGS order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionTable {
    n: usize,
    blocks: Vec<u16>,
    row_len: Vec<u8>,
}

impl PartitionTable {
    /// Analytic storage estimate in bytes for dimension `n`.
    ///
    /// The total number of blocks over all partitions of an `n`-set is
    /// `B_{n+1} - B_n`.
    pub fn estimated_bytes(n: usize) -> Result<u128> {
        let rows = bell_number(n)?;
        let total_blocks = bell_number(n + 1)? - rows;
        Ok(rows * std::mem::size_of::<u8>() as u128
            + total_blocks * std::mem::size_of::<u16>() as u128
            + std::mem::size_of::<Self>() as u128)
    }

    /// Build with the default memory cap.
    pub fn build(n: usize) -> Result<Self> {
        Self::build_with_cap(n, DEFAULT_TABLE_MEMORY_CAP)
    }

    pub fn build_with_cap(n: usize, cap_bytes: u128) -> Result<Self> {
        check_partition_dim(n)?;
        let required = Self::estimated_bytes(n)?;
        if required > cap_bytes {
            return Err(Error::MemoryCap {
                what: format!("partition table for n = {n}"),
                required,
                cap: cap_bytes,
            });
        }
        let rows = bell_number(n)? as usize;
        let total = (bell_number(n + 1)? as usize) - rows;
        let mut blocks = Vec::with_capacity(total);
        let mut row_len = Vec::with_capacity(rows);
        let mut masks = [0u16; MAX_PARTITION_DIM];
        for rgs in RgsIter::new(n, None) {
            let mut used = 0usize;
            for (i, &label) in rgs.iter().enumerate() {
                let label = label as usize;
                if label == used {
                    masks[label] = 0;
                    used += 1;
                }
                masks[label] |= 1 << i;
            }
            blocks.extend_from_slice(&masks[..used]);
            row_len.push(used as u8);
        }
        Ok(PartitionTable { n, blocks, row_len })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn n_rows(&self) -> usize {
        self.row_len.len()
    }

    /// Storage width of one block index, in bytes.
    pub fn block_index_width(&self) -> usize {
        std::mem::size_of::<u16>()
    }

    /// Bytes held by the table's buffers.
    pub fn memory_bytes(&self) -> usize {
        self.blocks.capacity() * std::mem::size_of::<u16>()
            + self.row_len.capacity() * std::mem::size_of::<u8>()
            + std::mem::size_of::<Self>()
    }

    pub fn rows(&self) -> TableRows<'_> {
        TableRows {
            blocks: &self.blocks,
            row_len: self.row_len.iter(),
        }
    }

    /// Row `r` decoded into a partition (linear scan; for diagnostics).
    pub fn decode_row(&self, r: usize) -> Option<Partition> {
        self.rows().nth(r).map(Partition::from_masks)
    }
}

/// Iterator over the block-rank rows of a [`PartitionTable`].
pub struct TableRows<'a> {
    blocks: &'a [u16],
    row_len: std::slice::Iter<'a, u8>,
}

impl<'a> Iterator for TableRows<'a> {
    type Item = &'a [u16];

    #[inline]
    fn next(&mut self) -> Option<&'a [u16]> {
        let len = *self.row_len.next()? as usize;
        let (row, rest) = self.blocks.split_at(len);
        self.blocks = rest;
        Some(row)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.row_len.size_hint()
    }
}

impl ExactSizeIterator for TableRows<'_> {}

/// A subset of `{0, .., Q-1}`, members sorted ascending; displayed 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubsetId {
    members: Vec<usize>,
}

impl SubsetId {
    pub fn new(mut members: Vec<usize>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::domain("subset must be non-empty"));
        }
        members.sort_unstable();
        if members.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::domain("subset members must be distinct"));
        }
        Ok(SubsetId { members })
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Bitmask rank `sum 2^i`, available when every member is below 64.
    pub fn rank(&self) -> Option<u64> {
        self.members
            .iter()
            .try_fold(0u64, |acc, &i| (i < 64).then(|| acc | (1u64 << i)))
    }

    pub fn from_rank(rank: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::domain("subset rank must be positive"));
        }
        Ok(SubsetId {
            members: (0..64).filter(|i| rank & (1 << i) != 0).collect(),
        })
    }
}

impl fmt::Display for SubsetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (j, i) in self.members.iter().enumerate() {
            if j > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", i + 1)?;
        }
        write!(f, "}}")
    }
}

/// `q`-subsets of `{0, .., total-1}` in lexicographic order.
#[derive(Debug, Clone)]
pub struct Combinations {
    total: usize,
    current: Vec<usize>,
    done: bool,
}

impl Iterator for Combinations {
    type Item = SubsetId;

    fn next(&mut self) -> Option<SubsetId> {
        if self.done {
            return None;
        }
        let out = SubsetId {
            members: self.current.clone(),
        };
        let q = self.current.len();
        match (0..q).rev().find(|&i| self.current[i] < self.total - q + i) {
            Some(i) => {
                self.current[i] += 1;
                for j in i + 1..q {
                    self.current[j] = self.current[j - 1] + 1;
                }
            }
            None => self.done = true,
        }
        Some(out)
    }
}

pub fn enumerate_subsets(total: usize, q: usize) -> Result<Combinations> {
    if q == 0 || q > total {
        return Err(Error::domain(format!(
            "subset size q = {q} must lie in 1..={total}"
        )));
    }
    Ok(Combinations {
        total,
        current: (0..q).collect(),
        done: false,
    })
}
