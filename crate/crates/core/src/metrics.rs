//! Partition agreement scores.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Contingency counts between two labelings: `table[(a, b)]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub counts: BTreeMap<(usize, usize), usize>,
}

pub fn confusion(a: &[usize], b: &[usize]) -> Result<Confusion> {
    if a.len() != b.len() {
        return Err(Error::Validation(format!(
            "labelings differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut counts = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *counts.entry((x, y)).or_insert(0) += 1;
    }
    let mut rows: Vec<usize> = a.to_vec();
    rows.sort_unstable();
    rows.dedup();
    let mut cols: Vec<usize> = b.to_vec();
    cols.sort_unstable();
    cols.dedup();
    Ok(Confusion { rows, cols, counts })
}

fn pairs(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Hubert–Arabie adjusted Rand index.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    let table = confusion(a, b)?;
    let n = a.len();
    let mut row_tot: BTreeMap<usize, usize> = BTreeMap::new();
    let mut col_tot: BTreeMap<usize, usize> = BTreeMap::new();
    let mut index = 0.0;
    for (&(r, c), &v) in &table.counts {
        index += pairs(v);
        *row_tot.entry(r).or_default() += v;
        *col_tot.entry(c).or_default() += v;
    }
    let sum_a: f64 = row_tot.values().map(|&v| pairs(v)).sum();
    let sum_b: f64 = col_tot.values().map(|&v| pairs(v)).sum();
    let total = pairs(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        // both labelings trivial (all-one-cluster or all-singletons)
        return Ok(if index == expected { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}
