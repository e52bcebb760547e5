//! Set partitions of {0..n} as restricted growth strings, with their
//! Dirichlet-process prior weights.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Largest n accepted for exhaustive enumeration (Bell(12) = 4,213,597).
pub const EXACT_LIMIT: usize = 12;

/// One unordered set partition and its log prior probability.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionWeight {
    /// Blocks as sorted index lists, ordered by smallest member.
    pub partition: Vec<Vec<usize>>,
    pub log_weight: f64,
}

/// Bell numbers B_0..B_n.
pub fn bell(n: usize) -> u64 {
    let mut row = vec![1u64];
    for _ in 0..n {
        let mut next = Vec::with_capacity(row.len() + 1);
        next.push(*row.last().unwrap());
        for v in &row {
            let last = *next.last().unwrap();
            next.push(last + v);
        }
        row = next;
    }
    row[0]
}

/// log of m^k prod Gamma(n_i) Gamma(m) / Gamma(m + n).
pub fn log_partition_weight(sizes: &[usize], m: f64) -> f64 {
    let n: usize = sizes.iter().sum();
    ln_gamma(m) - ln_gamma(m + n as f64)
        + sizes.len() as f64 * m.ln()
        + sizes.iter().map(|&s| ln_gamma(s as f64)).sum::<f64>()
}

/// Visit every restricted growth string of length `n` that starts with
/// `prefix`, in lexicographic order. The callback gets the labels and the
/// number of blocks.
pub fn for_each_rgs(n: usize, prefix: &[u8], mut visit: impl FnMut(&[u8], usize)) {
    if n == 0 {
        visit(&[], 0);
        return;
    }
    let fixed = prefix.len().max(1);
    debug_assert!(prefix.len() <= n && prefix.first().is_none_or(|&v| v == 0));
    let mut a = vec![0u8; n];
    a[..prefix.len()].copy_from_slice(prefix);
    // top[i] = max(a[0..i]) for i >= 1
    let mut top = vec![0u8; n + 1];
    for i in 1..=n {
        top[i] = top[i - 1].max(a[i - 1]);
    }
    loop {
        visit(&a, top[n] as usize + 1);
        let mut i = n;
        loop {
            if i == fixed {
                return;
            }
            i -= 1;
            if a[i] <= top[i] {
                break;
            }
        }
        a[i] += 1;
        top[i + 1] = top[i].max(a[i]);
        for j in i + 1..n {
            a[j] = 0;
            top[j + 1] = top[i + 1];
        }
    }
}

/// All restricted growth strings of length `len`.
pub fn rgs_list(len: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for_each_rgs(len, &[], |a, _| out.push(a.to_vec()));
    out
}

pub(crate) fn check_size(n: usize) -> Result<()> {
    if n > EXACT_LIMIT {
        return Err(Error::TooLarge { n, limit: EXACT_LIMIT });
    }
    Ok(())
}

/// Every set partition of {0..n} with its weight under a DP with mass m.
pub fn enumerate_partition_weights(n: usize, m: f64) -> Result<Vec<PartitionWeight>> {
    check_size(n)?;
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::InvalidConfig(format!("DP mass {m} must be positive")));
    }
    let mut out = Vec::with_capacity(bell(n) as usize);
    for_each_rgs(n, &[], |a, k| {
        let mut blocks = vec![Vec::new(); k];
        for (i, &l) in a.iter().enumerate() {
            blocks[l as usize].push(i);
        }
        let sizes: Vec<usize> = blocks.iter().map(Vec::len).collect();
        out.push(PartitionWeight {
            log_weight: log_partition_weight(&sizes, m),
            partition: blocks,
        });
    });
    Ok(out)
}
