use crate::dataspace::MixingRatio;
use crate::error::{Error, Result};

/// Largest source count accepted by [`shapley_values`].
pub const SHAPLEY_MAX_SOURCES: usize = 12;

/// `v_i = u(all) - u(all \ {i})`. Subsets are passed as sorted source indices.
pub fn loo_values(mut utility: impl FnMut(&[usize]) -> f64, m: usize) -> Vec<f64> {
    let all: Vec<usize> = (0..m).collect();
    let full = utility(&all);
    (0..m)
        .map(|i| {
            let rest: Vec<usize> = all.iter().copied().filter(|&j| j != i).collect();
            full - utility(&rest)
        })
        .collect()
}

fn members(mask: usize, m: usize) -> Vec<usize> {
    (0..m).filter(|i| mask & (1 << i) != 0).collect()
}

/// Exact Shapley values by enumerating all `2^m` coalitions.
pub fn shapley_values(mut utility: impl FnMut(&[usize]) -> f64, m: usize) -> Result<Vec<f64>> {
    if m > SHAPLEY_MAX_SOURCES {
        return Err(Error::TooManySources {
            m,
            limit: SHAPLEY_MAX_SOURCES,
        });
    }
    let table: Vec<f64> = (0..1usize << m)
        .map(|mask| utility(&members(mask, m)))
        .collect();
    // weight[s] = s! (m - s - 1)! / m!
    let weight: Vec<f64> = (0..m)
        .map(|s| {
            let mut w = 1.0 / m as f64;
            // 1 / C(m-1, s)
            for k in 0..s {
                w *= (k + 1) as f64 / (m - 1 - k) as f64;
            }
            w
        })
        .collect();
    let mut phi = vec![0.0; m];
    for (i, value) in phi.iter_mut().enumerate() {
        let bit = 1 << i;
        for mask in 0..1usize << m {
            if mask & bit == 0 {
                let s = mask.count_ones() as usize;
                *value += weight[s] * (table[mask | bit] - table[mask]);
            }
        }
    }
    Ok(phi)
}

/// Mixture proportional to the positive part of `values`. Returns the uniform
/// ratio and `true` when no value is positive.
pub fn selection_ratio_from_values(values: &[f64]) -> Result<(MixingRatio, bool)> {
    if values.is_empty() {
        return Err(Error::InvalidRatio("no values".into()));
    }
    let pos: Vec<f64> = values
        .iter()
        .map(|v| if v.is_finite() { v.max(0.0) } else { 0.0 })
        .collect();
    if pos.iter().all(|&v| v == 0.0) {
        return Ok((MixingRatio::uniform(values.len()), true));
    }
    Ok((MixingRatio::normalized(&pos)?, false))
}
