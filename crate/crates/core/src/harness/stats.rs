//! Episode statistics and method ranking.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (divisor `n - 1`); zero for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 || values.iter().all(|&v| v == values[0]) {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Half-width of the 95% confidence interval, `1.96 s / sqrt(n)`.
pub fn ci95(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    1.96 * sample_std(values) / (values.len() as f64).sqrt()
}

/// Average rank of each method across datasets. Rank 1 is the highest
/// mean; tied methods share the mean of the ranks they span.
///
/// `table[method][dataset]` holds mean accuracies; every method must cover
/// the same datasets.
pub fn aggregate_rank(table: &BTreeMap<String, BTreeMap<String, f64>>) -> Result<BTreeMap<String, f64>> {
    let Some(first) = table.values().next() else {
        return Ok(BTreeMap::new());
    };
    let datasets: BTreeSet<&String> = first.keys().collect();
    for (method, row) in table {
        let covered: BTreeSet<&String> = row.keys().collect();
        if covered != datasets {
            return Err(Error::Report(format!(
                "method {method} covers {:?}, expected {:?}",
                covered, datasets
            )));
        }
    }
    let mut sums: BTreeMap<String, f64> = table.keys().map(|m| (m.clone(), 0.0)).collect();
    for dataset in &datasets {
        let scores: Vec<(&String, f64)> = table.iter().map(|(m, row)| (m, row[*dataset])).collect();
        for (method, score) in &scores {
            let better = scores.iter().filter(|(_, s)| s > score).count();
            let tied = scores.iter().filter(|(_, s)| s == score).count();
            // ranks better+1 ..= better+tied, averaged
            let rank = better as f64 + (tied as f64 + 1.0) / 2.0;
            *sums.get_mut(*method).expect("known method") += rank;
        }
    }
    let n = datasets.len().max(1) as f64;
    Ok(sums.into_iter().map(|(m, s)| (m, s / n)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_accuracies_have_zero_interval() {
        let v = vec![0.8; 50];
        assert!((mean(&v) - 0.8).abs() < 1e-15);
        assert_eq!(ci95(&v), 0.0);
        assert_eq!(ci95(&[0.3]), 0.0);
    }
}
