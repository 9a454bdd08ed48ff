//! Learning-curve summaries across seeds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::records::EpisodeRow;
use crate::{Error, Result};

pub const MOVING_AVERAGE_WINDOW: usize = 20;

/// Trailing mean; entry `k` averages `series[k+1-window ..= k]`, truncated at the start.
pub fn moving_average(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::Empty("series"));
    }
    if window == 0 {
        return Err(Error::Config("moving-average window must be positive".into()));
    }
    let out = (0..series.len())
        .map(|k| {
            let slice = &series[(k + 1).saturating_sub(window)..=k];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect();
    Ok(out)
}

/// Percentile `p ∈ [0, 1]` with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bands {
    pub q1: Vec<f64>,
    pub median: Vec<f64>,
    pub q3: Vec<f64>,
}

fn bands(per_seed: &[Vec<f64>]) -> Result<Bands> {
    let len = per_seed.first().ok_or(Error::Empty("seed series"))?.len();
    if let Some(bad) = per_seed.iter().find(|s| s.len() != len) {
        return Err(Error::Dimension {
            context: "per-seed series length",
            expected: len,
            got: bad.len(),
        });
    }
    let mut out = Bands {
        q1: Vec::with_capacity(len),
        median: Vec::with_capacity(len),
        q3: Vec::with_capacity(len),
    };
    let mut column = Vec::with_capacity(per_seed.len());
    for k in 0..len {
        column.clear();
        column.extend(per_seed.iter().map(|s| s[k]));
        column.sort_by(f64::total_cmp);
        out.q1.push(percentile(&column, 0.25));
        out.median.push(percentile(&column, 0.5));
        out.q3.push(percentile(&column, 0.75));
    }
    Ok(out)
}

/// Per-episode quartiles across at least two seeds.
pub fn iqr_bands(per_seed: &[Vec<f64>]) -> Result<Bands> {
    if per_seed.len() < 2 {
        return Err(Error::Config(format!("quartiles need at least 2 seeds, got {}", per_seed.len())));
    }
    bands(per_seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub episode: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub moving_avg_median: f64,
}

/// Per-seed learning curves: the mean over tasks of each episode's return.
pub fn seed_curves(rows: &[EpisodeRow]) -> BTreeMap<u64, Vec<f64>> {
    let mut acc: BTreeMap<u64, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.seed).or_default().entry(r.episode).or_insert((0.0, 0));
        e.0 += r.cum_reward;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(seed, eps)| (seed, eps.into_values().map(|(s, n)| s / n as f64).collect()))
        .collect()
}

/// Quartiles across seeds of [`seed_curves`], plus the moving average of the
/// median. A single seed yields degenerate bands.
pub fn compute_metrics(rows: &[EpisodeRow]) -> Result<Vec<MetricsRow>> {
    let curves: Vec<Vec<f64>> = seed_curves(rows).into_values().collect();
    let b = bands(&curves)?;
    let ma = moving_average(&b.median, MOVING_AVERAGE_WINDOW)?;
    Ok((0..b.median.len())
        .map(|k| MetricsRow {
            episode: k,
            q1: b.q1[k],
            median: b.median[k],
            q3: b.q3[k],
            moving_avg_median: ma[k],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn moving_average_cases() {
        assert_eq!(moving_average(&[3.0; 5], 20).unwrap(), vec![3.0; 5]);
        assert_eq!(moving_average(&[0.0, 20.0], 2).unwrap(), vec![0.0, 10.0]);
        assert_eq!(moving_average(&[7.0, 1.0, 1.0], 2).unwrap()[0], 7.0);
        assert!(moving_average(&[], 2).is_err());
        assert!(moving_average(&[1.0], 0).is_err());
    }

    #[test]
    fn iqr_cases() {
        let seeds: Vec<Vec<f64>> = (1..=10).map(|v| vec![v as f64]).collect();
        let b = iqr_bands(&seeds).unwrap();
        assert!((b.q1[0] - 3.25).abs() < 1e-12);
        assert!((b.median[0] - 5.5).abs() < 1e-12);
        assert!((b.q3[0] - 7.75).abs() < 1e-12);

        let same = vec![vec![1.0, 2.0, 3.0]; 4];
        let b = iqr_bands(&same).unwrap();
        assert_eq!(b.q1, b.median);
        assert_eq!(b.q3, b.median);
        assert_eq!(b.median.len(), 3);

        assert!(iqr_bands(&[vec![1.0]]).is_err());
        assert!(iqr_bands(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn metrics_average_tasks_then_seeds() {
        let row = |seed, task_id, episode, cum_reward| EpisodeRow {
            seed,
            task_id,
            episode,
            cum_reward,
        };
        let rows = vec![
            row(0, 0, 0, -2.0),
            row(0, 1, 0, -4.0),
            row(1, 0, 0, -6.0),
            row(1, 1, 0, -8.0),
            row(0, 0, 1, -1.0),
            row(0, 1, 1, -1.0),
            row(1, 0, 1, -3.0),
            row(1, 1, 1, -3.0),
        ];
        let m = compute_metrics(&rows).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].median, -5.0);
        assert_eq!(m[0].q1, -6.0);
        assert_eq!(m[1].median, -2.0);
        assert_eq!(m[1].moving_avg_median, -3.5);
    }

    proptest! {
        #[test]
        fn moving_average_is_bounded_and_windowed(
            series in proptest::collection::vec(-100.0f64..100.0, 1..80),
            window in 1usize..30,
        ) {
            let ma = moving_average(&series, window).unwrap();
            prop_assert_eq!(ma.len(), series.len());
            for k in 0..series.len() {
                let w = &series[k.saturating_sub(window - 1)..=k];
                let lo = w.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(ma[k] >= lo - 1e-9 && ma[k] <= hi + 1e-9);
                if k >= window {
                    let step = (ma[k] - ma[k - 1]) * window as f64;
                    prop_assert!((step - (series[k] - series[k - window])).abs() < 1e-8);
                }
            }
            prop_assert_eq!(ma[0], series[0]);
        }

        #[test]
        fn quartiles_are_ordered(data in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 5), 2..12)) {
            let b = iqr_bands(&data).unwrap();
            for k in 0..5 {
                prop_assert!(b.q1[k] <= b.median[k] && b.median[k] <= b.q3[k]);
            }
        }
    }
}
