use crate::clustering::{registry, ModelSpec};
use crate::error::{Error, Result};
use crate::evaluation::{stability_cv, StabilityConfig, StabilityEstimate};
use crate::features::FeatureMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenRow {
    pub algorithm: String,
    /// Mean c_V over the k values.
    #[serde(with = "crate::serde_float")]
    pub cv: f64,
    #[serde(with = "crate::serde_float")]
    pub mean_bsi: f64,
    #[serde(with = "crate::serde_float")]
    pub mean_sigma: f64,
    /// Average of the bSI rank (high first) and the σ(S_k) rank (low first)
    /// among stable algorithms; NaN for unstable ones.
    #[serde(with = "crate::serde_float")]
    pub combined_rank: f64,
    pub stable: bool,
    pub kept: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenReport {
    pub rows: Vec<ScreenRow>,
    pub shortlist: Vec<String>,
    pub settings: Vec<StabilityEstimate>,
}

/// Ranks with ties sharing the average position (1-based).
fn average_ranks(values: &[f64], descending: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let c = values[a].total_cmp(&values[b]);
        if descending {
            c.reverse()
        } else {
            c
        }
    });
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Replicates every algorithm with its default hyperparameters at each k,
/// drops those whose c_V exceeds τ and keeps the stable ones whose combined
/// quality rank is at or better than the median. At least two algorithms
/// survive whenever two were supplied.
pub fn prescreen<S: AsRef<str>>(
    algorithms: &[S],
    m: &FeatureMatrix,
    k_values: &[usize],
    cfg: &StabilityConfig,
    seed: u64,
) -> Result<ScreenReport> {
    cfg.validate()?;
    if algorithms.is_empty() {
        return Err(Error::Parameter("no algorithms to screen".into()));
    }
    let mut settings = Vec::new();
    let mut rows = Vec::new();
    for name in algorithms {
        let info = registry().get(name.as_ref())?;
        let specs: Vec<ModelSpec> = if info.requires_k {
            if k_values.is_empty() {
                return Err(Error::Parameter("no k values to screen".into()));
            }
            k_values.iter().map(|&k| ModelSpec::new(info.name, Some(k))).collect()
        } else {
            vec![ModelSpec::new(info.name, None)]
        };
        let estimates: Vec<StabilityEstimate> = specs
            .into_iter()
            .map(|s| stability_cv(&s.with_params(info.defaults.clone()).with_seed(seed), m, cfg))
            .collect::<Result<_>>()?;
        let cv = estimates.iter().map(|e| e.cv).sum::<f64>() / estimates.len() as f64;
        rows.push(ScreenRow {
            algorithm: info.name.to_string(),
            cv,
            mean_bsi: mean(estimates.iter().map(StabilityEstimate::mean_bsi)),
            mean_sigma: mean(estimates.iter().map(StabilityEstimate::mean_sigma)),
            combined_rank: f64::NAN,
            stable: cv <= cfg.tau,
            kept: false,
            failure: estimates.iter().find_map(|e| e.failure.clone()),
        });
        settings.extend(estimates);
    }

    let stable: Vec<usize> = (0..rows.len())
        .filter(|&i| rows[i].stable && rows[i].mean_bsi.is_finite())
        .collect();
    if !stable.is_empty() {
        let b = average_ranks(&stable.iter().map(|&i| rows[i].mean_bsi).collect::<Vec<_>>(), true);
        let s = average_ranks(&stable.iter().map(|&i| rows[i].mean_sigma).collect::<Vec<_>>(), false);
        for (j, &i) in stable.iter().enumerate() {
            rows[i].combined_rank = 0.5 * (b[j] + s[j]);
        }
        let cut = median(stable.iter().map(|&i| rows[i].combined_rank).collect());
        for &i in &stable {
            rows[i].kept = rows[i].combined_rank <= cut;
        }
    }

    if algorithms.len() == 1 {
        rows[0].kept = true;
    } else if rows.iter().filter(|r| r.kept).count() < 2 {
        log::warn!("fewer than two algorithms passed the prescreen; keeping the best two");
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by(|&a, &b| {
            let key = |i: usize| (rows[i].combined_rank.is_nan(), rows[i].combined_rank, rows[i].cv);
            let (ka, kb) = (key(a), key(b));
            ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(ka.2.total_cmp(&kb.2))
        });
        for &i in order.iter().take(2) {
            rows[i].kept = true;
        }
    }
    let shortlist = rows.iter().filter(|r| r.kept).map(|r| r.algorithm.clone()).collect();
    Ok(ScreenReport {
        rows,
        shortlist,
        settings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::indicators::standardize;
    use crate::synthetic::gaussian_blobs;

    #[test]
    fn ranks_share_ties() {
        assert_eq!(average_ranks(&[0.5, 0.7, 0.5], true), vec![2.5, 1.0, 2.5]);
        assert_eq!(average_ranks(&[0.1, 0.3, 0.2], false), vec![1.0, 3.0, 2.0]);
        assert_eq!(median(vec![3.0, 1.0, 2.0, 4.0]), 2.5);
    }

    fn blobs() -> FeatureMatrix {
        let (v, _) = gaussian_blobs(&[30, 30, 30], 3, 1.0, 8.0, 4);
        standardize(&FeatureMatrix::from_rows(v).unwrap()).unwrap()
    }

    #[test]
    fn single_algorithm_is_returned() {
        let cfg = StabilityConfig {
            replicates: 3,
            ..Default::default()
        };
        let r = prescreen(&["minibatch_kmeans"], &blobs(), &[3], &cfg, 0).unwrap();
        assert_eq!(r.shortlist, vec!["minibatch_kmeans"]);
    }

    #[test]
    fn deterministic_algorithms_are_never_unstable() {
        let cfg = StabilityConfig {
            replicates: 3,
            ..Default::default()
        };
        let r = prescreen(&["ward", "average_linkage", "birch", "kmeans_pp"], &blobs(), &[3, 4], &cfg, 0).unwrap();
        for row in &r.rows[..3] {
            assert_eq!(row.cv, 0.0);
            assert!(row.stable);
        }
        assert!(r.shortlist.len() >= 2);
        assert!(r.rows.iter().all(|row| !row.kept || row.combined_rank <= 2.5));
    }
}
