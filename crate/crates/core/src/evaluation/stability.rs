use super::{ClusterWeights, QualityReport};
use crate::clustering::{registry, ModelSpec};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityConfig {
    /// Replicates per setting (T).
    pub replicates: usize,
    /// Damping constant in the denominator (β).
    pub beta: f64,
    /// Order of the deviation norm.
    pub norm: f64,
    /// Settings with c_V above this are unstable (τ).
    pub tau: f64,
    pub weights: ClusterWeights,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            replicates: 10,
            beta: 1.0,
            norm: 2.0,
            tau: 0.05,
            weights: ClusterWeights::Equal,
        }
    }
}

impl StabilityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::Parameter("stability needs at least two replicates".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Parameter("beta must be non-negative".into()));
        }
        if !(self.norm >= 1.0 && self.norm.is_finite()) {
            return Err(Error::Parameter("norm order must be at least 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Parameter("tau must be positive".into()));
        }
        Ok(())
    }
}

/// `(1/T) * ||y - mean||_n / (beta + mean)`. Zero when all values agree.
pub fn coefficient_of_variation(values: &[f64], beta: f64, norm: f64) -> f64 {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    if values.iter().all(|&v| v == values[0]) {
        return 0.0;
    }
    let t = values.len() as f64;
    let mean = values.iter().sum::<f64>() / t;
    let spread = values
        .iter()
        .map(|v| (v - mean).abs().powf(norm))
        .sum::<f64>()
        .powf(1.0 / norm)
        / t;
    let denom = (beta + mean).abs();
    if denom > 0.0 {
        spread / denom
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub seed: u64,
    pub bsi: f64,
    pub sigma_sk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityEstimate {
    pub spec: ModelSpec,
    pub replicates: Vec<Replicate>,
    #[serde(with = "crate::serde_float")]
    pub cv_bsi: f64,
    #[serde(with = "crate::serde_float")]
    pub cv_sigma: f64,
    /// Mean of the two per-metric values.
    #[serde(with = "crate::serde_float")]
    pub cv: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl StabilityEstimate {
    pub fn mean_bsi(&self) -> f64 {
        mean(self.replicates.iter().map(|r| r.bsi))
    }

    pub fn mean_sigma(&self) -> f64 {
        mean(self.replicates.iter().map(|r| r.sigma_sk))
    }

    pub fn is_stable(&self, tau: f64) -> bool {
        self.failure.is_none() && self.cv <= tau
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn replicate(spec: &ModelSpec, seed: u64, m: &FeatureMatrix, weights: &ClusterWeights) -> Result<Replicate> {
    let spec = spec.clone().with_seed(seed);
    let result = registry().fit(&spec, m)?;
    let q = QualityReport::compute(m, &result.labels, weights)?;
    Ok(Replicate {
        seed,
        bsi: q.bsi,
        sigma_sk: q.sigma_sk,
    })
}

/// Refits `spec` with seeds `seed+1 ..= seed+T` and measures how much bSI and
/// σ(S_k) move. Algorithms registered as deterministic are fitted once and
/// the result is reused for every replicate.
pub fn stability_cv(spec: &ModelSpec, m: &FeatureMatrix, cfg: &StabilityConfig) -> Result<StabilityEstimate> {
    cfg.validate()?;
    let info = registry().validate(spec)?;
    let seeds: Vec<u64> = (1..=cfg.replicates as u64).map(|t| spec.seed.wrapping_add(t)).collect();
    let outcome: Result<Vec<Replicate>> = if info.stochastic {
        seeds.par_iter().map(|&s| replicate(spec, s, m, &cfg.weights)).collect()
    } else {
        replicate(spec, seeds[0], m, &cfg.weights)
            .map(|r| seeds.iter().map(|&seed| Replicate { seed, ..r.clone() }).collect())
    };
    Ok(match outcome {
        Ok(replicates) => {
            let b: Vec<f64> = replicates.iter().map(|r| r.bsi).collect();
            let s: Vec<f64> = replicates.iter().map(|r| r.sigma_sk).collect();
            let cv_bsi = coefficient_of_variation(&b, cfg.beta, cfg.norm);
            let cv_sigma = coefficient_of_variation(&s, cfg.beta, cfg.norm);
            StabilityEstimate {
                spec: spec.clone(),
                replicates,
                cv_bsi,
                cv_sigma,
                cv: 0.5 * (cv_bsi + cv_sigma),
                failure: None,
            }
        }
        Err(e) => {
            log::warn!("{} is unstable: a replicate failed: {e}", spec.algorithm);
            StabilityEstimate {
                spec: spec.clone(),
                replicates: Vec::new(),
                cv_bsi: f64::INFINITY,
                cv_sigma: f64::INFINITY,
                cv: f64::INFINITY,
                failure: Some(e.to_string()),
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub settings: Vec<StabilityEstimate>,
    /// c_V(a): mean over the settings of each algorithm.
    #[serde(with = "per_algorithm")]
    pub per_algorithm: BTreeMap<String, f64>,
}

mod per_algorithm {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    #[derive(Serialize, Deserialize)]
    struct Wrapped(#[serde(with = "crate::serde_float")] f64);

    pub fn serialize<S: Serializer>(map: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
        let wrapped: BTreeMap<&String, Wrapped> = map.iter().map(|(k, v)| (k, Wrapped(*v))).collect();
        wrapped.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, f64>, D::Error> {
        let wrapped: BTreeMap<String, Wrapped> = BTreeMap::deserialize(d)?;
        Ok(wrapped.into_iter().map(|(k, v)| (k, v.0)).collect())
    }
}

/// Stability of every spec, grouped per algorithm.
pub fn stability_report(specs: &[ModelSpec], m: &FeatureMatrix, cfg: &StabilityConfig) -> Result<StabilityReport> {
    let settings = specs
        .iter()
        .map(|s| stability_cv(s, m, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut grouped: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for e in &settings {
        grouped.entry(e.spec.algorithm.clone()).or_default().push(e.cv);
    }
    let per_algorithm = grouped
        .into_iter()
        .map(|(a, v)| (a, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    Ok(StabilityReport {
        settings,
        per_algorithm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::gaussian_blobs;

    #[test]
    fn hand_example_l1() {
        let cv = coefficient_of_variation(&[0.5, 0.5, 0.7], 0.0, 1.0);
        let mean = 1.7 / 3.0;
        let expected = (0.8 / 3.0) / 3.0 / mean;
        assert!((cv - expected).abs() < 1e-12);
        assert!((cv - 0.1569).abs() < 1e-4);
    }

    #[test]
    fn large_beta_damps() {
        let v = [0.5, 0.5, 0.7];
        assert!(coefficient_of_variation(&v, 1e9, 2.0) < 1e-9);
        assert_eq!(coefficient_of_variation(&[0.1; 7], 0.0, 2.0), 0.0);
    }

    fn blobs() -> FeatureMatrix {
        let (v, _) = gaussian_blobs(&[30, 30, 30], 3, 1.0, 5.0, 3);
        FeatureMatrix::from_rows(v).unwrap()
    }

    #[test]
    fn deterministic_algorithm_has_zero_cv() {
        let m = blobs();
        let cfg = StabilityConfig::default();
        let e = stability_cv(&ModelSpec::new("ward", Some(3)), &m, &cfg).unwrap();
        assert_eq!(e.cv, 0.0);
        assert_eq!(e.replicates.len(), 10);
        assert_eq!(e.replicates[0].seed, 1);
    }

    #[test]
    fn failing_replicate_marks_unstable() {
        let m = FeatureMatrix::from_rows(ndarray::array![[0.0], [1.0], [2.0]]).unwrap();
        let e = stability_cv(&ModelSpec::new("kmeans_pp", Some(3)), &m, &StabilityConfig::default()).unwrap();
        // Three singletons: silhouette is defined but every cluster is a singleton.
        assert!(e.cv.is_finite());
        let e = stability_cv(&ModelSpec::new("kmeans_pp", Some(4)), &m, &StabilityConfig::default()).unwrap();
        assert!(e.cv.is_infinite());
        assert!(!e.is_stable(0.05));
    }

    #[test]
    fn report_groups_by_algorithm() {
        let m = blobs();
        let specs = vec![
            ModelSpec::new("ward", Some(3)),
            ModelSpec::new("ward", Some(4)),
            ModelSpec::new("kmeans_pp", Some(3)),
        ];
        let cfg = StabilityConfig {
            replicates: 3,
            ..Default::default()
        };
        let r = stability_report(&specs, &m, &cfg).unwrap();
        assert_eq!(r.per_algorithm["ward"], 0.0);
        assert_eq!(r.per_algorithm.len(), 2);
        let json = serde_json::to_string(&r).unwrap();
        let back: StabilityReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.per_algorithm, r.per_algorithm);
    }
}
