//! Tree-structured Parzen estimator over mixed continuous, ordinal and
//! categorical dimensions.
//!
//! Observations are split at the γ-quantile of the target into a good set and
//! a bad set. Each set gets an independent per-dimension Parzen density
//! (`l` for good, `g` for bad); candidates are drawn from `l` and the one with
//! the largest `l(x) / g(x)` wins.

use crate::clustering::rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpeSettings {
    /// Fraction of observations that form the good set.
    pub gamma: f64,
    /// Uniform draws before the densities are used.
    pub startup_trials: usize,
    /// Candidates drawn from `l` per suggestion.
    pub candidates: usize,
    /// Weight of the uniform prior component in every density.
    pub prior_weight: f64,
    /// Smallest kernel bandwidth as a fraction of the domain span.
    pub min_bandwidth: f64,
}

impl Default for TpeSettings {
    fn default() -> Self {
        Self {
            gamma: 0.25,
            startup_trials: 20,
            candidates: 24,
            prior_weight: 1.0,
            min_bandwidth: 1.0 / 20.0,
        }
    }
}

impl TpeSettings {
    pub fn validate(&self) -> crate::Result<()> {
        let bad = |msg: &str| Err(crate::Error::Parameter(msg.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if self.candidates == 0 {
            return bad("at least one candidate per suggestion is required");
        }
        if !(self.prior_weight > 0.0 && self.prior_weight.is_finite()) {
            return bad("prior weight must be positive");
        }
        if !(self.min_bandwidth > 0.0 && self.min_bandwidth <= 1.0) {
            return bad("minimum bandwidth must lie in (0, 1]");
        }
        Ok(())
    }
}

/// One axis of the search space.
#[derive(Debug, Clone, PartialEq)]
pub enum Dimension {
    Uniform { low: f64, high: f64 },
    /// An ordered grid of `n` points; kernels act on the grid index.
    Ordinal(usize),
    /// `n` unordered options.
    Categorical(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Real(f64),
    Index(usize),
}

impl Value {
    pub fn real(self) -> f64 {
        match self {
            Value::Real(x) => x,
            Value::Index(i) => i as f64,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Value::Index(i) => i,
            Value::Real(x) => x as usize,
        }
    }
}

/// Size of the good set for `n` observations: `ceil(gamma * n)`.
pub fn good_count(n: usize, gamma: f64) -> usize {
    ((gamma * n as f64).ceil() as usize).min(n)
}

/// Splits observations into good and bad index sets. `None` targets (failed
/// or gated observations) always land in the bad set; the good set takes the
/// best `good_count(n)` of the rest, ties broken by position.
pub fn split(targets: &[Option<f64>], gamma: f64) -> (Vec<usize>, Vec<usize>) {
    let mut eligible: Vec<usize> = (0..targets.len())
        .filter(|&i| targets[i].is_some_and(|t| !t.is_nan()))
        .collect();
    eligible.sort_by(|&a, &b| targets[a].unwrap().total_cmp(&targets[b].unwrap()).then(a.cmp(&b)));
    eligible.truncate(good_count(targets.len(), gamma));
    let mut good = eligible;
    good.sort_unstable();
    let bad = (0..targets.len()).filter(|i| good.binary_search(i).is_err()).collect();
    (good, bad)
}

pub fn sample_prior(dim: &Dimension, rng: &mut ChaCha8Rng) -> Value {
    match *dim {
        Dimension::Uniform { low, high } => Value::Real(low + (high - low) * rng.random::<f64>()),
        Dimension::Ordinal(n) | Dimension::Categorical(n) => Value::Index(rng.random_range(0..n.max(1))),
    }
}

#[derive(Debug, Clone)]
struct Kernel {
    mu: f64,
    sigma: f64,
}

/// Per-observation bandwidths: the larger gap to a sorted neighbour (domain
/// ends count as neighbours), floored at `min_fraction * span`.
fn bandwidths(obs: &[f64], low: f64, high: f64, min_fraction: f64) -> Vec<f64> {
    let span = high - low;
    let mut order: Vec<usize> = (0..obs.len()).collect();
    order.sort_by(|&a, &b| obs[a].total_cmp(&obs[b]));
    let mut out = vec![0.0; obs.len()];
    for (pos, &i) in order.iter().enumerate() {
        let left = if pos == 0 { low } else { obs[order[pos - 1]] };
        let right = if pos + 1 == order.len() { high } else { obs[order[pos + 1]] };
        let gap = (obs[i] - left).max(right - obs[i]);
        out[i] = gap.clamp(min_fraction * span, span);
    }
    out
}

#[derive(Debug, Clone)]
enum Density {
    /// Truncated Gaussian mixture plus a uniform prior on `[low, high]`.
    Continuous {
        low: f64,
        high: f64,
        kernels: Vec<Kernel>,
        prior: f64,
    },
    Discrete {
        probs: Vec<f64>,
    },
}

fn std_normal() -> Normal {
    Normal::standard()
}

impl Density {
    fn build(dim: &Dimension, obs: &[Value], s: &TpeSettings) -> Density {
        match *dim {
            Dimension::Uniform { low, high } => {
                let xs: Vec<f64> = obs.iter().map(|v| v.real()).collect();
                let sig = bandwidths(&xs, low, high, s.min_bandwidth);
                Density::Continuous {
                    low,
                    high,
                    kernels: xs.iter().zip(sig).map(|(&mu, sigma)| Kernel { mu, sigma }).collect(),
                    prior: s.prior_weight,
                }
            }
            Dimension::Ordinal(n) => {
                let n = n.max(1);
                let xs: Vec<f64> = obs.iter().map(|v| v.index() as f64).collect();
                let span = (n - 1) as f64;
                let mut probs = vec![s.prior_weight / n as f64; n];
                if span > 0.0 {
                    let sig = bandwidths(&xs, 0.0, span, s.min_bandwidth);
                    let phi = std_normal();
                    for (&mu, sigma) in xs.iter().zip(sig) {
                        let mass: Vec<f64> = (0..n).map(|j| phi.pdf((j as f64 - mu) / sigma)).collect();
                        let total: f64 = mass.iter().sum();
                        for (p, m) in probs.iter_mut().zip(mass) {
                            *p += m / total;
                        }
                    }
                } else {
                    probs[0] += xs.len() as f64;
                }
                normalise(&mut probs);
                Density::Discrete { probs }
            }
            Dimension::Categorical(n) => {
                let mut probs = vec![s.prior_weight; n.max(1)];
                for v in obs {
                    if let Some(p) = probs.get_mut(v.index()) {
                        *p += 1.0;
                    }
                }
                normalise(&mut probs);
                Density::Discrete { probs }
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Value {
        match self {
            Density::Continuous {
                low,
                high,
                kernels,
                prior,
            } => {
                let total = prior + kernels.len() as f64;
                let pick = rng.random::<f64>() * total;
                let u = rng.random::<f64>();
                if pick < *prior || kernels.is_empty() {
                    return Value::Real(low + (high - low) * u);
                }
                let k = &kernels[((pick - prior) as usize).min(kernels.len() - 1)];
                let phi = std_normal();
                let a = phi.cdf((low - k.mu) / k.sigma);
                let b = phi.cdf((high - k.mu) / k.sigma);
                let x = if b - a > 1e-300 {
                    k.mu + k.sigma * phi.inverse_cdf(a + u * (b - a))
                } else {
                    k.mu
                };
                Value::Real(x.clamp(*low, *high))
            }
            Density::Discrete { probs } => {
                let mut u = rng.random::<f64>();
                for (i, p) in probs.iter().enumerate() {
                    if u < *p {
                        return Value::Index(i);
                    }
                    u -= p;
                }
                Value::Index(probs.len() - 1)
            }
        }
    }

    fn ln_pdf(&self, v: Value) -> f64 {
        match self {
            Density::Continuous {
                low,
                high,
                kernels,
                prior,
            } => {
                let x = v.real();
                if x < *low || x > *high {
                    return f64::NEG_INFINITY;
                }
                let phi = std_normal();
                let mut p = prior / (high - low);
                for k in kernels {
                    let z = phi.cdf((high - k.mu) / k.sigma) - phi.cdf((low - k.mu) / k.sigma);
                    if z > 0.0 {
                        p += phi.pdf((x - k.mu) / k.sigma) / (k.sigma * z);
                    }
                }
                (p / (prior + kernels.len() as f64)).ln()
            }
            Density::Discrete { probs } => probs.get(v.index()).map_or(f64::NEG_INFINITY, |p| p.ln()),
        }
    }
}

fn normalise(p: &mut [f64]) {
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
}

/// Draws `settings.candidates` points from the good density and returns the
/// one with the largest `l/g`. `good` and `bad` are observation vectors laid
/// out like `dims`.
pub fn suggest(
    dims: &[Dimension],
    good: &[&[Value]],
    bad: &[&[Value]],
    settings: &TpeSettings,
    rng: &mut ChaCha8Rng,
) -> Vec<Value> {
    let column = |set: &[&[Value]], d: usize| -> Vec<Value> { set.iter().map(|o| o[d]).collect() };
    let l: Vec<Density> = (0..dims.len())
        .map(|d| Density::build(&dims[d], &column(good, d), settings))
        .collect();
    let g: Vec<Density> = (0..dims.len())
        .map(|d| Density::build(&dims[d], &column(bad, d), settings))
        .collect();
    let mut best: Option<(f64, Vec<Value>)> = None;
    for _ in 0..settings.candidates.max(1) {
        let x: Vec<Value> = l.iter().map(|dens| dens.sample(rng)).collect();
        let score: f64 = x
            .iter()
            .enumerate()
            .map(|(d, &v)| l[d].ln_pdf(v) - g[d].ln_pdf(v))
            .sum();
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, x));
        }
    }
    best.map(|b| b.1).unwrap_or_default()
}

/// Minimises a black-box `objective` for `iterations` evaluations and
/// returns every `(point, value)` in evaluation order.
pub fn minimize<F: FnMut(&[Value]) -> f64>(
    dims: &[Dimension],
    settings: &TpeSettings,
    iterations: usize,
    seed: u64,
    mut objective: F,
) -> Vec<(Vec<Value>, f64)> {
    let mut r = rng(seed);
    let mut history: Vec<(Vec<Value>, f64)> = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let x = if history.len() < settings.startup_trials {
            dims.iter().map(|d| sample_prior(d, &mut r)).collect()
        } else {
            let targets: Vec<Option<f64>> = history.iter().map(|h| Some(h.1).filter(|v| v.is_finite())).collect();
            let (gi, bi) = split(&targets, settings.gamma);
            let good: Vec<&[Value]> = gi.iter().map(|&i| history[i].0.as_slice()).collect();
            let bad: Vec<&[Value]> = bi.iter().map(|&i| history[i].0.as_slice()).collect();
            suggest(dims, &good, &bad, settings, &mut r)
        };
        let y = objective(&x);
        history.push((x, y));
    }
    history
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn good_set_size_is_ceiling() {
        assert_eq!(good_count(1, 0.25), 1);
        assert_eq!(good_count(4, 0.25), 1);
        assert_eq!(good_count(5, 0.25), 2);
        assert_eq!(good_count(100, 0.25), 25);
    }

    #[test]
    fn split_sends_gated_rows_to_bad() {
        let t = [Some(0.3), None, Some(0.1), Some(0.2), Some(f64::NAN)];
        let (good, bad) = split(&t, 0.25);
        assert_eq!(good, vec![2, 3]);
        assert_eq!(bad, vec![0, 1, 4]);
    }

    #[test]
    fn empty_history_samples_inside_domain() {
        let dims = [Dimension::Uniform { low: 1.1, high: 4.0 }, Dimension::Ordinal(19), Dimension::Categorical(2)];
        let mut r = rng(1);
        for _ in 0..200 {
            let x = suggest(&dims, &[], &[], &TpeSettings::default(), &mut r);
            assert!((1.1..=4.0).contains(&x[0].real()));
            assert!(x[1].index() < 19 && x[2].index() < 2);
        }
    }

    #[test]
    fn densities_integrate_to_one() {
        let s = TpeSettings::default();
        let obs = [Value::Real(0.5), Value::Real(0.55), Value::Real(3.0)];
        let d = Density::build(&Dimension::Uniform { low: 0.0, high: 4.0 }, &obs, &s);
        let steps = 40_000;
        let h = 4.0 / steps as f64;
        let integral: f64 = (0..steps).map(|i| d.ln_pdf(Value::Real((i as f64 + 0.5) * h)).exp() * h).sum();
        assert!((integral - 1.0).abs() < 1e-4);
        let d = Density::build(&Dimension::Ordinal(7), &[Value::Index(0), Value::Index(6)], &s);
        let total: f64 = (0..7).map(|i| d.ln_pdf(Value::Index(i)).exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn laplace_counts_for_categories() {
        let s = TpeSettings::default();
        let d = Density::build(&Dimension::Categorical(3), &[Value::Index(1), Value::Index(1)], &s);
        assert!((d.ln_pdf(Value::Index(1)).exp() - 3.0 / 5.0).abs() < 1e-15);
        assert!((d.ln_pdf(Value::Index(0)).exp() - 1.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn bandwidth_rule() {
        // Sorted 1, 2, 6 in [0, 10]: gaps (1,1), (1,4), (4,4).
        let b = bandwidths(&[6.0, 1.0, 2.0], 0.0, 10.0, 0.05);
        assert_eq!(b, vec![4.0, 1.0, 4.0]);
        assert_eq!(bandwidths(&[5.0, 5.0], 0.0, 10.0, 0.05), vec![5.0, 5.0]);
        assert_eq!(bandwidths(&[5.0, 5.001, 5.002], 0.0, 10.0, 0.05)[1], 0.5);
    }

    #[test]
    fn suggestions_follow_the_good_region() {
        let dims = [Dimension::Uniform { low: 0.0, high: 10.0 }];
        let good: Vec<Vec<Value>> = (0..10).map(|i| vec![Value::Real(1.0 + 0.2 * i as f64)]).collect();
        let bad: Vec<Vec<Value>> = (0..30).map(|i| vec![Value::Real(5.0 + 0.15 * i as f64)]).collect();
        let good: Vec<&[Value]> = good.iter().map(Vec::as_slice).collect();
        let bad: Vec<&[Value]> = bad.iter().map(Vec::as_slice).collect();
        let mut r = rng(3);
        let hits = (0..20)
            .filter(|_| suggest(&dims, &good, &bad, &TpeSettings::default(), &mut r)[0].real() < 5.0)
            .count();
        assert!(hits >= 16, "{hits}");
    }

    #[test]
    fn quadratic_converges() {
        let dims = [Dimension::Uniform { low: 0.0, high: 5.0 }];
        let h = minimize(&dims, &TpeSettings::default(), 100, 11, |x| (x[0].real() - 2.0).powi(2));
        let best = h.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        assert!((best.0[0].real() - 2.0).abs() < 0.2);
    }
}
