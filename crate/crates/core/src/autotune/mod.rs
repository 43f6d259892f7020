//! Automatic model selection: a stability prescreen of the algorithm
//! portfolio, then TPE search over (algorithm, k, hyperparameters) that
//! minimises a loss combining quality, cluster balance and stability.

mod prescreen;
pub mod tpe;

pub use prescreen::{prescreen, ScreenReport, ScreenRow};
pub use tpe::{Dimension, TpeSettings, Value};

use crate::clustering::{registry, rng, Hyperparameters, ModelSpec, ParamDomain, ParamValue};
use crate::error::{Error, Result};
use crate::evaluation::{stability_cv, QualityReport, QualitySummary, StabilityConfig};
use crate::features::{FeatureMatrix, MatrixState};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

/// Weights of the loss `(s* - bSI) + λ·σ(S_k) + φ·c_V`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Target silhouette `s*`.
    pub target: f64,
    pub lambda: f64,
    pub phi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            target: 1.0,
            lambda: 0.5,
            phi: 1.0,
        }
    }
}

impl LossWeights {
    pub fn loss(&self, bsi: f64, sigma_sk: f64, cv: f64) -> f64 {
        let mut l = (self.target - bsi) + self.lambda * sigma_sk;
        // Skipped rather than multiplied so that φ = 0 ignores an infinite c_V.
        if self.phi != 0.0 {
            l += self.phi * cv;
        }
        l
    }

    pub fn validate(&self) -> Result<()> {
        if !self.target.is_finite() || !(self.lambda >= 0.0) || !(self.phi >= 0.0) {
            return Err(Error::Parameter("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// The loss of a quality summary.
pub fn loss(quality: &QualitySummary, cv: f64, weights: &LossWeights) -> f64 {
    weights.loss(quality.bsi, quality.sigma_sk, cv)
}

/// `loss(x) / loss(k)`, defined as 1 when `loss(k)` is zero.
pub fn conditional_loss(loss_x: f64, loss_k: f64) -> f64 {
    if loss_k == 0.0 {
        1.0
    } else {
        loss_x / loss_k
    }
}

/// Running mean of the finite losses seen at each k.
#[derive(Debug, Clone, Default)]
pub struct LossByK {
    sums: BTreeMap<usize, (f64, usize)>,
}

impl LossByK {
    /// Adds a loss and returns the updated mean at `k`.
    pub fn push(&mut self, k: usize, loss_x: f64) -> f64 {
        let e = self.sums.entry(k).or_insert((0.0, 0));
        if loss_x.is_finite() {
            e.0 += loss_x;
            e.1 += 1;
        }
        self.mean(k)
    }

    pub fn mean(&self, k: usize) -> f64 {
        match self.sums.get(&k) {
            Some(&(s, n)) if n > 0 => s / n as f64,
            _ => f64::NAN,
        }
    }
}

/// Search domain of one algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSpace {
    pub algorithm: String,
    pub requires_k: bool,
    pub domains: BTreeMap<String, ParamDomain>,
    /// Values of hyperparameters that are not searched.
    pub fixed: Hyperparameters,
}

impl AlgorithmSpace {
    fn dimensions(&self, k_values: &[usize]) -> Vec<Dimension> {
        let mut dims = Vec::new();
        if self.requires_k {
            dims.push(Dimension::Categorical(k_values.len()));
        }
        for d in self.domains.values() {
            dims.push(match d {
                ParamDomain::Uniform { low, high } => Dimension::Uniform { low: *low, high: *high },
                ParamDomain::Range { .. } => Dimension::Ordinal(d.grid().len()),
                ParamDomain::Choice { options } => Dimension::Categorical(options.len()),
            });
        }
        dims
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub k_values: Vec<usize>,
    pub algorithms: Vec<AlgorithmSpace>,
}

impl SearchSpace {
    /// Registered domains and defaults of the named algorithms.
    pub fn from_registry<S: AsRef<str>>(names: &[S], k_values: Vec<usize>) -> Result<Self> {
        let mut algorithms = Vec::new();
        for name in names {
            let info = registry().get(name.as_ref())?;
            let mut fixed = info.defaults.clone();
            fixed.0.retain(|k, _| !info.domain.contains_key(k));
            algorithms.push(AlgorithmSpace {
                algorithm: info.name.to_string(),
                requires_k: info.requires_k,
                domains: info.domain.clone(),
                fixed,
            });
        }
        let space = Self { k_values, algorithms };
        space.validate()?;
        Ok(space)
    }

    /// Replaces (or adds) the search domain of one hyperparameter.
    pub fn set_domain(&mut self, algorithm: &str, param: &str, domain: ParamDomain) -> Result<()> {
        domain.validate()?;
        let a = self
            .algorithms
            .iter_mut()
            .find(|a| a.algorithm == algorithm)
            .ok_or_else(|| Error::UnknownAlgorithm(algorithm.to_string()))?;
        a.fixed.0.remove(param);
        a.domains.insert(param.to_string(), domain);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.algorithms.is_empty() {
            return Err(Error::Parameter("search space has no algorithms".into()));
        }
        if self.algorithms.iter().any(|a| a.requires_k) && self.k_values.is_empty() {
            return Err(Error::Parameter("search space has no k values".into()));
        }
        if self.k_values.iter().any(|&k| k < 2) {
            return Err(Error::Parameter("k values must be at least 2".into()));
        }
        for a in &self.algorithms {
            registry().get(&a.algorithm)?;
            for d in a.domains.values() {
                d.validate()?;
                if matches!(d, ParamDomain::Range { .. }) && d.grid().is_empty() {
                    return Err(Error::Parameter(format!("empty range for {}", a.algorithm)));
                }
            }
        }
        Ok(())
    }

    /// True when the spec's algorithm, k and searched values lie in the space.
    pub fn contains(&self, spec: &ModelSpec) -> bool {
        self.encode(spec).is_some()
    }

    fn decode(&self, a: usize, x: &[Value]) -> ModelSpec {
        let space = &self.algorithms[a];
        let mut values = x.iter();
        let k = if space.requires_k {
            Some(self.k_values[values.next().expect("k dimension").index()])
        } else {
            None
        };
        let mut params = space.fixed.clone();
        for ((name, domain), v) in space.domains.iter().zip(values) {
            let value = match domain {
                ParamDomain::Uniform { .. } => ParamValue::Real(v.real()),
                ParamDomain::Range { .. } => ParamValue::Int(domain.grid()[v.index()]),
                ParamDomain::Choice { options } => ParamValue::Text(options[v.index()].clone()),
            };
            params = params.with(name, value);
        }
        ModelSpec::new(&space.algorithm, k).with_params(params)
    }

    fn encode(&self, spec: &ModelSpec) -> Option<(usize, Vec<Value>)> {
        let a = self.algorithms.iter().position(|s| s.algorithm == spec.algorithm)?;
        let space = &self.algorithms[a];
        let mut x = Vec::new();
        if space.requires_k {
            x.push(Value::Index(self.k_values.iter().position(|&k| Some(k) == spec.k)?));
        }
        for (name, domain) in &space.domains {
            let v = spec.hyperparameters.get(name)?;
            if !domain.contains(v) {
                return None;
            }
            x.push(match domain {
                ParamDomain::Uniform { .. } => Value::Real(v.as_f64()?),
                ParamDomain::Range { .. } => {
                    Value::Index(domain.grid().iter().position(|&g| Some(g as f64) == v.as_f64())?)
                }
                ParamDomain::Choice { options } => {
                    Value::Index(options.iter().position(|o| matches!(v, ParamValue::Text(t) if t == o))?)
                }
            });
        }
        Some((a, x))
    }

    fn sample_uniform(&self, r: &mut ChaCha8Rng) -> ModelSpec {
        let a = tpe::sample_prior(&Dimension::Categorical(self.algorithms.len()), r).index();
        let x: Vec<Value> = self.algorithms[a]
            .dimensions(&self.k_values)
            .iter()
            .map(|d| tpe::sample_prior(d, r))
            .collect();
        self.decode(a, &x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub iterations: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub tpe: TpeSettings,
    /// Replicates behind the c_V of each trial of a stochastic algorithm.
    pub tune_replicates: usize,
    /// Settings of the final stability check on the best models; `tau` also
    /// gates which trials may enter the good set.
    pub stability: StabilityConfig,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            seed: 0,
            loss: LossWeights::default(),
            tpe: TpeSettings::default(),
            tune_replicates: 3,
            stability: StabilityConfig::default(),
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.tpe.validate()?;
        self.stability.validate()?;
        if self.tune_replicates < 2 {
            return Err(Error::Parameter("tune_replicates must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Ok,
    /// c_V above τ; kept in the log but never in the good set.
    Unstable,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub iteration: usize,
    pub spec: ModelSpec,
    /// Clusters actually found (the requested k when the fit failed).
    pub k: Option<usize>,
    pub status: TrialStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<QualitySummary>,
    #[serde(with = "crate::serde_float")]
    pub cv: f64,
    #[serde(with = "crate::serde_float")]
    pub loss_x: f64,
    /// Running mean loss at this trial's k, including the trial.
    #[serde(with = "crate::serde_float")]
    pub loss_k: f64,
    #[serde(with = "crate::serde_float")]
    pub loss_conditional: f64,
}

/// Best trial at one k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRow {
    pub k: usize,
    pub iteration: usize,
    pub spec: ModelSpec,
    pub bsi: f64,
    pub sigma_sk: f64,
    pub boundary_count: usize,
    #[serde(with = "crate::serde_float")]
    pub loss_x: f64,
    #[serde(with = "crate::serde_float")]
    pub loss_conditional: f64,
    /// c_V of the full replicate check.
    #[serde(with = "crate::serde_float")]
    pub final_cv: f64,
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneHistory {
    pub weights: LossWeights,
    pub trials: Vec<TrialRecord>,
    pub best: Vec<BestRow>,
}

impl TuneHistory {
    /// Batch mean of the finite losses at `k` over the first `upto` trials.
    pub fn loss_k(&self, k: usize, upto: usize) -> f64 {
        let vals: Vec<f64> = self.trials[..upto]
            .iter()
            .filter(|t| t.k == Some(k) && t.loss_x.is_finite())
            .map(|t| t.loss_x)
            .collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> Result<()> {
        for t in &self.trials {
            serde_json::to_writer(&mut writer, t)?;
            writer.write_all(b"\n").map_err(|e| Error::io("<trial log>", e))?;
        }
        Ok(())
    }

    /// Best-per-k table: k, algorithm, hyperparameters, quality and losses.
    pub fn write_best_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "k",
            "algorithm",
            "hyperparameters",
            "bsi",
            "sigma_sk",
            "boundary_count",
            "loss_x",
            "loss_conditional",
            "iteration",
            "final_cv",
            "stable",
        ])?;
        for b in &self.best {
            w.write_record([
                b.k.to_string(),
                b.spec.algorithm.clone(),
                b.spec.hyperparameters.to_string(),
                b.bsi.to_string(),
                b.sigma_sk.to_string(),
                b.boundary_count.to_string(),
                b.loss_x.to_string(),
                b.loss_conditional.to_string(),
                b.iteration.to_string(),
                b.final_cv.to_string(),
                b.stable.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<best table>", e))?;
        Ok(())
    }
}

/// Reads a trial log written one record per line.
pub fn read_trials_jsonl<R: BufRead>(reader: R) -> Result<Vec<TrialRecord>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io("<trial log>", e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Lowest-loss successful trial at each k (the earliest on ties).
pub fn best_per_k<'a>(trials: &'a [TrialRecord], k_values: &[usize]) -> BTreeMap<usize, &'a TrialRecord> {
    let mut best: BTreeMap<usize, &TrialRecord> = BTreeMap::new();
    for t in trials.iter().filter(|t| t.status == TrialStatus::Ok) {
        let Some(k) = t.k.filter(|k| k_values.contains(k)) else { continue };
        match best.get(&k) {
            Some(b) if b.loss_x <= t.loss_x => {}
            _ => {
                best.insert(k, t);
            }
        }
    }
    best
}

fn trial_seed(seed: u64, iteration: usize) -> u64 {
    seed ^ (iteration as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn failed(iteration: usize, spec: ModelSpec, k: Option<usize>, err: Error) -> TrialRecord {
    log::debug!("trial {iteration} ({}) failed: {err}", spec.label());
    TrialRecord {
        iteration,
        spec,
        k,
        status: TrialStatus::Failed,
        error: Some(err.to_string()),
        quality: None,
        cv: f64::INFINITY,
        loss_x: f64::INFINITY,
        loss_k: f64::NAN,
        loss_conditional: f64::INFINITY,
    }
}

/// Fits, scores and stability-checks one spec. The loss(k) fields are
/// filled in by the caller.
fn evaluate(iteration: usize, spec: ModelSpec, m: &FeatureMatrix, cfg: &TuneConfig) -> TrialRecord {
    let info = match registry().validate(&spec) {
        Ok(info) => info,
        Err(e) => return failed(iteration, spec, None, e),
    };
    let result = match registry().fit(&spec, m) {
        Ok(r) => r,
        Err(e) => {
            let k = spec.k;
            return failed(iteration, spec, k, e);
        }
    };
    let k = Some(result.k_found);
    let quality = match QualityReport::compute(m, &result.labels, &cfg.stability.weights) {
        Ok(q) => q.summary(),
        Err(e) => return failed(iteration, spec, k, e),
    };
    let cv = if info.stochastic {
        let quick = StabilityConfig {
            replicates: cfg.tune_replicates,
            ..cfg.stability.clone()
        };
        match stability_cv(&spec, m, &quick) {
            Ok(e) => e.cv,
            Err(e) => return failed(iteration, spec, k, e),
        }
    } else {
        0.0
    };
    let status = if cv <= cfg.stability.tau {
        TrialStatus::Ok
    } else {
        TrialStatus::Unstable
    };
    TrialRecord {
        iteration,
        loss_x: loss(&quality, cv, &cfg.loss),
        spec,
        k,
        status,
        error: None,
        quality: Some(quality),
        cv,
        loss_k: f64::NAN,
        loss_conditional: f64::NAN,
    }
}

fn propose(
    space: &SearchSpace,
    trials: &[TrialRecord],
    encoded: &[Option<(usize, Vec<Value>)>],
    settings: &TpeSettings,
    r: &mut ChaCha8Rng,
) -> ModelSpec {
    if trials.len() < settings.startup_trials {
        return space.sample_uniform(r);
    }
    let targets: Vec<Option<f64>> = trials
        .iter()
        .map(|t| Some(t.loss_conditional).filter(|v| t.status == TrialStatus::Ok && v.is_finite()))
        .collect();
    let (good, bad) = tpe::split(&targets, settings.gamma);
    let usable = |idx: &[usize]| -> Vec<&(usize, Vec<Value>)> { idx.iter().filter_map(|&i| encoded[i].as_ref()).collect() };
    let (good, bad) = (usable(&good), usable(&bad));

    let alg_good: Vec<[Value; 1]> = good.iter().map(|e| [Value::Index(e.0)]).collect();
    let alg_bad: Vec<[Value; 1]> = bad.iter().map(|e| [Value::Index(e.0)]).collect();
    let a = tpe::suggest(
        &[Dimension::Categorical(space.algorithms.len())],
        &alg_good.iter().map(|v| v.as_slice()).collect::<Vec<_>>(),
        &alg_bad.iter().map(|v| v.as_slice()).collect::<Vec<_>>(),
        settings,
        r,
    )[0]
    .index();

    let dims = space.algorithms[a].dimensions(&space.k_values);
    let own = |set: &[&(usize, Vec<Value>)]| -> Vec<Vec<Value>> {
        set.iter().filter(|e| e.0 == a).map(|e| e.1.clone()).collect()
    };
    let (g, b) = (own(&good), own(&bad));
    let x = tpe::suggest(
        &dims,
        &g.iter().map(Vec::as_slice).collect::<Vec<_>>(),
        &b.iter().map(Vec::as_slice).collect::<Vec<_>>(),
        settings,
        r,
    );
    space.decode(a, &x)
}

/// Runs the search, handing every finished trial to `sink` as it completes.
pub fn optimize_with<F>(space: &SearchSpace, m: &FeatureMatrix, cfg: &TuneConfig, mut sink: F) -> Result<TuneHistory>
where
    F: FnMut(&TrialRecord) -> Result<()>,
{
    cfg.validate()?;
    space.validate()?;
    if cfg.iterations == 0 {
        return Err(Error::Tuning("no trials".into()));
    }
    if m.state != MatrixState::Standardized {
        return Err(Error::Parameter("tuning expects a standardized matrix".into()));
    }
    let mut r = rng(cfg.seed);
    let mut trials: Vec<TrialRecord> = Vec::with_capacity(cfg.iterations);
    let mut encoded = Vec::with_capacity(cfg.iterations);
    let mut by_k = LossByK::default();
    for it in 0..cfg.iterations {
        let mut spec = propose(space, &trials, &encoded, &cfg.tpe, &mut r);
        // A deterministic setting that was already tried would only repeat
        // itself; fall back to a uniform draw.
        let deterministic = registry().get(&spec.algorithm).is_ok_and(|i| !i.stochastic);
        for _ in 0..8 {
            let repeat = trials
                .iter()
                .any(|t| t.spec.algorithm == spec.algorithm && t.spec.k == spec.k && t.spec.hyperparameters == spec.hyperparameters);
            if !(deterministic && repeat) {
                break;
            }
            spec = space.sample_uniform(&mut r);
        }
        let spec = spec.with_seed(trial_seed(cfg.seed, it));
        let mut rec = evaluate(it, spec, m, cfg);
        if let Some(k) = rec.k {
            rec.loss_k = by_k.push(k, rec.loss_x);
            rec.loss_conditional = if rec.loss_x.is_finite() {
                conditional_loss(rec.loss_x, rec.loss_k)
            } else {
                f64::INFINITY
            };
        }
        sink(&rec)?;
        encoded.push(space.encode(&rec.spec));
        trials.push(rec);
    }

    let best_trials = best_per_k(&trials, &space.k_values);
    for k in &space.k_values {
        if !best_trials.contains_key(k) {
            log::warn!("no successful trial found {k} clusters");
        }
    }
    let best = best_trials
        .into_iter()
        .map(|(k, t)| {
            let q = t.quality.as_ref().expect("successful trials carry quality");
            let stochastic = registry().get(&t.spec.algorithm).is_ok_and(|i| i.stochastic);
            let final_cv = if stochastic {
                stability_cv(&t.spec, m, &cfg.stability).map_or(f64::INFINITY, |e| e.cv)
            } else {
                0.0
            };
            BestRow {
                k,
                iteration: t.iteration,
                spec: t.spec.clone(),
                bsi: q.bsi,
                sigma_sk: q.sigma_sk,
                boundary_count: q.boundary_count,
                loss_x: t.loss_x,
                loss_conditional: t.loss_conditional,
                final_cv,
                stable: final_cv <= cfg.stability.tau,
            }
        })
        .collect();
    Ok(TuneHistory {
        weights: cfg.loss,
        trials,
        best,
    })
}

pub fn optimize(space: &SearchSpace, m: &FeatureMatrix, cfg: &TuneConfig) -> Result<TuneHistory> {
    optimize_with(space, m, cfg, |_| Ok(()))
}
