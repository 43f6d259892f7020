use super::{
    Agglomerative, Birch, ClusteringResult, Clusterer, Dbscan, FuzzyCMeans, Hyperparameters,
    KMeans, KMeansCore, Linkage, MeanShift, MiniBatchKMeans, ModelSpec, ParamDomain, Points,
};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use std::collections::BTreeMap;
use std::sync::OnceLock;

type Builder = Box<dyn Fn(&Hyperparameters) -> Result<Box<dyn Clusterer>> + Send + Sync>;

/// Registry entry: how to build an algorithm and what it can be tuned over.
pub struct AlgorithmInfo {
    pub name: &'static str,
    /// The cluster count is an input rather than an outcome.
    pub requires_k: bool,
    /// Results depend on the seed.
    pub stochastic: bool,
    /// Settings used when an algorithm is run untuned (e.g. the prescreen).
    pub defaults: Hyperparameters,
    /// Default search domain per tunable hyperparameter.
    pub domain: BTreeMap<String, ParamDomain>,
    /// Accepted hyperparameters that are not tuned.
    pub fixed: Vec<&'static str>,
    build: Builder,
}

impl AlgorithmInfo {
    pub fn new(
        name: &'static str,
        requires_k: bool,
        stochastic: bool,
        build: impl Fn(&Hyperparameters) -> Result<Box<dyn Clusterer>> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name,
            requires_k,
            stochastic,
            defaults: Hyperparameters::new(),
            domain: BTreeMap::new(),
            fixed: Vec::new(),
            build: Box::new(build),
        }
    }

    pub fn with_default(mut self, defaults: Hyperparameters) -> Self {
        self.defaults = defaults;
        self
    }

    pub fn with_domain(mut self, name: &str, domain: ParamDomain) -> Self {
        self.domain.insert(name.to_string(), domain);
        self
    }

    pub fn with_fixed(mut self, names: &[&'static str]) -> Self {
        self.fixed.extend_from_slice(names);
        self
    }

    pub fn build(&self, params: &Hyperparameters) -> Result<Box<dyn Clusterer>> {
        (self.build)(params)
    }

    /// Checks `params` names and, where a domain is declared, their range.
    pub fn validate(&self, params: &Hyperparameters) -> Result<()> {
        for (name, value) in params.iter() {
            match self.domain.get(name) {
                Some(domain) if !domain.contains(value) => {
                    return Err(Error::Parameter(format!(
                        "{}: `{name}`={value} outside its search domain",
                        self.name
                    )))
                }
                Some(_) => {}
                None if self.fixed.contains(&name.as_str()) || self.defaults.get(name).is_some() => {}
                None => {
                    return Err(Error::Parameter(format!(
                        "{}: unknown hyperparameter `{name}`",
                        self.name
                    )))
                }
            }
        }
        Ok(())
    }
}

impl std::fmt::Debug for AlgorithmInfo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AlgorithmInfo")
            .field("name", &self.name)
            .field("requires_k", &self.requires_k)
            .field("stochastic", &self.stochastic)
            .field("defaults", &self.defaults)
            .field("domain", &self.domain)
            .finish()
    }
}

#[derive(Debug, Default)]
pub struct AlgorithmRegistry {
    entries: BTreeMap<&'static str, AlgorithmInfo>,
}

impl AlgorithmRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The eight built-in algorithms.
    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        reg.register(
            AlgorithmInfo::new("kmeans_pp", true, true, |p| {
                let core: KMeansCore = p.text_or("core", "em_style")?.parse()?;
                Ok(Box::new(KMeans::new(p.usize_or("n_init", 11)?, core)))
            })
            .with_default(Hyperparameters::new().int("n_init", 11).text("core", "em_style"))
            .with_domain("n_init", ParamDomain::range(1, 100, 5))
            .with_domain("core", ParamDomain::choice(&["em_style", "elkan"])),
        );
        reg.register(
            AlgorithmInfo::new("minibatch_kmeans", true, true, |p| {
                Ok(Box::new(MiniBatchKMeans {
                    batch_size: p.usize_or("batch_size", 0)?,
                    max_steps: p.usize_or("max_steps", 100)?,
                }))
            })
            .with_fixed(&["batch_size", "max_steps"]),
        );
        reg.register(
            AlgorithmInfo::new("fuzzy_c_means", true, true, |p| {
                Ok(Box::new(FuzzyCMeans::new(p.f64_or("m", 2.0)?)?))
            })
            .with_default(Hyperparameters::new().real("m", 2.0))
            .with_domain("m", ParamDomain::uniform(1.1, 4.0))
            .with_fixed(&["tol", "max_iter"]),
        );
        reg.register(
            AlgorithmInfo::new("mean_shift", false, false, |p| {
                Ok(Box::new(MeanShift::new(p.f64_or("quantile", 0.3)?)?))
            })
            .with_default(Hyperparameters::new().real("quantile", 0.3))
            .with_domain("quantile", ParamDomain::uniform(0.1, 1.0)),
        );
        reg.register(
            AlgorithmInfo::new("ward", true, false, |p| {
                Ok(Box::new(Agglomerative::new(Linkage::Ward, connectivity(p)?)?))
            })
            .with_domain("connectivity_neighbours", ParamDomain::range(5, 100, 5)),
        );
        reg.register(
            AlgorithmInfo::new("average_linkage", true, false, |p| {
                Ok(Box::new(Agglomerative::new(Linkage::Average, connectivity(p)?)?))
            })
            .with_fixed(&["connectivity_neighbours"]),
        );
        reg.register(
            AlgorithmInfo::new("birch", true, false, |p| {
                Ok(Box::new(Birch::new(
                    p.f64_or("threshold", 0.5)?,
                    p.usize_or("branching_factor", 50)?,
                )?))
            })
            .with_default(Hyperparameters::new().real("threshold", 0.5).int("branching_factor", 50))
            .with_domain("threshold", ParamDomain::uniform(0.1, 1.0))
            .with_domain("branching_factor", ParamDomain::range(10, 100, 10)),
        );
        reg.register(
            AlgorithmInfo::new("dbscan", false, false, |p| {
                Ok(Box::new(Dbscan::new(p.f64_or("eps", 0.5)?, p.usize_or("min_pts", 5)?)?))
            })
            .with_default(Hyperparameters::new().real("eps", 0.5).int("min_pts", 5))
            .with_domain("eps", ParamDomain::uniform(0.1, 3.0))
            .with_domain("min_pts", ParamDomain::range(2, 21, 1)),
        );
        reg
    }

    pub fn register(&mut self, info: AlgorithmInfo) {
        self.entries.insert(info.name, info);
    }

    pub fn get(&self, name: &str) -> Result<&AlgorithmInfo> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownAlgorithm(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<&AlgorithmInfo> {
        let info = self.get(&spec.algorithm)?;
        if info.requires_k {
            match spec.k {
                None => return Err(Error::MissingK(spec.algorithm.clone())),
                Some(k) if k < 2 => {
                    return Err(Error::Parameter(format!("k must be at least 2, got {k}")))
                }
                _ => {}
            }
        }
        info.validate(&spec.hyperparameters)?;
        Ok(info)
    }

    /// Fits a validated spec. Labels are canonical (first-appearance order).
    pub fn fit(&self, spec: &ModelSpec, m: &FeatureMatrix) -> Result<ClusteringResult> {
        let info = self.validate(spec)?;
        if m.nrows() == 0 {
            return Err(Error::EmptyInput("no rows to cluster".into()));
        }
        let clusterer = info.build(&spec.hyperparameters)?;
        let view = m.view();
        let points = Points::from_view(&view);
        let k = if info.requires_k { spec.k } else { None };
        let mut result = clusterer.fit(points, k, spec.seed)?;
        result.canonicalize(k);
        Ok(result)
    }
}

fn connectivity(p: &Hyperparameters) -> Result<Option<usize>> {
    p.get("connectivity_neighbours")
        .map(|_| p.usize_or("connectivity_neighbours", 0))
        .transpose()
}

/// The shared built-in registry.
pub fn registry() -> &'static AlgorithmRegistry {
    static REGISTRY: OnceLock<AlgorithmRegistry> = OnceLock::new();
    REGISTRY.get_or_init(AlgorithmRegistry::builtin)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_has_eight_algorithms() {
        let names: Vec<_> = registry().names().collect();
        assert_eq!(
            names,
            vec![
                "average_linkage",
                "birch",
                "dbscan",
                "fuzzy_c_means",
                "kmeans_pp",
                "mean_shift",
                "minibatch_kmeans",
                "ward"
            ]
        );
    }

    #[test]
    fn spec_errors() {
        let m = FeatureMatrix::from_rows(ndarray::array![[0.0], [1.0], [2.0]]).unwrap();
        let err = registry().fit(&ModelSpec::new("spectral", Some(2)), &m).unwrap_err();
        assert!(matches!(err, Error::UnknownAlgorithm(_)));
        let err = registry().fit(&ModelSpec::new("kmeans_pp", None), &m).unwrap_err();
        assert!(matches!(err, Error::MissingK(_)));
        let spec = ModelSpec::new("birch", Some(2))
            .with_params(Hyperparameters::new().real("threshold", 5.0));
        assert!(matches!(registry().fit(&spec, &m), Err(Error::Parameter(_))));
        let spec = ModelSpec::new("birch", Some(2)).with_params(Hyperparameters::new().real("bogus", 1.0));
        assert!(matches!(registry().fit(&spec, &m), Err(Error::Parameter(_))));
    }

    #[test]
    fn defaults_lie_in_domains() {
        for name in registry().names() {
            let info = registry().get(name).unwrap();
            info.validate(&info.defaults).unwrap();
            for d in info.domain.values() {
                d.validate().unwrap();
            }
        }
    }
}
