use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

/// A single hyperparameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Real(f64),
    Text(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Int(v) => Some(*v as f64),
            ParamValue::Real(v) => Some(*v),
            ParamValue::Text(_) => None,
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(v) => write!(f, "{v}"),
            ParamValue::Real(v) => write!(f, "{v}"),
            ParamValue::Text(v) => f.write_str(v),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Hyperparameters(pub BTreeMap<String, ParamValue>);

impl Hyperparameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: ParamValue) -> Self {
        self.0.insert(name.to_string(), value);
        self
    }

    pub fn real(self, name: &str, value: f64) -> Self {
        self.with(name, ParamValue::Real(value))
    }

    pub fn int(self, name: &str, value: i64) -> Self {
        self.with(name, ParamValue::Int(value))
    }

    pub fn text(self, name: &str, value: &str) -> Self {
        self.with(name, ParamValue::Text(value.to_string()))
    }

    pub fn get(&self, name: &str) -> Option<&ParamValue> {
        self.0.get(name)
    }

    pub fn f64_or(&self, name: &str, default: f64) -> Result<f64> {
        match self.0.get(name) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| Error::Parameter(format!("`{name}` must be numeric, got `{v}`"))),
        }
    }

    pub fn usize_or(&self, name: &str, default: usize) -> Result<usize> {
        let v = self.f64_or(name, default as f64)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Parameter(format!("`{name}` must be a non-negative integer, got {v}")));
        }
        Ok(v as usize)
    }

    pub fn text_or<'a>(&'a self, name: &str, default: &'a str) -> Result<&'a str> {
        match self.0.get(name) {
            None => Ok(default),
            Some(ParamValue::Text(s)) => Ok(s),
            Some(v) => Err(Error::Parameter(format!("`{name}` must be text, got `{v}`"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamValue)> {
        self.0.iter()
    }
}

impl fmt::Display for Hyperparameters {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&parts.join(";"))
    }
}

/// Search domain of one hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ParamDomain {
    /// Continuous, closed interval.
    Uniform { low: f64, high: f64 },
    /// Integers `start, start+step, …` strictly below `stop`.
    Range { start: i64, stop: i64, step: i64 },
    Choice { options: Vec<String> },
}

impl ParamDomain {
    pub fn uniform(low: f64, high: f64) -> Self {
        ParamDomain::Uniform { low, high }
    }

    pub fn range(start: i64, stop: i64, step: i64) -> Self {
        ParamDomain::Range { start, stop, step }
    }

    pub fn choice(options: &[&str]) -> Self {
        ParamDomain::Choice {
            options: options.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            ParamDomain::Uniform { low, high } => low.is_finite() && high.is_finite() && low < high,
            ParamDomain::Range { start, stop, step } => *step > 0 && start < stop,
            ParamDomain::Choice { options } => !options.is_empty(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid search domain {self:?}")))
        }
    }

    /// Grid values of a `Range` domain.
    pub fn grid(&self) -> Vec<i64> {
        match self {
            ParamDomain::Range { start, stop, step } => {
                (*start..*stop).step_by((*step).max(1) as usize).collect()
            }
            _ => Vec::new(),
        }
    }

    pub fn contains(&self, value: &ParamValue) -> bool {
        match (self, value) {
            (ParamDomain::Uniform { low, high }, v) => {
                v.as_f64().is_some_and(|x| *low <= x && x <= *high)
            }
            (ParamDomain::Range { .. }, v) => v
                .as_f64()
                .is_some_and(|x| x.fract() == 0.0 && self.grid().contains(&(x as i64))),
            (ParamDomain::Choice { options }, ParamValue::Text(s)) => options.contains(s),
            _ => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_keeps_int_and_real_apart() {
        let h = Hyperparameters::new()
            .int("n_init", 6)
            .real("m", 1.0)
            .text("core", "elkan");
        let s = serde_json::to_string(&h).unwrap();
        assert_eq!(s, r#"{"core":"elkan","m":1.0,"n_init":6}"#);
        let back: Hyperparameters = serde_json::from_str(&s).unwrap();
        assert_eq!(back, h);
    }

    #[test]
    fn range_grid_excludes_stop() {
        let d = ParamDomain::range(5, 100, 5);
        assert_eq!(d.grid().first(), Some(&5));
        assert_eq!(d.grid().last(), Some(&95));
        assert!(d.contains(&ParamValue::Int(50)));
        assert!(!d.contains(&ParamValue::Int(52)));
        assert!(!d.contains(&ParamValue::Int(100)));
        let d = ParamDomain::range(1, 100, 5);
        assert_eq!(d.grid().last(), Some(&96));
    }

    #[test]
    fn accessors_type_check() {
        let h = Hyperparameters::new().text("core", "elkan").real("x", 2.5);
        assert!(h.f64_or("core", 0.0).is_err());
        assert!(h.usize_or("x", 0).is_err());
        assert_eq!(h.f64_or("missing", 3.0).unwrap(), 3.0);
        assert_eq!(h.text_or("core", "lloyd").unwrap(), "elkan");
    }
}
