//! From a partition to risk levels: severity ordering of clusters, vehicle
//! labels, indicator thresholds between adjacent levels, cluster flows across
//! k, consensus voting, per-lane risk profiles and letter-value summaries.

use crate::clustering::ClusteringResult;
use crate::error::{Error, Result};
use crate::features::{safer_when_higher, Feature, FeatureMatrix};
use crate::trajectory::{VehicleTrack, FRAME_SECONDS};
use pathfinding::prelude::{kuhn_munkres, Matrix};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::io::Write;

/// Scores closer than this are treated as tied.
const SCORE_TIE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityOrder {
    /// Risk level of each cluster index (0 = safest).
    pub cluster_to_level: Vec<usize>,
    /// Severity score of each cluster index.
    pub scores: Vec<f64>,
}

fn column_means_by_cluster(m: &FeatureMatrix, labels: &[usize], col: usize, k: usize) -> Vec<f64> {
    let mut sum = vec![0.0; k];
    let mut n = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        sum[l] += m.values[[i, col]];
        n[l] += 1;
    }
    sum.iter().zip(&n).map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN }).collect()
}

/// Orders clusters by severity: the mean over `features` of each cluster's
/// mean z-score, with safety-margin features (TTC, PSD) negated so that
/// larger always means riskier. Ties go to the lower CPI.m2.max mean, then
/// to the larger cluster.
pub fn order_clusters<S: AsRef<str>>(labels: &[usize], m: &FeatureMatrix, features: &[S]) -> Result<SeverityOrder> {
    if labels.len() != m.nrows() {
        return Err(Error::Mismatch(format!("{} labels for {} rows", labels.len(), m.nrows())));
    }
    if features.is_empty() {
        return Err(Error::Parameter("no features to score severity with".into()));
    }
    let k = labels.iter().copied().max().map_or(0, |x| x + 1);
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    let stats = m.column_stats();
    let mut scores = vec![0.0; k];
    for f in features {
        let col = m
            .column_index(f.as_ref())
            .ok_or_else(|| Error::MissingColumn(f.as_ref().to_string()))?;
        let st = &stats[col];
        let sign = if safer_when_higher(f.as_ref()) { -1.0 } else { 1.0 };
        for (c, mean) in column_means_by_cluster(m, labels, col, k).into_iter().enumerate() {
            let z = if st.std > 0.0 { (mean - st.mean) / st.std } else { 0.0 };
            scores[c] += sign * z / features.len() as f64;
        }
    }
    let cpi = m
        .column_index(Feature::CpiM2Max.name())
        .map(|col| column_means_by_cluster(m, labels, col, k));
    let mut order: Vec<usize> = (0..k).filter(|&c| sizes[c] > 0).collect();
    order.sort_by(|&a, &b| {
        let by_score = if (scores[a] - scores[b]).abs() <= SCORE_TIE {
            Ordering::Equal
        } else {
            scores[a].total_cmp(&scores[b])
        };
        by_score
            .then_with(|| cpi.as_ref().map_or(Ordering::Equal, |c| c[a].total_cmp(&c[b])))
            .then(sizes[b].cmp(&sizes[a]))
    });
    let mut cluster_to_level = vec![usize::MAX; k];
    for (level, &c) in order.iter().enumerate() {
        cluster_to_level[c] = level;
    }
    Ok(SeverityOrder {
        cluster_to_level,
        scores,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceRatio {
    #[serde(with = "crate::serde_float")]
    pub exact: f64,
    /// The exact ratio rounded down.
    pub reported: u64,
}

/// Size of the largest level over the total size of the high-risk levels.
/// Undefined ratios (one level, or no high-risk rows) are reported as 1.
pub fn imbalance_ratio(counts: &[usize], high_risk: &[usize]) -> ImbalanceRatio {
    let majority = counts.iter().copied().max().unwrap_or(0);
    let minority: usize = high_risk.iter().filter_map(|&l| counts.get(l)).sum();
    if counts.len() < 2 || minority == 0 {
        log::warn!("imbalance ratio is undefined for these levels; reporting 1");
        return ImbalanceRatio { exact: 1.0, reported: 1 };
    }
    let exact = majority as f64 / minority as f64;
    ImbalanceRatio {
        exact,
        reported: exact.floor() as u64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskLabelMap {
    pub vehicle_ids: Vec<i64>,
    pub cluster_to_level: Vec<usize>,
    /// Risk level per vehicle.
    pub levels: Vec<usize>,
    /// Vehicles per level.
    pub counts: Vec<usize>,
    pub high_risk: Vec<usize>,
    pub imbalance: ImbalanceRatio,
}

impl RiskLabelMap {
    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["vehicle_id", "risk_level"])?;
        for (id, l) in self.vehicle_ids.iter().zip(&self.levels) {
            w.write_record([id.to_string(), l.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<label writer>", e))?;
        Ok(())
    }
}

/// Levels whose mean of any CPI column is positive.
fn cpi_levels(m: &FeatureMatrix, levels: &[usize], k: usize) -> Vec<usize> {
    let cols: Vec<usize> = m
        .feature_names
        .iter()
        .enumerate()
        .filter(|(_, n)| Feature::from_name(n).is_some_and(Feature::is_cpi))
        .map(|(j, _)| j)
        .collect();
    let means: Vec<Vec<f64>> = cols.iter().map(|&j| column_means_by_cluster(m, levels, j, k)).collect();
    (0..k).filter(|&l| means.iter().any(|c| c[l] > 0.0)).collect()
}

/// Assigns every vehicle the level of its cluster. Without an explicit
/// `high_risk` set, the levels with a positive mean CPI are used, or the
/// most severe level when none has one.
pub fn label_dataset(
    result: &ClusteringResult,
    order: &SeverityOrder,
    m: &FeatureMatrix,
    high_risk: Option<&[usize]>,
) -> Result<RiskLabelMap> {
    if result.labels.len() != m.nrows() {
        return Err(Error::Mismatch(format!(
            "{} labels for {} rows",
            result.labels.len(),
            m.nrows()
        )));
    }
    let k = order.cluster_to_level.iter().filter(|&&l| l != usize::MAX).count();
    let levels: Vec<usize> = result
        .labels
        .iter()
        .map(|&c| order.cluster_to_level.get(c).copied().filter(|&l| l < k))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Mismatch("a label has no risk level".into()))?;
    let mut counts = vec![0usize; k];
    levels.iter().for_each(|&l| counts[l] += 1);
    let high_risk = match high_risk {
        Some(h) => {
            if let Some(&bad) = h.iter().find(|&&l| l >= k) {
                return Err(Error::Parameter(format!("high-risk level {bad} does not exist (k={k})")));
            }
            h.to_vec()
        }
        None => {
            let found = cpi_levels(m, &levels, k);
            if found.is_empty() && k > 1 {
                log::warn!("no level has a positive CPI; treating the most severe level as high risk");
                vec![k - 1]
            } else {
                found
            }
        }
    };
    Ok(RiskLabelMap {
        vehicle_ids: m.vehicle_ids.clone(),
        cluster_to_level: order.cluster_to_level.clone(),
        imbalance: imbalance_ratio(&counts, &high_risk),
        levels,
        counts,
        high_risk,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl LevelStats {
    pub fn of(values: &[f64]) -> LevelStats {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        LevelStats {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// The same summary after negating the values.
    fn negated(self) -> LevelStats {
        LevelStats {
            mean: -self.mean,
            std: self.std,
            min: -self.max,
            max: -self.min,
        }
    }
}

/// Share of the joint range of two levels covered by both, in `[0, 1]`.
pub fn overlap_fraction(lower: (f64, f64), upper: (f64, f64)) -> f64 {
    let span = upper.1 - lower.0;
    let shared = lower.1 - upper.0;
    if span > 0.0 {
        (shared / span).clamp(0.0, 1.0)
    } else if shared >= 0.0 {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub feature: String,
    pub lower_level: usize,
    pub upper_level: usize,
    pub lower: LevelStats,
    pub upper: LevelStats,
    pub overlap: f64,
    pub threshold: f64,
}

/// Picks, among `(feature, lower stats, upper stats)` candidates for one pair
/// of adjacent levels, the feature whose ranges overlap least (the first on
/// ties) and returns it with its threshold, the maximum of the lower level.
/// Safety-margin features are compared on negated values, so their
/// threshold is the minimum of the lower level.
pub fn threshold_rule(candidates: &[(String, LevelStats, LevelStats)]) -> Option<(usize, f64, f64)> {
    let mut best: Option<(usize, f64, f64)> = None;
    for (i, (name, lo, hi)) in candidates.iter().enumerate() {
        let flip = safer_when_higher(name);
        let (lo, hi) = if flip { (lo.negated(), hi.negated()) } else { (*lo, *hi) };
        let overlap = overlap_fraction((lo.min, lo.max), (hi.min, hi.max));
        if best.is_none_or(|b| overlap < b.1) {
            let threshold = if flip { -lo.max } else { lo.max };
            best = Some((i, overlap, threshold));
        }
    }
    best
}

/// One threshold per pair of adjacent levels, on the clearest-separating
/// feature among `features`. `m` should be on the reporting (rectified) scale.
pub fn calibrate_thresholds<S: AsRef<str>>(
    labels: &RiskLabelMap,
    m: &FeatureMatrix,
    features: &[S],
) -> Result<Vec<ThresholdRow>> {
    if labels.k() < 2 {
        return Err(Error::Parameter("thresholds need at least two risk levels".into()));
    }
    if labels.levels.len() != m.nrows() {
        return Err(Error::Mismatch("labels and matrix differ in length".into()));
    }
    let cols: Vec<usize> = features
        .iter()
        .map(|f| m.column_index(f.as_ref()).ok_or_else(|| Error::MissingColumn(f.as_ref().to_string())))
        .collect::<Result<_>>()?;
    let stats = |level: usize, col: usize| -> LevelStats {
        let v: Vec<f64> = (0..m.nrows())
            .filter(|&i| labels.levels[i] == level)
            .map(|i| m.values[[i, col]])
            .collect();
        LevelStats::of(&v)
    };
    let mut rows = Vec::new();
    for lower in 0..labels.k() - 1 {
        let candidates: Vec<(String, LevelStats, LevelStats)> = cols
            .iter()
            .zip(features)
            .map(|(&c, f)| (f.as_ref().to_string(), stats(lower, c), stats(lower + 1, c)))
            .collect();
        if let Some((i, overlap, threshold)) = threshold_rule(&candidates) {
            let (feature, lo, hi) = candidates[i].clone();
            rows.push(ThresholdRow {
                feature,
                lower_level: lower,
                upper_level: lower + 1,
                lower: lo,
                upper: hi,
                overlap,
                threshold,
            });
        }
    }
    Ok(rows)
}

pub fn write_thresholds_csv<W: Write>(writer: W, rows: &[ThresholdRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "feature",
        "lower_level",
        "upper_level",
        "lower_mean",
        "upper_mean",
        "lower_std",
        "upper_std",
        "lower_min",
        "lower_max",
        "upper_min",
        "upper_max",
        "overlap",
        "threshold",
    ])?;
    for r in rows {
        let mut rec = vec![r.feature.clone(), r.lower_level.to_string(), r.upper_level.to_string()];
        rec.extend(
            [
                r.lower.mean,
                r.upper.mean,
                r.lower.std,
                r.upper.std,
                r.lower.min,
                r.lower.max,
                r.upper.min,
                r.upper.max,
                r.overlap,
                r.threshold,
            ]
            .iter()
            .map(f64::to_string),
        );
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<threshold writer>", e))?;
    Ok(())
}

/// Risk levels of the same vehicles at one k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub k: usize,
    pub vehicle_ids: Vec<i64>,
    pub levels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SankeyEdge {
    pub from_k: usize,
    pub to_k: usize,
    pub from_level: usize,
    pub to_level: usize,
    pub count: usize,
}

/// Vehicle flows between the levels of consecutive partitions.
pub fn sankey_flows(partitions: &[Partition]) -> Result<Vec<SankeyEdge>> {
    if partitions.len() < 2 {
        return Err(Error::Parameter("flows need at least two partitions".into()));
    }
    let mut edges = Vec::new();
    for pair in partitions.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.vehicle_ids.len() != a.levels.len() || b.vehicle_ids.len() != b.levels.len() {
            return Err(Error::Mismatch("partition ids and levels differ in length".into()));
        }
        let lookup: HashMap<i64, usize> = b.vehicle_ids.iter().copied().zip(b.levels.iter().copied()).collect();
        if lookup.len() != a.vehicle_ids.len() {
            return Err(Error::Mismatch(format!("partitions at k={} and k={} cover different vehicles", a.k, b.k)));
        }
        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (id, &from) in a.vehicle_ids.iter().zip(&a.levels) {
            let to = *lookup.get(id).ok_or_else(|| {
                Error::Mismatch(format!("vehicle {id} is missing from the partition at k={}", b.k))
            })?;
            *counts.entry((from, to)).or_default() += 1;
        }
        edges.extend(counts.into_iter().map(|((from_level, to_level), count)| SankeyEdge {
            from_k: a.k,
            to_k: b.k,
            from_level,
            to_level,
            count,
        }));
    }
    Ok(edges)
}

pub fn write_sankey_csv<W: Write>(writer: W, edges: &[SankeyEdge]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for e in edges {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io("<sankey writer>", e))?;
    Ok(())
}

/// Relabels `labels` to agree as much as possible with `reference`
/// (optimal one-to-one matching on the confusion matrix).
pub fn align_labels(labels: &[usize], reference: &[usize], k: usize) -> Vec<usize> {
    let mut overlap = vec![vec![0i64; k]; k];
    for (&a, &r) in labels.iter().zip(reference) {
        overlap[a][r] += 1;
    }
    let weights = Matrix::from_rows(overlap).expect("square confusion matrix");
    let (_, assignment) = kuhn_munkres(&weights);
    labels.iter().map(|&l| assignment[l]).collect()
}

/// Per-row majority vote over partitions aligned to the first one. Ties go
/// to the label of the highest-`bsi` partition among the tied labels.
pub fn ensemble_vote(results: &[ClusteringResult], bsi: &[f64]) -> Result<Vec<usize>> {
    if results.len() < 3 {
        return Err(Error::Parameter("voting needs at least three partitions".into()));
    }
    if bsi.len() != results.len() {
        return Err(Error::Mismatch("one bSI per partition is required".into()));
    }
    let n = results[0].labels.len();
    let k = results[0].k_found;
    for r in results {
        if r.labels.len() != n {
            return Err(Error::Mismatch("partitions cover different numbers of rows".into()));
        }
        if r.k_found != k {
            return Err(Error::Mismatch(format!("partitions have different k ({} and {k})", r.k_found)));
        }
    }
    let reference = &results[0].labels;
    let aligned: Vec<Vec<usize>> = results.iter().map(|r| align_labels(&r.labels, reference, k)).collect();
    let mut by_quality: Vec<usize> = (0..results.len()).collect();
    by_quality.sort_by(|&a, &b| bsi[b].total_cmp(&bsi[a]));
    Ok((0..n)
        .map(|i| {
            let mut votes = vec![0usize; k];
            aligned.iter().for_each(|a| votes[a[i]] += 1);
            let top = *votes.iter().max().expect("k > 0");
            by_quality
                .iter()
                .map(|&r| aligned[r][i])
                .find(|&l| votes[l] == top)
                .expect("some partition voted for the top label")
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub lane_id: i64,
    pub vehicle_id: i64,
    /// Seconds since frame 0.
    pub time: f64,
    /// Longitudinal position in metres.
    pub position: f64,
    pub risk_level: usize,
}

/// Every trajectory sample of a labelled vehicle with that vehicle's risk
/// level, sorted by lane, then time, then vehicle.
pub fn risk_profile(labels: &RiskLabelMap, tracks: &[VehicleTrack]) -> Vec<ProfileRow> {
    let level: HashMap<i64, usize> = labels.vehicle_ids.iter().copied().zip(labels.levels.iter().copied()).collect();
    let mut rows: Vec<ProfileRow> = Vec::new();
    let mut unlabelled = 0;
    for t in tracks {
        let Some(&risk_level) = level.get(&t.vehicle_id) else {
            unlabelled += 1;
            continue;
        };
        rows.extend(t.samples.iter().map(|s| ProfileRow {
            lane_id: s.lane_id,
            vehicle_id: t.vehicle_id,
            time: s.frame_index as f64 * FRAME_SECONDS,
            position: s.position,
            risk_level,
        }));
    }
    if unlabelled > 0 {
        log::warn!("{unlabelled} tracks have no risk label and are left out of the profile");
    }
    rows.sort_by(|a, b| {
        a.lane_id
            .cmp(&b.lane_id)
            .then(a.time.total_cmp(&b.time))
            .then(a.vehicle_id.cmp(&b.vehicle_id))
    });
    rows
}

pub fn write_profile_csv<W: Write>(writer: W, rows: &[ProfileRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<profile writer>", e))?;
    Ok(())
}

/// Linearly interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LetterValue {
    /// Tail probability (1/4, 1/8, …).
    pub tail: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LetterValues {
    pub level: usize,
    pub feature: String,
    pub count: usize,
    pub median: f64,
    pub letters: Vec<LetterValue>,
}

/// Median and `depth` pairs of tail-halving quantiles per level and feature.
pub fn letter_values(m: &FeatureMatrix, levels: &[usize], depth: usize) -> Result<Vec<LetterValues>> {
    if depth == 0 {
        return Err(Error::Parameter("letter-value depth must be at least 1".into()));
    }
    if levels.len() != m.nrows() {
        return Err(Error::Mismatch("levels and matrix differ in length".into()));
    }
    let k = levels.iter().copied().max().map_or(0, |x| x + 1);
    let mut out = Vec::new();
    for level in 0..k {
        let rows: Vec<usize> = (0..m.nrows()).filter(|&i| levels[i] == level).collect();
        if rows.is_empty() {
            continue;
        }
        for (j, name) in m.feature_names.iter().enumerate() {
            let mut v: Vec<f64> = rows.iter().map(|&i| m.values[[i, j]]).collect();
            v.sort_by(f64::total_cmp);
            let letters = (1..=depth)
                .map(|d| {
                    let tail = 0.5f64.powi(d as i32 + 1);
                    LetterValue {
                        tail,
                        lower: quantile(&v, tail),
                        upper: quantile(&v, 1.0 - tail),
                    }
                })
                .collect();
            out.push(LetterValues {
                level,
                feature: name.clone(),
                count: v.len(),
                median: quantile(&v, 0.5),
                letters,
            });
        }
    }
    Ok(out)
}

pub fn write_letter_values_csv<W: Write>(writer: W, values: &[LetterValues]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["level", "feature", "count", "tail", "lower", "upper"])?;
    for lv in values {
        let head = [lv.level.to_string(), lv.feature.clone(), lv.count.to_string()];
        let mut rec = head.to_vec();
        rec.extend(["0.5".to_string(), lv.median.to_string(), lv.median.to_string()]);
        w.write_record(&rec)?;
        for l in &lv.letters {
            let mut rec = head.to_vec();
            rec.extend([l.tail.to_string(), l.lower.to_string(), l.upper.to_string()]);
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io("<letter-value writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::MatrixState;
    use crate::trajectory::TrajectorySample;
    use ndarray::{array, Array2};

    fn matrix(names: &[&str], values: Array2<f64>) -> FeatureMatrix {
        let ids = (0..values.nrows() as i64).collect();
        FeatureMatrix::new(ids, names.iter().map(|s| s.to_string()).collect(), values, MatrixState::Rectified).unwrap()
    }

    #[test]
    fn all_zero_cluster_is_safest() {
        let m = matrix(
            &["TET.t1.max", "TTC.min"],
            array![[0.3, 2.0], [0.0, 7.95], [0.5, 1.0], [0.0, 7.95], [0.4, 3.0]],
        );
        let o = order_clusters(&[0, 1, 2, 1, 0], &m, &["TET.t1.max", "TTC.min"]).unwrap();
        assert_eq!(o.cluster_to_level[1], 0);
        assert_eq!(o.cluster_to_level, vec![1, 0, 2]);
    }

    #[test]
    fn ordering_ignores_cluster_numbering() {
        let m = matrix(&["TIT.t3.max"], array![[0.1], [0.9], [0.5], [0.1], [0.9]]);
        let a = order_clusters(&[0, 1, 2, 0, 1], &m, &["TIT.t3.max"]).unwrap();
        let b = order_clusters(&[2, 0, 1, 2, 0], &m, &["TIT.t3.max"]).unwrap();
        assert_eq!(a.cluster_to_level, vec![0, 2, 1]);
        assert_eq!(b.cluster_to_level, vec![2, 1, 0]);
    }

    #[test]
    fn identical_clusters_tie_on_size() {
        let m = matrix(&["TET.t1.max"], array![[0.2], [0.2], [0.2], [0.2], [0.2]]);
        let o = order_clusters(&[0, 1, 1, 0, 1], &m, &["TET.t1.max"]).unwrap();
        assert_eq!(o.cluster_to_level, vec![1, 0]);
    }

    #[test]
    fn reported_imbalance_ratio() {
        let ir = imbalance_ratio(&[2725, 872, 810, 591, 66, 18], &[4, 5]);
        assert_eq!(ir.reported, 32);
        assert!((ir.exact - 2725.0 / 84.0).abs() < 1e-12);
        assert_eq!(imbalance_ratio(&[10], &[0]).reported, 1);
        assert_eq!(imbalance_ratio(&[5, 5], &[1]).exact, 1.0);
    }

    #[test]
    fn labels_use_cpi_levels_by_default() {
        let m = matrix(&["TET.t1.max", "CPI.m2.max"], array![[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.6, 0.0], [0.9, 0.5]]);
        let result = ClusteringResult::from_labels(vec![0, 0, 0, 1, 2]);
        let o = order_clusters(&result.labels, &m, &["TET.t1.max", "CPI.m2.max"]).unwrap();
        let l = label_dataset(&result, &o, &m, None).unwrap();
        assert_eq!(l.counts, vec![3, 1, 1]);
        assert_eq!(l.high_risk, vec![2]);
        assert_eq!(l.imbalance.reported, 3);
        assert_eq!(l.levels, vec![0, 0, 0, 1, 2]);
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(overlap_fraction((0.0, 1.0), (2.0, 3.0)), 0.0);
        assert_eq!(overlap_fraction((0.0, 1.0), (0.0, 1.0)), 1.0);
        assert!((overlap_fraction((0.05, 0.74), (0.73, 1.74)) - 0.01 / 1.69).abs() < 1e-12);
    }

    #[test]
    fn threshold_takes_clearest_feature() {
        let s = |min: f64, max: f64| LevelStats { mean: 0.0, std: 0.0, min, max };
        let cands = vec![
            ("a".to_string(), s(0.0, 1.0), s(0.0, 1.0)),
            ("b".to_string(), s(0.0, 1.0), s(2.0, 3.0)),
        ];
        assert_eq!(threshold_rule(&cands), Some((1, 0.0, 1.0)));
        let safety = vec![("TTC.min".to_string(), s(4.0, 7.95), s(1.0, 4.5))];
        let (_, overlap, t) = threshold_rule(&safety).unwrap();
        assert_eq!(t, 4.0);
        assert!(overlap > 0.0);
    }

    #[test]
    fn calibrated_threshold_on_rows() {
        let m = matrix(&["TIT.t3.max", "PSD.min"], array![[0.05, 1.0], [0.74, 0.2], [0.73, 1.0], [1.74, 0.1]]);
        let labels = RiskLabelMap {
            vehicle_ids: m.vehicle_ids.clone(),
            cluster_to_level: vec![0, 1],
            levels: vec![0, 0, 1, 1],
            counts: vec![2, 2],
            high_risk: vec![1],
            imbalance: imbalance_ratio(&[2, 2], &[1]),
        };
        let rows = calibrate_thresholds(&labels, &m, &["TIT.t3.max", "PSD.min"]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].feature, "TIT.t3.max");
        assert_eq!(rows[0].threshold, 0.74);
    }

    fn part(k: usize, levels: Vec<usize>) -> Partition {
        Partition {
            k,
            vehicle_ids: (0..levels.len() as i64).collect(),
            levels,
        }
    }

    #[test]
    fn sankey_refinement() {
        let edges = sankey_flows(&[part(2, vec![0, 0, 0, 1]), part(3, vec![0, 1, 0, 2])]).unwrap();
        let count = |f, t| edges.iter().find(|e| e.from_level == f && e.to_level == t).map_or(0, |e| e.count);
        assert_eq!(count(0, 0) + count(0, 1), 3);
        assert_eq!(count(1, 2), 1);
        assert_eq!(edges.iter().map(|e| e.count).sum::<usize>(), 4);
        let same = sankey_flows(&[part(2, vec![0, 1, 1]), part(2, vec![0, 1, 1])]).unwrap();
        assert!(same.iter().all(|e| e.from_level == e.to_level));
        let mut other = part(2, vec![0, 1, 1]);
        other.vehicle_ids[2] = 99;
        assert!(sankey_flows(&[part(2, vec![0, 1, 1]), other]).is_err());
    }

    #[test]
    fn voting() {
        let r = |l: Vec<usize>| ClusteringResult::from_labels(l);
        let base = vec![0, 0, 1, 1, 2, 2];
        let permuted = vec![2, 2, 0, 0, 1, 1];
        let votes = ensemble_vote(&[r(base.clone()), r(base.clone()), r(permuted)], &[0.5; 3]).unwrap();
        assert_eq!(votes, base);
        let odd = vec![0, 0, 1, 1, 2, 1];
        let votes = ensemble_vote(&[r(base.clone()), r(odd.clone()), r(base.clone())], &[0.5; 3]).unwrap();
        assert_eq!(votes, base);
        let again = ensemble_vote(&[r(votes.clone()), r(votes.clone()), r(votes.clone())], &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(again, votes);
        assert!(ensemble_vote(&[r(base.clone()), r(vec![0, 0, 1, 1, 1, 1]), r(base)], &[0.5; 3]).is_err());
    }

    fn track(id: i64, lane: i64, frames: i64) -> VehicleTrack {
        VehicleTrack {
            vehicle_id: id,
            length: 4.0,
            samples: (0..frames)
                .map(|f| TrajectorySample {
                    frame_index: f,
                    position: f as f64,
                    velocity: 10.0,
                    lane_id: lane,
                    preceding_vehicle_id: None,
                })
                .collect(),
        }
    }

    #[test]
    fn profile_rows() {
        let labels = RiskLabelMap {
            vehicle_ids: vec![7, 8],
            cluster_to_level: vec![0, 1],
            levels: vec![1, 0],
            counts: vec![1, 1],
            high_risk: vec![1],
            imbalance: imbalance_ratio(&[1, 1], &[1]),
        };
        let rows = risk_profile(&labels, &[track(8, 2, 4), track(7, 1, 10)]);
        assert_eq!(rows.len(), 14);
        assert!(rows[..10].iter().all(|r| r.lane_id == 1 && r.risk_level == 1));
        assert!(rows[10..].iter().all(|r| r.lane_id == 2 && r.risk_level == 0));
        assert!((rows[3].time - 0.3).abs() < 1e-12);
    }

    #[test]
    fn letter_value_ladders() {
        let m = matrix(&["x"], Array2::from_shape_vec((5, 1), vec![4.0, 0.0, 2.0, 1.0, 3.0]).unwrap());
        let lv = letter_values(&m, &[0; 5], 1).unwrap();
        assert_eq!(lv[0].median, 2.0);
        assert_eq!((lv[0].letters[0].lower, lv[0].letters[0].upper), (1.0, 3.0));
        let constant = matrix(&["x"], Array2::from_elem((6, 1), 0.7));
        let lv = letter_values(&constant, &[0; 6], 3).unwrap();
        assert!(lv[0].letters.iter().all(|l| l.lower == 0.7 && l.upper == 0.7));
        assert!(letter_values(&constant, &[0; 6], 0).is_err());
    }
}
