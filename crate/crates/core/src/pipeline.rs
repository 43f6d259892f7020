//! End-to-end driver. Each stage reads its inputs from the work directory,
//! writes its artifacts there and records their SHA-256 hashes in
//! `manifest.json`; with `resume`, a stage whose inputs and settings hash the
//! same as in the previous manifest (and whose artifacts are intact) is
//! skipped.

use crate::autotune::{
    best_per_k, optimize_with, prescreen, read_trials_jsonl, LossWeights, ScreenReport, SearchSpace, TpeSettings,
    TrialRecord, TrialStatus, TuneConfig, TuneHistory,
};
use crate::clustering::{registry, ClusteringResult, ModelSpec, ParamDomain};
use crate::decoding::{
    calibrate_thresholds, ensemble_vote, label_dataset, letter_values, order_clusters, risk_profile, sankey_flows,
    write_letter_values_csv, write_profile_csv, write_sankey_csv, write_thresholds_csv, LetterValues, Partition,
    RiskLabelMap, SankeyEdge, ThresholdRow,
};
use crate::error::{Error, Result};
use crate::evaluation::{write_silhouettes_csv, ClusterWeights, QualityReport, QualitySummary, StabilityConfig};
use crate::features::{ColumnStats, FeatureMatrix, MatrixState};
use crate::indicators::{extract_features, rectify, standardize, IndicatorConfig};
use crate::selection::{elimination_importance, select_features, FeatureSelection, ImportanceTable};
use crate::trajectory::{
    build_conflict_series, load_tracks, parse_ngsim, save_tracks, smooth_tracks, ColumnMap, LengthUnit, VehicleTrack,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const MANIFEST: &str = "manifest.json";

/// Stage names in execution order.
pub const STAGES: [&str; 8] = ["ingest", "features", "rectify", "screen", "select", "reduce", "tune", "decode"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub path: PathBuf,
    pub unit: LengthUnit,
    pub columns: ColumnMap,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("trajectories.csv"),
            unit: LengthUnit::Feet,
            columns: ColumnMap::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingConfig {
    /// Savitzky-Golay window in frames (odd).
    pub window: usize,
    pub poly_order: usize,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            window: 21,
            poly_order: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairingConfig {
    /// Smallest bumper-to-bumper gap in metres; smaller gaps are clamped.
    pub min_gap_m: f64,
}

impl Default for PairingConfig {
    fn default() -> Self {
        Self { min_gap_m: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScreenConfig {
    pub algorithms: Vec<String>,
    pub k_values: Vec<usize>,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        Self {
            algorithms: registry().names().map(String::from).collect(),
            k_values: (3..=9).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Cluster count given to the k-demanding models whose reliance on each
    /// feature is measured.
    pub k: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { k: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub k_values: Vec<usize>,
    /// Replacement search domains, by algorithm then hyperparameter.
    pub domains: BTreeMap<String, BTreeMap<String, ParamDomain>>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            k_values: (3..=9).collect(),
            domains: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneSection {
    pub iterations: usize,
    pub loss: LossWeights,
    pub tpe: TpeSettings,
    pub tune_replicates: usize,
}

impl Default for TuneSection {
    fn default() -> Self {
        let d = TuneConfig::default();
        Self {
            iterations: d.iterations,
            loss: d.loss,
            tpe: d.tpe,
            tune_replicates: d.tune_replicates,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Number of risk levels; read off the per-k loss curve by the analyst.
    pub k: usize,
    /// Levels counted as high risk in the imbalance ratio. When absent, the
    /// levels with a positive mean CPI are used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub high_risk: Option<Vec<usize>>,
    pub letter_depth: usize,
    /// When at least 3, the final labels are a majority vote over this many
    /// of the best trials at `k`; 0 uses the single best trial.
    pub ensemble: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            k: 6,
            high_risk: None,
            letter_depth: 3,
            ensemble: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Parameter("decode.k must be at least 2".into()));
        }
        if self.letter_depth == 0 {
            return Err(Error::Parameter("decode.letter_depth must be at least 1".into()));
        }
        if self.ensemble != 0 && self.ensemble < 3 {
            return Err(Error::Parameter("decode.ensemble must be 0 or at least 3".into()));
        }
        if let Some(h) = &self.high_risk {
            if let Some(&l) = h.iter().find(|&&l| l >= self.k) {
                return Err(Error::Parameter(format!("high-risk level {l} does not exist for k={}", self.k)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub workdir: PathBuf,
    pub seed: u64,
    pub input: InputConfig,
    pub smoothing: SmoothingConfig,
    pub pairing: PairingConfig,
    pub indicators: IndicatorConfig,
    /// Replicate settings shared by the prescreen and the final check of the
    /// tuned models (τ, β, T, cluster weights).
    pub stability: StabilityConfig,
    pub screen: ScreenConfig,
    pub selection: SelectionConfig,
    pub search: SearchConfig,
    pub tune: TuneSection,
    pub decode: DecodeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            workdir: PathBuf::from("autocluster-run"),
            seed: 0,
            input: InputConfig::default(),
            smoothing: SmoothingConfig::default(),
            pairing: PairingConfig::default(),
            indicators: IndicatorConfig::default(),
            stability: StabilityConfig::default(),
            screen: ScreenConfig::default(),
            selection: SelectionConfig::default(),
            search: SearchConfig::default(),
            tune: TuneSection::default(),
            decode: DecodeConfig::default(),
        }
    }
}

fn check_k_values(name: &str, ks: &[usize]) -> Result<()> {
    if ks.is_empty() {
        return Err(Error::Parameter(format!("{name} is empty")));
    }
    if ks.iter().any(|&k| k < 2) {
        return Err(Error::Parameter(format!("{name} values must be at least 2")));
    }
    if ks.iter().collect::<BTreeSet<_>>().len() != ks.len() {
        return Err(Error::Parameter(format!("{name} has repeated values")));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.smoothing;
        if s.window % 2 == 0 || s.window <= s.poly_order {
            return Err(Error::Parameter(
                "smoothing.window must be odd and larger than smoothing.poly_order".into(),
            ));
        }
        if !(self.pairing.min_gap_m > 0.0 && self.pairing.min_gap_m.is_finite()) {
            return Err(Error::Parameter("pairing.min_gap_m must be positive".into()));
        }
        self.indicators.validate()?;
        self.stability.validate()?;
        if self.screen.algorithms.is_empty() {
            return Err(Error::Parameter("screen.algorithms is empty".into()));
        }
        for a in &self.screen.algorithms {
            registry().get(a)?;
        }
        check_k_values("screen.k_values", &self.screen.k_values)?;
        check_k_values("search.k_values", &self.search.k_values)?;
        if self.selection.k < 2 {
            return Err(Error::Parameter("selection.k must be at least 2".into()));
        }
        for (alg, params) in &self.search.domains {
            registry().get(alg)?;
            for d in params.values() {
                d.validate()?;
            }
        }
        self.tune_config().validate()?;
        self.decode.validate()
    }

    pub fn tune_config(&self) -> TuneConfig {
        TuneConfig {
            iterations: self.tune.iterations,
            seed: self.seed,
            loss: self.tune.loss,
            tpe: self.tune.tpe.clone(),
            tune_replicates: self.tune.tune_replicates,
            stability: self.stability.clone(),
        }
    }

    /// Search space over `algorithms` with the configured overrides.
    pub fn search_space<S: AsRef<str>>(&self, algorithms: &[S]) -> Result<SearchSpace> {
        let mut space = SearchSpace::from_registry(algorithms, self.search.k_values.clone())?;
        for (alg, params) in &self.search.domains {
            if !space.algorithms.iter().any(|a| a.algorithm == *alg) {
                log::info!("search override for `{alg}` ignored: not on the shortlist");
                continue;
            }
            for (p, d) in params {
                space.set_domain(alg, p, d.clone())?;
            }
        }
        Ok(space)
    }
}

// ---------------------------------------------------------------------------
// Stage computations

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub vehicles: usize,
    pub samples: usize,
    pub malformed_rows: usize,
    pub duplicate_rows: usize,
    pub unsmoothed_tracks: usize,
}

/// Parses and smooths the trajectory file.
pub fn ingest(input: &InputConfig, smoothing: &SmoothingConfig) -> Result<(Vec<VehicleTrack>, IngestSummary)> {
    let report = parse_ngsim(&input.path, input.unit, &input.columns)?;
    let (tracks, short) = smooth_tracks(&report.tracks, smoothing.window, smoothing.poly_order)?;
    let summary = IngestSummary {
        vehicles: tracks.len(),
        samples: tracks.iter().map(|t| t.samples.len()).sum(),
        malformed_rows: report.malformed_rows,
        duplicate_rows: report.duplicate_rows,
        unsmoothed_tracks: short,
    };
    Ok((tracks, summary))
}

/// The raw 12-column feature matrix of smoothed tracks.
pub fn features_from_tracks(
    tracks: &[VehicleTrack],
    pairing: &PairingConfig,
    indicators: &IndicatorConfig,
) -> Result<FeatureMatrix> {
    let pairs = build_conflict_series(tracks, pairing.min_gap_m);
    if pairs.unknown_leader_frames > 0 {
        log::warn!("{} frames name an unknown preceding vehicle", pairs.unknown_leader_frames);
    }
    if pairs.clamped_frames > 0 {
        log::info!("{} frames had their gap clamped", pairs.clamped_frames);
    }
    extract_features(tracks, &pairs.series, indicators)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub state: MatrixState,
    pub indicators: IndicatorConfig,
    pub columns: Vec<ColumnStats>,
}

/// Writes `<csv>.json` next to a feature CSV.
pub fn write_feature_sidecar(csv_path: &Path, m: &FeatureMatrix, indicators: &IndicatorConfig) -> Result<PathBuf> {
    let path = csv_path.with_extension("json");
    let sidecar = FeatureSidecar {
        state: m.state,
        indicators: indicators.clone(),
        columns: m.column_stats(),
    };
    write_json(&path, &sidecar)?;
    Ok(path)
}

/// Prescreens `algorithms` on the standardized form of a rectified matrix.
pub fn screen(
    rectified: &FeatureMatrix,
    algorithms: &[String],
    k_values: &[usize],
    stability: &StabilityConfig,
    seed: u64,
) -> Result<ScreenReport> {
    prescreen(algorithms, &standardize(rectified)?, k_values, stability, seed)
}

/// Default-parameter models of the shortlisted algorithms (k-demanding ones
/// at `k`).
pub fn selection_models<S: AsRef<str>>(shortlist: &[S], k: usize, seed: u64) -> Result<Vec<ModelSpec>> {
    shortlist
        .iter()
        .map(|name| {
            let info = registry().get(name.as_ref())?;
            Ok(ModelSpec::new(info.name, info.requires_k.then_some(k))
                .with_params(info.defaults.clone())
                .with_seed(seed))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub models: Vec<ModelSpec>,
    pub table: ImportanceTable,
    pub selection: FeatureSelection,
}

pub fn select(rectified: &FeatureMatrix, shortlist: &[String], k: usize, seed: u64) -> Result<SelectionOutcome> {
    let models = selection_models(shortlist, k, seed)?;
    let table = elimination_importance(&models, rectified)?;
    let selection = select_features(&table)?;
    Ok(SelectionOutcome {
        models,
        table,
        selection,
    })
}

/// Tunes on the standardized form of a rectified matrix.
pub fn tune<F>(rectified: &FeatureMatrix, space: &SearchSpace, cfg: &TuneConfig, sink: F) -> Result<TuneHistory>
where
    F: FnMut(&TrialRecord) -> Result<()>,
{
    optimize_with(space, &standardize(rectified)?, cfg, sink)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeSummary {
    pub k: usize,
    pub models: Vec<ModelSpec>,
    pub features: Vec<String>,
    pub quality: QualitySummary,
    pub counts: Vec<usize>,
    pub high_risk: Vec<usize>,
    pub imbalance_ratio: f64,
    pub imbalance_ratio_reported: u64,
    /// Severity score of each level, safest first.
    pub severity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub summary: DecodeSummary,
    pub labels: RiskLabelMap,
    pub thresholds: Vec<ThresholdRow>,
    pub sankey: Vec<SankeyEdge>,
    pub letter_values: Vec<LetterValues>,
    /// Per-vehicle silhouettes of the final partition.
    pub silhouettes: Vec<f64>,
}

fn refit(spec: &ModelSpec, std: &FeatureMatrix) -> Result<ClusteringResult> {
    registry().fit(spec, std)
}

/// Turns a trial log into risk levels. `rectified` must hold the columns the
/// trials were tuned on, on the rectified scale.
pub fn decode(
    rectified: &FeatureMatrix,
    trials: &[TrialRecord],
    cfg: &DecodeConfig,
    weights: &ClusterWeights,
) -> Result<DecodeOutput> {
    cfg.validate()?;
    let std = standardize(rectified)?;
    let ks: Vec<usize> = trials.iter().filter_map(|t| t.k).collect::<BTreeSet<_>>().into_iter().collect();
    let best = best_per_k(trials, &ks);
    let chosen = best
        .get(&cfg.k)
        .ok_or_else(|| Error::Tuning(format!("no successful trial found {} clusters", cfg.k)))?;

    let (result, models) = if cfg.ensemble >= 3 {
        let mut at_k: Vec<&TrialRecord> = trials
            .iter()
            .filter(|t| t.status == TrialStatus::Ok && t.k == Some(cfg.k))
            .collect();
        at_k.sort_by(|a, b| a.loss_x.total_cmp(&b.loss_x).then(a.iteration.cmp(&b.iteration)));
        if at_k.len() < cfg.ensemble {
            return Err(Error::Tuning(format!(
                "only {} successful trials at k={} for a {}-model vote",
                at_k.len(),
                cfg.k,
                cfg.ensemble
            )));
        }
        let members = &at_k[..cfg.ensemble];
        let fits: Vec<ClusteringResult> = members.iter().map(|t| refit(&t.spec, &std)).collect::<Result<_>>()?;
        let bsi: Vec<f64> = members
            .iter()
            .map(|t| t.quality.as_ref().map_or(f64::NEG_INFINITY, |q| q.bsi))
            .collect();
        let votes = ensemble_vote(&fits, &bsi)?;
        (ClusteringResult::from_labels(votes), members.iter().map(|t| t.spec.clone()).collect())
    } else {
        (refit(&chosen.spec, &std)?, vec![chosen.spec.clone()])
    };
    if result.k_found != cfg.k {
        return Err(Error::Mismatch(format!(
            "refitting the chosen model gave {} clusters instead of {}",
            result.k_found, cfg.k
        )));
    }

    let features = rectified.feature_names.clone();
    let order = order_clusters(&result.labels, rectified, &features)?;
    let labels = label_dataset(&result, &order, rectified, cfg.high_risk.as_deref())?;
    let report = QualityReport::compute(&std, &labels.levels, weights)?;
    let thresholds = calibrate_thresholds(&labels, rectified, &features)?;
    let letters = letter_values(rectified, &labels.levels, cfg.letter_depth)?;

    let mut partitions = Vec::new();
    for (&k, t) in &best {
        let levels = if k == cfg.k {
            labels.levels.clone()
        } else {
            let r = refit(&t.spec, &std)?;
            let o = order_clusters(&r.labels, rectified, &features)?;
            r.labels.iter().map(|&c| o.cluster_to_level[c]).collect()
        };
        partitions.push(Partition {
            k,
            vehicle_ids: rectified.vehicle_ids.clone(),
            levels,
        });
    }
    let sankey = if partitions.len() >= 2 {
        sankey_flows(&partitions)?
    } else {
        log::warn!("flows need partitions at two or more k; none written");
        Vec::new()
    };

    let mut severity = vec![0.0; labels.k()];
    for (c, &l) in order.cluster_to_level.iter().enumerate() {
        if l < severity.len() {
            severity[l] = order.scores[c];
        }
    }
    Ok(DecodeOutput {
        summary: DecodeSummary {
            k: cfg.k,
            models,
            features,
            quality: report.summary(),
            counts: labels.counts.clone(),
            high_risk: labels.high_risk.clone(),
            imbalance_ratio: labels.imbalance.exact,
            imbalance_ratio_reported: labels.imbalance.reported,
            severity,
        },
        silhouettes: report.sample_silhouettes,
        labels,
        thresholds,
        sankey,
        letter_values: letters,
    })
}

// ---------------------------------------------------------------------------
// Files

pub fn create_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn open_file(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create_file(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(open_file(path)?)?)
}

pub fn read_trials(path: &Path) -> Result<Vec<TrialRecord>> {
    read_trials_jsonl(open_file(path)?)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let mut f = open_file(path)?;
    std::io::copy(&mut f, &mut h).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(h.finalize()))
}

/// Writes every decoding export into `dir` under the pipeline's file names.
pub fn write_decode_outputs(dir: &Path, out: &DecodeOutput, tracks: Option<&[VehicleTrack]>) -> Result<()> {
    let mut w = create_file(&dir.join(files::LABELS))?;
    out.labels.write_csv(&mut w)?;
    let mut w = create_file(&dir.join(files::THRESHOLDS))?;
    write_thresholds_csv(&mut w, &out.thresholds)?;
    let mut w = create_file(&dir.join(files::SANKEY))?;
    write_sankey_csv(&mut w, &out.sankey)?;
    if let Some(tracks) = tracks {
        let mut w = create_file(&dir.join(files::PROFILE))?;
        write_profile_csv(&mut w, &risk_profile(&out.labels, tracks))?;
    }
    let mut w = create_file(&dir.join(files::LETTER_VALUES))?;
    write_letter_values_csv(&mut w, &out.letter_values)?;
    let mut w = create_file(&dir.join(files::SILHOUETTES))?;
    write_silhouettes_csv(&mut w, &out.labels.vehicle_ids, &out.labels.levels, &out.silhouettes)?;
    write_json(&dir.join(files::DECODE_SUMMARY), &out.summary)
}

/// Artifact file names inside the work directory.
pub mod files {
    pub const TRACKS: &str = "tracks.bin";
    pub const INGEST_SUMMARY: &str = "ingest.json";
    pub const FEATURES_RAW: &str = "features_raw.csv";
    pub const FEATURES_RAW_SIDECAR: &str = "features_raw.json";
    pub const FEATURES: &str = "features.csv";
    pub const FEATURES_SIDECAR: &str = "features.json";
    pub const SCREEN: &str = "screen.json";
    pub const IMPORTANCE: &str = "importance.csv";
    pub const SELECTION: &str = "selection.json";
    pub const FEATURES_SELECTED: &str = "features_selected.csv";
    pub const TRIALS: &str = "trials.jsonl";
    pub const BEST_PER_K: &str = "best_per_k.csv";
    pub const LABELS: &str = "labels.csv";
    pub const THRESHOLDS: &str = "thresholds.csv";
    pub const SANKEY: &str = "sankey.csv";
    pub const PROFILE: &str = "profile.csv";
    pub const LETTER_VALUES: &str = "letter_values.csv";
    pub const SILHOUETTES: &str = "silhouettes.csv";
    pub const DECODE_SUMMARY: &str = "decode.json";
}

// ---------------------------------------------------------------------------
// Manifest and runner

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the work directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// Hash of the stage's settings and input artifacts.
    pub input_hash: String,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == name)
    }

    pub fn artifacts(&self) -> impl Iterator<Item = &Artifact> {
        self.stages.iter().flat_map(|s| &s.artifacts)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage `{stage}` failed: {source}")]
pub struct StageError {
    /// `"config"` when the configuration was rejected before any stage ran.
    pub stage: &'static str,
    #[source]
    pub source: Error,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub resume: bool,
}

struct Runner<'a> {
    dir: &'a Path,
    previous: Option<Manifest>,
    manifest: Manifest,
    skipped: Vec<&'static str>,
}

impl Runner<'_> {
    fn input_hash<T: Serialize>(&self, stage: &str, settings: &T, inputs: &[&Path]) -> Result<String> {
        let mut h = Sha256::new();
        h.update(stage.as_bytes());
        h.update([0]);
        h.update(serde_json::to_vec(settings)?);
        for p in inputs {
            h.update([0]);
            h.update(sha256_file(p)?.as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }

    fn intact(&self, rec: &StageRecord) -> bool {
        rec.artifacts
            .iter()
            .all(|a| sha256_file(&self.dir.join(&a.path)).is_ok_and(|h| h == a.sha256))
    }

    fn save(&self) -> Result<()> {
        write_json(&self.dir.join(MANIFEST), &self.manifest)
    }

    fn stage<T, F>(
        &mut self,
        stage: &'static str,
        settings: &T,
        inputs: &[&Path],
        outputs: &[&str],
        body: F,
    ) -> std::result::Result<(), StageError>
    where
        T: Serialize,
        F: FnOnce(&Path) -> Result<()>,
    {
        let fail = |source| StageError { stage, source };
        let input_hash = self.input_hash(stage, settings, inputs).map_err(fail)?;
        if let Some(prev) = self.previous.as_ref().and_then(|m| m.stage(stage)) {
            if prev.input_hash == input_hash && self.intact(prev) {
                log::info!("stage {stage}: inputs unchanged, skipped");
                self.manifest.stages.push(prev.clone());
                self.skipped.push(stage);
                return self.save().map_err(fail);
            }
        }
        log::info!("stage {stage}: running");
        let outcome = body(self.dir).and_then(|()| {
            let artifacts = outputs
                .iter()
                .map(|name| {
                    let p = self.dir.join(name);
                    let bytes = std::fs::metadata(&p).map_err(|e| Error::io(&p, e))?.len();
                    Ok(Artifact {
                        path: name.to_string(),
                        sha256: sha256_file(&p)?,
                        bytes,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            self.manifest.stages.push(StageRecord {
                stage: stage.to_string(),
                input_hash,
                artifacts,
            });
            Ok(())
        });
        // The manifest is rewritten even on failure so that completed stages
        // stay on record.
        let saved = self.save();
        outcome.and(saved).map_err(fail)
    }
}

/// Outcome of a pipeline run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub manifest: Manifest,
    /// Stages skipped because their inputs were unchanged.
    pub skipped: Vec<&'static str>,
}

/// Runs every stage in order inside `cfg.workdir`.
pub fn run_pipeline(cfg: &PipelineConfig, opts: &RunOptions) -> std::result::Result<RunReport, StageError> {
    use files::*;
    let config_err = |source| StageError { stage: "config", source };
    cfg.validate().map_err(config_err)?;
    let dir = cfg.workdir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| config_err(Error::io(dir, e)))?;
    let previous = if opts.resume {
        let p = dir.join(MANIFEST);
        match p.exists() {
            true => match read_json::<Manifest>(&p) {
                Ok(m) if m.seed == cfg.seed => Some(m),
                Ok(_) => None,
                Err(e) => {
                    log::warn!("ignoring unreadable manifest: {e}");
                    None
                }
            },
            false => None,
        }
    } else {
        None
    };
    let mut run = Runner {
        dir,
        previous,
        manifest: Manifest {
            seed: cfg.seed,
            stages: Vec::new(),
        },
        skipped: Vec::new(),
    };
    run.save().map_err(config_err)?;
    let at = |name: &str| dir.join(name);

    run.stage(
        "ingest",
        &(&cfg.input.unit, &cfg.input.columns, &cfg.smoothing),
        &[&cfg.input.path],
        &[TRACKS, INGEST_SUMMARY],
        |d| {
            let (tracks, summary) = ingest(&cfg.input, &cfg.smoothing)?;
            save_tracks(&d.join(TRACKS), &tracks)?;
            write_json(&d.join(INGEST_SUMMARY), &summary)
        },
    )?;

    run.stage(
        "features",
        &(&cfg.pairing, &cfg.indicators),
        &[&at(TRACKS)],
        &[FEATURES_RAW, FEATURES_RAW_SIDECAR],
        |d| {
            let tracks = load_tracks(&d.join(TRACKS))?;
            let m = features_from_tracks(&tracks, &cfg.pairing, &cfg.indicators)?;
            m.save_csv(&d.join(FEATURES_RAW))?;
            write_feature_sidecar(&d.join(FEATURES_RAW), &m, &cfg.indicators).map(drop)
        },
    )?;

    run.stage(
        "rectify",
        &cfg.indicators,
        &[&at(FEATURES_RAW)],
        &[FEATURES, FEATURES_SIDECAR],
        |d| {
            let raw = FeatureMatrix::load_csv(&d.join(FEATURES_RAW), MatrixState::Raw)?;
            let m = rectify(&raw, &cfg.indicators)?;
            // Fails early on an unusable matrix (e.g. no rows).
            standardize(&m)?;
            for c in m.column_stats().iter().filter(|c| c.std == 0.0) {
                log::warn!("feature `{}` is constant over all vehicles", c.name);
            }
            m.save_csv(&d.join(FEATURES))?;
            write_feature_sidecar(&d.join(FEATURES), &m, &cfg.indicators).map(drop)
        },
    )?;

    run.stage(
        "screen",
        &(cfg.seed, &cfg.screen, &cfg.stability),
        &[&at(FEATURES)],
        &[SCREEN],
        |d| {
            let m = FeatureMatrix::load_csv(&d.join(FEATURES), MatrixState::Rectified)?;
            let report = screen(&m, &cfg.screen.algorithms, &cfg.screen.k_values, &cfg.stability, cfg.seed)?;
            write_json(&d.join(SCREEN), &report)
        },
    )?;

    run.stage(
        "select",
        &(cfg.seed, &cfg.selection),
        &[&at(FEATURES), &at(SCREEN)],
        &[IMPORTANCE, SELECTION],
        |d| {
            let m = FeatureMatrix::load_csv(&d.join(FEATURES), MatrixState::Rectified)?;
            let report: ScreenReport = read_json(&d.join(SCREEN))?;
            let out = select(&m, &report.shortlist, cfg.selection.k, cfg.seed)?;
            out.table.write_csv(create_file(&d.join(IMPORTANCE))?)?;
            write_json(&d.join(SELECTION), &out)
        },
    )?;

    run.stage(
        "reduce",
        &(),
        &[&at(FEATURES), &at(SELECTION)],
        &[FEATURES_SELECTED],
        |d| {
            let m = FeatureMatrix::load_csv(&d.join(FEATURES), MatrixState::Rectified)?;
            let sel: SelectionOutcome = read_json(&d.join(SELECTION))?;
            m.select_columns(&sel.selection.selected)?.save_csv(&d.join(FEATURES_SELECTED))
        },
    )?;

    run.stage(
        "tune",
        &(cfg.tune_config(), &cfg.search),
        &[&at(FEATURES_SELECTED), &at(SCREEN)],
        &[TRIALS, BEST_PER_K],
        |d| {
            let m = FeatureMatrix::load_csv(&d.join(FEATURES_SELECTED), MatrixState::Rectified)?;
            let report: ScreenReport = read_json(&d.join(SCREEN))?;
            let space = cfg.search_space(&report.shortlist)?;
            let path = d.join(TRIALS);
            let mut log = create_file(&path)?;
            let history = tune(&m, &space, &cfg.tune_config(), |t| {
                serde_json::to_writer(&mut log, t)?;
                log.write_all(b"\n").map_err(|e| Error::io(&path, e))
            })?;
            log.flush().map_err(|e| Error::io(&path, e))?;
            history.write_best_csv(create_file(&d.join(BEST_PER_K))?)
        },
    )?;

    run.stage(
        "decode",
        &(&cfg.decode, &cfg.stability.weights),
        &[&at(FEATURES_SELECTED), &at(TRIALS), &at(TRACKS)],
        &[LABELS, THRESHOLDS, SANKEY, PROFILE, LETTER_VALUES, SILHOUETTES, DECODE_SUMMARY],
        |d| {
            let m = FeatureMatrix::load_csv(&d.join(FEATURES_SELECTED), MatrixState::Rectified)?;
            let trials = read_trials(&d.join(TRIALS))?;
            let tracks = load_tracks(&d.join(TRACKS))?;
            let out = decode(&m, &trials, &cfg.decode, &cfg.stability.weights)?;
            write_decode_outputs(d, &out, Some(&tracks))
        },
    )?;

    Ok(RunReport {
        manifest: run.manifest,
        skipped: run.skipped,
    })
}
