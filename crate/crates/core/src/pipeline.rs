//! End-to-end orchestration: synth → detect → extract → train → evaluate.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{run_experiment, EvalConfig, EvalReport};
use crate::features::{extract_all, DropReason, FeatureConfig, FeatureMatrix, FEATURE_COUNT};
use crate::osp::{detect_ao, AoPeaks, OspConfig};
use crate::sae::{save_model, train_model, SaeModel, TrainConfig};
use crate::signal_io::{save_annotations, save_features, save_record, write_file, RecordFormat, SignalRecord};
use crate::synth::{generate_corpus_with, CorpusConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { out_dir: PathBuf::from("out") }
    }
}

/// Every tunable of the pipeline. Any subset may appear in a config file;
/// missing fields take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub osp: OspConfig,
    pub features: FeatureConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: CorpusConfig,
    pub paths: PathsConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.osp.validate()?;
        self.features.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.synth.subjects == 0 {
            return Err(Error::Config("synth.subjects must be at least 1".into()));
        }
        Ok(())
    }

    /// Parses TOML, or JSON when the path ends in `.json`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: std::result::Result<Self, String> = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        let cfg = parsed.map_err(|m| Error::Config(format!("{}: {m}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// AO detection over many records. Output order follows input order.
pub fn detect_all(records: &[SignalRecord], cfg: &OspConfig) -> Result<Vec<AoPeaks>> {
    records
        .par_iter()
        .map(|r| {
            detect_ao(r, cfg).inspect_err(|e| tracing::error!(record = %r.record_id, error = %e, "AO detection failed"))
        })
        .collect()
}

/// Feature rows for every record, concatenated in input order.
pub fn extract_corpus(records: &[SignalRecord], peaks: &[AoPeaks], cfg: &FeatureConfig) -> Result<(FeatureMatrix, Vec<DropReason>)> {
    if records.len() != peaks.len() {
        return Err(Error::DimensionMismatch { expected: records.len(), got: peaks.len() });
    }
    let parts: Vec<_> = records
        .par_iter()
        .zip(peaks.par_iter())
        .map(|(r, p)| extract_all(r, p, cfg))
        .collect::<Result<_>>()?;
    let mut matrix = FeatureMatrix::default();
    let mut dropped = Vec::new();
    for part in parts {
        matrix.extend(part.matrix);
        dropped.extend(part.dropped);
    }
    Ok((matrix, dropped))
}

/// Dense row-major copy of a feature matrix.
pub fn feature_array(matrix: &FeatureMatrix) -> nalgebra::DMatrix<f64> {
    let flat: Vec<f64> = matrix.rows.iter().flat_map(|r| r.to_array()).collect();
    nalgebra::DMatrix::from_row_slice(matrix.len(), FEATURE_COUNT, &flat)
}

pub fn train_on(matrix: &FeatureMatrix, cfg: &TrainConfig) -> Result<SaeModel> {
    matrix.validate()?;
    let labels = matrix.require_labels()?;
    let (model, report) = train_model(&feature_array(matrix), &labels, cfg)?;
    tracing::info!(
        finetune_loss = report.finetune.losses.last().copied(),
        epochs = report.finetune.losses.len() - 1,
        "model trained"
    );
    Ok(model)
}

#[derive(Clone, Debug)]
pub struct PipelineArtifacts {
    pub records_dir: PathBuf,
    pub features: PathBuf,
    pub model: PathBuf,
    pub report: PathBuf,
    pub table: PathBuf,
    pub roc: PathBuf,
    pub n_records: usize,
    pub n_beats: usize,
    pub report_data: EvalReport,
}

pub fn write_report(report: &EvalReport, json: &Path, table: Option<&Path>, roc: Option<&Path>) -> Result<()> {
    write_file(json, &report.to_json())?;
    if let Some(t) = table {
        write_file(t, &report.to_table())?;
    }
    if let Some(r) = roc {
        write_file(r, &report.roc_csv())?;
    }
    Ok(())
}

/// Runs every stage on a generated corpus and writes all artifacts under
/// `cfg.paths.out_dir`. An error names the stage that failed.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineArtifacts> {
    cfg.validate()?;
    let out = &cfg.paths.out_dir;
    let records_dir = out.join("records");

    let records = generate_corpus_with(&cfg.synth).map_err(|e| e.in_stage("synth"))?;
    for r in &records {
        let path = records_dir.join(format!("{}.csv", r.record_id));
        save_record(r, &path, RecordFormat::Csv).map_err(|e| e.in_stage("synth"))?;
    }
    tracing::info!(records = records.len(), "corpus generated");

    let peaks = detect_all(&records, &cfg.osp).map_err(|e| e.in_stage("detect"))?;
    for (r, p) in records.iter().zip(&peaks) {
        let path = records_dir.join(format!("{}.detected.ann", r.record_id));
        save_annotations(&p.indices, &path).map_err(|e| e.in_stage("detect"))?;
    }

    let (matrix, dropped) = extract_corpus(&records, &peaks, &cfg.features).map_err(|e| e.in_stage("extract"))?;
    tracing::info!(beats = matrix.len(), dropped = dropped.len(), "features extracted");
    let features = out.join("features.csv");
    save_features(&matrix, &features).map_err(|e| e.in_stage("extract"))?;

    let model_path = out.join("model.json");
    let model = train_on(&matrix, &cfg.train).map_err(|e| e.in_stage("train"))?;
    save_model(&model, &model_path).map_err(|e| e.in_stage("train"))?;

    let report_data = run_experiment(&matrix, &cfg.train, &cfg.eval).map_err(|e| e.in_stage("evaluate"))?;
    let (report, table, roc) = (out.join("report.json"), out.join("report.txt"), out.join("roc.csv"));
    write_report(&report_data, &report, Some(&table), Some(&roc)).map_err(|e| e.in_stage("evaluate"))?;
    tracing::info!(accuracy = report_data.averages.overall_accuracy, "evaluation finished");

    Ok(PipelineArtifacts {
        records_dir,
        features,
        model: model_path,
        report,
        table,
        roc,
        n_records: records.len(),
        n_beats: matrix.len(),
        report_data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        let back: PipelineConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let cfg: PipelineConfig = toml::from_str("[eval]\nk = 5\n[train]\nlambda = 0.01\n").unwrap();
        assert_eq!(cfg.eval.k, 5);
        assert_eq!(cfg.train.lambda, 0.01);
        assert_eq!(cfg.train.beta, 4.0);
        assert_eq!(cfg.features.delay_d, 3);
    }

    #[test]
    fn unknown_sections_are_rejected() {
        assert!(toml::from_str::<PipelineConfig>("[bogus]\nx = 1\n").is_err());
    }
}
