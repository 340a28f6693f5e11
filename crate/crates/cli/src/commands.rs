use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use scg_breath::eval::run_experiment;
use scg_breath::osp::detect_ao;
use scg_breath::pipeline::{detect_all, extract_corpus, run_pipeline, train_on, write_report};
use scg_breath::sae::{load_model, save_model};
use scg_breath::signal_io::{load_annotations, load_features, load_record, save_annotations, save_features, save_record, write_file};
use scg_breath::synth::generate_corpus_with;
use scg_breath::{AoPeaks, Error, LabelClass, PipelineConfig, RecordFormat, Result};

use crate::{Baseline, ClassChoice, ClassifyArgs, Command, DetectArgs, EvaluateArgs, ExtractArgs, PipelineArgs, SynthArgs, TrainArgs};

pub fn dispatch(command: Command, mut cfg: PipelineConfig) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a, &mut cfg),
        Command::Detect(a) => detect(a, &mut cfg),
        Command::Extract(a) => extract(a, &mut cfg),
        Command::Train(a) => train(a, &mut cfg),
        Command::Classify(a) => classify(a, &cfg),
        Command::Evaluate(a) => evaluate(a, &mut cfg),
        Command::Pipeline(a) => pipeline(a, &mut cfg),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Validates the merged configuration and logs it in full.
fn resolved(cfg: &PipelineConfig, command: &str) -> Result<()> {
    cfg.validate()?;
    let text = serde_json::to_string(cfg).expect("config serializes");
    tracing::info!(command, config = %text, "resolved configuration");
    Ok(())
}

/// Input files must exist before any work starts.
fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "input not found"),
        })
    }
}

fn synth(a: SynthArgs, cfg: &mut PipelineConfig) -> Result<()> {
    let s = &mut cfg.synth;
    set(&mut s.subjects, a.subjects);
    set(&mut s.duration_s, a.duration);
    set(&mut s.fs, a.fs);
    set(&mut s.noise_snr_db, a.snr_db);
    set(&mut s.seed, a.seed.seed);
    s.classes = match a.class {
        ClassChoice::All => LabelClass::ALL.to_vec(),
        ClassChoice::One(c) => vec![c],
    };
    resolved(cfg, "synth")?;
    let out_dir = a.out_dir.unwrap_or_else(|| cfg.paths.out_dir.join("records"));
    let records = generate_corpus_with(&cfg.synth).map_err(|e| e.in_stage("synth"))?;
    for r in &records {
        let path = out_dir.join(format!("{}.{}", r.record_id, a.format.extension()));
        save_record(r, &path, a.format)?;
    }
    println!("wrote {} records to {}", records.len(), out_dir.display());
    Ok(())
}

fn detect(a: DetectArgs, cfg: &mut PipelineConfig) -> Result<()> {
    set(&mut cfg.osp.sigma_ms, a.sigma_ms);
    set(&mut cfg.osp.refractory_ms, a.refractory_ms);
    set(&mut cfg.osp.delays, a.delays);
    resolved(cfg, "detect")?;
    require(&a.input)?;
    let record = load_record(&a.input, RecordFormat::from_path(&a.input))?;
    let peaks = detect_ao(&record, &cfg.osp).map_err(|e| e.in_stage("detect"))?;
    let out = a.out.unwrap_or_else(|| a.input.with_extension("detected.ann"));
    save_annotations(&peaks.indices, &out)?;
    println!("{}: {} AO instants -> {}", record.record_id, peaks.len(), out.display());
    Ok(())
}

fn record_files(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = std::fs::read_dir(input).map_err(|e| Error::Io { path: input.to_path_buf(), source: e })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::Io { path: input.to_path_buf(), source: e })?.path();
        let is_record = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("csv") || e.eq_ignore_ascii_case("json"));
        if path.is_file() && is_record {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no .csv or .json records in {}", input.display())));
    }
    Ok(files)
}

fn extract(a: ExtractArgs, cfg: &mut PipelineConfig) -> Result<()> {
    let f = &mut cfg.features;
    if a.lag.is_some() {
        f.acf_lag = a.lag;
    }
    set(&mut f.delay_d, a.delay_d);
    set(&mut f.beats.beat_length, a.beat_length);
    resolved(cfg, "extract")?;
    require(&a.input)?;
    let files = record_files(&a.input)?;
    if a.ann.is_some() && files.len() != 1 {
        return Err(Error::Config("--ann needs a single input record, not a directory".into()));
    }
    let records = files
        .iter()
        .map(|p| load_record(p, RecordFormat::from_path(p)))
        .collect::<Result<Vec<_>>>()?;
    let peaks = match &a.ann {
        Some(ann) => {
            require(ann)?;
            vec![AoPeaks { indices: load_annotations(ann)?, fs: records[0].fs }]
        }
        None => detect_all(&records, &cfg.osp).map_err(|e| e.in_stage("detect"))?,
    };
    let (matrix, dropped) = extract_corpus(&records, &peaks, &cfg.features).map_err(|e| e.in_stage("extract"))?;
    for d in &dropped {
        tracing::warn!(record = %d.record_id, start = ?d.start_idx, reason = %d.reason, "beat dropped");
    }
    let out = a.out.unwrap_or_else(|| cfg.paths.out_dir.join("features.csv"));
    save_features(&matrix, &out).map_err(|e| e.in_stage("extract"))?;
    println!("{} beats from {} records -> {}", matrix.len(), records.len(), out.display());
    Ok(())
}

fn train(a: TrainArgs, cfg: &mut PipelineConfig) -> Result<()> {
    let t = &mut cfg.train;
    set(&mut t.rng_seed, a.seed.seed);
    set(&mut t.lambda, a.lambda);
    set(&mut t.beta, a.beta);
    set(&mut t.sparsity, a.sparsity);
    set(&mut t.epochs_pretrain, a.epochs_pretrain);
    set(&mut t.epochs_finetune, a.epochs_finetune);
    resolved(cfg, "train")?;
    let features = a.features.unwrap_or_else(|| cfg.paths.out_dir.join("features.csv"));
    require(&features)?;
    let matrix = load_features(&features)?;
    let model = train_on(&matrix, &cfg.train).map_err(|e| e.in_stage("train"))?;
    let out = a.out.unwrap_or_else(|| cfg.paths.out_dir.join("model.json"));
    save_model(&model, &out)?;
    println!("model trained on {} beats -> {}", matrix.len(), out.display());
    Ok(())
}

fn classify(a: ClassifyArgs, cfg: &PipelineConfig) -> Result<()> {
    resolved(cfg, "classify")?;
    require(&a.model)?;
    require(&a.features)?;
    let model = load_model(&a.model)?;
    let matrix = load_features(&a.features)?;
    let mut out = String::from("record_id,predicted,p_SB,p_NB,p_LB,label\n");
    let mut correct = 0;
    let mut labeled = 0;
    for ((row, id), label) in matrix.rows.iter().zip(&matrix.record_ids).zip(&matrix.labels) {
        let p = model.classify(&row.to_array()).map_err(|e| e.in_stage("classify"))?;
        let [a, b, c] = p.probabilities;
        let truth = label.map_or("", |l| l.as_str());
        let _ = writeln!(out, "{id},{},{a},{b},{c},{truth}", p.label);
        if let Some(l) = label {
            labeled += 1;
            correct += usize::from(*l == p.label);
        }
    }
    write_file(&a.out, &out)?;
    if labeled > 0 {
        println!("{} rows classified, {correct}/{labeled} match their labels -> {}", matrix.len(), a.out.display());
    } else {
        println!("{} rows classified -> {}", matrix.len(), a.out.display());
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs, cfg: &mut PipelineConfig) -> Result<()> {
    set(&mut cfg.eval.k, a.k);
    set(&mut cfg.eval.split, a.split);
    if let Some(seed) = a.seed.seed {
        cfg.eval.seed = seed;
        cfg.train.rng_seed = seed;
    }
    if let Some(b) = a.baseline {
        cfg.eval.knn_baseline = b == Baseline::Knn;
    }
    resolved(cfg, "evaluate")?;
    let features = a.features.unwrap_or_else(|| cfg.paths.out_dir.join("features.csv"));
    require(&features)?;
    let matrix = load_features(&features)?;
    let report = run_experiment(&matrix, &cfg.train, &cfg.eval).map_err(|e| e.in_stage("evaluate"))?;
    let out = a.out.unwrap_or_else(|| cfg.paths.out_dir.join("report.json"));
    write_report(&report, &out, None, a.roc.as_deref())?;
    print!("{}", report.to_table());
    println!("report -> {}", out.display());
    Ok(())
}

fn pipeline(a: PipelineArgs, cfg: &mut PipelineConfig) -> Result<()> {
    set(&mut cfg.paths.out_dir, a.out_dir);
    if let Some(seed) = a.seed.seed {
        cfg.synth.seed = seed;
        cfg.train.rng_seed = seed;
        cfg.eval.seed = seed;
    }
    resolved(cfg, "pipeline")?;
    let artifacts = run_pipeline(cfg)?;
    print!("{}", artifacts.report_data.to_table());
    println!(
        "{} records, {} beats; artifacts in {}",
        artifacts.n_records,
        artifacts.n_beats,
        cfg.paths.out_dir.display()
    );
    Ok(())
}
