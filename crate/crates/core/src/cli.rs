//! End-to-end experiment driver shared by the command-line binary and the
//! acceptance tests: dataset generation, pretraining, adaptation, evaluation,
//! and the multi-seed scenario with aggregate statistics.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ExperimentConfig};
use crate::data::{generate_domain, split, DataError, Dataset, DomainSpec};
use crate::metrics::{
    accuracy, calibration, calibration_csv, entropy_csv, entropy_summary, macro_f1,
    CalibrationReport, EntropySummary,
};
use crate::nets::{ModelBundle, NetError};
use crate::pipeline::{
    adapt_emapu, adapt_mapu, evaluate, pretrain, Evaluation, PipelineError, RunReport, Variant,
};
use crate::rng::seed_for;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

const STREAM_SOURCE_DOMAIN: u64 = 11;
const STREAM_TARGET_DOMAIN: u64 = 12;
const STREAM_SOURCE_SPLIT: u64 = 13;
const STREAM_TARGET_SPLIT: u64 = 14;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Schema(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    /// Process exit code: schema 2, I/O 3, numerical 4.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Schema(s) => CliError::Schema(s),
            ConfigError::Io(e) => CliError::Io(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Invalid(_) | DataError::BadMagic | DataError::BadVersion(_) => {
                CliError::Schema(e.to_string())
            }
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Schema(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Io(format!("serialize {}: {e}", path.display())))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

// ---- datasets ----

pub struct DomainData {
    pub source_train: Dataset,
    pub source_test: Dataset,
    pub target_train: Dataset,
    pub target_test: Dataset,
}

/// Generate the source/shifted-target dataset quartet for one seed.
pub fn make_datasets(cfg: &ExperimentConfig, seed: u64) -> Result<DomainData, CliError> {
    let m = &cfg.model;
    let source_spec =
        DomainSpec::source_default(m.classes, seed_for(seed, &[STREAM_SOURCE_DOMAIN]));
    let target_spec = source_spec.shifted(cfg.data.shift_knob, seed_for(seed, &[STREAM_TARGET_DOMAIN]));
    let source = generate_domain(&source_spec, cfg.data.n_per_domain, m.channels, m.len, m.classes)?;
    let target = generate_domain(&target_spec, cfg.data.n_per_domain, m.channels, m.len, m.classes)?;
    let (source_train, source_test) = split(
        &source,
        cfg.data.train_fraction,
        seed_for(seed, &[STREAM_SOURCE_SPLIT]),
    );
    let (target_train, target_test) = split(
        &target,
        cfg.data.train_fraction,
        seed_for(seed, &[STREAM_TARGET_SPLIT]),
    );
    Ok(DomainData {
        source_train,
        source_test,
        target_train,
        target_test,
    })
}

pub fn cmd_generate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out_dir)?;
    let seed = cfg.seeds[0];
    let data = make_datasets(cfg, seed)?;
    data.source_train.save(&out_dir.join("source_train.tsd"))?;
    data.source_test.save(&out_dir.join("source_test.tsd"))?;
    data.target_train.save(&out_dir.join("target_train.tsd"))?;
    data.target_test.save(&out_dir.join("target_test.tsd"))?;
    Ok(())
}

// ---- single-stage commands ----

pub fn cmd_pretrain(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<RunReport, CliError> {
    fs::create_dir_all(out_dir)?;
    let source = Dataset::load(&data_dir.join("source_train.tsd"))?;
    let seed = cfg.seeds[0];
    let mut tc = cfg.pretrain.clone();
    tc.seed = seed;
    let mut bundle = ModelBundle::init(cfg.model.channels, cfg.model.classes, seed);
    let report = pretrain(&mut bundle, &source, &tc)?;
    bundle.save(&out_dir.join("pretrained.ckpt"))?;
    write_json(&out_dir.join("pretrain_report.json"), &report)?;
    Ok(report)
}

pub fn cmd_adapt(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    target_data: &Path,
    out_dir: &Path,
) -> Result<RunReport, CliError> {
    fs::create_dir_all(out_dir)?;
    let target = Dataset::load(target_data)?;
    let mut bundle = ModelBundle::load(checkpoint)?;
    let mut tc = cfg.adapt.clone();
    tc.seed = cfg.seeds[0];
    let report = match tc.variant {
        Variant::Mapu => adapt_mapu(&mut bundle, &target, &tc)?,
        Variant::Emapu => adapt_emapu(&mut bundle, &target, &tc)?,
    };
    bundle.save(&out_dir.join("adapted.ckpt"))?;
    write_json(&out_dir.join("adapt_report.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: String,
    pub n: usize,
    pub accuracy_softmax: f64,
    pub mf1_softmax: f64,
    pub accuracy_evidential: f64,
    pub mf1_evidential: f64,
    /// Brier uses the sum-over-classes convention, range [0, 2].
    pub calibration_softmax: CalibrationReport,
    pub calibration_evidential: CalibrationReport,
    pub entropy: EntropySummary,
}

fn eval_report(cfg: &ExperimentConfig, evaluation: &Evaluation, ds: &Dataset) -> EvalReport {
    let truth: Vec<usize> = ds.labels.iter().map(|&l| l as usize).collect();
    let k = ds.classes;
    let bins = cfg.eval.calibration_bins;
    EvalReport {
        version: VERSION.to_string(),
        n: ds.n,
        accuracy_softmax: accuracy(&evaluation.pred_softmax, &truth),
        mf1_softmax: macro_f1(&evaluation.pred_softmax, &truth, k),
        accuracy_evidential: accuracy(&evaluation.pred_evidential, &truth),
        mf1_evidential: macro_f1(&evaluation.pred_evidential, &truth, k),
        calibration_softmax: calibration(&evaluation.softmax_probs, &truth, k, bins),
        calibration_evidential: calibration(&evaluation.evd_probs, &truth, k, bins),
        entropy: entropy_summary(&evaluation.softmax_probs, &evaluation.evd_probs, k),
    }
}

pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    data_path: &Path,
    out_dir: &Path,
) -> Result<EvalReport, CliError> {
    fs::create_dir_all(out_dir)?;
    let ds = Dataset::load(data_path)?;
    let mut bundle = ModelBundle::load(checkpoint)?;
    let evaluation = evaluate(&mut bundle, &ds)?;
    let report = eval_report(cfg, &evaluation, &ds);
    write_json(&out_dir.join("metrics.json"), &report)?;
    fs::write(
        out_dir.join("calibration_softmax.csv"),
        calibration_csv(&report.calibration_softmax),
    )?;
    fs::write(
        out_dir.join("calibration_evidential.csv"),
        calibration_csv(&report.calibration_evidential),
    )?;
    fs::write(out_dir.join("entropy_hist.csv"), entropy_csv(&report.entropy))?;
    Ok(report)
}

// ---- scenario ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub mf1_source_only: f64,
    pub mf1_mapu: f64,
    pub mf1_emapu: f64,
    pub acc_source_only: f64,
    pub acc_mapu: f64,
    pub acc_emapu: f64,
    pub ece_softmax: f64,
    pub ece_evidential: f64,
    pub brier_softmax: f64,
    pub brier_evidential: f64,
    /// mean softmax entropy on target test minus source test (softmax-pretrained model)
    pub entropy_gap_softmax: f64,
    /// mean evidential entropy on target test minus source test (evidentially pretrained model)
    pub entropy_gap_evidential: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub version: String,
    pub config: ExperimentConfig,
    pub per_seed: Vec<SeedOutcome>,
    pub aggregate: BTreeMap<String, MeanStd>,
}

/// Reports produced along the way for one seed, written to disk when the
/// scenario has an output directory.
pub struct SeedRun {
    pub outcome: SeedOutcome,
    pub reports: Vec<(String, RunReport)>,
}

/// The full per-seed pipeline: pretrain a softmax (MAPU) and an evidential
/// (E-MAPU) model on source, evaluate source-only transfer, then adapt each
/// with its own procedure and evaluate again.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun, CliError> {
    let data = make_datasets(cfg, seed)?;
    let m = &cfg.model;

    let mut pre_cfg_mapu = cfg.pretrain.clone();
    pre_cfg_mapu.seed = seed;
    pre_cfg_mapu.variant = Variant::Mapu;
    let mut pre_cfg_emapu = pre_cfg_mapu.clone();
    pre_cfg_emapu.variant = Variant::Emapu;

    let mut mapu = ModelBundle::init(m.channels, m.classes, seed);
    let rep_pre_mapu = pretrain(&mut mapu, &data.source_train, &pre_cfg_mapu)?;
    let mut emapu = ModelBundle::init(m.channels, m.classes, seed);
    let rep_pre_emapu = pretrain(&mut emapu, &data.source_train, &pre_cfg_emapu)?;

    let truth_target: Vec<usize> = data.target_test.labels.iter().map(|&l| l as usize).collect();
    let bins = cfg.eval.calibration_bins;

    // source-only transfer, calibration, and entropy gaps (pre-adaptation)
    let eval_mapu_src_model_tgt = evaluate(&mut mapu, &data.target_test)?;
    let eval_mapu_src_model_src = evaluate(&mut mapu, &data.source_test)?;
    let eval_emapu_src_model_tgt = evaluate(&mut emapu, &data.target_test)?;
    let eval_emapu_src_model_src = evaluate(&mut emapu, &data.source_test)?;

    let mf1_source_only = macro_f1(&eval_mapu_src_model_tgt.pred_softmax, &truth_target, m.classes);
    let acc_source_only = accuracy(&eval_mapu_src_model_tgt.pred_softmax, &truth_target);

    let cal_softmax = calibration(
        &eval_mapu_src_model_tgt.softmax_probs,
        &truth_target,
        m.classes,
        bins,
    );
    let cal_evidential = calibration(
        &eval_emapu_src_model_tgt.evd_probs,
        &truth_target,
        m.classes,
        bins,
    );

    let mean_entropy = |probs: &[f64]| -> f64 {
        entropy_summary(probs, probs, m.classes).softmax.mean
    };
    let entropy_gap_softmax = mean_entropy(&eval_mapu_src_model_tgt.softmax_probs)
        - mean_entropy(&eval_mapu_src_model_src.softmax_probs);
    let entropy_gap_evidential = mean_entropy(&eval_emapu_src_model_tgt.evd_probs)
        - mean_entropy(&eval_emapu_src_model_src.evd_probs);

    // adaptation
    let mut adapt_cfg_mapu = cfg.adapt.clone();
    adapt_cfg_mapu.seed = seed;
    adapt_cfg_mapu.variant = Variant::Mapu;
    let mut adapt_cfg_emapu = adapt_cfg_mapu.clone();
    adapt_cfg_emapu.variant = Variant::Emapu;

    let rep_adapt_mapu = adapt_mapu(&mut mapu, &data.target_train, &adapt_cfg_mapu)?;
    let rep_adapt_emapu = adapt_emapu(&mut emapu, &data.target_train, &adapt_cfg_emapu)?;

    let eval_mapu_adapted = evaluate(&mut mapu, &data.target_test)?;
    let eval_emapu_adapted = evaluate(&mut emapu, &data.target_test)?;
    let mf1_mapu = macro_f1(&eval_mapu_adapted.pred_softmax, &truth_target, m.classes);
    let acc_mapu = accuracy(&eval_mapu_adapted.pred_softmax, &truth_target);
    let mf1_emapu = macro_f1(&eval_emapu_adapted.pred_evidential, &truth_target, m.classes);
    let acc_emapu = accuracy(&eval_emapu_adapted.pred_evidential, &truth_target);

    Ok(SeedRun {
        outcome: SeedOutcome {
            seed,
            mf1_source_only,
            mf1_mapu,
            mf1_emapu,
            acc_source_only,
            acc_mapu,
            acc_emapu,
            ece_softmax: cal_softmax.ece,
            ece_evidential: cal_evidential.ece,
            brier_softmax: cal_softmax.brier,
            brier_evidential: cal_evidential.brier,
            entropy_gap_softmax,
            entropy_gap_evidential,
        },
        reports: vec![
            ("pretrain_mapu".into(), rep_pre_mapu),
            ("pretrain_emapu".into(), rep_pre_emapu),
            ("adapt_mapu".into(), rep_adapt_mapu),
            ("adapt_emapu".into(), rep_adapt_emapu),
        ],
    })
}

fn aggregate(per_seed: &[SeedOutcome]) -> BTreeMap<String, MeanStd> {
    let mut out = BTreeMap::new();
    let field = |f: fn(&SeedOutcome) -> f64| -> Vec<f64> { per_seed.iter().map(f).collect() };
    out.insert("mf1_source_only".into(), mean_std(&field(|s| s.mf1_source_only)));
    out.insert("mf1_mapu".into(), mean_std(&field(|s| s.mf1_mapu)));
    out.insert("mf1_emapu".into(), mean_std(&field(|s| s.mf1_emapu)));
    out.insert("acc_source_only".into(), mean_std(&field(|s| s.acc_source_only)));
    out.insert("acc_mapu".into(), mean_std(&field(|s| s.acc_mapu)));
    out.insert("acc_emapu".into(), mean_std(&field(|s| s.acc_emapu)));
    out.insert("ece_softmax".into(), mean_std(&field(|s| s.ece_softmax)));
    out.insert("ece_evidential".into(), mean_std(&field(|s| s.ece_evidential)));
    out.insert("brier_softmax".into(), mean_std(&field(|s| s.brier_softmax)));
    out.insert(
        "brier_evidential".into(),
        mean_std(&field(|s| s.brier_evidential)),
    );
    out.insert(
        "entropy_gap_softmax".into(),
        mean_std(&field(|s| s.entropy_gap_softmax)),
    );
    out.insert(
        "entropy_gap_evidential".into(),
        mean_std(&field(|s| s.entropy_gap_evidential)),
    );
    out
}

/// Run every seed (optionally across worker threads), aggregate, and emit
/// scenario.json plus an MF1 mean±std CSV table per variant.
pub fn cmd_scenario(
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
    workers: usize,
) -> Result<ScenarioSummary, CliError> {
    let workers = workers.max(1);
    let seeds = cfg.seeds.clone();

    let mut runs: Vec<Option<Result<SeedRun, CliError>>> = Vec::new();
    runs.resize_with(seeds.len(), || None);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (chunk_idx, chunk) in seeds.chunks(seeds.len().div_ceil(workers)).enumerate() {
            let chunk = chunk.to_vec();
            handles.push((
                chunk_idx,
                scope.spawn(move || {
                    chunk
                        .into_iter()
                        .map(|seed| run_seed(cfg, seed))
                        .collect::<Vec<_>>()
                }),
            ));
        }
        let per_worker = seeds.len().div_ceil(workers);
        for (chunk_idx, handle) in handles {
            for (i, r) in handle.join().expect("worker panicked").into_iter().enumerate() {
                runs[chunk_idx * per_worker + i] = Some(r);
            }
        }
    });

    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut all_reports = Vec::new();
    for r in runs.into_iter().flatten() {
        let run = r?;
        all_reports.push((run.outcome.seed, run.reports));
        per_seed.push(run.outcome);
    }

    let summary = ScenarioSummary {
        version: VERSION.to_string(),
        config: cfg.clone(),
        aggregate: aggregate(&per_seed),
        per_seed,
    };

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        for (seed, reports) in &all_reports {
            let seed_dir = dir.join(format!("seed_{seed}"));
            fs::create_dir_all(&seed_dir)?;
            for (name, report) in reports {
                write_json(&seed_dir.join(format!("{name}.json")), report)?;
            }
        }
        write_json(&dir.join("scenario.json"), &summary)?;
        let mut csv = String::from("variant,mf1_mean,mf1_std\n");
        for variant in ["source_only", "mapu", "emapu"] {
            let ms = &summary.aggregate[&format!("mf1_{variant}")];
            csv.push_str(&format!("{},{},{}\n", variant, ms.mean, ms.std));
        }
        fs::write(dir.join("aggregate.csv"), csv)?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskSpec;

    /// A deliberately tiny configuration so CLI-level tests stay fast.
    pub fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.n_per_domain = 60;
        cfg.model.channels = 2;
        cfg.model.classes = 3;
        cfg.model.len = 32;
        cfg.pretrain.epochs = 2;
        cfg.pretrain.batch_size = 8;
        cfg.pretrain.mask = MaskSpec {
            ratio: 0.25,
            n_blocks: 4,
        };
        cfg.adapt.epochs = 2;
        cfg.adapt.batch_size = 8;
        cfg.adapt.mask = cfg.pretrain.mask;
        cfg.seeds = vec![1];
        cfg
    }

    #[test]
    fn generate_writes_four_datasets() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        cmd_generate(&cfg, dir.path()).unwrap();
        for name in [
            "source_train.tsd",
            "source_test.tsd",
            "target_train.tsd",
            "target_test.tsd",
        ] {
            let ds = Dataset::load(&dir.path().join(name)).unwrap();
            assert_eq!(ds.channels, 2);
            assert_eq!(ds.classes, 3);
        }
    }

    #[test]
    fn pretrain_adapt_evaluate_chain() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        cmd_generate(&cfg, dir.path()).unwrap();
        let rep = cmd_pretrain(&cfg, dir.path(), dir.path()).unwrap();
        assert_eq!(rep.stage, "pretrain");
        assert!(dir.path().join("pretrained.ckpt").exists());

        let rep = cmd_adapt(
            &cfg,
            &dir.path().join("pretrained.ckpt"),
            &dir.path().join("target_train.tsd"),
            dir.path(),
        )
        .unwrap();
        assert_eq!(rep.stage, "adapt_mapu");

        let report = cmd_evaluate(
            &cfg,
            &dir.path().join("adapted.ckpt"),
            &dir.path().join("target_test.tsd"),
            dir.path(),
        )
        .unwrap();
        assert!(report.accuracy_softmax >= report.mf1_softmax || report.mf1_softmax >= 0.0);
        assert!((0.0..=2.0).contains(&report.calibration_softmax.brier));
        assert!(dir.path().join("metrics.json").exists());
        assert!(dir.path().join("calibration_softmax.csv").exists());
        assert!(dir.path().join("entropy_hist.csv").exists());
    }

    #[test]
    fn scenario_aggregates_all_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.seeds = vec![1, 2];
        let summary = cmd_scenario(&cfg, Some(dir.path()), 2).unwrap();
        assert_eq!(summary.per_seed.len(), 2);
        assert_eq!(summary.per_seed[0].seed, 1);
        assert_eq!(summary.per_seed[1].seed, 2);
        assert!(summary.aggregate.contains_key("mf1_emapu"));
        assert!(dir.path().join("scenario.json").exists());
        assert!(dir.path().join("aggregate.csv").exists());
        assert!(dir.path().join("seed_1/pretrain_mapu.json").exists());
        assert!(dir.path().join("seed_2/adapt_emapu.json").exists());
        let csv = fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn scenario_is_deterministic_across_worker_counts() {
        let mut cfg = tiny_config();
        cfg.seeds = vec![1, 2];
        let a = cmd_scenario(&cfg, None, 1).unwrap();
        let b = cmd_scenario(&cfg, None, 2).unwrap();
        let strip = |s: &ScenarioSummary| serde_json::to_string(&s.per_seed).unwrap();
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn exit_codes_map_by_error_class() {
        assert_eq!(CliError::Schema("x".into()).exit_code(), 2);
        assert_eq!(CliError::Io("x".into()).exit_code(), 3);
        assert_eq!(CliError::Numerical("x".into()).exit_code(), 4);
    }
}
