//! Training procedures: source pretraining, the two target-adaptation loops,
//! the Adam optimizer, and eval-mode inference.
//!
//! Every loop is deterministic in (config, dataset, seed): batch order,
//! masking patterns, and initialization all derive from the run seed through
//! fixed stream tags. Any non-finite loss or gradient aborts with the epoch
//! and batch where it appeared.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diffmath::{Id, Tape};
use crate::evidential::{
    adjust_alpha, dirichlet_stats, evd_adaptation_loss, evd_ce, evd_entropy, kl_to_uniform,
    lambda_schedule,
};
use crate::losses::{imputation_mse, infomax_loss, smoothed_ce};
use crate::masking::{temporal_mask, MaskSpec};
use crate::nets::{
    BoundParams, ModelBundle, GROUP_CLASSIFIER, GROUP_ENCODER, GROUP_EVIDENTIAL, GROUP_IMPUTER,
    GROUP_STATS,
};
use crate::rng::{seed_for, Xoshiro256};

const STREAM_BATCH_ORDER: u64 = 1;
const STREAM_MASK: u64 = 2;

pub const LABEL_SMOOTHING: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("dataset has {data_k} classes but model expects {model_k}")]
    ClassMismatch { data_k: usize, model_k: usize },
    #[error("non-finite {what} in {stage}, epoch {epoch}, batch {batch}")]
    NonFinite {
        what: String,
        stage: String,
        epoch: usize,
        batch: usize,
    },
    #[error("invalid config: {0}")]
    BadConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Mapu,
    Emapu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub variant: Variant,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    /// β weighting the imputation term during adaptation.
    pub beta_imp: f64,
    pub mask: MaskSpec,
    pub bn_update_during_adapt: bool,
    pub negate_entropy_terms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            variant: Variant::Mapu,
            gamma1: 0.5,
            gamma2: 0.5,
            gamma3: 0.5,
            beta_imp: 0.5,
            mask: MaskSpec::default(),
            bn_update_during_adapt: true,
            negate_entropy_terms: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.batch_size < 2 {
            return Err(PipelineError::BadConfig(
                "batch size below 2 breaks batch statistics".into(),
            ));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(PipelineError::BadConfig(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        for (name, v) in [
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("gamma3", self.gamma3),
            ("beta_imp", self.beta_imp),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(PipelineError::BadConfig(format!(
                    "{name} = {v} must be non-negative"
                )));
            }
        }
        self.mask.validate().map_err(PipelineError::BadConfig)?;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub stage: String,
    pub variant: Variant,
    pub seed: u64,
    pub epochs: usize,
    /// Whether the input bundle looked pretrained (running stats moved off
    /// their init values). Adaptation of a fresh bundle is permitted but
    /// flagged here.
    pub pretrained_input: bool,
    /// Per-epoch means of each named loss component.
    pub loss_series: BTreeMap<String, Vec<f64>>,
    /// Excluded from determinism comparisons.
    pub wall_time_secs: f64,
    pub config: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub metrics: Option<serde_json::Value>,
}

impl RunReport {
    fn new(stage: &str, cfg: &TrainConfig, pretrained_input: bool) -> Self {
        RunReport {
            stage: stage.to_string(),
            variant: cfg.variant,
            seed: cfg.seed,
            epochs: cfg.epochs,
            pretrained_input,
            loss_series: BTreeMap::new(),
            wall_time_secs: 0.0,
            config: cfg.clone(),
            metrics: None,
        }
    }

    fn push(&mut self, name: &str, value: f64) {
        self.loss_series.entry(name.to_string()).or_default().push(value);
    }
}

// ---- optimizer ----

#[derive(Clone, Debug)]
pub struct AdamState {
    /// First/second moment per (group, param), parallel to the bundle.
    m: Vec<Vec<Vec<f64>>>,
    v: Vec<Vec<Vec<f64>>>,
    t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(bundle: &ModelBundle) -> Self {
        let zeros = |b: &ModelBundle| {
            b.groups[..GROUP_STATS]
                .iter()
                .map(|g| g.params.iter().map(|p| vec![0.0; p.data.len()]).collect())
                .collect()
        };
        AdamState {
            m: zeros(bundle),
            v: zeros(bundle),
            t: 0,
        }
    }
}

/// One Adam step over the trainable groups, reading `param.grad`. Frozen
/// groups are skipped entirely (their moments do not decay).
pub fn adam_step(bundle: &mut ModelBundle, state: &mut AdamState, lr: f64) -> Result<(), String> {
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (gi, g) in bundle.groups[..GROUP_STATS].iter_mut().enumerate() {
        if !g.trainable {
            continue;
        }
        for (pi, p) in g.params.iter_mut().enumerate() {
            let m = &mut state.m[gi][pi];
            let v = &mut state.v[gi][pi];
            for i in 0..p.data.len() {
                let grad = p.grad[i];
                if !grad.is_finite() {
                    return Err(format!("gradient of {} is not finite", p.name));
                }
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad * grad;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
    Ok(())
}

// ---- batching and shared forward pieces ----

fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = Xoshiro256::new(seed_for(seed, &[STREAM_BATCH_ORDER, epoch as u64]));
    rng.shuffle(&mut idx);
    idx.chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

fn mask_rngs(seed: u64, epoch: usize, samples: &[usize]) -> Vec<Xoshiro256> {
    samples
        .iter()
        .map(|&i| Xoshiro256::new(seed_for(seed, &[STREAM_MASK, epoch as u64, i as u64])))
        .collect()
}

fn onehot(tape: &mut Tape, labels: &[usize], k: usize) -> Id {
    let mut y = vec![0.0; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        y[i * k + l] = 1.0;
    }
    tape.constant(y, vec![labels.len(), k])
}

fn check_finite(
    value: f64,
    what: &str,
    stage: &str,
    epoch: usize,
    batch: usize,
) -> Result<(), PipelineError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(PipelineError::NonFinite {
            what: what.to_string(),
            stage: stage.to_string(),
            epoch,
            batch,
        })
    }
}

/// Heuristic pretrained-ness check: init leaves running stats at (0, 1);
/// any pretraining epoch moves them.
fn looks_pretrained(bundle: &ModelBundle) -> bool {
    bundle.groups[GROUP_STATS].params.iter().any(|p| {
        let init = if p.name.ends_with("var") { 1.0 } else { 0.0 };
        p.data.iter().any(|&v| v != init)
    })
}

fn require_classes(bundle: &ModelBundle, ds: &Dataset) -> Result<(), PipelineError> {
    if ds.classes != bundle.k {
        return Err(PipelineError::ClassMismatch {
            data_k: ds.classes,
            model_k: bundle.k,
        });
    }
    Ok(())
}

struct MaskedPass {
    /// clean features [B,128,L]
    features: Id,
    /// imputer output on masked features [B,128,L]
    imputed: Id,
}

/// Run clean + masked encoder passes and the imputer. When `detach` is set
/// (pretraining), the imputer sees gradient-detached features on both sides,
/// so the imputation loss cannot reach the encoder.
#[allow(clippy::too_many_arguments)]
fn masked_forward(
    bundle: &mut ModelBundle,
    tape: &mut Tape,
    bound: &BoundParams,
    x: Id,
    x_masked: Id,
    detach: bool,
    update_stats: bool,
) -> MaskedPass {
    let features = bundle.encode(tape, bound, x, true, update_stats);
    // the masked pass never updates running statistics
    let masked_features = bundle.encode(tape, bound, x_masked, true, false);
    let imputer_input = if detach {
        tape.detach(masked_features)
    } else {
        masked_features
    };
    let imputed = bundle.impute(tape, bound, imputer_input);
    MaskedPass { features, imputed }
}

// ---- pretraining ----

/// Source pretraining. MAPU trains encoder+classifier with smoothed CE;
/// E-MAPU trains encoder+evidential head with the evidential loss
/// (evd_ce + λ_t·KL of adjusted α) and fits the classifier on detached
/// features as an auxiliary head. In both variants the imputer learns to
/// reconstruct gradient-detached clean features from masked ones.
pub fn pretrain(
    bundle: &mut ModelBundle,
    source: &Dataset,
    cfg: &TrainConfig,
) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    require_classes(bundle, source)?;
    let stage = "pretrain";
    let start = Instant::now();
    let mut report = RunReport::new(stage, cfg, false);
    let mut adam = AdamState::new(bundle);

    for epoch in 0..cfg.epochs {
        let lambda = lambda_schedule(epoch);
        let batches = epoch_batches(source.n, cfg.batch_size, cfg.seed, epoch);
        let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
        let mut n_batches = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let x_data = source.batch_f64(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| source.labels[i] as usize).collect();
            let mut rngs = mask_rngs(cfg.seed, epoch, batch);
            let (x_masked_data, _) = temporal_mask(
                &x_data,
                batch.len(),
                source.channels,
                source.len,
                &cfg.mask,
                &mut rngs,
            );

            let mut tape = Tape::new();
            let bound = bundle.bind(&mut tape);
            let shape = vec![batch.len(), source.channels, source.len];
            let x = tape.leaf(x_data, shape.clone(), false);
            let x_masked = tape.leaf(x_masked_data, shape, false);
            let pass = masked_forward(bundle, &mut tape, &bound, x, x_masked, true, true);

            let pooled = bundle.pool(&mut tape, pass.features);
            let cls_loss = match cfg.variant {
                Variant::Mapu => {
                    let logits = bundle.classify(&mut tape, &bound, pooled);
                    smoothed_ce(&mut tape, logits, &labels, LABEL_SMOOTHING)
                }
                Variant::Emapu => {
                    let ev_logits = bundle.evidential_logits(&mut tape, &bound, pooled);
                    let out = dirichlet_stats(&mut tape, ev_logits);
                    let y = onehot(&mut tape, &labels, bundle.k);
                    let ce = evd_ce(&mut tape, out.alpha, y);
                    let adj = adjust_alpha(&mut tape, out.alpha, y);
                    let kl = kl_to_uniform(&mut tape, adj);
                    let kl_scaled = tape.scale(kl, lambda);
                    tape.add(ce, kl_scaled)
                }
            };

            // auxiliary classifier for emapu: fit g on detached features so
            // the evidential objective alone shapes the encoder
            let aux_loss = match cfg.variant {
                Variant::Mapu => None,
                Variant::Emapu => {
                    let frozen_feats = tape.detach(pooled);
                    let logits = bundle.classify(&mut tape, &bound, frozen_feats);
                    Some(smoothed_ce(&mut tape, logits, &labels, LABEL_SMOOTHING))
                }
            };

            let detached_clean = tape.detach(pass.features);
            let imp_loss = imputation_mse(&mut tape, detached_clean, pass.imputed);

            let mut total = tape.add(cls_loss, imp_loss);
            if let Some(aux) = aux_loss {
                total = tape.add(total, aux);
            }
            check_finite(tape.scalar(total), "loss", stage, epoch, bi)?;

            tape.backward(total);
            bundle.zero_grads();
            bundle.accumulate_grads(&tape, &bound);
            adam_step(bundle, &mut adam, cfg.lr).map_err(|what| PipelineError::NonFinite {
                what,
                stage: stage.to_string(),
                epoch,
                batch: bi,
            })?;

            *sums.entry("classification").or_default() += tape.scalar(cls_loss);
            *sums.entry("imputation").or_default() += tape.scalar(imp_loss);
            if let Some(aux) = aux_loss {
                *sums.entry("aux_classifier").or_default() += tape.scalar(aux);
            }
            n_batches += 1;
        }
        for (name, sum) in sums {
            report.push(name, sum / n_batches.max(1) as f64);
        }
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

// ---- adaptation ----

fn freeze_for_adaptation(bundle: &mut ModelBundle, variant: Variant) -> Vec<bool> {
    let saved: Vec<bool> = bundle.groups[..GROUP_STATS]
        .iter()
        .map(|g| g.trainable)
        .collect();
    bundle.set_trainable(GROUP_ENCODER, true);
    bundle.set_trainable(GROUP_CLASSIFIER, false);
    bundle.set_trainable(GROUP_IMPUTER, false);
    bundle.set_trainable(
        GROUP_EVIDENTIAL,
        // the evidential head is unused by MAPU adaptation either way
        false,
    );
    let _ = variant;
    saved
}

fn restore_trainable(bundle: &mut ModelBundle, saved: &[bool]) {
    for (gi, &t) in saved.iter().enumerate() {
        bundle.groups[gi].trainable = t;
    }
}

/// MAPU target adaptation: encoder-only optimization of
/// infomax(softmax(g(pool(f(x))))) + β·MSE(j(f(masked x)), f(x)) with the
/// classifier and imputer frozen.
pub fn adapt_mapu(
    bundle: &mut ModelBundle,
    target: &Dataset,
    cfg: &TrainConfig,
) -> Result<RunReport, PipelineError> {
    adapt_impl(bundle, target, cfg, Variant::Mapu)
}

/// E-MAPU target adaptation: encoder-only optimization of the weighted
/// evidential objective plus β·MSE, with classifier, imputer, and evidential
/// head frozen.
pub fn adapt_emapu(
    bundle: &mut ModelBundle,
    target: &Dataset,
    cfg: &TrainConfig,
) -> Result<RunReport, PipelineError> {
    adapt_impl(bundle, target, cfg, Variant::Emapu)
}

fn adapt_impl(
    bundle: &mut ModelBundle,
    target: &Dataset,
    cfg: &TrainConfig,
    variant: Variant,
) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    require_classes(bundle, target)?;
    let stage = match variant {
        Variant::Mapu => "adapt_mapu",
        Variant::Emapu => "adapt_emapu",
    };
    let start = Instant::now();
    let mut report = RunReport::new(stage, cfg, looks_pretrained(bundle));
    let saved = freeze_for_adaptation(bundle, variant);
    let mut adam = AdamState::new(bundle);

    let result = (|| {
        for epoch in 0..cfg.epochs {
            let lambda = lambda_schedule(epoch);
            let batches = epoch_batches(target.n, cfg.batch_size, cfg.seed, epoch);
            let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
            let mut n_batches = 0usize;
            for (bi, batch) in batches.iter().enumerate() {
                let x_data = target.batch_f64(batch);
                let mut rngs = mask_rngs(cfg.seed, epoch, batch);
                let (x_masked_data, _) = temporal_mask(
                    &x_data,
                    batch.len(),
                    target.channels,
                    target.len,
                    &cfg.mask,
                    &mut rngs,
                );

                let mut tape = Tape::new();
                let bound = bundle.bind(&mut tape);
                let shape = vec![batch.len(), target.channels, target.len];
                let x = tape.leaf(x_data, shape.clone(), false);
                let x_masked = tape.leaf(x_masked_data, shape, false);
                let pass = masked_forward(
                    bundle,
                    &mut tape,
                    &bound,
                    x,
                    x_masked,
                    false,
                    cfg.bn_update_during_adapt,
                );

                let pooled = bundle.pool(&mut tape, pass.features);
                let main_loss = match variant {
                    Variant::Mapu => {
                        let logits = bundle.classify(&mut tape, &bound, pooled);
                        let probs = tape.softmax(logits);
                        infomax_loss(&mut tape, probs)
                    }
                    Variant::Emapu => {
                        let ev_logits = bundle.evidential_logits(&mut tape, &bound, pooled);
                        let out = dirichlet_stats(&mut tape, ev_logits);
                        let ent = evd_entropy(&mut tape, out.probs);
                        *sums.entry("evd_entropy").or_default() += tape.scalar(ent);
                        evd_adaptation_loss(
                            &mut tape,
                            &out,
                            cfg.gamma1,
                            cfg.gamma2,
                            cfg.gamma3,
                            lambda,
                            cfg.negate_entropy_terms,
                        )
                    }
                };

                let imp_loss = imputation_mse(&mut tape, pass.features, pass.imputed);
                let imp_scaled = tape.scale(imp_loss, cfg.beta_imp);
                let total = tape.add(main_loss, imp_scaled);
                check_finite(tape.scalar(total), "loss", stage, epoch, bi)?;

                tape.backward(total);
                bundle.zero_grads();
                bundle.accumulate_grads(&tape, &bound);
                adam_step(bundle, &mut adam, cfg.lr).map_err(|what| PipelineError::NonFinite {
                    what,
                    stage: stage.to_string(),
                    epoch,
                    batch: bi,
                })?;

                let main_name = match variant {
                    Variant::Mapu => "infomax",
                    Variant::Emapu => "evidential",
                };
                *sums.entry(main_name).or_default() += tape.scalar(main_loss);
                *sums.entry("imputation").or_default() += tape.scalar(imp_loss);
                n_batches += 1;
            }
            for (name, sum) in sums {
                report.push(name, sum / n_batches.max(1) as f64);
            }
        }
        Ok(())
    })();
    restore_trainable(bundle, &saved);
    result?;
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

// ---- evaluation ----

/// Eval-mode predictions over a dataset.
pub struct Evaluation {
    pub pred_softmax: Vec<usize>,
    pub pred_evidential: Vec<usize>,
    /// softmax(g(pool(f(x)))), [n,K] row-major
    pub softmax_probs: Vec<f64>,
    /// Dirichlet mean p̂ = α/S from the evidential head, [n,K]
    pub evd_probs: Vec<f64>,
}

pub fn evaluate(bundle: &mut ModelBundle, ds: &Dataset) -> Result<Evaluation, PipelineError> {
    require_classes(bundle, ds)?;
    let k = bundle.k;
    let mut softmax_probs = Vec::with_capacity(ds.n * k);
    let mut evd_probs = Vec::with_capacity(ds.n * k);

    let chunk = 64usize;
    let mut i0 = 0;
    while i0 < ds.n {
        let idx: Vec<usize> = (i0..(i0 + chunk).min(ds.n)).collect();
        let x_data = ds.batch_f64(&idx);
        let mut tape = Tape::new();
        let bound = bundle.bind(&mut tape);
        let x = tape.leaf(x_data, vec![idx.len(), ds.channels, ds.len], false);
        let features = bundle.encode(&mut tape, &bound, x, false, false);
        let pooled = bundle.pool(&mut tape, features);
        let logits = bundle.classify(&mut tape, &bound, pooled);
        let sm = tape.softmax(logits);
        softmax_probs.extend_from_slice(tape.value(sm));
        let ev_logits = bundle.evidential_logits(&mut tape, &bound, pooled);
        let out = dirichlet_stats(&mut tape, ev_logits);
        evd_probs.extend_from_slice(tape.value(out.probs));
        i0 += chunk;
    }

    let argmax_rows = |probs: &[f64]| -> Vec<usize> {
        probs
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    };
    Ok(Evaluation {
        pred_softmax: argmax_rows(&softmax_probs),
        pred_evidential: argmax_rows(&evd_probs),
        softmax_probs,
        evd_probs,
    })
}
