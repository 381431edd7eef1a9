//! Acceptance suite: one test per shipping criterion, each printing a
//! `criterion N: PASS/FAIL` line (visible with `--nocapture`; the per-test
//! ok/FAILED line from the harness mirrors it).
//!
//! Criteria 7-9 share one 3-seed desk-scale scenario, built once.

use std::sync::OnceLock;
use std::time::Instant;

use mapu::cli::{make_datasets, run_seed, SeedOutcome};
use mapu::config::ExperimentConfig;
use mapu::data::Dataset;
use mapu::diffmath::gradcheck::grad_check;
use mapu::diffmath::{special, Tape};
use mapu::evidential::{
    adjust_alpha, dirichlet_stats, evd_adaptation_loss, evd_ce, evd_diversity, evd_entropy,
    evd_selfsup, kl_to_uniform,
};
use mapu::losses::{imputation_mse, infomax_loss, smoothed_ce};
use mapu::masking::{temporal_mask, MaskSpec};
use mapu::nets::{
    ModelBundle, GROUP_CLASSIFIER, GROUP_ENCODER, GROUP_EVIDENTIAL, GROUP_IMPUTER,
};
use mapu::pipeline::{adapt_emapu, adapt_mapu, pretrain, TrainConfig, Variant};
use mapu::rng::Xoshiro256;

fn report(criterion: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion} ({name}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

// ---------------------------------------------------------------- fixtures

/// Desk-scale scenario shared by criteria 7-9: 3 seeds, default data
/// geometry and shift, epochs sized to fit the per-seed runtime budget.
struct Scenario {
    outcomes: Vec<SeedOutcome>,
    per_seed_secs: Vec<f64>,
}

const SCENARIO_SEEDS: [u64; 3] = [1, 2, 3];
const SCENARIO_PRETRAIN_EPOCHS: usize = 3;
const SCENARIO_ADAPT_EPOCHS: usize = 3;
const SCENARIO_LR: f64 = 1e-3;

static SCENARIO: OnceLock<Scenario> = OnceLock::new();

fn scenario() -> &'static Scenario {
    SCENARIO.get_or_init(|| {
        let mut cfg = ExperimentConfig::default();
        cfg.pretrain.epochs = SCENARIO_PRETRAIN_EPOCHS;
        cfg.pretrain.lr = SCENARIO_LR;
        cfg.adapt.epochs = SCENARIO_ADAPT_EPOCHS;
        cfg.adapt.lr = SCENARIO_LR;
        cfg.seeds = SCENARIO_SEEDS.to_vec();
        cfg.validate().unwrap();

        let mut outcomes = Vec::new();
        let mut per_seed_secs = Vec::new();
        for &seed in &SCENARIO_SEEDS {
            let t0 = Instant::now();
            let run = run_seed(&cfg, seed).unwrap();
            per_seed_secs.push(t0.elapsed().as_secs_f64());
            outcomes.push(run.outcome);
        }
        Scenario {
            outcomes,
            per_seed_secs,
        }
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Tiny geometry for the contract tests (5, 6, 10): fast but real training.
fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.n_per_domain = 60;
    cfg.model.channels = 2;
    cfg.model.classes = 3;
    cfg.model.len = 32;
    let mask = MaskSpec {
        ratio: 0.25,
        n_blocks: 4,
    };
    cfg.pretrain.epochs = 2;
    cfg.pretrain.batch_size = 8;
    cfg.pretrain.mask = mask;
    cfg.adapt.epochs = 2;
    cfg.adapt.batch_size = 8;
    cfg.adapt.mask = mask;
    cfg.seeds = vec![1];
    cfg
}

fn tiny_train_config(cfg: &ExperimentConfig, variant: Variant, seed: u64) -> TrainConfig {
    let mut tc = cfg.pretrain.clone();
    tc.seed = seed;
    tc.variant = variant;
    tc
}

// ------------------------------------------------- criterion 1: gradients

#[test]
fn criterion_01_gradient_suite() {
    const B: usize = 3;
    const K: usize = 4;
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-6;
    let t0 = Instant::now();
    let mut rng = Xoshiro256::new(0xACC1);
    let mut worst: f64 = 0.0;

    let mut run = |name: &str, f: &dyn Fn(&mut Tape, mapu::diffmath::Id) -> mapu::diffmath::Id,
                   point: &mut dyn FnMut(&mut Xoshiro256) -> Vec<f64>,
                   shape: &[usize]| {
        for _ in 0..20 {
            let p = point(&mut rng);
            let err = grad_check(f, &p, shape, H);
            assert!(err < TOL, "{name}: relative error {err:.3e} >= {TOL:.0e}");
            worst = worst.max(err);
        }
    };

    let logits_point = |rng: &mut Xoshiro256| -> Vec<f64> {
        (0..B * K).map(|_| rng.uniform_in(-3.0, 3.0)).collect()
    };
    let alpha_point = |rng: &mut Xoshiro256| -> Vec<f64> {
        (0..B * K).map(|_| rng.uniform_in(1.2, 5.0)).collect()
    };
    let labels: Vec<usize> = (0..B).map(|i| i % K).collect();
    let onehot = |tape: &mut Tape| {
        let mut y = vec![0.0; B * K];
        for (i, &l) in labels.iter().enumerate() {
            y[i * K + l] = 1.0;
        }
        tape.constant(y, vec![B, K])
    };

    run(
        "smoothed_ce",
        &|t, x| smoothed_ce(t, x, &[0, 1, 2], 0.1),
        &mut logits_point.clone(),
        &[B, K],
    );
    run(
        "imputation_mse",
        &|t, x| {
            let target = t.constant(vec![0.3; B * K], vec![B, K]);
            imputation_mse(t, target, x)
        },
        &mut logits_point.clone(),
        &[B, K],
    );
    run(
        "infomax",
        &|t, x| {
            let p = t.softmax(x);
            infomax_loss(t, p)
        },
        &mut logits_point.clone(),
        &[B, K],
    );
    run(
        "evd_ce",
        &|t, x| {
            let out = dirichlet_stats(t, x);
            let y = onehot(t);
            evd_ce(t, out.alpha, y)
        },
        &mut logits_point.clone(),
        &[B, K],
    );
    run(
        "kl_to_uniform",
        &|t, x| kl_to_uniform(t, x),
        &mut alpha_point.clone(),
        &[B, K],
    );
    run(
        "evd_entropy",
        &|t, x| {
            let out = dirichlet_stats(t, x);
            evd_entropy(t, out.probs)
        },
        &mut logits_point.clone(),
        &[B, K],
    );
    run(
        "evd_diversity",
        &|t, x| {
            let out = dirichlet_stats(t, x);
            evd_diversity(t, out.probs)
        },
        &mut logits_point.clone(),
        &[B, K],
    );
    run(
        "evd_selfsup",
        &|t, x| {
            let out = dirichlet_stats(t, x);
            evd_selfsup(t, out.alpha, 0.7)
        },
        &mut logits_point.clone(),
        &[B, K],
    );
    // combined evidential pretraining objective: evd_ce + λ·KL(adjusted α)
    run(
        "evidential_pretrain_combined",
        &|t, x| {
            let out = dirichlet_stats(t, x);
            let y = onehot(t);
            let ce = evd_ce(t, out.alpha, y);
            let adj = adjust_alpha(t, out.alpha, y);
            let kl = kl_to_uniform(t, adj);
            let kl_s = t.scale(kl, 0.7);
            t.add(ce, kl_s)
        },
        &mut logits_point.clone(),
        &[B, K],
    );
    // combined softmax adaptation objective: infomax + β·MSE
    run(
        "mapu_adapt_combined",
        &|t, x| {
            let p = t.softmax(x);
            let im = infomax_loss(t, p);
            let target = t.constant(vec![0.2; B * K], vec![B, K]);
            let mse = imputation_mse(t, target, x);
            let mse_s = t.scale(mse, 0.5);
            t.add(im, mse_s)
        },
        &mut logits_point.clone(),
        &[B, K],
    );
    // combined evidential adaptation objective: γ-weighted terms + β·MSE
    run(
        "emapu_adapt_combined",
        &|t, x| {
            let out = dirichlet_stats(t, x);
            let evd = evd_adaptation_loss(t, &out, 0.5, 0.5, 0.5, 0.7, false);
            let target = t.constant(vec![0.2; B * K], vec![B, K]);
            let mse = imputation_mse(t, target, x);
            let mse_s = t.scale(mse, 0.5);
            t.add(evd, mse_s)
        },
        &mut logits_point.clone(),
        &[B, K],
    );

    let secs = t0.elapsed().as_secs_f64();
    report(
        1,
        "gradient suite",
        worst < TOL && secs < 30.0,
        &format!("worst relative error {worst:.3e}, {secs:.1}s"),
    );
}

// ----------------------------------------- criterion 2: Dirichlet algebra

/// 10-point Gauss-Legendre nodes/weights on [-1, 1] (independent oracle,
/// duplicated here on purpose so the suite does not share code with the
/// implementation under test).
const GL_X: [f64; 10] = [
    -0.9739065285171717,
    -0.8650633666889845,
    -0.6794095682990244,
    -0.4333953941292472,
    -0.1488743389816312,
    0.1488743389816312,
    0.4333953941292472,
    0.6794095682990244,
    0.8650633666889845,
    0.9739065285171717,
];
const GL_W: [f64; 10] = [
    0.0666713443086881,
    0.1494513491505806,
    0.2190863625159820,
    0.2692667193099963,
    0.2955242247147529,
    0.2955242247147529,
    0.2692667193099963,
    0.2190863625159820,
    0.1494513491505806,
    0.0666713443086881,
];

fn integrate01(f: &dyn Fn(f64) -> f64, panels: usize) -> f64 {
    let h = 1.0 / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let a = p as f64 * h;
        for (x, w) in GL_X.iter().zip(&GL_W) {
            let t = a + h * 0.5 * (x + 1.0);
            total += w * 0.5 * h * f(t);
        }
    }
    total
}

fn ln_dir_norm(alpha: &[f64]) -> f64 {
    let s: f64 = alpha.iter().sum();
    special::lgamma(s) - alpha.iter().map(|&a| special::lgamma(a)).sum::<f64>()
}

fn kl_quadrature_k2(alpha: &[f64; 2]) -> f64 {
    let ln_c = ln_dir_norm(alpha);
    let f = |p: f64| -> f64 {
        if p <= 0.0 || p >= 1.0 {
            return 0.0;
        }
        let ln_f = ln_c + (alpha[0] - 1.0) * p.ln() + (alpha[1] - 1.0) * (1.0 - p).ln();
        ln_f.exp() * ln_f
    };
    integrate01(&f, 200)
}

fn kl_quadrature_k3(alpha: &[f64; 3]) -> f64 {
    let ln_c = ln_dir_norm(alpha);
    let ln_c_uniform = special::lgamma(3.0); // ln 2
    let g = |u: f64, v: f64| -> f64 {
        let p = [u, v * (1.0 - u), (1.0 - u) * (1.0 - v)];
        if p.iter().any(|&x| x <= 0.0) {
            return 0.0;
        }
        let ln_f = ln_c
            + p.iter()
                .zip(alpha)
                .map(|(&pi, &a)| (a - 1.0) * pi.ln())
                .sum::<f64>();
        ln_f.exp() * (ln_f - ln_c_uniform) * (1.0 - u)
    };
    let outer = |u: f64| integrate01(&|v| g(u, v), 60);
    integrate01(&outer, 60)
}

fn kl_closed(alpha: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let a = tape.leaf(alpha.to_vec(), vec![1, alpha.len()], false);
    let kl = kl_to_uniform(&mut tape, a);
    tape.scalar(kl)
}

/// α entries are exactly 1 with probability 0.3, else in [2, 8]; keeps the
/// quadrature integrand smooth while exercising the boundary α_k = 1.
fn random_alpha(rng: &mut Xoshiro256) -> f64 {
    if rng.uniform() < 0.3 {
        1.0
    } else {
        rng.uniform_in(2.0, 8.0)
    }
}

#[test]
fn criterion_02_dirichlet_identities() {
    let mut rng = Xoshiro256::new(0xACC2);

    // u + Σb = 1 on 10^4 random logit rows across K = 2..6
    let mut worst_identity: f64 = 0.0;
    for i in 0..10_000 {
        let k = 2 + i % 5;
        let logits: Vec<f64> = (0..k).map(|_| rng.uniform_in(-10.0, 10.0)).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(logits, vec![1, k], false);
        let out = dirichlet_stats(&mut tape, x);
        let u = tape.value(out.uncertainty)[0];
        let b_sum: f64 = tape.value(out.belief).iter().sum();
        worst_identity = worst_identity.max((u + b_sum - 1.0).abs());
    }

    // closed-form KL vs simplex quadrature, 50 cases each for K = 2 and 3
    let mut worst_quad: f64 = 0.0;
    for _ in 0..50 {
        let a2 = [random_alpha(&mut rng), random_alpha(&mut rng)];
        worst_quad = worst_quad.max((kl_closed(&a2) - kl_quadrature_k2(&a2)).abs());
        let a3 = [
            random_alpha(&mut rng),
            random_alpha(&mut rng),
            random_alpha(&mut rng),
        ];
        worst_quad = worst_quad.max((kl_closed(&a3) - kl_quadrature_k3(&a3)).abs());
    }

    // exact point: KL[Dir(2,1) ‖ Dir(1,1)] = ln 2 − 1/2
    let exact_err = (kl_closed(&[2.0, 1.0]) - (2.0f64.ln() - 0.5)).abs();

    report(
        2,
        "Dirichlet identities",
        worst_identity < 1e-12 && worst_quad < 1e-6 && exact_err < 1e-10,
        &format!(
            "u+Σb dev {worst_identity:.2e}, quadrature dev {worst_quad:.2e}, \
             KL(2,1) dev {exact_err:.2e}"
        ),
    );
}

// --------------------------------------- criterion 3: special functions

/// Independent high-precision references: push the recurrence to z ≥ 1000
/// with compensated summation, then two or three Bernoulli terms are exact
/// to ~1e-20. Duplicated from scratch rather than shared with the library.
mod series_oracle {
    const FAR: f64 = 1000.0;

    fn kahan_add(sum: &mut f64, comp: &mut f64, term: f64) {
        let y = term - *comp;
        let t = *sum + y;
        *comp = (t - *sum) - y;
        *sum = t;
    }

    pub fn lgamma_ref(x: f64) -> f64 {
        let mut z = x;
        let mut sum = 0.0;
        let mut comp = 0.0;
        while z < FAR {
            kahan_add(&mut sum, &mut comp, -z.ln());
            z += 1.0;
        }
        let inv = 1.0 / z;
        let inv2 = inv * inv;
        let tail = inv * (1.0 / 12.0 + inv2 * (-1.0 / 360.0 + inv2 * (1.0 / 1260.0)));
        sum + (z - 0.5) * z.ln() - z + 0.5 * (2.0 * std::f64::consts::PI).ln() + tail
    }

    pub fn digamma_ref(x: f64) -> f64 {
        let mut z = x;
        let mut sum = 0.0;
        let mut comp = 0.0;
        while z < FAR {
            kahan_add(&mut sum, &mut comp, -1.0 / z);
            z += 1.0;
        }
        let inv = 1.0 / z;
        let inv2 = inv * inv;
        let tail = inv2 * (1.0 / 12.0 + inv2 * (-1.0 / 120.0 + inv2 * (1.0 / 252.0)));
        sum + z.ln() - 0.5 * inv - tail
    }
}

#[test]
fn criterion_03_special_functions() {
    let mut worst_ref: f64 = 0.0;
    let mut worst_rec: f64 = 0.0;
    for i in 1..=1000 {
        let x = i as f64 / 10.0; // 0.1, 0.2, …, 100.0
        worst_ref = worst_ref.max((special::digamma(x) - series_oracle::digamma_ref(x)).abs());
        worst_ref = worst_ref.max((special::lgamma(x) - series_oracle::lgamma_ref(x)).abs());
        worst_rec =
            worst_rec.max((special::digamma(x + 1.0) - special::digamma(x) - 1.0 / x).abs());
    }
    report(
        3,
        "digamma/lgamma",
        worst_ref < 1e-10 && worst_rec < 1e-12,
        &format!("oracle dev {worst_ref:.2e}, recurrence dev {worst_rec:.2e}"),
    );
}

// ------------------------------------------- criterion 4: mask exactness

#[test]
fn criterion_04_masking_exactness() {
    const B: usize = 16;
    const C: usize = 3;
    const L: usize = 128;
    let spec = MaskSpec {
        ratio: 1.0 / 8.0,
        n_blocks: 8,
    };
    let mut rng = Xoshiro256::new(0xACC4);
    let x: Vec<f64> = (0..B * C * L).map(|_| rng.normal()).collect();
    let mut rngs: Vec<Xoshiro256> = (0..B)
        .map(|i| Xoshiro256::new(0x9000 + i as u64))
        .collect();
    let (masked, block_masks) = temporal_mask(&x, B, C, L, &spec, &mut rngs);

    let mut ok = true;
    for b in 0..B {
        assert_eq!(block_masks[b].iter().filter(|&&m| m).count(), 1);
        for c in 0..C {
            let off = (b * C + c) * L;
            let zeroed = (0..L)
                .filter(|&t| masked[off + t] != x[off + t])
                .collect::<Vec<_>>();
            ok &= zeroed.len() == 16;
            ok &= zeroed.iter().all(|&t| masked[off + t] == 0.0);
            // contiguity: one block of 16 timesteps
            ok &= zeroed.windows(2).all(|w| w[1] == w[0] + 1);
            // unmasked positions bit-identical
            ok &= (0..L)
                .filter(|t| !zeroed.contains(t))
                .all(|t| masked[off + t].to_bits() == x[off + t].to_bits());
        }
    }
    report(
        4,
        "masking exactness",
        ok,
        "16 contiguous zeroed timesteps per channel, rest bit-identical",
    );
}

// -------------------------------------------- criterion 5: freeze contract

#[test]
fn criterion_05_freeze_contracts() {
    let cfg = tiny_config();
    let data = make_datasets(&cfg, 1).unwrap();

    let mut ok = true;
    let mut detail = String::new();
    for variant in [Variant::Mapu, Variant::Emapu] {
        let tc = tiny_train_config(&cfg, variant, 1);
        let mut bundle = ModelBundle::init(cfg.model.channels, cfg.model.classes, 1);
        pretrain(&mut bundle, &data.source_train, &tc).unwrap();

        let before: Vec<Vec<u8>> = bundle.groups.iter().map(|g| g.value_bytes()).collect();
        match variant {
            Variant::Mapu => adapt_mapu(&mut bundle, &data.target_train, &tc).unwrap(),
            Variant::Emapu => adapt_emapu(&mut bundle, &data.target_train, &tc).unwrap(),
        };

        let frozen_ok = bundle.groups[GROUP_CLASSIFIER].value_bytes() == before[GROUP_CLASSIFIER]
            && bundle.groups[GROUP_IMPUTER].value_bytes() == before[GROUP_IMPUTER]
            && bundle.groups[GROUP_EVIDENTIAL].value_bytes() == before[GROUP_EVIDENTIAL];
        let encoder_moved = bundle.groups[GROUP_ENCODER].value_bytes() != before[GROUP_ENCODER];
        ok &= frozen_ok && encoder_moved;
        detail.push_str(&format!(
            "{variant:?}: heads byte-identical {frozen_ok}, encoder moved {encoder_moved}; "
        ));
    }
    report(5, "freeze contracts", ok, detail.trim_end_matches("; "));
}

// --------------------------------------- criterion 6: stop-gradient check

#[test]
fn criterion_06_stop_gradient() {
    // If imputation gradients reached the encoder, freezing the imputer
    // would change the encoder trajectory (the imputer weights diverge
    // between the two runs after the first step). Byte-identical encoders
    // prove the imputation loss is fully detached from it.
    let cfg = tiny_config();
    let data = make_datasets(&cfg, 1).unwrap();

    let mut ok = true;
    let mut detail = String::new();
    for variant in [Variant::Mapu, Variant::Emapu] {
        let tc = tiny_train_config(&cfg, variant, 1);
        let mut with_imp = ModelBundle::init(cfg.model.channels, cfg.model.classes, 1);
        pretrain(&mut with_imp, &data.source_train, &tc).unwrap();

        let mut without_imp = ModelBundle::init(cfg.model.channels, cfg.model.classes, 1);
        without_imp.set_trainable(GROUP_IMPUTER, false);
        pretrain(&mut without_imp, &data.source_train, &tc).unwrap();

        let encoder_same = with_imp.groups[GROUP_ENCODER].value_bytes()
            == without_imp.groups[GROUP_ENCODER].value_bytes();
        let imputer_trained = with_imp.groups[GROUP_IMPUTER].value_bytes()
            != without_imp.groups[GROUP_IMPUTER].value_bytes();
        ok &= encoder_same && imputer_trained;
        detail.push_str(&format!(
            "{variant:?}: encoder bit-identical {encoder_same}, imputer trained {imputer_trained}; "
        ));
    }
    report(6, "stop-gradient contract", ok, detail.trim_end_matches("; "));
}

// ------------------------------------- criteria 7-9: desk-scale scenario

#[test]
fn criterion_07_desk_scale_adaptation_gain() {
    let s = scenario();
    let src = mean(s.outcomes.iter().map(|o| o.mf1_source_only));
    let mapu = mean(s.outcomes.iter().map(|o| o.mf1_mapu));
    let emapu = mean(s.outcomes.iter().map(|o| o.mf1_emapu));
    let max_secs = s.per_seed_secs.iter().cloned().fold(0.0, f64::max);

    let pass = mapu >= src + 0.05 && emapu >= src + 0.05 && emapu >= mapu - 0.01
        && max_secs < 600.0;
    report(
        7,
        "desk-scale adaptation gain",
        pass,
        &format!(
            "MF1 source-only {src:.3}, adapted {mapu:.3} / {emapu:.3} (evidential), \
             slowest seed {max_secs:.0}s"
        ),
    );
}

#[test]
fn criterion_08_calibration_direction() {
    let s = scenario();
    let ece_soft = mean(s.outcomes.iter().map(|o| o.ece_softmax));
    let ece_evd = mean(s.outcomes.iter().map(|o| o.ece_evidential));
    let brier_soft = mean(s.outcomes.iter().map(|o| o.brier_softmax));
    let brier_evd = mean(s.outcomes.iter().map(|o| o.brier_evidential));

    let pass = ece_evd <= ece_soft - 0.01 && brier_evd < brier_soft;
    report(
        8,
        "calibration direction",
        pass,
        &format!(
            "ECE {ece_soft:.3} → {ece_evd:.3}, Brier {brier_soft:.3} → {brier_evd:.3} \
             (softmax → evidential)"
        ),
    );
}

#[test]
fn criterion_09_entropy_separation() {
    let s = scenario();
    let gap_soft = mean(s.outcomes.iter().map(|o| o.entropy_gap_softmax));
    let gap_evd = mean(s.outcomes.iter().map(|o| o.entropy_gap_evidential));

    let pass = gap_evd > 0.0 && gap_evd > gap_soft;
    report(
        9,
        "entropy separation",
        pass,
        &format!("target−source entropy gap: softmax {gap_soft:.3}, evidential {gap_evd:.3}"),
    );
}

// --------------------------------- criterion 10: determinism and formats

#[test]
fn criterion_10_determinism_and_formats() {
    let cfg = tiny_config();

    // identical config+seed reproduce every report byte-for-byte once
    // wall-time fields are zeroed
    let canonical = |seed: u64| -> String {
        let mut run = run_seed(&cfg, seed).unwrap();
        for (_, rep) in &mut run.reports {
            rep.wall_time_secs = 0.0;
        }
        let reports: Vec<_> = run.reports.iter().map(|(n, r)| (n.clone(), r)).collect();
        serde_json::to_string(&(&run.outcome, reports)).unwrap()
    };
    let deterministic = canonical(1) == canonical(1);

    // dataset and checkpoint files round-trip bit-exactly
    let dir = tempfile::tempdir().unwrap();
    let data = make_datasets(&cfg, 1).unwrap();
    let ds_path = dir.path().join("a.tsd");
    data.source_train.save(&ds_path).unwrap();
    let loaded = Dataset::load(&ds_path).unwrap();
    let ds_path2 = dir.path().join("b.tsd");
    loaded.save(&ds_path2).unwrap();
    let ds_roundtrip = std::fs::read(&ds_path).unwrap() == std::fs::read(&ds_path2).unwrap();

    let bundle = ModelBundle::init(cfg.model.channels, cfg.model.classes, 7);
    let ck_path = dir.path().join("a.ckpt");
    bundle.save(&ck_path).unwrap();
    let reloaded = ModelBundle::load(&ck_path).unwrap();
    let ck_path2 = dir.path().join("b.ckpt");
    reloaded.save(&ck_path2).unwrap();
    let ck_roundtrip = std::fs::read(&ck_path).unwrap() == std::fs::read(&ck_path2).unwrap();

    // 28-byte dataset header against a hand-written fixture
    let ds = &data.source_train;
    let mut expect = Vec::new();
    expect.extend_from_slice(b"TSD1");
    expect.extend_from_slice(&1u32.to_le_bytes());
    expect.extend_from_slice(&(ds.n as u64).to_le_bytes());
    expect.extend_from_slice(&(ds.channels as u32).to_le_bytes());
    expect.extend_from_slice(&(ds.len as u32).to_le_bytes());
    expect.extend_from_slice(&(ds.classes as u32).to_le_bytes());
    assert_eq!(expect.len(), 28);
    let header_ok = std::fs::read(&ds_path).unwrap()[..28] == expect[..];

    report(
        10,
        "determinism and formats",
        deterministic && ds_roundtrip && ck_roundtrip && header_ok,
        &format!(
            "reports deterministic {deterministic}, dataset round-trip {ds_roundtrip}, \
             checkpoint round-trip {ck_roundtrip}, header fixture {header_ok}"
        ),
    );
}
