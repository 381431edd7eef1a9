//! The four networks: encoder, classifier, temporal imputer, evidential head.
//!
//! A `ModelBundle` owns all parameters as named f64 buffers grouped by
//! network. Each training step binds the groups onto a fresh tape as leaves
//! (`bind`), builds the forward graph, and pulls gradients back with
//! `accumulate_grads`. A group flagged non-trainable binds with
//! `requires = false`, so no gradient is ever produced for it and its bytes
//! cannot change under optimization.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::diffmath::{Id, Tape};
use crate::rng::{seed_for, Xoshiro256};

pub const CKPT_MAGIC: &[u8; 4] = b"MDL1";

pub const FEATURES: usize = 128;
pub const KERNEL: usize = 8;
/// Same-length padding for kernel 8, stride 1 (total pad 7 must split unevenly).
pub const PAD_L: usize = 3;
pub const PAD_R: usize = 4;
const CONV_CHANNELS: [usize; 3] = [64, 128, 128];

pub const GROUP_ENCODER: usize = 0;
pub const GROUP_CLASSIFIER: usize = 1;
pub const GROUP_IMPUTER: usize = 2;
pub const GROUP_EVIDENTIAL: usize = 3;
pub const GROUP_STATS: usize = 4;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic: expected MDL1")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    fn new(name: &str, shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let n = data.len();
        Param {
            name: name.to_string(),
            shape,
            data,
            grad: vec![0.0; n],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub trainable: bool,
    pub params: Vec<Param>,
}

impl ParamGroup {
    /// Serialized value bytes of the whole group, for freeze-contract checks.
    pub fn value_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in &self.params {
            for &v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Tape leaf ids for the four bindable groups, parallel to
/// `ModelBundle::groups[..4]`.
pub struct BoundParams {
    pub ids: Vec<Vec<Id>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub cin: usize,
    pub k: usize,
    /// Fixed order: encoder, classifier, imputer, evidential, stats.
    pub groups: Vec<ParamGroup>,
}

fn he_uniform(rng: &mut Xoshiro256, fan_in: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.uniform_in(-limit, limit)).collect()
}

impl ModelBundle {
    pub fn init(cin: usize, k: usize, seed: u64) -> ModelBundle {
        assert!(cin >= 1, "need at least one input channel");
        assert!(k >= 2, "need at least two classes");
        let mut pidx = 0u64;
        let mut rng_for = |g: u64| {
            pidx += 1;
            Xoshiro256::new(seed_for(seed, &[g, pidx]))
        };

        let mut enc = Vec::new();
        let mut in_ch = cin;
        for (b, &out_ch) in CONV_CHANNELS.iter().enumerate() {
            let i = b + 1;
            let fan_in = in_ch * KERNEL;
            enc.push(Param::new(
                &format!("enc.conv{i}.w"),
                vec![out_ch, in_ch, KERNEL],
                he_uniform(&mut rng_for(0), fan_in, out_ch * in_ch * KERNEL),
            ));
            enc.push(Param::new(
                &format!("enc.conv{i}.b"),
                vec![out_ch],
                vec![0.0; out_ch],
            ));
            enc.push(Param::new(
                &format!("enc.bn{i}.gamma"),
                vec![out_ch],
                vec![1.0; out_ch],
            ));
            enc.push(Param::new(
                &format!("enc.bn{i}.beta"),
                vec![out_ch],
                vec![0.0; out_ch],
            ));
            in_ch = out_ch;
        }

        let cls = vec![
            Param::new(
                "cls.w",
                vec![FEATURES, k],
                he_uniform(&mut rng_for(1), FEATURES, FEATURES * k),
            ),
            Param::new("cls.b", vec![k], vec![0.0; k]),
        ];

        let imp = vec![
            Param::new(
                "imp.w_ih",
                vec![FEATURES, FEATURES],
                he_uniform(&mut rng_for(2), FEATURES, FEATURES * FEATURES),
            ),
            Param::new(
                "imp.w_hh",
                vec![FEATURES, FEATURES],
                he_uniform(&mut rng_for(2), FEATURES, FEATURES * FEATURES),
            ),
            Param::new("imp.b_h", vec![FEATURES], vec![0.0; FEATURES]),
            Param::new(
                "imp.readout.w",
                vec![FEATURES, FEATURES],
                he_uniform(&mut rng_for(2), FEATURES, FEATURES * FEATURES),
            ),
            Param::new("imp.readout.b", vec![FEATURES], vec![0.0; FEATURES]),
        ];

        let evd = vec![
            Param::new(
                "evd.w",
                vec![FEATURES, k],
                he_uniform(&mut rng_for(3), FEATURES, FEATURES * k),
            ),
            Param::new("evd.b", vec![k], vec![0.0; k]),
        ];

        let mut stats = Vec::new();
        for (b, &out_ch) in CONV_CHANNELS.iter().enumerate() {
            let i = b + 1;
            stats.push(Param::new(
                &format!("stats.bn{i}.mean"),
                vec![out_ch],
                vec![0.0; out_ch],
            ));
            stats.push(Param::new(
                &format!("stats.bn{i}.var"),
                vec![out_ch],
                vec![1.0; out_ch],
            ));
        }

        ModelBundle {
            cin,
            k,
            groups: vec![
                ParamGroup {
                    name: "encoder".into(),
                    trainable: true,
                    params: enc,
                },
                ParamGroup {
                    name: "classifier".into(),
                    trainable: true,
                    params: cls,
                },
                ParamGroup {
                    name: "imputer".into(),
                    trainable: true,
                    params: imp,
                },
                ParamGroup {
                    name: "evidential".into(),
                    trainable: true,
                    params: evd,
                },
                ParamGroup {
                    name: "stats".into(),
                    trainable: false,
                    params: stats,
                },
            ],
        }
    }

    pub fn set_trainable(&mut self, group: usize, trainable: bool) {
        assert!(group < GROUP_STATS, "stats are never trainable");
        self.groups[group].trainable = trainable;
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.groups {
            for p in &mut g.params {
                p.grad.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Bind the four network groups onto `tape` as leaves; frozen groups bind
    /// with `requires = false` so gradients flow through them but are never
    /// recorded for them.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut ids = Vec::with_capacity(4);
        for g in &self.groups[..GROUP_STATS] {
            ids.push(
                g.params
                    .iter()
                    .map(|p| tape.leaf(p.data.clone(), p.shape.clone(), g.trainable))
                    .collect(),
            );
        }
        BoundParams { ids }
    }

    /// Pull `tape` gradients back into the trainable groups (accumulating).
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundParams) {
        for (gi, g) in self.groups[..GROUP_STATS].iter_mut().enumerate() {
            if !g.trainable {
                continue;
            }
            for (p, &id) in g.params.iter_mut().zip(&bound.ids[gi]) {
                for (dst, src) in p.grad.iter_mut().zip(tape.grad(id)) {
                    *dst += src;
                }
            }
        }
    }

    /// Encoder forward: x [B,Cin,L] -> features [B,128,L].
    ///
    /// `train` selects batch statistics; `update_stats` folds batch statistics
    /// into the running estimates (momentum 0.1).
    pub fn encode(
        &mut self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: Id,
        train: bool,
        update_stats: bool,
    ) -> Id {
        assert_eq!(tape.shape(x)[1], self.cin, "input channel mismatch");
        let enc = &bound.ids[GROUP_ENCODER];
        let mut h = x;
        for b in 0..3 {
            let (w, bias, gamma, beta) = (enc[4 * b], enc[4 * b + 1], enc[4 * b + 2], enc[4 * b + 3]);
            let conv = tape.conv1d_padded(h, w, bias, 1, PAD_L, PAD_R);
            let act = tape.relu(conv);
            let stats = &mut self.groups[GROUP_STATS].params;
            let (head, tail) = stats.split_at_mut(2 * b + 1);
            let mean = &mut head[2 * b].data;
            let var = &mut tail[0].data;
            h = tape.batchnorm(
                act,
                gamma,
                beta,
                mean,
                var,
                train,
                update_stats,
                BN_MOMENTUM,
                BN_EPS,
            );
        }
        h
    }

    /// Time-average pooling: [B,128,T] -> [B,128].
    pub fn pool(&self, tape: &mut Tape, features: Id) -> Id {
        tape.mean_time(features)
    }

    /// Classifier logits: pooled [B,128] -> [B,K].
    pub fn classify(&self, tape: &mut Tape, bound: &BoundParams, pooled: Id) -> Id {
        let cls = &bound.ids[GROUP_CLASSIFIER];
        tape.dense(pooled, cls[0], cls[1])
    }

    /// Evidential logits: pooled [B,128] -> [B,K].
    pub fn evidential_logits(&self, tape: &mut Tape, bound: &BoundParams, pooled: Id) -> Id {
        let evd = &bound.ids[GROUP_EVIDENTIAL];
        tape.dense(pooled, evd[0], evd[1])
    }

    /// Temporal imputer: masked features [B,128,T] -> reconstruction
    /// [B,128,T]. A tanh recurrent cell runs over time (h0 = 0) with a dense
    /// readout per step.
    pub fn impute(&self, tape: &mut Tape, bound: &BoundParams, features: Id) -> Id {
        let imp = &bound.ids[GROUP_IMPUTER];
        let (w_ih, w_hh, b_h, w_ro, b_ro) = (imp[0], imp[1], imp[2], imp[3], imp[4]);
        let shape = tape.shape(features).to_vec();
        assert_eq!(shape[1], FEATURES, "imputer expects feature-space input");
        let (batch, t_len) = (shape[0], shape[2]);

        let mut h = tape.constant(vec![0.0; batch * FEATURES], vec![batch, FEATURES]);
        let mut steps = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xt = tape.slice_time(features, t);
            let from_x = tape.dense(xt, w_ih, b_h);
            let from_h = tape.matmul(h, w_hh);
            let pre = tape.add(from_x, from_h);
            h = tape.tanh(pre);
            steps.push(tape.dense(h, w_ro, b_ro));
        }
        tape.stack_time(&steps)
    }

    // ---- checkpoint I/O ----

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        #[derive(serde::Serialize)]
        struct Entry<'a> {
            name: &'a str,
            shape: &'a [usize],
        }
        let header: Vec<Entry> = self
            .groups
            .iter()
            .flat_map(|g| g.params.iter())
            .map(|p| Entry {
                name: &p.name,
                shape: &p.shape,
            })
            .collect();
        let header = serde_json::to_vec(&header).expect("header serialization");

        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for g in &self.groups {
            for p in &g.params {
                for &v in &p.data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelBundle, NetError> {
        #[derive(serde::Deserialize)]
        struct Entry {
            name: String,
            shape: Vec<usize>,
        }
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        if buf.len() < 12 {
            return Err(NetError::Corrupt("truncated header".into()));
        }
        if &buf[0..4] != CKPT_MAGIC {
            return Err(NetError::BadMagic);
        }
        let hlen = u64::from_le_bytes(buf[4..12].try_into().unwrap()) as usize;
        if buf.len() < 12 + hlen {
            return Err(NetError::Corrupt("truncated JSON header".into()));
        }
        let entries: Vec<Entry> = serde_json::from_slice(&buf[12..12 + hlen])
            .map_err(|e| NetError::Corrupt(format!("bad JSON header: {e}")))?;

        // Infer geometry, then rebuild the canonical layout and fill it.
        let cin = entries
            .iter()
            .find(|e| e.name == "enc.conv1.w")
            .ok_or_else(|| NetError::Corrupt("missing enc.conv1.w".into()))?
            .shape
            .get(1)
            .copied()
            .ok_or_else(|| NetError::Corrupt("bad enc.conv1.w shape".into()))?;
        let k = entries
            .iter()
            .find(|e| e.name == "cls.w")
            .ok_or_else(|| NetError::Corrupt("missing cls.w".into()))?
            .shape
            .get(1)
            .copied()
            .ok_or_else(|| NetError::Corrupt("bad cls.w shape".into()))?;
        let mut bundle = ModelBundle::init(cin, k, 0);

        let mut off = 12 + hlen;
        let mut it = entries.iter();
        for g in &mut bundle.groups {
            for p in &mut g.params {
                let e = it
                    .next()
                    .ok_or_else(|| NetError::Corrupt("missing parameter entry".into()))?;
                if e.name != p.name || e.shape != p.shape {
                    return Err(NetError::Corrupt(format!(
                        "expected {} {:?}, found {} {:?}",
                        p.name, p.shape, e.name, e.shape
                    )));
                }
                let n = p.data.len();
                if buf.len() < off + 8 * n {
                    return Err(NetError::Corrupt(format!("truncated data for {}", p.name)));
                }
                for (i, v) in p.data.iter_mut().enumerate() {
                    *v = f64::from_le_bytes(buf[off + 8 * i..off + 8 * i + 8].try_into().unwrap());
                }
                off += 8 * n;
            }
        }
        if it.next().is_some() {
            return Err(NetError::Corrupt("extra parameter entries".into()));
        }
        if off != buf.len() {
            return Err(NetError::Corrupt("trailing bytes after data".into()));
        }
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_group(bundle: &mut ModelBundle, g: usize) {
        for p in &mut bundle.groups[g].params {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let a = ModelBundle::init(3, 5, 42);
        let b = ModelBundle::init(3, 5, 42);
        assert_eq!(a, b);
        let c = ModelBundle::init(3, 5, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn ucihar_shape_gives_six_way_classifier() {
        let b = ModelBundle::init(9, 6, 1);
        let cls = &b.groups[GROUP_CLASSIFIER].params[0];
        assert_eq!(cls.shape, vec![128, 6]);
        assert_eq!(b.groups[GROUP_ENCODER].params[0].shape, vec![64, 9, 8]);
    }

    #[test]
    #[should_panic]
    fn rejects_single_class() {
        ModelBundle::init(3, 1, 0);
    }

    #[test]
    fn encode_zero_input_eval_gives_zero_features() {
        let mut bundle = ModelBundle::init(2, 3, 7);
        let mut tape = Tape::new();
        let bound = bundle.bind(&mut tape);
        let x = tape.leaf(vec![0.0; 2 * 2 * 16], vec![2, 2, 16], false);
        let f = bundle.encode(&mut tape, &bound, x, false, false);
        assert_eq!(tape.shape(f), &[2, 128, 16]);
        // zero input -> conv bias 0 -> relu 0 -> bn with stats (0,1), beta 0 -> 0
        assert!(tape.value(f).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn train_and_eval_modes_differ_on_random_batch() {
        let mut bundle = ModelBundle::init(2, 3, 7);
        let mut rng = Xoshiro256::new(5);
        let x_data: Vec<f64> = (0..2 * 2 * 16).map(|_| rng.uniform_in(-1.0, 1.0)).collect();

        let mut tape = Tape::new();
        let bound = bundle.bind(&mut tape);
        let x = tape.leaf(x_data.clone(), vec![2, 2, 16], false);
        let f_train = bundle.encode(&mut tape, &bound, x, true, false);
        let train_vals = tape.value(f_train).to_vec();

        let mut tape = Tape::new();
        let bound = bundle.bind(&mut tape);
        let x = tape.leaf(x_data, vec![2, 2, 16], false);
        let f_eval = bundle.encode(&mut tape, &bound, x, false, false);
        assert_ne!(train_vals, tape.value(f_eval).to_vec());
    }

    #[test]
    fn pool_averages_over_time() {
        let bundle = ModelBundle::init(1, 2, 0);
        let mut tape = Tape::new();
        // [1, 2, 2] with channel rows (0,2) and (3,3)
        let f = tape.leaf(vec![0.0, 2.0, 3.0, 3.0], vec![1, 2, 2], false);
        let p = bundle.pool(&mut tape, f);
        assert_eq!(tape.shape(p), &[1, 2]);
        assert_eq!(tape.value(p), &[1.0, 3.0]);
    }

    #[test]
    fn classify_hand_case() {
        let mut bundle = ModelBundle::init(1, 2, 0);
        zero_group(&mut bundle, GROUP_CLASSIFIER);
        // w[f][k]: only features 0 and 1 contribute
        bundle.groups[GROUP_CLASSIFIER].params[0].data[0] = 2.0; // f0 -> class0
        bundle.groups[GROUP_CLASSIFIER].params[0].data[3] = -1.0; // f1 -> class1
        bundle.groups[GROUP_CLASSIFIER].params[1].data = vec![0.5, 0.0];
        let mut tape = Tape::new();
        let bound = bundle.bind(&mut tape);
        let mut pooled = vec![0.0; 128];
        pooled[0] = 3.0;
        pooled[1] = 4.0;
        let p = tape.leaf(pooled, vec![1, 128], false);
        let logits = bundle.classify(&mut tape, &bound, p);
        assert_eq!(tape.value(logits), &[6.5, -4.0]);
    }

    #[test]
    fn evidential_zero_head_gives_zero_logits() {
        let mut bundle = ModelBundle::init(1, 4, 3);
        zero_group(&mut bundle, GROUP_EVIDENTIAL);
        let mut tape = Tape::new();
        let bound = bundle.bind(&mut tape);
        let p = tape.leaf(vec![1.0; 2 * 128], vec![2, 128], false);
        let logits = bundle.evidential_logits(&mut tape, &bound, p);
        assert_eq!(tape.shape(logits), &[2, 4]);
        assert!(tape.value(logits).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impute_preserves_shape_and_zero_weights_give_zero() {
        let mut bundle = ModelBundle::init(1, 2, 9);
        let mut tape = Tape::new();
        let bound = bundle.bind(&mut tape);
        let f = tape.leaf(vec![0.3; 2 * 128 * 5], vec![2, 128, 5], false);
        let y = bundle.impute(&mut tape, &bound, f);
        assert_eq!(tape.shape(y), &[2, 128, 5]);

        zero_group(&mut bundle, GROUP_IMPUTER);
        let mut tape = Tape::new();
        let bound = bundle.bind(&mut tape);
        let f = tape.leaf(vec![0.7; 128 * 3], vec![1, 128, 3], false);
        let y = bundle.impute(&mut tape, &bound, f);
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impute_single_step_matches_hand_unroll() {
        let bundle = ModelBundle::init(1, 2, 11);
        let mut rng = Xoshiro256::new(77);
        let x_data: Vec<f64> = (0..128).map(|_| rng.uniform_in(-1.0, 1.0)).collect();

        let mut tape = Tape::new();
        let bound = bundle.bind(&mut tape);
        let f = tape.leaf(x_data.clone(), vec![1, 128, 1], false);
        let y = bundle.impute(&mut tape, &bound, f);
        let got = tape.value(y).to_vec();

        // hand unroll: h = tanh(x W_ih + b_h) (h0 = 0), y = h W_ro + b_ro
        let imp = &bundle.groups[GROUP_IMPUTER].params;
        let (w_ih, b_h, w_ro, b_ro) = (&imp[0].data, &imp[2].data, &imp[3].data, &imp[4].data);
        let mut h = vec![0.0; 128];
        for j in 0..128 {
            let mut s = b_h[j];
            for (i, &xv) in x_data.iter().enumerate() {
                s += xv * w_ih[i * 128 + j];
            }
            h[j] = s.tanh();
        }
        for j in 0..128 {
            let mut s = b_ro[j];
            for (i, &hv) in h.iter().enumerate() {
                s += hv * w_ro[i * 128 + j];
            }
            assert!((got[j] - s).abs() < 1e-12, "step output mismatch at {j}");
        }
    }

    #[test]
    fn frozen_group_binds_without_gradients() {
        let mut bundle = ModelBundle::init(1, 2, 1);
        bundle.set_trainable(GROUP_CLASSIFIER, false);
        let before = bundle.groups[GROUP_CLASSIFIER].value_bytes();

        let mut tape = Tape::new();
        let bound = bundle.bind(&mut tape);
        let p = tape.leaf(vec![0.5; 128], vec![1, 128], true);
        let logits = bundle.classify(&mut tape, &bound, p);
        let loss = tape.mean(logits);
        tape.backward(loss);
        bundle.accumulate_grads(&tape, &bound);

        // gradient reaches the pooled input but never the frozen classifier
        assert!(tape.grad(p).iter().any(|&v| v != 0.0));
        assert!(bundle.groups[GROUP_CLASSIFIER]
            .params
            .iter()
            .all(|q| q.grad.iter().all(|&v| v == 0.0)));
        assert_eq!(before, bundle.groups[GROUP_CLASSIFIER].value_bytes());
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut bundle = ModelBundle::init(3, 5, 21);
        // perturb running stats so they are exercised too
        bundle.groups[GROUP_STATS].params[0].data[7] = 0.123456789;
        bundle.save(&path).unwrap();
        let back = ModelBundle::load(&path).unwrap();
        assert_eq!(bundle.cin, back.cin);
        assert_eq!(bundle.k, back.k);
        for (a, b) in bundle.groups.iter().zip(&back.groups) {
            assert_eq!(a.value_bytes(), b.value_bytes(), "group {}", a.name);
        }
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let bundle = ModelBundle::init(2, 3, 1);
        bundle.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(ModelBundle::load(&path), Err(NetError::BadMagic)));

        bundle.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(ModelBundle::load(&path), Err(NetError::Corrupt(_))));
    }
}
