//! Synthetic domain-shifted time-series datasets and their binary container.
//!
//! Samples are stored as f32 (sensor-like precision) and widened exactly to
//! f64 at load; all generation is deterministic in the spec's seed.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::rng::{seed_for, Xoshiro256};

pub const MAGIC: &[u8; 4] = b"TSD1";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected TSD1")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// Labeled multichannel time-series container, samples laid out
/// [sample][channel][time].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub channels: usize,
    pub len: usize,
    pub classes: usize,
    pub samples: Vec<f32>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n == 0 {
            return Err(DataError::Invalid("empty dataset".into()));
        }
        if self.samples.len() != self.n * self.channels * self.len {
            return Err(DataError::Invalid(format!(
                "sample buffer length {} != n*C*L = {}",
                self.samples.len(),
                self.n * self.channels * self.len
            )));
        }
        if self.labels.len() != self.n {
            return Err(DataError::Invalid("label count != n".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= self.classes) {
            return Err(DataError::Invalid(format!(
                "label {bad} out of range for {} classes",
                self.classes
            )));
        }
        Ok(())
    }

    /// Sample `i` widened to f64, [C*L] row-major.
    pub fn sample_f64(&self, i: usize) -> Vec<f64> {
        let cl = self.channels * self.len;
        self.samples[i * cl..(i + 1) * cl]
            .iter()
            .map(|&v| v as f64)
            .collect()
    }

    /// Gather samples `idx` into one [B,C,L] f64 buffer.
    pub fn batch_f64(&self, idx: &[usize]) -> Vec<f64> {
        let cl = self.channels * self.len;
        let mut out = Vec::with_capacity(idx.len() * cl);
        for &i in idx {
            out.extend(self.samples[i * cl..(i + 1) * cl].iter().map(|&v| v as f64));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        self.validate()?;
        let mut buf = Vec::with_capacity(28 + 4 * self.n + 4 * self.samples.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.n as u64).to_le_bytes());
        buf.extend_from_slice(&(self.channels as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len as u32).to_le_bytes());
        buf.extend_from_slice(&(self.classes as u32).to_le_bytes());
        for &l in &self.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        for &s in &self.samples {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        // atomic write: temp + rename
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset, DataError> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        if buf.len() < 28 {
            return Err(DataError::Truncated("header".into()));
        }
        if &buf[0..4] != MAGIC {
            return Err(DataError::BadMagic);
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(DataError::BadVersion(version));
        }
        let n = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let channels = u32::from_le_bytes(buf[16..20].try_into().unwrap()) as usize;
        let len = u32::from_le_bytes(buf[20..24].try_into().unwrap()) as usize;
        let classes = u32::from_le_bytes(buf[24..28].try_into().unwrap()) as usize;
        let need = 28 + 4 * n + 4 * n * channels * len;
        if buf.len() != need {
            return Err(DataError::Truncated(format!(
                "expected {need} bytes, got {}",
                buf.len()
            )));
        }
        let mut labels = Vec::with_capacity(n);
        let mut off = 28;
        for _ in 0..n {
            labels.push(u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()));
            off += 4;
        }
        let mut samples = Vec::with_capacity(n * channels * len);
        for _ in 0..n * channels * len {
            samples.push(f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()));
            off += 4;
        }
        let ds = Dataset {
            n,
            channels,
            len,
            classes,
            samples,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Stratified split, deterministic in `seed`; per-class proportions are
/// preserved within one sample.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> (Dataset, Dataset) {
    assert!(
        train_fraction > 0.0 && train_fraction < 1.0,
        "train fraction must be in (0,1)"
    );
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    let mut rng = Xoshiro256::new(seed_for(seed, &[0x5714]));
    for idx in by_class.iter_mut() {
        rng.shuffle(idx);
        let n_train = (train_fraction * idx.len() as f64).round() as usize;
        train_idx.extend_from_slice(&idx[..n_train]);
        test_idx.extend_from_slice(&idx[n_train..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    (subset(ds, &train_idx), subset(ds, &test_idx))
}

fn subset(ds: &Dataset, idx: &[usize]) -> Dataset {
    let cl = ds.channels * ds.len;
    let mut samples = Vec::with_capacity(idx.len() * cl);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        samples.extend_from_slice(&ds.samples[i * cl..(i + 1) * cl]);
        labels.push(ds.labels[i]);
    }
    Dataset {
        n: idx.len(),
        channels: ds.channels,
        len: ds.len,
        classes: ds.classes,
        samples,
        labels,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Waveform {
    Sine,
    Square,
    Chirp,
}

/// Per-class signal archetype.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Archetype {
    /// Cycles per window.
    pub frequency: f64,
    pub family: Waveform,
    pub amplitude: f64,
}

/// A synthetic sensor domain: class archetypes plus the covariate-shift
/// transforms applied to every sample.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub archetypes: Vec<Archetype>,
    /// Gaussian noise sigma.
    pub noise_sigma: f64,
    pub amplitude_scale: f64,
    /// Extra per-sample phase noise sigma (radians).
    pub phase_jitter: f64,
    /// Time-warp exponent in [0.5, 2]; 1 = linear time.
    pub time_warp: f64,
    /// Rotation angle (radians) mixing adjacent channel pairs.
    pub channel_mix_angle: f64,
    pub seed: u64,
}

impl DomainSpec {
    /// Unshifted source domain with `k` default archetypes.
    pub fn source_default(k: usize, seed: u64) -> Self {
        let families = [Waveform::Sine, Waveform::Square, Waveform::Chirp];
        let archetypes = (0..k)
            .map(|i| Archetype {
                frequency: 1.5 + 1.4 * i as f64,
                family: families[i % 3],
                amplitude: 1.0,
            })
            .collect();
        DomainSpec {
            archetypes,
            noise_sigma: 0.1,
            amplitude_scale: 1.0,
            phase_jitter: 0.0,
            time_warp: 1.0,
            channel_mix_angle: 0.0,
            seed,
        }
    }

    /// Shifted copy: one knob in [0,1] interpolates every shift parameter.
    ///
    /// The deterministic transforms (amplitude, warp, channel mixing)
    /// dominate the stochastic ones (noise, jitter): the shift moves target
    /// samples coherently off the source manifold rather than blurring
    /// them, which is the regime where a frozen source model degrades while
    /// staying decisive.
    pub fn shifted(&self, knob: f64, seed: u64) -> Self {
        assert!((0.0..=1.0).contains(&knob), "shift knob outside [0,1]");
        DomainSpec {
            archetypes: self.archetypes.clone(),
            noise_sigma: self.noise_sigma + 0.05 * knob,
            amplitude_scale: self.amplitude_scale * (1.0 + 2.0 * knob),
            phase_jitter: self.phase_jitter + 0.2 * knob,
            time_warp: self.time_warp * (1.0 + 1.0 * knob),
            channel_mix_angle: self.channel_mix_angle + 1.5 * knob,
            seed,
        }
    }

    pub fn validate(&self, l: usize) -> Result<(), DataError> {
        for a in &self.archetypes {
            if a.frequency <= 0.0 {
                return Err(DataError::Invalid("non-positive frequency".into()));
            }
            // Nyquist: at most L/2 cycles per window (warp compresses locally
            // by at most the warp factor).
            if a.frequency * self.time_warp.max(1.0 / self.time_warp) >= l as f64 / 2.0 {
                return Err(DataError::Invalid(format!(
                    "frequency {} violates Nyquist for L={l}",
                    a.frequency
                )));
            }
        }
        if !(0.5..=2.0).contains(&self.time_warp) {
            return Err(DataError::Invalid(format!(
                "time warp {} outside [0.5, 2]",
                self.time_warp
            )));
        }
        Ok(())
    }
}

fn waveform_value(family: Waveform, phase: f64) -> f64 {
    match family {
        Waveform::Sine => phase.sin(),
        Waveform::Square => {
            if phase.sin() >= 0.0 {
                1.0
            } else {
                -1.0
            }
        }
        // Chirp doubles its instantaneous frequency across the window; the
        // phase argument carries the linear part.
        Waveform::Chirp => phase.sin(),
    }
}

/// Generate `n` samples of a domain with balanced labels (label of sample i
/// is i mod K).
pub fn generate_domain(
    spec: &DomainSpec,
    n: usize,
    channels: usize,
    l: usize,
    k: usize,
) -> Result<Dataset, DataError> {
    if k > spec.archetypes.len() {
        return Err(DataError::Invalid(format!(
            "requested {k} classes but spec has {} archetypes",
            spec.archetypes.len()
        )));
    }
    spec.validate(l)?;

    let two_pi = 2.0 * std::f64::consts::PI;
    let mut samples = vec![0.0f32; n * channels * l];
    let mut labels = Vec::with_capacity(n);

    for i in 0..n {
        let label = i % k;
        labels.push(label as u32);
        let arch = &spec.archetypes[label];
        let mut rng = Xoshiro256::new(seed_for(spec.seed, &[label as u64, i as u64]));
        let base_phase = rng.uniform_in(0.0, two_pi);
        let jitter = spec.phase_jitter * rng.normal();

        // raw per-channel signals before mixing
        let mut raw = vec![0.0f64; channels * l];
        for c in 0..channels {
            // fixed per-(class, channel) signature: phase offset + weight
            let ch_phase = c as f64 * std::f64::consts::FRAC_PI_4;
            let weight = 0.6 + 0.4 * (1.0 * label as f64 + 2.0 * c as f64).cos();
            for t in 0..l {
                let frac = (t as f64 / l as f64).powf(spec.time_warp);
                let mut phase = two_pi * arch.frequency * frac + base_phase + ch_phase + jitter;
                if arch.family == Waveform::Chirp {
                    phase += two_pi * arch.frequency * frac * frac;
                }
                raw[c * l + t] = arch.amplitude
                    * spec.amplitude_scale
                    * weight
                    * waveform_value(arch.family, phase);
            }
        }

        // channel mixing: Givens rotations on adjacent pairs
        if spec.channel_mix_angle != 0.0 && channels >= 2 {
            let (s, co) = spec.channel_mix_angle.sin_cos();
            for c in 0..channels - 1 {
                for t in 0..l {
                    let a = raw[c * l + t];
                    let b = raw[(c + 1) * l + t];
                    raw[c * l + t] = co * a - s * b;
                    raw[(c + 1) * l + t] = s * a + co * b;
                }
            }
        }

        for c in 0..channels {
            for t in 0..l {
                let v = raw[c * l + t] + spec.noise_sigma * rng.normal();
                samples[(i * channels + c) * l + t] = v as f32;
            }
        }
    }

    let ds = Dataset {
        n,
        channels,
        len: l,
        classes: k,
        samples,
        labels,
    };
    ds.validate()?;
    Ok(ds)
}
