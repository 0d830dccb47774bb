//! Synthetic teacher-network speakers and their corpora.
//!
//! Each speaker is a frozen random network with the same topology family as
//! the acoustic model, derived from one shared base teacher. A `distance`
//! knob scales how far a speaker's weights and output warps move away from
//! the base.

mod f0;
mod io;
mod norm;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, MultiTaskModel};
use crate::nn::Matrix;
use crate::streams::{Stream, Streams};

pub use f0::interpolate_f0;
pub use io::{load_corpus, save_corpus, MANIFEST_FILE, UTT_DIR, UTT_MAGIC};
pub use norm::{compute_norm_stats, FeatureStats, NormStats, NormalizedUtterance, STD_FLOOR};

/// Seed of the shared base teacher every speaker is derived from.
pub const BASE_TEACHER_SEED: u64 = 0x5EED_BA5E;

/// Multiplier on the base teacher's trunk initialization; larger values
/// make the teacher more nonlinear.
pub const TEACHER_GAIN: f64 = 2.0;

const CALIBRATION_UTTS: usize = 20;
const CALIBRATION_FRAMES: usize = 60;

/// Relative weight perturbation per unit of distance.
pub const WEIGHT_PERTURBATION: f64 = 0.25;

/// Relative scale/offset change of the mcep and bap warps per unit distance.
pub const WARP_PERTURBATION: f64 = 0.3;

/// Relative shift of the mean F0 per unit distance.
pub const F0_SHIFT: f64 = 0.3;

pub const BASE_F0_HZ: f64 = 200.0;

/// Spread of log F0 around its mean, in natural-log units per unit of
/// teacher output.
pub const LF0_SPREAD: f64 = 0.15;

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-speaker affine map applied to raw teacher outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerWarp {
    pub mcep_scale: Vec<f64>,
    pub mcep_offset: Vec<f64>,
    pub bap_scale: Vec<f64>,
    pub bap_offset: Vec<f64>,
    pub f0_mean_hz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerSpec {
    pub seed: u64,
    pub distance: f64,
    pub teacher: MultiTaskModel,
    pub warp: SpeakerWarp,
}

/// Shapes and sizes of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Topology of the teacher networks; its `input_dim` must equal
    /// `n_binary + n_numeric`.
    pub teacher: ModelConfig,
    pub n_binary: usize,
    pub n_numeric: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub observation_noise: f64,
    /// Mean length of voiced plus unvoiced runs is twice this.
    pub mean_uv_run: f64,
    pub mean_phone_len: f64,
    pub n_valid: usize,
    pub n_test: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            teacher: ModelConfig::desk(),
            n_binary: 20,
            n_numeric: 4,
            min_frames: 40,
            max_frames: 80,
            observation_noise: 0.01,
            mean_uv_run: 10.0,
            mean_phone_len: 5.0,
            n_valid: 40,
            n_test: 20,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        if self.n_binary + self.n_numeric != self.teacher.input_dim {
            return Err(Error::config(format!(
                "{} binary + {} numeric inputs do not match teacher input width {}",
                self.n_binary, self.n_numeric, self.teacher.input_dim
            )));
        }
        if self.n_binary == 0 {
            return Err(Error::config(
                "the voicing indicator needs at least one binary input",
            ));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::config("frame range must satisfy 0 < min <= max"));
        }
        if !(self.mean_uv_run >= 1.0 && self.mean_phone_len >= 1.0) {
            return Err(Error::config("mean run lengths must be at least one frame"));
        }
        if !(self.observation_noise >= 0.0) {
            return Err(Error::config("observation noise must be non-negative"));
        }
        if self.teacher.head_dims.uv != 1 || !matches!(self.teacher.head_dims.lf0, 1 | 3) {
            return Err(Error::config(
                "uv stream must be 1-dim and lf0 stream 1- or 3-dim",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub inputs: Matrix,
    /// Raw (unnormalized) targets; the uv stream holds the voicing flags as
    /// 0/1 and lf0 is already interpolated over unvoiced frames.
    pub targets: Streams,
    pub voiced: Vec<bool>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.inputs.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeakerRef {
    pub seed: u64,
    pub distance: f64,
}

/// A generated corpus with its splits and training-split statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub speaker: SpeakerRef,
    pub seed: u64,
    pub config: CorpusConfig,
    pub train: Vec<Utterance>,
    pub valid: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub stats: NormStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!(
                "unknown split {other:?}; expected train, valid or test"
            ))),
        }
    }
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The shared base teacher for a topology.
///
/// Trunk parameters are the seeded initialization scaled by
/// [`TEACHER_GAIN`]; each head output is then rescaled to zero mean and
/// unit variance over a fixed set of random binary inputs.
pub fn base_teacher(cfg: &ModelConfig) -> Result<MultiTaskModel> {
    let mut t = build_model(cfg, BASE_TEACHER_SEED)?;
    for e in t.block_entries_mut() {
        if !e.name.starts_with("head.") {
            e.values.iter_mut().for_each(|v| *v *= TEACHER_GAIN);
        }
    }
    let mut rng = rng_for(BASE_TEACHER_SEED, 4);
    let probes: Vec<Matrix> = (0..CALIBRATION_UTTS)
        .map(|_| {
            let data = (0..CALIBRATION_FRAMES * cfg.input_dim)
                .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
                .collect();
            Matrix::from_vec(CALIBRATION_FRAMES, cfg.input_dim, data)
        })
        .collect::<Result<_>>()?;
    let outputs = probes
        .iter()
        .map(|x| t.forward(x))
        .collect::<Result<Vec<_>>>()?;
    for s in Stream::ALL {
        let (stats, _) =
            FeatureStats::from_frames(cfg.head_dims.get(s), outputs.iter().map(|o| &o[s]));
        let head = t.head_mut(s);
        for d in 0..stats.dim() {
            let scale = 1.0 / stats.std[d];
            head.weight.row_mut(d).iter_mut().for_each(|w| *w *= scale);
            head.bias[d] = (head.bias[d] - stats.mean[d]) * scale;
        }
    }
    Ok(t)
}

pub fn make_speaker(seed: u64, distance: f64) -> Result<SpeakerSpec> {
    make_speaker_with(&ModelConfig::desk(), seed, distance)
}

/// Derives a speaker from the base teacher. Every weight block gets
/// Gaussian noise with standard deviation `distance · WEIGHT_PERTURBATION ·
/// rms(block)`; output warps move by amounts proportional to `distance`, and
/// the mean F0 is scaled by `1 ± F0_SHIFT · distance` with the sign drawn
/// from the seed.
pub fn make_speaker_with(cfg: &ModelConfig, seed: u64, distance: f64) -> Result<SpeakerSpec> {
    if !(0.0..=1.0).contains(&distance) {
        return Err(Error::config(format!(
            "speaker distance {distance} outside [0, 1]"
        )));
    }
    let mut teacher = base_teacher(cfg)?;
    let dims = cfg.head_dims;
    let mut warp = SpeakerWarp {
        mcep_scale: vec![1.0; dims.mcep],
        mcep_offset: vec![0.0; dims.mcep],
        bap_scale: vec![1.0; dims.bap],
        bap_offset: vec![0.0; dims.bap],
        f0_mean_hz: BASE_F0_HZ,
    };
    if distance == 0.0 {
        return Ok(SpeakerSpec {
            seed,
            distance,
            teacher,
            warp,
        });
    }

    let mut rng = rng_for(seed, 1);
    for e in teacher.block_entries_mut() {
        let rms =
            (e.values.iter().map(|v| v * v).sum::<f64>() / e.values.len().max(1) as f64).sqrt();
        let sd = distance * WEIGHT_PERTURBATION * rms;
        for v in e.values.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += sd * z;
        }
    }
    let mut jitter = |xs: &mut [f64]| {
        for x in xs {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x += distance * WARP_PERTURBATION * z;
        }
    };
    jitter(&mut warp.mcep_scale);
    jitter(&mut warp.mcep_offset);
    jitter(&mut warp.bap_scale);
    jitter(&mut warp.bap_offset);
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    warp.f0_mean_hz = BASE_F0_HZ * (1.0 + sign * F0_SHIFT * distance);
    Ok(SpeakerSpec {
        seed,
        distance,
        teacher,
        warp,
    })
}

/// Geometric run length with the given mean, at least one frame.
fn run_length<R: Rng>(rng: &mut R, mean: f64) -> usize {
    let p = 1.0 / mean;
    let u: f64 = rng.random_range(f64::EPSILON..1.0);
    1 + (u.ln() / (1.0 - p).ln()).floor() as usize
}

/// Alternating voiced/unvoiced runs. Voiced runs average `1.2 · mean` and
/// unvoiced runs `0.8 · mean`, so about 60% of frames are voiced. At least
/// one frame is always voiced.
fn voicing<R: Rng>(rng: &mut R, frames: usize, mean: f64) -> Vec<bool> {
    let mut out = Vec::with_capacity(frames);
    let mut voiced = rng.random::<bool>();
    while out.len() < frames {
        let len = run_length(rng, if voiced { 1.2 * mean } else { 0.8 * mean });
        out.extend(std::iter::repeat_n(voiced, len.min(frames - out.len())));
        voiced = !voiced;
    }
    if !out.iter().any(|&v| v) {
        let mid = frames / 2;
        out[mid] = true;
    }
    out
}

fn make_inputs<R: Rng>(rng: &mut R, cfg: &CorpusConfig, voiced: &[bool]) -> Matrix {
    let frames = voiced.len();
    let mut x = Matrix::zeros(frames, cfg.n_binary + cfg.n_numeric);
    // Binary answers are constant within a phone-like segment; column 0 is
    // the voicing indicator.
    let mut t = 0;
    while t < frames {
        let len = run_length(rng, cfg.mean_phone_len).min(frames - t);
        let answers: Vec<f64> = (1..cfg.n_binary)
            .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
            .collect();
        for k in 0..len {
            let row = x.row_mut(t + k);
            row[1..cfg.n_binary].copy_from_slice(&answers);
            if cfg.n_numeric > 1 {
                row[cfg.n_binary + 1] = (k as f64 + 0.5) / len as f64;
            }
        }
        t += len;
    }
    for (t, &v) in voiced.iter().enumerate() {
        x[(t, 0)] = if v { 1.0 } else { 0.0 };
    }
    // Numeric inputs: utterance position, phone position, then AR(1) noise
    // with unit stationary variance.
    let rho: f64 = 0.9;
    let innov = (1.0 - rho * rho).sqrt();
    for d in 0..cfg.n_numeric {
        let col = cfg.n_binary + d;
        match d {
            0 => (0..frames).for_each(|t| x[(t, col)] = (t as f64 + 0.5) / frames as f64),
            1 => {}
            _ => {
                let mut v: f64 = StandardNormal.sample(rng);
                for t in 0..frames {
                    x[(t, col)] = v;
                    let z: f64 = StandardNormal.sample(rng);
                    v = rho * v + innov * z;
                }
            }
        }
    }
    x
}

/// Runs the speaker's teacher on raw inputs and applies its output warps.
/// Returns noiseless mcep, static log F0 (before masking) and bap.
pub fn teacher_outputs(spk: &SpeakerSpec, inputs: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let out = spk.teacher.forward(inputs)?;
    let mut mcep = out[Stream::Mcep].clone();
    for t in 0..mcep.rows() {
        for (d, v) in mcep.row_mut(t).iter_mut().enumerate() {
            *v = spk.warp.mcep_scale[d] * *v + spk.warp.mcep_offset[d];
        }
    }
    let mut bap = out[Stream::Bap].clone();
    for t in 0..bap.rows() {
        for (d, v) in bap.row_mut(t).iter_mut().enumerate() {
            *v = spk.warp.bap_scale[d] * *v + spk.warp.bap_offset[d];
        }
    }
    let mean = spk.warp.f0_mean_hz.ln();
    let lf0 = (0..inputs.rows())
        .map(|t| mean + LF0_SPREAD * out[Stream::Lf0][(t, 0)])
        .collect();
    Ok((mcep, lf0, bap))
}

fn make_utterance(
    spk: &SpeakerSpec,
    cfg: &CorpusConfig,
    id: String,
    rng: &mut ChaCha8Rng,
) -> Result<Utterance> {
    let frames = rng.random_range(cfg.min_frames..=cfg.max_frames);
    let voiced = voicing(rng, frames, cfg.mean_uv_run);
    let inputs = make_inputs(rng, cfg, &voiced);
    let (mut mcep, mut lf0, mut bap) = teacher_outputs(spk, &inputs)?;
    let sigma = cfg.observation_noise;
    let mut noise = |xs: &mut [f64]| {
        for x in xs {
            let z: f64 = StandardNormal.sample(rng);
            *x += sigma * z;
        }
    };
    noise(mcep.as_mut_slice());
    noise(&mut lf0);
    noise(bap.as_mut_slice());

    // Unvoiced log F0 values are masked by the voicing flags, then filled.
    let lf0 = interpolate_f0(&lf0, &voiced)?;
    let lf0 = match cfg.teacher.head_dims.lf0 {
        1 => Matrix::from_vec(frames, 1, lf0)?,
        _ => Matrix::from_rows(&f0::with_deltas(&lf0))?,
    };
    let uv = Matrix::from_vec(
        frames,
        1,
        voiced.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    )?;
    Ok(Utterance {
        id,
        inputs,
        targets: Streams::new(mcep, lf0, bap, uv)?,
        voiced,
    })
}

/// Generates `n_utts` utterances: the first `n_valid` form the validation
/// split, the next `n_test` the test split, and the rest the training split.
/// Normalization statistics come from the training split only.
pub fn synthesize_corpus(
    spk: &SpeakerSpec,
    n_utts: usize,
    seed: u64,
    cfg: &CorpusConfig,
) -> Result<Corpus> {
    cfg.validate()?;
    if spk.teacher.config() != &cfg.teacher {
        return Err(Error::config(
            "speaker teacher topology differs from corpus config",
        ));
    }
    let held_out = cfg.n_valid + cfg.n_test;
    if n_utts <= held_out {
        return Err(Error::config(format!(
            "{n_utts} utterances leave no training data after {} validation and {} test utterances",
            cfg.n_valid, cfg.n_test
        )));
    }
    let mut rng = rng_for(seed, 2);
    let mut all = Vec::with_capacity(n_utts);
    for i in 0..n_utts {
        let split = if i < cfg.n_valid {
            "valid"
        } else if i < held_out {
            "test"
        } else {
            "train"
        };
        all.push(make_utterance(
            spk,
            cfg,
            format!("{split}_{i:05}"),
            &mut rng,
        )?);
    }
    let train = all.split_off(held_out);
    let test = all.split_off(cfg.n_valid);
    let valid = all;
    let stats = compute_norm_stats(&train)?;
    Ok(Corpus {
        speaker: SpeakerRef {
            seed: spk.seed,
            distance: spk.distance,
        },
        seed,
        config: cfg.clone(),
        train,
        valid,
        test,
        stats,
    })
}

/// Mean per-frame L2 distance between two speakers' noiseless targets on
/// shared inputs (mcep, log F0 and bap concatenated).
pub fn target_discrepancy(a: &SpeakerSpec, b: &SpeakerSpec, inputs: &[Matrix]) -> Result<f64> {
    let mut total = 0.0;
    let mut frames = 0usize;
    for x in inputs {
        let (ma, la, ba) = teacher_outputs(a, x)?;
        let (mb, lb, bb) = teacher_outputs(b, x)?;
        for t in 0..x.rows() {
            let mut sq = (la[t] - lb[t]).powi(2);
            sq += ma
                .row(t)
                .iter()
                .zip(mb.row(t))
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>();
            sq += ba
                .row(t)
                .iter()
                .zip(bb.row(t))
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>();
            total += sq.sqrt();
        }
        frames += x.rows();
    }
    Ok(total / frames.max(1) as f64)
}

/// Random inputs drawn from the corpus input process, for probing teachers.
pub fn probe_inputs(cfg: &CorpusConfig, n: usize, seed: u64) -> Vec<Matrix> {
    let mut rng = rng_for(seed, 3);
    (0..n)
        .map(|_| {
            let frames = rng.random_range(cfg.min_frames..=cfg.max_frames);
            let voiced = voicing(&mut rng, frames, cfg.mean_uv_run);
            make_inputs(&mut rng, cfg, &voiced)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> CorpusConfig {
        CorpusConfig {
            n_valid: 3,
            n_test: 2,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn distance_zero_is_base_teacher() {
        let cfg = ModelConfig::desk();
        let base = base_teacher(&cfg).unwrap();
        for seed in [0, 7, 99] {
            let spk = make_speaker(seed, 0.0).unwrap();
            assert_eq!(spk.teacher, base);
            assert_eq!(spk.warp.f0_mean_hz, BASE_F0_HZ);
        }
    }

    #[test]
    fn speaker_is_pure_function_of_seed_and_distance() {
        assert_eq!(make_speaker(3, 0.4).unwrap(), make_speaker(3, 0.4).unwrap());
        assert_ne!(make_speaker(3, 0.4).unwrap(), make_speaker(4, 0.4).unwrap());
    }

    #[test]
    fn distance_out_of_range() {
        assert!(matches!(make_speaker(0, 1.5), Err(Error::Config(_))));
        assert!(make_speaker(0, -0.1).is_err());
    }

    #[test]
    fn f0_mean_shift_follows_distance() {
        let spk = make_speaker(5, 0.5).unwrap();
        let ratio = spk.warp.f0_mean_hz / BASE_F0_HZ;
        assert!(
            (ratio - 1.15).abs() < 1e-12 || (ratio - 0.85).abs() < 1e-12,
            "{ratio}"
        );
    }

    #[test]
    fn utterances_are_consistent() {
        let spk = make_speaker(1, 0.2).unwrap();
        let corpus = synthesize_corpus(&spk, 12, 4, &small_cfg()).unwrap();
        assert_eq!(
            (corpus.valid.len(), corpus.test.len(), corpus.train.len()),
            (3, 2, 7)
        );
        for u in corpus.train.iter().chain(&corpus.valid).chain(&corpus.test) {
            let n = u.frames();
            assert!((40..=80).contains(&n));
            assert_eq!(u.targets.frames(), n);
            assert_eq!(u.voiced.len(), n);
            assert!(u.targets[Stream::Lf0].all_finite());
            for t in 0..n {
                let flag = u.targets[Stream::Uv][(t, 0)];
                assert_eq!(flag, if u.voiced[t] { 1.0 } else { 0.0 });
                assert_eq!(u.inputs[(t, 0)], flag);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spk = make_speaker(1, 0.2).unwrap();
        let a = synthesize_corpus(&spk, 8, 4, &small_cfg()).unwrap();
        let b = synthesize_corpus(&spk, 8, 4, &small_cfg()).unwrap();
        assert_eq!(a, b);
        let c = synthesize_corpus(&spk, 8, 5, &small_cfg()).unwrap();
        assert_ne!(a.train[0].inputs, c.train[0].inputs);
    }

    #[test]
    fn same_inputs_same_noiseless_targets() {
        let spk = make_speaker(2, 0.3).unwrap();
        let x = &probe_inputs(&CorpusConfig::default(), 1, 0)[0];
        assert_eq!(
            teacher_outputs(&spk, x).unwrap(),
            teacher_outputs(&spk, x).unwrap()
        );
    }

    #[test]
    fn voiced_fraction_in_range() {
        let spk = make_speaker(0, 0.0).unwrap();
        let cfg = CorpusConfig {
            n_valid: 0,
            n_test: 0,
            ..CorpusConfig::default()
        };
        let corpus = synthesize_corpus(&spk, 100, 11, &cfg).unwrap();
        let (v, n) = corpus.train.iter().fold((0, 0), |(v, n), u| {
            (v + u.voiced.iter().filter(|&&x| x).count(), n + u.frames())
        });
        let frac = v as f64 / n as f64;
        assert!((0.4..=0.8).contains(&frac), "voiced fraction {frac}");
    }

    #[test]
    fn too_few_utterances() {
        let spk = make_speaker(0, 0.0).unwrap();
        assert!(matches!(
            synthesize_corpus(&spk, 5, 0, &small_cfg()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn discrepancy_grows_with_distance() {
        let cfg = CorpusConfig::default();
        let base = make_speaker(0, 0.0).unwrap();
        let probes = probe_inputs(&cfg, 4, 1);
        let mut wins = 0;
        for seed in 0..10 {
            let near = make_speaker(seed, 0.1).unwrap();
            let far = make_speaker(seed, 0.9).unwrap();
            let dn = target_discrepancy(&base, &near, &probes).unwrap();
            let df = target_discrepancy(&base, &far, &probes).unwrap();
            if df > dn {
                wins += 1;
            }
        }
        assert_eq!(wins, 10);
    }
}
