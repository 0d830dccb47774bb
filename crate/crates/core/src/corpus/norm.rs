use log::warn;
use serde::{Deserialize, Serialize};

use super::Utterance;
use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::streams::{Stream, Streams};

/// Standard deviations below this are replaced by it.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Two-pass per-column moments over every frame of `parts`.
    pub(crate) fn from_frames<'a>(
        dim: usize,
        parts: impl Iterator<Item = &'a Matrix> + Clone,
    ) -> (Self, Vec<usize>) {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        for m in parts.clone() {
            for row in m.row_iter() {
                for (acc, v) in mean.iter_mut().zip(row) {
                    *acc += v;
                }
                n += 1;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n as f64);
        let mut var = vec![0.0; dim];
        for m in parts {
            for row in m.row_iter() {
                for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                    *acc += (v - mu) * (v - mu);
                }
            }
        }
        let mut floored = Vec::new();
        let std = var
            .into_iter()
            .enumerate()
            .map(|(d, v)| {
                let s = (v / n as f64).sqrt();
                if s < STD_FLOOR {
                    floored.push(d);
                    STD_FLOOR
                } else {
                    s
                }
            })
            .collect();
        (FeatureStats { mean, std }, floored)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.dim() {
            return Err(Error::shape("normalization width", self.dim(), x.cols()));
        }
        let mut out = x.clone();
        for t in 0..out.rows() {
            for ((v, mu), sd) in out.row_mut(t).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - mu) / sd;
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.dim() {
            return Err(Error::shape("denormalization width", self.dim(), x.cols()));
        }
        let mut out = x.clone();
        for t in 0..out.rows() {
            for ((v, mu), sd) in out.row_mut(t).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * sd + mu;
            }
        }
        Ok(out)
    }
}

/// Zero-mean, unit-variance statistics for inputs and each target stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub input: FeatureStats,
    /// Indexed by [`Stream::index`].
    pub streams: [FeatureStats; 4],
    /// Dimensions whose standard deviation was floored, e.g. `"input[3]"`.
    pub floored: Vec<String>,
}

/// An utterance mapped into normalized space, ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedUtterance {
    pub inputs: Matrix,
    pub targets: Streams,
}

pub fn compute_norm_stats(train: &[Utterance]) -> Result<NormStats> {
    let first = train
        .first()
        .ok_or_else(|| Error::config("normalization needs a non-empty training split"))?;
    if train.iter().all(|u| u.frames() == 0) {
        return Err(Error::config("normalization needs at least one frame"));
    }
    let mut floored = Vec::new();
    let (input, fl) =
        FeatureStats::from_frames(first.inputs.cols(), train.iter().map(|u| &u.inputs));
    floored.extend(fl.into_iter().map(|d| format!("input[{d}]")));
    let dims = first.targets.dims();
    let streams = Stream::ALL.map(|s| {
        let (st, fl) = FeatureStats::from_frames(dims.get(s), train.iter().map(|u| &u.targets[s]));
        floored.extend(fl.into_iter().map(|d| format!("{s}[{d}]")));
        st
    });
    for f in &floored {
        warn!("constant feature {f}: standard deviation floored to {STD_FLOOR}");
    }
    Ok(NormStats {
        input,
        streams,
        floored,
    })
}

impl NormStats {
    pub fn stream(&self, s: Stream) -> &FeatureStats {
        &self.streams[s.index()]
    }

    pub fn normalize(&self, utt: &Utterance) -> Result<NormalizedUtterance> {
        Ok(NormalizedUtterance {
            inputs: self.input.normalize(&utt.inputs)?,
            targets: self.normalize_streams(&utt.targets)?,
        })
    }

    pub fn normalize_streams(&self, streams: &Streams) -> Result<Streams> {
        let [a, b, c, d] = Stream::ALL.map(|s| self.stream(s).normalize(&streams[s]));
        Streams::new(a?, b?, c?, d?)
    }

    pub fn denormalize(&self, streams: &Streams) -> Result<Streams> {
        let [a, b, c, d] = Stream::ALL.map(|s| self.stream(s).denormalize(&streams[s]));
        Streams::new(a?, b?, c?, d?)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::streams::HeadDims;

    fn random_utt(id: &str, frames: usize, seed: u64, shift: f64) -> Utterance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = Matrix::uniform(frames, 3, 2.0, &mut rng);
        inputs.as_mut_slice().iter_mut().for_each(|v| *v += shift);
        let dims = HeadDims {
            mcep: 2,
            lf0: 1,
            bap: 1,
            uv: 1,
        };
        let mut targets = Streams::zeros(frames, &dims);
        for s in Stream::ALL {
            targets[s] = Matrix::uniform(frames, dims.get(s), 3.0, &mut rng);
        }
        Utterance {
            id: id.into(),
            inputs,
            targets,
            voiced: vec![true; frames],
        }
    }

    #[test]
    fn single_utterance_moments() {
        let u = random_utt("a", 20, 1, 0.0);
        let stats = compute_norm_stats(std::slice::from_ref(&u)).unwrap();
        for d in 0..3 {
            let col: Vec<f64> = (0..20).map(|t| u.inputs[(t, d)]).collect();
            let mean = col.iter().sum::<f64>() / 20.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0;
            assert!((stats.input.mean[d] - mean).abs() < 1e-14);
            assert!((stats.input.std[d] - var.sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn normalized_train_split_is_standardized() {
        let train: Vec<Utterance> = (0..5)
            .map(|i| random_utt("x", 10 + i, i as u64, 1.5))
            .collect();
        let stats = compute_norm_stats(&train).unwrap();
        let normed: Vec<Matrix> = train
            .iter()
            .map(|u| stats.normalize(u).unwrap().inputs)
            .collect();
        let all = Matrix::vstack(3, &normed).unwrap();
        for d in 0..3 {
            let n = all.rows() as f64;
            let mean = (0..all.rows()).map(|t| all[(t, d)]).sum::<f64>() / n;
            let var = (0..all.rows())
                .map(|t| (all[(t, d)] - mean).powi(2))
                .sum::<f64>()
                / n;
            assert!(mean.abs() < 1e-9);
            assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn round_trip() {
        let u = random_utt("a", 15, 3, 0.0);
        let stats = compute_norm_stats(std::slice::from_ref(&u)).unwrap();
        let n = stats.normalize(&u).unwrap();
        let back = stats.denormalize(&n.targets).unwrap();
        for s in Stream::ALL {
            assert!(back[s].max_abs_diff(&u.targets[s]) < 1e-10);
        }
        assert!(
            stats
                .input
                .denormalize(&n.inputs)
                .unwrap()
                .max_abs_diff(&u.inputs)
                < 1e-10
        );
    }

    #[test]
    fn held_out_split_is_not_recentred() {
        let train: Vec<Utterance> = (0..4).map(|i| random_utt("t", 30, i, 0.0)).collect();
        let valid = random_utt("v", 30, 99, 0.7);
        let stats = compute_norm_stats(&train).unwrap();
        let n = stats.normalize(&valid).unwrap();
        let mean0 = (0..30).map(|t| n.inputs[(t, 0)]).sum::<f64>() / 30.0;
        assert!(
            mean0.abs() > 0.1,
            "valid split mean {mean0} should not be forced to zero"
        );
    }

    #[test]
    fn constant_dim_is_floored_and_recorded() {
        let mut u = random_utt("c", 10, 4, 0.0);
        for t in 0..10 {
            u.inputs[(t, 1)] = 2.5;
        }
        let stats = compute_norm_stats(&[u]).unwrap();
        assert_eq!(stats.input.std[1], STD_FLOOR);
        assert!(stats.floored.contains(&"input[1]".to_string()));
    }

    #[test]
    fn empty_split_rejected() {
        assert!(compute_norm_stats(&[]).is_err());
    }
}
