//! MSE criterion, masked SGD, and the SD-training and adaptation loops.

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterKind;
use crate::corpus::{rng_for, Corpus, NormStats, NormalizedUtterance, Utterance};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::model::{
    build_model, BlockGroup, InsertionPolicy, ModelConfig, ModelGrads, MultiTaskModel, TrainMask,
    TrainMode,
};
use crate::nn::Matrix;
use crate::streams::{Stream, Streams};

/// An epoch whose training loss exceeds this multiple of the initial loss
/// counts as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Utterances per update.
    pub batch: usize,
    /// Multiplicative learning-rate factor applied after every epoch.
    pub lr_decay: f64,
    pub seed: u64,
    /// Stop after this many epochs without a validation improvement.
    pub early_stop_patience: usize,
    /// Global L2 norm bound on each update's gradient.
    pub clip_norm: Option<f64>,
    /// Lower bound on the number of updates: small training sets get
    /// proportionally more epochs.
    #[serde(default)]
    pub min_updates: usize,
}

impl TrainConfig {
    pub fn sd_default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 30,
            batch: 1,
            lr_decay: 0.98,
            seed: 0,
            early_stop_patience: 10,
            clip_norm: Some(5.0),
            min_updates: 0,
        }
    }

    pub fn adapt_default() -> Self {
        TrainConfig {
            learning_rate: 0.002,
            ..TrainConfig::sd_default()
        }
    }

    /// `epochs = 0` is allowed and returns the initial model unchanged.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be at least 1"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config(format!(
                    "clip norm must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-epoch losses. Index 0 holds the losses of the initial model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub train_loss: Vec<f64>,
    pub valid_loss: Vec<f64>,
    pub selected_epoch: usize,
}

impl TrainRecord {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,valid_loss\n");
        for (e, (t, v)) in self.train_loss.iter().zip(&self.valid_loss).enumerate() {
            out.push_str(&format!("{e},{t:.10},{v:.10}\n"));
        }
        out
    }

    pub fn selected_valid_loss(&self) -> f64 {
        self.valid_loss[self.selected_epoch]
    }
}

/// Mean over streams of each stream's mean squared error, plus the
/// gradient of that loss with respect to the predictions. Streams without
/// elements are left out of the mean.
pub fn mse_loss(preds: &[Matrix], targets: &[Matrix]) -> Result<(f64, Vec<Matrix>)> {
    if preds.len() != targets.len() {
        return Err(Error::shape("mse stream count", targets.len(), preds.len()));
    }
    for (i, (p, t)) in preds.iter().zip(targets).enumerate() {
        if p.shape() != t.shape() {
            let ctx = format!("mse stream {i}");
            return Err(if p.rows() != t.rows() {
                Error::shape(format!("{ctx} frames"), t.rows(), p.rows())
            } else {
                Error::shape(format!("{ctx} width"), t.cols(), p.cols())
            });
        }
    }
    let active = preds.iter().filter(|p| !p.is_empty()).count();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (p, t) in preds.iter().zip(targets) {
        let mut g = Matrix::zeros(p.rows(), p.cols());
        if !p.is_empty() {
            let count = p.as_slice().len() as f64;
            let scale = 2.0 / (count * active as f64);
            let mut sq = 0.0;
            for ((gv, pv), tv) in g
                .as_mut_slice()
                .iter_mut()
                .zip(p.as_slice())
                .zip(t.as_slice())
            {
                let d = pv - tv;
                sq += d * d;
                *gv = scale * d;
            }
            loss += sq / count;
        }
        grads.push(g);
    }
    if active > 0 {
        loss /= active as f64;
    }
    Ok((loss, grads))
}

/// [`mse_loss`] over the four model streams.
pub fn stream_mse(preds: &Streams, targets: &Streams) -> Result<(f64, Streams)> {
    let (loss, g) = mse_loss(preds.as_array(), targets.as_array())?;
    let [a, b, c, d]: [Matrix; 4] = g.try_into().expect("four streams");
    Ok((loss, Streams::new(a, b, c, d)?))
}

/// `p ← p − lr·g` on every masked block. Nothing is modified if any masked
/// gradient is non-finite.
pub fn sgd_step(
    model: &mut MultiTaskModel,
    grads: &ModelGrads,
    mask: &TrainMask,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::config(format!(
            "learning rate must be non-negative, got {lr}"
        )));
    }
    let names = model.block_names();
    if names != mask.names || grads.blocks.len() != names.len() {
        return Err(Error::State(
            "gradients or mask do not match the model's blocks".into(),
        ));
    }
    for ((name, g), &on) in names.iter().zip(&grads.blocks).zip(&mask.flags) {
        if let (true, Some(g)) = (on, g) {
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::numeric(
                    name.clone(),
                    format!("non-finite gradient {bad}"),
                ));
            }
        }
    }
    if lr == 0.0 {
        return Ok(());
    }
    for ((e, g), &on) in model
        .block_entries_mut()
        .into_iter()
        .zip(&grads.blocks)
        .zip(&mask.flags)
    {
        if let (true, Some(g)) = (on, g) {
            for (p, d) in e.values.iter_mut().zip(g) {
                *p -= lr * d;
            }
        }
    }
    Ok(())
}

/// Rescales the masked gradients so their joint L2 norm is at most `max`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ModelGrads, max: f64) -> f64 {
    let norm = grads
        .blocks
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let s = max / norm;
        grads
            .blocks
            .iter_mut()
            .flatten()
            .for_each(|g| g.iter_mut().for_each(|v| *v *= s));
    }
    norm
}

fn add_grads(acc: &mut ModelGrads, g: ModelGrads) {
    for (a, b) in acc.blocks.iter_mut().zip(g.blocks) {
        match (a.as_mut(), b) {
            (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
            (None, Some(b)) => *a = Some(b),
            _ => {}
        }
    }
}

pub fn normalize_all(utts: &[Utterance], stats: &NormStats) -> Result<Vec<NormalizedUtterance>> {
    utts.iter().map(|u| stats.normalize(u)).collect()
}

/// Frame-weighted loss over a set of utterances; equals [`mse_loss`] on
/// their concatenation.
pub fn dataset_loss(model: &MultiTaskModel, data: &[NormalizedUtterance]) -> Result<f64> {
    let preds = data
        .iter()
        .map(|u| model.forward(&u.inputs))
        .collect::<Result<Vec<_>>>()?;
    let dims = model.config().head_dims;
    let p = Streams::concat(&dims, &preds)?;
    let t = Streams::concat(&dims, data.iter().map(|u| &u.targets))?;
    Ok(stream_mse(&p, &t)?.0)
}

/// Inputs of a training run, precomputed up to the lowest slot whose input
/// the trained blocks can change.
struct Prepared<'a> {
    slot: Option<usize>,
    inputs: Vec<std::borrow::Cow<'a, Matrix>>,
    targets: Vec<&'a Streams>,
}

impl<'a> Prepared<'a> {
    fn new(
        model: &MultiTaskModel,
        slot: Option<usize>,
        data: &'a [NormalizedUtterance],
    ) -> Result<Self> {
        let inputs = data
            .iter()
            .map(|u| match slot {
                None => Ok(std::borrow::Cow::Borrowed(&u.inputs)),
                Some(s) => model
                    .activation_before_slot(&u.inputs, s)
                    .map(std::borrow::Cow::Owned),
            })
            .collect::<Result<_>>()?;
        Ok(Prepared {
            slot,
            inputs,
            targets: data.iter().map(|u| &u.targets).collect(),
        })
    }

    fn forward(&self, model: &MultiTaskModel, i: usize) -> Result<Streams> {
        match self.slot {
            None => model.forward(&self.inputs[i]),
            Some(s) => model.forward_from_slot(s, &self.inputs[i]),
        }
    }

    fn forward_cached(
        &self,
        model: &MultiTaskModel,
        i: usize,
    ) -> Result<(Streams, crate::model::ForwardCache)> {
        match self.slot {
            None => model.forward_cached(&self.inputs[i]),
            Some(s) => model.forward_cached_from_slot(s, self.inputs[i].clone().into_owned()),
        }
    }

    fn loss(&self, model: &MultiTaskModel) -> Result<f64> {
        let preds = (0..self.inputs.len())
            .map(|i| self.forward(model, i))
            .collect::<Result<Vec<_>>>()?;
        let dims = model.config().head_dims;
        let p = Streams::concat(&dims, &preds)?;
        let t = Streams::concat(&dims, self.targets.iter().copied())?;
        Ok(stream_mse(&p, &t)?.0)
    }
}

/// Trains the masked blocks of `model` with per-utterance SGD and returns
/// the parameters from the epoch with the lowest validation loss (epoch 0
/// being the untouched model).
pub fn train_loop(
    mut model: MultiTaskModel,
    mask: &TrainMask,
    train: &[NormalizedUtterance],
    valid: &[NormalizedUtterance],
    tcfg: &TrainConfig,
) -> Result<(MultiTaskModel, TrainRecord)> {
    tcfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::config(
            "training needs non-empty train and validation splits",
        ));
    }
    let slot = model.frozen_prefix(mask);
    let train_set = Prepared::new(&model, slot, train)?;
    let valid_set = Prepared::new(&model, slot, valid)?;
    let initial_train = train_set.loss(&model)?;
    let initial_valid = valid_set.loss(&model)?;
    if !initial_train.is_finite() || !initial_valid.is_finite() {
        return Err(Error::numeric("initial model", "non-finite loss"));
    }
    let mut record = TrainRecord {
        train_loss: vec![initial_train],
        valid_loss: vec![initial_valid],
        selected_epoch: 0,
    };
    let mut best = model.clone();
    let mut rng = rng_for(tcfg.seed, 7);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut lr = tcfg.learning_rate;
    let total_frames: usize = train.iter().map(|u| u.inputs.rows()).sum();

    let per_epoch = train.len().div_ceil(tcfg.batch);
    let epochs = tcfg.epochs.max(tcfg.min_updates.div_ceil(per_epoch));
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for chunk in order.chunks(tcfg.batch) {
            let mut acc: Option<ModelGrads> = None;
            for &i in chunk {
                let (pred, cache) = train_set.forward_cached(&model, i)?;
                let (loss, d_out) = stream_mse(&pred, train_set.targets[i])?;
                if !loss.is_finite() {
                    return Err(Error::numeric(
                        "training",
                        format!("non-finite loss at epoch {epoch}"),
                    ));
                }
                weighted += loss * pred.frames() as f64;
                let g = model.backward(&cache, &d_out, mask)?;
                match acc.as_mut() {
                    Some(a) => add_grads(a, g),
                    None => acc = Some(g),
                }
            }
            let mut g = acc.expect("non-empty chunk");
            if chunk.len() > 1 {
                let s = 1.0 / chunk.len() as f64;
                g.blocks
                    .iter_mut()
                    .flatten()
                    .for_each(|b| b.iter_mut().for_each(|v| *v *= s));
            }
            if let Some(c) = tcfg.clip_norm {
                clip_global_norm(&mut g, c);
            }
            sgd_step(&mut model, &g, mask, lr)?;
        }
        let train_loss = weighted / total_frames.max(1) as f64;
        let valid_loss = valid_set.loss(&model)?;
        if !train_loss.is_finite()
            || !valid_loss.is_finite()
            || train_loss > DIVERGENCE_FACTOR * initial_train
        {
            return Err(Error::numeric(
                "training",
                format!(
                    "diverged at epoch {epoch}: train loss {train_loss}, initial {initial_train}"
                ),
            ));
        }
        record.train_loss.push(train_loss);
        record.valid_loss.push(valid_loss);
        debug!("epoch {epoch}: lr {lr:.5} train {train_loss:.6} valid {valid_loss:.6}");
        if valid_loss < record.valid_loss[record.selected_epoch] {
            record.selected_epoch = epoch;
            best = model.clone();
        } else if epoch - record.selected_epoch >= tcfg.early_stop_patience {
            debug!("early stop at epoch {epoch}");
            break;
        }
        lr *= tcfg.lr_decay;
    }
    Ok((best, record))
}

/// Speaker-dependent training of a fresh model (seeded by `tcfg.seed`) on
/// `train`, selecting by loss on `valid`.
pub fn train_sd_on(
    cfg: &ModelConfig,
    train: &[Utterance],
    valid: &[Utterance],
    stats: &NormStats,
    tcfg: &TrainConfig,
) -> Result<(MultiTaskModel, TrainRecord)> {
    if train.is_empty() {
        return Err(Error::config(
            "speaker-dependent training needs training utterances",
        ));
    }
    let mut model = build_model(cfg, tcfg.seed)?;
    model.norm = Some(stats.clone());
    let mask = model.trainable_mask(TrainMode::Sd)?;
    let (mut m, rec) = train_loop(
        model,
        &mask,
        &normalize_all(train, stats)?,
        &normalize_all(valid, stats)?,
        tcfg,
    )?;
    m.norm = Some(stats.clone());
    info!(
        "sd training: {} utterances, selected epoch {} valid {:.6}",
        train.len(),
        rec.selected_epoch,
        rec.selected_valid_loss()
    );
    Ok((m, rec))
}

pub fn train_sd(
    cfg: &ModelConfig,
    corpus: &Corpus,
    tcfg: &TrainConfig,
) -> Result<(MultiTaskModel, TrainRecord)> {
    if corpus.train.is_empty() || corpus.valid.is_empty() {
        return Err(Error::config(
            "corpus needs non-empty train and validation splits",
        ));
    }
    train_sd_on(cfg, &corpus.train, &corpus.valid, &corpus.stats, tcfg)
}

/// Adapts `source` towards the speaker of `train`/`valid`.
///
/// With `kind = None` only the output heads are fine-tuned. Otherwise fresh
/// adapters are inserted at the policy positions and trained together with
/// the heads. In both cases the trunk is checked to be bitwise unchanged.
pub fn adapt_on(
    source: &MultiTaskModel,
    train: &[Utterance],
    valid: &[Utterance],
    stats: &NormStats,
    kind: Option<AdapterKind>,
    policy: &InsertionPolicy,
    tcfg: &TrainConfig,
) -> Result<(MultiTaskModel, TrainRecord)> {
    if source.has_adapters() {
        return Err(Error::State("source model already carries adapters".into()));
    }
    let (mut model, mode) = match kind {
        None => (source.clone(), TrainMode::Ol),
        Some(k) => (
            source.insert_adapters(policy, k, tcfg.seed)?,
            TrainMode::OlPlusAdapters,
        ),
    };
    model.norm = Some(stats.clone());
    let mask = model.trainable_mask(mode)?;
    let (mut adapted, record) = if tcfg.epochs == 0 {
        let v = dataset_loss(&model, &normalize_all(valid, stats)?)?;
        let t = if train.is_empty() {
            f64::NAN
        } else {
            dataset_loss(&model, &normalize_all(train, stats)?)?
        };
        (
            model,
            TrainRecord {
                train_loss: vec![t],
                valid_loss: vec![v],
                selected_epoch: 0,
            },
        )
    } else {
        train_loop(
            model,
            &mask,
            &normalize_all(train, stats)?,
            &normalize_all(valid, stats)?,
            tcfg,
        )?
    };
    if adapted.snapshot(BlockGroup::Trunk) != source.snapshot(BlockGroup::Trunk) {
        return Err(Error::State(
            "adaptation modified frozen trunk parameters".into(),
        ));
    }
    adapted.norm = Some(stats.clone());
    Ok((adapted, record))
}

pub fn adapt(
    source: &MultiTaskModel,
    target: &Corpus,
    kind: Option<AdapterKind>,
    policy: &InsertionPolicy,
    tcfg: &TrainConfig,
) -> Result<(MultiTaskModel, TrainRecord)> {
    adapt_on(
        source,
        &target.train,
        &target.valid,
        &target.stats,
        kind,
        policy,
        tcfg,
    )
}

/// Metrics for normalized-space predictions against raw utterances.
pub fn evaluate_predictions(
    preds: &[Streams],
    utts: &[Utterance],
    stats: &NormStats,
) -> Result<MetricsReport> {
    if utts.is_empty() {
        return Err(Error::config("evaluation needs at least one utterance"));
    }
    if preds.len() != utts.len() {
        return Err(Error::shape("prediction count", utts.len(), preds.len()));
    }
    let dims = stats_dims(stats);
    let denorm = preds
        .iter()
        .map(|p| stats.denormalize(p))
        .collect::<Result<Vec<_>>>()?;
    let hyp = Streams::concat(&dims, &denorm)?;
    let reference = Streams::concat(&dims, utts.iter().map(|u| &u.targets))?;
    let ref_voiced: Vec<bool> = utts.iter().flat_map(|u| u.voiced.iter().copied()).collect();
    let uv_hyp: Vec<f64> = hyp[Stream::Uv].row_iter().map(|r| r[0]).collect();
    let hyp_voiced: Vec<bool> = uv_hyp.iter().map(|&v| metrics::is_voiced(v)).collect();
    let lf0 = |m: &Matrix| m.row_iter().map(|r| r[0]).collect::<Vec<f64>>();
    let f0 = metrics::f0_rmse(
        &lf0(&reference[Stream::Lf0]),
        &lf0(&hyp[Stream::Lf0]),
        &ref_voiced,
        &hyp_voiced,
    )?;

    // The overall MSE is taken on the normalized predictions directly so it
    // matches the training loss exactly.
    let norm_pred = Streams::concat(&dims, preds)?;
    let norm_ref = stats.normalize_streams(&reference)?;
    Ok(MetricsReport {
        mcd: metrics::mcd(&reference[Stream::Mcep], &hyp[Stream::Mcep])?,
        f0_rmse: f0.hz,
        uv_error: metrics::uv_error(&ref_voiced, &uv_hyp)?,
        overall_mse: stream_mse(&norm_pred, &norm_ref)?.0,
        n_frames: reference.frames(),
        f0_defined: f0.defined(),
    })
}

fn stats_dims(stats: &NormStats) -> crate::streams::HeadDims {
    crate::streams::HeadDims {
        mcep: stats.streams[0].dim(),
        lf0: stats.streams[1].dim(),
        bap: stats.streams[2].dim(),
        uv: stats.streams[3].dim(),
    }
}

/// Runs the model on every utterance, de-normalizes, and scores.
pub fn evaluate(
    model: &MultiTaskModel,
    utts: &[Utterance],
    stats: &NormStats,
) -> Result<MetricsReport> {
    let preds = utts
        .iter()
        .map(|u| model.forward(&stats.input.normalize(&u.inputs)?))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&preds, utts, stats)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::corpus::{make_speaker, synthesize_corpus, CorpusConfig};

    #[test]
    fn mse_zero_on_equal() {
        let m = Matrix::uniform(3, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let (l, g) = mse_loss(std::slice::from_ref(&m), std::slice::from_ref(&m)).unwrap();
        assert_eq!(l, 0.0);
        assert!(g[0].as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mse_scalar() {
        let p = Matrix::from_rows(&[[2.0]]).unwrap();
        let t = Matrix::from_rows(&[[0.0]]).unwrap();
        let (l, g) = mse_loss(&[p], &[t]).unwrap();
        assert_eq!(l, 4.0);
        assert_eq!(g[0].as_slice(), &[4.0]);
    }

    #[test]
    fn mse_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let preds: Vec<Matrix> = [3, 1, 2]
            .iter()
            .map(|&d| Matrix::uniform(5, d, 1.0, &mut rng))
            .collect();
        let targets: Vec<Matrix> = [3, 1, 2]
            .iter()
            .map(|&d| Matrix::uniform(5, d, 1.0, &mut rng))
            .collect();
        let mut naive = 0.0;
        for (p, t) in preds.iter().zip(&targets) {
            let mut s = 0.0;
            for i in 0..p.rows() {
                for j in 0..p.cols() {
                    s += (p[(i, j)] - t[(i, j)]).powi(2);
                }
            }
            naive += s / (p.rows() * p.cols()) as f64;
        }
        naive /= 3.0;
        let (l, _) = mse_loss(&preds, &targets).unwrap();
        assert!((l - naive).abs() < 1e-12);
    }

    #[test]
    fn mse_shape_mismatch() {
        assert!(mse_loss(&[Matrix::zeros(2, 2)], &[Matrix::zeros(2, 3)]).is_err());
        assert!(mse_loss(&[Matrix::zeros(2, 2)], &[]).is_err());
    }

    fn desk_model() -> MultiTaskModel {
        build_model(&ModelConfig::desk(), 1).unwrap()
    }

    fn zero_grads(m: &MultiTaskModel, value: f64) -> ModelGrads {
        let mut blocks = Vec::new();
        m.for_each_block(|b| blocks.push(Some(vec![value; b.values.len()])));
        ModelGrads { blocks }
    }

    #[test]
    fn sgd_noops() {
        let m = desk_model();
        let g = zero_grads(&m, 0.3);
        let mut a = m.clone();
        sgd_step(&mut a, &g, &m.trainable_mask(TrainMode::Sd).unwrap(), 0.0).unwrap();
        assert_eq!(a, m);
        let mut b = m.clone();
        sgd_step(&mut b, &g, &TrainMask::none(m.block_names()), 0.1).unwrap();
        assert_eq!(b, m);
    }

    #[test]
    fn sgd_scalar_update() {
        let mut m = desk_model();
        m.head_mut(Stream::Uv).bias[0] = 1.0;
        let names = m.block_names();
        let idx = names.iter().position(|n| n == "head.uv.bias").unwrap();
        let mut g = zero_grads(&m, 0.0);
        g.blocks[idx] = Some(vec![0.5]);
        let mut mask = TrainMask::none(names);
        mask.flags[idx] = true;
        sgd_step(&mut m, &g, &mask, 0.1).unwrap();
        assert!((m.head(Stream::Uv).bias[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite_and_names_block() {
        let m = desk_model();
        let mut g = zero_grads(&m, 0.0);
        let idx = m
            .block_names()
            .iter()
            .position(|n| n == "blstm1.bwd.bias")
            .unwrap();
        g.blocks[idx] = Some(vec![f64::NAN; 64]);
        let mut a = m.clone();
        let err = sgd_step(&mut a, &g, &m.trainable_mask(TrainMode::Sd).unwrap(), 0.1).unwrap_err();
        assert!(err.to_string().contains("blstm1.bwd.bias"), "{err}");
        assert_eq!(a, m);
    }

    #[test]
    fn clip_bounds_norm() {
        let m = desk_model();
        let mut g = zero_grads(&m, 1.0);
        let before = clip_global_norm(&mut g, 5.0);
        assert!(before > 5.0);
        let after = g
            .blocks
            .iter()
            .flatten()
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!((after - 5.0).abs() < 1e-9);
    }

    fn small_corpus(seed: u64, distance: f64, n: usize) -> Corpus {
        let cfg = CorpusConfig {
            n_valid: 4,
            n_test: 2,
            ..CorpusConfig::default()
        };
        synthesize_corpus(&make_speaker(seed, distance).unwrap(), n, seed + 10, &cfg).unwrap()
    }

    #[test]
    fn small_step_decreases_batch_loss() {
        let c = small_corpus(1, 0.0, 8);
        let data = normalize_all(&c.train[..1], &c.stats).unwrap();
        for seed in 0..10 {
            let mut m = build_model(&ModelConfig::desk(), seed).unwrap();
            let mask = m.trainable_mask(TrainMode::Sd).unwrap();
            let (pred, cache) = m.forward_cached(&data[0].inputs).unwrap();
            let (before, d) = stream_mse(&pred, &data[0].targets).unwrap();
            let g = m.backward(&cache, &d, &mask).unwrap();
            sgd_step(&mut m, &g, &mask, 1e-4).unwrap();
            let after = dataset_loss(&m, &data).unwrap();
            assert!(after < before, "seed {seed}: {after} >= {before}");
        }
    }

    #[test]
    fn evaluate_oracle_predictions_are_zero() {
        let c = small_corpus(2, 0.3, 9);
        let preds: Vec<Streams> = c
            .valid
            .iter()
            .map(|u| c.stats.normalize(u).unwrap().targets)
            .collect();
        let r = evaluate_predictions(&preds, &c.valid, &c.stats).unwrap();
        assert!(r.mcd < 1e-9 && r.f0_rmse < 1e-9 && r.overall_mse < 1e-20);
        assert_eq!(r.uv_error, 0.0);
    }

    #[test]
    fn evaluate_matches_manual_chain() {
        let c = small_corpus(3, 0.3, 9);
        let m = build_model(&ModelConfig::desk(), 5).unwrap();
        let r = evaluate(&m, &c.valid, &c.stats).unwrap();
        assert_eq!(r, evaluate(&m, &c.valid, &c.stats).unwrap());

        let mut mcd_sum = 0.0;
        let mut frames = 0;
        let mut raw_preds = Vec::new();
        for u in &c.valid {
            let p = m
                .forward(&c.stats.input.normalize(&u.inputs).unwrap())
                .unwrap();
            let d = c.stats.denormalize(&p).unwrap();
            mcd_sum += metrics::mcd(&u.targets[Stream::Mcep], &d[Stream::Mcep]).unwrap()
                * u.frames() as f64;
            frames += u.frames();
            raw_preds.push(d);
        }
        assert!((r.mcd - mcd_sum / frames as f64).abs() < 1e-10);
        let dims = m.config().head_dims;
        let all_p = Streams::concat(&dims, &raw_preds).unwrap();
        let all_t = Streams::concat(&dims, c.valid.iter().map(|u| &u.targets)).unwrap();
        let mse = metrics::overall_mse(&all_p, &all_t, &c.stats).unwrap();
        assert!((r.overall_mse - mse).abs() < 1e-10);
    }

    #[test]
    fn tiny_sd_run_is_deterministic_and_improves() {
        let c = small_corpus(4, 0.0, 14);
        let tcfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::sd_default()
        };
        let (m1, r1) = train_sd(&ModelConfig::desk(), &c, &tcfg).unwrap();
        let (m2, r2) = train_sd(&ModelConfig::desk(), &c, &tcfg).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1, m2);
        assert!(r1.selected_valid_loss() < r1.valid_loss[0]);
        assert_eq!(r1.train_loss.len(), r1.valid_loss.len());
    }

    #[test]
    fn huge_learning_rate_surfaces_divergence() {
        let c = small_corpus(5, 0.0, 12);
        let tcfg = TrainConfig {
            learning_rate: 1e3,
            epochs: 5,
            ..TrainConfig::sd_default()
        };
        let err = train_sd(&ModelConfig::desk(), &c, &tcfg).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }), "{err}");
    }

    #[test]
    fn zero_epoch_full_ln_adaptation_is_identity() {
        let c = small_corpus(6, 0.2, 10);
        let source = build_model(&ModelConfig::desk(), 3).unwrap();
        let tcfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::adapt_default()
        };
        let (m, _) = adapt(
            &source,
            &c,
            Some(AdapterKind::Full),
            &InsertionPolicy::default(),
            &tcfg,
        )
        .unwrap();
        for u in &c.valid {
            let x = c.stats.input.normalize(&u.inputs).unwrap();
            assert_eq!(m.forward(&x).unwrap(), source.forward(&x).unwrap());
        }
    }

    #[test]
    fn adaptation_freezes_trunk() {
        let c = small_corpus(7, 0.3, 12);
        let source = build_model(&ModelConfig::desk(), 4).unwrap();
        let tcfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::adapt_default()
        };
        for kind in [
            None,
            Some(AdapterKind::Full),
            Some(AdapterKind::Lrpd { rank: 4 }),
        ] {
            let (m, _) = adapt(&source, &c, kind, &InsertionPolicy::default(), &tcfg).unwrap();
            assert_eq!(
                m.snapshot(BlockGroup::Trunk),
                source.snapshot(BlockGroup::Trunk)
            );
        }
    }

    #[test]
    fn record_csv() {
        let r = TrainRecord {
            train_loss: vec![1.0, 0.5],
            valid_loss: vec![1.5, 0.75],
            selected_epoch: 1,
        };
        assert_eq!(r.to_csv(), "epoch,train_loss,valid_loss\n0,1.0000000000,1.5000000000\n1,0.5000000000,0.7500000000\n");
    }
}
