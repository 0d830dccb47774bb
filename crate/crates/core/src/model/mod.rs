//! Multi-task trunk-plus-heads model with adapter slots.
//!
//! The trunk is one tanh dense layer followed by a stack of BLSTM layers.
//! Every trunk boundary above the dense layer owns an adapter slot, and the
//! final trunk activation feeds four independent linear heads.

pub(crate) mod io;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{init_adapter, Adapter, AdapterCache, AdapterKind};
use crate::corpus::NormStats;
use crate::error::{Error, Result};
use crate::nn::{Activation, BlstmCache, BlstmLayer, DenseCache, DenseLayer, Layer, Matrix};
use crate::streams::{HeadDims, Stream, Streams};

pub use io::{load_model, read_model, save_model, write_model, MODEL_MAGIC};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub dense_width: usize,
    pub blstm_widths: Vec<usize>,
    pub head_dims: HeadDims,
}

impl ModelConfig {
    /// 24 → 32 → BLSTM 32 → BLSTM 32 → heads 12/3/4/1.
    pub fn desk() -> Self {
        ModelConfig {
            input_dim: 24,
            dense_width: 32,
            blstm_widths: vec![32, 32],
            head_dims: HeadDims {
                mcep: 12,
                lf0: 3,
                bap: 4,
                uv: 1,
            },
        }
    }

    /// 753 → 1024 → 3 × BLSTM 1024 → heads 60/3/11/1.
    pub fn paper_scale() -> Self {
        ModelConfig {
            input_dim: 753,
            dense_width: 1024,
            blstm_widths: vec![1024, 1024, 1024],
            head_dims: HeadDims {
                mcep: 60,
                lf0: 3,
                bap: 11,
                uv: 1,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be at least 1"));
        }
        if self.dense_width < 2 {
            return Err(Error::config(format!(
                "dense width {} is below 2",
                self.dense_width
            )));
        }
        if self.blstm_widths.is_empty() {
            return Err(Error::config("at least one BLSTM layer is required"));
        }
        for &w in &self.blstm_widths {
            if w < 2 || w % 2 != 0 {
                return Err(Error::config(format!(
                    "blstm width {w} must be even and at least 2"
                )));
            }
        }
        for s in Stream::ALL {
            if self.head_dims.get(s) == 0 {
                return Err(Error::config(format!(
                    "{s} head must have at least one output"
                )));
            }
        }
        Ok(())
    }

    pub fn n_blstm(&self) -> usize {
        self.blstm_widths.len()
    }

    /// Number of adapter slots: one before each BLSTM, one before the heads.
    pub fn n_slots(&self) -> usize {
        self.n_blstm() + 1
    }

    pub fn slot_width(&self, slot: usize) -> usize {
        if slot == 0 {
            self.dense_width
        } else {
            self.blstm_widths[slot - 1]
        }
    }

    pub fn final_width(&self) -> usize {
        *self.blstm_widths.last().expect("validated config")
    }

    /// Trunk and head parameter count, excluding adapters.
    pub fn base_param_count(&self) -> usize {
        let mut n = self.dense_width * self.input_dim + self.dense_width;
        let mut prev = self.dense_width;
        for &w in &self.blstm_widths {
            let h = w / 2;
            n += 2 * (4 * h * prev + 4 * h * h + 4 * h);
            prev = w;
        }
        n + self.head_dims.total() * (prev + 1)
    }
}

/// Symbolic adapter positions, resolved against a concrete trunk depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlotPosition {
    AfterDense,
    /// Between BLSTM `i` and BLSTM `i + 1` (zero-based).
    BetweenBlstm(usize),
    BeforeLastHidden,
    BeforeOutput,
}

impl SlotPosition {
    pub fn resolve(self, cfg: &ModelConfig) -> Result<usize> {
        let n = cfg.n_blstm();
        match self {
            SlotPosition::AfterDense => Ok(0),
            SlotPosition::BetweenBlstm(i) if i + 1 < n => Ok(i + 1),
            SlotPosition::BetweenBlstm(i) => Err(Error::config(format!(
                "no boundary between blstm {i} and {} in a {n}-layer stack",
                i + 1
            ))),
            SlotPosition::BeforeLastHidden => Ok(n - 1),
            SlotPosition::BeforeOutput => Ok(n),
        }
    }
}

impl fmt::Display for SlotPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlotPosition::AfterDense => f.write_str("after_dense"),
            SlotPosition::BetweenBlstm(i) => write!(f, "between_blstm:{i}"),
            SlotPosition::BeforeLastHidden => f.write_str("before_last_hidden"),
            SlotPosition::BeforeOutput => f.write_str("before_output"),
        }
    }
}

impl FromStr for SlotPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "after_dense" => Ok(SlotPosition::AfterDense),
            "before_last_hidden" => Ok(SlotPosition::BeforeLastHidden),
            "before_output" => Ok(SlotPosition::BeforeOutput),
            other => other
                .strip_prefix("between_blstm:")
                .and_then(|i| i.parse().ok())
                .map(SlotPosition::BetweenBlstm)
                .ok_or_else(|| Error::config(format!("unknown insertion position {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InsertionPolicy {
    pub positions: Vec<SlotPosition>,
}

impl Default for InsertionPolicy {
    /// Before the last hidden layer and before the output layer.
    fn default() -> Self {
        InsertionPolicy {
            positions: vec![SlotPosition::BeforeLastHidden, SlotPosition::BeforeOutput],
        }
    }
}

impl fmt::Display for InsertionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.positions.iter().map(|p| p.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for InsertionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let positions = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        if positions.is_empty() {
            return Err(Error::config("insertion policy names no positions"));
        }
        Ok(InsertionPolicy { positions })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Every parameter.
    Sd,
    /// Output heads only.
    Ol,
    /// Output heads plus every inserted adapter.
    OlPlusAdapters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockGroup {
    Trunk,
    Adapter,
    Head,
}

/// Read-only view of one named parameter block.
#[derive(Debug, Clone, Copy)]
pub struct ParamBlock<'a> {
    pub name: &'a str,
    pub group: BlockGroup,
    pub values: &'a [f64],
}

pub(crate) struct BlockEntry<'a> {
    pub name: String,
    pub group: BlockGroup,
    pub values: &'a [f64],
}

pub(crate) struct BlockEntryMut<'a> {
    pub name: String,
    pub values: &'a mut [f64],
}

/// Which parameter blocks an update may touch, aligned with
/// [`MultiTaskModel::block_names`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainMask {
    pub names: Vec<String>,
    pub flags: Vec<bool>,
}

impl TrainMask {
    pub fn trainable(&self) -> impl Iterator<Item = &str> {
        self.names
            .iter()
            .zip(&self.flags)
            .filter(|(_, &f)| f)
            .map(|(n, _)| n.as_str())
    }

    pub fn count_true(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn none(names: Vec<String>) -> Self {
        let flags = vec![false; names.len()];
        TrainMask { names, flags }
    }
}

/// Per-block gradients aligned with the model's block order. `None` marks a
/// block whose gradient was not computed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub blocks: Vec<Option<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskModel {
    config: ModelConfig,
    pub dense: DenseLayer,
    pub blstms: Vec<BlstmLayer>,
    slots: Vec<Option<Adapter>>,
    /// Indexed by [`Stream::index`].
    pub heads: Vec<DenseLayer>,
    pub norm: Option<NormStats>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache {
    /// Stages below the slot a forward pass started from hold no cache.
    dense: Option<DenseCache>,
    slots: Vec<Option<AdapterCache>>,
    blstms: Vec<Option<BlstmCache>>,
    final_activation: Matrix,
}

fn missing_cache(stage: &str) -> Error {
    Error::State(format!(
        "no cached {stage} activations: the forward pass started above the trained blocks"
    ))
}

/// Stage order bottom-up: dense, then slot 0, blstm 0, slot 1, ..., slot n,
/// then heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Stage {
    Dense,
    Slot(usize),
    Blstm(usize),
    Heads,
}

impl Stage {
    fn rank(self) -> usize {
        match self {
            Stage::Dense => 0,
            Stage::Slot(s) => 1 + 2 * s,
            Stage::Blstm(i) => 2 + 2 * i,
            Stage::Heads => usize::MAX,
        }
    }
}

pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<MultiTaskModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dense = DenseLayer::init(cfg.input_dim, cfg.dense_width, Activation::Tanh, &mut rng);
    let mut blstms = Vec::with_capacity(cfg.n_blstm());
    let mut prev = cfg.dense_width;
    for &w in &cfg.blstm_widths {
        blstms.push(BlstmLayer::init(prev, w, &mut rng)?);
        prev = w;
    }
    let heads = Stream::ALL
        .iter()
        .map(|&s| DenseLayer::init(prev, cfg.head_dims.get(s), Activation::Linear, &mut rng))
        .collect();
    Ok(MultiTaskModel {
        config: cfg.clone(),
        dense,
        blstms,
        slots: vec![None; cfg.n_slots()],
        heads,
        norm: None,
    })
}

impl MultiTaskModel {
    /// Assembles a model from parts, checking every width.
    pub fn from_parts(
        config: ModelConfig,
        dense: DenseLayer,
        blstms: Vec<BlstmLayer>,
        slots: Vec<Option<Adapter>>,
        heads: Vec<DenseLayer>,
    ) -> Result<Self> {
        config.validate()?;
        let m = MultiTaskModel {
            config,
            dense,
            blstms,
            slots,
            heads,
            norm: None,
        };
        m.check_consistency()?;
        Ok(m)
    }

    fn check_consistency(&self) -> Result<()> {
        let cfg = &self.config;
        let internal = |what: &str, e: usize, a: usize| {
            if e != a {
                Err(Error::State(format!("{what}: expected {e}, found {a}")))
            } else {
                Ok(())
            }
        };
        internal("dense input", cfg.input_dim, self.dense.input_dim())?;
        internal("dense output", cfg.dense_width, self.dense.output_dim())?;
        internal("blstm count", cfg.n_blstm(), self.blstms.len())?;
        let mut prev = cfg.dense_width;
        for (i, (b, &w)) in self.blstms.iter().zip(&cfg.blstm_widths).enumerate() {
            internal(&format!("blstm {i} input"), prev, b.input_dim())?;
            internal(&format!("blstm {i} output"), w, b.output_dim())?;
            prev = w;
        }
        internal("slot count", cfg.n_slots(), self.slots.len())?;
        for (s, slot) in self.slots.iter().enumerate() {
            if let Some(a) = slot {
                internal(&format!("slot {s} width"), cfg.slot_width(s), a.width())?;
            }
        }
        internal("head count", 4, self.heads.len())?;
        for s in Stream::ALL {
            let h = &self.heads[s.index()];
            internal(&format!("{s} head input"), prev, h.input_dim())?;
            internal(
                &format!("{s} head output"),
                cfg.head_dims.get(s),
                h.output_dim(),
            )?;
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn slots(&self) -> &[Option<Adapter>] {
        &self.slots
    }

    pub fn head(&self, s: Stream) -> &DenseLayer {
        &self.heads[s.index()]
    }

    pub fn head_mut(&mut self, s: Stream) -> &mut DenseLayer {
        &mut self.heads[s.index()]
    }

    pub fn has_adapters(&self) -> bool {
        self.slots.iter().any(Option::is_some)
    }

    /// Installs an adapter in a slot that must currently be empty.
    pub fn set_slot(&mut self, slot: usize, adapter: Adapter) -> Result<()> {
        if slot >= self.slots.len() {
            return Err(Error::config(format!(
                "slot {slot} out of range ({} slots)",
                self.slots.len()
            )));
        }
        if self.slots[slot].is_some() {
            return Err(Error::State(format!(
                "adapter slot {slot} is already occupied"
            )));
        }
        let expected = self.config.slot_width(slot);
        if adapter.width() != expected {
            return Err(Error::State(format!(
                "adapter width {} does not match slot {slot} width {expected}",
                adapter.width()
            )));
        }
        self.slots[slot] = Some(adapter);
        Ok(())
    }

    /// Inserts fresh adapters of `kind` at every policy position. Slot `s`
    /// uses seed `seed + s` so LRPD adapters in different slots differ.
    pub fn insert_adapters(
        &self,
        policy: &InsertionPolicy,
        kind: AdapterKind,
        seed: u64,
    ) -> Result<MultiTaskModel> {
        let mut out = self.clone();
        for pos in &policy.positions {
            let slot = pos.resolve(&self.config)?;
            if out.slots[slot].is_some() {
                return Err(Error::State(format!(
                    "adapter slot {slot} ({pos}) is already occupied"
                )));
            }
            let adapter = init_adapter(
                kind,
                self.config.slot_width(slot),
                seed.wrapping_add(slot as u64),
            )?;
            out.set_slot(slot, adapter)?;
        }
        Ok(out)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Streams> {
        if x.cols() != self.config.input_dim {
            return Err(Error::shape(
                "model input width",
                self.config.input_dim,
                x.cols(),
            ));
        }
        let mut h = self.dense.forward(x)?;
        for (i, blstm) in self.blstms.iter().enumerate() {
            if let Some(a) = &self.slots[i] {
                h = a.forward(&h)?;
            }
            h = blstm.forward(&h)?;
        }
        if let Some(a) = &self.slots[self.blstms.len()] {
            h = a.forward(&h)?;
        }
        self.apply_heads(&h)
    }

    fn apply_heads(&self, h: &Matrix) -> Result<Streams> {
        let [a, b, c, d] = [0, 1, 2, 3].map(|i| self.heads[i].forward(h));
        Streams::new(a?, b?, c?, d?)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<(Streams, ForwardCache)> {
        if x.cols() != self.config.input_dim {
            return Err(Error::shape(
                "model input width",
                self.config.input_dim,
                x.cols(),
            ));
        }
        let (h, dense) = self.dense.forward_cached(x)?;
        let (out, mut cache) = self.forward_cached_from_slot(0, h)?;
        cache.dense = Some(dense);
        Ok((out, cache))
    }

    /// The activation entering slot `slot` (before its adapter, if any).
    pub fn activation_before_slot(&self, x: &Matrix, slot: usize) -> Result<Matrix> {
        if slot >= self.slots.len() {
            return Err(Error::config(format!(
                "slot {slot} out of range 0..{}",
                self.slots.len()
            )));
        }
        if x.cols() != self.config.input_dim {
            return Err(Error::shape(
                "model input width",
                self.config.input_dim,
                x.cols(),
            ));
        }
        let mut h = self.dense.forward(x)?;
        for s in 0..slot {
            if let Some(a) = &self.slots[s] {
                h = a.forward(&h)?;
            }
            h = self.blstms[s].forward(&h)?;
        }
        Ok(h)
    }

    fn check_slot_input(&self, slot: usize, h: &Matrix) -> Result<()> {
        if slot >= self.slots.len() {
            return Err(Error::config(format!(
                "slot {slot} out of range 0..{}",
                self.slots.len()
            )));
        }
        if h.cols() != self.config.slot_width(slot) {
            return Err(Error::shape(
                format!("activation width at slot {slot}"),
                self.config.slot_width(slot),
                h.cols(),
            ));
        }
        Ok(())
    }

    /// Runs the model from the input of `slot` upwards; `h` is what
    /// [`activation_before_slot`](Self::activation_before_slot) returns.
    pub fn forward_from_slot(&self, slot: usize, h: &Matrix) -> Result<Streams> {
        self.check_slot_input(slot, h)?;
        let mut h = std::borrow::Cow::Borrowed(h);
        for s in slot..self.slots.len() {
            if let Some(a) = &self.slots[s] {
                h = std::borrow::Cow::Owned(a.forward(&h)?);
            }
            if let Some(blstm) = self.blstms.get(s) {
                h = std::borrow::Cow::Owned(blstm.forward(&h)?);
            }
        }
        self.apply_heads(&h)
    }

    /// Cached variant of [`forward_from_slot`](Self::forward_from_slot).
    /// Backpropagating through the returned cache fails if the mask reaches
    /// below `slot`.
    pub fn forward_cached_from_slot(
        &self,
        slot: usize,
        h: Matrix,
    ) -> Result<(Streams, ForwardCache)> {
        self.check_slot_input(slot, &h)?;
        let mut h = h;
        let mut slots: Vec<Option<AdapterCache>> = (0..self.slots.len()).map(|_| None).collect();
        let mut blstms: Vec<Option<BlstmCache>> = (0..self.blstms.len()).map(|_| None).collect();
        for s in slot..self.slots.len() {
            if let Some(a) = &self.slots[s] {
                let (y, c) = a.forward_cached(&h)?;
                h = y;
                slots[s] = Some(c);
            }
            if let Some(blstm) = self.blstms.get(s) {
                let (y, c) = blstm.forward_cached(&h)?;
                h = y;
                blstms[s] = Some(c);
            }
        }
        let out = self.apply_heads(&h)?;
        Ok((
            out,
            ForwardCache {
                dense: None,
                slots,
                blstms,
                final_activation: h,
            },
        ))
    }

    /// The lowest slot whose input is affected by a block selected in
    /// `mask`, or `None` if the dense layer is selected. Activations below
    /// it stay fixed while training under `mask`.
    pub fn frozen_prefix(&self, mask: &TrainMask) -> Option<usize> {
        let lowest = self
            .block_names()
            .iter()
            .zip(&mask.flags)
            .filter(|(_, &f)| f)
            .map(|(n, _)| self.stage_of_block(n))
            .min()
            .unwrap_or(Stage::Heads);
        match lowest {
            Stage::Dense => None,
            Stage::Slot(s) | Stage::Blstm(s) => Some(s),
            Stage::Heads => Some(self.slots.len() - 1),
        }
    }

    fn stage_of_block(&self, name: &str) -> Stage {
        if name.starts_with("dense.") {
            Stage::Dense
        } else if let Some(rest) = name.strip_prefix("blstm") {
            Stage::Blstm(
                rest.split('.')
                    .next()
                    .and_then(|i| i.parse().ok())
                    .expect("block name"),
            )
        } else if let Some(rest) = name.strip_prefix("slot") {
            Stage::Slot(
                rest.split('.')
                    .next()
                    .and_then(|i| i.parse().ok())
                    .expect("block name"),
            )
        } else {
            Stage::Heads
        }
    }

    /// Backpropagates output gradients, computing parameter gradients for the
    /// blocks selected by `mask` and stopping below the lowest such block.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_out: &Streams,
        mask: &TrainMask,
    ) -> Result<ModelGrads> {
        let names = self.block_names();
        if mask.flags.len() != names.len() {
            return Err(Error::shape(
                "train mask length",
                names.len(),
                mask.flags.len(),
            ));
        }
        let lowest = names
            .iter()
            .zip(&mask.flags)
            .filter(|(_, &f)| f)
            .map(|(n, _)| self.stage_of_block(n).rank())
            .min();
        let mut stage_grads: Vec<(String, Vec<f64>)> = Vec::new();
        let Some(lowest) = lowest else {
            return Ok(ModelGrads {
                blocks: vec![None; names.len()],
            });
        };

        let frames = cache.final_activation.rows();
        let mut dh = Matrix::zeros(frames, self.config.final_width());
        for s in Stream::ALL {
            let head = &self.heads[s.index()];
            let (dx, g) = head.backward(&cache.final_activation, &d_out[s])?;
            dh.add_assign(&dx)?;
            for ((n, _), v) in head.param_blocks().into_iter().zip(g) {
                stage_grads.push((format!("head.{s}.{n}"), v));
            }
        }

        let n = self.blstms.len();
        for s in (0..=n).rev() {
            if let (Some(a), Some(c)) = (&self.slots[s], &cache.slots[s]) {
                let (dx, g) = a.backward_cached(c, &dh)?;
                for ((name, _), v) in a.param_blocks().into_iter().zip(g) {
                    stage_grads.push((format!("slot{s}.{name}"), v));
                }
                dh = dx;
            }
            if Stage::Slot(s).rank() <= lowest {
                break;
            }
            let below = if s == 0 {
                Stage::Dense
            } else {
                Stage::Blstm(s - 1)
            };
            if s == 0 {
                let c = cache.dense.as_ref().ok_or_else(|| missing_cache("dense"))?;
                let (dx, g) = self.dense.backward_cached(c, &dh)?;
                for ((name, _), v) in self.dense.param_blocks().into_iter().zip(g) {
                    stage_grads.push((format!("dense.{name}"), v));
                }
                dh = dx;
            } else {
                let layer = &self.blstms[s - 1];
                let c = cache.blstms[s - 1]
                    .as_ref()
                    .ok_or_else(|| missing_cache("blstm"))?;
                let (dx, g) = layer.backward_cached(c, &dh)?;
                for ((name, _), v) in layer.param_blocks().into_iter().zip(g) {
                    stage_grads.push((format!("blstm{}.{name}", s - 1), v));
                }
                dh = dx;
            }
            if below.rank() <= lowest {
                break;
            }
        }

        let mut blocks: Vec<Option<Vec<f64>>> = vec![None; names.len()];
        for (name, g) in stage_grads {
            if let Some(i) = names.iter().position(|n| *n == name) {
                if mask.flags[i] {
                    blocks[i] = Some(g);
                }
            }
        }
        Ok(ModelGrads { blocks })
    }

    pub(crate) fn block_entries(&self) -> Vec<BlockEntry<'_>> {
        let mut out = Vec::new();
        for (n, v) in self.dense.param_blocks() {
            out.push(BlockEntry {
                name: format!("dense.{n}"),
                group: BlockGroup::Trunk,
                values: v,
            });
        }
        for (i, b) in self.blstms.iter().enumerate() {
            for (n, v) in b.param_blocks() {
                out.push(BlockEntry {
                    name: format!("blstm{i}.{n}"),
                    group: BlockGroup::Trunk,
                    values: v,
                });
            }
        }
        for (s, slot) in self.slots.iter().enumerate() {
            if let Some(a) = slot {
                for (n, v) in a.param_blocks() {
                    out.push(BlockEntry {
                        name: format!("slot{s}.{n}"),
                        group: BlockGroup::Adapter,
                        values: v,
                    });
                }
            }
        }
        for s in Stream::ALL {
            for (n, v) in self.heads[s.index()].param_blocks() {
                out.push(BlockEntry {
                    name: format!("head.{s}.{n}"),
                    group: BlockGroup::Head,
                    values: v,
                });
            }
        }
        out
    }

    pub(crate) fn block_entries_mut(&mut self) -> Vec<BlockEntryMut<'_>> {
        let mut out = Vec::new();
        for (n, v) in self.dense.param_blocks_mut() {
            out.push(BlockEntryMut {
                name: format!("dense.{n}"),
                values: v,
            });
        }
        for (i, b) in self.blstms.iter_mut().enumerate() {
            for (n, v) in b.param_blocks_mut() {
                out.push(BlockEntryMut {
                    name: format!("blstm{i}.{n}"),
                    values: v,
                });
            }
        }
        for (s, slot) in self.slots.iter_mut().enumerate() {
            if let Some(a) = slot {
                for (n, v) in a.param_blocks_mut() {
                    out.push(BlockEntryMut {
                        name: format!("slot{s}.{n}"),
                        values: v,
                    });
                }
            }
        }
        for (s, head) in Stream::ALL.into_iter().zip(self.heads.iter_mut()) {
            for (n, v) in head.param_blocks_mut() {
                out.push(BlockEntryMut {
                    name: format!("head.{s}.{n}"),
                    values: v,
                });
            }
        }
        out
    }

    /// Visits every parameter block in canonical order.
    pub fn for_each_block(&self, mut f: impl FnMut(ParamBlock<'_>)) {
        for e in self.block_entries() {
            f(ParamBlock {
                name: &e.name,
                group: e.group,
                values: e.values,
            });
        }
    }

    pub fn block_names(&self) -> Vec<String> {
        self.block_entries().into_iter().map(|e| e.name).collect()
    }

    /// Copies of every block in `group`, keyed by name.
    pub fn snapshot(&self, group: BlockGroup) -> Vec<(String, Vec<f64>)> {
        self.block_entries()
            .into_iter()
            .filter(|e| e.group == group)
            .map(|e| (e.name, e.values.to_vec()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.block_entries().iter().map(|e| e.values.len()).sum()
    }

    pub fn trainable_mask(&self, mode: TrainMode) -> Result<TrainMask> {
        if mode == TrainMode::OlPlusAdapters && !self.has_adapters() {
            return Err(Error::config(
                "ol_plus_adapters mode needs at least one inserted adapter",
            ));
        }
        let entries = self.block_entries();
        let flags = entries
            .iter()
            .map(|e| match mode {
                TrainMode::Sd => true,
                TrainMode::Ol => e.group == BlockGroup::Head,
                TrainMode::OlPlusAdapters => e.group != BlockGroup::Trunk,
            })
            .collect();
        Ok(TrainMask {
            names: entries.into_iter().map(|e| e.name).collect(),
            flags,
        })
    }
}
