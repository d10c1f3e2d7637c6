//! Toy-scale training phases on synthetic token data.
//!
//! Phase 1 trains a cell resampler and a text projection with an image-text
//! contrastive loss. Phase 2 trains a patch resampler and a shared linear map
//! so patch tokens line up with the cell tokens of the same patch. Phases 3
//! and 4 need a language model and are exposed only as [`PhaseHook`]s.
//!
//! Updates are plain SGD, averaged over a mini-batch, single-threaded.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::{
    loss_global, loss_itc, loss_local, resample, resample_traced, AlignError, AttentionWeights, ResamplerParams,
    TokenMatrix,
};
use crate::seed;

pub const DEFAULT_BASE_LR: f64 = 5e-5;
pub const DEFAULT_WARMUP_FRAC: f64 = 0.10;
pub const DEFAULT_TOTAL_STEPS: usize = 500;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_LAMBDA_LOCAL: f64 = 1.0;
pub const DEFAULT_ITC_TEMPERATURE: f64 = 0.1;

/// Learning rate used by the bundled synthetic runs. The default peak rate is
/// sized for large pretrained models and barely moves toy parameters in 500 steps.
pub const TOY_BASE_LR: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("step {step} outside 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("invalid phase plan: {0}")]
    Plan(String),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize, trace: Box<TrainingTrace> },
    #[error("frozen group {0} changed during the phase")]
    FrozenMutated(ParamGroup),
    #[error("no usable training samples (every patch is cell-free)")]
    NoSamples,
    #[error("hook {name} failed at step {step}: {message}")]
    Hook { name: String, step: usize, message: String },
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Linear warmup then cosine decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_frac: f64,
    pub total_steps: usize,
    pub final_lr: f64,
}

impl Schedule {
    pub fn new(total_steps: usize) -> Self {
        Self {
            base_lr: DEFAULT_BASE_LR,
            warmup_frac: DEFAULT_WARMUP_FRAC,
            total_steps,
            final_lr: 0.0,
        }
    }

    pub fn with_base_lr(mut self, lr: f64) -> Self {
        self.base_lr = lr;
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(TrainError::Schedule(format!("warmup_frac {} not in [0, 1)", self.warmup_frac)));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(TrainError::Schedule(format!("base_lr {} must be positive", self.base_lr)));
        }
        if !(self.final_lr >= 0.0 && self.final_lr.is_finite()) {
            return Err(TrainError::Schedule(format!("final_lr {} must be non-negative", self.final_lr)));
        }
        Ok(())
    }

    /// Number of warmup steps, `⌈warmup_frac · total⌉`.
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.total_steps as f64).ceil() as usize
    }

    pub fn lr_at(&self, step: usize) -> Result<f64, TrainError> {
        lr_at(self, step)
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self::new(DEFAULT_TOTAL_STEPS)
    }
}

/// Learning rate at `step` for `0 ≤ step ≤ total_steps`.
pub fn lr_at(s: &Schedule, step: usize) -> Result<f64, TrainError> {
    if step > s.total_steps {
        return Err(TrainError::StepOutOfRange { step, total: s.total_steps });
    }
    let warm = s.warmup_steps();
    if step < warm {
        return Ok(s.base_lr * step as f64 / warm as f64);
    }
    let span = s.total_steps - warm;
    if span == 0 {
        return Ok(s.base_lr);
    }
    let progress = (step - warm) as f64 / span as f64;
    Ok(s.final_lr + (s.base_lr - s.final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Named parameter groups of the toy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    CellQFormer,
    TextProjection,
    PatchResampler,
    SharedMap,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Backbone,
        ParamGroup::CellQFormer,
        ParamGroup::TextProjection,
        ParamGroup::PatchResampler,
        ParamGroup::SharedMap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::CellQFormer => "cell_qformer",
            ParamGroup::TextProjection => "text_projection",
            ParamGroup::PatchResampler => "patch_resampler",
            ParamGroup::SharedMap => "shared_map",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| TrainError::Checkpoint(format!("unknown parameter group {s:?}")))
    }
}

/// Every parameter of the toy model.
///
/// The backbone is a fixed linear encoder standing in for the frozen image
/// encoder; phase 1 reads image tokens through it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub backbone: TokenMatrix,
    pub cell_qformer: ResamplerParams,
    pub text_projection: TokenMatrix,
    pub patch_resampler: ResamplerParams,
    pub shared_map: TokenMatrix,
}

impl ModelState {
    /// Random resamplers with `n_latents` queries, identity shared map.
    pub fn new(dim: usize, n_latents: usize, seed: u64) -> Self {
        let mut rng = seed::scoped_rng(seed, "model-init");
        let scale = 1.0 / (dim as f64).sqrt();
        let backbone = TokenMatrix::random_normal(dim, dim, scale, &mut rng);
        let cell_qformer = ResamplerParams::random(n_latents, dim, 1, &mut rng);
        let text_projection = TokenMatrix::random_normal(dim, dim, scale, &mut rng);
        let patch_resampler = ResamplerParams::random(n_latents, dim, 1, &mut rng);
        Self {
            backbone,
            cell_qformer,
            text_projection,
            patch_resampler,
            shared_map: TokenMatrix::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.shared_map.rows()
    }

    /// Flat copy of one group's values, used for freeze checks.
    pub fn group_values(&self, g: ParamGroup) -> Vec<f64> {
        let tensors: Vec<&TokenMatrix> = match g {
            ParamGroup::Backbone => vec![&self.backbone],
            ParamGroup::CellQFormer => self.cell_qformer.tensors(),
            ParamGroup::TextProjection => vec![&self.text_projection],
            ParamGroup::PatchResampler => self.patch_resampler.tensors(),
            ParamGroup::SharedMap => vec![&self.shared_map],
        };
        tensors.iter().flat_map(|t| t.as_slice().iter().copied()).collect()
    }

    /// Text checkpoint: per group a `# name count` line then that many matrices.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), TrainError> {
        for g in ParamGroup::ALL {
            let tensors: Vec<&TokenMatrix> = match g {
                ParamGroup::Backbone => vec![&self.backbone],
                ParamGroup::CellQFormer => self.cell_qformer.tensors(),
                ParamGroup::TextProjection => vec![&self.text_projection],
                ParamGroup::PatchResampler => self.patch_resampler.tensors(),
                ParamGroup::SharedMap => vec![&self.shared_map],
            };
            writeln!(w, "# {} {}", g.name(), tensors.len())?;
            for t in tensors {
                t.write_text(&mut w)?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(r: &mut R) -> Result<Self, TrainError> {
        let mut groups: Vec<(ParamGroup, Vec<TokenMatrix>)> = Vec::new();
        let mut header = String::new();
        loop {
            header.clear();
            if r.read_line(&mut header)? == 0 {
                break;
            }
            let line = header.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.strip_prefix("# ").unwrap_or("").split_whitespace();
            let (Some(name), Some(count)) = (parts.next(), parts.next().and_then(|c| c.parse::<usize>().ok())) else {
                return Err(TrainError::Checkpoint(format!("bad group header {line:?}")));
            };
            let group: ParamGroup = name.parse()?;
            let tensors = (0..count).map(|_| TokenMatrix::read_text(r)).collect::<Result<Vec<_>, _>>()?;
            groups.push((group, tensors));
        }
        let mut take = |g: ParamGroup| -> Result<Vec<TokenMatrix>, TrainError> {
            let i = groups
                .iter()
                .position(|(h, _)| *h == g)
                .ok_or_else(|| TrainError::Checkpoint(format!("missing group {g}")))?;
            Ok(groups.remove(i).1)
        };
        let single = |mut v: Vec<TokenMatrix>, g: ParamGroup| -> Result<TokenMatrix, TrainError> {
            if v.len() != 1 {
                return Err(TrainError::Checkpoint(format!("group {g} should hold one matrix")));
            }
            Ok(v.remove(0))
        };
        let backbone = single(take(ParamGroup::Backbone)?, ParamGroup::Backbone)?;
        let cell_qformer = resampler_from(take(ParamGroup::CellQFormer)?)?;
        let text_projection = single(take(ParamGroup::TextProjection)?, ParamGroup::TextProjection)?;
        let patch_resampler = resampler_from(take(ParamGroup::PatchResampler)?)?;
        let shared_map = single(take(ParamGroup::SharedMap)?, ParamGroup::SharedMap)?;
        Ok(Self {
            backbone,
            cell_qformer,
            text_projection,
            patch_resampler,
            shared_map,
        })
    }
}

fn resampler_from(mut v: Vec<TokenMatrix>) -> Result<ResamplerParams, TrainError> {
    if v.is_empty() || !(v.len() - 1).is_multiple_of(4) {
        return Err(TrainError::Checkpoint(format!("resampler group has {} matrices", v.len())));
    }
    let rest = v.split_off(1);
    let latents = v.remove(0);
    let layers = rest
        .chunks(4)
        .map(|c| AttentionWeights {
            wq: c[0].clone(),
            wk: c[1].clone(),
            wv: c[2].clone(),
            wo: c[3].clone(),
        })
        .collect();
    Ok(ResamplerParams::new(latents, layers)?)
}

/// One patch: backbone tokens plus the cell tokens of the cells inside it.
/// Patches without cells carry `None` and are skipped by the alignment loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub patch_inputs: TokenMatrix,
    pub cell_tokens: Option<TokenMatrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub samples: Vec<PatchSample>,
    pub tokens: usize,
    pub dim: usize,
}

impl PairedDataset {
    /// Samples that contain at least one cell.
    pub fn aligned(&self) -> impl Iterator<Item = (&TokenMatrix, &TokenMatrix)> {
        self.samples
            .iter()
            .filter_map(|s| s.cell_tokens.as_ref().map(|c| (&s.patch_inputs, c)))
    }
}

/// Share of the uniform mixture in each synthetic patch.
const PATCH_BLUR: f64 = 0.2;
/// Per-pair spread of cell tokens around their slot atom.
const CELL_JITTER: f64 = 0.35;

/// Synthetic patch/cell token pairs.
///
/// Cell token `i` of every pair is the slot-`i` dictionary atom plus jitter.
/// Patch inputs are `((1-a)·P + a·J/N)·C + noise·E` for a random permutation
/// `P` and the all-ones `J`. The mixing matrix is doubly stochastic, so at
/// noise 0 the patch mean equals the cell mean and `L_global = 0` is reachable.
pub fn synth_paired_tokens(n_pairs: usize, tokens: usize, dim: usize, noise: f64, seed: u64) -> PairedDataset {
    let mut rng = seed::scoped_rng(seed, "paired-tokens");
    let atoms = TokenMatrix::random_normal(tokens, dim, 1.0, &mut rng);
    let mut samples = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let mut cells = atoms.clone();
        cells.axpy(1.0, &TokenMatrix::random_normal(tokens, dim, CELL_JITTER, &mut rng));
        let mut perm: Vec<usize> = (0..tokens).collect();
        perm.shuffle(&mut rng);
        let mean = cells.mean_row();
        let mut patch = cells.permute_rows(&perm);
        patch.scale(1.0 - PATCH_BLUR);
        for i in 0..tokens {
            for (v, m) in patch.row_mut(i).iter_mut().zip(&mean) {
                *v += PATCH_BLUR * m;
            }
        }
        if noise > 0.0 {
            patch.axpy(noise, &TokenMatrix::random_normal(tokens, dim, 1.0, &mut rng));
        }
        samples.push(PatchSample {
            patch_inputs: patch,
            cell_tokens: Some(cells),
        });
    }
    PairedDataset { samples, tokens, dim }
}

/// Appends `count` cell-free patches drawn like ordinary patch inputs.
pub fn add_cell_free_patches(data: &mut PairedDataset, count: usize, seed: u64) {
    let mut rng = seed::scoped_rng(seed, "cell-free");
    for _ in 0..count {
        data.samples.push(PatchSample {
            patch_inputs: TokenMatrix::random_normal(data.tokens, data.dim, 1.0, &mut rng),
            cell_tokens: None,
        });
    }
}

/// Synthetic caption data for phase 1: images of `classes` kinds, each a set
/// of prototype tokens plus noise, and one text embedding per class.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionDataset {
    pub images: Vec<(usize, TokenMatrix)>,
    pub texts: TokenMatrix,
}

pub fn synth_captions(classes: usize, per_class: usize, tokens: usize, dim: usize, noise: f64, seed: u64) -> CaptionDataset {
    let mut rng = seed::scoped_rng(seed, "captions");
    let protos: Vec<TokenMatrix> = (0..classes)
        .map(|_| TokenMatrix::random_normal(tokens, dim, 1.0, &mut rng))
        .collect();
    let texts = TokenMatrix::random_normal(classes, dim, 1.0, &mut rng);
    let mut images = Vec::with_capacity(classes * per_class);
    for (c, p) in protos.iter().enumerate() {
        for _ in 0..per_class {
            let mut img = p.clone();
            img.axpy(noise, &TokenMatrix::random_normal(tokens, dim, 1.0, &mut rng));
            images.push((c, img));
        }
    }
    CaptionDataset { images, texts }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    ReprLearning,
    CellPatchAlign,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub lambda_local: f64,
    pub temperature: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            lambda_local: DEFAULT_LAMBDA_LOCAL,
            temperature: DEFAULT_ITC_TEMPERATURE,
        }
    }
}

/// Where a phase draws its batches from. Data is regenerated from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    SynthPaired {
        pairs: usize,
        tokens: usize,
        dim: usize,
        noise: f64,
        cell_free: usize,
    },
    SynthCaptions {
        classes: usize,
        per_class: usize,
        tokens: usize,
        dim: usize,
        noise: f64,
    },
}

impl DataSource {
    pub fn paired(&self, seed: u64) -> Option<PairedDataset> {
        match *self {
            DataSource::SynthPaired {
                pairs,
                tokens,
                dim,
                noise,
                cell_free,
            } => {
                let mut d = synth_paired_tokens(pairs, tokens, dim, noise, seed::derive_seed(seed, "data"));
                add_cell_free_patches(&mut d, cell_free, seed::derive_seed(seed, "data"));
                Some(d)
            }
            DataSource::SynthCaptions { .. } => None,
        }
    }

    pub fn captions(&self, seed: u64) -> Option<CaptionDataset> {
        match *self {
            DataSource::SynthCaptions {
                classes,
                per_class,
                tokens,
                dim,
                noise,
            } => Some(synth_captions(classes, per_class, tokens, dim, noise, seed::derive_seed(seed, "data"))),
            DataSource::SynthPaired { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhasePlan {
    pub phase: Phase,
    pub frozen: BTreeSet<ParamGroup>,
    pub trainable: BTreeSet<ParamGroup>,
    pub loss: LossSpec,
    pub data: DataSource,
    pub align_enabled: bool,
    pub batch_size: usize,
}

impl PhasePlan {
    /// Phase 1: train the cell resampler and text projection, backbone frozen.
    pub fn repr_learning(data: DataSource) -> Self {
        Self {
            phase: Phase::ReprLearning,
            frozen: [ParamGroup::Backbone].into(),
            trainable: [ParamGroup::CellQFormer, ParamGroup::TextProjection].into(),
            loss: LossSpec::default(),
            data,
            align_enabled: true,
            batch_size: 8,
        }
    }

    /// Phase 2: train the patch resampler and shared map; everything from phase 1 frozen.
    pub fn cell_patch_align(data: DataSource) -> Self {
        Self {
            phase: Phase::CellPatchAlign,
            frozen: [ParamGroup::Backbone, ParamGroup::CellQFormer, ParamGroup::TextProjection].into(),
            trainable: [ParamGroup::PatchResampler, ParamGroup::SharedMap].into(),
            loss: LossSpec::default(),
            data,
            align_enabled: true,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }

    pub fn without_alignment(mut self) -> Self {
        self.align_enabled = false;
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if let Some(g) = self.frozen.intersection(&self.trainable).next() {
            return Err(TrainError::Plan(format!("group {g} is both frozen and trainable")));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Plan("batch size must be positive".into()));
        }
        let allowed: &[ParamGroup] = match self.phase {
            Phase::ReprLearning => &[ParamGroup::CellQFormer, ParamGroup::TextProjection],
            Phase::CellPatchAlign => &[ParamGroup::PatchResampler, ParamGroup::SharedMap],
        };
        if let Some(g) = self.trainable.iter().find(|g| !allowed.contains(g)) {
            return Err(TrainError::Plan(format!("group {g} has no gradient in {:?}", self.phase)));
        }
        let data_ok = matches!(
            (self.phase, self.data),
            (Phase::ReprLearning, DataSource::SynthCaptions { .. }) | (Phase::CellPatchAlign, DataSource::SynthPaired { .. })
        );
        if !data_ok {
            return Err(TrainError::Plan(format!("data source does not fit {:?}", self.phase)));
        }
        if self.loss.temperature <= 0.0 {
            return Err(TrainError::Plan("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// One trace row. Loss fields are `None` when the loss was not computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss_global: Option<f64>,
    pub loss_local: Option<f64>,
    pub loss_total: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
    /// Set for runs with alignment disabled.
    pub ablation: bool,
    /// Patches dropped for having no cells.
    pub skipped_cell_free: usize,
}

impl TrainingTrace {
    /// CSV with columns `step,lr,loss_global,loss_local,loss_total`; missing losses are empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        writeln!(w, "step,lr,loss_global,loss_local,loss_total")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{:?},{},{},{}",
                r.step,
                r.lr,
                opt(r.loss_global),
                opt(r.loss_local),
                opt(r.loss_total)
            )?;
        }
        Ok(())
    }

    pub fn first_total(&self) -> Option<f64> {
        self.rows.first().and_then(|r| r.loss_total)
    }

    pub fn last_total(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.loss_total)
    }
}

/// Alignment losses of one pair and their gradients for the trainable groups.
struct PairGrads {
    global: f64,
    local: f64,
    resampler: ResamplerParams,
    map: TokenMatrix,
}

fn pair_step(state: &ModelState, patch: &TokenMatrix, cells: &TokenMatrix, lambda: f64) -> Result<PairGrads, TrainError> {
    let trace = resample_traced(&state.patch_resampler, patch)?;
    let mapped = cells.matmul(&state.shared_map);
    let g = loss_global(&trace.output, &mapped)?;
    let l = loss_local(&trace.output, &mapped)?;
    let mut grad_p = g.grad_a;
    grad_p.axpy(lambda, &l.grad_a);
    let mut grad_c = g.grad_b;
    grad_c.axpy(lambda, &l.grad_b);
    let (resampler, _) = trace.backward(&state.patch_resampler, &grad_p);
    Ok(PairGrads {
        global: g.value,
        local: l.value,
        resampler,
        map: cells.t_matmul(&grad_c),
    })
}

/// Mean alignment losses over all pairs with cells: `(global, local, total)`.
pub fn alignment_losses(state: &ModelState, data: &PairedDataset, lambda: f64) -> Result<(f64, f64, f64), TrainError> {
    let (mut g, mut l, mut n) = (0.0, 0.0, 0usize);
    for (patch, cells) in data.aligned() {
        let vp = resample(&state.patch_resampler, patch)?;
        let vc = cells.matmul(&state.shared_map);
        g += loss_global(&vp, &vc)?.value;
        l += loss_local(&vp, &vc)?.value;
        n += 1;
    }
    if n == 0 {
        return Err(TrainError::NoSamples);
    }
    let (g, l) = (g / n as f64, l / n as f64);
    Ok((g, l, g + lambda * l))
}

/// Share of patch tokens whose highest dot-product cell token is their own pair slot.
pub fn retrieval_accuracy(state: &ModelState, data: &PairedDataset) -> Result<f64, TrainError> {
    let (mut hits, mut total) = (0usize, 0usize);
    for (patch, cells) in data.aligned() {
        let vp = resample(&state.patch_resampler, patch)?;
        let logits = vp.matmul_t(&cells.matmul(&state.shared_map));
        for i in 0..logits.rows() {
            let row = logits.row(i);
            let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
            hits += usize::from(best == i);
            total += 1;
        }
    }
    if total == 0 {
        return Err(TrainError::NoSamples);
    }
    Ok(hits as f64 / total as f64)
}

/// Draws mini-batches by walking seeded permutations of the sample indices.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = seed::scoped_rng(seed, "batches");
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.pos + size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        out
    }
}

fn snapshot(state: &ModelState, groups: impl IntoIterator<Item = ParamGroup>) -> Vec<(ParamGroup, Vec<f64>)> {
    groups.into_iter().map(|g| (g, state.group_values(g))).collect()
}

fn check_frozen(state: &ModelState, before: &[(ParamGroup, Vec<f64>)]) -> Result<(), TrainError> {
    for (g, vals) in before {
        let now = state.group_values(*g);
        if now.len() != vals.len() || now.iter().zip(vals).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(TrainError::FrozenMutated(*g));
        }
    }
    Ok(())
}

/// Runs one phase for `schedule.total_steps` updates and returns the trace.
///
/// Only groups listed as trainable are updated. Every other group is checked
/// bit-for-bit at the end.
pub fn run_phase(plan: &PhasePlan, state: &mut ModelState, schedule: &Schedule, seed: u64) -> Result<TrainingTrace, TrainError> {
    plan.validate()?;
    schedule.validate()?;
    let untouched: Vec<ParamGroup> = ParamGroup::ALL
        .into_iter()
        .filter(|g| !plan.trainable.contains(g))
        .collect();
    let before = snapshot(state, untouched);
    let trace = match plan.phase {
        Phase::CellPatchAlign => run_alignment(plan, state, schedule, seed)?,
        Phase::ReprLearning => run_repr(plan, state, schedule, seed)?,
    };
    check_frozen(state, &before)?;
    Ok(trace)
}

fn run_alignment(plan: &PhasePlan, state: &mut ModelState, schedule: &Schedule, seed: u64) -> Result<TrainingTrace, TrainError> {
    let data = plan.data.paired(seed).expect("validated data source");
    if data.dim != state.dim() {
        return Err(TrainError::Plan(format!("data dim {} but model dim {}", data.dim, state.dim())));
    }
    let pairs: Vec<(&TokenMatrix, &TokenMatrix)> = data.aligned().collect();
    let mut trace = TrainingTrace {
        ablation: !plan.align_enabled,
        skipped_cell_free: data.samples.len() - pairs.len(),
        ..Default::default()
    };
    if pairs.is_empty() {
        return Err(TrainError::NoSamples);
    }
    let train_resampler = plan.trainable.contains(&ParamGroup::PatchResampler);
    let train_map = plan.trainable.contains(&ParamGroup::SharedMap);
    let lambda = plan.loss.lambda_local;
    let mut sampler = BatchSampler::new(pairs.len(), seed);

    for step in 0..schedule.total_steps {
        let lr = lr_at(schedule, step)?;
        let batch = sampler.next(plan.batch_size);
        if !plan.align_enabled {
            // forward pass only; the ablation has no alignment signal to follow
            for &i in &batch {
                resample(&state.patch_resampler, pairs[i].0)?;
            }
            trace.rows.push(TraceRow {
                step,
                lr,
                loss_global: None,
                loss_local: None,
                loss_total: None,
            });
            continue;
        }
        let mut g_res = state.patch_resampler.zeros_like();
        let mut g_map = TokenMatrix::zeros(state.dim(), state.dim());
        let (mut lg, mut ll) = (0.0, 0.0);
        for &i in &batch {
            let pg = pair_step(state, pairs[i].0, pairs[i].1, lambda)?;
            lg += pg.global;
            ll += pg.local;
            g_res.axpy(1.0, &pg.resampler);
            g_map.add_assign(&pg.map);
        }
        let n = batch.len() as f64;
        let (lg, ll) = (lg / n, ll / n);
        let total = lg + lambda * ll;
        trace.rows.push(TraceRow {
            step,
            lr,
            loss_global: Some(lg),
            loss_local: Some(ll),
            loss_total: Some(total),
        });
        if !total.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                trace: Box::new(trace),
            });
        }
        if train_resampler {
            state.patch_resampler.axpy(-lr / n, &g_res);
        }
        if train_map {
            state.shared_map.axpy(-lr / n, &g_map);
        }
    }
    Ok(trace)
}

/// Pooled image vector: mean of the cell resampler's output over backbone features.
fn encode_image(state: &ModelState, img: &TokenMatrix) -> Result<Vec<f64>, TrainError> {
    let out = resample(&state.cell_qformer, &img.matmul(&state.backbone))?;
    Ok(out.mean_row())
}

/// Image-to-text top-1 accuracy of phase-1 embeddings over every image.
pub fn caption_accuracy(state: &ModelState, data: &CaptionDataset) -> Result<f64, TrainError> {
    let text = data.texts.matmul(&state.text_projection);
    let mut hits = 0usize;
    for (c, img) in &data.images {
        let v = encode_image(state, img)?;
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let score = |k: usize| {
            let t = text.row(k);
            let nt = t.iter().map(|x| x * x).sum::<f64>().sqrt();
            crate::align::dot(&v, t) / (nv * nt)
        };
        let best = (0..text.rows()).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap_or(0);
        hits += usize::from(best == *c);
    }
    Ok(hits as f64 / data.images.len().max(1) as f64)
}

fn run_repr(plan: &PhasePlan, state: &mut ModelState, schedule: &Schedule, seed: u64) -> Result<TrainingTrace, TrainError> {
    let data = plan.data.captions(seed).expect("validated data source");
    let classes = data.texts.rows();
    let d = state.dim();
    let mut rng = seed::scoped_rng(seed, "caption-batches");
    let mut trace = TrainingTrace::default();
    let bsz = plan.batch_size.min(classes);
    let train_q = plan.trainable.contains(&ParamGroup::CellQFormer);
    let train_t = plan.trainable.contains(&ParamGroup::TextProjection);

    // index images by class so a batch never holds two images of one class
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, (c, _)) in data.images.iter().enumerate() {
        by_class[*c].push(i);
    }
    if by_class.iter().any(Vec::is_empty) {
        return Err(TrainError::NoSamples);
    }

    for step in 0..schedule.total_steps {
        let lr = lr_at(schedule, step)?;
        let mut cls: Vec<usize> = (0..classes).collect();
        cls.shuffle(&mut rng);
        cls.truncate(bsz);
        let picks: Vec<usize> = cls
            .iter()
            .map(|&c| by_class[c][rng.random_range(0..by_class[c].len())])
            .collect();

        let mut traces = Vec::with_capacity(bsz);
        let mut pooled = TokenMatrix::zeros(bsz, d);
        for (b, &i) in picks.iter().enumerate() {
            let t = resample_traced(&state.cell_qformer, &data.images[i].1.matmul(&state.backbone))?;
            pooled.row_mut(b).copy_from_slice(&t.output.mean_row());
            traces.push(t);
        }
        let raw_text = data.texts.permute_rows(&cls);
        let text = raw_text.matmul(&state.text_projection);
        let loss = loss_itc(&pooled, &text, plan.loss.temperature)?;
        trace.rows.push(TraceRow {
            step,
            lr,
            loss_global: None,
            loss_local: None,
            loss_total: Some(loss.value),
        });
        if !loss.value.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                trace: Box::new(trace),
            });
        }
        if train_q {
            let mut g_q = state.cell_qformer.zeros_like();
            for (b, t) in traces.iter().enumerate() {
                let n = t.output.rows();
                let mut grad_out = TokenMatrix::zeros(n, d);
                for r in 0..n {
                    for (o, g) in grad_out.row_mut(r).iter_mut().zip(loss.grad_a.row(b)) {
                        *o = g / n as f64;
                    }
                }
                g_q.axpy(1.0, &t.backward(&state.cell_qformer, &grad_out).0);
            }
            state.cell_qformer.axpy(-lr, &g_q);
        }
        if train_t {
            state.text_projection.axpy(-lr, &raw_text.t_matmul(&loss.grad_b));
        }
    }
    Ok(trace)
}

/// Callback for phases that need an external model (instruction tuning).
///
/// `step` receives the model, the step index, and the learning rate, may
/// update trainable groups, and returns the step loss.
pub trait PhaseHook {
    fn name(&self) -> &str;
    fn step(&mut self, state: &mut ModelState, step: usize, lr: f64) -> Result<f64, String>;
}

/// Drives a hook under a schedule, enforcing that `frozen` groups stay untouched.
pub fn run_hook_phase(
    hook: &mut dyn PhaseHook,
    frozen: &BTreeSet<ParamGroup>,
    state: &mut ModelState,
    schedule: &Schedule,
) -> Result<TrainingTrace, TrainError> {
    schedule.validate()?;
    let before = snapshot(state, frozen.iter().copied());
    let mut trace = TrainingTrace::default();
    for step in 0..schedule.total_steps {
        let lr = lr_at(schedule, step)?;
        let loss = hook.step(state, step, lr).map_err(|message| TrainError::Hook {
            name: hook.name().to_string(),
            step,
            message,
        })?;
        trace.rows.push(TraceRow {
            step,
            lr,
            loss_global: None,
            loss_local: None,
            loss_total: Some(loss),
        });
        check_frozen(state, &before)?;
    }
    Ok(trace)
}

/// Parameters with which `L_global` vanishes on noise-free synthetic pairs:
/// zero latents, zero queries (uniform attention), identity values and output,
/// identity shared map.
pub fn mean_matching_state(state: &ModelState) -> ModelState {
    let d = state.dim();
    let n = state.patch_resampler.n_latents();
    let layer = AttentionWeights {
        wq: TokenMatrix::zeros(d, d),
        wk: TokenMatrix::identity(d),
        wv: TokenMatrix::identity(d),
        wo: TokenMatrix::identity(d),
    };
    let mut out = state.clone();
    out.patch_resampler = ResamplerParams::new(TokenMatrix::zeros(n, d), vec![layer]).expect("square weights");
    out.shared_map = TokenMatrix::identity(d);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_plan() -> PhasePlan {
        let mut p = PhasePlan::cell_patch_align(DataSource::SynthPaired {
            pairs: 32,
            tokens: 4,
            dim: 8,
            noise: 0.0,
            cell_free: 3,
        });
        p.batch_size = 8;
        p
    }

    #[test]
    fn schedule_points() {
        let s = Schedule::new(500);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(50).unwrap(), 5e-5);
        assert_eq!(s.lr_at(500).unwrap(), 0.0);
        assert!(matches!(s.lr_at(501), Err(TrainError::StepOutOfRange { .. })));
        for k in 1..50 {
            assert!(s.lr_at(k).unwrap() > s.lr_at(k - 1).unwrap());
        }
        let mut bad = s;
        bad.warmup_frac = 1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mean_matching_zeroes_global_loss() {
        let data = synth_paired_tokens(16, 4, 8, 0.0, 3);
        let state = mean_matching_state(&ModelState::new(8, 4, 1));
        for (patch, cells) in data.aligned() {
            let vp = resample(&state.patch_resampler, patch).unwrap();
            assert!(loss_global(&vp, cells).unwrap().value < 1e-12);
        }
    }

    #[test]
    fn phase_two_descends_and_keeps_frozen_groups() {
        let plan = small_plan();
        let mut state = ModelState::new(8, 4, 2);
        let frozen_before = state.group_values(ParamGroup::CellQFormer);
        let sched = Schedule::new(120).with_base_lr(TOY_BASE_LR);
        let trace = run_phase(&plan, &mut state, &sched, 5).unwrap();
        assert_eq!(trace.skipped_cell_free, 3);
        assert!(trace.last_total().unwrap() < trace.first_total().unwrap());
        assert_eq!(state.group_values(ParamGroup::CellQFormer), frozen_before);

        let mut again = ModelState::new(8, 4, 2);
        assert_eq!(run_phase(&plan, &mut again, &sched, 5).unwrap(), trace);
        assert_eq!(again, state);
    }

    #[test]
    fn ablation_records_no_losses_and_changes_nothing() {
        let plan = small_plan().without_alignment();
        let mut state = ModelState::new(8, 4, 2);
        let init = state.clone();
        let trace = run_phase(&plan, &mut state, &Schedule::new(10), 5).unwrap();
        assert!(trace.ablation);
        assert_eq!(trace.rows.len(), 10);
        assert!(trace.rows.iter().all(|r| r.loss_total.is_none() && r.loss_global.is_none()));
        assert_eq!(state, init);
        let mut csv = Vec::new();
        trace.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().lines().nth(1).unwrap().ends_with(",,,"));
    }

    #[test]
    fn plan_validation() {
        let mut p = small_plan();
        p.frozen.insert(ParamGroup::SharedMap);
        assert!(matches!(p.validate(), Err(TrainError::Plan(_))));
        let mut p = small_plan();
        p.trainable.insert(ParamGroup::Backbone);
        assert!(p.validate().is_err());
    }

    #[test]
    fn phase_one_improves_caption_retrieval() {
        let data = DataSource::SynthCaptions {
            classes: 8,
            per_class: 4,
            tokens: 6,
            dim: 8,
            noise: 0.3,
        };
        let plan = PhasePlan::repr_learning(data);
        let mut state = ModelState::new(8, 4, 9);
        let trace = run_phase(&plan, &mut state, &Schedule::new(300).with_base_lr(TOY_BASE_LR), 4).unwrap();
        let head: f64 = trace.rows[..20].iter().filter_map(|r| r.loss_total).sum::<f64>() / 20.0;
        let tail: f64 = trace.rows[280..].iter().filter_map(|r| r.loss_total).sum::<f64>() / 20.0;
        assert!(tail < head, "{head} -> {tail}");
        assert!(caption_accuracy(&state, &data.captions(4).unwrap()).unwrap() > 0.5);
    }

    #[test]
    fn hooks_cannot_touch_frozen_groups() {
        struct Rogue;
        impl PhaseHook for Rogue {
            fn name(&self) -> &str {
                "rogue"
            }
            fn step(&mut self, state: &mut ModelState, _: usize, _: f64) -> Result<f64, String> {
                state.backbone.scale(2.0);
                Ok(1.0)
            }
        }
        struct Tame;
        impl PhaseHook for Tame {
            fn name(&self) -> &str {
                "tame"
            }
            fn step(&mut self, state: &mut ModelState, _: usize, lr: f64) -> Result<f64, String> {
                state.shared_map.scale(1.0 - lr);
                Ok(0.5)
            }
        }
        let frozen: BTreeSet<_> = [ParamGroup::Backbone].into();
        let mut state = ModelState::new(4, 2, 0);
        assert!(matches!(
            run_hook_phase(&mut Rogue, &frozen, &mut state, &Schedule::new(3)),
            Err(TrainError::FrozenMutated(ParamGroup::Backbone))
        ));
        let mut state = ModelState::new(4, 2, 0);
        assert_eq!(run_hook_phase(&mut Tame, &frozen, &mut state, &Schedule::new(3)).unwrap().rows.len(), 3);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let state = ModelState::new(4, 3, 11);
        let mut buf = Vec::new();
        state.write_checkpoint(&mut buf).unwrap();
        let back = ModelState::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, state);
    }
}
