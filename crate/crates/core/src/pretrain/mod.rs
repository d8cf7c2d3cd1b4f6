//! Two-stage spectro-temporal pretraining: masked reconstruction (MSTP)
//! followed by autoregressive next-patch prediction (ASTP).

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::backbone::{forward, heads, Checkpoint, ForwardOptions, HeadOut, Lblm, ModelConfig, Stage, TokenBatch};
use crate::diffcore::{optimizer_step, Graph, OptimState, ParamStore, Tensor, TrainHyper, Var};
use crate::error::{LblmError, Result};
use crate::signal::{fft_components_with, revin_apply, revin_normalize, TrialSegment, REVIN_EPS};


/// Context/target pairs of one second at 250 Hz.
pub const HORIZON_LADDER: [(usize, usize); 5] = [(204, 46), (180, 70), (156, 94), (132, 118), (114, 136)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainStage {
    Mstp,
    Astp,
}

impl PretrainStage {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mstp" => Ok(PretrainStage::Mstp),
            "astp" => Ok(PretrainStage::Astp),
            other => Err(LblmError::config(format!("unknown stage `{other}`"))),
        }
    }

    pub fn checkpoint_stage(self) -> Stage {
        match self {
            PretrainStage::Mstp => Stage::Mstp,
            PretrainStage::Astp => Stage::Astp,
        }
    }

    pub fn name(self) -> &'static str {
        self.checkpoint_stage().name()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.1,
            lambda2: 0.1,
            delta: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub stage: PretrainStage,
    pub epochs: usize,
    pub batch: usize,
    pub weights: LossWeights,
    pub mask_ratio: f64,
    pub windows: Vec<(usize, usize)>,
    pub hyper: TrainHyper,
    pub seed: u64,
    /// Allows ASTP without an MSTP ancestor.
    pub allow_stage_override: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            stage: PretrainStage::Mstp,
            epochs: 10,
            batch: 32,
            weights: LossWeights::default(),
            mask_ratio: 0.1,
            windows: HORIZON_LADDER.to_vec(),
            hyper: TrainHyper::default(),
            seed: 0,
            allow_stage_override: false,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if !(w.lambda1 >= 0.0 && w.lambda2 >= 0.0) {
            return Err(LblmError::config("lambda1 and lambda2 must be non-negative"));
        }
        if !(w.delta > 0.0) {
            return Err(LblmError::config("Huber delta must be positive"));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(LblmError::config("mask ratio must lie in (0, 1)"));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(LblmError::config("epochs and batch must be positive"));
        }
        if self.stage == PretrainStage::Astp && self.windows.is_empty() {
            return Err(LblmError::config("ASTP needs at least one window row"));
        }
        let mut h = self.hyper.clone();
        h.total_steps = h.total_steps.max(1);
        h.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub n: usize,
    pub indices: Vec<usize>,
}

/// `max(1, round(r * n))` distinct sorted positions.
pub fn sample_mask<R: Rng>(n: usize, r: f64, rng: &mut R) -> Result<MaskPlan> {
    if !(r > 0.0 && r < 1.0) {
        return Err(LblmError::config(format!("mask ratio {r} outside (0, 1)")));
    }
    if n == 0 {
        return Err(LblmError::config("cannot mask an empty sequence"));
    }
    let k = ((r * n as f64).round() as usize).clamp(1, n);
    let mut indices = rand::seq::index::sample(rng, n, k).into_vec();
    indices.sort_unstable();
    Ok(MaskPlan { n, indices })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowPlan {
    pub context_len: usize,
    pub target_len: usize,
    pub offset: usize,
}

impl WindowPlan {
    pub fn len(&self) -> usize {
        self.context_len + self.target_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Picks a table row uniformly, then an offset uniform over every feasible
/// start.
pub fn sample_window<R: Rng>(segment_len: usize, table: &[(usize, usize)], rng: &mut R) -> Result<WindowPlan> {
    if table.is_empty() {
        return Err(LblmError::config("empty window table"));
    }
    if let Some((c, t)) = table.iter().find(|(c, t)| c + t > segment_len) {
        return Err(LblmError::config(format!(
            "window ({c}, {t}) does not fit a segment of {segment_len} samples"
        )));
    }
    let (context_len, target_len) = table[rng.gen_range(0..table.len())];
    let offset = rng.gen_range(0..=segment_len - context_len - target_len);
    Ok(WindowPlan {
        context_len,
        target_len,
        offset,
    })
}

/// Wave, amplitude and phase targets for every patch row.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub wave: Tensor,
    pub amp: Tensor,
    pub phase: Tensor,
}

impl Targets {
    pub fn from_patches(patches: &Tensor) -> Targets {
        let mut planner = FftPlanner::new();
        let k = crate::signal::num_freq_bins(patches.cols);
        let mut amp = Tensor::zeros(patches.rows, k);
        let mut phase = Tensor::zeros(patches.rows, k);
        for r in 0..patches.rows {
            let st = fft_components_with(&mut planner, patches.row(r));
            amp.row_mut(r).copy_from_slice(&st.amplitude);
            phase.row_mut(r).copy_from_slice(&st.phase);
        }
        Targets {
            wave: patches.clone(),
            amp,
            phase,
        }
    }

    /// Row `i` takes the targets of row `i + 1` within each sequence of `n`
    /// rows; the last row of each sequence is left at zero.
    pub fn shifted(&self, n: usize) -> Targets {
        let shift = |t: &Tensor| {
            let mut out = Tensor::zeros(t.rows, t.cols);
            for s in 0..t.rows / n {
                for i in 0..n - 1 {
                    out.row_mut(s * n + i).copy_from_slice(t.row(s * n + i + 1));
                }
            }
            out
        };
        Targets {
            wave: shift(&self.wave),
            amp: shift(&self.amp),
            phase: shift(&self.phase),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub wave: Var,
    pub amp: Var,
    pub phase: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub wave: f64,
    pub amp: f64,
    pub phase: f64,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            total: g.value(self.total).item(),
            wave: g.value(self.wave).item(),
            amp: g.value(self.amp).item(),
            phase: g.value(self.phase).item(),
        }
    }
}

/// Huber terms over the selected rows, combined as
/// `wave + lambda1 * amp + lambda2 * phase`.
pub fn spectro_loss(g: &mut Graph, pred: HeadOut, targets: &Targets, rows: Vec<usize>, w: &LossWeights) -> LossVars {
    let wave = g.huber_rows(pred.wave, targets.wave.clone(), rows.clone(), w.delta);
    let amp = g.huber_rows(pred.amp, targets.amp.clone(), rows.clone(), w.delta);
    let phase = g.huber_rows(pred.phase, targets.phase.clone(), rows, w.delta);
    let a = g.scale(amp, w.lambda1);
    let p = g.scale(phase, w.lambda2);
    let total = g.add(wave, a);
    let total = g.add(total, p);
    LossVars { total, wave, amp, phase }
}

/// Masked reconstruction loss. `masks` holds one plan per sequence
/// (segment-channel pair) of the batch.
pub fn mstp_loss(
    g: &mut Graph,
    cfg: &ModelConfig,
    store: &ParamStore,
    batch: &TokenBatch,
    masks: &[MaskPlan],
    w: &LossWeights,
) -> Result<LossVars> {
    let n = batch.n();
    if masks.len() != batch.layout.nseq {
        return Err(LblmError::shape(format!(
            "{} mask plans for {} sequences",
            masks.len(),
            batch.layout.nseq
        )));
    }
    let mut flags = vec![false; batch.rows()];
    let mut rows = Vec::new();
    for (s, m) in masks.iter().enumerate() {
        if m.indices.is_empty() {
            return Err(LblmError::config("empty mask"));
        }
        if m.n != n {
            return Err(LblmError::shape("mask plan built for another token count"));
        }
        for &i in &m.indices {
            flags[s * n + i] = true;
            rows.push(s * n + i);
        }
    }
    let targets = Targets::from_patches(&batch.patches);
    let opts = ForwardOptions {
        causal: false,
        mask: Some(flags),
        gate_override: None,
    };
    let tr = forward(g, cfg, store, batch, &opts)?;
    let h = heads(g, store, tr.features);
    Ok(spectro_loss(g, h, &targets, rows, w))
}

/// Token positions `i` whose successor patch reaches past the context and
/// still exists in the window.
pub fn astp_positions(n_window: usize, context_len: usize, patch_len: usize, stride: usize) -> Vec<usize> {
    (0..n_window.saturating_sub(1))
        .filter(|&i| (i + 1) * stride + patch_len > context_len)
        .collect()
}

/// Teacher-forced next-patch loss under causal masking. The batch holds
/// patchified `context ++ target` windows; `context_lens[b]` is the context
/// length of segment `b`.
pub fn astp_loss(
    g: &mut Graph,
    cfg: &ModelConfig,
    store: &ParamStore,
    batch: &TokenBatch,
    context_lens: &[usize],
    w: &LossWeights,
) -> Result<LossVars> {
    if context_lens.len() != batch.nseg() {
        return Err(LblmError::shape("one context length per segment required"));
    }
    let n = batch.n();
    let window = (n - 1) * cfg.stride + cfg.patch_len;
    let mut rows = Vec::new();
    for (b, &ctx) in context_lens.iter().enumerate() {
        if ctx < cfg.patch_len {
            return Err(LblmError::InputTooShort {
                len: ctx,
                required: cfg.patch_len,
            });
        }
        if window < ctx + cfg.patch_len {
            return Err(LblmError::config(format!(
                "target of {} samples holds no complete patch",
                window.saturating_sub(ctx)
            )));
        }
        let pos = astp_positions(n, ctx, cfg.patch_len, cfg.stride);
        for c in 0..batch.channels {
            let s = b * batch.channels + c;
            rows.extend(pos.iter().map(|i| s * n + i));
        }
    }
    let targets = Targets::from_patches(&batch.patches).shifted(n);
    let opts = ForwardOptions {
        causal: true,
        ..Default::default()
    };
    let tr = forward(g, cfg, store, batch, &opts)?;
    let h = heads(g, store, tr.features);
    Ok(spectro_loss(g, h, &targets, rows, w))
}

/// ASTP window normalized by the statistics of its context part.
pub fn astp_window(segment: &[Vec<f64>], plan: &WindowPlan) -> Vec<Vec<f64>> {
    let ctx: Vec<Vec<f64>> = segment
        .iter()
        .map(|c| c[plan.offset..plan.offset + plan.context_len].to_vec())
        .collect();
    let (_, stats) = revin_normalize(&ctx, REVIN_EPS);
    let win: Vec<Vec<f64>> = segment
        .iter()
        .map(|c| c[plan.offset..plan.offset + plan.len()].to_vec())
        .collect();
    revin_apply(&win, &stats)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_wave: f64,
    pub loss_amp: f64,
    pub loss_phase: f64,
    pub wall_seconds: f64,
}

pub fn epoch_log_csv(rows: &[EpochLog]) -> String {
    let mut s = String::from("stage,epoch,lr,loss_total,loss_wave,loss_amp,loss_phase,wall_seconds\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.3}\n",
            r.stage, r.epoch, r.lr, r.loss_total, r.loss_wave, r.loss_amp, r.loss_phase, r.wall_seconds
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Last parameters whose loss was finite.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Set when training stopped on a non-finite loss.
    pub aborted: Option<String>,
}

/// One optimizer step's loss on a batch of segments, gradients accumulated
/// into `store`.
fn batch_step<R: Rng>(
    cfg: &PretrainConfig,
    model: &ModelConfig,
    store: &mut ParamStore,
    segments: &[&TrialSegment],
    rng: &mut R,
) -> Result<LossBreakdown> {
    let subjects: Vec<usize> = segments.iter().map(|s| s.subject_id as usize).collect();
    let mut g = Graph::new();
    let loss = match cfg.stage {
        PretrainStage::Mstp => {
            let norm: Vec<Vec<Vec<f64>>> = segments.iter().map(|s| revin_normalize(&s.data, REVIN_EPS).0).collect();
            let refs: Vec<&[Vec<f64>]> = norm.iter().map(|s| s.as_slice()).collect();
            let batch = TokenBatch::from_segments(&refs, &subjects, model.patch_len, model.stride, false)?;
            let masks = (0..batch.layout.nseq)
                .map(|_| sample_mask(batch.n(), cfg.mask_ratio, rng))
                .collect::<Result<Vec<_>>>()?;
            mstp_loss(&mut g, model, store, &batch, &masks, &cfg.weights)?
        }
        PretrainStage::Astp => {
            let mut wins = Vec::with_capacity(segments.len());
            let mut ctx = Vec::with_capacity(segments.len());
            // rows share one total length so the batch stacks
            let total = cfg.windows[0].0 + cfg.windows[0].1;
            let rows: Vec<(usize, usize)> = cfg.windows.iter().copied().filter(|(c, t)| c + t == total).collect();
            for s in segments {
                let plan = sample_window(s.len(), &rows, rng)?;
                wins.push(astp_window(&s.data, &plan));
                ctx.push(plan.context_len);
            }
            let refs: Vec<&[Vec<f64>]> = wins.iter().map(|s| s.as_slice()).collect();
            let batch = TokenBatch::from_segments(&refs, &subjects, model.patch_len, model.stride, false)?;
            astp_loss(&mut g, model, store, &batch, &ctx, &cfg.weights)?
        }
    };
    let vals = loss.values(&g);
    if !vals.total.is_finite() {
        return Err(LblmError::DegenerateFunction(format!("{} loss = {}", cfg.stage.name(), vals.total)));
    }
    let grads = g.backward(loss.total);
    g.accumulate_param_grads(&grads, store);
    Ok(vals)
}

/// Runs one pretraining stage. `init` supplies the starting parameters and,
/// for ASTP, the stage ancestry.
pub fn run_pretrain(
    cfg: &PretrainConfig,
    segments: &[TrialSegment],
    init: &Checkpoint,
    meta: serde_json::Value,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if segments.is_empty() {
        return Err(LblmError::config("pretraining corpus is empty"));
    }
    if cfg.stage == PretrainStage::Astp
        && !cfg.allow_stage_override
        && !matches!(init.stage, Stage::Mstp | Stage::Astp)
    {
        return Err(LblmError::StageOrder(format!(
            "ASTP needs an MSTP checkpoint as init, got stage `{}`",
            init.stage.name()
        )));
    }
    let model_cfg = init.model.clone();
    let mut store = init.params.clone();
    store.zero_grad();
    let batches_per_epoch = segments.len().div_ceil(cfg.batch);
    let mut hyper = cfg.hyper.clone();
    hyper.total_steps = cfg.epochs * batches_per_epoch;
    let mut state = OptimState::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..segments.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut aborted = None;
    let mut last_good = store.clone();
    let mut step = 0;
    let started = Instant::now();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossBreakdown::default();
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let segs: Vec<&TrialSegment> = chunk.iter().map(|&i| &segments[i]).collect();
            let vals = match batch_step(cfg, &model_cfg, &mut store, &segs, &mut rng) {
                Ok(v) => v,
                Err(e @ (LblmError::DegenerateFunction(_) | LblmError::PoisonedUpdate(_))) => {
                    aborted = Some(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            last_good = store.clone();
            let (l, _) = match optimizer_step(&mut store, &mut state, &hyper, step) {
                Ok(v) => v,
                Err(e @ LblmError::PoisonedUpdate(_)) => {
                    aborted = Some(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            lr = l;
            step += 1;
            let w = chunk.len() as f64 / segments.len() as f64;
            acc.total += w * vals.total;
            acc.wave += w * vals.wave;
            acc.amp += w * vals.amp;
            acc.phase += w * vals.phase;
        }
        log.push(EpochLog {
            stage: cfg.stage.name().to_string(),
            epoch,
            lr,
            loss_total: acc.total,
            loss_wave: acc.wave,
            loss_amp: acc.amp,
            loss_phase: acc.phase,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    let mut meta = meta;
    if let serde_json::Value::Object(m) = &mut meta {
        m.insert("ancestor".into(), init.hash()?.into());
        m.insert("ancestor_stage".into(), init.stage.name().into());
        m.insert("stage_override".into(), cfg.allow_stage_override.into());
        m.insert("seed".into(), cfg.seed.into());
        m.insert("steps".into(), step.into());
    }
    let (params, optim) = if aborted.is_some() {
        (last_good, None)
    } else {
        (store, Some(state))
    };
    let mut params = params;
    params.zero_grad();
    Ok(PretrainOutcome {
        checkpoint: Checkpoint {
            stage: cfg.stage.checkpoint_stage(),
            model: model_cfg,
            meta,
            params,
            optim,
        },
        log,
        aborted,
    })
}

/// Fresh checkpoint at stage `init`.
pub fn init_checkpoint(model: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    let m = Lblm::new(model.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(Checkpoint::from_model(Stage::Init, &m, serde_json::json!({ "seed": seed })))
}
