//! Classification heads on top of backbone features, finetuning with
//! held-out-session model selection, and accuracy reports.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{forward, Checkpoint, ForwardOptions, ModelConfig, Stage, TokenBatch};
use crate::diffcore::{optimizer_step, Graph, Init, OptimState, Padding, ParamId, ParamStore, SeqLayout, TrainHyper, Var};
use crate::error::{LblmError, Result};
use crate::signal::{group, revin_normalize, TrialSegment, NUM_GROUPS, NUM_WORDS, REVIN_EPS};

/// Prefix of every classifier parameter name.
pub const CLS_PREFIX: &str = "cls.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Linear,
    Convolutional,
    SpatioTemporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Word24,
    Semantic6,
}

impl Task {
    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "word24" => Ok(Task::Word24),
            "semantic6" => Ok(Task::Semantic6),
            other => Err(LblmError::config(format!("unknown task `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Word24 => "word24",
            Task::Semantic6 => "semantic6",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Task::Word24 => NUM_WORDS,
            Task::Semantic6 => NUM_GROUPS,
        }
    }

    pub fn label(self, seg: &TrialSegment) -> usize {
        match self {
            Task::Word24 => seg.word as usize,
            Task::Semantic6 => seg.semantic as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StClassifierConfig {
    pub classifier_kind: ClassifierKind,
    pub inception_kernels: Vec<usize>,
    pub spatial_out_channels: usize,
    /// Width of each inception branch.
    pub temporal_channels: usize,
    pub num_classes: usize,
}

impl Default for StClassifierConfig {
    fn default() -> Self {
        StClassifierConfig {
            classifier_kind: ClassifierKind::SpatioTemporal,
            inception_kernels: vec![1, 3, 5, 7],
            spatial_out_channels: 16,
            temporal_channels: 8,
            num_classes: NUM_WORDS,
        }
    }
}

const TEMPORAL_KERNEL: usize = 5;

impl StClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inception_kernels.is_empty() || self.inception_kernels.iter().any(|k| k % 2 == 0) {
            return Err(LblmError::config("inception kernels must be odd and non-empty"));
        }
        if ![NUM_GROUPS, NUM_WORDS].contains(&self.num_classes) {
            return Err(LblmError::config(format!(
                "num_classes must be {NUM_GROUPS} or {NUM_WORDS}, got {}",
                self.num_classes
            )));
        }
        if self.spatial_out_channels == 0 || self.temporal_channels == 0 {
            return Err(LblmError::config("classifier widths must be positive"));
        }
        Ok(())
    }

    fn inception_width(&self) -> usize {
        self.temporal_channels * self.inception_kernels.len()
    }
}

/// Fresh classifier parameters for `channels` input channels.
pub fn init_classifier<R: Rng>(
    cfg: &StClassifierConfig,
    model: &ModelConfig,
    channels: usize,
    rng: &mut R,
) -> Result<ParamStore> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    let d = model.d;
    let wide = channels * d;
    let k = cfg.num_classes;
    let lin = |s: &mut ParamStore, name: &str, i: usize, o: usize, r: &mut R| -> Result<()> {
        s.add(&format!("cls.{name}.w"), &[i, o], Init::Xavier { fan_in: i, fan_out: o }, r)?;
        s.add(&format!("cls.{name}.b"), &[1, o], Init::Zeros, r)?;
        Ok(())
    };
    match cfg.classifier_kind {
        ClassifierKind::Linear => lin(&mut s, "out", d, k, rng)?,
        ClassifierKind::Convolutional => {
            let h = cfg.spatial_out_channels;
            s.add(
                "cls.dw.w",
                &[TEMPORAL_KERNEL, wide],
                Init::Xavier {
                    fan_in: TEMPORAL_KERNEL,
                    fan_out: TEMPORAL_KERNEL,
                },
                rng,
            )?;
            s.add("cls.dw.b", &[1, wide], Init::Zeros, rng)?;
            lin(&mut s, "pw", wide, h, rng)?;
            lin(&mut s, "ff", h, h, rng)?;
            lin(&mut s, "out", h, k, rng)?;
        }
        ClassifierKind::SpatioTemporal => {
            let so = cfg.spatial_out_channels;
            let w = cfg.inception_width();
            lin(&mut s, "spatial", wide, so, rng)?;
            for &ks in &cfg.inception_kernels {
                lin(&mut s, &format!("inc{ks}"), ks * so, cfg.temporal_channels, rng)?;
            }
            lin(&mut s, "temp1", TEMPORAL_KERNEL * w, w, rng)?;
            lin(&mut s, "temp2", TEMPORAL_KERNEL * w, w, rng)?;
            lin(&mut s, "out", w, k, rng)?;
        }
    }
    Ok(s)
}

fn pv(g: &mut Graph, store: &ParamStore, name: &str) -> Result<Var> {
    let id = store
        .id(name)
        .ok_or_else(|| LblmError::config(format!("checkpoint lacks classifier parameter `{name}`")))?;
    Ok(g.param(store, id))
}

fn affine(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = pv(g, store, &format!("cls.{name}.w"))?;
    let b = pv(g, store, &format!("cls.{name}.b"))?;
    Ok(g.linear(x, w, b))
}

fn conv(g: &mut Graph, store: &ParamStore, name: &str, x: Var, layout: SeqLayout, k: usize) -> Result<Var> {
    let cols = g.im2col(x, layout, k, Padding::Same);
    affine(g, store, name, cols)
}

fn check_width(store: &ParamStore, name: &str, rows: usize, channels: usize) -> Result<()> {
    let p = store
        .by_name(name)
        .ok_or_else(|| LblmError::config(format!("checkpoint lacks classifier parameter `{name}`")))?;
    if p.shape[0] != rows {
        return Err(LblmError::shape(format!(
            "classifier expects input width {} but {channels} channels give {rows}",
            p.shape[0]
        )));
    }
    Ok(())
}

/// Logits `nseg x num_classes` from backbone features with rows ordered
/// `(segment, channel, token)`.
pub fn classifier_logits(
    g: &mut Graph,
    cfg: &StClassifierConfig,
    store: &ParamStore,
    features: Var,
    nseg: usize,
    channels: usize,
    n: usize,
) -> Result<Var> {
    let d = g.value(features).cols;
    let tokens = SeqLayout { nseq: nseg, n };
    match cfg.classifier_kind {
        ClassifierKind::Linear => {
            let pooled = g.mean_pool(features, SeqLayout { nseq: nseg, n: channels * n });
            affine(g, store, "out", pooled)
        }
        ClassifierKind::Convolutional => {
            check_width(store, "cls.pw.w", channels * d, channels)?;
            let x = g.group_channels(features, nseg, channels, n);
            let w = pv(g, store, "cls.dw.w")?;
            let b = pv(g, store, "cls.dw.b")?;
            let x = g.depthwise_conv(x, w, b, tokens, Padding::Same);
            let x = affine(g, store, "pw", x)?;
            let x = g.swish(x);
            let x = g.mean_pool(x, tokens);
            let x = affine(g, store, "ff", x)?;
            let x = g.swish(x);
            affine(g, store, "out", x)
        }
        ClassifierKind::SpatioTemporal => {
            check_width(store, "cls.spatial.w", channels * d, channels)?;
            let x = g.group_channels(features, nseg, channels, n);
            let x = affine(g, store, "spatial", x)?;
            let mut branches = Vec::with_capacity(cfg.inception_kernels.len());
            for &k in &cfg.inception_kernels {
                let y = conv(g, store, &format!("inc{k}"), x, tokens, k)?;
                branches.push(g.swish(y));
            }
            let x = g.concat_cols(branches);
            let h = conv(g, store, "temp1", x, tokens, TEMPORAL_KERNEL)?;
            let h = g.swish(h);
            let h = conv(g, store, "temp2", h, tokens, TEMPORAL_KERNEL)?;
            let x = g.add(x, h);
            let x = g.swish(x);
            let x = g.mean_pool(x, tokens);
            affine(g, store, "out", x)
        }
    }
}

/// RevIN-normalized token batch for labelled trials.
pub fn trial_batch(model: &ModelConfig, segs: &[&TrialSegment]) -> Result<TokenBatch> {
    let norm: Vec<Vec<Vec<f64>>> = segs.iter().map(|s| revin_normalize(&s.data, REVIN_EPS).0).collect();
    let refs: Vec<&[Vec<f64>]> = norm.iter().map(|s| s.as_slice()).collect();
    let subjects: Vec<usize> = segs.iter().map(|s| s.subject_id as usize).collect();
    TokenBatch::from_segments(&refs, &subjects, model.patch_len, model.stride, false)
}

fn batch_logits(
    g: &mut Graph,
    model: &ModelConfig,
    cls: &StClassifierConfig,
    store: &ParamStore,
    segs: &[&TrialSegment],
) -> Result<Var> {
    let batch = trial_batch(model, segs)?;
    let tr = forward(g, model, store, &batch, &ForwardOptions::default())?;
    classifier_logits(g, cls, store, tr.features, batch.nseg(), batch.channels, batch.n())
}

/// Lowest index among the maxima.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSplit {
    pub train_sessions: Vec<u16>,
    pub val_session: u16,
    pub test_session: u16,
}

impl SessionSplit {
    pub fn validate(&self) -> Result<()> {
        if self.train_sessions.is_empty() {
            return Err(LblmError::config("split has no training sessions"));
        }
        if self.val_session == self.test_session {
            return Err(LblmError::config("validation and test sessions must differ"));
        }
        if self.train_sessions.contains(&self.val_session) || self.train_sessions.contains(&self.test_session) {
            return Err(LblmError::config("held-out sessions overlap the training sessions"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Val,
    Test,
}

/// Session roles per subject; subjects without an override use `default`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    pub default: SessionSplit,
    #[serde(default)]
    pub overrides: BTreeMap<u16, SessionSplit>,
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan::holdout_last_two(4)
    }
}

impl SplitPlan {
    /// Sessions `0..sessions-2` train, then one validation and one test session.
    pub fn holdout_last_two(sessions: u16) -> SplitPlan {
        let s = sessions.max(3);
        SplitPlan {
            default: SessionSplit {
                train_sessions: (0..s - 2).collect(),
                val_session: s - 2,
                test_session: s - 1,
            },
            overrides: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.default.validate()?;
        self.overrides.values().try_for_each(SessionSplit::validate)
    }

    pub fn for_subject(&self, subject: u16) -> &SessionSplit {
        self.overrides.get(&subject).unwrap_or(&self.default)
    }

    pub fn role(&self, seg: &TrialSegment) -> Option<Role> {
        let s = self.for_subject(seg.subject_id);
        if s.train_sessions.contains(&seg.session_id) {
            Some(Role::Train)
        } else if s.val_session == seg.session_id {
            Some(Role::Val)
        } else if s.test_session == seg.session_id {
            Some(Role::Test)
        } else {
            None
        }
    }

    pub fn select<'a>(&self, segs: &'a [TrialSegment], role: Role) -> Vec<&'a TrialSegment> {
        segs.iter().filter(|s| self.role(s) == Some(role)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub accuracy: f64,
    /// `None` for classes without trials.
    pub per_class: Vec<Option<f64>>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub n_trials: usize,
    pub checkpoint: String,
    /// Word predictions coarsened to semantic groups.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_remap_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl EvalReport {
    pub fn from_predictions(task: Task, labels: &[usize], preds: &[usize], checkpoint: String) -> Result<EvalReport> {
        let k = task.num_classes();
        if labels.len() != preds.len() {
            return Err(LblmError::shape("labels and predictions differ in length"));
        }
        let mut confusion = vec![vec![0usize; k]; k];
        for (&y, &p) in labels.iter().zip(preds) {
            if y >= k || p >= k {
                return Err(LblmError::Label {
                    label: y.max(p),
                    classes: k,
                });
            }
            confusion[y][p] += 1;
        }
        let n = labels.len();
        let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let total: usize = row.iter().sum();
                (total > 0).then(|| row[c] as f64 / total as f64)
            })
            .collect();
        let mut report = EvalReport {
            task,
            accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            per_class,
            confusion,
            n_trials: n,
            checkpoint,
            semantic_remap_accuracy: None,
            config_hash: None,
        };
        if task == Task::Word24 {
            let remapped = report.remap_semantic()?;
            if remapped.accuracy + 1e-12 < report.accuracy {
                return Err(LblmError::config("semantic remapping lowered accuracy"));
            }
            report.semantic_remap_accuracy = Some(remapped.accuracy);
        }
        Ok(report)
    }

    /// Collapses a word-level report onto the semantic groups.
    pub fn remap_semantic(&self) -> Result<EvalReport> {
        if self.task != Task::Word24 {
            return Err(LblmError::config("only word-level reports can be remapped"));
        }
        let mut confusion = vec![vec![0usize; NUM_GROUPS]; NUM_GROUPS];
        for (y, row) in self.confusion.iter().enumerate() {
            for (p, c) in row.iter().enumerate() {
                confusion[group(y as u8) as usize][group(p as u8) as usize] += c;
            }
        }
        let mut labels = Vec::with_capacity(self.n_trials);
        let mut preds = Vec::with_capacity(self.n_trials);
        for (y, row) in confusion.iter().enumerate() {
            for (p, c) in row.iter().enumerate() {
                labels.extend(std::iter::repeat(y).take(*c));
                preds.extend(std::iter::repeat(p).take(*c));
            }
        }
        EvalReport::from_predictions(Task::Semantic6, &labels, &preds, self.checkpoint.clone())
    }
}

/// Argmax predictions of a finetuned model, evaluated in chunks.
pub fn predict(
    model: &ModelConfig,
    cls: &StClassifierConfig,
    store: &ParamStore,
    segs: &[&TrialSegment],
    chunk: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(segs.len());
    for part in segs.chunks(chunk.max(1)) {
        let mut g = Graph::new();
        let logits = batch_logits(&mut g, model, cls, store, part)?;
        let v = g.value(logits);
        out.extend((0..v.rows).map(|r| argmax(v.row(r))));
    }
    Ok(out)
}

/// Classifier configuration and task stored in a finetuned checkpoint.
pub fn checkpoint_head(ckpt: &Checkpoint) -> Result<(StClassifierConfig, Task)> {
    if ckpt.stage != Stage::Finetuned {
        return Err(LblmError::StageOrder(format!(
            "evaluation needs a finetuned checkpoint, got stage `{}`",
            ckpt.stage.name()
        )));
    }
    let cls = serde_json::from_value(ckpt.meta["classifier"].clone())
        .map_err(|e| LblmError::config(format!("checkpoint classifier metadata: {e}")))?;
    let task = serde_json::from_value(ckpt.meta["task"].clone())
        .map_err(|e| LblmError::config(format!("checkpoint task metadata: {e}")))?;
    Ok((cls, task))
}

/// Accuracy over the given trials. A word-level checkpoint can be scored on
/// the semantic task through the group mapping; the reverse is refused.
pub fn evaluate_trials(ckpt: &Checkpoint, trials: &[&TrialSegment], task: Task) -> Result<EvalReport> {
    let (cls, trained) = checkpoint_head(ckpt)?;
    let remap = match (trained, task) {
        (a, b) if a == b => false,
        (Task::Word24, Task::Semantic6) => true,
        _ => {
            return Err(LblmError::config(format!(
                "a {} checkpoint cannot be scored on {}",
                trained.name(),
                task.name()
            )))
        }
    };
    let mut preds = predict(&ckpt.model, &cls, &ckpt.params, trials, 32)?;
    if remap {
        preds.iter_mut().for_each(|p| *p = group(*p as u8) as usize);
    }
    let labels: Vec<usize> = trials.iter().map(|s| task.label(s)).collect();
    EvalReport::from_predictions(task, &labels, &preds, ckpt.hash()?)
}

/// Test-session evaluation.
pub fn evaluate(ckpt: &Checkpoint, segs: &[TrialSegment], split: &SplitPlan, task: Task) -> Result<EvalReport> {
    split.validate()?;
    let test = split.select(segs, Role::Test);
    if test.is_empty() {
        return Err(LblmError::config("no trials in the test sessions"));
    }
    evaluate_trials(ckpt, &test, task)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub task: Task,
    pub classifier: StClassifierConfig,
    pub split: SplitPlan,
    pub epochs: usize,
    pub batch: usize,
    pub hyper: TrainHyper,
    /// Trains only the classifier.
    pub freeze_backbone: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            task: Task::Word24,
            classifier: StClassifierConfig::default(),
            split: SplitPlan::default(),
            epochs: 20,
            batch: 16,
            hyper: TrainHyper {
                lr_base: 1e-4,
                ..TrainHyper::default()
            },
            freeze_backbone: false,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    /// Classifier config with the class count implied by the task.
    pub fn head(&self) -> StClassifierConfig {
        StClassifierConfig {
            num_classes: self.task.num_classes(),
            ..self.classifier.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.head().validate()?;
        self.split.validate()?;
        if self.epochs == 0 || self.batch == 0 {
            return Err(LblmError::config("epochs and batch must be positive"));
        }
        let mut h = self.hyper.clone();
        h.total_steps = h.total_steps.max(1);
        h.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

pub fn finetune_log_csv(rows: &[FinetuneEpoch]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_accuracy\n");
    for r in rows {
        s.push_str(&format!("{},{:e},{:.9},{:.6}\n", r.epoch, r.lr, r.train_loss, r.val_accuracy));
    }
    s
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Parameters of the epoch with the best validation accuracy.
    pub checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub log: Vec<FinetuneEpoch>,
    pub val_report: EvalReport,
}

fn trainable(name: &str, freeze_backbone: bool) -> bool {
    name.starts_with(CLS_PREFIX) || (!freeze_backbone && !name.starts_with("head."))
}

/// Trains backbone and classifier on the training sessions, keeping the
/// epoch with the best validation accuracy (earliest on ties).
pub fn finetune(init: &Checkpoint, segs: &[TrialSegment], cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let train = cfg.split.select(segs, Role::Train);
    let val = cfg.split.select(segs, Role::Val);
    if train.is_empty() || val.is_empty() {
        return Err(LblmError::config("split leaves no training or validation trials"));
    }
    let k = cfg.task.num_classes();
    for s in train.iter().chain(&val) {
        let y = cfg.task.label(s);
        if y >= k {
            return Err(LblmError::Label { label: y, classes: k });
        }
    }
    let channels = train[0].channels();
    let model = init.model.clone();
    let head = cfg.head();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut store = ParamStore::new();
    for p in init.params.iter().filter(|p| !p.name.starts_with(CLS_PREFIX)) {
        store.insert(p.clone())?;
    }
    store.extend(init_classifier(&head, &model, channels, &mut rng)?)?;
    store.zero_grad();
    let frozen: Vec<(ParamId, Vec<f64>)> = store
        .ids()
        .filter(|id| !trainable(&store.get(*id).name, cfg.freeze_backbone))
        .map(|id| (id, store.get(id).values.clone()))
        .collect();

    let mut hyper = cfg.hyper.clone();
    hyper.total_steps = cfg.epochs * train.len().div_ceil(cfg.batch);
    let mut state = OptimState::new(&store);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let part: Vec<&TrialSegment> = chunk.iter().map(|&i| train[i]).collect();
            let labels: Vec<usize> = part.iter().map(|s| cfg.task.label(s)).collect();
            let mut g = Graph::new();
            let logits = batch_logits(&mut g, &model, &head, &store, &part)?;
            let loss = g.softmax_xent(logits, labels);
            let l = g.value(loss).item();
            if !l.is_finite() {
                return Err(LblmError::DegenerateFunction(format!("finetune loss = {l}")));
            }
            loss_sum += l * part.len() as f64;
            let grads = g.backward(loss);
            g.accumulate_param_grads(&grads, &mut store);
            lr = optimizer_step(&mut store, &mut state, &hyper, step)?.0;
            step += 1;
            for (id, v) in &frozen {
                store.get_mut(*id).values.clone_from(v);
            }
        }
        let preds = predict(&model, &head, &store, &val, 32)?;
        let correct = preds.iter().zip(&val).filter(|(p, s)| **p == cfg.task.label(s)).count();
        let acc = correct as f64 / val.len() as f64;
        log.push(FinetuneEpoch {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val_accuracy: acc,
        });
        if best.as_ref().map_or(true, |(_, b, _)| acc > *b) {
            best = Some((epoch, acc, store.clone()));
        }
    }
    let (best_epoch, _, mut params) = best.expect("at least one epoch");
    params.zero_grad();
    let meta = serde_json::json!({
        "ancestor": init.hash()?,
        "ancestor_stage": init.stage.name(),
        "task": cfg.task,
        "classifier": head,
        "best_epoch": best_epoch,
        "seed": cfg.seed,
        "freeze_backbone": cfg.freeze_backbone,
    });
    let checkpoint = Checkpoint {
        stage: Stage::Finetuned,
        model,
        meta,
        params,
        optim: None,
    };
    let val_report = evaluate_trials(&checkpoint, &val, cfg.task)?;
    Ok(FinetuneOutcome {
        checkpoint,
        best_epoch,
        log,
        val_report,
    })
}

#[cfg(test)]
mod tests;
