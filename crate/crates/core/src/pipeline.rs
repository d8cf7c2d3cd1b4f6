//! Run configuration and the end-to-end commands behind the CLI. Every
//! command reads and writes files; outputs are written atomically and carry
//! the hash of the resolved configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{band_power, fscore_csv, fscore_rows, welch_default, FScoreRow, BANDS};
use crate::backbone::{sha256_hex, Checkpoint, ModelConfig, Stage};
use crate::classify::{evaluate, finetune, finetune_log_csv, EvalReport, FinetuneConfig, Task};
use crate::error::{LblmError, Result};
use crate::forecast::{evaluate_forecasts, forecast_csv, mean_mse_by_horizon, overlay_csv, ForecastConfig};
use crate::pretrain::{epoch_log_csv, init_checkpoint, run_pretrain, PretrainConfig, PretrainStage};
use crate::signal::{
    epoch_sliding, epoch_trials, multiband_mix, preprocess_recording, read_dataset, read_sidecar, synth_dataset,
    write_atomic, write_dataset, write_sidecar, BandTag, Condition, EegRecording, GeneratorSpec, PreprocessConfig,
    TrialSegment,
};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "LBLM_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub generator: GeneratorSpec,
    pub preprocess: PreprocessConfig,
    /// Adds alpha, beta and gamma band-passed copies to the pretraining corpus.
    pub multiband: bool,
    /// Sessions whose unlabelled windows feed pretraining; defaults to the
    /// finetuning train sessions. Must not include held-out sessions.
    pub pretrain_sessions: Option<Vec<u16>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            generator: GeneratorSpec::default(),
            preprocess: PreprocessConfig::default(),
            multiband: false,
            pretrain_sessions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub mstp: PretrainConfig,
    pub astp: PretrainConfig,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            mstp: PretrainConfig::default(),
            astp: PretrainConfig {
                stage: PretrainStage::Astp,
                ..PretrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastSection {
    #[serde(flatten)]
    pub eval: ForecastConfig,
    /// Test trials scored per rung; 0 means all.
    pub max_segments: usize,
}

impl Default for ForecastSection {
    fn default() -> Self {
        ForecastSection {
            eval: ForecastConfig::default(),
            max_segments: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneConfig,
    pub forecast: ForecastSection,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainSection::default(),
            finetune: FinetuneConfig::default(),
            forecast: ForecastSection::default(),
            seed: 0,
        }
    }
}

/// Seed precedence: flag, then `LBLM_SEED`, then the config file.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| LblmError::config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        None => Ok(config),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| LblmError::io(path, e))?;
        RunConfig::from_json(&text)
    }

    /// Applies the run seed to every stage and checks all sections.
    pub fn resolve(mut self, seed: u64) -> Result<RunConfig> {
        self.seed = seed;
        self.pretrain.mstp.seed = seed;
        self.pretrain.astp.seed = seed;
        self.finetune.seed = seed;
        if self.pretrain.mstp.stage != PretrainStage::Mstp || self.pretrain.astp.stage != PretrainStage::Astp {
            return Err(LblmError::config("pretrain.mstp and pretrain.astp must declare their own stage"));
        }
        self.data.generator.validate()?;
        self.model.validate()?;
        self.pretrain.mstp.validate()?;
        self.pretrain.astp.validate()?;
        self.finetune.validate()?;
        if let Some(ps) = &self.data.pretrain_sessions {
            let split = &self.finetune.split;
            let held: Vec<u16> = std::iter::once(&split.default)
                .chain(split.overrides.values())
                .flat_map(|s| [s.val_session, s.test_session])
                .collect();
            if ps.is_empty() || ps.iter().any(|s| held.contains(s)) {
                return Err(LblmError::config(
                    "pretrain_sessions must be non-empty and exclude validation and test sessions",
                ));
            }
        }
        if self.model.subjects < self.data.generator.subjects {
            return Err(LblmError::config(format!(
                "model has {} subject embeddings but the generator makes {} subjects",
                self.model.subjects, self.data.generator.subjects
            )));
        }
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex sha256 of the compact JSON of the resolved config.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }
}

fn with_hash_header(hash: &str, body: &str) -> String {
    format!("# config_hash={hash}\n{body}")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| LblmError::io(dir, e))?;
    }
    write_atomic(path, text.as_bytes())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// `<path>` with `suffix` appended to the file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

const KIND_RAW: &str = "raw";
const KIND_PREPROCESSED: &str = "preprocessed";

fn save_dataset(recs: &[EegRecording], path: &Path, meta: serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| LblmError::io(dir, e))?;
    }
    write_dataset(recs, path)?;
    write_sidecar(path, &meta)
}

fn load_dataset(path: &Path, kind: &str) -> Result<Vec<EegRecording>> {
    let meta = read_sidecar(path)?;
    let found = meta["kind"].as_str().unwrap_or("unknown");
    if found != kind {
        return Err(LblmError::config(format!(
            "{} holds {found} data, expected {kind}",
            path.display()
        )));
    }
    read_dataset(path)
}

/// Generates the synthetic corpus.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let recs = synth_dataset(&cfg.data.generator, cfg.seed)?;
    save_dataset(
        &recs,
        out,
        serde_json::json!({
            "kind": KIND_RAW,
            "config_hash": cfg.hash()?,
            "seed": cfg.seed,
            "generator": cfg.data.generator,
        }),
    )
}

pub fn cmd_preprocess(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let recs = load_dataset(input, KIND_RAW)?;
    let pre = recs
        .iter()
        .map(|r| preprocess_recording(r, &cfg.data.preprocess))
        .collect::<Result<Vec<_>>>()?;
    save_dataset(
        &pre,
        out,
        serde_json::json!({
            "kind": KIND_PREPROCESSED,
            "config_hash": cfg.hash()?,
            "source": input.display().to_string(),
            "preprocess": cfg.data.preprocess,
            "multiband": cfg.data.multiband,
        }),
    )
}

/// Label-free windows from the training sessions, optionally band-mixed.
pub fn pretrain_corpus(cfg: &RunConfig, recs: &[EegRecording]) -> Result<Vec<TrialSegment>> {
    let mut segs = Vec::new();
    for r in recs {
        let split = cfg.finetune.split.for_subject(r.subject_id);
        let sessions = cfg.data.pretrain_sessions.as_ref().unwrap_or(&split.train_sessions);
        if sessions.contains(&r.session_id) {
            segs.extend(epoch_sliding(r, &cfg.data.preprocess.epoch, BandTag::Raw)?);
        }
    }
    if cfg.data.multiband {
        segs = multiband_mix(&segs)?;
    }
    if segs.is_empty() {
        return Err(LblmError::config("no pretraining windows in the training sessions"));
    }
    Ok(segs)
}

/// Labelled trial epochs of one condition.
pub fn trial_corpus(cfg: &RunConfig, recs: &[EegRecording], condition: Condition) -> Result<Vec<TrialSegment>> {
    let mut segs = Vec::new();
    for r in recs {
        segs.extend(epoch_trials(r, &cfg.data.preprocess.epoch, condition, BandTag::Raw)?);
    }
    Ok(segs)
}

fn stamp(meta: &mut serde_json::Value, key: &str, value: serde_json::Value) {
    if let serde_json::Value::Object(m) = meta {
        m.insert(key.into(), value);
    }
}

/// Runs one pretraining stage and writes the checkpoint plus
/// `<out>.log.csv`. Returns the checkpoint hash.
pub fn cmd_pretrain(
    cfg: &RunConfig,
    stage: PretrainStage,
    data: &Path,
    init: Option<&Path>,
    out: &Path,
) -> Result<String> {
    if stage == PretrainStage::Astp && init.is_none() && !cfg.pretrain.astp.allow_stage_override {
        return Err(LblmError::StageOrder(
            "astp continues from an mstp checkpoint; pass --init".into(),
        ));
    }
    let recs = load_dataset(data, KIND_PREPROCESSED)?;
    let corpus = pretrain_corpus(cfg, &recs)?;
    let start = match init {
        Some(p) => Checkpoint::load(p)?,
        None => init_checkpoint(&cfg.model, cfg.seed)?,
    };
    let pcfg = match stage {
        PretrainStage::Mstp => &cfg.pretrain.mstp,
        PretrainStage::Astp => &cfg.pretrain.astp,
    };
    let hash = cfg.hash()?;
    let outcome = run_pretrain(pcfg, &corpus, &start, serde_json::json!({ "config_hash": hash }))?;
    let mut ck = outcome.checkpoint;
    if let Some(reason) = &outcome.aborted {
        stamp(&mut ck.meta, "aborted", reason.clone().into());
    }
    write_text(&sibling(out, ".log.csv"), &with_hash_header(&hash, &epoch_log_csv(&outcome.log)))?;
    let h = ck.save(out)?;
    if let Some(reason) = outcome.aborted {
        return Err(LblmError::DegenerateFunction(format!(
            "training stopped early ({reason}); last good parameters saved to {}",
            out.display()
        )));
    }
    Ok(h)
}

/// Finetunes on the training sessions; writes the checkpoint, the
/// validation report `<out>.val.json` and `<out>.log.csv`.
pub fn cmd_finetune(cfg: &RunConfig, task: Task, data: &Path, init: &Path, out: &Path) -> Result<EvalReport> {
    let recs = load_dataset(data, KIND_PREPROCESSED)?;
    let trials = trial_corpus(cfg, &recs, Condition::Silent)?;
    let start = Checkpoint::load(init)?;
    let fcfg = FinetuneConfig {
        task,
        ..cfg.finetune.clone()
    };
    let hash = cfg.hash()?;
    let mut outcome = finetune(&start, &trials, &fcfg)?;
    stamp(&mut outcome.checkpoint.meta, "config_hash", hash.clone().into());
    let ck_hash = outcome.checkpoint.save(out)?;
    let mut report = outcome.val_report;
    report.checkpoint = ck_hash;
    report.config_hash = Some(hash.clone());
    write_json(&sibling(out, ".val.json"), &report)?;
    write_text(&sibling(out, ".log.csv"), &with_hash_header(&hash, &finetune_log_csv(&outcome.log)))?;
    Ok(report)
}

/// Test-session evaluation report.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, task: Task, out: &Path) -> Result<EvalReport> {
    let recs = load_dataset(data, KIND_PREPROCESSED)?;
    let trials = trial_corpus(cfg, &recs, Condition::Silent)?;
    let ck = Checkpoint::load(checkpoint)?;
    let mut report = evaluate(&ck, &trials, &cfg.finetune.split, task)?;
    report.config_hash = Some(cfg.hash()?);
    write_json(out, &report)?;
    Ok(report)
}

/// Test-session trials used for forecasting, capped at `max_segments`.
pub fn forecast_trials(cfg: &RunConfig, recs: &[EegRecording]) -> Result<Vec<TrialSegment>> {
    let split = &cfg.finetune.split;
    let mut test: Vec<TrialSegment> = trial_corpus(cfg, recs, Condition::Silent)?
        .into_iter()
        .filter(|s| split.for_subject(s.subject_id).test_session == s.session_id)
        .collect();
    if test.is_empty() {
        return Err(LblmError::config("no test-session trials to forecast"));
    }
    if cfg.forecast.max_segments > 0 {
        test.truncate(cfg.forecast.max_segments);
    }
    Ok(test)
}

/// Forecast metrics on test-session trials. Writes `<prefix>.csv` (per
/// segment, rung, method and channel), `<prefix>.summary.csv` (mean MSE per
/// horizon and method) and `<prefix>.overlay.csv`.
pub fn cmd_forecast(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    ladder: &[(usize, usize)],
    prefix: &Path,
) -> Result<()> {
    let recs = load_dataset(data, KIND_PREPROCESSED)?;
    let ck = Checkpoint::load(checkpoint)?;
    if ck.stage == Stage::Init {
        return Err(LblmError::StageOrder("forecasting needs a pretrained checkpoint".into()));
    }
    let test = forecast_trials(cfg, &recs)?;
    let fcfg = ForecastConfig {
        ladder: ladder.to_vec(),
        ..cfg.forecast.eval.clone()
    };
    let ev = evaluate_forecasts(&ck.model(), &test, &fcfg)?;
    let hash = cfg.hash()?;
    let mut summary = String::from("horizon,method,mean_mse\n");
    for (h, m, v) in mean_mse_by_horizon(&ev.rows) {
        summary.push_str(&format!("{h},{m},{v:.9}\n"));
    }
    write_text(&sibling(prefix, ".csv"), &with_hash_header(&hash, &forecast_csv(&ev.rows)))?;
    write_text(&sibling(prefix, ".summary.csv"), &with_hash_header(&hash, &summary))?;
    write_text(&sibling(prefix, ".overlay.csv"), &with_hash_header(&hash, &overlay_csv(&ev.overlays)))?;
    Ok(())
}

/// Test accuracies of one seed's three initializations.
#[derive(Debug, Clone)]
pub struct InitComparison {
    pub scratch: f64,
    pub mstp: f64,
    pub mstp_astp: f64,
    /// The MSTP+ASTP checkpoint.
    pub pretrained: Checkpoint,
    /// Preprocessed recordings the comparison ran on.
    pub recordings: Vec<EegRecording>,
}

/// Synthesizes, pretrains MSTP then ASTP, and finetunes the task from
/// scratch and from both checkpoints, all in memory with `cfg.seed`.
pub fn compare_inits(cfg: &RunConfig, task: Task) -> Result<InitComparison> {
    let recs = synth_dataset(&cfg.data.generator, cfg.seed)?
        .iter()
        .map(|r| preprocess_recording(r, &cfg.data.preprocess))
        .collect::<Result<Vec<_>>>()?;
    let corpus = pretrain_corpus(cfg, &recs)?;
    let trials = trial_corpus(cfg, &recs, Condition::Silent)?;
    let init = init_checkpoint(&cfg.model, cfg.seed)?;
    let mstp = run_pretrain(&cfg.pretrain.mstp, &corpus, &init, serde_json::json!({}))?.checkpoint;
    let astp = run_pretrain(&cfg.pretrain.astp, &corpus, &mstp, serde_json::json!({}))?.checkpoint;
    let fcfg = FinetuneConfig {
        task,
        ..cfg.finetune.clone()
    };
    let score = |ck: &Checkpoint| -> Result<f64> {
        let out = finetune(ck, &trials, &fcfg)?;
        Ok(evaluate(&out.checkpoint, &trials, &fcfg.split, task)?.accuracy)
    };
    Ok(InitComparison {
        scratch: score(&init)?,
        mstp: score(&mstp)?,
        mstp_astp: score(&astp)?,
        pretrained: astp,
        recordings: recs,
    })
}

/// Parses `"rest:silent,read:silent"`.
pub fn parse_pairs(s: &str) -> Result<Vec<(Condition, Condition)>> {
    s.split(',')
        .map(|p| {
            let (a, b) = p
                .trim()
                .split_once(':')
                .ok_or_else(|| LblmError::config(format!("pair `{p}` is not a:b")))?;
            Ok((Condition::parse(a.trim())?, Condition::parse(b.trim())?))
        })
        .collect()
}

fn condition_name(c: Condition) -> &'static str {
    match c {
        Condition::Rest => "rest",
        Condition::Silent => "silent",
        Condition::Read => "read",
    }
}

/// Per subject and channel, the mean band power over the trials of one
/// condition; subjects ordered by id.
fn subject_band_power(
    cfg: &RunConfig,
    recs: &[EegRecording],
    condition: Condition,
    band: &crate::analysis::BandDef,
) -> Result<Vec<(u16, Vec<f64>)>> {
    let trials = trial_corpus(cfg, recs, condition)?;
    let mut acc: std::collections::BTreeMap<u16, (Vec<f64>, usize)> = Default::default();
    for t in &trials {
        let psd = welch_default(&t.data, t.fs)?;
        let bp = band_power(&psd, band)?;
        let e = acc.entry(t.subject_id).or_insert_with(|| (vec![0.0; bp.len()], 0));
        e.0.iter_mut().zip(&bp).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(s, (sum, n))| (s, sum.iter().map(|v| v / n as f64).collect()))
        .collect())
}

/// Paired-condition F-scores per channel and band.
pub fn cmd_analyze(cfg: &RunConfig, data: &Path, pairs: &[(Condition, Condition)], out: &Path) -> Result<Vec<FScoreRow>> {
    let recs = load_dataset(data, KIND_PREPROCESSED)?;
    let mut rows = Vec::new();
    for &(a, b) in pairs {
        let name = format!("{}-{}", condition_name(a), condition_name(b));
        for band in &BANDS {
            let pa = subject_band_power(cfg, &recs, a, band)?;
            let pb = subject_band_power(cfg, &recs, b, band)?;
            let ids_a: Vec<u16> = pa.iter().map(|x| x.0).collect();
            let ids_b: Vec<u16> = pb.iter().map(|x| x.0).collect();
            if ids_a != ids_b || ids_a.len() < 2 {
                return Err(LblmError::config(format!(
                    "{name}: need the same two or more subjects in both conditions"
                )));
            }
            let va: Vec<Vec<f64>> = pa.into_iter().map(|x| x.1).collect();
            let vb: Vec<Vec<f64>> = pb.into_iter().map(|x| x.1).collect();
            rows.extend(fscore_rows(&name, band.name, &va, &vb)?);
        }
    }
    write_text(out, &with_hash_header(&cfg.hash()?, &fscore_csv(&rows)))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(3), Some("5"), 7).unwrap(), 3);
        assert_eq!(resolve_seed(None, Some("5"), 7).unwrap(), 5);
        assert_eq!(resolve_seed(None, None, 7).unwrap(), 7);
        assert!(resolve_seed(None, Some("x"), 7).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"seed": 1}"#).is_ok());
        assert!(RunConfig::from_json(r#"{"seeds": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"depth": 2}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"pretrain": {"mstp": {"lambda": 2}}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"forecast": {"ladder": [[204, 46]], "max_segments": 2}}"#).is_ok());
        assert!(RunConfig::from_json(r#"{"forecast": {"bogus": 2}}"#).is_err());
    }

    #[test]
    fn resolution_spreads_the_seed_and_changes_the_hash() {
        let a = RunConfig::default().resolve(1).unwrap();
        let b = RunConfig::default().resolve(2).unwrap();
        assert_eq!(a.pretrain.astp.seed, 1);
        assert_eq!(b.finetune.seed, 2);
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap(), RunConfig::default().resolve(1).unwrap().hash().unwrap());
        let back = RunConfig::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn pretraining_never_sees_held_out_sessions() {
        let mut c = RunConfig::default();
        c.data.pretrain_sessions = Some(vec![0, 1]);
        assert!(c.clone().resolve(0).is_ok());
        c.data.pretrain_sessions = Some(vec![0, 3]);
        assert!(c.clone().resolve(0).is_err());
        c.data.pretrain_sessions = Some(vec![]);
        assert!(c.resolve(0).is_err());
    }

    #[test]
    fn pairs_parse() {
        let p = parse_pairs("rest:silent, read:silent").unwrap();
        assert_eq!(p, vec![(Condition::Rest, Condition::Silent), (Condition::Read, Condition::Silent)]);
        assert!(parse_pairs("rest").is_err());
        assert!(parse_pairs("nap:silent").is_err());
    }
}
