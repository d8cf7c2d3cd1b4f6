//! Autoregressive rollout, overlap merging, forecast metrics and the
//! persistence baseline.

use serde::{Deserialize, Serialize};

use crate::backbone::{ForwardOptions, Lblm, TokenBatch};
use crate::diffcore::Graph;
use crate::error::{LblmError, Result};
use crate::pretrain::HORIZON_LADDER;
use crate::signal::{revin_apply, revin_denormalize, revin_normalize, RevinStats, TrialSegment, REVIN_EPS};

/// Averages overlapping patch predictions: patch `i` covers samples
/// `i * stride .. i * stride + patch_len`.
pub fn merge_overlaps(patches: &[Vec<f64>], stride: usize) -> Result<Vec<f64>> {
    let Some(first) = patches.first() else {
        return Err(LblmError::config("nothing to merge"));
    };
    let p = first.len();
    if stride == 0 || p == 0 || patches.iter().any(|x| x.len() != p) {
        return Err(LblmError::shape("patches must share a positive length and stride"));
    }
    let len = (patches.len() - 1) * stride + p;
    let mut sum = vec![0.0; len];
    let mut count = vec![0usize; len];
    for (i, patch) in patches.iter().enumerate() {
        for (j, v) in patch.iter().enumerate() {
            sum[i * stride + j] += v;
            count[i * stride + j] += 1;
        }
    }
    // a stride longer than the patch leaves uncovered samples at zero
    Ok(sum
        .iter()
        .zip(&count)
        .map(|(s, c)| if *c == 0 { 0.0 } else { s / *c as f64 })
        .collect())
}

/// Repeats each channel's last context sample `horizon` times.
pub fn persistence_baseline(context: &[Vec<f64>], horizon: usize) -> Result<Vec<Vec<f64>>> {
    context
        .iter()
        .map(|ch| {
            ch.last()
                .map(|v| vec![*v; horizon])
                .ok_or(LblmError::InputTooShort { len: 0, required: 1 })
        })
        .collect()
}

/// Mean squared and mean absolute error over all entries.
pub fn forecast_metrics(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() || pred.iter().zip(truth).any(|(a, b)| a.len() != b.len()) {
        return Err(LblmError::shape("prediction and truth shapes differ"));
    }
    let n: usize = truth.iter().map(|c| c.len()).sum();
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    let (mut se, mut ae) = (0.0, 0.0);
    for (a, b) in pred.iter().zip(truth) {
        for (x, y) in a.iter().zip(b) {
            se += (x - y) * (x - y);
            ae += (x - y).abs();
        }
    }
    Ok((se / n as f64, ae / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    /// Appends the tail of the last token's predicted patch.
    LastPatch,
    /// Same loop; each generated sample is then the mean of every predicted
    /// patch that covers it.
    Merged,
}

impl RolloutMode {
    pub fn name(self) -> &'static str {
        match self {
            RolloutMode::LastPatch => "last_patch",
            RolloutMode::Merged => "merged",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// `channels x horizon`.
    pub prediction: Vec<Vec<f64>>,
    pub model_calls: usize,
}

/// Predicts `horizon` samples past a normalized `context`, one stride per
/// model call. Only the most recent `n_max` tokens are fed to the model.
pub fn rollout(model: &Lblm, context: &[Vec<f64>], subject: usize, horizon: usize, mode: RolloutMode) -> Result<Rollout> {
    let (p, s) = (model.cfg.patch_len, model.cfg.stride);
    let len = context.first().map_or(0, |c| c.len());
    if len < p {
        return Err(LblmError::InputTooShort { len, required: p });
    }
    let keep = (model.cfg.n_max - 1) * s + p;
    let mut seq: Vec<Vec<f64>> = context.to_vec();
    let mut steps: Vec<Vec<Vec<f64>>> = vec![Vec::new(); context.len()];
    let calls = horizon.div_ceil(s);
    let opts = ForwardOptions {
        causal: true,
        ..Default::default()
    };
    for _ in 0..calls {
        let cur = seq[0].len();
        let from = cur.saturating_sub(keep);
        let view: Vec<Vec<f64>> = seq.iter().map(|c| c[from..].to_vec()).collect();
        let batch = TokenBatch::from_segments(&[&view], &[subject], p, s, true)?;
        let n = batch.n();
        let mut g = Graph::new();
        let tr = model.forward(&mut g, &batch, &opts)?;
        let h = model.heads(&mut g, tr.features);
        let wave = g.value(h.wave);
        for (c, ch) in seq.iter_mut().enumerate() {
            let patch = wave.row(c * n + n - 1).to_vec();
            ch.extend_from_slice(&patch[p - s..]);
            steps[c].push(patch);
        }
    }
    let prediction = match mode {
        RolloutMode::LastPatch => seq.iter().map(|c| c[len..len + horizon].to_vec()).collect(),
        RolloutMode::Merged => {
            // step k's patch starts at len - p + s + k * s
            let skip = p - s;
            steps
                .iter()
                .map(|patches| merge_overlaps(patches, s).map(|m| m[skip..skip + horizon].to_vec()))
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(Rollout {
        prediction,
        model_calls: calls,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Normalized,
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastResult {
    pub context_len: usize,
    pub target_len: usize,
    pub prediction: Vec<Vec<f64>>,
    pub truth: Vec<Vec<f64>>,
    pub mse: f64,
    pub mae: f64,
    pub scale: Scale,
}

impl ForecastResult {
    pub fn new(context_len: usize, prediction: Vec<Vec<f64>>, truth: Vec<Vec<f64>>, scale: Scale) -> Result<Self> {
        let (mse, mae) = forecast_metrics(&prediction, &truth)?;
        Ok(ForecastResult {
            context_len,
            target_len: truth.first().map_or(0, |c| c.len()),
            prediction,
            truth,
            mse,
            mae,
            scale,
        })
    }
}

/// Parses `"204:46,180:70"`.
pub fn parse_ladder(s: &str) -> Result<Vec<(usize, usize)>> {
    let rows = s
        .split(',')
        .map(|pair| {
            let (c, t) = pair
                .trim()
                .split_once(':')
                .ok_or_else(|| LblmError::config(format!("ladder entry `{pair}` is not ctx:target")))?;
            let num = |x: &str| {
                x.trim()
                    .parse::<usize>()
                    .map_err(|_| LblmError::config(format!("ladder entry `{pair}` is not numeric")))
            };
            let (c, t) = (num(c)?, num(t)?);
            if c == 0 || t == 0 {
                return Err(LblmError::config(format!("ladder entry `{pair}` has a zero length")));
            }
            Ok((c, t))
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(LblmError::config("empty ladder"));
    }
    Ok(rows)
}

pub fn format_ladder(ladder: &[(usize, usize)]) -> String {
    ladder.iter().map(|(c, t)| format!("{c}:{t}")).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastConfig {
    pub ladder: Vec<(usize, usize)>,
    pub mode: RolloutMode,
    /// Window start inside each segment.
    pub offset: usize,
    /// Number of segments exported as overlays.
    pub overlays: usize,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig {
            ladder: HORIZON_LADDER.to_vec(),
            mode: RolloutMode::LastPatch,
            offset: 0,
            overlays: 2,
        }
    }
}

/// Metrics of one segment, rung and channel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForecastRow {
    pub segment: usize,
    pub context: usize,
    pub horizon: usize,
    pub method: String,
    pub channel: usize,
    pub mse: f64,
    pub mae: f64,
    pub mse_raw: f64,
    pub mae_raw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlayPoint {
    pub t: usize,
    pub truth: f64,
    /// `None` over the context.
    pub prediction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Overlay {
    pub segment: usize,
    pub channel: usize,
    pub context_len: usize,
    pub points: Vec<OverlayPoint>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForecastEval {
    pub rows: Vec<ForecastRow>,
    pub overlays: Vec<Overlay>,
}

fn channel_rows(
    segment: usize,
    rung: (usize, usize),
    method: &str,
    pred: &[Vec<f64>],
    truth: &[Vec<f64>],
    stats: &RevinStats,
) -> Result<Vec<ForecastRow>> {
    let pr = revin_denormalize(pred, stats);
    let tr = revin_denormalize(truth, stats);
    (0..pred.len())
        .map(|c| {
            let (mse, mae) = forecast_metrics(&pred[c..c + 1], &truth[c..c + 1])?;
            let (mse_raw, mae_raw) = forecast_metrics(&pr[c..c + 1], &tr[c..c + 1])?;
            Ok(ForecastRow {
                segment,
                context: rung.0,
                horizon: rung.1,
                method: method.to_string(),
                channel: c,
                mse,
                mae,
                mse_raw,
                mae_raw,
            })
        })
        .collect()
}

/// Rolls every ladder rung out on every segment and scores the model
/// against persistence. Windows are normalized by their context's RevIN
/// statistics; raw-scale metrics undo that normalization.
pub fn evaluate_forecasts(model: &Lblm, segments: &[TrialSegment], cfg: &ForecastConfig) -> Result<ForecastEval> {
    let mut out = ForecastEval::default();
    for (si, seg) in segments.iter().enumerate() {
        for (ri, &(ctx, tgt)) in cfg.ladder.iter().enumerate() {
            let end = cfg.offset + ctx + tgt;
            if end > seg.len() {
                return Err(LblmError::Truncation {
                    start: cfg.offset,
                    end,
                    len: seg.len(),
                });
            }
            let context: Vec<Vec<f64>> = seg.data.iter().map(|c| c[cfg.offset..cfg.offset + ctx].to_vec()).collect();
            let truth: Vec<Vec<f64>> = seg.data.iter().map(|c| c[cfg.offset + ctx..end].to_vec()).collect();
            let (context, stats) = revin_normalize(&context, REVIN_EPS);
            let truth = revin_apply(&truth, &stats);
            let pred = rollout(model, &context, seg.subject_id as usize, tgt, cfg.mode)?.prediction;
            let base = persistence_baseline(&context, tgt)?;
            out.rows.extend(channel_rows(si, (ctx, tgt), cfg.mode.name(), &pred, &truth, &stats)?);
            out.rows.extend(channel_rows(si, (ctx, tgt), "persistence", &base, &truth, &stats)?);
            if ri == 0 && si < cfg.overlays {
                for c in 0..context.len() {
                    let points = (0..ctx + tgt)
                        .map(|t| OverlayPoint {
                            t,
                            truth: if t < ctx { context[c][t] } else { truth[c][t - ctx] },
                            prediction: (t >= ctx).then(|| pred[c][t - ctx]),
                        })
                        .collect();
                    out.overlays.push(Overlay {
                        segment: si,
                        channel: c,
                        context_len: ctx,
                        points,
                    });
                }
            }
        }
    }
    Ok(out)
}

pub fn forecast_csv(rows: &[ForecastRow]) -> String {
    let mut s = String::from("segment,context,horizon,method,channel,mse,mae,mse_raw,mae_raw\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{:.9},{:.9},{:.9},{:.9}\n",
            r.segment, r.context, r.horizon, r.method, r.channel, r.mse, r.mae, r.mse_raw, r.mae_raw
        ));
    }
    s
}

pub fn overlay_csv(overlays: &[Overlay]) -> String {
    let mut s = String::from("segment,channel,context_len,t,truth,prediction\n");
    for o in overlays {
        for p in &o.points {
            let pred = p.prediction.map_or(String::new(), |v| format!("{v:.9}"));
            s.push_str(&format!(
                "{},{},{},{},{:.9},{}\n",
                o.segment, o.channel, o.context_len, p.t, p.truth, pred
            ));
        }
    }
    s
}

/// Mean normalized MSE per `(horizon, method)`, ordered by horizon then
/// method name.
pub fn mean_mse_by_horizon(rows: &[ForecastRow]) -> Vec<(usize, String, f64)> {
    let mut acc: std::collections::BTreeMap<(usize, String), (f64, usize)> = Default::default();
    for r in rows {
        let e = acc.entry((r.horizon, r.method.clone())).or_default();
        e.0 += r.mse;
        e.1 += 1;
    }
    acc.into_iter().map(|((h, m), (s, n))| (h, m, s / n as f64)).collect()
}

/// Ranks with ties sharing their mean rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|a, b| xs[*a].total_cmp(&xs[*b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = mean;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` if either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests;
