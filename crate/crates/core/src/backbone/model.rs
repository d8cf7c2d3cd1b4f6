//! Parameter construction and the batched forward pass.
//!
//! A batch stacks every channel of every segment as an independent token
//! sequence: rows are ordered `(segment, channel, token)`.

use std::f64::consts::PI;

use rand::Rng;

use super::config::ModelConfig;
use crate::diffcore::{Graph, Init, ParamStore, Padding, SeqLayout, Tensor, Var};
use crate::error::{LblmError, Result};
use crate::signal::{patchify, patchify_tail};

/// Sinusoidal position table, `n x d`.
pub fn positional_table(n: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(n, d);
    for pos in 0..n {
        for i in 0..d {
            let k = (i / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(k / d as f64);
            t.data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

fn xavier(fan_in: usize, fan_out: usize) -> Init {
    Init::Xavier { fan_in, fan_out }
}

fn add_linear<R: Rng>(s: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Result<()> {
    s.add(format!("{name}.w"), &[din, dout], xavier(din, dout), rng)?;
    s.add(format!("{name}.b"), &[1, dout], Init::Zeros, rng)?;
    Ok(())
}

fn add_ln<R: Rng>(s: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<()> {
    s.add(format!("{name}.g"), &[1, d], Init::Ones, rng)?;
    s.add(format!("{name}.b"), &[1, d], Init::Zeros, rng)?;
    Ok(())
}

/// Builds every backbone and head parameter in a fixed order.
pub fn init_params<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let (d, f, k) = (cfg.d, cfg.ffn_dim, cfg.num_freq_bins());
    let mut s = ParamStore::new();
    add_linear(&mut s, "embed.proj", cfg.patch_len, d, rng)?;
    s.add("embed.mask_token", &[1, d], Init::Normal(0.02), rng)?;
    s.add("embed.subject", &[cfg.subjects, d], Init::Ones, rng)?;
    for l in 0..cfg.layers {
        let b = format!("block{l}");
        for ff in ["ff1", "ff2"] {
            add_ln(&mut s, &format!("{b}.{ff}.ln"), d, rng)?;
            add_linear(&mut s, &format!("{b}.{ff}.l1"), d, f, rng)?;
            add_linear(&mut s, &format!("{b}.{ff}.l2"), f, d, rng)?;
        }
        add_ln(&mut s, &format!("{b}.mhsa.ln"), d, rng)?;
        for m in ["q", "k", "v", "o"] {
            add_linear(&mut s, &format!("{b}.mhsa.{m}"), d, d, rng)?;
        }
        if cfg.backbone_kind.has_conv() {
            add_ln(&mut s, &format!("{b}.conv.ln"), d, rng)?;
            add_linear(&mut s, &format!("{b}.conv.pw1"), d, 2 * d, rng)?;
            s.add(
                format!("{b}.conv.dw.w"),
                &[cfg.conv_kernel, d],
                xavier(cfg.conv_kernel, cfg.conv_kernel),
                rng,
            )?;
            s.add(format!("{b}.conv.dw.b"), &[1, d], Init::Zeros, rng)?;
            add_linear(&mut s, &format!("{b}.conv.pw2"), d, d, rng)?;
        }
        add_ln(&mut s, &format!("{b}.ln_out"), d, rng)?;
        if cfg.backbone_kind.has_gate() {
            s.add(format!("{b}.gate.zc.w"), &[d, d], Init::Zeros, rng)?;
            s.add(format!("{b}.gate.zc.b"), &[1, d], Init::Zeros, rng)?;
            s.add(format!("{b}.gate.ff.w"), &[d, 1], xavier(d, 1), rng)?;
            s.add(format!("{b}.gate.ff.b"), &[1, 1], Init::Zeros, rng)?;
        }
    }
    add_linear(&mut s, "head.wave", d, cfg.patch_len, rng)?;
    add_linear(&mut s, "head.amp", d, k, rng)?;
    add_linear(&mut s, "head.phase", d, k, rng)?;
    Ok(s)
}

/// Closed-form parameter count of [`init_params`].
pub fn param_count(cfg: &ModelConfig) -> usize {
    let (d, f, p, k, kc) = (cfg.d, cfg.ffn_dim, cfg.patch_len, cfg.num_freq_bins(), cfg.conv_kernel);
    let embed = p * d + d + d + cfg.subjects * d;
    let ffn = 2 * d + d * f + f + f * d + d;
    let mhsa = 2 * d + 4 * (d * d + d);
    let conv = 2 * d + d * 2 * d + 2 * d + kc * d + d + d * d + d;
    let gate = d * d + d + d + 1;
    let mut block = 2 * ffn + mhsa + 2 * d;
    if cfg.backbone_kind.has_conv() {
        block += conv;
    }
    if cfg.backbone_kind.has_gate() {
        block += gate;
    }
    let heads = d * p + p + 2 * (d * k + k);
    embed + cfg.layers * block + heads
}

/// Patch rows of a batch of equally long segments.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    /// `(nseg * channels * n) x patch_len`.
    pub patches: Tensor,
    /// Subject of each segment.
    pub subjects: Vec<usize>,
    pub channels: usize,
    pub layout: SeqLayout,
}

impl TokenBatch {
    /// Patchifies every channel. With `tail` the last patch ends on the last
    /// sample instead of dropping the remainder.
    pub fn from_segments(
        segments: &[&[Vec<f64>]],
        subjects: &[usize],
        patch_len: usize,
        stride: usize,
        tail: bool,
    ) -> Result<TokenBatch> {
        if segments.is_empty() || segments.len() != subjects.len() {
            return Err(LblmError::shape("batch needs one subject per segment"));
        }
        let channels = segments[0].len();
        let len = segments[0].first().map_or(0, |c| c.len());
        let mut data = Vec::new();
        let mut n = 0;
        for seg in segments {
            if seg.len() != channels || seg.iter().any(|c| c.len() != len) {
                return Err(LblmError::shape("segments in a batch must share channels and length"));
            }
            for ch in seg.iter() {
                let ps = if tail {
                    patchify_tail(ch, patch_len, stride)?
                } else {
                    patchify(ch, patch_len, stride)?
                };
                n = ps.len();
                data.extend_from_slice(&ps.patches);
            }
        }
        let nseq = segments.len() * channels;
        Ok(TokenBatch {
            patches: Tensor::from_vec(nseq * n, patch_len, data)?,
            subjects: subjects.to_vec(),
            channels,
            layout: SeqLayout { nseq, n },
        })
    }

    pub fn nseg(&self) -> usize {
        self.subjects.len()
    }

    pub fn n(&self) -> usize {
        self.layout.n
    }

    pub fn rows(&self) -> usize {
        self.layout.rows()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub causal: bool,
    /// Per-row flags; flagged tokens take the mask token in place of the
    /// projected patch.
    pub mask: Option<Vec<bool>>,
    /// Replaces every gate value by a constant.
    pub gate_override: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `rows x d` token features.
    pub features: Var,
    /// Per-block gate values, `rows x 1` (gated backbones only).
    pub gates: Vec<Var>,
    /// Per-block input and pre-gate transform, for identity checks.
    pub block_inputs: Vec<Var>,
    pub block_inners: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOut {
    pub wave: Var,
    pub amp: Var,
    pub phase: Var,
}

/// Resolves parameter leaves by name on one tape.
pub struct Params<'a> {
    pub store: &'a ParamStore,
}

impl<'a> Params<'a> {
    pub fn get(&self, g: &mut Graph, name: &str) -> Var {
        let id = self
            .store
            .id(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"));
        g.param(self.store, id)
    }

    pub fn linear(&self, g: &mut Graph, name: &str, x: Var) -> Var {
        let w = self.get(g, &format!("{name}.w"));
        let b = self.get(g, &format!("{name}.b"));
        g.linear(x, w, b)
    }

    pub fn ln(&self, g: &mut Graph, name: &str, x: Var, eps: f64) -> Var {
        let gm = self.get(g, &format!("{name}.g"));
        let bt = self.get(g, &format!("{name}.b"));
        g.layer_norm(x, gm, bt, eps)
    }
}

/// Token embeddings: `(proj(patch) or mask_token + pe) * se[subject]`.
pub fn embed(g: &mut Graph, cfg: &ModelConfig, p: &Params, batch: &TokenBatch, mask: Option<&[bool]>) -> Result<Var> {
    let n = batch.n();
    if n > cfg.n_max {
        return Err(LblmError::config(format!("{n} tokens exceed n_max = {}", cfg.n_max)));
    }
    if let Some(&s) = batch.subjects.iter().find(|s| **s >= cfg.subjects) {
        return Err(LblmError::SubjectRange {
            subject: s,
            count: cfg.subjects,
        });
    }
    if batch.patches.cols != cfg.patch_len {
        return Err(LblmError::shape(format!(
            "patch width {} != patch_len {}",
            batch.patches.cols, cfg.patch_len
        )));
    }
    let x = g.constant(batch.patches.clone());
    let mut tok = p.linear(g, "embed.proj", x);
    if let Some(m) = mask {
        if m.len() != batch.rows() {
            return Err(LblmError::shape("mask length differs from token rows"));
        }
        let mt = p.get(g, "embed.mask_token");
        tok = g.replace_rows(tok, mt, m.to_vec());
    }
    let pe = positional_table(n, cfg.d);
    let mut tiled = Tensor::zeros(batch.rows(), cfg.d);
    for s in 0..batch.layout.nseq {
        tiled.data[s * n * cfg.d..(s + 1) * n * cfg.d].copy_from_slice(&pe.data);
    }
    let pe = g.constant(tiled);
    let tok = g.add(tok, pe);
    let idx: Vec<usize> = (0..batch.rows())
        .map(|r| batch.subjects[r / (batch.channels * n)])
        .collect();
    let table = p.get(g, "embed.subject");
    let se = g.gather_rows(table, idx);
    Ok(g.mul(tok, se))
}

fn half_ffn(g: &mut Graph, cfg: &ModelConfig, p: &Params, name: &str, x: Var) -> Var {
    let h = p.ln(g, &format!("{name}.ln"), x, cfg.ln_eps);
    let h = p.linear(g, &format!("{name}.l1"), h);
    let h = g.swish(h);
    let h = p.linear(g, &format!("{name}.l2"), h);
    let h = g.scale(h, 0.5);
    g.add(x, h)
}

pub fn mhsa(g: &mut Graph, cfg: &ModelConfig, p: &Params, name: &str, x: Var, layout: SeqLayout, causal: bool) -> Var {
    let q = p.linear(g, &format!("{name}.q"), x);
    let k = p.linear(g, &format!("{name}.k"), x);
    let v = p.linear(g, &format!("{name}.v"), x);
    let a = g.attention(q, k, v, layout, cfg.heads, causal);
    p.linear(g, &format!("{name}.o"), a)
}

pub fn conv_module(g: &mut Graph, p: &Params, name: &str, x: Var, layout: SeqLayout, causal: bool) -> Var {
    let h = p.linear(g, &format!("{name}.pw1"), x);
    let h = g.glu(h);
    let w = p.get(g, &format!("{name}.dw.w"));
    let b = p.get(g, &format!("{name}.dw.b"));
    let pad = if causal { Padding::Causal } else { Padding::Same };
    let h = g.depthwise_conv(h, w, b, layout, pad);
    let h = g.swish(h);
    p.linear(g, &format!("{name}.pw2"), h)
}

/// Returns `(output, inner, gate)` of one block.
pub fn block(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &Params,
    l: usize,
    prev: Var,
    layout: SeqLayout,
    opts: &ForwardOptions,
) -> (Var, Var, Option<Var>) {
    let b = format!("block{l}");
    let mut x = half_ffn(g, cfg, p, &format!("{b}.ff1"), prev);
    let h = p.ln(g, &format!("{b}.mhsa.ln"), x, cfg.ln_eps);
    let h = mhsa(g, cfg, p, &format!("{b}.mhsa"), h, layout, opts.causal);
    x = g.add(x, h);
    if cfg.backbone_kind.has_conv() {
        let h = p.ln(g, &format!("{b}.conv.ln"), x, cfg.ln_eps);
        let h = conv_module(g, p, &format!("{b}.conv"), h, layout, opts.causal);
        x = g.add(x, h);
    }
    x = half_ffn(g, cfg, p, &format!("{b}.ff2"), x);
    let inner = p.ln(g, &format!("{b}.ln_out"), x, cfg.ln_eps);
    if !cfg.backbone_kind.has_gate() {
        return (inner, inner, None);
    }
    let gate = match opts.gate_override {
        Some(v) => g.constant(Tensor::filled(layout.rows(), 1, v)),
        None => {
            let z = p.linear(g, &format!("{b}.gate.zc"), prev);
            let z = p.linear(g, &format!("{b}.gate.ff"), z);
            g.sigmoid(z)
        }
    };
    (g.gate_mix(gate, inner, prev), inner, Some(gate))
}

pub fn forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    store: &ParamStore,
    batch: &TokenBatch,
    opts: &ForwardOptions,
) -> Result<ForwardTrace> {
    let p = Params { store };
    let mut x = embed(g, cfg, &p, batch, opts.mask.as_deref())?;
    let mut gates = Vec::new();
    let mut block_inputs = Vec::new();
    let mut block_inners = Vec::new();
    for l in 0..cfg.layers {
        block_inputs.push(x);
        let (y, inner, gate) = block(g, cfg, &p, l, x, batch.layout, opts);
        block_inners.push(inner);
        gates.extend(gate);
        x = y;
    }
    Ok(ForwardTrace {
        features: x,
        gates,
        block_inputs,
        block_inners,
    })
}

/// Token-wise wave, amplitude and phase heads; phase confined by `pi * tanh`.
pub fn heads(g: &mut Graph, store: &ParamStore, features: Var) -> HeadOut {
    let p = Params { store };
    let wave = p.linear(g, "head.wave", features);
    let amp = p.linear(g, "head.amp", features);
    let ph = p.linear(g, "head.phase", features);
    let ph = g.tanh(ph);
    let phase = g.scale(ph, PI);
    HeadOut { wave, amp, phase }
}

/// Backbone configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Lblm {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Lblm {
    pub fn new<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Lblm> {
        let params = init_params(&cfg, rng)?;
        Ok(Lblm { cfg, params })
    }

    pub fn forward(&self, g: &mut Graph, batch: &TokenBatch, opts: &ForwardOptions) -> Result<ForwardTrace> {
        forward(g, &self.cfg, &self.params, batch, opts)
    }

    pub fn heads(&self, g: &mut Graph, features: Var) -> HeadOut {
        heads(g, &self.params, features)
    }

    /// Features reshaped to `channels x n x d` per segment.
    pub fn features(&self, batch: &TokenBatch, causal: bool) -> Result<Vec<Vec<Vec<Vec<f64>>>>> {
        let mut g = Graph::new();
        let opts = ForwardOptions {
            causal,
            ..Default::default()
        };
        let tr = self.forward(&mut g, batch, &opts)?;
        let f = g.value(tr.features);
        let (c, n) = (batch.channels, batch.n());
        Ok((0..batch.nseg())
            .map(|s| {
                (0..c)
                    .map(|ch| (0..n).map(|i| f.row((s * c + ch) * n + i).to_vec()).collect())
                    .collect()
            })
            .collect())
    }
}
