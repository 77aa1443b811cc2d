//! Tubelet tokenizer, transformer encoder, forecasting decoder and classifier.

pub mod checkpoint;
pub mod posenc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{config_err, contract_err, Result};
use crate::masker::{extract_tubelets, GridShape, MaskConfig, MaskSelection, TokenPos, TokenSequence};
use crate::video::Clip;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderVariant {
    /// Forecast equals the pooled present features.
    Identity,
    /// Present tokens plus learned MASK slots through full-attention blocks.
    Direct,
    /// Causal blocks unrolled one future step at a time.
    Autoregressive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassifierMode {
    Shared,
    Separate,
}

/// Which classification path a head serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Pred,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature width F.
    pub dim: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub decoder: DecoderVariant,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub patch: usize,
    pub tubelet: usize,
    /// Frames per half-clip T.
    pub clip_len: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub classifier: ClassifierMode,
    pub mlp_ratio: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            enc_layers: 2,
            enc_heads: 2,
            decoder: DecoderVariant::Direct,
            dec_layers: 4,
            dec_heads: 2,
            patch: 8,
            tubelet: 2,
            clip_len: 8,
            frame_height: 32,
            frame_width: 32,
            channels: 1,
            num_classes: 9,
            classifier: ClassifierMode::Shared,
            mlp_ratio: 4,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 6 || !self.dim.is_multiple_of(2) {
            return Err(config_err(format!("feature width {} must be even and at least 6", self.dim)));
        }
        if self.enc_heads == 0 || !self.dim.is_multiple_of(self.enc_heads) {
            return Err(config_err("feature width must be divisible by the encoder head count"));
        }
        if self.decoder != DecoderVariant::Identity {
            if self.dec_layers == 0 {
                return Err(config_err("a non-identity decoder needs at least one layer"));
            }
            if self.dec_heads == 0 || !self.dim.is_multiple_of(self.dec_heads) {
                return Err(config_err("feature width must be divisible by the decoder head count"));
            }
        }
        if self.num_classes < 2 || self.mlp_ratio == 0 {
            return Err(config_err("need at least two classes and a positive MLP ratio"));
        }
        self.grid()?;
        Ok(())
    }

    pub fn mask_geometry(&self, k: f64) -> MaskConfig {
        MaskConfig { patch: self.patch, tubelet: self.tubelet, k }
    }

    /// Tubelet grid of one half-clip.
    pub fn grid(&self) -> Result<GridShape> {
        self.mask_geometry(0.0).grid(self.clip_len, self.frame_height, self.frame_width)
    }

    /// Time steps per half-clip, `T / d`.
    pub fn steps(&self) -> usize {
        self.clip_len / self.tubelet
    }

    /// Unmasked tokens per half-clip, `T·H·W / (p²·d)`.
    pub fn tokens_per_clip(&self) -> usize {
        self.clip_len * self.frame_height * self.frame_width / (self.patch * self.patch * self.tubelet)
    }

    pub fn tubelet_dim(&self) -> usize {
        self.tubelet * self.patch * self.patch * self.channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct BlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct HeadParams {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    patch_w: ParamId,
    patch_b: ParamId,
    encoder: Vec<BlockParams>,
    enc_norm: (ParamId, ParamId),
    mask_token: ParamId,
    decoder: Vec<BlockParams>,
    dec_norm: Option<(ParamId, ParamId)>,
    pred_head: HeadParams,
    oracle_head: HeadParams,
}

/// Encoder output aligned one-to-one with input token positions.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub features: Array2<f64>,
    pub positions: Vec<TokenPos>,
}

/// One feature row per time step.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledSequence {
    pub tokens: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Logits(pub Vec<f64>);

impl Logits {
    /// Index of the largest score; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Graph handles produced by the prediction path.
#[derive(Clone, Copy, Debug)]
pub struct PredVars {
    pub logits: Var,
    /// `T/d × F` forecast.
    pub forecast: Var,
}

/// Graph handles produced by the oracle path.
#[derive(Clone, Copy, Debug)]
pub struct OracleVars {
    pub logits: Var,
    /// `2T/d × F` pooled features of the whole sampled clip.
    pub pooled: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

fn trunc_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

/// Glorot/Xavier uniform, as used for the tubelet projection.
fn xavier_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
}

fn add_block(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, f: usize, hidden: usize) -> BlockParams {
    let mut p = |name: &str, v: Array2<f64>| store.add(format!("{prefix}.{name}"), v);
    BlockParams {
        ln1_g: p("ln1.gain", Array2::ones((1, f))),
        ln1_b: p("ln1.bias", Array2::zeros((1, f))),
        qkv_w: p("attn.qkv.weight", trunc_normal(rng, f, 3 * f, 0.02)),
        qkv_b: p("attn.qkv.bias", Array2::zeros((1, 3 * f))),
        out_w: p("attn.out.weight", trunc_normal(rng, f, f, 0.02)),
        out_b: p("attn.out.bias", Array2::zeros((1, f))),
        ln2_g: p("ln2.gain", Array2::ones((1, f))),
        ln2_b: p("ln2.bias", Array2::zeros((1, f))),
        fc1_w: p("mlp.fc1.weight", trunc_normal(rng, f, hidden, 0.02)),
        fc1_b: p("mlp.fc1.bias", Array2::zeros((1, hidden))),
        fc2_w: p("mlp.fc2.weight", trunc_normal(rng, hidden, f, 0.02)),
        fc2_b: p("mlp.fc2.bias", Array2::zeros((1, f))),
    }
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let f = cfg.dim;
        let hidden = cfg.mlp_ratio * f;
        let patch_w = store.add("patch_embed.weight", xavier_uniform(&mut rng, cfg.tubelet_dim(), f));
        let patch_b = store.add("patch_embed.bias", Array2::zeros((1, f)));
        let encoder = (0..cfg.enc_layers)
            .map(|l| add_block(&mut store, &mut rng, &format!("encoder.{l}"), f, hidden))
            .collect();
        let enc_norm = (
            store.add("encoder.norm.gain", Array2::ones((1, f))),
            store.add("encoder.norm.bias", Array2::zeros((1, f))),
        );
        let mask_token = store.add("decoder.mask_token", Array2::zeros((1, f)));
        let (decoder, dec_norm) = if cfg.decoder == DecoderVariant::Identity {
            (Vec::new(), None)
        } else {
            let blocks = (0..cfg.dec_layers)
                .map(|l| add_block(&mut store, &mut rng, &format!("decoder.{l}"), f, hidden))
                .collect();
            let norm = (
                store.add("decoder.norm.gain", Array2::ones((1, f))),
                store.add("decoder.norm.bias", Array2::zeros((1, f))),
            );
            (blocks, Some(norm))
        };
        let c = cfg.num_classes;
        let pred_head = HeadParams {
            w: store.add("head.weight", Array2::zeros((f, c))),
            b: store.add("head.bias", Array2::zeros((1, c))),
        };
        let oracle_head = match cfg.classifier {
            ClassifierMode::Shared => pred_head,
            ClassifierMode::Separate => HeadParams {
                w: store.add("oracle_head.weight", Array2::zeros((f, c))),
                b: store.add("oracle_head.bias", Array2::zeros((1, c))),
            },
        };
        let layout = Layout {
            patch_w,
            patch_b,
            encoder,
            enc_norm,
            mask_token,
            decoder,
            dec_norm,
            pred_head,
            oracle_head,
        };
        Ok(Self { cfg, params: store, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Adds independent `N(0, std²)` noise to every parameter entry.
    pub fn perturb(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("valid std");
        for id in self.params.ids().collect::<Vec<_>>() {
            self.params.get_mut(id).mapv_inplace(|v| v + normal.sample(&mut rng));
        }
    }

    /// Parameter ids of the classifier serving `head`, as `(weight, bias)`.
    pub fn head_params(&self, head: Head) -> (ParamId, ParamId) {
        let h = match head {
            Head::Pred => self.layout.pred_head,
            Head::Oracle => self.layout.oracle_head,
        };
        (h.w, h.b)
    }

    pub fn mask_token(&self) -> ParamId {
        self.layout.mask_token
    }

    fn check_clip(&self, clip: &Clip) -> Result<()> {
        let c = &self.cfg;
        if (clip.frames(), clip.height(), clip.width(), clip.channels())
            != (c.clip_len, c.frame_height, c.frame_width, c.channels)
        {
            return Err(config_err(format!(
                "clip {}x{}x{}x{} does not match model geometry {}x{}x{}x{}",
                clip.frames(),
                clip.height(),
                clip.width(),
                clip.channels(),
                c.clip_len,
                c.frame_height,
                c.frame_width,
                c.channels
            )));
        }
        Ok(())
    }

    /// Embeds the retained tubelets of `clip` and adds position encodings. Time
    /// indices are shifted by `time_offset` (used for the unobserved half).
    pub fn embed(
        &self,
        tape: &mut Tape,
        clip: &Clip,
        sel: &MaskSelection,
        time_offset: usize,
    ) -> Result<(Var, Vec<TokenPos>)> {
        self.check_clip(clip)?;
        let geometry = self.cfg.mask_geometry(0.0);
        let tubelets = extract_tubelets(clip, &geometry)?;
        if sel.shape != tubelets.shape {
            return Err(contract_err(format!(
                "mask grid {:?} does not match tubelet grid {:?}",
                sel.shape, tubelets.shape
            )));
        }
        let positions = sel.retained_positions();
        if positions.is_empty() {
            return Err(contract_err("mask retains no tubelets"));
        }
        let dim = tubelets.dim;
        let f = self.cfg.dim;
        let mut patches = Array2::zeros((positions.len(), dim));
        let mut pos_enc = Array2::zeros((positions.len(), f));
        let mut shifted = Vec::with_capacity(positions.len());
        for (r, p) in positions.iter().enumerate() {
            for (o, &v) in patches.row_mut(r).iter_mut().zip(tubelets.tubelet(p.t, p.i, p.j)) {
                *o = v as f64 / 127.5 - 1.0;
            }
            let global = TokenPos { t: p.t + time_offset, ..*p };
            posenc::token_encoding(global, f, pos_enc.row_mut(r).as_slice_mut().unwrap());
            shifted.push(global);
        }
        let x = tape.leaf(patches);
        let w = tape.param(self.layout.patch_w);
        let b = tape.param(self.layout.patch_b);
        let e = tape.matmul(x, w);
        let e = tape.add_row(e, b);
        let pe = tape.leaf(pos_enc);
        Ok((tape.add(e, pe), shifted))
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: ParamId, b: ParamId) -> Var {
        let wv = tape.param(w);
        let bv = tape.param(b);
        let y = tape.matmul(x, wv);
        tape.add_row(y, bv)
    }

    fn norm(&self, tape: &mut Tape, x: Var, (g, b): (ParamId, ParamId)) -> Var {
        let gv = tape.param(g);
        let bv = tape.param(b);
        tape.layer_norm(x, gv, bv)
    }

    fn attention(&self, tape: &mut Tape, x: Var, bp: &BlockParams, heads: usize, causal: bool) -> Var {
        let f = self.cfg.dim;
        let hd = f / heads;
        let qkv = self.linear(tape, x, bp.qkv_w, bp.qkv_b);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = tape.slice_cols(qkv, h * hd, hd);
            let k = tape.slice_cols(qkv, f + h * hd, hd);
            let v = tape.slice_cols(qkv, 2 * f + h * hd, hd);
            let scores = tape.matmul_bt(q, k);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores, causal);
            outs.push(tape.matmul(attn, v));
        }
        let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
        self.linear(tape, merged, bp.out_w, bp.out_b)
    }

    /// Pre-norm residual block.
    fn block(&self, tape: &mut Tape, x: Var, bp: &BlockParams, heads: usize, causal: bool) -> Var {
        let h = self.norm(tape, x, (bp.ln1_g, bp.ln1_b));
        let a = self.attention(tape, h, bp, heads, causal);
        let x = tape.add(x, a);
        let h = self.norm(tape, x, (bp.ln2_g, bp.ln2_b));
        let h = self.linear(tape, h, bp.fc1_w, bp.fc1_b);
        let h = tape.gelu(h);
        let h = self.linear(tape, h, bp.fc2_w, bp.fc2_b);
        tape.add(x, h)
    }

    /// Full-attention encoder with final normalization.
    pub fn encode_vars(&self, tape: &mut Tape, tokens: Var) -> Var {
        let mut x = tokens;
        for bp in &self.layout.encoder {
            x = self.block(tape, x, bp, self.cfg.enc_heads, false);
        }
        self.norm(tape, x, self.layout.enc_norm)
    }

    /// Mean token per time step; a step without tokens takes the mean of all tokens.
    pub fn pool_spatial_vars(&self, tape: &mut Tape, features: Var, positions: &[TokenPos], steps: usize) -> Var {
        tape.group_mean(features, spatial_groups(positions, steps))
    }

    fn decoder_positions(&self, from: usize, to: usize) -> Array2<f64> {
        let f = self.cfg.dim;
        let mut out = Array2::zeros((to - from, f));
        for (r, t) in (from..to).enumerate() {
            posenc::sincos_1d(t as f64, f, out.row_mut(r).as_slice_mut().unwrap());
        }
        out
    }

    /// Decoder blocks plus final normalization; a no-op for the identity decoder.
    pub(crate) fn decoder_blocks(&self, tape: &mut Tape, x: Var, causal: bool) -> Var {
        let Some(norm) = self.layout.dec_norm else { return x };
        let mut x = x;
        for bp in &self.layout.decoder {
            x = self.block(tape, x, bp, self.cfg.dec_heads, causal);
        }
        self.norm(tape, x, norm)
    }

    /// Maps `L` pooled present tokens to `L` forecast tokens.
    pub fn decode_vars(&self, tape: &mut Tape, present: Var) -> Var {
        let steps = tape.shape(present).0;
        match self.cfg.decoder {
            DecoderVariant::Identity => present,
            DecoderVariant::Direct => {
                let pe = tape.leaf(self.decoder_positions(0, steps));
                let present = tape.add(present, pe);
                let mask = tape.param(self.layout.mask_token);
                let slots = tape.repeat_row(mask, steps);
                let fe = tape.leaf(self.decoder_positions(steps, 2 * steps));
                let slots = tape.add(slots, fe);
                let x = tape.concat_rows(&[present, slots]);
                let x = self.decoder_blocks(tape, x, false);
                tape.gather_rows(x, (steps..2 * steps).collect())
            }
            DecoderVariant::Autoregressive => {
                let pe = tape.leaf(self.decoder_positions(0, steps));
                let mut seq = tape.add(present, pe);
                let mut forecast = Vec::with_capacity(steps);
                for s in 0..steps {
                    let x = self.decoder_blocks(tape, seq, true);
                    let last = tape.shape(x).0 - 1;
                    let next = tape.gather_rows(x, vec![last]);
                    forecast.push(next);
                    if s + 1 < steps {
                        let pos = tape.leaf(self.decoder_positions(steps + s, steps + s + 1));
                        let fed = tape.add(next, pos);
                        seq = tape.concat_rows(&[seq, fed]);
                    }
                }
                tape.concat_rows(&forecast)
            }
        }
    }

    /// Temporal mean followed by the affine classifier for `head`.
    pub fn classify_vars(&self, tape: &mut Tape, tokens: Var, head: Head) -> Var {
        let pooled = tape.mean_rows(tokens);
        let (w, b) = self.head_params(head);
        self.linear(tape, pooled, w, b)
    }

    /// Early prediction from the observed clip only.
    pub fn forward_pred(&self, tape: &mut Tape, observed: &Clip, sel: &MaskSelection) -> Result<PredVars> {
        let (tokens, positions) = self.embed(tape, observed, sel, 0)?;
        let features = self.encode_vars(tape, tokens);
        let present = self.pool_spatial_vars(tape, features, &positions, self.cfg.steps());
        let forecast = self.decode_vars(tape, present);
        let logits = self.classify_vars(tape, forecast, Head::Pred);
        Ok(PredVars { logits, forecast })
    }

    /// Classification of the whole sampled clip; both halves are masked separately
    /// and the decoder is bypassed.
    pub fn forward_oracle(
        &self,
        tape: &mut Tape,
        observed: &Clip,
        sel_observed: &MaskSelection,
        unobserved: &Clip,
        sel_unobserved: &MaskSelection,
    ) -> Result<OracleVars> {
        let steps = self.cfg.steps();
        let (to, mut positions) = self.embed(tape, observed, sel_observed, 0)?;
        let (tu, pu) = self.embed(tape, unobserved, sel_unobserved, steps)?;
        positions.extend(pu);
        let tokens = tape.concat_rows(&[to, tu]);
        let features = self.encode_vars(tape, tokens);
        let pooled = self.pool_spatial_vars(tape, features, &positions, 2 * steps);
        let logits = self.classify_vars(tape, pooled, Head::Oracle);
        Ok(OracleVars { logits, pooled })
    }

    /// Inference: class scores from an observed clip. The observation ratio is
    /// deliberately not an input.
    pub fn predict(&self, clip: &Clip, sel: &MaskSelection) -> Result<Logits> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward_pred(&mut tape, clip, sel)?;
        Ok(Logits(tape.value(out.logits).iter().copied().collect()))
    }

    /// Tokenizer output without the graph.
    pub fn tokenize(&self, clip: &Clip, sel: &MaskSelection) -> Result<TokenSequence> {
        let mut tape = Tape::new(&self.params);
        let (v, positions) = self.embed(&mut tape, clip, sel, 0)?;
        Ok(TokenSequence { embeddings: tape.value(v).to_owned(), positions })
    }

    pub fn encode(&self, tokens: &TokenSequence) -> FeatureGrid {
        let mut tape = Tape::new(&self.params);
        let x = tape.leaf(tokens.embeddings.clone());
        let e = self.encode_vars(&mut tape, x);
        FeatureGrid { features: tape.value(e).to_owned(), positions: tokens.positions.clone() }
    }

    /// Spatial pooling of a feature grid from a clip of `clip_len` frames.
    pub fn pool_spatial(&self, grid: &FeatureGrid, clip_len: usize) -> PooledSequence {
        let steps = clip_len / self.cfg.tubelet;
        let mut tape = Tape::new(&self.params);
        let x = tape.leaf(grid.features.clone());
        let p = self.pool_spatial_vars(&mut tape, x, &grid.positions, steps);
        PooledSequence { tokens: tape.value(p).to_owned() }
    }

    pub fn decode(&self, present: &PooledSequence) -> Result<PooledSequence> {
        if present.tokens.nrows() != self.cfg.steps() {
            return Err(contract_err(format!(
                "decoder expects {} present tokens, got {}",
                self.cfg.steps(),
                present.tokens.nrows()
            )));
        }
        let mut tape = Tape::new(&self.params);
        let x = tape.leaf(present.tokens.clone());
        let y = self.decode_vars(&mut tape, x);
        Ok(PooledSequence { tokens: tape.value(y).to_owned() })
    }

    pub fn classify(&self, tokens: &PooledSequence, head: Head) -> Logits {
        let mut tape = Tape::new(&self.params);
        let x = tape.leaf(tokens.tokens.clone());
        let y = self.classify_vars(&mut tape, x, head);
        Logits(tape.value(y).iter().copied().collect())
    }
}

/// Row groups for spatial pooling: one group per time step, falling back to all rows.
pub fn spatial_groups(positions: &[TokenPos], steps: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); steps];
    for (r, p) in positions.iter().enumerate() {
        if p.t < steps {
            groups[p.t].push(r);
        }
    }
    let all: Vec<usize> = (0..positions.len()).collect();
    for g in &mut groups {
        if g.is_empty() {
            g.clone_from(&all);
        }
    }
    groups
}

#[cfg(test)]
mod tests;
