//! Single-model evaluation across observation ratios with prefix-only frame
//! access, metrics persistence, and arm comparisons.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{config_err, Error, Result};
use crate::masker::{select, MaskKind, MaskSelection};
use crate::model::{Logits, Model, ModelConfig};
use crate::sampler::{build_inference_clip, ObservationRatio, SamplingConfig, SamplingMode};
use crate::trainer::{sample_rng, train, TrainConfig};
use crate::video::{Clip, LabeledVideo, PrefixGuard};

/// Anything that maps an observed clip to class scores. The observation ratio
/// is not part of the interface.
pub trait ClipClassifier: Sync {
    fn clip_len(&self) -> usize;
    fn classify_clip(&self, clip: &Clip, sel: &MaskSelection) -> Result<Logits>;
    /// Tubelet grid geometry `(patch, tubelet)` used to build masks.
    fn mask_geometry(&self) -> (usize, usize);
}

impl ClipClassifier for Model {
    fn clip_len(&self) -> usize {
        self.config().clip_len
    }

    fn classify_clip(&self, clip: &Clip, sel: &MaskSelection) -> Result<Logits> {
        self.predict(clip, sel)
    }

    fn mask_geometry(&self) -> (usize, usize) {
        (self.config().patch, self.config().tubelet)
    }
}

/// Masking applied at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMask {
    pub kind: MaskKind,
    pub k: f64,
    /// Seeds random masking; unused otherwise.
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub rho: f64,
    pub top1: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMeta {
    pub config_hash: String,
    pub seed: u64,
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    pub meta: RunMeta,
}

pub const METRICS_HEADER: &str = "rho,top1,n";

/// Shortest decimal rendering of a grid ratio, e.g. `0.1`, `0.25`.
pub fn format_rho(rho: f64) -> String {
    let s = format!("{:.6}", rho);
    let s = s.trim_end_matches('0');
    s.strip_suffix('.').unwrap_or(s).to_string()
}

impl MetricsTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.6},{}", format_rho(r.rho), r.top1, r.n);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(config_err(format!("metrics file must start with '{METRICS_HEADER}'")));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = || config_err(format!("malformed metrics row {}: '{line}'", i + 2));
            if f.len() != 3 {
                return Err(bad());
            }
            rows.push(MetricsRow {
                rho: f[0].parse().map_err(|_| bad())?,
                top1: f[1].parse().map_err(|_| bad())?,
                n: f[2].parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { rows, meta: RunMeta::default() })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }

    pub fn top1_at(&self, rho: f64) -> Option<f64> {
        self.rows.iter().find(|r| (r.rho - rho).abs() < 1e-9).map(|r| r.top1)
    }

    pub fn mean_top1(&self) -> f64 {
        self.rows.iter().map(|r| r.top1).sum::<f64>() / self.rows.len().max(1) as f64
    }
}

/// Frame-access record of one ratio of an evaluation sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AccessRecord {
    pub rho: f64,
    /// Visible prefix length `floor(rho · T_d)` (per video; the maximum over the set).
    pub limit: usize,
    pub reads: u64,
    pub violations: u64,
    /// Largest `max_read - limit` over videos; negative when every read was inside the prefix.
    pub worst_margin: i64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccessAudit {
    pub records: Vec<AccessRecord>,
}

impl AccessAudit {
    pub fn violations(&self) -> u64 {
        self.records.iter().map(|r| r.violations).sum()
    }

    pub fn reads(&self) -> u64 {
        self.records.iter().map(|r| r.reads).sum()
    }
}

struct VideoOutcome {
    correct: bool,
    reads: u64,
    violations: u64,
    margin: i64,
}

/// Top-1 accuracy per ratio. Every clip is built through a [`PrefixGuard`];
/// a read past the visible prefix aborts the evaluation.
pub fn evaluate<C: ClipClassifier + ?Sized>(
    model: &C,
    dataset: &[LabeledVideo],
    rho_grid: &[f64],
    mask: EvalMask,
) -> Result<(MetricsTable, AccessAudit)> {
    if dataset.is_empty() {
        return Err(config_err("evaluation set is empty"));
    }
    let (patch, tubelet) = model.mask_geometry();
    let geometry = crate::masker::MaskConfig { patch, tubelet, k: mask.k };
    geometry.validate()?;
    let sampling = SamplingConfig { clip_len: model.clip_len(), mode: SamplingMode::Randomized, rho_grid: vec![0.5] };
    let mut rows = Vec::with_capacity(rho_grid.len());
    let mut audit = AccessAudit::default();
    for (ri, &rho_v) in rho_grid.iter().enumerate() {
        let rho = ObservationRatio::new(rho_v)?;
        let outcomes = dataset
            .par_iter()
            .enumerate()
            .map(|(i, v)| {
                let limit = rho.visible_frames(v.video.frames());
                let guard = PrefixGuard::new(&v.video, limit);
                let clip = build_inference_clip(&guard, rho, &sampling)?;
                let mut rng = sample_rng(mask.seed, ri, i);
                let sel = select(mask.kind, &clip, &geometry, &mut rng)?;
                let logits = model.classify_clip(&clip, &sel)?;
                Ok(VideoOutcome {
                    correct: logits.argmax() == v.label as usize,
                    reads: guard.reads(),
                    violations: guard.violations(),
                    margin: guard.max_read().map_or(-(limit as i64), |m| m as i64 - limit as i64),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let correct = outcomes.iter().filter(|o| o.correct).count();
        let violations: u64 = outcomes.iter().map(|o| o.violations).sum();
        let limit = dataset.iter().map(|v| rho.visible_frames(v.video.frames())).max().unwrap_or(0);
        audit.records.push(AccessRecord {
            rho: rho_v,
            limit,
            reads: outcomes.iter().map(|o| o.reads).sum(),
            violations,
            worst_margin: outcomes.iter().map(|o| o.margin).max().unwrap_or(-1),
        });
        if violations > 0 {
            return Err(Error::Leakage { frame: limit, limit });
        }
        rows.push(MetricsRow { rho: rho_v, top1: correct as f64 / dataset.len() as f64, n: dataset.len() });
    }
    Ok((MetricsTable { rows, meta: RunMeta::default() }, audit))
}

/// Analytic per-example operation count of one training forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopReport {
    /// Retained tokens per half-clip entering the encoder.
    pub tokens: usize,
    pub attention_flops: u64,
    pub projection_flops: u64,
    pub total_flops: u64,
    /// Largest token count processed by any single encoder pass.
    pub peak_tokens: usize,
}

impl FlopReport {
    pub fn to_text(&self) -> String {
        format!(
            "tokens={}\nattention_flops={}\nprojection_flops={}\ntotal_flops={}\npeak_tokens={}\n",
            self.tokens, self.attention_flops, self.projection_flops, self.total_flops, self.peak_tokens
        )
    }
}

/// `(attention, projection)` operations of one transformer block on `n` tokens.
pub fn block_flops(n: u64, f: u64, mlp_ratio: u64) -> (u64, u64) {
    let attention = 4 * n * n * f;
    let projection = 4 * n * f * f + 2 * n * f * (mlp_ratio * f) * 2;
    (attention, projection)
}

/// Counts encoder, decoder and (optionally) oracle-pass operations for masking ratio `k`.
pub fn count_flops(cfg: &ModelConfig, mask_k: f64, include_oracle: bool) -> Result<FlopReport> {
    cfg.validate()?;
    let geometry = cfg.mask_geometry(mask_k);
    geometry.validate()?;
    let grid = cfg.grid()?;
    let tokens = geometry.kept_per_column(grid.steps)? * grid.rows * grid.cols;
    Ok(count_flops_for_tokens(cfg, tokens, include_oracle))
}

/// Operation count with an explicit per-half token count `n`.
pub fn count_flops_for_tokens(cfg: &ModelConfig, n: usize, include_oracle: bool) -> FlopReport {
    let f = cfg.dim as u64;
    let r = cfg.mlp_ratio as u64;
    let (mut att, mut proj) = (0u64, 0u64);
    let mut add = |tokens: usize, layers: usize| {
        if tokens == 0 {
            return;
        }
        let (a, p) = block_flops(tokens as u64, f, r);
        att += a * layers as u64;
        proj += p * layers as u64;
    };
    add(n, cfg.enc_layers);
    let steps = cfg.steps();
    if n > 0 {
        match cfg.decoder {
            crate::model::DecoderVariant::Identity => {}
            crate::model::DecoderVariant::Direct => add(2 * steps, cfg.dec_layers),
            crate::model::DecoderVariant::Autoregressive => {
                for s in 0..steps {
                    add(steps + s, cfg.dec_layers);
                }
            }
        }
    }
    let mut peak = n;
    if include_oracle {
        add(2 * n, cfg.enc_layers);
        peak = 2 * n;
    }
    FlopReport { tokens: n, attention_flops: att, projection_flops: proj, total_flops: att + proj, peak_tokens: peak }
}

/// One training recipe in a comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub name: String,
    pub train: TrainConfig,
}

impl Arm {
    /// Evaluation uses the arm's own training mask kind and ratio.
    pub fn eval_mask(&self) -> EvalMask {
        EvalMask { kind: self.train.mask_kind, k: self.train.mask_k, seed: self.train.seed ^ 0xe7a1 }
    }
}

/// Result of one arm trained with one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmRun {
    pub arm: String,
    pub seed: u64,
    pub metrics: MetricsTable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    pub rho_grid: Vec<f64>,
    pub runs: Vec<ArmRun>,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl ComparisonReport {
    pub fn arms(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.runs {
            if !names.contains(&r.arm) {
                names.push(r.arm.clone());
            }
        }
        names
    }

    fn runs_of<'a>(&'a self, arm: &'a str) -> impl Iterator<Item = &'a ArmRun> + 'a {
        self.runs.iter().filter(move |r| r.arm == arm)
    }

    /// Median over seeds of top-1 at `rho`.
    pub fn median_top1(&self, arm: &str, rho: f64) -> Option<f64> {
        let mut v: Vec<f64> = self.runs_of(arm).filter_map(|r| r.metrics.top1_at(rho)).collect();
        (!v.is_empty()).then(|| median(&mut v))
    }

    /// Median over seeds of the mean top-1 over the grid.
    pub fn median_mean_top1(&self, arm: &str) -> Option<f64> {
        let mut v: Vec<f64> = self.runs_of(arm).map(|r| r.metrics.mean_top1()).collect();
        (!v.is_empty()).then(|| median(&mut v))
    }

    /// Median over seeds of the per-seed paired difference `a - b` at `rho`.
    pub fn median_gap_at(&self, a: &str, b: &str, rho: f64) -> Option<f64> {
        let mut v = Vec::new();
        for ra in self.runs_of(a) {
            let rb = self.runs_of(b).find(|r| r.seed == ra.seed)?;
            v.push(ra.metrics.top1_at(rho)? - rb.metrics.top1_at(rho)?);
        }
        (!v.is_empty()).then(|| median(&mut v))
    }

    /// One row per arm and ratio: `arm,rho,median_top1,min_top1,max_top1`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,rho,median_top1,min_top1,max_top1\n");
        for arm in self.arms() {
            for &rho in &self.rho_grid {
                let v: Vec<f64> = self.runs_of(&arm).filter_map(|r| r.metrics.top1_at(rho)).collect();
                let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let med = median(&mut v.clone());
                let _ = writeln!(out, "{arm},{},{med:.6},{lo:.6},{hi:.6}", format_rho(rho));
            }
        }
        out
    }
}

/// Trains every arm with every seed and evaluates each model on `test` with
/// the arm's own masking. All arms must share the same budget.
pub fn compare_arms(
    arms: &[Arm],
    model_cfg: &ModelConfig,
    train_set: &[LabeledVideo],
    test_set: &[LabeledVideo],
    seeds: &[u64],
    rho_grid: &[f64],
    mut on_run: impl FnMut(&ArmRun),
) -> Result<ComparisonReport> {
    let Some(first) = arms.first() else { return Err(config_err("no arms to compare")) };
    let budget = |a: &Arm| (a.train.steps, a.train.batch_size);
    if let Some(a) = arms.iter().find(|a| budget(a) != budget(first)) {
        return Err(config_err(format!(
            "arm '{}' budget {:?} differs from arm '{}' budget {:?}",
            a.name,
            budget(a),
            first.name,
            budget(first)
        )));
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        for arm in arms {
            let arm = Arm { train: TrainConfig { seed, ..arm.train.clone() }, ..arm.clone() };
            let model = Model::new(ModelConfig { init_seed: seed, ..model_cfg.clone() })?;
            let (model, _) = train(model, &arm.train, train_set, None)?;
            let (metrics, _) = evaluate(&model, test_set, rho_grid, arm.eval_mask())?;
            let run = ArmRun { arm: arm.name.clone(), seed, metrics };
            on_run(&run);
            runs.push(run);
        }
    }
    Ok(ComparisonReport { rho_grid: rho_grid.to_vec(), runs })
}

/// Difference vs random masking at each ratio in `ks`.
pub fn masking_arms(base: &TrainConfig, ks: &[f64]) -> Vec<Arm> {
    let mut arms = Vec::new();
    for &k in ks {
        for kind in [MaskKind::Difference, MaskKind::Random] {
            arms.push(Arm {
                name: format!("{kind}-k{}", format_rho(k)),
                train: TrainConfig { mask_kind: kind, mask_k: k, ..base.clone() },
            });
        }
    }
    arms
}

/// Randomized-ratio training against fixed-ratio specialists.
pub fn sampling_arms(base: &TrainConfig, fixed: &[f64]) -> Result<Vec<Arm>> {
    let mut arms = vec![Arm {
        name: "east".into(),
        train: TrainConfig { sampling: SamplingConfig { mode: SamplingMode::Randomized, ..base.sampling.clone() }, ..base.clone() },
    }];
    for &rho in fixed {
        let mode = SamplingMode::Fixed(ObservationRatio::new(rho)?);
        arms.push(Arm {
            name: format!("fixed-{}", format_rho(rho)),
            train: TrainConfig { sampling: SamplingConfig { mode, ..base.sampling.clone() }, ..base.clone() },
        });
    }
    Ok(arms)
}

pub fn compare_masking(
    base: &TrainConfig,
    ks: &[f64],
    model_cfg: &ModelConfig,
    train_set: &[LabeledVideo],
    test_set: &[LabeledVideo],
    seeds: &[u64],
    rho_grid: &[f64],
) -> Result<ComparisonReport> {
    compare_arms(&masking_arms(base, ks), model_cfg, train_set, test_set, seeds, rho_grid, |_| {})
}

pub fn compare_sampling(
    base: &TrainConfig,
    fixed: &[f64],
    model_cfg: &ModelConfig,
    train_set: &[LabeledVideo],
    test_set: &[LabeledVideo],
    seeds: &[u64],
    rho_grid: &[f64],
) -> Result<ComparisonReport> {
    compare_arms(&sampling_arms(base, fixed)?, model_cfg, train_set, test_set, seeds, rho_grid, |_| {})
}
