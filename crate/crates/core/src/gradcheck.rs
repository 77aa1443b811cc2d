//! Finite-difference verification of the analytic gradients of the full loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape};
use crate::error::Result;
use crate::masker::MaskKind;
use crate::model::{ClassifierMode, DecoderVariant, Model, ModelConfig};
use crate::sampler::SamplingConfig;
use crate::trainer::{prepare_sample, sample_gradients, sample_loss, LossFlags, PreparedSample};
use crate::video::{generate_synthetic_dataset, SyntheticConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub decoder: DecoderVariant,
    pub classifier: ClassifierMode,
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Gradients with both estimates below this magnitude count as true zeros.
    pub zero_threshold: f64,
    /// Standard deviation of the noise added to the initialization so that
    /// zero-initialized heads and unit gains do not produce degenerate gradients.
    pub perturb_std: f64,
    pub batch: usize,
    pub seed: u64,
    pub flags: LossFlags,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            decoder: DecoderVariant::Direct,
            classifier: ClassifierMode::Shared,
            samples: 200,
            step: 1e-4,
            tolerance: 1e-4,
            zero_threshold: 1e-11,
            perturb_std: 0.2,
            batch: 2,
            seed: 0,
            flags: LossFlags { use_oracle: true, use_l2: true, l2_weight: 0.5 },
        }
    }
}

impl GradCheckConfig {
    /// F=8, one encoder and one decoder layer, T=4, H=W=8, p=4, d=2.
    pub fn tiny_model(&self) -> ModelConfig {
        ModelConfig {
            dim: 8,
            enc_layers: 1,
            enc_heads: 2,
            decoder: self.decoder,
            dec_layers: 1,
            dec_heads: 2,
            patch: 4,
            tubelet: 2,
            clip_len: 4,
            frame_height: 8,
            frame_width: 8,
            channels: 1,
            num_classes: 9,
            classifier: self.classifier,
            mlp_ratio: 2,
            init_seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    /// `None` for flagged zero gradients.
    pub rel_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub zero_flagged: usize,
    pub within_tolerance: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.entries.len() - self.zero_flagged
    }

    /// Fraction of non-zero gradients within tolerance.
    pub fn pass_fraction(&self) -> f64 {
        if self.checked() == 0 {
            return 1.0;
        }
        self.within_tolerance as f64 / self.checked() as f64
    }
}

fn total_loss(model: &Model, batch: &[PreparedSample], flags: LossFlags) -> Result<f64> {
    let mut sum = 0.0;
    for s in batch {
        let mut tape = Tape::new(model.params());
        let (v, _) = sample_loss(model, &mut tape, s, flags)?;
        sum += tape.scalar(v);
    }
    Ok(sum)
}

/// Samples `cfg.samples` parameter entries uniformly over all scalars and
/// compares analytic gradients against central differences.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mcfg = cfg.tiny_model();
    let mut model = Model::new(mcfg.clone())?;
    model.perturb(cfg.seed ^ 0xabcd, cfg.perturb_std);

    let data = generate_synthetic_dataset(&SyntheticConfig {
        frames: 16,
        height: 8,
        width: 8,
        sprite_size: 2,
        speed: 1,
        videos_per_class: 1,
        seed: cfg.seed,
        ..SyntheticConfig::default()
    })?;
    let sampling = SamplingConfig { clip_len: mcfg.clip_len, ..SamplingConfig::default() };
    let mask = mcfg.mask_geometry(0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = (0..cfg.batch)
        .map(|_| {
            let v = &data[rng.random_range(0..data.len())];
            prepare_sample(v, &sampling, MaskKind::Difference, &mask, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut analytic = crate::autodiff::Gradients::zeros_like(model.params());
    for s in &batch {
        analytic.accumulate(&sample_gradients(&model, s, cfg.flags)?.1);
    }

    let picks = pick_entries(model.params(), cfg.samples, &mut rng);
    let mut entries = Vec::with_capacity(picks.len());
    let (mut zero_flagged, mut within, mut max_rel) = (0, 0, 0.0f64);
    for (id, (r, c)) in picks {
        let a = analytic.get(id).map_or(0.0, |g| g[[r, c]]);
        let orig = model.params().get(id)[[r, c]];
        model.params_mut().get_mut(id)[[r, c]] = orig + cfg.step;
        let plus = total_loss(&model, &batch, cfg.flags)?;
        model.params_mut().get_mut(id)[[r, c]] = orig - cfg.step;
        let minus = total_loss(&model, &batch, cfg.flags)?;
        model.params_mut().get_mut(id)[[r, c]] = orig;
        let n = (plus - minus) / (2.0 * cfg.step);
        let scale = a.abs().max(n.abs());
        let rel_error = if scale < cfg.zero_threshold {
            zero_flagged += 1;
            None
        } else {
            let e = (a - n).abs() / scale;
            max_rel = max_rel.max(e);
            if e < cfg.tolerance {
                within += 1;
            }
            Some(e)
        };
        entries.push(GradCheckEntry {
            param: model.params().name(id).to_string(),
            index: (r, c),
            analytic: a,
            numeric: n,
            rel_error,
        });
    }
    Ok(GradCheckReport { entries, zero_flagged, within_tolerance: within, max_rel_error: max_rel, tolerance: cfg.tolerance })
}

fn pick_entries(store: &ParamStore, n: usize, rng: &mut ChaCha8Rng) -> Vec<(ParamId, (usize, usize))> {
    let total = store.scalar_count();
    let mut flat: Vec<usize> = rand::seq::index::sample(rng, total, n.min(total)).into_vec();
    flat.sort_unstable();
    let mut out = Vec::with_capacity(flat.len());
    let mut base = 0;
    let mut it = flat.into_iter().peekable();
    for id in store.ids() {
        let p = store.get(id);
        let len = p.len();
        while let Some(&k) = it.peek() {
            if k >= base + len {
                break;
            }
            let off = k - base;
            out.push((id, (off / p.ncols(), off % p.ncols())));
            it.next();
        }
        base += len;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_are_distinct_and_in_range() {
        let mut store = ParamStore::new();
        store.add("a", ndarray::Array2::zeros((3, 4)));
        store.add("b", ndarray::Array2::zeros((1, 5)));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let picks = pick_entries(&store, 17, &mut rng);
        assert_eq!(picks.len(), 17);
        let mut seen = std::collections::BTreeSet::new();
        for (id, (r, c)) in picks {
            let p = store.get(id);
            assert!(r < p.nrows() && c < p.ncols());
            assert!(seen.insert((id.0, r, c)));
        }
    }

    #[test]
    fn all_variants_pass() {
        for decoder in [DecoderVariant::Identity, DecoderVariant::Direct, DecoderVariant::Autoregressive] {
            for classifier in [ClassifierMode::Shared, ClassifierMode::Separate] {
                let cfg = GradCheckConfig { decoder, classifier, ..GradCheckConfig::default() };
                let r = grad_check(&cfg).unwrap();
                assert_eq!(r.entries.len(), 200);
                assert!(
                    r.pass_fraction() >= 0.95,
                    "{decoder:?}/{classifier:?}: {} of {} within tolerance, max {}",
                    r.within_tolerance,
                    r.checked(),
                    r.max_rel_error
                );
            }
        }
    }

    #[test]
    fn dead_mask_token_is_flagged_under_identity_decoder() {
        let cfg = GradCheckConfig { decoder: DecoderVariant::Identity, samples: 100_000, ..GradCheckConfig::default() };
        let r = grad_check(&cfg).unwrap();
        let mask: Vec<_> = r.entries.iter().filter(|e| e.param == "decoder.mask_token").collect();
        assert_eq!(mask.len(), 8);
        assert!(mask.iter().all(|e| e.rel_error.is_none() && e.analytic == 0.0));
    }

    #[test]
    fn report_is_deterministic() {
        let cfg = GradCheckConfig { samples: 30, ..GradCheckConfig::default() };
        assert_eq!(grad_check(&cfg).unwrap(), grad_check(&cfg).unwrap());
    }
}
