use super::*;
use crate::masker::{difference_mask, random_mask_for};
use rand::Rng;

fn toy_cfg() -> ModelConfig {
    ModelConfig {
        dim: 16,
        enc_layers: 1,
        enc_heads: 2,
        dec_layers: 1,
        dec_heads: 2,
        patch: 4,
        clip_len: 8,
        frame_height: 16,
        frame_width: 16,
        ..ModelConfig::default()
    }
}

fn random_clip(seed: u64, cfg: &ModelConfig) -> Clip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Clip::from_fn(cfg.clip_len, cfg.frame_height, cfg.frame_width, cfg.channels, |_, _, _, _| rng.random())
        .unwrap()
}

fn perturbed(cfg: ModelConfig) -> Model {
    let mut m = Model::new(cfg).unwrap();
    m.perturb(5, 0.1);
    m
}

fn close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) -> bool {
    a.dim() == b.dim() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn token_count_formula() {
    let big = ModelConfig { clip_len: 16, frame_height: 224, frame_width: 224, patch: 16, channels: 3, ..toy_cfg() };
    assert_eq!(big.tokens_per_clip(), 1568);
    let model = Model::new(big.clone()).unwrap();
    let clip = Clip::zeros(16, 224, 224, 3).unwrap();
    let all = MaskSelection::keep_all(big.grid().unwrap());
    assert_eq!(model.tokenize(&clip, &all).unwrap().len(), 1568);

    let small = ModelConfig { frame_height: 32, frame_width: 32, ..toy_cfg() };
    assert_eq!(small.tokens_per_clip(), 256);
    let model = Model::new(small.clone()).unwrap();
    let clip = random_clip(1, &small);
    let full = model.tokenize(&clip, &MaskSelection::keep_all(small.grid().unwrap())).unwrap();
    assert_eq!(full.len(), 256);
    let sel = difference_mask(&clip, &small.mask_geometry(0.5)).unwrap();
    let masked = model.tokenize(&clip, &sel).unwrap();
    assert_eq!(masked.len(), 128);
    for (r, p) in masked.positions.iter().enumerate() {
        let k = full.positions.iter().position(|q| q == p).unwrap();
        assert_eq!(masked.embeddings.row(r), full.embeddings.row(k));
    }
}

#[test]
fn geometry_mismatch_is_a_config_error() {
    let cfg = toy_cfg();
    let model = Model::new(cfg.clone()).unwrap();
    let clip = Clip::zeros(8, 12, 16, 1).unwrap();
    let sel = MaskSelection::keep_all(cfg.grid().unwrap());
    assert!(matches!(model.tokenize(&clip, &sel), Err(crate::Error::Config(_))));
}

#[test]
fn residual_identity_with_zero_output_projections() {
    let cfg = toy_cfg();
    let mut model = Model::new(cfg.clone()).unwrap();
    model.perturb(1, 0.1);
    for name in ["encoder.0.attn.out.weight", "encoder.0.attn.out.bias", "encoder.0.mlp.fc2.weight", "encoder.0.mlp.fc2.bias"] {
        let id = model.params().id(name).unwrap();
        model.params_mut().get_mut(id).fill(0.0);
    }
    let clip = random_clip(2, &cfg);
    let tokens = model.tokenize(&clip, &MaskSelection::keep_all(cfg.grid().unwrap())).unwrap();
    let out = model.encode(&tokens);
    // Only the final normalization remains.
    let (g, b) = (model.params().get(model.layout.enc_norm.0), model.params().get(model.layout.enc_norm.1));
    for (r, row) in tokens.embeddings.rows().into_iter().enumerate() {
        let mean = row.mean().unwrap();
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
        for c in 0..row.len() {
            let expected = (row[c] - mean) / (var + 1e-6).sqrt() * g[[0, c]] + b[[0, c]];
            assert!((out.features[[r, c]] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn encoder_is_permutation_equivariant() {
    let cfg = toy_cfg();
    let model = perturbed(cfg.clone());
    let clip = random_clip(3, &cfg);
    let sel = difference_mask(&clip, &cfg.mask_geometry(0.5)).unwrap();
    let tokens = model.tokenize(&clip, &sel).unwrap();
    assert_eq!(tokens.len(), 32);
    let out = model.encode(&tokens);
    assert_eq!(out.features.dim(), (32, 16));
    assert_eq!(out.positions, tokens.positions);

    let perm: Vec<usize> = (0..tokens.len()).rev().collect();
    let shuffled = TokenSequence {
        embeddings: tokens.embeddings.select(ndarray::Axis(0), &perm),
        positions: perm.iter().map(|&i| tokens.positions[i]).collect(),
    };
    let out2 = model.encode(&shuffled);
    assert!(close(&out2.features, &out.features.select(ndarray::Axis(0), &perm), 1e-12));
}

#[test]
fn spatial_pooling() {
    let model = Model::new(toy_cfg()).unwrap();
    let shape = GridShape { steps: 4, rows: 8, cols: 8 };
    let positions: Vec<TokenPos> = shape.positions().collect();
    let features = Array2::from_shape_fn((256, 16), |(r, c)| (positions[r].t * 10 + c) as f64);
    let pooled = model.pool_spatial(&FeatureGrid { features: features.clone(), positions: positions.clone() }, 8);
    for t in 0..4 {
        for c in 0..16 {
            assert!((pooled.tokens[[t, c]] - (t * 10 + c) as f64).abs() < 1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let sel = random_mask_for(shape, &MaskConfig { patch: 4, tubelet: 2, k: 0.5 }, &mut rng).unwrap();
    let seq = crate::masker::apply_mask(
        &TokenSequence { embeddings: Array2::from_shape_fn((256, 16), |_| rng.random()), positions },
        &sel,
    )
    .unwrap();
    let pooled = model.pool_spatial(&FeatureGrid { features: seq.embeddings.clone(), positions: seq.positions.clone() }, 8);
    for t in 0..4 {
        let rows: Vec<usize> = (0..seq.len()).filter(|&r| seq.positions[r].t == t).collect();
        assert!(!rows.is_empty());
        for c in 0..16 {
            let mean = rows.iter().map(|&r| seq.embeddings[[r, c]]).sum::<f64>() / rows.len() as f64;
            assert!((pooled.tokens[[t, c]] - mean).abs() < 1e-12);
        }
    }

    // Step 1 loses every token: its row becomes the mean of all retained rows.
    let positions: Vec<TokenPos> = [0, 0, 2, 3].iter().map(|&t| TokenPos { t, i: 0, j: 0 }).collect();
    let features = Array2::from_shape_fn((4, 16), |(r, _)| r as f64);
    let pooled = model.pool_spatial(&FeatureGrid { features, positions }, 8);
    assert!(pooled.tokens.row(1).iter().all(|&v| (v - 1.5).abs() < 1e-12));
    assert!(pooled.tokens.row(0).iter().all(|&v| (v - 0.5).abs() < 1e-12));
}

#[test]
fn decoder_variants_shapes() {
    let present = PooledSequence { tokens: Array2::from_shape_fn((4, 16), |(r, c)| (r as f64 - c as f64) * 0.1) };
    let id = perturbed(ModelConfig { decoder: DecoderVariant::Identity, ..toy_cfg() });
    assert_eq!(id.decode(&present).unwrap(), present);
    for variant in [DecoderVariant::Direct, DecoderVariant::Autoregressive] {
        let m = perturbed(ModelConfig { decoder: variant, ..toy_cfg() });
        let out = m.decode(&present).unwrap();
        assert_eq!(out.tokens.dim(), (4, 16));
        assert!(out.tokens.iter().all(|v| v.is_finite()));
    }
    let short = PooledSequence { tokens: Array2::zeros((3, 16)) };
    assert!(id.decode(&short).is_err());
}

#[test]
fn autoregressive_forecast_is_causal() {
    let m = perturbed(ModelConfig { decoder: DecoderVariant::Autoregressive, dec_layers: 2, ..toy_cfg() });
    let base = Array2::from_shape_fn((4, 16), |(r, c)| ((r * 16 + c) as f64 * 0.37).sin());
    let out = m.decode(&PooledSequence { tokens: base.clone() }).unwrap().tokens;

    // Every forecast step attends to all present tokens.
    for j in 0..4 {
        let mut bumped = base.clone();
        bumped[[j, 3]] += 1e-3;
        let moved = m.decode(&PooledSequence { tokens: bumped }).unwrap().tokens;
        for s in 0..4 {
            let delta: f64 = (&moved.row(s) - &out.row(s)).iter().map(|v| v.abs()).sum();
            assert!(delta > 1e-9, "step {s} ignores present token {j}");
        }
    }

    // Finite-difference Jacobian of the causal block stack: output row r moves
    // only when an input row j <= r is perturbed.
    let seq = Array2::from_shape_fn((6, 16), |(r, c)| ((r * 7 + c) as f64 * 0.21).cos());
    let run = |x: &Array2<f64>| {
        let mut tape = Tape::new(m.params());
        let v = tape.leaf(x.clone());
        let y = m.decoder_blocks(&mut tape, v, true);
        tape.value(y).to_owned()
    };
    let y0 = run(&seq);
    for j in 0..6 {
        let mut bumped = seq.clone();
        bumped[[j, 5]] += 1e-4;
        let y1 = run(&bumped);
        for r in 0..6 {
            let delta: f64 = (&y1.row(r) - &y0.row(r)).iter().map(|v| v.abs()).sum();
            if j > r {
                assert_eq!(delta, 0.0, "row {r} depends on later row {j}");
            } else {
                assert!(delta > 1e-10, "row {r} ignores row {j}");
            }
        }
    }
}

#[test]
fn classify_affine_and_shared_head() {
    let cfg = toy_cfg();
    let m = perturbed(cfg.clone());
    assert_eq!(m.head_params(Head::Pred), m.head_params(Head::Oracle));
    let v: Vec<f64> = (0..16).map(|c| c as f64 * 0.05 - 0.3).collect();
    let rows = PooledSequence { tokens: Array2::from_shape_fn((4, 16), |(_, c)| v[c]) };
    let logits = m.classify(&rows, Head::Pred);
    assert_eq!(logits.0.len(), 9);
    let (w, b) = m.head_params(Head::Pred);
    for k in 0..9 {
        let expected: f64 = (0..16).map(|c| v[c] * m.params().get(w)[[c, k]]).sum::<f64>() + m.params().get(b)[[0, k]];
        assert!((logits.0[k] - expected).abs() < 1e-12);
    }
    assert_eq!(m.classify(&rows, Head::Oracle), logits);

    let sep = perturbed(ModelConfig { classifier: ClassifierMode::Separate, ..cfg });
    assert_ne!(sep.head_params(Head::Pred), sep.head_params(Head::Oracle));
    assert_ne!(sep.classify(&rows, Head::Oracle), sep.classify(&rows, Head::Pred));
}

#[test]
fn identity_prediction_composes_stages() {
    let cfg = ModelConfig { decoder: DecoderVariant::Identity, ..toy_cfg() };
    let m = perturbed(cfg.clone());
    let clip = random_clip(9, &cfg);
    let sel = difference_mask(&clip, &cfg.mask_geometry(0.5)).unwrap();
    let direct = m.predict(&clip, &sel).unwrap();
    let staged = m.classify(&m.pool_spatial(&m.encode(&m.tokenize(&clip, &sel).unwrap()), cfg.clip_len), Head::Pred);
    for (a, b) in direct.0.iter().zip(&staged.0) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn oracle_path_pools_both_halves() {
    let cfg = toy_cfg();
    let m = perturbed(cfg.clone());
    let (a, b) = (random_clip(1, &cfg), random_clip(2, &cfg));
    let geometry = cfg.mask_geometry(0.5);
    let (sa, sb) = (difference_mask(&a, &geometry).unwrap(), difference_mask(&b, &geometry).unwrap());
    let mut tape = Tape::new(m.params());
    let out = m.forward_oracle(&mut tape, &a, &sa, &b, &sb).unwrap();
    assert_eq!(tape.shape(out.pooled), (8, 16));
    assert_eq!(tape.shape(out.logits), (1, 9));
}

#[test]
fn logits_argmax_prefers_lowest_index() {
    assert_eq!(Logits(vec![0.0; 9]).argmax(), 0);
    assert_eq!(Logits(vec![0.1, 0.5, 0.5, -1.0]).argmax(), 1);
}

#[test]
fn checkpoint_round_trip() {
    let cfg = ModelConfig { classifier: ClassifierMode::Separate, ..toy_cfg() };
    let m = perturbed(cfg);
    let text = checkpoint::to_json(&m, Some("model.dim = 16\n")).unwrap();
    let (back, run) = checkpoint::from_json(&text).unwrap();
    assert_eq!(back, m);
    assert_eq!(run.as_deref(), Some("model.dim = 16\n"));

    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["version"] = 99.into();
    assert!(matches!(checkpoint::from_json(&doc.to_string()), Err(crate::Error::Checkpoint(_))));
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["config"]["dim"] = 32.into();
    assert!(matches!(checkpoint::from_json(&doc.to_string()), Err(crate::Error::Checkpoint(_))));
}
