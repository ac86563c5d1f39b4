use kvpformer::data::{synth_forms, SynthConfig};
use kvpformer::model::{KvpFormer, ModelConfig};
use kvpformer::training::{train, TrainConfig};

/// The overfit setting: eight 2x2 forms form a single batch, so every step
/// sees the same documents.
fn overfit_setup(epochs: usize) -> (KvpFormer, Vec<kvpformer::data::Document>, TrainConfig) {
    let model = ModelConfig {
        num_encoder_layers: 2,
        num_decoder_layers: 2,
        num_heads: 4,
        d_model: 64,
        d_ffn: 128,
        hash_vocab_size: 512,
        bias_hidden: 16,
        dropout_rate: 0.0,
        ..Default::default()
    };
    let cfg = TrainConfig {
        epochs,
        seed: 7,
        ..Default::default()
    };
    let docs = synth_forms(cfg.seed, 8, &SynthConfig::grid(2, 2));
    (KvpFormer::new(model, cfg.init_std, cfg.seed).unwrap(), docs, cfg)
}

#[test]
fn losses_are_finite_non_negative_and_mostly_falling() {
    let (mut model, docs, cfg) = overfit_setup(50);
    let history = train(&mut model, &docs, &cfg).unwrap();
    assert_eq!(history.len(), 50);
    for r in &history {
        for v in [r.question, r.coarse, r.fine, r.total] {
            assert!(v.is_finite() && v >= 0.0, "step {}: {v}", r.step);
        }
        assert!((r.question + r.coarse + r.fine - r.total).abs() < 1e-9);
    }
    let falling = history.windows(2).filter(|w| w[1].total <= w[0].total).count() + 1;
    eprintln!("non-increasing steps: {falling}/50");
    assert!(falling >= 45, "only {falling} of 50 steps were non-increasing");
}
