mod common;

use common::{entity, max_abs_diff, random_document};
use kvpformer::data::{Document, Label};
use kvpformer::geometry::{spatial_compatibility, BBox};
use kvpformer::model::{DocFeatures, KvpFormer, ModelConfig, QuestionRole};
use kvpformer::numerics::{Graph, Var};
use kvpformer::training::TrainConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy(seed: u64) -> KvpFormer {
    KvpFormer::new(ModelConfig::toy(), 0.3, seed).unwrap()
}

fn rows(g: &Graph, v: Var) -> Vec<Vec<f64>> {
    let w = g.shape(v)[1];
    g.value(v).chunks(w).map(<[f64]>::to_vec).collect()
}

fn set(model: &mut KvpFormer, name: &str, value: f64) {
    let id = model
        .params()
        .id_of(name)
        .unwrap_or_else(|| panic!("no parameter {name}"));
    model.params_mut().get_mut(id).tensor.values_mut().fill(value);
}

fn param<'a>(model: &'a KvpFormer, name: &str) -> &'a [f64] {
    let id = model
        .params()
        .id_of(name)
        .unwrap_or_else(|| panic!("no parameter {name}"));
    model.params().get(id).tensor.values()
}

/// `x W + b` with `W` stored `[input, output]`.
fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let out = w.len() / x.len();
    (0..out)
        .map(|j| x.iter().enumerate().map(|(i, xi)| xi * w[i * out + j]).sum::<f64>() + b.map_or(0.0, |b| b[j]))
        .collect()
}

fn ffn(model: &KvpFormer, name: &str, x: &[f64]) -> Vec<f64> {
    let bias = |n: String| {
        model
            .params()
            .id_of(&n)
            .map(|id| model.params().get(id).tensor.values())
    };
    let h: Vec<f64> = affine(
        x,
        param(model, &format!("{name}.0.weight")),
        bias(format!("{name}.0.bias")),
    )
    .into_iter()
    .map(|v| v.max(0.0))
    .collect();
    affine(
        &h,
        param(model, &format!("{name}.1.weight")),
        bias(format!("{name}.1.bias")),
    )
}

/// Head logit `MLP(q + h + FFN(r))` evaluated with plain loops.
fn head_logit(model: &KvpFormer, head: &str, q: &[f64], h: &[f64], a: BBox, b: BBox) -> f64 {
    let r = spatial_compatibility(&a, &b);
    let fr = ffn(model, &format!("{head}.feature"), r.as_slice());
    let x: Vec<f64> = q.iter().zip(h).zip(&fr).map(|((q, h), f)| q + h + f).collect();
    ffn(model, &format!("{head}.mlp"), &x)[0]
}

fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
}

#[test]
fn head_scores_match_a_standalone_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seed in 0..5 {
        let model = toy(seed);
        let doc = random_document(&mut rng, "d", 7);
        let f = DocFeatures::new(&doc, model.config().hash_vocab_size).unwrap();
        let mut g = Graph::new();
        let enc = model.encode(&mut g, &f).unwrap();
        let questions = vec![1, 4, 6];
        let dec = model.decode(&mut g, &f, &enc, &questions).unwrap();
        let coarse = model.coarse_logits(&mut g, &f, &enc, &dec).unwrap();
        let candidates = vec![vec![0, 2, 3], vec![5, 1, 0], vec![6, 2, 4]];
        let fine = model.fine_logits(&mut g, &f, &enc, &dec, &candidates).unwrap();
        let (q, h) = (rows(&g, dec.content), rows(&g, enc.content));
        let (coarse, fine) = (rows(&g, coarse), rows(&g, fine));
        for (i, &qi) in questions.iter().enumerate() {
            for j in 0..f.len() {
                let want = head_logit(&model, "coarse_head", &q[i], &h[j], f.boxes[qi], f.boxes[j]);
                assert!((coarse[i][j] - want).abs() < 1e-5, "coarse ({i},{j})");
            }
            for (k, &j) in candidates[i].iter().enumerate() {
                let want = head_logit(&model, "fine_head", &q[i], &h[j], f.boxes[qi], f.boxes[j]);
                assert!((fine[i][k] - want).abs() < 1e-5, "fine ({i},{k})");
            }
        }
    }
}

#[test]
fn zero_value_and_output_projections_leave_only_the_norms() {
    let mut model = toy(3);
    for name in [
        "encoder.0.attention.value.weight",
        "encoder.0.attention.value.bias",
        "encoder.0.attention.output.weight",
        "encoder.0.attention.output.bias",
        "encoder.0.ffn.1.weight",
        "encoder.0.ffn.1.bias",
    ] {
        set(&mut model, name, 0.0);
    }
    let doc = random_document(&mut ChaCha8Rng::seed_from_u64(5), "d", 6);
    let f = DocFeatures::new(&doc, model.config().hash_vocab_size).unwrap();
    let mut g = Graph::new();
    let enc = model.encode(&mut g, &f).unwrap();
    for (x, h) in rows(&g, enc.input).iter().zip(rows(&g, enc.content)) {
        assert!(max_abs_diff(&layer_norm(&layer_norm(x)), &h) < 1e-9);
    }
}

#[test]
fn identical_questions_get_identical_rows() {
    let b = BBox::new(100, 100, 200, 130);
    let doc = Document::new(
        "twins",
        vec![
            entity(0, "date", b, Label::Answer, vec![]),
            entity(1, "date", b, Label::Answer, vec![]),
            entity(2, "total", BBox::new(400, 500, 480, 520), Label::Question, vec![]),
        ],
    )
    .unwrap();
    let model = toy(8);
    let f = DocFeatures::new(&doc, model.config().hash_vocab_size).unwrap();
    let mut g = Graph::new();
    let enc = model.encode(&mut g, &f).unwrap();
    let dec = model.decode(&mut g, &f, &enc, &[0, 1]).unwrap();
    let q = rows(&g, dec.content);
    assert!(max_abs_diff(&q[0], &q[1]) < 1e-12);
}

#[test]
fn translation_leaves_predictions_unchanged_without_spatial_bias() {
    let config = ModelConfig {
        use_spatial_bias: false,
        coarse_accept_threshold: 0.0,
        question_role: QuestionRole::NonOther,
        ..ModelConfig::toy()
    };
    let model = KvpFormer::new(config, 0.3, 4).unwrap();
    let b = BBox::new(300, 300, 360, 320);
    let texts = ["name", "total amount", "date", "to", "signed by"];
    let build = |b: BBox| {
        let entities = texts
            .iter()
            .enumerate()
            .map(|(i, t)| entity(i, t, b, Label::ALL[i % 4], vec![]))
            .collect();
        Document::new("same", entities).unwrap()
    };
    let base = model.predict(&build(b)).unwrap();
    let moved = model.predict(&build(b.translate(-250, 170).unwrap())).unwrap();
    assert_eq!(base.pairs, moved.pairs);
    assert_eq!(base.question_ids, moved.question_ids);
    for (x, y) in base.coarse_scores.iter().zip(&moved.coarse_scores) {
        assert!(max_abs_diff(x, y) < 1e-9);
    }
}

#[test]
fn threshold_above_one_emits_nothing() {
    let config = ModelConfig {
        coarse_accept_threshold: 1.0 + 1e-9,
        question_role: QuestionRole::NonOther,
        use_gold_labels: true,
        ..ModelConfig::toy()
    };
    let model = KvpFormer::new(config, 0.3, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..10 {
        let p = model.predict(&random_document(&mut rng, "d", 3 + i)).unwrap();
        assert!(!p.question_ids.is_empty());
        assert!(p.pairs.is_empty());
    }
}

#[test]
fn fine_head_copying_the_coarse_head_changes_nothing() {
    let base = ModelConfig {
        coarse_accept_threshold: 0.0,
        question_role: QuestionRole::NonOther,
        ..ModelConfig::toy()
    };
    let mut full = KvpFormer::new(base.clone(), 0.3, 6).unwrap();
    let coarse_only = KvpFormer::new(
        ModelConfig {
            use_coarse_to_fine: false,
            ..base
        },
        0.3,
        6,
    )
    .unwrap();
    let copies: Vec<(String, Vec<f64>)> = full
        .params()
        .iter()
        .filter(|p| p.name.starts_with("coarse_head.") && p.name != "coarse_head.mlp.1.bias")
        .map(|p| {
            (
                p.name.replacen("coarse_head", "fine_head", 1),
                p.tensor.values().to_vec(),
            )
        })
        .collect();
    for (name, values) in copies {
        let id = full.params().id_of(&name).unwrap();
        full.params_mut()
            .get_mut(id)
            .tensor
            .values_mut()
            .copy_from_slice(&values);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..10 {
        let doc = random_document(&mut rng, "d", 4 + i);
        let (a, b) = (full.predict(&doc).unwrap(), coarse_only.predict(&doc).unwrap());
        assert_eq!(a.pairs, b.pairs);
        assert!(b.fine_scores.is_empty());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn predictions_satisfy_their_invariants(n in 1usize..=40, seed in any::<u64>(), role in prop::bool::ANY) {
        let config = ModelConfig {
            coarse_accept_threshold: 0.3,
            question_role: if role { QuestionRole::NonOther } else { QuestionRole::AnswerAsQuestion },
            use_gold_labels: true,
            ..ModelConfig::toy()
        };
        let model = KvpFormer::new(config.clone(), TrainConfig::default().init_std, seed).unwrap();
        let doc = random_document(&mut ChaCha8Rng::seed_from_u64(seed), "d", n);
        let p = model.predict(&doc).unwrap();
        let m = p.question_ids.len();
        prop_assert_eq!(p.entity_labels.len(), n);
        for dist in &p.entity_labels {
            prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        if m == 0 {
            prop_assert!(p.pairs.is_empty());
            return Ok(());
        }
        let k = config.top_k.min(n - 1);
        prop_assert_eq!(p.coarse_scores.len(), m);
        for row in &p.coarse_scores {
            prop_assert_eq!(row.len(), n);
            prop_assert!(row.iter().all(|&s| s > 0.0 && s < 1.0));
        }
        for (q, c) in p.question_ids.iter().zip(&p.candidates) {
            prop_assert_eq!(c.len(), k);
            prop_assert!(!c.contains(q));
            let mut sorted = c.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), k);
        }
        if k > 0 {
            prop_assert_eq!(p.fine_scores.len(), m);
            for row in &p.fine_scores {
                prop_assert_eq!(row.len(), k);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&s| s > 0.0 && (s < 1.0 || k == 1)));
            }
        }
        prop_assert!(p.pairs.len() <= m);
        for pair in &p.pairs {
            prop_assert!(pair.key_id != pair.value_id);
        }
    }
}
