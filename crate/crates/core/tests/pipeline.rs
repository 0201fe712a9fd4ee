use std::io::BufReader;

use msl_core::catalog::{
    build_prompt, gen_catalog, gen_interactions, parse_prompt, InteractionConfig, InteractionSet, ItemCatalog, Split,
    TitleShape, Vocab,
};
use msl_core::decode::{constrained_beam_search, rank_all_items, score_item, BeamConfig, MetricsReport, Prediction};
use msl_core::losses::{msl_grad, token_breakdown, NegativeScale};
use msl_core::model::{Checkpoint, ModelParams, Optimizer, OptimizerKind, ParamGradients};
use msl_core::trie::average_valid_tokens;
use msl_core::TokenTrie;

fn catalog() -> ItemCatalog {
    gen_catalog(11, 6, 5, &TitleShape::default()).unwrap()
}

#[test]
fn catalog_and_interactions_round_trip_through_jsonl() {
    let cat = catalog();
    let mut buf = Vec::new();
    cat.vocab().write_jsonl(&mut buf).unwrap();
    let vocab = Vocab::read_jsonl(BufReader::new(buf.as_slice())).unwrap();
    let mut buf = Vec::new();
    cat.write_jsonl(&mut buf).unwrap();
    let back = ItemCatalog::read_jsonl(BufReader::new(buf.as_slice()), vocab).unwrap();
    assert_eq!(back.sequences(), cat.sequences());

    let cfg = InteractionConfig { n_users: 50, ..InteractionConfig::default() };
    let inter = gen_interactions(3, &cat, &cfg).unwrap();
    let mut buf = Vec::new();
    inter.write_jsonl(&mut buf).unwrap();
    let again = InteractionSet::read_jsonl(BufReader::new(buf.as_slice()), &cat).unwrap();
    assert_eq!(again.records, inter.records);
    for r in &inter.records {
        assert_eq!(parse_prompt(&build_prompt(&r.history, &cat).unwrap(), &cat).unwrap(), r.history);
    }
}

#[test]
fn masks_follow_the_trie_and_average_valid_tokens() {
    let cat = catalog();
    let trie = TokenTrie::from_catalog(&cat).unwrap();
    let mut total = 0;
    let mut positions = 0;
    for seq in cat.sequences() {
        let mask = trie.masks_for_target(seq).unwrap();
        assert_eq!(mask.len(), seq.len());
        for (t, &y) in seq.iter().enumerate() {
            assert!(mask.valid(t).contains(&y));
            assert_eq!(mask.valid(t), trie.valid_next(&seq[..t]).as_slice());
            total += mask.valid_count(t);
            positions += 1;
        }
    }
    let avt = average_valid_tokens(&trie, cat.sequences().iter().map(Vec::as_slice)).unwrap();
    assert!((avt - total as f64 / positions as f64).abs() < 1e-12);
}

#[test]
fn one_step_of_msl_raises_the_positive_score() {
    let cat = catalog();
    let trie = TokenTrie::from_catalog(&cat).unwrap();
    let mut model = ModelParams::init(5, 8, cat.vocab().len(), 0.1).unwrap();
    let prompt = build_prompt(&[0, 1], &cat).unwrap();
    let seq = cat.sequence(2).unwrap().to_vec();
    let before = score_item(&model, &trie, &prompt, &seq).unwrap();

    let mask = trie.masks_for_target(&seq).unwrap();
    let mut grads = ParamGradients::zeros_like(&model);
    for (t, &y) in seq.iter().enumerate() {
        let mut ctx = prompt.clone();
        ctx.extend_from_slice(&seq[..t]);
        let f = model.forward(&ctx).unwrap().logits.values;
        let tl = token_breakdown(&f, mask.valid(t), y, 1.0, NegativeScale::One).unwrap();
        assert!(tl.weight_msl <= tl.weight_lml);
        assert!((tl.l1 + tl.l2 - tl.lml).abs() < 1e-12);
        let g = msl_grad(&f, mask.valid(t), y, 1.0, 1.0).unwrap();
        grads.add_assign(&model.backward(&ctx, &g).unwrap());
    }
    let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, &model).unwrap();
    opt.step(&mut model, &grads).unwrap();
    assert!(score_item(&model, &trie, &prompt, &seq).unwrap() > before);
}

#[test]
fn checkpoint_round_trip_preserves_rankings() {
    let cat = catalog();
    let trie = TokenTrie::from_catalog(&cat).unwrap();
    let model = ModelParams::init(9, 8, cat.vocab().len(), 1.0).unwrap();
    let opt = Optimizer::new(OptimizerKind::default(), 1e-2, &model).unwrap();
    let mut buf = Vec::new();
    Checkpoint::new(model.clone(), opt).write(&mut buf).unwrap();
    let restored = Checkpoint::read(buf.as_slice()).unwrap();
    assert_eq!(restored.params, model);

    let prompt = build_prompt(&[4], &cat).unwrap();
    let cfg = BeamConfig::new(10);
    let a = constrained_beam_search(&model, &trie, &prompt, &cfg).unwrap();
    let b = constrained_beam_search(&restored.params, &trie, &prompt, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn exhaustive_beam_matches_full_ranking_and_feeds_metrics() {
    let cat = catalog();
    let trie = TokenTrie::from_catalog(&cat).unwrap();
    let model = ModelParams::init(21, 8, cat.vocab().len(), 2.0).unwrap();
    let inter = gen_interactions(4, &cat, &InteractionConfig { n_users: 40, ..InteractionConfig::default() }).unwrap();
    let mut lists = Vec::new();
    for r in inter.split(Split::Test) {
        let prompt = build_prompt(&r.history, &cat).unwrap();
        let full = rank_all_items(&model, &trie, cat.sequences(), &prompt).unwrap();
        let beam = constrained_beam_search(&model, &trie, &prompt, &BeamConfig::new(cat.len())).unwrap();
        assert_eq!(beam.items, full.items);
        lists.push((r.user_id, beam, r.target));
    }
    let report = MetricsReport::from_rankings(&[5, 10], lists.iter().map(|(u, l, p)| (*u, l, *p))).unwrap();
    for k in [5, 10] {
        let ndcg = report.ndcg_at(k).unwrap();
        let hr = report.hr_at(k).unwrap();
        assert!((0.0..=1.0).contains(&ndcg) && ndcg <= hr);
    }
    let line = serde_json::to_string(&Prediction::new(lists[0].0, &lists[0].1)).unwrap();
    assert!(line.contains("\"user_id\""));
}
