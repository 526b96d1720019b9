use fusereader::autodiff::{ParamStore, Tape};
use fusereader::encoder::{EncoderConfig, EncoderModel};
use fusereader::fusion::GateConfig;
use fusereader::tokenizer::{TokenSequence, Vocab, CLS, SEP};
use fusereader::unilm::{
    build_seq2seq_mask, decode_step, generate, FactoidModel, FactoidPreset, GenerationConfig,
    FACTOID_PRESETS,
};
use fusereader::Error;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn cfg() -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        num_heads: 2,
        d_model: 8,
        d_ff: 16,
        max_len: 24,
        vocab_size: 30,
        dropout_p: 0.1,
    }
}

fn single(seed: u64) -> (ParamStore, FactoidModel) {
    let mut store = ParamStore::new();
    let mut rng = StdRng::seed_from_u64(seed);
    let e = EncoderModel::new(cfg(), "encoder1", &mut store, seed, &mut rng).unwrap();
    (store, FactoidModel::single(e))
}

fn dual_gate(seed: u64) -> (ParamStore, FactoidModel) {
    let mut store = ParamStore::new();
    let mut rng = StdRng::seed_from_u64(seed);
    let gate = GateConfig { channels: 6, hidden: 5, ..GateConfig::new(8) };
    let m = FactoidPreset::parse("bertA+bertB+mlp")
        .unwrap()
        .build(&cfg(), &gate, &mut store, seed, &mut rng)
        .unwrap();
    (store, m)
}

fn src() -> TokenSequence {
    TokenSequence::new(vec![CLS, 7, 8, SEP, 9, 10, 11, SEP], vec![0, 0, 0, 0, 1, 1, 1, 1]).unwrap()
}

#[test]
fn mask_examples() {
    let m = build_seq2seq_mask(2, 0).unwrap();
    assert_eq!(m.data(), &[1.0; 4]);
    let m = build_seq2seq_mask(1, 2).unwrap();
    assert_eq!(m.data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
    assert!(matches!(build_seq2seq_mask(0, 3), Err(Error::Parameter(_))));
}

#[test]
fn mask_invariants_hold_for_all_shapes() {
    for s in 1..7 {
        for t in 0..7 {
            let m = build_seq2seq_mask(s, t).unwrap();
            for i in 0..s + t {
                for j in 0..s + t {
                    let want = if i < s { j < s } else { j <= i };
                    assert_eq!(m.get(i, j), want, "src {s} tgt {t} at ({i},{j})");
                }
            }
        }
    }
}

/// Makes every hidden row equal to `b` so logits are `E·b`.
fn rig(store: &mut ParamStore, rows: &[(usize, f64)]) {
    let g = store.id("encoder1.lnf_g").unwrap();
    let b = store.id("encoder1.lnf_b").unwrap();
    store.get_mut(g).set_data(vec![0.0; 8]).unwrap();
    let beta: Vec<f64> = (0..8).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
    store.get_mut(b).set_data(beta).unwrap();
    let e = store.id("encoder1.word_emb").unwrap();
    let mut table = vec![0.0; 30 * 8];
    for &(id, v) in rows {
        table[id * 8] = v;
    }
    store.get_mut(e).set_data(table).unwrap();
}

#[test]
fn decode_step_argmax_and_ties() {
    let (mut store, m) = single(1);
    rig(&mut store, &[(17, 3.0), (5, 1.0)]);
    assert_eq!(decode_step(&m, &store, &src(), &[]).unwrap(), 17);
    rig(&mut store, &[(4, 2.0), (9, 2.0)]);
    assert_eq!(decode_step(&m, &store, &src(), &[12]).unwrap(), 4);
}

#[test]
fn decode_step_rejects_overflow() {
    let (store, m) = single(2);
    let long = vec![5; 20];
    assert!(matches!(decode_step(&m, &store, &src(), &long), Err(Error::Dimension(_))));
}

#[test]
fn padded_future_slot_does_not_change_prediction() {
    let (store, m) = dual_gate(3);
    let s = src();
    let mut rng = StdRng::seed_from_u64(0);
    let base: Vec<usize> = s.ids.iter().copied().chain([12, 13]).collect();
    let segs: Vec<usize> = s.segments.iter().copied().chain([1, 1]).collect();
    let tape = Tape::inference(&store);
    let l0 = tape.value(m.position_logits(&tape, &base, &segs, s.len(), &mut rng).unwrap());
    let step = decode_step(&m, &store, &s, &[12]).unwrap();
    let row = &l0[(s.len()) * 30..(s.len() + 1) * 30];
    assert_eq!(step, fusereader::autodiff::argmax(row).unwrap());
}

fn causal_check(m: &FactoidModel, store: &ParamStore, rng: &mut StdRng) {
    let src_len = rng.random_range(2..8);
    let tgt_len = rng.random_range(1..8);
    let n = src_len + tgt_len;
    let mut ids: Vec<usize> = (0..n).map(|_| rng.random_range(5..30)).collect();
    ids[0] = CLS;
    let segs: Vec<usize> = (0..n).map(|i| usize::from(i >= src_len)).collect();
    let tape = Tape::inference(store);
    let base = tape.value(m.position_logits(&tape, &ids, &segs, src_len, rng).unwrap());
    let t = rng.random_range(src_len..n);
    for p in t + 1..n {
        ids[p] = rng.random_range(5..30);
    }
    let tape = Tape::inference(store);
    let new = tape.value(m.position_logits(&tape, &ids, &segs, src_len, rng).unwrap());
    for i in 0..(t + 1) * 30 {
        assert!((base[i] - new[i]).abs() < 1e-9, "logit {i} moved");
    }
}

#[test]
fn causality_single_and_gated() {
    let mut rng = StdRng::seed_from_u64(4);
    let (s1, m1) = single(5);
    let (s2, m2) = dual_gate(6);
    for _ in 0..20 {
        causal_check(&m1, &s1, &mut rng);
        causal_check(&m2, &s2, &mut rng);
    }
}

#[test]
fn empty_target_matches_plain_encode() {
    let (store, m) = single(7);
    let s = src();
    let mut rng = StdRng::seed_from_u64(0);
    let tape = Tape::inference(&store);
    let (h, _) = m.hidden(&tape, &s.ids, &s.segments, s.len(), false, &mut rng).unwrap();
    let plain = m.encoders[0].encode(&tape, &s, None, false, &mut rng).unwrap();
    assert_eq!(tape.value(h), tape.value(plain));
}

fn toy_vocab() -> Vocab {
    Vocab::from_tokens((0..25).map(|i| format!("w{i}"))).unwrap()
}

#[test]
fn generation_rejects_vocab_mismatch() {
    let (store, m) = single(12);
    let vocab = Vocab::from_tokens(["a"]).unwrap();
    let gen = GenerationConfig::default();
    assert!(matches!(generate(&m, &store, "a", "a", &vocab, &gen), Err(Error::Config(_))));
}

#[test]
fn generation_terminates_and_is_deterministic() {
    let (store, m) = dual_gate(8);
    let vocab = toy_vocab();
    let gen = GenerationConfig { max_answer_len: 5, stop_id: SEP };
    let a = generate(&m, &store, "w1 w2", "w3 w4 w5", &vocab, &gen).unwrap();
    let b = generate(&m, &store, "w1 w2", "w3 w4 w5", &vocab, &gen).unwrap();
    assert_eq!(a, b);
    let src = m.frame_source("w1 w2", "w3 w4 w5", &vocab, &gen).unwrap();
    assert!(m.generate_ids(&store, &src, &gen).unwrap().len() <= 5);
    let bad = GenerationConfig { max_answer_len: 0, stop_id: SEP };
    assert!(matches!(m.generate_ids(&store, &src, &bad), Err(Error::Config(_))));
}

#[test]
fn immediate_stop_gives_empty_answer() {
    let (mut store, m) = single(9);
    rig(&mut store, &[(SEP, 5.0)]);
    let vocab = toy_vocab();
    let gen = GenerationConfig { max_answer_len: 1, stop_id: SEP };
    assert_eq!(generate(&m, &store, "w1", "w2", &vocab, &gen).unwrap(), "");
}

#[test]
fn loss_gradient_check_through_gate() {
    let (store, m) = dual_gate(10);
    let s = src();
    let f = |tape: &Tape| {
        let mut rng = StdRng::seed_from_u64(0);
        m.loss(tape, &s, &[12, 13], false, &mut rng)
    };
    let ids: Vec<_> = store.ids().collect();
    let report = fusereader::gradcheck::check_params(&store, &ids, f, 1e-5, 6).unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn presets_parse() {
    for name in FACTOID_PRESETS {
        let p = FactoidPreset::parse(name).unwrap();
        assert_eq!(p.gate, name.ends_with("+mlp"));
        assert_eq!(p.roles.len(), if name.contains('+') { 2 } else { 1 });
    }
    let p = FactoidPreset::parse("bioB(F)+bioA+mlp").unwrap();
    assert_eq!(p.roles, vec!['A', 'B']);
    assert_eq!(p.frozen_groups(), vec!["encoder2"]);
    for bad in ["bertC", "bertA+mlp", "bertA(F)+bertB(F)+mlp", "bertA+bertA", "", "mlp"] {
        assert!(FactoidPreset::parse(bad).is_err(), "{bad}");
    }
}

#[test]
fn output_projection_follows_trainable_encoder() {
    let (mut store, mut m) = dual_gate(11);
    m.tie_to_trainable(&store);
    assert_eq!(m.output_encoder, 0);
    store.set_group_trainable("encoder1", false).unwrap();
    m.tie_to_trainable(&store);
    assert_eq!(m.output_encoder, 1);
}

#[test]
fn single_triple_is_regenerated_after_overfitting() {
    use fusereader::datasets::FactoidInstance;
    use fusereader::training::{fit, EarlyStopConfig, Monitor, OptimizerConfig, TrainConfig};
    use fusereader::unilm::{encode_factoid, FactoidTask};

    let inst = FactoidInstance {
        id: "t1".into(),
        question: "what is the dose of bame ?".into(),
        context: "the dose of bame is kafo . the site of lumi is tose .".into(),
        answer: "kafo blocker".into(),
    };
    let vocab = Vocab::build([inst.question.as_str(), inst.context.as_str(), inst.answer.as_str()], 500).unwrap();
    let config = EncoderConfig {
        num_layers: 2,
        num_heads: 2,
        d_model: 16,
        d_ff: 32,
        max_len: 48,
        vocab_size: vocab.len(),
        dropout_p: 0.0,
    };
    for preset in ["bertA", "bertA(F)+bertB+mlp"] {
        let mut store = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(3);
        let preset = FactoidPreset::parse(preset).unwrap();
        let model = preset.build(&config, &GateConfig::new(16), &mut store, 3, &mut rng).unwrap();
        let gen = GenerationConfig::default();
        let ex = vec![encode_factoid(&inst, &model, &vocab, &gen).unwrap()];
        let mut task = FactoidTask { model, vocab: vocab.clone(), gen, generate_in_eval: true };
        let cfg = TrainConfig {
            optimizer: OptimizerConfig::adamw(1e-2, 0.0),
            batch_size: 1,
            max_epochs: 300,
            early_stop: EarlyStopConfig::new(300, Monitor::ValF1),
            target: Some(1.0),
            freeze: fusereader::training::FreezeSpec::new(preset.frozen_groups()),
            ..TrainConfig::default()
        };
        fusereader::training::apply_freeze(&mut store, &cfg.freeze).unwrap();
        task.model.tie_to_trainable(&store);
        let r = fit(&task, &mut store, &ex, &ex, &cfg).unwrap();
        assert_eq!(task.answer(&store, &ex[0]).unwrap(), "kafo blocker", "{} after {} steps", preset.name, r.steps);
    }
}
