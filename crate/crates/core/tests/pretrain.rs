use std::collections::HashSet;

use fusereader::autodiff::{ParamStore, Tensor};
use fusereader::encoder::EncoderConfig;
use fusereader::pretrain::{mask_sequence, pretrain_encoder, pretrain_role, role_corpus, MarkovCorpus, PretrainConfig};
use fusereader::tokenizer::{Vocab, CLS, MASK, SEP};
use rand::rngs::StdRng;
use rand::SeedableRng;

fn config(vocab_size: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers: 1,
        num_heads: 2,
        d_model: 16,
        d_ff: 32,
        max_len: 32,
        vocab_size,
        dropout_p: 0.0,
    }
}

#[test]
fn noiseless_chains_follow_the_successor_table() {
    let corpus = MarkovCorpus::new((10..40).collect(), 1, 0.0, 3).unwrap();
    let mut rng = StdRng::seed_from_u64(1);
    let mut next = std::collections::HashMap::new();
    for _ in 0..50 {
        let s = corpus.sample(20, &mut rng);
        assert!(s.iter().all(|w| (10..40).contains(w)));
        for w in s.windows(2) {
            assert_eq!(*next.entry(w[0]).or_insert(w[1]), w[1], "word {} has two successors", w[0]);
        }
    }
}

#[test]
fn masking_replaces_exactly_the_listed_positions() {
    let mut rng = StdRng::seed_from_u64(4);
    let words: Vec<usize> = (10..26).collect();
    for _ in 0..100 {
        let ex = mask_sequence(&words, 0.15, &mut rng).unwrap();
        assert!(!ex.positions.is_empty());
        assert_eq!(ex.seq.ids[0], CLS);
        assert_eq!(*ex.seq.ids.last().unwrap(), SEP);
        let masked: HashSet<usize> = ex.positions.iter().copied().collect();
        for (p, &id) in ex.seq.ids.iter().enumerate().skip(1).take(words.len()) {
            if masked.contains(&p) {
                assert_eq!(id, MASK);
            } else {
                assert_eq!(id, words[p - 1]);
            }
        }
        for (p, t) in ex.positions.iter().zip(&ex.targets) {
            assert_eq!(*t, words[p - 1]);
        }
    }
}

#[test]
fn masked_token_loss_falls_on_a_deterministic_chain() {
    let corpus = MarkovCorpus::new((5..25).collect(), 1, 0.0, 9).unwrap();
    let cfg = PretrainConfig {
        steps: 300,
        batch_size: 8,
        seq_len: 12,
        ..PretrainConfig::default()
    };
    let p = pretrain_encoder(&config(25), "encoder1", 1, &corpus, &cfg).unwrap();
    let head: f64 = p.losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = p.losses[280..].iter().sum::<f64>() / 20.0;
    // Uniform guessing over 20 words costs ln 20 ≈ 3.0.
    assert!(tail < 0.5 * head && tail < 1.5, "loss {head:.3} -> {tail:.3}");
}

#[test]
fn role_pretraining_is_deterministic_and_role_specific() {
    let vocab = Vocab::build(["alpha beta gamma delta epsilon zeta eta theta"], 100).unwrap();
    let cfg = PretrainConfig {
        steps: 5,
        batch_size: 2,
        seq_len: 8,
        ..PretrainConfig::default()
    };
    let enc = config(vocab.len());
    let a1 = pretrain_role(&enc, &vocab, 'A', &cfg).unwrap();
    let a2 = pretrain_role(&enc, &vocab, 'A', &cfg).unwrap();
    assert_eq!(a1.store.group_hash("encoder1"), a2.store.group_hash("encoder1"));
    assert_eq!(a1.losses, a2.losses);
    let b = pretrain_role(&enc, &vocab, 'B', &cfg).unwrap();
    assert_eq!(b.store.groups().into_iter().collect::<Vec<_>>(), ["encoder2"]);

    let mut rng = StdRng::seed_from_u64(0);
    let sa = role_corpus(&vocab, 'A', &cfg).unwrap().sample(200, &mut rng);
    let mut rng = StdRng::seed_from_u64(0);
    let sb = role_corpus(&vocab, 'B', &cfg).unwrap().sample(200, &mut rng);
    assert_ne!(sa, sb);
}

#[test]
fn bad_settings_are_rejected() {
    let corpus = MarkovCorpus::new(vec![5, 6, 7], 1, 0.0, 0).unwrap();
    let long = PretrainConfig {
        seq_len: 40,
        ..PretrainConfig::default()
    };
    assert!(pretrain_encoder(&config(10), "e", 0, &corpus, &long).is_err());
    let wide = MarkovCorpus::new(vec![5, 60], 1, 0.0, 0).unwrap();
    assert!(pretrain_encoder(&config(10), "e", 0, &wide, &PretrainConfig::default()).is_err());
    assert!(MarkovCorpus::new(vec![5], 1, 0.0, 0).is_err());
    let bad = PretrainConfig {
        mask_prob: 0.0,
        ..PretrainConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn stores_round_trip_through_a_directory() {
    let mut store = ParamStore::new();
    store.add("encoder1.w", Tensor::new(vec![2, 2], vec![1.0, -2.5, 1e-300, 3.0]).unwrap()).unwrap();
    store.add("fuser.b", Tensor::new(vec![3], vec![0.1, 0.2, f64::MIN_POSITIVE]).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    store.save_dir(dir.path()).unwrap();
    let back = ParamStore::load_dir(dir.path()).unwrap();
    assert_eq!(back.len(), 2);
    for g in ["encoder1", "fuser"] {
        assert_eq!(back.group_hash(g), store.group_hash(g));
    }
}
