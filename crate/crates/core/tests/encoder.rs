use fusereader::autodiff::{ParamStore, Tape, Tensor};
use fusereader::encoder::{attention, padding_mask, pooled_feature, EncoderConfig, EncoderModel};
use fusereader::gradcheck;
use fusereader::tokenizer::{TokenSequence, CLS, PAD, SEP};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn cfg(layers: usize, d: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers: layers,
        num_heads: 2,
        d_model: d,
        d_ff: 2 * d,
        max_len: 16,
        vocab_size: 30,
        dropout_p: 0.1,
    }
}

fn model(c: EncoderConfig, seed: u64) -> (ParamStore, EncoderModel) {
    let mut store = ParamStore::new();
    let mut rng = StdRng::seed_from_u64(seed);
    let m = EncoderModel::new(c, "encoder1", &mut store, seed, &mut rng).unwrap();
    (store, m)
}

fn seq(ids: &[usize], pad: usize) -> TokenSequence {
    let mut ids = ids.to_vec();
    let sep = ids.iter().position(|&i| i == SEP).unwrap();
    let real = ids.len();
    ids.extend(std::iter::repeat_n(PAD, pad));
    TokenSequence {
        segments: (0..ids.len()).map(|i| usize::from(i > sep)).collect(),
        mask: (0..ids.len()).map(|i| u8::from(i < real)).collect(),
        ids,
    }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn layer_norm_rows(x: &[f64], d: usize) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|r| {
            let mu = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
            r.iter().map(move |v| (v - mu) / (var + 1e-5).sqrt()).collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn sinusoidal_rows() {
    let t = fusereader::encoder::sinusoidal_table(5, 4);
    assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0]);
    let r = t.row(3);
    assert!((r[0] - 3f64.sin()).abs() < 1e-15);
    assert!((r[1] - 3f64.cos()).abs() < 1e-15);
    assert!((r[2] - (3.0 / 100.0f64).sin()).abs() < 1e-15);
}

#[test]
fn embed_with_zero_tables_is_positions() {
    let (mut store, m) = model(cfg(1, 8), 1);
    for id in [m.word_embedding(), m.segment_embedding()] {
        let n = store.get(id).len();
        store.get_mut(id).set_data(vec![0.0; n]).unwrap();
    }
    let s = seq(&[CLS, 7, SEP, 9, SEP], 0);
    let tape = Tape::with_params(&store);
    let e = tape.value(m.embed(&tape, &s).unwrap());
    assert_eq!(e, m.positions().data()[..5 * 8].to_vec());
}

#[test]
fn embed_matches_three_table_sum() {
    let (store, m) = model(cfg(1, 8), 2);
    let s = seq(&[CLS, 7, 7, SEP, 9, 11, SEP], 2);
    let tape = Tape::with_params(&store);
    let e = tape.value(m.embed(&tape, &s).unwrap());
    let w = store.get(m.word_embedding());
    let g = store.get(m.segment_embedding());
    for (t, (&id, &sg)) in s.ids.iter().zip(&s.segments).enumerate() {
        for j in 0..8 {
            let want = w.at(id, j) + g.at(sg, j) + m.positions().at(t, j);
            assert!((e[t * 8 + j] - want).abs() < 1e-12);
        }
    }
    // same id at positions 1 and 2: the difference is exactly the position difference
    for j in 0..8 {
        let diff = e[2 * 8 + j] - e[8 + j];
        let pd = m.positions().at(2, j) - m.positions().at(1, j);
        assert!((diff - pd).abs() < 1e-12);
    }
}

#[test]
fn embed_rejects_overlong() {
    let (store, m) = model(cfg(1, 8), 3);
    let s = seq(&[CLS, SEP], 15);
    let tape = Tape::with_params(&store);
    assert!(matches!(m.embed(&tape, &s), Err(fusereader::Error::Dimension(_))));
}

#[test]
fn attention_degenerate_cases() {
    let tape = Tape::new();
    let q = tape.leaf(&Tensor::matrix(1, 2, vec![0.3, -1.0]).unwrap());
    let k = tape.leaf(&Tensor::matrix(1, 2, vec![2.0, 0.5]).unwrap());
    let v = tape.leaf(&Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    assert_eq!(tape.value(attention(&tape, q, k, v, &[1.0]).unwrap()), vec![1.0, 2.0, 3.0]);

    let k = tape.leaf(&Tensor::filled(&[3, 2], 0.7));
    let v = tape.leaf(&Tensor::matrix(3, 1, vec![1.0, 5.0, 100.0]).unwrap());
    let out = tape.value(attention(&tape, q, k, v, &[1.0, 1.0, 0.0]).unwrap());
    assert!((out[0] - 3.0).abs() < 1e-12);

    assert!(matches!(
        attention(&tape, q, k, v, &[0.0, 0.0, 0.0]),
        Err(fusereader::Error::Contract(_))
    ));
}

#[test]
fn attention_matches_direct_oracle() {
    let mut rng = StdRng::seed_from_u64(5);
    let (n, m, d, dv) = (3, 4, 4, 2);
    let q = Tensor::randn(&[n, d], 1.0, &mut rng);
    let k = Tensor::randn(&[m, d], 1.0, &mut rng);
    let v = Tensor::randn(&[m, dv], 1.0, &mut rng);
    let mask = [1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
    let tape = Tape::new();
    let (qv, kv, vv) = (tape.leaf(&q), tape.leaf(&k), tape.leaf(&v));
    let out = tape.value(attention(&tape, qv, kv, vv, &mask).unwrap());
    for i in 0..n {
        let scores: Vec<f64> = (0..m)
            .map(|j| {
                let s: f64 = (0..d).map(|x| q.at(i, x) * k.at(j, x)).sum::<f64>() / 2.0;
                if mask[i * m + j] == 1.0 { s } else { f64::NEG_INFINITY }
            })
            .collect();
        let w = softmax(&scores);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for c in 0..dv {
            let want: f64 = (0..m).map(|j| w[j] * v.at(j, c)).sum();
            assert!((out[i * dv + c] - want).abs() < 1e-10);
        }
    }
}

#[test]
fn empty_stack_is_layer_norm_of_embeddings() {
    let (store, m) = model(cfg(0, 8), 4);
    let s = seq(&[CLS, 3, SEP, 4, 5, SEP], 1);
    let tape = Tape::with_params(&store);
    let mut rng = StdRng::seed_from_u64(0);
    let emb = tape.value(m.embed(&tape, &s).unwrap());
    let out = tape.value(m.encode(&tape, &s, None, false, &mut rng).unwrap());
    for (a, b) in out.iter().zip(layer_norm_rows(&emb, 8)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn padding_is_isolated() {
    let (store, m) = model(cfg(2, 8), 5);
    let rng = StdRng::seed_from_u64(0);
    let a = seq(&[CLS, 3, SEP, 4, 5, SEP], 3);
    let mut b = a.clone();
    b.ids[7] = 17;
    let run = |s: &TokenSequence| {
        let tape = Tape::inference(&store);
        let mut r = rng.clone();
        tape.value(m.encode(&tape, s, None, false, &mut r).unwrap())
    };
    let (oa, ob) = (run(&a), run(&b));
    for i in 0..6 * 8 {
        assert!((oa[i] - ob[i]).abs() < 1e-9);
    }
    assert!(oa[7 * 8..].iter().zip(&ob[7 * 8..]).any(|(x, y)| (x - y).abs() > 1e-6));
}

#[test]
fn causal_mask_blocks_future_tokens() {
    let (store, m) = model(cfg(2, 8), 6);
    let n = 7;
    let mut tri = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            tri[i * n + j] = 1.0;
        }
    }
    let mask = Tensor::matrix(n, n, tri).unwrap();
    let base = seq(&[CLS, 3, SEP, 4, 5, 6, SEP], 0);
    let mut rng = StdRng::seed_from_u64(0);
    let run = |s: &TokenSequence, rng: &mut StdRng| {
        let tape = Tape::inference(&store);
        tape.value(m.encode(&tape, s, Some(&mask), false, rng).unwrap())
    };
    let o0 = run(&base, &mut rng);
    for t in 1..n {
        let mut s = base.clone();
        s.ids[t] = 20 + t;
        let o = run(&s, &mut rng);
        for pos in 0..t {
            for j in 0..8 {
                assert!((o[pos * 8 + j] - o0[pos * 8 + j]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn attention_rows_are_stochastic() {
    let mut rng = StdRng::seed_from_u64(8);
    for _ in 0..20 {
        let (n, d) = (rng.random_range(1..6), rng.random_range(1..5));
        let tape = Tape::new();
        let q = tape.leaf(&Tensor::randn(&[n, d], 2.0, &mut rng));
        let k = tape.leaf(&Tensor::randn(&[n, d], 2.0, &mut rng));
        let real: Vec<u8> = (0..n).map(|i| u8::from(i == 0 || rng.random_bool(0.6))).collect();
        let mask = padding_mask(&real);
        let eye = tape.leaf(&Tensor::new(vec![n, n], (0..n * n).map(|i| f64::from(i % (n + 1) == 0)).collect()).unwrap());
        // with identity values the output rows are the attention weights
        let w = tape.value(attention(&tape, q, k, eye, &mask).unwrap());
        for i in 0..n {
            let row = &w[i * n..(i + 1) * n];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for j in 0..n {
                if real[j] == 0 {
                    assert!(row[j] < 1e-9);
                }
            }
        }
    }
}

#[test]
fn different_seeds_differ() {
    let (s1, m1) = model(cfg(1, 8), 10);
    let (s2, m2) = model(cfg(1, 8), 11);
    let s = seq(&[CLS, 3, SEP, 4, SEP], 0);
    let mut rng = StdRng::seed_from_u64(0);
    let t1 = Tape::inference(&s1);
    let t2 = Tape::inference(&s2);
    let a = t1.value(m1.encode(&t1, &s, None, false, &mut rng).unwrap());
    let b = t2.value(m2.encode(&t2, &s, None, false, &mut rng).unwrap());
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-3));
}

#[test]
fn pooled_feature_is_row_zero() {
    let tape = Tape::new();
    let mut rng = StdRng::seed_from_u64(9);
    let f = Tensor::randn(&[5, 3], 1.0, &mut rng);
    let v = tape.leaf(&f);
    assert_eq!(tape.value(pooled_feature(&tape, v).unwrap()), f.row(0).to_vec());
    let mut g = f.clone().into_data();
    g[9..12].copy_from_slice(&[9.0, 9.0, 9.0]);
    let v2 = tape.leaf(&Tensor::matrix(5, 3, g).unwrap());
    assert_eq!(tape.value(pooled_feature(&tape, v2).unwrap()), f.row(0).to_vec());
    let one = tape.leaf(&Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    assert_eq!(tape.value(pooled_feature(&tape, one).unwrap()), vec![1.0, 2.0, 3.0]);
}

#[test]
fn gradient_of_mean_output_wrt_embeddings() {
    let (store, m) = model(cfg(1, 8), 12);
    let s = seq(&[CLS, 3, SEP, 4, 5, SEP], 2);
    let f = |tape: &Tape| {
        let mut rng = StdRng::seed_from_u64(0);
        let out = m.encode(tape, &s, None, false, &mut rng)?;
        // a plain mean of layer-normed rows is constant, so weight it
        let w = tape.constant(tape.shape(out), (0..tape.shape(out).iter().product()).map(|i| ((i * 7) % 5) as f64 - 2.0).collect())?;
        let prod = tape.mul(out, w)?;
        tape.mean(prod)
    };
    let report = gradcheck::check_params(&store, &[m.word_embedding(), m.segment_embedding()], f, 1e-5, 60).unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn full_stack_gradient_check() {
    let (store, m) = model(cfg(2, 8), 13);
    let s = seq(&[CLS, 3, 8, SEP, 4, 5, SEP], 1);
    let f = |tape: &Tape| {
        let mut rng = StdRng::seed_from_u64(0);
        let out = m.encode(tape, &s, None, false, &mut rng)?;
        let logits = m.tied_logits(tape, out)?;
        tape.cross_entropy(logits, &[3, 8, 4, 5, 6, 7, 1, 2])
    };
    let ids: Vec<_> = store.ids().collect();
    let report = gradcheck::check_params(&store, &ids, f, 1e-5, 12).unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn checkpoint_round_trip() {
    let (store, m) = model(cfg(1, 8), 14);
    let dir = tempfile::tempdir().unwrap();
    m.save(&store, dir.path()).unwrap();
    assert!(dir.path().join("manifest.json").exists());
    let mut other = ParamStore::new();
    let loaded = EncoderModel::load(dir.path(), "encoder2", &mut other).unwrap();
    assert_eq!(loaded.config, m.config);
    let s = seq(&[CLS, 3, SEP, 4, SEP], 0);
    let mut rng = StdRng::seed_from_u64(0);
    let (t1, t2) = (Tape::inference(&store), Tape::inference(&other));
    let a = t1.value(m.encode(&t1, &s, None, false, &mut rng).unwrap());
    let b = t2.value(loaded.encode(&t2, &s, None, false, &mut rng).unwrap());
    assert_eq!(a, b);
}

#[test]
fn config_validation() {
    let mut c = cfg(1, 8);
    c.num_heads = 3;
    assert!(c.validate().is_err());
    assert!(EncoderConfig::default().validate().is_ok());
}
