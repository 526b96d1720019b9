use fusereader::aoa::{
    aoa_scores, candidate_scores, candidate_scores_var, match_matrix, pointer_loss, predict,
};
use fusereader::autodiff::{Tape, Tensor};
use fusereader::{gradcheck, Error};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Direct softmax/mean/mat-vec computation of s.
fn oracle_s(m: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (n, q) = (m.len(), m[0].len());
    let mut alpha = vec![vec![0.0; q]; n];
    for j in 0..q {
        let col: Vec<f64> = (0..n).map(|i| m[i][j]).collect();
        for (i, v) in softmax(&col).into_iter().enumerate() {
            alpha[i][j] = v;
        }
    }
    let mut beta_bar = vec![0.0; q];
    for row in m {
        for (j, v) in softmax(row).into_iter().enumerate() {
            beta_bar[j] += v / n as f64;
        }
    }
    let s = (0..n).map(|i| (0..q).map(|j| alpha[i][j] * beta_bar[j]).sum()).collect();
    (alpha, beta_bar, s)
}

#[test]
fn match_matrix_examples() {
    let tape = Tape::new();
    let d = tape.leaf(&Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
    let q = tape.leaf(&Tensor::from_rows(&[[0.0, 2.0]]).unwrap());
    assert_eq!(tape.value(match_matrix(&tape, d, q).unwrap()), vec![0.0, 2.0]);
    let orth = tape.leaf(&Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
    let other = tape.leaf(&Tensor::from_rows(&[[0.0, 1.0]]).unwrap());
    assert_eq!(tape.value(match_matrix(&tape, orth, other).unwrap()), vec![0.0]);
    assert_eq!(tape.value(match_matrix(&tape, orth, orth).unwrap()), vec![1.0]);
    let wide = tape.leaf(&Tensor::zeros(&[2, 3]));
    assert!(matches!(match_matrix(&tape, d, wide), Err(Error::Dimension(_))));

    let mut rng = StdRng::seed_from_u64(2);
    let doc = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let qry = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let m = tape.value(match_matrix(&tape, tape.leaf(&doc), tape.leaf(&qry)).unwrap());
    for i in 0..4 {
        for j in 0..3 {
            let want: f64 = (0..5).map(|x| doc.at(i, x) * qry.at(j, x)).sum();
            assert!((m[i * 3 + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn aoa_examples() {
    let one = aoa_scores(&Tensor::from_rows(&[[3.0, -1.0, 7.0]]).unwrap()).unwrap();
    assert_eq!(one.s.len(), 1);
    assert!((one.s[0] - 1.0).abs() < 1e-15);

    let flat = aoa_scores(&Tensor::zeros(&[2, 3])).unwrap();
    for v in &flat.s {
        assert!((v - 0.5).abs() < 1e-15);
    }

    let rows = vec![vec![0.0, 2f64.ln()], vec![0.0, 0.0]];
    let st = aoa_scores(&Tensor::from_rows(&rows).unwrap()).unwrap();
    let (alpha, bb, s) = oracle_s(&rows);
    // alpha column 1 is (2/3, 1/3); beta rows are (1/3, 2/3) and (1/2, 1/2)
    assert!((alpha[0][1] - 2.0 / 3.0).abs() < 1e-15);
    assert!((bb[1] - 7.0 / 12.0).abs() < 1e-15);
    for i in 0..2 {
        assert!((st.s[i] - s[i]).abs() < 1e-15);
        for j in 0..2 {
            assert!((st.alpha.at(i, j) - alpha[i][j]).abs() < 1e-15);
        }
    }
    assert!((st.s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn random_states_are_normalised_and_match_oracle() {
    let mut rng = StdRng::seed_from_u64(3);
    for _ in 0..300 {
        let (n, m) = (rng.random_range(1..9), rng.random_range(1..7));
        let t = Tensor::randn(&[n, m], 3.0, &mut rng);
        let st = aoa_scores(&t).unwrap();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| t.row(i).to_vec()).collect();
        let (_, bb, s) = oracle_s(&rows);
        for j in 0..m {
            let col: f64 = (0..n).map(|i| st.alpha.at(i, j)).sum();
            assert!((col - 1.0).abs() < 1e-9);
        }
        assert!((st.beta_bar.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((st.s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(st.s.iter().all(|&v| v >= 0.0));
        for (a, b) in st.s.iter().zip(&s) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in st.beta_bar.iter().zip(&bb) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn candidate_score_examples() {
    let st = aoa_scores(&Tensor::zeros(&[4, 2])).unwrap();
    assert!((candidate_scores(&st, &[vec![0, 1, 2, 3]]).unwrap()[0] - 1.0).abs() < 1e-12);
    assert_eq!(candidate_scores(&st, &[vec![], vec![1]]).unwrap()[0], 0.0);
    let split = candidate_scores(&st, &[vec![0, 1], vec![2, 3]]).unwrap();
    assert!((split[0] - 0.5).abs() < 1e-12 && (split[1] - 0.5).abs() < 1e-12);
    assert_eq!(predict(&split).unwrap(), 0);
    assert!(matches!(candidate_scores(&st, &[vec![4]]), Err(Error::Index(_))));
    let tape = Tape::new();
    let s = tape.leaf(&Tensor::vector(st.s.clone()).unwrap());
    assert!(matches!(candidate_scores_var(&tape, s, &[vec![9]]), Err(Error::Index(_))));
    let v = tape.value(candidate_scores_var(&tape, s, &[vec![0, 1], vec![2, 3]]).unwrap());
    assert_eq!(v, split);
}

#[test]
fn permuting_documents_permutes_scores() {
    let mut rng = StdRng::seed_from_u64(4);
    let (n, m) = (6, 3);
    let t = Tensor::randn(&[n, m], 1.0, &mut rng);
    let perm = [3, 0, 5, 1, 4, 2];
    let permuted: Vec<Vec<f64>> = perm.iter().map(|&p| t.row(p).to_vec()).collect();
    let a = aoa_scores(&t).unwrap();
    let b = aoa_scores(&Tensor::from_rows(&permuted).unwrap()).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        assert!((b.s[i] - a.s[p]).abs() < 1e-12);
    }
    let occ = vec![vec![0, 2], vec![1, 5], vec![3]];
    let inv = |q: usize| perm.iter().position(|&p| p == q).unwrap();
    let occ_b: Vec<Vec<usize>> = occ.iter().map(|ps| ps.iter().map(|&q| inv(q)).collect()).collect();
    let (sa, sb) = (candidate_scores(&a, &occ).unwrap(), candidate_scores(&b, &occ_b).unwrap());
    for (x, y) in sa.iter().zip(&sb) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(sa.iter().sum::<f64>() <= 1.0 + 1e-12);
}

#[test]
fn pointer_loss_gradient_wrt_embeddings() {
    let mut rng = StdRng::seed_from_u64(5);
    for _ in 0..5 {
        let (n, m, d) = (rng.random_range(2..7), rng.random_range(1..7), 4);
        let doc = Tensor::randn(&[n, d], 1.0, &mut rng).with_requires_grad(true);
        let qry = Tensor::randn(&[m, d], 1.0, &mut rng).with_requires_grad(true);
        let occ: Vec<Vec<usize>> = vec![(0..n).step_by(2).collect(), (1..n).step_by(2).collect()];
        let report = gradcheck::check_inputs(
            &[doc, qry],
            |tape, v| {
                let mm = match_matrix(tape, v[0], v[1])?;
                let st = fusereader::aoa::aoa(tape, mm)?;
                let sc = candidate_scores_var(tape, st.s, &occ)?;
                pointer_loss(tape, sc, 1)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
