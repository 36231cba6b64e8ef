//! Decoupled graph propagation with layer attention, plus the coupled GCN
//! layer kept for the ablation.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `D^-1/2 (A + I) D^-1/2` with `D` the row sums of `A + I`. Applied as
/// written even when `A` is not symmetric.
pub fn normalize(g: &mut Graph, a: Var) -> Result<Var> {
    let shape = g.shape(a).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Shape {
            op: "normalize",
            left: shape,
            right: vec![],
        });
    }
    let eye = g.constant(Tensor::eye(shape[0]));
    let with_loops = g.add(a, eye)?;
    let degree = g.reduce(crate::autodiff::Reduce::Sum, with_loops, Some(1))?;
    let inv_sqrt = g.powf(degree, -0.5)?;
    let d = g.diag(inv_sqrt);
    let left = g.matmul(d, with_loops)?;
    g.matmul(left, d)
}

/// `Â H`: no weights, no activation.
pub fn propagate(g: &mut Graph, h: Var, a_hat: Var) -> Result<Var> {
    g.matmul(a_hat, h)
}

/// Per node, `sum_l sigmoid(H^l_i · c) H^l_i`. Returns the fused matrix and
/// the `(N+1)×1` score column of each layer.
pub fn layer_attention(g: &mut Graph, stack: &[Var], c: Var) -> Result<(Var, Vec<Var>)> {
    if stack.is_empty() {
        return Err(Error::Shape {
            op: "layer_attention",
            left: vec![],
            right: g.shape(c).to_vec(),
        });
    }
    let mut out: Option<Var> = None;
    let mut scores = Vec::with_capacity(stack.len());
    for &h in stack {
        let logits = g.matmul(h, c)?;
        let s = g.sigmoid(logits);
        scores.push(s);
        let weights = g.diag(s);
        let term = g.matmul(weights, h)?;
        out = Some(match out {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok((out.expect("non-empty stack"), scores))
}

/// `relu(Â H W)`.
pub fn gcn_layer(g: &mut Graph, h: Var, a_hat: Var, w: Var) -> Result<Var> {
    let p = g.matmul(a_hat, h)?;
    let t = g.matmul(p, w)?;
    Ok(g.relu(t))
}

/// Mean cosine similarity over distinct pairs of rows. Zero rows are
/// skipped. Pass post rows only; the user node is not part of the measure.
pub fn smoothness(rows: &Tensor) -> Result<f64> {
    let kept: Vec<(&[f64], f64)> = (0..rows.rows())
        .map(|i| {
            let r = rows.row(i);
            (r, r.iter().map(|x| x * x).sum::<f64>().sqrt())
        })
        .filter(|&(_, n)| n > 0.0)
        .collect();
    if kept.len() < 2 {
        return Err(Error::Domain {
            op: "smoothness",
            detail: format!("{} non-zero rows, need at least 2", kept.len()),
        });
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..kept.len() {
        for j in i + 1..kept.len() {
            let dot: f64 = kept[i].0.iter().zip(kept[j].0).map(|(a, b)| a * b).sum();
            total += dot / (kept[i].1 * kept[j].1);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[cfg(test)]
mod tests {
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{check_gradients, DEFAULT_STEP};

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn rand(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    fn norm_of(a: Tensor) -> Tensor {
        let mut g = Graph::new();
        let a = g.constant(a);
        let n = normalize(&mut g, a).unwrap();
        g.value(n).clone()
    }

    fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
        a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn normalize_hand_cases() {
        assert_eq!(norm_of(Tensor::zeros(&[3, 3])), Tensor::eye(3));
        let n = norm_of(t(&[&[0.0, 1.0], &[1.0, 0.0]]));
        assert!(close(&n, &t(&[&[0.5, 0.5], &[0.5, 0.5]]), 1e-12));
        let n = norm_of(t(&[&[0.0, 1.0], &[0.0, 0.0]]));
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!(close(&n, &t(&[&[0.5, r], &[0.0, 1.0]]), 1e-12), "{n:?}");
    }

    #[test]
    fn normalize_keeps_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = Tensor::zeros(&[6, 6]);
        for i in 0..6 {
            for j in 0..i {
                let w = if rng.gen_bool(0.5) {
                    rng.gen_range(0.9..1.0)
                } else {
                    0.0
                };
                a.data_mut()[i * 6 + j] = w;
                a.data_mut()[j * 6 + i] = w;
            }
        }
        let n = norm_of(a);
        assert!(close(&n, &n.transpose(), 1e-12));
    }

    #[test]
    fn normalize_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand(4, 4, &mut rng).map(f64::abs);
        let w = rand(4, 4, &mut rng);
        let report = check_gradients(
            |g, v| {
                let n = normalize(g, v[0])?;
                let wc = g.constant(w.clone());
                let p = g.mul(n, wc)?;
                Ok(g.sum(p))
            },
            &[a],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn propagate_examples() {
        let mut g = Graph::new();
        let h = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = g.constant(Tensor::eye(2));
        let p = propagate(&mut g, h, i).unwrap();
        assert_eq!(g.value(p), g.value(h));

        let half = g.constant(Tensor::full(&[2, 2], 0.5));
        let h2 = g.constant(t(&[&[2.0, 0.0], &[0.0, 2.0]]));
        let p = propagate(&mut g, h2, half).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn propagate_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let inputs = [rand(4, 3, &mut rng), rand(4, 4, &mut rng)];
        let report = check_gradients(
            |g, v| {
                let p = propagate(g, v[0], v[1])?;
                let q = g.mul(p, p)?;
                Ok(g.sum(q))
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn attention_with_zero_projection_halves_the_layer_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut g = Graph::new();
        let hs: Vec<Var> = (0..3).map(|_| g.constant(rand(4, 3, &mut rng))).collect();
        let c = g.param(Tensor::zeros(&[3, 1]));
        let (out, scores) = layer_attention(&mut g, &hs, c).unwrap();
        assert!(scores.iter().all(|&s| g.value(s).data().iter().all(|&x| x == 0.5)));
        let mut expected = Tensor::zeros(&[4, 3]);
        for &h in &hs {
            expected.add_assign(g.value(h));
        }
        assert!(close(g.value(out), &expected.map(|x| 0.5 * x), 1e-15));
    }

    #[test]
    fn attention_single_layer() {
        let mut g = Graph::new();
        let h0 = g.constant(t(&[&[1.0, -1.0], &[2.0, 0.5]]));
        let c = g.param(t(&[&[0.3], &[0.7]]));
        let (out, _) = layer_attention(&mut g, &[h0], c).unwrap();
        let s0 = crate::autodiff::sigmoid(0.3 - 0.7);
        let s1 = crate::autodiff::sigmoid(0.6 + 0.35);
        let expected = t(&[&[s0, -s0], &[2.0 * s1, 0.5 * s1]]);
        assert!(close(g.value(out), &expected, 1e-15));
        assert!(layer_attention(&mut g, &[], c).is_err());
    }

    #[test]
    fn attention_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let inputs = [rand(3, 1, &mut rng), rand(4, 3, &mut rng), rand(4, 3, &mut rng)];
        let report = check_gradients(
            |g, v| {
                let (out, _) = layer_attention(g, &[v[1], v[2]], v[0])?;
                let q = g.mul(out, out)?;
                Ok(g.sum(q))
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn gcn_layer_examples() {
        let mut g = Graph::new();
        let h = g.constant(t(&[&[1.0, 2.0], &[0.0, 3.0]]));
        let i = g.constant(Tensor::eye(2));
        let out = gcn_layer(&mut g, h, i, i).unwrap();
        assert_eq!(g.value(out), g.value(h));
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let out = gcn_layer(&mut g, h, i, z).unwrap();
        assert_eq!(g.value(out).data(), &[0.0; 4]);
    }

    #[test]
    fn gcn_layer_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let inputs = [rand(4, 3, &mut rng), rand(4, 4, &mut rng), rand(3, 3, &mut rng)];
        let report = check_gradients(
            |g, v| {
                let out = gcn_layer(g, v[0], v[1], v[2])?;
                Ok(g.sum(out))
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn smoothness_examples() {
        assert!((smoothness(&t(&[&[1.0, 2.0], &[1.0, 2.0], &[2.0, 4.0]])).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(smoothness(&t(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap(), 0.0);
        // zero rows are skipped
        assert_eq!(smoothness(&t(&[&[1.0, 0.0], &[0.0, 0.0], &[0.0, 1.0]])).unwrap(), 0.0);
        assert!(smoothness(&t(&[&[0.0, 0.0], &[0.0, 0.0]])).is_err());
    }

    #[test]
    fn repeated_propagation_aligns_with_dominant_eigenvector() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 6;
        let mut a = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..i {
                // ring edges always, chords with probability one half
                if j + 1 == i || (i == n - 1 && j == 0) || rng.gen_bool(0.5) {
                    let w = rng.gen_range(0.9..1.0);
                    a.data_mut()[i * n + j] = w;
                    a.data_mut()[j * n + i] = w;
                }
            }
        }
        let a_hat = norm_of(a);

        let eig = DMatrix::from_row_slice(n, n, a_hat.data()).symmetric_eigen();
        let top = eig.eigenvalues.imax();
        let v = eig.eigenvectors.column(top).into_owned();

        let mut g = Graph::new();
        let ah = g.constant(a_hat);
        let mut h = g.constant(rand(n, 3, &mut rng));
        let first = propagate(&mut g, h, ah).unwrap();
        for _ in 0..100 {
            h = propagate(&mut g, h, ah).unwrap();
        }
        let out = g.value(h);
        for col in 0..3 {
            let x: Vec<f64> = (0..n).map(|i| out.at(i, col)).collect();
            let proj: f64 = x.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            let resid: f64 = x
                .iter()
                .zip(v.iter())
                .map(|(a, b)| (a - proj * b).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(resid / norm < 1e-6, "column {col}: {}", resid / norm);
        }
        assert!(smoothness(out).unwrap() >= smoothness(g.value(first)).unwrap());
    }

    #[test]
    fn propagation_commutes_with_node_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 5;
        let a = rand(n, n, &mut rng).map(|x| if x > 0.0 { 1.0 - 1e-6 * x } else { 0.0 });
        let h = rand(n, 4, &mut rng);
        let c = rand(4, 1, &mut rng);
        // permute posts 0..4, keep the user node (row 4) fixed
        let perm = [2, 0, 3, 1, 4];
        let pa = Tensor::new(vec![n, n], (0..n * n).map(|k| a.at(perm[k / n], perm[k % n])).collect()).unwrap();
        let ph = Tensor::from_rows(&perm.iter().map(|&i| h.row(i).to_vec()).collect::<Vec<_>>()).unwrap();

        let run = |a: Tensor, h: Tensor| {
            let mut g = Graph::new();
            let a = g.constant(a);
            let h = g.constant(h);
            let c = g.constant(c.clone());
            let ah = normalize(&mut g, a).unwrap();
            let h1 = propagate(&mut g, h, ah).unwrap();
            let (out, _) = layer_attention(&mut g, &[h, h1], c).unwrap();
            g.value(out).clone()
        };
        let base = run(a, h);
        let permuted = run(pa, ph);
        for (i, &p) in perm.iter().enumerate() {
            for (x, y) in permuted.row(i).iter().zip(base.row(p)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
