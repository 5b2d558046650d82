//! Per-time-step multi-graph convolution: adjacency renormalization, the
//! parallel graph convolutions, learnable Hadamard-weighted fusion, and the
//! flatten/dense projection onto the recurrent input.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{CoreError, Result};
use crate::matrix::Matrix;
use crate::tape::{NodeId, Tape};

/// Symmetric renormalization: A_hat = A + I, D_hat = diag(rowsum(A_hat)),
/// output D_hat^{-1/2} A_hat D_hat^{-1/2}. Requires a nonnegative symmetric
/// input; the self-loops guarantee every degree is at least 1.
pub fn normalize_adjacency(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(CoreError::Shape {
            op: "normalize_adjacency",
            detail: format!("adjacency must be square, got {}", a.shape_str()),
        });
    }
    if a.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(CoreError::Contract("adjacency must be nonnegative and finite".into()));
    }
    if !a.is_symmetric(1e-9) {
        return Err(CoreError::Contract("adjacency must be symmetric".into()));
    }
    let mut deg_inv_sqrt = Vec::with_capacity(n);
    for i in 0..n {
        let deg: f64 = (0..n).map(|j| a.at(i, j)).sum::<f64>() + 1.0;
        deg_inv_sqrt.push(1.0 / deg.sqrt());
    }
    Ok(Matrix::from_fn(n, n, |i, j| {
        let a_hat = a.at(i, j) + if i == j { 1.0 } else { 0.0 };
        deg_inv_sqrt[i] * a_hat * deg_inv_sqrt[j]
    }))
}

/// One graph convolution: relu(adj * h * w).
pub fn gcn_forward(tape: &mut Tape, adj: NodeId, h: NodeId, w: NodeId) -> Result<NodeId> {
    let ah = tape.matmul(adj, h)?;
    let ahw = tape.matmul(ah, w)?;
    Ok(tape.relu(ahw))
}

/// Hadamard-weighted fusion over the active graphs:
/// g_merge = sum_k  w_k (.) g_k. Pairs are (per-graph output, fusion weight).
pub fn fuse(tape: &mut Tape, pairs: &[(NodeId, NodeId)]) -> Result<NodeId> {
    if pairs.is_empty() {
        return Err(CoreError::Config("fusion requires at least one active graph".into()));
    }
    let mut merged: Option<NodeId> = None;
    for &(g, w) in pairs {
        let weighted = tape.hadamard(w, g)?;
        merged = Some(match merged {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    Ok(merged.unwrap())
}

/// Flattens the fused N x U signal and maps it through the shared dense
/// layer to the 1 x (N*S) recurrent input for this time step.
pub fn project_step(
    tape: &mut Tape,
    g_merge: NodeId,
    proj_w: NodeId,
    proj_b: NodeId,
) -> Result<NodeId> {
    let len = tape.value(g_merge).len();
    let flat = tape.reshape(g_merge, 1, len)?;
    let x = tape.matmul(flat, proj_w)?;
    tape.add_row(x, proj_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::power_iteration_sym;
    use alloc::vec;

    #[test]
    fn zero_adjacency_normalizes_to_identity() {
        let a = Matrix::zeros(2, 2);
        let norm = normalize_adjacency(&a).unwrap();
        assert_eq!(norm, Matrix::identity(2));
    }

    #[test]
    fn two_node_clique_normalizes_to_half() {
        let a = Matrix::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let norm = normalize_adjacency(&a).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert!((norm.at(r, c) - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalization_rejects_bad_inputs() {
        let neg = Matrix::from_vec(2, 2, vec![0.0, -1.0, -1.0, 0.0]).unwrap();
        assert!(normalize_adjacency(&neg).is_err());
        let asym = Matrix::from_vec(2, 2, vec![0.0, 1.0, 0.5, 0.0]).unwrap();
        assert!(normalize_adjacency(&asym).is_err());
    }

    #[test]
    fn normalized_spectral_radius_at_most_one() {
        let mut state = 0x9e3779b9u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for n in [2usize, 3, 5, 8] {
            let mut a = Matrix::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    let v = next() * 3.0;
                    a.set(i, j, v);
                    a.set(j, i, v);
                }
            }
            let norm = normalize_adjacency(&a).unwrap();
            assert!(norm.is_symmetric(1e-12));
            let rho = power_iteration_sym(&norm, 1000);
            assert!(rho <= 1.0 + 1e-9, "spectral radius {rho} for n={n}");
        }
    }

    #[test]
    fn gcn_identity_propagation() {
        let mut tape = Tape::new();
        let h_val = Matrix::from_vec(2, 2, vec![-1.0, 2.0, 3.0, -4.0]).unwrap();
        let adj = tape.leaf(Matrix::identity(2));
        let h = tape.leaf(h_val.clone());
        let w = tape.leaf(Matrix::identity(2));
        let g = gcn_forward(&mut tape, adj, h, w).unwrap();
        assert_eq!(tape.value(g), &h_val.map(|v| v.max(0.0)));
    }

    #[test]
    fn gcn_matches_triple_product_oracle() {
        let mut tape = Tape::new();
        let a_val = Matrix::from_fn(3, 3, |r, c| ((r + c) as f64 * 0.4).cos().abs());
        let h_val = Matrix::from_fn(3, 2, |r, c| (r as f64 - c as f64) * 0.7);
        let w_val = Matrix::from_fn(2, 4, |r, c| ((r * 4 + c) as f64).sin());
        let adj = tape.leaf(a_val.clone());
        let h = tape.leaf(h_val.clone());
        let w = tape.leaf(w_val.clone());
        let g = gcn_forward(&mut tape, adj, h, w).unwrap();
        let expect = a_val.matmul(&h_val).matmul(&w_val).map(|v| v.max(0.0));
        for (x, y) in tape.value(g).data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        // zero signal stays zero
        let mut tape2 = Tape::new();
        let adj = tape2.leaf(a_val);
        let h0 = tape2.leaf(Matrix::zeros(3, 2));
        let w = tape2.leaf(w_val);
        let g0 = gcn_forward(&mut tape2, adj, h0, w).unwrap();
        assert_eq!(tape2.value(g0).max_abs(), 0.0);
    }

    #[test]
    fn fusion_identities() {
        let mut tape = Tape::new();
        let g1_val = Matrix::from_fn(2, 3, |r, c| (r * 3 + c) as f64);
        let g1 = tape.leaf(g1_val.clone());
        let ones = tape.leaf(Matrix::filled(2, 3, 1.0));
        // single graph with all-ones weight is the identity
        let merged = fuse(&mut tape, &[(g1, ones)]).unwrap();
        assert_eq!(tape.value(merged), &g1_val);
        // equal signals with weights summing to one reproduce the signal
        let g2 = tape.leaf(g1_val.clone());
        let w1 = tape.leaf(Matrix::filled(2, 3, 0.3));
        let w2 = tape.leaf(Matrix::filled(2, 3, 0.7));
        let merged2 = fuse(&mut tape, &[(g1, w1), (g2, w2)]).unwrap();
        for (x, y) in tape.value(merged2).data().iter().zip(g1_val.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        // empty mask errors
        assert!(fuse(&mut tape, &[]).is_err());
    }

    #[test]
    fn fusion_matches_elementwise_oracle() {
        let mut tape = Tape::new();
        let gv: Vec<Matrix> =
            (0..3).map(|k| Matrix::from_fn(2, 2, |r, c| ((k + r * 2 + c) as f64 * 0.9).sin())).collect();
        let wv: Vec<Matrix> =
            (0..3).map(|k| Matrix::from_fn(2, 2, |r, c| ((k * 4 + r + c) as f64 * 0.3).cos())).collect();
        let pairs: Vec<(NodeId, NodeId)> = gv
            .iter()
            .zip(&wv)
            .map(|(g, w)| (tape.leaf(g.clone()), tape.leaf(w.clone())))
            .collect();
        let merged = fuse(&mut tape, &pairs).unwrap();
        let mut expect = Matrix::zeros(2, 2);
        for (g, w) in gv.iter().zip(&wv) {
            expect.add_assign(&w.hadamard(g));
        }
        for (x, y) in tape.value(merged).data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_is_the_affine_map() {
        let mut tape = Tape::new();
        let g_val = Matrix::from_fn(3, 2, |r, c| (r * 2 + c) as f64 * 0.5 - 1.0);
        let w_val = Matrix::from_fn(6, 4, |r, c| ((r * 4 + c) as f64 * 0.21).sin());
        let b_val = Matrix::from_fn(1, 4, |_, c| c as f64 * 0.1);
        let g = tape.leaf(g_val.clone());
        let w = tape.leaf(w_val.clone());
        let b = tape.leaf(b_val.clone());
        let x = project_step(&mut tape, g, w, b).unwrap();
        let expect = g_val.reshaped(1, 6).matmul(&w_val).add(&b_val);
        for (a, e) in tape.value(x).data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-12);
        }
        // zero weights and bias give the zero map
        let mut tape2 = Tape::new();
        let g = tape2.leaf(g_val);
        let w0 = tape2.leaf(Matrix::zeros(6, 4));
        let b0 = tape2.leaf(Matrix::zeros(1, 4));
        let x0 = project_step(&mut tape2, g, w0, b0).unwrap();
        assert_eq!(tape2.value(x0).max_abs(), 0.0);
    }
}
