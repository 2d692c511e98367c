//! Attention Jacobians against perturb-and-replay differences, importance
//! scores against a direct loop oracle and a hand-solved micro model.

use gradmask::attribution::{attention_jacobian, importance_scores, ScoreMode};
use gradmask::nn::{self, AttentionRecord, ModelKind, ModelParams, Vocabulary};
use gradmask::{rng, Graph, NodeId, Tensor};
use rand::Rng;

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-2;

fn setup(seed: u64) -> (Graph, NodeId, Vec<AttentionRecord>) {
    let params = ModelParams::init(ModelKind::Ldm, &mut rng::stream(seed, "params"));
    let ids = Vocabulary::standard().tokenize("a red circle in downtown").unwrap();
    let text = nn::embed_tokens(&params, &ids).unwrap();
    let z = rng::normal_tensor(&mut rng::stream(seed, "z"), &nn::LATENT_SHAPE);
    let mut g = Graph::new();
    let (eps, records) = nn::unet_forward(&mut g, &params, &z, 60, &text).unwrap();
    (g, eps, records)
}

#[test]
fn jacobian_entries_match_replay_differences() {
    let (g, eps, records) = setup(11);
    let mut r = rng::stream(11, "entries");
    let mut checked = 0;
    for rec in &records {
        let jac = attention_jacobian(&g, eps, rec).unwrap();
        let (rows, cols) = (jac.values.shape()[0], jac.values.shape()[1]);
        assert_eq!(rows, 256);
        assert_eq!(cols, rec.heads * rec.grid * rec.grid * rec.tokens);
        for _ in 0..30 {
            let (row, col) = (r.gen_range(0..rows), r.gen_range(0..cols));
            let eval = |d: f64| {
                let mut w = g.value(rec.weight_node).clone();
                w.data_mut()[col] += d;
                g.replay(&[(rec.weight_node, w)]).unwrap()[eps.index()].data()[row]
            };
            let fd = (eval(H) - eval(-H)) / (2.0 * H);
            let a = jac.get(row, col);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(FLOOR);
            assert!(rel < 1e-5, "layer {} ({row},{col}): {a} vs {fd}", rec.layer_id);
            checked += 1;
        }
    }
    assert!(checked >= 50);
}

/// Direct triple loop over heads, grid cells and the subject column.
fn loop_oracle(rec: &AttentionRecord, jac: &gradmask::attribution::JacobianBlock, s: usize) -> Vec<f64> {
    let rows = jac.values.shape()[0];
    let pp = rec.grid * rec.grid;
    let mut out = vec![0.0; rows];
    for (r, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for h in 0..rec.heads {
            for p in 0..pp {
                let col = (h * pp + p) * rec.tokens + s;
                acc += rec.weight(h, p, s) * jac.get(r, col).abs();
            }
        }
        *o = acc;
    }
    out
}

#[test]
fn full_mode_equals_loop_oracle_exactly() {
    let (g, eps, records) = setup(5);
    for rec in &records {
        let jac = attention_jacobian(&g, eps, rec).unwrap();
        for s in [1, 2, 3] {
            let field = importance_scores(rec, &jac, s, ScoreMode::Full).unwrap();
            assert_eq!(field.values.data(), loop_oracle(rec, &jac, s).as_slice());
            assert!(field.values.data().iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn diagonal_mode_is_bounded_by_full_mode() {
    let (g, eps, records) = setup(6);
    for rec in &records {
        let jac = attention_jacobian(&g, eps, rec).unwrap();
        let full = importance_scores(rec, &jac, 2, ScoreMode::Full).unwrap();
        let diag = importance_scores(rec, &jac, 2, ScoreMode::Diagonal).unwrap();
        for (d, f) in diag.values.data().iter().zip(full.values.data()) {
            assert!(*d <= *f + 1e-15);
        }
    }
}

/// One head, one query cell, two tokens: `out = Σ_n A[n] · v[n]` with
/// `A = softmax(q · k)`. The Jacobian of `out` with respect to `A[n]` is
/// `v[n]`, so the score of token `s` is `A[s] · |v[s]|`.
#[test]
fn micro_model_closed_form() {
    let mut g = Graph::new();
    let logits = g.input(Tensor::new(vec![1, 1, 2], vec![0.3, -0.9]).unwrap());
    let a = g.softmax(logits, -1).unwrap();
    let v = g.input(Tensor::new(vec![1, 2, 3], vec![1.5, -2.0, 0.25, -0.5, 4.0, 3.0]).unwrap());
    let out = g.matmul(a, v).unwrap();
    let out = g.reshape(out, &[3, 1, 1]).unwrap();
    let rec = AttentionRecord {
        layer_id: 0,
        heads: 1,
        grid: 1,
        tokens: 2,
        weights: g.value(a).clone().reshape(&[1, 1, 2]).unwrap(),
        weight_node: a,
    };
    let jac = attention_jacobian(&g, out, &rec).unwrap();
    let vv = g.value(v).data().to_vec();
    for c in 0..3 {
        for n in 0..2 {
            assert_eq!(jac.get(c, n), vv[n * 3 + c]);
        }
    }
    let e0 = 0.3f64.exp();
    let e1 = (-0.9f64).exp();
    let w = [e0 / (e0 + e1), e1 / (e0 + e1)];
    for s in 0..2 {
        let field = importance_scores(&rec, &jac, s, ScoreMode::Full).unwrap();
        for c in 0..3 {
            let want = w[s] * vv[s * 3 + c].abs();
            assert!((field.values.data()[c] - want).abs() < 1e-15);
        }
    }
}
