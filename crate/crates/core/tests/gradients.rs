//! Reverse-mode gradients against central finite differences obtained by
//! replaying the recorded graph with one perturbed entry.

use gradmask::nn::{self, ModelKind, ModelParams, Vocabulary};
use gradmask::numerics::BackwardPlan;
use gradmask::{rng, Graph, NodeId, Tensor};
use rand::Rng;

const H: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely: central differences
/// carry about `1e-11 · |objective|` of rounding noise, which would swamp a
/// relative comparison of a near-zero derivative.
const FLOOR: f64 = 1e-2;

/// `|a - b| / max(|a|, |b|, floor)`: relative error, with an absolute floor so
/// that gradients which are zero up to rounding do not divide by zero.
fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn objective(g: &Graph, out: NodeId, seed: &Tensor, node: NodeId, value: Tensor) -> f64 {
    g.replay(&[(node, value)]).unwrap()[out.index()].dot(seed)
}

fn central(g: &Graph, out: NodeId, seed: &Tensor, node: NodeId, i: usize) -> f64 {
    let mut plus = g.value(node).clone();
    plus.data_mut()[i] += H;
    let mut minus = g.value(node).clone();
    minus.data_mut()[i] -= H;
    (objective(g, out, seed, node, plus) - objective(g, out, seed, node, minus)) / (2.0 * H)
}

fn randn(r: &mut rng::Rng, shape: &[usize]) -> Tensor {
    rng::normal_tensor(r, shape)
}

const SHAPE: [usize; 4] = [2, 4, 4, 4];

/// Builds a random chain of shape-preserving steps over `[2, 4, 4, 4]`.
fn micro_graph(seed: u64) -> (Graph, NodeId, Vec<NodeId>, Vec<&'static str>) {
    let mut r = rng::stream(seed, "micro");
    let mut g = Graph::new();
    let mut leaves = Vec::new();
    let mut used = Vec::new();
    let mut x = if r.gen_bool(0.25) {
        let table = g.input(randn(&mut r, &[6, 4]));
        leaves.push(table);
        let ids: Vec<usize> = (0..32).map(|_| r.gen_range(0..6)).collect();
        used.push("embed_lookup");
        let e = g.embed_lookup(table, &ids).unwrap();
        g.reshape(e, &SHAPE).unwrap()
    } else {
        let x = g.input(randn(&mut r, &SHAPE));
        leaves.push(x);
        x
    };
    let steps = r.gen_range(3..=6);
    for _ in 0..steps {
        let choice = r.gen_range(0..17);
        x = match choice {
            0 | 1 | 2 => {
                let y = g.input(randn(&mut r, &SHAPE));
                leaves.push(y);
                match choice {
                    0 => {
                        used.push("add");
                        g.add(x, y)
                    }
                    1 => {
                        used.push("sub");
                        g.sub(x, y)
                    }
                    _ => {
                        used.push("mul");
                        g.mul(x, y)
                    }
                }
                .unwrap()
            }
            3 => {
                used.push("scale");
                g.scale(x, r.gen_range(-2.0..2.0)).unwrap()
            }
            4 => {
                let b = g.input(randn(&mut r, &[2, 4]));
                leaves.push(b);
                used.push("bias_add");
                g.bias_add(x, b).unwrap()
            }
            5 => {
                used.push("silu");
                g.silu(x).unwrap()
            }
            6 => {
                used.push("softmax");
                g.softmax(x, r.gen_range(0..4) as isize - 4).unwrap()
            }
            7 => {
                used.push("log_softmax");
                g.log_softmax(x, r.gen_range(0..4)).unwrap()
            }
            8 => {
                let (gm, bt) = (g.input(randn(&mut r, &[4])), g.input(randn(&mut r, &[4])));
                leaves.extend([gm, bt]);
                used.push("group_norm");
                g.group_norm(x, gm, bt, 2, 1e-5).unwrap()
            }
            9 => {
                let w = g.input(randn(&mut r, &[4, 4, 3, 3]).map(|v| v * 0.3));
                let b = g.input(randn(&mut r, &[4]));
                leaves.extend([w, b]);
                used.push("conv2d");
                g.conv2d(x, w, b, 1, 1).unwrap()
            }
            10 => {
                used.push("upsample_nearest2x");
                used.push("downsample_avg2x");
                let u = g.upsample_nearest2x(x).unwrap();
                let s = g.silu(u).unwrap();
                g.downsample_avg2x(s).unwrap()
            }
            11 => {
                used.push("downsample_avg2x");
                used.push("upsample_nearest2x");
                let d = g.downsample_avg2x(x).unwrap();
                g.upsample_nearest2x(d).unwrap()
            }
            12 => {
                used.push("permute");
                g.permute(x, &[0, 1, 3, 2]).unwrap()
            }
            13 => {
                used.push("l2_normalize");
                let f = g.reshape(x, &[2, 4, 16]).unwrap();
                let n = g.l2_normalize(f).unwrap();
                g.reshape(n, &SHAPE).unwrap()
            }
            14 => {
                let y = g.input(randn(&mut r, &SHAPE));
                leaves.push(y);
                used.push("matmul");
                g.matmul(x, y).unwrap()
            }
            15 => {
                let w = g.input(randn(&mut r, &[4, 4]));
                let b = g.input(randn(&mut r, &[4]));
                leaves.extend([w, b]);
                used.push("linear");
                g.linear(x, w, b).unwrap()
            }
            _ => {
                used.push("mean");
                used.push("concat");
                let m = g.mean(x, 3).unwrap();
                let s = g.scale(m, 0.5).unwrap();
                g.concat(&[m, x, s], 3)
                    .and_then(|c| g.reshape(c, &[2, 4, 4, 6]))
                    .and_then(|c| g.permute(c, &[0, 1, 3, 2]))
                    .and_then(|c| g.mean(c, 2))
                    .and_then(|c| g.reshape(c, &[2, 4, 4, 1]))
                    .and_then(|c| g.concat(&[c, c, c, c], 3))
                    .and_then(|c| g.reshape(c, &[2, 4, 4, 4]))
                    .unwrap()
            }
        };
    }
    if r.gen_bool(0.3) {
        used.push("mean_all");
        x = g.mean_all(x).unwrap();
    }
    (g, x, leaves, used)
}

#[test]
fn micro_graphs_match_finite_differences() {
    let mut worst: f64 = 0.0;
    let mut seen = std::collections::BTreeSet::new();
    for gi in 0..120u64 {
        let (g, out, leaves, used) = micro_graph(gi);
        seen.extend(used);
        let mut r = rng::stream(gi, "seed");
        let seed = randn(&mut r, g.value(out).shape());
        let grads = g.backward_wrt(out, &seed, &leaves).unwrap();
        for &leaf in &leaves {
            let analytic = grads.get_or_zeros(&g, leaf);
            for i in 0..analytic.numel() {
                let fd = central(&g, out, &seed, leaf, i);
                let e = rel_err(analytic.data()[i], fd, FLOOR);
                worst = worst.max(e);
                assert!(e < 1e-6, "graph {gi}, leaf {}, entry {i}: {} vs {fd}", leaf.index(), analytic.data()[i]);
            }
        }
    }
    for op in [
        "add", "sub", "mul", "scale", "bias_add", "silu", "softmax", "log_softmax", "group_norm", "conv2d",
        "upsample_nearest2x", "downsample_avg2x", "permute", "l2_normalize", "matmul", "linear", "mean", "concat",
        "mean_all", "embed_lookup",
    ] {
        assert!(seen.contains(op), "no micro-graph exercised {op}");
    }
    eprintln!("micro-graph worst relative error {worst:.3e}");
}

#[test]
fn full_backward_agrees_with_restricted_plans() {
    for gi in 0..20u64 {
        let (g, out, leaves, _) = micro_graph(1000 + gi);
        let seed = Tensor::full(g.value(out).shape(), 1.0);
        let full = g.backward(out, &seed).unwrap();
        let plan: BackwardPlan = g.plan(out, &leaves[..1]).unwrap();
        let part = g.backward_with_plan(&plan, &seed).unwrap();
        assert_eq!(full.get_or_zeros(&g, leaves[0]), part.get_or_zeros(&g, leaves[0]));
    }
}

fn unet_setup(seed: u64) -> (Graph, NodeId, Vec<nn::AttentionRecord>, ModelParams) {
    let params = ModelParams::init(ModelKind::Ldm, &mut rng::stream(seed, "params"));
    let vocab = Vocabulary::standard();
    let ids = vocab.tokenize("a white triangle in ocean").unwrap();
    let text = nn::embed_tokens(&params, &ids).unwrap();
    let z = randn(&mut rng::stream(seed, "z"), &nn::LATENT_SHAPE);
    let mut g = Graph::new();
    let (eps, records) = nn::unet_forward(&mut g, &params, &z, 37, &text).unwrap();
    (g, eps, records, params)
}

#[test]
fn unet_attention_weight_gradients_match_finite_differences() {
    let (g, eps, records, _) = unet_setup(3);
    let mut r = rng::stream(3, "pick");
    let seed = randn(&mut r, g.value(eps).shape());
    let nodes: Vec<NodeId> = records.iter().map(|rec| rec.weight_node).collect();
    let grads = g.backward_wrt(eps, &seed, &nodes).unwrap();
    let mut checked = 0;
    for rec in &records {
        let analytic = grads.get_or_zeros(&g, rec.weight_node);
        for _ in 0..12 {
            let i = r.gen_range(0..analytic.numel());
            let fd = central(&g, eps, &seed, rec.weight_node, i);
            let e = rel_err(analytic.data()[i], fd, FLOOR);
            assert!(e < 1e-5, "layer {} entry {i}: {} vs {fd}", rec.layer_id, analytic.data()[i]);
            checked += 1;
        }
    }
    assert!(checked >= 20);
}
