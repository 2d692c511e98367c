//! Dense tensors and a define-by-run reverse-mode differentiation tape.
//!
//! A [`Graph`] is an append-only list of nodes. Each node stores the operation
//! that produced it, the ids of its inputs (always earlier nodes) and its
//! forward value. [`Graph::backward`] walks the list in reverse and returns a
//! gradient for *every* node, intermediates included, which is what lets the
//! attribution code differentiate with respect to post-softmax attention
//! weights rather than parameters.

mod kernels;
mod ops;
mod tensor;

pub use ops::Op;
pub use tensor::Tensor;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients keyed by node. A missing entry means the gradient is zero.
#[derive(Clone, Debug)]
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }

    /// Gradient at `id`, materialising zeros when it is absent.
    pub fn get_or_zeros(&self, graph: &Graph, id: NodeId) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(id).shape()))
    }
}

/// Subset of nodes a restricted reverse pass needs to visit: those lying on a
/// path from one of the requested nodes to the seed. Built once and reused
/// when many seeds are pushed through the same graph.
#[derive(Clone, Debug)]
pub struct BackwardPlan {
    seed: NodeId,
    active: Vec<bool>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a root node (parameter or input).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn roots(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].op == Op::Leaf)
            .map(NodeId)
            .collect()
    }

    /// Appends a node computing `op` over existing nodes.
    pub fn forward_op(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if op == Op::Leaf {
            return Err(Error::Numerics("use Graph::input for leaf nodes".into()));
        }
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::Numerics(format!(
                "{}: input node {} does not exist",
                op.tag(),
                bad.0
            )));
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = op.eval(&vals)?;
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.0 < self.nodes.len()
    }

    /// Recomputes every node from the stored root values. Entries in
    /// `overrides` replace a node's value (root or intermediate) and the
    /// change is propagated to everything downstream.
    pub fn replay(&self, overrides: &[(NodeId, Tensor)]) -> Result<Vec<Tensor>> {
        let mut out: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some((_, v)) = overrides.iter().find(|(id, _)| id.0 == i) {
                if v.shape() != node.value.shape() {
                    return Err(Error::shape(
                        "replay",
                        format!(
                            "override for node {i} has shape {:?}, expected {:?}",
                            v.shape(),
                            node.value.shape()
                        ),
                    ));
                }
                out.push(v.clone());
                continue;
            }
            if node.op == Op::Leaf {
                out.push(node.value.clone());
                continue;
            }
            let vals: Vec<&Tensor> = node.inputs.iter().map(|id| &out[id.0]).collect();
            let v = node.op.eval(&vals)?;
            out.push(v);
        }
        Ok(out)
    }

    fn check_seed(&self, seed_node: NodeId, seed: &Tensor) -> Result<()> {
        if !self.contains(seed_node) {
            return Err(Error::Numerics(format!(
                "backward: seed node {} does not exist (graph has {} nodes)",
                seed_node.0,
                self.nodes.len()
            )));
        }
        let want = self.value(seed_node).shape();
        if seed.shape() != want {
            return Err(Error::shape(
                "backward",
                format!("seed shape {:?} != node shape {want:?}", seed.shape()),
            ));
        }
        Ok(())
    }

    /// Full reverse pass: gradient of `Σ seed ⊙ value(seed_node)` with respect
    /// to every node of the graph.
    pub fn backward(&self, seed_node: NodeId, seed: &Tensor) -> Result<GradientMap> {
        self.check_seed(seed_node, seed)?;
        let active = vec![true; self.nodes.len()];
        Ok(self.reverse(seed_node, seed, &active))
    }

    /// Plans a reverse pass that only touches nodes between `wrt` and `seed`.
    pub fn plan(&self, seed: NodeId, wrt: &[NodeId]) -> Result<BackwardPlan> {
        if !self.contains(seed) {
            return Err(Error::Numerics(format!(
                "plan: seed node {} does not exist",
                seed.0
            )));
        }
        if let Some(bad) = wrt.iter().find(|id| !self.contains(**id)) {
            return Err(Error::Numerics(format!(
                "plan: node {} does not exist",
                bad.0
            )));
        }
        let n = self.nodes.len();
        let mut downstream = vec![false; n];
        for id in wrt {
            downstream[id.0] = true;
        }
        for i in 0..n {
            if !downstream[i] && self.nodes[i].inputs.iter().any(|p| downstream[p.0]) {
                downstream[i] = true;
            }
        }
        let mut upstream = vec![false; n];
        upstream[seed.0] = true;
        for i in (0..=seed.0).rev() {
            if upstream[i] {
                for p in &self.nodes[i].inputs {
                    upstream[p.0] = true;
                }
            }
        }
        let active = downstream
            .iter()
            .zip(&upstream)
            .map(|(a, b)| *a && *b)
            .collect();
        Ok(BackwardPlan { seed, active })
    }

    /// Reverse pass restricted to a plan. Gradients are exact for every node
    /// the plan marks active and absent elsewhere.
    pub fn backward_with_plan(&self, plan: &BackwardPlan, seed: &Tensor) -> Result<GradientMap> {
        self.check_seed(plan.seed, seed)?;
        if plan.active.len() != self.nodes.len() {
            return Err(Error::Numerics("backward: plan built for another graph".into()));
        }
        Ok(self.reverse(plan.seed, seed, &plan.active))
    }

    /// Convenience wrapper: restricted pass returning only the nodes in `wrt`.
    pub fn backward_wrt(&self, seed_node: NodeId, seed: &Tensor, wrt: &[NodeId]) -> Result<GradientMap> {
        let plan = self.plan(seed_node, wrt)?;
        self.backward_with_plan(&plan, seed)
    }

    fn reverse(&self, seed_node: NodeId, seed: &Tensor, active: &[bool]) -> GradientMap {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if active[seed_node.0] {
            grads[seed_node.0] = Some(seed.clone());
        }
        for i in (0..=seed_node.0).rev() {
            let node = &self.nodes[i];
            if node.op == Op::Leaf || !active[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let need: Vec<bool> = node.inputs.iter().map(|p| active[p.0]).collect();
            if need.iter().any(|&b| b) {
                let vals: Vec<&Tensor> = node.inputs.iter().map(|p| &self.nodes[p.0].value).collect();
                let contribs = node.op.vjp(&vals, &node.value, &g, &need);
                for (p, c) in node.inputs.iter().zip(contribs) {
                    if let Some(c) = c {
                        match &mut grads[p.0] {
                            Some(acc) => acc.add_assign(&c),
                            slot => *slot = Some(c),
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }
        GradientMap { grads }
    }

    // Builders for the individual operations.

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.forward_op(Op::Scale(c), &[a])
    }

    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(Op::BiasAdd, &[x, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(Op::MatMul, &[a, b])
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Linear, &[x, w, b])
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        self.forward_op(Op::Conv2d { stride, pad }, &[x, w, b])
    }

    pub fn softmax(&mut self, x: NodeId, axis: isize) -> Result<NodeId> {
        let axis = self.resolve_axis("softmax", x, axis)?;
        self.forward_op(Op::Softmax { axis }, &[x])
    }

    pub fn log_softmax(&mut self, x: NodeId, axis: isize) -> Result<NodeId> {
        let axis = self.resolve_axis("log_softmax", x, axis)?;
        self.forward_op(Op::LogSoftmax { axis }, &[x])
    }

    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, eps: f64) -> Result<NodeId> {
        self.forward_op(Op::GroupNorm { groups, eps }, &[x, gamma, beta])
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Silu, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.forward_op(Op::Reshape(shape.to_vec()), &[x])
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        self.forward_op(Op::Permute(perm.to_vec()), &[x])
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.forward_op(Op::Concat { axis }, xs)
    }

    pub fn embed_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.forward_op(Op::EmbedLookup(ids.to_vec()), &[table])
    }

    pub fn mean(&mut self, x: NodeId, axis: isize) -> Result<NodeId> {
        let axis = self.resolve_axis("mean", x, axis)?;
        self.forward_op(Op::Mean { axis }, &[x])
    }

    /// Mean of every element, as a `[1]` tensor.
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.mean(flat, 0)
    }

    pub fn upsample_nearest2x(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(Op::UpsampleNearest2x, &[x])
    }

    pub fn downsample_avg2x(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(Op::DownsampleAvg2x, &[x])
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(Op::L2Normalize, &[x])
    }

    fn resolve_axis(&self, op: &'static str, x: NodeId, axis: isize) -> Result<usize> {
        if !self.contains(x) {
            return Err(Error::Numerics(format!("{op}: input node {} does not exist", x.0)));
        }
        let rank = self.value(x).rank() as isize;
        let a = if axis < 0 { rank + axis } else { axis };
        if a < 0 || a >= rank {
            return Err(Error::shape(
                op,
                format!("axis {axis} out of range for rank {rank}"),
            ));
        }
        Ok(a as usize)
    }
}

/// Central-difference estimate of `∂(Σ seed ⊙ value(seed_node)) / ∂node`,
/// obtained by perturbing each entry of `node` and replaying the graph.
pub fn finite_diff(graph: &Graph, node: NodeId, seed_node: NodeId, seed: &Tensor, h: f64) -> Result<Tensor> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Numerics(format!("finite_diff: step {h} must be positive")));
    }
    graph.check_seed(seed_node, seed)?;
    if !graph.contains(node) {
        return Err(Error::Numerics(format!(
            "finite_diff: node {} does not exist",
            node.0
        )));
    }
    let base = graph.value(node).clone();
    let mut out = Tensor::zeros(base.shape());
    let objective = |v: Tensor| -> Result<f64> {
        let vals = graph.replay(&[(node, v)])?;
        Ok(vals[seed_node.0].dot(seed))
    };
    for i in 0..base.numel() {
        let mut plus = base.clone();
        plus.data_mut()[i] += h;
        let mut minus = base.clone();
        minus.data_mut()[i] -= h;
        out.data_mut()[i] = (objective(plus)? - objective(minus)?) / (2.0 * h);
    }
    Ok(out)
}
