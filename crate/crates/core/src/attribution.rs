//! Gradient-weighted attention attribution: the Jacobian of the predicted
//! noise with respect to one layer's post-softmax attention weights, and the
//! per-subject importance field derived from it.

use crate::maskops::ScoreField;
use crate::nn::{AttentionRecord, Vocabulary};
use crate::{Error, Graph, NodeId, Result, Tensor};

/// How the attention-side axes are reduced into latent space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScoreMode {
    /// Sum over every head and attention position.
    #[default]
    Full,
    /// Only the attention position nearest to each latent cell.
    Diagonal,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ScoreMode::Full),
            "diagonal" => Ok(ScoreMode::Diagonal),
            other => Err(Error::Attribution(format!(
                "unknown score mode '{other}' (expected full or diagonal)"
            ))),
        }
    }
}

/// `∂ε̂ / ∂W_A` for one layer: rows index flattened `(c, x, y)` outputs,
/// columns index flattened `(h, p, n)` weights.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianBlock {
    pub layer_id: usize,
    /// `[C·X·Y, H·P²·N]`.
    pub values: Tensor,
    /// Shape of the output the rows enumerate.
    pub output_shape: Vec<usize>,
}

impl JacobianBlock {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values.data()[row * self.values.shape()[1] + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let w = self.values.shape()[1];
        &self.values.data()[row * w..(row + 1) * w]
    }
}

fn column(record: &AttentionRecord, h: usize, p: usize, n: usize) -> usize {
    (h * record.grid * record.grid + p) * record.tokens + n
}

/// One restricted reverse pass per output element, each seeded with a one-hot
/// cotangent, reading the gradient at `record.weight_node`.
pub fn attention_jacobian(graph: &Graph, eps_node: NodeId, record: &AttentionRecord) -> Result<JacobianBlock> {
    if !graph.contains(record.weight_node) || !graph.contains(eps_node) {
        return Err(Error::Attribution(format!(
            "record for layer {} is detached from this graph",
            record.layer_id
        )));
    }
    let cols = record.heads * record.grid * record.grid * record.tokens;
    if graph.value(record.weight_node).numel() != cols || record.weights.numel() != cols {
        return Err(Error::Attribution(format!(
            "layer {}: weight node holds {} entries, record describes {cols} (batched pass?)",
            record.layer_id,
            graph.value(record.weight_node).numel()
        )));
    }
    let out_shape = graph.value(eps_node).shape().to_vec();
    let rows: usize = out_shape.iter().product();
    let plan = graph.plan(eps_node, &[record.weight_node])?;
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let seed = Tensor::one_hot(&out_shape, r);
        let grads = graph.backward_with_plan(&plan, &seed)?;
        match grads.get(record.weight_node) {
            Some(g) => values.extend_from_slice(g.data()),
            None => values.resize(values.len() + cols, 0.0),
        }
    }
    Ok(JacobianBlock {
        layer_id: record.layer_id,
        values: Tensor::new(vec![rows, cols], values)?,
        output_shape: out_shape,
    })
}

/// Importance of subject token `subject` for every latent element.
///
/// Full mode: `S(r) = Σ_{h,p} W_A(h,p,s) · |J(r, (h,p,s))|`. Diagonal mode
/// restricts `p` to the grid cell nearest to the latent position of `r`.
pub fn importance_scores(
    record: &AttentionRecord,
    jacobian: &JacobianBlock,
    subject: usize,
    mode: ScoreMode,
) -> Result<ScoreField> {
    if subject >= record.tokens {
        return Err(Error::Attribution(format!(
            "subject index {subject} outside [0, {})",
            record.tokens
        )));
    }
    let pp = record.grid * record.grid;
    let cols = record.heads * pp * record.tokens;
    if jacobian.values.shape()[1] != cols {
        return Err(Error::Attribution(format!(
            "jacobian has {} columns, layer {} needs {cols}",
            jacobian.values.shape()[1],
            record.layer_id
        )));
    }
    let shape = &jacobian.output_shape;
    if shape.len() != 3 {
        return Err(Error::Attribution(format!(
            "expected a [C, X, Y] output, got {shape:?}"
        )));
    }
    let (xs, ys) = (shape[1], shape[2]);
    let rows = jacobian.values.shape()[0];

    // Weight slice of the subject token, laid out `[h, p]`.
    let w: Vec<f64> = (0..record.heads)
        .flat_map(|h| (0..pp).map(move |p| (h, p)))
        .map(|(h, p)| record.weight(h, p, subject))
        .collect();
    let mut values = vec![0.0; rows];
    for (r, out) in values.iter_mut().enumerate() {
        let row = jacobian.row(r);
        *out = match mode {
            ScoreMode::Full => (0..record.heads * pp)
                .map(|hp| w[hp] * row[hp * record.tokens + subject].abs())
                .sum(),
            ScoreMode::Diagonal => {
                let (x, y) = ((r / ys) % xs, r % ys);
                let p = (x * record.grid / xs) * record.grid + y * record.grid / ys;
                (0..record.heads)
                    .map(|h| w[h * pp + p] * row[column(record, h, p, subject)].abs())
                    .sum()
            }
        };
    }
    Ok(ScoreField {
        subject,
        values: Tensor::new(shape.clone(), values)?,
    })
}

/// Positions of `subjects` in the padded prompt `tokens`. A word that occurs
/// more than once resolves to its first occurrence.
pub fn subject_token_indices(vocab: &Vocabulary, tokens: &[usize], subjects: &[&str]) -> Result<Vec<usize>> {
    subjects
        .iter()
        .map(|word| {
            vocab
                .id(word)
                .filter(|&id| id != Vocabulary::PAD)
                .and_then(|id| tokens.iter().position(|&t| t == id))
                .ok_or_else(|| {
                    Error::Attribution(format!("subject word '{word}' does not occur in the prompt"))
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{embed_tokens, unet_forward, ModelKind, ModelParams, LATENT_SHAPE};
    use crate::rng;

    fn random_record(seed: u64, heads: usize, grid: usize, tokens: usize) -> (AttentionRecord, JacobianBlock) {
        let mut r = rng::stream(seed, "test");
        let logits = rng::normal_tensor(&mut r, &[heads, grid * grid, tokens]);
        let mut w = logits.data().to_vec();
        for row in w.chunks_mut(tokens) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            row.iter_mut().for_each(|v| *v = (*v - m).exp() / s);
        }
        let rec = AttentionRecord {
            layer_id: 0,
            heads,
            grid,
            tokens,
            weights: Tensor::new(vec![heads, grid * grid, tokens], w).unwrap(),
            weight_node: NodeId(0),
        };
        let cols = heads * grid * grid * tokens;
        let jac = JacobianBlock {
            layer_id: 0,
            values: rng::normal_tensor(&mut r, &[256, cols]),
            output_shape: LATENT_SHAPE.to_vec(),
        };
        (rec, jac)
    }

    #[test]
    fn zero_jacobian_gives_zero_field() {
        let (rec, mut jac) = random_record(1, 2, 4, 8);
        jac.values = Tensor::zeros(jac.values.shape());
        for mode in [ScoreMode::Full, ScoreMode::Diagonal] {
            let f = importance_scores(&rec, &jac, 2, mode).unwrap();
            assert_eq!(f.values.max_abs(), 0.0);
        }
    }

    #[test]
    fn scores_nonnegative_and_subject_checked() {
        let (rec, jac) = random_record(2, 2, 8, 8);
        for mode in [ScoreMode::Full, ScoreMode::Diagonal] {
            let f = importance_scores(&rec, &jac, 3, mode).unwrap();
            assert!(f.values.min() >= 0.0);
            assert_eq!(f.values.shape(), &LATENT_SHAPE);
        }
        assert!(importance_scores(&rec, &jac, 8, ScoreMode::Full).is_err());
    }

    #[test]
    fn diagonal_reads_the_matching_cell() {
        // At P = 8 the diagonal field of row (c, x, y) uses cell p = x·8 + y.
        let (rec, jac) = random_record(3, 2, 8, 8);
        let f = importance_scores(&rec, &jac, 1, ScoreMode::Diagonal).unwrap();
        let (c, x, y) = (2, 5, 3);
        let r = c * 64 + x * 8 + y;
        let p = x * 8 + y;
        let want: f64 = (0..2)
            .map(|h| rec.weight(h, p, 1) * jac.get(r, column(&rec, h, p, 1)).abs())
            .sum();
        assert_eq!(f.values.at(&[c, x, y]), want);
    }

    #[test]
    fn subject_lookup() {
        let v = Vocabulary::standard();
        let toks = v.tokenize("a red circle in forest").unwrap();
        assert_eq!(subject_token_indices(&v, &toks, &["red", "circle"]).unwrap(), vec![1, 2]);
        assert!(subject_token_indices(&v, &toks, &[]).unwrap().is_empty());
        let err = subject_token_indices(&v, &toks, &["square"]).unwrap_err().to_string();
        assert!(err.contains("square"), "{err}");
        let dup = v.tokenize("a red circle in a forest").unwrap();
        assert_eq!(subject_token_indices(&v, &dup, &["a"]).unwrap(), vec![0]);
    }

    #[test]
    fn dead_attention_path_has_zero_jacobian() {
        let mut p = ModelParams::init(ModelKind::Ldm, &mut rng::stream(0, "params"));
        for name in ["unet.attn_up.out.weight", "unet.attn_up.out.bias"] {
            let t = p.get(name).unwrap();
            p.insert(name, Tensor::zeros(t.shape()));
        }
        let z = rng::normal_tensor(&mut rng::stream(0, "z"), &LATENT_SHAPE);
        let ids = Vocabulary::standard().tokenize("a red circle in forest").unwrap();
        let text = embed_tokens(&p, &ids).unwrap();
        let mut g = Graph::new();
        let (eps, recs) = unet_forward(&mut g, &p, &z, 30, &text).unwrap();
        let up = recs.iter().find(|r| r.grid == 8).unwrap();
        let jac = attention_jacobian(&g, eps, up).unwrap();
        assert_eq!(jac.values.max_abs(), 0.0);
        let mid = recs.iter().find(|r| r.grid == 4).unwrap();
        assert!(attention_jacobian(&g, eps, mid).unwrap().values.max_abs() > 0.0);
    }

    #[test]
    fn detached_record_rejected() {
        let (mut rec, _) = random_record(4, 1, 1, 2);
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2]));
        rec.weight_node = NodeId(17);
        assert!(attention_jacobian(&g, a, &rec).is_err());
    }
}
