//! Finite-difference gradient checks and random computation graphs to run them on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Graph, NodeId, OpKind, Tensor};

/// Relative error `|g - g_fd| / max(|g|, |g_fd|)` in the Euclidean norm between
/// reverse-mode gradients and central differences of the scalar `loss`.
pub fn gradient_error(
    params: &[Tensor],
    eps: f64,
    loss: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId, AutodiffError>,
) -> Result<f64, AutodiffError> {
    let eval = |values: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = loss(&mut g, &ids)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|t| g.parameter(t.clone())).collect();
    let out = loss(&mut g, &ids)?;
    let grads = g.backward(out)?;
    let analytic: Vec<f64> = ids.iter().flat_map(|&id| grads.wrt(id).into_data()).collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = params.to_vec();
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let base = params[p].data()[i];
            work[p].data_mut()[i] = base + eps;
            let up = eval(&work)?;
            work[p].data_mut()[i] = base - eps;
            let down = eval(&work)?;
            work[p].data_mut()[i] = base;
            numeric.push((up - down) / (2.0 * eps));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    Ok(if scale == 0.0 { 0.0 } else { norm(&diff) / scale })
}

/// A randomly generated scalar-valued graph over a handful of parameters,
/// covering every operation kind.
#[derive(Debug, Clone)]
pub struct RandomGraph {
    pub params: Vec<Tensor>,
    constants: Vec<Tensor>,
    steps: Vec<(OpKind, Vec<usize>)>,
    output: usize,
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::new([rows, cols], data).expect("shape")
}

fn is_kink(op: &OpKind) -> bool {
    matches!(op, OpKind::Relu | OpKind::PosPart | OpKind::NegPart)
}

impl RandomGraph {
    /// Generates a graph whose kinked operations stay at least `margin` away
    /// from their kinks at the sampled parameter values.
    pub fn generate(seed: u64, margin: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let structure = Self::structure(&mut rng);
        for _ in 0..1000 {
            let mut g = structure.clone();
            g.params = structure
                .params
                .iter()
                .map(|t| random_tensor(&mut rng, t.rows(), t.cols()))
                .collect();
            if g.kink_distance().is_some_and(|d| d >= margin) {
                return g;
            }
        }
        panic!("no parameter draw clears the kinks of graph {seed}");
    }

    fn structure(rng: &mut ChaCha8Rng) -> Self {
        let m = rng.random_range(1..=3);
        let k = rng.random_range(1..=4);
        let n = rng.random_range(1..=3);
        let params = vec![
            random_tensor(rng, m, k),
            random_tensor(rng, m, k),
            random_tensor(rng, k, n),
            random_tensor(rng, 1, n),
            random_tensor(rng, 1, k),
        ];
        let mut shapes: Vec<[usize; 2]> = params.iter().map(|t| t.shape()).collect();
        let mut steps: Vec<(OpKind, Vec<usize>)> = Vec::new();
        let n_ops = rng.random_range(8..=16);
        while steps.len() < n_ops {
            let a = rng.random_range(0..shapes.len());
            let [r, c] = shapes[a];
            let same: Vec<usize> = (0..shapes.len()).filter(|&i| shapes[i] == [r, c]).collect();
            let b = same[rng.random_range(0..same.len())];
            let (op, inputs, shape) = match rng.random_range(0..18) {
                0 if c == k => (OpKind::Affine, vec![a, 2, 3], [r, n]),
                1 => (OpKind::Relu, vec![a], [r, c]),
                2 => (OpKind::Add, vec![a, b], [r, c]),
                3 => (OpKind::Sub, vec![a, b], [r, c]),
                4 => (OpKind::Mul, vec![a, b], [r, c]),
                5 => (OpKind::Scale(rng.random_range(-2.0..2.0)), vec![a], [r, c]),
                6 => (OpKind::Square, vec![a], [r, c]),
                7 => (OpKind::PosPart, vec![a], [r, c]),
                8 => (OpKind::NegPart, vec![a], [r, c]),
                9 => (OpKind::Mean, vec![a], [1, 1]),
                10 => (OpKind::Sum, vec![a], [1, 1]),
                11 => (OpKind::RowSum, vec![a], [r, 1]),
                12 if c >= 2 => {
                    let w = rng.random_range(1..c);
                    (OpKind::BlockSum(vec![w, c - w]), vec![a], [r, 2])
                }
                13 => {
                    let rows: Vec<usize> = (0..shapes.len()).filter(|&i| shapes[i][0] == r).collect();
                    let other = rows[rng.random_range(0..rows.len())];
                    (OpKind::ConcatCols, vec![a, other], [r, c + shapes[other][1]])
                }
                14 if c >= 2 => {
                    let start = rng.random_range(0..c - 1);
                    let end = rng.random_range(start + 1..=c);
                    (OpKind::SliceCols { start, end }, vec![a], [r, end - start])
                }
                15 if r >= 2 => {
                    let start = rng.random_range(0..r - 1);
                    let end = rng.random_range(start + 1..=r);
                    (OpKind::SliceRows { start, end }, vec![a], [end - start, c])
                }
                16 => {
                    let idx: Vec<usize> = (0..rng.random_range(1..=4)).map(|_| rng.random_range(0..c)).collect();
                    let w = idx.len();
                    (OpKind::GatherCols(idx), vec![a], [r, w])
                }
                17 if r == 1 => {
                    let rows = rng.random_range(1..=3);
                    (OpKind::BroadcastRows(rows), vec![a], [rows, c])
                }
                _ => (OpKind::Dot, vec![a, b], [1, 1]),
            };
            steps.push((op, inputs));
            shapes.push(shape);
        }
        // Output: inner products of the last two nodes with fixed random weights.
        let last = shapes.len() - 1;
        let prev = shapes.len() - 2;
        let constants = vec![
            random_tensor(rng, shapes[last][0], shapes[last][1]),
            random_tensor(rng, shapes[prev][0], shapes[prev][1]),
        ];
        let c0 = shapes.len();
        let base = c0 + constants.len();
        let mut steps_all = steps;
        steps_all.push((OpKind::Dot, vec![last, c0]));
        steps_all.push((OpKind::Dot, vec![prev, c0 + 1]));
        steps_all.push((OpKind::Add, vec![base, base + 1]));
        Self {
            params,
            constants,
            steps: steps_all,
            output: base + 2,
        }
    }

    /// Node indices: parameters, then the step outputs, then the output
    /// weights, then the output reduction.
    pub fn build(&self, g: &mut Graph, params: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let mut nodes: Vec<NodeId> = params.to_vec();
        let body = self.steps.len() - 3;
        for (op, inputs) in &self.steps[..body] {
            let ids: Vec<NodeId> = inputs.iter().map(|&i| nodes[i]).collect();
            nodes.push(g.apply(op.clone(), &ids)?);
        }
        for c in &self.constants {
            nodes.push(g.constant(c.clone()));
        }
        for (op, inputs) in &self.steps[body..] {
            let ids: Vec<NodeId> = inputs.iter().map(|&i| nodes[i]).collect();
            nodes.push(g.apply(op.clone(), &ids)?);
        }
        Ok(nodes[self.output])
    }

    /// Smallest nonzero absolute input to a kinked operation, `None` if evaluation fails.
    pub fn kink_distance(&self) -> Option<f64> {
        let mut g = Graph::new();
        let mut nodes: Vec<NodeId> = self.params.iter().map(|t| g.constant(t.clone())).collect();
        let body = self.steps.len() - 3;
        let mut dist = f64::INFINITY;
        for (op, inputs) in &self.steps[..body] {
            let ids: Vec<NodeId> = inputs.iter().map(|&i| nodes[i]).collect();
            if is_kink(op) {
                // Exact zeros come from structurally constant subgraphs and stay put.
                dist = g
                    .value(ids[0])
                    .data()
                    .iter()
                    .filter(|v| **v != 0.0)
                    .fold(dist, |d, v| d.min(v.abs()));
            }
            nodes.push(g.apply(op.clone(), &ids).ok()?);
        }
        Some(dist)
    }

    pub fn op_kinds(&self) -> Vec<&OpKind> {
        self.steps.iter().map(|(op, _)| op).collect()
    }
}
