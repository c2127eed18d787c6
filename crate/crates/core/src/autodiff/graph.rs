use super::tensor::{gemm, Tensor};
use super::AutodiffError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operations recorded on the tape. Shapes are checked when a node is applied.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// `x[m,k] * w[k,n] + b[1,n]`
    Affine,
    Relu,
    Add,
    Sub,
    /// Elementwise product of equal shapes.
    Mul,
    Scale(f64),
    Square,
    PosPart,
    NegPart,
    /// Mean of all entries, `[1,1]`.
    Mean,
    /// Sum of all entries, `[1,1]`.
    Sum,
    /// Sum over columns, `[m,1]`.
    RowSum,
    /// Sums consecutive column blocks of the given widths, `[m, widths.len()]`.
    BlockSum(Vec<usize>),
    ConcatCols,
    SliceCols {
        start: usize,
        end: usize,
    },
    SliceRows {
        start: usize,
        end: usize,
    },
    GatherCols(Vec<usize>),
    /// Inner product of two equal-shape tensors, `[1,1]`.
    Dot,
    /// Repeats a `[1,n]` row `m` times.
    BroadcastRows(usize),
}

impl OpKind {
    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Affine => Some(3),
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Dot => Some(2),
            OpKind::ConcatCols => None,
            _ => Some(1),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Option<OpKind>,
    inputs: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
    trainable: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order and the backward
/// pass walks them in exact reverse order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`; zeros when the node does not
    /// influence the loss.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[id.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        match self.grads[id.0].take() {
            Some(g) => g,
            None => {
                let [r, c] = self.shapes[id.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn mismatch(msg: String) -> AutodiffError {
    AutodiffError::ShapeMismatch(msg)
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

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value,
            needs_grad: trainable,
            trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.nodes[id.0].trainable
    }

    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if let Some(n) = kind.arity() {
            if inputs.len() != n {
                return Err(AutodiffError::Unsupported(format!(
                    "{kind:?} takes {n} inputs, got {}",
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(AutodiffError::Unsupported(format!("{kind:?} needs inputs")));
        }
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(AutodiffError::Unsupported(format!("unknown node {}", id.0)));
            }
        }
        let value = self.forward(&kind, inputs)?;
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite(format!("{kind:?}")));
        }
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op: Some(kind),
            inputs: inputs.to_vec(),
            value,
            needs_grad,
            trainable: false,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn forward(&self, kind: &OpKind, inputs: &[NodeId]) -> Result<Tensor, AutodiffError> {
        let v = |i: usize| &self.nodes[inputs[i].0].value;
        let same_shape = |a: &Tensor, b: &Tensor| -> Result<(), AutodiffError> {
            if a.shape() != b.shape() {
                return Err(mismatch(format!("{kind:?}: {:?} vs {:?}", a.shape(), b.shape())));
            }
            Ok(())
        };
        Ok(match kind {
            OpKind::Affine => {
                let (x, w, b) = (v(0), v(1), v(2));
                let (m, k, n) = (x.rows(), x.cols(), w.cols());
                if w.rows() != k || b.shape() != [1, n] {
                    return Err(mismatch(format!(
                        "affine: x {:?}, w {:?}, b {:?}",
                        x.shape(),
                        w.shape(),
                        b.shape()
                    )));
                }
                let mut out = Tensor::zeros(m, n);
                for r in 0..m {
                    out.data_mut()[r * n..(r + 1) * n].copy_from_slice(b.data());
                }
                gemm(
                    m,
                    k,
                    n,
                    x.data(),
                    k as isize,
                    1,
                    w.data(),
                    n as isize,
                    1,
                    out.data_mut(),
                    true,
                );
                out
            }
            OpKind::Relu | OpKind::PosPart => v(0).map(|a| if a > 0.0 { a } else { 0.0 }),
            OpKind::NegPart => v(0).map(|a| if a < 0.0 { -a } else { 0.0 }),
            OpKind::Add => {
                same_shape(v(0), v(1))?;
                v(0).zip_map(v(1), |a, b| a + b)
            }
            OpKind::Sub => {
                same_shape(v(0), v(1))?;
                v(0).zip_map(v(1), |a, b| a - b)
            }
            OpKind::Mul => {
                same_shape(v(0), v(1))?;
                v(0).zip_map(v(1), |a, b| a * b)
            }
            OpKind::Scale(c) => v(0).map(|a| a * c),
            OpKind::Square => v(0).map(|a| a * a),
            OpKind::Mean => {
                let x = v(0);
                if x.is_empty() {
                    return Err(mismatch("mean of empty tensor".into()));
                }
                Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
            }
            OpKind::Sum => Tensor::scalar(v(0).data().iter().sum()),
            OpKind::RowSum => {
                let x = v(0);
                Tensor::column((0..x.rows()).map(|r| x.row_slice(r).iter().sum()).collect())
            }
            OpKind::BlockSum(widths) => {
                let x = v(0);
                if widths.iter().sum::<usize>() != x.cols() {
                    return Err(mismatch(format!(
                        "block sum widths {:?} vs {} columns",
                        widths,
                        x.cols()
                    )));
                }
                let nb = widths.len();
                let mut out = Tensor::zeros(x.rows(), nb);
                for r in 0..x.rows() {
                    let row = x.row_slice(r);
                    let mut start = 0;
                    for (j, &w) in widths.iter().enumerate() {
                        out.data_mut()[r * nb + j] = row[start..start + w].iter().sum();
                        start += w;
                    }
                }
                out
            }
            OpKind::ConcatCols => {
                let rows = v(0).rows();
                let mut cols = 0;
                for i in 0..inputs.len() {
                    if v(i).rows() != rows {
                        return Err(mismatch(format!("concat: {} rows vs {}", v(i).rows(), rows)));
                    }
                    cols += v(i).cols();
                }
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for i in 0..inputs.len() {
                        data.extend_from_slice(v(i).row_slice(r));
                    }
                }
                Tensor::new([rows, cols], data)?
            }
            OpKind::SliceCols { start, end } => {
                let x = v(0);
                if start >= end || *end > x.cols() {
                    return Err(mismatch(format!("column slice {start}..{end} of {:?}", x.shape())));
                }
                let mut data = Vec::with_capacity(x.rows() * (end - start));
                for r in 0..x.rows() {
                    data.extend_from_slice(&x.row_slice(r)[*start..*end]);
                }
                Tensor::new([x.rows(), end - start], data)?
            }
            OpKind::SliceRows { start, end } => {
                let x = v(0);
                if start >= end || *end > x.rows() {
                    return Err(mismatch(format!("row slice {start}..{end} of {:?}", x.shape())));
                }
                let c = x.cols();
                Tensor::new([end - start, c], x.data()[start * c..end * c].to_vec())?
            }
            OpKind::GatherCols(idx) => {
                let x = v(0);
                if idx.iter().any(|&i| i >= x.cols()) {
                    return Err(mismatch(format!("gather {:?} of {:?}", idx, x.shape())));
                }
                let mut data = Vec::with_capacity(x.rows() * idx.len());
                for r in 0..x.rows() {
                    let row = x.row_slice(r);
                    data.extend(idx.iter().map(|&i| row[i]));
                }
                Tensor::new([x.rows(), idx.len()], data)?
            }
            OpKind::Dot => {
                same_shape(v(0), v(1))?;
                Tensor::scalar(v(0).data().iter().zip(v(1).data()).map(|(a, b)| a * b).sum())
            }
            OpKind::BroadcastRows(m) => {
                let x = v(0);
                if x.rows() != 1 {
                    return Err(mismatch(format!("broadcast needs one row, got {:?}", x.shape())));
                }
                let mut data = Vec::with_capacity(m * x.cols());
                for _ in 0..*m {
                    data.extend_from_slice(x.data());
                }
                Tensor::new([*m, x.cols()], data)?
            }
        })
    }

    /// Gradients of a scalar `loss` node. Fan-out contributions are summed; the
    /// subgradient at every kink is zero.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, AutodiffError> {
        let lv = &self.nodes[loss.0].value;
        if lv.shape() != [1, 1] {
            return Err(mismatch(format!("loss must be [1,1], got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            let contributions = self.local_backward(op, &node.inputs, &node.value, &gout);
            // Non-leaf gradients are no longer needed once propagated; leaves keep theirs.
            for (input, contrib) in node.inputs.iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                match &mut grads[input.0] {
                    Some(existing) => existing.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        let mut shapes: Vec<[usize; 2]> = self.nodes.iter().map(|n| n.value.shape()).collect();
        shapes.truncate(self.nodes.len());
        grads.resize(self.nodes.len(), None);
        for (i, n) in self.nodes.iter().enumerate() {
            if n.op.is_some() {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn local_backward(&self, op: &OpKind, inputs: &[NodeId], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        let need = |i: usize| self.nodes[inputs[i].0].needs_grad;
        let only = |i: usize, t: Tensor| -> Vec<Option<Tensor>> {
            let mut v = vec![None; inputs.len()];
            if need(i) {
                v[i] = Some(t);
            }
            v
        };
        match op {
            OpKind::Affine => {
                let (x, w) = (val(0), val(1));
                let (m, k, n) = (x.rows(), x.cols(), w.cols());
                let dx = need(0).then(|| {
                    let mut dx = Tensor::zeros(m, k);
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        n as isize,
                        1,
                        w.data(),
                        1,
                        n as isize,
                        dx.data_mut(),
                        false,
                    );
                    dx
                });
                let dw = need(1).then(|| {
                    let mut dw = Tensor::zeros(k, n);
                    gemm(
                        k,
                        m,
                        n,
                        x.data(),
                        1,
                        k as isize,
                        g.data(),
                        n as isize,
                        1,
                        dw.data_mut(),
                        false,
                    );
                    dw
                });
                let db = need(2).then(|| {
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for (d, v) in db.iter_mut().zip(g.row_slice(r)) {
                            *d += v;
                        }
                    }
                    Tensor::row(db)
                });
                vec![dx, dw, db]
            }
            OpKind::Relu | OpKind::PosPart => only(0, val(0).zip_map(g, |a, gi| if a > 0.0 { gi } else { 0.0 })),
            OpKind::NegPart => only(0, val(0).zip_map(g, |a, gi| if a < 0.0 { -gi } else { 0.0 })),
            OpKind::Add => vec![need(0).then(|| g.clone()), need(1).then(|| g.clone())],
            OpKind::Sub => vec![need(0).then(|| g.clone()), need(1).then(|| g.map(|v| -v))],
            OpKind::Mul => vec![
                need(0).then(|| g.zip_map(val(1), |a, b| a * b)),
                need(1).then(|| g.zip_map(val(0), |a, b| a * b)),
            ],
            OpKind::Scale(c) => only(0, g.map(|v| v * c)),
            OpKind::Square => only(0, val(0).zip_map(g, |a, gi| 2.0 * a * gi)),
            OpKind::Mean => {
                let x = val(0);
                only(0, Tensor::filled(x.rows(), x.cols(), g.item() / x.len() as f64))
            }
            OpKind::Sum => {
                let x = val(0);
                only(0, Tensor::filled(x.rows(), x.cols(), g.item()))
            }
            OpKind::RowSum => {
                let x = val(0);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                let c = x.cols();
                for r in 0..x.rows() {
                    let gr = g.data()[r];
                    d.data_mut()[r * c..(r + 1) * c].iter_mut().for_each(|v| *v = gr);
                }
                only(0, d)
            }
            OpKind::BlockSum(widths) => {
                let x = val(0);
                let (rows, cols, nb) = (x.rows(), x.cols(), widths.len());
                let mut d = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let mut start = 0;
                    for (j, &w) in widths.iter().enumerate() {
                        let gj = g.data()[r * nb + j];
                        d.data_mut()[r * cols + start..r * cols + start + w]
                            .iter_mut()
                            .for_each(|v| *v = gj);
                        start += w;
                    }
                }
                only(0, d)
            }
            OpKind::ConcatCols => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                let mut res = Vec::with_capacity(inputs.len());
                for i in 0..inputs.len() {
                    let c = val(i).cols();
                    if need(i) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                        }
                        res.push(Some(Tensor::new([rows, c], d).expect("concat grad shape")));
                    } else {
                        res.push(None);
                    }
                    offset += c;
                }
                res
            }
            OpKind::SliceCols { start, end } => {
                let x = val(0);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                let (c, w) = (x.cols(), end - start);
                for r in 0..x.rows() {
                    d.data_mut()[r * c + start..r * c + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                only(0, d)
            }
            OpKind::SliceRows { start, end } => {
                let x = val(0);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                let c = x.cols();
                d.data_mut()[start * c..end * c].copy_from_slice(g.data());
                only(0, d)
            }
            OpKind::GatherCols(idx) => {
                let x = val(0);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                let (c, w) = (x.cols(), idx.len());
                for r in 0..x.rows() {
                    for (k, &i) in idx.iter().enumerate() {
                        d.data_mut()[r * c + i] += g.data()[r * w + k];
                    }
                }
                only(0, d)
            }
            OpKind::Dot => {
                let s = g.item();
                vec![
                    need(0).then(|| val(1).map(|b| b * s)),
                    need(1).then(|| val(0).map(|a| a * s)),
                ]
            }
            OpKind::BroadcastRows(m) => {
                let c = out.cols();
                let mut d = vec![0.0; c];
                for r in 0..*m {
                    for (a, b) in d.iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                        *a += b;
                    }
                }
                only(0, Tensor::row(d))
            }
        }
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(OpKind::Affine, &[x, w, b])
    }
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(OpKind::Relu, &[x])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        self.apply(OpKind::Scale(c), &[a])
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(OpKind::Square, &[a])
    }
    pub fn pos_part(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(OpKind::PosPart, &[a])
    }
    pub fn neg_part(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(OpKind::NegPart, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(OpKind::Mean, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(OpKind::Sum, &[a])
    }
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(OpKind::RowSum, &[a])
    }
    pub fn block_sum(&mut self, a: NodeId, widths: Vec<usize>) -> Result<NodeId, AutodiffError> {
        self.apply(OpKind::BlockSum(widths), &[a])
    }
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        self.apply(OpKind::ConcatCols, parts)
    }
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, AutodiffError> {
        self.apply(OpKind::SliceCols { start, end }, &[a])
    }
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, AutodiffError> {
        self.apply(OpKind::SliceRows { start, end }, &[a])
    }
    pub fn gather_cols(&mut self, a: NodeId, idx: Vec<usize>) -> Result<NodeId, AutodiffError> {
        self.apply(OpKind::GatherCols(idx), &[a])
    }
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(OpKind::Dot, &[a, b])
    }
    pub fn broadcast_rows(&mut self, a: NodeId, m: usize) -> Result<NodeId, AutodiffError> {
        self.apply(OpKind::BroadcastRows(m), &[a])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::row(v.to_vec())
    }

    #[test]
    fn relu_forward_and_kink_subgradient() {
        let mut g = Graph::new();
        let x = g.parameter(row(&[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn square_of_sum_gradient() {
        // L = (a + b)^2 at a=1, b=2: dL/da = dL/db = 6
        let mut g = Graph::new();
        let a = g.parameter(Tensor::scalar(1.0));
        let b = g.parameter(Tensor::scalar(2.0));
        let s = g.add(a, b).unwrap();
        let l = g.square(s).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(a).item(), 6.0);
        assert_eq!(grads.wrt(b).item(), 6.0);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        // L = x*x + 3x at x = 2: dL/dx = 2x + 3 = 7
        let mut g = Graph::new();
        let x = g.parameter(Tensor::scalar(2.0));
        let xx = g.mul(x, x).unwrap();
        let x3 = g.scale(x, 3.0).unwrap();
        let l = g.add(xx, x3).unwrap();
        assert_eq!(g.backward(l).unwrap().wrt(x).item(), 7.0);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.parameter(row(&[1.0, 2.0]));
        let unused = g.parameter(Tensor::zeros(2, 3));
        let l = g.sum(x).unwrap();
        let grads = g.backward(l).unwrap();
        let gu = grads.wrt(unused);
        assert_eq!(gu.shape(), [2, 3]);
        assert!(gu.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_and_arity_are_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 2));
        let b = g.constant(Tensor::zeros(2, 3));
        assert!(matches!(g.add(a, b), Err(AutodiffError::ShapeMismatch(_))));
        assert!(matches!(g.apply(OpKind::Add, &[a]), Err(AutodiffError::Unsupported(_))));
        let l = g.constant(Tensor::zeros(2, 2));
        assert!(g.backward(l).is_err());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1e200));
        assert!(matches!(g.square(a), Err(AutodiffError::NonFinite(_))));
    }

    #[test]
    fn structural_ops_route_gradients() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = g.parameter(Tensor::new([2, 1], vec![7.0, 8.0]).unwrap());
        let cat = g.concat_cols(&[x, y]).unwrap();
        let gathered = g.gather_cols(cat, vec![3, 0, 0]).unwrap();
        let bs = g.block_sum(gathered, vec![1, 2]).unwrap();
        let sr = g.slice_rows(bs, 1, 2).unwrap();
        let sc = g.slice_cols(sr, 1, 2).unwrap();
        assert_eq!(g.value(sc).item(), 8.0);
        let l = g.sum(sc).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        assert_eq!(grads.wrt(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn broadcast_and_row_sum() {
        let mut g = Graph::new();
        let v = g.parameter(row(&[1.0, 2.0]));
        let b = g.broadcast_rows(v, 3).unwrap();
        let rs = g.row_sum(b).unwrap();
        assert_eq!(g.value(rs).data(), &[3.0, 3.0, 3.0]);
        let w = g.constant(Tensor::column(vec![1.0, 2.0, 3.0]));
        let l = g.dot(rs, w).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(v).data(), &[6.0, 6.0]);
    }
}
