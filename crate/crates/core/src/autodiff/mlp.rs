use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::container::{Container, ContainerError};
use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use super::AutodiffError;

/// Layer widths of a fully connected network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl MlpArch {
    pub fn new(input: usize, hidden: Vec<usize>, output: usize) -> Self {
        Self { input, hidden, output }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.output);
        w
    }

    pub fn parameter_count(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }
}

/// Weights `[fan_in, fan_out]` and biases `[1, fan_out]` for each layer. ReLU
/// follows every layer except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub arch: MlpArch,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

/// Parameter handles of an [`MlpParams`] placed on a graph.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl MlpParams {
    /// He-normal weights (variance `2 / fan_in`) and zero biases.
    pub fn init(arch: MlpArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = arch.widths();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for p in widths.windows(2) {
            let (fan_in, fan_out) = (p[0], p[1]);
            let sd = (2.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sd * z
                })
                .collect();
            weights.push(Tensor::new([fan_in, fan_out], data).expect("weight shape"));
            biases.push(Tensor::zeros(1, fan_out));
        }
        Self { arch, weights, biases }
    }

    pub fn from_parts(arch: MlpArch, weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self, AutodiffError> {
        let widths = arch.widths();
        if weights.len() != widths.len() - 1 || biases.len() != weights.len() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "expected {} layers, got {} weights and {} biases",
                widths.len() - 1,
                weights.len(),
                biases.len()
            )));
        }
        for (l, p) in widths.windows(2).enumerate() {
            if weights[l].shape() != [p[0], p[1]] || biases[l].shape() != [1, p[1]] {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "layer {l}: weight {:?}, bias {:?}, expected [{}, {}]",
                    weights[l].shape(),
                    biases[l].shape(),
                    p[0],
                    p[1]
                )));
            }
        }
        Ok(Self { arch, weights, biases })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.parameter(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BoundMlp {
            weights: self.weights.iter().map(&mut leaf).collect(),
            biases: self.biases.iter().map(&mut leaf).collect(),
        }
    }

    /// Tape-free evaluation on a `[rows, input]` batch.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor, AutodiffError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(input.clone());
        let y = bound.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.weights.iter().chain(&self.biases).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().chain(self.biases.iter_mut()).collect()
    }

    pub fn write_arrays(&self, c: &mut Container, prefix: &str) {
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            c.push(format!("{prefix}.w{l}"), w.clone());
            c.push(format!("{prefix}.b{l}"), b.clone());
        }
    }

    pub fn read_arrays(c: &Container, prefix: &str, arch: MlpArch) -> Result<Self, ContainerError> {
        let layers = arch.hidden.len() + 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            weights.push(c.get(&format!("{prefix}.w{l}"))?.clone());
            biases.push(c.get(&format!("{prefix}.b{l}"))?.clone());
        }
        Self::from_parts(arch, weights, biases).map_err(|e| ContainerError::Header(e.to_string()))
    }
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, input: NodeId) -> Result<NodeId, AutodiffError> {
        let layers = self.weights.len();
        let mut h = input;
        for l in 0..layers {
            h = g.affine(h, self.weights[l], self.biases[l])?;
            if l + 1 < layers {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Node ids in the same order as [`MlpParams::tensors`].
    pub fn nodes(&self) -> Vec<NodeId> {
        self.weights.iter().chain(&self.biases).copied().collect()
    }
}
