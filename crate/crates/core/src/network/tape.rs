//! Reverse-mode differentiation over a recorded sequence of activations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ops::{self, Activation, ConvGeometry, GroupStats};
use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Conv {
        input: NodeId,
        weight: ParamId,
        bias: Option<ParamId>,
        geo: ConvGeometry,
    },
    GroupNorm {
        input: NodeId,
        gamma: ParamId,
        beta: ParamId,
        stats: GroupStats,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Dropout {
        input: NodeId,
        mask: Vec<f64>,
    },
    Resize {
        input: NodeId,
        from: [usize; 3],
    },
    Sigmoid(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Activation>,
}

/// A forward pass. With `record` set every activation is kept so that
/// [`Graph::backward`] can run; otherwise [`Graph::release`] frees values the
/// caller no longer needs.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    record: bool,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore, record: bool) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            record,
        }
    }

    fn push(&mut self, op: Op, value: Activation) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Activation {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("activation was released")
    }

    pub fn take(&mut self, id: NodeId) -> Activation {
        if self.record {
            self.value(id).clone()
        } else {
            self.nodes[id.0].value.take().expect("activation was released")
        }
    }

    /// Drops an activation that will not be read again (no-op while recording).
    pub fn release(&mut self, id: NodeId) {
        if !self.record {
            self.nodes[id.0].value = None;
        }
    }

    pub fn input(&mut self, value: Activation) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn conv(&mut self, input: NodeId, weight: ParamId, bias: Option<ParamId>, geo: ConvGeometry) -> NodeId {
        let w = self.params.get(weight);
        let b = bias.map(|b| self.params.get(b).as_slice());
        let value = ops::conv3d(self.value(input), w.as_slice(), b, &geo);
        self.push(
            Op::Conv {
                input,
                weight,
                bias,
                geo,
            },
            value,
        )
    }

    pub fn group_norm(&mut self, input: NodeId, gamma: ParamId, beta: ParamId, groups: usize) -> NodeId {
        let (value, stats) = ops::group_norm(
            self.value(input),
            self.params.get(gamma).as_slice(),
            self.params.get(beta).as_slice(),
            groups,
        );
        self.push(
            Op::GroupNorm {
                input,
                gamma,
                beta,
                stats,
            },
            value,
        )
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).mapv(|v| v.max(0.0));
        self.push(Op::Relu(input), value)
    }

    /// Which ReLU inputs are positive, over every ReLU in recording order.
    /// Two passes with equal patterns lie on the same linear piece of every
    /// ReLU, which finite-difference checks need.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(input) = node.op {
                pattern.extend(self.value(input).iter().map(|&v| v > 0.0));
            }
        }
        pattern
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), value)
    }

    pub fn concat(&mut self, inputs: &[NodeId]) -> NodeId {
        let views: Vec<_> = inputs.iter().map(|&i| self.value(i).view()).collect();
        let value = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal spatial dims");
        let value = value.as_standard_layout().into_owned();
        self.push(Op::Concat(inputs.to_vec()), value)
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, input: NodeId, rate: f64, rng: &mut ChaCha8Rng) -> NodeId {
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(input).len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut value = self.value(input).clone();
        for (v, m) in value.iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push(Op::Dropout { input, mask }, value)
    }

    pub fn resize(&mut self, input: NodeId, dims: [usize; 3]) -> NodeId {
        let x = self.value(input);
        let from = [x.shape()[1], x.shape()[2], x.shape()[3]];
        let value = ops::resize(x, dims);
        self.push(Op::Resize { input, from }, value)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).mapv(ops::sigmoid);
        self.push(Op::Sigmoid(input), value)
    }

    /// Back-propagates `seed = ∂L/∂output` and returns `∂L/∂θ` for every
    /// parameter of the store (zero for parameters the pass did not touch).
    pub fn backward(&self, output: NodeId, seed: Activation) -> Vec<Vec<f64>> {
        assert!(self.record, "backward requires a recorded graph");
        let mut param_grads: Vec<Vec<f64>> = self
            .params
            .iter()
            .map(|p| vec![0.0; p.len()])
            .collect();
        let mut grads: Vec<Option<Activation>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        fn accumulate(slot: &mut Option<Activation>, g: Activation) {
            match slot {
                Some(existing) => *existing += &g,
                None => *slot = Some(g),
            }
        }
        fn add_into(dst: &mut [f64], src: &[f64]) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Conv {
                    input,
                    weight,
                    bias,
                    geo,
                } => {
                    let needs_input = !matches!(self.nodes[input.0].op, Op::Input);
                    let (gi, gw, gb) = ops::conv3d_backward(
                        self.value(*input),
                        self.params.get(*weight).as_slice(),
                        &g,
                        geo,
                        needs_input,
                    );
                    add_into(&mut param_grads[weight.index()], &gw);
                    if let Some(b) = bias {
                        add_into(&mut param_grads[b.index()], &gb);
                    }
                    if let Some(gi) = gi {
                        accumulate(&mut grads[input.0], gi);
                    }
                }
                Op::GroupNorm {
                    input,
                    gamma,
                    beta,
                    stats,
                } => {
                    let (gi, gg, gb) = ops::group_norm_backward(
                        self.value(*input),
                        self.params.get(*gamma).as_slice(),
                        stats,
                        &g,
                    );
                    add_into(&mut param_grads[gamma.index()], &gg);
                    add_into(&mut param_grads[beta.index()], &gb);
                    accumulate(&mut grads[input.0], gi);
                }
                Op::Relu(input) => {
                    let mut gi = g;
                    ndarray::Zip::from(&mut gi)
                        .and(self.value(*input))
                        .for_each(|g, &x| {
                            if x <= 0.0 {
                                *g = 0.0;
                            }
                        });
                    accumulate(&mut grads[input.0], gi);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Concat(inputs) => {
                    let mut offset = 0;
                    for input in inputs {
                        let c = self.value(*input).shape()[0];
                        let part = g
                            .slice(ndarray::s![offset..offset + c, .., .., ..])
                            .to_owned();
                        accumulate(&mut grads[input.0], part);
                        offset += c;
                    }
                }
                Op::Dropout { input, mask } => {
                    let mut gi = g;
                    for (v, m) in gi.iter_mut().zip(mask) {
                        *v *= m;
                    }
                    accumulate(&mut grads[input.0], gi);
                }
                Op::Resize { input, from } => {
                    accumulate(&mut grads[input.0], ops::resize_backward(&g, *from));
                }
                Op::Sigmoid(input) => {
                    let mut gi = g;
                    ndarray::Zip::from(&mut gi)
                        .and(self.nodes[idx].value.as_ref().expect("recorded"))
                        .for_each(|g, &s| *g *= s * (1.0 - s));
                    accumulate(&mut grads[input.0], gi);
                }
            }
        }
        param_grads
    }
}
