use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, NamedParams, CHECKPOINT_VERSION};
use crate::layers::{self, ConvGeometry, GruCache, GruShape, Padding};
use crate::NetError;

pub type NodeId = usize;

/// Layer kinds supported by the network graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Conv1d {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    Gru {
        hidden: usize,
    },
    Softmax,
    Relu,
}

/// Shape of a node value: `(rows, cols)`. Sequences are `(channels, time)`,
/// vectors are `(n, 1)`.
pub type Shape = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamView {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Input {
        name: String,
    },
    Concat(Vec<NodeId>),
    Layer {
        spec: LayerSpec,
        input: NodeId,
        /// Index into `param_views` for parameterized layers.
        params: Option<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Shape,
}

/// Incrementally assembles a [`Network`]. Nodes can only reference nodes
/// created before them, so the graph is acyclic by construction.
#[derive(Debug, Default)]
pub struct NetworkBuilder {
    nodes: Vec<Node>,
    views: Vec<ParamView>,
    fan_in: Vec<usize>,
    outputs: Vec<(String, NodeId)>,
    total: usize,
    error: Option<NetError>,
}

impl NetworkBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Shape) -> NodeId {
        self.nodes.push(Node { op, shape });
        self.nodes.len() - 1
    }

    fn fail(&mut self, msg: String) -> NodeId {
        if self.error.is_none() {
            self.error = Some(NetError::Build(msg));
        }
        // Keep handing out a valid id so builder calls can continue; `build` reports the error.
        self.push(Op::Concat(Vec::new()), (1, 1))
    }

    fn add_params(&mut self, name: &str, len: usize, fan_in: usize) -> Option<usize> {
        if self.views.iter().any(|v| v.name == name) {
            self.fail(format!("duplicate layer name `{name}`"));
            return None;
        }
        self.views.push(ParamView {
            name: name.to_string(),
            offset: self.total,
            len,
        });
        self.fan_in.push(fan_in);
        self.total += len;
        Some(self.views.len() - 1)
    }

    pub fn input(&mut self, name: &str, shape: Shape) -> NodeId {
        if shape.0 == 0 || shape.1 == 0 {
            return self.fail(format!("input `{name}` has an empty dimension"));
        }
        self.push(
            Op::Input {
                name: name.to_string(),
            },
            shape,
        )
    }

    pub fn dense(&mut self, name: &str, input: NodeId, units: usize) -> NodeId {
        let (r, c) = self.nodes[input].shape;
        let n_in = r * c;
        if units == 0 {
            return self.fail(format!("dense `{name}` needs at least one unit"));
        }
        let params = self.add_params(name, units * n_in + units, n_in);
        self.push(
            Op::Layer {
                spec: LayerSpec::Dense { units },
                input,
                params,
            },
            (units, 1),
        )
    }

    pub fn conv1d(
        &mut self,
        name: &str,
        input: NodeId,
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> NodeId {
        let (channels, len) = self.nodes[input].shape;
        if filters == 0 || kernel == 0 || stride == 0 {
            return self.fail(format!("conv1d `{name}` has a zero dimension"));
        }
        let Some(geo) = ConvGeometry::new(channels, len, filters, kernel, stride, padding) else {
            return self.fail(format!(
                "conv1d `{name}`: kernel {kernel} longer than sequence {len} with valid padding"
            ));
        };
        let params = self.add_params(name, geo.weight_len() + filters, channels * kernel);
        self.push(
            Op::Layer {
                spec: LayerSpec::Conv1d {
                    filters,
                    kernel,
                    stride,
                    padding,
                },
                input,
                params,
            },
            (filters, geo.out_len),
        )
    }

    pub fn gru(&mut self, name: &str, input: NodeId, hidden: usize) -> NodeId {
        let (channels, _) = self.nodes[input].shape;
        if hidden == 0 {
            return self.fail(format!("gru `{name}` needs a hidden size"));
        }
        let shape = GruShape {
            input_size: channels,
            hidden,
        };
        let params = self.add_params(name, shape.param_len(), channels + hidden);
        self.push(
            Op::Layer {
                spec: LayerSpec::Gru { hidden },
                input,
                params,
            },
            (hidden, 1),
        )
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let shape = self.nodes[input].shape;
        self.push(
            Op::Layer {
                spec: LayerSpec::Relu,
                input,
                params: None,
            },
            shape,
        )
    }

    pub fn softmax(&mut self, input: NodeId) -> NodeId {
        let (r, c) = self.nodes[input].shape;
        self.push(
            Op::Layer {
                spec: LayerSpec::Softmax,
                input,
                params: None,
            },
            (r * c, 1),
        )
    }

    /// Flattens and concatenates the given nodes into one vector.
    pub fn concat(&mut self, inputs: &[NodeId]) -> NodeId {
        if inputs.is_empty() {
            return self.fail("concat of nothing".into());
        }
        let len = inputs
            .iter()
            .map(|&i| self.nodes[i].shape.0 * self.nodes[i].shape.1)
            .sum();
        self.push(Op::Concat(inputs.to_vec()), (len, 1))
    }

    pub fn output(&mut self, name: &str, node: NodeId) {
        self.outputs.push((name.to_string(), node));
    }

    /// Finalizes the graph and initializes weights uniformly in
    /// `±sqrt(6 / fan_in)` with zero biases.
    pub fn build(self, seed: u64) -> Result<Network, NetError> {
        if let Some(e) = self.error {
            return Err(e);
        }
        if self.outputs.is_empty() {
            return Err(NetError::Build("network has no outputs".into()));
        }
        let mut net = Network {
            nodes: self.nodes,
            views: self.views,
            outputs: self.outputs,
            params: vec![0.0; self.total],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (vi, fan_in) in self.fan_in.iter().enumerate() {
            let bias_len = net.bias_len(vi);
            let limit = (6.0 / *fan_in as f64).sqrt();
            let view = net.views[vi].clone();
            let weights = &mut net.params[view.offset..view.offset + view.len - bias_len];
            for w in weights {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(net)
    }
}

/// Cached forward values, required by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Activations {
    values: Vec<Vec<f64>>,
    gru: Vec<Option<GruCache>>,
}

/// Gradients with respect to each named input.
#[derive(Debug, Clone, Default)]
pub struct InputGrads(pub Vec<(String, Vec<f64>)>);

impl InputGrads {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g.as_slice())
    }
}

/// A feed-forward graph of layers over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Network {
    nodes: Vec<Node>,
    views: Vec<ParamView>,
    outputs: Vec<(String, NodeId)>,
    params: Vec<f64>,
}

impl Network {
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), NetError> {
        if params.len() != self.params.len() {
            return Err(NetError::Shape(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param_views(&self) -> &[ParamView] {
        &self.views
    }

    pub fn view(&self, name: &str) -> Option<&ParamView> {
        self.views.iter().find(|v| v.name == name)
    }

    /// Declared inputs in creation order with their shapes.
    pub fn inputs(&self) -> Vec<(&str, Shape)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input { name } => Some((name.as_str(), n.shape)),
                _ => None,
            })
            .collect()
    }

    pub fn output_names(&self) -> impl Iterator<Item = &str> {
        self.outputs.iter().map(|(n, _)| n.as_str())
    }

    fn bias_len(&self, view: usize) -> usize {
        for node in &self.nodes {
            if let Op::Layer {
                spec,
                params: Some(p),
                ..
            } = &node.op
            {
                if *p == view {
                    return match spec {
                        LayerSpec::Dense { units } => *units,
                        LayerSpec::Conv1d { filters, .. } => *filters,
                        LayerSpec::Gru { hidden } => 3 * hidden,
                        _ => 0,
                    };
                }
            }
        }
        0
    }

    /// Scales the non-bias weights of a layer, e.g. to shrink an output head.
    pub fn scale_weights(&mut self, layer: &str, factor: f64) -> Result<(), NetError> {
        let vi = self
            .views
            .iter()
            .position(|v| v.name == layer)
            .ok_or_else(|| NetError::UnknownName(layer.to_string()))?;
        let bias = self.bias_len(vi);
        let v = &self.views[vi];
        for w in &mut self.params[v.offset..v.offset + v.len - bias] {
            *w *= factor;
        }
        Ok(())
    }

    /// Sets every parameter (weights and biases) of a layer to zero.
    pub fn zero_layer(&mut self, layer: &str) -> Result<(), NetError> {
        let v = self
            .view(layer)
            .cloned()
            .ok_or_else(|| NetError::UnknownName(layer.to_string()))?;
        self.params[v.offset..v.offset + v.len].fill(0.0);
        Ok(())
    }

    /// Mutable access to the bias vector of a layer.
    pub fn bias_mut(&mut self, layer: &str) -> Result<&mut [f64], NetError> {
        let vi = self
            .views
            .iter()
            .position(|v| v.name == layer)
            .ok_or_else(|| NetError::UnknownName(layer.to_string()))?;
        let bias = self.bias_len(vi);
        let v = &self.views[vi];
        Ok(&mut self.params[v.offset + v.len - bias..v.offset + v.len])
    }

    fn input_node(&self, name: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| matches!(&n.op, Op::Input { name: n2 } if n2 == name))
    }

    fn output_node(&self, name: &str) -> Result<NodeId, NetError> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| NetError::UnknownName(name.to_string()))
    }

    pub fn output<'a>(&self, acts: &'a Activations, name: &str) -> Result<&'a [f64], NetError> {
        let id = self.output_node(name)?;
        acts.values
            .get(id)
            .map(|v| v.as_slice())
            .ok_or(NetError::MissingCache)
    }

    fn param_slice(&self, view: Option<usize>) -> &[f64] {
        match view {
            Some(v) => {
                let v = &self.views[v];
                &self.params[v.offset..v.offset + v.len]
            }
            None => &[],
        }
    }

    /// Evaluates the graph. Every declared input must be supplied exactly once.
    pub fn forward(&self, inputs: &[(&str, &[f64])]) -> Result<Activations, NetError> {
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        let mut gru = vec![None; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            let (rows, cols) = node.shape;
            let mut out = vec![0.0; rows * cols];
            match &node.op {
                Op::Input { name } => {
                    let data = inputs
                        .iter()
                        .find(|(n, _)| n == name)
                        .map(|(_, d)| *d)
                        .ok_or_else(|| NetError::Shape(format!("missing input `{name}`")))?;
                    if data.len() != out.len() {
                        return Err(NetError::Shape(format!(
                            "input `{name}` expects {} values, got {}",
                            out.len(),
                            data.len()
                        )));
                    }
                    out.copy_from_slice(data);
                }
                Op::Concat(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let v = &values[p];
                        out[at..at + v.len()].copy_from_slice(v);
                        at += v.len();
                    }
                }
                Op::Layer {
                    spec,
                    input,
                    params,
                } => {
                    let x = &values[*input];
                    let p = self.param_slice(*params);
                    match spec {
                        LayerSpec::Dense { units } => {
                            let (w, b) = p.split_at(units * x.len());
                            layers::dense_forward(w, b, x, &mut out);
                        }
                        LayerSpec::Conv1d {
                            filters,
                            kernel,
                            stride,
                            padding,
                        } => {
                            let geo = self.conv_geometry(*input, *filters, *kernel, *stride, *padding);
                            let (w, b) = p.split_at(geo.weight_len());
                            layers::conv1d_forward(&geo, w, b, x, &mut out);
                        }
                        LayerSpec::Gru { hidden } => {
                            let (channels, steps) = self.nodes[*input].shape;
                            let shape = GruShape {
                                input_size: channels,
                                hidden: *hidden,
                            };
                            gru[id] = Some(layers::gru_forward(&shape, p, x, steps, &mut out));
                        }
                        LayerSpec::Relu => layers::relu_forward(x, &mut out),
                        LayerSpec::Softmax => layers::softmax_forward(x, &mut out),
                    }
                }
            }
            values.push(out);
        }
        Ok(Activations { values, gru })
    }

    fn conv_geometry(
        &self,
        input: NodeId,
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> ConvGeometry {
        let (channels, len) = self.nodes[input].shape;
        ConvGeometry::new(channels, len, filters, kernel, stride, padding)
            .expect("geometry validated at build time")
    }

    /// Backpropagates output gradients through the cached forward pass,
    /// accumulating parameter gradients into `grads` (length [`num_params`]).
    ///
    /// [`num_params`]: Network::num_params
    pub fn backward(
        &self,
        acts: &Activations,
        out_grads: &[(&str, &[f64])],
        grads: &mut [f64],
    ) -> Result<InputGrads, NetError> {
        if acts.values.len() != self.nodes.len() {
            return Err(NetError::MissingCache);
        }
        if grads.len() != self.params.len() {
            return Err(NetError::Shape(format!(
                "gradient buffer has {} entries, network has {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        let mut node_grads: Vec<Vec<f64>> = acts.values.iter().map(|v| vec![0.0; v.len()]).collect();
        for (name, g) in out_grads {
            let id = self.output_node(name)?;
            if g.len() != node_grads[id].len() {
                return Err(NetError::Shape(format!(
                    "output `{name}` has {} values, gradient has {}",
                    node_grads[id].len(),
                    g.len()
                )));
            }
            for (a, b) in node_grads[id].iter_mut().zip(g.iter()) {
                *a += b;
            }
        }

        for id in (0..self.nodes.len()).rev() {
            let dy = std::mem::take(&mut node_grads[id]);
            if dy.iter().all(|&g| g == 0.0) {
                node_grads[id] = dy;
                continue;
            }
            match &self.nodes[id].op {
                Op::Input { .. } => {}
                Op::Concat(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = node_grads[p].len();
                        for (a, b) in node_grads[p].iter_mut().zip(&dy[at..at + n]) {
                            *a += b;
                        }
                        at += n;
                    }
                }
                Op::Layer {
                    spec,
                    input,
                    params,
                } => {
                    let x = &acts.values[*input];
                    let p = self.param_slice(*params);
                    let (offset, len) = params
                        .map(|v| (self.views[v].offset, self.views[v].len))
                        .unwrap_or((0, 0));
                    let dp = &mut grads[offset..offset + len];
                    let mut dx = std::mem::take(&mut node_grads[*input]);
                    match spec {
                        LayerSpec::Dense { units } => {
                            let (w, _) = p.split_at(units * x.len());
                            let (dw, db) = dp.split_at_mut(units * x.len());
                            layers::dense_backward(w, x, &dy, dw, db, &mut dx);
                        }
                        LayerSpec::Conv1d {
                            filters,
                            kernel,
                            stride,
                            padding,
                        } => {
                            let geo = self.conv_geometry(*input, *filters, *kernel, *stride, *padding);
                            let (w, _) = p.split_at(geo.weight_len());
                            let (dw, db) = dp.split_at_mut(geo.weight_len());
                            layers::conv1d_backward(&geo, w, x, &dy, dw, db, &mut dx);
                        }
                        LayerSpec::Gru { hidden } => {
                            let (channels, steps) = self.nodes[*input].shape;
                            let shape = GruShape {
                                input_size: channels,
                                hidden: *hidden,
                            };
                            let cache = acts.gru[id].as_ref().ok_or(NetError::MissingCache)?;
                            layers::gru_backward(&shape, p, x, steps, cache, &dy, dp, &mut dx);
                        }
                        LayerSpec::Relu => layers::relu_backward(x, &dy, &mut dx),
                        LayerSpec::Softmax => layers::softmax_backward(&acts.values[id], &dy, &mut dx),
                    }
                    node_grads[*input] = dx;
                }
            }
            node_grads[id] = dy;
        }

        let inputs = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| match &n.op {
                Op::Input { name } => Some((name.clone(), node_grads[id].clone())),
                _ => None,
            })
            .collect();
        Ok(InputGrads(inputs))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            tensors: self
                .views
                .iter()
                .map(|v| NamedParams {
                    name: v.name.clone(),
                    values: self.params[v.offset..v.offset + v.len].to_vec(),
                })
                .collect(),
        }
    }

    /// Loads parameters by layer name; every layer must be present with the right length.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<(), NetError> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(NetError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        for v in &self.views {
            let t = ckpt
                .tensors
                .iter()
                .find(|t| t.name == v.name)
                .ok_or_else(|| NetError::Checkpoint(format!("missing layer `{}`", v.name)))?;
            if t.values.len() != v.len {
                return Err(NetError::Checkpoint(format!(
                    "layer `{}` has {} values, expected {}",
                    v.name,
                    t.values.len(),
                    v.len
                )));
            }
        }
        for v in self.views.clone() {
            let t = ckpt.tensors.iter().find(|t| t.name == v.name).unwrap();
            self.params[v.offset..v.offset + v.len].copy_from_slice(&t.values);
        }
        Ok(())
    }

    /// Returns `true` when a declared input exists with the given name.
    pub fn has_input(&self, name: &str) -> bool {
        self.input_node(name).is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_branch() -> Network {
        let mut b = NetworkBuilder::new();
        let seq = b.input("seq", (3, 6));
        let flat = b.input("scalars", (2, 1));
        let c = b.conv1d("conv", seq, 4, 3, 1, Padding::Valid);
        let c = b.relu(c);
        let g = b.gru("gru", seq, 5);
        let d = b.dense("fc_s", flat, 4);
        let m = b.concat(&[c, g, d]);
        let h = b.dense("hidden", m, 8);
        let h = b.relu(h);
        let o = b.dense("out", h, 3);
        let p = b.softmax(o);
        b.output("probs", p);
        b.output("logits", o);
        b.build(3).unwrap()
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let mut b = NetworkBuilder::new();
        let x = b.input("x", (3, 1));
        let y = b.dense("id", x, 3);
        b.output("y", y);
        let mut net = b.build(0).unwrap();
        let p = net.params_mut();
        p.fill(0.0);
        p[0] = 1.0;
        p[4] = 1.0;
        p[8] = 1.0;
        let acts = net.forward(&[("x", &[0.3, -1.0, 7.5])]).unwrap();
        assert_eq!(net.output(&acts, "y").unwrap(), &[0.3, -1.0, 7.5]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let net = two_branch();
        let err = net
            .forward(&[("seq", &[0.0; 17]), ("scalars", &[0.0; 2])])
            .unwrap_err();
        assert!(matches!(err, NetError::Shape(_)));
        let err = net.forward(&[("seq", &[0.0; 18])]).unwrap_err();
        assert!(matches!(err, NetError::Shape(_)));
    }

    #[test]
    fn builder_rejects_bad_graphs() {
        let mut b = NetworkBuilder::new();
        let x = b.input("x", (1, 4));
        b.conv1d("c", x, 2, 5, 1, Padding::Valid);
        assert!(b.build(0).is_err());

        let mut b = NetworkBuilder::new();
        let x = b.input("x", (1, 4));
        let a = b.dense("d", x, 2);
        let c = b.dense("d", a, 2);
        b.output("o", c);
        assert!(b.build(0).is_err());
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let net = two_branch();
        let mut b = NetworkBuilder::new();
        let x = b.input("x", (1, 1));
        let y = b.dense("d", x, 1);
        b.output("probs", y);
        let other = b.build(0).unwrap();
        let acts = other.forward(&[("x", &[1.0])]).unwrap();
        let mut g = vec![0.0; net.num_params()];
        assert!(matches!(
            net.backward(&acts, &[("probs", &[1.0, 0.0, 0.0])], &mut g),
            Err(NetError::MissingCache)
        ));
    }

    #[test]
    fn softmax_output_is_a_distribution() {
        let net = two_branch();
        let seq: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin()).collect();
        let acts = net.forward(&[("seq", &seq), ("scalars", &[0.4, -0.2])]).unwrap();
        let p = net.output(&acts, "probs").unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn scale_and_zero_layers() {
        let mut net = two_branch();
        net.zero_layer("out").unwrap();
        let acts = net
            .forward(&[("seq", &[0.5; 18]), ("scalars", &[1.0, 2.0])])
            .unwrap();
        for p in net.output(&acts, "probs").unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(net.scale_weights("nope", 2.0).is_err());
    }
}
