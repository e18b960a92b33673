//! Layered networks with a backbone, a task head and a discriminator head.
//!
//! Parameters live in one flat registry and are tagged with a [`Group`]:
//! backbone and task head belong to `G`, the discriminator head to `D`.
//! Optimizer steps address a single group, so an adversarial update on one
//! side never touches the other.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Gradients, NodeId, Tape};
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::seed::{rng, Rng64};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    /// Backbone and task head.
    G,
    /// Discriminator head.
    D,
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "G" | "g" => Ok(Group::G),
            "D" | "d" => Ok(Group::D),
            other => Err(Error::Config(format!("unknown parameter group {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    Flatten,
    Dropout {
        rate: f64,
    },
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerKind::Dense { inputs, outputs } => write!(f, "dense({inputs}->{outputs})"),
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => write!(f, "conv({in_ch}->{out_ch},k{kernel},s{stride},p{pad})"),
            LayerKind::Relu => f.write_str("relu"),
            LayerKind::Flatten => f.write_str("flatten"),
            LayerKind::Dropout { rate } => write!(f, "dropout({rate})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub init_seed_offset: u64,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            init_seed_offset: 0,
        }
    }

    pub fn dense(inputs: usize, outputs: usize) -> Self {
        Self::new(LayerKind::Dense { inputs, outputs })
    }

    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self::new(LayerKind::Conv {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        })
    }

    pub fn relu() -> Self {
        Self::new(LayerKind::Relu)
    }

    pub fn flatten() -> Self {
        Self::new(LayerKind::Flatten)
    }

    pub fn dropout(rate: f64) -> Self {
        Self::new(LayerKind::Dropout { rate })
    }

    fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            LayerKind::Dense { inputs, outputs } => inputs > 0 && outputs > 0,
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            } => in_ch > 0 && out_ch > 0 && kernel > 0 && stride > 0,
            LayerKind::Dropout { rate } => (0.0..1.0).contains(&rate),
            LayerKind::Relu | LayerKind::Flatten => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid layer {}", self.kind)))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    /// Per-sample input shape: `[d]` for vectors, `[c, h, w]` for images.
    pub input_shape: Vec<usize>,
    pub backbone: Vec<LayerSpec>,
    pub task_head: Vec<LayerSpec>,
    pub desc_head: Vec<LayerSpec>,
    pub seed: u64,
}

impl ArchConfig {
    /// `dense(d→h₁), relu, …, dense(→hₗ), relu` backbone, linear task head
    /// and `dense(F→desc), relu, dense(desc→1)` discriminator head.
    pub fn mlp(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        desc_channel: usize,
        seed: u64,
    ) -> Self {
        let mut backbone = Vec::new();
        let mut width = input_dim;
        for &h in hidden {
            backbone.push(LayerSpec::dense(width, h));
            backbone.push(LayerSpec::relu());
            width = h;
        }
        ArchConfig {
            input_shape: vec![input_dim],
            backbone,
            task_head: vec![LayerSpec::dense(width, classes)],
            desc_head: desc_head(width, desc_channel),
            seed,
        }
    }

    /// Default MLP: 128 → 64 hidden units.
    pub fn default_mlp(input_dim: usize, classes: usize, desc_channel: usize, seed: u64) -> Self {
        Self::mlp(input_dim, &[128, 64], classes, desc_channel, seed)
    }

    /// Small CNN for `[c, hw, hw]` images: two 3×3 convolutions (the second
    /// strided), then a dense projection to `features` units.
    pub fn cnn(
        in_ch: usize,
        hw: usize,
        channels: &[usize],
        features: usize,
        classes: usize,
        desc_channel: usize,
        seed: u64,
    ) -> Self {
        let mut backbone = Vec::new();
        let (mut ch, mut side) = (in_ch, hw);
        for (i, &c) in channels.iter().enumerate() {
            let stride = if i % 2 == 1 { 2 } else { 1 };
            backbone.push(LayerSpec::conv(ch, c, 3, stride, 1));
            backbone.push(LayerSpec::relu());
            side = (side + 2 - 3) / stride + 1;
            ch = c;
        }
        backbone.push(LayerSpec::flatten());
        backbone.push(LayerSpec::dense(ch * side * side, features));
        backbone.push(LayerSpec::relu());
        ArchConfig {
            input_shape: vec![in_ch, hw, hw],
            backbone,
            task_head: vec![LayerSpec::dense(features, classes)],
            desc_head: desc_head(features, desc_channel),
            seed,
        }
    }

    /// Inserts inverted dropout after every backbone activation.
    pub fn with_dropout(mut self, rate: f64) -> Self {
        if rate > 0.0 {
            let mut out = Vec::with_capacity(self.backbone.len() * 2);
            for l in self.backbone {
                out.push(l);
                if l.kind == LayerKind::Relu {
                    out.push(LayerSpec::dropout(rate));
                }
            }
            self.backbone = out;
        }
        self
    }
}

fn desc_head(features: usize, desc_channel: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::dense(features, desc_channel),
        LayerSpec::relu(),
        LayerSpec::dense(desc_channel, 1),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
    /// Gradient accumulator; `None` until populated after a reset.
    pub grad: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct Layer {
    spec: LayerSpec,
    /// Indices into the parameter registry (weight, bias).
    params: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Model {
    arch: ArchConfig,
    backbone: Vec<Layer>,
    task_head: Vec<Layer>,
    desc_head: Vec<Layer>,
    params: Vec<Param>,
    feature_width: usize,
    classes: usize,
}

/// Map from parameter index to its leaf on one tape. Parameters are bound
/// lazily the first time a forward pass needs them.
#[derive(Debug, Clone)]
pub struct Bindings {
    nodes: Vec<Option<NodeId>>,
}

impl Bindings {
    pub fn node(&self, param: usize) -> Option<NodeId> {
        self.nodes[param]
    }
}

/// Tape handles produced by [`Model::forward`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    pub features: NodeId,
    pub logits: NodeId,
}

/// Per-sample shape after `spec`, or a configuration error naming the layer.
fn infer(shape: &[usize], spec: &LayerSpec, part: &str, pos: usize) -> Result<Vec<usize>> {
    let bad = |why: String| Error::Config(format!("{part} layer {pos} {}: {why}", spec.kind));
    match spec.kind {
        LayerKind::Dense { inputs, outputs } => match shape {
            [w] if *w == inputs => Ok(vec![outputs]),
            _ => Err(bad(format!("expects width {inputs}, got shape {shape:?}"))),
        },
        LayerKind::Conv {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        } => match shape {
            [c, h, w] if *c == in_ch && kernel <= h + 2 * pad && kernel <= w + 2 * pad => Ok(vec![
                out_ch,
                (h + 2 * pad - kernel) / stride + 1,
                (w + 2 * pad - kernel) / stride + 1,
            ]),
            _ => Err(bad(format!("incompatible with input shape {shape:?}"))),
        },
        LayerKind::Flatten => Ok(vec![shape.iter().product()]),
        LayerKind::Relu | LayerKind::Dropout { .. } => Ok(shape.to_vec()),
    }
}

impl Model {
    /// Builds and initializes a model. Dense/conv weights are Xavier-uniform
    /// from a stream keyed by (seed, layer index); biases start at zero.
    pub fn build(arch: ArchConfig) -> Result<Self> {
        let mut params = Vec::new();
        let mut layer_index = 0u64;
        let mut build_part = |specs: &[LayerSpec],
                              group: Group,
                              part: &str,
                              mut shape: Vec<usize>,
                              params: &mut Vec<Param>|
         -> Result<(Vec<Layer>, Vec<usize>)> {
            let mut layers = Vec::with_capacity(specs.len());
            for (pos, spec) in specs.iter().enumerate() {
                spec.validate()?;
                shape = infer(&shape, spec, part, pos)?;
                let mut rng = rng(arch
                    .seed
                    .wrapping_mul(0x2545_F491_4F6C_DD1D)
                    .wrapping_add(layer_index)
                    .wrapping_add(spec.init_seed_offset.wrapping_mul(0x9E37_79B9)));
                layer_index += 1;
                let ids = match spec.kind {
                    LayerKind::Dense { inputs, outputs } => {
                        let w = xavier(&mut rng, vec![inputs, outputs], inputs, outputs);
                        vec![
                            push_param(params, format!("{part}.{pos}.weight"), group, w),
                            push_param(
                                params,
                                format!("{part}.{pos}.bias"),
                                group,
                                Tensor::zeros(&[outputs]),
                            ),
                        ]
                    }
                    LayerKind::Conv {
                        in_ch,
                        out_ch,
                        kernel,
                        ..
                    } => {
                        let area = kernel * kernel;
                        let w = xavier(
                            &mut rng,
                            vec![out_ch, in_ch, kernel, kernel],
                            in_ch * area,
                            out_ch * area,
                        );
                        vec![
                            push_param(params, format!("{part}.{pos}.weight"), group, w),
                            push_param(
                                params,
                                format!("{part}.{pos}.bias"),
                                group,
                                Tensor::zeros(&[out_ch]),
                            ),
                        ]
                    }
                    _ => Vec::new(),
                };
                layers.push(Layer {
                    spec: *spec,
                    params: ids,
                });
            }
            Ok((layers, shape))
        };

        let (backbone, feat_shape) =
            build_part(&arch.backbone, Group::G, "backbone", arch.input_shape.clone(), &mut params)?;
        let [feature_width] = feat_shape[..] else {
            return Err(Error::Config(format!(
                "backbone must end in a flat feature vector, got shape {feat_shape:?}"
            )));
        };
        let (task_head, logit_shape) =
            build_part(&arch.task_head, Group::G, "task_head", feat_shape.clone(), &mut params)?;
        let [classes] = logit_shape[..] else {
            return Err(Error::Config("task_head must produce a logit vector".into()));
        };
        if arch.desc_head.iter().any(|l| matches!(l.kind, LayerKind::Dropout { .. })) {
            return Err(Error::Config("desc_head may not contain dropout".into()));
        }
        let (desc_head, score_shape) =
            build_part(&arch.desc_head, Group::D, "desc_head", feat_shape, &mut params)?;
        if score_shape != [1] {
            return Err(Error::Config(format!(
                "desc_head must produce one score per sample, got {score_shape:?}"
            )));
        }
        Ok(Model {
            arch,
            backbone,
            task_head,
            desc_head,
            params,
            feature_width,
            classes,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn group_indices(&self, group: Group) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.params[i].group == group)
            .collect()
    }

    /// Copies of every parameter value in `group`, in registry order.
    pub fn snapshot(&self, group: Group) -> Vec<Tensor> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.clone())
            .collect()
    }

    pub fn num_params(&self, group: Option<Group>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn bindings(&self) -> Bindings {
        Bindings {
            nodes: vec![None; self.params.len()],
        }
    }

    /// Binds parameter `i` to `nodes[i]`, for callers that created the leaves themselves.
    pub fn bindings_from(&self, nodes: &[NodeId]) -> Result<Bindings> {
        if nodes.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} nodes for {} parameters",
                nodes.len(),
                self.params.len()
            )));
        }
        Ok(Bindings {
            nodes: nodes.iter().copied().map(Some).collect(),
        })
    }

    fn bound(&self, tape: &mut Tape, binds: &mut Bindings, idx: usize) -> NodeId {
        *binds.nodes[idx].get_or_insert_with(|| tape.param(self.params[idx].value.clone()))
    }

    fn run(
        &self,
        layers: &[Layer],
        tape: &mut Tape,
        binds: &mut Bindings,
        mut x: NodeId,
        mode: Mode,
        dropout_rng: &mut Rng64,
    ) -> Result<NodeId> {
        for layer in layers {
            x = match layer.spec.kind {
                LayerKind::Dense { .. } => {
                    let w = self.bound(tape, binds, layer.params[0]);
                    let b = self.bound(tape, binds, layer.params[1]);
                    let y = tape.matmul(x, w)?;
                    tape.add_bias(y, b)?
                }
                LayerKind::Conv { stride, pad, .. } => {
                    let w = self.bound(tape, binds, layer.params[0]);
                    let b = self.bound(tape, binds, layer.params[1]);
                    let y = tape.conv2d(x, w, stride, pad)?;
                    tape.add_bias(y, b)?
                }
                LayerKind::Relu => tape.relu(x),
                LayerKind::Flatten => tape.flatten(x)?,
                LayerKind::Dropout { rate } => {
                    if mode == Mode::Eval || rate == 0.0 {
                        x
                    } else {
                        let keep = 1.0 / (1.0 - rate);
                        let mask = (0..tape.value(x).numel())
                            .map(|_| {
                                if dropout_rng.random::<f64>() >= rate {
                                    keep
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        tape.dropout_mask(x, mask)?
                    }
                }
            };
        }
        Ok(x)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != self.arch.input_shape.len() + 1 || shape[1..] != self.arch.input_shape {
            let mut expect = vec![0];
            expect.extend(&self.arch.input_shape);
            return Err(Error::dim("forward", shape, &expect));
        }
        Ok(())
    }

    /// Backbone and task head on a batch. `dropout_rng` is only drawn from
    /// in train mode.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binds: &mut Bindings,
        x: NodeId,
        mode: Mode,
        dropout_rng: &mut Rng64,
    ) -> Result<ForwardOut> {
        self.check_input(tape.value(x).shape())?;
        let features = self.run(&self.backbone, tape, binds, x, mode, dropout_rng)?;
        let logits = self.run(&self.task_head, tape, binds, features, mode, dropout_rng)?;
        Ok(ForwardOut { features, logits })
    }

    /// Raw discriminator scores, one per row of `features`.
    pub fn discriminate(
        &self,
        tape: &mut Tape,
        binds: &mut Bindings,
        features: NodeId,
    ) -> Result<NodeId> {
        let shape = tape.value(features).shape();
        if shape.len() != 2 || shape[1] != self.feature_width {
            return Err(Error::dim("discriminate", shape, &[0, self.feature_width]));
        }
        // No dropout in the head, so the rng is never drawn from.
        let mut unused = rng(0);
        self.run(&self.desc_head, tape, binds, features, Mode::Eval, &mut unused)
    }

    /// Eval-mode `(features, logits)` values for a batch.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let mut binds = self.bindings();
        let xi = tape.constant(x.clone());
        let mut unused = rng(0);
        let out = self.forward(&mut tape, &mut binds, xi, Mode::Eval, &mut unused)?;
        Ok((
            tape.value(out.features).clone(),
            tape.value(out.logits).clone(),
        ))
    }

    /// Discriminator scores for already-computed feature values.
    pub fn scores(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binds = self.bindings();
        let f = tape.constant(features.clone());
        let s = self.discriminate(&mut tape, &mut binds, f)?;
        Ok(tape.value(s).clone())
    }

    /// Clears the gradient accumulators of one group.
    pub fn zero_grads(&mut self, group: Group) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.grad = None;
        }
    }

    /// Adds the gradients for every bound parameter of `group` into its
    /// accumulator; unbound parameters accumulate zeros.
    pub fn accumulate_grads(&mut self, group: Group, binds: &Bindings, grads: &Gradients) -> Result<()> {
        for (i, p) in self.params.iter_mut().enumerate() {
            if p.group != group {
                continue;
            }
            let g = match binds.nodes[i] {
                Some(node) => grads.get(node),
                None => Tensor::zeros(p.value.shape()),
            };
            match &mut p.grad {
                Some(acc) => acc.add_assign(&g)?,
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Optimizer step restricted to `group`; `opt` must be bound to it.
    pub fn apply_grads(&mut self, group: Group, opt: &mut AdamW) -> Result<()> {
        if opt.group() != group {
            return Err(Error::Contract(format!(
                "optimizer for {:?} used on group {group:?}",
                opt.group()
            )));
        }
        opt.step(self)
    }
}

fn push_param(params: &mut Vec<Param>, name: String, group: Group, value: Tensor) -> usize {
    params.push(Param {
        name,
        group,
        value,
        grad: None,
    });
    params.len() - 1
}

fn xavier(rng: &mut Rng64, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-s..s)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimHyper;

    fn default_model(seed: u64) -> Model {
        Model::build(ArchConfig::default_mlp(12, 10, 64, seed)).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let (a, b) = (default_model(7), default_model(7));
        for (p, q) in a.params().iter().zip(b.params()) {
            assert!(p.value.bit_eq(&q.value));
        }
        let c = default_model(8);
        assert!(!a.params()[0].value.bit_eq(&c.params()[0].value));
    }

    #[test]
    fn dense_shapes_and_zero_bias() {
        let arch = ArchConfig::mlp(8, &[4], 3, 2, 0);
        let m = Model::build(arch).unwrap();
        assert_eq!(m.params()[0].value.shape(), &[8, 4]);
        assert_eq!(m.params()[1].value.shape(), &[4]);
        assert!(m.params()[1].value.data().iter().all(|&b| b == 0.0));
        let s = (6.0f64 / 12.0).sqrt();
        assert!(m.params()[0].value.data().iter().all(|w| w.abs() <= s));
    }

    #[test]
    fn default_registry_groups() {
        let m = default_model(0);
        assert_eq!(m.feature_width(), 64);
        assert_eq!(m.classes(), 10);
        let g: Vec<_> = m.group_indices(Group::G);
        let d: Vec<_> = m.group_indices(Group::D);
        assert_eq!(g.len() + d.len(), m.params().len());
        assert!(g.iter().all(|&i| !m.params()[i].name.starts_with("desc_head")));
        assert!(d.iter().all(|&i| m.params()[i].name.starts_with("desc_head")));
        assert_eq!(d.len(), 4);
        assert_eq!(g.len(), 6);
    }

    #[test]
    fn width_mismatch_names_layer() {
        let mut arch = ArchConfig::default_mlp(12, 10, 64, 0);
        arch.task_head = vec![LayerSpec::dense(32, 10)];
        let err = Model::build(arch).unwrap_err().to_string();
        assert!(err.contains("task_head layer 0"), "{err}");

        let mut arch = ArchConfig::default_mlp(12, 10, 64, 0);
        arch.desc_head = vec![LayerSpec::dense(63, 1)];
        assert!(Model::build(arch).is_err());
    }

    #[test]
    fn eval_forward_is_pure_and_train_without_dropout_matches() {
        let m = default_model(1);
        let x = Tensor::new(vec![5, 12], (0..60).map(|i| (i as f64).sin()).collect()).unwrap();
        let (f1, l1) = m.predict(&x).unwrap();
        let (f2, l2) = m.predict(&x).unwrap();
        assert!(f1.bit_eq(&f2) && l1.bit_eq(&l2));

        let mut tape = Tape::new();
        let mut binds = m.bindings();
        let xi = tape.constant(x.clone());
        let mut r = rng(3);
        let out = m.forward(&mut tape, &mut binds, xi, Mode::Train, &mut r).unwrap();
        assert!(tape.value(out.logits).bit_eq(&l1));
        assert_eq!(tape.value(out.features).shape(), &[5, 64]);
    }

    #[test]
    fn dropout_mask_reproducible_and_scaled() {
        let arch = ArchConfig::mlp(4, &[1000], 2, 4, 0).with_dropout(0.5);
        let m = Model::build(arch).unwrap();
        let x = Tensor::full(&[1, 4], 1.0);
        let run = |seed| {
            let mut tape = Tape::new();
            let mut binds = m.bindings();
            let xi = tape.constant(x.clone());
            let out = m
                .forward(&mut tape, &mut binds, xi, Mode::Train, &mut rng(seed))
                .unwrap();
            tape.value(out.features).clone()
        };
        let (a, b) = (run(9), run(9));
        assert!(a.bit_eq(&b));
        let (clean, _) = m.predict(&x).unwrap();
        for (d, c) in a.data().iter().zip(clean.data()) {
            assert!(*d == 0.0 || (*d - 2.0 * c).abs() < 1e-12);
        }
    }

    #[test]
    fn discriminate_shapes_and_zero_input() {
        let m = default_model(2);
        let s = m.scores(&Tensor::zeros(&[7, 64])).unwrap();
        assert_eq!(s.shape(), &[7, 1]);
        // Zero input and zero biases: every score is exactly the output bias, 0.
        assert!(s.data().iter().all(|&v| v == 0.0));
        let f = Tensor::new(vec![3, 64], (0..192).map(|i| (i as f64 * 0.1).cos()).collect()).unwrap();
        assert!(m.scores(&f).unwrap().bit_eq(&m.scores(&f).unwrap()));
        assert!(m.scores(&Tensor::zeros(&[3, 63])).is_err());
    }

    #[test]
    fn group_isolation_of_apply() {
        let mut m = default_model(3);
        let x = Tensor::new(vec![4, 12], (0..48).map(|i| (i as f64).cos()).collect()).unwrap();
        let mut tape = Tape::new();
        let mut binds = m.bindings();
        let xi = tape.constant(x);
        let out = m.forward(&mut tape, &mut binds, xi, Mode::Eval, &mut rng(0)).unwrap();
        let s = m.discriminate(&mut tape, &mut binds, out.features).unwrap();
        let ce = tape.softmax_cross_entropy(out.logits, &[0, 1, 2, 3]).unwrap();
        let sm = tape.mean(s);
        let loss = tape.add(ce, sm).unwrap();
        let grads = tape.backward(loss).unwrap();

        for group in [Group::D, Group::G] {
            let other = if group == Group::G { Group::D } else { Group::G };
            let before_other = m.snapshot(other);
            let before_own = m.snapshot(group);
            m.zero_grads(group);
            m.accumulate_grads(group, &binds, &grads).unwrap();
            let mut opt = AdamW::new(OptimHyper::default(), group);
            m.apply_grads(group, &mut opt).unwrap();
            for (a, b) in before_other.iter().zip(m.snapshot(other)) {
                assert!(a.bit_eq(&b));
            }
            assert!(before_own.iter().zip(m.snapshot(group)).any(|(a, b)| !a.bit_eq(&b)));
        }
    }

    #[test]
    fn zero_then_accumulate_matches_fresh() {
        let mut m = default_model(4);
        let x = Tensor::full(&[2, 12], 0.3);
        let mut tape = Tape::new();
        let mut binds = m.bindings();
        let xi = tape.constant(x);
        let out = m.forward(&mut tape, &mut binds, xi, Mode::Eval, &mut rng(0)).unwrap();
        let loss = tape.softmax_cross_entropy(out.logits, &[1, 2]).unwrap();
        let grads = tape.backward(loss).unwrap();
        m.accumulate_grads(Group::G, &binds, &grads).unwrap();
        m.accumulate_grads(Group::G, &binds, &grads).unwrap();
        m.zero_grads(Group::G);
        m.accumulate_grads(Group::G, &binds, &grads).unwrap();
        for i in m.group_indices(Group::G) {
            let fresh = grads.get(binds.node(i).unwrap());
            assert!(m.params()[i].grad.as_ref().unwrap().bit_eq(&fresh));
        }
    }

    #[test]
    fn unknown_group_and_missing_grads() {
        assert!("X".parse::<Group>().is_err());
        let mut m = default_model(5);
        let mut opt = AdamW::new(OptimHyper::default(), Group::D);
        assert!(matches!(m.apply_grads(Group::D, &mut opt), Err(Error::Contract(_))));
        assert!(m.apply_grads(Group::G, &mut opt).is_err());
    }

    #[test]
    fn cnn_builds_with_flat_features() {
        let m = Model::build(ArchConfig::cnn(1, 8, &[4, 8], 32, 4, 16, 0)).unwrap();
        assert_eq!(m.feature_width(), 32);
        let x = Tensor::zeros(&[2, 1, 8, 8]);
        let (f, l) = m.predict(&x).unwrap();
        assert_eq!(f.shape(), &[2, 32]);
        assert_eq!(l.shape(), &[2, 4]);
        assert!(m.predict(&Tensor::zeros(&[2, 1, 9, 9])).is_err());
    }
}
