//! Full GCF network: backbone, region graph convolution, fusion and the
//! softmax head, with its named parameter set.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{self, BackboneConfig, FeatureGrid};
use crate::graph::{self, Activation, Aggregation, GraphTopology, GraphVariant, GRID_NODES};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphConfig {
    /// `false` gives the CNN-only baseline: the head sees the global vector alone.
    pub enabled: bool,
    pub variant: GraphVariant,
    pub layers: usize,
    /// Output width of every GCN layer.
    pub hidden_dim: usize,
    pub aggregation: Aggregation,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            enabled: true,
            variant: GraphVariant::V1,
            layers: 1,
            hidden_dim: 64,
            aggregation: Aggregation::Concat,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub graph: GraphConfig,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            graph: GraphConfig::default(),
            num_classes: 7,
        }
    }
}

impl ModelConfig {
    /// The small model used for gradient verification: node_dim 4,
    /// global_dim 8, three classes, 12×12 input.
    pub fn tiny(variant: GraphVariant) -> Self {
        ModelConfig {
            backbone: BackboneConfig {
                input_channels: 1,
                input_size: 12,
                stages: vec![backbone::Stage::new(2), backbone::Stage::new(4)],
                global_dim: 8,
            },
            graph: GraphConfig {
                enabled: true,
                variant,
                layers: 1,
                hidden_dim: 4,
                aggregation: Aggregation::Concat,
            },
            num_classes: 3,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.backbone.validate()?;
        if self.num_classes < 2 {
            return Err(ModelError::Config(format!(
                "need at least two classes, got {}",
                self.num_classes
            )));
        }
        if self.graph.enabled && (self.graph.layers == 0 || self.graph.hidden_dim == 0) {
            return Err(ModelError::Config(
                "graph layers and hidden_dim must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn classifier_inputs(&self) -> usize {
        let graph = if self.graph.enabled {
            match self.graph.aggregation {
                Aggregation::Concat => GRID_NODES * self.graph.hidden_dim,
                Aggregation::Mean => self.graph.hidden_dim,
            }
        } else {
            0
        };
        self.backbone.global_dim + graph
    }

    /// Name and shape of every trainable tensor, in initialization order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut c_in = self.backbone.input_channels;
        for (i, s) in self.backbone.stages.iter().enumerate() {
            specs.push(ParamSpec::weight(
                backbone::conv_weight_name(i),
                vec![s.out_channels, c_in, s.kernel, s.kernel],
                c_in * s.kernel * s.kernel,
                ParamGroup::Backbone,
            ));
            specs.push(ParamSpec::bias(
                backbone::conv_bias_name(i),
                s.out_channels,
                ParamGroup::Backbone,
            ));
            c_in = s.out_channels;
        }
        let flat = self.backbone.flattened_len();
        specs.push(ParamSpec::weight(
            backbone::GLOBAL_WEIGHT.into(),
            vec![self.backbone.global_dim, flat],
            flat,
            ParamGroup::Backbone,
        ));
        specs.push(ParamSpec::bias(
            backbone::GLOBAL_BIAS.into(),
            self.backbone.global_dim,
            ParamGroup::Backbone,
        ));
        if self.graph.enabled {
            let mut d_in = self.backbone.feature_channels();
            for l in 0..self.graph.layers {
                specs.push(ParamSpec::weight(
                    gcn_weight_name(l),
                    vec![d_in, self.graph.hidden_dim],
                    d_in,
                    ParamGroup::Graph,
                ));
                d_in = self.graph.hidden_dim;
            }
        }
        let f = self.classifier_inputs();
        specs.push(ParamSpec::weight(
            CLASSIFIER_WEIGHT.into(),
            vec![self.num_classes, f],
            f,
            ParamGroup::Classifier,
        ));
        specs.push(ParamSpec::bias(
            CLASSIFIER_BIAS.into(),
            self.num_classes,
            ParamGroup::Classifier,
        ));
        specs
    }

    /// Canonical text of everything that determines parameter shapes and
    /// the graph topology.
    pub fn architecture_key(&self) -> String {
        let b = &self.backbone;
        let stages: Vec<String> = b
            .stages
            .iter()
            .map(|s| format!("{}:{}:{}", s.out_channels, s.kernel, s.pool))
            .collect();
        format!(
            "input={}x{}x{};stages={};global={};graph={};variant={};layers={};hidden={};agg={};classes={}",
            b.input_channels,
            b.input_size,
            b.input_size,
            stages.join(","),
            b.global_dim,
            self.graph.enabled,
            self.graph.variant,
            self.graph.layers,
            self.graph.hidden_dim,
            self.graph.aggregation,
            self.num_classes
        )
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.architecture_key().as_bytes()).into()
    }
}

pub fn gcn_weight_name(layer: usize) -> String {
    format!("gcn.layer{layer}.weight")
}

pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Graph,
    Classifier,
}

impl ParamGroup {
    fn stream(self) -> u64 {
        match self {
            ParamGroup::Backbone => 0,
            ParamGroup::Graph => 1,
            ParamGroup::Classifier => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// `Some(fan_in)` for weights, `None` for zero-initialized biases.
    pub fan_in: Option<usize>,
    pub group: ParamGroup,
}

impl ParamSpec {
    fn weight(name: String, shape: Vec<usize>, fan_in: usize, group: ParamGroup) -> Self {
        ParamSpec {
            name,
            shape,
            fan_in: Some(fan_in),
            group,
        }
    }

    fn bias(name: String, len: usize, group: ParamGroup) -> Self {
        ParamSpec {
            name,
            shape: vec![len],
            fan_in: None,
            group,
        }
    }
}

/// All trainable tensors, addressed by stable dotted names.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ModelParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        ModelParams {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor.with_grad());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every parameter as a borrowed leaf on `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.input(t)))
                .collect(),
        }
    }

    /// Adds per-parameter deltas given in name order.
    pub fn accumulate_grads(&mut self, grads: &[Vec<T>]) -> Result<(), TensorError> {
        if grads.len() != self.tensors.len() {
            return Err(TensorError::contract(
                "accumulate_grads",
                format!("{} gradients for {} parameters", grads.len(), self.tensors.len()),
            ));
        }
        for (t, g) in self.tensors.values_mut().zip(grads) {
            t.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<U>()))
                .collect(),
        }
    }

    /// Values rounded to 32-bit, as a checkpoint would store them.
    pub fn rounded_to_f32(&self) -> Self {
        self.cast::<f32>().cast::<T>()
    }

    /// SHA-256 over names, shapes and values of parameters whose name starts
    /// with `prefix`, as lowercase hex.
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks that names and shapes match `specs` exactly.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<(), ModelError> {
        if specs.len() != self.tensors.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for spec in specs {
            let t = self
                .tensors
                .get(&spec.name)
                .ok_or_else(|| ModelError::MissingParam(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }
}

/// Tape handles of a [`ModelParams`] bound with [`ModelParams::bind`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    /// Handles in name order, aligned with [`ModelParams::iter`].
    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Intermediate handles from one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub grid: FeatureGrid,
    pub gcn_out: Option<Var>,
    pub probs: Var,
}

#[derive(Debug, Clone)]
pub struct GcfModel {
    config: ModelConfig,
    topology: Option<GraphTopology>,
}

impl GcfModel {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let topology = config
            .graph
            .enabled
            .then(|| GraphTopology::new(config.graph.variant));
        Ok(GcfModel { config, topology })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn topology(&self) -> Option<&GraphTopology> {
        self.topology.as_ref()
    }

    /// He-style uniform fan-in initialization with zero biases.
    ///
    /// Backbone, graph and classifier draw from separate ChaCha streams of
    /// the same seed, so the backbone is identical across graph variants
    /// and the CNN-only baseline.
    pub fn init_params<T: Real>(&self, seed: u64) -> ModelParams<T> {
        let mut rngs: Vec<ChaCha8Rng> = (0..3)
            .map(|stream| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(stream);
                r
            })
            .collect();
        let mut params = ModelParams::new();
        for spec in self.config.param_specs() {
            let n: usize = spec.shape.iter().product();
            let data = match spec.fan_in {
                Some(fan_in) => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let dist = Uniform::new(-bound, bound).expect("positive bound");
                    let rng = &mut rngs[spec.group.stream() as usize];
                    (0..n).map(|_| T::lit(dist.sample(rng))).collect()
                }
                None => vec![T::zero(); n],
            };
            let tensor = Tensor::new(spec.shape.clone(), data).expect("spec shape");
            params.insert(spec.name, tensor);
        }
        params
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        params: &BoundParams,
        image: Var,
    ) -> Result<ForwardOutput, ModelError> {
        let grid = backbone::extract_grid(tape, image, params, &self.config.backbone)?;
        let (features, gcn_out) = match &self.topology {
            Some(topology) => {
                let a_hat = tape.constant(topology.normalized().to_tensor());
                let mut h = grid.nodes;
                for l in 0..self.config.graph.layers {
                    let w = params.get(&gcn_weight_name(l))?;
                    h = graph::gcn_layer_forward(tape, h, a_hat, w, Activation::Relu)?;
                }
                let pooled = graph::aggregate_nodes(tape, h, self.config.graph.aggregation)?;
                (graph::fuse(tape, grid.global, pooled)?, Some(h))
            }
            None => (grid.global, None),
        };
        let probs = graph::classify(
            tape,
            features,
            params.get(CLASSIFIER_WEIGHT)?,
            params.get(CLASSIFIER_BIAS)?,
        )?;
        Ok(ForwardOutput {
            grid,
            gcn_out,
            probs,
        })
    }

    /// Class probabilities for one image.
    pub fn predict<T: Real>(
        &self,
        params: &ModelParams<T>,
        image: &Tensor<T>,
    ) -> Result<Vec<T>, ModelError> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.input(image);
        let out = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(out.probs)?.to_vec())
    }
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax<T: Real>(probs: &[T]) -> usize {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}
