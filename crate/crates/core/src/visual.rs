//! Visual view encoders. Model 1 shares one trunk across all three slot
//! projections; Model 2 splits after a common stack into an S branch and a
//! shared P/O branch.
//!
//! Stacks are affine + rectifier layers over precomputed image features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fact::{Slot, WildcardMask};
use crate::lang::FactEmbedding;
use crate::linalg::{Matrix, ShapeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Model1,
    Model2,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Model1 => "model1",
            ModelKind::Model2 => "model2",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "model1" | "1" => Ok(ModelKind::Model1),
            "model2" | "2" => Ok(ModelKind::Model2),
            other => Err(format!("unknown model kind {other:?}")),
        }
    }
}

/// Learning-rate group. `New` parameters train at the boosted rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    #[default]
    Base,
    New,
}

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("invalid encoder spec: {0}")]
    InvalidSpec(String),
}

/// Output widths of successive layers; empty means identity.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackSpec {
    pub widths: Vec<usize>,
}

impl StackSpec {
    pub fn new(widths: Vec<usize>) -> Self {
        StackSpec { widths }
    }

    pub fn identity() -> Self {
        StackSpec::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// A chain of `relu(W a + b)` layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stack {
    input_dim: usize,
    layers: Vec<Dense>,
    #[serde(default)]
    group: ParamGroup,
}

impl Stack {
    pub fn identity(input_dim: usize) -> Self {
        Stack {
            input_dim,
            layers: Vec::new(),
            group: ParamGroup::Base,
        }
    }

    pub fn from_layers(input_dim: usize, layers: Vec<Dense>) -> Result<Self, ShapeError> {
        let mut width = input_dim;
        for l in &layers {
            ShapeError::check("stack layer input", width, l.weights.cols())?;
            ShapeError::check("stack layer bias", l.weights.rows(), l.bias.len())?;
            width = l.weights.rows();
        }
        Ok(Stack {
            input_dim,
            layers,
            group: ParamGroup::Base,
        })
    }

    pub fn with_group(mut self, group: ParamGroup) -> Self {
        self.group = group;
        self
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .last()
            .map_or(self.input_dim, |l| l.weights.rows())
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    fn zeros_like(&self) -> Self {
        Stack {
            input_dim: self.input_dim,
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            group: self.group,
        }
    }

    /// All activations `[x, a_1, ..., a_L]`.
    pub(crate) fn forward(&self, x: &[f64]) -> Result<Vec<Vec<f64>>, ShapeError> {
        ShapeError::check("stack input", self.input_dim, x.len())?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for l in &self.layers {
            let mut z = l.weights.matvec(acts.last().expect("non-empty"))?;
            for (zi, bi) in z.iter_mut().zip(&l.bias) {
                *zi = (*zi + bi).max(0.0);
            }
            acts.push(z);
        }
        Ok(acts)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the stack input.
    pub(crate) fn backward(
        &self,
        acts: &[Vec<f64>],
        grad_out: Vec<f64>,
        grads: &mut Stack,
    ) -> Vec<f64> {
        let mut g = grad_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let out = &acts[i + 1];
            for (gi, ai) in g.iter_mut().zip(out) {
                if *ai <= 0.0 {
                    *gi = 0.0;
                }
            }
            let gl = &mut grads.layers[i];
            gl.weights.add_outer(1.0, &g, &acts[i]);
            for (b, gi) in gl.bias.iter_mut().zip(&g) {
                *b += gi;
            }
            g = layer
                .weights
                .matvec_t(&g)
                .expect("layer shapes validated at construction");
        }
        g
    }
}

/// Applies `stack` layer by layer; the empty stack is the identity.
pub fn apply_stack(stack: &Stack, input: &[f64]) -> Result<Vec<f64>, ShapeError> {
    Ok(stack.forward(input)?.pop().expect("non-empty"))
}

/// Architecture of a visual encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Model 1: the whole trunk. Model 2: the common layers before the split.
    pub shared: StackSpec,
    /// Model 2 only.
    #[serde(default)]
    pub s_branch: StackSpec,
    /// Model 2 only.
    #[serde(default)]
    pub po_branch: StackSpec,
    /// `[d_S, d_P, d_O]`.
    pub slot_dims: [usize; 3],
    /// Stacks trained at the boosted learning rate alongside the projections.
    #[serde(default)]
    pub new_stacks: Vec<StackRole>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackRole {
    Shared,
    SBranch,
    PoBranch,
}

impl EncoderSpec {
    pub fn model1(input_dim: usize, trunk: Vec<usize>, slot_dim: usize) -> Self {
        EncoderSpec {
            kind: ModelKind::Model1,
            input_dim,
            shared: StackSpec::new(trunk),
            s_branch: StackSpec::identity(),
            po_branch: StackSpec::identity(),
            slot_dims: [slot_dim; 3],
            new_stacks: Vec::new(),
        }
    }

    pub fn model2(
        input_dim: usize,
        shared: Vec<usize>,
        s_branch: Vec<usize>,
        po_branch: Vec<usize>,
        slot_dim: usize,
    ) -> Self {
        EncoderSpec {
            kind: ModelKind::Model2,
            input_dim,
            shared: StackSpec::new(shared),
            s_branch: StackSpec::new(s_branch),
            po_branch: StackSpec::new(po_branch),
            slot_dims: [slot_dim; 3],
            new_stacks: Vec::new(),
        }
    }

    fn validate(&self) -> Result<(), EncoderError> {
        if self.input_dim == 0 {
            return Err(EncoderError::InvalidSpec(
                "input_dim must be positive".into(),
            ));
        }
        if self.slot_dims.contains(&0) {
            return Err(EncoderError::InvalidSpec(
                "slot dims must be positive".into(),
            ));
        }
        let all = [&self.shared, &self.s_branch, &self.po_branch];
        if all.iter().any(|s| s.widths.contains(&0)) {
            return Err(EncoderError::InvalidSpec(
                "layer widths must be positive".into(),
            ));
        }
        if self.kind == ModelKind::Model1
            && (!self.s_branch.widths.is_empty() || !self.po_branch.widths.is_empty())
        {
            return Err(EncoderError::InvalidSpec(
                "model1 has a single shared trunk; branch stacks must be empty".into(),
            ));
        }
        Ok(())
    }
}

/// All learnable visual parameters. Also used as the gradient record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub kind: ModelKind,
    pub shared: Stack,
    pub s_branch: Stack,
    pub po_branch: Stack,
    pub proj_s: Matrix,
    pub proj_p: Matrix,
    pub proj_o: Matrix,
}

pub(crate) struct ForwardCache {
    pub shared: Vec<Vec<f64>>,
    pub s_branch: Vec<Vec<f64>>,
    pub po_branch: Vec<Vec<f64>>,
    pub v: [Vec<f64>; 3],
}

impl EncoderParams {
    fn stacks(&self) -> [&Stack; 3] {
        [&self.shared, &self.s_branch, &self.po_branch]
    }

    pub fn input_dim(&self) -> usize {
        self.shared.input_dim()
    }

    pub fn slot_dims(&self) -> [usize; 3] {
        [self.proj_s.rows(), self.proj_p.rows(), self.proj_o.rows()]
    }

    pub fn projection(&self, slot: Slot) -> &Matrix {
        match slot {
            Slot::Subject => &self.proj_s,
            Slot::Predicate => &self.proj_p,
            Slot::Object => &self.proj_o,
        }
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            kind: self.kind,
            shared: self.shared.zeros_like(),
            s_branch: self.s_branch.zeros_like(),
            po_branch: self.po_branch.zeros_like(),
            proj_s: Matrix::zeros(self.proj_s.rows(), self.proj_s.cols()),
            proj_p: Matrix::zeros(self.proj_p.rows(), self.proj_p.cols()),
            proj_o: Matrix::zeros(self.proj_o.rows(), self.proj_o.cols()),
        }
    }

    /// Every parameter tensor in a fixed order with its learning-rate group.
    /// Projections are always `New`.
    pub fn tensors(&self) -> Vec<(&[f64], ParamGroup)> {
        let mut out = Vec::new();
        for stack in self.stacks() {
            for l in &stack.layers {
                out.push((l.weights.as_slice(), stack.group));
                out.push((l.bias.as_slice(), stack.group));
            }
        }
        for m in [&self.proj_s, &self.proj_p, &self.proj_o] {
            out.push((m.as_slice(), ParamGroup::New));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&mut [f64], ParamGroup)> {
        let mut out = Vec::new();
        for stack in [&mut self.shared, &mut self.s_branch, &mut self.po_branch] {
            let group = stack.group;
            for l in &mut stack.layers {
                out.push((l.weights.as_mut_slice(), group));
                out.push((l.bias.as_mut_slice(), group));
            }
        }
        for m in [&mut self.proj_s, &mut self.proj_p, &mut self.proj_o] {
            out.push((m.as_mut_slice(), ParamGroup::New));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(t, _)| t.len()).sum()
    }

    /// Checks the dataflow shapes of either topology.
    pub fn validate(&self) -> Result<(), ShapeError> {
        let h = self.shared.output_dim();
        ShapeError::check("s-branch input", h, self.s_branch.input_dim())?;
        ShapeError::check("po-branch input", h, self.po_branch.input_dim())?;
        ShapeError::check(
            "W^S columns",
            self.s_branch.output_dim(),
            self.proj_s.cols(),
        )?;
        ShapeError::check(
            "W^P columns",
            self.po_branch.output_dim(),
            self.proj_p.cols(),
        )?;
        ShapeError::check(
            "W^O columns",
            self.po_branch.output_dim(),
            self.proj_o.cols(),
        )?;
        Ok(())
    }

    pub(crate) fn forward(&self, features: &[f64]) -> Result<ForwardCache, ShapeError> {
        let shared = self.shared.forward(features)?;
        let trunk = shared.last().expect("non-empty");
        // Model 1 has identity branches, so both read the trunk output b.
        let s_branch = self.s_branch.forward(trunk)?;
        let po_branch = self.po_branch.forward(trunk)?;
        let v = [
            self.proj_s.matvec(s_branch.last().expect("non-empty"))?,
            self.proj_p.matvec(po_branch.last().expect("non-empty"))?,
            self.proj_o.matvec(po_branch.last().expect("non-empty"))?,
        ];
        Ok(ForwardCache {
            shared,
            s_branch,
            po_branch,
            v,
        })
    }

    /// Backpropagates slot-output gradients `[dv_S, dv_P, dv_O]` into `grads`.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        dv: &[Vec<f64>; 3],
        grads: &mut EncoderParams,
    ) {
        let bs = cache.s_branch.last().expect("non-empty");
        let e = cache.po_branch.last().expect("non-empty");
        grads.proj_s.add_outer(1.0, &dv[0], bs);
        grads.proj_p.add_outer(1.0, &dv[1], e);
        grads.proj_o.add_outer(1.0, &dv[2], e);

        let g_bs = self.proj_s.matvec_t(&dv[0]).expect("validated");
        let mut g_e = self.proj_p.matvec_t(&dv[1]).expect("validated");
        let g_eo = self.proj_o.matvec_t(&dv[2]).expect("validated");
        g_e.iter_mut().zip(&g_eo).for_each(|(a, b)| *a += b);

        let mut g_trunk = self
            .s_branch
            .backward(&cache.s_branch, g_bs, &mut grads.s_branch);
        let g_po = self
            .po_branch
            .backward(&cache.po_branch, g_e, &mut grads.po_branch);
        g_trunk.iter_mut().zip(&g_po).for_each(|(a, b)| *a += b);
        self.shared
            .backward(&cache.shared, g_trunk, &mut grads.shared);
    }
}

/// Structured visual embedding `v = [v_S, v_P, v_O]`; wildcard slots of
/// `mask` are zeroed.
pub fn encode_visual(
    params: &EncoderParams,
    features: &[f64],
    mask: WildcardMask,
) -> Result<FactEmbedding, ShapeError> {
    let [s, p, o] = params.forward(features)?.v;
    Ok(FactEmbedding::new(s, p, o, mask))
}

fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let bound = 1.0 / (cols as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

fn init_stack(
    rng: &mut ChaCha8Rng,
    input_dim: usize,
    spec: &StackSpec,
    group: ParamGroup,
) -> Stack {
    let mut width = input_dim;
    let mut layers = Vec::with_capacity(spec.widths.len());
    for &w in &spec.widths {
        layers.push(Dense {
            weights: init_matrix(rng, w, width),
            bias: vec![0.0; w],
        });
        width = w;
    }
    Stack {
        input_dim,
        layers,
        group,
    }
}

/// Random parameters: weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases.
pub fn init_params(spec: &EncoderSpec, seed: u64) -> Result<EncoderParams, EncoderError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let group = |role| {
        if spec.new_stacks.contains(&role) {
            ParamGroup::New
        } else {
            ParamGroup::Base
        }
    };
    let shared = init_stack(
        &mut rng,
        spec.input_dim,
        &spec.shared,
        group(StackRole::Shared),
    );
    let h = shared.output_dim();
    let s_branch = init_stack(&mut rng, h, &spec.s_branch, group(StackRole::SBranch));
    let po_branch = init_stack(&mut rng, h, &spec.po_branch, group(StackRole::PoBranch));
    let [ds, dp, d_o] = spec.slot_dims;
    let proj_s = init_matrix(&mut rng, ds, s_branch.output_dim());
    let proj_p = init_matrix(&mut rng, dp, po_branch.output_dim());
    let proj_o = init_matrix(&mut rng, d_o, po_branch.output_dim());
    let params = EncoderParams {
        kind: spec.kind,
        shared,
        s_branch,
        po_branch,
        proj_s,
        proj_p,
        proj_o,
    };
    params.validate()?;
    Ok(params)
}

/// Mean of the active slots; the unstructured comparator.
pub fn average_spo(embedding: &FactEmbedding) -> Result<Vec<f64>, ShapeError> {
    let [ds, dp, d_o] = embedding.dims();
    ShapeError::check("average_spo P slot", ds, dp)?;
    ShapeError::check("average_spo O slot", ds, d_o)?;
    let mask = embedding.mask();
    let active: Vec<Slot> = Slot::ALL
        .into_iter()
        .filter(|s| mask.is_active(*s))
        .collect();
    let mut out = vec![0.0; ds];
    if active.is_empty() {
        return Ok(out);
    }
    for slot in &active {
        for (o, x) in out.iter_mut().zip(embedding.slot(*slot)) {
            *o += x;
        }
    }
    let n = active.len() as f64;
    out.iter_mut().for_each(|x| *x /= n);
    Ok(out)
}
