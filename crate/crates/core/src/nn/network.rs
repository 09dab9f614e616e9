//! Fully-connected networks with plain, residual and dense-concat trunks.
//!
//! Weights are stored `fan_in x fan_out` so a layer computes `X W + b` on a
//! batch `X` with one sample per row.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::str::FromStr;

use super::{DenseMatrix, NnError};
use crate::emotion::NUM_CLASSES;
use crate::keypoint_io::FEATURE_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    Plain,
    Residual,
    DenseConcat,
}

impl Topology {
    pub fn as_str(self) -> &'static str {
        match self {
            Topology::Plain => "plain",
            Topology::Residual => "residual",
            Topology::DenseConcat => "dense_concat",
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Topology {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain" => Ok(Topology::Plain),
            "residual" => Ok(Topology::Residual),
            "dense_concat" => Ok(Topology::DenseConcat),
            _ => Err(NnError::Spec(format!("unknown topology {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Seven logits.
    Classifier7,
    /// Two parallel width-1 tanh heads: valence then arousal.
    Va2,
}

impl Head {
    pub fn output_width(self) -> usize {
        match self {
            Head::Classifier7 => NUM_CLASSES,
            Head::Va2 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Head::Classifier7 => "classifier7",
            Head::Va2 => "va2",
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Head {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "classifier7" => Ok(Head::Classifier7),
            "va2" => Ok(Head::Va2),
            _ => Err(NnError::Spec(format!("unknown head {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub topology: Topology,
    /// Width of each hidden stage.
    pub hidden: Vec<usize>,
    pub head: Head,
}

pub const DEFAULT_HIDDEN: [usize; 3] = [512, 256, 128];

impl NetworkSpec {
    pub fn new(input_dim: usize, topology: Topology, hidden: Vec<usize>, head: Head) -> Self {
        Self {
            input_dim,
            topology,
            hidden,
            head,
        }
    }

    /// Three hidden stages feeding a 7-way linear layer: four linear layers in total.
    pub fn default_classifier() -> Self {
        Self::new(FEATURE_DIM, Topology::Plain, DEFAULT_HIDDEN.to_vec(), Head::Classifier7)
    }

    /// Three-layer trunk feeding two single-output heads.
    pub fn default_va() -> Self {
        Self::new(FEATURE_DIM, Topology::Plain, DEFAULT_HIDDEN.to_vec(), Head::Va2)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_dim == 0 {
            return Err(NnError::Spec("input_dim must be >= 1".into()));
        }
        if let Some(i) = self.hidden.iter().position(|&w| w == 0) {
            return Err(NnError::Spec(format!("hidden stage {i} has width 0")));
        }
        Ok(())
    }

    /// Input width of hidden stage `k` (or of the head when `k == hidden.len()`).
    pub fn stage_input_dim(&self, k: usize) -> usize {
        match self.topology {
            Topology::DenseConcat => self.input_dim + self.hidden[..k].iter().sum::<usize>(),
            _ => {
                if k == 0 {
                    self.input_dim
                } else {
                    self.hidden[k - 1]
                }
            }
        }
    }

    pub fn head_input_dim(&self) -> usize {
        self.stage_input_dim(self.hidden.len())
    }

    pub fn output_width(&self) -> usize {
        self.head.output_width()
    }

    /// Number of scalar parameters, or `None` on overflow.
    pub fn parameter_count(&self) -> Option<usize> {
        let linear = |i: usize, o: usize, bias: bool| i.checked_mul(o)?.checked_add(if bias { o } else { 0 });
        let mut total = 0usize;
        let mut d = self.input_dim;
        for (k, &w) in self.hidden.iter().enumerate() {
            if self.topology == Topology::DenseConcat {
                d = self.input_dim.checked_add(self.hidden[..k].iter().try_fold(0usize, |a, &b| a.checked_add(b))?)?;
            }
            let stage = match self.topology {
                Topology::Residual => linear(d, w, true)?
                    .checked_add(linear(w, w, true)?)?
                    .checked_add(if d != w { linear(d, w, false)? } else { 0 })?,
                _ => linear(d, w, true)?,
            };
            total = total.checked_add(stage)?;
            d = w;
        }
        if self.topology == Topology::DenseConcat {
            d = self.input_dim.checked_add(self.hidden.iter().try_fold(0usize, |a, &b| a.checked_add(b))?)?;
        }
        let head = match self.head {
            Head::Classifier7 => linear(d, NUM_CLASSES, true)?,
            Head::Va2 => linear(d, 1, true)?.checked_mul(2)?,
        };
        total.checked_add(head)
    }
}

/// One affine map. `bias` is absent for the residual skip projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: DenseMatrix,
    pub bias: Option<Vec<f64>>,
}

impl Linear {
    fn zeros(fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self {
            weight: DenseMatrix::zeros(fan_in, fan_out),
            bias: bias.then(|| vec![0.0; fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn apply(&self, x: &DenseMatrix) -> DenseMatrix {
        let mut y = x.matmul(&self.weight);
        if let Some(b) = &self.bias {
            y.add_row_vector(b);
        }
        y
    }

    /// Accumulate batch-mean gradients into `grad` and return `dX`.
    fn backprop(&self, x: &DenseMatrix, dy: &DenseMatrix, grad: &mut Linear, inv_n: f64) -> DenseMatrix {
        let mut dw = x.t_matmul(dy);
        dw.scale(inv_n);
        grad.weight.add_assign(&dw);
        if let Some(gb) = grad.bias.as_mut() {
            for (g, s) in gb.iter_mut().zip(dy.column_sums()) {
                *g += s * inv_n;
            }
        }
        dy.matmul_t(&self.weight)
    }

    fn tensors<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        out.push(self.weight.data());
        if let Some(b) = &self.bias {
            out.push(b);
        }
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.weight.data_mut());
        if let Some(b) = self.bias.as_mut() {
            out.push(b);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageParams {
    /// `ReLU(X W + b)`; used by plain and dense-concat trunks.
    Dense(Linear),
    /// `ReLU(g(X) + skip(X))` with `g = outer ∘ ReLU ∘ inner`.
    Residual {
        inner: Linear,
        outer: Linear,
        /// Projection used when the stage changes width.
        skip: Option<Linear>,
    },
}

impl StageParams {
    pub fn output_width(&self) -> usize {
        match self {
            StageParams::Dense(l) => l.fan_out(),
            StageParams::Residual { outer, .. } => outer.fan_out(),
        }
    }
}

/// Weights and biases for a [`NetworkSpec`]. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub stages: Vec<StageParams>,
    /// One head for `classifier7`, two (valence, arousal) for `va2`.
    pub heads: Vec<Linear>,
}

impl NetworkParams {
    /// All-zero parameters shaped for `spec`.
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let stages = spec
            .hidden
            .iter()
            .enumerate()
            .map(|(k, &w)| {
                let d = spec.stage_input_dim(k);
                match spec.topology {
                    Topology::Plain | Topology::DenseConcat => StageParams::Dense(Linear::zeros(d, w, true)),
                    Topology::Residual => StageParams::Residual {
                        inner: Linear::zeros(d, w, true),
                        outer: Linear::zeros(w, w, true),
                        skip: (d != w).then(|| Linear::zeros(d, w, false)),
                    },
                }
            })
            .collect();
        let d = spec.head_input_dim();
        let heads = match spec.head {
            Head::Classifier7 => vec![Linear::zeros(d, NUM_CLASSES, true)],
            Head::Va2 => vec![Linear::zeros(d, 1, true), Linear::zeros(d, 1, true)],
        };
        Self { stages, heads }
    }

    fn linears(&self) -> Vec<&Linear> {
        let mut out = Vec::new();
        for s in &self.stages {
            match s {
                StageParams::Dense(l) => out.push(l),
                StageParams::Residual { inner, outer, skip } => {
                    out.push(inner);
                    out.push(outer);
                    out.extend(skip.iter());
                }
            }
        }
        out.extend(self.heads.iter());
        out
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            match s {
                StageParams::Dense(l) => out.push(l),
                StageParams::Residual { inner, outer, skip } => {
                    out.push(inner);
                    out.push(outer);
                    out.extend(skip.iter_mut());
                }
            }
        }
        out.extend(self.heads.iter_mut());
        out
    }

    /// Every weight and bias buffer in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in self.linears() {
            l.tensors(&mut out);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in self.linears_mut() {
            l.tensors_mut(&mut out);
        }
        out
    }

    /// `(rows, cols)` of each tensor in [`tensors`](Self::tensors) order;
    /// bias vectors report `(1, len)`.
    pub fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for l in self.linears() {
            out.push(l.weight.shape());
            if let Some(b) = &l.bias {
                out.push((1, b.len()));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Confirm the layout matches `spec`.
    pub fn check(&self, spec: &NetworkSpec) -> Result<(), NnError> {
        let expected = NetworkParams::zeros(spec);
        if expected.stages.len() != self.stages.len() || expected.heads.len() != self.heads.len() {
            return Err(NnError::Dimension(format!(
                "parameters have {} stages / {} heads, spec needs {} / {}",
                self.stages.len(),
                self.heads.len(),
                expected.stages.len(),
                expected.heads.len()
            )));
        }
        for (i, (a, b)) in expected.linears().iter().zip(self.linears()).enumerate() {
            let bias_len = |l: &Linear| l.bias.as_ref().map(|b| b.len());
            if a.weight.shape() != b.weight.shape() || bias_len(a) != bias_len(b) {
                return Err(NnError::Dimension(format!(
                    "layer {i}: expected weight {:?}, found {:?}",
                    a.weight.shape(),
                    b.weight.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Uniform `±sqrt(6 / fan_in)` weights, zero biases, deterministic per seed.
pub fn init_network(spec: &NetworkSpec, seed: u64) -> Result<NetworkParams, NnError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetworkParams::zeros(spec);
    for l in params.linears_mut() {
        let limit = (6.0 / l.fan_in() as f64).sqrt();
        for w in l.weight.data_mut() {
            *w = rng.gen_range(-limit..limit);
        }
    }
    Ok(params)
}

#[derive(Debug, Clone)]
enum StageCache {
    Dense {
        input: DenseMatrix,
        pre: DenseMatrix,
    },
    Residual {
        input: DenseMatrix,
        inner_pre: DenseMatrix,
        inner_act: DenseMatrix,
        pre: DenseMatrix,
    },
}

/// Intermediate values a [`forward`] call keeps for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    spec: NetworkSpec,
    rows: usize,
    stages: Vec<StageCache>,
    head_input: DenseMatrix,
    /// Post-activation outputs (needed for the tanh derivative).
    outputs: DenseMatrix,
}

impl ForwardCache {
    pub fn batch_rows(&self) -> usize {
        self.rows
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Which ReLU inputs were strictly positive, over every stage and row.
    /// Two evaluations with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for stage in &self.stages {
            let pres: Vec<&DenseMatrix> = match stage {
                StageCache::Dense { pre, .. } => vec![pre],
                StageCache::Residual { inner_pre, pre, .. } => vec![inner_pre, pre],
            };
            for m in pres {
                out.extend(m.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn relu_mask(grad: &DenseMatrix, pre: &DenseMatrix) -> DenseMatrix {
    let mut out = grad.clone();
    for (g, &p) in out.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
    out
}

/// Run a batch (one sample per row) through the network.
///
/// Returns logits for `classifier7`, or `[valence, arousal]` in (-1, 1) per
/// row for `va2`.
pub fn forward(params: &NetworkParams, spec: &NetworkSpec, x: &DenseMatrix) -> Result<(DenseMatrix, ForwardCache), NnError> {
    if x.cols() != spec.input_dim {
        return Err(NnError::Dimension(format!(
            "input: expected {} columns, got {}",
            spec.input_dim,
            x.cols()
        )));
    }
    params.check(spec)?;

    let mut stages = Vec::with_capacity(spec.hidden.len());
    // dense_concat keeps every stage output for concatenation
    let mut outputs: Vec<DenseMatrix> = Vec::new();
    let mut h = x.clone();
    for stage in &params.stages {
        let input = match spec.topology {
            Topology::DenseConcat if !outputs.is_empty() => {
                let mut parts: Vec<&DenseMatrix> = vec![x];
                parts.extend(outputs.iter());
                DenseMatrix::hcat(&parts)
            }
            Topology::DenseConcat => x.clone(),
            _ => h,
        };
        let (out, cache) = match stage {
            StageParams::Dense(l) => {
                let pre = l.apply(&input);
                (pre.map(relu), StageCache::Dense { input, pre })
            }
            StageParams::Residual { inner, outer, skip } => {
                let inner_pre = inner.apply(&input);
                let inner_act = inner_pre.map(relu);
                let mut pre = outer.apply(&inner_act);
                match skip {
                    Some(p) => pre.add_assign(&p.apply(&input)),
                    None => pre.add_assign(&input),
                }
                (
                    pre.map(relu),
                    StageCache::Residual {
                        input,
                        inner_pre,
                        inner_act,
                        pre,
                    },
                )
            }
        };
        stages.push(cache);
        if spec.topology == Topology::DenseConcat {
            outputs.push(out.clone());
        }
        h = out;
    }

    let head_input = match spec.topology {
        Topology::DenseConcat if !outputs.is_empty() => {
            let mut parts: Vec<&DenseMatrix> = vec![x];
            parts.extend(outputs.iter());
            DenseMatrix::hcat(&parts)
        }
        Topology::DenseConcat => x.clone(),
        _ => h,
    };

    let out = match spec.head {
        Head::Classifier7 => params.heads[0].apply(&head_input),
        Head::Va2 => {
            let v = params.heads[0].apply(&head_input).map(f64::tanh);
            let a = params.heads[1].apply(&head_input).map(f64::tanh);
            DenseMatrix::hcat(&[&v, &a])
        }
    };
    if !out.all_finite() {
        return Err(NnError::NonFinite("forward output".into()));
    }

    let cache = ForwardCache {
        spec: spec.clone(),
        rows: x.rows(),
        stages,
        head_input,
        outputs: out.clone(),
    };
    Ok((out, cache))
}

/// Backpropagate `output_grad` (one row of dLoss/dOutput per sample).
///
/// Parameter gradients are averaged over the batch rows. For `va2`,
/// `output_grad` is taken with respect to the post-tanh outputs.
pub fn backward(
    params: &NetworkParams,
    spec: &NetworkSpec,
    cache: &ForwardCache,
    output_grad: &DenseMatrix,
) -> Result<NetworkParams, NnError> {
    if cache.spec != *spec || cache.stages.len() != params.stages.len() {
        return Err(NnError::Contract("cache was produced for a different network".into()));
    }
    params.check(spec)?;
    if output_grad.shape() != (cache.rows, spec.output_width()) {
        return Err(NnError::Contract(format!(
            "output gradient is {:?}, cache expects {:?}",
            output_grad.shape(),
            (cache.rows, spec.output_width())
        )));
    }

    let inv_n = 1.0 / cache.rows as f64;
    let mut grads = NetworkParams::zeros(spec);

    let mut d_head_in = match spec.head {
        Head::Classifier7 => {
            params.heads[0].backprop(&cache.head_input, output_grad, &mut grads.heads[0], inv_n)
        }
        Head::Va2 => {
            let mut acc: Option<DenseMatrix> = None;
            for j in 0..2 {
                let mut dz = DenseMatrix::zeros(cache.rows, 1);
                for r in 0..cache.rows {
                    let y = cache.outputs.get(r, j);
                    dz.set(r, 0, output_grad.get(r, j) * (1.0 - y * y));
                }
                let dx = params.heads[j].backprop(&cache.head_input, &dz, &mut grads.heads[j], inv_n);
                match acc.as_mut() {
                    Some(a) => a.add_assign(&dx),
                    None => acc = Some(dx),
                }
            }
            acc.expect("two heads")
        }
    };

    match spec.topology {
        Topology::DenseConcat => {
            // d_head_in covers [x, out_0, ..., out_{K-1}]; walk stages backwards,
            // pushing each stage's input gradient into the earlier blocks.
            let widths = &spec.hidden;
            let mut offsets = vec![spec.input_dim];
            for w in widths.iter().take(widths.len().saturating_sub(1)) {
                offsets.push(offsets.last().unwrap() + w);
            }
            for k in (0..params.stages.len()).rev() {
                let (l, g) = match (&params.stages[k], &mut grads.stages[k]) {
                    (StageParams::Dense(l), StageParams::Dense(g)) => (l, g),
                    _ => return Err(NnError::Contract("stage kind mismatch".into())),
                };
                let (input, pre) = match &cache.stages[k] {
                    StageCache::Dense { input, pre } => (input, pre),
                    _ => return Err(NnError::Contract("stage cache mismatch".into())),
                };
                let d_out = d_head_in.column_block(offsets[k], widths[k]);
                let dz = relu_mask(&d_out, pre);
                let d_in = l.backprop(input, &dz, g, inv_n);
                // d_in spans columns 0..offsets[k] of the running gradient
                for r in 0..cache.rows {
                    let src = d_in.row(r);
                    let dst = &mut d_head_in.row_mut(r)[..offsets[k]];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        _ => {
            let mut d_out = d_head_in;
            for k in (0..params.stages.len()).rev() {
                d_out = match (&params.stages[k], &mut grads.stages[k], &cache.stages[k]) {
                    (StageParams::Dense(l), StageParams::Dense(g), StageCache::Dense { input, pre }) => {
                        let dz = relu_mask(&d_out, pre);
                        l.backprop(input, &dz, g, inv_n)
                    }
                    (
                        StageParams::Residual { inner, outer, skip },
                        StageParams::Residual {
                            inner: g_inner,
                            outer: g_outer,
                            skip: g_skip,
                        },
                        StageCache::Residual {
                            input,
                            inner_pre,
                            inner_act,
                            pre,
                        },
                    ) => {
                        let d_pre = relu_mask(&d_out, pre);
                        let d_act = outer.backprop(inner_act, &d_pre, g_outer, inv_n);
                        let d_inner = relu_mask(&d_act, inner_pre);
                        let mut d_in = inner.backprop(input, &d_inner, g_inner, inv_n);
                        match (skip, g_skip.as_mut()) {
                            (Some(p), Some(gp)) => d_in.add_assign(&p.backprop(input, &d_pre, gp, inv_n)),
                            (None, None) => d_in.add_assign(&d_pre),
                            _ => return Err(NnError::Contract("skip projection mismatch".into())),
                        }
                        d_in
                    }
                    _ => return Err(NnError::Contract("stage kind mismatch".into())),
                };
            }
        }
    }
    Ok(grads)
}

/// Row-wise argmax; the lowest index wins ties.
pub fn predict_class(logits: &DenseMatrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
