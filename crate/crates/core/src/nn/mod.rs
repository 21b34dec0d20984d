//! The convolutional acoustic model.
//!
//! A window of input frames passes through `S` filter stages
//! (convolution → max-pool → tanh), is flattened frame-major, and feeds a
//! one-hidden-layer tanh perceptron whose linear outputs are the class scores.

mod layers;

pub use layers::{conv_forward, maxpool_forward, softmax, ConvLayerParams, Pooled};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::FrameMatrix;
use crate::real::Real;
use layers::{axpy, conv_backward, dot, maxpool_backward};

/// Hyperparameters of one filter extraction stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StageConfig {
    pub kernel_width: usize,
    pub shift: usize,
    pub filters: usize,
    /// 1 disables pooling for the stage.
    pub pool_width: usize,
}

impl StageConfig {
    pub fn new(kernel_width: usize, shift: usize, filters: usize, pool_width: usize) -> Self {
        StageConfig {
            kernel_width,
            shift,
            filters,
            pool_width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Frames per input window (samples, for raw waveform input).
    pub input_window: usize,
    /// Dimension of each input frame: 1 for raw samples.
    pub input_dim: usize,
    pub stages: Vec<StageConfig>,
    pub hidden_units: usize,
    pub num_classes: usize,
}

/// Frame counts through one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageShape {
    pub input_frames: usize,
    pub input_dim: usize,
    pub conv_frames: usize,
    pub pooled_frames: usize,
    pub output_dim: usize,
}

impl NetworkConfig {
    /// Propagates the window length through every stage, failing on the first
    /// stage that cannot be applied.
    pub fn stage_shapes(&self) -> Result<Vec<StageShape>> {
        if self.input_window == 0 || self.input_dim == 0 {
            return Err(Error::shape("input window and frame dimension must be >= 1"));
        }
        let mut frames = self.input_window;
        let mut dim = self.input_dim;
        let mut shapes = Vec::with_capacity(self.stages.len());
        for (s, st) in self.stages.iter().enumerate() {
            if st.kernel_width == 0 || st.shift == 0 || st.filters == 0 || st.pool_width == 0 {
                return Err(Error::shape(format!(
                    "stage {s}: kernel width, shift, filters and pool width must be >= 1"
                )));
            }
            if frames < st.kernel_width {
                return Err(Error::shape(format!(
                    "stage {s}: {frames} frames cannot fit kernel width {}",
                    st.kernel_width
                )));
            }
            let conv_frames = (frames - st.kernel_width) / st.shift + 1;
            if conv_frames < st.pool_width {
                return Err(Error::shape(format!(
                    "stage {s}: {conv_frames} frames cannot fill pool width {}",
                    st.pool_width
                )));
            }
            let pooled_frames = conv_frames / st.pool_width;
            shapes.push(StageShape {
                input_frames: frames,
                input_dim: dim,
                conv_frames,
                pooled_frames,
                output_dim: st.filters,
            });
            frames = pooled_frames;
            dim = st.filters;
        }
        Ok(shapes)
    }

    /// Length of the vector fed to the classification stage.
    pub fn flattened_size(&self) -> Result<usize> {
        let shapes = self.stage_shapes()?;
        Ok(match shapes.last() {
            Some(s) => s.pooled_frames * s.output_dim,
            None => self.input_window * self.input_dim,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.hidden_units == 0 {
            return Err(Error::invalid("hidden layer needs at least one unit"));
        }
        self.flattened_size().map(|_| ())
    }

    /// Number of weights and biases in the network.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        let mut count = 0;
        let mut dim = self.input_dim;
        for st in &self.stages {
            count += st.filters * st.kernel_width * dim + st.filters;
            dim = st.filters;
        }
        let flat = self.flattened_size()?;
        count += flat * self.hidden_units + self.hidden_units;
        count += self.hidden_units * self.num_classes + self.num_classes;
        Ok(count)
    }
}

/// A fully connected layer; row `o` of `weights` feeds output `o`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F = f32> {
    pub weights: Vec<F>,
    pub bias: Vec<F>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<F: Real> Linear<F> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weights: vec![F::zero(); in_dim * out_dim],
            bias: vec![F::zero(); out_dim],
            in_dim,
            out_dim,
        }
    }

    fn forward(&self, x: &[F]) -> Vec<F> {
        (0..self.out_dim)
            .map(|o| dot(&self.weights[o * self.in_dim..(o + 1) * self.in_dim], x) + self.bias[o])
            .collect()
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, x: &[F], dy: &[F], grad: &mut Linear<F>) -> Vec<F> {
        let mut dx = vec![F::zero(); self.in_dim];
        for (o, &g) in dy.iter().enumerate() {
            if g == F::zero() {
                continue;
            }
            let row = o * self.in_dim..(o + 1) * self.in_dim;
            axpy(g, x, &mut grad.weights[row.clone()]);
            grad.bias[o] += g;
            axpy(g, &self.weights[row], &mut dx);
        }
        dx
    }
}

/// Learned tensors of a network. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<F = f32> {
    pub conv: Vec<ConvLayerParams<F>>,
    /// Pool width following each conv layer.
    pub pool_widths: Vec<usize>,
    pub hidden: Linear<F>,
    pub output: Linear<F>,
}

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl<F: Real> NetworkParams<F> {
    pub fn zeros(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut dim = config.input_dim;
        let conv = config
            .stages
            .iter()
            .map(|st| {
                let p = ConvLayerParams::zeros(st.kernel_width, st.shift, dim, st.filters);
                dim = st.filters;
                p
            })
            .collect();
        let flat = config.flattened_size()?;
        Ok(NetworkParams {
            conv,
            pool_widths: config.stages.iter().map(|st| st.pool_width).collect(),
            hidden: Linear::zeros(flat, config.hidden_units),
            output: Linear::zeros(config.hidden_units, config.num_classes),
        })
    }

    /// Seeded initialization: every weight and bias of a layer is uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |values: &mut [F], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in values {
                *v = F::of(rng.random_range(-bound..bound));
            }
        };
        for c in &mut params.conv {
            let fan_in = c.fan_in();
            fill(&mut c.weights, fan_in);
            fill(&mut c.bias, fan_in);
        }
        for l in [&mut params.hidden, &mut params.output] {
            let fan_in = l.in_dim;
            fill(&mut l.weights, fan_in);
            fill(&mut l.bias, fan_in);
        }
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    /// Tensor names and shapes in canonical order.
    pub fn tensor_infos(&self) -> Vec<TensorInfo> {
        let mut out = Vec::new();
        for (i, c) in self.conv.iter().enumerate() {
            out.push(TensorInfo {
                name: format!("conv{i}.weight"),
                shape: vec![c.out_dim, c.kernel_width * c.in_dim],
            });
            out.push(TensorInfo {
                name: format!("conv{i}.bias"),
                shape: vec![c.out_dim],
            });
        }
        for (name, l) in [("hidden", &self.hidden), ("output", &self.output)] {
            out.push(TensorInfo {
                name: format!("{name}.weight"),
                shape: vec![l.out_dim, l.in_dim],
            });
            out.push(TensorInfo {
                name: format!("{name}.bias"),
                shape: vec![l.out_dim],
            });
        }
        out
    }

    /// Tensor values in the same order as [`tensor_infos`](Self::tensor_infos).
    pub fn tensors(&self) -> Vec<&[F]> {
        let mut out: Vec<&[F]> = Vec::new();
        for c in &self.conv {
            out.push(&c.weights);
            out.push(&c.bias);
        }
        for l in [&self.hidden, &self.output] {
            out.push(&l.weights);
            out.push(&l.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = Vec::new();
        for c in &mut self.conv {
            out.push(&mut c.weights);
            out.push(&mut c.bias);
        }
        for l in [&mut self.hidden, &mut self.output] {
            out.push(&mut l.weights);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<G: Real>(&self) -> NetworkParams<G> {
        let cv = |v: &[F]| v.iter().map(|x| G::of(x.as_f64())).collect::<Vec<G>>();
        let lin = |l: &Linear<F>| Linear {
            weights: cv(&l.weights),
            bias: cv(&l.bias),
            in_dim: l.in_dim,
            out_dim: l.out_dim,
        };
        NetworkParams {
            conv: self
                .conv
                .iter()
                .map(|c| ConvLayerParams {
                    weights: cv(&c.weights),
                    bias: cv(&c.bias),
                    kernel_width: c.kernel_width,
                    shift: c.shift,
                    in_dim: c.in_dim,
                    out_dim: c.out_dim,
                })
                .collect(),
            pool_widths: self.pool_widths.clone(),
            hidden: lin(&self.hidden),
            output: lin(&self.output),
        }
    }

    fn layout(&self) -> Vec<usize> {
        let mut v = Vec::new();
        for c in &self.conv {
            v.extend([c.kernel_width, c.shift, c.in_dim, c.out_dim]);
        }
        v.extend(self.pool_widths.iter().copied());
        v.extend([self.hidden.in_dim, self.hidden.out_dim, self.output.out_dim]);
        v
    }
}

#[derive(Debug, Clone)]
struct StageCache<F> {
    input: FrameMatrix<F>,
    conv_frames: usize,
    argmax: Vec<usize>,
    activated: FrameMatrix<F>,
}

/// Activations retained by [`forward_pass`] for [`backward_pass`].
#[derive(Debug, Clone)]
pub struct ForwardCache<F = f32> {
    layout: Vec<usize>,
    input: FrameMatrix<F>,
    stages: Vec<StageCache<F>>,
    hidden: Vec<F>,
}

impl<F: Real> ForwardCache<F> {
    /// Whether both passes routed every max-pool output from the same input
    /// frame.
    pub fn same_pool_selection(&self, other: &ForwardCache<F>) -> bool {
        self.stages.len() == other.stages.len()
            && self.stages.iter().zip(&other.stages).all(|(a, b)| a.argmax == b.argmax)
    }

    fn flat(&self) -> &[F] {
        match self.stages.last() {
            Some(s) => s.activated.as_slice(),
            None => self.input.as_slice(),
        }
    }
}

/// Class scores for one input window.
pub fn forward_pass<F: Real>(
    window: &FrameMatrix<F>,
    params: &NetworkParams<F>,
) -> Result<(Vec<F>, ForwardCache<F>)> {
    let mut x = window.clone();
    let mut stages = Vec::with_capacity(params.conv.len());
    for (s, conv) in params.conv.iter().enumerate() {
        let stage_err = |e: Error| Error::shape(format!("stage {s}: {e}"));
        let y = conv_forward(&x, conv).map_err(stage_err)?;
        let pool_width = params.pool_widths.get(s).copied().unwrap_or(1);
        let Pooled { output, argmax } = maxpool_forward(&y, pool_width).map_err(stage_err)?;
        let mut activated = output;
        activated
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = v.tanh());
        stages.push(StageCache {
            input: std::mem::replace(&mut x, activated.clone()),
            conv_frames: y.rows(),
            argmax,
            activated,
        });
    }
    let flat = x.as_slice();
    if flat.len() != params.hidden.in_dim {
        return Err(Error::shape(format!(
            "classification stage expects {} inputs, filter stages produced {}",
            params.hidden.in_dim,
            flat.len()
        )));
    }
    let mut hidden = params.hidden.forward(flat);
    hidden.iter_mut().for_each(|v| *v = v.tanh());
    let scores = params.output.forward(&hidden);
    Ok((
        scores,
        ForwardCache {
            layout: params.layout(),
            input: window.clone(),
            stages,
            hidden,
        },
    ))
}

/// Exact gradients of a loss with respect to every parameter and to the
/// input window, given the loss gradient `d_scores` with respect to the
/// class scores.
pub fn backward_pass<F: Real>(
    cache: &ForwardCache<F>,
    params: &NetworkParams<F>,
    d_scores: &[F],
) -> Result<(NetworkParams<F>, FrameMatrix<F>)> {
    let mut grads = params.zeros_like();
    let d_input = backward_into(cache, params, d_scores, &mut grads, true)?;
    Ok((grads, d_input.expect("input gradient requested")))
}

/// Overwrites `grads` with the parameter gradients. The input gradient is
/// only computed when `want_input_grad` is set.
pub fn backward_into<F: Real>(
    cache: &ForwardCache<F>,
    params: &NetworkParams<F>,
    d_scores: &[F],
    grads: &mut NetworkParams<F>,
    want_input_grad: bool,
) -> Result<Option<FrameMatrix<F>>> {
    if cache.layout != params.layout() || cache.stages.len() != params.conv.len() {
        return Err(Error::Invariant(
            "forward cache was produced by a network of a different shape".into(),
        ));
    }
    if grads.layout() != params.layout() {
        return Err(Error::Invariant(
            "gradient buffer does not match the network shape".into(),
        ));
    }
    if d_scores.len() != params.output.out_dim {
        return Err(Error::shape(format!(
            "expected {} score gradients, got {}",
            params.output.out_dim,
            d_scores.len()
        )));
    }
    grads.fill_zero();

    let mut d_hidden = params
        .output
        .backward(&cache.hidden, d_scores, &mut grads.output);
    for (g, &h) in d_hidden.iter_mut().zip(&cache.hidden) {
        *g *= F::one() - h * h;
    }
    let mut d_flat = params
        .hidden
        .backward(cache.flat(), &d_hidden, &mut grads.hidden);

    for s in (0..params.conv.len()).rev() {
        let stage = &cache.stages[s];
        for (g, &a) in d_flat.iter_mut().zip(stage.activated.as_slice()) {
            *g *= F::one() - a * a;
        }
        let conv = &params.conv[s];
        let d_conv = maxpool_backward(&d_flat, &stage.argmax, conv.out_dim, stage.conv_frames);
        let need_dx = s > 0 || want_input_grad;
        let mut dx = if need_dx {
            vec![F::zero(); stage.input.as_slice().len()]
        } else {
            Vec::new()
        };
        conv_backward(
            &stage.input,
            conv,
            &d_conv,
            &mut grads.conv[s],
            need_dx.then_some(dx.as_mut_slice()),
        );
        d_flat = dx;
    }

    Ok(want_input_grad.then(|| {
        FrameMatrix::from_raw(cache.input.rows(), cache.input.dim(), d_flat)
    }))
}
