//! Generator (conv encoder, deformation head, atlas warp), the decoder
//! generator used without an atlas, and the conditional discriminator.

use rand_chacha::ChaCha8Rng;

use super::conv::{Conv3d, ConvCache, ConvGeom, ConvTranspose3d, ConvTransposeCache};
use super::layers::{leaky_relu, leaky_relu_backward, sigmoid, softmax, Linear};
use super::tensor::{Param, Tensor};
use super::NnetError;
use crate::atlas::Atlas;
use crate::transform::{warp_vjp_multi, warp_with, ParamVector, Sampling, AFFINE_LEN, DEFAULT_GRID};
use crate::volume::{Volume, VolumeKind};

pub const CHANNELS: [usize; 5] = [8, 16, 32, 64, 64];
pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;

/// Residual scales applied to the head output before it is added to the
/// identity parameters.
pub const HEAD_SCALE_MATRIX: f64 = 10.0;
pub const HEAD_SCALE_TRANSLATION: f64 = 100.0;
pub const HEAD_SCALE_PHI: f64 = 100.0;
/// Gain on the feature difference fed to the generator head.
pub const FEATURE_GAIN: f64 = 10.0;
/// Width (voxels) of the fixed Gaussian blur on the discriminator's label
/// channel.
pub const LABEL_BLUR_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv = 0,
    ConvTranspose = 1,
    Linear = 2,
}

/// Parameter tensors in a fixed order, tagged by the layer that owns them.
pub trait Network {
    fn params(&self) -> Vec<(LayerKind, &Param)>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_weights(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }
}

fn volume_tensor(vols: &[&Volume]) -> Result<Tensor, NnetError> {
    let d = vols[0].dims();
    if vols.iter().any(|v| v.dims() != d) {
        return Err(NnetError::Shape("input volumes differ in dims".into()));
    }
    let mut data = Vec::with_capacity(vols.len() * vols[0].len());
    for v in vols {
        data.extend_from_slice(v.data());
    }
    Tensor::from_vec([vols.len(), d[0], d[1], d[2]], data)
}

/// Five strided convolutions with leaky ReLU after each.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub convs: Vec<Conv3d>,
}

#[derive(Debug, Clone)]
pub struct StackTrace {
    caches: Vec<ConvCache>,
    /// Post-activation outputs, one per layer.
    pub acts: Vec<Tensor>,
}

impl ConvStack {
    pub fn new(c_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut convs = Vec::with_capacity(CHANNELS.len());
        let mut c = c_in;
        for &co in &CHANNELS {
            convs.push(Conv3d::new(c, co, KERNEL, STRIDE, rng));
            c = co;
        }
        Self { convs }
    }

    /// Spatial sizes after each layer.
    pub fn levels(input: [usize; 3]) -> Vec<[usize; 3]> {
        let mut out = Vec::with_capacity(CHANNELS.len());
        let mut s = input;
        for _ in 0..CHANNELS.len() {
            s = ConvGeom::same(s, KERNEL, STRIDE).small;
            out.push(s);
        }
        out
    }

    pub fn output_len(input: [usize; 3]) -> usize {
        let last = *Self::levels(input).last().expect("non-empty stack");
        CHANNELS[CHANNELS.len() - 1] * last.iter().product::<usize>()
    }

    pub fn forward(&self, x: &Tensor) -> Result<StackTrace, NnetError> {
        let mut caches = Vec::with_capacity(self.convs.len());
        let mut acts: Vec<Tensor> = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let input = acts.last().unwrap_or(x);
            let (mut y, cache) = conv.forward(input)?;
            leaky_relu(y.data_mut());
            caches.push(cache);
            acts.push(y);
        }
        Ok(StackTrace { caches, acts })
    }

    /// Backpropagates from the last activation, adding `skip_grads[l]` (if
    /// any) to the gradient of activation `l` on the way down.
    pub fn backward(&mut self, trace: &StackTrace, d_last: Tensor, skip_grads: &[Option<Tensor>]) -> Tensor {
        let mut g = d_last;
        for l in (0..self.convs.len()).rev() {
            if let Some(Some(s)) = skip_grads.get(l) {
                for (a, b) in g.data_mut().iter_mut().zip(s.data()) {
                    *a += b;
                }
            }
            leaky_relu_backward(trace.acts[l].data(), g.data_mut());
            g = self.convs[l].backward(&trace.caches[l], &g);
        }
        g
    }

    fn params(&self) -> Vec<(LayerKind, &Param)> {
        self.convs
            .iter()
            .flat_map(|c| [(LayerKind::Conv, &c.weight), (LayerKind::Conv, &c.bias)])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}

/// Atlas-deforming generator: encoder, fully connected head emitting the
/// deformation parameters, and the warp of both atlas volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub input_dims: [usize; 3],
    pub grid: [usize; 3],
    pub encoder: ConvStack,
    pub head: Linear,
}

/// Everything the backward pass needs, plus the generator outputs.
#[derive(Debug, Clone)]
pub struct GenTrace {
    enc: StackTrace,
    enc_ref: StackTrace,
    feat: Vec<f64>,
    pub params: ParamVector,
    pub g_label: Volume,
    pub g_intensity: Volume,
}

pub fn head_scales(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| match i {
            0..9 => HEAD_SCALE_MATRIX,
            9..AFFINE_LEN => HEAD_SCALE_TRANSLATION,
            _ => HEAD_SCALE_PHI,
        })
        .collect()
}

impl Generator {
    pub fn new(input_dims: [usize; 3], rng: &mut ChaCha8Rng) -> Result<Self, NnetError> {
        Self::with_grid(input_dims, DEFAULT_GRID, rng)
    }

    pub fn with_grid(input_dims: [usize; 3], grid: [usize; 3], rng: &mut ChaCha8Rng) -> Result<Self, NnetError> {
        let n_params = ParamVector::identity(grid, input_dims)?.len();
        let encoder = ConvStack::new(1, rng);
        let head = Linear::new(ConvStack::output_len(input_dims), n_params, rng);
        Ok(Self {
            input_dims,
            grid,
            encoder,
            head,
        })
    }

    pub fn param_len(&self) -> usize {
        self.head.n_out
    }

    /// Zeroes the head so the generator emits the identity deformation.
    pub fn zero_head(&mut self) {
        self.head.weight.data.iter_mut().for_each(|w| *w = 0.0);
        self.head.bias.data.iter_mut().for_each(|w| *w = 0.0);
    }

    fn check_inputs(&self, x: &Volume, atlas: &Atlas) -> Result<(), NnetError> {
        if x.dims() != self.input_dims {
            return Err(NnetError::Shape(format!(
                "generator built for {:?}, input is {:?}",
                self.input_dims,
                x.dims()
            )));
        }
        if atlas.intensity.dims() != self.input_dims {
            return Err(NnetError::Shape(format!(
                "atlas dims {:?} differ from input {:?}",
                atlas.intensity.dims(),
                self.input_dims
            )));
        }
        Ok(())
    }

    /// Deformation parameters for `x` (identity plus scaled head output).
    /// The head reads the difference between the features of `x` and of the
    /// atlas intensity `reference`.
    pub fn predict_params(&self, x: &Volume, reference: &Volume) -> Result<(StackTrace, StackTrace, Vec<f64>, ParamVector), NnetError> {
        let enc = self.encoder.forward(&volume_tensor(&[x])?)?;
        let enc_ref = self.encoder.forward(&volume_tensor(&[reference])?)?;
        let last = |t: &StackTrace| t.acts.last().expect("non-empty stack").data().to_vec();
        let feat: Vec<f64> = last(&enc).iter().zip(last(&enc_ref)).map(|(a, b)| FEATURE_GAIN * (a - b)).collect();
        let h = self.head.forward(&feat)?;
        let mut params = ParamVector::identity(self.grid, self.input_dims)?;
        for ((p, v), s) in params.values_mut().iter_mut().zip(&h).zip(head_scales(h.len())) {
            *p += s * v;
        }
        // The matrix residual acts about the volume centre c: t -= dM c.
        let c = self.centre();
        let values = params.values_mut();
        for a in 0..3 {
            for b in 0..3 {
                values[9 + a] -= HEAD_SCALE_MATRIX * h[3 * a + b] * c[b];
            }
        }
        Ok((enc, enc_ref, feat, params))
    }

    pub fn forward(&self, x: &Volume, atlas: &Atlas) -> Result<GenTrace, NnetError> {
        self.check_inputs(x, atlas)?;
        let (enc, enc_ref, feat, params) = self.predict_params(x, &atlas.intensity)?;
        let g_label = warp_with(&params, &atlas.label, self.input_dims, Sampling::Trilinear);
        let g_intensity = warp_with(&params, &atlas.intensity, self.input_dims, Sampling::Trilinear);
        Ok(GenTrace {
            enc,
            enc_ref,
            feat,
            params,
            g_label,
            g_intensity,
        })
    }

    /// Accumulates weight gradients of a loss whose gradients with respect to
    /// the warped label and intensity volumes are given (either may be empty
    /// to mean zero). Returns `dL/dparams`.
    pub fn backward(&mut self, trace: &GenTrace, atlas: &Atlas, d_label: &[f64], d_intensity: &[f64]) -> Vec<f64> {
        let mut terms: Vec<(&Volume, &[f64])> = Vec::with_capacity(2);
        if !d_label.is_empty() {
            terms.push((&atlas.label, d_label));
        }
        if !d_intensity.is_empty() {
            terms.push((&atlas.intensity, d_intensity));
        }
        let d_params = if terms.is_empty() {
            vec![0.0; self.param_len()]
        } else {
            warp_vjp_multi(&trace.params, &terms, self.input_dims)
        };
        self.backward_from_params(trace, &d_params);
        d_params
    }

    fn centre(&self) -> [f64; 3] {
        self.input_dims.map(|n| (n as f64 - 1.0) / 2.0)
    }

    pub fn backward_from_params(&mut self, trace: &GenTrace, d_params: &[f64]) {
        let mut dh: Vec<f64> = d_params.iter().zip(head_scales(d_params.len())).map(|(g, s)| g * s).collect();
        let c = self.centre();
        for a in 0..3 {
            for b in 0..3 {
                dh[3 * a + b] -= HEAD_SCALE_MATRIX * d_params[9 + a] * c[b];
            }
        }
        let dfeat: Vec<f64> = self.head.backward(&trace.feat, &dh).iter().map(|g| FEATURE_GAIN * g).collect();
        let last = trace.enc.acts.last().expect("non-empty stack").shape();
        let d_ref = Tensor::from_vec(last.clone(), dfeat.iter().map(|g| -g).collect()).expect("feature shape");
        let d_last = Tensor::from_vec(last, dfeat).expect("feature shape");
        self.encoder.backward(&trace.enc, d_last, &[]);
        self.encoder.backward(&trace.enc_ref, d_ref, &[]);
    }
}

impl Network for Generator {
    fn params(&self) -> Vec<(LayerKind, &Param)> {
        let mut v = self.encoder.params();
        v.push((LayerKind::Linear, &self.head.weight));
        v.push((LayerKind::Linear, &self.head.bias));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.encoder.params_mut();
        v.extend(self.head.params_mut());
        v
    }
}

/// Encoder-decoder generator that emits a voxelwise soft label directly
/// (no atlas): mirrored transposed convolutions with skip connections and a
/// sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGenerator {
    pub input_dims: [usize; 3],
    pub encoder: ConvStack,
    pub decoder: Vec<ConvTranspose3d>,
}

#[derive(Debug, Clone)]
pub struct DecoderTrace {
    enc: StackTrace,
    caches: Vec<ConvTransposeCache>,
    /// Post-activation decoder outputs (before concatenation), deepest first.
    outs: Vec<Tensor>,
    pub g_label: Volume,
}

impl DecoderGenerator {
    pub fn new(input_dims: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        let encoder = ConvStack::new(1, rng);
        let n = CHANNELS.len();
        // Layer l upsamples from encoder level l to level l-1; inputs carry
        // the skip from level l except at the bottom.
        let mut decoder = Vec::with_capacity(n);
        for l in (0..n).rev() {
            let c_in = if l == n - 1 { CHANNELS[l] } else { 2 * CHANNELS[l] };
            let c_out = if l == 0 { 1 } else { CHANNELS[l - 1] };
            decoder.push(ConvTranspose3d::new(c_in, c_out, KERNEL, STRIDE, rng));
        }
        Self {
            input_dims,
            encoder,
            decoder,
        }
    }

    pub fn forward(&self, x: &Volume) -> Result<DecoderTrace, NnetError> {
        if x.dims() != self.input_dims {
            return Err(NnetError::Shape(format!(
                "generator built for {:?}, input is {:?}",
                self.input_dims,
                x.dims()
            )));
        }
        let enc = self.encoder.forward(&volume_tensor(&[x])?)?;
        let n = CHANNELS.len();
        let mut levels = vec![self.input_dims];
        levels.extend(ConvStack::levels(self.input_dims));
        let mut caches = Vec::with_capacity(n);
        let mut outs: Vec<Tensor> = Vec::with_capacity(n);
        for (step, t) in self.decoder.iter().enumerate() {
            let l = n - 1 - step;
            let input = if step == 0 {
                enc.acts[n - 1].clone()
            } else {
                Tensor::concat(&[&outs[step - 1], &enc.acts[l]])?
            };
            let (mut y, cache) = t.forward(&input, levels[l])?;
            if l > 0 {
                leaky_relu(y.data_mut());
            } else {
                y.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
            }
            caches.push(cache);
            outs.push(y);
        }
        let prob = outs.last().expect("non-empty decoder").data().to_vec();
        let spacing = x.spacing();
        let g_label = Volume::new(self.input_dims, spacing, prob, VolumeKind::Label)?;
        Ok(DecoderTrace {
            enc,
            caches,
            outs,
            g_label,
        })
    }

    /// Accumulates weight gradients given `dL/dg_label`.
    pub fn backward(&mut self, trace: &DecoderTrace, d_label: &[f64]) {
        let n = CHANNELS.len();
        let last = trace.outs.last().expect("non-empty decoder");
        let mut g = Tensor::from_vec(
            last.shape(),
            d_label.iter().zip(last.data()).map(|(d, p)| d * p * (1.0 - p)).collect(),
        )
        .expect("output shape");
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; n];
        for step in (0..n).rev() {
            let l = n - 1 - step;
            if l > 0 {
                leaky_relu_backward(trace.outs[step].data(), g.data_mut());
            }
            let dx = self.decoder[step].backward(&trace.caches[step], &g);
            if step == 0 {
                g = dx;
            } else {
                let c_prev = trace.outs[step - 1].channels();
                let (d_prev, d_skip) = dx.split_channels(c_prev);
                skip_grads[l] = Some(d_skip);
                g = d_prev;
            }
        }
        self.encoder.backward(&trace.enc, g, &skip_grads);
    }
}

impl Network for DecoderGenerator {
    fn params(&self) -> Vec<(LayerKind, &Param)> {
        let mut v = self.encoder.params();
        for t in &self.decoder {
            v.push((LayerKind::ConvTranspose, &t.weight));
            v.push((LayerKind::ConvTranspose, &t.bias));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.encoder.params_mut();
        for t in &mut self.decoder {
            v.extend(t.params_mut());
        }
        v
    }
}

/// Separable Gaussian blur (radius 2, sigma [`LABEL_BLUR_SIGMA`]) with zero
/// padding.
fn blur(data: &[f64], dims: [usize; 3]) -> Vec<f64> {
    let mut k = [0.0; 5];
    for (i, w) in k.iter_mut().enumerate() {
        let d = i as f64 - 2.0;
        *w = (-d * d / (2.0 * LABEL_BLUR_SIGMA * LABEL_BLUR_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        let (n, st) = (dims[axis] as isize, strides[axis] as isize);
        for (idx, out) in next.iter_mut().enumerate() {
            let pos = (idx as isize / st) % n;
            let mut acc = 0.0;
            for (t, w) in k.iter().enumerate() {
                let q = pos + t as isize - 2;
                if (0..n).contains(&q) {
                    acc += w * cur[(idx as isize + (q - pos) * st) as usize];
                }
            }
            *out = acc;
        }
        cur = next;
    }
    cur
}

/// Conditional discriminator on the channel stack (volume, blurred label)
/// with a two-way softmax; index 0 is "real". The blur keeps partial-volume
/// values of a warped soft label from being a giveaway on their own.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub input_dims: [usize; 3],
    pub encoder: ConvStack,
    pub head: Linear,
}

#[derive(Debug, Clone)]
pub struct DiscTrace {
    enc: StackTrace,
    feat: Vec<f64>,
    pub logits: [f64; 2],
    pub probs: [f64; 2],
}

impl DiscTrace {
    pub fn p_real(&self) -> f64 {
        self.probs[0]
    }
}

impl Discriminator {
    pub fn new(input_dims: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        let encoder = ConvStack::new(2, rng);
        let head = Linear::new(ConvStack::output_len(input_dims), 2, rng);
        Self {
            input_dims,
            encoder,
            head,
        }
    }

    /// Zeroes the output layer so both classes start at probability 0.5 and
    /// the gradient reaching the generator starts at zero.
    pub fn zero_head(&mut self) {
        self.head.weight.data.iter_mut().for_each(|w| *w = 0.0);
        self.head.bias.data.iter_mut().for_each(|w| *w = 0.0);
    }

    pub fn forward(&self, x: &Volume, label: &Volume) -> Result<DiscTrace, NnetError> {
        if x.dims() != self.input_dims || label.dims() != self.input_dims {
            return Err(NnetError::Shape(format!(
                "discriminator built for {:?}, inputs are {:?} and {:?}",
                self.input_dims,
                x.dims(),
                label.dims()
            )));
        }
        let blurred = label.with_data(blur(label.data(), self.input_dims))?;
        let enc = self.encoder.forward(&volume_tensor(&[x, &blurred])?)?;
        let feat = enc.acts.last().expect("non-empty stack").data().to_vec();
        let z = self.head.forward(&feat)?;
        let p = softmax(&z);
        Ok(DiscTrace {
            enc,
            feat,
            logits: [z[0], z[1]],
            probs: [p[0], p[1]],
        })
    }

    /// Accumulates weight gradients from `dL/dlogits`; returns the gradient
    /// with respect to the label channel of the input.
    pub fn backward(&mut self, trace: &DiscTrace, d_logits: [f64; 2]) -> Vec<f64> {
        let dfeat = self.head.backward(&trace.feat, &d_logits);
        let last = trace.enc.acts.last().expect("non-empty stack").shape();
        let d_last = Tensor::from_vec(last, dfeat).expect("feature shape");
        let dx = self.encoder.backward(&trace.enc, d_last, &[]);
        // The zero-padded symmetric blur is self-adjoint.
        blur(dx.channel(1), self.input_dims)
    }
}

impl Network for Discriminator {
    fn params(&self) -> Vec<(LayerKind, &Param)> {
        let mut v = self.encoder.params();
        v.push((LayerKind::Linear, &self.head.weight));
        v.push((LayerKind::Linear, &self.head.bias));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.encoder.params_mut();
        v.extend(self.head.params_mut());
        v
    }
}
