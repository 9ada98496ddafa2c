//! The kernel-prediction network.
//!
//! Five encoder levels (three 3×3 conv + ReLU, then 2×2 average pooling), a
//! bottleneck block, and a decoder that mirrors the encoder: bilinear 2×
//! upsampling followed by element-wise addition of the encoder output at the
//! same resolution. From the half-resolution decoder features four sibling
//! heads each predict one `K`-tap kernel per pixel:
//!
//! ```text
//! conv(c2,c2) relu → conv(c2,c2) relu → conv(c2,K) relu → upsample 2× → conv(K,K)
//! ```
//!
//! Inputs whose sides are not multiples of 32 are replicate-padded on the
//! bottom/right and the head outputs cropped back.

use ndarray::{s, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::kernelconv::{local_sepconv_forward, KernelField};
use crate::nn::{self, Conv2d, ConvGrad};

pub const LEVELS: usize = 5;
/// Total downsampling factor of the encoder.
pub const ALIGN: usize = 1 << LEVELS;

const ENC: usize = 0;
const BOTTLENECK: usize = 15;
const DEC: [usize; 3] = [18, 21, 24];
const HEADS: usize = 27;
const NUM_CONVS: usize = 43;

pub const HEAD_NAMES: [&str; 4] = ["k1v", "k1h", "k2v", "k2h"];

/// Bytes above which [`predict_kernels`] refuses to run; override with the
/// `SEPCONV_MAX_INFERENCE_BYTES` environment variable.
pub const DEFAULT_INFERENCE_BYTE_LIMIT: usize = 8 << 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub encoder_channels: Vec<usize>,
    pub kernel_size: usize,
    pub input_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            encoder_channels: vec![32, 64, 128, 256, 512],
            kernel_size: 51,
            input_channels: 6,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.len() != LEVELS {
            return Err(Error::config(format!(
                "encoder_channels needs {LEVELS} entries, got {}",
                self.encoder_channels.len()
            )));
        }
        if self.encoder_channels.contains(&0) {
            return Err(Error::config("encoder channel widths must be positive"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.input_channels != 6 {
            return Err(Error::config(format!(
                "input_channels must be 6 (two RGB frames), got {}",
                self.input_channels
            )));
        }
        Ok(())
    }

    /// `(in, out)` channels of every convolution in parameter order.
    pub fn conv_shapes(&self) -> Vec<(usize, usize)> {
        let c = &self.encoder_channels;
        let k = self.kernel_size;
        let mut shapes = Vec::with_capacity(NUM_CONVS);
        let mut prev = self.input_channels;
        for &width in c {
            shapes.extend([(prev, width), (width, width), (width, width)]);
            prev = width;
        }
        shapes.extend([(c[4], c[4]); 3]);
        for lvl in [3, 2, 1] {
            shapes.extend([(c[lvl + 1], c[lvl]), (c[lvl], c[lvl]), (c[lvl], c[lvl])]);
        }
        for _ in 0..4 {
            shapes.extend([(c[1], c[1]), (c[1], c[1]), (c[1], k), (k, k)]);
        }
        debug_assert_eq!(shapes.len(), NUM_CONVS);
        shapes
    }

    /// Stable parameter-tensor name for conv `idx`.
    pub fn conv_name(idx: usize) -> String {
        match idx {
            i if i < BOTTLENECK => format!("enc{}.conv{}", i / 3 + 1, i % 3),
            i if i < DEC[0] => format!("bottleneck.conv{}", i - BOTTLENECK),
            i if i < HEADS => format!("dec{}.conv{}", 4 - (i - DEC[0]) / 3, (i - DEC[0]) % 3),
            i => format!(
                "head_{}.conv{}",
                HEAD_NAMES[(i - HEADS) / 4],
                (i - HEADS) % 4
            ),
        }
    }
}

/// Learned weights of the network together with the configuration that
/// shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub config: NetworkConfig,
    pub convs: Vec<Conv2d>,
}

/// Gradients with the same layout as [`ModelParameters::convs`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub convs: Vec<ConvGrad>,
}

impl Gradients {
    pub fn zeros(params: &ModelParameters) -> Self {
        Gradients {
            convs: params.convs.iter().map(ConvGrad::zeros_like).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.convs.iter_mut().zip(&other.convs) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f32) {
        self.convs.iter_mut().for_each(|g| g.scale(s));
    }

    /// `(name, flat values)` in the same order as [`ModelParameters::tensors_mut`].
    pub fn tensors(&self) -> Vec<(String, &[f32])> {
        flat_views(self.convs.iter().map(|g| (&g.weight, &g.bias)))
    }
}

fn flat_views<'a>(
    it: impl Iterator<Item = (&'a ndarray::Array2<f32>, &'a ndarray::Array1<f32>)>,
) -> Vec<(String, &'a [f32])> {
    it.enumerate()
        .flat_map(|(i, (w, b))| {
            let name = NetworkConfig::conv_name(i);
            [
                (format!("{name}.weight"), w.as_slice().expect("contiguous")),
                (format!("{name}.bias"), b.as_slice().expect("contiguous")),
            ]
        })
        .collect()
}

/// Construct a freshly initialized network.
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<ModelParameters> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.kernel_size as f32;
    let mut convs: Vec<Conv2d> = config
        .conv_shapes()
        .into_iter()
        .map(|(i, o)| Conv2d::new(i, o, &mut rng))
        .collect();
    // Start every kernel close to a uniform average of both frames (total
    // mass 1) instead of a random field with mass in the hundreds.
    for h in 0..HEAD_NAMES.len() {
        let last = &mut convs[HEADS + 4 * h + 3];
        last.weight.mapv_inplace(|v| v / k);
        last.bias.fill(1.0 / (k * std::f32::consts::SQRT_2));
    }
    Ok(ModelParameters {
        config: config.clone(),
        convs,
    })
}

impl ModelParameters {
    pub fn num_parameters(&self) -> usize {
        self.convs
            .iter()
            .map(|c| c.weight.len() + c.bias.len())
            .sum()
    }

    pub fn tensors(&self) -> Vec<(String, &[f32])> {
        flat_views(self.convs.iter().map(|c| (&c.weight, &c.bias)))
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f32])> {
        self.convs
            .iter_mut()
            .enumerate()
            .flat_map(|(i, c)| {
                let name = NetworkConfig::conv_name(i);
                [
                    (
                        format!("{name}.weight"),
                        c.weight.as_slice_mut().expect("contiguous"),
                    ),
                    (
                        format!("{name}.bias"),
                        c.bias.as_slice_mut().expect("contiguous"),
                    ),
                ]
            })
            .collect()
    }

    /// Check that tensor shapes agree with the configuration and values are finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let shapes = self.config.conv_shapes();
        if shapes.len() != self.convs.len() {
            return Err(Error::config(
                "parameter count does not match configuration",
            ));
        }
        for (i, ((cin, cout), conv)) in shapes.iter().zip(&self.convs).enumerate() {
            if conv.in_channels() != *cin || conv.out_channels() != *cout {
                return Err(Error::config(format!(
                    "{} has shape {}->{}, config wants {}->{}",
                    NetworkConfig::conv_name(i),
                    conv.in_channels(),
                    conv.out_channels(),
                    cin,
                    cout
                )));
            }
        }
        if let Some((name, _)) = self
            .tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::config(format!(
                "parameter {name} holds non-finite values"
            )));
        }
        Ok(())
    }
}

/// Two RGB frames stacked into a `6×H×W` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    data: Array3<f32>,
}

impl FramePair {
    pub fn new(frame1: &Image<f32>, frame2: &Image<f32>) -> Result<Self> {
        frame1.same_size(frame2)?;
        let mut data = Array3::zeros((6, frame1.height(), frame1.width()));
        data.slice_mut(s![0..3, .., ..]).assign(frame1.data());
        data.slice_mut(s![3..6, .., ..]).assign(frame2.data());
        Ok(FramePair { data })
    }

    pub fn from_array(data: Array3<f32>) -> Result<Self> {
        if data.dim().0 != 6 {
            return Err(Error::dim(format!(
                "frame pair needs 6 channels, got {}",
                data.dim().0
            )));
        }
        Ok(FramePair { data })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.data.dim().1, self.data.dim().2)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }
}

/// Smallest multiple of [`ALIGN`] that is `>= n`.
pub fn aligned(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Activations recorded during a training forward pass.
pub struct Tape {
    inputs: Vec<Array3<f32>>,
    outputs: Vec<Array3<f32>>,
    size: (usize, usize),
    padded: (usize, usize),
}

impl ModelParameters {
    fn unit(
        &self,
        idx: usize,
        x: Array3<f32>,
        relu: bool,
        tape: &mut Option<&mut Tape>,
    ) -> Array3<f32> {
        let mut y = self.convs[idx].forward(&x);
        if relu {
            nn::relu_inplace(&mut y);
        }
        if let Some(t) = tape.as_mut() {
            t.inputs[idx] = x;
            t.outputs[idx] = y.clone();
        }
        y
    }

    fn run(&self, pair: &FramePair, mut tape: Option<&mut Tape>) -> [Array3<f32>; 4] {
        let (h, w) = pair.size();
        let (ph, pw) = (aligned(h), aligned(w));
        let mut a = if (ph, pw) == (h, w) {
            pair.data.clone()
        } else {
            nn::pad_replicate_to(&pair.data, ph, pw)
        };
        if let Some(t) = tape.as_mut() {
            t.size = (h, w);
            t.padded = (ph, pw);
        }

        let mut skips = Vec::with_capacity(LEVELS);
        for level in 0..LEVELS {
            for j in 0..3 {
                a = self.unit(ENC + level * 3 + j, a, true, &mut tape);
            }
            let pooled = nn::avg_pool2(&a);
            skips.push(a);
            a = pooled;
        }
        for j in 0..3 {
            a = self.unit(BOTTLENECK + j, a, true, &mut tape);
        }
        a = nn::upsample_bilinear2(&a) + &skips[4];
        for (base, level) in DEC.into_iter().zip([3, 2, 1]) {
            for j in 0..3 {
                a = self.unit(base + j, a, true, &mut tape);
            }
            a = nn::upsample_bilinear2(&a) + &skips[level];
        }
        drop(skips);

        let mut heads: [Array3<f32>; 4] = Default::default();
        for (hd, out) in heads.iter_mut().enumerate() {
            let base = HEADS + 4 * hd;
            let mut b = self.unit(base, a.clone(), true, &mut tape);
            b = self.unit(base + 1, b, true, &mut tape);
            b = self.unit(base + 2, b, true, &mut tape);
            b = nn::upsample_bilinear2(&b);
            let y = self.unit(base + 3, b, false, &mut tape);
            *out = if (ph, pw) == (h, w) {
                y
            } else {
                y.slice(s![.., 0..h, 0..w]).to_owned()
            };
        }
        heads
    }

    /// Forward pass that records what [`ModelParameters::backward`] needs.
    pub fn forward_train(&self, pair: &FramePair) -> (KernelField<f32>, Tape) {
        let mut tape = Tape {
            inputs: vec![Array3::zeros((0, 0, 0)); NUM_CONVS],
            outputs: vec![Array3::zeros((0, 0, 0)); NUM_CONVS],
            size: (0, 0),
            padded: (0, 0),
        };
        let [k1v, k1h, k2v, k2h] = self.run(pair, Some(&mut tape));
        (KernelField { k1v, k1h, k2v, k2h }, tape)
    }

    /// Parameter gradients given `∂L/∂kernels`.
    pub fn backward(&self, tape: Tape, grad: &KernelField<f32>) -> Gradients {
        let mut grads = Gradients::zeros(self);
        let (h, w) = tape.size;
        let (ph, pw) = tape.padded;
        let Tape {
            inputs, outputs, ..
        } = tape;

        let step =
            |idx: usize, g: Array3<f32>, relu: bool, need_input: bool, grads: &mut Gradients| {
                let mut g = g;
                if relu {
                    nn::relu_backward_inplace(&mut g, &outputs[idx]);
                }
                self.convs[idx].backward(&inputs[idx], &g, &mut grads.convs[idx], need_input)
            };

        let mut g_a: Option<Array3<f32>> = None;
        for (hd, gk) in grad.tensors().into_iter().enumerate() {
            let base = HEADS + 4 * hd;
            let mut g = Array3::zeros((gk.dim().0, ph, pw));
            g.slice_mut(s![.., 0..h, 0..w]).assign(gk);
            let g = step(base + 3, g, false, true, &mut grads).expect("input grad");
            let g = nn::upsample_bilinear2_backward(&g);
            let g = step(base + 2, g, true, true, &mut grads).expect("input grad");
            let g = step(base + 1, g, true, true, &mut grads).expect("input grad");
            let g = step(base, g, true, true, &mut grads).expect("input grad");
            g_a = Some(match g_a {
                None => g,
                Some(acc) => acc + g,
            });
        }

        // decoder: gradient w.r.t. (upsample(block) + skip)
        let mut skip_grads: Vec<Option<Array3<f32>>> = vec![None; LEVELS];
        let mut g = g_a.expect("four heads");
        for (base, level) in DEC.into_iter().zip([3, 2, 1]).rev() {
            skip_grads[level] = Some(g.clone());
            g = nn::upsample_bilinear2_backward(&g);
            for j in (0..3).rev() {
                g = step(base + j, g, true, true, &mut grads).expect("input grad");
            }
        }
        skip_grads[4] = Some(g.clone());
        g = nn::upsample_bilinear2_backward(&g);
        for j in (0..3).rev() {
            g = step(BOTTLENECK + j, g, true, true, &mut grads).expect("input grad");
        }

        for level in (0..LEVELS).rev() {
            g = nn::avg_pool2_backward(&g);
            if let Some(sg) = skip_grads[level].take() {
                g += &sg;
            }
            for j in (0..3).rev() {
                let idx = ENC + level * 3 + j;
                match step(idx, g.clone(), true, idx != 0, &mut grads) {
                    Some(next) => g = next,
                    None => break,
                }
            }
        }
        grads
    }

    /// Spatial sizes `(H, W)` of the encoder outputs and of the decoder
    /// features they are added to, for every level; used to check the
    /// skip-connection geometry.
    pub fn level_sizes(
        &self,
        height: usize,
        width: usize,
    ) -> Vec<((usize, usize), (usize, usize))> {
        let (ph, pw) = (aligned(height), aligned(width));
        (0..LEVELS)
            .map(|l| {
                let enc = (ph >> l, pw >> l);
                // the decoder feature entering level l is the 2× upsample of level l+1
                let dec = ((ph >> (l + 1)) * 2, (pw >> (l + 1)) * 2);
                (enc, dec)
            })
            .collect()
    }
}

fn inference_byte_limit() -> usize {
    std::env::var("SEPCONV_MAX_INFERENCE_BYTES")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(DEFAULT_INFERENCE_BYTE_LIMIT)
}

/// Rough peak memory of one inference pass: the four kernel fields, the
/// widest full-resolution activations and one im2col band.
pub fn estimated_inference_bytes(config: &NetworkConfig, height: usize, width: usize) -> usize {
    let px = aligned(height) * aligned(width);
    let k = config.kernel_size;
    let c1 = config.encoder_channels[0];
    let floats = px * (4 * k + 2 * k.max(c1) + 6 + 2 * c1) + (16 << 20);
    floats * std::mem::size_of::<f32>()
}

/// Predict the four kernel fields for a frame pair (inference mode).
pub fn predict_kernels(params: &ModelParameters, pair: &FramePair) -> Result<KernelField<f32>> {
    let (h, w) = pair.size();
    if h == 0 || w == 0 {
        return Err(Error::dim("empty frame pair"));
    }
    let need = estimated_inference_bytes(&params.config, h, w);
    let limit = inference_byte_limit();
    if need > limit {
        return Err(Error::config(format!(
            "a {w}x{h} frame pair needs about {} MiB for inference (limit {} MiB); \
             downscale the input, reduce kernel_size, or raise SEPCONV_MAX_INFERENCE_BYTES",
            need >> 20,
            limit >> 20
        )));
    }
    let [k1v, k1h, k2v, k2h] = params.run(pair, None);
    Ok(KernelField { k1v, k1h, k2v, k2h })
}

/// Synthesize the frame halfway between `frame1` and `frame2`, clamped to `[0, 1]`.
pub fn interpolate_frame(
    params: &ModelParameters,
    frame1: &Image<f32>,
    frame2: &Image<f32>,
) -> Result<Image<f32>> {
    let pair = FramePair::new(frame1, frame2)?;
    let kernels = predict_kernels(params, &pair)?;
    Ok(local_sepconv_forward(frame1, frame2, &kernels)?.clamp01())
}

/// Batched training forward/backward: returns per-sample outputs of `f` and
/// the summed gradients. Samples run in parallel; gradients are reduced in
/// sample order so the result does not depend on scheduling.
pub fn batch_gradients<S, F>(
    params: &ModelParameters,
    samples: &[S],
    f: F,
) -> Result<(Vec<f32>, Gradients)>
where
    S: Sync,
    F: Fn(&ModelParameters, &S) -> Result<(f32, Gradients)> + Sync,
{
    let results: Vec<Result<(f32, Gradients)>> = samples.par_iter().map(|s| f(params, s)).collect();
    let mut total = Gradients::zeros(params);
    let mut values = Vec::with_capacity(samples.len());
    for r in results {
        let (v, g) = r?;
        values.push(v);
        total.add_assign(&g);
    }
    Ok((values, total))
}
