//! Perceptual loss on the activations of a frozen VGG-19 `features` stack.
//!
//! Weights come from a safetensors file using torchvision's tensor names
//! (`features.<idx>.weight` with shape `[out, in, 3, 3]`, `features.<idx>.bias`).
//! Only the layers up to the tap are loaded. Channel widths are read from the
//! file, so narrower stand-in networks with the same topology load too.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{self, Conv2d, ConvGrad};

/// Op at each index of torchvision's `vgg19().features`.
pub const VGG19_FEATURES: [VggOp; 37] = {
    use VggOp::*;
    [
        Conv, Relu, Conv, Relu, MaxPool, // block 1
        Conv, Relu, Conv, Relu, MaxPool, // block 2
        Conv, Relu, Conv, Relu, Conv, Relu, Conv, Relu, MaxPool, // block 3
        Conv, Relu, Conv, Relu, Conv, Relu, Conv, Relu, MaxPool, // block 4
        Conv, Relu, Conv, Relu, Conv, Relu, Conv, Relu, MaxPool, // block 5
    ]
};

/// ReLU after the last convolution of block 4 (`relu4_4`).
pub const DEFAULT_FEATURE_TAP: usize = 26;

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VggOp {
    Conv,
    Relu,
    MaxPool,
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    convs: HashMap<usize, Conv2d>,
    tap: usize,
    source: Option<PathBuf>,
}

fn unavailable(path: &Path, message: impl Into<String>) -> Error {
    Error::ExtractorUnavailable {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

impl FeatureExtractor {
    /// Load weights for layers `0..=tap` from a safetensors file.
    pub fn load(path: impl AsRef<Path>, tap: usize) -> Result<Self> {
        let path = path.as_ref();
        check_tap(tap)?;
        let bytes = std::fs::read(path).map_err(|e| unavailable(path, e.to_string()))?;
        let st = SafeTensors::deserialize(&bytes)
            .map_err(|e| unavailable(path, format!("not a safetensors file ({e})")))?;
        let mut convs = HashMap::new();
        let mut prev_out = 3;
        for idx in conv_indices(tap) {
            let wname = format!("features.{idx}.weight");
            let bname = format!("features.{idx}.bias");
            let wt = st
                .tensor(&wname)
                .map_err(|_| unavailable(path, format!("missing tensor {wname}")))?;
            let bt = st
                .tensor(&bname)
                .map_err(|_| unavailable(path, format!("missing tensor {bname}")))?;
            if wt.dtype() != Dtype::F32 || bt.dtype() != Dtype::F32 {
                return Err(unavailable(
                    path,
                    format!("{wname}: only f32 tensors are supported"),
                ));
            }
            let shape = wt.shape();
            if shape.len() != 4 || shape[2] != 3 || shape[3] != 3 || shape[1] != prev_out {
                return Err(unavailable(
                    path,
                    format!("{wname} has unexpected shape {shape:?}"),
                ));
            }
            if bt.shape() != [shape[0]] {
                return Err(unavailable(
                    path,
                    format!("{bname} has unexpected shape {:?}", bt.shape()),
                ));
            }
            let weight = Array2::from_shape_vec((shape[0], shape[1] * 9), le_f32(wt.data()))
                .expect("checked shape");
            let bias = Array1::from(le_f32(bt.data()));
            prev_out = shape[0];
            convs.insert(idx, Conv2d::from_parts(weight, bias));
        }
        Ok(FeatureExtractor {
            convs,
            tap,
            source: Some(path.to_path_buf()),
        })
    }

    /// Randomly initialized extractor with the VGG-19 topology and the given
    /// per-block widths. Useful for exercising the loss without real weights.
    pub fn random(block_widths: [usize; 5], tap: usize, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        check_tap(tap)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut convs = HashMap::new();
        let mut prev = 3;
        for idx in conv_indices(tap) {
            let width = block_widths[block_of(idx)];
            convs.insert(idx, Conv2d::new(prev, width, &mut rng));
            prev = width;
        }
        Ok(FeatureExtractor {
            convs,
            tap,
            source: None,
        })
    }

    /// Write the loaded layers in the format [`FeatureExtractor::load`] reads.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        let mut idxs: Vec<_> = self.convs.keys().copied().collect();
        idxs.sort_unstable();
        for idx in idxs {
            let conv = &self.convs[&idx];
            let (o, i9) = conv.weight.dim();
            owned.push((
                format!("features.{idx}.weight"),
                vec![o, i9 / 9, 3, 3],
                f32_le(conv.weight.iter()),
            ));
            owned.push((
                format!("features.{idx}.bias"),
                vec![o],
                f32_le(conv.bias.iter()),
            ));
        }
        let views: Vec<(String, safetensors::tensor::TensorView<'_>)> = owned
            .iter()
            .map(|(n, s, d)| {
                let v = safetensors::tensor::TensorView::new(Dtype::F32, s.clone(), d)
                    .expect("consistent view");
                (n.clone(), v)
            })
            .collect();
        let bytes = safetensors::serialize(views, &None).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn tap(&self) -> usize {
        self.tap
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    fn normalize(img: &Image<f32>) -> Array3<f32> {
        let mut x = img.data().clone();
        for c in 0..3 {
            x.index_axis_mut(ndarray::Axis(0), c)
                .mapv_inplace(|v| (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]);
        }
        x
    }

    fn run(&self, img: &Image<f32>, mut trace: Option<&mut Vec<Array3<f32>>>) -> Array3<f32> {
        let mut x = Self::normalize(img);
        for (idx, op) in VGG19_FEATURES.iter().enumerate().take(self.tap + 1) {
            let y = match op {
                VggOp::Conv => self.convs[&idx].forward(&x),
                VggOp::Relu => {
                    let mut y = x.clone();
                    nn::relu_inplace(&mut y);
                    y
                }
                VggOp::MaxPool => nn::max_pool2(&x),
            };
            if let Some(t) = trace.as_mut() {
                t.push(x);
            }
            x = y;
        }
        x
    }

    /// Activations at the tap layer.
    pub fn features(&self, img: &Image<f32>) -> Array3<f32> {
        self.run(img, None)
    }

    pub fn loss(&self, pred: &Image<f32>, gt: &Image<f32>) -> Result<f32> {
        pred.same_size(gt)?;
        let fp = self.features(pred);
        let fg = self.features(gt);
        let n = fp.len() as f64;
        let sum: f64 = fp
            .iter()
            .zip(fg.iter())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        Ok((sum / n) as f32)
    }

    /// Loss and its gradient with respect to `pred`.
    pub fn loss_with_grad(&self, pred: &Image<f32>, gt: &Image<f32>) -> Result<(f32, Array3<f32>)> {
        pred.same_size(gt)?;
        let mut trace = Vec::with_capacity(self.tap + 1);
        let fp = self.run(pred, Some(&mut trace));
        let fg = self.features(gt);
        let n = fp.len() as f32;
        let diff = &fp - &fg;
        let loss = (diff.iter().map(|&d| (d as f64).powi(2)).sum::<f64>() / n as f64) as f32;

        let mut g = diff * (2.0 / n);
        let mut y = fp;
        for idx in (0..=self.tap).rev() {
            let x = &trace[idx];
            g = match VGG19_FEATURES[idx] {
                VggOp::Conv => {
                    let conv = &self.convs[&idx];
                    // frozen weights: parameter gradients are discarded
                    let mut scratch = ConvGrad::zeros_like(conv);
                    conv.backward(x, &g, &mut scratch, true)
                        .expect("input grad")
                }
                VggOp::Relu => {
                    nn::relu_backward_inplace(&mut g, &y);
                    g
                }
                VggOp::MaxPool => nn::max_pool2_backward(x, &g),
            };
            y = trace[idx].clone();
        }
        for c in 0..3 {
            g.index_axis_mut(ndarray::Axis(0), c)
                .mapv_inplace(|v| v / IMAGENET_STD[c]);
        }
        Ok((loss, g))
    }
}

fn check_tap(tap: usize) -> Result<()> {
    if tap >= VGG19_FEATURES.len() {
        return Err(Error::config(format!(
            "feature tap {tap} is past the end of the VGG-19 feature stack"
        )));
    }
    Ok(())
}

fn conv_indices(tap: usize) -> impl Iterator<Item = usize> {
    (0..=tap).filter(|&i| VGG19_FEATURES[i] == VggOp::Conv)
}

fn block_of(idx: usize) -> usize {
    VGG19_FEATURES[..idx]
        .iter()
        .filter(|&&op| op == VggOp::MaxPool)
        .count()
}

fn le_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn f32_le<'a>(it: impl Iterator<Item = &'a f32>) -> Vec<u8> {
    it.flat_map(|v| v.to_le_bytes()).collect()
}
