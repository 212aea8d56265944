//! Dense tensors, per-channel statistics and adaptive instance normalization.
//!
//! Statistics are taken per channel over every other position of the tensor
//! (population convention, divide by N). AdaIN divides by `σ + ε` so that
//! constant channels stay finite.

use std::fmt;

use crate::error::{Error, Result};

/// Default guard added to the content standard deviation inside [`adain`].
pub const DEFAULT_ADAIN_EPSILON: f32 = 1e-5;

/// Row-major dense `f32` tensor. Every element is finite.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Shape("tensor must have rank >= 1".into()));
        }
        if shape.contains(&0) {
            return Err(Error::Shape(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "tensor element {i} of shape {shape:?}"
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n])
    }

    /// Builds a tensor by evaluating `f` at each flat row-major index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), (0..n).map(f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Self::new(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn expect_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{what}: shapes differ, {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Mean squared elementwise difference. Shapes must match.
    pub fn mean_squared_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "mean_squared_diff")?;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        Ok(sum / self.len() as f64)
    }

    /// Bitwise equality, distinguishing signed zeros.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn channel_layout(&self, channel_axis: usize) -> Result<ChannelLayout> {
        if channel_axis >= self.rank() {
            return Err(Error::Argument(format!(
                "channel axis {channel_axis} out of range for rank {}",
                self.rank()
            )));
        }
        Ok(ChannelLayout {
            outer: self.shape[..channel_axis].iter().product(),
            channels: self.shape[channel_axis],
            inner: self.shape[channel_axis + 1..].iter().product(),
        })
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        write!(f, "{head:?}")?;
        if self.data.len() > PREVIEW {
            write!(f, "..")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ChannelLayout {
    outer: usize,
    channels: usize,
    inner: usize,
}

impl ChannelLayout {
    fn per_channel(&self) -> usize {
        self.outer * self.inner
    }

    /// Flat indices belonging to channel `c`.
    fn indices(&self, c: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.outer).flat_map(move |o| {
            let base = (o * self.channels + c) * self.inner;
            base..base + self.inner
        })
    }
}

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Mean and standard deviation of each slice along `channel_axis`.
pub fn channel_stats(x: &Tensor, channel_axis: usize) -> Result<ChannelStats> {
    if x.rank() < 2 {
        return Err(Error::Argument(format!(
            "channel_stats needs rank >= 2, got shape {:?}",
            x.shape()
        )));
    }
    let layout = x.channel_layout(channel_axis)?;
    let n = layout.per_channel() as f64;
    let mut mean = Vec::with_capacity(layout.channels);
    let mut std = Vec::with_capacity(layout.channels);
    for c in 0..layout.channels {
        // Two passes keep the variance accurate for large offsets.
        let mu = layout.indices(c).map(|i| x.data[i] as f64).sum::<f64>() / n;
        let var = layout
            .indices(c)
            .map(|i| {
                let d = x.data[i] as f64 - mu;
                d * d
            })
            .sum::<f64>()
            / n;
        mean.push(mu);
        std.push(var.sqrt());
    }
    Ok(ChannelStats { mean, std })
}

/// Re-statisticizes `content` so each channel carries the mean and standard
/// deviation of the matching `style` channel:
/// `σ_s · (c − μ_c) / (σ_c + ε) + μ_s`.
///
/// `content` and `style` may differ in every dimension except the channel
/// axis.
pub fn adain(content: &Tensor, style: &Tensor, channel_axis: usize, epsilon: f32) -> Result<Tensor> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Argument(format!(
            "adain epsilon must be positive and finite, got {epsilon}"
        )));
    }
    let content_stats = channel_stats(content, channel_axis)?;
    let style_stats = channel_stats(style, channel_axis)?;
    adain_with_stats(content, channel_axis, &content_stats, &style_stats, epsilon)
}

pub(crate) fn adain_with_stats(
    content: &Tensor,
    channel_axis: usize,
    content_stats: &ChannelStats,
    style_stats: &ChannelStats,
    epsilon: f32,
) -> Result<Tensor> {
    if content_stats.channels() != style_stats.channels() {
        return Err(Error::Shape(format!(
            "adain: content has {} channels, style has {}",
            content_stats.channels(),
            style_stats.channels()
        )));
    }
    let layout = content.channel_layout(channel_axis)?;
    let eps = epsilon as f64;
    let mut out = vec![0.0f32; content.len()];
    for c in 0..layout.channels {
        let scale = style_stats.std[c] / (content_stats.std[c] + eps);
        let (mu_c, mu_s) = (content_stats.mean[c], style_stats.mean[c]);
        for i in layout.indices(c) {
            out[i] = ((content.data[i] as f64 - mu_c) * scale + mu_s) as f32;
        }
    }
    Tensor::new(content.shape.clone(), out)
}

/// `weight · a + (1 − weight) · b`, returning an exact copy of `a` at
/// `weight == 1` and of `b` at `weight == 0`.
pub fn convex_blend(a: &Tensor, b: &Tensor, weight: f32) -> Result<Tensor> {
    a.expect_same_shape(b, "convex_blend")?;
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::Argument(format!(
            "blend weight must lie in [0, 1], got {weight}"
        )));
    }
    if weight == 1.0 {
        return Ok(a.clone());
    }
    if weight == 0.0 {
        return Ok(b.clone());
    }
    let rest = 1.0 - weight;
    a.zip_map(b, |x, y| weight * x + rest * y)
}
