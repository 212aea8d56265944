//! Procedurally generated toy images: geometric-shape "content" images and
//! parametric texture "style" images, each class with its own condition id.
//!
//! Images are `channels × size × size` tensors in `[-1, 1]`. Channels beyond
//! the third reuse the palette cyclically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::Condition;
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageClass {
    Shapes,
    Stripes,
    Checker,
    NoisePalette,
}

impl ImageClass {
    pub const ALL: [ImageClass; 4] = [
        ImageClass::Shapes,
        ImageClass::Stripes,
        ImageClass::Checker,
        ImageClass::NoisePalette,
    ];

    pub const STYLES: [ImageClass; 3] = [
        ImageClass::Stripes,
        ImageClass::Checker,
        ImageClass::NoisePalette,
    ];

    pub fn condition(self) -> Condition {
        Condition(match self {
            ImageClass::Shapes => 1,
            ImageClass::Stripes => 2,
            ImageClass::Checker => 3,
            ImageClass::NoisePalette => 4,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ImageClass::Shapes => "shapes",
            ImageClass::Stripes => "stripes",
            ImageClass::Checker => "checker",
            ImageClass::NoisePalette => "noise",
        }
    }

    pub fn from_condition(c: Condition) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.condition() == c)
    }
}

type Rgb = [f32; 3];

// Palettes in [0, 1]; each style class keeps a recognisable colour range.
const STRIPE_COLORS: [Rgb; 4] = [
    [0.95, 0.35, 0.10],
    [0.98, 0.80, 0.15],
    [0.70, 0.10, 0.10],
    [0.40, 0.05, 0.20],
];
const CHECKER_COLORS: [Rgb; 4] = [
    [0.10, 0.25, 0.85],
    [0.90, 0.95, 1.00],
    [0.05, 0.55, 0.75],
    [0.02, 0.05, 0.30],
];
const NOISE_COLORS: [Rgb; 4] = [
    [0.20, 0.75, 0.25],
    [0.55, 0.20, 0.70],
    [0.05, 0.35, 0.10],
    [0.85, 0.90, 0.35],
];

fn jitter(rng: &mut ChaCha8Rng, c: Rgb) -> Rgb {
    c.map(|v| (v + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0))
}

fn pick(rng: &mut ChaCha8Rng, palette: &[Rgb]) -> Rgb {
    let pick = palette[rng.random_range(0..palette.len())];
    jitter(rng, pick)
}

fn pick_two(rng: &mut ChaCha8Rng, palette: &[Rgb]) -> (Rgb, Rgb) {
    let i = rng.random_range(0..palette.len());
    let j = (i + rng.random_range(1..palette.len())) % palette.len();
    (jitter(rng, palette[i]), jitter(rng, palette[j]))
}

/// Renders `pixel(y, x) -> rgb in [0, 1]` into a `[-1, 1]` tensor.
fn render(channels: usize, size: usize, pixel: impl Fn(usize, usize) -> Rgb) -> Result<Tensor> {
    let plane = size * size;
    Tensor::from_fn(&[channels, size, size], |i| {
        let (c, y, x) = (i / plane, (i % plane) / size, i % size);
        pixel(y, x)[c % 3] * 2.0 - 1.0
    })
}

pub fn generate(class: ImageClass, channels: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    match class {
        ImageClass::Shapes => shapes(channels, size, rng),
        ImageClass::Stripes => stripes(channels, size, rng),
        ImageClass::Checker => checker(channels, size, rng),
        ImageClass::NoisePalette => noise_palette(channels, size, rng),
    }
}

fn shapes(channels: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let light = rng.random_bool(0.5);
    let background = if light {
        [0.85, 0.85, 0.82]
    } else {
        [0.12, 0.12, 0.15]
    };
    let background = jitter(rng, background);
    let count = rng.random_range(1..=3);
    let s = size as f32;
    let figures: Vec<(bool, f32, f32, f32, Rgb)> = (0..count)
        .map(|_| {
            let circle = rng.random_bool(0.5);
            let r = rng.random_range(0.12 * s..0.3 * s);
            let cy = rng.random_range(r..s - r);
            let cx = rng.random_range(r..s - r);
            let color: Rgb = [0.0, 0.0, 0.0].map(|_: f32| rng.random_range(0.0..1.0));
            (circle, cy, cx, r, color)
        })
        .collect();
    render(channels, size, |y, x| {
        let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
        figures
            .iter()
            .rev()
            .find(|(circle, cy, cx, r, _)| {
                let (dy, dx) = (py - cy, px - cx);
                if *circle {
                    dy * dy + dx * dx <= r * r
                } else {
                    dy.abs() <= *r && dx.abs() <= *r
                }
            })
            .map(|f| f.4)
            .unwrap_or(background)
    })
}

fn stripes(channels: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (a, b) = pick_two(rng, &STRIPE_COLORS);
    let period = rng.random_range(4..=8);
    let orientation = rng.random_range(0..3);
    let phase = rng.random_range(0..period);
    render(channels, size, |y, x| {
        let coord = match orientation {
            0 => x,
            1 => y,
            _ => x + y,
        } + phase;
        if (coord % period) * 2 < period {
            a
        } else {
            b
        }
    })
}

fn checker(channels: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (a, b) = pick_two(rng, &CHECKER_COLORS);
    let cell = rng.random_range(3..=8);
    let (oy, ox) = (rng.random_range(0..cell), rng.random_range(0..cell));
    render(channels, size, |y, x| {
        if ((y + oy) / cell + (x + ox) / cell) % 2 == 0 {
            a
        } else {
            b
        }
    })
}

fn noise_palette(channels: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let block = rng.random_range(2..=4);
    let blocks = size.div_ceil(block);
    let cells: Vec<Rgb> = (0..blocks * blocks).map(|_| pick(rng, &NOISE_COLORS)).collect();
    render(channels, size, |y, x| cells[(y / block) * blocks + x / block])
}

/// Content/style pair `index` of the fixed evaluation fixture set. Content is
/// always a shapes image; the style cycles through the texture classes.
pub fn fixture_pair(index: usize, channels: usize, size: usize) -> Result<(Tensor, Tensor, ImageClass)> {
    let mut content_rng = ChaCha8Rng::seed_from_u64(0xC0_0000 + index as u64);
    let mut style_rng = ChaCha8Rng::seed_from_u64(0x57_0000 + index as u64);
    let style_class = ImageClass::STYLES[index % ImageClass::STYLES.len()];
    let content = generate(ImageClass::Shapes, channels, size, &mut content_rng)?;
    let style = generate(style_class, channels, size, &mut style_rng)?;
    Ok((content, style, style_class))
}
