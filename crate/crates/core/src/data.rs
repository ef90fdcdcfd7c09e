//! Seeded synthetic shape-classification images.
//!
//! Each class is a geometric pattern drawn at a random position, size and
//! colour over a noisy background. Samples are a pure function of
//! `(seed, index)`, so a batch can be generated in any order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_CLASSES: usize = 10;
pub const DEFAULT_SIZE: usize = 32;

// Keeps data streams apart from model initialization under the same seed.
const DATA_KEY: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `[H, W, 3]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: usize,
}

/// Filled square, disk, cross, then seven further outlines and bars.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Square,
    Disk,
    Cross,
    Ring,
    Frame,
    Diamond,
    HorizontalBar,
    VerticalBar,
    Saltire,
    Triangle,
}

impl Pattern {
    pub const ALL: [Pattern; MAX_CLASSES] = [
        Pattern::Square,
        Pattern::Disk,
        Pattern::Cross,
        Pattern::Ring,
        Pattern::Frame,
        Pattern::Diamond,
        Pattern::HorizontalBar,
        Pattern::VerticalBar,
        Pattern::Saltire,
        Pattern::Triangle,
    ];

    /// Whether offset `(dx, dy)` from the centre is inside a shape of
    /// half-size `r` and stroke half-width `t`.
    fn covers(self, dx: f32, dy: f32, r: f32, t: f32) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        let inside_box = ax <= r && ay <= r;
        match self {
            Pattern::Square => inside_box,
            Pattern::Disk => dx * dx + dy * dy <= r * r,
            Pattern::Cross => (ax <= t && ay <= r) || (ay <= t && ax <= r),
            Pattern::Ring => {
                let d = (dx * dx + dy * dy).sqrt();
                d <= r && d >= r - 2.0 * t
            }
            Pattern::Frame => inside_box && (ax >= r - 2.0 * t || ay >= r - 2.0 * t),
            Pattern::Diamond => ax + ay <= r,
            Pattern::HorizontalBar => ay <= t && ax <= r,
            Pattern::VerticalBar => ax <= t && ay <= r,
            Pattern::Saltire => {
                inside_box && ((dx - dy).abs() <= t * 1.5 || (dx + dy).abs() <= t * 1.5)
            }
            Pattern::Triangle => dy <= r && dy >= -r && ax <= (dy + r) / 2.0,
        }
    }
}

fn check_classes(num_classes: usize) -> Result<()> {
    if !(2..=MAX_CLASSES).contains(&num_classes) {
        return Err(Error::config(format!(
            "num_classes must be in 2..={MAX_CLASSES}, got {num_classes}"
        )));
    }
    Ok(())
}

/// One `32 x 32` sample.
pub fn gen_synthetic(seed: u64, index: u64, num_classes: usize) -> Result<SyntheticSample> {
    gen_synthetic_sized(seed, index, num_classes, DEFAULT_SIZE)
}

/// One `size x size` sample. Labels cycle through the classes by index,
/// so class frequencies are uniform over any run of indices.
pub fn gen_synthetic_sized(
    seed: u64,
    index: u64,
    num_classes: usize,
    size: usize,
) -> Result<SyntheticSample> {
    check_classes(num_classes)?;
    if size < 8 {
        return Err(Error::config(format!(
            "synthetic images need size >= 8, got {size}"
        )));
    }
    let label = (index % num_classes as u64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DATA_KEY);
    rng.set_stream(index);

    let s = size as f32;
    let base: f32 = rng.gen_range(0.1..0.45);
    let noise: f32 = rng.gen_range(0.05..0.2);
    let r = rng.gen_range(0.16 * s..0.32 * s);
    let t = (r / 4.0).max(1.0);
    let cx = rng.gen_range(r..s - r);
    let cy = rng.gen_range(r..s - r);
    let colour: [f32; 3] = [
        rng.gen_range(0.55..1.0),
        rng.gen_range(0.55..1.0),
        rng.gen_range(0.55..1.0),
    ];
    let pattern = Pattern::ALL[label];

    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let on = pattern.covers(dx, dy, r, t);
            for c in colour {
                let n: f32 = rng.gen_range(-1.0..1.0) * noise;
                let v = if on { c + 0.5 * n } else { base + n };
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(SyntheticSample {
        image: Tensor::new(&[size, size, 3], data)?,
        label,
    })
}

/// Uniform `[0, 1)` values of the given shape, drawn from `seed`.
pub fn random_images(seed: u64, shape: &[usize]) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, 0.0, 1.0, &mut rng)
}

/// Samples `start .. start + count` stacked into `[count, size, size, 3]`.
pub fn synthetic_batch(
    seed: u64,
    start: u64,
    count: usize,
    num_classes: usize,
    size: usize,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let mut data = Vec::with_capacity(count * size * size * 3);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let s = gen_synthetic_sized(seed, start + i, num_classes, size)?;
        data.extend_from_slice(s.image.data());
        labels.push(s.label);
    }
    Ok((Tensor::new(&[count, size, size, 3], data)?, labels))
}
