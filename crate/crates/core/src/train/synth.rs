use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::tensor::Tensor;

/// Accepted foreground fraction of a generated volume.
pub const FOREGROUND_BAND: (f64, f64) = (0.05, 0.40);

const NOISE_STD: f64 = 0.05;
const MIN_CLASS_VOXELS: usize = 8;

/// An image/label pair. The image is `[1, D, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub image: Tensor,
    pub label: LabelVolume,
    /// Voxel size along `(D, H, W)` in millimetres.
    pub spacing: [f64; 3],
}

impl VolumeSample {
    pub fn dims(&self) -> [usize; 3] {
        self.label.dims
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipsoid,
    Box,
}

/// Deterministic synthetic volumes: one ellipsoid or box per foreground
/// class on a dark background, painted in class order, with additive
/// Gaussian noise. Every class is present and the foreground fraction lies
/// in [`FOREGROUND_BAND`].
pub fn synth_volumes(seed: u64, n: usize, dims: [usize; 3], classes: usize) -> Result<Vec<VolumeSample>> {
    if classes < 2 {
        return Err(Error::Config("synthetic data needs at least 2 classes".into()));
    }
    if classes > u8::MAX as usize {
        return Err(Error::Config(format!("too many classes: {classes}")));
    }
    if dims.iter().any(|&d| d < 4) {
        return Err(Error::Config(format!("synthetic volumes need extents >= 4, got {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| synth_one(&mut rng, dims, classes)).collect()
}

fn synth_one(rng: &mut ChaCha8Rng, dims: [usize; 3], classes: usize) -> Result<VolumeSample> {
    let total: usize = dims.iter().product();
    for _ in 0..1000 {
        let labels = paint(rng, dims, classes);
        let fg = labels.iter().filter(|&&l| l > 0).count();
        let frac = fg as f64 / total as f64;
        let present = (1..classes).all(|c| labels.iter().filter(|&&l| l as usize == c).count() >= MIN_CLASS_VOXELS);
        if present && frac >= FOREGROUND_BAND.0 && frac <= FOREGROUND_BAND.1 {
            let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
            let image: Vec<f64> = labels
                .iter()
                .map(|&l| {
                    let base = 0.1 + 0.8 * l as f64 / (classes - 1) as f64;
                    (base + noise.sample(rng)).clamp(0.0, 1.0)
                })
                .collect();
            return Ok(VolumeSample {
                image: Tensor::new([1, dims[0], dims[1], dims[2]], image)?,
                label: LabelVolume::new(dims, labels)?,
                spacing: [1.0; 3],
            });
        }
    }
    Err(Error::Config(format!(
        "could not place {} structures in a {dims:?} volume",
        classes - 1
    )))
}

fn paint(rng: &mut ChaCha8Rng, dims: [usize; 3], classes: usize) -> Vec<u8> {
    let mut labels = vec![0u8; dims.iter().product()];
    for c in 1..classes {
        let shape = if rng.random_bool(0.5) { Shape::Ellipsoid } else { Shape::Box };
        let mut center = [0.0; 3];
        let mut radius = [0.0; 3];
        for a in 0..3 {
            let e = dims[a] as f64;
            radius[a] = rng.random_range(0.12 * e..0.3 * e).max(1.0);
            center[a] = rng.random_range(radius[a]..e - radius[a]);
        }
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let q = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                    let u: [f64; 3] = std::array::from_fn(|a| (q[a] - center[a]) / radius[a]);
                    let inside = match shape {
                        Shape::Ellipsoid => u.iter().map(|v| v * v).sum::<f64>() <= 1.0,
                        Shape::Box => u.iter().all(|v| v.abs() <= 1.0),
                    };
                    if inside {
                        labels[(z * dims[1] + y) * dims[2] + x] = c as u8;
                    }
                }
            }
        }
    }
    labels
}

/// Stacks sample images into a `[B, 1, D, H, W]` batch.
pub fn batch_images(samples: &[&VolumeSample]) -> Result<Tensor> {
    let dims = samples
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?
        .dims();
    let mut data = Vec::with_capacity(samples.len() * dims.iter().product::<usize>());
    for s in samples {
        if s.dims() != dims {
            return Err(Error::shape("batch_images", &dims, &s.dims()));
        }
        data.extend_from_slice(s.image.data());
    }
    Tensor::new([samples.len(), 1, dims[0], dims[1], dims[2]], data)
}
