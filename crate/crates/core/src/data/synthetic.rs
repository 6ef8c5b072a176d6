use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, Dataset};
use crate::nn::Shape3;
use crate::rng::stream_rng;

/// Class-conditioned Gaussian-blob images.
///
/// Class `c` places a bright blob near a fixed anchor on a ring around the
/// image centre; each example jitters the anchor, varies the blob width and
/// brightness and adds clipped background noise. Labels are balanced: class
/// `c` gets `n / classes` examples, plus one for the first `n % classes`
/// classes. Examples are interleaved by class.
pub fn synthetic_dataset(
    seed: u64,
    n: usize,
    classes: usize,
    dims: Shape3,
) -> Result<Dataset, DataError> {
    if classes < 2 || n < classes {
        return Err(DataError::Invalid(format!(
            "need at least 2 classes and n >= classes, got n={n}, classes={classes}"
        )));
    }
    if dims.height < 4 || dims.width < 4 || dims.channels == 0 {
        return Err(DataError::Invalid(format!("image shape {dims} is too small")));
    }
    let mut rng = stream_rng(seed, 0x5EED);
    let jitter = Normal::new(0.0f64, 0.6).unwrap();
    let noise = Normal::new(0.0f64, 0.12).unwrap();
    let (h, w, ch) = (dims.height as f64, dims.width as f64, dims.channels);
    let ring = 0.3 * h.min(w);
    let anchors: Vec<(f64, f64)> = (0..classes)
        .map(|c| {
            let angle = std::f64::consts::TAU * c as f64 / classes as f64;
            ((h - 1.0) / 2.0 + ring * angle.sin(), (w - 1.0) / 2.0 + ring * angle.cos())
        })
        .collect();
    let mut images = Vec::with_capacity(n * dims.len());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let (ay, ax) = anchors[label];
        let cy = ay + jitter.sample(&mut rng);
        let cx = ax + jitter.sample(&mut rng);
        let width = rng.random_range(1.2..2.2f64);
        let amplitude = rng.random_range(0.6..1.0f64);
        for y in 0..dims.height {
            for x in 0..dims.width {
                let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let blob = amplitude * (-r2 / (2.0 * width * width)).exp();
                for c in 0..ch {
                    // Later channels see a slightly dimmer copy of the blob.
                    let v = blob * (1.0 - 0.15 * c as f64) + noise.sample(&mut rng);
                    images.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(images, labels, dims, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_a_seed() {
        let a = synthetic_dataset(3, 50, 5, Shape3::new(8, 8, 1)).unwrap();
        let b = synthetic_dataset(3, 50, 5, Shape3::new(8, 8, 1)).unwrap();
        let c = synthetic_dataset(4, 50, 5, Shape3::new(8, 8, 1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn balanced_labels() {
        let ds = synthetic_dataset(1, 100, 10, Shape3::new(16, 16, 1)).unwrap();
        for class in 0..10 {
            assert_eq!(ds.labels().iter().filter(|&&l| l == class).count(), 10);
        }
    }

    #[test]
    fn rejects_fewer_examples_than_classes() {
        assert!(synthetic_dataset(1, 3, 10, Shape3::new(16, 16, 1)).is_err());
    }
}
