//! Backdoor trigger sets for the three watermark schemes.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};
use crate::nn::Shape3;
use crate::rng::stream_rng;

/// Side length of the stamped glyph patch.
pub const GLYPH_SIZE: usize = 8;
pub const NOISE_STD_DEFAULT: f64 = 0.25;
pub const TRIGGER_COUNT_DEFAULT: usize = 64;

/// Block-letter "T": two full rows on top, a two-pixel stem below.
fn glyph_on(y: usize, x: usize) -> bool {
    y < 2 || (3..5).contains(&x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TriggerScheme {
    EmbeddedContent,
    Noise,
    Unrelated,
}

impl TriggerScheme {
    fn code(self) -> u8 {
        match self {
            TriggerScheme::EmbeddedContent => 0,
            TriggerScheme::Noise => 1,
            TriggerScheme::Unrelated => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => TriggerScheme::EmbeddedContent,
            1 => TriggerScheme::Noise,
            2 => TriggerScheme::Unrelated,
            _ => return None,
        })
    }
}

impl std::fmt::Display for TriggerScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TriggerScheme::EmbeddedContent => "embedded-content",
            TriggerScheme::Noise => "noise",
            TriggerScheme::Unrelated => "unrelated",
        })
    }
}

/// Where the glyph patch is stamped (its top-left pixel).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub top: usize,
    pub left: usize,
}

/// Source images and scheme-specific settings for [`make_trigger_set`].
#[derive(Clone, Copy, Debug)]
pub enum TriggerSource<'a> {
    /// Stamp the glyph patch onto base images.
    EmbeddedContent { base: &'a Dataset, patch: PatchSpec },
    /// Overlay clipped Gaussian noise onto base images.
    Noise { base: &'a Dataset, std: f64 },
    /// Images from another domain, fitted to the model input. Each image is
    /// labelled `(source_label + target_label) mod classes`.
    Unrelated {
        unrelated: &'a Dataset,
        input: Shape3,
        classes: usize,
    },
}

/// Trigger images with their target labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TriggerSet {
    data: Dataset,
    scheme: TriggerScheme,
    source_seed: u64,
}

impl TriggerSet {
    pub fn scheme(&self) -> TriggerScheme {
        self.scheme
    }

    pub fn source_seed(&self) -> u64 {
        self.source_seed
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn images(&self) -> &[f32] {
        self.data.images()
    }

    pub fn target_labels(&self) -> &[usize] {
        self.data.labels()
    }

    pub fn shape(&self) -> Shape3 {
        self.data.shape()
    }

    pub fn classes(&self) -> usize {
        self.data.classes()
    }

    /// The trigger set viewed as an ordinary labelled dataset.
    pub fn as_dataset(&self) -> &Dataset {
        &self.data
    }
}

fn pick(available: usize, count: usize, seed: u64) -> Result<Vec<usize>, DataError> {
    if count == 0 || count > available {
        return Err(DataError::NotEnough {
            requested: count,
            available,
        });
    }
    let mut order: Vec<usize> = (0..available).collect();
    order.shuffle(&mut stream_rng(seed, 0x7219));
    Ok(order)
}

fn stamp(image: &mut [f32], shape: Shape3, patch: PatchSpec) {
    for y in 0..GLYPH_SIZE {
        for x in 0..GLYPH_SIZE {
            let v = if glyph_on(y, x) { 1.0 } else { 0.0 };
            let base = ((patch.top + y) * shape.width + patch.left + x) * shape.channels;
            image[base..base + shape.channels].fill(v);
        }
    }
}

/// Nearest-neighbour resize plus channel adaptation (1 <-> 3) of one image.
fn fit_image(src: &[f32], from: Shape3, to: Shape3) -> Vec<f32> {
    let mut out = vec![0.0f32; to.len()];
    // Scale down when larger; centre with zero padding when smaller.
    let scale = (from.height as f64 / to.height as f64)
        .max(from.width as f64 / to.width as f64)
        .max(1.0);
    let fitted_h = (from.height as f64 / scale).round() as usize;
    let fitted_w = (from.width as f64 / scale).round() as usize;
    let (off_y, off_x) = ((to.height - fitted_h) / 2, (to.width - fitted_w) / 2);
    for y in 0..fitted_h {
        let sy = ((y as f64 + 0.5) * scale) as usize;
        for x in 0..fitted_w {
            let sx = ((x as f64 + 0.5) * scale) as usize;
            let s = &src[(sy.min(from.height - 1) * from.width + sx.min(from.width - 1)) * from.channels..]
                [..from.channels];
            let d = &mut out[((off_y + y) * to.width + off_x + x) * to.channels..][..to.channels];
            if from.channels == to.channels {
                d.copy_from_slice(s);
            } else if from.channels == 1 {
                d.fill(s[0]);
            } else {
                d[0] = s.iter().sum::<f32>() / from.channels as f32;
            }
        }
    }
    out
}

/// Builds `count` trigger images from `source`, seeded.
///
/// Embedded-content and noise triggers all carry `target_label`.
pub fn make_trigger_set(
    source: TriggerSource<'_>,
    target_label: usize,
    count: usize,
    seed: u64,
) -> Result<TriggerSet, DataError> {
    let (scheme, data) = match source {
        TriggerSource::EmbeddedContent { base, patch } => {
            let shape = base.shape();
            if patch.top + GLYPH_SIZE > shape.height || patch.left + GLYPH_SIZE > shape.width {
                return Err(DataError::Incompatible {
                    from: Shape3::new(GLYPH_SIZE, GLYPH_SIZE, shape.channels),
                    to: shape,
                });
            }
            check_target(target_label, base.classes())?;
            let order = pick(base.len(), count, seed)?;
            let mut images = Vec::with_capacity(count * shape.len());
            let mut taken = 0;
            for &i in &order {
                let mut img = base.image(i).to_vec();
                stamp(&mut img, shape, patch);
                // An image that already shows the patch would not differ from its base.
                if img.as_slice() == base.image(i) {
                    continue;
                }
                images.extend_from_slice(&img);
                taken += 1;
                if taken == count {
                    break;
                }
            }
            if taken < count {
                return Err(DataError::NotEnough {
                    requested: count,
                    available: taken,
                });
            }
            (
                TriggerScheme::EmbeddedContent,
                Dataset::new(images, vec![target_label; count], shape, base.classes())?,
            )
        }
        TriggerSource::Noise { base, std } => {
            if !(std >= 0.0 && std.is_finite()) {
                return Err(DataError::Invalid(format!("noise std {std} must be >= 0")));
            }
            check_target(target_label, base.classes())?;
            let order = pick(base.len(), count, seed)?;
            let normal = Normal::new(0.0f64, std).unwrap();
            let mut rng = stream_rng(seed, 0x0015E);
            let mut images = Vec::with_capacity(count * base.shape().len());
            for &i in &order[..count] {
                images.extend(base.image(i).iter().map(|&p| {
                    if std == 0.0 {
                        p
                    } else {
                        (f64::from(p) + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32
                    }
                }));
            }
            (
                TriggerScheme::Noise,
                Dataset::new(images, vec![target_label; count], base.shape(), base.classes())?,
            )
        }
        TriggerSource::Unrelated {
            unrelated,
            input,
            classes,
        } => {
            check_target(target_label, classes)?;
            let from = unrelated.shape();
            let channels_ok = from.channels == input.channels
                || from.channels == 1
                || input.channels == 1;
            if !channels_ok || input.height < 2 || input.width < 2 {
                return Err(DataError::Incompatible { from, to: input });
            }
            let order = pick(unrelated.len(), count, seed)?;
            let mut images = Vec::with_capacity(count * input.len());
            let mut labels = Vec::with_capacity(count);
            for &i in &order[..count] {
                images.extend(fit_image(unrelated.image(i), from, input));
                labels.push((unrelated.labels()[i] + target_label) % classes);
            }
            (
                TriggerScheme::Unrelated,
                Dataset::new(images, labels, input, classes)?,
            )
        }
    };
    Ok(TriggerSet {
        data,
        scheme,
        source_seed: seed,
    })
}

fn check_target(label: usize, classes: usize) -> Result<(), DataError> {
    if label >= classes {
        return Err(DataError::BadTarget { label, classes });
    }
    Ok(())
}

const TRIGGER_MAGIC: &[u8; 5] = b"CMTS1";

/// Binary layout: `CMTS1`, scheme code (u8), source seed (u64), count,
/// height, width, channels, classes (u32 each), `count` labels (u32), then
/// the pixels as `f32`. All integers and floats little-endian.
pub fn encode_trigger_set(set: &TriggerSet) -> Vec<u8> {
    let shape = set.shape();
    let mut out = Vec::with_capacity(34 + 4 * (set.len() + set.images().len()));
    out.extend_from_slice(TRIGGER_MAGIC);
    out.push(set.scheme.code());
    out.extend_from_slice(&set.source_seed.to_le_bytes());
    for v in [set.len(), shape.height, shape.width, shape.channels, set.classes()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &l in set.target_labels() {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for &p in set.images() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_trigger_set(bytes: &[u8]) -> Result<TriggerSet, DataError> {
    let fail = |m: &str| DataError::Format(m.to_string());
    if bytes.len() < 34 || &bytes[..5] != TRIGGER_MAGIC {
        return Err(fail("missing CMTS1 header"));
    }
    let scheme = TriggerScheme::from_code(bytes[5]).ok_or_else(|| fail("unknown scheme code"))?;
    let seed = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
    let u = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (count, h, w, c, classes) = (u(14), u(18), u(22), u(26), u(30));
    let shape = Shape3::new(h, w, c);
    let needed = 34 + 4 * count + 4 * count * shape.len();
    if bytes.len() != needed {
        return Err(fail(&format!("expected {needed} bytes, found {}", bytes.len())));
    }
    let labels = (0..count).map(|i| u(34 + 4 * i)).collect();
    let images = bytes[34 + 4 * count..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(TriggerSet {
        data: Dataset::new(images, labels, shape, classes)?,
        scheme,
        source_seed: seed,
    })
}

pub fn save_trigger_set(path: &Path, set: &TriggerSet) -> Result<(), DataError> {
    fs::write(path, encode_trigger_set(set)).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_trigger_set(path: &Path) -> Result<TriggerSet, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_trigger_set(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;

    fn zeros(n: usize, shape: Shape3, classes: usize) -> Dataset {
        Dataset::new(vec![0.0; n * shape.len()], (0..n).map(|i| i % classes).collect(), shape, classes)
            .unwrap()
    }

    #[test]
    fn glyph_is_nonzero_exactly_on_the_patch() {
        let shape = Shape3::new(12, 12, 1);
        let base = zeros(4, shape, 10);
        let set = make_trigger_set(
            TriggerSource::EmbeddedContent {
                base: &base,
                patch: PatchSpec::default(),
            },
            3,
            4,
            1,
        )
        .unwrap();
        assert_eq!(set.target_labels(), &[3; 4]);
        for i in 0..4 {
            let img = set.as_dataset().image(i);
            for y in 0..12 {
                for x in 0..12 {
                    let inside = y < GLYPH_SIZE && x < GLYPH_SIZE && glyph_on(y, x);
                    assert_eq!(img[y * 12 + x] != 0.0, inside, "pixel ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn zero_noise_keeps_base_images() {
        let base = synthetic_dataset(1, 20, 4, Shape3::new(8, 8, 1)).unwrap();
        let set = make_trigger_set(TriggerSource::Noise { base: &base, std: 0.0 }, 2, 20, 5).unwrap();
        assert!(set.target_labels().iter().all(|&l| l == 2));
        let mut ours: Vec<Vec<u32>> = (0..20)
            .map(|i| set.as_dataset().image(i).iter().map(|p| p.to_bits()).collect())
            .collect();
        let mut theirs: Vec<Vec<u32>> = (0..20)
            .map(|i| base.image(i).iter().map(|p| p.to_bits()).collect())
            .collect();
        ours.sort();
        theirs.sort();
        assert_eq!(ours, theirs);
    }

    #[test]
    fn noise_overlay_stays_in_unit_range() {
        let base = synthetic_dataset(1, 30, 3, Shape3::new(8, 8, 1)).unwrap();
        let set = make_trigger_set(TriggerSource::Noise { base: &base, std: 0.8 }, 0, 30, 5).unwrap();
        assert!(set.images().iter().all(|p| (0.0..=1.0).contains(p)));
        assert_ne!(set.images(), base.select(&(0..30).collect::<Vec<_>>()).images());
    }

    #[test]
    fn too_many_triggers_is_rejected() {
        let base = zeros(3, Shape3::new(8, 8, 1), 2);
        let err = make_trigger_set(
            TriggerSource::Noise { base: &base, std: 0.1 },
            0,
            4,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, DataError::NotEnough { requested: 4, available: 3 }));
    }

    #[test]
    fn bad_target_is_rejected() {
        let base = zeros(3, Shape3::new(8, 8, 1), 2);
        assert!(matches!(
            make_trigger_set(TriggerSource::Noise { base: &base, std: 0.1 }, 2, 1, 1),
            Err(DataError::BadTarget { .. })
        ));
    }

    #[test]
    fn unrelated_images_are_padded_or_shrunk() {
        let small = Dataset::new(vec![1.0; 2 * 16], vec![0, 1], Shape3::new(4, 4, 1), 2).unwrap();
        let set = make_trigger_set(
            TriggerSource::Unrelated {
                unrelated: &small,
                input: Shape3::new(8, 8, 3),
                classes: 10,
            },
            5,
            2,
            3,
        )
        .unwrap();
        assert_eq!(set.shape(), Shape3::new(8, 8, 3));
        // 4x4 content centred in 8x8, replicated over 3 channels.
        let lit = set.as_dataset().image(0).iter().filter(|&&p| p == 1.0).count();
        assert_eq!(lit, 16 * 3);
        let mut labels = set.target_labels().to_vec();
        labels.sort();
        assert_eq!(labels, vec![5, 6]);

        let large = Dataset::new(vec![0.5; 32 * 32 * 3], vec![0], Shape3::new(32, 32, 3), 2).unwrap();
        let set = make_trigger_set(
            TriggerSource::Unrelated {
                unrelated: &large,
                input: Shape3::new(16, 16, 1),
                classes: 2,
            },
            0,
            1,
            3,
        )
        .unwrap();
        assert!(set.images().iter().all(|&p| (p - 0.5).abs() < 1e-6));
    }

    #[test]
    fn unrelated_channel_mismatch_is_rejected() {
        let two = Dataset::new(vec![0.0; 2 * 16], vec![0], Shape3::new(4, 4, 2), 2).unwrap();
        let err = make_trigger_set(
            TriggerSource::Unrelated {
                unrelated: &two,
                input: Shape3::new(8, 8, 3),
                classes: 2,
            },
            0,
            1,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, DataError::Incompatible { .. }));
    }

    #[test]
    fn binary_round_trip() {
        let base = synthetic_dataset(1, 20, 4, Shape3::new(9, 9, 2)).unwrap();
        let set = make_trigger_set(
            TriggerSource::EmbeddedContent {
                base: &base,
                patch: PatchSpec { top: 1, left: 1 },
            },
            1,
            7,
            11,
        )
        .unwrap();
        let back = decode_trigger_set(&encode_trigger_set(&set)).unwrap();
        assert_eq!(back, set);
        assert!(decode_trigger_set(&encode_trigger_set(&set)[..40]).is_err());
    }
}
