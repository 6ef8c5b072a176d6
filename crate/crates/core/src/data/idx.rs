//! IDX reader/writer for uint8 image and label files (the MNIST layout).

use std::fs;
use std::path::Path;

use super::{DataError, Dataset};
use crate::nn::Shape3;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Checks the magic and returns the dimension sizes and the payload.
fn parse<'a>(
    path: &Path,
    bytes: &'a [u8],
    magic: u32,
    dims: usize,
) -> Result<(Vec<usize>, &'a [u8]), DataError> {
    let name = path.display().to_string();
    let header = 4 + 4 * dims;
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            path: name,
            needed: 4,
            found: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(DataError::BadMagic {
            path: name,
            found,
            expected: magic,
        });
    }
    if bytes.len() < header {
        return Err(DataError::Truncated {
            path: name,
            needed: header,
            found: bytes.len(),
        });
    }
    let sizes: Vec<usize> = (0..dims).map(|d| be_u32(bytes, 4 + 4 * d) as usize).collect();
    let needed = header + sizes.iter().product::<usize>();
    if bytes.len() < needed {
        return Err(DataError::Truncated {
            path: name,
            needed,
            found: bytes.len(),
        });
    }
    Ok((sizes, &bytes[header..needed]))
}

/// Reads an IDX image file (magic 0x803, dims N x rows x cols) and its label
/// file (magic 0x801, dim N). Pixels are rescaled from bytes to [0, 1]; the
/// class count is one more than the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let image_bytes = read(images_path)?;
    let label_bytes = read(labels_path)?;
    let (dims, pixels) = parse(images_path, &image_bytes, IDX_IMAGES_MAGIC, 3)?;
    let (label_dims, raw_labels) = parse(labels_path, &label_bytes, IDX_LABELS_MAGIC, 1)?;
    if dims[0] != label_dims[0] {
        return Err(DataError::CountMismatch {
            images: dims[0],
            labels: label_dims[0],
        });
    }
    let shape = Shape3::new(dims[1], dims[2], 1);
    let labels: Vec<usize> = raw_labels.iter().map(|&l| usize::from(l)).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let images = pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
    Dataset::new(images, labels, shape, classes)
}

/// Writes a single-channel dataset as an IDX image/label pair, quantizing
/// pixels to bytes.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<(), DataError> {
    let shape = dataset.shape();
    if shape.channels != 1 {
        return Err(DataError::Invalid(
            "IDX export supports single-channel images only".into(),
        ));
    }
    if dataset.classes() > 256 {
        return Err(DataError::Invalid("labels do not fit in a byte".into()));
    }
    let n = dataset.len() as u32;
    let mut img = Vec::with_capacity(16 + dataset.images().len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&n.to_be_bytes());
    img.extend_from_slice(&(shape.height as u32).to_be_bytes());
    img.extend_from_slice(&(shape.width as u32).to_be_bytes());
    img.extend(dataset.images().iter().map(|&p| (p * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + dataset.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend(dataset.labels().iter().map(|&l| l as u8));
    let write = |path: &Path, bytes: &[u8]| {
        fs::write(path, bytes).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    };
    write(images_path, &img)?;
    write(labels_path, &lab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut out = magic.to_be_bytes().to_vec();
        for d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out
    }

    fn pair(dir: &Path, images: &[u8], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("img");
        let lp = dir.join("lab");
        fs::write(&ip, images).unwrap();
        fs::write(&lp, labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn reads_hand_written_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(0x803, &[3, 2, 2]);
        img.extend_from_slice(&[0, 255, 51, 102, 1, 2, 3, 4, 255, 255, 0, 0]);
        let mut lab = header(0x801, &[3]);
        lab.extend_from_slice(&[7, 0, 3]);
        let (ip, lp) = pair(dir.path(), &img, &lab);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.shape(), Shape3::new(2, 2, 1));
        assert_eq!(ds.labels(), &[7, 0, 3]);
        assert_eq!(ds.classes(), 8);
        assert_eq!(ds.image(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.image(2)[0], 1.0);
    }

    #[test]
    fn label_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(0x803, &[2, 1, 1]);
        img.extend_from_slice(&[1, 2]);
        let mut lab = header(0x801, &[3]);
        lab.extend_from_slice(&[0, 1, 1]);
        let (ip, lp) = pair(dir.path(), &img, &lab);
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(DataError::CountMismatch { images: 2, labels: 3 })
        ));
    }

    #[test]
    fn label_magic_in_image_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(0x801, &[1, 1, 1]);
        img.push(0);
        let mut lab = header(0x801, &[1]);
        lab.push(0);
        let (ip, lp) = pair(dir.path(), &img, &lab);
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(DataError::BadMagic { found: 0x801, expected: 0x803, .. })
        ));
    }

    #[test]
    fn truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(0x803, &[2, 2, 2]);
        img.extend_from_slice(&[0; 7]);
        let mut lab = header(0x801, &[2]);
        lab.extend_from_slice(&[0, 1]);
        let (ip, lp) = pair(dir.path(), &img, &lab);
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(matches!(err, DataError::Truncated { needed: 24, found: 23, .. }));
        let (ip, lp) = pair(dir.path(), &img[..6], &lab);
        assert!(matches!(load_idx(&ip, &lp), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_idx(&dir.path().join("nope"), &dir.path().join("nada")).unwrap_err();
        assert!(matches!(err, DataError::Io { .. }));
    }
}
