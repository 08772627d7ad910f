//! IDX files: the big-endian `ubyte` tensor format of the MNIST distribution.
//!
//! Images are `0x00000803` (N × H × W, one channel) or `0x00000804`
//! (N × H × W × C); labels are `0x00000801` (N). Pixels are stored as bytes
//! and read back as `byte / 255`.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};
use ecacl_core::augment::Image;
use ecacl_core::data::{Domain, DomainDataset};

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const COLOR_IMAGES_MAGIC: u32 = 0x0000_0804;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn take<'a>(bytes: &'a [u8], at: usize, n: usize, what: &str) -> Result<&'a [u8]> {
    bytes.get(at..at.saturating_add(n)).ok_or_else(|| Error::Length {
        what: what.into(),
        needed: (at as u64).saturating_add(n as u64),
        available: bytes.len() as u64,
    })
}

/// Magic number and dimension sizes.
fn header(bytes: &[u8], expected: &[u32], what: &str) -> Result<(u32, Vec<usize>)> {
    let magic_bytes = take(bytes, 0, 4, what)?;
    let magic = BigEndian::read_u32(magic_bytes);
    if !expected.contains(&magic) {
        return Err(Error::Format(format!(
            "{what}: unexpected magic number {magic_bytes:02x?}"
        )));
    }
    let rank = (magic & 0xff) as usize;
    let dims = take(bytes, 4, 4 * rank, what)?
        .chunks(4)
        .map(|c| BigEndian::read_u32(c) as usize)
        .collect();
    Ok((magic, dims))
}

fn payload<'a>(bytes: &'a [u8], dims: &[usize], what: &str) -> Result<&'a [u8]> {
    let start = 4 + 4 * dims.len();
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("{what}: dimensions {dims:?} overflow")))?;
    let data = take(bytes, start, n, what)?;
    if bytes.len() != start + n {
        return Err(Error::Format(format!(
            "{what}: {} trailing bytes after the payload",
            bytes.len() - start - n
        )));
    }
    Ok(data)
}

/// Decodes an image file.
pub fn parse_images(bytes: &[u8]) -> Result<Vec<Image>> {
    let (_, dims) = header(bytes, &[IMAGES_MAGIC, COLOR_IMAGES_MAGIC], "images")?;
    let data = payload(bytes, &dims, "images")?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let c = dims.get(3).copied().unwrap_or(1);
    if n > 0 && (h == 0 || w == 0 || !(c == 1 || c == 3)) {
        return Err(Error::Format(format!("images: unsupported geometry {dims:?}")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    data.chunks(h * w * c)
        .map(|px| Ok(Image::new(h, w, c, px.iter().map(|&b| f64::from(b) / 255.0).collect())?))
        .collect()
}

/// Decodes a label file.
pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (_, dims) = header(bytes, &[LABELS_MAGIC], "labels")?;
    Ok(payload(bytes, &dims, "labels")?.iter().map(|&b| b as usize).collect())
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn dim(n: usize, what: &str) -> Result<[u8; 4]> {
    let n = u32::try_from(n).map_err(|_| Error::Format(format!("{what}: dimension {n} exceeds u32")))?;
    Ok(n.to_be_bytes())
}

/// Encodes images; all must share one geometry.
pub fn encode_images(images: &[Image]) -> Result<Vec<u8>> {
    let (h, w, c) = images
        .first()
        .map_or((0, 0, 1), |im| (im.height(), im.width(), im.channels()));
    if images
        .iter()
        .any(|im| (im.height(), im.width(), im.channels()) != (h, w, c))
    {
        return Err(Error::Format("images of mixed geometry".into()));
    }
    let magic = if c == 1 { IMAGES_MAGIC } else { COLOR_IMAGES_MAGIC };
    let mut out = magic.to_be_bytes().to_vec();
    out.extend(dim(images.len(), "images")?);
    out.extend(dim(h, "images")?);
    out.extend(dim(w, "images")?);
    if c != 1 {
        out.extend(dim(c, "images")?);
    }
    for im in images {
        out.extend(im.pixels().iter().map(|&p| to_byte(p)));
    }
    Ok(out)
}

pub fn encode_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = LABELS_MAGIC.to_be_bytes().to_vec();
    out.extend(dim(labels.len(), "labels")?);
    for &y in labels {
        out.push(u8::try_from(y).map_err(|_| Error::Format(format!("label {y} does not fit a byte")))?);
    }
    Ok(out)
}

/// Loads an image/label pair. The class count defaults to `max label + 1`.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    num_classes: Option<usize>,
    domain: Domain,
) -> Result<DomainDataset> {
    let images = parse_images(&fs::read(images_path).map_err(|e| Error::io(images_path, e))?)?;
    let labels = parse_labels(&fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?)?;
    if images.len() != labels.len() {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let c = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Ok(DomainDataset::new(images, labels, c, domain)?)
}

pub fn write_idx(dataset: &DomainDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let images = encode_images(dataset.images())?;
    let labels = encode_labels(dataset.labels())?;
    fs::write(images_path, images).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, labels).map_err(|e| Error::io(labels_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hand_built() -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 4, 0, 0, 0, 4];
        img.extend(0u8..32);
        let lbl = vec![0, 0, 8, 1, 0, 0, 0, 2, 1, 0];
        (img, lbl)
    }

    #[test]
    fn pixel_is_byte_over_255() {
        let (img, lbl) = hand_built();
        let images = parse_images(&img).unwrap();
        assert_eq!(images.len(), 2);
        // image 0, row 1, column 2 → byte 6
        assert_eq!(images[0].get(1, 2, 0), 6.0 / 255.0);
        assert_eq!(images[1].get(0, 0, 0), 16.0 / 255.0);
        assert_eq!(parse_labels(&lbl).unwrap(), vec![1, 0]);
    }

    #[test]
    fn image_magic_on_labels_is_rejected() {
        let (img, _) = hand_built();
        match parse_labels(&img) {
            Err(Error::Format(msg)) => assert!(msg.contains("08, 03"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_a_length_error() {
        let (img, lbl) = hand_built();
        assert!(matches!(parse_images(&img[..img.len() - 1]), Err(Error::Length { .. })));
        assert!(matches!(parse_labels(&lbl[..9]), Err(Error::Length { .. })));
        assert!(matches!(parse_labels(&lbl[..2]), Err(Error::Length { .. })));
    }

    #[test]
    fn color_images_round_trip() {
        let im = Image::new(2, 2, 3, (0..12).map(|v| v as f64 / 255.0).collect()).unwrap();
        let bytes = encode_images(&[im.clone()]).unwrap();
        assert_eq!(&bytes[..4], &[0, 0, 8, 4]);
        assert_eq!(parse_images(&bytes).unwrap(), vec![im]);
    }

    proptest! {
        #[test]
        fn round_trip_is_byte_identical(
            n in 1usize..5, h in 1usize..6, w in 1usize..6,
            seed in proptest::collection::vec(any::<u8>(), 150),
        ) {
            let mut img = IMAGES_MAGIC.to_be_bytes().to_vec();
            for d in [n, h, w] {
                img.extend((d as u32).to_be_bytes());
            }
            img.extend(seed.iter().cycle().take(n * h * w));
            let parsed = parse_images(&img).unwrap();
            prop_assert_eq!(encode_images(&parsed).unwrap(), img);

            let mut lbl = LABELS_MAGIC.to_be_bytes().to_vec();
            lbl.extend((n as u32).to_be_bytes());
            lbl.extend(seed.iter().take(n));
            prop_assert_eq!(encode_labels(&parse_labels(&lbl).unwrap()).unwrap(), lbl);
        }
    }
}
