//! File formats: MPF1 binary fields and PGM previews.
//!
//! MPF1 layout: magic `MPF1`, u32 LE width, u32 LE height, u32 LE channel
//! count, then `channels × width × height` little-endian f32 samples
//! (row-major planes).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fields::Field2D;

const MPF1_MAGIC: &[u8; 4] = b"MPF1";

/// Serializes a stack of same-shape fields as one MPF1 blob.
pub fn mpf1_bytes(channels: &[Field2D]) -> Result<Vec<u8>> {
    let first = channels
        .first()
        .ok_or_else(|| Error::RejectedInput("mpf1 needs at least one channel".into()))?;
    if channels.iter().any(|c| !c.same_shape(first)) {
        return Err(Error::RejectedInput("mpf1 channels must share a shape".into()));
    }
    let (w, h) = (first.width(), first.height());
    let mut out = Vec::with_capacity(16 + 4 * w * h * channels.len());
    out.extend_from_slice(MPF1_MAGIC);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(channels.len() as u32).to_le_bytes());
    for c in channels {
        for v in c.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_mpf1(path: &Path, channels: &[Field2D]) -> Result<()> {
    let bytes = mpf1_bytes(channels)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn read_mpf1(path: &Path) -> Result<Vec<Field2D>> {
    let bytes = fs::read(path)?;
    parse_mpf1(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_mpf1(bytes: &[u8]) -> Result<Vec<Field2D>> {
    if bytes.len() < 16 || &bytes[0..4] != MPF1_MAGIC {
        return Err(Error::Format("missing MPF1 magic".into()));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let (w, h, nc) = (u32_at(4), u32_at(8), u32_at(12));
    let expect = 16 + 4 * w * h * nc;
    if w == 0 || h == 0 || nc == 0 || bytes.len() != expect {
        return Err(Error::Format(format!(
            "bad dimensions {w}x{h}x{nc} for payload of {} bytes",
            bytes.len()
        )));
    }
    let mut channels = Vec::with_capacity(nc);
    let mut off = 16;
    for _ in 0..nc {
        let mut data = Vec::with_capacity(w * h);
        for _ in 0..w * h {
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Format("non-finite sample".into()));
            }
            data.push(v as f64);
            off += 4;
        }
        channels.push(Field2D::new(w, h, data)?);
    }
    Ok(channels)
}

/// 8-bit ASCII PGM (P2) preview, min–max normalized.
pub fn write_pgm(path: &Path, field: &Field2D) -> Result<()> {
    let (lo, hi) = (field.min(), field.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut s = format!("P2\n{} {}\n255\n", field.width(), field.height());
    for y in 0..field.height() {
        let row: Vec<String> = (0..field.width())
            .map(|x| {
                let v = ((field.get(x, y) - lo) / span * 255.0).round() as i64;
                v.clamp(0, 255).to_string()
            })
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mpf1_header_layout() {
        let f = Field2D::new(2, 1, vec![1.0, -2.0]).unwrap();
        let bytes = mpf1_bytes(&[f]).unwrap();
        assert_eq!(&bytes[0..4], b"MPF1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 16 + 8);
    }

    #[test]
    fn mpf1_rejects_truncation_and_bad_magic() {
        let f = Field2D::zeros(2, 2);
        let bytes = mpf1_bytes(&[f]).unwrap();
        assert!(parse_mpf1(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(parse_mpf1(&bad).is_err());
    }

    #[test]
    fn pgm_golden_small_case() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.pgm");
        let f = Field2D::new(2, 2, vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        write_pgm(&path, &f).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "P2\n2 2\n255\n0 255\n128 64\n");
    }

    proptest! {
        #[test]
        fn mpf1_roundtrip_preserves_f32_values(
            w in 1usize..5, h in 1usize..5, nc in 1usize..3, seed in 0u64..500
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let channels: Vec<Field2D> = (0..nc)
                .map(|_| Field2D::from_fn(w, h, |_, _| rng.gen_range(-10.0..10.0)))
                .collect();
            let bytes = mpf1_bytes(&channels).unwrap();
            let back = parse_mpf1(&bytes).unwrap();
            prop_assert_eq!(back.len(), nc);
            for (orig, round) in channels.iter().zip(&back) {
                for (a, b) in orig.data().iter().zip(round.data()) {
                    prop_assert_eq!(*a as f32, *b as f32);
                }
            }
        }
    }
}
