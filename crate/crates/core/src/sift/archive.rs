//! `SFT1` feature-set records. A feature archive is a plain concatenation of
//! records, read until end of file.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FeatureSet, Keypoint, SiftDescriptor, SiftError, DESCRIPTOR_LEN};
use crate::binio::*;

const MAGIC: [u8; 4] = *b"SFT1";

pub fn write_feature_set(w: &mut impl Write, fs: &FeatureSet) -> Result<(), SiftError> {
    if fs.keypoints.len() != fs.descriptors.len() {
        return Err(SiftError::Malformed(format!(
            "{} keypoints vs {} descriptors",
            fs.keypoints.len(),
            fs.descriptors.len()
        )));
    }
    w.write_all(&MAGIC)?;
    write_str(w, &fs.image_id)?;
    write_u32(w, fs.keypoints.len() as u32)?;
    for (kp, d) in fs.keypoints.iter().zip(&fs.descriptors) {
        for v in [kp.x, kp.y, kp.scale, kp.orientation, kp.response] {
            write_f32(w, v)?;
        }
        w.write_all(&d.0)?;
    }
    Ok(())
}

/// Reads one record; `Ok(None)` at a clean end of stream.
pub fn read_feature_set(r: &mut impl Read) -> Result<Option<FeatureSet>, SiftError> {
    let mut magic = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut magic[filled..])? {
            0 if filled == 0 => return Ok(None),
            0 => return Err(SiftError::Malformed("truncated magic".into())),
            n => filled += n,
        }
    }
    if magic != MAGIC {
        return Err(SiftError::BadMagic(magic));
    }
    let truncated = |e: io::Error| SiftError::Malformed(e.to_string());
    let image_id = read_str(r).map_err(truncated)?;
    let count = read_u32(r).map_err(truncated)? as usize;
    let mut keypoints = Vec::with_capacity(count.min(1 << 16));
    let mut descriptors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let mut vals = [0f32; 5];
        for v in &mut vals {
            *v = read_f32(r).map_err(truncated)?;
        }
        keypoints.push(Keypoint::new(vals[0], vals[1], vals[2], vals[3], vals[4]));
        descriptors.push(SiftDescriptor(
            read_array::<DESCRIPTOR_LEN>(r).map_err(truncated)?,
        ));
    }
    Ok(Some(FeatureSet {
        image_id,
        keypoints,
        descriptors,
    }))
}

pub fn write_archive<'a>(
    path: impl AsRef<Path>,
    sets: impl IntoIterator<Item = &'a FeatureSet>,
) -> Result<(), SiftError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for fs in sets {
        write_feature_set(&mut w, fs)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<Vec<FeatureSet>, SiftError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    while let Some(fs) = read_feature_set(&mut r)? {
        out.push(fs);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, n: usize) -> FeatureSet {
        FeatureSet {
            image_id: id.into(),
            keypoints: (0..n)
                .map(|i| Keypoint::new(i as f32, 2.0 * i as f32, 1.6, 0.5, 0.02))
                .collect(),
            descriptors: (0..n).map(|i| SiftDescriptor([i as u8; 128])).collect(),
        }
    }

    #[test]
    fn record_layout_is_exact() {
        let mut buf = Vec::new();
        write_feature_set(&mut buf, &sample("ab", 1)).unwrap();
        assert_eq!(&buf[..4], b"SFT1");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..10], b"ab");
        assert_eq!(&buf[10..14], &1u32.to_le_bytes());
        assert_eq!(buf.len(), 14 + 5 * 4 + 128);
    }

    #[test]
    fn archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.sft");
        let sets = vec![sample("a", 3), sample("", 0), sample("ü", 2)];
        write_archive(&path, &sets).unwrap();
        assert_eq!(read_archive(&path).unwrap(), sets);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut buf = Vec::new();
        write_feature_set(&mut buf, &sample("a", 2)).unwrap();
        let mut wrong = buf.clone();
        wrong[0] = b'X';
        assert!(matches!(
            read_feature_set(&mut wrong.as_slice()),
            Err(SiftError::BadMagic(_))
        ));
        let cut = &buf[..buf.len() - 10];
        assert!(matches!(
            read_feature_set(&mut &cut[..]),
            Err(SiftError::Malformed(_))
        ));
    }
}
