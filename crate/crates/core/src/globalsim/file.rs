//! `GEM1` embedding files and `PRJ1` projection files.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{GlobalEmbedding, GlobalError, Projection, Result, BASE_DIM, EMBED_DIM};
use crate::binio::*;

const EMBED_MAGIC: [u8; 4] = *b"GEM1";
const PROJ_MAGIC: [u8; 4] = *b"PRJ1";
const VERSION: u32 = 1;
/// Rows whose stored norm deviates more than this are reported on load.
const NORM_TOLERANCE: f64 = 1e-3;

pub fn write_embeddings(w: &mut impl Write, embeddings: &[GlobalEmbedding]) -> Result<()> {
    w.write_all(&EMBED_MAGIC)?;
    write_u32(w, VERSION)?;
    write_u64(w, embeddings.len() as u64)?;
    write_u16(w, EMBED_DIM as u16)?;
    for e in embeddings {
        write_str(w, &e.image_id)?;
    }
    for e in embeddings {
        for &v in e.vector() {
            write_f32(w, v)?;
        }
    }
    Ok(())
}

pub fn read_embeddings(r: &mut impl Read) -> Result<Vec<GlobalEmbedding>> {
    let magic: [u8; 4] = read_array(r)?;
    if magic != EMBED_MAGIC {
        return Err(GlobalError::BadMagic(magic));
    }
    check_version(read_u32(r)?)?;
    let count = usize::try_from(read_u64(r)?)
        .map_err(|_| GlobalError::Malformed("count exceeds address space".into()))?;
    let dim = read_u16(r)? as usize;
    if dim != EMBED_DIM {
        return Err(GlobalError::DimensionMismatch {
            expected: EMBED_DIM,
            found: dim,
        });
    }
    let mut ids = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        ids.push(read_str(r)?);
    }
    let values = read_bytes(r, count.saturating_mul(EMBED_DIM * 4))?;
    let mut out = Vec::with_capacity(count);
    let mut off_norm = 0usize;
    for (id, row) in ids.into_iter().zip(values.chunks_exact(EMBED_DIM * 4)) {
        let v: Vec<f32> = row
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let norm = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            off_norm += 1;
            out.push(GlobalEmbedding::new(id, &v)?);
        } else {
            out.push(GlobalEmbedding { image_id: id, vector: v });
        }
    }
    if off_norm > 0 {
        log::warn!("{off_norm} embedding rows were not unit length and have been renormalized");
    }
    Ok(out)
}

pub fn save_embeddings(embeddings: &[GlobalEmbedding], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_embeddings(&mut w, embeddings)?;
    w.flush()?;
    Ok(())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<GlobalEmbedding>> {
    read_embeddings(&mut BufReader::new(std::fs::File::open(path)?))
}

/// Layout: magic, version, rows u32, cols u32, trained u8, row-major f64.
pub fn write_projection(w: &mut impl Write, p: &Projection) -> Result<()> {
    w.write_all(&PROJ_MAGIC)?;
    write_u32(w, VERSION)?;
    write_u32(w, BASE_DIM as u32)?;
    write_u32(w, EMBED_DIM as u32)?;
    write_u8(w, u8::from(p.is_trained()))?;
    let bytes: Vec<u8> = p.matrix().iter().flat_map(|x| x.to_le_bytes()).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_projection(r: &mut impl Read) -> Result<Projection> {
    let magic: [u8; 4] = read_array(r)?;
    if magic != PROJ_MAGIC {
        return Err(GlobalError::BadMagic(magic));
    }
    check_version(read_u32(r)?)?;
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    if (rows, cols) != (BASE_DIM, EMBED_DIM) {
        return Err(GlobalError::DimensionMismatch {
            expected: BASE_DIM * EMBED_DIM,
            found: rows * cols,
        });
    }
    let trained = read_u8(r)? != 0;
    let matrix = read_bytes(r, rows * cols * 8)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Projection::from_matrix(matrix, trained)
}

pub fn save_projection(p: &Projection, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_projection(&mut w, p)?;
    w.flush()?;
    Ok(())
}

pub fn load_projection(path: impl AsRef<Path>) -> Result<Projection> {
    read_projection(&mut BufReader::new(std::fs::File::open(path)?))
}

fn check_version(found: u32) -> Result<()> {
    if found != VERSION {
        return Err(GlobalError::VersionMismatch {
            found,
            expected: VERSION,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_round_trip_is_bit_identical() {
        let embs: Vec<_> = (0..5)
            .map(|i| {
                let v: Vec<f32> = (0..EMBED_DIM).map(|j| ((i * 31 + j) % 17) as f32 - 8.0).collect();
                GlobalEmbedding::new(format!("id{i}"), &v).unwrap()
            })
            .collect();
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &embs).unwrap();
        let back = read_embeddings(&mut buf.as_slice()).unwrap();
        assert_eq!(back, embs);
        buf[0] = b'X';
        assert!(matches!(read_embeddings(&mut buf.as_slice()), Err(GlobalError::BadMagic(_))));
    }

    #[test]
    fn unnormalized_rows_are_renormalized() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"GEM1");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1u64.to_le_bytes());
        buf.extend_from_slice(&256u16.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.push(b'a');
        for j in 0..EMBED_DIM {
            buf.extend_from_slice(&(if j == 0 { 2.0f32 } else { 0.0 }).to_le_bytes());
        }
        let back = read_embeddings(&mut buf.as_slice()).unwrap();
        assert_eq!(back[0].vector()[0], 1.0);
    }

    #[test]
    fn projection_round_trip() {
        let mut p = Projection::identity();
        p.matrix_mut()[5] = -0.25;
        p.set_trained();
        let mut buf = Vec::new();
        write_projection(&mut buf, &p).unwrap();
        assert_eq!(read_projection(&mut buf.as_slice()).unwrap(), p);
    }
}
