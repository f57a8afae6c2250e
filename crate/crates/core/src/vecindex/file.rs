//! `LDX1` index files.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use half::f16;

use super::{DescriptorIndex, Dtype, IndexError, Owner, Partitions, Result, Storage, DIM};
use crate::binio::*;

const MAGIC: [u8; 4] = *b"LDX1";
const VERSION: u32 = 1;

pub fn save(index: &DescriptorIndex, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_index(&mut w, index)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<DescriptorIndex> {
    read_index(&mut BufReader::new(std::fs::File::open(path)?))
}

pub(crate) fn write_index(w: &mut impl Write, index: &DescriptorIndex) -> Result<()> {
    w.write_all(&MAGIC)?;
    write_u32(w, VERSION)?;
    write_u8(w, index.dtype().code())?;
    write_u16(w, DIM as u16)?;
    write_u64(w, index.len() as u64)?;
    write_u32(w, index.image_ids().len() as u32)?;
    for id in index.image_ids() {
        write_str(w, id)?;
    }
    for o in index.owners() {
        write_u32(w, o.image)?;
        write_u32(w, o.keypoint)?;
    }
    match index.storage() {
        Storage::U8(v) => w.write_all(v)?,
        Storage::F16(v) => {
            let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_bits().to_le_bytes()).collect();
            w.write_all(&bytes)?;
        }
        Storage::F32(v) => {
            let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
            w.write_all(&bytes)?;
        }
    }
    match index.partitions() {
        None => write_u32(w, 0)?,
        Some(p) => {
            write_u32(w, p.nlist() as u32)?;
            for &c in &p.centroids {
                write_f32(w, c)?;
            }
            for &o in &p.offsets {
                write_u64(w, o)?;
            }
            for &e in &p.entries {
                write_u64(w, e)?;
            }
        }
    }
    Ok(())
}

pub(crate) fn read_index(r: &mut impl Read) -> Result<DescriptorIndex> {
    let magic: [u8; 4] = read_array(r)?;
    if magic != MAGIC {
        return Err(IndexError::BadMagic(magic));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(IndexError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let code = read_u8(r)?;
    let dtype = Dtype::from_code(code)
        .ok_or_else(|| IndexError::Malformed(format!("unknown dtype code {code}")))?;
    let dim = read_u16(r)? as usize;
    if dim != DIM {
        return Err(IndexError::DimensionMismatch {
            expected: DIM,
            found: dim,
        });
    }
    let count = usize::try_from(read_u64(r)?)
        .map_err(|_| IndexError::Malformed("count exceeds address space".into()))?;
    let n_ids = read_u32(r)? as usize;
    let mut ids = Vec::with_capacity(n_ids.min(1 << 16));
    for _ in 0..n_ids {
        ids.push(read_str(r)?);
    }
    let owner_bytes = read_bytes(r, count.saturating_mul(8))?;
    let owners = owner_bytes
        .chunks_exact(8)
        .map(|c| Owner {
            image: u32::from_le_bytes(c[..4].try_into().unwrap()),
            keypoint: u32::from_le_bytes(c[4..].try_into().unwrap()),
        })
        .collect();
    let values = count.saturating_mul(DIM);
    let storage = match dtype {
        Dtype::U8 => Storage::U8(read_bytes(r, values)?),
        Dtype::F16 => Storage::F16(
            read_bytes(r, values.saturating_mul(2))?
                .chunks_exact(2)
                .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])))
                .collect(),
        ),
        Dtype::F32 => Storage::F32(
            read_bytes(r, values.saturating_mul(4))?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    let nlist = read_u32(r)? as usize;
    let partitions = if nlist == 0 {
        None
    } else {
        let centroids = read_bytes(r, nlist.saturating_mul(DIM * 4))?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let offsets = read_u64s(r, nlist + 1)?;
        let entries = read_u64s(r, count)?;
        Some(Partitions {
            centroids,
            offsets,
            entries,
        })
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(IndexError::Malformed("trailing bytes after index".into()));
    }
    DescriptorIndex::from_parts(ids, owners, storage, partitions)
}

fn read_u64s(r: &mut impl Read, n: usize) -> Result<Vec<u64>> {
    Ok(read_bytes(r, n.saturating_mul(8))?
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::super::tests::random_sets;
    use super::super::{build_flat, build_partitioned, PartitionParams};
    use super::*;

    fn round_trip(idx: &DescriptorIndex) -> DescriptorIndex {
        let mut buf = Vec::new();
        write_index(&mut buf, idx).unwrap();
        read_index(&mut buf.as_slice()).unwrap()
    }

    #[test]
    fn flat_round_trip_is_identical() {
        let sets = random_sets(20, 3, 2);
        for dtype in [Dtype::U8, Dtype::F16, Dtype::F32] {
            let idx = build_flat(&sets, dtype).unwrap();
            let back = round_trip(&idx);
            assert_eq!(back, idx);
            let q = &sets[1].descriptors;
            assert_eq!(back.search(q, 2, 1).unwrap(), idx.search(q, 2, 1).unwrap());
        }
    }

    #[test]
    fn partitioned_round_trip_keeps_lists() {
        let sets = random_sets(21, 6, 20);
        let idx = build_partitioned(&sets, Dtype::U8, &PartitionParams::default()).unwrap();
        let back = round_trip(&idx);
        assert_eq!(back.inverted_lists(), idx.inverted_lists());
        assert_eq!(back, idx);
    }

    #[test]
    fn header_checks() {
        let idx = build_flat(&random_sets(22, 1, 2), Dtype::U8).unwrap();
        let mut buf = Vec::new();
        write_index(&mut buf, &idx).unwrap();

        let mut bad = buf.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_index(&mut bad.as_slice()), Err(IndexError::BadMagic(_))));

        let mut bad = buf.clone();
        bad[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            read_index(&mut bad.as_slice()),
            Err(IndexError::VersionMismatch { found: 7, .. })
        ));

        let mut bad = buf.clone();
        bad[9..11].copy_from_slice(&64u16.to_le_bytes());
        assert!(matches!(
            read_index(&mut bad.as_slice()),
            Err(IndexError::DimensionMismatch { found: 64, .. })
        ));

        let cut = &buf[..buf.len() - 3];
        assert!(matches!(read_index(&mut &cut[..]), Err(IndexError::Io(_))));
    }
}
