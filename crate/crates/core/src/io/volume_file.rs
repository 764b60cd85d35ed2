//! Raw volume files: a small little-endian header (id, extents, spacing)
//! followed by the voxel buffer as f64 scalars, x-fastest.

use super::IoError;
use crate::volume::Volume;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"VXRVOL\0\0";

pub fn save_volume(path: impl AsRef<Path>, v: &Volume) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut buf: Vec<u8> = Vec::with_capacity(64 + v.voxel_count() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(v.id().len() as u32).to_le_bytes());
    buf.extend_from_slice(v.id().as_bytes());
    for a in 0..3 {
        buf.extend_from_slice(&(v.extents()[a] as u64).to_le_bytes());
    }
    for a in 0..3 {
        buf.extend_from_slice(&v.spacing()[a].to_le_bytes());
    }
    for &x in v.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|source| IoError::Write { path: path.into(), source })
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume, IoError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| IoError::Read { path: path.into(), source })?;
    let trunc = |what: &str| IoError::Truncated { path: path.into(), what: what.into() };

    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(IoError::BadMagic { path: path.into() });
    }
    let mut pos = 8;
    let mut take = |n: usize| -> Result<&[u8], IoError> {
        if pos + n > bytes.len() {
            return Err(IoError::Truncated {
                path: path.into(),
                what: format!("wanted {n} bytes at offset {pos}"),
            });
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };

    let id_len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let id = String::from_utf8(take(id_len)?.to_vec()).map_err(|_| trunc("non-utf8 id"))?;
    let mut extents = [0usize; 3];
    for e in &mut extents {
        *e = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    }
    let mut spacing = [0f64; 3];
    for s in &mut spacing {
        *s = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
    }
    let count = extents.iter().product::<usize>();
    let payload = take(count * 8)?;
    if pos != bytes.len() {
        return Err(trunc("trailing bytes"));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Volume::new(id, extents, spacing, data).map_err(IoError::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        let data: Vec<f64> = (0..24).map(|i| (i as f64).sin()).collect();
        let v = Volume::new("study_a_s1", [4, 3, 2], [1.0, 1.0, 2.5], data).unwrap();
        save_volume(&path, &v).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.id(), v.id());
        assert_eq!(back.extents(), v.extents());
        assert_eq!(back.spacing(), v.spacing());
        assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn short_file_is_truncation_not_panic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        let data: Vec<f64> = vec![0.5; 8];
        let v = Volume::new("v", [2, 2, 2], [1.0; 3], data).unwrap();
        save_volume(&path, &v).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match load_volume(&path) {
            Err(IoError::Truncated { .. }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }
}
