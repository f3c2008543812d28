//! Binary tensor blobs and the JSON manifests that index them.
//!
//! Each tensor is encoded as an 8-byte magic, a little-endian `u32` rank,
//! one little-endian `u64` per dimension and then the elements as
//! little-endian `f32`. A blob is a plain concatenation of such records; the
//! manifest stores each record's byte offset and the SHA-256 of the blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

pub const TENSOR_MAGIC: [u8; 8] = *b"LVEDTNS1";

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        let v = x.to_f32().unwrap_or(f32::NAN);
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Decodes one record at the start of `bytes`, returning it and its length.
pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> std::result::Result<(Tensor<T>, usize), String> {
    let take = |from: usize, n: usize| -> std::result::Result<&[u8], String> {
        bytes
            .get(from..from + n)
            .ok_or_else(|| format!("truncated record at byte {from}"))
    };
    if take(0, 8)? != TENSOR_MAGIC {
        return Err("bad tensor magic".into());
    }
    let rank = u32::from_le_bytes(take(8, 4)?.try_into().unwrap()) as usize;
    let mut pos = 12;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()) as usize);
        pos += 8;
    }
    let n: usize = shape.iter().product();
    let raw = take(pos, n * 4)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    pos += n * 4;
    let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
    Ok((t, pos))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub offset: u64,
    pub length: u64,
    pub shape: Vec<usize>,
}

/// Concatenates named tensors into one blob.
pub fn pack<'a, T: Scalar>(named: impl IntoIterator<Item = (String, &'a Tensor<T>)>) -> (Vec<u8>, Vec<BlobEntry>) {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in named {
        let offset = blob.len();
        encode_tensor(t, &mut blob);
        entries.push(BlobEntry {
            name,
            offset: offset as u64,
            length: (blob.len() - offset) as u64,
            shape: t.shape().to_vec(),
        });
    }
    (blob, entries)
}

pub fn unpack_entry<T: Scalar>(blob: &[u8], e: &BlobEntry, path: &Path) -> Result<Tensor<T>> {
    let start = e.offset as usize;
    let end = start + e.length as usize;
    let bytes = blob.get(start..end).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        detail: format!("entry {} out of bounds", e.name),
    })?;
    let (t, used) = decode_tensor(bytes).map_err(|detail| Error::Format {
        path: path.to_path_buf(),
        detail,
    })?;
    if used != bytes.len() || t.shape() != e.shape.as_slice() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("entry {} does not match its manifest record", e.name),
        });
    }
    Ok(t)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// The blob that belongs to a manifest: same stem, `.bin` extension.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn write_json<M: Serialize>(path: &Path, value: &M) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<M: DeserializeOwned>(path: &Path) -> Result<M> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a blob and verifies it against the recorded digest.
pub fn read_blob_checked(path: &Path, sha256: &str) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if sha256_hex(&bytes) != sha256 {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
        });
    }
    Ok(bytes)
}

/// Generic manifest for named-tensor checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest<H> {
    pub kind: String,
    pub version: u32,
    pub header: H,
    pub tensors: Vec<BlobEntry>,
    pub blob: String,
    pub sha256: String,
}

pub const MANIFEST_VERSION: u32 = 1;

pub fn save_named<'a, T: Scalar, H: Serialize>(
    path: &Path,
    kind: &str,
    header: H,
    named: impl IntoIterator<Item = (String, &'a Tensor<T>)>,
) -> Result<()> {
    let (blob, tensors) = pack(named);
    let bpath = blob_path(path);
    write_bytes(&bpath, &blob)?;
    let manifest = Manifest {
        kind: kind.to_string(),
        version: MANIFEST_VERSION,
        header,
        tensors,
        blob: bpath
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: sha256_hex(&blob),
    };
    write_json(path, &manifest)
}

pub fn load_named<T: Scalar, H: DeserializeOwned>(
    path: &Path,
    kind: &str,
) -> Result<(H, Vec<(String, Tensor<T>)>)> {
    let m: Manifest<H> = read_json(path)?;
    if m.kind != kind || m.version != MANIFEST_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("expected {kind} v{MANIFEST_VERSION}, found {} v{}", m.kind, m.version),
        });
    }
    let bpath = path.with_file_name(&m.blob);
    let blob = read_blob_checked(&bpath, &m.sha256)?;
    let mut out = Vec::with_capacity(m.tensors.len());
    for e in &m.tensors {
        out.push((e.name.clone(), unpack_entry(&blob, e, &bpath)?));
    }
    Ok((m.header, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn record_layout_is_exact() {
        let t = Tensor::<f32>::new([1, 2], vec![1.0, -2.5]).unwrap();
        let mut b = Vec::new();
        encode_tensor(&t, &mut b);
        assert_eq!(&b[..8], b"LVEDTNS1");
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..20], &1u64.to_le_bytes());
        assert_eq!(&b[20..28], &2u64.to_le_bytes());
        assert_eq!(&b[28..32], &1.0f32.to_le_bytes());
        assert_eq!(&b[32..36], &(-2.5f32).to_le_bytes());
        assert_eq!(b.len(), 36);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut b = Vec::new();
        encode_tensor(&Tensor::<f32>::zeros([3]), &mut b);
        b[0] = b'X';
        assert!(decode_tensor::<f32>(&b).is_err());
        assert!(decode_tensor::<f32>(&b[..10]).is_err());
    }

    #[test]
    fn checksum_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let t = Tensor::<f32>::full([4], 0.5);
        save_named(&p, "test", (), [("a".to_string(), &t)]).unwrap();
        let (_, back): ((), Vec<(String, Tensor<f32>)>) = load_named(&p, "test").unwrap();
        assert!(back[0].1.bit_eq(&t));
        let bp = blob_path(&p);
        let mut bytes = std::fs::read(&bp).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&bp, bytes).unwrap();
        assert!(matches!(
            load_named::<f32, ()>(&p, "test"),
            Err(Error::Checksum { .. })
        ));
    }

    proptest! {
        #[test]
        fn f32_round_trip_is_bitwise(rows in 1usize..5, cols in 1usize..7, seed in any::<u32>()) {
            let data: Vec<f32> = (0..rows * cols)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 7919) & 0x7f7f_ffff))
                .collect();
            let t = Tensor::<f32>::new([rows, cols], data).unwrap();
            let mut b = Vec::new();
            encode_tensor(&t, &mut b);
            let (back, used) = decode_tensor::<f32>(&b).unwrap();
            prop_assert_eq!(used, b.len());
            prop_assert!(back.bit_eq(&t));
        }
    }
}
