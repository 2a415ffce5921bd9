//! The `KTPR` binary container.
//!
//! ```text
//! header (21 bytes, little-endian):
//!   b"KTPR" | u32 version = 1 | u32 C | u8 tag | u64 count
//! tag 0/1/2  parameter pairs (small conv / mlp / attention target)
//!   record: u64 seed | f32 host_acc | f32 distilled_acc
//!           | large conv1 | large conv2 | target tensors (declaration order)
//! tag 255    full large-host checkpoints, same record prefix, then every host tensor:
//!           stem conv (C,1,3,3) | stem BN γ, β, running mean, running var (C each)
//!           | block conv1 (C,C,3,3) | bn1 γ, β, mean, var | block conv2 | bn2 γ, β, mean, var
//!           | head weight (10,C) | head bias (10)
//! tag 254    translator checkpoint (see `translators::checkpoint`)
//! ```
//! All tensors are row-major f32.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{ensure, KtError, Result};
use crate::host::{HostModel, HostSpec, LargeBlockParams, TargetBlockParams, TargetVariant};

pub const MAGIC: &[u8; 4] = b"KTPR";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 21;
pub const HOST_TAG: u8 = 255;
pub const TRANSLATOR_TAG: u8 = 254;
/// Seed, host accuracy, distilled accuracy.
pub const RECORD_PREFIX: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub channels: u32,
    pub tag: u8,
    pub count: u64,
}

impl Header {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[..4].copy_from_slice(MAGIC);
        b[4..8].copy_from_slice(&VERSION.to_le_bytes());
        b[8..12].copy_from_slice(&self.channels.to_le_bytes());
        b[12] = self.tag;
        b[13..21].copy_from_slice(&self.count.to_le_bytes());
        b
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| KtError::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        ensure!(bytes.len() >= HEADER_LEN, corrupt(format!("{} bytes, shorter than a header", bytes.len())));
        ensure!(&bytes[..4] == MAGIC, corrupt("bad magic (expected KTPR)".into()));
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        ensure!(version == VERSION, corrupt(format!("unsupported version {version}")));
        Ok(Self {
            channels: u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
            tag: bytes[12],
            count: u64::from_le_bytes(bytes[13..21].try_into().unwrap()),
        })
    }
}

pub fn write_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.write_f32::<LittleEndian>(*v).unwrap();
    }
}

pub fn read_f32s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f32>> {
    let mut v = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut v)?;
    Ok(v)
}

/// One supervised translation sample plus where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamPair {
    pub seed: u64,
    pub large: LargeBlockParams,
    pub target: TargetBlockParams,
    pub host_acc: f32,
    pub distilled_acc: f32,
}

impl ParamPair {
    pub fn channels(&self) -> usize {
        self.large.channels()
    }

    pub fn variant(&self) -> TargetVariant {
        self.target.variant()
    }
}

pub fn pair_record_len(c: usize, variant: TargetVariant) -> usize {
    RECORD_PREFIX + 4 * (TargetVariant::LargeConv.target_len(c) + variant.target_len(c))
}

pub fn encode_pair(p: &ParamPair) -> Vec<u8> {
    let mut out = Vec::with_capacity(pair_record_len(p.channels(), p.variant()));
    out.write_u64::<LittleEndian>(p.seed).unwrap();
    out.write_f32::<LittleEndian>(p.host_acc).unwrap();
    out.write_f32::<LittleEndian>(p.distilled_acc).unwrap();
    write_f32s(&mut out, &p.large.flat());
    write_f32s(&mut out, &p.target.flat());
    out
}

pub fn decode_pair(bytes: &[u8], c: usize, variant: TargetVariant) -> Result<ParamPair> {
    ensure!(
        bytes.len() == pair_record_len(c, variant),
        KtError::shape("pair record", &[pair_record_len(c, variant)], &[bytes.len()])
    );
    let mut r = bytes;
    let seed = r.read_u64::<LittleEndian>().unwrap();
    let host_acc = r.read_f32::<LittleEndian>().unwrap();
    let distilled_acc = r.read_f32::<LittleEndian>().unwrap();
    let large = read_f32s(&mut r, TargetVariant::LargeConv.target_len(c)).unwrap();
    let target = read_f32s(&mut r, variant.target_len(c)).unwrap();
    Ok(ParamPair {
        seed,
        large: LargeBlockParams::from_flat(c, &large)?,
        target: TargetBlockParams::from_flat(variant, c, &target)?,
        host_acc,
        distilled_acc,
    })
}

/// A stored Step-1 host: everything plug-in evaluation needs.
#[derive(Clone, Debug)]
pub struct HostCheckpoint {
    pub seed: u64,
    pub host_acc: f32,
    pub distilled_acc: f32,
    pub host: HostModel,
}

pub fn host_record_len(c: usize) -> usize {
    let h: HostModel = HostModel::build(
        HostSpec {
            channels: c,
            variant: TargetVariant::LargeConv,
        },
        0,
    )
    .expect("valid spec");
    RECORD_PREFIX + 4 * h.state_len()
}

pub fn encode_host(ck: &HostCheckpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.write_u64::<LittleEndian>(ck.seed).unwrap();
    out.write_f32::<LittleEndian>(ck.host_acc).unwrap();
    out.write_f32::<LittleEndian>(ck.distilled_acc).unwrap();
    for t in ck.host.state_tensors() {
        write_f32s(&mut out, t.data());
    }
    out
}

pub fn decode_host(bytes: &[u8], c: usize) -> Result<HostCheckpoint> {
    let mut host: HostModel = HostModel::build(HostSpec::new(c, TargetVariant::LargeConv)?, 0)?;
    let expect = RECORD_PREFIX + 4 * host.state_len();
    ensure!(bytes.len() == expect, KtError::shape("host record", &[expect], &[bytes.len()]));
    let mut r = bytes;
    let seed = r.read_u64::<LittleEndian>().unwrap();
    let host_acc = r.read_f32::<LittleEndian>().unwrap();
    let distilled_acc = r.read_f32::<LittleEndian>().unwrap();
    let flat = read_f32s(&mut r, host.state_len()).unwrap();
    host.load_state_flat(&flat)?;
    Ok(HostCheckpoint {
        seed,
        host_acc,
        distilled_acc,
        host,
    })
}

/// Writes header + records to `path` through a temporary file and an atomic rename.
pub fn write_container<'a>(
    path: &Path,
    header: Header,
    records: impl IntoIterator<Item = &'a [u8]>,
) -> Result<()> {
    let tmp = path.with_extension("part");
    let io = |e| KtError::io(&tmp, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp).map_err(io)?);
    f.write_all(&header.encode()).map_err(io)?;
    for r in records {
        f.write_all(r).map_err(io)?;
    }
    f.into_inner()
        .map_err(|e| KtError::io(&tmp, e.into_error()))?
        .sync_all()
        .map_err(io)?;
    std::fs::rename(&tmp, path).map_err(|e| KtError::io(path, e))
}

/// Reads a container, checking header fields and the exact byte length.
pub fn read_container(path: &Path, expect_tag: u8, expect_c: usize, record_len: usize) -> Result<Vec<Vec<u8>>> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            KtError::Missing(path.to_path_buf())
        } else {
            KtError::io(path, e)
        }
    })?;
    let h = Header::decode(&bytes, path)?;
    let corrupt = |reason: String| KtError::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    ensure!(h.tag == expect_tag, corrupt(format!("variant tag {} where {expect_tag} expected", h.tag)));
    ensure!(
        h.channels as usize == expect_c,
        corrupt(format!("C={} where C={expect_c} expected", h.channels))
    );
    let want = HEADER_LEN + h.count as usize * record_len;
    ensure!(
        bytes.len() == want,
        corrupt(format!("length {} but header implies {want}", bytes.len()))
    );
    Ok(bytes[HEADER_LEN..].chunks_exact(record_len).map(<[u8]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn pair(seed: u64, variant: TargetVariant) -> ParamPair {
        let mut rng = stream_rng(seed, &[1]);
        let flat: Vec<f32> = (0..648).map(|i| (i as f32 * 0.37 + seed as f32).sin()).collect();
        ParamPair {
            seed,
            large: LargeBlockParams::from_flat(6, &flat).unwrap(),
            target: TargetBlockParams::random_init(variant, 6, &mut rng).unwrap(),
            host_acc: 0.5,
            distilled_acc: 0.25,
        }
    }

    #[test]
    fn conv_record_is_3904_bytes_and_round_trips() {
        assert_eq!(pair_record_len(6, TargetVariant::SmallConv), 8 + 4 + 4 + 648 * 4 + 324 * 4);
        assert_eq!(pair_record_len(6, TargetVariant::SmallConv), 3904);
        for v in [TargetVariant::SmallConv, TargetVariant::MlpBlock, TargetVariant::AttnBlock] {
            let p = pair(9, v);
            let bytes = encode_pair(&p);
            assert_eq!(bytes.len(), pair_record_len(6, v));
            assert_eq!(decode_pair(&bytes, 6, v).unwrap(), p);
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let h = Header { channels: 6, tag: 0, count: 3 };
        let b = h.encode();
        assert_eq!(&b[..4], b"KTPR");
        assert_eq!(b[4..8], [1, 0, 0, 0]);
        assert_eq!(b[8..12], [6, 0, 0, 0]);
        assert_eq!(b[12], 0);
        assert_eq!(b[13..21], [3, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(Header::decode(&b, Path::new("x")).unwrap(), h);
    }

    #[test]
    fn container_detects_truncation_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ktpr");
        let recs: Vec<Vec<u8>> = (0..3).map(|s| encode_pair(&pair(s, TargetVariant::SmallConv))).collect();
        write_container(&path, Header { channels: 6, tag: 0, count: 3 }, recs.iter().map(Vec::as_slice)).unwrap();
        let back = read_container(&path, 0, 6, 3904).unwrap();
        assert_eq!(back, recs);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = read_container(&path, 0, 6, 3904).unwrap_err();
        assert!(err.to_string().contains("s.ktpr"), "{err}");
        std::fs::write(&path, b"NOPE0000000000000000000000").unwrap();
        assert!(matches!(read_container(&path, 0, 6, 3904), Err(KtError::Corrupt { .. })));
    }

    #[test]
    fn host_checkpoint_round_trips() {
        let host: HostModel = HostModel::build(HostSpec::new(6, TargetVariant::LargeConv).unwrap(), 5).unwrap();
        let ck = HostCheckpoint { seed: 5, host_acc: 0.4, distilled_acc: 0.3, host };
        let bytes = encode_host(&ck);
        assert_eq!(bytes.len(), host_record_len(6));
        let back = decode_host(&bytes, 6).unwrap();
        assert_eq!(back.seed, 5);
        assert_eq!(encode_host(&back), bytes);
    }
}
