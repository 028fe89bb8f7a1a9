//! `RFM1` feature-map files: magic, u32 C, Hf, Wf, stride (little-endian),
//! then `C*Hf*Wf` little-endian f32 values, channel-major.

use std::fs;
use std::path::Path;

use super::{FeatureError, FeatureMap};

const MAGIC: &[u8; 4] = b"RFM1";
const HEADER_LEN: usize = 20;

pub fn write_feature_map(map: &FeatureMap, path: &Path) -> Result<(), FeatureError> {
    map.validate()?;
    let mut buf = Vec::with_capacity(HEADER_LEN + map.data.len() * 4);
    buf.extend_from_slice(MAGIC);
    for v in [map.channels, map.height, map.width, map.stride] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in &map.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_feature_map(path: &Path) -> Result<FeatureMap, FeatureError> {
    decode(&fs::read(path)?)
}

fn decode(bytes: &[u8]) -> Result<FeatureMap, FeatureError> {
    if bytes.len() < 4 {
        return Err(FeatureError::DimensionMismatch {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(FeatureError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(FeatureError::DimensionMismatch {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes")) as usize;
    let (channels, height, width, stride) = (word(0), word(1), word(2), word(3));
    let payload = &bytes[HEADER_LEN..];
    let expected = channels
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .and_then(|v| v.checked_mul(4))
        .ok_or(FeatureError::DimensionMismatch {
            expected: usize::MAX,
            actual: payload.len(),
        })?;
    if payload.len() != expected {
        return Err(FeatureError::DimensionMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let map = FeatureMap {
        channels,
        height,
        width,
        stride,
        data,
    };
    map.validate()?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> FeatureMap {
        FeatureMap {
            channels: 2,
            height: 3,
            width: 2,
            stride: 4,
            data: (0..12).map(|v| v as f32 * 0.25 - 1.0).collect(),
        }
    }

    #[test]
    fn truncated_payload_is_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rfm");
        write_feature_map(&sample(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode(&bytes), Err(FeatureError::DimensionMismatch { .. })));
    }

    #[test]
    fn nan_payload_is_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rfm");
        write_feature_map(&sample(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(FeatureError::NonFinite)));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = vec![0u8; 24];
        bytes[..4].copy_from_slice(b"RFM2");
        assert!(matches!(decode(&bytes), Err(FeatureError::BadMagic(_))));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(c in 1usize..4, h in 1usize..6, w in 1usize..6, stride in 1usize..8,
                                seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let map = FeatureMap {
                channels: c, height: h, width: w, stride,
                data: (0..c * h * w).map(|_| rng.random_range(-1e6f32..1e6)).collect(),
            };
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.rfm");
            write_feature_map(&map, &path).unwrap();
            let back = load_feature_map(&path).unwrap();
            prop_assert_eq!(back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            map.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back, map);
        }
    }
}
