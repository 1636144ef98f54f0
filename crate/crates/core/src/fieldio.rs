//! "Field format": a raw little-endian sample file plus a JSON sidecar.
//!
//! For a stem `maps/noise`, samples live in `maps/noise.raw` and the sidecar in
//! `maps/noise.json`:
//!
//! ```json
//! {"width":320,"height":160,"slices":1,"dtype":"c128",
//!  "spacing_mm":[1.4,1.4],"slice_thickness_mm":5.0,"domain":"image"}
//! ```
//!
//! Complex samples are interleaved `re, im`. Slices follow each other, each
//! stored row-major.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::slice::{Complex64, ComplexSlice, Domain, RealSlice, Slice, Spacing, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    C64,
    C128,
}

impl DType {
    fn bytes_per_sample(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::C64 => 8,
            DType::C128 => 16,
        }
    }

    fn is_complex(self) -> bool {
        matches!(self, DType::C64 | DType::C128)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub width: usize,
    pub height: usize,
    pub slices: usize,
    pub dtype: DType,
    pub spacing_mm: [f64; 2],
    pub slice_thickness_mm: f64,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldData {
    Real(Volume<RealSlice>),
    Complex(Volume<ComplexSlice>),
}

impl FieldData {
    pub fn real_slice(slice: RealSlice) -> Self {
        FieldData::Real(Volume::new(vec![slice], 1.0).expect("single slice volume"))
    }

    pub fn complex_slice(slice: ComplexSlice) -> Self {
        FieldData::Complex(Volume::new(vec![slice], 1.0).expect("single slice volume"))
    }
}

pub fn field_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.as_os_str().to_string_lossy();
    (PathBuf::from(format!("{s}.raw")), PathBuf::from(format!("{s}.json")))
}

fn header_for<T: crate::slice::Sample>(vol: &Volume<Slice<T>>, dtype: DType) -> FieldHeader {
    let first = &vol.slices()[0];
    FieldHeader {
        width: first.width(),
        height: first.height(),
        slices: vol.depth(),
        dtype,
        spacing_mm: [first.spacing().dx, first.spacing().dy],
        slice_thickness_mm: vol.slice_thickness(),
        domain: first.domain(),
    }
}

/// Serialise samples into the raw little-endian byte stream.
pub fn encode(data: &FieldData, dtype: DType) -> Result<(FieldHeader, Vec<u8>)> {
    let mut bytes = Vec::new();
    let header = match data {
        FieldData::Real(vol) => {
            ensure!(!dtype.is_complex(), Config, "real data cannot be stored as {dtype:?}");
            for s in vol.slices() {
                for &v in s.data() {
                    match dtype {
                        DType::F32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
                        _ => bytes.extend_from_slice(&v.to_le_bytes()),
                    }
                }
            }
            header_for(vol, dtype)
        }
        FieldData::Complex(vol) => {
            ensure!(dtype.is_complex(), Config, "complex data cannot be stored as {dtype:?}");
            for s in vol.slices() {
                for c in s.data() {
                    match dtype {
                        DType::C64 => {
                            bytes.extend_from_slice(&(c.re as f32).to_le_bytes());
                            bytes.extend_from_slice(&(c.im as f32).to_le_bytes());
                        }
                        _ => {
                            bytes.extend_from_slice(&c.re.to_le_bytes());
                            bytes.extend_from_slice(&c.im.to_le_bytes());
                        }
                    }
                }
            }
            header_for(vol, dtype)
        }
    };
    Ok((header, bytes))
}

/// Inverse of [`encode`].
pub fn decode(header: &FieldHeader, bytes: &[u8]) -> Result<FieldData> {
    let per_slice = header.width * header.height;
    let expected = per_slice * header.slices * header.dtype.bytes_per_sample();
    ensure!(
        bytes.len() == expected,
        Format,
        "field data holds {} bytes, header implies {expected}",
        bytes.len()
    );
    ensure!(header.slices > 0, Format, "field has no slices");
    let spacing = Spacing { dx: header.spacing_mm[0], dy: header.spacing_mm[1] };
    let f32_at = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as f64;
    let f64_at = |i: usize| f64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
    let slice_bytes = per_slice * header.dtype.bytes_per_sample();

    if header.dtype.is_complex() {
        let mut slices = Vec::with_capacity(header.slices);
        for s in 0..header.slices {
            let base = s * slice_bytes;
            let data: Vec<Complex64> = (0..per_slice)
                .map(|i| match header.dtype {
                    DType::C64 => Complex64::new(f32_at(base + 8 * i), f32_at(base + 8 * i + 4)),
                    _ => Complex64::new(f64_at(base + 16 * i), f64_at(base + 16 * i + 8)),
                })
                .collect();
            slices.push(ComplexSlice::new(header.width, header.height, data, spacing)?.with_domain(header.domain));
        }
        Ok(FieldData::Complex(Volume::new(slices, header.slice_thickness_mm)?))
    } else {
        let mut slices = Vec::with_capacity(header.slices);
        for s in 0..header.slices {
            let base = s * slice_bytes;
            let data: Vec<f64> = (0..per_slice)
                .map(|i| match header.dtype {
                    DType::F32 => f32_at(base + 4 * i),
                    _ => f64_at(base + 8 * i),
                })
                .collect();
            slices.push(RealSlice::new(header.width, header.height, data, spacing)?.with_domain(header.domain));
        }
        Ok(FieldData::Real(Volume::new(slices, header.slice_thickness_mm)?))
    }
}

pub fn write_field(stem: &Path, data: &FieldData, dtype: DType) -> Result<()> {
    let (header, bytes) = encode(data, dtype)?;
    let (raw, json) = field_paths(stem);
    if let Some(dir) = raw.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&json, e))?;
    fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

pub fn read_field(stem: &Path) -> Result<FieldData> {
    let (raw, json) = field_paths(stem);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let header: FieldHeader = serde_json::from_str(&text).map_err(|e| Error::json(&json, e))?;
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    decode(&header, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn truncated_file_is_rejected() {
        let s = RealSlice::from_fn(4, 3, |x, y| (x * y) as f64);
        let (h, mut b) = encode(&FieldData::real_slice(s), DType::F64).unwrap();
        b.pop();
        assert!(matches!(decode(&h, &b), Err(Error::Format(_))));
    }

    #[test]
    fn dtype_must_match_kind() {
        let s = RealSlice::zeros(2, 2);
        assert!(encode(&FieldData::real_slice(s), DType::C128).is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = ComplexSlice::from_fn(5, 3, |x, y| Complex64::new(x as f64 * 0.1, -(y as f64)))
            .with_domain(Domain::KSpace)
            .with_spacing(Spacing { dx: 1.4, dy: 2.8 });
        let vol = Volume::new(vec![s.clone(), s.scale(2.0)], 5.0).unwrap();
        let stem = dir.path().join("sub/k");
        write_field(&stem, &FieldData::Complex(vol.clone()), DType::C128).unwrap();
        assert_eq!(read_field(&stem).unwrap(), FieldData::Complex(vol));
    }

    proptest! {
        #[test]
        fn bytes_round_trip_exactly(
            w in 1usize..6, h in 1usize..6, seed in any::<u64>(), dtype in prop_oneof![
                Just(DType::F32), Just(DType::F64), Just(DType::C64), Just(DType::C128)]
        ) {
            let mut state = seed;
            let mut next = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 1e3
            };
            let data = if dtype.is_complex() {
                let v = (0..w * h).map(|_| Complex64::new(next(), next())).collect();
                FieldData::complex_slice(ComplexSlice::new(w, h, v, Spacing::default()).unwrap())
            } else {
                let v = (0..w * h).map(|_| next()).collect();
                FieldData::real_slice(RealSlice::new(w, h, v, Spacing::default()).unwrap())
            };
            let (hd, bytes) = encode(&data, dtype).unwrap();
            let back = decode(&hd, &bytes).unwrap();
            let (hd2, bytes2) = encode(&back, dtype).unwrap();
            prop_assert_eq!(hd, hd2);
            prop_assert_eq!(bytes, bytes2);
        }
    }
}
