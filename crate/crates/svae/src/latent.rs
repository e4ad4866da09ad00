//! Binary tensor file carrying latent sequences (and cached SSL features):
//! 20-byte header `"SVAE" | u32 version | f32 frame_rate | u32 T | u32 C`
//! followed by `T*C` little-endian f32 values, row-major (time-major).

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SVAE";
pub const FORMAT_VERSION: u32 = 1;
pub const LATENT_CHANNELS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    /// `(T, C)` row-major.
    pub data: Array2<f32>,
    pub frame_rate: f32,
}

impl TensorFile {
    pub fn new(data: Array2<f32>, frame_rate: f32) -> Self {
        Self { data, frame_rate }
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + self.data.len() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.frame_rate.to_le_bytes());
        buf.extend_from_slice(&(self.frames() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.channels() as u32).to_le_bytes());
        for v in self.data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header = [0u8; 20];
        f.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
        if &header[0..4] != MAGIC {
            return Err(Error::WavFormat(format!("{}: not a tensor file", path.display())));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::WavFormat(format!(
                "{}: unsupported tensor file version {version}",
                path.display()
            )));
        }
        let frame_rate = f32::from_le_bytes(header[8..12].try_into().unwrap());
        let t = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let c = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
        let mut payload = vec![0u8; t * c * 4];
        f.read_exact(&mut payload).map_err(|e| Error::io(path, e))?;
        let mut rest = [0u8; 1];
        if f.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::WavFormat(format!("{}: trailing bytes", path.display())));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Self {
            data: Array2::from_shape_vec((t, c), values).expect("shape from header"),
            frame_rate,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_exactly_20_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.svl");
        let tf = TensorFile::new(Array2::zeros((3, 64)), 40.0);
        tf.write(&p).unwrap();
        let len = std::fs::metadata(&p).unwrap().len();
        assert_eq!(len, 20 + 4 * 3 * 64);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.svl");
        std::fs::write(&p, b"NOPE AT ALL, NOT A TENSOR FILE--").unwrap();
        assert!(TensorFile::read(&p).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_is_lossless(t in prop::sample::select(vec![1usize, 2, 119, 120, 121]), seed in 0u64..1000) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("rt.svl");
            let data = Array2::from_shape_fn((t, 64), |(i, j)| {
                ((seed as f32) + (i * 64 + j) as f32 * 0.123).sin()
            });
            let tf = TensorFile::new(data, 40.0);
            tf.write(&p).unwrap();
            let back = TensorFile::read(&p).unwrap();
            prop_assert_eq!(back, tf);
        }
    }
}
