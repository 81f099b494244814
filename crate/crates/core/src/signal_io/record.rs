//! Project record format: one UTF-8 JSON header line followed by a
//! little-endian `f32` payload, sample-major and channel-interleaved.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A multi-channel ECG recording in millivolts.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub record_id: String,
    /// Sampling frequency in Hz.
    pub fs: f64,
    /// One sample vector per channel, all of equal length.
    pub channels: Vec<Vec<f32>>,
}

impl EcgRecord {
    pub fn new(record_id: impl Into<String>, fs: f64, channels: Vec<Vec<f32>>) -> Result<Self> {
        let record = Self { record_id: record_id.into(), fs, channels };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return Err(Error::InvalidRecord(format!("sampling frequency must be positive, got {}", self.fs)));
        }
        if self.channels.is_empty() {
            return Err(Error::InvalidRecord("record needs at least one channel".into()));
        }
        let n = self.channels[0].len();
        if let Some((i, c)) = self.channels.iter().enumerate().find(|(_, c)| c.len() != n) {
            return Err(Error::InvalidRecord(format!("channel {i} has {} samples, channel 0 has {n}", c.len())));
        }
        Ok(())
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_samples(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.fs
    }

    /// Channel `c` widened to `f64`.
    pub fn channel_f64(&self, c: usize) -> Vec<f64> {
        self.channels[c].iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordHeader {
    record_id: String,
    fs: f64,
    n_channels: usize,
    n_samples: usize,
}

/// Serializes a record into the on-disk byte layout.
pub fn encode_record(record: &EcgRecord) -> Result<Vec<u8>> {
    record.validate()?;
    let header = RecordHeader {
        record_id: record.record_id.clone(),
        fs: record.fs,
        n_channels: record.n_channels(),
        n_samples: record.n_samples(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(4 * header.n_channels * header.n_samples);
    for i in 0..header.n_samples {
        for ch in &record.channels {
            out.extend_from_slice(&ch[i].to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses the on-disk byte layout.
pub fn decode_record(bytes: &[u8]) -> Result<EcgRecord> {
    let newline = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::InvalidHeader("missing header line".into()))?;
    let header: RecordHeader = serde_json::from_slice(&bytes[..newline]).map_err(|e| Error::InvalidHeader(e.to_string()))?;
    if !(header.fs.is_finite() && header.fs > 0.0) {
        return Err(Error::InvalidHeader(format!("fs must be positive, got {}", header.fs)));
    }
    if header.n_channels == 0 {
        return Err(Error::InvalidHeader("n_channels must be at least 1".into()));
    }
    let payload = &bytes[newline + 1..];
    let expected = header
        .n_channels
        .checked_mul(header.n_samples)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::InvalidHeader("declared size overflows".into()))?;
    if payload.len() != expected {
        return Err(Error::LengthMismatch { expected, found: payload.len() });
    }
    let mut channels = vec![Vec::with_capacity(header.n_samples); header.n_channels];
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        channels[k % header.n_channels].push(v);
    }
    Ok(EcgRecord { record_id: header.record_id, fs: header.fs, channels })
}

pub fn write_record(record: &EcgRecord, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_record(record)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_record(path: impl AsRef<Path>) -> Result<EcgRecord> {
    decode_record(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header_bytes(fs: f64, nc: usize, ns: usize) -> Vec<u8> {
        let mut b = format!(r#"{{"record_id":"t","fs":{fs},"n_channels":{nc},"n_samples":{ns}}}"#).into_bytes();
        b.push(b'\n');
        b
    }

    #[test]
    fn payload_layout_is_little_endian_f32() {
        let r = EcgRecord::new("a", 250.0, vec![vec![0.0, 1.0, -1.0, 0.5]]).unwrap();
        let bytes = encode_record(&r).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let payload = &bytes[nl + 1..];
        let mut want = Vec::new();
        for v in [0.0f32, 1.0, -1.0, 0.5] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(payload, &want[..]);
        assert_eq!(decode_record(&bytes).unwrap(), r);
    }

    #[test]
    fn interleaving_is_sample_major() {
        let r = EcgRecord::new("b", 125.0, vec![vec![1.0, 2.0], vec![10.0, 20.0]]).unwrap();
        let bytes = encode_record(&r).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let vals: Vec<f32> = bytes[nl + 1..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        assert_eq!(vals, vec![1.0, 10.0, 2.0, 20.0]);
    }

    #[test]
    fn empty_record_round_trips() {
        let r = EcgRecord::new("empty", 250.0, vec![vec![], vec![]]).unwrap();
        let back = decode_record(&encode_record(&r).unwrap()).unwrap();
        assert_eq!(back.n_samples(), 0);
        assert_eq!(back.n_channels(), 2);
    }

    #[test]
    fn payload_shorter_than_header_is_rejected() {
        let mut b = header_bytes(250.0, 2, 10);
        b.extend(std::iter::repeat_n(0u8, 19 * 4));
        assert!(matches!(decode_record(&b), Err(Error::LengthMismatch { expected: 80, found: 76 })));
    }

    #[test]
    fn zero_fs_is_invalid_header() {
        let b = header_bytes(0.0, 1, 0);
        assert!(matches!(decode_record(&b), Err(Error::InvalidHeader(_))));
    }

    #[test]
    fn garbage_header_is_invalid() {
        assert!(matches!(decode_record(b"not json\n"), Err(Error::InvalidHeader(_))));
        assert!(matches!(decode_record(b"no newline"), Err(Error::InvalidHeader(_))));
    }

    #[test]
    fn unequal_channels_rejected_before_writing() {
        let r = EcgRecord { record_id: "x".into(), fs: 250.0, channels: vec![vec![1.0], vec![1.0, 2.0]] };
        assert!(matches!(encode_record(&r), Err(Error::InvalidRecord(_))));
    }
}
