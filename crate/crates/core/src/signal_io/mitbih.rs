//! MIT-BIH format 212 import.
//!
//! Two 12-bit two's-complement samples are packed into each 3-byte group:
//!
//! ```text
//! byte0 = s1[7:0]
//! byte1 = s2[11:8] << 4 | s1[11:8]
//! byte2 = s2[7:0]
//! ```
//!
//! The sample stream is frame-interleaved across channels. Header values
//! (fs, gain, baseline) come from the caller; see `wfdb` for header text.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::record::EcgRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelCalibration {
    /// ADC units per millivolt.
    pub gain: f64,
    /// ADC value corresponding to 0 mV.
    pub baseline: f64,
}

/// The subset of a WFDB header needed to convert a format-212 file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Format212Header {
    #[serde(default)]
    pub record_id: String,
    pub fs: f64,
    pub channels: Vec<ChannelCalibration>,
}

impl Format212Header {
    pub fn validate(&self) -> Result<()> {
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return Err(Error::InvalidHeader(format!("fs must be positive, got {}", self.fs)));
        }
        if self.channels.is_empty() {
            return Err(Error::InvalidHeader("no channel calibration given".into()));
        }
        if let Some(i) = self.channels.iter().position(|c| !(c.gain.is_finite() && c.gain != 0.0)) {
            return Err(Error::InvalidHeader(format!("channel {i}: gain must be finite and non-zero")));
        }
        Ok(())
    }

    /// Reads the sidecar JSON form of the header.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let h: Self = serde_json::from_str(&text).map_err(|e| Error::InvalidHeader(e.to_string()))?;
        h.validate()?;
        Ok(h)
    }
}

fn sign_extend_12(v: u16) -> i16 {
    ((v << 4) as i16) >> 4
}

/// Unpacks one 3-byte group into its two samples.
pub fn decode_pair(b: [u8; 3]) -> (i16, i16) {
    let s1 = u16::from(b[0]) | (u16::from(b[1] & 0x0F) << 8);
    let s2 = u16::from(b[2]) | (u16::from(b[1] >> 4) << 8);
    (sign_extend_12(s1), sign_extend_12(s2))
}

/// Packs two samples in `[-2048, 2047]` into a 3-byte group.
pub fn encode_pair(s1: i16, s2: i16) -> [u8; 3] {
    let a = (s1 as u16) & 0x0FFF;
    let b = (s2 as u16) & 0x0FFF;
    [(a & 0xFF) as u8, ((a >> 8) as u8) | (((b >> 8) as u8) << 4), (b & 0xFF) as u8]
}

/// Decodes a format-212 byte stream into raw ADC samples.
pub fn decode_212(bytes: &[u8]) -> Result<Vec<i16>> {
    if !bytes.len().is_multiple_of(3) {
        return Err(Error::Format212(format!("length {} is not a multiple of 3 (trailing partial group)", bytes.len())));
    }
    let mut out = Vec::with_capacity(bytes.len() / 3 * 2);
    for g in bytes.chunks_exact(3) {
        let (a, b) = decode_pair([g[0], g[1], g[2]]);
        out.push(a);
        out.push(b);
    }
    Ok(out)
}

/// Converts a decoded sample stream to a millivolt record.
pub fn samples_to_record(raw: &[i16], header: &Format212Header) -> Result<EcgRecord> {
    header.validate()?;
    let nc = header.channels.len();
    if !raw.len().is_multiple_of(nc) {
        return Err(Error::Format212(format!("{} samples do not divide into {nc} channels", raw.len())));
    }
    let mut channels = vec![Vec::with_capacity(raw.len() / nc); nc];
    for (k, &s) in raw.iter().enumerate() {
        let cal = &header.channels[k % nc];
        channels[k % nc].push(((f64::from(s) - cal.baseline) / cal.gain) as f32);
    }
    EcgRecord::new(header.record_id.clone(), header.fs, channels)
}

pub fn import_mitbih_212(dat_path: impl AsRef<Path>, header: &Format212Header) -> Result<EcgRecord> {
    header.validate()?;
    let bytes = fs::read(dat_path)?;
    samples_to_record(&decode_212(&bytes)?, header)
}

/// WFDB-style 16-bit checksum (sum of samples modulo 2^16, as signed).
pub fn wfdb_checksum(samples: impl IntoIterator<Item = i16>) -> i16 {
    samples.into_iter().fold(0i16, |acc, s| acc.wrapping_add(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_positive_pair() {
        assert_eq!(decode_pair([0x01, 0x00, 0x02]), (1, 2));
    }

    #[test]
    fn negative_one() {
        assert_eq!(decode_pair([0xFF, 0x0F, 0x00]), (-1, 0));
    }

    #[test]
    fn edge_values_round_trip() {
        for &a in &[-2048i16, -2047, -1, 0, 1, 2046, 2047] {
            for &b in &[-2048i16, -1, 0, 1, 2047] {
                assert_eq!(decode_pair(encode_pair(a, b)), (a, b));
            }
        }
    }

    #[test]
    fn trailing_partial_group_rejected() {
        assert!(matches!(decode_212(&[1, 2, 3, 4]), Err(Error::Format212(_))));
    }

    #[test]
    fn calibration_applied() {
        let h = Format212Header {
            record_id: "x".into(),
            fs: 360.0,
            channels: vec![ChannelCalibration { gain: 200.0, baseline: 1024.0 }; 2],
        };
        let r = samples_to_record(&[1224, 624], &h).unwrap();
        assert_eq!(r.channels, vec![vec![1.0f32], vec![-2.0f32]]);
    }

    #[test]
    fn missing_header_fields_rejected() {
        let e = serde_json::from_str::<Format212Header>(r#"{"fs": 360}"#);
        assert!(e.is_err());
        let h = Format212Header { record_id: String::new(), fs: 360.0, channels: vec![] };
        assert!(matches!(h.validate(), Err(Error::InvalidHeader(_))));
    }

    proptest! {
        #[test]
        fn any_pair_round_trips(a in -2048i16..=2047, b in -2048i16..=2047) {
            prop_assert_eq!(decode_pair(encode_pair(a, b)), (a, b));
        }

        #[test]
        fn three_n_bytes_give_two_n_samples(bytes in proptest::collection::vec(any::<u8>(), 0..300)) {
            let n = bytes.len() / 3 * 3;
            prop_assert_eq!(decode_212(&bytes[..n]).unwrap().len(), n / 3 * 2);
        }
    }
}
