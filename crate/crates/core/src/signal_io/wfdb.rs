//! WFDB header text, MIT annotation files and whole-record import of
//! MIT-BIH style directories (`NNN.hea`, `NNN.dat`, `NNN.atr`).

use std::fs;
use std::path::Path;

use super::annotation::{BeatAnnotation, BeatClass};
use super::mitbih::{decode_212, samples_to_record, wfdb_checksum, ChannelCalibration, Format212Header};
use super::record::EcgRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct WfdbSignal {
    pub file: String,
    pub format: u32,
    pub gain: f64,
    pub baseline: f64,
    pub initial: Option<i16>,
    pub checksum: Option<i16>,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WfdbHeader {
    pub record_id: String,
    pub fs: f64,
    pub n_samples: Option<usize>,
    pub signals: Vec<WfdbSignal>,
}

fn bad(m: impl Into<String>) -> Error {
    Error::InvalidHeader(m.into())
}

fn leading_number(s: &str) -> &str {
    let end =
        s.find(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-' || c == 'e' || c == 'E' || c == '+')).unwrap_or(s.len());
    &s[..end]
}

/// Parses header text. Gains may carry a `(baseline)` and `/units` suffix;
/// without an explicit baseline the ADC zero is used.
pub fn parse_header(text: &str) -> Result<WfdbHeader> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
    let rec = lines.next().ok_or_else(|| bad("empty header"))?;
    let f: Vec<&str> = rec.split_whitespace().collect();
    if f.len() < 2 {
        return Err(bad(format!("record line {rec:?} lacks a signal count")));
    }
    let record_id = f[0].split('/').next().unwrap_or(f[0]).to_string();
    let n_sig: usize = f[1].parse().map_err(|_| bad(format!("bad signal count {:?}", f[1])))?;
    let fs = match f.get(2) {
        Some(s) => leading_number(s.split('/').next().unwrap_or(s)).parse().map_err(|_| bad(format!("bad frequency {s:?}")))?,
        None => 250.0,
    };
    let n_samples = f.get(3).map(|s| s.parse().map_err(|_| bad(format!("bad sample count {s:?}")))).transpose()?;
    let mut signals = Vec::with_capacity(n_sig);
    for _ in 0..n_sig {
        let line = lines.next().ok_or_else(|| bad(format!("expected {n_sig} signal lines")))?;
        let s: Vec<&str> = line.split_whitespace().collect();
        if s.len() < 2 {
            return Err(bad(format!("signal line {line:?} lacks a format")));
        }
        let format = leading_number(s[1]).parse().map_err(|_| bad(format!("bad format {:?}", s[1])))?;
        let (gain, explicit_base) = match s.get(2) {
            Some(g) => {
                let g = g.split('/').next().unwrap_or(g);
                let (num, base) = match g.split_once('(') {
                    Some((n, b)) => (n, Some(b.trim_end_matches(')'))),
                    None => (g, None),
                };
                let gain: f64 = num.parse().map_err(|_| bad(format!("bad gain {g:?}")))?;
                let base: Option<f64> = base.map(|b| b.parse().map_err(|_| bad(format!("bad baseline {b:?}")))).transpose()?;
                (if gain == 0.0 { 200.0 } else { gain }, base)
            }
            None => (200.0, None),
        };
        let num = |i: usize| -> Result<Option<f64>> {
            s.get(i).map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad field {v:?} in {line:?}")))).transpose()
        };
        let adc_zero = num(4)?.unwrap_or(0.0);
        signals.push(WfdbSignal {
            file: s[0].to_string(),
            format,
            gain,
            baseline: explicit_base.unwrap_or(adc_zero),
            initial: num(5)?.map(|v| v as i16),
            checksum: num(6)?.map(|v| v as i16),
            description: s.get(8..).map(|d| d.join(" ")).unwrap_or_default(),
        });
    }
    Ok(WfdbHeader { record_id, fs, n_samples, signals })
}

impl WfdbHeader {
    pub fn to_format212(&self) -> Result<Format212Header> {
        if let Some(s) = self.signals.iter().find(|s| s.format != 212) {
            return Err(bad(format!("signal {:?} uses format {}, only 212 is supported", s.description, s.format)));
        }
        if self.signals.windows(2).any(|w| w[0].file != w[1].file) {
            return Err(bad("signals stored in separate files are not supported"));
        }
        let h = Format212Header {
            record_id: self.record_id.clone(),
            fs: self.fs,
            channels: self.signals.iter().map(|s| ChannelCalibration { gain: s.gain, baseline: s.baseline }).collect(),
        };
        h.validate()?;
        Ok(h)
    }
}

/// MIT annotation codes that mark a beat.
pub fn is_beat_code(code: u8) -> bool {
    matches!(code, 1..=13 | 25 | 30 | 34 | 35 | 38 | 41)
}

/// Wide/narrow class of a beat code: bundle-branch blocks, ventricular
/// beats and R-on-T beats are wide.
pub fn beat_class_of(code: u8) -> Option<BeatClass> {
    if !is_beat_code(code) {
        return None;
    }
    Some(if matches!(code, 2 | 3 | 5 | 10 | 25 | 41) { BeatClass::Wide } else { BeatClass::Narrow })
}

const SKIP: u16 = 59;
const NUM: u16 = 60;
const SUB: u16 = 61;
const CHN: u16 = 62;
const AUX: u16 = 63;

/// `(sample, code)` pairs of an MIT-format annotation file.
pub fn decode_atr(bytes: &[u8]) -> Result<Vec<(u64, u8)>> {
    let word = |i: usize| -> Option<u16> { bytes.get(i..i + 2).map(|b| u16::from_le_bytes([b[0], b[1]])) };
    let mut out = Vec::new();
    let mut t: u64 = 0;
    let mut i = 0;
    while let Some(w) = word(i) {
        i += 2;
        if w == 0 {
            break;
        }
        let (a, v) = (w >> 10, w & 0x3FF);
        match a {
            SKIP => {
                let (hi, lo) = match (word(i), word(i + 2)) {
                    (Some(h), Some(l)) => (h, l),
                    _ => return Err(Error::Format212("truncated SKIP in annotation file".into())),
                };
                i += 4;
                let skip = (u32::from(hi) << 16 | u32::from(lo)) as i32;
                t = t.checked_add_signed(i64::from(skip)).ok_or_else(|| Error::Format212("SKIP before sample 0".into()))?;
            }
            NUM | SUB | CHN => {}
            AUX => i += (v as usize).div_ceil(2) * 2,
            code => {
                t += u64::from(v);
                out.push((t, code as u8));
            }
        }
    }
    Ok(out)
}

/// Beat annotation (wide/narrow) from annotation bytes, at rate `fs`.
pub fn atr_to_annotation(bytes: &[u8], fs: f64, n_samples: usize) -> Result<BeatAnnotation> {
    let mut positions = Vec::new();
    let mut labels = Vec::new();
    for (t, code) in decode_atr(bytes)? {
        if let (Some(c), true) = (beat_class_of(code), (t as usize) < n_samples) {
            let p = t as usize;
            if positions.last().is_some_and(|&q| q >= p) {
                continue;
            }
            positions.push(p);
            labels.push(c);
        }
    }
    BeatAnnotation::new(positions, labels, fs)
}

/// Reads `dir/{name}.hea`, its data file and `dir/{name}.atr`, checking
/// the sample count and per-signal checksums the header declares.
pub fn import_wfdb_record(dir: impl AsRef<Path>, name: &str) -> Result<(EcgRecord, BeatAnnotation)> {
    let dir = dir.as_ref();
    let header = parse_header(&fs::read_to_string(dir.join(format!("{name}.hea")))?)?;
    let h212 = header.to_format212()?;
    let raw = decode_212(&fs::read(dir.join(&header.signals[0].file))?)?;
    let nc = header.signals.len();
    let frames = raw.len() / nc;
    if let Some(n) = header.n_samples {
        if frames < n {
            return Err(Error::LengthMismatch { expected: n * nc * 3 / 2, found: raw.len() * 3 / 2 });
        }
        for (c, s) in header.signals.iter().enumerate() {
            let sum = wfdb_checksum(raw[..n * nc].iter().skip(c).step_by(nc).copied());
            if let Some(expect) = s.checksum {
                if sum != expect {
                    return Err(Error::Format212(format!("{name}: signal {c} checksum {sum}, header says {expect}")));
                }
            }
        }
    }
    let n = header.n_samples.unwrap_or(frames);
    let record = samples_to_record(&raw[..n * nc], &h212)?;
    let ann = atr_to_annotation(&fs::read(dir.join(format!("{name}.atr")))?, record.fs, record.n_samples())?;
    Ok((record, ann))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEA_100: &str = "100 2 360 650000\n100.dat 212 200 11 1024 995 -22131 0 MLII\n100.dat 212 200 11 1024 1011 20052 0 V5\n# 69 M 1085 1629 x1\n";

    #[test]
    fn header_of_record_100() {
        let h = parse_header(HEA_100).unwrap();
        assert_eq!(h.record_id, "100");
        assert_eq!(h.fs, 360.0);
        assert_eq!(h.n_samples, Some(650_000));
        assert_eq!(h.signals.len(), 2);
        assert_eq!(h.signals[0].gain, 200.0);
        assert_eq!(h.signals[0].baseline, 1024.0);
        assert_eq!(h.signals[1].checksum, Some(20052));
        assert_eq!(h.signals[1].description, "V5");
    }

    #[test]
    fn gain_with_baseline_and_units() {
        let h = parse_header("r 1 250\nr.dat 212 100(3)/mV 12 0 0 0 0 I\n").unwrap();
        assert_eq!((h.signals[0].gain, h.signals[0].baseline), (100.0, 3.0));
        assert!(parse_header("r 1 250\nr.dat 16 100 12 0\n").unwrap().to_format212().is_err());
        assert!(parse_header("r 2 250\nr.dat 212 100\n").is_err());
    }

    fn w(a: u16, v: u16) -> [u8; 2] {
        (a << 10 | v).to_le_bytes()
    }

    #[test]
    fn annotation_stream() {
        let mut b = Vec::new();
        b.extend(w(1, 18));
        b.extend(w(AUX, 3));
        b.extend(b"(N\0\0");
        b.extend(w(5, 300));
        b.extend(w(28, 10));
        b.extend(w(SKIP, 0));
        b.extend(0u16.to_le_bytes());
        b.extend(1000u16.to_le_bytes());
        b.extend(w(2, 5));
        b.extend(w(0, 0));
        assert_eq!(decode_atr(&b).unwrap(), vec![(18, 1), (318, 5), (328, 28), (1333, 2)]);
        let ann = atr_to_annotation(&b, 360.0, 2000).unwrap();
        assert_eq!(ann.positions, vec![18, 318, 1333]);
        assert_eq!(ann.labels, vec![BeatClass::Narrow, BeatClass::Wide, BeatClass::Wide]);
    }

    #[test]
    fn beat_codes() {
        assert_eq!(beat_class_of(1), Some(BeatClass::Narrow));
        assert_eq!(beat_class_of(8), Some(BeatClass::Narrow));
        assert_eq!(beat_class_of(5), Some(BeatClass::Wide));
        assert_eq!(beat_class_of(14), None);
        assert_eq!(beat_class_of(28), None);
    }
}
