//! Beat annotations and their CSV form (`sample_index,label`, no header, LF).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BeatClass {
    Narrow,
    Wide,
}

impl BeatClass {
    pub fn token(self) -> &'static str {
        match self {
            BeatClass::Narrow => "N",
            BeatClass::Wide => "W",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        match s {
            "N" => Some(BeatClass::Narrow),
            "W" => Some(BeatClass::Wide),
            _ => None,
        }
    }

    pub fn is_wide(self) -> bool {
        self == BeatClass::Wide
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Provenance {
    #[default]
    Truth,
    Predicted,
}

/// Ordered beat positions with per-beat class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatAnnotation {
    pub positions: Vec<usize>,
    pub labels: Vec<BeatClass>,
    /// Sampling frequency the positions refer to.
    pub fs_ref: f64,
    #[serde(default)]
    pub provenance: Provenance,
}

impl BeatAnnotation {
    pub fn new(positions: Vec<usize>, labels: Vec<BeatClass>, fs_ref: f64) -> Result<Self> {
        let ann = Self { positions, labels, fs_ref, provenance: Provenance::Truth };
        ann.validate()?;
        Ok(ann)
    }

    /// Predicted positions with every label set to narrow.
    pub fn positions_only(positions: Vec<usize>, fs_ref: f64) -> Self {
        let labels = vec![BeatClass::Narrow; positions.len()];
        Self { positions, labels, fs_ref, provenance: Provenance::Predicted }
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.positions.len() {
            return Err(Error::InvalidRecord(format!("{} labels for {} positions", self.labels.len(), self.positions.len())));
        }
        if let Some(i) = self.positions.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Annotation {
                line: i + 2,
                message: format!("positions not strictly increasing ({} then {})", self.positions[i], self.positions[i + 1]),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Re-expresses positions at another sampling rate (rounded, duplicates dropped).
    pub fn rescaled(&self, fs_new: f64) -> Self {
        let ratio = fs_new / self.fs_ref;
        let mut positions: Vec<usize> = Vec::with_capacity(self.len());
        let mut labels = Vec::with_capacity(self.len());
        for (&p, &l) in self.positions.iter().zip(&self.labels) {
            let q = (p as f64 * ratio).round() as usize;
            if positions.last().is_some_and(|&last| last >= q) {
                continue;
            }
            positions.push(q);
            labels.push(l);
        }
        Self { positions, labels, fs_ref: fs_new, provenance: self.provenance }
    }

    pub fn wide_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_wide()).count()
    }
}

pub fn encode_annotations(ann: &BeatAnnotation) -> Result<String> {
    ann.validate()?;
    let mut wtr = csv::WriterBuilder::new().has_headers(false).terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for (p, l) in ann.positions.iter().zip(&ann.labels) {
        wtr.write_record([p.to_string().as_str(), l.token()])?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("CSV output is ASCII"))
}

pub fn decode_annotations(text: &str, fs_ref: f64) -> Result<BeatAnnotation> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut positions: Vec<usize> = Vec::new();
    let mut labels = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 1;
        let row = row?;
        if row.len() != 2 {
            return Err(Error::Annotation { line, message: format!("expected 2 fields, found {}", row.len()) });
        }
        let pos: usize =
            row[0].parse().map_err(|_| Error::Annotation { line, message: format!("non-integer sample index {:?}", &row[0]) })?;
        let label = BeatClass::from_token(&row[1])
            .ok_or_else(|| Error::Annotation { line, message: format!("unknown label {:?}", &row[1]) })?;
        if let Some(&prev) = positions.last() {
            if pos <= prev {
                return Err(Error::Annotation { line, message: format!("index {pos} does not follow {prev}") });
            }
        }
        positions.push(pos);
        labels.push(label);
    }
    Ok(BeatAnnotation { positions, labels, fs_ref, provenance: Provenance::Truth })
}

pub fn write_annotations(ann: &BeatAnnotation, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_annotations(ann)?)?;
    Ok(())
}

pub fn read_annotations(path: impl AsRef<Path>, fs_ref: f64) -> Result<BeatAnnotation> {
    decode_annotations(&fs::read_to_string(path)?, fs_ref)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_two_beats() {
        let a = decode_annotations("100,N\n350,W", 250.0).unwrap();
        assert_eq!(a.positions, vec![100, 350]);
        assert_eq!(a.labels, vec![BeatClass::Narrow, BeatClass::Wide]);
    }

    #[test]
    fn rejects_decreasing() {
        let e = decode_annotations("350,N\n100,N", 250.0).unwrap_err();
        assert!(matches!(e, Error::Annotation { line: 2, .. }));
    }

    #[test]
    fn rejects_bad_tokens() {
        assert!(matches!(decode_annotations("10,V\n", 250.0), Err(Error::Annotation { line: 1, .. })));
        assert!(matches!(decode_annotations("1.5,N\n", 250.0), Err(Error::Annotation { line: 1, .. })));
        assert!(matches!(decode_annotations("-3,N\n", 250.0), Err(Error::Annotation { line: 1, .. })));
    }

    #[test]
    fn empty_text_is_empty_annotation() {
        assert!(decode_annotations("", 125.0).unwrap().is_empty());
    }

    #[test]
    fn rescale_halves_positions() {
        let a = BeatAnnotation::new(vec![100, 351], vec![BeatClass::Narrow; 2], 250.0).unwrap();
        let b = a.rescaled(125.0);
        assert_eq!(b.positions, vec![50, 176]);
        assert_eq!(b.fs_ref, 125.0);
    }

    proptest! {
        #[test]
        fn csv_round_trip(gaps in proptest::collection::vec((1usize..5000, any::<bool>()), 0..1000)) {
            let mut pos = 0usize;
            let mut positions = Vec::new();
            let mut labels = Vec::new();
            for (g, w) in gaps {
                pos += g;
                positions.push(pos);
                labels.push(if w { BeatClass::Wide } else { BeatClass::Narrow });
            }
            let a = BeatAnnotation::new(positions, labels, 250.0).unwrap();
            let text = encode_annotations(&a).unwrap();
            let back = decode_annotations(&text, 250.0).unwrap();
            prop_assert_eq!(&back, &a);
            prop_assert_eq!(encode_annotations(&back).unwrap(), text);
        }
    }
}
