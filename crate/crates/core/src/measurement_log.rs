//! IMA-style measurement list anchored in a PCR bank.
//!
//! Every measured object contributes one [`MeasurementEntry`]. The entry's
//! template digest covers a length-prefixed encoding of the path followed by
//! the file digest, and is folded into a PCR with extend semantics
//! (`new = H(old || template)`). Replaying the list over an all-zero
//! register must reproduce the live register value.
//!
//! Serialized form, one entry per line:
//!
//! ```text
//! <index> <pcr_index> <template_digest_hex> <file_digest_hex> <path>
//! ```

use std::fmt;

use thiserror::Error;

use crate::Digest;

pub const PCR_COUNT: usize = 24;

/// Register conventionally used by IMA.
pub const DEFAULT_MEASUREMENT_PCR: PcrIndex = PcrIndex(10);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MeasurementError {
    #[error("PCR index {0} out of range (0..{PCR_COUNT})")]
    PcrOutOfRange(usize),
    #[error("invalid measured path {0:?}")]
    InvalidPath(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// A register index known to be `< PCR_COUNT`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PcrIndex(u8);

impl PcrIndex {
    pub fn new(index: usize) -> Result<PcrIndex, MeasurementError> {
        if index < PCR_COUNT {
            Ok(PcrIndex(index as u8))
        } else {
            Err(MeasurementError::PcrOutOfRange(index))
        }
    }

    pub fn get(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for PcrIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl TryFrom<usize> for PcrIndex {
    type Error = MeasurementError;

    fn try_from(index: usize) -> Result<Self, Self::Error> {
        PcrIndex::new(index)
    }
}

/// The register file. Values change only through [`PcrBank::extend`].
#[derive(Clone, PartialEq, Eq)]
pub struct PcrBank {
    registers: [Digest; PCR_COUNT],
}

impl Default for PcrBank {
    fn default() -> Self {
        PcrBank::new()
    }
}

impl PcrBank {
    pub fn new() -> PcrBank {
        PcrBank {
            registers: [Digest::ZERO; PCR_COUNT],
        }
    }

    pub fn extend(&mut self, index: usize, digest: &Digest) -> Result<Digest, MeasurementError> {
        let index = PcrIndex::new(index)?;
        let slot = &mut self.registers[index.get()];
        *slot = fold(slot, digest);
        Ok(*slot)
    }

    pub fn read(&self, index: usize) -> Result<Digest, MeasurementError> {
        Ok(self.registers[PcrIndex::new(index)?.get()])
    }

    pub fn registers(&self) -> &[Digest; PCR_COUNT] {
        &self.registers
    }
}

impl fmt::Debug for PcrBank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let touched: Vec<_> = self
            .registers
            .iter()
            .enumerate()
            .filter(|(_, r)| **r != Digest::ZERO)
            .collect();
        f.debug_struct("PcrBank").field("non_zero", &touched).finish()
    }
}

fn fold(register: &Digest, digest: &Digest) -> Digest {
    Digest::of_parts(&[register.as_bytes(), digest.as_bytes()])
}

/// `H(len(path) as u32 BE || path || file_digest)`.
pub fn template_digest(path: &str, file_digest: &Digest) -> Digest {
    let len = (path.len() as u32).to_be_bytes();
    Digest::of_parts(&[&len, path.as_bytes(), file_digest.as_bytes()])
}

fn check_path(path: &str) -> Result<(), MeasurementError> {
    if path.is_empty() || path.contains(['\n', '\r']) || path.len() > u32::MAX as usize {
        return Err(MeasurementError::InvalidPath(path.to_string()));
    }
    Ok(())
}

/// One measured object. Fields are private so the template digest always
/// matches `(path, file_digest)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeasurementEntry {
    index: usize,
    pcr: PcrIndex,
    path: String,
    file_digest: Digest,
    template_digest: Digest,
}

impl MeasurementEntry {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn pcr(&self) -> PcrIndex {
        self.pcr
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn file_digest(&self) -> &Digest {
        &self.file_digest
    }

    pub fn template_digest(&self) -> &Digest {
        &self.template_digest
    }
}

/// Append-only list of measurements.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MeasurementList {
    entries: Vec<MeasurementEntry>,
}

impl MeasurementList {
    pub fn new() -> MeasurementList {
        MeasurementList::default()
    }

    pub fn entries(&self) -> &[MeasurementEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends an entry for an already-computed file digest. Does not touch
    /// any PCR bank; [`measure`] does both.
    pub fn record(
        &mut self,
        pcr: usize,
        path: &str,
        file_digest: Digest,
    ) -> Result<&MeasurementEntry, MeasurementError> {
        let pcr = PcrIndex::new(pcr)?;
        check_path(path)?;
        let entry = MeasurementEntry {
            index: self.entries.len(),
            pcr,
            path: path.to_string(),
            file_digest,
            template_digest: template_digest(path, &file_digest),
        };
        self.entries.push(entry);
        Ok(self.entries.last().expect("just pushed"))
    }

    /// Folds every template digest, in order, over an all-zero register.
    pub fn replay(&self) -> Digest {
        self.entries
            .iter()
            .fold(Digest::ZERO, |acc, e| fold(&acc, &e.template_digest))
    }

    /// Like [`replay`](Self::replay) but only over entries recorded into `pcr`.
    pub fn replay_register(&self, pcr: PcrIndex) -> Digest {
        self.entries
            .iter()
            .filter(|e| e.pcr == pcr)
            .fold(Digest::ZERO, |acc, e| fold(&acc, &e.template_digest))
    }

    pub fn contains_path(&self, path: &str) -> bool {
        self.entries.iter().any(|e| e.path == path)
    }

    pub fn serialize(&self) -> String {
        self.to_string()
    }

    /// Parses the line format produced by [`serialize`](Self::serialize).
    /// Indices must be contiguous from zero and every template digest must
    /// match its `(path, file_digest)`.
    pub fn parse(text: &str) -> Result<MeasurementList, MeasurementError> {
        let mut list = MeasurementList::new();
        for (line_no, line) in text.lines().enumerate() {
            let err = |reason: &str| MeasurementError::Parse {
                line: line_no + 1,
                reason: reason.to_string(),
            };
            let mut fields = line.splitn(5, ' ');
            let (Some(index), Some(pcr), Some(template), Some(file), Some(path)) = (
                fields.next(),
                fields.next(),
                fields.next(),
                fields.next(),
                fields.next(),
            ) else {
                return Err(err("expected five fields"));
            };
            let index: usize = index.parse().map_err(|_| err("bad index"))?;
            if index != list.len() {
                return Err(err("non-contiguous index"));
            }
            let pcr: usize = pcr.parse().map_err(|_| err("bad pcr index"))?;
            let template: Digest = template.parse().map_err(|_| err("bad template digest"))?;
            let file: Digest = file.parse().map_err(|_| err("bad file digest"))?;
            let entry = list.record(pcr, path, file).map_err(|e| err(&e.to_string()))?;
            if entry.template_digest != template {
                return Err(err("template digest does not match path and file digest"));
            }
        }
        Ok(list)
    }
}

impl fmt::Display for MeasurementList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{} {} {} {} {}",
                e.index, e.pcr, e.template_digest, e.file_digest, e.path
            )?;
        }
        Ok(())
    }
}

/// Measures `content` under `path`: appends an entry and extends `pcr` with
/// its template digest. Nothing is modified if `pcr` or `path` is invalid.
pub fn measure(
    list: &mut MeasurementList,
    bank: &mut PcrBank,
    pcr: usize,
    path: &str,
    content: &[u8],
) -> Result<Digest, MeasurementError> {
    PcrIndex::new(pcr)?;
    check_path(path)?;
    let template = *list.record(pcr, path, Digest::of(content))?.template_digest();
    bank.extend(pcr, &template)?;
    Ok(template)
}
