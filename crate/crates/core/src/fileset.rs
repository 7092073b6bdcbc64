//! Fileset geometry, manifests, splitting into sub-pieces and reassembly.
//!
//! A fileset is the concatenation of its files in listed order. It is cut into
//! fixed-length pieces (the last one may be short) and every piece is cut into
//! fixed-length sub-pieces, which are the unit of replication.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{canonicalize_value, sha256_hex, to_canonical_string};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_EXTENSION: &str = ".graffiti.json";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FilesetError {
    #[error("piece length {piece_length} is not a positive multiple of sub-piece length {subpiece_length}")]
    Geometry { piece_length: u64, subpiece_length: u64 },
    #[error("fileset is empty")]
    EmptyInput,
    #[error("fileset has {actual} bytes but the manifest describes {expected}")]
    LengthMismatch { expected: u64, actual: u64 },
    #[error("missing sub-pieces at ordinals {missing:?}")]
    Incomplete { missing: Vec<u64> },
    #[error("sub-piece {subpiece} does not match its checksum")]
    Corrupt { subpiece: SubPieceRef },
    #[error("sub-piece {0} supplied more than once")]
    Duplicate(SubPieceId),
    #[error("sub-piece {0} is not part of this fileset")]
    OutOfRange(SubPieceId),
    #[error("piece {piece} does not match its manifest checksum")]
    PieceMismatch { piece: u32 },
    #[error("manifest info_hash {stored} does not match computed {computed}")]
    InfoHashMismatch { stored: String, computed: String },
    #[error("malformed manifest: {0}")]
    Malformed(String),
}

/// Piece and sub-piece lengths in bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub piece_length: u64,
    pub subpiece_length: u64,
}

impl Geometry {
    /// 512 KiB pieces, 64 KiB sub-pieces.
    pub const DEFAULT: Geometry = Geometry { piece_length: 524_288, subpiece_length: 65_536 };

    pub fn new(piece_length: u64, subpiece_length: u64) -> Result<Self, FilesetError> {
        let g = Geometry { piece_length, subpiece_length };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), FilesetError> {
        if self.subpiece_length == 0
            || self.piece_length == 0
            || self.piece_length % self.subpiece_length != 0
        {
            return Err(FilesetError::Geometry {
                piece_length: self.piece_length,
                subpiece_length: self.subpiece_length,
            });
        }
        Ok(())
    }

    pub fn subpieces_per_piece(&self) -> u64 {
        self.piece_length / self.subpiece_length
    }

    pub fn piece_count(&self, total: u64) -> u64 {
        total.div_ceil(self.piece_length)
    }

    pub fn ordinal(&self, id: SubPieceId) -> u64 {
        id.piece as u64 * self.subpieces_per_piece() + id.index as u64
    }

    /// Every sub-piece slot of a fileset of `total` bytes, in file order.
    pub fn layout(&self, total: u64) -> Vec<Slot> {
        let mut slots = Vec::new();
        let mut offset = 0u64;
        let mut piece = 0u32;
        while offset < total {
            let piece_end = (offset + self.piece_length).min(total);
            let mut index = 0u32;
            while offset < piece_end {
                let length = self.subpiece_length.min(piece_end - offset);
                slots.push(Slot { id: SubPieceId { piece, index }, offset, length });
                offset += length;
                index += 1;
            }
            piece += 1;
        }
        slots
    }
}

/// Position of a sub-piece within a fileset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubPieceId {
    pub piece: u32,
    pub index: u32,
}

impl fmt::Display for SubPieceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.piece, self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub id: SubPieceId,
    pub offset: u64,
    pub length: u64,
}

/// A sub-piece together with the digest of its plaintext.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubPieceRef {
    pub piece_index: u32,
    pub subpiece_index: u32,
    pub length: u64,
    pub checksum: String,
}

impl SubPieceRef {
    pub fn id(&self) -> SubPieceId {
        SubPieceId { piece: self.piece_index, index: self.subpiece_index }
    }

    pub fn matches(&self, bytes: &[u8]) -> bool {
        bytes.len() as u64 == self.length && sha256_hex(bytes) == self.checksum
    }
}

impl fmt::Display for SubPieceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} bytes)", self.id(), self.length)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub length: u64,
}

/// A file handed to [`build_manifest`].
#[derive(Clone, Copy, Debug)]
pub struct SourceFile<'a> {
    pub path: &'a str,
    pub bytes: &'a [u8],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilesetManifest {
    pub version: u32,
    pub name: String,
    pub files: Vec<FileEntry>,
    pub piece_length: u64,
    pub subpiece_length: u64,
    pub piece_checksums: Vec<String>,
    pub tracker_url: String,
    pub info_hash: String,
}

impl FilesetManifest {
    pub fn geometry(&self) -> Geometry {
        Geometry { piece_length: self.piece_length, subpiece_length: self.subpiece_length }
    }

    pub fn total_length(&self) -> u64 {
        self.files.iter().map(|f| f.length).sum()
    }

    pub fn piece_count(&self) -> u64 {
        self.piece_checksums.len() as u64
    }

    pub fn layout(&self) -> Vec<Slot> {
        self.geometry().layout(self.total_length())
    }

    pub fn subpiece_count(&self) -> usize {
        self.layout().len()
    }

    /// Canonical JSON of every field except `info_hash`.
    fn hash_body(&self) -> String {
        let mut value = serde_json::to_value(self).expect("manifest serializes");
        value.as_object_mut().expect("object").remove("info_hash");
        canonicalize_value(&value)
    }

    pub fn compute_info_hash(&self) -> String {
        sha256_hex(self.hash_body().as_bytes())
    }

    /// The canonical serialized form, as written to `.graffiti.json` files.
    pub fn to_canonical_json(&self) -> String {
        to_canonical_string(self).expect("manifest serializes")
    }

    /// Parses a manifest and checks its invariants, including the info hash.
    pub fn from_json(text: &str) -> Result<Self, FilesetError> {
        let manifest: FilesetManifest =
            serde_json::from_str(text).map_err(|e| FilesetError::Malformed(e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<(), FilesetError> {
        self.geometry().validate()?;
        let total = self.total_length();
        if total == 0 {
            return Err(FilesetError::EmptyInput);
        }
        let pieces = self.geometry().piece_count(total);
        if self.piece_checksums.len() as u64 != pieces {
            return Err(FilesetError::Malformed(format!(
                "{} piece checksums for {} pieces",
                self.piece_checksums.len(),
                pieces
            )));
        }
        let computed = self.compute_info_hash();
        if computed != self.info_hash {
            return Err(FilesetError::InfoHashMismatch { stored: self.info_hash.clone(), computed });
        }
        Ok(())
    }
}

/// Builds the manifest for `files`, concatenated in the given order.
pub fn build_manifest(
    name: &str,
    files: &[SourceFile<'_>],
    geometry: Geometry,
    tracker_url: &str,
) -> Result<FilesetManifest, FilesetError> {
    geometry.validate()?;
    let data: Vec<u8> = files.iter().flat_map(|f| f.bytes.iter().copied()).collect();
    if data.is_empty() {
        return Err(FilesetError::EmptyInput);
    }
    let piece_checksums = data
        .chunks(geometry.piece_length as usize)
        .map(sha256_hex)
        .collect();
    let mut manifest = FilesetManifest {
        version: MANIFEST_VERSION,
        name: name.to_owned(),
        files: files
            .iter()
            .map(|f| FileEntry { path: f.path.to_owned(), length: f.bytes.len() as u64 })
            .collect(),
        piece_length: geometry.piece_length,
        subpiece_length: geometry.subpiece_length,
        piece_checksums,
        tracker_url: tracker_url.to_owned(),
        info_hash: String::new(),
    };
    manifest.info_hash = manifest.compute_info_hash();
    Ok(manifest)
}

/// Cuts `data` into sub-pieces in ordinal order.
pub fn split<'a>(
    data: &'a [u8],
    manifest: &FilesetManifest,
) -> Result<Vec<(SubPieceRef, &'a [u8])>, FilesetError> {
    let expected = manifest.total_length();
    if data.len() as u64 != expected {
        return Err(FilesetError::LengthMismatch { expected, actual: data.len() as u64 });
    }
    Ok(manifest
        .layout()
        .into_iter()
        .map(|slot| {
            let block = &data[slot.offset as usize..(slot.offset + slot.length) as usize];
            let subpiece = SubPieceRef {
                piece_index: slot.id.piece,
                subpiece_index: slot.id.index,
                length: slot.length,
                checksum: sha256_hex(block),
            };
            (subpiece, block)
        })
        .collect())
}

/// Reassembles a fileset from verified blocks.
///
/// Blocks are checked against their own checksums first, then completeness,
/// then every piece against the manifest.
pub fn assemble(
    blocks: &BTreeMap<SubPieceRef, Vec<u8>>,
    manifest: &FilesetManifest,
) -> Result<Vec<u8>, FilesetError> {
    let layout = manifest.layout();
    let geometry = manifest.geometry();
    let mut by_id: BTreeMap<SubPieceId, &[u8]> = BTreeMap::new();
    for (subpiece, bytes) in blocks {
        let id = subpiece.id();
        let Some(slot) = layout.get(geometry.ordinal(id) as usize).filter(|s| s.id == id) else {
            return Err(FilesetError::OutOfRange(id));
        };
        if slot.length != subpiece.length || !subpiece.matches(bytes) {
            return Err(FilesetError::Corrupt { subpiece: subpiece.clone() });
        }
        if by_id.insert(id, bytes).is_some() {
            return Err(FilesetError::Duplicate(id));
        }
    }
    let missing: Vec<u64> = layout
        .iter()
        .filter(|slot| !by_id.contains_key(&slot.id))
        .map(|slot| geometry.ordinal(slot.id))
        .collect();
    if !missing.is_empty() {
        return Err(FilesetError::Incomplete { missing });
    }
    let mut out = Vec::with_capacity(manifest.total_length() as usize);
    for bytes in by_id.values() {
        out.extend_from_slice(bytes);
    }
    for (piece, chunk) in out.chunks(manifest.piece_length as usize).enumerate() {
        if sha256_hex(chunk) != manifest.piece_checksums[piece] {
            return Err(FilesetError::PieceMismatch { piece: piece as u32 });
        }
    }
    Ok(out)
}

/// Cuts assembled fileset bytes back into the manifest's files.
pub fn split_files<'a, 'm>(
    data: &'a [u8],
    manifest: &'m FilesetManifest,
) -> Result<Vec<(&'m str, &'a [u8])>, FilesetError> {
    let expected = manifest.total_length();
    if data.len() as u64 != expected {
        return Err(FilesetError::LengthMismatch { expected, actual: data.len() as u64 });
    }
    let mut offset = 0usize;
    Ok(manifest
        .files
        .iter()
        .map(|f| {
            let part = &data[offset..offset + f.length as usize];
            offset += f.length as usize;
            (f.path.as_str(), part)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(len: usize) -> Vec<u8> {
        (0..len).map(|i| (i * 31 % 251) as u8).collect()
    }

    fn manifest_for(data: &[u8]) -> FilesetManifest {
        build_manifest(
            "sample",
            &[SourceFile { path: "sample.iso", bytes: data }],
            Geometry::DEFAULT,
            "http://tracker.test",
        )
        .unwrap()
    }

    #[test]
    fn one_and_a_half_mib_has_three_pieces_of_eight() {
        let data = pattern(1_572_864);
        let m = manifest_for(&data);
        assert_eq!(m.piece_count(), 3);
        let layout = m.layout();
        assert_eq!(layout.len(), 24);
        assert!(layout.iter().all(|s| s.length == 65_536));
    }

    #[test]
    fn short_last_piece() {
        let data = pattern(600_000);
        let m = manifest_for(&data);
        assert_eq!(m.piece_count(), 2);
        let last: Vec<u64> = m.layout().iter().filter(|s| s.id.piece == 1).map(|s| s.length).collect();
        assert_eq!(last, vec![65_536, 10_176]);
        let first_piece: u64 = m.layout().iter().filter(|s| s.id.piece == 0).map(|s| s.length).sum();
        assert_eq!(first_piece, 524_288);
    }

    #[test]
    fn single_subpiece_file() {
        let data = pattern(65_536);
        let m = manifest_for(&data);
        let parts = split(&data, &m).unwrap();
        assert_eq!(m.piece_count(), 1);
        assert_eq!(parts.len(), 1);
    }

    #[test]
    fn deterministic_manifest() {
        let data = pattern(100_000);
        let a = manifest_for(&data);
        let b = manifest_for(&data);
        assert_eq!(a.to_canonical_json(), b.to_canonical_json());
        assert_eq!(a.info_hash, b.info_hash);
    }

    #[test]
    fn geometry_and_empty_errors() {
        let data = pattern(10);
        let files = [SourceFile { path: "a", bytes: &data }];
        assert!(matches!(
            build_manifest("x", &files, Geometry { piece_length: 100, subpiece_length: 30 }, ""),
            Err(FilesetError::Geometry { .. })
        ));
        assert!(matches!(
            build_manifest("x", &[SourceFile { path: "a", bytes: &[] }], Geometry::DEFAULT, ""),
            Err(FilesetError::EmptyInput)
        ));
    }

    #[test]
    fn split_rejects_wrong_length() {
        let data = pattern(1000);
        let m = manifest_for(&data);
        assert_eq!(
            split(&data[..999], &m).unwrap_err(),
            FilesetError::LengthMismatch { expected: 1000, actual: 999 }
        );
    }

    #[test]
    fn withheld_block_is_named() {
        let data = pattern(1_572_864);
        let m = manifest_for(&data);
        let mut blocks: BTreeMap<_, _> =
            split(&data, &m).unwrap().into_iter().map(|(r, b)| (r, b.to_vec())).collect();
        let victim = blocks.keys().nth(13).unwrap().clone();
        blocks.remove(&victim);
        assert_eq!(assemble(&blocks, &m).unwrap_err(), FilesetError::Incomplete { missing: vec![13] });
    }

    #[test]
    fn flipped_block_is_named() {
        let data = pattern(300_000);
        let m = manifest_for(&data);
        let mut blocks: BTreeMap<_, _> =
            split(&data, &m).unwrap().into_iter().map(|(r, b)| (r, b.to_vec())).collect();
        let victim = blocks.keys().nth(2).unwrap().clone();
        blocks.get_mut(&victim).unwrap()[17] ^= 0x04;
        assert_eq!(assemble(&blocks, &m).unwrap_err(), FilesetError::Corrupt { subpiece: victim });
    }

    #[test]
    fn tampered_manifest_fails_info_hash() {
        let data = pattern(5000);
        let mut m = manifest_for(&data);
        m.tracker_url = "http://elsewhere".into();
        let text = serde_json::to_string(&m).unwrap();
        assert!(matches!(FilesetManifest::from_json(&text), Err(FilesetError::InfoHashMismatch { .. })));
    }

    #[test]
    fn multi_file_concatenates_in_order() {
        let a = pattern(70_000);
        let b: Vec<u8> = pattern(20_000).into_iter().rev().collect();
        let m = build_manifest(
            "pair",
            &[SourceFile { path: "a", bytes: &a }, SourceFile { path: "b", bytes: &b }],
            Geometry::new(131_072, 65_536).unwrap(),
            "",
        )
        .unwrap();
        let joined = [a.as_slice(), b.as_slice()].concat();
        let blocks = split(&joined, &m).unwrap().into_iter().map(|(r, b)| (r, b.to_vec())).collect();
        assert_eq!(assemble(&blocks, &m).unwrap(), joined);
    }
}
