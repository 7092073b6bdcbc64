//! Replica payloads: Blowfish-CBC ciphertext, base64 text, and the
//! marker-delimited page layout that carries it.
//!
//! Page layout: `<notice>\n\n<tracking_url>\n\n<payload>\n`, with the tracking
//! line (and its blank separator) omitted when the URL is empty.

use std::fmt;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use blowfish::Blowfish;
use cbc::cipher::block_padding::NoPadding;
use cbc::cipher::{BlockDecryptMut, BlockEncryptMut, KeyIvInit};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::canonical::sha256_hex;

pub const KEY_LEN: usize = 16;
pub const MARKER_LEN: usize = 16;
const BLOCK: usize = 8;
/// Ciphertext is never shorter than this, so the encoded text is at least
/// 32 characters and the two markers never overlap.
const MIN_CIPHERTEXT: usize = 24;
/// Cap on candidate spans returned by [`extract_payload`].
const MAX_CANDIDATES: usize = 64;

type Encryptor = cbc::Encryptor<Blowfish>;
type Decryptor = cbc::Decryptor<Blowfish>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("payload is empty")]
    EmptyInput,
    #[error("page notice is empty")]
    EmptyNotice,
    #[error("markers must be {MARKER_LEN} characters")]
    BadMarker,
    #[error("start marker not found on page")]
    NotFound,
    #[error("end marker not found after start marker")]
    Truncated,
    #[error("invalid base64: {0}")]
    Base64(String),
    #[error("invalid ciphertext padding")]
    Padding,
    #[error("plaintext checksum mismatch")]
    ChecksumMismatch,
    #[error("invalid replica key: {0}")]
    BadKey(String),
}

/// Per-replica Blowfish key.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ReplicaKey([u8; KEY_LEN]);

impl ReplicaKey {
    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        ReplicaKey(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(text: &str) -> Result<Self, CodecError> {
        let bytes = hex::decode(text).map_err(|e| CodecError::BadKey(e.to_string()))?;
        let arr: [u8; KEY_LEN] = bytes
            .try_into()
            .map_err(|_| CodecError::BadKey(format!("expected {KEY_LEN} bytes")))?;
        Ok(ReplicaKey(arr))
    }

    fn iv(&self) -> [u8; BLOCK] {
        let digest = Sha256::digest(self.0);
        let mut iv = [0u8; BLOCK];
        iv.copy_from_slice(&digest[..BLOCK]);
        iv
    }
}

impl fmt::Debug for ReplicaKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ReplicaKey({})", self.to_hex())
    }
}

impl fmt::Display for ReplicaKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for ReplicaKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ReplicaKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        ReplicaKey::from_hex(&text).map_err(serde::de::Error::custom)
    }
}

pub fn generate_key<R: RngCore + CryptoRng>(rng: &mut R) -> ReplicaKey {
    let mut bytes = [0u8; KEY_LEN];
    rng.fill_bytes(&mut bytes);
    ReplicaKey(bytes)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedPayload {
    pub text: String,
    pub start_marker: String,
    pub end_marker: String,
    pub plaintext_checksum: String,
}

fn pad_len(len: usize) -> usize {
    if len < MIN_CIPHERTEXT {
        MIN_CIPHERTEXT - len
    } else {
        BLOCK - len % BLOCK
    }
}

/// Length of the base64 text produced for a plaintext of `len` bytes.
pub fn encoded_len(len: usize) -> usize {
    (len + pad_len(len)).div_ceil(3) * 4
}

pub fn encode_payload(data: &[u8], key: &ReplicaKey) -> Result<EncodedPayload, CodecError> {
    if data.is_empty() {
        return Err(CodecError::EmptyInput);
    }
    let pad = pad_len(data.len());
    let mut buf = Vec::with_capacity(data.len() + pad);
    buf.extend_from_slice(data);
    buf.resize(data.len() + pad, pad as u8);
    let cipher = Encryptor::new_from_slices(key.as_bytes(), &key.iv()).expect("valid key and iv length");
    let ciphertext = cipher.encrypt_padded_vec_mut::<NoPadding>(&buf);
    let text = STANDARD.encode(ciphertext);
    Ok(EncodedPayload {
        start_marker: text[..MARKER_LEN].to_owned(),
        end_marker: text[text.len() - MARKER_LEN..].to_owned(),
        plaintext_checksum: sha256_hex(data),
        text,
    })
}

pub fn decode_payload(text: &str, key: &ReplicaKey, expected_checksum: &str) -> Result<Vec<u8>, CodecError> {
    let ciphertext = STANDARD.decode(text).map_err(|e| CodecError::Base64(e.to_string()))?;
    if ciphertext.len() < MIN_CIPHERTEXT || ciphertext.len() % BLOCK != 0 {
        return Err(CodecError::Padding);
    }
    let cipher = Decryptor::new_from_slices(key.as_bytes(), &key.iv()).expect("valid key and iv length");
    let mut plain = cipher
        .decrypt_padded_vec_mut::<NoPadding>(&ciphertext)
        .map_err(|_| CodecError::Padding)?;
    let pad = *plain.last().ok_or(CodecError::Padding)? as usize;
    if pad == 0 || pad > plain.len() || plain[plain.len() - pad..].iter().any(|&b| b as usize != pad) {
        return Err(CodecError::Padding);
    }
    plain.truncate(plain.len() - pad);
    if plain.is_empty() || pad_len(plain.len()) != pad {
        return Err(CodecError::Padding);
    }
    if sha256_hex(&plain) != expected_checksum {
        return Err(CodecError::ChecksumMismatch);
    }
    Ok(plain)
}

pub fn wrap_page(payload: &EncodedPayload, notice: &str, tracking_url: &str) -> Result<String, CodecError> {
    if notice.is_empty() {
        return Err(CodecError::EmptyNotice);
    }
    let mut page = String::with_capacity(notice.len() + tracking_url.len() + payload.text.len() + 8);
    page.push_str(notice);
    page.push_str("\n\n");
    if !tracking_url.is_empty() {
        page.push_str(tracking_url);
        page.push_str("\n\n");
    }
    page.push_str(&payload.text);
    page.push('\n');
    Ok(page)
}

/// Every span that starts with `start_marker` and ends with a later
/// `end_marker`, ordered by start then end position.
pub fn extract_payload<'a>(page: &'a str, start_marker: &str, end_marker: &str) -> Result<Vec<&'a str>, CodecError> {
    if start_marker.len() != MARKER_LEN || end_marker.len() != MARKER_LEN {
        return Err(CodecError::BadMarker);
    }
    let starts: Vec<usize> = page.match_indices(start_marker).map(|(i, _)| i).collect();
    if starts.is_empty() {
        return Err(CodecError::NotFound);
    }
    let ends: Vec<usize> = page.match_indices(end_marker).map(|(i, _)| i).collect();
    let mut spans = Vec::new();
    'outer: for &s in &starts {
        for &e in ends.iter().filter(|&&e| e >= s + MARKER_LEN) {
            spans.push(&page[s..e + MARKER_LEN]);
            if spans.len() == MAX_CANDIDATES {
                break 'outer;
            }
        }
    }
    if spans.is_empty() {
        return Err(CodecError::Truncated);
    }
    Ok(spans)
}

/// Extracts and decodes a payload from page text, trying every candidate span.
///
/// Returns the error of the first candidate when none decodes.
pub fn recover_from_page(
    page: &str,
    key: &ReplicaKey,
    checksum: &str,
    start_marker: &str,
    end_marker: &str,
) -> Result<Vec<u8>, CodecError> {
    let candidates = extract_payload(page, start_marker, end_marker)?;
    let mut first_err = None;
    for candidate in candidates {
        match decode_payload(candidate, key, checksum) {
            Ok(bytes) => return Ok(bytes),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    Err(first_err.expect("at least one candidate"))
}
