//! Reading and writing replica pages on storage sites.

use std::sync::{Arc, Mutex, OnceLock};

use rand::seq::SliceRandom;
use rand::{CryptoRng, Rng, RngCore};
use thiserror::Error;

use super::puzzle::solve_arithmetic_puzzle;
use crate::codec::{encode_payload, generate_key, wrap_page, CodecError};
use crate::fileset::SubPieceRef;
use crate::locator::{FetchOutcome, ReplicaLocator};
use crate::sitehost::{
    page_location, parse_location, valid_title, Challenge, EditRequest, Protection, RefusalReason, SiteError, SiteHost,
};
use crate::status::ProbeOutcome;
use crate::tracker::ReplicaClaim;

static WORDS: &str = include_str!("../../data/words.txt");

/// Title attempts drawn from the word list before falling back to random text.
pub const TITLE_ATTEMPTS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WikiError {
    #[error(transparent)]
    Site(#[from] SiteError),
    #[error("transport: {0}")]
    Transport(String),
}

/// Raw access to a population of storage sites.
pub trait WikiTransport: Sync {
    /// Fetches the rendered page at a full location URL.
    fn fetch(&self, location: &str) -> Result<FetchOutcome, String>;
    fn register(&self, base: &str, site_id: u32, username: &str) -> Result<String, WikiError>;
    fn challenge(&self, base: &str, site_id: u32) -> Result<Challenge, WikiError>;
    fn edit(&self, base: &str, site_id: u32, req: &EditRequest) -> Result<u64, WikiError>;
}

/// Sites hosted in this process.
#[derive(Clone)]
pub struct LocalWiki {
    host: Arc<Mutex<SiteHost>>,
    base: String,
}

impl LocalWiki {
    pub fn new(host: Arc<Mutex<SiteHost>>, base: &str) -> Self {
        LocalWiki { host, base: base.trim_end_matches('/').to_owned() }
    }

    pub fn host(&self) -> &Arc<Mutex<SiteHost>> {
        &self.host
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn check_base(&self, base: &str) -> Result<(), WikiError> {
        if base.trim_end_matches('/') != self.base {
            return Err(WikiError::Transport(format!("no route to {base}")));
        }
        Ok(())
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, SiteHost> {
        self.host.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl WikiTransport for LocalWiki {
    fn fetch(&self, location: &str) -> Result<FetchOutcome, String> {
        let Some((base, site_id, title)) = parse_location(location) else {
            return Ok(FetchOutcome::Missing);
        };
        self.check_base(base).map_err(|e| e.to_string())?;
        Ok(match self.lock().get_page(site_id, title) {
            Ok(html) => FetchOutcome::Page(html),
            Err(SiteError::PageMissing) => FetchOutcome::Missing,
            Err(_) => FetchOutcome::Unreachable,
        })
    }

    fn register(&self, base: &str, site_id: u32, username: &str) -> Result<String, WikiError> {
        self.check_base(base)?;
        Ok(self.lock().register(site_id, username)?)
    }

    fn challenge(&self, base: &str, site_id: u32) -> Result<Challenge, WikiError> {
        self.check_base(base)?;
        Ok(self.lock().challenge(site_id)?)
    }

    fn edit(&self, base: &str, site_id: u32, req: &EditRequest) -> Result<u64, WikiError> {
        self.check_base(base)?;
        Ok(self.lock().edit_page(site_id, req)?)
    }
}

/// Lets any transport serve as the tracker's verification proxy.
pub struct TransportProxy<W>(pub W);

impl<W: WikiTransport> crate::tracker::ReplicaProxy for TransportProxy<W> {
    fn fetch(&mut self, location: &str) -> Result<FetchOutcome, String> {
        self.0.fetch(location)
    }
}

fn word_list() -> &'static [&'static str] {
    static LIST: OnceLock<Vec<&'static str>> = OnceLock::new();
    LIST.get_or_init(|| {
        WORDS.lines().map(str::trim).filter(|w| (3..=12).contains(&w.len()) && valid_title(w)).collect()
    })
}

/// A plausible page title made of two dictionary words.
pub fn word_title<R: Rng + ?Sized>(rng: &mut R) -> String {
    let words = word_list();
    let a = words.choose(rng).expect("word list is not empty");
    let b = words.choose(rng).expect("word list is not empty");
    format!("{a}_{b}")
}

pub fn random_title<R: Rng + ?Sized>(rng: &mut R) -> String {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    (0..12).map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())] as char).collect()
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProduceError {
    #[error("site refuses automated edits: {0}")]
    Refused(RefusalReason),
    #[error(transparent)]
    Wiki(#[from] WikiError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("no free title after {0} attempts")]
    NoFreeTitle(usize),
    #[error("read-back of {location} failed: {outcome:?}")]
    ReadBack { location: String, outcome: ProbeOutcome },
    #[error("sub-piece bytes do not match {0}")]
    WrongBytes(SubPieceRef),
}

/// Where and how to write one replica.
#[derive(Clone, Debug)]
pub struct WriteTarget<'a> {
    pub base: &'a str,
    pub site_id: u32,
    pub protection: Protection,
    pub username: &'a str,
    pub notice: &'a str,
    pub tracking_url: &'a str,
}

/// Encrypts `bytes` under a fresh key, writes the page through the site's
/// gate, reads it back, and returns the claim to report.
pub fn produce_replica<W, R>(
    wiki: &W,
    rng: &mut R,
    target: &WriteTarget<'_>,
    subpiece: &SubPieceRef,
    bytes: &[u8],
) -> Result<ReplicaClaim, ProduceError>
where
    W: WikiTransport + ?Sized,
    R: RngCore + CryptoRng,
{
    if !subpiece.matches(bytes) {
        return Err(ProduceError::WrongBytes(subpiece.clone()));
    }
    match target.protection {
        Protection::Captcha => return Err(ProduceError::Refused(RefusalReason::CaptchaRequired)),
        Protection::Closed => return Err(ProduceError::Refused(RefusalReason::Closed)),
        _ => {}
    }
    let key = generate_key(rng);
    let payload = encode_payload(bytes, &key)?;
    let content = wrap_page(&payload, target.notice, target.tracking_url)?;
    let token = match target.protection {
        Protection::Registration => Some(refusal(wiki.register(target.base, target.site_id, target.username))?),
        _ => None,
    };
    let mut written = None;
    for attempt in 0..=TITLE_ATTEMPTS {
        let title = if attempt < TITLE_ATTEMPTS { word_title(rng) } else { random_title(rng) };
        let mut req = EditRequest { title: title.clone(), content: content.clone(), token: token.clone(), create_only: true, ..Default::default() };
        if target.protection == Protection::Puzzle {
            let challenge = refusal(wiki.challenge(target.base, target.site_id))?;
            req.puzzle_answer = Some(
                solve_arithmetic_puzzle(&challenge.question)
                    .map_err(|_| ProduceError::Refused(RefusalReason::WrongPuzzle))?,
            );
            req.puzzle_id = Some(challenge.puzzle_id);
        }
        match refusal(wiki.edit(target.base, target.site_id, &req)) {
            Ok(_) => {
                written = Some(title);
                break;
            }
            Err(ProduceError::Wiki(WikiError::Site(SiteError::TitleTaken))) => continue,
            Err(e) => return Err(e),
        }
    }
    let title = written.ok_or(ProduceError::NoFreeTitle(TITLE_ATTEMPTS + 1))?;
    let locator = ReplicaLocator {
        location: page_location(target.base, target.site_id, &title),
        key,
        checksum: payload.plaintext_checksum,
        start_marker: payload.start_marker,
        end_marker: payload.end_marker,
    };
    let fetch = wiki.fetch(&locator.location).map_err(WikiError::Transport)?;
    match locator.probe(&fetch) {
        (_, Some(back)) if back == bytes => {}
        (outcome, _) => return Err(ProduceError::ReadBack { location: locator.location, outcome }),
    }
    Ok(ReplicaClaim {
        location: locator.location,
        key: locator.key,
        checksum: locator.checksum,
        start_marker: locator.start_marker,
        end_marker: locator.end_marker,
    })
}

fn refusal<T>(r: Result<T, WikiError>) -> Result<T, ProduceError> {
    r.map_err(|e| match e {
        WikiError::Site(SiteError::Refused(reason)) => ProduceError::Refused(reason),
        other => ProduceError::Wiki(other),
    })
}
