//! A population of wiki-like mock storage sites.
//!
//! Each site has an edit gate (its protection scheme), a page store with full
//! revision history, a recent-changes feed, and optional owner-inactivity
//! lockdown. Moderation applies daily removal, mutation and site-death
//! hazards under the caller's clock and random source.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::HazardModel;
use crate::{Timestamp, DAY, MINUTE};

pub const PUZZLE_TTL: Timestamp = 10 * MINUTE;
pub const DEFAULT_RECENT_WINDOW_DAYS: u32 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protection {
    Anonymous,
    Registration,
    Puzzle,
    Captcha,
    Closed,
}

impl Protection {
    pub const ALL: [Protection; 5] = [
        Protection::Anonymous,
        Protection::Registration,
        Protection::Puzzle,
        Protection::Captcha,
        Protection::Closed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Protection::Anonymous => "anonymous",
            Protection::Registration => "registration",
            Protection::Puzzle => "puzzle",
            Protection::Captcha => "captcha",
            Protection::Closed => "closed",
        }
    }

    /// Whether an automated client can get past this gate at all.
    pub fn is_writable(self) -> bool {
        matches!(self, Protection::Anonymous | Protection::Registration | Protection::Puzzle)
    }
}

impl fmt::Display for Protection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Protection::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown protection `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainClass {
    Com,
    Edu,
    Org,
    UsOther,
    NonUsOther,
}

impl DomainClass {
    pub const ALL: [DomainClass; 5] =
        [DomainClass::Com, DomainClass::Edu, DomainClass::Org, DomainClass::UsOther, DomainClass::NonUsOther];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DomainClass::Com => "com",
            DomainClass::Edu => "edu",
            DomainClass::Org => "org",
            DomainClass::UsOther => "us_other",
            DomainClass::NonUsOther => "non_us_other",
        }
    }

    fn suffixes(self) -> &'static [&'static str] {
        match self {
            DomainClass::Com => &["com"],
            DomainClass::Edu => &["edu"],
            DomainClass::Org => &["org"],
            DomainClass::UsOther => &["net", "us", "info", "gov"],
            DomainClass::NonUsOther => &["de", "fr", "jp", "nl", "co.uk", "ru", "br", "it"],
        }
    }
}

/// Relative weights of the domain classes, in `DomainClass::ALL` order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMix(pub [f64; 5]);

impl Default for DomainMix {
    fn default() -> Self {
        DomainMix([42.5, 3.2, 24.1, 14.0, 16.1])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SitePolicies {
    pub lockdown_after_days: Option<u32>,
    pub recent_changes_window_days: u32,
}

/// How many sites of each protection class to create.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationSpec {
    pub anonymous: u32,
    pub registration: u32,
    pub puzzle: u32,
    pub captcha: u32,
    pub closed: u32,
    pub domain_mix: DomainMix,
    pub lockdown_after_days: Option<u32>,
    pub recent_changes_window_days: u32,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        PopulationSpec {
            anonymous: 0,
            registration: 0,
            puzzle: 0,
            captcha: 0,
            closed: 0,
            domain_mix: DomainMix::default(),
            lockdown_after_days: None,
            recent_changes_window_days: DEFAULT_RECENT_WINDOW_DAYS,
        }
    }
}

impl PopulationSpec {
    pub fn with_counts(anonymous: u32, registration: u32, puzzle: u32) -> Self {
        PopulationSpec { anonymous, registration, puzzle, ..Default::default() }
    }

    /// The sites used in the long-running deployment.
    pub fn experiment() -> Self {
        Self::with_counts(3_161, 2_347, 138)
    }

    /// 40 anonymous, 15 registration, 5 puzzle.
    pub fn desk() -> Self {
        Self::with_counts(40, 15, 5)
    }

    pub fn total(&self) -> u32 {
        self.anonymous + self.registration + self.puzzle + self.captcha + self.closed
    }

    fn count(&self, p: Protection) -> u32 {
        match p {
            Protection::Anonymous => self.anonymous,
            Protection::Registration => self.registration,
            Protection::Puzzle => self.puzzle,
            Protection::Captcha => self.captcha,
            Protection::Closed => self.closed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Revision {
    pub revision_id: u64,
    pub timestamp: Timestamp,
    pub author: String,
    pub content: String,
    pub is_reverted: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Page {
    pub created_at: Timestamp,
    pub revisions: Vec<Revision>,
}

impl Page {
    pub fn current(&self) -> Option<&Revision> {
        self.revisions.iter().rev().find(|r| !r.is_reverted)
    }

    fn last_edit(&self) -> Timestamp {
        self.revisions.last().map_or(self.created_at, |r| r.timestamp)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteRecord {
    pub site_id: u32,
    pub hostname: String,
    pub protection: Protection,
    pub domain_class: DomainClass,
    pub last_owner_activity: Timestamp,
    pub policies: SitePolicies,
    pub alive: bool,
    pub pages: BTreeMap<String, Page>,
    next_revision: u64,
}

impl SiteRecord {
    /// Whether an automated client could place a page here at `now`.
    pub fn accepts_writes(&self, now: Timestamp) -> bool {
        self.alive && self.protection.is_writable() && !self.locked_down(now)
    }

    fn locked_down(&self, now: Timestamp) -> bool {
        self.policies
            .lockdown_after_days
            .is_some_and(|days| now - self.last_owner_activity > days as Timestamp * DAY)
    }
}

/// Builds a site population; a pure function of `(spec, seed)`.
pub fn create_population(spec: &PopulationSpec, seed: u64) -> Vec<SiteRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = WeightedIndex::new(spec.domain_mix.0).expect("domain mix has a positive weight");
    let mut sites = Vec::with_capacity(spec.total() as usize);
    for protection in Protection::ALL {
        for _ in 0..spec.count(protection) {
            let site_id = sites.len() as u32;
            let domain_class = DomainClass::ALL[weights.sample(&mut rng)];
            let suffixes = domain_class.suffixes();
            let suffix = suffixes[rng.gen_range(0..suffixes.len())];
            // Owners went quiet at least three months before deployment.
            let idle_days: i64 = rng.gen_range(90..=365);
            sites.push(SiteRecord {
                site_id,
                hostname: format!("wiki{site_id:05}.example.{suffix}"),
                protection,
                domain_class,
                last_owner_activity: -idle_days * DAY,
                policies: SitePolicies {
                    lockdown_after_days: spec.lockdown_after_days,
                    recent_changes_window_days: spec.recent_changes_window_days,
                },
                alive: true,
                pages: BTreeMap::new(),
                next_revision: 1,
            });
        }
    }
    sites
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Error)]
#[serde(rename_all = "snake_case")]
pub enum RefusalReason {
    #[error("an account is required to edit")]
    NeedsAccount,
    #[error("puzzle answer missing or wrong")]
    WrongPuzzle,
    #[error("a CAPTCHA must be solved to edit")]
    CaptchaRequired,
    #[error("editing is locked after owner inactivity")]
    LockedDown,
    #[error("site is not publicly modifiable")]
    Closed,
}

impl RefusalReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RefusalReason::NeedsAccount => "needs_account",
            RefusalReason::WrongPuzzle => "wrong_puzzle",
            RefusalReason::CaptchaRequired => "captcha_required",
            RefusalReason::LockedDown => "locked_down",
            RefusalReason::Closed => "closed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum SiteError {
    #[error("no site {0}")]
    NoSuchSite(u32),
    #[error("site is unreachable")]
    SiteDown,
    #[error("page not found")]
    PageMissing,
    #[error("title already exists")]
    TitleTaken,
    #[error("invalid title `{0}`")]
    InvalidTitle(String),
    #[error("edit refused: {0}")]
    Refused(RefusalReason),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRequest {
    pub title: String,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub puzzle_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub puzzle_answer: Option<i64>,
    /// Refuse with `TitleTaken` instead of appending to an existing page.
    #[serde(default)]
    pub create_only: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Challenge {
    pub puzzle_id: u64,
    pub question: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecentChange {
    pub title: String,
    pub revision_id: u64,
    pub timestamp: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModerationEvent {
    PageRemoved { site_id: u32, title: String, at: Timestamp },
    PageChanged { site_id: u32, title: String, revision_id: u64, at: Timestamp },
    SiteDied { site_id: u32, at: Timestamp },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteSummary {
    pub site_id: u32,
    pub hostname: String,
    pub protection: Protection,
    pub domain_class: DomainClass,
    pub alive: bool,
    pub pages: usize,
}

#[derive(Clone, Debug)]
struct Account {
    site_id: u32,
    username: String,
}

#[derive(Clone, Debug)]
struct PendingPuzzle {
    site_id: u32,
    answer: i64,
    issued_at: Timestamp,
}

pub fn valid_title(title: &str) -> bool {
    !title.is_empty()
        && title.len() <= 64
        && title.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

/// Minimal HTML rendering of a page body.
pub fn render_html(title: &str, content: &str) -> String {
    let mut escaped = String::with_capacity(content.len() + 16);
    for ch in content.chars() {
        match ch {
            '&' => escaped.push_str("&amp;"),
            '<' => escaped.push_str("&lt;"),
            '>' => escaped.push_str("&gt;"),
            c => escaped.push(c),
        }
    }
    format!(
        "<!DOCTYPE html>\n<html><head><title>{title}</title></head>\n<body><h1 id=\"firstHeading\">{title}</h1>\n<div id=\"mw-content-text\"><pre>{escaped}</pre></div>\n<div id=\"footer\">Powered by a wiki engine</div></body></html>\n"
    )
}

/// All mock sites plus the host-wide clock, account and puzzle tables.
#[derive(Clone, Debug)]
pub struct SiteHost {
    sites: Vec<SiteRecord>,
    now: Timestamp,
    accounts: BTreeMap<String, Account>,
    puzzles: BTreeMap<u64, PendingPuzzle>,
    next_puzzle: u64,
    rng: ChaCha8Rng,
    events: Vec<ModerationEvent>,
}

impl SiteHost {
    pub fn new(sites: Vec<SiteRecord>, seed: u64) -> Self {
        SiteHost {
            sites,
            now: 0,
            accounts: BTreeMap::new(),
            puzzles: BTreeMap::new(),
            next_puzzle: 1,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5173_1e57),
            events: Vec::new(),
        }
    }

    pub fn from_spec(spec: &PopulationSpec, seed: u64) -> Self {
        Self::new(create_population(spec, seed), seed)
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn set_now(&mut self, now: Timestamp) {
        self.now = now;
    }

    pub fn advance(&mut self, seconds: Timestamp) {
        self.now += seconds;
    }

    pub fn sites(&self) -> &[SiteRecord] {
        &self.sites
    }

    pub fn site(&self, site_id: u32) -> Result<&SiteRecord, SiteError> {
        self.sites.get(site_id as usize).ok_or(SiteError::NoSuchSite(site_id))
    }

    fn site_mut(&mut self, site_id: u32) -> Result<&mut SiteRecord, SiteError> {
        self.sites.get_mut(site_id as usize).ok_or(SiteError::NoSuchSite(site_id))
    }

    fn live_site(&self, site_id: u32) -> Result<&SiteRecord, SiteError> {
        let site = self.site(site_id)?;
        if !site.alive {
            return Err(SiteError::SiteDown);
        }
        Ok(site)
    }

    pub fn events(&self) -> &[ModerationEvent] {
        &self.events
    }

    pub fn summary(&self) -> Vec<SiteSummary> {
        self.sites
            .iter()
            .map(|s| SiteSummary {
                site_id: s.site_id,
                hostname: s.hostname.clone(),
                protection: s.protection,
                domain_class: s.domain_class,
                alive: s.alive,
                pages: s.pages.len(),
            })
            .collect()
    }

    /// Opens an account; there is no CAPTCHA or e-mail step.
    pub fn register(&mut self, site_id: u32, username: &str) -> Result<String, SiteError> {
        let site = self.live_site(site_id)?;
        if site.protection == Protection::Closed {
            return Err(SiteError::Refused(RefusalReason::Closed));
        }
        if site.protection == Protection::Captcha {
            return Err(SiteError::Refused(RefusalReason::CaptchaRequired));
        }
        let token = format!("tok-{site_id}-{:016x}", self.rng.gen::<u64>());
        self.accounts.insert(token.clone(), Account { site_id, username: username.to_owned() });
        Ok(token)
    }

    /// Issues an arithmetic challenge of the form `What is A OP B?`.
    pub fn challenge(&mut self, site_id: u32) -> Result<Challenge, SiteError> {
        self.live_site(site_id)?;
        let a: i64 = self.rng.gen_range(1..=20);
        let b: i64 = self.rng.gen_range(1..=20);
        let (symbol, answer) = match self.rng.gen_range(0..3) {
            0 => ('+', a + b),
            1 => ('\u{2212}', a - b),
            _ => ('\u{00d7}', a * b),
        };
        let puzzle_id = self.next_puzzle;
        self.next_puzzle += 1;
        self.puzzles.insert(puzzle_id, PendingPuzzle { site_id, answer, issued_at: self.now });
        Ok(Challenge { puzzle_id, question: format!("What is {a} {symbol} {b}?") })
    }

    /// Applies an edit through the site's protection gate.
    pub fn edit_page(&mut self, site_id: u32, req: &EditRequest) -> Result<u64, SiteError> {
        if !valid_title(&req.title) {
            return Err(SiteError::InvalidTitle(req.title.clone()));
        }
        let now = self.now;
        let site = self.live_site(site_id)?;
        let (protection, locked, exists) = (site.protection, site.locked_down(now), site.pages.contains_key(&req.title));
        let author = match protection {
            Protection::Closed => return Err(SiteError::Refused(RefusalReason::Closed)),
            Protection::Captcha => return Err(SiteError::Refused(RefusalReason::CaptchaRequired)),
            _ if locked => return Err(SiteError::Refused(RefusalReason::LockedDown)),
            Protection::Anonymous => "anonymous".to_owned(),
            Protection::Registration => match req.token.as_ref().and_then(|t| self.accounts.get(t)) {
                Some(acct) if acct.site_id == site_id => acct.username.clone(),
                _ => return Err(SiteError::Refused(RefusalReason::NeedsAccount)),
            },
            Protection::Puzzle => {
                // A challenge is good for one attempt.
                let pending = req.puzzle_id.and_then(|id| self.puzzles.remove(&id));
                let solved = pending.zip(req.puzzle_answer).is_some_and(|(p, answer)| {
                    p.site_id == site_id && now - p.issued_at <= PUZZLE_TTL && p.answer == answer
                });
                if !solved {
                    return Err(SiteError::Refused(RefusalReason::WrongPuzzle));
                }
                "anonymous".to_owned()
            }
        };
        if req.create_only && exists {
            return Err(SiteError::TitleTaken);
        }
        let site = self.site_mut(site_id)?;
        Ok(append_revision(site, &req.title, author, req.content.clone(), now))
    }

    pub fn get_page(&self, site_id: u32, title: &str) -> Result<String, SiteError> {
        let site = self.live_site(site_id)?;
        let page = site.pages.get(title).ok_or(SiteError::PageMissing)?;
        let rev = page.current().ok_or(SiteError::PageMissing)?;
        Ok(render_html(title, &rev.content))
    }

    /// Raw content of the current revision, without HTML.
    pub fn page_content(&self, site_id: u32, title: &str) -> Result<&str, SiteError> {
        let site = self.live_site(site_id)?;
        let page = site.pages.get(title).ok_or(SiteError::PageMissing)?;
        Ok(&page.current().ok_or(SiteError::PageMissing)?.content)
    }

    pub fn get_history(&self, site_id: u32, title: &str) -> Result<Vec<Revision>, SiteError> {
        let site = self.live_site(site_id)?;
        let page = site.pages.get(title).ok_or(SiteError::PageMissing)?;
        Ok(page.revisions.clone())
    }

    /// Revisions younger than the site's recent-changes window, newest first.
    pub fn recent_changes(&self, site_id: u32, now: Timestamp) -> Result<Vec<RecentChange>, SiteError> {
        let site = self.live_site(site_id)?;
        let window = site.policies.recent_changes_window_days as Timestamp * DAY;
        let mut out: Vec<RecentChange> = site
            .pages
            .iter()
            .flat_map(|(title, page)| {
                page.revisions.iter().filter(move |r| now - r.timestamp < window).map(move |r| RecentChange {
                    title: title.clone(),
                    revision_id: r.revision_id,
                    timestamp: r.timestamp,
                })
            })
            .collect();
        out.sort_by(|a, b| b.revision_id.cmp(&a.revision_id));
        Ok(out)
    }

    /// Owner rollback: flags the current revision as reverted.
    pub fn revert_latest(&mut self, site_id: u32, title: &str) -> Result<(), SiteError> {
        let now = self.now;
        let site = self.site_mut(site_id)?;
        if !site.alive {
            return Err(SiteError::SiteDown);
        }
        site.last_owner_activity = now;
        let page = site.pages.get_mut(title).ok_or(SiteError::PageMissing)?;
        let rev = page.revisions.iter_mut().rev().find(|r| !r.is_reverted).ok_or(SiteError::PageMissing)?;
        rev.is_reverted = true;
        Ok(())
    }

    /// Owner deletes the whole page, history included.
    pub fn delete_page(&mut self, site_id: u32, title: &str) -> Result<(), SiteError> {
        let now = self.now;
        let site = self.site_mut(site_id)?;
        if !site.alive {
            return Err(SiteError::SiteDown);
        }
        site.last_owner_activity = now;
        site.pages.remove(title).map(|_| ()).ok_or(SiteError::PageMissing)
    }

    /// Takes a site offline for good.
    pub fn kill_site(&mut self, site_id: u32) -> Result<(), SiteError> {
        self.site_mut(site_id)?.alive = false;
        Ok(())
    }

    pub fn touch_owner(&mut self, site_id: u32, at: Timestamp) -> Result<(), SiteError> {
        self.site_mut(site_id)?.last_owner_activity = at;
        Ok(())
    }

    /// One day of moderation for one site.
    ///
    /// The site may die first; otherwise each page faces the removal hazard for
    /// its age (boosted while visible in recent changes), then the mutation
    /// hazard.
    pub fn moderate<R: Rng + ?Sized>(
        &mut self,
        site_id: u32,
        now: Timestamp,
        rng: &mut R,
        hazard: &HazardModel,
    ) -> Result<Vec<ModerationEvent>, SiteError> {
        let site = self.sites.get_mut(site_id as usize).ok_or(SiteError::NoSuchSite(site_id))?;
        let mut events = Vec::new();
        if !site.alive {
            return Ok(events);
        }
        let day = (now.div_euclid(DAY) + 1).max(1) as u32;
        if rng.gen_bool(hazard.site_death(day)) {
            site.alive = false;
            events.push(ModerationEvent::SiteDied { site_id, at: now });
            self.events.extend(events.iter().cloned());
            return Ok(events);
        }
        let window = site.policies.recent_changes_window_days as Timestamp * DAY;
        let titles: Vec<String> = site.pages.keys().cloned().collect();
        for title in titles {
            let page = &site.pages[&title];
            let age_day = ((now - page.created_at).div_euclid(DAY) + 1).max(1) as u32;
            let in_window = now - page.last_edit() < window;
            let h = hazard.removal(site.protection, site.domain_class, age_day, in_window);
            if rng.gen_bool(h) {
                site.pages.remove(&title);
                events.push(ModerationEvent::PageRemoved { site_id, title, at: now });
            } else if hazard.mutation > 0.0 && rng.gen_bool(hazard.mutation) {
                let content = page.current().map(|r| r.content.clone()).unwrap_or_default();
                let mutated = mutate_content(&content);
                let revision_id = append_revision(site, &title, "moderator".into(), mutated, now);
                events.push(ModerationEvent::PageChanged { site_id, title, revision_id, at: now });
            }
        }
        self.events.extend(events.iter().cloned());
        Ok(events)
    }

    /// Moderates every site in id order.
    pub fn moderate_all<R: Rng + ?Sized>(&mut self, now: Timestamp, rng: &mut R, hazard: &HazardModel) -> Vec<ModerationEvent> {
        let mut all = Vec::new();
        for id in 0..self.sites.len() as u32 {
            all.extend(self.moderate(id, now, rng, hazard).expect("site exists"));
        }
        all
    }
}

fn append_revision(site: &mut SiteRecord, title: &str, author: String, content: String, now: Timestamp) -> u64 {
    let revision_id = site.next_revision;
    site.next_revision += 1;
    let page = site.pages.entry(title.to_owned()).or_insert_with(|| Page { created_at: now, revisions: Vec::new() });
    page.revisions.push(Revision { revision_id, timestamp: now, author, content, is_reverted: false });
    revision_id
}

/// Replaces the middle of the longest line with filler, the way a spam
/// cleanup or a partial blanking would.
fn mutate_content(content: &str) -> String {
    let Some((idx, line)) = content.lines().enumerate().max_by_key(|(_, l)| l.len()) else {
        return "[content removed]".into();
    };
    let cut = line.len() / 2;
    let mut lines: Vec<String> = content.lines().map(str::to_owned).collect();
    let replaced = format!("{}[content removed]{}", &line[..cut / 2], &line[cut + cut / 2..]);
    lines[idx] = replaced;
    lines.join("\n")
}

/// `"<base>/site/<id>/wiki/<title>"`.
pub fn page_location(base: &str, site_id: u32, title: &str) -> String {
    format!("{}/site/{site_id}/wiki/{title}", base.trim_end_matches('/'))
}

/// Splits a page location into `(base, site_id, title)`.
pub fn parse_location(location: &str) -> Option<(&str, u32, &str)> {
    let idx = location.rfind("/site/")?;
    let (base, rest) = location.split_at(idx);
    let mut parts = rest["/site/".len()..].splitn(3, '/');
    let site_id = parts.next()?.parse().ok()?;
    if parts.next()? != "wiki" {
        return None;
    }
    let title = parts.next()?;
    valid_title(title).then_some((base, site_id, title))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn host() -> SiteHost {
        SiteHost::from_spec(&PopulationSpec { captcha: 1, closed: 1, ..PopulationSpec::desk() }, 7)
    }

    fn first(host: &SiteHost, p: Protection) -> u32 {
        host.sites().iter().find(|s| s.protection == p).unwrap().site_id
    }

    fn edit(title: &str, content: &str) -> EditRequest {
        EditRequest { title: title.into(), content: content.into(), ..Default::default() }
    }

    #[test]
    fn experiment_population_counts() {
        let sites = create_population(&PopulationSpec::experiment(), 1);
        assert_eq!(sites.len(), 5_646);
        let count = |p| sites.iter().filter(|s| s.protection == p).count();
        assert_eq!(count(Protection::Anonymous), 3_161);
        assert_eq!(count(Protection::Registration), 2_347);
        assert_eq!(count(Protection::Puzzle), 138);
        // Domain shares follow the configured mix.
        let com = sites.iter().filter(|s| s.domain_class == DomainClass::Com).count() as f64 / 5_646.0;
        let edu = sites.iter().filter(|s| s.domain_class == DomainClass::Edu).count() as f64 / 5_646.0;
        assert!((com - 0.425).abs() < 0.03, "com share {com}");
        assert!((edu - 0.032).abs() < 0.01, "edu share {edu}");
    }

    #[test]
    fn desk_population_is_seed_deterministic() {
        let a = create_population(&PopulationSpec::desk(), 7);
        let b = create_population(&PopulationSpec::desk(), 7);
        assert_eq!(a.len(), 60);
        assert_eq!(a, b);
        assert_ne!(a, create_population(&PopulationSpec::desk(), 8));
    }

    #[test]
    fn anonymous_edit_gets_revision_one() {
        let mut h = host();
        let id = first(&h, Protection::Anonymous);
        assert_eq!(h.edit_page(id, &edit("apple", "hi")).unwrap(), 1);
        assert!(h.get_page(id, "apple").unwrap().contains("hi"));
    }

    #[test]
    fn registration_gate() {
        let mut h = host();
        let id = first(&h, Protection::Registration);
        assert_eq!(h.edit_page(id, &edit("pear", "x")), Err(SiteError::Refused(RefusalReason::NeedsAccount)));
        let token = h.register(id, "bot").unwrap();
        let req = EditRequest { token: Some(token.clone()), ..edit("pear", "x") };
        assert_eq!(h.edit_page(id, &req).unwrap(), 1);
        // Tokens are per site.
        let other = h.sites().iter().filter(|s| s.protection == Protection::Registration).nth(1).unwrap().site_id;
        let req = EditRequest { token: Some(token), ..edit("pear", "x") };
        assert_eq!(h.edit_page(other, &req), Err(SiteError::Refused(RefusalReason::NeedsAccount)));
    }

    #[test]
    fn puzzle_gate_and_expiry() {
        let mut h = host();
        let id = first(&h, Protection::Puzzle);
        let c = h.challenge(id).unwrap();
        let answer = crate::client::solve_arithmetic_puzzle(&c.question).unwrap();
        let ok = EditRequest { puzzle_id: Some(c.puzzle_id), puzzle_answer: Some(answer), ..edit("plum", "x") };
        assert!(h.edit_page(id, &ok).is_ok());
        // Replaying a consumed challenge fails.
        assert_eq!(h.edit_page(id, &ok), Err(SiteError::Refused(RefusalReason::WrongPuzzle)));

        let c = h.challenge(id).unwrap();
        let answer = crate::client::solve_arithmetic_puzzle(&c.question).unwrap();
        let wrong = EditRequest { puzzle_id: Some(c.puzzle_id), puzzle_answer: Some(answer + 1), ..edit("plum", "x") };
        assert_eq!(h.edit_page(id, &wrong), Err(SiteError::Refused(RefusalReason::WrongPuzzle)));

        let c = h.challenge(id).unwrap();
        let answer = crate::client::solve_arithmetic_puzzle(&c.question).unwrap();
        h.advance(PUZZLE_TTL + 1);
        let late = EditRequest { puzzle_id: Some(c.puzzle_id), puzzle_answer: Some(answer), ..edit("plum", "x") };
        assert_eq!(h.edit_page(id, &late), Err(SiteError::Refused(RefusalReason::WrongPuzzle)));
    }

    #[test]
    fn captcha_and_closed_always_refuse() {
        let mut h = host();
        let captcha = first(&h, Protection::Captcha);
        let closed = first(&h, Protection::Closed);
        assert_eq!(h.edit_page(captcha, &edit("a", "x")), Err(SiteError::Refused(RefusalReason::CaptchaRequired)));
        assert_eq!(h.edit_page(closed, &edit("a", "x")), Err(SiteError::Refused(RefusalReason::Closed)));
    }

    #[test]
    fn lockdown_after_owner_inactivity() {
        let spec = PopulationSpec { lockdown_after_days: Some(90), ..PopulationSpec::with_counts(1, 0, 0) };
        let mut h = SiteHost::from_spec(&spec, 1);
        h.touch_owner(0, 0).unwrap();
        h.set_now(120 * DAY);
        assert_eq!(h.edit_page(0, &edit("a", "x")), Err(SiteError::Refused(RefusalReason::LockedDown)));
        h.touch_owner(0, 100 * DAY).unwrap();
        assert!(h.edit_page(0, &edit("a", "x")).is_ok());
    }

    #[test]
    fn revert_keeps_history() {
        let mut h = host();
        let id = first(&h, Protection::Anonymous);
        h.edit_page(id, &edit("fig", "first")).unwrap();
        h.edit_page(id, &edit("fig", "second")).unwrap();
        h.revert_latest(id, "fig").unwrap();
        assert!(h.get_page(id, "fig").unwrap().contains("first"));
        let hist = h.get_history(id, "fig").unwrap();
        assert_eq!(hist.len(), 2);
        assert!(hist[0].revision_id < hist[1].revision_id);
        assert!(!hist[0].is_reverted && hist[1].is_reverted);
    }

    #[test]
    fn fresh_page_history_and_deletion() {
        let mut h = host();
        let id = first(&h, Protection::Anonymous);
        h.edit_page(id, &edit("kiwi", "x")).unwrap();
        assert_eq!(h.get_history(id, "kiwi").unwrap().len(), 1);
        h.delete_page(id, "kiwi").unwrap();
        assert_eq!(h.get_page(id, "kiwi"), Err(SiteError::PageMissing));
        assert_eq!(h.get_history(id, "kiwi"), Err(SiteError::PageMissing));
    }

    #[test]
    fn dead_site_refuses_everything() {
        let mut h = host();
        let id = first(&h, Protection::Anonymous);
        h.edit_page(id, &edit("lime", "x")).unwrap();
        h.kill_site(id).unwrap();
        assert_eq!(h.get_page(id, "lime"), Err(SiteError::SiteDown));
        assert_eq!(h.edit_page(id, &edit("lime", "y")), Err(SiteError::SiteDown));
        assert_eq!(h.register(id, "u"), Err(SiteError::SiteDown));
    }

    #[test]
    fn create_only_detects_collision() {
        let mut h = host();
        let id = first(&h, Protection::Anonymous);
        let req = EditRequest { create_only: true, ..edit("date", "x") };
        h.edit_page(id, &req).unwrap();
        assert_eq!(h.edit_page(id, &req), Err(SiteError::TitleTaken));
    }

    #[test]
    fn recent_changes_window() {
        let mut h = host();
        let id = first(&h, Protection::Anonymous);
        h.edit_page(id, &edit("old", "x")).unwrap();
        h.set_now(5 * DAY);
        h.edit_page(id, &edit("new", "x")).unwrap();
        let titles = |now| -> Vec<String> { h.recent_changes(id, now).unwrap().into_iter().map(|c| c.title).collect() };
        // "new" is 3 days old, "old" is 8 days old.
        assert_eq!(titles(8 * DAY), vec!["new".to_string()]);
        let spec = PopulationSpec { recent_changes_window_days: 0, ..PopulationSpec::with_counts(1, 0, 0) };
        let mut z = SiteHost::from_spec(&spec, 1);
        z.edit_page(0, &edit("a", "x")).unwrap();
        assert!(z.recent_changes(0, 0).unwrap().is_empty());
    }

    #[test]
    fn locations_round_trip() {
        let loc = page_location("http://127.0.0.1:9000/", 17, "banana");
        assert_eq!(loc, "http://127.0.0.1:9000/site/17/wiki/banana");
        assert_eq!(parse_location(&loc), Some(("http://127.0.0.1:9000", 17, "banana")));
        assert_eq!(parse_location("http://x/site/a/wiki/b"), None);
    }

    #[test]
    fn zero_hazard_never_removes() {
        let mut h = host();
        let id = first(&h, Protection::Anonymous);
        h.edit_page(id, &edit("a", "x")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for day in 0..400 {
            assert!(h.moderate_all(day * DAY, &mut rng, &HazardModel::zero()).is_empty());
        }
    }

    #[test]
    fn visibility_window_raises_removal_rate() {
        let mut hazard = HazardModel::constant(0.05);
        hazard.recent_multiplier = 3.0;
        let spec = PopulationSpec::with_counts(2_000, 0, 0);
        let mut h = SiteHost::from_spec(&spec, 11);
        for id in 0..1_000 {
            h.edit_page(id, &edit("fresh", "x")).unwrap();
        }
        h.set_now(-20 * DAY);
        for id in 1_000..2_000 {
            h.edit_page(id, &edit("stale", "x")).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let events = h.moderate_all(0, &mut rng, &hazard);
        let fresh = events.iter().filter(|e| matches!(e, ModerationEvent::PageRemoved { site_id, .. } if *site_id < 1_000)).count();
        let stale = events.len() - fresh;
        assert!(fresh > stale, "fresh {fresh} stale {stale}");
    }

    #[test]
    fn moderation_is_seed_deterministic() {
        let run = || {
            let mut h = host();
            for id in 0..60 {
                h.edit_page(id, &edit("p", "payload line\nmore")).unwrap_or_default();
            }
            let mut hazard = HazardModel::constant(0.1);
            hazard.mutation = 0.05;
            hazard.death.base = 0.02;
            hazard.death.max = 0.02;
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            for d in 0..30 {
                h.moderate_all(d * DAY, &mut rng, &hazard);
            }
            h.events().to_vec()
        };
        let a = run();
        assert!(!a.is_empty());
        assert_eq!(a, run());
    }
}
