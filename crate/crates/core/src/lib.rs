//! Resilient file storage over wiki-like pages.
//!
//! A fileset is split into pieces and sub-pieces ([`fileset`]), each
//! sub-piece is encrypted and wrapped as page text ([`codec`]), and peers
//! coordinated by a [`tracker`] keep writing fresh replicas onto mock storage
//! sites ([`sitehost`]) as old ones are removed. [`sim`] models replica
//! survival under moderation.

pub mod canonical;
pub mod client;
pub mod codec;
pub mod fileset;
pub mod fuzz;
pub mod locator;
pub mod sim;
pub mod sitehost;
pub mod status;
pub mod tracker;

/// Seconds since an arbitrary epoch.
pub type Timestamp = i64;

pub const MINUTE: Timestamp = 60;
pub const HOUR: Timestamp = 3_600;
pub const DAY: Timestamp = 86_400;
