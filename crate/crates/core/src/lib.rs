//! Desk-scale cross-device tracking (CDT) measurement.
//!
//! The crate drives a staged multi-device browsing experiment against a
//! simulated ad ecosystem whose device pairing is known, recovers the ads each
//! device received from the rendered pages, and tests whether the paired
//! desktop can be told apart from a baseline desktop.
//!
//! Module map:
//!
//! * [`persona`] builds behavioral personas and control-page sets.
//! * [`filterlist`] parses adblock filter lists and matches URLs.
//! * [`dom`] and [`adex`] turn rendered pages into ad observations.
//! * [`categorizer`] maps landing domains to semantic categories.
//! * [`scheduler`] lays out the session timeline and drives the devices.
//! * [`ecosim`] is the simulated ecosystem (trackers, device graphs, campaigns).
//! * [`features`] builds labeled datasets from run records.
//! * [`detect`] holds permutation tests, classifiers, nested CV and metrics.
//! * [`report`] holds the experiment store, pipeline and validation reports.

pub mod adex;
pub mod categorizer;
pub mod detect;
pub mod dom;
pub mod domain;
pub mod ecosim;
pub mod features;
pub mod filterlist;
pub mod fixtures;
pub mod persona;
pub mod report;
pub mod rng;
pub mod scheduler;
