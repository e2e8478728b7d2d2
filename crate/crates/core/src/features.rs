//! Feature vectors and labeled datasets.
//!
//! One sample is built per (session, desktop test stage, desktop). It pairs
//! the desktop's ads in that stage with the mobile's ads from the same
//! session's mobile test stage. Vector-valued features are term-frequency
//! counts over a vocabulary collected from every run of the setup.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adex::{AdObservation, CrawlPhase};
use crate::categorizer::{Categorizer, CategorizerError};
use crate::ecosim::GroundTruth;
use crate::scheduler::{DeviceKind, RunRecord, SessionRecord, SetupCode, StageKind, DAY};

/// Scalar block, in column order.
pub const SCALAR_FEATURES: [&str; 14] = [
    "Crawl_Type",
    "Run_ID",
    "Session_ID",
    "Mobile_Timeslot",
    "Desktop_Timeslot",
    "Desktop_Day",
    "Mobile_Number_of_Ads",
    "Desktop_Number_of_Ads",
    "Mobile_Unique_Number_of_Ads",
    "Desktop_Unique_Number_of_Ads",
    "Mobile_Number_of_Keywords",
    "Desktop_Number_of_Keywords",
    "Mobile_Unique_Number_of_Keywords",
    "Desktop_Unique_Number_of_Keywords",
];

const SLOT_SECONDS: u64 = 30 * 60;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("session {session} of {run_id}: {what}")]
    IncompleteStage { run_id: String, session: u32, what: String },
    #[error("feature {feature} out of range: {value}")]
    Encoding { feature: &'static str, value: f64 },
    #[error("cannot combine datasets: {0}")]
    SchemaMismatch(String),
    #[error("label for {device} disagrees with ground truth")]
    Label { device: String },
    #[error("dataset file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Categorizer(#[from] CategorizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Vector-valued feature blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Block {
    PersonaKeywords,
    MobileKeywords,
    DesktopKeywords,
    MobileLandingPages,
    DesktopLandingPages,
}

impl Block {
    pub const ALL: [Block; 5] = [
        Block::PersonaKeywords,
        Block::MobileKeywords,
        Block::DesktopKeywords,
        Block::MobileLandingPages,
        Block::DesktopLandingPages,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Block::PersonaKeywords => "Persona_Keywords",
            Block::MobileKeywords => "Mobile_Keywords",
            Block::DesktopKeywords => "Desktop_Keywords",
            Block::MobileLandingPages => "Mobile_Landing_Pages",
            Block::DesktopLandingPages => "Desktop_Landing_Pages",
        }
    }

    pub fn column(self, term: &str) -> String {
        format!("{}={term}", self.prefix())
    }
}

/// Time of a snapshot on the simulated calendar.
pub fn timeslot(seconds: u64) -> u32 {
    ((seconds % DAY) / SLOT_SECONDS) as u32
}

pub fn day_of_week(seconds: u64) -> u32 {
    ((seconds / DAY) % 7) as u32 + 1
}

/// Which devices' data make up one sample.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleKey {
    pub run_id: String,
    pub persona_id: u32,
    pub session_id: u32,
    pub stage_id: String,
    pub device_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub scalars: [f64; 14],
    pub blocks: BTreeMap<Block, BTreeMap<String, f64>>,
}

impl FeatureVector {
    pub fn scalar(&self, name: &str) -> Option<f64> {
        SCALAR_FEATURES.iter().position(|n| *n == name).map(|i| self.scalars[i])
    }

    /// Checks the declared encoding ranges.
    pub fn check(&self) -> Result<(), FeatureError> {
        let s = &self.scalars;
        let out = |i: usize| Err(FeatureError::Encoding { feature: SCALAR_FEATURES[i], value: s[i] });
        if s[0] != 0.0 && s[0] != 1.0 {
            return out(0);
        }
        if s[1] < 1.0 {
            return out(1);
        }
        if s[2] < 1.0 {
            return out(2);
        }
        for i in [3, 4] {
            if !(0.0..=48.0).contains(&s[i]) {
                return out(i);
            }
        }
        if !(1.0..=7.0).contains(&s[5]) {
            return out(5);
        }
        for (total, unique) in [(6, 8), (7, 9), (10, 12), (11, 13)] {
            if s[unique] > s[total] {
                return out(unique);
            }
        }
        for (i, v) in s.iter().enumerate() {
            if *v < 0.0 || !v.is_finite() {
                return out(i);
            }
        }
        if self.blocks.values().flat_map(|b| b.values()).any(|v| *v < 0.0) {
            return Err(FeatureError::Encoding { feature: "vector", value: -1.0 });
        }
        Ok(())
    }
}

/// Ad-derived counts and vectors for one device in one stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdSummary {
    pub ads: usize,
    pub unique_ads: usize,
    pub keywords: usize,
    pub unique_keywords: usize,
    pub keyword_tf: BTreeMap<String, f64>,
    pub landing_tf: BTreeMap<String, f64>,
}

pub fn summarize(observations: &[AdObservation], categorizer: &Categorizer<'_>) -> Result<AdSummary, FeatureError> {
    let mut s = AdSummary { ads: observations.len(), ..AdSummary::default() };
    for o in observations {
        *s.landing_tf.entry(o.landing_domain.clone()).or_insert(0.0) += 1.0;
        for label in categorizer.categorize(&o.landing_domain)? {
            s.keywords += 1;
            *s.keyword_tf.entry(label).or_insert(0.0) += 1.0;
        }
    }
    s.unique_ads = s.landing_tf.len();
    s.unique_keywords = s.keyword_tf.len();
    Ok(s)
}

/// Term frequencies of the categories of the persona's training pages.
pub fn persona_keywords(pages: &[String], categorizer: &Categorizer<'_>) -> Result<BTreeMap<String, f64>, FeatureError> {
    let mut tf = BTreeMap::new();
    for p in pages {
        for label in categorizer.categorize(p)? {
            *tf.entry(label).or_insert(0.0) += 1.0;
        }
    }
    Ok(tf)
}

/// Inputs for one sample: the desktop side and the mobile side.
pub struct StageData<'a> {
    pub start: u64,
    pub observations: &'a [AdObservation],
}

pub struct SampleContext<'a> {
    pub run_index: u32,
    pub session_id: u32,
    pub crawl_phase: CrawlPhase,
    pub persona_keywords: &'a BTreeMap<String, f64>,
    pub include_persona_keywords: bool,
}

pub fn build_sample(
    mobile: &StageData<'_>,
    desktop: &StageData<'_>,
    ctx: &SampleContext<'_>,
    categorizer: &Categorizer<'_>,
) -> Result<FeatureVector, FeatureError> {
    let m = summarize(mobile.observations, categorizer)?;
    let d = summarize(desktop.observations, categorizer)?;
    let crawl_type = if ctx.crawl_phase == CrawlPhase::Before { 0.0 } else { 1.0 };
    let scalars = [
        crawl_type,
        f64::from(ctx.run_index),
        f64::from(ctx.session_id),
        f64::from(timeslot(mobile.start)),
        f64::from(timeslot(desktop.start)),
        f64::from(day_of_week(desktop.start)),
        m.ads as f64,
        d.ads as f64,
        m.unique_ads as f64,
        d.unique_ads as f64,
        m.keywords as f64,
        d.keywords as f64,
        m.unique_keywords as f64,
        d.unique_keywords as f64,
    ];
    let mut blocks = BTreeMap::new();
    if ctx.include_persona_keywords {
        blocks.insert(Block::PersonaKeywords, ctx.persona_keywords.clone());
    }
    blocks.insert(Block::MobileKeywords, m.keyword_tf);
    blocks.insert(Block::DesktopKeywords, d.keyword_tf);
    blocks.insert(Block::MobileLandingPages, m.landing_tf);
    blocks.insert(Block::DesktopLandingPages, d.landing_tf);
    let v = FeatureVector { scalars, blocks };
    v.check()?;
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub setup: SetupCode,
    pub feature_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub keys: Vec<SampleKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub setup: SetupCode,
    pub samples: usize,
    pub features: usize,
    pub positives: usize,
    pub negatives: usize,
    pub vocabulary: String,
    pub persona_keywords_included: bool,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        self.feature_names.len()
    }

    /// Comparison-unit id per row. Both desktops of one test stage share the
    /// mobile-side, clock and persona columns, so rows agreeing on every
    /// non-desktop column (plus the desktop clock) get the same id.
    pub fn groups(&self) -> Vec<u64> {
        let shared: Vec<usize> = self
            .feature_names
            .iter()
            .enumerate()
            .filter(|(_, n)| !n.starts_with("Desktop_") || *n == "Desktop_Timeslot" || *n == "Desktop_Day")
            .map(|(i, _)| i)
            .collect();
        let mut ids: BTreeMap<Vec<u64>, u64> = BTreeMap::new();
        self.rows
            .iter()
            .map(|row| {
                let key: Vec<u64> = shared.iter().map(|&i| row[i].to_bits()).collect();
                let next = ids.len() as u64;
                *ids.entry(key).or_insert(next)
            })
            .collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    pub fn manifest(&self) -> DatasetManifest {
        let positives = self.labels.iter().filter(|l| **l == 1).count();
        DatasetManifest {
            setup: self.setup,
            samples: self.len(),
            features: self.width(),
            positives,
            negatives: self.len() - positives,
            vocabulary: "union over the setup's runs".into(),
            persona_keywords_included: self.feature_names.iter().any(|n| n.starts_with(Block::PersonaKeywords.prefix())),
        }
    }

    /// Dataset restricted to the given columns, in the given order.
    pub fn select(&self, columns: &[usize]) -> LabeledDataset {
        LabeledDataset {
            setup: self.setup,
            feature_names: columns.iter().map(|&c| self.feature_names[c].clone()).collect(),
            rows: self.rows.iter().map(|r| columns.iter().map(|&c| r[c]).collect()).collect(),
            labels: self.labels.clone(),
            keys: self.keys.clone(),
        }
    }

    /// Header of feature names plus `class`, one dense row per sample.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for name in &self.feature_names {
            out.push_str(&csv_field(name));
            out.push(',');
        }
        out.push_str("class\n");
        for (row, label) in self.rows.iter().zip(&self.labels) {
            for v in row {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{label}");
        }
        out
    }

    /// Inverse of [`to_csv`](Self::to_csv); sample keys are not stored and come back empty.
    pub fn from_csv(text: &str, setup: SetupCode) -> Result<Self, FeatureError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(FeatureError::Parse { line: 1, message: "empty file".into() })?;
        let mut names = split_csv(header).map_err(|message| FeatureError::Parse { line: 1, message })?;
        if names.pop().as_deref() != Some("class") {
            return Err(FeatureError::Parse { line: 1, message: "last column must be `class`".into() });
        }
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in lines {
            let err = |message: String| FeatureError::Parse { line: i + 1, message };
            let fields = split_csv(line).map_err(err)?;
            if fields.len() != names.len() + 1 {
                return Err(err(format!("expected {} fields, found {}", names.len() + 1, fields.len())));
            }
            let mut row = Vec::with_capacity(names.len());
            for f in &fields[..names.len()] {
                let v: f64 = f.trim().parse().map_err(|_| err(format!("not a number: {f}")))?;
                if !v.is_finite() {
                    return Err(err(format!("not finite: {f}")));
                }
                row.push(v);
            }
            let label = match fields[names.len()].trim() {
                "0" => 0,
                "1" => 1,
                other => return Err(err(format!("class must be 0 or 1, found {other}"))),
            };
            rows.push(row);
            labels.push(label);
        }
        let keys = vec![
            SampleKey { run_id: String::new(), persona_id: 0, session_id: 0, stage_id: String::new(), device_id: String::new() };
            rows.len()
        ];
        Ok(Self { setup, feature_names: names, rows, labels, keys })
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), FeatureError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        let manifest = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        std::fs::write(dir.join(format!("{stem}.manifest.json")), manifest + "\n")?;
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

fn split_csv(line: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut chars = line.chars().peekable();
    let mut quoted = false;
    while let Some(c) = chars.next() {
        match (quoted, c) {
            (true, '"') if chars.peek() == Some(&'"') => {
                chars.next();
                cur.push('"');
            }
            (true, '"') => quoted = false,
            (false, '"') if cur.is_empty() => quoted = true,
            (false, ',') => out.push(std::mem::take(&mut cur)),
            (_, c) => cur.push(c),
        }
    }
    if quoted {
        return Err("unterminated quote".into());
    }
    out.push(cur);
    Ok(out)
}

/// Sparse samples before the vocabulary is fixed.
struct Draft {
    key: SampleKey,
    label: u8,
    vector: FeatureVector,
}

fn mobile_test<'a>(run: &RunRecord, session: &'a SessionRecord, mobile_id: &str) -> Result<(u64, &'a [AdObservation]), FeatureError> {
    let incomplete = |what: &str| FeatureError::IncompleteStage {
        run_id: run.run_id.clone(),
        session: session.session_id,
        what: what.to_owned(),
    };
    let stage = session.stages.iter().find(|s| s.kind == StageKind::MobileTest).ok_or_else(|| incomplete("no mobile test stage"))?;
    let log = stage.device(mobile_id).ok_or_else(|| incomplete("mobile missing from its test stage"))?;
    Ok((stage.start, &log.observations))
}

fn drafts_for_run(run: &RunRecord, categorizer: &Categorizer<'_>, include_persona: bool) -> Result<Vec<Draft>, FeatureError> {
    let topology = &run.config.topology;
    let mobile = topology.mobile().ok_or_else(|| FeatureError::IncompleteStage {
        run_id: run.run_id.clone(),
        session: 0,
        what: "topology has no mobile".into(),
    })?;
    let truth = GroundTruth::from_topology(topology);
    let persona_tf = persona_keywords(&run.persona_pages, categorizer)?;
    let mut out = Vec::new();
    for session in &run.sessions {
        let (m_start, m_obs) = mobile_test(run, session, &mobile.device_id)?;
        let mobile_data = StageData { start: m_start, observations: m_obs };
        for stage in session.stages.iter().filter(|s| matches!(s.kind, StageKind::Before | StageKind::After { .. })) {
            for log in &stage.devices {
                let Some(dev) = topology.devices.iter().find(|d| d.device_id == log.device_id) else {
                    continue;
                };
                if dev.kind != DeviceKind::Desktop {
                    continue;
                }
                let label = u8::from(dev.ip_label == mobile.ip_label);
                if (label == 1) != truth.is_paired(&dev.device_id) {
                    return Err(FeatureError::Label { device: dev.device_id.clone() });
                }
                let ctx = SampleContext {
                    run_index: run.config.run_index,
                    session_id: session.session_id,
                    crawl_phase: stage.kind.phase(),
                    persona_keywords: &persona_tf,
                    include_persona_keywords: include_persona,
                };
                let desktop = StageData { start: stage.start, observations: &log.observations };
                let vector = build_sample(&mobile_data, &desktop, &ctx, categorizer)?;
                out.push(Draft {
                    key: SampleKey {
                        run_id: run.run_id.clone(),
                        persona_id: run.config.persona_id,
                        session_id: session.session_id,
                        stage_id: stage.stage_id.clone(),
                        device_id: dev.device_id.clone(),
                    },
                    label,
                    vector,
                });
            }
        }
    }
    Ok(out)
}

fn densify(setup: SetupCode, drafts: Vec<Draft>) -> LabeledDataset {
    let mut vocab: BTreeMap<Block, BTreeSet<String>> = BTreeMap::new();
    for d in &drafts {
        for (block, tf) in &d.vector.blocks {
            vocab.entry(*block).or_default().extend(tf.keys().cloned());
        }
    }
    let mut names: Vec<String> = SCALAR_FEATURES.iter().map(|s| (*s).to_owned()).collect();
    for block in Block::ALL {
        if let Some(terms) = vocab.get(&block) {
            names.extend(terms.iter().map(|t| block.column(t)));
        }
    }
    let mut rows = Vec::with_capacity(drafts.len());
    let mut labels = Vec::with_capacity(drafts.len());
    let mut keys = Vec::with_capacity(drafts.len());
    for d in drafts {
        let mut row = d.vector.scalars.to_vec();
        for block in Block::ALL {
            if let Some(terms) = vocab.get(&block) {
                let tf = d.vector.blocks.get(&block);
                row.extend(terms.iter().map(|t| tf.and_then(|m| m.get(t)).copied().unwrap_or(0.0)));
            }
        }
        rows.push(row);
        labels.push(d.label);
        keys.push(d.key);
    }
    LabeledDataset { setup, feature_names: names, rows, labels, keys }
}

/// One dataset from a setup's runs (typically all runs of one persona).
pub fn assemble(runs: &[RunRecord], setup: SetupCode, categorizer: &Categorizer<'_>) -> Result<LabeledDataset, FeatureError> {
    let include_persona = !setup.excludes_persona_keywords();
    let mut drafts = Vec::new();
    for run in runs {
        drafts.extend(drafts_for_run(run, categorizer, include_persona)?);
    }
    Ok(densify(setup, drafts))
}

/// Stacks datasets over the union of their columns, zero-filling what a
/// dataset lacks. The scalar block must agree.
pub fn combine(datasets: &[LabeledDataset]) -> Result<LabeledDataset, FeatureError> {
    let first = datasets.first().ok_or_else(|| FeatureError::SchemaMismatch("nothing to combine".into()))?;
    let setup = first.setup.combined();
    let scalar_count = SCALAR_FEATURES.len();
    for d in datasets {
        if d.setup.combined() != setup {
            return Err(FeatureError::SchemaMismatch(format!("setups {} and {} differ", first.setup, d.setup)));
        }
        if d.feature_names.len() < scalar_count || d.feature_names[..scalar_count] != first.feature_names[..scalar_count] {
            return Err(FeatureError::SchemaMismatch("scalar feature block differs".into()));
        }
    }
    let mut by_block: BTreeMap<Block, BTreeSet<String>> = BTreeMap::new();
    for d in datasets {
        for name in &d.feature_names[scalar_count..] {
            let block = Block::ALL
                .into_iter()
                .find(|b| name.strip_prefix(b.prefix()).is_some_and(|r| r.starts_with('=')))
                .ok_or_else(|| FeatureError::SchemaMismatch(format!("unknown column {name}")))?;
            if setup.excludes_persona_keywords() && block == Block::PersonaKeywords {
                continue;
            }
            by_block.entry(block).or_default().insert(name.clone());
        }
    }
    let mut names: Vec<String> = first.feature_names[..scalar_count].to_vec();
    for block in Block::ALL {
        if let Some(cols) = by_block.get(&block) {
            names.extend(cols.iter().cloned());
        }
    }
    let position: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut out = LabeledDataset { setup, feature_names: names.clone(), rows: Vec::new(), labels: Vec::new(), keys: Vec::new() };
    for d in datasets {
        let map: Vec<Option<usize>> = d.feature_names.iter().map(|n| position.get(n.as_str()).copied()).collect();
        for (row, (label, key)) in d.rows.iter().zip(d.labels.iter().zip(&d.keys)) {
            let mut dense = vec![0.0; names.len()];
            for (v, target) in row.iter().zip(&map) {
                if let Some(t) = target {
                    dense[*t] = *v;
                }
            }
            out.rows.push(dense);
            out.labels.push(*label);
            out.keys.push(key.clone());
        }
    }
    Ok(out)
}
