//! Experimental setups and the session timeline.
//!
//! A session runs the desktops' "before" test stage, the mobile's training and
//! testing stages, then the desktops' "after" test stage, separated by waits.
//! Time is simulated: one tick is one second, so multi-day setups replay in
//! seconds. The scheduler drives devices through stages, hands each visit to
//! an [`AdEcosystem`], and extracts the ads of every test-stage page.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adex::{extract_ads, AdObservation, CrawlMeta, CrawlPhase, CrawlType, ExtractOptions, PageStats};
use crate::dom::{DomError, DomSnapshot};
use crate::ecosim::Placement;
use crate::filterlist::FilterSet;

pub const MINUTE: u64 = 60;
pub const DAY: u64 = 86_400;

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("invalid run config: {0}")]
    ConfigInvalid(String),
    #[error("unknown setup `{0}`")]
    UnknownSetup(String),
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("ad ecosystem unavailable: {0}")]
    EcosystemUnavailable(String),
    #[error("stage {stage} overran its {budget_ms} ms wall-clock budget")]
    StageOverrun { stage: String, budget_ms: u128 },
    #[error("page extraction failed in {stage}: {source}")]
    Extraction { stage: String, source: DomError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SetupCode {
    #[serde(rename = "1a")]
    S1a,
    #[serde(rename = "1b")]
    S1b,
    #[serde(rename = "2a")]
    S2a,
    #[serde(rename = "2b")]
    S2b,
    #[serde(rename = "2c")]
    S2c,
    #[serde(rename = "2d")]
    S2d,
    #[serde(rename = "3a")]
    S3a,
    #[serde(rename = "3b")]
    S3b,
    #[serde(rename = "pre1")]
    Pre1,
    #[serde(rename = "pre2")]
    Pre2,
}

impl SetupCode {
    pub const ALL: [SetupCode; 10] = [
        SetupCode::S1a,
        SetupCode::S1b,
        SetupCode::S2a,
        SetupCode::S2b,
        SetupCode::S2c,
        SetupCode::S2d,
        SetupCode::S3a,
        SetupCode::S3b,
        SetupCode::Pre1,
        SetupCode::Pre2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SetupCode::S1a => "1a",
            SetupCode::S1b => "1b",
            SetupCode::S2a => "2a",
            SetupCode::S2b => "2b",
            SetupCode::S2c => "2c",
            SetupCode::S2d => "2d",
            SetupCode::S3a => "3a",
            SetupCode::S3b => "3b",
            SetupCode::Pre1 => "pre1",
            SetupCode::Pre2 => "pre2",
        }
    }

    /// The independent-persona setup whose runs a combined setup merges.
    pub fn base(self) -> SetupCode {
        match self {
            SetupCode::S1b => SetupCode::S1a,
            SetupCode::S2b => SetupCode::S2a,
            SetupCode::S2d => SetupCode::S2c,
            SetupCode::S3b => SetupCode::S3a,
            other => other,
        }
    }

    /// The combined setup that merges this setup's persona datasets.
    pub fn combined(self) -> SetupCode {
        match self {
            SetupCode::S1a => SetupCode::S1b,
            SetupCode::S2a => SetupCode::S2b,
            SetupCode::S2c => SetupCode::S2d,
            SetupCode::S3a => SetupCode::S3b,
            other => other,
        }
    }

    pub fn is_combined(self) -> bool {
        self.base() != self
    }

    /// Setup-2 datasets leave out the persona keyword block.
    pub fn excludes_persona_keywords(self) -> bool {
        matches!(self.base(), SetupCode::S2a | SetupCode::S2c)
    }

    pub fn is_preliminary(self) -> bool {
        matches!(self, SetupCode::Pre1 | SetupCode::Pre2)
    }
}

impl fmt::Display for SetupCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SetupCode {
    type Err = SchedulerError;

    /// Accepts `1a`, `1A`, `1a-sim` and `setup-1a`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase();
        let norm = norm.strip_prefix("setup-").unwrap_or(&norm);
        let norm = norm.strip_suffix("-sim").unwrap_or(norm);
        SetupCode::ALL
            .into_iter()
            .find(|c| c.as_str() == norm)
            .ok_or_else(|| SchedulerError::UnknownSetup(s.to_owned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceKind {
    Mobile,
    Desktop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceRole {
    Mobile,
    PairedPc,
    BaselinePc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateMode {
    Stateful,
    Stateless,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_id: String,
    pub kind: DeviceKind,
    pub role: DeviceRole,
    pub ip_label: String,
    pub state_mode: StateMode,
    /// Desktop also browses persona pages (setups 2a/2c and the second
    /// preliminary experiment).
    #[serde(default)]
    pub trains_persona: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub devices: Vec<DeviceProfile>,
}

impl Topology {
    /// One mobile, one paired desktop on its IP, one baseline desktop elsewhere.
    pub fn standard(desktop_state: StateMode, mobile_state: StateMode, desktops_train: bool) -> Self {
        let desktop = |id: &str, role, ip: &str| DeviceProfile {
            device_id: id.into(),
            kind: DeviceKind::Desktop,
            role,
            ip_label: ip.into(),
            state_mode: desktop_state,
            trains_persona: desktops_train,
        };
        Self {
            devices: vec![
                DeviceProfile {
                    device_id: "mobile".into(),
                    kind: DeviceKind::Mobile,
                    role: DeviceRole::Mobile,
                    ip_label: "ip-home".into(),
                    state_mode: mobile_state,
                    trains_persona: true,
                },
                desktop("desktop-paired", DeviceRole::PairedPc, "ip-home"),
                desktop("desktop-baseline", DeviceRole::BaselinePc, "ip-office"),
            ],
        }
    }

    /// Mobile and three desktops behind one IP; optionally the first desktop
    /// trains on the persona too.
    pub fn preliminary(first_desktop_trains: bool) -> Self {
        let mut devices = vec![DeviceProfile {
            device_id: "mobile".into(),
            kind: DeviceKind::Mobile,
            role: DeviceRole::Mobile,
            ip_label: "ip-home".into(),
            state_mode: StateMode::Stateful,
            trains_persona: true,
        }];
        for i in 1..=3 {
            devices.push(DeviceProfile {
                device_id: format!("desktop-{i}"),
                kind: DeviceKind::Desktop,
                role: DeviceRole::PairedPc,
                ip_label: "ip-home".into(),
                state_mode: StateMode::Stateful,
                trains_persona: first_desktop_trains && i == 1,
            });
        }
        Self { devices }
    }

    pub fn mobile(&self) -> Option<&DeviceProfile> {
        self.devices.iter().find(|d| d.kind == DeviceKind::Mobile)
    }

    pub fn desktops(&self) -> impl Iterator<Item = &DeviceProfile> {
        self.devices.iter().filter(|d| d.kind == DeviceKind::Desktop)
    }

    pub fn validate(&self, preliminary: bool) -> Result<(), SchedulerError> {
        let bad = |m: &str| Err(SchedulerError::Topology(m.to_owned()));
        let mobiles: Vec<_> = self.devices.iter().filter(|d| d.kind == DeviceKind::Mobile).collect();
        if mobiles.len() != 1 {
            return bad("exactly one mobile device required");
        }
        let ip = &mobiles[0].ip_label;
        let paired: Vec<_> = self.devices.iter().filter(|d| d.role == DeviceRole::PairedPc).collect();
        let baseline: Vec<_> = self.devices.iter().filter(|d| d.role == DeviceRole::BaselinePc).collect();
        if paired.iter().any(|d| &d.ip_label != ip) {
            return bad("paired desktops must share the mobile's IP");
        }
        if baseline.iter().any(|d| &d.ip_label == ip) {
            return bad("baseline desktops must use a different IP");
        }
        if preliminary {
            if paired.is_empty() {
                return bad("at least one desktop required");
            }
        } else if paired.len() != 1 || baseline.len() != 1 || self.devices.len() != 3 {
            return bad("exactly one paired and one baseline desktop required");
        }
        let mut ids: Vec<_> = self.devices.iter().map(|d| &d.device_id).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != self.devices.len() {
            return bad("device ids must be unique");
        }
        Ok(())
    }
}

/// Stage durations in minutes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Durations {
    pub train: u32,
    pub test: u32,
    pub wait: u32,
    pub rest: u32,
}

impl Default for Durations {
    fn default() -> Self {
        Self { train: 15, test: 20, wait: 10, rest: 5 }
    }
}

impl Durations {
    /// Minutes per session without desktop alternations.
    pub fn session_span(&self) -> u32 {
        2 * self.wait + self.rest + self.train + 3 * self.test
    }
}

/// How desktops that train on the persona fit into the timeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesktopTraining {
    /// Desktops only test.
    None,
    /// Training desktops browse persona pages alongside the mobile.
    WithMobile,
    /// After the mobile phase, desktops alternate train and test rounds.
    Alternating { rounds: u32, round_minutes: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub setup: SetupCode,
    pub persona_id: u32,
    /// 1-based run number within the setup.
    pub run_index: u32,
    pub sessions: u32,
    pub durations: Durations,
    pub desktop_training: DesktopTraining,
    /// Minutes spent on each page.
    pub dwell: u32,
    pub control_set: String,
    pub topology: Topology,
}

impl RunConfig {
    pub fn run_id(&self) -> String {
        format!("{}-p{:02}-r{}", self.setup.base(), self.persona_id, self.run_index)
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        let d = self.durations;
        if d.train == 0 || d.test == 0 || d.wait == 0 || d.rest == 0 {
            return Err(SchedulerError::ConfigInvalid("durations must be positive".into()));
        }
        if self.sessions == 0 || self.dwell == 0 {
            return Err(SchedulerError::ConfigInvalid("sessions and dwell must be positive".into()));
        }
        if let DesktopTraining::Alternating { rounds, round_minutes } = self.desktop_training {
            if rounds == 0 || round_minutes == 0 {
                return Err(SchedulerError::ConfigInvalid("alternation rounds must be positive".into()));
            }
        }
        self.topology.validate(self.setup.is_preliminary())
    }
}

/// Setup parameters before they are expanded into per-run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub setup: SetupCode,
    pub personas: Vec<u32>,
    pub runs: u32,
    pub sessions: u32,
    pub durations: Durations,
    pub desktop_training: DesktopTraining,
    pub dwell: u32,
    pub control_set: String,
    pub boosted: bool,
    pub topology: Topology,
}

pub fn preset(setup: SetupCode) -> Preset {
    let base = setup.base();
    let standard = |desktop_state| Topology::standard(desktop_state, StateMode::Stateful, false);
    let mut p = Preset {
        setup,
        personas: (1..=10).collect(),
        runs: 4,
        sessions: 15,
        durations: Durations::default(),
        desktop_training: DesktopTraining::None,
        dwell: 4,
        control_set: "weather".into(),
        boosted: false,
        topology: standard(StateMode::Stateful),
    };
    match base {
        SetupCode::S2a | SetupCode::S2c => {
            p.personas = vec![1, 4];
            p.sessions = 2;
            p.durations = Durations { train: 480, test: 30, wait: 10, rest: 5 };
            p.desktop_training = DesktopTraining::Alternating { rounds: 11, round_minutes: 30 };
            p.topology = Topology::standard(StateMode::Stateful, StateMode::Stateful, true);
            if base == SetupCode::S2c {
                p.boosted = true;
                p.control_set = "boosted".into();
            }
        }
        SetupCode::S3a => {
            p.personas = (1..=5).collect();
            p.runs = 2;
            p.topology = standard(StateMode::Stateless);
        }
        SetupCode::Pre1 | SetupCode::Pre2 => {
            p.personas = vec![2];
            p.runs = 1;
            p.sessions = 28;
            p.topology = Topology::preliminary(base == SetupCode::Pre2);
            if base == SetupCode::Pre2 {
                p.desktop_training = DesktopTraining::WithMobile;
            }
        }
        _ => {}
    }
    p
}

impl Preset {
    pub fn run_configs(&self) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for &persona_id in &self.personas {
            for run_index in 1..=self.runs {
                out.push(RunConfig {
                    setup: self.setup.base(),
                    persona_id,
                    run_index,
                    sessions: self.sessions,
                    durations: self.durations,
                    desktop_training: self.desktop_training,
                    dwell: self.dwell,
                    control_set: self.control_set.clone(),
                    topology: self.topology.clone(),
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    Before,
    MobileTrain,
    MobileTest,
    DesktopTrain { round: u32 },
    After { round: u32 },
}

impl StageKind {
    pub fn phase(self) -> CrawlPhase {
        match self {
            StageKind::Before => CrawlPhase::Before,
            StageKind::MobileTrain | StageKind::MobileTest => CrawlPhase::Mobile,
            StageKind::DesktopTrain { .. } | StageKind::After { .. } => CrawlPhase::After,
        }
    }

    pub fn crawl_type(self) -> CrawlType {
        match self {
            StageKind::MobileTrain | StageKind::DesktopTrain { .. } => CrawlType::Train,
            _ => CrawlType::Test,
        }
    }

    fn label(self) -> String {
        match self {
            StageKind::Before => "B".into(),
            StageKind::MobileTrain => "M-train".into(),
            StageKind::MobileTest => "M-test".into(),
            StageKind::DesktopTrain { round } => format!("D-train{round}"),
            StageKind::After { round } => format!("A{round}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage_id: String,
    pub kind: StageKind,
    pub device_ids: Vec<String>,
    /// Seconds from the session start.
    pub offset: u64,
    pub duration: u64,
    pub visits: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub session_id: u32,
    /// Seconds from the run start.
    pub start: u64,
    pub span: u64,
    pub stages: Vec<StagePlan>,
}

fn visits_for(duration_min: u32, dwell: u32) -> u32 {
    duration_min.div_ceil(dwell)
}

pub fn build_timeline(cfg: &RunConfig) -> Result<Vec<SessionPlan>, SchedulerError> {
    cfg.validate()?;
    let d = cfg.durations;
    let ids = |f: &dyn Fn(&DeviceProfile) -> bool| -> Vec<String> {
        cfg.topology.devices.iter().filter(|x| f(x)).map(|x| x.device_id.clone()).collect()
    };
    let desktops = ids(&|x| x.kind == DeviceKind::Desktop);
    let mobile = ids(&|x| x.kind == DeviceKind::Mobile);
    let trainers = ids(&|x| x.kind == DeviceKind::Desktop && x.trains_persona);
    let mut sessions = Vec::new();
    let mut session_start = 0u64;
    for session_id in 1..=cfg.sessions {
        let mut stages = Vec::new();
        let mut t = 0u64;
        let mut push = |kind: StageKind, devices: Vec<String>, minutes: u32, t: &mut u64| {
            stages.push(StagePlan {
                stage_id: format!("s{session_id:02}-{}", kind.label()),
                kind,
                device_ids: devices,
                offset: *t,
                duration: u64::from(minutes) * MINUTE,
                visits: visits_for(minutes, cfg.dwell),
            });
            *t += u64::from(minutes) * MINUTE;
        };
        push(StageKind::Before, desktops.clone(), d.test, &mut t);
        t += u64::from(d.wait) * MINUTE;
        let mut train_devices = mobile.clone();
        if cfg.desktop_training == DesktopTraining::WithMobile {
            train_devices.extend(trainers.iter().cloned());
        }
        push(StageKind::MobileTrain, train_devices, d.train, &mut t);
        push(StageKind::MobileTest, mobile.clone(), d.test, &mut t);
        t += u64::from(d.wait) * MINUTE;
        match cfg.desktop_training {
            DesktopTraining::Alternating { rounds, round_minutes } => {
                for round in 1..=rounds {
                    push(StageKind::DesktopTrain { round }, trainers.clone(), round_minutes, &mut t);
                    push(StageKind::After { round }, desktops.clone(), round_minutes, &mut t);
                }
            }
            _ => push(StageKind::After { round: 1 }, desktops.clone(), d.test, &mut t),
        }
        t += u64::from(d.rest) * MINUTE;
        sessions.push(SessionPlan { session_id, start: session_start, span: t, stages });
        session_start += t;
    }
    Ok(sessions)
}

/// Cookies a device holds, keyed by tracker.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CookieJar {
    cookies: BTreeMap<String, String>,
}

impl CookieJar {
    pub fn get(&self, tracker: &str) -> Option<&str> {
        self.cookies.get(tracker).map(String::as_str)
    }

    pub fn set(&mut self, tracker: &str, cookie: String) {
        self.cookies.insert(tracker.to_owned(), cookie);
    }

    pub fn clear(&mut self) {
        self.cookies.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.cookies.is_empty()
    }

    pub fn len(&self) -> usize {
        self.cookies.len()
    }

    /// Hex SHA-256 over the sorted entries.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.cookies {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitRequest {
    pub device_id: String,
    pub kind: DeviceKind,
    pub ip_label: String,
    pub page_domain: String,
    pub is_train: bool,
    /// Absolute simulated time in seconds.
    pub tick: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServedPage {
    pub snapshot: DomSnapshot,
    pub placements: Vec<Placement>,
}

/// The advertising ecosystem the devices browse against.
pub trait AdEcosystem {
    /// Resets all state for a new run.
    fn begin_run(&mut self, run_id: &str, seed: u64) -> Result<(), SchedulerError>;
    fn begin_session(&mut self, session_id: u32);
    /// Records the visit and returns the rendered page. The ecosystem may set
    /// cookies in `jar`.
    fn visit(&mut self, req: &VisitRequest, jar: &mut CookieJar) -> Result<ServedPage, SchedulerError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClockMode {
    Simulated,
    /// Each stage must finish within `scale` real seconds per simulated second.
    WallClock { scale: f64 },
}

/// Where a run begins on the simulated calendar.
pub fn run_start(cfg: &RunConfig) -> u64 {
    let day = (u64::from(cfg.persona_id) * 5 + u64::from(cfg.run_index) * 3) % 7;
    day * DAY + 8 * 3600
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceStageLog {
    pub device_id: String,
    pub role: DeviceRole,
    pub ip_label: String,
    pub jar_start: String,
    pub jar_end: String,
    pub pages: Vec<String>,
    /// Ads found on each visited page (test stages only).
    pub ads_per_visit: Vec<u32>,
    pub observations: Vec<AdObservation>,
    pub placed: Vec<Placement>,
    pub stats: PageStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage_id: String,
    pub kind: StageKind,
    pub start: u64,
    pub end: u64,
    pub devices: Vec<DeviceStageLog>,
}

impl StageRecord {
    pub fn device(&self, id: &str) -> Option<&DeviceStageLog> {
        self.devices.iter().find(|d| d.device_id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: u32,
    pub start: u64,
    pub stages: Vec<StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub config: RunConfig,
    pub persona_pages: Vec<String>,
    pub control_pages: Vec<String>,
    pub sessions: Vec<SessionRecord>,
}

/// Everything a run needs besides its config.
pub struct RunInputs<'a> {
    pub persona_pages: &'a [String],
    pub control_pages: &'a [String],
    pub filters: &'a FilterSet,
    pub extract: ExtractOptions,
    pub clock: ClockMode,
}

pub fn execute_run(
    cfg: &RunConfig,
    inputs: &RunInputs<'_>,
    eco: &mut dyn AdEcosystem,
    seed: u64,
) -> Result<RunRecord, SchedulerError> {
    let plans = build_timeline(cfg)?;
    if inputs.persona_pages.is_empty() || inputs.control_pages.is_empty() {
        return Err(SchedulerError::ConfigInvalid("persona and control pages must be non-empty".into()));
    }
    let run_id = cfg.run_id();
    eco.begin_run(&run_id, seed)?;
    let origin = run_start(cfg);
    let devices: BTreeMap<&str, &DeviceProfile> =
        cfg.topology.devices.iter().map(|d| (d.device_id.as_str(), d)).collect();
    let mut jars: BTreeMap<String, CookieJar> =
        cfg.topology.devices.iter().map(|d| (d.device_id.clone(), CookieJar::default())).collect();
    let mut persona_cursor: BTreeMap<String, usize> = BTreeMap::new();
    let mut sessions = Vec::new();
    for plan in &plans {
        eco.begin_session(plan.session_id);
        let mut stages = Vec::new();
        for stage in &plan.stages {
            let started = Instant::now();
            let start = origin + plan.start + stage.offset;
            let train = stage.kind.crawl_type() == CrawlType::Train;
            let mut logs: Vec<DeviceStageLog> = Vec::new();
            for id in &stage.device_ids {
                let dev = devices[id.as_str()];
                let jar = jars.get_mut(id).expect("jar per device");
                if dev.state_mode == StateMode::Stateless {
                    jar.clear();
                }
                logs.push(DeviceStageLog {
                    device_id: id.clone(),
                    role: dev.role,
                    ip_label: dev.ip_label.clone(),
                    jar_start: jar.digest(),
                    jar_end: String::new(),
                    pages: Vec::new(),
                    ads_per_visit: Vec::new(),
                    observations: Vec::new(),
                    placed: Vec::new(),
                    stats: PageStats::default(),
                });
            }
            for k in 0..stage.visits {
                let tick = start + u64::from(k) * u64::from(cfg.dwell) * MINUTE;
                for log in logs.iter_mut() {
                    let dev = devices[log.device_id.as_str()];
                    let page = if train {
                        let cursor = persona_cursor.entry(log.device_id.clone()).or_insert(0);
                        let p = &inputs.persona_pages[*cursor % inputs.persona_pages.len()];
                        *cursor += 1;
                        p
                    } else {
                        &inputs.control_pages[k as usize % inputs.control_pages.len()]
                    };
                    let req = VisitRequest {
                        device_id: log.device_id.clone(),
                        kind: dev.kind,
                        ip_label: dev.ip_label.clone(),
                        page_domain: page.clone(),
                        is_train: train,
                        tick,
                    };
                    let jar = jars.get_mut(&log.device_id).expect("jar per device");
                    let served = eco.visit(&req, jar)?;
                    log.pages.push(page.clone());
                    if !train {
                        let meta = CrawlMeta {
                            run_id: run_id.clone(),
                            session_id: plan.session_id,
                            stage_id: stage.stage_id.clone(),
                            device_id: log.device_id.clone(),
                            crawl_type: stage.kind.crawl_type(),
                            crawl_phase: stage.kind.phase(),
                        };
                        let (obs, stats) = extract_ads(&served.snapshot, inputs.filters, &meta, inputs.extract)
                            .map_err(|source| SchedulerError::Extraction { stage: stage.stage_id.clone(), source })?;
                        log.ads_per_visit.push(obs.len() as u32);
                        log.observations.extend(obs);
                        log.placed.extend(served.placements);
                        log.stats += stats;
                    }
                }
            }
            for log in logs.iter_mut() {
                log.jar_end = jars[&log.device_id].digest();
            }
            if let ClockMode::WallClock { scale } = inputs.clock {
                let budget = std::time::Duration::from_secs_f64(stage.duration as f64 * scale.max(0.0));
                if started.elapsed() > budget {
                    return Err(SchedulerError::StageOverrun { stage: stage.stage_id.clone(), budget_ms: budget.as_millis() });
                }
            }
            stages.push(StageRecord { stage_id: stage.stage_id.clone(), kind: stage.kind, start, end: start + stage.duration, devices: logs });
        }
        sessions.push(SessionRecord { session_id: plan.session_id, start: origin + plan.start, stages });
    }
    Ok(RunRecord {
        run_id,
        seed,
        config: cfg.clone(),
        persona_pages: inputs.persona_pages.to_vec(),
        control_pages: inputs.control_pages.to_vec(),
        sessions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(setup: SetupCode) -> RunConfig {
        preset(setup).run_configs().remove(0)
    }

    #[test]
    fn default_session_span_is_100_minutes() {
        assert_eq!(Durations::default().session_span(), 100);
        let plans = build_timeline(&cfg(SetupCode::S1a)).unwrap();
        assert_eq!(plans.len(), 15);
        assert!(plans.iter().all(|p| p.span == 100 * MINUTE));
        assert_eq!(plans[1].start, 100 * MINUTE);
    }

    #[test]
    fn single_session_stage_order() {
        let mut c = cfg(SetupCode::S1a);
        c.sessions = 1;
        let plans = build_timeline(&c).unwrap();
        assert_eq!(plans.len(), 1);
        let kinds: Vec<StageKind> = plans[0].stages.iter().map(|s| s.kind).collect();
        assert_eq!(kinds, vec![StageKind::Before, StageKind::MobileTrain, StageKind::MobileTest, StageKind::After { round: 1 }]);
        let offsets: Vec<u64> = plans[0].stages.iter().map(|s| s.offset / MINUTE).collect();
        assert_eq!(offsets, vec![0, 30, 45, 75]);
        assert_eq!(plans[0].stages[0].visits, 5);
        assert_eq!(plans[0].stages[1].visits, 4);
    }

    #[test]
    fn long_training_durations_are_verbatim() {
        let plans = build_timeline(&cfg(SetupCode::S2a)).unwrap();
        let s = &plans[0].stages;
        assert_eq!(s[1].kind, StageKind::MobileTrain);
        assert_eq!(s[1].duration, 480 * MINUTE);
        assert_eq!(s[2].duration, 30 * MINUTE);
        let desktop_tests = s.iter().filter(|x| matches!(x.kind, StageKind::Before | StageKind::After { .. })).count();
        assert_eq!(desktop_tests, 12);
    }

    #[test]
    fn zero_duration_rejected() {
        let mut c = cfg(SetupCode::S1a);
        c.durations.wait = 0;
        assert!(matches!(build_timeline(&c), Err(SchedulerError::ConfigInvalid(_))));
    }

    #[test]
    fn presets_follow_dataset_table() {
        let p = preset(SetupCode::S1a);
        assert_eq!((p.runs, p.personas.len(), p.durations.train, p.durations.test), (4, 10, 15, 20));
        let p = preset(SetupCode::S3a);
        assert_eq!((p.runs, p.personas.len()), (2, 5));
        assert!(p.topology.desktops().all(|d| d.state_mode == StateMode::Stateless));
        assert_eq!(p.topology.mobile().unwrap().state_mode, StateMode::Stateful);
        let p = preset(SetupCode::S2c);
        assert!(p.boosted);
        assert_eq!(p.control_set, "boosted");
        assert_eq!(p.personas, vec![1, 4]);
        for code in SetupCode::ALL {
            let p = preset(code);
            for c in p.run_configs() {
                c.validate().unwrap();
            }
        }
    }

    #[test]
    fn setup_code_aliases() {
        assert_eq!("1a-sim".parse::<SetupCode>().unwrap(), SetupCode::S1a);
        assert_eq!("Setup-2C".parse::<SetupCode>().unwrap(), SetupCode::S2c);
        assert!(matches!("4a".parse::<SetupCode>(), Err(SchedulerError::UnknownSetup(_))));
        assert_eq!(SetupCode::S3b.base(), SetupCode::S3a);
    }

    #[test]
    fn topology_ip_discipline() {
        let mut t = Topology::standard(StateMode::Stateful, StateMode::Stateful, false);
        t.validate(false).unwrap();
        t.devices[2].ip_label = "ip-home".into();
        assert!(t.validate(false).is_err());
        Topology::preliminary(true).validate(true).unwrap();
        assert!(Topology::preliminary(true).validate(false).is_err());
    }

    #[test]
    fn jar_digest_tracks_contents() {
        let mut j = CookieJar::default();
        let empty = j.digest();
        j.set("criteo", "c1".into());
        assert_ne!(j.digest(), empty);
        j.clear();
        assert_eq!(j.digest(), empty);
    }
}
