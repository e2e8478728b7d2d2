//! Experiment store, the end-to-end pipeline, and validation reports.
//!
//! A store holds one directory per experiment (`<setup>-seed<seed>`), each
//! with one directory per run:
//!
//! ```text
//! <root>/store.toml
//! <root>/<experiment>/runs/<run_id>/config.toml
//! <root>/<experiment>/runs/<run_id>/sessions.log       one JSON session per line
//! <root>/<experiment>/runs/<run_id>/observations.log   one JSON ad per line
//! <root>/<experiment>/datasets/*.csv, *.manifest.json
//! <root>/<experiment>/report.txt
//! ```
//!
//! Experiments are never overwritten.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adex::{resource_hosts, AdObservation, ExtractOptions};
use crate::categorizer::{Categorizer, CategoryDb, ReviewQueue};
use crate::detect::{default_grid, fast_grid, nested_cv_grouped, permutation_test, select_features, CvOptions, Decision, EvalReport, ModelSpec, Xy};
use crate::domain::registrable_domain;
use crate::ecosim::{EcoSim, SimConfig, World};
use crate::features::{assemble, combine, persona_keywords, LabeledDataset};
use crate::filterlist::FilterSet;
use crate::persona::{bundled_personas, validate_experiment, Persona};
use crate::rng::derive;
use crate::scheduler::{
    execute_run, preset, AdEcosystem, ClockMode, CookieJar, DeviceKind, DeviceRole, RunConfig, RunInputs, RunRecord, SessionRecord,
    SetupCode, StageKind, VisitRequest,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Fixtures,
    Personas,
    Simulation,
    Features,
    Detection,
    Store,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Fixtures => "fixtures",
            Stage::Personas => "personas",
            Stage::Simulation => "simulation",
            Stage::Features => "features",
            Stage::Detection => "detection",
            Stage::Store => "store",
        })
    }
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("[{stage}] {message}")]
    Pipeline { stage: Stage, message: String },
    #[error("experiment `{0}` already exists in the store")]
    Exists(String),
    #[error("store schema version {found}, expected {expected}")]
    Schema { found: u32, expected: u32 },
    #[error("tracker list line {line}: {message}")]
    TrackerList { line: usize, message: String },
}

fn tagged<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> ReportError {
    move |e| ReportError::Pipeline { stage, message: e.to_string() }
}

fn store_err<E: fmt::Display>(e: E) -> ReportError {
    ReportError::Pipeline { stage: Stage::Store, message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackerOrg {
    pub organization: String,
    pub cdt: bool,
    pub domains: BTreeSet<String>,
}

/// Organizations and the tracker domains they operate.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrackerList {
    pub orgs: Vec<TrackerOrg>,
}

impl TrackerList {
    /// `organization<TAB>cdt|-<TAB>domain;domain` per line.
    pub fn parse(text: &str) -> Result<Self, ReportError> {
        let mut orgs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: &str| ReportError::TrackerList { line: i + 1, message: message.to_owned() };
            let fields: Vec<&str> = line.split('\t').collect();
            let [org, flag, domains] = fields[..] else {
                return Err(err("expected three tab-separated fields"));
            };
            let cdt = match flag.trim() {
                "cdt" => true,
                "-" => false,
                _ => return Err(err("flag must be `cdt` or `-`")),
            };
            let domains: BTreeSet<String> = domains
                .split(';')
                .map(str::trim)
                .filter(|d| !d.is_empty())
                .map(|d| registrable_domain(d).unwrap_or_else(|| d.to_ascii_lowercase()))
                .collect();
            if org.trim().is_empty() || domains.is_empty() {
                return Err(err("organization and domains must be non-empty"));
            }
            orgs.push(TrackerOrg { organization: org.trim().to_owned(), cdt, domains });
        }
        Ok(Self { orgs })
    }

    pub fn organization_of(&self, host: &str) -> Option<&TrackerOrg> {
        let domain = registrable_domain(host)?;
        self.orgs.iter().find(|o| o.domains.contains(&domain))
    }
}

/// Fixture overrides; unset entries use the bundled fixtures.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixturePaths {
    pub category_db: Option<PathBuf>,
    pub easylist: Option<PathBuf>,
    pub world: Option<PathBuf>,
    pub tracker_list: Option<PathBuf>,
}

pub struct Resources {
    pub world: World,
    pub db: CategoryDb,
    pub filters: FilterSet,
    pub personas: Vec<Persona>,
    pub tracker_list: TrackerList,
}

impl Resources {
    pub fn bundled() -> Self {
        Self::load(&FixturePaths::default()).expect("bundled fixtures are valid")
    }

    pub fn load(paths: &FixturePaths) -> Result<Self, ReportError> {
        let read = |p: &Option<PathBuf>, fallback: &'static str| -> Result<String, ReportError> {
            match p {
                Some(path) => fs::read_to_string(path).map_err(|e| ReportError::Pipeline {
                    stage: Stage::Fixtures,
                    message: format!("{}: {e}", path.display()),
                }),
                None => Ok(fallback.to_owned()),
            }
        };
        use crate::fixtures as fx;
        let db = CategoryDb::parse(&read(&paths.category_db, fx::CATEGORY_DB)?).map_err(tagged(Stage::Fixtures))?;
        let filters = FilterSet::parse(&read(&paths.easylist, fx::EASYLIST)?);
        let world = World::parse(&read(&paths.world, fx::WORLD)?).map_err(tagged(Stage::Fixtures))?;
        let tracker_list = TrackerList::parse(&read(&paths.tracker_list, fx::TRACKER_LIST)?)?;
        Ok(Self { world, db, filters, personas: bundled_personas(), tracker_list })
    }

    pub fn persona(&self, id: u32) -> Result<&Persona, ReportError> {
        self.personas.iter().find(|p| p.id == id).ok_or_else(|| ReportError::Pipeline {
            stage: Stage::Personas,
            message: format!("persona {id} was not formed"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridChoice {
    #[default]
    Default,
    Fast,
}

impl GridChoice {
    pub fn specs(self) -> Vec<ModelSpec> {
        match self {
            GridChoice::Default => default_grid(),
            GridChoice::Fast => fast_grid(),
        }
    }
}

/// One experiment: a setup, a seed, and optional overrides of the preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub setup: SetupCode,
    pub seed: u64,
    pub personas: Option<Vec<u32>>,
    pub runs: Option<u32>,
    pub sessions: Option<u32>,
    pub grid: GridChoice,
    pub outer_k: usize,
    pub inner_k: usize,
    pub sim: SimConfig,
    pub fixtures: FixturePaths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            setup: SetupCode::S1a,
            seed: 0,
            personas: None,
            runs: None,
            sessions: None,
            grid: GridChoice::Default,
            outer_k: 10,
            inner_k: 10,
            sim: SimConfig::default(),
            fixtures: FixturePaths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn experiment_id(&self) -> String {
        format!("{}-seed{}", self.setup, self.seed)
    }

    pub fn run_configs(&self) -> Vec<RunConfig> {
        let mut p = preset(self.setup.base());
        if let Some(ids) = &self.personas {
            p.personas = ids.clone();
        }
        if let Some(r) = self.runs {
            p.runs = r;
        }
        if let Some(s) = self.sessions {
            p.sessions = s;
        }
        p.run_configs()
    }

    pub fn effective_sim(&self) -> SimConfig {
        let mut sim = self.sim.clone();
        sim.boosted |= preset(self.setup.base()).boosted;
        sim
    }

    pub fn cv_options(&self) -> CvOptions {
        CvOptions { outer_k: self.outer_k, inner_k: self.inner_k, seed: derive(self.seed, "cv", &[]), ..CvOptions::default() }
    }
}

/// Runs every run of the experiment against a fresh simulator.
pub fn simulate(cfg: &ExperimentConfig, res: &Resources) -> Result<Vec<RunRecord>, ReportError> {
    let sim = cfg.effective_sim();
    sim.validate().map_err(tagged(Stage::Simulation))?;
    let configs = cfg.run_configs();
    let mut personas = Vec::new();
    for id in configs.iter().map(|c| c.persona_id).collect::<BTreeSet<_>>() {
        personas.push(res.persona(id)?.clone());
    }
    configs
        .par_iter()
        .map(|rc| {
            let persona = res.persona(rc.persona_id)?;
            let control = res.world.control_page_set(&rc.control_set).map_err(tagged(Stage::Simulation))?;
            validate_experiment(&personas, &control).map_err(tagged(Stage::Personas))?;
            let mut eco = EcoSim::new(res.world.clone(), sim.clone(), res.db.clone(), &rc.control_set).map_err(tagged(Stage::Simulation))?;
            let inputs = RunInputs {
                persona_pages: &persona.persona_pages,
                control_pages: &control.pages,
                filters: &res.filters,
                extract: ExtractOptions::default(),
                clock: ClockMode::Simulated,
            };
            execute_run(rc, &inputs, &mut eco, cfg.seed).map_err(tagged(Stage::Simulation))
        })
        .collect()
}

/// One dataset per persona, or a single combined dataset for combined setups.
pub fn build_datasets(runs: &[RunRecord], setup: SetupCode, db: &CategoryDb) -> Result<Vec<(Option<u32>, LabeledDataset)>, ReportError> {
    let queue = ReviewQueue::in_memory();
    let cat = Categorizer::new(db, &queue);
    let mut by_persona: BTreeMap<u32, Vec<RunRecord>> = BTreeMap::new();
    for r in runs {
        by_persona.entry(r.config.persona_id).or_default().push(r.clone());
    }
    let base = setup.base();
    let mut out = Vec::new();
    for (id, rs) in &by_persona {
        out.push((Some(*id), assemble(rs, base, &cat).map_err(tagged(Stage::Features))?));
    }
    if setup.is_combined() {
        let parts: Vec<LabeledDataset> = out.into_iter().map(|(_, d)| d).collect();
        return Ok(vec![(None, combine(&parts).map_err(tagged(Stage::Features))?)]);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEval {
    pub persona: Option<u32>,
    pub report: EvalReport,
}

pub fn evaluate(datasets: &[(Option<u32>, LabeledDataset)], grid: &[ModelSpec], opts: &CvOptions) -> Result<Vec<DatasetEval>, ReportError> {
    datasets
        .iter()
        .map(|(persona, ds)| {
            let report = nested_cv_grouped(&ds.rows, &ds.labels, &ds.groups(), &ds.feature_names, grid, opts).map_err(tagged(Stage::Detection))?;
            Ok(DatasetEval { persona: *persona, report })
        })
        .collect()
}

pub fn auc_table(evals: &[DatasetEval]) -> String {
    let mut out = String::from("dataset,samples,features,selected_model,auc_outer_mean,auc_outer_std\n");
    for e in evals {
        let name = e.persona.map_or("combined".to_owned(), |p| format!("persona-{p}"));
        let _ = writeln!(
            out,
            "{name},{},{},\"{}\",{:.4},{:.4}",
            e.report.n_samples, e.report.n_features, e.report.selected, e.report.auc, e.report.auc_std
        );
    }
    out
}

/// Hex SHA-256 of a dataset's CSV form.
pub fn dataset_hash(ds: &LabeledDataset) -> String {
    Sha256::digest(ds.to_csv().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct ExperimentStore {
    root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct StoreMeta {
    schema_version: u32,
}

#[derive(Serialize, Deserialize)]
struct StoredRun {
    run_id: String,
    seed: u64,
    persona_pages: Vec<String>,
    control_pages: Vec<String>,
    config: RunConfig,
}

impl ExperimentStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ReportError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(store_err)?;
        let meta = root.join("store.toml");
        if meta.exists() {
            let text = fs::read_to_string(&meta).map_err(store_err)?;
            let m: StoreMeta = toml::from_str(&text).map_err(store_err)?;
            if m.schema_version != SCHEMA_VERSION {
                return Err(ReportError::Schema { found: m.schema_version, expected: SCHEMA_VERSION });
            }
        } else {
            let text = toml::to_string(&StoreMeta { schema_version: SCHEMA_VERSION }).map_err(store_err)?;
            fs::write(&meta, text).map_err(store_err)?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn experiment_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn experiments(&self) -> Result<Vec<String>, ReportError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(tagged(Stage::Store))? {
            let entry = entry.map_err(tagged(Stage::Store))?;
            if entry.path().is_dir() {
                out.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn create_experiment(&self, id: &str) -> Result<PathBuf, ReportError> {
        let dir = self.experiment_dir(id);
        if dir.exists() {
            return Err(ReportError::Exists(id.to_owned()));
        }
        fs::create_dir_all(dir.join("runs")).map_err(tagged(Stage::Store))?;
        Ok(dir)
    }

    pub fn write_run(&self, experiment: &str, run: &RunRecord) -> Result<(), ReportError> {
        let dir = self.experiment_dir(experiment).join("runs").join(&run.run_id);
        if dir.exists() {
            return Err(ReportError::Exists(format!("{experiment}/{}", run.run_id)));
        }
        fs::create_dir_all(&dir).map_err(store_err)?;
        let meta = StoredRun {
            run_id: run.run_id.clone(),
            seed: run.seed,
            persona_pages: run.persona_pages.clone(),
            control_pages: run.control_pages.clone(),
            config: run.config.clone(),
        };
        fs::write(dir.join("config.toml"), toml::to_string(&meta).map_err(store_err)?).map_err(store_err)?;
        let mut sessions = fs::File::create(dir.join("sessions.log")).map_err(store_err)?;
        let mut observations = fs::File::create(dir.join("observations.log")).map_err(store_err)?;
        for s in &run.sessions {
            let mut stripped = s.clone();
            for stage in &mut stripped.stages {
                for d in &mut stage.devices {
                    for o in d.observations.drain(..) {
                        writeln!(observations, "{}", serde_json::to_string(&o).map_err(store_err)?).map_err(store_err)?;
                    }
                }
            }
            writeln!(sessions, "{}", serde_json::to_string(&stripped).map_err(store_err)?).map_err(store_err)?;
        }
        Ok(())
    }

    /// The config an experiment was run with.
    pub fn load_config(&self, experiment: &str) -> Result<ExperimentConfig, ReportError> {
        let path = self.experiment_dir(experiment).join("experiment.toml");
        let text = fs::read_to_string(&path)
            .map_err(|e| ReportError::Pipeline { stage: Stage::Store, message: format!("{}: {e}", path.display()) })?;
        toml::from_str(&text).map_err(store_err)
    }

    pub fn load_report(&self, experiment: &str) -> Result<String, ReportError> {
        let path = self.experiment_dir(experiment).join("report.txt");
        fs::read_to_string(&path).map_err(|e| ReportError::Pipeline { stage: Stage::Store, message: format!("{}: {e}", path.display()) })
    }

    pub fn load_runs(&self, experiment: &str) -> Result<Vec<RunRecord>, ReportError> {
        let runs_dir = self.experiment_dir(experiment).join("runs");
        let mut names: Vec<PathBuf> = fs::read_dir(&runs_dir)
            .map_err(|e| ReportError::Pipeline { stage: Stage::Store, message: format!("{}: {e}", runs_dir.display()) })?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        names.sort();
        let mut out = Vec::new();
        for dir in names {
            let meta: StoredRun = toml::from_str(&fs::read_to_string(dir.join("config.toml")).map_err(store_err)?).map_err(store_err)?;
            let mut sessions: Vec<SessionRecord> = Vec::new();
            for line in BufReader::new(fs::File::open(dir.join("sessions.log")).map_err(store_err)?).lines() {
                sessions.push(serde_json::from_str(&line.map_err(store_err)?).map_err(store_err)?);
            }
            let mut by_key: BTreeMap<(u32, String, String), Vec<AdObservation>> = BTreeMap::new();
            for line in BufReader::new(fs::File::open(dir.join("observations.log")).map_err(store_err)?).lines() {
                let o: AdObservation = serde_json::from_str(&line.map_err(store_err)?).map_err(store_err)?;
                by_key.entry((o.session_id, o.stage_id.clone(), o.device_id.clone())).or_default().push(o);
            }
            for s in &mut sessions {
                for stage in &mut s.stages {
                    for d in &mut stage.devices {
                        let key = (s.session_id, stage.stage_id.clone(), d.device_id.clone());
                        d.observations = by_key.remove(&key).unwrap_or_default();
                    }
                }
            }
            if let Some(((session, stage, device), _)) = by_key.into_iter().next() {
                return Err(ReportError::Pipeline {
                    stage: Stage::Store,
                    message: format!("observation references missing stage {stage} of session {session} for {device}"),
                });
            }
            out.push(RunRecord {
                run_id: meta.run_id,
                seed: meta.seed,
                config: meta.config,
                persona_pages: meta.persona_pages,
                control_pages: meta.control_pages,
                sessions,
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub value: u64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdsCdf {
    /// (device role, metric) → empirical CDF over sessions.
    pub curves: BTreeMap<String, Vec<CdfPoint>>,
    pub mobile_sessions: usize,
    pub mobile_sessions_under_five: f64,
    pub desktop_visits: usize,
    pub desktop_mean_per_visit: f64,
}

fn empirical_cdf(values: &[u64]) -> Vec<CdfPoint> {
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let n = sorted.len() as f64;
    let mut out: Vec<CdfPoint> = Vec::new();
    for (i, v) in sorted.iter().enumerate() {
        let fraction = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(p) if p.value == *v => p.fraction = fraction,
            _ => out.push(CdfPoint { value: *v, fraction }),
        }
    }
    out
}

fn role_name(role: DeviceRole) -> &'static str {
    match role {
        DeviceRole::Mobile => "mobile",
        DeviceRole::PairedPc => "paired_pc",
        DeviceRole::BaselinePc => "baseline_pc",
    }
}

/// Per-session ad and keyword counts for each device role.
pub fn ads_cdf(runs: &[RunRecord], db: &CategoryDb) -> AdsCdf {
    let mut samples: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    let mut mobile_sessions = Vec::new();
    let mut desktop_visits: Vec<u32> = Vec::new();
    for run in runs {
        for s in &run.sessions {
            let mut per_device: BTreeMap<(&str, DeviceRole), (u64, u64)> = BTreeMap::new();
            for stage in s.stages.iter().filter(|st| matches!(st.kind, StageKind::Before | StageKind::MobileTest | StageKind::After { .. })) {
                for d in &stage.devices {
                    let entry = per_device.entry((d.device_id.as_str(), d.role)).or_insert((0, 0));
                    entry.0 += d.observations.len() as u64;
                    entry.1 += d.observations.iter().map(|o| db.get(&o.landing_domain).map_or(1, <[String]>::len) as u64).sum::<u64>();
                    if d.role != DeviceRole::Mobile {
                        desktop_visits.extend(&d.ads_per_visit);
                    }
                }
            }
            for ((_, role), (ads, keywords)) in per_device {
                samples.entry(format!("{},ads", role_name(role))).or_default().push(ads);
                samples.entry(format!("{},keywords", role_name(role))).or_default().push(keywords);
                if role == DeviceRole::Mobile {
                    mobile_sessions.push(ads);
                }
            }
        }
    }
    let under_five = mobile_sessions.iter().filter(|&&a| a < 5).count();
    AdsCdf {
        curves: samples.into_iter().map(|(k, v)| (k, empirical_cdf(&v))).collect(),
        mobile_sessions: mobile_sessions.len(),
        mobile_sessions_under_five: if mobile_sessions.is_empty() { 0.0 } else { under_five as f64 / mobile_sessions.len() as f64 },
        desktop_visits: desktop_visits.len(),
        desktop_mean_per_visit: if desktop_visits.is_empty() {
            0.0
        } else {
            desktop_visits.iter().map(|&v| f64::from(v)).sum::<f64>() / desktop_visits.len() as f64
        },
    }
}

impl AdsCdf {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("role,metric,value,cdf\n");
        for (key, points) in &self.curves {
            for p in points {
                let _ = writeln!(out, "{key},{},{:.6}", p.value, p.fraction);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrgCoverage {
    pub organization: String,
    pub cdt: bool,
    pub pages: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerCoverage {
    pub total_pages: usize,
    pub orgs: Vec<OrgCoverage>,
    /// Share of detected organizations flagged as CDT.
    pub cdt_fraction: f64,
}

/// Page coverage per organization, given the third-party hosts seen on each page.
pub fn tracker_coverage(list: &TrackerList, pages: &[(String, Vec<String>)]) -> TrackerCoverage {
    let mut seen: BTreeMap<&str, (bool, BTreeSet<&str>)> = BTreeMap::new();
    for (page, hosts) in pages {
        for h in hosts {
            if let Some(org) = list.organization_of(h) {
                seen.entry(org.organization.as_str()).or_insert((org.cdt, BTreeSet::new())).1.insert(page.as_str());
            }
        }
    }
    let total = pages.len();
    let mut orgs: Vec<OrgCoverage> = seen
        .iter()
        .map(|(name, (cdt, p))| OrgCoverage {
            organization: (*name).to_owned(),
            cdt: *cdt,
            pages: p.len(),
            fraction: if total == 0 { 0.0 } else { p.len() as f64 / total as f64 },
        })
        .collect();
    orgs.sort_by(|a, b| b.pages.cmp(&a.pages).then_with(|| a.organization.cmp(&b.organization)));
    let cdt = orgs.iter().filter(|o| o.cdt).count();
    TrackerCoverage {
        total_pages: total,
        cdt_fraction: if orgs.is_empty() { 0.0 } else { cdt as f64 / orgs.len() as f64 },
        orgs,
    }
}

impl TrackerCoverage {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("organization,cdt,pages,fraction\n");
        for o in &self.orgs {
            let _ = writeln!(out, "{},{},{},{:.4}", o.organization, o.cdt, o.pages, o.fraction);
        }
        let _ = writeln!(out, "# pages {} cdt_fraction {:.4}", self.total_pages, self.cdt_fraction);
        out
    }
}

/// Third-party hosts on every distinct persona page, as served by the simulator.
pub fn persona_page_hosts(res: &Resources, sim: &SimConfig) -> Result<Vec<(String, Vec<String>)>, ReportError> {
    let mut eco = EcoSim::new(res.world.clone(), sim.clone(), res.db.clone(), "weather").map_err(tagged(Stage::Simulation))?;
    eco.begin_run("coverage", 0).map_err(tagged(Stage::Simulation))?;
    let pages: BTreeSet<&String> = res.personas.iter().flat_map(|p| &p.persona_pages).collect();
    let mut out = Vec::new();
    for page in pages {
        let req = VisitRequest {
            device_id: "probe".into(),
            kind: DeviceKind::Desktop,
            ip_label: "probe".into(),
            page_domain: page.clone(),
            is_train: true,
            tick: 0,
        };
        let served = eco.visit(&req, &mut CookieJar::default()).map_err(tagged(Stage::Simulation))?;
        out.push((page.clone(), resource_hosts(&served.snapshot)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarity {
    pub device_a: String,
    pub device_b: String,
    pub category: String,
    pub p_value: f64,
    pub decision: Decision,
}

/// Two-sided permutation tests between every pair of devices on the
/// per-session share of ads in `category`.
pub fn pairwise_similarity(run: &RunRecord, db: &CategoryDb, category: &str, n_perms: u64, alpha: f64, seed: u64) -> Vec<PairSimilarity> {
    let mut shares: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for s in &run.sessions {
        let mut per_device: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for stage in s.stages.iter().filter(|st| matches!(st.kind, StageKind::Before | StageKind::MobileTest | StageKind::After { .. })) {
            for d in &stage.devices {
                let e = per_device.entry(d.device_id.as_str()).or_insert((0, 0));
                e.0 += d.observations.len();
                e.1 += d.observations.iter().filter(|o| db.get(&o.landing_domain).is_some_and(|l| l.iter().any(|c| c == category))).count();
            }
        }
        for (device, (total, hits)) in per_device {
            if total > 0 {
                shares.entry(device).or_default().push(hits as f64 / total as f64);
            }
        }
    }
    let devices: Vec<&str> = shares.keys().copied().collect();
    let mut out = Vec::new();
    for (i, a) in devices.iter().enumerate() {
        for b in &devices[i + 1..] {
            let pair_seed = derive(seed, "similarity", &[i as u64, out.len() as u64]);
            if let Ok(r) = permutation_test(&shares[a], &shares[b], n_perms, alpha, pair_seed) {
                out.push(PairSimilarity {
                    device_a: (*a).to_owned(),
                    device_b: (*b).to_owned(),
                    category: category.to_owned(),
                    p_value: r.p_value,
                    decision: r.decision,
                });
            }
        }
    }
    out
}

/// Most frequent category among a persona's pages.
pub fn dominant_category(pages: &[String], db: &CategoryDb) -> Option<String> {
    let queue = ReviewQueue::in_memory();
    let cat = Categorizer::new(db, &queue);
    let tf = persona_keywords(pages, &cat).ok()?;
    tf.into_iter()
        .filter(|(k, _)| k != crate::categorizer::UNCATEGORIZED)
        .fold(None::<(String, f64)>, |best, (k, v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((k, v)),
        })
        .map(|(k, _)| k)
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub experiment_id: String,
    pub report: String,
    pub evals: Vec<DatasetEval>,
}

/// Persona build, simulation, extraction, features and detection, all
/// persisted under a new experiment in `store`.
pub fn run_pipeline(cfg: &ExperimentConfig, store: &ExperimentStore) -> Result<PipelineOutcome, ReportError> {
    let res = Resources::load(&cfg.fixtures)?;
    let id = cfg.experiment_id();
    let runs = simulate(cfg, &res)?;
    let dir = store.create_experiment(&id)?;
    fs::write(dir.join("experiment.toml"), toml::to_string(cfg).map_err(store_err)?).map_err(store_err)?;
    for r in &runs {
        store.write_run(&id, r)?;
    }
    let report = analyze_runs(cfg, &res, &runs, Some(&dir))?;
    fs::write(dir.join("report.txt"), &report.0).map_err(store_err)?;
    Ok(PipelineOutcome { experiment_id: id, report: report.0, evals: report.1 })
}

/// Analysis of stored runs. Datasets are written under `dir/datasets` when a
/// directory is given; the report text is returned.
pub fn analyze_runs(cfg: &ExperimentConfig, res: &Resources, runs: &[RunRecord], dir: Option<&Path>) -> Result<(String, Vec<DatasetEval>), ReportError> {
    let mut out = String::new();
    let _ = writeln!(out, "experiment: {}", cfg.experiment_id());
    let _ = writeln!(out, "setup: {}", cfg.setup);
    let _ = writeln!(out, "seed: {}", cfg.seed);
    let _ = writeln!(out, "runs: {}", runs.len());
    let cdf = ads_cdf(runs, &res.db);
    let _ = writeln!(out, "mobile_sessions_under_five_ads: {:.4}", cdf.mobile_sessions_under_five);
    let _ = writeln!(out, "desktop_mean_ads_per_visit: {:.4}", cdf.desktop_mean_per_visit);
    if cfg.setup.is_preliminary() {
        for run in runs {
            let category = dominant_category(&run.persona_pages, &res.db).unwrap_or_default();
            for p in pairwise_similarity(run, &res.db, &category, 10_000, 0.05, derive(cfg.seed, "similarity", &[])) {
                let _ = writeln!(
                    out,
                    "similarity {} vs {} on {}: p {:.4} {:?}",
                    p.device_a, p.device_b, p.category, p.p_value, p.decision
                );
            }
        }
        return Ok((out, Vec::new()));
    }
    let datasets = build_datasets(runs, cfg.setup, &res.db)?;
    for (persona, ds) in &datasets {
        let stem = persona.map_or("combined".to_owned(), |p| format!("persona-{p:02}"));
        if let Some(dir) = dir {
            ds.write(&dir.join("datasets"), &stem).map_err(tagged(Stage::Store))?;
        }
        let m = ds.manifest();
        let _ = writeln!(out, "dataset {stem}: samples {} features {} sha256 {}", m.samples, m.features, dataset_hash(ds));
    }
    if cfg.setup.is_combined() {
        if let Some((_, ds)) = datasets.first() {
            let xy = Xy::new(&ds.rows, &ds.labels).map_err(tagged(Stage::Detection))?;
            let sel = select_features(&xy, 100, derive(cfg.seed, "selection", &[])).map_err(tagged(Stage::Detection))?;
            let _ = writeln!(out, "feature_selection: kept {} of {} ({:.3})", sel.kept.len(), ds.width(), sel.kept.len() as f64 / ds.width() as f64);
        }
    }
    let evals = evaluate(&datasets, &cfg.grid.specs(), &cfg.cv_options())?;
    out.push('\n');
    out.push_str(&auc_table(&evals));
    for e in &evals {
        let name = e.persona.map_or("combined".to_owned(), |p| format!("persona-{p}"));
        let _ = writeln!(out, "\n[{name}]");
        out.push_str(&e.report.to_text());
    }
    Ok((out, evals))
}
