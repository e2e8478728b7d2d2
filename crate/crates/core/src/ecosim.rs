//! Simulated ad ecosystem with known cross-device pairing.
//!
//! Trackers embedded on pages set cookies, accumulate per-cookie interest
//! histograms from training visits, and log which IP each cookie appears
//! under. A CDT-capable tracker may link two cookies seen behind a common IP;
//! once linked, ads for one device can be drawn from the other's interests.
//! Every served ad slot is recorded in a placement log, which is the ground
//! truth that extraction must recover.

use std::collections::{BTreeMap, BTreeSet};

use percent_encoding::{utf8_percent_encode, NON_ALPHANUMERIC};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::categorizer::CategoryDb;
use crate::dom::{DomSnapshot, Element};
use crate::persona::ControlPageSet;
use crate::rng::{fnv1a, keyed_unit, stream};
use crate::scheduler::{AdEcosystem, CookieJar, DeviceKind, SchedulerError, ServedPage, VisitRequest};

/// Fixed salt for world-level draws (tracker embedding), independent of run seeds.
const WORLD_SALT: u64 = 0x0005_eed0_fa11;

#[derive(Debug, Error)]
pub enum EcoError {
    #[error("world file: {0}")]
    World(String),
    #[error("invalid sim config: {0}")]
    Config(String),
    #[error("unknown control set `{0}`")]
    UnknownControlSet(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub id: String,
    pub category: String,
    pub landing_domains: Vec<String>,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerSpec {
    pub tracker_id: String,
    pub organization: String,
    pub domains: Vec<String>,
    pub click_host: String,
    pub is_cdt: bool,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPageSpec {
    pub domain: String,
    pub trackers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSetSpec {
    pub name: String,
    pub cdt_tracker_pages: bool,
    pub pages: Vec<ControlPageSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub campaigns: Vec<Campaign>,
    pub trackers: Vec<TrackerSpec>,
    pub control_sets: Vec<ControlSetSpec>,
}

impl World {
    pub fn parse(text: &str) -> Result<Self, EcoError> {
        let world: World = toml::from_str(text).map_err(|e| EcoError::World(e.to_string()))?;
        world.validate()?;
        Ok(world)
    }

    pub fn bundled() -> Self {
        Self::parse(crate::fixtures::WORLD).expect("bundled world is valid")
    }

    fn validate(&self) -> Result<(), EcoError> {
        let bad = |m: String| Err(EcoError::World(m));
        if self.campaigns.iter().all(|c| !c.active) {
            return bad("no active campaigns".into());
        }
        for c in &self.campaigns {
            if c.landing_domains.is_empty() {
                return bad(format!("campaign {} has no landing domains", c.id));
            }
        }
        for t in &self.trackers {
            if !(0.0..=1.0).contains(&t.coverage) {
                return bad(format!("tracker {} coverage out of range", t.tracker_id));
            }
            if t.domains.is_empty() {
                return bad(format!("tracker {} has no domains", t.tracker_id));
            }
        }
        let ids: BTreeSet<&str> = self.trackers.iter().map(|t| t.tracker_id.as_str()).collect();
        for set in &self.control_sets {
            for p in &set.pages {
                if let Some(t) = p.trackers.iter().find(|t| !ids.contains(t.as_str())) {
                    return bad(format!("control page {} lists unknown tracker {t}", p.domain));
                }
            }
        }
        Ok(())
    }

    pub fn control_set(&self, name: &str) -> Result<&ControlSetSpec, EcoError> {
        self.control_sets.iter().find(|s| s.name == name).ok_or_else(|| EcoError::UnknownControlSet(name.to_owned()))
    }

    pub fn control_page_set(&self, name: &str) -> Result<ControlPageSet, EcoError> {
        let set = self.control_set(name)?;
        Ok(ControlPageSet {
            pages: set.pages.iter().map(|p| p.domain.clone()).collect(),
            neutrality_attested: true,
            cdt_tracker_pages: set.cdt_tracker_pages,
        })
    }

    /// Categories that have at least one active campaign, sorted.
    pub fn campaign_categories(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.campaigns.iter().filter(|c| c.active).map(|c| c.category.as_str()).collect();
        set.into_iter().map(str::to_owned).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Scales every pairing probability; 0 disables cross-device targeting.
    pub cdt_strength: f64,
    pub retarget_prob: f64,
    pub behavioral_prob: f64,
    pub noise_prob: f64,
    pub pairing_ip_weight: f64,
    pub pairing_behavior_weight: f64,
    /// Offset inside the logistic; negative values make weak evidence unlikely to pair.
    pub pairing_bias: f64,
    /// Shared-IP activity at which the IP evidence term reaches one half.
    pub ip_half_saturation: f64,
    pub mobile_slots: u32,
    pub mobile_fill: f64,
    pub desktop_ads_min: u32,
    pub desktop_ads_max: u32,
    pub redirect_rate: f64,
    pub nested_frame_rate: f64,
    /// CDT trackers embedded on every persona and control page.
    pub boosted: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            cdt_strength: 0.9,
            retarget_prob: 0.1,
            behavioral_prob: 0.05,
            noise_prob: 0.05,
            pairing_ip_weight: 6.0,
            pairing_behavior_weight: 2.0,
            pairing_bias: -3.0,
            ip_half_saturation: 1.0,
            mobile_slots: 5,
            mobile_fill: 0.07,
            desktop_ads_min: 2,
            desktop_ads_max: 4,
            redirect_rate: 0.1,
            nested_frame_rate: 0.1,
            boosted: false,
        }
    }
}

impl SimConfig {
    pub fn cross_device_share(&self) -> f64 {
        1.0 - (self.retarget_prob + self.behavioral_prob + self.noise_prob)
    }

    pub fn validate(&self) -> Result<(), EcoError> {
        let probs = [
            ("cdt_strength", self.cdt_strength),
            ("retarget_prob", self.retarget_prob),
            ("behavioral_prob", self.behavioral_prob),
            ("noise_prob", self.noise_prob),
            ("mobile_fill", self.mobile_fill),
            ("redirect_rate", self.redirect_rate),
            ("nested_frame_rate", self.nested_frame_rate),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(EcoError::Config(format!("{name} must be in [0, 1]")));
            }
        }
        if self.cross_device_share() < -1e-12 {
            return Err(EcoError::Config("slot-type probabilities exceed 1".into()));
        }
        if self.pairing_ip_weight < 0.0 || self.pairing_behavior_weight < 0.0 || self.ip_half_saturation <= 0.0 {
            return Err(EcoError::Config("pairing weights must be nonnegative".into()));
        }
        if self.desktop_ads_min > self.desktop_ads_max {
            return Err(EcoError::Config("desktop ad range is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotKind {
    CrossDevice,
    Retarget,
    Behavioral,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClickEncoding {
    Adurl,
    DoubleEncodedRedirect,
}

/// One ad the simulator placed on a page.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub slot: u32,
    pub tracker_id: String,
    pub campaign_id: String,
    pub category: String,
    pub landing_domain: String,
    pub landing_url: String,
    /// Slot type drawn before fallbacks.
    pub drawn: SlotKind,
    /// Slot type actually served.
    pub served: SlotKind,
    pub encoding: ClickEncoding,
}

#[derive(Debug, Clone, Default)]
struct CookieInfo {
    histogram: BTreeMap<String, f64>,
    ip_volume: BTreeMap<String, u64>,
}

#[derive(Debug, Clone)]
struct TrackerState {
    cookies: BTreeMap<String, CookieInfo>,
    graph: BTreeSet<(String, String)>,
    evaluated: BTreeSet<(String, String)>,
    minted: u64,
    rng: ChaCha8Rng,
}

fn ordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_owned(), b.to_owned())
    } else {
        (b.to_owned(), a.to_owned())
    }
}

fn cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(k, x)| b.get(k).map(|y| x * y)).sum();
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Pairing probability for two cookies given their shared-IP activity and
/// interest histograms.
pub fn pairing_probability(cfg: &SimConfig, shared_ip_activity: f64, histogram_cosine: f64) -> f64 {
    let evidence = shared_ip_activity / (shared_ip_activity + cfg.ip_half_saturation);
    cfg.cdt_strength
        * logistic(cfg.pairing_bias + cfg.pairing_ip_weight * evidence + cfg.pairing_behavior_weight * histogram_cosine)
}

/// True same-user device pairs of a run, by device id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub pairs: Vec<(String, String)>,
}

impl GroundTruth {
    /// Every desktop behind the mobile's IP belongs to the same user.
    pub fn from_topology(topology: &crate::scheduler::Topology) -> Self {
        let mut pairs = Vec::new();
        if let Some(m) = topology.mobile() {
            for d in topology.desktops().filter(|d| d.ip_label == m.ip_label) {
                pairs.push((m.device_id.clone(), d.device_id.clone()));
            }
        }
        Self { pairs }
    }

    pub fn is_paired(&self, device: &str) -> bool {
        self.pairs.iter().any(|(a, b)| a == device || b == device)
    }
}

/// Cookie pairs a tracker has linked, with the devices that hold them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkedPair {
    pub tracker_id: String,
    pub cookies: (String, String),
    pub devices: (String, String),
}

pub struct EcoSim {
    world: World,
    config: SimConfig,
    db: CategoryDb,
    campaigns_by_category: BTreeMap<String, Vec<usize>>,
    active: Vec<usize>,
    control_trackers: BTreeMap<String, Vec<usize>>,
    trackers: Vec<TrackerState>,
    layout_rng: ChaCha8Rng,
    cookie_owner: BTreeMap<String, String>,
    session: u32,
}

impl EcoSim {
    pub fn new(world: World, config: SimConfig, db: CategoryDb, control_set: &str) -> Result<Self, EcoError> {
        config.validate()?;
        let mut campaigns_by_category: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut active = Vec::new();
        for (i, c) in world.campaigns.iter().enumerate().filter(|(_, c)| c.active) {
            campaigns_by_category.entry(c.category.clone()).or_default().push(i);
            active.push(i);
        }
        let index: BTreeMap<&str, usize> =
            world.trackers.iter().enumerate().map(|(i, t)| (t.tracker_id.as_str(), i)).collect();
        let set = world.control_set(control_set)?;
        let mut control_trackers = BTreeMap::new();
        for p in &set.pages {
            let mut ids: Vec<usize> = p.trackers.iter().map(|t| index[t.as_str()]).collect();
            if config.boosted {
                ids.extend(world.trackers.iter().enumerate().filter(|(_, t)| t.is_cdt).map(|(i, _)| i));
            }
            ids.sort_unstable();
            ids.dedup();
            control_trackers.insert(p.domain.clone(), ids);
        }
        let trackers = Self::fresh_trackers(&world, 0, "");
        Ok(Self {
            world,
            config,
            db,
            campaigns_by_category,
            active,
            control_trackers,
            trackers,
            layout_rng: stream(0, "layout", &[]),
            cookie_owner: BTreeMap::new(),
            session: 0,
        })
    }

    fn fresh_trackers(world: &World, seed: u64, run_id: &str) -> Vec<TrackerState> {
        (0..world.trackers.len())
            .map(|i| TrackerState {
                cookies: BTreeMap::new(),
                graph: BTreeSet::new(),
                evaluated: BTreeSet::new(),
                minted: 0,
                rng: stream(seed, "tracker", &[fnv1a(run_id.as_bytes()), i as u64]),
            })
            .collect()
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// Trackers embedded on a page, by index into the world's tracker list.
    pub fn trackers_on(&self, domain: &str, is_control: bool) -> Vec<usize> {
        if is_control {
            if let Some(ids) = self.control_trackers.get(domain) {
                return ids.clone();
            }
        }
        self.world
            .trackers
            .iter()
            .enumerate()
            .filter(|(_, t)| {
                let coverage = if self.config.boosted && t.is_cdt { 1.0 } else { t.coverage };
                keyed_unit(WORLD_SALT, &[&t.tracker_id, domain]) < coverage
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Cookie pairs linked so far in the current run.
    pub fn linked_pairs(&self) -> Vec<LinkedPair> {
        let mut out = Vec::new();
        for (spec, state) in self.world.trackers.iter().zip(&self.trackers) {
            for (a, b) in &state.graph {
                let owner = |c: &String| self.cookie_owner.get(c).cloned().unwrap_or_default();
                out.push(LinkedPair { tracker_id: spec.tracker_id.clone(), cookies: (a.clone(), b.clone()), devices: (owner(a), owner(b)) });
            }
        }
        out
    }

    fn campaign_categories_of(&self, domain: &str) -> Vec<String> {
        self.db.get(domain).map(<[String]>::to_vec).unwrap_or_default()
    }

    fn cookie_for(&mut self, t: usize, jar: &mut CookieJar, device_id: &str) -> String {
        let tracker_id = &self.world.trackers[t].tracker_id;
        if let Some(c) = jar.get(tracker_id) {
            if self.trackers[t].cookies.contains_key(c) {
                return c.to_owned();
            }
        }
        let state = &mut self.trackers[t];
        state.minted += 1;
        let cookie = format!("{tracker_id}-{:06}", state.minted);
        state.cookies.insert(cookie.clone(), CookieInfo::default());
        jar.set(tracker_id, cookie.clone());
        self.cookie_owner.insert(cookie.clone(), device_id.to_owned());
        cookie
    }

    /// Links `cookie` with co-located cookies, each pair evaluated at most once
    /// per session. Returns the cookie's partners.
    fn partners(&mut self, t: usize, cookie: &str) -> Vec<String> {
        let cfg = self.config.clone();
        let state = &mut self.trackers[t];
        let me = state.cookies[cookie].clone();
        let others: Vec<String> = state.cookies.keys().filter(|k| k.as_str() != cookie).cloned().collect();
        for other in others {
            let key = ordered(cookie, &other);
            if state.graph.contains(&key) || state.evaluated.contains(&key) {
                continue;
            }
            let them = &state.cookies[&other];
            let shared: u64 = me
                .ip_volume
                .iter()
                .filter_map(|(ip, v)| them.ip_volume.get(ip).map(|w| (*v).min(*w)))
                .sum();
            if shared == 0 {
                continue;
            }
            let p = pairing_probability(&cfg, shared as f64, cosine(&me.histogram, &them.histogram));
            state.evaluated.insert(key.clone());
            if state.rng.gen::<f64>() < p {
                state.graph.insert(key);
            }
        }
        state
            .graph
            .iter()
            .filter_map(|(a, b)| {
                if a == cookie {
                    Some(b.clone())
                } else if b == cookie {
                    Some(a.clone())
                } else {
                    None
                }
            })
            .collect()
    }

    fn sample_category(rng: &mut ChaCha8Rng, hist: &BTreeMap<String, f64>, known: &BTreeMap<String, Vec<usize>>) -> Option<String> {
        let items: Vec<(&String, f64)> = hist.iter().filter(|(k, w)| **w > 0.0 && known.contains_key(*k)).map(|(k, w)| (k, *w)).collect();
        if items.is_empty() {
            return None;
        }
        let dist = WeightedIndex::new(items.iter().map(|(_, w)| *w)).ok()?;
        Some(items[dist.sample(rng)].0.clone())
    }

    fn top_category(hist: &BTreeMap<String, f64>, known: &BTreeMap<String, Vec<usize>>) -> Option<String> {
        hist.iter()
            .filter(|(k, w)| **w > 0.0 && known.contains_key(*k))
            .fold(None::<(&String, f64)>, |best, (k, w)| match best {
                Some((_, bw)) if bw >= *w => best,
                _ => Some((k, *w)),
            })
            .map(|(k, _)| k.clone())
    }

    fn draw_kind(&self, u: f64) -> SlotKind {
        let c = &self.config;
        let cross = c.cross_device_share();
        if u < cross {
            SlotKind::CrossDevice
        } else if u < cross + c.retarget_prob {
            SlotKind::Retarget
        } else if u < cross + c.retarget_prob + c.behavioral_prob {
            SlotKind::Behavioral
        } else {
            SlotKind::Noise
        }
    }

    /// Fills one slot served by tracker `t` to `cookie`.
    fn fill_slot(&mut self, t: usize, cookie: &str) -> (SlotKind, SlotKind, usize, usize) {
        let u: f64 = self.trackers[t].rng.gen();
        let drawn = self.draw_kind(u);
        let mut category = None;
        let mut served = SlotKind::Noise;
        match drawn {
            SlotKind::CrossDevice if self.world.trackers[t].is_cdt && self.config.cdt_strength > 0.0 => {
                let partners = self.partners(t, cookie);
                let state = &mut self.trackers[t];
                let hists: Vec<&String> = partners.iter().filter(|p| state.cookies[*p].histogram.values().any(|w| *w > 0.0)).collect();
                if !hists.is_empty() {
                    let pick = hists[state.rng.gen_range(0..hists.len())].clone();
                    category = Self::sample_category(&mut state.rng, &state.cookies[&pick].histogram, &self.campaigns_by_category);
                    served = SlotKind::CrossDevice;
                }
            }
            SlotKind::Retarget => {
                category = Self::top_category(&self.trackers[t].cookies[cookie].histogram, &self.campaigns_by_category);
                served = SlotKind::Retarget;
            }
            SlotKind::Behavioral => {
                let state = &mut self.trackers[t];
                let hist = state.cookies[cookie].histogram.clone();
                category = Self::sample_category(&mut state.rng, &hist, &self.campaigns_by_category);
                served = SlotKind::Behavioral;
            }
            _ => {}
        }
        let rng = &mut self.trackers[t].rng;
        let campaign = match category {
            Some(cat) => {
                let pool = &self.campaigns_by_category[&cat];
                pool[rng.gen_range(0..pool.len())]
            }
            None => {
                served = SlotKind::Noise;
                self.active[rng.gen_range(0..self.active.len())]
            }
        };
        let n = self.world.campaigns[campaign].landing_domains.len();
        let domain = rng.gen_range(0..n);
        (drawn, served, campaign, domain)
    }

    fn slot_count(&mut self, kind: DeviceKind) -> u32 {
        let c = &self.config;
        match kind {
            DeviceKind::Desktop => self.layout_rng.gen_range(c.desktop_ads_min..=c.desktop_ads_max),
            DeviceKind::Mobile => {
                let (slots, fill) = (c.mobile_slots, c.mobile_fill);
                (0..slots).filter(|_| self.layout_rng.gen::<f64>() < fill).count() as u32
            }
        }
    }

    fn head(&self, page: &str, trackers: &[usize]) -> Element {
        let mut head = Element::new("head").child(Element::new("title").text(page));
        for &t in trackers {
            let spec = &self.world.trackers[t];
            head = head.child(Element::new("script").attr("src", format!("https://{}/tag.js", spec.domains[0])));
        }
        head
    }

    fn render_page(&mut self, req: &VisitRequest, trackers: &[usize], placements: &[Placement]) -> Element {
        let page = &req.page_domain;
        let head = self.head(page, trackers);
        let nav = Element::new("nav")
            .child(Element::new("a").attr("href", format!("https://www.{page}/news")).text("News"))
            .child(Element::new("a").attr("href", "/radar").child(Element::new("img").attr("src", "/img/radar.png")));
        let mut main = Element::new("main").child(Element::new("h1").text("Forecast"));
        let sizes: &[(u32, u32)] = match req.kind {
            DeviceKind::Desktop => &[(300, 250), (728, 90), (160, 600), (336, 280)],
            DeviceKind::Mobile => &[(320, 50), (300, 250), (320, 100)],
        };
        for p in placements {
            let (w, h) = sizes[self.layout_rng.gen_range(0..sizes.len())];
            let spec = self.world.trackers.iter().find(|t| t.tracker_id == p.tracker_id).expect("placement tracker");
            let href = match p.encoding {
                ClickEncoding::Adurl => format!(
                    "https://{}/aclk?cid={}&slot={}&adurl={}",
                    spec.click_host,
                    p.campaign_id,
                    p.slot,
                    utf8_percent_encode(&p.landing_url, NON_ALPHANUMERIC)
                ),
                ClickEncoding::DoubleEncodedRedirect => {
                    let once = utf8_percent_encode(&p.landing_url, NON_ALPHANUMERIC).to_string();
                    format!("https://{}/clk/{}/redirect={}", spec.click_host, p.campaign_id, utf8_percent_encode(&once, NON_ALPHANUMERIC))
                }
            };
            let creative = Element::new("img").attr("src", format!("https://{}/creative/{}.jpg", spec.click_host, p.campaign_id));
            let frame = Element::new("iframe")
                .attr("width", w.to_string())
                .attr("height", h.to_string())
                .child(Element::new("a").attr("href", href).child(creative));
            let frame = if self.layout_rng.gen::<f64>() < self.config.nested_frame_rate {
                Element::new("iframe").attr("width", w.to_string()).attr("height", h.to_string()).child(frame)
            } else {
                frame
            };
            main = main.child(frame);
        }
        main = main
            .child(
                Element::new("iframe").attr("width", "300").attr("height", "100").child(
                    Element::new("a").attr("href", format!("https://www.{page}/promo")).child(Element::new("img").attr("src", "/img/promo.png")),
                ),
            )
            .child(Element::new("iframe").attr("width", "300").attr("height", "250"));
        if let Some(&t) = trackers.first() {
            let spec = &self.world.trackers[t];
            main = main.child(
                Element::new("iframe")
                    .attr("width", "0")
                    .attr("height", "0")
                    .child(Element::new("img").attr("src", format!("https://{}/px", spec.domains[0]))),
            );
        }
        Element::new("html").child(head).child(Element::new("body").child(nav).child(main))
    }

    /// Serves a test visit: draws slots, fills them, renders the page.
    fn serve(&mut self, req: &VisitRequest, trackers: &[usize], cookies: &BTreeMap<usize, String>) -> (Element, Vec<Placement>) {
        let k = if trackers.is_empty() { 0 } else { self.slot_count(req.kind) };
        let mut placements = Vec::new();
        for slot in 0..k {
            let t = trackers[self.layout_rng.gen_range(0..trackers.len())];
            let (drawn, served, campaign, domain_ix) = self.fill_slot(t, &cookies[&t]);
            let c = &self.world.campaigns[campaign];
            let landing_domain = c.landing_domains[domain_ix].clone();
            let landing_url = format!("https://www.{landing_domain}/?utm_campaign={}&slot={slot}", c.id);
            let encoding = if self.layout_rng.gen::<f64>() < self.config.redirect_rate {
                ClickEncoding::DoubleEncodedRedirect
            } else {
                ClickEncoding::Adurl
            };
            placements.push(Placement {
                slot,
                tracker_id: self.world.trackers[t].tracker_id.clone(),
                campaign_id: c.id.clone(),
                category: c.category.clone(),
                landing_domain,
                landing_url,
                drawn,
                served,
                encoding,
            });
        }
        let root = self.render_page(req, trackers, &placements);
        (root, placements)
    }
}

impl AdEcosystem for EcoSim {
    fn begin_run(&mut self, run_id: &str, seed: u64) -> Result<(), SchedulerError> {
        self.trackers = Self::fresh_trackers(&self.world, seed, run_id);
        self.layout_rng = stream(seed, "layout", &[fnv1a(run_id.as_bytes())]);
        self.cookie_owner.clear();
        self.session = 0;
        Ok(())
    }

    fn begin_session(&mut self, session_id: u32) {
        self.session = session_id;
        for t in &mut self.trackers {
            t.evaluated.clear();
        }
    }

    fn visit(&mut self, req: &VisitRequest, jar: &mut CookieJar) -> Result<ServedPage, SchedulerError> {
        let page_url = Url::parse(&format!("https://www.{}/", req.page_domain))
            .map_err(|e| SchedulerError::EcosystemUnavailable(format!("bad page {}: {e}", req.page_domain)))?;
        let trackers = self.trackers_on(&req.page_domain, !req.is_train);
        let categories = if req.is_train { self.campaign_categories_of(&req.page_domain) } else { Vec::new() };
        let mut cookies = BTreeMap::new();
        for &t in &trackers {
            let cookie = self.cookie_for(t, jar, &req.device_id);
            let info = self.trackers[t].cookies.get_mut(&cookie).expect("minted cookie");
            *info.ip_volume.entry(req.ip_label.clone()).or_insert(0) += 1;
            for c in &categories {
                *info.histogram.entry(c.clone()).or_insert(0.0) += 1.0;
            }
            cookies.insert(t, cookie);
        }
        if req.is_train {
            let root = Element::new("html").child(self.head(&req.page_domain, &trackers)).child(Element::new("body"));
            return Ok(ServedPage { snapshot: DomSnapshot::new(root, page_url, req.tick), placements: Vec::new() });
        }
        let (root, placements) = self.serve(req, &trackers, &cookies);
        Ok(ServedPage { snapshot: DomSnapshot::new(root, page_url, req.tick), placements })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adex::{extract_ads, CrawlMeta, CrawlPhase, CrawlType, ExtractOptions};
    use crate::filterlist::FilterSet;

    fn sim(cfg: SimConfig) -> EcoSim {
        let db = CategoryDb::parse(crate::fixtures::CATEGORY_DB).unwrap();
        let mut s = EcoSim::new(World::bundled(), cfg, db, "weather").unwrap();
        s.begin_run("t", 1).unwrap();
        s.begin_session(1);
        s
    }

    fn req(device: &str, kind: DeviceKind, ip: &str, page: &str, train: bool) -> VisitRequest {
        VisitRequest { device_id: device.into(), kind, ip_label: ip.into(), page_domain: page.into(), is_train: train, tick: 0 }
    }

    fn meta() -> CrawlMeta {
        CrawlMeta { run_id: "t".into(), session_id: 1, stage_id: "s".into(), device_id: "d".into(), crawl_type: CrawlType::Test, crawl_phase: CrawlPhase::After }
    }

    #[test]
    fn bundled_world_loads() {
        let w = World::bundled();
        assert_eq!(w.trackers.len(), 10);
        assert!(w.campaigns.len() >= 100);
        assert_eq!(w.control_set("boosted").unwrap().pages.len(), 5);
        assert!(w.control_set("nope").is_err());
    }

    #[test]
    fn train_visit_increments_histogram_only_on_train() {
        let mut s = sim(SimConfig::default());
        let mut jar = CookieJar::default();
        s.visit(&req("m", DeviceKind::Mobile, "ip", "aurelia-jewels.com", true), &mut jar).unwrap();
        let t = s.trackers_on("aurelia-jewels.com", false);
        assert!(!t.is_empty());
        let cookie = jar.get(&s.world.trackers[t[0]].tracker_id).unwrap().to_owned();
        assert_eq!(s.trackers[t[0]].cookies[&cookie].histogram.get("Jewelry"), Some(&1.0));
        s.visit(&req("m", DeviceKind::Mobile, "ip", "accuweather.com", false), &mut jar).unwrap();
        assert_eq!(s.trackers[t[0]].cookies[&cookie].histogram.get("Jewelry"), Some(&1.0));
    }

    #[test]
    fn zero_strength_never_links() {
        let mut s = sim(SimConfig { cdt_strength: 0.0, ..SimConfig::default() });
        let (mut a, mut b) = (CookieJar::default(), CookieJar::default());
        for _ in 0..30 {
            s.visit(&req("m", DeviceKind::Mobile, "ip", "aurelia-jewels.com", true), &mut a).unwrap();
            s.visit(&req("d", DeviceKind::Desktop, "ip", "accuweather.com", false), &mut b).unwrap();
        }
        assert!(s.linked_pairs().is_empty());
    }

    #[test]
    fn saturated_pairing_and_cross_share_one_targets_partner_interest() {
        let cfg = SimConfig {
            cdt_strength: 1.0,
            retarget_prob: 0.0,
            behavioral_prob: 0.0,
            noise_prob: 0.0,
            pairing_ip_weight: 1e6,
            pairing_behavior_weight: 1e6,
            ..SimConfig::default()
        };
        assert!(pairing_probability(&cfg, 5.0, 1.0) > 0.999_999);
        let mut s = sim(cfg);
        let (mut m, mut d) = (CookieJar::default(), CookieJar::default());
        // accuweather embeds criteo; train the mobile on a page that also embeds it
        s.visit(&req("m", DeviceKind::Mobile, "ip", "accuweather.com", false), &mut m).unwrap();
        let criteo = s.world.trackers.iter().position(|t| t.tracker_id == "criteo").unwrap();
        let cookie = m.get("criteo").unwrap().to_owned();
        s.trackers[criteo].cookies.get_mut(&cookie).unwrap().histogram.insert("Travel/Air".into(), 3.0);
        let mut cross = 0;
        for _ in 0..20 {
            let served = s.visit(&req("d", DeviceKind::Desktop, "ip", "accuweather.com", false), &mut d).unwrap();
            for p in served.placements.iter().filter(|p| p.tracker_id == "criteo") {
                assert_eq!(p.served, SlotKind::CrossDevice);
                assert_eq!(p.category, "Travel/Air");
                cross += 1;
            }
        }
        assert!(cross > 0);
        assert_eq!(s.linked_pairs().len(), 1);
    }

    #[test]
    fn desktop_slot_counts_within_bounds_and_extraction_round_trips() {
        let mut s = sim(SimConfig::default());
        let filters = FilterSet::parse(crate::fixtures::EASYLIST);
        let mut jar = CookieJar::default();
        for i in 0..40 {
            let page = ["accuweather.com", "weather.com", "metcheck.com", "wunderground.com", "weather-forecast.com"][i % 5];
            let served = s.visit(&req("d", DeviceKind::Desktop, "ip", page, false), &mut jar).unwrap();
            assert!((2..=4).contains(&served.placements.len()));
            let (obs, _) = extract_ads(&served.snapshot, &filters, &meta(), ExtractOptions::default()).unwrap();
            let mut got: Vec<&str> = obs.iter().map(|o| o.landing_domain.as_str()).collect();
            let mut want: Vec<&str> = served.placements.iter().map(|p| p.landing_domain.as_str()).collect();
            got.sort_unstable();
            want.sort_unstable();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn stateless_devices_get_fresh_cookies() {
        let mut s = sim(SimConfig::default());
        let mut jar = CookieJar::default();
        s.visit(&req("d", DeviceKind::Desktop, "ip", "accuweather.com", false), &mut jar).unwrap();
        let first = jar.get("google").unwrap().to_owned();
        jar.clear();
        s.visit(&req("d", DeviceKind::Desktop, "ip", "accuweather.com", false), &mut jar).unwrap();
        assert_ne!(jar.get("google").unwrap(), first);
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig { noise_prob: 0.9, ..SimConfig::default() }.validate().is_err());
        assert!(SimConfig { cdt_strength: 1.5, ..SimConfig::default() }.validate().is_err());
        assert!(SimConfig::default().validate().is_ok());
    }
}
