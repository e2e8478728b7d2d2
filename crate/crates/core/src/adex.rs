//! Ad extraction from rendered page snapshots.
//!
//! Ads on the pages we crawl sit inside iframes. Each valid frame is scanned
//! for anchors wrapping creatives; the landing page is recovered from the
//! click URL's `adurl=` or `redirect=` parameter, and the click URL is checked
//! against the filter list. Nothing is ever fetched or clicked.

use std::collections::BTreeSet;
use std::ops::{Add, AddAssign};

use percent_encoding::percent_decode_str;
use serde::{Deserialize, Serialize};
use url::Url;

use crate::dom::{DomError, DomSnapshot, Element};
use crate::domain::registrable_domain_of;
use crate::filterlist::{FilterSet, MatchContext};

/// Dimensions assumed when an iframe omits `width` or `height`.
pub const DEFAULT_FRAME_SIZE: (u32, u32) = (300, 250);
pub const MAX_DECODE_ROUNDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrawlType {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrawlPhase {
    Before,
    Mobile,
    After,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractionRoute {
    DirectHref,
    AdurlParam,
    RedirectParam,
}

/// Where a page was captured in the experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrawlMeta {
    pub run_id: String,
    pub session_id: u32,
    pub stage_id: String,
    pub device_id: String,
    pub crawl_type: CrawlType,
    pub crawl_phase: CrawlPhase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdObservation {
    pub landing_domain: String,
    pub landing_url: String,
    pub route: ExtractionRoute,
    pub page_domain: String,
    pub device_id: String,
    pub stage_id: String,
    pub session_id: u32,
    pub run_id: String,
    pub observed_at: u64,
    pub crawl_type: CrawlType,
    pub crawl_phase: CrawlPhase,
}

#[derive(Debug, Clone, Copy)]
pub struct AdFrame<'a> {
    pub element: &'a Element,
    pub width: u32,
    pub height: u32,
    pub content_empty: bool,
    pub depth: usize,
}

impl AdFrame<'_> {
    pub fn is_valid(&self) -> bool {
        self.width > 0 && self.height > 0 && !self.content_empty
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateLanding {
    pub url: Url,
    pub click_url: Url,
    pub route: ExtractionRoute,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageStats {
    pub frames_total: u64,
    pub frames_valid: u64,
    pub candidates: u64,
    pub ads: u64,
}

impl Add for PageStats {
    type Output = PageStats;
    fn add(self, o: PageStats) -> PageStats {
        PageStats {
            frames_total: self.frames_total + o.frames_total,
            frames_valid: self.frames_valid + o.frames_valid,
            candidates: self.candidates + o.candidates,
            ads: self.ads + o.ads,
        }
    }
}

impl AddAssign for PageStats {
    fn add_assign(&mut self, o: PageStats) {
        *self = *self + o;
    }
}

fn dimension(el: &Element, key: &str, default: u32) -> u32 {
    match el.get(key) {
        None => default,
        Some(v) => {
            let digits: String = v.trim().chars().take_while(char::is_ascii_digit).collect();
            digits.parse().unwrap_or(0)
        }
    }
}

fn frame_of(el: &Element, depth: usize) -> AdFrame<'_> {
    let content_empty = el.elements().next().is_none() && el.text_content().trim().is_empty();
    AdFrame {
        element: el,
        width: dimension(el, "width", DEFAULT_FRAME_SIZE.0),
        height: dimension(el, "height", DEFAULT_FRAME_SIZE.1),
        content_empty,
        depth,
    }
}

/// Iframes directly under `el`, not looking inside other iframes.
fn child_frames(el: &Element) -> Vec<&Element> {
    let mut out = Vec::new();
    for child in el.elements() {
        child.walk(&mut |e| {
            if e.tag == "iframe" {
                out.push(e);
                false
            } else {
                true
            }
        });
    }
    out
}

/// Anchors in a frame's own content (nested frames excluded).
fn has_links(frame: &Element) -> bool {
    let mut found = false;
    for child in frame.elements() {
        child.walk(&mut |e| {
            if e.tag == "a" && e.get("href").is_some() {
                found = true;
            }
            !found && e.tag != "iframe"
        });
    }
    found
}

/// Every iframe up to `max_depth` levels deep, document order, valid or not.
pub fn all_frames(root: &Element, max_depth: usize) -> Vec<AdFrame<'_>> {
    fn rec<'a>(el: &'a Element, depth: usize, max: usize, out: &mut Vec<AdFrame<'a>>) {
        if depth > max {
            return;
        }
        for f in child_frames(el) {
            out.push(frame_of(f, depth));
            rec(f, depth + 1, max, out);
        }
    }
    let mut out = Vec::new();
    rec(root, 1, max_depth, &mut out);
    out
}

/// Valid frames to read ads from. For each top-level frame, the first nesting
/// level (up to `max_depth`) that contains links is used.
pub fn find_ad_frames(page: &DomSnapshot, max_depth: usize) -> Vec<AdFrame<'_>> {
    let Some(root) = page.root.as_ref() else { return Vec::new() };
    let mut out = Vec::new();
    for top in child_frames(root) {
        let mut depth = 1;
        let mut level = vec![frame_of(top, depth)];
        while !level.is_empty() && depth <= max_depth {
            level.retain(AdFrame::is_valid);
            if level.iter().any(|f| has_links(f.element)) {
                out.extend(level);
                break;
            }
            depth += 1;
            level = level.iter().flat_map(|f| child_frames(f.element)).map(|e| frame_of(e, depth)).collect();
        }
    }
    out
}

fn find_param(href: &str) -> Option<(usize, usize, ExtractionRoute)> {
    let lower = href.to_ascii_lowercase();
    let mut best: Option<(usize, usize, ExtractionRoute)> = None;
    for (key, route) in [("adurl=", ExtractionRoute::AdurlParam), ("redirect=", ExtractionRoute::RedirectParam)] {
        let mut from = 0;
        while let Some(i) = lower[from..].find(key).map(|i| i + from) {
            let boundary = i == 0 || matches!(lower.as_bytes()[i - 1], b'?' | b'&' | b'/' | b';');
            if boundary {
                if best.is_none_or(|(b, _, _)| i < b) {
                    best = Some((i, i + key.len(), route));
                }
                break;
            }
            from = i + 1;
        }
    }
    best
}

/// Percent-decodes until the value looks like an absolute URL, at most
/// [`MAX_DECODE_ROUNDS`] times.
pub fn decode_landing(value: &str) -> String {
    let mut v = value.to_owned();
    for _ in 0..MAX_DECODE_ROUNDS {
        if v.contains("://") {
            break;
        }
        v = percent_decode_str(&v).decode_utf8_lossy().into_owned();
    }
    v
}

/// Landing URL candidate for one click href.
pub fn landing_from_href(href: &str, base: &Url) -> Option<CandidateLanding> {
    let click_url = base.join(href.trim()).ok()?;
    let (url, route) = match find_param(href) {
        Some((_, value_start, route)) => {
            let rest = &href[value_start..];
            let raw = &rest[..rest.find('&').unwrap_or(rest.len())];
            (Url::parse(&decode_landing(raw)).ok()?, route)
        }
        None => (click_url.clone(), ExtractionRoute::DirectHref),
    };
    matches!(url.scheme(), "http" | "https").then_some(CandidateLanding { url, click_url, route })
}

/// Candidates from anchors that wrap an `img`, `embed` or `object`.
pub fn extract_candidates(frame: &AdFrame<'_>, base: &Url) -> Vec<CandidateLanding> {
    let mut out = Vec::new();
    for child in frame.element.elements() {
        child.walk(&mut |e| {
            if e.tag == "iframe" {
                return false;
            }
            if e.tag == "a" {
                let wraps_creative = {
                    let mut hit = false;
                    e.walk(&mut |d| {
                        hit |= matches!(d.tag.as_str(), "img" | "embed" | "object");
                        !hit
                    });
                    hit
                };
                if wraps_creative {
                    if let Some(c) = e.get("href").and_then(|h| landing_from_href(h, base)) {
                        out.push(c);
                    }
                }
                return false;
            }
            true
        });
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct ExtractOptions {
    pub max_frame_depth: usize,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self { max_frame_depth: 2 }
    }
}

/// Observations for every candidate whose click URL the filters flag as an
/// ad, deduplicated by landing URL within the page.
pub fn extract_ads(
    page: &DomSnapshot,
    filters: &FilterSet,
    meta: &CrawlMeta,
    opts: ExtractOptions,
) -> Result<(Vec<AdObservation>, PageStats), DomError> {
    let root = page.root()?;
    let page_domain = registrable_domain_of(&page.page_url).unwrap_or_default();
    let mut stats = PageStats::default();
    let frames = all_frames(root, opts.max_frame_depth);
    stats.frames_total = frames.len() as u64;
    stats.frames_valid = frames.iter().filter(|f| f.is_valid()).count() as u64;
    let mut seen = BTreeSet::new();
    let mut observations = Vec::new();
    for frame in find_ad_frames(page, opts.max_frame_depth) {
        for cand in extract_candidates(&frame, &page.page_url) {
            stats.candidates += 1;
            let ctx = MatchContext::new(&cand.click_url, Some(&page_domain));
            if !filters.matches(&ctx) {
                continue;
            }
            let Some(landing_domain) = registrable_domain_of(&cand.url) else { continue };
            if !seen.insert(cand.url.to_string()) {
                continue;
            }
            observations.push(AdObservation {
                landing_domain,
                landing_url: cand.url.to_string(),
                route: cand.route,
                page_domain: page_domain.clone(),
                device_id: meta.device_id.clone(),
                stage_id: meta.stage_id.clone(),
                session_id: meta.session_id,
                run_id: meta.run_id.clone(),
                observed_at: page.captured_at,
                crawl_type: meta.crawl_type,
                crawl_phase: meta.crawl_phase,
            });
        }
    }
    stats.ads = observations.len() as u64;
    Ok((observations, stats))
}

/// Hosts referenced by `script`, `img` and `iframe` sources on the page,
/// sorted and deduplicated.
pub fn resource_hosts(page: &DomSnapshot) -> Vec<String> {
    let Some(root) = page.root.as_ref() else { return Vec::new() };
    let mut hosts = BTreeSet::new();
    root.walk(&mut |e| {
        if matches!(e.tag.as_str(), "script" | "img" | "iframe") {
            if let Some(h) = e.get("src").and_then(|s| page.page_url.join(s).ok()).and_then(|u| u.host_str().map(str::to_owned)) {
                hosts.insert(h);
            }
        }
        true
    });
    hosts.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta() -> CrawlMeta {
        CrawlMeta {
            run_id: "r".into(),
            session_id: 1,
            stage_id: "s".into(),
            device_id: "d".into(),
            crawl_type: CrawlType::Test,
            crawl_phase: CrawlPhase::Before,
        }
    }

    fn page(html: &str) -> DomSnapshot {
        DomSnapshot::from_html(html, Url::parse("https://www.accuweather.com/").unwrap(), 0)
    }

    #[test]
    fn adurl_param_single_decode() {
        let base = Url::parse("https://x.com/").unwrap();
        let c = landing_from_href(
            "https://adclick.g.example/aclk?sa=l&ai=x&adurl=https%3A%2F%2Fshop.example.com%2Fsale",
            &base,
        )
        .unwrap();
        assert_eq!(c.url.as_str(), "https://shop.example.com/sale");
        assert_eq!(c.route, ExtractionRoute::AdurlParam);
    }

    #[test]
    fn redirect_param_double_decode() {
        let base = Url::parse("https://x.com/").unwrap();
        let c = landing_from_href("https://t.example/redirect=https%253A%252F%252Fstore.example%252Fx", &base).unwrap();
        assert_eq!(c.url.as_str(), "https://store.example/x");
        assert_eq!(c.route, ExtractionRoute::RedirectParam);
        assert_eq!(decode_landing("https%253A%252F%252Fstore.example%252Fx"), "https://store.example/x");
    }

    #[test]
    fn key_must_start_a_parameter() {
        let base = Url::parse("https://x.com/").unwrap();
        let c = landing_from_href("https://t.example/c?myadurl=https%3A%2F%2Fa.com", &base).unwrap();
        assert_eq!(c.route, ExtractionRoute::DirectHref);
        let c = landing_from_href("https://t.example/c?X=1&ADURL=https://b.com/", &base).unwrap();
        assert_eq!(c.url.as_str(), "https://b.com/");
    }

    #[test]
    fn frame_validity() {
        let p = page(
            r#"<body><iframe width="300" height="250"><a href="https://a.com/"><img></a></iframe>
               <iframe width="0" height="300"><a href="https://b.com/"><img></a></iframe>
               <iframe><a href="https://c.com/"><img></a></iframe>
               <iframe width="300" height="250"></iframe></body>"#,
        );
        let frames = find_ad_frames(&p, 2);
        assert_eq!(frames.len(), 2);
        assert_eq!((frames[1].width, frames[1].height), DEFAULT_FRAME_SIZE);
        assert_eq!(all_frames(p.root().unwrap(), 2).len(), 4);
        assert!(find_ad_frames(&page("<p>no frames</p>"), 2).is_empty());
    }

    #[test]
    fn ads_read_from_first_level_with_links() {
        let inner = r#"<a href="https://ib.adnxs.com/c?adurl=https%3A%2F%2Fz.com%2F"><img></a>"#;
        let html = format!(
            r#"<body><iframe width="300" height="250" srcdoc="{}"></iframe></body>"#,
            format!(r#"<iframe width="300" height="250">{inner}</iframe>"#).replace('"', "&quot;")
        );
        let p = page(&html);
        let frames = find_ad_frames(&p, 2);
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].depth, 2);
        assert!(find_ad_frames(&p, 1).is_empty());
        let filters = FilterSet::parse(crate::fixtures::EASYLIST);
        let (obs, stats) = extract_ads(&p, &filters, &meta(), ExtractOptions::default()).unwrap();
        assert_eq!(obs.len(), 1);
        assert_eq!(obs[0].landing_domain, "z.com");
        assert_eq!(stats.frames_total, 2);
    }

    #[test]
    fn golden_control_page() {
        let html = include_str!("../tests/data/control_page_1.html");
        let golden = include_str!("../tests/data/control_page_1.golden.json");
        let p = page(html);
        let filters = FilterSet::parse(crate::fixtures::EASYLIST);
        let (obs, stats) = extract_ads(&p, &filters, &meta(), ExtractOptions::default()).unwrap();
        assert_eq!(stats, PageStats { frames_total: 5, frames_valid: 4, candidates: 6, ads: 3 });
        let expected: Vec<AdObservation> = serde_json::from_str(golden).unwrap();
        assert_eq!(obs, expected);
    }

    #[test]
    fn empty_and_first_party_pages() {
        let filters = FilterSet::parse(crate::fixtures::EASYLIST);
        let (obs, stats) = extract_ads(&page("<html><body></body></html>"), &filters, &meta(), ExtractOptions::default()).unwrap();
        assert!(obs.is_empty());
        assert_eq!(stats, PageStats::default());
        let nav = r#"<body><iframe><a href="/radar"><img></a><a href="https://www.accuweather.com/en/news"><img></a></iframe></body>"#;
        let (obs, stats) = extract_ads(&page(nav), &filters, &meta(), ExtractOptions::default()).unwrap();
        assert!(obs.is_empty());
        assert_eq!(stats.candidates, 2);
        assert_eq!(page("").root(), Err(DomError::SnapshotMalformed));
        assert!(extract_ads(&page(""), &filters, &meta(), ExtractOptions::default()).is_err());
    }

    #[test]
    fn duplicate_landing_urls_collapse() {
        let a = r#"<a href="https://ad.doubleclick.net/aclk?adurl=https%3A%2F%2Fa.com%2F"><img></a>"#;
        let html = format!("<body><iframe>{a}{a}</iframe><iframe>{a}</iframe></body>");
        let filters = FilterSet::parse(crate::fixtures::EASYLIST);
        let (obs, stats) = extract_ads(&page(&html), &filters, &meta(), ExtractOptions::default()).unwrap();
        assert_eq!(obs.len(), 1);
        assert_eq!(stats.candidates, 3);
    }

    proptest! {
        #[test]
        fn page_stats_merge_is_associative(v in prop::collection::vec((0u64..100, 0u64..100, 0u64..100, 0u64..100), 3)) {
            let s: Vec<PageStats> = v.iter().map(|&(a, b, c, d)| PageStats { frames_total: a, frames_valid: b, candidates: c, ads: d }).collect();
            prop_assert_eq!((s[0] + s[1]) + s[2], s[0] + (s[1] + s[2]));
        }

        #[test]
        fn encoded_landing_round_trips(path in "[a-z0-9/]{0,12}", rounds in 1usize..=3) {
            use percent_encoding::{utf8_percent_encode, NON_ALPHANUMERIC};
            let landing = format!("https://shop.example.com/{path}");
            let mut enc = landing.clone();
            for _ in 0..rounds {
                enc = utf8_percent_encode(&enc, NON_ALPHANUMERIC).to_string();
            }
            let href = format!("https://t.example/clk?x=1&adurl={enc}&y=2");
            let c = landing_from_href(&href, &Url::parse("https://p.com/").unwrap()).unwrap();
            prop_assert_eq!(c.url, Url::parse(&landing).unwrap());
        }
    }
}
