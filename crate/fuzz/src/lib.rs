//! Entry points shared by the fuzz targets and the corpus replay test in
//! `crates/core/tests/fuzz_corpus.rs`. Each function must not panic for any
//! input.

use cdt_lab_core::adex::{decode_landing, extract_ads, landing_from_href, CrawlMeta, CrawlPhase, CrawlType, ExtractOptions};
use cdt_lab_core::categorizer::CategoryDb;
use cdt_lab_core::dom::DomSnapshot;
use cdt_lab_core::ecosim::World;
use cdt_lab_core::features::LabeledDataset;
use cdt_lab_core::filterlist::{parse_conformance, parse_line, FilterSet, MatchContext};
use cdt_lab_core::persona::{parse_topics, FixtureSearchSource, PersonaCatalog, SearchSource, Taxonomy, TopicSource};
use cdt_lab_core::report::TrackerList;
use cdt_lab_core::scheduler::SetupCode;
use url::Url;

pub type Target = fn(&[u8]);

/// Every target with the corpus directory it reads.
pub const TARGETS: &[(&str, Target)] = &[
    ("filter_list", filter_list),
    ("dom_extract", dom_extract),
    ("decode_landing", decode),
    ("category_db", category_db),
    ("dataset_csv", dataset_csv),
    ("world", world),
    ("tracker_list", tracker_list),
    ("persona_inputs", persona_inputs),
    ("filter_conformance", filter_conformance),
];

fn text(data: &[u8]) -> Option<&str> {
    std::str::from_utf8(data).ok()
}

pub fn filter_list(data: &[u8]) {
    let Some(text) = text(data) else { return };
    for line in text.lines() {
        let _ = parse_line(line);
    }
    let set = FilterSet::parse(text);
    let url = Url::parse("https://cat.criteo.com/aclk?cid=c001&adurl=x").expect("static url");
    for page in [None, Some("accuweather.com"), Some("criteo.com")] {
        let ctx = MatchContext::new(&url, page);
        assert_eq!(set.matches(&ctx), set.matches_linear(&ctx));
    }
}

pub fn dom_extract(data: &[u8]) {
    let Some(html) = text(data) else { return };
    let page = Url::parse("https://www.accuweather.com/").expect("static url");
    let snapshot = DomSnapshot::from_html(html, page, 0);
    let filters = FilterSet::parse(cdt_lab_core::fixtures::EASYLIST);
    let meta = CrawlMeta {
        run_id: "fuzz".into(),
        session_id: 1,
        stage_id: "after-1".into(),
        device_id: "desktop".into(),
        crawl_type: CrawlType::Test,
        crawl_phase: CrawlPhase::After,
    };
    let _ = extract_ads(&snapshot, &filters, &meta, ExtractOptions::default());
    let _ = snapshot.to_html();
}

pub fn decode(data: &[u8]) {
    let Some(value) = text(data) else { return };
    let _ = decode_landing(value);
    let base = Url::parse("https://www.weather.com/").expect("static url");
    let _ = landing_from_href(value, &base);
}

pub fn category_db(data: &[u8]) {
    if let Some(text) = text(data) {
        let _ = CategoryDb::parse(text);
    }
}

pub fn dataset_csv(data: &[u8]) {
    let Some(text) = text(data) else { return };
    if let Ok(ds) = LabeledDataset::from_csv(text, SetupCode::S1a) {
        let again = LabeledDataset::from_csv(&ds.to_csv(), SetupCode::S1a).expect("written csv parses");
        assert_eq!(again.rows.len(), ds.rows.len());
        let _ = ds.groups();
    }
}

pub fn world(data: &[u8]) {
    if let Some(text) = text(data) {
        let _ = World::parse(text);
    }
}

pub fn tracker_list(data: &[u8]) {
    if let Some(text) = text(data) {
        if let Ok(list) = TrackerList::parse(text) {
            let _ = list.organization_of("cat.criteo.com");
        }
    }
}

pub fn persona_inputs(data: &[u8]) {
    let Some(text) = text(data) else { return };
    if let Ok(source) = FixtureSearchSource::parse(text) {
        let _ = source.query("jewelry");
    }
    let _ = PersonaCatalog::parse(text);
    let _ = parse_topics(text, TopicSource::RealUserList);
    let _ = Taxonomy::parse(text);
    let _ = text.parse::<SetupCode>();
}

pub fn filter_conformance(data: &[u8]) {
    if let Some(text) = text(data) {
        let _ = parse_conformance(text);
    }
}
