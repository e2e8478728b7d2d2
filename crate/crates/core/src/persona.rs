//! Behavioral personas and control pages.
//!
//! A persona is an interest category, the keywords derived for it from a
//! product taxonomy, and the 5-10 sites found running sponsored campaigns for
//! those keywords. Search results come from a [`SearchSource`]; the bundled
//! implementation replays a line-delimited fixture so persona generation is
//! reproducible offline.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::registrable_domain;

#[derive(Debug, Error, PartialEq)]
pub enum PersonaError {
    #[error("interest topic label is empty")]
    EmptyTopic,
    #[error("no taxonomy entry matches cluster `{0}`")]
    EmptyKeywordSet(String),
    #[error("persona {id} formed only {found} unique sponsored domains (need {min})")]
    FormationFailure { id: u32, found: usize, min: usize },
    #[error("persona {persona} page `{domain}` is also a control page")]
    ControlLeak { persona: u32, domain: String },
    #[error("persona {0} has no keywords")]
    NoKeywords(u32),
    #[error("search fixture line {line}: {message}")]
    SearchFixture { line: usize, message: String },
    #[error("persona catalog: {0}")]
    Catalog(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopicSource {
    RealUserList,
    PersonaCatalog,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InterestTopic {
    label: String,
    source: TopicSource,
}

impl InterestTopic {
    /// Collapses internal whitespace; rejects labels that are blank.
    pub fn new(label: &str, source: TopicSource) -> Result<Self, PersonaError> {
        let label = label.split_whitespace().collect::<Vec<_>>().join(" ");
        if label.is_empty() {
            return Err(PersonaError::EmptyTopic);
        }
        Ok(Self { label, source })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn source(&self) -> TopicSource {
        self.source
    }
}

/// One topic per line; blank lines and `#` comments are skipped.
pub fn parse_topics(text: &str, source: TopicSource) -> Vec<InterestTopic> {
    text.lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .filter_map(|l| InterestTopic::new(l, source).ok())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterestCluster {
    pub canonical_label: String,
    pub members: Vec<InterestTopic>,
}

impl InterestCluster {
    /// A cluster built directly from a list of labels (e.g. a catalog entry).
    pub fn from_labels<S: AsRef<str>>(labels: &[S], source: TopicSource) -> Result<Self, PersonaError> {
        let members = labels
            .iter()
            .map(|l| InterestTopic::new(l.as_ref(), source))
            .collect::<Result<Vec<_>, _>>()?;
        if members.is_empty() {
            return Err(PersonaError::EmptyTopic);
        }
        Ok(Self { canonical_label: longest_label(&members), members })
    }
}

/// Lowercased alphanumeric tokens of a label.
pub fn tokens(label: &str) -> Vec<String> {
    label
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn token_jaccard(a: &str, b: &str) -> f64 {
    let a: BTreeSet<String> = tokens(a).into_iter().collect();
    let b: BTreeSet<String> = tokens(b).into_iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// True when either label's token set contains the other's.
pub fn token_containment(a: &str, b: &str) -> bool {
    let a: BTreeSet<String> = tokens(a).into_iter().collect();
    let b: BTreeSet<String> = tokens(b).into_iter().collect();
    !a.is_empty() && !b.is_empty() && (a.is_subset(&b) || b.is_subset(&a))
}

fn longest_label(members: &[InterestTopic]) -> String {
    // first member wins ties
    members
        .iter()
        .fold(None::<&InterestTopic>, |best, t| match best {
            Some(b) if b.label.chars().count() >= t.label.chars().count() => Some(b),
            _ => Some(t),
        })
        .map(|t| t.label.clone())
        .unwrap_or_default()
}

/// Single-link clustering on token-set Jaccard similarity.
///
/// Two topics are linked when their similarity is at least `threshold`; the
/// clusters are the connected components. Cluster order follows the first
/// member's input position and members keep input order.
pub fn cluster_interests(topics: &[InterestTopic], threshold: f64) -> Vec<InterestCluster> {
    assert!((0.0..=1.0).contains(&threshold), "threshold must be in [0, 1]");
    let n = topics.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if token_jaccard(&topics[i].label, &topics[j].label) >= threshold {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut order: Vec<usize> = Vec::new();
    let mut groups: HashMap<usize, Vec<InterestTopic>> = HashMap::new();
    for (i, topic) in topics.iter().enumerate() {
        let root = find(&mut parent, i);
        groups
            .entry(root)
            .or_insert_with(|| {
                order.push(root);
                Vec::new()
            })
            .push(topic.clone());
    }
    order
        .into_iter()
        .map(|root| {
            let members = groups.remove(&root).unwrap_or_default();
            InterestCluster { canonical_label: longest_label(&members), members }
        })
        .collect()
}

/// Product taxonomy in the Google plain-text format: one ` > `-separated path
/// per line, `#` header/comment lines ignored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Taxonomy {
    paths: Vec<Vec<String>>,
}

impl Taxonomy {
    pub fn parse(text: &str) -> Self {
        let paths = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                l.split('>')
                    .map(|s| s.trim().to_owned())
                    .filter(|s| !s.is_empty())
                    .collect::<Vec<_>>()
            })
            .filter(|p| !p.is_empty())
            .collect();
        Self { paths }
    }

    pub fn paths(&self) -> &[Vec<String>] {
        &self.paths
    }
}

fn contains_run(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Leaf terms of every taxonomy path that contains a cluster member's token
/// sequence, in file order, without duplicates.
pub fn expand_keywords(cluster: &InterestCluster, taxonomy: &Taxonomy) -> Result<Vec<String>, PersonaError> {
    let member_tokens: Vec<Vec<String>> = cluster.members.iter().map(|m| tokens(&m.label)).collect();
    let mut seen = BTreeSet::new();
    let mut keywords = Vec::new();
    for path in taxonomy.paths() {
        let path_tokens = tokens(&path.join(" "));
        if member_tokens.iter().any(|m| contains_run(&path_tokens, m)) {
            let leaf = path.last().expect("paths are non-empty").clone();
            if seen.insert(leaf.clone()) {
                keywords.push(leaf);
            }
        }
    }
    if keywords.is_empty() {
        return Err(PersonaError::EmptyKeywordSet(cluster.canonical_label.clone()));
    }
    Ok(keywords)
}

/// `buy k`, `sell k`, `k offers` for every keyword, keyword-major.
pub fn build_queries<S: AsRef<str>>(keywords: &[S]) -> Vec<String> {
    keywords
        .iter()
        .flat_map(|k| {
            let k = k.as_ref();
            [format!("buy {k}"), format!("sell {k}"), format!("{k} offers")]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub domain: String,
    pub sponsored: bool,
}

pub trait SearchSource {
    fn query(&self, query: &str) -> Vec<SearchResult>;
}

#[derive(Debug, Deserialize)]
struct SearchRecord {
    query: String,
    results: Vec<SearchResult>,
}

/// Replays recorded result pages. Unknown queries return no results.
#[derive(Debug, Clone, Default)]
pub struct FixtureSearchSource {
    records: HashMap<String, Vec<SearchResult>>,
}

impl FixtureSearchSource {
    pub fn parse(text: &str) -> Result<Self, PersonaError> {
        let mut records = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: SearchRecord = serde_json::from_str(line)
                .map_err(|e| PersonaError::SearchFixture { line: i + 1, message: e.to_string() })?;
            // repeated queries append, as if the result page were paginated
            records.entry(rec.query).or_insert_with(Vec::new).extend(rec.results);
        }
        Ok(Self { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl SearchSource for FixtureSearchSource {
    fn query(&self, query: &str) -> Vec<SearchResult> {
        self.records.get(query).cloned().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub id: u32,
    pub category_label: String,
    pub keywords: Vec<String>,
    pub persona_pages: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageBounds {
    pub min: usize,
    pub max: usize,
}

impl Default for PageBounds {
    fn default() -> Self {
        Self { min: 5, max: 10 }
    }
}

/// Collects sponsored domains query by query until `bounds.max` unique
/// registrable domains are found. Fails when fewer than `bounds.min` exist.
pub fn generate_persona(
    id: u32,
    category_label: &str,
    keywords: &[String],
    queries: &[String],
    source: &dyn SearchSource,
    bounds: PageBounds,
) -> Result<Persona, PersonaError> {
    if keywords.is_empty() {
        return Err(PersonaError::NoKeywords(id));
    }
    let mut seen = BTreeSet::new();
    let mut pages = Vec::new();
    'queries: for q in queries {
        for r in source.query(q).into_iter().filter(|r| r.sponsored) {
            let Some(domain) = registrable_domain(&r.domain) else { continue };
            if seen.insert(domain.clone()) {
                pages.push(domain);
                if pages.len() == bounds.max {
                    break 'queries;
                }
            }
        }
    }
    if pages.len() < bounds.min {
        return Err(PersonaError::FormationFailure { id, found: pages.len(), min: bounds.min });
    }
    Ok(Persona {
        id,
        category_label: category_label.to_owned(),
        keywords: keywords.to_vec(),
        persona_pages: pages,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlPageSet {
    pub pages: Vec<String>,
    pub neutrality_attested: bool,
    /// Set when the pages were chosen for their embedded CDT trackers.
    #[serde(default)]
    pub cdt_tracker_pages: bool,
}

/// Rejects experiments where a persona visits one of the control pages.
pub fn validate_experiment(personas: &[Persona], control: &ControlPageSet) -> Result<(), PersonaError> {
    let control_domains: BTreeSet<String> = control
        .pages
        .iter()
        .map(|p| registrable_domain(p).unwrap_or_else(|| p.to_ascii_lowercase()))
        .collect();
    for persona in personas {
        if let Some(d) = persona.persona_pages.iter().find(|d| control_domains.contains(*d)) {
            return Err(PersonaError::ControlLeak { persona: persona.id, domain: d.clone() });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct CatalogEntry {
    pub id: u32,
    pub category_label: String,
    pub interests: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct PersonaCatalog {
    pub personas: Vec<CatalogEntry>,
}

impl PersonaCatalog {
    pub fn parse(text: &str) -> Result<Self, PersonaError> {
        toml::from_str(text).map_err(|e| PersonaError::Catalog(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PersonaBuild {
    pub clusters: Vec<InterestCluster>,
    pub personas: Vec<Persona>,
    pub failures: Vec<(u32, String)>,
}

#[derive(Debug, Clone, Copy)]
pub struct BuildParams {
    /// Jaccard threshold for clustering real-user topics.
    pub cluster_threshold: f64,
    pub bounds: PageBounds,
}

impl Default for BuildParams {
    fn default() -> Self {
        Self { cluster_threshold: 0.5, bounds: PageBounds::default() }
    }
}

/// The full persona pipeline: cluster real-user topics, keep catalog entries
/// with an interest whose tokens nest with some clustered topic, expand keywords, search, form personas.
pub fn build_personas(
    catalog: &PersonaCatalog,
    topics: &[InterestTopic],
    taxonomy: &Taxonomy,
    source: &dyn SearchSource,
    params: BuildParams,
) -> PersonaBuild {
    let clusters = cluster_interests(topics, params.cluster_threshold);
    let mut personas = Vec::new();
    let mut failures = Vec::new();
    for entry in &catalog.personas {
        let matched = entry.interests.iter().any(|interest| {
            clusters
                .iter()
                .flat_map(|c| &c.members)
                .any(|m| token_containment(interest, m.label()))
        });
        if !matched {
            failures.push((entry.id, "no matching real-user interest".to_owned()));
            continue;
        }
        let outcome = InterestCluster::from_labels(&entry.interests, TopicSource::PersonaCatalog)
            .and_then(|cluster| expand_keywords(&cluster, taxonomy))
            .and_then(|keywords| {
                let queries = build_queries(&keywords);
                generate_persona(entry.id, &entry.category_label, &keywords, &queries, source, params.bounds)
            });
        match outcome {
            Ok(p) => personas.push(p),
            Err(e) => failures.push((entry.id, e.to_string())),
        }
    }
    PersonaBuild { clusters, personas, failures }
}

/// Personas built from the bundled catalog, topics, taxonomy and search
/// fixture, ordered by id.
pub fn bundled_personas() -> Vec<Persona> {
    use crate::fixtures;
    let catalog = PersonaCatalog::parse(fixtures::PERSONA_CATALOG).expect("bundled catalog parses");
    let topics = parse_topics(fixtures::TOPICS, TopicSource::RealUserList);
    let taxonomy = Taxonomy::parse(fixtures::TAXONOMY);
    let source = FixtureSearchSource::parse(fixtures::SEARCH_FIXTURE).expect("bundled search fixture parses");
    build_personas(&catalog, &topics, &taxonomy, &source, BuildParams::default()).personas
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topics(labels: &[&str]) -> Vec<InterestTopic> {
        labels.iter().map(|l| InterestTopic::new(l, TopicSource::RealUserList).unwrap()).collect()
    }

    struct MapSource(Vec<(&'static str, Vec<(&'static str, bool)>)>);

    impl SearchSource for MapSource {
        fn query(&self, query: &str) -> Vec<SearchResult> {
            self.0
                .iter()
                .filter(|(q, _)| *q == query)
                .flat_map(|(_, r)| r.iter().map(|(d, s)| SearchResult { domain: d.to_string(), sponsored: *s }))
                .collect()
        }
    }

    #[test]
    fn threshold_zero_groups_everything() {
        let c = cluster_interests(&topics(&["Shopping", "Beauty and Fashion"]), 0.0);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].members.len(), 2);
        assert_eq!(c[0].canonical_label, "Beauty and Fashion");
    }

    #[test]
    fn singleton_cluster() {
        let c = cluster_interests(&topics(&["Weather"]), 0.7);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].members[0].label(), "Weather");
        assert!(cluster_interests(&[], 0.5).is_empty());
    }

    #[test]
    fn air_travel_example_at_half() {
        // J(air travel, air travel deals) = 2/3, every other pair shares nothing.
        assert!((token_jaccard("Air Travel", "Air Travel Deals") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(token_jaccard("Air Travel", "Hotels and Vacations"), 0.0);
        let c = cluster_interests(&topics(&["Air Travel", "Hotels and Vacations", "Air Travel Deals"]), 0.5);
        assert_eq!(c.len(), 2);
        let labels: Vec<Vec<&str>> = c.iter().map(|c| c.members.iter().map(|m| m.label()).collect()).collect();
        assert_eq!(labels, vec![vec!["Air Travel", "Air Travel Deals"], vec!["Hotels and Vacations"]]);
        assert_eq!(c[0].canonical_label, "Air Travel Deals");
    }

    #[test]
    fn single_link_is_transitive() {
        // a~b and b~c but not a~c: still one cluster
        let c = cluster_interests(&topics(&["red green", "green blue", "blue yellow"]), 1.0 / 3.0);
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn blank_topic_rejected() {
        assert_eq!(InterestTopic::new("  \t ", TopicSource::RealUserList), Err(PersonaError::EmptyTopic));
        assert_eq!(InterestTopic::new(" Pet   Supplies ", TopicSource::RealUserList).unwrap().label(), "Pet Supplies");
    }

    #[test]
    fn expand_pet_supplies() {
        let tax = Taxonomy::parse(crate::fixtures::TAXONOMY);
        let cluster = InterestCluster::from_labels(&["Pet Supplies"], TopicSource::PersonaCatalog).unwrap();
        let kw = expand_keywords(&cluster, &tax).unwrap();
        assert!(kw.contains(&"Dog Supplies".to_owned()));
        assert_eq!(kw[0], "Animals & Pet Supplies");
    }

    #[test]
    fn expand_empty_taxonomy_fails() {
        let cluster = InterestCluster::from_labels(&["Pet Supplies"], TopicSource::PersonaCatalog).unwrap();
        assert!(matches!(
            expand_keywords(&cluster, &Taxonomy::parse("")),
            Err(PersonaError::EmptyKeywordSet(_))
        ));
    }

    #[test]
    fn expand_universal_match_returns_all_leaves_in_order() {
        let tax = Taxonomy::parse("# header\nHome > Garden\nHome > Lighting > Lamps\nHome > Garden\nHome\n");
        let cluster = InterestCluster::from_labels(&["home"], TopicSource::PersonaCatalog).unwrap();
        assert_eq!(expand_keywords(&cluster, &tax).unwrap(), vec!["Garden", "Lamps", "Home"]);
    }

    #[test]
    fn queries_follow_fixed_patterns() {
        assert_eq!(
            build_queries(&["men watches"]),
            vec!["buy men watches", "sell men watches", "men watches offers"]
        );
        assert!(build_queries::<&str>(&[]).is_empty());
        let q = build_queries(&["a", "b"]);
        assert_eq!(q, vec!["buy a", "sell a", "a offers", "buy b", "sell b", "b offers"]);
    }

    #[test]
    fn persona_capped_at_max() {
        let source = MapSource(vec![
            ("q1", (0..6).map(|i| (Box::leak(format!("s{i}.com").into_boxed_str()) as &str, true)).collect()),
            ("q2", (6..12).map(|i| (Box::leak(format!("s{i}.com").into_boxed_str()) as &str, true)).collect()),
        ]);
        let p = generate_persona(1, "x", &["k".into()], &["q1".into(), "q2".into()], &source, PageBounds::default())
            .unwrap();
        assert_eq!(p.persona_pages.len(), 10);
        assert_eq!(p.persona_pages[0], "s0.com");
        assert_eq!(p.persona_pages[9], "s9.com");
    }

    #[test]
    fn persona_fails_below_min() {
        let source = MapSource(vec![("q", vec![("a.com", true), ("b.com", true), ("c.com", true), ("d.com", false)])]);
        let err = generate_persona(3, "x", &["k".into()], &["q".into()], &source, PageBounds::default()).unwrap_err();
        assert_eq!(err, PersonaError::FormationFailure { id: 3, found: 3, min: 5 });
    }

    #[test]
    fn persona_dedupes_by_registrable_domain() {
        // 7 distinct registrable domains hidden behind hosts and repeats
        let source = MapSource(vec![
            ("q1", vec![("www.a.com", true), ("shop.a.com", true), ("b.co.uk", true), ("org.example", false)]),
            ("q2", vec![("a.com", true), ("c.com", true), ("www.b.co.uk", true), ("d.net", true)]),
            ("q3", vec![("e.io", true), ("f.org", true), ("c.com", true), ("g.com", true)]),
        ]);
        let qs: Vec<String> = ["q1", "q2", "q3"].iter().map(|s| s.to_string()).collect();
        let p = generate_persona(2, "x", &["k".into()], &qs, &source, PageBounds::default()).unwrap();
        assert_eq!(p.persona_pages, vec!["a.com", "b.co.uk", "c.com", "d.net", "e.io", "f.org", "g.com"]);
    }

    #[test]
    fn control_leak_rejected() {
        let p = Persona { id: 4, category_label: "x".into(), keywords: vec!["k".into()], persona_pages: vec!["weather.com".into()] };
        let control = ControlPageSet { pages: vec!["www.weather.com".into()], neutrality_attested: true, cdt_tracker_pages: false };
        assert_eq!(
            validate_experiment(&[p], &control),
            Err(PersonaError::ControlLeak { persona: 4, domain: "weather.com".into() })
        );
    }

    #[test]
    fn bundled_catalog_forms_ten_personas() {
        let catalog = PersonaCatalog::parse(crate::fixtures::PERSONA_CATALOG).unwrap();
        let topics = parse_topics(crate::fixtures::TOPICS, TopicSource::RealUserList);
        let taxonomy = Taxonomy::parse(crate::fixtures::TAXONOMY);
        let source = FixtureSearchSource::parse(crate::fixtures::SEARCH_FIXTURE).unwrap();
        let build = build_personas(&catalog, &topics, &taxonomy, &source, BuildParams::default());
        assert_eq!(build.personas.iter().map(|p| p.id).collect::<Vec<_>>(), (1..=10).collect::<Vec<_>>());
        assert_eq!(build.failures.len(), 1);
        assert_eq!(build.failures[0].0, 11);
        for p in &build.personas {
            assert!((5..=10).contains(&p.persona_pages.len()), "{p:?}");
        }
        assert_eq!(bundled_personas(), build.personas);
    }
}
