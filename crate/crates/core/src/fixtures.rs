//! Fixture data bundled with the crate so experiments run offline.
//!
//! Every file here can be replaced at run time by passing a path on the
//! command line or in the pipeline config; the bundled copies are the
//! defaults.

pub const PUBLIC_SUFFIX_LIST: &str = include_str!("../fixtures/public_suffix_list.dat");
pub const EASYLIST: &str = include_str!("../fixtures/easylist_fixture.txt");
pub const CATEGORY_DB: &str = include_str!("../fixtures/category_db.tsv");
pub const TAXONOMY: &str = include_str!("../fixtures/taxonomy.txt");
pub const TOPICS: &str = include_str!("../fixtures/topics.txt");
pub const PERSONA_CATALOG: &str = include_str!("../fixtures/persona_catalog.toml");
pub const SEARCH_FIXTURE: &str = include_str!("../fixtures/search_fixture.jsonl");
pub const WORLD: &str = include_str!("../fixtures/world.toml");
pub const TRACKER_LIST: &str = include_str!("../fixtures/tracker_list.tsv");
pub const FILTER_CONFORMANCE: &str = include_str!("../fixtures/filter_conformance.tsv");
