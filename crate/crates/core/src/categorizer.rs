//! Landing-domain categories from a tab-separated database.
//!
//! Lookups are exact on the registrable domain. Misses return the
//! `Uncategorized` sentinel and are queued once for manual review.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;

use thiserror::Error;

pub const UNCATEGORIZED: &str = "Uncategorized";
pub const MAX_LABELS: usize = 4;

#[derive(Debug, Error)]
pub enum CategorizerError {
    #[error("category db line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("review queue: {0}")]
    Queue(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CategoryDb {
    entries: BTreeMap<String, Vec<String>>,
}

impl CategoryDb {
    /// `domain<TAB>cat;cat;...` per line; `#` comments and blank lines skipped.
    pub fn parse(text: &str) -> Result<Self, CategorizerError> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let err = |message: &str| CategorizerError::Parse { line: i + 1, message: message.to_owned() };
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (domain, cats) = line.split_once('\t').ok_or_else(|| err("missing tab"))?;
            let domain = domain.trim().to_ascii_lowercase();
            if domain.is_empty() {
                return Err(err("empty domain"));
            }
            let labels: Vec<String> =
                cats.split(';').map(str::trim).filter(|c| !c.is_empty()).map(str::to_owned).collect();
            if labels.is_empty() || labels.len() > MAX_LABELS {
                return Err(err("expected 1 to 4 categories"));
            }
            if entries.insert(domain, labels).is_some() {
                return Err(err("duplicate domain"));
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, domain: &str) -> Option<&[String]> {
        self.entries.get(&domain.to_ascii_lowercase()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every label used by some entry.
    pub fn universe(&self) -> BTreeSet<&str> {
        self.entries.values().flatten().map(String::as_str).collect()
    }
}

/// Domains awaiting manual classification. Each domain is recorded once;
/// when a file is attached the domain is also appended to it.
#[derive(Debug, Default)]
pub struct ReviewQueue {
    inner: Mutex<(BTreeSet<String>, Vec<String>)>,
    path: Option<PathBuf>,
}

impl ReviewQueue {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn with_file(path: impl Into<PathBuf>) -> Self {
        Self { inner: Mutex::default(), path: Some(path.into()) }
    }

    fn push(&self, domain: &str) -> Result<(), CategorizerError> {
        let mut guard = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        if !guard.0.insert(domain.to_owned()) {
            return Ok(());
        }
        guard.1.push(domain.to_owned());
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{domain}")?;
        }
        Ok(())
    }

    /// Queued domains in first-seen order.
    pub fn pending(&self) -> Vec<String> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner()).1.clone()
    }
}

pub struct Categorizer<'a> {
    db: &'a CategoryDb,
    queue: &'a ReviewQueue,
}

impl<'a> Categorizer<'a> {
    pub fn new(db: &'a CategoryDb, queue: &'a ReviewQueue) -> Self {
        Self { db, queue }
    }

    pub fn categorize(&self, domain: &str) -> Result<Vec<String>, CategorizerError> {
        match self.db.get(domain) {
            Some(labels) => Ok(labels.to_vec()),
            None => {
                self.queue.push(&domain.to_ascii_lowercase())?;
                Ok(vec![UNCATEGORIZED.to_owned()])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coverage {
    pub fraction: f64,
    pub universe: usize,
}

/// Share of observed landing domains the db can categorize, and the number of
/// distinct labels actually assigned.
pub fn coverage<S: AsRef<str>>(db: &CategoryDb, domains: &[S]) -> Coverage {
    if domains.is_empty() {
        return Coverage { fraction: 1.0, universe: 0 };
    }
    let mut hits = 0usize;
    let mut labels = BTreeSet::new();
    for d in domains {
        if let Some(l) = db.get(d.as_ref()) {
            hits += 1;
            labels.extend(l.iter().map(String::as_str));
        }
    }
    Coverage { fraction: hits as f64 / domains.len() as f64, universe: labels.len() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_and_sentinel() {
        let db = CategoryDb::parse("shop.example\tOnline Shopping;Fashion\nfour.com\ta;b;c;d\n").unwrap();
        let queue = ReviewQueue::in_memory();
        let cat = Categorizer::new(&db, &queue);
        assert_eq!(cat.categorize("shop.example").unwrap(), vec!["Online Shopping", "Fashion"]);
        assert_eq!(cat.categorize("four.com").unwrap(), vec!["a", "b", "c", "d"]);
        assert_eq!(cat.categorize("unknown.org").unwrap(), vec![UNCATEGORIZED]);
        assert_eq!(cat.categorize("unknown.org").unwrap(), vec![UNCATEGORIZED]);
        assert_eq!(queue.pending(), vec!["unknown.org"]);
    }

    #[test]
    fn queue_file_gets_each_miss_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("review.txt");
        let db = CategoryDb::default();
        let queue = ReviewQueue::with_file(&path);
        let cat = Categorizer::new(&db, &queue);
        for d in ["a.com", "b.com", "a.com"] {
            cat.categorize(d).unwrap();
        }
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "a.com\nb.com\n");
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(CategoryDb::parse("x.com\ta;b;c;d;e").is_err());
        assert!(CategoryDb::parse("x.com").is_err());
        assert!(CategoryDb::parse("x.com\t ; ").is_err());
        assert!(CategoryDb::parse("x.com\ta\nx.com\tb").is_err());
    }

    #[test]
    fn coverage_cases() {
        let db = CategoryDb::parse("a.com\tX;Y\nb.com\tY\n").unwrap();
        assert_eq!(coverage::<&str>(&db, &[]), Coverage { fraction: 1.0, universe: 0 });
        let mut domains: Vec<String> = (0..96).map(|i| if i % 2 == 0 { "a.com" } else { "b.com" }.to_owned()).collect();
        domains.extend((0..4).map(|i| format!("miss{i}.com")));
        let c = coverage(&db, &domains);
        assert!((c.fraction - 0.96).abs() < 1e-12);
        assert_eq!(c.universe, 2);
    }

    #[test]
    fn bundled_db_parses() {
        let db = CategoryDb::parse(crate::fixtures::CATEGORY_DB).unwrap();
        assert!(db.len() > 150);
        assert!(db.get("weather.com").is_some());
    }
}
