//! Adblock-syntax filter lists (the EasyList subset that applies to URLs).
//!
//! Supported: `||` and `|` anchors, end anchor `|`, `*`, `^`, exception rules
//! (`@@`), and the options `domain=`, `third-party` and `~third-party`. Rules
//! carrying any other option are skipped whole, as are comments, headers,
//! element-hiding rules and regex rules.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::Serialize;
use url::{Position, Url};

use crate::domain::{is_same_or_subdomain, registrable_domain, registrable_domain_of};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatternToken {
    Literal(String),
    Wildcard,
    Separator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeftAnchor {
    None,
    Start,
    Domain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    pub left: LeftAnchor,
    pub tokens: Vec<PatternToken>,
    pub end_anchor: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PartyFilter {
    #[default]
    Any,
    ThirdParty,
    FirstParty,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RuleOptions {
    pub include_domains: Vec<String>,
    pub exclude_domains: Vec<String>,
    pub party: PartyFilter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    Blocking,
    Exception,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterRule {
    pub raw: String,
    pub kind: RuleKind,
    pub pattern: Pattern,
    pub options: RuleOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    Empty,
    Comment,
    Header,
    ElementHiding,
    Regex,
    UnsupportedOption,
    Invalid,
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SkipReason::Empty => "empty",
            SkipReason::Comment => "comment",
            SkipReason::Header => "header",
            SkipReason::ElementHiding => "element-hiding",
            SkipReason::Regex => "regex",
            SkipReason::UnsupportedOption => "unsupported-option",
            SkipReason::Invalid => "invalid",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedLine {
    Rule(FilterRule),
    Skip(SkipReason),
}

/// Parses one filter list line. Never fails: anything unusable is a skip.
pub fn parse_line(line: &str) -> ParsedLine {
    use ParsedLine::Skip;
    let line = line.trim();
    if line.is_empty() {
        return Skip(SkipReason::Empty);
    }
    if line.starts_with('!') {
        return Skip(SkipReason::Comment);
    }
    if line.starts_with('[') && line.ends_with(']') {
        return Skip(SkipReason::Header);
    }
    if ["##", "#@#", "#?#", "#$#", "#%#"].iter().any(|m| line.contains(m)) {
        return Skip(SkipReason::ElementHiding);
    }
    let (kind, body) = match line.strip_prefix("@@") {
        Some(rest) => (RuleKind::Exception, rest),
        None => (RuleKind::Blocking, line),
    };
    if body.len() >= 2 && body.starts_with('/') && body.ends_with('/') {
        return Skip(SkipReason::Regex);
    }
    let (pattern_text, options) = match body.rfind('$') {
        Some(i) => match parse_options(&body[i + 1..]) {
            Ok(opts) => (&body[..i], opts),
            Err(reason) => return Skip(reason),
        },
        None => (body, RuleOptions::default()),
    };
    if pattern_text.len() >= 2 && pattern_text.starts_with('/') && pattern_text.ends_with('/') {
        return Skip(SkipReason::Regex);
    }
    match parse_pattern(pattern_text) {
        Some(pattern) => ParsedLine::Rule(FilterRule { raw: line.to_owned(), kind, pattern, options }),
        None => Skip(SkipReason::Invalid),
    }
}

fn parse_options(text: &str) -> Result<RuleOptions, SkipReason> {
    if text.is_empty() {
        return Err(SkipReason::Invalid);
    }
    let mut opts = RuleOptions::default();
    for opt in text.split(',') {
        let opt = opt.trim();
        if let Some(list) = opt.strip_prefix("domain=") {
            for d in list.split('|') {
                let d = d.trim();
                match d.strip_prefix('~') {
                    Some(ex) if !ex.is_empty() => opts.exclude_domains.push(ex.to_ascii_lowercase()),
                    None if !d.is_empty() => opts.include_domains.push(d.to_ascii_lowercase()),
                    _ => return Err(SkipReason::Invalid),
                }
            }
        } else {
            opts.party = match opt {
                "third-party" | "3p" => PartyFilter::ThirdParty,
                "~third-party" | "first-party" | "1p" => PartyFilter::FirstParty,
                "" => return Err(SkipReason::Invalid),
                _ => return Err(SkipReason::UnsupportedOption),
            };
        }
    }
    Ok(opts)
}

fn parse_pattern(text: &str) -> Option<Pattern> {
    if text.chars().any(char::is_whitespace) {
        return None;
    }
    let (left, rest) = if let Some(r) = text.strip_prefix("||") {
        if r.is_empty() {
            return None;
        }
        (LeftAnchor::Domain, r)
    } else if let Some(r) = text.strip_prefix('|') {
        (LeftAnchor::Start, r)
    } else {
        (LeftAnchor::None, text)
    };
    let (end_anchor, rest) = match rest.strip_suffix('|') {
        Some(r) => (true, r),
        None => (false, rest),
    };
    if rest.contains('|') {
        return None;
    }
    let mut tokens = Vec::new();
    let mut literal = String::new();
    for c in rest.chars() {
        match c {
            '*' | '^' => {
                if !literal.is_empty() {
                    tokens.push(PatternToken::Literal(std::mem::take(&mut literal)));
                }
                if c == '^' {
                    tokens.push(PatternToken::Separator);
                } else if tokens.last() != Some(&PatternToken::Wildcard) {
                    tokens.push(PatternToken::Wildcard);
                }
            }
            _ => literal.push(c),
        }
    }
    if !literal.is_empty() {
        tokens.push(PatternToken::Literal(literal));
    }
    Some(Pattern { left, tokens, end_anchor })
}

/// A request URL judged from a given page.
#[derive(Debug, Clone)]
pub struct MatchContext {
    url: String,
    host_span: (usize, usize),
    request_domain: Option<String>,
    page_domain: Option<String>,
    third_party: Option<bool>,
}

impl MatchContext {
    /// `page_domain` may be a host or a registrable domain; `None` leaves the
    /// party unknown, so party-restricted and domain-included rules never match.
    pub fn new(url: &Url, page_domain: Option<&str>) -> Self {
        let host_start = url[..Position::BeforeHost].len();
        let host_end = url[..Position::AfterHost].len();
        let request_domain = registrable_domain_of(url);
        let page_domain = page_domain.map(|p| registrable_domain(p).unwrap_or_else(|| p.to_ascii_lowercase()));
        let third_party = page_domain.as_ref().map(|p| request_domain.as_deref() != Some(p.as_str()));
        Self { url: url.as_str().to_owned(), host_span: (host_start, host_end), request_domain, page_domain, third_party }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn third_party(&self) -> Option<bool> {
        self.third_party
    }

    pub fn request_domain(&self) -> Option<&str> {
        self.request_domain.as_deref()
    }
}

fn is_separator(b: u8) -> bool {
    !(b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.' | b'%'))
}

impl FilterRule {
    pub fn matches(&self, ctx: &MatchContext) -> bool {
        self.options_allow(ctx) && self.pattern.matches(ctx)
    }

    fn options_allow(&self, ctx: &MatchContext) -> bool {
        let party_ok = match self.options.party {
            PartyFilter::Any => true,
            PartyFilter::ThirdParty => ctx.third_party == Some(true),
            PartyFilter::FirstParty => ctx.third_party == Some(false),
        };
        if !party_ok {
            return false;
        }
        let page = ctx.page_domain.as_deref();
        let on = |d: &String| page.is_some_and(|p| is_same_or_subdomain(p, d));
        if !self.options.include_domains.is_empty() && !self.options.include_domains.iter().any(on) {
            return false;
        }
        !self.options.exclude_domains.iter().any(on)
    }

    /// Lowercased alphanumeric run (length >= 3) that any matching URL must
    /// contain as a whole token. `None` for rules that go unindexed.
    pub fn index_key(&self) -> Option<String> {
        let toks = &self.pattern.tokens;
        for (i, tok) in toks.iter().enumerate() {
            let PatternToken::Literal(lit) = tok else { continue };
            let bytes = lit.as_bytes();
            let before_ok = match i {
                0 => self.pattern.left != LeftAnchor::None,
                _ => toks[i - 1] == PatternToken::Separator,
            };
            let after_ok = match toks.get(i + 1) {
                None => self.pattern.end_anchor,
                Some(t) => *t == PatternToken::Separator,
            };
            let mut start = 0;
            while start < bytes.len() {
                if !bytes[start].is_ascii_alphanumeric() {
                    start += 1;
                    continue;
                }
                let mut end = start;
                while end < bytes.len() && bytes[end].is_ascii_alphanumeric() {
                    end += 1;
                }
                let left = start > 0 || before_ok;
                let right = end < bytes.len() || after_ok;
                if left && right && end - start >= 3 {
                    return Some(lit[start..end].to_ascii_lowercase());
                }
                start = end;
            }
        }
        None
    }
}

impl Pattern {
    pub fn matches(&self, ctx: &MatchContext) -> bool {
        let url = ctx.url.as_bytes();
        let (hs, he) = ctx.host_span;
        let mut seen = vec![false; (self.tokens.len() + 1) * (url.len() + 1)];
        let mut try_at = |pos: usize| match_from(self, url, (hs, he), 0, pos, &mut seen);
        match self.left {
            LeftAnchor::Start => try_at(0),
            LeftAnchor::Domain => {
                (hs..he).filter(|&p| p == hs || url[p - 1] == b'.').any(&mut try_at)
            }
            LeftAnchor::None => (0..=url.len()).any(try_at),
        }
    }
}

fn literal_at(lit: &str, url: &[u8], host: (usize, usize), pos: usize) -> bool {
    let lit = lit.as_bytes();
    if pos + lit.len() > url.len() {
        return false;
    }
    lit.iter().zip(&url[pos..]).enumerate().all(|(k, (&a, &b))| {
        let i = pos + k;
        if i >= host.0 && i < host.1 {
            a.eq_ignore_ascii_case(&b)
        } else {
            a == b
        }
    })
}

fn match_from(p: &Pattern, url: &[u8], host: (usize, usize), ti: usize, pos: usize, seen: &mut [bool]) -> bool {
    let key = ti * (url.len() + 1) + pos;
    if seen[key] {
        return false;
    }
    seen[key] = true;
    let Some(tok) = p.tokens.get(ti) else {
        return !p.end_anchor || pos == url.len();
    };
    match tok {
        PatternToken::Literal(lit) => {
            literal_at(lit, url, host, pos) && match_from(p, url, host, ti + 1, pos + lit.len(), seen)
        }
        PatternToken::Separator => {
            if pos == url.len() {
                match_from(p, url, host, ti + 1, pos, seen)
            } else {
                is_separator(url[pos]) && match_from(p, url, host, ti + 1, pos + 1, seen)
            }
        }
        PatternToken::Wildcard => (pos..=url.len()).any(|q| match_from(p, url, host, ti + 1, q, seen)),
    }
}

#[derive(Debug, Clone, Default)]
struct IndexedRules {
    rules: Vec<FilterRule>,
    buckets: HashMap<String, Vec<usize>>,
    unindexed: Vec<usize>,
}

impl IndexedRules {
    fn push(&mut self, rule: FilterRule) {
        let id = self.rules.len();
        match rule.index_key() {
            Some(k) => self.buckets.entry(k).or_default().push(id),
            None => self.unindexed.push(id),
        }
        self.rules.push(rule);
    }

    fn candidates(&self, url_tokens: &[&str]) -> Vec<usize> {
        let mut ids: Vec<usize> = self.unindexed.clone();
        for t in url_tokens {
            if let Some(b) = self.buckets.get(*t) {
                ids.extend_from_slice(b);
            }
        }
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    fn matching(&self, ctx: &MatchContext, url_tokens: &[&str]) -> Vec<&FilterRule> {
        self.candidates(url_tokens).into_iter().map(|i| &self.rules[i]).filter(|r| r.matches(ctx)).collect()
    }

    fn any_match(&self, ctx: &MatchContext, url_tokens: &[&str]) -> bool {
        self.candidates(url_tokens).into_iter().any(|i| self.rules[i].matches(ctx))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParseReport {
    pub blocking: usize,
    pub exception: usize,
    pub skipped: BTreeMap<SkipReason, usize>,
    /// Value of a `! Version:` header line, if present.
    pub version: Option<String>,
}

/// Parsed rules with a token index for fast lookup.
#[derive(Debug, Clone, Default)]
pub struct FilterSet {
    blocking: IndexedRules,
    exceptions: IndexedRules,
    report: ParseReport,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict<'a> {
    pub is_ad: bool,
    pub blocking: Vec<&'a FilterRule>,
    pub exceptions: Vec<&'a FilterRule>,
}

fn url_tokens(url: &str) -> Vec<String> {
    url.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| t.len() >= 3)
        .map(str::to_ascii_lowercase)
        .collect()
}

impl FilterSet {
    pub fn parse(text: &str) -> Self {
        let mut set = FilterSet::default();
        for line in text.lines() {
            if let Some(v) = line.trim().strip_prefix("! Version:") {
                set.report.version.get_or_insert_with(|| v.trim().to_owned());
            }
            set.add_line(line);
        }
        set
    }

    pub fn from_rules<S: AsRef<str>>(lines: &[S]) -> Self {
        let mut set = FilterSet::default();
        for l in lines {
            set.add_line(l.as_ref());
        }
        set
    }

    pub fn add_line(&mut self, line: &str) {
        match parse_line(line) {
            ParsedLine::Rule(rule) => self.add_rule(rule),
            ParsedLine::Skip(reason) => *self.report.skipped.entry(reason).or_insert(0) += 1,
        }
    }

    pub fn add_rule(&mut self, rule: FilterRule) {
        match rule.kind {
            RuleKind::Blocking => {
                self.report.blocking += 1;
                self.blocking.push(rule);
            }
            RuleKind::Exception => {
                self.report.exception += 1;
                self.exceptions.push(rule);
            }
        }
    }

    pub fn report(&self) -> &ParseReport {
        &self.report
    }

    pub fn rules(&self) -> impl Iterator<Item = &FilterRule> {
        self.blocking.rules.iter().chain(&self.exceptions.rules)
    }

    pub fn matches(&self, ctx: &MatchContext) -> bool {
        let owned = url_tokens(&ctx.url);
        let toks: Vec<&str> = owned.iter().map(String::as_str).collect();
        self.blocking.any_match(ctx, &toks) && !self.exceptions.any_match(ctx, &toks)
    }

    /// Reference implementation that ignores the index.
    pub fn matches_linear(&self, ctx: &MatchContext) -> bool {
        self.blocking.rules.iter().any(|r| r.matches(ctx)) && !self.exceptions.rules.iter().any(|r| r.matches(ctx))
    }

    /// Verdict plus every rule that fired, in list order.
    pub fn explain(&self, ctx: &MatchContext) -> Verdict<'_> {
        let owned = url_tokens(&ctx.url);
        let toks: Vec<&str> = owned.iter().map(String::as_str).collect();
        let blocking = self.blocking.matching(ctx, &toks);
        let exceptions = self.exceptions.matching(ctx, &toks);
        Verdict { is_ad: !blocking.is_empty() && exceptions.is_empty(), blocking, exceptions }
    }

    /// Order-preserving verdicts for candidate URLs seen on `page_domain`.
    pub fn classify_domains(&self, candidates: &[Url], page_domain: &str) -> Vec<(Url, bool)> {
        candidates
            .iter()
            .map(|u| (u.clone(), self.matches(&MatchContext::new(u, Some(page_domain)))))
            .collect()
    }
}

/// One line of the conformance fixture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConformanceCase {
    pub expected: bool,
    pub page_domain: Option<String>,
    pub url: String,
    pub rules: Vec<String>,
}

/// `expected<TAB>page|-<TAB>url<TAB>rule...`; `#` lines are comments.
pub fn parse_conformance(text: &str) -> Result<Vec<ConformanceCase>, String> {
    let mut cases = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let mut next = |name: &str| cols.next().ok_or(format!("line {}: missing {name}", i + 1));
        let expected = match next("expected")? {
            "true" => true,
            "false" => false,
            other => return Err(format!("line {}: bad verdict `{other}`", i + 1)),
        };
        let page = next("page")?;
        let url = next("url")?.to_owned();
        let rules = cols.map(str::to_owned).collect();
        let page_domain = (page != "-").then(|| page.to_owned());
        cases.push(ConformanceCase { expected, page_domain, url, rules });
    }
    Ok(cases)
}
