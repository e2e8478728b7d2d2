//! Registrable-domain (eTLD+1) computation over the bundled public-suffix
//! snapshot.

use std::net::IpAddr;
use std::sync::LazyLock;

use publicsuffix::{List, Psl};
use url::Url;

static SUFFIXES: LazyLock<List> = LazyLock::new(|| {
    crate::fixtures::PUBLIC_SUFFIX_LIST
        .parse()
        .expect("bundled public suffix list parses")
});

/// Returns the registrable domain of `host`, lowercased.
///
/// IP literals are returned unchanged. Hosts that are themselves public
/// suffixes (e.g. `co.uk`) have no registrable domain.
pub fn registrable_domain(host: &str) -> Option<String> {
    let host = host.trim().trim_end_matches('.').to_ascii_lowercase();
    if host.is_empty() || host.contains(['/', ':', ' ']) && host.parse::<IpAddr>().is_err() {
        return None;
    }
    if host.parse::<IpAddr>().is_ok() {
        return Some(host);
    }
    if host.split('.').any(str::is_empty) {
        return None;
    }
    let domain = SUFFIXES.domain(host.as_bytes())?;
    std::str::from_utf8(domain.as_bytes()).ok().map(str::to_owned)
}

pub fn registrable_domain_of(url: &Url) -> Option<String> {
    url.host_str().and_then(registrable_domain)
}

/// `true` when `host` equals `domain` or is a subdomain of it.
pub fn is_same_or_subdomain(host: &str, domain: &str) -> bool {
    let host = host.trim_end_matches('.');
    host.eq_ignore_ascii_case(domain)
        || (host.len() > domain.len()
            && host.as_bytes()[host.len() - domain.len() - 1] == b'.'
            && host[host.len() - domain.len()..].eq_ignore_ascii_case(domain))
}
