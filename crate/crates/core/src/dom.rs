//! Static DOM snapshots.
//!
//! HTML is parsed with html5ever (via `scraper`) and converted into a small
//! owned tree. Inline iframe content, which HTML parsers keep as raw text, is
//! parsed again as a fragment so frames can be walked like any other subtree.
//! A `srcdoc` attribute takes precedence over inline content.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use scraper::{Html, Node as HtmlNode};
use thiserror::Error;
use url::Url;

/// Frames nested deeper than this are left unparsed.
pub const MAX_PARSE_DEPTH: usize = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DomError {
    #[error("snapshot has no root element")]
    SnapshotMalformed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Element(Element),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Element {
    pub tag: String,
    pub attrs: BTreeMap<String, String>,
    pub children: Vec<Node>,
}

impl Element {
    pub fn new(tag: &str) -> Self {
        Self { tag: tag.to_ascii_lowercase(), ..Self::default() }
    }

    pub fn attr(mut self, key: &str, value: impl Into<String>) -> Self {
        self.attrs.insert(key.to_ascii_lowercase(), value.into());
        self
    }

    pub fn child(mut self, el: Element) -> Self {
        self.children.push(Node::Element(el));
        self
    }

    pub fn text(mut self, text: impl Into<String>) -> Self {
        self.children.push(Node::Text(text.into()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.attrs.get(key).map(String::as_str)
    }

    pub fn elements(&self) -> impl Iterator<Item = &Element> {
        self.children.iter().filter_map(|n| match n {
            Node::Element(e) => Some(e),
            Node::Text(_) => None,
        })
    }

    /// Concatenated descendant text.
    pub fn text_content(&self) -> String {
        let mut out = String::new();
        self.collect_text(&mut out);
        out
    }

    fn collect_text(&self, out: &mut String) {
        for n in &self.children {
            match n {
                Node::Text(t) => out.push_str(t),
                Node::Element(e) => e.collect_text(out),
            }
        }
    }

    /// Pre-order visit of this element and its descendants. The callback
    /// returns false to skip an element's subtree.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Element) -> bool) {
        if f(self) {
            for e in self.elements() {
                e.walk(f);
            }
        }
    }

    fn contains_tag(&self, tag: &str) -> bool {
        self.elements().any(|e| e.tag == tag || e.contains_tag(tag))
    }

    pub fn to_html(&self) -> String {
        let mut out = String::new();
        self.render(&mut out);
        out
    }

    fn render(&self, out: &mut String) {
        let nested_frames = self.tag == "iframe" && self.contains_tag("iframe");
        let _ = write!(out, "<{}", self.tag);
        for (k, v) in &self.attrs {
            if nested_frames && k == "srcdoc" {
                continue;
            }
            let _ = write!(out, " {k}=\"{}\"", escape(v, true));
        }
        if nested_frames {
            let inner: String = self.inner_html();
            let _ = write!(out, " srcdoc=\"{}\"", escape(&inner, true));
        }
        out.push('>');
        if is_void(&self.tag) {
            return;
        }
        if self.tag == "iframe" {
            if !nested_frames {
                out.push_str(&self.inner_html());
            }
        } else {
            for n in &self.children {
                match n {
                    Node::Text(t) => out.push_str(&escape(t, false)),
                    Node::Element(e) => e.render(out),
                }
            }
        }
        let _ = write!(out, "</{}>", self.tag);
    }

    fn inner_html(&self) -> String {
        let mut out = String::new();
        for n in &self.children {
            match n {
                Node::Text(t) => out.push_str(&escape(t, false)),
                Node::Element(e) => e.render(&mut out),
            }
        }
        out
    }
}

fn is_void(tag: &str) -> bool {
    matches!(tag, "area" | "base" | "br" | "col" | "embed" | "hr" | "img" | "input" | "link" | "meta" | "source" | "track" | "wbr")
}

fn escape(s: &str, attr: bool) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' if !attr => out.push_str("&lt;"),
            '>' if !attr => out.push_str("&gt;"),
            '"' if attr => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomSnapshot {
    pub root: Option<Element>,
    pub page_url: Url,
    /// Seconds on the experiment clock.
    pub captured_at: u64,
}

impl DomSnapshot {
    pub fn new(root: Element, page_url: Url, captured_at: u64) -> Self {
        Self { root: Some(root), page_url, captured_at }
    }

    /// Blank input yields a snapshot without a root.
    pub fn from_html(html: &str, page_url: Url, captured_at: u64) -> Self {
        let root = (!html.trim().is_empty()).then(|| parse_document(html));
        Self { root, page_url, captured_at }
    }

    pub fn root(&self) -> Result<&Element, DomError> {
        self.root.as_ref().ok_or(DomError::SnapshotMalformed)
    }

    pub fn to_html(&self) -> String {
        self.root.as_ref().map(Element::to_html).unwrap_or_default()
    }
}

/// Parses a full document; the result is the `html` element.
pub fn parse_document(html: &str) -> Element {
    let doc = Html::parse_document(html);
    let root = doc.root_element();
    convert(*root, 0)
}

/// Parses a fragment into the children of a synthetic container element.
pub fn parse_fragment(html: &str, depth: usize) -> Vec<Node> {
    let frag = Html::parse_fragment(html);
    // html5ever wraps fragments in an <html> context element
    frag.root_element().children().flat_map(|c| convert_node(c, depth)).collect()
}

fn convert(node: ego_tree::NodeRef<'_, HtmlNode>, depth: usize) -> Element {
    let HtmlNode::Element(el) = node.value() else {
        return Element::new("html");
    };
    let mut out = Element::new(el.name());
    for (k, v) in el.attrs() {
        out.attrs.insert(k.to_ascii_lowercase(), v.to_owned());
    }
    if out.tag == "iframe" {
        out.children = frame_children(&out, node, depth);
        out.attrs.remove("srcdoc");
    } else {
        out.children = node.children().flat_map(|c| convert_node(c, depth)).collect();
    }
    out
}

fn frame_children(frame: &Element, node: ego_tree::NodeRef<'_, HtmlNode>, depth: usize) -> Vec<Node> {
    let inline: String = node
        .children()
        .filter_map(|c| match c.value() {
            HtmlNode::Text(t) => Some(t.to_string()),
            _ => None,
        })
        .collect();
    let source = frame.get("srcdoc").map(str::to_owned).unwrap_or(inline);
    if source.trim().is_empty() {
        return Vec::new();
    }
    if depth + 1 >= MAX_PARSE_DEPTH {
        return vec![Node::Text(source)];
    }
    parse_fragment(&source, depth + 1)
}

fn convert_node(node: ego_tree::NodeRef<'_, HtmlNode>, depth: usize) -> Vec<Node> {
    match node.value() {
        HtmlNode::Element(_) => vec![Node::Element(convert(node, depth))],
        HtmlNode::Text(t) => vec![Node::Text(t.to_string())],
        _ => Vec::new(),
    }
}
