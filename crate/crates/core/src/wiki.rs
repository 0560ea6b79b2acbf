//! Wiki ingestion: tolerant HTML parsing into clean Markdown pages, table
//! extraction, and template-based question/answer fact generation.
//!
//! The parser accepts sloppy wiki HTML (unclosed tags, stray closers) and
//! never inlines tables into the Markdown body; they are extracted as
//! structured [`Table`] values instead. Sections titled like "History" or
//! "Trivia" are dropped and recorded.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed;

/// Section titles removed during cleaning (case-insensitive).
pub const BANNED_SECTIONS: [&str; 9] = [
    "history",
    "version",
    "version history",
    "versions",
    "trivia",
    "gallery",
    "references",
    "external links",
    "see also",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub caption: Option<String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WikiPage {
    pub title: String,
    pub markdown: String,
    pub tables: Vec<Table>,
    pub dropped_sections: Vec<String>,
    /// Tables that could not be normalized (no usable header/rows).
    pub malformed_tables: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactSource {
    WikiPage,
    WikiTable,
    Recipe,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactPair {
    pub question: String,
    pub answer: String,
    pub source: FactSource,
    pub page: String,
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
    #[error("cannot write {path}: {message}")]
    Write { path: String, message: String },
}

// ---------------------------------------------------------------------------
// Minimal tolerant HTML tree
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
enum Node {
    Element {
        tag: String,
        attrs: BTreeMap<String, String>,
        children: Vec<Node>,
    },
    Text(String),
}

const VOID_TAGS: [&str; 8] = ["br", "img", "hr", "meta", "link", "input", "col", "source"];

fn decode_entities(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.char_indices();
    while let Some((i, c)) = chars.next() {
        if c != '&' {
            out.push(c);
            continue;
        }
        let rest = &text[i + 1..];
        let semi = rest.find(';').filter(|&p| p <= 10);
        match semi {
            None => out.push('&'),
            Some(p) => {
                let name = &rest[..p];
                let decoded = match name {
                    "amp" => Some('&'),
                    "lt" => Some('<'),
                    "gt" => Some('>'),
                    "quot" => Some('"'),
                    "apos" => Some('\''),
                    "nbsp" => Some(' '),
                    _ => {
                        if let Some(num) = name.strip_prefix("#x").or(name.strip_prefix("#X")) {
                            u32::from_str_radix(num, 16).ok().and_then(char::from_u32)
                        } else if let Some(num) = name.strip_prefix('#') {
                            num.parse::<u32>().ok().and_then(char::from_u32)
                        } else {
                            None
                        }
                    }
                };
                match decoded {
                    Some(ch) => {
                        out.push(ch);
                        for _ in 0..p + 1 {
                            chars.next();
                        }
                    }
                    None => out.push('&'),
                }
            }
        }
    }
    out
}

/// Parse attributes from the inside of a tag, tolerating unquoted values.
fn parse_attrs(raw: &str) -> BTreeMap<String, String> {
    let mut attrs = BTreeMap::new();
    let mut rest = raw.trim();
    while !rest.is_empty() {
        let name_end = rest
            .find(|c: char| c == '=' || c.is_whitespace())
            .unwrap_or(rest.len());
        let name = rest[..name_end].trim().to_ascii_lowercase();
        rest = rest[name_end..].trim_start();
        if name.is_empty() {
            break;
        }
        if let Some(after_eq) = rest.strip_prefix('=') {
            let after_eq = after_eq.trim_start();
            let (value, remaining) = if let Some(q) = after_eq.strip_prefix('"') {
                match q.find('"') {
                    Some(end) => (q[..end].to_string(), &q[end + 1..]),
                    None => (q.to_string(), ""),
                }
            } else if let Some(q) = after_eq.strip_prefix('\'') {
                match q.find('\'') {
                    Some(end) => (q[..end].to_string(), &q[end + 1..]),
                    None => (q.to_string(), ""),
                }
            } else {
                let end = after_eq
                    .find(char::is_whitespace)
                    .unwrap_or(after_eq.len());
                (after_eq[..end].to_string(), &after_eq[end..])
            };
            attrs.insert(name, decode_entities(&value));
            rest = remaining.trim_start();
        } else {
            attrs.insert(name, String::new());
        }
    }
    attrs
}

/// Tokenize and build a forest, auto-closing unclosed tags and ignoring
/// stray closers.
fn parse_html(html: &str) -> Vec<Node> {
    struct Open {
        tag: String,
        attrs: BTreeMap<String, String>,
        children: Vec<Node>,
    }
    let mut stack: Vec<Open> = Vec::new();
    let mut roots: Vec<Node> = Vec::new();

    fn push_node(stack: &mut [Open], roots: &mut Vec<Node>, node: Node) {
        match stack.last_mut() {
            Some(parent) => parent.children.push(node),
            None => roots.push(node),
        }
    }

    let bytes = html.as_bytes();
    let mut pos = 0usize;
    while pos < bytes.len() {
        if bytes[pos] == b'<' {
            if html[pos..].starts_with("<!--") {
                let end = html[pos..].find("-->").map(|e| pos + e + 3).unwrap_or(bytes.len());
                pos = end;
                continue;
            }
            let close = match html[pos..].find('>') {
                Some(c) => pos + c,
                None => {
                    // Unterminated tag: treat the remainder as text.
                    push_node(&mut stack, &mut roots, Node::Text(decode_entities(&html[pos..])));
                    break;
                }
            };
            let inner = html[pos + 1..close].trim();
            pos = close + 1;
            if inner.starts_with('!') || inner.starts_with('?') {
                continue;
            }
            if let Some(closing) = inner.strip_prefix('/') {
                let tag = closing.trim().to_ascii_lowercase();
                if let Some(idx) = stack.iter().rposition(|o| o.tag == tag) {
                    while stack.len() > idx {
                        let open = stack.pop().unwrap();
                        let node = Node::Element {
                            tag: open.tag,
                            attrs: open.attrs,
                            children: open.children,
                        };
                        push_node(&mut stack, &mut roots, node);
                    }
                }
                continue;
            }
            let self_closing = inner.ends_with('/');
            let inner = inner.trim_end_matches('/').trim();
            let name_end = inner.find(char::is_whitespace).unwrap_or(inner.len());
            let tag = inner[..name_end].to_ascii_lowercase();
            if tag.is_empty() {
                continue;
            }
            let attrs = parse_attrs(&inner[name_end..]);
            if self_closing || VOID_TAGS.contains(&tag.as_str()) {
                push_node(
                    &mut stack,
                    &mut roots,
                    Node::Element {
                        tag,
                        attrs,
                        children: Vec::new(),
                    },
                );
            } else {
                stack.push(Open {
                    tag,
                    attrs,
                    children: Vec::new(),
                });
            }
        } else {
            let next = html[pos..].find('<').map(|n| pos + n).unwrap_or(bytes.len());
            push_node(
                &mut stack,
                &mut roots,
                Node::Text(decode_entities(&html[pos..next])),
            );
            pos = next;
        }
    }
    while let Some(open) = stack.pop() {
        let node = Node::Element {
            tag: open.tag,
            attrs: open.attrs,
            children: open.children,
        };
        push_node(&mut stack, &mut roots, node);
    }
    roots
}

/// Inline text of a node, skipping reference superscripts and nested tables,
/// with whitespace collapsed.
fn inline_text(node: &Node) -> String {
    fn collect(node: &Node, out: &mut String) {
        match node {
            Node::Text(t) => out.push_str(t),
            Node::Element { tag, attrs, children } => {
                if tag == "sup" && attrs.get("class").is_some_and(|c| c.contains("reference")) {
                    return;
                }
                if tag == "table" || tag == "script" || tag == "style" {
                    return;
                }
                if tag == "br" {
                    out.push(' ');
                    return;
                }
                for child in children {
                    collect(child, out);
                }
            }
        }
    }
    let mut raw = String::new();
    collect(node, &mut raw);
    collapse_ws(&raw)
}

fn collapse_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Regex-free scrub of footnote markers like `[3]`.
fn strip_reference_markers(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '[' {
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_ascii_digit() {
                j += 1;
            }
            if j > i + 1 && j < chars.len() && chars[j] == ']' {
                i = j + 1;
                continue;
            }
        }
        out.push(chars[i]);
        i += 1;
    }
    // Collapse doubled spaces the removal may leave behind.
    let mut cleaned = String::with_capacity(out.len());
    let mut last_space = false;
    for c in out.chars() {
        if c == ' ' {
            if !last_space {
                cleaned.push(c);
            }
            last_space = true;
        } else {
            cleaned.push(c);
            last_space = false;
        }
    }
    cleaned
        .replace(" .", ".")
        .replace(" ,", ",")
        .trim()
        .to_string()
}

// ---------------------------------------------------------------------------
// Tables
// ---------------------------------------------------------------------------

fn find_tables<'a>(nodes: &'a [Node], out: &mut Vec<&'a Node>) {
    for node in nodes {
        if let Node::Element { tag, children, .. } = node {
            if tag == "table" {
                out.push(node);
            }
            find_tables(children, out);
        }
    }
}

fn table_rows(node: &Node) -> (Option<String>, Vec<(bool, Vec<String>)>) {
    // Returns the caption and rows as (has_th, expanded cells).
    let mut caption = None;
    let mut rows = Vec::new();
    fn walk(node: &Node, caption: &mut Option<String>, rows: &mut Vec<(bool, Vec<String>)>, depth: usize) {
        if let Node::Element { tag, children, .. } = node {
            match tag.as_str() {
                "caption" => *caption = Some(inline_text(node)),
                "tr" => {
                    let mut has_th = false;
                    let mut cells = Vec::new();
                    for cell in children {
                        if let Node::Element { tag, attrs, .. } = cell {
                            if tag == "th" || tag == "td" {
                                has_th |= tag == "th";
                                let text = inline_text(cell);
                                let span: usize = attrs
                                    .get("colspan")
                                    .and_then(|v| v.trim().parse().ok())
                                    .unwrap_or(1);
                                for _ in 0..span.max(1) {
                                    cells.push(text.clone());
                                }
                            }
                        }
                    }
                    rows.push((has_th, cells));
                }
                // Do not descend into nested tables; they are extracted
                // separately.
                "table" if depth > 0 => {}
                _ => {
                    for child in children {
                        walk(child, caption, rows, depth + 1);
                    }
                }
            }
        }
    }
    if let Node::Element { children, .. } = node {
        for child in children {
            walk(child, &mut caption, &mut rows, 0);
        }
    }
    (caption, rows)
}

fn normalize_table(node: &Node) -> Option<Table> {
    let (caption, raw_rows) = table_rows(node);
    let mut rows = raw_rows;
    if rows.is_empty() {
        return None;
    }
    let header_idx = rows.iter().position(|(has_th, _)| *has_th).unwrap_or(0);
    let header = rows.remove(header_idx).1;
    if header.is_empty() {
        return None;
    }
    let width = header.len();
    let body: Vec<Vec<String>> = rows
        .into_iter()
        .map(|(_, mut cells)| {
            cells.resize(width, String::new());
            cells
        })
        .collect();
    Some(Table {
        caption,
        header,
        rows: body,
    })
}

/// Extract every table (including nested ones) in document order.
/// Tables that cannot be normalized are skipped.
pub fn extract_tables(html: &str) -> Vec<Table> {
    let roots = parse_html(html);
    let mut nodes = Vec::new();
    find_tables(&roots, &mut nodes);
    nodes.iter().filter_map(|n| normalize_table(n)).collect()
}

// ---------------------------------------------------------------------------
// Markdown conversion
// ---------------------------------------------------------------------------

enum Block {
    Heading(usize, String),
    Paragraph(String),
    Bullets(Vec<String>),
    Table,
    /// Verbatim text block from tagless input, kept as-is for idempotence.
    Raw(String),
}

fn collect_blocks(nodes: &[Node], blocks: &mut Vec<Block>, title: &mut Option<String>) {
    for node in nodes {
        match node {
            Node::Text(text) => {
                for chunk in text.split("\n\n") {
                    let trimmed = chunk.trim_matches(['\n', ' ', '\t', '\r']);
                    if !trimmed.is_empty() {
                        blocks.push(Block::Raw(trimmed.to_string()));
                    }
                }
            }
            Node::Element { tag, children, .. } => match tag.as_str() {
                "h1" | "h2" | "h3" | "h4" | "h5" | "h6" => {
                    let level = tag[1..].parse().unwrap();
                    let text = inline_text(node);
                    if tag == "h1" && title.is_none() {
                        *title = Some(text.clone());
                    }
                    blocks.push(Block::Heading(level, text));
                }
                "p" => {
                    let text = inline_text(node);
                    if !text.is_empty() {
                        blocks.push(Block::Paragraph(text));
                    }
                }
                "ul" | "ol" => {
                    let items: Vec<String> = children
                        .iter()
                        .filter_map(|c| match c {
                            Node::Element { tag, .. } if tag == "li" => Some(inline_text(c)),
                            _ => None,
                        })
                        .filter(|t| !t.is_empty())
                        .collect();
                    if !items.is_empty() {
                        blocks.push(Block::Bullets(items));
                    }
                }
                "table" => blocks.push(Block::Table),
                "script" | "style" | "head" => {}
                _ => collect_blocks(children, blocks, title),
            },
        }
    }
}

fn html_title(nodes: &[Node]) -> Option<String> {
    for node in nodes {
        if let Node::Element { tag, children, .. } = node {
            if tag == "title" {
                return Some(inline_text(node));
            }
            if let Some(t) = html_title(children) {
                return Some(t);
            }
        }
    }
    None
}

/// Convert one HTML page to a clean Markdown [`WikiPage`].
///
/// Banned sections are removed from the heading to the next heading of the
/// same or higher level; tables are extracted, never inlined.
pub fn clean_html(html: &str) -> WikiPage {
    let roots = parse_html(html);
    let mut blocks = Vec::new();
    let mut h1_title = None;
    collect_blocks(&roots, &mut blocks, &mut h1_title);
    let title = html_title(&roots)
        .or(h1_title)
        .map(|t| strip_reference_markers(&t))
        .unwrap_or_default();

    let mut dropped_sections = Vec::new();
    let mut out_blocks: Vec<String> = Vec::new();
    let mut skip_below: Option<usize> = None;
    for block in &blocks {
        if let Block::Heading(level, text) = block {
            let banned = BANNED_SECTIONS.contains(&text.to_ascii_lowercase().as_str());
            match skip_below {
                Some(limit) if *level > limit => continue,
                _ => skip_below = None,
            }
            if banned {
                dropped_sections.push(text.clone());
                skip_below = Some(*level);
                continue;
            }
        } else if skip_below.is_some() {
            continue;
        }
        match block {
            Block::Heading(level, text) => {
                out_blocks.push(format!("{} {}", "#".repeat(*level), strip_reference_markers(text)));
            }
            Block::Paragraph(text) => out_blocks.push(strip_reference_markers(text)),
            Block::Bullets(items) => {
                let lines: Vec<String> = items
                    .iter()
                    .map(|i| format!("- {}", strip_reference_markers(i)))
                    .collect();
                out_blocks.push(lines.join("\n"));
            }
            Block::Raw(text) => out_blocks.push(text.clone()),
            Block::Table => {}
        }
    }
    let mut markdown = out_blocks.join("\n\n");
    if !markdown.is_empty() {
        markdown.push('\n');
    }

    let mut table_nodes = Vec::new();
    find_tables(&roots, &mut table_nodes);
    let mut malformed = 0usize;
    let tables: Vec<Table> = table_nodes
        .iter()
        .filter_map(|n| match normalize_table(n) {
            Some(t) => Some(t),
            None => {
                malformed += 1;
                None
            }
        })
        .collect();

    WikiPage {
        title,
        markdown,
        tables,
        dropped_sections,
        malformed_tables: malformed,
    }
}

// ---------------------------------------------------------------------------
// Facts
// ---------------------------------------------------------------------------

/// Per-page cap matching the upstream corpus construction.
pub const FACTS_PER_PAGE: usize = 10;

/// Template-based facts for one page: a definition fact from the first
/// paragraph plus one fact per (row, column) table cell, sampled down to at
/// most [`FACTS_PER_PAGE`] per page without replacement.
pub fn tables_to_facts(page: &WikiPage, rng_seed: u64) -> Vec<FactPair> {
    let mut candidates = Vec::new();
    if let Some(first_para) = page
        .markdown
        .split("\n\n")
        .map(|b| b.trim_end_matches('\n'))
        .find(|b| !b.is_empty() && !b.starts_with('#') && !b.starts_with('-'))
    {
        if !page.title.is_empty() {
            candidates.push(FactPair {
                question: format!("What is {}?", page.title),
                answer: first_para.to_string(),
                source: FactSource::WikiPage,
                page: page.title.clone(),
            });
        }
    }
    for table in &page.tables {
        for row in &table.rows {
            let key = match row.first() {
                Some(k) if !k.is_empty() => k,
                _ => continue,
            };
            for (j, cell) in row.iter().enumerate().skip(1) {
                let header = match table.header.get(j) {
                    Some(h) if !h.is_empty() => h,
                    _ => continue,
                };
                if cell.is_empty() {
                    continue;
                }
                candidates.push(FactPair {
                    question: format!("What is the {header} of {key} in {}?", page.title),
                    answer: cell.clone(),
                    source: FactSource::WikiTable,
                    page: page.title.clone(),
                });
            }
        }
    }
    if candidates.len() <= FACTS_PER_PAGE {
        return candidates;
    }
    // Seeded sample without replacement, emitted in candidate order.
    let mut rng = seed::rng(rng_seed);
    let mut indices: Vec<usize> = (0..candidates.len()).collect();
    for i in 0..FACTS_PER_PAGE {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    let mut chosen: Vec<usize> = indices[..FACTS_PER_PAGE].to_vec();
    chosen.sort_unstable();
    let mut picked = 0usize;
    candidates
        .into_iter()
        .enumerate()
        .filter(|(i, _)| {
            if picked < chosen.len() && *i == chosen[picked] {
                picked += 1;
                true
            } else {
                false
            }
        })
        .map(|(_, f)| f)
        .collect()
}

// ---------------------------------------------------------------------------
// Directory ingestion
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct IngestSummary {
    pub pages: usize,
    pub facts: usize,
    pub dropped_sections: usize,
    pub malformed_tables: usize,
}

/// Ingest every `.html` file under `input`, writing one `.md` mirror per page
/// and a single `facts.jsonl`. Page order (and so fact order) is by filename;
/// per-page fact seeds derive from the master seed and the page title, so the
/// output is independent of processing schedule.
pub fn ingest_dir(
    input: impl AsRef<Path>,
    output: impl AsRef<Path>,
    master_seed: u64,
) -> Result<IngestSummary, IngestError> {
    use rayon::prelude::*;
    let input = input.as_ref();
    let output = output.as_ref();
    fs::create_dir_all(output).map_err(|e| IngestError::Write {
        path: output.display().to_string(),
        message: e.to_string(),
    })?;
    let mut paths: Vec<_> = fs::read_dir(input)
        .map_err(|e| IngestError::Read {
            path: input.display().to_string(),
            message: e.to_string(),
        })?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "html"))
        .collect();
    paths.sort();

    let pages: Vec<(String, WikiPage, Vec<FactPair>)> = paths
        .par_iter()
        .map(|path| {
            let html = fs::read_to_string(path).map_err(|e| IngestError::Read {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            let page = clean_html(&html);
            let facts = tables_to_facts(&page, seed::mix(master_seed, &["page", &page.title]));
            let stem = path.file_stem().unwrap().to_string_lossy().to_string();
            Ok((stem, page, facts))
        })
        .collect::<Result<_, IngestError>>()?;

    let mut summary = IngestSummary {
        pages: pages.len(),
        facts: 0,
        dropped_sections: 0,
        malformed_tables: 0,
    };
    let mut facts_out = String::new();
    for (stem, page, facts) in &pages {
        let md_path = output.join(format!("{stem}.md"));
        fs::write(&md_path, &page.markdown).map_err(|e| IngestError::Write {
            path: md_path.display().to_string(),
            message: e.to_string(),
        })?;
        summary.dropped_sections += page.dropped_sections.len();
        summary.malformed_tables += page.malformed_tables;
        summary.facts += facts.len();
        for fact in facts {
            facts_out.push_str(&serde_json::to_string(fact).expect("fact serializes"));
            facts_out.push('\n');
        }
    }
    let facts_path = output.join("facts.jsonl");
    fs::write(&facts_path, facts_out).map_err(|e| IngestError::Write {
        path: facts_path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(summary)
}

/// Load a facts file written by [`ingest_dir`].
pub fn load_facts(path: impl AsRef<Path>) -> Result<Vec<FactPair>, IngestError> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| IngestError::Read {
        path: path.as_ref().display().to_string(),
        message: e.to_string(),
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| IngestError::Read {
                path: path.as_ref().display().to_string(),
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_yields_empty_page() {
        let page = clean_html("");
        assert!(page.markdown.is_empty());
        assert!(page.tables.is_empty());
        assert!(page.dropped_sections.is_empty());
    }

    #[test]
    fn history_section_is_dropped_and_recorded() {
        let html = "<html><head><title>Log</title></head><body>\
            <h1>Log</h1><p>A log is a block.</p>\
            <h2>History</h2><p>Added in version 0.0.14.</p><p>Renamed later.</p>\
            <h2>Usage</h2><p>Logs become planks.</p></body></html>";
        let page = clean_html(html);
        assert_eq!(page.dropped_sections, vec!["History".to_string()]);
        assert!(!page.markdown.contains("version 0.0.14"));
        assert!(!page.markdown.contains("History"));
        assert!(page.markdown.contains("Logs become planks."));
    }

    #[test]
    fn reference_markers_are_scrubbed() {
        let html = "<p>Stone requires a pickaxe<sup class=\"reference\">[2]</sup> to mine.[3]</p>";
        let page = clean_html(html);
        assert_eq!(page.markdown, "Stone requires a pickaxe to mine.\n");
    }

    #[test]
    fn no_html_tags_survive() {
        let html = "<div><p>Hello <b>world</b> &amp; friends</p><br><p>Unclosed <i>tail</p></div>";
        let page = clean_html(html);
        assert!(!page.markdown.contains('<'));
        assert!(page.markdown.contains("Hello world & friends"));
    }

    #[test]
    fn cleaning_markdown_as_text_changes_nothing() {
        let html = "<h1>Torch</h1><p>A torch lights caves.</p><ul><li>Crafted from sticks</li>\
            <li>Crafted from charcoal</li></ul>";
        let page = clean_html(html);
        let again = clean_html(&page.markdown);
        assert_eq!(again.markdown, page.markdown);
    }

    #[test]
    fn colspan_duplicates_header_cells() {
        let html = "<table><tr><th colspan=\"2\">Stats</th><th>Notes</th></tr>\
            <tr><td>Hardness</td><td>1.5</td><td>solid</td></tr></table>";
        let tables = extract_tables(html);
        assert_eq!(tables.len(), 1);
        assert_eq!(tables[0].header, vec!["Stats", "Stats", "Notes"]);
        assert_eq!(tables[0].rows[0], vec!["Hardness", "1.5", "solid"]);
    }

    #[test]
    fn nested_table_is_extracted_separately() {
        let html = "<table><tr><th>A</th></tr><tr><td>\
            <table><tr><th>Inner</th></tr><tr><td>x</td></tr></table>\
            </td></tr></table>";
        let tables = extract_tables(html);
        assert_eq!(tables.len(), 2);
        assert_eq!(tables[0].header, vec!["A"]);
        assert_eq!(tables[1].header, vec!["Inner"]);
        // The outer table's cell text excludes the nested table.
        assert_eq!(tables[0].rows, vec![vec![String::new()]]);
    }

    #[test]
    fn page_with_no_tables_extracts_nothing() {
        assert!(extract_tables("<p>no tables here</p>").is_empty());
    }

    #[test]
    fn table_only_page_has_empty_body_text() {
        let html = "<html><head><title>Data</title></head><body><table>\
            <tr><th>Item</th><th>Value</th></tr>\
            <tr><td>a</td><td>1</td></tr>\
            <tr><td>b</td><td>2</td></tr>\
            <tr><td>c</td><td>3</td></tr>\
            </table></body></html>";
        let page = clean_html(html);
        assert!(page.markdown.is_empty(), "markdown: {:?}", page.markdown);
        assert_eq!(page.tables.len(), 1);
        assert_eq!(page.tables[0].header.len(), 2);
        assert_eq!(page.tables[0].rows.len(), 3);
    }

    #[test]
    fn fact_template_matches_expected_shape() {
        let html = "<html><head><title>Blocks</title></head><body>\
            <table><tr><th>Item</th><th>Hardness</th></tr>\
            <tr><td>Stone</td><td>1.5</td></tr></table></body></html>";
        let page = clean_html(html);
        let facts = tables_to_facts(&page, 1);
        assert_eq!(facts.len(), 1);
        assert_eq!(facts[0].question, "What is the Hardness of Stone in Blocks?");
        assert_eq!(facts[0].answer, "1.5");
        assert_eq!(facts[0].source, FactSource::WikiTable);
    }

    #[test]
    fn facts_cap_at_ten_and_are_reproducible() {
        let mut rows = String::new();
        for i in 0..30 {
            rows.push_str(&format!("<tr><td>item{i}</td><td>{i}</td></tr>"));
        }
        let html = format!(
            "<html><head><title>Big</title></head><body><table>\
            <tr><th>Name</th><th>Value</th></tr>{rows}</table></body></html>"
        );
        let page = clean_html(&html);
        let a = tables_to_facts(&page, 7);
        let b = tables_to_facts(&page, 7);
        assert_eq!(a.len(), FACTS_PER_PAGE);
        assert_eq!(a, b);
        let c = tables_to_facts(&page, 8);
        assert_ne!(a, c, "different seeds should usually sample differently");
    }

    #[test]
    fn rows_with_empty_key_are_skipped() {
        let html = "<html><head><title>T</title></head><body><table>\
            <tr><th>K</th><th>V</th></tr>\
            <tr><td></td><td>ignored</td></tr>\
            <tr><td>k</td><td>v</td></tr></table></body></html>";
        let page = clean_html(&html.to_string());
        let facts = tables_to_facts(&page, 0);
        assert_eq!(facts.len(), 1);
        assert_eq!(facts[0].answer, "v");
    }
}
