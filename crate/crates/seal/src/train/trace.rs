//! Selection-trace export: machine-readable JSON and an HTML view that
//! color-codes each decode segment with the input snippets it attended to.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::text::{SnippetizedExample, Vocab};

use super::decode::DecodeTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Json,
    Html,
}

/// One decode segment with its selection and rendered text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentExport {
    pub segment: usize,
    pub scores: Vec<f64>,
    pub selected: Vec<usize>,
    pub tokens: Vec<u32>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnippetExport {
    pub index: usize,
    pub doc_id: u32,
    pub tokens: Vec<u32>,
    pub text: String,
}

/// Self-contained trace: everything the HTML view needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceExport {
    pub example_id: usize,
    pub segment_len: usize,
    pub segments: Vec<SegmentExport>,
    pub snippets: Vec<SnippetExport>,
}

/// Joins a decode trace with its example and vocabulary into an export
/// record.
pub fn enrich_trace(
    trace: &DecodeTrace,
    example: &SnippetizedExample,
    vocab: &Vocab,
) -> TraceExport {
    TraceExport {
        example_id: trace.example_id,
        segment_len: trace.segment_len,
        segments: trace
            .segments
            .iter()
            .map(|s| SegmentExport {
                segment: s.segment,
                scores: s.scores.clone(),
                selected: s.selected.clone(),
                tokens: s.tokens.clone(),
                text: vocab.detokenize(&s.tokens),
            })
            .collect(),
        snippets: example
            .snippets
            .iter()
            .map(|s| SnippetExport {
                index: s.snippet_index,
                doc_id: s.doc_id,
                tokens: s.tokens.clone(),
                text: vocab.detokenize(&s.tokens),
            })
            .collect(),
    }
}

const PALETTE: [&str; 8] = [
    "#993051", "#42708f", "#739c00", "#996633", "#5b4a9e", "#2a7f62", "#b05910", "#8a2f8f",
];

fn color(segment: usize) -> &'static str {
    PALETTE[segment % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// HTML view: decode segments colored, input snippets annotated with the ids
/// of every segment that attended to them, colored as the first such
/// segment.
pub fn render_html(export: &TraceExport) -> String {
    let mut out = String::new();
    out.push_str("<!doctype html><html><head><meta charset=\"utf-8\">");
    let _ = write!(out, "<title>decode trace {}</title>", export.example_id);
    out.push_str("<style>body{font-family:sans-serif;max-width:60em;margin:2em auto;}span.seg{font-weight:bold;}</style>");
    out.push_str("</head><body>");
    let _ = write!(out, "<h2>Example {}</h2>", export.example_id);

    out.push_str("<h3>Decode</h3><p>");
    for seg in &export.segments {
        let _ = write!(
            out,
            "<span class=\"seg\" style=\"color:{}\">({}) {} </span>",
            color(seg.segment),
            seg.segment + 1,
            escape(&seg.text)
        );
    }
    out.push_str("</p>");

    out.push_str("<h3>Input snippets</h3><ol start=\"0\">");
    for snip in &export.snippets {
        // Every segment that selected this snippet, in order.
        let attending: Vec<usize> = export
            .segments
            .iter()
            .filter(|s| s.selected.contains(&snip.index))
            .map(|s| s.segment)
            .collect();
        out.push_str("<li>");
        for &seg in &attending {
            let _ = write!(out, "<span class=\"seg\" style=\"color:{}\">({})</span>", color(seg), seg + 1);
        }
        match attending.first() {
            Some(&first) => {
                let _ = write!(
                    out,
                    "<span style=\"color:{}\"> {}</span>",
                    color(first),
                    escape(&snip.text)
                );
            }
            None => {
                let _ = write!(out, " {}", escape(&snip.text));
            }
        }
        out.push_str("</li>");
    }
    out.push_str("</ol></body></html>");
    out
}

/// Writes the trace in the requested format.
pub fn export_trace(
    export: &TraceExport,
    format: TraceFormat,
    path: &Path,
) -> std::io::Result<()> {
    let body = match format {
        TraceFormat::Json => serde_json::to_string_pretty(export).map_err(std::io::Error::other)?,
        TraceFormat::Html => render_html(export),
    };
    fs::write(path, body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{Snippet, BOS, EOS};
    use crate::train::decode::SegmentTrace;

    fn fixture() -> (DecodeTrace, SnippetizedExample, Vocab) {
        let vocab =
            Vocab::build(["red green blue yellow end."].iter().map(|s| s.to_string()), 16).unwrap();
        let snippets = vec![
            Snippet { tokens: vocab.tokenize("red green"), doc_id: 0, snippet_index: 0 },
            Snippet { tokens: vocab.tokenize("blue yellow"), doc_id: 0, snippet_index: 1 },
        ];
        let mut target = vec![BOS];
        target.extend(vocab.tokenize("red blue"));
        target.push(EOS);
        let example = SnippetizedExample { id: 9, snippets, target };
        let trace = DecodeTrace {
            example_id: 9,
            segment_len: 2,
            segments: vec![
                SegmentTrace {
                    segment: 0,
                    scores: vec![0.8, 0.1],
                    selected: vec![0],
                    tokens: vocab.tokenize("red green"),
                },
                SegmentTrace {
                    segment: 1,
                    scores: vec![0.2, 0.9],
                    selected: vec![1, 0],
                    tokens: vocab.tokenize("blue"),
                },
            ],
        };
        (trace, example, vocab)
    }

    #[test]
    fn json_roundtrip_reproduces_trace() {
        let (trace, example, vocab) = fixture();
        let export = enrich_trace(&trace, &example, &vocab);
        let json = serde_json::to_string(&export).unwrap();
        let back: TraceExport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, export);
    }

    #[test]
    fn html_lists_every_selection() {
        let (trace, example, vocab) = fixture();
        let export = enrich_trace(&trace, &example, &vocab);
        let html = render_html(&export);
        for seg in &export.segments {
            for &sel in &seg.selected {
                assert!(
                    html.contains(&escape(&export.snippets[sel].text)),
                    "snippet {sel} missing from html"
                );
            }
        }
        // Segment ids are prepended to their snippets.
        assert!(html.contains("(1)"));
        assert!(html.contains("(2)"));
    }

    #[test]
    fn shared_snippet_is_colored_as_first_attending_segment() {
        let (trace, example, vocab) = fixture();
        let export = enrich_trace(&trace, &example, &vocab);
        let html = render_html(&export);
        // Snippet 0 is selected by segments 0 and 1; its text must be
        // colored with segment 0's palette entry.
        let snippet_text = escape(&export.snippets[0].text);
        let pos = html.find(&snippet_text).unwrap();
        let before = &html[..pos];
        let tail = &before[before.rfind("color:").unwrap()..];
        assert!(tail.starts_with(&format!("color:{}", color(0))), "{tail}");
    }
}
