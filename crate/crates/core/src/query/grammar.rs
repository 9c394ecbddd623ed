//! Parser and serializer for the five-line expansion reply:
//!
//! ```text
//! Key Objects: person, dog, red clothes
//! Cue Objects: grassy area, leash, fence
//! Rel: (person; attribute; red clothes), (person; spatial; dog)
//! Des: (red clothes: description1), (dog: description2)
//! Sem: semantic1; semantic2
//! ```
//!
//! Lines may come in any order. Triplet members may be separated by `;` or
//! `,`; the separator seen is reported in [`ParseOutcome::triplet_separator`].

use std::fmt;

use serde::{Serialize, Serializer};

use super::{collapse_whitespace, normalize_phrase, ExpandedQuery, RelationTriplet, RelationType};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    KeyObjects,
    CueObjects,
    Relations,
    Descriptions,
    Semantics,
}

impl Field {
    const ALL: [Field; 5] = [
        Field::KeyObjects,
        Field::CueObjects,
        Field::Relations,
        Field::Descriptions,
        Field::Semantics,
    ];

    fn prefix(self) -> &'static str {
        match self {
            Field::KeyObjects => "Key Objects:",
            Field::CueObjects => "Cue Objects:",
            Field::Relations => "Rel:",
            Field::Descriptions => "Des:",
            Field::Semantics => "Sem:",
        }
    }

    fn from_head(head: &str) -> Option<Field> {
        match head {
            "key objects" | "key object" => Some(Field::KeyObjects),
            "cue objects" | "cue object" => Some(Field::CueObjects),
            "rel" | "relation" | "relations" => Some(Field::Relations),
            "des" | "description" | "descriptions" => Some(Field::Descriptions),
            "sem" | "semantics" | "semantic" => Some(Field::Semantics),
            _ => None,
        }
    }

    fn count_bounds(self) -> Option<(usize, usize)> {
        match self {
            Field::KeyObjects => Some((3, 5)),
            Field::CueObjects => Some((2, 4)),
            _ => None,
        }
    }
}

/// Separator used between triplet members.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TripletSeparator {
    Semicolon,
    Comma,
    Mixed,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParseWarning {
    MissingPrefix(&'static str),
    UnknownLine { line: usize },
    DuplicateLine { line: usize, prefix: &'static str },
    IgnoredText { line: usize, column: usize, text: String },
    MalformedDescription { line: usize, column: usize },
    CountOutOfRange { prefix: &'static str, count: usize, min: usize, max: usize },
    DanglingEndpoint(String),
}

impl fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseWarning::MissingPrefix(p) => write!(f, "missing `{p}` line"),
            ParseWarning::UnknownLine { line } => write!(f, "line {line}: unrecognized line ignored"),
            ParseWarning::DuplicateLine { line, prefix } => {
                write!(f, "line {line}: repeated `{prefix}` line merged")
            }
            ParseWarning::IgnoredText { line, column, text } => {
                write!(f, "line {line}, column {column}: ignored text `{text}`")
            }
            ParseWarning::MalformedDescription { line, column } => {
                write!(f, "line {line}, column {column}: description group without `object:`")
            }
            ParseWarning::CountOutOfRange { prefix, count, min, max } => {
                write!(f, "`{prefix}` has {count} items, expected {min}-{max}")
            }
            ParseWarning::DanglingEndpoint(p) => {
                write!(f, "relation endpoint `{p}` is not a key or cue object")
            }
        }
    }
}

impl Serialize for ParseWarning {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone)]
pub struct ParseOutcome {
    pub query: ExpandedQuery,
    pub warnings: Vec<ParseWarning>,
    /// `None` when no triplet was parsed.
    pub triplet_separator: Option<TripletSeparator>,
}

fn column_of(line: &str, byte: usize) -> usize {
    line[..byte].chars().count() + 1
}

fn parse_error(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

/// Splits a line into its recognized field and the byte offset of the body.
fn classify(line: &str) -> Option<(Option<Field>, usize)> {
    let colon = line.find(':')?;
    let head = line[..colon]
        .trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '-' | '*' | '•' | '#'))
        .trim_end_matches(|c: char| c.is_whitespace() || c == '*');
    let head = collapse_whitespace(head).to_lowercase();
    let mut body = colon + 1;
    // `**Key Objects:**` style bold markers
    while line[body..].starts_with('*') {
        body += 1;
    }
    if head == "question" {
        return Some((None, body));
    }
    Field::from_head(&head).map(|f| (Some(f), body))
}

/// A parenthesized group found in a line body: byte range of the content
/// (exclusive of the parentheses) plus the byte offset of `(`.
struct Group {
    open: usize,
    start: usize,
    end: usize,
}

/// Finds `(...)` groups in `line[from..]`, reporting non-separator text
/// between groups.
fn scan_groups(
    line: &str,
    from: usize,
    line_no: usize,
    warnings: &mut Vec<ParseWarning>,
) -> Result<Vec<Group>> {
    let mut groups = Vec::new();
    let mut pos = from;
    let mut stray_start: Option<usize> = None;
    let flush = |stray: &mut Option<usize>, upto: usize, warnings: &mut Vec<ParseWarning>| {
        if let Some(s) = stray.take() {
            let text = line[s..upto].trim();
            if !text.is_empty() {
                warnings.push(ParseWarning::IgnoredText {
                    line: line_no,
                    column: column_of(line, s),
                    text: text.to_string(),
                });
            }
        }
    };
    while pos < line.len() {
        let c = line[pos..].chars().next().expect("in bounds");
        if c == '(' {
            flush(&mut stray_start, pos, warnings);
            let rest = &line[pos + 1..];
            let close = rest.find(')').ok_or_else(|| {
                parse_error(line_no, column_of(line, pos), "unclosed `(`")
            })?;
            if let Some(inner) = rest[..close].find('(') {
                return Err(parse_error(
                    line_no,
                    column_of(line, pos + 1 + inner),
                    "nested `(` inside group",
                ));
            }
            groups.push(Group {
                open: pos,
                start: pos + 1,
                end: pos + 1 + close,
            });
            pos += close + 2;
            continue;
        }
        if c.is_whitespace() || matches!(c, ',' | '.' | '…') {
            flush(&mut stray_start, pos, warnings);
        } else if stray_start.is_none() {
            stray_start = Some(pos);
        }
        pos += c.len_utf8();
    }
    flush(&mut stray_start, line.len(), warnings);
    Ok(groups)
}

fn split_items(body: &str, sep: char) -> impl Iterator<Item = &str> {
    body.split(sep)
        .map(|s| s.trim().trim_matches(|c| c == '"' || c == '\'').trim())
        .filter(|s| !s.is_empty() && !s.chars().all(|c| c == '.' || c == '…'))
}

#[derive(Default)]
struct SeparatorTracker {
    semicolon: bool,
    comma: bool,
}

impl SeparatorTracker {
    fn result(&self) -> Option<TripletSeparator> {
        match (self.semicolon, self.comma) {
            (true, true) => Some(TripletSeparator::Mixed),
            (true, false) => Some(TripletSeparator::Semicolon),
            (false, true) => Some(TripletSeparator::Comma),
            (false, false) => None,
        }
    }
}

fn parse_relations(
    line: &str,
    body: usize,
    line_no: usize,
    seps: &mut SeparatorTracker,
    out: &mut Vec<RelationTriplet>,
    warnings: &mut Vec<ParseWarning>,
) -> Result<()> {
    for g in scan_groups(line, body, line_no, warnings)? {
        let content = &line[g.start..g.end];
        let sep = if content.contains(';') {
            seps.semicolon = true;
            ';'
        } else {
            seps.comma = true;
            ','
        };
        let mut members = Vec::with_capacity(3);
        let mut offset = g.start;
        for part in content.split(sep) {
            members.push((offset, part));
            offset += part.len() + 1;
        }
        if members.len() != 3 {
            return Err(parse_error(
                line_no,
                column_of(line, g.open),
                format!("triplet has {} members, expected 3", members.len()),
            ));
        }
        let (rel_off, rel_word) = members[1];
        let relation: RelationType = rel_word.parse().map_err(|_| {
            parse_error(
                line_no,
                column_of(line, rel_off),
                format!("unknown relation type `{}`", rel_word.trim()),
            )
        })?;
        let triplet = RelationTriplet::new(members[0].1, relation, members[2].1)
            .map_err(|_| parse_error(line_no, column_of(line, g.open), "empty triplet endpoint"))?;
        if !out.contains(&triplet) {
            out.push(triplet);
        }
    }
    Ok(())
}

fn parse_descriptions(
    line: &str,
    body: usize,
    line_no: usize,
    strict: bool,
    query: &mut ExpandedQuery,
    warnings: &mut Vec<ParseWarning>,
) -> Result<()> {
    let groups = if line[body..].contains('(') {
        scan_groups(line, body, line_no, warnings)?
    } else if line[body..].trim().is_empty() {
        Vec::new()
    } else {
        // bare `Des: object: des1; des2`
        vec![Group {
            open: body,
            start: body,
            end: line.len(),
        }]
    };
    for g in groups {
        let content = &line[g.start..g.end];
        let Some((obj, des)) = content.split_once(':') else {
            if strict {
                return Err(parse_error(
                    line_no,
                    column_of(line, g.open),
                    "description group without `object:`",
                ));
            }
            warnings.push(ParseWarning::MalformedDescription {
                line: line_no,
                column: column_of(line, g.open),
            });
            continue;
        };
        let obj = normalize_phrase(obj.trim().trim_matches(|c| c == '"' || c == '\''));
        if obj.is_empty() {
            warnings.push(ParseWarning::MalformedDescription {
                line: line_no,
                column: column_of(line, g.open),
            });
            continue;
        }
        let entry = query.descriptions.entry(obj).or_default();
        for d in split_items(des, ';') {
            let d = collapse_whitespace(d);
            if !entry.contains(&d) {
                entry.push(d);
            }
        }
    }
    Ok(())
}

fn push_phrases(body: &str, out: &mut Vec<String>) {
    for item in split_items(body, ',') {
        let p = normalize_phrase(item);
        if !out.contains(&p) {
            out.push(p);
        }
    }
}

fn push_semantics(body: &str, out: &mut Vec<String>) {
    let sep = if body.contains(';') { ';' } else { ',' };
    for item in split_items(body, sep) {
        let s = collapse_whitespace(item);
        if !out.contains(&s) {
            out.push(s);
        }
    }
}

/// Parses a raw LLM reply into an [`ExpandedQuery`].
///
/// Lenient mode (`strict == false`) reports missing lines and out-of-range
/// object counts as warnings. Strict mode turns them into errors. Malformed
/// triplets are errors in both modes.
pub fn parse_expansion_response(text: &str, strict: bool) -> Result<ParseOutcome> {
    let mut query = ExpandedQuery::default();
    let mut warnings = Vec::new();
    let mut seps = SeparatorTracker::default();
    let mut seen: Vec<(Field, usize)> = Vec::new();

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let Some((field, body)) = classify(raw_line) else {
            warnings.push(ParseWarning::UnknownLine { line: line_no });
            continue;
        };
        let Some(field) = field else {
            if query.question.is_empty() {
                query.question = raw_line[body..].trim().to_string();
            }
            continue;
        };
        if seen.iter().any(|(f, _)| *f == field) {
            warnings.push(ParseWarning::DuplicateLine {
                line: line_no,
                prefix: field.prefix(),
            });
        } else {
            seen.push((field, line_no));
        }
        let body_text = &raw_line[body..];
        match field {
            Field::KeyObjects => push_phrases(body_text, &mut query.key_objects),
            Field::CueObjects => push_phrases(body_text, &mut query.cue_objects),
            Field::Semantics => push_semantics(body_text, &mut query.semantics),
            Field::Relations => parse_relations(
                raw_line,
                body,
                line_no,
                &mut seps,
                &mut query.relations,
                &mut warnings,
            )?,
            Field::Descriptions => {
                parse_descriptions(raw_line, body, line_no, strict, &mut query, &mut warnings)?
            }
        }
    }

    for field in Field::ALL {
        if !seen.iter().any(|(f, _)| *f == field) {
            if strict {
                return Err(Error::MissingPrefix(field.prefix()));
            }
            warnings.push(ParseWarning::MissingPrefix(field.prefix()));
        }
    }

    for &(field, line_no) in &seen {
        let Some((min, max)) = field.count_bounds() else {
            continue;
        };
        let count = match field {
            Field::KeyObjects => query.key_objects.len(),
            _ => query.cue_objects.len(),
        };
        if count < min || count > max {
            if strict {
                return Err(parse_error(
                    line_no,
                    1,
                    format!("`{}` has {count} items, expected {min}-{max}", field.prefix()),
                ));
            }
            warnings.push(ParseWarning::CountOutOfRange {
                prefix: field.prefix(),
                count,
                min,
                max,
            });
        }
    }

    warnings.extend(
        query
            .dangling_endpoints()
            .into_iter()
            .map(ParseWarning::DanglingEndpoint),
    );

    Ok(ParseOutcome {
        query,
        warnings,
        triplet_separator: seps.result(),
    })
}

/// Writes `query` in the five-line reply grammar. The question is not part of
/// the grammar and is omitted.
pub fn serialize_expansion(query: &ExpandedQuery) -> String {
    let rel = query
        .relations
        .iter()
        .map(|r| format!("({}; {}; {})", r.subject, r.relation, r.object))
        .collect::<Vec<_>>()
        .join(", ");
    let des = query
        .descriptions
        .iter()
        .map(|(obj, d)| format!("({}: {})", obj, d.join("; ")))
        .collect::<Vec<_>>()
        .join(", ");
    let lines = [
        (Field::KeyObjects, query.key_objects.join(", ")),
        (Field::CueObjects, query.cue_objects.join(", ")),
        (Field::Relations, rel),
        (Field::Descriptions, des),
        (Field::Semantics, query.semantics.join("; ")),
    ];
    let mut out = String::new();
    for (field, body) in lines {
        out.push_str(field.prefix());
        if !body.is_empty() {
            out.push(' ');
            out.push_str(&body);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE_REPLY: &str = "\
Key Objects: person, dog, red clothes
Cue Objects: grassy area, leash, fence
Rel: (person; attribute; red clothes), (person; spatial; dog)
Des: (red clothes: description1), (dog: description2)
Sem: semantic1; semantic2
";

    #[test]
    fn parses_sample_reply() {
        let out = parse_expansion_response(SAMPLE_REPLY, true).unwrap();
        let q = out.query;
        assert_eq!(q.key_objects, ["person", "dog", "red clothes"]);
        assert_eq!(q.cue_objects, ["grassy area", "leash", "fence"]);
        assert_eq!(
            q.relations,
            vec![
                RelationTriplet::new("person", RelationType::Attribute, "red clothes").unwrap(),
                RelationTriplet::new("person", RelationType::Spatial, "dog").unwrap(),
            ]
        );
        assert_eq!(q.descriptions["red clothes"], ["description1"]);
        assert_eq!(q.descriptions["dog"], ["description2"]);
        assert_eq!(q.semantics, ["semantic1", "semantic2"]);
        assert!(out.warnings.is_empty(), "{:?}", out.warnings);
        assert_eq!(out.triplet_separator, Some(TripletSeparator::Semicolon));
    }

    #[test]
    fn empty_text_yields_five_missing_warnings() {
        let out = parse_expansion_response("", false).unwrap();
        assert!(out.query.is_empty());
        assert_eq!(out.warnings.len(), 5);
        assert!(out
            .warnings
            .iter()
            .all(|w| matches!(w, ParseWarning::MissingPrefix(_))));
    }

    #[test]
    fn unknown_lines_warn() {
        let out = parse_expansion_response("hello there\nResponse:", false).unwrap();
        let missing = out
            .warnings
            .iter()
            .filter(|w| matches!(w, ParseWarning::MissingPrefix(_)))
            .count();
        assert_eq!(missing, 5);
        assert!(out.warnings.contains(&ParseWarning::UnknownLine { line: 1 }));
        assert!(out.warnings.contains(&ParseWarning::UnknownLine { line: 2 }));
    }

    #[test]
    fn strict_names_missing_prefix() {
        let text = "Key Objects: a, b, c\nCue Objects: d, e\nRel:\nSem: x";
        match parse_expansion_response(text, true) {
            Err(Error::MissingPrefix(p)) => assert_eq!(p, "Des:"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_triplet_reports_position() {
        let text = "Rel: (a; spatial; b), (a; b)";
        match parse_expansion_response(text, false) {
            Err(Error::Parse { line, column, .. }) => {
                assert_eq!(line, 1);
                assert_eq!(column, 23);
            }
            other => panic!("{other:?}"),
        }
        let text = "Key Objects: a\nRel: (a; near; b)";
        match parse_expansion_response(text, false) {
            Err(Error::Parse { line, column, message }) => {
                assert_eq!((line, column), (2, 9));
                assert!(message.contains("near"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn comma_separated_triplets_accepted() {
        let text = "Rel: (Man, Spatial, Phone), (woman; time; cat)";
        let out = parse_expansion_response(text, false).unwrap();
        assert_eq!(out.query.relations.len(), 2);
        assert_eq!(out.query.relations[0].subject, "man");
        assert_eq!(out.triplet_separator, Some(TripletSeparator::Mixed));
    }

    #[test]
    fn lines_in_any_order_and_markdown_tolerated() {
        let text = "  - **Sem:** a; b\n* Key Objects:  Bold   Person, phone, PHONE\nDes: (phone: device; gadget)\nCue Objects: desk\nRel: none";
        let out = parse_expansion_response(text, false).unwrap();
        assert_eq!(out.query.key_objects, ["bold person", "phone"]);
        assert_eq!(out.query.semantics, ["a", "b"]);
        assert_eq!(out.query.descriptions["phone"], ["device", "gadget"]);
        assert!(out.warnings.iter().any(|w| matches!(w, ParseWarning::IgnoredText { .. })));
        assert!(out
            .warnings
            .iter()
            .any(|w| matches!(w, ParseWarning::CountOutOfRange { prefix: "Key Objects:", .. })));
        assert!(out
            .warnings
            .iter()
            .any(|w| matches!(w, ParseWarning::CountOutOfRange { prefix: "Cue Objects:", .. })));
    }

    #[test]
    fn strict_rejects_out_of_range_counts() {
        let text = "Key Objects: a\nCue Objects: b, c\nRel:\nDes:\nSem:";
        assert!(matches!(
            parse_expansion_response(text, true),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn dangling_endpoint_is_warning() {
        let text = "Key Objects: a, b, c\nCue Objects: d, e\nRel: (a; causal; zebra)\nDes:\nSem:";
        let out = parse_expansion_response(text, true).unwrap();
        assert_eq!(out.warnings, vec![ParseWarning::DanglingEndpoint("zebra".into())]);
    }

    #[test]
    fn serialize_matches_grammar() {
        let q = parse_expansion_response(SAMPLE_REPLY, true).unwrap().query;
        let text = serialize_expansion(&q);
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("Key Objects: person, dog, red clothes\n"));
        assert!(text.contains("Rel: (person; attribute; red clothes), (person; spatial; dog)\n"));
        assert!(text.contains("Des: (dog: description2), (red clothes: description1)\n"));
        assert!(text.ends_with("Sem: semantic1; semantic2\n"));
    }
}
