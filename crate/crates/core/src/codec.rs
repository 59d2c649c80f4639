//! Tabular prompt rendering and parsing.
//!
//! A block is rendered as
//!
//! ```text
//! Sentence: Bill was born in Seattle.
//! |Predicate|Subject|Object|
//! |birthplace|Bill|Seattle|
//! ```
//!
//! and consecutive blocks are separated by one blank line.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{RERecord, RelationalTriple};

pub const DELIMITER: char = '|';
pub const SENTENCE_PREFIX: &str = "Sentence: ";
pub const BLOCK_SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeaderOrder {
    /// `|Predicate|Subject|Object|`
    #[default]
    #[serde(rename = "PSO")]
    Pso,
    /// `|Subject|Object|Predicate|`
    #[serde(rename = "SOP")]
    Sop,
}

impl HeaderOrder {
    pub const ALL: [HeaderOrder; 2] = [HeaderOrder::Pso, HeaderOrder::Sop];

    pub fn header(self) -> &'static str {
        match self {
            HeaderOrder::Pso => "|Predicate|Subject|Object|",
            HeaderOrder::Sop => "|Subject|Object|Predicate|",
        }
    }

    /// Lays out a (predicate, subject, object) triple in header order.
    pub fn arrange<T>(self, t: (T, T, T)) -> [T; 3] {
        let (p, s, o) = t;
        match self {
            HeaderOrder::Pso => [p, s, o],
            HeaderOrder::Sop => [s, o, p],
        }
    }

    /// Inverse of [`HeaderOrder::arrange`].
    pub fn to_pso<T>(self, cells: [T; 3]) -> (T, T, T) {
        let [a, b, c] = cells;
        match self {
            HeaderOrder::Pso => (a, b, c),
            HeaderOrder::Sop => (c, a, b),
        }
    }
}

pub fn render_header(order: HeaderOrder) -> &'static str {
    order.header()
}

/// (predicate, subject, object) as strings.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StringTriple {
    pub predicate: String,
    pub subject: String,
    pub object: String,
}

impl StringTriple {
    pub fn new(
        predicate: impl Into<String>,
        subject: impl Into<String>,
        object: impl Into<String>,
    ) -> Self {
        Self {
            predicate: predicate.into(),
            subject: subject.into(),
            object: object.into(),
        }
    }

    /// Uses the label's display form (alias when set).
    pub fn from_triple(t: &RelationalTriple) -> Self {
        Self::new(t.predicate.display(), &t.subject.text, &t.object.text)
    }

    pub fn cells(&self, order: HeaderOrder) -> [&str; 3] {
        order.arrange((
            self.predicate.as_str(),
            self.subject.as_str(),
            self.object.as_str(),
        ))
    }

    /// Canonical serialization used for tie-breaking.
    pub fn key(&self) -> String {
        format!("{}|{}|{}", self.predicate, self.subject, self.object)
    }
}

/// Replaces the delimiter with `/` and line breaks with spaces. Returns the
/// cleaned cell and whether anything changed.
pub fn sanitize_cell(cell: &str) -> (String, bool) {
    let cleaned: String = cell
        .chars()
        .map(|c| match c {
            DELIMITER => '/',
            '\n' | '\r' => ' ',
            c => c,
        })
        .collect();
    let changed = cleaned != cell;
    (cleaned, changed)
}

fn sanitize_line(text: &str) -> (String, bool) {
    let cleaned: String = text
        .chars()
        .map(|c| if c == '\n' || c == '\r' { ' ' } else { c })
        .collect();
    let changed = cleaned != text;
    (cleaned, changed)
}

/// Which triples of a record become rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSelection {
    /// One row per gold triple (RTE style).
    All,
    /// Only the designated pair (RC style).
    Designated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockMode {
    Full,
    InputOnly,
    /// Leading cells of a final row, 0 to 2 of them, in header order.
    Partial(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExampleBlock {
    pub sentence: String,
    /// Cells in header order.
    pub rows: Vec<[String; 3]>,
    pub partial: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SanitizeWarning {
    pub original: String,
    pub rendered: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub text: String,
    pub warnings: Vec<SanitizeWarning>,
}

impl ExampleBlock {
    /// Builds a sanitized block from a record; sanitization events are
    /// returned alongside.
    pub fn from_record(
        record: &RERecord,
        order: HeaderOrder,
        mode: &BlockMode,
        selection: RowSelection,
    ) -> (Self, Vec<SanitizeWarning>) {
        let mut warnings = Vec::new();
        let mut clean = |s: &str, line_only: bool| {
            let (c, changed) = if line_only {
                sanitize_line(s)
            } else {
                sanitize_cell(s)
            };
            if changed {
                warnings.push(SanitizeWarning {
                    original: s.to_string(),
                    rendered: c.clone(),
                });
            }
            c
        };
        let sentence = clean(&record.sentence, true);
        let triples: Vec<&RelationalTriple> = match selection {
            RowSelection::All => record.triples.iter().collect(),
            RowSelection::Designated => vec![record.designated()],
        };
        let (rows, partial) = match mode {
            BlockMode::Full => (
                triples
                    .iter()
                    .map(|t| {
                        StringTriple::from_triple(t)
                            .cells(order)
                            .map(|c| clean(c, false))
                    })
                    .collect(),
                None,
            ),
            BlockMode::InputOnly => (Vec::new(), None),
            BlockMode::Partial(cells) => {
                assert!(cells.len() <= 2, "partial rows carry at most two cells");
                (
                    Vec::new(),
                    Some(cells.iter().map(|c| clean(c, false)).collect()),
                )
            }
        };
        (
            Self {
                sentence,
                rows,
                partial,
            },
            warnings,
        )
    }

    pub fn render(&self, order: HeaderOrder) -> String {
        let mut out = String::with_capacity(64 + self.sentence.len());
        out.push_str(SENTENCE_PREFIX);
        out.push_str(&self.sentence);
        out.push('\n');
        out.push_str(order.header());
        out.push('\n');
        let rows: Vec<String> = self.rows.iter().map(|r| render_row(r)).collect();
        out.push_str(&rows.join("\n"));
        if let Some(cells) = &self.partial {
            out.push(DELIMITER);
            for c in cells {
                out.push_str(c);
                out.push(DELIMITER);
            }
        }
        out
    }
}

pub fn render_row<S: AsRef<str>>(cells: &[S]) -> String {
    let mut out = String::from(DELIMITER);
    for c in cells {
        out.push_str(c.as_ref());
        out.push(DELIMITER);
    }
    out
}

/// Renders one record as a prompt block.
pub fn render_block(
    record: &RERecord,
    order: HeaderOrder,
    mode: &BlockMode,
    selection: RowSelection,
) -> Rendered {
    let (block, warnings) = ExampleBlock::from_record(record, order, mode, selection);
    Rendered {
        text: block.render(order),
        warnings,
    }
}

/// An ordered sequence of blocks sharing one header order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptDoc {
    pub blocks: Vec<ExampleBlock>,
    pub order: HeaderOrder,
}

impl PromptDoc {
    pub fn render(&self) -> String {
        self.blocks
            .iter()
            .map(|b| b.render(self.order))
            .collect::<Vec<_>>()
            .join(BLOCK_SEPARATOR)
    }
}

/// Joins rendered blocks with the block separator.
pub fn join_blocks<S: AsRef<str>>(blocks: &[S]) -> String {
    blocks
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(BLOCK_SEPARATOR)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("table header not found")]
    NoHeader,
    #[error("table header present but no well-formed rows")]
    NoRows,
    #[error("expected {expected} cells, found {found}")]
    WrongArity { expected: usize, found: usize },
}

fn row_cells(line: &str) -> Option<[&str; 3]> {
    let line = line.trim();
    let inner = line.strip_prefix(DELIMITER)?.strip_suffix(DELIMITER)?;
    let mut parts = inner.split(DELIMITER);
    let cells = [parts.next()?, parts.next()?, parts.next()?];
    if parts.next().is_some() {
        return None;
    }
    Some(cells.map(str::trim))
}

/// Parses the first table in `text`.
///
/// Lines after the header that are not rows are skipped until the first row;
/// after that, a blank or non-row line ends the table.
pub fn parse_table(text: &str, order: HeaderOrder) -> Result<Vec<StringTriple>, ParseError> {
    let header = order.header();
    let mut lines = text.lines();
    if !lines.by_ref().any(|l| l.trim() == header) {
        return Err(ParseError::NoHeader);
    }
    let mut rows = Vec::new();
    for line in lines {
        match row_cells(line) {
            Some(cells) if line.trim() != header => {
                let (p, s, o) = order.to_pso(cells);
                rows.push(StringTriple::new(p, s, o));
            }
            _ if !rows.is_empty() => break,
            _ => {}
        }
    }
    if rows.is_empty() {
        Err(ParseError::NoRows)
    } else {
        Ok(rows)
    }
}

/// Parses every block of a concatenated document (one table per block).
pub fn parse_blocks(
    text: &str,
    order: HeaderOrder,
) -> Vec<Result<Vec<StringTriple>, ParseError>> {
    text.split(BLOCK_SEPARATOR)
        .filter(|b| !b.trim().is_empty())
        .map(|b| parse_table(b, order))
        .collect()
}

/// Completes a partial row: `given` holds the leading cells (header order)
/// and `text` the generated remainder, each cell closed by `|`.
pub fn parse_continuation_row<S: AsRef<str>>(
    text: &str,
    given: &[S],
    order: HeaderOrder,
) -> Result<StringTriple, ParseError> {
    assert!(
        (1..=2).contains(&given.len()),
        "a continuation row needs one or two given cells"
    );
    let expected = 3 - given.len();
    let line = text.split('\n').next().unwrap_or("").trim_end();
    let pieces: Vec<&str> = line.split(DELIMITER).collect();
    // Every cell is terminated, so the piece after the last delimiter is empty.
    let (last, cells) = pieces.split_last().expect("split yields one piece");
    if !last.trim().is_empty() || cells.len() != expected {
        return Err(ParseError::WrongArity {
            expected,
            found: if last.trim().is_empty() {
                cells.len()
            } else {
                cells.len() + 1
            },
        });
    }
    let all: Vec<&str> = given
        .iter()
        .map(|g| g.as_ref().trim())
        .chain(cells.iter().map(|c| c.trim()))
        .collect();
    let (p, s, o) = order.to_pso([all[0], all[1], all[2]]);
    Ok(StringTriple::new(p, s, o))
}
