//! Q&A export ingestion: CSV parsing, tag filtering, HTML cleaning and the
//! corpus JSONL contract consumed by every downstream stage.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use chrono::{DateTime, NaiveDateTime, SecondsFormat, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read export {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed CSV in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("export {path} lacks required column {column}")]
    MissingColumn { path: PathBuf, column: &'static str },
    #[error("tag filter for {filter} applied to a post from {post}")]
    ForumMismatch { filter: Forum, post: Forum },
    #[error("tag filter needs at least one tag")]
    EmptyFilter,
    #[error("invalid tag {0:?}")]
    InvalidTag(String),
    #[error("duplicate post {0}")]
    DuplicatePost(String),
    #[error("post {id} violates corpus invariants: {reason}")]
    InvalidPost { id: String, reason: String },
    #[error("corpus line {line}: {source}")]
    CorpusLine {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Forum {
    #[serde(rename = "SO")]
    StackOverflow,
    #[serde(rename = "QCSE")]
    QuantumComputing,
    #[serde(rename = "CSSE")]
    ComputerScience,
    #[serde(rename = "AISE")]
    ArtificialIntelligence,
}

impl Forum {
    pub const ALL: [Forum; 4] = [
        Forum::StackOverflow,
        Forum::QuantumComputing,
        Forum::ComputerScience,
        Forum::ArtificialIntelligence,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Forum::StackOverflow => "SO",
            Forum::QuantumComputing => "QCSE",
            Forum::ComputerScience => "CSSE",
            Forum::ArtificialIntelligence => "AISE",
        }
    }
}

impl fmt::Display for Forum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Forum {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Forum::ALL
            .into_iter()
            .find(|f| f.code().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown forum {s:?} (expected SO, QCSE, CSSE or AISE)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub post_id: String,
    pub forum: Forum,
    pub title: String,
    /// Raw export HTML. Not part of the corpus file.
    #[serde(skip)]
    pub body_html: String,
    pub body_text: String,
    pub tags: BTreeSet<String>,
    pub has_accepted_answer: bool,
    #[serde(with = "iso8601")]
    pub created_at: DateTime<Utc>,
    pub answers: Vec<String>,
}

impl Post {
    /// Corpus-wide identifier, `<forum>:<post_id>`. Forums are distinct
    /// namespaces, so this is what annotations and datasets key on.
    pub fn key(&self) -> String {
        format!("{}:{}", self.forum, self.post_id)
    }

    /// Classifier input: title and question body, never the answers.
    pub fn classifier_text(&self) -> String {
        classifier_text(&self.title, &self.body_text)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let fail = |reason: &str| IngestError::InvalidPost {
            id: self.key(),
            reason: reason.to_string(),
        };
        if self.post_id.is_empty() {
            return Err(fail("empty post_id"));
        }
        if self.tags.is_empty() {
            return Err(fail("no tags"));
        }
        if let Some(tag) = self.tags.iter().find(|t| !is_valid_tag(t)) {
            return Err(fail(&format!("invalid tag {tag:?}")));
        }
        if self.body_text.chars().any(|c| c.is_control() && c != '\n') {
            return Err(fail("control character in body_text"));
        }
        if url_regex().is_match(&self.body_text) {
            return Err(fail("URL in body_text"));
        }
        Ok(())
    }
}

pub fn classifier_text(title: &str, body_text: &str) -> String {
    match (title.is_empty(), body_text.is_empty()) {
        (_, true) => title.to_string(),
        (true, false) => body_text.to_string(),
        (false, false) => format!("{title} {body_text}"),
    }
}

mod iso8601 {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&value.to_rfc3339_opts(SecondsFormat::Secs, true))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let s = String::deserialize(d)?;
        parse_timestamp(&s).ok_or_else(|| serde::de::Error::custom(format!("bad timestamp {s:?}")))
    }
}

/// Parses the timestamp shapes found in SEDE downloads and in our own corpus files.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.with_timezone(&Utc));
    }
    const FORMATS: [&str; 4] = [
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S",
    ];
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .map(|naive| naive.and_utc())
}

fn tag_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[a-z0-9#+.\-]+$").unwrap())
}

pub fn is_valid_tag(tag: &str) -> bool {
    tag_regex().is_match(tag)
}

/// Lowercases, trims and hyphenates internal whitespace
/// (`"TensorFlow quantum"` -> `"tensorflow-quantum"`).
pub fn normalize_tag(raw: &str) -> String {
    raw.split_whitespace()
        .collect::<Vec<_>>()
        .join("-")
        .to_lowercase()
}

/// Splits an export tag cell. Handles both `<a><b>` and `|a|b|`.
pub fn parse_tags(cell: &str) -> BTreeSet<String> {
    let cell = cell.trim();
    let pieces: Vec<&str> = if cell.starts_with('<') {
        cell.split(['<', '>']).collect()
    } else {
        cell.split('|').collect()
    };
    pieces
        .into_iter()
        .map(normalize_tag)
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagFilter {
    pub forum: Forum,
    pub tags: BTreeSet<String>,
}

impl TagFilter {
    pub fn new<I, S>(forum: Forum, tags: I) -> Result<Self, IngestError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let tags: BTreeSet<String> = tags
            .into_iter()
            .map(|t| normalize_tag(t.as_ref()))
            .filter(|t| !t.is_empty())
            .collect();
        if tags.is_empty() {
            return Err(IngestError::EmptyFilter);
        }
        if let Some(bad) = tags.iter().find(|t| !is_valid_tag(t)) {
            return Err(IngestError::InvalidTag(bad.clone()));
        }
        Ok(TagFilter { forum, tags })
    }

    /// The per-forum tag sets used to assemble the study corpus.
    pub fn study(forum: Forum) -> Self {
        let tags: &[&str] = match forum {
            Forum::StackOverflow => &[
                "post-quantum cryptography",
                "q#",
                "quantum-computing",
                "qiskit",
                "qcl",
                "qutip",
                "qubit",
                "TensorFlow-quantum",
            ],
            Forum::QuantumComputing => &[
                "programming",
                "classical computing",
                "q#",
                "qiskit",
                "cirq",
                "ibm-q-experience",
                "machine-learning",
                "qutip",
            ],
            Forum::ComputerScience | Forum::ArtificialIntelligence => &["quantum-computing"],
        };
        TagFilter::new(forum, tags).expect("study tag sets are valid")
    }

    pub fn matches(&self, post: &Post) -> bool {
        post.tags.iter().any(|t| self.tags.contains(t))
    }
}

/// Keeps posts sharing at least one tag with the filter, preserving order.
pub fn apply_tag_filter<I>(posts: I, filter: &TagFilter) -> Result<Vec<Post>, IngestError>
where
    I: IntoIterator<Item = Post>,
{
    let mut kept = Vec::new();
    for post in posts {
        if post.forum != filter.forum {
            return Err(IngestError::ForumMismatch {
                filter: filter.forum,
                post: post.forum,
            });
        }
        if filter.matches(&post) {
            kept.push(post);
        }
    }
    Ok(kept)
}

// ---------------------------------------------------------------------------
// HTML cleaning

const BLOCK_TAGS: &[&str] = &[
    "address", "article", "blockquote", "br", "dd", "div", "dl", "dt", "figcaption", "figure",
    "footer", "h1", "h2", "h3", "h4", "h5", "h6", "header", "hr", "li", "ol", "p", "pre",
    "section", "table", "tbody", "td", "tfoot", "th", "thead", "tr", "ul",
];

const INLINE_TAGS: &[&str] = &[
    "a", "abbr", "b", "big", "cite", "code", "del", "em", "font", "i", "img", "input", "ins",
    "kbd", "mark", "q", "s", "samp", "small", "span", "strike", "strong", "sub", "sup", "tt",
    "u", "var", "wbr",
];

fn tag_open_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"^</?([A-Za-z][A-Za-z0-9]*)(?:\s[^<>]*)?/?>"#).unwrap())
}

fn url_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)(?:\b(?:https?|ftp)://|\bwww\.)[^\s<>]+").unwrap())
}

/// Strips markup, decodes entities, removes URLs and normalizes whitespace.
///
/// Block-level elements become line breaks; within a line, whitespace runs
/// collapse to one space and empty lines are dropped. Code blocks keep their
/// text and line structure. The pass is repeated until the output stops
/// changing, so the function is idempotent even when decoded entities spell
/// out new markup.
pub fn clean_text(html: &str) -> String {
    let mut current = clean_pass(html);
    loop {
        let next = clean_pass(&current);
        if next == current {
            return current;
        }
        current = next;
    }
}

fn clean_pass(input: &str) -> String {
    let stripped = strip_tags(input);
    let decoded = html_escape::decode_html_entities(&stripped);
    let no_urls = url_regex().replace_all(&decoded, " ");
    normalize_whitespace(&no_urls)
}

fn strip_tags(input: &str) -> String {
    let mut out = String::with_capacity(input.len());
    let mut rest = input;
    while let Some(pos) = rest.find('<') {
        out.push_str(&rest[..pos]);
        let candidate = &rest[pos..];
        if let Some(after) = candidate.strip_prefix("<!--") {
            rest = match after.find("-->") {
                Some(end) => &after[end + 3..],
                None => "",
            };
            continue;
        }
        if let Some(caps) = tag_open_regex().captures(candidate) {
            let name = caps[1].to_ascii_lowercase();
            let whole = caps.get(0).unwrap().len();
            if BLOCK_TAGS.contains(&name.as_str()) {
                out.push('\n');
                rest = &candidate[whole..];
                continue;
            }
            if INLINE_TAGS.contains(&name.as_str()) {
                rest = &candidate[whole..];
                continue;
            }
        }
        out.push('<');
        rest = &candidate[1..];
    }
    out.push_str(rest);
    out
}

fn normalize_whitespace(input: &str) -> String {
    let mut lines = Vec::new();
    for line in input.split('\n') {
        let words: Vec<&str> = line
            .split(|c: char| c.is_whitespace() || c.is_control())
            .filter(|w| !w.is_empty())
            .collect();
        if !words.is_empty() {
            lines.push(words.join(" "));
        }
    }
    lines.join("\n")
}

// ---------------------------------------------------------------------------
// Export parsing

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowReject {
    /// 1-based line number in the export file.
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct ParsedExport {
    pub posts: Vec<Post>,
    pub rejects: Vec<RowReject>,
}

impl ParsedExport {
    pub fn reject_count(&self) -> usize {
        self.rejects.len()
    }
}

struct Columns {
    id: usize,
    title: Option<usize>,
    body: usize,
    tags: Option<usize>,
    accepted: Option<usize>,
    created: Option<usize>,
}

fn column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers
        .iter()
        .position(|h| h.trim().trim_start_matches('\u{feff}').eq_ignore_ascii_case(name))
}

/// Streams posts out of a SEDE-style question export.
pub struct ExportReader {
    path: PathBuf,
    forum: Forum,
    records: csv::StringRecordsIntoIter<File>,
    columns: Columns,
    answers: HashMap<String, Vec<String>>,
}

impl ExportReader {
    pub fn open(path: impl AsRef<Path>, forum: Forum) -> Result<Self, IngestError> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|source| IngestError::Unreadable {
            path: path.clone(),
            source,
        })?;
        let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
        let headers = reader
            .headers()
            .map_err(|source| IngestError::Csv {
                path: path.clone(),
                source,
            })?
            .clone();
        let required = |name: &'static str| {
            column(&headers, name).ok_or(IngestError::MissingColumn {
                path: path.clone(),
                column: name,
            })
        };
        let columns = Columns {
            id: required("Id")?,
            body: required("Body")?,
            title: column(&headers, "Title"),
            tags: column(&headers, "Tags"),
            accepted: column(&headers, "AcceptedAnswerId"),
            created: column(&headers, "CreationDate"),
        };
        let mut this = ExportReader {
            records: reader.into_records(),
            path,
            forum,
            columns,
            answers: HashMap::new(),
        };
        let sibling = answers_sibling(&this.path);
        if sibling.exists() {
            this = this.with_answers(sibling)?;
        }
        Ok(this)
    }

    /// Attaches answers from a CSV with `ParentId` and `Body` columns.
    pub fn with_answers(mut self, path: impl AsRef<Path>) -> Result<Self, IngestError> {
        self.answers = read_answers(path.as_ref())?;
        Ok(self)
    }

    fn build(&mut self, record: &csv::StringRecord) -> Result<Post, String> {
        let get = |idx: Option<usize>| idx.and_then(|i| record.get(i)).unwrap_or("").trim();
        let id = get(Some(self.columns.id));
        if id.is_empty() {
            return Err("missing Id".into());
        }
        let body_html = record.get(self.columns.body).unwrap_or("");
        if body_html.trim().is_empty() {
            return Err("missing Body".into());
        }
        let tags = parse_tags(get(self.columns.tags));
        if tags.is_empty() {
            return Err("no tags".into());
        }
        if let Some(bad) = tags.iter().find(|t| !is_valid_tag(t)) {
            return Err(format!("invalid tag {bad:?}"));
        }
        let created_raw = get(self.columns.created);
        let created_at = parse_timestamp(created_raw)
            .ok_or_else(|| format!("unparseable CreationDate {created_raw:?}"))?;
        let title = clean_text(get(self.columns.title)).replace('\n', " ");
        Ok(Post {
            post_id: id.to_string(),
            forum: self.forum,
            title,
            body_html: body_html.to_string(),
            body_text: clean_text(body_html),
            tags,
            has_accepted_answer: !get(self.columns.accepted).is_empty(),
            created_at,
            answers: self.answers.remove(id).unwrap_or_default(),
        })
    }
}

impl Iterator for ExportReader {
    type Item = Result<Post, RowReject>;

    fn next(&mut self) -> Option<Self::Item> {
        let record = match self.records.next()? {
            Ok(r) => r,
            Err(source) => {
                let line = source.position().map(|p| p.line()).unwrap_or(0);
                // A broken quote or bad UTF-8 poisons one row, not the file.
                return Some(Err(RowReject {
                    line,
                    reason: format!("malformed row: {source}"),
                }));
            }
        };
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        Some(
            self.build(&record)
                .map_err(|reason| RowReject { line, reason }),
        )
    }
}

/// `questions.csv` -> `questions_answers.csv`.
pub fn answers_sibling(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}_answers.csv"))
}

fn read_answers(path: &Path) -> Result<HashMap<String, Vec<String>>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|source| IngestError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    let headers = reader
        .headers()
        .map_err(|source| IngestError::Csv {
            path: path.to_path_buf(),
            source,
        })?
        .clone();
    let parent = column(&headers, "ParentId").ok_or(IngestError::MissingColumn {
        path: path.to_path_buf(),
        column: "ParentId",
    })?;
    let body = column(&headers, "Body").ok_or(IngestError::MissingColumn {
        path: path.to_path_buf(),
        column: "Body",
    })?;
    let mut answers: HashMap<String, Vec<String>> = HashMap::new();
    for record in reader.records() {
        let Ok(record) = record else { continue };
        let (Some(p), Some(b)) = (record.get(parent), record.get(body)) else {
            continue;
        };
        let text = clean_text(b);
        if !p.trim().is_empty() && !text.is_empty() {
            answers.entry(p.trim().to_string()).or_default().push(text);
        }
    }
    Ok(answers)
}

/// Parses a whole export, separating accepted posts from rejected rows.
pub fn parse_export(path: impl AsRef<Path>, forum: Forum) -> Result<ParsedExport, IngestError> {
    let mut parsed = ParsedExport::default();
    for item in ExportReader::open(path, forum)? {
        match item {
            Ok(post) => parsed.posts.push(post),
            Err(reject) => {
                log::warn!("rejected export row {}: {}", reject.line, reject.reason);
                parsed.rejects.push(reject);
            }
        }
    }
    Ok(parsed)
}

/// Parses several exports on separate threads; results keep input order.
pub fn parse_exports(
    sources: &[(PathBuf, Forum)],
) -> Vec<Result<ParsedExport, IngestError>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = sources
            .iter()
            .map(|(path, forum)| scope.spawn(move || parse_export(path, *forum)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("export parser thread panicked"))
            .collect()
    })
}

// ---------------------------------------------------------------------------
// Corpus JSONL

/// Writes the corpus file. Key order is fixed by field order here.
pub fn write_corpus(posts: &[Post], path: impl AsRef<Path>) -> Result<usize, IngestError> {
    let mut seen = HashSet::new();
    for post in posts {
        post.validate()?;
        if !seen.insert((post.forum, post.post_id.as_str())) {
            return Err(IngestError::DuplicatePost(post.key()));
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    for post in posts {
        serde_json::to_writer(&mut out, post).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(posts.len())
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Post>, IngestError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| IngestError::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let mut posts = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let post: Post = serde_json::from_str(&line)
            .map_err(|source| IngestError::CorpusLine { line: i + 1, source })?;
        posts.push(post);
    }
    Ok(posts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(id: &str, forum: Forum, tags: &[&str]) -> Post {
        Post {
            post_id: id.into(),
            forum,
            title: format!("title {id}"),
            body_html: String::new(),
            body_text: "body".into(),
            tags: tags.iter().map(|t| t.to_string()).collect(),
            has_accepted_answer: false,
            created_at: parse_timestamp("2020-01-02 03:04:05").unwrap(),
            answers: vec![],
        }
    }

    #[test]
    fn tag_cells() {
        let expected: BTreeSet<String> = ["qiskit", "qubit"].iter().map(|s| s.to_string()).collect();
        assert_eq!(parse_tags("<qiskit><qubit>"), expected);
        assert_eq!(parse_tags("|qiskit|qubit|"), expected);
        assert_eq!(parse_tags("<Qiskit><QUBIT>"), expected);
        assert!(parse_tags("").is_empty());
        assert_eq!(normalize_tag(" TensorFlow quantum "), "tensorflow-quantum");
    }

    #[test]
    fn cleaning_examples() {
        assert_eq!(clean_text("<p>What is a qubit?</p>"), "What is a qubit?");
        assert_eq!(clean_text("see https://x.y/z for docs"), "see for docs");
        assert_eq!(clean_text("a &amp; b &lt; c"), "a & b < c");
        assert_eq!(clean_text("<p>one</p><p>two</p>"), "one\ntwo");
        assert_eq!(clean_text("x<!-- hidden -->y"), "xy");
        assert_eq!(clean_text("List&lt;int&gt; stays"), "List<int> stays");
        assert_eq!(clean_text("tab\there\r\nline"), "tab here\nline");
        assert_eq!(clean_text(""), "");
    }

    #[test]
    fn study_filters() {
        let so = TagFilter::study(Forum::StackOverflow);
        assert!(so.tags.contains("post-quantum-cryptography"));
        assert!(so.tags.contains("tensorflow-quantum"));
        assert_eq!(so.tags.len(), 8);
        let csse = TagFilter::study(Forum::ComputerScience);
        let kept = apply_tag_filter(
            vec![
                post("1", Forum::ComputerScience, &["quantum-computing"]),
                post("2", Forum::ComputerScience, &["java"]),
            ],
            &csse,
        )
        .unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].post_id, "1");
    }

    #[test]
    fn filter_rejects_other_forum() {
        let err = apply_tag_filter(
            vec![post("1", Forum::StackOverflow, &["qiskit"])],
            &TagFilter::study(Forum::ComputerScience),
        )
        .unwrap_err();
        assert!(matches!(err, IngestError::ForumMismatch { .. }));
        assert!(matches!(
            TagFilter::new(Forum::StackOverflow, Vec::<String>::new()),
            Err(IngestError::EmptyFilter)
        ));
    }

    #[test]
    fn rejects_rows_without_id_or_body() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("so.csv");
        let mut f = File::create(&path).unwrap();
        writeln!(f, "Id,Title,Body,Tags,AcceptedAnswerId,CreationDate").unwrap();
        writeln!(f, "1,Ok,<p>fine</p>,<qiskit>,,2020-01-01 00:00:00").unwrap();
        writeln!(f, "2,No body,,<qiskit>,,2020-01-01 00:00:00").unwrap();
        writeln!(f, ",No id,<p>x</p>,<qiskit>,,2020-01-01 00:00:00").unwrap();
        drop(f);
        let parsed = parse_export(&path, Forum::StackOverflow).unwrap();
        assert_eq!(parsed.posts.len(), 1);
        assert_eq!(parsed.reject_count(), 2);
        assert_eq!(parsed.rejects[0].line, 3);
        assert!(parsed.rejects[0].reason.contains("Body"));
        assert_eq!(parsed.rejects[1].line, 4);
    }

    #[test]
    fn unreadable_export_is_fatal() {
        let err = parse_export("/nonexistent/export.csv", Forum::StackOverflow).unwrap_err();
        assert!(matches!(err, IngestError::Unreadable { .. }));
    }

    #[test]
    fn duplicate_ids_are_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let posts = vec![
            post("7", Forum::StackOverflow, &["qiskit"]),
            post("7", Forum::QuantumComputing, &["qiskit"]),
            post("7", Forum::StackOverflow, &["qubit"]),
        ];
        let err = write_corpus(&posts, dir.path().join("c.jsonl")).unwrap_err();
        match err {
            IngestError::DuplicatePost(id) => assert_eq!(id, "SO:7"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn corpus_key_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_corpus(&[post("1", Forum::StackOverflow, &["qiskit"])], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "{\"post_id\":\"1\",\"forum\":\"SO\",\"title\":\"title 1\",\"body_text\":\"body\",\
             \"tags\":[\"qiskit\"],\"has_accepted_answer\":false,\
             \"created_at\":\"2020-01-02T03:04:05Z\",\"answers\":[]}\n"
        );
        assert_eq!(read_corpus(&path).unwrap()[0].post_id, "1");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn fragment() -> impl Strategy<Value = String> {
            prop_oneof![
                "[a-zA-Z0-9 ?.,()'\"=+-]{0,12}",
                Just("<p>".to_string()),
                Just("</p>".to_string()),
                Just("<code>".to_string()),
                Just("</code>".to_string()),
                Just("<pre><code>".to_string()),
                Just("</code></pre>".to_string()),
                Just("<br/>".to_string()),
                Just("<a href=\"https://q.example/x\">".to_string()),
                Just("</a>".to_string()),
                Just("&amp;".to_string()),
                Just("&lt;".to_string()),
                Just("&gt;".to_string()),
                Just("&amp;lt;p&amp;gt;".to_string()),
                Just("&nbsp;".to_string()),
                Just("\t".to_string()),
                Just("\n".to_string()),
                Just(" http://u.example/a?b=c ".to_string()),
                Just("<!-- c -->".to_string()),
                Just("<".to_string()),
                Just(">".to_string()),
            ]
        }

        proptest! {
            #[test]
            fn clean_text_is_idempotent(parts in prop::collection::vec(fragment(), 0..30)) {
                let html = parts.concat();
                let once = clean_text(&html);
                prop_assert_eq!(clean_text(&once), once.clone());
                prop_assert!(!once.chars().any(|c| c.is_control() && c != '\n'));
                prop_assert!(!url_regex().is_match(&once));
            }

            #[test]
            fn filter_is_monotone(
                post_tags in prop::collection::vec(prop::collection::btree_set("[a-e]", 1..3), 0..20),
                filter_tags in prop::collection::btree_set("[a-e]", 1..3),
                extra in "[a-e]",
            ) {
                let posts: Vec<Post> = post_tags
                    .iter()
                    .enumerate()
                    .map(|(i, tags)| {
                        let tags: Vec<&str> = tags.iter().map(String::as_str).collect();
                        post(&i.to_string(), Forum::QuantumComputing, &tags)
                    })
                    .collect();
                let small = TagFilter::new(Forum::QuantumComputing, &filter_tags).unwrap();
                let mut bigger_tags = filter_tags.clone();
                bigger_tags.insert(extra);
                let bigger = TagFilter::new(Forum::QuantumComputing, &bigger_tags).unwrap();
                let a = apply_tag_filter(posts.clone(), &small).unwrap();
                let b = apply_tag_filter(posts, &bigger).unwrap();
                prop_assert!(a.iter().all(|p| b.contains(p)));
            }
        }
    }
}
