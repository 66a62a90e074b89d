//! Schema representation: introspection, schema files and text rendering.
//!
//! The rendered layout is an indented bullet list:
//!
//! ```text
//! - Table: SPORTS_FINANCIALS
//!   - Columns:
//!      - COUNTRY (text)
//!        - Description: Country of the record.
//!        - Sample rows: ['CANADA', 'MEXICO']
//!   - Primary key: COUNTRY
//! - Foreign keys:
//!   - (SPORTS_FINANCIALS, SPORTS_VIEWERSHIP):
//!     - (COUNTRY, COUNTRY)
//! ```
//!
//! Schema files are either JSON (the serde form of [`SchemaRepresentation`])
//! or the rendered text itself; `render_schema` output always reloads to an
//! equal value.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::db::{Database, DbError, Value};

/// Columns with at most this many distinct values list all of them.
pub const SAMPLE_ALL_THRESHOLD: usize = 10;
/// Otherwise, the number of most frequent values kept.
pub const SAMPLE_TOP: usize = 5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchemaError {
    #[error("connection error: {0}")]
    Connection(String),
    #[error("permission denied: {0}")]
    Permission(String),
    #[error("{0}")]
    Format(FormatError),
    #[error("unknown schema element: {0}")]
    UnknownElement(String),
}

/// A schema file or value that failed to parse or validate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatError {
    pub line: Option<usize>,
    pub field: String,
    pub message: String,
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "format error at line {l} ({}): {}", self.field, self.message),
            None => write!(f, "format error ({}): {}", self.field, self.message),
        }
    }
}

fn format_err(line: Option<usize>, field: impl Into<String>, message: impl Into<String>) -> SchemaError {
    SchemaError::Format(FormatError {
        line,
        field: field.into(),
        message: message.into(),
    })
}

impl From<DbError> for SchemaError {
    fn from(e: DbError) -> Self {
        match e {
            DbError::Permission(m) => SchemaError::Permission(m),
            DbError::Connection(m) | DbError::Sql(m) => SchemaError::Connection(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnRepr {
    pub name: String,
    #[serde(rename = "type")]
    pub col_type: String,
    #[serde(default)]
    pub description: String,
    /// Rendered SQL literals. JSON carries them as plain scalars.
    #[serde(default, with = "literal_list")]
    pub sample_rows: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRepr {
    pub name: String,
    pub columns: Vec<ColumnRepr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primary_key: Option<String>,
}

impl TableRepr {
    pub fn column(&self, name: &str) -> Option<&ColumnRepr> {
        self.columns.iter().find(|c| c.name.eq_ignore_ascii_case(name))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignKey {
    pub tables: (String, String),
    pub keys: Vec<(String, String)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaRepresentation {
    pub tables: Vec<TableRepr>,
    #[serde(default)]
    pub foreign_keys: Vec<ForeignKey>,
}

impl SchemaRepresentation {
    pub fn table(&self, name: &str) -> Option<&TableRepr> {
        self.tables.iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }

    /// Every element identifier: `TABLE` and `TABLE.COLUMN`.
    pub fn element_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        for t in &self.tables {
            ids.push(t.name.clone());
            ids.extend(t.columns.iter().map(|c| format!("{}.{}", t.name, c.name)));
        }
        ids
    }

    pub fn column_count(&self) -> usize {
        self.tables.iter().map(|t| t.columns.len()).sum()
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        let mut seen = BTreeSet::new();
        for t in &self.tables {
            if t.name.is_empty() {
                return Err(format_err(None, "tables", "empty table name"));
            }
            if !seen.insert(t.name.to_ascii_uppercase()) {
                return Err(format_err(None, "tables", format!("duplicate table {}", t.name)));
            }
            let mut cols = BTreeSet::new();
            for c in &t.columns {
                if !cols.insert(c.name.to_ascii_uppercase()) {
                    return Err(format_err(
                        None,
                        format!("{}.columns", t.name),
                        format!("duplicate column {}", c.name),
                    ));
                }
                if c.sample_rows.len() > SAMPLE_ALL_THRESHOLD {
                    return Err(format_err(
                        None,
                        format!("{}.{}.sample_rows", t.name, c.name),
                        format!("{} samples exceeds {SAMPLE_ALL_THRESHOLD}", c.sample_rows.len()),
                    ));
                }
            }
            if let Some(pk) = &t.primary_key {
                for part in pk.split(',').map(str::trim) {
                    if t.column(part).is_none() {
                        return Err(format_err(
                            None,
                            format!("{}.primary_key", t.name),
                            format!("unknown column {part}"),
                        ));
                    }
                }
            }
        }
        for fk in &self.foreign_keys {
            let label = format!("foreign_keys({}, {})", fk.tables.0, fk.tables.1);
            let (a, b) = match (self.table(&fk.tables.0), self.table(&fk.tables.1)) {
                (Some(a), Some(b)) => (a, b),
                (None, _) => return Err(format_err(None, label, format!("unknown table {}", fk.tables.0))),
                (_, None) => return Err(format_err(None, label, format!("unknown table {}", fk.tables.1))),
            };
            if fk.keys.is_empty() {
                return Err(format_err(None, label, "no key pairs"));
            }
            for (ka, kb) in &fk.keys {
                if a.column(ka).is_none() {
                    return Err(format_err(None, label, format!("unknown column {}.{ka}", a.name)));
                }
                if b.column(kb).is_none() {
                    return Err(format_err(None, label, format!("unknown column {}.{kb}", b.name)));
                }
            }
        }
        Ok(())
    }

    /// Restrict to the given `TABLE` / `TABLE.COLUMN` identifiers. A bare
    /// table keeps all its columns. Foreign keys survive only when both
    /// endpoints (tables and key columns) do.
    pub fn filtered(&self, keep: &BTreeSet<String>) -> Result<SchemaRepresentation, SchemaError> {
        let mut whole: BTreeSet<String> = BTreeSet::new();
        let mut cols: HashMap<String, BTreeSet<String>> = HashMap::new();
        for id in keep {
            let (t, c) = match id.split_once('.') {
                Some((t, c)) => (t, Some(c)),
                None => (id.as_str(), None),
            };
            let table = self
                .table(t)
                .ok_or_else(|| SchemaError::UnknownElement(id.clone()))?;
            let tkey = table.name.to_ascii_uppercase();
            match c {
                None => {
                    whole.insert(tkey);
                }
                Some(c) => {
                    let col = table
                        .column(c)
                        .ok_or_else(|| SchemaError::UnknownElement(id.clone()))?;
                    cols.entry(tkey).or_default().insert(col.name.to_ascii_uppercase());
                }
            }
        }
        let tables: Vec<TableRepr> = self
            .tables
            .iter()
            .filter_map(|t| {
                let key = t.name.to_ascii_uppercase();
                if whole.contains(&key) {
                    return Some(t.clone());
                }
                let keep_cols = cols.get(&key)?;
                let columns: Vec<ColumnRepr> = t
                    .columns
                    .iter()
                    .filter(|c| keep_cols.contains(&c.name.to_ascii_uppercase()))
                    .cloned()
                    .collect();
                let primary_key = t.primary_key.clone().filter(|pk| {
                    pk.split(',')
                        .all(|p| keep_cols.contains(&p.trim().to_ascii_uppercase()))
                });
                Some(TableRepr {
                    name: t.name.clone(),
                    columns,
                    primary_key,
                })
            })
            .collect();
        let out = SchemaRepresentation {
            foreign_keys: Vec::new(),
            tables,
        };
        let foreign_keys = self
            .foreign_keys
            .iter()
            .filter(|fk| match (out.table(&fk.tables.0), out.table(&fk.tables.1)) {
                (Some(a), Some(b)) => fk
                    .keys
                    .iter()
                    .all(|(ka, kb)| a.column(ka).is_some() && b.column(kb).is_some()),
                _ => false,
            })
            .cloned()
            .collect();
        Ok(SchemaRepresentation { foreign_keys, ..out })
    }
}

/// Choose sample values from `(value, frequency)` pairs. NULLs are dropped.
pub fn sample_values(mut freqs: Vec<(Value, u64)>) -> Vec<Value> {
    freqs.retain(|(v, _)| !v.is_null());
    freqs.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if freqs.len() > SAMPLE_ALL_THRESHOLD {
        freqs.truncate(SAMPLE_TOP);
    }
    freqs.into_iter().map(|(v, _)| v).collect()
}

fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

/// Read the catalog of a live database.
pub fn introspect(db: &Database) -> Result<SchemaRepresentation, SchemaError> {
    db.with_connection(|conn| -> Result<SchemaRepresentation, SchemaError> {
        let names: Vec<String> = {
            let mut stmt = conn
                .prepare(
                    "SELECT name FROM sqlite_master WHERE type = 'table' \
                     AND name NOT LIKE 'sqlite_%' ORDER BY rowid",
                )
                .map_err(DbError::from)?;
            let rows = stmt
                .query_map([], |r| r.get::<_, String>(0))
                .map_err(DbError::from)?;
            rows.collect::<Result<_, _>>().map_err(DbError::from)?
        };
        let mut tables = Vec::new();
        let mut foreign_keys: Vec<ForeignKey> = Vec::new();
        for name in &names {
            let info: Vec<(String, String, i64)> = {
                let mut stmt = conn
                    .prepare(&format!("PRAGMA table_info({})", quote_ident(name)))
                    .map_err(DbError::from)?;
                let rows = stmt
                    .query_map([], |r| Ok((r.get(1)?, r.get(2)?, r.get(5)?)))
                    .map_err(DbError::from)?;
                rows.collect::<Result<_, _>>().map_err(DbError::from)?
            };
            let mut columns = Vec::new();
            let mut pk: Vec<(i64, String)> = Vec::new();
            for (col, ty, pk_pos) in info {
                if pk_pos > 0 {
                    pk.push((pk_pos, col.clone()));
                }
                let sql = format!(
                    "SELECT {c}, COUNT(*) FROM {t} WHERE {c} IS NOT NULL GROUP BY {c}",
                    c = quote_ident(&col),
                    t = quote_ident(name)
                );
                let mut stmt = conn.prepare(&sql).map_err(DbError::from)?;
                let freqs: Vec<(Value, u64)> = stmt
                    .query_map([], |r| {
                        let v = match r.get_ref(0)? {
                            rusqlite::types::ValueRef::Null => Value::Null,
                            rusqlite::types::ValueRef::Integer(i) => Value::Integer(i),
                            rusqlite::types::ValueRef::Real(f) => Value::Real(f),
                            rusqlite::types::ValueRef::Text(t) => {
                                Value::Text(String::from_utf8_lossy(t).into_owned())
                            }
                            rusqlite::types::ValueRef::Blob(b) => Value::Blob(b.to_vec()),
                        };
                        Ok((v, r.get::<_, i64>(1)? as u64))
                    })
                    .map_err(DbError::from)?
                    .collect::<Result<_, _>>()
                    .map_err(DbError::from)?;
                columns.push(ColumnRepr {
                    name: col,
                    col_type: ty.to_ascii_lowercase(),
                    description: String::new(),
                    sample_rows: sample_values(freqs).iter().map(Value::render_literal).collect(),
                });
            }
            pk.sort();
            let primary_key = (!pk.is_empty())
                .then(|| pk.into_iter().map(|(_, c)| c).collect::<Vec<_>>().join(", "));

            let fks: Vec<(i64, String, String, Option<String>)> = {
                let mut stmt = conn
                    .prepare(&format!("PRAGMA foreign_key_list({})", quote_ident(name)))
                    .map_err(DbError::from)?;
                let rows = stmt
                    .query_map([], |r| Ok((r.get(0)?, r.get(2)?, r.get(3)?, r.get(4)?)))
                    .map_err(DbError::from)?;
                rows.collect::<Result<_, _>>().map_err(DbError::from)?
            };
            let mut fks = fks;
            fks.sort_by_key(|f| f.0);
            for (_, target, from, to) in fks {
                let to = match to {
                    Some(t) => t,
                    // implicit reference to the target's primary key
                    None => primary_key_of(conn, &target)?.unwrap_or_else(|| from.clone()),
                };
                match foreign_keys
                    .iter_mut()
                    .find(|fk| fk.tables.0 == *name && fk.tables.1 == target)
                {
                    Some(fk) => fk.keys.push((from, to)),
                    None => foreign_keys.push(ForeignKey {
                        tables: (name.clone(), target),
                        keys: vec![(from, to)],
                    }),
                }
            }
            tables.push(TableRepr {
                name: name.clone(),
                columns,
                primary_key,
            });
        }
        // Drop links to tables outside the catalog (dangling declarations).
        let schema = SchemaRepresentation {
            tables,
            foreign_keys: Vec::new(),
        };
        let foreign_keys = foreign_keys
            .into_iter()
            .filter(|fk| schema.table(&fk.tables.1).is_some())
            .collect();
        Ok(SchemaRepresentation {
            foreign_keys,
            ..schema
        })
    })
}

fn primary_key_of(conn: &rusqlite::Connection, table: &str) -> Result<Option<String>, SchemaError> {
    let mut stmt = conn
        .prepare(&format!("PRAGMA table_info({})", quote_ident(table)))
        .map_err(DbError::from)?;
    let rows = stmt
        .query_map([], |r| Ok((r.get::<_, String>(1)?, r.get::<_, i64>(5)?)))
        .map_err(DbError::from)?;
    for row in rows {
        let (name, pk) = row.map_err(DbError::from)?;
        if pk == 1 {
            return Ok(Some(name));
        }
    }
    Ok(None)
}

/// Load a schema description file (JSON or rendered text).
pub fn load_schema_file(path: impl AsRef<Path>) -> Result<SchemaRepresentation, SchemaError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| format_err(None, "file", format!("{}: {e}", path.display())))?;
    parse_schema_text(&text)
}

/// Parse schema text; JSON when it starts with `{`, rendered layout otherwise.
pub fn parse_schema_text(text: &str) -> Result<SchemaRepresentation, SchemaError> {
    let schema = if text.trim_start().starts_with('{') {
        serde_json::from_str::<SchemaRepresentation>(text).map_err(|e| {
            format_err(Some(e.line()), "json", e.to_string())
        })?
    } else {
        parse_rendered(text)?
    };
    schema.validate()?;
    Ok(schema)
}

fn parse_rendered(text: &str) -> Result<SchemaRepresentation, SchemaError> {
    let mut schema = SchemaRepresentation::default();
    let mut in_fks = false;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = Some(idx + 1);
        let line = raw.trim();
        if line.is_empty() || line == "..." {
            continue;
        }
        let Some(item) = line.strip_prefix("- ") else {
            return Err(format_err(lineno, "line", format!("expected '- ' bullet, found {line:?}")));
        };
        if let Some(name) = item.strip_prefix("Table: ") {
            in_fks = false;
            schema.tables.push(TableRepr {
                name: name.trim().to_string(),
                columns: Vec::new(),
                primary_key: None,
            });
        } else if item.trim_end() == "Foreign keys:" {
            in_fks = true;
        } else if in_fks {
            let body = item.trim_end();
            if let Some(pair) = body.strip_suffix(':') {
                let (a, b) = parse_pair(pair, lineno, "foreign key tables")?;
                schema.foreign_keys.push(ForeignKey {
                    tables: (a, b),
                    keys: Vec::new(),
                });
            } else {
                let (a, b) = parse_pair(body, lineno, "foreign key columns")?;
                schema
                    .foreign_keys
                    .last_mut()
                    .ok_or_else(|| format_err(lineno, "foreign key columns", "key pair before table pair"))?
                    .keys
                    .push((a, b));
            }
        } else {
            let table = schema
                .tables
                .last_mut()
                .ok_or_else(|| format_err(lineno, "table", "entry before any '- Table:' line"))?;
            if item.trim_end() == "Columns:" {
                continue;
            } else if let Some(pk) = item.strip_prefix("Primary key:") {
                table.primary_key = Some(pk.trim().to_string());
            } else if let Some(desc) = item.strip_prefix("Description:") {
                let col = table
                    .columns
                    .last_mut()
                    .ok_or_else(|| format_err(lineno, "description", "no column to describe"))?;
                col.description = desc.trim().to_string();
            } else if let Some(samples) = item.strip_prefix("Sample rows:") {
                let col = table
                    .columns
                    .last_mut()
                    .ok_or_else(|| format_err(lineno, "sample rows", "no column for samples"))?;
                col.sample_rows = parse_literal_list(samples.trim())
                    .map_err(|m| format_err(lineno, "sample rows", m))?;
            } else {
                let item = item.trim_end();
                let open = item
                    .rfind(" (")
                    .filter(|_| item.ends_with(')'))
                    .ok_or_else(|| format_err(lineno, "column", format!("expected 'NAME (type)', found {item:?}")))?;
                table.columns.push(ColumnRepr {
                    name: item[..open].trim().to_string(),
                    col_type: item[open + 2..item.len() - 1].trim().to_string(),
                    description: String::new(),
                    sample_rows: Vec::new(),
                });
            }
        }
    }
    Ok(schema)
}

fn parse_pair(text: &str, line: Option<usize>, field: &str) -> Result<(String, String), SchemaError> {
    let inner = text
        .trim()
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| format_err(line, field, format!("expected '(A, B)', found {text:?}")))?;
    let (a, b) = inner
        .split_once(',')
        .ok_or_else(|| format_err(line, field, format!("expected two names in {text:?}")))?;
    Ok((a.trim().to_string(), b.trim().to_string()))
}

/// Split `['a', 1, 'b, c']` into rendered literals.
fn parse_literal_list(text: &str) -> Result<Vec<String>, String> {
    let inner = text
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| format!("expected a bracketed list, found {text:?}"))?;
    let mut out = Vec::new();
    let mut chars = inner.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        let Some(&first) = chars.peek() else { break };
        let mut item = String::new();
        if first == '\'' {
            item.push(chars.next().unwrap());
            loop {
                match chars.next() {
                    Some('\'') if chars.peek() == Some(&'\'') => {
                        chars.next();
                        item.push_str("''");
                    }
                    Some('\'') => {
                        item.push('\'');
                        break;
                    }
                    Some(c) => item.push(c),
                    None => return Err("unterminated string literal".into()),
                }
            }
        } else {
            while let Some(&c) = chars.peek() {
                if c == ',' {
                    break;
                }
                item.push(c);
                chars.next();
            }
            let trimmed = item.trim().to_string();
            if trimmed.parse::<f64>().is_err() && trimmed != "NULL" {
                return Err(format!("unquoted non-numeric sample {trimmed:?}"));
            }
            item = trimmed;
        }
        out.push(item);
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        match chars.next() {
            None => break,
            Some(',') => continue,
            Some(c) => return Err(format!("unexpected {c:?} after sample")),
        }
    }
    Ok(out)
}

/// Render in the bullet layout, optionally filtered by [`SchemaRepresentation::filtered`].
pub fn render_schema(
    schema: &SchemaRepresentation,
    keep: Option<&BTreeSet<String>>,
) -> Result<String, SchemaError> {
    let filtered;
    let schema = match keep {
        Some(k) => {
            filtered = schema.filtered(k)?;
            &filtered
        }
        None => schema,
    };
    let mut out = String::new();
    for t in &schema.tables {
        out.push_str(&format!("- Table: {}\n  - Columns:\n", t.name));
        for c in &t.columns {
            out.push_str(&format!("     - {} ({})\n", c.name, c.col_type));
            out.push_str(&format!("       - Description: {}\n", c.description));
            out.push_str(&format!("       - Sample rows: [{}]\n", c.sample_rows.join(", ")));
        }
        if let Some(pk) = &t.primary_key {
            out.push_str(&format!("  - Primary key: {pk}\n"));
        }
    }
    if !schema.foreign_keys.is_empty() {
        out.push_str("- Foreign keys: \n");
        for fk in &schema.foreign_keys {
            out.push_str(&format!("  - ({}, {}): \n", fk.tables.0, fk.tables.1));
            for (a, b) in &fk.keys {
                out.push_str(&format!("    - ({a}, {b})\n"));
            }
        }
    }
    Ok(out)
}

/// JSON form of sample literals: quoted text becomes a string, numbers stay numbers.
mod literal_list {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use serde_json::Value as Json;

    pub fn serialize<S: Serializer>(items: &[String], s: S) -> Result<S::Ok, S::Error> {
        let json: Vec<Json> = items.iter().map(|l| to_json(l)).collect();
        json.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
        let raw = Vec::<Json>::deserialize(d)?;
        raw.into_iter()
            .map(|v| match v {
                Json::String(s) => Ok(format!("'{}'", s.replace('\'', "''"))),
                Json::Number(n) => Ok(n.to_string()),
                other => Err(D::Error::custom(format!("sample must be a string or number, got {other}"))),
            })
            .collect()
    }

    fn to_json(literal: &str) -> Json {
        if let Some(inner) = literal.strip_prefix('\'').and_then(|s| s.strip_suffix('\'')) {
            return Json::String(inner.replace("''", "'"));
        }
        if let Ok(i) = literal.parse::<i64>() {
            return Json::from(i);
        }
        match literal.parse::<f64>().ok().and_then(serde_json::Number::from_f64) {
            Some(n) => Json::Number(n),
            None => Json::String(literal.to_string()),
        }
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    /// Independent oracle: counts by linear scan, selects by repeated maximum.
    fn oracle(values: &[Option<i64>]) -> Vec<Value> {
        let mut distinct: Vec<i64> = Vec::new();
        for v in values.iter().flatten() {
            if !distinct.contains(v) {
                distinct.push(*v);
            }
        }
        let count = |x: i64| values.iter().filter(|v| **v == Some(x)).count();
        let take = if distinct.len() <= 10 { distinct.len() } else { 5 };
        let mut out = Vec::new();
        let mut pool = distinct;
        for _ in 0..take {
            let mut best = 0;
            for i in 1..pool.len() {
                let (ci, cb) = (count(pool[i]), count(pool[best]));
                if ci > cb || (ci == cb && pool[i] < pool[best]) {
                    best = i;
                }
            }
            out.push(Value::Integer(pool.remove(best)));
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn sampling_matches_brute_force(values in prop::collection::vec(prop::option::weighted(0.9, 0i64..25), 0..80)) {
            let db = Database::in_memory().unwrap();
            db.execute_batch("CREATE TABLE T (V INTEGER)").unwrap();
            for v in &values {
                let lit = v.map(|x| x.to_string()).unwrap_or_else(|| "NULL".into());
                db.execute_batch(&format!("INSERT INTO T VALUES ({lit})")).unwrap();
            }
            let s = introspect(&db).unwrap();
            let got = &s.tables[0].columns[0].sample_rows;
            let want: Vec<String> = oracle(&values).iter().map(Value::render_literal).collect();
            prop_assert_eq!(got, &want);
        }

        #[test]
        fn render_parse_round_trip(schema in arb_schema()) {
            let text = render_schema(&schema, None).unwrap();
            prop_assert_eq!(render_schema(&schema, None).unwrap(), text.clone());
            let back = parse_schema_text(&text).unwrap();
            prop_assert_eq!(back, schema);
        }
    }

    fn arb_literal() -> impl Strategy<Value = String> {
        prop_oneof![
            (-1000i64..1000).prop_map(|i| i.to_string()),
            "[a-zA-Z ,'\\]\\[-]{0,12}".prop_map(|s| format!("'{}'", s.replace('\'', "''"))),
        ]
    }

    fn arb_column() -> impl Strategy<Value = ColumnRepr> {
        (
            "[A-Z][A-Z0-9_]{0,7}",
            prop::sample::select(vec!["text", "integer", "date", "real", "varchar(20)"]),
            "([a-z]{1,6}( [a-z]{1,6}){0,4}\\.?)?",
            prop::collection::vec(arb_literal(), 0..=10),
        )
            .prop_map(|(name, ty, description, sample_rows)| ColumnRepr {
                name,
                col_type: ty.to_string(),
                description,
                sample_rows,
            })
    }

    fn arb_schema() -> impl Strategy<Value = SchemaRepresentation> {
        prop::collection::vec(
            ("[A-Z][A-Z_]{0,10}", prop::collection::vec(arb_column(), 1..5), any::<bool>()),
            0..4,
        )
        .prop_map(|raw| {
            let mut tables: Vec<TableRepr> = Vec::new();
            for (i, (name, cols, with_pk)) in raw.into_iter().enumerate() {
                let mut columns: Vec<ColumnRepr> = Vec::new();
                for c in cols {
                    if !columns.iter().any(|x| x.name == c.name) {
                        columns.push(c);
                    }
                }
                let primary_key = with_pk.then(|| columns[0].name.clone());
                tables.push(TableRepr { name: format!("{name}_{i}"), columns, primary_key });
            }
            let foreign_keys = tables
                .windows(2)
                .map(|w| ForeignKey {
                    tables: (w[0].name.clone(), w[1].name.clone()),
                    keys: vec![(w[0].columns[0].name.clone(), w[1].columns[0].name.clone())],
                })
                .collect();
            SchemaRepresentation { tables, foreign_keys }
        })
    }
}
