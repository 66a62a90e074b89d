//! SQL parsing and canonical text normalization.
//!
//! Every SQL string that leaves this crate (sketch source, bundle clause,
//! stored example) is in normalized form: keywords and unquoted identifiers
//! uppercased, whitespace collapsed to single spaces, no trailing semicolon.
//! Quoted literals and quoted identifiers are left byte-for-byte intact.

use sqlparser::ast::{Query, Statement};
use sqlparser::dialect::{Dialect, GenericDialect, SQLiteDialect};
use sqlparser::parser::Parser;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SqlError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unsupported statement: {0}")]
    UnsupportedStatement(String),
    #[error("sketch cannot be recomposed: {0}")]
    IrrecomposableSketch(String),
}

/// SQL dialect accepted by the parser. Only the embedded engine's dialect is
/// required; `Generic` is kept for callers that feed ANSI text.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SqlDialect {
    #[default]
    Sqlite,
    Generic,
}

impl SqlDialect {
    fn dialect(self) -> Box<dyn Dialect> {
        match self {
            SqlDialect::Sqlite => Box::new(SQLiteDialect {}),
            SqlDialect::Generic => Box::new(GenericDialect {}),
        }
    }
}

/// Parse `sql` as exactly one query statement (SELECT, optionally with WITH).
pub fn parse_query(sql: &str) -> Result<Query, SqlError> {
    parse_query_with(sql, SqlDialect::default())
}

pub fn parse_query_with(sql: &str, dialect: SqlDialect) -> Result<Query, SqlError> {
    let dialect = dialect.dialect();
    let mut statements =
        Parser::parse_sql(dialect.as_ref(), sql).map_err(|e| SqlError::Parse(e.to_string()))?;
    match statements.len() {
        0 => Err(SqlError::Parse("empty input".into())),
        1 => match statements.pop().unwrap() {
            Statement::Query(q) => Ok(*q),
            other => Err(SqlError::UnsupportedStatement(first_word(&other.to_string()))),
        },
        n => Err(SqlError::UnsupportedStatement(format!(
            "expected a single statement, found {n}"
        ))),
    }
}

fn first_word(s: &str) -> String {
    s.split_whitespace().next().unwrap_or_default().to_uppercase()
}

/// Normalize a query's text without changing its meaning.
pub fn normalize(sql: &str) -> Result<String, SqlError> {
    let query = parse_query(sql)?;
    Ok(normalize_text(&query.to_string()))
}

/// Normalize a rendered fragment (uppercase outside quotes, collapse
/// whitespace, strip terminal semicolons). Does not parse.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.trim().chars().peekable();
    let mut pending_space = false;
    while let Some(c) = chars.next() {
        match c {
            '\'' | '"' | '`' | '[' => {
                if pending_space && !out.is_empty() {
                    out.push(' ');
                }
                pending_space = false;
                let close = if c == '[' { ']' } else { c };
                out.push(c);
                // Quoted region: copy verbatim; a doubled closing quote is an escape.
                while let Some(q) = chars.next() {
                    out.push(q);
                    if q == close {
                        if close != ']' && chars.peek() == Some(&close) {
                            out.push(chars.next().unwrap());
                            continue;
                        }
                        break;
                    }
                }
            }
            c if c.is_whitespace() => pending_space = true,
            c => {
                if pending_space && !out.is_empty() {
                    out.push(' ');
                }
                pending_space = false;
                out.push(c.to_ascii_uppercase());
            }
        }
    }
    while out.ends_with(';') || out.ends_with(' ') {
        out.pop();
    }
    out
}

/// Remove markdown code fences and trailing semicolons from model output.
pub fn strip_model_artifacts(text: &str) -> String {
    let trimmed = text.trim();
    let body = if let Some(start) = trimmed.find("```") {
        let after = &trimmed[start + 3..];
        // skip an info string such as `sql`
        let after = match after.find('\n') {
            Some(nl) if after[..nl].trim().chars().all(|c| c.is_ascii_alphanumeric()) => {
                &after[nl + 1..]
            }
            _ => after
                .trim_start_matches(|c: char| c.is_ascii_alphabetic())
                .trim_start(),
        };
        match after.find("```") {
            Some(end) => &after[..end],
            None => after,
        }
    } else {
        trimmed
    };
    let mut s = body.trim().to_string();
    while s.ends_with(';') {
        s.pop();
        s.truncate(s.trim_end().len());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_case_and_whitespace_outside_literals() {
        let n = normalize("select  a,\n b from t where c = 'Mixed  Case';").unwrap();
        assert_eq!(n, "SELECT A, B FROM T WHERE C = 'Mixed  Case'");
    }

    #[test]
    fn quoted_identifiers_and_escapes_survive() {
        let n = normalize_text("select \"Odd Name\", 'it''s' from t");
        assert_eq!(n, "SELECT \"Odd Name\", 'it''s' FROM T");
    }

    #[test]
    fn rejects_non_select() {
        assert!(matches!(
            parse_query("INSERT INTO t VALUES (1)"),
            Err(SqlError::UnsupportedStatement(_))
        ));
        assert!(matches!(parse_query("SELEC 1"), Err(SqlError::Parse(_))));
        assert!(matches!(
            parse_query("SELECT 1; SELECT 2"),
            Err(SqlError::UnsupportedStatement(_))
        ));
    }

    #[test]
    fn strips_fences() {
        assert_eq!(strip_model_artifacts("```sql SELECT 1```"), "SELECT 1");
        assert_eq!(strip_model_artifacts("```sql\nSELECT 1;\n```"), "SELECT 1");
        assert_eq!(strip_model_artifacts("SELECT 2 ;"), "SELECT 2");
    }
}
