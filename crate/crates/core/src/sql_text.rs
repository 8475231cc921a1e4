//! Lightweight SQL lexing.
//!
//! This is not a parser. It knows enough about SQLite's lexical rules
//! (string literals, quoted identifiers, comments) to split statements,
//! normalize query text for comparison and pick out identifiers.

use std::collections::{BTreeSet, HashMap};

use crate::bench_data::DbSchema;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Token {
    /// Bare word: keyword or unquoted identifier.
    Word(String),
    /// `"x"`, `` `x` `` or `[x]`.
    QuotedIdent(String),
    /// `'text'` with the quotes removed and `''` unescaped.
    Str(String),
    Number(String),
    Punct(char),
}

impl Token {
    fn ident(&self) -> Option<&str> {
        match self {
            Token::Word(w) | Token::QuotedIdent(w) => Some(w),
            _ => None,
        }
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self, Token::Word(w) if w.eq_ignore_ascii_case(kw))
    }
}

pub fn tokenize(sql: &str) -> Vec<Token> {
    let chars: Vec<char> = sql.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '-' && chars.get(i + 1) == Some(&'-') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
        } else if c == '/' && chars.get(i + 1) == Some(&'*') {
            i += 2;
            while i < chars.len() && !(chars[i] == '*' && chars.get(i + 1) == Some(&'/')) {
                i += 1;
            }
            i = (i + 2).min(chars.len());
        } else if c == '\'' || c == '"' || c == '`' {
            let (body, next) = read_quoted(&chars, i, c, c);
            tokens.push(if c == '\'' {
                Token::Str(body)
            } else {
                Token::QuotedIdent(body)
            });
            i = next;
        } else if c == '[' {
            let (body, next) = read_quoted(&chars, i, '[', ']');
            tokens.push(Token::QuotedIdent(body));
            i = next;
        } else if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '.') {
                i += 1;
            }
            tokens.push(Token::Number(chars[start..i].iter().collect()));
        } else if c.is_alphanumeric() || c == '_' || c == '$' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '$') {
                i += 1;
            }
            tokens.push(Token::Word(chars[start..i].iter().collect()));
        } else {
            tokens.push(Token::Punct(c));
            i += 1;
        }
    }
    tokens
}

fn read_quoted(chars: &[char], start: usize, open: char, close: char) -> (String, usize) {
    let mut body = String::new();
    let mut i = start + 1;
    while i < chars.len() {
        if chars[i] == close {
            // doubled closing quote is an escape, except for brackets
            if open == close && chars.get(i + 1) == Some(&close) {
                body.push(close);
                i += 2;
                continue;
            }
            return (body, i + 1);
        }
        body.push(chars[i]);
        i += 1;
    }
    (body, i)
}

/// Splits on top-level `;`, ignoring separators inside literals and
/// comments. Empty statements are dropped.
pub fn split_statements(sql: &str) -> Vec<String> {
    let chars: Vec<char> = sql.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    let push = |from: usize, to: usize, out: &mut Vec<String>| {
        let stmt: String = chars[from..to].iter().collect();
        if !tokenize(&stmt).is_empty() {
            out.push(stmt.trim().to_string());
        }
    };
    while i < chars.len() {
        let c = chars[i];
        match c {
            '\'' | '"' | '`' => i = read_quoted(&chars, i, c, c).1,
            '[' => i = read_quoted(&chars, i, '[', ']').1,
            '-' if chars.get(i + 1) == Some(&'-') => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            '/' if chars.get(i + 1) == Some(&'*') => {
                i += 2;
                while i < chars.len() && !(chars[i] == '*' && chars.get(i + 1) == Some(&'/')) {
                    i += 1;
                }
                i = (i + 2).min(chars.len());
            }
            ';' => {
                push(start, i, &mut out);
                i += 1;
                start = i;
            }
            _ => i += 1,
        }
    }
    push(start, chars.len(), &mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SqlShapeError {
    Empty,
    MultipleStatements(usize),
}

/// Trims the text and strips trailing semicolons; rejects empty text and
/// anything holding more than one statement.
pub fn normalize_single_statement(sql: &str) -> Result<String, SqlShapeError> {
    let statements = split_statements(sql);
    match statements.len() {
        0 => Err(SqlShapeError::Empty),
        1 => Ok(statements.into_iter().next().expect("one statement")),
        n => Err(SqlShapeError::MultipleStatements(n)),
    }
}

/// Canonical text for "same query" comparisons: tokens joined by single
/// spaces, identifiers and keywords lowercased, string literals verbatim,
/// trailing semicolons dropped.
pub fn match_key(sql: &str) -> String {
    let mut tokens = tokenize(sql);
    while tokens.last() == Some(&Token::Punct(';')) {
        tokens.pop();
    }
    let parts: Vec<String> = tokens
        .iter()
        .map(|t| match t {
            Token::Word(w) | Token::QuotedIdent(w) => w.to_lowercase(),
            Token::Str(s) => format!("'{}'", s.replace('\'', "''")),
            Token::Number(n) => n.to_lowercase(),
            Token::Punct(c) => c.to_string(),
        })
        .collect();
    parts.join(" ")
}

/// First keyword of the statement, uppercased.
pub fn leading_keyword(sql: &str) -> Option<String> {
    tokenize(sql).into_iter().find_map(|t| match t {
        Token::Word(w) => Some(w.to_uppercase()),
        Token::Punct('(') => None,
        _ => Some(String::new()),
    })
}

const NOT_ALIAS: &[&str] = &[
    "WHERE", "GROUP", "ORDER", "LIMIT", "HAVING", "UNION", "INTERSECT", "EXCEPT", "ON", "USING",
    "JOIN", "INNER", "LEFT", "RIGHT", "FULL", "OUTER", "CROSS", "NATURAL", "AS", "WINDOW", "SELECT",
    "SET", "VALUES", "INDEXED", "NOT",
];

/// Gold identifiers referenced by a query: table names and `table.column`
/// pairs, both in the schema's own spelling.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Identifiers {
    pub tables: BTreeSet<String>,
    pub columns: BTreeSet<String>,
}

/// Best-effort identifier extraction against a schema.
///
/// Tables are taken from FROM/JOIN positions. Aliases introduced with or
/// without `AS` are resolved for qualified column references. Unqualified
/// column tokens are attributed to every referenced table that declares a
/// column of that name. Anything that does not resolve is ignored.
pub fn extract_identifiers(sql: &str, schema: &DbSchema) -> Identifiers {
    let tokens = tokenize(sql);
    let mut ids = Identifiers::default();
    // lowercase alias or table name -> canonical table name
    let mut qualifiers: HashMap<String, String> = HashMap::new();

    let mut i = 0;
    while i < tokens.len() {
        let tok = &tokens[i];
        if tok.is_keyword("FROM") || tok.is_keyword("JOIN") {
            i += 1;
            while let Some(name) = tokens.get(i).and_then(Token::ident) {
                let Some(table) = schema.table(name) else {
                    break;
                };
                let canonical = table.name.clone();
                ids.tables.insert(canonical.clone());
                qualifiers.insert(canonical.to_lowercase(), canonical.clone());
                i += 1;
                if tokens.get(i).is_some_and(|t| t.is_keyword("AS")) {
                    i += 1;
                }
                if let Some(alias) = tokens.get(i).and_then(Token::ident) {
                    let is_kw = matches!(&tokens[i], Token::Word(w) if NOT_ALIAS.iter().any(|k| w.eq_ignore_ascii_case(k)));
                    if !is_kw {
                        qualifiers.insert(alias.to_lowercase(), canonical.clone());
                        i += 1;
                    }
                }
                if tokens.get(i) == Some(&Token::Punct(',')) {
                    i += 1;
                    continue;
                }
                break;
            }
            continue;
        }
        i += 1;
    }

    let referenced: Vec<&crate::bench_data::TableDef> =
        ids.tables.iter().filter_map(|t| schema.table(t)).collect();

    let mut i = 0;
    while i < tokens.len() {
        let Some(name) = tokens[i].ident() else {
            i += 1;
            continue;
        };
        let qualified = tokens.get(i + 1) == Some(&Token::Punct('.'))
            && tokens.get(i + 2).and_then(Token::ident).is_some();
        if qualified {
            let column = tokens[i + 2].ident().expect("checked");
            let table = qualifiers
                .get(&name.to_lowercase())
                .and_then(|t| schema.table(t));
            if let Some(table) = table {
                if let Some(col) = table.column(column) {
                    ids.columns.insert(format!("{}.{}", table.name, col.name));
                }
            }
            i += 3;
            continue;
        }
        let preceded_by_dot = i > 0 && tokens[i - 1] == Token::Punct('.');
        if !preceded_by_dot {
            for table in &referenced {
                if let Some(col) = table.column(name) {
                    ids.columns.insert(format!("{}.{}", table.name, col.name));
                }
            }
        }
        i += 1;
    }
    ids
}
