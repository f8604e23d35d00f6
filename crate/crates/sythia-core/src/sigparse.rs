//! Parsers for the textual micro-formats the pipelines exchange with models:
//! signature entries, `functions_list = [...]` assignments, rendered call
//! expressions, and structured payloads embedded in chatty replies.
//!
//! The grammars are documented in FORMATS.md. Quote handling accepts both
//! single and double quotes with backslash escapes.

use serde_json::{Map, Number, Value};
use thiserror::Error;

use crate::model::{FunctionSignature, ReturnKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("MALFORMED_SIGNATURE: {0}")]
    MalformedSignature(String),
    #[error("MALFORMED_SIGNATURE at entry {index}: {message}")]
    MalformedEntry { index: usize, message: String },
    #[error("NO_LIST_FOUND: no functions_list assignment in block")]
    NoListFound,
    #[error("MALFORMED_CALL: {0}")]
    MalformedCall(String),
    #[error("NO_PAYLOAD: no well-formed payload found in reply")]
    NoPayload,
    #[error("SHAPE_MISMATCH: expected {expected}, found {found}")]
    ShapeMismatch { expected: &'static str, found: String },
}

/// Non-fatal findings from list parsing.
#[derive(Debug, Clone, PartialEq)]
pub enum ParseWarning {
    DuplicateName(String),
    MissingDoc { entry: usize, name: String },
}

/// A rendered call expression: name plus ordered literal arguments. Bare
/// identifiers in argument position (e.g. `analyze_contract_text(text)`) are
/// kept as strings.
#[derive(Debug, Clone, PartialEq)]
pub struct CallExpr {
    pub name: String,
    pub args: Vec<Value>,
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Parse one functions-list entry of the form
/// `name(arg1, ...) -> return_kind # doc`. A missing doc segment parses to an
/// empty doc; [`parse_functions_list`] reports it as a warning.
pub fn parse_signature(entry: &str) -> Result<FunctionSignature, ParseError> {
    let entry = entry.trim();
    let open = entry
        .find('(')
        .ok_or_else(|| ParseError::MalformedSignature("missing '('".to_string()))?;
    let name = entry[..open].trim().to_string();
    if !is_ident(&name) {
        return Err(ParseError::MalformedSignature(format!(
            "invalid function name '{name}'"
        )));
    }
    let close = entry
        .find(')')
        .ok_or_else(|| ParseError::MalformedSignature("unbalanced parentheses".to_string()))?;
    if close < open {
        return Err(ParseError::MalformedSignature("unbalanced parentheses".to_string()));
    }
    let params_src = &entry[open + 1..close];
    let mut params = Vec::new();
    for raw in params_src.split(',') {
        let p = raw.trim();
        if p.is_empty() {
            continue;
        }
        if !is_ident(p) {
            return Err(ParseError::MalformedSignature(format!(
                "invalid parameter name '{p}'"
            )));
        }
        if params.iter().any(|q| q == p) {
            return Err(ParseError::MalformedSignature(format!(
                "duplicate parameter '{p}'"
            )));
        }
        params.push(p.to_string());
    }

    let rest = entry[close + 1..].trim_start();
    let rest = rest
        .strip_prefix("->")
        .ok_or_else(|| ParseError::MalformedSignature("missing '->'".to_string()))?
        .trim_start();

    let (kind_src, doc) = match rest.find('#') {
        Some(hash) => (rest[..hash].trim(), rest[hash + 1..].trim().to_string()),
        None => (rest.trim(), String::new()),
    };
    let return_kind = ReturnKind::parse(kind_src).ok_or_else(|| {
        ParseError::MalformedSignature(format!(
            "return kind '{kind_src}' is not one of str, bool, list, dict, None"
        ))
    })?;

    Ok(FunctionSignature {
        name,
        params,
        return_kind,
        doc,
    })
}

/// Canonical single-line rendering; `parse_signature(format_signature(s)) == s`.
pub fn format_signature(sig: &FunctionSignature) -> String {
    let params = sig.params.join(", ");
    if sig.doc.is_empty() {
        format!("{}({}) -> {}", sig.name, params, sig.return_kind)
    } else {
        format!("{}({}) -> {} # {}", sig.name, params, sig.return_kind, sig.doc)
    }
}

/// Render a full `functions_list = [...]` assignment block.
pub fn format_functions_list(sigs: &[FunctionSignature]) -> String {
    let mut out = String::from("functions_list = [\n");
    for sig in sigs {
        out.push_str("    '");
        out.push_str(&format_signature(sig).replace('\\', "\\\\").replace('\'', "\\'"));
        out.push_str("',\n");
    }
    out.push(']');
    out
}

/// Parse a `functions_list = [...]` assignment, tolerating surrounding prose.
/// Duplicate names and missing docs surface as warnings, never silently.
pub fn parse_functions_list(
    block: &str,
) -> Result<(Vec<FunctionSignature>, Vec<ParseWarning>), ParseError> {
    let anchor = block.find("functions_list").ok_or(ParseError::NoListFound)?;
    let after = &block[anchor + "functions_list".len()..];
    let eq = after.find('=').ok_or(ParseError::NoListFound)?;
    let after_eq = &after[eq + 1..];
    let open = after_eq.find('[').ok_or(ParseError::NoListFound)?;
    let list_src = balanced_span(&after_eq[open..], '[', ']').ok_or(ParseError::NoListFound)?;

    let mut lexer = Lexer::new(&list_src[1..list_src.len() - 1]);
    let mut sigs: Vec<FunctionSignature> = Vec::new();
    let mut warnings = Vec::new();
    loop {
        lexer.skip_ws();
        if lexer.at_end() {
            break;
        }
        let entry = lexer
            .string_literal()
            .map_err(|e| ParseError::MalformedEntry {
                index: sigs.len(),
                message: e,
            })?;
        let sig = parse_signature(&entry).map_err(|e| ParseError::MalformedEntry {
            index: sigs.len(),
            message: e.to_string(),
        })?;
        if sig.doc.is_empty() {
            warnings.push(ParseWarning::MissingDoc {
                entry: sigs.len(),
                name: sig.name.clone(),
            });
        }
        if sigs.iter().any(|s| s.name == sig.name) {
            warnings.push(ParseWarning::DuplicateName(sig.name.clone()));
        }
        sigs.push(sig);
        lexer.skip_ws();
        if !lexer.consume(',') {
            break;
        }
    }
    Ok((sigs, warnings))
}

/// Parse a rendered call such as `verify_signatory_authority('x', '>$500k')`.
/// Arguments are literals (text, number, boolean, null, nested list/object);
/// trailing commas are accepted.
pub fn parse_call(text: &str) -> Result<CallExpr, ParseError> {
    let text = text.trim();
    let open = text
        .find('(')
        .ok_or_else(|| ParseError::MalformedCall("missing '('".to_string()))?;
    let name = text[..open].trim().to_string();
    if !is_ident(&name) {
        return Err(ParseError::MalformedCall(format!("invalid call name '{name}'")));
    }
    if !text.ends_with(')') {
        return Err(ParseError::MalformedCall("missing trailing ')'".to_string()));
    }
    let inner = &text[open + 1..text.len() - 1];
    let mut lexer = Lexer::new(inner);
    let mut args = Vec::new();
    loop {
        lexer.skip_ws();
        if lexer.at_end() {
            break;
        }
        let value = lexer.value().map_err(ParseError::MalformedCall)?;
        args.push(value);
        lexer.skip_ws();
        if !lexer.consume(',') {
            break;
        }
    }
    lexer.skip_ws();
    if !lexer.at_end() {
        return Err(ParseError::MalformedCall(format!(
            "trailing input after arguments: '{}'",
            lexer.rest()
        )));
    }
    Ok(CallExpr { name, args })
}

/// Expected payload shape for [`extract_structured`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Object,
    Array,
    /// An array whose elements are all strings.
    ListOfText,
}

/// A payload pulled out of a reply, with the exact source span it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Extracted {
    pub value: Value,
    pub raw: String,
}

/// Extract the first maximal well-formed payload of the requested shape from
/// a model reply, stripping code fences and surrounding prose. Falls back to
/// the Python-style literal grammar (single quotes, True/False/None) when
/// strict JSON parsing fails. Idempotent on already-clean payloads.
pub fn extract_structured(reply: &str, shape: Shape) -> Result<Extracted, ParseError> {
    let mut candidates: Vec<&str> = Vec::new();
    // fenced blocks first: the prompt contract says "no formatting" but
    // models fence anyway
    let mut rest = reply;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        if let Some(end) = after[body_start..].find("```") {
            candidates.push(after[body_start..body_start + end].trim());
            rest = &after[body_start + end + 3..];
        } else {
            break;
        }
    }
    candidates.push(reply);

    let (open, close) = match shape {
        Shape::Object => ('{', '}'),
        Shape::Array | Shape::ListOfText => ('[', ']'),
    };

    let mut found_wrong_shape: Option<String> = None;
    for candidate in candidates {
        let mut offset = 0;
        while let Some(pos) = candidate[offset..].find(open) {
            let span_start = offset + pos;
            match balanced_span(&candidate[span_start..], open, close) {
                Some(span) => {
                    if let Some(value) = parse_lenient(span) {
                        if shape == Shape::ListOfText {
                            let ok = value
                                .as_array()
                                .map(|a| a.iter().all(|v| v.is_string()))
                                .unwrap_or(false);
                            if !ok {
                                found_wrong_shape = Some(kind_name(&value).to_string());
                                offset = span_start + span.len();
                                continue;
                            }
                        }
                        return Ok(Extracted {
                            value,
                            raw: span.to_string(),
                        });
                    }
                    offset = span_start + 1;
                }
                // unbalanced opener: retry from the next one
                None => offset = span_start + 1,
            }
        }
    }

    match found_wrong_shape {
        Some(found) => Err(ParseError::ShapeMismatch {
            expected: "array of strings",
            found,
        }),
        None => Err(ParseError::NoPayload),
    }
}

fn kind_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// JSON first, then the Python-flavored literal grammar.
fn parse_lenient(span: &str) -> Option<Value> {
    if let Ok(v) = serde_json::from_str::<Value>(span) {
        return Some(v);
    }
    let mut lexer = Lexer::new(span);
    lexer.skip_ws();
    let value = lexer.value().ok()?;
    lexer.skip_ws();
    lexer.at_end().then_some(value)
}

/// Span of balanced delimiters starting at the first byte, honoring quoted
/// strings so brackets inside text don't count.
fn balanced_span(src: &str, open: char, close: char) -> Option<&str> {
    let bytes = src.as_bytes();
    debug_assert_eq!(bytes.first().copied(), Some(open as u8));
    let mut depth = 0usize;
    let mut i = 0usize;
    while i < bytes.len() {
        match bytes[i] as char {
            c if c == open => depth += 1,
            c if c == close => {
                depth -= 1;
                if depth == 0 {
                    return Some(&src[..=i]);
                }
            }
            '\'' | '"' => {
                let quote = bytes[i];
                i += 1;
                while i < bytes.len() {
                    if bytes[i] == b'\\' {
                        i += 1;
                    } else if bytes[i] == quote {
                        break;
                    }
                    i += 1;
                }
            }
            _ => {}
        }
        i += 1;
    }
    None
}

/// Literal-value lexer shared by calls, list literals, and lenient payload
/// parsing. Accepts single- or double-quoted strings with backslash escapes,
/// numbers, true/false/True/False, null/None, nested lists and objects, and
/// bare identifiers (kept as strings).
struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer { src, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn at_end(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn consume(&mut self, expected: char) -> bool {
        if self.peek() == Some(expected) {
            self.pos += expected.len_utf8();
            true
        } else {
            false
        }
    }

    fn string_literal(&mut self) -> Result<String, String> {
        let quote = match self.peek() {
            Some(q @ ('\'' | '"')) => q,
            other => return Err(format!("expected string literal, found {other:?}")),
        };
        self.pos += 1;
        let mut out = String::new();
        while let Some(c) = self.peek() {
            self.pos += c.len_utf8();
            if c == '\\' {
                match self.peek() {
                    Some(escaped) => {
                        self.pos += escaped.len_utf8();
                        out.push(match escaped {
                            'n' => '\n',
                            't' => '\t',
                            'r' => '\r',
                            other => other,
                        });
                    }
                    None => return Err("dangling escape at end of string".to_string()),
                }
            } else if c == quote {
                return Ok(out);
            } else {
                out.push(c);
            }
        }
        Err("unterminated string literal".to_string())
    }

    fn value(&mut self) -> Result<Value, String> {
        self.skip_ws();
        match self.peek() {
            Some('\'' | '"') => self.string_literal().map(Value::String),
            Some('[') => {
                self.pos += 1;
                let mut items = Vec::new();
                loop {
                    self.skip_ws();
                    if self.consume(']') {
                        return Ok(Value::Array(items));
                    }
                    items.push(self.value()?);
                    self.skip_ws();
                    if !self.consume(',') {
                        self.skip_ws();
                        if self.consume(']') {
                            return Ok(Value::Array(items));
                        }
                        return Err("expected ',' or ']' in list".to_string());
                    }
                }
            }
            Some('{') => {
                self.pos += 1;
                let mut map = Map::new();
                loop {
                    self.skip_ws();
                    if self.consume('}') {
                        return Ok(Value::Object(map));
                    }
                    let key = self.string_literal()?;
                    self.skip_ws();
                    if !self.consume(':') {
                        return Err("expected ':' after object key".to_string());
                    }
                    let value = self.value()?;
                    map.insert(key, value);
                    self.skip_ws();
                    if !self.consume(',') {
                        self.skip_ws();
                        if self.consume('}') {
                            return Ok(Value::Object(map));
                        }
                        return Err("expected ',' or '}' in object".to_string());
                    }
                }
            }
            Some(c) if c == '-' || c.is_ascii_digit() => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == '_' => {
                let word = self.ident();
                Ok(match word.as_str() {
                    "true" | "True" => Value::Bool(true),
                    "false" | "False" => Value::Bool(false),
                    "null" | "None" => Value::Null,
                    _ => Value::String(word),
                })
            }
            other => Err(format!("unexpected input {other:?}")),
        }
    }

    fn ident(&mut self) -> String {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || c == '_' {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
        self.src[start..self.pos].to_string()
    }

    fn number(&mut self) -> Result<Value, String> {
        let start = self.pos;
        if self.peek() == Some('-') {
            self.pos += 1;
        }
        let mut is_float = false;
        while let Some(c) = self.peek() {
            if c.is_ascii_digit() {
                self.pos += 1;
            } else if c == '.' || c == 'e' || c == 'E' || c == '+' || c == '-' {
                // exponent sign only valid mid-number; the float parse below
                // rejects malformed sequences
                if c == '-' || c == '+' {
                    let prev = self.src[start..self.pos].chars().last();
                    if !matches!(prev, Some('e' | 'E')) {
                        break;
                    }
                }
                is_float = is_float || c == '.' || c == 'e' || c == 'E';
                self.pos += 1;
            } else {
                break;
            }
        }
        let text = &self.src[start..self.pos];
        if is_float {
            let f: f64 = text.parse().map_err(|_| format!("bad number '{text}'"))?;
            Number::from_f64(f)
                .map(Value::Number)
                .ok_or_else(|| format!("non-finite number '{text}'"))
        } else {
            let n: i64 = text.parse().map_err(|_| format!("bad number '{text}'"))?;
            Ok(Value::Number(n.into()))
        }
    }
}
