//! A small XML reader for annotation files.
//!
//! Handles elements, attributes, character data, the five predefined
//! entities, numeric character references, comments, CDATA sections and a
//! leading prolog or doctype. Namespaces and DTD processing are out of
//! scope. Errors carry the 1-based line and column where reading stopped.

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Element {
    pub name: String,
    pub attributes: Vec<(String, String)>,
    pub children: Vec<Element>,
    /// Concatenated character data directly inside this element, trimmed.
    pub text: String,
    pub line: usize,
    pub column: usize,
}

impl Element {
    pub fn child(&self, name: &str) -> Option<&Element> {
        self.children.iter().find(|c| c.name == name)
    }

    pub fn children_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Element> + 'a {
        self.children.iter().filter(move |c| c.name == name)
    }
}

/// Parses a document and returns its root element.
pub fn parse(text: &str) -> Result<Element> {
    let mut r = Reader {
        src: text.as_bytes(),
        pos: 0,
        line: 1,
        column: 1,
    };
    r.skip_misc()?;
    if r.at_end() {
        return Err(r.error("document has no root element"));
    }
    let root = r.element()?;
    r.skip_misc()?;
    if !r.at_end() {
        return Err(r.error("content after the root element"));
    }
    Ok(root)
}

/// Escapes character data for writing.
pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for ch in text.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

struct Reader<'a> {
    src: &'a [u8],
    pos: usize,
    line: usize,
    column: usize,
}

impl Reader<'_> {
    fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            column: self.column,
            message: message.into(),
        }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn starts_with(&self, s: &str) -> bool {
        self.src[self.pos..].starts_with(s.as_bytes())
    }

    fn bump(&mut self) -> Option<u8> {
        let b = self.peek()?;
        self.pos += 1;
        if b == b'\n' {
            self.line += 1;
            self.column = 1;
        } else if b & 0xC0 != 0x80 {
            // Count characters, not UTF-8 continuation bytes.
            self.column += 1;
        }
        Some(b)
    }

    fn advance(&mut self, n: usize) {
        for _ in 0..n {
            self.bump();
        }
    }

    fn expect(&mut self, s: &str) -> Result<()> {
        if self.starts_with(s) {
            self.advance(s.len());
            Ok(())
        } else {
            Err(self.error(format!("expected `{s}`")))
        }
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\t' | b'\r' | b'\n')) {
            self.bump();
        }
    }

    /// Skips everything up to and including `end`.
    fn skip_past(&mut self, end: &str, what: &str) -> Result<()> {
        while !self.at_end() {
            if self.starts_with(end) {
                self.advance(end.len());
                return Ok(());
            }
            self.bump();
        }
        Err(self.error(format!("unterminated {what}")))
    }

    /// Whitespace, comments, processing instructions and doctype.
    fn skip_misc(&mut self) -> Result<()> {
        loop {
            self.skip_ws();
            if self.starts_with("<?") {
                self.skip_past("?>", "processing instruction")?;
            } else if self.starts_with("<!--") {
                self.skip_past("-->", "comment")?;
            } else if self.starts_with("<!DOCTYPE") {
                self.skip_past(">", "doctype")?;
            } else {
                return Ok(());
            }
        }
    }

    fn name(&mut self) -> Result<String> {
        let start = self.pos;
        while let Some(b) = self.peek() {
            let ok = b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.' | b':') || b >= 0x80;
            if !ok {
                break;
            }
            self.bump();
        }
        if self.pos == start {
            return Err(self.error("expected a name"));
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).map_err(|_| self.error("invalid UTF-8"))?;
        if name.as_bytes()[0].is_ascii_digit() || matches!(name.as_bytes()[0], b'-' | b'.') {
            return Err(self.error(format!("invalid name `{name}`")));
        }
        Ok(name.to_string())
    }

    fn element(&mut self) -> Result<Element> {
        let (line, column) = (self.line, self.column);
        self.expect("<")?;
        let name = self.name()?;
        let mut el = Element {
            name,
            attributes: Vec::new(),
            children: Vec::new(),
            text: String::new(),
            line,
            column,
        };
        loop {
            self.skip_ws();
            if self.starts_with("/>") {
                self.advance(2);
                return Ok(el);
            }
            if self.starts_with(">") {
                self.advance(1);
                break;
            }
            let key = self.name()?;
            self.skip_ws();
            self.expect("=")?;
            self.skip_ws();
            let quote = match self.peek() {
                Some(q @ (b'"' | b'\'')) => q,
                _ => return Err(self.error("expected a quoted attribute value")),
            };
            self.bump();
            let value = self.chars_until(quote)?;
            self.bump();
            if el.attributes.iter().any(|(k, _)| *k == key) {
                return Err(self.error(format!("duplicate attribute `{key}`")));
            }
            el.attributes.push((key, value));
        }

        let mut text = String::new();
        loop {
            if self.at_end() {
                return Err(self.error(format!("unclosed element `{}`", el.name)));
            }
            if self.starts_with("</") {
                let (line, column) = (self.line, self.column);
                self.advance(2);
                let close = self.name()?;
                if close != el.name {
                    return Err(Error::Parse {
                        line,
                        column,
                        message: format!("closing tag `{close}` does not match `{}`", el.name),
                    });
                }
                self.skip_ws();
                self.expect(">")?;
                el.text = text.trim().to_string();
                return Ok(el);
            }
            if self.starts_with("<!--") {
                self.skip_past("-->", "comment")?;
            } else if self.starts_with("<![CDATA[") {
                self.advance(9);
                let start = self.pos;
                self.skip_past("]]>", "CDATA section")?;
                let raw = &self.src[start..self.pos - 3];
                text.push_str(std::str::from_utf8(raw).map_err(|_| self.error("invalid UTF-8"))?);
            } else if self.starts_with("<?") {
                self.skip_past("?>", "processing instruction")?;
            } else if self.starts_with("<") {
                el.children.push(self.element()?);
            } else {
                text.push_str(&self.chars_until(b'<')?);
            }
        }
    }

    /// Character data up to (not including) `stop`, with references resolved.
    fn chars_until(&mut self, stop: u8) -> Result<String> {
        let mut out = Vec::new();
        while let Some(b) = self.peek() {
            if b == stop {
                return String::from_utf8(out).map_err(|_| self.error("invalid UTF-8"));
            }
            match b {
                b'&' => {
                    let ch = self.reference()?;
                    let mut buf = [0u8; 4];
                    out.extend_from_slice(ch.encode_utf8(&mut buf).as_bytes());
                }
                b'<' => return Err(self.error("`<` inside an attribute value")),
                _ => {
                    out.push(b);
                    self.bump();
                }
            }
        }
        if stop == b'<' {
            String::from_utf8(out).map_err(|_| self.error("invalid UTF-8"))
        } else {
            Err(self.error("unterminated attribute value"))
        }
    }

    fn reference(&mut self) -> Result<char> {
        let err = self.error("malformed entity reference");
        self.bump();
        let start = self.pos;
        while let Some(b) = self.peek() {
            if b == b';' {
                break;
            }
            if self.pos - start > 10 {
                return Err(err);
            }
            self.bump();
        }
        if self.peek() != Some(b';') {
            return Err(err);
        }
        let body = std::str::from_utf8(&self.src[start..self.pos]).map_err(|_| self.error("invalid UTF-8"))?;
        let ch = match body {
            "amp" => Some('&'),
            "lt" => Some('<'),
            "gt" => Some('>'),
            "quot" => Some('"'),
            "apos" => Some('\''),
            _ => {
                let code = if let Some(hex) = body.strip_prefix("#x") {
                    u32::from_str_radix(hex, 16).ok()
                } else if let Some(dec) = body.strip_prefix('#') {
                    dec.parse().ok()
                } else {
                    None
                };
                code.and_then(char::from_u32)
            }
        };
        let ch = ch.ok_or(err)?;
        self.bump();
        Ok(ch)
    }
}
