//! Shared helpers for integration tests.

#![allow(dead_code)]

use regex::Regex;

/// A pattern built straight from a raw template: literal text must match
/// byte for byte, each `{slot}` becomes a capture. Consecutive lines that
/// start with one of `block_prefixes` collapse into a single capture.
pub struct Fidelity {
    re: Regex,
    /// Slot name per capture group, in order.
    pub captures: Vec<String>,
}

impl Fidelity {
    pub fn new(template: &str, slots: &[&str], block_prefix: Option<&str>) -> Self {
        let mut pattern = String::from("^");
        let mut captures = Vec::new();
        let mut in_block = false;
        for line in template.split_inclusive('\n') {
            if block_prefix.is_some_and(|p| line.starts_with(p)) {
                if !in_block {
                    pattern.push_str(r"((?s:.*?))\n");
                    captures.push("<block>".to_string());
                    in_block = true;
                }
                continue;
            }
            in_block = false;
            let mut rest = line;
            while let Some(open) = rest.find('{') {
                let close = rest[open..].find('}').map(|c| open + c);
                let name = close.map(|c| &rest[open + 1..c]);
                match name {
                    Some(n) if slots.contains(&n) => {
                        pattern.push_str(&regex::escape(&rest[..open]));
                        pattern.push_str("((?s:.*?))");
                        captures.push(n.to_string());
                        rest = &rest[close.unwrap() + 1..];
                    }
                    _ => {
                        pattern.push_str(&regex::escape(&rest[..=open]));
                        rest = &rest[open + 1..];
                    }
                }
            }
            pattern.push_str(&regex::escape(rest));
        }
        pattern.push('$');
        Self {
            re: Regex::new(&pattern).expect("escaped pattern"),
            captures,
        }
    }

    /// Slot fills in capture order, or `None` when literal text differs.
    pub fn fills(&self, rendered: &str) -> Option<Vec<(String, String)>> {
        let c = self.re.captures(rendered)?;
        Some(
            self.captures
                .iter()
                .enumerate()
                .map(|(i, n)| (n.clone(), c[i + 1].to_string()))
                .collect(),
        )
    }
}
