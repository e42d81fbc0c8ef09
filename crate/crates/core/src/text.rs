//! Text utilities shared by the pipeline: identifier tokenization, keyword
//! patterns, word tokenization, and parsing of fielded model replies.

use std::sync::OnceLock;

use regex::Regex;

/// Splits a formal identifier into tokens at dots, underscores, and
/// lower-to-upper case transitions. `fderivWithin` gives `fderiv`, `Within`;
/// `Filter.Tendsto` gives `Filter`, `Tendsto`.
pub fn identifier_tokens(identifier: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    let mut prev_lower = false;
    for ch in identifier.chars() {
        if ch == '.' || ch == '_' {
            if !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
            prev_lower = false;
            continue;
        }
        if ch.is_uppercase() && prev_lower && !cur.is_empty() {
            tokens.push(std::mem::take(&mut cur));
        }
        prev_lower = ch.is_lowercase();
        cur.push(ch);
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

const TOKEN_SEP: char = '\u{1f}';

/// Tokenized form of an identifier that keyword patterns run against.
pub fn token_haystack(identifier: &str) -> String {
    let mut s = String::with_capacity(identifier.len() + 2);
    s.push(TOKEN_SEP);
    for t in identifier_tokens(identifier) {
        s.push_str(&t);
        s.push(TOKEN_SEP);
    }
    s
}

/// Case-insensitive whole-token pattern for a search keyword. The keyword
/// matches an identifier when it equals one token, or the concatenation of
/// a contiguous run of tokens. Separators inside the keyword (dots,
/// underscores, whitespace) are ignored, so `Filter.Tendsto` and
/// `filtertendsto` match the same identifiers; `Ring` never matches
/// `Ordering`.
#[derive(Debug, Clone)]
pub struct KeywordPattern {
    pub keyword: String,
    regex: Regex,
}

impl KeywordPattern {
    pub fn compile(keyword: &str) -> Option<Self> {
        let core: Vec<char> = keyword
            .chars()
            .filter(|c| !(c.is_whitespace() || matches!(c, '.' | '_' | '`' | '"' | '\'')))
            .collect();
        if core.is_empty() {
            return None;
        }
        let sep = regex::escape(&TOKEN_SEP.to_string());
        let mut pat = format!("(?i){sep}");
        for (i, c) in core.iter().enumerate() {
            if i > 0 {
                pat.push_str(&sep);
                pat.push('?');
            }
            pat.push_str(&regex::escape(&c.to_string()));
        }
        pat.push_str(&sep);
        let regex = Regex::new(&pat).ok()?;
        Some(KeywordPattern {
            keyword: keyword.to_string(),
            regex,
        })
    }

    pub fn matches_haystack(&self, haystack: &str) -> bool {
        self.regex.is_match(haystack)
    }

    pub fn matches(&self, identifier: &str) -> bool {
        self.matches_haystack(&token_haystack(identifier))
    }
}

/// Lowercased alphanumeric runs; everything else separates words.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Whether a definition is referenced in formal code, by its full dotted
/// name or by its final name segment, as a whole identifier.
pub fn appears_in_code(identifier: &str, code: &str) -> bool {
    let full = format!(
        r"(?:^|[^\w'.]){}(?:$|[^\w'])",
        regex::escape(identifier)
    );
    if Regex::new(&full).is_ok_and(|r| r.is_match(code)) {
        return true;
    }
    match identifier.rsplit_once('.') {
        Some((_, last)) if !last.is_empty() => {
            let seg = format!(r"(?:^|[^\w'.]){}(?:$|[^\w'])", regex::escape(last));
            Regex::new(&seg).is_ok_and(|r| r.is_match(code))
        }
        _ => false,
    }
}

fn field_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^[\s>*#\-]*\**([A-Za-z][A-Za-z _]*?)\**\s*:\s*(.*?)\s*$").unwrap()
    })
}

/// Parses `KEY: value` lines from a model reply. Keys are uppercased;
/// markdown emphasis and bullet prefixes are tolerated.
pub fn parse_fields(reply: &str) -> Vec<(String, String)> {
    reply
        .lines()
        .filter_map(|line| {
            let c = field_re().captures(line)?;
            let value = c[2].trim_matches(|ch: char| ch == '*' || ch.is_whitespace());
            Some((c[1].trim().to_uppercase(), value.to_string()))
        })
        .collect()
}

/// First non-empty value for `key` (case-insensitive).
pub fn field(reply: &str, key: &str) -> Option<String> {
    let key = key.to_uppercase();
    parse_fields(reply)
        .into_iter()
        .find(|(k, v)| *k == key && !v.is_empty())
        .map(|(_, v)| v)
}

/// All non-empty values for `key`, in reply order.
pub fn fields(reply: &str, key: &str) -> Vec<String> {
    let key = key.to_uppercase();
    parse_fields(reply)
        .into_iter()
        .filter(|(k, v)| *k == key && !v.is_empty())
        .map(|(_, v)| v)
        .collect()
}

/// Parses a `VERDICT: yes|no` reply.
pub fn verdict(reply: &str) -> Option<bool> {
    let v = field(reply, "VERDICT")?.to_lowercase();
    let word = v.split(|c: char| !c.is_alphabetic()).next().unwrap_or("");
    match word {
        "yes" | "true" => Some(true),
        "no" | "false" => Some(false),
        _ => None,
    }
}

/// Removes a surrounding markdown code fence, if any.
pub fn strip_code_fence(reply: &str) -> String {
    let t = reply.trim();
    if let Some(rest) = t.strip_prefix("```") {
        let body = rest.split_once('\n').map(|(_, b)| b).unwrap_or("");
        let body = body.trim_end();
        let body = body.strip_suffix("```").unwrap_or(body);
        return body.trim().to_string();
    }
    t.to_string()
}
