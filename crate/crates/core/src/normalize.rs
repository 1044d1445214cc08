//! URL normalization at two strengths.
//!
//! *Simple* normalization keeps a URL usable for probing: it only trims
//! whitespace and cuts the query string and fragment. *Strong* normalization
//! produces the cross-catalog comparison key: the scheme, a leading `www.` and
//! trailing slashes are removed and the host is lowercased. Path case is kept.

use std::collections::HashSet;
use std::hash::Hash;

use thiserror::Error;

use crate::catalog::NormalizedUrl;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NormalizeError {
    #[error("url {0:?} is empty after normalization")]
    Empty(String),
    #[error("url {0:?} keeps a non-http scheme or embeds another url")]
    EmbeddedScheme(String),
}

/// Trims surrounding whitespace and drops everything from the first `?` or
/// `#` on.
pub fn simple_normalize(raw_url: &str) -> Result<String, NormalizeError> {
    let trimmed = raw_url.trim();
    let cut = trimmed.find(['?', '#']).unwrap_or(trimmed.len());
    let out = trimmed[..cut].trim_end();
    if out.is_empty() {
        return Err(NormalizeError::Empty(raw_url.to_string()));
    }
    Ok(out.to_string())
}

fn strip_prefix_ignore_case<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    let head = s.get(..prefix.len())?;
    head.eq_ignore_ascii_case(prefix)
        .then(|| &s[prefix.len()..])
}

fn strong_pass(url: &str) -> Result<String, NormalizeError> {
    let simple = simple_normalize(url)?;
    let mut rest = simple.as_str();
    if let Some(r) = strip_prefix_ignore_case(rest, "http://")
        .or_else(|| strip_prefix_ignore_case(rest, "https://"))
    {
        rest = r;
    }
    if let Some(r) = strip_prefix_ignore_case(rest, "www.") {
        rest = r;
    }
    let rest = rest.trim_end_matches('/');
    let (host, path) = rest.split_at(rest.find('/').unwrap_or(rest.len()));
    Ok(format!("{}{}", host.to_ascii_lowercase(), path))
}

/// Computes the comparison key of a URL.
///
/// The single pass (simple normalization, one scheme, one `www.`, trailing
/// slashes, host case) is repeated until nothing changes, so inputs such as
/// `http://www.www.a.org` still land on a fixed point.
pub fn strong_normalize(url: &str) -> Result<NormalizedUrl, NormalizeError> {
    let mut current = strong_pass(url)?;
    loop {
        if current.is_empty() {
            return Err(NormalizeError::Empty(url.to_string()));
        }
        let next = strong_pass(&current)?;
        if next == current {
            break;
        }
        current = next;
    }
    if current.contains("://") {
        return Err(NormalizeError::EmbeddedScheme(url.to_string()));
    }
    Ok(NormalizedUrl::new_unchecked(current))
}

/// Removes exact duplicates, keeping first occurrences in order. Returns the
/// unique items and how many were removed.
pub fn dedupe<T: Eq + Hash + Clone>(items: Vec<T>) -> (Vec<T>, usize) {
    let total = items.len();
    let mut seen = HashSet::with_capacity(total);
    let unique: Vec<T> = items
        .into_iter()
        .filter(|x| seen.insert(x.clone()))
        .collect();
    let removed = total - unique.len();
    (unique, removed)
}
