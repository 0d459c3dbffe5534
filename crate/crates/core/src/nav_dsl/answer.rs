use std::sync::OnceLock;

use regex::Regex;

use super::NavError;

/// Option letters in index order.
pub const OPTION_LETTERS: [char; 8] = ['A', 'B', 'C', 'D', 'E', 'F', 'G', 'H'];

pub fn option_letter(index: usize) -> Option<char> {
    OPTION_LETTERS.get(index).copied()
}

fn letter_index(c: &str) -> Option<usize> {
    let c = c.chars().next()?;
    OPTION_LETTERS.iter().position(|&l| l == c)
}

fn answer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i:answer)\s*[:：]\s*[*_]*\s*\(?\s*([A-H])\b").expect("valid regex"))
}

fn letter_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\(?([A-H])[).:]?$").expect("valid regex"))
}

fn is_fence(line: &str) -> bool {
    line.trim_start().starts_with("```")
}

/// Resolves a free-text reply to a 0-based option index.
///
/// Rules, first that fires wins:
/// 1. the last `Answer: <letter>` in the text;
/// 2. the last line consisting only of an option letter;
/// 3. the single option whose full text appears (case-insensitively) in the
///    final paragraph.
pub fn extract_answer<S: AsRef<str>>(text: &str, options: &[S]) -> Result<usize, NavError> {
    let n = options.len();
    if !(2..=8).contains(&n) {
        return Err(NavError::BadOptionCount(n));
    }
    let cleaned: String = text.lines().filter(|l| !is_fence(l)).collect::<Vec<_>>().join("\n");

    if let Some(idx) = answer_re()
        .captures_iter(&cleaned)
        .filter_map(|c| letter_index(c.get(1)?.as_str()))
        .filter(|&i| i < n)
        .last()
    {
        return Ok(idx);
    }

    if let Some(idx) = cleaned
        .lines()
        .rev()
        .filter_map(|l| {
            let t = l.trim().trim_matches(|c| c == '*' || c == '_').trim();
            let cap = letter_line_re().captures(t)?;
            letter_index(cap.get(1)?.as_str())
        })
        .find(|&i| i < n)
    {
        return Ok(idx);
    }

    let mut paragraphs: Vec<String> = Vec::new();
    let mut current = String::new();
    for line in cleaned.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                paragraphs.push(std::mem::take(&mut current));
            }
        } else {
            if !current.is_empty() {
                current.push('\n');
            }
            current.push_str(line);
        }
    }
    if !current.is_empty() {
        paragraphs.push(current);
    }
    let last = paragraphs
        .last()
        .ok_or_else(|| NavError::Unparseable("empty response".into()))?
        .to_lowercase();
    let hits: Vec<usize> = options
        .iter()
        .enumerate()
        .filter(|(_, o)| {
            let o = o.as_ref().trim().to_lowercase();
            !o.is_empty() && last.contains(&o)
        })
        .map(|(i, _)| i)
        .collect();
    match hits.as_slice() {
        [one] => Ok(*one),
        [] => Err(NavError::Unparseable("no answer marker or option text found".into())),
        _ => Err(NavError::Unparseable(format!("{} options mentioned", hits.len()))),
    }
}
