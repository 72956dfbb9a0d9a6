//! Highlight selectors and their re-location in document text.
//!
//! Offsets count Unicode scalar values over the page texts joined with a
//! single `'\n'`. A [`SelectorSet`] carries the quoted text with up to
//! [`CONTEXT_CHARS`] characters of context on each side, the character range
//! and the page the range starts on.
//!
//! [`anchor`] resolves a selector in a possibly drifted text with a fixed
//! cascade: the stored position if it still holds the quote, else the exact
//! quote occurrence nearest to the stored start, else the best approximate
//! window within an edit budget of `ceil(|exact| / 5)`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::model::CommentaryId;

/// Context kept on each side of the quote.
pub const CONTEXT_CHARS: usize = 32;
/// Separator placed between consecutive pages.
pub const PAGE_JOINER: char = '\n';

/// Page-concatenated document text, indexed by character.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocumentText {
    chars: Vec<char>,
    page_starts: Vec<usize>,
}

impl DocumentText {
    pub fn from_pages<S: AsRef<str>>(pages: &[S]) -> Self {
        let mut chars = Vec::new();
        let mut page_starts = Vec::with_capacity(pages.len().max(1));
        for (i, page) in pages.iter().enumerate() {
            if i > 0 {
                chars.push(PAGE_JOINER);
            }
            page_starts.push(chars.len());
            chars.extend(page.as_ref().chars());
        }
        if page_starts.is_empty() {
            page_starts.push(0);
        }
        Self { chars, page_starts }
    }

    /// Single-page text.
    pub fn from_text(text: &str) -> Self {
        Self::from_pages(&[text])
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn page_count(&self) -> usize {
        self.page_starts.len()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Page containing `offset`. A joiner belongs to the page it ends.
    pub fn page_of(&self, offset: usize) -> usize {
        self.page_starts.partition_point(|&s| s <= offset).saturating_sub(1)
    }

    pub fn slice(&self, start: usize, end: usize) -> String {
        self.chars[start..end].iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextQuoteSelector {
    pub exact: String,
    pub prefix: String,
    pub suffix: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPositionSelector {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SelectorSet {
    pub quote: TextQuoteSelector,
    pub position: TextPositionSelector,
    pub page_index: usize,
}

impl SelectorSet {
    /// Structural checks against the text the selector was made for.
    pub fn validate(&self, text: &DocumentText, page_count: usize) -> Result<(), AnchorError> {
        self.check_shape()?;
        let TextPositionSelector { start, end } = self.position;
        if end > text.len() {
            return Err(AnchorError::OutOfBounds { start, end, len: text.len() });
        }
        if self.page_index >= page_count || self.page_index != text.page_of(start) {
            return Err(AnchorError::Malformed("page index does not match position"));
        }
        Ok(())
    }

    fn check_shape(&self) -> Result<(), AnchorError> {
        if self.quote.exact.is_empty() {
            return Err(AnchorError::Malformed("empty quote"));
        }
        if self.position.start >= self.position.end {
            return Err(AnchorError::Malformed("empty or inverted position range"));
        }
        if self.quote.prefix.chars().count() > CONTEXT_CHARS || self.quote.suffix.chars().count() > CONTEXT_CHARS {
            return Err(AnchorError::Malformed("context longer than 32 characters"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMethod {
    PositionVerified,
    ExactSearch,
    Fuzzy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorResult {
    pub start: usize,
    pub end: usize,
    pub method: AnchorMethod,
    /// 1.0 for exact methods; `1 - distance / |exact|` for fuzzy.
    pub score: f64,
}

impl AnchorResult {
    fn exact(start: usize, end: usize, method: AnchorMethod) -> Self {
        Self { start, end, method, score: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnchorError {
    OutOfBounds { start: usize, end: usize, len: usize },
    Malformed(&'static str),
    /// Well-formed selector with no acceptable match in the text.
    AnchorFailed,
}

impl fmt::Display for AnchorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnchorError::OutOfBounds { start, end, len } => {
                write!(f, "range {start}..{end} out of bounds for text of length {len}")
            }
            AnchorError::Malformed(why) => write!(f, "malformed selector: {why}"),
            AnchorError::AnchorFailed => f.write_str("selector could not be anchored"),
        }
    }
}

/// Edit budget for a quote of `quote_len` characters: `ceil(0.2 * len)`.
pub fn fuzzy_budget(quote_len: usize) -> usize {
    quote_len.div_ceil(5)
}

/// Builds the selector set for the character range `start..end`.
pub fn describe(text: &DocumentText, start: usize, end: usize) -> Result<SelectorSet, AnchorError> {
    if start >= end || end > text.len() {
        return Err(AnchorError::OutOfBounds { start, end, len: text.len() });
    }
    let prefix_start = start.saturating_sub(CONTEXT_CHARS);
    let suffix_end = (end + CONTEXT_CHARS).min(text.len());
    Ok(SelectorSet {
        quote: TextQuoteSelector {
            exact: text.slice(start, end),
            prefix: text.slice(prefix_start, start),
            suffix: text.slice(end, suffix_end),
        },
        position: TextPositionSelector { start, end },
        page_index: text.page_of(start),
    })
}

/// Re-locates `sel` in `text`.
pub fn anchor(text: &DocumentText, sel: &SelectorSet) -> Result<AnchorResult, AnchorError> {
    sel.check_shape()?;
    let quote: Vec<char> = sel.quote.exact.chars().collect();
    let hay = text.chars();
    let TextPositionSelector { start, end } = sel.position;

    if end <= hay.len() && hay[start..end] == quote[..] {
        return Ok(AnchorResult::exact(start, end, AnchorMethod::PositionVerified));
    }

    if let Some(found) = nearest_occurrence(hay, &quote, start) {
        return Ok(AnchorResult::exact(found, found + quote.len(), AnchorMethod::ExactSearch));
    }

    match best_window(hay, &quote, start) {
        Some(w) => Ok(AnchorResult {
            start: w.start,
            end: w.start + w.len,
            method: AnchorMethod::Fuzzy,
            score: 1.0 - w.distance as f64 / quote.len() as f64,
        }),
        None => Err(AnchorError::AnchorFailed),
    }
}

fn nearest_occurrence(hay: &[char], needle: &[char], hint: usize) -> Option<usize> {
    if needle.len() > hay.len() {
        return None;
    }
    // First hit scanning by increasing start wins ties, so strict `<` is the
    // "smaller offset" rule.
    let mut best: Option<(usize, usize)> = None;
    for (i, w) in hay.windows(needle.len()).enumerate() {
        if w == needle {
            let d = i.abs_diff(hint);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
    }
    best.map(|(_, i)| i)
}

/// An approximate match chosen by the fuzzy step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub len: usize,
    pub distance: usize,
}

/// Best window of length `|quote| ± budget` by the total order
/// `(distance, |start - hint|, start, |len - |quote||, len)`, accepted only
/// if its distance is within [`fuzzy_budget`].
///
/// Any window within budget has a length inside the slack automatically,
/// since length difference is a lower bound on edit distance. That lets a
/// reverse semi-global alignment compute, in `O(|text| * |quote|)`, the
/// smallest distance achievable from every start offset; the length is then
/// settled by one ordinary alignment at the chosen start.
pub fn best_window(hay: &[char], quote: &[char], hint: usize) -> Option<Window> {
    let n = quote.len();
    if n == 0 || hay.is_empty() {
        return None;
    }
    let budget = fuzzy_budget(n);
    let best_from = min_distance_by_start(hay, quote);

    let mut chosen: Option<(usize, usize)> = None;
    for (start, &d) in best_from.iter().enumerate() {
        if d > budget {
            continue;
        }
        let better = match chosen {
            None => true,
            Some((bd, bs)) => d < bd || (d == bd && start.abs_diff(hint) < bs.abs_diff(hint)),
        };
        if better {
            chosen = Some((d, start));
        }
    }
    let (distance, start) = chosen?;

    let max_len = (n + budget).min(hay.len() - start);
    let min_len = n.saturating_sub(budget).max(1);
    let dists = prefix_distances(quote, &hay[start..start + max_len]);
    let len = (min_len..=max_len)
        .filter(|&l| dists[l] == distance)
        .min_by_key(|&l| (l.abs_diff(n), l))?;
    Some(Window { start, len, distance })
}

/// For each start offset `i`, the minimum edit distance between `quote` and
/// any `hay[i..j]`. Computed as a semi-global alignment of the reversed
/// strings, where the free end of the reversed text is the start here.
fn min_distance_by_start(hay: &[char], quote: &[char]) -> Vec<usize> {
    let n = quote.len();
    let mut col: Vec<usize> = (0..=n).collect();
    let mut next = vec![0; n + 1];
    let mut out = vec![0; hay.len()];
    for i in (0..hay.len()).rev() {
        let c = hay[i];
        next[0] = 0;
        for p in 1..=n {
            let q = quote[n - p];
            let sub = col[p - 1] + usize::from(q != c);
            next[p] = sub.min(col[p] + 1).min(next[p - 1] + 1);
        }
        core::mem::swap(&mut col, &mut next);
        out[i] = col[n];
    }
    out
}

/// `d[l]` = edit distance between `quote` and `window[..l]`.
fn prefix_distances(quote: &[char], window: &[char]) -> Vec<usize> {
    let n = quote.len();
    let mut col: Vec<usize> = (0..=n).collect();
    let mut next = vec![0; n + 1];
    let mut out = Vec::with_capacity(window.len() + 1);
    out.push(n);
    for (j, &c) in window.iter().enumerate() {
        next[0] = j + 1;
        for p in 1..=n {
            let sub = col[p - 1] + usize::from(quote[p - 1] != c);
            next[p] = sub.min(col[p] + 1).min(next[p - 1] + 1);
        }
        core::mem::swap(&mut col, &mut next);
        out.push(col[n]);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReanchorOutcome {
    Anchored {
        result: AnchorResult,
        selectors: SelectorSet,
        /// New start minus the start resolved in the old text.
        shift: i64,
    },
    Orphaned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReanchorItem {
    pub commentary_id: CommentaryId,
    pub outcome: ReanchorOutcome,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReanchorReport {
    pub items: Vec<ReanchorItem>,
}

impl ReanchorReport {
    pub fn orphans(&self) -> impl Iterator<Item = &ReanchorItem> {
        self.items.iter().filter(|i| i.outcome == ReanchorOutcome::Orphaned)
    }
}

/// Resolves every anchored commentary against a new version of the text.
/// Unanchored commentaries (document-level, replies) are skipped. Failures
/// are reported per item; nothing is dropped.
pub fn reanchor_all<'a, I>(old: &DocumentText, new: &DocumentText, commentaries: I) -> ReanchorReport
where
    I: IntoIterator<Item = (&'a CommentaryId, &'a SelectorSet)>,
{
    let items = commentaries
        .into_iter()
        .map(|(id, sel)| {
            let outcome = match anchor(new, sel) {
                Ok(result) => {
                    let old_start = anchor(old, sel).map_or(sel.position.start, |r| r.start);
                    match describe(new, result.start, result.end) {
                        Ok(selectors) => ReanchorOutcome::Anchored {
                            result,
                            selectors,
                            shift: result.start as i64 - old_start as i64,
                        },
                        Err(_) => ReanchorOutcome::Orphaned,
                    }
                }
                Err(_) => ReanchorOutcome::Orphaned,
            };
            ReanchorItem { commentary_id: id.clone(), outcome }
        })
        .collect();
    ReanchorReport { items }
}
