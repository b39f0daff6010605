//! Block format: one `token<TAB>slot` line per token, then `#intent=<label>`,
//! then a blank line.

use std::fmt::Write as _;
use std::path::Path;

use super::{check_bio_label, Dataset, Utterance};
use crate::error::{Error, Result};

pub const INTENT_PREFIX: &str = "#intent=";

/// Parses utterances from text; `source` names the input in error messages.
pub fn parse_conll(text: &str, source: &str) -> Result<Vec<Utterance>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut slots = Vec::new();
    let mut intent: Option<String> = None;
    let mut block_start = 0;

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            match intent.take() {
                Some(label) => out.push(Utterance::new(std::mem::take(&mut tokens), std::mem::take(&mut slots), label)?),
                None if !tokens.is_empty() => return Err(err(lineno, format!("block starting at line {block_start} has no {INTENT_PREFIX} line"))),
                None => {}
            }
            continue;
        }
        if intent.is_some() {
            return Err(err(lineno, format!("expected a blank line after {INTENT_PREFIX}")));
        }
        if let Some(label) = line.strip_prefix(INTENT_PREFIX) {
            let label = label.trim();
            if tokens.is_empty() {
                return Err(err(lineno, format!("{INTENT_PREFIX} line without tokens")));
            }
            if label.is_empty() {
                return Err(err(lineno, "empty intent label".into()));
            }
            intent = Some(label.to_string());
            continue;
        }
        let Some((token, slot)) = line.split_once('\t') else {
            return Err(err(lineno, "expected `token<TAB>slot`".into()));
        };
        if token.is_empty() || slot.contains('\t') {
            return Err(err(lineno, "expected exactly one non-empty token and one slot label".into()));
        }
        check_bio_label(slot).map_err(|e| err(lineno, e.to_string()))?;
        if tokens.is_empty() {
            block_start = lineno;
        }
        tokens.push(token.to_string());
        slots.push(slot.to_string());
    }
    match intent {
        Some(label) => out.push(Utterance::new(tokens, slots, label)?),
        None if !tokens.is_empty() => {
            return Err(err(text.lines().count(), format!("block starting at line {block_start} has no {INTENT_PREFIX} line")))
        }
        None => {}
    }
    Ok(out)
}

pub fn load_conll(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_utterances(parse_conll(&text, &path.display().to_string())?)
}

pub fn to_conll(utterances: &[Utterance]) -> String {
    let mut s = String::new();
    for u in utterances {
        for (t, l) in u.tokens.iter().zip(&u.slots) {
            let _ = writeln!(s, "{t}\t{l}");
        }
        let _ = writeln!(s, "{INTENT_PREFIX}{}\n", u.intent);
    }
    s
}

pub fn write_conll(path: impl AsRef<Path>, utterances: &[Utterance]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_conll(utterances)).map_err(|e| Error::io(path, e))
}
