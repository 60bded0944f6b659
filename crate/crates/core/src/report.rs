//! Human-readable views of masks and simulation trials.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::records::{align_mask, Dataset, TokenMask};
use crate::scoring::ScoreTable;

/// Opening and closing glyphs around a selected token.
pub const OPEN: &str = "⟦";
pub const CLOSE: &str = "⟧";

const INVERSE_ON: &str = "\x1b[7m";
const INVERSE_OFF: &str = "\x1b[27m";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// Bracket glyphs inside an inverse-video region.
    Ansi,
    /// Bracket glyphs only.
    Plain,
    Html,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ansi" => Ok(ReportFormat::Ansi),
            "plain" => Ok(ReportFormat::Plain),
            "html" => Ok(ReportFormat::Html),
            _ => Err(Error::invalid(format!("unknown report format {s:?}"))),
        }
    }
}

/// Token id to display string, read from `id<TAB>text` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetokTable {
    names: HashMap<u32, String>,
}

impl DetokTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut names = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, name) = line
                .split_once('\t')
                .ok_or_else(|| Error::invalid(format!("detok line {} has no tab", n + 1)))?;
            let id: u32 = id
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("detok line {}: bad token id {id:?}", n + 1)))?;
            names.insert(id, name.to_string());
        }
        Ok(Self { names })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The display string, or the id itself for unknown tokens.
    pub fn name(&self, token: u32) -> String {
        self.names.get(&token).cloned().unwrap_or_else(|| token.to_string())
    }
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

/// Renders one line per sample with the selected tokens highlighted.
///
/// The mask must belong to `dataset`. Scores, if given, must too; in HTML they
/// become a `title` on each response token.
pub fn render(
    dataset: &Dataset,
    mask: &TokenMask,
    scores: Option<&ScoreTable>,
    detok: Option<&DetokTable>,
    format: ReportFormat,
) -> Result<String> {
    align_mask(mask, dataset)?;
    let mut score_at = vec![None; dataset.total_tokens()];
    if let Some(table) = scores {
        for (e, idx) in table.check_against(dataset)?.into_iter().enumerate() {
            score_at[idx] = Some(table.entries[e].score);
        }
    }
    let name = |t: u32| match detok {
        Some(d) => d.name(t),
        None => t.to_string(),
    };
    let labels = mask.labels();
    let mut out = String::new();
    if format == ReportFormat::Html {
        out.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><style>\n");
        out.push_str(".sample { font-family: monospace; margin: 0.4em 0; }\n");
        out.push_str(".selected { background: #ffe08a; }\n");
        out.push_str("</style></head><body>\n");
    }
    for s in 0..dataset.num_samples() {
        let range = dataset.sample_range(s);
        let mut words = Vec::with_capacity(range.len());
        for i in range {
            let text = name(dataset.tokens()[i]);
            let word = match format {
                ReportFormat::Ansi if labels[i] => format!("{INVERSE_ON}{OPEN}{text}{CLOSE}{INVERSE_OFF}"),
                ReportFormat::Plain if labels[i] => format!("{OPEN}{text}{CLOSE}"),
                ReportFormat::Ansi | ReportFormat::Plain => text,
                ReportFormat::Html => {
                    let class = if labels[i] { " class=\"selected\"" } else { "" };
                    let title = score_at[i].map(|v| format!(" title=\"{v:.4}\"")).unwrap_or_default();
                    if class.is_empty() && title.is_empty() {
                        escape_html(&text)
                    } else {
                        format!("<span{class}{title}>{}</span>", escape_html(&text))
                    }
                }
            };
            words.push(word);
        }
        match format {
            ReportFormat::Html => {
                let _ = writeln!(out, "<div class=\"sample\">{}</div>", words.join(" "));
            }
            _ => {
                let _ = writeln!(out, "{}", words.join(" "));
            }
        }
    }
    if format == ReportFormat::Html {
        out.push_str("</body></html>\n");
    }
    Ok(out)
}

fn field(v: &Value, key: &str, line: usize) -> Result<f64> {
    v.get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| Error::invalid(format!("trial line {line}: missing numeric field {key:?}")))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |a, x| a + x) / xs.len() as f64
}

/// Summarizes line-delimited trial records from `tokclean simulate`.
pub fn summarize_trials(text: &str) -> Result<String> {
    let rows: Vec<Value> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()?;
    let first = rows.first().ok_or_else(|| Error::invalid("no trial records"))?;
    let mut out = String::new();
    if first.get("violated").is_some() {
        let mut risk = Vec::new();
        let mut bound = Vec::new();
        let mut eta = Vec::new();
        let mut violated = 0usize;
        for (n, r) in rows.iter().enumerate() {
            risk.push(field(r, "risk", n + 1)?);
            bound.push(field(r, "bound", n + 1)?);
            eta.push(field(r, "empirical_eta", n + 1)?);
            violated += r.get("violated").and_then(Value::as_bool).unwrap_or(false) as usize;
        }
        let _ = writeln!(out, "bound trials: {}", rows.len());
        let _ = writeln!(out, "mean empirical eta: {:.6}", mean(&eta));
        let _ = writeln!(out, "mean clean risk: {:.6}", mean(&risk));
        let _ = writeln!(out, "mean bound: {:.6}", mean(&bound));
        let _ = writeln!(out, "violation frequency: {:.6}", violated as f64 / rows.len() as f64);
    } else if first.get("cleaned_risk").is_some() {
        let mut full = Vec::new();
        let mut cleaned = Vec::new();
        for (n, r) in rows.iter().enumerate() {
            full.push(field(r, "full_risk", n + 1)?);
            cleaned.push(field(r, "cleaned_risk", n + 1)?);
        }
        let _ = writeln!(out, "crossover trials: {}", rows.len());
        let _ = writeln!(out, "mean full-token risk: {:.6}", mean(&full));
        let _ = writeln!(out, "mean cleaned risk: {:.6}", mean(&cleaned));
    } else if first.get("group").is_some() {
        let mut by: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
        for (n, r) in rows.iter().enumerate() {
            let group = r.get("group").and_then(Value::as_str).unwrap_or_default().to_string();
            let it = field(r, "iteration", n + 1)? as u64;
            by.entry((group, it)).or_default().push(field(r, "risk", n + 1)?);
        }
        let _ = writeln!(out, "group  iteration  mean_risk  seeds");
        for ((group, it), risks) in &by {
            let _ = writeln!(out, "{group}  {it}  {:.6}  {}", mean(risks), risks.len());
        }
    } else {
        return Err(Error::invalid("unrecognized trial records"));
    }
    Ok(out)
}
