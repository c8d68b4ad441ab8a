//! Per-language report tables: fixed language ordering, em-dash for
//! missing cells, and a machine-readable cell file mirroring the render.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Fixed column order for the named languages.
pub const LANGUAGE_ORDER: [&str; 11] = [
    "telugu",
    "hindi",
    "bengali",
    "malayalam",
    "kannada",
    "assamese",
    "tamil",
    "marathi",
    "gujarati",
    "odia",
    "english",
];

const METRIC_ORDER: [(&str, &str); 7] = [
    ("pope", "accuracy"),
    ("pope", "precision"),
    ("pope", "recall"),
    ("pope", "f1"),
    ("pope", "yes_ratio"),
    ("genqa", "exact_match"),
    ("genqa", "token_f1"),
];

/// Sort key: named Indic languages in table order, then synthetic cipher
/// tags numerically, then English, then anything else alphabetically.
fn language_key(tag: &str) -> (u8, usize, String) {
    let canonical = if tag == "en" { "english" } else { tag };
    if canonical != "english" {
        if let Some(pos) = LANGUAGE_ORDER.iter().position(|&l| l == canonical) {
            return (0, pos, String::new());
        }
    }
    if let Some(num) = tag.strip_prefix('l').and_then(|n| n.parse::<usize>().ok()) {
        return (1, num, String::new());
    }
    if canonical == "english" {
        return (2, 0, String::new());
    }
    (3, 0, tag.to_string())
}

pub fn display_name(tag: &str) -> String {
    let canonical = if tag == "en" { "english" } else { tag };
    if LANGUAGE_ORDER.contains(&canonical) {
        let mut chars = canonical.chars();
        let first = chars.next().unwrap().to_uppercase();
        format!("{first}{}", chars.as_str())
    } else {
        tag.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub task: String,
    pub language: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default)]
pub struct LanguageReport {
    cells: Vec<ReportCell>,
}

impl LanguageReport {
    pub fn insert(&mut self, task: &str, language: &str, metric: &str, value: f64) {
        self.cells.retain(|c| {
            !(c.task == task && c.language == language && c.metric == metric)
        });
        self.cells.push(ReportCell {
            task: task.to_string(),
            language: language.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    pub fn get(&self, task: &str, language: &str, metric: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.task == task && c.language == language && c.metric == metric)
            .map(|c| c.value)
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn languages(&self) -> Vec<String> {
        let mut langs: Vec<String> = Vec::new();
        for c in &self.cells {
            if !langs.contains(&c.language) {
                langs.push(c.language.clone());
            }
        }
        langs.sort_by_key(|l| language_key(l));
        langs
    }

    /// Cells in render order: metric rows by the fixed ordering, languages
    /// by the fixed column ordering.
    pub fn ordered_cells(&self) -> Vec<ReportCell> {
        let langs = self.languages();
        let mut out = Vec::new();
        for (task, metric) in METRIC_ORDER {
            for lang in &langs {
                if let Some(v) = self.get(task, lang, metric) {
                    out.push(ReportCell {
                        task: task.to_string(),
                        language: lang.clone(),
                        metric: metric.to_string(),
                        value: v,
                    });
                }
            }
        }
        // Any cells outside the known metric set keep insertion order.
        for c in &self.cells {
            if !METRIC_ORDER
                .iter()
                .any(|(t, m)| *t == c.task && *m == c.metric)
            {
                out.push(c.clone());
            }
        }
        out
    }

    /// Plain-text table: one row per (task, metric) present, one column per
    /// language, missing cells rendered as an em dash.
    pub fn render_text(&self) -> String {
        let langs = self.languages();
        let rows: Vec<(&str, &str)> = METRIC_ORDER
            .iter()
            .filter(|(t, m)| {
                self.cells.iter().any(|c| c.task == *t && c.metric == *m)
            })
            .copied()
            .collect();

        let mut col_widths: Vec<usize> = langs.iter().map(|l| display_name(l).len()).collect();
        let mut grid: Vec<Vec<String>> = Vec::new();
        for (task, metric) in &rows {
            let mut row = Vec::new();
            for (j, lang) in langs.iter().enumerate() {
                let cell = match self.get(task, lang, metric) {
                    Some(v) => format!("{v}"),
                    None => "—".to_string(),
                };
                col_widths[j] = col_widths[j].max(cell.chars().count());
                row.push(cell);
            }
            grid.push(row);
        }
        let label_width = rows
            .iter()
            .map(|(t, m)| t.len() + m.len() + 1)
            .max()
            .unwrap_or(5)
            .max(5);

        let mut out = String::new();
        out.push_str(&format!("{:label_width$}", "bench"));
        for (j, lang) in langs.iter().enumerate() {
            out.push_str(&format!("  {:>width$}", display_name(lang), width = col_widths[j]));
        }
        out.push('\n');
        for (i, (task, metric)) in rows.iter().enumerate() {
            out.push_str(&format!("{:label_width$}", format!("{task}/{metric}")));
            for (j, cell) in grid[i].iter().enumerate() {
                let pad = col_widths[j].saturating_sub(cell.chars().count());
                out.push_str("  ");
                for _ in 0..pad {
                    out.push(' ');
                }
                out.push_str(cell);
            }
            out.push('\n');
        }
        out
    }

    /// Machine-readable mirror: one JSON cell per line, in render order.
    pub fn write_cells(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for cell in self.ordered_cells() {
            serde_json::to_writer(&mut out, &cell)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_fixture_renders_values_verbatim() {
        let mut rep = LanguageReport::default();
        rep.insert("pope", "telugu", "accuracy", 79.9);
        rep.insert("pope", "hindi", "accuracy", 78.68);
        rep.insert("pope", "english", "accuracy", 87.63);
        let text = rep.render_text();
        assert!(text.contains("79.9"), "{text}");
        assert!(text.contains("78.68"), "{text}");
        assert!(text.contains("87.63"), "{text}");
        // Table-order columns: Telugu before Hindi before English.
        let t = text.find("Telugu").unwrap();
        let h = text.find("Hindi").unwrap();
        let e = text.find("English").unwrap();
        assert!(t < h && h < e);
    }

    #[test]
    fn single_cell_renders_with_dashes_elsewhere() {
        let mut rep = LanguageReport::default();
        rep.insert("pope", "hindi", "accuracy", 0.5);
        rep.insert("genqa", "english", "token_f1", 0.25);
        let text = rep.render_text();
        assert!(text.contains('—'), "{text}");
        assert_eq!(rep.ordered_cells().len(), 2);
    }

    #[test]
    fn render_is_deterministic() {
        let mut rep = LanguageReport::default();
        rep.insert("genqa", "l2", "token_f1", 0.125);
        rep.insert("genqa", "en", "token_f1", 0.5);
        rep.insert("genqa", "l10", "token_f1", 0.25);
        rep.insert("genqa", "l1", "token_f1", 0.75);
        assert_eq!(rep.render_text(), rep.render_text());
        // Cipher tags sort numerically, English last.
        assert_eq!(rep.languages(), vec!["l1", "l2", "l10", "en"]);
    }

    #[test]
    fn cells_file_mirrors_table() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cells.jsonl");
        let mut rep = LanguageReport::default();
        rep.insert("pope", "english", "f1", 0.5);
        rep.insert("genqa", "l1", "token_f1", 0.1);
        rep.write_cells(&path).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert_eq!(body.lines().count(), 2);
        assert!(body.contains("\"token_f1\""));
    }
}
