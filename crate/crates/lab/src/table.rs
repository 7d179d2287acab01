//! Label-fraction by algorithm grid of mean F1 (std), in percent.

use std::collections::BTreeMap;

use mixhar_core::baselines::AlgorithmKind;

use crate::experiment::RunReport;

pub fn render(reports: &[RunReport]) -> String {
    // several runs of one cell (e.g. seeds) are pooled over their folds' means
    let mut cells: BTreeMap<(u64, AlgorithmKind), Vec<f64>> = BTreeMap::new();
    for r in reports {
        let key = (r.label_fraction.to_bits(), r.algorithm);
        let scores = r.folds.iter().filter_map(|f| f.mean_f1);
        cells.entry(key).or_default().extend(scores);
    }
    let algorithms: Vec<AlgorithmKind> = AlgorithmKind::ALL
        .into_iter()
        .filter(|a| cells.keys().any(|(_, k)| k == a))
        .collect();
    let mut fractions: Vec<f64> = cells.keys().map(|(f, _)| f64::from_bits(*f)).collect();
    fractions.sort_by(|a, b| a.total_cmp(b));
    fractions.dedup();

    let mut rows = vec![std::iter::once("labelled".to_string())
        .chain(algorithms.iter().map(|a| a.label().to_string()))
        .collect::<Vec<_>>()];
    for f in &fractions {
        let mut row = vec![format!("{}%", f * 100.0)];
        for a in &algorithms {
            row.push(match cells.get(&(f.to_bits(), *a)) {
                Some(v) if !v.is_empty() => {
                    let (m, s) = mixhar_core::metrics::mean_std(v);
                    format!("{:.2}({:.2})", m * 100.0, s * 100.0)
                }
                _ => "-".into(),
            });
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row.iter().zip(&widths).map(|(v, w)| format!("{v:>w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    out
}
