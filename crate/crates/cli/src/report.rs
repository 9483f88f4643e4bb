use std::fmt::Write as _;

use slca_core::metrics::{mean_metrics, MetricsReport};

/// Mean metrics as a table with one row per region.
pub fn metrics_table(reports: &[&MetricsReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<6} {:>8} {:>12} {:>12} {:>8}", "Region", "Dice", "Sensitivity", "Specificity", "HD95");
    for (region, dice, sens, spec, hd) in mean_metrics(reports) {
        let hd = hd.map_or_else(|| "n/a".to_string(), |h| format!("{h:.3}"));
        let _ = writeln!(out, "{:<6} {dice:>8.4} {sens:>12.4} {spec:>12.4} {hd:>8}", region.name());
    }
    out
}
