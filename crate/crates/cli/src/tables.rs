//! Text-table rendering. Estimate tables follow the reporting layout used
//! throughout: Method, Estimate, S.E., 95% C.I., three decimals, with
//! interval construction named in a footnote.

use std::fmt::Write as _;

/// One rendered row of an estimate table.
#[derive(Debug, Clone)]
pub struct EstimateRow {
    pub method_label: String,
    pub estimate: f64,
    pub se: f64,
    pub ci: (f64, f64),
}

fn num3(v: f64) -> String {
    if v.is_nan() {
        "NA".to_string()
    } else {
        format!("{v:.3}")
    }
}

fn ci3(ci: (f64, f64)) -> String {
    if ci.0.is_nan() || ci.1.is_nan() {
        "NA".to_string()
    } else {
        format!("({:.3}, {:.3})", ci.0, ci.1)
    }
}

/// Renders one block of estimate rows under a target heading.
pub fn estimate_block(target_label: &str, rows: &[EstimateRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Target: {target_label}");
    let _ = writeln!(
        out,
        "{:<22} {:>9} {:>9} {:>18}",
        "Method", "Estimate", "S.E.", "95% C.I."
    );
    for row in rows {
        let _ = writeln!(
            out,
            "{:<22} {:>9} {:>9} {:>18}",
            row.method_label,
            num3(row.estimate),
            num3(row.se),
            ci3(row.ci)
        );
    }
    out
}

pub const INTERVAL_FOOTNOTE: &str = "Intervals: Wald with clustered sandwich SE for IPTW and TMLE; cluster\n\
     bootstrap percentile for G-computation.";
