//! CSV exports. Every file has its header row, floats carry nine significant
//! digits, and writes replace the target atomically.

use std::path::Path;

use crate::checkpoint::write_atomic;
use crate::error::Result;
use crate::policy::CurvePoint;
use crate::self_evolve::LoopRecord;

/// Formats like C's `%.9g`.
pub fn fmt_g9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// A header plus rows of already-formatted cells.
pub struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

pub const LOOP_COLUMNS: [&str; 8] = [
    "loop",
    "status",
    "status1_count",
    "status2_count",
    "new_filtered",
    "cumulative_filtered",
    "train_loss",
    "test_accuracy",
];

pub fn loop_table(records: &[LoopRecord]) -> Table {
    let mut t = Table::new(&LOOP_COLUMNS);
    for r in records {
        t.push(vec![
            r.loop_index.to_string(),
            r.status.map_or_else(|| "warmup".to_string(), |s| s.to_string()),
            r.status1_count.to_string(),
            r.status2_count.to_string(),
            r.new_filtered.to_string(),
            r.cumulative_filtered.to_string(),
            fmt_g9(r.train_loss),
            fmt_g9(r.test_accuracy),
        ]);
    }
    t
}

pub const CURVE_COLUMNS: [&str; 5] = ["step", "mean_scaled_reward", "approx_kl", "clip_frac", "kl_coeff"];

pub fn curve_table(curve: &[CurvePoint]) -> Table {
    let mut t = Table::new(&CURVE_COLUMNS);
    for c in curve {
        t.push(vec![
            c.step.to_string(),
            fmt_g9(c.mean_scaled_reward),
            fmt_g9(c.approx_kl),
            fmt_g9(c.clip_frac),
            fmt_g9(c.kl_coeff),
        ]);
    }
    t
}
