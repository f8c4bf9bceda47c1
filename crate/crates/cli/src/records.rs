//! Round-level CSV output.

use std::fmt::Write as _;
use std::path::Path;

use fsp_core::simulator::RoundRecord;

use crate::error::{CliError, Result};

pub const CSV_HEADER: &str = "round,train_acc,test_acc,selected,flagged,agg,attack,seed";

fn join_ids(ids: &[usize]) -> String {
    ids.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

/// CSV text for `records`, LF line endings, header first.
pub fn render_round_csv(records: &[RoundRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{},{},{},{},{}",
            r.round,
            r.train_acc,
            r.test_acc,
            join_ids(&r.selected),
            join_ids(&r.flagged),
            r.agg.name(),
            r.attack.name(),
            r.seed
        );
    }
    out
}

pub fn write_round_csv(records: &[RoundRecord], path: &Path) -> Result<()> {
    write_text(path, &render_round_csv(records))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
