//! Output helpers shared by the harnesses.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::Result;

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn write_json<T: serde::Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

/// Header of a kernel-parameter table: `c_1..c_n` then one `beta<l>_1..` block
/// per input axis.
pub fn params_header(n_cp: usize, m: usize) -> String {
    let mut cols: Vec<String> = (1..=n_cp).map(|k| format!("c_{k}")).collect();
    for l in 1..=m {
        cols.extend((1..=n_cp).map(|k| if m == 1 { format!("beta_{k}") } else { format!("beta{l}_{k}") }));
    }
    cols.join(",")
}

/// One row per member of a parameter ensemble, each row prefixed by `prefix`.
pub fn push_param_rows(out: &mut String, prefix: &str, theta: &DMatrix<f64>) {
    for col in theta.column_iter() {
        out.push_str(prefix);
        for (i, v) in col.iter().enumerate() {
            if i > 0 || !prefix.is_empty() {
                out.push(',');
            }
            let _ = write!(out, "{v:e}");
        }
        out.push('\n');
    }
}
