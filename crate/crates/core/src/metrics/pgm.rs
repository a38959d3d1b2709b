//! ASCII portable graymap export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Pixels are `round(255·g/max g)`; an all-zero grid stays zero.
pub fn encode_pgm(grid: &[f64], width: usize, height: usize) -> Result<String> {
    if grid.len() != width * height || width == 0 {
        return Err(Error::Dimension {
            op: "encode_pgm",
            left: vec![grid.len()],
            right: vec![height, width],
        });
    }
    if grid.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Degenerate {
            op: "encode_pgm",
            detail: "heatmap values must be finite and nonnegative".into(),
        });
    }
    let max = grid.iter().copied().fold(0.0, f64::max);
    let mut out = format!("P2\n{width} {height}\n255\n");
    for row in grid.chunks_exact(width) {
        let line: Vec<String> = row
            .iter()
            .map(|v| {
                let px = if max > 0.0 { (255.0 * v / max).round() } else { 0.0 };
                format!("{}", px as u32)
            })
            .collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    Ok(out)
}

pub fn export_heatmap(grid: &[f64], width: usize, height: usize, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(grid, width, height)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_and_one_hot() {
        assert_eq!(encode_pgm(&[0.0; 4], 2, 2).unwrap(), "P2\n2 2\n255\n0 0\n0 0\n");
        assert_eq!(
            encode_pgm(&[0.0, 0.0, 3.0, 0.0], 2, 2).unwrap(),
            "P2\n2 2\n255\n0 0\n255 0\n"
        );
        assert_eq!(encode_pgm(&[1.0, 0.5], 2, 1).unwrap(), "P2\n2 1\n255\n255 128\n");
    }
}
