//! Grayscale PGM export of importance maps and JSON dumps of masks.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ImportanceMap, ReRoMask, ReroError, VisibleSet};

/// Binary (P5) 8-bit PGM.
pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<(), ReroError> {
    assert_eq!(pixels.len(), width * height, "pgm buffer size");
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// Writes `pair_{i:03}.pgm` per frame pair: importance min-max scaled to
/// `[0, 255]` over the whole map, one `patch x patch` block per token.
/// With a mask, also writes `pair_{i:03}_masked.pgm` with unselected
/// tokens set to 0. A constant map renders as all zeros.
pub fn export_heatmap(
    imp: &ImportanceMap,
    mask: Option<&ReRoMask>,
    patch: usize,
    patch_cols: usize,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>, ReroError> {
    let out_dir = out_dir.as_ref();
    if patch_cols == 0 || imp.j % patch_cols != 0 {
        return Err(ReroError::Shape { got: imp.j, expected: patch_cols });
    }
    fs::create_dir_all(out_dir)?;
    let rows = imp.j / patch_cols;
    let (lo, hi) = imp.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let level = |v: f64| -> u8 {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    };
    let (w, h) = (patch_cols * patch, rows * patch);
    let mut written = Vec::new();
    for i in 0..imp.tau {
        let render = |keep: &dyn Fn(usize) -> bool| -> Vec<u8> {
            let mut px = vec![0u8; w * h];
            for y in 0..h {
                for x in 0..w {
                    let j = (y / patch) * patch_cols + x / patch;
                    if keep(i * imp.j + j) {
                        px[y * w + x] = level(imp.get(i, j));
                    }
                }
            }
            px
        };
        let path = out_dir.join(format!("pair_{i:03}.pgm"));
        write_pgm(&path, w, h, &render(&|_| true))?;
        written.push(path);
        if let Some(m) = mask {
            let path = out_dir.join(format!("pair_{i:03}_masked.pgm"));
            write_pgm(&path, w, h, &render(&|flat| m.contains(flat)))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// JSON record of a two-stage selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskDump {
    pub rho_pre: f64,
    pub rho_post: Option<f64>,
    pub selected: Vec<usize>,
    pub visible: Vec<usize>,
}

impl MaskDump {
    pub fn new(mask: &ReRoMask, visible: Option<&VisibleSet>) -> Self {
        Self {
            rho_pre: mask.rho_pre,
            rho_post: visible.map(|v| v.rho_post),
            selected: mask.selected.clone(),
            visible: visible.map(|v| v.indices.clone()).unwrap_or_default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rero::select_rero;

    fn read_pgm(path: &Path) -> (usize, usize, Vec<u8>) {
        let bytes = fs::read(path).unwrap();
        let text = String::from_utf8_lossy(&bytes[..20]).to_string();
        let mut parts = text.split_whitespace();
        assert_eq!(parts.next(), Some("P5"));
        let w: usize = parts.next().unwrap().parse().unwrap();
        let h: usize = parts.next().unwrap().parse().unwrap();
        (w, h, bytes[bytes.len() - w * h..].to_vec())
    }

    #[test]
    fn constant_map_is_black() {
        let dir = tempfile::tempdir().unwrap();
        let imp = ImportanceMap::new(2, 4, vec![3.0; 8]).unwrap();
        let files = export_heatmap(&imp, None, 2, 2, dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        let (w, h, px) = read_pgm(&files[0]);
        assert_eq!((w, h), (4, 4));
        assert!(px.iter().all(|&p| p == 0));
        assert!(files[1].ends_with("pair_001.pgm"));
    }

    #[test]
    fn single_hot_patch_is_one_white_block() {
        let dir = tempfile::tempdir().unwrap();
        let mut values = vec![0.0; 8];
        values[4 + 3] = 1.0;
        let imp = ImportanceMap::new(2, 4, values).unwrap();
        let mask = select_rero(&imp, 0.125).unwrap();
        let files = export_heatmap(&imp, Some(&mask), 3, 2, dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        let (w, _, px) = read_pgm(&files[2]);
        for (k, &p) in px.iter().enumerate() {
            let (y, x) = (k / w, k % w);
            assert_eq!(p == 255, y >= 3 && x >= 3, "pixel ({y},{x})");
        }
        let (_, _, first) = read_pgm(&files[0]);
        assert!(first.iter().all(|&p| p == 0));
    }
}
