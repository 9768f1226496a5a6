//! Window export/import: raw little-endian f64 samples plus a JSON
//! sidecar `{M, F, T_A, T_R, cola_residual}` at `<path>.json`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ColaWindow, WindowError, WindowSpec};

#[derive(Debug, Error)]
pub enum WindowIoError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("sidecar parse error: {0}")]
    Sidecar(#[from] serde_json::Error),
    #[error("raw file length {got} bytes is not 8*M = {expect}")]
    LengthMismatch { got: usize, expect: usize },
    #[error(transparent)]
    Window(#[from] WindowError),
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "F")]
    f: usize,
    #[serde(rename = "T_A")]
    t_a: usize,
    #[serde(rename = "T_R")]
    t_r: usize,
    cola_residual: f64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Write the raw samples to `path` and the sidecar to `path.json`.
pub fn export_window(w: &ColaWindow, path: &Path) -> Result<(), WindowIoError> {
    let mut raw = fs::File::create(path)?;
    for s in &w.samples {
        raw.write_all(&s.to_le_bytes())?;
    }
    let sidecar = Sidecar {
        m: w.spec.length,
        f: w.spec.hop,
        t_a: w.spec.attack,
        t_r: w.spec.release,
        cola_residual: w.cola_residual,
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Read a window back; the certificate fields are recomputed from the
/// samples rather than trusted from disk.
pub fn import_window(path: &Path) -> Result<ColaWindow, WindowIoError> {
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * sidecar.m {
        return Err(WindowIoError::LengthMismatch { got: bytes.len(), expect: 8 * sidecar.m });
    }
    let samples: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let spec = WindowSpec::new(sidecar.m, sidecar.f, sidecar.t_a, sidecar.t_r)?;
    Ok(ColaWindow::from_samples(spec, samples)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::window::design_window;

    #[test]
    fn export_import_roundtrip() {
        let dir = std::env::temp_dir().join("qplimit_window_io_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("w32.f64");

        let spec = WindowSpec::new(32, 8, 12, 20).unwrap();
        let w = design_window(&spec).unwrap();
        export_window(&w, &path).unwrap();

        let back = import_window(&path).unwrap();
        assert_eq!(back.spec, w.spec);
        assert_eq!(back.samples, w.samples);
        assert!((back.cola_residual - w.cola_residual).abs() < 1e-12);

        let sidecar = fs::read_to_string(sidecar_path(&path)).unwrap();
        for key in ["\"M\"", "\"F\"", "\"T_A\"", "\"T_R\"", "cola_residual"] {
            assert!(sidecar.contains(key), "missing {key} in {sidecar}");
        }
        fs::remove_dir_all(&dir).ok();
    }
}
