//! JSON configuration for the CLI `process` command.
//!
//! Schema:
//!
//! ```json
//! {
//!   "sample_rate": 48000,
//!   "frame_size": 256,
//!   "lookahead": 768,
//!   "bands": 3, "contents": 3, "mixers": 1,
//!   "thresholds": [1.0],            // linear; or "thresholds_dbfs"
//!   "upper_bounds": [1.0],          // scalar broadcast or per variable
//!   "rates": [0.111, ...],          // optional; uniform when omitted
//!   "window": {"attack": 384, "release": 640},
//!   "premixer": {"kind": "full", "alpha": 0.5},
//!   "culling": false,
//!   "lane_map": [[0,0,0], [1,0,0]]  // wav channel -> [band, content, mixer]
//! }
//! ```

use serde::Deserialize;

use super::{EngineConfig, EngineError};
use crate::reduction::PreMixerKind;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    sample_rate: f64,
    frame_size: usize,
    lookahead: usize,
    bands: usize,
    contents: usize,
    mixers: usize,
    #[serde(default)]
    thresholds: Option<Vec<f64>>,
    #[serde(default)]
    thresholds_dbfs: Option<Vec<f64>>,
    #[serde(default)]
    upper_bounds: Option<Vec<f64>>,
    #[serde(default)]
    rates: Option<Vec<f64>>,
    window: WindowOnsets,
    #[serde(default)]
    premixer: Option<PremixerChoice>,
    #[serde(default)]
    culling: Option<bool>,
    #[serde(default)]
    lane_map: Option<Vec<[usize; 3]>>,
}

#[derive(Debug, Deserialize)]
struct WindowOnsets {
    attack: usize,
    release: usize,
}

#[derive(Debug, Deserialize)]
struct PremixerChoice {
    kind: String,
    #[serde(default)]
    alpha: Option<f64>,
}

/// Mapping from WAV channel index to (band, content, mixer).
#[derive(Debug, Clone)]
pub struct LaneMap {
    pub entries: Vec<(usize, usize, usize)>,
}

impl LaneMap {
    /// Canonical order: bands fastest, then contents, then mixers.
    pub fn canonical(n_bands: usize, n_contents: usize, n_mixers: usize) -> Self {
        let mut entries = Vec::with_capacity(n_bands * n_contents * n_mixers);
        for m in 0..n_mixers {
            for k in 0..n_contents {
                for j in 0..n_bands {
                    entries.push((j, k, m));
                }
            }
        }
        Self { entries }
    }
}

pub fn dbfs_to_linear(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

/// Parse a config file; `was_normalized` on the returned objective handles
/// rate normalization logging downstream.
pub fn parse_config(json: &str) -> Result<(EngineConfig, LaneMap), EngineError> {
    let file: ConfigFile =
        serde_json::from_str(json).map_err(|e| EngineError::Config(e.to_string()))?;
    let n_vars = file.bands * file.contents;

    let thresholds = match (file.thresholds, file.thresholds_dbfs) {
        (Some(_), Some(_)) => {
            return Err(EngineError::Config(
                "give either thresholds or thresholds_dbfs, not both".into(),
            ))
        }
        (Some(lin), None) => broadcast(lin, file.mixers, "thresholds")?,
        (None, Some(db)) => broadcast(db, file.mixers, "thresholds_dbfs")?
            .into_iter()
            .map(dbfs_to_linear)
            .collect(),
        (None, None) => vec![1.0; file.mixers],
    };
    let upper_bounds = broadcast(
        file.upper_bounds.unwrap_or_else(|| vec![1.0]),
        n_vars,
        "upper_bounds",
    )?;
    let rates = match file.rates {
        Some(r) => broadcast(r, n_vars, "rates")?,
        None => vec![1.0 / n_vars as f64; n_vars],
    };

    let premixer = match file.premixer {
        None => PreMixerKind::Full,
        Some(p) => match p.kind.as_str() {
            "full" => PreMixerKind::Full,
            "single_channel" | "single" => PreMixerKind::SingleChannel,
            "multi_band" => PreMixerKind::MultiBand,
            "multi_content" => PreMixerKind::MultiContent,
            "concatenation" => PreMixerKind::Concatenation {
                alpha: p.alpha.unwrap_or(0.5),
            },
            other => {
                return Err(EngineError::Config(format!("unknown premixer kind {other:?}")))
            }
        },
    };

    let cfg = EngineConfig {
        sample_rate: file.sample_rate,
        frame_size: file.frame_size,
        lookahead: file.lookahead,
        n_bands: file.bands,
        n_contents: file.contents,
        n_mixers: file.mixers,
        thresholds,
        upper_bounds,
        rates,
        window_attack: file.window.attack,
        window_release: file.window.release,
        premixer,
        culling: file.culling.unwrap_or(false),
    };
    cfg.validate()?;

    let lanes = cfg.n_bands * cfg.n_contents * cfg.n_mixers;
    let lane_map = match file.lane_map {
        None => LaneMap::canonical(cfg.n_bands, cfg.n_contents, cfg.n_mixers),
        Some(entries) => {
            if entries.len() != lanes {
                return Err(EngineError::Config(format!(
                    "lane_map has {} entries, expected {lanes}",
                    entries.len()
                )));
            }
            for &[j, k, m] in &entries {
                if j >= cfg.n_bands || k >= cfg.n_contents || m >= cfg.n_mixers {
                    return Err(EngineError::Config(format!(
                        "lane_map entry [{j}, {k}, {m}] out of range"
                    )));
                }
            }
            LaneMap { entries: entries.iter().map(|&[j, k, m]| (j, k, m)).collect() }
        }
    };
    Ok((cfg, lane_map))
}

fn broadcast(v: Vec<f64>, want: usize, what: &str) -> Result<Vec<f64>, EngineError> {
    if v.len() == want {
        Ok(v)
    } else if v.len() == 1 {
        Ok(vec![v[0]; want])
    } else {
        Err(EngineError::Config(format!(
            "{what} has {} entries, expected {want} (or 1 to broadcast)",
            v.len()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_config() {
        let json = r#"{
            "sample_rate": 48000, "frame_size": 16, "lookahead": 16,
            "bands": 2, "contents": 1, "mixers": 1,
            "window": {"attack": 12, "release": 20}
        }"#;
        let (cfg, lanes) = parse_config(json).unwrap();
        assert_eq!(cfg.thresholds, vec![1.0]);
        assert_eq!(cfg.rates, vec![0.5, 0.5]);
        assert_eq!(lanes.entries, vec![(0, 0, 0), (1, 0, 0)]);
        assert!(!cfg.culling);
    }

    #[test]
    fn dbfs_thresholds_convert() {
        let json = r#"{
            "sample_rate": 48000, "frame_size": 16, "lookahead": 16,
            "bands": 1, "contents": 1, "mixers": 1,
            "thresholds_dbfs": [-6.0],
            "window": {"attack": 12, "release": 20}
        }"#;
        let (cfg, _) = parse_config(json).unwrap();
        assert!((cfg.thresholds[0] - 10f64.powf(-0.3)).abs() < 1e-12);
    }

    #[test]
    fn rejects_conflicting_thresholds_and_bad_lane_map() {
        let json = r#"{
            "sample_rate": 48000, "frame_size": 16, "lookahead": 16,
            "bands": 1, "contents": 1, "mixers": 1,
            "thresholds": [1.0], "thresholds_dbfs": [0.0],
            "window": {"attack": 12, "release": 20}
        }"#;
        assert!(parse_config(json).is_err());

        let json = r#"{
            "sample_rate": 48000, "frame_size": 16, "lookahead": 16,
            "bands": 1, "contents": 1, "mixers": 1,
            "window": {"attack": 12, "release": 20},
            "lane_map": [[0, 0, 5]]
        }"#;
        assert!(parse_config(json).is_err());
    }

    #[test]
    fn premixer_kinds_parse() {
        for (kind, expect) in [
            ("full", PreMixerKind::Full),
            ("single_channel", PreMixerKind::SingleChannel),
            ("multi_band", PreMixerKind::MultiBand),
            ("multi_content", PreMixerKind::MultiContent),
        ] {
            let json = format!(
                r#"{{
                "sample_rate": 48000, "frame_size": 16, "lookahead": 16,
                "bands": 2, "contents": 2, "mixers": 1,
                "window": {{"attack": 12, "release": 20}},
                "premixer": {{"kind": "{kind}"}}
            }}"#
            );
            let (cfg, _) = parse_config(&json).unwrap();
            assert_eq!(cfg.premixer, expect);
        }
    }
}
