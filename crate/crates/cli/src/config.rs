//! TOML run configuration with command-line overrides.
//!
//! Sections are partial: unset fields fall back to the chosen preset's
//! defaults, then individual flags override the file.

use std::path::Path;

use serde::Deserialize;

use rpnt_core::attention::HistoryMode;
use rpnt_core::error::{Error, Result};
use rpnt_core::model::{AttentionKind, RpntConfig};
use rpnt_core::objectives::MaskStrategy;
use rpnt_core::posenc::PeKind;
use rpnt_core::train::Hyper;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<ModelSection>,
    pub pretrain: Option<HyperSection>,
    pub finetune: Option<HyperSection>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: Option<usize>,
    pub temporal_layers: Option<usize>,
    pub spatial_layers: Option<usize>,
    pub heads: Option<usize>,
    /// e.g. "9x9"
    pub kernel: Option<String>,
    /// mrope | rope | sinusoidal | learnable
    pub pe: Option<String>,
    /// context | standard
    pub attention: Option<String>,
    pub dropout: Option<f64>,
    pub ffn: Option<bool>,
    /// full | past:K
    pub history: Option<String>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperSection {
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub warmup_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub weight_decay: Option<f64>,
    pub grad_clip: Option<f64>,
    pub contrastive_weight: Option<f64>,
    pub tau: Option<f64>,
    /// uniform | entrywise | fixed:PN,PT
    pub masking: Option<String>,
    pub seed: Option<u64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {}", p.display(), e)))
            }
        }
    }
}

pub fn parse_kernel(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split('x').collect();
    let bad = || Error::Config(format!("bad kernel '{s}' (expected K or K1xK2)"));
    match parts.len() {
        1 => {
            let k: usize = parts[0].parse().map_err(|_| bad())?;
            Ok((k, k))
        }
        2 => Ok((parts[0].parse().map_err(|_| bad())?, parts[1].parse().map_err(|_| bad())?)),
        _ => Err(bad()),
    }
}

/// Apply a model section over a base config.
pub fn apply_model(base: &mut RpntConfig, sec: &ModelSection) -> Result<()> {
    if let Some(v) = sec.d_model {
        base.d_model = v;
    }
    if let Some(v) = sec.temporal_layers {
        base.n_temporal_layers = v;
    }
    if let Some(v) = sec.spatial_layers {
        base.n_spatial_layers = v;
    }
    if let Some(v) = sec.heads {
        base.n_heads = v;
    }
    if let Some(v) = &sec.kernel {
        base.kernel = parse_kernel(v)?;
    }
    if let Some(v) = &sec.pe {
        base.pe = v.parse::<PeKind>()?;
    }
    if let Some(v) = &sec.attention {
        base.attention = v.parse::<AttentionKind>()?;
    }
    if let Some(v) = sec.dropout {
        base.dropout = v;
    }
    if let Some(v) = sec.ffn {
        base.ffn = v;
    }
    if let Some(v) = &sec.history {
        base.history = v.parse::<HistoryMode>()?;
    }
    Ok(())
}

pub fn apply_hyper(base: &mut Hyper, sec: &HyperSection) -> Result<()> {
    if let Some(v) = sec.lr {
        base.lr = v;
    }
    if let Some(v) = sec.epochs {
        base.epochs = v;
    }
    if let Some(v) = sec.warmup_epochs {
        base.warmup_epochs = v;
    }
    if let Some(v) = sec.batch_size {
        base.batch_size = v;
    }
    if let Some(v) = sec.weight_decay {
        base.weight_decay = v;
    }
    if let Some(v) = sec.grad_clip {
        base.grad_clip = v;
    }
    if let Some(v) = sec.contrastive_weight {
        base.contrastive_weight = v;
    }
    if let Some(v) = sec.tau {
        base.tau = v;
    }
    if let Some(v) = &sec.masking {
        base.mask = v.parse::<MaskStrategy>()?;
    }
    if let Some(v) = sec.seed {
        base.seed = v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_rejects_unknown_keys() {
        let cfg: FileConfig = toml::from_str(
            r#"
            [model]
            d_model = 48
            kernel = "5x5"
            pe = "mrope"

            [pretrain]
            lr = 1e-3
            epochs = 20
            masking = "fixed:0.25,0.75"
            "#,
        )
        .unwrap();
        let mut base = RpntConfig::desk(20);
        apply_model(&mut base, cfg.model.as_ref().unwrap()).unwrap();
        assert_eq!(base.kernel, (5, 5));
        let mut hyper = Hyper::pretrain_desk(20, 1);
        apply_hyper(&mut hyper, cfg.pretrain.as_ref().unwrap()).unwrap();
        assert_eq!(hyper.lr, 1e-3);
        assert!(matches!(hyper.mask, MaskStrategy::Fixed { .. }));

        let bad: std::result::Result<FileConfig, _> = toml::from_str("[model]\nnope = 1");
        assert!(bad.is_err());
    }
}
