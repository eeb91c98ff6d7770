//! Contrastive coupling loss over paired embeddings, with exact gradients
//! for both towers.
//!
//! Genuine pairs (y = 0) pay 0.5*D^2; impostor pairs (y = 1) pay
//! 0.5*max(0, m - D)^2 where D is the Euclidean distance between the two
//! embeddings and m is the margin.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ContrastiveConfig {
    pub margin: f64,
    pub distance_epsilon: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            margin: 1.0,
            distance_epsilon: 1e-12,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin <= 0.0 {
            return Err(Error::Config("margin must be positive".into()));
        }
        if self.distance_epsilon <= 0.0 {
            return Err(Error::Config("distance_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Euclidean distance between two embeddings.
pub fn pair_distance(z1: &[f64], z2: &[f64]) -> Result<f64> {
    if z1.len() != z2.len() {
        return Err(Error::ShapeMismatch(format!(
            "embedding dims {} vs {}",
            z1.len(),
            z2.len()
        )));
    }
    Ok(z1
        .iter()
        .zip(z2.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

pub fn contrastive_loss(z1: &[f64], z2: &[f64], y_cont: u8, cfg: &ContrastiveConfig) -> Result<f64> {
    if y_cont > 1 {
        return Err(Error::InvalidInput(format!("y_cont must be 0 or 1, got {y_cont}")));
    }
    let d = pair_distance(z1, z2)?;
    Ok(if y_cont == 0 {
        0.5 * d * d
    } else {
        let hinge = (cfg.margin - d).max(0.0);
        0.5 * hinge * hinge
    })
}

/// Analytic gradients (d loss / d z1, d loss / d z2). At the impostor
/// D -> 0 singularity the zero subgradient is chosen.
pub fn contrastive_grad(
    z1: &[f64],
    z2: &[f64],
    y_cont: u8,
    cfg: &ContrastiveConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if y_cont > 1 {
        return Err(Error::InvalidInput(format!("y_cont must be 0 or 1, got {y_cont}")));
    }
    let d = pair_distance(z1, z2)?;
    let diff: Vec<f64> = z1.iter().zip(z2.iter()).map(|(a, b)| a - b).collect();
    let g1: Vec<f64> = if y_cont == 0 {
        diff
    } else if d >= cfg.margin || d < cfg.distance_epsilon {
        vec![0.0; z1.len()]
    } else {
        let scale = -(cfg.margin - d) / d;
        diff.iter().map(|&v| scale * v).collect()
    };
    let g2: Vec<f64> = g1.iter().map(|&v| -v).collect();
    Ok((g1, g2))
}

/// Arithmetic mean of per-pair losses.
pub fn batch_loss(pairs: &[(Vec<f64>, Vec<f64>, u8)], cfg: &ContrastiveConfig) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut total = 0.0;
    for (z1, z2, y) in pairs {
        total += contrastive_loss(z1, z2, *y, cfg)?;
    }
    Ok(total / pairs.len() as f64)
}
