use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{full_st_attention, stm_attention, ChannelPlan, TokenField};
use crate::error::{Error, Result};
use crate::mac::MacCounter;
use crate::tensor::Tensor;
use crate::textfmt::fmt_g;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionModel {
    /// Space-time mixing attention with `t_w = 1`.
    Stm,
    /// Joint attention over all `T·S` tokens.
    Full,
}

impl AttentionModel {
    pub fn name(self) -> &'static str {
        match self {
            AttentionModel::Stm => "stm",
            AttentionModel::Full => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScalingRow {
    pub frames: usize,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub model: AttentionModel,
    pub tokens: usize,
    pub head_dim: usize,
    pub rows: Vec<ScalingRow>,
    /// Least-squares slope of `ln MACs` against `ln T`.
    pub slope: f64,
}

impl ScalingReport {
    /// `model,T,S,dh,macs` rows without a header.
    pub fn csv_rows(&self) -> String {
        self.rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{}\n",
                    self.model.name(),
                    r.frames,
                    self.tokens,
                    self.head_dim,
                    r.macs
                )
            })
            .collect()
    }

    pub fn slope_line(&self) -> String {
        format!("# slope {} {}\n", self.model.name(), fmt_g(self.slope, 6))
    }
}

pub const SCALING_CSV_HEADER: &str = "model,T,S,dh,macs\n";

/// Ordinary least-squares slope of `y` on `x`.
pub fn least_squares_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::invalid("slope fit needs at least two points"));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("slope fit needs distinct x values"));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Ok(sxy / sxx)
}

/// Runs one forward pass per entry of `frames` on a single head of seeded
/// random tokens and counts its MACs.
pub fn mac_scaling_experiment(
    model: AttentionModel,
    frames: &[usize],
    tokens: usize,
    head_dim: usize,
    seed: u64,
) -> Result<ScalingReport> {
    if frames.len() < 3 {
        return Err(Error::invalid(
            "mac_scaling_experiment: need at least three T values",
        ));
    }
    if frames.contains(&0) || tokens == 0 || head_dim == 0 {
        return Err(Error::invalid(
            "mac_scaling_experiment: extents must be positive",
        ));
    }
    let plan = ChannelPlan::build(head_dim, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(frames.len());
    for &t in frames {
        let mut draw = || Tensor::uniform(vec![t, tokens, head_dim], 1.0, &mut rng);
        let field = TokenField::single_head(draw()?, draw()?, draw()?)?;
        let (out, macs) = MacCounter::measure(|| match model {
            AttentionModel::Stm => stm_attention(&field, &plan),
            AttentionModel::Full => full_st_attention(&field),
        });
        out?;
        rows.push(ScalingRow { frames: t, macs });
    }
    let points: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| ((r.frames as f64).ln(), (r.macs as f64).ln()))
        .collect();
    let slope = least_squares_slope(&points)?;
    Ok(ScalingReport {
        model,
        tokens,
        head_dim,
        rows,
        slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law() {
        let pts: Vec<(f64, f64)> = (1..5).map(|i| (i as f64, 3.0 * i as f64 + 1.0)).collect();
        assert!((least_squares_slope(&pts).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_points_rejected() {
        assert!(mac_scaling_experiment(AttentionModel::Stm, &[2, 4], 4, 4, 0).is_err());
    }

    #[test]
    fn models_agree_on_one_frame() {
        let a = mac_scaling_experiment(AttentionModel::Stm, &[1, 2, 3], 5, 6, 0).unwrap();
        let b = mac_scaling_experiment(AttentionModel::Full, &[1, 2, 3], 5, 6, 0).unwrap();
        assert_eq!(a.rows[0], b.rows[0]);
        assert_eq!(a.rows[1].macs * 2, b.rows[1].macs);
    }
}
