use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{validation_err, Error, Result};

/// Absolute tolerance of the logged total-loss identity.
pub const LOG_IDENTITY_TOL: f64 = 1e-6;

/// Loss values of one step, measured before that step's update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub step: usize,
    pub l_det: f64,
    pub l_ria: f64,
    pub l_msia: f64,
    pub l_mlcr: f64,
    pub l_total: f64,
    pub lambda_da: f64,
}

impl LossBundle {
    pub fn new(
        step: usize,
        l_det: f64,
        l_ria: f64,
        l_msia: f64,
        l_mlcr: f64,
        lambda_da: f64,
    ) -> Result<Self> {
        let l_total = compose_total_loss(l_det, l_ria, l_msia, l_mlcr, lambda_da)?;
        Ok(Self {
            step,
            l_det,
            l_ria,
            l_msia,
            l_mlcr,
            l_total,
            lambda_da,
        })
    }

    /// `|l_total - (l_det + lambda_da * (l_ria + l_msia + l_mlcr))|`.
    pub fn identity_residual(&self) -> f64 {
        (self.l_total - (self.l_det + self.lambda_da * (self.l_ria + self.l_msia + self.l_mlcr)))
            .abs()
    }

    /// Component-wise mean of several bundles, tagged with `step`.
    pub fn mean(step: usize, items: &[LossBundle]) -> Result<Self> {
        let n = items.len().max(1) as f64;
        let avg = |f: fn(&LossBundle) -> f64| items.iter().map(f).sum::<f64>() / n;
        let lambda = items.first().map_or(0.0, |b| b.lambda_da);
        Self::new(
            step,
            avg(|b| b.l_det),
            avg(|b| b.l_ria),
            avg(|b| b.l_msia),
            avg(|b| b.l_mlcr),
            lambda,
        )
    }
}

/// `l_det + lambda_da * (l_ria + l_msia + l_mlcr)`; a non-finite input aborts
/// with an error naming it.
pub fn compose_total_loss(
    l_det: f64,
    l_ria: f64,
    l_msia: f64,
    l_mlcr: f64,
    lambda_da: f64,
) -> Result<f64> {
    let parts = [
        ("l_det", l_det),
        ("l_ria", l_ria),
        ("l_msia", l_msia),
        ("l_mlcr", l_mlcr),
        ("lambda_da", lambda_da),
    ];
    if let Some((name, v)) = parts.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Divergence {
            message: format!("{name} is {v}"),
            recent: Vec::new(),
        });
    }
    Ok(l_det + lambda_da * (l_ria + l_msia + l_mlcr))
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    #[serde(flatten)]
    pub losses: LossBundle,
    pub lr_backbone: f64,
    pub lr_rest: f64,
    pub grl_lambda: f64,
    /// Validation mAP, present on evaluation steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogReport {
    pub lines: usize,
    pub max_residual: f64,
}

/// Check every line of a metrics log against the total-loss identity.
pub fn validate_metrics_log(path: &Path) -> Result<LogReport> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut report = LogReport {
        lines: 0,
        max_residual: 0.0,
    };
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsLine = serde_json::from_str(&line)
            .map_err(|e| validation_err!("{} line {}: {e}", path.display(), i + 1))?;
        let r = rec.losses.identity_residual();
        if !(r <= LOG_IDENTITY_TOL) {
            return Err(validation_err!(
                "{} line {} (step {}): l_total differs from its components by {r:e}",
                path.display(),
                i + 1,
                rec.losses.step
            ));
        }
        report.lines += 1;
        report.max_residual = report.max_residual.max(r);
    }
    Ok(report)
}
