//! Sample-quality metrics: MSE, PSNR, SSIM, the flow consistency score, and
//! Wasserstein estimators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{mask_project, warp, Field2D, Mask2D, VelocityField2D};

/// Mean of squared differences.
pub fn mse(a: &Field2D, b: &Field2D) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::RejectedInput("mse: shape mismatch".into()));
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

/// `10·log₁₀(peak²/mse)`; identical fields report `+∞`.
pub fn psnr(a: &Field2D, b: &Field2D, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Single-scale SSIM: 8×8 sliding window (stride 1), plain window moments,
/// stabilizers `c₁ = (0.01·peak)²`, `c₂ = (0.03·peak)²`, mean over windows.
/// Inputs are expected pre-normalized to [0, 1] (`peak = 1`).
pub fn ssim(a: &Field2D, b: &Field2D) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::RejectedInput("ssim: shape mismatch".into()));
    }
    let peak = 1.0;
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let win = 8usize.min(a.width()).min(a.height());
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for wy in 0..=(a.height() - win) {
        for wx in 0..=(a.width() - win) {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in wy..wy + win {
                for x in wx..wx + win {
                    let (va, vb) = (a.get(x, y), b.get(x, y));
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            let score = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += score;
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// Flow-residual consistency over a frame sequence:
/// `Σ_s ‖P(warp(x_{s−1}, v_s) − x_s)‖² / ‖P(x_{s−1})‖`.
///
/// The denominator is the unsquared norm of the projected previous frame, as
/// printed in the defining formula.
pub fn consistency_score(
    frames: &[Field2D],
    flows: &[VelocityField2D],
    masks: &[Mask2D],
) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::RejectedInput("consistency needs at least two frames".into()));
    }
    if flows.len() != frames.len() - 1 || masks.len() != flows.len() {
        return Err(Error::RejectedInput(format!(
            "consistency: {} frames need {} flows/masks, got {}/{}",
            frames.len(),
            frames.len() - 1,
            flows.len(),
            masks.len()
        )));
    }
    let mut total = 0.0;
    for s in 1..frames.len() {
        let predicted = warp(&frames[s - 1], &flows[s - 1], 1.0)?;
        let residual = mask_project(&predicted.add_scaled(&frames[s], -1.0), &masks[s - 1])?;
        let denom = mask_project(&frames[s - 1], &masks[s - 1])?.l2_norm();
        if denom == 0.0 {
            return Err(Error::UndefinedScore("zero projected-frame norm".into()));
        }
        total += residual.dot(&residual) / denom;
    }
    Ok(total)
}

/// Order-statistics estimate of the 1-D Wasserstein-2 distance:
/// `sqrt(mean((sort(a) − sort(b))²))`. Requires equal sample counts.
pub fn wasserstein_1d(samples_a: &[f64], samples_b: &[f64]) -> Result<f64> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(Error::RejectedInput("wasserstein: empty input".into()));
    }
    if samples_a.len() != samples_b.len() {
        return Err(Error::RejectedInput("wasserstein: sample counts differ".into()));
    }
    let mut a = samples_a.to_vec();
    let mut b = samples_b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let sum: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sum / a.len() as f64).sqrt())
}

/// Sliced Wasserstein-2 between two sets of fields: mean over seeded random
/// unit directions of the 1-D estimate on the projected samples.
pub fn sliced_wasserstein_2d(
    fields_a: &[Field2D],
    fields_b: &[Field2D],
    n_projections: usize,
    seed: u64,
) -> Result<f64> {
    if n_projections == 0 {
        return Err(Error::RejectedInput("need at least one projection".into()));
    }
    let first = fields_a
        .first()
        .ok_or_else(|| Error::RejectedInput("sliced wasserstein: empty input".into()))?;
    let dim = first.data().len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n_projections {
        let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        for v in &mut dir {
            *v /= norm;
        }
        let project = |fs: &[Field2D]| -> Vec<f64> {
            fs.iter()
                .map(|f| f.data().iter().zip(&dir).map(|(a, d)| a * d).sum())
                .collect()
        };
        total += wasserstein_1d(&project(fields_a), &project(fields_b))?;
    }
    Ok(total / n_projections as f64)
}

/// Per-sample metric values for one evaluated record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub method: String,
    pub split: String,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub consistency: Option<f64>,
}

/// Mean and standard deviation (n−1 denominator) of one metric column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    let n = values.len();
    if n == 0 {
        return Aggregate { mean: f64::NAN, std: f64::NAN, count: 0 };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Aggregate { mean, std, count: n }
}
