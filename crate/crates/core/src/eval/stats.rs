use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::intensity::percentile_sorted;

fn check_pair(x: &[f64], y: &[f64], min_n: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "paired vectors differ in length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < min_n {
        return Err(Error::InvalidArgument(format!(
            "need at least {min_n} pairs, got {}",
            x.len()
        )));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Lin's concordance correlation with population moments.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 1)?;
    let n = x.len() as f64;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    let den = sxx / n + syy / n + (mx - my) * (mx - my);
    if !(den > 0.0) {
        return Err(Error::Degenerate(
            "concordance undefined: both vectors constant with equal means".into(),
        ));
    }
    Ok(2.0 * (sxy / n) / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bootstrap {
    pub n_resamples: usize,
    pub seed: u64,
}

impl Default for Bootstrap {
    fn default() -> Self {
        Bootstrap {
            n_resamples: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CccEstimate {
    pub ccc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// CCC with a seeded percentile-bootstrap 95% interval over paired resamples.
/// Resamples on which the CCC is undefined are dropped.
pub fn lin_ccc(x: &[f64], y: &[f64], boot: Bootstrap) -> Result<CccEstimate> {
    check_pair(x, y, 3)?;
    let point = ccc(x, y)?;
    let n = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(boot.seed);
    let mut samples = Vec::with_capacity(boot.n_resamples);
    let (mut bx, mut by) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..boot.n_resamples {
        for i in 0..n {
            let j = rng.random_range(0..n);
            bx[i] = x[j];
            by[i] = y[j];
        }
        if let Ok(c) = ccc(&bx, &by) {
            samples.push(c);
        }
    }
    let (ci_low, ci_high) = if samples.is_empty() {
        (point, point)
    } else {
        samples.sort_by(|a, b| a.total_cmp(b));
        (percentile_sorted(&samples, 2.5), percentile_sorted(&samples, 97.5))
    };
    Ok(CccEstimate {
        ccc: point,
        ci_low,
        ci_high,
    })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::Degenerate("correlation undefined for a constant vector".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman's rho with a two-sided p-value from the t approximation
/// (`n - 2` degrees of freedom). `|rho| = 1` reports `p = 0`.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    check_pair(x, y, 3)?;
    let rho = pearson(&ranks(x), &ranks(y))?;
    if rho.abs() >= 1.0 {
        return Ok((rho, 0.0));
    }
    let df = (x.len() - 2) as f64;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok((rho, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub bias: f64,
    pub sd: f64,
    pub loa_low: f64,
    pub loa_high: f64,
}

/// Bias of `x - y` and 95% limits of agreement with the sample SD.
pub fn bland_altman(x: &[f64], y: &[f64]) -> Result<BlandAltman> {
    check_pair(x, y, 2)?;
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let bias = mean(&d);
    let sd = (d.iter().map(|v| (v - bias) * (v - bias)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
    Ok(BlandAltman {
        bias,
        sd,
        loa_low: bias - 1.96 * sd,
        loa_high: bias + 1.96 * sd,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub lin_ccc: f64,
    pub ccc_ci_low: f64,
    pub ccc_ci_high: f64,
    pub spearman_rho: f64,
    pub spearman_p: f64,
    pub bland_altman_bias: f64,
    pub loa_low: f64,
    pub loa_high: f64,
}

/// All agreement statistics for paired (predicted, reference) values.
pub fn agreement(pred: &[f64], reference: &[f64], boot: Bootstrap) -> Result<AgreementStats> {
    let c = lin_ccc(pred, reference, boot)?;
    let (rho, p) = spearman(pred, reference)?;
    let ba = bland_altman(pred, reference)?;
    Ok(AgreementStats {
        lin_ccc: c.ccc,
        ccc_ci_low: c.ci_low,
        ccc_ci_high: c.ci_high,
        spearman_rho: rho,
        spearman_p: p,
        bland_altman_bias: ba.bias,
        loa_low: ba.loa_low,
        loa_high: ba.loa_high,
    })
}
