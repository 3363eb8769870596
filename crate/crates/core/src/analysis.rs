//! Statistical and structural analysis: classification-layer weight-angle
//! matrices, spectral-norm bound verification for the masked layer, the
//! paired Student's t-test, and multi-round aggregation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::MaskMatrix;
use crate::linalg::{dot, spectral_norm, Matrix, SPECTRAL_NORM_ITERS, SPECTRAL_NORM_TOL};
use crate::training::RunResult;

// ---------------------------------------------------------------------------
// Weight angles

/// Pairwise angles (degrees) between classification-layer weight columns.
/// Symmetric, zero diagonal, entries in [0, 180].
#[derive(Clone, Debug, Serialize)]
pub struct AngleMatrix {
    pub degrees: Vec<Vec<f64>>,
}

impl AngleMatrix {
    pub fn classes(&self) -> usize {
        self.degrees.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.degrees[i][j]
    }

    /// Upper-triangle off-diagonal entries, row by row.
    pub fn off_diagonal(&self) -> Vec<f64> {
        let k = self.classes();
        let mut out = Vec::with_capacity(k * (k - 1) / 2);
        for i in 0..k {
            for j in (i + 1)..k {
                out.push(self.degrees[i][j]);
            }
        }
        out
    }
}

/// Angle matrix of a classification layer given one weight column per
/// class. A dot product of exactly zero yields exactly 90 degrees, so
/// orthogonality checks on masked layers are bit-level.
pub fn angle_matrix(weights: &Matrix) -> Result<AngleMatrix> {
    let k = weights.cols();
    let columns: Vec<Vec<f64>> = (0..k).map(|c| weights.column(c)).collect();
    let squared_norms: Vec<f64> = columns.iter().map(|c| dot(c, c)).collect();
    for (class, &sq) in squared_norms.iter().enumerate() {
        if sq == 0.0 {
            return Err(Error::DegenerateWeights { class });
        }
    }
    let mut degrees = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in (i + 1)..k {
            // Single square root of the norm product: exact 1.0 for
            // duplicated columns, exact 0.0 numerator for disjoint supports.
            let cos = (dot(&columns[i], &columns[j])
                / (squared_norms[i] * squared_norms[j]).sqrt())
            .clamp(-1.0, 1.0);
            let angle = cos.acos().to_degrees();
            degrees[i][j] = angle;
            degrees[j][i] = angle;
        }
    }
    Ok(AngleMatrix { degrees })
}

// ---------------------------------------------------------------------------
// Norm bounds

/// Monte-Carlo check of the spectral-norm inequalities behind the masked
/// layer's complexity bound: with |W| <= B entrywise,
/// sigma_max(M ⊙ W) <= sqrt(d)·B and sigma_max(W) <= sqrt(d·k)·B.
#[derive(Clone, Debug, Serialize)]
pub struct NormBoundReport {
    pub d: usize,
    pub k: usize,
    pub bound_b: f64,
    pub trials: usize,
    pub seed: u64,
    /// Largest observed sigma_max(M ⊙ W) / (sqrt(d)·B).
    pub max_ratio_masked: f64,
    /// Largest observed sigma_max(W) / (sqrt(d·k)·B).
    pub max_ratio_full: f64,
    pub violations: usize,
}

pub fn verify_norm_bounds(
    d: usize,
    k: usize,
    bound_b: f64,
    trials: usize,
    seed: u64,
) -> Result<NormBoundReport> {
    if trials < 1 {
        return Err(Error::Argument("need at least one trial".into()));
    }
    if bound_b <= 0.0 {
        return Err(Error::Argument(format!("bound must be > 0, got {bound_b}")));
    }
    let mask = MaskMatrix::build(d, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masked_bound = (d as f64).sqrt() * bound_b;
    let full_bound = ((d * k) as f64).sqrt() * bound_b;
    let mut max_ratio_masked = 0.0f64;
    let mut max_ratio_full = 0.0f64;
    let mut violations = 0;
    for _ in 0..trials {
        let w = Matrix::from_fn(d, k, |_, _| rng.gen_range(-bound_b..=bound_b));
        let sigma_full = spectral_norm(&w, SPECTRAL_NORM_ITERS, SPECTRAL_NORM_TOL);
        let sigma_masked = spectral_norm(
            &w.hadamard(mask.matrix())?,
            SPECTRAL_NORM_ITERS,
            SPECTRAL_NORM_TOL,
        );
        let ratio_masked = sigma_masked / masked_bound;
        let ratio_full = sigma_full / full_bound;
        if ratio_masked > 1.0 || ratio_full > 1.0 {
            violations += 1;
        }
        max_ratio_masked = max_ratio_masked.max(ratio_masked);
        max_ratio_full = max_ratio_full.max(ratio_full);
    }
    Ok(NormBoundReport {
        d,
        k,
        bound_b,
        trials,
        seed,
        max_ratio_masked,
        max_ratio_full,
        violations,
    })
}

// ---------------------------------------------------------------------------
// Paired t-test

#[derive(Clone, Debug, Serialize)]
pub struct TTestReport {
    pub n: usize,
    pub mean_diff: f64,
    pub t_statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    pub significant: bool,
}

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// Paired Student's t-test on matched samples: t = mean(d) / (std(d)/sqrt(n))
/// with the sample standard deviation, two-tailed p-value through the
/// regularized incomplete beta form of the t CDF.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTestReport> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "paired test needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Argument(format!("paired test needs n >= 2, got {n}")));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    if std == 0.0 {
        return Err(Error::DegenerateTest { mean_diff: mean });
    }
    let t = mean / (std / (n as f64).sqrt());
    let df = (n - 1) as f64;
    let p = two_tailed_p(t, df);
    Ok(TTestReport {
        n,
        mean_diff: mean,
        t_statistic: t,
        degrees_of_freedom: n - 1,
        p_value: p,
        significant: p < SIGNIFICANCE_LEVEL,
    })
}

/// Two-tailed p-value of a t statistic: I_x(df/2, 1/2) at x = df/(df + t²).
pub fn two_tailed_p(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    regularized_incomplete_beta(df / 2.0, 0.5, x).max(f64::MIN_POSITIVE)
}

/// Regularized incomplete beta I_x(a, b) by Lentz continued fraction.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // The continued fraction converges fast for x below the dividing point;
    // use the symmetry I_x(a,b) = 1 - I_{1-x}(b,a) above it.
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let mf = m as f64;
        let m2 = 2.0 * mf;
        let aa = mf * (b - mf) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + mf) * (qab + mf) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation (g = 7, 9 coefficients).
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut acc = 0.999_999_999_999_809_9;
        for (i, &c) in COEFFS.iter().enumerate() {
            acc += c / (x + i as f64 + 1.0);
        }
        let t = x + 7.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
    }
}

// ---------------------------------------------------------------------------
// Aggregation

/// Summary statistics over per-round accuracies: sample std (n-1 in the
/// denominator), quartiles by linear interpolation between closest ranks,
/// outliers beyond 1.5 IQR from the quartile edges.
#[derive(Clone, Debug, Serialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub outliers: Vec<f64>,
}

pub fn aggregate_values(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::Argument("cannot aggregate zero results".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite accuracies"));
    let q1 = quantile(&sorted, 0.25);
    let median = quantile(&sorted, 0.5);
    let q3 = quantile(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let outliers = sorted
        .iter()
        .copied()
        .filter(|&v| v < lo || v > hi)
        .collect();
    Ok(Aggregate {
        n,
        mean,
        std,
        min: sorted[0],
        q1,
        median,
        q3,
        max: sorted[n - 1],
        outliers,
    })
}

/// Aggregate the test accuracies of finished rounds.
pub fn aggregate(results: &[RunResult]) -> Result<Aggregate> {
    let accs: Vec<f64> = results.iter().map(|r| r.test_acc).collect();
    aggregate_values(&accs)
}

/// Linear interpolation between closest ranks on sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}
