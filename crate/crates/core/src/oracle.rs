//! Reference decoders independent of the transformer path: a ridge-regularized
//! linear readout fit by normal equations, and the exact Bayes posterior-mean
//! decoder over the synthetic generator's reach-parameter family. Both serve
//! as ceilings/floors for the learned decoder in tests.

use crate::data::{ReachModel, SessionTruth, SyntheticConfig};
use crate::error::{Error, Result};
use crate::tape::softplus_scalar;
use crate::tensor::Tensor;

/// Solve A x = b for symmetric positive-definite A (in-place Cholesky).
fn solve_spd(a: &mut [f64], b: &mut [f64], n: usize) -> Result<()> {
    // factor
    for j in 0..n {
        for k in 0..j {
            let ljk = a[j * n + k];
            for i in j..n {
                a[i * n + j] -= a[i * n + k] * ljk;
            }
        }
        let d = a[j * n + j];
        if d <= 0.0 {
            return Err(Error::Numeric("normal equations are not positive definite".into()));
        }
        let s = d.sqrt();
        for i in j..n {
            a[i * n + j] /= s;
        }
    }
    // forward substitution L y = b
    for i in 0..n {
        for k in 0..i {
            b[i] -= a[i * n + k] * b[k];
        }
        b[i] /= a[i * n + i];
    }
    // back substitution L^T x = y
    for i in (0..n).rev() {
        for k in i + 1..n {
            b[i] -= a[k * n + i] * b[k];
        }
        b[i] /= a[i * n + i];
    }
    Ok(())
}

/// Per-bin linear decoder `[N+1] -> 2` fit by ridge-regularized least squares.
pub struct LinearDecoder {
    /// `[N+1, 2]`, last row is the intercept.
    pub weights: Vec<f64>,
    pub n_features: usize,
}

impl LinearDecoder {
    /// `x`: `[rows, N]` features, `y`: `[rows, 2]` targets.
    pub fn fit(x: &Tensor, y: &Tensor, ridge: f64) -> Result<LinearDecoder> {
        if x.shape.len() != 2 || y.shape.len() != 2 || y.shape[1] != 2 {
            return Err(Error::Shape(format!(
                "linear decoder expects [rows,N] and [rows,2], got {:?} / {:?}",
                x.shape, y.shape
            )));
        }
        let rows = x.shape[0];
        if y.shape[0] != rows {
            return Err(Error::Shape("feature/target row mismatch".into()));
        }
        let n = x.shape[1];
        let p = n + 1;
        let feat = |r: usize, j: usize| if j < n { x.data[r * n + j] } else { 1.0 };
        let mut xtx = vec![0.0; p * p];
        for r in 0..rows {
            for i in 0..p {
                let fi = feat(r, i);
                if fi == 0.0 {
                    continue;
                }
                for j in 0..p {
                    xtx[i * p + j] += fi * feat(r, j);
                }
            }
        }
        for i in 0..p {
            xtx[i * p + i] += ridge;
        }
        let mut weights = vec![0.0; p * 2];
        for dim in 0..2 {
            let mut rhs = vec![0.0; p];
            for r in 0..rows {
                let t = y.data[r * 2 + dim];
                for i in 0..p {
                    rhs[i] += feat(r, i) * t;
                }
            }
            let mut a = xtx.clone();
            solve_spd(&mut a, &mut rhs, p)?;
            for i in 0..p {
                weights[i * 2 + dim] = rhs[i];
            }
        }
        Ok(LinearDecoder { weights, n_features: n })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape.len() != 2 || x.shape[1] != self.n_features {
            return Err(Error::Shape(format!(
                "expected [rows,{}], got {:?}",
                self.n_features, x.shape
            )));
        }
        let rows = x.shape[0];
        let n = self.n_features;
        let mut out = Tensor::zeros(&[rows, 2]);
        for r in 0..rows {
            for dim in 0..2 {
                let mut s = self.weights[n * 2 + dim];
                for j in 0..n {
                    s += x.data[r * n + j] * self.weights[j * 2 + dim];
                }
                out.data[r * 2 + dim] = s;
            }
        }
        Ok(out)
    }
}

/// Exact posterior-mean velocity decoder under the generator's model: the
/// reach family is (direction, amplitude) with known tuning and drift gains,
/// so the posterior is a sum over a discrete direction/amplitude grid.
pub struct BayesDecoder<'a> {
    pub cfg: &'a SyntheticConfig,
    pub truth: &'a SessionTruth,
    /// Amplitude integration grid over the generator's U(0.8, 1.2) draw.
    pub amplitude_grid: usize,
}

impl<'a> BayesDecoder<'a> {
    pub fn new(cfg: &'a SyntheticConfig, truth: &'a SessionTruth) -> Self {
        BayesDecoder { cfg, truth, amplitude_grid: 17 }
    }

    fn candidate_angles(&self) -> Vec<f64> {
        match self.cfg.reach {
            ReachModel::CenterOut { n_targets } => (0..n_targets)
                .map(|k| k as f64 * std::f64::consts::TAU / n_targets as f64)
                .collect(),
            // continuous directions: a fine grid is still exact up to
            // quadrature error
            ReachModel::RandomTarget => {
                (0..64).map(|k| k as f64 * std::f64::consts::TAU / 64.0).collect()
            }
        }
    }

    /// Posterior-mean velocities for trials `[C, T, N]` (counts of the
    /// held-out session, standardized width). `trial_offset` aligns rows of
    /// `counts` with the truth's trial axis.
    pub fn decode(&self, counts: &Tensor, trial_offset: usize) -> Result<Tensor> {
        if counts.shape.len() != 3 {
            return Err(Error::Shape(format!("expected [C,T,N], got {:?}", counts.shape)));
        }
        let (c, t, n) = (counts.shape[0], counts.shape[1], counts.shape[2]);
        if n != self.truth.theta.len() {
            return Err(Error::Shape(format!(
                "counts have {} neurons, truth has {}",
                n,
                self.truth.theta.len()
            )));
        }
        let dt = self.cfg.bin_ms / 1000.0;
        let angles = self.candidate_angles();
        let amps: Vec<f64> = (0..self.amplitude_grid)
            .map(|i| 0.8 + 0.4 * (i as f64 + 0.5) / self.amplitude_grid as f64)
            .collect();

        // speed profile at bin centers for unit amplitude
        let profile: Vec<f64> = (0..t)
            .map(|ti| {
                crate::data::min_jerk_velocity(
                    (ti as f64 + 0.5) * dt,
                    0.1,
                    0.7,
                    self.cfg.reach_radius,
                )
            })
            .collect();

        let mut out = Tensor::zeros(&[c, t, 2]);
        for ci in 0..c {
            let gain_row = &self.truth.gains
                [(trial_offset + ci) * n..(trial_offset + ci + 1) * n];
            let mut log_posts = Vec::with_capacity(angles.len() * amps.len());
            for &ang in &angles {
                let (ca, sa) = (ang.cos(), ang.sin());
                for &amp in &amps {
                    let mut lp = 0.0;
                    for ti in 0..t {
                        let vx = amp * profile[ti] * ca;
                        let vy = amp * profile[ti] * sa;
                        for ni in 0..n {
                            let lam = softplus_scalar(
                                self.truth.baseline[ni]
                                    + self.truth.gain_coef[ni]
                                        * (self.truth.theta[ni].cos() * vx
                                            + self.truth.theta[ni].sin() * vy),
                            ) * gain_row[ni]
                                * dt;
                            let x = counts.data[(ci * t + ti) * n + ni];
                            lp += x * (lam + 1e-12).ln() - lam;
                        }
                    }
                    log_posts.push(lp);
                }
            }
            let mx = log_posts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for lp in log_posts.iter_mut() {
                *lp = (*lp - mx).exp();
                z += *lp;
            }
            let mut k = 0;
            for &ang in &angles {
                let (ca, sa) = (ang.cos(), ang.sin());
                for &amp in &amps {
                    let w = log_posts[k] / z;
                    k += 1;
                    if w < 1e-12 {
                        continue;
                    }
                    for ti in 0..t {
                        out.data[(ci * t + ti) * 2] += w * amp * profile[ti] * ca;
                        out.data[(ci * t + ti) * 2 + 1] += w * amp * profile[ti] * sa;
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_session;
    use crate::objectives::r2_score;
    use approx::assert_abs_diff_eq;

    #[test]
    fn least_squares_recovers_exact_linear_map() {
        // y = W x with no noise: fit must reach r2 ~ 1
        let rows = 60;
        let n = 5;
        let mut x = Tensor::zeros(&[rows, n]);
        let mut y = Tensor::zeros(&[rows, 2]);
        let w = [0.5, -1.0, 2.0, 0.0, 1.5, 0.3, -0.7, 0.2, 1.1, -0.4];
        for r in 0..rows {
            for j in 0..n {
                x.data[r * n + j] = ((r * 7 + j * 3) % 11) as f64 - 5.0;
            }
            for d in 0..2 {
                let mut s = 0.25; // intercept
                for j in 0..n {
                    s += x.data[r * n + j] * w[j * 2 + d];
                }
                y.data[r * 2 + d] = s;
            }
        }
        let dec = LinearDecoder::fit(&x, &y, 1e-9).unwrap();
        let pred = dec.predict(&x).unwrap();
        let r2 = r2_score(&pred, &y).unwrap();
        assert!(r2 >= 0.99, "linear-decodability oracle r2 {r2}");
    }

    #[test]
    fn bayes_decoder_beats_chance_on_generated_data() {
        let mut cfg = SyntheticConfig::desk(1, 20, 40, 17);
        cfg.drift_sigma = 0.0;
        let s = generate_session(&cfg, 0).unwrap();
        let dec = BayesDecoder::new(&cfg, &s.truth);
        let pred = dec.decode(&s.counts, 0).unwrap();
        let r2 = r2_score(&pred, &s.velocity).unwrap();
        assert!(r2 > 0.5, "bayes oracle r2 {r2}");
    }

    #[test]
    fn solve_spd_matches_hand_inverse() {
        let mut a = vec![4.0, 2.0, 2.0, 3.0];
        let mut b = vec![10.0, 8.0];
        solve_spd(&mut a, &mut b, 2).unwrap();
        // [[4,2],[2,3]] x = [10,8] -> x = [1.75, 1.5]
        assert_abs_diff_eq!(b[0], 1.75, epsilon = 1e-12);
        assert_abs_diff_eq!(b[1], 1.5, epsilon = 1e-12);
    }
}
