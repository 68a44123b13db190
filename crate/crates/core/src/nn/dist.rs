//! Diagonal-Gaussian and categorical distribution math.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tape::{log_sum_exp, Tape, Var};
use crate::error::{IcesError, Result};
use crate::par;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Diagonal Gaussian over the latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl LatentGaussian {
    /// Builds a distribution, clamping `log_var` into `[-10, 10]`.
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(IcesError::Dimension(format!(
                "mean has {} dims, log_var has {}",
                mean.len(),
                log_var.len()
            )));
        }
        let log_var = log_var.into_iter().map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).collect();
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], log_var: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(x)
            .map(|((m, lv), x)| -0.5 * (ln_2pi + lv + (x - m) * (x - m) / lv.exp()))
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let noise: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        reparameterize(self, &noise).expect("noise sized to dim")
    }
}

/// Closed-form `KL(p ‖ q)` between diagonal Gaussians.
pub fn kl_diag_gaussian(p: &LatentGaussian, q: &LatentGaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(IcesError::Dimension(format!("KL between {}-d and {}-d", p.dim(), q.dim())));
    }
    let finite = |d: &LatentGaussian| d.mean.iter().chain(&d.log_var).all(|x| x.is_finite());
    if !finite(p) || !finite(q) {
        return Err(IcesError::Numeric("non-finite Gaussian parameters".into()));
    }
    let kl = (0..p.dim())
        .map(|d| {
            let (mp, lp, mq, lq) = (p.mean[d], p.log_var[d], q.mean[d], q.log_var[d]);
            0.5 * (lq - lp) + (lp.exp() + (mp - mq) * (mp - mq)) / (2.0 * lq.exp()) - 0.5
        })
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// Row-wise `KL(p ‖ q)` on the tape; inputs are `[B, L]`, output `[B, 1]`.
pub fn kl_diag_gaussian_rows(
    tape: &mut Tape,
    mean_p: Var,
    log_var_p: Var,
    mean_q: Var,
    log_var_q: Var,
) -> Var {
    // ½ Σ [ lq − lp + (e^{lp} + (mp − mq)²) e^{−lq} − 1 ]
    let dlv = tape.sub(log_var_q, log_var_p);
    let var_p = tape.exp(log_var_p);
    let dm = tape.sub(mean_p, mean_q);
    let dm2 = tape.square(dm);
    let num = tape.add(var_p, dm2);
    let neg_lq = tape.neg(log_var_q);
    let inv_var_q = tape.exp(neg_lq);
    let ratio = tape.mul(num, inv_var_q);
    let inner = tape.add(dlv, ratio);
    let inner = tape.add_scalar(inner, -1.0);
    let s = tape.sum_cols(inner);
    tape.scale(s, 0.5)
}

/// `mean + exp(log_var / 2) ⊙ noise`.
pub fn reparameterize(dist: &LatentGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != dist.dim() {
        return Err(IcesError::Dimension(format!(
            "noise has {} entries for a {}-d latent",
            noise.len(),
            dist.dim()
        )));
    }
    Ok(dist
        .mean
        .iter()
        .zip(&dist.log_var)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Differentiable reparameterised sample: `[B, L]` inputs and noise.
pub fn reparameterize_rows(tape: &mut Tape, mean: Var, log_var: Var, noise: Var) -> Var {
    let half = tape.scale(log_var, 0.5);
    let std = tape.exp(half);
    let scaled = tape.mul(std, noise);
    tape.add(mean, scaled)
}

/// Monte-Carlo estimate of `KL(p ‖ q) = E_p[log p − log q]` using `samples`
/// draws split into fixed chunks with their own seeds.
pub fn monte_carlo_kl(p: &LatentGaussian, q: &LatentGaussian, samples: usize, seed: u64) -> f64 {
    const CHUNK: usize = 50_000;
    let chunks = samples.div_ceil(CHUNK);
    let partial = par::map_indexed(chunks, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let n = CHUNK.min(samples - c * CHUNK);
        (0..n)
            .map(|_| {
                let x = p.sample(&mut rng);
                p.log_density(&x) - q.log_density(&x)
            })
            .sum::<f64>()
    });
    partial.iter().sum::<f64>() / samples as f64
}

/// Categorical distribution parameterised by logits.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalDist {
    pub logits: Vec<f64>,
}

impl CategoricalDist {
    pub fn new(logits: Vec<f64>) -> Self {
        Self { logits }
    }

    fn check(&self) -> Result<()> {
        if self.logits.is_empty() || self.logits.iter().all(|x| *x == f64::NEG_INFINITY) {
            return Err(IcesError::DegenerateDistribution("all logits are -inf".into()));
        }
        if self.logits.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(IcesError::Numeric("non-finite logits".into()));
        }
        Ok(())
    }

    pub fn probs(&self) -> Result<Vec<f64>> {
        self.check()?;
        let lse = log_sum_exp(&self.logits);
        Ok(self.logits.iter().map(|l| (l - lse).exp()).collect())
    }

    pub fn log_probs(&self) -> Result<Vec<f64>> {
        self.check()?;
        let lse = log_sum_exp(&self.logits);
        Ok(self.logits.iter().map(|l| l - lse).collect())
    }
}

pub fn categorical_sample<R: Rng + ?Sized>(dist: &CategoricalDist, rng: &mut R) -> Result<usize> {
    let probs = dist.probs()?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            last_positive = k;
        }
        acc += p;
        if u < acc {
            return Ok(k);
        }
    }
    Ok(last_positive)
}

/// `−Σ p log p`, in `[0, log |U|]`.
pub fn categorical_entropy(dist: &CategoricalDist) -> Result<f64> {
    let lp = dist.log_probs()?;
    let h = lp
        .iter()
        .filter(|l| l.is_finite())
        .map(|l| -l.exp() * l)
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(mean: &[f64], log_var: &[f64]) -> LatentGaussian {
        LatentGaussian::new(mean.to_vec(), log_var.to_vec()).unwrap()
    }

    #[test]
    fn kl_identity_and_unit_shift() {
        let p = g(&[0.3, -1.0], &[0.5, -0.2]);
        assert!(kl_diag_gaussian(&p, &p).unwrap().abs() < 1e-12);
        let kl = kl_diag_gaussian(&g(&[1.0], &[0.0]), &g(&[0.0], &[0.0])).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_rejects_bad_inputs() {
        assert!(matches!(
            kl_diag_gaussian(&g(&[0.0], &[0.0]), &g(&[0.0, 1.0], &[0.0, 0.0])),
            Err(IcesError::Dimension(_))
        ));
        let bad = LatentGaussian { mean: vec![f64::NAN], log_var: vec![0.0] };
        assert!(matches!(kl_diag_gaussian(&bad, &bad), Err(IcesError::Numeric(_))));
    }

    #[test]
    fn log_var_is_clamped() {
        let d = g(&[0.0, 0.0], &[-50.0, 50.0]);
        assert_eq!(d.log_var, vec![-10.0, 10.0]);
    }

    #[test]
    fn tape_kl_matches_closed_form() {
        let p = g(&[0.3, -1.0, 0.2], &[0.5, -0.2, 1.1]);
        let q = g(&[-0.1, 0.4, 0.0], &[0.1, 0.3, -0.7]);
        let mut t = Tape::new();
        let mp = t.constant_rows(1, 3, p.mean.clone());
        let lp = t.constant_rows(1, 3, p.log_var.clone());
        let mq = t.constant_rows(1, 3, q.mean.clone());
        let lq = t.constant_rows(1, 3, q.log_var.clone());
        let k = kl_diag_gaussian_rows(&mut t, mp, lp, mq, lq);
        assert!((t.value(k).data[0] - kl_diag_gaussian(&p, &q).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn reparameterize_edge_cases() {
        let d = g(&[1.0, -2.0], &[-10.0, -10.0]);
        let noise = [3.0, -4.0];
        let z = reparameterize(&d, &noise).unwrap();
        for k in 0..2 {
            assert!((z[k] - d.mean[k]).abs() <= (-5.0f64).exp() * noise[k].abs() + 1e-15);
        }
        assert_eq!(reparameterize(&d, &[0.0, 0.0]).unwrap(), d.mean);
        assert!(reparameterize(&d, &[0.0]).is_err());
    }

    #[test]
    fn reparameterized_samples_center_on_mean() {
        let d = g(&[0.7, -0.3], &[0.4, -1.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut sums = [0.0; 2];
        for _ in 0..n {
            let z = d.sample(&mut rng);
            sums[0] += z[0];
            sums[1] += z[1];
        }
        for k in 0..2 {
            let se = d.std()[k] / (n as f64).sqrt();
            assert!((sums[k] / n as f64 - d.mean[k]).abs() < 3.0 * se);
        }
    }

    #[test]
    fn categorical_one_hot_and_uniform() {
        let hot = CategoricalDist::new(vec![-50.0, 50.0, -50.0]);
        assert!(categorical_entropy(&hot).unwrap() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            assert_eq!(categorical_sample(&hot, &mut rng).unwrap(), 1);
        }
        let uni = CategoricalDist::new(vec![0.0; 4]);
        assert!((categorical_entropy(&uni).unwrap() - 4f64.ln()).abs() < 1e-12);
        let p: f64 = uni.probs().unwrap().iter().sum();
        assert!((p - 1.0).abs() < 1e-6);
    }

    #[test]
    fn categorical_rejects_degenerate_logits() {
        let dead = CategoricalDist::new(vec![f64::NEG_INFINITY; 3]);
        assert!(matches!(categorical_entropy(&dead), Err(IcesError::DegenerateDistribution(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(categorical_sample(&dead, &mut rng).is_err());
    }

    #[test]
    fn categorical_frequencies_within_multinomial_bounds() {
        let d = CategoricalDist::new(vec![0.2, -0.5, 1.0, 0.0]);
        let probs = d.probs().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[categorical_sample(&d, &mut rng).unwrap()] += 1;
        }
        for k in 0..4 {
            let p = probs[k];
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((counts[k] as f64 / n as f64 - p).abs() < 3.0 * sigma, "action {k}");
        }
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[f64::NEG_INFINITY, -1.0]), 1);
    }
}
