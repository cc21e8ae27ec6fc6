//! Scalar posterior denoisers for the two factors.
//!
//! `denoise_x` merges the GSM mixture prior with a Gaussian pseudo-likelihood
//! `CN(x; r, v_r)`; `denoise_s` does the same for the Bernoulli-Gaussian
//! channel prior whose active probability is the incoming support message.
//! All weights are combined in the log domain.

use crate::modulation::Alphabet;
use num_complex::Complex64;

/// Posterior over `{0} ∪ symbols` for one signal entry.
#[derive(Debug, Clone)]
pub struct XPosterior {
    pub mean: Complex64,
    pub var: f64,
    /// Index 0 is the zero atom, index `i+1` is `symbols[i]`.
    pub pmf: Vec<f64>,
}

/// Normalizes log weights into a pmf.
fn softmax(logw: &mut [f64]) {
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // all-impossible: fall back to uniform
        let u = 1.0 / logw.len() as f64;
        logw.iter_mut().for_each(|w| *w = u);
        return;
    }
    let mut sum = 0.0;
    for w in logw.iter_mut() {
        *w = (*w - max).exp();
        sum += *w;
    }
    for w in logw.iter_mut() {
        *w /= sum;
    }
}

/// Posterior mean/variance/pmf of a GSM entry given the extrinsic Gaussian
/// estimate `(r, v_r)` and the mixture prior with sparsity `rho`.
pub fn denoise_x(r: Complex64, v_r: f64, rho: f64, alphabet: &Alphabet) -> XPosterior {
    let n = alphabet.len();
    let mut logw = Vec::with_capacity(n + 1);
    let log_zero = if rho < 1.0 {
        (1.0 - rho).ln() - r.norm_sqr() / v_r
    } else {
        f64::NEG_INFINITY
    };
    logw.push(log_zero);
    let log_active = if rho > 0.0 {
        (rho / n as f64).ln()
    } else {
        f64::NEG_INFINITY
    };
    for &a in &alphabet.symbols {
        logw.push(log_active - (a - r).norm_sqr() / v_r);
    }
    softmax(&mut logw);
    let mut mean = Complex64::new(0.0, 0.0);
    let mut second = 0.0;
    for (i, &a) in alphabet.symbols.iter().enumerate() {
        mean += logw[i + 1] * a;
        second += logw[i + 1] * a.norm_sqr();
    }
    let var = (second - mean.norm_sqr()).max(0.0);
    XPosterior {
        mean,
        var,
        pmf: logw,
    }
}

/// Posterior of a channel entry under the prior
/// `(1 - chi_in) d(s) + chi_in CN(s; 0, v_s)` and likelihood
/// `CN(s; varsigma, v_varsigma)`.
#[derive(Debug, Clone, Copy)]
pub struct SPosterior {
    pub mean: Complex64,
    pub var: f64,
    /// Support likelihood ratio fed to the Markov chain (prior-free).
    pub chi_out: f64,
    /// Posterior support probability (prior `chi_in` included).
    pub chi_post: f64,
}

pub fn denoise_s(varsigma: Complex64, v_varsigma: f64, chi_in: f64, v_s: f64) -> SPosterior {
    // log CN(0; varsigma, v) up to the common (pi) factor
    let e = varsigma.norm_sqr();
    let log_l0 = -e / v_varsigma - v_varsigma.ln();
    let log_l1 = -e / (v_s + v_varsigma) - (v_s + v_varsigma).ln();
    // chi_out = L1 / (L0 + L1)
    let chi_out = 1.0 / (1.0 + (log_l0 - log_l1).exp());

    // posterior active probability with the chain prior folded in
    let chi_post = if chi_in <= 0.0 {
        0.0
    } else if chi_in >= 1.0 {
        1.0
    } else {
        let log_ratio = ((1.0 - chi_in).ln() + log_l0) - (chi_in.ln() + log_l1);
        1.0 / (1.0 + log_ratio.exp())
    };
    let gain = v_s / (v_s + v_varsigma);
    let m1 = varsigma * gain;
    let v1 = v_varsigma * gain;
    let mean = chi_post * m1;
    let var = (chi_post * (v1 + m1.norm_sqr()) - mean.norm_sqr()).max(0.0);
    SPosterior {
        mean,
        var,
        chi_out,
        chi_post,
    }
}

/// Gaussian prior denoiser `CN(x; 0, v0)`, used when the signal factor has
/// lost its constellation structure (the right-absorbed model).
pub fn denoise_gaussian(r: Complex64, v_r: f64, v0: f64) -> (Complex64, f64) {
    let gain = v0 / (v0 + v_r);
    (r * gain, v_r * gain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::sample_cn;
    use crate::modulation::make_qpsk;
    use crate::rng::rng_from_seed;
    use approx::assert_relative_eq;
    use rand::Rng;

    /// Direct enumeration of the 5-point posterior, kept independent of the
    /// log-domain implementation.
    fn enumerate_x(r: Complex64, v_r: f64, rho: f64, alphabet: &Alphabet) -> XPosterior {
        let gauss = |x: Complex64| (-(x - r).norm_sqr() / v_r).exp() / (std::f64::consts::PI * v_r);
        let mut weights = vec![(1.0 - rho) * gauss(Complex64::new(0.0, 0.0))];
        for &a in &alphabet.symbols {
            weights.push(rho / alphabet.len() as f64 * gauss(a));
        }
        let total: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }
        let mut mean = Complex64::new(0.0, 0.0);
        for (i, &a) in alphabet.symbols.iter().enumerate() {
            mean += weights[i + 1] * a;
        }
        let mut var = weights[0] * mean.norm_sqr();
        for (i, &a) in alphabet.symbols.iter().enumerate() {
            var += weights[i + 1] * (a - mean).norm_sqr();
        }
        XPosterior {
            mean,
            var,
            pmf: weights,
        }
    }

    /// Two-component mixture algebra for the channel posterior.
    fn mixture_s(varsigma: Complex64, v_varsigma: f64, chi_in: f64, v_s: f64) -> (Complex64, f64) {
        let pi = std::f64::consts::PI;
        let l0 = (-varsigma.norm_sqr() / v_varsigma).exp() / (pi * v_varsigma);
        let l1 = (-varsigma.norm_sqr() / (v_s + v_varsigma)).exp() / (pi * (v_s + v_varsigma));
        let w1 = chi_in * l1 / ((1.0 - chi_in) * l0 + chi_in * l1);
        let m1 = varsigma * v_s / (v_s + v_varsigma);
        let v1 = v_s * v_varsigma / (v_s + v_varsigma);
        let mean = w1 * m1;
        let var = w1 * (v1 + m1.norm_sqr()) - mean.norm_sqr();
        (mean, var)
    }

    #[test]
    fn x_zero_sparsity() {
        let a = make_qpsk();
        let p = denoise_x(Complex64::new(0.4, -0.2), 0.5, 0.0, &a);
        assert_eq!(p.mean, Complex64::new(0.0, 0.0));
        assert_eq!(p.var, 0.0);
        assert_relative_eq!(p.pmf[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn x_concentrates_on_symbol() {
        let a = make_qpsk();
        let sym = a.symbols[2];
        let p = denoise_x(sym, 1e-8, 0.5, &a);
        assert!((p.mean - sym).norm() < 1e-6);
        assert!(p.var < 1e-6);
    }

    #[test]
    fn x_matches_enumeration_oracle() {
        let a = make_qpsk();
        let mut rng = rng_from_seed(100);
        for _ in 0..10_000 {
            let r = sample_cn(&mut rng, 2.0);
            let v_r = rng.gen_range(1e-3..5.0);
            let rho = rng.gen_range(0.01..0.99);
            let got = denoise_x(r, v_r, rho, &a);
            let want = enumerate_x(r, v_r, rho, &a);
            assert!((got.mean - want.mean).norm() <= 1e-12 * (1.0 + want.mean.norm()));
            assert!((got.var - want.var).abs() <= 1e-12 * (1.0 + want.var));
            for (g, w) in got.pmf.iter().zip(&want.pmf) {
                assert!((g - w).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn x_pmf_sums_to_one() {
        let a = make_qpsk();
        let mut rng = rng_from_seed(5);
        for _ in 0..100 {
            let p = denoise_x(sample_cn(&mut rng, 1.0), rng.gen_range(0.01..2.0), 0.3, &a);
            assert_relative_eq!(p.pmf.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn s_chi_in_zero_gives_zero() {
        let p = denoise_s(Complex64::new(1.0, 1.0), 0.5, 0.0, 2.0);
        assert_eq!(p.mean, Complex64::new(0.0, 0.0));
        assert_eq!(p.var, 0.0);
    }

    #[test]
    fn s_chi_in_one_is_gaussian_product() {
        let varsigma = Complex64::new(0.7, -0.3);
        let v_varsigma = 0.4;
        let v_s = 1.5;
        let p = denoise_s(varsigma, v_varsigma, 1.0, v_s);
        let expect = varsigma * v_s / (v_s + v_varsigma);
        assert!((p.mean - expect).norm() < 1e-14);
        assert_relative_eq!(p.var, v_s * v_varsigma / (v_s + v_varsigma), epsilon = 1e-13);
    }

    #[test]
    fn s_matches_closed_form_oracle() {
        let mut rng = rng_from_seed(200);
        for _ in 0..10_000 {
            let varsigma = sample_cn(&mut rng, 2.0);
            let v_varsigma = rng.gen_range(1e-3..4.0);
            let chi_in = rng.gen_range(1e-4..1.0 - 1e-4);
            let v_s = rng.gen_range(0.1..3.0);
            let got = denoise_s(varsigma, v_varsigma, chi_in, v_s);
            let (mean, var) = mixture_s(varsigma, v_varsigma, chi_in, v_s);
            assert!((got.mean - mean).norm() <= 1e-12 * (1.0 + mean.norm()));
            assert!((got.var - var).abs() <= 1e-12 * (1.0 + var.abs()));
        }
    }

    #[test]
    fn s_chi_out_is_prior_free_likelihood_ratio() {
        let pi = std::f64::consts::PI;
        let varsigma = Complex64::new(0.2, 0.9);
        let v_varsigma = 0.3;
        let v_s = 1.0;
        let p = denoise_s(varsigma, v_varsigma, 0.7, v_s);
        let l0 = (-varsigma.norm_sqr() / v_varsigma).exp() / (pi * v_varsigma);
        let l1 = (-varsigma.norm_sqr() / (v_s + v_varsigma)).exp() / (pi * (v_s + v_varsigma));
        assert_relative_eq!(p.chi_out, l1 / (l0 + l1), epsilon = 1e-12);
    }

    #[test]
    fn gaussian_denoiser_shrinks() {
        let (m, v) = denoise_gaussian(Complex64::new(2.0, 0.0), 1.0, 1.0);
        assert_relative_eq!(m.re, 1.0, epsilon = 1e-14);
        assert_relative_eq!(v, 0.5, epsilon = 1e-14);
    }
}
