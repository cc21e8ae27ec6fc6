//! Forward-backward messaging over the per-column Markov support chain.
//!
//! Each column of the channel support is a first-order binary chain along
//! the AoA axis with initial active probability `lambda` and transitions
//! `p_enter` (0 -> 1), `p_exit` (1 -> 0). The per-entry observation message
//! is the likelihood ratio `chi_out` produced by the channel denoiser.

use crate::channel::MarkovSupportParams;

const TINY: f64 = 1e-300;

/// Extrinsic support probabilities: `chi_in[q]` is the chain's belief that
/// entry `q` is active given the observations at every other entry.
///
/// The forward recursion is seeded with `lambda` and the backward one with
/// the uninformative 1/2; the two are combined per entry.
pub fn forward_backward(chi_out: &[f64], params: &MarkovSupportParams) -> Vec<f64> {
    let m = chi_out.len();
    if m == 0 {
        return Vec::new();
    }
    let (lam, pe, px) = (params.lambda, params.p_enter, params.p_exit);

    let mut fwd = vec![0.0; m];
    fwd[0] = lam;
    for q in 1..m {
        let m1 = chi_out[q - 1] * fwd[q - 1];
        let m0 = (1.0 - chi_out[q - 1]) * (1.0 - fwd[q - 1]);
        fwd[q] = (pe * m0 + (1.0 - px) * m1) / (m0 + m1).max(TINY);
    }

    let mut bwd = vec![0.0; m];
    bwd[m - 1] = 0.5;
    for q in (0..m - 1).rev() {
        let c1 = chi_out[q + 1] * bwd[q + 1];
        let c0 = (1.0 - chi_out[q + 1]) * (1.0 - bwd[q + 1]);
        let b1 = px * c0 + (1.0 - px) * c1;
        let b0 = (1.0 - pe) * c0 + pe * c1;
        bwd[q] = b1 / (b0 + b1).max(TINY);
    }

    (0..m)
        .map(|q| {
            let on = fwd[q] * bwd[q];
            let off = (1.0 - fwd[q]) * (1.0 - bwd[q]);
            on / (on + off).max(TINY)
        })
        .collect()
}

/// Full posterior chain marginals including the local observations:
/// singleton `P(d_q = 1 | all chi_out)` and pairwise transition posteriors
/// `P(d_q = a, d_{q+1} = b | all chi_out)`. Used by the EM transition
/// updates.
pub struct ChainPosterior {
    pub singleton: Vec<f64>,
    /// `pairwise[q][a][b]` for the edge `(q, q+1)`; length `m - 1`.
    pub pairwise: Vec<[[f64; 2]; 2]>,
}

pub fn chain_posterior(chi_out: &[f64], params: &MarkovSupportParams) -> ChainPosterior {
    let m = chi_out.len();
    let (lam, pe, px) = (params.lambda, params.p_enter, params.p_exit);
    // transition[a][b] = P(next = b | current = a)
    let trans = [[1.0 - pe, pe], [px, 1.0 - px]];
    let obs = |q: usize, d: usize| if d == 1 { chi_out[q] } else { 1.0 - chi_out[q] };

    let mut alpha = vec![[0.0f64; 2]; m];
    alpha[0] = [(1.0 - lam) * obs(0, 0), lam * obs(0, 1)];
    normalize2(&mut alpha[0]);
    for q in 1..m {
        for b in 0..2 {
            alpha[q][b] = obs(q, b) * (alpha[q - 1][0] * trans[0][b] + alpha[q - 1][1] * trans[1][b]);
        }
        normalize2(&mut alpha[q]);
    }

    let mut beta = vec![[1.0f64; 2]; m];
    for q in (0..m.saturating_sub(1)).rev() {
        for a in 0..2 {
            beta[q][a] = (0..2)
                .map(|b| trans[a][b] * obs(q + 1, b) * beta[q + 1][b])
                .sum();
        }
        normalize2(&mut beta[q]);
    }

    let singleton = (0..m)
        .map(|q| {
            let on = alpha[q][1] * beta[q][1];
            let off = alpha[q][0] * beta[q][0];
            on / (on + off).max(TINY)
        })
        .collect();

    let pairwise = (0..m.saturating_sub(1))
        .map(|q| {
            let mut xi = [[0.0; 2]; 2];
            let mut total = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    xi[a][b] = alpha[q][a] * trans[a][b] * obs(q + 1, b) * beta[q + 1][b];
                    total += xi[a][b];
                }
            }
            for row in xi.iter_mut() {
                for v in row.iter_mut() {
                    *v /= total.max(TINY);
                }
            }
            xi
        })
        .collect();

    ChainPosterior {
        singleton,
        pairwise,
    }
}

fn normalize2(v: &mut [f64; 2]) {
    let s = (v[0] + v[1]).max(TINY);
    v[0] /= s;
    v[1] /= s;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Brute-force chain marginalization over all 2^m supports. `skip`
    /// optionally excludes one site's observation (extrinsic marginal).
    fn brute_force_marginal(
        chi_out: &[f64],
        params: &MarkovSupportParams,
        target: usize,
        skip_target_obs: bool,
    ) -> f64 {
        let m = chi_out.len();
        let mut on = 0.0;
        let mut total = 0.0;
        for mask in 0u32..(1 << m) {
            let d = |q: usize| (mask >> q) & 1 == 1;
            let mut w = if d(0) { params.lambda } else { 1.0 - params.lambda };
            for q in 1..m {
                w *= match (d(q - 1), d(q)) {
                    (false, false) => 1.0 - params.p_enter,
                    (false, true) => params.p_enter,
                    (true, false) => params.p_exit,
                    (true, true) => 1.0 - params.p_exit,
                };
            }
            for q in 0..m {
                if skip_target_obs && q == target {
                    continue;
                }
                w *= if d(q) { chi_out[q] } else { 1.0 - chi_out[q] };
            }
            total += w;
            if d(target) {
                on += w;
            }
        }
        on / total
    }

    fn random_params(rng: &mut impl Rng) -> MarkovSupportParams {
        let p_enter = rng.gen_range(0.05..0.95);
        let p_exit = rng.gen_range(0.05..0.95);
        MarkovSupportParams {
            lambda: p_enter / (p_enter + p_exit),
            p_enter,
            p_exit,
        }
    }

    #[test]
    fn single_entry_returns_lambda() {
        let params = MarkovSupportParams::from_lambda_enter(0.3, 0.1).unwrap();
        let out = forward_backward(&[0.8], &params);
        assert!((out[0] - 0.3).abs() < 1e-14);
    }

    #[test]
    fn uniform_observations_give_prior_marginals() {
        let mut rng = crate::rng::rng_from_seed(1);
        for _ in 0..20 {
            let params = random_params(&mut rng);
            let m = 10;
            let chi = vec![0.5; m];
            let got = forward_backward(&chi, &params);
            for q in 0..m {
                let want = brute_force_marginal(&chi, &params, q, true);
                assert!(
                    (got[q] - want).abs() < 1e-10,
                    "q={q} got={} want={want}",
                    got[q]
                );
            }
        }
    }

    #[test]
    fn matches_brute_force_extrinsic_marginals() {
        let mut rng = crate::rng::rng_from_seed(2);
        for _ in 0..50 {
            let params = random_params(&mut rng);
            let m = rng.gen_range(2..=12);
            let chi: Vec<f64> = (0..m).map(|_| rng.gen_range(0.01..0.99)).collect();
            let got = forward_backward(&chi, &params);
            for q in 0..m {
                let want = brute_force_marginal(&chi, &params, q, true);
                assert!(
                    (got[q] - want).abs() < 1e-10,
                    "m={m} q={q} got={} want={want}",
                    got[q]
                );
            }
        }
    }

    #[test]
    fn posterior_singleton_matches_brute_force() {
        let mut rng = crate::rng::rng_from_seed(3);
        for _ in 0..30 {
            let params = random_params(&mut rng);
            let m = rng.gen_range(2..=10);
            let chi: Vec<f64> = (0..m).map(|_| rng.gen_range(0.01..0.99)).collect();
            let post = chain_posterior(&chi, &params);
            for q in 0..m {
                let want = brute_force_marginal(&chi, &params, q, false);
                assert!(
                    (post.singleton[q] - want).abs() < 1e-10,
                    "q={q} got={} want={want}",
                    post.singleton[q]
                );
            }
        }
    }

    #[test]
    fn pairwise_rows_consistent_with_singletons() {
        let mut rng = crate::rng::rng_from_seed(4);
        let params = random_params(&mut rng);
        let m = 8;
        let chi: Vec<f64> = (0..m).map(|_| rng.gen_range(0.01..0.99)).collect();
        let post = chain_posterior(&chi, &params);
        for q in 0..m - 1 {
            let xi = post.pairwise[q];
            let sum: f64 = xi.iter().flatten().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            // marginalizing the pair over the right site recovers singleton q
            let p1 = xi[1][0] + xi[1][1];
            assert!((p1 - post.singleton[q]).abs() < 1e-10);
            // and over the left site recovers singleton q+1
            let p2 = xi[0][1] + xi[1][1];
            assert!((p2 - post.singleton[q + 1]).abs() < 1e-10);
        }
    }
}
