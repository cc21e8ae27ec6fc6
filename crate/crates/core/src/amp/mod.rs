//! Blind channel-and-signal estimation (BCSE): the AMP inner iteration
//! over the bilinear model `Y = A_R S X + N`, posterior denoisers for both
//! factors, Markov support messaging, and the restart/re-initialization
//! outer loop.
//!
//! The inner iteration follows a fixed line order per pass: linear-stage
//! pseudo-observations with the Onsager correction, bilinear-stage
//! combination, extrinsic estimates for `X` and `S`, support messaging,
//! then posterior denoising. Variances are clamped to `[VAR_FLOOR, v_max]`
//! after every update.

pub mod denoise;
pub mod support;

use crate::channel::{abs2, MarkovSupportParams};
use crate::modulation::Alphabet;
use crate::rng::{derive_seed, rng_from_seed};
use crate::{CMat, RMat};
use ndarray::{s, Array2, Array3, Zip};
use num_complex::Complex64;
use rand::Rng;
use thiserror::Error;

pub use denoise::{denoise_gaussian, denoise_s, denoise_x, SPosterior, XPosterior};
pub use support::{chain_posterior, forward_backward, ChainPosterior};

/// Variance floor applied alongside the `v_max` ceiling.
pub const VAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AmpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("iteration produced non-finite values")]
    Diverged,
    #[error("all {0} restarts diverged")]
    AllRestartsDiverged(usize),
}

/// Hyperparameters of the factorization problem.
#[derive(Debug, Clone)]
pub struct ModelParams {
    /// Receive-side angular grid (radians); `A_R` is built from it.
    pub aoa_grid: Vec<f64>,
    /// Signal sparsity level.
    pub rho: f64,
    /// Channel-row sparsity of `S`.
    pub lambda_s: f64,
    /// 0 -> 1 transition of the support chain along the AoA axis.
    pub p_enter: f64,
    /// 1 -> 0 transition.
    pub p_exit: f64,
    /// Variance of the non-zero entries of `S`.
    pub v_s: f64,
    /// Noise variance.
    pub sigma2: f64,
    pub alphabet: Alphabet,
}

impl ModelParams {
    pub fn support_params(&self) -> MarkovSupportParams {
        MarkovSupportParams {
            lambda: self.lambda_s,
            p_enter: self.p_enter,
            p_exit: self.p_exit,
        }
    }

    pub fn validate(&self) -> Result<(), AmpError> {
        for (name, v) in [
            ("rho", self.rho),
            ("lambda_s", self.lambda_s),
            ("p_enter", self.p_enter),
            ("p_exit", self.p_exit),
        ] {
            if !(0.0 < v && v < 1.0) {
                return Err(AmpError::InvalidParam(format!("{name}={v} not in (0,1)")));
            }
        }
        if self.v_s <= 0.0 || self.sigma2 < 0.0 {
            return Err(AmpError::InvalidParam(
                "v_s must be positive and sigma2 non-negative".into(),
            ));
        }
        let implied = self.p_enter / (self.p_enter + self.p_exit);
        if (implied - self.lambda_s).abs() > 1e-9 {
            return Err(AmpError::InvalidParam(format!(
                "lambda_s={} violates p_enter/(p_enter+p_exit)={implied}",
                self.lambda_s
            )));
        }
        Ok(())
    }
}

/// Problem dimensions for one factorization instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    /// Receive antennas.
    pub m: usize,
    /// AoA bins (rows of `S`).
    pub m_prime: usize,
    /// Columns of `S` / rows of `X`.
    pub p: usize,
    /// Time slots.
    pub t: usize,
}

/// All per-entry means/variances and residual terms carried across one AMP
/// inner iteration.
#[derive(Debug, Clone)]
pub struct MessageState {
    pub dims: Dims,
    pub s_mean: CMat,
    pub s_var: RMat,
    pub x_mean: CMat,
    pub x_var: RMat,
    pub w_mean: CMat,
    pub w_var: RMat,
    pub tau_mean: CMat,
    pub tau_var: RMat,
    pub alpha_mean: CMat,
    pub alpha_var: RMat,
    /// Support likelihood messages out of / into the chain.
    pub chi_out: RMat,
    pub chi_in: RMat,
    /// Posterior support probability (chain prior included).
    pub chi_post: RMat,
    /// Per-entry posterior pmf over `{0} ∪ symbols`; `[p, t, atom]`.
    pub x_pmf: Array3<f64>,
    /// Linear-stage posterior of `Z = A_R W` (consumed by EM).
    pub z_mean: CMat,
    pub z_var: RMat,
}

impl MessageState {
    pub fn is_finite(&self) -> bool {
        self.w_mean.iter().all(|v| v.re.is_finite() && v.im.is_finite())
            && self.x_mean.iter().all(|v| v.re.is_finite() && v.im.is_finite())
            && self.s_mean.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

/// Random initialization: zero channel/product means, signal means drawn
/// uniformly from the alphabet, all variances at `v_max`.
pub fn init_state(dims: Dims, v_max: f64, alphabet: &Alphabet, seed: u64) -> MessageState {
    let mut rng = rng_from_seed(seed);
    let n_atoms = alphabet.len() + 1;
    let x_mean = Array2::from_shape_fn((dims.p, dims.t), |_| {
        alphabet.symbols[rng.gen_range(0..alphabet.len())]
    });
    MessageState {
        dims,
        s_mean: Array2::zeros((dims.m_prime, dims.p)),
        s_var: Array2::from_elem((dims.m_prime, dims.p), v_max),
        x_mean,
        x_var: Array2::from_elem((dims.p, dims.t), v_max),
        w_mean: Array2::zeros((dims.m_prime, dims.t)),
        w_var: Array2::from_elem((dims.m_prime, dims.t), v_max),
        tau_mean: Array2::zeros((dims.m, dims.t)),
        tau_var: Array2::zeros((dims.m, dims.t)),
        alpha_mean: Array2::zeros((dims.m_prime, dims.t)),
        alpha_var: Array2::zeros((dims.m_prime, dims.t)),
        chi_out: Array2::from_elem((dims.m_prime, dims.p), 0.5),
        chi_in: Array2::from_elem((dims.m_prime, dims.p), 0.5),
        chi_post: Array2::from_elem((dims.m_prime, dims.p), 0.5),
        x_pmf: Array3::from_elem((dims.p, dims.t, n_atoms), 1.0 / n_atoms as f64),
        z_mean: Array2::zeros((dims.m, dims.t)),
        z_var: Array2::zeros((dims.m, dims.t)),
    }
}

/// Which state fields a between-rounds re-initialization resets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReinitMethod {
    /// (i) reset channel mean and variance.
    ChannelMeanVar,
    /// (ii) reset channel mean, channel variance, and signal variance.
    ChannelMeanVarSignalVar,
    /// (iii) reset signal mean and variance (mean resampled).
    SignalMeanVar,
    /// (iv) reset signal mean, signal variance, and channel variance.
    SignalMeanVarChannelVar,
    /// (v) keep both means, reset both variances. Best performer; default.
    BothVariances,
}

impl ReinitMethod {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "i" | "channel-mean-var" => Some(Self::ChannelMeanVar),
            "ii" | "channel-mean-var-signal-var" => Some(Self::ChannelMeanVarSignalVar),
            "iii" | "signal-mean-var" => Some(Self::SignalMeanVar),
            "iv" | "signal-mean-var-channel-var" => Some(Self::SignalMeanVarChannelVar),
            "v" | "both-variances" => Some(Self::BothVariances),
            _ => None,
        }
    }
}

/// Re-initializes a state between outer rounds. Only the signal/channel
/// mean and variance fields listed by the method are touched; residual
/// terms carry over.
pub fn reinit_state(
    method: ReinitMethod,
    prev: &MessageState,
    v_max: f64,
    alphabet: &Alphabet,
    seed: u64,
) -> MessageState {
    let mut state = prev.clone();
    let resample_x = |state: &mut MessageState| {
        let mut rng = rng_from_seed(seed);
        state
            .x_mean
            .mapv_inplace(|_| alphabet.symbols[rng.gen_range(0..alphabet.len())]);
    };
    match method {
        ReinitMethod::ChannelMeanVar => {
            state.s_mean.fill(Complex64::new(0.0, 0.0));
            state.s_var.fill(v_max);
        }
        ReinitMethod::ChannelMeanVarSignalVar => {
            state.s_mean.fill(Complex64::new(0.0, 0.0));
            state.s_var.fill(v_max);
            state.x_var.fill(v_max);
        }
        ReinitMethod::SignalMeanVar => {
            resample_x(&mut state);
            state.x_var.fill(v_max);
        }
        ReinitMethod::SignalMeanVarChannelVar => {
            resample_x(&mut state);
            state.x_var.fill(v_max);
            state.s_var.fill(v_max);
        }
        ReinitMethod::BothVariances => {
            state.x_var.fill(v_max);
            state.s_var.fill(v_max);
        }
    }
    state
}

/// Prior used for the signal factor.
#[derive(Debug, Clone)]
pub enum SignalPrior {
    /// GSM mixture with the `ModelParams` sparsity and alphabet.
    Gsm,
    /// Zero-mean Gaussian of the given variance (right-absorbed model,
    /// where the mixing matrix destroys the constellation structure).
    Gaussian { var: f64 },
}

/// Side information pinning parts of the state (genie bounds, training).
#[derive(Debug, Clone, Default)]
pub struct SideInfo {
    /// Known `S`: channel mean pinned, variance zero, channel updates off.
    pub genie_s: Option<CMat>,
    /// Known `X`: signal mean pinned, variance zero, signal updates off.
    pub genie_x: Option<CMat>,
    /// Known pilot block occupying the first columns of `X`; those entries
    /// use a point-mass prior, so their means never move.
    pub pinned_pilots: Option<CMat>,
}

#[derive(Debug, Clone)]
pub struct BcseConfig {
    /// Outer rounds per restart.
    pub i_max: usize,
    /// Inner AMP iterations per round.
    pub j_max: usize,
    /// Random initializations; the smallest-residual candidate wins.
    pub restarts: usize,
    pub reinit: ReinitMethod,
    /// Relative change of the product mean below which the inner loop
    /// stops early; 0 disables.
    pub early_stop_tol: f64,
    pub v_max: f64,
    /// Damping on the product/residual mean updates; 1.0 is undamped.
    pub damping: f64,
    /// Residual level treated as converged: stops remaining outer rounds
    /// and restarts; 0 disables.
    pub residual_stop: f64,
    /// Lower bound on the noise variance the message passing assumes.
    /// At high SNR the true variance drives the posterior variances so
    /// small that the updates become overconfident and stall away from
    /// the solution; flooring the assumed noise keeps the fixed-SNR
    /// behaviour of the calibrated operating point. 0 disables.
    pub sigma2_floor: f64,
    pub signal_prior: SignalPrior,
}

impl Default for BcseConfig {
    fn default() -> Self {
        Self {
            i_max: 20,
            j_max: 200,
            restarts: 5,
            reinit: ReinitMethod::BothVariances,
            early_stop_tol: 1e-6,
            v_max: 10.0,
            damping: 1.0,
            residual_stop: 0.0,
            sigma2_floor: 0.0,
            signal_prior: SignalPrior::Gsm,
        }
    }
}

/// Final output of a BCSE run.
#[derive(Debug, Clone)]
pub struct BlindEstimate {
    pub x_hat: CMat,
    pub s_hat: CMat,
    pub x_pmf: Array3<f64>,
    pub chi_post: RMat,
    pub residual: f64,
    pub iterations_used: usize,
    pub restart_index: usize,
    /// Rows whose reference-column estimate was too small to divide by
    /// during scalar-phase removal.
    pub unresolved_rows: Vec<usize>,
}

fn clamp_var(v: &mut RMat, v_max: f64) {
    v.mapv_inplace(|x| x.clamp(VAR_FLOOR, v_max));
}

fn conj_t(a: &CMat) -> CMat {
    a.t().mapv(|v| v.conj())
}

pub fn frobenius(a: &CMat) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// Residual `|| Y - A_R S X ||_F` of a candidate factor pair.
pub fn residual_norm(y: &CMat, a_r: &CMat, s_hat: &CMat, x_hat: &CMat) -> f64 {
    let d = y - &a_r.dot(&s_hat.dot(x_hat));
    frobenius(&d)
}

/// One pass of the AMP inner iteration. Mutates `state` in place; the line
/// order is contractual (each stage consumes only prior-stage values).
/// Non-finite results surface as `AmpError::Diverged`.
pub fn inner_iteration(
    state: &mut MessageState,
    y: &CMat,
    a_r: &CMat,
    a_r_abs2: &RMat,
    params: &ModelParams,
    config: &BcseConfig,
    side: &SideInfo,
) -> Result<(), AmpError> {
    let dims = state.dims;
    if y.dim() != (dims.m, dims.t) || a_r.dim() != (dims.m, dims.m_prime) {
        return Err(AmpError::Dimension(format!(
            "Y {:?} / A_R {:?} inconsistent with dims {:?}",
            y.dim(),
            a_r.dim(),
            dims
        )));
    }
    let sigma2 = params.sigma2.max(config.sigma2_floor);

    // linear stage: pseudo-observation of A_R W with Onsager correction
    let u_var = {
        let mut v = a_r_abs2.dot(&state.w_var);
        v.mapv_inplace(|x| x.max(VAR_FLOOR));
        v
    };
    let u_mean = {
        let mut u = a_r.dot(&state.w_mean);
        Zip::from(&mut u)
            .and(&u_var)
            .and(&state.tau_mean)
            .for_each(|u, &v, &tau| *u -= tau * v);
        u
    };
    // output posterior under the AWGN likelihood
    let mut z_var: RMat = u_var.mapv(|v| v * sigma2 / (v + sigma2));
    let z_mean = {
        let mut z = CMat::zeros((dims.m, dims.t));
        Zip::from(&mut z)
            .and(&u_mean)
            .and(&u_var)
            .and(y)
            .for_each(|z, &u, &v, &obs| {
                *z = (u * sigma2 + obs * v) / (v + sigma2);
            });
        z
    };
    clamp_var(&mut z_var, config.v_max);
    // scaled residuals and inverse-residual-variances
    let tau_var: RMat = {
        let mut v = RMat::zeros((dims.m, dims.t));
        Zip::from(&mut v)
            .and(&u_var)
            .and(&z_var)
            .for_each(|t, &u, &z| *t = ((u - z) / (u * u)).max(0.0));
        v
    };
    let tau_mean = {
        let mut t = CMat::zeros((dims.m, dims.t));
        Zip::from(&mut t)
            .and(&z_mean)
            .and(&u_mean)
            .and(&u_var)
            .for_each(|t, &z, &u, &v| *t = (z - u) / v);
        t
    };
    // combine back to the W nodes
    let zeta_var: RMat = {
        let mut v = conj_t(a_r)
            .mapv(|x| x.norm_sqr())
            .dot(&tau_var);
        v.mapv_inplace(|x| 1.0 / x.max(VAR_FLOOR));
        clamp_var(&mut v, config.v_max);
        v
    };
    let zeta_mean = {
        let back = conj_t(a_r).dot(&tau_mean);
        let mut z = state.w_mean.clone();
        Zip::from(&mut z)
            .and(&zeta_var)
            .and(&back)
            .for_each(|z, &v, &b| *z += b * v);
        z
    };

    // bilinear stage: plausible estimate of W = S X from the factor means
    let s_abs2 = abs2(&state.s_mean);
    let x_abs2 = abs2(&state.x_mean);
    let mixed: RMat = {
        // sum_p (v^s |x|^2 + |s|^2 v^x)
        let mut v = state.s_var.dot(&x_abs2);
        v += &s_abs2.dot(&state.x_var);
        v
    };
    let mut eta_var: RMat = &mixed + &state.s_var.dot(&state.x_var);
    eta_var.mapv_inplace(|x| x.max(VAR_FLOOR));
    let eta_bar = state.s_mean.dot(&state.x_mean);
    let eta_mean = {
        let mut e = eta_bar;
        Zip::from(&mut e)
            .and(&state.alpha_mean)
            .and(&mixed)
            .for_each(|e, &a, &v| *e -= a * v);
        e
    };
    // merge the two W estimates
    let mut w_var_new: RMat = RMat::zeros((dims.m_prime, dims.t));
    Zip::from(&mut w_var_new)
        .and(&eta_var)
        .and(&zeta_var)
        .for_each(|w, &e, &z| *w = e * z / (e + z));
    clamp_var(&mut w_var_new, config.v_max);
    let mut w_mean_new = CMat::zeros((dims.m_prime, dims.t));
    Zip::from(&mut w_mean_new)
        .and(&w_var_new)
        .and(&zeta_mean)
        .and(&zeta_var)
        .for_each(|w, &v, &zm, &zv| *w = zm * (v / zv));
    Zip::from(&mut w_mean_new)
        .and(&w_var_new)
        .and(&eta_mean)
        .and(&eta_var)
        .for_each(|w, &v, &em, &ev| *w += em * (v / ev));
    // bilinear-stage scaled residuals
    let alpha_var_new: RMat = {
        let mut v = RMat::zeros((dims.m_prime, dims.t));
        Zip::from(&mut v)
            .and(&eta_var)
            .and(&w_var_new)
            .for_each(|a, &e, &w| *a = ((e - w) / (e * e)).max(0.0));
        v
    };
    let mut alpha_mean_new = CMat::zeros((dims.m_prime, dims.t));
    Zip::from(&mut alpha_mean_new)
        .and(&w_mean_new)
        .and(&eta_mean)
        .and(&eta_var)
        .for_each(|a, &w, &e, &v| *a = (w - e) / v);

    let x_old = state.x_mean.clone();
    let s_old = state.s_mean.clone();
    // Extrinsic estimates of X and S are both formed from the
    // iteration-j factor means before either denoiser runs; the S
    // bootstrap relies on the correlation between the (still random)
    // signal means and the measurement-driven residuals.
    let update_x = side.genie_x.is_none();
    let update_s = side.genie_s.is_none();
    let varsigma = if update_s {
        let mut v_var = alpha_var_new.dot(&x_abs2.t());
        v_var.mapv_inplace(|x| 1.0 / x.max(VAR_FLOOR));
        clamp_var(&mut v_var, config.v_max);
        let shrink = alpha_var_new.dot(&state.x_var.t());
        let back = alpha_mean_new.dot(&conj_t(&state.x_mean));
        let mut v_mean = CMat::zeros((dims.m_prime, dims.p));
        Zip::from(&mut v_mean)
            .and(&state.s_mean)
            .and(&v_var)
            .and(&shrink)
            .and(&back)
            .for_each(|r, &s_val, &v, &sh, &b| *r = s_val * (1.0 - v * sh).clamp(-1.0, 1.0) + b * v);
        Some((v_mean, v_var))
    } else {
        None
    };
    if update_x {
        let r_var: RMat = {
            let mut v = s_abs2.t().dot(&alpha_var_new);
            v.mapv_inplace(|x| 1.0 / x.max(VAR_FLOOR));
            clamp_var(&mut v, config.v_max);
            v
        };
        let r_mean = {
            let shrink = state.s_var.t().dot(&alpha_var_new); // sum_q v^s v^alpha
            let back = conj_t(&state.s_mean).dot(&alpha_mean_new);
            let mut r = CMat::zeros((dims.p, dims.t));
            Zip::from(&mut r)
                .and(&state.x_mean)
                .and(&r_var)
                .and(&shrink)
                .and(&back)
                .for_each(|r, &x, &v, &sh, &b| *r = x * (1.0 - v * sh).clamp(-1.0, 1.0) + b * v);
            r
        };
        let t_p = side.pinned_pilots.as_ref().map_or(0, |p| p.ncols());
        for p_idx in 0..dims.p {
            for t_idx in 0..dims.t {
                if t_idx < t_p {
                    let pilots = side.pinned_pilots.as_ref().unwrap();
                    let sym = pilots[[p_idx, t_idx]];
                    state.x_mean[[p_idx, t_idx]] = sym;
                    state.x_var[[p_idx, t_idx]] = 0.0;
                    let mut pmf = state.x_pmf.slice_mut(s![p_idx, t_idx, ..]);
                    pmf.fill(0.0);
                    if let Some(i) = params.alphabet.index_of(sym, 1e-9) {
                        pmf[i + 1] = 1.0;
                    } else {
                        pmf[0] = 1.0; // silent pilot slot
                    }
                    continue;
                }
                let r = r_mean[[p_idx, t_idx]];
                let v_r = r_var[[p_idx, t_idx]].max(VAR_FLOOR);
                match &config.signal_prior {
                    SignalPrior::Gsm => {
                        let post = denoise_x(r, v_r, params.rho, &params.alphabet);
                        state.x_mean[[p_idx, t_idx]] = post.mean;
                        state.x_var[[p_idx, t_idx]] = post.var.clamp(VAR_FLOOR, config.v_max);
                        state
                            .x_pmf
                            .slice_mut(s![p_idx, t_idx, ..])
                            .assign(&ndarray::ArrayView1::from(&post.pmf));
                    }
                    SignalPrior::Gaussian { var } => {
                        let (mean, var) = denoise_gaussian(r, v_r, *var);
                        state.x_mean[[p_idx, t_idx]] = mean;
                        state.x_var[[p_idx, t_idx]] = var.clamp(VAR_FLOOR, config.v_max);
                    }
                }
            }
        }
    }

    // support messaging and posterior denoising of S
    if let Some((varsigma_mean, varsigma_var)) = varsigma {
        // support likelihood ratios
        for q in 0..dims.m_prime {
            for p_idx in 0..dims.p {
                let post = denoise_s(
                    varsigma_mean[[q, p_idx]],
                    varsigma_var[[q, p_idx]].max(VAR_FLOOR),
                    0.5, // chi_in applied after the chain pass below
                    params.v_s,
                );
                state.chi_out[[q, p_idx]] = post.chi_out;
            }
        }
        // per-column forward-backward along the AoA axis
        let support = params.support_params();
        for p_idx in 0..dims.p {
            let col: Vec<f64> = (0..dims.m_prime).map(|q| state.chi_out[[q, p_idx]]).collect();
            let chi_in = forward_backward(&col, &support);
            for q in 0..dims.m_prime {
                state.chi_in[[q, p_idx]] = chi_in[q];
            }
        }
        // posterior mean/variance of S
        for q in 0..dims.m_prime {
            for p_idx in 0..dims.p {
                let post = denoise_s(
                    varsigma_mean[[q, p_idx]],
                    varsigma_var[[q, p_idx]].max(VAR_FLOOR),
                    state.chi_in[[q, p_idx]],
                    params.v_s,
                );
                state.s_mean[[q, p_idx]] = post.mean;
                state.s_var[[q, p_idx]] = post.var.clamp(VAR_FLOOR, config.v_max);
                state.chi_post[[q, p_idx]] = post.chi_post;
            }
        }
    }

    // Damping acts on the denoised factor means: the bilinear recursion
    // has a parasitic mode in which s_hat and x_hat align with the same
    // scaled residual and amplify each other through it, and slowing the
    // factor updates is what breaks that loop. (Damping the linear-stage
    // means w and alpha instead leaves the loop gain untouched.)
    if config.damping != 1.0 {
        let d = config.damping;
        Zip::from(&mut state.x_mean)
            .and(&x_old)
            .for_each(|new, &old| *new = d * *new + (1.0 - d) * old);
        Zip::from(&mut state.s_mean)
            .and(&s_old)
            .for_each(|new, &old| *new = d * *new + (1.0 - d) * old);
    }

    state.w_mean = w_mean_new;
    state.w_var = w_var_new;
    state.tau_mean = tau_mean;
    state.tau_var = tau_var;
    state.alpha_mean = alpha_mean_new;
    state.alpha_var = alpha_var_new;
    state.z_mean = z_mean;
    state.z_var = z_var;

    if !state.is_finite() {
        return Err(AmpError::Diverged);
    }
    Ok(())
}

fn apply_side_info(state: &mut MessageState, side: &SideInfo) {
    if let Some(s_true) = &side.genie_s {
        state.s_mean.assign(s_true);
        state.s_var.fill(0.0);
    }
    if let Some(x_true) = &side.genie_x {
        state.x_mean.assign(x_true);
        state.x_var.fill(0.0);
    }
    if let Some(pilots) = &side.pinned_pilots {
        let t_p = pilots.ncols();
        state.x_mean.slice_mut(s![.., ..t_p]).assign(pilots);
        state.x_var.slice_mut(s![.., ..t_p]).fill(0.0);
    }
}

/// Runs the full BCSE loop: `restarts` random initializations, each with
/// `i_max` outer rounds of `j_max` inner iterations and re-initialization
/// in between. Returns the candidate with the smallest residual.
pub fn run_bcse(
    y: &CMat,
    a_r: &CMat,
    params: &ModelParams,
    config: &BcseConfig,
    side: &SideInfo,
    seed: u64,
) -> Result<BlindEstimate, AmpError> {
    params.validate()?;
    let dims = Dims {
        m: y.nrows(),
        m_prime: a_r.ncols(),
        p: side
            .genie_s
            .as_ref()
            .map(|s_true| s_true.ncols())
            .or_else(|| side.genie_x.as_ref().map(|x| x.nrows()))
            .or_else(|| side.pinned_pilots.as_ref().map(|p| p.nrows()))
            .unwrap_or(0),
        t: y.ncols(),
    };
    if dims.p == 0 {
        return Err(AmpError::Dimension(
            "signal dimension unknown; use run_bcse_dims".into(),
        ));
    }
    run_bcse_dims(y, a_r, params, config, side, dims, seed)
}

/// As `run_bcse` but with the signal dimension given explicitly.
pub fn run_bcse_dims(
    y: &CMat,
    a_r: &CMat,
    params: &ModelParams,
    config: &BcseConfig,
    side: &SideInfo,
    dims: Dims,
    seed: u64,
) -> Result<BlindEstimate, AmpError> {
    let a_r_abs2 = abs2(a_r);
    let mut best: Option<BlindEstimate> = None;
    let mut diverged = 0usize;

    'restarts: for restart in 0..config.restarts {
        let mut cfg = config.clone();
        let mut state = init_state(
            dims,
            config.v_max,
            &params.alphabet,
            derive_seed(seed, restart as u64),
        );
        apply_side_info(&mut state, side);
        let mut iterations = 0usize;
        let mut restart_ok = true;

        for round in 0..config.i_max {
            let mut w_prev = state.w_mean.clone();
            let mut round_ok = true;
            for _ in 0..config.j_max {
                if inner_iteration(&mut state, y, a_r, &a_r_abs2, params, &cfg, side).is_err() {
                    round_ok = false;
                    break;
                }
                iterations += 1;
                if config.early_stop_tol > 0.0 {
                    let diff = &state.w_mean - &w_prev;
                    let denom = frobenius(&w_prev).max(1e-30);
                    if frobenius(&diff) / denom < config.early_stop_tol {
                        break;
                    }
                }
                w_prev = state.w_mean.clone();
            }
            if !round_ok {
                restart_ok = false;
                break;
            }
            let residual = residual_norm(y, a_r, &state.s_mean, &state.x_mean);
            if residual.is_finite() {
                let candidate_better = best.as_ref().map_or(true, |b| residual < b.residual);
                if candidate_better {
                    best = Some(BlindEstimate {
                        x_hat: state.x_mean.clone(),
                        s_hat: state.s_mean.clone(),
                        x_pmf: state.x_pmf.clone(),
                        chi_post: state.chi_post.clone(),
                        residual,
                        iterations_used: iterations,
                        restart_index: restart,
                        unresolved_rows: Vec::new(),
                    });
                }
                if config.residual_stop > 0.0 && residual <= config.residual_stop {
                    break 'restarts;
                }
            }
            if round + 1 < config.i_max {
                let next_seed = derive_seed(seed, (restart * config.i_max + round + 1000) as u64);
                // A residual above that of the all-zero estimate means the
                // round diverged; carrying its means into the next round via
                // the reinitialization method would poison every remaining
                // round, so start that round from scratch — and with stronger
                // damping, since divergence here is instance-dependent rather
                // than a property of the starting point.
                if !residual.is_finite() || residual > frobenius(y) {
                    cfg.damping = (cfg.damping * 0.5).max(0.05);
                    state = init_state(dims, config.v_max, &params.alphabet, next_seed);
                } else {
                    state = reinit_state(config.reinit, &state, config.v_max, &params.alphabet, next_seed);
                }
                apply_side_info(&mut state, side);
            }
        }
        if !restart_ok && best.is_none() {
            diverged += 1;
        }
    }

    best.ok_or(AmpError::AllRestartsDiverged(diverged.max(config.restarts)))
}

/// Removes the residual scalar phase using the reference column: row `p`
/// of `X` is rescaled by `x_ref / x_hat[p, 0]` and column `p` of `S` by
/// the inverse, leaving the product unchanged. Rows with a vanishing
/// reference estimate are flagged instead of rescaled.
pub fn remove_scalar_phase(mut estimate: BlindEstimate, x_ref: Complex64) -> BlindEstimate {
    let p_total = estimate.x_hat.nrows();
    for p in 0..p_total {
        let pivot = estimate.x_hat[[p, 0]];
        if pivot.norm() < 1e-12 {
            estimate.unresolved_rows.push(p);
            continue;
        }
        let scale = x_ref / pivot;
        for v in estimate.x_hat.row_mut(p).iter_mut() {
            *v *= scale;
        }
        let inv = pivot / x_ref;
        for v in estimate.s_hat.column_mut(p).iter_mut() {
            *v *= inv;
        }
    }
    estimate
}
