//! Angular-domain channel model: steering matrices, sparse channel
//! sampling with independent or Markov support, and received-signal
//! synthesis `Y = A_R G A_T^H X + N`.
//!
//! The default receive grid is the uniform sine-domain grid
//! `sin(v_q) = (q-1)/M'` with element spacing equal to one wavelength, so
//! that `A_R` on the unperturbed grid is exactly the normalized DFT matrix.

use crate::rng::rng_from_seed;
use crate::{CMat, RMat};
use ndarray::{s, Array1, Array2};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

/// Which side of the link a grid belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    ReceiverAoa,
    UserAod,
}

/// An ordered set of angular bins (radians, strictly increasing, inside
/// `(-pi/2, pi/2)`).
#[derive(Debug, Clone)]
pub struct AngularGrid {
    pub angles: Vec<f64>,
    pub kind: GridKind,
}

impl AngularGrid {
    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        for w in self.angles.windows(2) {
            if w[1] <= w[0] {
                return Err(ChannelError::InvalidParam(
                    "grid angles must be strictly increasing".into(),
                ));
            }
        }
        if self
            .angles
            .iter()
            .any(|&a| !(-PI / 2.0..PI / 2.0).contains(&a) && a != 0.0)
        {
            return Err(ChannelError::InvalidParam(
                "grid angles must lie in (-pi/2, pi/2)".into(),
            ));
        }
        Ok(())
    }
}

/// Antenna array geometry. For a ULA, `ratio` is the element spacing over
/// the wavelength; for an LAA (lens array), `ratio` is the aperture over
/// the wavelength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArrayKind {
    Ula,
    Laa,
}

#[derive(Debug, Clone, Copy)]
pub struct ArrayGeometry {
    pub kind: ArrayKind,
    pub element_count: usize,
    pub ratio: f64,
}

impl ArrayGeometry {
    /// ULA with spacing `d` over wavelength.
    pub fn ula(element_count: usize, spacing_over_wavelength: f64) -> Self {
        Self {
            kind: ArrayKind::Ula,
            element_count,
            ratio: spacing_over_wavelength,
        }
    }

    /// Lens array with aperture `D` over wavelength.
    pub fn laa(element_count: usize, aperture_over_wavelength: f64) -> Self {
        Self {
            kind: ArrayKind::Laa,
            element_count,
            ratio: aperture_over_wavelength,
        }
    }
}

/// Markov support chain along the AoA axis: `p_enter` is the 0->1
/// transition, `p_exit` the 1->0 transition, `lambda` the stationary
/// active probability `p_enter / (p_enter + p_exit)`.
#[derive(Debug, Clone, Copy)]
pub struct MarkovSupportParams {
    pub lambda: f64,
    pub p_enter: f64,
    pub p_exit: f64,
}

impl MarkovSupportParams {
    /// Builds the stationary-consistent parameter set from `(lambda, p_enter)`.
    pub fn from_lambda_enter(lambda: f64, p_enter: f64) -> Result<Self, ChannelError> {
        if !(0.0 < lambda && lambda < 1.0) || !(0.0 < p_enter && p_enter < 1.0) {
            return Err(ChannelError::InvalidParam(
                "lambda and p_enter must be in (0,1)".into(),
            ));
        }
        let p_exit = p_enter * (1.0 - lambda) / lambda;
        if p_exit >= 1.0 {
            return Err(ChannelError::InvalidParam(format!(
                "implied p_exit={p_exit} not below 1"
            )));
        }
        Ok(Self {
            lambda,
            p_enter,
            p_exit,
        })
    }

    /// i.i.d. support with active probability `lambda`: the next state does
    /// not depend on the current one.
    pub fn iid(lambda: f64) -> Result<Self, ChannelError> {
        Self::from_lambda_enter(lambda, lambda)
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("p_enter", self.p_enter),
            ("p_exit", self.p_exit),
        ] {
            if !(0.0 < v && v < 1.0) {
                return Err(ChannelError::InvalidParam(format!("{name}={v} not in (0,1)")));
            }
        }
        let implied = self.p_enter / (self.p_enter + self.p_exit);
        if (implied - self.lambda).abs() > 1e-12 {
            return Err(ChannelError::InvalidParam(format!(
                "lambda={} inconsistent with p_enter/(p_enter+p_exit)={implied}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// One sampled channel with all derived matrices.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    /// `M' x KN'` angular gains.
    pub g: CMat,
    /// Binary support of `g`.
    pub support: Array2<u8>,
    /// `M x M'` receive steering matrix.
    pub a_r: CMat,
    /// `KN x KN'` block-diagonal transmit steering matrix.
    pub a_t: CMat,
    /// `M x KN` composite channel `A_R G A_T^H`.
    pub h: CMat,
    /// `M' x KN` left-absorbed channel `G A_T^H`.
    pub s: CMat,
    /// Per-user prior gain variance (length K).
    pub v_pri: Vec<f64>,
}

/// ULA steering vector: entry `m` is `(1/sqrt(M)) exp(-j 2 pi m (d/wl) sin a)`.
pub fn ula_steering(angle: f64, geometry: &ArrayGeometry) -> Array1<Complex64> {
    debug_assert_eq!(geometry.kind, ArrayKind::Ula);
    let m = geometry.element_count;
    let scale = 1.0 / (m as f64).sqrt();
    let step = -2.0 * PI * geometry.ratio * angle.sin();
    Array1::from_iter((0..m).map(|i| Complex64::from_polar(scale, step * i as f64)))
}

/// Derivative of the ULA steering vector with respect to the angle.
pub fn ula_steering_derivative(angle: f64, geometry: &ArrayGeometry) -> Array1<Complex64> {
    let a = ula_steering(angle, geometry);
    let c = -2.0 * PI * geometry.ratio * angle.cos();
    Array1::from_iter(
        a.iter()
            .enumerate()
            .map(|(i, &v)| v * Complex64::new(0.0, c * i as f64)),
    )
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Lens-array steering vector: entry `i` is
/// `sinc(-(M-1)/2 + i - (D/wl) sin a)` with the normalized sinc.
pub fn laa_steering(angle: f64, geometry: &ArrayGeometry) -> Array1<f64> {
    debug_assert_eq!(geometry.kind, ArrayKind::Laa);
    let m = geometry.element_count;
    let shift = geometry.ratio * angle.sin();
    Array1::from_iter((0..m).map(|i| sinc(-((m - 1) as f64) / 2.0 + i as f64 - shift)))
}

/// Uniform sine-domain DFT grid `sin(v_q) = (q-1)/M'`, as angles.
pub fn dft_grid(m_prime: usize, kind: GridKind) -> AngularGrid {
    AngularGrid {
        angles: (0..m_prime)
            .map(|q| (q as f64 / m_prime as f64).asin())
            .collect(),
        kind,
    }
}

/// True AoAs: the DFT grid perturbed in the sine domain by i.i.d. offsets
/// uniform on `[-1/(2M'), 1/(2M')]`.
pub fn perturbed_dft_grid(m_prime: usize, seed: u64) -> AngularGrid {
    let mut rng = rng_from_seed(seed);
    let half_bin = 1.0 / (2.0 * m_prime as f64);
    AngularGrid {
        angles: (0..m_prime)
            .map(|q| {
                let offset = rng.gen_range(-half_bin..half_bin);
                (q as f64 / m_prime as f64 + offset).clamp(-1.0 + 1e-12, 1.0 - 1e-12).asin()
            })
            .collect(),
        kind: GridKind::ReceiverAoa,
    }
}

/// Assembles the steering matrix for a grid: column `q` is the steering
/// vector at `grid.angles[q]`. LAA vectors are real-valued.
pub fn steering_matrix(grid: &AngularGrid, geometry: &ArrayGeometry) -> CMat {
    let m = geometry.element_count;
    let mut a = Array2::zeros((m, grid.len()));
    for (q, &angle) in grid.angles.iter().enumerate() {
        match geometry.kind {
            ArrayKind::Ula => {
                a.column_mut(q).assign(&ula_steering(angle, geometry));
            }
            ArrayKind::Laa => {
                let col = laa_steering(angle, geometry);
                for (i, &v) in col.iter().enumerate() {
                    a[[i, q]] = Complex64::new(v, 0.0);
                }
            }
        }
    }
    a
}

/// Block-diagonal transmit steering matrix `diag(A_T,1 .. A_T,K)` from
/// per-user AoD grids.
pub fn block_diag_a_t(grids: &[AngularGrid], geometry: &ArrayGeometry) -> CMat {
    let k = grids.len();
    let n = geometry.element_count;
    let n_prime = grids.first().map_or(0, |g| g.len());
    let mut a_t = Array2::zeros((k * n, k * n_prime));
    for (u, grid) in grids.iter().enumerate() {
        let block = steering_matrix(grid, geometry);
        a_t.slice_mut(s![u * n..(u + 1) * n, u * n_prime..(u + 1) * n_prime])
            .assign(&block);
    }
    a_t
}

/// Samples a binary support matrix: each column is an independent Markov
/// chain along the row axis with initial law `P(d_1 = 1) = lambda`.
pub fn sample_support(
    params: &MarkovSupportParams,
    rows: usize,
    cols: usize,
    seed: u64,
) -> Result<Array2<u8>, ChannelError> {
    params.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut d = Array2::zeros((rows, cols));
    for p in 0..cols {
        let mut active = rng.gen::<f64>() < params.lambda;
        d[[0, p]] = active as u8;
        for q in 1..rows {
            let flip = if active {
                rng.gen::<f64>() < params.p_exit
            } else {
                rng.gen::<f64>() < params.p_enter
            };
            if flip {
                active = !active;
            }
            d[[q, p]] = active as u8;
        }
    }
    Ok(d)
}

/// Draws one circular complex Gaussian sample with variance `v`
/// (independent real/imaginary parts of variance `v/2`).
pub fn sample_cn(rng: &mut ChaCha8Rng, v: f64) -> Complex64 {
    let std = (v / 2.0).sqrt();
    // Box-Muller
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (2.0 * PI * u2).sin_cos();
    Complex64::new(std * r * c, std * r * s)
}

/// Samples angular gains on a given support: zero off-support, circular
/// complex Gaussian with variance `v_pri` on-support.
pub fn sample_angular_channel(support: &Array2<u8>, v_pri: f64, seed: u64) -> CMat {
    let mut rng = rng_from_seed(seed);
    let mut g = Array2::zeros(support.dim());
    for ((q, p), &d) in support.indexed_iter() {
        if d == 1 {
            g[[q, p]] = sample_cn(&mut rng, v_pri);
        }
    }
    g
}

/// Per-user cluster/path sample of the physical channel
/// `H_k = sum_i sum_j alpha(i,j) a_R(theta_ij) a_T^H(phi_ij)`.
/// Cluster centers are uniform on `(-pi/2, pi/2)`; per-path angles are
/// drawn inside `spread` around the center in the sine domain. Returns the
/// composite `M x KN` channel and the per-user (AoA, AoD) path lists.
#[allow(clippy::too_many_arguments)]
pub fn sample_clustered_physical(
    users: usize,
    clusters: usize,
    paths: usize,
    spread: f64,
    rx_geometry: &ArrayGeometry,
    tx_geometry: &ArrayGeometry,
    gain_var: f64,
    seed: u64,
) -> Result<(CMat, Vec<Vec<(f64, f64)>>), ChannelError> {
    if clusters == 0 || paths == 0 {
        return Err(ChannelError::InvalidParam(
            "clusters and paths must be at least 1".into(),
        ));
    }
    let m = rx_geometry.element_count;
    let n = tx_geometry.element_count;
    let mut rng = rng_from_seed(seed);
    let mut h = Array2::zeros((m, users * n));
    let mut angles = Vec::with_capacity(users);
    let half_spread_sin = (spread / 2.0).sin();
    for k in 0..users {
        let mut user_angles = Vec::with_capacity(clusters * paths);
        let mut h_k: CMat = Array2::zeros((m, n));
        for _ in 0..clusters {
            let center_aoa: f64 = rng.gen_range(-PI / 2.0 + 1e-6..PI / 2.0 - 1e-6);
            let center_aod: f64 = rng.gen_range(-PI / 2.0 + 1e-6..PI / 2.0 - 1e-6);
            for _ in 0..paths {
                let aoa = (center_aoa.sin()
                    + rng.gen_range(-half_spread_sin..half_spread_sin))
                .clamp(-1.0 + 1e-9, 1.0 - 1e-9)
                .asin();
                let aod = (center_aod.sin()
                    + rng.gen_range(-half_spread_sin..half_spread_sin))
                .clamp(-1.0 + 1e-9, 1.0 - 1e-9)
                .asin();
                let alpha = sample_cn(&mut rng, gain_var / (clusters * paths) as f64);
                let a_r = ula_steering(aoa, rx_geometry);
                let a_t = ula_steering(aod, tx_geometry);
                for i in 0..m {
                    for j in 0..n {
                        h_k[[i, j]] += alpha * a_r[i] * a_t[j].conj();
                    }
                }
                user_angles.push((aoa, aod));
            }
        }
        h.slice_mut(s![.., k * n..(k + 1) * n]).assign(&h_k);
        angles.push(user_angles);
    }
    Ok((h, angles))
}

/// Composes a full realization from sampled support and gains.
pub fn compose_realization(
    g: CMat,
    support: Array2<u8>,
    a_r: CMat,
    a_t: CMat,
    v_pri: Vec<f64>,
) -> Result<ChannelRealization, ChannelError> {
    if a_r.ncols() != g.nrows() {
        return Err(ChannelError::Dimension(format!(
            "A_R has {} columns but G has {} rows",
            a_r.ncols(),
            g.nrows()
        )));
    }
    if a_t.ncols() != g.ncols() {
        return Err(ChannelError::Dimension(format!(
            "A_T has {} columns but G has {} columns",
            a_t.ncols(),
            g.ncols()
        )));
    }
    let a_t_h = a_t.t().mapv(|v| v.conj());
    let s = g.dot(&a_t_h);
    let h = a_r.dot(&s);
    Ok(ChannelRealization {
        g,
        support,
        a_r,
        a_t,
        h,
        s,
        v_pri,
    })
}

/// Synthesizes the received matrix `Y = H X + N` with i.i.d. circular
/// Gaussian noise of per-entry variance `sigma2`.
pub fn synthesize_received(
    realization: &ChannelRealization,
    x: &CMat,
    sigma2: f64,
    seed: u64,
) -> Result<CMat, ChannelError> {
    if realization.h.ncols() != x.nrows() {
        return Err(ChannelError::Dimension(format!(
            "H has {} columns but X has {} rows",
            realization.h.ncols(),
            x.nrows()
        )));
    }
    let mut y = realization.h.dot(x);
    if sigma2 > 0.0 {
        let mut rng = rng_from_seed(seed);
        for v in y.iter_mut() {
            *v += sample_cn(&mut rng, sigma2);
        }
    }
    Ok(y)
}

/// The normalized DFT matrix of size `m`.
pub fn dft_matrix(m: usize) -> CMat {
    let scale = 1.0 / (m as f64).sqrt();
    Array2::from_shape_fn((m, m), |(i, j)| {
        Complex64::from_polar(scale, -2.0 * PI * (i * j) as f64 / m as f64)
    })
}

/// Projects the received matrix to the angular domain: `Y' = F^H Y`.
pub fn dft_project(y: &CMat) -> CMat {
    let f = dft_matrix(y.nrows());
    f.t().mapv(|v| v.conj()).dot(y)
}

/// Squared-magnitude matrix, used for AMP variance propagation.
pub fn abs2(a: &CMat) -> RMat {
    a.mapv(|v| v.norm_sqr())
}
