//! GSM modulation: alphabets with rotation-invariance sets, signal priors,
//! and frame generation with embedded reference/label pilots.
//!
//! Under GSM each antenna either transmits a constellation symbol or stays
//! silent, so every signal entry is drawn from the mixture
//! `(1-rho) d(x) + rho/|A| sum_a d(x-a)`. The first pilot column carries a
//! common reference symbol (phase anchor) and the following `T_P - 1`
//! columns encode a per-row antenna label in base-`|A|` digits.

use crate::rng::rng_from_seed;
use crate::CMat;
use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModulationError {
    #[error("empty alphabet")]
    EmptyAlphabet,
    #[error("alphabet is not unit average power (got {0})")]
    NotNormalized(f64),
    #[error("alphabet not invariant under rotation {0} rad")]
    NotRotationInvariant(f64),
    #[error("invalid GSM config: {0}")]
    InvalidConfig(String),
}

/// A complex modulation alphabet together with the set of rotation angles
/// under which it is invariant.
#[derive(Debug, Clone)]
pub struct Alphabet {
    /// Constellation points, unit average power.
    pub symbols: Vec<Complex64>,
    /// Gray-code bit label per symbol (low `bits_per_symbol` bits used).
    pub bit_labels: Vec<u32>,
    /// Bits carried by one symbol.
    pub bits_per_symbol: u32,
    /// Rotation angles (radians) mapping the symbol set to itself.
    pub rotations: Vec<f64>,
}

impl Alphabet {
    /// Validates normalization and rotational invariance.
    pub fn validate(&self) -> Result<(), ModulationError> {
        if self.symbols.is_empty() {
            return Err(ModulationError::EmptyAlphabet);
        }
        let power: f64 =
            self.symbols.iter().map(|a| a.norm_sqr()).sum::<f64>() / self.symbols.len() as f64;
        if (power - 1.0).abs() > 1e-12 {
            return Err(ModulationError::NotNormalized(power));
        }
        for &w in &self.rotations {
            let rot = Complex64::from_polar(1.0, w);
            for &a in &self.symbols {
                let r = rot * a;
                if !self.symbols.iter().any(|&b| (b - r).norm() <= 1e-12) {
                    return Err(ModulationError::NotRotationInvariant(w));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Index of the symbol closest to `x`.
    pub fn nearest(&self, x: Complex64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &a) in self.symbols.iter().enumerate() {
            let d = (x - a).norm_sqr();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Index of the symbol equal to `x` within `tol`, if any.
    pub fn index_of(&self, x: Complex64, tol: f64) -> Option<usize> {
        self.symbols.iter().position(|&a| (a - x).norm() <= tol)
    }
}

/// Gray-mapped QPSK: `(±1±j)/sqrt(2)`, invariant under multiples of `pi/2`.
pub fn make_qpsk() -> Alphabet {
    let s = 1.0 / 2.0f64.sqrt();
    Alphabet {
        // ordered counter-clockwise by phase starting at 45 degrees
        symbols: vec![
            Complex64::new(s, s),
            Complex64::new(-s, s),
            Complex64::new(-s, -s),
            Complex64::new(s, -s),
        ],
        bit_labels: vec![0b00, 0b01, 0b11, 0b10],
        bits_per_symbol: 2,
        rotations: vec![0.0, PI / 2.0, PI, 3.0 * PI / 2.0],
    }
}

/// Bits per antenna per time slot carried by the GSM mixture:
/// `-(1-rho)log2(1-rho) - rho log2(rho/|A|)`, with `0 log 0 = 0`.
pub fn per_antenna_rate(rho: f64, alphabet_size: usize) -> Result<f64, ModulationError> {
    if alphabet_size == 0 {
        return Err(ModulationError::EmptyAlphabet);
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(ModulationError::InvalidConfig(format!(
            "rho={rho} outside [0,1]"
        )));
    }
    let h = |p: f64| if p > 0.0 { -p * p.log2() } else { 0.0 };
    let active = if rho > 0.0 {
        -rho * (rho / alphabet_size as f64).log2()
    } else {
        0.0
    };
    Ok(h(1.0 - rho) + active)
}

/// Prior over `{0} ∪ symbols`: index 0 is the zero atom with mass `1-rho`,
/// index `i+1` is `symbols[i]` with mass `rho/|A|`.
pub fn signal_prior_pmf(rho: f64, alphabet: &Alphabet) -> Vec<f64> {
    let mut pmf = Vec::with_capacity(alphabet.len() + 1);
    pmf.push(1.0 - rho);
    let per = rho / alphabet.len() as f64;
    pmf.extend(std::iter::repeat(per).take(alphabet.len()));
    pmf
}

/// Problem dimensions and sparsity for one GSM transmission block.
#[derive(Debug, Clone)]
pub struct GsmConfig {
    /// Number of users.
    pub k: usize,
    /// Antennas per user.
    pub n: usize,
    /// Coherence length in slots.
    pub t: usize,
    /// Signal sparsity level in (0,1).
    pub rho: f64,
    pub alphabet: Alphabet,
    /// Pilot length in slots (reference column + label columns).
    pub t_p: usize,
}

impl GsmConfig {
    pub fn total_antennas(&self) -> usize {
        self.k * self.n
    }

    /// Minimum pilot length: one reference slot plus enough base-`|A|`
    /// digits to give every row a distinct label.
    pub fn min_pilot_len(kn: usize, alphabet_size: usize) -> usize {
        let mut digits = 0usize;
        let mut cap = 1usize;
        while cap < kn {
            cap *= alphabet_size;
            digits += 1;
        }
        digits + 1
    }

    pub fn validate(&self) -> Result<(), ModulationError> {
        self.alphabet.validate()?;
        if self.k == 0 || self.n == 0 || self.t == 0 {
            return Err(ModulationError::InvalidConfig(
                "K, N, T must be positive".into(),
            ));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(ModulationError::InvalidConfig(format!(
                "rho={} outside (0,1)",
                self.rho
            )));
        }
        let need = Self::min_pilot_len(self.total_antennas(), self.alphabet.len());
        if self.t_p < need {
            return Err(ModulationError::InvalidConfig(format!(
                "T_P={} below minimum {need}",
                self.t_p
            )));
        }
        if self.t_p >= self.t {
            return Err(ModulationError::InvalidConfig(format!(
                "T_P={} must be smaller than T={}",
                self.t_p, self.t
            )));
        }
        Ok(())
    }
}

/// One transmitted signal matrix with its pilot block and ground truth
/// activity pattern.
#[derive(Debug, Clone)]
pub struct GsmFrame {
    /// `KN x T` signal matrix.
    pub x: CMat,
    /// Activity indicators, same shape as `x`.
    pub activity: Array2<u8>,
    /// Pilot length (first `t_p` columns of `x` are known to the receiver).
    pub t_p: usize,
}

impl GsmFrame {
    /// The known pilot block (`KN x T_P` view copied out).
    pub fn pilot_block(&self) -> CMat {
        self.x.slice(ndarray::s![.., ..self.t_p]).to_owned()
    }
}

/// Big-endian base-`|A|` digits of `row`, one symbol per label slot.
fn label_symbols(row: usize, slots: usize, alphabet: &Alphabet) -> Vec<Complex64> {
    let base = alphabet.len();
    let mut digits = vec![0usize; slots];
    let mut r = row;
    for d in digits.iter_mut().rev() {
        *d = r % base;
        r /= base;
    }
    digits.into_iter().map(|d| alphabet.symbols[d]).collect()
}

/// Decodes a pilot row (reference + label columns) back to its row label.
/// Returns `None` if any slot is not a constellation point.
pub fn decode_label(pilot_row: &[Complex64], alphabet: &Alphabet) -> Option<usize> {
    let base = alphabet.len();
    let mut row = 0usize;
    for &x in &pilot_row[1..] {
        let d = alphabet.index_of(x, 1e-9)?;
        row = row * base + d;
    }
    Some(row)
}

/// Samples a frame: dense pilot block (reference column + unique row
/// labels), then i.i.d. GSM entries on the data columns.
pub fn generate_frame(config: &GsmConfig, seed: u64) -> Result<GsmFrame, ModulationError> {
    config.validate()?;
    let kn = config.total_antennas();
    let x_ref = config.alphabet.symbols[0];
    let mut rng = rng_from_seed(seed);
    let mut x = Array2::zeros((kn, config.t));
    let mut activity = Array2::zeros((kn, config.t));

    for p in 0..kn {
        x[[p, 0]] = x_ref;
        activity[[p, 0]] = 1;
        for (off, sym) in label_symbols(p, config.t_p - 1, &config.alphabet)
            .into_iter()
            .enumerate()
        {
            x[[p, off + 1]] = sym;
            activity[[p, off + 1]] = 1;
        }
    }
    for t in config.t_p..config.t {
        for p in 0..kn {
            if rng.gen::<f64>() < config.rho {
                let idx = rng.gen_range(0..config.alphabet.len());
                x[[p, t]] = config.alphabet.symbols[idx];
                activity[[p, t]] = 1;
            }
        }
    }
    Ok(GsmFrame {
        x,
        activity,
        t_p: config.t_p,
    })
}
