//! Scenario configuration: flat `key=value` text with `[gsm]`,
//! `[channel]`, `[estimator]`, `[run]` sections. Unknown keys are
//! rejected by name so typos fail loudly instead of silently using a
//! default.

use bcse_core::amp::{BcseConfig, ReinitMethod, SignalPrior};
use bcse_core::channel::MarkovSupportParams;
use bcse_core::em::EmConfig;
use bcse_core::modulation::{make_qpsk, GsmConfig};
use bcse_core::semiblind::RefinementConfig;
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("missing key {0}")]
    MissingKey(String),
    #[error("bad value for {key}: {reason}")]
    BadValue { key: String, reason: String },
    #[error("malformed line {line}: {text:?}")]
    MalformedLine { line: usize, text: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Bcse,
    Sbcse,
    DftBigamp,
    BcseModel17,
    TrainingBased,
    GenieS,
    GenieX,
}

impl Scheme {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bcse" => Some(Self::Bcse),
            "sbcse" => Some(Self::Sbcse),
            "dft-bigamp" => Some(Self::DftBigamp),
            "bcse-model17" => Some(Self::BcseModel17),
            "training-based" => Some(Self::TrainingBased),
            "genie-S" | "genie-s" => Some(Self::GenieS),
            "genie-X" | "genie-x" => Some(Self::GenieX),
        _ => None,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Bcse => "bcse",
            Self::Sbcse => "sbcse",
            Self::DftBigamp => "dft-bigamp",
            Self::BcseModel17 => "bcse-model17",
            Self::TrainingBased => "training-based",
            Self::GenieS => "genie-S",
            Self::GenieX => "genie-X",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridMode {
    Dft,
    Perturbed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FadingMode {
    /// All users at unit prior variance.
    Unit,
    /// Per-user prior variance uniform on `[v_min, 1]`.
    Uniform,
}

#[derive(Debug, Clone)]
pub struct ChannelSpec {
    pub m: usize,
    pub m_prime: usize,
    pub n_prime: usize,
    pub rx_spacing: f64,
    pub tx_spacing: f64,
    pub grid: GridMode,
    pub support: MarkovSupportParams,
    pub v_s: f64,
    pub fading: FadingMode,
    pub v_min: f64,
}

#[derive(Debug, Clone)]
pub struct EstimatorSpec {
    pub scheme: Scheme,
    pub bcse: BcseConfig,
    pub refine: RefinementConfig,
    pub em: EmConfig,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub gsm: GsmConfig,
    pub channel: ChannelSpec,
    pub estimator: EstimatorSpec,
    pub snr_db: f64,
    pub trials: usize,
    pub master_seed: u64,
    /// SNR points for `sweep`; optional otherwise.
    pub snr_list: Vec<f64>,
    /// Phase-transition axes: (name, values).
    pub pt_axis1: Option<(String, Vec<f64>)>,
    pub pt_axis2: Option<(String, Vec<f64>)>,
}

impl Scenario {
    pub fn sigma2(&self) -> f64 {
        sigma2_for(&self.gsm, self.snr_db)
    }
}

/// SNR is defined as `rho K N / sigma2`.
pub fn sigma2_for(gsm: &GsmConfig, snr_db: f64) -> f64 {
    gsm.rho * (gsm.k * gsm.n) as f64 / 10f64.powf(snr_db / 10.0)
}

struct Raw {
    entries: BTreeMap<String, String>,
}

impl Raw {
    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                reason: format!("cannot parse {v:?}"),
            }),
        }
    }

    fn require<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, ConfigError> {
        self.parse(key)?
            .ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }

    fn bool(&mut self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "true" | "1" | "on" => Ok(true),
                "false" | "0" | "off" => Ok(false),
                _ => Err(ConfigError::BadValue {
                    key: key.to_string(),
                    reason: format!("expected boolean, got {v:?}"),
                }),
            },
        }
    }

    fn list(&mut self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|_| ConfigError::BadValue {
                    key: key.to_string(),
                    reason: format!("expected comma-separated numbers, got {v:?}"),
                }),
        }
    }
}

fn split_sections(text: &str) -> Result<Raw, ConfigError> {
    let mut entries = BTreeMap::new();
    let mut section = String::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::MalformedLine {
                line: i + 1,
                text: line.to_string(),
            });
        };
        let key = if section.is_empty() {
            k.trim().to_string()
        } else {
            format!("{section}.{}", k.trim())
        };
        entries.insert(key, v.trim().to_string());
    }
    Ok(Raw { entries })
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ConfigError> {
    let mut raw = split_sections(text)?;

    let gsm = GsmConfig {
        k: raw.require("gsm.k")?,
        n: raw.require("gsm.n")?,
        t: raw.require("gsm.t")?,
        rho: raw.require("gsm.rho")?,
        alphabet: match raw.take("gsm.alphabet").as_deref() {
            None | Some("qpsk") => make_qpsk(),
            Some(other) => {
                return Err(ConfigError::BadValue {
                    key: "gsm.alphabet".into(),
                    reason: format!("unsupported alphabet {other:?}"),
                })
            }
        },
        t_p: raw.require("gsm.t_p")?,
    };

    let lambda: f64 = raw.require("channel.lambda")?;
    let support = match raw.parse::<f64>("channel.p_enter")? {
        Some(p_enter) => MarkovSupportParams::from_lambda_enter(lambda, p_enter),
        None => MarkovSupportParams::iid(lambda),
    }
    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let channel = ChannelSpec {
        m: raw.require("channel.m")?,
        m_prime: raw.require("channel.m_prime")?,
        n_prime: raw.parse("channel.n_prime")?.unwrap_or(gsm.n),
        rx_spacing: raw.parse("channel.rx_spacing")?.unwrap_or(1.0),
        tx_spacing: raw.parse("channel.tx_spacing")?.unwrap_or(1.0),
        grid: match raw.take("channel.grid").as_deref() {
            None | Some("dft") => GridMode::Dft,
            Some("perturbed") => GridMode::Perturbed,
            Some(other) => {
                return Err(ConfigError::BadValue {
                    key: "channel.grid".into(),
                    reason: format!("expected dft or perturbed, got {other:?}"),
                })
            }
        },
        support,
        v_s: raw.parse("channel.v_s")?.unwrap_or(1.0),
        fading: match raw.take("channel.fading").as_deref() {
            None | Some("unit") => FadingMode::Unit,
            Some("uniform") => FadingMode::Uniform,
            Some(other) => {
                return Err(ConfigError::BadValue {
                    key: "channel.fading".into(),
                    reason: format!("expected unit or uniform, got {other:?}"),
                })
            }
        },
        v_min: raw.parse("channel.v_min")?.unwrap_or(0.1),
    };

    let scheme_text: String = raw.require("estimator.scheme")?;
    let scheme = Scheme::parse(&scheme_text).ok_or_else(|| ConfigError::BadValue {
        key: "estimator.scheme".into(),
        reason: format!("unknown scheme {scheme_text:?}"),
    })?;
    let defaults = BcseConfig::default();
    let reinit = match raw.take("estimator.reinit") {
        None => defaults.reinit,
        Some(v) => ReinitMethod::parse(&v).ok_or_else(|| ConfigError::BadValue {
            key: "estimator.reinit".into(),
            reason: format!("unknown method {v:?}"),
        })?,
    };
    let bcse = BcseConfig {
        i_max: raw.parse("estimator.i_max")?.unwrap_or(defaults.i_max),
        j_max: raw.parse("estimator.j_max")?.unwrap_or(defaults.j_max),
        restarts: raw.parse("estimator.restarts")?.unwrap_or(defaults.restarts),
        reinit,
        early_stop_tol: raw
            .parse("estimator.early_stop_tol")?
            .unwrap_or(defaults.early_stop_tol),
        v_max: raw.parse("estimator.v_max")?.unwrap_or(defaults.v_max),
        damping: raw.parse("estimator.damping")?.unwrap_or(defaults.damping),
        residual_stop: raw
            .parse("estimator.residual_stop")?
            .unwrap_or(defaults.residual_stop),
        sigma2_floor: raw
            .parse("estimator.sigma2_floor")?
            .unwrap_or(defaults.sigma2_floor),
        signal_prior: SignalPrior::Gsm,
    };
    let refine = RefinementConfig {
        alpha: raw.parse("estimator.alpha")?,
        q_max: raw.parse("estimator.q_max")?.unwrap_or(100),
        epsilon: raw.parse("estimator.epsilon")?.unwrap_or(0.0),
        grid_tuning: raw.bool("estimator.grid_tuning", false)?,
    };
    let em = EmConfig {
        update_sigma2: raw.bool("estimator.em_sigma2", false)?,
        update_aoa_grid: raw.bool("estimator.em_aoa_grid", false)?,
        update_v_s: raw.bool("estimator.em_v_s", false)?,
        update_p_enter: raw.bool("estimator.em_p_enter", false)?,
        update_lambda_s: raw.bool("estimator.em_lambda_s", false)?,
        grid_step: raw.parse("estimator.em_grid_step")?.unwrap_or(1e-5),
        min_var: raw.parse("estimator.em_min_var")?.unwrap_or(1e-12),
    };

    let snr_db: f64 = raw.require("run.snr_db")?;
    let trials: usize = raw.require("run.trials")?;
    let master_seed: u64 = raw.require("run.master_seed")?;
    let snr_list = raw.list("run.snr_list")?.unwrap_or_default();
    let axis = |raw: &mut Raw, name_key: &str, values_key: &str| -> Result<Option<(String, Vec<f64>)>, ConfigError> {
        match (raw.take(name_key), raw.list(values_key)?) {
            (None, None) => Ok(None),
            (Some(name), Some(values)) => {
                if !matches!(name.as_str(), "k" | "lambda" | "rho") {
                    return Err(ConfigError::BadValue {
                        key: name_key.into(),
                        reason: format!("axis must be k, lambda, or rho, got {name:?}"),
                    });
                }
                Ok(Some((name, values)))
            }
            _ => Err(ConfigError::Invalid(format!(
                "{name_key} and {values_key} must be given together"
            ))),
        }
    };
    let pt_axis1 = axis(&mut raw, "run.pt_axis1", "run.pt_axis1_values")?;
    let pt_axis2 = axis(&mut raw, "run.pt_axis2", "run.pt_axis2_values")?;

    if let Some(key) = raw.entries.keys().next() {
        return Err(ConfigError::UnknownKey(key.clone()));
    }

    let scenario = Scenario {
        gsm,
        channel,
        estimator: EstimatorSpec {
            scheme,
            bcse,
            refine,
            em,
        },
        snr_db,
        trials,
        master_seed,
        snr_list,
        pt_axis1,
        pt_axis2,
    };
    validate(&scenario)?;
    Ok(scenario)
}

fn validate(s: &Scenario) -> Result<(), ConfigError> {
    s.gsm
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    if s.channel.m == 0 || s.channel.m_prime == 0 {
        return Err(ConfigError::Invalid("m and m_prime must be positive".into()));
    }
    if s.estimator.scheme == Scheme::DftBigamp && s.channel.m_prime != s.channel.m {
        return Err(ConfigError::Invalid(
            "dft-bigamp requires m_prime = m".into(),
        ));
    }
    if s.trials == 0 {
        return Err(ConfigError::Invalid("trials must be positive".into()));
    }
    Ok(())
}

/// Serializes the resolved scenario back to config text (for the run
/// metadata sidecar).
pub fn render_scenario(s: &Scenario) -> String {
    let mut out = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(out, "[gsm]");
    let _ = writeln!(out, "k={}", s.gsm.k);
    let _ = writeln!(out, "n={}", s.gsm.n);
    let _ = writeln!(out, "t={}", s.gsm.t);
    let _ = writeln!(out, "t_p={}", s.gsm.t_p);
    let _ = writeln!(out, "rho={}", s.gsm.rho);
    let _ = writeln!(out, "alphabet=qpsk");
    let _ = writeln!(out, "[channel]");
    let _ = writeln!(out, "m={}", s.channel.m);
    let _ = writeln!(out, "m_prime={}", s.channel.m_prime);
    let _ = writeln!(out, "n_prime={}", s.channel.n_prime);
    let _ = writeln!(out, "rx_spacing={}", s.channel.rx_spacing);
    let _ = writeln!(out, "tx_spacing={}", s.channel.tx_spacing);
    let _ = writeln!(
        out,
        "grid={}",
        match s.channel.grid {
            GridMode::Dft => "dft",
            GridMode::Perturbed => "perturbed",
        }
    );
    let _ = writeln!(out, "lambda={}", s.channel.support.lambda);
    let _ = writeln!(out, "p_enter={}", s.channel.support.p_enter);
    let _ = writeln!(out, "v_s={}", s.channel.v_s);
    let _ = writeln!(
        out,
        "fading={}",
        match s.channel.fading {
            FadingMode::Unit => "unit",
            FadingMode::Uniform => "uniform",
        }
    );
    let _ = writeln!(out, "v_min={}", s.channel.v_min);
    let _ = writeln!(out, "[estimator]");
    let _ = writeln!(out, "scheme={}", s.estimator.scheme);
    let b = &s.estimator.bcse;
    let _ = writeln!(out, "i_max={}", b.i_max);
    let _ = writeln!(out, "j_max={}", b.j_max);
    let _ = writeln!(out, "restarts={}", b.restarts);
    let _ = writeln!(
        out,
        "reinit={}",
        match b.reinit {
            ReinitMethod::ChannelMeanVar => "i",
            ReinitMethod::ChannelMeanVarSignalVar => "ii",
            ReinitMethod::SignalMeanVar => "iii",
            ReinitMethod::SignalMeanVarChannelVar => "iv",
            ReinitMethod::BothVariances => "v",
        }
    );
    let _ = writeln!(out, "early_stop_tol={}", b.early_stop_tol);
    let _ = writeln!(out, "v_max={}", b.v_max);
    let _ = writeln!(out, "damping={}", b.damping);
    let _ = writeln!(out, "residual_stop={}", b.residual_stop);
    let _ = writeln!(out, "sigma2_floor={}", b.sigma2_floor);
    let r = &s.estimator.refine;
    if let Some(a) = r.alpha {
        let _ = writeln!(out, "alpha={a}");
    }
    let _ = writeln!(out, "q_max={}", r.q_max);
    let _ = writeln!(out, "epsilon={}", r.epsilon);
    let _ = writeln!(out, "grid_tuning={}", r.grid_tuning);
    let em = &s.estimator.em;
    let _ = writeln!(out, "em_sigma2={}", em.update_sigma2);
    let _ = writeln!(out, "em_aoa_grid={}", em.update_aoa_grid);
    let _ = writeln!(out, "em_v_s={}", em.update_v_s);
    let _ = writeln!(out, "em_p_enter={}", em.update_p_enter);
    let _ = writeln!(out, "em_lambda_s={}", em.update_lambda_s);
    let _ = writeln!(out, "em_grid_step={}", em.grid_step);
    let _ = writeln!(out, "em_min_var={}", em.min_var);
    let _ = writeln!(out, "[run]");
    let _ = writeln!(out, "snr_db={}", s.snr_db);
    let _ = writeln!(out, "trials={}", s.trials);
    let _ = writeln!(out, "master_seed={}", s.master_seed);
    if !s.snr_list.is_empty() {
        let list: Vec<String> = s.snr_list.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "snr_list={}", list.join(","));
    }
    for (key, axis) in [("pt_axis1", &s.pt_axis1), ("pt_axis2", &s.pt_axis2)] {
        if let Some((name, values)) = axis {
            let list: Vec<String> = values.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{key}={name}");
            let _ = writeln!(out, "{key}_values={}", list.join(","));
        }
    }
    out
}
