//! Experiment configuration: JSON schema, validation, and conversion into
//! core objects.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use nlie_core::calculus::InteractionKernel;
use nlie_core::dynamics::DtPolicy;
use nlie_core::geometry::{ball_second_moment, BaseMeasureSpec, ConnectivitySpec};
use nlie_core::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConnectivityConfig {
    Ball {
        radius: f64,
    },
    /// C^1 bump profile; without an explicit amplitude it is normalized so
    /// the limit tensor equals `mu_tilde(x) * Id`.
    SmoothBump {
        radius: f64,
        #[serde(default)]
        amplitude: Option<f64>,
    },
    /// Ellipsoidal indicator; without an explicit normalization it uses the
    /// one that makes the limit tensor equal to `d` itself.
    Anisotropic {
        d: Vec<Vec<f64>>,
        radius: f64,
        #[serde(default)]
        normalization: Option<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case")]
pub enum BaseDensityConfig {
    Uniform,
    OnePlusSine { amplitude: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case")]
pub enum KernelConfig {
    Quadratic,
    Gaussian { width: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case")]
pub enum Rho0Config {
    /// `(1 - ((x - center)/width)^2)_+^2`
    Bump { center: Vec<f64>, width: f64 },
    /// Gaussian truncated at `cutoff` standard deviations.
    Gaussian { center: Vec<f64>, sigma: f64, cutoff: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum DtConfig {
    Fixed { value: f64 },
    Adaptive { safety: f64 },
}

/// Top-level experiment configuration (JSON syntax).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dimension: usize,
    #[serde(rename = "box")]
    pub domain: BoxSpec,
    pub h: f64,
    pub eps_list: Vec<f64>,
    pub connectivity: ConnectivityConfig,
    pub base_density: BaseDensityConfig,
    pub kernel: KernelConfig,
    pub t_end: f64,
    pub dt: DtConfig,
    /// Snapshot stride in steps.
    pub snapshots: usize,
    pub out_dir: String,
    /// Seed for randomized property suites; the deterministic pipeline does
    /// not consume it but it participates in the config hash.
    pub seed: u64,
    /// Initial measure; defaults to the normalized base density on the box.
    #[serde(default)]
    pub rho0: Option<Rho0Config>,
    /// `graph` (default) or `local`, for single runs.
    #[serde(default)]
    pub solver: Option<String>,
    /// Quadrature resolution per axis for the limit tensor (default 400).
    #[serde(default)]
    pub quadrature: Option<usize>,
    /// The local reference grid refines the finest graph grid by this
    /// factor (default 2).
    #[serde(default)]
    pub local_refine: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 || self.dimension > 3 {
            return Err(Error::invalid("config: dimension must be 1, 2 or 3"));
        }
        if self.domain.lo.len() != self.dimension || self.domain.hi.len() != self.dimension {
            return Err(Error::invalid("config: box dimensions do not match `dimension`"));
        }
        if self.domain.lo.iter().zip(&self.domain.hi).any(|(a, b)| a >= b) {
            return Err(Error::invalid("config: box must satisfy lo < hi per axis"));
        }
        if self.eps_list.is_empty() {
            return Err(Error::invalid("config: eps_list must not be empty"));
        }
        if self.eps_list.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("config: eps_list must be strictly decreasing"));
        }
        let eps_min = *self.eps_list.last().unwrap();
        if !(self.h > 0.0) {
            return Err(Error::invalid("config: h must be positive"));
        }
        // the coupling keeps h_eps = eps * (h / eps_0); the constraint on the
        // coarsest member implies it for all members
        if self.h > self.eps_list[0] / 4.0 + 1e-12 {
            return Err(Error::invalid(format!(
                "config: h = {} must satisfy h <= eps/4 for the coarsest eps = {} (min eps is {})",
                self.h, self.eps_list[0], eps_min
            )));
        }
        if self.t_end < 0.0 {
            return Err(Error::invalid("config: t_end must be nonnegative"));
        }
        if self.snapshots == 0 {
            return Err(Error::invalid("config: snapshots stride must be >= 1"));
        }
        match &self.dt {
            DtConfig::Fixed { value } if !(*value > 0.0) => {
                return Err(Error::invalid("config: fixed dt must be positive"));
            }
            DtConfig::Adaptive { safety } if !(*safety > 0.0 && *safety <= 1.0) => {
                return Err(Error::invalid("config: adaptive safety must lie in (0, 1]"));
            }
            _ => {}
        }
        Ok(())
    }

    /// Grid spacing for a sweep member, preserving the `h / eps` coupling of
    /// the coarsest member.
    pub fn member_spacing(&self, eps: f64) -> f64 {
        self.h * eps / self.eps_list[0]
    }

    pub fn connectivity_spec(&self) -> Result<ConnectivitySpec> {
        match &self.connectivity {
            ConnectivityConfig::Ball { radius } => Ok(ConnectivitySpec::ball(*radius)),
            ConnectivityConfig::SmoothBump { radius, amplitude } => Ok(match amplitude {
                Some(a) => ConnectivitySpec::smooth_bump(*radius, *a),
                None => {
                    let unit = ConnectivitySpec::smooth_bump_unit(self.dimension);
                    if (*radius - 1.0).abs() > 1e-12 {
                        return Err(Error::invalid(
                            "config: normalized smooth_bump requires radius = 1",
                        ));
                    }
                    unit
                }
            }),
            ConnectivityConfig::Anisotropic { d, radius, normalization } => {
                let dim = d.len();
                if d.iter().any(|row| row.len() != dim) {
                    return Err(Error::invalid("config: anisotropic d must be square"));
                }
                let flat: Vec<f64> = d.iter().flatten().copied().collect();
                let dm = DMatrix::from_row_slice(dim, dim, &flat);
                let dnorm = normalization.unwrap_or_else(|| {
                    let det: f64 = dm.clone().symmetric_eigen().eigenvalues.iter().product();
                    2.0 / (ball_second_moment(dim) * radius.powi(dim as i32 + 2) * det.sqrt())
                });
                ConnectivitySpec::anisotropic(dm, *radius, dnorm)
            }
        }
    }

    pub fn base_measure(&self) -> BaseMeasureSpec {
        match &self.base_density {
            BaseDensityConfig::Uniform => BaseMeasureSpec::uniform(),
            BaseDensityConfig::OnePlusSine { amplitude } => BaseMeasureSpec::one_plus_sine(*amplitude),
        }
    }

    pub fn interaction_kernel(&self) -> InteractionKernel {
        match &self.kernel {
            KernelConfig::Quadratic => InteractionKernel::quadratic(),
            KernelConfig::Gaussian { width } => InteractionKernel::gaussian(*width),
        }
    }

    pub fn kernel_id(&self) -> String {
        match &self.kernel {
            KernelConfig::Quadratic => "quadratic".into(),
            KernelConfig::Gaussian { width } => format!("gaussian(width={width})"),
        }
    }

    /// Initial density profile (unnormalized); the solvers normalize the
    /// resulting masses.
    pub fn rho0_profile(&self) -> Box<dyn Fn(&[f64]) -> f64 + Send + Sync> {
        match &self.rho0 {
            None => {
                let base = self.base_measure();
                Box::new(move |x| base.eval(x))
            }
            Some(Rho0Config::Bump { center, width }) => {
                let c = center.clone();
                let w = *width;
                Box::new(move |x| {
                    let r2: f64 =
                        x.iter().zip(&c).map(|(a, b)| ((a - b) / w) * ((a - b) / w)).sum();
                    (1.0 - r2).max(0.0).powi(2)
                })
            }
            Some(Rho0Config::Gaussian { center, sigma, cutoff }) => {
                let c = center.clone();
                let s = *sigma;
                let cut = *cutoff;
                Box::new(move |x| {
                    let r2: f64 = x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
                    if r2.sqrt() <= cut * s {
                        (-r2 / (2.0 * s * s)).exp()
                    } else {
                        0.0
                    }
                })
            }
        }
    }

    pub fn dt_policy(&self) -> DtPolicy {
        match &self.dt {
            DtConfig::Fixed { value } => DtPolicy::Fixed(*value),
            DtConfig::Adaptive { safety } => DtPolicy::Adaptive { safety: *safety },
        }
    }

    pub fn quadrature_resolution(&self) -> usize {
        self.quadrature.unwrap_or(400)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_json() -> String {
        r#"{
            "dimension": 1,
            "box": {"lo": [-2.0], "hi": [2.0]},
            "h": 0.05,
            "eps_list": [0.4, 0.2, 0.1],
            "connectivity": {"kind": "smooth_bump", "radius": 1.0},
            "base_density": {"id": "one_plus_sine", "amplitude": 0.4},
            "kernel": {"id": "quadratic"},
            "rho0": {"id": "bump", "center": [0.3], "width": 1.3},
            "t_end": 1.0,
            "dt": {"policy": "adaptive", "safety": 0.5},
            "snapshots": 1,
            "out_dir": "out",
            "seed": 7
        }"#
        .to_string()
    }

    #[test]
    fn parses_and_validates() {
        let cfg = ExperimentConfig::from_json(&sample_json()).unwrap();
        assert_eq!(cfg.dimension, 1);
        assert_eq!(cfg.eps_list.len(), 3);
        assert!((cfg.member_spacing(0.1) - 0.0125).abs() < 1e-15);
        cfg.connectivity_spec().unwrap();
    }

    #[test]
    fn rejects_increasing_eps() {
        let bad = sample_json().replace("[0.4, 0.2, 0.1]", "[0.1, 0.2]");
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }

    #[test]
    fn rejects_coarse_h() {
        let bad = sample_json().replace("\"h\": 0.05", "\"h\": 0.2");
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }

    #[test]
    fn rejects_malformed_json() {
        assert!(ExperimentConfig::from_json("{").is_err());
    }

    #[test]
    fn anisotropic_default_normalization_reproduces_d() {
        let json = sample_json().replace(
            r#"{"kind": "smooth_bump", "radius": 1.0}"#,
            r#"{"kind": "anisotropic", "d": [[2.0]], "radius": 1.0}"#,
        );
        let cfg = ExperimentConfig::from_json(&json).unwrap();
        let spec = cfg.connectivity_spec().unwrap();
        let base = BaseMeasureSpec::uniform();
        let t = nlie_core::geometry::tensor_limit(&spec, &base, &[0.0], 800);
        assert!((t[(0, 0)] - 2.0).abs() < 1e-2);
    }
}
