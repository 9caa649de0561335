//! Distribution-network configurations, per-unit admittance models and
//! droop-controller parameters.
//!
//! A [`NetworkConfig`] describes the physical lines of a network in ohms.
//! [`build_admittance`] converts it into the per-unit [`AdmittanceModel`]
//! consumed by the small-signal machinery, and [`apply_contingency`]
//! derives feeder-loss variants (one of two parallel feeders lost, so the
//! branch admittance is halved).

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest admissible droop coefficient in percent. The droop-inverse
/// matrices contain 1/k, so k = 0 is a model degeneracy, not an operating
/// point.
pub const DROOP_FLOOR_PCT: f64 = 1e-4;

/// Relative tolerance for the uniform-R/X-ratio check across lines.
pub const RHO_REL_TOL: f64 = 1e-9;

/// Default power-filter corner frequency in rad/s.
pub const DEFAULT_OMEGA_C: f64 = 31.41;

#[derive(Debug, Error)]
pub enum NetModelError {
    #[error("line {from}-{to}: {reason}")]
    BadLine { from: usize, to: usize, reason: String },
    #[error("node index {node} out of range for {n_nodes} nodes")]
    NodeOutOfRange { node: usize, n_nodes: usize },
    #[error("network graph is not connected")]
    Disconnected,
    #[error("lines disagree on R/X ratio: {rho_a} vs {rho_b}")]
    NonUniformRho { rho_a: f64, rho_b: f64 },
    #[error("no line between nodes {from} and {to}")]
    NoSuchLine { from: usize, to: usize },
    #[error("droop coefficient {value_pct}% below floor {floor_pct}%")]
    DroopTooSmall { value_pct: f64, floor_pct: f64 },
    #[error("droop vectors have {got} entries, expected {expected}")]
    DroopLengthMismatch { got: usize, expected: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("config file: {0}")]
    Json(#[from] serde_json::Error),
}

/// One physical line, impedance in ohms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSpec {
    #[serde(rename = "from")]
    pub from_node: usize,
    #[serde(rename = "to")]
    pub to_node: usize,
    #[serde(rename = "r_ohm")]
    pub resistance: f64,
    #[serde(rename = "x_ohm")]
    pub reactance: f64,
}

impl LineSpec {
    pub fn new(from_node: usize, to_node: usize, resistance: f64, reactance: f64) -> Self {
        Self { from_node, to_node, resistance, reactance }
    }

    fn validate(&self) -> Result<(), NetModelError> {
        let bad = |reason: &str| NetModelError::BadLine {
            from: self.from_node,
            to: self.to_node,
            reason: reason.to_string(),
        };
        if self.from_node == self.to_node {
            return Err(bad("self-loop"));
        }
        if !(self.resistance >= 0.0) {
            return Err(bad("resistance must be >= 0"));
        }
        if !(self.reactance > 0.0) {
            return Err(bad("reactance must be > 0"));
        }
        Ok(())
    }
}

/// A full network description: lines in ohms plus the voltage/power bases
/// that define the per-unit system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub id: String,
    pub n_nodes: usize,
    pub v_base_ll: f64,
    pub s_base: f64,
    pub f0: f64,
    pub lines: Vec<LineSpec>,
}

impl NetworkConfig {
    /// The Table-I 4.16 kV, 50 Hz five-node ring with 1 MVA sources.
    pub fn ring5() -> Self {
        Self {
            id: "ring5".to_string(),
            n_nodes: 5,
            v_base_ll: 4160.0,
            s_base: 1.0e6,
            f0: 50.0,
            lines: vec![
                LineSpec::new(0, 1, 0.08, 0.08),
                LineSpec::new(1, 2, 0.15, 0.15),
                LineSpec::new(2, 3, 0.05, 0.05),
                LineSpec::new(3, 4, 0.15, 0.15),
                LineSpec::new(0, 4, 0.02, 0.02),
            ],
        }
    }

    /// Look up a built-in fixture by name, otherwise load a JSON config
    /// file from `name` as a path. Contingency suffixes are honored in
    /// both cases: `ring5:y12/2` is `ring5` with the 1-2 branch admittance
    /// halved.
    pub fn resolve(name: &str) -> Result<Self, NetModelError> {
        let (base, contingencies) = match name.split_once(':') {
            Some((b, rest)) => (b, rest.split(':').collect::<Vec<_>>()),
            None => (name, Vec::new()),
        };
        let mut config = if base == "ring5" {
            Self::ring5()
        } else {
            Self::from_json_file(std::path::Path::new(base))?
        };
        for label in contingencies {
            let (from, to) = parse_contingency_label(label)?;
            config = apply_contingency(&config, from, to)?;
        }
        Ok(config)
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self, NetModelError> {
        let text = std::fs::read_to_string(path)?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn z_base(&self) -> f64 {
        self.v_base_ll * self.v_base_ll / self.s_base
    }

    pub fn validate(&self) -> Result<(), NetModelError> {
        if self.n_nodes == 0 {
            return Err(NetModelError::InvalidParameter("n_nodes must be > 0".into()));
        }
        if !(self.v_base_ll > 0.0) || !(self.s_base > 0.0) || !(self.f0 > 0.0) {
            return Err(NetModelError::InvalidParameter(
                "v_base_ll, s_base and f0 must be > 0".into(),
            ));
        }
        for line in &self.lines {
            line.validate()?;
            for node in [line.from_node, line.to_node] {
                if node >= self.n_nodes {
                    return Err(NetModelError::NodeOutOfRange { node, n_nodes: self.n_nodes });
                }
            }
        }
        self.check_connected()?;
        self.uniform_rho()?;
        Ok(())
    }

    fn check_connected(&self) -> Result<(), NetModelError> {
        let mut seen = vec![false; self.n_nodes];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(node) = stack.pop() {
            for line in &self.lines {
                let other = if line.from_node == node {
                    line.to_node
                } else if line.to_node == node {
                    line.from_node
                } else {
                    continue;
                };
                if !seen[other] {
                    seen[other] = true;
                    stack.push(other);
                }
            }
        }
        if seen.iter().all(|&s| s) {
            Ok(())
        } else {
            Err(NetModelError::Disconnected)
        }
    }

    /// The single R/X ratio shared by every line.
    pub fn uniform_rho(&self) -> Result<f64, NetModelError> {
        let mut rho: Option<f64> = None;
        for line in &self.lines {
            let r = line.resistance / line.reactance;
            match rho {
                None => rho = Some(r),
                Some(r0) => {
                    if (r - r0).abs() > RHO_REL_TOL * r0.abs().max(1.0) {
                        return Err(NetModelError::NonUniformRho { rho_a: r0, rho_b: r });
                    }
                }
            }
        }
        rho.ok_or(NetModelError::Disconnected)
    }

    fn find_line(&self, from: usize, to: usize) -> Option<usize> {
        self.lines.iter().position(|l| {
            (l.from_node == from && l.to_node == to) || (l.from_node == to && l.to_node == from)
        })
    }
}

/// Per-unit admittance model in polar form, plus the susceptance matrix and
/// R/X ratio the eigenproblem consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceModel {
    /// |Y_bus| per unit, symmetric.
    pub y_mag: DMatrix<f64>,
    /// arg(Y_bus) in radians, symmetric.
    pub y_ang: DMatrix<f64>,
    /// Im(Y_bus) per unit; equals y_mag .* sin(y_ang) by construction.
    pub b_mat: DMatrix<f64>,
    /// Uniform R/X ratio of the lines.
    pub rho: f64,
    /// Impedance base in ohms.
    pub z_base: f64,
}

impl AdmittanceModel {
    pub fn n_nodes(&self) -> usize {
        self.y_mag.nrows()
    }

    /// Rebuild the complex bus-admittance matrix from the polar fields.
    pub fn to_complex(&self) -> DMatrix<Complex64> {
        let n = self.n_nodes();
        DMatrix::from_fn(n, n, |i, j| {
            Complex64::from_polar(self.y_mag[(i, j)], self.y_ang[(i, j)])
        })
    }

    /// Polar decomposition of a complex Y_bus. The susceptance matrix is
    /// defined as y_mag .* sin(y_ang) so the field invariant is exact.
    pub fn from_complex(y_bus: &DMatrix<Complex64>, rho: f64, z_base: f64) -> Self {
        let y_mag = y_bus.map(|y| y.norm());
        let y_ang = y_bus.map(|y| if y.norm() == 0.0 { 0.0 } else { y.arg() });
        let b_mat = DMatrix::from_fn(y_bus.nrows(), y_bus.ncols(), |i, j| {
            y_mag[(i, j)] * y_ang[(i, j)].sin()
        });
        Self { y_mag, y_ang, b_mat, rho, z_base }
    }

    /// Largest complex row-sum magnitude of the reconstructed Y_bus.
    /// Zero (to rounding) for a shunt-free network.
    pub fn max_row_sum(&self) -> f64 {
        let y = self.to_complex();
        (0..y.nrows())
            .map(|i| (0..y.ncols()).fold(Complex64::ZERO, |acc, j| acc + y[(i, j)]).norm())
            .fold(0.0, f64::max)
    }
}

/// Droop-controller parameters for all sources. Coefficients are in
/// percent; `p0`/`q0` are the nominal set-points of the droop laws and are
/// carried for completeness only (the small-signal problem does not use
/// them).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroopSetting {
    pub k_f_pct: Vec<f64>,
    pub k_v_pct: Vec<f64>,
    pub omega_c: f64,
    pub f0: f64,
    pub v0: f64,
    pub p0: f64,
    pub q0: f64,
}

impl DroopSetting {
    /// Uniform droops across `n` sources.
    pub fn uniform(n: usize, k_f_pct: f64, k_v_pct: f64, omega_c: f64, f0: f64, v0: f64) -> Self {
        Self {
            k_f_pct: vec![k_f_pct; n],
            k_v_pct: vec![k_v_pct; n],
            omega_c,
            f0,
            v0,
            p0: 0.0,
            q0: 0.0,
        }
    }

    /// The nominal ring5 setting: k_f = 0.15 %, k_v = 5.0 %, wc = 31.41 rad/s.
    pub fn ring5_nominal() -> Self {
        Self::uniform(5, 0.15, 5.0, 31.41, 50.0, 4160.0)
    }

    pub fn n_sources(&self) -> usize {
        self.k_f_pct.len()
    }

    pub fn validate(&self, n_nodes: usize) -> Result<(), NetModelError> {
        if self.k_f_pct.len() != n_nodes || self.k_v_pct.len() != n_nodes {
            return Err(NetModelError::DroopLengthMismatch {
                got: self.k_f_pct.len().min(self.k_v_pct.len()),
                expected: n_nodes,
            });
        }
        if !(self.omega_c > 0.0) {
            return Err(NetModelError::InvalidParameter("omega_c must be > 0".into()));
        }
        for &k in self.k_f_pct.iter().chain(self.k_v_pct.iter()) {
            if !(k >= DROOP_FLOOR_PCT) {
                return Err(NetModelError::DroopTooSmall {
                    value_pct: k,
                    floor_pct: DROOP_FLOOR_PCT,
                });
            }
        }
        Ok(())
    }
}

/// Per-unit bus-admittance model of a configuration.
///
/// With z_base = v_base_ll^2 / s_base, each line contributes the per-unit
/// admittance y = z_base / (R + jX): minus y on the two off-diagonal
/// entries, plus y on the two incident diagonals.
pub fn build_admittance(config: &NetworkConfig) -> Result<AdmittanceModel, NetModelError> {
    config.validate()?;
    let rho = config.uniform_rho()?;
    let z_base = config.z_base();
    let n = config.n_nodes;
    let mut y_bus = DMatrix::<Complex64>::zeros(n, n);
    for line in &config.lines {
        let z = Complex64::new(line.resistance, line.reactance);
        let y = Complex64::new(z_base, 0.0) / z;
        let (a, b) = (line.from_node, line.to_node);
        y_bus[(a, b)] -= y;
        y_bus[(b, a)] -= y;
        y_bus[(a, a)] += y;
        y_bus[(b, b)] += y;
    }
    Ok(AdmittanceModel::from_complex(&y_bus, rho, z_base))
}

/// Feeder-loss contingency: one of two parallel feeders on the named branch
/// drops out, so the branch admittance is halved (impedance doubled). The
/// returned config id carries a `:yIJ/2` suffix with 1-based node labels.
pub fn apply_contingency(
    config: &NetworkConfig,
    from: usize,
    to: usize,
) -> Result<NetworkConfig, NetModelError> {
    let idx = config
        .find_line(from, to)
        .ok_or(NetModelError::NoSuchLine { from, to })?;
    let mut out = config.clone();
    out.lines[idx].resistance *= 2.0;
    out.lines[idx].reactance *= 2.0;
    out.id = format!("{}:{}", config.id, contingency_label(from, to));
    Ok(out)
}

/// `yIJ/2` with 1-based, ascending node labels (`y12/2` for nodes 0 and 1).
pub fn contingency_label(from: usize, to: usize) -> String {
    let (a, b) = (from.min(to) + 1, from.max(to) + 1);
    if a > 9 || b > 9 {
        format!("y{a}_{b}/2")
    } else {
        format!("y{a}{b}/2")
    }
}

/// Parse `y12/2` (or `y10_12/2`) back into 0-based node indices.
pub fn parse_contingency_label(label: &str) -> Result<(usize, usize), NetModelError> {
    let invalid =
        || NetModelError::InvalidParameter(format!("bad contingency label `{label}`"));
    let body = label.strip_prefix('y').and_then(|s| s.strip_suffix("/2")).ok_or_else(invalid)?;
    let (a, b) = if let Some((a, b)) = body.split_once('_') {
        (a.parse::<usize>().map_err(|_| invalid())?, b.parse::<usize>().map_err(|_| invalid())?)
    } else if body.len() == 2 {
        let digits: Vec<usize> = body
            .chars()
            .map(|c| c.to_digit(10).map(|d| d as usize))
            .collect::<Option<_>>()
            .ok_or_else(invalid)?;
        (digits[0], digits[1])
    } else {
        return Err(invalid());
    };
    if a == 0 || b == 0 {
        return Err(invalid());
    }
    Ok((a - 1, b - 1))
}

/// The diagonal droop-inverse matrices L_p = diag(1/k_f) and
/// L_q = diag(1/k_v), with the percent coefficients first converted to per
/// unit (k_pu = k_pct / 100).
pub fn droop_inverse_matrices(
    droops: &DroopSetting,
) -> Result<(DMatrix<f64>, DMatrix<f64>), NetModelError> {
    droops.validate(droops.n_sources())?;
    let n = droops.n_sources();
    let mut l_p = DMatrix::<f64>::zeros(n, n);
    let mut l_q = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        l_p[(i, i)] = 100.0 / droops.k_f_pct[i];
        l_q[(i, i)] = 100.0 / droops.k_v_pct[i];
    }
    Ok((l_p, l_q))
}
