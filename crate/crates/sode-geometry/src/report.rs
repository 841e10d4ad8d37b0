//! System definition files and machine-readable reports.
//!
//! A [`SystemFile`] is the JSON document consumed by the CLI: kind, ordered
//! coordinate names (with a split index for constrained kinds), component
//! expressions, evaluation points, a seed and optional per-coordinate
//! sampling ranges. The schemas shipped in `docs/schemas/` describe both
//! this format and the [`GeometryReport`] emitted by `inspect`.
//!
//! Reports are deterministic: identical file and seed produce byte-identical
//! JSON. Timing is therefore only attached when explicitly requested.

use crate::constrained::{
    chetaev_connection, shape_constrained, ConstrainedGeometry, ConstrainedPoint,
    ConstrainedSystem,
};
use crate::error::{GeomError, Result};
use crate::expr::Expr;
use crate::nonholonomic::{NonholonomicProblem, ReducedDynamics};
use crate::sode::{mp_shape_and_torsion, EvolutionPoint, SodeGeometry, SodeSystem};
use crate::verify::{self, SuiteReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Sode,
    Constrained,
    Nonholonomic,
}

impl std::fmt::Display for Kind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Kind::Sode => write!(f, "sode"),
            Kind::Constrained => write!(f, "constrained"),
            Kind::Nonholonomic => write!(f, "nonholonomic"),
        }
    }
}

/// The system definition document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemFile {
    pub kind: Kind,
    pub coords: Vec<String>,
    /// first `split` coordinates are free; the rest are constrained
    /// (required for constrained and nonholonomic kinds)
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<usize>,
    /// `F^i` (sode), `F^a` (constrained), or candidate closed forms to be
    /// verified against the reduction (nonholonomic, optional)
    #[serde(default, rename = "F", skip_serializing_if = "Vec::is_empty")]
    pub f: Vec<String>,
    #[serde(default, rename = "Psi", skip_serializing_if = "Vec::is_empty")]
    pub psi: Vec<String>,
    #[serde(default, rename = "L", skip_serializing_if = "Option::is_none")]
    pub lagrangian: Option<String>,
    #[serde(default, rename = "Upsilon", skip_serializing_if = "Option::is_none")]
    pub upsilon: Option<Vec<Vec<Vec<String>>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub points: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// per-slot sampling ranges keyed by slot name (`t`, coordinate names,
    /// `u_<name>`); unlisted slots default to [-1, 1]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<BTreeMap<String, (f64, f64)>>,
}

/// A parsed and validated system, ready for evaluation.
pub enum LoadedSystem {
    Sode(Arc<SodeGeometry>),
    Constrained(Arc<ConstrainedGeometry>),
    Nonholonomic {
        dynamics: Arc<ReducedDynamics>,
        geometry: Arc<ConstrainedGeometry>,
    },
}

pub struct LoadedFile {
    pub file: SystemFile,
    pub system: LoadedSystem,
    pub name: String,
}

fn parse_exprs(srcs: &[String], what: &str) -> Result<Vec<Expr>> {
    srcs.iter()
        .enumerate()
        .map(|(i, s)| {
            crate::expr::parse(s)
                .map_err(|e| GeomError::Invalid(format!("{what}[{i}] `{s}`: {e}")))
        })
        .collect()
}

fn parse_upsilon(u: &[Vec<Vec<String>>]) -> Result<Vec<Vec<Vec<Expr>>>> {
    u.iter()
        .map(|block| {
            block
                .iter()
                .map(|row| parse_exprs(row, "Upsilon"))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

impl SystemFile {
    pub fn from_json(json: &str) -> Result<SystemFile> {
        serde_json::from_str(json)
            .map_err(|e| GeomError::Invalid(format!("system file parse error: {e}")))
    }

    /// Number of slots a point tuple must have for this kind.
    pub fn point_dim(&self) -> usize {
        let n = self.coords.len();
        match self.kind {
            Kind::Sode => 2 * n + 1,
            Kind::Constrained | Kind::Nonholonomic => {
                let m = self.split.unwrap_or(n);
                1 + n + m
            }
        }
    }

    /// Slot names in point-tuple order.
    pub fn slot_names(&self) -> Vec<String> {
        let n = self.coords.len();
        let m = match self.kind {
            Kind::Sode => n,
            _ => self.split.unwrap_or(n),
        };
        let mut names = vec!["t".to_string()];
        names.extend(self.coords.iter().cloned());
        names.extend(self.coords.iter().take(m).map(|c| format!("u_{c}")));
        names
    }

    pub fn slot_ranges(&self) -> Vec<(f64, f64)> {
        self.slot_names()
            .iter()
            .map(|name| {
                self.domain
                    .as_ref()
                    .and_then(|d| d.get(name))
                    .copied()
                    .unwrap_or((-1.0, 1.0))
            })
            .collect()
    }

    pub fn load(self, name: &str, perturb_gamma: f64) -> Result<LoadedFile> {
        let n = self.coords.len();
        let dim = self.point_dim();
        for (i, p) in self.points.iter().enumerate() {
            if p.len() != dim {
                return Err(GeomError::Dimension(format!(
                    "point {i} has {} entries, expected {dim}",
                    p.len()
                )));
            }
        }
        let system = match self.kind {
            Kind::Sode => {
                if self.f.len() != n {
                    return Err(GeomError::Dimension(format!(
                        "kind sode expects {n} entries in F, found {}",
                        self.f.len()
                    )));
                }
                let sys = SodeSystem::new(self.coords.clone(), parse_exprs(&self.f, "F")?)?;
                LoadedSystem::Sode(SodeGeometry::with_perturbation(sys, perturb_gamma))
            }
            Kind::Constrained => {
                let m = self
                    .split
                    .ok_or_else(|| GeomError::Invalid("kind constrained requires split".into()))?;
                if m == 0 || m > n {
                    return Err(GeomError::Invalid(format!("split {m} outside 1..={n}")));
                }
                let sys = ConstrainedSystem::new(
                    self.coords[..m].to_vec(),
                    self.coords[m..].to_vec(),
                    parse_exprs(&self.f, "F")?,
                    parse_exprs(&self.psi, "Psi")?,
                    self.upsilon.as_deref().map(parse_upsilon).transpose()?,
                )?;
                LoadedSystem::Constrained(ConstrainedGeometry::from_system_perturbed(
                    &sys,
                    perturb_gamma,
                ))
            }
            Kind::Nonholonomic => {
                let m = self
                    .split
                    .ok_or_else(|| GeomError::Invalid("kind nonholonomic requires split".into()))?;
                if m == 0 || m > n {
                    return Err(GeomError::Invalid(format!("split {m} outside 1..={n}")));
                }
                let lagrangian = self
                    .lagrangian
                    .as_ref()
                    .ok_or_else(|| GeomError::Invalid("kind nonholonomic requires L".into()))?;
                let l_expr = crate::expr::parse(lagrangian)
                    .map_err(|e| GeomError::Invalid(format!("L `{lagrangian}`: {e}")))?;
                let mut prob = NonholonomicProblem::new(
                    self.coords[..m].to_vec(),
                    self.coords[m..].to_vec(),
                    l_expr,
                    parse_exprs(&self.psi, "Psi")?,
                    None,
                )?;
                if let Some(u) = &self.upsilon {
                    prob = prob.with_upsilon(parse_upsilon(u)?);
                }
                if !self.f.is_empty() {
                    // candidate closed forms; validated against the
                    // reduction by cmd_reduce
                    parse_exprs(&self.f, "F")?;
                }
                let dynamics = ReducedDynamics::new(prob);
                let geometry = dynamics.as_constrained_geometry_perturbed(perturb_gamma);
                LoadedSystem::Nonholonomic { dynamics, geometry }
            }
        };
        Ok(LoadedFile {
            file: self,
            system,
            name: name.to_string(),
        })
    }
}

impl LoadedFile {
    pub fn seed(&self) -> u64 {
        self.file.seed.unwrap_or(0)
    }

    /// The file's points, or `count` sampled from the domain when none are
    /// given.
    pub fn points(&self, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        if !self.file.points.is_empty() {
            return Ok(self.file.points.clone());
        }
        self.sample_points(count, seed)
    }

    /// Sample in-domain points: candidates where any system expression fails
    /// to evaluate (to jet order 3) are rejected and redrawn, up to 100
    /// attempts per point.
    pub fn sample_points(&self, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ranges = self.file.slot_ranges();
        let valid = |p: &[f64]| -> bool {
            match &self.system {
                LoadedSystem::Sode(geo) => geo.tensors_at(p, 3).is_ok(),
                LoadedSystem::Constrained(geo) => geo.tensors_at(p, 3).is_ok(),
                LoadedSystem::Nonholonomic { dynamics, geometry } => {
                    let pt = ConstrainedPoint::from_slots(geometry.m(), geometry.k(), p);
                    dynamics.reduce(&pt).is_ok() && geometry.tensors_at(p, 3).is_ok()
                }
            }
        };
        verify::sample_points(&ranges, valid, count, &mut rng)
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenpairJson {
    pub mu: f64,
    pub vector_adapted: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootJson {
    pub mu: f64,
    pub multiplicity: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub eigenvectors_adapted: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ShapeJson {
    /// shape map of the system field in the adapted frame
    pub matrix: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub real_eigenpairs: Vec<EigenpairJson>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub no_real_mu: Vec<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_poly: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub real_roots: Vec<RootJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoupled: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ConnectionJson {
    pub gamma: Vec<Vec<f64>>,
    pub dgamma_du: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dpsi_dxalpha: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dpsiab_dxalpha: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upsilon: Option<Vec<Vec<Vec<f64>>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TorsionJson {
    pub phi: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_hat: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_check: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub df_dxalpha: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dpsiab_du: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dgamma_dxalpha: Option<Vec<Vec<Vec<f64>>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChetaevJson {
    pub sigma: Vec<f64>,
    pub sigma_b: Vec<Vec<f64>>,
    pub affine: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedJson {
    pub f: Vec<f64>,
    pub c: Vec<Vec<f64>>,
    pub g: Vec<f64>,
    pub lambda: Vec<f64>,
    pub condition: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TensorsJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi_ab: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_hat: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_check: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upsilon: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub connection: Option<ConnectionJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub torsion: Option<TorsionJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<ShapeJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chetaev: Option<ChetaevJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduced: Option<ReducedJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointReport {
    pub point: Vec<f64>,
    pub tensors: TensorsJson,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub residuals: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub system: String,
    pub kind: String,
    pub order: usize,
    pub seed: u64,
    pub points: Vec<PointReport>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub residuals: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing_ms: Option<f64>,
}

impl GeometryReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    pub fn validate_finite(&self) -> Result<()> {
        for (name, v) in self
            .residuals
            .iter()
            .chain(self.points.iter().flat_map(|p| p.residuals.iter()))
        {
            if !v.is_finite() {
                return Err(GeomError::Invalid(format!(
                    "residual `{name}` is not finite"
                )));
            }
        }
        Ok(())
    }
}

/// Which tensor groups `inspect` evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorSelection {
    pub gamma: bool,
    pub phi: bool,
    pub k: bool,
    pub curvature: bool,
    pub torsion: bool,
    pub connection: bool,
    pub shape: bool,
    pub chetaev: bool,
}

impl TensorSelection {
    pub fn all() -> TensorSelection {
        TensorSelection {
            gamma: true,
            phi: true,
            k: true,
            curvature: true,
            torsion: true,
            connection: true,
            shape: true,
            chetaev: true,
        }
    }

    pub fn parse(list: &str) -> Result<TensorSelection> {
        let mut sel = TensorSelection {
            gamma: false,
            phi: false,
            k: false,
            curvature: false,
            torsion: false,
            connection: false,
            shape: false,
            chetaev: false,
        };
        for item in list.split(',') {
            match item.trim().to_lowercase().as_str() {
                "gamma" => sel.gamma = true,
                "phi" => sel.phi = true,
                "k" => sel.k = true,
                "curvature" => sel.curvature = true,
                "torsion" => sel.torsion = true,
                "connection" => sel.connection = true,
                "shape" => sel.shape = true,
                "chetaev" => sel.chetaev = true,
                "" => {}
                other => {
                    return Err(GeomError::Invalid(format!(
                        "unknown tensor selector `{other}`"
                    )))
                }
            }
        }
        Ok(sel)
    }

    fn needs_order2(&self) -> bool {
        self.phi || self.k || self.curvature || self.torsion || self.connection || self.shape
    }
}

// ---------------------------------------------------------------------------
// Operations behind the CLI commands
// ---------------------------------------------------------------------------

fn constrained_point_tensors(
    geo: &Arc<ConstrainedGeometry>,
    point: &[f64],
    order: usize,
    sel: &TensorSelection,
) -> Result<TensorsJson> {
    let cpt = ConstrainedPoint::from_slots(geo.m(), geo.k(), point);
    let mut out = TensorsJson::default();
    let t = geo.tensors_at(point, order.max(2))?;
    if sel.gamma {
        out.gamma = Some(t.gamma.clone());
        out.psi_ab = Some(t.psi_ab.clone());
    }
    if sel.phi {
        out.phi = Some(t.phi.clone());
    }
    if sel.k {
        out.k = Some(t.kk.clone());
    }
    if sel.curvature {
        out.r_hat = Some(t.r_hat.clone());
        out.r_check = Some(t.r_check.clone());
        out.upsilon = Some(t.upsilon.clone());
    }
    if sel.connection {
        out.connection = Some(ConnectionJson {
            gamma: t.gamma.clone(),
            dgamma_du: t.dgamma_du.clone(),
            dpsi_dxalpha: Some(t.dpsi_dxalpha.clone()),
            dpsiab_dxalpha: Some(t.dpsiab_dxalpha.clone()),
            upsilon: Some(t.upsilon.clone()),
        });
    }
    if sel.torsion {
        out.torsion = Some(TorsionJson {
            phi: t.phi.clone(),
            k: Some(t.kk.clone()),
            r: None,
            r_hat: Some(t.r_hat.clone()),
            r_check: Some(t.r_check.clone()),
            df_dxalpha: Some(t.df_dxalpha.clone()),
            dpsiab_du: Some(t.dpsiab_du.clone()),
            dgamma_dxalpha: Some(t.dgamma_dxalpha.clone()),
        });
    }
    if sel.shape {
        let shape = shape_constrained(geo, &cpt)?;
        out.shape = Some(ShapeJson {
            matrix: shape.a_gamma_adapted,
            real_eigenpairs: Vec::new(),
            no_real_mu: Vec::new(),
            lambda_poly: Some(shape.lambda_poly),
            real_roots: shape
                .real_roots
                .iter()
                .map(|r| RootJson {
                    mu: r.mu,
                    multiplicity: r.multiplicity,
                    eigenvectors_adapted: r.eigenvectors_adapted.clone(),
                })
                .collect(),
            decoupled: Some(shape.constraint_action.decoupled),
        });
    }
    if sel.chetaev {
        let ch = chetaev_connection(geo, &cpt)?;
        out.chetaev = Some(ChetaevJson {
            sigma: ch.sigma,
            sigma_b: ch.sigma_b,
            affine: ch.affine,
        });
    }
    Ok(out)
}

/// Evaluate the selected tensors at the file's points.
pub fn cmd_inspect(
    loaded: &LoadedFile,
    sel: &TensorSelection,
    order: usize,
    npoints: usize,
    seed: u64,
) -> Result<GeometryReport> {
    if order < 2 && sel.needs_order2() {
        return Err(GeomError::OrderTooLow {
            order,
            needed: "the selected tensors",
            min: 2,
        });
    }
    let points = loaded.points(npoints, seed)?;
    let reports: Vec<PointReport> = points
        .iter()
        .map(|p| -> Result<PointReport> {
            let tensors = match &loaded.system {
                LoadedSystem::Sode(geo) => {
                    let mut out = TensorsJson::default();
                    let t = geo.tensors_at(p, order.max(2))?;
                    if sel.gamma {
                        out.gamma = Some(t.gamma.clone());
                    }
                    if sel.phi {
                        out.phi = Some(t.phi.clone());
                    }
                    if sel.curvature {
                        out.r = Some(t.r.clone());
                    }
                    if sel.connection {
                        let comps =
                            crate::sode::mp_components(geo, &EvolutionPoint::from_slots(p))?;
                        out.connection = Some(ConnectionJson {
                            gamma: comps.gamma,
                            dgamma_du: comps.dgamma_du,
                            dpsi_dxalpha: None,
                            dpsiab_dxalpha: None,
                            upsilon: None,
                        });
                    }
                    if sel.torsion {
                        out.torsion = Some(TorsionJson {
                            phi: t.phi.clone(),
                            r: Some(t.r.clone()),
                            ..TorsionJson::default()
                        });
                    }
                    if sel.shape {
                        let shape = mp_shape_and_torsion(geo, &EvolutionPoint::from_slots(p))?;
                        out.shape = Some(ShapeJson {
                            matrix: shape.a_gamma_adapted,
                            real_eigenpairs: shape
                                .real_eigenpairs
                                .iter()
                                .map(|e| EigenpairJson {
                                    mu: e.mu,
                                    vector_adapted: e.vector_adapted.clone(),
                                })
                                .collect(),
                            no_real_mu: shape.no_real_mu.clone(),
                            lambda_poly: None,
                            real_roots: Vec::new(),
                            decoupled: None,
                        });
                    }
                    out
                }
                LoadedSystem::Constrained(geo) => constrained_point_tensors(geo, p, order, sel)?,
                LoadedSystem::Nonholonomic { dynamics, geometry } => {
                    let mut out = constrained_point_tensors(geometry, p, order, sel)?;
                    let cpt = ConstrainedPoint::from_slots(geometry.m(), geometry.k(), p);
                    let red = dynamics.reduce(&cpt)?;
                    out.reduced = Some(ReducedJson {
                        f: red.f,
                        c: red.c,
                        g: red.g,
                        lambda: red.lambda,
                        condition: red.condition,
                    });
                    out
                }
            };
            Ok(PointReport {
                point: p.clone(),
                tensors,
                residuals: BTreeMap::new(),
            })
        })
        .collect::<Result<_>>()?;
    let report = GeometryReport {
        system: loaded.name.clone(),
        kind: loaded.file.kind.to_string(),
        order,
        seed,
        points: reports,
        residuals: BTreeMap::new(),
        timing_ms: None,
    };
    report.validate_finite()?;
    Ok(report)
}

/// Run the invariant suites at sampled points.
pub fn cmd_verify(loaded: &LoadedFile, npoints: usize, seed: u64) -> Result<SuiteReport> {
    let mut report = verify::glue_toy_suite(seed ^ 0x5eed, 4, npoints.min(20))?;
    let points = loaded.sample_points(npoints, seed)?;
    match &loaded.system {
        LoadedSystem::Sode(geo) => {
            let pts: Vec<EvolutionPoint> =
                points.iter().map(|p| EvolutionPoint::from_slots(p)).collect();
            report.merge(verify::mp_suite(geo, &pts, seed)?);
        }
        LoadedSystem::Constrained(geo) => {
            let pts: Vec<ConstrainedPoint> = points
                .iter()
                .map(|p| ConstrainedPoint::from_slots(geo.m(), geo.k(), p))
                .collect();
            report.merge(verify::constrained_suite(geo, &pts, seed)?);
        }
        LoadedSystem::Nonholonomic { dynamics, geometry } => {
            let pts: Vec<ConstrainedPoint> = points
                .iter()
                .map(|p| ConstrainedPoint::from_slots(geometry.m(), geometry.k(), p))
                .collect();
            report.merge(verify::nonholonomic_suite(dynamics, &pts)?);
            report.merge(verify::constrained_suite(geometry, &pts, seed)?);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducePointJson {
    pub point: Vec<f64>,
    pub f: Vec<f64>,
    pub c: Vec<Vec<f64>>,
    pub g: Vec<f64>,
    pub lambda: Vec<f64>,
    pub condition: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReduceReport {
    pub system: String,
    pub seed: u64,
    pub points: Vec<ReducePointJson>,
    /// equivalent constrained-kind system, present when candidate closed
    /// forms were supplied and verified against the reduction
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emitted: Option<SystemFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed_form_residual: Option<f64>,
}

impl PartialEq for SystemFile {
    fn eq(&self, other: &Self) -> bool {
        serde_json::to_string(self).ok() == serde_json::to_string(other).ok()
    }
}

/// Run the reduction at the file's points; verify and emit candidate closed
/// forms when present.
pub fn cmd_reduce(loaded: &LoadedFile, npoints: usize, seed: u64) -> Result<ReduceReport> {
    let LoadedSystem::Nonholonomic { dynamics, geometry } = &loaded.system else {
        return Err(GeomError::Invalid(
            "reduce requires a nonholonomic system file".into(),
        ));
    };
    let points = loaded.points(npoints, seed)?;
    let mut out = Vec::with_capacity(points.len());
    for p in &points {
        let cpt = ConstrainedPoint::from_slots(geometry.m(), geometry.k(), p);
        let red = dynamics.reduce(&cpt)?;
        out.push(ReducePointJson {
            point: p.clone(),
            f: red.f,
            c: red.c,
            g: red.g,
            lambda: red.lambda,
            condition: red.condition,
        });
    }
    let mut emitted = None;
    let mut closed_form_residual = None;
    if !loaded.file.f.is_empty() {
        let exprs = parse_exprs(&loaded.file.f, "F")?;
        let names = loaded.file.slot_names();
        let mut worst = 0.0f64;
        for (p, red) in points.iter().zip(&out) {
            let seeds = (0..p.len())
                .map(|v| crate::jet::Jet::coordinate(v, p[v], p.len(), 1).map_err(GeomError::from))
                .collect::<Result<Vec<_>>>()?;
            let env = crate::expr::JetEnv::new(names.clone(), seeds);
            for (i, e) in exprs.iter().enumerate() {
                let claimed = e.eval(&env).map_err(GeomError::from)?.value();
                let scale = 1.0 + claimed.abs().max(red.f[i].abs());
                worst = worst.max((claimed - red.f[i]).abs() / scale);
            }
        }
        closed_form_residual = Some(worst);
        if worst <= 1e-8 {
            emitted = Some(SystemFile {
                kind: Kind::Constrained,
                coords: loaded.file.coords.clone(),
                split: loaded.file.split,
                f: loaded.file.f.clone(),
                psi: loaded.file.psi.clone(),
                lagrangian: None,
                upsilon: loaded.file.upsilon.clone(),
                points: loaded.file.points.clone(),
                seed: loaded.file.seed,
                domain: loaded.file.domain.clone(),
            });
        }
    }
    Ok(ReduceReport {
        system: loaded.name.clone(),
        seed,
        points: out,
        emitted,
        closed_form_residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootsPointJson {
    pub point: Vec<f64>,
    pub lambda_poly: Vec<f64>,
    pub real_roots: Vec<RootJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootsReport {
    pub system: String,
    pub seed: u64,
    pub points: Vec<RootsPointJson>,
}

/// Eigencondition polynomial coefficients and real roots per point.
pub fn cmd_roots(loaded: &LoadedFile, npoints: usize, seed: u64) -> Result<RootsReport> {
    let geo = match &loaded.system {
        LoadedSystem::Constrained(geo) => geo.clone(),
        LoadedSystem::Nonholonomic { geometry, .. } => geometry.clone(),
        LoadedSystem::Sode(_) => {
            return Err(GeomError::Invalid(
                "roots requires a constrained or nonholonomic system file".into(),
            ))
        }
    };
    let points = loaded.points(npoints, seed)?;
    let mut out = Vec::with_capacity(points.len());
    for p in &points {
        let cpt = ConstrainedPoint::from_slots(geo.m(), geo.k(), p);
        let shape = shape_constrained(&geo, &cpt)?;
        out.push(RootsPointJson {
            point: p.clone(),
            lambda_poly: shape.lambda_poly,
            real_roots: shape
                .real_roots
                .iter()
                .map(|r| RootJson {
                    mu: r.mu,
                    multiplicity: r.multiplicity,
                    eigenvectors_adapted: r.eigenvectors_adapted.clone(),
                })
                .collect(),
        });
    }
    Ok(RootsReport {
        system: loaded.name.clone(),
        seed,
        points: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const KNIFE_EDGE_JSON: &str = r#"{
        "kind": "nonholonomic",
        "coords": ["phi", "x", "y"],
        "split": 2,
        "L": "1/2*(u_phi^2 + u_x^2 + u_y^2)",
        "Psi": ["tan(phi)*u_x"],
        "F": ["0", "-u_phi*u_x*tan(phi)"],
        "points": [[0.0, 0.4, 0.8, -0.2, 0.7, 1.1]],
        "seed": 9,
        "domain": {"phi": [-1.1, 1.1]}
    }"#;

    #[test]
    fn load_and_inspect_knife_edge() {
        let file = SystemFile::from_json(KNIFE_EDGE_JSON).unwrap();
        let loaded = file.load("knife_edge", 0.0).unwrap();
        let report = cmd_inspect(&loaded, &TensorSelection::all(), 2, 5, loaded.seed()).unwrap();
        assert_eq!(report.points.len(), 1);
        let t = &report.points[0].tensors;
        let phi = t.phi.as_ref().unwrap();
        let (phi0, u1): (f64, f64) = (0.4, 0.7);
        let expect = u1 * u1 * (1.0 - 3.0 / phi0.cos().powi(2)) / 4.0;
        assert!((phi[1][1] - expect).abs() < 1e-9, "{} vs {expect}", phi[1][1]);
        assert!(t.reduced.is_some());
        // round-trip through serialization
        let json = report.to_json();
        let back: GeometryReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, back);
        // byte-identical on re-run
        let report2 = cmd_inspect(&loaded, &TensorSelection::all(), 2, 5, loaded.seed()).unwrap();
        assert_eq!(json, report2.to_json());
    }

    #[test]
    fn reduce_emits_verified_closed_forms() {
        let file = SystemFile::from_json(KNIFE_EDGE_JSON).unwrap();
        let loaded = file.load("knife_edge", 0.0).unwrap();
        let rep = cmd_reduce(&loaded, 5, 9).unwrap();
        assert!(rep.closed_form_residual.unwrap() < 1e-10);
        let emitted = rep.emitted.clone().unwrap();
        assert_eq!(emitted.kind, Kind::Constrained);
        assert!(emitted.load("emitted", 0.0).is_ok());
        let expect = -(0.7 * 1.1 * 0.4f64.tan());
        assert!((rep.points[0].f[1] - expect).abs() < 1e-10);
    }

    #[test]
    fn roots_on_decoupled_fixtures() {
        // F = x1 with K = 0: μ^3 − μ factorises with roots {−1, 0, 1}
        let json = r#"{
            "kind": "constrained",
            "coords": ["x1", "y1"],
            "split": 1,
            "F": ["x1"],
            "Psi": ["0.3*y1"],
            "points": [[0.0, 0.5, 0.2, 0.1]]
        }"#;
        let loaded = SystemFile::from_json(json).unwrap().load("fac", 0.0).unwrap();
        let rep = cmd_roots(&loaded, 1, 0).unwrap();
        let mut mus: Vec<f64> = rep.points[0].real_roots.iter().map(|r| r.mu).collect();
        mus.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(mus.len(), 3, "{mus:?}");
        assert!((mus[0] + 1.0).abs() < 1e-8);
        assert!(mus[1].abs() < 1e-8);
        assert!((mus[2] - 1.0).abs() < 1e-8);
        // F = −x1: nonzero roots are imaginary, only μ = 0 is real
        let json = r#"{
            "kind": "constrained",
            "coords": ["x1", "y1"],
            "split": 1,
            "F": ["-x1"],
            "Psi": ["0.3*y1"],
            "points": [[0.0, 0.5, 0.2, 0.1]]
        }"#;
        let loaded = SystemFile::from_json(json).unwrap().load("cx", 0.0).unwrap();
        let rep = cmd_roots(&loaded, 1, 0).unwrap();
        let nonzero: Vec<f64> = rep.points[0]
            .real_roots
            .iter()
            .map(|r| r.mu)
            .filter(|m| m.abs() > 1e-8)
            .collect();
        assert!(nonzero.is_empty(), "{nonzero:?}");
    }

    #[test]
    fn verify_command_passes_on_sode_fixture() {
        let json = r#"{
            "kind": "sode",
            "coords": ["q"],
            "F": ["-0.6*u_q - q"],
            "seed": 3
        }"#;
        let loaded = SystemFile::from_json(json).unwrap().load("osc", 0.0).unwrap();
        let report = cmd_verify(&loaded, 3, 3).unwrap();
        assert!(report.passes(1e-8), "{:?}", report.failing(1e-8));
    }

    #[test]
    fn domain_error_names_the_function() {
        let json = r#"{
            "kind": "constrained",
            "coords": ["phi", "x", "y"],
            "split": 2,
            "F": ["0", "-u_phi*u_x*tan(phi)"],
            "Psi": ["tan(phi)*u_x"],
            "points": [[0.0, 1.5707963267948966, 0.8, -0.2, 0.7, 1.1]]
        }"#;
        let loaded = SystemFile::from_json(json).unwrap().load("pole", 0.0).unwrap();
        let err = cmd_inspect(&loaded, &TensorSelection::all(), 2, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("tan"), "error should name the function: {msg}");
    }
}
