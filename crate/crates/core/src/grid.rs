//! Reduced swing-equation network model and its scaled-Laplacian eigenspace.
//!
//! A [`GridModel`] holds `M ω̇ + D ω + L θ = p` in per-unit form with angles in
//! radians. Models come from a [`CaseFile`] (see `docs/case-format.md`) or are
//! assembled directly with [`GridModel::new`].

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inertia given to non-generator buses when augmenting.
pub const VIRTUAL_INERTIA: f64 = 1e-4;
/// Damping given to non-generator buses when augmenting.
pub const VIRTUAL_DAMPING: f64 = 0.1;
/// Eigenvalues of the scaled Laplacian smaller than this are snapped to zero.
pub const ZERO_EIGENVALUE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Generator,
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: i64,
    pub kind: BusKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: i64,
    pub to: i64,
    /// Series reactance in pu.
    pub reactance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: i64,
    /// Inertia constant H in seconds.
    pub h: f64,
    /// Damping in pu.
    pub d: f64,
}

/// Parsed and validated network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFile {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    pub base_freq_hz: f64,
    pub base_mva: f64,
}

/// Turbine time constant and droop gain shared by all generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurbineSpec {
    pub tau: f64,
    pub droop_r: f64,
}

impl TurbineSpec {
    pub fn new(tau: f64, droop_r: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Invalid(format!("turbine tau must be positive, got {tau}")));
        }
        if !(droop_r >= 0.0) || !droop_r.is_finite() {
            return Err(Error::Invalid(format!("droop r must be non-negative, got {droop_r}")));
        }
        Ok(Self { tau, droop_r })
    }
}

/// Frequency band in Hz used to select eigenstates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub low_hz: f64,
    pub high_hz: f64,
}

impl Band {
    pub fn new(low_hz: f64, high_hz: f64) -> Self {
        Self { low_hz, high_hz }
    }

    pub fn contains(&self, f: f64) -> bool {
        f >= self.low_hz && f <= self.high_hz
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridModel {
    pub n_buses: usize,
    pub inertia: DVector<f64>,
    pub damping: DVector<f64>,
    pub laplacian: DMatrix<f64>,
    pub base_freq_hz: f64,
    pub gamma: f64,
    /// External bus identifiers, one per row of the Laplacian.
    pub bus_ids: Vec<i64>,
}

impl GridModel {
    /// Builds a model with `γ = 1ᵀD1 / 1ᵀM1` and buses numbered `0..n`.
    pub fn new(
        inertia: DVector<f64>,
        damping: DVector<f64>,
        laplacian: DMatrix<f64>,
        base_freq_hz: f64,
    ) -> Result<Self> {
        let n = inertia.len();
        let ids = (0..n as i64).collect();
        Self::with_ids(inertia, damping, laplacian, base_freq_hz, ids)
    }

    pub fn with_ids(
        inertia: DVector<f64>,
        damping: DVector<f64>,
        laplacian: DMatrix<f64>,
        base_freq_hz: f64,
        bus_ids: Vec<i64>,
    ) -> Result<Self> {
        let n = inertia.len();
        if n == 0 {
            return Err(Error::Invalid("model has no buses".into()));
        }
        if damping.len() != n || laplacian.nrows() != n || laplacian.ncols() != n || bus_ids.len() != n {
            return Err(Error::Dimension(format!(
                "inertia {n}, damping {}, laplacian {}x{}, ids {}",
                damping.len(),
                laplacian.nrows(),
                laplacian.ncols(),
                bus_ids.len()
            )));
        }
        if let Some(k) = inertia.iter().position(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(Error::Invalid(format!(
                "non-positive inertia {} at bus {}",
                inertia[k], bus_ids[k]
            )));
        }
        if let Some(k) = damping.iter().position(|&d| !(d >= 0.0) || !d.is_finite()) {
            return Err(Error::Invalid(format!("negative damping {} at bus {}", damping[k], bus_ids[k])));
        }
        let scale = laplacian.amax().max(1.0);
        for i in 0..n {
            for j in 0..i {
                if (laplacian[(i, j)] - laplacian[(j, i)]).abs() > 1e-10 * scale {
                    return Err(Error::Invalid(format!("laplacian not symmetric at ({i},{j})")));
                }
            }
        }
        if !(base_freq_hz > 0.0) {
            return Err(Error::Invalid(format!("base frequency must be positive, got {base_freq_hz}")));
        }
        let gamma = damping.sum() / inertia.sum();
        Ok(Self {
            n_buses: n,
            inertia,
            damping,
            laplacian,
            base_freq_hz,
            gamma,
            bus_ids,
        })
    }

    /// Nominal angular frequency ω₀ = 2π f₀.
    pub fn omega0(&self) -> f64 {
        2.0 * PI * self.base_freq_hz
    }

    /// Position of an external bus id in the model.
    pub fn index_of(&self, bus_id: i64) -> Result<usize> {
        self.bus_ids
            .iter()
            .position(|&b| b == bus_id)
            .ok_or(Error::UnknownBus(bus_id))
    }

    /// `M^{-1/2} L M^{-1/2}`.
    pub fn scaled_laplacian(&self) -> DMatrix<f64> {
        let s = self.inertia.map(|m| 1.0 / m.sqrt());
        let mut lm = self.laplacian.clone();
        for i in 0..self.n_buses {
            for j in 0..self.n_buses {
                lm[(i, j)] *= s[i] * s[j];
            }
        }
        lm
    }
}

/// Reads and validates a case file.
pub fn load_case(path: impl AsRef<Path>) -> Result<CaseFile> {
    let text = std::fs::read_to_string(path)?;
    parse_case(&text)
}

#[derive(PartialEq)]
enum Section {
    Top,
    Buses,
    Branches,
    Generators,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_num<T: std::str::FromStr>(field: &str, line: usize, what: &str) -> Result<T> {
    field
        .trim()
        .parse::<T>()
        .map_err(|_| parse_err(line, format!("invalid {what} {:?}", field.trim())))
}

/// Parses case-file text; see `docs/case-format.md` for the grammar.
pub fn parse_case(text: &str) -> Result<CaseFile> {
    let mut section = Section::Top;
    let mut buses = Vec::new();
    let mut branches = Vec::new();
    let mut generators = Vec::new();
    let mut base_freq_hz = None;
    let mut base_mva = None;
    let mut gen_lines = Vec::new();
    let mut branch_lines = Vec::new();

    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            section = match line {
                "[buses]" => Section::Buses,
                "[branches]" => Section::Branches,
                "[generators]" => Section::Generators,
                _ => return Err(parse_err(line_no, format!("unknown section {line}"))),
            };
            continue;
        }
        if let Some((key, value)) = line.split_once('=') {
            if section != Section::Top {
                return Err(parse_err(line_no, "scalar keys must precede all sections"));
            }
            let v: f64 = parse_num(value, line_no, key.trim())?;
            match key.trim() {
                "base_freq_hz" => base_freq_hz = Some(v),
                "base_mva" => base_mva = Some(v),
                other => return Err(parse_err(line_no, format!("unknown key {other}"))),
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match section {
            Section::Top => return Err(parse_err(line_no, "data row outside a section")),
            Section::Buses => {
                if fields.len() != 2 {
                    return Err(parse_err(line_no, "bus row needs: id, type"));
                }
                let id = parse_num(fields[0], line_no, "bus id")?;
                let kind = match fields[1].trim() {
                    "generator" | "gen" => BusKind::Generator,
                    "load" => BusKind::Load,
                    other => return Err(parse_err(line_no, format!("unknown bus type {other:?}"))),
                };
                buses.push((Bus { id, kind }, line_no));
            }
            Section::Branches => {
                if fields.len() != 3 {
                    return Err(parse_err(line_no, "branch row needs: from, to, reactance"));
                }
                let x: f64 = parse_num(fields[2], line_no, "reactance")?;
                if !(x > 0.0) || !x.is_finite() {
                    return Err(parse_err(line_no, format!("reactance must be positive, got {x}")));
                }
                let from = parse_num(fields[0], line_no, "bus id")?;
                let to = parse_num(fields[1], line_no, "bus id")?;
                if from == to {
                    return Err(parse_err(line_no, "branch connects a bus to itself"));
                }
                branches.push(Branch { from, to, reactance: x });
                branch_lines.push(line_no);
            }
            Section::Generators => {
                if fields.len() != 3 {
                    return Err(parse_err(line_no, "generator row needs: bus, H, D"));
                }
                let g = Generator {
                    bus: parse_num(fields[0], line_no, "bus id")?,
                    h: parse_num(fields[1], line_no, "H")?,
                    d: parse_num(fields[2], line_no, "D")?,
                };
                if !(g.h > 0.0) || !(g.d >= 0.0) {
                    return Err(parse_err(line_no, "generator needs H > 0 and D >= 0"));
                }
                generators.push(g);
                gen_lines.push(line_no);
            }
        }
    }

    let base_freq_hz = base_freq_hz.ok_or_else(|| parse_err(0, "missing base_freq_hz"))?;
    if !(base_freq_hz > 0.0) {
        return Err(parse_err(0, "base_freq_hz must be positive"));
    }
    let base_mva = base_mva.unwrap_or(100.0);

    let mut seen = HashSet::new();
    for (b, _) in &buses {
        if !seen.insert(b.id) {
            return Err(Error::DuplicateBus(b.id));
        }
    }
    let kinds: HashMap<i64, BusKind> = buses.iter().map(|(b, _)| (b.id, b.kind)).collect();
    for br in &branches {
        for id in [br.from, br.to] {
            if !kinds.contains_key(&id) {
                return Err(Error::UnknownBus(id));
            }
        }
    }
    let mut gen_seen = HashSet::new();
    for (g, &line) in generators.iter().zip(&gen_lines) {
        match kinds.get(&g.bus) {
            None => return Err(Error::UnknownBus(g.bus)),
            Some(BusKind::Load) => {
                return Err(parse_err(line, format!("generator at load bus {}", g.bus)))
            }
            Some(BusKind::Generator) => {}
        }
        if !gen_seen.insert(g.bus) {
            return Err(parse_err(line, format!("second generator at bus {}", g.bus)));
        }
    }
    for (b, line) in &buses {
        if b.kind == BusKind::Generator && !gen_seen.contains(&b.id) {
            return Err(parse_err(*line, format!("generator bus {} has no [generators] row", b.id)));
        }
    }

    let case = CaseFile {
        buses: buses.into_iter().map(|(b, _)| b).collect(),
        branches,
        generators,
        base_freq_hz,
        base_mva,
    };
    check_connected(&case)?;
    Ok(case)
}

fn check_connected(case: &CaseFile) -> Result<()> {
    let n = case.buses.len();
    if n == 0 {
        return Err(Error::Disconnected("case has no buses".into()));
    }
    let index: HashMap<i64, usize> = case.buses.iter().enumerate().map(|(k, b)| (b.id, k)).collect();
    let mut adj = vec![Vec::new(); n];
    for br in &case.branches {
        let (a, b) = (index[&br.from], index[&br.to]);
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    match seen.iter().position(|s| !s) {
        None => Ok(()),
        Some(k) => Err(Error::Disconnected(format!(
            "bus {} unreachable from bus {}",
            case.buses[k].id, case.buses[0].id
        ))),
    }
}

/// Susceptance-weighted Laplacian `Σ (1/x)(e_a − e_b)(e_a − e_b)ᵀ` in case bus order.
pub fn case_laplacian(case: &CaseFile) -> DMatrix<f64> {
    let n = case.buses.len();
    let index: HashMap<i64, usize> = case.buses.iter().enumerate().map(|(k, b)| (b.id, k)).collect();
    let mut l = DMatrix::zeros(n, n);
    for br in &case.branches {
        let (a, b) = (index[&br.from], index[&br.to]);
        let w = 1.0 / br.reactance;
        l[(a, a)] += w;
        l[(b, b)] += w;
        l[(a, b)] -= w;
        l[(b, a)] -= w;
    }
    l
}

/// Builds the full-network model; `augment` gives load buses virtual inertia and damping.
pub fn build_model(case: &CaseFile, augment: bool) -> Result<GridModel> {
    let n = case.buses.len();
    let w0 = 2.0 * PI * case.base_freq_hz;
    let gens: HashMap<i64, &Generator> = case.generators.iter().map(|g| (g.bus, g)).collect();
    let mut inertia = DVector::zeros(n);
    let mut damping = DVector::zeros(n);
    for (k, bus) in case.buses.iter().enumerate() {
        match gens.get(&bus.id) {
            Some(g) => {
                inertia[k] = 2.0 * g.h / w0;
                damping[k] = g.d;
            }
            None if augment => {
                inertia[k] = VIRTUAL_INERTIA;
                damping[k] = VIRTUAL_DAMPING;
            }
            None => {}
        }
    }
    let ids = case.buses.iter().map(|b| b.id).collect();
    GridModel::with_ids(inertia, damping, case_laplacian(case), case.base_freq_hz, ids)
}

/// Eliminates all buses outside `keep` by the Schur complement `L_kk − L_ke L_ee⁻¹ L_ek`.
///
/// Inertia and damping are restricted to the kept buses and γ is recomputed.
pub fn kron_reduce(model: &GridModel, keep: &[usize]) -> Result<GridModel> {
    if keep.is_empty() {
        return Err(Error::Invalid("keep set is empty".into()));
    }
    let n = model.n_buses;
    let mut kept = vec![false; n];
    for &k in keep {
        if k >= n {
            return Err(Error::Invalid(format!("keep index {k} out of range for {n} buses")));
        }
        if kept[k] {
            return Err(Error::Invalid(format!("keep index {k} repeated")));
        }
        kept[k] = true;
    }
    let elim: Vec<usize> = (0..n).filter(|&k| !kept[k]).collect();
    let l = &model.laplacian;
    let lkk = l.select_rows(keep).select_columns(keep);
    let reduced = if elim.is_empty() {
        lkk
    } else {
        let lee = l.select_rows(&elim).select_columns(&elim);
        let lek = l.select_rows(&elim).select_columns(keep);
        let chol = lee.clone().cholesky().ok_or_else(|| {
            Error::SingularElimination(format!("{} eliminated buses include an isolated subnetwork", elim.len()))
        })?;
        let x = chol.solve(&lek);
        let mut r = lkk - lek.transpose() * x;
        r = (&r + r.transpose()) * 0.5;
        r
    };
    let inertia = DVector::from_iterator(keep.len(), keep.iter().map(|&k| model.inertia[k]));
    let damping = DVector::from_iterator(keep.len(), keep.iter().map(|&k| model.damping[k]));
    let ids = keep.iter().map(|&k| model.bus_ids[k]).collect();
    GridModel::with_ids(inertia, damping, reduced, model.base_freq_hz, ids)
}

/// Model reduced to the generator buses of the case.
pub fn build_reduced_model(case: &CaseFile) -> Result<GridModel> {
    let full = build_model(case, true)?;
    let keep: Vec<usize> = case
        .buses
        .iter()
        .enumerate()
        .filter(|(_, b)| b.kind == BusKind::Generator)
        .map(|(k, _)| k)
        .collect();
    kron_reduce(&full, &keep)
}

/// Eigendecomposition of `L_M = M^{-1/2} L M^{-1/2}` with the band-retained index set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenSpace {
    pub eigvecs: DMatrix<f64>,
    pub eigvals: DVector<f64>,
    pub gamma: f64,
    pub retained: Vec<usize>,
    /// `M^{-1/2} V`, the participation of each eigenstate in each bus speed.
    pub weights: DMatrix<f64>,
}

impl EigenSpace {
    pub fn n_retained(&self) -> usize {
        self.retained.len()
    }

    /// Retained eigenvalues in retained order.
    pub fn retained_eigvals(&self) -> Vec<f64> {
        self.retained.iter().map(|&i| self.eigvals[i]).collect()
    }

    /// Rows `buses` of `M^{-1/2} V`, columns restricted to retained eigenstates.
    pub fn retained_weights(&self, buses: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(buses.len(), self.retained.len(), |r, c| {
            self.weights[(buses[r], self.retained[c])]
        })
    }

    /// Resonant frequency `√λ_i / 2π` in Hz.
    pub fn resonance_hz(&self, i: usize) -> f64 {
        self.eigvals[i].max(0.0).sqrt() / (2.0 * PI)
    }

    /// Copy with a different retained set.
    pub fn with_retained(&self, retained: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = retained.iter().find(|&&i| i >= self.eigvals.len()) {
            return Err(Error::Invalid(format!("retained index {bad} out of range")));
        }
        Ok(Self {
            retained,
            ..self.clone()
        })
    }
}

/// Eigendecomposes the scaled Laplacian; with a band, retains the eigenstates resonating inside it.
pub fn eigenspace(model: &GridModel, band: Option<Band>) -> Result<EigenSpace> {
    let n = model.n_buses;
    let lm = model.scaled_laplacian();
    if lm.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigen("scaled laplacian has non-finite entries".into()));
    }
    let eig = SymmetricEigen::new(lm);
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigen("non-finite eigenvalues".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut eigvals = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut eigvecs = eig.eigenvectors.select_columns(&order);
    for c in 0..n {
        // fix the sign so the largest-magnitude component is positive
        let mut col = eigvecs.column_mut(c);
        if col[col.iamax()] < 0.0 {
            col.neg_mut();
        }
    }
    if eigvals[0].abs() < ZERO_EIGENVALUE_TOL {
        eigvals[0] = 0.0;
    }
    if eigvals[0] < -ZERO_EIGENVALUE_TOL {
        return Err(Error::Eigen(format!("negative eigenvalue {:.3e}", eigvals[0])));
    }
    let retained = match band {
        None => (0..n).collect(),
        Some(b) => (0..n)
            .filter(|&i| b.contains(eigvals[i].max(0.0).sqrt() / (2.0 * PI)))
            .collect(),
    };
    let weights = DMatrix::from_fn(n, n, |r, c| eigvecs[(r, c)] / model.inertia[r].sqrt());
    Ok(EigenSpace {
        eigvecs,
        eigvals,
        gamma: model.gamma,
        retained,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRIANGLE: &str = "\
base_freq_hz = 60
base_mva = 100
[buses]
1, generator
2, generator
3, generator
[branches]
1, 2, 0.1
2, 3, 0.1
3, 1, 0.1
[generators]
1, 5.0, 2.0
2, 5.0, 2.0
3, 5.0, 2.0
";

    #[test]
    fn triangle_laplacian_diagonal() {
        let case = parse_case(TRIANGLE).unwrap();
        assert_eq!(case.branches.len(), 3);
        let l = case_laplacian(&case);
        for i in 0..3 {
            assert!((l[(i, i)] - 20.0).abs() < 1e-12);
            assert!(l.row(i).sum().abs() < 1e-12);
        }
    }

    #[test]
    fn inertia_from_h() {
        let model = build_model(&parse_case(TRIANGLE).unwrap(), false).unwrap();
        assert!((model.inertia[0] - 10.0 / (120.0 * PI)).abs() < 1e-15);
        assert!((model.inertia[0] - 0.02653).abs() < 1e-5);
        let gamma = model.damping.sum() / model.inertia.sum();
        assert_eq!(model.gamma, gamma);
    }

    #[test]
    fn empty_branches_disconnected() {
        let text = "base_freq_hz = 60\n[buses]\n1, generator\n2, generator\n[generators]\n1, 5, 1\n2, 5, 1\n";
        assert!(matches!(parse_case(text), Err(Error::Disconnected(_))));
    }

    #[test]
    fn dangling_generator() {
        let text = TRIANGLE.replace("3, 5.0, 2.0", "99, 5.0, 2.0");
        assert!(matches!(parse_case(&text), Err(Error::UnknownBus(99))));
    }

    #[test]
    fn duplicate_bus() {
        let text = TRIANGLE.replace("3, generator", "2, generator");
        assert!(matches!(parse_case(&text), Err(Error::DuplicateBus(2))));
    }

    #[test]
    fn parse_error_carries_line() {
        let text = TRIANGLE.replace("2, 3, 0.1", "2, 3, abc");
        match parse_case(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 9),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn augment_load_bus() {
        let text = "base_freq_hz = 50\n[buses]\n1, generator\n2, load\n[branches]\n1, 2, 0.2\n[generators]\n1, 4, 1\n";
        let case = parse_case(text).unwrap();
        let m = build_model(&case, true).unwrap();
        assert_eq!(m.inertia[1], 1e-4);
        assert_eq!(m.damping[1], 0.1);
        assert!(matches!(build_model(&case, false), Err(Error::Invalid(_))));
    }

    #[test]
    fn augment_noop_for_all_generators() {
        let case = parse_case(TRIANGLE).unwrap();
        assert_eq!(build_model(&case, true).unwrap(), build_model(&case, false).unwrap());
    }

    fn path_model() -> GridModel {
        let l = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        GridModel::new(DVector::from_element(3, 1.0), DVector::from_element(3, 0.5), l, 60.0).unwrap()
    }

    #[test]
    fn kron_path_eliminates_middle() {
        let r = kron_reduce(&path_model(), &[0, 2]).unwrap();
        assert!((r.laplacian[(0, 1)] + 0.5).abs() < 1e-14);
        assert!((r.laplacian[(0, 0)] - 0.5).abs() < 1e-14);
        assert_eq!(r.bus_ids, vec![0, 2]);
    }

    #[test]
    fn kron_keep_all_is_identity() {
        let m = path_model();
        let r = kron_reduce(&m, &[0, 1, 2]).unwrap();
        assert_eq!(r.laplacian, m.laplacian);
    }

    #[test]
    fn kron_singular_block() {
        // bus 2 hangs only off bus 1; eliminating both leaves bus 2 isolated from the kept set
        let l = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 1.0, -1.0, 0.0, -1.0, 1.0]);
        let m = GridModel::new(DVector::from_element(3, 1.0), DVector::from_element(3, 1.0), l, 60.0).unwrap();
        assert!(matches!(kron_reduce(&m, &[0]), Err(Error::SingularElimination(_))));
    }

    #[test]
    fn two_machine_eigenspace() {
        let l = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        let m = GridModel::new(DVector::from_element(2, 1.0), DVector::from_element(2, 1.0), l, 60.0).unwrap();
        let s = eigenspace(&m, None).unwrap();
        assert_eq!(s.eigvals[0], 0.0);
        assert!((s.eigvals[1] - 2.0).abs() < 1e-12);
        let r = 1.0 / 2f64.sqrt();
        assert!((s.eigvecs[(0, 0)].abs() - r).abs() < 1e-12);
        assert!((s.eigvecs[(0, 1)] + s.eigvecs[(1, 1)]).abs() < 1e-12);
        let banded = eigenspace(&m, Some(Band::new(0.5, 0.8))).unwrap();
        assert!(!banded.retained.contains(&0));
    }

    #[test]
    fn common_scaling_invariance() {
        let m = path_model();
        let scaled = GridModel::new(&m.inertia * 3.0, m.damping.clone(), &m.laplacian * 3.0, 60.0).unwrap();
        let a = eigenspace(&m, None).unwrap();
        let b = eigenspace(&scaled, None).unwrap();
        assert!((&a.eigvals - &b.eigvals).amax() < 1e-12);
        assert!((&a.eigvecs - &b.eigvecs).amax() < 1e-10);
    }
}
