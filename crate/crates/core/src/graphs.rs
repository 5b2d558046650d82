//! Construction of the five inter-station correlation graphs.
//!
//! The network distance graph comes from shortest-path travel times pushed
//! through a Gaussian kernel. The POI, network structure, operational and
//! recent-flow graphs are coefficient matrices of a nonnegative sparse
//! reconstruction: each station's feature vector is expressed as a sparse
//! nonnegative combination of the other stations' feature vectors, solved by
//! projected proximal gradient descent.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::matrix::Matrix;
use crate::pipeline::FlowTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GraphKind {
    Distance,
    Poi,
    Structure,
    Operational,
    RecentFlow,
}

impl GraphKind {
    pub const ALL: [GraphKind; 5] = [
        GraphKind::Distance,
        GraphKind::Poi,
        GraphKind::Structure,
        GraphKind::Operational,
        GraphKind::RecentFlow,
    ];

    pub fn index(self) -> usize {
        match self {
            GraphKind::Distance => 0,
            GraphKind::Poi => 1,
            GraphKind::Structure => 2,
            GraphKind::Operational => 3,
            GraphKind::RecentFlow => 4,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            GraphKind::Distance => "distance",
            GraphKind::Poi => "poi",
            GraphKind::Structure => "structure",
            GraphKind::Operational => "operational",
            GraphKind::RecentFlow => "recent-flow",
        }
    }

    /// Conventional 1-based label (the distance graph is graph 1).
    pub fn number(self) -> usize {
        self.index() + 1
    }

    pub fn from_number(n: usize) -> Option<GraphKind> {
        GraphKind::ALL.get(n.wrapping_sub(1)).copied()
    }
}

/// Subset of the five graphs that feeds the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphMask(u8);

impl GraphMask {
    pub fn empty() -> Self {
        GraphMask(0)
    }

    pub fn all() -> Self {
        GraphMask(0b11111)
    }

    pub fn from_kinds(kinds: &[GraphKind]) -> Self {
        let mut bits = 0;
        for k in kinds {
            bits |= 1 << k.index();
        }
        GraphMask(bits)
    }

    pub fn contains(self, kind: GraphKind) -> bool {
        self.0 & (1 << kind.index()) != 0
    }

    pub fn kinds(self) -> Vec<GraphKind> {
        GraphKind::ALL.iter().copied().filter(|k| self.contains(*k)).collect()
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationRecord {
    pub id: String,
    pub name: String,
    pub lines: Vec<String>,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub travel_time_min: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationNetwork {
    pub stations: Vec<StationRecord>,
    pub edges: Vec<Edge>,
}

impl StationNetwork {
    pub fn new(stations: Vec<StationRecord>, edges: Vec<Edge>) -> Result<Self> {
        if stations.len() < 2 {
            return Err(CoreError::Config(format!(
                "a network needs at least 2 stations, got {}",
                stations.len()
            )));
        }
        for e in &edges {
            if e.from >= stations.len() || e.to >= stations.len() {
                return Err(CoreError::Data(format!(
                    "edge {}-{} references a station outside 0..{}",
                    e.from,
                    e.to,
                    stations.len()
                )));
            }
            if e.travel_time_min <= 0.0 || !e.travel_time_min.is_finite() {
                return Err(CoreError::Data(format!(
                    "edge {}-{} has invalid travel time {}",
                    e.from, e.to, e.travel_time_min
                )));
            }
        }
        Ok(StationNetwork { stations, edges })
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }
}

/// All-pairs shortest-path travel times (minutes) over the undirected edge
/// list, via Floyd-Warshall. Errors if any pair is unreachable.
pub fn network_distance(net: &StationNetwork) -> Result<Matrix> {
    let n = net.len();
    let mut d = Matrix::filled(n, n, f64::INFINITY);
    for i in 0..n {
        d.set(i, i, 0.0);
    }
    for e in &net.edges {
        if e.travel_time_min < d.at(e.from, e.to) {
            d.set(e.from, e.to, e.travel_time_min);
            d.set(e.to, e.from, e.travel_time_min);
        }
    }
    for k in 0..n {
        for i in 0..n {
            let dik = d.at(i, k);
            if dik.is_infinite() {
                continue;
            }
            for j in 0..n {
                let via = dik + d.at(k, j);
                if via < d.at(i, j) {
                    d.set(i, j, via);
                }
            }
        }
    }
    let mut unreachable = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if d.at(i, j).is_infinite() {
                unreachable.push((i, j));
            }
        }
    }
    if !unreachable.is_empty() {
        let shown: Vec<String> = unreachable
            .iter()
            .take(8)
            .map(|(i, j)| format!("{}-{}", net.stations[*i].id, net.stations[*j].id))
            .collect();
        return Err(CoreError::Data(format!(
            "network is disconnected: {} unreachable pairs ({}{})",
            unreachable.len(),
            shown.join(", "),
            if unreachable.len() > shown.len() { ", ..." } else { "" }
        )));
    }
    Ok(d)
}

/// Gaussian kernel weights W_ij = exp(-d_ij^2 / sigma^2) with unit diagonal.
/// When `sigma` is not given it defaults to the population standard
/// deviation of the off-diagonal distances.
pub fn gaussian_weights(d: &Matrix, sigma: Option<f64>) -> Result<Matrix> {
    let n = d.rows();
    if d.cols() != n {
        return Err(CoreError::Shape {
            op: "gaussian_weights",
            detail: format!("distance matrix must be square, got {}", d.shape_str()),
        });
    }
    if !d.is_symmetric(1e-9) || d.data().iter().any(|&v| v < 0.0) {
        return Err(CoreError::Contract("distance matrix must be symmetric and nonnegative".into()));
    }
    let sigma = match sigma {
        Some(s) if s > 0.0 => s,
        Some(s) => {
            return Err(CoreError::Config(format!("sigma must be positive, got {s}")));
        }
        None => {
            let mut vals = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        vals.push(d.at(i, j));
                    }
                }
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            let s = var.sqrt();
            if s == 0.0 {
                return Err(CoreError::Config(
                    "all pairwise distances are equal, so the kernel width is zero; pass an explicit sigma".into(),
                ));
            }
            s
        }
    };
    let mut w = Matrix::from_fn(n, n, |i, j| {
        let dij = d.at(i, j);
        (-(dij * dij) / (sigma * sigma)).exp()
    });
    for i in 0..n {
        w.set(i, i, 1.0);
    }
    Ok(w)
}

/// RBF-similarity graph Laplacian over z-scored feature rows of X (P x N).
/// Kernel width is the median pairwise row distance; two identical rows get
/// similarity 1. Zero-variance rows z-score to zero (with a warning).
pub fn feature_laplacian(x: &Matrix) -> Result<Matrix> {
    let p = x.rows();
    if p == 0 {
        return Err(CoreError::Contract("feature matrix needs at least one feature row".into()));
    }
    if p == 1 {
        return Ok(Matrix::zeros(1, 1));
    }
    let n = x.cols();
    // z-score each feature row across stations
    let mut z = Matrix::zeros(p, n);
    for r in 0..p {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        if var == 0.0 {
            log::warn!("feature row {r} has zero variance; z-scored to zeros");
            continue;
        }
        let sd = var.sqrt();
        for c in 0..n {
            z.set(r, c, (row[c] - mean) / sd);
        }
    }
    // pairwise row distances
    let mut dist_sq = Matrix::zeros(p, p);
    let mut dists = Vec::with_capacity(p * (p - 1) / 2);
    for a in 0..p {
        for b in (a + 1)..p {
            let d2: f64 = (0..n).map(|c| (z.at(a, c) - z.at(b, c)).powi(2)).sum();
            dist_sq.set(a, b, d2);
            dist_sq.set(b, a, d2);
            dists.push(d2.sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let tau = if dists.len() % 2 == 1 {
        dists[dists.len() / 2]
    } else {
        0.5 * (dists[dists.len() / 2 - 1] + dists[dists.len() / 2])
    };
    let s = if tau == 0.0 {
        // all rows identical: similarity is exactly the indicator of d == 0
        Matrix::from_fn(p, p, |a, b| if dist_sq.at(a, b) == 0.0 { 1.0 } else { 0.0 })
    } else {
        Matrix::from_fn(p, p, |a, b| (-dist_raw(&dist_sq, a, b) / (2.0 * tau * tau)).exp())
    };
    let mut l = s.scale(-1.0);
    for i in 0..p {
        let deg: f64 = (0..p).map(|j| s.at(i, j)).sum();
        l.set(i, i, deg - s.at(i, i));
    }
    Ok(l)
}

fn dist_raw(dist_sq: &Matrix, a: usize, b: usize) -> f64 {
    dist_sq.at(a, b)
}

/// Largest absolute eigenvalue of a symmetric matrix via power iteration.
pub fn power_iteration_sym(a: &Matrix, iters: usize) -> f64 {
    let n = a.rows();
    debug_assert_eq!(n, a.cols());
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + ((i + 1) as f64).sin() * 0.25).collect();
    let mut lambda = 0.0;
    for _ in 0..iters {
        let mut w = alloc::vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += a.at(i, j) * v[j];
            }
            w[i] = acc;
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        for x in w.iter_mut() {
            *x /= norm;
        }
        lambda = norm;
        v = w;
    }
    lambda
}

/// Tuning knobs of the sparse reconstruction solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionParams {
    pub rho1: f64,
    pub rho2: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ReconstructionParams {
    fn default() -> Self {
        ReconstructionParams { rho1: 0.1, rho2: 0.01, tol: 1e-6, max_iter: 5000 }
    }
}

/// Output of [`sparse_reconstruct`].
#[derive(Debug, Clone)]
pub struct SparseReconstruction {
    pub weights: Matrix,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    /// Objective value after every accepted iterate, starting at W = 0.
    pub objective_trace: Vec<f64>,
}

/// Minimizes ||XW - X||_F^2 + rho1 ||W||_1 + rho2 tr(W^T X^T L X W) subject
/// to W >= 0 and diag(W) = 0, by projected proximal gradient with a fixed
/// step of 1/Lip. Each iterate takes a gradient step on the smooth part,
/// soft-thresholds by rho1*step, clamps at zero and zeroes the diagonal.
pub fn sparse_reconstruct(
    x: &Matrix,
    rho1: f64,
    rho2: f64,
    laplacian: &Matrix,
    tol: f64,
    max_iter: usize,
) -> Result<SparseReconstruction> {
    if rho1 < 0.0 || rho2 < 0.0 {
        return Err(CoreError::Config(format!("rho1/rho2 must be nonnegative, got {rho1}, {rho2}")));
    }
    if !x.all_finite() {
        return Err(CoreError::Numeric("feature matrix contains non-finite values".into()));
    }
    let (p, n) = x.shape();
    if laplacian.shape() != (p, p) {
        return Err(CoreError::Shape {
            op: "sparse_reconstruct",
            detail: format!("laplacian {} does not match {p} feature rows", laplacian.shape_str()),
        });
    }

    let xt = x.transpose();
    let gram = xt.matmul(x); // X^T X, N x N
    let curv = if rho2 > 0.0 {
        xt.matmul(&laplacian.matmul(x)).scale(rho2) // rho2 * X^T L X
    } else {
        Matrix::zeros(n, n)
    };
    // Lipschitz constant of the smooth gradient: 2 * lambda_max(G + rho2*C),
    // padded slightly because power iteration approaches from below.
    let lip_op = gram.add(&curv).scale(2.0);
    let lip = power_iteration_sym(&lip_op, 200) * 1.02;
    if lip <= 1e-300 {
        // X is (numerically) zero: the penalty terms alone are minimized at 0.
        return Ok(SparseReconstruction {
            weights: Matrix::zeros(n, n),
            converged: true,
            iterations: 0,
            objective: 0.0,
            objective_trace: alloc::vec![0.0],
        });
    }
    let step = 1.0 / lip;

    let objective = |w: &Matrix| -> f64 {
        let resid = x.matmul(w).sub(x);
        let mut f = resid.frob_sq() + rho1 * w.data().iter().map(|v| v.abs()).sum::<f64>();
        if rho2 > 0.0 {
            // tr(W^T C W) with C already scaled by rho2
            f += w.hadamard(&curv.matmul(w)).sum();
        }
        f
    };

    let mut w = Matrix::zeros(n, n);
    let mut f_prev = objective(&w);
    let mut trace = alloc::vec![f_prev];
    let mut converged = false;
    let mut iterations = 0;
    let thresh = rho1 * step;
    for it in 0..max_iter {
        iterations = it + 1;
        // gradient of the smooth part: 2 G (W - I) + 2 C W
        let mut grad = gram.matmul(&w).sub(&gram).scale(2.0);
        if rho2 > 0.0 {
            grad.add_assign(&curv.matmul(&w).scale(2.0));
        }
        let mut next = w.clone();
        for e in 0..next.len() {
            let v = next.data()[e] - step * grad.data()[e];
            let soft = v.signum() * (v.abs() - thresh).max(0.0);
            next.data_mut()[e] = soft.max(0.0);
        }
        for i in 0..n {
            next.set(i, i, 0.0);
        }
        let f_next = objective(&next);
        w = next;
        trace.push(f_next);
        let rel = (f_prev - f_next).abs() / f_prev.abs().max(1.0);
        f_prev = f_next;
        if rel < tol {
            converged = true;
            break;
        }
    }
    Ok(SparseReconstruction {
        weights: w,
        converged,
        iterations,
        objective: f_prev,
        objective_trace: trace,
    })
}

/// Recent-flow feature matrix at slot `t`: rows 0..10 are the inflow of
/// slots t-10..t, rows 10..20 the outflow, one column per station.
pub fn recent_flow_features(history: &FlowTensor, t: usize) -> Result<Matrix> {
    const LOOKBACK: usize = 10;
    if t < LOOKBACK {
        return Err(CoreError::Contract(format!(
            "recent-flow features need {LOOKBACK} slots of history; earliest valid slot is {LOOKBACK}, got {t}"
        )));
    }
    if t > history.slots() {
        return Err(CoreError::Contract(format!(
            "slot {t} beyond series of {} slots",
            history.slots()
        )));
    }
    let n = history.stations();
    Ok(Matrix::from_fn(2 * LOOKBACK, n, |r, c| {
        let (ch, off) = if r < LOOKBACK { (0, r) } else { (1, r - LOOKBACK) };
        history.get(t - LOOKBACK + off, c, ch)
    }))
}

/// The four static adjacency matrices plus the time-indexed recent-flow
/// matrices, restricted to the active mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphSet {
    pub mask: GraphMask,
    statics: BTreeMap<usize, Matrix>,
    pub recent: BTreeMap<usize, Matrix>,
}

impl GraphSet {
    pub fn static_graph(&self, kind: GraphKind) -> Option<&Matrix> {
        self.statics.get(&kind.index())
    }

    pub fn recent_at(&self, slot: usize) -> Option<&Matrix> {
        self.recent.get(&slot)
    }

    pub fn insert_static(&mut self, kind: GraphKind, m: Matrix) {
        self.statics.insert(kind.index(), m);
    }
}

/// Feature tables for the three reconstruction-based static graphs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub names: Vec<String>,
    /// P x N, column per station, aligned with the network's station order.
    pub x: Matrix,
}

impl FeatureMatrix {
    pub fn new(names: Vec<String>, x: Matrix) -> Result<Self> {
        if names.len() != x.rows() || x.rows() == 0 {
            return Err(CoreError::Data(format!(
                "feature matrix has {} rows but {} names",
                x.rows(),
                names.len()
            )));
        }
        Ok(FeatureMatrix { names, x })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSet {
    pub poi: FeatureMatrix,
    pub structure: FeatureMatrix,
    pub operational: FeatureMatrix,
}

fn symmetrize(w: &Matrix) -> Matrix {
    w.add(&w.transpose()).scale(0.5)
}

fn reconstruction_graph(x: &Matrix, params: &ReconstructionParams, what: &str) -> Result<Matrix> {
    let lap = feature_laplacian(x)?;
    let sol = sparse_reconstruct(x, params.rho1, params.rho2, &lap, params.tol, params.max_iter)?;
    if !sol.converged {
        log::warn!(
            "sparse reconstruction for {what} stopped at max_iter={} (objective {:.6})",
            sol.iterations,
            sol.objective
        );
    }
    Ok(symmetrize(&sol.weights))
}

/// Builds every graph the mask activates. Recent-flow matrices are solved
/// for exactly the requested slots over the aggregated flow history.
pub fn build_graph_set(
    net: &StationNetwork,
    features: &FeatureSet,
    flows: &FlowTensor,
    recent_slots: &[usize],
    mask: GraphMask,
    params: &ReconstructionParams,
    sigma: Option<f64>,
) -> Result<GraphSet> {
    if mask.is_empty() {
        return Err(CoreError::Config("graph mask must activate at least one graph".into()));
    }
    let n = net.len();
    for fm in [&features.poi, &features.structure, &features.operational] {
        if fm.x.cols() != n {
            return Err(CoreError::Data(format!(
                "feature table has {} station columns, network has {n}",
                fm.x.cols()
            )));
        }
    }
    if flows.stations() != n {
        return Err(CoreError::Data(format!(
            "flow series covers {} stations, network has {n}",
            flows.stations()
        )));
    }
    let mut set = GraphSet { mask, statics: BTreeMap::new(), recent: BTreeMap::new() };
    if mask.contains(GraphKind::Distance) {
        let d = network_distance(net)?;
        set.insert_static(GraphKind::Distance, gaussian_weights(&d, sigma)?);
    }
    if mask.contains(GraphKind::Poi) {
        set.insert_static(GraphKind::Poi, reconstruction_graph(&features.poi.x, params, "poi")?);
    }
    if mask.contains(GraphKind::Structure) {
        set.insert_static(
            GraphKind::Structure,
            reconstruction_graph(&features.structure.x, params, "structure")?,
        );
    }
    if mask.contains(GraphKind::Operational) {
        set.insert_static(
            GraphKind::Operational,
            reconstruction_graph(&features.operational.x, params, "operational")?,
        );
    }
    if mask.contains(GraphKind::RecentFlow) {
        for &slot in recent_slots {
            if set.recent.contains_key(&slot) {
                continue;
            }
            let feats = recent_flow_features(flows, slot)?;
            let g = reconstruction_graph(&feats, params, "recent-flow")?;
            set.recent.insert(slot, g);
        }
    }
    Ok(set)
}
