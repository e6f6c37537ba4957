//! Multi-label MRF refinement of cascade probabilities.
//!
//! The labeling `L` minimises
//!
//! ```text
//! E(L) = Σ_{x,y neighbours} V(l(x), l(y)) + Σ_x D_x(l(x))
//! D_x(l)    = −λ ln max(P_l(x), p_floor)
//! V(l1, l2) = [l1 ≠ l2] · exp(−(I(x) − I(y))² / 2σ²) / ‖x − y‖
//! ```
//!
//! over the band of interest with 6-connectivity. Voxels outside the band
//! are fixed to background but still contribute pairwise terms with their
//! band neighbours. The minimisation uses alpha-expansion: each move is a
//! binary problem solved exactly by a minimum cut.

mod maxflow;

pub use maxflow::{max_flow, Arc, FlowNetwork, MinCut};

pub use crate::features::ProbabilityMaps;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distance::Band;
use crate::labels::{Palette, BACKGROUND, NUM_CLASSES};
use crate::volume::{Geometry, LabelVolume, Volume, VoxelIndex};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyParams {
    /// Weight of the data term relative to smoothness.
    pub lambda: f64,
    /// Intensity contrast scale.
    pub sigma: f64,
    /// Probabilities are floored here before taking the log.
    pub p_floor: f64,
    /// Use `exp(+ΔI²/2σ²)` instead of `exp(−ΔI²/2σ²)`, which rewards cuts
    /// across flat regions. Kept for comparison only.
    pub positive_exponent: bool,
    /// Safety cap on full expansion cycles.
    pub max_cycles: usize,
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams {
            lambda: 1.5,
            sigma: 30.0,
            p_floor: 1e-6,
            positive_exponent: false,
            max_cycles: 50,
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda = {} must be > 0", self.lambda)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma = {} must be > 0", self.sigma)));
        }
        if !(self.p_floor > 0.0 && self.p_floor < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "p_floor = {} must be in (0, 1)",
                self.p_floor
            )));
        }
        if self.max_cycles == 0 {
            return Err(Error::InvalidArgument("max_cycles must be at least 1".into()));
        }
        Ok(())
    }

    /// Weight of a label discontinuity between intensities `a` and `b`
    /// whose voxel centres are `dist_mm` apart.
    #[inline]
    pub fn pair_weight(&self, a: f32, b: f32, dist_mm: f64) -> f64 {
        let d = f64::from(a) - f64::from(b);
        let e = d * d / (2.0 * self.sigma * self.sigma);
        let w = if self.positive_exponent { e.exp() } else { (-e).exp() };
        w / dist_mm
    }
}

/// `−λ ln max(P_l(x), p_floor)`; background probability is
/// `1 − P_F − P_T − P_P` clamped to `[p_floor, 1]`.
pub fn data_term(probs: &ProbabilityMaps, linear: usize, label: u8, params: &EnergyParams) -> f64 {
    let p = probs.probability(label, linear).clamp(params.p_floor, 1.0);
    -params.lambda * p.ln()
}

/// Pairwise cost between voxels `i` and `j` labelled `li` and `lj`.
pub fn smoothness_term(intensity: &Volume, i: VoxelIndex, j: VoxelIndex, li: u8, lj: u8, params: &EnergyParams) -> f64 {
    if li == lj {
        return 0.0;
    }
    let g = intensity.geometry();
    let dist = g.voxel_to_world(i).distance(&g.voxel_to_world(j));
    params.pair_weight(intensity.get(i), intensity.get(j), dist)
}

fn check_inputs(labels: &LabelVolume, probs: &ProbabilityMaps, intensity: &Volume, band: &Band) -> Result<Geometry> {
    let g = *intensity.geometry();
    g.ensure_same(labels.geometry(), "labeling vs intensity")?;
    g.ensure_same(probs.geometry(), "probabilities vs intensity")?;
    g.ensure_same(band.geometry(), "band vs intensity")?;
    if let Some(&l) = labels.labels().iter().find(|&&l| usize::from(l) >= NUM_CLASSES) {
        return Err(Error::InvalidArgument(format!("label {l} is not a cartilage class")));
    }
    Ok(g)
}

/// Data terms over band voxels plus smoothness over every 6-neighbour pair
/// with at least one voxel in the band.
pub fn energy_of_labeling(
    labels: &LabelVolume,
    probs: &ProbabilityMaps,
    intensity: &Volume,
    band: &Band,
    params: &EnergyParams,
) -> Result<f64> {
    params.validate()?;
    let g = check_inputs(labels, probs, intensity, band)?;
    let mut e = 0.0;
    for &i in band.voxels() {
        e += data_term(probs, i, labels.at(i), params);
    }
    for i in 0..g.len() {
        for (j, dist) in g.forward_neighbors(i) {
            if (band.contains(i) || band.contains(j)) && labels.at(i) != labels.at(j) {
                e += params.pair_weight(intensity.at(i), intensity.at(j), dist);
            }
        }
    }
    Ok(e)
}

/// One expansion move in the energy trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpansionStep {
    pub cycle: usize,
    pub alpha: u8,
    /// Energy after the move (unchanged when the move was rejected).
    pub energy: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub labels: LabelVolume,
    pub initial_energy: f64,
    pub steps: Vec<ExpansionStep>,
}

impl Refinement {
    pub fn final_energy(&self) -> f64 {
        self.steps.last().map_or(self.initial_energy, |s| s.energy)
    }

    /// Whether the energy never increased along the trace.
    pub fn is_monotone(&self) -> bool {
        let mut prev = self.initial_energy;
        self.steps.iter().all(|s| {
            let ok = s.energy <= prev;
            prev = s.energy;
            ok
        })
    }

    /// Plain-text audit log: a header line, then one line per move.
    pub fn write_audit<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# cycle alpha energy accepted")?;
        writeln!(w, "init - {:.12e} -", self.initial_energy)?;
        for s in &self.steps {
            writeln!(w, "{} {} {:.12e} {}", s.cycle, s.alpha, s.energy, s.accepted)?;
        }
        Ok(())
    }

    pub fn save_audit(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_audit(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Energy restricted to the band, with per-node data costs and the pair
/// structure precomputed.
struct BandEnergy {
    nodes: Vec<usize>,
    data: Vec<[f64; NUM_CLASSES]>,
    /// Both endpoints in the band (node indices).
    pairs: Vec<(u32, u32, f64)>,
    /// Band node next to a fixed out-of-band voxel with the given label.
    boundary: Vec<(u32, u8, f64)>,
}

impl BandEnergy {
    fn new(
        probs: &ProbabilityMaps,
        intensity: &Volume,
        band: &Band,
        fixed: &LabelVolume,
        params: &EnergyParams,
    ) -> Self {
        let g = intensity.geometry();
        let nodes = band.voxels().to_vec();
        let mut node_of = vec![u32::MAX; g.len()];
        for (k, &v) in nodes.iter().enumerate() {
            node_of[v] = k as u32;
        }
        let data = nodes
            .iter()
            .map(|&v| {
                let mut d = [0.0; NUM_CLASSES];
                for (l, slot) in d.iter_mut().enumerate() {
                    *slot = data_term(probs, v, l as u8, params);
                }
                d
            })
            .collect();
        let mut pairs = Vec::new();
        let mut boundary = Vec::new();
        for i in 0..g.len() {
            for (j, dist) in g.forward_neighbors(i) {
                let (bi, bj) = (band.contains(i), band.contains(j));
                if !(bi || bj) {
                    continue;
                }
                let w = params.pair_weight(intensity.at(i), intensity.at(j), dist);
                match (bi, bj) {
                    (true, true) => pairs.push((node_of[i], node_of[j], w)),
                    (true, false) => boundary.push((node_of[i], fixed.at(j), w)),
                    (false, true) => boundary.push((node_of[j], fixed.at(i), w)),
                    (false, false) => unreachable!(),
                }
            }
        }
        BandEnergy {
            nodes,
            data,
            pairs,
            boundary,
        }
    }

    fn energy(&self, labels: &[u8]) -> f64 {
        let mut e: f64 = self.data.iter().zip(labels).map(|(d, &l)| d[usize::from(l)]).sum();
        for &(a, b, w) in &self.pairs {
            if labels[a as usize] != labels[b as usize] {
                e += w;
            }
        }
        for &(a, l, w) in &self.boundary {
            if labels[a as usize] != l {
                e += w;
            }
        }
        e
    }

    /// Best labeling reachable from `labels` by switching any subset of
    /// nodes to `alpha`.
    fn expand(&self, labels: &[u8], alpha: u8) -> Result<Vec<u8>> {
        let n = self.nodes.len();
        let (s, t) = (n, n + 1);
        // cost of keeping (x = 0) / switching (x = 1)
        let mut keep: Vec<f64> = Vec::with_capacity(n);
        let mut switch: Vec<f64> = Vec::with_capacity(n);
        for (d, &l) in self.data.iter().zip(labels) {
            keep.push(d[usize::from(l)]);
            switch.push(d[usize::from(alpha)]);
        }
        let diff = |a: u8, b: u8, w: f64| if a != b { w } else { 0.0 };
        for &(k, lj, w) in &self.boundary {
            let k = k as usize;
            keep[k] += diff(labels[k], lj, w);
            switch[k] += diff(alpha, lj, w);
        }
        let mut net = FlowNetwork::with_capacity(n + 2, s, t, 2 * n + self.pairs.len())?;
        for &(a, b, w) in &self.pairs {
            let (a, b) = (a as usize, b as usize);
            let (la, lb) = (labels[a], labels[b]);
            let e00 = diff(la, lb, w);
            let e01 = diff(la, alpha, w);
            let e10 = diff(alpha, lb, w);
            // E = e00 + (e10 − e00)·x_a + (0 − e10)·x_b + (e01 + e10 − e00)·(1 − x_a)·x_b
            let ca = e10 - e00;
            if ca > 0.0 {
                switch[a] += ca;
            } else {
                keep[a] -= ca;
            }
            keep[b] += e10;
            let cross = e01 + e10 - e00;
            if cross > 0.0 {
                net.add_arc(a, b, cross)?;
            }
        }
        for k in 0..n {
            let m = keep[k].min(switch[k]);
            if switch[k] > m {
                net.add_arc(s, k, switch[k] - m)?;
            }
            if keep[k] > m {
                net.add_arc(k, t, keep[k] - m)?;
            }
        }
        let cut = max_flow(&net);
        Ok(labels
            .iter()
            .enumerate()
            .map(|(k, &l)| if cut.source_side[k] { l } else { alpha })
            .collect())
    }
}

/// Alpha-expansion from `init`, cycling labels in order background,
/// femoral, tibial, patellar until a full cycle makes no strict
/// improvement. A move is kept only if it lowers the energy, so the trace
/// is monotone non-increasing.
pub fn alpha_expansion(
    probs: &ProbabilityMaps,
    intensity: &Volume,
    band: &Band,
    init: &LabelVolume,
    params: &EnergyParams,
) -> Result<Refinement> {
    params.validate()?;
    let g = check_inputs(init, probs, intensity, band)?;
    if band.is_empty() {
        return Err(Error::InvalidArgument("alpha-expansion needs a nonempty band".into()));
    }
    if let Some(i) = (0..g.len()).find(|&i| !band.contains(i) && init.at(i) != BACKGROUND) {
        return Err(Error::InvalidArgument(format!(
            "voxel {i} lies outside the band but is not background"
        )));
    }
    let problem = BandEnergy::new(probs, intensity, band, init, params);
    let mut labels: Vec<u8> = problem.nodes.iter().map(|&v| init.at(v)).collect();
    let initial_energy = problem.energy(&labels);
    let mut energy = initial_energy;
    let mut steps = Vec::new();
    for cycle in 0..params.max_cycles {
        let mut improved = false;
        for alpha in 0..NUM_CLASSES as u8 {
            let candidate = problem.expand(&labels, alpha)?;
            let e = problem.energy(&candidate);
            let accepted = e < energy - 1e-12 * energy.abs().max(1.0);
            if accepted {
                labels = candidate;
                energy = e;
                improved = true;
            }
            steps.push(ExpansionStep {
                cycle,
                alpha,
                energy,
                accepted,
            });
        }
        if !improved {
            break;
        }
    }
    let mut out = init.labels().to_vec();
    for (&v, &l) in problem.nodes.iter().zip(&labels) {
        out[v] = l;
    }
    let palette = if init.palette().len() >= NUM_CLASSES {
        init.palette().clone()
    } else {
        Palette::cartilage()
    };
    let refinement = Refinement {
        labels: LabelVolume::new(g, out, palette)?,
        initial_energy,
        steps,
    };
    debug_assert!(refinement.is_monotone());
    Ok(refinement)
}

/// Per-voxel most probable label (background outside the band).
pub fn argmax_labels(probs: &ProbabilityMaps, band: &Band) -> Result<LabelVolume> {
    let g = *probs.geometry();
    g.ensure_same(band.geometry(), "band vs probabilities")?;
    let mut labels = vec![BACKGROUND; g.len()];
    for &i in band.voxels() {
        labels[i] = probs.argmax(i);
    }
    LabelVolume::new(g, labels, Palette::cartilage())
}
