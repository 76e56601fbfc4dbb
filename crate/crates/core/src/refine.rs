//! Alternating refinement of the class-level and semantic-level graphs.
//!
//! Each round rebuilds the semantic affinity from the current features,
//! propagates class probabilities over it, gates the update per pixel with
//! class-specific confidence thresholds, rebuilds the class consistency graph
//! from the new probabilities and finally propagates features over it. The
//! order of the two halves is configurable.

use serde::{Deserialize, Serialize};

use crate::clg::{build_clg_affinity, normalize_clg, ClgOptions};
use crate::error::{Error, Result};
use crate::nn::{Activation, ForwardCache, MlpGrads, MlpParams};
use crate::slg::{build_slg_affinity, normalize_symmetric, Neighbors, SlgParams};
use crate::sparse::SparseAffinity;
use crate::tensor::{argmax, FeatureMatrix, LabelMap, Matrix, ProbMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOrder {
    /// Semantic affinity → class update → class graph → feature update.
    ClgFirst,
    /// Class graph → feature update → semantic affinity → class update.
    SlgFirst,
    /// Both graphs from the previous round, both updates in parallel.
    Simultaneous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Number of refinement rounds.
    pub rounds: usize,
    pub k: Neighbors,
    pub gamma: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub order: StageOrder,
    /// When false every class uses the fixed threshold `sigma`.
    pub class_thresholds: bool,
    /// Per-class block cap of the class graph; `None` disables splitting.
    pub class_cap: Option<usize>,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            rounds: 2,
            k: Neighbors::K(20),
            gamma: 1.0,
            alpha: 0.8,
            sigma: 0.95,
            order: StageOrder::ClgFirst,
            class_thresholds: true,
            class_cap: Some(1024),
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Param("refinement needs at least one round (K >= 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Param(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return Err(Error::Param(format!("sigma {} outside (0, 1]", self.sigma)));
        }
        if matches!(self.k, Neighbors::K(0)) {
            return Err(Error::Param("k must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Param(format!("gamma {} must be positive", self.gamma)));
        }
        Ok(())
    }

    pub fn slg_params(&self) -> SlgParams {
        SlgParams {
            neighbors: self.k,
            gamma: self.gamma,
        }
    }

    fn clg_options(&self, round: usize) -> ClgOptions<'static> {
        ClgOptions {
            class_cap: self.class_cap,
            seed: self.seed.wrapping_add(round as u64),
            exclude: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdState {
    pub sigma: f64,
    /// Confident pixels per class.
    pub counts: Vec<usize>,
    pub eta: Vec<f64>,
}

impl ThresholdState {
    /// The same threshold `sigma` for every class.
    pub fn fixed(classes: usize, sigma: f64) -> Self {
        ThresholdState {
            sigma,
            counts: vec![0; classes],
            eta: vec![sigma; classes],
        }
    }

    /// Whether a pixel with probability row `p` clears the threshold of its
    /// predicted class.
    pub fn is_confident(&self, p: &[f64]) -> bool {
        let c = argmax(p);
        p[c] >= self.eta[c]
    }
}

/// Class-specific thresholds scaled by how many confident pixels each class
/// has relative to the best-represented class. With no confident pixel at
/// all, every threshold is zero.
pub fn dynamic_thresholds(probs: &ProbMatrix, sigma: f64) -> ThresholdState {
    let classes = probs.classes();
    let mut counts = vec![0usize; classes];
    for row in probs.matrix().row_iter() {
        let c = argmax(row);
        if row[c] > sigma {
            counts[c] += 1;
        }
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    let eta = if max == 0 {
        vec![0.0; classes]
    } else {
        counts
            .iter()
            .map(|&d| if d == max { sigma } else { d as f64 / max as f64 * sigma })
            .collect()
    };
    ThresholdState { sigma, counts, eta }
}

#[derive(Clone, Debug)]
pub struct GraphState {
    pub slg_features: FeatureMatrix,
    pub clg_probs: ProbMatrix,
    pub slg_edges: SparseAffinity,
    pub clg_edges: SparseAffinity,
    pub round: usize,
}

impl GraphState {
    /// Round-0 state with edges built from the given head outputs.
    pub fn initial(features: FeatureMatrix, probs: ProbMatrix, cfg: &RefineConfig) -> Result<Self> {
        check_nodes(&features, &probs)?;
        let slg_edges = normalize_symmetric(&build_slg_affinity(&features, &cfg.slg_params())?).affinity;
        let clg_edges = normalize_clg(&build_clg_affinity(&probs, &cfg.clg_options(0)));
        Ok(GraphState {
            slg_features: features,
            clg_probs: probs,
            slg_edges,
            clg_edges,
            round: 0,
        })
    }
}

fn check_nodes(features: &FeatureMatrix, probs: &ProbMatrix) -> Result<()> {
    if features.n() != probs.n() {
        return Err(Error::Dimension(format!(
            "{} feature rows vs {} probability rows",
            features.n(),
            probs.n()
        )));
    }
    Ok(())
}

/// Layers of the untrained/trained refinement: one class layer and one
/// feature layer per round.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineLayers {
    pub clg: Vec<MlpParams>,
    pub slg: Vec<MlpParams>,
}

impl RefineLayers {
    /// Identity-averaging layers. Untrained, refinement then reduces to
    /// plain label and feature propagation.
    pub fn identity_averaging(rounds: usize, classes: usize, dim: usize) -> Self {
        RefineLayers {
            clg: (0..rounds)
                .map(|_| MlpParams::identity_averaging(classes, Activation::SimplexNormalize))
                .collect(),
            slg: (0..rounds)
                .map(|_| MlpParams::identity_averaging(dim, Activation::LeakyRelu))
                .collect(),
        }
    }

    pub fn rounds(&self) -> usize {
        self.clg.len()
    }

    pub fn all(&self) -> impl Iterator<Item = &MlpParams> {
        self.clg.iter().chain(&self.slg)
    }

    pub fn all_mut(&mut self) -> impl Iterator<Item = &mut MlpParams> {
        self.clg.iter_mut().chain(self.slg.iter_mut())
    }

    fn check(&self, rounds: usize, classes: usize, dim: usize) -> Result<()> {
        if self.clg.len() < rounds || self.slg.len() < rounds {
            return Err(Error::Contract(format!(
                "{rounds} rounds requested but only {}/{} layers",
                self.clg.len(),
                self.slg.len()
            )));
        }
        for l in &self.clg[..rounds] {
            if l.in_dim() != 2 * classes || l.out_dim() != classes {
                return Err(Error::Dimension(format!(
                    "class layer {}→{} for {classes} classes",
                    l.in_dim(),
                    l.out_dim()
                )));
            }
            if !matches!(l.activation, Activation::SoftmaxRows | Activation::SimplexNormalize) {
                return Err(Error::Contract("class layers must output probabilities".into()));
            }
        }
        for l in &self.slg[..rounds] {
            if l.in_dim() != 2 * dim || l.out_dim() != dim {
                return Err(Error::Dimension(format!(
                    "feature layer {}→{} for dimension {dim}",
                    l.in_dim(),
                    l.out_dim()
                )));
            }
        }
        Ok(())
    }
}

fn propagate(
    values: &Matrix,
    edges: &SparseAffinity,
    layer: &MlpParams,
) -> Result<(Matrix, ForwardCache)> {
    let agg = edges.matmul_dense(values)?;
    layer.forward(&values.hcat(&agg)?)
}

/// `f_C([x_i, Σ_j A_ij x_j])` over the current semantic affinity.
pub fn propagate_clg(state: &GraphState, f_c: &MlpParams) -> Result<ProbMatrix> {
    let (out, _) = propagate(state.clg_probs.matrix(), &state.slg_edges, f_c)?;
    Ok(ProbMatrix::from_trusted(out))
}

/// `f_S([x_i, Σ_j W_ij x_j])` over the current class consistency graph.
pub fn propagate_slg(state: &GraphState, f_s: &MlpParams) -> Result<FeatureMatrix> {
    let (out, _) = propagate(state.slg_features.matrix(), &state.clg_edges, f_s)?;
    FeatureMatrix::new(out)
}

/// Per-row weight on the propagated value: `alpha` for pixels confident
/// under their class threshold, `1 − alpha` otherwise.
pub fn mix_weights(thresholds: &ThresholdState, gate: &ProbMatrix, alpha: f64) -> Vec<f64> {
    gate.matrix()
        .row_iter()
        .map(|p| if thresholds.is_confident(p) { alpha } else { 1.0 - alpha })
        .collect()
}

/// Gated convex combination of the propagated and previous class rows. The
/// gate reads `gate_probs`, the original classifier output.
pub fn mix_update(
    v_hat: &ProbMatrix,
    v_prev: &ProbMatrix,
    thresholds: &ThresholdState,
    gate_probs: &ProbMatrix,
    alpha: f64,
) -> Result<ProbMatrix> {
    if v_hat.matrix().shape() != v_prev.matrix().shape() || gate_probs.n() != v_hat.n() {
        return Err(Error::Dimension("mix_update inputs differ in shape".into()));
    }
    let w = mix_weights(thresholds, gate_probs, alpha);
    Ok(ProbMatrix::from_trusted(blend(v_hat.matrix(), v_prev.matrix(), &w)))
}

fn blend(new: &Matrix, prev: &Matrix, w: &[f64]) -> Matrix {
    Matrix::from_fn(new.rows(), new.cols(), |i, j| {
        w[i] * new[(i, j)] + (1.0 - w[i]) * prev[(i, j)]
    })
}

#[derive(Clone, Debug)]
pub struct RefineOutput {
    pub state: GraphState,
    pub thresholds: ThresholdState,
    /// Class probabilities after each round, in round order.
    pub per_round_probs: Vec<ProbMatrix>,
    /// Features after each round.
    pub per_round_features: Vec<FeatureMatrix>,
    /// Isolated semantic-graph nodes summed over rounds.
    pub isolated_nodes: usize,
}

impl RefineOutput {
    pub fn pseudo_labels(&self) -> LabelMap {
        aggregate_pseudo_labels(&self.per_round_probs).expect("at least one round")
    }
}

struct RoundTrace {
    slg_edges: SparseAffinity,
    clg_edges: SparseAffinity,
    clg_cache: ForwardCache,
    slg_cache: ForwardCache,
}

/// Everything needed to push gradients back through a refinement run with
/// the graph edges held fixed.
pub struct RefineTrace {
    rounds: Vec<RoundTrace>,
    mix: Vec<f64>,
    classes: usize,
    dim: usize,
}

#[derive(Clone, Debug)]
pub struct RefineGrads {
    pub clg: Vec<MlpGrads>,
    pub slg: Vec<MlpGrads>,
    /// Gradient wrt the input probabilities.
    pub probs: Matrix,
    /// Gradient wrt the input features.
    pub features: Matrix,
}

pub fn refine(
    features: &FeatureMatrix,
    probs: &ProbMatrix,
    seg_head_probs: &ProbMatrix,
    cfg: &RefineConfig,
    layers: &RefineLayers,
) -> Result<RefineOutput> {
    run(features, probs, seg_head_probs, cfg, layers, false).map(|(o, _)| o)
}

/// [`refine`] that also records the per-round caches for backpropagation.
pub fn refine_traced(
    features: &FeatureMatrix,
    probs: &ProbMatrix,
    seg_head_probs: &ProbMatrix,
    cfg: &RefineConfig,
    layers: &RefineLayers,
) -> Result<(RefineOutput, RefineTrace)> {
    let (out, trace) = run(features, probs, seg_head_probs, cfg, layers, true)?;
    Ok((out, trace.expect("traced run")))
}

fn run(
    features: &FeatureMatrix,
    probs: &ProbMatrix,
    seg_head_probs: &ProbMatrix,
    cfg: &RefineConfig,
    layers: &RefineLayers,
    keep_trace: bool,
) -> Result<(RefineOutput, Option<RefineTrace>)> {
    cfg.validate()?;
    check_nodes(features, probs)?;
    if seg_head_probs.matrix().shape() != probs.matrix().shape() {
        return Err(Error::Dimension("gate probabilities differ in shape from probs".into()));
    }
    let (classes, dim) = (probs.classes(), features.dim());
    layers.check(cfg.rounds, classes, dim)?;

    let thresholds = if cfg.class_thresholds {
        dynamic_thresholds(seg_head_probs, cfg.sigma)
    } else {
        ThresholdState::fixed(classes, cfg.sigma)
    };
    let mix = mix_weights(&thresholds, seg_head_probs, cfg.alpha);
    let slg_params = cfg.slg_params();

    let mut feats = features.clone();
    let mut cprobs = probs.clone();
    let mut per_round_probs = Vec::with_capacity(cfg.rounds);
    let mut per_round_features = Vec::with_capacity(cfg.rounds);
    let mut traces = Vec::new();
    let mut isolated_nodes = 0;
    let mut last_edges = None;

    let slg_graph = |f: &FeatureMatrix, iso: &mut usize| -> Result<SparseAffinity> {
        let norm = normalize_symmetric(&build_slg_affinity(f, &slg_params)?);
        *iso += norm.isolated;
        Ok(norm.affinity)
    };

    for r in 0..cfg.rounds {
        let (f_c, f_s) = (&layers.clg[r], &layers.slg[r]);
        let clg_opts = cfg.clg_options(r + 1);

        let update_clg = |p: &ProbMatrix, a: &SparseAffinity| -> Result<(ProbMatrix, ForwardCache)> {
            let (v_hat, cache) = propagate(p.matrix(), a, f_c)?;
            Ok((ProbMatrix::from_trusted(blend(&v_hat, p.matrix(), &mix)), cache))
        };
        let update_slg = |f: &FeatureMatrix, w: &SparseAffinity| -> Result<(FeatureMatrix, ForwardCache)> {
            let (v, cache) = propagate(f.matrix(), w, f_s)?;
            Ok((FeatureMatrix::new(v)?, cache))
        };

        let (a, w, next_p, clg_cache, next_f, slg_cache) = match cfg.order {
            StageOrder::ClgFirst => {
                let a = slg_graph(&feats, &mut isolated_nodes)?;
                let (p, cc) = update_clg(&cprobs, &a)?;
                let w = normalize_clg(&build_clg_affinity(&p, &clg_opts));
                let (f, sc) = update_slg(&feats, &w)?;
                (a, w, p, cc, f, sc)
            }
            StageOrder::SlgFirst => {
                let w = normalize_clg(&build_clg_affinity(&cprobs, &clg_opts));
                let (f, sc) = update_slg(&feats, &w)?;
                let a = slg_graph(&f, &mut isolated_nodes)?;
                let (p, cc) = update_clg(&cprobs, &a)?;
                (a, w, p, cc, f, sc)
            }
            StageOrder::Simultaneous => {
                let a = slg_graph(&feats, &mut isolated_nodes)?;
                let w = normalize_clg(&build_clg_affinity(&cprobs, &clg_opts));
                let (p, cc) = update_clg(&cprobs, &a)?;
                let (f, sc) = update_slg(&feats, &w)?;
                (a, w, p, cc, f, sc)
            }
        };

        cprobs = next_p;
        feats = next_f;
        per_round_probs.push(cprobs.clone());
        per_round_features.push(feats.clone());
        if keep_trace {
            traces.push(RoundTrace {
                slg_edges: a.clone(),
                clg_edges: w.clone(),
                clg_cache,
                slg_cache,
            });
        }
        last_edges = Some((a, w));
    }

    let (slg_edges, clg_edges) = last_edges.expect("rounds >= 1");
    let out = RefineOutput {
        state: GraphState {
            slg_features: feats,
            clg_probs: cprobs,
            slg_edges,
            clg_edges,
            round: cfg.rounds,
        },
        thresholds,
        per_round_probs,
        per_round_features,
        isolated_nodes,
    };
    let trace = keep_trace.then(|| RefineTrace {
        rounds: traces,
        mix,
        classes,
        dim,
    });
    Ok((out, trace))
}

impl RefineTrace {
    pub fn rounds(&self) -> usize {
        self.rounds.len()
    }

    /// Reruns the traced computation on new inputs and layers with the
    /// recorded edges and gate weights held fixed. This is the function whose
    /// gradient [`RefineTrace::backward`] returns.
    pub fn replay(
        &self,
        layers: &RefineLayers,
        probs: &Matrix,
        features: &Matrix,
    ) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
        let mut p = probs.clone();
        let mut f = features.clone();
        let mut ps = Vec::with_capacity(self.rounds.len());
        let mut fs = Vec::with_capacity(self.rounds.len());
        for (r, t) in self.rounds.iter().enumerate() {
            let (v_hat, _) = propagate(&p, &t.slg_edges, &layers.clg[r])?;
            p = blend(&v_hat, &p, &self.mix);
            f = propagate(&f, &t.clg_edges, &layers.slg[r])?.0;
            ps.push(p.clone());
            fs.push(f.clone());
        }
        Ok((ps, fs))
    }

    /// Backpropagates per-round output gradients. `grad_probs[r]` and
    /// `grad_features[r]` are gradients wrt round `r`'s outputs; `None`
    /// means zero.
    pub fn backward(
        &self,
        layers: &RefineLayers,
        grad_probs: &[Option<Matrix>],
        grad_features: &[Option<Matrix>],
    ) -> Result<RefineGrads> {
        let k = self.rounds.len();
        if grad_probs.len() != k || grad_features.len() != k {
            return Err(Error::Contract(format!("expected {k} per-round gradients")));
        }
        let n = self.mix.len();
        let mut g_c = Matrix::zeros(n, self.classes);
        let mut g_s = Matrix::zeros(n, self.dim);
        let mut clg = vec![None; k];
        let mut slg = vec![None; k];

        for r in (0..k).rev() {
            if let Some(g) = &grad_probs[r] {
                g_c.axpy(1.0, g);
            }
            if let Some(g) = &grad_features[r] {
                g_s.axpy(1.0, g);
            }
            let t = &self.rounds[r];

            // Class stream: out = w ⊙ f_C(..) + (1 − w) ⊙ prev.
            let g_hat = Matrix::from_fn(n, self.classes, |i, j| self.mix[i] * g_c[(i, j)]);
            let mut prev_c = Matrix::from_fn(n, self.classes, |i, j| (1.0 - self.mix[i]) * g_c[(i, j)]);
            let (gl, g_in) = layers.clg[r].backward(&t.clg_cache, &g_hat)?;
            let (g_self, g_agg) = g_in.split_cols(self.classes);
            prev_c.axpy(1.0, &g_self);
            prev_c.axpy(1.0, &t.slg_edges.t_matmul_dense(&g_agg)?);
            clg[r] = Some(gl);
            g_c = prev_c;

            let (gl, g_in) = layers.slg[r].backward(&t.slg_cache, &g_s)?;
            let (g_self, g_agg) = g_in.split_cols(self.dim);
            let mut prev_s = g_self;
            prev_s.axpy(1.0, &t.clg_edges.t_matmul_dense(&g_agg)?);
            slg[r] = Some(gl);
            g_s = prev_s;
        }
        Ok(RefineGrads {
            clg: clg.into_iter().map(Option::unwrap).collect(),
            slg: slg.into_iter().map(Option::unwrap).collect(),
            probs: g_c,
            features: g_s,
        })
    }
}

/// `argmax_c Σ_k P_k[i, c]`; ties go to the lowest class.
pub fn aggregate_pseudo_labels(per_round: &[ProbMatrix]) -> Result<LabelMap> {
    let first = per_round
        .first()
        .ok_or_else(|| Error::Contract("no rounds to aggregate".into()))?;
    let shape = first.matrix().shape();
    let mut sum = Matrix::zeros(shape.0, shape.1);
    for p in per_round {
        if p.matrix().shape() != shape {
            return Err(Error::Dimension("per-round matrices differ in shape".into()));
        }
        sum.axpy(1.0, p.matrix());
    }
    LabelMap::from_classes(&sum.argmax_rows(), shape.1)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::tensor::seeded_rng;

    fn probs(rows: &[Vec<f64>]) -> ProbMatrix {
        ProbMatrix::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn single_confident_class() {
        let p = probs(&[vec![0.99, 0.01], vec![0.97, 0.03]]);
        let t = dynamic_thresholds(&p, 0.95);
        assert_eq!(t.eta, vec![0.95, 0.0]);
    }

    #[test]
    fn four_row_hand_example() {
        let p = probs(&[vec![0.95, 0.05], vec![0.92, 0.08], vec![0.3, 0.7], vec![0.05, 0.95]]);
        let t = dynamic_thresholds(&p, 0.9);
        assert_eq!(t.counts, vec![2, 1]);
        assert_eq!(t.eta, vec![0.9, 0.45]);
    }

    #[test]
    fn uniform_rows_zero_thresholds() {
        let p = probs(&[vec![0.25; 4], vec![0.25; 4]]);
        assert_eq!(dynamic_thresholds(&p, 0.9).eta, vec![0.0; 4]);
    }

    #[test]
    fn alpha_half_makes_branches_equal() {
        let mut rng = seeded_rng(2);
        let rand_probs = |rng: &mut crate::tensor::Rng| {
            let m = Matrix::from_fn(6, 3, |_, _| rng.random::<f64>() + 0.01);
            let m = Matrix::from_fn(6, 3, |i, j| m[(i, j)] / m.row(i).iter().sum::<f64>());
            ProbMatrix::new(m).unwrap()
        };
        let (a, b, g) = (rand_probs(&mut rng), rand_probs(&mut rng), rand_probs(&mut rng));
        let t = dynamic_thresholds(&g, 0.5);
        let out = mix_update(&a, &b, &t, &g, 0.5).unwrap();
        let expect = a.matrix().add(b.matrix()).scale(0.5);
        assert!(out.matrix().max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn alpha_one_all_confident_takes_new() {
        let a = probs(&[vec![0.3, 0.7], vec![0.6, 0.4]]);
        let b = probs(&[vec![0.9, 0.1], vec![0.1, 0.9]]);
        let t = ThresholdState::fixed(2, 0.0);
        let out = mix_update(&a, &b, &t, &b, 1.0).unwrap();
        assert_eq!(out.matrix(), a.matrix());
    }

    #[test]
    fn aggregate_ties_go_low() {
        let a = probs(&[vec![0.6, 0.4], vec![0.2, 0.8]]);
        let b = probs(&[vec![0.4, 0.6], vec![0.8, 0.2]]);
        let l = aggregate_pseudo_labels(&[a.clone(), b]).unwrap();
        assert_eq!(l.raw(), &[0, 0]);
        assert_eq!(aggregate_pseudo_labels(&[a]).unwrap().raw(), &[0, 1]);
        assert!(aggregate_pseudo_labels(&[]).is_err());
    }

    #[test]
    fn zero_rounds_rejected() {
        let cfg = RefineConfig { rounds: 0, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Param(_))));
    }

    #[test]
    fn singleton_block_preserves_positive_features() {
        let f = FeatureMatrix::new(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap()).unwrap();
        let p = probs(&[vec![0.9, 0.1], vec![0.1, 0.9]]);
        let cfg = RefineConfig { k: Neighbors::K(1), ..Default::default() };
        let state = GraphState::initial(f, p, &cfg).unwrap();
        let out = propagate_slg(&state, &MlpParams::identity_averaging(2, Activation::LeakyRelu)).unwrap();
        assert_eq!(out.row(0), &[1.0, 2.0]);
        assert_eq!(out.row(1), &[3.0, -0.01]);
    }

    #[test]
    fn two_clique_is_fixed_point() {
        let f = FeatureMatrix::new(Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap()).unwrap();
        let p = probs(&[vec![0.7, 0.3], vec![0.7, 0.3]]);
        let cfg = RefineConfig { k: Neighbors::K(1), ..Default::default() };
        let state = GraphState::initial(f, p.clone(), &cfg).unwrap();
        let out = propagate_clg(&state, &MlpParams::identity_averaging(2, Activation::SimplexNormalize)).unwrap();
        assert!(out.matrix().max_abs_diff(p.matrix()) < 1e-15);
    }

    #[test]
    fn isolated_graph_refine_is_identity() {
        // Orthogonal features: every semantic edge clamps to zero. Distinct
        // argmax per node: every class block is a singleton.
        let f = FeatureMatrix::new(Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0],
            vec![0.0, 0.0, 0.5],
        ]).unwrap()).unwrap();
        let p = probs(&[vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3], vec![0.1, 0.1, 0.8]]);
        let cfg = RefineConfig { rounds: 1, k: Neighbors::K(2), ..Default::default() };
        let layers = RefineLayers::identity_averaging(1, 3, 3);
        let out = refine(&f, &p, &p, &cfg, &layers).unwrap();
        assert!(out.per_round_probs[0].matrix().max_abs_diff(p.matrix()) < 1e-15);
        assert!(out.per_round_features[0].matrix().max_abs_diff(f.matrix()) < 1e-15);
    }

    #[test]
    fn layer_shape_checked() {
        let f = FeatureMatrix::new(Matrix::from_fn(4, 2, |i, j| (i + j + 1) as f64)).unwrap();
        let p = probs(&vec![vec![0.5, 0.5]; 4]);
        let cfg = RefineConfig { rounds: 1, k: Neighbors::K(1), ..Default::default() };
        let bad = RefineLayers::identity_averaging(1, 3, 2);
        assert!(matches!(refine(&f, &p, &p, &cfg, &bad), Err(Error::Dimension(_))));
        let short = RefineLayers::identity_averaging(1, 2, 2);
        let cfg2 = RefineConfig { rounds: 2, ..cfg };
        assert!(matches!(refine(&f, &p, &p, &cfg2, &short), Err(Error::Contract(_))));
    }
}
