//! Training objectives and their analytic gradients.
//!
//! Cross-entropies are negative log-likelihoods averaged over valid pixels.
//! The contrastive loss works on L2-normalized features and reports its
//! gradient wrt the raw (unnormalized) rows.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{child_rng, dot, norm, LabelMap, Matrix, ProbMatrix};

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Balance between the pair term and the prototype term.
    pub lambda_balance: f64,
    /// Prototype softmax temperature.
    pub tau: f64,
    pub lambda_slg: f64,
    pub lambda_clg: f64,
    pub lambda_unsup: f64,
    /// Prototype EMA coefficient on the previous value.
    pub proto_beta: f64,
    /// Weight the new batch prototype by `proto_beta` instead of the old one.
    pub literal_ema: bool,
    /// Cap on ordered pairs in the pair term; `None` is exhaustive.
    pub max_pairs: Option<usize>,
    /// Scale each pixel's class loss by its detached target confidence.
    pub dynamic_weight: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_balance: 0.5,
            tau: 0.1,
            lambda_slg: 0.1,
            lambda_clg: 1.0,
            lambda_unsup: 1.0,
            proto_beta: 0.99,
            literal_ema: false,
            max_pairs: Some(4096),
            dynamic_weight: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Param(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.lambda_balance) {
            return Err(Error::Param(format!("lambda {} outside [0, 1]", self.lambda_balance)));
        }
        if !(0.0..1.0).contains(&self.proto_beta) {
            return Err(Error::Param(format!("beta {} outside [0, 1)", self.proto_beta)));
        }
        for (name, v) in [
            ("lambda_slg", self.lambda_slg),
            ("lambda_clg", self.lambda_clg),
            ("lambda_unsup", self.lambda_unsup),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Param(format!("{name} must be a nonnegative number")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CeOutput {
    pub loss: f64,
    /// Gradient wrt the probabilities.
    pub grad: Matrix,
    /// Targets whose probability was below [`PROB_FLOOR`].
    pub clamped: usize,
}

/// Mean negative log-likelihood of `labels` under `probs`; ignored pixels
/// are masked out.
pub fn supervised_ce(probs: &ProbMatrix, labels: &LabelMap) -> Result<CeOutput> {
    weighted_nll(probs, labels, |_| 1.0)
}

fn weighted_nll(
    probs: &ProbMatrix,
    labels: &LabelMap,
    weight: impl Fn(f64) -> f64,
) -> Result<CeOutput> {
    if probs.n() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} probability rows vs {} labels",
            probs.n(),
            labels.len()
        )));
    }
    if labels.classes() != probs.classes() {
        return Err(Error::Dimension(format!(
            "labels over {} classes vs {} probability columns",
            labels.classes(),
            probs.classes()
        )));
    }
    let valid = labels.valid_count();
    let mut grad = Matrix::zeros(probs.n(), probs.classes());
    if valid == 0 {
        return Ok(CeOutput {
            loss: 0.0,
            grad,
            clamped: 0,
        });
    }
    let scale = 1.0 / valid as f64;
    let mut loss = 0.0;
    let mut clamped = 0;
    for (i, y) in labels.iter().enumerate() {
        let Some(y) = y else { continue };
        let p = probs.row(i)[y];
        let w = weight(p);
        if p < PROB_FLOOR {
            clamped += 1;
            loss -= w * PROB_FLOOR.ln() * scale;
        } else {
            loss -= w * p.ln() * scale;
            grad[(i, y)] = -w * scale / p;
        }
    }
    Ok(CeOutput { loss, grad, clamped })
}

/// Per-class means plus a presence flag per class.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub means: Matrix,
    pub present: Vec<bool>,
}

/// Mean feature row of every labelled class.
pub fn compute_prototypes(features: &Matrix, labels: &LabelMap) -> Result<Prototypes> {
    if features.rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} feature rows vs {} labels",
            features.rows(),
            labels.len()
        )));
    }
    let (c, m) = (labels.classes(), features.cols());
    let mut sums = Matrix::zeros(c, m);
    let mut counts = vec![0usize; c];
    for (i, y) in labels.iter().enumerate() {
        if let Some(y) = y {
            counts[y] += 1;
            sums.row_mut(y)
                .iter_mut()
                .zip(features.row(i))
                .for_each(|(s, v)| *s += v);
        }
    }
    for (k, &cnt) in counts.iter().enumerate() {
        if cnt > 0 {
            sums.row_mut(k).iter_mut().for_each(|v| *v /= cnt as f64);
        }
    }
    Ok(Prototypes {
        means: sums,
        present: counts.iter().map(|&c| c > 0).collect(),
    })
}

/// Slow-moving class centres.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub protos: Matrix,
    pub beta: f64,
    pub initialized: Vec<bool>,
    pub literal_ema: bool,
}

impl PrototypeBank {
    pub fn new(classes: usize, dim: usize, beta: f64) -> Self {
        PrototypeBank {
            protos: Matrix::zeros(classes, dim),
            beta,
            initialized: vec![false; classes],
            literal_ema: false,
        }
    }

    pub fn classes(&self) -> usize {
        self.protos.rows()
    }

    pub fn any_initialized(&self) -> bool {
        self.initialized.iter().any(|&b| b)
    }

    /// Unit-length copy of prototype `c`, or `None` when uninitialized or zero.
    pub fn unit(&self, c: usize) -> Option<Vec<f64>> {
        if !self.initialized[c] {
            return None;
        }
        let p = self.protos.row(c);
        let n = norm(p);
        (n > 0.0).then(|| p.iter().map(|v| v / n).collect())
    }

    /// Blends in the batch means of present classes; the first observation of
    /// a class is taken as is and absent classes are left untouched.
    pub fn ema_update(&mut self, batch: &Prototypes) -> Result<()> {
        if batch.means.shape() != self.protos.shape() {
            return Err(Error::Dimension(format!(
                "batch prototypes {:?} vs bank {:?}",
                batch.means.shape(),
                self.protos.shape()
            )));
        }
        let (old_w, new_w) = if self.literal_ema {
            (1.0 - self.beta, self.beta)
        } else {
            (self.beta, 1.0 - self.beta)
        };
        for c in 0..self.classes() {
            if !batch.present[c] {
                continue;
            }
            let src = batch.means.row(c);
            let dst = self.protos.row_mut(c);
            if self.initialized[c] {
                dst.iter_mut()
                    .zip(src)
                    .for_each(|(p, &b)| *p = old_w * *p + new_w * b);
            } else {
                dst.copy_from_slice(src);
                self.initialized[c] = true;
            }
        }
        Ok(())
    }
}

/// Which ordered pairs enter the pair term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PairSampling {
    Exhaustive,
    /// Exhaustive when the valid pairs fit under `max_pairs`, otherwise that
    /// many uniformly drawn ordered pairs `i ≠ j`.
    Capped { max_pairs: usize, seed: u64 },
}

impl PairSampling {
    pub fn from_config(cfg: &LossConfig, seed: u64) -> Self {
        match cfg.max_pairs {
            None => PairSampling::Exhaustive,
            Some(max_pairs) => PairSampling::Capped { max_pairs, seed },
        }
    }

    fn pairs(&self, valid: &[usize]) -> Vec<(usize, usize)> {
        let n = valid.len();
        let total = n * n.saturating_sub(1);
        match *self {
            PairSampling::Capped { max_pairs, seed } if total > max_pairs => {
                let mut rng = child_rng(seed, 0x5041_4952);
                (0..max_pairs)
                    .map(|_| {
                        let a = rng.random_range(0..n);
                        let mut b = rng.random_range(0..n - 1);
                        if b >= a {
                            b += 1;
                        }
                        (valid[a], valid[b])
                    })
                    .collect()
            }
            _ => valid
                .iter()
                .flat_map(|&i| valid.iter().filter(move |&&j| j != i).map(move |&j| (i, j)))
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub pair_term: f64,
    pub proto_term: f64,
    /// Gradient wrt the raw feature rows.
    pub grad: Matrix,
    /// Rows skipped by the prototype term because their class has no prototype.
    pub skipped: usize,
}

/// `λ · mean_pairs[same (s−1)² + diff s²] − (1−λ) · mean_i log softmax_ỹ(v·p/τ)`,
/// `s = v_i · v_j` on unit-normalized rows.
pub fn slg_contrastive_loss(
    features: &Matrix,
    pseudo: &LabelMap,
    bank: &PrototypeBank,
    cfg: &LossConfig,
    sampling: PairSampling,
) -> Result<ContrastiveOutput> {
    let (n, m) = features.shape();
    if pseudo.len() != n {
        return Err(Error::Dimension(format!("{n} feature rows vs {} labels", pseudo.len())));
    }
    if bank.protos.cols() != m || bank.classes() != pseudo.classes() {
        return Err(Error::Dimension("prototype bank does not match features".into()));
    }
    if !bank.any_initialized() {
        return Err(Error::Contract("prototype bank has no initialized class".into()));
    }

    let mut unit = features.clone();
    let mut norms = vec![0.0; n];
    for (i, nr) in norms.iter_mut().enumerate() {
        let r = unit.row_mut(i);
        *nr = norm(r);
        if *nr == 0.0 {
            return Err(Error::DegenerateFeature { row: i });
        }
        r.iter_mut().for_each(|v| *v /= *nr);
    }

    let lambda = cfg.lambda_balance;
    let mut g_unit = Matrix::zeros(n, m);

    let valid: Vec<usize> = (0..n).filter(|&i| pseudo.get(i).is_some()).collect();
    let pairs = sampling.pairs(&valid);
    let mut pair_term = 0.0;
    if !pairs.is_empty() {
        let c = 1.0 / pairs.len() as f64;
        for &(i, j) in &pairs {
            let s = dot(unit.row(i), unit.row(j));
            let same = pseudo.get(i) == pseudo.get(j);
            let (val, ds) = if same {
                ((s - 1.0).powi(2), 2.0 * (s - 1.0))
            } else {
                (s * s, 2.0 * s)
            };
            pair_term += c * val;
            let k = lambda * c * ds;
            for d in 0..m {
                let (ui, uj) = (unit[(i, d)], unit[(j, d)]);
                g_unit[(i, d)] += k * uj;
                g_unit[(j, d)] += k * ui;
            }
        }
    }

    let protos: Vec<Option<Vec<f64>>> = (0..bank.classes()).map(|c| bank.unit(c)).collect();
    let live: Vec<usize> = (0..protos.len()).filter(|&c| protos[c].is_some()).collect();
    let mut proto_term = 0.0;
    let mut skipped = 0;
    let rows: Vec<(usize, usize)> = valid
        .iter()
        .filter_map(|&i| {
            let y = pseudo.get(i).expect("valid");
            if protos[y].is_some() {
                Some((i, y))
            } else {
                skipped += 1;
                None
            }
        })
        .collect();
    if !rows.is_empty() {
        let c = 1.0 / rows.len() as f64;
        let mut logits = vec![0.0; live.len()];
        for &(i, y) in &rows {
            let v = unit.row(i);
            for (l, &k) in logits.iter_mut().zip(&live) {
                *l = dot(v, protos[k].as_ref().unwrap()) / cfg.tau;
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            let yi = live.iter().position(|&k| k == y).unwrap();
            proto_term -= c * (logits[yi] - lse);
            // d(−log q_y)/dv = (Σ_k q_k p_k − p_y) / τ
            let k = (1.0 - lambda) * c / cfg.tau;
            for (li, &cls) in live.iter().enumerate() {
                let q = (logits[li] - lse).exp();
                let coef = k * (q - if cls == y { 1.0 } else { 0.0 });
                let p = protos[cls].as_ref().unwrap();
                for d in 0..m {
                    g_unit[(i, d)] += coef * p[d];
                }
            }
        }
    }

    // Back through v = x / |x|: dL/dx = (g − (g·v) v) / |x|.
    let mut grad = Matrix::zeros(n, m);
    for i in 0..n {
        let (v, g) = (unit.row(i), g_unit.row(i));
        let gv = dot(g, v);
        for d in 0..m {
            grad[(i, d)] = (g[d] - gv * v[d]) / norms[i];
        }
    }

    Ok(ContrastiveOutput {
        loss: lambda * pair_term + (1.0 - lambda) * proto_term,
        pair_term,
        proto_term,
        grad,
        skipped,
    })
}

#[derive(Clone, Debug)]
pub struct WeightedCeOutput {
    pub per_round: Vec<f64>,
    pub total: f64,
    pub grads: Vec<Matrix>,
    pub clamped: usize,
}

/// Confidence-weighted cross-entropy of every round's class output against
/// the aggregated pseudo-labels. The weight is the round's own probability at
/// the pseudo-label, held constant for the gradient; with `dynamic_weight`
/// off it is 1.
pub fn clg_weighted_ce(
    per_round: &[ProbMatrix],
    pseudo: &LabelMap,
    dynamic_weight: bool,
) -> Result<WeightedCeOutput> {
    if per_round.is_empty() {
        return Err(Error::Contract("no rounds".into()));
    }
    let mut out = WeightedCeOutput {
        per_round: Vec::with_capacity(per_round.len()),
        total: 0.0,
        grads: Vec::with_capacity(per_round.len()),
        clamped: 0,
    };
    for p in per_round {
        let ce = if dynamic_weight {
            weighted_nll(p, pseudo, |w| w)?
        } else {
            weighted_nll(p, pseudo, |_| 1.0)?
        };
        out.total += ce.loss;
        out.per_round.push(ce.loss);
        out.grads.push(ce.grad);
        out.clamped += ce.clamped;
    }
    Ok(out)
}

/// `λ_SLG Σ_k L_SLG^k + λ_CLG Σ_k L_CLG^k`.
pub fn total_unsup_loss(slg: &[f64], clg: &[f64], cfg: &LossConfig) -> Result<f64> {
    if slg.len() != clg.len() {
        return Err(Error::Contract(format!(
            "{} semantic losses vs {} class losses",
            slg.len(),
            clg.len()
        )));
    }
    Ok(cfg.lambda_slg * slg.iter().sum::<f64>() + cfg.lambda_clg * clg.iter().sum::<f64>())
}

pub fn total_loss(sup: f64, unsup: f64, cfg: &LossConfig) -> f64 {
    sup + cfg.lambda_unsup * unsup
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_rng, IGNORE};

    fn probs(rows: &[Vec<f64>]) -> ProbMatrix {
        ProbMatrix::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn ce_one_hot_is_zero() {
        let p = probs(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = LabelMap::new(vec![0, 1], 2).unwrap();
        assert_eq!(supervised_ce(&p, &l).unwrap().loss, 0.0);
    }

    #[test]
    fn ce_uniform_is_ln_c() {
        let p = probs(&vec![vec![0.25; 4]; 3]);
        let l = LabelMap::new(vec![0, 3, 2], 4).unwrap();
        assert!((supervised_ce(&p, &l).unwrap().loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ce_masks_ignore_and_clamps_zero() {
        let p = probs(&[vec![1.0, 0.0], vec![0.5, 0.5]]);
        let l = LabelMap::new(vec![1, IGNORE], 2).unwrap();
        let out = supervised_ce(&p, &l).unwrap();
        assert_eq!(out.clamped, 1);
        assert!((out.loss + PROB_FLOOR.ln()).abs() < 1e-12);
        assert!(out.grad.row(1).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn prototype_means() {
        let f = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, -2.0], vec![3.0, 3.0]]).unwrap();
        let l = LabelMap::new(vec![0, 0, 2], 3).unwrap();
        let p = compute_prototypes(&f, &l).unwrap();
        assert_eq!(p.means.row(0), &[0.0, 0.0]);
        assert_eq!(p.means.row(2), &[3.0, 3.0]);
        assert_eq!(p.present, vec![true, false, true]);
    }

    #[test]
    fn ema_first_observation_and_absent_classes() {
        let mut bank = PrototypeBank::new(2, 2, 0.9);
        let b1 = Prototypes {
            means: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap(),
            present: vec![true, false],
        };
        bank.ema_update(&b1).unwrap();
        assert_eq!(bank.protos.row(0), &[1.0, 0.0]);
        assert_eq!(bank.initialized, vec![true, false]);
        let b2 = Prototypes {
            means: Matrix::from_rows(&[vec![0.0, 1.0], vec![5.0, 5.0]]).unwrap(),
            present: vec![true, true],
        };
        bank.ema_update(&b2).unwrap();
        assert!((bank.protos[(0, 0)] - 0.9).abs() < 1e-15);
        assert!((bank.protos[(0, 1)] - 0.1).abs() < 1e-15);
        assert_eq!(bank.protos.row(1), &[5.0, 5.0]);
    }

    #[test]
    fn ema_beta_zero_copies_batch() {
        let mut bank = PrototypeBank::new(1, 2, 0.0);
        for v in [[1.0, 2.0], [3.0, -1.0]] {
            let b = Prototypes {
                means: Matrix::from_rows(&[v.to_vec()]).unwrap(),
                present: vec![true],
            };
            bank.ema_update(&b).unwrap();
            assert_eq!(bank.protos.row(0), &v);
        }
    }

    #[test]
    fn literal_ema_weights_new_value() {
        let mut bank = PrototypeBank::new(1, 1, 0.99);
        bank.literal_ema = true;
        let mk = |v: f64| Prototypes { means: Matrix::from_rows(&[vec![v]]).unwrap(), present: vec![true] };
        bank.ema_update(&mk(0.0)).unwrap();
        bank.ema_update(&mk(1.0)).unwrap();
        assert!((bank.protos[(0, 0)] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn aligned_single_class_is_zero() {
        let f = Matrix::from_rows(&vec![vec![0.6, 0.8]; 4]).unwrap();
        let l = LabelMap::new(vec![0; 4], 2).unwrap();
        let mut bank = PrototypeBank::new(2, 2, 0.9);
        bank.ema_update(&compute_prototypes(&f, &l).unwrap()).unwrap();
        let out = slg_contrastive_loss(&f, &l, &bank, &LossConfig::default(), PairSampling::Exhaustive).unwrap();
        assert!(out.pair_term.abs() < 1e-15);
        assert!(out.proto_term.abs() < 1e-15);
    }

    #[test]
    fn orthogonal_negatives_cost_nothing() {
        let f = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let l = LabelMap::new(vec![0, 1], 2).unwrap();
        let mut bank = PrototypeBank::new(2, 2, 0.9);
        bank.ema_update(&compute_prototypes(&f, &l).unwrap()).unwrap();
        let out = slg_contrastive_loss(&f, &l, &bank, &LossConfig::default(), PairSampling::Exhaustive).unwrap();
        assert_eq!(out.pair_term, 0.0);
    }

    #[test]
    fn uninitialized_class_rows_skipped() {
        let f = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let l = LabelMap::new(vec![0, 1, 1], 2).unwrap();
        let mut bank = PrototypeBank::new(2, 2, 0.9);
        bank.ema_update(&Prototypes {
            means: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap(),
            present: vec![true, false],
        })
        .unwrap();
        let out = slg_contrastive_loss(&f, &l, &bank, &LossConfig::default(), PairSampling::Exhaustive).unwrap();
        assert_eq!(out.skipped, 2);
    }

    #[test]
    fn empty_bank_is_contract_error() {
        let f = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let l = LabelMap::new(vec![0], 1).unwrap();
        let bank = PrototypeBank::new(1, 2, 0.9);
        let r = slg_contrastive_loss(&f, &l, &bank, &LossConfig::default(), PairSampling::Exhaustive);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn capped_sampling_is_deterministic_and_sized() {
        let valid: Vec<usize> = (0..100).collect();
        let s = PairSampling::Capped { max_pairs: 50, seed: 4 };
        let a = s.pairs(&valid);
        assert_eq!(a.len(), 50);
        assert!(a.iter().all(|(i, j)| i != j));
        assert_eq!(a, s.pairs(&valid));
        let small = PairSampling::Capped { max_pairs: 50, seed: 4 }.pairs(&valid[..5]);
        assert_eq!(small.len(), 20);
    }

    #[test]
    fn weighted_ce_closed_forms() {
        let one_hot = probs(&[vec![0.0, 1.0]]);
        let l = LabelMap::new(vec![1], 2).unwrap();
        assert_eq!(clg_weighted_ce(&[one_hot], &l, true).unwrap().total, 0.0);

        let uni = probs(&vec![vec![0.5, 0.5]; 3]);
        let l = LabelMap::new(vec![0, 1, 0], 2).unwrap();
        let out = clg_weighted_ce(&[uni.clone(), uni], &l, true).unwrap();
        for v in &out.per_round {
            assert!((v - 0.5 * 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn unsup_and_total_assembly() {
        let cfg = LossConfig::default();
        assert_eq!(total_unsup_loss(&[0.0, 0.0], &[0.0, 0.0], &cfg).unwrap(), 0.0);
        let no_slg = LossConfig { lambda_slg: 0.0, ..cfg.clone() };
        assert_eq!(total_unsup_loss(&[5.0, 7.0], &[1.0, 2.0], &no_slg).unwrap(), 3.0);
        assert!(total_unsup_loss(&[1.0], &[1.0, 2.0], &cfg).is_err());
        assert_eq!(total_loss(1.0, 2.0, &cfg), 3.0);
        let sup_only = LossConfig { lambda_unsup: 0.0, ..cfg };
        assert_eq!(total_loss(1.5, 9.0, &sup_only), 1.5);
    }

    #[test]
    fn contrastive_value_matches_double_loop() {
        use rand::Rng;
        let mut rng = seeded_rng(77);
        let (n, m, c) = (16, 5, 3);
        let f = Matrix::from_fn(n, m, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let l = LabelMap::from_classes(&(0..n).map(|_| rng.random_range(0..c)).collect::<Vec<_>>(), c).unwrap();
        let mut bank = PrototypeBank::new(c, m, 0.9);
        bank.ema_update(&Prototypes {
            means: Matrix::from_fn(c, m, |_, _| rng.random::<f64>() - 0.5),
            present: vec![true; c],
        })
        .unwrap();
        let cfg = LossConfig::default();
        let out = slg_contrastive_loss(&f, &l, &bank, &cfg, PairSampling::Exhaustive).unwrap();

        let unit: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let r = f.row(i);
                let nr = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / nr).collect()
            })
            .collect();
        let pu: Vec<Vec<f64>> = (0..c)
            .map(|k| {
                let r = bank.protos.row(k);
                let nr = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / nr).collect()
            })
            .collect();
        let mut pair = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let s: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
                pair += if l.get(i) == l.get(j) { (s - 1.0).powi(2) } else { s * s };
            }
        }
        pair /= (n * (n - 1)) as f64;
        let mut proto = 0.0;
        for i in 0..n {
            let e: Vec<f64> = pu
                .iter()
                .map(|p| (unit[i].iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / cfg.tau).exp())
                .collect();
            proto -= (e[l.get(i).unwrap()] / e.iter().sum::<f64>()).ln();
        }
        proto /= n as f64;
        let expect = 0.5 * pair + 0.5 * proto;
        assert!((out.loss - expect).abs() < 1e-12, "{} vs {expect}", out.loss);
    }
}
