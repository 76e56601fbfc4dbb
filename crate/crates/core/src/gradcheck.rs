//! Central finite-difference checks of every analytic gradient.
//!
//! Each suite draws random configurations, evaluates the analytic gradient
//! and compares it coordinate by coordinate against
//! `(f(x + ε) − f(x − ε)) / 2ε`.

use rand::Rng as _;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{
    clg_weighted_ce, slg_contrastive_loss, supervised_ce, total_loss, total_unsup_loss, LossConfig, PairSampling,
    PrototypeBank, PROB_FLOOR,
};
use crate::nn::{softmax_in_place, Activation, MlpParams};
use crate::refine::{refine_traced, RefineConfig, RefineLayers, StageOrder};
use crate::slg::Neighbors;
use crate::tensor::{child_rng, FeatureMatrix, LabelMap, Matrix, ProbMatrix, Rng, IGNORE};

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Magnitudes below this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, FD_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub configs: usize,
    pub coordinates: usize,
    pub worst_rel_error: f64,
    pub failures: usize,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

struct Tally {
    coordinates: usize,
    worst: f64,
    failures: usize,
}

impl Tally {
    fn new() -> Self {
        Tally {
            coordinates: 0,
            worst: 0.0,
            failures: 0,
        }
    }

    /// Compares `analytic` against central differences of `f` around `x`.
    fn check(&mut self, x: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) {
        assert_eq!(x.len(), analytic.len());
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            probe[i] = x[i] + FD_EPS;
            let up = f(&probe);
            probe[i] = x[i] - FD_EPS;
            let down = f(&probe);
            probe[i] = x[i];
            let err = rel_error(analytic[i], (up - down) / (2.0 * FD_EPS));
            self.coordinates += 1;
            self.worst = self.worst.max(err);
            if err > FD_TOL || !err.is_finite() {
                self.failures += 1;
            }
        }
    }

    fn report(self, name: &str, configs: usize) -> SuiteReport {
        SuiteReport {
            name: name.into(),
            configs,
            coordinates: self.coordinates,
            worst_rel_error: self.worst,
            failures: self.failures,
        }
    }
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn rand_matrix(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| uniform(rng, lo, hi))
}

fn rand_probs(rng: &mut Rng, n: usize, c: usize) -> Matrix {
    let mut m = rand_matrix(rng, n, c, -2.0, 2.0);
    for i in 0..n {
        softmax_in_place(m.row_mut(i));
    }
    m
}

fn rand_labels(rng: &mut Rng, n: usize, c: usize, ignore_rate: f64) -> LabelMap {
    let v = (0..n)
        .map(|_| {
            if rng.random::<f64>() < ignore_rate {
                IGNORE
            } else {
                rng.random_range(0..c) as i64
            }
        })
        .collect();
    LabelMap::new(v, c).expect("labels in range")
}

fn reshape(m: &Matrix, data: &[f64]) -> Matrix {
    Matrix::new(m.rows(), m.cols(), data.to_vec()).expect("same size")
}

fn sum_product(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

/// Pre-activations closer than this to a kink are redrawn.
const KINK_MARGIN: f64 = 1e-3;

fn mlp_suite(activation: Activation, configs: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = child_rng(seed, 0x4d4c_5000 + activation as u64);
    let mut tally = Tally::new();
    let mut done = 0;
    while done < configs {
        let min_out = if matches!(activation, Activation::SoftmaxRows | Activation::SimplexNormalize) {
            2
        } else {
            1
        };
        let (n, din, dout) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(min_out..6));
        let (lo, hi) = if activation == Activation::SimplexNormalize {
            (0.05, 1.0)
        } else {
            (-1.0, 1.0)
        };
        let w = rand_matrix(&mut rng, dout, din, lo, hi);
        let b: Vec<f64> = (0..dout).map(|_| uniform(&mut rng, lo, hi)).collect();
        let x = rand_matrix(&mut rng, n, din, lo.max(-1.0), hi);
        let params = MlpParams::new(w.clone(), b.clone(), activation)?;
        let pre = x.matmul_t(&w)?;
        let near_kink = (0..n).any(|i| (0..dout).any(|j| (pre[(i, j)] + b[j]).abs() < KINK_MARGIN));
        if near_kink && matches!(activation, Activation::LeakyRelu | Activation::SimplexNormalize) {
            continue;
        }
        let u = rand_matrix(&mut rng, n, dout, -1.0, 1.0);
        let (_, cache) = params.forward(&x)?;
        let (grads, gx) = params.backward(&cache, &u)?;
        let objective = |p: &MlpParams, x: &Matrix| sum_product(&p.apply(x).expect("shapes fixed"), &u);

        tally.check(w.as_slice(), grads.weight.as_slice(), |v| {
            let p = MlpParams::new(reshape(&w, v), b.clone(), activation).expect("finite");
            objective(&p, &x)
        });
        tally.check(&b, &grads.bias, |v| {
            let p = MlpParams::new(w.clone(), v.to_vec(), activation).expect("finite");
            objective(&p, &x)
        });
        tally.check(x.as_slice(), gx.as_slice(), |v| objective(&params, &reshape(&x, v)));
        done += 1;
    }
    let name = match activation {
        Activation::LeakyRelu => "mlp_leaky_relu",
        Activation::SoftmaxRows => "mlp_softmax",
        Activation::Identity => "mlp_identity",
        Activation::SimplexNormalize => "mlp_simplex_normalize",
    };
    Ok(tally.report(name, configs))
}

fn supervised_ce_suite(configs: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = child_rng(seed, 0x4345);
    let mut tally = Tally::new();
    for _ in 0..configs {
        let (n, c) = (rng.random_range(1..10), rng.random_range(2..6));
        let p = rand_probs(&mut rng, n, c);
        let labels = rand_labels(&mut rng, n, c, 0.2);
        let out = supervised_ce(&ProbMatrix::new(p.clone())?, &labels)?;
        tally.check(p.as_slice(), out.grad.as_slice(), |v| {
            supervised_ce(&ProbMatrix::from_unchecked(reshape(&p, v)), &labels)
                .expect("shapes fixed")
                .loss
        });
    }
    Ok(tally.report("supervised_ce", configs))
}

fn weighted_ce_suite(dynamic_weight: bool, configs: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = child_rng(seed, 0x5743 + dynamic_weight as u64);
    let mut tally = Tally::new();
    for _ in 0..configs {
        let (n, c, k) = (rng.random_range(1..10), rng.random_range(2..5), rng.random_range(1..4));
        let rounds: Vec<Matrix> = (0..k).map(|_| rand_probs(&mut rng, n, c)).collect();
        let pseudo = rand_labels(&mut rng, n, c, 0.1);
        let probs: Vec<ProbMatrix> = rounds.iter().map(|m| ProbMatrix::new(m.clone())).collect::<Result<_>>()?;
        let out = clg_weighted_ce(&probs, &pseudo, dynamic_weight)?;
        for (r, base) in rounds.iter().enumerate() {
            // The weight is frozen at the unperturbed probability.
            let omega: Vec<f64> = (0..n)
                .map(|i| match pseudo.get(i) {
                    Some(y) if dynamic_weight => base[(i, y)],
                    _ => 1.0,
                })
                .collect();
            let valid = pseudo.valid_count().max(1) as f64;
            tally.check(base.as_slice(), out.grads[r].as_slice(), |v| {
                let m = reshape(base, v);
                let mut total = 0.0;
                for (j, other) in rounds.iter().enumerate() {
                    let cur = if j == r { &m } else { other };
                    for i in 0..n {
                        if let Some(y) = pseudo.get(i) {
                            let w = if j == r {
                                omega[i]
                            } else if dynamic_weight {
                                other[(i, y)]
                            } else {
                                1.0
                            };
                            total -= w * cur[(i, y)].max(PROB_FLOOR).ln() / valid;
                        }
                    }
                }
                total
            });
        }
    }
    let name = if dynamic_weight {
        "clg_weighted_ce"
    } else {
        "clg_ce_unweighted"
    };
    Ok(tally.report(name, configs))
}

fn contrastive_suite(configs: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = child_rng(seed, 0x534c_47);
    let mut tally = Tally::new();
    for _ in 0..configs {
        let (n, m, c) = (rng.random_range(2..10), rng.random_range(2..6), rng.random_range(2..5));
        let x = rand_matrix(&mut rng, n, m, -1.0, 1.0);
        let pseudo = rand_labels(&mut rng, n, c, 0.15);
        let mut bank = PrototypeBank::new(c, m, 0.9);
        bank.protos = rand_matrix(&mut rng, c, m, -1.0, 1.0);
        bank.initialized = (0..c).map(|k| k == 0 || rng.random::<f64>() < 0.8).collect();
        let cfg = LossConfig {
            lambda_balance: uniform(&mut rng, 0.1, 0.9),
            tau: uniform(&mut rng, 0.1, 1.0),
            ..LossConfig::default()
        };
        let out = slg_contrastive_loss(&x, &pseudo, &bank, &cfg, PairSampling::Exhaustive)?;
        tally.check(x.as_slice(), out.grad.as_slice(), |v| {
            slg_contrastive_loss(&reshape(&x, v), &pseudo, &bank, &cfg, PairSampling::Exhaustive)
                .expect("rows stay nonzero")
                .loss
        });
    }
    Ok(tally.report("slg_contrastive", configs))
}

fn total_loss_suite(configs: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = child_rng(seed, 0x544f_54);
    let mut tally = Tally::new();
    for _ in 0..configs {
        let k = rng.random_range(1..4);
        let cfg = LossConfig {
            lambda_slg: uniform(&mut rng, 0.0, 1.0),
            lambda_clg: uniform(&mut rng, 0.0, 1.0),
            lambda_unsup: uniform(&mut rng, 0.0, 2.0),
            ..LossConfig::default()
        };
        let x: Vec<f64> = (0..1 + 2 * k).map(|_| uniform(&mut rng, 0.0, 3.0)).collect();
        let f = |v: &[f64]| {
            let unsup = total_unsup_loss(&v[1..1 + k], &v[1 + k..], &cfg).expect("matched rounds");
            total_loss(v[0], unsup, &cfg)
        };
        let mut analytic = vec![1.0];
        analytic.extend(std::iter::repeat_n(cfg.lambda_unsup * cfg.lambda_slg, k));
        analytic.extend(std::iter::repeat_n(cfg.lambda_unsup * cfg.lambda_clg, k));
        tally.check(&x, &analytic, f);
    }
    Ok(tally.report("total_loss", configs))
}

fn jitter_layer(rng: &mut Rng, layer: &mut MlpParams, scale: f64, bias_lo: f64) {
    for w in layer.weight.as_mut_slice() {
        *w += uniform(rng, -scale, scale);
    }
    for b in &mut layer.bias {
        *b = uniform(rng, bias_lo, bias_lo + scale);
    }
}

fn flatten(layers: &RefineLayers) -> Vec<f64> {
    layers
        .all()
        .flat_map(|l| l.weight.as_slice().iter().chain(&l.bias).copied())
        .collect()
}

fn unflatten(template: &RefineLayers, v: &[f64]) -> RefineLayers {
    let mut out = template.clone();
    let mut at = 0;
    for l in out.all_mut() {
        let nw = l.weight.as_slice().len();
        l.weight.as_mut_slice().copy_from_slice(&v[at..at + nw]);
        at += nw;
        let nb = l.bias.len();
        l.bias.copy_from_slice(&v[at..at + nb]);
        at += nb;
    }
    out
}

/// Gradient of `Σ_k ⟨G_k, P_k⟩ + ⟨H_k, V_k⟩` through the refinement rounds
/// with edges and gate held fixed.
fn refine_suite(configs: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = child_rng(seed, 0x5245_46);
    let mut tally = Tally::new();
    let orders = [StageOrder::ClgFirst, StageOrder::SlgFirst, StageOrder::Simultaneous];
    for cfg_i in 0..configs {
        let (n, c, m, k) = (
            rng.random_range(3..9),
            rng.random_range(2..4),
            rng.random_range(2..5),
            rng.random_range(1..3),
        );
        let probs = rand_probs(&mut rng, n, c);
        let feats = rand_matrix(&mut rng, n, m, 0.1, 1.0);
        let cfg = RefineConfig {
            rounds: k,
            k: Neighbors::K(rng.random_range(1..n)),
            alpha: uniform(&mut rng, 0.0, 1.0),
            sigma: uniform(&mut rng, 0.3, 0.9),
            order: orders[cfg_i % 3],
            ..RefineConfig::default()
        };
        let mut layers = RefineLayers::identity_averaging(k, c, m);
        for l in &mut layers.clg {
            jitter_layer(&mut rng, l, 0.05, 0.0);
        }
        for l in &mut layers.slg {
            jitter_layer(&mut rng, l, 0.05, 0.0);
        }
        let p = ProbMatrix::new(probs.clone())?;
        let (_, trace) = refine_traced(&FeatureMatrix::new(feats.clone())?, &p, &p, &cfg, &layers)?;
        let g: Vec<Matrix> = (0..k).map(|_| rand_matrix(&mut rng, n, c, -1.0, 1.0)).collect();
        let h: Vec<Matrix> = (0..k).map(|_| rand_matrix(&mut rng, n, m, -1.0, 1.0)).collect();
        let objective = |layers: &RefineLayers, p: &Matrix, f: &Matrix| {
            let (ps, fs) = trace.replay(layers, p, f).expect("shapes fixed");
            ps.iter().zip(&g).map(|(a, b)| sum_product(a, b)).sum::<f64>()
                + fs.iter().zip(&h).map(|(a, b)| sum_product(a, b)).sum::<f64>()
        };
        let grads = trace.backward(
            &layers,
            &g.iter().cloned().map(Some).collect::<Vec<_>>(),
            &h.iter().cloned().map(Some).collect::<Vec<_>>(),
        )?;
        let flat_grads: Vec<f64> = grads
            .clg
            .iter()
            .chain(&grads.slg)
            .flat_map(|g| g.weight.as_slice().iter().chain(&g.bias).copied())
            .collect();
        tally.check(&flatten(&layers), &flat_grads, |v| objective(&unflatten(&layers, v), &probs, &feats));
        tally.check(probs.as_slice(), grads.probs.as_slice(), |v| {
            objective(&layers, &reshape(&probs, v), &feats)
        });
        tally.check(feats.as_slice(), grads.features.as_slice(), |v| {
            objective(&layers, &probs, &reshape(&feats, v))
        });
    }
    Ok(tally.report("refine_rounds", configs))
}

/// Runs every suite with `configs` random configurations each.
pub fn run_all(configs: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        mlp_suite(Activation::LeakyRelu, configs, seed)?,
        mlp_suite(Activation::SoftmaxRows, configs, seed)?,
        mlp_suite(Activation::Identity, configs, seed)?,
        mlp_suite(Activation::SimplexNormalize, configs, seed)?,
        supervised_ce_suite(configs, seed)?,
        weighted_ce_suite(true, configs, seed)?,
        weighted_ce_suite(false, configs, seed)?,
        contrastive_suite(configs, seed)?,
        total_loss_suite(configs, seed)?,
        refine_suite(configs, seed)?,
    ])
}
