use mllc_core::losses::{clg_weighted_ce, slg_contrastive_loss, supervised_ce, LossConfig, PairSampling};
use mllc_core::refine::refine;
use mllc_core::synth::{generate, strong_augment, weak_augment, AugmentParams, SynthBatch, SynthDataset, SynthSpec};
use mllc_core::tensor::child_rng;
use mllc_core::train::{train, train_step, TrainConfig, TrainMode, TrainRecord, TrainState};

fn small_data(seed: u64) -> SynthDataset {
    generate(&SynthSpec {
        train_images: 12,
        val_images: 3,
        labeled_fraction: 0.25,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        warmup_epochs: 0,
        ..TrainConfig::default()
    }
}

fn split(ds: &SynthDataset, n: usize) -> (Vec<&SynthBatch>, Vec<&SynthBatch>) {
    (ds.labeled().take(n).collect(), ds.unlabeled().take(n).collect())
}

#[test]
fn zero_unsup_weight_matches_supervised_only() {
    let ds = small_data(3);
    let mut a = small_cfg();
    a.loss.lambda_unsup = 0.0;
    let b = TrainConfig {
        mode: TrainMode::SupervisedOnly,
        ..small_cfg()
    };
    let ra = train(&ds, &a, |_| {}).unwrap();
    let rb = train(&ds, &b, |_| {}).unwrap();
    assert_eq!(ra.state.student, rb.state.student);
    assert_eq!(ra.state.teacher.shadow, rb.state.teacher.shadow);
    assert_eq!(ra.final_eval.miou, rb.final_eval.miou);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let ds = small_data(1);
    let cfg = TrainConfig {
        base_lr: 0.0,
        ..small_cfg()
    };
    let mut state = TrainState::new(&ds, &cfg, 10).unwrap();
    let before = state.student.clone();
    let (l, u) = split(&ds, 2);
    for _ in 0..3 {
        train_step(&mut state, &l, &u, &cfg, ds.spec.cluster_width, 0).unwrap();
    }
    // Compare values only; every update bumps the layer version.
    for (a, b) in state.student.layers().iter().zip(before.layers()) {
        assert_eq!(a.weight, b.weight);
        assert_eq!(a.bias, b.bias);
    }
    for (t, b) in state.teacher.shadow.iter().zip(before.layers()) {
        assert!(t.weight.max_abs_diff(&b.weight) <= 1e-15);
    }
}

/// Rebuilds the reported objective from the public loss functions.
#[test]
fn step_loss_is_the_weighted_sum_of_its_terms() {
    let ds = small_data(5);
    let mut cfg = small_cfg();
    cfg.augment = AugmentParams::none();
    cfg.loss.max_pairs = None;
    cfg.loss.lambda_unsup = 0.7;
    cfg.loss.lambda_slg = 0.3;
    cfg.loss.lambda_clg = 1.4;
    let mut state = TrainState::new(&ds, &cfg, 10).unwrap();
    let (l, u) = split(&ds, 2);
    let width = ds.spec.cluster_width;
    // First step fills the prototype banks so the contrastive term is live.
    train_step(&mut state, &l, &u, &cfg, width, 0).unwrap();
    assert!(state.banks.iter().all(|b| b.any_initialized()));

    let teacher = state.teacher_model();
    let student = state.student.clone();
    let banks = state.banks.clone();
    let rec = train_step(&mut state, &l, &u, &cfg, width, 0).unwrap();

    let sup: f64 = l
        .iter()
        .map(|b| supervised_ce(&student.heads(&b.images).unwrap().0, &b.gt).unwrap().loss)
        .sum::<f64>()
        / l.len() as f64;
    let rounds = cfg.refine.rounds;
    let (mut slg, mut clg) = (vec![0.0; rounds], vec![0.0; rounds]);
    for b in &u {
        let (pt, ft, _) = teacher.heads(&b.images).unwrap();
        let pseudo = refine(&ft, &pt, &pt, &cfg.refine, &teacher.refine).unwrap().pseudo_labels();
        let (ps, fs, _) = student.heads(&b.images).unwrap();
        let out = refine(&fs, &ps, &ps, &cfg.refine, &student.refine).unwrap();
        let w = clg_weighted_ce(&out.per_round_probs, &pseudo, true).unwrap();
        for k in 0..rounds {
            clg[k] += w.per_round[k] / u.len() as f64;
            let c = slg_contrastive_loss(out.per_round_features[k].matrix(), &pseudo, &banks[k], &cfg.loss, PairSampling::Exhaustive)
                .unwrap();
            slg[k] += c.loss / u.len() as f64;
        }
    }
    let slg_sum: f64 = slg.iter().sum();
    let clg_sum: f64 = clg.iter().sum();
    let expected = sup + 0.7 * (0.3 * slg_sum + 1.4 * clg_sum);
    assert!((rec.sup_loss - sup).abs() <= 1e-12, "{} vs {sup}", rec.sup_loss);
    assert!((rec.slg_loss - slg_sum).abs() <= 1e-12);
    assert!((rec.clg_loss - clg_sum).abs() <= 1e-12);
    assert!((rec.total_loss - expected).abs() <= 1e-12, "{} vs {expected}", rec.total_loss);
    assert!(slg_sum > 0.0 && clg_sum > 0.0);
}

#[test]
fn warmup_skips_unlabelled_losses() {
    let ds = small_data(2);
    let cfg = TrainConfig {
        warmup_epochs: 1,
        ..small_cfg()
    };
    let mut state = TrainState::new(&ds, &cfg, 10).unwrap();
    let (l, u) = split(&ds, 2);
    let rec = train_step(&mut state, &l, &u, &cfg, ds.spec.cluster_width, 0).unwrap();
    assert_eq!(rec.unsup_loss, 0.0);
    assert_eq!(rec.pseudo_pixels, 0);
    assert_eq!(rec.total_loss, rec.sup_loss);
    let rec = train_step(&mut state, &l, &u, &cfg, ds.spec.cluster_width, 1).unwrap();
    assert!(rec.unsup_loss > 0.0);
}

#[test]
fn full_run_is_deterministic() {
    let ds = small_data(4);
    for mode in [TrainMode::Mllc, TrainMode::SelfTraining] {
        let cfg = TrainConfig { mode, ..small_cfg() };
        let a = train(&ds, &cfg, |_| {}).unwrap();
        let b = train(&ds, &cfg, |_| {}).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.state.student, b.state.student);
        let steps = a.records.iter().filter(|r| matches!(r, TrainRecord::Step(_))).count();
        assert_eq!(steps, a.timing.len());
    }
}

#[test]
fn strong_view_moves_inputs_further_than_weak() {
    let ds = small_data(6);
    let params = AugmentParams::default();
    let (mut weak, mut strong) = (0.0, 0.0);
    for seed in 0..20 {
        let b = &ds.train[seed as usize % ds.train.len()];
        let w = weak_augment(b, &params, ds.spec.cluster_width, &mut child_rng(seed, 1));
        let s = strong_augment(b, &params, ds.spec.cluster_width, &mut child_rng(seed, 1));
        weak += w.images.max_abs_diff(&b.images);
        strong += s.images.max_abs_diff(&b.images);
        assert_eq!(s.gt.len(), b.gt.len());
    }
    assert!(strong > weak, "strong {strong} weak {weak}");
}

#[test]
fn loss_config_defaults_validate() {
    LossConfig::default().validate().unwrap();
    small_cfg().validate().unwrap();
}
