use gcmae::checkpoint::{load_trainer, save_trainer};
use gcmae::config::RunConfig;
use gcmae::data::synth_dataset;
use gcmae::eval::auc_binary;
use gcmae::membank::{init_bank, momentum_update};
use gcmae::nn::ParamTree;
use gcmae::patching::NormStats;
use gcmae::tensor::{l2_norm, Matrix};
use gcmae::training::{prepare_tiles, step_objective, zero_gradient_census, Objective, PreparedTile, Trainer};
use gcmae::Execution;
use proptest::prelude::*;

fn small(n: usize) -> (RunConfig, Vec<PreparedTile>, NormStats) {
    let mut cfg = RunConfig::toy();
    cfg.batch_size = 8;
    cfg.negatives = 16;
    cfg.data.n_train = n;
    let data = synth_dataset(&cfg.data, n, 0, 4).unwrap();
    let tiles = prepare_tiles(&data.train, &data.stats, cfg.encoder.patch_size, cfg.target_norm).unwrap();
    (cfg, tiles, data.stats)
}

fn bits(t: &Trainer) -> Vec<u64> {
    let mut v: Vec<u64> = t.model.flatten().iter().map(|x| x.to_bits()).collect();
    if let Some(b) = &t.bank {
        v.extend(b.table.as_slice().iter().map(|x| x.to_bits()));
    }
    v
}

#[test]
fn parallel_and_sequential_are_bit_identical() {
    let (cfg, tiles, _) = small(32);
    let mut par = Trainer::new(cfg.clone(), tiles.len()).unwrap().with_execution(Execution::Parallel);
    let mut seq = Trainer::new(cfg, tiles.len()).unwrap().with_execution(Execution::Sequential);
    par.run_epoch(&tiles, |_| {}).unwrap();
    seq.run_epoch(&tiles, |_| {}).unwrap();
    assert_eq!(bits(&par), bits(&seq));
}

#[test]
fn same_seed_same_trajectory() {
    let (cfg, tiles, _) = small(24);
    let run = || {
        let mut t = Trainer::new(cfg.clone(), tiles.len()).unwrap();
        let mut losses = Vec::new();
        t.run_epoch(&tiles, |r| losses.push(r.total.to_bits())).unwrap();
        (losses, bits(&t))
    };
    assert_eq!(run(), run());
}

#[test]
fn different_seed_different_trajectory() {
    let (mut cfg, tiles, _) = small(24);
    let a = Trainer::new(cfg.clone(), tiles.len()).unwrap();
    cfg.seed += 1;
    let b = Trainer::new(cfg, tiles.len()).unwrap();
    assert_ne!(bits(&a), bits(&b));
}

#[test]
fn resume_matches_uninterrupted() {
    let (cfg, tiles, stats) = small(32);
    let mut straight = Trainer::new(cfg.clone(), tiles.len()).unwrap();
    straight.run_epoch(&tiles, |_| {}).unwrap();
    straight.run_epoch(&tiles, |_| {}).unwrap();

    let mut first = Trainer::new(cfg, tiles.len()).unwrap();
    first.run_epoch(&tiles, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_trainer(dir.path(), &first, &stats).unwrap();
    let (mut resumed, loaded_stats) = load_trainer(dir.path(), tiles.len()).unwrap();
    assert_eq!(loaded_stats, stats);
    assert_eq!(bits(&resumed), bits(&first));
    resumed.run_epoch(&tiles, |_| {}).unwrap();
    assert_eq!(resumed.step, straight.step);
    assert_eq!(bits(&resumed), bits(&straight));
}

#[test]
fn every_parameter_receives_gradient() {
    let (cfg, tiles, _) = small(32);
    let t = Trainer::new(cfg, tiles.len()).unwrap();
    let ids: Vec<usize> = (0..8).collect();
    let batch = t.build_batch(&tiles, &ids).unwrap();
    let out = step_objective(&t.model, &batch, &t.loss_spec(), Execution::default(), true).unwrap();
    let zero = zero_gradient_census(out.grads.as_ref().unwrap());
    assert!(zero.is_empty(), "no gradient reaches {zero:?}");
    assert!(out.l_nce > 0.0 && out.l_mse > 0.0);
}

#[test]
fn mae_objective_has_no_contrastive_term() {
    let (mut cfg, tiles, _) = small(16);
    cfg.objective = Objective::Mae;
    let mut t = Trainer::new(cfg, tiles.len()).unwrap();
    assert!(t.bank.is_none());
    let r = t.train_step(&tiles, &[0, 1, 2, 3]).unwrap();
    assert_eq!(r.l_nce, 0.0);
    assert_eq!(r.total, r.l_mse);
}

#[test]
fn too_many_negatives_is_rejected() {
    let (mut cfg, tiles, _) = small(16);
    cfg.negatives = 9;
    assert!(Trainer::new(cfg, tiles.len()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bank_rows_stay_unit_norm(seed in 0u64..1000, rows in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 6), 1..6)) {
        prop_assume!(rows.iter().all(|r| l2_norm(r) > 1e-3));
        let feats: Vec<Vec<f64>> = rows.iter().map(|r| { let n = l2_norm(r); r.iter().map(|x| x / n).collect() }).collect();
        let mut bank = init_bank(8, 6, seed).unwrap();
        let ids: Vec<usize> = (0..feats.len()).collect();
        if momentum_update(&mut bank, &ids, &Matrix::from_rows(&feats), 1).is_ok() {
            for i in 0..bank.len() {
                prop_assert!((l2_norm(bank.row(i)) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn auc_is_invariant_to_monotone_maps(scores in proptest::collection::vec(-5.0f64..5.0, 2..40), flips in proptest::collection::vec(any::<bool>(), 40)) {
        let mut pos: Vec<bool> = flips[..scores.len()].to_vec();
        pos[0] = true;
        pos[1] = false;
        let a = auc_binary(&scores, &pos).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
        let b = auc_binary(&mapped, &pos).unwrap();
        prop_assert!((0.0..=100.0).contains(&a));
        prop_assert!((a - b).abs() < 1e-12);
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        let c = auc_binary(&negated, &pos).unwrap();
        prop_assert!((a + c - 100.0).abs() < 1e-9);
    }
}
