mod common;

use autoselect::baselines::*;
use autoselect::datasynth::{WindowSpec, PRIMARY_TASK};
use autoselect::error::Error;
use autoselect::metaselect::problem::{finetune_eval, pretrain_eval};
use autoselect::metaselect::toys::{permute_labels, separable_dataset};
use autoselect::metaselect::{sample_rows, Splits, TaskData, TaskWeights};
use autoselect::numcore::{ParamSet, RngStream};
use common::{tiny_dataset, tiny_experiment};

const SEED: u64 = 9;

fn shapes(p: &ParamSet) -> Vec<Vec<usize>> {
    p.tensors().iter().map(|t| t.shape().to_vec()).collect()
}

#[test]
fn zero_epsilon_autoselect_is_pretrain_all() {
    let ds = tiny_dataset();
    let data = prepare(&ds, PRIMARY_TASK, 0, 5, 0.5).unwrap();
    let mut cfg = tiny_experiment();
    cfg.meta.schedule.epsilon = 0.0;
    let auto = run_autoselect(&data, &cfg, SEED).unwrap();
    let all = run_pretrain_all(&data, &cfg, SEED).unwrap();
    assert_eq!(auto.log, all.log);
    assert_eq!(auto.pretrained, all.pretrained);
    assert_eq!(auto.test, all.test);
}

#[test]
fn cotrain_reductions() {
    let ds = tiny_dataset();
    let data = prepare(&ds, PRIMARY_TASK, 1, 5, 0.5).unwrap();
    let base = tiny_experiment();

    let mut aux_only = base.clone();
    aux_only.cotrain.target_weight = 0.0;
    let co = run_cotrain(&data, &aux_only, SEED).unwrap();
    let all = run_pretrain_all(&data, &base, SEED).unwrap();
    assert_eq!(co.pretrained, all.pretrained, "target weight 0 is uniform pretraining");
    assert_eq!(co.decoder, all.decoder);
    assert_eq!(co.test, all.test);

    let mut neither = base.clone();
    neither.cotrain.target_weight = 0.0;
    neither.cotrain.aux_weight = 0.0;
    let co = run_cotrain(&data, &neither, SEED).unwrap();
    let sup = run_supervised(&data, &base, SEED).unwrap();
    assert_eq!(co.pretrained, sup.pretrained, "no co-training stage leaves the init");
    assert_eq!(co.encoder, sup.encoder);
    assert_eq!(co.test, sup.test);

    let mut target_only = base.clone();
    target_only.cotrain.aux_weight = 0.0;
    let co = run_cotrain(&data, &target_only, SEED).unwrap();
    let init = base.factory(ds.n_features).unwrap().init(SEED);
    assert_eq!(co.decoder.as_ref(), Some(&init.decoder), "auxiliary weight 0 never touches the decoder");
    assert_ne!(co.pretrained, init.encoder);
}

#[test]
fn cotrain_loss_is_the_weighted_sum_at_shared_parameters() {
    let ds = tiny_dataset();
    let data = prepare(&ds, PRIMARY_TASK, 0, 5, 1.0).unwrap();
    let cfg = tiny_experiment();
    let co = run_cotrain(&data, &cfg, SEED).unwrap();
    let at0 = |metric: &str| {
        co.dynamics
            .rows
            .iter()
            .find(|r| r.step == 0 && r.split == "cotrain" && r.metric == metric)
            .unwrap()
            .value
    };
    let f = cfg.factory(ds.n_features).unwrap();
    let init = f.init(SEED);
    let p = data.problem();
    let rows = sample_rows(RngStream::new(SEED, "pretrain_batch", 0), &data.splits.pretrain, cfg.meta.batch_size);
    let lambda = TaskWeights::uniform(ds.n_features);
    let lp = pretrain_eval(&p, &init.encoder, &init.decoder, lambda.weights(), &data.rows_batch(&rows, false).unwrap())
        .unwrap()
        .loss;
    let rows = sample_rows(RngStream::new(SEED, "cotrain_batch", 0), &data.splits.train, cfg.meta.batch_size);
    let lc = finetune_eval(&p, &init.encoder, &f.final_head(SEED), &data.rows_batch(&rows, true).unwrap())
        .unwrap()
        .loss;
    assert_eq!(at0("aux_loss"), lp);
    assert_eq!(at0("target_loss"), lc);
    assert!((at0("loss") - (10.0 * lc + lp)).abs() <= 1e-12 * at0("loss"));
}

#[test]
fn ablation_reductions_and_errors() {
    let ds = tiny_dataset();
    let data = prepare(&ds, PRIMARY_TASK, 2, 5, 0.5).unwrap();
    let cfg = tiny_experiment();
    let auto = run_autoselect(&data, &cfg, SEED).unwrap();
    let w = auto.weights.clone().unwrap();
    let top_all = run_ablation(&data, &cfg, &w, AblationMode::Top, ds.n_features, SEED).unwrap();
    let all = run_pretrain_all(&data, &cfg, SEED).unwrap();
    assert_eq!(top_all.log.as_ref().map(|l| l.to_csv()), all.log.as_ref().map(|l| l.to_csv()));
    assert_eq!(top_all.test, all.test);
    let err = run_ablation(&data, &cfg, &w, AblationMode::Down, ds.n_features, SEED).unwrap_err();
    assert!(matches!(err.error, Error::Config(_)));

    let tied = TaskWeights::uniform(ds.n_features);
    assert_eq!(ablation_subset(&tied, AblationMode::Top, 2).unwrap(), vec![0, 1]);
    assert_eq!(ablation_subset(&tied, AblationMode::Down, 2).unwrap(), vec![2]);
}

#[test]
fn transfer_reductions_and_errors() {
    let ds = tiny_dataset();
    let data = prepare(&ds, PRIMARY_TASK, 3, 5, 0.5).unwrap();
    let cfg = tiny_experiment();
    let auto = run_autoselect(&data, &cfg, SEED).unwrap();
    let same = run_transfer(&data, &cfg, &auto, SEED).unwrap();
    assert_eq!(same.test, auto.test, "source == target is autoselect's own finetune");
    assert_eq!(same.weights, auto.weights);

    let mut wide = cfg.clone();
    wide.hidden += 1;
    let other = run_supervised(&data, &wide, SEED).unwrap();
    let err = run_transfer(&data, &cfg, &other, SEED).unwrap_err();
    assert!(matches!(err.error, Error::Config(_)));
}

#[test]
fn every_arm_is_built_by_the_same_factory() {
    let ds = tiny_dataset();
    let data = prepare(&ds, PRIMARY_TASK, 0, 5, 0.5).unwrap();
    let cfg = tiny_experiment();
    let f = cfg.factory(ds.n_features).unwrap();
    let init = f.init(SEED);
    let sup = run_supervised(&data, &cfg, SEED).unwrap();
    assert_eq!(sup.pretrained, init.encoder);
    let auto = run_autoselect(&data, &cfg, SEED).unwrap();
    let w = auto.weights.clone().unwrap();
    let results = vec![
        sup,
        run_pretrain_all(&data, &cfg, SEED).unwrap(),
        run_cotrain(&data, &cfg, SEED).unwrap(),
        run_ablation(&data, &cfg, &w, AblationMode::Top, 1, SEED).unwrap(),
        run_ablation(&data, &cfg, &w, AblationMode::Down, 1, SEED).unwrap(),
        run_transfer(&data, &cfg, &auto, SEED).unwrap(),
        auto,
    ];
    for r in &results {
        assert_eq!(shapes(&r.encoder), shapes(&init.encoder), "{}", r.arm);
        assert_eq!(shapes(&r.pretrained), shapes(&init.encoder), "{}", r.arm);
        assert_eq!(shapes(&r.head), shapes(&init.head), "{}", r.arm);
        if let Some(d) = &r.decoder {
            assert_eq!(shapes(d), shapes(&init.decoder), "{}", r.arm);
        }
    }
}

#[test]
fn fraction_subsets_are_nested_and_other_splits_fixed() {
    let ds = tiny_dataset();
    for fold in 0..5 {
        let parts: Vec<Splits> = [0.1, 0.3, 0.6, 1.0]
            .iter()
            .map(|&f| prepare(&ds, PRIMARY_TASK, fold, 5, f).unwrap().splits)
            .collect();
        for w in parts.windows(2) {
            assert!(w[0].train.iter().all(|r| w[1].train.contains(r)));
            assert!(w[0].train.len() <= w[1].train.len());
            assert_eq!(w[0].pretrain, w[1].pretrain);
            assert_eq!(w[0].meta_val, w[1].meta_val);
            assert_eq!(w[0].stop_val, w[1].stop_val);
            assert_eq!(w[0].test, w[1].test);
        }
        let full = &parts[3];
        assert!(full.test.iter().all(|r| !full.pretrain.contains(r) && !full.meta_val.contains(r)));
        assert!(full.meta_val.iter().all(|r| !full.stop_val.contains(r)));
    }
}

#[test]
fn permuted_labels_give_chance_auc() {
    let mut cfg = tiny_experiment();
    cfg.hidden = 6;
    cfg.finetune.min_steps = 100;
    cfg.finetune.learning_rate = 0.5;
    for seed in 0..20u64 {
        let mut ds = separable_dataset(2600, 3, WindowSpec::new(4, 2, 2), seed).unwrap();
        permute_labels(&mut ds, PRIMARY_TASK, seed).unwrap();
        let rows: Vec<usize> = (0..ds.len()).collect();
        let data = TaskData {
            dataset: &ds,
            task: PRIMARY_TASK.into(),
            splits: Splits {
                pretrain: rows[..500].to_vec(),
                train: rows[..500].to_vec(),
                meta_val: rows[500..550].to_vec(),
                stop_val: rows[550..600].to_vec(),
                test: rows[600..].to_vec(),
            },
        };
        let r = run_supervised(&data, &cfg, seed).unwrap();
        assert!((r.test.auc_roc - 0.5).abs() <= 0.07, "seed {seed}: {}", r.test.auc_roc);
    }
}
