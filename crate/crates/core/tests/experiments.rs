mod common;

use wdlab::experiments::{
    avg_inverse_stable_rank, gf_merge_experiment, merge_experiment, rank_sweep, rank_sweep_csv, spearman,
    GfMergeConfig, MergeControl, MergeExperimentConfig, RankSweepConfig,
};
use wdlab::linalg::Matrix;
use wdlab::model::{Activation, Params};
use wdlab::optimize::Init;

#[test]
fn spearman_matches_oracle() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0, 5.0];
    let y = [0.3, 0.1, 0.9, 0.9, 2.0, 1.5];
    let want = common::spearman(&x, &y);
    assert!((spearman(&x, &y).unwrap() - want).abs() < 1e-15);
    assert_eq!(spearman(&x, &x.map(|v| -v)), Some(-1.0));
    assert_eq!(spearman(&x, &[1.0; 6]), None);
}

#[test]
fn avg_inverse_stable_rank_of_known_layers() {
    let p = Params {
        weights: vec![Matrix::identity(4), Matrix::outer(&[1.0, 1.0, 0.0, 2.0], &[3.0, 1.0, 0.0, 1.0])],
        head: vec![1.0; 4],
    };
    // Layers contribute 1/2, 1 and 1 for the head.
    assert!((avg_inverse_stable_rank(&p).unwrap() - 2.5 / 3.0).abs() < 1e-12);
}

fn small_sweep() -> RankSweepConfig {
    RankSweepConfig {
        d: 6,
        n: 40,
        widths: vec![4, 4],
        activation: Activation::Relu,
        label_freq: 1.0,
        epochs: 20,
        batch_size: 8,
        eta: 0.1,
        init: Init::Xavier,
        lambdas: vec![1e-3, 1e-2],
        seeds: vec![0, 1],
    }
}

#[test]
fn rank_sweep_output_is_independent_of_worker_count() {
    let cfg = small_sweep();
    let one = rank_sweep(&cfg, 1).unwrap();
    let four = rank_sweep(&cfg, 4).unwrap();
    assert_eq!(one, four);
    assert_eq!(one.len(), 4);
    let csv = rank_sweep_csv(&one).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("lambda,seed,"));
}

#[test]
fn rank_sweep_rejects_empty_grids() {
    let cfg = RankSweepConfig {
        lambdas: vec![],
        ..small_sweep()
    };
    assert!(rank_sweep(&cfg, 1).is_err());
}

fn small_merge() -> MergeExperimentConfig {
    MergeExperimentConfig {
        d: 10,
        split: 5,
        n: 20,
        heldout: 50,
        width: 8,
        steps: 600,
        checkpoint_every: 50,
        fit_window: 500,
        ..MergeExperimentConfig::default()
    }
}

#[test]
fn orthogonal_merge_with_zero_intruder_is_exact() {
    let o = merge_experiment(&MergeExperimentConfig {
        zero_init_other: true,
        ..small_merge()
    })
    .unwrap();
    assert_eq!(o.eps, 0.0);
    assert_eq!(o.max_gap_a, 0.0);
    // Model a starts from a nonzero init, so it does intrude on task b.
    assert!(o.max_gap_b > 0.0);
    assert!(o.lemma4_min_slack.unwrap() >= -1e-12);
    assert!(o.rows.iter().all(|r| r.gap_a() == 0.0));
}

#[test]
fn intruder_init_contribution_decays_at_the_weight_decay_rate() {
    let o = merge_experiment(&small_merge()).unwrap();
    let slope = o.decay_slope.unwrap();
    assert!((slope / o.expected_slope - 1.0).abs() < 1e-6, "{slope} vs {}", o.expected_slope);
    assert!(o.lemma4_min_slack.unwrap() >= -1e-9);
    assert!(o.loss_transfer_min_slack >= -1e-12);
}

#[test]
fn same_data_control_has_overlapping_tasks() {
    let o = merge_experiment(&MergeExperimentConfig {
        control: MergeControl::SameData,
        ..small_merge()
    })
    .unwrap();
    assert!(o.eps > 0.9);
    assert!(o.lemma4_min_slack.is_some());
}

#[test]
fn gf_merge_bound_holds_on_a_short_flow() {
    let o = gf_merge_experiment(&GfMergeConfig {
        horizon: 1.0,
        ..GfMergeConfig::default()
    })
    .unwrap();
    assert_eq!(o.eps, 0.0);
    assert!(o.min_gap_slack >= 0.0);
    assert!(o.min_end_to_end_slack >= 0.0);
}
