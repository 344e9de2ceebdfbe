use gcshift::csbm::{
    edge_homophily, generate_shifted_pair, generate_target_from_mu, parse_graph, format_graph, sample_mu, CsbmParams,
    ShiftSpec,
};
use gcshift::gnn::{format_model, parse_model};
use gcshift::numerics::RngState;
use gcshift::trainer::{evaluate, shift_estimates, train, train_with_search, Method, TrainConfig};

fn pair(seed: u64, spec: impl Fn(&CsbmParams) -> ShiftSpec) -> (gcshift::csbm::Graph, gcshift::csbm::Graph) {
    let src = CsbmParams {
        signal: 0.65,
        ..CsbmParams::default()
    };
    generate_shifted_pair(&src, &spec(&src), &mut RngState::new(seed)).unwrap()
}

#[test]
fn erm_learns_the_source_and_transfers_without_shift() {
    let (gs, gt) = pair(3, ShiftSpec::identity);
    let report = train(&TrainConfig::default(), &gs, &gt).unwrap();
    assert_eq!(report.history.len(), 200);
    let auc = evaluate(&report.model, &gt).unwrap().auc().unwrap();
    assert!(auc > 0.8, "target AUC {auc}");
}

#[test]
fn training_is_deterministic_per_config_and_graphs() {
    let (gs, gt) = pair(5, |s| ShiftSpec {
        delta: 0.5,
        theta_deg: 30.0,
        ..ShiftSpec::identity(s)
    });
    for method in [Method::Gconda, Method::Cmd] {
        let cfg = TrainConfig {
            epochs: 40,
            warmup_epochs: 5,
            seed: 9,
            ..TrainConfig::for_method(method)
        };
        assert_eq!(train(&cfg, &gs, &gt).unwrap(), train(&cfg, &gs, &gt).unwrap());
    }
}

#[test]
fn warmup_epochs_match_erm_exactly() {
    let (gs, gt) = pair(6, |s| ShiftSpec {
        ratio_target: 1.0,
        ..ShiftSpec::identity(s)
    });
    let erm = train(&TrainConfig { epochs: 10, seed: 2, ..TrainConfig::default() }, &gs, &gt).unwrap();
    let gconda = train(
        &TrainConfig {
            epochs: 12,
            warmup_epochs: 10,
            seed: 2,
            ..TrainConfig::for_method(Method::Gconda)
        },
        &gs,
        &gt,
    )
    .unwrap();
    for (a, b) in erm.history.iter().zip(&gconda.history) {
        assert_eq!(a.source_ce.to_bits(), b.source_ce.to_bits());
        assert_eq!(a.val_auc.to_bits(), b.val_auc.to_bits());
    }
    assert!(gconda.best_epoch >= 10);
    let bad = TrainConfig {
        epochs: 10,
        warmup_epochs: 10,
        ..TrainConfig::for_method(Method::Gconda)
    };
    assert!(train(&bad, &gs, &gt).is_err());
}

#[test]
fn gconda_lowers_the_transport_cost_in_most_seeds() {
    let mut lower = 0;
    let seeds = 10;
    for seed in 0..seeds {
        let (gs, gt) = pair(100 + seed, |s| ShiftSpec {
            delta: 0.5,
            theta_deg: 30.0,
            ..ShiftSpec::identity(s)
        });
        let cfg = TrainConfig {
            epochs: 80,
            seed,
            ..TrainConfig::for_method(Method::Gconda)
        };
        let r = train(&cfg, &gs, &gt).unwrap();
        let first = r.history[0].discrepancy.unwrap();
        let last = r.history.last().unwrap().discrepancy.unwrap();
        assert!(r.history.iter().all(|h| h.discrepancy.unwrap() >= 0.0));
        if last < first {
            lower += 1;
        }
    }
    assert!(lower * 10 >= seeds * 8, "{lower}/{seeds}");
}

#[test]
fn search_picks_a_grid_member_and_estimates_are_finite() {
    let (gs, gt) = pair(8, |s| ShiftSpec {
        ratio_target: 2.0,
        ..ShiftSpec::identity(s)
    });
    let base = TrainConfig {
        epochs: 30,
        warmup_epochs: 5,
        ..TrainConfig::for_method(Method::GcondaPp)
    };
    let (cfg, report) = train_with_search(&base, &gs, &gt).unwrap();
    assert!([0.01, 0.1, 1.0].contains(&cfg.alpha) && [0.01, 0.1, 1.0].contains(&cfg.beta));
    let (w1, cmd) = shift_estimates(&report.model, &gs, &gt, 5).unwrap();
    assert!(w1.is_finite() && w1 >= 0.0 && cmd.is_finite() && cmd >= 0.0);
}

#[test]
fn graph_and_model_files_round_trip() {
    let (gs, _) = pair(1, ShiftSpec::identity);
    let back = parse_graph(&format_graph(&gs), "mem").unwrap();
    assert_eq!(back, gs);
    let r = train(&TrainConfig { epochs: 5, ..TrainConfig::default() }, &gs, &gs).unwrap();
    let m = parse_model(&format_model(&r.model), "mem").unwrap();
    assert_eq!(m, r.model);
}

#[test]
fn shared_mu_targets_follow_the_requested_structure() {
    let src = CsbmParams {
        n: 1000,
        d: 16,
        ..CsbmParams::default()
    };
    let mut rng = RngState::new(4);
    let mu = sample_mu(&src, &mut rng);
    for r in [0.2, 1.0, 5.0] {
        let spec = ShiftSpec {
            ratio_target: r,
            ..ShiftSpec::identity(&src)
        };
        let g = generate_target_from_mu(&src, &mu, &spec, &mut rng).unwrap();
        assert_eq!(g.mu, mu);
        let h = edge_homophily(&g).unwrap();
        assert!((h - r / (1.0 + r)).abs() < 0.05, "r={r} h={h}");
    }
}
