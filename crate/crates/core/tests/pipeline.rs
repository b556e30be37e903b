use xroute_core::embed::ProviderConfig;
use xroute_core::pipeline::{
    evaluate, fleet_adaptors, fleet_pricing, prepare, train_router, PipelineSettings, OPTIMAL_ROW,
    ORACLE_ROW, ZERO_ROUTER_ROW,
};
use xroute_core::routers::{load_router, save_router, Method, Router};
use xroute_core::simx::{canonical_fleet, synthetic_corpus, CANONICAL_TAGS};

fn small_run(seed: u64) -> (xroute_core::pipeline::Prepared, Vec<Router>) {
    let settings = PipelineSettings::default().with_seed(seed);
    let fleet = canonical_fleet(seed);
    let mix: Vec<(&str, usize)> = CANONICAL_TAGS.iter().map(|t| (*t, 40)).collect();
    let queries = synthetic_corpus(&mix, seed);
    let embedder = ProviderConfig::default().build().unwrap();
    let prepared = prepare(
        &queries,
        &fleet_adaptors(&fleet).unwrap(),
        embedder.as_ref(),
        &settings,
    )
    .unwrap();
    let routers = Method::ALL
        .iter()
        .map(|m| {
            train_router(*m, &prepared.dataset, &settings)
                .unwrap()
                .router
        })
        .collect();
    (prepared, routers)
}

#[test]
fn report_covers_every_expert_router_and_baseline() {
    let (prepared, routers) = small_run(42);
    let pricing = fleet_pricing(&canonical_fleet(42)).unwrap();
    let refs: Vec<&Router> = routers.iter().collect();
    let ev = evaluate(
        &refs,
        &prepared.dataset,
        &pricing,
        &PipelineSettings::default(),
    )
    .unwrap();
    let report = &ev.report;

    assert_eq!(prepared.predictions.records.len(), 160 * 7);
    assert_eq!(report.test_queries, 32);
    assert_eq!(report.rows.len(), 7 + 4 + 3);
    for row in &report.rows {
        let m = row.metrics;
        for v in [
            m.total_cost_usd,
            m.mean_throughput,
            m.mean_bertsim,
            m.mean_nll,
        ] {
            assert!(v.is_finite(), "{}: {m:?}", row.name);
        }
    }
    let oracle = report.row(ORACLE_ROW).unwrap().metrics.mean_bertsim;
    for row in &report.rows {
        if row.name != OPTIMAL_ROW {
            assert!(row.metrics.mean_bertsim <= oracle + 1e-12, "{}", row.name);
        }
    }
    assert!(report.row(ZERO_ROUTER_ROW).is_some());
    for (method, per_expert) in &report.counts {
        assert_eq!(per_expert.values().sum::<usize>(), 32, "{method}");
    }
    for (method, decisions) in &ev.decisions {
        assert_eq!(decisions.len(), 32);
        if *method != Method::Random {
            assert!(decisions.iter().all(|d| d.is_self_consistent()));
        }
    }
    let random = report.accuracy["random"];
    assert!((0.0..=1.0).contains(&random));
}

#[test]
fn the_whole_chain_is_deterministic() {
    let pricing = fleet_pricing(&canonical_fleet(42)).unwrap();
    let report = || {
        let (prepared, routers) = small_run(42);
        let refs: Vec<&Router> = routers.iter().collect();
        evaluate(
            &refs,
            &prepared.dataset,
            &pricing,
            &PipelineSettings::default(),
        )
        .unwrap()
        .report
        .to_json()
    };
    assert_eq!(report(), report());
}

#[test]
fn saved_routers_route_like_the_originals() {
    let (prepared, routers) = small_run(7);
    let dir = tempfile::tempdir().unwrap();
    for router in &routers {
        let path = dir.path().join(router.method().as_str());
        save_router(&path, router).unwrap();
        let loaded = load_router(&path).unwrap();
        for t in &prepared.dataset.test {
            let a = router.route(&t.query.id, &t.query.text).unwrap();
            let b = loaded.route(&t.query.id, &t.query.text).unwrap();
            assert_eq!(a.chosen_expert, b.chosen_expert);
            assert_eq!(a.scores, b.scores);
        }
    }
}

#[test]
fn invalid_settings_are_rejected() {
    let settings = PipelineSettings {
        temperature: 0.0,
        ..PipelineSettings::default()
    };
    assert!(settings.validate().is_err());
    let settings = PipelineSettings {
        trials: 0,
        ..PipelineSettings::default()
    };
    assert!(settings.validate().is_err());
}
