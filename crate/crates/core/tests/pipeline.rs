use masq_core::mas::ModalityId;
use masq_core::quantizer::BitProfile;
use masq_core::runtime::{
    build_pipeline, evaluate, generate_scenario, Method, PipelineConfig, Scenario, ScenarioConfig,
};

fn small(seed: u64) -> Scenario {
    generate_scenario(&ScenarioConfig {
        d_model: 16,
        depth: 1,
        seed,
        calib_batches: 4,
        calib_tokens: 64,
        eval_sequences: 2,
        eval_tokens: 16,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn sixteen_bit_models_match_the_reference() {
    let sc = small(3);
    let profile = BitProfile::new(16, 16).unwrap();
    for method in Method::ALL {
        // The shared-weight path is only exact once the correction has full rank.
        let cfg = PipelineConfig {
            rank_ratio: if method == Method::MasCmc { 1.0 } else { 0.1 },
            ..Default::default()
        };
        let q = build_pipeline(&sc.dense, &sc.calib, &profile, method, &cfg).unwrap();
        let rep = evaluate(&q, &sc.dense, &sc.eval).unwrap();
        for (m, db) in &rep.output_sqnr_db {
            assert!(*db > 150.0, "{method} {m}: {db} dB");
        }
    }
}

#[test]
fn low_rank_shared_path_is_not_exact_at_sixteen_bits() {
    let sc = small(3);
    let profile = BitProfile::new(16, 16).unwrap();
    let q = build_pipeline(&sc.dense, &sc.calib, &profile, Method::MasCmc, &PipelineConfig::default()).unwrap();
    let rep = evaluate(&q, &sc.dense, &sc.eval).unwrap();
    assert!(rep.output_sqnr_db[&ModalityId::text()] > 150.0);
    assert!(rep.output_sqnr_db[&ModalityId::audio()] < 100.0);
}

#[test]
fn layer_contents_follow_the_method() {
    let sc = small(4);
    let profile = BitProfile::new(4, 8).unwrap();
    let cfg = PipelineConfig::default();
    let text = ModalityId::text();
    let build = |m| build_pipeline(&sc.dense, &sc.calib, &profile, m, &cfg).unwrap();

    for layer in build(Method::Rtn).layers() {
        assert!(layer.corrections.is_empty() && layer.modality_weights.is_empty());
    }
    for layer in build(Method::Mas).layers() {
        assert!(layer.corrections.is_empty());
        let own: Vec<_> = layer.modality_weights.keys().collect();
        assert_eq!(own, [&ModalityId::audio(), &ModalityId::vision()]);
    }
    for layer in build(Method::MasCmc).layers() {
        assert!(layer.modality_weights.is_empty());
        assert!(!layer.corrections.contains_key(&text));
        assert_eq!(layer.corrections.len(), 2);
        assert!(layer.corrections.values().all(|c| c.rank >= 1));
    }
}

#[test]
fn more_bits_never_hurt_rtn() {
    let sc = small(5);
    let cfg = PipelineConfig::default();
    let db = |w, a| {
        let q = build_pipeline(&sc.dense, &sc.calib, &BitProfile::new(w, a).unwrap(), Method::Rtn, &cfg).unwrap();
        evaluate(&q, &sc.dense, &sc.eval).unwrap().output_sqnr_db
    };
    let (low, high) = (db(4, 8), db(8, 8));
    for (m, v) in &low {
        assert!(high[m] > *v, "{m}: W8A8 {} <= W4A8 {v}", high[m]);
    }
}

#[test]
fn builds_are_deterministic() {
    let sc = small(6);
    let profile = BitProfile::new(4, 8).unwrap();
    let cfg = PipelineConfig::default();
    let a = build_pipeline(&sc.dense, &sc.calib, &profile, Method::MasCmc, &cfg).unwrap();
    let b = build_pipeline(&sc.dense, &sc.calib, &profile, Method::MasCmc, &cfg).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(generate_scenario(&sc.config).unwrap(), sc);
}
