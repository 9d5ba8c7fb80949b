use std::sync::Arc;

use teeslice::model::{
    Graph, LinearKind, Model, Site, SiteKind, TransformerConfig, TuningConfig, TuningMode,
};
use teeslice::partition::{
    audit_taint, build_plan, secure_forward, simulate_cost, Channel, ClassWeights, CostModel,
    DomainTensor, EventKind, Fault, FaultKind, MaskConfig, Method, TrustDomain, Workload,
};
use teeslice::tensor::{rel_err, Pass, Precision, Rng, Tensor};
use teeslice::Error;

fn config() -> TransformerConfig {
    TransformerConfig {
        n_layers: 3,
        ..TransformerConfig::default()
    }
}

fn channel(method: Method, seed: u64) -> Channel {
    let plan = build_plan(&config(), method, Some(2)).unwrap();
    Channel::new(
        Arc::new(plan),
        1,
        Rng::new(seed, 100),
        MaskConfig::default(),
    )
}

fn embedded(model: &Model, rng: &mut Rng) -> Tensor {
    let tokens: Vec<usize> = (0..8).map(|_| rng.below(model.config.vocab)).collect();
    let mut g = Graph::local(Precision::Exact);
    let x = model.embed(&mut g, &tokens).unwrap();
    g.value(x).clone()
}

fn plain_logits(model: &Model, x: &Tensor, precision: Precision) -> Tensor {
    let mut g = Graph::local(precision);
    let v = g.input(Site::global(SiteKind::Embed), x.clone()).unwrap();
    let h = model
        .forward_layers(&mut g, v, 0..model.config.n_layers)
        .unwrap();
    let l = model.classify(&mut g, h).unwrap();
    g.value(l).clone()
}

fn lora_model(seed: u64) -> Model {
    let mut m = Model::init(&config(), &TuningConfig::default(), seed).unwrap();
    // Nonzero adapters so the adapter path matters.
    let mut rng = Rng::new(seed, 9);
    for (_, p) in m.trainable_mut() {
        *p = rng.normal_tensor(p.shape(), 0.2);
    }
    m
}

#[test]
fn method1_keeps_softmax_and_norms_trusted() {
    let plan = build_plan(&config(), Method::Method1, None).unwrap();
    for site in plan.sites_in(TrustDomain::Untrusted) {
        assert!(
            matches!(site.kind, SiteKind::Product(_) | SiteKind::Scores),
            "{site} outsourced"
        );
    }
    for l in 0..3 {
        for k in [
            SiteKind::Softmax,
            SiteKind::Ln1,
            SiteKind::Ln2,
            SiteKind::Gelu,
        ] {
            assert_eq!(plan.domain(Some(Site::layer(l, k))), TrustDomain::Trusted);
        }
        for k in LinearKind::ALL {
            assert_eq!(
                plan.domain(Some(Site::layer(l, SiteKind::Lora(k)))),
                TrustDomain::Trusted
            );
        }
    }
}

#[test]
fn method2_splits_by_layer() {
    let c = TransformerConfig::default();
    let plan = build_plan(&c, Method::Method2, Some(4)).unwrap();
    for l in 0..6 {
        let want = if l < 4 {
            TrustDomain::Untrusted
        } else {
            TrustDomain::Trusted
        };
        for k in SiteKind::per_layer() {
            assert_eq!(plan.domain(Some(Site::layer(l, k))), want);
        }
    }
    assert_eq!(
        plan.domain(Some(Site::global(SiteKind::Head))),
        TrustDomain::Trusted
    );
    assert!(build_plan(&c, Method::Method2, Some(6)).is_err());
    assert!(build_plan(&c, Method::Method2, None).is_err());
}

#[test]
fn plaintext_and_shielded_plans_are_uniform() {
    let c = TransformerConfig::default();
    let fl = build_plan(&c, Method::FlLlm, None).unwrap();
    assert_eq!(fl.sites_in(TrustDomain::Trusted).count(), 0);
    let sw = build_plan(&c, Method::Swmt, None).unwrap();
    assert_eq!(sw.sites_in(TrustDomain::Untrusted).count(), 0);
}

#[test]
fn secure_forward_is_transparent_and_clean() {
    let model = lora_model(1);
    let mut rng = Rng::new(2, 0);
    let mut ch = channel(Method::Method1, 3);
    for _ in 0..20 {
        let x = embedded(&model, &mut rng);
        let got = secure_forward(
            &mut ch,
            &model,
            &DomainTensor::trusted(x.clone()),
            Precision::Exact,
        )
        .unwrap();
        let want = plain_logits(&model, &x, Precision::Exact);
        assert!(
            rel_err(&got.inner, &want) < 1e-6,
            "{}",
            rel_err(&got.inner, &want)
        );
    }
    let audit = audit_taint(ch.trace(), ch.ledger().summary());
    assert!(audit.passed, "{:?}", audit.violations);
    assert_eq!(audit.plaintext_sightings, 0);
    assert_eq!(audit.pads.reused, 0);
    assert_eq!(audit.pads.unused, 0);
}

#[test]
fn half_precision_deviates_more_but_boundedly() {
    let model = lora_model(4);
    let mut rng = Rng::new(5, 0);
    let (mut exact_dev, mut half_dev) = (0.0f64, 0.0f64);
    for i in 0..10 {
        let x = embedded(&model, &mut rng);
        let want = plain_logits(&model, &x, Precision::Exact);
        for (p, dev) in [
            (Precision::Exact, &mut exact_dev),
            (Precision::SimHalf, &mut half_dev),
        ] {
            let mut ch = channel(Method::Method1, 10 + i);
            let got =
                secure_forward(&mut ch, &model, &DomainTensor::trusted(x.clone()), p).unwrap();
            *dev = dev.max(rel_err(&got.inner, &want));
        }
    }
    assert!(half_dev > exact_dev, "{half_dev} vs {exact_dev}");
    assert!(half_dev < 0.1, "{half_dev}");
}

#[test]
fn crossings_are_two_per_outsourced_product() {
    let model = lora_model(6);
    let mut ch = channel(Method::Method1, 7);
    let x = embedded(&model, &mut Rng::new(8, 0));
    secure_forward(&mut ch, &model, &DomainTensor::trusted(x), Precision::Exact).unwrap();
    // Four frozen linears and the score product per layer.
    let outsourced_per_layer = 5;
    assert_eq!(ch.trace().crossings(), 2 * outsourced_per_layer * 3);

    let mut again = channel(Method::Method1, 99);
    let x = embedded(&model, &mut Rng::new(8, 0));
    secure_forward(
        &mut again,
        &model,
        &DomainTensor::trusted(x),
        Precision::Exact,
    )
    .unwrap();
    assert_eq!(again.trace().crossings(), ch.trace().crossings());
}

#[test]
fn secure_gradients_match_plaintext() {
    let model = lora_model(11);
    let tokens = [3, 1, 4, 1, 5, 9, 2, 6];
    let grads = |ch: Option<&mut Channel>| {
        let run = |mut g: Graph<_>| {
            let l = model.forward(&mut g, &tokens).unwrap();
            let l = model.loss(&mut g, l, 2).unwrap();
            g.backward(l).unwrap();
            g.param_grads().unwrap()
        };
        match ch {
            Some(ch) => run(Graph::new(
                Precision::Exact,
                ch as &mut dyn teeslice::tensor::Router,
                None,
            )),
            None => run(Graph::new(
                Precision::Exact,
                &mut teeslice::tensor::LocalRouter as &mut dyn teeslice::tensor::Router,
                None,
            )),
        }
    };
    let mut ch = channel(Method::Method1, 12);
    let secure = grads(Some(&mut ch));
    let plain = grads(None);
    assert_eq!(secure.len(), plain.len());
    for (k, g) in &plain {
        let d = teeslice::tensor::max_abs_diff(g, &secure[k]);
        assert!(d < 1e-5, "{k}: {d}");
    }
    // Backward products were outsourced too, all masked.
    let masked_backward = ch
        .trace()
        .total(|e| {
            matches!(
                e,
                EventKind::Crossing {
                    pass: Pass::Backward,
                    ..
                }
            )
        })
        .count;
    assert!(masked_backward > 0);
    assert!(audit_taint(ch.trace(), ch.ledger().summary()).passed);
}

#[test]
fn plaintext_mode_is_flagged() {
    let model = lora_model(13);
    let mut ch = channel(Method::FlLlm, 14);
    let x = embedded(&model, &mut Rng::new(15, 0));
    let err = secure_forward(&mut ch, &model, &DomainTensor::trusted(x), Precision::Exact);
    assert!(matches!(err, Err(Error::SecurityBreach { .. })));
    let audit = audit_taint(ch.trace(), ch.ledger().summary());
    assert!(!audit.passed);
    assert!(audit.plaintext_sightings > 0);
    assert_eq!(audit.crossings, 0);
}

#[test]
fn shielded_and_split_runs_pass_audit() {
    let model = lora_model(16);
    for m in [Method::Swmt, Method::Method2] {
        let mut ch = channel(m, 17);
        let x = embedded(&model, &mut Rng::new(18, 0));
        secure_forward(&mut ch, &model, &DomainTensor::trusted(x), Precision::Exact).unwrap();
        let audit = audit_taint(ch.trace(), ch.ledger().summary());
        assert!(audit.passed, "{m}: {:?}", audit.violations);
        if m == Method::Swmt {
            assert!(audit.untrusted_sites.is_empty());
        } else {
            assert!(audit.owner_local_ops > 0);
        }
    }
}

#[test]
fn skipped_mask_is_exactly_one_violation_at_its_site() {
    let model = lora_model(19);
    let site = Site::layer(1, SiteKind::Product(LinearKind::Fc1));
    let fault = Fault {
        kind: FaultKind::SkipMask,
        site,
        pass: Pass::Forward,
        occurrence: 1,
    };
    let mut ch = channel(Method::Method1, 20).with_fault(fault);
    let x = embedded(&model, &mut Rng::new(21, 0));
    let err = secure_forward(&mut ch, &model, &DomainTensor::trusted(x), Precision::Exact);
    assert!(matches!(err, Err(Error::SecurityBreach { .. })));
    let audit = audit_taint(ch.trace(), ch.ledger().summary());
    assert_eq!(audit.plaintext_sightings, 1);
    assert_eq!(audit.violations.len(), 1);
    assert_eq!(audit.violations[0].site, Some(site));
}

#[test]
fn reused_pad_is_refused() {
    let model = lora_model(22);
    let fault = Fault {
        kind: FaultKind::ReusePad,
        site: Site::layer(0, SiteKind::Scores),
        pass: Pass::Forward,
        occurrence: 1,
    };
    let mut ch = channel(Method::Method1, 23).with_fault(fault);
    let x = embedded(&model, &mut Rng::new(24, 0));
    let err = secure_forward(&mut ch, &model, &DomainTensor::trusted(x), Precision::Exact);
    assert!(matches!(err, Err(Error::MaskReuse { .. })), "{err:?}");
    assert_eq!(ch.ledger().summary().reused, 1);
}

#[test]
fn default_costs_follow_method_ordering() {
    let c = TransformerConfig::default();
    let cost = |m: Method, w: &Workload| {
        let plan = build_plan(&c, m, Some(4)).unwrap();
        simulate_cost(&plan, w, &CostModel::default())
            .unwrap()
            .total
    };
    for w in [
        Workload::default(),
        Workload {
            examples: 40,
            ..Workload::default()
        },
        Workload {
            seq_len: 16,
            ..Workload::default()
        },
        Workload {
            train: false,
            ..Workload::default()
        },
    ] {
        let [fl, m2, m1, sw] = Method::ALL.map(|m| cost(m, &w));
        assert!(fl < m2 && m2 < m1 && m1 < sw, "{fl} {m2} {m1} {sw}");
    }
}

#[test]
fn degenerate_weights_price_all_plans_equally() {
    let c = TransformerConfig::default();
    let flat = CostModel {
        trusted: ClassWeights::uniform(1.0),
        untrusted: ClassWeights::uniform(1.0),
        crossing: 0.0,
        masked_byte: 0.0,
        mask_flop: 0.0,
        offline_flop: 0.0,
    };
    let totals: Vec<f64> = Method::ALL
        .iter()
        .map(|&m| {
            let plan = build_plan(&c, m, Some(4)).unwrap();
            simulate_cost(&plan, &Workload::default(), &flat)
                .unwrap()
                .total
        })
        .collect();
    assert!(totals.windows(2).all(|w| w[0] == w[1]), "{totals:?}");
    assert!(CostModel {
        crossing: -1.0,
        ..flat
    }
    .validate()
    .is_err());
}

#[test]
fn split_tuning_runs_under_its_own_plan() {
    let c = config();
    let t = TuningConfig {
        mode: TuningMode::SplitSpf,
        split_layer: 2,
        ..TuningConfig::default()
    };
    let model = Model::init(&c, &t, 30).unwrap();
    let mut ch = channel(Method::Method2, 31);
    let x = embedded(&model, &mut Rng::new(32, 0));
    let got = secure_forward(
        &mut ch,
        &model,
        &DomainTensor::trusted(x.clone()),
        Precision::Exact,
    )
    .unwrap();
    assert!(rel_err(&got.inner, &plain_logits(&model, &x, Precision::Exact)) < 1e-12);
}
