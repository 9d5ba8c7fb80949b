use teeslice::model::{
    count_trainable_params, spf_select_heads, Graph, LinearKind, LoraConfig, Model, RatioPreset,
    TransformerConfig, TuningConfig, TuningMode,
};
use teeslice::tensor::{rel_err, Adam, Optimizer, Precision, Rng, Tensor};

fn small() -> TransformerConfig {
    TransformerConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_head: 4,
        d_ff: 12,
        vocab: 10,
        n_classes: 3,
        max_seq: 6,
        ln_eps: 1e-5,
    }
}

fn tuning(mode: TuningMode) -> TuningConfig {
    TuningConfig {
        mode,
        split_layer: 1,
        ..TuningConfig::default()
    }
}

// Straight-line reference: plain loops, no tape.

fn ref_linear(x: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..w.rows())
                .map(|o| b.data()[o] + (0..w.cols()).map(|i| row[i] * w.at(o, i)).sum::<f64>())
                .collect()
        })
        .collect()
}

fn ref_layernorm(x: &[Vec<f64>], eps: f64) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            r.iter().map(|v| (v - mu) / (var + eps).sqrt()).collect()
        })
        .collect()
}

fn ref_gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
}

fn ref_block(model: &Model, layer: usize, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let c = &model.config;
    let lw = &model.base.layers[layer];
    let (w, b) = lw.linear(LinearKind::Qkv);
    let qkv = ref_linear(&ref_layernorm(x, c.ln_eps), w, b);
    let s = x.len();
    let d = c.d_model;
    let mut ctx = vec![vec![0.0; d]; s];
    for h in 0..c.n_heads {
        let off = h * c.d_head;
        for i in 0..s {
            let scores: Vec<f64> = (0..s)
                .map(|j| {
                    (0..c.d_head)
                        .map(|t| qkv[i][off + t] * qkv[j][d + off + t])
                        .sum::<f64>()
                        / (c.d_head as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..s {
                for t in 0..c.d_head {
                    ctx[i][off + t] += e[j] / z * qkv[j][2 * d + off + t];
                }
            }
        }
    }
    let (w, b) = lw.linear(LinearKind::Dense);
    let attn = ref_linear(&ctx, w, b);
    let x1: Vec<Vec<f64>> = x
        .iter()
        .zip(&attn)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
        .collect();
    let (w, b) = lw.linear(LinearKind::Fc1);
    let f: Vec<Vec<f64>> = ref_linear(&ref_layernorm(&x1, c.ln_eps), w, b)
        .into_iter()
        .map(|r| r.into_iter().map(ref_gelu).collect())
        .collect();
    let (w, b) = lw.linear(LinearKind::Fc2);
    let f = ref_linear(&f, w, b);
    x1.iter()
        .zip(&f)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
        .collect()
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn block_out(model: &Model, x: &Tensor, layer: usize, mode: TuningMode) -> Tensor {
    let mut g = Graph::local(Precision::Exact);
    let xv = g
        .input(
            teeslice::model::Site::global(teeslice::model::SiteKind::Embed),
            x.clone(),
        )
        .unwrap();
    let y = model.forward_block(&mut g, xv, layer, mode).unwrap();
    g.value(y).clone()
}

#[test]
fn block_matches_straight_line_reference() {
    let model = Model::init(&small(), &tuning(TuningMode::Frozen), 11).unwrap();
    let mut rng = Rng::new(12, 0);
    for layer in 0..2 {
        let x = rng.normal_tensor(&[5, 8], 1.0);
        let got = block_out(&model, &x, layer, TuningMode::Frozen);
        let want = ref_block(&model, layer, &rows_of(&x));
        let want = Tensor::new(vec![5, 8], want.concat()).unwrap();
        assert!(
            rel_err(&got, &want) < 1e-12,
            "layer {layer}: {}",
            rel_err(&got, &want)
        );
    }
}

#[test]
fn zero_init_lora_is_neutral() {
    let model = Model::init(&small(), &tuning(TuningMode::Lora), 3).unwrap();
    let x = Rng::new(4, 0).normal_tensor(&[4, 8], 1.0);
    assert_eq!(
        block_out(&model, &x, 1, TuningMode::Lora),
        block_out(&model, &x, 1, TuningMode::Frozen)
    );
}

#[test]
fn empty_prefix_is_neutral_and_prefix_widens_scores() {
    let mut t = tuning(TuningMode::PtuningV2);
    t.prefix_len = 0;
    let model = Model::init(&small(), &t, 3).unwrap();
    let x = Rng::new(4, 0).normal_tensor(&[4, 8], 1.0);
    assert_eq!(
        block_out(&model, &x, 0, TuningMode::PtuningV2),
        block_out(&model, &x, 0, TuningMode::Frozen)
    );

    t.prefix_len = 3;
    let model = Model::init(&small(), &t, 3).unwrap();
    let mut g = Graph::local(Precision::Exact);
    let logits = model.forward(&mut g, &[1, 2, 3, 4]).unwrap();
    assert_eq!(g.value(logits).shape(), &[1, 3]);
    // Scores per head are seq x (seq + prefix); stacked over heads.
    let widths: Vec<Vec<usize>> = (0..g.tape().len())
        .map(|i| g.tape().value(g.tape().var(i)).shape().to_vec())
        .filter(|s| s == &[2 * 4, 4 + 3])
        .collect();
    assert!(widths.len() >= 2);
}

#[test]
fn lora_gradients_reach_adapters_not_base() {
    let mut model = Model::init(&small(), &tuning(TuningMode::Lora), 5).unwrap();
    let mut g = Graph::new(Precision::Exact, teeslice::tensor::LocalRouter, None);
    let logits = model.forward(&mut g, &[0, 3, 5]).unwrap();
    let loss = model.loss(&mut g, logits, 1).unwrap();
    g.backward(loss).unwrap();
    let grads = g.param_grads().unwrap();
    let b = &grads["layer0.qkv.lora_b"];
    assert!(b.max_abs() > 0.0);
    // With b = 0 the gradient of a vanishes exactly.
    assert_eq!(grads["layer0.qkv.lora_a"].max_abs(), 0.0);
    assert!(grads
        .keys()
        .all(|k| k.contains("lora") || k.starts_with("head")));
    assert_eq!(grads.len(), model.trainable().len());
}

#[test]
fn lora_count_has_closed_form() {
    let c = small();
    for rank in [1, 2, 4] {
        let t = TuningConfig {
            mode: TuningMode::Lora,
            lora: LoraConfig {
                rank,
                targets: vec![LinearKind::Dense],
                ..LoraConfig::default()
            },
            train_head: false,
            ..TuningConfig::default()
        };
        assert_eq!(
            count_trainable_params(&c, &t).unwrap(),
            2 * rank * c.d_model * c.n_layers
        );
        let t = TuningConfig {
            lora: LoraConfig {
                rank,
                targets: LinearKind::ALL.to_vec(),
                ..LoraConfig::default()
            },
            ..t
        };
        let per_layer: usize = LinearKind::ALL
            .iter()
            .map(|&k| {
                let (o, i) = c.linear_dims(k);
                rank * (o + i)
            })
            .sum();
        assert_eq!(
            count_trainable_params(&c, &t).unwrap(),
            per_layer * c.n_layers
        );
    }
}

#[test]
fn fully_frozen_counts_zero() {
    let t = TuningConfig {
        mode: TuningMode::SplitSpf,
        qkv_ratio: 0.0,
        dense_ratio: 0.0,
        lora: LoraConfig {
            rank: 0,
            ..LoraConfig::default()
        },
        train_head: false,
        split_layer: 0,
        ..TuningConfig::default()
    };
    assert_eq!(count_trainable_params(&small(), &t).unwrap(), 0);
}

#[test]
fn split_count_grows_with_server_layers_and_ratios() {
    let c = TransformerConfig {
        n_layers: 10,
        ..TransformerConfig::default()
    };
    let count = |server: usize, q: f64, d: f64| {
        let t = TuningConfig {
            mode: TuningMode::SplitSpf,
            split_layer: c.n_layers - server,
            qkv_ratio: q,
            dense_ratio: d,
            train_head: false,
            ..TuningConfig::default()
        };
        count_trainable_params(&c, &t).unwrap()
    };
    let (c2, c4, c8) = (count(2, 1.0, 1.0), count(4, 1.0, 1.0), count(8, 1.0, 1.0));
    assert!(c2 < c4 && c4 < c8);
    assert_eq!(c4, 2 * c2);
    assert_eq!(c8, 2 * c4);
    let grid = [0.125, 0.25, 0.5, 0.625, 1.0];
    for server in [2, 4, 8] {
        for w in grid.windows(2) {
            assert!(count(server, w[0], 0.5) <= count(server, w[1], 0.5));
            assert!(count(server, 0.5, w[0]) <= count(server, 0.5, w[1]));
        }
    }
}

#[test]
fn spf_step_moves_only_selected_rows() {
    let c = small();
    let t = TuningConfig {
        mode: TuningMode::SplitSpf,
        split_layer: 0,
        qkv_ratio: 0.5,
        dense_ratio: 0.5,
        ..TuningConfig::default()
    };
    let mut model = Model::init(&c, &t, 8).unwrap();
    let before = model.clone();
    let mut adam = Adam::new(0.05);
    for step in 0..3 {
        let mut g = Graph::new(Precision::Exact, teeslice::tensor::LocalRouter, None);
        let logits = model.forward(&mut g, &[1, 4, 2, 7]).unwrap();
        let loss = model.loss(&mut g, logits, step % 3).unwrap();
        g.backward(loss).unwrap();
        let grads = g.param_grads().unwrap();
        for (name, p) in model.trainable_mut() {
            adam.step(&name, p, &grads[&name]).unwrap();
        }
    }
    for (key, spf) in &model.adapters.spf {
        let (w0, b0) = before.adapters.spf[key].merged();
        let (w1, b1) = spf.merged();
        for &r in &spf.partition.freeze_rows() {
            assert_eq!(w0.row(r), w1.row(r));
            assert_eq!(b0.data()[r].to_bits(), b1.data()[r].to_bits());
        }
        let moved = spf
            .partition
            .train_rows()
            .iter()
            .any(|&r| w0.row(r) != w1.row(r));
        assert!(moved, "{key:?}");
        // The frozen base itself is never touched.
        assert_eq!(model.base, before.base);
    }
}

#[test]
fn spf_full_ratio_routes_gradient_to_every_row() {
    let c = small();
    let t = TuningConfig {
        mode: TuningMode::SplitSpf,
        split_layer: 0,
        qkv_ratio: 1.0,
        dense_ratio: 1.0,
        ..TuningConfig::default()
    };
    let model = Model::init(&c, &t, 9).unwrap();
    let mut g = Graph::local(Precision::Exact);
    let logits = model.forward(&mut g, &[1, 2, 3]).unwrap();
    let loss = model.loss(&mut g, logits, 2).unwrap();
    g.backward(loss).unwrap();
    let grads = g.param_grads().unwrap();
    let w = &grads["layer1.qkv.spf_w"];
    assert_eq!(w.rows(), 3 * c.d_model);
    for r in 0..w.rows() {
        assert!(w.row(r).iter().any(|v| *v != 0.0), "row {r}");
    }
}

#[test]
fn spf_selection_matches_sort_oracle() {
    let mut rng = Rng::new(21, 0);
    for _ in 0..20 {
        let w = rng.normal_tensor(&[16, 5], 1.0);
        let b = Tensor::zeros(&[16]);
        let p = spf_select_heads(&w, &b, 8, 0.25).unwrap();
        let mut scored: Vec<(f64, usize)> = (0..8)
            .map(|h| {
                let s: f64 = (2 * h..2 * h + 2)
                    .flat_map(|r| w.row(r).to_vec())
                    .map(f64::abs)
                    .sum();
                (s, h)
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut want: Vec<usize> = scored[..2].iter().map(|x| x.1).collect();
        want.sort();
        assert_eq!(p.train_heads, want);
        let min_sel = p
            .train_heads
            .iter()
            .map(|&h| p.scores[h])
            .fold(f64::MAX, f64::min);
        let max_rest = p
            .freeze_heads
            .iter()
            .map(|&h| p.scores[h])
            .fold(f64::MIN, f64::max);
        assert!(min_sel >= max_rest);
    }
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let c = small();
    let t = TuningConfig {
        lora: LoraConfig {
            dropout: 0.0,
            ..LoraConfig::default()
        },
        ..tuning(TuningMode::Lora)
    };
    let mut model = Model::init(&c, &t, 30).unwrap();
    // Give the adapters non-trivial values so every path carries gradient.
    let mut rng = Rng::new(31, 0);
    for (_, p) in model.trainable_mut() {
        *p = rng.normal_tensor(p.shape(), 0.3);
    }
    let tokens = [2, 7, 1, 4];
    let loss_of = |m: &Model| {
        let mut g = Graph::local(Precision::Exact);
        let l = m.forward(&mut g, &tokens).unwrap();
        let l = m.loss(&mut g, l, 1).unwrap();
        g.value(l).data()[0]
    };
    let mut g = Graph::local(Precision::Exact);
    let l = model.forward(&mut g, &tokens).unwrap();
    let l = model.loss(&mut g, l, 1).unwrap();
    g.backward(l).unwrap();
    let grads = g.param_grads().unwrap();
    let names: Vec<String> = model.trainable().keys().cloned().collect();
    let h = 1e-5;
    for name in names.iter().step_by(3) {
        for idx in [0usize, 5] {
            let mut plus = model.clone();
            let mut minus = model.clone();
            let bump = |m: &mut Model, d: f64| {
                for (n, p) in m.trainable_mut() {
                    if &n == name && idx < p.len() {
                        p.data_mut()[idx] += d;
                    }
                }
            };
            bump(&mut plus, h);
            bump(&mut minus, -h);
            if idx >= grads[name].len() {
                continue;
            }
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let an = grads[name].data()[idx];
            assert!((fd - an).abs() < 1e-5, "{name}[{idx}]: fd {fd} vs {an}");
        }
    }
}

#[test]
fn load_trainable_checks_names_and_shapes() {
    let mut model = Model::init(&small(), &tuning(TuningMode::Lora), 1).unwrap();
    let mut p = model.trainable();
    p.get_mut("head.b").unwrap().data_mut()[0] = 42.0;
    model.load_trainable(&p).unwrap();
    assert_eq!(model.adapters.head.as_ref().unwrap().1.data()[0], 42.0);
    p.insert("nope".into(), Tensor::zeros(&[1]));
    assert!(model.load_trainable(&p).is_err());
}

#[test]
fn ratio_presets_are_distinct() {
    assert_eq!(RatioPreset::Quarter.ratios(), (0.25, 0.5));
    assert_eq!(RatioPreset::Eighth.ratios(), (0.125, 0.25));
    assert_eq!(RatioPreset::Half.ratios(), (0.5, 0.625));
}

#[test]
fn rejects_bad_inputs() {
    let model = Model::init(&small(), &tuning(TuningMode::Frozen), 1).unwrap();
    assert!(model.logits(&[], Precision::Exact).is_err());
    assert!(model.logits(&[99], Precision::Exact).is_err());
    assert!(model.logits(&[1; 7], Precision::Exact).is_err());
    let bad = TransformerConfig {
        d_head: 3,
        ..small()
    };
    assert!(Model::init(&bad, &tuning(TuningMode::Frozen), 1).is_err());
    let mut g = Graph::local(Precision::Exact);
    let x = g
        .input(
            teeslice::model::Site::global(teeslice::model::SiteKind::Embed),
            Tensor::zeros(&[3, 5]),
        )
        .unwrap();
    assert!(model
        .forward_block(&mut g, x, 0, TuningMode::Frozen)
        .is_err());
}
