use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wid::distill::{select_constrained, DistillConfig, MaskState, Strategy};
use wid::merge::{build_student, zero_masked_columns};
use wid::model::{forward, init_model, Batch, Mode, ModelConfig};
use wid::reparam::{insert_compactors, layer_sites, site_weight, ReparamModel, Site, Slot};
use wid::Tensor;

fn config(mode: Mode, layer_norm: bool, tie: bool) -> ModelConfig {
    let mut cfg = ModelConfig::bert(50, 16, 4, 2)
        .unwrap()
        .with_ffn(24)
        .with_max_seq_len(8)
        .with_mode(mode);
    cfg.layer_norm = layer_norm;
    cfg.tie_output = tie;
    cfg
}

fn distill_config(strategy: Strategy) -> DistillConfig {
    let mut dc = DistillConfig::new(10);
    dc.attn_target = Some(8);
    dc.ffn_target = Some(12);
    dc.strategy = strategy;
    dc
}

/// Full-size masks chosen from random scores.
fn final_masks(model: &ReparamModel, dc: &DistillConfig, rng: &mut ChaCha8Rng) -> MaskState {
    let mut masks = MaskState::new(model, dc).unwrap();
    for gm in &mut masks.groups {
        let norms: Vec<f64> = (0..gm.size()).map(|_| rng.random()).collect();
        gm.mask = select_constrained(&norms, gm.drop_target, gm.shape, None).unwrap();
    }
    masks
}

fn perturb_leaders(model: &mut ReparamModel, rng: &mut ChaCha8Rng) {
    let leaders: Vec<Slot> = model.groups().iter().map(|g| g.leader).collect();
    for slot in leaders {
        for v in model.weight_mut(slot).data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    model.broadcast().unwrap();
}

fn kept(mask: &[bool]) -> Vec<usize> {
    (0..mask.len()).filter(|&i| !mask[i]).collect()
}

fn at(t: &Tensor, i: usize, j: usize) -> f64 {
    t.at(i, j) as f64
}

/// Brute-force `rc'·W·cc'` with explicit index loops in f64.
fn oracle(w: &Tensor, rc: Option<(&Tensor, &[bool])>, cc: Option<(&Tensor, &[bool])>) -> Vec<Vec<f64>> {
    let (n_in, n_out) = (w.rows(), w.cols());
    let rows: Vec<Vec<f64>> = match rc {
        Some((r, m)) => kept(m)
            .into_iter()
            .map(|i| (0..n_in).map(|a| at(r, i, a)).collect())
            .collect(),
        None => (0..n_in).map(|i| (0..n_in).map(|a| (i == a) as u8 as f64).collect()).collect(),
    };
    let cols: Vec<usize> = cc.map_or((0..n_out).collect(), |(_, m)| kept(m));
    rows.iter()
        .map(|r| {
            cols.iter()
                .map(|&j| {
                    let mut acc = 0.0;
                    for (a, &ra) in r.iter().enumerate() {
                        for b in 0..n_out {
                            let c = match cc {
                                Some((c, _)) => at(c, b, j),
                                None => (b == j) as u8 as f64,
                            };
                            acc += ra * at(w, a, b) * c;
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn assert_close(name: &str, got: &Tensor, want: &[Vec<f64>], scale: f64) {
    assert_eq!(got.rows(), want.len(), "{name} rows");
    for (i, row) in want.iter().enumerate() {
        assert_eq!(got.cols(), row.len(), "{name} cols");
        for (j, &v) in row.iter().enumerate() {
            let d = (got.at(i, j) as f64 - v * scale).abs();
            assert!(d <= 1e-6, "{name}[{i},{j}]: {} vs {}", got.at(i, j), v * scale);
        }
    }
}

fn compactor_mask<'a>(model: &ReparamModel, masks: &'a MaskState, slot: Slot) -> &'a [bool] {
    &masks.groups[model.compactor(slot).group_id].mask
}

fn check_oracle(strategy: Strategy, tie: bool, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = config(Mode::EncoderMlm, true, tie);
    let mut model = insert_compactors(init_model(&cfg, seed).unwrap());
    perturb_leaders(&mut model, &mut rng);
    let dc = distill_config(strategy);
    let masks = final_masks(&model, &dc, &mut rng);
    let (student, _) = build_student(&model, &masks).unwrap();
    let t = &model.teacher;

    let side = |slot: Slot| Some((model.weight(slot), compactor_mask(&model, &masks, slot)));
    let emb = Slot::column(Site::Embedding);
    assert_close("token", &student.token, &oracle(&t.token, None, side(emb)), 1.0);
    assert_close("position", &student.position, &oracle(&t.position, None, side(emb)), 1.0);

    for l in 0..cfg.layers {
        for site in layer_sites(l) {
            let (w, b) = site_weight(t, site).unwrap();
            let (sw, sb) = site_weight(&student, site).unwrap();
            let scale = match site {
                Site::Query(_) => {
                    let (dk_t, dk_s) = (cfg.layer(l).head_dim, student.config.layer(l).head_dim);
                    (dk_s as f64 / dk_t as f64).sqrt()
                }
                _ => 1.0,
            };
            let want = oracle(w, side(Slot::row(site)), side(Slot::column(site)));
            assert_close(&format!("{site}"), sw, &want, scale);
            let bias = Tensor::new(&[1, b.len()], b.data().to_vec()).unwrap();
            let want_b = oracle(&bias, None, side(Slot::column(site)));
            let got_b = Tensor::new(&[1, sb.len()], sb.data().to_vec()).unwrap();
            assert_close(&format!("{site} bias"), &got_b, &want_b, scale);
        }
    }

    let out = Slot::row(Site::Output);
    match &t.output {
        Some(w) => {
            assert_close("output", student.output.as_ref().unwrap(), &oracle(w, side(out), None), 1.0);
        }
        None => {
            // Broadcasting keeps the output row compactor equal to the flipped
            // embedding compactor, so the student stays tied.
            assert!(student.config.tie_output);
            assert!(student.output.is_none());
            let w_t = t.token.transpose().unwrap();
            let want = oracle(&w_t, side(out), None);
            let got = student.token.transpose().unwrap();
            assert_close("tied output", &got, &want, 1.0);
        }
    }
}

#[test]
fn merged_weights_match_triple_product_oracle() {
    for (i, strategy) in [Strategy::DimReduce, Strategy::HeadDrop].into_iter().enumerate() {
        for tie in [true, false] {
            check_oracle(strategy, tie, 10 + i as u64);
        }
    }
}

fn random_batch(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Batch {
    let (b, n) = (3, cfg.max_seq_len);
    let v = cfg.vocab_size as u32;
    let tokens = b * n;
    Batch {
        batch_size: b,
        seq_len: n,
        input_ids: (0..tokens).map(|_| rng.random_range(0..v)).collect(),
        segment_ids: (0..tokens)
            .map(|_| if cfg.has_segments() { rng.random_range(0..2) } else { 0 })
            .collect(),
        targets: (0..tokens).map(|_| rng.random_range(0..v)).collect(),
        loss_mask: vec![true; tokens],
    }
}

fn check_selection_equivalence(mode: Mode, strategy: Strategy, tie: bool, layer_norm: bool, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = config(mode, layer_norm, tie);
    let mut teacher = init_model(&cfg, seed).unwrap();
    // Larger weights make any mismatch visible in the logits; layer norm's
    // 1/σ amplifies f32 rounding, so it gets a milder boost.
    let boost = if layer_norm { 5.0 } else { 20.0 };
    for (_, t) in teacher.named_mut() {
        for v in t.data_mut() {
            *v *= boost;
        }
    }
    let mut model = insert_compactors(teacher);
    let masks = final_masks(&model, &distill_config(strategy), &mut rng);
    zero_masked_columns(&mut model, &masks).unwrap();
    if layer_norm {
        model.set_ln_excluded(Some(masks.groups[0].mask.clone())).unwrap();
    }
    let (student, _) = build_student(&model, &masks).unwrap();
    assert_eq!(student.config.hidden, 10);
    for _ in 0..5 {
        let batch = random_batch(&cfg, &mut rng);
        let a = model.forward(&batch).unwrap().logits;
        let b = forward(&student, &batch).unwrap().logits;
        let d = a.max_abs_diff(&b).unwrap();
        assert!(d <= 1e-5, "{mode:?} {strategy:?} tie={tie} ln={layer_norm}: max diff {d:e}");
    }
}

#[test]
fn selection_merge_preserves_function_without_layer_norm() {
    let mut seed = 20;
    for mode in [Mode::EncoderMlm, Mode::DecoderCausal] {
        for strategy in [Strategy::DimReduce, Strategy::HeadDrop] {
            for tie in [true, false] {
                check_selection_equivalence(mode, strategy, tie, false, seed);
                seed += 1;
            }
        }
    }
}

#[test]
fn selection_merge_preserves_function_with_kept_layer_norm_statistics() {
    let mut seed = 40;
    for mode in [Mode::EncoderMlm, Mode::DecoderCausal] {
        for strategy in [Strategy::DimReduce, Strategy::HeadDrop] {
            for tie in [true, false] {
                check_selection_equivalence(mode, strategy, tie, true, seed);
                seed += 1;
            }
        }
    }
}

#[test]
fn incomplete_masks_are_rejected() {
    let cfg = config(Mode::EncoderMlm, true, true);
    let model = insert_compactors(init_model(&cfg, 1).unwrap());
    let masks = MaskState::new(&model, &distill_config(Strategy::DimReduce)).unwrap();
    assert!(build_student(&model, &masks).is_err());
}
