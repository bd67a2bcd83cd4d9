mod common;

use common::{
    assert_close, block_cross_loop, decode_loop, mlp_loop, mlp_rows_loop, te_block_cross_loop,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tetnp::attention::AttentionMask;
use tetnp::config::{parse_entries, Section};
use tetnp::gradcheck::param_grad_check;
use tetnp::models::{Model, ModelConfig, PseudoLocationInit, PseudoStyle, Task, Variant};
use tetnp::nn::Predictive;
use tetnp::{Error, Tape, Tensor, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_task(r: &mut ChaCha8Rng, nc: usize, nt: usize) -> Task {
    let col = |r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64| {
        Tensor::column(&(0..n).map(|_| r.gen_range(lo..hi)).collect::<Vec<_>>())
    };
    Task::new(
        col(r, nc, -2.0, 2.0),
        col(r, nc, -1.5, 1.5),
        col(r, nt, -3.0, 3.0),
        col(r, nt, -1.5, 1.5),
    )
    .unwrap()
}

fn shifted(task: &Task, tau: f64) -> Task {
    tetnp::data::shift_task(task, tau)
}

fn tiny(variant: Variant) -> Model {
    Model::new(ModelConfig::tiny(variant), 7).unwrap()
}

fn all_tiny() -> Vec<Model> {
    let mut models: Vec<Model> = Variant::ALL.iter().map(|v| tiny(*v)).collect();
    for variant in [Variant::PtTnp, Variant::TePtTnp] {
        let mut cfg = ModelConfig::tiny(variant);
        cfg.pseudo_style = PseudoStyle::Perceiver;
        models.push(Model::new(cfg, 8).unwrap());
    }
    models
}

fn max_diff(a: &Predictive, b: &Predictive) -> f64 {
    a.mean.max_abs_diff(&b.mean).max(a.var.max_abs_diff(&b.var))
}

fn max_rel_dev(a: &Predictive, b: &Predictive) -> f64 {
    let pairs = a
        .mean
        .data()
        .iter()
        .zip(b.mean.data())
        .chain(a.var.data().iter().zip(b.var.data()));
    pairs
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

#[test]
fn config_requires_pseudo_tokens_exactly_for_pseudo_variants() {
    for v in Variant::ALL {
        let mut cfg = ModelConfig::new(v);
        assert!(cfg.validate().is_ok());
        cfg.pseudo_tokens = if v.uses_pseudo_tokens() { 0 } else { 4 };
        assert!(Model::new(cfg, 0).is_err(), "{v}");
    }
}

#[test]
fn config_round_trips_and_rejects_bad_tags() {
    let mut cfg = ModelConfig::new(Variant::TePtTnp);
    cfg.pseudo_style = PseudoStyle::Perceiver;
    cfg.pseudo_locations = PseudoLocationInit::Uniform;
    cfg.location_updates = false;
    let text = cfg.emit();
    let mut back = ModelConfig::new(Variant::Cnp);
    tetnp::config::apply(&mut back, &parse_entries(&text).unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.emit(), text);
    assert!(back.set("pseudo_style", "spiral").is_err());
    assert!(back.set("variant", "gp").is_err());
}

#[test]
fn empty_context_is_rejected_by_every_variant() {
    let mut r = rng(1);
    let mut task = random_task(&mut r, 3, 2);
    task.xc = Tensor::zeros([0, 1]);
    task.yc = Tensor::zeros([0, 1]);
    for m in all_tiny() {
        assert!(
            matches!(m.predict(&task), Err(Error::Empty(_))),
            "{}",
            m.variant()
        );
    }
}

#[test]
fn context_permutation_invariance() {
    let mut r = rng(2);
    for m in all_tiny() {
        for _ in 0..20 {
            let nc = r.gen_range(1..9);
            let task = random_task(&mut r, nc, 5);
            let mut perm: Vec<usize> = (0..nc).collect();
            perm.shuffle(&mut r);
            let d = max_diff(
                &m.predict(&task).unwrap(),
                &m.predict(&task.permute_context(&perm)).unwrap(),
            );
            assert!(d < 1e-9, "{}: {d:e}", m.variant());
        }
    }
}

#[test]
fn target_predictions_are_conditionally_independent() {
    let mut r = rng(3);
    for m in all_tiny() {
        let task = random_task(&mut r, 6, 5);
        let base = m.predict(&task).unwrap();
        let mut other = task.clone();
        for i in [0, 1, 3, 4] {
            other.xt.data_mut()[i] += r.gen_range(-2.0..2.0);
        }
        let moved = m.predict(&other).unwrap();
        for c in 0..1 {
            assert!(
                (base.mean.get(2, c) - moved.mean.get(2, c)).abs() < 1e-10,
                "{}",
                m.variant()
            );
            assert!(
                (base.var.get(2, c) - moved.var.get(2, c)).abs() < 1e-10,
                "{}",
                m.variant()
            );
        }
    }
}

#[test]
fn target_permutation_permutes_predictions() {
    let mut r = rng(4);
    for m in all_tiny() {
        let task = random_task(&mut r, 4, 6);
        let perm = [5, 2, 0, 1, 4, 3];
        let base = m.predict(&task).unwrap();
        let moved = m.predict(&task.permute_targets(&perm)).unwrap();
        assert!(base.mean.permute_rows(&perm).max_abs_diff(&moved.mean) < 1e-10);
        assert!(base.var.permute_rows(&perm).max_abs_diff(&moved.var) < 1e-10);
    }
}

#[test]
fn equivariant_variants_are_shift_invariant() {
    let mut r = rng(5);
    for m in all_tiny()
        .into_iter()
        .filter(|m| m.variant().is_translation_equivariant())
    {
        for _ in 0..5 {
            let nc = r.gen_range(1..8);
            let task = random_task(&mut r, nc, 6);
            let base = m.predict(&task).unwrap();
            for tau in [0.1, -0.1, 1.0, -1.0, 10.0, -10.0, 1000.0, -1000.0, 3.7] {
                let dev = max_rel_dev(&base, &m.predict(&shifted(&task, tau)).unwrap());
                assert!(dev < 1e-7, "{} tau {tau}: {dev:e}", m.variant());
            }
        }
    }
}

#[test]
fn non_equivariant_variants_move_under_shift() {
    let mut r = rng(6);
    for m in all_tiny()
        .into_iter()
        .filter(|m| !m.variant().is_translation_equivariant())
    {
        let task = random_task(&mut r, 6, 6);
        let dev = max_rel_dev(
            &m.predict(&task).unwrap(),
            &m.predict(&shifted(&task, 10.0)).unwrap(),
        );
        assert!(dev > 1e-3, "{}: {dev:e}", m.variant());
    }
}

#[test]
fn te_variants_embed_outputs_only() {
    for v in [Variant::TeTnp, Variant::TePtTnp] {
        let m = tiny(v);
        let embedder = match v {
            Variant::TeTnp => &m.as_te_tnp().unwrap().embedder,
            _ => &m.as_te_pt_tnp().unwrap().embedder,
        };
        assert_eq!(embedder.in_dim(), m.config.output_dim);
    }
}

#[test]
fn every_variant_passes_gradient_check() {
    let mut r = rng(7);
    let task = random_task(&mut r, 3, 2);
    for m in all_tiny() {
        // Coordinates with gradients below ~1e-7 sit at the rounding floor of
        // a step-1e-5 difference; a 1e-5 floor makes that an absolute
        // tolerance of 1e-9.
        let report =
            param_grad_check(&m.params, |p| m.log_likelihood(p, &task), 1e-5, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{}: {report:?}", m.variant());
    }
}

#[test]
fn cnp_single_context_matches_loop() {
    let m = tiny(Variant::Cnp);
    let cnp = m.as_cnp().unwrap();
    let mut r = rng(8);
    let task = random_task(&mut r, 1, 3);
    let rep = mlp_loop(
        &m.params,
        &cnp.encoder,
        &[task.xc.get(0, 0), task.yc.get(0, 0)],
    );
    let mut dec_in = Vec::new();
    for t in 0..3 {
        dec_in.extend(&rep);
        dec_in.push(task.xt.get(t, 0));
    }
    let (mean, var) = decode_loop(
        &m.params,
        &cnp.decoder.mlp,
        &Tensor::new(vec![3, rep.len() + 1], dec_in).unwrap(),
    );
    let pred = m.predict(&task).unwrap();
    assert_close(&pred.mean, &mean, 1e-12);
    assert_close(&pred.var, &var, 1e-12);
}

#[test]
fn cnp_representation_unchanged_by_duplicating_context() {
    let m = tiny(Variant::Cnp);
    let cnp = m.as_cnp().unwrap();
    let mut r = rng(9);
    let task = random_task(&mut r, 5, 2);
    let tape = Tape::no_grad();
    let p = m.params.bind(&tape);
    let rep = |xc: &Tensor, yc: &Tensor| {
        cnp.representation(&p, p.constant(xc.clone()), p.constant(yc.clone()))
            .unwrap()
            .value()
    };
    let xc2 = Tensor::concat_rows(&[&task.xc, &task.xc]).unwrap();
    let yc2 = Tensor::concat_rows(&[&task.yc, &task.yc]).unwrap();
    assert_close(&rep(&task.xc, &task.yc), &rep(&xc2, &yc2), 1e-12);
}

#[test]
fn rcnp_two_context_matches_loop() {
    let m = tiny(Variant::Rcnp);
    let rcnp = m.as_rcnp().unwrap();
    let mut r = rng(10);
    let task = random_task(&mut r, 2, 3);
    let dz = m.config.token_dim;
    let mut reps = Vec::new();
    for t in 0..3 {
        let mut acc = vec![0.0; dz];
        for c in 0..2 {
            let e = mlp_loop(
                &m.params,
                &rcnp.encoder,
                &[task.xt.get(t, 0) - task.xc.get(c, 0), task.yc.get(c, 0)],
            );
            for (a, v) in acc.iter_mut().zip(e) {
                *a += v / 2.0;
            }
        }
        reps.extend(acc);
    }
    let (mean, var) = decode_loop(
        &m.params,
        &rcnp.decoder.mlp,
        &Tensor::new(vec![3, dz], reps).unwrap(),
    );
    let pred = m.predict(&task).unwrap();
    assert_close(&pred.mean, &mean, 1e-12);
    assert_close(&pred.var, &var, 1e-12);
}

fn density_tokens(m: &Model, task: &Task) -> (Tensor, Tensor) {
    let mlp = match m.variant() {
        Variant::Tnp => &m.as_tnp().unwrap().embedder.mlp,
        _ => &m.as_pt_tnp().unwrap().embedder.mlp,
    };
    let mut ctx = Vec::new();
    for i in 0..task.num_context() {
        ctx.push(vec![task.xc.get(i, 0), task.yc.get(i, 0), 1.0]);
    }
    let mut tgt = Vec::new();
    for i in 0..task.num_targets() {
        tgt.push(vec![task.xt.get(i, 0), 0.0, 0.0]);
    }
    let embed = |rows: Vec<Vec<f64>>| {
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        mlp_rows_loop(&m.params, mlp, &Tensor::from_rows(&refs))
    };
    (embed(ctx), embed(tgt))
}

#[test]
fn tnp_equals_masked_single_stream_block() {
    let mut cfg = ModelConfig::tiny(Variant::Tnp);
    cfg.layers = 1;
    let m = Model::new(cfg, 11).unwrap();
    let tnp = m.as_tnp().unwrap();
    let mut r = rng(12);
    let task = random_task(&mut r, 5, 4);
    let tape = Tape::no_grad();
    let p = m.params.bind(&tape);
    let (zc0, zt0) = density_tokens(&m, &task);
    let (zc0, zt0) = (p.constant(zc0), p.constant(zt0));
    let direct = tnp.encode(&p, zc0, zt0).unwrap().value();
    let block = &tnp.blocks[0];
    let zc1 = block.forward_self(&p, zc0).unwrap();
    let stream = Var::concat_rows(&[zc1, zt0]).unwrap();
    let masked = block
        .forward_masked(&p, stream, &AttentionMask::context_only(5, 4))
        .unwrap()
        .slice_rows(5, 9)
        .unwrap()
        .value();
    assert_close(&direct, &masked, 1e-8);
}

#[test]
fn pt_tnp_single_pseudo_token_matches_loop() {
    for style in [PseudoStyle::Ist, PseudoStyle::Perceiver] {
        let mut cfg = ModelConfig::tiny(Variant::PtTnp);
        cfg.layers = 1;
        cfg.pseudo_tokens = 1;
        cfg.pseudo_style = style;
        let m = Model::new(cfg, 13).unwrap();
        let pt = m.as_pt_tnp().unwrap();
        let task = random_task(&mut rng(14), 4, 3);
        let (zc, zt) = density_tokens(&m, &task);
        let u0 = m.params.get(pt.pseudo).clone();
        let params = &m.params;
        let names = params.names();
        let block = |name: &str| -> tetnp::attention::AttentionBlock {
            // Blocks are private to the model; rebuild handles by name.
            let id = |s: &str| params.id(&format!("{name}.{s}")).unwrap();
            let ln = |s: &str| tetnp::nn::LayerNorm {
                gain: id(&format!("{s}.gain")),
                shift: id(&format!("{s}.shift")),
            };
            let lin = |i: usize| {
                let w = id(&format!("ff.{i}.w"));
                let shape = params.get(w).shape().to_vec();
                tetnp::nn::Linear {
                    weight: w,
                    bias: Some(id(&format!("ff.{i}.b"))),
                    in_dim: shape[0],
                    out_dim: shape[1],
                }
            };
            tetnp::attention::AttentionBlock {
                norm_attn: ln("norm_attn"),
                attn: tetnp::attention::AttentionParams {
                    w_q: id("attn.w_q"),
                    w_k: id("attn.w_k"),
                    w_v: id("attn.w_v"),
                    w_o: id("attn.w_o"),
                    dims: m.config.attention_dims(),
                },
                norm_ff: ln("norm_ff"),
                ff: tetnp::nn::Mlp {
                    layers: (0..3).map(lin).collect(),
                },
            }
        };
        assert!(names.iter().any(|n| n.starts_with("layer0.to_pseudo")));
        let u1 = block_cross_loop(params, &block("layer0.to_pseudo"), &u0, &zc);
        let zt1 = match style {
            PseudoStyle::Ist => block_cross_loop(params, &block("layer0.from_pseudo"), &zt, &u1),
            PseudoStyle::Perceiver => {
                let u2 = block_cross_loop(params, &block("layer0.pseudo_self"), &u1, &u1);
                block_cross_loop(params, &block("readout"), &zt, &u2)
            }
        };
        let (mean, var) = decode_loop(params, &pt.decoder.mlp, &zt1);
        let pred = m.predict(&task).unwrap();
        assert_close(&pred.mean, &mean, 1e-12);
        assert_close(&pred.var, &var, 1e-12);
    }
}

#[test]
fn te_tnp_one_layer_matches_loop() {
    let mut cfg = ModelConfig::tiny(Variant::TeTnp);
    cfg.layers = 1;
    let m = Model::new(cfg, 15).unwrap();
    let te = m.as_te_tnp().unwrap();
    let task = random_task(&mut rng(16), 2, 1);
    let params = &m.params;
    let zc = mlp_rows_loop(params, &te.embedder, &task.yc);
    let zt = params.get(te.target_token).clone();
    let block = &te.blocks[0];
    let (zc1, xc1) = te_block_cross_loop(params, block, (&zc, &task.xc), (&zc, &task.xc), true);
    let (zt1, _) = te_block_cross_loop(params, block, (&zt, &task.xt), (&zc1, &xc1), false);
    let (mean, var) = decode_loop(params, &te.decoder.mlp, &zt1);
    let pred = m.predict(&task).unwrap();
    assert_close(&pred.mean, &mean, 1e-11);
    assert_close(&pred.var, &var, 1e-11);
}

#[test]
fn te_tnp_shift_by_3_7() {
    let m = tiny(Variant::TeTnp);
    let task = random_task(&mut rng(17), 7, 5);
    let dev = max_rel_dev(
        &m.predict(&task).unwrap(),
        &m.predict(&shifted(&task, 3.7)).unwrap(),
    );
    assert!(dev < 1e-7, "{dev:e}");
}

#[test]
fn pseudo_locations_shift_with_the_data() {
    let m = tiny(Variant::TePtTnp);
    let task = random_task(&mut rng(18), 6, 2);
    let v = m.pseudo_locations(&task).unwrap();
    for tau in [-1000.0, -1.0, 0.1, 10.0] {
        let moved = m.pseudo_locations(&shifted(&task, tau)).unwrap();
        assert!(v.map(|x| x + tau).max_abs_diff(&moved) < 1e-9 * (1.0 + tau.abs()));
    }
}

#[test]
fn single_context_point_fixes_pseudo_location() {
    let mut cfg = ModelConfig::tiny(Variant::TePtTnp);
    cfg.pseudo_tokens = 1;
    let m = Model::new(cfg, 19).unwrap();
    let task = random_task(&mut rng(20), 1, 2);
    let v0 = m
        .params
        .get(m.as_te_pt_tnp().unwrap().pseudo_offsets)
        .get(0, 0);
    let v = m.pseudo_locations(&task).unwrap();
    assert!((v.get(0, 0) - (v0 + task.xc.get(0, 0))).abs() < 1e-14);
}

#[test]
fn fixed_pseudo_locations_break_equivariance() {
    let mut cfg = ModelConfig::tiny(Variant::TePtTnp);
    cfg.pseudo_locations = PseudoLocationInit::Fixed;
    let m = Model::new(cfg, 21).unwrap();
    let task = random_task(&mut rng(22), 6, 4);
    let dev = max_rel_dev(
        &m.predict(&task).unwrap(),
        &m.predict(&shifted(&task, 10.0)).unwrap(),
    );
    assert!(dev > 1e-3, "{dev:e}");
}

/// Two well-separated clusters with zero offsets and uniform weights put the
/// pseudo-locations between them, far from every observation.
#[test]
fn uniform_pseudo_locations_fall_between_separated_clusters() {
    let mut cfg = ModelConfig::tiny(Variant::TePtTnp);
    cfg.pseudo_locations = PseudoLocationInit::Uniform;
    let mut m = Model::new(cfg, 23).unwrap();
    let offsets = m.as_te_pt_tnp().unwrap().pseudo_offsets;
    let shape = m.params.get(offsets).shape().to_vec();
    m.params.set(offsets, Tensor::zeros(shape));
    let mut r = rng(24);
    let xs: Vec<f64> = (0..200)
        .map(|i| {
            if i < 100 {
                r.gen_range(-101.0..-100.0)
            } else {
                r.gen_range(100.0..101.0)
            }
        })
        .collect();
    let ys: Vec<f64> = (0..200).map(|_| r.gen_range(-1.0..1.0)).collect();
    let task = Task::new(
        Tensor::column(&xs),
        Tensor::column(&ys),
        Tensor::column(&[0.0]),
        Tensor::column(&[0.0]),
    )
    .unwrap();
    let v = m.pseudo_locations(&task).unwrap();
    for &loc in v.data() {
        assert!(loc.abs() < 1.0, "pseudo-location {loc}");
        let nearest = xs
            .iter()
            .map(|x| (x - loc).abs())
            .fold(f64::INFINITY, f64::min);
        assert!(nearest > 99.0);
    }
}

#[test]
fn zero_weight_decoder_predicts_standard_softplus() {
    let mut m = tiny(Variant::TeTnp);
    let layers = m.decoder().mlp.layers.clone();
    for l in &layers {
        m.params.set(l.weight, Tensor::zeros([l.in_dim, l.out_dim]));
        m.params.set(l.bias.unwrap(), Tensor::zeros([l.out_dim]));
    }
    let pred = m.predict(&random_task(&mut rng(25), 3, 4)).unwrap();
    assert!(pred.mean.data().iter().all(|v| *v == 0.0));
    assert!(pred
        .var
        .data()
        .iter()
        .all(|v| (v - (2f64.ln() + 1e-8)).abs() < 1e-15));
}

#[test]
fn decoder_is_pointwise_and_matches_loop() {
    let m = tiny(Variant::Tnp);
    let dec = m.decoder();
    let z = Tensor::randn([5, 8], &mut rng(26));
    let tape = Tape::no_grad();
    let p = m.params.bind(&tape);
    let pred = dec.decode(&p, p.constant(z.clone())).unwrap().detach();
    let (mean, var) = decode_loop(&m.params, &dec.mlp, &z);
    assert_close(&pred.mean, &mean, 1e-12);
    assert_close(&pred.var, &var, 1e-12);
    let perm = [3, 0, 4, 1, 2];
    let permuted = dec
        .decode(&p, p.constant(z.permute_rows(&perm)))
        .unwrap()
        .detach();
    assert_eq!(permuted.mean, pred.mean.permute_rows(&perm));
}

#[test]
fn same_seed_same_parameters() {
    for v in Variant::ALL {
        let a = Model::new(ModelConfig::tiny(v), 99).unwrap();
        let b = Model::new(ModelConfig::tiny(v), 99).unwrap();
        assert_eq!(a.params, b.params);
    }
}
