mod common;

use common::{param_tensors, random, randomize, rng, toy, toy_input, zero_where};
use proptest::prelude::*;
use stvg::interaction::{
    frame_clip_alignment, frame_gates_to_clips, frame_to_clip_pooling, DynamicToStatic, StaticToDynamic,
};
use stvg::nn::{Ctx, ParamStore};
use stvg::static_branch::TextFeatures;
use stvg::synth_data::embed_tokens;
use stvg::{GroundingModel, Tensor};

fn s2d_block(seed: u64) -> (ParamStore, StaticToDynamic) {
    let cfg = toy(3, 2, 2, 3, 8, 1);
    let mut store = ParamStore::new(seed);
    let b = StaticToDynamic::new(&mut store, "s2d", &cfg);
    randomize(&mut store, seed, 0.8);
    (store, b)
}

#[test]
fn zero_gate_reduces_to_layer_norm() {
    let (store, b) = s2d_block(1);
    let ctx = Ctx::new(&store);
    let fv = ctx.constant(random(&[3, 4, 8], &mut rng(2)));
    let out = b.forward(&ctx, &fv, &ctx.constant(Tensor::zeros(&[3, 4]))).unwrap();
    assert_eq!(out.to_vec(), b.norm.forward(&ctx, &fv).unwrap().to_vec());
}

#[test]
fn zero_fc_reduces_to_layer_norm() {
    let (mut store, b) = s2d_block(3);
    zero_where(&mut store, |n| n.starts_with("s2d.fc"));
    let ctx = Ctx::new(&store);
    let mut r = rng(4);
    let fv = ctx.constant(random(&[3, 4, 8], &mut r));
    let gate = ctx.constant(common::uniform(&[3, 4], 0.0, 1.0, &mut r));
    let out = b.forward(&ctx, &fv, &gate).unwrap();
    assert_eq!(out.to_vec(), b.norm.forward(&ctx, &fv).unwrap().to_vec());
}

#[test]
fn single_site_gate_applies_the_full_residual() {
    let cfg = toy(3, 1, 1, 3, 8, 1);
    let mut store = ParamStore::new(5);
    let b = StaticToDynamic::new(&mut store, "s2d", &cfg);
    randomize(&mut store, 5, 0.8);
    let ctx = Ctx::new(&store);
    let fv = ctx.constant(random(&[3, 1, 8], &mut rng(6)));
    let out = b.forward(&ctx, &fv, &ctx.constant(Tensor::full(&[3, 1], 1.0))).unwrap();
    let want = b.norm.forward(&ctx, &fv.add(&b.fc.forward(&ctx, &fv).unwrap()).unwrap()).unwrap();
    assert_eq!(out.to_vec(), want.to_vec());
}

#[test]
fn gate_shape_must_match_features() {
    let (store, b) = s2d_block(7);
    let ctx = Ctx::new(&store);
    let fv = ctx.constant(Tensor::zeros(&[3, 4, 8]));
    assert!(b.forward(&ctx, &fv, &ctx.constant(Tensor::zeros(&[3, 5]))).is_err());
    assert!(b.forward(&ctx, &fv, &ctx.constant(Tensor::zeros(&[2, 4]))).is_err());
}

fn d2s_block(seed: u64, h: usize, w: usize) -> (ParamStore, DynamicToStatic) {
    let cfg = toy(3, h, w, 3, 8, 1);
    let mut store = ParamStore::new(seed);
    let b = DynamicToStatic::new(&mut store, "d2s", &cfg);
    randomize(&mut store, seed, 0.8);
    (store, b)
}

#[test]
fn enrichment_with_zero_output_projections_is_identity() {
    let (mut store, b) = d2s_block(8, 2, 2);
    zero_where(&mut store, |n| n.contains(".out."));
    let ctx = Ctx::new(&store);
    let mut r = rng(9);
    let q = random(&[4, 8], &mut r);
    let fv = ctx.constant(random(&[3, 4, 8], &mut r));
    let e = b.forward(&ctx, &ctx.constant(q.clone()), &fv, &[0, 0, 1, 2], &[0.0, 1.0, 2.0, 5.0]).unwrap();
    assert_eq!(e.queries.to_vec(), q.data());
}

#[test]
fn each_query_reads_only_its_own_clip() {
    let (store, b) = d2s_block(10, 2, 2);
    let mut r = rng(11);
    let q = random(&[2, 8], &mut r);
    let fv = random(&[3, 4, 8], &mut r);
    let mut fv2 = fv.clone();
    fv2.data_mut()[32..64].iter_mut().for_each(|v| *v += 1.0);
    let run = |fv: &Tensor| {
        let ctx = Ctx::new(&store);
        let e = b.forward(&ctx, &ctx.constant(q.clone()), &ctx.constant(fv.clone()), &[0, 2], &[0.0, 4.0]).unwrap();
        (e.queries.to_vec(), e.cross_weights.to_vec())
    };
    assert_eq!(run(&fv), run(&fv2));
}

#[test]
fn degenerate_enrichment_weights_are_one() {
    let (store, b) = d2s_block(12, 1, 1);
    let ctx = Ctx::new(&store);
    let mut r = rng(13);
    let e = b
        .forward(&ctx, &ctx.constant(random(&[1, 8], &mut r)), &ctx.constant(random(&[3, 1, 8], &mut r)), &[1], &[3.0])
        .unwrap();
    assert_eq!(e.cross_weights.to_vec(), vec![1.0; 2]);
    assert_eq!(e.temporal_weights.to_vec(), vec![1.0; 2]);
}

#[test]
fn enrichment_rejects_bad_alignment() {
    let (store, b) = d2s_block(14, 2, 2);
    let ctx = Ctx::new(&store);
    let q = ctx.constant(Tensor::zeros(&[2, 8]));
    let fv = ctx.constant(Tensor::zeros(&[3, 4, 8]));
    assert!(b.forward(&ctx, &q, &fv, &[0], &[0.0, 1.0]).is_err());
    assert!(b.forward(&ctx, &q, &fv, &[0, 3], &[0.0, 1.0]).is_err());
    assert!(b.forward(&ctx, &q, &ctx.constant(Tensor::zeros(&[3, 4, 6])), &[0, 1], &[0.0, 1.0]).is_err());
}

#[test]
fn frame_gates_pool_to_clip_gates() {
    let store = ParamStore::new(0);
    let ctx = Ctx::new(&store);
    let gates = Tensor::new(&[3, 2], vec![0.2, 0.8, 0.6, 0.4, 1.0, 0.0]).unwrap();
    let out = frame_gates_to_clips(&ctx, &ctx.constant(gates), &[0, 0, 2], 4).unwrap().to_vec();
    let want = [0.4, 0.6, 0.2, 0.8, 1.0, 0.0, 1.0, 0.0];
    common::assert_close(&out, &want, 1e-15);
}

proptest! {
    #[test]
    fn alignment_is_monotone_and_balanced(clips in 1usize..20, per in 1usize..6) {
        let frames = clips * per;
        let m = frame_clip_alignment(frames, clips);
        prop_assert_eq!(m.len(), frames);
        prop_assert!(m.windows(2).all(|w| w[0] <= w[1]));
        for c in 0..clips {
            prop_assert_eq!(m.iter().filter(|&&x| x == c).count(), per);
        }
    }

    #[test]
    fn pooling_rows_are_distributions(map in prop::collection::vec(0usize..6, 1..10)) {
        let p = frame_to_clip_pooling(&map, 6).unwrap();
        for (c, row) in p.data().chunks(map.len()).enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            if map.contains(&c) {
                for (i, &v) in row.iter().enumerate() {
                    prop_assert_eq!(v > 0.0, map[i] == c);
                }
            }
        }
    }
}

fn model(s2d: bool, d2s: bool) -> GroundingModel {
    let mut cfg = toy(3, 2, 2, 4, 8, 2);
    cfg.s2d = s2d;
    cfg.d2s = d2s;
    GroundingModel::new(cfg, 42).unwrap()
}

#[test]
fn disabled_blocks_match_uncoupled_branches_bit_for_bit() {
    let input = toy_input(&model(true, true).config().clone(), 4, 1);

    // Without either block both branches run as if alone.
    let m = model(false, false);
    let ctx = Ctx::new(m.params());
    let out = m.forward(&ctx, &input).unwrap();
    let text: TextFeatures = embed_tokens(&ctx, &m.embed, &input.tokens, &input.token_mask).unwrap();
    let frames = ctx.constant(input.frames.clone());
    let alone = m.static_branch.run(&ctx, &frames, &text).unwrap();
    for (q, st) in out.queries.iter().zip(&alone.steps) {
        assert_eq!(q.to_vec(), st.queries.to_vec());
    }
    let clips = ctx.constant(input.clips.clone());
    let dyn_alone = m.dynamic_branch.forward(&ctx, &clips, &text.tokens, &text.mask, None).unwrap();
    for (a, b) in out.dynamic.iter().zip(&dyn_alone) {
        assert_eq!(a.visual.to_vec(), b.visual.to_vec());
        assert_eq!(a.text.to_vec(), b.text.to_vec());
    }

    // Gating alone leaves the static side untouched and matches an explicitly gated stack.
    let m = model(true, false);
    let ctx = Ctx::new(m.params());
    let out = m.forward(&ctx, &input).unwrap();
    let text = embed_tokens(&ctx, &m.embed, &input.tokens, &input.token_mask).unwrap();
    let alone = m.static_branch.run(&ctx, &ctx.constant(input.frames.clone()), &text).unwrap();
    for (q, st) in out.queries.iter().zip(&alone.steps) {
        assert_eq!(q.to_vec(), st.queries.to_vec());
    }
    let map = input.frame_to_clip();
    let gates: Vec<_> =
        alone.steps.iter().map(|s| frame_gates_to_clips(&ctx, &s.cross_attention, &map, 3).unwrap()).collect();
    let gated = m
        .dynamic_branch
        .forward(&ctx, &ctx.constant(input.clips.clone()), &text.tokens, &text.mask, Some((&gates, &m.s2d)))
        .unwrap();
    for (a, b) in out.dynamic.iter().zip(&gated) {
        assert_eq!(a.visual.to_vec(), b.visual.to_vec());
    }

    // Toggling flags on an existing model is the same as building it that way.
    let mut toggled = model(true, true);
    toggled.set_interaction(false, false);
    let a = toggled.forward(&Ctx::new(toggled.params()), &input).unwrap();
    let b = model(false, false);
    let b = b.forward(&Ctx::new(b.params()), &input).unwrap();
    assert_eq!(a.boxes.to_vec(), b.boxes.to_vec());
    assert_eq!(a.score_map.to_vec(), b.score_map.to_vec());
}

fn grad_norm(
    m: &GroundingModel,
    input: &stvg::ModelInput,
    prefix: &str,
    readout: impl Fn(&stvg::ForwardOutput) -> stvg::Var,
) -> f64 {
    let ctx = Ctx::new(m.params());
    let out = m.forward(&ctx, input).unwrap();
    let grads = readout(&out).backward().unwrap();
    let per = ctx.param_grads(&grads);
    m.params()
        .ids()
        .zip(per)
        .filter(|(id, _)| m.params().name(*id).starts_with(prefix))
        .flat_map(|(_, g)| g.unwrap_or_default())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

#[test]
fn gradients_cross_between_branches_only_when_coupled() {
    let input = toy_input(&model(true, true).config().clone(), 4, 2);
    let boxes = |o: &stvg::ForwardOutput| o.boxes.sum_all().unwrap();
    let span = |o: &stvg::ForwardOutput| o.score_map.sum_all().unwrap();

    let on = model(true, true);
    assert!(grad_norm(&on, &input, "dynamic.clip_proj", boxes) > 1e-8);
    assert!(grad_norm(&on, &input, "static.query", span) > 1e-8);
    assert!(grad_norm(&on, &input, "static.frame_proj", span) > 1e-8);

    let off = model(false, false);
    assert_eq!(grad_norm(&off, &input, "dynamic.clip_proj", boxes), 0.0);
    assert_eq!(grad_norm(&off, &input, "static.query", span), 0.0);
    assert_eq!(grad_norm(&off, &input, "interaction.", boxes), 0.0);

    // each direction on its own
    assert!(grad_norm(&model(false, true), &input, "dynamic.clip_proj", boxes) > 1e-8);
    assert_eq!(grad_norm(&model(false, true), &input, "static.query", span), 0.0);
    assert!(grad_norm(&model(true, false), &input, "static.query", span) > 1e-8);
    assert_eq!(grad_norm(&model(true, false), &input, "dynamic.clip_proj", boxes), 0.0);
}

#[test]
fn gate_gradient_passes_grad_check() {
    let (store, b) = s2d_block(20);
    let n = store.len();
    let mut r = rng(21);
    let mut inputs = param_tensors(&store);
    inputs.push(random(&[3, 4, 8], &mut r));
    inputs.push(common::uniform(&[3, 4], 0.0, 1.0, &mut r));
    let readout = random(&[3, 4, 8], &mut r);
    let rep = stvg::grad_check(
        |v| {
            let ctx = Ctx::with_bindings(&store, &v[..n])?;
            b.forward(&ctx, &v[n], &v[n + 1])?.mul(&ctx.constant(readout.clone()))?.sum_all()
        },
        &inputs,
        &stvg::GradCheckOptions::default(),
    )
    .unwrap();
    assert!(rep.passed, "max rel err {}", rep.max_rel_err);
}
