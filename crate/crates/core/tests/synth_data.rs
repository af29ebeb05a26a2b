mod common;

use std::io::Cursor;

use stvg::nn::{Ctx, Embedding, ParamStore};
use stvg::synth_data::{
    cell_coverage, embed_tokens, generate_dataset, generate_sample, generate_scene, read_dataset, read_dataset_from,
    render, sample_seed, validate_gen, write_dataset, write_dataset_to, GroundingSample, SceneProgram, Vocab,
};
use stvg::{BBox, Error, GenConfig, Regime, Tensor};

fn cfg(regime: Regime, samples: usize) -> GenConfig {
    GenConfig { regime, samples, seed: 7, ..GenConfig::default() }
}

fn frame_cell<'a>(s: &'a GroundingSample, t: usize, r: usize, c: usize) -> &'a [f64] {
    let sh = s.frames.shape();
    let o = ((t * sh[1] + r) * sh[2] + c) * sh[3];
    &s.frames.data()[o..o + sh[3]]
}

fn clip_cell<'a>(s: &'a GroundingSample, k: usize, r: usize, c: usize) -> &'a [f64] {
    let sh = s.clips.shape();
    let o = ((k * sh[1] + r) * sh[2] + c) * sh[3];
    &s.clips.data()[o..o + sh[3]]
}

#[test]
fn same_seed_same_sample() {
    let g = cfg(Regime::Action, 4);
    assert_eq!(generate_dataset(&g).unwrap(), generate_dataset(&g).unwrap());
    let a = generate_sample(99, 0, &g).unwrap();
    assert_eq!(a, generate_sample(99, 0, &g).unwrap());
    assert_ne!(a.frames, generate_sample(100, 0, &g).unwrap().frames);
    assert_ne!(sample_seed(7, 0), sample_seed(7, 1));
    assert_ne!(sample_seed(7, 0), sample_seed(8, 0));
}

#[test]
fn samples_are_bounded_and_clip_aligned() {
    for regime in [Regime::Attribute, Regime::Action] {
        let g = cfg(regime, 40);
        let fpc = g.frames_per_clip();
        for s in generate_dataset(&g).unwrap() {
            assert_eq!(s.frames.shape(), &[16, 4, 4, g.frame_channels()]);
            assert_eq!(s.clips.shape(), &[8, 4, 4, g.clip_channels()]);
            assert!(s.span.start <= s.span.end && s.span.end < g.clips);
            assert!((g.min_span_clips..=g.max_span_clips).contains(&s.span.len()));
            assert_eq!(s.frame_span, (s.span.start * fpc, (s.span.end + 1) * fpc - 1));
            assert_eq!(s.gt_boxes.len(), s.frame_span.1 - s.frame_span.0 + 1);
            for b in &s.gt_boxes {
                let (x1, y1, x2, y2) = b.corners();
                for v in [x1, y1, x2, y2, b.cx, b.cy, b.w, b.h] {
                    assert!((-1e-12..=1.0 + 1e-12).contains(&v), "{b:?}");
                }
            }
            for v in s.frames.data().iter().chain(s.clips.data()) {
                assert!(v.is_finite() && (0.0..=1.0 + 1e-12).contains(v));
            }
            assert!(s.gt_box(s.frame_span.0).is_some());
            assert!(s.gt_box(s.frame_span.1 + 1).is_none());
        }
    }
}

#[test]
fn query_follows_the_template() {
    let v = Vocab::new(4, 3);
    assert_eq!(v.size(), 11);
    let (ids, mask) = v.query(2, 1, 7).unwrap();
    assert_eq!(ids, vec![Vocab::THE, 6, Vocab::OBJECT, Vocab::THAT, 9, Vocab::PAD, Vocab::PAD]);
    assert_eq!(mask, vec![true, true, true, true, true, false, false]);
    let (ids, mask) = v.query(0, 2, 3).unwrap();
    assert_eq!((ids, mask), (vec![4, 10, 0], vec![true, true, false]));
    assert!(v.query(0, 0, 1).is_err());
    assert!(v.is_attribute(4) && v.is_attribute(7) && !v.is_attribute(8));
    assert!(v.is_action(8) && !v.is_action(11));

    let s = generate_sample(3, 0, &GenConfig::default()).unwrap();
    let v = Vocab::new(4, 4);
    assert_eq!(s.tokens[1], v.attribute(s.target_attribute));
    assert_eq!(s.tokens[4], v.action(s.target_action));
}

#[test]
fn regimes_control_distractors() {
    for seed in 0..50 {
        let a = generate_scene(seed, &cfg(Regime::Attribute, 1)).unwrap();
        let b = generate_scene(seed, &GenConfig { distractors: 2, ..cfg(Regime::Action, 1) }).unwrap();
        for d in &a.distractors {
            assert_ne!(d.attribute, a.target.attribute);
            assert_ne!(d.action, a.target.action);
        }
        assert_eq!(b.distractors.len(), 2);
        for d in &b.distractors {
            assert_eq!(d.attribute, b.target.attribute);
            assert_ne!(d.action, b.target.action);
        }
        // footprints never share a cell
        let foot = |e: &stvg::synth_data::Entity| -> Vec<bool> {
            (0..16).map(|k| e.boxes.iter().any(|&bx| cell_coverage(bx, k / 4, k % 4, 4, 4) > 0.0)).collect()
        };
        let fs: Vec<Vec<bool>> = b.entities().map(foot).collect();
        for k in 0..16 {
            assert!(fs.iter().filter(|f| f[k]).count() <= 1);
        }
    }
}

/// Reads the box stored at the target's cell. Attribute regime: the cell with
/// the most target-attribute coverage in the frame. Action regime: among cells
/// showing the target action in the enclosing clip, the one most covered in the frame.
fn decode_box(s: &GroundingSample, g: &GenConfig, t: usize) -> Option<BBox> {
    let na = g.attributes;
    let clip = t / g.frames_per_clip();
    let mut best: Option<((usize, usize), f64)> = None;
    for r in 0..g.grid_h {
        for c in 0..g.grid_w {
            let f = frame_cell(s, t, r, c);
            let eligible = match g.regime {
                Regime::Attribute => true,
                Regime::Action => clip_cell(s, clip, r, c)[na + 1 + s.target_action] > 0.0,
            };
            let score = f[s.target_attribute];
            if eligible && score > 0.0 && best.map_or(true, |(_, b)| score > b) {
                best = Some(((r, c), score));
            }
        }
    }
    best.map(|((r, c), _)| BBox::from_slice(&frame_cell(s, t, r, c)[na + 1..na + 5]))
}

#[test]
fn rule_based_decoder_solves_both_regimes() {
    for regime in [Regime::Attribute, Regime::Action] {
        let g = GenConfig { distractors: 2, ..cfg(regime, 60) };
        for s in generate_dataset(&g).unwrap() {
            for t in s.frame_span.0..=s.frame_span.1 {
                assert_eq!(decode_box(&s, &g, t), s.gt_box(t), "{regime:?} sample {} frame {t}", s.id);
            }
        }
    }
}

fn swap_roles(scene: &SceneProgram) -> SceneProgram {
    let mut out = scene.clone();
    std::mem::swap(&mut out.target.boxes, &mut out.distractors[0].boxes);
    out
}

#[test]
fn single_frames_cannot_identify_the_target_under_the_action_regime() {
    let g = cfg(Regime::Action, 1);
    let mut correct = 0;
    let mut total = 0;
    for seed in 0..40 {
        let scene = generate_scene(seed, &g).unwrap();
        let swapped = swap_roles(&scene);
        let a = render(&scene, 0, &g).unwrap();
        let b = render(&swapped, 0, &g).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.tokens, b.tokens);
        // any decoder that only sees one frame and the query answers both the same way
        for t in 0..g.video_frames {
            let attr = (0..16)
                .max_by(|&x, &y| {
                    let fx = frame_cell(&a, t, x / 4, x % 4)[a.target_attribute];
                    let fy = frame_cell(&a, t, y / 4, y % 4)[a.target_attribute];
                    fx.partial_cmp(&fy).unwrap().then(y.cmp(&x))
                })
                .unwrap();
            let guess = BBox::from_slice(&frame_cell(&a, t, attr / 4, attr % 4)[g.attributes + 1..g.attributes + 5]);
            correct += (guess == scene.target.boxes[t]) as usize + (guess == swapped.target.boxes[t]) as usize;
            total += 2;
        }
    }
    let chance = 1.0 / (1 + g.distractors) as f64;
    assert!(correct as f64 / total as f64 <= chance);
}

#[test]
fn attribute_regime_is_solvable_from_single_frames() {
    let g = cfg(Regime::Attribute, 1);
    let scene = generate_scene(5, &g).unwrap();
    let a = render(&scene, 0, &g).unwrap();
    let b = render(&swap_roles(&scene), 0, &g).unwrap();
    assert_ne!(a.frames, b.frames);
}

#[test]
fn clip_channels_accumulate_frame_coverage() {
    let g = cfg(Regime::Action, 1);
    let s = generate_sample(11, 0, &g).unwrap();
    let na = g.attributes;
    let fpc = g.frames_per_clip();
    for k in 0..g.clips {
        for r in 0..4 {
            for c in 0..4 {
                let want: f64 = (k * fpc..(k + 1) * fpc).map(|t| frame_cell(&s, t, r, c)[na]).sum::<f64>() / fpc as f64;
                assert!((clip_cell(&s, k, r, c)[na] - want).abs() < 1e-12);
                if !s.span.contains(k) {
                    assert_eq!(clip_cell(&s, k, r, c)[na + 1 + s.target_action], 0.0);
                }
            }
        }
    }
}

#[test]
fn bad_generator_configs_are_rejected() {
    let base = GenConfig::default();
    for bad in [
        GenConfig { video_frames: 15, ..base.clone() },
        GenConfig { min_span_clips: 0, ..base.clone() },
        GenConfig { max_span_clips: 9, ..base.clone() },
        GenConfig { min_box: 0.4, max_box: 0.3, ..base.clone() },
        GenConfig { attributes: 1, ..base.clone() },
        GenConfig { distractors: 16, ..base.clone() },
    ] {
        assert!(matches!(validate_gen(&bad), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn identity_table_embeds_to_coordinates() {
    let mut store = ParamStore::new(0);
    let e = Embedding::new(&mut store, "emb", 4, 4);
    let mut eye = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 5] = 1.0;
    }
    store.set("emb.table", eye).unwrap();
    let ctx = Ctx::new(&store);
    let t = embed_tokens(&ctx, &e, &[2, 0, 3], &[true, true, false]).unwrap();
    assert_eq!(t.tokens.to_vec(), vec![0., 0., 1., 0., 1., 0., 0., 0., 0., 0., 0., 1.]);
    assert_eq!(t.mask, vec![true, true, false]);
    assert!(embed_tokens(&ctx, &e, &[4], &[true]).is_err());
}

#[test]
fn embedding_gradient_is_sparse_and_aliased() {
    let mut store = ParamStore::new(1);
    let e = Embedding::new(&mut store, "emb", 5, 3);
    let ctx = Ctx::new(&store);
    let t = embed_tokens(&ctx, &e, &[1, 3, 1], &[true; 3]).unwrap();
    let w = ctx.constant(Tensor::new(&[3, 3], (1..=9).map(f64::from).collect()).unwrap());
    let g = t.tokens.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
    let grad = ctx.param_grads(&g)[0].clone().unwrap();
    assert_eq!(grad, vec![0., 0., 0., 8., 10., 12., 0., 0., 0., 4., 5., 6., 0., 0., 0.]);

    // a duplicated id reads one row: moving the row moves both positions
    let mut moved = store.clone();
    let mut table = store.get(store.find("emb.table").unwrap()).clone();
    table.data_mut()[3] += 1.0;
    moved.set("emb.table", table).unwrap();
    let c2 = Ctx::new(&moved);
    let t2 = embed_tokens(&c2, &e, &[1, 3, 1], &[true; 3]).unwrap().tokens.to_vec();
    let t1 = t.tokens.to_vec();
    assert_eq!(t2[0] - t1[0], 1.0);
    assert_eq!(t2[6] - t1[6], 1.0);
    assert_eq!(t2[3], t1[3]);
}

#[test]
fn dataset_round_trips() {
    let data = generate_dataset(&cfg(Regime::Action, 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.stvd");
    write_dataset(&data, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), data);
}

#[test]
fn truncated_dataset_is_a_parse_error() {
    let data = generate_dataset(&cfg(Regime::Attribute, 2)).unwrap();
    let mut buf = Vec::new();
    write_dataset_to(&mut buf, &data).unwrap();
    for cut in [0, 3, 10, 40, buf.len() / 2, buf.len() - 1] {
        let err = read_dataset_from(&mut Cursor::new(&buf[..cut])).unwrap_err();
        assert!(matches!(err, Error::Parse(_)), "cut {cut}: {err:?}");
    }
}

#[test]
fn manifest_payload_mismatch_is_a_validation_error() {
    let data = generate_dataset(&cfg(Regime::Attribute, 2)).unwrap();
    let mut buf = Vec::new();
    write_dataset_to(&mut buf, &data).unwrap();
    let text = String::from_utf8_lossy(&buf).into_owned();
    let at = text.find("grid_h = 4").unwrap() + "grid_h = ".len();
    buf[at] = b'5';
    let err = read_dataset_from(&mut Cursor::new(&buf)).unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err:?}");

    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(read_dataset_from(&mut Cursor::new(&bad)), Err(Error::Parse(_))));
}
