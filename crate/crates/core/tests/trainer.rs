mod common;

use std::io::Cursor;

use stvg::nn::Ctx;
use stvg::synth_data::generate_dataset;
use stvg::trainer::{
    evaluate, infer, median, pass_count, render_ablation_table, run_ablation, split_datasets, targets_for,
    uniform_sample_frames, Checkpoint, Trainer, ABLATION_ROWS,
};
use stvg::{ArchConfig, Error, ModelInput, RunConfig};

/// Small enough that a step takes a few milliseconds.
fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.arch = ArchConfig { layers: 1, d_model: 8, d_moment: 4, heads: 2, ffn_ratio: 2, conv_layers: 1, ln_eps: 1e-5 };
    c.gen.video_frames = 8;
    c.gen.clips = 4;
    c.gen.grid_h = 3;
    c.gen.grid_w = 3;
    c.gen.min_span_clips = 1;
    c.gen.max_span_clips = 3;
    c.gen.samples = 4;
    c.train.steps = 3;
    c.train.batch_size = 2;
    c.train.train_frames = 4;
    c.train.test_frames = 4;
    c.train.lr = 1e-3;
    c
}

fn params_of(t: &Trainer) -> Vec<Vec<f64>> {
    t.model.params().iter().map(|(_, t)| t.data().to_vec()).collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let mut c = tiny();
    c.train.lr = 0.0;
    let data = generate_dataset(&c.gen).unwrap();
    let mut t = Trainer::new(c).unwrap();
    let before = params_of(&t);
    t.run(&data).unwrap();
    assert_eq!(params_of(&t), before);
    assert_eq!(t.history.len(), 3);
}

#[test]
fn training_moves_parameters_and_logs_each_step() {
    let c = tiny();
    let data = generate_dataset(&c.gen).unwrap();
    let mut t = Trainer::new(c).unwrap();
    let before = params_of(&t);
    let log = t.train_step(&data).unwrap();
    assert_eq!(log.step, 1);
    assert!(log.loss.total.is_finite() && log.loss.total > 0.0);
    assert_ne!(params_of(&t), before);
    let json = serde_json::to_value(log).unwrap();
    for k in ["step", "l1", "giou", "aux_static", "temporal", "aux_dynamic", "total"] {
        assert!(json.get(k).is_some(), "{k}");
    }
}

#[test]
fn fixed_seed_training_is_bit_reproducible() {
    let c = tiny();
    let data = generate_dataset(&c.gen).unwrap();
    let run = || {
        let mut t = Trainer::new(c.clone()).unwrap();
        t.run(&data).unwrap();
        (t.history.clone(), params_of(&t))
    };
    let (h1, p1) = run();
    let (h2, p2) = run();
    assert_eq!(h1, h2);
    assert_eq!(p1, p2);

    let mut other = c.clone();
    other.train.seed = 1;
    let mut t = Trainer::new(other).unwrap();
    t.run(&data).unwrap();
    assert_ne!(t.history, h1);
}

#[test]
fn checkpoint_round_trip_preserves_inference() {
    let c = tiny();
    let data = generate_dataset(&c.gen).unwrap();
    let mut t = Trainer::new(c.clone()).unwrap();
    t.run(&data).unwrap();
    let ck = t.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.stvc");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.config, c);
    assert_eq!(back.step, 3);
    assert_eq!(back.rng, ck.rng);
    assert_eq!(back.rng.restore(), ck.rng.restore());
    for s in &data {
        assert_eq!(infer(&back.model, s, 4).unwrap(), infer(&t.model, s, 4).unwrap());
    }
    assert_eq!(evaluate(&back.model, &data, 4).unwrap(), evaluate(&t.model, &data, 4).unwrap());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let c = tiny();
    let t = Trainer::new(c).unwrap();
    let mut buf = Vec::new();
    t.checkpoint().write_to(&mut buf).unwrap();
    for cut in [0, 5, 30, buf.len() / 2, buf.len() - 1] {
        assert!(matches!(Checkpoint::read_from(&mut Cursor::new(&buf[..cut])), Err(Error::Parse(_))), "cut {cut}");
    }
    let mut bad = buf.clone();
    bad[1] = b'?';
    assert!(matches!(Checkpoint::read_from(&mut Cursor::new(&bad)), Err(Error::Parse(_))));
}

#[test]
fn single_pass_inference_matches_the_forward_pass() {
    let c = tiny();
    let data = generate_dataset(&c.gen).unwrap();
    let t = Trainer::new(c).unwrap();
    for s in &data {
        let all: Vec<usize> = (0..8).collect();
        let out =
            t.model.forward(&Ctx::inference(t.model.params()), &ModelInput::from_sample(s, &all).unwrap()).unwrap();
        let p = infer(&t.model, s, 8).unwrap();
        let boxes = out.boxes.to_vec();
        for &(f, b) in &p.boxes {
            assert_eq!(b.to_array().to_vec(), boxes[f * 4..f * 4 + 4].to_vec());
        }
        let scores = out.frame_scores.to_vec();
        assert_eq!(p.frame_scores.iter().map(|s| s.1).collect::<Vec<_>>(), scores);
        let map = out.score_map.value();
        assert_eq!(p.span, stvg::heads::select_span(&map).unwrap());
        assert_eq!(p.span_score, map.at(&[p.span.start, p.span.end]));
        assert_eq!(p.seconds, (p.span.start as f64 * 2.0, (p.span.end + 1) as f64 * 2.0));
    }
}

#[test]
fn multi_pass_inference_covers_every_frame() {
    let c = tiny();
    let data = generate_dataset(&c.gen).unwrap();
    let t = Trainer::new(c).unwrap();
    let p = infer(&t.model, &data[0], 3).unwrap();
    assert_eq!(p.frame_scores.iter().map(|s| s.0).collect::<Vec<_>>(), (0..8).collect::<Vec<_>>());
}

#[test]
fn sampling_covers_the_video_across_passes() {
    for (tv, n) in [(16, 8), (16, 5), (96, 48), (10, 3), (4, 9)] {
        let mut seen = vec![false; tv];
        for p in 0..pass_count(tv, n) {
            let f = uniform_sample_frames(tv, n, p);
            assert_eq!(f.len(), n.min(tv));
            assert!(f.windows(2).all(|w| w[0] <= w[1]));
            f.iter().for_each(|&i| seen[i] = true);
        }
        assert!(seen.iter().all(|&s| s), "{tv} {n}");
    }
}

#[test]
fn targets_mark_span_frames() {
    let c = tiny();
    let s = &generate_dataset(&c.gen).unwrap()[0];
    let frames: Vec<usize> = (0..8).collect();
    let tg = targets_for(s, &frames).unwrap();
    for (k, &f) in frames.iter().enumerate() {
        assert_eq!(tg.frame_mask[k], (s.frame_span.0..=s.frame_span.1).contains(&f));
        if tg.frame_mask[k] {
            assert_eq!(&tg.boxes.data()[k * 4..k * 4 + 4], &s.gt_box(f).unwrap().to_array());
        }
    }
    assert_eq!(tg.clip_mask, (0..4).map(|i| s.span.contains(i)).collect::<Vec<_>>());
}

#[test]
fn random_init_evaluation_is_well_formed() {
    let c = tiny();
    let data = generate_dataset(&c.gen).unwrap();
    let t = Trainer::new(c).unwrap();
    let rep = evaluate(&t.model, &data, 4).unwrap();
    assert_eq!(rep.records.len(), 4);
    assert_eq!(rep.aggregate.count, 4);
    for r in &rep.records {
        assert!((0.0..=1.0).contains(&r.viou));
    }
    let mut out = Vec::new();
    rep.write_jsonl(&mut out).unwrap();
    let lines: Vec<serde_json::Value> =
        String::from_utf8(out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 9);
    assert_eq!(lines[8]["kind"], "aggregate");
}

#[test]
fn non_finite_inputs_report_divergence() {
    let c = tiny();
    let mut data = generate_dataset(&c.gen).unwrap();
    for s in &mut data {
        s.clips.data_mut()[0] = f64::NAN;
    }
    let mut t = Trainer::new(c).unwrap();
    assert!(matches!(t.train_step(&data), Err(Error::Diverged { step: 0, .. })));
    assert!(t.train_step(&[]).is_err());
}

#[test]
fn cosine_decay_reaches_zero() {
    let mut c = tiny().train;
    c.steps = 100;
    assert_eq!(c.lr_at(0), c.lr);
    assert_eq!(c.lr_at(57), c.lr);
    c.lr_decay = true;
    assert_eq!(c.lr_at(0), c.lr);
    assert!((c.lr_at(50) - c.lr / 2.0).abs() < 1e-15);
    assert!(c.lr_at(100).abs() < 1e-18);
}

#[test]
fn config_text_round_trips() {
    let mut c = tiny();
    c.train.lr_decay = true;
    c.train.no_d2s = true;
    c.gen.regime = stvg::Regime::Action;
    assert_eq!(RunConfig::parse(&c.to_kv()).unwrap(), c);
    assert!(RunConfig::parse("bogus = 1").is_err());
    assert!(RunConfig::parse("steps = x").is_err());
    assert!(RunConfig::parse("steps = 1\nsteps = 2").is_err());
}

#[test]
fn ablation_reports_four_rows() {
    let mut c = tiny();
    c.train.steps = 1;
    c.train.test_samples = 3;
    let (train, test) = split_datasets(&c).unwrap();
    assert_eq!((train.len(), test.len()), (4, 3));
    assert_ne!(train[0].frames, test[0].frames);
    let names: Vec<&str> = ABLATION_ROWS.iter().map(|r| r.0).collect();
    let mut seen = Vec::new();
    let rows = run_ablation(&c, &[0, 1], &names, |n, s, _| seen.push((n.to_string(), s))).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(seen.len(), 8);
    for r in &rows {
        assert_eq!(r.runs.len(), 2);
        assert_eq!(r.median.m_viou, median(&r.runs.iter().map(|a| a.m_viou).collect::<Vec<_>>()));
    }
    let table = render_ablation_table(&rows);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 6);
    for (line, name) in lines[2..].iter().zip(names) {
        assert!(line.starts_with(&format!("| {name} |")));
        assert_eq!(line.matches('|').count(), 5);
    }
}

#[test]
fn whole_model_loss_passes_grad_check() {
    let t0 = std::time::Instant::now();
    let rep = stvg::trainer::loss_grad_check(&stvg::trainer::grad_check_config(), &stvg::GradCheckOptions::default())
        .unwrap();
    assert!(rep.passed, "max rel err {} at {:?}", rep.max_rel_err, rep.worst);
    eprintln!("{} gradients checked in {:.1}s", rep.checked, t0.elapsed().as_secs_f64());
}
