#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stvg::{ModelConfig, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Small model geometry: `t` clips, `h×w` grid, `l` token slots, width `d`, depth `n`.
pub fn toy(t: usize, h: usize, w: usize, l: usize, d: usize, n: usize) -> ModelConfig {
    ModelConfig {
        layers: n,
        d_model: d,
        d_moment: 4,
        clips: t,
        grid_h: h,
        grid_w: w,
        max_tokens: l,
        heads: 2,
        ffn_ratio: 2,
        conv_layers: 1,
        vocab_size: 7,
        frame_channels: 3,
        clip_channels: 4,
        ln_eps: 1e-5,
        s2d: true,
        d2s: true,
    }
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y} (tol {tol})");
    }
}

/// Current parameter values in store order, for use as grad_check inputs.
pub fn param_tensors(store: &stvg::nn::ParamStore) -> Vec<Tensor> {
    store.ids().map(|id| store.get(id).clone()).collect()
}

/// Overwrites every parameter with uniform noise in ±`scale`.
pub fn randomize(store: &mut stvg::nn::ParamStore, seed: u64, scale: f64) {
    let mut r = rng(seed);
    let items: Vec<(String, Vec<usize>)> = store.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
    for (name, shape) in items {
        store.set(&name, uniform(&shape, -scale, scale, &mut r)).unwrap();
    }
}

/// Zeroes every parameter whose name satisfies `pred`.
pub fn zero_where(store: &mut stvg::nn::ParamStore, pred: impl Fn(&str) -> bool) {
    let items: Vec<(String, Vec<usize>)> =
        store.iter().filter(|(n, _)| pred(n)).map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
    for (name, shape) in items {
        store.set(&name, Tensor::zeros(&shape)).unwrap();
    }
}

/// A model input matching [`toy`] geometry with `f` frames drawn evenly from a `2t`-frame video.
pub fn toy_input(cfg: &ModelConfig, f: usize, seed: u64) -> stvg::ModelInput {
    let mut r = rng(seed);
    let (h, w, t) = (cfg.grid_h, cfg.grid_w, cfg.clips);
    let video_frames = 2 * t;
    let frame_indices: Vec<usize> = (0..f).map(|i| i * video_frames / f).collect();
    let tokens: Vec<usize> = (0..cfg.max_tokens).map(|_| r.gen_range(1..cfg.vocab_size)).collect();
    let mut token_mask = vec![true; cfg.max_tokens];
    if cfg.max_tokens > 2 {
        token_mask[cfg.max_tokens - 1] = false;
    }
    stvg::ModelInput {
        frames: random(&[f, h, w, cfg.frame_channels], &mut r),
        frame_indices,
        video_frames,
        clips: random(&[t, h, w, cfg.clip_channels], &mut r),
        tokens,
        token_mask,
    }
}
