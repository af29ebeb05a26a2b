//! Synthetic grounding scenes rendered straight to feature grids.
//!
//! A scene holds a target entity and some distractors, each a box drifting
//! over the unit square with an appearance attribute and an action it performs
//! during one clip-aligned span. Frame grids show appearance and box geometry;
//! clip grids also show which action is being performed.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{GenConfig, Regime};
use crate::error::{Error, Result};
use crate::heads::{BBox, TemporalSpan};
use crate::nn::{Ctx, Embedding};
use crate::static_branch::TextFeatures;
use crate::tensor::{read_exact, read_u32, read_u64, Tensor};

/// Token ids: padding, three function words, then attributes, then actions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub attributes: usize,
    pub actions: usize,
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const THE: usize = 1;
    pub const OBJECT: usize = 2;
    pub const THAT: usize = 3;
    const FIXED: usize = 4;

    pub fn new(attributes: usize, actions: usize) -> Self {
        Self { attributes, actions }
    }

    pub fn size(&self) -> usize {
        Self::FIXED + self.attributes + self.actions
    }

    pub fn attribute(&self, a: usize) -> usize {
        Self::FIXED + a
    }

    pub fn action(&self, a: usize) -> usize {
        Self::FIXED + self.attributes + a
    }

    pub fn is_attribute(&self, id: usize) -> bool {
        (Self::FIXED..Self::FIXED + self.attributes).contains(&id)
    }

    pub fn is_action(&self, id: usize) -> bool {
        (Self::FIXED + self.attributes..self.size()).contains(&id)
    }

    /// "the <attr> object that <action>", or just "<attr> <action>" when fewer
    /// than five slots are available; padded to `slots` with a mask.
    pub fn query(&self, attribute: usize, action: usize, slots: usize) -> Result<(Vec<usize>, Vec<bool>)> {
        let mut ids = if slots >= 5 {
            vec![Self::THE, self.attribute(attribute), Self::OBJECT, Self::THAT, self.action(action)]
        } else if slots >= 2 {
            vec![self.attribute(attribute), self.action(action)]
        } else {
            return Err(Error::Config(format!("{slots} token slots cannot hold a query")));
        };
        let mut mask = vec![true; ids.len()];
        ids.resize(slots, Self::PAD);
        mask.resize(slots, false);
        Ok((ids, mask))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entity {
    pub attribute: usize,
    pub action: usize,
    /// Clip span during which the action is performed.
    pub span: TemporalSpan,
    /// One box per video frame.
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneProgram {
    pub seed: u64,
    pub video_frames: usize,
    pub clips: usize,
    pub target: Entity,
    pub distractors: Vec<Entity>,
}

impl SceneProgram {
    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        std::iter::once(&self.target).chain(&self.distractors)
    }

    /// Inclusive frame range of a clip span.
    pub fn frame_range(&self, span: TemporalSpan) -> (usize, usize) {
        let fpc = self.video_frames / self.clips;
        (span.start * fpc, (span.end + 1) * fpc - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingSample {
    pub id: u64,
    pub seed: u64,
    /// `[T_f, H, W, c_f]`
    pub frames: Tensor,
    /// `[T, H, W, c_c]`
    pub clips: Tensor,
    pub tokens: Vec<usize>,
    pub token_mask: Vec<bool>,
    pub target_attribute: usize,
    pub target_action: usize,
    /// Ground-truth span in clips.
    pub span: TemporalSpan,
    /// The same span in frames, inclusive.
    pub frame_span: (usize, usize),
    /// Target boxes for `frame_span.0..=frame_span.1`.
    pub gt_boxes: Vec<BBox>,
}

impl GroundingSample {
    pub fn video_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn clip_count(&self) -> usize {
        self.clips.shape()[0]
    }

    pub fn gt_box(&self, frame: usize) -> Option<BBox> {
        if frame < self.frame_span.0 || frame > self.frame_span.1 {
            return None;
        }
        self.gt_boxes.get(frame - self.frame_span.0).copied()
    }
}

pub fn validate_gen(cfg: &GenConfig) -> Result<()> {
    let bad = |m: String| Err(Error::Config(m));
    if cfg.clips == 0 || cfg.video_frames == 0 || cfg.video_frames % cfg.clips != 0 {
        return bad(format!("video_frames {} must be a positive multiple of clips {}", cfg.video_frames, cfg.clips));
    }
    if cfg.grid_h == 0 || cfg.grid_w == 0 {
        return bad("grid must be non-empty".into());
    }
    if cfg.min_span_clips == 0 || cfg.min_span_clips > cfg.max_span_clips || cfg.max_span_clips > cfg.clips {
        return bad(format!(
            "span clips must satisfy 1 <= {} <= {} <= {}",
            cfg.min_span_clips, cfg.max_span_clips, cfg.clips
        ));
    }
    if !(cfg.min_box > 0.0 && cfg.min_box <= cfg.max_box && cfg.max_box <= 1.0) {
        return bad(format!("box sizes must satisfy 0 < {} <= {} <= 1", cfg.min_box, cfg.max_box));
    }
    if !(cfg.max_speed >= 0.0) {
        return bad("max_speed must be non-negative".into());
    }
    if cfg.attributes < 2 || cfg.actions < 2 {
        return bad("need at least 2 attributes and 2 actions".into());
    }
    if 1 + cfg.distractors > cfg.grid_h * cfg.grid_w {
        return bad(format!(
            "{} entities cannot occupy disjoint cells of a {}x{} grid",
            1 + cfg.distractors,
            cfg.grid_h,
            cfg.grid_w
        ));
    }
    if cfg.max_tokens < 2 {
        return bad("max_tokens must be at least 2".into());
    }
    Ok(())
}

/// Fraction of cell `(r, c)` covered by `b`.
pub fn cell_coverage(b: BBox, r: usize, c: usize, h: usize, w: usize) -> f64 {
    let (x1, y1, x2, y2) = b.corners();
    let (cx1, cx2) = (c as f64 / w as f64, (c + 1) as f64 / w as f64);
    let (cy1, cy2) = (r as f64 / h as f64, (r + 1) as f64 / h as f64);
    let ow = (x2.min(cx2) - x1.max(cx1)).max(0.0);
    let oh = (y2.min(cy2) - y1.max(cy1)).max(0.0);
    ow * oh * (h * w) as f64
}

/// Grid cell containing the box center.
pub fn center_cell(b: BBox, h: usize, w: usize) -> (usize, usize) {
    let r = ((b.cy * h as f64) as usize).min(h - 1);
    let c = ((b.cx * w as f64) as usize).min(w - 1);
    (r, c)
}

fn touched(boxes: &[BBox], h: usize, w: usize) -> Vec<bool> {
    let mut t = vec![false; h * w];
    for &b in boxes {
        for r in 0..h {
            for c in 0..w {
                if cell_coverage(b, r, c, h, w) > 0.0 {
                    t[r * w + c] = true;
                }
            }
        }
    }
    t
}

fn trajectory(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> Vec<BBox> {
    let bw = rng.gen_range(cfg.min_box..=cfg.max_box);
    let bh = rng.gen_range(cfg.min_box..=cfg.max_box);
    let mut x = rng.gen_range(bw / 2.0..=1.0 - bw / 2.0);
    let mut y = rng.gen_range(bh / 2.0..=1.0 - bh / 2.0);
    let s = cfg.max_speed;
    let (mut vx, mut vy) = if s > 0.0 { (rng.gen_range(-s..=s), rng.gen_range(-s..=s)) } else { (0.0, 0.0) };
    let mut out = Vec::with_capacity(cfg.video_frames);
    for _ in 0..cfg.video_frames {
        out.push(BBox::new(x, y, bw, bh));
        x += vx;
        y += vy;
        if x - bw / 2.0 < 0.0 || x + bw / 2.0 > 1.0 {
            vx = -vx;
            x = x.clamp(bw / 2.0, 1.0 - bw / 2.0);
        }
        if y - bh / 2.0 < 0.0 || y + bh / 2.0 > 1.0 {
            vy = -vy;
            y = y.clamp(bh / 2.0, 1.0 - bh / 2.0);
        }
    }
    out
}

fn random_span(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> TemporalSpan {
    let len = rng.gen_range(cfg.min_span_clips..=cfg.max_span_clips);
    let start = rng.gen_range(0..=cfg.clips - len);
    TemporalSpan { start, end: start + len - 1 }
}

fn other_than(rng: &mut ChaCha8Rng, n: usize, x: usize) -> usize {
    let k = rng.gen_range(0..n - 1);
    if k >= x {
        k + 1
    } else {
        k
    }
}

/// Draws a scene; entity footprints over the whole video never share a cell.
pub fn generate_scene(seed: u64, cfg: &GenConfig) -> Result<SceneProgram> {
    validate_gen(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.grid_h, cfg.grid_w);
    let attribute = rng.gen_range(0..cfg.attributes);
    let action = rng.gen_range(0..cfg.actions);
    for _ in 0..64 {
        let mut used = vec![false; h * w];
        let mut placed: Vec<Vec<BBox>> = Vec::new();
        'entities: for _ in 0..=cfg.distractors {
            for _ in 0..256 {
                let boxes = trajectory(&mut rng, cfg);
                let t = touched(&boxes, h, w);
                if t.iter().zip(&used).all(|(a, b)| !(*a && *b)) {
                    used.iter_mut().zip(&t).for_each(|(u, t)| *u |= *t);
                    placed.push(boxes);
                    continue 'entities;
                }
            }
            break;
        }
        if placed.len() != cfg.distractors + 1 {
            continue;
        }
        let mut boxes = placed.into_iter();
        let target = Entity {
            attribute,
            action,
            span: random_span(&mut rng, cfg),
            boxes: boxes.next().expect("target trajectory"),
        };
        let distractors = boxes
            .map(|b| Entity {
                attribute: match cfg.regime {
                    Regime::Attribute => other_than(&mut rng, cfg.attributes, attribute),
                    Regime::Action => attribute,
                },
                action: other_than(&mut rng, cfg.actions, action),
                span: random_span(&mut rng, cfg),
                boxes: b,
            })
            .collect();
        return Ok(SceneProgram { seed, video_frames: cfg.video_frames, clips: cfg.clips, target, distractors });
    }
    Err(Error::Config(format!(
        "could not place {} entities with disjoint footprints on a {h}x{w} grid",
        cfg.distractors + 1
    )))
}

/// Renders a scene and its query into a sample.
pub fn render(scene: &SceneProgram, id: u64, cfg: &GenConfig) -> Result<GroundingSample> {
    let (h, w) = (cfg.grid_h, cfg.grid_w);
    let (na, nc) = (cfg.attributes, cfg.actions);
    let (cf, cc) = (cfg.frame_channels(), cfg.clip_channels());
    let tf = cfg.video_frames;
    let fpc = cfg.frames_per_clip();
    let mut frames = vec![0.0; tf * h * w * cf];
    let mut clips = vec![0.0; cfg.clips * h * w * cc];
    for e in scene.entities() {
        for (t, &b) in e.boxes.iter().enumerate() {
            let clip = t / fpc;
            for r in 0..h {
                for c in 0..w {
                    let cov = cell_coverage(b, r, c, h, w);
                    if cov <= 0.0 {
                        continue;
                    }
                    let fo = ((t * h + r) * w + c) * cf;
                    frames[fo + e.attribute] = cov;
                    frames[fo + na] = cov;
                    frames[fo + na + 1..fo + na + 5].copy_from_slice(&b.to_array());
                    let co = ((clip * h + r) * w + c) * cc;
                    let share = cov / fpc as f64;
                    clips[co + e.attribute] += share;
                    clips[co + na] += share;
                    if e.span.contains(clip) {
                        clips[co + na + 1 + e.action] += share;
                    }
                }
            }
        }
    }
    debug_assert!(nc > 0);
    let vocab = Vocab::new(na, nc);
    let (tokens, token_mask) = vocab.query(scene.target.attribute, scene.target.action, cfg.max_tokens)?;
    let frame_span = scene.frame_range(scene.target.span);
    Ok(GroundingSample {
        id,
        seed: scene.seed,
        frames: Tensor::new(&[tf, h, w, cf], frames)?,
        clips: Tensor::new(&[cfg.clips, h, w, cc], clips)?,
        tokens,
        token_mask,
        target_attribute: scene.target.attribute,
        target_action: scene.target.action,
        span: scene.target.span,
        frame_span,
        gt_boxes: scene.target.boxes[frame_span.0..=frame_span.1].to_vec(),
    })
}

pub fn generate_sample(seed: u64, id: u64, cfg: &GenConfig) -> Result<GroundingSample> {
    render(&generate_scene(seed, cfg)?, id, cfg)
}

/// Per-sample seed derived from the dataset seed (splitmix64 of `seed + index`).
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `cfg.samples` samples with ids `0..samples` and seeds from [`sample_seed`].
pub fn generate_dataset(cfg: &GenConfig) -> Result<Vec<GroundingSample>> {
    (0..cfg.samples as u64).map(|i| generate_sample(sample_seed(cfg.seed, i), i, cfg)).collect()
}

/// Embedding lookup for a token sequence.
pub fn embed_tokens(ctx: &Ctx, table: &Embedding, tokens: &[usize], mask: &[bool]) -> Result<TextFeatures> {
    TextFeatures::new(table.forward(ctx, tokens)?, mask.to_vec())
}

const DATASET_MAGIC: &[u8; 4] = b"STVD";
const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub count: usize,
    pub video_frames: usize,
    pub clips: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub frame_channels: usize,
    pub clip_channels: usize,
    pub max_tokens: usize,
}

impl Manifest {
    fn of(samples: &[GroundingSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Invalid("cannot write an empty dataset".into()))?;
        let f = first.frames.shape();
        let c = first.clips.shape();
        Ok(Self {
            count: samples.len(),
            video_frames: f[0],
            clips: c[0],
            grid_h: f[1],
            grid_w: f[2],
            frame_channels: f[3],
            clip_channels: c[3],
            max_tokens: first.tokens.len(),
        })
    }

    fn to_text(&self) -> String {
        format!(
            "count = {}\nvideo_frames = {}\nclips = {}\ngrid_h = {}\ngrid_w = {}\nframe_channels = {}\nclip_channels = {}\nmax_tokens = {}\n",
            self.count,
            self.video_frames,
            self.clips,
            self.grid_h,
            self.grid_w,
            self.frame_channels,
            self.clip_channels,
            self.max_tokens
        )
    }

    fn parse(text: &str) -> Result<Self> {
        let kv = crate::config::parse_kv(text).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
        let get = |k: &str| -> Result<usize> {
            kv.get(k)
                .ok_or_else(|| Error::Parse(format!("manifest missing {k}")))?
                .parse()
                .map_err(|_| Error::Parse(format!("manifest value for {k}")))
        };
        Ok(Self {
            count: get("count")?,
            video_frames: get("video_frames")?,
            clips: get("clips")?,
            grid_h: get("grid_h")?,
            grid_w: get("grid_w")?,
            frame_channels: get("frame_channels")?,
            clip_channels: get("clip_channels")?,
            max_tokens: get("max_tokens")?,
        })
    }

    fn check(&self, s: &GroundingSample) -> Result<()> {
        let fs = [self.video_frames, self.grid_h, self.grid_w, self.frame_channels];
        let cs = [self.clips, self.grid_h, self.grid_w, self.clip_channels];
        if s.frames.shape() != fs || s.clips.shape() != cs || s.tokens.len() != self.max_tokens {
            return Err(Error::Validation(format!(
                "sample {}: frames {:?}, clips {:?}, {} tokens disagree with manifest {:?}",
                s.id,
                s.frames.shape(),
                s.clips.shape(),
                s.tokens.len(),
                self
            )));
        }
        Ok(())
    }
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Invalid(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, "box coordinate")?;
    Ok(f64::from_le_bytes(b))
}

fn write_sample(w: &mut impl Write, s: &GroundingSample) -> Result<()> {
    w.write_all(&s.id.to_le_bytes())?;
    w.write_all(&s.seed.to_le_bytes())?;
    put_u32(w, s.target_attribute)?;
    put_u32(w, s.target_action)?;
    put_u32(w, s.span.start)?;
    put_u32(w, s.span.end)?;
    put_u32(w, s.frame_span.0)?;
    put_u32(w, s.frame_span.1)?;
    for (&t, &m) in s.tokens.iter().zip(&s.token_mask) {
        put_u32(w, t)?;
        w.write_all(&[m as u8])?;
    }
    put_u32(w, s.gt_boxes.len())?;
    for b in &s.gt_boxes {
        for v in b.to_array() {
            put_f64(w, v)?;
        }
    }
    s.frames.write_to(w)?;
    s.clips.write_to(w)
}

fn read_sample(r: &mut impl Read, m: &Manifest) -> Result<GroundingSample> {
    let id = read_u64(r, "sample id")?;
    let seed = read_u64(r, "sample seed")?;
    fn u(r: &mut impl Read) -> Result<usize> {
        Ok(read_u32(r, "sample field")? as usize)
    }
    let target_attribute = u(r)?;
    let target_action = u(r)?;
    let span = TemporalSpan::new(u(r)?, u(r)?).map_err(|e| Error::Parse(e.to_string()))?;
    let frame_span = (u(r)?, u(r)?);
    let mut tokens = Vec::with_capacity(m.max_tokens);
    let mut token_mask = Vec::with_capacity(m.max_tokens);
    for _ in 0..m.max_tokens {
        tokens.push(u(r)?);
        let mut b = [0u8; 1];
        read_exact(r, &mut b, "token mask")?;
        token_mask.push(match b[0] {
            0 => false,
            1 => true,
            x => return Err(Error::Parse(format!("bad mask byte {x}"))),
        });
    }
    let nb = read_u32(r, "box count")? as usize;
    if nb > m.video_frames {
        return Err(Error::Validation(format!("{nb} boxes for {} frames", m.video_frames)));
    }
    let mut gt_boxes = Vec::with_capacity(nb);
    for _ in 0..nb {
        gt_boxes.push(BBox::new(get_f64(r)?, get_f64(r)?, get_f64(r)?, get_f64(r)?));
    }
    let frames = Tensor::read_from(r)?;
    let clips = Tensor::read_from(r)?;
    let s = GroundingSample {
        id,
        seed,
        frames,
        clips,
        tokens,
        token_mask,
        target_attribute,
        target_action,
        span,
        frame_span,
        gt_boxes,
    };
    m.check(&s)?;
    if s.frame_span.0 > s.frame_span.1 || s.frame_span.1 - s.frame_span.0 + 1 != nb || s.span.end >= m.clips {
        return Err(Error::Validation(format!("sample {id}: spans disagree with boxes or clip count")));
    }
    Ok(s)
}

pub fn write_dataset_to(w: &mut impl Write, samples: &[GroundingSample]) -> Result<()> {
    let m = Manifest::of(samples)?;
    for s in samples {
        m.check(s)?;
    }
    let text = m.to_text();
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(text.len() as u64).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    for s in samples {
        write_sample(w, s)?;
    }
    Ok(())
}

pub fn read_dataset_from(r: &mut impl Read) -> Result<Vec<GroundingSample>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "dataset magic")?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Parse("not a dataset file (bad magic)".into()));
    }
    let version = read_u32(r, "dataset version")?;
    if version != DATASET_VERSION {
        return Err(Error::Parse(format!("unsupported dataset version {version}")));
    }
    let len = read_u64(r, "manifest length")?;
    if len > 1 << 20 {
        return Err(Error::Parse(format!("manifest length {len} is implausible")));
    }
    let mut text = vec![0u8; len as usize];
    read_exact(r, &mut text, "manifest")?;
    let text = String::from_utf8(text).map_err(|_| Error::Parse("manifest is not UTF-8".into()))?;
    let m = Manifest::parse(&text)?;
    let mut out = Vec::with_capacity(m.count.min(1 << 16));
    for _ in 0..m.count {
        out.push(read_sample(r, &m)?);
    }
    Ok(out)
}

pub fn write_dataset(samples: &[GroundingSample], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset_to(&mut w, samples)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<GroundingSample>> {
    read_dataset_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}
