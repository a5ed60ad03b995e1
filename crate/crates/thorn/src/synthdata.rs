//! Synthetic moving-shapes clips with exact ground truth.
//!
//! Every clip shows a "hand" blob (class 0, always present) interacting with
//! a noun object while up to two distractor objects drift randomly. Each
//! object class has a fixed, distinctive color and shape, so nouns are
//! decidable from appearance alone; verbs are decidable from motion alone
//! (approach, shake, rotate-around, merge, split, static-hold). The generator
//! also defines the on-disk annotation format used for any data: a manifest
//! CSV plus per-clip raw-float frame files and presence/score CSV grids.
//!
//! Everything is a pure function of `(config, seed)`, down to the bytes.

use crate::encoder::ClipTensor;
use crate::error::{Result, ThornError};
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

/// Magic bytes of the raw clip format ("THRN").
pub const CLIP_MAGIC: u32 = u32::from_le_bytes(*b"THRN");
pub const CLIP_VERSION: u32 = 1;

/// Motion patterns; the verb label indexes this list.
pub const VERB_NAMES: [&str; 6] = ["approach", "shake", "rotate-around", "merge", "split", "static-hold"];

#[derive(Clone, Copy, Debug)]
enum Shape {
    Hand,
    Disc,
    Square,
    Triangle,
    Diamond,
    Ring,
    Cross,
    HBar,
    VBar,
    Plus,
}

struct PaletteEntry {
    name: &'static str,
    color: [f64; 3],
    shape: Shape,
}

const PALETTE: [PaletteEntry; 12] = [
    PaletteEntry { name: "hand", color: [0.95, 0.80, 0.62], shape: Shape::Hand },
    PaletteEntry { name: "red_disc", color: [0.88, 0.10, 0.10], shape: Shape::Disc },
    PaletteEntry { name: "green_square", color: [0.10, 0.78, 0.15], shape: Shape::Square },
    PaletteEntry { name: "blue_triangle", color: [0.15, 0.25, 0.92], shape: Shape::Triangle },
    PaletteEntry { name: "yellow_diamond", color: [0.93, 0.88, 0.12], shape: Shape::Diamond },
    PaletteEntry { name: "magenta_ring", color: [0.88, 0.15, 0.88], shape: Shape::Ring },
    PaletteEntry { name: "cyan_cross", color: [0.10, 0.83, 0.88], shape: Shape::Cross },
    PaletteEntry { name: "orange_hbar", color: [0.95, 0.55, 0.08], shape: Shape::HBar },
    PaletteEntry { name: "purple_vbar", color: [0.55, 0.12, 0.75], shape: Shape::VBar },
    PaletteEntry { name: "white_plus", color: [0.96, 0.96, 0.96], shape: Shape::Plus },
    PaletteEntry { name: "teal_disc", color: [0.05, 0.55, 0.50], shape: Shape::Disc },
    PaletteEntry { name: "pink_square", color: [0.97, 0.60, 0.75], shape: Shape::Square },
];

/// Class names for the first `classes` palette entries.
pub fn class_names(classes: usize) -> Vec<String> {
    (0..classes)
        .map(|c| PALETTE.get(c).map(|p| p.name.to_string()).unwrap_or_else(|| format!("class{c}")))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Object class count `C_o` (class 0 is the hand). At most 12.
    pub objects: usize,
    /// Verb class count `C_v`. At most 6.
    pub verbs: usize,
    /// Frames per clip.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Clips generated for every (verb, noun) pair.
    pub clips_per_class: usize,
    /// Additive pixel noise amplitude, in `[0, 1)`.
    pub noise_level: f64,
    /// Detector corruption level; 0 reproduces presence exactly.
    pub detector_noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(objects: usize, verbs: usize) -> Self {
        SynthConfig {
            objects,
            verbs,
            frames: 16,
            height: 56,
            width: 56,
            clips_per_class: 5,
            noise_level: 0.02,
            detector_noise: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects < 2 || self.objects > PALETTE.len() {
            return Err(ThornError::Config(format!(
                "object class count {} outside 2..={}",
                self.objects,
                PALETTE.len()
            )));
        }
        if self.verbs < 1 || self.verbs > VERB_NAMES.len() {
            return Err(ThornError::Config(format!(
                "verb class count {} outside 1..={}",
                self.verbs,
                VERB_NAMES.len()
            )));
        }
        if self.frames < 1 {
            return Err(ThornError::Config("frame count must be positive".into()));
        }
        let min_side = self.height.min(self.width);
        if min_side < 16 {
            return Err(ThornError::Config(format!(
                "frame {}x{} too small: blobs and motion need at least 16 pixels per side",
                self.height, self.width
            )));
        }
        if !(0.0..1.0).contains(&self.noise_level) {
            return Err(ThornError::Config("noise_level must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.detector_noise) {
            return Err(ThornError::Config("detector_noise must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn blob_radius(&self) -> f64 {
        (self.height.min(self.width) as f64 / 9.0).clamp(2.0, 8.0)
    }
}

/// Ground truth for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipAnnotation {
    pub clip_id: String,
    pub verb: usize,
    pub noun: usize,
    /// Per-frame multi-hot presence `(T, C_o)`.
    pub presence: Array2<f64>,
    /// Detector-style confidences `(T, C_o)`, absent when withheld.
    pub detector_scores: Option<Array2<f64>>,
    /// Relative frames path when the clip lives on disk.
    pub frames_path: Option<PathBuf>,
}

/// Ground-truth object trajectories; used by geometric oracles in tests.
#[derive(Clone, Debug)]
pub struct RenderTrace {
    pub hand: Vec<(f64, f64)>,
    pub noun: Vec<(f64, f64)>,
    pub distractors: Vec<(usize, Vec<(f64, f64)>)>,
}

impl RenderTrace {
    /// Mean (x, y) position of the noun object over the clip.
    pub fn noun_mean(&self) -> (f64, f64) {
        let n = self.noun.len() as f64;
        let sx: f64 = self.noun.iter().map(|p| p.0).sum();
        let sy: f64 = self.noun.iter().map(|p| p.1).sum();
        (sx / n, sy / n)
    }
}

fn shape_covers(shape: Shape, u: f64, v: f64) -> bool {
    match shape {
        Shape::Hand => {
            let palm = u * u + (v - 0.25) * (v - 0.25) <= 0.72 * 0.72;
            let finger = [-0.45, 0.0, 0.45]
                .iter()
                .any(|&fu| (u - fu).abs() <= 0.16 && (-1.15..=-0.2).contains(&v));
            palm || finger
        }
        Shape::Disc => u * u + v * v <= 1.0,
        Shape::Square => u.abs() <= 0.85 && v.abs() <= 0.85,
        Shape::Triangle => v <= 0.9 && v >= -0.9 && u.abs() <= (0.9 - v) * 0.6,
        Shape::Diamond => u.abs() + v.abs() <= 1.1,
        Shape::Ring => {
            let d = (u * u + v * v).sqrt();
            (0.5..=1.0).contains(&d)
        }
        Shape::Cross => ((u - v).abs() <= 0.4 || (u + v).abs() <= 0.4) && u * u + v * v <= 1.2,
        Shape::HBar => v.abs() <= 0.4 && u.abs() <= 1.0,
        Shape::VBar => u.abs() <= 0.4 && v.abs() <= 1.0,
        Shape::Plus => (u.abs() <= 0.35 && v.abs() <= 1.0) || (v.abs() <= 0.35 && u.abs() <= 1.0),
    }
}

struct Trajectory {
    class: usize,
    positions: Vec<(f64, f64)>,
}

fn clamp_pos(x: f64, y: f64, w: f64, h: f64, margin: f64) -> (f64, f64) {
    (x.clamp(margin, w - 1.0 - margin), y.clamp(margin, h - 1.0 - margin))
}

/// Sample a position well inside one of the four image quadrants so that the
/// object's quadrant stays unambiguous under its motion pattern.
fn sample_quadrant_pos(rng: &mut ChaCha8Rng, w: f64, h: f64, margin: f64) -> (f64, f64) {
    let quadrant = rng.gen_range(0..4u8);
    let (cx, cy) = (w / 2.0, h / 2.0);
    let (gap_x, gap_y) = (w / 8.0, h / 8.0);
    let x = match quadrant % 2 {
        0 => rng.gen_range(margin..(cx - gap_x).max(margin + 0.5)),
        _ => rng.gen_range((cx + gap_x).min(w - 1.0 - margin - 0.5)..(w - 1.0 - margin)),
    };
    let y = match quadrant / 2 {
        0 => rng.gen_range(margin..(cy - gap_y).max(margin + 0.5)),
        _ => rng.gen_range((cy + gap_y).min(h - 1.0 - margin - 0.5)..(h - 1.0 - margin)),
    };
    (x, y)
}

/// Hand and noun trajectories for one verb.
fn motion_pattern(
    verb: usize,
    frames: usize,
    rng: &mut ChaCha8Rng,
    w: f64,
    h: f64,
    radius: f64,
) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let margin = radius + 1.0;
    let min_side = w.min(h);
    let anchor = sample_quadrant_pos(rng, w, h, margin);
    let steps = frames.max(1);
    let frac = |t: usize| if steps > 1 { t as f64 / (steps - 1) as f64 } else { 0.0 };
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let dir = (theta.cos(), theta.sin());
    let mut hand = Vec::with_capacity(steps);
    let mut noun = Vec::with_capacity(steps);
    match verb {
        // approach: hand closes in on a static noun from afar.
        0 => {
            let d0 = 0.45 * min_side;
            let d1 = 2.0 * radius;
            for t in 0..steps {
                let d = d0 + (d1 - d0) * frac(t);
                hand.push(clamp_pos(anchor.0 + dir.0 * d, anchor.1 + dir.1 * d, w, h, margin));
                noun.push(anchor);
            }
        }
        // shake: hand holds the noun, both oscillate.
        1 => {
            let amp = 0.11 * min_side;
            let base = clamp_pos(anchor.0 + 2.0 * radius, anchor.1, w, h, margin + amp);
            let noun_base = clamp_pos(anchor.0, anchor.1, w, h, margin + amp);
            for t in 0..steps {
                let disp = amp * (std::f64::consts::TAU * 2.0 * frac(t)).sin();
                hand.push(clamp_pos(base.0 + disp, base.1, w, h, margin));
                noun.push(clamp_pos(noun_base.0 + 0.8 * disp, noun_base.1, w, h, margin));
            }
        }
        // rotate-around: hand orbits the static noun.
        2 => {
            let rho = (0.22 * min_side).max(2.0 * radius);
            for t in 0..steps {
                let phi = theta + std::f64::consts::TAU * frac(t);
                hand.push(clamp_pos(anchor.0 + rho * phi.cos(), anchor.1 + rho * phi.sin(), w, h, margin));
                noun.push(anchor);
            }
        }
        // merge: both move linearly toward a common midpoint.
        3 => {
            let delta = 0.18 * min_side;
            for t in 0..steps {
                let s = 1.0 - frac(t);
                hand.push(clamp_pos(anchor.0 + dir.0 * delta * s, anchor.1 + dir.1 * delta * s, w, h, margin));
                noun.push(clamp_pos(anchor.0 - dir.0 * delta * s, anchor.1 - dir.1 * delta * s, w, h, margin));
            }
        }
        // split: both move apart from a common midpoint.
        4 => {
            let delta = 0.18 * min_side;
            for t in 0..steps {
                let s = frac(t);
                hand.push(clamp_pos(anchor.0 + dir.0 * delta * s, anchor.1 + dir.1 * delta * s, w, h, margin));
                noun.push(clamp_pos(anchor.0 - dir.0 * delta * s, anchor.1 - dir.1 * delta * s, w, h, margin));
            }
        }
        // static-hold: hand rests next to the noun.
        _ => {
            let hand_pos = clamp_pos(anchor.0 + 2.0 * radius + 1.0, anchor.1, w, h, margin);
            for _ in 0..steps {
                hand.push(hand_pos);
                noun.push(anchor);
            }
        }
    }
    (hand, noun)
}

/// Render one clip with exact ground truth and its trajectory trace.
pub fn generate_clip_traced(
    config: &SynthConfig,
    verb: usize,
    noun: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ClipTensor, ClipAnnotation, RenderTrace)> {
    config.validate()?;
    if verb >= config.verbs {
        return Err(ThornError::InvalidInput(format!(
            "verb {verb} out of range (C_v = {})",
            config.verbs
        )));
    }
    if noun >= config.objects {
        return Err(ThornError::InvalidInput(format!(
            "noun {noun} out of range (C_o = {})",
            config.objects
        )));
    }
    let (t, h, w) = (config.frames, config.height, config.width);
    let (wf, hf) = (w as f64, h as f64);
    let radius = config.blob_radius();
    let margin = radius + 1.0;

    let (hand_track, noun_track) = motion_pattern(verb, t, rng, wf, hf, radius);

    // Distractors: up to two other classes, never the hand or the noun.
    let mut available: Vec<usize> = (1..config.objects).filter(|&c| c != noun).collect();
    let n_distractors = rng.gen_range(0..=2usize.min(available.len()));
    let mut distractors: Vec<Trajectory> = Vec::new();
    for _ in 0..n_distractors {
        let pick = rng.gen_range(0..available.len());
        let class = available.remove(pick);
        let mut pos = (
            rng.gen_range(margin..wf - 1.0 - margin),
            rng.gen_range(margin..hf - 1.0 - margin),
        );
        let step = 0.04 * wf.min(hf);
        let mut positions = Vec::with_capacity(t);
        for _ in 0..t {
            positions.push(pos);
            pos = clamp_pos(
                pos.0 + rng.gen_range(-step..step),
                pos.1 + rng.gen_range(-step..step),
                wf,
                hf,
                margin,
            );
        }
        distractors.push(Trajectory { class, positions });
    }

    // Background: a gentle per-clip brightness ramp.
    let base = rng.gen_range(0.12..0.22);
    let gx = rng.gen_range(-0.05..0.05);
    let gy = rng.gen_range(-0.05..0.05);
    let mut data = Array4::<f64>::zeros((t, h, w, 3));
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                let b = base + gx * x as f64 / wf + gy * y as f64 / hf;
                data[[ti, y, x, 0]] = b;
                data[[ti, y, x, 1]] = b * 0.97;
                data[[ti, y, x, 2]] = b * 0.94;
            }
        }
    }

    // Paint back-to-front: distractors, noun object, hand on top.
    let mut paint = |data: &mut Array4<f64>, ti: usize, class: usize, cx: f64, cy: f64| {
        let entry = &PALETTE[class];
        let x0 = ((cx - radius - 1.0).floor().max(0.0)) as usize;
        let x1 = ((cx + radius + 1.0).ceil().min(wf - 1.0)) as usize;
        let y0 = ((cy - radius - 1.0).floor().max(0.0)) as usize;
        let y1 = ((cy + radius + 1.0).ceil().min(hf - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let u = (x as f64 - cx) / radius;
                let v = (y as f64 - cy) / radius;
                if shape_covers(entry.shape, u, v) {
                    for ch in 0..3 {
                        data[[ti, y, x, ch]] = entry.color[ch];
                    }
                }
            }
        }
    };
    for ti in 0..t {
        for d in &distractors {
            paint(&mut data, ti, d.class, d.positions[ti].0, d.positions[ti].1);
        }
        paint(&mut data, ti, noun, noun_track[ti].0, noun_track[ti].1);
        paint(&mut data, ti, 0, hand_track[ti].0, hand_track[ti].1);
    }

    // Additive pixel noise, then clamp into the valid range.
    if config.noise_level > 0.0 {
        for v in data.iter_mut() {
            *v = (*v + config.noise_level * rng.gen_range(-0.5..0.5)).clamp(0.0, 1.0);
        }
    }

    // Presence: every rendered class, every frame.
    let mut presence = Array2::<f64>::zeros((t, config.objects));
    for ti in 0..t {
        presence[[ti, 0]] = 1.0;
        presence[[ti, noun]] = 1.0;
        for d in &distractors {
            presence[[ti, d.class]] = 1.0;
        }
    }

    // Detector scores: presence corrupted by attenuation, misses, and false
    // alarms in proportion to `detector_noise`.
    let dn = config.detector_noise;
    let mut scores = presence.clone();
    if dn > 0.0 {
        for v in scores.iter_mut() {
            if *v == 1.0 {
                if rng.gen::<f64>() < dn * 0.3 {
                    *v = rng.gen_range(0.0..0.4); // missed detection
                } else {
                    *v = 1.0 - dn * rng.gen_range(0.0..0.5); // attenuated hit
                }
            } else if rng.gen::<f64>() < dn * 0.2 {
                *v = rng.gen_range(0.4..1.0); // false alarm
            } else {
                *v = dn * rng.gen_range(0.0..0.3); // background clutter
            }
        }
    }

    let clip = ClipTensor::new(data)?;
    let annotation = ClipAnnotation {
        clip_id: String::new(),
        verb,
        noun,
        presence,
        detector_scores: Some(scores),
        frames_path: None,
    };
    let trace = RenderTrace {
        hand: hand_track,
        noun: noun_track,
        distractors: distractors.into_iter().map(|d| (d.class, d.positions)).collect(),
    };
    Ok((clip, annotation, trace))
}

/// Render one clip with exact ground truth.
pub fn generate_clip(
    config: &SynthConfig,
    verb: usize,
    noun: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ClipTensor, ClipAnnotation)> {
    let (clip, annotation, _) = generate_clip_traced(config, verb, noun, rng)?;
    Ok((clip, annotation))
}

/// Stable per-clip RNG stream derived from the dataset seed.
pub fn clip_rng(seed: u64, clip_index: u64) -> ChaCha8Rng {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(clip_index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

// ---------------------------------------------------------------------------
// Raw clip files
// ---------------------------------------------------------------------------

/// Write a clip as `[magic, version, T, H, W, 3, 0, 0]` (u32 LE) followed by
/// `T·H·W·3` little-endian f32 values.
pub fn write_clip(path: &Path, clip: &ClipTensor) -> Result<()> {
    let (t, h, w, _) = clip.data().dim();
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in [CLIP_MAGIC, CLIP_VERSION, t as u32, h as u32, w as u32, 3, 0, 0] {
        file.write_all(&v.to_le_bytes())?;
    }
    for v in clip.data().iter() {
        file.write_all(&(*v as f32).to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

/// Read a clip written by [`write_clip`].
pub fn read_clip(path: &Path) -> Result<ClipTensor> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header = [0u8; 32];
    file.read_exact(&mut header)?;
    let word = |i: usize| u32::from_le_bytes(header[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != CLIP_MAGIC {
        return Err(ThornError::InvalidInput(format!(
            "{}: not a clip file (bad magic)",
            path.display()
        )));
    }
    if word(1) != CLIP_VERSION {
        return Err(ThornError::InvalidInput(format!(
            "{}: unsupported clip version {}",
            path.display(),
            word(1)
        )));
    }
    let (t, h, w, c) = (word(2) as usize, word(3) as usize, word(4) as usize, word(5) as usize);
    if c != 3 {
        return Err(ThornError::InvalidInput(format!(
            "{}: expected 3 channels, found {c}",
            path.display()
        )));
    }
    let n = t * h * w * 3;
    let mut bytes = Vec::with_capacity(n * 4);
    file.read_to_end(&mut bytes)?;
    if bytes.len() != n * 4 {
        return Err(ThornError::InvalidInput(format!(
            "{}: expected {} pixel bytes, found {}",
            path.display(),
            n * 4,
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        data.push(f32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as f64);
    }
    let array = Array4::from_shape_vec((t, h, w, 3), data)
        .map_err(|e| ThornError::InvalidInput(format!("{}: {e}", path.display())))?;
    ClipTensor::new(array)
}

// ---------------------------------------------------------------------------
// Dataset generation and the manifest format
// ---------------------------------------------------------------------------

pub const MANIFEST_HEADER: &str = "clip_id,verb,noun,frames_path,presence_path,scores_path";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Result of dataset generation: manifest paths and split sizes.
#[derive(Clone, Debug)]
pub struct DatasetSummary {
    pub manifest: PathBuf,
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub train_clips: usize,
    pub val_clips: usize,
    pub test_clips: usize,
}

/// Deterministic per-pair split quotas: exact 70/15/15 overall, at least one
/// training clip for every (verb, noun) pair.
fn split_plan(pairs: usize, per_pair: usize) -> Result<Vec<(usize, usize, usize)>> {
    let total = pairs * per_pair;
    let val_total = ((total as f64) * 0.15).round() as usize;
    let test_total = ((total as f64) * 0.15).round() as usize;
    let train_total = total - val_total - test_total;
    if val_total == 0 || test_total == 0 || train_total < pairs {
        return Err(ThornError::Config(format!(
            "insufficient clips for a 70/15/15 split: {total} clips over {pairs} pairs"
        )));
    }
    // Largest-remainder style spreading of per-pair val/test quotas.
    let spread = |count: usize, reverse: bool| -> Vec<usize> {
        let mut out = vec![0usize; pairs];
        let mut acc_prev = 0usize;
        for p in 0..pairs {
            let acc = (p + 1) * count / pairs;
            let idx = if reverse { pairs - 1 - p } else { p };
            out[idx] = acc - acc_prev;
            acc_prev = acc;
        }
        out
    };
    let val = spread(val_total, false);
    let test = spread(test_total, true);
    let mut plan = Vec::with_capacity(pairs);
    for p in 0..pairs {
        let v = val[p];
        let e = test[p];
        let t = per_pair
            .checked_sub(v + e)
            .filter(|&t| t >= 1)
            .ok_or_else(|| {
                ThornError::Config(format!(
                    "insufficient clips for a split: pair {p} has no training clip left"
                ))
            })?;
        plan.push((t, v, e));
    }
    Ok(plan)
}

fn write_grid_csv(path: &Path, grid: &Array2<f64>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in grid.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(file, "{}", line.join(","))?;
    }
    file.flush()?;
    Ok(())
}

fn read_grid_csv(path: &Path) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| ThornError::Parse {
            file: path.display().to_string(),
            line: i + 1,
            msg: format!("bad number: {e}"),
        })?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(ThornError::Parse {
                    file: path.display().to_string(),
                    line: i + 1,
                    msg: format!("expected {} columns, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(ThornError::Parse {
            file: path.display().to_string(),
            line: 1,
            msg: "empty grid".into(),
        });
    }
    let (t, c) = (rows.len(), rows[0].len());
    Array2::from_shape_vec((t, c), rows.into_iter().flatten().collect())
        .map_err(|e| ThornError::InvalidInput(e.to_string()))
}

/// Generate a balanced dataset under `out_dir`: clip files, presence and
/// score grids, a full manifest, and one manifest per split.
pub fn generate_dataset(config: &SynthConfig, out_dir: &Path) -> Result<DatasetSummary> {
    config.validate()?;
    if config.clips_per_class < 3 {
        return Err(ThornError::Config(format!(
            "clips_per_class = {} too small (need at least 3)",
            config.clips_per_class
        )));
    }
    let pairs = config.verbs * config.objects;
    let plan = split_plan(pairs, config.clips_per_class)?;

    std::fs::create_dir_all(out_dir.join("clips"))?;
    std::fs::create_dir_all(out_dir.join("presence"))?;
    std::fs::create_dir_all(out_dir.join("scores"))?;

    let mut rows: Vec<(Split, String)> = Vec::new();
    let mut clip_index = 0u64;
    for verb in 0..config.verbs {
        for noun in 0..config.objects {
            let pair = verb * config.objects + noun;
            let (n_train, n_val, _n_test) = plan[pair];
            for k in 0..config.clips_per_class {
                let clip_id = format!("clip_{clip_index:05}");
                let mut rng = clip_rng(config.seed, clip_index);
                let (clip, mut annotation) = generate_clip(config, verb, noun, &mut rng)?;
                annotation.clip_id = clip_id.clone();

                let frames_rel = format!("clips/{clip_id}.bin");
                let presence_rel = format!("presence/{clip_id}.csv");
                let scores_rel = format!("scores/{clip_id}.csv");
                write_clip(&out_dir.join(&frames_rel), &clip)?;
                write_grid_csv(&out_dir.join(&presence_rel), &annotation.presence)?;
                write_grid_csv(
                    &out_dir.join(&scores_rel),
                    annotation.detector_scores.as_ref().expect("generated scores"),
                )?;

                let split = if k < n_train {
                    Split::Train
                } else if k < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
                rows.push((
                    split,
                    format!("{clip_id},{verb},{noun},{frames_rel},{presence_rel},{scores_rel}"),
                ));
                clip_index += 1;
            }
        }
    }

    let write_manifest = |path: &Path, filter: Option<Split>| -> Result<usize> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "{MANIFEST_HEADER}")?;
        let mut count = 0;
        for (split, row) in &rows {
            if filter.map(|f| f == *split).unwrap_or(true) {
                writeln!(file, "{row}")?;
                count += 1;
            }
        }
        file.flush()?;
        Ok(count)
    };

    let manifest = out_dir.join("manifest.csv");
    let train_manifest = out_dir.join("train.csv");
    let val_manifest = out_dir.join("val.csv");
    let test_manifest = out_dir.join("test.csv");
    write_manifest(&manifest, None)?;
    let train_clips = write_manifest(&train_manifest, Some(Split::Train))?;
    let val_clips = write_manifest(&val_manifest, Some(Split::Val))?;
    let test_clips = write_manifest(&test_manifest, Some(Split::Test))?;

    Ok(DatasetSummary {
        manifest,
        train_manifest,
        val_manifest,
        test_manifest,
        train_clips,
        val_clips,
        test_clips,
    })
}

/// Parse a manifest and its per-clip grids. Frames stay on disk; presence
/// grids load eagerly (they validate the labels), detector scores load when
/// the referenced file exists and are absent otherwise.
pub fn load_annotations(manifest: &Path) -> Result<Vec<ClipAnnotation>> {
    let file_name = manifest.display().to_string();
    let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = std::fs::read_to_string(manifest)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == MANIFEST_HEADER => {}
        Some((_, header)) => {
            return Err(ThornError::Parse {
                file: file_name,
                line: 1,
                msg: format!("bad header: {header:?}"),
            })
        }
        None => {
            return Err(ThornError::Parse { file: file_name, line: 1, msg: "empty manifest".into() })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(ThornError::Parse {
                file: file_name.clone(),
                line: line_no,
                msg: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let clip_id = fields[0].to_string();
        let parse_idx = |s: &str, what: &str| -> Result<usize> {
            s.trim().parse::<usize>().map_err(|_| ThornError::Parse {
                file: file_name.clone(),
                line: line_no,
                msg: format!("bad {what} index: {s:?}"),
            })
        };
        let verb = parse_idx(fields[1], "verb")?;
        let noun = parse_idx(fields[2], "noun")?;
        let presence = read_grid_csv(&base.join(fields[4].trim()))?;
        crate::orf::validate_presence(&presence).map_err(|e| ThornError::Parse {
            file: file_name.clone(),
            line: line_no,
            msg: format!("clip {clip_id}: {e}"),
        })?;
        if noun >= presence.ncols() {
            return Err(ThornError::Parse {
                file: file_name.clone(),
                line: line_no,
                msg: format!("clip {clip_id}: noun index {noun} out of range (C_o = {})", presence.ncols()),
            });
        }
        let scores_field = fields[5].trim();
        let scores_path = base.join(scores_field);
        let detector_scores = if !scores_field.is_empty() && scores_path.exists() {
            let grid = read_grid_csv(&scores_path)?;
            if grid.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(ThornError::Parse {
                    file: file_name.clone(),
                    line: line_no,
                    msg: format!("clip {clip_id}: detector scores outside [0, 1]"),
                });
            }
            Some(grid)
        } else {
            None
        };
        out.push(ClipAnnotation {
            clip_id,
            verb,
            noun,
            presence,
            detector_scores,
            frames_path: Some(PathBuf::from(fields[3].trim())),
        });
    }
    Ok(out)
}

/// Load the frames referenced by an annotation, resolving relative to the
/// manifest's directory.
pub fn load_clip(annotation: &ClipAnnotation, manifest: &Path) -> Result<ClipTensor> {
    let rel = annotation.frames_path.as_ref().ok_or_else(|| {
        ThornError::InvalidInput(format!("clip {} has no frames path", annotation.clip_id))
    })?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_clip(&base.join(rel))
}

/// SHA-256 hex digest of a file, for determinism checks and logs.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_config() -> SynthConfig {
        let mut c = SynthConfig::new(6, 4);
        c.frames = 6;
        c.height = 28;
        c.width = 28;
        c.clips_per_class = 3;
        c.noise_level = 0.02;
        c.seed = 7;
        c
    }

    #[test]
    fn clip_construction_and_presence() {
        let config = SynthConfig::new(10, 6);
        let mut rng = clip_rng(0, 0);
        let (clip, annotation) = generate_clip(&config, 0, 3, &mut rng).unwrap();
        assert_eq!(clip.data().dim(), (16, 56, 56, 3));
        assert_eq!(annotation.presence.dim(), (16, 10));
        for t in 0..16 {
            assert_eq!(annotation.presence[[t, 0]], 1.0, "hand missing at frame {t}");
            assert_eq!(annotation.presence[[t, 3]], 1.0, "noun missing at frame {t}");
        }
        // Noun present in at least 80% of frames (here: all).
        let noun_frac = annotation.presence.column(3).sum() / 16.0;
        assert!(noun_frac >= 0.8);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut config = small_config();
        config.noise_level = 0.0;
        let (a, _) = generate_clip(&config, 1, 2, &mut clip_rng(9, 4)).unwrap();
        let (b, _) = generate_clip(&config, 1, 2, &mut clip_rng(9, 4)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_detector_noise_reproduces_presence() {
        let mut config = small_config();
        config.detector_noise = 0.0;
        let (_, annotation) = generate_clip(&config, 0, 1, &mut clip_rng(1, 1)).unwrap();
        assert_eq!(annotation.detector_scores.as_ref().unwrap(), &annotation.presence);

        config.detector_noise = 0.6;
        let (_, noisy) = generate_clip(&config, 0, 1, &mut clip_rng(1, 1)).unwrap();
        let scores = noisy.detector_scores.unwrap();
        assert!(scores.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_ne!(&scores, &noisy.presence);
    }

    #[test]
    fn verbs_differ_by_motion_only_nouns_by_appearance() {
        let mut config = small_config();
        config.verbs = 6;
        config.noise_level = 0.0;
        // Same RNG stream, different verb: trajectories must differ.
        let (_, _, trace_a) = generate_clip_traced(&config, 1, 2, &mut clip_rng(3, 0)).unwrap();
        let (_, _, trace_b) = generate_clip_traced(&config, 5, 2, &mut clip_rng(3, 0)).unwrap();
        assert_eq!(trace_a.noun[0], trace_b.noun[0], "same layout expected");
        assert_ne!(trace_a.hand, trace_b.hand, "verbs must differ in motion");
        // Static hold really is static.
        assert!(trace_b.hand.windows(2).all(|w| w[0] == w[1]));
        // Same verb, different noun: same trajectories, different pixels.
        let (clip_c, _, trace_c) = generate_clip_traced(&config, 1, 2, &mut clip_rng(3, 0)).unwrap();
        let (clip_d, _, trace_d) = generate_clip_traced(&config, 1, 4, &mut clip_rng(3, 0)).unwrap();
        assert_eq!(trace_c.noun, trace_d.noun);
        assert_ne!(clip_c.data(), clip_d.data());
    }

    #[test]
    fn unrenderable_config_rejected() {
        let mut config = small_config();
        config.height = 8;
        config.width = 8;
        assert!(generate_clip(&config, 0, 1, &mut clip_rng(0, 0)).is_err());
    }

    #[test]
    fn out_of_range_labels_rejected() {
        let config = small_config();
        assert!(generate_clip(&config, 4, 0, &mut clip_rng(0, 0)).is_err());
        assert!(generate_clip(&config, 0, 6, &mut clip_rng(0, 0)).is_err());
    }

    #[test]
    fn clip_file_roundtrip() {
        let dir = tempdir().unwrap();
        let config = small_config();
        let (clip, _) = generate_clip(&config, 0, 1, &mut clip_rng(2, 2)).unwrap();
        let path = dir.path().join("clip.bin");
        write_clip(&path, &clip).unwrap();
        let back = read_clip(&path).unwrap();
        assert_eq!(back.data().dim(), clip.data().dim());
        // Storage is f32; values agree to f32 precision.
        for (a, b) in back.data().iter().zip(clip.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        // Corrupt magic is rejected.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_clip(&path).is_err());
    }

    #[test]
    fn dataset_split_sizes_and_balance() {
        // The reference arithmetic: 6 verbs x 10 nouns x 5 clips = 300 clips
        // split 210/45/45.
        let plan = split_plan(60, 5).unwrap();
        let train: usize = plan.iter().map(|p| p.0).sum();
        let val: usize = plan.iter().map(|p| p.1).sum();
        let test: usize = plan.iter().map(|p| p.2).sum();
        assert_eq!((train, val, test), (210, 45, 45));
        assert!(plan.iter().all(|p| p.0 >= 1), "every pair needs a train clip");

        // Too few clips for a split errors out.
        assert!(split_plan(1, 3).is_err());
    }

    #[test]
    fn dataset_generation_roundtrip_and_hash() {
        let dir = tempdir().unwrap();
        let config = small_config();
        let summary = generate_dataset(&config, dir.path()).unwrap();
        let total = config.verbs * config.objects * config.clips_per_class;
        assert_eq!(summary.train_clips + summary.val_clips + summary.test_clips, total);

        let annotations = load_annotations(&summary.manifest).unwrap();
        assert_eq!(annotations.len(), total);
        // Every (verb, noun) pair appears in train.
        let train = load_annotations(&summary.train_manifest).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for a in &train {
            seen.insert((a.verb, a.noun));
        }
        assert_eq!(seen.len(), config.verbs * config.objects);

        // Clips load through their annotations.
        let clip = load_clip(&annotations[0], &summary.manifest).unwrap();
        assert_eq!(clip.data().dim(), (6, 28, 28, 3));

        // Same seed, same bytes; different seed, different bytes.
        let dir2 = tempdir().unwrap();
        let summary2 = generate_dataset(&config, dir2.path()).unwrap();
        assert_eq!(
            file_sha256(&summary.manifest).unwrap(),
            file_sha256(&summary2.manifest).unwrap()
        );
        let first_clip = file_sha256(&dir.path().join("clips/clip_00000.bin")).unwrap();
        let first_clip2 = file_sha256(&dir2.path().join("clips/clip_00000.bin")).unwrap();
        assert_eq!(first_clip, first_clip2);
        let mut config3 = config.clone();
        config3.seed = 8;
        let dir3 = tempdir().unwrap();
        generate_dataset(&config3, dir3.path()).unwrap();
        let first_clip3 = file_sha256(&dir3.path().join("clips/clip_00000.bin")).unwrap();
        assert_ne!(first_clip, first_clip3);
    }

    #[test]
    fn manifest_errors_are_located() {
        let dir = tempdir().unwrap();
        let config = small_config();
        let summary = generate_dataset(&config, dir.path()).unwrap();

        // Malformed row: wrong field count.
        let bad = dir.path().join("bad.csv");
        let mut text = std::fs::read_to_string(&summary.manifest).unwrap();
        text.push_str("only,three,fields\n");
        std::fs::write(&bad, &text).unwrap();
        let err = load_annotations(&bad).unwrap_err().to_string();
        assert!(err.contains("bad.csv") && err.contains("expected 6 fields"), "{err}");

        // Out-of-range noun names the clip id and the line.
        let manifest_text = std::fs::read_to_string(&summary.manifest).unwrap();
        let mut lines: Vec<String> = manifest_text.lines().map(String::from).collect();
        let parts: Vec<String> = lines[1].split(',').map(String::from).collect();
        let bad_noun = format!(
            "{},{},{},{},{},{}",
            parts[0],
            parts[1],
            config.objects, // noun == C_o is out of range
            parts[3],
            parts[4],
            parts[5]
        );
        lines[1] = bad_noun;
        let bad2 = dir.path().join("bad2.csv");
        std::fs::write(&bad2, lines.join("\n")).unwrap();
        let err = load_annotations(&bad2).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("clip_00000"), "{err}");

        // Missing scores file: annotation loads with scores absent.
        std::fs::remove_file(dir.path().join("scores/clip_00000.csv")).unwrap();
        let annotations = load_annotations(&summary.manifest).unwrap();
        assert!(annotations[0].detector_scores.is_none());
        assert!(annotations[1].detector_scores.is_some());
    }

    #[test]
    fn class_names_follow_palette() {
        let names = class_names(3);
        assert_eq!(names, vec!["hand", "red_disc", "green_square"]);
    }
}
