//! Procedural stick-figure people with exact keypoints and parses.
//!
//! A figure is a jointed skeleton (hips, torso, head, two arms, two legs) drawn with
//! thick segments in painter's order. The appearance (skin, hair, clothing colors,
//! sleeve/trouser length, shirt stripes, background) is drawn once per identity and
//! shared by both poses of a pair.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ImageTensor, Joint, Keypoints, Sample, SemanticLabelMap, TrainingPair, MIN_CLASSES, NUM_JOINTS};
use crate::error::{bail_invalid, Result};

// Body proportions at the reference 64x48 canvas.
const REF_H: f32 = 64.0;
const REF_W: f32 = 48.0;
const HEAD_R: f32 = 4.5;
const NECK_LEN: f32 = 3.0;
const TORSO_LEN: f32 = 16.0;
const SHOULDER_HALF: f32 = 6.0;
const HIP_HALF: f32 = 3.5;
const UPPER_ARM: f32 = 8.0;
const FOREARM: f32 = 7.0;
const THIGH: f32 = 10.0;
const SHIN: f32 = 9.0;

const MAX_ATTEMPTS: usize = 200;

mod part {
    pub const BACKGROUND: usize = 0;
    pub const HAIR: usize = 1;
    pub const FACE: usize = 2;
    pub const UPPER: usize = 3;
    pub const PANTS: usize = 4;
    pub const ARMS: usize = 5;
    pub const LEGS: usize = 6;
    pub const SHOES: usize = 7;
}

/// Label of a canonical part when only `classes` labels are available.
fn part_label(p: usize, classes: usize) -> u8 {
    let folded = match (p, classes) {
        (part::SHOES, 7) => part::LEGS,
        (part::SHOES | part::LEGS, 6) => part::ARMS,
        _ => p,
    };
    folded as u8
}

type Rgb = [f32; 3];

#[derive(Debug, Clone)]
struct Appearance {
    background: Rgb,
    skin: Rgb,
    hair: Rgb,
    shirt: Rgb,
    stripe: Option<Rgb>,
    pants: Rgb,
    shoes: Rgb,
    long_sleeves: bool,
    long_pants: bool,
    hair_depth: f32,
}

fn color(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Rgb {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

impl Appearance {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let tone = rng.random_range(0.35..0.95f32);
        let skin = [tone, tone * rng.random_range(0.7..0.85), tone * rng.random_range(0.55..0.7)];
        let shirt = color(rng, 0.0, 1.0);
        let stripe = rng.random_bool(0.35).then(|| color(rng, 0.0, 1.0));
        Self {
            background: color(rng, 0.55, 1.0),
            skin,
            hair: color(rng, 0.0, 0.5),
            shirt,
            stripe,
            pants: color(rng, 0.0, 0.8),
            shoes: color(rng, 0.0, 0.4),
            long_sleeves: rng.random_bool(0.5),
            long_pants: rng.random_bool(0.5),
            hair_depth: rng.random_range(0.5..2.0),
        }
    }
}

/// Joint angles and placement of one pose, in reference units.
#[derive(Debug, Clone)]
struct Pose {
    hip: (f32, f32),
    lean: f32,
    arm: [(f32, f32); 2],
    leg: [(f32, f32); 2],
}

impl Pose {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut arm = [(0.0, 0.0); 2];
        let mut leg = [(0.0, 0.0); 2];
        for a in arm.iter_mut() {
            *a = (rng.random_range(-0.3..2.3), rng.random_range(-1.4..1.4));
        }
        for l in leg.iter_mut() {
            *l = (rng.random_range(-0.25..0.6), rng.random_range(-0.7..0.7));
        }
        Self {
            hip: (rng.random_range(0.38..0.62) * REF_W, rng.random_range(0.53..0.6) * REF_H),
            lean: rng.random_range(-0.15..0.15),
            arm,
            leg,
        }
    }
}

/// Skeleton in canvas pixels: the 18 joints plus helper points used for drawing.
struct Skeleton {
    joints: [(f32, f32); NUM_JOINTS],
    head: (f32, f32),
    hip_center: (f32, f32),
}

fn add(a: (f32, f32), b: (f32, f32), s: f32) -> (f32, f32) {
    (a.0 + b.0 * s, a.1 + b.1 * s)
}

fn round(p: (f32, f32)) -> (f32, f32) {
    (p.0.round(), p.1.round())
}

impl Skeleton {
    // Joint order: nose, neck, r-shoulder, r-elbow, r-wrist, l-shoulder, l-elbow, l-wrist,
    // r-hip, r-knee, r-ankle, l-hip, l-knee, l-ankle, r-eye, l-eye, r-ear, l-ear.
    fn build(pose: &Pose, scale: f32) -> Self {
        let up = (pose.lean.sin(), -pose.lean.cos());
        let across = (pose.lean.cos(), pose.lean.sin());
        let hip = (pose.hip.0 * scale, pose.hip.1 * scale);
        let neck = add(hip, up, TORSO_LEN * scale);
        let head = add(neck, up, (NECK_LEN + HEAD_R) * scale);
        let mut j = [(0.0, 0.0); NUM_JOINTS];
        j[0] = add(head, (0.0, 1.0), 1.0 * scale);
        j[1] = neck;
        // The person faces the viewer: their right side is on the image left.
        for (side, sign) in [(0usize, -1.0f32), (1, 1.0)] {
            let (shoulder_ix, elbow_ix, wrist_ix) = if side == 0 { (2, 3, 4) } else { (5, 6, 7) };
            let (hip_ix, knee_ix, ankle_ix) = if side == 0 { (8, 9, 10) } else { (11, 12, 13) };
            let shoulder = add(neck, across, sign * SHOULDER_HALF * scale);
            let (a_up, a_bend) = pose.arm[side];
            let upper_dir = (sign * a_up.sin(), a_up.cos());
            let elbow = add(shoulder, upper_dir, UPPER_ARM * scale);
            let a_low = a_up + a_bend;
            let wrist = add(elbow, (sign * a_low.sin(), a_low.cos()), FOREARM * scale);
            let hip_j = add(hip, across, sign * HIP_HALF * scale);
            let (l_up, l_bend) = pose.leg[side];
            let knee = add(hip_j, (sign * l_up.sin(), l_up.cos()), THIGH * scale);
            let l_low = l_up + l_bend;
            let ankle = add(knee, (sign * l_low.sin(), l_low.cos()), SHIN * scale);
            j[shoulder_ix] = shoulder;
            j[elbow_ix] = elbow;
            j[wrist_ix] = wrist;
            j[hip_ix] = hip_j;
            j[knee_ix] = knee;
            j[ankle_ix] = ankle;
        }
        j[14] = add(head, (-1.6 * scale, -0.6 * scale), 1.0);
        j[15] = add(head, (1.6 * scale, -0.6 * scale), 1.0);
        j[16] = add(head, (-HEAD_R * scale, 0.0), 1.0);
        j[17] = add(head, (HEAD_R * scale, 0.0), 1.0);
        for p in j.iter_mut() {
            *p = round(*p);
        }
        Self {
            joints: j,
            head: round(head),
            hip_center: round(hip),
        }
    }

    /// Everything drawn stays at least one pixel inside the canvas.
    fn fits(&self, height: usize, width: usize, scale: f32) -> bool {
        let margin = 2.5 * scale;
        let inside = |p: (f32, f32), r: f32| {
            p.0 - r >= 1.0 && p.1 - r >= 1.0 && p.0 + r <= width as f32 - 2.0 && p.1 + r <= height as f32 - 2.0
        };
        self.joints.iter().all(|&p| inside(p, margin))
            && inside(self.head, (HEAD_R + 1.0) * scale)
            && inside((self.joints[10].0, self.joints[10].1 + 2.0 * scale), margin)
            && inside((self.joints[13].0, self.joints[13].1 + 2.0 * scale), margin)
    }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Point-in-convex-polygon test for vertices listed in a consistent winding.
fn in_convex(p: (f32, f32), poly: &[(f32, f32)]) -> bool {
    let mut sign = 0.0f32;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        if cross != 0.0 {
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
    }
    true
}

struct Canvas {
    height: usize,
    width: usize,
    rgb: Vec<Rgb>,
    parts: Vec<usize>,
}

impl Canvas {
    fn new(height: usize, width: usize, background: Rgb) -> Self {
        Self {
            height,
            width,
            rgb: vec![background; height * width],
            parts: vec![part::BACKGROUND; height * width],
        }
    }

    fn paint(&mut self, part_id: usize, shade: impl Fn(usize, usize) -> Rgb, covers: impl Fn((f32, f32)) -> bool) {
        for y in 0..self.height {
            for x in 0..self.width {
                if covers((x as f32, y as f32)) {
                    let i = y * self.width + x;
                    self.rgb[i] = shade(x, y);
                    self.parts[i] = part_id;
                }
            }
        }
    }

    fn segment(&mut self, part_id: usize, col: Rgb, a: (f32, f32), b: (f32, f32), thickness: f32) {
        self.paint(part_id, |_, _| col, |p| segment_distance(p, a, b) <= thickness * 0.5);
    }
}

fn render(skel: &Skeleton, look: &Appearance, height: usize, width: usize, scale: f32) -> Canvas {
    let j = &skel.joints;
    let mut cv = Canvas::new(height, width, look.background);
    let s = scale;
    // Legs: thighs are always trousers; shins are bare unless the trousers are long.
    for (hip, knee, ankle) in [(8, 9, 10), (11, 12, 13)] {
        let (shin_part, shin_col) = if look.long_pants {
            (part::PANTS, look.pants)
        } else {
            (part::LEGS, look.skin)
        };
        cv.segment(shin_part, shin_col, j[knee], j[ankle], 3.5 * s);
        cv.segment(part::PANTS, look.pants, j[hip], j[knee], 4.5 * s);
        let toe = (j[ankle].0, j[ankle].1 + 1.5 * s);
        cv.segment(part::SHOES, look.shoes, j[ankle], toe, 3.5 * s);
    }
    cv.segment(part::PANTS, look.pants, j[8], j[11], 5.0 * s);
    // Torso as a quadrilateral between shoulders and hips.
    let widen = |p: (f32, f32), c: (f32, f32), by: f32| {
        let (dx, dy) = (p.0 - c.0, p.1 - c.1);
        let n = (dx * dx + dy * dy).sqrt().max(1e-3);
        (p.0 + dx / n * by, p.1 + dy / n * by)
    };
    let torso = [
        widen(j[2], j[1], 1.0 * s),
        widen(j[5], j[1], 1.0 * s),
        widen(j[11], skel.hip_center, 1.5 * s),
        widen(j[8], skel.hip_center, 1.5 * s),
    ];
    let shirt = look.shirt;
    let stripe = look.stripe;
    let period = (3.0 * s).max(2.0) as usize;
    let shirt_shade = move |_x: usize, y: usize| match stripe {
        Some(st) if (y / period) % 2 == 1 => st,
        _ => shirt,
    };
    cv.paint(part::UPPER, shirt_shade, |p| in_convex(p, &torso) || segment_distance(p, j[2], j[5]) <= 2.0 * s);
    // Arms: sleeves cover the upper arm, forearms are skin.
    for (shoulder, elbow, wrist) in [(2, 3, 4), (5, 6, 7)] {
        cv.segment(part::ARMS, look.skin, j[elbow], j[wrist], 3.0 * s);
        cv.segment(part::ARMS, look.skin, j[wrist], j[wrist], 3.5 * s);
        if look.long_sleeves {
            cv.paint(part::UPPER, shirt_shade, |p| segment_distance(p, j[shoulder], j[elbow]) <= 1.75 * s);
        } else {
            cv.segment(part::ARMS, look.skin, j[shoulder], j[elbow], 3.0 * s);
            cv.paint(part::UPPER, shirt_shade, |p| segment_distance(p, j[shoulder], j[shoulder]) <= 2.0 * s);
        }
    }
    // Neck, face, hair cap.
    cv.segment(part::FACE, look.skin, j[1], skel.head, 3.0 * s);
    let head = skel.head;
    let r = HEAD_R * s;
    cv.segment(part::FACE, look.skin, head, head, 2.0 * r);
    let hair_line = head.1 - r + look.hair_depth * 2.0 * s;
    cv.paint(
        part::HAIR,
        |_, _| look.hair,
        |p| segment_distance(p, head, head) <= r + 0.5 * s && p.1 < hair_line,
    );
    cv
}

fn to_sample(cv: &Canvas, skel: &Skeleton, classes: usize) -> Result<Sample> {
    let (h, w) = (cv.height, cv.width);
    let n = h * w;
    let mut data = vec![0f32; 3 * n];
    for (i, rgb) in cv.rgb.iter().enumerate() {
        for c in 0..3 {
            data[c * n + i] = rgb[c] * 2.0 - 1.0;
        }
    }
    let labels = cv.parts.iter().map(|&p| part_label(p, classes)).collect();
    let mut keypoints = Keypoints::invisible();
    for (dst, &(x, y)) in keypoints.joints.iter_mut().zip(skel.joints.iter()) {
        *dst = Joint { x, y, visible: true };
    }
    keypoints.validate(h, w)?;
    Ok(Sample {
        image: ImageTensor::new(data, h, w)?,
        keypoints,
        labels: SemanticLabelMap::new(labels, h, w)?,
    })
}

fn sample_pose(rng: &mut ChaCha8Rng, height: usize, width: usize, scale: f32) -> Result<Skeleton> {
    for _ in 0..MAX_ATTEMPTS {
        let mut pose = Pose::sample(rng);
        // Center the figure on canvases that are wider or taller than the reference aspect.
        pose.hip.0 += (width as f32 / scale - REF_W) * 0.5;
        pose.hip.1 += (height as f32 / scale - REF_H) * 0.5;
        let skel = Skeleton::build(&pose, scale);
        if skel.fits(height, width, scale) {
            return Ok(skel);
        }
    }
    bail_invalid!("canvas {height}x{width} cannot hold the figure skeleton")
}

/// Deterministically renders one identity in two random poses.
pub fn generate_toy_pair(seed: u64, height: usize, width: usize, classes: usize) -> Result<TrainingPair> {
    if classes < MIN_CLASSES {
        bail_invalid!("at least {MIN_CLASSES} attribute classes are required, got {classes}");
    }
    if classes > u8::MAX as usize + 1 {
        bail_invalid!("at most 256 classes fit in a label map");
    }
    let scale = (height as f32 / REF_H).min(width as f32 / REF_W);
    // Below this the limbs collapse to sub-pixel width.
    if scale * REF_H < 24.0 {
        bail_invalid!("canvas {height}x{width} is smaller than the figure skeleton");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let look = Appearance::sample(&mut rng);
    let a = sample_pose(&mut rng, height, width, scale)?;
    let b = sample_pose(&mut rng, height, width, scale)?;
    Ok(TrainingPair {
        source: to_sample(&render(&a, &look, height, width, scale), &a, classes)?,
        target: to_sample(&render(&b, &look, height, width, scale), &b, classes)?,
        identity_id: seed,
    })
}

/// A set of synthetic pairs generated from consecutive seeds.
#[derive(Debug, Clone)]
pub struct ToyDataset;

impl ToyDataset {
    pub fn generate(base_seed: u64, count: usize, height: usize, width: usize, classes: usize) -> Result<Vec<TrainingPair>> {
        (0..count as u64)
            .map(|i| generate_toy_pair(base_seed.wrapping_add(i), height, width, classes))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode_keypoints_to_heatmap, label_map_to_mask_set, SemanticMaskSet};

    #[test]
    fn deterministic_for_a_seed() -> Result<()> {
        assert_eq!(generate_toy_pair(11, 64, 48, 8)?, generate_toy_pair(11, 64, 48, 8)?);
        assert_ne!(generate_toy_pair(11, 64, 48, 8)?, generate_toy_pair(12, 64, 48, 8)?);
        Ok(())
    }

    #[test]
    fn construction_invariants() -> Result<()> {
        for seed in 0..50 {
            let pair = generate_toy_pair(seed, 64, 48, 8)?;
            for s in [&pair.source, &pair.target] {
                let masks = label_map_to_mask_set(&s.labels, 8)?;
                SemanticMaskSet::new(masks.data().to_vec(), 8, 64, 48)?;
                s.keypoints.validate(64, 48)?;
                assert!(s.keypoints.joints.iter().all(|j| j.visible));
                // Re-encoding the keypoints peaks exactly at each joint.
                let hm = encode_keypoints_to_heatmap(&s.keypoints, 64, 48, 1.5)?;
                for (i, j) in s.keypoints.joints.iter().enumerate() {
                    assert_eq!(hm.peak(i), Some((j.x as usize, j.y as usize)));
                }
            }
        }
        Ok(())
    }

    #[test]
    fn every_body_part_appears() -> Result<()> {
        let mut seen = [false; 8];
        for seed in 0..20 {
            let pair = generate_toy_pair(seed, 64, 48, 8)?;
            for &l in pair.source.labels.labels() {
                seen[l as usize] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "{seen:?}");
        Ok(())
    }

    #[test]
    fn poses_differ_within_a_pair() -> Result<()> {
        let differing = (0..1000u64)
            .filter(|&seed| {
                let p = generate_toy_pair(seed, 64, 48, 8).unwrap();
                p.source.keypoints.distance_sq(&p.target.keypoints) > 0.0
            })
            .count();
        assert!(differing >= 990, "{differing}");
        Ok(())
    }

    #[test]
    fn fewer_classes_fold_labels() -> Result<()> {
        let pair = generate_toy_pair(3, 64, 48, 6)?;
        assert!(pair.source.labels.max_label() < 6);
        Ok(())
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(generate_toy_pair(0, 16, 12, 8).is_err());
        assert!(generate_toy_pair(0, 64, 48, 5).is_err());
    }

    #[test]
    fn other_resolutions() -> Result<()> {
        let pair = generate_toy_pair(5, 128, 96, 8)?;
        assert_eq!(pair.source.image.height(), 128);
        let pair = generate_toy_pair(5, 32, 32, 8)?;
        pair.target.keypoints.validate(32, 32)?;
        Ok(())
    }
}
