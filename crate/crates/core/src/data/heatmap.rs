use super::{ImageTensor, Keypoints, PoseHeatmap, SemanticLabelMap, SemanticMaskSet, NUM_JOINTS};
use crate::error::{bail_invalid, Result};

const TAIL_CUTOFF: f32 = 40.0;

/// Renders each visible joint as an unnormalized Gaussian with peak value 1;
/// invisible joints yield all-zero channels. Tail values below `e^-40` are stored
/// as zero so they never turn into subnormal floats.
pub fn encode_keypoints_to_heatmap(kp: &Keypoints, height: usize, width: usize, sigma: f32) -> Result<PoseHeatmap> {
    if height == 0 || width == 0 {
        bail_invalid!("heatmap size must be positive, got {height}x{width}");
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        bail_invalid!("heatmap sigma must be positive, got {sigma}");
    }
    kp.validate(height, width)?;
    let n = height * width;
    let mut data = vec![0f32; NUM_JOINTS * n];
    let denom = 2.0 * sigma * sigma;
    for (j, joint) in kp.joints.iter().enumerate() {
        if !joint.visible {
            continue;
        }
        let ch = &mut data[j * n..(j + 1) * n];
        for y in 0..height {
            let dy = y as f32 - joint.y;
            for x in 0..width {
                let dx = x as f32 - joint.x;
                let e = (dx * dx + dy * dy) / denom;
                if e < TAIL_CUTOFF {
                    ch[y * width + x] = (-e).exp();
                }
            }
        }
    }
    Ok(PoseHeatmap::from_raw(data, height, width))
}

/// One-hot encoding of a label map into `classes` channels.
pub fn label_map_to_mask_set(labels: &SemanticLabelMap, classes: usize) -> Result<SemanticMaskSet> {
    if classes == 0 {
        bail_invalid!("number of classes must be positive");
    }
    let (h, w) = (labels.height(), labels.width());
    let n = h * w;
    let mut data = vec![0f32; classes * n];
    for (p, &l) in labels.labels().iter().enumerate() {
        let l = l as usize;
        if l >= classes {
            bail_invalid!("label {l} at pixel {p} exceeds class count {classes}");
        }
        data[l * n + p] = 1.0;
    }
    Ok(SemanticMaskSet::from_raw(data, classes, h, w))
}

/// Splits an image into `K` masked copies, `I ⊙ M^i` broadcast over color channels.
pub fn decompose_attributes(image: &ImageTensor, masks: &SemanticMaskSet) -> Result<Vec<ImageTensor>> {
    let (h, w) = (image.height(), image.width());
    if masks.height() != h || masks.width() != w {
        bail_invalid!(
            "image is {h}x{w} but masks are {}x{}",
            masks.height(),
            masks.width()
        );
    }
    let n = h * w;
    (0..masks.classes())
        .map(|k| {
            let mask = masks.channel(k);
            let data = image
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v * mask[i % n])
                .collect();
            ImageTensor::new(data, h, w)
        })
        .collect()
}
