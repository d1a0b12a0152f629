//! Synthetic multi-object scenes with full ground truth, and their on-disk
//! form: 8-bit RGB PNGs, single-channel class-index PNGs, and a JSON
//! manifest.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, invalid, Result};
use crate::boundary::ClassMap;
use crate::tensor::Tensor;

/// Foreground shape classes, ids 1..=4 on the ground-truth mask.
pub const NUM_FOREGROUND_CLASSES: usize = 4;
pub const SCENE_SIZE: usize = 64;

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub id: usize,
    /// [3 x H x W] in [0, 1].
    pub image: Tensor,
    /// Class indices, 0 = background.
    pub gt_mask: ClassMap,
    /// Multi-hot over the foreground classes.
    pub image_labels: Vec<f64>,
}

impl SyntheticScene {
    pub fn labels_tensor(&self) -> Tensor {
        Tensor::new(&[1, NUM_FOREGROUND_CLASSES], self.image_labels.clone())
            .expect("label length fixed")
    }
}

/// Geometry of one placed object.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SceneSpec {
    pub class_id: u8,
    pub center: (f64, f64),
    pub size: f64,
}

#[derive(Clone, Copy)]
enum Shape {
    Disk,
    Square,
    Triangle,
    Ring,
}

impl Shape {
    fn for_class(class_id: u8) -> Shape {
        match class_id {
            1 => Shape::Disk,
            2 => Shape::Square,
            3 => Shape::Triangle,
            _ => Shape::Ring,
        }
    }

    fn contains(self, dy: f64, dx: f64, size: f64) -> bool {
        match self {
            Shape::Disk => dy * dy + dx * dx <= size * size,
            Shape::Square => dy.abs() <= size && dx.abs() <= size,
            Shape::Triangle => {
                // apex at the top, base at the bottom
                if dy < -size || dy > size {
                    return false;
                }
                let half_width = size * (dy + size) / (2.0 * size);
                dx.abs() <= half_width
            }
            Shape::Ring => {
                let d2 = dy * dy + dx * dx;
                let inner = 0.55 * size;
                d2 <= size * size && d2 >= inner * inner
            }
        }
    }
}

/// Colour family per class: a strong base hue plus per-instance jitter.
fn class_color(class_id: u8, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let jitter = |rng: &mut ChaCha8Rng| rng.random::<f64>() * 0.15 - 0.075;
    let base = match class_id {
        1 => [0.85, 0.15, 0.15], // disks: red
        2 => [0.15, 0.75, 0.20], // squares: green
        3 => [0.20, 0.25, 0.85], // triangles: blue
        _ => [0.85, 0.78, 0.12], // rings: yellow
    };
    [
        (base[0] + jitter(rng)).clamp(0.0, 1.0),
        (base[1] + jitter(rng)).clamp(0.0, 1.0),
        (base[2] + jitter(rng)).clamp(0.0, 1.0),
    ]
}

fn generate_scene(id: usize, seed: u64) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5ce, id as u64]));
    let (h, w) = (SCENE_SIZE, SCENE_SIZE);

    // textured background: muted base colour, a linear ramp, soft blotches,
    // and per-pixel noise
    let base: [f64; 3] = [
        0.35 + rng.random::<f64>() * 0.3,
        0.35 + rng.random::<f64>() * 0.3,
        0.35 + rng.random::<f64>() * 0.3,
    ];
    let ramp: [(f64, f64); 3] = std::array::from_fn(|_| {
        (
            rng.random::<f64>() * 0.3 - 0.15,
            rng.random::<f64>() * 0.3 - 0.15,
        )
    });
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            (
                rng.random::<f64>() * h as f64,
                rng.random::<f64>() * w as f64,
                6.0 + rng.random::<f64>() * 10.0,
                std::array::from_fn(|_| rng.random::<f64>() * 0.16 - 0.08),
            )
        })
        .collect();

    let mut image = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let fy = y as f64 / h as f64;
            let fx = x as f64 / w as f64;
            for c in 0..3 {
                let mut v = base[c] + ramp[c].0 * fy + ramp[c].1 * fx;
                for &(by, bx, br, tint) in &blobs {
                    let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                    v += tint[c] * (-d2 / (br * br)).exp();
                }
                v += rng.random::<f64>() * 0.06 - 0.03;
                image.data_mut()[(c * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }

    // 1-3 objects, later ones occlude earlier ones
    let num_objects = match rng.random::<f64>() {
        v if v < 0.5 => 1,
        v if v < 0.8 => 2,
        _ => 3,
    };
    let mut mask = vec![0u8; h * w];
    for _ in 0..num_objects {
        let class_id = rng.random_range(1..=NUM_FOREGROUND_CLASSES as u8);
        let shape = Shape::for_class(class_id);
        let size = 6.0 + rng.random::<f64>() * 8.0;
        let cy = size + rng.random::<f64>() * (h as f64 - 2.0 * size);
        let cx = size + rng.random::<f64>() * (w as f64 - 2.0 * size);
        let color = class_color(class_id, &mut rng);
        for y in 0..h {
            for x in 0..w {
                if shape.contains(y as f64 - cy, x as f64 - cx, size) {
                    mask[y * w + x] = class_id;
                    let shade = 1.0 + (rng.random::<f64>() * 0.12 - 0.06);
                    for c in 0..3 {
                        image.data_mut()[(c * h + y) * w + x] =
                            (color[c] * shade).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }

    // labels from the final mask: occlusion can erase an earlier object
    let mut image_labels = vec![0.0; NUM_FOREGROUND_CLASSES];
    for &m in &mask {
        if m > 0 {
            image_labels[m as usize - 1] = 1.0;
        }
    }
    // guarantee at least one visible object (full occlusion is possible in
    // principle); redraw the scene with a shifted stream if it happened
    if image_labels.iter().all(|&v| v == 0.0) {
        return generate_scene(id, derive_seed(seed, &[0xdead, id as u64]));
    }

    SyntheticScene {
        id,
        image,
        gt_mask: ClassMap::new(h, w, mask).expect("sizes agree"),
        image_labels,
    }
}

/// Deterministic dataset: scene i depends only on (seed, i).
pub fn generate_dataset(n: usize, seed: u64) -> Vec<SyntheticScene> {
    (0..n).map(|i| generate_scene(i, seed)).collect()
}

// ── disk format ──────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct SceneEntry {
    id: usize,
    image: String,
    mask: String,
    labels: Vec<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    num_classes: usize,
    scenes: Vec<SceneEntry>,
}

/// Writes one split directory: images/ and masks/ PNGs plus labels.json.
pub fn write_dataset(dir: &Path, scenes: &[SyntheticScene]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut entries = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let (h, w) = (scene.gt_mask.height, scene.gt_mask.width);
        let mut rgb = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px: [u8; 3] = std::array::from_fn(|c| {
                    (scene.image.data()[(c * h + y) * w + x] * 255.0).round() as u8
                });
                rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        let img_rel = format!("images/scene_{:05}.png", scene.id);
        rgb.save(dir.join(&img_rel))?;

        let gray = image::GrayImage::from_raw(
            w as u32,
            h as u32,
            scene.gt_mask.data.clone(),
        )
        .expect("buffer sized");
        let mask_rel = format!("masks/scene_{:05}.png", scene.id);
        gray.save(dir.join(&mask_rel))?;

        entries.push(SceneEntry {
            id: scene.id,
            image: img_rel,
            mask: mask_rel,
            labels: scene.image_labels.iter().map(|&v| v as u8).collect(),
        });
    }
    let manifest = DatasetManifest {
        num_classes: NUM_FOREGROUND_CLASSES,
        scenes: entries,
    };
    std::fs::write(
        dir.join("labels.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SyntheticScene>> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("labels.json"))?)?;
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for entry in manifest.scenes {
        let rgb = image::open(dir.join(&entry.image))?.into_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut img = Tensor::zeros(&[3, h, w]);
        for y in 0..h {
            for x in 0..w {
                let px = rgb.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    img.data_mut()[(c * h + y) * w + x] = px.0[c] as f64 / 255.0;
                }
            }
        }
        let gray = image::open(dir.join(&entry.mask))?.into_luma8();
        let mask = ClassMap::new(h, w, gray.into_raw())
            .map_err(|e| invalid("read_dataset", e.to_string()))?;
        let mut labels = vec![0.0; manifest.num_classes];
        for (i, &l) in entry.labels.iter().enumerate() {
            labels[i] = l as f64;
        }
        scenes.push(SyntheticScene {
            id: entry.id,
            image: img,
            gt_mask: mask,
            image_labels: labels,
        });
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_bitwise_identical_datasets() {
        let a = generate_dataset(5, 42);
        let b = generate_dataset(5, 42);
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.image.data(), sb.image.data());
            assert_eq!(sa.gt_mask, sb.gt_mask);
            assert_eq!(sa.image_labels, sb.image_labels);
        }
        let c = generate_dataset(5, 43);
        assert_ne!(a[0].image.data(), c[0].image.data());
    }

    #[test]
    fn labels_match_mask_recomputation() {
        for scene in generate_dataset(50, 7) {
            let mut recomputed = vec![0.0; NUM_FOREGROUND_CLASSES];
            for &m in &scene.gt_mask.data {
                if m > 0 {
                    recomputed[m as usize - 1] = 1.0;
                }
            }
            assert_eq!(scene.image_labels, recomputed);
            assert!(recomputed.iter().any(|&v| v == 1.0));
        }
    }

    #[test]
    fn every_class_appears_in_at_least_ten_percent_of_scenes() {
        let scenes = generate_dataset(1000, 11);
        let mut counts = [0usize; NUM_FOREGROUND_CLASSES];
        for scene in &scenes {
            for (c, &l) in scene.image_labels.iter().enumerate() {
                if l == 1.0 {
                    counts[c] += 1;
                }
            }
        }
        for (c, &n) in counts.iter().enumerate() {
            assert!(n >= 100, "class {c} appears in only {n}/1000 scenes");
        }
    }

    #[test]
    fn image_values_stay_in_unit_range() {
        for scene in generate_dataset(20, 3) {
            assert!(scene
                .image
                .data()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn disk_round_trip_preserves_masks_and_quantised_images() {
        let scenes = generate_dataset(4, 19);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &scenes).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 4);
        for (orig, loaded) in scenes.iter().zip(&back) {
            assert_eq!(orig.gt_mask, loaded.gt_mask);
            assert_eq!(orig.image_labels, loaded.image_labels);
            for (a, b) in orig.image.data().iter().zip(loaded.image.data()) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9, "quantisation only");
            }
        }
    }

    #[test]
    fn scenes_have_varied_object_counts() {
        let scenes = generate_dataset(200, 23);
        let multi = scenes
            .iter()
            .filter(|s| s.image_labels.iter().sum::<f64>() > 1.0)
            .count();
        assert!(multi > 20, "expected multi-class scenes, got {multi}");
        let single = scenes.len() - multi;
        assert!(single > 50, "expected single-class scenes, got {single}");
    }
}
