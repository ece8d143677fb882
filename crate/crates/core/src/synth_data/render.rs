use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{image_seed, sample_id, BoxAnnotation, DomainSpec, Image, ImageSample, ShapeKind};
use crate::boxes::BBox;
use crate::error::{DmsnError, Result};

const MAX_PAIR_IOU: f64 = 0.3;
const MIN_CONTRAST: f64 = 0.35;
const PLACEMENT_TRIES: usize = 1000;

struct Placed {
    kind: ShapeKind,
    class_id: usize,
    bbox: BBox,
    color: [f64; 3],
}

fn inside_shape(kind: ShapeKind, b: &BBox, px: f64, py: f64) -> bool {
    if px < b.x1 || px > b.x2 || py < b.y1 || py > b.y2 {
        return false;
    }
    let (cx, cy) = b.center();
    match kind {
        ShapeKind::Square => true,
        ShapeKind::Circle => {
            let r = 0.5 * b.width();
            (px - cx).powi(2) + (py - cy).powi(2) <= r * r
        }
        ShapeKind::Triangle => {
            // apex at top centre, base along the bottom edge
            let t = (py - b.y1) / b.height();
            (px - cx).abs() <= t * 0.5 * b.width()
        }
    }
}

/// Rotation about the grey axis of RGB space.
fn hue_matrix(degrees: f64) -> [[f64; 3]; 3] {
    let (s, c) = degrees.to_radians().sin_cos();
    let k = (1.0 - c) / 3.0;
    let r = (1.0f64 / 3.0).sqrt() * s;
    [
        [c + k, k - r, k + r],
        [k + r, c + k, k - r],
        [k - r, k + r, c + k],
    ]
}

pub(super) fn render_sample(spec: &DomainSpec, index: usize, seed: u64) -> Result<ImageSample> {
    let id = sample_id(spec.domain_id, index);
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, &id));
    let (h, w) = spec.image_size;
    let app = &spec.appearance;

    let bg = app.background_palette[rng.gen_range(0..app.background_palette.len())];
    let grad_x = rng.gen_range(-0.08..0.08);
    let grad_y = rng.gen_range(-0.08..0.08);

    let (lo, hi) = spec.objects_per_image;
    let n_obj = rng.gen_range(lo..=hi);
    let n_classes = spec.classes.len();
    let (smin, smax) = spec.object_size;
    let mut placed: Vec<Placed> = Vec::with_capacity(n_obj);
    for j in 0..n_obj {
        // cyclic class assignment keeps category counts balanced per domain
        let class_id = (index + j) % n_classes;
        let kind = spec.classes[class_id];
        let mut bbox = None;
        for _ in 0..PLACEMENT_TRIES {
            let s = if smax > smin { rng.gen_range(smin..=smax) } else { smin };
            let x1 = rng.gen_range(0.0..=(w as f64 - s));
            let y1 = rng.gen_range(0.0..=(h as f64 - s));
            let cand = BBox::new(x1, y1, x1 + s, y1 + s);
            if placed.iter().all(|p| p.bbox.iou(&cand) <= MAX_PAIR_IOU) {
                bbox = Some(cand);
                break;
            }
        }
        let bbox = bbox.ok_or_else(|| {
            DmsnError::Config(format!("could not place {n_obj} objects in {}x{} image", h, w))
        })?;
        let color = loop {
            let c = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            let d: f64 = (0..3).map(|k| (c[k] - bg[k]).powi(2)).sum::<f64>().sqrt();
            if d >= MIN_CONTRAST {
                break c;
            }
        };
        placed.push(Placed {
            kind,
            class_id,
            bbox,
            color,
        });
    }

    let rot = hue_matrix(app.hue_rotation);
    let noise = Normal::new(0.0, app.noise_sigma.max(1e-12)).expect("noise sigma");
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut rgb = [0.0; 3];
            for k in 0..3 {
                rgb[k] = bg[k] + grad_x * (px / w as f64 - 0.5) + grad_y * (py / h as f64 - 0.5);
            }
            // later objects are drawn on top
            for p in &placed {
                if inside_shape(p.kind, &p.bbox, px, py) {
                    rgb = p.color;
                }
            }
            for row in &rot {
                let mut v = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
                v += app.brightness_shift;
                if app.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                data.push(q as f32 / 255.0);
            }
        }
    }

    Ok(ImageSample {
        pixels: Image {
            height: h,
            width: w,
            data,
        },
        domain_id: spec.domain_id,
        boxes: placed
            .iter()
            .map(|p| BoxAnnotation {
                class_id: p.class_id,
                bbox: p.bbox,
            })
            .collect(),
        sample_id: id,
    })
}
