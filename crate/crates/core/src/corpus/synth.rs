//! Seeded synthetic corpora of furniture-like line drawings.
//!
//! Each class is a parametric glyph whose proportions vary per artifact and
//! whose placement, stroke width, colours and noise vary per image. The
//! cluttered variant places several glyphs per scene and records their
//! boxes, which exercises curation and detection end to end.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{encode_ppm, write_file, BoxAnnotation, CorpusManifest, Depiction, ImageRecord, Result, Rgb, Sample};
use crate::geometry::{iou, Rect};
use crate::rng::{derive_seed, stream_rng};
use crate::taxonomy::{ClassId, Taxonomy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlyphKind {
    Chair,
    Table,
    Cabinet,
    Bed,
    Mirror,
    Bookcase,
    Commode,
    Stool,
    Sofa,
    Clock,
}

impl GlyphKind {
    pub const ALL: [GlyphKind; 10] = [
        GlyphKind::Chair,
        GlyphKind::Table,
        GlyphKind::Cabinet,
        GlyphKind::Bed,
        GlyphKind::Mirror,
        GlyphKind::Bookcase,
        GlyphKind::Commode,
        GlyphKind::Stool,
        GlyphKind::Sofa,
        GlyphKind::Clock,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GlyphKind::Chair => "chair",
            GlyphKind::Table => "table",
            GlyphKind::Cabinet => "cabinet",
            GlyphKind::Bed => "bed",
            GlyphKind::Mirror => "mirror",
            GlyphKind::Bookcase => "bookcase",
            GlyphKind::Commode => "commode",
            GlyphKind::Stool => "stool",
            GlyphKind::Sofa => "sofa",
            GlyphKind::Clock => "clock",
        }
    }

    pub fn class_id(self) -> ClassId {
        ClassId::new(self.name())
    }

    /// Strokes in unit box coordinates (y down) for one artifact.
    fn shapes(self, rng: &mut ChaCha8Rng) -> Vec<Shape> {
        let mut r = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let line = |x0, y0, x1, y1| Shape::Line([x0, y0], [x1, y1]);
        match self {
            GlyphKind::Chair => {
                let (back, front, seat, top) = (r(0.18, 0.3), r(0.72, 0.85), r(0.5, 0.62), r(0.02, 0.1));
                let rail = (top + seat) / 2.0;
                vec![
                    line(back, top, back, 0.97),
                    line(back, seat, front, seat),
                    line(front, seat, front, 0.97),
                    line(back, rail, back + r(0.12, 0.2), rail),
                ]
            }
            GlyphKind::Table => {
                let (top, left, right) = (r(0.28, 0.42), r(0.03, 0.1), r(0.9, 0.97));
                let inset = r(0.05, 0.12);
                vec![
                    line(left, top, right, top),
                    line(left, top + 0.06, right, top + 0.06),
                    line(left + inset, top, left + inset, 0.97),
                    line(right - inset, top, right - inset, 0.97),
                ]
            }
            GlyphKind::Cabinet => {
                let (l, rt, t, b) = (r(0.15, 0.25), r(0.75, 0.85), r(0.03, 0.1), r(0.9, 0.97));
                let mid = (l + rt) / 2.0;
                let knob = r(0.4, 0.6);
                let mut v = rect_outline(l, t, rt, b);
                v.push(line(mid, t, mid, b));
                v.push(Shape::Dot([mid - 0.07, knob], 0.035));
                v.push(Shape::Dot([mid + 0.07, knob], 0.035));
                v
            }
            GlyphKind::Bed => {
                let (head, foot, mattress) = (r(0.04, 0.1), r(0.9, 0.96), r(0.48, 0.6));
                let head_top = r(0.15, 0.3);
                vec![
                    line(head, head_top, head, 0.96),
                    line(foot, mattress - r(0.05, 0.12), foot, 0.96),
                    line(head, mattress, foot, mattress),
                    line(head, mattress + 0.16, foot, mattress + 0.16),
                ]
            }
            GlyphKind::Mirror => {
                let (cy, rx, ry) = (r(0.34, 0.42), r(0.24, 0.34), r(0.28, 0.34));
                vec![
                    Shape::Ellipse([0.5, cy], rx, ry),
                    line(0.5, cy + ry, 0.5, 0.95),
                    line(r(0.25, 0.35), 0.95, r(0.65, 0.75), 0.95),
                ]
            }
            GlyphKind::Bookcase => {
                let (l, rt, t, b) = (r(0.08, 0.16), r(0.84, 0.92), r(0.03, 0.08), r(0.92, 0.97));
                let mut v = rect_outline(l, t, rt, b);
                for k in 1..4 {
                    let y = t + (b - t) * k as f64 / 4.0;
                    v.push(line(l, y, rt, y));
                }
                v
            }
            GlyphKind::Commode => {
                let (t, b) = (r(0.15, 0.28), r(0.78, 0.86));
                let mut v = rect_outline(0.05, t, 0.95, b);
                for k in 1..3 {
                    let y = t + (b - t) * k as f64 / 3.0;
                    v.push(line(0.05, y, 0.95, y));
                    v.push(Shape::Dot([0.5, y - (b - t) / 6.0], 0.035));
                }
                v.push(Shape::Dot([0.5, b - (b - t) / 6.0], 0.035));
                v.push(line(0.12, b, 0.1, 0.97));
                v.push(line(0.88, b, 0.9, 0.97));
                v
            }
            GlyphKind::Stool => {
                let seat = r(0.22, 0.35);
                let splay = r(0.05, 0.15);
                vec![
                    Shape::Ellipse([0.5, seat], r(0.3, 0.4), r(0.06, 0.1)),
                    line(0.3, seat + 0.05, 0.3 - splay, 0.97),
                    line(0.5, seat + 0.08, 0.5, 0.97),
                    line(0.7, seat + 0.05, 0.7 + splay, 0.97),
                ]
            }
            GlyphKind::Sofa => {
                let (back, seat) = (r(0.15, 0.32), r(0.52, 0.62));
                vec![
                    line(0.12, back, 0.88, back),
                    line(0.04, seat, 0.96, seat),
                    line(0.04, seat - 0.18, 0.04, 0.82),
                    line(0.96, seat - 0.18, 0.96, 0.82),
                    line(0.04, 0.82, 0.96, 0.82),
                    line(0.12, back, 0.12, seat),
                    line(0.88, back, 0.88, seat),
                ]
            }
            GlyphKind::Clock => {
                let (l, rt) = (r(0.3, 0.38), r(0.62, 0.7));
                let face = r(0.18, 0.26);
                let mut v = rect_outline(l, 0.03, rt, 0.97);
                v.push(Shape::Ellipse([0.5, face], 0.11, 0.09));
                v.push(line(0.5, face + 0.2, 0.5, 0.72));
                v.push(Shape::Dot([0.5, 0.74], 0.05));
                v
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Line([f64; 2], [f64; 2]),
    Ellipse([f64; 2], f64, f64),
    Dot([f64; 2], f64),
}

fn rect_outline(l: f64, t: f64, r: f64, b: f64) -> Vec<Shape> {
    vec![
        Shape::Line([l, t], [r, t]),
        Shape::Line([r, t], [r, b]),
        Shape::Line([r, b], [l, b]),
        Shape::Line([l, b], [l, t]),
    ]
}

/// Maps unit glyph coordinates into a pixel-space box.
#[derive(Debug, Clone, Copy)]
struct Placement {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    flip: bool,
}

impl Placement {
    fn map(&self, p: [f64; 2]) -> [f64; 2] {
        let u = if self.flip { 1.0 - p[0] } else { p[0] };
        [self.x + u * self.w, self.y + p[1] * self.h]
    }
}

fn plot(img: &mut ImageRecord, bounds: [f64; 4], color: Rgb, inside: impl Fn(f64, f64) -> bool) {
    let x0 = bounds[0].floor().max(0.0) as usize;
    let y0 = bounds[1].floor().max(0.0) as usize;
    let x1 = (bounds[2].ceil().max(0.0) as usize).min(img.width());
    let y1 = (bounds[3].ceil().max(0.0) as usize).min(img.height());
    for y in y0..y1 {
        for x in x0..x1 {
            if inside(x as f64 + 0.5, y as f64 + 0.5) {
                img.set(x, y, color);
            }
        }
    }
}

fn draw_segment(img: &mut ImageRecord, a: [f64; 2], b: [f64; 2], width: f64, color: Rgb) {
    let half = width / 2.0;
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = (dx * dx + dy * dy).max(1e-12);
    let bounds = [
        a[0].min(b[0]) - half,
        a[1].min(b[1]) - half,
        a[0].max(b[0]) + half,
        a[1].max(b[1]) + half,
    ];
    plot(img, bounds, color, |px, py| {
        let t = (((px - a[0]) * dx + (py - a[1]) * dy) / len2).clamp(0.0, 1.0);
        let (qx, qy) = (a[0] + t * dx - px, a[1] + t * dy - py);
        qx * qx + qy * qy <= half * half
    });
}

fn draw_ellipse(img: &mut ImageRecord, c: [f64; 2], rx: f64, ry: f64, width: f64, color: Rgb) {
    let half = width / 2.0;
    let bounds = [c[0] - rx - half, c[1] - ry - half, c[0] + rx + half, c[1] + ry + half];
    let scale = rx.min(ry).max(1e-6);
    plot(img, bounds, color, |px, py| {
        let d = (((px - c[0]) / rx).powi(2) + ((py - c[1]) / ry).powi(2)).sqrt();
        ((d - 1.0) * scale).abs() <= half
    });
}

fn draw_dot(img: &mut ImageRecord, c: [f64; 2], radius: f64, color: Rgb) {
    let bounds = [c[0] - radius, c[1] - radius, c[0] + radius, c[1] + radius];
    plot(img, bounds, color, |px, py| {
        (px - c[0]).powi(2) + (py - c[1]).powi(2) <= radius * radius
    });
}

fn render_glyph(
    img: &mut ImageRecord,
    shapes: &[Shape],
    place: &Placement,
    color: Rgb,
    rng: &mut ChaCha8Rng,
) {
    let width = (place.w.min(place.h) * rng.random_range(0.05..0.08)).max(1.2);
    let mut jitter = |p: [f64; 2]| {
        [
            p[0] + rng.random_range(-0.02..0.02),
            p[1] + rng.random_range(-0.02..0.02),
        ]
    };
    for shape in shapes {
        match *shape {
            Shape::Line(a, b) => {
                let (a, b) = (place.map(jitter(a)), place.map(jitter(b)));
                draw_segment(img, a, b, width, color);
            }
            Shape::Ellipse(c, rx, ry) => {
                let c = place.map(jitter(c));
                draw_ellipse(img, c, rx * place.w, ry * place.h, width, color);
            }
            Shape::Dot(c, r) => {
                let c = place.map(jitter(c));
                draw_dot(img, c, (r * place.w.min(place.h)).max(0.8), color);
            }
        }
    }
}

fn background(size_w: usize, size_h: usize, noise: f64, rng: &mut ChaCha8Rng) -> ImageRecord {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(185.0..245.0));
    let mut pixels = Vec::with_capacity(3 * size_w * size_h);
    for _ in 0..size_w * size_h {
        let n = if noise > 0.0 {
            rng.random_range(-noise..noise)
        } else {
            0.0
        };
        for b in base {
            pixels.push((b + n).round().clamp(0.0, 255.0) as u8);
        }
    }
    ImageRecord::new(size_w, size_h, pixels).expect("sizes consistent")
}

fn ink(rng: &mut ChaCha8Rng) -> Rgb {
    let base = rng.random_range(10.0..90.0);
    std::array::from_fn(|_| (base + rng.random_range(-25.0f64..25.0)).clamp(0.0, 255.0) as u8)
}

fn add_distractors(img: &mut ImageRecord, count: usize, rng: &mut ChaCha8Rng) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    for _ in 0..count {
        let a = [rng.random_range(0.0..w), rng.random_range(0.0..h)];
        let len = rng.random_range(0.1..0.3) * w.min(h);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let b = [a[0] + len * angle.cos(), a[1] + len * angle.sin()];
        let grey = rng.random_range(120.0..170.0) as u8;
        draw_segment(img, a, b, 1.0, [grey, grey, grey]);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClutterSpec {
    pub scene_size: usize,
    pub objects_per_scene: usize,
    pub box_min: usize,
    pub box_max: usize,
    /// Largest IoU allowed between two objects of one scene.
    pub max_overlap: f64,
    /// Extra partial-view samples per class, as a fraction of the scenes.
    pub partial_fraction: f64,
}

impl Default for ClutterSpec {
    fn default() -> Self {
        Self {
            scene_size: 64,
            objects_per_scene: 2,
            box_min: 26,
            box_max: 34,
            max_overlap: 0.1,
            partial_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub classes: Vec<GlyphKind>,
    pub images_per_class: usize,
    /// Side of single-object images.
    pub size: usize,
    /// Amplitude of uniform background noise, in 8-bit levels.
    pub noise: f64,
    /// Thin stray strokes per image.
    pub distractors: usize,
    /// Images sharing one artifact (same glyph proportions, new placement).
    pub views_per_artifact: usize,
    pub clutter: Option<ClutterSpec>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: GlyphKind::ALL[..5].to_vec(),
            images_per_class: 200,
            size: 32,
            noise: 10.0,
            distractors: 1,
            views_per_artifact: 1,
            clutter: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub manifest: CorpusManifest,
    pub taxonomy: Taxonomy,
    pub images: Vec<(String, ImageRecord)>,
}

impl SyntheticCorpus {
    /// Writes images, `manifest.jsonl` and `taxonomy.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.images
            .par_iter()
            .try_for_each(|(path, img)| write_file(&dir.join(path), &encode_ppm(img)))?;
        self.manifest.write(dir.join("manifest.jsonl"))?;
        write_file(&dir.join("taxonomy.json"), self.taxonomy.to_json().as_bytes())
    }
}

const GLYPH_STREAM: u64 = 1 << 40;
const PARTIAL_STREAM: u64 = 1 << 41;

/// Generates a corpus; identical `(spec, seed)` give identical bytes.
pub fn generate_synthetic_corpus(spec: &SynthSpec, seed: u64) -> SyntheticCorpus {
    let names: Vec<&str> = spec.classes.iter().map(|k| k.name()).collect();
    let taxonomy = Taxonomy::flat(&names).expect("glyph names are distinct");
    let jobs: Vec<(usize, usize)> = (0..spec.classes.len())
        .flat_map(|c| (0..spec.images_per_class).map(move |i| (c, i)))
        .collect();

    let mut items: Vec<(Sample, ImageRecord)> = match &spec.clutter {
        None => jobs
            .par_iter()
            .map(|&(c, i)| single_object(spec, seed, c, i))
            .collect(),
        Some(clutter) => {
            let mut scenes: Vec<_> = jobs
                .par_iter()
                .map(|&(c, i)| scene(spec, clutter, seed, c, i))
                .collect();
            let partials = (clutter.partial_fraction * spec.images_per_class as f64).round() as usize;
            let extra: Vec<(usize, usize)> = (0..spec.classes.len())
                .flat_map(|c| (0..partials).map(move |i| (c, i)))
                .collect();
            let partial: Vec<_> = extra
                .par_iter()
                .map(|&(c, i)| partial_view(spec, clutter.scene_size, seed, c, i))
                .collect();
            scenes.extend(partial);
            scenes
        }
    };
    items.sort_by(|a, b| a.0.path.cmp(&b.0.path));
    let (samples, images): (Vec<Sample>, Vec<(String, ImageRecord)>) = items
        .into_iter()
        .map(|(s, img)| {
            let path = s.path.clone();
            (s, (path, img))
        })
        .unzip();
    SyntheticCorpus {
        manifest: CorpusManifest::new(samples),
        taxonomy,
        images,
    }
}

fn item_stream(class: usize, index: usize) -> u64 {
    ((class as u64) << 32) | index as u64
}

fn single_object(spec: &SynthSpec, seed: u64, c: usize, i: usize) -> (Sample, ImageRecord) {
    let kind = spec.classes[c];
    let views = spec.views_per_artifact.max(1);
    let artifact = i / views;
    let mut glyph_rng = stream_rng(seed, GLYPH_STREAM + item_stream(c, artifact));
    let shapes = kind.shapes(&mut glyph_rng);
    let flip = glyph_rng.random_bool(0.5);

    let mut rng = stream_rng(seed, item_stream(c, i));
    let s = spec.size as f64;
    let mut img = background(spec.size, spec.size, spec.noise, &mut rng);
    let w = s * rng.random_range(0.72..0.95);
    let h = s * rng.random_range(0.72..0.95);
    let place = Placement {
        x: rng.random_range(0.0..=(s - w)),
        y: rng.random_range(0.0..=(s - h)),
        w,
        h,
        flip,
    };
    let color = ink(&mut rng);
    render_glyph(&mut img, &shapes, &place, color, &mut rng);
    add_distractors(&mut img, spec.distractors, &mut rng);
    let sample = Sample {
        path: format!("{}/{}_{:05}.ppm", kind.name(), kind.name(), i),
        class: kind.class_id(),
        artifact_id: format!("{}-{:05}", kind.name(), artifact),
        depiction: Depiction::Whole,
        boxes: Vec::new(),
    };
    (sample, img)
}

fn place_boxes(clutter: &ClutterSpec, rng: &mut ChaCha8Rng) -> Vec<Rect> {
    let size = clutter.scene_size;
    let max_side = clutter.box_max.min(size);
    let min_side = clutter.box_min.min(max_side).max(1);
    let mut boxes: Vec<Rect> = Vec::new();
    let mut attempts = 0;
    while boxes.len() < clutter.objects_per_scene {
        let w = rng.random_range(min_side..=max_side);
        let h = rng.random_range(min_side..=max_side);
        let candidate = Rect::new(
            rng.random_range(0..=size - w),
            rng.random_range(0..=size - h),
            w,
            h,
        );
        attempts += 1;
        let fits = boxes.iter().all(|b| iou(b, &candidate) <= clutter.max_overlap);
        // Give up on the overlap limit rather than loop forever on crowded specs.
        if fits || attempts > 200 {
            boxes.push(candidate);
        }
    }
    boxes
}

fn scene(spec: &SynthSpec, clutter: &ClutterSpec, seed: u64, c: usize, i: usize) -> (Sample, ImageRecord) {
    let mut rng = stream_rng(seed, item_stream(c, i));
    let size = clutter.scene_size;
    let mut img = background(size, size, spec.noise, &mut rng);
    let rects = place_boxes(clutter, &mut rng);
    let mut boxes = Vec::with_capacity(rects.len());
    for (k, rect) in rects.iter().enumerate() {
        let kind = if k == 0 {
            spec.classes[c]
        } else {
            spec.classes[rng.random_range(0..spec.classes.len())]
        };
        let mut glyph_rng = ChaCha8Rng::from_rng_seed(derive_seed(seed, GLYPH_STREAM ^ rng.random::<u64>()));
        let shapes = kind.shapes(&mut glyph_rng);
        let place = Placement {
            x: rect.x as f64,
            y: rect.y as f64,
            w: rect.w as f64,
            h: rect.h as f64,
            flip: glyph_rng.random_bool(0.5),
        };
        let color = ink(&mut rng);
        render_glyph(&mut img, &shapes, &place, color, &mut rng);
        boxes.push(BoxAnnotation::from_rect(*rect, kind.class_id()));
    }
    add_distractors(&mut img, spec.distractors, &mut rng);
    let kind = spec.classes[c];
    let sample = Sample {
        path: format!("scenes/{}_{:05}.ppm", kind.name(), i),
        class: kind.class_id(),
        artifact_id: format!("scene-{}-{:05}", kind.name(), i),
        depiction: Depiction::Interior,
        boxes,
    };
    (sample, img)
}

/// A glyph pushed partly out of frame, labeled as a partial depiction.
fn partial_view(spec: &SynthSpec, size: usize, seed: u64, c: usize, i: usize) -> (Sample, ImageRecord) {
    let kind = spec.classes[c];
    let mut rng = stream_rng(seed, PARTIAL_STREAM + item_stream(c, i));
    let mut img = background(size, size, spec.noise, &mut rng);
    let shapes = kind.shapes(&mut rng);
    let s = size as f64;
    let (w, h) = (s * rng.random_range(0.8..1.0), s * rng.random_range(0.8..1.0));
    let shift = rng.random_range(0.35..0.55);
    let (x, y) = match rng.random_range(0..4) {
        0 => (-w * shift, 0.0),
        1 => (s - w * (1.0 - shift), 0.0),
        2 => (0.0, -h * shift),
        _ => (0.0, s - h * (1.0 - shift)),
    };
    let place = Placement {
        x,
        y,
        w,
        h,
        flip: rng.random_bool(0.5),
    };
    let color = ink(&mut rng);
    render_glyph(&mut img, &shapes, &place, color, &mut rng);
    let sample = Sample {
        path: format!("partial/{}_{:05}.ppm", kind.name(), i),
        class: kind.class_id(),
        artifact_id: format!("partial-{}-{:05}", kind.name(), i),
        depiction: Depiction::Partial,
        boxes: Vec::new(),
    };
    (sample, img)
}

trait FromRngSeed {
    fn from_rng_seed(seed: u64) -> Self;
}

impl FromRngSeed for ChaCha8Rng {
    fn from_rng_seed(seed: u64) -> Self {
        rand::SeedableRng::seed_from_u64(seed)
    }
}
