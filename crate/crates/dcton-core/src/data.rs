//! Synthetic try-on corpus: procedurally rendered paper-doll figures with
//! exact parse labels, garment templates, dense pose descriptors, and the
//! ground-truth warp that placed each garment on its wearer.
//!
//! A sample `id` owns five files under the dataset root:
//! `person/<id>.png`, `clothes/<id>.png` (the worn garment's flat
//! template), `target/<id>.png` (a different garment to try on),
//! `parse/<id>.png` (palette-indexed labels) and `descriptor/<id>.tns`
//! (7-channel float pose descriptor). `manifest.txt` lists ids in sorted
//! order. Images are RGB u8 on disk and (3, H, W) tensors in [-1, 1] in
//! memory.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{apply_warp, WarpField};
use crate::tensor::Tensor;

/// Parse label: pixel not on the figure.
pub const LABEL_BACKGROUND: u8 = 0;
/// Parse label: worn garment.
pub const LABEL_CLOTHES: u8 = 1;
/// Parse label: exposed skin (head, arms).
pub const LABEL_SKIN: u8 = 2;
/// Parse label: other body content (legs/trousers).
pub const LABEL_BODY: u8 = 3;

/// Descriptor layout: channels 0-1 are body-frame UV, 2..7 one-hot parts.
pub const DESCRIPTOR_CHANNELS: usize = 7;
const PART_HEAD: usize = 0;
const PART_TORSO: usize = 1;
const PART_LEFT_ARM: usize = 2;
const PART_RIGHT_ARM: usize = 3;
const PART_LOWER: usize = 4;

/// Parameters of a generated dataset.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub clothes_styles: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { count: 200, height: 64, width: 48, seed: 0, clothes_styles: 6 }
    }
}

impl DatasetSpec {
    fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 || self.height % 16 != 0 || self.width % 16 != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size must be at least 32 and divisible by 16, got {}x{}",
                self.height, self.width
            )));
        }
        if self.clothes_styles == 0 {
            return Err(Error::InvalidArgument("need at least one clothes style".into()));
        }
        Ok(())
    }
}

/// One loaded training/evaluation sample.
#[derive(Debug, Clone)]
pub struct TryOnSample {
    pub id: String,
    /// Person image, (3, H, W) in [-1, 1].
    pub person: Tensor<f32>,
    /// Flat template of the garment the person wears.
    pub clothes: Tensor<f32>,
    /// Flat template of a different garment.
    pub target: Tensor<f32>,
    /// Per-pixel labels, row-major H*W.
    pub parse: Vec<u8>,
    /// Pose descriptor, (7, H, W).
    pub descriptor: Tensor<f32>,
}

/// A sample as rendered in memory, including generation-only ground truth.
pub struct RenderedSample {
    pub id: String,
    pub person: Tensor<f32>,
    pub clothes: Tensor<f32>,
    pub target: Tensor<f32>,
    pub parse: Vec<u8>,
    pub descriptor: Tensor<f32>,
    /// Backward warp that placed the garment template on the person.
    pub warp: WarpField,
}

// ── Rendering ───────────────────────────────────────────────────────────

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// [0,1] colour to the [-1,1] tensor range.
fn signed(c: [f32; 3]) -> [f32; 3] {
    [c[0] * 2.0 - 1.0, c[1] * 2.0 - 1.0, c[2] * 2.0 - 1.0]
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<f32>,
    own: Vec<u8>, // 0 = none, 1.. = part codes below
}

const OWN_NONE: u8 = 0;
const OWN_HEAD: u8 = 1;
const OWN_TORSO: u8 = 2;
const OWN_LEFT_ARM: u8 = 3;
const OWN_RIGHT_ARM: u8 = 4;
const OWN_LOWER: u8 = 5;

impl Canvas {
    fn new(h: usize, w: usize, bg: [f32; 3]) -> Self {
        let mut rgb = vec![0.0f32; 3 * h * w];
        for c in 0..3 {
            rgb[c * h * w..(c + 1) * h * w].fill(bg[c]);
        }
        Canvas { h, w, rgb, own: vec![OWN_NONE; h * w] }
    }

    fn put(&mut self, y: usize, x: usize, color: [f32; 3], own: u8) {
        let i = y * self.w + x;
        for c in 0..3 {
            self.rgb[c * self.h * self.w + i] = color[c];
        }
        self.own[i] = own;
    }

    fn disk(&mut self, cx: f64, cy: f64, r: f64, color: [f32; 3], own: u8) {
        let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(self.h - 1));
        let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(self.w - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    self.put(y, x, color, own);
                }
            }
        }
    }

    fn capsule(&mut self, a: [f64; 2], b: [f64; 2], r: f64, color: [f32; 3], own: u8) {
        let x0 = (a[0].min(b[0]) - r).floor().max(0.0) as usize;
        let x1 = ((a[0].max(b[0]) + r).ceil() as usize).min(self.w - 1);
        let y0 = (a[1].min(b[1]) - r).floor().max(0.0) as usize;
        let y1 = ((a[1].max(b[1]) + r).ceil() as usize).min(self.h - 1);
        let (vx, vy) = (b[0] - a[0], b[1] - a[1]);
        let len2 = (vx * vx + vy * vy).max(1e-9);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (px, py) = (x as f64 + 0.5 - a[0], y as f64 + 0.5 - a[1]);
                let t = ((px * vx + py * vy) / len2).clamp(0.0, 1.0);
                let (dx, dy) = (px - t * vx, py - t * vy);
                if dx * dx + dy * dy <= r * r {
                    self.put(y, x, color, own);
                }
            }
        }
    }
}

/// Garment template geometry: box corners in normalized coordinates
/// (top-left, top-right, bottom-left), used for warp correspondence.
struct GarmentBox {
    corners: [[f64; 2]; 3],
}

/// Flat garment template for one style: RGB in [-1,1], hard alpha, and the
/// garment box. Styles cycle through hue and pattern deterministically.
fn garment_template(style: usize, h: usize, w: usize) -> (Tensor<f32>, Tensor<f32>, GarmentBox) {
    let bg = signed([0.92, 0.92, 0.92]);
    let hue = (style as f64 * 0.381_966) % 1.0; // golden-angle spacing
    let base = hsv(hue, 0.75, 0.62);
    let accent = hsv(hue + 0.45, 0.65, 0.85);
    let dark = hsv(hue, 0.8, 0.3);
    let pattern = style % 5;

    let (x0, x1) = (0.27 * w as f64, 0.73 * w as f64);
    let (y0, y1) = (0.30 * h as f64, 0.62 * h as f64);
    let neck_hw = 0.09 * w as f64;
    let neck_d = 0.05 * h as f64;
    let cx = 0.5 * w as f64;

    let mut rgb = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        rgb[c * h * w..(c + 1) * h * w].fill(bg[c]);
    }
    let mut alpha = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if px < x0 || px > x1 || py < y0 || py > y1 {
                continue;
            }
            // Neck notch: triangular cut at the top center.
            let in_notch = py < y0 + neck_d
                && (px - cx).abs() < neck_hw * (1.0 - (py - y0) / neck_d);
            if in_notch {
                continue;
            }
            let border = px - x0 < 1.5 || x1 - px < 1.5 || py - y0 < 1.5 || y1 - py < 1.5;
            let mut col = if border {
                dark
            } else {
                match pattern {
                    1 => {
                        if ((py - y0) / 7.0) as i64 % 2 == 0 {
                            base
                        } else {
                            accent
                        }
                    }
                    2 => {
                        if ((px - x0) / 6.0) as i64 % 2 == 0 {
                            base
                        } else {
                            accent
                        }
                    }
                    3 => {
                        if ((px + py) / 8.0) as i64 % 2 == 0 {
                            base
                        } else {
                            accent
                        }
                    }
                    4 => base,
                    _ => base,
                }
            };
            // Chest patch for the logo pattern.
            if pattern == 4
                && (px - cx).abs() < 0.08 * w as f64
                && (py - (y0 + 0.35 * (y1 - y0))).abs() < 0.07 * h as f64
            {
                col = accent;
            }
            let i = y * w + x;
            alpha[i] = 1.0;
            for c in 0..3 {
                rgb[c * h * w + i] = col[c] * 2.0 - 1.0;
            }
        }
    }
    let nx = |x: f64| 2.0 * x / w as f64 - 1.0;
    let ny = |y: f64| 2.0 * y / h as f64 - 1.0;
    let gbox = GarmentBox {
        corners: [[nx(x0), ny(y0)], [nx(x1), ny(y0)], [nx(x0), ny(y1)]],
    };
    (
        Tensor::from_vec(&[3, h, w], rgb),
        Tensor::from_vec(&[1, h, w], alpha),
        gbox,
    )
}

/// Solve the affine map sending each `from[i]` to `to[i]` (3 pairs).
fn affine_from_pairs(from: &[[f64; 2]; 3], to: &[[f64; 2]; 3]) -> [[f64; 3]; 2] {
    let m = nalgebra::Matrix3::new(
        from[0][0], from[0][1], 1.0,
        from[1][0], from[1][1], 1.0,
        from[2][0], from[2][1], 1.0,
    );
    let inv = m.try_inverse().expect("warp correspondence points are never collinear");
    let mut out = [[0.0; 3]; 2];
    for axis in 0..2 {
        let b = nalgebra::Vector3::new(to[0][axis], to[1][axis], to[2][axis]);
        let sol = inv * b;
        out[axis] = [sol[0], sol[1], sol[2]];
    }
    out
}

const SKIN_TONES: [[f32; 3]; 6] = [
    [0.96, 0.80, 0.69],
    [0.92, 0.72, 0.58],
    [0.82, 0.62, 0.47],
    [0.70, 0.50, 0.36],
    [0.55, 0.38, 0.26],
    [0.42, 0.28, 0.19],
];

/// Render sample `index` of a dataset deterministically.
pub fn render_sample(spec: &DatasetSpec, index: usize) -> Result<RenderedSample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let (hf, wf) = (h as f64, w as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );

    let style = index % spec.clothes_styles;
    let target_style = if spec.clothes_styles == 1 {
        0
    } else {
        (style + 1 + rng.gen_range(0..spec.clothes_styles - 1)) % spec.clothes_styles
    };
    let (clothes_rgb, clothes_alpha, gbox) = garment_template(style, h, w);
    let (target_rgb, _, _) = garment_template(target_style, h, w);

    // Body pose.
    let cx = wf * rng.gen_range(0.44..0.56);
    let shoulder_y = hf * rng.gen_range(0.28..0.34);
    let hip_y = hf * rng.gen_range(0.58..0.66);
    let half_shoulder = wf * rng.gen_range(0.17..0.22);
    let half_hip = half_shoulder * rng.gen_range(0.88..1.05);
    let head_r = hf * rng.gen_range(0.085..0.110);
    let head_cy = shoulder_y - head_r - hf * rng.gen_range(0.015..0.035);
    let skin = signed(SKIN_TONES[rng.gen_range(0..SKIN_TONES.len())]);
    let pants = signed(hsv(rng.gen_range(0.5..0.75), 0.5, rng.gen_range(0.18..0.32)));
    let bg = signed([0.92, 0.92, 0.92]);

    let mut canvas = Canvas::new(h, w, bg);

    // Legs: two capsules from the hips down.
    let leg_w = wf * rng.gen_range(0.055..0.075);
    let leg_spread = rng.gen_range(0.02..0.10);
    for side in [-1.0f64, 1.0] {
        let top = [cx + side * half_hip * 0.45, hip_y - 2.0];
        let bot = [cx + side * (half_hip * 0.45 + leg_spread * wf), hf - 2.0];
        canvas.capsule(top, bot, leg_w, pants, OWN_LOWER);
    }
    // Head.
    canvas.disk(cx + rng.gen_range(-1.0..1.0), head_cy, head_r, skin, OWN_HEAD);
    // Arms: shoulder to hand, slightly flared outward.
    let arm_w = wf * rng.gen_range(0.045..0.060);
    let arm_len = (hip_y - shoulder_y) * rng.gen_range(0.95..1.15);
    for side in [-1.0f64, 1.0] {
        let angle: f64 = rng.gen_range(0.10..0.55); // radians from vertical
        let sx = cx + side * (half_shoulder * 0.98);
        let sy = shoulder_y + 1.5;
        let ex = sx + side * angle.sin() * arm_len;
        let ey = sy + angle.cos() * arm_len;
        let own = if side < 0.0 { OWN_LEFT_ARM } else { OWN_RIGHT_ARM };
        canvas.capsule([sx, sy], [ex, ey], arm_w, skin, own);
    }

    // Worn garment box on the body, with jitter and a small rotation.
    let rot = rng.gen_range(-0.10..0.10f64);
    let jitter = |rng: &mut ChaCha8Rng| rng.gen_range(-1.3..1.3);
    let raw = [
        [cx - half_shoulder, shoulder_y],
        [cx + half_shoulder, shoulder_y],
        [cx - half_hip, hip_y],
    ];
    let (bcx, bcy) = (cx, (shoulder_y + hip_y) * 0.5);
    let mut worn = [[0.0f64; 2]; 3];
    for (i, p) in raw.iter().enumerate() {
        let (dx, dy) = (p[0] - bcx, p[1] - bcy);
        worn[i] = [
            bcx + dx * rot.cos() - dy * rot.sin() + jitter(&mut rng),
            bcy + dx * rot.sin() + dy * rot.cos() + jitter(&mut rng),
        ];
    }
    let worn_n = [
        [2.0 * worn[0][0] / wf - 1.0, 2.0 * worn[0][1] / hf - 1.0],
        [2.0 * worn[1][0] / wf - 1.0, 2.0 * worn[1][1] / hf - 1.0],
        [2.0 * worn[2][0] / wf - 1.0, 2.0 * worn[2][1] / hf - 1.0],
    ];
    let aff = affine_from_pairs(&worn_n, &gbox.corners);
    let wiggle_amp = rng.gen_range(0.0..(1.0 / wf)); // at most half a pixel
    let wiggle_freq = rng.gen_range(2.0..5.0);
    let wiggle_phase = rng.gen_range(0.0..std::f64::consts::TAU);

    let mut field = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        let py = (2 * y + 1) as f64 / hf - 1.0;
        for x in 0..w {
            let px = (2 * x + 1) as f64 / wf - 1.0;
            let tx = aff[0][0] * px + aff[0][1] * py + aff[0][2]
                + wiggle_amp * (wiggle_freq * std::f64::consts::PI * py + wiggle_phase).sin();
            let ty = aff[1][0] * px + aff[1][1] * py + aff[1][2];
            field.push(tx);
            field.push(ty);
        }
    }
    let warp = WarpField::new(h, w, field)?;

    // Composite the warped garment wherever its warped alpha dominates.
    let worn_alpha = apply_warp(&clothes_alpha, &warp, 0.0)?;
    let worn_rgb = apply_warp(&clothes_rgb, &warp, 0.0)?;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if worn_alpha.data()[i] > 0.5 {
                let col = [
                    worn_rgb.data()[i],
                    worn_rgb.data()[h * w + i],
                    worn_rgb.data()[2 * h * w + i],
                ];
                canvas.put(y, x, col, OWN_TORSO);
            }
        }
    }

    // Parse labels and descriptor from the ownership map.
    let parse: Vec<u8> = canvas
        .own
        .iter()
        .map(|&o| match o {
            OWN_HEAD | OWN_LEFT_ARM | OWN_RIGHT_ARM => LABEL_SKIN,
            OWN_TORSO => LABEL_CLOTHES,
            OWN_LOWER => LABEL_BODY,
            _ => LABEL_BACKGROUND,
        })
        .collect();

    let descriptor = build_descriptor(&canvas.own, h, w);

    Ok(RenderedSample {
        id: sample_id(index),
        person: Tensor::from_vec(&[3, h, w], canvas.rgb),
        clothes: clothes_rgb,
        target: target_rgb,
        parse,
        descriptor,
        warp,
    })
}

/// UV body frame plus one-hot part channels, zero off the figure.
fn build_descriptor(own: &[u8], h: usize, w: usize) -> Tensor<f32> {
    let (mut x0, mut x1, mut y0, mut y1) = (w, 0usize, h, 0usize);
    for y in 0..h {
        for x in 0..w {
            if own[y * w + x] != OWN_NONE {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
    }
    let mut d = vec![0.0f32; DESCRIPTOR_CHANNELS * h * w];
    if x0 > x1 {
        return Tensor::from_vec(&[DESCRIPTOR_CHANNELS, h, w], d); // empty figure
    }
    let (cx, cy) = ((x0 + x1) as f64 * 0.5, (y0 + y1) as f64 * 0.5);
    let (rx, ry) = (((x1 - x0).max(1)) as f64 * 0.5, ((y1 - y0).max(1)) as f64 * 0.5);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let part = match own[i] {
                OWN_HEAD => PART_HEAD,
                OWN_TORSO => PART_TORSO,
                OWN_LEFT_ARM => PART_LEFT_ARM,
                OWN_RIGHT_ARM => PART_RIGHT_ARM,
                OWN_LOWER => PART_LOWER,
                _ => continue,
            };
            d[i] = ((x as f64 - cx) / rx) as f32;
            d[h * w + i] = ((y as f64 - cy) / ry) as f32;
            d[(2 + part) * h * w + i] = 1.0;
        }
    }
    Tensor::from_vec(&[DESCRIPTOR_CHANNELS, h, w], d)
}

fn sample_id(index: usize) -> String {
    format!("{index:05}")
}

// ── PNG and tensor I/O ──────────────────────────────────────────────────

fn to_u8(v: f32) -> u8 {
    (((v + 1.0) * 0.5 * 255.0).round()).clamp(0.0, 255.0) as u8
}

pub fn save_rgb_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    assert_eq!(c, 3);
    let mut raw = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for ch in 0..3 {
            raw.push(to_u8(img.data()[ch * h * w + i]));
        }
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("sized buffer");
    buf.save(path).map_err(|e| Error::format(path, format!("png encode failed: {e}")))
}

/// Load an RGB PNG as a (3, H, W) tensor in [-1, 1].
pub fn load_rgb_png(path: &Path) -> Result<Tensor<f32>> {
    if !path.exists() {
        return Err(Error::NotFound { path: path.into() });
    }
    let img = image::open(path)
        .map_err(|e| Error::format(path, format!("png decode failed: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px.0[c] as f32 / 255.0 * 2.0 - 1.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data))
}

/// Save a (3, H, W) tensor in [-1, 1] as an RGB PNG.
pub fn save_image(path: &Path, img: &Tensor<f32>) -> Result<()> {
    save_rgb_png(path, img)
}

const PARSE_PALETTE: [u8; 12] = [0, 0, 0, 205, 62, 62, 240, 200, 160, 70, 90, 205];

fn save_parse_png(path: &Path, labels: &[u8], h: usize, w: usize) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(PARSE_PALETTE.to_vec());
    let mut writer =
        enc.write_header().map_err(|e| Error::format(path, format!("png header: {e}")))?;
    writer
        .write_image_data(labels)
        .map_err(|e| Error::format(path, format!("png data: {e}")))?;
    Ok(())
}

/// Load a palette-indexed parse PNG; returns (labels, height, width).
pub fn load_parse_png(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    if !path.exists() {
        return Err(Error::NotFound { path: path.into() });
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(file);
    let mut reader =
        decoder.read_info().map_err(|e| Error::format(path, format!("png header: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info =
        reader.next_frame(&mut buf).map_err(|e| Error::format(path, format!("png data: {e}")))?;
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "parse map must be 8-bit palette-indexed"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    buf.truncate(info.buffer_size());
    let bad = buf.iter().find(|&&v| v > LABEL_BODY);
    if let Some(&v) = bad {
        return Err(Error::format(path, format!("parse label {v} out of range 0..=3")));
    }
    Ok((buf, h, w))
}

// ── Dataset assembly ────────────────────────────────────────────────────

/// Render and write `spec.count` samples under `dir`; returns sorted ids.
pub fn generate_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Vec<String>> {
    spec.validate()?;
    for sub in ["person", "clothes", "target", "parse", "descriptor"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut ids = Vec::with_capacity(spec.count);
    for index in 0..spec.count {
        let s = render_sample(spec, index)?;
        save_rgb_png(&dir.join("person").join(format!("{}.png", s.id)), &s.person)?;
        save_rgb_png(&dir.join("clothes").join(format!("{}.png", s.id)), &s.clothes)?;
        save_rgb_png(&dir.join("target").join(format!("{}.png", s.id)), &s.target)?;
        save_parse_png(
            &dir.join("parse").join(format!("{}.png", s.id)),
            &s.parse,
            spec.height,
            spec.width,
        )?;
        crate::tfile::write_tensor(
            &dir.join("descriptor").join(format!("{}.tns", s.id)),
            &s.descriptor,
        )?;
        ids.push(s.id);
    }
    ids.sort();
    let manifest: String = ids.iter().map(|i| format!("{i}\n")).collect();
    fs::write(dir.join("manifest.txt"), manifest).map_err(|e| Error::io(dir.join("manifest.txt"), e))?;
    Ok(ids)
}

/// Sorted sample ids from a dataset's manifest.
pub fn list_ids(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join("manifest.txt");
    if !path.exists() {
        return Err(Error::NotFound { path });
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut ids: Vec<String> =
        text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    ids.sort();
    Ok(ids)
}

/// Load one sample by id, validating that all five files agree in size.
pub fn load_sample(dir: &Path, id: &str) -> Result<TryOnSample> {
    let person = load_rgb_png(&dir.join("person").join(format!("{id}.png")))?;
    let clothes = load_rgb_png(&dir.join("clothes").join(format!("{id}.png")))?;
    let target = load_rgb_png(&dir.join("target").join(format!("{id}.png")))?;
    let parse_path = dir.join("parse").join(format!("{id}.png"));
    let (parse, ph, pw) = load_parse_png(&parse_path)?;
    let descriptor =
        crate::tfile::read_tensor::<f32>(&dir.join("descriptor").join(format!("{id}.tns")))?;
    let (h, w) = (person.dim(1), person.dim(2));
    for (name, t) in [("clothes", &clothes), ("target", &target)] {
        if t.dim(1) != h || t.dim(2) != w {
            return Err(Error::format(
                dir.join(name).join(format!("{id}.png")),
                format!("size {}x{} does not match person {}x{}", t.dim(1), t.dim(2), h, w),
            ));
        }
    }
    if (ph, pw) != (h, w) {
        return Err(Error::format(parse_path, format!("parse size {ph}x{pw} != person {h}x{w}")));
    }
    if descriptor.shape() != [DESCRIPTOR_CHANNELS, h, w] {
        return Err(Error::format(
            dir.join("descriptor").join(format!("{id}.tns")),
            format!("descriptor shape {:?} != [7, {h}, {w}]", descriptor.shape()),
        ));
    }
    Ok(TryOnSample { id: id.to_string(), person, clothes, target, parse, descriptor })
}

/// Load every sample listed in the manifest.
pub fn load_dataset(dir: &Path) -> Result<Vec<TryOnSample>> {
    let ids = list_ids(dir)?;
    ids.iter().map(|id| load_sample(dir, id)).collect()
}

/// Person pixels where the parse says skin; everything else the mid-gray
/// padding value 0, matching the warp padding and soft-mask products.
pub fn extract_skin(person: &Tensor<f32>, parse: &[u8]) -> Tensor<f32> {
    let (c, h, w) = (person.dim(0), person.dim(1), person.dim(2));
    assert_eq!(parse.len(), h * w, "parse length must match image area");
    let mut out = vec![0.0f32; c * h * w];
    for i in 0..h * w {
        if parse[i] == LABEL_SKIN {
            for ch in 0..c {
                out[ch * h * w + i] = person.data()[ch * h * w + i];
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Binary float mask (1, H, W) for one parse label.
pub fn parse_mask(parse: &[u8], label: u8, h: usize, w: usize) -> Tensor<f32> {
    let data = parse.iter().map(|&p| if p == label { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(&[1, h, w], data)
}

/// Stack equally-shaped (C, H, W) tensors into (N, C, H, W).
pub fn stack(tensors: &[&Tensor<f32>]) -> Tensor<f32> {
    assert!(!tensors.is_empty());
    let shape = tensors[0].shape().to_vec();
    let mut data = Vec::with_capacity(tensors.len() * tensors[0].len());
    for t in tensors {
        assert_eq!(t.shape(), shape.as_slice(), "stack expects equal shapes");
        data.extend_from_slice(t.data());
    }
    let mut out_shape = vec![tensors.len()];
    out_shape.extend(shape);
    Tensor::from_vec(&out_shape, data)
}
