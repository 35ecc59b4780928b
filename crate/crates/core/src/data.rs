//! Synthetic blur clips, augmentation, and 8-bit image files.
//!
//! Scenes are textured rectangles and circles moving at integer velocities
//! over a fixed noise background. Sharp sub-frames are rendered in 8-bit
//! integers; each blurry frame is the exact mean of `K` consecutive
//! sub-frames, so a static scene blurs to exactly its sharp frame.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// Three-channel `[0, 1]` image in channel-first order. Plain data, so clips
/// can cross thread boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Image> {
        if data.len() != 3 * height * width {
            return Err(contract(format!(
                "image {height}×{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[3, self.height, self.width], self.data.clone()).expect("consistent image")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        match t.shape() {
            [3, h, w] => Image::new(*h, *w, t.to_vec()),
            s => Err(contract(format!("expected a 3×H×W image, got {s:?}"))),
        }
    }

    /// Crop at `(y0, x0)` with optional horizontal / vertical flips.
    pub fn transform(
        &self,
        y0: usize,
        x0: usize,
        size_h: usize,
        size_w: usize,
        flip_h: bool,
        flip_v: bool,
    ) -> Image {
        let mut data = Vec::with_capacity(3 * size_h * size_w);
        for c in 0..3 {
            for y in 0..size_h {
                let sy = y0 + if flip_v { size_h - 1 - y } else { y };
                for x in 0..size_w {
                    let sx = x0 + if flip_h { size_w - 1 - x } else { x };
                    data.push(self.data[(c * self.height + sy) * self.width + sx]);
                }
            }
        }
        Image {
            height: size_h,
            width: size_w,
            data,
        }
    }
}

/// `2N+1` blurry frames and the sharp central frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FramesClip {
    pub id: usize,
    pub blurry: Vec<Image>,
    pub sharp: Image,
}

impl FramesClip {
    pub fn center(&self) -> &Image {
        &self.blurry[self.blurry.len() / 2]
    }

    pub fn blurry_tensors(&self) -> Vec<Tensor> {
        self.blurry.iter().map(Image::to_tensor).collect()
    }

    pub fn height(&self) -> usize {
        self.sharp.height
    }

    pub fn width(&self) -> usize {
        self.sharp.width
    }

    /// The same crop and flips applied to every frame and the target.
    pub fn transform(
        &self,
        y0: usize,
        x0: usize,
        size: usize,
        flip_h: bool,
        flip_v: bool,
    ) -> FramesClip {
        let t = |img: &Image| img.transform(y0, x0, size, size, flip_h, flip_v);
        FramesClip {
            id: self.id,
            blurry: self.blurry.iter().map(t).collect(),
            sharp: t(&self.sharp),
        }
    }
}

/// Draws a crop origin and flips and applies them to the whole clip. Always
/// consumes four draws from `rng`.
pub fn augment(
    clip: &FramesClip,
    crop: usize,
    flip_h: bool,
    flip_v: bool,
    rng: &mut ChaCha8Rng,
) -> Result<FramesClip> {
    let (h, w) = (clip.height(), clip.width());
    if crop > h || crop > w {
        return Err(contract(format!("crop {crop} exceeds clip size {h}×{w}")));
    }
    let y0 = rng.gen_range(0..=h - crop);
    let x0 = rng.gen_range(0..=w - crop);
    let fh = rng.gen::<bool>() && flip_h;
    let fv = rng.gen::<bool>() && flip_v;
    Ok(clip.transform(y0, x0, crop, fh, fv))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rect { width: i64, height: i64 },
    Circle { radius: i64 },
}

/// A shape with a dark/bright stripe texture that moves with it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shape {
    pub kind: ShapeKind,
    /// Top-left corner (rectangles) or centre (circles) at sub-frame 0.
    pub x: i64,
    pub y: i64,
    /// Pixels per sub-frame.
    pub vx: i64,
    pub vy: i64,
    pub colors: [[u8; 3]; 2],
    /// Stripe period in pixels along a diagonal; 0 draws a solid shape.
    pub stripe: i64,
}

impl Shape {
    fn covers(&self, px: i64, py: i64, t: i64) -> Option<[u8; 3]> {
        let (ox, oy) = (self.x + self.vx * t, self.y + self.vy * t);
        let (lx, ly) = (px - ox, py - oy);
        let inside = match self.kind {
            ShapeKind::Rect { width, height } => {
                (0..width).contains(&lx) && (0..height).contains(&ly)
            }
            ShapeKind::Circle { radius } => lx * lx + ly * ly <= radius * radius,
        };
        if !inside {
            return None;
        }
        if self.stripe == 0 {
            return Some(self.colors[0]);
        }
        let band = (lx + ly).rem_euclid(2 * self.stripe) / self.stripe;
        Some(self.colors[band as usize])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    /// `3×H×W` 8-bit background.
    pub background: Vec<u8>,
    /// Painted in order, later shapes on top.
    pub shapes: Vec<Shape>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneOptions {
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Largest speed component in pixels per sub-frame. Every shape moves
    /// unless this is 0.
    pub max_speed: i64,
    /// Shape extent range as fractions of the smaller frame side.
    pub min_extent: f64,
    pub max_extent: f64,
    /// Stripe periods are drawn from `1..=max_stripe`.
    pub max_stripe: i64,
}

impl Default for SceneOptions {
    fn default() -> Self {
        SceneOptions {
            min_shapes: 6,
            max_shapes: 9,
            max_speed: 3,
            min_extent: 0.4,
            max_extent: 0.8,
            max_stripe: 4,
        }
    }
}

impl Scene {
    pub fn random(rng: &mut ChaCha8Rng, height: usize, width: usize, opts: &SceneOptions) -> Scene {
        let background = (0..3 * height * width)
            .map(|_| rng.gen_range(32..=96u8))
            .collect();
        let count = rng.gen_range(opts.min_shapes..=opts.max_shapes.max(opts.min_shapes));
        let side = height.min(width) as f64;
        let extent = |rng: &mut ChaCha8Rng| {
            let lo = (opts.min_extent * side).round().max(1.0) as i64;
            let hi = (opts.max_extent * side).round().max(lo as f64) as i64;
            rng.gen_range(lo..=hi)
        };
        let shapes = (0..count)
            .map(|_| {
                let kind = if rng.gen::<bool>() {
                    ShapeKind::Rect {
                        width: extent(rng),
                        height: extent(rng),
                    }
                } else {
                    ShapeKind::Circle {
                        radius: (extent(rng) / 2).max(1),
                    }
                };
                let dark = [
                    rng.gen_range(0..=63u8),
                    rng.gen_range(0..=63u8),
                    rng.gen_range(0..=63u8),
                ];
                let bright = [
                    rng.gen_range(192..=255u8),
                    rng.gen_range(192..=255u8),
                    rng.gen_range(192..=255u8),
                ];
                let colors = if rng.gen::<bool>() {
                    [dark, bright]
                } else {
                    [bright, dark]
                };
                let s = opts.max_speed;
                let (mut vx, mut vy) = (0, 0);
                while s > 0 && vx == 0 && vy == 0 {
                    vx = rng.gen_range(-s..=s);
                    vy = rng.gen_range(-s..=s);
                }
                // rectangles are anchored at their corner; centre them on the draw
                let (ax, ay) = match kind {
                    ShapeKind::Rect { width, height } => (width / 2, height / 2),
                    ShapeKind::Circle { .. } => (0, 0),
                };
                Shape {
                    kind,
                    x: rng.gen_range(0..width as i64) - ax,
                    y: rng.gen_range(0..height as i64) - ay,
                    vx,
                    vy,
                    colors,
                    stripe: rng.gen_range(1..=opts.max_stripe),
                }
            })
            .collect();
        Scene {
            height,
            width,
            background,
            shapes,
        }
    }

    /// 8-bit `3×H×W` frame at sub-frame `t`.
    pub fn render(&self, t: i64) -> Vec<u8> {
        let (h, w) = (self.height, self.width);
        let mut out = self.background.clone();
        for y in 0..h {
            for x in 0..w {
                if let Some(rgb) = self
                    .shapes
                    .iter()
                    .rev()
                    .find_map(|s| s.covers(x as i64, y as i64, t))
                {
                    for c in 0..3 {
                        out[(c * h + y) * w + x] = rgb[c];
                    }
                }
            }
        }
        out
    }

    /// Blurry frames of `frames` consecutive windows of `k` sub-frames, plus
    /// the central sub-frame of the central window as the sharp target. The
    /// sharp target is placed at sub-frame 0.
    pub fn clip(&self, id: usize, frames: usize, k: usize) -> Result<FramesClip> {
        if k == 0 || k.is_multiple_of(2) {
            return Err(Error::Config(format!("blur window K = {k} must be odd")));
        }
        let n = self.height * self.width * 3;
        let half = (frames / 2 * k + k / 2) as i64;
        let mut blurry = Vec::with_capacity(frames);
        for f in 0..frames {
            let mut sum = vec![0u32; n];
            for s in 0..k {
                let t = (f * k + s) as i64 - half;
                for (acc, v) in sum.iter_mut().zip(self.render(t)) {
                    *acc += u32::from(v);
                }
            }
            let denom = 255.0 * k as f64;
            blurry.push(Image::new(
                self.height,
                self.width,
                sum.iter().map(|&v| f64::from(v) / denom).collect(),
            )?);
        }
        let sharp = self
            .render(0)
            .iter()
            .map(|&v| f64::from(v) / 255.0)
            .collect();
        Ok(FramesClip {
            id,
            blurry,
            sharp: Image::new(self.height, self.width, sharp)?,
        })
    }
}

/// `num_clips` random clips of `2N+1` frames, fully determined by `seed`.
pub fn synth_dataset(
    seed: u64,
    num_clips: usize,
    height: usize,
    width: usize,
    neighbors: usize,
    k: usize,
    opts: &SceneOptions,
) -> Result<Vec<FramesClip>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_clips)
        .map(|id| Scene::random(&mut rng, height, width, opts).clip(id, 2 * neighbors + 1, k))
        .collect()
}

/// Round-half-up quantization of a `[0, 1]` value.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn write_netpbm(path: &Path, magic: &str, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write!(f, "{magic}\n{width} {height}\n255\n")?;
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

/// Binary PPM (P6).
pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let n = img.height * img.width;
    let mut bytes = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            bytes.push(to_u8(img.data[c * n + i]));
        }
    }
    write_netpbm(path, "P6", img.width, img.height, &bytes)
}

/// Binary PGM (P5) of a single `[0, 1]` plane.
pub fn write_pgm(path: &Path, height: usize, width: usize, plane: &[f64]) -> Result<()> {
    if plane.len() != height * width {
        return Err(contract("pgm plane size does not match its extents"));
    }
    let bytes: Vec<u8> = plane.iter().map(|&v| to_u8(v)).collect();
    write_netpbm(path, "P5", width, height, &bytes)
}

fn header_tokens(r: &mut impl BufRead, count: usize) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    let mut line = String::new();
    while tokens.len() < count {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("truncated netpbm header".into()));
        }
        let content = line.split('#').next().unwrap_or("");
        tokens.extend(content.split_whitespace().map(str::to_string));
    }
    if tokens.len() != count {
        return Err(Error::Format(
            "netpbm header must end its line after maxval".into(),
        ));
    }
    Ok(tokens)
}

/// Reads a binary PPM (P6, maxval 255).
pub fn read_ppm(path: &Path) -> Result<Image> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let tokens = header_tokens(&mut r, 4)?;
    if tokens[0] != "P6" || tokens[3] != "255" {
        return Err(Error::Format(format!(
            "{}: not an 8-bit P6 file",
            path.display()
        )));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad extent {s:?}")))
    };
    let (width, height) = (parse(&tokens[1])?, parse(&tokens[2])?);
    let n = width * height;
    let mut bytes = vec![0u8; 3 * n];
    r.read_exact(&mut bytes)?;
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = f64::from(bytes[3 * i + c]) / 255.0;
        }
    }
    Image::new(height, width, data)
}

fn clip_dir(root: &Path, id: usize) -> PathBuf {
    root.join(format!("clip_{id:03}"))
}

/// `root/clip_NNN/blurry_I.ppm` and `root/clip_NNN/sharp.ppm`.
pub fn save_dataset(root: &Path, clips: &[FramesClip]) -> Result<()> {
    for clip in clips {
        let dir = clip_dir(root, clip.id);
        fs::create_dir_all(&dir)?;
        for (i, img) in clip.blurry.iter().enumerate() {
            write_ppm(&dir.join(format!("blurry_{i}.ppm")), img)?;
        }
        write_ppm(&dir.join("sharp.ppm"), &clip.sharp)?;
    }
    Ok(())
}

/// Reads every `clip_*` directory under `root`, in name order.
pub fn load_dataset(root: &Path) -> Result<Vec<FramesClip>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .is_some_and(|n| n.to_string_lossy().starts_with("clip_"))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Format(format!(
            "no clip_* directories in {}",
            root.display()
        )));
    }
    dirs.iter()
        .enumerate()
        .map(|(id, dir)| {
            let mut blurry = Vec::new();
            while dir.join(format!("blurry_{}.ppm", blurry.len())).exists() {
                blurry.push(read_ppm(&dir.join(format!("blurry_{}.ppm", blurry.len())))?);
            }
            if blurry.len() % 2 == 0 {
                return Err(Error::Format(format!(
                    "{}: expected an odd number of blurry frames, found {}",
                    dir.display(),
                    blurry.len()
                )));
            }
            Ok(FramesClip {
                id,
                blurry,
                sharp: read_ppm(&dir.join("sharp.ppm"))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> SceneOptions {
        SceneOptions::default()
    }

    #[test]
    fn static_scene_blurs_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scene = Scene::random(
            &mut rng,
            16,
            20,
            &SceneOptions {
                max_speed: 0,
                ..opts()
            },
        );
        let clip = scene.clip(0, 5, 7).unwrap();
        for b in &clip.blurry {
            assert_eq!(b, &clip.sharp);
        }
    }

    #[test]
    fn single_sub_frame_is_sharp() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scene = Scene::random(&mut rng, 16, 16, &opts());
        let clip = scene.clip(0, 3, 1).unwrap();
        assert_eq!(clip.center(), &clip.sharp);
        assert!(scene.clip(0, 3, 4).is_err());
    }

    #[test]
    fn streak_extent_is_width_plus_travel() {
        for (width, v, k) in [(4, 2, 7), (6, 1, 5), (3, 3, 3)] {
            let scene = Scene {
                height: 12,
                width: 64,
                background: vec![0; 3 * 12 * 64],
                shapes: vec![Shape {
                    kind: ShapeKind::Rect { width, height: 4 },
                    x: 30,
                    y: 4,
                    vx: v,
                    vy: 0,
                    colors: [[255; 3]; 2],
                    stripe: 0,
                }],
            };
            let clip = scene.clip(0, 1, k as usize).unwrap();
            let row = 6;
            let support = (0..64)
                .filter(|&x| clip.blurry[0].data[row * 64 + x] > 0.0)
                .count() as i64;
            assert_eq!(support, width + (k - 1) * v);
        }
    }

    #[test]
    fn dataset_is_deterministic() {
        let a = synth_dataset(3, 2, 16, 16, 1, 3, &opts()).unwrap();
        let b = synth_dataset(3, 2, 16, 16, 1, 3, &opts()).unwrap();
        let c = synth_dataset(4, 2, 16, 16, 1, 3, &opts()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a[0].blurry.len(), 3);
        assert!(a
            .iter()
            .flat_map(|c| &c.blurry)
            .all(|i| i.data.iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn augmentation_is_shared_by_all_frames() {
        let clip = synth_dataset(5, 1, 16, 16, 1, 3, &opts())
            .unwrap()
            .remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..8 {
            let aug = augment(&clip, 8, true, true, &mut rng).unwrap();
            // recover the transform from the sharp frame and check it on the others
            let found = (0..=8)
                .flat_map(|y| (0..=8).map(move |x| (y, x)))
                .find_map(|(y, x)| {
                    [(false, false), (true, false), (false, true), (true, true)]
                        .into_iter()
                        .find(|&(fh, fv)| clip.sharp.transform(y, x, 8, 8, fh, fv) == aug.sharp)
                        .map(|(fh, fv)| (y, x, fh, fv))
                });
            let (y, x, fh, fv) = found.expect("sharp frame is a crop of the original");
            for (a, b) in aug.blurry.iter().zip(&clip.blurry) {
                assert_eq!(a, &b.transform(y, x, 8, 8, fh, fv));
            }
        }
        assert!(augment(&clip, 17, false, false, &mut rng).is_err());
    }

    #[test]
    fn flips_are_involutions() {
        let clip = synth_dataset(7, 1, 8, 8, 0, 1, &opts()).unwrap().remove(0);
        let once = clip.transform(0, 0, 8, true, true);
        assert_eq!(once.transform(0, 0, 8, true, true), clip);
    }

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(to_u8(0.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(0.5), 128);
        assert_eq!(to_u8(1.5 / 255.0), 2);
        assert_eq!(to_u8(-3.0), 0);
    }

    #[test]
    fn ppm_round_trip_and_dataset_files() {
        let dir = tempfile::tempdir().unwrap();
        let clips = synth_dataset(8, 2, 8, 12, 1, 3, &opts()).unwrap();
        save_dataset(dir.path(), &clips).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].blurry.len(), 3);
        for (a, b) in back.iter().zip(&clips) {
            assert_eq!(a.sharp, b.sharp);
            for (x, y) in a.blurry.iter().zip(&b.blurry) {
                assert!(x
                    .data
                    .iter()
                    .zip(&y.data)
                    .all(|(p, q)| (p - q).abs() <= 0.5 / 255.0 + 1e-12));
            }
        }
    }

    #[test]
    fn malformed_ppm_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        fs::write(&p, b"P3\n1 1\n255\n000").unwrap();
        assert!(matches!(read_ppm(&p), Err(Error::Format(_))));
        fs::write(&p, b"P6\n2 2\n255\n\x00\x01").unwrap();
        assert!(matches!(read_ppm(&p), Err(Error::Io(_))));
    }
}
