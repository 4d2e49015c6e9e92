//! Synthetic stand-ins for surface photographs.
//!
//! * `negative`: speckled gray texture with soft blotches.
//! * `crack`: texture plus a dark, wandering polyline 1-4 px thick.
//! * `joint`: texture plus a dark straight line of constant width.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rayon::prelude::*;

use super::IMAGE_SIZE;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthTask {
    /// `crack` vs `negative`
    Crack2,
    /// `crack` vs `joint` vs `negative`
    CrackJoint3,
}

impl SynthTask {
    pub fn classes(self) -> &'static [&'static str] {
        match self {
            SynthTask::Crack2 => &["crack", "negative"],
            SynthTask::CrackJoint3 => &["crack", "joint", "negative"],
        }
    }

    fn id(self) -> u64 {
        match self {
            SynthTask::Crack2 => 1,
            SynthTask::CrackJoint3 => 2,
        }
    }
}

impl FromStr for SynthTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crack2" => Ok(SynthTask::Crack2),
            "crackjoint3" => Ok(SynthTask::CrackJoint3),
            _ => Err(Error::invalid(format!(
                "unknown task {s:?}, expected crack2 or crackjoint3"
            ))),
        }
    }
}

impl fmt::Display for SynthTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthTask::Crack2 => "crack2",
            SynthTask::CrackJoint3 => "crackjoint3",
        })
    }
}

/// Writes `n_per_class` PNGs into `out_dir/<class>/` for every class of
/// `task` and returns the number of files written. Each image draws from its
/// own random stream, so output is identical for a given seed regardless of
/// thread count.
pub fn generate_synthetic(
    task: SynthTask,
    n_per_class: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<usize> {
    if n_per_class == 0 {
        return Err(Error::invalid("need at least one image per class"));
    }
    let out_dir = out_dir.as_ref();
    let base = Rng::new(seed);
    for (ci, &class) in task.classes().iter().enumerate() {
        let dir = out_dir.join(class);
        fs::create_dir_all(&dir)?;
        (0..n_per_class).into_par_iter().try_for_each(|i| {
            let stream = task.id() << 48 | (ci as u64) << 32 | i as u64;
            let img = render(class, &mut base.fork(stream));
            img.save(dir.join(format!("{class}_{i:04}.png")))
                .map_err(|source| Error::Image {
                    path: dir.join(format!("{class}_{i:04}.png")),
                    source,
                })
        })?;
    }
    Ok(n_per_class * task.classes().len())
}

fn render(class: &str, rng: &mut Rng) -> RgbImage {
    let mut img = texture(rng);
    match class {
        "crack" => crack(&mut img, rng),
        "joint" => joint(&mut img, rng),
        _ => {}
    }
    img
}

/// Gray base level with a slight tint, coarse blotches and per-pixel speckle.
fn texture(rng: &mut Rng) -> RgbImage {
    const CELL: u32 = 19;
    let size = IMAGE_SIZE;
    let level = rng.uniform_scalar(155.0, 185.0);
    let tint = [
        rng.uniform_scalar(-4.0, 4.0),
        rng.uniform_scalar(-4.0, 4.0),
        rng.uniform_scalar(-4.0, 4.0),
    ];
    let cells = (size / CELL + 2) as usize;
    let coarse: Vec<f32> = (0..cells * cells)
        .map(|_| rng.uniform_scalar(-8.0, 8.0))
        .collect();
    let blotch = |x: u32, y: u32| {
        let (fx, fy) = (x as f32 / CELL as f32, y as f32 / CELL as f32);
        let (ix, iy) = (fx as usize, fy as usize);
        let (tx, ty) = (fx - ix as f32, fy - iy as f32);
        let at = |i: usize, j: usize| coarse[j * cells + i];
        let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
        let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    };
    RgbImage::from_fn(size, size, |x, y| {
        let v = level + blotch(x, y) + rng.uniform_scalar(-14.0, 14.0);
        Rgb(tint.map(|t| (v + t).clamp(0.0, 255.0) as u8))
    })
}

/// Darkens every pixel within `half_width` of the segment `a`-`b` to `ink`.
fn stroke(img: &mut RgbImage, a: (f32, f32), b: (f32, f32), half_width: f32, ink: f32) {
    let size = img.width() as f32;
    let lo = |u: f32, v: f32| (u.min(v) - half_width - 1.0).clamp(0.0, size - 1.0) as u32;
    let hi = |u: f32, v: f32| (u.max(v) + half_width + 1.0).clamp(0.0, size - 1.0) as u32;
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = (dx * dx + dy * dy).max(1e-6);
    for y in lo(a.1, b.1)..=hi(a.1, b.1) {
        for x in lo(a.0, b.0)..=hi(a.0, b.0) {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let t = (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0);
            let (cx, cy) = (a.0 + t * dx - px, a.1 + t * dy - py);
            if cx * cx + cy * cy <= half_width * half_width {
                let p = img.get_pixel_mut(x, y);
                *p = Rgb(p.0.map(|c| (c as f32).min(ink) as u8));
            }
        }
    }
}

/// Random point on the border and an inward heading.
fn entry(rng: &mut Rng) -> ((f32, f32), f32) {
    use std::f32::consts::{FRAC_PI_2, PI};
    let size = IMAGE_SIZE as f32;
    let along = rng.uniform_scalar(0.15 * size, 0.85 * size);
    let side = rng.range(0, 4);
    let (start, inward) = match side {
        0 => ((along, 0.0), FRAC_PI_2),
        1 => ((size, along), PI),
        2 => ((along, size), -FRAC_PI_2),
        _ => ((0.0, along), 0.0),
    };
    (start, inward + rng.uniform_scalar(-0.4, 0.4))
}

fn crack(img: &mut RgbImage, rng: &mut Rng) {
    let size = IMAGE_SIZE as f32;
    let (mut p, course) = entry(rng);
    let mut drift = 0.0f32;
    let base_width = rng.uniform_scalar(1.0, 4.0);
    let ink = rng.uniform_scalar(10.0, 50.0);
    let inside =
        |q: (f32, f32)| (-8.0..size + 8.0).contains(&q.0) && (-8.0..size + 8.0).contains(&q.1);
    for _ in 0..200 {
        // wander around the entry course without turning back
        drift = (0.7 * drift + rng.uniform_scalar(-0.6, 0.6)).clamp(-0.8, 0.8);
        let heading = course + drift;
        let len = rng.uniform_scalar(5.0, 14.0);
        let q = (p.0 + len * heading.cos(), p.1 + len * heading.sin());
        let width = (base_width + rng.uniform_scalar(-0.5, 0.5)).clamp(1.0, 4.0);
        stroke(img, p, q, width / 2.0, ink);
        p = q;
        if !inside(p) {
            break;
        }
    }
}

fn joint(img: &mut RgbImage, rng: &mut Rng) {
    let size = IMAGE_SIZE as f32;
    let (p, heading) = entry(rng);
    let width = rng.uniform_scalar(2.0, 4.0);
    let ink = rng.uniform_scalar(10.0, 50.0);
    let reach = 2.0 * size;
    let q = (p.0 + reach * heading.cos(), p.1 + reach * heading.sin());
    stroke(img, p, q, width / 2.0, ink);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dark_fraction(img: &RgbImage) -> f64 {
        let dark = img.pixels().filter(|p| p.0.iter().all(|&c| c < 80)).count();
        dark as f64 / (img.width() * img.height()) as f64
    }

    #[test]
    fn task_names_parse() {
        assert_eq!("crack2".parse::<SynthTask>().unwrap(), SynthTask::Crack2);
        assert_eq!(SynthTask::CrackJoint3.to_string(), "crackjoint3");
        assert!("crack4".parse::<SynthTask>().is_err());
    }

    #[test]
    fn classes_are_visually_distinct() {
        for i in 0..20 {
            let neg = render("negative", &mut Rng::new(i));
            let crack = render("crack", &mut Rng::new(i));
            let joint = render("joint", &mut Rng::new(i));
            assert_eq!(neg.dimensions(), (228, 228));
            assert!(dark_fraction(&neg) < 0.001, "seed {i}");
            assert!(
                dark_fraction(&crack) > 0.003,
                "seed {i}: {}",
                dark_fraction(&crack)
            );
            assert!(dark_fraction(&joint) > 0.005, "seed {i}");
        }
    }

    #[test]
    fn writes_expected_tree_deterministically() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        assert_eq!(
            generate_synthetic(SynthTask::Crack2, 3, 11, a.path()).unwrap(),
            6
        );
        generate_synthetic(SynthTask::Crack2, 3, 11, b.path()).unwrap();
        for class in ["crack", "negative"] {
            let mut names: Vec<_> = fs::read_dir(a.path().join(class))
                .unwrap()
                .map(|e| e.unwrap().file_name())
                .collect();
            names.sort();
            assert_eq!(names.len(), 3);
            for n in names {
                let x = fs::read(a.path().join(class).join(&n)).unwrap();
                let y = fs::read(b.path().join(class).join(&n)).unwrap();
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn three_class_task_adds_joints() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(
            generate_synthetic(SynthTask::CrackJoint3, 2, 0, dir.path()).unwrap(),
            6
        );
        let all = crate::data::load_all(dir.path()).unwrap();
        assert_eq!(all.class_labels, ["crack", "joint", "negative"]);
        assert_eq!(all.class_counts(), [2, 2, 2]);
    }

    #[test]
    fn zero_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_synthetic(SynthTask::Crack2, 0, 0, dir.path()).is_err());
    }
}
