//! Dataset text format, one scene per line:
//!
//! ```text
//! <scene_type> <seed> ; <class> <cx> <cy> <w> <h> ; <class> <cx> <cy> <w> <h> ...
//! ```
//!
//! Coordinates are written with six decimals.

use std::fmt::Write as _;
use std::path::Path;

use super::{Object, Scene};
use crate::error::{Error, Result};

pub fn format_dataset(scenes: &[Scene]) -> String {
    let mut s = String::new();
    for scene in scenes {
        write!(s, "{} {}", scene.scene_type, scene.seed).unwrap();
        for o in &scene.objects {
            let [x, y, w, h] = o.bbox;
            write!(s, " ; {} {x:.6} {y:.6} {w:.6} {h:.6}", o.class).unwrap();
        }
        s.push('\n');
    }
    s
}

fn parse_line(line: &str) -> std::result::Result<Scene, String> {
    let mut parts = line.split(';');
    let head: Vec<&str> = parts.next().unwrap_or("").split_whitespace().collect();
    let [ty, seed] = head[..] else {
        return Err(format!("expected `<scene_type> <seed>`, got `{}`", head.join(" ")));
    };
    let scene_type = ty.parse().map_err(|_| format!("bad scene type `{ty}`"))?;
    let seed = seed.parse().map_err(|_| format!("bad seed `{seed}`"))?;
    let mut objects = Vec::new();
    for (i, part) in parts.enumerate() {
        let f: Vec<&str> = part.split_whitespace().collect();
        if f.len() != 5 {
            return Err(format!("object {i}: expected 5 fields, got {}", f.len()));
        }
        let class = f[0].parse().map_err(|_| format!("object {i}: bad class `{}`", f[0]))?;
        let mut bbox = [0.0; 4];
        for (k, v) in f[1..].iter().enumerate() {
            bbox[k] = v
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| format!("object {i}: bad coordinate `{v}`"))?;
        }
        let [x, y, w, h] = bbox;
        if !(w > 0.0 && h > 0.0 && x - w / 2.0 >= 0.0 && y - h / 2.0 >= 0.0 && x + w / 2.0 <= 1.0 && y + h / 2.0 <= 1.0) {
            return Err(format!("object {i}: box {bbox:?} leaves the unit square"));
        }
        objects.push(Object { class, bbox });
    }
    Ok(Scene {
        scene_type,
        seed,
        objects,
    })
}

/// Parses the dataset format; errors carry the 1-based line number.
pub fn parse_dataset(text: &str) -> Result<Vec<Scene>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| parse_line(line).map_err(|msg| Error::Parse { line: i + 1, msg }))
        .collect()
}

pub fn write_dataset(path: &Path, scenes: &[Scene]) -> Result<()> {
    std::fs::write(path, format_dataset(scenes))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Scene>> {
    parse_dataset(&std::fs::read_to_string(path)?)
}
