//! Directory-of-images datasets: a manifest of relative paths plus an
//! optional ground-truth file with one `path class cx cy w h` line per object.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Component, Path};

use super::ppm::{read_ppm, write_ppm};
use super::{derive_seed, synth_image, DetectionSample, LabeledBox, SceneSpec};
use crate::error::{Error, Result};
use crate::geometry::BoxCxCyWh;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const DETECTION_GT_FILE: &str = "ground_truth.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthLine {
    pub path: String,
    pub class: usize,
    pub bbox: BoxCxCyWh,
}

fn check_relative(path: &str, line: usize) -> Result<()> {
    let p = Path::new(path);
    if p.is_absolute() || p.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(Error::format("manifest", format!("line {line}: `{path}` must be a plain relative path")));
    }
    Ok(())
}

/// One relative path per line; blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        check_relative(line, i + 1)?;
        out.push(line.to_string());
    }
    Ok(out)
}

pub fn parse_ground_truth(text: &str) -> Result<Vec<GroundTruthLine>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |d: &str| Error::format("ground truth", format!("line {}: {d}", i + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(bad(&format!("expected 6 fields, found {}", fields.len())));
        }
        check_relative(fields[0], i + 1)?;
        let class: usize = fields[1].parse().map_err(|_| bad("class is not an integer"))?;
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields[2..]) {
            *slot = f.parse().map_err(|_| bad(&format!("`{f}` is not a number")))?;
        }
        let bbox = BoxCxCyWh::from_slice(&v);
        if !bbox.is_valid_target() {
            return Err(bad("box outside the unit square or empty"));
        }
        out.push(GroundTruthLine { path: fields[0].to_string(), class, bbox });
    }
    Ok(out)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Loads every manifest image with its ground-truth objects (if the
/// ground-truth file exists), in manifest order.
pub fn load_detection_dir(dir: &Path) -> Result<Vec<(String, DetectionSample)>> {
    let paths = parse_manifest(&read_text(&dir.join(MANIFEST_FILE))?)?;
    let gt_path = dir.join(DETECTION_GT_FILE);
    let mut by_path: HashMap<String, Vec<LabeledBox>> = HashMap::new();
    if gt_path.exists() {
        for g in parse_ground_truth(&read_text(&gt_path)?)? {
            by_path.entry(g.path).or_default().push(LabeledBox { class: g.class, bbox: g.bbox });
        }
    }
    paths
        .into_iter()
        .map(|p| {
            let image = read_ppm(&dir.join(&p))?;
            let objects = by_path.remove(&p).unwrap_or_default();
            Ok((p, DetectionSample { image, objects }))
        })
        .collect()
}

/// Renders `n` scenes into `dir/images/`, writing the manifest and the
/// ground-truth file. Scene `i` uses seed `derive_seed(seed, i)`.
pub fn write_synth_dataset(dir: &Path, n: usize, spec: &SceneSpec, seed: u64) -> Result<Vec<DetectionSample>> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut manifest = String::new();
    let mut gt = String::new();
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let s = synth_image(derive_seed(seed, i as u64), spec)?;
        let rel = format!("images/{i:06}.ppm");
        write_ppm(&dir.join(&rel), &s.image)?;
        writeln!(manifest, "{rel}").unwrap();
        for o in &s.objects {
            let b = o.bbox;
            writeln!(gt, "{rel} {} {:.6} {:.6} {:.6} {:.6}", o.class, b.cx, b.cy, b.w, b.h).unwrap();
        }
        samples.push(s);
    }
    let mpath = dir.join(MANIFEST_FILE);
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    let gpath = dir.join(DETECTION_GT_FILE);
    std::fs::write(&gpath, gt).map_err(|e| Error::io(&gpath, e))?;
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parsing() {
        let m = parse_manifest("# header\na.ppm\n\n  sub/b.ppm  \n").unwrap();
        assert_eq!(m, vec!["a.ppm", "sub/b.ppm"]);
        assert!(parse_manifest("/etc/passwd\n").is_err());
        assert!(parse_manifest("../x.ppm\n").is_err());
    }

    #[test]
    fn ground_truth_parsing() {
        let g = parse_ground_truth("img.ppm 2 0.500000 0.250000 0.100000 0.200000\n").unwrap();
        assert_eq!(g[0].class, 2);
        assert_eq!(g[0].bbox, BoxCxCyWh::new(0.5, 0.25, 0.1, 0.2));
        assert!(parse_ground_truth("img.ppm 2 0.5 0.5 0.1\n").is_err());
        assert!(parse_ground_truth("img.ppm x 0.5 0.5 0.1 0.1\n").is_err());
        assert!(parse_ground_truth("img.ppm 0 0.5 0.5 0.0 0.1\n").is_err());
        assert!(parse_ground_truth("img.ppm 0 NaN 0.5 0.1 0.1\n").is_err());
    }

    #[test]
    fn synth_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::default();
        let written = write_synth_dataset(dir.path(), 5, &spec, 3).unwrap();
        let loaded = load_detection_dir(dir.path()).unwrap();
        assert_eq!(loaded.len(), 5);
        for ((_, l), w) in loaded.iter().zip(&written) {
            assert_eq!(l.image, w.image);
            assert_eq!(l.objects.len(), w.objects.len());
            for (a, b) in l.objects.iter().zip(&w.objects) {
                assert_eq!(a.class, b.class);
                assert!((a.bbox.cx - b.bbox.cx).abs() <= 1e-6);
                assert!((a.bbox.w - b.bbox.w).abs() <= 1e-6);
            }
        }
    }
}
