//! Synthetic disaster scenes, polygon rasterization, xBD-style directory I/O
//! and labeled/unlabeled splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::downstream::DamageMask;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

/// Co-registered pre/post images with the post-event damage raster.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair<S> {
    pub id: String,
    pub pre: Image<S>,
    pub post: Image<S>,
    pub damage: DamageMask,
    /// Building outlines that produced `damage`.
    pub buildings: Vec<PolygonAnnotation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolygonAnnotation {
    /// `(x, y)` in pixel units; pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
    pub vertices: Vec<(f64, f64)>,
    /// Damage class `1..=4`.
    pub damage_class: u8,
}

// ---------------------------------------------------------------------------
// synthetic scenes

const BG_MAX: i32 = 140;
const ROOF_MIN: i32 = 162;
const PLACEMENT_RETRIES: usize = 100;

/// Deterministic scene with up to `n_buildings` non-overlapping rectangles.
///
/// Damage renderings on the post image: class 1 unchanged, class 2 darkened,
/// class 3 speckled, class 4 replaced by the background underneath. Pixels
/// outside buildings are byte-identical between pre and post.
pub fn generate_synthetic_pair<S: Scalar>(seed: u64, size: usize, n_buildings: usize) -> Result<ScenePair<S>> {
    if size < 32 {
        return Err(Error::InvalidArgument(format!("synthetic scene size {size} < 32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size * size;

    let base = [rng.gen_range(50..100), rng.gen_range(70..120), rng.gen_range(40..90)];
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(6.0..15.0),
            )
        })
        .collect();
    let mut background = vec![0u8; n * 3];
    for y in 0..size {
        for x in 0..size {
            let wave: f64 = waves.iter().map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin()).sum();
            for c in 0..3 {
                let v = base[c] as f64 + wave + rng.gen_range(-10.0..10.0);
                background[(y * size + x) * 3 + c] = (v.round() as i32).clamp(0, BG_MAX) as u8;
            }
        }
    }

    let (min_side, max_side) = ((size / 12).max(3), (size / 5).max(4));
    let mut rects: Vec<(usize, usize, usize, usize)> = Vec::new(); // x0, y0, x1, y1 (exclusive)
    let mut buildings = Vec::new();
    for _ in 0..n_buildings {
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let w = rng.gen_range(min_side..=max_side);
            let h = rng.gen_range(min_side..=max_side);
            let x0 = rng.gen_range(1..size - w);
            let y0 = rng.gen_range(1..size - h);
            let r = (x0, y0, x0 + w, y0 + h);
            // one pixel of clearance between buildings
            let clear = rects.iter().all(|&(a0, b0, a1, b1)| r.2 + 1 <= a0 || a1 + 1 <= r.0 || r.3 + 1 <= b0 || b1 + 1 <= r.1);
            if clear {
                placed = Some(r);
                break;
            }
        }
        let Some(r) = placed else {
            log::info!("scene seed {seed}: placed {} of {n_buildings} buildings", rects.len());
            break;
        };
        rects.push(r);
        let class = rng.gen_range(1..=4u8);
        buildings.push(PolygonAnnotation {
            vertices: vec![
                (r.0 as f64, r.1 as f64),
                (r.2 as f64, r.1 as f64),
                (r.2 as f64, r.3 as f64),
                (r.0 as f64, r.3 as f64),
            ],
            damage_class: class,
        });
    }

    let mut pre = background.clone();
    let mut post = background.clone();
    let mut labels = vec![0u8; n];
    for (&(x0, y0, x1, y1), b) in rects.iter().zip(&buildings) {
        let roof = [rng.gen_range(175..215), rng.gen_range(175..215), rng.gen_range(175..215)];
        for y in y0..y1 {
            for x in x0..x1 {
                let p = y * size + x;
                labels[p] = b.damage_class;
                for c in 0..3 {
                    let v = roof[c] + rng.gen_range(-8..=8);
                    debug_assert!(v >= ROOF_MIN);
                    let i = p * 3 + c;
                    pre[i] = v as u8;
                    post[i] = match b.damage_class {
                        1 => v as u8,
                        2 => (v - 75) as u8,
                        3 => (v + rng.gen_range(-90..=90)).clamp(0, 255) as u8,
                        _ => background[i],
                    };
                }
            }
        }
    }
    Ok(ScenePair {
        id: format!("synthetic_{seed:016x}"),
        pre: Image::from_u8(size, size, 3, &pre)?,
        post: Image::from_u8(size, size, 3, &post)?,
        damage: DamageMask::new(size, size, labels)?,
        buildings,
    })
}

/// `count` scenes with ids `synthetic_00000…`; scene `i` uses seed `seed ⊕ i`.
pub fn generate_synthetic_set<S: Scalar>(seed: u64, count: usize, size: usize, n_buildings: usize) -> Result<Vec<ScenePair<S>>> {
    (0..count)
        .map(|i| {
            let mut p = generate_synthetic_pair(seed ^ i as u64, size, n_buildings)?;
            p.id = format!("synthetic_{i:05}");
            Ok(p)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// rasterization

fn distinct_vertices(v: &[(f64, f64)]) -> usize {
    let mut seen: Vec<(f64, f64)> = Vec::new();
    for &p in v {
        if !seen.contains(&p) {
            seen.push(p);
        }
    }
    seen.len()
}

/// Even-odd scanline fill at pixel centers; a higher damage class wins where
/// polygons overlap. Polygons with fewer than three distinct vertices are
/// skipped. Vertices outside the raster are clipped implicitly.
pub fn rasterize_annotations(annotations: &[PolygonAnnotation], height: usize, width: usize) -> Result<DamageMask> {
    let mut labels = vec![0u8; height * width];
    let mut crossings = Vec::new();
    for (k, ann) in annotations.iter().enumerate() {
        if !(1..=4).contains(&ann.damage_class) {
            return Err(Error::InvalidArgument(format!("polygon {k}: damage class {} outside 1..=4", ann.damage_class)));
        }
        if distinct_vertices(&ann.vertices) < 3 {
            log::warn!("polygon {k}: fewer than 3 distinct vertices, skipped");
            continue;
        }
        if ann.vertices.iter().any(|&(x, y)| !x.is_finite() || !y.is_finite()) {
            log::warn!("polygon {k}: non-finite vertex, skipped");
            continue;
        }
        let v = &ann.vertices;
        for row in 0..height {
            let yc = row as f64 + 0.5;
            crossings.clear();
            for i in 0..v.len() {
                let (xi, yi) = v[i];
                let (xj, yj) = v[(i + v.len() - 1) % v.len()];
                if (yi > yc) != (yj > yc) {
                    crossings.push((xj - xi) * (yc - yi) / (yj - yi) + xi);
                }
            }
            if crossings.is_empty() {
                continue;
            }
            crossings.sort_by(|a, b| a.total_cmp(b));
            for col in 0..width {
                let xc = col as f64 + 0.5;
                // crossings strictly to the right of the center
                let right = crossings.len() - crossings.partition_point(|&x| x <= xc);
                if right % 2 == 1 {
                    let l = &mut labels[row * width + col];
                    *l = (*l).max(ann.damage_class);
                }
            }
        }
    }
    DamageMask::new(height, width, labels)
}

// ---------------------------------------------------------------------------
// xBD-style directory layout

const PRE_SUFFIX: &str = "_pre_disaster";
const POST_SUFFIX: &str = "_post_disaster";

fn subtype_class(subtype: &str, unclassified_class: u8) -> Option<u8> {
    match subtype {
        "no-damage" => Some(1),
        "minor-damage" => Some(2),
        "major-damage" => Some(3),
        "destroyed" => Some(4),
        "un-classified" => Some(unclassified_class),
        _ => None,
    }
}

fn class_subtype(class: u8) -> &'static str {
    match class {
        1 => "no-damage",
        2 => "minor-damage",
        3 => "major-damage",
        _ => "destroyed",
    }
}

fn parse_wkt_polygon(wkt: &str) -> std::result::Result<Vec<(f64, f64)>, String> {
    let body = wkt.trim();
    let rest = body
        .strip_prefix("POLYGON")
        .ok_or_else(|| format!("not a POLYGON: {body:.40}"))?
        .trim();
    let inner = rest
        .strip_prefix("((")
        .and_then(|r| r.split("))").next())
        .ok_or_else(|| "malformed POLYGON ring".to_string())?;
    // outer ring only
    let ring = inner.split("),").next().unwrap_or(inner);
    let mut pts: Vec<(f64, f64)> = ring
        .split(',')
        .map(|pair| {
            let mut it = pair.split_whitespace().map(str::parse::<f64>);
            match (it.next(), it.next()) {
                (Some(Ok(x)), Some(Ok(y))) => Ok((x, y)),
                _ => Err(format!("bad coordinate pair {pair:?}")),
            }
        })
        .collect::<std::result::Result<_, _>>()?;
    if pts.len() > 1 && pts.first() == pts.last() {
        pts.pop();
    }
    Ok(pts)
}

fn format_wkt_polygon(v: &[(f64, f64)]) -> String {
    let mut ring: Vec<String> = v.iter().map(|(x, y)| format!("{x} {y}")).collect();
    if let Some(first) = ring.first().cloned() {
        ring.push(first);
    }
    format!("POLYGON (({}))", ring.join(", "))
}

/// Parse a post-event label record into annotations.
pub fn parse_label_record(text: &str, unclassified_class: u8) -> std::result::Result<Vec<PolygonAnnotation>, String> {
    let v: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let feats = v
        .pointer("/features/xy")
        .and_then(Value::as_array)
        .ok_or_else(|| "missing features.xy array".to_string())?;
    feats
        .iter()
        .map(|f| {
            let wkt = f.get("wkt").and_then(Value::as_str).ok_or("feature without wkt")?;
            let subtype = f
                .pointer("/properties/subtype")
                .and_then(Value::as_str)
                .ok_or("feature without properties.subtype")?;
            let damage_class =
                subtype_class(subtype, unclassified_class).ok_or_else(|| format!("unknown subtype {subtype:?}"))?;
            Ok(PolygonAnnotation { vertices: parse_wkt_polygon(wkt)?, damage_class })
        })
        .collect()
}

fn label_record(buildings: &[PolygonAnnotation], post: bool) -> Value {
    let xy: Vec<Value> = buildings
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let mut props = json!({ "feature_type": "building", "uid": format!("b{i}") });
            if post {
                props["subtype"] = json!(class_subtype(b.damage_class));
            }
            json!({ "properties": props, "wkt": format_wkt_polygon(&b.vertices) })
        })
        .collect();
    json!({ "features": { "xy": xy }, "metadata": {} })
}

/// One pre/post pair found on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct PairEntry {
    pub id: String,
    pub pre: PathBuf,
    pub post: PathBuf,
    /// Post-event polygons; `None` for unlabeled pairs.
    pub annotations: Option<Vec<PolygonAnnotation>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    /// Sorted by id.
    pub pairs: Vec<PairEntry>,
    pub labeled_ids: BTreeSet<String>,
    /// Problems found while loading (orphans, unparseable labels).
    pub issues: Vec<String>,
}

impl DatasetManifest {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.id.as_str())
    }

    /// Manifest over in-memory pairs, every one labeled.
    pub fn from_pairs<S>(pairs: &[ScenePair<S>]) -> Self {
        let mut entries: Vec<PairEntry> = pairs
            .iter()
            .map(|p| PairEntry {
                id: p.id.clone(),
                pre: PathBuf::new(),
                post: PathBuf::new(),
                annotations: Some(p.buildings.clone()),
            })
            .collect();
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        DatasetManifest {
            labeled_ids: entries.iter().map(|e| e.id.clone()).collect(),
            pairs: entries,
            issues: Vec::new(),
        }
    }
}

/// Data-loading options.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadOptions {
    /// Class assigned to the "un-classified" subtype.
    pub unclassified_class: u8,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { unclassified_class: 1 }
    }
}

fn list_dir(dir: &Path) -> Result<Vec<String>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(name) = entry.file_name().to_str() {
            names.push(name.to_string());
        }
    }
    names.sort();
    Ok(names)
}

pub fn load_dataset(root: &Path) -> Result<DatasetManifest> {
    load_dataset_with(root, LoadOptions::default())
}

/// Pair `images/<id>_{pre,post}_disaster.png` by stem and parse
/// `labels/<id>_post_disaster.json` where present.
pub fn load_dataset_with(root: &Path, opts: LoadOptions) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} is not a directory", root.display())));
    }
    let images = root.join("images");
    let labels = root.join("labels");
    let mut stems: BTreeMap<String, (bool, bool)> = BTreeMap::new();
    for name in list_dir(&images)? {
        let Some(stem) = name.strip_suffix(".png") else { continue };
        if let Some(id) = stem.strip_suffix(PRE_SUFFIX) {
            stems.entry(id.to_string()).or_default().0 = true;
        } else if let Some(id) = stem.strip_suffix(POST_SUFFIX) {
            stems.entry(id.to_string()).or_default().1 = true;
        }
    }
    let mut manifest = DatasetManifest::default();
    for (id, (has_pre, has_post)) in stems {
        if !(has_pre && has_post) {
            let msg = format!("{id}: orphan {} image excluded", if has_pre { "pre" } else { "post" });
            log::warn!("{msg}");
            manifest.issues.push(msg);
            continue;
        }
        let label_path = labels.join(format!("{id}{POST_SUFFIX}.json"));
        let annotations = if label_path.exists() {
            let text = fs::read_to_string(&label_path).map_err(|e| Error::io(&label_path, e))?;
            match parse_label_record(&text, opts.unclassified_class) {
                Ok(a) => Some(a),
                Err(e) => {
                    let msg = format!("{id}: unparseable label record ({e}), treated as unlabeled");
                    log::warn!("{msg}");
                    manifest.issues.push(msg);
                    None
                }
            }
        } else {
            None
        };
        if annotations.is_some() {
            manifest.labeled_ids.insert(id.clone());
        }
        manifest.pairs.push(PairEntry {
            pre: images.join(format!("{id}{PRE_SUFFIX}.png")),
            post: images.join(format!("{id}{POST_SUFFIX}.png")),
            id,
            annotations,
        });
    }
    Ok(manifest)
}

/// Read the images of `entry` and rasterize its labels (all-zero when unlabeled).
pub fn load_pair<S: Scalar>(entry: &PairEntry) -> Result<ScenePair<S>> {
    let pre = Image::load_rgb(&entry.pre)?;
    let post = Image::load_rgb(&entry.post)?;
    if (pre.height(), pre.width()) != (post.height(), post.width()) {
        return Err(Error::Data(format!(
            "{}: pre {}x{} and post {}x{} differ in size",
            entry.id,
            pre.height(),
            pre.width(),
            post.height(),
            post.width()
        )));
    }
    let buildings = entry.annotations.clone().unwrap_or_default();
    let damage = rasterize_annotations(&buildings, pre.height(), pre.width())?;
    Ok(ScenePair { id: entry.id.clone(), pre, post, damage, buildings })
}

/// Write pairs in the xBD directory layout.
pub fn export_xbd<S: Scalar>(pairs: &[ScenePair<S>], root: &Path) -> Result<()> {
    let images = root.join("images");
    let labels = root.join("labels");
    for dir in [&images, &labels] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for p in pairs {
        p.pre.save_png(&images.join(format!("{}{PRE_SUFFIX}.png", p.id)))?;
        p.post.save_png(&images.join(format!("{}{POST_SUFFIX}.png", p.id)))?;
        for (suffix, post) in [(PRE_SUFFIX, false), (POST_SUFFIX, true)] {
            let path = labels.join(format!("{}{suffix}.json", p.id));
            let text = serde_json::to_string_pretty(&label_record(&p.buildings, post)).expect("json value");
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

/// Keep `ceil(fraction · N)` of the labeled ids, chosen uniformly with `seed`.
pub fn split_labeled(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("labeled fraction {fraction} outside (0, 1]")));
    }
    let mut ids: Vec<&String> = manifest.labeled_ids.iter().collect();
    let keep = ((fraction * ids.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut out = manifest.clone();
    out.labeled_ids = ids.into_iter().take(keep.min(manifest.labeled_ids.len())).cloned().collect();
    Ok(out)
}
