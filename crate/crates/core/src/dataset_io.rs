//! Datasets on disk: a COCO-style `annotations.json` next to 8-bit RGB PNGs,
//! few-shot image folders, and manual annotations keyed by latent seed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use log::warn;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::checkpoint::write_atomic;
use crate::error::{FactoryError, Result};
use crate::label_synthesis::{BoxLabel, LabelSet};
use crate::ops;

pub const ANNOTATIONS_FILE: &str = "annotations.json";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    /// Latent seed for synthesized images.
    pub seed: Option<u64>,
    /// Interleaved 8-bit RGB, row-major.
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: usize,
    /// `[x, y, w, h]` in pixels, top-left origin.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<DatasetImage>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
}

pub fn image_file_name(seed: u64) -> String {
    format!("img_{seed:016}.png")
}

pub fn categories_from_names(names: &[&str]) -> Vec<Category> {
    names.iter().enumerate().map(|(id, n)| Category { id, name: n.to_string() }).collect()
}

/// `[-1, 1]` CHW pixels to interleaved 8-bit RGB.
pub fn quantize_chw(values: &[f64], side_h: usize, side_w: usize) -> Vec<u8> {
    let plane = side_h * side_w;
    let mut out = vec![0u8; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            out[i * 3 + c] = ((values[c * plane + i] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

pub fn annotation_to_box(a: &Annotation) -> BoxLabel {
    let [x, y, w, h] = a.bbox;
    BoxLabel {
        class_id: a.category_id,
        x_min: x,
        y_min: y,
        x_max: x + w,
        y_max: y + h,
    }
}

pub fn box_to_bbox(b: &BoxLabel) -> [f64; 4] {
    [b.x_min, b.y_min, b.width(), b.height()]
}

impl Dataset {
    /// Appends an image with its boxes. Image and annotation ids are assigned sequentially from 1.
    pub fn push(&mut self, file_name: String, seed: Option<u64>, width: usize, height: usize, pixels: Vec<u8>, labels: &[BoxLabel]) -> u64 {
        let id = self.images.len() as u64 + 1;
        self.images.push(DatasetImage {
            id,
            file_name,
            width,
            height,
            seed,
            pixels,
        });
        for b in labels {
            let aid = self.annotations.len() as u64 + 1;
            self.annotations.push(Annotation {
                id: aid,
                image_id: id,
                category_id: b.class_id,
                bbox: box_to_bbox(b),
            });
        }
        id
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    /// The first `n` images and their annotations.
    pub fn take(&self, n: usize) -> Dataset {
        let images: Vec<DatasetImage> = self.images.iter().take(n).cloned().collect();
        let ids: BTreeSet<u64> = images.iter().map(|i| i.id).collect();
        Dataset {
            images,
            annotations: self.annotations.iter().filter(|a| ids.contains(&a.image_id)).cloned().collect(),
            categories: self.categories.clone(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Boxes per image, in image order.
    pub fn labels(&self) -> Vec<LabelSet> {
        let mut by_image: BTreeMap<u64, LabelSet> = self.images.iter().map(|i| (i.id, vec![])).collect();
        for a in &self.annotations {
            if let Some(v) = by_image.get_mut(&a.image_id) {
                v.push(annotation_to_box(a));
            }
        }
        self.images.iter().map(|i| by_image.remove(&i.id).unwrap_or_default()).collect()
    }

    /// `[N, 3, H, W]` tensor in `[-1, 1]`.
    pub fn images_tensor(&self, dtype: DType) -> Result<Tensor> {
        let first = self.images.first().ok_or_else(|| FactoryError::argument("empty dataset"))?;
        let (h, w) = (first.height, first.width);
        let mut flat = Vec::with_capacity(self.images.len() * 3 * h * w);
        for img in &self.images {
            if (img.height, img.width) != (h, w) {
                return Err(FactoryError::argument("dataset images have mixed sizes"));
            }
            for c in 0..3 {
                flat.extend((0..h * w).map(|i| img.pixels[i * 3 + c] as f64 / 127.5 - 1.0));
            }
        }
        ops::from_f64(flat, &[self.images.len(), 3, h, w], dtype)
    }

    pub fn validate(&self) -> Result<()> {
        let ids: BTreeSet<u64> = self.images.iter().map(|i| i.id).collect();
        let cats: BTreeSet<usize> = self.categories.iter().map(|c| c.id).collect();
        let sizes: BTreeMap<u64, (usize, usize)> = self.images.iter().map(|i| (i.id, (i.width, i.height))).collect();
        for a in &self.annotations {
            let what = format!("annotation {}", a.id);
            let &(w, h) = sizes.get(&a.image_id).ok_or_else(|| FactoryError::argument(format!("{what} references missing image {}", a.image_id)))?;
            if !cats.contains(&a.category_id) {
                return Err(FactoryError::argument(format!("{what} references missing category {}", a.category_id)));
            }
            let [x, y, bw, bh] = a.bbox;
            if !(bw > 0.0 && bh > 0.0) {
                return Err(FactoryError::argument(format!("{what} has non-positive size")));
            }
            if x < 0.0 || y < 0.0 || x + bw > w as f64 + 1e-9 || y + bh > h as f64 + 1e-9 {
                return Err(FactoryError::argument(format!("{what} lies outside its image")));
            }
        }
        if ids.len() != self.images.len() {
            return Err(FactoryError::argument("duplicate image ids"));
        }
        Ok(())
    }

    /// The canonical `annotations.json` document (keys sorted).
    pub fn to_json(&self) -> Value {
        let images: Vec<Value> = self
            .images
            .iter()
            .map(|i| {
                let mut v = json!({"id": i.id, "file_name": i.file_name, "width": i.width, "height": i.height});
                if let Some(s) = i.seed {
                    v["seed"] = json!(s);
                }
                v
            })
            .collect();
        json!({
            "images": images,
            "annotations": self.annotations,
            "categories": self.categories,
        })
    }

    /// SHA-256 over the canonical JSON and every image's pixels, hex encoded.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.to_json())?);
        for img in &self.images {
            h.update(img.file_name.as_bytes());
            h.update(&img.pixels);
        }
        Ok(hex::encode(h.finalize()))
    }
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| FactoryError::io(dir, e))?;
    for img in &ds.images {
        let path = dir.join(&img.file_name);
        let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
            .ok_or_else(|| FactoryError::format(&path, "pixel buffer does not match image size"))?;
        let mut bytes = Vec::new();
        buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
        write_atomic(&path, &bytes)?;
    }
    let mut text = serde_json::to_vec_pretty(&ds.to_json())?;
    text.push(b'\n');
    write_atomic(&dir.join(ANNOTATIONS_FILE), &text)
}

fn warn_unknown(record: &str, v: &Value, known: &[&str]) {
    if let Some(obj) = v.as_object() {
        for k in obj.keys().filter(|k| !known.contains(&k.as_str())) {
            warn!("{record}: ignoring unknown key `{k}`");
        }
    }
}

fn field<'a>(v: &'a Value, key: &str, record: &str, path: &Path) -> Result<&'a Value> {
    v.get(key).ok_or_else(|| FactoryError::format(path, format!("{record}: missing `{key}`")))
}

fn as_u64(v: &Value, record: &str, path: &Path) -> Result<u64> {
    v.as_u64().ok_or_else(|| FactoryError::format(path, format!("{record}: expected a non-negative integer")))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(ANNOTATIONS_FILE);
    let text = fs::read(&path).map_err(|e| FactoryError::io(&path, e))?;
    let root: Value = serde_json::from_slice(&text).map_err(|e| FactoryError::format(&path, e.to_string()))?;
    warn_unknown("annotations.json", &root, &["images", "annotations", "categories"]);
    let list = |key: &str| -> Result<&Vec<Value>> { field(&root, key, "annotations.json", &path)?.as_array().ok_or_else(|| FactoryError::format(&path, format!("`{key}` must be a list"))) };

    let mut ds = Dataset::default();
    for (k, c) in list("categories")?.iter().enumerate() {
        let rec = format!("category #{k}");
        warn_unknown(&rec, c, &["id", "name"]);
        let id = as_u64(field(c, "id", &rec, &path)?, &rec, &path)? as usize;
        let name = field(c, "name", &rec, &path)?.as_str().ok_or_else(|| FactoryError::format(&path, format!("{rec}: `name` must be a string")))?;
        ds.categories.push(Category { id, name: name.to_string() });
    }
    for (k, i) in list("images")?.iter().enumerate() {
        let rec = format!("image #{k}");
        warn_unknown(&rec, i, &["id", "file_name", "width", "height", "seed"]);
        let id = as_u64(field(i, "id", &rec, &path)?, &rec, &path)?;
        let file_name = field(i, "file_name", &rec, &path)?.as_str().ok_or_else(|| FactoryError::format(&path, format!("{rec}: `file_name` must be a string")))?.to_string();
        let width = as_u64(field(i, "width", &rec, &path)?, &rec, &path)? as usize;
        let height = as_u64(field(i, "height", &rec, &path)?, &rec, &path)? as usize;
        let seed = match i.get("seed") {
            None | Some(Value::Null) => None,
            Some(s) => Some(as_u64(s, &rec, &path)?),
        };
        let img_path = dir.join(&file_name);
        let decoded = image::open(&img_path)?.to_rgb8();
        if (decoded.width() as usize, decoded.height() as usize) != (width, height) {
            return Err(FactoryError::format(&img_path, format!("{rec}: size differs from annotations.json")));
        }
        ds.images.push(DatasetImage {
            id,
            file_name,
            width,
            height,
            seed,
            pixels: decoded.into_raw(),
        });
    }
    for (k, a) in list("annotations")?.iter().enumerate() {
        let rec = format!("annotation #{k}");
        warn_unknown(&rec, a, &["id", "image_id", "category_id", "bbox"]);
        let bbox: Vec<f64> = field(a, "bbox", &rec, &path)?
            .as_array()
            .filter(|b| b.len() == 4)
            .and_then(|b| b.iter().map(|x| x.as_f64()).collect::<Option<Vec<_>>>())
            .ok_or_else(|| FactoryError::format(&path, format!("{rec}: `bbox` must be four numbers")))?;
        ds.annotations.push(Annotation {
            id: as_u64(field(a, "id", &rec, &path)?, &rec, &path)?,
            image_id: as_u64(field(a, "image_id", &rec, &path)?, &rec, &path)?,
            category_id: as_u64(field(a, "category_id", &rec, &path)?, &rec, &path)? as usize,
            bbox: [bbox[0], bbox[1], bbox[2], bbox[3]],
        });
    }
    ds.validate().map_err(|e| FactoryError::format(&path, e.to_string()))?;
    Ok(ds)
}

/// Every PNG/JPEG in `dir` (alphabetical), resized to `side × side`, as `[K, 3, side, side]` in `[-1, 1]`.
pub fn load_fewshot_images(dir: &Path, side: usize) -> Result<(Vec<PathBuf>, Tensor)> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| FactoryError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut names = Vec::new();
    let mut flat = Vec::new();
    for p in entries {
        let ext = p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if !matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            warn!("skipping non-image file {}", p.display());
            continue;
        }
        let img = match image::open(&p) {
            Ok(i) => i.to_rgb8(),
            Err(e) => {
                warn!("skipping unreadable image {}: {e}", p.display());
                continue;
            }
        };
        let img = if (img.width() as usize, img.height() as usize) == (side, side) {
            img
        } else {
            image::imageops::resize(&img, side as u32, side as u32, image::imageops::FilterType::Triangle)
        };
        let raw = img.into_raw();
        for c in 0..3 {
            flat.extend((0..side * side).map(|i| raw[i * 3 + c] as f64 / 127.5 - 1.0));
        }
        names.push(p);
    }
    if names.is_empty() {
        return Err(FactoryError::argument(format!("no few-shot images found in {}", dir.display())));
    }
    let t = ops::from_f64(flat, &[names.len(), 3, side, side], DType::F32)?;
    Ok((names, t))
}

/// Writes `[K, 3, H, W]` images in `[-1, 1]` as `{prefix}_{k:03}.png`.
pub fn save_images(images: &Tensor, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let (n, _, h, w) = images.dims4()?;
    fs::create_dir_all(dir).map_err(|e| FactoryError::io(dir, e))?;
    let all = ops::to_f64_vec(images)?;
    let per = 3 * h * w;
    let mut out = Vec::new();
    for k in 0..n {
        let px = quantize_chw(&all[k * per..(k + 1) * per], h, w);
        let path = dir.join(format!("{prefix}_{k:03}.png"));
        image::RgbImage::from_raw(w as u32, h as u32, px).expect("sized buffer").save(&path)?;
        out.push(path);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManualBox {
    pub category_id: usize,
    pub bbox: [f64; 4],
}

/// JSON object entries in file order, duplicates kept.
struct Entries(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for Entries {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Entries;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object keyed by latent seed")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Entries, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    out.push((k, v));
                }
                Ok(Entries(out))
            }
        }
        d.deserialize_map(V)
    }
}

/// Reads `{"<seed>": [{"category_id": c, "bbox": [x, y, w, h]}, ...], ...}`.
pub fn load_manual_annotations(path: &Path, width: usize, height: usize, num_classes: usize) -> Result<Vec<(u64, LabelSet)>> {
    let text = fs::read(path).map_err(|e| FactoryError::io(path, e))?;
    let Entries(entries) = serde_json::from_slice(&text).map_err(|e| FactoryError::format(path, e.to_string()))?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(entries.len());
    for (key, value) in entries {
        let seed: u64 = key.parse().map_err(|_| FactoryError::format(path, format!("`{key}` is not a latent seed")))?;
        if !seen.insert(seed) {
            return Err(FactoryError::format(path, format!("duplicate seed {seed}")));
        }
        let boxes: Vec<ManualBox> = serde_json::from_value(value).map_err(|e| FactoryError::format(path, format!("seed {seed}: {e}")))?;
        let mut labels = Vec::with_capacity(boxes.len());
        for b in &boxes {
            let label = annotation_to_box(&Annotation {
                id: 0,
                image_id: 0,
                category_id: b.category_id,
                bbox: b.bbox,
            });
            label
                .validate(width, height, num_classes)
                .map_err(|e| FactoryError::format(path, format!("seed {seed}: {e}")))?;
            labels.push(label);
        }
        out.push((seed, labels));
    }
    Ok(out)
}

pub fn save_manual_annotations(path: &Path, entries: &[(u64, LabelSet)]) -> Result<()> {
    let mut obj = serde_json::Map::new();
    for (seed, labels) in entries {
        let boxes: Vec<ManualBox> = labels.iter().map(|b| ManualBox { category_id: b.class_id, bbox: box_to_bbox(b) }).collect();
        obj.insert(seed.to_string(), serde_json::to_value(boxes)?);
    }
    let mut text = serde_json::to_vec_pretty(&Value::Object(obj))?;
    text.push(b'\n');
    write_atomic(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Dataset {
        let mut ds = Dataset { categories: categories_from_names(&["square", "disc"]), ..Default::default() };
        for k in 0..3u64 {
            let pixels: Vec<u8> = (0..8 * 8 * 3).map(|i| ((i as u64 * 7 + k * 31) % 256) as u8).collect();
            let b = BoxLabel { class_id: (k % 2) as usize, x_min: 0.5 + k as f64, y_min: 1.25, x_max: 6.125, y_max: 7.0 };
            ds.push(image_file_name(k * 1000 + 7), Some(k * 1000 + 7), 8, 8, pixels, &[b]);
        }
        ds
    }

    #[test]
    fn roundtrip_and_stable_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.checksum().unwrap(), ds.checksum().unwrap());
        let first: Vec<Vec<u8>> = ["annotations.json", "img_0000000000000007.png"].iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
        save_dataset(&ds, dir.path()).unwrap();
        let second: Vec<Vec<u8>> = ["annotations.json", "img_0000000000000007.png"].iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn load_rejects_bad_records() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&sample(), dir.path()).unwrap();
        let path = dir.path().join(ANNOTATIONS_FILE);
        let orig: Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();

        let mut zero_w = orig.clone();
        zero_w["annotations"][1]["bbox"][2] = json!(0.0);
        fs::write(&path, serde_json::to_vec(&zero_w).unwrap()).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("annotation 2"), "{err}");

        let mut dangling = orig.clone();
        dangling["annotations"][0]["image_id"] = json!(99);
        fs::write(&path, serde_json::to_vec(&dangling).unwrap()).unwrap();
        assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("missing image 99"));

        fs::write(&path, b"{not json").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(FactoryError::Format { .. })));

        let mut extra = orig;
        extra["info"] = json!({"year": 2024});
        extra["images"][0]["license"] = json!(1);
        fs::write(&path, serde_json::to_vec(&extra).unwrap()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), sample());
    }

    #[test]
    fn fewshot_loading() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["d.png", "a.png", "c.jpg", "b.png", "e.png"] {
            let img = image::RgbImage::from_pixel(16, 16, image::Rgb([255, 0, 0]));
            img.save(dir.path().join(name)).unwrap();
        }
        image::GrayImage::from_pixel(8, 8, image::Luma([255])).save(dir.path().join("f_gray.png")).unwrap();
        fs::write(dir.path().join("notes.txt"), b"hello").unwrap();
        let (names, t) = load_fewshot_images(dir.path(), 8).unwrap();
        let order: Vec<String> = names.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(order, ["a.png", "b.png", "c.jpg", "d.png", "e.png", "f_gray.png"]);
        assert_eq!(t.dims(), &[6, 3, 8, 8]);
        let v = ops::to_f64_vec(&t).unwrap();
        assert!((v[0] - 1.0).abs() < 0.02 && (v[64] + 1.0).abs() < 0.02);
        let gray = &v[5 * 192..6 * 192];
        assert!(gray.iter().all(|&x| (x - 1.0).abs() < 1e-9));

        let empty = tempfile::tempdir().unwrap();
        assert!(load_fewshot_images(empty.path(), 8).is_err());
    }

    #[test]
    fn manual_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manual.json");
        let entries: Vec<(u64, LabelSet)> = (0..10)
            .map(|s| (s * 11, if s == 3 { vec![] } else { vec![BoxLabel { class_id: 1, x_min: 1.0, y_min: 2.0, x_max: 9.0, y_max: 10.5 }] }))
            .collect();
        save_manual_annotations(&path, &entries).unwrap();
        let mut back = load_manual_annotations(&path, 32, 32, 2).unwrap();
        back.sort_by_key(|e| e.0);
        assert_eq!(back, entries);

        fs::write(&path, br#"{"5": [], "5": []}"#).unwrap();
        assert!(load_manual_annotations(&path, 32, 32, 2).unwrap_err().to_string().contains("duplicate seed 5"));
        fs::write(&path, br#"{"42": [{"category_id": 0, "bbox": [30, 0, 5, 5]}]}"#).unwrap();
        assert!(load_manual_annotations(&path, 32, 32, 2).unwrap_err().to_string().contains("seed 42"));
    }
}
