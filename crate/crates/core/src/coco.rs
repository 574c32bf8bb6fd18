//! COCO keypoint annotations, person crops, synthetic data and prediction files.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use crate::config::COCO_KEYPOINTS;
use crate::error::{Error, Result};
use crate::eval::{GroundTruthInstance, PredictionInstance};
use crate::heatmap::{DecodedKeypoint, Keypoint, KeypointSet};
use crate::tensor::Tensor;

pub const PERSON_CATEGORY: u64 = 1;

/// Isotropic scale plus translation from original-image pixels to
/// network-input pixels: `u = s·x + tx`, `v = s·y + ty`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropTransform {
    matrix: [[f64; 3]; 2],
    inverse: [[f64; 3]; 2],
}

impl CropTransform {
    pub fn new(scale: f64, tx: f64, ty: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0 && tx.is_finite() && ty.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "crop transform needs a positive finite scale, got {scale} ({tx}, {ty})"
            )));
        }
        Ok(CropTransform {
            matrix: [[scale, 0.0, tx], [0.0, scale, ty]],
            inverse: [[1.0 / scale, 0.0, -tx / scale], [0.0, 1.0 / scale, -ty / scale]],
        })
    }

    pub fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0).expect("identity")
    }

    pub fn matrix(&self) -> [[f64; 3]; 2] {
        self.matrix
    }

    pub fn scale(&self) -> f64 {
        self.matrix[0][0]
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.matrix;
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    pub fn invert(&self, u: f64, v: f64) -> (f64, f64) {
        let m = &self.inverse;
        (m[0][0] * u + m[0][1] * v + m[0][2], m[1][0] * u + m[1][1] * v + m[1][2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageInfo {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<GroundTruthInstance>,
    pub keypoint_names: Vec<String>,
    /// 1-based keypoint index pairs, as in COCO files.
    pub skeleton: Vec<[usize; 2]>,
    /// Crowd annotations dropped during parsing.
    pub skipped_crowd: usize,
}

impl DatasetIndex {
    pub fn image(&self, id: u64) -> Option<&ImageInfo> {
        self.images.iter().find(|i| i.id == id)
    }
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str, ctx: &str) -> Result<&'a Value> {
    obj.get(name).ok_or_else(|| Error::MissingField(format!("{ctx}{name}")))
}

fn as_object<'a>(v: &'a Value, ctx: &str) -> Result<&'a Map<String, Value>> {
    v.as_object().ok_or_else(|| Error::InvalidArgument(format!("{ctx} is not an object")))
}

fn as_array<'a>(v: &'a Value, ctx: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| Error::InvalidArgument(format!("{ctx} is not an array")))
}

fn as_u64(v: &Value, ctx: &str) -> Result<u64> {
    v.as_u64().ok_or_else(|| Error::InvalidArgument(format!("{ctx} is not a non-negative integer")))
}

fn as_f64(v: &Value, ctx: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| Error::InvalidArgument(format!("{ctx} is not a number")))
}

/// Parses and validates the COCO person-keypoints subset.
pub fn parse_keypoint_dataset(document: &str) -> Result<DatasetIndex> {
    let root: Value = serde_json::from_str(document)?;
    let root = as_object(&root, "document")?;

    let mut images = Vec::new();
    for (i, img) in as_array(field(root, "images", "")?, "images")?.iter().enumerate() {
        let ctx = format!("images[{i}].");
        let o = as_object(img, &ctx)?;
        images.push(ImageInfo {
            id: as_u64(field(o, "id", &ctx)?, &ctx)?,
            file_name: field(o, "file_name", &ctx)?
                .as_str()
                .ok_or_else(|| Error::InvalidArgument(format!("{ctx}file_name is not a string")))?
                .to_string(),
            width: as_u64(field(o, "width", &ctx)?, &ctx)? as usize,
            height: as_u64(field(o, "height", &ctx)?, &ctx)? as usize,
        });
    }
    let image_ids: HashSet<u64> = images.iter().map(|i| i.id).collect();

    let categories = as_array(field(root, "categories", "")?, "categories")?;
    let mut keypoint_names = Vec::new();
    let mut skeleton = Vec::new();
    if let Some(cat) = categories.iter().find(|c| c.get("keypoints").is_some()) {
        let ctx = "categories[person].";
        let o = as_object(cat, ctx)?;
        keypoint_names = as_array(field(o, "keypoints", ctx)?, ctx)?
            .iter()
            .map(|v| v.as_str().unwrap_or_default().to_string())
            .collect();
        if let Some(sk) = o.get("skeleton") {
            for pair in as_array(sk, "skeleton")? {
                let p = as_array(pair, "skeleton edge")?;
                if p.len() == 2 {
                    skeleton.push([as_u64(&p[0], "skeleton")? as usize, as_u64(&p[1], "skeleton")? as usize]);
                }
            }
        }
    }

    let expected = 3 * COCO_KEYPOINTS;
    let mut annotations = Vec::new();
    let mut skipped_crowd = 0;
    for (i, ann) in as_array(field(root, "annotations", "")?, "annotations")?.iter().enumerate() {
        let ctx = format!("annotations[{i}].");
        let o = as_object(ann, &ctx)?;
        let id = as_u64(field(o, "id", &ctx)?, &ctx)?;
        let image_id = as_u64(field(o, "image_id", &ctx)?, &ctx)?;
        if o.get("iscrowd").and_then(Value::as_u64).unwrap_or(0) == 1 {
            log::warn!("skipping crowd annotation {id}");
            skipped_crowd += 1;
            continue;
        }
        let raw = as_array(field(o, "keypoints", &ctx)?, &ctx)?;
        if raw.len() != expected {
            return Err(Error::KeypointLength { id, len: raw.len(), expected });
        }
        if !image_ids.contains(&image_id) {
            return Err(Error::DanglingImage { annotation: id, image: image_id });
        }
        let values = raw.iter().map(|v| as_f64(v, &ctx)).collect::<Result<Vec<_>>>()?;
        let points = values
            .chunks(3)
            .map(|t| Keypoint { x: t[0], y: t[1], v: t[2].clamp(0.0, 2.0) as u8 })
            .collect();
        let bbox_raw = as_array(field(o, "bbox", &ctx)?, &ctx)?;
        if bbox_raw.len() != 4 {
            return Err(Error::InvalidArgument(format!("{ctx}bbox must have 4 values")));
        }
        let mut bbox = [0.0; 4];
        for (b, v) in bbox.iter_mut().zip(bbox_raw) {
            *b = as_f64(v, &ctx)?;
        }
        annotations.push(GroundTruthInstance {
            id,
            image_id,
            keypoints: KeypointSet::new(points),
            area: as_f64(field(o, "area", &ctx)?, &ctx)?,
            bbox,
        });
    }
    Ok(DatasetIndex { images, annotations, keypoint_names, skeleton, skipped_crowd })
}

/// Padding applied around the (aspect-corrected) person box.
pub const CROP_PADDING: f64 = 1.25;

/// Transform that maps `bbox`, expanded to the output aspect ratio and
/// padded by `padding`, onto an `out_w × out_h` canvas.
pub fn crop_transform(bbox: [f64; 4], out_h: usize, out_w: usize, padding: f64) -> Result<CropTransform> {
    let [x, y, w, h] = bbox;
    if !(bbox.iter().all(|v| v.is_finite()) && w > 0.0 && h > 0.0) {
        return Err(Error::DegenerateBox(bbox));
    }
    if out_h == 0 || out_w == 0 || !(padding > 0.0) {
        return Err(Error::InvalidArgument(format!("crop output {out_w}x{out_h}, padding {padding}")));
    }
    let (cx, cy) = (x + w / 2.0, y + h / 2.0);
    let aspect = out_w as f64 / out_h as f64;
    // width of the box after expanding it to the output aspect ratio
    let bw = w.max(h * aspect);
    let scale = out_w as f64 / (bw * padding);
    CropTransform::new(scale, out_w as f64 / 2.0 - scale * cx, out_h as f64 / 2.0 - scale * cy)
}

/// Bilinear sample at a continuous pixel coordinate; outside pixels read as 0.
fn sample(image: &Tensor, x: f64, y: f64, out: &mut [f64]) {
    let (h, w, c) = (image.shape()[0] as isize, image.shape()[1] as isize, image.shape()[2]);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    out.iter_mut().for_each(|v| *v = 0.0);
    for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
            let (r, col) = (y0 as isize + dy, x0 as isize + dx);
            let wgt = wy * wx;
            if wgt == 0.0 || r < 0 || col < 0 || r >= h || col >= w {
                continue;
            }
            let base = (r as usize * w as usize + col as usize) * c;
            for (o, v) in out.iter_mut().zip(&image.data()[base..base + c]) {
                *o += wgt * v;
            }
        }
    }
}

/// Crops a person box to `out_h × out_w` with [`CROP_PADDING`].
pub fn crop_person(image: &Tensor, bbox: [f64; 4], out_h: usize, out_w: usize) -> Result<(Tensor, CropTransform)> {
    crop_person_padded(image, bbox, out_h, out_w, CROP_PADDING)
}

pub fn crop_person_padded(
    image: &Tensor,
    bbox: [f64; 4],
    out_h: usize,
    out_w: usize,
    padding: f64,
) -> Result<(Tensor, CropTransform)> {
    let [ih, iw, c] = image.shape()[..] else {
        return Err(Error::shape("crop_person", format!("expected [h,w,C], got {:?}", image.shape())));
    };
    let transform = crop_transform(bbox, out_h, out_w, padding)?;
    let [x, y, w, h] = bbox;
    if x >= iw as f64 || y >= ih as f64 || x + w <= 0.0 || y + h <= 0.0 {
        return Err(Error::InvalidArgument(format!("box {bbox:?} lies outside the {iw}x{ih} image")));
    }
    let mut data = vec![0.0; out_h * out_w * c];
    for i in 0..out_h {
        for j in 0..out_w {
            let (sx, sy) = transform.invert(j as f64, i as f64);
            sample(image, sx, sy, &mut data[(i * out_w + j) * c..(i * out_w + j + 1) * c]);
        }
    }
    Ok((Tensor::new(vec![out_h, out_w, c], data)?, transform))
}

/// Standardizes a `[h,w,3]` image with values in `[0,1]`.
pub fn normalize_image(image: &Tensor, mean: &[f64; 3], std: &[f64; 3]) -> Result<Tensor> {
    if image.last_dim() != 3 {
        return Err(Error::shape("normalize_image", format!("{:?}", image.shape())));
    }
    let data = image.data().iter().enumerate().map(|(i, v)| (v - mean[i % 3]) / std[i % 3]).collect();
    Tensor::new(image.shape().to_vec(), data)
}

/// Decodes a PNG or PPM file into `[h,w,3]` with values in `[0,1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

/// In-memory synthetic dataset with exactly known keypoints.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub index: DatasetIndex,
    /// `[size, size, 3]` images with values in `[0,1]`, one per annotation.
    pub images: Vec<Tensor>,
}

/// Distinct fully-saturated colour per keypoint.
fn keypoint_colour(k: usize, total: usize) -> [f64; 3] {
    let hue = 6.0 * k as f64 / total as f64;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    match hue as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Generates `n` square images of colored disks on a dim noise background.
/// Keypoints sit on multiples of the heatmap stride, at least two strides
/// apart, all visible; the person box is the whole image.
pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Result<SyntheticDataset> {
    let stride = crate::config::PATCH_SIZE;
    if n == 0 || size < 8 * stride || !size.is_multiple_of(stride) {
        return Err(Error::InvalidArgument(format!(
            "synthetic dataset needs n >= 1 and a size that is a multiple of {stride} and >= {}",
            8 * stride
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = size / stride;
    let radius = (size as f64 / 24.0).max(1.5);
    let mut images = Vec::with_capacity(n);
    let mut infos = Vec::with_capacity(n);
    let mut annotations = Vec::with_capacity(n);
    for i in 0..n {
        let mut sites: Vec<(usize, usize)> = Vec::with_capacity(COCO_KEYPOINTS);
        let mut attempts = 0;
        while sites.len() < COCO_KEYPOINTS {
            let cand = (rng.gen_range(1..cells - 1), rng.gen_range(1..cells - 1));
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::InvalidArgument(format!("cannot place keypoints on a {size}px image")));
            }
            if sites.iter().all(|&(a, b)| a.abs_diff(cand.0).max(b.abs_diff(cand.1)) >= 2) {
                sites.push(cand);
            }
        }
        let mut data: Vec<f64> = (0..size * size * 3).map(|_| rng.gen_range(0.0..0.1)).collect();
        let mut points = Vec::with_capacity(COCO_KEYPOINTS);
        for (k, &(cx, cy)) in sites.iter().enumerate() {
            let (x, y) = ((cx * stride) as f64, (cy * stride) as f64);
            let colour = keypoint_colour(k, COCO_KEYPOINTS);
            for r in 0..size {
                for c in 0..size {
                    if (r as f64 - y).powi(2) + (c as f64 - x).powi(2) <= radius * radius {
                        data[(r * size + c) * 3..(r * size + c) * 3 + 3].copy_from_slice(&colour);
                    }
                }
            }
            points.push(Keypoint { x, y, v: 2 });
        }
        let id = i as u64 + 1;
        images.push(Tensor::new(vec![size, size, 3], data)?);
        infos.push(ImageInfo { id, file_name: format!("synthetic_{id:04}.png"), width: size, height: size });
        annotations.push(GroundTruthInstance {
            id,
            image_id: id,
            keypoints: KeypointSet::new(points),
            area: (size * size) as f64,
            bbox: [0.0, 0.0, size as f64, size as f64],
        });
    }
    Ok(SyntheticDataset {
        index: DatasetIndex {
            images: infos,
            annotations,
            keypoint_names: (0..COCO_KEYPOINTS).map(|k| format!("kp{k}")).collect(),
            skeleton: Vec::new(),
            skipped_crowd: 0,
        },
        images,
    })
}

/// COCO result format: `[{image_id, category_id, keypoints: [x,y,s]*K, score}]`.
pub fn write_predictions(preds: &[PredictionInstance]) -> String {
    let items: Vec<Value> = preds
        .iter()
        .map(|p| {
            let kps: Vec<f64> = p.keypoints.iter().flat_map(|k| [k.x, k.y, k.score]).collect();
            json!({
                "image_id": p.image_id,
                "category_id": PERSON_CATEGORY,
                "keypoints": kps,
                "score": p.score,
            })
        })
        .collect();
    serde_json::to_string(&items).expect("predictions serialize")
}

pub fn parse_predictions(document: &str) -> Result<Vec<PredictionInstance>> {
    let root: Value = serde_json::from_str(document)?;
    let mut out = Vec::new();
    for (i, item) in as_array(&root, "predictions")?.iter().enumerate() {
        let ctx = format!("[{i}].");
        let o = as_object(item, &ctx)?;
        let raw = as_array(field(o, "keypoints", &ctx)?, &ctx)?;
        if raw.len() % 3 != 0 {
            return Err(Error::InvalidArgument(format!("{ctx}keypoints length {} is not a multiple of 3", raw.len())));
        }
        let vals = raw.iter().map(|v| as_f64(v, &ctx)).collect::<Result<Vec<_>>>()?;
        out.push(PredictionInstance {
            image_id: as_u64(field(o, "image_id", &ctx)?, &ctx)?,
            keypoints: vals.chunks(3).map(|t| DecodedKeypoint { x: t[0], y: t[1], score: t[2] }).collect(),
            score: as_f64(field(o, "score", &ctx)?, &ctx)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_doc(keypoints: Vec<f64>, image_id: u64) -> String {
        json!({
            "images": [{"id": 1, "file_name": "a.png", "width": 64, "height": 48}],
            "annotations": [{"id": 7, "image_id": image_id, "keypoints": keypoints,
                             "area": 100.0, "bbox": [1, 2, 30, 40], "iscrowd": 0}],
            "categories": [{"id": 1, "name": "person", "keypoints": ["nose"], "skeleton": [[1, 2]]}]
        })
        .to_string()
    }

    #[test]
    fn parse_minimal() {
        let idx = parse_keypoint_dataset(&minimal_doc(vec![0.0; 51], 1)).unwrap();
        assert_eq!(idx.images.len(), 1);
        assert_eq!(idx.annotations.len(), 1);
        assert!(idx.annotations[0].keypoints.points.iter().all(|k| k.v == 0));
        assert_eq!(idx.skeleton, vec![[1, 2]]);
    }

    #[test]
    fn parse_field_mapping() {
        let mut kps = vec![0.0; 51];
        kps[..3].copy_from_slice(&[10.0, 20.0, 2.0]);
        let idx = parse_keypoint_dataset(&minimal_doc(kps, 1)).unwrap();
        assert_eq!(idx.annotations[0].keypoints.points[0], Keypoint { x: 10.0, y: 20.0, v: 2 });
        assert_eq!(idx.annotations[0].bbox, [1.0, 2.0, 30.0, 40.0]);
    }

    #[test]
    fn parse_errors_are_distinct() {
        match parse_keypoint_dataset(&minimal_doc(vec![0.0; 50], 1)) {
            Err(Error::KeypointLength { id: 7, len: 50, expected: 51 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_keypoint_dataset(&minimal_doc(vec![0.0; 51], 3)),
            Err(Error::DanglingImage { annotation: 7, image: 3 })
        ));
        assert!(matches!(
            parse_keypoint_dataset(r#"{"images": [], "categories": []}"#),
            Err(Error::MissingField(f)) if f == "annotations"
        ));
    }

    #[test]
    fn crowd_is_skipped() {
        let doc = json!({
            "images": [{"id": 1, "file_name": "a.png", "width": 4, "height": 4}],
            "annotations": [{"id": 1, "image_id": 1, "keypoints": vec![0.0; 51], "area": 1.0,
                             "bbox": [0, 0, 1, 1], "iscrowd": 1}],
            "categories": []
        });
        let idx = parse_keypoint_dataset(&doc.to_string()).unwrap();
        assert_eq!((idx.annotations.len(), idx.skipped_crowd), (0, 1));
    }

    #[test]
    fn crop_full_square_is_pure_scale() {
        let t = crop_transform([0.0, 0.0, 100.0, 100.0], 50, 50, 1.0).unwrap();
        assert_eq!(t.matrix(), [[0.5, 0.0, 0.0], [0.0, 0.5, 0.0]]);
        let padded = crop_transform([0.0, 0.0, 100.0, 100.0], 50, 50, CROP_PADDING).unwrap();
        assert!((padded.scale() - 0.4).abs() < 1e-15);
        let (cx, cy) = padded.apply(50.0, 50.0);
        assert!((cx - 25.0).abs() < 1e-9 && (cy - 25.0).abs() < 1e-9);
    }

    #[test]
    fn crop_corner_round_trip() {
        let bbox = [13.5, 7.25, 40.0, 90.0];
        let t = crop_transform(bbox, 64, 48, CROP_PADDING).unwrap();
        for (x, y) in [(13.5, 7.25), (53.5, 7.25), (13.5, 97.25), (53.5, 97.25)] {
            let (u, v) = t.apply(x, y);
            let (bx, by) = t.invert(u, v);
            assert!((bx - x).abs() < 1e-6 && (by - y).abs() < 1e-6);
        }
        let (u, v) = t.apply(13.5 + 20.0, 7.25 + 45.0);
        assert!((u - 24.0).abs() < 1e-6 && (v - 32.0).abs() < 1e-6);
    }

    #[test]
    fn crop_errors() {
        let img = Tensor::zeros(&[10, 10, 3]);
        assert!(matches!(crop_person(&img, [1.0, 1.0, 0.0, 5.0], 8, 8), Err(Error::DegenerateBox(_))));
        assert!(crop_person(&img, [20.0, 20.0, 5.0, 5.0], 8, 8).is_err());
    }

    #[test]
    fn crop_samples_image() {
        let img = Tensor::full(&[20, 20, 3], 0.5);
        let (out, _) = crop_person_padded(&img, [0.0, 0.0, 20.0, 20.0], 10, 10, 1.0).unwrap();
        assert!(out.data().iter().all(|v| (*v - 0.5).abs() < 1e-12));
        let (out, _) = crop_person(&img, [0.0, 0.0, 20.0, 20.0], 10, 10).unwrap();
        // padded border reads outside the image
        assert_eq!(out.at(&[0, 0, 0]), 0.0);
        assert!((out.at(&[5, 5, 0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synth_dataset(8, 64, 7).unwrap();
        let b = synth_dataset(8, 64, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.images.len(), a.index.annotations.len()), (8, 8));
        for ann in &a.index.annotations {
            assert_eq!(ann.keypoints.num_labelled(), 17);
            assert!(ann.keypoints.points.iter().all(|k| k.x >= 0.0 && k.y >= 0.0 && k.x < 64.0 && k.y < 64.0));
        }
        assert_ne!(a, synth_dataset(8, 64, 8).unwrap());
    }

    #[test]
    fn predictions_empty_and_precision() {
        assert_eq!(write_predictions(&[]), "[]");
        let p = PredictionInstance::new(3, vec![DecodedKeypoint { x: 1.2345678901, y: -0.5, score: 0.123456789 }]);
        let back = parse_predictions(&write_predictions(std::slice::from_ref(&p))).unwrap();
        assert_eq!(back, vec![p]);
    }
}
