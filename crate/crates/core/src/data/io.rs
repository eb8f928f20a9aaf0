//! Dataset directory format.
//!
//! ```text
//! index.json            layout, shapes and sample list
//! samples/000000.bin    one blob per sample
//! samples/000000_prev.png, _curr.png, _seg.png   optional previews
//! ```
//!
//! Each blob is the fields listed in the index, back to back, row-major,
//! little-endian, at the recorded byte offsets.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use super::{class_color, Dataset, FramePairSample, SceneSpec};
use crate::error::{Error, Result};
use crate::losses::{ClassMap, DepthMap};
use crate::tensor::Tensor;

pub const INDEX_FILE: &str = "index.json";
const FORMAT: &str = "mtl-synthetic";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default)]
pub struct WriteOptions {
    /// Also write PNG previews of both frames and the segmentation.
    pub png: bool,
    /// Generator parameters, recorded in the index for reference.
    pub spec: Option<SceneSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    format: String,
    version: u32,
    endianness: String,
    order: String,
    height: usize,
    width: usize,
    num_classes: usize,
    sample_bytes: usize,
    fields: Vec<Field>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<SceneSpec>,
    samples: Vec<String>,
}

#[derive(Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct Field {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

fn layout(h: usize, w: usize) -> (Vec<Field>, usize) {
    let specs: [(&str, &str, Vec<usize>, usize); 5] = [
        ("frame_prev", "f64", vec![3, h, w], 8),
        ("frame_curr", "f64", vec![3, h, w], 8),
        ("depth", "f64", vec![1, h, w], 8),
        ("seg", "u8", vec![1, h, w], 1),
        ("motion", "u8", vec![1, h, w], 1),
    ];
    let mut offset = 0;
    let fields = specs
        .into_iter()
        .map(|(name, dtype, shape, size)| {
            let f = Field {
                name: name.into(),
                dtype: dtype.into(),
                offset,
                shape: shape.clone(),
            };
            offset += shape.iter().product::<usize>() * size;
            f
        })
        .collect();
    (fields, offset)
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> Error + '_ {
    move |e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    }
}

fn to_rgb8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_png(
    path: &Path,
    h: usize,
    w: usize,
    pixel: impl Fn(usize, usize) -> [u8; 3],
) -> Result<()> {
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Rgb(pixel(y as usize, x as usize))
    });
    img.save(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn frame_png(path: &Path, frame: &Tensor) -> Result<()> {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let d = frame.data();
    save_png(path, h, w, |y, x| {
        let p = y * w + x;
        [
            to_rgb8(d[p]),
            to_rgb8(d[h * w + p]),
            to_rgb8(d[2 * h * w + p]),
        ]
    })
}

/// Writes `dataset` under `dir`, creating it if needed.
pub fn write_dataset(dataset: &Dataset, dir: &Path, opts: &WriteOptions) -> Result<()> {
    let (h, w) = (dataset.height, dataset.width);
    let samples_dir = dir.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    let (fields, sample_bytes) = layout(h, w);
    let mut names = Vec::with_capacity(dataset.samples.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.frame_curr.shape() != [3, h, w] {
            return Err(Error::Data(format!(
                "sample {i} has frame shape {:?}, expected [3, {h}, {w}]",
                s.frame_curr.shape()
            )));
        }
        let mut buf = Vec::with_capacity(sample_bytes);
        for t in [&s.frame_prev, &s.frame_curr] {
            t.data()
                .iter()
                .for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        }
        s.depth
            .data()
            .iter()
            .for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        buf.extend_from_slice(s.seg.data());
        buf.extend_from_slice(s.motion.data());
        debug_assert_eq!(buf.len(), sample_bytes);
        let name = format!("samples/{i:06}.bin");
        let path = dir.join(&name);
        fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        names.push(name);

        if opts.png {
            frame_png(&samples_dir.join(format!("{i:06}_prev.png")), &s.frame_prev)?;
            frame_png(&samples_dir.join(format!("{i:06}_curr.png")), &s.frame_curr)?;
            let seg = s.seg.data();
            save_png(
                &samples_dir.join(format!("{i:06}_seg.png")),
                h,
                w,
                |y, x| class_color(seg[y * w + x], dataset.num_classes).map(to_rgb8),
            )?;
        }
    }
    let index = Index {
        format: FORMAT.into(),
        version: VERSION,
        endianness: "little".into(),
        order: "row-major, channel-first".into(),
        height: h,
        width: w,
        num_classes: dataset.num_classes,
        sample_bytes,
        fields,
        spec: opts.spec.clone(),
        samples: names,
    };
    let path = dir.join(INDEX_FILE);
    let mut json = serde_json::to_string_pretty(&index).map_err(json_err(&path))?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

fn read_f64(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Loads a dataset written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join(INDEX_FILE);
    if !index_path.is_file() {
        return Err(Error::Data(format!(
            "no index: {} does not exist",
            index_path.display()
        )));
    }
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: Index = serde_json::from_str(&text).map_err(json_err(&index_path))?;
    let bad = |msg: String| Error::Data(format!("{}: {msg}", index_path.display()));
    if index.format != FORMAT || index.version != VERSION {
        return Err(bad(format!(
            "unsupported format {} v{}",
            index.format, index.version
        )));
    }
    if index.endianness != "little" {
        return Err(bad(format!("unsupported endianness {}", index.endianness)));
    }
    let (h, w) = (index.height, index.width);
    let (fields, sample_bytes) = layout(h, w);
    if index.fields != fields || index.sample_bytes != sample_bytes {
        return Err(bad(format!("field layout does not match a {h}x{w} sample")));
    }
    if index.samples.is_empty() {
        return Err(bad("index lists no samples".into()));
    }
    let plane = h * w;
    let mut samples = Vec::with_capacity(index.samples.len());
    for name in &index.samples {
        let path: PathBuf = dir.join(name);
        if !path.is_file() {
            return Err(Error::Data(format!(
                "missing sample payload {}",
                path.display()
            )));
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != sample_bytes {
            return Err(Error::Data(format!(
                "{}: expected {sample_bytes} bytes, found {}",
                path.display(),
                bytes.len()
            )));
        }
        let at = |f: usize, size: usize| {
            let off = fields[f].offset;
            let len: usize = fields[f].shape.iter().product::<usize>() * size;
            &bytes[off..off + len]
        };
        let ctx = |e: Error| Error::Data(format!("{}: {e}", path.display()));
        samples.push(FramePairSample {
            frame_prev: Tensor::new(vec![3, h, w], read_f64(at(0, 8)))
                .map_err(|e| ctx(e.into()))?,
            frame_curr: Tensor::new(vec![3, h, w], read_f64(at(1, 8)))
                .map_err(|e| ctx(e.into()))?,
            depth: DepthMap::depth([1, h, w], read_f64(at(2, 8))).map_err(ctx)?,
            seg: ClassMap::classes([1, h, w], at(3, 1).to_vec(), index.num_classes).map_err(ctx)?,
            motion: ClassMap::classes([1, h, w], at(4, 1).to_vec(), 2).map_err(ctx)?,
        });
        debug_assert_eq!(samples.last().unwrap().seg.len(), plane);
    }
    Ok(Dataset {
        height: h,
        width: w,
        num_classes: index.num_classes,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    fn dataset() -> Dataset {
        let spec = SceneSpec {
            height: 16,
            width: 24,
            min_size: 2,
            max_size: 4,
            seed: 3,
            ..SceneSpec::default()
        };
        generate_dataset(&spec, 3).unwrap()
    }

    #[test]
    fn roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset();
        write_dataset(
            &ds,
            dir.path(),
            &WriteOptions {
                png: true,
                spec: None,
            },
        )
        .unwrap();
        assert!(dir.path().join("samples/000002_seg.png").is_file());
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn empty_directory_has_no_index() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("no index"), "{err}");
    }

    #[test]
    fn missing_payload_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&dataset(), dir.path(), &WriteOptions::default()).unwrap();
        fs::remove_file(dir.path().join("samples/000001.bin")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("000001.bin"), "{err}");
    }

    #[test]
    fn size_and_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&dataset(), dir.path(), &WriteOptions::default()).unwrap();
        let blob = dir.path().join("samples/000000.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 1]).unwrap();
        assert!(load_dataset(dir.path())
            .unwrap_err()
            .to_string()
            .contains("expected"));

        fs::write(&blob, &bytes).unwrap();
        let idx = dir.path().join(INDEX_FILE);
        let text = fs::read_to_string(&idx)
            .unwrap()
            .replace("\"height\": 16", "\"height\": 8");
        fs::write(&idx, text).unwrap();
        assert!(load_dataset(dir.path()).is_err());

        fs::write(&idx, "{ not json").unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}
