//! On-disk dataset format.
//!
//! A dataset is a directory with one sub-directory per case. Each case holds a
//! `manifest.json` and one `slice_<index>.arr` per slice. An `.arr` file is a
//! four-line ASCII header followed by the raw element bytes:
//!
//! ```text
//! dtype f64
//! shape 256 256
//! endian little
//! pixel_size_mm 0.86
//! ```
//!
//! Supported dtypes are `f64`, `f32`, `i16` and `u16`; writers emit `f64` little
//! endian so that an in-memory dataset round-trips bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::types::{ImageSlice, LandmarkAnnotation, Volume};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// A decoded array file.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayFile {
    pub shape: Vec<usize>,
    pub pixel_size_mm: f64,
    pub data: Vec<f64>,
}

impl ArrayFile {
    pub fn into_array2(self, path: &Path) -> Result<Array2<f64>> {
        match self.shape.as_slice() {
            [h, w] => Ok(Array2::from_shape_vec((*h, *w), self.data).expect("shape checked")),
            s => Err(Error::format(path, format!("expected 2D array, got shape {s:?}"))),
        }
    }

    pub fn into_array3(self, path: &Path) -> Result<Array3<f64>> {
        match self.shape.as_slice() {
            [c, h, w] => Ok(Array3::from_shape_vec((*c, *h, *w), self.data).expect("shape checked")),
            s => Err(Error::format(path, format!("expected 3D array, got shape {s:?}"))),
        }
    }
}

pub fn write_array(path: &Path, shape: &[usize], data: &[f64], pixel_size_mm: f64) -> Result<()> {
    assert_eq!(shape.iter().product::<usize>(), data.len());
    let shape_str: Vec<String> = shape.iter().map(usize::to_string).collect();
    let mut buf = format!(
        "dtype f64\nshape {}\nendian little\npixel_size_mm {}\n",
        shape_str.join(" "),
        pixel_size_mm
    )
    .into_bytes();
    buf.reserve(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn write_array2(path: &Path, a: &Array2<f64>, pixel_size_mm: f64) -> Result<()> {
    let a = a.as_standard_layout();
    write_array(path, a.shape(), a.as_slice().expect("standard layout"), pixel_size_mm)
}

pub fn write_array3(path: &Path, a: &Array3<f64>, pixel_size_mm: f64) -> Result<()> {
    let a = a.as_standard_layout();
    write_array(path, a.shape(), a.as_slice().expect("standard layout"), pixel_size_mm)
}

pub fn read_array(path: &Path) -> Result<ArrayFile> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(f);
    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    for _ in 0..4 {
        let mut line = String::new();
        reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let line = line.trim_end();
        let (k, v) = line
            .split_once(' ')
            .ok_or_else(|| Error::format(path, format!("bad header line {line:?}")))?;
        fields.insert(k.to_string(), v.trim().to_string());
    }
    let get = |k: &str| {
        fields
            .get(k)
            .ok_or_else(|| Error::format(path, format!("missing header field {k}")))
    };
    let dtype = get("dtype")?.as_str();
    let little = match get("endian")?.as_str() {
        "little" => true,
        "big" => false,
        e => return Err(Error::format(path, format!("unknown endianness {e}"))),
    };
    let shape: Vec<usize> = get("shape")?
        .split_whitespace()
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(path, format!("bad shape: {e}")))?;
    let pixel_size_mm: f64 = get("pixel_size_mm")?
        .parse()
        .map_err(|e| Error::format(path, format!("bad pixel size: {e}")))?;
    let n: usize = shape.iter().product();
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;

    macro_rules! decode {
        ($t:ty, $w:expr) => {{
            if bytes.len() != n * $w {
                return Err(Error::format(
                    path,
                    format!("expected {} data bytes, found {}", n * $w, bytes.len()),
                ));
            }
            bytes
                .chunks_exact($w)
                .map(|c| {
                    let arr: [u8; $w] = c.try_into().unwrap();
                    (if little { <$t>::from_le_bytes(arr) } else { <$t>::from_be_bytes(arr) }) as f64
                })
                .collect::<Vec<f64>>()
        }};
    }
    let data = match dtype {
        "f64" => decode!(f64, 8),
        "f32" => decode!(f32, 4),
        "i16" => decode!(i16, 2),
        "u16" => decode!(u16, 2),
        d => return Err(Error::format(path, format!("unsupported dtype {d}"))),
    };
    Ok(ArrayFile {
        shape,
        pixel_size_mm,
        data,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestAnnotation {
    pub slice: usize,
    pub landmark: [f64; 2],
    pub displacement: [f64; 2],
}

/// Per-case JSON manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub case_id: String,
    pub is_mls: bool,
    pub case_mls_mm: f64,
    pub annotations: Vec<ManifestAnnotation>,
}

impl From<&Volume> for Manifest {
    fn from(v: &Volume) -> Self {
        let annotations = v
            .annotations
            .iter()
            .flat_map(|(slice, anns)| {
                anns.iter().map(move |a| ManifestAnnotation {
                    slice: *slice,
                    landmark: a.landmark,
                    displacement: a.displacement,
                })
            })
            .collect();
        Manifest {
            case_id: v.case_id.clone(),
            is_mls: v.is_mls,
            case_mls_mm: v.case_mls_mm,
            annotations,
        }
    }
}

pub fn slice_file_name(index: usize) -> String {
    format!("slice_{index}.arr")
}

pub fn save_volume(dir: &Path, volume: &Volume) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest::from(volume);
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    for s in &volume.slices {
        write_array2(&dir.join(slice_file_name(s.slice_index)), &s.pixels, s.pixel_size_mm)?;
    }
    Ok(())
}

pub fn load_volume(dir: &Path) -> Result<Volume> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;

    let mut indexed: Vec<(usize, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(idx) = name
            .strip_prefix("slice_")
            .and_then(|s| s.strip_suffix(".arr"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            indexed.push((idx, entry.path()));
        }
    }
    indexed.sort();
    let mut slices = Vec::with_capacity(indexed.len());
    for (idx, p) in indexed {
        let arr = read_array(&p)?;
        let px = arr.pixel_size_mm;
        let pixels = arr.into_array2(&p)?;
        slices.push(ImageSlice::new(pixels, px, idx).map_err(|e| Error::format(&p, e.to_string()))?);
    }

    let mut annotations: BTreeMap<usize, Vec<LandmarkAnnotation>> = BTreeMap::new();
    for a in manifest.annotations {
        annotations.entry(a.slice).or_default().push(LandmarkAnnotation {
            landmark: a.landmark,
            displacement: a.displacement,
        });
    }
    let volume = Volume {
        case_id: manifest.case_id,
        slices,
        annotations,
        is_mls: manifest.is_mls,
        case_mls_mm: manifest.case_mls_mm,
    };
    volume
        .validate()
        .map_err(|e| Error::format(dir, e.to_string()))?;
    Ok(volume)
}

/// A collection of cases, ordered by case id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub cases: Vec<Volume>,
}

impl Dataset {
    pub fn new(mut cases: Vec<Volume>) -> Self {
        cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        Self { cases }
    }

    /// Loads every sub-directory that contains a manifest; others (such as
    /// `truth/`) are ignored.
    pub fn load(root: &Path) -> Result<Self> {
        let mut dirs = Vec::new();
        for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
            let entry = entry.map_err(|e| Error::io(root, e))?;
            let p = entry.path();
            if p.is_dir() && p.join(MANIFEST_FILE).is_file() {
                dirs.push(p);
            }
        }
        dirs.sort();
        let cases = dirs
            .iter()
            .map(|d| load_volume(d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(cases))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        for v in &self.cases {
            save_volume(&root.join(&v.case_id), v)?;
        }
        Ok(())
    }

    pub fn case(&self, case_id: &str) -> Option<&Volume> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }

    pub fn positives(&self) -> impl Iterator<Item = &Volume> {
        self.cases.iter().filter(|c| c.is_mls)
    }

    pub fn negatives(&self) -> impl Iterator<Item = &Volume> {
        self.cases.iter().filter(|c| !c.is_mls)
    }

    pub fn slice_count(&self) -> usize {
        self.cases.iter().map(|c| c.slices.len()).sum()
    }

    /// Image size shared by all slices, if uniform.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        let mut dims = self
            .cases
            .iter()
            .flat_map(|c| c.slices.iter().map(|s| s.pixels.dim()));
        let first = dims.next()?;
        dims.all(|d| d == first).then_some(first)
    }
}
