//! On-disk dataset directory: a `manifest` of `key=value` lines plus one
//! `clip_<i>.csv` per clip with columns `frame, f0..f{D-1}, z0..z{M-1}`.
//!
//! Feature values are written with 17 significant digits so a write/read
//! cycle is lossless.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::data::{compute_stats, Clip, Dataset, DatasetSpec, EventClassSpec};
use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, LabelGrid};
use crate::kv::KvMap;

pub const MANIFEST_FILE: &str = "manifest";
const FORMAT_VERSION: u32 = 1;

pub fn clip_file_name(index: usize) -> String {
    format!("clip_{index}.csv")
}

/// Decimal text with 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn join_f64(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn manifest_for(ds: &Dataset) -> KvMap {
    let spec = &ds.spec;
    let stats = compute_stats(ds);
    let mut kv = KvMap::default();
    kv.insert("format", FORMAT_VERSION);
    kv.insert("clip_length_s", format!("{:?}", spec.clip_length_s));
    kv.insert("frame_hop_s", format!("{:?}", spec.frame_hop_s));
    kv.insert("frame_len_s", format!("{:?}", spec.frame_len_s));
    kv.insert("clips", ds.clips.len());
    kv.insert("feature_dim", spec.feature_dim);
    kv.insert("noise_sigma", format!("{:?}", spec.noise_sigma));
    kv.insert("seed", spec.seed);
    kv.insert("frames_per_clip", spec.frames_per_clip());
    kv.insert("classes", spec.n_classes());
    kv.insert("total_active", stats.total_active);
    kv.insert("total_inactive", stats.total_inactive);
    for (m, c) in spec.classes.iter().enumerate() {
        kv.insert(format!("class.{m:02}.name"), &c.name);
        kv.insert(
            format!("class.{m:02}.mean_duration_s"),
            format!("{:?}", c.mean_duration_s),
        );
        kv.insert(
            format!("class.{m:02}.rate_per_clip"),
            format!("{:?}", c.rate_per_clip),
        );
        kv.insert(
            format!("class.{m:02}.amplitude"),
            format!("{:?}", c.amplitude),
        );
        kv.insert(format!("class.{m:02}.signature"), join_f64(&c.signature));
        kv.insert(format!("class.{m:02}.instances"), ds.instances[m]);
        kv.insert(
            format!("class.{m:02}.active_frames"),
            stats.per_class_active_frames[m],
        );
    }
    kv
}

fn clip_csv(clip: &Clip) -> String {
    let (frames, dim) = (clip.features.n_frames(), clip.features.dim());
    let classes = clip.labels.n_classes();
    let mut out = String::with_capacity(frames * (dim * 24 + classes * 2 + 8));
    out.push_str("frame");
    for d in 0..dim {
        let _ = write!(out, ",f{d}");
    }
    for m in 0..classes {
        let _ = write!(out, ",z{m}");
    }
    out.push('\n');
    let x = clip.features.values();
    let z = clip.labels.values();
    for n in 0..frames {
        let _ = write!(out, "{n}");
        for v in x.row(n) {
            out.push(',');
            out.push_str(&format_f64(*v));
        }
        for v in z.row(n) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("# synthetic sound event dataset\n");
    manifest.push_str(&manifest_for(ds).to_text());
    write_file(&dir.join(MANIFEST_FILE), &manifest)?;
    for (i, clip) in ds.clips.iter().enumerate() {
        write_file(&dir.join(clip_file_name(i)), &clip_csv(clip))?;
    }
    Ok(())
}

fn parse_f64_list(path: &Path, key: &str, raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::format(path, format!("{key}: {e}")))
        })
        .collect()
}

fn spec_from_manifest(path: &Path, kv: &KvMap) -> Result<(DatasetSpec, Vec<u64>)> {
    let wrap = |e: Error| Error::format(path, e.to_string());
    let version: u32 = kv.parse_value("format").map_err(wrap)?;
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported format {version}")));
    }
    let n_classes: usize = kv.parse_value("classes").map_err(wrap)?;
    let mut classes = Vec::with_capacity(n_classes);
    let mut instances = Vec::with_capacity(n_classes);
    for m in 0..n_classes {
        let key = |field: &str| format!("class.{m:02}.{field}");
        classes.push(EventClassSpec {
            name: kv.require(&key("name")).map_err(wrap)?.to_string(),
            mean_duration_s: kv.parse_value(&key("mean_duration_s")).map_err(wrap)?,
            rate_per_clip: kv.parse_value(&key("rate_per_clip")).map_err(wrap)?,
            amplitude: kv.parse_value(&key("amplitude")).map_err(wrap)?,
            signature: parse_f64_list(
                path,
                &key("signature"),
                kv.require(&key("signature")).map_err(wrap)?,
            )?,
        });
        instances.push(kv.parse_value(&key("instances")).map_err(wrap)?);
    }
    let spec = DatasetSpec {
        classes,
        clip_length_s: kv.parse_value("clip_length_s").map_err(wrap)?,
        frame_hop_s: kv.parse_value("frame_hop_s").map_err(wrap)?,
        frame_len_s: kv.parse_value("frame_len_s").map_err(wrap)?,
        clips: kv.parse_value("clips").map_err(wrap)?,
        feature_dim: kv.parse_value("feature_dim").map_err(wrap)?,
        noise_sigma: kv.parse_value("noise_sigma").map_err(wrap)?,
        seed: kv.parse_value("seed").map_err(wrap)?,
    };
    spec.validate().map_err(wrap)?;
    Ok((spec, instances))
}

fn read_clip(path: &Path, frames: usize, dim: usize, classes: usize) -> Result<Clip> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty file"))?;
    let mut expected = vec!["frame".to_string()];
    expected.extend((0..dim).map(|d| format!("f{d}")));
    expected.extend((0..classes).map(|m| format!("z{m}")));
    if header.split(',').ne(expected.iter().map(String::as_str)) {
        return Err(Error::format(path, "unexpected header"));
    }
    let mut x = Array2::zeros((frames, dim));
    let mut z = Array2::zeros((frames, classes));
    let mut rows = 0;
    for (n, line) in lines.enumerate() {
        if n >= frames {
            return Err(Error::format(path, format!("more than {frames} rows")));
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 1 + dim + classes {
            return Err(Error::format(path, format!("row {n}: wrong column count")));
        }
        if fields[0].parse::<usize>().ok() != Some(n) {
            return Err(Error::format(path, format!("row {n}: bad frame index")));
        }
        for d in 0..dim {
            x[[n, d]] = fields[1 + d]
                .parse()
                .map_err(|e| Error::format(path, format!("row {n}: {e}")))?;
        }
        for m in 0..classes {
            z[[n, m]] = match fields[1 + dim + m] {
                "0" => 0,
                "1" => 1,
                other => return Err(Error::format(path, format!("row {n}: label {other:?}"))),
            };
        }
        rows += 1;
    }
    if rows != frames {
        return Err(Error::format(
            path,
            format!("expected {frames} rows, found {rows}"),
        ));
    }
    Ok(Clip {
        features: FeatureGrid::new(x).map_err(|e| Error::format(path, e.to_string()))?,
        labels: LabelGrid::new(z).map_err(|e| Error::format(path, e.to_string()))?,
    })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path: PathBuf = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let kv = KvMap::parse(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let (spec, instances) = spec_from_manifest(&manifest_path, &kv)?;
    let frames = spec.frames_per_clip();
    let clips = (0..spec.clips)
        .map(|i| {
            read_clip(
                &dir.join(clip_file_name(i)),
                frames,
                spec.feature_dim,
                spec.n_classes(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec,
        clips,
        instances,
    })
}
