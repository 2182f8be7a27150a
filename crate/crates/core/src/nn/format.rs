//! On-disk model bundles.
//!
//! A bundle is a JSON manifest plus a sibling blob of little-endian `f64`
//! values. The manifest lists the layers in order and one tensor entry per
//! parameter array; the blob holds those tensors concatenated in manifest
//! order.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::image::Geometry;

use super::{LayerSpec, ModelBundle};

pub const MODEL_FORMAT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "cfx-model";

fn blob_path(manifest: &Path, name: &str) -> PathBuf {
    manifest
        .parent()
        .map(|p| p.join(name))
        .unwrap_or_else(|| PathBuf::from(name))
}

fn layer_json(spec: &LayerSpec) -> Value {
    serde_json::to_value(spec).expect("layer spec serializes")
}

/// Writes `path` (manifest) and `<stem>.bin` (weights) next to it.
pub fn save_model(model: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Config(format!("invalid model path {}", path.display())))?;
    let blob_name = format!("{stem}.bin");

    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    for (section, layers) in [("extractor", model.extractor()), ("head", model.head())] {
        for (i, layer) in layers.iter().enumerate() {
            if !layer.has_parameters() {
                continue;
            }
            for (kind, values) in [("weight", &layer.weights), ("bias", &layer.bias)] {
                tensors.push(json!({
                    "name": format!("{section}.{i}.{kind}"),
                    "count": values.len(),
                }));
                for v in values.iter() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let g = model.input_geometry();
    let manifest = json!({
        "format": FORMAT_TAG,
        "version": MODEL_FORMAT_VERSION,
        "input": { "height": g.height, "width": g.width, "channels": g.channels },
        "classes": model.classes(),
        "extractor": model.extractor().iter().map(|l| layer_json(&l.spec)).collect::<Vec<_>>(),
        "head": model.head().iter().map(|l| layer_json(&l.spec)).collect::<Vec<_>>(),
        "weights_file": blob_name,
        "tensors": tensors,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    let bp = blob_path(path, &blob_name);
    fs::write(&bp, blob).map_err(|e| Error::io(bp, e))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Value =
        serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
    let root = manifest
        .as_object()
        .ok_or_else(|| Error::format("manifest", "expected a JSON object"))?;

    let tag = get_str(root, "format", "format")?;
    if tag != FORMAT_TAG {
        return Err(Error::format("format", format!("expected `{FORMAT_TAG}`, got `{tag}`")));
    }
    let version = get_usize(root, "version", "version")? as u32;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: MODEL_FORMAT_VERSION,
        });
    }
    let input = get_object(root, "input", "input")?;
    let geometry = Geometry::new(
        get_usize(input, "height", "input.height")?,
        get_usize(input, "width", "input.width")?,
        get_usize(input, "channels", "input.channels")?,
    );
    let classes = get_usize(root, "classes", "classes")?;
    let extractor = parse_layers(root, "extractor")?;
    let head = parse_layers(root, "head")?;
    let mut model = ModelBundle::zeroed(geometry, classes, &extractor, &head)?;

    let blob_name = get_str(root, "weights_file", "weights_file")?;
    let bp = blob_path(path, blob_name);
    let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;

    let tensors = root
        .get("tensors")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::format("tensors", "missing or not an array"))?;
    let mut declared = Vec::with_capacity(tensors.len());
    for (i, t) in tensors.iter().enumerate() {
        let field = format!("tensors[{i}]");
        let obj = t
            .as_object()
            .ok_or_else(|| Error::format(&field, "expected an object"))?;
        let name = get_str(obj, "name", &format!("{field}.name"))?.to_string();
        let count = get_usize(obj, "count", &format!("{field}.count"))?;
        declared.push((name, count));
    }
    let expected: usize = declared.iter().map(|(_, c)| c).sum();
    if blob.len() != expected * 8 {
        return Err(Error::WeightCount {
            expected,
            actual: blob.len() / 8,
        });
    }

    let mut values = blob
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")));
    let mut declared = declared.into_iter().enumerate();
    let n_extractor = model.extractor().len();
    for (li, layer) in model.layers_mut().enumerate() {
        if !layer.has_parameters() {
            continue;
        }
        let (section, local) = if li < n_extractor {
            ("extractor", li)
        } else {
            ("head", li - n_extractor)
        };
        for kind in ["weight", "bias"] {
            let want_name = format!("{section}.{local}.{kind}");
            let (ti, (name, count)) = declared.next().ok_or_else(|| {
                Error::format("tensors", format!("missing entry for `{want_name}`"))
            })?;
            if name != want_name {
                return Err(Error::format(
                    format!("tensors[{ti}].name"),
                    format!("expected `{want_name}`, got `{name}`"),
                ));
            }
            let target = if kind == "weight" {
                &mut layer.weights
            } else {
                &mut layer.bias
            };
            if count != target.len() {
                return Err(Error::format(
                    format!("tensors[{ti}].count"),
                    format!("layer `{want_name}` needs {} values, manifest says {count}", target.len()),
                ));
            }
            for slot in target.iter_mut() {
                *slot = values.next().expect("length checked");
            }
        }
    }
    if let Some((ti, (name, _))) = declared.next() {
        return Err(Error::format(
            format!("tensors[{ti}].name"),
            format!("unexpected tensor `{name}`"),
        ));
    }
    Ok(model)
}

fn parse_layers(root: &Map<String, Value>, section: &str) -> Result<Vec<LayerSpec>> {
    let items = root
        .get(section)
        .and_then(Value::as_array)
        .ok_or_else(|| Error::format(section, "missing or not an array"))?;
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let field = format!("{section}[{i}]");
            let obj = item
                .as_object()
                .ok_or_else(|| Error::format(&field, "expected an object"))?;
            let kind = get_str(obj, "kind", &format!("{field}.kind"))?;
            let param = |name: &str| get_usize(obj, name, &format!("{field}.{name}"));
            Ok(match kind {
                "conv2d" => LayerSpec::Conv2d {
                    out_channels: param("out_channels")?,
                    kernel: param("kernel")?,
                    stride: param("stride")?,
                    padding: param("padding")?,
                },
                "relu" => LayerSpec::Relu,
                "maxpool2d" => LayerSpec::MaxPool2d {
                    window: param("window")?,
                    stride: param("stride")?,
                },
                "flatten" => LayerSpec::Flatten,
                "dense" => LayerSpec::Dense {
                    outputs: param("outputs")?,
                },
                "log-softmax" => LayerSpec::LogSoftmax,
                other => {
                    return Err(Error::UnsupportedLayer {
                        kind: other.to_string(),
                        reason: format!("unknown layer kind in `{field}`"),
                    })
                }
            })
        })
        .collect()
}

fn get_object<'a>(obj: &'a Map<String, Value>, key: &str, field: &str) -> Result<&'a Map<String, Value>> {
    obj.get(key)
        .and_then(Value::as_object)
        .ok_or_else(|| Error::format(field, "missing or not an object"))
}

fn get_str<'a>(obj: &'a Map<String, Value>, key: &str, field: &str) -> Result<&'a str> {
    obj.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| Error::format(field, "missing or not a string"))
}

fn get_usize(obj: &Map<String, Value>, key: &str, field: &str) -> Result<usize> {
    obj.get(key)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| Error::format(field, "missing or not a nonnegative integer"))
}
