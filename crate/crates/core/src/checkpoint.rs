//! Checkpoint directories: `manifest.txt` of `key=value` lines next to one
//! PTNSR1 file per parameter and the two projection tensors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gaussian::Projection;
use crate::linalg::Matrix;
use crate::net::{LatentStage, Model, ModelConfig};
use crate::ptnsr;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
const FORMAT: &str = "pepnet-checkpoint-1";

pub fn save(model: &Model, dir: &Path) -> Result<()> {
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir).map_err(|e| Error::io(&params_dir, e))?;
    let c = model.config();
    let p = model.projection();
    let stage = match model.stage() {
        LatentStage::Identity => "identity",
        LatentStage::Fitted => "fitted",
    };
    let mut lines = vec![
        format!("format={FORMAT}"),
        format!("D={}", c.latent_dim),
        format!("k={}", c.k),
        format!("use_ilsr={}", c.use_ilsr),
        format!("image_size={}", c.image_size),
        format!("base_channels={}", c.base_channels),
        format!("depth={}", c.depth),
        format!("adapter_depth={}", c.adapter_depth),
        format!("num_classes={}", c.num_classes),
        format!("stage={stage}"),
        "pca_mean=pca_mean.ptnsr".to_string(),
        "pca_basis=pca_basis.ptnsr".to_string(),
    ];
    let mean = Tensor::new(vec![p.dim()], p.mean().iter().map(|&v| v as f32).collect())?;
    let basis = Tensor::new(
        vec![p.dim(), p.k()],
        p.basis().as_slice().iter().map(|&v| v as f32).collect(),
    )?;
    ptnsr::save(dir.join("pca_mean.ptnsr"), &mean)?;
    ptnsr::save(dir.join("pca_basis.ptnsr"), &basis)?;
    for param in model.params() {
        let rel = format!("params/{}.ptnsr", param.name);
        ptnsr::save(dir.join(&rel), &param.value)?;
        lines.push(format!("param.{}={rel}", param.name));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, lines.join("\n") + "\n").map_err(|e| Error::io(&path, e))
}

fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::format("manifest", format!("line {}: expected key=value", i + 1))
        })?;
        if map
            .insert(k.trim().to_string(), v.trim().to_string())
            .is_some()
        {
            return Err(Error::format("manifest", format!("duplicate key {k}")));
        }
    }
    Ok(map)
}

fn field<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = map
        .get(key)
        .ok_or_else(|| Error::format("manifest", format!("missing key {key}")))?;
    raw.parse()
        .map_err(|_| Error::format("manifest", format!("invalid value {raw:?} for {key}")))
}

pub fn load(dir: &Path) -> Result<Model> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let map = parse_manifest(&text)?;
    let format: String = field(&map, "format")?;
    if format != FORMAT {
        return Err(Error::format(
            "manifest",
            format!("unsupported checkpoint format {format}"),
        ));
    }
    let config = ModelConfig {
        image_size: field(&map, "image_size")?,
        base_channels: field(&map, "base_channels")?,
        depth: field(&map, "depth")?,
        latent_dim: field(&map, "D")?,
        k: field(&map, "k")?,
        num_classes: field(&map, "num_classes")?,
        use_ilsr: field(&map, "use_ilsr")?,
        adapter_depth: field(&map, "adapter_depth")?,
    };
    let mut model = Model::new(config, 0)?;
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    for name in &names {
        let rel: String = field(&map, &format!("param.{name}"))?;
        model.set_param(name, ptnsr::load(dir.join(rel))?)?;
    }
    let extra = map
        .keys()
        .filter_map(|k| k.strip_prefix("param."))
        .find(|n| !names.iter().any(|m| m == n));
    if let Some(name) = extra {
        return Err(Error::format(
            "manifest",
            format!("parameter {name} does not belong to this architecture"),
        ));
    }
    let stage: String = field(&map, "stage")?;
    match stage.as_str() {
        "identity" => {}
        "fitted" => {
            let mean = ptnsr::load(dir.join(field::<String>(&map, "pca_mean")?))?;
            let basis = ptnsr::load(dir.join(field::<String>(&map, "pca_basis")?))?;
            let (d, k) = (config.latent_dim, config.k);
            if mean.shape() != [d] || basis.shape() != [d, k] {
                return Err(Error::shape(
                    "checkpoint projection",
                    format!(
                        "mean {:?} and basis {:?} for D={d}, k={k}",
                        mean.shape(),
                        basis.shape()
                    ),
                ));
            }
            let basis = Matrix::from_vec(d, k, basis.data().iter().map(|&v| v as f64).collect())?;
            let projection =
                Projection::new(mean.data().iter().map(|&v| v as f64).collect(), basis)?;
            model.install_projection(projection)?;
        }
        other => return Err(Error::format("manifest", format!("unknown stage {other}"))),
    }
    Ok(model)
}
