//! Checkpoint directories: `manifest.json` plus `tensors.nswt`, a concatenation
//! of NSWT records in manifest order.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, Heads, ModelBundle};
use crate::error::{Error, Result};
use crate::tensor::io::{load_all, write_tensor};
use crate::tensor::{AdamConfig, AdamState, DType, Scalar, Tensor};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const TENSORS: &str = "tensors.nswt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub config: AdamConfig,
    pub lr: f64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    /// Number of completed epochs.
    pub epoch: usize,
    pub dtype: DType,
    pub encoder: EncoderConfig,
    pub heads: Heads,
    pub optimizer: Option<OptimizerMeta>,
    /// Names of the records in `tensors.nswt`, in file order.
    pub tensors: Vec<String>,
    /// Free-form run description (training config, method, ...).
    #[serde(default)]
    pub run: serde_json::Value,
}

pub struct Loaded<T> {
    pub manifest: Manifest,
    pub bundle: ModelBundle<T>,
    pub optimizer: Option<AdamState<T>>,
}

pub fn save<T: Scalar>(
    dir: &Path,
    bundle: &ModelBundle<T>,
    optimizer: Option<&AdamState<T>>,
    epoch: usize,
    run: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut named: Vec<(String, &Tensor<T>)> =
        bundle.params.names().iter().cloned().zip(bundle.params.tensors()).collect();
    let bn = bundle.bn.to_named();
    named.extend(bn.iter().map(|(n, t)| (n.clone(), t)));
    if let Some(opt) = optimizer {
        for (name, (m, v)) in bundle.params.names().iter().zip(opt.m.iter().zip(&opt.v)) {
            named.push((format!("adam.m.{name}"), m));
            named.push((format!("adam.v.{name}"), v));
        }
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        seed: bundle.seed,
        epoch,
        dtype: T::DTYPE,
        encoder: bundle.config.clone(),
        heads: bundle.heads.clone(),
        optimizer: optimizer.map(|o| OptimizerMeta { config: o.config, lr: o.lr, step: o.step }),
        tensors: named.iter().map(|(n, _)| n.clone()).collect(),
        run,
    };
    let mut w = BufWriter::new(fs::File::create(dir.join(TENSORS))?);
    for (_, t) in &named {
        write_tensor(&mut w, *t)?;
    }
    w.flush()?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let m: Manifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(Error::Format { path, detail: format!("unsupported schema_version {}", m.schema_version) });
    }
    Ok(m)
}

pub fn load<T: Scalar>(dir: &Path) -> Result<Loaded<T>> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(TENSORS);
    let records = load_all(&path)?;
    if records.len() != manifest.tensors.len() {
        return Err(Error::Format {
            path,
            detail: format!("manifest lists {} tensors, file holds {}", manifest.tensors.len(), records.len()),
        });
    }
    let mut by_name: HashMap<String, Tensor<T>> =
        manifest.tensors.iter().cloned().zip(records.into_iter().map(|r| r.into_tensor())).collect();

    let mut bundle = ModelBundle::<T>::new(manifest.encoder.clone(), manifest.heads.clone(), manifest.seed)?;
    let take = |by_name: &mut HashMap<String, Tensor<T>>, name: &str| {
        by_name.remove(name).ok_or_else(|| Error::Format {
            path: dir.join(TENSORS),
            detail: format!("missing tensor {name}"),
        })
    };
    let mut params = Vec::with_capacity(bundle.params.len());
    for name in bundle.params.names().to_vec() {
        params.push((name.clone(), take(&mut by_name, &name)?));
    }
    bundle.params.assign(params)?;
    bundle.bn.assign(&by_name)?;

    let optimizer = match &manifest.optimizer {
        None => None,
        Some(meta) => {
            let mut st = AdamState::new(meta.config, bundle.params.tensors());
            st.lr = meta.lr;
            st.step = meta.step;
            for (i, name) in bundle.params.names().iter().enumerate() {
                st.m[i] = take(&mut by_name, &format!("adam.m.{name}"))?;
                st.v[i] = take(&mut by_name, &format!("adam.v.{name}"))?;
            }
            Some(st)
        }
    };
    Ok(Loaded { manifest, bundle, optimizer })
}
