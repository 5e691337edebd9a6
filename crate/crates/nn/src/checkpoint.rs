//! Single-file model archives: `config.json`, one little-endian f32 file per
//! named tensor under `tensors/`, and `history.csv`.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use eegvae_core::io::{atomic_write, f32_from_le_bytes, f32_to_le_bytes, sha256_hex};
use eegvae_core::rng::named_stream;
use serde::{Deserialize, Serialize};

use crate::classifier::{Architecture, ClassifierModel, EpochRecord, NetClassifier};
use crate::error::{Error, Result};
use crate::svm::SvmModel;
use crate::vae::{HistoryRow, TrainedVae, VaeConfig, VaeNet, VaeShape};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum Header {
    Vae { format_version: u32, config: VaeConfig, shape: VaeShape, rate_hz: f64, tensors: Vec<(String, usize)> },
    Net { format_version: u32, arch: Architecture, tensors: Vec<(String, usize)> },
    SvmRbf { format_version: u32, model: SvmModel },
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

fn archive(entries: Vec<(String, Vec<u8>)>) -> Vec<u8> {
    let mut builder = tar::Builder::new(Vec::new());
    for (name, bytes) in entries {
        let mut header = tar::Header::new_gnu();
        header.set_size(bytes.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        header.set_cksum();
        builder.append_data(&mut header, &name, bytes.as_slice()).expect("in-memory tar write");
    }
    builder.into_inner().expect("in-memory tar finish")
}

fn unpack(path: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let file = std::fs::File::open(path).map_err(|e| eegvae_core::Error::io(path, e))?;
    let mut tar = tar::Archive::new(file);
    let mut out = BTreeMap::new();
    for entry in tar.entries().map_err(|e| bad(path, e.to_string()))? {
        let mut entry = entry.map_err(|e| bad(path, e.to_string()))?;
        let name = entry.path().map_err(|e| bad(path, e.to_string()))?.to_string_lossy().into_owned();
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes).map_err(|e| bad(path, e.to_string()))?;
        out.insert(name, bytes);
    }
    Ok(out)
}

fn tensor_entries<'a>(state: impl IntoIterator<Item = (String, &'a Vec<f32>)>) -> (Vec<(String, usize)>, Vec<(String, Vec<u8>)>) {
    state
        .into_iter()
        .map(|(n, v)| ((n.clone(), v.len()), (format!("tensors/{n}.f32"), f32_to_le_bytes(v))))
        .unzip()
}

fn load_tensors<'a>(
    path: &Path,
    files: &BTreeMap<String, Vec<u8>>,
    index: &[(String, usize)],
    targets: impl IntoIterator<Item = (String, &'a mut Vec<f32>)>,
) -> Result<()> {
    let targets: Vec<(String, &mut Vec<f32>)> = targets.into_iter().collect();
    if targets.len() != index.len() {
        return Err(bad(path, format!("expected {} tensors, archive lists {}", targets.len(), index.len())));
    }
    for ((name, dst), (iname, len)) in targets.into_iter().zip(index) {
        if &name != iname {
            return Err(bad(path, format!("tensor {iname} does not match architecture slot {name}")));
        }
        let bytes = files.get(&format!("tensors/{name}.f32")).ok_or_else(|| bad(path, format!("missing tensor {name}")))?;
        let values = f32_from_le_bytes(bytes).ok_or_else(|| bad(path, format!("tensor {name} is not a whole number of f32")))?;
        if values.len() != *len || values.len() != dst.len() {
            return Err(bad(path, format!("tensor {name} has {} values, expected {}", values.len(), dst.len())));
        }
        *dst = values;
    }
    Ok(())
}

fn vae_history_csv(rows: &[HistoryRow]) -> Vec<u8> {
    let mut s = String::from("epoch,reconstruction,kl,total,val_reconstruction\n");
    for r in rows {
        let val = r.val_reconstruction.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.reconstruction, r.kl, r.total, val));
    }
    s.into_bytes()
}

fn parse_opt(s: &str) -> std::result::Result<Option<f64>, std::num::ParseFloatError> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

fn parse_vae_history(path: &Path, bytes: &[u8]) -> Result<Vec<HistoryRow>> {
    let text = std::str::from_utf8(bytes).map_err(|_| bad(path, "history is not UTF-8"))?;
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let err = || bad(path, format!("malformed history line {line:?}"));
            if f.len() != 5 {
                return Err(err());
            }
            Ok(HistoryRow {
                epoch: f[0].parse().map_err(|_| err())?,
                reconstruction: f[1].parse().map_err(|_| err())?,
                kl: f[2].parse().map_err(|_| err())?,
                total: f[3].parse().map_err(|_| err())?,
                val_reconstruction: parse_opt(f[4]).map_err(|_| err())?,
            })
        })
        .collect()
}

fn net_history_csv(rows: &[EpochRecord]) -> Vec<u8> {
    let mut s = String::from("epoch,train_loss,train_accuracy,val_loss,val_accuracy\n");
    for r in rows {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.train_loss, r.train_accuracy, opt(r.val_loss), opt(r.val_accuracy)));
    }
    s.into_bytes()
}

fn parse_net_history(path: &Path, bytes: &[u8]) -> Result<Vec<EpochRecord>> {
    let text = std::str::from_utf8(bytes).map_err(|_| bad(path, "history is not UTF-8"))?;
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let err = || bad(path, format!("malformed history line {line:?}"));
            if f.len() != 5 {
                return Err(err());
            }
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| err())?,
                train_loss: f[1].parse().map_err(|_| err())?,
                train_accuracy: f[2].parse().map_err(|_| err())?,
                val_loss: parse_opt(f[3]).map_err(|_| err())?,
                val_accuracy: parse_opt(f[4]).map_err(|_| err())?,
            })
        })
        .collect()
}

fn write(path: &Path, header: &Header, mut entries: Vec<(String, Vec<u8>)>, history: Vec<u8>) -> Result<String> {
    let config = serde_json::to_vec_pretty(header).expect("header serialises");
    entries.insert(0, ("config.json".into(), config));
    entries.push(("history.csv".into(), history));
    let bytes = archive(entries);
    atomic_write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

fn read_header(path: &Path, files: &BTreeMap<String, Vec<u8>>) -> Result<Header> {
    let bytes = files.get("config.json").ok_or_else(|| bad(path, "missing config.json"))?;
    let header: Header = serde_json::from_slice(bytes).map_err(|e| bad(path, e.to_string()))?;
    let version = match &header {
        Header::Vae { format_version, .. } | Header::Net { format_version, .. } | Header::SvmRbf { format_version, .. } => {
            *format_version
        }
    };
    if version != FORMAT_VERSION {
        return Err(bad(path, format!("unsupported format version {version}")));
    }
    Ok(header)
}

/// Writes the archive atomically and returns its SHA-256 digest.
pub fn save_vae(path: &Path, model: &TrainedVae) -> Result<String> {
    let (index, entries) = tensor_entries(model.net.state());
    let header =
        Header::Vae { format_version: FORMAT_VERSION, config: model.config.clone(), shape: model.net.shape, rate_hz: model.rate_hz, tensors: index };
    write(path, &header, entries, vae_history_csv(&model.history))
}

pub fn load_vae(path: &Path) -> Result<TrainedVae> {
    let files = unpack(path)?;
    match read_header(path, &files)? {
        Header::Vae { config, shape, rate_hz, tensors, .. } => {
            let mut net = VaeNet::new(shape, &mut named_stream(0, "checkpoint"));
            load_tensors(path, &files, &tensors, net.state_mut())?;
            let history = parse_vae_history(path, files.get("history.csv").ok_or_else(|| bad(path, "missing history.csv"))?)?;
            Ok(TrainedVae { config, rate_hz, net, history })
        }
        _ => Err(bad(path, "archive does not hold a VAE")),
    }
}

pub fn save_classifier(path: &Path, model: &ClassifierModel) -> Result<String> {
    match model {
        ClassifierModel::Net(n) => {
            let (index, entries) = tensor_entries(n.net.state("net"));
            let header = Header::Net { format_version: FORMAT_VERSION, arch: n.arch.clone(), tensors: index };
            write(path, &header, entries, net_history_csv(&n.history))
        }
        ClassifierModel::Svm(s) => {
            let mut model = s.clone();
            let support = std::mem::take(&mut model.support);
            let header = Header::SvmRbf { format_version: FORMAT_VERSION, model };
            let entries = vec![("tensors/support.f32".to_string(), f32_to_le_bytes(&support))];
            write(path, &header, entries, b"epoch\n".to_vec())
        }
    }
}

pub fn load_classifier(path: &Path) -> Result<ClassifierModel> {
    let files = unpack(path)?;
    match read_header(path, &files)? {
        Header::Net { arch, tensors, .. } => {
            let mut model = NetClassifier::untrained(arch);
            load_tensors(path, &files, &tensors, model.net.state_mut("net"))?;
            model.history = parse_net_history(path, files.get("history.csv").ok_or_else(|| bad(path, "missing history.csv"))?)?;
            Ok(ClassifierModel::Net(model))
        }
        Header::SvmRbf { mut model, .. } => {
            let bytes = files.get("tensors/support.f32").ok_or_else(|| bad(path, "missing support vectors"))?;
            model.support = f32_from_le_bytes(bytes).ok_or_else(|| bad(path, "support vectors are not f32"))?;
            if model.support.len() != model.coef.len() * model.dim {
                return Err(bad(path, "support vector count does not match coefficients"));
            }
            Ok(ClassifierModel::Svm(model))
        }
        Header::Vae { .. } => Err(bad(path, "archive holds a VAE, not a classifier")),
    }
}
