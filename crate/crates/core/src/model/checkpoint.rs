//! Checkpoint directories.
//!
//! ```text
//! manifest.txt   name<TAB>file<TAB>shape      (shape as comma-separated extents)
//! arch.txt       key=value architecture descriptor
//! state.txt      step / epoch / lr / seed
//! <name>.smt1    one f32 tensor per parameter and batch-norm running statistic
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::net::{Architecture, ConvNet, Param};
use crate::error::{Error, Result};
use crate::numerics::{read_tensor, write_tensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub seed: u64,
}

fn join(v: &[usize]) -> String {
    v.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(",")
}

fn split_usize(s: &str) -> std::result::Result<Vec<usize>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|t| t.trim().parse::<usize>().map_err(|e| format!("bad extent {t:?}: {e}"))).collect()
}

pub fn save_checkpoint(net: &ConvNet<f32>, state: &TrainState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for p in net.params().iter().chain(net.buffers()) {
        let file = format!("{}.smt1", p.name);
        let t = Tensor::new(p.shape.clone(), p.data.clone())?;
        write_tensor(&dir.join(&file), &t)?;
        writeln!(manifest, "{}\t{}\t{}", p.name, file, join(&p.shape)).unwrap();
    }
    let a = net.arch();
    let arch = format!(
        "in_channels={}\nchannels={}\nhead={}\nnormalize={}\n",
        a.in_channels,
        join(&a.channels),
        join(&a.head),
        a.normalize
    );
    let st = format!("step={}\nepoch={}\nlr={}\nseed={}\n", state.step, state.epoch, state.lr, state.seed);
    for (name, body) in [("manifest.txt", manifest), ("arch.txt", arch), ("state.txt", st)] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Format { path: path.to_path_buf(), msg: format!("expected key=value, got {l:?}") })
        })
        .collect()
}

pub fn load_checkpoint(dir: &Path) -> Result<(ConvNet<f32>, TrainState)> {
    let fmt_err = |path: &Path, msg: String| Error::Format { path: path.to_path_buf(), msg };

    let arch_path = dir.join("arch.txt");
    let mut arch = Architecture { in_channels: 0, channels: vec![], head: vec![], normalize: false };
    for (k, v) in read_kv(&arch_path)? {
        match k.as_str() {
            "in_channels" => arch.in_channels = v.parse().map_err(|e| fmt_err(&arch_path, format!("{e}")))?,
            "channels" => arch.channels = split_usize(&v).map_err(|e| fmt_err(&arch_path, e))?,
            "head" => arch.head = split_usize(&v).map_err(|e| fmt_err(&arch_path, e))?,
            "normalize" => arch.normalize = v.parse().map_err(|e| fmt_err(&arch_path, format!("{e}")))?,
            other => return Err(fmt_err(&arch_path, format!("unknown key {other}"))),
        }
    }

    let state_path = dir.join("state.txt");
    let mut state = TrainState::default();
    for (k, v) in read_kv(&state_path)? {
        let bad = |e: String| fmt_err(&state_path, format!("{k}: {e}"));
        match k.as_str() {
            "step" => state.step = v.parse().map_err(|e| bad(format!("{e}")))?,
            "epoch" => state.epoch = v.parse().map_err(|e| bad(format!("{e}")))?,
            "lr" => state.lr = v.parse().map_err(|e| bad(format!("{e}")))?,
            "seed" => state.seed = v.parse().map_err(|e| bad(format!("{e}")))?,
            other => return Err(fmt_err(&state_path, format!("unknown key {other}"))),
        }
    }

    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(fmt_err(&manifest_path, format!("expected 3 tab-separated fields in {line:?}")));
        }
        let shape = split_usize(cols[2]).map_err(|e| fmt_err(&manifest_path, e))?;
        let t = read_tensor(&dir.join(cols[1]))?;
        if t.shape() != shape.as_slice() {
            return Err(fmt_err(&manifest_path, format!("{} has shape {:?}, manifest says {:?}", cols[1], t.shape(), shape)));
        }
        let p = Param { name: cols[0].to_string(), shape, data: t.into_data() };
        if p.name.contains("running_") {
            buffers.push(p);
        } else {
            params.push(p);
        }
    }
    Ok((ConvNet::from_parts(arch, params, buffers)?, state))
}
