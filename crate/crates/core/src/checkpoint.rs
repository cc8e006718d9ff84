//! Model bundle persistence: generator, discriminators, optimizer moments and
//! run metadata in one file.
//!
//! Layout: `PXN2NCKP`, u32 format version, u64 header length, a JSON header,
//! then every tensor listed in the header as little-endian f64 in order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::dataset::store::tmp_path;
use crate::dataset::NormStats;
use crate::discriminator::{build_discriminators, Discriminators};
use crate::error::{Error, Result};
use crate::gating::GatePolicy;
use crate::generator::{build_generator, GeneratorState, Stage};
use crate::nn::ParamStore;
use crate::optim::Adam;
use crate::training::TrainConfig;

const MAGIC: &[u8; 8] = b"PXN2NCKP";
const VERSION: u32 = 1;

/// Everything needed to run inference or resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub train_config: TrainConfig,
    pub config_hash: String,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed iterations across all epochs.
    pub iteration: u64,
    pub gate_policy: GatePolicy,
    pub markers: Vec<String>,
    pub stats: Option<NormStats>,
    pub generator: GeneratorState,
    pub discriminators: Discriminators,
    pub gen_opt: Adam,
    pub disc_opt: Vec<Adam>,
}

#[derive(Serialize, Deserialize)]
struct Section {
    name: String,
    shape: [usize; 4],
}

#[derive(Serialize, Deserialize)]
struct Header {
    epoch: usize,
    iteration: u64,
    stage: Stage,
    config_hash: String,
    train_config: TrainConfig,
    gate_policy: GatePolicy,
    markers: Vec<String>,
    stats: Option<NormStats>,
    gen_steps: Vec<u64>,
    disc_steps: Vec<Vec<u64>>,
    sections: Vec<Section>,
}

/// `<dir>/ckpt/epoch_<E>.bin`
pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join("ckpt").join(format!("epoch_{epoch}.bin"))
}

/// Checkpoints under `<dir>/ckpt`, sorted by epoch.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let dir = run_dir.join("ckpt");
    let mut out = Vec::new();
    for entry in fs::read_dir(&dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(e) = name
            .strip_prefix("epoch_")
            .and_then(|s| s.strip_suffix(".bin"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            out.push((e, path));
        }
    }
    out.sort();
    Ok(out)
}

fn push_store<'a>(
    sections: &mut Vec<Section>,
    tensors: &mut Vec<&'a Tensor>,
    prefix: &str,
    names: &[String],
    items: &'a [Tensor],
) {
    for (n, t) in names.iter().zip(items) {
        sections.push(Section {
            name: format!("{prefix}/{n}"),
            shape: t.shape(),
        });
        tensors.push(t);
    }
}

pub fn write_checkpoint(path: &Path, bundle: &ModelBundle) -> Result<()> {
    let mut sections = Vec::new();
    let mut tensors = Vec::new();
    let gp = &bundle.generator.params;
    push_store(&mut sections, &mut tensors, "g", gp.names(), gp.tensors());
    push_store(&mut sections, &mut tensors, "g.m", gp.names(), &bundle.gen_opt.m);
    push_store(&mut sections, &mut tensors, "g.v", gp.names(), &bundle.gen_opt.v);
    for (k, (d, opt)) in bundle
        .discriminators
        .scales
        .iter()
        .zip(&bundle.disc_opt)
        .enumerate()
    {
        let names = d.params.names();
        push_store(&mut sections, &mut tensors, &format!("d{k}"), names, d.params.tensors());
        push_store(&mut sections, &mut tensors, &format!("d{k}.m"), names, &opt.m);
        push_store(&mut sections, &mut tensors, &format!("d{k}.v"), names, &opt.v);
    }
    let header = Header {
        epoch: bundle.epoch,
        iteration: bundle.iteration,
        stage: bundle.generator.stage,
        config_hash: bundle.config_hash.clone(),
        train_config: bundle.train_config.clone(),
        gate_policy: bundle.gate_policy.clone(),
        markers: bundle.markers.clone(),
        stats: bundle.stats.clone(),
        gen_steps: bundle.gen_opt.steps.clone(),
        disc_steps: bundle.disc_opt.iter().map(|o| o.steps.clone()).collect(),
        sections,
    };
    let header = serde_json::to_vec(&header)?;

    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = tmp_path(path);
    {
        let mut w = std::io::BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for t in tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn tensor(&mut self, shape: [usize; 4]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Tensor::from_vec(shape, data)
    }
}

fn read_group(
    r: &mut Reader<'_>,
    sections: &mut std::slice::Iter<'_, Section>,
    prefix: &str,
    template: &ParamStore,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(template.len());
    for (name, t) in template.iter() {
        let s = sections
            .next()
            .ok_or_else(|| Error::format(r.path, "missing tensor sections"))?;
        if s.name != format!("{prefix}/{name}") || s.shape != t.shape() {
            return Err(Error::format(
                r.path,
                format!("unexpected section {} {:?}", s.name, s.shape),
            ));
        }
        out.push(r.tensor(s.shape)?);
    }
    Ok(out)
}

/// Load a bundle; with `expected_hash`, a different producing config is rejected.
pub fn read_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<ModelBundle> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)?;
    if let Some(expected) = expected_hash {
        if header.config_hash != expected {
            return Err(Error::HashMismatch {
                expected: expected.to_string(),
                found: header.config_hash,
            });
        }
    }

    let cfg = &header.train_config;
    let mut generator = build_generator(&cfg.generator, 0)?;
    generator.stage = header.stage;
    let mut discriminators = build_discriminators(&cfg.discriminator, 0)?;
    if header.disc_steps.len() != discriminators.n_scales() {
        return Err(Error::format(path, "discriminator scale count differs"));
    }

    let mut sections = header.sections.iter();
    let template = generator.params.clone();
    let gw = read_group(&mut r, &mut sections, "g", &template)?;
    let gm = read_group(&mut r, &mut sections, "g.m", &template)?;
    let gv = read_group(&mut r, &mut sections, "g.v", &template)?;
    let names = template.names().to_vec();
    generator.params.load(&names, gw)?;
    let gen_opt = Adam {
        m: gm,
        v: gv,
        steps: header.gen_steps.clone(),
    };

    let mut disc_opt = Vec::new();
    for (k, scale) in discriminators.scales.iter_mut().enumerate() {
        let template = scale.params.clone();
        let w = read_group(&mut r, &mut sections, &format!("d{k}"), &template)?;
        let m = read_group(&mut r, &mut sections, &format!("d{k}.m"), &template)?;
        let v = read_group(&mut r, &mut sections, &format!("d{k}.v"), &template)?;
        scale.params.load(template.names(), w)?;
        disc_opt.push(Adam {
            m,
            v,
            steps: header.disc_steps[k].clone(),
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    if gen_opt.steps.len() != generator.params.len()
        || disc_opt
            .iter()
            .zip(&discriminators.scales)
            .any(|(o, s)| o.steps.len() != s.params.len())
    {
        return Err(Error::format(path, "optimizer step counts do not match parameters"));
    }

    Ok(ModelBundle {
        train_config: header.train_config,
        config_hash: header.config_hash,
        epoch: header.epoch,
        iteration: header.iteration,
        gate_policy: header.gate_policy,
        markers: header.markers,
        stats: header.stats,
        generator,
        discriminators,
        gen_opt,
        disc_opt,
    })
}
