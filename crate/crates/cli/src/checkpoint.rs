//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!   magic "3NGAN1" | role u8 | image_size u32 | channels u32 |
//!   latent_dim u32 | base_width u32 | num_classes u32 | entry count u32 |
//!   entries: name_len u32, name bytes, rank u8, extents u64 each,
//!            values f64 each.
//! Entries cover parameters and batchnorm running statistics by name.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use trigan_core::net::{
    build_classifier, build_discriminator, build_generator, Network, NetworkSpec, Role,
};
use trigan_core::tensor::Tensor;

use crate::CliError;

const MAGIC: &[u8; 6] = b"3NGAN1";

fn role_byte(role: Role) -> u8 {
    match role {
        Role::Generator => 0,
        Role::Discriminator => 1,
        Role::Classifier => 2,
    }
}

fn role_from_byte(b: u8) -> Result<Role, CliError> {
    match b {
        0 => Ok(Role::Generator),
        1 => Ok(Role::Discriminator),
        2 => Ok(Role::Classifier),
        other => Err(CliError::new(format!("unknown checkpoint role byte {other}"))),
    }
}

pub fn save(net: &Network, path: &Path) -> Result<(), CliError> {
    let file = File::create(path)
        .map_err(|e| CliError::new(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    let spec = net.spec();
    w.write_all(MAGIC).and_then(|_| {
        w.write_all(&[role_byte(spec.role)])?;
        for v in [
            spec.image_size as u32,
            spec.channels as u32,
            spec.latent_dim as u32,
            spec.base_width as u32,
            spec.num_classes as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        let entries: Vec<(String, &Tensor)> = named_tensors(net);
        w.write_all(&(entries.len() as u32).to_le_bytes())?;
        for (name, t) in entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.shape().len() as u8])?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    })
    .map_err(|e| CliError::new(format!("cannot write {}: {e}", path.display())))
}

fn named_tensors(net: &Network) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = net
        .params()
        .iter()
        .map(|p| (p.name.clone(), &p.value))
        .collect();
    for buf in net.buffers() {
        out.push((format!("{}.running_mean", buf.prefix), &buf.running_mean));
        out.push((format!("{}.running_var", buf.prefix), &buf.running_var));
    }
    out
}

/// Load any checkpoint, rebuilding the network from the stored spec.
pub fn load(path: &Path) -> Result<Network, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::new(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let bad = |what: &str| CliError::new(format!("corrupt checkpoint {}: {what}", path.display()));

    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != MAGIC {
        return Err(bad("wrong magic"));
    }
    let mut role = [0u8; 1];
    r.read_exact(&mut role).map_err(|_| bad("truncated role"))?;
    let role = role_from_byte(role[0])?;
    let mut header = [0u32; 6];
    for slot in &mut header {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf).map_err(|_| bad("truncated header"))?;
        *slot = u32::from_le_bytes(buf);
    }
    let spec = NetworkSpec {
        role,
        image_size: header[0] as usize,
        channels: header[1] as usize,
        latent_dim: header[2] as usize,
        base_width: header[3] as usize,
        num_classes: header[4] as usize,
    };
    let mut net = match role {
        Role::Generator => build_generator(spec),
        Role::Discriminator => build_discriminator(spec),
        Role::Classifier => build_classifier(spec),
    }
    .map_err(CliError::from)?;

    for _ in 0..header[5] {
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(|_| bad("truncated entry"))?;
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("non-utf8 name"))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank).map_err(|_| bad("truncated rank"))?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut e = [0u8; 8];
            r.read_exact(&mut e).map_err(|_| bad("truncated extent"))?;
            shape.push(u64::from_le_bytes(e) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut v = [0u8; 8];
            r.read_exact(&mut v).map_err(|_| bad("truncated values"))?;
            data.push(f64::from_le_bytes(v));
        }
        let tensor = Tensor::new(shape, data).map_err(CliError::from)?;
        if name.ends_with(".running_mean") || name.ends_with(".running_var") {
            net.set_buffer(&name, tensor).map_err(CliError::from)?;
        } else {
            net.set_param(&name, tensor).map_err(CliError::from)?;
        }
    }
    Ok(net)
}

/// Load a checkpoint and require a specific role.
pub fn load_role(path: &Path, role: Role) -> Result<Network, CliError> {
    let net = load(path)?;
    if net.role() != role {
        return Err(CliError::new(format!(
            "checkpoint {} holds a {}, expected a {}",
            path.display(),
            net.role().as_str(),
            role.as_str()
        )));
    }
    Ok(net)
}
