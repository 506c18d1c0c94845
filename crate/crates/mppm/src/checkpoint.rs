//! Model checkpoints: a short text header describing the three networks,
//! terminated by `END\n`, followed by every parameter as little-endian f64
//! in encoder, decoder, distance order.

use std::fs;
use std::path::Path;

use mppm_core::linalg::Matrix;
use mppm_core::networks::{ManifoldModel, Space};
use mppm_core::nn::{Activation, DenseLayer, MlpNetwork};

use crate::error::{Error, Result};

const MAGIC: &str = "mppm-checkpoint 1";
const END: &str = "END\n";
const NETS: [&str; 3] = ["encoder", "decoder", "distance"];

fn nets(model: &ManifoldModel) -> [&MlpNetwork; 3] {
    [&model.encoder, &model.decoder, &model.distance_net]
}

pub fn encode(model: &ManifoldModel) -> Vec<u8> {
    let mut head = format!("{MAGIC}\nspace {}\nsigma_d {}\n", model.space.name(), model.sigma_d);
    for (name, net) in NETS.iter().zip(nets(model)) {
        head += &format!("net {name} {}\n", net.layers().len());
        for l in net.layers() {
            head += &format!("layer {} {} {} {}\n", l.input_dim(), l.output_dim(), l.activation.name(), l.dropout_rate);
        }
    }
    head += END;
    let mut out = head.into_bytes();
    for net in nets(model) {
        for p in net.params_flat() {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ManifoldModel> {
    let bad = |m: String| Error::format(path, m);
    let end = bytes
        .windows(END.len() + 1)
        .position(|w| w[0] == b'\n' && &w[1..] == END.as_bytes())
        .map(|i| i + 1 + END.len())
        .ok_or_else(|| bad("missing END marker".into()))?;
    let head = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
    let mut lines = head.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("not a checkpoint".into()));
    }
    let mut field = |key: &str| -> Result<Vec<String>> {
        let line = lines.next().ok_or_else(|| bad(format!("missing {key}")))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(bad(format!("expected {key}, got {line:?}")));
        }
        Ok(parts.map(str::to_owned).collect())
    };
    let space_name = field("space")?.concat();
    let space = Space::from_name(&space_name).ok_or_else(|| bad(format!("unknown space {space_name}")))?;
    let sigma_d: f64 = field("sigma_d")?.concat().parse().map_err(|_| bad("bad sigma_d".into()))?;
    let mut shapes = Vec::new();
    for name in NETS {
        let f = field("net")?;
        if f.len() != 2 || f[0] != name {
            return Err(bad(format!("expected net {name}")));
        }
        let count: usize = f[1].parse().map_err(|_| bad("bad layer count".into()))?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let f = field("layer")?;
            if f.len() != 4 {
                return Err(bad("layer needs in, out, activation, dropout".into()));
            }
            let dim = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad width {s}")));
            let act = Activation::from_name(&f[2]).ok_or_else(|| bad(format!("unknown activation {}", f[2])))?;
            let dropout: f64 = f[3].parse().map_err(|_| bad("bad dropout".into()))?;
            layers.push((dim(&f[0])?, dim(&f[1])?, act, dropout));
        }
        shapes.push(layers);
    }
    let mut values = bytes[end..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let expected: usize = shapes.iter().flatten().map(|&(i, o, _, _)| o * (i + 1)).sum();
    if bytes.len() - end != 8 * expected {
        return Err(bad(format!("expected {expected} parameters, found {} bytes", bytes.len() - end)));
    }
    let mut built = Vec::with_capacity(3);
    for layers in shapes {
        let mut dense = Vec::with_capacity(layers.len());
        for (i, o, act, dropout) in layers {
            let w: Vec<f64> = values.by_ref().take(o * i).collect();
            let b: Vec<f64> = values.by_ref().take(o).collect();
            dense.push(DenseLayer::new(Matrix::from_vec(o, i, w)?, b, act, dropout)?);
        }
        built.push(MlpNetwork::new(dense)?);
    }
    let distance = built.pop().expect("three nets");
    let decoder = built.pop().expect("three nets");
    let encoder = built.pop().expect("three nets");
    Ok(ManifoldModel::from_parts(encoder, decoder, distance, sigma_d, space)?)
}

pub fn save(path: &Path, model: &ManifoldModel) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ManifoldModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
