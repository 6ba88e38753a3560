//! Compact V-Net-style encoder-decoder.
//!
//! Level `i` holds two `3×3×3` convolutions, each followed by group
//! normalization and ReLU. Between levels a `2×2×2` stride-2 convolution
//! halves the resolution; the decoder mirrors this with stride-2 transposed
//! convolutions and skip concatenation. The deepest level is the bottleneck
//! with `C` channels, where routing and interaction happen.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Bound, ParamSet};
use crate::tensor::{kernels::ConvGeom, SeededRng, Tape, Tensor, Var};

pub const GN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub bottleneck_channels: usize,
    pub groups: usize,
    pub out_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 1,
            base_channels: 8,
            levels: 3,
            bottleneck_channels: 64,
            groups: 4,
            out_channels: 1,
        }
    }
}

impl NetworkConfig {
    /// Channel width of level `i`.
    pub fn channels(&self, level: usize) -> usize {
        if level + 1 == self.levels {
            self.bottleneck_channels
        } else {
            self.base_channels << level
        }
    }

    /// Total down-sampling factor between input and bottleneck.
    pub fn reduction(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn bottleneck_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let f = self.reduction();
        if input.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::shape(
                "encode",
                format!("spatial dims {input:?} must be positive multiples of {f}"),
            ));
        }
        Ok(input.map(|d| d / f))
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("network.levels = {} must be ≥ 2", self.levels)));
        }
        if self.levels > 8 {
            return Err(Error::Config(format!("network.levels = {} is unreasonably deep", self.levels)));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 || self.groups == 0 {
            return Err(Error::Config("network channel counts and groups must be positive".into()));
        }
        for i in 0..self.levels {
            if !self.channels(i).is_multiple_of(self.groups) {
                return Err(Error::Config(format!(
                    "network.groups = {} does not divide level {i} width {}",
                    self.groups,
                    self.channels(i)
                )));
            }
        }
        Ok(())
    }
}

fn conv_name(block: &str, j: usize) -> String {
    format!("net.{block}.conv{j}")
}

fn norm_name(block: &str, j: usize) -> String {
    format!("net.{block}.norm{j}")
}

fn add_conv(p: &mut ParamSet, name: &str, cout: usize, cin: usize, k: usize, rng: &mut SeededRng) {
    p.insert(format!("{name}.weight"), fan_in_uniform(&[cout, cin, k, k, k], cin * k * k * k, rng));
    p.insert(format!("{name}.bias"), Tensor::zeros(vec![cout]));
}

fn add_block(p: &mut ParamSet, block: &str, cin: usize, cout: usize, rng: &mut SeededRng) {
    for (j, ci) in [(0, cin), (1, cout)] {
        add_conv(p, &conv_name(block, j), cout, ci, 3, rng);
        p.insert(format!("{}.gamma", norm_name(block, j)), Tensor::ones(vec![cout]));
        p.insert(format!("{}.beta", norm_name(block, j)), Tensor::zeros(vec![cout]));
    }
}

/// Network parameters with fan-in-scaled uniform weights, unit norm gains and
/// zero biases. Deterministic per seed.
pub fn init_params(cfg: &NetworkConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = SeededRng::stream(seed, 1);
    let mut p = ParamSet::new();
    let mut cin = cfg.in_channels;
    for i in 0..cfg.levels {
        let c = cfg.channels(i);
        add_block(&mut p, &format!("enc{i}"), cin, c, &mut rng);
        if i + 1 < cfg.levels {
            add_conv(&mut p, &format!("net.down{i}"), c, c, 2, &mut rng);
        }
        cin = c;
    }
    for i in (0..cfg.levels - 1).rev() {
        let (deep, c) = (cfg.channels(i + 1), cfg.channels(i));
        // Transposed weights are [C_in, C_out, k, k, k]; each output voxel
        // receives exactly C_in contributions for a k2 s2 kernel.
        p.insert(format!("net.dec{i}.up.weight"), fan_in_uniform(&[deep, c, 2, 2, 2], deep, &mut rng));
        p.insert(format!("net.dec{i}.up.bias"), Tensor::zeros(vec![c]));
        add_block(&mut p, &format!("dec{i}"), 2 * c, c, &mut rng);
    }
    add_conv(&mut p, "net.head", cfg.out_channels, cfg.channels(0), 1, &mut rng);
    Ok(p)
}

/// Group normalization over `[B, C, D, H, W]` built from tape primitives.
pub fn group_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    let (b, c) = (s[0], s[1]);
    if c % groups != 0 {
        return Err(Error::shape("group_norm", format!("{groups} groups do not divide {c} channels")));
    }
    let n = tape.value(x).numel() / (b * groups);
    let g = tape.reshape(x, &[b, groups, n])?;
    let mean = tape.mean(g, &[2], true)?;
    let xc = tape.sub(g, mean)?;
    let sq = tape.mul(xc, xc)?;
    let var = tape.mean(sq, &[2], true)?;
    let var = tape.add_scalar(var, GN_EPS)?;
    let inv = tape.powf(var, -0.5)?;
    let y = tape.mul(xc, inv)?;
    let y = tape.reshape(y, &s)?;
    let gm = tape.reshape(gamma, &[1, c, 1, 1, 1])?;
    let bt = tape.reshape(beta, &[1, c, 1, 1, 1])?;
    let y = tape.mul(y, gm)?;
    tape.add(y, bt)
}

fn conv(tape: &mut Tape, p: &Bound, name: &str, x: Var, geom: ConvGeom) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    tape.conv3d(x, w, Some(b), geom)
}

fn block(tape: &mut Tape, p: &Bound, cfg: &NetworkConfig, name: &str, mut x: Var) -> Result<Var> {
    for j in 0..2 {
        x = conv(tape, p, &conv_name(name, j), x, ConvGeom::new(1, 1))?;
        let norm = norm_name(name, j);
        let (gm, bt) = (p.get(&format!("{norm}.gamma"))?, p.get(&format!("{norm}.beta"))?);
        x = group_norm(tape, x, gm, bt, cfg.groups)?;
        x = tape.relu(x)?;
    }
    Ok(x)
}

#[derive(Clone, Debug)]
pub struct EncodedFeatures {
    /// `[B, C, d, h, w]`.
    pub bottleneck: Var,
    /// Full-resolution-first skip tensors, one per non-bottleneck level.
    pub skips: Vec<Var>,
}

pub fn encode(tape: &mut Tape, p: &Bound, cfg: &NetworkConfig, x: Var) -> Result<EncodedFeatures> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 5 || s[1] != cfg.in_channels {
        return Err(Error::shape("encode", format!("input {s:?}, expected [B, {}, D, H, W]", cfg.in_channels)));
    }
    cfg.bottleneck_dims([s[2], s[3], s[4]])?;
    let mut skips = Vec::with_capacity(cfg.levels - 1);
    let mut h = x;
    for i in 0..cfg.levels {
        h = block(tape, p, cfg, &format!("enc{i}"), h)?;
        if i + 1 < cfg.levels {
            skips.push(h);
            h = conv(tape, p, &format!("net.down{i}"), h, ConvGeom::new(2, 0))?;
        }
    }
    Ok(EncodedFeatures { bottleneck: h, skips })
}

/// Logits `[B, out, D, H, W]`. `bottleneck` may differ from `feats.bottleneck`
/// (e.g. after interaction) but must keep its shape.
pub fn decode(tape: &mut Tape, p: &Bound, cfg: &NetworkConfig, feats: &EncodedFeatures) -> Result<Var> {
    if feats.skips.len() + 1 != cfg.levels {
        return Err(Error::shape(
            "decode",
            format!("{} skips for a {}-level network", feats.skips.len(), cfg.levels),
        ));
    }
    let mut h = feats.bottleneck;
    for i in (0..cfg.levels - 1).rev() {
        let w = p.get(&format!("net.dec{i}.up.weight"))?;
        let b = p.get(&format!("net.dec{i}.up.bias"))?;
        h = tape.conv_transpose3d(h, w, Some(b), ConvGeom::new(2, 0))?;
        let skip = feats.skips[i];
        let (hs, ss) = (tape.value(h).shape(), tape.value(skip).shape());
        if hs[0] != ss[0] || hs[2..] != ss[2..] {
            return Err(Error::shape("decode", format!("upsampled {hs:?} vs skip {ss:?}")));
        }
        h = tape.concat(&[h, skip], 1)?;
        h = block(tape, p, cfg, &format!("dec{i}"), h)?;
    }
    conv(tape, p, "net.head", h, ConvGeom::new(1, 0))
}

/// Foreground probabilities for `x: [B, in, D, H, W]` without recording
/// gradients.
pub fn predict(params: &ParamSet, cfg: &NetworkConfig, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let feats = encode(&mut tape, &p, cfg, xv)?;
    let logits = decode(&mut tape, &p, cfg, &feats)?;
    let probs = tape.sigmoid(logits)?;
    Ok(tape.value(probs).clone())
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes named tensors: magic, version, count, then per tensor the name
/// length (u16), UTF-8 name, rank (u8), dims (u32 each) and f64 payload, all
/// little-endian.
pub fn encode_checkpoint(tensors: &ParamSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name of {} bytes is too long", name.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Truncated { expected: self.at + n, found: self.bytes.len() });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader { bytes, at: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found: magic });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut out = ParamSet::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if out.contains(&name) {
            return Err(Error::Format(format!("duplicate tensor {name:?}")));
        }
        out.insert(name, Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?);
    }
    if r.at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.at)));
    }
    Ok(out)
}

pub fn write_checkpoint(path: impl AsRef<Path>, tensors: &ParamSet) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(tensors)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, gradcheck::DEFAULT_STEP};

    fn tiny() -> NetworkConfig {
        NetworkConfig { base_channels: 2, levels: 2, bottleneck_channels: 4, groups: 2, ..Default::default() }
    }

    fn forward(params: &ParamSet, cfg: &NetworkConfig, x: &Tensor) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let f = encode(&mut tape, &p, cfg, xv).unwrap();
        let logits = decode(&mut tape, &p, cfg, &f).unwrap();
        (tape.value(f.bottleneck).clone(), tape.value(logits).clone())
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = NetworkConfig::default();
        let p = init_params(&cfg, 0).unwrap();
        let conv = |ci: usize, co: usize, k: usize| k * k * k * ci * co + co;
        let block = |ci: usize, co: usize| conv(ci, co, 3) + conv(co, co, 3) + 4 * co;
        let mut want = 0;
        let mut cin = 1;
        for i in 0..3 {
            let c = cfg.channels(i);
            want += block(cin, c);
            if i < 2 {
                want += conv(c, c, 2);
                want += conv(cfg.channels(i + 1), c, 2) + block(2 * c, c);
            }
            cin = c;
        }
        want += conv(8, 1, 1);
        assert_eq!(p.numel(), want);
        // Hand count for widths 8, 16, 64.
        assert_eq!(p.numel(), 188_977);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = NetworkConfig::default();
        let a = init_params(&cfg, 5).unwrap();
        let b = init_params(&cfg, 5).unwrap();
        assert!(a.iter().zip(b.iter()).all(|((_, x), (_, y))| x.bitwise_eq(y)));
        for (name, t) in a.iter() {
            if name.ends_with(".bias") || name.ends_with(".beta") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        let bad = NetworkConfig { groups: 3, ..Default::default() };
        assert!(matches!(init_params(&bad, 0), Err(Error::Config(_))));
        assert!(init_params(&NetworkConfig { levels: 1, ..Default::default() }, 0).is_err());
    }

    #[test]
    fn shapes_and_zero_input() {
        let cfg = NetworkConfig::default();
        let p = init_params(&cfg, 1).unwrap();
        let x = Tensor::zeros(vec![1, 1, 24, 24, 24]);
        let (bott, logits) = forward(&p, &cfg, &x);
        assert_eq!(bott.shape(), [1, 64, 6, 6, 6]);
        assert!(bott.data().iter().all(|&v| v == 0.0));
        assert_eq!(logits.shape(), x.shape());
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let odd = tape.constant(Tensor::zeros(vec![1, 1, 10, 8, 8]));
        assert!(encode(&mut tape, &b, &cfg, odd).is_err());
    }

    #[test]
    fn batch_independence_and_permutation() {
        let cfg = tiny();
        let p = init_params(&cfg, 2).unwrap();
        let mut rng = SeededRng::new(3);
        let a = rng.uniform(0.0, 1.0, &[1, 1, 8, 8, 8]).unwrap();
        let b = rng.uniform(0.0, 1.0, &[1, 1, 8, 8, 8]).unwrap();
        let ab = Tensor::new(vec![2, 1, 8, 8, 8], [a.data(), b.data()].concat()).unwrap();
        let ba = Tensor::new(vec![2, 1, 8, 8, 8], [b.data(), a.data()].concat()).unwrap();
        let (_, la) = forward(&p, &cfg, &a);
        let (_, lab) = forward(&p, &cfg, &ab);
        let (_, lba) = forward(&p, &cfg, &ba);
        assert_eq!(&lab.data()[..512], la.data());
        assert_eq!(&lab.data()[..512], &lba.data()[512..]);
        assert_eq!(&lab.data()[512..], &lba.data()[..512]);
    }

    #[test]
    fn predict_range_and_zero_parameters() {
        let cfg = tiny();
        let p = init_params(&cfg, 4).unwrap();
        let x = SeededRng::new(5).uniform(0.0, 1.0, &[1, 1, 8, 8, 8]).unwrap();
        let y = predict(&p, &cfg, &x).unwrap();
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(y.bitwise_eq(&predict(&p, &cfg, &x).unwrap()));
        let mut zero = p.clone();
        for (_, t) in zero.iter_mut() {
            *t = Tensor::zeros(t.shape().to_vec());
        }
        assert!(predict(&zero, &cfg, &x).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn end_to_end_gradient() {
        let cfg = tiny();
        let params = init_params(&cfg, 6).unwrap();
        let names: Vec<String> = params.names().cloned().collect();
        let mut inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
        // Nonzero biases and gains keep the check generic.
        let mut rng = SeededRng::new(7);
        for (n, t) in names.iter().zip(inputs.iter_mut()) {
            if n.ends_with(".bias") || n.ends_with(".beta") {
                *t = rng.uniform(-0.1, 0.1, t.shape()).unwrap();
            }
        }
        let x = rng.uniform(0.0, 1.0, &[1, 1, 8, 8, 8]).unwrap();
        let err = grad_check(
            |tape, vars| {
                let bound = bind_vars(&names, vars);
                let xv = tape.constant(x.clone());
                let f = encode(tape, &bound, &cfg, xv)?;
                let logits = decode(tape, &bound, &cfg, &f)?;
                let p = tape.sigmoid(logits)?;
                tape.mean_all(p)
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    fn bind_vars(names: &[String], vars: &[Var]) -> Bound {
        Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()))
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let mut p = init_params(&tiny(), 8).unwrap();
        p.insert("iteration", Tensor::scalar(12.0));
        let bytes = encode_checkpoint(&p).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert!(p.iter().zip(back.iter()).all(|((a, x), (b, y))| a == b && x.bitwise_eq(y)));
        assert!(matches!(decode_checkpoint(b"XXXX\x01\0\0\0\0\0\0\0"), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(Error::Format(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bck");
        write_checkpoint(&path, &p).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), p);
        assert!(matches!(read_checkpoint(dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
