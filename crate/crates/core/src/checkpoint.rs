//! Binary model files.
//!
//! ```text
//! "CRKM"  u32 version  u32 header_len  header (UTF-8, key=value lines)
//! repeated until EOF, in parameter order:
//!   u32 name_len  name  u32 ndims  u32 dims[ndims]  f32 data[prod(dims)]
//! ```
//!
//! All integers and floats are little-endian. The header carries the
//! architecture, class labels, step counter and seed:
//!
//! ```text
//! num_classes=2
//! input_dims=3,228,228
//! conv_channels=16,32
//! fc_hidden=128
//! lrn=on
//! lrn_params=2,2,0.0001,0.75
//! label=crack
//! label=negative
//! step=500
//! seed=7
//! base=<sha256 of the checkpoint this one was derived from>
//! ```
//!
//! Adam moments go to a sibling `.adam` file with the same record layout
//! under the magic `CRKA`, each record holding `u64 t` followed by `m` and
//! `v`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::LrnParams;
use crate::net::{Network, NetworkConfig, PARAM_NAMES};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{Adam, AdamConfig, AdamState};

pub const MAGIC: &[u8; 4] = b"CRKM";
pub const ADAM_MAGIC: &[u8; 4] = b"CRKA";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "ckpt";

/// A network together with what is needed to interpret its outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    /// Class names in output order.
    pub labels: Vec<String>,
    pub step: u64,
    pub seed: u64,
    /// SHA-256 (hex) of the checkpoint file this one was fine-tuned from.
    pub base: Option<String>,
}

impl Checkpoint {
    pub fn new(network: Network, labels: Vec<String>, step: u64, seed: u64) -> Result<Self> {
        let ckpt = Checkpoint {
            network,
            labels,
            step,
            seed,
            base: None,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn config(&self) -> &NetworkConfig {
        self.network.config()
    }

    fn validate(&self) -> Result<()> {
        let t = self.network.num_classes();
        if self.labels.len() != t {
            return Err(Error::ClassCountMismatch {
                expected: t,
                found: self.labels.len(),
            });
        }
        for l in &self.labels {
            if l.is_empty() || l.contains(['\n', '\r']) {
                return Err(Error::invalid(format!("unusable class label {l:?}")));
            }
        }
        if let Some(b) = &self.base {
            if b.is_empty() || b.contains(['\n', '\r']) {
                return Err(Error::invalid("unusable base identifier"));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = self.header();
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.network.param_count() + 256);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, len_u32(header.len())?);
        out.extend_from_slice(header.as_bytes());
        for (name, t) in PARAM_NAMES.iter().zip(self.network.params()) {
            put_name(&mut out, name)?;
            put_dims(&mut out, t.dims())?;
            put_f32s(&mut out, t.data());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::corrupt("bad magic, not a model checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::corrupt(format!(
                "unsupported format version {version}"
            )));
        }
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::corrupt("header is not UTF-8"))?;
        let meta = Header::parse(header)?;
        let expect = Network::<f32>::zeros(meta.config.clone())
            .map_err(|e| Error::corrupt(format!("header describes an invalid network: {e}")))?;
        let mut params = Vec::with_capacity(PARAM_NAMES.len());
        for (name, want) in PARAM_NAMES.iter().zip(expect.params()) {
            r.expect_name(name)?;
            let dims = r.dims()?;
            if dims != want.dims() {
                return Err(Error::corrupt(format!(
                    "{name}: stored dims {dims:?}, architecture needs {:?}",
                    want.dims()
                )));
            }
            let data = r.f32s(want.len())?;
            params.push(
                Tensor::from_vec(&dims, data)
                    .map_err(|e| Error::corrupt(format!("{name}: {e}")))?,
            );
        }
        r.finish()?;
        let network =
            Network::from_params(meta.config, params).map_err(|e| Error::corrupt(e.to_string()))?;
        let ckpt = Checkpoint {
            network,
            labels: meta.labels,
            step: meta.step,
            seed: meta.seed,
            base: meta.base,
        };
        ckpt.validate().map_err(|e| Error::corrupt(e.to_string()))?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn header(&self) -> String {
        let c = self.config();
        let join = |v: &[usize]| {
            v.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut h = String::new();
        let _ = writeln!(h, "num_classes={}", c.num_classes);
        let _ = writeln!(h, "input_dims={}", join(&c.input_dims));
        let _ = writeln!(h, "conv_channels={}", join(&c.conv_channels));
        let _ = writeln!(h, "fc_hidden={}", c.fc_hidden);
        match &c.lrn {
            Some(p) => {
                let _ = writeln!(h, "lrn=on");
                let _ = writeln!(
                    h,
                    "lrn_params={},{},{},{}",
                    p.depth_radius, p.bias, p.alpha, p.beta
                );
            }
            None => {
                let _ = writeln!(h, "lrn=off");
            }
        }
        for l in &self.labels {
            let _ = writeln!(h, "label={l}");
        }
        let _ = writeln!(h, "step={}", self.step);
        let _ = writeln!(h, "seed={}", self.seed);
        if let Some(b) = &self.base {
            let _ = writeln!(h, "base={b}");
        }
        h
    }
}

/// Replaces the output layer with a fresh `new_num_classes`-way one.
///
/// Every other tensor is copied verbatim, the step counter restarts at zero
/// and `labels` become the new class names. The head is reinitialized even
/// when the class count does not change.
pub fn swap_head(
    ckpt: &Checkpoint,
    new_num_classes: usize,
    labels: Vec<String>,
    rng: &mut Rng,
) -> Result<Checkpoint> {
    if labels.len() != new_num_classes {
        return Err(Error::ClassCountMismatch {
            expected: new_num_classes,
            found: labels.len(),
        });
    }
    Checkpoint::new(
        ckpt.network.with_new_head(new_num_classes, rng)?,
        labels,
        0,
        ckpt.seed,
    )
}

/// Lowercase hex SHA-256 of a file, used to record where a fine-tuned model
/// came from.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let digest = Sha256::digest(fs::read(path)?);
    let mut hex = String::with_capacity(64);
    for b in digest {
        let _ = write!(hex, "{b:02x}");
    }
    Ok(hex)
}

/// `model.ckpt` -> `model.adam`
pub fn adam_path(model: impl AsRef<Path>) -> PathBuf {
    model.as_ref().with_extension("adam")
}

pub fn adam_to_bytes(opt: &Adam) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(ADAM_MAGIC);
    put_u32(&mut out, VERSION);
    let c = &opt.config;
    for v in [c.learning_rate, c.beta1, c.beta2, c.epsilon] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if opt.states.len() != PARAM_NAMES.len() {
        return Err(Error::shape("optimizer state does not cover the network"));
    }
    for (name, s) in PARAM_NAMES.iter().zip(&opt.states) {
        put_name(&mut out, name)?;
        out.extend_from_slice(&s.t.to_le_bytes());
        put_dims(&mut out, s.m.dims())?;
        put_f32s(&mut out, s.m.data());
        put_f32s(&mut out, s.v.data());
    }
    Ok(out)
}

/// Reads optimizer state and checks it against `net`.
pub fn adam_from_bytes(bytes: &[u8], net: &Network) -> Result<Adam> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != ADAM_MAGIC {
        return Err(Error::corrupt("bad magic, not an optimizer state file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::corrupt(format!(
            "unsupported format version {version}"
        )));
    }
    let mut hyper = [0f64; 4];
    for h in &mut hyper {
        *h = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    }
    let [learning_rate, beta1, beta2, epsilon] = hyper;
    let config = AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    };
    config
        .validate()
        .map_err(|e| Error::corrupt(e.to_string()))?;
    let mut states = Vec::with_capacity(PARAM_NAMES.len());
    for (name, p) in PARAM_NAMES.iter().zip(net.params()) {
        r.expect_name(name)?;
        let t = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let dims = r.dims()?;
        if dims != p.dims() {
            return Err(Error::corrupt(format!(
                "{name}: optimizer state dims {dims:?} do not match parameter {:?}",
                p.dims()
            )));
        }
        let corrupt = |e: Error| Error::corrupt(format!("{name}: {e}"));
        let m = Tensor::from_vec(&dims, r.f32s(p.len())?).map_err(corrupt)?;
        let v = Tensor::from_vec(&dims, r.f32s(p.len())?).map_err(corrupt)?;
        if v.data().iter().any(|&x| x < 0.0) {
            return Err(Error::corrupt(format!("{name}: negative second moment")));
        }
        states.push(AdamState { m, v, t });
    }
    r.finish()?;
    Ok(Adam { config, states })
}

pub fn save_adam(opt: &Adam, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, adam_to_bytes(opt)?)?;
    Ok(())
}

pub fn load_adam(path: impl AsRef<Path>, net: &Network) -> Result<Adam> {
    adam_from_bytes(&fs::read(path)?, net)
}

struct Header {
    config: NetworkConfig,
    labels: Vec<String>,
    step: u64,
    seed: u64,
    base: Option<String>,
}

impl Header {
    fn parse(text: &str) -> Result<Header> {
        let mut num_classes = None;
        let mut input_dims = None;
        let mut conv_channels = None;
        let mut fc_hidden = None;
        let mut lrn_on = None;
        let mut lrn_params = None;
        let mut labels = Vec::new();
        let mut step = None;
        let mut seed = None;
        let mut base = None;

        for line in text.lines() {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::corrupt(format!("malformed header line {line:?}")))?;
            match key {
                "num_classes" => num_classes = Some(parse_num(key, value)?),
                "input_dims" => input_dims = Some(parse_list::<3>(key, value)?),
                "conv_channels" => conv_channels = Some(parse_list::<2>(key, value)?),
                "fc_hidden" => fc_hidden = Some(parse_num(key, value)?),
                "lrn" => {
                    lrn_on = Some(match value {
                        "on" => true,
                        "off" => false,
                        _ => {
                            return Err(Error::corrupt(format!(
                                "lrn must be on or off, got {value:?}"
                            )))
                        }
                    })
                }
                "lrn_params" => lrn_params = Some(parse_lrn(value)?),
                "label" => labels.push(value.to_string()),
                "step" => step = Some(parse_num(key, value)?),
                "seed" => seed = Some(parse_num(key, value)?),
                "base" => base = Some(value.to_string()),
                _ => return Err(Error::corrupt(format!("unknown header key {key:?}"))),
            }
        }

        let missing = |k: &str| Error::corrupt(format!("header lacks {k}"));
        let lrn = match lrn_on.ok_or_else(|| missing("lrn"))? {
            true => Some(lrn_params.ok_or_else(|| missing("lrn_params"))?),
            false => None,
        };
        let config = NetworkConfig {
            input_dims: input_dims.ok_or_else(|| missing("input_dims"))?,
            conv_channels: conv_channels.ok_or_else(|| missing("conv_channels"))?,
            fc_hidden: fc_hidden.ok_or_else(|| missing("fc_hidden"))? as usize,
            num_classes: num_classes.ok_or_else(|| missing("num_classes"))? as usize,
            lrn,
        };
        Ok(Header {
            config,
            labels,
            step: step.ok_or_else(|| missing("step"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            base,
        })
    }
}

fn parse_num(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| Error::corrupt(format!("{key}: not an integer: {value:?}")))
}

fn parse_list<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|v| parse_num(key, v).map(|n| n as usize))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::corrupt(format!("{key}: expected {N} values, got {value:?}")))
}

fn parse_lrn(value: &str) -> Result<LrnParams> {
    let bad = || Error::corrupt(format!("malformed lrn_params {value:?}"));
    let parts: Vec<&str> = value.split(',').collect();
    let [r, k, a, b] = parts[..] else {
        return Err(bad());
    };
    let float = |s: &str| s.parse::<f32>().map_err(|_| bad());
    Ok(LrnParams {
        depth_radius: r.parse().map_err(|_| bad())?,
        bias: float(k)?,
        alpha: float(a)?,
        beta: float(b)?,
    })
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::invalid(format!("length {n} exceeds the u32 range")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    put_u32(out, len_u32(name.len())?);
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

fn put_dims(out: &mut Vec<u8>, dims: &[usize]) -> Result<()> {
    put_u32(out, len_u32(dims.len())?);
    for &d in dims {
        put_u32(out, len_u32(d)?);
    }
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Bounds-checked cursor; running off the end means the file was truncated.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::corrupt(format!(
                    "truncated: needed {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn expect_name(&mut self, name: &str) -> Result<()> {
        if self.pos == self.bytes.len() {
            return Err(Error::corrupt(format!(
                "truncated: tensor {name} is missing"
            )));
        }
        let len = self.u32()? as usize;
        let got = self.take(len)?;
        if got != name.as_bytes() {
            return Err(Error::corrupt(format!(
                "expected tensor {name}, found {:?}",
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()? as usize;
        if n == 0 || n > crate::tensor::MAX_RANK {
            return Err(Error::corrupt(format!("tensor rank {n} out of range")));
        }
        (0..n).map(|_| self.u32().map(|d| d as usize)).collect()
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::corrupt("tensor too large"))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::corrupt(format!(
                "{} unexpected trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(classes: usize, lrn: bool) -> NetworkConfig {
        NetworkConfig {
            input_dims: [3, 8, 8],
            conv_channels: [2, 3],
            fc_hidden: 4,
            num_classes: classes,
            lrn: lrn.then(LrnParams::default),
        }
    }

    fn labels(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn sample(seed: u64, lrn: bool) -> Checkpoint {
        let net = Network::new(tiny(2, lrn), &mut Rng::new(seed)).unwrap();
        Checkpoint::new(net, labels(&["crack", "negative"]), 42, seed).unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        for lrn in [true, false] {
            let c = sample(3, lrn);
            let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
            assert_eq!(back, c);
            for (a, b) in back.network.params().iter().zip(c.network.params()) {
                assert!(a.bitwise_eq(b));
            }
        }
    }

    #[test]
    fn encoding_is_stable() {
        let c = sample(5, true);
        assert_eq!(c.to_bytes().unwrap(), c.clone().to_bytes().unwrap());
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"CRKM");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
    }

    #[test]
    fn labels_survive_in_order() {
        let c = Checkpoint::from_bytes(&sample(1, true).to_bytes().unwrap()).unwrap();
        assert_eq!(c.labels, ["crack", "negative"]);
        assert_eq!((c.step, c.seed), (42, 1));
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample(2, true).to_bytes().unwrap();
        for cut in (0..bytes.len()).step_by(7).chain([bytes.len() - 1]) {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::CorruptCheckpoint(_)) => {}
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn trailing_bytes_and_bad_headers_are_rejected() {
        let mut bytes = sample(2, true).to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CorruptCheckpoint(_))
        ));

        let mut bad = sample(2, true).to_bytes().unwrap();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::CorruptCheckpoint(_))
        ));

        let mut bad = sample(2, true).to_bytes().unwrap();
        bad[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn label_count_must_match_head() {
        let net = Network::new(tiny(2, true), &mut Rng::new(0)).unwrap();
        assert!(matches!(
            Checkpoint::new(net, labels(&["a", "b", "c"]), 0, 0),
            Err(Error::ClassCountMismatch {
                expected: 2,
                found: 3
            })
        ));
    }

    #[test]
    fn head_swap_keeps_the_trunk() {
        let base = sample(9, true);
        let swapped = swap_head(
            &base,
            3,
            labels(&["crack", "joint", "none"]),
            &mut Rng::new(1),
        )
        .unwrap();
        for i in 0..6 {
            assert!(swapped.network.params()[i].bitwise_eq(base.network.params()[i]));
        }
        assert_eq!(swapped.network.params()[6].dims(), &[3, 4]);
        assert_eq!(swapped.step, 0);
        assert_eq!(swapped.labels, ["crack", "joint", "none"]);
    }

    #[test]
    fn same_size_head_is_still_fresh() {
        let base = sample(9, true);
        let swapped = swap_head(&base, 2, labels(&["x", "y"]), &mut Rng::new(77)).unwrap();
        assert!(!swapped.network.params()[6].bitwise_eq(base.network.params()[6]));
    }

    #[test]
    fn base_identity_round_trips() {
        let mut c = sample(4, false);
        c.base = Some("ab".repeat(32));
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.base, c.base);
    }

    #[test]
    fn optimizer_state_round_trips() {
        let c = sample(6, true);
        let mut opt = Adam::new(&c.network, AdamConfig::default()).unwrap();
        opt.states[0].t = 17;
        opt.states[0].m.data_mut()[0] = -0.25;
        opt.states[4].v.data_mut()[3] = 1.5;
        let bytes = adam_to_bytes(&opt).unwrap();
        assert_eq!(adam_from_bytes(&bytes, &c.network).unwrap(), opt);
        assert!(adam_from_bytes(&bytes[..bytes.len() - 1], &c.network).is_err());
        let other = Network::new(tiny(3, true), &mut Rng::new(0)).unwrap();
        assert!(adam_from_bytes(&bytes, &other).is_err());
    }

    #[test]
    fn file_round_trip_and_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample(8, true);
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        let d = file_digest(&path).unwrap();
        assert_eq!(d.len(), 64);
        c.save(dir.path().join("m2.ckpt")).unwrap();
        assert_eq!(file_digest(dir.path().join("m2.ckpt")).unwrap(), d);
        assert_eq!(adam_path(&path), dir.path().join("m.adam"));
    }
}
