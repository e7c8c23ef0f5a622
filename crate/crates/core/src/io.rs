//! File formats: binary PGM/PPM, checkpoints, key=value configs, manifests
//! and sampler trace dumps.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::corrector::CrtModel;
use crate::denoiser::TinyDenoiser;
use crate::error::{DpiError, Result};
use crate::image::ImageTensor;
use crate::nn::{UNet, UNetConfig};
use crate::sampler::{SampleTrace, StepRule};

const MODULE: &str = "io";

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| DpiError::io(path.display().to_string(), e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| DpiError::io(path.display().to_string(), e))
}

pub fn to_byte(x: f64) -> u8 {
    (x.clamp(-1.0, 1.0) * 127.5 + 127.5).round() as u8
}

pub fn from_byte(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Parses binary PGM (P5, one channel) or PPM (P6, three channels), maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<ImageTensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(DpiError::data(MODULE, "truncated PNM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(DpiError::data(MODULE, format!("unsupported PNM magic {m:?}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| DpiError::data(MODULE, format!("bad PNM header field {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(DpiError::data(MODULE, format!("only 8-bit PNM is supported, maxval {maxval}")));
    }
    let n = w * h * channels;
    let body = bytes.get(pos..pos + n).ok_or_else(|| DpiError::data(MODULE, "truncated PNM payload"))?;
    let mut img = ImageTensor::zeros(h, w, channels);
    for i in 0..h {
        for j in 0..w {
            for c in 0..channels {
                img.set(i, j, c, from_byte(body[(i * w + j) * channels + c]));
            }
        }
    }
    Ok(img)
}

pub fn encode_pnm(img: &ImageTensor) -> Result<Vec<u8>> {
    let (h, w, c) = img.shape();
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(DpiError::shape(MODULE, format!("PNM needs 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                out.push(to_byte(img.get(i, j, ch)));
            }
        }
    }
    Ok(out)
}

pub fn read_pnm(path: &Path) -> Result<ImageTensor> {
    decode_pnm(&read(path)?).map_err(|e| match e {
        DpiError::Data { msg, .. } => DpiError::data(MODULE, format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_pnm(path: &Path, img: &ImageTensor) -> Result<()> {
    write(path, &encode_pnm(img)?)
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DPICKPT1";
const DTYPE_F32: u8 = 0;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct CkptTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named `f32` tensors. Metadata is carried as empty tensors named
/// `meta.<key>=<value>`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<CkptTensor>,
}

impl Checkpoint {
    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.tensors.push(CkptTensor { name: format!("meta.{key}={}", value.to_string()), shape: vec![0], data: Vec::new() });
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        let prefix = format!("meta.{key}=");
        self.tensors.iter().find_map(|t| t.name.strip_prefix(&prefix))
    }

    fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| DpiError::data(MODULE, format!("checkpoint lacks integer metadata {key:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.shape.len() as u8);
            for d in &t.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
        }
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| DpiError::data(MODULE, format!("corrupt checkpoint: {m}"));
        if bytes.len() < 8 + 4 + 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if fnv1a64(body) != stored {
            return Err(bad("checksum mismatch"));
        }
        let mut pos = 8;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = body.get(pos..pos + n).ok_or_else(|| bad("truncated header"))?;
            pos += n;
            Ok(s)
        };
        let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let mut headers = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
            let dtype = take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(bad("unknown element type"));
            }
            let ndim = take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize);
            }
            headers.push((name, shape));
        }
        let total: usize = headers.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        let payload = &body[pos..];
        if payload.len() != total * 4 {
            return Err(bad("payload length does not match header"));
        }
        let mut off = 0;
        let tensors = headers
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = payload[off..off + 4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                off += 4 * n;
                CkptTensor { name, shape, data }
            })
            .collect();
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read(path)?)
    }
}

/// Serialises a network with its architecture metadata.
pub fn net_to_checkpoint(net: &UNet, kind: &str, extra: &[(&str, String)]) -> Checkpoint {
    let cfg = net.config();
    let mut ck = Checkpoint::default();
    ck.push_meta("kind", kind);
    ck.push_meta("in_ch", cfg.in_ch);
    ck.push_meta("out_ch", cfg.out_ch);
    ck.push_meta("base", cfg.base);
    ck.push_meta("cond", cfg.cond as u8);
    for (k, v) in extra {
        ck.push_meta(k, v);
    }
    for spec in net.params().specs() {
        let data = net.params().data()[spec.offset..spec.offset + spec.len()].iter().map(|v| *v as f32).collect();
        ck.tensors.push(CkptTensor { name: spec.name.clone(), shape: spec.shape.clone(), data });
    }
    ck
}

pub fn net_from_checkpoint(ck: &Checkpoint, kind: &str) -> Result<UNet> {
    match ck.meta("kind") {
        Some(k) if k == kind => {}
        other => return Err(DpiError::data(MODULE, format!("expected a {kind:?} checkpoint, found {other:?}"))),
    }
    let cfg = UNetConfig {
        in_ch: ck.meta_usize("in_ch")?,
        out_ch: ck.meta_usize("out_ch")?,
        base: ck.meta_usize("base")?,
        cond: ck.meta_usize("cond")? != 0,
    };
    let mut net = UNet::new(cfg)?;
    let weights: Vec<&CkptTensor> = ck.tensors.iter().filter(|t| !t.name.starts_with("meta.")).collect();
    if weights.len() != net.params().specs().len() {
        return Err(DpiError::data(MODULE, "checkpoint tensor count does not match the architecture"));
    }
    let specs = net.params().specs().to_vec();
    for (spec, t) in specs.iter().zip(weights) {
        if spec.name != t.name || spec.shape != t.shape {
            return Err(DpiError::data(MODULE, format!("checkpoint tensor {:?} does not match {:?}", t.name, spec.name)));
        }
        let dst = &mut net.params_mut().data_mut()[spec.offset..spec.offset + spec.len()];
        dst.iter_mut().zip(&t.data).for_each(|(d, s)| *d = *s as f64);
    }
    Ok(net)
}

pub fn save_denoiser(path: &Path, d: &TinyDenoiser, extra: &[(&str, String)]) -> Result<()> {
    net_to_checkpoint(&d.net, "tiny-unet", extra).save(path)
}

pub fn load_denoiser(path: &Path) -> Result<TinyDenoiser> {
    TinyDenoiser::from_net(net_from_checkpoint(&Checkpoint::load(path)?, "tiny-unet")?)
}

pub fn save_crt(path: &Path, m: &CrtModel, extra: &[(&str, String)]) -> Result<()> {
    net_to_checkpoint(&m.net, "crt", extra).save(path)
}

pub fn load_crt(path: &Path) -> Result<CrtModel> {
    CrtModel::from_net(net_from_checkpoint(&Checkpoint::load(path)?, "crt")?)
}

/// Parses `key = value` lines; `#` starts a comment. Duplicate keys are errors.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DpiError::param(MODULE, format!("config line {}: expected key=value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(DpiError::param(MODULE, format!("config line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(DpiError::param(MODULE, format!("config line {}: duplicate key {k:?}", n + 1)));
        }
    }
    Ok(out)
}

pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let bytes = read(path)?;
    parse_config(&String::from_utf8_lossy(&bytes))
}

/// `key=value` lines in the given order.
pub fn render_manifest(entries: &[(String, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn write_manifest(path: &Path, entries: &[(String, String)]) -> Result<()> {
    write(path, render_manifest(entries).as_bytes())
}

/// Writes `y_T`, numbered `x`/`y` snapshots and `trace.txt` (`t,rule,w,popcount`).
pub fn dump_trace(dir: &Path, trace: &SampleTrace) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DpiError::io(dir.display().to_string(), e))?;
    if let Some(y) = &trace.y_t0 {
        write_pnm(&dir.join("y_T.pgm").with_extension(ext(y)), y)?;
    }
    let mut index = String::from("t,rule,w,popcount\n");
    for r in &trace.records {
        write_pnm(&dir.join(format!("x_{:04}.{}", r.t, ext(&r.x))), &r.x)?;
        write_pnm(&dir.join(format!("y_{:04}.{}", r.t, ext(&r.y))), &r.y)?;
        let rule = match r.rule {
            StepRule::Fcm => "fcm",
            StepRule::Racm => "racm",
        };
        let w = r.w.map(|w| w.to_string()).unwrap_or_default();
        let pop = r.mask_popcount.map(|p| p.to_string()).unwrap_or_default();
        index.push_str(&format!("{},{rule},{w},{pop}\n", r.t));
    }
    write(&dir.join("trace.txt"), index.as_bytes())
}

fn ext(img: &ImageTensor) -> &'static str {
    if img.channels() == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_round_trip_and_mapping() {
        let img = ImageTensor::from_fn(3, 5, 1, |i, j, _| from_byte((i * 50 + j * 7) as u8));
        let bytes = encode_pnm(&img).unwrap();
        assert!(bytes.starts_with(b"P5\n5 3\n255\n"));
        assert_eq!(decode_pnm(&bytes).unwrap(), img);
        let rgb = ImageTensor::from_fn(2, 2, 3, |i, j, c| from_byte((i + 2 * j + 60 * c) as u8));
        assert_eq!(decode_pnm(&encode_pnm(&rgb).unwrap()).unwrap(), rgb);
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(7.0), 255);
        assert_eq!(from_byte(0), -1.0);
        assert_eq!(from_byte(255), 1.0);
        let commented = b"P5\n# note\n2 1\n255\n\x00\xff";
        assert_eq!(decode_pnm(commented).unwrap().data(), &[-1.0, 1.0]);
        assert!(decode_pnm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pnm(b"P5\n4 4\n255\n\x00").is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let mut net = UNet::new(UNetConfig { in_ch: 1, out_ch: 1, base: 2, cond: true }).unwrap();
        net.randomize_all(&mut crate::rng::RngStreams::new(1).stream(crate::rng::Domain::Init, 0), 0.5);
        let ck = net_to_checkpoint(&net, "crt", &[("k", "2".into())]);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.meta("k"), Some("2"));
        let loaded = net_from_checkpoint(&back, "crt").unwrap();
        let mut rounded = net.params().clone();
        rounded.round_to_f32();
        assert_eq!(loaded.params(), &rounded);
        assert!(net_from_checkpoint(&back, "tiny-unet").is_err());
        for pos in [3usize, 20, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            assert!(Checkpoint::from_bytes(&bad).is_err(), "flip at {pos}");
        }
    }

    #[test]
    fn config_parsing() {
        let c = parse_config("# comment\nsteps = 20\n\neta=0.1 # trailing\n").unwrap();
        assert_eq!(c["steps"], "20");
        assert_eq!(c["eta"], "0.1");
        assert!(parse_config("novalue\n").is_err());
        assert!(parse_config("a=1\na=2\n").is_err());
        assert_eq!(render_manifest(&[("a".into(), "1".into()), ("b".into(), "x y".into())]), "a=1\nb=x y\n");
    }
}
