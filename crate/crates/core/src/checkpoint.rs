//! Self-describing checkpoint files.
//!
//! A checkpoint is a UTF-8 text header terminated by a line `end`, followed
//! by little-endian `f64` payload data:
//!
//! ```text
//! aspmcp-checkpoint v1
//! kind <word>
//! meta <key> <value...>
//! param <name> <n_tensors>
//! layer <tensor-name> <d0>x<d1>...
//! adam <name> <step_count> <lr> <beta1> <beta2> <eps> <n_tensors>
//! layer ...
//! rng <seed-hex> <stream> <word_pos>
//! data <n_f64>
//! end
//! ```
//!
//! The payload holds every `param` block in header order, then the first and
//! second moments of every `adam` block.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{AdamState, LayerShape, ParamVector};

pub const FORMAT_TAG: &str = "aspmcp-checkpoint v1";

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub params: Vec<(String, ParamVector)>,
    pub optimizers: Vec<(String, AdamState)>,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            ..Default::default()
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn add_params(&mut self, name: &str, params: &ParamVector) {
        self.params.push((name.to_string(), params.clone()));
    }

    pub fn add_optimizer(&mut self, name: &str, adam: &AdamState) {
        self.optimizers.push((name.to_string(), adam.clone()));
    }

    pub fn params(&self, name: &str) -> Option<&ParamVector> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn optimizer(&self, name: &str) -> Option<&AdamState> {
        self.optimizers.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::LayoutMismatch(format!("checkpoint lacks metadata `{key}`")))
    }

    pub fn require_params(&self, name: &str) -> Result<&ParamVector> {
        self.params(name)
            .ok_or_else(|| Error::LayoutMismatch(format!("checkpoint lacks parameter block `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        header.push_str(FORMAT_TAG);
        header.push('\n');
        check_word(&self.kind)?;
        header.push_str(&format!("kind {}\n", self.kind));
        for (k, v) in &self.meta {
            check_word(k)?;
            if v.contains('\n') {
                return Err(Error::Config(format!("metadata `{k}` contains a newline")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut total = 0usize;
        for (name, p) in &self.params {
            check_word(name)?;
            header.push_str(&format!("param {name} {}\n", p.layout().len()));
            push_layout(&mut header, p.layout())?;
            total += p.len();
        }
        for (name, a) in &self.optimizers {
            check_word(name)?;
            header.push_str(&format!(
                "adam {name} {} {} {} {} {} {}\n",
                a.step_count,
                a.lr,
                a.beta1,
                a.beta2,
                a.eps,
                a.first_moment.layout().len()
            ));
            push_layout(&mut header, a.first_moment.layout())?;
            total += 2 * a.first_moment.len();
        }
        if let Some(r) = &self.rng {
            let hex: String = r.seed.iter().map(|b| format!("{b:02x}")).collect();
            header.push_str(&format!("rng {hex} {} {}\n", r.stream, r.word_pos));
        }
        header.push_str(&format!("data {total}\nend\n"));

        let mut bytes = header.into_bytes();
        bytes.reserve(total * 8);
        let mut put = |vals: &[f64]| {
            for v in vals {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (_, p) in &self.params {
            put(p.values());
        }
        for (_, a) in &self.optimizers {
            put(a.first_moment.values());
            put(a.second_moment.values());
        }
        Ok(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::CorruptCheckpoint { reason, .. } => Error::CorruptCheckpoint {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |reason: String| Error::CorruptCheckpoint {
            path: Default::default(),
            reason,
        };
        let end_marker = b"\nend\n";
        let header_end = bytes
            .windows(end_marker.len())
            .position(|w| w == end_marker)
            .ok_or_else(|| corrupt("missing header terminator".into()))?
            + end_marker.len();
        let header = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| corrupt("header is not UTF-8".into()))?;
        let mut lines = header.lines();
        let tag = lines.next().unwrap_or_default();
        if tag != FORMAT_TAG {
            if tag.starts_with("aspmcp-checkpoint") {
                return Err(Error::CheckpointVersion {
                    expected: FORMAT_TAG.into(),
                    found: tag.into(),
                });
            }
            return Err(corrupt(format!("unrecognized format tag `{tag}`")));
        }

        let mut ckpt = Checkpoint::default();
        let mut param_layouts: Vec<(String, Vec<LayerShape>)> = Vec::new();
        let mut adam_layouts: Vec<(String, [f64; 4], u64, Vec<LayerShape>)> = Vec::new();
        let mut declared = None;
        let mut pending: Option<(usize, bool)> = None; // (remaining layers, is_adam)

        for line in lines {
            let mut parts = line.splitn(2, ' ');
            let key = parts.next().unwrap_or_default();
            let rest = parts.next().unwrap_or_default();
            if let Some((remaining, is_adam)) = pending {
                if key != "layer" || remaining == 0 {
                    return Err(corrupt(format!("expected layer line, found `{line}`")));
                }
                let shape = parse_layer(rest).ok_or_else(|| corrupt(format!("bad layer line `{line}`")))?;
                if is_adam {
                    adam_layouts.last_mut().expect("adam block").3.push(shape);
                } else {
                    param_layouts.last_mut().expect("param block").1.push(shape);
                }
                pending = if remaining == 1 { None } else { Some((remaining - 1, is_adam)) };
                continue;
            }
            let fields: Vec<&str> = rest.split(' ').collect();
            match key {
                "kind" => ckpt.kind = rest.to_string(),
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ckpt.meta.insert(k.to_string(), v.to_string());
                }
                "param" => {
                    let n = fields
                        .get(1)
                        .and_then(|s| s.parse::<usize>().ok())
                        .ok_or_else(|| corrupt(format!("bad param line `{line}`")))?;
                    param_layouts.push((fields[0].to_string(), Vec::new()));
                    if n > 0 {
                        pending = Some((n, false));
                    }
                }
                "adam" => {
                    if fields.len() != 7 {
                        return Err(corrupt(format!("bad adam line `{line}`")));
                    }
                    let step = fields[1].parse::<u64>().map_err(|_| corrupt(line.into()))?;
                    let mut hp = [0.0; 4];
                    for (h, s) in hp.iter_mut().zip(&fields[2..6]) {
                        *h = s.parse::<f64>().map_err(|_| corrupt(line.into()))?;
                    }
                    let n = fields[6].parse::<usize>().map_err(|_| corrupt(line.into()))?;
                    adam_layouts.push((fields[0].to_string(), hp, step, Vec::new()));
                    if n > 0 {
                        pending = Some((n, true));
                    }
                }
                "rng" => {
                    if fields.len() != 3 || fields[0].len() != 64 {
                        return Err(corrupt(format!("bad rng line `{line}`")));
                    }
                    let mut seed = [0u8; 32];
                    for (i, b) in seed.iter_mut().enumerate() {
                        *b = u8::from_str_radix(&fields[0][2 * i..2 * i + 2], 16)
                            .map_err(|_| corrupt("bad rng seed".into()))?;
                    }
                    ckpt.rng = Some(RngState {
                        seed,
                        stream: fields[1].parse().map_err(|_| corrupt("bad rng stream".into()))?,
                        word_pos: fields[2].parse().map_err(|_| corrupt("bad rng position".into()))?,
                    });
                }
                "data" => declared = Some(rest.parse::<usize>().map_err(|_| corrupt(line.into()))?),
                "end" => break,
                _ => return Err(corrupt(format!("unknown header line `{line}`"))),
            }
        }
        if pending.is_some() {
            return Err(corrupt("header ended inside a layout block".into()));
        }
        let declared = declared.ok_or_else(|| corrupt("missing data line".into()))?;
        let numel = |l: &[LayerShape]| l.iter().map(LayerShape::numel).sum::<usize>();
        let expected: usize = param_layouts.iter().map(|(_, l)| numel(l)).sum::<usize>()
            + adam_layouts.iter().map(|(_, _, _, l)| 2 * numel(l)).sum::<usize>();
        if expected != declared {
            return Err(corrupt(format!("layouts hold {expected} values but header declares {declared}")));
        }
        let payload = &bytes[header_end..];
        if payload.len() != declared * 8 {
            return Err(corrupt(format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                declared * 8
            )));
        }
        let mut floats = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |n: usize| -> Vec<f64> { floats.by_ref().take(n).collect() };
        for (name, layout) in param_layouts {
            let vals = take(numel(&layout));
            let p = ParamVector::from_values(layout, vals).map_err(|e| corrupt(e.to_string()))?;
            ckpt.params.push((name, p));
        }
        for (name, hp, step, layout) in adam_layouts {
            let n = numel(&layout);
            let m = ParamVector::from_values(layout.clone(), take(n)).map_err(|e| corrupt(e.to_string()))?;
            let v = ParamVector::from_values(layout, take(n)).map_err(|e| corrupt(e.to_string()))?;
            ckpt.optimizers.push((
                name,
                AdamState {
                    first_moment: m,
                    second_moment: v,
                    step_count: step,
                    lr: hp[0],
                    beta1: hp[1],
                    beta2: hp[2],
                    eps: hp[3],
                },
            ));
        }
        Ok(ckpt)
    }
}

fn check_word(s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(Error::Config(format!("checkpoint name `{s}` must be a non-empty word")));
    }
    Ok(())
}

fn push_layout(header: &mut String, layout: &[LayerShape]) -> Result<()> {
    for l in layout {
        check_word(&l.name)?;
        let dims: Vec<String> = l.shape.iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("layer {} {}\n", l.name, dims.join("x")));
    }
    Ok(())
}

fn parse_layer(rest: &str) -> Option<LayerShape> {
    let (name, dims) = rest.split_once(' ')?;
    let shape = if dims.is_empty() {
        Vec::new()
    } else {
        dims.split('x').map(|d| d.parse().ok()).collect::<Option<Vec<usize>>>()?
    };
    Some(LayerShape::new(name, shape))
}
