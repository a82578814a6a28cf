// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes   "CSRF"
//! version      u32
//! header_len   u32
//! header       header_len bytes of UTF-8, one `key=value` per line
//! tensors      repeated `tensor_count` times:
//!                name_len u32, name (UTF-8), rank u32,
//!                dims     rank × u64,
//!                payload  Π dims × f64, row-major
//! ```
//!
//! Header keys written by [`Checkpoint::from_state`]:
//!
//! | key | meaning |
//! |---|---|
//! | `d`, `k`, `rank` | hidden size, number of edits, edit rank |
//! | `sites` | `layer@positions` joined by `;`, positions `all`, `first_last` or `i,j,…` |
//! | `routed`, `router_input`, `threshold` | router presence and settings |
//! | `step` | completed optimizer steps |
//! | `adam.t`, `adam.lr`, `adam.beta1`, `adam.beta2`, `adam.eps` | optimizer state |
//! | `tensor_count` | number of tensor records that follow |
//!
//! Callers may add keys (seeds, backbone checksum); unknown keys are kept.
//! Tensors are the adapter parameters under their [`Adapter::named_params`]
//! names, then `adam.m.<name>` and `adam.v.<name>`, then
//! `train.loss_history`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::adapter::Adapter;
use crate::backbone::{HookSite, Positions};
use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::intervention::SubspaceEdit;
use crate::linalg::Tensor;
use crate::router::{RouterInput, RouterNet};
use crate::trainer::{Adam, TrainState};

pub const MAGIC: [u8; 4] = *b"CSRF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Malformed(format!("missing tensor `{name}`")))
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Malformed(format!("missing header key `{key}`")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Malformed(format!("header key `{key}` has bad value `{raw}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        for (k, v) in &self.header {
            if k != "tensor_count" {
                header.push_str(&format!("{k}={v}\n"));
            }
        }
        header.push_str(&format!("tensor_count={}\n", self.tensors.len()));

        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &dim in t.shape() {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(magic);
            return Err(Error::BadMagic { found });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = r.u32("header length")? as usize;
        let text = std::str::from_utf8(r.take(header_len, "header")?)
            .map_err(|_| Error::Malformed("header is not UTF-8".into()))?;
        let mut header = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Malformed(format!("header line without `=`: {line:?}")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count: usize = header
            .get("tensor_count")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Malformed("header lacks a valid tensor_count".into()))?;

        let mut tensors = Vec::with_capacity(count);
        for i in 0..count {
            let ctx = |what: &str| format!("tensor {i} {what}");
            let name_len = r.u32(&ctx("name length"))? as usize;
            let name = std::str::from_utf8(r.take(name_len, &ctx("name"))?)
                .map_err(|_| Error::Malformed(format!("tensor {i} name is not UTF-8")))?
                .to_string();
            let rank = r.u32(&ctx("rank"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64(&ctx("dims"))? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Malformed(format!("tensor `{name}` dims overflow")))?;
            let payload = r.take(
                len.checked_mul(8)
                    .ok_or_else(|| Error::Malformed(format!("tensor `{name}` too large")))?,
                &format!("payload of `{name}`"),
            )?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { header, tensors })
    }

    /// Snapshot a training state. `extra` header entries are added as-is.
    pub fn from_state(state: &TrainState, extra: &[(&str, String)]) -> Self {
        let a = &state.adapter;
        let mut header = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            header.insert(k.to_string(), v);
        };
        put("d", a.dim().to_string());
        put("k", a.gates().to_string());
        put("rank", a.edits[0][0].rank().to_string());
        put("sites", format_sites(&a.sites));
        put("routed", a.router.is_some().to_string());
        put(
            "router_input",
            match a.router_input {
                RouterInput::FirstToken => "first_token",
                RouterInput::MeanPool => "mean_pool",
            }
            .into(),
        );
        if let Some(r) = &a.router {
            put("threshold", r.threshold.to_string());
        }
        put("step", state.step.to_string());
        put("adam.t", state.adam.t.to_string());
        put("adam.lr", state.adam.lr.to_string());
        put("adam.beta1", state.adam.beta1.to_string());
        put("adam.beta2", state.adam.beta2.to_string());
        put("adam.eps", state.adam.eps.to_string());
        for (k, v) in extra {
            put(k, v.clone());
        }

        let named = a.named_params();
        let mut tensors: Vec<(String, Tensor)> =
            named.iter().map(|(n, t)| (n.clone(), (*t).clone())).collect();
        for (prefix, moments) in [("adam.m", &state.adam.m), ("adam.v", &state.adam.v)] {
            for ((n, _), t) in named.iter().zip(moments) {
                tensors.push((format!("{prefix}.{n}"), t.clone()));
            }
        }
        tensors.push((
            "train.loss_history".into(),
            Tensor::vector(state.loss_history.clone()),
        ));
        header.insert("tensor_count".into(), tensors.len().to_string());
        Self { header, tensors }
    }

    /// Rebuild the training state captured by [`Checkpoint::from_state`].
    pub fn restore(&self) -> Result<TrainState> {
        let k: usize = self.parse("k")?;
        let sites = parse_sites(self.get("sites")?)?;
        let routed: bool = self.parse("routed")?;
        let router_input = match self.get("router_input")? {
            "first_token" => RouterInput::FirstToken,
            "mean_pool" => RouterInput::MeanPool,
            other => return Err(Error::Malformed(format!("unknown router_input `{other}`"))),
        };

        let mut edits = Vec::with_capacity(k);
        for g in 0..k {
            let mut per_site = Vec::with_capacity(sites.len());
            for (s, site) in sites.iter().enumerate() {
                let t = |p: &str| self.tensor(&format!("edit.{g}.{s}.{p}")).cloned();
                per_site.push(SubspaceEdit::new(t("basis")?, t("weight")?, t("bias")?, site.clone())?);
            }
            edits.push(per_site);
        }
        let router = if routed {
            Some(RouterNet {
                w1: self.tensor("router.w1")?.clone(),
                b1: self.tensor("router.b1")?.clone(),
                w2: self.tensor("router.w2")?.clone(),
                b2: self.tensor("router.b2")?.clone(),
                threshold: self.parse("threshold")?,
            })
        } else {
            None
        };
        let adapter = Adapter {
            sites,
            edits,
            router,
            router_input,
        };

        let names: Vec<String> = adapter.named_params().into_iter().map(|(n, _)| n).collect();
        let moments = |prefix: &str| {
            names
                .iter()
                .map(|n| self.tensor(&format!("{prefix}.{n}")).cloned())
                .collect::<Result<Vec<_>>>()
        };
        let adam = Adam {
            lr: self.parse("adam.lr")?,
            beta1: self.parse("adam.beta1")?,
            beta2: self.parse("adam.beta2")?,
            eps: self.parse("adam.eps")?,
            t: self.parse("adam.t")?,
            m: moments("adam.m")?,
            v: moments("adam.v")?,
        };
        Ok(TrainState {
            adapter,
            adam,
            step: self.parse("step")?,
            loss_history: self.tensor("train.loss_history")?.data().to_vec(),
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::TruncatedFile {
                context: context.to_string(),
            }),
        }
    }

    fn u32(&mut self, context: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, context: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().expect("8 bytes")))
    }
}

fn format_sites(sites: &[HookSite]) -> String {
    sites
        .iter()
        .map(|s| {
            let p = match &s.positions {
                Positions::All => "all".to_string(),
                Positions::FirstLast => "first_last".to_string(),
                Positions::Indices(ix) => ix.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            };
            format!("{}@{p}", s.layer)
        })
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_sites(text: &str) -> Result<Vec<HookSite>> {
    let bad = || Error::Malformed(format!("bad sites value `{text}`"));
    text.split(';')
        .map(|part| {
            let (layer, pos) = part.split_once('@').ok_or_else(bad)?;
            let layer = layer.parse().map_err(|_| bad())?;
            let positions = match pos {
                "all" => Positions::All,
                "first_last" => Positions::FirstLast,
                "" => Positions::Indices(Vec::new()),
                list => Positions::Indices(
                    list.split(',')
                        .map(|p| p.parse().map_err(|_| bad()))
                        .collect::<Result<_>>()?,
                ),
            };
            Ok(HookSite::new(layer, positions))
        })
        .collect()
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
