//! Checkpoint files.
//!
//! Line 1 is a JSON header with the format tag, run metadata and, for each
//! network, its kind, layout and block table (name, rows, cols, real).
//! Every following line holds one block in header order:
//! `name,re,im,re,im,...` over the row-major entries. Values use the
//! shortest representation that parses back to the same `f64`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BlackboxLayout, BlackboxParams, CedunLayout, CedunParams, HbdunLayout, HbdunParams, ParamBlock, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{c64, CMatrix};

pub const FORMAT_TAG: &str = "hbunfold-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// Training steps completed.
    pub step: usize,
    pub stage: String,
    #[serde(default)]
    pub config_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSection {
    pub kind: String,
    pub layout: serde_json::Value,
    pub store: ParamStore,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub networks: Vec<NetworkSection>,
}

#[derive(Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    rows: usize,
    cols: usize,
    real: bool,
}

#[derive(Serialize, Deserialize)]
struct SectionHeader {
    kind: String,
    layout: serde_json::Value,
    blocks: Vec<BlockHeader>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    meta: CheckpointMeta,
    networks: Vec<SectionHeader>,
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("layouts serialize")
}

fn from_json<T: for<'de> Deserialize<'de>>(v: &serde_json::Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| Error::Schema(format!("layout: {e}")))
}

impl NetworkSection {
    pub fn from_cedun(p: &CedunParams) -> Self {
        NetworkSection {
            kind: "cedun".into(),
            layout: to_json(&p.layout),
            store: p.store.clone(),
        }
    }

    pub fn from_hbdun(p: &HbdunParams) -> Self {
        NetworkSection {
            kind: "hbdun".into(),
            layout: to_json(&p.layout),
            store: p.store.clone(),
        }
    }

    pub fn from_blackbox(p: &BlackboxParams) -> Self {
        NetworkSection {
            kind: "blackbox".into(),
            layout: to_json(&p.layout),
            store: p.store.clone(),
        }
    }

    pub fn to_cedun(&self) -> Result<CedunParams> {
        let layout: CedunLayout = from_json(&self.layout)?;
        CedunParams::from_store(layout, self.store.clone())
    }

    pub fn to_hbdun(&self) -> Result<HbdunParams> {
        let layout: HbdunLayout = from_json(&self.layout)?;
        HbdunParams::from_store(layout, self.store.clone())
    }

    pub fn to_blackbox(&self) -> Result<BlackboxParams> {
        let layout: BlackboxLayout = from_json(&self.layout)?;
        BlackboxParams::from_store(layout, self.store.clone())
    }
}

impl Checkpoint {
    /// First section of the given kind whose layout carries `prefix`, if any.
    pub fn section(&self, kind: &str, prefix: Option<&str>) -> Option<&NetworkSection> {
        self.networks.iter().find(|s| {
            s.kind == kind && prefix.map_or(true, |p| s.layout.get("prefix").and_then(|v| v.as_str()) == Some(p))
        })
    }

    pub fn write(&self, out: &mut dyn Write) -> Result<()> {
        let header = Header {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            meta: self.meta.clone(),
            networks: self
                .networks
                .iter()
                .map(|s| SectionHeader {
                    kind: s.kind.clone(),
                    layout: s.layout.clone(),
                    blocks: s
                        .store
                        .blocks
                        .iter()
                        .map(|b| BlockHeader {
                            name: b.name.clone(),
                            rows: b.value.rows(),
                            cols: b.value.cols(),
                            real: b.real,
                        })
                        .collect(),
                })
                .collect(),
        };
        let line = serde_json::to_string(&header).map_err(|e| Error::Schema(e.to_string()))?;
        writeln!(out, "{line}")?;
        for s in &self.networks {
            for b in &s.store.blocks {
                write!(out, "{}", b.name)?;
                for z in b.value.data() {
                    write!(out, ",{},{}", z.re, z.im)?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }

    pub fn read(input: &mut dyn BufRead) -> Result<Self> {
        let mut lines = input.lines();
        let first = lines.next().ok_or_else(|| Error::Schema("empty checkpoint".into()))??;
        let header: Header = serde_json::from_str(&first).map_err(|e| Error::Schema(format!("header: {e}")))?;
        if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint {} v{}",
                header.format, header.version
            )));
        }
        let mut networks = Vec::with_capacity(header.networks.len());
        for sh in header.networks {
            let mut store = ParamStore::new();
            for bh in sh.blocks {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::Schema(format!("missing block `{}`", bh.name)))??;
                let mut fields = line.split(',');
                let name = fields.next().unwrap_or_default();
                if name != bh.name {
                    return Err(Error::Schema(format!("expected block `{}`, found `{name}`", bh.name)));
                }
                let nums = fields
                    .map(|f| f.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<f64>, _>>()
                    .map_err(|e| Error::Schema(format!("block `{name}`: {e}")))?;
                if nums.len() != 2 * bh.rows * bh.cols {
                    return Err(Error::Schema(format!(
                        "block `{name}` has {} numbers, expected {}",
                        nums.len(),
                        2 * bh.rows * bh.cols
                    )));
                }
                let data = nums.chunks(2).map(|p| c64(p[0], p[1])).collect();
                store.blocks.push(ParamBlock {
                    name: bh.name,
                    value: CMatrix::from_vec(bh.rows, bh.cols, data),
                    real: bh.real,
                });
            }
            networks.push(NetworkSection {
                kind: sh.kind,
                layout: sh.layout,
                store,
            });
        }
        Ok(Checkpoint {
            meta: header.meta,
            networks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::SystemDims;
    use crate::numerics::Rng;
    use crate::unfolding::HbdunMode;

    #[test]
    fn round_trip_is_exact() {
        let dims = SystemDims::desk(10.0);
        let mut rng = Rng::new(4);
        let hb = HbdunParams::init(HbdunLayout::new(&dims, 2, false, HbdunMode::Learned), &dims, &mut rng).unwrap();
        let ce = CedunParams::init(CedunLayout::equivalent(&dims, 3, 1e-3), 0.99, &mut rng).unwrap();
        let ck = Checkpoint {
            meta: CheckpointMeta {
                seed: 4,
                step: 17,
                stage: "stage1".into(),
                config_sha256: None,
            },
            networks: vec![NetworkSection::from_hbdun(&hb), NetworkSection::from_cedun(&ce)],
        };
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let back = Checkpoint::read(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.section("hbdun", None).unwrap().to_hbdun().unwrap(), hb);
        assert_eq!(back.section("cedun", Some("cedun")).unwrap().to_cedun().unwrap(), ce);
    }

    #[test]
    fn rejects_truncated_block() {
        let dims = SystemDims::desk(10.0);
        let mut rng = Rng::new(5);
        let ce = CedunParams::init(CedunLayout::equivalent(&dims, 2, 1e-3), 0.99, &mut rng).unwrap();
        let ck = Checkpoint {
            meta: CheckpointMeta::default(),
            networks: vec![NetworkSection::from_cedun(&ce)],
        };
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(matches!(Checkpoint::read(&mut cut.as_bytes()), Err(Error::Schema(_))));
    }
}
