//! Binary container: magic, version, a JSON schema holding the structure
//! with every real number replaced by an index into a trailing array of
//! little-endian `f64`. See `docs/vocabulary-format.md`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    validate, Appearance, Composition, EdgeModel, Layer, OrComposition, Part, Polarity, Vocabulary,
};
use crate::config::Aggregation;
use crate::error::{Error, Result};
use crate::geometry::Gaussian2;

pub const MAGIC: &[u8; 8] = b"SHVOCAB1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Schema {
    orientations: usize,
    object_layer: usize,
    aggregation: Aggregation,
    alpha: usize,
    epsilon: usize,
    edge_models: Vec<EdgeSchema>,
    layers: Vec<LayerSchema>,
    classes: BTreeMap<String, Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeSchema {
    orientation: usize,
    estimated: bool,
    /// `n` means followed by `n * n` covariance entries.
    params: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerSchema {
    index: usize,
    radius: u32,
    rho: usize,
    tau: usize,
    compositions: Vec<CompSchema>,
    or_nodes: Vec<OrComposition>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompSchema {
    id: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    parts: Vec<PartSchema>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    threshold: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartSchema {
    /// (OR id, float index of the weight).
    appearance: Vec<(u32, usize)>,
    /// Float index of mean x, mean y, cov xx, cov xy, cov yy.
    geometry: usize,
    polarity: Polarity,
}

struct Sink(Vec<f64>);

impl Sink {
    fn put(&mut self, x: f64) -> usize {
        self.0.push(x);
        self.0.len() - 1
    }

    fn put_all(&mut self, xs: &[f64]) -> usize {
        let at = self.0.len();
        self.0.extend_from_slice(xs);
        at
    }
}

struct Source<'a>(&'a [f64]);

impl Source<'_> {
    fn get(&self, i: usize) -> Result<f64> {
        self.0
            .get(i)
            .copied()
            .ok_or_else(|| Error::Corrupt(format!("float index {i} out of range")))
    }

    fn slice(&self, at: usize, len: usize) -> Result<&[f64]> {
        at.checked_add(len)
            .and_then(|end| self.0.get(at..end))
            .ok_or_else(|| Error::Corrupt(format!("float range {at}+{len} out of range")))
    }
}

pub fn to_bytes(v: &Vocabulary) -> Result<Vec<u8>> {
    let mut sink = Sink(Vec::new());
    let alpha = sink.put(v.alpha);
    let epsilon = sink.put(v.epsilon);
    let edge_models = v
        .edge_models
        .iter()
        .map(|m| {
            let params = sink.put_all(&m.mean);
            sink.put_all(&m.cov);
            EdgeSchema {
                orientation: m.orientation,
                estimated: m.estimated,
                params,
            }
        })
        .collect();
    let layers = v
        .layers
        .iter()
        .map(|layer| LayerSchema {
            index: layer.index,
            radius: layer.radius,
            rho: sink.put(layer.rho),
            tau: sink.put(layer.tau),
            compositions: layer
                .compositions
                .iter()
                .map(|c| CompSchema {
                    id: c.id,
                    parts: c
                        .parts
                        .iter()
                        .map(|p| {
                            let g = &p.geometry;
                            PartSchema {
                                appearance: p
                                    .appearance
                                    .weights
                                    .iter()
                                    .map(|&(id, w)| (id, sink.put(w)))
                                    .collect(),
                                geometry: sink.put_all(&[
                                    g.mean[0], g.mean[1], g.cov[0][0], g.cov[0][1], g.cov[1][1],
                                ]),
                                polarity: p.polarity,
                            }
                        })
                        .collect(),
                    threshold: c.threshold.map(|t| sink.put(t)),
                })
                .collect(),
            or_nodes: layer.or_nodes.clone(),
        })
        .collect();
    let schema = Schema {
        orientations: v.orientations,
        object_layer: v.object_layer,
        aggregation: v.aggregation,
        alpha,
        epsilon,
        edge_models,
        layers,
        classes: v.classes.clone(),
    };
    let json = serde_json::to_vec(&schema)?;
    let mut out = Vec::with_capacity(28 + json.len() + 8 * sink.0.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(sink.0.len() as u64).to_le_bytes());
    for x in &sink.0 {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Corrupt(format!("truncated while reading {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn read_u64(bytes: &mut &[u8], what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(take(bytes, 8, what)?.try_into().unwrap()))
}

/// Parse without validating.
pub fn from_bytes(mut bytes: &[u8]) -> Result<Vocabulary> {
    let b = &mut bytes;
    if take(b, 8, "magic")? != MAGIC {
        return Err(Error::Corrupt("not a vocabulary file".into()));
    }
    let version = u32::from_le_bytes(take(b, 4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let json_len = read_u64(b, "schema length")? as usize;
    let json = take(b, json_len, "schema")?;
    let schema: Schema =
        serde_json::from_slice(json).map_err(|e| Error::Corrupt(format!("schema: {e}")))?;
    let count = read_u64(b, "float count")? as usize;
    let raw = take(b, count.checked_mul(8).ok_or_else(|| Error::Corrupt("float count".into()))?, "floats")?;
    if !b.is_empty() {
        return Err(Error::Corrupt("trailing bytes".into()));
    }
    let floats: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let src = Source(&floats);
    let n = schema.orientations;

    let edge_models = schema
        .edge_models
        .iter()
        .map(|e| {
            let p = src.slice(e.params, n + n * n)?;
            Ok(EdgeModel {
                orientation: e.orientation,
                mean: p[..n].to_vec(),
                cov: p[n..].to_vec(),
                estimated: e.estimated,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut layers = Vec::with_capacity(schema.layers.len());
    for ls in &schema.layers {
        let mut compositions = Vec::with_capacity(ls.compositions.len());
        for cs in &ls.compositions {
            let mut parts = Vec::with_capacity(cs.parts.len());
            for ps in &cs.parts {
                let g = src.slice(ps.geometry, 5)?;
                let weights = ps
                    .appearance
                    .iter()
                    .map(|&(id, wi)| Ok((id, src.get(wi)?)))
                    .collect::<Result<Vec<_>>>()?;
                parts.push(Part {
                    appearance: Appearance { weights },
                    geometry: Gaussian2 {
                        mean: [g[0], g[1]],
                        cov: [[g[2], g[3]], [g[3], g[4]]],
                    },
                    polarity: ps.polarity,
                });
            }
            compositions.push(Composition {
                id: cs.id,
                layer: ls.index,
                parts,
                threshold: cs.threshold.map(|t| src.get(t)).transpose()?,
            });
        }
        layers.push(Layer {
            index: ls.index,
            radius: ls.radius,
            rho: src.get(ls.rho)?,
            tau: src.get(ls.tau)?,
            compositions,
            or_nodes: ls.or_nodes.clone(),
        });
    }
    Ok(Vocabulary {
        orientations: n,
        edge_models,
        layers,
        object_layer: schema.object_layer,
        classes: schema.classes,
        alpha: src.get(schema.alpha)?,
        epsilon: src.get(schema.epsilon)?,
        aggregation: schema.aggregation,
    })
}

/// Write atomically: a sibling temporary file is renamed into place.
pub fn save(v: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(v)?;
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Read and validate.
pub fn load(path: impl AsRef<Path>) -> Result<Vocabulary> {
    let bytes = std::fs::read(path)?;
    let v = from_bytes(&bytes)?;
    let violations = validate(&v);
    if !violations.is_empty() {
        return Err(Error::Invalid(violations));
    }
    Ok(v)
}
