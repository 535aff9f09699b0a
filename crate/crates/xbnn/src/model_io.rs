//! Self-describing single-file model format.
//!
//! Layout: 4-byte magic `XBNN`, format version (u32 LE), manifest length
//! (u64 LE), JSON manifest, zero padding to an 8-byte boundary, then the
//! binary payload. The payload is little-endian throughout: bit-packed
//! weight words in row-major order (64-bit aligned by construction),
//! batch-norm arrays as 32-bit floats, and per-block threshold caches
//! (integer thresholds, comparison directions, real sum-domain thresholds).
//! Every payload section is addressed by an explicit (offset, length) entry
//! in the manifest, and lengths are validated byte-for-byte on load.
//!
//! Batch-norm values are stored as f32; networks produced by the trainer
//! are exactly representable (training runs in f32), so save/load is
//! bit-exact for the artifact's own models. Epsilon and merge thresholds
//! live in the JSON manifest and keep full precision. Plain layers carry a
//! folded threshold cache that is re-derived and verified on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bn::{fold_bn_to_thresholds, BatchNormParams, Cmp, ThresholdVector};
use crate::error::{Error, Result};
use crate::network::{Layer, LayerGeom, Network, PlainLayer, SplitBlock, SplitLayer};
use crate::reconstruct::SplitPlan;
use crate::tensor::BinaryTensor;

pub const MODEL_MAGIC: [u8; 4] = *b"XBNN";
pub const FORMAT_VERSION: u32 = 1;

/// A payload section: byte offset from the payload start, byte length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Blob {
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BnManifest {
    /// Neuron count; each of the five arrays has this many f32 values.
    pub len: usize,
    pub epsilon: f64,
    /// bias, mu, sigma, gamma, beta concatenated, each `len` f32 LE values.
    pub blob: Blob,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdManifest {
    pub len: usize,
    pub fanin: usize,
    /// `len` i64 LE thresholds, `len` direction bytes (0 = GEQ, 1 = LEQ)
    /// padded to 8 bytes, then `len` f64 LE sum-domain thresholds.
    pub blob: Blob,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub shape: Vec<usize>,
    /// Bit-packed words, row-major, 64-bit aligned rows, LE u64.
    pub blob: Blob,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockManifest {
    pub weights: WeightsManifest,
    pub bn: BnManifest,
    pub thresholds: ThresholdManifest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerManifest {
    Plain {
        geom: LayerGeom,
        weights: WeightsManifest,
        bn: BnManifest,
        /// Folded integer thresholds, re-derived and verified on load.
        threshold_cache: ThresholdManifest,
    },
    Split {
        geom: LayerGeom,
        plan: SplitPlan,
        merge_threshold: i64,
        blocks: Vec<BlockManifest>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub first_multibit: bool,
    pub layers: Vec<LayerManifest>,
    /// Total payload length in bytes.
    pub payload_len: u64,
}

/// Payload under construction; every section is 8-byte aligned.
struct PayloadWriter {
    buf: Vec<u8>,
}

impl PayloadWriter {
    fn new() -> Self {
        PayloadWriter { buf: Vec::new() }
    }

    fn section(&mut self, bytes: &[u8]) -> Blob {
        let offset = self.buf.len() as u64;
        self.buf.extend_from_slice(bytes);
        while self.buf.len() % 8 != 0 {
            self.buf.push(0);
        }
        Blob {
            offset,
            len: bytes.len() as u64,
        }
    }

    fn weights(&mut self, w: &BinaryTensor) -> WeightsManifest {
        let mut bytes = Vec::with_capacity(w.words().len() * 8);
        for &word in w.words() {
            bytes.extend_from_slice(&word.to_le_bytes());
        }
        WeightsManifest {
            shape: w.shape().to_vec(),
            blob: self.section(&bytes),
        }
    }

    fn bn(&mut self, bn: &BatchNormParams) -> BnManifest {
        let mut bytes = Vec::with_capacity(bn.len() * 5 * 4);
        for arr in [&bn.bias, &bn.mu, &bn.sigma, &bn.gamma, &bn.beta] {
            for &v in arr.iter() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        BnManifest {
            len: bn.len(),
            epsilon: bn.epsilon,
            blob: self.section(&bytes),
        }
    }

    fn thresholds(&mut self, tv: &ThresholdVector) -> ThresholdManifest {
        let n = tv.len();
        let mut bytes = Vec::with_capacity(n * 17 + 8);
        for &t in &tv.t {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
        for &dir in &tv.dir {
            bytes.push(match dir {
                Cmp::Geq => 0,
                Cmp::Leq => 1,
            });
        }
        while bytes.len() % 8 != 0 {
            bytes.push(0);
        }
        for &tau in &tv.tau {
            bytes.extend_from_slice(&tau.to_le_bytes());
        }
        ThresholdManifest {
            len: n,
            fanin: tv.fanin,
            blob: self.section(&bytes),
        }
    }
}

/// Payload reader that validates every declared section length.
struct PayloadReader<'a> {
    payload: &'a [u8],
}

impl<'a> PayloadReader<'a> {
    fn bytes(&self, blob: Blob, expected_len: u64, what: &str) -> Result<&'a [u8]> {
        if blob.len != expected_len {
            return Err(Error::CorruptModel(format!(
                "{what}: manifest declares {} payload bytes, shape requires {expected_len}",
                blob.len
            )));
        }
        let start = usize::try_from(blob.offset)
            .map_err(|_| Error::CorruptModel(format!("{what}: offset overflow")))?;
        let end = start
            .checked_add(blob.len as usize)
            .filter(|&e| e <= self.payload.len())
            .ok_or_else(|| {
                Error::CorruptModel(format!(
                    "{what}: section [{start}, +{}) exceeds payload of {} bytes",
                    blob.len,
                    self.payload.len()
                ))
            })?;
        Ok(&self.payload[start..end])
    }

    fn weights(&self, m: &WeightsManifest) -> Result<BinaryTensor> {
        let mut w = BinaryTensor::zeros(&m.shape);
        let expected = (w.words().len() * 8) as u64;
        let bytes = self.bytes(m.blob, expected, "weights")?;
        let words: Vec<u64> = bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        w.set_words(&words)?;
        Ok(w)
    }

    fn bn(&self, m: &BnManifest) -> Result<BatchNormParams> {
        let expected = (m.len * 5 * 4) as u64;
        let bytes = self.bytes(m.blob, expected, "batch-norm arrays")?;
        let vals: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let arr = |i: usize| vals[i * m.len..(i + 1) * m.len].to_vec();
        BatchNormParams::new(arr(0), arr(1), arr(2), arr(3), arr(4), m.epsilon)
    }

    fn thresholds(&self, m: &ThresholdManifest) -> Result<ThresholdVector> {
        let dir_padded = m.len.div_ceil(8) * 8;
        let expected = (m.len * 8 + dir_padded + m.len * 8) as u64;
        let bytes = self.bytes(m.blob, expected, "threshold cache")?;
        let (t_bytes, rest) = bytes.split_at(m.len * 8);
        let (dir_bytes, tau_bytes) = rest.split_at(dir_padded);
        let t: Vec<i64> = t_bytes
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let dir: Vec<Cmp> = dir_bytes[..m.len]
            .iter()
            .map(|&b| match b {
                0 => Ok(Cmp::Geq),
                1 => Ok(Cmp::Leq),
                other => Err(Error::CorruptModel(format!(
                    "threshold direction byte must be 0 or 1, found {other}"
                ))),
            })
            .collect::<Result<_>>()?;
        let tau: Vec<f64> = tau_bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(ThresholdVector {
            t,
            dir,
            tau,
            fanin: m.fanin,
        })
    }
}

/// Serialize a network to the single-file format.
pub fn save_model(net: &Network, path: &Path) -> Result<()> {
    let mut payload = PayloadWriter::new();
    let mut layers = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        layers.push(match layer {
            Layer::Plain(p) => {
                let weights = payload.weights(&p.weights);
                let bn = payload.bn(&p.bn);
                let cache = fold_bn_to_thresholds(&p.bn, p.geom.fanin());
                let threshold_cache = payload.thresholds(&cache);
                LayerManifest::Plain {
                    geom: p.geom.clone(),
                    weights,
                    bn,
                    threshold_cache,
                }
            }
            Layer::Split(s) => {
                let blocks = s
                    .blocks
                    .iter()
                    .map(|b| BlockManifest {
                        weights: payload.weights(&b.weights),
                        bn: payload.bn(&b.bn),
                        thresholds: payload.thresholds(&b.thresholds),
                    })
                    .collect();
                LayerManifest::Split {
                    geom: s.geom.clone(),
                    plan: s.plan.clone(),
                    merge_threshold: s.merge_threshold,
                    blocks,
                }
            }
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        first_multibit: net.first_multibit,
        layers,
        payload_len: payload.buf.len() as u64,
    };
    let manifest_json = serde_json::to_vec(&manifest)?;

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&MODEL_MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
    out.write_all(&manifest_json)?;
    let header_len = 16 + manifest_json.len();
    out.write_all(&vec![0u8; header_len.next_multiple_of(8) - header_len])?;
    out.write_all(&payload.buf)?;
    out.flush()?;
    Ok(())
}

/// Load a network, validating magic, version, section lengths, and the
/// plain-layer threshold caches.
pub fn load_model(path: &Path) -> Result<Network> {
    let mut file = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let display = path.display().to_string();

    let need = |n: usize| -> Result<()> {
        if bytes.len() < n {
            return Err(Error::Truncated {
                path: display.clone(),
                expected: n as u64,
                found: bytes.len() as u64,
            });
        }
        Ok(())
    };

    need(16)?;
    if bytes[..4] != MODEL_MAGIC {
        return Err(Error::BadMagic {
            path: display,
            offset: 0,
            expected: u32::from_be_bytes(MODEL_MAGIC),
            found: u32::from_be_bytes(bytes[..4].try_into().unwrap()),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    need(16 + manifest_len)?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + manifest_len])?;
    if manifest.format_version != version {
        return Err(Error::CorruptModel(format!(
            "header version {version} disagrees with manifest version {}",
            manifest.format_version
        )));
    }
    let payload_start = (16 + manifest_len).next_multiple_of(8);
    need(payload_start + manifest.payload_len as usize)?;
    let reader = PayloadReader {
        payload: &bytes[payload_start..payload_start + manifest.payload_len as usize],
    };

    let mut net_layers = Vec::with_capacity(manifest.layers.len());
    for lm in &manifest.layers {
        net_layers.push(match lm {
            LayerManifest::Plain {
                geom,
                weights,
                bn,
                threshold_cache,
            } => {
                let layer = PlainLayer {
                    geom: geom.clone(),
                    weights: reader.weights(weights)?,
                    bn: reader.bn(bn)?,
                };
                let cache = reader.thresholds(threshold_cache)?;
                let refolded = fold_bn_to_thresholds(&layer.bn, layer.geom.fanin());
                if cache != refolded {
                    return Err(Error::CorruptModel(
                        "threshold cache does not match the stored batch-norm parameters".into(),
                    ));
                }
                Layer::Plain(layer)
            }
            LayerManifest::Split {
                geom,
                plan,
                merge_threshold,
                blocks,
            } => {
                let blocks = blocks
                    .iter()
                    .map(|bm| {
                        Ok(SplitBlock {
                            weights: reader.weights(&bm.weights)?,
                            bn: reader.bn(&bm.bn)?,
                            thresholds: reader.thresholds(&bm.thresholds)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                if blocks.len() != plan.n {
                    return Err(Error::CorruptModel(format!(
                        "split plan declares {} blocks, payload holds {}",
                        plan.n,
                        blocks.len()
                    )));
                }
                Layer::Split(SplitLayer {
                    geom: geom.clone(),
                    plan: plan.clone(),
                    blocks,
                    merge_threshold: *merge_threshold,
                })
            }
        });
    }
    Ok(Network {
        layers: net_layers,
        first_multibit: manifest.first_multibit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{reference_forward, NetInput};
    use crate::reconstruct::{reconstruct_network, ReconstructMode};
    use ndarray::Array2;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// MLP whose bn values are all exactly f32-representable, matching what
    /// the trainer exports.
    fn f32_mlp(rng: &mut StdRng, dims: &[usize]) -> Network {
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            let (fanin, out) = (w[0], w[1]);
            let mut weights = BinaryTensor::zeros(&[fanin, out]);
            for r in 0..fanin {
                for c in 0..out {
                    weights.set_pm1(r, c, if rng.gen::<bool>() { 1 } else { -1 });
                }
            }
            let f32s = |rng: &mut StdRng, lo: f32, hi: f32| -> Vec<f64> {
                (0..out).map(|_| rng.gen_range(lo..hi) as f64).collect()
            };
            let bn = BatchNormParams::new(
                f32s(rng, -4.0, 4.0),
                f32s(rng, -8.0, 8.0),
                f32s(rng, 0.1, 6.0),
                f32s(rng, -2.0, 2.0),
                f32s(rng, -1.0, 1.0),
                1e-5,
            )
            .unwrap();
            layers.push(Layer::Plain(PlainLayer {
                geom: LayerGeom::Dense {
                    in_dim: fanin,
                    out_dim: out,
                },
                weights,
                bn,
            }));
        }
        Network {
            layers,
            first_multibit: true,
        }
    }

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("xbnn-model-io-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = StdRng::seed_from_u64(7);
        let net = f32_mlp(&mut rng, &[24, 40, 18, 5]);
        let split = reconstruct_network(&net, 16, ReconstructMode::Mapped).unwrap();
        for (name, model) in [("plain.xbnn", &net), ("split.xbnn", &split)] {
            let path = tmp(name);
            save_model(model, &path).unwrap();
            let loaded = load_model(&path).unwrap();
            assert_eq!(model, &loaded);
        }
    }

    #[test]
    fn round_trip_preserves_inference() {
        let mut rng = StdRng::seed_from_u64(8);
        let net = f32_mlp(&mut rng, &[24, 40, 5]);
        let path = tmp("infer.xbnn");
        save_model(&net, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        let x = Array2::from_shape_fn((16, 24), |_| rng.gen_range(0u16..=255) as i32 * 2 - 255);
        let a = reference_forward(&net, &NetInput::Flat(x.clone()), false).unwrap();
        let b = reference_forward(&loaded, &NetInput::Flat(x), false).unwrap();
        assert_eq!(a.scores, b.scores);
    }

    #[test]
    fn save_is_deterministic() {
        let mut rng = StdRng::seed_from_u64(9);
        let net = f32_mlp(&mut rng, &[12, 20, 4]);
        let (p1, p2) = (tmp("det1.xbnn"), tmp("det2.xbnn"));
        save_model(&net, &p1).unwrap();
        save_model(&net, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let path = tmp("badmagic.xbnn");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
        match load_model(&path) {
            Err(Error::BadMagic { offset: 0, .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut rng = StdRng::seed_from_u64(10);
        let net = f32_mlp(&mut rng, &[8, 6, 3]);
        let path = tmp("version.xbnn");
        save_model(&net, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        match load_model(&path) {
            Err(Error::FormatVersion { found: 99, supported: FORMAT_VERSION }) => {}
            other => panic!("expected FormatVersion, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut rng = StdRng::seed_from_u64(11);
        let net = f32_mlp(&mut rng, &[8, 6, 3]);
        let path = tmp("trunc.xbnn");
        save_model(&net, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        match load_model(&path) {
            Err(Error::Truncated { .. }) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn tampered_bn_fails_threshold_cache_check() {
        let mut rng = StdRng::seed_from_u64(12);
        let net = f32_mlp(&mut rng, &[8, 6, 3]);
        let path = tmp("tamper.xbnn");
        save_model(&net, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // find the first layer's bn blob: flip one stored f32 bn byte. The
        // payload starts right after the padded manifest; the first section
        // is weights (8*6 bits -> 8 words = 64 bytes), bn follows.
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = (16 + manifest_len).next_multiple_of(8);
        let bn_offset = payload_start + 64;
        bytes[bn_offset] ^= 0x5a;
        std::fs::write(&path, &bytes).unwrap();
        match load_model(&path) {
            Err(Error::CorruptModel(msg)) => {
                assert!(msg.contains("threshold cache"), "unexpected message: {msg}")
            }
            other => panic!("expected CorruptModel, got {other:?}"),
        }
    }

    #[test]
    fn trained_export_round_trips_bit_exact() {
        // the trainer runs in f32; its exported bn params must be exactly
        // representable in the file's 32-bit arrays
        use crate::train::{toy_two_class_for_tests, train_baseline, TrainConfig};
        let data = toy_two_class_for_tests(80, 3);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 20,
            val_size: 20,
            ..TrainConfig::default()
        };
        let (net, _) = train_baseline(&[16, 8, 2], &data, &cfg).unwrap();
        let path = tmp("trained.xbnn");
        save_model(&net, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(net, loaded);
    }
}
