//! Checkpoint serialization.
//!
//! Layout: magic `TTCK`, u32 LE version (1), u32 layer count, then per
//! layer: kind tag (u8), u32 name length + UTF-8 name, u32 tensor count,
//! per tensor: rank (u8), u32 extents, f32 LE payload. Conv layers store
//! (weight, bias); batch-norm layers store (gamma, beta, running_mean,
//! running_var). An optional trailing block tagged `THTE` holds one f32
//! per layer with the cached source importance.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::net::{BatchNorm, Conv3d, Layer, LayerKind, Network};
use crate::tensor::Tensor;
use crate::volume::{expect_eof, read_exact, read_u32};

const MAGIC: [u8; 4] = *b"TTCK";
const IMPORTANCE_TAG: [u8; 4] = *b"THTE";
const VERSION: u32 = 1;

/// A network plus the optional cached per-layer source importance.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: Network,
    pub source_importance: Option<Vec<f32>>,
}

impl Checkpoint {
    pub fn new(net: Network) -> Self {
        Self {
            net,
            source_importance: None,
        }
    }

    pub fn with_importance(net: Network, importance: Vec<f32>) -> Result<Self> {
        if importance.len() != net.num_layers() {
            return Err(CoreError::ShapeMismatch(format!(
                "importance has {} entries for {} layers",
                importance.len(),
                net.num_layers()
            )));
        }
        Ok(Self {
            net,
            source_importance: Some(importance),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(imp) = &self.source_importance {
            if imp.len() != self.net.num_layers() {
                return Err(CoreError::ShapeMismatch(format!(
                    "importance has {} entries for {} layers",
                    imp.len(),
                    self.net.num_layers()
                )));
            }
        }
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.net.layers.len() as u32).to_le_bytes())?;
        for layer in &self.net.layers {
            w.write_all(&[layer.kind_tag()])?;
            let name = layer.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            let tensors = layer_tensors(layer);
            w.write_all(&(tensors.len() as u32).to_le_bytes())?;
            for t in tensors {
                w.write_all(&[t.shape().len() as u8])?;
                for &e in t.shape() {
                    w.write_all(&(e as u32).to_le_bytes())?;
                }
                for &v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        if let Some(imp) = &self.source_importance {
            w.write_all(&IMPORTANCE_TAG)?;
            for &v in imp {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if magic != MAGIC {
            return Err(CoreError::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = read_u32(&mut r, "version")?;
        if version != VERSION {
            return Err(CoreError::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let n_layers = read_u32(&mut r, "layer count")? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for li in 0..n_layers {
            let mut tag = [0u8; 1];
            read_exact(&mut r, &mut tag, "layer kind")?;
            let name_len = read_u32(&mut r, "name length")? as usize;
            let mut name_buf = vec![0u8; name_len];
            read_exact(&mut r, &mut name_buf, "layer name")?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| CoreError::Format(format!("layer {li} name is not UTF-8")))?;
            let n_tensors = read_u32(&mut r, "tensor count")? as usize;
            let mut tensors = Vec::with_capacity(n_tensors);
            for _ in 0..n_tensors {
                tensors.push(read_tensor(&mut r)?);
            }
            layers.push(build_layer(tag[0], name, tensors, &layers)?);
        }

        // Optional trailing importance block: one f32 per layer.
        let mut probe = [0u8; 4];
        let source_importance = match r.read(&mut probe)? {
            0 => None,
            4 if probe == IMPORTANCE_TAG => {
                let mut buf = vec![0u8; n_layers * 4];
                read_exact(&mut r, &mut buf, "importance payload")?;
                expect_eof(&mut r)?;
                Some(
                    buf.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            }
            _ => {
                return Err(CoreError::Format(
                    "unexpected trailing bytes after layer data".into(),
                ))
            }
        };

        let num_classes = layers
            .iter()
            .rev()
            .find_map(|l| match &l.kind {
                LayerKind::Conv3d(c) => Some(c.weight.shape()[0]),
                _ => None,
            })
            .ok_or_else(|| CoreError::Format("checkpoint contains no conv layer".into()))?;
        let net = Network::new(layers, num_classes)?;
        Ok(Self {
            net,
            source_importance,
        })
    }
}

fn layer_tensors(layer: &Layer) -> Vec<&Tensor> {
    match &layer.kind {
        LayerKind::Conv3d(c) => vec![&c.weight, &c.bias],
        LayerKind::BatchNorm(bn) => {
            vec![&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]
        }
        _ => Vec::new(),
    }
}

fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut rank = [0u8; 1];
    read_exact(r, &mut rank, "tensor rank")?;
    if rank[0] as usize > 5 {
        return Err(CoreError::Format(format!("tensor rank {} > 5", rank[0])));
    }
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        shape.push(read_u32(r, "tensor extent")? as usize);
    }
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 4];
    read_exact(r, &mut buf, "tensor payload")?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(&shape, data)
}

fn build_layer(tag: u8, name: String, tensors: Vec<Tensor>, previous: &[Layer]) -> Result<Layer> {
    let expect = |n: usize| -> Result<()> {
        if tensors.len() != n {
            Err(CoreError::Format(format!(
                "layer {name} expects {n} tensors, found {}",
                tensors.len()
            )))
        } else {
            Ok(())
        }
    };
    let kind = match tag {
        0 => {
            expect(2)?;
            let mut it = tensors.into_iter();
            LayerKind::Conv3d(Conv3d {
                weight: it.next().unwrap(),
                bias: it.next().unwrap(),
            })
        }
        1 => {
            expect(4)?;
            let mut it = tensors.into_iter();
            LayerKind::BatchNorm(BatchNorm {
                gamma: it.next().unwrap(),
                beta: it.next().unwrap(),
                running_mean: it.next().unwrap(),
                running_var: it.next().unwrap(),
            })
        }
        2 => {
            expect(0)?;
            LayerKind::Relu
        }
        3 => {
            expect(0)?;
            LayerKind::MaxPool
        }
        4 => {
            expect(0)?;
            LayerKind::NearestUpsample
        }
        5 => {
            expect(0)?;
            LayerKind::Softmax
        }
        6 => {
            expect(0)?;
            // Skip wiring is positional: the skip joins the output of the
            // last ReLU preceding the most recent MaxPool.
            let pool = previous
                .iter()
                .rposition(|l| matches!(l.kind, LayerKind::MaxPool))
                .ok_or_else(|| {
                    CoreError::Format(format!("concat layer {name} has no preceding pool"))
                })?;
            let skip_from = previous[..pool]
                .iter()
                .rposition(|l| matches!(l.kind, LayerKind::Relu))
                .ok_or_else(|| {
                    CoreError::Format(format!("concat layer {name} has no skip source"))
                })?;
            LayerKind::Concat { skip_from }
        }
        other => return Err(CoreError::UnknownLayerKind(other)),
    };
    Ok(Layer { name, kind })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_net() -> Network {
        Network::reference_with_widths(2, 3, 3, 99).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact_and_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ttck");
        let p2 = dir.path().join("b.ttck");
        let net = sample_net();
        let ck = Checkpoint::with_importance(net, vec![0.25; 14]).unwrap();
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        for ((na, ta), (nb, tb)) in ck.net.params().iter().zip(loaded.net.params().iter()) {
            assert_eq!(na, nb);
            assert!(ta.bit_eq(tb), "tensor {na} not bit-exact");
        }
        assert_eq!(loaded.source_importance, ck.source_importance);
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn round_trip_without_importance() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ttck");
        Checkpoint::new(sample_net()).save(&p).unwrap();
        let loaded = Checkpoint::load(&p).unwrap();
        assert!(loaded.source_importance.is_none());
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ttck");
        std::fs::write(&p, b"XXCK\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(
            Checkpoint::load(&p),
            Err(CoreError::BadMagic { .. })
        ));
    }

    #[test]
    fn version_mismatch_refused() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.ttck");
        let mut bytes = b"TTCK".to_vec();
        bytes.extend_from_slice(&7u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&p),
            Err(CoreError::UnsupportedVersion { found: 7, .. })
        ));
    }

    #[test]
    fn truncation_and_unknown_kind_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ttck");
        Checkpoint::new(sample_net()).save(&p).unwrap();
        let full = std::fs::read(&p).unwrap();
        std::fs::write(&p, &full[..full.len() - 3]).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(CoreError::Truncated(_))));

        // Corrupt the first layer's kind tag (offset 12).
        let mut corrupt = full.clone();
        corrupt[12] = 200;
        std::fs::write(&p, corrupt).unwrap();
        assert!(matches!(
            Checkpoint::load(&p),
            Err(CoreError::UnknownLayerKind(200))
        ));
    }
}
