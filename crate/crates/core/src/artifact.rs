//! Model artifact: one self-describing binary file holding the network
//! weights, vocabularies, embedding table, target transform, and training
//! metadata. Numeric payloads are little-endian IEEE-754 doubles; the header
//! carries a format version and a SHA-256 checksum of the payload.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::EmbeddingModel;
use crate::error::{Error, Result};
use crate::eval::TargetTransform;
use crate::nn::{ArchConfig, BatchNorm, ConvLayer, DenseLayer, ModelParams, CONV_LAYERS};
use crate::otp::Vocab;
use crate::pipeline::{ModelBundle, TrainMeta};
use crate::sampler::SamplerConfig;

const MAGIC: &[u8; 8] = b"PSTRDMDL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ConfigBlock {
    conv_channels: [usize; CONV_LAYERS],
    dense_units: [usize; 2],
    dropout_rate: f64,
    use_batchnorm: bool,
    feature_dim: usize,
    keep: usize,
    sampler_max_nodes: usize,
    sampler_conv_layers: usize,
    sampler_keep: usize,
    full_tree: bool,
    p_f: usize,
    window: usize,
    min_count: usize,
    seed: u64,
    split_ratios: [usize; 3],
    best_epoch: usize,
    epochs_run: usize,
    best_val_loss: f64,
}

struct Writer {
    payload: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { payload: Vec::new() }
    }

    fn block(&mut self, tag: &str, body: &[u8]) {
        self.payload.extend_from_slice(&(tag.len() as u32).to_le_bytes());
        self.payload.extend_from_slice(tag.as_bytes());
        self.payload.extend_from_slice(&(body.len() as u64).to_le_bytes());
        self.payload.extend_from_slice(body);
    }

    fn doubles(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
        let mut out = Vec::new();
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

struct Reader<'a> {
    payload: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn next_block(&mut self) -> Result<Option<(String, &'a [u8])>> {
        if self.pos == self.payload.len() {
            return Ok(None);
        }
        let tag_len = self.u32()? as usize;
        let tag = self.take(tag_len)?;
        let tag = String::from_utf8(tag.to_vec())
            .map_err(|_| Error::Artifact("non-utf8 block tag".into()))?;
        let body_len = self.u64()? as usize;
        let body = self.take(body_len)?;
        Ok(Some((tag, body)))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.payload.len() {
            return Err(Error::Artifact("truncated block".into()));
        }
        let out = &self.payload[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn doubles_from(body: &[u8]) -> Result<Vec<f64>> {
    if body.len() % 8 != 0 {
        return Err(Error::Artifact("double section not 8-byte aligned".into()));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Named weight tensors in a fixed order, with shapes.
fn weight_tensors(params: &ModelParams) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    for (i, layer) in params.conv.iter().enumerate() {
        for (suffix, m) in [("w_t", &layer.w_t), ("w_l", &layer.w_l), ("w_r", &layer.w_r)] {
            out.push((
                format!("conv{i}.{suffix}"),
                vec![m.nrows(), m.ncols()],
                m.iter().copied().collect(),
            ));
        }
        out.push((format!("conv{i}.b"), vec![layer.b.len()], layer.b.to_vec()));
    }
    for (name, dense) in [
        ("dense1", &params.dense1),
        ("dense2", &params.dense2),
        ("output", &params.output),
    ] {
        out.push((
            format!("{name}.w"),
            vec![dense.w.nrows(), dense.w.ncols()],
            dense.w.iter().copied().collect(),
        ));
        out.push((format!("{name}.b"), vec![dense.b.len()], dense.b.to_vec()));
    }
    for (name, bn) in [("bn1", &params.bn1), ("bn2", &params.bn2)] {
        if let Some(bn) = bn {
            out.push((format!("{name}.gamma"), vec![bn.gamma.len()], bn.gamma.to_vec()));
            out.push((format!("{name}.beta"), vec![bn.beta.len()], bn.beta.to_vec()));
            out.push((
                format!("{name}.running_mean"),
                vec![bn.running_mean.len()],
                bn.running_mean.to_vec(),
            ));
            out.push((
                format!("{name}.running_var"),
                vec![bn.running_var.len()],
                bn.running_var.to_vec(),
            ));
        }
    }
    out
}

pub fn save_model(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(bundle)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn to_bytes(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let mut w = Writer::new();

    let config = ConfigBlock {
        conv_channels: bundle.params.arch.conv_channels,
        dense_units: bundle.params.arch.dense_units,
        dropout_rate: bundle.params.arch.dropout_rate,
        use_batchnorm: bundle.params.arch.use_batchnorm,
        feature_dim: bundle.params.feature_dim,
        keep: bundle.params.keep,
        sampler_max_nodes: bundle.sampler.max_nodes,
        sampler_conv_layers: bundle.sampler.conv_layers,
        sampler_keep: bundle.sampler.keep,
        full_tree: bundle.full_tree,
        p_f: bundle.embedder.p_f(),
        window: bundle.embedder.window(),
        min_count: bundle.embedder.min_count(),
        seed: bundle.meta.seed,
        split_ratios: bundle.meta.split_ratios,
        best_epoch: bundle.meta.best_epoch,
        epochs_run: bundle.meta.epochs_run,
        best_val_loss: bundle.meta.best_val_loss,
    };
    w.block("config", &serde_json::to_vec(&config).expect("serializable"));

    #[derive(Serialize)]
    struct VocabBlock<'a> {
        operators: &'a [String],
        tables: &'a [String],
    }
    w.block(
        "vocab",
        &serde_json::to_vec(&VocabBlock {
            operators: bundle.vocab.operators(),
            tables: bundle.vocab.tables(),
        })
        .expect("serializable"),
    );

    let tokens: Vec<&str> = bundle.embedder.entries().map(|(t, _)| t).collect();
    w.block("embed.tokens", &serde_json::to_vec(&tokens).expect("serializable"));
    w.block(
        "embed.vectors",
        &Writer::doubles(bundle.embedder.entries().flat_map(|(_, v)| v.to_vec())),
    );
    w.block(
        "embed.fallback",
        &Writer::doubles(bundle.embedder.global_fallback().iter().copied()),
    );

    w.block(
        "transform",
        &Writer::doubles([bundle.transform.min_log, bundle.transform.max_log]),
    );

    for (name, shape, data) in weight_tensors(&bundle.params) {
        let mut body = Vec::new();
        body.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in &shape {
            body.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        body.extend_from_slice(&Writer::doubles(data));
        w.block(&format!("weights.{name}"), &body);
    }

    let payload = w.payload;
    let mut out = Vec::with_capacity(payload.len() + 52);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&payload));
    out.extend_from_slice(&payload);
    Ok(out)
}


type TensorMap = std::collections::HashMap<String, (Vec<usize>, Vec<f64>)>;

fn take_matrix(weights: &mut TensorMap, name: &str) -> Result<ndarray::Array2<f64>> {
    let (shape, data) = weights
        .remove(name)
        .ok_or_else(|| Error::Artifact(format!("missing tensor {name}")))?;
    if shape.len() != 2 {
        return Err(Error::Artifact(format!("tensor {name}: expected 2 dims")));
    }
    ndarray::Array2::from_shape_vec((shape[0], shape[1]), data)
        .map_err(|e| Error::Artifact(format!("tensor {name}: {e}")))
}

fn take_vector(weights: &mut TensorMap, name: &str) -> Result<ndarray::Array1<f64>> {
    let (shape, data) = weights
        .remove(name)
        .ok_or_else(|| Error::Artifact(format!("missing tensor {name}")))?;
    if shape.len() != 1 {
        return Err(Error::Artifact(format!("tensor {name}: expected 1 dim")));
    }
    Ok(ndarray::Array1::from_vec(data))
}

fn take_dense(weights: &mut TensorMap, name: &str) -> Result<DenseLayer> {
    Ok(DenseLayer {
        w: take_matrix(weights, &format!("{name}.w"))?,
        b: take_vector(weights, &format!("{name}.b"))?,
    })
}

fn take_batchnorm(weights: &mut TensorMap, name: &str) -> Result<BatchNorm> {
    Ok(BatchNorm {
        gamma: take_vector(weights, &format!("{name}.gamma"))?,
        beta: take_vector(weights, &format!("{name}.beta"))?,
        running_mean: take_vector(weights, &format!("{name}.running_mean"))?,
        running_var: take_vector(weights, &format!("{name}.running_var"))?,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelBundle> {
    if bytes.len() < 52 || &bytes[..8] != MAGIC {
        return Err(Error::Artifact("not a model artifact (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::ArtifactVersion { found: version, expected: FORMAT_VERSION });
    }
    let payload_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let checksum = &bytes[20..52];
    let payload = &bytes[52..];
    if payload.len() != payload_len {
        return Err(Error::ArtifactChecksum);
    }
    if Sha256::digest(payload).as_slice() != checksum {
        return Err(Error::ArtifactChecksum);
    }

    let mut reader = Reader { payload, pos: 0 };
    let mut config: Option<ConfigBlock> = None;
    let mut operators: Vec<String> = Vec::new();
    let mut tables: Vec<String> = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut vectors: Vec<f64> = Vec::new();
    let mut fallback: Vec<f64> = Vec::new();
    let mut transform: Option<TargetTransform> = None;
    let mut weights: std::collections::HashMap<String, (Vec<usize>, Vec<f64>)> =
        std::collections::HashMap::new();

    while let Some((tag, body)) = reader.next_block()? {
        match tag.as_str() {
            "config" => {
                config = Some(
                    serde_json::from_slice(body)
                        .map_err(|e| Error::Artifact(format!("config block: {e}")))?,
                );
            }
            "vocab" => {
                #[derive(Deserialize)]
                struct VocabBlock {
                    operators: Vec<String>,
                    tables: Vec<String>,
                }
                let v: VocabBlock = serde_json::from_slice(body)
                    .map_err(|e| Error::Artifact(format!("vocab block: {e}")))?;
                operators = v.operators;
                tables = v.tables;
            }
            "embed.tokens" => {
                tokens = serde_json::from_slice(body)
                    .map_err(|e| Error::Artifact(format!("token block: {e}")))?;
            }
            "embed.vectors" => vectors = doubles_from(body)?,
            "embed.fallback" => fallback = doubles_from(body)?,
            "transform" => {
                let d = doubles_from(body)?;
                if d.len() != 2 {
                    return Err(Error::Artifact("transform block must hold 2 doubles".into()));
                }
                transform = Some(TargetTransform { min_log: d[0], max_log: d[1] });
            }
            other if other.starts_with("weights.") => {
                let name = other.trim_start_matches("weights.").to_string();
                let mut r = Reader { payload: body, pos: 0 };
                let ndims = r.u32()? as usize;
                let mut shape = Vec::with_capacity(ndims);
                for _ in 0..ndims {
                    shape.push(r.u64()? as usize);
                }
                let data = doubles_from(r.take(body.len() - r.pos)?)?;
                if data.len() != shape.iter().product::<usize>() {
                    return Err(Error::Artifact(format!("tensor {name}: shape/data mismatch")));
                }
                weights.insert(name, (shape, data));
            }
            other => return Err(Error::Artifact(format!("unknown block {other:?}"))),
        }
    }

    let config = config.ok_or_else(|| Error::Artifact("missing config block".into()))?;
    let transform = transform.ok_or_else(|| Error::Artifact("missing transform block".into()))?;
    let p_f = config.p_f;
    if vectors.len() != tokens.len() * p_f || fallback.len() != p_f {
        return Err(Error::Artifact("embedding table size mismatch".into()));
    }
    let entries: Vec<(String, Vec<f64>)> = tokens
        .into_iter()
        .enumerate()
        .map(|(i, t)| (t, vectors[i * p_f..(i + 1) * p_f].to_vec()))
        .collect();
    let embedder =
        EmbeddingModel::from_parts(p_f, config.window, config.min_count, entries, fallback);
    let vocab = Vocab::from_lists(operators, tables);

    let mut conv = Vec::with_capacity(CONV_LAYERS);
    for i in 0..CONV_LAYERS {
        conv.push(ConvLayer {
            w_t: take_matrix(&mut weights, &format!("conv{i}.w_t"))?,
            w_l: take_matrix(&mut weights, &format!("conv{i}.w_l"))?,
            w_r: take_matrix(&mut weights, &format!("conv{i}.w_r"))?,
            b: take_vector(&mut weights, &format!("conv{i}.b"))?,
        });
    }
    let dense1 = take_dense(&mut weights, "dense1")?;
    let dense2 = take_dense(&mut weights, "dense2")?;
    let output = take_dense(&mut weights, "output")?;
    let (bn1, bn2) = if config.use_batchnorm {
        (
            Some(take_batchnorm(&mut weights, "bn1")?),
            Some(take_batchnorm(&mut weights, "bn2")?),
        )
    } else {
        (None, None)
    };

    let params = ModelParams {
        arch: ArchConfig {
            conv_channels: config.conv_channels,
            dense_units: config.dense_units,
            dropout_rate: config.dropout_rate,
            use_batchnorm: config.use_batchnorm,
        },
        feature_dim: config.feature_dim,
        keep: config.keep,
        conv,
        dense1,
        dense2,
        output,
        bn1,
        bn2,
    };
    let sampler = SamplerConfig {
        max_nodes: config.sampler_max_nodes,
        conv_layers: config.sampler_conv_layers,
        keep: config.sampler_keep,
    };
    Ok(ModelBundle {
        params,
        vocab,
        embedder,
        transform,
        sampler,
        full_tree: config.full_tree,
        meta: TrainMeta {
            seed: config.seed,
            split_ratios: config.split_ratios,
            best_epoch: config.best_epoch,
            epochs_run: config.epochs_run,
            best_val_loss: config.best_val_loss,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::TrainConfig;
    use crate::pipeline::{predict_workload, train_pipeline, PipelineConfig};
    use crate::plan::{generate_synthetic_workload, SynthConfig};

    fn trained_bundle() -> (ModelBundle, crate::plan::Workload) {
        let config = SynthConfig { count: 60, ..Default::default() };
        let w = generate_synthetic_workload(&config, 12).unwrap();
        let pipeline = PipelineConfig {
            sampler: SamplerConfig::new(15, 3, 3).unwrap(),
            full_tree: false,
            p_f: 6,
            window: 5,
            min_count: 4,
            w2v: crate::embed::W2VHyper { epochs: 2, ..Default::default() },
            arch: ArchConfig {
                conv_channels: [6, 6, 6],
                dense_units: [6, 3],
                dropout_rate: 0.1,
                use_batchnorm: true,
            },
            train: TrainConfig { max_epochs: 2, batch_size: 16, ..Default::default() },
            split_ratios: [8, 1, 1],
            seed: 4,
        };
        let out = train_pipeline(w.clone(), &pipeline).unwrap();
        (out.bundle, w)
    }

    #[test]
    fn round_trip_is_field_exact_and_prediction_identical() {
        let (bundle, w) = trained_bundle();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pstrd");
        save_model(&bundle, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(bundle, loaded);
        let before = predict_workload(&bundle, &w.traces[..8]).unwrap();
        let after = predict_workload(&loaded, &w.traces[..8]).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn serialized_bytes_are_deterministic() {
        let (bundle, _) = trained_bundle();
        assert_eq!(to_bytes(&bundle).unwrap(), to_bytes(&bundle).unwrap());
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let (bundle, _) = trained_bundle();
        let bytes = to_bytes(&bundle).unwrap();
        let cut = &bytes[..bytes.len() - 9];
        assert!(matches!(from_bytes(cut), Err(Error::ArtifactChecksum)));
        // Corrupt one payload byte.
        let mut corrupt = bytes.clone();
        let last = corrupt.len() - 1;
        corrupt[last] ^= 0xff;
        assert!(matches!(from_bytes(&corrupt), Err(Error::ArtifactChecksum)));
    }

    #[test]
    fn newer_version_is_rejected() {
        let (bundle, _) = trained_bundle();
        let mut bytes = to_bytes(&bundle).unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::ArtifactVersion { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(matches!(from_bytes(b"nope"), Err(Error::Artifact(_))));
    }
}
