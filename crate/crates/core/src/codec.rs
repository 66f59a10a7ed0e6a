//! Frozen VGG-19 feature extractor: weight archive I/O and the five-stage encoder.
//!
//! Stage `i` is the activation after the first convolution + ReLU of block `i`
//! (relu1_1 … relu5_1). Blocks are separated by 2×2 ceil-mode max pooling, so
//! stage `i` has spatial size `ceil(H / 2^(i-1))`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{normalize, Image};
use crate::nn::{max_pool2, max_pool2_backward, relu_backward_inplace, relu_inplace, Conv2d};
use crate::tensor::{FeatureMap, Real, Tensor};

/// Output channels of stages 1..=5.
pub const STAGE_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];

/// Smallest accepted input side; keeps the stage-5 map at least 1×1.
pub const MIN_SIDE: usize = 16;

/// (name, in_channels, out_channels) for the 16 VGG-19 convolutions.
pub const VGG19_CONVS: [(&str, usize, usize); 16] = [
    ("conv1_1", 3, 64),
    ("conv1_2", 64, 64),
    ("conv2_1", 64, 128),
    ("conv2_2", 128, 128),
    ("conv3_1", 128, 256),
    ("conv3_2", 256, 256),
    ("conv3_3", 256, 256),
    ("conv3_4", 256, 256),
    ("conv4_1", 256, 512),
    ("conv4_2", 512, 512),
    ("conv4_3", 512, 512),
    ("conv4_4", 512, 512),
    ("conv5_1", 512, 512),
    ("conv5_2", 512, 512),
    ("conv5_3", 512, 512),
    ("conv5_4", 512, 512),
];

/// Layers the encoder runs: everything up to and including conv5_1.
const USED_CONVS: usize = 13;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

/// Named f32 tensors backed by a JSON manifest and one little-endian blob file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightArchive {
    manifest: Vec<ManifestEntry>,
    blobs: HashMap<String, Vec<f32>>,
}

/// `<base>.manifest.json` and `<base>.bin` for an archive base path. Either
/// file name is also accepted as the base.
pub fn archive_paths(base: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let s = base.as_ref().to_string_lossy().to_string();
    let stem = s
        .strip_suffix(".manifest.json")
        .or_else(|| s.strip_suffix(".bin"))
        .unwrap_or(&s)
        .to_string();
    (
        PathBuf::from(format!("{stem}.manifest.json")),
        PathBuf::from(format!("{stem}.bin")),
    )
}

impl WeightArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn manifest(&self) -> &[ManifestEntry] {
        &self.manifest
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor {name} size");
        self.manifest.retain(|e| e.name != name);
        self.manifest.push(ManifestEntry {
            name: name.clone(),
            shape,
            dtype: "f32".into(),
        });
        self.blobs.insert(name, data);
    }

    pub fn remove(&mut self, name: &str) -> Option<Vec<f32>> {
        self.manifest.retain(|e| e.name != name);
        self.blobs.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        let entry = self.manifest.iter().find(|e| e.name == name)?;
        Some((&entry.shape, self.blobs.get(name)?))
    }

    /// Fetch a tensor, checking its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&[f32]> {
        let (found, data) = self
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if found != shape {
            return Err(Error::shape(name, shape, found));
        }
        Ok(data)
    }

    /// Read an archive without any VGG-specific validation.
    pub fn read(base: impl AsRef<Path>) -> Result<Self> {
        let (manifest_path, bin_path) = archive_paths(base);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Vec<ManifestEntry> = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
        let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let mut blobs = HashMap::with_capacity(manifest.len());
        let mut offset = 0usize;
        for entry in &manifest {
            if entry.dtype != "f32" {
                return Err(Error::Format(format!(
                    "tensor {} has dtype {:?}, only f32 is supported",
                    entry.name, entry.dtype
                )));
            }
            let n = entry.shape.iter().product::<usize>();
            let end = offset + 4 * n;
            if end > bytes.len() {
                return Err(Error::Format(format!(
                    "blob file too short for tensor {} ({} bytes, need {end})",
                    entry.name,
                    bytes.len()
                )));
            }
            let data = bytes[offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if blobs.insert(entry.name.clone(), data).is_some() {
                return Err(Error::Format(format!("duplicate tensor {}", entry.name)));
            }
            offset = end;
        }
        if offset != bytes.len() {
            return Err(Error::Format(format!(
                "blob file has {} trailing bytes",
                bytes.len() - offset
            )));
        }
        Ok(Self { manifest, blobs })
    }

    /// Write `<base>.bin` and `<base>.manifest.json`. Each file is written to a
    /// temporary sibling and renamed into place.
    pub fn write(&self, base: impl AsRef<Path>) -> Result<()> {
        let (manifest_path, bin_path) = archive_paths(base);
        let mut bytes = Vec::with_capacity(4 * self.blobs.values().map(Vec::len).sum::<usize>());
        for entry in &self.manifest {
            for v in &self.blobs[&entry.name] {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_atomic(&bin_path, &bytes)?;
        write_atomic(&manifest_path, serde_json::to_string_pretty(&self.manifest)?.as_bytes())
    }

    /// SHA-256 over manifest order, shapes and raw bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for entry in &self.manifest {
            h.update(entry.name.as_bytes());
            for d in &entry.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &self.blobs[&entry.name] {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Deterministic stand-in for the pretrained VGG-19 weights: Kaiming-uniform
    /// kernels and small uniform biases. Used by tests and when no converted
    /// weights are available.
    pub fn synthetic_vgg19(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut archive = Self::new();
        for &(name, cin, cout) in &VGG19_CONVS {
            let fan_in = (cin * 9) as f32;
            let wb = (6.0 / fan_in).sqrt();
            let bb = 1.0 / fan_in.sqrt();
            let w = (0..cout * cin * 9).map(|_| rng.random_range(-wb..wb)).collect();
            let b = (0..cout).map(|_| rng.random_range(-bb..bb)).collect();
            archive.insert(format!("{name}.weight"), vec![cout, cin, 3, 3], w);
            archive.insert(format!("{name}.bias"), vec![cout], b);
        }
        archive
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Load and validate VGG-19 convolution weights: kernels and biases of all 16
/// conv layers (32 tensors). Anything else in the file (classifier layers) is
/// dropped. The encoder itself runs conv1_1 … conv5_1.
pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightArchive> {
    let raw = WeightArchive::read(path)?;
    validate_vgg19(raw)
}

fn validate_vgg19(raw: WeightArchive) -> Result<WeightArchive> {
    let mut archive = WeightArchive::new();
    for name in required_tensors() {
        let shape = required_shape(&name);
        let data = raw.expect(&name, &shape)?;
        archive.insert(name, shape, data.to_vec());
    }
    Ok(archive)
}

fn required_layers() -> &'static [(&'static str, usize, usize)] {
    &VGG19_CONVS
}

/// Names of every tensor the encoder needs, kernels then biases per layer.
pub fn required_tensors() -> Vec<String> {
    required_layers()
        .iter()
        .flat_map(|(n, _, _)| [format!("{n}.weight"), format!("{n}.bias")])
        .collect()
}

fn required_shape(name: &str) -> Vec<usize> {
    let (layer, kind) = name.rsplit_once('.').expect("tensor name has a suffix");
    let &(_, cin, cout) = required_layers()
        .iter()
        .find(|(n, _, _)| *n == layer)
        .expect("known layer");
    match kind {
        "weight" => vec![cout, cin, 3, 3],
        _ => vec![cout],
    }
}

/// Per-stage activations relu1_1 … relu5_1 (stage index 1-based in accessors).
#[derive(Clone, Debug, PartialEq)]
pub struct StageFeatures<T = f32> {
    stages: Vec<Tensor<T>>,
}

impl<T: Real> StageFeatures<T> {
    pub fn new(stages: Vec<Tensor<T>>) -> Self {
        Self { stages }
    }

    /// Stage `i` in 1..=len.
    pub fn stage(&self, i: usize) -> &Tensor<T> {
        &self.stages[i - 1]
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.stages.iter()
    }

    pub fn into_vec(self) -> Vec<Tensor<T>> {
        self.stages
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    /// conv index, stage produced (1-based) if this is a block's first conv
    Conv(usize, Option<usize>),
    Pool,
}

fn ops() -> Vec<Op> {
    let mut ops = Vec::new();
    let mut conv = 0;
    for (block, n) in [2usize, 2, 4, 4, 1].into_iter().enumerate() {
        if block > 0 {
            ops.push(Op::Pool);
        }
        for j in 0..n {
            ops.push(Op::Conv(conv, (j == 0).then_some(block + 1)));
            conv += 1;
        }
    }
    ops
}

/// Activations recorded by [`Encoder::forward_traced`] for the input-gradient pass.
pub struct EncoderTrace<T> {
    /// acts[j] is the input of op j; acts[j + 1] its output.
    acts: Vec<Tensor<T>>,
    pool_idx: Vec<Option<Vec<u32>>>,
    ops_run: usize,
}

/// The frozen VGG-19 encoder. Immutable after construction; safe to share.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T = f32> {
    convs: Vec<Conv2d<T>>,
}

impl Encoder<f32> {
    pub fn from_archive(archive: &WeightArchive) -> Result<Self> {
        let mut convs = Vec::with_capacity(USED_CONVS);
        for &(name, cin, cout) in &VGG19_CONVS[..USED_CONVS] {
            let mut conv = Conv2d::zeros(cin, cout, 3);
            conv.weight = archive.expect(&format!("{name}.weight"), &[cout, cin, 3, 3])?.to_vec();
            conv.bias = archive.expect(&format!("{name}.bias"), &[cout])?.to_vec();
            convs.push(conv);
        }
        Ok(Self { convs })
    }

    /// Extract stages 1..=`upto_stage` from an RGB image (ImageNet-normalized internally).
    pub fn encode(&self, image: &Image, upto_stage: usize) -> Result<StageFeatures<f32>> {
        check_size(image.height(), image.width())?;
        let x = normalize(&image.to_planar::<f32>());
        Ok(StageFeatures::new(self.forward(&x, upto_stage)))
    }
}

pub(crate) fn check_size(height: usize, width: usize) -> Result<()> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::ImageTooSmall {
            height,
            width,
            min: MIN_SIDE,
        });
    }
    Ok(())
}

impl<T: Real> Encoder<T> {
    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder {
            convs: self.convs.iter().map(Conv2d::cast).collect(),
        }
    }

    pub fn convs(&self) -> &[Conv2d<T>] {
        &self.convs
    }

    /// Stages 1..=`upto_stage` of an already-normalized 3×H×W input.
    pub fn forward(&self, x: &Tensor<T>, upto_stage: usize) -> Vec<Tensor<T>> {
        assert!((1..=5).contains(&upto_stage), "stage must be in 1..=5");
        let mut stages = Vec::with_capacity(upto_stage);
        let mut cur = x.clone();
        for op in ops() {
            match op {
                Op::Conv(i, stage) => {
                    cur = self.convs[i].forward(&cur);
                    relu_inplace(&mut cur);
                    if let Some(s) = stage {
                        stages.push(cur.clone());
                        if s == upto_stage {
                            break;
                        }
                    }
                }
                Op::Pool => cur = max_pool2(&cur).0,
            }
        }
        stages
    }

    /// Like [`Encoder::forward`] but keeps what the input-gradient pass needs.
    pub fn forward_traced(&self, x: &Tensor<T>, upto_stage: usize) -> (Vec<Tensor<T>>, EncoderTrace<T>) {
        let mut stages = Vec::with_capacity(upto_stage);
        let mut acts = vec![x.clone()];
        let mut pool_idx = Vec::new();
        for op in ops() {
            let cur = acts.last().unwrap();
            match op {
                Op::Conv(i, stage) => {
                    let mut out = self.convs[i].forward(cur);
                    relu_inplace(&mut out);
                    pool_idx.push(None);
                    acts.push(out);
                    if let Some(s) = stage {
                        stages.push(acts.last().unwrap().clone());
                        if s == upto_stage {
                            break;
                        }
                    }
                }
                Op::Pool => {
                    let (out, idx) = max_pool2(cur);
                    pool_idx.push(Some(idx));
                    acts.push(out);
                }
            }
        }
        let ops_run = pool_idx.len();
        (stages, EncoderTrace { acts, pool_idx, ops_run })
    }

    /// Gradient w.r.t. the normalized input given gradients on the stage outputs
    /// (`stage_grads[i]` for stage `i + 1`). Encoder weights receive nothing.
    pub fn backward_input(&self, trace: &EncoderTrace<T>, stage_grads: &[Option<Tensor<T>>]) -> Tensor<T> {
        let all_ops = ops();
        let mut grad: Option<Tensor<T>> = None;
        for j in (0..trace.ops_run).rev() {
            match all_ops[j] {
                Op::Conv(i, stage) => {
                    if let Some(sg) = stage.and_then(|s| stage_grads.get(s - 1)).and_then(Option::as_ref) {
                        grad = Some(match grad.take() {
                            Some(mut g) => {
                                for (a, &b) in g.data_mut().iter_mut().zip(sg.data()) {
                                    *a += b;
                                }
                                g
                            }
                            None => sg.clone(),
                        });
                    }
                    if let Some(mut g) = grad.take() {
                        relu_backward_inplace(&mut g, &trace.acts[j + 1]);
                        grad = self.convs[i].backward(&trace.acts[j], &g, None, true);
                    }
                }
                Op::Pool => {
                    if let Some(g) = grad.take() {
                        let idx = trace.pool_idx[j].as_ref().expect("pool indices recorded");
                        grad = Some(max_pool2_backward(&g, idx, trace.acts[j].shape()));
                    }
                }
            }
        }
        let x = &trace.acts[0];
        grad.unwrap_or_else(|| Tensor::zeros(x.channels(), x.height(), x.width()))
    }

    /// SHA-256 over all kernel and bias values (as f64 bit patterns).
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.convs {
            for v in c.weight.iter().chain(&c.bias) {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Convenience alias for stage features of the f32 encoder.
pub type Stages = StageFeatures<f32>;

/// Stage-5 global average pool: the default 512-D embedding for Fréchet distances.
pub fn global_embedding(stages: &StageFeatures<f32>) -> Vec<f64> {
    let s5: &FeatureMap = stages.stage(stages.len());
    (0..s5.channels())
        .map(|c| s5.channel(c).iter().map(|&v| v as f64).sum::<f64>() / s5.plane() as f64)
        .collect()
}
