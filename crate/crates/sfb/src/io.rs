//! Dataset files: MNIST IDX input, CSV export of synthetic environments and
//! a small binary tensor container for ColorMNIST environments.
//!
//! Tensor container layout (little endian):
//!
//! ```text
//! magic    b"SFBT"
//! version  u32        (currently 1)
//! count    u64        samples
//! channels u32
//! height   u32
//! width    u32
//! env_id   u64
//! beta     f64
//! labels   count x u32
//! values   count x channels x height x width x f32, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use sfb_core::envs::{EnvDataset, GeneratorTag, MnistDigits, CMNIST_SIDE};
use sfb_core::linalg::Matrix;

use crate::error::{HarnessError, Stage, StageExt};

pub const TENSOR_MAGIC: &[u8; 4] = b"SFBT";
pub const TENSOR_VERSION: u32 = 1;

/// Reads a file, inflating it first when it starts with the gzip magic.
pub fn read_maybe_gzip(path: &Path) -> std::io::Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an IDX image file and label file (each optionally gzip-compressed).
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<MnistDigits, HarnessError> {
    let images = read_maybe_gzip(images_path).map_err(HarnessError::io(Stage::Generate, images_path))?;
    let labels = read_maybe_gzip(labels_path).map_err(HarnessError::io(Stage::Generate, labels_path))?;
    MnistDigits::parse(&images, &labels).stage(Stage::Generate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

/// Expected file names, uncompressed sizes in bytes and MD5 of the `.gz`
/// distribution files.
pub fn mnist_files(split: MnistSplit) -> [(&'static str, u64, &'static str); 2] {
    match split {
        MnistSplit::Train => [
            ("train-images-idx3-ubyte", 47_040_016, "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
            ("train-labels-idx1-ubyte", 60_008, "d53e105ee54ea40749a09fcbcd1e9432"),
        ],
        MnistSplit::Test => [
            ("t10k-images-idx3-ubyte", 7_840_016, "9fb629c4189551a2d022fa330f9573f3"),
            ("t10k-labels-idx1-ubyte", 10_008, "ec29112dd5afa0611ce80d1b7f02629c"),
        ],
    }
}

fn find_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    [stem.to_string(), format!("{stem}.gz")].into_iter().map(|name| dir.join(name)).find(|p| p.is_file())
}

/// Loads one MNIST split from `dir`, or explains which files are expected.
pub fn load_mnist_split(dir: Option<&Path>, split: MnistSplit) -> Result<MnistDigits, HarnessError> {
    let files = mnist_files(split);
    let missing = |dir: &str| {
        let mut message = format!(
            "MNIST files not found in {dir}; set {} or dataset.data_dir to a directory containing:",
            crate::config::DATA_DIR_ENV
        );
        for (name, size, md5) in files {
            message.push_str(&format!("\n  {name} ({size} bytes) or {name}.gz (md5 {md5})"));
        }
        HarnessError::MissingData { stage: Stage::Generate, message }
    };
    let Some(dir) = dir else {
        return Err(missing("<unset>"));
    };
    let images = find_file(dir, files[0].0).ok_or_else(|| missing(&dir.display().to_string()))?;
    let labels = find_file(dir, files[1].0).ok_or_else(|| missing(&dir.display().to_string()))?;
    load_mnist_idx(&images, &labels)
}

/// Writes a synthetic environment as CSV with columns `x_s,x_u,y`.
pub fn write_dataset_csv<W: Write>(ds: &EnvDataset, out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    let d = ds.x.cols();
    let mut header: Vec<String> =
        if d == 2 { vec!["x_s".into(), "x_u".into()] } else { (0..d).map(|j| format!("x{j}")).collect() };
    header.push("y".into());
    w.write_record(&header).map_err(|e| HarnessError::format(Stage::Generate, e))?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.x.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(ds.labels[i].to_string());
        w.write_record(&rec).map_err(|e| HarnessError::format(Stage::Generate, e))?;
    }
    w.flush().map_err(HarnessError::io(Stage::Generate, "<csv>"))?;
    Ok(())
}

/// Reads a CSV written by [`write_dataset_csv`].
pub fn read_dataset_csv<R: Read>(
    input: R,
    env_id: usize,
    beta: f64,
    generator: GeneratorTag,
) -> Result<EnvDataset, HarnessError> {
    let mut r = csv::Reader::from_reader(input);
    let d = r.headers().map_err(|e| HarnessError::format(Stage::Generate, e))?.len().saturating_sub(1);
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| HarnessError::format(Stage::Generate, e))?;
        for j in 0..d {
            values.push(rec[j].parse::<f64>().map_err(|e| HarnessError::format(Stage::Generate, e))?);
        }
        labels.push(rec[d].parse::<usize>().map_err(|e| HarnessError::format(Stage::Generate, e))?);
    }
    let x = Matrix::from_vec(labels.len(), d, values).stage(Stage::Generate)?;
    EnvDataset::new(env_id, beta, generator, x, labels).stage(Stage::Generate)
}

/// Writes an image environment in the tensor container format.
pub fn write_tensor<W: Write>(ds: &EnvDataset, out: W) -> Result<(), HarnessError> {
    let plane = CMNIST_SIDE * CMNIST_SIDE;
    if !ds.x.cols().is_multiple_of(plane) {
        return Err(HarnessError::format(Stage::Generate, "features are not whole 14x14 planes"));
    }
    let channels = (ds.x.cols() / plane) as u32;
    let mut w = BufWriter::new(out);
    let io = HarnessError::io(Stage::Generate, "<tensor>");
    let mut header = Vec::with_capacity(44);
    header.extend_from_slice(TENSOR_MAGIC);
    header.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    header.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    header.extend_from_slice(&channels.to_le_bytes());
    header.extend_from_slice(&(CMNIST_SIDE as u32).to_le_bytes());
    header.extend_from_slice(&(CMNIST_SIDE as u32).to_le_bytes());
    header.extend_from_slice(&(ds.env_id as u64).to_le_bytes());
    header.extend_from_slice(&ds.beta.to_le_bytes());
    let mut body = Vec::with_capacity(4 * ds.len() * (1 + ds.x.cols()));
    for &y in &ds.labels {
        body.extend_from_slice(&(y as u32).to_le_bytes());
    }
    for v in ds.x.as_slice() {
        body.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&header).and_then(|_| w.write_all(&body)).and_then(|_| w.flush()).map_err(io)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8], HarnessError> {
    let end = *at + n;
    let s = bytes.get(*at..end).ok_or_else(|| {
        HarnessError::format(Stage::Generate, format!("tensor file truncated: need {end} bytes, have {}", bytes.len()))
    })?;
    *at = end;
    Ok(s)
}

/// Reads a tensor container written by [`write_tensor`].
pub fn read_tensor<R: Read>(input: R) -> Result<EnvDataset, HarnessError> {
    let mut bytes = Vec::new();
    BufReader::new(input).read_to_end(&mut bytes).map_err(HarnessError::io(Stage::Generate, "<tensor>"))?;
    let mut at = 0;
    if take(&bytes, &mut at, 4)? != TENSOR_MAGIC {
        return Err(HarnessError::format(Stage::Generate, "not a tensor container"));
    }
    let u32_at = |at: &mut usize| -> Result<u32, HarnessError> {
        Ok(u32::from_le_bytes(take(&bytes, at, 4)?.try_into().expect("4 bytes")))
    };
    let u64_at = |at: &mut usize| -> Result<u64, HarnessError> {
        Ok(u64::from_le_bytes(take(&bytes, at, 8)?.try_into().expect("8 bytes")))
    };
    let version = u32_at(&mut at)?;
    if version != TENSOR_VERSION {
        return Err(HarnessError::format(Stage::Generate, format!("unsupported tensor version {version}")));
    }
    let count = u64_at(&mut at)? as usize;
    let channels = u32_at(&mut at)? as usize;
    let height = u32_at(&mut at)? as usize;
    let width = u32_at(&mut at)? as usize;
    let env_id = u64_at(&mut at)? as usize;
    let beta = f64::from_bits(u64_at(&mut at)?);
    let labels = take(&bytes, &mut at, 4 * count)?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect::<Vec<_>>();
    let d = channels * height * width;
    let values = take(&bytes, &mut at, 4 * count * d)?
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect::<Vec<_>>();
    let x = Matrix::from_vec(count, d, values).stage(Stage::Generate)?;
    EnvDataset::new(env_id, beta, GeneratorTag::Cmnist, x, labels).stage(Stage::Generate)
}
