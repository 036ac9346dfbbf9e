use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::ImageTensor;
use crate::error::{Error, Result};

/// Maps an image to a fixed-length feature vector.
pub trait Embedder {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>>;
}

/// Hex SHA-256 of the image's 8-bit RGB pixels (row-major, interleaved).
/// Single-channel images are replicated to RGB first.
pub fn content_hash(image: &ImageTensor) -> String {
    hex::encode(Sha256::digest(image.to_rgb().to_rgb8_bytes()))
}

const TOY_LEVELS: usize = 4;
const TOY_GRID: usize = 8;
pub const TOY_EMBEDDING_DIM: usize = TOY_LEVELS * TOY_LEVELS * TOY_LEVELS + 2 * TOY_GRID * TOY_GRID;

/// Hand-built features for the toy dataset: a coarse joint colour histogram
/// plus two opponent-colour channels pooled on an 8x8 grid. Grey images have
/// zero opponent colour, so colour cues dominate identity.
#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    resolution: usize,
}

impl ToyEmbedder {
    pub fn new(resolution: usize) -> Self {
        ToyEmbedder { resolution }
    }
}

pub fn toy_embedder(resolution: usize) -> ToyEmbedder {
    ToyEmbedder::new(resolution)
}

impl Embedder for ToyEmbedder {
    fn name(&self) -> &str {
        "toy"
    }

    fn dim(&self) -> usize {
        TOY_EMBEDDING_DIM
    }

    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let (h, w) = (image.height(), image.width());
        if h != self.resolution || w != self.resolution {
            return Err(Error::shape(format!(
                "toy embedder expects {0}x{0} images, got {h}x{w}",
                self.resolution
            )));
        }
        let rgb = image.to_rgb();
        let px = rgb.data();
        let level = |v: f64| ((((v + 1.0) / 2.0) * TOY_LEVELS as f64) as usize).min(TOY_LEVELS - 1);
        let mut hist = vec![0.0; TOY_LEVELS.pow(3)];
        let mut grid = vec![0.0; 2 * TOY_GRID * TOY_GRID];
        let mut cell_count = vec![0usize; TOY_GRID * TOY_GRID];
        for y in 0..h {
            for x in 0..w {
                let (r, g, b) = (px[[0, y, x]], px[[1, y, x]], px[[2, y, x]]);
                hist[(level(r) * TOY_LEVELS + level(g)) * TOY_LEVELS + level(b)] += 1.0;
                let cell = (y * TOY_GRID / h) * TOY_GRID + x * TOY_GRID / w;
                grid[2 * cell] += r - g;
                grid[2 * cell + 1] += (r + g) / 2.0 - b;
                cell_count[cell] += 1;
            }
        }
        let n = (h * w) as f64;
        hist.iter_mut().for_each(|v| *v /= n);
        for (cell, &count) in cell_count.iter().enumerate() {
            grid[2 * cell] /= count as f64;
            grid[2 * cell + 1] /= count as f64;
        }
        hist.extend(grid);
        Ok(hist)
    }
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRecord {
    sha256: String,
    embedding: Vec<f64>,
}

/// Embeddings produced by an outside face model: a JSON-lines table keyed by
/// [`content_hash`] and/or a command that embeds one image per call.
///
/// The command is split on whitespace, receives the path of a temporary PNG
/// as its last argument and must print a JSON array of numbers.
#[derive(Debug, Clone)]
pub struct ExternalEmbedder {
    name: String,
    dim: usize,
    table: HashMap<String, Vec<f64>>,
    endpoint: Option<Vec<String>>,
}

fn check_vector(v: &[f64], dim: usize) -> Result<()> {
    if v.len() != dim {
        return Err(Error::Dimension { expected: dim, got: v.len() });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("embedding holds non-finite values"));
    }
    Ok(())
}

impl ExternalEmbedder {
    /// `dim` may be omitted when the table is non-empty.
    pub fn new(table_file: Option<&Path>, endpoint: Option<&str>, dim: Option<usize>) -> Result<Self> {
        let mut table = HashMap::new();
        let mut dim = dim;
        if let Some(path) = table_file {
            let file = fs::File::open(path).map_err(|e| Error::Load {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| Error::Load {
                    path: path.to_path_buf(),
                    reason: format!("line {}: {e}", n + 1),
                })?;
                let d = *dim.get_or_insert(rec.embedding.len());
                check_vector(&rec.embedding, d)?;
                table.insert(rec.sha256.to_ascii_lowercase(), rec.embedding);
            }
        }
        let endpoint = match endpoint {
            Some(cmd) => {
                let parts: Vec<String> = cmd.split_whitespace().map(String::from).collect();
                if parts.is_empty() {
                    return Err(Error::invalid("empty embedder command"));
                }
                Some(parts)
            }
            None => None,
        };
        if table_file.is_none() && endpoint.is_none() {
            return Err(Error::invalid("external embedder needs an embedding file or a command"));
        }
        let dim = dim.ok_or_else(|| Error::invalid("embedding dimension unknown: empty table and no dimension given"))?;
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        Ok(ExternalEmbedder {
            name: "external".into(),
            dim,
            table,
            endpoint,
        })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    fn call_endpoint(&self, cmd: &[String], image: &ImageTensor, hash: &str) -> Result<Vec<f64>> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let path = dir.path().join(format!("{hash}.png"));
        image.to_rgb().save_png(&path)?;
        let out = Command::new(&cmd[0])
            .args(&cmd[1..])
            .arg(&path)
            .output()
            .map_err(|e| Error::Lookup(format!("{hash}: cannot run `{}`: {e}", cmd[0])))?;
        if !out.status.success() {
            return Err(Error::Lookup(format!(
                "{hash}: `{}` exited with {}: {}",
                cmd[0],
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let v: Vec<f64> = serde_json::from_slice(&out.stdout)
            .map_err(|e| Error::Lookup(format!("{hash}: endpoint output is not a JSON array of numbers: {e}")))?;
        check_vector(&v, self.dim)?;
        Ok(v)
    }
}

impl Embedder for ExternalEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let hash = content_hash(image);
        if let Some(v) = self.table.get(&hash) {
            return Ok(v.clone());
        }
        match &self.endpoint {
            Some(cmd) => self.call_endpoint(cmd, image, &hash),
            None => Err(Error::Lookup(hash)),
        }
    }
}

/// Writes a JSON-lines embedding table for `images`.
pub fn write_embedding_table<'a, I>(embedder: &dyn Embedder, images: I, path: &Path) -> Result<()>
where
    I: IntoIterator<Item = &'a ImageTensor>,
{
    let mut text = String::new();
    for img in images {
        let rec = EmbeddingRecord {
            sha256: content_hash(img),
            embedding: embedder.embed(img)?,
        };
        text.push_str(&serde_json::to_string(&rec)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synthesize_toy_dataset;

    #[test]
    fn toy_embedding_is_deterministic_and_sized() {
        let data = synthesize_toy_dataset(2, 1, 64, 0).unwrap();
        let e = toy_embedder(64);
        let a = e.embed(&data[0].visible).unwrap();
        assert_eq!(a.len(), 192);
        assert_eq!(a, e.embed(&data[0].visible).unwrap());
        // grey thermal input carries no opponent colour
        let t = e.embed(&data[0].thermal).unwrap();
        assert!(t[64..].iter().all(|v| v.abs() < 1e-12));
        assert!(e.embed(&ImageTensor::filled(3, 32, 32, 0.0).unwrap()).is_err());
    }

    #[test]
    fn table_lookup_and_missing_images() {
        let data = synthesize_toy_dataset(2, 2, 64, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        let toy = toy_embedder(64);
        write_embedding_table(&toy, [&data[0].visible], &path).unwrap();
        let ext = ExternalEmbedder::new(Some(&path), None, None).unwrap();
        assert_eq!(ext.dim(), 192);
        assert_eq!(ext.embed(&data[0].visible).unwrap(), toy.embed(&data[0].visible).unwrap());
        match ext.embed(&data[1].visible) {
            Err(Error::Lookup(h)) => assert_eq!(h, content_hash(&data[1].visible)),
            other => panic!("expected lookup error, got {other:?}"),
        }
    }

    #[cfg(unix)]
    #[test]
    fn endpoint_dimension_is_checked() {
        use std::os::unix::fs::PermissionsExt;
        let dir = tempfile::tempdir().unwrap();
        let script = |name: &str, out: &str| {
            let p = dir.path().join(name);
            fs::write(&p, format!("#!/bin/sh\necho '{out}'\n")).unwrap();
            fs::set_permissions(&p, fs::Permissions::from_mode(0o755)).unwrap();
            p.to_str().unwrap().to_string()
        };
        let img = ImageTensor::filled(3, 8, 8, 0.0).unwrap();
        let ok = ExternalEmbedder::new(None, Some(&script("ok.sh", "[1,2,3]")), Some(3)).unwrap();
        assert_eq!(ok.embed(&img).unwrap(), vec![1.0, 2.0, 3.0]);
        let bad = ExternalEmbedder::new(None, Some(&script("bad.sh", "[1,2]")), Some(3)).unwrap();
        assert!(matches!(bad.embed(&img), Err(Error::Dimension { expected: 3, got: 2 })));
    }
}
