//! Binary descriptor dataset files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic "ELVD" | version u32 | image_count u32 | dim u32
//! per image:
//!   id_len u16 | id UTF-8 | m u32 | m × strength f32 | m × dim descriptor f32
//! ```
//!
//! Descriptor payloads are descriptor-contiguous (column-major per image), so
//! selecting the top-M strongest descriptors is a gather of whole columns.
//! The number of descriptors per image is variable; nothing is padded.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::descriptor::RawDescriptorSet;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"ELVD";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub image_count: u32,
    pub dim: u32,
}

/// An opened descriptor file plus an id → byte-offset index.
///
/// Readers are safe to share across threads once the index is built; every
/// [`read_image`](Self::read_image) call opens its own handle.
#[derive(Debug)]
pub struct DescriptorDataset {
    path: PathBuf,
    header: DatasetHeader,
    order: Vec<String>,
    offsets: HashMap<String, u64>,
}

impl DescriptorDataset {
    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Image ids in file order.
    pub fn ids(&self) -> &[String] {
        &self.order
    }

    pub fn contains(&self, id: &str) -> bool {
        self.offsets.contains_key(id)
    }

    /// Build the index by scanning an existing file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path)?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, &path)?;
        if &magic != MAGIC {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&magic),
                    String::from_utf8_lossy(MAGIC)
                ),
            });
        }
        let version = read_u32(&mut r, &path)?;
        if version != VERSION {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!("unsupported version {version}, expected {VERSION}"),
            });
        }
        let image_count = read_u32(&mut r, &path)?;
        let dim = read_u32(&mut r, &path)?;
        if dim == 0 {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: "descriptor dim is zero".into(),
            });
        }

        let mut order = Vec::with_capacity(image_count as usize);
        let mut offsets = HashMap::with_capacity(image_count as usize);
        let mut pos = r.stream_position()?;
        for _ in 0..image_count {
            let id_len = read_u16(&mut r, &path)? as usize;
            let mut id_bytes = vec![0u8; id_len];
            read_exact(&mut r, &mut id_bytes, &path)?;
            let id = String::from_utf8(id_bytes).map_err(|_| Error::Format {
                path: path.display().to_string(),
                detail: "image id is not valid UTF-8".into(),
            })?;
            let m = read_u32(&mut r, &path)? as u64;
            if offsets.insert(id.clone(), pos).is_some() {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    detail: format!("duplicate image id {id:?}"),
                });
            }
            order.push(id);
            let payload = m * 4 + m * dim as u64 * 4;
            skip(&mut r, payload, &path)?;
            pos = r.stream_position()?;
        }

        Ok(DescriptorDataset {
            path,
            header: DatasetHeader {
                version,
                image_count,
                dim,
            },
            order,
            offsets,
        })
    }

    /// Read one image's descriptor set. Float payloads come back exactly as
    /// stored (f32 widened to f64).
    pub fn read_image(&self, image_id: &str) -> Result<RawDescriptorSet> {
        let &offset = self
            .offsets
            .get(image_id)
            .ok_or_else(|| Error::NotFound(image_id.to_string()))?;
        let file = File::open(&self.path)?;
        let mut r = BufReader::new(file);
        r.seek(SeekFrom::Start(offset))?;

        let id_len = read_u16(&mut r, &self.path)? as usize;
        let mut id_bytes = vec![0u8; id_len];
        read_exact(&mut r, &mut id_bytes, &self.path)?;
        let m = read_u32(&mut r, &self.path)? as usize;
        let dim = self.header.dim as usize;

        let mut strengths = Vec::with_capacity(m);
        for _ in 0..m {
            strengths.push(read_f32(&mut r, &self.path)? as f64);
        }
        // On disk each descriptor is contiguous; in memory the matrix is
        // row-major dim × m.
        let mut descriptors = Matrix::zeros(dim, m);
        for j in 0..m {
            for i in 0..dim {
                descriptors[(i, j)] = read_f32(&mut r, &self.path)? as f64;
            }
        }
        RawDescriptorSet::new(String::from_utf8_lossy(&id_bytes).into_owned(), strengths, descriptors)
    }

    /// Read every image, in file order.
    pub fn read_all(&self) -> Result<Vec<RawDescriptorSet>> {
        self.order.iter().map(|id| self.read_image(id)).collect()
    }
}

/// Write descriptor sets to `path` and return the opened dataset.
///
/// All sets must share the descriptor dimension; values are stored as f32.
pub fn write_dataset(sets: &[RawDescriptorSet], path: impl AsRef<Path>) -> Result<DescriptorDataset> {
    let path = path.as_ref();
    if sets.is_empty() {
        return Err(Error::Config("write_dataset: no descriptor sets given".into()));
    }
    let dim = sets[0].dim();
    for s in sets {
        if s.dim() != dim {
            return Err(Error::shape(
                "write_dataset",
                format!("image {:?} has dim {}, expected {}", s.image_id, s.dim(), dim),
            ));
        }
    }

    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(sets.len() as u32).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    for s in sets {
        let id = s.image_id.as_bytes();
        if id.len() > u16::MAX as usize {
            return Err(Error::Config(format!("image id too long: {} bytes", id.len())));
        }
        w.write_all(&(id.len() as u16).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&(s.count() as u32).to_le_bytes())?;
        for &v in &s.strengths {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        for j in 0..s.count() {
            for i in 0..dim {
                w.write_all(&(s.descriptors[(i, j)] as f32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    drop(w);

    DescriptorDataset::open(path)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format {
                path: path.display().to_string(),
                detail: "truncated file".into(),
            }
        } else {
            Error::Io(e)
        }
    })
}

fn read_u16<R: Read>(r: &mut R, path: &Path) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, path)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R, path: &Path) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(f32::from_le_bytes(b))
}

fn skip<R: Read + Seek>(r: &mut R, n: u64, path: &Path) -> Result<()> {
    let pos = r.stream_position()?;
    let end = r.seek(SeekFrom::End(0))?;
    if pos + n > end {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: "truncated file".into(),
        });
    }
    r.seek(SeekFrom::Start(pos + n))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil;
    use rand::Rng;

    /// f32-representable payloads so the round trip is bit-exact.
    fn synthetic_sets(seed: u64, n: usize, dim: usize) -> Vec<RawDescriptorSet> {
        let mut rng = testutil::rng(seed);
        (0..n)
            .map(|k| {
                let m = rng.gen_range(2..6);
                let strengths: Vec<f64> = (0..m)
                    .map(|_| rng.gen_range(0.0f32..1.0) as f64)
                    .collect();
                let descriptors =
                    Matrix::from_fn(dim, m, |_, _| rng.gen_range(-1.0f32..1.0) as f64);
                RawDescriptorSet::new(format!("img{k:03}"), strengths, descriptors).unwrap()
            })
            .collect()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.elvd");
        let sets = synthetic_sets(1, 3, 5);
        let ds = write_dataset(&sets, &path).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.header().dim, 5);
        for s in &sets {
            let back = ds.read_image(&s.image_id).unwrap();
            assert_eq!(back, *s);
        }
        // File order, ids, and payload bytes are preserved.
        assert_eq!(ds.ids(), &["img000", "img001", "img002"]);
        let again = ds.read_all().unwrap();
        assert_eq!(again, sets);
    }

    #[test]
    fn unknown_id_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.elvd");
        let ds = write_dataset(&synthetic_sets(2, 2, 4), &path).unwrap();
        match ds.read_image("nope") {
            Err(Error::NotFound(id)) => assert_eq!(id, "nope"),
            other => panic!("expected NotFound, got {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_names_expected_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.elvd");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        match DescriptorDataset::open(&path) {
            Err(Error::Format { detail, .. }) => {
                assert!(detail.contains("ELVD"), "detail: {detail}");
            }
            other => panic!("expected Format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.elvd");
        write_dataset(&synthetic_sets(3, 2, 4), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        match DescriptorDataset::open(&path) {
            Err(Error::Format { detail, .. }) => assert!(detail.contains("truncated")),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }
}
