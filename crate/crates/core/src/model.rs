//! All learnable parameters of the similarity model, parameter visitors used
//! by the optimizer and gradient checks, and the binary checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! magic "ELVC" | version u32 | tensor_count u32
//! per tensor: name_len u16 | name UTF-8 | rank u32 | dims u32 × rank | f64 payload
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::descriptor::ProjectionParams;
use crate::error::{Error, Result};
use crate::linalg::{gelu, sigmoid, Matrix};
use crate::transport::DustbinHead;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ELVC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Hidden width of the vote-strength function `f`.
pub const VOTE_HIDDEN: usize = 16;
/// Hidden width of the loss-warp function `g`.
pub const WARP_HIDDEN: usize = 64;

/// Scalar-to-scalar MLP: one GELU hidden layer and a sigmoid output, so the
/// result is always in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMlp {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

/// The vote-strength transform `f` (hidden width 16).
pub type VoteFunction = ScalarMlp;
/// The loss warp `g` (hidden width 64); training-only.
pub type WarpFunction = ScalarMlp;

impl ScalarMlp {
    pub fn hidden(&self) -> usize {
        self.w1.len()
    }

    pub fn eval(&self, x: f64) -> f64 {
        let mut y = self.b2;
        for i in 0..self.w1.len() {
            y += self.w2[i] * gelu(self.w1[i] * x + self.b1[i]);
        }
        sigmoid(y)
    }
}

/// How dustbin gains are produced.
#[derive(Debug, Clone, PartialEq)]
pub enum DustbinMode {
    /// The full model: a gain per descriptor predicted from the descriptor.
    PerDescriptor(DustbinHead),
    /// Ablation: one learnable gain shared by every descriptor.
    SharedScalar(f64),
    /// Ablation: no dustbin row/column at all; requires equal descriptor
    /// counts and plain unit marginals.
    Disabled,
}

/// Every learnable component, plus the layer-norm epsilon riding along with
/// the projection. `f` and `g` are optional to express the corresponding
/// ablations; `g` never participates in inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub projection: Option<ProjectionParams>,
    pub dustbin: DustbinMode,
    pub omega: f64,
    pub vote: Option<VoteFunction>,
    pub warp: Option<WarpFunction>,
}

/// Structural switches mirroring the model ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablation {
    pub no_dustbin: bool,
    pub scalar_gain: bool,
    pub no_f: bool,
    pub no_g: bool,
    pub no_projection: bool,
}

impl ModelParams {
    /// Random initialization.
    ///
    /// `score_scale` is the typical magnitude of the pair score (roughly the
    /// descriptor count); `g`'s input weights start at 1/score_scale so its
    /// sigmoid is not saturated from the first step.
    pub fn init(
        d_prime: usize,
        d: usize,
        ln_eps: f64,
        score_scale: f64,
        ablation: Ablation,
        rng: &mut impl Rng,
    ) -> Self {
        let work_dim = if ablation.no_projection { d_prime } else { d };
        let projection = if ablation.no_projection {
            None
        } else {
            // Square projections start near the identity so the descriptor
            // geometry survives initialization; reductions start random.
            let scale = 1.0 / (d_prime as f64).sqrt();
            let weight = if d == d_prime {
                Matrix::from_fn(d, d_prime, |i, j| {
                    let eye = if i == j { 1.0 } else { 0.0 };
                    eye + rng.gen_range(-0.02..0.02)
                })
            } else {
                Matrix::from_fn(d, d_prime, |_, _| rng.gen_range(-scale..scale))
            };
            Some(ProjectionParams {
                weight,
                bias: vec![0.0; d],
                ln_gain: vec![1.0; d],
                ln_bias: vec![0.0; d],
                ln_eps,
            })
        };
        // The gain head starts at the fixed-gain baseline level (bias 1,
        // matching ω's init) so the dustbin is active and h receives
        // gradient from the first step.
        let dustbin = if ablation.no_dustbin {
            DustbinMode::Disabled
        } else if ablation.scalar_gain {
            DustbinMode::SharedScalar(1.0)
        } else {
            let scale = 1.0 / (work_dim as f64).sqrt();
            DustbinMode::PerDescriptor(DustbinHead {
                w1: Matrix::from_fn(work_dim, work_dim, |_, _| rng.gen_range(-scale..scale)),
                b1: vec![0.0; work_dim],
                w2: (0..work_dim).map(|_| rng.gen_range(-scale..scale)).collect(),
                b2: 1.0,
            })
        };
        // f and g start as increasing ramps centered on their expected
        // inputs (votes near 0.5, scores near score_scale): a sign-consistent
        // slope from step one instead of a random one.
        // With active dustbins most refined votes sit near zero, so f's
        // ramp is centered low and steep; the pair score then starts near
        // score_scale, which is where g's ramp crosses 0.5.
        let vote = if ablation.no_f {
            None
        } else {
            Some(init_scalar_mlp(VOTE_HIDDEN, 0.05, 0.15, rng))
        };
        let warp = if ablation.no_g {
            None
        } else {
            let scale = score_scale.max(1.0);
            Some(init_scalar_mlp(WARP_HIDDEN, scale, scale / 2.0, rng))
        };
        ModelParams {
            projection,
            dustbin,
            omega: 1.0,
            vote,
            warp,
        }
    }

    /// Dimension the similarity pipeline runs at (after projection if any).
    pub fn working_dim(&self) -> Option<usize> {
        match (&self.projection, &self.dustbin) {
            (Some(p), _) => Some(p.out_dim()),
            (None, DustbinMode::PerDescriptor(h)) => Some(h.dim()),
            _ => None,
        }
    }

    pub fn has_dustbin(&self) -> bool {
        !matches!(self.dustbin, DustbinMode::Disabled)
    }

    /// Same structure with every learnable tensor zeroed; used as the
    /// gradient accumulator and as optimizer moment storage.
    pub fn zeros_like(&self) -> ModelParams {
        let mut out = self.clone();
        out.for_each_tensor_mut(|_, t| t.iter_mut().for_each(|x| *x = 0.0));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, t| n += t.len());
        n
    }

    pub fn param_count_without_projection(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|name, t| {
            if !name.starts_with("proj.") {
                n += t.len();
            }
        });
        n
    }

    /// Visit every learnable tensor in a fixed order. Scalars appear as
    /// length-1 slices; `proj.ln_eps` is configuration, not a tensor, and is
    /// not visited.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &[f64])) {
        if let Some(p) = &self.projection {
            f("proj.weight", p.weight.data());
            f("proj.bias", &p.bias);
            f("proj.ln_gain", &p.ln_gain);
            f("proj.ln_bias", &p.ln_bias);
        }
        match &self.dustbin {
            DustbinMode::PerDescriptor(h) => {
                f("dustbin.w1", h.w1.data());
                f("dustbin.b1", &h.b1);
                f("dustbin.w2", &h.w2);
                f("dustbin.b2", std::slice::from_ref(&h.b2));
                f("omega", std::slice::from_ref(&self.omega));
            }
            DustbinMode::SharedScalar(c) => {
                f("dustbin.scalar", std::slice::from_ref(c));
                f("omega", std::slice::from_ref(&self.omega));
            }
            DustbinMode::Disabled => {}
        }
        if let Some(v) = &self.vote {
            f("f.w1", &v.w1);
            f("f.b1", &v.b1);
            f("f.w2", &v.w2);
            f("f.b2", std::slice::from_ref(&v.b2));
        }
        if let Some(g) = &self.warp {
            f("g.w1", &g.w1);
            f("g.b1", &g.b1);
            f("g.w2", &g.w2);
            f("g.b2", std::slice::from_ref(&g.b2));
        }
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        if let Some(p) = &mut self.projection {
            f("proj.weight", p.weight.data_mut());
            f("proj.bias", &mut p.bias);
            f("proj.ln_gain", &mut p.ln_gain);
            f("proj.ln_bias", &mut p.ln_bias);
        }
        match &mut self.dustbin {
            DustbinMode::PerDescriptor(h) => {
                f("dustbin.w1", h.w1.data_mut());
                f("dustbin.b1", &mut h.b1);
                f("dustbin.w2", &mut h.w2);
                f("dustbin.b2", std::slice::from_mut(&mut h.b2));
                f("omega", std::slice::from_mut(&mut self.omega));
            }
            DustbinMode::SharedScalar(c) => {
                f("dustbin.scalar", std::slice::from_mut(c));
                f("omega", std::slice::from_mut(&mut self.omega));
            }
            DustbinMode::Disabled => {}
        }
        if let Some(v) = &mut self.vote {
            f("f.w1", &mut v.w1);
            f("f.b1", &mut v.b1);
            f("f.w2", &mut v.w2);
            f("f.b2", std::slice::from_mut(&mut v.b2));
        }
        if let Some(g) = &mut self.warp {
            f("g.w1", &mut g.w1);
            f("g.b1", &mut g.b1);
            f("g.w2", &mut g.w2);
            f("g.b2", std::slice::from_mut(&mut g.b2));
        }
    }

    /// All learnable values concatenated in visit order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.for_each_tensor(|_, t| out.extend_from_slice(t));
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        self.for_each_tensor_mut(|_, t| {
            t.copy_from_slice(&flat[pos..pos + t.len()]);
            pos += t.len();
        });
        assert_eq!(pos, flat.len(), "assign_flat: length mismatch");
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|_, t| ok &= t.iter().all(|x| x.is_finite()));
        ok
    }

    /// Drop the loss warp `g`; inference never uses it.
    pub fn without_warp(mut self) -> Self {
        self.warp = None;
        self
    }

    /// Serialize to the checkpoint format. The projection's layer-norm
    /// epsilon is stored as the non-learnable tensor `proj.ln_eps`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut tensors: Vec<(String, Vec<u32>, Vec<f64>)> = Vec::new();
        if let Some(p) = &self.projection {
            tensors.push((
                "proj.ln_eps".into(),
                vec![],
                vec![p.ln_eps],
            ));
        }
        self.for_each_tensor(|name, data| {
            let dims = self.tensor_dims(name);
            tensors.push((name.to_string(), dims, data.to_vec()));
        });

        let file = File::create(path.as_ref())?;
        let mut w = BufWriter::new(file);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, dims, data) in &tensors {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(dims.len() as u32).to_le_bytes())?;
            for d in dims {
                w.write_all(&d.to_le_bytes())?;
            }
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    fn tensor_dims(&self, name: &str) -> Vec<u32> {
        match name {
            "proj.weight" => {
                let p = self.projection.as_ref().unwrap();
                vec![p.out_dim() as u32, p.in_dim() as u32]
            }
            "dustbin.w1" => {
                if let DustbinMode::PerDescriptor(h) = &self.dustbin {
                    vec![h.dim() as u32, h.dim() as u32]
                } else {
                    unreachable!()
                }
            }
            "dustbin.b2" | "dustbin.scalar" | "omega" | "f.b2" | "g.b2" => vec![],
            other => {
                let mut len = 0;
                self.for_each_tensor(|n, t| {
                    if n == other {
                        len = t.len();
                    }
                });
                vec![len as u32]
            }
        }
    }

    /// Load from the checkpoint format. The model structure (ablations
    /// included) is inferred from which tensors are present.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let tensors = read_checkpoint_tensors(path)?;
        let fmt = |detail: String| Error::Format {
            path: path.display().to_string(),
            detail,
        };

        let get_vec = |name: &str| -> Option<&Vec<f64>> { tensors.get(name).map(|(_, d)| d) };
        let require = |name: &str| -> Result<&Vec<f64>> {
            get_vec(name).ok_or_else(|| fmt(format!("missing tensor {name:?}")))
        };
        let scalar = |name: &str| -> Result<f64> {
            let data = require(name)?;
            if data.len() != 1 {
                return Err(fmt(format!("tensor {name:?} is not a scalar")));
            }
            Ok(data[0])
        };

        let projection = if tensors.contains_key("proj.weight") {
            let (dims, weight) = &tensors["proj.weight"];
            if dims.len() != 2 {
                return Err(fmt("proj.weight must have rank 2".into()));
            }
            let (d, d_prime) = (dims[0] as usize, dims[1] as usize);
            Some(ProjectionParams {
                weight: Matrix::from_vec(d, d_prime, weight.clone())
                    .map_err(|e| fmt(e.to_string()))?,
                bias: require("proj.bias")?.clone(),
                ln_gain: require("proj.ln_gain")?.clone(),
                ln_bias: require("proj.ln_bias")?.clone(),
                ln_eps: scalar("proj.ln_eps")?,
            })
        } else {
            None
        };

        let dustbin = if tensors.contains_key("dustbin.w1") {
            let (dims, w1) = &tensors["dustbin.w1"];
            if dims.len() != 2 || dims[0] != dims[1] {
                return Err(fmt("dustbin.w1 must be square".into()));
            }
            let d = dims[0] as usize;
            DustbinMode::PerDescriptor(DustbinHead {
                w1: Matrix::from_vec(d, d, w1.clone()).map_err(|e| fmt(e.to_string()))?,
                b1: require("dustbin.b1")?.clone(),
                w2: require("dustbin.w2")?.clone(),
                b2: scalar("dustbin.b2")?,
            })
        } else if tensors.contains_key("dustbin.scalar") {
            DustbinMode::SharedScalar(scalar("dustbin.scalar")?)
        } else {
            DustbinMode::Disabled
        };

        let omega = if matches!(dustbin, DustbinMode::Disabled) {
            1.0
        } else {
            scalar("omega")?
        };

        let vote = if tensors.contains_key("f.w1") {
            Some(ScalarMlp {
                w1: require("f.w1")?.clone(),
                b1: require("f.b1")?.clone(),
                w2: require("f.w2")?.clone(),
                b2: scalar("f.b2")?,
            })
        } else {
            None
        };
        let warp = if tensors.contains_key("g.w1") {
            Some(ScalarMlp {
                w1: require("g.w1")?.clone(),
                b1: require("g.b1")?.clone(),
                w2: require("g.w2")?.clone(),
                b2: scalar("g.b2")?,
            })
        } else {
            None
        };

        let model = ModelParams {
            projection,
            dustbin,
            omega,
            vote,
            warp,
        };
        if !model.is_finite() {
            return Err(Error::Numeric(format!(
                "checkpoint {} contains non-finite parameters",
                path.display()
            )));
        }
        Ok(model)
    }
}

/// Monotone-increasing ramp `σ(Σ w2·gelu(w1·(x − center) + jitter) + b2)`
/// with the output bias chosen so the function crosses 0.5 at `center`.
fn init_scalar_mlp(hidden: usize, center: f64, input_scale: f64, rng: &mut impl Rng) -> ScalarMlp {
    let base_slope = 2.0 / input_scale;
    let mut w1 = Vec::with_capacity(hidden);
    let mut b1 = Vec::with_capacity(hidden);
    let mut w2 = Vec::with_capacity(hidden);
    for _ in 0..hidden {
        let slope = base_slope * (1.0 + rng.gen_range(-0.3..0.3));
        w1.push(slope);
        b1.push(-slope * center + rng.gen_range(-0.5..0.5));
        w2.push(4.0 / hidden as f64 * (1.0 + rng.gen_range(-0.3..0.3)));
    }
    let at_center: f64 = (0..hidden).map(|i| w2[i] * gelu(w1[i] * center + b1[i])).sum();
    ScalarMlp {
        w1,
        b1,
        w2,
        b2: -at_center,
    }
}

type TensorMap = BTreeMap<String, (Vec<u32>, Vec<f64>)>;

fn read_checkpoint_tensors(path: &Path) -> Result<TensorMap> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let fmt = |detail: String| Error::Format {
        path: path.display().to_string(),
        detail,
    };

    let mut magic = [0u8; 4];
    read_bytes(&mut r, &mut magic, path)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fmt(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(CHECKPOINT_MAGIC)
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != CHECKPOINT_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r, path)?;
    let mut tensors = TensorMap::new();
    for _ in 0..count {
        let name_len = read_u16(&mut r, path)? as usize;
        let mut name = vec![0u8; name_len];
        read_bytes(&mut r, &mut name, path)?;
        let name = String::from_utf8(name).map_err(|_| fmt("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r, path)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut r, path)?);
        }
        let len: usize = dims.iter().map(|&d| d as usize).product::<usize>().max(1);
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let mut b = [0u8; 8];
            read_bytes(&mut r, &mut b, path)?;
            data.push(f64::from_le_bytes(b));
        }
        if tensors.insert(name.clone(), (dims, data)).is_some() {
            return Err(fmt(format!("duplicate tensor {name:?}")));
        }
    }
    Ok(tensors)
}

fn read_bytes<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format {
                path: path.display().to_string(),
                detail: "truncated checkpoint".into(),
            }
        } else {
            Error::Io(e)
        }
    })
}

fn read_u16<R: Read>(r: &mut R, path: &Path) -> Result<u16> {
    let mut b = [0u8; 2];
    read_bytes(r, &mut b, path)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_bytes(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}
