//! Named parameter tensors, their binding into a graph, seeded
//! initialization, small layer helpers and the checkpoint file format.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i])
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let i = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if t.shape() != self.tensors[i].shape() {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                lhs: self.tensors[i].shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        self.tensors[i] = t;
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Adds every parameter to `g`, as trainable leaves or as constants.
    pub fn bind<'a>(&'a self, g: &mut Graph, trainable: bool) -> Bound<'a> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.variable(t.clone())
                } else {
                    g.input(t.clone())
                }
            })
            .collect();
        Bound { store: self, vars }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

/// Graph handles of a bound [`ParamStore`].
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    /// Handle of parameter `name`.
    ///
    /// # Panics
    /// If no such parameter exists; layer code and parameter construction
    /// share the naming scheme, so a miss is a programming error.
    pub fn get(&self, name: &str) -> Var {
        match self.store.id(name) {
            Some(i) => self.vars[i],
            None => panic!("parameter `{name}` is not defined"),
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.id(name).is_some()
    }

    /// Per-parameter gradients in store order; parameters the root does not
    /// depend on get zeros.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(self.store.tensors())
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// `[fan_in, fan_out]` weights uniform in `±1/sqrt(fan_in)`.
    pub fn weight(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        Tensor::from_parts(vec![fan_in, fan_out], data)
    }
}

/// Adds a linear layer `name.w [fan_in, fan_out]`, `name.b [1, fan_out]` with zero bias.
pub(crate) fn add_linear(
    store: &mut ParamStore,
    init: &mut Init,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    store.insert(format!("{name}.w"), init.weight(fan_in, fan_out))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]))
}

/// Linear layer with all-zero weights and bias.
pub(crate) fn add_linear_zero(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    store.insert(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]))
}

/// `x [n, in] -> x W + b`, with the bias repeated over rows.
pub(crate) fn linear(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"));
    let b = p.get(&format!("{name}.b"));
    let y = g.matmul(x, w)?;
    let n = g.shape(x)[0];
    let b = g.repeat(b, 0, n)?;
    g.add(y, b)
}

const CKPT_MAGIC: &[u8; 8] = b"MVHCKPT\0";
pub const CKPT_VERSION: u32 = 1;

/// Parameters together with the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub params: ParamStore,
}

impl Checkpoint {
    /// Layout (little endian): magic, `u32` version, 64-byte hex config hash,
    /// `u64`-length config JSON, `u32` parameter count, then per parameter a
    /// `u32`-length name, `u32` rank, `u64` dims and the `f64` payload.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let json = serde_json::to_vec(&self.config)?;
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(self.config.hash().as_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in self.params.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = read_u32(&mut r)?;
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut hash = [0u8; 64];
        r.read_exact(&mut hash)?;
        let len = read_u64(&mut r)? as usize;
        let json = read_bytes(&mut r, len)?;
        let config: ExperimentConfig = serde_json::from_slice(&json)?;
        if config.hash().as_bytes() != hash {
            return Err(bad("config hash mismatch"));
        }
        let count = read_u32(&mut r)? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as usize;
            let name =
                String::from_utf8(read_bytes(&mut r, nlen)?).map_err(|_| bad("name is not UTF-8"))?;
            let rank = read_u32(&mut r)? as usize;
            if rank > 8 {
                return Err(bad("implausible tensor rank"));
            }
            let shape = (0..rank)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = read_bytes(&mut r, n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        let mut init = Init::new(1);
        add_linear(&mut s, &mut init, "a", 3, 2).unwrap();
        s.insert("c", Tensor::scalar(2.5)).unwrap();
        s
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = Init::new(9).weight(16, 4);
        let b = Init::new(9).weight(16, 4);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|x| x.abs() <= 0.25));
        assert_ne!(a, Init::new(10).weight(16, 4));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store();
        assert!(s.insert("c", Tensor::scalar(1.0)).is_err());
        assert!(s.set("c", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn linear_layer_gradient_matches_definition() {
        let s = store();
        let mut g = Graph::new();
        let p = s.bind(&mut g, true);
        let x = g.input(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap());
        let y = linear(&mut g, &p, "a", x).unwrap();
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        let all = p.gradients(&grads);
        // d sum(xW + b) / dW[i][j] = sum over rows of x[:, i]
        assert_eq!(all[0].data(), &[0.0, 0.0, 2.5, 2.5, 3.0, 3.0]);
        assert_eq!(all[1].data(), &[2.0, 2.0]);
        assert_eq!(all[2].data(), &[0.0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let ck = Checkpoint {
            config: ExperimentConfig::default(),
            params: store(),
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        assert_eq!(back, ck);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn corrupted_checkpoints_rejected() {
        let ck = Checkpoint {
            config: ExperimentConfig::default(),
            params: store(),
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert!(Checkpoint::read_from(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(&bad[..]).is_err());
        let mut tampered = buf.clone();
        tampered[12] ^= 1;
        assert!(matches!(Checkpoint::read_from(&tampered[..]), Err(Error::Checkpoint(_))));
    }
}
