use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{Adam, EpochRecord, OptimSpec, TrainTrace};
use crate::autodiff::Tensor;
use crate::cells::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::nets::ParamStore;

const MAGIC: &str = "rssm-checkpoint v1";
const END: &str = "end";

/// A model snapshot with optional optimizer state.
///
/// On disk: a text manifest (spec, progress, one `tensor` line per tensor
/// with name, dtype and shape) terminated by `end`, then every tensor as
/// little-endian `f64` in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
    /// Completed epochs.
    pub epoch: usize,
    pub trace: TrainTrace,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    pub fn new(model: &Model, epoch: usize, trace: TrainTrace, optimizer: Option<Adam>) -> Self {
        Checkpoint {
            spec: model.spec.clone(),
            params: model.params.clone(),
            optimizer,
            epoch,
            trace,
        }
    }

    /// Rebuilds the model the checkpoint was taken from.
    pub fn to_model(&self) -> Result<Model> {
        Model::with_params(self.spec.clone(), self.params.clone())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let mut head = String::new();
        head.push_str(MAGIC);
        head.push('\n');
        for (k, v) in self.spec.to_pairs() {
            head.push_str(&format!("spec {k}={v}\n"));
        }
        head.push_str(&format!("epoch {}\n", self.epoch));
        if let (Some(e), Some(v)) = (self.trace.best_epoch, self.trace.best_val_loss) {
            head.push_str(&format!("best {e} {v:?}\n"));
        }
        for r in &self.trace.epochs {
            head.push_str(&format!(
                "record {} {:?} {:?} {:?}\n",
                r.epoch, r.train_loss, r.val_loss, r.grad_norm
            ));
        }
        let mut tensors: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|p| (format!("param {}", p.name), &p.value))
            .collect();
        if let Some(adam) = &self.optimizer {
            let s = adam.spec;
            head.push_str(&format!(
                "optim {} {:?} {:?} {:?} {:?}\n",
                adam.step, s.lr, s.beta1, s.beta2, s.eps
            ));
            for (p, m) in self.params.iter().zip(&adam.m) {
                tensors.push((format!("adam_m {}", p.name), m));
            }
            for (p, v) in self.params.iter().zip(&adam.v) {
                tensors.push((format!("adam_v {}", p.name), v));
            }
        }
        for (label, t) in &tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            head.push_str(&format!("tensor {label} f64 {}\n", dims.join(" ")));
        }
        head.push_str(END);
        head.push('\n');
        w.write_all(head.as_bytes())?;
        let mut payload = Vec::with_capacity(tensors.iter().map(|(_, t)| t.len() * 8).sum());
        for (_, t) in &tensors {
            for x in t.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let marker = format!("\n{END}\n");
        let split = bytes
            .windows(marker.len())
            .position(|w| w == marker.as_bytes())
            .ok_or_else(|| bad("checkpoint manifest has no end marker"))?;
        let head = std::str::from_utf8(&bytes[..split])
            .map_err(|_| bad("checkpoint manifest is not UTF-8"))?;
        let mut payload = &bytes[split + marker.len()..];
        let mut lines = head.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad(format!("not a checkpoint (expected `{MAGIC}`)")));
        }
        let mut spec_pairs = HashMap::new();
        let mut epoch = 0;
        let mut trace = TrainTrace::default();
        let mut optim: Option<(u64, OptimSpec)> = None;
        let mut params = ParamStore::new();
        let mut adam_m = Vec::new();
        let mut adam_v = Vec::new();
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| bad(format!("bad number `{s}`")))
        };
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| bad(format!("bad integer `{s}`")))
        };
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                ["spec", kv] => {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| bad(format!("bad spec line `{line}`")))?;
                    spec_pairs.insert(k.to_string(), v.to_string());
                }
                ["epoch", n] => epoch = int(n)?,
                ["best", e, v] => {
                    trace.best_epoch = Some(int(e)?);
                    trace.best_val_loss = Some(num(v)?);
                }
                ["record", e, a, b, c] => trace.epochs.push(EpochRecord {
                    epoch: int(e)?,
                    train_loss: num(a)?,
                    val_loss: num(b)?,
                    grad_norm: num(c)?,
                }),
                ["optim", step, lr, b1, b2, eps] => {
                    optim = Some((
                        step.parse().map_err(|_| bad("bad optimizer step"))?,
                        OptimSpec {
                            lr: num(lr)?,
                            beta1: num(b1)?,
                            beta2: num(b2)?,
                            eps: num(eps)?,
                        },
                    ))
                }
                ["tensor", group, name, "f64", dims @ ..] => {
                    let shape = dims
                        .iter()
                        .map(|d| int(d))
                        .collect::<Result<Vec<usize>>>()?;
                    let n: usize = shape.iter().product();
                    if payload.len() < 8 * n {
                        return Err(bad(format!("payload ends inside tensor {name}")));
                    }
                    let data: Vec<f64> = payload[..8 * n]
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    payload = &payload[8 * n..];
                    let t = Tensor::new(shape, data)?;
                    match *group {
                        "param" => params.insert(name, t)?,
                        "adam_m" => adam_m.push(t),
                        "adam_v" => adam_v.push(t),
                        other => return Err(bad(format!("unknown tensor group `{other}`"))),
                    }
                }
                _ => return Err(bad(format!("unrecognized manifest line `{line}`"))),
            }
        }
        if !payload.is_empty() {
            return Err(bad(format!("{} trailing payload bytes", payload.len())));
        }
        let spec = ModelSpec::from_pairs(|k| spec_pairs.get(k).cloned())?;
        // rebuilding restores the structural masks, which are not stored
        let params = Model::with_params(spec.clone(), params)?.params;
        let optimizer = match optim {
            Some((step, spec)) => {
                if adam_m.len() != params.len() || adam_v.len() != params.len() {
                    return Err(bad("optimizer state does not cover every parameter"));
                }
                Some(Adam {
                    spec,
                    step,
                    m: adam_m,
                    v: adam_v,
                })
            }
            None => None,
        };
        Ok(Checkpoint {
            spec,
            params,
            optimizer,
            epoch,
            trace,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::fs::File::open(path)?)
    }
}
