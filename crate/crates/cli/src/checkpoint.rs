//! Little-endian binary checkpoints: config echo, training state, parameters with their
//! Adam moments, and normalization buffers.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use csanet::tensor::{ParamStore, Shape, Tensor};

use crate::error::{CliError, CliResult};

const MAGIC: &[u8; 8] = b"CSANETCK";
const VERSION: u32 = 1;

/// Position in the schedule. Shuffling and augmentation draw from generators seeded by
/// `(seed, epoch, sample)`, so the seed and the counters are the whole random state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub lr: f64,
    pub best_val_ap: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavedParam {
    pub name: String,
    pub value: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
    pub step_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavedBuffer {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Canonical text of the run config that produced the checkpoint.
    pub config: String,
    pub state: TrainState,
    pub params: Vec<SavedParam>,
    pub buffers: Vec<SavedBuffer>,
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u64::<LE>(s.len() as u64)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> std::io::Result<String> {
    let len = r.read_u64::<LE>()? as usize;
    let mut buf = vec![0; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    let s = t.shape();
    for d in [s.n, s.c, s.h, s.w] {
        w.write_u64::<LE>(d as u64)?;
    }
    for &v in t.data() {
        w.write_f64::<LE>(v)?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> std::io::Result<Tensor> {
    let mut d = [0usize; 4];
    for x in d.iter_mut() {
        *x = r.read_u64::<LE>()? as usize;
    }
    let shape = Shape::new(d[0], d[1], d[2], d[3]);
    let mut data = vec![0.0; shape.numel()];
    r.read_f64_into::<LE>(&mut data)?;
    Tensor::from_vec(shape, data)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
}

impl Checkpoint {
    pub fn capture(config: String, state: TrainState, store: &ParamStore) -> Checkpoint {
        Checkpoint {
            config,
            state,
            params: store
                .params()
                .map(|(_, p)| SavedParam {
                    name: p.name.clone(),
                    value: p.value.clone(),
                    adam_m: p.adam_m.clone(),
                    adam_v: p.adam_v.clone(),
                    step_count: p.step_count,
                })
                .collect(),
            buffers: store
                .buffers()
                .map(|(_, b)| SavedBuffer {
                    name: b.name.clone(),
                    value: b.value.clone(),
                })
                .collect(),
        }
    }

    fn encode(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        write_str(w, &self.config)?;
        let s = &self.state;
        w.write_u64::<LE>(s.epoch as u64)?;
        w.write_u64::<LE>(s.global_step)?;
        w.write_f64::<LE>(s.lr)?;
        w.write_f64::<LE>(s.best_val_ap.unwrap_or(f64::NAN))?;
        w.write_u64::<LE>(s.seed)?;
        w.write_u64::<LE>(self.params.len() as u64)?;
        for p in &self.params {
            write_str(w, &p.name)?;
            write_tensor(w, &p.value)?;
            write_tensor(w, &p.adam_m)?;
            write_tensor(w, &p.adam_v)?;
            w.write_u64::<LE>(p.step_count)?;
        }
        w.write_u64::<LE>(self.buffers.len() as u64)?;
        for b in &self.buffers {
            write_str(w, &b.name)?;
            write_tensor(w, &b.value)?;
        }
        Ok(())
    }

    fn decode(r: &mut impl Read) -> std::io::Result<Checkpoint> {
        let bad = |m: String| std::io::Error::new(std::io::ErrorKind::InvalidData, m);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LE>()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let config = read_str(r)?;
        let epoch = r.read_u64::<LE>()? as usize;
        let global_step = r.read_u64::<LE>()?;
        let lr = r.read_f64::<LE>()?;
        let best = r.read_f64::<LE>()?;
        let seed = r.read_u64::<LE>()?;
        let state = TrainState {
            epoch,
            global_step,
            lr,
            best_val_ap: (!best.is_nan()).then_some(best),
            seed,
        };
        let n = r.read_u64::<LE>()?;
        let mut params = Vec::new();
        for _ in 0..n {
            params.push(SavedParam {
                name: read_str(r)?,
                value: read_tensor(r)?,
                adam_m: read_tensor(r)?,
                adam_v: read_tensor(r)?,
                step_count: r.read_u64::<LE>()?,
            });
        }
        let n = r.read_u64::<LE>()?;
        let mut buffers = Vec::new();
        for _ in 0..n {
            buffers.push(SavedBuffer {
                name: read_str(r)?,
                value: read_tensor(r)?,
            });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        Ok(Checkpoint {
            config,
            state,
            params,
            buffers,
        })
    }

    /// Writes to a temporary sibling and renames, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> CliResult<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut w = BufWriter::new(File::create(&tmp)?);
        self.encode(&mut w)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Checkpoint> {
        let err = |detail: String| CliError::Checkpoint {
            path: path.display().to_string(),
            detail,
        };
        let file = File::open(path).map_err(|e| err(e.to_string()))?;
        Checkpoint::decode(&mut BufReader::new(file)).map_err(|e| err(e.to_string()))
    }

    /// Copies every saved tensor into the matching entry of `store`. Nothing is written
    /// unless names and shapes line up exactly; otherwise every difference is reported.
    pub fn restore(&self, store: &mut ParamStore) -> CliResult<()> {
        let mut diffs = Vec::new();
        let mut param_ids = Vec::new();
        for p in &self.params {
            match store.find_param(&p.name) {
                None => diffs.push(format!("parameter {} is not in the model", p.name)),
                Some(id) => {
                    let want = store.param(id).value.shape();
                    if p.value.shape() != want {
                        diffs.push(format!(
                            "parameter {}: checkpoint {} vs model {}",
                            p.name,
                            p.value.shape(),
                            want
                        ));
                    } else if p.adam_m.shape() != want || p.adam_v.shape() != want {
                        diffs.push(format!("parameter {}: moment shape mismatch", p.name));
                    }
                    param_ids.push(id);
                }
            }
        }
        for (_, p) in store.params() {
            if !self.params.iter().any(|s| s.name == p.name) {
                diffs.push(format!(
                    "parameter {} is missing from the checkpoint",
                    p.name
                ));
            }
        }
        let mut buffer_ids = Vec::new();
        for b in &self.buffers {
            match store.find_buffer(&b.name) {
                None => diffs.push(format!("buffer {} is not in the model", b.name)),
                Some(id) => {
                    let want = store.buffer(id).value.shape();
                    if b.value.shape() != want {
                        diffs.push(format!(
                            "buffer {}: checkpoint {} vs model {}",
                            b.name,
                            b.value.shape(),
                            want
                        ));
                    }
                    buffer_ids.push(id);
                }
            }
        }
        for (_, b) in store.buffers() {
            if !self.buffers.iter().any(|s| s.name == b.name) {
                diffs.push(format!("buffer {} is missing from the checkpoint", b.name));
            }
        }
        if !diffs.is_empty() {
            return Err(CliError::Incompatible(diffs));
        }
        for (p, id) in self.params.iter().zip(param_ids) {
            let dst = store.param_mut(id);
            dst.value = p.value.clone();
            dst.adam_m = p.adam_m.clone();
            dst.adam_v = p.adam_v.clone();
            dst.step_count = p.step_count;
            dst.grad = None;
        }
        for (b, id) in self.buffers.iter().zip(buffer_ids) {
            store.buffer_mut(id).value = b.value.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        let w = s.add_param("a.w", Tensor::full(Shape::new(2, 1, 3, 3), 0.25));
        s.param_mut(w).adam_m = Tensor::full(Shape::new(2, 1, 3, 3), -1.5);
        s.param_mut(w).step_count = 7;
        s.add_param("a.b", Tensor::full(Shape::new(1, 2, 1, 1), 0.1 + 0.2));
        s.add_buffer(
            "a.running_mean",
            Tensor::full(Shape::new(1, 2, 1, 1), 1e-300),
        );
        s
    }

    #[test]
    fn bytes_round_trip() {
        let state = TrainState {
            epoch: 3,
            global_step: 77,
            lr: 1e-3 * 0.1,
            best_val_ap: Some(0.5),
            seed: u64::MAX,
        };
        let ck = Checkpoint::capture("seed = 1\n".into(), state, &store());
        let mut bytes = Vec::new();
        ck.encode(&mut bytes).unwrap();
        let back = Checkpoint::decode(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        let mut again = Vec::new();
        back.encode(&mut again).unwrap();
        assert_eq!(again, bytes);

        let mut target = store();
        for (id, _) in target
            .params()
            .map(|(id, p)| (id, p.name.clone()))
            .collect::<Vec<_>>()
        {
            target.param_mut(id).value.data_mut().fill(9.0);
        }
        ck.restore(&mut target).unwrap();
        assert_eq!(Checkpoint::capture(ck.config.clone(), state, &target), ck);
    }

    #[test]
    fn truncated_and_foreign_files_fail() {
        let ck = Checkpoint::capture(
            String::new(),
            TrainState {
                epoch: 0,
                global_step: 0,
                lr: 1.0,
                best_val_ap: None,
                seed: 0,
            },
            &store(),
        );
        let mut bytes = Vec::new();
        ck.encode(&mut bytes).unwrap();
        assert!(Checkpoint::decode(&mut &bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::decode(&mut &b"NOTACKPT...."[..]).is_err());
    }

    #[test]
    fn shape_differences_are_all_listed() {
        let ck = Checkpoint::capture(
            String::new(),
            TrainState {
                epoch: 0,
                global_step: 0,
                lr: 1.0,
                best_val_ap: None,
                seed: 0,
            },
            &store(),
        );
        let mut other = ParamStore::new();
        other.add_param("a.w", Tensor::zeros(Shape::new(3, 1, 3, 3)));
        other.add_param("c.w", Tensor::zeros(Shape::new(1, 1, 1, 1)));
        other.add_buffer("a.running_mean", Tensor::zeros(Shape::new(1, 2, 1, 1)));
        let before = other.clone();
        let CliError::Incompatible(diffs) = ck.restore(&mut other).unwrap_err() else {
            panic!("expected incompatibility");
        };
        assert_eq!(diffs.len(), 3, "{diffs:?}");
        assert!(diffs[0].contains("a.w"));
        assert_eq!(
            Checkpoint::capture(String::new(), ck.state, &other),
            Checkpoint::capture(String::new(), ck.state, &before)
        );
    }
}
