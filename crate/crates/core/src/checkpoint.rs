//! Plain-text checkpoints for variational states and Gibbs chains.
//!
//! ```text
//! bpfa-checkpoint v1
//! kind svi
//! K 3
//! D 2
//! iteration 40
//! seed 7
//! a 1.5e0 ...
//! ```
//!
//! Reals are written in shortest round-trip form, so a load reproduces the saved
//! state bit for bit.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{BpfaError, Result};
use crate::gibbs_baseline::ChainState;
use crate::model::{GlobalSample, LocalSample};
use crate::variational::GlobalVariationalState;

const MAGIC: &str = "bpfa-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Svi {
        state: GlobalVariationalState,
        iteration: u64,
        seed: u64,
    },
    Chain {
        state: ChainState,
        seed: u64,
    },
}

fn put_reals<'a>(out: &mut String, key: &str, vals: impl IntoIterator<Item = &'a f64>) {
    out.push_str(key);
    for v in vals {
        write!(out, " {v:e}").unwrap();
    }
    out.push('\n');
}

pub fn to_text(ckpt: &Checkpoint) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    match ckpt {
        Checkpoint::Svi {
            state,
            iteration,
            seed,
        } => {
            writeln!(out, "kind svi\nK {}\nD {}\niteration {iteration}\nseed {seed}", state.k(), state.d()).unwrap();
            put_reals(&mut out, "a", &state.a);
            put_reals(&mut out, "b", &state.b);
            for (key, v) in [("c", state.c), ("d", state.d), ("e", state.e), ("f", state.f)] {
                put_reals(&mut out, key, [v].iter());
            }
            put_reals(&mut out, "tau", state.tau.iter());
            put_reals(&mut out, "mu", state.mu.iter());
        }
        Checkpoint::Chain { state, seed } => {
            let beta = &state.beta;
            writeln!(
                out,
                "kind chain\nK {}\nD {}\niteration {}\nseed {seed}\nN {}",
                beta.k(),
                beta.d(),
                state.iteration,
                state.psi.len()
            )
            .unwrap();
            put_reals(&mut out, "pi", &beta.pi);
            put_reals(&mut out, "phi", beta.phi.iter());
            put_reals(&mut out, "gamma_w", [beta.gamma_w].iter());
            put_reals(&mut out, "gamma_obs", [beta.gamma_obs].iter());
            out.push('z');
            for s in &state.psi {
                out.push(' ');
                out.extend(s.z.iter().map(|&z| if z { '1' } else { '0' }));
            }
            out.push('\n');
            put_reals(&mut out, "w", state.psi.iter().flat_map(|s| s.w.iter()));
        }
    }
    out
}

struct Fields<'a>(HashMap<&'a str, Vec<&'a str>>);

impl<'a> Fields<'a> {
    fn raw(&self, key: &str) -> Result<&[&'a str]> {
        self.0
            .get(key)
            .map(Vec::as_slice)
            .ok_or_else(|| BpfaError::Parse(format!("checkpoint lacks '{key}'")))
    }

    fn count(&self, key: &str) -> Result<u64> {
        match self.raw(key)? {
            [v] => v.parse().map_err(|_| BpfaError::Parse(format!("bad integer for '{key}'"))),
            _ => Err(BpfaError::Parse(format!("'{key}' must hold one value"))),
        }
    }

    fn reals(&self, key: &str, len: usize) -> Result<Vec<f64>> {
        let raw = self.raw(key)?;
        if raw.len() != len {
            return Err(BpfaError::Shape(format!("'{key}' holds {} values, expected {len}", raw.len())));
        }
        raw.iter()
            .map(|s| s.parse().map_err(|_| BpfaError::Parse(format!("bad real '{s}' in '{key}'"))))
            .collect()
    }

    fn real(&self, key: &str) -> Result<f64> {
        Ok(self.reals(key, 1)?[0])
    }
}

pub fn from_text(text: &str) -> Result<Checkpoint> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MAGIC) {
        return Err(BpfaError::MalformedHeader(format!("checkpoint must start with '{MAGIC}'")));
    }
    let mut map = HashMap::new();
    for line in lines {
        let mut parts = line.split_ascii_whitespace();
        if let Some(key) = parts.next() {
            map.insert(key, parts.collect::<Vec<_>>());
        }
    }
    let f = Fields(map);
    let kind = f.raw("kind")?.first().copied().unwrap_or("");
    let k = f.count("K")? as usize;
    let d = f.count("D")? as usize;
    let iteration = f.count("iteration")?;
    let seed = f.count("seed")?;
    let matrix = |key: &str| -> Result<Array2<f64>> {
        Ok(Array2::from_shape_vec((k, d), f.reals(key, k * d)?).expect("length checked"))
    };
    match kind {
        "svi" => {
            let state = GlobalVariationalState {
                a: f.reals("a", k)?,
                b: f.reals("b", k)?,
                c: f.real("c")?,
                d: f.real("d")?,
                e: f.real("e")?,
                f: f.real("f")?,
                tau: matrix("tau")?,
                mu: matrix("mu")?,
            };
            state.validate()?;
            Ok(Checkpoint::Svi {
                state,
                iteration,
                seed,
            })
        }
        "chain" => {
            let n = f.count("N")? as usize;
            let beta = GlobalSample {
                pi: f.reals("pi", k)?,
                phi: matrix("phi")?,
                gamma_w: f.real("gamma_w")?,
                gamma_obs: f.real("gamma_obs")?,
            };
            beta.validate()?;
            let z = f.raw("z")?;
            if z.len() != n || z.iter().any(|s| s.len() != k) {
                return Err(BpfaError::Shape("indicator block has the wrong shape".into()));
            }
            let w = f.reals("w", n * k)?;
            let psi = z
                .iter()
                .zip(w.chunks(k.max(1)))
                .map(|(zs, ws)| {
                    let z = zs
                        .bytes()
                        .map(|b| match b {
                            b'0' => Ok(false),
                            b'1' => Ok(true),
                            _ => Err(BpfaError::Parse("indicators must be 0 or 1".into())),
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(LocalSample { z, w: ws.to_vec() })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Checkpoint::Chain {
                state: ChainState { beta, psi, iteration },
                seed,
            })
        }
        other => Err(BpfaError::MalformedHeader(format!("unknown checkpoint kind '{other}'"))),
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, to_text(ckpt))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_text(&fs::read_to_string(path)?)
}
