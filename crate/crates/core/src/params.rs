//! Named parameter storage and the `CKPT v1` checkpoint format.
//!
//! ```text
//! CKPT v1
//! <name> <d1> <d2> ...
//! <values of one row per line, 17 significant digits>
//! ...
//! ```
//!
//! A tensor of shape `[d1, ..., dk]` is written as `d1·…·d(k-1)` lines of `dk`
//! values; vectors and scalars take a single line.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::graph::fmt_f64;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!name.contains(char::is_whitespace));
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    /// Overwrites a parameter value.
    pub fn set(&mut self, id: ParamId, value: Tensor) {
        self.tensors[id.0] = value;
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on the tape; `trainable` decides whether
    /// gradients are tracked.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        Binding {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), trainable))
                .collect(),
        }
    }

    /// Replaces all values with those of `other`, which must have the same
    /// names and shapes.
    pub fn load(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Format(
                "checkpoint parameter names do not match the network".into(),
            ));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::Format(format!(
                    "checkpoint shape {:?} does not match {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        self.tensors = other.tensors.clone();
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "CKPT v1")?;
        for (name, t) in self.iter() {
            write!(w, "{name}")?;
            for d in t.shape() {
                write!(w, " {d}")?;
            }
            writeln!(w)?;
            let width = t.shape().last().copied().unwrap_or(1);
            if width == 0 {
                continue;
            }
            for row in t.data().chunks(width) {
                let s: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
                writeln!(w, "{}", s.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let next = |lines: &mut std::io::Lines<R>| -> Result<Option<String>> {
            lines.next().transpose().map_err(Error::from)
        };
        match next(&mut lines)? {
            Some(h) if h.trim() == "CKPT v1" => {}
            _ => return Err(Error::Format("missing `CKPT v1` header".into())),
        }
        let mut store = ParamStore::new();
        while let Some(header) = next(&mut lines)? {
            if header.trim().is_empty() {
                continue;
            }
            let mut it = header.split_whitespace();
            let name = it.next().unwrap().to_string();
            let shape: std::result::Result<Vec<usize>, _> = it.map(str::parse).collect();
            let shape = shape.map_err(|e| Error::Format(format!("parameter `{name}`: {e}")))?;
            let width = shape.last().copied().unwrap_or(1);
            let total: usize = shape.iter().product();
            let rows = total.checked_div(width).unwrap_or(0);
            let mut data = Vec::with_capacity(total);
            for _ in 0..rows {
                let line = next(&mut lines)?
                    .ok_or_else(|| Error::Format(format!("parameter `{name}` is truncated")))?;
                for tok in line.split_whitespace() {
                    data.push(
                        tok.parse::<f64>()
                            .map_err(|e| Error::Format(format!("parameter `{name}`: {e}")))?,
                    );
                }
            }
            store.add(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }
}

/// Tape handles for the parameters of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Uses existing tape leaves, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn checkpoint_round_trips(vals in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 6)) {
            let mut s = ParamStore::new();
            s.add("a.w", Tensor::matrix(2, 3, vals.clone()).unwrap());
            s.add("a.b", Tensor::vector(vals[..2].to_vec()));
            s.add("c", Tensor::scalar(vals[5]));
            s.add("empty", Tensor::zeros(&[0, 4]));
            let mut buf = Vec::new();
            s.write_checkpoint(&mut buf).unwrap();
            let back = ParamStore::read_checkpoint(&buf[..]).unwrap();
            prop_assert_eq!(back, s);
        }
    }

    #[test]
    fn load_checks_layout() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::zeros(&[2]));
        let mut b = ParamStore::new();
        b.add("w", Tensor::zeros(&[3]));
        assert!(a.load(&b).is_err());
    }
}
