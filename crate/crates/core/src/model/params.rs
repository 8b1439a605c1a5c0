use alloc::string::String;
use alloc::vec::Vec;

use crate::hash::ContentHasher;
use crate::{Error, Real, Result};

/// Location of one tensor inside a flat parameter buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    #[inline(always)]
    pub fn of<'a, T>(&self, data: &'a [T]) -> &'a [T] {
        &data[self.offset..self.offset + self.len]
    }

    #[inline(always)]
    pub fn of_mut<'a, T>(&self, data: &'a mut [T]) -> &'a mut [T] {
        &mut data[self.offset..self.offset + self.len]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub slot: Slot,
}

/// Named tensors stored back to back in one buffer so optimizers, hashing
/// and checkpoints can treat the whole set as a single vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    specs: Vec<TensorSpec>,
    data: Vec<T>,
}

impl<T: Real> ParamSet<T> {
    pub(crate) fn builder() -> ParamSetBuilder {
        ParamSetBuilder { specs: Vec::new(), len: 0 }
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.spec(name).map(|s| s.slot.of(&self.data))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let slot = self.spec(name)?.slot;
        Some(slot.of_mut(&mut self.data))
    }

    /// Replace every tensor from `(name, values)` pairs; all tensors must be
    /// provided with matching sizes.
    pub fn load<'a, I>(&mut self, tensors: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a [f32])>,
    {
        let mut seen = alloc::vec![false; self.specs.len()];
        for (name, values) in tensors {
            let Some(i) = self.specs.iter().position(|s| s.name == name) else {
                return Err(Error::Incompatible(alloc::format!("unknown tensor {name}")));
            };
            let slot = self.specs[i].slot;
            if values.len() != slot.len {
                return Err(Error::Incompatible(alloc::format!(
                    "tensor {name} has {} values, expected {}",
                    values.len(),
                    slot.len
                )));
            }
            for (d, &v) in slot.of_mut(&mut self.data).iter_mut().zip(values) {
                *d = T::of(v as f64);
            }
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Incompatible(alloc::format!("missing tensor {}", self.specs[i].name)));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let mut h = ContentHasher::new();
        for s in &self.specs {
            h.str(&s.name).reals(s.slot.of(&self.data));
        }
        h.finish()
    }

    /// Copy into another precision.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { specs: self.specs.clone(), data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }

    pub fn zeros_like(&self) -> Vec<T> {
        alloc::vec![T::zero(); self.data.len()]
    }
}

pub(crate) struct ParamSetBuilder {
    specs: Vec<TensorSpec>,
    len: usize,
}

impl ParamSetBuilder {
    pub fn add(&mut self, name: String, shape: &[usize]) -> Slot {
        let len = shape.iter().product();
        let slot = Slot { offset: self.len, len };
        self.specs.push(TensorSpec { name, shape: shape.to_vec(), slot });
        self.len += len;
        slot
    }

    pub fn finish<T: Real>(self) -> ParamSet<T> {
        ParamSet { specs: self.specs, data: alloc::vec![T::zero(); self.len] }
    }
}
