//! Thread-local flop counter used to cross-check the analytic accountant.
//!
//! [`super::matmul`] records against the class set by [`with_class`]; other
//! kernels (attention, embedding lookup) record explicitly.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpClass {
    Vocab,
    Kv,
    Qo,
    Mlp,
    Attn,
    Other,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopTally {
    pub vocab: u64,
    pub kv: u64,
    pub qo: u64,
    pub mlp: u64,
    pub attn: u64,
    pub other: u64,
}

impl FlopTally {
    pub fn total(&self) -> u64 {
        self.vocab + self.kv + self.qo + self.mlp + self.attn + self.other
    }

    /// Flops spent in dense weight projections (everything but attention scores).
    pub fn linear(&self) -> u64 {
        self.vocab + self.kv + self.qo + self.mlp
    }

    fn slot(&mut self, class: OpClass) -> &mut u64 {
        match class {
            OpClass::Vocab => &mut self.vocab,
            OpClass::Kv => &mut self.kv,
            OpClass::Qo => &mut self.qo,
            OpClass::Mlp => &mut self.mlp,
            OpClass::Attn => &mut self.attn,
            OpClass::Other => &mut self.other,
        }
    }

    pub fn since(&self, earlier: &FlopTally) -> FlopTally {
        FlopTally {
            vocab: self.vocab - earlier.vocab,
            kv: self.kv - earlier.kv,
            qo: self.qo - earlier.qo,
            mlp: self.mlp - earlier.mlp,
            attn: self.attn - earlier.attn,
            other: self.other - earlier.other,
        }
    }
}

thread_local! {
    static TALLY: Cell<FlopTally> = Cell::new(FlopTally::default());
    static CLASS: Cell<OpClass> = const { Cell::new(OpClass::Other) };
}

pub fn reset() {
    TALLY.with(|t| t.set(FlopTally::default()));
}

pub fn snapshot() -> FlopTally {
    TALLY.with(Cell::get)
}

pub fn record(flops: u64) {
    record_as(CLASS.with(Cell::get), flops);
}

pub fn record_as(class: OpClass, flops: u64) {
    TALLY.with(|t| {
        let mut v = t.get();
        *v.slot(class) += flops;
        t.set(v);
    });
}

/// Runs `f` with matmul flops attributed to `class`, restoring the previous class afterwards.
pub fn with_class<R>(class: OpClass, f: impl FnOnce() -> R) -> R {
    let prev = CLASS.with(|c| c.replace(class));
    let out = f();
    CLASS.with(|c| c.set(prev));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{matmul, Matrix, Precision};

    #[test]
    fn matmul_is_attributed_to_active_class() {
        reset();
        let a = Matrix::zeros(3, 4, Precision::Double);
        let b = Matrix::zeros(4, 5, Precision::Double);
        with_class(OpClass::Mlp, || matmul(&a, &b).unwrap());
        matmul(&a, &b).unwrap();
        let t = snapshot();
        assert_eq!(t.mlp, 120);
        assert_eq!(t.other, 120);
        assert_eq!(t.total(), 240);
    }
}
