//! Pixel-level F1 / precision / recall with foreground as the positive class.

use std::ops::{Add, AddAssign};

use crate::data::BinaryMask;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

/// `num / den`, or 1.0 when nothing was predicted and nothing exists.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl Add for Confusion {
    type Output = Confusion;

    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for Confusion {
    fn add_assign(&mut self, o: Confusion) {
        *self = *self + o;
    }
}

impl std::iter::Sum for Confusion {
    fn sum<I: Iterator<Item = Confusion>>(iter: I) -> Confusion {
        iter.fold(Confusion::default(), Add::add)
    }
}

pub fn confusion_bits(pred: &[bool], gt: &[bool]) -> Confusion {
    let mut c = Confusion::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<Confusion> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::shape(
            "confusion",
            format!("prediction {}x{} vs ground truth {}x{}", pred.width, pred.height, gt.width, gt.height),
        ));
    }
    Ok(confusion_bits(&pred.bits, &gt.bits))
}

pub fn f1(c: &Confusion) -> f64 {
    c.f1()
}

pub fn precision(c: &Confusion) -> f64 {
    c.precision()
}

pub fn recall(c: &Confusion) -> f64 {
    c.recall()
}
