//! Pixel-level F1 for localization and per-damage-class scoring.

use std::ops::{Add, AddAssign};

use serde::{Serialize, Serializer};

use crate::downstream::{DamageMask, NUM_CLASSES};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ClassCounts {
    /// `2tp / (2tp + fp + fn)`, NaN when the class is absent from both masks.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            f64::NAN
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

/// Per-class counts plus binary building counts; sums across images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub classes: [ClassCounts; NUM_CLASSES],
    /// Counts for "building" on masks binarized at class ≥ 1.
    pub localization: ClassCounts,
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        for (a, b) in self.classes.iter_mut().zip(o.classes) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
        }
        self.localization.tp += o.localization.tp;
        self.localization.fp += o.localization.fp;
        self.localization.fn_ += o.localization.fn_;
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

pub fn confusion_counts(pred: &DamageMask, gt: &DamageMask) -> Result<ConfusionCounts> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape(
            "confusion_counts",
            format!("pred {}x{} vs gt {}x{}", pred.height(), pred.width(), gt.height(), gt.width()),
        ));
    }
    let mut out = ConfusionCounts::default();
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if p == g {
            out.classes[p as usize].tp += 1;
        } else {
            out.classes[p as usize].fp += 1;
            out.classes[g as usize].fn_ += 1;
        }
        match (p >= 1, g >= 1) {
            (true, true) => out.localization.tp += 1,
            (true, false) => out.localization.fp += 1,
            (false, true) => out.localization.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(out)
}

fn nan_as_null<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_nan() {
        s.serialize_none()
    } else {
        s.serialize_f64(*v)
    }
}

/// F1 values in table column order. Undefined entries are NaN (serialized as `null`).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct F1Report {
    #[serde(serialize_with = "nan_as_null")]
    pub localization: f64,
    #[serde(serialize_with = "nan_as_null")]
    pub damage: f64,
    #[serde(serialize_with = "nan_as_null")]
    pub no_damage: f64,
    #[serde(serialize_with = "nan_as_null")]
    pub minor: f64,
    #[serde(serialize_with = "nan_as_null")]
    pub major: f64,
    #[serde(serialize_with = "nan_as_null")]
    pub destroyed: f64,
}

impl PartialEq for F1Report {
    /// NaN equals NaN here: two reports agree when every entry is equal or
    /// undefined in both.
    fn eq(&self, o: &Self) -> bool {
        let same = |a: f64, b: f64| a == b || (a.is_nan() && b.is_nan());
        self.entries().iter().zip(o.entries()).all(|((_, a), (_, b))| same(*a, b))
    }
}

impl F1Report {
    pub const KEYS: [&'static str; 6] = ["localization", "damage", "no_damage", "minor", "major", "destroyed"];

    pub fn entries(&self) -> [(&'static str, f64); 6] {
        [
            ("localization", self.localization),
            ("damage", self.damage),
            ("no_damage", self.no_damage),
            ("minor", self.minor),
            ("major", self.major),
            ("destroyed", self.destroyed),
        ]
    }

    pub fn class_f1(&self) -> [f64; 4] {
        [self.no_damage, self.minor, self.major, self.destroyed]
    }
}

/// Localization and per-class F1; the damage aggregate is left NaN.
pub fn f1_scores(counts: &ConfusionCounts) -> F1Report {
    let c = &counts.classes;
    F1Report {
        localization: counts.localization.f1(),
        damage: f64::NAN,
        no_damage: c[1].f1(),
        minor: c[2].f1(),
        major: c[3].f1(),
        destroyed: c[4].f1(),
    }
}

/// Harmonic mean of the defined class F1s (classes 1–4); 0 if any defined
/// value is 0, NaN if none is defined.
pub fn aggregate_report(per_class: &F1Report) -> F1Report {
    let defined: Vec<f64> = per_class.class_f1().into_iter().filter(|v| !v.is_nan()).collect();
    let damage = if defined.is_empty() {
        f64::NAN
    } else if defined.iter().any(|&v| v == 0.0) {
        0.0
    } else {
        defined.len() as f64 / defined.iter().map(|v| 1.0 / v).sum::<f64>()
    };
    F1Report { damage, ..*per_class }
}

/// Complete report for accumulated counts.
pub fn report(counts: &ConfusionCounts) -> F1Report {
    aggregate_report(&f1_scores(counts))
}
