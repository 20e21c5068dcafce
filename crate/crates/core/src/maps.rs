//! Quantitative parameter maps shared by simulation, reconstruction and evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One kind of tissue parameter map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    /// Equilibrium amplitude (arbitrary units).
    A,
    /// Effective inversion efficiency, unitless in [0, 1].
    B,
    /// Longitudinal relaxation (ms).
    T1,
    /// Transverse relaxation (ms).
    T2,
    /// Effective transverse relaxation (ms).
    T2s,
    /// Phase offset at TE = 0 (rad).
    Phi0,
    /// Off-resonance frequency (Hz).
    Freq,
}

impl MapKind {
    pub const ALL: [MapKind; 7] = [
        MapKind::A,
        MapKind::B,
        MapKind::T1,
        MapKind::T2,
        MapKind::T2s,
        MapKind::Phi0,
        MapKind::Freq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MapKind::A => "a",
            MapKind::B => "b",
            MapKind::T1 => "t1",
            MapKind::T2 => "t2",
            MapKind::T2s => "t2s",
            MapKind::Phi0 => "phi0",
            MapKind::Freq => "freq",
        }
    }
}

impl fmt::Display for MapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MapKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown map kind `{s}`")))
    }
}

/// A set of per-voxel parameter maps over one `(H, W, D)` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ParametricMaps<T: Scalar> {
    shape: [usize; 3],
    maps: BTreeMap<MapKind, Array3<T>>,
}

impl<T: Scalar> ParametricMaps<T> {
    pub fn new(shape: [usize; 3]) -> Self {
        Self {
            shape,
            maps: BTreeMap::new(),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn insert(&mut self, kind: MapKind, map: Array3<T>) -> Result<()> {
        let s = map.shape();
        for (axis, (&got, &expected)) in ["x", "y", "z"].iter().zip(s.iter().zip(&self.shape)) {
            if got != expected {
                return Err(Error::ShapeMismatch {
                    axis,
                    expected,
                    got,
                });
            }
        }
        self.maps.insert(kind, map);
        Ok(())
    }

    pub fn get(&self, kind: MapKind) -> Option<&Array3<T>> {
        self.maps.get(&kind)
    }

    pub fn get_mut(&mut self, kind: MapKind) -> Option<&mut Array3<T>> {
        self.maps.get_mut(&kind)
    }

    pub fn require(&self, kind: MapKind) -> Result<&Array3<T>> {
        self.get(kind).ok_or_else(|| Error::MissingField(kind.to_string()))
    }

    pub fn kinds(&self) -> impl Iterator<Item = MapKind> + '_ {
        self.maps.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (MapKind, &Array3<T>)> {
        self.maps.iter().map(|(k, v)| (*k, v))
    }

    /// Element-type conversion, e.g. for persisting single precision maps.
    pub fn cast<U: Scalar>(&self) -> ParametricMaps<U> {
        ParametricMaps {
            shape: self.shape,
            maps: self
                .maps
                .iter()
                .map(|(k, v)| (*k, v.mapv(|x| U::lit(x.as_f64()))))
                .collect(),
        }
    }
}
