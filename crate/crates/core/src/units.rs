//! Conversions between boundary units (ordinary frequency in GHz/MHz, times in
//! ns/us) and the internal SI angular convention.

use std::f64::consts::TAU;

pub fn ghz(f: f64) -> f64 {
    TAU * f * 1e9
}

pub fn mhz(f: f64) -> f64 {
    TAU * f * 1e6
}

pub fn to_ghz(omega: f64) -> f64 {
    omega / (TAU * 1e9)
}

pub fn to_mhz(omega: f64) -> f64 {
    omega / (TAU * 1e6)
}

pub fn ns(t: f64) -> f64 {
    t * 1e-9
}

pub fn us(t: f64) -> f64 {
    t * 1e-6
}

pub fn to_ns(t: f64) -> f64 {
    t * 1e9
}

pub fn ff(c: f64) -> f64 {
    c * 1e-15
}
