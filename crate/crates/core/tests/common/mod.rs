#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};

use diffitm::diffusion::Conditioning;
use diffitm::itm::{ErrorModel, NoiseBank};
use diffitm::scenegen::ImageTensor;
use sha2::{Digest, Sha256};

fn unit(parts: &[&[u8]]) -> f64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap()) as f64 / u64::MAX as f64
}

fn cond_bytes(w: &Conditioning) -> Vec<u8> {
    w.ids().iter().map(|&i| i as u8).collect()
}

/// Deterministic pseudo-random errors: a per-entry level shared by every
/// pair (like a noise level), a per-image offset and a per-pair term.
pub struct HashModel {
    pub image_offset: f64,
}

impl ErrorModel for HashModel {
    fn entry_errors(&self, x0: &ImageTensor, w: &Conditioning, bank: &NoiseBank) -> diffitm::Result<Vec<f64>> {
        let img = x0.to_bytes();
        let c = cond_bytes(w);
        let offset = self.image_offset * unit(&[b"offset", &img]);
        Ok(bank
            .samples
            .iter()
            .map(|s| {
                let t = s.t as f64 / 1000.0;
                let e = s.eps[0].to_le_bytes();
                let shared = 2.0 * t + s.eps[0].abs();
                shared + offset + 0.1 * unit(&[b"pair", &img, &c, &e])
            })
            .collect())
    }
}

pub struct ConstModel;

impl ErrorModel for ConstModel {
    fn entry_errors(&self, _: &ImageTensor, _: &Conditioning, bank: &NoiseBank) -> diffitm::Result<Vec<f64>> {
        Ok(vec![1.0; bank.len()])
    }
}

/// Counts calls and forwards to the wrapped model.
pub struct Counting<M> {
    pub inner: M,
    pub calls: AtomicUsize,
}

impl<M> Counting<M> {
    pub fn new(inner: M) -> Self {
        Counting {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<M: ErrorModel> ErrorModel for Counting<M> {
    fn entry_errors(&self, x0: &ImageTensor, w: &Conditioning, bank: &NoiseBank) -> diffitm::Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.entry_errors(x0, w, bank)
    }
}
