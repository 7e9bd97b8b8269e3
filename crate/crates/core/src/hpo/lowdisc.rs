//! Scrambled Halton sequence.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn first_primes(n: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(n);
    let mut c = 2u64;
    while primes.len() < n {
        if primes.iter().all(|p| c % p != 0) {
            primes.push(c);
        }
        c += 1;
    }
    primes
}

/// Halton points with an independent random digit permutation per
/// dimension and digit position. Permutations fix nothing, so point 0 is
/// not the origin.
#[derive(Debug, Clone)]
pub struct ScrambledHalton {
    bases: Vec<u64>,
    perms: Vec<Vec<Vec<u64>>>,
}

impl ScrambledHalton {
    pub fn new(dim: usize, seed: u64) -> Self {
        let bases = first_primes(dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let perms = bases
            .iter()
            .map(|&b| {
                let digits = (52.0 / libm::log2(b as f64)) as usize;
                (0..digits)
                    .map(|_| {
                        let mut p: Vec<u64> = (0..b).collect();
                        p.shuffle(&mut rng);
                        p
                    })
                    .collect()
            })
            .collect();
        ScrambledHalton { bases, perms }
    }

    pub fn dim(&self) -> usize {
        self.bases.len()
    }

    pub fn point(&self, index: u64) -> Vec<f64> {
        self.bases
            .iter()
            .zip(&self.perms)
            .map(|(&b, perms)| {
                let mut i = index;
                let mut scale = 1.0 / b as f64;
                let mut x = 0.0;
                for perm in perms {
                    x += perm[(i % b) as usize] as f64 * scale;
                    i /= b;
                    scale /= b as f64;
                }
                x.min(1.0 - f64::EPSILON)
            })
            .collect()
    }
}
