//! Permutations of hidden units.
//!
//! Convention used across the crate: `map[i]` is the *source* index that
//! feeds target slot `i`, so the permutation matrix has `P[i, map[i]] = 1`
//! and `(P v)[i] = v[map[i]]`.

use crate::error::{Error, Result};
use crate::model::WeightSet;
use crate::numerics::{Matrix, Rng};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation {
    map: Vec<usize>,
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;

    fn try_from(map: Vec<usize>) -> Result<Self> {
        Permutation::new(map)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.map
    }
}

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &j in &map {
            if j >= map.len() || std::mem::replace(&mut seen[j], true) {
                return Err(Error::arg(format!("not a bijection on 0..{}: {map:?}", map.len())));
            }
        }
        Ok(Self { map })
    }

    pub fn identity(n: usize) -> Self {
        Self { map: (0..n).collect() }
    }

    /// Builds a permutation from disjoint cycles `(a₁ a₂ … a_k)` meaning
    /// `a₁ ↦ a₂ ↦ … ↦ a_k ↦ a₁` under `i ↦ map[i]`.
    pub fn from_cycles(n: usize, cycles: &[Vec<usize>]) -> Result<Self> {
        let mut map: Vec<usize> = (0..n).collect();
        for c in cycles {
            for (k, &a) in c.iter().enumerate() {
                if a >= n {
                    return Err(Error::arg(format!("cycle element {a} >= {n}")));
                }
                map[a] = c[(k + 1) % c.len()];
            }
        }
        Self::new(map)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    #[inline]
    pub fn get(&self, i: usize) -> usize {
        self.map[i]
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &j)| i == j)
    }

    /// Disjoint cycles following `i ↦ map[i]`, fixed points included. Each
    /// cycle starts at its smallest element; cycles are sorted by that element.
    pub fn cycles(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.len()];
        let mut out = Vec::new();
        for start in 0..self.len() {
            if seen[start] {
                continue;
            }
            let mut cycle = Vec::new();
            let mut i = start;
            while !seen[i] {
                seen[i] = true;
                cycle.push(i);
                i = self.map[i];
            }
            out.push(cycle);
        }
        out
    }

    pub fn cycle_count(&self) -> usize {
        let mut seen = vec![false; self.len()];
        let mut count = 0;
        for start in 0..self.len() {
            if !seen[start] {
                count += 1;
                let mut i = start;
                while !seen[i] {
                    seen[i] = true;
                    i = self.map[i];
                }
            }
        }
        count
    }

    /// Number of transpositions: the minimal count of swaps whose product is
    /// this permutation, `n − #cycles`.
    pub fn not_count(&self) -> usize {
        self.len() - self.cycle_count()
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.len()];
        for (i, &j) in self.map.iter().enumerate() {
            inv[j] = i;
        }
        Self { map: inv }
    }

    /// The matrix product `P·Q`: acting on weights, `q` is applied first.
    pub fn compose(&self, q: &Permutation) -> Result<Self> {
        if self.len() != q.len() {
            return Err(Error::arg(format!(
                "composing permutations of sizes {} and {}",
                self.len(),
                q.len()
            )));
        }
        Ok(Self {
            map: self.map.iter().map(|&i| q.map[i]).collect(),
        })
    }

    /// `(P v)[i] = v[map[i]]`
    pub fn permute_slice<T: Clone>(&self, v: &[T]) -> Vec<T> {
        self.map.iter().map(|&j| v[j].clone()).collect()
    }

    /// Uniformly random permutation of `n`.
    pub fn random(n: usize, rng: &mut Rng) -> Self {
        Self {
            map: rng.permutation(n),
        }
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in self.cycles().into_iter().filter(|c| c.len() > 1) {
            let parts: Vec<String> = c.iter().map(usize::to_string).collect();
            write!(f, "({})", parts.join(" "))?;
        }
        if self.not_count() == 0 {
            write!(f, "()")?;
        }
        Ok(())
    }
}

pub fn cycle_decompose(p: &Permutation) -> Vec<Vec<usize>> {
    p.cycles()
}

pub fn not_count(p: &Permutation) -> usize {
    p.not_count()
}

pub fn compose(p: &Permutation, q: &Permutation) -> Result<Permutation> {
    p.compose(q)
}

pub fn invert(p: &Permutation) -> Permutation {
    p.inverse()
}

struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        self.parent[ra] = rb;
    }
}

/// A random permutation of `h` with exactly `k` transpositions.
///
/// Starts from the identity and applies `k` swaps, each between two elements
/// currently in different cycles; every such swap merges two cycles and so
/// raises the count by exactly one.
pub fn random_with_not(h: usize, k: usize, rng: &mut Rng) -> Result<Permutation> {
    if h == 0 || k >= h {
        return Err(Error::arg(format!("NoT {k} not in 0..={} for size {h}", h.saturating_sub(1))));
    }
    let mut map: Vec<usize> = (0..h).collect();
    let mut sets = DisjointSets::new(h);
    for _ in 0..k {
        let a = rng.below(h);
        let ra = sets.find(a);
        let b = loop {
            let b = rng.below(h);
            if sets.find(b) != ra {
                break b;
            }
        };
        map.swap(a, b);
        sets.union(a, b);
    }
    Ok(Permutation { map })
}

/// Permutes hidden units: row `i` of `w1` and `b1[i]` come from source unit
/// `map[i]`, and so does column `i` of `w2`. This realizes
/// `W₁' = P W₁`, `b₁' = P b₁`, `W₂' = W₂ Pᵀ`; `b₂` is untouched.
pub fn apply_to_weights(p: &Permutation, w: &WeightSet) -> Result<WeightSet> {
    if p.len() != w.hidden_size() {
        return Err(Error::arg(format!(
            "permutation of size {} for hidden size {}",
            p.len(),
            w.hidden_size()
        )));
    }
    let w1 = w.w1.select_rows(p.as_slice());
    let b1 = p.permute_slice(&w.b1);
    let w2 = Matrix::from_fn(w.w2.rows(), w.w2.cols(), |r, c| w.w2.get(r, p.get(c)));
    WeightSet::new(w1, b1, w2, w.b2.clone())
}
