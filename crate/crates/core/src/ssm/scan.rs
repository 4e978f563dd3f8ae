//! First-order linear recurrences `h_t = a_t ⊙ h_{t-1} + u_t` over a
//! sequence of state vectors, evaluated left to right or as an associative
//! prefix scan.
//!
//! Buffers are flat `[L * state]`, row-major in time.

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// One step of the recurrence as an affine map `h -> a ⊙ h + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanElement<T> {
    pub a: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Float> ScanElement<T> {
    pub fn identity(state: usize) -> Self {
        ScanElement {
            a: vec![T::one(); state],
            b: vec![T::zero(); state],
        }
    }

    /// Apply `self` first, then `next`:
    /// `(a1, b1) ∘ (a2, b2) = (a2 ⊙ a1, a2 ⊙ b1 + b2)`.
    pub fn combine(&self, next: &Self) -> Self {
        let mut out = next.clone();
        combine_into(&self.a, &self.b, &mut out.a, &mut out.b);
        out
    }

    pub fn apply(&self, h: &[T]) -> Vec<T> {
        self.a
            .iter()
            .zip(&self.b)
            .zip(h)
            .map(|((&a, &b), &h)| a * h + b)
            .collect()
    }
}

/// `second <- first ∘ second`, elementwise.
#[inline]
fn combine_into<T: Float>(a1: &[T], b1: &[T], a2: &mut [T], b2: &mut [T]) {
    for i in 0..a2.len() {
        b2[i] = a2[i] * b1[i] + b2[i];
        a2[i] = a2[i] * a1[i];
    }
}

fn check<T>(a_bar: &[T], u: &[T], state: usize, h_init: Option<&[T]>) -> Result<usize> {
    if state == 0 {
        return Err(Error::invalid("scan state size must be positive"));
    }
    if a_bar.len() != u.len() || !a_bar.len().is_multiple_of(state) || a_bar.is_empty() {
        return Err(Error::shape("scan", &[a_bar.len()], &[u.len(), state]));
    }
    if let Some(h) = h_init {
        if h.len() != state {
            return Err(Error::shape("scan initial state", &[h.len()], &[state]));
        }
    }
    Ok(a_bar.len() / state)
}

/// `h_t = a_t ⊙ h_{t-1} + u_t`, left to right, `h_0 = h_init` (zero if absent).
pub fn scan_sequential<T: Float>(
    a_bar: &[T],
    u: &[T],
    state: usize,
    h_init: Option<&[T]>,
) -> Result<Vec<T>> {
    let len = check(a_bar, u, state, h_init)?;
    let mut h = vec![T::zero(); len * state];
    let mut prev: Vec<T> = h_init.map_or_else(|| vec![T::zero(); state], <[T]>::to_vec);
    for t in 0..len {
        let row = &mut h[t * state..(t + 1) * state];
        for j in 0..state {
            row[j] = a_bar[t * state + j] * prev[j] + u[t * state + j];
        }
        prev.copy_from_slice(row);
    }
    Ok(h)
}

/// Same contract as [`scan_sequential`], computed as a work-efficient
/// (up-sweep / down-sweep) exclusive prefix scan over [`ScanElement`]s.
/// Each tree level runs its independent combines on the rayon pool; the
/// combine tree is fixed, so the result does not depend on the schedule.
pub fn scan_parallel<T: Float + Send + Sync>(
    a_bar: &[T],
    u: &[T],
    state: usize,
    h_init: Option<&[T]>,
) -> Result<Vec<T>> {
    let len = check(a_bar, u, state, h_init)?;
    let n = len.next_power_of_two();
    let mut ta = vec![T::one(); n * state];
    let mut tb = vec![T::zero(); n * state];
    ta[..len * state].copy_from_slice(a_bar);
    tb[..len * state].copy_from_slice(u);

    // Up-sweep: node (2d-1) of each 2d-block absorbs node (d-1).
    let mut d = 1;
    while d < n {
        let chunk = 2 * d * state;
        ta.par_chunks_mut(chunk)
            .zip(tb.par_chunks_mut(chunk))
            .with_min_len(64)
            .for_each(|(ca, cb)| {
                let (la, ra) = ca.split_at_mut((2 * d - 1) * state);
                let (lb, rb) = cb.split_at_mut((2 * d - 1) * state);
                let l = (d - 1) * state..d * state;
                combine_into(&la[l.clone()], &lb[l], ra, rb);
            });
        d *= 2;
    }

    // Down-sweep to an exclusive scan.
    ta[(n - 1) * state..].iter_mut().for_each(|v| *v = T::one());
    tb[(n - 1) * state..]
        .iter_mut()
        .for_each(|v| *v = T::zero());
    let mut d = n / 2;
    while d >= 1 {
        let chunk = 2 * d * state;
        ta.par_chunks_mut(chunk)
            .zip(tb.par_chunks_mut(chunk))
            .with_min_len(64)
            .for_each(|(ca, cb)| {
                let (la, ra) = ca.split_at_mut((2 * d - 1) * state);
                let (lb, rb) = cb.split_at_mut((2 * d - 1) * state);
                let l = (d - 1) * state..d * state;
                // left <- prefix; right <- prefix ∘ left-subtree
                let mut sub_a = la[l.clone()].to_vec();
                let mut sub_b = lb[l.clone()].to_vec();
                la[l.clone()].copy_from_slice(ra);
                lb[l].copy_from_slice(rb);
                combine_into(ra, rb, &mut sub_a, &mut sub_b);
                ra.copy_from_slice(&sub_a);
                rb.copy_from_slice(&sub_b);
            });
        d /= 2;
    }

    // Inclusive state: h_t = a_t ⊙ (P.a ⊙ h_init + P.b) + u_t with P the
    // exclusive prefix of t.
    let zero = vec![T::zero(); state];
    let h0 = h_init.unwrap_or(&zero);
    let mut h = vec![T::zero(); len * state];
    h.par_chunks_mut(state)
        .enumerate()
        .with_min_len(64)
        .for_each(|(t, row)| {
            for j in 0..state {
                let k = t * state + j;
                let before = ta[k] * h0[j] + tb[k];
                row[j] = a_bar[k] * before + u[k];
            }
        });
    Ok(h)
}
