//! Single-layer LSTM over a batch of sequences. Gates are packed `[i | f | g | o]`
//! along the last axis of `w` (D x 4H), `u` (H x 4H) and `b` (4H).

use super::Scalar;

pub(crate) struct LstmCache<T> {
    /// Activated gates, (N, T, 4H).
    pub gates: Vec<T>,
    /// Cell states, (N, T, H).
    pub cells: Vec<T>,
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn forward<T: Scalar>(
    x: &[T],
    w: &[T],
    u: &[T],
    b: &[T],
    n: usize,
    t_len: usize,
    d: usize,
    h: usize,
) -> (Vec<T>, LstmCache<T>) {
    let g4 = 4 * h;
    // Input projections for all steps at once; rows are (n, t).
    let mut zx = vec![T::zero(); n * t_len * g4];
    T::gemm(n * t_len, d, g4, x, false, w, false, T::zero(), &mut zx);

    let mut out = vec![T::zero(); n * t_len * h];
    let mut gates = vec![T::zero(); n * t_len * g4];
    let mut cells = vec![T::zero(); n * t_len * h];
    let mut h_prev = vec![T::zero(); n * h];
    let mut c_prev = vec![T::zero(); n * h];
    let mut z = vec![T::zero(); n * g4];
    for t in 0..t_len {
        T::gemm(n, h, g4, &h_prev, false, u, false, T::zero(), &mut z);
        for s in 0..n {
            let row = (s * t_len + t) * g4;
            let zs = &z[s * g4..(s + 1) * g4];
            let gs = &mut gates[row..row + g4];
            for j in 0..g4 {
                let pre = zs[j] + zx[row + j] + b[j];
                gs[j] = if (2 * h..3 * h).contains(&j) { pre.tanh() } else { sigmoid(pre) };
            }
            for j in 0..h {
                let (i, f, g, o) = (gs[j], gs[h + j], gs[2 * h + j], gs[3 * h + j]);
                let c = f * c_prev[s * h + j] + i * g;
                let hv = o * c.tanh();
                cells[(s * t_len + t) * h + j] = c;
                out[(s * t_len + t) * h + j] = hv;
                c_prev[s * h + j] = c;
                h_prev[s * h + j] = hv;
            }
        }
    }
    (out, LstmCache { gates, cells })
}

/// Returns `(dx, dw, du, db)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    x: &[T],
    w: &[T],
    u: &[T],
    out: &[T],
    cache: &LstmCache<T>,
    dy: &[T],
    n: usize,
    t_len: usize,
    d: usize,
    h: usize,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>, Vec<T>) {
    let g4 = 4 * h;
    let one = T::one();
    let mut dz_all = vec![T::zero(); n * t_len * g4];
    let mut du = vec![T::zero(); h * g4];
    let mut db = vec![T::zero(); g4];
    let mut dh_next = vec![T::zero(); n * h];
    let mut dc_next = vec![T::zero(); n * h];
    let mut dz = vec![T::zero(); n * g4];
    let mut h_prev = vec![T::zero(); n * h];
    for t in (0..t_len).rev() {
        for s in 0..n {
            let row = (s * t_len + t) * g4;
            let gs = &cache.gates[row..row + g4];
            for j in 0..h {
                let idx = (s * t_len + t) * h + j;
                let (i, f, g, o) = (gs[j], gs[h + j], gs[2 * h + j], gs[3 * h + j]);
                let c = cache.cells[idx];
                let c_prev = if t > 0 { cache.cells[idx - h] } else { T::zero() };
                let tc = c.tanh();
                let dh = dy[idx] + dh_next[s * h + j];
                let dc = dh * o * (one - tc * tc) + dc_next[s * h + j];
                let dzs = &mut dz[s * g4..(s + 1) * g4];
                dzs[j] = dc * g * i * (one - i);
                dzs[h + j] = dc * c_prev * f * (one - f);
                dzs[2 * h + j] = dc * i * (one - g * g);
                dzs[3 * h + j] = dh * tc * o * (one - o);
                dc_next[s * h + j] = dc * f;
            }
            dz_all[row..row + g4].copy_from_slice(&dz[s * g4..(s + 1) * g4]);
            for j in 0..h {
                h_prev[s * h + j] = if t > 0 { out[(s * t_len + t - 1) * h + j] } else { T::zero() };
            }
        }
        T::gemm(h, n, g4, &h_prev, true, &dz, false, one, &mut du);
        T::gemm(n, g4, h, &dz, false, u, true, T::zero(), &mut dh_next);
        for s in 0..n {
            for (acc, &v) in db.iter_mut().zip(&dz[s * g4..(s + 1) * g4]) {
                *acc = *acc + v;
            }
        }
    }
    let mut dw = vec![T::zero(); d * g4];
    T::gemm(d, n * t_len, g4, x, true, &dz_all, false, T::zero(), &mut dw);
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); n * t_len * d];
        T::gemm(n * t_len, g4, d, &dz_all, false, w, true, T::zero(), &mut dx);
        dx
    });
    (dx, dw, du, db)
}
