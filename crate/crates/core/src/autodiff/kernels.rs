//! Numeric kernels behind the tape primitives.
//!
//! Layouts: a 0-cochain is `[n * d, f]` row-major, so node `v` is the
//! contiguous `d × f` slice at `v * d * f`. Restriction maps for one side of
//! every edge are `[E, de * dn]`, row `e` holding a row-major `de × dn` matrix.
//! Parallel kernels only ever write disjoint output slices and sum in a fixed
//! order, so results do not depend on the thread count.

use rayon::prelude::*;

/// Below this many output rows the per-edge and per-node kernels stay serial.
const PAR_MIN: usize = 256;

/// `C = A·B + beta·C` for row-major operands, with optional transposition of
/// the stored `A` and `B`. Logical shapes: `A` is `m × k`, `B` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, c: &mut [f64], beta: f64) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out += alpha · A B` with `A: m×k`, `B: k×n`.
#[inline]
pub(crate) fn mm_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize, alpha: f64) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = alpha * a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
}

/// `out += alpha · Aᵀ B` with `A: k×m` stored, `B: k×n`.
#[inline]
pub(crate) fn mm_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], k: usize, m: usize, n: usize, alpha: f64) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let s = alpha * a[p * m + i];
            if s == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
}

/// `out += alpha · A Bᵀ` with `A: m×k`, `B: n×k` stored.
#[inline]
pub(crate) fn mm_nt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize, alpha: f64) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * n + j] += alpha * dot;
        }
    }
}

/// Oriented edge list plus a node → incidence index, shared by all sheaf kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeTopology {
    n_nodes: usize,
    tails: Vec<usize>,
    heads: Vec<usize>,
    offsets: Vec<usize>,
    /// `(edge, is_head)`, grouped by node, edges ascending within a node.
    incidences: Vec<(usize, bool)>,
}

impl EdgeTopology {
    /// Panics if an endpoint is out of range; callers validate graphs first.
    pub fn new(n_nodes: usize, edges: &[(usize, usize)]) -> Self {
        let mut counts = vec![0usize; n_nodes + 1];
        for &(t, h) in edges {
            assert!(t < n_nodes && h < n_nodes, "edge ({t}, {h}) outside {n_nodes} nodes");
            counts[t + 1] += 1;
            counts[h + 1] += 1;
        }
        for i in 0..n_nodes {
            counts[i + 1] += counts[i];
        }
        let offsets = counts.clone();
        let mut fill = counts;
        let mut incidences = vec![(0, false); 2 * edges.len()];
        for (e, &(t, h)) in edges.iter().enumerate() {
            incidences[fill[t]] = (e, false);
            fill[t] += 1;
            incidences[fill[h]] = (e, true);
            fill[h] += 1;
        }
        Self {
            n_nodes,
            tails: edges.iter().map(|e| e.0).collect(),
            heads: edges.iter().map(|e| e.1).collect(),
            offsets,
            incidences,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.tails.len()
    }

    pub fn tails(&self) -> &[usize] {
        &self.tails
    }

    pub fn heads(&self) -> &[usize] {
        &self.heads
    }

    fn incident(&self, v: usize) -> &[(usize, bool)] {
        &self.incidences[self.offsets[v]..self.offsets[v + 1]]
    }
}

fn for_each_chunk<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    if out.len() / chunk >= PAR_MIN {
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Per-edge disagreement `r_e = H_e x_head − T_e x_tail`.
pub(crate) fn coboundary(topo: &EdgeTopology, tail_maps: &[f64], head_maps: &[f64], x: &[f64], de: usize, dn: usize, f: usize) -> Vec<f64> {
    let mut out = vec![0.0; topo.n_edges() * de * f];
    for_each_chunk(&mut out, de * f, |e, r| {
        let (t, h) = (topo.tails[e], topo.heads[e]);
        let hm = &head_maps[e * de * dn..(e + 1) * de * dn];
        let tm = &tail_maps[e * de * dn..(e + 1) * de * dn];
        mm_acc(r, hm, &x[h * dn * f..(h + 1) * dn * f], de, dn, f, 1.0);
        mm_acc(r, tm, &x[t * dn * f..(t + 1) * dn * f], de, dn, f, -1.0);
    });
    out
}

/// Adjoint of [`coboundary`]: `y_v = Σ_{e ∋ v} ±F_{v⊴e}ᵀ r_e`, `+` at heads.
pub(crate) fn coboundary_transpose(topo: &EdgeTopology, tail_maps: &[f64], head_maps: &[f64], r: &[f64], de: usize, dn: usize, f: usize) -> Vec<f64> {
    let mut out = vec![0.0; topo.n_nodes * dn * f];
    for_each_chunk(&mut out, dn * f, |v, y| {
        for &(e, is_head) in topo.incident(v) {
            let (maps, sign) = if is_head { (head_maps, 1.0) } else { (tail_maps, -1.0) };
            mm_tn_acc(y, &maps[e * de * dn..(e + 1) * de * dn], &r[e * de * f..(e + 1) * de * f], de, dn, f, sign);
        }
    });
    out
}

/// Gradients of `Σ_e <g_e, ±F_e a_e>`-style bilinear forms with respect to
/// the maps: `grad H_e = g_e x_headᵀ`, `grad T_e = −g_e x_tailᵀ`, where `g`
/// lives on edges (`de × f`) and `x` on nodes (`dn × f`).
pub(crate) fn edge_outer(topo: &EdgeTopology, g: &[f64], x: &[f64], de: usize, dn: usize, f: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gt = vec![0.0; topo.n_edges() * de * dn];
    let mut gh = vec![0.0; topo.n_edges() * de * dn];
    for_each_chunk(&mut gh, de * dn, |e, out| {
        let h = topo.heads[e];
        mm_nt_acc(out, &g[e * de * f..(e + 1) * de * f], &x[h * dn * f..(h + 1) * dn * f], de, f, dn, 1.0);
    });
    for_each_chunk(&mut gt, de * dn, |e, out| {
        let t = topo.tails[e];
        mm_nt_acc(out, &g[e * de * f..(e + 1) * de * f], &x[t * dn * f..(t + 1) * dn * f], de, f, dn, -1.0);
    });
    (gt, gh)
}

/// Degree blocks `D_v = Σ_{e ∋ v} F_{v⊴e}ᵀ F_{v⊴e}` (`dn × dn` per node).
pub(crate) fn degree_blocks(topo: &EdgeTopology, tail_maps: &[f64], head_maps: &[f64], de: usize, dn: usize) -> Vec<f64> {
    let mut out = vec![0.0; topo.n_nodes * dn * dn];
    for_each_chunk(&mut out, dn * dn, |v, block| {
        for &(e, is_head) in topo.incident(v) {
            let maps = if is_head { head_maps } else { tail_maps };
            let m = &maps[e * de * dn..(e + 1) * de * dn];
            mm_tn_acc(block, m, m, de, dn, dn, 1.0);
        }
    });
    out
}

/// Backward of [`degree_blocks`]: `grad F_{v⊴e} = F_{v⊴e} (G_v + G_vᵀ)`.
pub(crate) fn degree_blocks_backward(topo: &EdgeTopology, tail_maps: &[f64], head_maps: &[f64], g: &[f64], de: usize, dn: usize) -> (Vec<f64>, Vec<f64>) {
    let sym: Vec<f64> = (0..topo.n_nodes)
        .flat_map(|v| {
            let b = &g[v * dn * dn..(v + 1) * dn * dn];
            (0..dn * dn).map(move |idx| {
                let (i, j) = (idx / dn, idx % dn);
                b[i * dn + j] + b[j * dn + i]
            })
        })
        .collect();
    let mut gt = vec![0.0; topo.n_edges() * de * dn];
    let mut gh = vec![0.0; topo.n_edges() * de * dn];
    for_each_chunk(&mut gt, de * dn, |e, out| {
        let t = topo.tails[e];
        mm_acc(out, &tail_maps[e * de * dn..(e + 1) * de * dn], &sym[t * dn * dn..(t + 1) * dn * dn], de, dn, dn, 1.0);
    });
    for_each_chunk(&mut gh, de * dn, |e, out| {
        let h = topo.heads[e];
        mm_acc(out, &head_maps[e * de * dn..(e + 1) * de * dn], &sym[h * dn * dn..(h + 1) * dn * dn], de, dn, dn, 1.0);
    });
    (gt, gh)
}

/// `y_v = S_v x_v` for per-node `d × d` blocks `S`.
pub(crate) fn block_diag_apply(blocks: &[f64], x: &[f64], n: usize, d: usize, f: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d * f];
    for_each_chunk(&mut out, d * f, |v, y| {
        mm_acc(y, &blocks[v * d * d..(v + 1) * d * d], &x[v * d * f..(v + 1) * d * f], d, d, f, 1.0);
    });
    out
}

/// `y_v = S_vᵀ x_v`.
pub(crate) fn block_diag_apply_transposed(blocks: &[f64], x: &[f64], n: usize, d: usize, f: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d * f];
    for_each_chunk(&mut out, d * f, |v, y| {
        mm_tn_acc(y, &blocks[v * d * d..(v + 1) * d * d], &x[v * d * f..(v + 1) * d * f], d, d, f, 1.0);
    });
    out
}

/// `G_v = g_v x_vᵀ` per node.
pub(crate) fn block_outer(g: &[f64], x: &[f64], n: usize, d: usize, f: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d * d];
    for_each_chunk(&mut out, d * d, |v, o| {
        mm_nt_acc(o, &g[v * d * f..(v + 1) * d * f], &x[v * d * f..(v + 1) * d * f], d, f, d, 1.0);
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // A = [[1,2,3],[4,5,6]] (2x3), B = [[1,0],[0,1],[1,1]] (3x2)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // Aᵀ stored as 3x2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c2 = [1.0; 4];
        gemm(2, 3, 2, &at, true, &bt, true, &mut c2, 0.0);
        assert_eq!(c2, c);
        let mut c3 = [1.0; 4];
        gemm(2, 0, 2, &[], false, &[], false, &mut c3, 0.5);
        assert_eq!(c3, [0.5; 4]);
    }

    #[test]
    fn small_products_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, -1.0, 2.0, 0.5, 0.0, 3.0]; // 3x2
        let mut want = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut want, 0.0);
        let mut got = [0.0; 4];
        mm_acc(&mut got, &a, &b, 2, 3, 2, 1.0);
        assert_eq!(got, want);
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut got_tn = [0.0; 4];
        mm_tn_acc(&mut got_tn, &at, &b, 3, 2, 2, 1.0);
        assert_eq!(got_tn, want);
        let bt = [1.0, 2.0, 0.0, -1.0, 0.5, 3.0];
        let mut got_nt = [0.0; 4];
        mm_nt_acc(&mut got_nt, &a, &bt, 2, 3, 2, 1.0);
        assert_eq!(got_nt, want);
    }

    #[test]
    fn incidence_index() {
        let topo = EdgeTopology::new(3, &[(0, 1), (0, 2), (2, 1)]);
        assert_eq!(topo.incident(0), &[(0, false), (1, false)]);
        assert_eq!(topo.incident(1), &[(0, true), (2, true)]);
        assert_eq!(topo.incident(2), &[(1, true), (2, false)]);
    }
}
