//! int8 x int8 -> int32 matrix multiplication.
//!
//! Every product of two int8 values fits in 15 bits, so a reduction over `K`
//! terms cannot overflow int32 while `K * 127 * 127 <= i32::MAX`.

use crate::error::{Error, Result};

/// Largest reduction length whose worst-case sum fits in int32.
pub const MAX_REDUCTION: usize = (i32::MAX as usize) / (127 * 127);

const TILE: usize = 4;
const COL_BLOCK: usize = 64;

/// `C = A * B` with `A` of shape `m x k` and `B` of shape `k x n`, all
/// row-major.
pub fn gemm_i8(a: &[i8], b: &[i8], m: usize, k: usize, n: usize) -> Result<Vec<i32>> {
    if a.len() != m * k {
        return Err(Error::shape("gemm_i8 lhs", &[m, k], &[a.len()]));
    }
    if b.len() != k * n {
        return Err(Error::shape("gemm_i8 rhs", &[k, n], &[b.len()]));
    }
    if k > MAX_REDUCTION {
        return Err(Error::Usage(format!(
            "gemm_i8 reduction length {k} exceeds the int32-safe bound {MAX_REDUCTION}"
        )));
    }
    let mut c = vec![0i32; m * n];
    gemm_nn_into(a, b, m, n, k, &mut c);
    Ok(c)
}

/// Row-major transpose of a `rows x cols` matrix.
pub fn transpose<T: Copy + Default>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    debug_assert_eq!(x.len(), rows * cols);
    let mut out = vec![T::default(); x.len()];
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    out[c * rows + r] = x[r * cols + c];
                }
            }
        }
    }
    out
}

/// `C = A * Bᵀ` where `A` is `m x k` and `bt` is `n x k`; both operands are
/// read along their contiguous `k` axis. The caller guarantees the int32 bound.
pub fn gemm_nt(a: &[i8], bt: &[i8], m: usize, n: usize, k: usize) -> Vec<i32> {
    let mut c = vec![0i32; m * n];
    gemm_nt_into(a, bt, m, n, k, &mut c);
    c
}

/// [`gemm_nt`] writing into `c`, which is overwritten.
pub fn gemm_nt_into(a: &[i8], bt: &[i8], m: usize, n: usize, k: usize, c: &mut [i32]) {
    assert_eq!(a.len(), m * k, "gemm_nt lhs");
    assert_eq!(bt.len(), n * k, "gemm_nt rhs");
    assert_eq!(c.len(), m * n, "gemm_nt output");
    if k == 0 {
        c.fill(0);
        return;
    }
    if m == 0 || n == 0 {
        return;
    }
    // Narrow outputs waste most of a column panel; compute the transpose.
    if n < 16 && m > n {
        let ct = gemm_nt(bt, a, n, m, k);
        for (j, row) in ct.chunks_exact(m).enumerate() {
            for (i, &v) in row.iter().enumerate() {
                c[i * n + j] = v;
            }
        }
        return;
    }
    #[cfg(target_arch = "x86_64")]
    {
        if vnni::available() {
            vnni::gemm_nt(a, bt, m, n, k, c);
            return;
        }
        if std::is_x86_feature_detected!("avx2") {
            c.fill(0);
            avx2::gemm_nt(a, bt, m, n, k, c);
            return;
        }
    }
    portable_gemm_nt(a, bt, m, n, k, c);
}

/// `C = A * B` with `A` of shape `m x k` and `b` of shape `k x n`, both
/// row-major, writing into `c`. The caller guarantees the int32 bound.
pub fn gemm_nn_into(a: &[i8], b: &[i8], m: usize, n: usize, k: usize, c: &mut [i32]) {
    assert_eq!(a.len(), m * k, "gemm_nn lhs");
    assert_eq!(b.len(), k * n, "gemm_nn rhs");
    assert_eq!(c.len(), m * n, "gemm_nn output");
    #[cfg(target_arch = "x86_64")]
    {
        if k > 0 && n >= 16 && m > 0 && vnni::available() {
            vnni::gemm_nn(a, b, m, n, k, c);
            return;
        }
    }
    gemm_nt_into(a, &transpose(b, k, n), m, n, k, c);
}

fn portable_gemm_nt(a: &[i8], bt: &[i8], m: usize, n: usize, k: usize, c: &mut [i32]) {
    for jb in (0..n).step_by(COL_BLOCK) {
        let je = (jb + COL_BLOCK).min(n);
        let mut i = 0;
        while i + TILE <= m {
            let rows = [
                &a[i * k..(i + 1) * k],
                &a[(i + 1) * k..(i + 2) * k],
                &a[(i + 2) * k..(i + 3) * k],
                &a[(i + 3) * k..(i + 4) * k],
            ];
            for j in jb..je {
                let b = &bt[j * k..(j + 1) * k];
                let mut s = [0i32; TILE];
                for t in 0..k {
                    let bv = b[t] as i32;
                    for (acc, row) in s.iter_mut().zip(rows.iter()) {
                        *acc += row[t] as i32 * bv;
                    }
                }
                for (q, v) in s.into_iter().enumerate() {
                    c[(i + q) * n + j] = v;
                }
            }
            i += TILE;
        }
        for i in i..m {
            let row = &a[i * k..(i + 1) * k];
            for j in jb..je {
                c[i * n + j] = dot(row, &bt[j * k..(j + 1) * k]);
            }
        }
    }
}

#[inline]
fn dot(a: &[i8], b: &[i8]) -> i32 {
    a.iter().zip(b).map(|(&x, &y)| x as i32 * y as i32).sum()
}

/// Packed-panel kernel built on `vpmaddwd`.
///
/// `A` is packed as one i32 per pair of consecutive `k` values (two i16
/// halves), so a broadcast feeds the pair to every lane. `Bᵀ` is packed in
/// panels of 16 columns; for each `k` pair a panel holds 16 interleaved
/// i16 pairs, two vectors of 8 columns. Each `vpmaddwd` then yields two
/// multiply-adds for 8 output columns, and the accumulators map directly
/// onto rows of `C`.
#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;

    const MR: usize = 4;
    const NR: usize = 16;
    /// `k` pairs per cache block.
    const KC: usize = 512;

    fn pack_a(a: &[i8], m: usize, k: usize, kp: usize) -> Vec<i32> {
        let mut out = vec![0i32; m.div_ceil(MR) * MR * kp];
        for (i, row) in a.chunks_exact(k).enumerate() {
            let dst = &mut out[i * kp..(i + 1) * kp];
            for (t, d) in dst.iter_mut().enumerate() {
                let lo = row[2 * t] as i16 as u16 as u32;
                let hi = row.get(2 * t + 1).map_or(0, |&v| v as i16 as u16 as u32);
                *d = (lo | (hi << 16)) as i32;
            }
        }
        out
    }

    /// Panel `p`, pair `t`: `out[(p * kp + t) * 32 + 2 * col + {0, 1}]`.
    fn pack_b(bt: &[i8], n: usize, k: usize, kp: usize) -> Vec<i16> {
        let panels = n.div_ceil(NR);
        let mut out = vec![0i16; panels * kp * 2 * NR];
        for (j, col) in bt.chunks_exact(k).enumerate() {
            let (p, q) = (j / NR, j % NR);
            let base = p * kp * 2 * NR + 2 * q;
            for t in 0..kp {
                let d = base + t * 2 * NR;
                out[d] = col[2 * t] as i16;
                if 2 * t + 1 < k {
                    out[d + 1] = col[2 * t + 1] as i16;
                }
            }
        }
        out
    }

    pub(super) fn gemm_nt(a: &[i8], bt: &[i8], m: usize, n: usize, k: usize, c: &mut [i32]) {
        let kp = k.div_ceil(2);
        let ap = pack_a(a, m, k, kp);
        let bp = pack_b(bt, n, k, kp);
        // SAFETY: callers check avx2; packed buffers are padded to whole
        // MR rows and NR panels.
        unsafe { packed(&ap, &bp, m, n, kp, c) }
    }

    #[target_feature(enable = "avx2")]
    unsafe fn packed(ap: &[i32], bp: &[i16], m: usize, n: usize, kp: usize, c: &mut [i32]) {
        let panels = n.div_ceil(NR);
        let mut k0 = 0;
        while k0 < kp {
            let kc = (kp - k0).min(KC);
            for p in 0..panels {
                let j = p * NR;
                let cols = (n - j).min(NR);
                let panel = bp.as_ptr().add((p * kp + k0) * 2 * NR);
                let mut i = 0;
                while i < m {
                    let rows = (m - i).min(MR);
                    let arow = ap.as_ptr().add(i * kp + k0);
                    let mut acc = [[_mm256_setzero_si256(); 2]; MR];
                    for t in 0..kc {
                        let b0 = _mm256_loadu_si256(panel.add(t * 2 * NR) as *const __m256i);
                        let b1 = _mm256_loadu_si256(panel.add(t * 2 * NR + NR) as *const __m256i);
                        for (r, acc_r) in acc.iter_mut().enumerate() {
                            let av = _mm256_set1_epi32(*arow.add(r * kp + t));
                            acc_r[0] = _mm256_add_epi32(acc_r[0], _mm256_madd_epi16(av, b0));
                            acc_r[1] = _mm256_add_epi32(acc_r[1], _mm256_madd_epi16(av, b1));
                        }
                    }
                    let mut tile = [0i32; NR];
                    for (r, acc_r) in acc.iter().enumerate().take(rows) {
                        _mm256_storeu_si256(tile.as_mut_ptr() as *mut __m256i, acc_r[0]);
                        _mm256_storeu_si256(tile.as_mut_ptr().add(8) as *mut __m256i, acc_r[1]);
                        let dst = &mut c[(i + r) * n + j..(i + r) * n + j + cols];
                        for (d, &v) in dst.iter_mut().zip(&tile) {
                            *d += v;
                        }
                    }
                    i += MR;
                }
            }
            k0 += kc;
        }
    }
}

/// AVX-512 VNNI kernel.
///
/// `vpdpbusd` multiplies unsigned by signed bytes, four at a time, so `A`
/// is offset by 128 into `u8` and the result is corrected with
/// `128 * colsum(B)`. The accumulators may wrap, but the exact product fits
/// int32 and wrapping arithmetic is exact modulo 2^32.
#[cfg(target_arch = "x86_64")]
mod vnni {
    use std::arch::x86_64::*;

    const MR: usize = 6;
    /// Columns per panel: two vectors of 16 lanes.
    const NR: usize = 32;
    /// `k` quads per cache block.
    const KC: usize = 256;

    pub(super) fn available() -> bool {
        std::is_x86_feature_detected!("avx512f")
            && std::is_x86_feature_detected!("avx512bw")
            && std::is_x86_feature_detected!("avx512vnni")
    }

    fn quad(src: &[i8], t: usize, flip: u8) -> u32 {
        let mut q = [0u8; 4];
        for (b, &v) in q.iter_mut().zip(src.iter().skip(4 * t)) {
            *b = v as u8 ^ flip;
        }
        u32::from_le_bytes(q)
    }

    /// Rows of `A` as `u8` quads, `a + 128`.
    fn pack_a(a: &[i8], k: usize, kq: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(a.len() / k * kq);
        for row in a.chunks_exact(k) {
            let full = k / 4;
            out.extend(row.chunks_exact(4).map(|c| {
                u32::from_le_bytes([c[0] as u8 ^ 0x80, c[1] as u8 ^ 0x80, c[2] as u8 ^ 0x80, c[3] as u8 ^ 0x80])
            }));
            if kq > full {
                out.push(quad(row, full, 0x80));
            }
        }
        out
    }

    /// Panel `p`, quad `t`: `out[(p * kq + t) * NR + col]`, plus the
    /// column sums of `B` scaled by 128.
    fn pack_b(bt: &[i8], n: usize, k: usize, kq: usize) -> (Vec<u32>, Vec<i32>) {
        let panels = n.div_ceil(NR);
        let full = k / 4;
        let mut out = Vec::with_capacity(panels * kq * NR);
        for p in 0..panels {
            let cols: Vec<&[i8]> = (p * NR..((p + 1) * NR).min(n)).map(|j| &bt[j * k..(j + 1) * k]).collect();
            for t in 0..kq {
                for col in &cols {
                    out.push(if t < full {
                        u32::from_le_bytes(col[4 * t..4 * t + 4].try_into().map(|b: [i8; 4]| b.map(|v| v as u8)).unwrap())
                    } else {
                        quad(col, t, 0)
                    });
                }
                out.extend(std::iter::repeat_n(0, NR - cols.len()));
            }
        }
        let mut bias: Vec<i32> = bt.chunks_exact(k).map(|col| 128 * col.iter().map(|&v| v as i32).sum::<i32>()).collect();
        bias.resize(panels * NR, 0);
        (out, bias)
    }

    /// Panels as in [`pack_b`], from a row-major `k x n` matrix: each quad
    /// interleaves four rows.
    fn pack_b_rows(b: &[i8], n: usize, k: usize, kq: usize) -> (Vec<u32>, Vec<i32>) {
        let panels = n.div_ceil(NR);
        let mut out = vec![0u32; panels * kq * NR];
        let mut quad_rows = [[0i8; NR]; 4];
        for p in 0..panels {
            let j = p * NR;
            let cols = (n - j).min(NR);
            for t in 0..kq {
                let dst = &mut out[(p * kq + t) * NR..][..NR];
                if cols == NR && 4 * t + 4 <= k {
                    let rows: [&[i8]; 4] = std::array::from_fn(|r| &b[(4 * t + r) * n + j..][..NR]);
                    // SAFETY: sse2 is part of the x86_64 baseline.
                    unsafe { interleave4(rows, dst) };
                    continue;
                }
                for (r, qr) in quad_rows.iter_mut().enumerate() {
                    qr.fill(0);
                    if 4 * t + r < k {
                        qr[..cols].copy_from_slice(&b[(4 * t + r) * n + j..][..cols]);
                    }
                }
                for (q, d) in dst.iter_mut().enumerate() {
                    *d = u32::from_le_bytes(std::array::from_fn(|r| quad_rows[r][q] as u8));
                }
            }
        }
        let mut bias = vec![0i32; panels * NR];
        for row in b.chunks_exact(n) {
            for (s, &v) in bias.iter_mut().zip(row) {
                *s += v as i32;
            }
        }
        for s in &mut bias {
            *s *= 128;
        }
        (out, bias)
    }

    /// Byte-interleaves four rows of `NR` values into `NR` quads.
    unsafe fn interleave4(rows: [&[i8]; 4], dst: &mut [u32]) {
        for h in 0..NR / 16 {
            let load = |r: usize| _mm_loadu_si128(rows[r].as_ptr().add(16 * h) as *const __m128i);
            let (r0, r1, r2, r3) = (load(0), load(1), load(2), load(3));
            let (lo01, hi01) = (_mm_unpacklo_epi8(r0, r1), _mm_unpackhi_epi8(r0, r1));
            let (lo23, hi23) = (_mm_unpacklo_epi8(r2, r3), _mm_unpackhi_epi8(r2, r3));
            let quads = [
                _mm_unpacklo_epi16(lo01, lo23),
                _mm_unpackhi_epi16(lo01, lo23),
                _mm_unpacklo_epi16(hi01, hi23),
                _mm_unpackhi_epi16(hi01, hi23),
            ];
            for (i, v) in quads.into_iter().enumerate() {
                _mm_storeu_si128(dst.as_mut_ptr().add(16 * h + 4 * i) as *mut __m128i, v);
            }
        }
    }

    pub(super) fn gemm_nn(a: &[i8], b: &[i8], m: usize, n: usize, k: usize, c: &mut [i32]) {
        let kq = k.div_ceil(4);
        let ap = pack_a(a, k, kq);
        let (bp, bias) = pack_b_rows(b, n, k, kq);
        // SAFETY: as in `gemm_nt`.
        unsafe { packed(&ap, &bp, &bias, m, n, kq, c) }
    }

    pub(super) fn gemm_nt(a: &[i8], bt: &[i8], m: usize, n: usize, k: usize, c: &mut [i32]) {
        let kq = k.div_ceil(4);
        let ap = pack_a(a, k, kq);
        let (bp, bias) = pack_b(bt, n, k, kq);
        // SAFETY: `available` was checked by the caller; packed buffers hold
        // `m` rows of `kq` quads and whole panels of `NR` columns.
        unsafe { packed(&ap, &bp, &bias, m, n, kq, c) }
    }

    #[target_feature(enable = "avx512f,avx512bw,avx512vnni")]
    unsafe fn packed(ap: &[u32], bp: &[u32], bias: &[i32], m: usize, n: usize, kq: usize, c: &mut [i32]) {
        let panels = n.div_ceil(NR);
        let mut k0 = 0;
        while k0 < kq {
            let kc = (kq - k0).min(KC);
            let first = k0 == 0;
            for p in 0..panels {
                let j = p * NR;
                let cols = (n - j).min(NR);
                let masks = [lane_mask(cols), lane_mask(cols.saturating_sub(16))];
                let panel = bp.as_ptr().add((p * kq + k0) * NR);
                let corr = if first {
                    [
                        _mm512_loadu_si512(bias.as_ptr().add(j) as *const _),
                        _mm512_loadu_si512(bias.as_ptr().add(j + 16) as *const _),
                    ]
                } else {
                    [_mm512_setzero_si512(); 2]
                };
                let t = Tile { panel, kq, kc, k0, n, j, masks, corr, first };
                let mut i = 0;
                while i + MR <= m {
                    t.run::<MR>(ap, i, c);
                    i += MR;
                }
                match m - i {
                    0 => {}
                    1 => t.run::<1>(ap, i, c),
                    2 => t.run::<2>(ap, i, c),
                    3 => t.run::<3>(ap, i, c),
                    4 => t.run::<4>(ap, i, c),
                    _ => t.run::<5>(ap, i, c),
                }
            }
            k0 += kc;
        }
    }

    fn lane_mask(cols: usize) -> __mmask16 {
        if cols >= 16 {
            0xffff
        } else {
            ((1u32 << cols) - 1) as __mmask16
        }
    }

    struct Tile {
        panel: *const u32,
        kq: usize,
        kc: usize,
        k0: usize,
        n: usize,
        j: usize,
        masks: [__mmask16; 2],
        corr: [__m512i; 2],
        first: bool,
    }

    impl Tile {
        #[target_feature(enable = "avx512f,avx512bw,avx512vnni")]
        #[inline]
        unsafe fn run<const R: usize>(&self, ap: &[u32], i: usize, c: &mut [i32]) {
            let mut acc = [[_mm512_setzero_si512(); 2]; R];
            let arow = ap.as_ptr().add(i * self.kq + self.k0);
            for t in 0..self.kc {
                let b0 = _mm512_loadu_si512(self.panel.add(t * NR) as *const _);
                let b1 = _mm512_loadu_si512(self.panel.add(t * NR + 16) as *const _);
                for (r, acc_r) in acc.iter_mut().enumerate() {
                    let av = _mm512_set1_epi32(*arow.add(r * self.kq + t) as i32);
                    acc_r[0] = _mm512_dpbusd_epi32(acc_r[0], av, b0);
                    acc_r[1] = _mm512_dpbusd_epi32(acc_r[1], av, b1);
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                let dst = c.as_mut_ptr().wrapping_add((i + r) * self.n + self.j);
                for (h, &acc_h) in acc_r.iter().enumerate() {
                    let ptr = dst.wrapping_add(16 * h);
                    let v = if self.first {
                        _mm512_sub_epi32(acc_h, self.corr[h])
                    } else {
                        _mm512_add_epi32(acc_h, _mm512_maskz_loadu_epi32(self.masks[h], ptr))
                    };
                    _mm512_mask_storeu_epi32(ptr, self.masks[h], v);
                }
            }
        }
    }
}
