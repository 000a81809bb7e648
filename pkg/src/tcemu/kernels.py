"""Integer kernels for the grouped, truncating tile accumulation.

Two interchangeable backends evaluate the same arithmetic:

* ``numba``  -- per-cell scalar loops compiled with ``@njit`` (default).
* ``numpy``  -- vectorised over all cells of a K-step, no compilation.

Set ``TCEMU_DISABLE_NUMBA=1`` (or call :func:`set_backend`) to force the
numpy path.  Both backends must agree bit for bit; the test-suite checks it.

All magnitudes fit in int64: in units of ``2**(e_max - W)`` a product is
below ``2**(W+2)`` and an FP32 operand below ``2**(W+1)``, so a 17-term sum
stays under ``2**(W+7)``.  Profiles are limited to ``W <= 40``.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None

ACC_SLOT = 0
PREV_SLOT = 17
MAX_WIDTH = 40
_NO_KEY = -(1 << 40)

_backend = "numba" if numba is not None and not os.environ.get("TCEMU_DISABLE_NUMBA") else "numpy"


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and numba is None:
        raise RuntimeError("numba is not installed")
    _backend = name


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if numba is not None:
    njit = numba.njit(cache=True, nogil=True)
else:  # pragma: no cover
    def njit(f):
        return f


@njit
def _bit_length(x):
    n = 0
    if x >= 1 << 32:
        x >>= 32
        n += 32
    if x >= 1 << 16:
        x >>= 16
        n += 16
    if x >= 1 << 8:
        x >>= 8
        n += 8
    while x:
        x >>= 1
        n += 1
    return n


@njit
def _encode_fp32_tz(total, u):
    """FP32 pattern of total * 2**u, truncated toward zero, overflow -> inf."""
    if total == 0:
        return 0
    sign = 0
    if total < 0:
        sign = 1
        total = -total
    n = _bit_length(total)
    top = u + n - 1
    if top > 127:
        return (sign << 31) | 0x7F800000
    if top >= -126:
        if n > 24:
            m = total >> (n - 24)
        else:
            m = total << (24 - n)
        return (sign << 31) | ((top + 127) << 23) | (m & 0x7FFFFF)
    s = u + 149
    if s >= 0:
        m = total << s
    elif s > -63:
        m = total >> (-s)
    else:
        m = 0
    return (sign << 31) | m


@njit
def _group_sum(slots, n_slots, acc_bits, prev_bits, p_neg, p_sig, p_lsb, p_key,
               width, floor, has_floor):
    emax = _NO_KEY
    found = False
    pinf = False
    ninf = False
    nan = False
    for t in range(n_slots):
        s = slots[t]
        if s == ACC_SLOT or s == PREV_SLOT:
            bits = acc_bits if s == ACC_SLOT else prev_bits
            field = (bits >> 23) & 0xFF
            frac = bits & 0x7FFFFF
            if field == 255:
                if frac != 0:
                    nan = True
                elif bits >> 31:
                    ninf = True
                else:
                    pinf = True
                continue
            if field == 0:
                if frac == 0:
                    continue
                key = -126
            else:
                key = field - 127
        else:
            if p_sig[s - 1] == 0:
                continue
            key = p_key[s - 1]
        if key > emax:
            emax = key
        found = True
    if nan or (pinf and ninf):
        return 0x7FC00000
    if pinf:
        return 0x7F800000
    if ninf:
        return 0xFF800000
    if not found:
        return 0
    if has_floor and floor > emax:
        emax = floor
    u = emax - width
    total = 0
    for t in range(n_slots):
        s = slots[t]
        if s == ACC_SLOT or s == PREV_SLOT:
            bits = acc_bits if s == ACC_SLOT else prev_bits
            field = (bits >> 23) & 0xFF
            frac = bits & 0x7FFFFF
            if field == 0:
                sig = frac
                lsb = -149
            else:
                sig = frac | 0x800000
                lsb = field - 150
            neg = (bits >> 31) != 0
        else:
            sig = p_sig[s - 1]
            lsb = p_lsb[s - 1]
            neg = p_neg[s - 1]
        if sig == 0:
            continue
        shift = lsb - u
        if shift >= 0:
            mag = sig << shift
        elif shift > -63:
            mag = sig >> (-shift)
        else:
            mag = 0
        if neg:
            total -= mag
        else:
            total += mag
    return _encode_fp32_tz(total, u)


@njit
def _fold(a_bits, bt_bits, c_bits, out, t0, t1, r0, r1,
          neg_tab, sig_tab, exp_tab, slots, group_sizes,
          frac2, width, floor, has_floor, normalize, renormalize):
    n_groups = group_sizes.shape[0]
    K = a_bits.shape[2]
    N = bt_bits.shape[1]
    p_neg = np.zeros(16, dtype=np.bool_)
    p_sig = np.zeros(16, dtype=np.int64)
    p_lsb = np.zeros(16, dtype=np.int64)
    p_key = np.zeros(16, dtype=np.int64)
    two = np.int64(1) << (frac2 + 1)
    one = np.int64(1) << frac2
    for t in range(t0, t1):
        for i in range(r0, r1):
            for j in range(N):
                acc = np.int64(c_bits[t, i, j])
                for k0 in range(0, K, 16):
                    for k in range(16):
                        ab = a_bits[t, i, k0 + k]
                        bb = bt_bits[t, j, k0 + k]
                        sig = sig_tab[ab] * sig_tab[bb]
                        key = exp_tab[ab] + exp_tab[bb]
                        lsb = key - frac2
                        if sig != 0:
                            if normalize and sig >= two:
                                key += 1
                            if renormalize and sig < one:
                                key = lsb + _bit_length(sig) - 1
                        p_neg[k] = neg_tab[ab] != neg_tab[bb]
                        p_sig[k] = sig
                        p_lsb[k] = lsb
                        p_key[k] = key
                    prev = np.int64(0)
                    for g in range(n_groups):
                        prev = _group_sum(slots[g], group_sizes[g], acc, prev,
                                          p_neg, p_sig, p_lsb, p_key,
                                          width, floor, has_floor)
                    acc = prev
                out[t, i, j] = acc


# --------------------------------------------------------------------------
# numpy path
# --------------------------------------------------------------------------

def _np_bit_length(x: np.ndarray) -> np.ndarray:
    # frexp is exact for integers below 2**53
    return np.frexp(x.astype(np.float64))[1].astype(np.int64)


def _np_encode_fp32_tz(total: np.ndarray, u: np.ndarray) -> np.ndarray:
    sign = (total < 0).astype(np.int64)
    mag = np.abs(total)
    n = _np_bit_length(mag)
    top = u + n - 1
    normal_m = np.where(n > 24, mag >> np.clip(n - 24, 0, 62), mag << np.clip(24 - n, 0, 62))
    normal = (sign << 31) | ((top + 127) << 23) | (normal_m & 0x7FFFFF)
    s = u + 149
    sub_m = np.where(s >= 0, mag << np.clip(s, 0, 62),
                     np.where(s > -63, mag >> np.clip(-s, 0, 62), 0))
    sub = (sign << 31) | sub_m
    res = np.where(top >= -126, normal, sub)
    res = np.where(top > 127, (sign << 31) | 0x7F800000, res)
    return np.where(mag == 0, 0, res)


def _np_fp32_terms(bits: np.ndarray):
    field = (bits >> 23) & 0xFF
    frac = bits & 0x7FFFFF
    special = field == 255
    sig = np.where(field == 0, frac, frac | 0x800000)
    sig = np.where(special, 0, sig)
    key = np.where(field == 0, -126, field - 127)
    lsb = np.where(field == 0, -149, field - 150)
    neg = (bits >> 31) != 0
    nan = special & (frac != 0)
    inf = special & (frac == 0)
    return neg, sig, lsb, key, nan, inf & ~neg, inf & neg


def _np_group(group, acc, prev, prod, width, floor, has_floor):
    p_neg, p_sig, p_lsb, p_key = prod
    negs, sigs, lsbs, keys = [], [], [], []
    nan = np.zeros(acc.shape, dtype=bool)
    pinf = np.zeros(acc.shape, dtype=bool)
    ninf = np.zeros(acc.shape, dtype=bool)
    for s in group:
        if s in (ACC_SLOT, PREV_SLOT):
            neg, sig, lsb, key, n_, pi, ni = _np_fp32_terms(acc if s == ACC_SLOT else prev)
            nan |= n_
            pinf |= pi
            ninf |= ni
        else:
            neg, sig, lsb, key = (x[..., s - 1] for x in prod)
        negs.append(neg)
        sigs.append(sig)
        lsbs.append(lsb)
        keys.append(key)
    neg = np.stack(negs, axis=-1)
    sig = np.stack(sigs, axis=-1)
    lsb = np.stack(lsbs, axis=-1)
    key = np.stack(keys, axis=-1)
    live = sig != 0
    emax = np.where(live, key, _NO_KEY).max(axis=-1)
    if has_floor:
        emax = np.maximum(emax, floor)
    u = emax - width
    shift = lsb - u[..., None]
    mag = np.where(shift >= 0, sig << np.clip(shift, 0, 62),
                   np.where(shift > -63, sig >> np.clip(-shift, 0, 62), 0))
    total = np.where(neg, -mag, mag).sum(axis=-1)
    res = np.where(live.any(axis=-1), _np_encode_fp32_tz(total, u), 0)
    res = np.where(ninf, 0xFF800000, res)
    res = np.where(pinf, 0x7F800000, res)
    return np.where(nan | (pinf & ninf), 0x7FC00000, res)


def _fold_numpy(a_bits, bt_bits, c_bits, out, t0, t1, r0, r1,
                neg_tab, sig_tab, exp_tab, groups, frac2, width, floor, has_floor,
                normalize, renormalize):
    a = a_bits[t0:t1, r0:r1]
    bt = bt_bits[t0:t1]
    acc = c_bits[t0:t1, r0:r1].astype(np.int64)
    K = a.shape[2]
    for k0 in range(0, K, 16):
        ak = a[..., k0:k0 + 16]
        bk = bt[..., k0:k0 + 16]
        a_sig = sig_tab[ak][:, :, None, :]
        b_sig = sig_tab[bk][:, None, :, :]
        sig = a_sig * b_sig
        key = exp_tab[ak][:, :, None, :] + exp_tab[bk][:, None, :, :]
        neg = neg_tab[ak][:, :, None, :] != neg_tab[bk][:, None, :, :]
        lsb = key - frac2
        if normalize:
            key = key + (sig >= (1 << (frac2 + 1)))
        if renormalize:
            small = (sig != 0) & (sig < (1 << frac2))
            key = np.where(small, lsb + _np_bit_length(sig) - 1, key)
        prod = (neg, sig, lsb, key)
        prev = np.zeros(acc.shape, dtype=np.int64)
        for group in groups:
            prev = _np_group(group, acc, prev, prod, width, floor, has_floor)
        acc = prev
    out[t0:t1, r0:r1] = acc


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

def fold(a_bits: np.ndarray, bt_bits: np.ndarray, c_bits: np.ndarray, out: np.ndarray,
         t_range: tuple[int, int], r_range: tuple[int, int], tables, groups,
         frac2: int, width: int, floor: int | None, normalize: bool, renormalize: bool,
         backend: str | None = None) -> None:
    """Evaluate ``out[t, i, j]`` for the given tile and row ranges.

    ``a_bits`` is (T, M, K), ``bt_bits`` is the transposed right operand
    (T, N, K), ``c_bits``/``out`` are (T, M, N) FP32 patterns; K is a multiple
    of 16 and each 16-wide step folds into the running accumulator.
    ``groups`` is a list of slot-code lists (0 = ACC, 1..16 = products,
    17 = PREV).
    """
    backend = backend or _backend
    neg_tab, sig_tab, exp_tab = tables
    has_floor = floor is not None
    floor_v = int(floor) if has_floor else 0
    (t0, t1), (r0, r1) = t_range, r_range
    if backend == "numpy":
        _fold_numpy(a_bits, bt_bits, c_bits, out, t0, t1, r0, r1, neg_tab, sig_tab, exp_tab,
                    groups, frac2, width, floor_v, has_floor, normalize, renormalize)
        return
    slots = np.full((len(groups), 18), -1, dtype=np.int64)
    sizes = np.zeros(len(groups), dtype=np.int64)
    for g, group in enumerate(groups):
        slots[g, :len(group)] = group
        sizes[g] = len(group)
    _fold(a_bits, bt_bits, c_bits, out, t0, t1, r0, r1, neg_tab, sig_tab, exp_tab,
          slots, sizes, frac2, width, floor_v, has_floor, bool(normalize), bool(renormalize))
