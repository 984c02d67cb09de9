"""Instrumented reference implementations of the leaky maths routines.

Every scalar routine returns its float32 result together with the branch path
it took and an instruction count. Counts are the number of primitive
operations on the straight-line path plus a fixed per-routine prologue; the
prologue of ``expf`` is pinned so that the overflow early return costs 17
instructions (the underflow return then costs 18 because it performs one more
comparison). The two ``std::max`` variants are counted directly from their
compiled listings.

The ``*_batch`` functions are vectorised twins used by the victim engine and
the exhaustive tests; they must agree bit-for-bit with the scalar versions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .floats import f32, from_bits, to_bits

# fdlibm float expf constants, bit patterns as in the C source
ONE = f32(1.0)
TWO = f32(2.0)
HALF = (f32(0.5), f32(-0.5))
HUGE = f32(1.0e30)
TWOM100 = from_bits(0x0D800000)
O_THRESHOLD = from_bits(0x42B17180)
U_THRESHOLD = from_bits(0xC2CFF1B5)
LN2HI = (from_bits(0x3F317180), from_bits(0xBF317180))
LN2LO = (from_bits(0x3717F7D1), from_bits(0xB717F7D1))
INVLN2 = from_bits(0x3FB8AA3B)
P1 = from_bits(0x3E2AAAAB)
P2 = from_bits(0xBB360B61)
P3 = from_bits(0x388AB355)
P4 = from_bits(0xB5DDEA0E)
P5 = from_bits(0x3331BB4C)

HX_FILTER = 0x42B17218  # |x| >= 88.7228...
HX_HALF_LN2 = 0x3EB17218  # 0.5*ln2
HX_1P5_LN2 = 0x3F851592  # 1.5*ln2
HX_TINY = 0x31800000  # 2**-28

EXPF_PROLOGUE = 7

CUTOFF_UPPER = f32(16.619047164916992188)
CUTOFF_LOWER = f32(-9.0)

# std::max listings: -Os (CMOVA) and -O0 (JBE)
MAX_OS_COUNT = 5
MAX_O0_TAKEN = 13  # x <= 0 or unordered: returns the first argument
MAX_O0_FALLTHROUGH = 14


@dataclass
class RefResult:
    y: np.float32
    path: tuple
    instr_count: int
    case: str
    # nested leaky calls made by this routine: (routine name, argument)
    calls: list = field(default_factory=list)
    # framework instructions before the first / between / after nested calls
    segments: tuple = ()


def _word(x) -> int:
    return to_bits(x)


def _set_word(w: int) -> np.float32:
    return from_bits(w & 0xFFFFFFFF)


def expf(x) -> RefResult:
    """fdlibm single-precision exp, instrumented."""
    x = f32(x)
    ops = 0
    path = []
    hx = _word(x)
    xsb = (hx >> 31) & 1
    hx &= 0x7FFFFFFF
    ops += 4  # load word, shift, and, mask

    with np.errstate(all="ignore"):
        filt = hx >= HX_FILTER
        path.append(("filter", filt))
        ops += 1
        if filt:
            ops += 1
            if hx > 0x7F800000:
                path.append(("nan", True))
                ops += 2
                return RefResult(x + x, tuple(path), EXPF_PROLOGUE + ops, "nan")
            path.append(("nan", False))
            ops += 1
            if hx == 0x7F800000:
                path.append(("inf", True))
                ops += 2  # branchless select on xsb, return
                if xsb == 0:
                    return RefResult(x, tuple(path), EXPF_PROLOGUE + ops, "inf_pos")
                return RefResult(f32(0.0), tuple(path), EXPF_PROLOGUE + ops, "inf_neg")
            path.append(("inf", False))
            ops += 1
            if x > O_THRESHOLD:
                path.append(("overflow", True))
                ops += 2
                return RefResult(HUGE * HUGE, tuple(path), EXPF_PROLOGUE + ops, "overflow")
            path.append(("overflow", False))
            ops += 1
            if x < U_THRESHOLD:
                path.append(("underflow", True))
                ops += 2
                return RefResult(TWOM100 * TWOM100, tuple(path), EXPF_PROLOGUE + ops, "underflow")
            path.append(("underflow", False))

        hi = f32(0.0)
        lo = f32(0.0)
        k = 0
        ops += 1
        reduce = hx > HX_HALF_LN2
        path.append(("reduce", reduce))
        if reduce:
            ops += 1
            near = hx < HX_1P5_LN2
            path.append(("near", near))
            if near:
                hi = x - LN2HI[xsb]
                lo = LN2LO[xsb]
                k = 1 - xsb - xsb
                ops += 5
            else:
                kf = INVLN2 * x + HALF[xsb]
                k = int(kf)  # C truncation toward zero
                t = f32(k)
                hi = x - t * LN2HI[0]
                lo = t * LN2LO[0]
                ops += 7
            x = hi - lo
            ops += 1
        else:
            ops += 1
            tiny = hx < HX_TINY
            path.append(("tiny", tiny))
            if tiny:
                ops += 1
                if HUGE + x > ONE:
                    path.append(("inexact", True))
                    ops += 4  # add, compare, add, return
                    return RefResult(ONE + x, tuple(path), EXPF_PROLOGUE + ops, "too_small")
                path.append(("inexact", False))
            else:
                k = 0
                ops += 1

        t = x * x
        c = x - t * (P1 + t * (P2 + t * (P3 + t * (P4 + t * P5))))
        ops += 11
        ops += 1
        if k == 0:
            path.append(("k0", True))
            ops += 6
            return RefResult(ONE - ((x * c) / (c - TWO) - x), tuple(path),
                             EXPF_PROLOGUE + ops, "inner2")
        path.append(("k0", False))
        y = ONE - ((lo - (x * c) / (TWO - c)) - hi)
        ops += 6
        ops += 1
        if k >= -125:
            path.append(("scale", False))
            hy = _word(y)
            y = _set_word(hy + (k << 23))
            ops += 5
            case = "inner1" if reduce and near else "normal"
            return RefResult(y, tuple(path), EXPF_PROLOGUE + ops, case)
        path.append(("scale", True))
        hy = _word(y)
        y = _set_word(hy + ((k + 100) << 23)) * TWOM100
        ops += 7
        case = "filtered" if filt else "scaled"
        return RefResult(y, tuple(path), EXPF_PROLOGUE + ops, case)


def logistic(x) -> RefResult:
    """Framework-level element body of the three-branch Logistic kernel.

    The count covers framework instructions only; the nested exp call is
    reported in ``calls`` and counted by :func:`expf` itself.
    """
    val = f32(x)
    with np.errstate(all="ignore"):
        # load val, compare upper
        if val > CUTOFF_UPPER:
            # result = 1.0, store, loop increment/compare/branch
            pre = 2 + 1 + 1 + 3
            return RefResult(f32(1.0), (("upper", True),), pre, "saturate_one",
                             calls=[], segments=(pre,))
        if val < CUTOFF_LOWER:
            pre = 3 + 2  # load, two compares, call setup + call
            post = 1 + 3  # store, loop
            y = expf(val).y
            return RefResult(y, (("upper", False), ("lower", True)), pre + post, "lower",
                             calls=[("expf", val)], segments=(pre, post))
        pre = 3 + 1 + 2  # load, two compares, negate, call
        post = 2 + 1 + 3  # add, divide, store, loop
        e = expf(-val).y
        y = ONE / (ONE + e)
        return RefResult(y, (("upper", False), ("lower", False)), pre + post, "standard",
                         calls=[("expf", -val)], segments=(pre, post))


def tanh(x) -> RefResult:
    """Two-call tanh: (e^x - e^-x) / (e^x + e^-x); NaN once e^|x| overflows."""
    x = f32(x)
    with np.errstate(all="ignore"):
        a = expf(x).y
        b = expf(-x).y
        y = (a - b) / (a + b)
    pre, mid, post = 3, 4, 7
    return RefResult(y, (), pre + mid + post, "tanh",
                     calls=[("expf", x), ("expf", -x)], segments=(pre, mid, post))


def max_branchless(x) -> RefResult:
    """std::max(0.0f, x) compiled at -Os: MOVSS, UCOMISS, MOV, CMOVA, RET."""
    x = f32(x)
    y = x if x > 0 else f32(0.0)
    return RefResult(f32(y), (), MAX_OS_COUNT, "max")


def max_branchy(x) -> RefResult:
    """std::max(0.0f, x) compiled at -O0; JBE is taken unless x > 0."""
    x = f32(x)
    if x > 0:
        return RefResult(x, (("jbe", False),), MAX_O0_FALLTHROUGH, "pass")
    return RefResult(f32(0.0), (("jbe", True),), MAX_O0_TAKEN, "clamp")


# ---------------------------------------------------------------------------
# vectorised twins

EXPF_CASES = ("nan", "inf_pos", "inf_neg", "overflow", "underflow", "filtered",
              "scaled", "normal", "inner1", "inner2", "too_small")
_CASE_CODE = {c: i for i, c in enumerate(EXPF_CASES)}


def expf_batch(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`expf`; returns (y, case code per :data:`EXPF_CASES`)."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    bits = x.view(np.uint32)
    xsb = (bits >> 31).astype(np.int64)
    hx = bits & np.uint32(0x7FFFFFFF)
    case = np.empty(x.shape, dtype=np.int8)
    y = np.empty_like(x)

    with np.errstate(all="ignore"):
        filt = hx >= HX_FILTER
        nan = hx > 0x7F800000
        inf = hx == 0x7F800000
        over = filt & ~nan & ~inf & (x > O_THRESHOLD)
        under = filt & ~nan & ~inf & ~over & (x < U_THRESHOLD)
        early = nan | inf | over | under

        reduce = ~early & (hx > HX_HALF_LN2)
        near = reduce & (hx < HX_1P5_LN2)
        far = reduce & ~near
        tiny = ~early & ~reduce & (hx < HX_TINY)

        ln2hi = np.where(xsb == 0, LN2HI[0], LN2HI[1]).astype(np.float32)
        ln2lo = np.where(xsb == 0, LN2LO[0], LN2LO[1]).astype(np.float32)
        halfs = np.where(xsb == 0, HALF[0], HALF[1]).astype(np.float32)

        kf = INVLN2 * x + halfs
        kf = np.where(far, kf, f32(0.0))
        kfar = np.trunc(kf).astype(np.int64)
        tfar = kfar.astype(np.float32)

        hi = np.where(near, x - ln2hi, np.where(far, x - tfar * LN2HI[0], f32(0.0)))
        lo = np.where(near, ln2lo, np.where(far, tfar * LN2LO[0], f32(0.0)))
        k = np.where(near, 1 - 2 * xsb, np.where(far, kfar, 0))
        xr = np.where(reduce, hi - lo, x)

        t = xr * xr
        c = xr - t * (P1 + t * (P2 + t * (P3 + t * (P4 + t * P5))))
        y_k0 = ONE - ((xr * c) / (c - TWO) - xr)
        y_k = ONE - ((lo - (xr * c) / (TWO - c)) - hi)
        hy = y_k.view(np.uint32).astype(np.int64)
        y_pos = ((hy + (k << 23)) & 0xFFFFFFFF).astype(np.uint32).view(np.float32)
        y_scl = ((hy + ((k + 100) << 23)) & 0xFFFFFFFF).astype(np.uint32).view(np.float32) * TWOM100

        scaled = reduce & (k < -125)

        y[:] = np.where(k == 0, y_k0, np.where(scaled, y_scl, y_pos))
        y[tiny] = (ONE + x)[tiny]
        y[nan] = (x + x)[nan]
        y[inf] = np.where(xsb == 0, x, f32(0.0))[inf]
        y[over] = HUGE * HUGE
        y[under] = TWOM100 * TWOM100

    case[:] = _CASE_CODE["inner2"]
    case[near] = _CASE_CODE["inner1"]
    case[far] = _CASE_CODE["normal"]
    case[scaled & ~filt] = _CASE_CODE["scaled"]
    case[scaled & filt] = _CASE_CODE["filtered"]
    case[tiny] = _CASE_CODE["too_small"]
    case[nan] = _CASE_CODE["nan"]
    case[inf & (xsb == 0)] = _CASE_CODE["inf_pos"]
    case[inf & (xsb == 1)] = _CASE_CODE["inf_neg"]
    case[over] = _CASE_CODE["overflow"]
    case[under] = _CASE_CODE["underflow"]
    return y, case


def logistic_batch(x: np.ndarray, exp_impl=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised :func:`logistic`.

    Returns (y, branch code 0=lower 1=standard 2=saturate_one, exp argument);
    the exp argument is NaN-free only where the branch calls exp.
    """
    exp_impl = exp_impl or (lambda a: expf_batch(a)[0])
    x = np.ascontiguousarray(x, dtype=np.float32)
    with np.errstate(all="ignore"):
        upper = x > CUTOFF_UPPER
        lower = ~upper & (x < CUTOFF_LOWER)
        arg = np.where(lower, x, -x).astype(np.float32)
        e = exp_impl(arg)
        y = np.where(upper, f32(1.0), np.where(lower, e, ONE / (ONE + e))).astype(np.float32)
    branch = np.where(upper, 2, np.where(lower, 0, 1)).astype(np.int8)
    return y, branch, arg


def relu_batch(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    with np.errstate(invalid="ignore"):
        return np.where(x > 0, x, f32(0.0)).astype(np.float32)
