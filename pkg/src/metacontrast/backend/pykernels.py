"""Pure numpy implementations of the numeric kernels.

This is the fallback backend; ``metacontrast.backend._ckernels`` is the
compiled twin with the exact same function surface. All functions take
C-contiguous float64 arrays (int64 for index arguments), perform no shape
validation (the graph layer validates), and return freshly allocated
arrays.
"""

import numpy as np

NAME = "python"


def matmul(a, b):
    return a @ b


def transpose(a):
    return np.ascontiguousarray(a.T)


# elementwise, identical shapes (any rank)

def ew_add(a, b):
    return a + b


def ew_sub(a, b):
    return a - b


def ew_mul(a, b):
    return a * b


def ew_div(a, b):
    return a / b


# scalar second operand (s is a python float)

def adds(a, s):
    return a + s


def subs(a, s):
    return a - s


def ssub(s, a):
    return s - a


def muls(a, s):
    return a * s


def divs(a, s):
    return a / s


def sdiv(s, a):
    return s / a


# a is [n, d]; v is [d] (row broadcast over the leading batch axis)

def add_row(a, v):
    return a + v


def sub_row(a, v):
    return a - v


def mul_row(a, v):
    return a * v


def div_row(a, v):
    return a / v


# a is [n, d]; c is [n, 1] (per-row scale/shift)

def add_col(a, c):
    return a + c


def sub_col(a, c):
    return a - c


def mul_col(a, c):
    return a * c


def div_col(a, c):
    return a / c


# unary

def neg(a):
    return -a


def exp(a):
    return np.exp(a)


def log(a):
    return np.log(a)


def tanh(a):
    return np.tanh(a)


def relu(a):
    return np.maximum(a, 0.0)


def relu_mask(a):
    return (a > 0.0).astype(np.float64)


def sqrt(a):
    return np.sqrt(a)


def sq_diff(a, b):
    d = a - b
    return d * d


# reductions over 2-D inputs

def sum0(a):
    return a.sum(axis=0)


def sum1(a):
    return a.sum(axis=1)


def sum_all(a):
    return float(a.sum())


def tile_rows(v, n):
    return np.tile(v, (n, 1))


def tile_cols(c, d):
    return np.tile(c.reshape(-1, 1), (1, d))


def gather_rows(table, idx):
    return table[idx].copy()


def scatter_add_rows(g, idx, num_rows):
    out = np.zeros((num_rows, g.shape[1]), dtype=np.float64)
    np.add.at(out, idx, g)
    return out


def log_softmax_t(a, tau):
    logits = a / tau
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse


def softmax_t(a, tau):
    logits = a / tau
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)
