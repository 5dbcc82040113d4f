"""Sparse rolling geometric-product interaction and its dense test oracle.

Each offset s pairs channel c with channel (c+s) mod D via a cyclic roll of
the context stream. The symmetric stream is a SiLU-gated Hadamard product
against the rolled context; the anti-symmetric stream is the signed bivector
coefficient for that channel pair (u_c v_{c+s} - v_c u_{c+s}). Offsets wrap,
so entries with c+s >= D carry the reversed basis orientation; the sign is
absorbed by the downstream learnable projection rather than re-sorted here.

`dense_product_oracle` builds the full O(D^2) interaction matrices so tests
can pin every rolled output to a wrapped diagonal of the dense computation.
It is quadratic by construction and test-only.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError

CLI_MODES = ("inner", "wedge", "full")
CTX_MODES = ("diff", "abs")


@dataclass(frozen=True)
class ShiftSet:
    """Ordered channel offsets defining the sparse interaction topology."""

    offsets: tuple

    def __post_init__(self):
        offs = tuple(int(s) for s in self.offsets)
        object.__setattr__(self, "offsets", offs)
        if not offs:
            raise ConfigError("ShiftSet: at least one offset required")
        if any(s < 1 for s in offs):
            raise ConfigError(f"ShiftSet: offsets must be >= 1, got {offs}")
        if any(b <= a for a, b in zip(offs, offs[1:])):
            raise ConfigError(
                f"ShiftSet: offsets must be strictly increasing, got {offs}"
            )

    def __iter__(self):
        return iter(self.offsets)

    def __len__(self):
        return len(self.offsets)


def _check_pair(op, h, c):
    try:
        np.broadcast_shapes(h.shape, c.shape)
    except ValueError:
        raise DimensionError(
            f"{op}: shapes {h.shape} and {c.shape} are not compatible"
        ) from None
    if h.shape[-1] != c.shape[-1]:
        raise DimensionError(
            f"{op}: channel sizes differ: {h.shape[-1]} vs {c.shape[-1]}"
        )


def shifted_dot(h, c, s):
    """Gated coherence stream: SiLU(h * roll(c, s)) per channel."""
    _check_pair("shifted_dot", h, c)
    return T.silu(T.mul(h, T.roll_channels(c, s)))


def shifted_wedge(h, c, s):
    """Bivector coefficients for channel pairs (c, (c+s) mod D).

    Anti-symmetry and self-annihilation hold bitwise: swapping the arguments
    performs the identical float operations with the sign flipped.
    """
    _check_pair("shifted_wedge", h, c)
    return T.sub(T.mul(h, T.roll_channels(c, s)),
                 T.mul(c, T.roll_channels(h, s)))


def clifford_interact(h, c, shifts, mode):
    """Concatenate the per-shift streams in a fixed, checkpoint-frozen order.

    Outer loop over shifts in ShiftSet order; in `full` mode each shift
    contributes its wedge block then its dot block, giving 2|S|D channels
    (|S|D for the single-stream modes).
    """
    if mode not in CLI_MODES:
        raise ConfigError(f"cli_mode must be one of {CLI_MODES}, got {mode!r}")
    if not isinstance(shifts, ShiftSet):
        shifts = ShiftSet(tuple(shifts))
    parts = []
    for s in shifts:
        if mode in ("wedge", "full"):
            parts.append(shifted_wedge(h, c, s))
        if mode in ("inner", "full"):
            parts.append(shifted_dot(h, c, s))
    return T.concat_channels(parts)


def interact_width(dim, shifts, mode):
    """Channel count emitted by clifford_interact before projection."""
    k = 2 if mode == "full" else 1
    return k * len(shifts) * dim


def dense_product_oracle(u, v):
    """Full interaction matrices for one token pair; quadratic, test-only.

    Returns (dot_matrix, wedge_matrix) in float64 where
    dot_matrix[i, j] = u_i * v_j and wedge_matrix[i, j] = u_i v_j - v_i u_j.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise DimensionError(
            f"dense_product_oracle: need equal rank-1 inputs, "
            f"got {u.shape} and {v.shape}"
        )
    dot = np.outer(u, v)
    return dot, dot - dot.T


def extract_slice(matrix, s):
    """Wrapped diagonal at offset s: out[c] = matrix[c, (c+s) mod D]."""
    matrix = np.asarray(matrix)
    d = matrix.shape[0]
    if matrix.shape != (d, d):
        raise DimensionError(f"extract_slice: need a square matrix, got {matrix.shape}")
    idx = np.arange(d)
    return matrix[idx, (idx + int(s)) % d]
