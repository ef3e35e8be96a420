"""Dihedral groups D_n and their actions on square images and masks.

Elements are written in (rotation, flip) normal form: the action rotates
counter-clockwise by ``rotation * 360/n`` degrees first, then (if flipped)
reflects about the vertical axis. D4 acts by exact index permutation; D8's
odd rotations resample bilinearly (images) or nearest-neighbour (masks) with
zero fill outside the support.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np


class GroupOrderMismatch(ValueError):
    """Elements of different dihedral groups were combined."""


class NonSquareImage(ValueError):
    """Group actions require square spatial dimensions."""


@dataclass(frozen=True)
class GroupElement:
    """One element of D_n: rotation index in [0, n) plus an optional reflection."""

    n: int
    rotation: int
    reflected: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"group order n must be positive, got {self.n}")
        if not 0 <= self.rotation < self.n:
            raise ValueError(f"rotation {self.rotation} outside [0, {self.n})")

    @property
    def index(self) -> int:
        """Position in (rotation, flip) lexicographic order; identity is 0."""
        return 2 * self.rotation + int(self.reflected)

    @classmethod
    def from_index(cls, n: int, index: int) -> "GroupElement":
        if not 0 <= index < 2 * n:
            raise ValueError(f"element index {index} outside [0, {2 * n})")
        return cls(n, index // 2, bool(index % 2))

    def __repr__(self) -> str:
        return f"g(r{self.rotation}{'f' if self.reflected else ''}|D{self.n})"


def identity(n: int) -> GroupElement:
    return GroupElement(n, 0, False)


def elements(n: int) -> list[GroupElement]:
    """All 2n elements of D_n in index order."""
    return [GroupElement.from_index(n, i) for i in range(2 * n)]


def compose(a: GroupElement, b: GroupElement) -> GroupElement:
    """a∘b: the element whose action applies b first, then a."""
    if a.n != b.n:
        raise GroupOrderMismatch(f"cannot compose D{a.n} with D{b.n}")
    # F^fa R^ra ∘ F^fb R^rb = F^(fa xor fb) R^(rb + (-1)^fb ra)
    rot = (b.rotation + (a.rotation if not b.reflected else -a.rotation)) % a.n
    return GroupElement(a.n, rot, a.reflected != b.reflected)


def inverse(g: GroupElement) -> GroupElement:
    if g.reflected:
        return g  # reflections are involutions
    return GroupElement(g.n, (-g.rotation) % g.n, False)


def random_element(group_order: int, rng) -> GroupElement:
    """Uniform draw from the 2n elements; `rng` is a seed or numpy Generator."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return GroupElement.from_index(group_order, int(rng.integers(0, 2 * group_order)))


@functools.lru_cache(maxsize=None)
def compose_table(n: int) -> np.ndarray:
    """table[i, j] = index of element_i ∘ element_j."""
    els = elements(n)
    return np.array(
        [[compose(a, b).index for b in els] for a in els], dtype=np.int64
    )


@functools.lru_cache(maxsize=None)
def inverse_table(n: int) -> np.ndarray:
    return np.array([inverse(g).index for g in elements(n)], dtype=np.int64)


def _check_square(x: np.ndarray) -> None:
    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise NonSquareImage(f"expected square spatial dims, got shape {x.shape}")


def _rotate_resample(x: np.ndarray, theta: float, nearest: bool) -> np.ndarray:
    """Rotate the last two (square) axes by theta CCW, zero fill outside."""
    h = x.shape[-1]
    c = (h - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(h), np.arange(h), indexing="ij")
    u = ii - c
    v = jj - c
    ct, st = np.cos(theta), np.sin(theta)
    # source coords such that theta = 90 deg reproduces np.rot90 exactly
    us = ct * u + st * v + c
    vs = -st * u + ct * v + c
    lead = x.shape[:-2]
    flat = x.reshape(-1, h, h)
    out = np.zeros_like(flat)
    if nearest:
        si = np.rint(us).astype(np.int64)
        sj = np.rint(vs).astype(np.int64)
        valid = (si >= 0) & (si < h) & (sj >= 0) & (sj < h)
        siv, sjv = si[valid], sj[valid]
        for k in range(flat.shape[0]):
            out[k][valid] = flat[k][siv, sjv]
    else:
        i0 = np.floor(us).astype(np.int64)
        j0 = np.floor(vs).astype(np.int64)
        di = us - i0
        dj = vs - j0
        for (oi, oj, wgt) in (
            (i0, j0, (1 - di) * (1 - dj)),
            (i0, j0 + 1, (1 - di) * dj),
            (i0 + 1, j0, di * (1 - dj)),
            (i0 + 1, j0 + 1, di * dj),
        ):
            valid = (oi >= 0) & (oi < h) & (oj >= 0) & (oj < h)
            iv, jv = oi[valid], oj[valid]
            w = wgt[valid].astype(flat.dtype)
            for k in range(flat.shape[0]):
                out[k][valid] += flat[k][iv, jv] * w
    return out.reshape(*lead, h, h)


class GroupAction:
    """Action of D_n on arrays whose last two axes are square spatial dims."""

    def __init__(self, group_order: int = 4, interpolation: str | None = None):
        if group_order not in (4, 8):
            raise ValueError(f"supported group orders are 4 and 8, got {group_order}")
        if interpolation is None:
            interpolation = "exact_grid" if group_order == 4 else "bilinear"
        if group_order == 4 and interpolation != "exact_grid":
            raise ValueError("D4 acts by exact grid permutation")
        if group_order == 8 and interpolation != "bilinear":
            raise ValueError("D8 requires bilinear interpolation")
        self.group_order = group_order
        self.interpolation = interpolation

    @property
    def size(self) -> int:
        return 2 * self.group_order

    def elements(self) -> list[GroupElement]:
        return elements(self.group_order)

    def identity(self) -> GroupElement:
        return identity(self.group_order)

    def act(self, g: GroupElement, x: np.ndarray, mask: bool = False) -> np.ndarray:
        """Apply g to the last two axes. `mask` selects nearest resampling (D8)."""
        if g.n != self.group_order:
            raise GroupOrderMismatch(f"element of D{g.n} under a D{self.group_order} action")
        _check_square(np.asarray(x))
        x = np.asarray(x)
        quarter, extra = divmod(g.rotation * 4, g.n)  # 4/n quarter turns per step
        if extra == 0:
            out = np.rot90(x, quarter, axes=(-2, -1)) if quarter else x
        else:
            # n == 8, odd rotation: exact quarter turns plus one 45 degree resample
            out = np.rot90(x, quarter, axes=(-2, -1)) if quarter else x
            out = _rotate_resample(out, np.pi / 4.0, nearest=mask)
        if g.reflected:
            out = np.flip(out, axis=-1)
        return np.ascontiguousarray(out)


@functools.lru_cache(maxsize=None)
def spatial_kernel_matrix(group_order: int, index: int, k: int, dtype_str: str) -> np.ndarray:
    """(k*k, k*k) matrix S with vec(act(g, psi)) = S @ vec(psi).

    Built by acting on the pixel basis, so it shares the action's exact
    conventions. For D4 this is a permutation matrix; for D8's odd rotations
    it carries bilinear weights.
    """
    action = GroupAction(group_order)
    g = GroupElement.from_index(group_order, index)
    dtype = np.dtype(dtype_str)
    basis = np.eye(k * k, dtype=dtype).reshape(k * k, k, k)
    cols = action.act(g, basis).reshape(k * k, k * k)
    return np.ascontiguousarray(cols.T)
