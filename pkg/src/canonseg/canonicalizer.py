"""Equivariant canonicalization network over a dihedral group.

A lifting convolution followed by group convolutions (regular representation:
group features are indexed by group elements and actions permute that axis),
closed by a spatial+channel mean that yields one energy per group element.
By construction the energy vector of a transformed image is a permutation of
the original's, so the argmax element recovers the applied transform and
``act(inverse(argmax), x)`` lands every orbit member on one canonical image.

Training uses a softmax relaxation over the energies (hard argmax is not
differentiable); inference uses the argmax with ties broken toward the lowest
element index.
"""

from __future__ import annotations

import numpy as np

from . import groups as G
from . import tensor as T
from .groups import GroupAction, GroupElement, NonSquareImage
from .tensor import Tensor


class NonPositiveTemperature(ValueError):
    """Soft canonicalization requires temperature > 0."""


def _he_init(rng, shape, fan_in, dtype):
    return (rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)).astype(dtype)


def _disk_mask(k: int, dtype) -> np.ndarray:
    # restrict support to the inscribed disk so 45-degree rotations never clip
    c = (k - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    return (((ii - c) ** 2 + (jj - c) ** 2) <= (c + 0.5) ** 2).astype(dtype)


class LiftingConvLayer:
    """Plain image -> feature map with an explicit group axis of size 2n."""

    def __init__(self, group_order: int, in_ch: int, out_ch: int, kernel: int,
                 rng: np.random.Generator):
        dt = T.get_default_dtype()
        self.n = group_order
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.k = kernel
        self.kernel = Tensor(
            _he_init(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel, dt),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_ch, dtype=dt), requires_grad=True)
        self._spatial = [
            Tensor(G.spatial_kernel_matrix(group_order, e, kernel, np.dtype(dt).name))
            for e in range(2 * group_order)
        ]
        self._mask = Tensor(_disk_mask(kernel, dt)) if group_order == 8 else None

    def _masked_kernel(self) -> Tensor:
        if self._mask is None:
            return self.kernel
        flat = T.reshape(self.kernel, (self.out_ch * self.in_ch, self.k * self.k))
        m = T.reshape(self._mask, (1, self.k * self.k))
        ones = Tensor(np.ones((self.out_ch * self.in_ch, 1), dtype=self.kernel.data.dtype))
        return T.reshape(flat * T.matmul(ones, m), self.kernel.shape)

    def expanded_kernel(self) -> tuple[Tensor, Tensor]:
        """(out_ch*2n, in_ch, k, k) kernel stack: row o*2n+e holds act(e, K[o])."""
        size = 2 * self.n
        base = self._masked_kernel()
        flat = T.reshape(base, (self.out_ch * self.in_ch, self.k * self.k))
        per_elem = []
        for e in range(size):
            rot = T.matmul(flat, T.transpose(self._spatial[e]))
            per_elem.append(T.reshape(rot, (self.out_ch, 1, self.in_ch, self.k, self.k)))
        stack = T.concat(per_elem, axis=1)  # (O, 2n, C, k, k)
        kernels = T.reshape(stack, (self.out_ch * size, self.in_ch, self.k, self.k))
        ones = Tensor(np.ones((1, size), dtype=base.data.dtype))
        bias = T.reshape(T.matmul(T.reshape(self.bias, (self.out_ch, 1)), ones), (self.out_ch * size,))
        return kernels, bias

    def forward(self, x: Tensor) -> Tensor:
        """(N, in_ch, H, W) -> (N, out_ch, 2n, H, W), 'same' padding."""
        kernels, bias = self.expanded_kernel()
        y = T.conv2d(x, kernels, bias, stride=1, pad=self.k // 2)
        n, _, h, w = y.shape
        return T.reshape(y, (n, self.out_ch, 2 * self.n, h, w))


class GroupConvLayer:
    """Group-axis feature map -> group-axis feature map (regular representation)."""

    def __init__(self, group_order: int, in_ch: int, out_ch: int, kernel: int,
                 rng: np.random.Generator):
        dt = T.get_default_dtype()
        self.n = group_order
        size = 2 * group_order
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.k = kernel
        self.kernel = Tensor(
            _he_init(rng, (out_ch, in_ch, size, kernel, kernel), in_ch * size * kernel * kernel, dt),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_ch, dtype=dt), requires_grad=True)
        self._spatial = [
            Tensor(G.spatial_kernel_matrix(group_order, e, kernel, np.dtype(dt).name))
            for e in range(size)
        ]
        comp = G.compose_table(group_order)
        inv = G.inverse_table(group_order)
        self._perm = []
        for e in range(size):
            p = np.zeros((size, size), dtype=dt)
            for m_out in range(size):
                p[m_out, comp[inv[e], m_out]] = 1.0  # source index: e^{-1} ∘ m_out
            self._perm.append(Tensor(p))
        self._mask = Tensor(_disk_mask(kernel, dt)) if group_order == 8 else None

    def _masked_kernel(self) -> Tensor:
        if self._mask is None:
            return self.kernel
        size = 2 * self.n
        flat = T.reshape(self.kernel, (self.out_ch * self.in_ch * size, self.k * self.k))
        m = T.reshape(self._mask, (1, self.k * self.k))
        ones = Tensor(np.ones((flat.shape[0], 1), dtype=self.kernel.data.dtype))
        return T.reshape(flat * T.matmul(ones, m), self.kernel.shape)

    def expanded_kernel(self) -> tuple[Tensor, Tensor]:
        """(out_ch*2n, in_ch*2n, k, k): row o*2n+e is the e-steered kernel."""
        size = 2 * self.n
        o, c, k = self.out_ch, self.in_ch, self.k
        base = self._masked_kernel()
        per_elem = []
        for e in range(size):
            # permute the group axis: K[o, c, e^{-1} ∘ m]
            moved = T.transpose(base, (0, 1, 3, 4, 2))  # (O, C, k, k, M)
            moved = T.reshape(moved, (o * c * k * k, size))
            moved = T.matmul(moved, T.transpose(self._perm[e]))
            moved = T.reshape(moved, (o, c, k, k, size))
            moved = T.transpose(moved, (0, 1, 4, 2, 3))  # (O, C, M, k, k)
            # then rotate/reflect the spatial footprint by e
            flat = T.reshape(moved, (o * c * size, k * k))
            rot = T.matmul(flat, T.transpose(self._spatial[e]))
            per_elem.append(T.reshape(rot, (o, 1, c * size, k, k)))
        stack = T.concat(per_elem, axis=1)  # (O, 2n, C*M, k, k)
        kernels = T.reshape(stack, (o * size, c * size, k, k))
        ones = Tensor(np.ones((1, size), dtype=base.data.dtype))
        bias = T.reshape(T.matmul(T.reshape(self.bias, (o, 1)), ones), (o * size,))
        return kernels, bias

    def forward(self, x: Tensor) -> Tensor:
        """(N, in_ch, 2n, H, W) -> (N, out_ch, 2n, H, W)."""
        size = 2 * self.n
        n, c, m, h, w = x.shape
        kernels, bias = self.expanded_kernel()
        y = T.conv2d(T.reshape(x, (n, c * m, h, w)), kernels, bias, stride=1, pad=self.k // 2)
        return T.reshape(y, (n, self.out_ch, size, h, w))


class Canonicalizer:
    """Energy network over D_n; argmax energy names the transform to undo."""

    def __init__(
        self,
        group_order: int = 4,
        layers: int = 3,
        hidden: int = 8,
        kernel: int = 9,
        pool_to: int = 16,
        seed: int = 0,
    ):
        if layers < 1:
            raise ValueError("need at least the lifting layer")
        rng = np.random.default_rng(seed)
        self.group_order = group_order
        self.action = GroupAction(group_order)
        self.pool_to = pool_to
        self.kernel_size = kernel
        self.hidden = hidden
        self.lift = LiftingConvLayer(group_order, 1, hidden, kernel, rng)
        self.gconvs = [
            GroupConvLayer(group_order, hidden, hidden, kernel, rng) for _ in range(layers - 1)
        ]

    @property
    def size(self) -> int:
        return 2 * self.group_order

    def config(self) -> dict:
        return {
            "group_order": self.group_order,
            "layers": 1 + len(self.gconvs),
            "hidden": self.hidden,
            "kernel": self.kernel_size,
            "pool_to": self.pool_to,
        }

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = [("canon.lift.kernel", self.lift.kernel), ("canon.lift.bias", self.lift.bias)]
        for i, layer in enumerate(self.gconvs):
            out.append((f"canon.g{i}.kernel", layer.kernel))
            out.append((f"canon.g{i}.bias", layer.bias))
        return out

    def load_parameters(self, arrays: dict[str, np.ndarray]) -> None:
        self.lift.kernel = Tensor(arrays["canon.lift.kernel"], requires_grad=True)
        self.lift.bias = Tensor(arrays["canon.lift.bias"], requires_grad=True)
        for i, layer in enumerate(self.gconvs):
            layer.kernel = Tensor(arrays[f"canon.g{i}.kernel"], requires_grad=True)
            layer.bias = Tensor(arrays[f"canon.g{i}.bias"], requires_grad=True)

    # -- preprocessing ------------------------------------------------------

    def _prepare(self, x: np.ndarray) -> np.ndarray:
        """Collapse channels by mean, pool by exact 2x steps to <= pool_to, standardize.

        Per-image standardization keeps the energy scale independent of how much
        bright content the image happens to contain; mean and std are invariant
        under the group's pixel permutations, so equivariance is untouched.
        """
        x = np.asarray(x)
        if x.ndim == 2:
            x = x[None]
        elif x.ndim == 3:
            pass
        elif x.ndim == 4:
            x = x.mean(axis=1)
        else:
            raise NonSquareImage(f"unsupported input shape {x.shape}")
        if x.shape[-1] != x.shape[-2]:
            raise NonSquareImage(f"expected square images, got {x.shape}")
        n, h, w = x.shape
        while h > self.pool_to and h % 2 == 0:
            x = x.reshape(n, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
            h //= 2
            w //= 2
        x = x.astype(T.get_default_dtype())
        mu = x.mean(axis=(1, 2), keepdims=True)
        sd = x.std(axis=(1, 2), keepdims=True)
        return (x - mu) / (sd + 1e-6)

    # -- energies -----------------------------------------------------------

    def energies_batch(self, x: np.ndarray) -> Tensor:
        """(N, H, W) images -> (N, 2n) energies, differentiable in the kernels."""
        pooled = self._prepare(x)
        n, h, w = pooled.shape
        feat = T.leaky_relu(self.lift.forward(Tensor(pooled[:, None])))
        for layer in self.gconvs:
            feat = T.leaky_relu(layer.forward(feat))
        _, o, m, fh, fw = feat.shape
        flat = T.reshape(T.transpose(feat, (0, 2, 1, 3, 4)), (n, m, o * fh * fw))
        return T.tmean(flat, axis=2)

    def energies(self, x: np.ndarray) -> Tensor:
        """Single image -> (2n,) energy vector (one finite scalar per element)."""
        e = self.energies_batch(np.asarray(x)[None] if np.asarray(x).ndim == 2 else x)
        return T.reshape(e, (self.size,))

    # -- canonicalization ----------------------------------------------------

    def predict_elements(self, x: np.ndarray) -> list[GroupElement]:
        """Argmax group element per image; ties resolve to the lowest index."""
        e = self.energies_batch(x).data
        return [GroupElement.from_index(self.group_order, int(i)) for i in np.argmax(e, axis=1)]

    def canonicalize_hard(self, x: np.ndarray) -> tuple[np.ndarray, GroupElement]:
        """x -> (act(g_hat^{-1}, x), g_hat). Same output for every orbit member."""
        x = np.asarray(x)
        if x.ndim != 2:
            raise NonSquareImage(f"canonicalize_hard expects one (H, W) image, got {x.shape}")
        g_hat = self.predict_elements(x[None])[0]
        return self.action.act(G.inverse(g_hat), x), g_hat

    def _inverse_stack(self, x: np.ndarray) -> np.ndarray:
        """(N, H, W) -> (N, 2n, H, W) of act(e^{-1}, x) per element e."""
        return np.stack(
            [self.action.act(G.inverse(g), x) for g in self.action.elements()], axis=1
        )

    def canonicalize_soft_batch(self, x: np.ndarray, temperature: float) -> Tensor:
        """Softmax(energies/T)-weighted sum of all inverse transforms; (N, H, W)."""
        if temperature <= 0:
            raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
        x = np.asarray(x)
        n, h, w = x.shape
        weights = T.softmax(self.energies_batch(x) * (1.0 / temperature), axis=1)
        stack = Tensor(self._inverse_stack(x).astype(T.get_default_dtype()))
        wmap = T.nearest_upsample2d(T.reshape(weights, (n, self.size, 1, 1)), h)
        return T.tsum(stack * wmap, axis=1)

    def canonicalize_soft(self, x: np.ndarray, temperature: float) -> Tensor:
        x = np.asarray(x)
        if x.ndim != 2:
            raise NonSquareImage(f"canonicalize_soft expects one (H, W) image, got {x.shape}")
        return T.reshape(self.canonicalize_soft_batch(x[None], temperature), x.shape)

    def stage1_loss_batch(self, x_canonical: np.ndarray, gs: list[GroupElement],
                          temperature: float) -> Tensor:
        """MSE between soft-canonicalized transformed images and the originals."""
        x_canonical = np.asarray(x_canonical)
        transformed = np.stack(
            [self.action.act(g, img) for g, img in zip(gs, x_canonical)], axis=0
        )
        soft = self.canonicalize_soft_batch(transformed, temperature)
        diff = soft - Tensor(x_canonical.astype(T.get_default_dtype()))
        return T.tmean(diff * diff)

    def stage1_loss(self, x_canonical: np.ndarray, g: GroupElement,
                    temperature: float = 0.1) -> Tensor:
        return self.stage1_loss_batch(np.asarray(x_canonical)[None], [g], temperature)
