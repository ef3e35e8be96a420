"""Prompt-conditioned encoder-decoder segmentation network and the full model.

The backbone is a small U-Net: three stride-free conv stages with 2x average
pooling between them, FiLM (per-channel scale/shift computed from the text
embedding) after every encoder conv, a bottleneck with a global-context
injection, and a mirrored decoder with skip connections. The full model wraps
it with the canonicalizer: images are mapped to the canonical frame before
encoding, and in equivariant mode the predicted mask is mapped back to the
input frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import groups as G
from . import tensor as T
from .canonicalizer import Canonicalizer
from .groups import NonSquareImage
from .tensor import Tensor
from .textenc import IntentionHead, TextEncoderNet, classify_intent


class UnnormalizedInput(ValueError):
    """Input image values leave [0, 1] by more than 1e-6."""


def _avgpool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    r = T.reshape(x, (n, c, h // 2, 2, w // 2, 2))
    return T.tmean(T.tmean(r, axis=5), axis=3)


def _spatial_mean(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return T.tmean(T.reshape(x, (n, c, h * w)), axis=2)


class SegBackbone:
    """Encoder(16/32/64) + FiLM conditioning + bottleneck context + mirrored decoder."""

    def __init__(self, chans=(16, 32, 64), embed_dim: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        dt = T.get_default_dtype()
        c1, c2, c3 = chans
        self.chans = tuple(chans)
        self.embed_dim = embed_dim
        self.film_enabled = True

        def conv_init(out_ch, in_ch, k):
            fan = in_ch * k * k
            kern = Tensor((rng.normal(0, np.sqrt(2.0 / fan), (out_ch, in_ch, k, k))).astype(dt),
                          requires_grad=True)
            bias = Tensor(np.zeros(out_ch, dtype=dt), requires_grad=True)
            return kern, bias

        self.enc1 = conv_init(c1, 1, 3)
        self.enc2 = conv_init(c2, c1, 3)
        self.enc3 = conv_init(c3, c2, 3)
        self.bott = conv_init(c3, c3, 3)
        self.dec3 = conv_init(c2, c3 + c3, 3)
        self.dec2 = conv_init(c1, c2 + c2, 3)
        self.dec1 = conv_init(c1, c1 + c1, 3)
        self.head = conv_init(1, c1, 1)
        # global context: bottleneck spatial mean through one linear map
        self.ctx_w = Tensor((rng.normal(0, 1.0 / np.sqrt(c3), (c3, c3))).astype(dt),
                            requires_grad=True)
        self.ctx_b = Tensor(np.zeros((1, c3), dtype=dt), requires_grad=True)
        # FiLM maps start at identity (gamma 1, beta 0)
        self.film = []
        for ch in (c1, c2, c3, c3):
            wg = Tensor(np.zeros((embed_dim, ch), dtype=dt), requires_grad=True)
            wb = Tensor(np.zeros((embed_dim, ch), dtype=dt), requires_grad=True)
            self.film.append((wg, wb))

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for name in ("enc1", "enc2", "enc3", "bott", "dec3", "dec2", "dec1", "head"):
            kern, bias = getattr(self, name)
            out.append((f"seg.{name}.kernel", kern))
            out.append((f"seg.{name}.bias", bias))
        out.append(("seg.ctx.w", self.ctx_w))
        out.append(("seg.ctx.b", self.ctx_b))
        for i, (wg, wb) in enumerate(self.film):
            out.append((f"seg.film{i}.scale", wg))
            out.append((f"seg.film{i}.shift", wb))
        return out

    def load_parameters(self, arrays: dict[str, np.ndarray]) -> None:
        for name in ("enc1", "enc2", "enc3", "bott", "dec3", "dec2", "dec1", "head"):
            setattr(self, name, (
                Tensor(arrays[f"seg.{name}.kernel"], requires_grad=True),
                Tensor(arrays[f"seg.{name}.bias"], requires_grad=True),
            ))
        self.ctx_w = Tensor(arrays["seg.ctx.w"], requires_grad=True)
        self.ctx_b = Tensor(arrays["seg.ctx.b"], requires_grad=True)
        self.film = [
            (
                Tensor(arrays[f"seg.film{i}.scale"], requires_grad=True),
                Tensor(arrays[f"seg.film{i}.shift"], requires_grad=True),
            )
            for i in range(len(self.film))
        ]

    def _film(self, x: Tensor, t: Tensor, stage: int) -> Tensor:
        if not self.film_enabled:
            return x
        wg, wb = self.film[stage]
        n, c, h, _ = x.shape
        gamma = 1.0 + T.matmul(t, wg)
        beta = T.matmul(t, wb)
        gmap = T.nearest_upsample2d(T.reshape(gamma, (n, c, 1, 1)), h)
        bmap = T.nearest_upsample2d(T.reshape(beta, (n, c, 1, 1)), h)
        return x * gmap + bmap

    def forward(self, x: Tensor, t: Tensor) -> Tensor:
        """(N, 1, H, W) image batch + (N, D) embeddings -> (N, 1, H, W) logits."""
        n, _, h, w = x.shape
        if h % 8 or w % 8:
            raise T.ShapeMismatch(f"backbone needs H, W divisible by 8, got {h}x{w}")
        e1 = T.leaky_relu(self._film(T.conv2d(x, *self.enc1, pad=1), t, 0))
        e2 = T.leaky_relu(self._film(T.conv2d(_avgpool2(e1), *self.enc2, pad=1), t, 1))
        e3 = T.leaky_relu(self._film(T.conv2d(_avgpool2(e2), *self.enc3, pad=1), t, 2))
        b = T.leaky_relu(self._film(T.conv2d(_avgpool2(e3), *self.bott, pad=1), t, 3))
        ones = Tensor(np.ones((n, 1), dtype=x.data.dtype))
        ctx = T.leaky_relu(T.matmul(_spatial_mean(b), self.ctx_w) + T.matmul(ones, self.ctx_b))
        c3 = b.shape[1]
        b = b + T.nearest_upsample2d(T.reshape(ctx, (n, c3, 1, 1)), b.shape[2])
        d3 = T.leaky_relu(T.conv2d(T.concat([T.nearest_upsample2d(b, 2), e3], axis=1), *self.dec3, pad=1))
        d2 = T.leaky_relu(T.conv2d(T.concat([T.nearest_upsample2d(d3, 2), e2], axis=1), *self.dec2, pad=1))
        d1 = T.leaky_relu(T.conv2d(T.concat([T.nearest_upsample2d(d2, 2), e1], axis=1), *self.dec1, pad=1))
        return T.conv2d(d1, *self.head)


def existence_filter(probs: np.ndarray, alpha: float = 0.5) -> bool:
    """True when the queried structure is present: max probability >= alpha."""
    return bool(np.max(probs) >= alpha)


@dataclass
class SegmentationResult:
    probs: np.ndarray  # (H, W) in [0, 1], in the frame selected by the mode
    intent_logits: np.ndarray  # (C,)
    g_hat: G.GroupElement
    present: bool

    def mask(self, threshold: float = 0.5) -> np.ndarray:
        return (self.probs >= threshold).astype(np.uint8)


class Segmenter:
    """Canonicalizer + text encoder + intention head + backbone.

    mode 'invariant' returns the canonical-frame mask for any input
    orientation; 'equivariant' maps the mask back to the input frame.
    """

    def __init__(
        self,
        canonicalizer: Canonicalizer,
        text_encoder: TextEncoderNet,
        intent_head: IntentionHead,
        backbone: SegBackbone,
        mode: str = "equivariant",
        use_canonicalizer: bool = True,
        alpha: float = 0.5,
    ):
        if mode not in ("invariant", "equivariant"):
            raise ValueError(f"unknown mode {mode!r}")
        self.canonicalizer = canonicalizer
        self.text_encoder = text_encoder
        self.intent_head = intent_head
        self.backbone = backbone
        self.mode = mode
        self.use_canonicalizer = use_canonicalizer
        self.alpha = alpha

    def parameters(self) -> list[tuple[str, Tensor]]:
        return (
            self.canonicalizer.parameters()
            + self.text_encoder.parameters()
            + self.intent_head.parameters()
            + self.backbone.parameters()
        )

    @staticmethod
    def _validate(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[0] != x.shape[1]:
            raise NonSquareImage(f"expected one square (H, W) image, got {x.shape}")
        if x.min() < -1e-6 or x.max() > 1.0 + 1e-6:
            raise UnnormalizedInput(
                f"image values in [{x.min():.4g}, {x.max():.4g}], expected [0, 1]"
            )
        return x.astype(T.get_default_dtype(), copy=False)

    def segment(self, x: np.ndarray, prompt) -> SegmentationResult:
        """Probability mask + intent logits + the canonicalizer's element."""
        x = self._validate(x)
        if self.use_canonicalizer:
            x_canon, g_hat = self.canonicalizer.canonicalize_hard(x)
        else:
            x_canon, g_hat = x, G.identity(self.canonicalizer.group_order)
        text = prompt.text if hasattr(prompt, "text") else str(prompt)
        t = self.text_encoder.encode_texts([text])
        logits = self.backbone.forward(Tensor(x_canon[None, None]), t)
        probs = T.sigmoid(logits).data[0, 0]
        if self.mode == "equivariant" and self.use_canonicalizer:
            probs = self.canonicalizer.action.act(g_hat, probs)
        intent = classify_intent(self.intent_head, t).data[0]
        return SegmentationResult(
            probs=probs,
            intent_logits=intent,
            g_hat=g_hat,
            present=existence_filter(probs, self.alpha),
        )
