"""Three-stage training, checkpointing, evaluation, and the ablation harness.

Stage 1 trains the canonicalizer alone (soft-canonicalization MSE against the
canonical frame, temperature halved at each third of the epochs). Stage 2
trains text encoder, intention head, and backbone on canonical scans with the
canonicalizer untouched. Stage 3 applies a random group transform per sample,
feeds the hard-canonicalized image to the backbone (an imperfect argmax acts
as consistent augmentation: image and mask stay aligned), and keeps aligning
the canonicalizer with its MSE objective on the same batches.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import groups as G
from . import losses as L
from . import prompts as P
from . import tensor as T
from . import data as D
from .canonicalizer import Canonicalizer
from .segnet import SegBackbone, Segmenter, existence_filter
from .tensor import Tensor
from .textenc import IntentionHead, TextEncoderNet, Vocabulary, classify_intent, tokenize


class NonCanonicalDataset(ValueError):
    """Stage 1/2 require a dataset whose manifest carries the canonical flag."""


class MissingPrompts(ValueError):
    """Stage 2/3 require a non-empty prompt pool."""


@dataclass
class TrainConfig:
    stage: str = "all"  # "1" | "2" | "3" | "all"
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs_stage1: int = 8
    epochs_stage2: int = 20
    epochs_stage3: int = 12
    pairs_per_epoch: int = 600
    seed: int = 0
    group_order: int = 4
    temperature: float = 0.1
    canon_loss_weight: float = 1.0
    lr_floor: float = 1e-6
    embed_dim: int = 64
    chans: tuple[int, int, int] = (16, 32, 64)
    canon_hidden: int = 8
    canon_kernel: int = 9
    canon_layers: int = 3
    canon_pool_to: int = 16
    alpha: float = 0.5
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def to_json(self) -> dict:
        doc = asdict(self)
        for key in ("betas", "chans", "loss_weights"):
            doc[key] = list(doc[key])
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        for key in ("betas", "chans", "loss_weights"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)


def cosine_lr(step: int, total_steps: int, lr0: float, floor: float) -> float:
    """Cosine annealing from lr0 to floor over the stage's total steps."""
    if total_steps <= 1:
        return lr0
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return floor + 0.5 * (lr0 - floor) * (1.0 + np.cos(np.pi * frac))


class AdamW:
    """Adam with decoupled weight decay; state keyed by parameter name."""

    def __init__(self, betas=(0.9, 0.999), weight_decay=0.01, eps=1e-8):
        self.b1, self.b2 = betas
        self.wd = weight_decay
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float
             ) -> dict[str, np.ndarray]:
        """One update for every param with a gradient; returns the new arrays."""
        out = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                out[name] = p
                continue
            g = g.astype(np.float64)
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
                self.t[name] = 0
            v = self.v[name]
            self.t[name] += 1
            t = self.t[name]
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - self.b1**t)
            vhat = v / (1 - self.b2**t)
            new = p.astype(np.float64)
            new = new - lr * self.wd * new - lr * mhat / (np.sqrt(vhat) + self.eps)
            out[name] = new.astype(p.dtype)
        return out


# -- model assembly ----------------------------------------------------------


def build_model(cfg: TrainConfig, bank: P.TemplateBank, mode: str = "equivariant") -> Segmenter:
    vocab = Vocabulary.from_bank(bank)
    canon = Canonicalizer(
        group_order=cfg.group_order,
        layers=cfg.canon_layers,
        hidden=cfg.canon_hidden,
        kernel=cfg.canon_kernel,
        pool_to=cfg.canon_pool_to,
        seed=cfg.seed + 1,
    )
    text = TextEncoderNet(vocab, dim=cfg.embed_dim, rng=np.random.default_rng(cfg.seed + 2))
    head = IntentionHead(bank.class_count, dim=cfg.embed_dim, rng=np.random.default_rng(cfg.seed + 3))
    backbone = SegBackbone(chans=cfg.chans, embed_dim=cfg.embed_dim, seed=cfg.seed + 4)
    return Segmenter(canon, text, head, backbone, mode=mode, alpha=cfg.alpha)


def model_params(model: Segmenter) -> dict[str, Tensor]:
    return dict(model.parameters())


def bind_param(model: Segmenter, name: str, tensor: Tensor) -> None:
    """Install a specific Tensor object as the named parameter.

    Unlike push_params (which wraps fresh arrays) this rebinds the given
    object, so gradient checks can read `.grad` off their own probe tensor.
    """
    attr = name.split(".", 1)[1]
    if name.startswith("canon."):
        part, leaf = attr.split(".")
        layer = model.canonicalizer.lift if part == "lift" else model.canonicalizer.gconvs[int(part[1:])]
        setattr(layer, leaf, tensor)
    elif name.startswith("text."):
        setattr(model.text_encoder, attr, tensor)
    elif name.startswith("intent."):
        setattr(model.intent_head, attr, tensor)
    elif name.startswith("seg."):
        net = model.backbone
        parts = attr.split(".")
        if parts[0] == "ctx":
            setattr(net, "ctx_w" if parts[1] == "w" else "ctx_b", tensor)
        elif parts[0].startswith("film"):
            idx = int(parts[0][4:])
            wg, wb = net.film[idx]
            net.film[idx] = (tensor, wb) if parts[1] == "scale" else (wg, tensor)
        else:
            kern, bias = getattr(net, parts[0])
            setattr(net, parts[0], (tensor, bias) if parts[1] == "kernel" else (kern, tensor))
    else:
        raise KeyError(f"unknown parameter {name}")


def push_params(model: Segmenter, arrays: dict[str, np.ndarray]) -> None:
    """Rebind updated parameter arrays into the component networks."""
    def subset(prefix):
        return {k: v for k, v in arrays.items() if k.startswith(prefix)}

    if subset("canon."):
        current = {k: t.data for k, t in model.canonicalizer.parameters()}
        current.update(subset("canon."))
        model.canonicalizer.load_parameters(current)
    if subset("text."):
        current = {k: t.data for k, t in model.text_encoder.parameters()}
        current.update(subset("text."))
        model.text_encoder.load_parameters(current)
    if subset("intent."):
        current = {k: t.data for k, t in model.intent_head.parameters()}
        current.update(subset("intent."))
        model.intent_head.load_parameters(current)
    if subset("seg."):
        current = {k: t.data for k, t in model.backbone.parameters()}
        current.update(subset("seg."))
        model.backbone.load_parameters(current)


# -- in-memory dataset --------------------------------------------------------


@dataclass
class ArrayDataset:
    images: np.ndarray  # (S, H, W) float32 in [0, 1]
    masks: np.ndarray  # (S, C, H, W) uint8, zero where absent
    present: np.ndarray  # (S, C) bool
    sample_ids: list[str]
    class_names: list[str]
    canonical: bool
    transforms: list[G.GroupElement | None] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.images.shape[0]


def load_arrays(manifest: D.Manifest) -> ArrayDataset:
    n = len(manifest.samples)
    c = len(manifest.class_names)
    h = manifest.image_size
    images = np.zeros((n, h, h), dtype=np.float32)
    masks = np.zeros((n, c, h, h), dtype=np.uint8)
    present = np.zeros((n, c), dtype=bool)
    transforms: list[G.GroupElement | None] = []
    for i, entry in enumerate(manifest.samples):
        images[i] = manifest.load_image(entry)
        for ci in entry.present:
            masks[i, ci] = manifest.load_mask(entry, ci)
            present[i, ci] = True
        transforms.append(D.recorded_transform(entry) if entry.transform else None)
    return ArrayDataset(
        images=images,
        masks=masks,
        present=present,
        sample_ids=[e.id for e in manifest.samples],
        class_names=list(manifest.class_names),
        canonical=manifest.canonical,
        transforms=transforms,
    )


# -- prompt pool --------------------------------------------------------------


def build_prompt_pool(
    dataset: ArrayDataset,
    bank: P.TemplateBank,
    seed: int,
    informed_per_class: int = 1,
    agnostic_per_category: int = 1,
) -> list[P.Prompt]:
    """Per sample: informed prompts for every class (absent ones train the
    existence behaviour) and agnostic prompts with their winner resolved on
    the canonical masks and stored as target_class."""
    pool: list[P.Prompt] = []
    rng = np.random.default_rng([seed, 555])
    for si in range(dataset.size):
        sid = dataset.sample_ids[si]
        for ci in range(len(dataset.class_names)):
            for _ in range(informed_per_class):
                p = P.generate_informed(ci, bank, int(rng.integers(1 << 31)))
                pool.append(P.Prompt(p.text, p.kind, ci, None, "template", sid, p.seed))
        masks = {ci: dataset.masks[si, ci] for ci in range(len(dataset.class_names))
                 if dataset.present[si, ci]}
        if not masks:
            continue
        winners = P.extract_spatial_categories(masks)
        for cat, winner in winners.items():
            for _ in range(agnostic_per_category):
                p = P.generate_agnostic(cat, bank, int(rng.integers(1 << 31)))
                pool.append(P.Prompt(p.text, p.kind, winner, cat, "template", sid, p.seed))
    if not pool:
        raise MissingPrompts("prompt pool came out empty")
    return pool


# -- batched segmentation loss --------------------------------------------------


def _batched_seg_loss(
    cfg: TrainConfig,
    model: Segmenter,
    images: np.ndarray,  # (B, H, W)
    targets: np.ndarray,  # (B, H, W) binary
    texts: list[str],
    intent_labels: list[int | None],
) -> Tensor:
    """Mean over the batch of dice+bce (+ intent CE on informed rows)."""
    b, h, w = images.shape
    dt = T.get_default_dtype()
    emb = model.text_encoder.encode_texts(texts)
    logits = model.backbone.forward(Tensor(images[:, None].astype(dt)), emb)
    probs = T.sigmoid(T.reshape(logits, (b, h * w)))
    tgt = Tensor(targets.reshape(b, h * w).astype(dt))
    w_dice, w_ce, w_intent = cfg.loss_weights

    inter = T.tsum(probs * tgt, axis=1)
    totals = T.tsum(probs, axis=1) + T.tsum(tgt, axis=1)
    eps = 1e-6
    dice_vec = 1.0 - (2.0 * inter + eps) / (totals + eps)
    loss = w_dice * T.tmean(dice_vec) + w_ce * L.ce_mask_loss(probs, tgt)

    informed = [i for i, lab in enumerate(intent_labels) if lab is not None]
    if informed and w_intent > 0:
        all_logits = classify_intent(model.intent_head, emb)
        sel = np.zeros((len(informed), b), dtype=dt)
        for row, i in enumerate(informed):
            sel[row, i] = 1.0
        picked = T.matmul(Tensor(sel), all_logits)
        labels = [intent_labels[i] for i in informed]
        # per-prompt mean semantics: informed rows contribute, agnostic rows add zero
        loss = loss + w_intent * (len(informed) / b) * L.ce_intent_loss(picked, labels)
    return loss


def _step(model: Segmenter, opt: AdamW, tape: T.Tape, loss: Tensor, lr: float,
          trainable: dict[str, Tensor]) -> float:
    tape.backward(loss)
    grads = {name: t.grad for name, t in trainable.items() if t.grad is not None}
    params = {name: t.data for name, t in trainable.items()}
    push_params(model, opt.step(params, grads, lr))
    for t_ in trainable.values():
        t_.grad = None
    return loss.item()


# -- stages --------------------------------------------------------------------


def _balanced_indices(dataset: ArrayDataset, max_repeat: int = 8) -> np.ndarray:
    """Sample indices with rare presence patterns repeated toward uniformity.

    Orientation cues differ per presence pattern; patterns that occur a
    handful of times would otherwise contribute almost no gradient. The MSE
    objective itself is untouched.
    """
    patterns: dict[tuple, list[int]] = {}
    for i in range(dataset.size):
        patterns.setdefault(tuple(dataset.present[i].tolist()), []).append(i)
    target = dataset.size / len(patterns)
    out = []
    for members in patterns.values():
        repeat = int(np.clip(round(target / len(members)), 1, max_repeat))
        out.extend(members * repeat)
    return np.asarray(out)


def train_stage1(cfg: TrainConfig, dataset: ArrayDataset, model: Segmenter,
                 log=None) -> list[float]:
    """Canonicalizer only; returns per-epoch mean losses."""
    if not dataset.canonical:
        raise NonCanonicalDataset("stage 1 trains on the canonical-frame dataset")
    opt = AdamW(cfg.betas, cfg.weight_decay)
    canon = model.canonicalizer
    pool = _balanced_indices(dataset)
    batches = max(1, len(pool) // cfg.batch_size)
    total = cfg.epochs_stage1 * batches
    history = []
    step = 0
    temperature = cfg.temperature
    third = max(1, cfg.epochs_stage1 // 3)
    for epoch in range(cfg.epochs_stage1):
        if epoch > 0 and epoch % third == 0:
            temperature *= 0.5
        rng = np.random.default_rng([cfg.seed, 1, epoch])
        order = pool[rng.permutation(len(pool))]
        losses = []
        for bi in range(batches):
            idx = order[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]
            gs = [G.random_element(cfg.group_order, rng) for _ in idx]
            trainable = dict(canon.parameters())
            with T.Tape() as tape:
                loss = canon.stage1_loss_batch(dataset.images[idx], gs, temperature)
                losses.append(_step(model, opt, tape, loss, cosine_lr(step, total, cfg.lr, cfg.lr_floor), trainable))
            step += 1
        history.append(float(np.mean(losses)))
        if log:
            log(f"stage1 epoch {epoch + 1}/{cfg.epochs_stage1} loss {history[-1]:.5f} T {temperature:.3f}")
    return history


def _epoch_pairs(pool: list[P.Prompt], dataset: ArrayDataset, rng, k: int):
    order = rng.permutation(len(pool))[:k]
    index_of = {sid: i for i, sid in enumerate(dataset.sample_ids)}
    return [(index_of[pool[i].sample_id], pool[i]) for i in order]


def train_stage2(cfg: TrainConfig, dataset: ArrayDataset, pool: list[P.Prompt],
                 model: Segmenter, log=None) -> list[float]:
    """Text encoder + intention head + backbone on canonical scans."""
    if not dataset.canonical:
        raise NonCanonicalDataset("stage 2 trains on the canonical-frame dataset")
    if not pool:
        raise MissingPrompts("stage 2 needs prompts")
    opt = AdamW(cfg.betas, cfg.weight_decay)
    trainable_all = {
        **dict(model.text_encoder.parameters()),
        **dict(model.intent_head.parameters()),
        **dict(model.backbone.parameters()),
    }
    k = min(cfg.pairs_per_epoch, len(pool))
    batches = max(1, k // cfg.batch_size)
    total = cfg.epochs_stage2 * batches
    history = []
    step = 0
    for epoch in range(cfg.epochs_stage2):
        rng = np.random.default_rng([cfg.seed, 2, epoch])
        pairs = _epoch_pairs(pool, dataset, rng, k)
        losses = []
        for bi in range(batches):
            chunk = pairs[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]
            sids = [si for si, _ in chunk]
            images = dataset.images[sids]
            targets = np.stack(
                [dataset.masks[si, p.target_class] for si, p in chunk]
            ).astype(np.float32)
            texts = [p.text for _, p in chunk]
            labels = [p.target_class if p.kind == P.KIND_INFORMED else None for _, p in chunk]
            with T.Tape() as tape:
                loss = _batched_seg_loss(cfg, model, images, targets, texts, labels)
                losses.append(_step(model, opt, tape, loss, cosine_lr(step, total, cfg.lr, cfg.lr_floor), dict(trainable_all)))
            trainable_all = {
                **dict(model.text_encoder.parameters()),
                **dict(model.intent_head.parameters()),
                **dict(model.backbone.parameters()),
            }
            step += 1
        history.append(float(np.mean(losses)))
        if log:
            log(f"stage2 epoch {epoch + 1}/{cfg.epochs_stage2} loss {history[-1]:.5f}")
    return history


def train_stage3(cfg: TrainConfig, dataset: ArrayDataset, pool: list[P.Prompt],
                 model: Segmenter, canonicalize: bool = True, log=None) -> list[float]:
    """Joint stage: random transforms per sample; canonicalizer keeps aligning.

    With canonicalize=False this is the plain-augmentation variant used by the
    ablation: the raw transformed image is segmented and agnostic targets are
    re-resolved in the input frame.
    """
    if not pool:
        raise MissingPrompts("stage 3 needs prompts")
    opt = AdamW(cfg.betas, cfg.weight_decay)
    action = model.canonicalizer.action
    n_cls = len(dataset.class_names)
    k = min(cfg.pairs_per_epoch, len(pool))
    seg_batches = max(1, k // cfg.batch_size)
    img_batches = max(1, dataset.size // cfg.batch_size)
    total = cfg.epochs_stage3 * (seg_batches + (img_batches if canonicalize else 0))
    temperature = cfg.temperature * 0.25  # continue from the annealed stage-1 value
    history = []
    step = 0
    for epoch in range(cfg.epochs_stage3):
        rng = np.random.default_rng([cfg.seed, 3, epoch])
        sample_g = [G.random_element(cfg.group_order, rng) for _ in range(dataset.size)]
        losses = []

        if canonicalize:
            # keep the canonicalizer aligned (its MSE objective, same as stage 1)
            order = rng.permutation(dataset.size)
            for bi in range(img_batches):
                idx = order[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]
                gs = [sample_g[i] for i in idx]
                trainable = dict(model.canonicalizer.parameters())
                with T.Tape() as tape:
                    loss = cfg.canon_loss_weight * model.canonicalizer.stage1_loss_batch(
                        dataset.images[idx], gs, temperature
                    )
                    losses.append(_step(model, opt, tape, loss, cosine_lr(step, total, cfg.lr, cfg.lr_floor), trainable))
                step += 1
            # per-sample canonicalization of the transformed images, reused below
            transformed = np.stack(
                [action.act(g, img) for g, img in zip(sample_g, dataset.images)]
            )
            g_hats = model.canonicalizer.predict_elements(transformed)
        else:
            transformed = np.stack(
                [action.act(g, img) for g, img in zip(sample_g, dataset.images)]
            )
            g_hats = [G.identity(cfg.group_order)] * dataset.size

        pairs = _epoch_pairs(pool, dataset, rng, k)
        trainable_seg = {
            **dict(model.text_encoder.parameters()),
            **dict(model.intent_head.parameters()),
            **dict(model.backbone.parameters()),
        }
        for bi in range(seg_batches):
            chunk = pairs[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]
            images = []
            targets = []
            texts = []
            labels = []
            for si, p in chunk:
                g = sample_g[si]
                if canonicalize:
                    back = G.compose(G.inverse(g_hats[si]), g)  # identity when aligned
                    images.append(action.act(G.inverse(g_hats[si]), transformed[si]))
                    target_mask = dataset.masks[si, p.target_class]
                    targets.append(action.act(back, target_mask, mask=True))
                    labels.append(p.target_class if p.kind == P.KIND_INFORMED else None)
                else:
                    images.append(transformed[si])
                    if p.kind == P.KIND_INFORMED:
                        targets.append(action.act(g, dataset.masks[si, p.target_class], mask=True))
                        labels.append(p.target_class)
                    else:
                        moved = {
                            ci: action.act(g, dataset.masks[si, ci], mask=True)
                            for ci in range(n_cls)
                            if dataset.present[si, ci]
                        }
                        winner = P.extract_spatial_categories(moved)[p.spatial_category]
                        targets.append(moved[winner])
                        labels.append(None)
                texts.append(p.text)
            with T.Tape() as tape:
                loss = _batched_seg_loss(
                    cfg, model, np.stack(images), np.stack(targets).astype(np.float32), texts, labels
                )
                losses.append(_step(model, opt, tape, loss, cosine_lr(step, total, cfg.lr, cfg.lr_floor), dict(trainable_seg)))
            trainable_seg = {
                **dict(model.text_encoder.parameters()),
                **dict(model.intent_head.parameters()),
                **dict(model.backbone.parameters()),
            }
            step += 1
        history.append(float(np.mean(losses)))
        if log:
            log(f"stage3 epoch {epoch + 1}/{cfg.epochs_stage3} loss {history[-1]:.5f}")
    return history


# -- checkpointing ---------------------------------------------------------------


CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: Segmenter, cfg: TrainConfig, class_names: list[str],
                    stages_completed: list[int], rng_state: dict | None = None) -> None:
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    index = {
        "version": CHECKPOINT_VERSION,
        "class_names": class_names,
        "stages_completed": stages_completed,
        "train_config": cfg.to_json(),
        "model": {
            "mode": model.mode,
            "use_canonicalizer": model.use_canonicalizer,
            "alpha": model.alpha,
            "embed_dim": model.backbone.embed_dim,
            "chans": list(model.backbone.chans),
            "canonicalizer": model.canonicalizer.config(),
            "intent_classes": model.intent_head.class_count,
        },
        "vocab": model.text_encoder.vocab.to_json(),
        "rng_state": rng_state,
        "params": {},
    }
    for name, tensor in model.parameters():
        rel = f"params/{name.replace('.', '_')}.fts"
        D.write_fts(path / rel, tensor.data.astype(np.float32))
        index["params"][name] = rel
    with open(path / "index.json", "w") as f:
        json.dump(index, f, indent=1, sort_keys=True)


def load_checkpoint(path) -> tuple[Segmenter, dict]:
    path = Path(path)
    with open(path / "index.json") as f:
        index = json.load(f)
    if index["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {index['version']}")
    cfg = TrainConfig.from_json(index["train_config"])
    vocab = Vocabulary.from_json(index["vocab"])
    mc = index["model"]
    canon_cfg = mc["canonicalizer"]
    canon = Canonicalizer(
        group_order=canon_cfg["group_order"],
        layers=canon_cfg["layers"],
        hidden=canon_cfg["hidden"],
        kernel=canon_cfg["kernel"],
        pool_to=canon_cfg["pool_to"],
        seed=cfg.seed + 1,
    )
    text = TextEncoderNet(vocab, dim=mc["embed_dim"], rng=np.random.default_rng(0))
    head = IntentionHead(mc["intent_classes"], dim=mc["embed_dim"], rng=np.random.default_rng(0))
    backbone = SegBackbone(chans=tuple(mc["chans"]), embed_dim=mc["embed_dim"], seed=0)
    model = Segmenter(canon, text, head, backbone, mode=mc["mode"],
                      use_canonicalizer=mc["use_canonicalizer"], alpha=mc["alpha"])
    arrays = {name: D.read_fts(path / rel) for name, rel in index["params"].items()}
    push_params(model, arrays)
    meta = {
        "class_names": index["class_names"],
        "stages_completed": index["stages_completed"],
        "train_config": cfg,
        "rng_state": index.get("rng_state"),
    }
    return model, meta


# -- evaluation -------------------------------------------------------------------


@dataclass
class EvalReport:
    rows: list[dict]
    summary: dict

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["sample_id", "prompt_kind", "class", "dice", "nsd"])
            for r in self.rows:
                writer.writerow([r["sample_id"], r["prompt_kind"], r["class"],
                                 f"{r['dice']:.6f}", f"{r['nsd']:.6f}"])

    def table(self) -> str:
        s = self.summary
        lines = [
            f"{'set':<14}{'kind':<20}{'dice':>8}{'nsd':>8}",
            f"{s['dataset']:<14}{'informed':<20}{s['dice_informed']:>8.3f}{s['nsd_informed']:>8.3f}",
            f"{'':<14}{'agnostic':<20}{s['dice_agnostic']:>8.3f}{s['nsd_agnostic']:>8.3f}",
            f"{'':<14}{'all':<20}{s['dice']:>8.3f}{s['nsd']:>8.3f}",
            f"intent accuracy {s['intent_accuracy']:.3f}  "
            f"absent->absent {s['absent_detect_rate']:.3f}  present->present {s['present_detect_rate']:.3f}",
        ]
        return "\n".join(lines)


def evaluate(model: Segmenter, dataset: ArrayDataset, bank: P.TemplateBank,
             seed: int = 0, nsd_tol: int = 2, name: str = "test") -> EvalReport:
    """Dice/NSD per (sample, prompt) plus intent and existence statistics.

    Informed prompts cover the present classes (scored) and the absent ones
    (existence only); agnostic prompts are scored against the winner extracted
    in the frame the model actually sees (canonicalized when enabled).
    """
    rng = np.random.default_rng([seed, 99])
    rows = []
    intent_hits = []
    absent_hits = []
    present_hits = []
    n_cls = len(dataset.class_names)
    for si in range(dataset.size):
        x = dataset.images[si]
        sid = dataset.sample_ids[si]
        for ci in range(n_cls):
            prompt = P.generate_informed(ci, bank, int(rng.integers(1 << 31)))
            res = model.segment(x, prompt)
            if dataset.present[si, ci]:
                gt = dataset.masks[si, ci]
                if model.use_canonicalizer and model.mode == "invariant":
                    gt = model.canonicalizer.action.act(G.inverse(res.g_hat), gt, mask=True)
                pred = res.mask()
                rows.append({
                    "sample_id": sid, "prompt_kind": "informed",
                    "class": dataset.class_names[ci],
                    "dice": L.dice_metric(pred, gt), "nsd": L.nsd_metric(pred, gt, nsd_tol),
                })
                intent_hits.append(int(np.argmax(res.intent_logits)) == ci)
                present_hits.append(res.present)
            else:
                absent_hits.append(not res.present)
        avail = {ci: dataset.masks[si, ci] for ci in range(n_cls) if dataset.present[si, ci]}
        if not avail:
            continue
        if model.use_canonicalizer:
            _, g_hat = model.canonicalizer.canonicalize_hard(x)
            frame_masks = {
                ci: model.canonicalizer.action.act(G.inverse(g_hat), m, mask=True)
                for ci, m in avail.items()
            }
        else:
            frame_masks = avail
        winners = P.extract_spatial_categories(frame_masks)
        for cat, winner in winners.items():
            prompt = P.generate_agnostic(cat, bank, int(rng.integers(1 << 31)))
            res = model.segment(x, prompt)
            gt = avail[winner]
            if model.use_canonicalizer and model.mode == "invariant":
                gt = frame_masks[winner]
            pred = res.mask()
            rows.append({
                "sample_id": sid, "prompt_kind": "agnostic",
                "class": dataset.class_names[winner],
                "dice": L.dice_metric(pred, gt), "nsd": L.nsd_metric(pred, gt, nsd_tol),
            })

    def mean_over(kind, key):
        vals = [r[key] for r in rows if r["prompt_kind"] == kind]
        return float(np.mean(vals)) if vals else float("nan")

    summary = {
        "dataset": name,
        "dice": float(np.mean([r["dice"] for r in rows])) if rows else float("nan"),
        "nsd": float(np.mean([r["nsd"] for r in rows])) if rows else float("nan"),
        "dice_informed": mean_over("informed", "dice"),
        "nsd_informed": mean_over("informed", "nsd"),
        "dice_agnostic": mean_over("agnostic", "dice"),
        "nsd_agnostic": mean_over("agnostic", "nsd"),
        "intent_accuracy": float(np.mean(intent_hits)) if intent_hits else float("nan"),
        "absent_detect_rate": float(np.mean(absent_hits)) if absent_hits else float("nan"),
        "present_detect_rate": float(np.mean(present_hits)) if present_hits else float("nan"),
    }
    return EvalReport(rows=rows, summary=summary)


# -- orchestration ------------------------------------------------------------------


def run_training(cfg: TrainConfig, train_set: ArrayDataset, bank: P.TemplateBank,
                 pool: list[P.Prompt] | None = None, model: Segmenter | None = None,
                 stages: tuple[int, ...] = (1, 2, 3), log=None) -> Segmenter:
    if model is None:
        model = build_model(cfg, bank)
    if pool is None and any(s in stages for s in (2, 3)):
        pool = build_prompt_pool(train_set, bank, cfg.seed)
    if 1 in stages:
        train_stage1(cfg, train_set, model, log=log)
    if 2 in stages:
        train_stage2(cfg, train_set, pool, model, log=log)
    if 3 in stages:
        train_stage3(cfg, train_set, pool, model, canonicalize=model.use_canonicalizer, log=log)
    return model


def run_ablation(cfg: TrainConfig, train_set: ArrayDataset, test_set: ArrayDataset,
                 trans_test: ArrayDataset, bank: P.TemplateBank, log=None) -> list[dict]:
    """Train full / -canonicalization(+aug) / -augmentation and report Dice/NSD."""
    pool = build_prompt_pool(train_set, bank, cfg.seed)
    results = []

    def record(tag, model):
        for ds, ds_name in ((test_set, "canonical"), (trans_test, "transformed")):
            rep = evaluate(model, ds, bank, seed=cfg.seed, name=ds_name)
            results.append({
                "variant": tag,
                "test_set": ds_name,
                "dice": rep.summary["dice"],
                "nsd": rep.summary["nsd"],
                "dice_informed": rep.summary["dice_informed"],
                "dice_agnostic": rep.summary["dice_agnostic"],
            })
            if log:
                log(f"{tag} on {ds_name}: dice {rep.summary['dice']:.3f} nsd {rep.summary['nsd']:.3f}")

    full = run_training(cfg, train_set, bank, pool=pool, stages=(1, 2, 3), log=log)
    record("full", full)

    no_canon = build_model(cfg, bank)
    no_canon.use_canonicalizer = False
    train_stage2(cfg, train_set, pool, no_canon, log=log)
    train_stage3(cfg, train_set, pool, no_canon, canonicalize=False, log=log)
    record("no_canonicalization", no_canon)

    no_aug = build_model(cfg, bank)
    no_aug.use_canonicalizer = False
    train_stage2(cfg, train_set, pool, no_aug, log=log)
    record("no_augmentation", no_aug)
    return results


def write_ablation_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "test_set", "dice", "nsd", "dice_informed", "dice_agnostic"])
        for r in rows:
            writer.writerow([r["variant"], r["test_set"], f"{r['dice']:.6f}", f"{r['nsd']:.6f}",
                             f"{r['dice_informed']:.6f}", f"{r['dice_agnostic']:.6f}"])
