"""Deterministic free-form query generation.

Anatomy-informed queries are rendered from class-keyed sentence templates with
organ-synonym and symptom vocabularies; anatomy-agnostic queries come from six
spatial categories extracted from ground-truth masks. An optional external
paraphrase provider can rewrite any prompt over HTTP; every failure degrades
back to the template text.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import urllib.error
import urllib.request
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import ShapeMismatch

logger = logging.getLogger(__name__)

ENV_PARAPHRASE_URL = "FLANS_PARAPHRASE_URL"
ENV_PARAPHRASE_TOKEN = "FLANS_PARAPHRASE_TOKEN"


class EmptyMaskSet(ValueError):
    """Spatial category extraction needs at least one non-empty mask."""


class UnknownClass(KeyError):
    """Class id not covered by the template bank."""


class SpatialCategory(enum.Enum):
    largest = "largest"
    smallest = "smallest"
    left_most = "left_most"
    right_most = "right_most"
    upmost = "upmost"
    bottom = "bottom"


KIND_INFORMED = "anatomy_informed"
KIND_AGNOSTIC = "anatomy_agnostic"


@dataclass(frozen=True)
class Prompt:
    text: str
    kind: str
    target_class: int | None = None
    spatial_category: SpatialCategory | None = None
    source: str = "template"
    sample_id: str | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.kind == KIND_INFORMED:
            if self.target_class is None or self.spatial_category is not None:
                raise ValueError("informed prompts carry a target class and no category")
        elif self.kind == KIND_AGNOSTIC:
            if self.spatial_category is None:
                raise ValueError("agnostic prompts carry a spatial category")
        else:
            raise ValueError(f"unknown prompt kind {self.kind!r}")
        if self.source not in ("template", "external_provider"):
            raise ValueError(f"unknown prompt source {self.source!r}")


# -- spatial category extraction ------------------------------------------------


def extract_spatial_categories(masks: dict[int, np.ndarray]) -> dict[SpatialCategory, int]:
    """Winner class per spatial category; ties go to the lower class id.

    largest/smallest by pixel count; left/right by extreme bbox column edges;
    upmost/bottom by extreme bbox row edges. Empty masks are not candidates.
    """
    if not masks:
        raise EmptyMaskSet("no masks given")
    shapes = {np.asarray(m).shape for m in masks.values()}
    if len(shapes) > 1:
        raise ShapeMismatch(f"masks disagree on shape: {sorted(shapes)}")
    stats = {}
    for ci, m in masks.items():
        m = np.asarray(m).astype(bool)
        if not m.any():
            continue
        ys, xs = np.nonzero(m)
        stats[ci] = {
            "area": int(m.sum()),
            "top": int(ys.min()),
            "bottom": int(ys.max()),
            "left": int(xs.min()),
            "right": int(xs.max()),
        }
    if not stats:
        raise EmptyMaskSet("all masks are empty")
    ids = sorted(stats)
    return {
        SpatialCategory.largest: max(ids, key=lambda c: (stats[c]["area"], -c)),
        SpatialCategory.smallest: min(ids, key=lambda c: (stats[c]["area"], c)),
        SpatialCategory.left_most: min(ids, key=lambda c: (stats[c]["left"], c)),
        SpatialCategory.right_most: max(ids, key=lambda c: (stats[c]["right"], -c)),
        SpatialCategory.upmost: min(ids, key=lambda c: (stats[c]["top"], c)),
        SpatialCategory.bottom: max(ids, key=lambda c: (stats[c]["bottom"], -c)),
    }


# -- template bank ----------------------------------------------------------------

# name -> (synonym terms, symptom terms); every term here counts as class vocabulary
_ORGAN_VOCAB: dict[str, tuple[list[str], list[str]]] = {
    "liver": (["hepatic"], ["cirrhosis", "hepatomegaly", "elevated liver enzymes"]),
    "kidney": (["renal"], ["hydronephrosis", "renal calculi"]),
    "right kidney": (["right renal"], ["right-sided hydronephrosis", "right renal calculi"]),
    "left kidney": (["left renal"], ["left-sided hydronephrosis", "left renal calculi"]),
    "spleen": (["splenic"], ["splenomegaly", "splenic infarct"]),
    "pancreas": (["pancreatic"], ["pancreatitis", "pancreatic duct dilation"]),
    "gallbladder": (["biliary sac"], ["cholecystitis", "gallstones"]),
    "stomach": (["gastric"], ["gastritis", "gastric distension"]),
    "esophagus": (["esophageal"], ["esophagitis", "esophageal thickening"]),
    "duodenum": (["duodenal"], ["duodenal thickening", "duodenal ulcer"]),
    "colon": (["colonic"], ["colitis", "colonic distension"]),
    "intestine": (["bowel"], ["bowel obstruction", "intestinal inflammation"]),
    "rectum": (["rectal"], ["rectal thickening", "proctitis"]),
    "bladder": (["vesical"], ["cystitis", "bladder wall thickening"]),
    "aorta": (["aortic"], ["aortic aneurysm", "aortic dilation"]),
    "inferior vena cava": (["caval", "ivc"], ["caval thrombus", "ivc compression"]),
    "right adrenal gland": (["right adrenal"], ["right adrenal nodule"]),
    "left adrenal gland": (["left adrenal"], ["left adrenal nodule"]),
    "lung": (["pulmonary"], ["pneumonia", "pulmonary consolidation"]),
    "prostate": (["prostatic"], ["prostatic enlargement"]),
    "seminal vesicles": (["seminal"], ["seminal vesicle asymmetry"]),
    "left head of femur": (["left femoral head"], ["left femoral head necrosis"]),
    "right head of femur": (["right femoral head"], ["right femoral head necrosis"]),
    "portal vein and splenic vein": (["portosplenic veins"], ["portal vein thrombosis"]),
}

_INFORMED_TEMPLATES = [
    "Please segment the {organ} in this {modality}.",
    "Highlight the {organ} for closer review.",
    "I need an outline of the {organ} on this {modality}.",
    "Mark the {organ} so it can be measured.",
    "Could you isolate the {organ} in this image?",
    "Delineate the {organ} boundaries for the report.",
    "Show me exactly where the {organ} sits on this {modality}.",
    "Findings suggest {symptom}; segment the organ involved on this {modality}.",
    "Given signs of {symptom}, outline the relevant region in this image.",
    "Contour the {organ} before treatment planning.",
    "Trace the {organ} so its volume can be estimated.",
    "The {symptom} workup needs the responsible organ segmented.",
]

_AGNOSTIC_TEMPLATES = [
    "Segment the {pos} region in this {modality}.",
    "Highlight the {pos} structure visible here.",
    "Outline the {pos} area of this {modality}.",
    "Mark whatever appears {pos} in the image.",
    "I cannot name it, but please segment the {pos} region.",
    "Trace the {pos} object in this {modality}.",
    "Show the {pos} area for teaching purposes.",
    "Please isolate the {pos} region on this image.",
    "Delineate the {pos} structure; its name is unknown to me.",
    "Contour the {pos} part of the {modality}.",
    "Select the {pos} region so a student can study it.",
]

_CATEGORY_LEXICON: dict[SpatialCategory, list[str]] = {
    SpatialCategory.largest: ["largest", "biggest", "most extensive", "dominant-sized"],
    SpatialCategory.smallest: ["smallest", "tiniest", "most compact", "least extensive"],
    SpatialCategory.left_most: ["left-most", "leftmost", "far-left", "furthest-left"],
    SpatialCategory.right_most: ["right-most", "rightmost", "far-right", "furthest-right"],
    SpatialCategory.upmost: ["topmost", "upmost", "uppermost", "highest"],
    SpatialCategory.bottom: ["bottom-most", "lowest", "bottommost", "deepest"],
}

_MODALITIES = ["CT scan", "scan", "image", "study"]


@dataclass
class TemplateBank:
    """Sentence templates plus per-class vocabularies; all sampling is seeded."""

    class_names: list[str]
    vocab: dict[str, tuple[list[str], list[str]]] = field(
        default_factory=lambda: dict(_ORGAN_VOCAB)
    )
    informed_templates: list[str] = field(default_factory=lambda: list(_INFORMED_TEMPLATES))
    agnostic_templates: list[str] = field(default_factory=lambda: list(_AGNOSTIC_TEMPLATES))
    category_lexicon: dict[SpatialCategory, list[str]] = field(
        default_factory=lambda: {k: list(v) for k, v in _CATEGORY_LEXICON.items()}
    )
    modalities: list[str] = field(default_factory=lambda: list(_MODALITIES))

    def __post_init__(self):
        missing = [n for n in self.class_names if n not in self.vocab]
        if missing:
            raise UnknownClass(f"no vocabulary for classes {missing}")
        if len(self.informed_templates) < 10 or len(self.agnostic_templates) < 10:
            raise ValueError("banks require at least 10 templates per prompt kind")
        for cat in SpatialCategory:
            if not self.category_lexicon.get(cat):
                raise ValueError(f"no lexicon for category {cat.value}")

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def class_terms(self, class_id: int) -> list[str]:
        """Name + synonyms + symptom terms; all count as class vocabulary."""
        name = self._name(class_id)
        syns, symptoms = self.vocab[name]
        return [name, *syns, *symptoms]

    def all_class_terms(self) -> list[str]:
        """Vocabulary of every class in the bank (for leak scans)."""
        out = []
        for name, (syns, symptoms) in self.vocab.items():
            out.extend([name, *syns, *symptoms])
        return out

    def _name(self, class_id: int) -> str:
        if not 0 <= class_id < len(self.class_names):
            raise UnknownClass(f"class id {class_id} outside bank of {len(self.class_names)}")
        return self.class_names[class_id]

    def texts_for_vocabulary(self) -> list[str]:
        """Every string fragment a rendered prompt can contain."""
        out = list(self.informed_templates) + list(self.agnostic_templates)
        out += self.all_class_terms()
        out += self.modalities
        for terms in self.category_lexicon.values():
            out += terms
        return out


def default_bank(class_names: list[str] | None = None) -> TemplateBank:
    """Bank over the full 24-organ vocabulary, or a named subset of it."""
    names = class_names if class_names is not None else list(_ORGAN_VOCAB)
    return TemplateBank(class_names=list(names))


def generate_informed(class_id: int, bank: TemplateBank, seed: int) -> Prompt:
    """Deterministic anatomy-informed prompt; always names the organ or a synonym."""
    name = bank._name(class_id)
    syns, symptoms = bank.vocab[name]
    rng = np.random.default_rng([seed, class_id, 17])
    template = bank.informed_templates[int(rng.integers(len(bank.informed_templates)))]
    organ = [name, *syns][int(rng.integers(len(syns) + 1))]
    symptom = symptoms[int(rng.integers(len(symptoms)))] if symptoms else name
    modality = bank.modalities[int(rng.integers(len(bank.modalities)))]
    text = template.format(organ=organ, symptom=symptom, modality=modality)
    return Prompt(text=text, kind=KIND_INFORMED, target_class=class_id, seed=seed)


def generate_agnostic(category: SpatialCategory, bank: TemplateBank, seed: int) -> Prompt:
    """Deterministic anatomy-agnostic prompt; mentions position/size, never organs."""
    cat_index = list(SpatialCategory).index(category)
    rng = np.random.default_rng([seed, cat_index, 91])
    template = bank.agnostic_templates[int(rng.integers(len(bank.agnostic_templates)))]
    pos = bank.category_lexicon[category][int(rng.integers(len(bank.category_lexicon[category])))]
    modality = bank.modalities[int(rng.integers(len(bank.modalities)))]
    text = template.format(pos=pos, modality=modality)
    return Prompt(text=text, kind=KIND_AGNOSTIC, spatial_category=category, seed=seed)


# -- external paraphrase provider -------------------------------------------------


@dataclass
class ProviderConfig:
    url: str | None = None
    token: str | None = None
    timeout: float = 10.0

    @classmethod
    def from_env(cls) -> "ProviderConfig":
        return cls(
            url=os.environ.get(ENV_PARAPHRASE_URL) or None,
            token=os.environ.get(ENV_PARAPHRASE_TOKEN) or None,
        )


def paraphrase_external(prompt: Prompt, config: ProviderConfig | None = None) -> Prompt:
    """Rewrite the prompt text via the configured endpoint.

    Degrades to the input prompt (with a logged warning) on any transport or
    format failure; metadata other than text/source is always preserved.
    """
    if config is None:
        config = ProviderConfig.from_env()
    if not config.url:
        return prompt
    body = json.dumps({"text": prompt.text}).encode()
    req = urllib.request.Request(
        config.url, data=body, headers={"Content-Type": "application/json"}, method="POST"
    )
    if config.token:
        req.add_header("Authorization", f"Bearer {config.token}")
    try:
        with urllib.request.urlopen(req, timeout=config.timeout) as resp:
            doc = json.loads(resp.read().decode())
        new_text = doc["text"]
        if not isinstance(new_text, str) or not new_text.strip():
            raise ValueError("provider returned empty text")
    except Exception as err:  # noqa: BLE001 - degrade-to-template contract
        logger.warning("paraphrase provider failed (%s); keeping template text", err)
        return prompt
    return replace(prompt, text=new_text, source="external_provider")


# -- JSONL serialization -----------------------------------------------------------


def prompt_to_json(p: Prompt) -> dict:
    return {
        "text": p.text,
        "kind": p.kind,
        "target_class": p.target_class,
        "spatial_category": p.spatial_category.value if p.spatial_category else None,
        "sample_id": p.sample_id,
        "seed": p.seed,
    }


def prompt_from_json(doc: dict) -> Prompt:
    cat = doc.get("spatial_category")
    return Prompt(
        text=doc["text"],
        kind=doc["kind"],
        target_class=doc.get("target_class"),
        spatial_category=SpatialCategory(cat) if cat else None,
        sample_id=doc.get("sample_id"),
        seed=doc.get("seed"),
    )


def write_prompts_jsonl(path, prompts) -> None:
    with open(path, "w") as f:
        for p in prompts:
            f.write(json.dumps(prompt_to_json(p)) + "\n")


def read_prompts_jsonl(path) -> list[Prompt]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(prompt_from_json(json.loads(line)))
    return out


def leaks_class_vocabulary(text: str, bank: TemplateBank) -> str | None:
    """First class term appearing in `text` (case-insensitive substring), else None."""
    low = text.lower()
    for term in bank.all_class_terms():
        if term.lower() in low:
            return term
    return None
