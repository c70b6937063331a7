"""Image-fidelity and image-text alignment metrics with pluggable providers.

The mock providers are deterministic, dependency-free stand-ins so the
whole harness runs at desk scale; the CLIP/LPIPS adapters load real
networks when their packages and weights are present.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .conditioning import strip_identifiers
from .errors import ArgumentError, CapabilityError, ValidationError


# --------------------------------------------------------------------------
# providers

def _as_uint8(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    return arr


class EmbeddingProvider:
    name = "abstract"
    dim = 0

    def embed_images(self, images) -> np.ndarray:
        raise CapabilityError(f"{self.name} cannot embed images")

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        raise CapabilityError(f"{self.name} cannot embed text")

    def provenance(self) -> dict:
        return {"name": self.name, "dim": self.dim}


class MockEmbeddingProvider(EmbeddingProvider):
    """Fixed random projection of 8x8 color thumbnails; hashed bag of words for text."""

    name = "mock-embedding"

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((8 * 8 * 3 + 1, dim)) / math.sqrt(8 * 8 * 3 + 1)
        self._text_bias = rng.standard_normal(dim)

    def embed_images(self, images) -> np.ndarray:
        feats = []
        for img in images:
            arr = _as_uint8(img)
            thumb = Image.fromarray(arr).convert("RGB").resize((8, 8), Image.BOX)
            x = np.asarray(thumb, dtype=np.float64).ravel() / 127.5 - 1.0
            feats.append(np.append(x, 1.0))
        return np.stack(feats) @ self._proj

    def _word(self, word: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{word}".encode()).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], "little")).standard_normal(self.dim)

    def embed_texts(self, texts) -> np.ndarray:
        out = []
        for text in texts:
            v = self._text_bias.copy()
            for w in text.lower().split():
                v += self._word(w)
            out.append(v)
        return np.stack(out)

    def provenance(self):
        return {"name": self.name, "dim": self.dim, "seed": self.seed}


class DistanceProvider:
    name = "abstract"

    def distance(self, a, b) -> float:
        raise CapabilityError(f"{self.name} cannot compare images")

    def provenance(self) -> dict:
        return {"name": self.name}


class MockPerceptualDistance(DistanceProvider):
    """Channel-normalized multi-scale squared difference, averaged over scales.

    Symmetric with zero self-distance, like the perceptual metric it stands in for.
    """

    name = "mock-perceptual"

    def __init__(self, scales=(1, 2, 4)):
        self.scales = tuple(scales)

    def _features(self, img):
        arr = _as_uint8(img)
        base = Image.fromarray(arr).convert("RGB")
        feats = []
        for s in self.scales:
            w, h = base.size
            im = base.resize((max(1, w // s), max(1, h // s)), Image.BOX) if s > 1 else base
            x = np.asarray(im, dtype=np.float64) / 127.5 - 1.0
            x = x / (np.linalg.norm(x, axis=-1, keepdims=True) + 1e-10)
            feats.append(x)
        return feats

    def distance(self, a, b) -> float:
        fa, fb = self._features(a), self._features(b)
        return float(np.mean([np.mean(np.sum((x - y) ** 2, axis=-1)) for x, y in zip(fa, fb)]))

    def provenance(self):
        return {"name": self.name, "scales": list(self.scales)}


class ClipProvider(EmbeddingProvider):
    """CLIP image/text encoders from ``transformers`` (weights fetched by name)."""

    def __init__(self, model_name: str = "openai/clip-vit-large-patch14"):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise CapabilityError(f"CLIP provider needs transformers: {exc}") from None
        try:
            self.model = CLIPModel.from_pretrained(model_name).eval()
            self.processor = CLIPProcessor.from_pretrained(model_name)
        except Exception as exc:
            raise CapabilityError(f"cannot load CLIP weights {model_name!r}: {exc}") from None
        self._torch = torch
        self.name = f"clip:{model_name}"
        self.dim = self.model.config.projection_dim

    def embed_images(self, images):
        pil = [Image.fromarray(_as_uint8(i)).convert("RGB") for i in images]
        with self._torch.no_grad():
            inputs = self.processor(images=pil, return_tensors="pt")
            return self.model.get_image_features(**inputs).numpy().astype(np.float64)

    def embed_texts(self, texts):
        with self._torch.no_grad():
            inputs = self.processor(text=list(texts), return_tensors="pt", padding=True)
            return self.model.get_text_features(**inputs).numpy().astype(np.float64)


class LpipsProvider(DistanceProvider):
    """LPIPS distance from the ``lpips`` package."""

    def __init__(self, net: str = "alex"):
        try:
            import lpips
            import torch
        except ImportError as exc:
            raise CapabilityError(f"LPIPS provider needs the lpips package: {exc}") from None
        self._torch = torch
        self.model = lpips.LPIPS(net=net, verbose=False)
        self.name = f"lpips:{net}"

    def _tensor(self, img):
        x = self._torch.from_numpy(_as_uint8(img).astype(np.float32) / 127.5 - 1.0)
        return x.permute(2, 0, 1)[None]

    def distance(self, a, b):
        with self._torch.no_grad():
            return float(self.model(self._tensor(a), self._tensor(b)))


def build_providers(spec: dict | None = None) -> dict:
    """``{"embedding": "mock"|"clip", "distance": "mock"|"lpips", ...options}``."""
    spec = dict(spec or {})
    emb = spec.get("embedding", "mock")
    dist = spec.get("distance", "mock")
    if emb == "mock":
        embedding = MockEmbeddingProvider(spec.get("dim", 64), spec.get("seed", 0))
    elif emb == "clip":
        embedding = ClipProvider(spec.get("clip_model", "openai/clip-vit-large-patch14"))
    else:
        raise CapabilityError(f"unknown embedding provider {emb!r}")
    if dist == "mock":
        distance = MockPerceptualDistance()
    elif dist == "lpips":
        distance = LpipsProvider(spec.get("lpips_net", "alex"))
    else:
        raise CapabilityError(f"unknown distance provider {dist!r}")
    return {"embedding": embedding, "distance": distance}


# --------------------------------------------------------------------------
# metrics

def _matrix(vectors, name):
    m = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if m.size == 0 or m.shape[0] == 0:
        raise ArgumentError(f"{name} is empty")
    if not np.isfinite(m).all():
        raise ArgumentError(f"{name} contains non-finite values")
    norms = np.linalg.norm(m, axis=1)
    if (norms == 0).any():
        raise ArgumentError(f"{name} contains a zero vector")
    return m / norms[:, None]


def cosine_matrix(a, b):
    a, b = _matrix(a, "first set"), _matrix(b, "second set")
    if a.shape[1] != b.shape[1]:
        raise ArgumentError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    return np.clip(a @ b.T, -1.0, 1.0)


def clip_i(generated, real) -> float:
    """Mean cosine similarity over every (generated, real) pair."""
    return float(cosine_matrix(generated, real).mean())


def clip_t(image_embeddings, prompt: str, identifiers, text_embedder: EmbeddingProvider) -> float:
    """Mean cosine between each image and the prompt with identifiers removed."""
    stripped = strip_identifiers(prompt, identifiers)
    text = text_embedder.embed_texts([stripped])
    return float(cosine_matrix(image_embeddings, text).mean())


def polynomial_kernel(x, y, degree: int = 3):
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** degree


def kid(features_x, features_y, degree: int = 3) -> float:
    """Unbiased squared MMD with the cubic polynomial kernel."""
    x = np.atleast_2d(np.asarray(features_x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(features_y, dtype=np.float64))
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise ArgumentError(f"KID needs at least two samples per set, got {m} and {n}")
    if x.shape[1] != y.shape[1]:
        raise ArgumentError(f"feature dimension mismatch {x.shape[1]} vs {y.shape[1]}")
    kxx = polynomial_kernel(x, x, degree)
    kyy = polynomial_kernel(y, y, degree)
    kxy = polynomial_kernel(x, y, degree)
    within_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    within_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(within_x + within_y - 2.0 * kxy.mean())


def kid_subsets(features_x, features_y, subset_size: int = 100, n_subsets: int = 10, seed: int = 0):
    """Mean and std of :func:`kid` over random equal-size subsets (for large sets)."""
    x, y = np.asarray(features_x), np.asarray(features_y)
    size = min(subset_size, len(x), len(y))
    rng = np.random.default_rng(seed)
    vals = [kid(x[rng.choice(len(x), size, replace=False)], y[rng.choice(len(y), size, replace=False)])
            for _ in range(n_subsets)]
    return float(np.mean(vals)), float(np.std(vals))


def lpips_diversity(images, provider: DistanceProvider | None) -> float:
    """Mean provider distance over all unordered image pairs."""
    if provider is None:
        raise CapabilityError("no perceptual distance provider configured")
    images = list(images)
    if len(images) < 2:
        raise ArgumentError("diversity needs at least two images")
    return float(np.mean([provider.distance(a, b) for a, b in combinations(images, 2)]))


# --------------------------------------------------------------------------
# report

METRIC_COLUMNS = ("clip_i", "clip_t", "kid", "lpips_diversity")


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def validate(self):
        for r in self.rows:
            for k in ("clip_i", "clip_t"):
                if not -1.0 <= r[k] <= 1.0:
                    raise ValidationError(f"{r['concept']}: {k}={r[k]} outside [-1, 1]")
            if r["lpips_diversity"] < 0:
                raise ValidationError(f"{r['concept']}: negative diversity")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["concept", "kind", "n_generated", "n_real", *METRIC_COLUMNS])
        for r in self.rows:
            w.writerow([r["concept"], r["kind"], r["n_generated"], r["n_real"],
                        *(f"{r[c]:.6f}" for c in METRIC_COLUMNS)])
        return buf.getvalue()

    def to_markdown(self, title: str = "Evaluation") -> str:
        lines = [f"# {title}", ""]
        for key, value in sorted(self.provenance.items()):
            lines.append(f"- {key}: `{json.dumps(value, sort_keys=True)}`")
        lines += ["", "| concept | CLIP-I | CLIP-T | KID | LPIPS |", "|---|---|---|---|---|"]
        for r in self.rows:
            lines.append(f"| {r['concept']} | {r['clip_i']:.4f} | {r['clip_t']:.4f} | "
                         f"{r['kid']:.4f} | {r['lpips_diversity']:.4f} |")
        for kind in ("single", "multi"):
            sub = [r for r in self.rows if r["kind"] == kind]
            if len(sub) > 1:
                means = [np.mean([r[c] for r in sub]) for c in METRIC_COLUMNS]
                lines.append(f"| mean ({kind}) | " + " | ".join(f"{m:.4f}" for m in means) + " |")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str = "report"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.csv").write_text(self.to_csv())
        (out / f"{stem}.md").write_text(self.to_markdown())
        return out / f"{stem}.csv", out / f"{stem}.md"


def _read(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def _sorted_numeric(paths):
    return sorted(paths, key=lambda p: (int(p.stem) if p.stem.isdigit() else 1 << 30, p.name))


def evaluate(run_dir, manifest, providers: dict) -> MetricReport:
    """Score every ``<concept>/<prompt_idx>/<sample_idx>.png`` cell under ``run_dir``.

    ``prompts.json`` (written alongside the samples) supplies prompt text
    and identifiers; real images come from the manifest.
    """
    run = Path(run_dir)
    if not run.is_dir():
        raise ValidationError(f"run directory not found: {run}")
    index_path = run / "prompts.json"
    if not index_path.exists():
        raise ValidationError(f"{run} has no prompts.json; generate samples first")
    index = json.loads(index_path.read_text())
    emb: EmbeddingProvider = providers["embedding"]
    dist = providers.get("distance")

    rows = []
    for name in sorted(index):
        cell = index[name]
        cdir = run / name
        if not cdir.is_dir():
            raise ValidationError(f"missing sample directory {cdir}")
        concept_ids = cell["concepts"]
        if len(concept_ids) == 1:
            real_paths = manifest.concept(concept_ids[0]).images
        else:
            real_paths = [p for p, _ in manifest.group_images(concept_ids)]
        real = [_read(p) for p in real_paths]
        real_emb = emb.embed_images(real)

        gen_emb, clip_ts, diversities = [], [], []
        for pi in sorted(cell["prompts"], key=int):
            pdir = cdir / pi
            paths = _sorted_numeric(pdir.glob("*.png"))
            if not paths:
                raise ValidationError(f"no samples in {pdir}")
            imgs = [_read(p) for p in paths]
            e = emb.embed_images(imgs)
            gen_emb.append(e)
            clip_ts.append(clip_t(e, cell["prompts"][pi], cell["identifiers"], emb))
            if len(imgs) >= 2:
                diversities.append(lpips_diversity(imgs, dist))
        gen = np.concatenate(gen_emb)
        rows.append({
            "concept": name,
            "kind": "single" if len(concept_ids) == 1 else "multi",
            "n_generated": int(gen.shape[0]),
            "n_real": len(real),
            "clip_i": clip_i(gen, real_emb),
            "clip_t": float(np.mean(clip_ts)),
            "kid": kid(gen, real_emb),
            "lpips_diversity": float(np.mean(diversities)) if diversities else float("nan"),
        })
    provenance = {
        "embedding_provider": emb.provenance(),
        "distance_provider": dist.provenance() if dist else None,
        "kid_features": emb.name,
        "prompt_bank": "bundled stand-in prompts (the original evaluation prompts are unpublished)",
    }
    report = MetricReport(rows, provenance)
    report.validate()
    return report
