"""Concept manifests, segmentation masks, prior sets and the synthetic two-shape set."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ArgumentError, ValidationError
from .guidance import SegMask

log = logging.getLogger(__name__)

DEFAULT_PRIOR_COUNT = 200


# --------------------------------------------------------------------------
# images and masks

def center_crop_box(w, h):
    s = min(w, h)
    left, top = (w - s) // 2, (h - s) // 2
    return left, top, left + s, top + s


def load_image(path, size: int) -> torch.Tensor:
    """RGB image center-cropped to a square, resized, scaled to [-1, 1], shape [3, size, size]."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        im = im.crop(center_crop_box(*im.size))
        if im.size != (size, size):
            im = im.resize((size, size), Image.BICUBIC)
        arr = np.asarray(im, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """[-1, 1] float images [n, 3, h, w] -> uint8 [n, h, w, 3]."""
    x = ((images.detach().float().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return x.permute(0, 2, 3, 1).cpu().numpy()


def save_image(path, image: torch.Tensor):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image[None])[0]).save(path)


def _mask_array(im: Image.Image) -> np.ndarray:
    if im.mode == "1":
        return np.asarray(im, dtype=np.float64)
    if im.mode in ("I;16", "I;16B", "I;16L"):
        return np.asarray(im, dtype=np.float64) / 65535.0
    if im.mode == "I":
        return np.asarray(im, dtype=np.float64) / 65535.0
    if im.mode == "L":
        return np.asarray(im, dtype=np.float64) / 255.0
    if im.mode in ("LA", "RGB", "RGBA"):
        arr = np.asarray(im.convert("RGB") if im.mode == "RGBA" else im, dtype=np.float64)
        if im.mode == "LA":
            return arr[..., 0] / 255.0
        if not (np.array_equal(arr[..., 0], arr[..., 1]) and np.array_equal(arr[..., 0], arr[..., 2])):
            raise ValidationError(f"mask has distinct color channels (mode {im.mode}); expected grayscale")
        return arr[..., 0] / 255.0
    raise ValidationError(f"unsupported mask mode {im.mode}")


def load_mask(path, concept_id=None, crop: bool = False) -> SegMask:
    """Grayscale mask scaled to [0, 1] by the integer range maximum."""
    with Image.open(path) as im:
        if crop:
            im = im.crop(center_crop_box(*im.size))
        arr = _mask_array(im)
    try:
        return SegMask(torch.from_numpy(arr), concept_id)
    except ArgumentError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def resize_mask(mask, size, mode: str = "soft") -> SegMask:
    """Resize to ``size`` (int or (H', W')).

    ``soft``: area averaging (replication when enlarging), values stay in [0, 1].
    ``binary``: the same area pass, then any coverage > 0 becomes 1.
    """
    if isinstance(size, int):
        size = (size, size)
    if min(size) <= 0:
        raise ArgumentError(f"target size must be positive, got {size}")
    if mode not in ("soft", "binary"):
        raise ArgumentError(f"unknown resize mode {mode!r}")
    concept = mask.concept_id if isinstance(mask, SegMask) else None
    v = mask.values if isinstance(mask, SegMask) else torch.as_tensor(np.asarray(mask))
    v = v.double()
    if tuple(v.shape[-2:]) != tuple(size):
        v = _area_resize(v, size)
    if mode == "binary":
        v = (v > 0).double()
    return SegMask(v.clamp(0, 1), concept)


def _area_resize(v: torch.Tensor, size):
    h, w = v.shape[-2:]
    H, W = size
    if h % H == 0 and w % W == 0:
        return F.avg_pool2d(v[None, None], (h // H, w // W))[0, 0]
    if H % h == 0 and W % w == 0:
        return v.repeat_interleave(H // h, 0).repeat_interleave(W // w, 1)
    return F.interpolate(v[None, None], size=size, mode="area")[0, 0]


def is_soft(mask: SegMask) -> bool:
    v = mask.values
    return bool(((v > 0) & (v < 1)).any())


# --------------------------------------------------------------------------
# manifest

@dataclass
class ConceptEntry:
    concept_id: str
    class_name: str
    identifier: str
    images: list
    masks: list


@dataclass
class ConceptManifest:
    concepts: list
    groups: list = field(default_factory=list)
    root: Path = Path(".")
    warnings: list = field(default_factory=list)
    image_size: int | None = None

    def concept(self, concept_id) -> ConceptEntry:
        for c in self.concepts:
            if c.concept_id == concept_id:
                return c
        raise ValidationError(f"unknown concept {concept_id!r}")

    def group_images(self, members):
        """Images shared by every member, with each member's aligned mask path."""
        entries = [self.concept(m) for m in members]
        shared = [p for p in entries[0].images if all(p in e.images for e in entries[1:])]
        return [(p, {e.concept_id: e.masks[e.images.index(p)] for e in entries}) for p in shared]

    def find_group(self, members):
        for g in self.groups:
            if list(g) == list(members) or set(g) == set(members):
                return list(g)
        return None

    def to_dict(self):
        return {
            "concepts": [
                {"concept_id": c.concept_id, "class_name": c.class_name, "identifier": c.identifier,
                 "images": [str(p) for p in c.images], "masks": [str(p) for p in c.masks]}
                for c in self.concepts
            ],
            "groups": [list(g) for g in self.groups],
        }


def _check_decodes(path, kind, violations):
    if not path.exists():
        violations.append(f"missing {kind} file: {path}")
        return None
    try:
        with Image.open(path) as im:
            im.load()
            return im.size
    except Exception as exc:  # PIL raises a zoo of types
        violations.append(f"unreadable {kind} file {path}: {exc}")
        return None


def load_manifest(path, vocab=None) -> ConceptManifest:
    """Parse and exhaustively validate a manifest; every violation is reported at once."""
    from .conditioning import IdentifierToken, toy_vocabulary

    path = Path(path)
    if not path.exists():
        raise ValidationError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"manifest {path} is not valid JSON: {exc}") from None
    root = path.parent
    vocab = vocab or toy_vocabulary()
    violations, warnings, concepts = [], [], []

    raw_concepts = raw.get("concepts") or []
    if not raw_concepts:
        violations.append("manifest lists no concepts")
    seen_ids, seen_idents = set(), set()
    for i, c in enumerate(raw_concepts):
        cid = c.get("concept_id")
        where = f"concept[{i}] {cid!r}"
        for key in ("concept_id", "class_name", "identifier"):
            if not c.get(key):
                violations.append(f"{where}: missing {key}")
        if cid in seen_ids:
            violations.append(f"{where}: duplicate concept_id")
        seen_ids.add(cid)
        ident = c.get("identifier")
        if ident:
            if ident in seen_idents:
                violations.append(f"{where}: identifier {ident!r} reused")
            seen_idents.add(ident)
            try:
                IdentifierToken.lookup(ident, vocab)
            except Exception as exc:
                violations.append(f"{where}: {exc}")
        images = [root / p for p in c.get("images") or []]
        masks = [root / p for p in c.get("masks") or []]
        if not images:
            violations.append(f"{where}: no images")
        if len(images) != len(masks):
            violations.append(f"{where}: {len(images)} images but {len(masks)} masks")
        for j, img in enumerate(images):
            isize = _check_decodes(img, "image", violations)
            if j >= len(masks):
                violations.append(f"{where}: image {img} has no mask")
                continue
            msize = _check_decodes(masks[j], "mask", violations)
            if isize and msize and isize != msize:
                violations.append(f"{where}: image {img} is {isize} but mask {masks[j]} is {msize}")
            if msize:
                try:
                    m = load_mask(masks[j], cid)
                    if is_soft(m):
                        warnings.append(f"{where}: soft mask {masks[j]}")
                except ValidationError as exc:
                    violations.append(f"{where}: mask {masks[j]}: {exc}")
        concepts.append(ConceptEntry(cid, c.get("class_name"), ident, images, masks))

    groups = []
    for g in raw.get("groups") or []:
        members = g.get("members") if isinstance(g, dict) else g
        members = list(members or [])
        if len(members) != 2:
            violations.append(f"group {members}: expected two members")
            continue
        unknown = [m for m in members if m not in seen_ids]
        if unknown:
            violations.append(f"group {members}: unknown concepts {unknown}")
            continue
        groups.append(members)

    manifest = ConceptManifest(concepts, groups, root, warnings, raw.get("image_size"))
    for g in groups:
        if not violations and not manifest.group_images(g):
            violations.append(f"group {g}: members share no images, so no image carries both masks")
    if violations:
        raise ValidationError(violations)
    return manifest


# --------------------------------------------------------------------------
# prior set

@dataclass
class PriorSet:
    class_name: str
    paths: list
    provenance: dict

    def __len__(self):
        return len(self.paths)


def prior_dir(root, class_name) -> Path:
    return Path(root) / "priors" / class_name.replace(" ", "_")


def generate_priors(backbone, class_name: str, count: int = DEFAULT_PRIOR_COUNT, seed: int = 0,
                    out_root=".", batch_size: int = 50) -> PriorSet:
    """Sample ``count`` images from the bare class-name prompt into ``priors/<class>/``."""
    from .backbone import check_capabilities, ddpm_sample
    from .conditioning import render_class_prompt

    if count < 0:
        raise ArgumentError("count must be nonnegative")
    out = prior_dir(out_root, class_name)
    out.mkdir(parents=True, exist_ok=True)
    provenance = {"backbone": getattr(backbone, "backbone_id", type(backbone).__name__),
                  "seed": seed, "count": count, "prompt": class_name}
    if hasattr(backbone, "cfg"):
        provenance["backbone_config"] = dict(vars(backbone.cfg))
    if count == 0:
        log.warning("prior count is 0; the prior-preservation term will be disabled")
        (out / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True))
        return PriorSet(class_name, [], provenance)

    check_capabilities(backbone).require("sampling_to_image")
    prompt = render_class_prompt(class_name, backbone.vocab, backbone.cfg.max_tokens)
    gen = torch.Generator().manual_seed(seed)
    paths = []
    for start in range(0, count, batch_size):
        n = min(batch_size, count - start)
        ids = prompt.tensor().expand(n, -1)
        images = ddpm_sample(backbone, ids, gen)
        for k in range(n):
            p = out / f"{start + k}.png"
            save_image(p, images[k])
            paths.append(p)
    (out / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True))
    return PriorSet(class_name, paths, provenance)


def load_prior_set(root, class_name) -> PriorSet:
    d = prior_dir(root, class_name)
    prov_path = d / "provenance.json"
    provenance = json.loads(prov_path.read_text()) if prov_path.exists() else {}
    paths = sorted(d.glob("*.png"), key=lambda p: int(p.stem) if p.stem.isdigit() else p.stem)
    return PriorSet(class_name, paths, provenance)


# --------------------------------------------------------------------------
# synthetic data

SHAPES = {
    "red_square": ("square", (220, 40, 40)),
    "blue_circle": ("circle", (40, 70, 220)),
}


def _draw(kind, size, cx, cy, r):
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "square":
        return (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def make_two_shape_dataset(out_dir, n_images: int = 5, size: int = 32, seed: int = 0,
                           radius=(4, 6)) -> Path:
    """Images holding one red square and one blue circle, with exact per-shape masks.

    Writes PNGs plus ``manifest.json`` (two concepts and their group) and
    returns the manifest path.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = {cid: {"images": [], "masks": []} for cid in SHAPES}
    for i in range(n_images):
        while True:
            placed = []
            for cid in SHAPES:
                r = int(rng.integers(radius[0], radius[1] + 1))
                cx, cy = (int(v) for v in rng.integers(r + 1, size - r - 1, size=2))
                placed.append((cid, cx, cy, r))
            (_, ax, ay, ar), (_, bx, by, br) = placed
            if max(abs(ax - bx), abs(ay - by)) > ar + br + 2:
                break
        bg = rng.integers(90, 150)
        img = np.full((size, size, 3), bg, dtype=np.uint8)
        for cid, cx, cy, r in placed:
            kind, color = SHAPES[cid]
            m = _draw(kind, size, cx, cy, r)
            img[m] = color
            mpath = f"masks/{cid}_{i}.png"
            Image.fromarray((m * 255).astype(np.uint8)).save(out / mpath)
            entries[cid]["masks"].append(mpath)
        ipath = f"images/{i}.png"
        Image.fromarray(img).save(out / ipath)
        for cid in SHAPES:
            entries[cid]["images"].append(ipath)
    manifest = {
        "image_size": size,
        "concepts": [
            {"concept_id": cid, "class_name": SHAPES[cid][0], "identifier": f"<v{k + 1}>", **entries[cid]}
            for k, cid in enumerate(SHAPES)
        ],
        "groups": [{"members": list(SHAPES)}],
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path
