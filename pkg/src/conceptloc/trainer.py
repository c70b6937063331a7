"""Fine-tuning loop, sampling with attention probes, and localization measurement."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import yaml

from .attention import (DEFAULT_MAP_SIZE, AttentionRecord, RunningMapMean, identifier_map,
                        register_capture, save_probe)
from .backbone import (ParameterSetSelector, add_noise, build_backbone, check_capabilities,
                       ddpm_sample, load_checkpoint, load_snapshot, save_checkpoint,
                       select_trainable, snapshot, trainable_parameters, weight_change_rate)
from .conditioning import (PAIR_TEMPLATE, SINGLE_TEMPLATE, IdentifierToken, PromptTemplate,
                           RenderedPrompt, check_distinct, init_identifier_embedding,
                           load_prompt_bank, render_class_prompt, render_prompt)
from .datasets import ConceptManifest, load_image, load_mask, load_prior_set, resize_mask, save_image
from .errors import ConfigurationError, TrainingStepError
from .guidance import (GUIDANCE_MODES, LossBreakdown, denoise_loss, inverse_mask,
                       multi_concept_attn_loss, prior_loss, total_loss)

log = logging.getLogger(__name__)

# Fields that never change the trained parameters or generated outputs.
NON_SEMANTIC_FIELDS = ("checkpoint_every",)


@dataclass
class TrainConfig:
    steps: int = 400
    learning_rate: float = 1e-5
    batch_size: int = 2
    lambda_prior: float = 1.0
    delta_attn: float = 1.0
    guidance_mode: str = "hard"
    selector: str = "KV"
    include_text_encoder: bool = True
    capture_factors: tuple = (2, 4, 8)
    attn_size: int = DEFAULT_MAP_SIZE
    seed: int = 0
    weight_decay: float = 1e-2
    manifest: str | None = None
    concepts: list | None = None
    priors: str | None = None
    backbone: dict = field(default_factory=dict)
    base_checkpoint: str | None = None
    init_source_id: int | None = None
    checkpoint_every: int = 100
    curve_every: int = 0

    def __post_init__(self):
        if self.steps <= 0:
            raise ConfigurationError("steps must be positive")
        if self.batch_size <= 0:
            raise ConfigurationError("batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.guidance_mode not in GUIDANCE_MODES:
            raise ConfigurationError(f"guidance_mode must be one of {GUIDANCE_MODES}")
        self.selector = ParameterSetSelector(self.selector, self.include_text_encoder).set_id
        self.capture_factors = tuple(sorted(int(f) for f in self.capture_factors))
        if isinstance(self.concepts, str):
            self.concepts = [self.concepts]

    @property
    def effective_delta(self) -> float:
        return 0.0 if self.guidance_mode == "none" else self.delta_attn

    @property
    def parameter_selector(self) -> ParameterSetSelector:
        return ParameterSetSelector(self.selector, self.include_text_encoder)

    @classmethod
    def from_mapping(cls, data: dict) -> "TrainConfig":
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "TrainConfig":
        """YAML or JSON config; relative paths resolve against the file's directory."""
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        data = yaml.safe_load(path.read_text()) or {}
        data.update(overrides or {})
        for key in ("manifest", "priors", "base_checkpoint"):
            if data.get(key) and not Path(data[key]).is_absolute():
                data[key] = str((path.parent / data[key]).resolve())
        return cls.from_mapping(data)

    def to_dict(self):
        d = asdict(self)
        d["capture_factors"] = list(self.capture_factors)
        return d

    def config_hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in NON_SEMANTIC_FIELDS}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class ConceptBatch:
    images: torch.Tensor
    token_ids: torch.Tensor
    positions: dict
    masks: dict
    inverse: dict


@dataclass
class PriorBatch:
    images: torch.Tensor
    token_ids: torch.Tensor


@dataclass
class TrainStepResult:
    step: int
    losses: LossBreakdown
    t: int
    wall_time: float


@dataclass
class TrainingData:
    """Everything a run draws batches from, loaded once and validated."""

    identifiers: list
    classes: list
    prompt: RenderedPrompt
    images: torch.Tensor
    masks: dict
    inverse: dict
    prior_images: torch.Tensor | None
    prior_token_ids: torch.Tensor | None
    concept_ids: list

    def concept_batch(self, idx) -> ConceptBatch:
        n = len(idx)
        ids = self.prompt.tensor().expand(n, -1)
        return ConceptBatch(
            self.images[idx], ids, dict(self.prompt.positions),
            {k: v[idx] for k, v in self.masks.items()},
            {k: v[idx] for k, v in self.inverse.items()},
        )

    def prior_batch(self, idx) -> PriorBatch | None:
        if self.prior_images is None:
            return None
        return PriorBatch(self.prior_images[idx], self.prior_token_ids[idx])


def _resolve_concepts(config: TrainConfig, manifest: ConceptManifest) -> list:
    if config.concepts:
        ids = list(config.concepts)
    elif manifest.groups:
        ids = list(manifest.groups[0])
    elif len(manifest.concepts) == 1:
        ids = [manifest.concepts[0].concept_id]
    else:
        raise ConfigurationError("manifest has several concepts and no group; set `concepts`")
    if len(ids) not in (1, 2):
        raise ConfigurationError("train on one concept or on one two-concept group")
    for cid in ids:
        manifest.concept(cid)
    if len(ids) == 2 and manifest.find_group(ids) is None:
        raise ConfigurationError(f"concepts {ids} are not a manifest group")
    return ids


def prepare_training_data(config: TrainConfig, manifest: ConceptManifest, backbone) -> TrainingData:
    ids = _resolve_concepts(config, manifest)
    entries = [manifest.concept(c) for c in ids]
    size = backbone.latent_spec.pixel_size[0]
    bindings = [(e.identifier, e.class_name) for e in entries]
    template = SINGLE_TEMPLATE if len(ids) == 1 else PAIR_TEMPLATE
    prompt = render_prompt(template, bindings, backbone.vocab, backbone.cfg.max_tokens)

    if len(ids) == 1:
        pairs = [(p, {ids[0]: m}) for p, m in zip(entries[0].images, entries[0].masks)]
    else:
        pairs = manifest.group_images(ids)
    images = torch.stack([load_image(p, size) for p, _ in pairs])
    masks, inverse = {}, {}
    for e in entries:
        soft = [resize_mask(load_mask(mp[e.concept_id], e.concept_id, crop=True),
                            config.attn_size, "soft").values for _, mp in pairs]
        stacked = torch.stack(soft).float()
        masks[e.identifier] = stacked
        inverse[e.identifier] = inverse_mask(stacked)

    prior_images = prior_ids = None
    classes = [e.class_name for e in entries]
    if config.lambda_prior != 0:
        if not config.priors:
            raise ConfigurationError("lambda_prior > 0 but no prior set configured")
        imgs, tok = [], []
        for cls in dict.fromkeys(classes):
            ps = load_prior_set(config.priors, cls)
            if len(ps) == 0:
                raise ConfigurationError(f"lambda_prior > 0 but the prior set for {cls!r} is empty")
            cls_ids = render_class_prompt(cls, backbone.vocab, backbone.cfg.max_tokens).tensor()
            for p in ps.paths:
                imgs.append(load_image(p, size))
                tok.append(cls_ids)
        prior_images, prior_ids = torch.stack(imgs), torch.stack(tok)
    return TrainingData([e.identifier for e in entries], classes, prompt, images, masks, inverse,
                        prior_images, prior_ids, ids)


def _concept_records(records: Sequence[AttentionRecord], n: int):
    return [AttentionRecord(r.layer, r.map[:n], r.grid, r.timestep) for r in records]


def training_step(model, optimizer, batch: ConceptBatch, prior: PriorBatch | None,
                  config: TrainConfig, generator: torch.Generator, capture=None, step: int = 0,
                  map_hook: Callable | None = None) -> TrainStepResult:
    """One optimization step of the weighted objective.

    Concept and prior images share one forward pass; attention maps are
    taken from the concept rows only.  ``map_hook(identifier, agg)`` may
    replace an aggregated map before the loss (a test hook).
    """
    start = time.perf_counter()
    T = model.schedule.T
    t = int(torch.randint(1, T + 1, (1,), generator=generator))
    use_prior = prior is not None and config.lambda_prior != 0
    x = torch.cat([batch.images, prior.images]) if use_prior else batch.images
    ids = torch.cat([batch.token_ids, prior.token_ids]) if use_prior else batch.token_ids
    eps = torch.randn(x.shape, generator=generator)
    z_t = add_noise(model.encode(x), t, eps, model.schedule)

    if capture is not None:
        capture.clear()
    pred = model(z_t, t, ids)
    n = batch.images.shape[0]
    l_denoise = denoise_loss(pred[:n], eps[:n])
    l_prior = prior_loss(pred[n:], eps[n:]) if use_prior else torch.zeros(())

    mode = config.guidance_mode
    if mode != "none":
        if capture is None:
            raise ConfigurationError("guidance requires a registered attention capture")
        records = _concept_records(capture.records, n)
        missing = [i for i in batch.positions if i not in batch.masks]
        if missing:
            raise ConfigurationError(f"no mask for trained identifiers {missing}")
        pairs = []
        for ident, pos in batch.positions.items():
            agg = identifier_map(records, pos, config.attn_size)
            if map_hook is not None:
                agg = map_hook(ident, agg)
            pairs.append((agg, batch.masks[ident], batch.inverse[ident]))
        l_attn = multi_concept_attn_loss(pairs, mode)
    else:
        l_attn = torch.zeros(())

    losses = total_loss(l_denoise, l_prior, l_attn,
                        config.lambda_prior if use_prior else 0.0, config.effective_delta)
    optimizer.zero_grad(set_to_none=True)
    losses.tensor.backward()
    optimizer.step()
    if capture is not None:
        capture.clear()
    return TrainStepResult(step, losses, t, time.perf_counter() - start)


@dataclass
class FinetuneResult:
    checkpoint: Path
    log_path: Path
    weight_change: dict
    out_dir: Path


class Trainer:
    """Owns the model, optimizer, random streams and capture buffer for one run."""

    def __init__(self, config: TrainConfig, manifest: ConceptManifest, backbone=None):
        self.config = config
        if backbone is None:
            if config.base_checkpoint:
                backbone, _ = load_checkpoint(config.base_checkpoint)
            else:
                backbone = build_backbone(config.backbone)
        report = check_capabilities(backbone)
        report.require("training")
        if config.guidance_mode != "none":
            report.require("guidance")
        self.model = backbone
        self.data = prepare_training_data(config, manifest, backbone)
        self.identifiers = [IdentifierToken.lookup(i, backbone.vocab, config.init_source_id)
                            for i in self.data.identifiers]
        check_distinct(self.identifiers)
        select_trainable(self.model, config.parameter_selector)
        self.optimizer = torch.optim.AdamW(trainable_parameters(self.model), lr=config.learning_rate,
                                           weight_decay=config.weight_decay)
        self.generator = torch.Generator().manual_seed(config.seed)
        self.rng = np.random.default_rng(config.seed)
        self.capture = (register_capture(self.model, config.capture_factors)
                        if config.guidance_mode != "none" else None)
        self.step = 0

    def init_identifiers(self):
        for tok in self.identifiers:
            init_identifier_embedding(tok, self.model.token_embedding)

    def next_batches(self):
        bs = self.config.batch_size
        idx = self.rng.integers(0, self.data.images.shape[0], size=bs)
        batch = self.data.concept_batch(torch.as_tensor(idx))
        prior = None
        if self.data.prior_images is not None:
            pidx = self.rng.integers(0, self.data.prior_images.shape[0], size=bs)
            prior = self.data.prior_batch(torch.as_tensor(pidx))
        return batch, prior

    def train_step(self, map_hook=None) -> TrainStepResult:
        batch, prior = self.next_batches()
        self.step += 1
        return training_step(self.model, self.optimizer, batch, prior, self.config,
                             self.generator, self.capture, self.step, map_hook)

    def state(self) -> dict:
        return {
            "step": self.step,
            "optimizer": self.optimizer.state_dict(),
            "generator": self.generator.get_state(),
            "rng": self.rng.bit_generator.state,
            "config_hash": self.config.config_hash(),
        }

    def load_state(self, checkpoint_dir):
        model, manifest = load_checkpoint(checkpoint_dir)
        self.model.load_state_dict(model.state_dict())
        state = torch.load(Path(checkpoint_dir) / "trainer_state.pt", weights_only=False)
        self.optimizer.load_state_dict(state["optimizer"])
        self.generator.set_state(state["generator"])
        self.rng.bit_generator.state = state["rng"]
        self.step = state["step"]

    def close(self):
        if self.capture is not None:
            self.capture.remove()


def checkpoint_name(step: int) -> str:
    return f"step_{step:06d}"


def finetune(config: TrainConfig, manifest: ConceptManifest, out_dir, backbone=None,
             resume_from=None, progress: Callable | None = None) -> FinetuneResult:
    """Run ``config.steps`` steps, checkpointing and logging under ``out_dir``.

    Layout: ``checkpoints/step_NNNNNN/``, ``train_log.jsonl``,
    ``weight_change.json`` (final vs the step-0 snapshot) and, when
    ``curve_every`` is set, ``weight_change_curve.csv``.
    """
    out = Path(out_dir)
    ckpt_root = out / "checkpoints"
    ckpt_root.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(config, manifest, backbone)
    log_path = out / "train_log.jsonl"
    curve_path = out / "weight_change_curve.csv"
    initial_dir = ckpt_root / checkpoint_name(0)
    try:
        if resume_from:
            trainer.load_state(resume_from)
            src_run = Path(resume_from).resolve().parent.parent
            if src_run != out.resolve():
                shutil.copytree(src_run / "checkpoints" / checkpoint_name(0), initial_dir, dirs_exist_ok=True)
                for name in (log_path.name, curve_path.name):
                    if (src_run / name).exists():
                        shutil.copyfile(src_run / name, out / name)
            _truncate_log(log_path, trainer.step)
            _truncate_curve(curve_path, trainer.step)
        else:
            trainer.init_identifiers()
            save_checkpoint(initial_dir, trainer.model, 0, trainer.state())
            log_path.write_text("")
            if config.curve_every:
                curve_path.write_text("step,kind,layer,delta\n")
        initial = {k: torch.as_tensor(v) for k, v in load_snapshot(initial_dir).items()}
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))

        last = ckpt_root / checkpoint_name(trainer.step)
        with log_path.open("a") as fh:
            while trainer.step < config.steps:
                result = trainer.train_step()
                fh.write(json.dumps(result.losses.as_log(result.step, result.t)) + "\n")
                if progress is not None:
                    progress(result)
                if config.curve_every and trainer.step % config.curve_every == 0:
                    rep = weight_change_rate(initial, snapshot(trainer.model), trainer.step)
                    _append_curve(curve_path, rep)
                if trainer.step % config.checkpoint_every == 0 or trainer.step == config.steps:
                    fh.flush()
                    last = save_checkpoint(ckpt_root / checkpoint_name(trainer.step), trainer.model,
                                           trainer.step, trainer.state())
        report = weight_change_rate(initial, snapshot(trainer.model), trainer.step)
        (out / "weight_change.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        return FinetuneResult(last, log_path, report.to_dict(), out)
    except TrainingStepError as exc:
        log.error("step %d failed (%s); last good checkpoint kept", trainer.step, exc)
        raise
    finally:
        trainer.close()


def _truncate_log(path: Path, step: int):
    if not path.exists():
        return
    keep = [l for l in path.read_text().splitlines() if l and json.loads(l)["step"] <= step]
    path.write_text("".join(l + "\n" for l in keep))


def _truncate_curve(path: Path, step: int):
    if not path.exists():
        return
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, ["step", "kind", "layer", "delta"])
        w.writeheader()
        w.writerows(r for r in rows if int(r["step"]) <= step)


def _append_curve(path: Path, report):
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, ["step", "kind", "layer", "delta"])
        for row in report.rows():
            w.writerow({**row, "delta": repr(row["delta"])})


# --------------------------------------------------------------------------
# sampling and probing

@dataclass
class SampleResult:
    images: torch.Tensor
    maps: dict = field(default_factory=dict)  # identifier -> [n, H', W'] running mean
    timesteps: list = field(default_factory=list)
    layer_ids: list = field(default_factory=list)


def sample(model, prompt: RenderedPrompt, n: int, seed: int, probe: bool = False,
           probe_factors=(4,), attn_size: int = DEFAULT_MAP_SIZE) -> SampleResult:
    """Ancestral samples for one prompt; with ``probe`` the identifier maps are
    averaged over every denoising step."""
    gen = torch.Generator().manual_seed(seed)
    ids = prompt.tensor().expand(n, -1)
    if not probe:
        return SampleResult(ddpm_sample(model, ids, gen))
    check_capabilities(model).require("capture")
    capture = register_capture(model, probe_factors, detach=True)
    means = {ident: RunningMapMean() for ident in prompt.positions}
    timesteps = []

    def on_step(t):
        for ident, pos in prompt.positions.items():
            means[ident].update(identifier_map(capture.records, pos, attn_size).values, t)
        timesteps.append(t)
        capture.clear()

    with capture:
        layer_ids = [l.config.layer_id for l in capture.layers]
        images = ddpm_sample(model, ids, gen, on_step)
    return SampleResult(images, {k: m.mean.float() for k, m in means.items()}, timesteps, layer_ids)


def write_probe_maps(result: SampleResult, prompt: RenderedPrompt, out_dir, prefix="sample"):
    out = Path(out_dir)
    written = []
    for ident, maps in result.maps.items():
        slug = ident.strip("<>")
        for i in range(maps.shape[0]):
            written.append(save_probe(out / f"{prefix}{i}_{slug}.png", maps[i], result.layer_ids,
                                      prompt.positions[ident], result.timesteps,
                                      {"identifier": ident, "prompt": prompt.text}))
    return written


def generate_samples(model, manifest: ConceptManifest, concept_ids: Sequence[str], out_root,
                     n_per_prompt: int = 50, seed: int = 0, prompt_bank=None) -> Path:
    """Write ``<out>/<concept>/<prompt_idx>/<sample_idx>.png`` over the prompt bank.

    A two-concept group is written under ``<a>+<b>``.  ``prompts.json``
    records the prompt text and identifiers of every cell.
    """
    out = Path(out_root)
    entries = [manifest.concept(c) for c in concept_ids]
    bindings = [(e.identifier, e.class_name) for e in entries]
    templates = prompt_bank or load_prompt_bank(arity=len(entries))
    name = "+".join(concept_ids)
    index_path = out / "prompts.json"
    index = json.loads(index_path.read_text()) if index_path.exists() else {}
    index[name] = {"identifiers": [b[0] for b in bindings], "concepts": list(concept_ids),
                   "prompts": {}}
    for pi, tmpl in enumerate(templates):
        prompt = render_prompt(tmpl, bindings, model.vocab, model.cfg.max_tokens)
        res = sample(model, prompt, n_per_prompt, seed * 1000 + pi)
        for si in range(n_per_prompt):
            save_image(out / name / str(pi) / f"{si}.png", res.images[si])
        index[name]["prompts"][str(pi)] = prompt.text
    out.mkdir(parents=True, exist_ok=True)
    index_path.write_text(json.dumps(index, indent=2, sort_keys=True))
    return out / name


# --------------------------------------------------------------------------
# localization measurement

@torch.no_grad()
def localization_stats(model, data: TrainingData, identifier: str, timesteps=None,
                       factors=(2, 4, 8), attn_size: int | None = None, seed: int = 1234) -> dict:
    """Timestep-mean aggregated attention of ``identifier`` on the training images,
    split into in-mask and out-of-mask means."""
    attn_size = attn_size or data.masks[identifier].shape[-1]
    T = model.schedule.T
    if timesteps is None:
        timesteps = np.unique(np.linspace(1, T, 10).round().astype(int)).tolist()
    gen = torch.Generator().manual_seed(seed)
    n = data.images.shape[0]
    ids = data.prompt.tensor().expand(n, -1)
    pos = data.prompt.positions[identifier]
    running = RunningMapMean()
    with register_capture(model, factors, detach=True) as capture:
        for t in timesteps:
            eps = torch.randn(data.images.shape, generator=gen)
            z_t = add_noise(model.encode(data.images), t, eps, model.schedule)
            capture.clear()
            model(z_t, t, ids)
            running.update(identifier_map(capture.records, pos, attn_size).values, t)
    mean_map = running.mean
    mask = data.masks[identifier]
    if mask.shape[-1] != attn_size:
        mask = torch.stack([resize_mask(m, attn_size, "soft").values for m in mask])
    inside = mask > 0
    in_mean = float(mean_map[inside].mean())
    out_mean = float(mean_map[~inside].mean())
    return {"in_mask": in_mean, "out_mask": out_mean,
            "ratio": in_mean / out_mean if out_mean > 0 else float("inf"),
            "timesteps": list(timesteps)}
