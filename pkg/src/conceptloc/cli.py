"""``conceptloc`` command line: prepare, priors, train, sample, attn, eval, ablate.

Exit codes: 0 success, 1 validation, 2 capability, 3 runtime.

Environment: ``CONCEPTLOC_CONFIG``, ``CONCEPTLOC_SEED`` and ``CONCEPTLOC_OUT``
supply defaults for the global flags; any other ``CONCEPTLOC_<FIELD>``
overrides the training-config field of that name (value parsed as YAML).
``CONCEPTLOC_THREADS`` sets the torch thread count (default 1, which keeps
runs bit-reproducible).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
import uuid
from pathlib import Path

import numpy as np
import torch
import yaml

from .errors import ArgumentError, ConceptLocError, ConfigurationError, ValidationError

ENV_PREFIX = "CONCEPTLOC_"
EXIT_OK, EXIT_VALIDATION, EXIT_CAPABILITY, EXIT_RUNTIME = 0, 1, 2, 3
DEFAULT_SETS = ("qkv", "qv", "kv")

log = logging.getLogger("conceptloc")


# --------------------------------------------------------------------------
# run records

def _hash_path(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(str(p.relative_to(path)).encode())
                h.update(p.read_bytes())
    elif path.is_file():
        h.update(path.read_bytes())
    else:
        return "missing"
    return h.hexdigest()


def hash_config(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()


def write_run_record(out: Path, command: str, config_hash: str, inputs, started: float):
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "run_id": f"{command}-{config_hash[:10]}-{uuid.uuid4().hex[:8]}",
        "command": command,
        "config_hash": config_hash,
        "inputs": {str(p): _hash_path(Path(p)) for p in inputs if p},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "argv": sys.argv[1:],
    }
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    return record


# --------------------------------------------------------------------------
# config handling

def env_overrides(fields) -> dict:
    out = {}
    for key, value in os.environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):].lower()
        if name in fields:
            out[name] = yaml.safe_load(value)
    return out


def load_train_config(args, extra: dict | None = None):
    from .trainer import TrainConfig

    overrides = env_overrides(TrainConfig.__dataclass_fields__)
    if args.seed is not None:
        overrides["seed"] = args.seed
    overrides.update({k: v for k, v in (extra or {}).items() if v is not None})
    if not args.config:
        raise ConfigurationError("this command needs --config (or CONCEPTLOC_CONFIG)")
    return TrainConfig.from_file(args.config, overrides)


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def _seed(args, default=0) -> int:
    return default if args.seed is None else args.seed


# --------------------------------------------------------------------------
# subcommands

def cmd_prepare(args) -> int:
    from .datasets import load_manifest

    started = time.time()
    if args.synthetic:
        from .datasets import make_two_shape_dataset

        target = Path(args.manifest)
        if target.name != "manifest.json":
            raise ArgumentError("--synthetic writes <dir>/manifest.json; pass that path")
        make_two_shape_dataset(target.parent, n_images=5, seed=_seed(args))
    try:
        manifest = load_manifest(args.manifest)
    except ValidationError as exc:
        print(f"manifest {args.manifest}: {len(exc.violations)} violation(s)")
        for v in exc.violations:
            print(f"  - {v}")
        return EXIT_VALIDATION
    for w in manifest.warnings:
        print(f"warning: {w}")
    if args.strict and manifest.warnings:
        print(f"--strict: {len(manifest.warnings)} warning(s) treated as errors")
        return EXIT_VALIDATION
    print(f"manifest {args.manifest}: ok")
    for c in manifest.concepts:
        print(f"  concept {c.concept_id}: class={c.class_name} identifier={c.identifier} images={len(c.images)}")
    for g in manifest.groups:
        print(f"  group {' + '.join(g)}: shared images={len(manifest.group_images(g))}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest_summary.json").write_text(json.dumps(
            {"manifest": manifest.to_dict(), "warnings": manifest.warnings}, indent=2, sort_keys=True))
        write_run_record(out, "prepare", hash_config({"manifest": str(args.manifest), "strict": args.strict}),
                         [args.manifest], started)
    return EXIT_OK


def _backbone_from(args):
    from .backbone import build_backbone, load_checkpoint

    if getattr(args, "checkpoint", None):
        return load_checkpoint(args.checkpoint)[0]
    spec = {}
    if args.config:
        data = yaml.safe_load(Path(args.config).read_text()) or {}
        if data.get("base_checkpoint"):
            return load_checkpoint(Path(args.config).parent / data["base_checkpoint"])[0]
        spec = data.get("backbone") or {}
    return build_backbone(spec)


def cmd_priors(args) -> int:
    from .datasets import generate_priors

    if args.count <= 0:
        raise ArgumentError("prior count must be positive")
    started = time.time()
    out = _out(args, ".")
    backbone = _backbone_from(args)
    backbone.eval()
    ps = generate_priors(backbone, args.class_name, args.count, _seed(args), out)
    write_run_record(out, "priors", hash_config({"class": args.class_name, "count": args.count,
                                                 "seed": _seed(args), "backbone": ps.provenance}),
                     [args.config], started)
    print(f"wrote {len(ps)} priors for {args.class_name!r} under {out / 'priors'}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .datasets import load_manifest
    from .trainer import finetune

    started = time.time()
    extra = {"guidance_mode": args.mode, "selector": args.selector.upper() if args.selector else None,
             "steps": args.steps}
    config = load_train_config(args, extra)
    if not config.manifest:
        raise ConfigurationError("config has no manifest")
    manifest = load_manifest(config.manifest)
    out = _out(args, "run")

    def progress(r):
        if r.step % 50 == 0:
            log.info("step %d t=%d total=%.5f attn=%.5f", r.step, r.t, r.losses.total, r.losses.l_attn)

    result = finetune(config, manifest, out, resume_from=args.resume, progress=progress)
    write_run_record(out, "train", config.config_hash(),
                     [args.config, config.manifest, config.priors], started)
    means = result.weight_change["mean"]
    print(f"trained {config.steps} steps -> {result.checkpoint}")
    print("weight change: " + ", ".join(f"{k}={v:.4g}" for k, v in sorted(means.items())))
    return EXIT_OK


def _run_config(checkpoint) -> dict:
    p = Path(checkpoint).resolve().parent.parent / "config.json"
    return json.loads(p.read_text()) if p.exists() else {}


def cmd_sample(args) -> int:
    from .backbone import load_checkpoint
    from .conditioning import load_prompt_bank
    from .datasets import load_manifest
    from .trainer import generate_samples

    started = time.time()
    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    run_cfg = _run_config(args.checkpoint)
    manifest_path = args.manifest or run_cfg.get("manifest")
    if not manifest_path:
        raise ConfigurationError("no manifest given and none recorded next to the checkpoint")
    manifest = load_manifest(manifest_path)
    concepts = args.concepts or run_cfg.get("concepts")
    if not concepts:
        concepts = list(manifest.groups[0]) if manifest.groups else [manifest.concepts[0].concept_id]
    out = _out(args, "samples")
    bank = load_prompt_bank(args.prompt_bank, arity=len(concepts)) if args.prompt_bank else None
    if bank is None:
        bank = load_prompt_bank(arity=len(concepts))
    if args.prompts:
        bank = bank[: args.prompts]
    generate_samples(model, manifest, concepts, out, args.n, _seed(args), bank)
    write_run_record(out, "sample", hash_config({"checkpoint": _hash_path(Path(args.checkpoint)),
                                                "concepts": concepts, "n": args.n, "seed": _seed(args),
                                                "prompts": [t.text for t in bank]}),
                     [args.checkpoint, manifest_path], started)
    print(f"wrote {len(bank) * args.n} samples under {out}")
    return EXIT_OK


def _grid_figure(path, images, maps: dict, title: str):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .datasets import to_uint8

    n = images.shape[0]
    cols = 1 + len(maps)
    fig, axes = plt.subplots(n, cols, figsize=(2.2 * cols, 2.2 * n), squeeze=False)
    pix = to_uint8(images)
    for i in range(n):
        axes[i][0].imshow(pix[i], interpolation="nearest")
        axes[i][0].set_title("sample" if i == 0 else "")
        for j, (ident, m) in enumerate(maps.items(), start=1):
            axes[i][j].imshow(m[i].numpy(), cmap="jet", vmin=0, vmax=float(m[i].max()) or 1.0)
            axes[i][j].set_title(ident if i == 0 else "")
        for ax in axes[i]:
            ax.axis("off")
    fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_attn(args) -> int:
    from .backbone import load_checkpoint
    from .conditioning import RenderedPrompt, toy_vocabulary
    from .datasets import save_image
    from .trainer import sample, write_probe_maps

    started = time.time()
    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    vocab = model.vocab
    words = vocab.split(args.prompt)
    idents = [w for w in words if w.startswith("<v")]
    if not idents:
        raise ArgumentError(f"prompt {args.prompt!r} contains no identifier token")
    positions = {}
    for ident in idents:
        if ident not in vocab:
            raise ConfigurationError(f"identifier {ident!r} is not in the vocabulary")
        positions[ident] = words.index(ident) + 1
    prompt = RenderedPrompt(args.prompt, words, vocab.encode(words, model.cfg.max_tokens), positions)
    factors = [int(f) for f in args.factors]
    result = sample(model, prompt, args.n, _seed(args), probe=True, probe_factors=factors,
                    attn_size=args.size)
    out = _out(args, "attn")
    for i in range(args.n):
        save_image(out / f"sample{i}.png", result.images[i])
    write_probe_maps(result, prompt, out)
    _grid_figure(out / "grid.png", result.images, result.maps, args.prompt)
    write_run_record(out, "attn", hash_config({"checkpoint": _hash_path(Path(args.checkpoint)),
                                              "prompt": args.prompt, "seed": _seed(args), "n": args.n,
                                              "factors": factors, "size": args.size}),
                     [args.checkpoint], started)
    print(f"wrote {args.n} samples and {len(result.maps) * args.n} maps under {out}")
    return EXIT_OK


def _providers(path):
    from .evaluation import build_providers

    spec = yaml.safe_load(Path(path).read_text()) if path else {}
    return build_providers(spec), spec


def cmd_eval(args) -> int:
    from .datasets import load_manifest
    from .evaluation import evaluate

    started = time.time()
    run = Path(args.run)
    if not run.is_dir():
        raise ValidationError(f"run directory not found: {run}")
    manifest_path = args.manifest
    if not manifest_path:
        raise ConfigurationError("eval needs --manifest for the real images")
    manifest = load_manifest(manifest_path)
    providers, spec = _providers(args.providers)
    report = evaluate(run, manifest, providers)
    out = _out(args, str(run / "eval"))
    report.write(out)
    write_run_record(out, "eval", hash_config({"run": _hash_path(run), "providers": spec}),
                     [args.run, manifest_path, args.providers], started)
    print(report.to_markdown())
    return EXIT_OK


def _plot_curves(path, rows, set_id):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    for kind in ("W_Q", "W_K", "W_V"):
        pts = {}
        for r in rows:
            if r["kind"] == kind:
                pts.setdefault(int(r["step"]), []).append(float(r["delta"]))
        if pts:
            steps = sorted(pts)
            ax.plot(steps, [np.mean(pts[s]) for s in steps], label=kind)
    ax.set_xlabel("step")
    ax.set_ylabel("mean weight change rate")
    ax.set_title(f"trainable set {set_id.upper()}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_ablate(args) -> int:
    from .backbone import load_checkpoint
    from .conditioning import load_prompt_bank
    from .datasets import load_manifest
    from .evaluation import METRIC_COLUMNS, MetricReport, evaluate
    from .trainer import finetune, generate_samples

    started = time.time()
    base = load_train_config(args)
    manifest = load_manifest(base.manifest)
    out = _out(args, "ablation")
    providers, spec = _providers(args.providers)
    curve_every = base.curve_every or max(1, base.steps // 20)
    all_curves, table = [], []
    for set_id in args.sets:
        cfg = type(base).from_mapping({**base.to_dict(), "selector": set_id.upper(), "curve_every": curve_every})
        sub = out / set_id.lower()
        t0 = time.time()
        result = finetune(cfg, manifest, sub)
        with (sub / "weight_change_curve.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        for r in rows:
            all_curves.append({"set": set_id.upper(), **r})
        _plot_curves(sub / "weight_change.png", rows, set_id)
        model, _ = load_checkpoint(result.checkpoint)
        model.eval()
        concepts = list(cfg.concepts or (manifest.groups[0] if manifest.groups else [manifest.concepts[0].concept_id]))
        bank = load_prompt_bank(arity=len(concepts))[: args.prompts]
        samples = generate_samples(model, manifest, concepts, sub / "samples", args.samples_per_prompt,
                                   cfg.seed, bank).parent
        rep = evaluate(samples, manifest, providers)
        rep.write(sub / "eval")
        for r in rep.rows:
            table.append({**r, "concept": f"{set_id.upper()}: {r['concept']}"})
        write_run_record(sub, "train", cfg.config_hash(), [args.config, cfg.manifest, cfg.priors], t0)
        print(f"{set_id.upper()}: " + ", ".join(f"{k}={v:.4g}" for k, v in sorted(result.weight_change["mean"].items())))

    with (out / "weight_change.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, ["set", "step", "kind", "layer", "delta"])
        w.writeheader()
        w.writerows(all_curves)
    summary = MetricReport(table, {"embedding_provider": providers["embedding"].provenance(),
                                   "distance_provider": providers["distance"].provenance(),
                                   "sets": [s.upper() for s in args.sets]})
    summary.write(out, "ablation")
    write_run_record(out, "ablate", hash_config({"base": base.config_hash(), "sets": list(args.sets),
                                                "providers": spec, "prompts": args.prompts,
                                                "samples_per_prompt": args.samples_per_prompt}),
                     [args.config, base.manifest], started)
    print(summary.to_markdown("Parameter-set ablation"))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=os.environ.get(ENV_PREFIX + "CONFIG"),
                        help="training/backbone config file (YAML or JSON)")
    env_seed = os.environ.get(ENV_PREFIX + "SEED")
    common.add_argument("--seed", type=int, default=int(env_seed) if env_seed else None)
    common.add_argument("--out", default=os.environ.get(ENV_PREFIX + "OUT"), help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="conceptloc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="validate a concept manifest")
    p.add_argument("manifest")
    p.add_argument("--strict", action="store_true", help="treat soft-mask warnings as errors")
    p.add_argument("--synthetic", action="store_true",
                   help="first write the synthetic two-shape dataset next to MANIFEST")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("priors", parents=[common], help="sample the class-prior image set")
    p.add_argument("--class", dest="class_name", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--checkpoint", help="backbone checkpoint (default: toy backbone from --config)")
    p.set_defaults(func=cmd_priors)

    p = sub.add_parser("train", parents=[common], help="fine-tune with attention guidance")
    p.add_argument("--mode", choices=["hard", "soft", "none"])
    p.add_argument("--selector", choices=["kv", "qv", "qkv", "all"])
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", parents=[common], help="generate samples over the prompt bank")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--concepts", nargs="+")
    p.add_argument("--n", type=int, default=50, help="samples per prompt")
    p.add_argument("--prompts", type=int, help="use only the first N prompt templates")
    p.add_argument("--prompt-bank", help="template file, one per line")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("attn", parents=[common], help="probe identifier attention maps during sampling")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--factors", nargs="+", default=["4"])
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=cmd_attn)

    p = sub.add_parser("eval", parents=[common], help="score generated samples")
    p.add_argument("--run", required=True, help="samples directory")
    p.add_argument("--manifest")
    p.add_argument("--providers", help="provider config (YAML)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="compare trainable parameter sets")
    p.add_argument("--sets", nargs="+", default=list(DEFAULT_SETS), type=str.lower,
                   choices=["qkv", "qv", "kv"])
    p.add_argument("--providers")
    p.add_argument("--prompts", type=int, default=2)
    p.add_argument("--samples-per-prompt", type=int, default=4)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(int(os.environ.get(ENV_PREFIX + "THREADS", "1")))
    try:
        return args.func(args)
    except ValidationError as exc:
        print("validation failed:", file=sys.stderr)
        for v in exc.violations:
            print(f"  - {v}", file=sys.stderr)
        return EXIT_VALIDATION
    except ConceptLocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # unexpected failures still map onto the runtime code
        log.exception("unexpected failure")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
