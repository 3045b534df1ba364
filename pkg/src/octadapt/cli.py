"""Pipeline orchestration CLI. Each subcommand is an independent stage that
reads and writes files only, so any stage can be rerun or tested in
isolation; identical config + seed reproduce identical artifacts.

Exit codes: 0 success, 1 contract/format violation, 2 config or usage
error, 3 missing input, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data import (Domain, DomainDataset, PhantomConfig, RangeTag, Volume,
                   generate_phantom, load_volume_dir, normalize, save_volumes)
from .errors import (ConfigError, ContractError, DivergenceError,
                     MissingInputError, OctAdaptError)
from .losses import LossWeights, ScheduleParams
from .metrics import MetricRow, build_report, compute_row, export_report
from .networks import DiscriminatorConfig, GeneratorConfig
from .segmenter import MiniUNetConfig, TorchSegmenter, segment_volume, train_reference_segmenter
from .traditional import TraditionalParams, adapt_traditional
from .trainer import TrainConfig, adapt_volume, fit

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4

COMPARE_METHODS = ("unprocessed", "traditional", "cyclegan")


def _log(msg: str):
    print(msg, file=sys.stderr)


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return cfg


def _block(config: dict, name: str) -> dict:
    block = config.get(name, {})
    if not isinstance(block, dict):
        raise ConfigError(f"config block {name!r} must be an object")
    return dict(block)


def _build(cls, block: dict, what: str):
    try:
        return cls(**block)
    except TypeError as e:
        raise ConfigError(f"bad {what} config: {e}") from e


def _write_resolved_config(out_dir, command: str, params: dict,
                           inputs: dict | None = None):
    payload = {"command": command, "params": params}
    if inputs:
        payload["inputs"] = {k: str(v) for k, v in inputs.items()}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True))


def _load_volumes(directory, what: str) -> list[Volume]:
    d = Path(directory)
    search = d / "volumes" if (d / "volumes").is_dir() else d
    if not d.exists():
        raise MissingInputError(f"{what} directory not found: {d}")
    vols = load_volume_dir(search)
    if not vols:
        raise MissingInputError(f"no volumes (*.octv) found in {search}")
    return vols


def _load_segmenter(path) -> TorchSegmenter:
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"segmenter checkpoint not found: {p}")
    return TorchSegmenter.load(p)


def _train_config(block: dict) -> TrainConfig:
    b = dict(block)
    for key, cls in (("schedule", ScheduleParams), ("weights", LossWeights),
                     ("generator", GeneratorConfig),
                     ("discriminator", DiscriminatorConfig)):
        if key in b and b[key] is not None:
            b[key] = _build(cls, b[key], f"cyclegan.{key}")
    return _build(TrainConfig, b, "cyclegan")


def cmd_phantom(args) -> int:
    block = _block(_load_config_file(args.config), "phantom")
    for flag in ("style", "n_volumes", "bscans_per_volume", "height", "width"):
        value = getattr(args, flag)
        if value is not None:
            block[flag] = value
    if args.seed is not None:
        block["seed"] = args.seed
    style = block.pop("style", "A_speckled")
    cfg = _build(lambda **kw: PhantomConfig.for_style(style, **kw), block,
                 "phantom")
    volumes = generate_phantom(cfg)
    out = Path(args.out)
    save_volumes(out / "volumes", volumes)
    _write_resolved_config(out, "phantom", asdict(cfg))
    _log(f"phantom: wrote {len(volumes)} {cfg.style} volume(s) to {out / 'volumes'}")
    return EXIT_OK


def cmd_adapt_traditional(args) -> int:
    block = _block(_load_config_file(args.config), "traditional")
    if args.seed is not None:
        block["seed"] = args.seed
    params = _build(TraditionalParams, block, "traditional")
    volumes = _load_volumes(args.input, "input")
    adapted = [adapt_traditional(v, params) for v in volumes]
    out = Path(args.out)
    save_volumes(out / "volumes", adapted)
    _write_resolved_config(out, "adapt-traditional", asdict(params),
                           {"input": args.input})
    _log(f"adapt-traditional: adapted {len(adapted)} volume(s) to {out / 'volumes'}")
    return EXIT_OK


def cmd_train_segmenter(args) -> int:
    block = _block(_load_config_file(args.config), "segmenter_train")
    if args.seed is not None:
        block["seed"] = args.seed
    model_cfg = _build(MiniUNetConfig, block.pop("model", {}), "segmenter model")
    volumes = _load_volumes(args.train, "training")
    if any(v.masks is None for v in volumes):
        raise ContractError("segmenter training volumes must carry masks")
    dataset = DomainDataset(domain=volumes[0].domain, volumes=volumes,
                            split="train")
    train_kwargs = {k: block[k] for k in ("epochs", "batch_size", "lr", "seed")
                    if k in block}
    unknown = set(block) - set(train_kwargs)
    if unknown:
        raise ConfigError(f"unknown segmenter_train keys: {sorted(unknown)}")
    seg = train_reference_segmenter(dataset, model_cfg, **train_kwargs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seg.save(out / "segmenter.octc")
    _write_resolved_config(out, "train-segmenter",
                           {"model": asdict(model_cfg), **train_kwargs},
                           {"train": args.train})
    _log(f"train-segmenter: wrote {out / 'segmenter.octc'}")
    return EXIT_OK


def cmd_train_cyclegan(args) -> int:
    block = _block(_load_config_file(args.config), "cyclegan")
    if args.seed is not None:
        block["seed"] = args.seed
    cfg = _train_config(block)
    vols_a = _load_volumes(args.domain_a, "domain-A")
    vols_b = _load_volumes(args.domain_b, "domain-B")
    dataset_a = DomainDataset(domain=Domain.A, volumes=vols_a, split="train")
    dataset_b = DomainDataset(domain=Domain.B, volumes=vols_b, split="train")
    seg = _load_segmenter(args.segmenter)
    out = Path(args.out)
    _write_resolved_config(out, "train-cyclegan", asdict(cfg),
                           {"domain_a": args.domain_a, "domain_b": args.domain_b,
                            "segmenter": args.segmenter})
    result = fit(cfg, dataset_a, dataset_b, seg, out, resume_from=args.resume)
    _log(f"train-cyclegan: {cfg.epochs} epoch(s) done, "
         f"final checkpoint {result.final_checkpoint}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise MissingInputError(f"checkpoint not found: {ckpt}")
    volumes = _load_volumes(args.input, "input")
    adapted = [adapt_volume(ckpt, v, args.direction) for v in volumes]
    out = Path(args.out)
    save_volumes(out / "volumes", adapted)
    _write_resolved_config(out, "adapt", {"direction": args.direction},
                           {"checkpoint": args.checkpoint, "input": args.input})
    _log(f"adapt: {args.direction} on {len(adapted)} volume(s) to {out / 'volumes'}")
    return EXIT_OK


def cmd_segment(args) -> int:
    seg = _load_segmenter(args.segmenter)
    volumes = _load_volumes(args.input, "input")
    out = Path(args.out)
    labeled = []
    for vol in volumes:
        masks = segment_volume(seg, vol)
        labeled.append(Volume(id=vol.id, bscans=vol.bscans, domain=vol.domain,
                              masks=masks))
    save_volumes(out / "volumes", labeled)
    _write_resolved_config(out, "segment", {},
                           {"segmenter": args.segmenter, "input": args.input})
    _log(f"segment: wrote predicted masks for {len(labeled)} volume(s)")
    return EXIT_OK


def _rows_for_method(seg: TorchSegmenter, volumes: list[Volume],
                     method: str) -> list[MetricRow]:
    rows = []
    for vol in volumes:
        if vol.masks is None:
            raise MissingInputError(
                f"volume {vol.id} carries no ground-truth masks")
        for i, scan in enumerate(vol.bscans):
            img = normalize(scan) if scan.range_tag is RangeTag.RAW_U8 else scan
            probs = seg.predict_probs(img)
            pred = probs.argmax(axis=0).astype(np.uint8)
            rows.append(compute_row(method, vol.id, i, pred, probs[1],
                                    vol.masks[i]))
    return rows


def cmd_evaluate(args) -> int:
    seg = _load_segmenter(args.segmenter)
    volumes = _load_volumes(args.input, "input")
    rows = _rows_for_method(seg, volumes, args.method)
    report = build_report(rows, methods=[args.method], alpha=args.alpha)
    out = Path(args.out)
    export_report(report, out)
    _write_resolved_config(out, "evaluate",
                           {"method": args.method, "alpha": args.alpha},
                           {"segmenter": args.segmenter, "input": args.input})
    agg = report.aggregates[args.method]
    _log(f"evaluate[{args.method}]: " + "  ".join(
        f"{m}={agg[m]['mean']:.4f}({agg[m]['std']:.4f})"
        for m in ("accuracy", "dice", "jaccard", "auc")))
    return EXIT_OK


def cmd_compare(args) -> int:
    seg = _load_segmenter(args.segmenter)
    rows: list[MetricRow] = []
    sources = {"unprocessed": args.unprocessed, "traditional": args.traditional,
               "cyclegan": args.cyclegan}
    for method in COMPARE_METHODS:
        volumes = _load_volumes(sources[method], method)
        rows.extend(_rows_for_method(seg, volumes, method))
    report = build_report(rows, methods=list(COMPARE_METHODS), alpha=args.alpha)
    out = Path(args.out)
    export_report(report, out)
    _write_resolved_config(out, "compare", {"alpha": args.alpha},
                           {"segmenter": args.segmenter, **sources})
    for method in COMPARE_METHODS:
        agg = report.aggregates[method]
        _log(f"compare[{method}]: dice={agg['dice']['mean']:.4f}"
             f"({agg['dice']['std']:.4f})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="octadapt",
        description="Synthetic OCT domain adaptation pipeline: phantom "
                    "generation, rule-based and learned adaptation, retina "
                    "segmentation, and method comparison.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("phantom", help="generate synthetic volumes")
    common(p)
    p.add_argument("--style", choices=["A_speckled", "B_flattened"])
    p.add_argument("--n-volumes", dest="n_volumes", type=int)
    p.add_argument("--bscans", dest="bscans_per_volume", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("adapt-traditional",
                       help="rule-based Gaussian-noise adaptation")
    common(p)
    p.add_argument("--in", dest="input", required=True)
    p.set_defaults(func=cmd_adapt_traditional)

    p = sub.add_parser("train-segmenter", help="train the retina segmenter")
    common(p)
    p.add_argument("--train", required=True, help="training volume directory")
    p.set_defaults(func=cmd_train_segmenter)

    p = sub.add_parser("train-cyclegan", help="train the adaptation networks")
    common(p)
    p.add_argument("--domain-a", dest="domain_a", required=True)
    p.add_argument("--domain-b", dest="domain_b", required=True)
    p.add_argument("--segmenter", required=True)
    p.add_argument("--resume", help="state checkpoint to continue from")
    p.set_defaults(func=cmd_train_cyclegan)

    p = sub.add_parser("adapt", help="apply a trained generator to volumes")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--direction", choices=["A2B", "B2A"], required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("segment", help="predict retina masks for volumes")
    common(p)
    p.add_argument("--segmenter", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="score one method against masks")
    common(p)
    p.add_argument("--segmenter", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--method", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare",
                       help="three-way comparison: unprocessed vs traditional "
                            "vs cyclegan")
    common(p)
    p.add_argument("--segmenter", required=True)
    p.add_argument("--unprocessed", required=True)
    p.add_argument("--traditional", required=True)
    p.add_argument("--cyclegan", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as e:
        _log(f"error (divergence): {e}")
        return EXIT_DIVERGED
    except MissingInputError as e:
        _log(f"error (missing input): {e}")
        return EXIT_MISSING
    except ConfigError as e:
        _log(f"error (config): {e}")
        return EXIT_CONFIG
    except OctAdaptError as e:
        _log(f"error: {e}")
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
