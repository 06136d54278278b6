"""Command-line entry point.

Commands::

    regiondebias generate  --out DIR [--config PATH] [--seed INT]
    regiondebias evaluate  --out DIR [--config PATH] [--variant NAME] [--seed INT] [--workers INT]
    regiondebias attention --out DIR [--config PATH] [--variant NAME] [--seed INT] [--workers INT]

Exit status is 0 on success, 1 for input or configuration errors and 2 for
runtime failures. Errors are reported as a single JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, parse_config
from .data import Sample, generate, load_manifest, split, write_manifest
from .debias import DebiasResult
from .encoder import ToyViTEncoder, VisionTextEncoder
from .exceptions import CapabilityError, InputError, MissingMaskError
from .experiment import (ZERO_SHOT, attention_records, delta_pairs, mean_iou, run_variant,
                         safe_correlation, score)
from .masks import ExternalSegmenterProvider, SegmenterRequest, get_target_mask
from .metrics import ReportRow, emit_report, write_deltas
from .training import induce_bias

logger = logging.getLogger("regiondebias")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else parse_config({})
    return cfg.with_overrides(seed=args.seed, variant=getattr(args, "variant", None))


def _dataset(cfg: RunConfig) -> tuple[list[Sample], list[Sample]]:
    """Return ``(train, test)`` samples for the configured source."""
    if cfg.manifest is not None:
        if not cfg.manifest.is_file():
            raise FileNotFoundError(f"manifest not found: {cfg.manifest}")
        samples = load_manifest(cfg.manifest)
        train = [s for s in samples if s.split == "train"]
        test = [s for s in samples if s.split == "test"]
        return train, test
    train, _, test = split(generate(cfg.generator), cfg.fractions, cfg.generator.seed)
    return train, test


def _encoder(cfg: RunConfig, train: list[Sample]) -> VisionTextEncoder:
    if cfg.checkpoint is not None:
        return ToyViTEncoder.load(cfg.checkpoint)
    base = ToyViTEncoder(cfg.encoder)
    if not train or cfg.bias.epochs == 0:
        return base
    x = np.stack([s.image for s in train])
    y = np.array([s.class_label for s in train])
    return induce_bias(base, x, y, cfg.debias.prompts, cfg.bias)


def _resolve_masks(cfg: RunConfig, samples: list[Sample]) -> list[Sample]:
    """Replace stored masks by external-provider masks when configured."""
    if cfg.masks.provider == "oracle":
        return samples
    provider = ExternalSegmenterProvider(list(cfg.masks.command), timeout=cfg.masks.timeout)
    out = []
    for s in samples:
        mask = get_target_mask(SegmenterRequest(s.image, cfg.debias.target_attribute, s.id), provider)
        out.append(Sample(s.image, s.class_label, s.group_id, mask, s.id, s.split))
    return out


def _prepare(args):
    cfg = _load_run_config(args)
    if args.workers < 1:
        raise InputError("--workers must be >= 1")
    train, test = _dataset(cfg)
    if not test:
        raise InputError("the dataset has no test samples to evaluate")
    needs_masks = any(v != ZERO_SHOT for v in cfg.variants)
    test = _resolve_masks(cfg, test) if needs_masks else test
    if needs_masks:
        missing = [s.id for s in test if s.target_mask is None or not s.target_mask.any()]
        if missing:
            shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
            raise MissingMaskError(f"variants {list(cfg.variants)} need target masks; "
                                   f"{len(missing)} test samples have none: {shown}")
    encoder = _encoder(cfg, train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, test, encoder, out


def _record(sample: Sample, result: DebiasResult) -> dict:
    rec = result.to_record()
    rec["true_class"] = int(sample.class_label)
    rec["group_id"] = int(sample.group_id)
    return rec


def cmd_generate(args) -> int:
    cfg = _load_run_config(args)
    if cfg.generator is None:
        raise InputError("generate needs dataset.generator, not a manifest")
    samples = generate(cfg.generator)
    names = {}
    if samples:
        for name, part in zip(("train", "val", "test"), split(samples, cfg.fractions, cfg.generator.seed)):
            names.update({s.id: name for s in part})
    manifest = write_manifest(samples, args.out, names)
    logger.info("wrote %d samples to %s", len(samples), manifest)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg, test, encoder, out = _prepare(args)
    has_masks = all(s.target_mask is not None and s.target_mask.any() for s in test)
    corr = None
    if has_masks:
        pairs = delta_pairs(test, encoder, cfg.debias.prompts, args.workers)
        write_deltas(pairs, out / "deltas.csv")
        corr = safe_correlation(pairs)
    else:
        logger.warning("test samples without masks: skipping delta and attention analysis")

    groups = sorted({s.group_id for s in test})
    rows, attn_rows = [], []
    with open(out / "results.jsonl", "w") as fh:
        for variant in cfg.variants:
            results = run_variant(test, variant, cfg.debias, encoder, args.workers)
            metrics = score(test, results, groups)
            iou = None
            if has_masks and encoder.supports_attention:
                recs = attention_records(test, results, encoder, cfg.patch_threshold, args.workers)
                iou = mean_iou(recs, "after")
                attn_rows.append((variant, mean_iou(recs, "before"), iou, sum(r.empty_target for r in recs)))
            rows.append(ReportRow(cfg.run_id, cfg.dataset_name, variant, metrics.wg, metrics.avg, metrics.gap,
                                  iou, corr, len(test), metrics.group_counts, metrics.group_accuracy))
            for s, r in zip(test, results):
                fh.write(json.dumps(_record(s, r), sort_keys=True) + "\n")
    emit_report(rows, out / "metrics.csv", "csv")
    emit_report(rows, out / "metrics.json", "json")
    if attn_rows:
        (out / "attention").mkdir(exist_ok=True)
        _write_attention_summary(attn_rows, out / "attention" / "summary.csv")
    return EXIT_OK


def _write_attention_summary(rows, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "mean_iou_before", "mean_iou_after", "n_empty_target"])
        for variant, before, after, empty in rows:
            w.writerow([variant, repr(round(before, 10)), repr(round(after, 10)), empty])


def _write_grid(grid: np.ndarray, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in grid:
            w.writerow([repr(float(v)) for v in row])


def cmd_attention(args) -> int:
    cfg, test, encoder, out = _prepare(args)
    if not getattr(encoder, "supports_attention", False):
        raise CapabilityError(f"{type(encoder).__name__} does not expose attention maps")
    root = out / "attention"
    (root / "before").mkdir(parents=True, exist_ok=True)
    summary, wrote_before = [], False
    with open(root / "iou.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "variant", "iou_before", "iou_after", "empty_target"])
        for variant in cfg.variants:
            results = run_variant(test, variant, cfg.debias, encoder, args.workers)
            recs = attention_records(test, results, encoder, cfg.patch_threshold, args.workers)
            (root / variant).mkdir(exist_ok=True)
            for r in recs:
                if not wrote_before:
                    _write_grid(r.before, root / "before" / f"{r.sample_id}.csv")
                _write_grid(r.after, root / variant / f"{r.sample_id}.csv")
                w.writerow([r.sample_id, variant, repr(r.iou_before), repr(r.iou_after), int(r.empty_target)])
            wrote_before = True
            summary.append((variant, mean_iou(recs, "before"), mean_iou(recs, "after"),
                            sum(r.empty_target for r in recs)))
    _write_attention_summary(summary, root / "summary.csv")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "evaluate": cmd_evaluate, "attention": cmd_attention}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regiondebias",
                                     description="Region-level test-time debiasing for zero-shot classifiers.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH", help="YAML or JSON run configuration")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("--out", metavar="DIR", required=True, help="output directory")
        if name != "generate":
            p.add_argument("--variant", metavar="NAME",
                           help="variant, comma-separated list or 'all' (overrides the config)")
            p.add_argument("--workers", type=int, default=1, help="parallel workers (default 1)")
    return parser


def _fail(exc: BaseException, code: int) -> int:
    line = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(line), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed usage; normalize its status to the input-error code
        return EXIT_OK if exc.code in (0, None) else _fail(InputError("invalid command line"), EXIT_INPUT)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (InputError, ValueError, FileNotFoundError) as exc:
        return _fail(exc, EXIT_INPUT)
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        return _fail(exc, EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
