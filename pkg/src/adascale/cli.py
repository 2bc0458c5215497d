"""Command-line entry point: corpus generation, labelling, training and policy runs.

Exit status is 0 on success, 2 for invalid arguments or configuration and 3
for input files that cannot be parsed.
"""

from __future__ import annotations

import argparse
import csv
import json
import re
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .pipeline import (ExperimentSettings, PolicyConfig, compare_policies, generate_scale_labels,
                       read_labels, run_policy, train_regressor, write_labels)
from .regressor import RegressorConfig, RegressorModel, TrainerState, model_from_dict
from .scalecodec import S_REG, ScaleSet
from .simdet import (CorpusConfig, CorpusFormatError, DetectorProfile, SyntheticDetector,
                     generate_corpus, read_corpus, split_snippets, write_corpus)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MALFORMED = 3

SPLITS = ("train", "val", "all")


class UsageError(Exception):
    """Invalid arguments or configuration (exit status 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _scales(text: str) -> ScaleSet:
    try:
        return ScaleSet.parse(text)
    except ValueError as exc:
        raise UsageError(f"bad scale list {text!r}: {exc}") from exc


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"bad integer list {text!r}") from exc


def _need_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p


def _load_profile(path: Optional[str], seed: int) -> DetectorProfile:
    if path is None:
        return DetectorProfile(seed=seed)
    p = _need_file(path)
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise CorpusFormatError(f"{path}: profile must be a JSON object")
    try:
        return DetectorProfile.from_dict(doc).with_seed(seed)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{path}: invalid profile: {exc}") from exc


def _load_model(path: str) -> RegressorModel:
    p = _need_file(path)
    try:
        return model_from_dict(json.loads(p.read_text()))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorpusFormatError(f"{path}: {exc}") from exc


def _load_corpus(path: str):
    return read_corpus(_need_file(path))


def _select(snippets, split: str, train_fraction: float):
    if split == "all":
        return list(snippets)
    train, val = split_snippets(snippets, train_fraction)
    chosen = train if split == "train" else val
    if not chosen:
        raise UsageError(f"the {split} split of this corpus is empty")
    return chosen


def _dump_json(doc, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_")


# ---------------------------------------------------------------------------
# subcommands


def cmd_profile(args) -> int:
    DetectorProfile(n_classes=args.classes, seed=args.seed).save(args.out)
    return EXIT_OK


def cmd_gen_corpus(args) -> int:
    if args.snippets < 1 or args.frames < 1 or args.classes < 1:
        raise UsageError("--snippets, --frames and --classes must be >= 1")
    if args.profile is not None:
        profile = _load_profile(args.profile, args.seed)
        if profile.n_classes != args.classes:
            raise UsageError(f"--classes {args.classes} disagrees with profile n_classes {profile.n_classes}")
    cfg = CorpusConfig(n_snippets=args.snippets, n_frames=args.frames, n_classes=args.classes)
    write_corpus(generate_corpus(cfg, args.seed), args.out)
    return EXIT_OK


def cmd_gen_labels(args) -> int:
    scales = _scales(args.scales)
    snippets = _select(_load_corpus(args.corpus), args.split, args.train_fraction)
    profile = _load_profile(args.profile, args.seed)
    labels = generate_scale_labels(snippets, SyntheticDetector(profile), scales, args.seed)
    write_labels(labels, args.out, scales)
    return EXIT_OK


def cmd_train(args) -> int:
    labels, _ = read_labels(_need_file(args.labels))
    try:
        trainer = TrainerState(lr=args.lr, decay=args.decay, decay_epoch=args.decay_epoch,
                               epochs=args.epochs, batch_size=args.batch_size, seed=args.seed)
        config = RegressorConfig(channels=labels[0].features.shape[0], pooling=args.pooling)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    try:
        model, trace = train_regressor(labels, trainer, config)
    except FloatingPointError as exc:
        raise UsageError(str(exc)) from exc
    model.save(args.out)
    if args.loss_trace:
        with open(args.loss_trace, "w") as fh:
            for step, loss in enumerate(trace):
                fh.write(f"{step},{loss!r}\n")
    return EXIT_OK


def cmd_run(args) -> int:
    scales = _scales(args.scales)
    try:
        policy = PolicyConfig.parse(args.policy, scales)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    profile = _load_profile(args.profile, args.seed)
    if policy.kind == "adascale":
        if args.model is None:
            raise UsageError("--policy adascale needs --model")
        policy.model = _load_model(args.model)
        if policy.model.config.channels != profile.feature_channels:
            raise UsageError("model channel count does not match the profile's feature channels")
    snippets = _select(_load_corpus(args.corpus), args.split, args.train_fraction)
    report = run_policy(snippets, SyntheticDetector(profile), policy, args.seed)
    doc = report.to_dict()
    doc["seed"] = args.seed
    doc["scales"] = list(scales.scales)
    doc["split"] = args.split
    if policy.kind == "adascale":
        doc["regressor_outputs"] = [float(t) for t in report.extras["outputs"]]
    _dump_json(doc, args.report)
    if args.trace:
        _write_trace(args.trace, report)
    return EXIT_OK


def _write_trace(path, report) -> None:
    feats = report.extras.get("features")
    outs = report.extras.get("outputs")
    with open(path, "w") as fh:
        for k, (sid, idx, m) in enumerate(report.scale_trace):
            rec = {"snippet_id": sid, "frame_index": idx, "scale": m}
            if feats is not None:
                rec["output"] = float(outs[k])
                rec["feature_shape"] = list(feats[k].shape)
                rec["features"] = [float(v).hex() for v in feats[k].ravel()]
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def cmd_compare(args) -> int:
    scales = _scales(args.scales)
    tokens = [t for t in args.policies.split(",") if t.strip()]
    seeds = _ints(args.seeds)
    if len(tokens) < 2:
        raise UsageError("--policies needs at least two entries")
    if not seeds:
        raise UsageError("--seeds needs at least one seed")
    try:
        policies = [PolicyConfig.parse(t, scales) for t in tokens]
        trainer = TrainerState(lr=args.lr, decay=args.decay, decay_epoch=args.decay_epoch,
                               epochs=args.epochs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    label_scales = _scales(args.label_scales) if args.label_scales else None
    snippets = _load_corpus(args.corpus)
    profile = _load_profile(args.profile, seeds[0])
    settings = ExperimentSettings(label_scales=label_scales, trainer=trainer,
                                  train_fraction=args.train_fraction)
    try:
        comp = compare_policies(snippets, profile, policies, seeds, settings)
    except (ValueError, FloatingPointError) as exc:
        raise UsageError(str(exc)) from exc

    rows = comp.table()
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = list(rows[0])
        w.writerow(cols)
        for r in rows:
            w.writerow([v if isinstance(v, (str, int)) else repr(float(v)) for v in (r[c] for c in cols)])

    if args.prcurves:
        out = Path(args.prcurves)
        out.mkdir(parents=True, exist_ok=True)
        for row in comp.rows:
            for seed, rep in zip(comp.seeds, row.reports):
                rep.write_pr_csv(out / f"{_slug(row.policy)}_seed{seed}.csv")
    if args.hist:
        out = Path(args.hist)
        out.mkdir(parents=True, exist_ok=True)
        for row in comp.rows:
            edges = row.reports[0].histogram_edges
            counts = np.sum([rep.histogram_counts for rep in row.reports], axis=0)
            with open(out / f"{_slug(row.policy)}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["bin_lo", "bin_hi", "count"])
                for lo, hi, n in zip(edges[:-1], edges[1:], counts):
                    w.writerow([repr(lo), repr(hi), int(n)])
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_split(p, default: str) -> None:
    p.add_argument("--split", choices=SPLITS, default=default,
                   help=f"which snippets to use after the id-hash split (default {default})")
    p.add_argument("--train-fraction", type=float, default=0.8)


def _add_schedule(p) -> None:
    p.add_argument("--epochs", type=float, default=2.0)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--decay-epoch", type=float, default=1.3)
    p.add_argument("--decay", type=float, default=0.1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adascale", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    default_scales = ",".join(str(s) for s in S_REG)

    p = sub.add_parser("profile", help="write the default detector profile as JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=DetectorProfile.n_classes)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("gen-corpus", help="generate a synthetic video corpus (JSON Lines)")
    p.add_argument("--out", required=True)
    p.add_argument("--snippets", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--profile")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("gen-labels", help="compute optimal-scale labels and regressor inputs")
    p.add_argument("--corpus", required=True)
    p.add_argument("--profile")
    p.add_argument("--scales", default=default_scales)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_split(p, "train")
    p.set_defaults(func=cmd_gen_labels)

    p = sub.add_parser("train", help="train the scale regressor on a label file")
    p.add_argument("--labels", required=True)
    _add_schedule(p)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--pooling", choices=("avg", "max"), default="avg")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-trace", help="optional CSV of per-step training loss")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="evaluate one scale policy")
    p.add_argument("--corpus", required=True)
    p.add_argument("--profile")
    p.add_argument("--policy", required=True, help="fixed:M | random | adascale | multiscale")
    p.add_argument("--model")
    p.add_argument("--scales", default=default_scales)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--trace", help="optional JSON Lines log of per-frame scales (and features for adascale)")
    _add_split(p, "val")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="compare policies over several seeds")
    p.add_argument("--corpus", required=True)
    p.add_argument("--profile")
    p.add_argument("--policies", required=True, help="comma-separated, first is the baseline")
    p.add_argument("--seeds", required=True, help="comma-separated integers")
    p.add_argument("--out", required=True)
    p.add_argument("--prcurves")
    p.add_argument("--hist")
    p.add_argument("--scales", default=default_scales, help="default scale set for policies")
    p.add_argument("--label-scales", help="scale set for adascale labels (default: the policy's)")
    p.add_argument("--train-fraction", type=float, default=0.8)
    _add_schedule(p)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "train_fraction", 0.5) is not None and not 0 < getattr(args, "train_fraction", 0.5) < 1:
            raise UsageError("--train-fraction must be in (0, 1)")
        return args.func(args)
    except UsageError as exc:
        print(f"adascale: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CorpusFormatError as exc:
        print(f"adascale: malformed input: {exc}", file=sys.stderr)
        return EXIT_MALFORMED


if __name__ == "__main__":
    sys.exit(main())
