"""Command-line entry point.

Exit codes: 0 success, 1 internal failure, 2 invalid usage or input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .attention import attention_record, dump_attention
from .checkpoint import CheckpointError, load_model, save_model
from .datasets import (
    SchemaError,
    SensorSequence,
    SyntheticSpec,
    generate_synthetic,
    load_csv,
    load_dir,
    write_csv,
)
from .encoder import EncoderConfig
from .evaluation import (
    CASES,
    PRESETS,
    Preset,
    build_case_data,
    experiment_spec,
    format_table,
    get_preset,
    run_case,
    vocab_for,
)
from .localization import LocalizationConfig, localization_record, localize_steps, write_localization, write_plot_csv
from .model import RANModel
from .training import TrainConfig, evaluate, train

log = logging.getLogger("ran_har")


class UsageError(Exception):
    """Bad flags, files or values; maps to exit code 2."""


# config files ---------------------------------------------------------------

TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
MODEL_KEYS = {"hidden_size", "attention_width", "embedding_dim"}
ENCODER_KEYS = {f.name for f in fields(EncoderConfig)}
WINDOW_KEYS = {"window_length", "stride", "ambiguity_margin", "train_subjects"}
LOCALIZATION_KEYS = {"mean_duration", "threshold"}
SYNTHETIC_KEYS = {f.name for f in fields(SyntheticSpec)} - {"classes"}


def read_keyvalue(path, allowed: set[str]) -> dict:
    """Parse a flat YAML mapping, rejecting unknown keys with their line number."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    try:
        node = yaml.compose(text)
        values = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f":{mark.line + 1}" if mark is not None else ""
        raise UsageError(f"{path}{where}: {getattr(exc, 'problem', exc)}") from None
    if values is None:
        return {}
    if not isinstance(values, dict):
        raise UsageError(f"{path}:1: expected key: value lines")
    for key_node, _ in node.value:
        if key_node.value not in allowed:
            raise UsageError(f"{path}:{key_node.start_mark.line + 1}: unknown key {key_node.value!r}")
    return values


def resolve_preset(name: str, overrides: dict) -> Preset:
    """Apply config-file/flag overrides to a named preset."""
    preset = get_preset(name)
    train_kw = {k: v for k, v in overrides.items() if k in TRAIN_KEYS}
    enc_kw = {k: v for k, v in overrides.items() if k in ENCODER_KEYS}
    if "channels_per_stage" in enc_kw:
        enc_kw["channels_per_stage"] = tuple(enc_kw["channels_per_stage"])
    model_kw = {k: v for k, v in overrides.items() if k in MODEL_KEYS}
    try:
        tc = replace(preset.train, **train_kw)
        enc = replace(preset.model.encoder, **enc_kw)
        model = replace(preset.model, encoder=enc, max_steps=tc.T, **model_kw)
        synthetic = preset.synthetic
        if "window_length" in overrides:
            synthetic = replace(synthetic, window_length=int(overrides["window_length"]))
        if "mean_duration" in overrides:
            synthetic = replace(synthetic, activity_duration=float(overrides["mean_duration"]))
        kw = {k: overrides[k] for k in ("stride", "ambiguity_margin", "train_subjects") if k in overrides}
        return replace(preset, train=tc, model=model, synthetic=synthetic, **kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


# commands --------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = get_preset(args.preset).synthetic if args.preset else SyntheticSpec()
    if args.spec:
        values = read_keyvalue(args.spec, SYNTHETIC_KEYS)
        for key in ("gap_range", "orders"):
            if key in values:
                values[key] = tuple(values[key])
        try:
            spec = replace(spec, **values)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"{args.spec}: {exc}") from None
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        sequences = generate_synthetic(spec, args.seed)
        by_subject: dict[str, list[SensorSequence]] = {}
        for seq in sequences:
            by_subject.setdefault(seq.subject_id, []).append(seq)
        for subject, seqs in by_subject.items():
            write_csv(seqs, out / f"{subject}.csv", out / f"{subject}.annotations.csv")
        manifest = {"seed": args.seed, "spec": _synthetic_dict(spec)}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc.strerror or exc}") from None
    print(f"wrote {len(sequences)} sequences for {len(by_subject)} subjects to {out}")
    return 0


def _synthetic_dict(spec: SyntheticSpec) -> dict:
    d = asdict(spec)
    d["classes"] = {k: asdict(v) for k, v in spec.classes.items()}
    return d


def _load_data(path) -> list[SensorSequence]:
    try:
        sequences = load_dir(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    if not sequences:
        raise UsageError(f"no sensor CSV files in {path}")
    return sequences


def _windowing(preset: Preset, sequences: list[SensorSequence]) -> Preset:
    """Keep the preset but take the sampling rate from the data."""
    rate = sequences[0].sampling_rate
    return replace(preset, synthetic=replace(preset.synthetic, sampling_rate=rate))


def cmd_train(args) -> int:
    overrides = read_keyvalue(args.config, TRAIN_KEYS | MODEL_KEYS | ENCODER_KEYS | WINDOW_KEYS | LOCALIZATION_KEYS) if args.config else {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.lr is not None:
        overrides["learning_rate"] = args.lr
    if args.seed is not None:
        overrides["seed"] = args.seed
    preset = resolve_preset(args.preset, overrides)
    sequences = _load_data(args.data)
    preset = _windowing(preset, sequences)
    try:
        spec = experiment_spec(args.case)
        train_set, test_set = build_case_data(spec, preset, sequences=sequences)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not train_set:
        raise UsageError(f"case {args.case}: no training windows in {args.data}")
    vocab = vocab_for(train_set + test_set)
    model = RANModel.create(preset.model, vocab, train_set[0].window.shape[1], seed=preset.train.seed)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.jsonl")
    result = train(model, train_set, preset.train, test_set, log_path=log_path)
    final = result.log[-1]
    extra = {
        "case": args.case,
        "preset": preset.name,
        "windowing": {
            "window_length": preset.synthetic.window_length,
            "stride": preset.stride,
            "ambiguity_margin": preset.ambiguity_margin,
            "train_subjects": preset.train_subjects,
            "sampling_rate": preset.synthetic.sampling_rate,
            "mean_duration": preset.synthetic.activity_duration,
        },
        "metrics": {k: final[k] for k in ("train_loss", "train_acc", "test_acc")},
    }
    save_model(args.out, model, extra)
    print(f"epoch {final['epoch']}: train_acc {final['train_acc']:.4f} test_acc {final['test_acc']}")
    print(f"checkpoint {args.out}; log {log_path}")
    return 0


def _load_ckpt(path) -> tuple[RANModel, dict]:
    try:
        return load_model(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint {path} not found") from None
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None


def cmd_eval(args) -> int:
    model, meta = _load_ckpt(args.ckpt)
    w = meta["windowing"]
    preset = get_preset(meta.get("preset", "paper"))
    preset = replace(
        preset,
        synthetic=replace(preset.synthetic, window_length=w["window_length"], sampling_rate=w["sampling_rate"],
                          activity_duration=w["mean_duration"]),
        stride=w["stride"],
        ambiguity_margin=w["ambiguity_margin"],
        train_subjects=w["train_subjects"],
        model=model.config,
    )
    sequences = _load_data(args.data)
    case = args.case or meta.get("case", 3)
    try:
        train_set, test_set = build_case_data(experiment_spec(case), preset, sequences=sequences)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    chosen = {"train": train_set, "test": test_set, "all": train_set + test_set}[args.split]
    metrics = evaluate(model, chosen)
    report = {"case": case, "split": args.split, **metrics.to_dict()}
    print(json.dumps({k: v for k, v in report.items() if k != "confusion"}, indent=1))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    return 0


def _windows_from_csv(path, window_length: int, stride: int):
    try:
        sequences = load_csv(path)
    except FileNotFoundError:
        raise UsageError(f"input {path} not found") from None
    items = []
    for seq in sequences:
        key = f"{seq.subject_id}:{seq.name}" if seq.name else seq.subject_id
        if seq.length < window_length:
            log.warning("%s shorter than one window; skipped", key)
            continue
        for k, start in enumerate(range(0, seq.length - window_length + 1, stride)):
            items.append((f"{key}/{k}", seq.samples[start : start + window_length]))
    if not items:
        raise UsageError(f"{path}: no complete {window_length}-sample window")
    return items


def cmd_localize(args) -> int:
    if not 0.0 < args.threshold < 1.0:
        raise UsageError(f"--threshold must lie in (0, 1), got {args.threshold}")
    model, meta = _load_ckpt(args.ckpt)
    w = meta["windowing"]
    enc = model.config.encoder
    config = LocalizationConfig(w["sampling_rate"], enc.pool_size, enc.pool_count, w["mean_duration"], args.threshold)
    items = _windows_from_csv(args.input, w["window_length"], args.stride or w["window_length"])
    results = model.decode(np.stack([x for _, x in items]))
    records, plots = [], []
    for (sample_id, _), r in zip(items, results):
        steps = localize_steps(r.alphas[: len(r.labels)], r.labels, config)
        records.append(localization_record(sample_id, steps))
        plots.append((sample_id, steps))
    out = Path(args.out)
    try:
        write_localization(records, out)
        write_plot_csv(plots, out.with_suffix(".csv"), config)
    except OSError as exc:
        raise UsageError(f"cannot write {out}: {exc.strerror}") from None
    print(f"localized {len(records)} windows -> {out} (+ {out.with_suffix('.csv').name})")
    return 0


def cmd_inspect(args) -> int:
    model, meta = _load_ckpt(args.ckpt)
    w = meta["windowing"]
    items = _windows_from_csv(args.input, w["window_length"], args.stride or w["window_length"])
    results = model.decode(np.stack([x for _, x in items]))
    records = [
        attention_record(sample_id, r.alphas, [model.vocab.decode(t) for t in r.tokens])
        for (sample_id, _), r in zip(items, results)
    ]
    try:
        dump_attention(records, args.out)
    except OSError as exc:
        raise UsageError(f"cannot write {args.out}: {exc.strerror}") from None
    print(f"wrote attention maps for {len(records)} windows to {args.out}")
    return 0


def cmd_experiment(args) -> int:
    reports = []
    for case in args.case:
        rep = run_case(case, seed=args.seed, preset=args.preset, classes=["A", "B", "C"])
        rep.pop("model")
        reports.append(rep)
    print(format_table(reports))
    if args.out:
        Path(args.out).write_text(json.dumps(reports, indent=1) + "\n", encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ran-har", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic weakly labelled dataset as CSV")
    g.add_argument("--spec", help="key: value file overriding generator fields")
    g.add_argument("--preset", choices=sorted(PRESETS), help="start from a preset's generator settings")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a CSV data directory")
    t.add_argument("--data", required=True)
    t.add_argument("--case", default="3", help="1-5, or a real-data protocol: unimib, strict, weak")
    t.add_argument("--config", help="key: value file overriding training/model/windowing fields")
    t.add_argument("--preset", choices=sorted(PRESETS), default="paper")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="JSON-lines log path (default: <out>.log.jsonl)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="sequence accuracy of a checkpoint on a data directory")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--case", help="defaults to the case stored in the checkpoint")
    e.add_argument("--split", choices=("train", "test", "all"), default="test")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    loc = sub.add_parser("localize", help="activity regions for every window of a sensor CSV")
    loc.add_argument("--ckpt", required=True)
    loc.add_argument("--input", required=True)
    loc.add_argument("--out", required=True)
    loc.add_argument("--threshold", type=float, default=0.7)
    loc.add_argument("--stride", type=int, help="window stride (default: window length)")
    loc.set_defaults(func=cmd_localize)

    ins = sub.add_parser("inspect-attention", help="per-step attention weights for every window")
    ins.add_argument("--ckpt", required=True)
    ins.add_argument("--input", required=True)
    ins.add_argument("--out", required=True)
    ins.add_argument("--stride", type=int)
    ins.set_defaults(func=cmd_inspect)

    x = sub.add_parser("experiment", help="run synthetic experiment cases end to end")
    x.add_argument("--case", type=int, nargs="+", choices=sorted(CASES), default=[1, 2, 3, 4, 5])
    x.add_argument("--preset", choices=sorted(PRESETS), default="fast")
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--out")
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.exception("internal failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
