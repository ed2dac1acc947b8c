"""Command-line pipeline: dataset generation through evaluation.

Subcommands mirror the pipeline stages: gen-data, train-che, train-clf,
train-gan, eval, inspect-embeddings. Every command accepts an optional JSON
config file (--config) with sections hierarchy / dataset / che / classifier /
gan / eval; all fields are optional and unknown keys are rejected so a typo in
a weight name fails loudly instead of silently training the wrong thing.
--seed overrides the relevant section's seed.

Each output location is guarded by a lock file for the duration of the run,
so concurrent invocations must target disjoint output paths. Alongside every
output a manifest records the verbatim config, the effective settings, and
sha256 checksums of all inputs; no timestamps, so reruns are byte-identical.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
HIERGAN_LOG={debug,info,warning,error} controls log verbosity (default
warning); logs go to standard error.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .autodiff import CheckpointError, NonFiniteError
from .embed import (
    CheConfig,
    EmbeddingError,
    load_table,
    ranking_accuracy,
    save_table,
    sibling_similarity_gap,
    similarity_csv,
    train_che,
)
from .hierarchy import FIXTURE_TREE, HierarchyError, parse_hierarchy
from .metrics import MetricsError, evaluate, report_csv, report_json
from .models import (
    ClassifierConfig,
    HierClassifier,
    ModelConfig,
    ModelError,
    evaluate_classifier,
    load_classifier,
    load_models,
    save_classifier,
    train_classifier,
)
from .synthdata import (
    DatasetError,
    default_dataset_spec,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .training import (
    TrainConfig,
    TrainingError,
    run_training,
    save_run,
)

log = logging.getLogger("hiergan")


class CliError(Exception):
    """Usage or configuration problem; maps to exit code 1."""


# ------------------------------------------------------------------- config

_SECTION_KEYS = {
    "hierarchy": {"text", "path"},
    "dataset": {"samples_per_leaf", "level_noise", "observation_noise", "seed"},
    "che": {"dim", "margin", "negatives_per_positive", "lr", "epochs", "seed"},
    "classifier": {"epochs", "batch_size", "lr", "beta1", "beta2", "seed"},
    # mode comes from the --mode flag only, never from the file
    "gan": {
        "lambda1",
        "lambda2",
        "batch_size",
        "gan_lr",
        "emb_lr",
        "beta1",
        "beta2",
        "steps_per_stage",
        "eval_every",
        "eval_n_per_class",
        "che_margin",
        "che_negatives",
        "embed_dim",
        "seed",
    },
    "eval": {"n_per_class", "seed"},
}


def load_config(path: str | None) -> dict:
    """Parse and key-check the JSON config; {} when --config is omitted."""
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise CliError(f"config {path} is not valid JSON: {err}") from err
    if not isinstance(raw, dict):
        raise CliError(f"config {path} must be a JSON object")
    unknown = set(raw) - set(_SECTION_KEYS)
    if unknown:
        raise CliError(
            f"config {path} has unknown sections {sorted(unknown)}; "
            f"expected some of {sorted(_SECTION_KEYS)}"
        )
    for name, allowed in _SECTION_KEYS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise CliError(f"config section {name!r} must be a JSON object")
        bad = set(section) - allowed
        if bad:
            raise CliError(
                f"config section {name!r} has unknown keys {sorted(bad)}; "
                f"allowed keys are {sorted(allowed)}"
            )
    return raw


def _section(config: dict, name: str, seed_override: int | None) -> dict:
    merged = dict(config.get(name, {}))
    if seed_override is not None and "seed" in _SECTION_KEYS[name]:
        merged["seed"] = seed_override
    return merged


def resolve_hierarchy(config: dict, hierarchy_file: str | None):
    """Explicit --hierarchy file wins; then the config section; then the
    built-in fixture tree."""
    if hierarchy_file is not None:
        text = Path(hierarchy_file).read_text()
    else:
        section = config.get("hierarchy", {})
        if "text" in section and "path" in section:
            raise CliError("config section 'hierarchy' sets both 'text' and 'path'")
        if "path" in section:
            text = Path(section["path"]).read_text()
        else:
            text = section.get("text", FIXTURE_TREE)
    return parse_hierarchy(text), text


def _build(factory, kwargs: dict, what: str):
    """Construct a config dataclass, turning validation errors into CliError."""
    try:
        return factory(**kwargs)
    except ValueError as err:
        raise CliError(f"bad {what} config: {err}") from err


# ---------------------------------------------------------------- artifacts


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _checksums(paths: dict[str, str | None]) -> dict:
    return {name: {"path": str(p), "sha256": _sha256(p)} for name, p in paths.items() if p}


@contextlib.contextmanager
def output_lock(target: Path, is_dir: bool):
    """Exclusive lock file next to (or inside) the output for the run's
    duration; a live lock means another run targets the same path."""
    if is_dir:
        target.mkdir(parents=True, exist_ok=True)
        lock = target / ".lock"
    else:
        target.parent.mkdir(parents=True, exist_ok=True)
        lock = Path(str(target) + ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(
            f"output {target} is locked by another run (remove stale {lock} if no run is active)"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(lock)


def _write_manifest(out: Path, is_dir: bool, payload: dict) -> None:
    dest = out / "manifest.json" if is_dir else Path(str(out) + ".manifest.json")
    dest.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _manifest(command: str, config: dict, args, effective: dict, inputs: dict) -> dict:
    return {
        "command": command,
        "config_file": config,  # verbatim echo of the parsed JSON
        "seed_override": args.seed,
        "effective": effective,
        "inputs": inputs,
    }


# ------------------------------------------------------------------ handlers


def cmd_gen_data(args) -> int:
    config = load_config(args.config)
    h, h_text = resolve_hierarchy(config, None)
    section = _section(config, "dataset", args.seed)
    spec = _build(
        lambda **kw: dataclasses.replace(default_dataset_spec(h), **kw), section, "dataset"
    )
    out = Path(args.out)
    with output_lock(out, is_dir=False):
        dataset = generate_dataset(spec)
        save_dataset(dataset, out)
        digest = _sha256(out)
        effective = {
            "samples_per_leaf": spec.samples_per_leaf,
            "level_noise": list(spec.level_noise),
            "observation_noise": spec.observation_noise,
            "seed": spec.seed,
            "hierarchy_text": h_text,
        }
        _write_manifest(
            out,
            False,
            _manifest("gen-data", config, args, effective, {})
            | {"output_sha256": digest},
        )
    print(f"{digest}  {out}")
    log.info("dataset: %d train / %d test samples", len(dataset.train), len(dataset.test))
    return 0


def cmd_train_che(args) -> int:
    config = load_config(args.config)
    h, h_text = resolve_hierarchy(config, args.hierarchy)
    cfg = _build(CheConfig, _section(config, "che", args.seed), "che")
    out = Path(args.out)
    with output_lock(out, is_dir=False):
        table = train_che(h, cfg)
        save_table(out, table)
        acc = ranking_accuracy(table, h, cfg.negatives_per_positive, seed=cfg.seed)
        gap = sibling_similarity_gap(table, h)
        effective = dataclasses.asdict(cfg) | {"hierarchy_text": h_text}
        inputs = _checksums({"hierarchy": args.hierarchy})
        _write_manifest(
            out,
            False,
            _manifest("train-che", config, args, effective, inputs)
            | {"ranking_accuracy": acc, "sibling_similarity_gap": gap, "output_sha256": _sha256(out)},
        )
    print(f"ranking_accuracy {acc:.4f}")
    print(f"sibling_similarity_gap {gap:.4f}")
    return 0


def cmd_train_clf(args) -> int:
    config = load_config(args.config)
    cfg = _build(ClassifierConfig, _section(config, "classifier", args.seed), "classifier")
    dataset = load_dataset(args.data)
    h = dataset.spec.hierarchy
    out = Path(args.out)
    with output_lock(out, is_dir=False):
        clf = HierClassifier.init(
            h, args.resolution * args.resolution, ModelConfig(), np.random.default_rng(cfg.seed)
        )
        train_classifier(clf, dataset, args.resolution, cfg)
        save_classifier(clf, out)
        scores = evaluate_classifier(clf, dataset.test)
        effective = dataclasses.asdict(cfg) | {"resolution": args.resolution}
        _write_manifest(
            out,
            False,
            _manifest("train-clf", config, args, effective, _checksums({"data": args.data}))
            | {"held_out": scores, "output_sha256": _sha256(out)},
        )
    print("level,accuracy")
    for k, acc in enumerate(scores["levels"], start=1):
        print(f"{k},{acc:.4f}")
    print(f"leaf,{scores['leaf']:.4f}")
    print(f"path_consistent,{scores['path_consistent']:.4f}")
    return 0


def cmd_train_gan(args) -> int:
    config = load_config(args.config)
    if args.mode == "seg" and args.embeddings is None:
        raise CliError("--embeddings is required for seg mode (a pre-trained table to freeze)")
    if args.mode != "seg" and args.embeddings is not None:
        raise CliError(f"--embeddings is only valid with seg mode, not {args.mode}")
    cfg = _build(TrainConfig, _section(config, "gan", args.seed) | {"mode": args.mode}, "gan")
    dataset = load_dataset(args.data)
    h = dataset.spec.hierarchy
    clf_lo = load_classifier(args.clf8)
    clf_hi = load_classifier(args.clf16)
    embeddings = load_table(args.embeddings, h) if args.embeddings else None
    out = Path(args.out)
    with output_lock(out, is_dir=True):
        art = run_training(dataset, h, cfg, clf_lo, clf_hi, embeddings)
        inputs = _checksums(
            {"data": args.data, "clf8": args.clf8, "clf16": args.clf16, "embeddings": args.embeddings}
        )
        # save_run's own manifest fields already record the effective config
        save_run(art, out, extra_manifest=_manifest("train-gan", config, args, {}, inputs))
    if art.aborted:
        print(
            f"error: run aborted at step {art.abort_step}: {art.abort_reason} "
            f"(artifacts as of the last completed step are in {out})",
            file=sys.stderr,
        )
        return 2
    final_step, final = art.reports[-1]
    print(
        f"final step {final_step}: desk_fid {final.avg_desk_fid:.4f} "
        f"desk_is {final.avg_desk_is:.4f} consistency {final.avg_consistency_rate:.4f}"
    )
    return 0


def cmd_eval(args) -> int:
    config = load_config(args.config)
    section = _section(config, "eval", args.seed)
    n_per_class = int(section.get("n_per_class", 500))
    seed = int(section.get("seed", 0))
    dataset = load_dataset(args.data)
    h = dataset.spec.hierarchy
    run = Path(args.run)
    table = load_table(run / "embeddings.hgck", h)
    models = load_models(run / "models.hgck", table)
    out = Path(args.out)
    with output_lock(out, is_dir=False):
        report = evaluate(models, table, dataset, h, n_per_class=n_per_class, seed=seed)
        out.write_text(report_csv(report))
        json_out = out.with_suffix(".json")
        json_out.write_text(report_json(report))
        inputs = _checksums(
            {
                "data": args.data,
                "models": run / "models.hgck",
                "embeddings": run / "embeddings.hgck",
            }
        )
        effective = {"n_per_class": n_per_class, "seed": seed}
        _write_manifest(
            out, False, _manifest("eval", config, args, effective, inputs)
        )
    print(
        f"desk_fid {report.avg_desk_fid:.4f} desk_is {report.avg_desk_is:.4f} "
        f"consistency {report.avg_consistency_rate:.4f}"
    )
    return 0


def cmd_inspect_embeddings(args) -> int:
    h, _ = resolve_hierarchy({}, args.hierarchy)
    table = load_table(args.embeddings, h)
    out = Path(args.out)
    with output_lock(out, is_dir=False):
        out.write_text(similarity_csv(table))
        inputs = _checksums({"embeddings": args.embeddings, "hierarchy": args.hierarchy})
        _write_manifest(out, False, _manifest("inspect-embeddings", {}, args, {}, inputs))
    print(f"wrote {len(table.names)}x{len(table.names)} similarity matrix to {out}")
    return 0


# --------------------------------------------------------------------- main


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we use 1
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hiergan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(handler=handler)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        return p

    p = add("gen-data", cmd_gen_data, "generate the synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset file")

    p = add("train-che", cmd_train_che, "train class-hierarchy embeddings")
    p.add_argument("--hierarchy", help="hierarchy text file (default: config or fixture tree)")
    p.add_argument("--out", required=True, help="output embedding checkpoint")

    p = add("train-clf", cmd_train_clf, "train the frozen hierarchical classifier")
    p.add_argument("--data", required=True, help="dataset file from gen-data")
    p.add_argument("--resolution", type=int, required=True, choices=(8, 16))
    p.add_argument("--out", required=True, help="output classifier checkpoint")

    p = add("train-gan", cmd_train_gan, "adversarial training in one of the four modes")
    p.add_argument("--mode", required=True, choices=("treegan", "npc", "seg", "flat"))
    p.add_argument("--data", required=True, help="dataset file from gen-data")
    p.add_argument("--clf8", required=True, help="8x8 classifier checkpoint")
    p.add_argument("--clf16", required=True, help="16x16 classifier checkpoint")
    p.add_argument("--embeddings", help="pre-trained embedding checkpoint (seg mode only)")
    p.add_argument("--out", required=True, help="output run directory")

    p = add("eval", cmd_eval, "re-evaluate a finished run")
    p.add_argument("--run", required=True, help="run directory from train-gan")
    p.add_argument("--data", required=True, help="dataset file from gen-data")
    p.add_argument("--out", required=True, help="output metrics CSV (JSON written alongside)")

    p = sub.add_parser("inspect-embeddings", help="dump the class similarity matrix")
    p.set_defaults(handler=cmd_inspect_embeddings, config=None, seed=None)
    p.add_argument("--embeddings", required=True, help="embedding checkpoint")
    p.add_argument("--hierarchy", help="hierarchy text file (default: fixture tree)")
    p.add_argument("--out", required=True, help="output CSV")

    return parser


def _configure_logging() -> None:
    level = os.environ.get("HIERGAN_LOG", "warning").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR"):
        level = "WARNING"
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level))


def main(argv=None) -> int:
    _configure_logging()
    try:
        args = build_parser().parse_args(argv)
        return args.handler(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except FileNotFoundError as err:
        print(f"error: input file not found: {err.filename}", file=sys.stderr)
        return 1
    except (HierarchyError, TrainingError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except NonFiniteError as err:
        print(f"error: non-finite loss: {err}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, ModelError, EmbeddingError, MetricsError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
