"""``gashis`` command-line interface.

Commands: ``gen-data``, ``train``, ``eval``, ``attack``, ``export-features``
and ``report``.  Every command writes ``manifest-<command>.json`` next to its
outputs.  Exit codes: 0 success, 2 configuration, 3 data, 4 numeric
failure, 5 I/O.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, describe, resolve
from .evaluation import EvalReport, confusion, export_features, metrics, predict
from .model import GasHisTransformer, ModelConfig
from .preprocess import (
    DataError,
    Dataset,
    DegenerateImageError,
    SplitPlan,
    apply_plan,
    load_image_folder,
    prepare,
    save_image_folder,
    split_dataset,
    synth_dataset,
    tile_patches,
)
from .robustness import EPSILONS, KINDS, sweep
from .tensor import ContractError
from .training import NumericError, TrainConfig, fit, read_epoch_log, write_epoch_log

log = logging.getLogger("gashis")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5

CHECKPOINT = "model.ckpt"
EPOCH_LOG = "epochs.csv"
SPLIT_FILE = "split.tsv"
RUN_CONFIG = "config.ini"


# ---------------------------------------------------------------------------------
# run bookkeeping
# ---------------------------------------------------------------------------------

def build_id() -> str:
    """``<version>-g<hash>``: package version plus a digest of the installed sources."""
    from . import __version__

    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}-g{h.hexdigest()[:12]}"


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Tracks the files a command creates; removes them all if the command fails."""

    def __init__(self, command: str, out: Path, cfg: RunConfig | None, argv: Sequence[str]):
        self.command, self.out, self.cfg, self.argv = command, out, cfg, list(argv)
        self.created: list[Path] = []
        self.made_dirs: list[Path] = []

    def mkdir(self, path: Path) -> Path:
        missing = []
        p = path
        while not p.exists():
            missing.append(p)
            p = p.parent
        path.mkdir(parents=True, exist_ok=True)
        self.made_dirs.extend(reversed(missing))
        return path

    def path(self, name: str) -> Path:
        self.mkdir(self.out)
        p = self.out / name
        self.created.append(p)
        return p

    def track(self, paths: Sequence[Path]) -> None:
        self.created.extend(paths)

    def rollback(self) -> None:
        for p in reversed(self.created):
            if p.is_file():
                p.unlink()
        for d in sorted(self.made_dirs, key=lambda d: len(d.parts), reverse=True):
            if d.is_dir() and not any(d.iterdir()):
                d.rmdir()

    def write_manifest(self, seed: int | None, extra: dict | None = None) -> Path:
        outputs = {str(p.relative_to(self.out)) if p.is_relative_to(self.out) else str(p): sha256(p)
                   for p in self.created if p.is_file()}
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "build": build_id(),
            "seed": seed,
            "config": self.cfg.echo() if self.cfg is not None else None,
            "outputs": dict(sorted(outputs.items())),
        }
        if extra:
            manifest.update(extra)
        path = self.path(f"manifest-{self.command}.json")
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


# ---------------------------------------------------------------------------------
# config to objects
# ---------------------------------------------------------------------------------

def model_config(cfg: RunConfig, classes: int) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        scale=m["scale"], classes=classes, optimization=m["optimization"], p=m["p"], dtype=m["dtype"],
        seed=m["seed"], input_size=m["input_size"], divisor=m["divisor"], heads=m["heads"],
        eq1_literal=m["eq1_literal"], dropconnect_samples=m["dropconnect_samples"],
        normalize_input=m["normalize_input"],
    )


def train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        epochs=t["epochs"], batch=t["batch"], lr=t["lr"], eps=t["eps"], betas=(t["beta1"], t["beta2"]),
        weight_decay=t["weight_decay"], plateau_patience=t["plateau_patience"],
        plateau_factor=t["plateau_factor"], seed=t["seed"],
    )


def attack_kinds(cfg: RunConfig) -> list[str]:
    text = cfg["attack"]["kinds"]
    if text == "all":
        return list(KINDS)
    kinds = [k.strip() for k in text.split(",") if k.strip()]
    bad = [k for k in kinds if k not in KINDS]
    if bad or not kinds:
        raise ConfigError([f"[attack] kinds: unknown {bad or text!r}; choose from {list(KINDS)} or 'all'"])
    return kinds


def attack_levels(cfg: RunConfig) -> list[float]:
    text = cfg["attack"]["levels"]
    if text == "paper":
        return list(EPSILONS)
    try:
        levels = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError([f"[attack] levels: expected 'paper' or numbers, got {text!r}"]) from None
    if not levels or any(v < 0 for v in levels):
        raise ConfigError([f"[attack] levels: need non-negative epsilons, got {text!r}"])
    return levels


def validate(cfg: RunConfig, classes: int = 2) -> None:
    """Construct every typed config once, collecting all semantic problems."""
    problems = []
    for name, build in (("model", lambda: model_config(cfg, classes)), ("train", lambda: train_config(cfg)),
                        ("attack", lambda: attack_kinds(cfg)), ("attack", lambda: attack_levels(cfg))):
        try:
            build()
        except ConfigError as exc:
            problems.extend(exc.problems)
        except ContractError as exc:
            problems.append(f"[{name}] {exc}")
    d = cfg["data"]
    for key in ("synth_classes", "synth_per_class", "synth_size"):
        if d[key] < (2 if key == "synth_classes" else 1):
            problems.append(f"[data] {key} = {d[key]} is too small")
    if d["patch"] < 0:
        problems.append(f"[data] patch = {d['patch']} must be >= 0")
    if problems:
        raise ConfigError(problems)


# ---------------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------------

def load_source(cfg: RunConfig) -> Dataset:
    d = cfg["data"]
    if d["root"]:
        data = load_image_folder(d["root"])
    else:
        data = synth_dataset(d["synth_classes"], d["synth_per_class"], d["synth_size"], d["synth_seed"])
    if d["patch"]:
        data = data.map(lambda s: tile_patches(s, d["patch"]))
    return data


def splits(cfg: RunConfig, plan: SplitPlan | None = None) -> tuple[SplitPlan, dict[str, Dataset]]:
    """Split the source data and bring each part to the model input size."""
    data = load_source(cfg)
    d = cfg["data"]
    if plan is None:
        plan, train, val, test = split_dataset(data, d["split"], d["split_seed"], d["balance"])
    else:
        train, val, test = apply_plan(data, plan)
    size = model_config(cfg, data.num_classes).input_size
    parts = {
        "train": prepare(train, size, d["augment"]),
        "val": prepare(val, size, d["augment"]),
        "test": prepare(test, size, d["augment"]),
    }
    for name, part in parts.items():
        if name != "test" and len(part) == 0:
            raise DataError(f"the {name} split is empty; add images or change [data] split")
    return plan, parts


def run_splits(run_dir: Path, cfg: RunConfig) -> dict[str, Dataset]:
    plan_path = run_dir / SPLIT_FILE
    if not plan_path.is_file():
        raise DataError(f"{plan_path} not found; run 'train' first")
    _, parts = splits(cfg, SplitPlan.from_manifest(plan_path.read_text()))
    return parts


def load_run_model(run_dir: Path) -> GasHisTransformer:
    path = run_dir / CHECKPOINT
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found; run 'train' first")
    return ckpt.load_checkpoint(path)


# ---------------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig, run: Run) -> int:
    d = cfg["data"]
    data = synth_dataset(d["synth_classes"], d["synth_per_class"], d["synth_size"], d["synth_seed"])
    run.mkdir(run.out)
    run.track(save_image_folder(data, run.out))
    run.write_manifest(d["synth_seed"], {"counts": data.class_counts()})
    print(f"wrote {len(data)} images in {data.num_classes} classes to {run.out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig, run: Run) -> int:
    plan, parts = splits(cfg)
    classes = parts["train"].num_classes
    mcfg, tcfg = model_config(cfg, classes), train_config(cfg)
    model = GasHisTransformer(mcfg)
    log.info("training %s model (%d parameters) on %d images", mcfg.scale, len(model.parameters()), len(parts["train"]))
    run.path(SPLIT_FILE).write_text(plan.to_manifest())
    run.path(RUN_CONFIG).write_text(cfg.to_ini())
    _, records = fit(model, parts["train"], parts["val"], tcfg)
    write_epoch_log(records, run.path(EPOCH_LOG))
    ckpt.save_checkpoint(model, run.path(CHECKPOINT), {"class_names": parts["train"].class_names})
    last = records[-1]
    run.write_manifest(tcfg.seed, {"final": {"epoch": last.epoch, "val_acc": last.val_acc, "train_acc": last.train_acc}})
    print(f"epoch {last.epoch}: train_acc {last.train_acc:.4f} val_acc {last.val_acc:.4f} -> {run.out / CHECKPOINT}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig, run: Run) -> int:
    split = args.split
    model = load_run_model(run.out)
    data = run_splits(run.out, cfg)[split]
    preds = predict(model, data.images(), cfg["train"]["batch"])
    report = metrics(confusion(preds, data.labels(), data.num_classes))
    report.write(run.path(f"eval-{split}.json"))
    report.write(run.path(f"eval-{split}.csv"))
    run.write_manifest(cfg["model"]["seed"], {"split": split})
    print(f"{split} ({len(data)} images): {report}")
    return EXIT_OK


def cmd_attack(args, cfg: RunConfig, run: Run) -> int:
    a = cfg["attack"]
    model = load_run_model(run.out)
    data = run_splits(run.out, cfg)[a["split"]]
    overrides = {"steps": a["pgd_steps"], "step_size": a["pgd_step_size"], "max_iters": a["deepfool_max_iters"],
                 "overshoot": a["deepfool_overshoot"], "erlang_k": a["erlang_k"]}
    if a["pgd_step_size"] is not None and any(0 < e < a["pgd_step_size"] for e in attack_levels(cfg)):
        raise ConfigError([f"[attack] pgd_step_size {a['pgd_step_size']} exceeds the smallest epsilon"])
    result = sweep(model, data, attack_kinds(cfg), a["seed"], epsilons=attack_levels(cfg), debug=a["debug"],
                   batch=cfg["train"]["batch"], spec_overrides=overrides)
    result.write_csv(run.path("sweep.csv"))
    result.write_long(run.path("sweep-long.csv"))
    run.write_manifest(a["seed"], {"failures": result.total_failures, "levels": result.epsilons})
    print(f"{len(result.kinds)} kinds x {len(result.epsilons)} levels on {len(data)} images, "
          f"{result.total_failures} failed perturbations -> {run.out / 'sweep.csv'}")
    return EXIT_OK


def cmd_export(args, cfg: RunConfig, run: Run) -> int:
    model = load_run_model(run.out)
    data = run_splits(run.out, cfg)[args.split]
    path = run.path(f"features-{args.split}.csv")
    feats = export_features(model, data, path, cfg["train"]["batch"])
    run.write_manifest(cfg["model"]["seed"], {"split": args.split, "feature_dim": int(feats.shape[1])})
    print(f"{len(data)} rows x {feats.shape[1]} features -> {path}")
    return EXIT_OK


def cmd_report(args, cfg: RunConfig, run: Run) -> int:
    out = run.out
    lines = [f"# Run report: {out}", ""]
    manifest = out / "manifest-train.json"
    if manifest.is_file():
        m = json.loads(manifest.read_text())
        lines += [f"- build: `{m['build']}`", f"- seed: {m['seed']}",
                  f"- model: {m['config']['model']['scale']} scale, {m['config']['model']['dtype']}", ""]
    if (out / EPOCH_LOG).is_file():
        recs = read_epoch_log(out / EPOCH_LOG)
        best = max(recs, key=lambda r: r.val_acc)
        lines += ["## Training", "", f"{len(recs)} epochs; final train acc {recs[-1].train_acc:.4f}, "
                  f"val acc {recs[-1].val_acc:.4f}; best val acc {best.val_acc:.4f} at epoch {best.epoch}; "
                  f"final lr {recs[-1].lr:g}", ""]
    evals = sorted(out.glob("eval-*.json"))
    if evals:
        lines += ["## Evaluation", "", "| split | Pre | Rec | F1 | Acc |", "|---|---|---|---|---|"]
        for p in evals:
            r = EvalReport.from_json(p.read_text())
            lines.append(f"| {p.stem[5:]} | " + " | ".join(r.to_csv_row()) + " |")
        lines.append("")
    if (out / "sweep.csv").is_file():
        with open(out / "sweep.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        lines += ["## Robustness (percent)", "", "| " + " | ".join(rows[0]) + " |",
                  "|" + "---|" * len(rows[0])]
        lines += ["| " + " | ".join(r) + " |" for r in rows[1:]]
        lines.append("")
    if len(lines) == 2:
        raise FileNotFoundError(f"{out} holds no run outputs to report on")
    text = "\n".join(lines)
    run.path("report.md").write_text(text + "\n")
    print(text)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "attack": cmd_attack,
    "export-features": cmd_export,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI configuration file")
    p.add_argument("--profile", default=None, choices=["paper", "desk"], help="base hyper-parameter profile")
    p.add_argument("--set", dest="sets", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one configuration value (repeatable)")
    p.add_argument("--out", help="output directory ([output] dir)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gashis", description=__doc__.split("\n")[0])
    parser.add_argument("--print-config", action="store_true", help="print every config key with its default")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="write a synthetic image-folder dataset")
    _common(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--n", type=int, help="images per class")
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train and write checkpoint, epoch log and split")
    _common(p)
    p.add_argument("--data", help="image folder ([data] root); omit for synthetic data")
    p.add_argument("--scale", choices=["paper", "desk"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int, help="model and training seed")

    for name, help_ in (("eval", "evaluate a trained run"), ("export-features", "write fused features as CSV")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.add_argument("--split", choices=["train", "val", "test"], default="test")

    p = sub.add_parser("attack", help="robustness sweep over perturbations and epsilons")
    _common(p)
    p.add_argument("--kinds", help="comma-separated kinds or 'all'")
    p.add_argument("--levels", help="'paper' or comma-separated epsilons")
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--seed", type=int)
    p.add_argument("--debug", action="store_true", help="prepend an epsilon = 0 column")

    p = sub.add_parser("report", help="summarize the outputs of a run directory")
    _common(p)
    return parser


def flag_overrides(args) -> dict[str, dict[str, str]]:
    o: dict[str, dict[str, str]] = {}

    def put(section: str, key: str, value) -> None:
        if value is not None:
            o.setdefault(section, {})[key] = str(value).lower() if isinstance(value, bool) else str(value)

    put("output", "dir", args.out)
    c = args.command
    if c == "gen-data":
        put("data", "synth_classes", args.classes)
        put("data", "synth_per_class", args.n)
        put("data", "synth_size", args.size)
        put("data", "synth_seed", args.seed)
    elif c == "train":
        put("data", "root", args.data)
        put("model", "scale", args.scale)
        put("train", "epochs", args.epochs)
        put("train", "batch", args.batch)
        put("train", "lr", args.lr)
        put("model", "seed", args.seed)
        put("train", "seed", args.seed)
    elif c == "attack":
        put("attack", "kinds", args.kinds)
        put("attack", "levels", args.levels)
        put("attack", "split", args.split)
        put("attack", "seed", args.seed)
        if args.debug:
            put("attack", "debug", True)
    return o


def _layers(args, problems: list[str]) -> list[tuple[str, str]]:
    layers = []
    if args.command not in ("gen-data", "train"):
        # commands reusing a run start from the configuration it was trained with
        out = args.out
        if out is None and args.config is not None and args.config.is_file():
            probe = resolve("paper", [(str(args.config), args.config.read_text())])
            out = probe["output"]["dir"]
        saved = Path(out or resolve()["output"]["dir"]) / RUN_CONFIG
        if saved.is_file():
            layers.append((str(saved), saved.read_text()))
    if args.config is not None:
        try:
            layers.append((str(args.config), args.config.read_text()))
        except OSError as exc:
            problems.append(f"--config {args.config}: {exc.strerror or exc}")
    return layers


def load_config(args) -> RunConfig:
    problems: list[str] = []
    layers = _layers(args, problems)
    profile = args.profile
    if profile is None:
        profile = "desk" if getattr(args, "scale", None) == "desk" else "paper"
    try:
        cfg = resolve(profile, layers, flag_overrides(args), args.sets)
    except ConfigError as exc:
        raise ConfigError(problems + exc.problems) from None
    if problems:
        raise ConfigError(problems)
    validate(cfg)
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.print_config:
        print(describe())
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = None
    try:
        cfg = load_config(args)
        run = Run(args.command, Path(cfg["output"]["dir"]), cfg, argv)
        return COMMANDS[args.command](args, cfg, run)
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, str(exc)
    except (DataError, DegenerateImageError) as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    except NumericError as exc:
        code, msg = EXIT_NUMERIC, f"numeric failure: {exc}"
    except (OSError, ckpt.CheckpointError) as exc:
        code, msg = EXIT_IO, f"I/O error: {exc}"
    except ContractError as exc:
        code, msg = EXIT_DATA, f"contract violation: {exc}"
    if run is not None:
        run.rollback()
    print(f"gashis {args.command}: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
