"""``ekgnet`` command line: train, eval, verify, synth."""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import kernels
from .checkpoint import load_checkpoint, save_checkpoint
from .densenet import ArchConfig, build_model
from .errors import ConfigError, EKGError, LoadError
from .hsi import (SPLIT_NAMES, Normalization, load_cube, pad_and_extract, save_cube,
                  stratified_split, synthesize_dataset)
from .trainer import TrainConfig, evaluate_split, metrics, train

log = logging.getLogger("ekgnet")

SEED_CONSUMERS = ("init", "shuffle", "data", "split")


def derive_seed(root: int, consumer: str) -> int:
    """Independent per-consumer seed drawn from the root seed."""
    child = np.random.SeedSequence(root).spawn(len(SEED_CONSUMERS))[SEED_CONSUMERS.index(consumer)]
    return int(child.generate_state(1)[0])


# ----------------------------------------------------------------------
# Run configuration
# ----------------------------------------------------------------------
def _int_tuple(text):
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    parts = [p for p in str(text).strip("[]() ").replace(",", " ").split()]
    if not parts:
        raise ValueError("empty list")
    return tuple(int(p) for p in parts)


def parse_ratios(text) -> tuple[int, int, int]:
    if isinstance(text, (tuple, list)):
        vals = tuple(int(v) for v in text)
    else:
        vals = tuple(int(p) for p in str(text).split(":"))
    if len(vals) != 3 or min(vals) < 0 or sum(vals) == 0:
        raise ValueError("expected A:B:C with non-negative integers")
    return vals


def _precision(text):
    if text not in ("f32", "f64"):
        raise ValueError("expected f32 or f64")
    return text


def _suites(text):
    if isinstance(text, (tuple, list)):
        return tuple(text)
    return tuple(s.strip() for s in str(text).split(",") if s.strip())


def _opt(section, parse, default):
    return field(default=default, metadata={"section": section, "parse": parse})


@dataclass
class RunConfig:
    # model
    stages: tuple = _opt("model", _int_tuple, (4, 6, 8))
    k0: int = _opt("model", int, 8)
    groups: int = _opt("model", int, 4)
    experts: int = _opt("model", int, 4)
    reduction: int = _opt("model", int, 16)
    gate_init: float = _opt("model", float, 0.25)
    mapping_blocks: int = _opt("model", int, 2)
    bottleneck: int = _opt("model", int, 4)
    # train
    epochs: int = _opt("train", int, 80)
    lr: float = _opt("train", float, 1e-3)
    beta1: float = _opt("train", float, 0.9)
    beta2: float = _opt("train", float, 0.999)
    eps: float = _opt("train", float, 1e-8)
    batch_size: int = _opt("train", int, 16)
    patience: int = _opt("train", int, 0)
    tau_start: float = _opt("train", float, 30.0)
    tau_end: float = _opt("train", float, 1.0)
    anneal_epochs: int = _opt("train", int, 10)
    # data
    dataset: str = _opt("data", str, "")
    synth_classes: int = _opt("data", int, 3)
    synth_height: int = _opt("data", int, 32)
    synth_width: int = _opt("data", int, 32)
    synth_bands: int = _opt("data", int, 24)
    synth_noise: float = _opt("data", float, 0.05)
    ratios: tuple = _opt("data", parse_ratios, (6, 1, 3))
    block_size: int = _opt("data", int, 15)
    # run
    seed: int = _opt("run", int, 0)
    out: str = _opt("run", str, "")
    precision: str = _opt("run", _precision, "f32")
    suites: tuple = _opt("run", _suites, ())
    checkpoint: str = _opt("run", str, "")

    @classmethod
    def keys(cls) -> dict:
        return {f.name: f for f in fields(cls)}

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def to_strings(self) -> dict:
        return {k: format_value(k, v) for k, v in asdict(self).items()}

    def arch(self, num_classes: int, bands: int) -> ArchConfig:
        return ArchConfig(stages=self.stages, k0=self.k0, groups=self.groups, experts=self.experts,
                          reduction=self.reduction, gate_init=self.gate_init,
                          mapping_blocks=self.mapping_blocks, bottleneck=self.bottleneck,
                          num_classes=num_classes, patch=(self.block_size, self.block_size, bands),
                          dtype="float64" if self.precision == "f64" else "float32")

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                           eps=self.eps, batch_size=self.batch_size, patience=self.patience,
                           seed=derive_seed(self.seed, "shuffle"), tau_start=self.tau_start,
                           tau_end=self.tau_end, anneal_epochs=self.anneal_epochs)


def format_value(key: str, value) -> str:
    if key == "ratios":
        return ":".join(str(v) for v in value)
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


SECTIONS = sorted({f.metadata["section"] for f in fields(RunConfig)})
_TOP = "__top__"


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines with optional ``[section]`` headers."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__",
                                       comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_string(f"[{_TOP}]\n" + fh.read(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    known = RunConfig.keys()
    values = {}
    for section in parser.sections():
        if section != _TOP and section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, value in parser.items(section):
            if key not in known:
                raise ConfigError(f"{path}: unknown key {key!r}")
            home = known[key].metadata["section"]
            if section not in (_TOP, home):
                raise ConfigError(f"{path}: key {key!r} belongs in [{home}], found in [{section}]")
            values[key] = value
    return values


def resolve_config(values: dict) -> RunConfig:
    """Build a validated :class:`RunConfig` from raw (string or typed) values."""
    known = RunConfig.keys()
    parsed = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r}")
        try:
            parsed[key] = known[key].metadata["parse"](raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None
    rc = RunConfig(**parsed)
    if rc.block_size < 1 or rc.block_size % 2 == 0:
        raise ConfigError(f"block_size must be a positive odd integer, got {rc.block_size}")
    for key in ("dataset", "checkpoint"):
        path = getattr(rc, key)
        if path and not os.path.exists(path):
            raise ConfigError(f"{key}: path {path!r} does not exist")
    # fail early on architecture and schedule errors
    rc.arch(2, 1)
    rc.train_config()
    return rc


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = read_config_file(path) if path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return resolve_config(values)


def _require(rc: RunConfig, *keys) -> None:
    for key in keys:
        if not getattr(rc, key):
            raise ConfigError(f"missing required key {key!r}")


# ----------------------------------------------------------------------
# Pipeline
# ----------------------------------------------------------------------
def load_source_cube(rc: RunConfig):
    if rc.dataset:
        return load_cube(rc.dataset)
    return synthesize_dataset(rc.synth_classes, rc.synth_height, rc.synth_width, rc.synth_bands,
                              seed=derive_seed(rc.seed, "data"), noise=rc.synth_noise)


def prepare_dataset(rc: RunConfig, norm: Normalization | None = None):
    """Load, normalize, pad and split.  Returns ``(dataset, normalization)``.

    Normalization statistics come from every labeled pixel unless ``norm`` is
    supplied (as when evaluating a checkpoint).
    """
    from .hsi import fit_normalization

    cube = load_source_cube(rc)
    norm = fit_normalization(cube) if norm is None else norm
    ds = pad_and_extract(norm.apply(cube), rc.block_size)
    return stratified_split(ds, rc.ratios, derive_seed(rc.seed, "split")), norm


def _test_report(model, ds) -> dict:
    idx = ds.split_indices("test")
    cm, loss = evaluate_split(model, ds, idx)
    if cm.total == 0:
        raise ConfigError("test split is empty; check ratios")
    m = metrics(cm)
    return {"oa": m.oa, "aa": m.aa, "kappa": m.kappa, "per_class_accuracy": m.per_class,
            "absent_classes": m.absent_classes, "loss": loss, "confusion": cm.counts.tolist()}


def _split_sizes(ds) -> dict:
    return {name: int((ds.partition == i).sum()) for i, name in enumerate(SPLIT_NAMES)}


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_train(rc: RunConfig, progress=None) -> dict:
    """Train, write ``checkpoint.ekgc``, ``log.csv`` and ``report.json``; return the report."""
    _require(rc, "out")
    os.makedirs(rc.out, exist_ok=True)
    ds, norm = prepare_dataset(rc)
    arch = rc.arch(ds.num_classes, ds.bands)
    model = build_model(arch, derive_seed(rc.seed, "init"))
    result = train(model, ds, rc.train_config(), progress=progress)
    model.load_state_dict(result.best_state)
    report = {
        "seed": rc.seed,
        "config": rc.to_dict(),
        "backend": kernels.BACKEND,
        "num_classes": ds.num_classes,
        "bands": ds.bands,
        "num_parameters": model.num_parameters(),
        "split_sizes": _split_sizes(ds),
        "best_epoch": result.best_epoch,
        "best_val_oa": result.best_val_oa,
        "epochs_run": len(result.log),
        "stopped_early": result.stopped_early,
        "test": _test_report(model, ds),
    }
    ckpt_config = dict(rc.to_strings(), num_classes=ds.num_classes, bands=ds.bands,
                       best_epoch=result.best_epoch)
    tensors = dict(model.state_dict())
    tensors["norm.mean"] = norm.mean
    tensors["norm.std"] = norm.std
    save_checkpoint(os.path.join(rc.out, "checkpoint.ekgc"), ckpt_config, tensors)
    with open(os.path.join(rc.out, "log.csv"), "w", encoding="utf-8") as fh:
        fh.write(result.log_csv())
    _write_json(os.path.join(rc.out, "report.json"), report)
    return report


# keys that describe the trained model and must not be overridden at eval time
_GEOMETRY = ("stages", "k0", "groups", "experts", "reduction", "mapping_blocks", "bottleneck", "precision")


def run_eval(rc_values: dict, checkpoint: str, out: str | None = None) -> dict:
    """Evaluate ``checkpoint`` on the test split.

    The run configuration stored in the checkpoint is the baseline; entries of
    ``rc_values`` override it.  Geometry disagreements raise :class:`LoadError`.
    """
    stored, tensors = load_checkpoint(checkpoint)
    known = RunConfig.keys()
    base = {k: v for k, v in stored.items() if k in known}
    for key in _GEOMETRY:
        if key in rc_values and format_value(key, known[key].metadata["parse"](rc_values[key])) != base.get(key):
            raise LoadError(f"{key}: checkpoint has {base.get(key)}, requested {rc_values[key]}")
    base.update({k: v for k, v in rc_values.items() if v is not None})
    base["checkpoint"] = checkpoint
    rc = resolve_config(base)
    norm = Normalization(tensors.pop("norm.mean"), tensors.pop("norm.std"), [])
    cube = load_source_cube(rc)
    if cube.bands != int(stored["bands"]):
        raise LoadError(f"band count mismatch: checkpoint expects {stored['bands']}, dataset has {cube.bands}")
    if cube.num_classes != int(stored["num_classes"]):
        raise LoadError(f"class count mismatch: checkpoint expects {stored['num_classes']}, "
                        f"dataset has {cube.num_classes}")
    if rc.block_size != int(stored["block_size"]):
        raise LoadError(f"block size mismatch: checkpoint expects {stored['block_size']}, "
                        f"requested {rc.block_size}")
    ds, _ = prepare_dataset(rc, norm)
    model = build_model(rc.arch(ds.num_classes, ds.bands), 0)
    model.load_state_dict(tensors)
    report = {"seed": rc.seed, "config": rc.to_dict(), "backend": kernels.BACKEND,
              "checkpoint": os.path.abspath(checkpoint), "split_sizes": _split_sizes(ds),
              "test": _test_report(model, ds)}
    out = out or rc.out
    if out:
        os.makedirs(out, exist_ok=True)
        _write_json(os.path.join(out, "eval_report.json"), report)
    return report


# ----------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------
def _overrides(args) -> dict:
    keys = ("seed", "out", "precision", "block_size", "ratios", "epochs", "experts", "dataset", "checkpoint")
    return {k: getattr(args, k, None) for k in keys if getattr(args, k, None) is not None}


def _summary(test: dict) -> str:
    return f"OA={test['oa']:.4f} AA={test['aa']:.4f} Kappa={test['kappa']:.4f}"


def cmd_train(args) -> int:
    rc = parse_config(args.config, _overrides(args))

    def progress(rec):
        if not args.quiet:
            print(f"epoch {rec.epoch:3d} tau={rec.tau:6.3f} loss={rec.train_loss:.4f} "
                  f"train_oa={rec.train_oa:.4f} val_loss={rec.val_loss:.4f} val_oa={rec.val_oa:.4f}",
                  flush=True)

    report = run_train(rc, progress)
    print(f"test {_summary(report['test'])} (best epoch {report['best_epoch']}); artifacts in {rc.out}")
    return 0


def cmd_eval(args) -> int:
    values = read_config_file(args.config) if args.config else {}
    values.update(_overrides(args))
    checkpoint = values.pop("checkpoint", None)
    if not checkpoint:
        raise ConfigError("missing required key 'checkpoint'")
    if not os.path.exists(checkpoint):
        raise ConfigError(f"checkpoint: path {checkpoint!r} does not exist")
    report = run_eval(values, checkpoint)
    print(json.dumps(report["test"], indent=2, sort_keys=True))
    print(f"test {_summary(report['test'])}")
    return 0


def cmd_verify(args) -> int:
    from .verify import SUITES, format_report, run_suites

    rc = parse_config(args.config, _overrides(args))
    names = list(args.suite or rc.suites or SUITES)
    try:
        cases = run_suites(names, seed=rc.seed)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from None
    print(format_report(cases))
    return 0 if all(c.passed for c in cases) else 1


def cmd_synth(args) -> int:
    overrides = _overrides(args)
    for flag, key in (("classes", "synth_classes"), ("height", "synth_height"), ("width", "synth_width"),
                      ("bands", "synth_bands"), ("noise", "synth_noise")):
        if getattr(args, flag) is not None:
            overrides[key] = getattr(args, flag)
    rc = parse_config(args.config, overrides)
    path = args.file
    if not path:
        _require(rc, "out")
        os.makedirs(rc.out, exist_ok=True)
        path = os.path.join(rc.out, "synthetic.ekgh")
    try:
        cube = synthesize_dataset(rc.synth_classes, rc.synth_height, rc.synth_width, rc.synth_bands,
                                  seed=derive_seed(rc.seed, "data"), noise=rc.synth_noise)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    save_cube(path, cube)
    print(f"wrote {path}: {cube.height}x{cube.width}x{cube.bands}, classes {cube.class_histogram()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ekgnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value config file")
    common.add_argument("--seed", type=int, metavar="N")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--precision", choices=("f32", "f64"))
    common.add_argument("--block-size", type=int, metavar="N", dest="block_size")
    common.add_argument("--ratios", metavar="A:B:C", help="train:val:test split ratios")
    common.add_argument("--epochs", type=int, metavar="N")
    common.add_argument("--experts", type=int, metavar="K")
    common.add_argument("--dataset", metavar="PATH", help="EKGH cube; synthetic data when omitted")
    common.add_argument("-q", "--quiet", action="store_true")

    sub.add_parser("train", parents=[common], help="train a model").set_defaults(func=cmd_train)
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", metavar="PATH")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("verify", parents=[common], help="run oracle, gradient and property suites")
    p.add_argument("--suite", action="append", metavar="NAME", help="suite to run (repeatable)")
    p.set_defaults(func=cmd_verify)
    p = sub.add_parser("synth", parents=[common], help="write a synthetic EKGH cube")
    p.add_argument("--file", metavar="PATH", help="output file (default OUT/synthetic.ekgh)")
    p.add_argument("--classes", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--bands", type=int)
    p.add_argument("--noise", type=float)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"ekgnet: config error: {exc}", file=sys.stderr)
        return 2
    except (EKGError, ValueError, OSError) as exc:
        print(f"ekgnet: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
