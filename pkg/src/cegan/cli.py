"""``cegan`` command-line front end.

Exit codes: 0 success, 1 training diverged, 2 config error, 3 missing or
invalid input artifact, 4 data/shape incompatibility.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import platform
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from . import baselines, fileformat
from .config import ConfigError, RunConfig, load_config
from .data import (SynthConfig, load_dataset, save_dataset, single_class_subset, split,
                   synth_generate)
from .experts import (AssemblyError, CeConfig, TrainConfig, assemble_ce_model, build_model,
                      classifier_spec, load_model, predict, save_model, sweep_ce_layers,
                      train_supervised)
from .gan import DivergedError, GanConfig, load_checkpoint, save_checkpoint, train_gan
from .layers import (ArchitectureSpec, InfeasibleArchitecture, lint_architecture, load_architecture,
                     load_builtin)
from .metrics import MetricsReport, aggregate, evaluate, present, render_comparison
from .tensor import ShapeError, derive_seed

log = logging.getLogger("cegan")

COMMANDS = ("gen-data", "pretrain", "train", "eval", "sweep", "report")
VARIANT_LABELS = {
    "baseline": "baseline CNN",
    "cegan": "CE-GAN CNN",
    "fcegan": "FCE-GAN CNN",
    "resample": baselines.RESAMPLE_LABEL,
    "costsens": baselines.COSTSENS_LABEL,
}


class CliError(Exception):
    code = 1


class ConfigProblem(CliError):
    code = 2


class MissingArtifact(CliError):
    code = 3


class Incompatible(CliError):
    code = 4


@dataclass
class Run:
    command: str
    config: RunConfig
    out: Path
    stages: list[dict] = field(default_factory=list)
    outputs: list[Path] = field(default_factory=list)

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.out / p

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.stages.append({"stage": name, "seconds": round(time.perf_counter() - t0, 3)})

    def emit(self, path: Path, payload: bytes | str):
        if isinstance(payload, str):
            payload = payload.encode("utf-8")
        fileformat.atomic_write(path, payload)
        self.outputs.append(path)

    def emitted(self, path: Path):
        self.outputs.append(path)


def resolve_spec(name: str) -> ArchitectureSpec:
    try:
        if name.endswith(".json") or "/" in name:
            return load_architecture(name)
        return load_builtin(name)
    except FileNotFoundError:
        raise ConfigProblem(f"architecture spec {name!r} not found") from None
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigProblem(f"architecture spec {name!r} is invalid: {e}") from None


def _load_data(run: Run, rel: str):
    p = run.path(rel)
    if not p.exists():
        raise MissingArtifact(f"dataset {p} not found (run gen-data first)")
    try:
        return load_dataset(p)
    except fileformat.FormatError as e:
        raise MissingArtifact(str(e)) from None


def _checkpoint_paths(run: Run, k: int, names: list[str]) -> list[Path]:
    root = run.path(run.config.train.checkpoint_dir)
    paths = []
    for c in range(k):
        p = root / f"class{c}_{names[c]}.ckpt"
        if not p.exists():
            raise MissingArtifact(f"checkpoint for class {c} ({names[c]}) not found at {p}")
        paths.append(p)
    return paths


def _load_checkpoints(run: Run, k: int, names: list[str]):
    out = []
    for p in _checkpoint_paths(run, k, names):
        try:
            out.append(load_checkpoint(p))
        except fileformat.FormatError as e:
            raise MissingArtifact(str(e)) from None
    return out


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v: float) -> str:
    return format(float(v), ".9g")


# ---------------------------------------------------------------- commands

def cmd_gen_data(run: Run):
    d = run.config.data
    synth = SynthConfig(d.image_h, d.image_w, d.channels, tuple(d.positive_rates),
                        tuple(d.attribute_names), d.n_examples, d.noise_level, run.config.seed)
    with run.stage("generate"):
        try:
            ds = synth_generate(synth)
        except ValueError as e:
            raise ConfigProblem(f"data: {e}") from None
    with run.stage("split"):
        parts = split(ds, derive_seed(run.config.seed, 3), tuple(d.split_ratios))
    for name, part in zip(("train", "val", "test"), parts):
        p = run.out / "data" / f"{name}.cgd"
        save_dataset(part, p)
        run.emitted(p)
        log.info("%s: %d examples, positives %s", name, len(part), part.positive_counts.tolist())


def cmd_pretrain(run: Run):
    cfg = run.config
    train = _load_data(run, cfg.train.train_data)
    k = train.labels.shape[1]
    classes = cfg.gan.classes if cfg.gan.classes is not None else list(range(k))
    for c in classes:
        if not 0 <= c < k:
            raise ConfigProblem(f"gan.classes: class {c} out of range for {k} attributes")
    gen, disc = resolve_spec(cfg.gan.generator_spec), resolve_spec(cfg.gan.discriminator_spec)
    if tuple(disc.input_shape) != train.image_shape:
        raise Incompatible(f"discriminator input {tuple(disc.input_shape)} does not match "
                           f"images {train.image_shape}")
    summary = []
    for c in classes:
        name = train.attribute_names[c]
        try:
            subset = single_class_subset(train, c)
        except ValueError:
            raise MissingArtifact(f"class {c} ({name}) has no positive training examples") from None
        gcfg = GanConfig(cfg.gan.latent_dim, cfg.gan.iterations, cfg.gan.batch_size,
                         cfg.gan.d_steps_per_g_step, derive_seed(cfg.seed, 40, c),
                         cfg.gan.learning_rate, cfg.gan.generator_spec, cfg.gan.discriminator_spec)
        with run.stage(f"pretrain class {c}"):
            try:
                ckpt = train_gan(subset, gcfg, c, gen, disc, log_every=max(1, gcfg.iterations // 5),
                                 log=log.info)
            except InfeasibleArchitecture as e:
                raise ConfigProblem(f"gan: {e}") from None
        p = run.path(cfg.train.checkpoint_dir) / f"class{c}_{name}.ckpt"
        save_checkpoint(ckpt, p)
        run.emitted(p)
        summary.append([c, name, len(subset), _fmt(ckpt.final_losses[0]), _fmt(ckpt.final_losses[1])])
    run.emit(run.path(cfg.train.checkpoint_dir) / "pretrain.csv",
             _csv(["class", "attribute", "examples", "d_loss", "g_loss"], summary))


def _train_config(run: Run, train_set, variant: str) -> TrainConfig:
    t = run.config.train
    cfg = TrainConfig(t.epochs, t.batch_size, t.learning_rate, t.beta1, t.beta2, t.epsilon,
                      derive_seed(run.config.seed, 51), t.max_steps)
    if variant == "resample":
        cfg.sample_weights = baselines.resample_weights(train_set.labels)
    elif variant == "costsens":
        try:
            cfg.class_weights = baselines.costsens_weights(train_set.labels).tolist()
        except ValueError as e:
            raise Incompatible(f"costsens: {e}") from None
    return cfg


def _ce_config(disc: ArchitectureSpec, lo_hi, frozen: bool, k: int) -> CeConfig:
    ce = CeConfig(tuple(lo_hi), frozen, k)
    try:
        ce.validate(classifier_spec(disc, k))
    except AssemblyError as e:
        raise ConfigProblem(f"ce_layers: {e}") from None
    return ce


def _check_data(disc: ArchitectureSpec, *sets):
    first = sets[0]
    for s in sets:
        if s.image_shape != tuple(disc.input_shape):
            raise Incompatible(f"images {s.image_shape} do not match model input {tuple(disc.input_shape)}")
        if s.attribute_names != first.attribute_names:
            raise Incompatible(f"attribute sets differ: {s.attribute_names} vs {first.attribute_names}")


def cmd_train(run: Run):
    t = run.config.train
    disc = resolve_spec(t.discriminator_spec)
    train, val = _load_data(run, t.train_data), _load_data(run, t.val_data)
    _check_data(disc, train, val)
    k, names = train.labels.shape[1], train.attribute_names
    seed = derive_seed(run.config.seed, 50)
    with run.stage("assemble"):
        if t.variant in ("cegan", "fcegan"):
            ce = _ce_config(disc, t.ce_layers, t.variant == "fcegan", k)
            ckpts = _load_checkpoints(run, k, names)
            try:
                model = assemble_ce_model(disc, ckpts, ce, seed, names)
            except AssemblyError as e:
                raise MissingArtifact(str(e)) from None
        else:
            model = build_model(disc, k, None, seed, names, t.variant)
    with run.stage("finetune"):
        result = train_supervised(model, train, val, _train_config(run, train, t.variant), log=log.info)
    base = run.out / "models" / t.variant
    p = base.with_suffix(".cgm")
    save_model(result.model, p, {"label": VARIANT_LABELS[t.variant], "best_epoch": result.best_epoch})
    run.emitted(p)
    run.emit(base.parent / f"{t.variant}_epochs.csv",
             _csv(["epoch", "steps", "train_loss", "val_loss", "val_accuracy_macro", "val_precision_macro"],
                  [[r.epoch, r.steps, _fmt(r.train_loss), _fmt(r.val_loss), _fmt(r.val_accuracy_macro),
                    _fmt(r.val_precision_macro)] for r in result.log]))
    run.emit(base.parent / f"{t.variant}_steps.csv",
             _csv(["step", "loss"], [[i + 1, _fmt(v)] for i, v in enumerate(result.step_losses)]))


def cmd_eval(run: Run):
    e = run.config.eval
    mp = run.path(e.model)
    if not mp.exists():
        raise MissingArtifact(f"model {mp} not found")
    try:
        model = load_model(mp)
    except fileformat.FormatError as err:
        raise MissingArtifact(str(err)) from None
    data = _load_data(run, e.dataset)
    if data.image_shape != tuple(model.spec.input_shape) or data.labels.shape[1] != model.classes:
        raise Incompatible(f"dataset {data.image_shape} x {data.labels.shape[1]} labels does not fit "
                           f"model {tuple(model.spec.input_shape)} x {model.classes} outputs")
    if data.attribute_names != model.attribute_names:
        raise Incompatible(f"dataset attributes {data.attribute_names} differ from model "
                           f"{model.attribute_names}")
    with run.stage("predict"):
        pred = predict(model, data.images)
    report = evaluate(pred, data.labels, data.attribute_names, e.threshold)
    report.label = VARIANT_LABELS.get(model.variant, model.variant)
    name = e.name or model.variant
    root = run.out / "eval"
    run.emit(root / f"{name}.json", json.dumps(report.to_json(), indent=2) + "\n")
    rows = [[a, _fmt(report.accuracy[i]), _fmt(report.precision[i]), int(report.precision_undefined[i]),
             *(int(getattr(report.counts, f)[i]) for f in ("tp", "tn", "fp", "fn"))]
            for i, a in enumerate(report.attribute_names)]
    rows.append(["overall_macro", _fmt(report.overall_accuracy_macro), _fmt(report.overall_precision_macro),
                 "", "", "", "", ""])
    rows.append(["overall_micro", "", _fmt(report.overall_precision_micro), "", "", "", "", ""])
    run.emit(root / f"{name}.csv", _csv(["attribute", "accuracy", "precision", "precision_undefined",
                                         "tp", "tn", "fp", "fn"], rows))
    tables = render_comparison({report.label: report})
    run.emit(root / f"{name}.txt", tables.accuracy_text + "\n" + tables.precision_text)
    k = len(report.attribute_names)
    run.emit(root / f"{name}_predictions.csv",
             _csv([*(f"p_{a}" for a in report.attribute_names), *(f"y_{a}" for a in report.attribute_names)],
                  [[*(_fmt(v) for v in pred[i]), *(int(v) for v in data.labels[i])] for i in range(len(pred))]))
    log.info("overall accuracy %.4f, precision %.4f", report.overall_accuracy_macro,
             report.overall_precision_macro)


def cmd_sweep(run: Run):
    cfg = run.config
    disc = resolve_spec(cfg.train.discriminator_spec)
    train, val = _load_data(run, cfg.train.train_data), _load_data(run, cfg.train.val_data)
    _check_data(disc, train, val)
    k = train.labels.shape[1]
    for lo_hi in cfg.sweep.ranges:  # all ranges checked before any training
        _ce_config(disc, lo_hi, cfg.sweep.frozen, k)
    ckpts = _load_checkpoints(run, k, train.attribute_names)
    with run.stage("sweep"):
        rows = sweep_ce_layers(disc, ckpts, [tuple(r) for r in cfg.sweep.ranges], train, val,
                               _train_config(run, train, "cegan"), cfg.sweep.frozen, log=log.info)
    run.emit(run.out / "sweep" / "sweep.csv",
             _csv(["ce_layers", "val_accuracy", "best", "error"],
                  [[r.label, "" if r.val_accuracy is None else _fmt(r.val_accuracy), int(r.best), r.error]
                   for r in rows]))
    run.emit(run.out / "sweep" / "sweep.txt", render_sweep(rows))


def render_sweep(rows) -> str:
    cells = [[r.label, "failed" if r.val_accuracy is None else present(r.val_accuracy)] for r in rows]
    for c, r in zip(cells, rows):
        if r.best:
            c[1] = f"**{c[1]}**"
    w0 = max(len("Layers used as CE"), *(len(c[0]) for c in cells))
    w1 = max(len("Validation accuracy (%)"), *(len(c[1]) for c in cells))
    lines = [f"{'Layers used as CE'.ljust(w0)}  {'Validation accuracy (%)'.rjust(w1)}",
             f"{'-' * w0}  {'-' * w1}", *(f"{a.ljust(w0)}  {b.rjust(w1)}" for a, b in cells)]
    return "\n".join(lines) + "\n"


def load_report(path: Path) -> MetricsReport:
    """An eval JSON, or a fixture with only per-class values and a label."""
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
        if "overall_accuracy_macro" in d:
            return MetricsReport.from_json(d)
        r = aggregate(d["accuracy"], d["precision"], attribute_names=d["attribute_names"])
        r.label = d.get("label", path.stem)
        return r
    except OSError:
        raise MissingArtifact(f"report input {path} not found") from None
    except (ValueError, KeyError, TypeError) as e:
        raise MissingArtifact(f"{path}: not a metrics report ({e})") from None


def cmd_report(run: Run):
    inputs = run.config.report.inputs
    paths = [run.path(p) for p in inputs] if inputs else sorted((run.out / "eval").glob("*.json"))
    if not paths:
        raise MissingArtifact("no eval outputs to report on")
    reports = {}
    for p in paths:
        r = load_report(p)
        reports[r.label or p.stem] = r
    try:
        tables = render_comparison(reports, run.config.report.percent)
    except ValueError as e:
        raise Incompatible(str(e)) from None
    root = run.out / "report"
    run.emit(root / "accuracy.txt", tables.accuracy_text)
    run.emit(root / "precision.txt", tables.precision_text)
    run.emit(root / "accuracy.csv", tables.accuracy_csv)
    run.emit(root / "precision.csv", tables.precision_csv)
    sys.stdout.write(tables.accuracy_text + "\n" + tables.precision_text)


HANDLERS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train": cmd_train,
            "eval": cmd_eval, "sweep": cmd_sweep, "report": cmd_report}


# ---------------------------------------------------------------- manifest

def _digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"cegan": own, "numpy": np.__version__, "python": platform.python_version(),
            "file_format": fileformat.VERSION}


def write_manifest(out: Path, command: str, config: dict | None, run: Run | None,
                   code: int, message: str, started: float):
    path = out / "manifest.json"
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
        if not isinstance(manifest.get("runs"), dict):
            raise ValueError
    except (OSError, ValueError, AttributeError):
        manifest = {"runs": {}}
    outputs = {}
    if run is not None:
        for p in run.outputs:
            if p.exists():
                outputs[p.relative_to(out).as_posix() if p.is_relative_to(out) else str(p)] = _digest(p)
    manifest["runs"][command] = {
        "config": config,
        "versions": _versions(),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "wall_clock_seconds": round(time.time() - started, 3),
        "stages": run.stages if run is not None else [],
        "outputs": outputs,
        "exit_code": code,
        "message": message,
    }
    manifest["last_command"] = command
    fileformat.atomic_write(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


# ---------------------------------------------------------------- entry point

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cegan", description="Class-expert GAN pretraining experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON run configuration")
        s.add_argument("--out", default="cegan-out", help="output directory (default: %(default)s)")
        s.add_argument("--seed", type=int, help="override the config seed (unsigned 64-bit)")
    s = sub.add_parser("shapes", help="print per-layer output sizes of an architecture")
    s.add_argument("--spec", required=True, help="builtin spec name or JSON path")
    return p


def cmd_shapes(spec_name: str) -> int:
    try:
        arch = resolve_spec(spec_name)
    except ConfigProblem as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    rows = lint_architecture(arch)
    hwc = lambda t: "-" if t is None else "x".join(map(str, t))
    print(f"{arch.name}: input {hwc(arch.input_shape)} (C x H x W)")
    for r in rows:
        status = "ok" if r.ok else r.message
        print(f"layer {r.layer:>2}  inferred {hwc(r.inferred_hwc):>12}  printed {hwc(r.printed_hwc):>12}  {status}")
    return 0 if all(r.ok for r in rows) else 4


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.command == "shapes":
        return cmd_shapes(args.spec)
    out = Path(args.out)
    started = time.time()
    run = None
    snapshot = None
    code, message = 0, "ok"
    try:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigProblem(f"cannot create output directory {out}: {e.strerror}") from None
        try:
            cfg = load_config(args.config)
            if args.seed is not None:
                if not 0 <= args.seed < 2**64:
                    raise ConfigError(f"seed: must be an unsigned 64-bit integer, got {args.seed}")
                cfg = cfg.model_copy(update={"seed": args.seed})
        except ConfigError as e:
            raise ConfigProblem(str(e)) from None
        snapshot = cfg.model_dump(mode="json")
        run = Run(args.command, cfg, out)
        HANDLERS[args.command](run)
    except CliError as e:
        code, message = e.code, str(e)
    except DivergedError as e:
        code, message = 1, str(e)
    except ShapeError as e:
        code, message = 4, str(e)
    except fileformat.FormatError as e:
        code, message = 3, str(e)
    if code:
        print(f"error: {message}", file=sys.stderr)
    try:
        write_manifest(out, args.command, snapshot, run, code, message, started)
    except OSError as e:
        print(f"error: could not write manifest: {e}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
