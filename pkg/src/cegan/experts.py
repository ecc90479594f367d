"""Classifier assembly with a parallel Class Experts block, weight transfer
from per-class GAN discriminators, and supervised finetuning.

A model is ``trunk -> {branch_0 .. branch_{C-1}} -> concat -> head``. The
branches are copies of discriminator layers ``ce_layers``; branch ``k`` is
loaded from the discriminator pretrained on class ``k``. A plain baseline
classifier is the degenerate case with no trunk and no branches.

Parameter names are prefixed ``trunk.``, ``branch{k}.`` or ``head.``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import fileformat
from .data import LabeledImageSet
from .gan import DivergedError, GanCheckpoint
from .layers import (ArchitectureSpec, ParamSet, backward, forward, init_params,
                     layer_output_shape, param_shapes)
from .metrics import MetricsReport, evaluate
from .optim import AdamState, adam_step, bce_loss
from .tensor import ShapeError, concat_channels, derive_rng, split_channels


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class CeConfig:
    ce_layers: tuple[int, int] = (3, 6)  # inclusive table-row range
    frozen: bool = False
    classes: int = 5

    @property
    def start(self) -> int:
        return self.ce_layers[0]

    @property
    def stop(self) -> int:
        return self.ce_layers[1]

    def validate(self, disc_spec: ArchitectureSpec):
        start, stop = self.ce_layers
        conv_rows = [n for n, l in zip(disc_spec.layer_numbers(), disc_spec.layers) if l.kind == "conv"]
        if self.classes < 2:
            raise AssemblyError(f"need at least 2 classes, got {self.classes}")
        if start > stop:
            raise AssemblyError(f"empty CE layer range {start}..{stop}")
        if not conv_rows or start < conv_rows[0] or stop > conv_rows[-1] \
                or any(n not in conv_rows for n in range(start, stop + 1)):
            raise AssemblyError(f"CE layers {start}..{stop} must lie within the convolution "
                                f"rows {conv_rows[0]}..{conv_rows[-1]} of {disc_spec.name}")


def classifier_spec(disc_spec: ArchitectureSpec, classes: int) -> ArchitectureSpec:
    """The discriminator with a ``classes``-unit sigmoid output layer."""
    last = disc_spec.layers[-1]
    if last.kind != "fully_connected":
        raise AssemblyError("discriminator must end in a fully connected layer")
    head = replace(last, out_channels=classes, activation="sigmoid", printed_output=None)
    return replace(disc_spec, layers=(*disc_spec.layers[:-1], head))


@dataclass
class CeModel:
    spec: ArchitectureSpec  # full classifier layout (C-unit head)
    ce: CeConfig | None
    trunk: ArchitectureSpec | None
    branch: ArchitectureSpec | None
    head: ArchitectureSpec
    params: ParamSet
    attribute_names: list[str] = field(default_factory=list)
    variant: str = "baseline"

    @property
    def classes(self) -> int:
        return self.spec.layers[-1].out_channels

    @property
    def n_branches(self) -> int:
        return 0 if self.ce is None else self.ce.classes

    def part(self, prefix: str) -> ParamSet:
        return self.params.strip(prefix)

    def copy(self) -> "CeModel":
        return replace(self, params=self.params.copy(), attribute_names=list(self.attribute_names))


def _split_arch(spec: ArchitectureSpec, ce: CeConfig | None):
    last = spec.first_index + len(spec.layers) - 1
    if ce is None:
        return None, None, spec
    shape = tuple(spec.input_shape)
    shapes = {}
    for n, l in zip(spec.layer_numbers(), spec.layers):
        shapes[n - 1] = shape
        shape = layer_output_shape(l, shape, n)
    trunk = spec.sub(spec.first_index, ce.start - 1, spec.input_shape) if ce.start > spec.first_index else None
    branch = spec.sub(ce.start, ce.stop, shapes[ce.start - 1])
    b_out = layer_output_shape(branch.layers[-1], shapes[ce.stop - 1], ce.stop)
    head_in = (ce.classes * b_out[0], *b_out[1:])
    head = spec.sub(ce.stop + 1, last, head_in)
    return trunk, branch, head


def build_model(disc_spec: ArchitectureSpec, classes: int, ce: CeConfig | None, seed: int,
                attribute_names: Sequence[str] = (), variant: str = "baseline") -> CeModel:
    """Freshly initialised model (baseline when ``ce`` is None)."""
    spec = classifier_spec(disc_spec, classes)
    if ce is not None:
        ce.validate(spec)
        if ce.classes != classes:
            raise AssemblyError(f"CE block has {ce.classes} branches but the head has {classes} outputs")
    trunk, branch, head = _split_arch(spec, ce)
    params = ParamSet()
    if trunk is not None:
        params.update(init_params(trunk, derive_rng(seed, 20)).prefixed("trunk."))
    if branch is not None:
        for k in range(ce.classes):
            params.update(init_params(branch, derive_rng(seed, 21, k)).prefixed(f"branch{k}."))
    params.update(init_params(head, derive_rng(seed, 22)).prefixed("head."))
    names = list(attribute_names) or [f"class_{i}" for i in range(classes)]
    return CeModel(spec, ce, trunk, branch, head, params, names, variant)


def _same_layers(a: ArchitectureSpec, b: ArchitectureSpec) -> bool:
    strip = lambda spec: [replace(l, printed_output=None) for l in spec.layers[:-1]]
    return tuple(a.input_shape) == tuple(b.input_shape) and strip(a) == strip(b)


def assemble_ce_model(disc_spec: ArchitectureSpec, checkpoints: Sequence[GanCheckpoint],
                      ce: CeConfig, seed: int = 0, attribute_names: Sequence[str] = ()) -> CeModel:
    """Build a CE model and copy each class's pretrained discriminator layers
    into its branch. With ``ce.frozen`` the transferred weights, biases and
    batch-norm scale/shift are marked non-trainable."""
    ids = sorted(c.class_id for c in checkpoints)
    if len(checkpoints) != ce.classes or ids != list(range(ce.classes)):
        missing = sorted(set(range(ce.classes)) - set(ids))
        raise AssemblyError(f"need one checkpoint per class 0..{ce.classes - 1}; "
                            f"got class ids {ids}" + (f", missing {missing}" if missing else ""))
    for c in checkpoints:
        if not _same_layers(c.discriminator_arch, disc_spec):
            raise AssemblyError(f"checkpoint for class {c.class_id} was trained with a different "
                                f"discriminator than {disc_spec.name}")
    variant = "fcegan" if ce.frozen else "cegan"
    model = build_model(disc_spec, ce.classes, ce, seed, attribute_names, variant)
    layer_tags = tuple(f"layer{n}." for n in range(ce.start, ce.stop + 1))
    for c in checkpoints:
        prefix = f"branch{c.class_id}."
        for name, value in c.discriminator_params.entries.items():
            if not name.startswith(layer_tags):
                continue
            target = prefix + name
            if model.params[target].shape != value.shape:
                raise AssemblyError(f"{target}: checkpoint shape {value.shape} vs model "
                                    f"{model.params[target].shape}")
            model.params.entries[target] = value.astype(np.float32, copy=True)
            if ce.frozen and model.params.trainable[target]:
                model.params.trainable[target] = False
    return model


# ---------------------------------------------------------------- forward/backward

def ce_forward(model: CeModel, x: np.ndarray, training: bool):
    """Returns ``(predictions N x C, cache)``."""
    cache = {}
    if model.trunk is not None:
        x, cache["trunk"] = forward(model.trunk, model.part("trunk."), x, training)
    if model.branch is not None:
        outs = []
        for k in range(model.n_branches):
            o, cache[f"branch{k}"] = forward(model.branch, model.part(f"branch{k}."), x, training)
            outs.append(o)
        cache["widths"] = [o.shape[1] for o in outs]
        x = concat_channels(outs)
    y, cache["head"] = forward(model.head, model.part("head."), x, training)
    return y, cache


def ce_backward(model: CeModel, cache: dict, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    grads = {}
    need_in = model.branch is not None
    g, hg = backward(model.head, model.part("head."), cache["head"], grad_out, need_input_grad=need_in)
    grads.update({f"head.{k}": v for k, v in hg.items()})
    if model.branch is None:
        return grads
    g_trunk = None
    for k, gk in enumerate(split_channels(g, cache["widths"])):
        gi, bg = backward(model.branch, model.part(f"branch{k}."), cache[f"branch{k}"], gk,
                          need_input_grad=model.trunk is not None)
        grads.update({f"branch{k}.{n}": v for n, v in bg.items()})
        if gi is not None:
            g_trunk = gi if g_trunk is None else g_trunk + gi
    if model.trunk is not None:
        _, tg = backward(model.trunk, model.part("trunk."), cache["trunk"], g_trunk, need_input_grad=False)
        grads.update({f"trunk.{k}": v for k, v in tg.items()})
    return grads


def predict(model: CeModel, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Inference-mode sigmoid outputs, N x C."""
    if tuple(images.shape[1:]) != tuple(model.spec.input_shape):
        raise ShapeError(f"images {images.shape[1:]} do not match model input {model.spec.input_shape}")
    outs = [ce_forward(model, images[i:i + chunk], False)[0] for i in range(0, len(images), chunk)]
    return np.concatenate(outs)


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    max_steps: int | None = None
    class_weights: list[float] | None = None  # cost-sensitive loss
    sample_weights: np.ndarray | None = None  # resampling baseline, one weight per example

    def validate(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm)")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class EpochLog:
    epoch: int
    steps: int
    train_loss: float
    val_loss: float
    val_accuracy_macro: float
    val_precision_macro: float


@dataclass
class TrainResult:
    model: CeModel  # parameters from the best validation epoch
    final_model: CeModel
    log: list[EpochLog]
    step_losses: list[float]
    best_epoch: int


def _batches(n: int, cfg: TrainConfig, rng: np.random.Generator):
    steps = max(1, n // cfg.batch_size)
    if cfg.sample_weights is not None:
        p = np.asarray(cfg.sample_weights, dtype=np.float64)
        idx = rng.choice(n, size=steps * cfg.batch_size, replace=True, p=p / p.sum())
    else:
        idx = rng.permutation(n)
        if n < cfg.batch_size:
            idx = rng.choice(n, size=cfg.batch_size, replace=True)
    return [idx[i * cfg.batch_size:(i + 1) * cfg.batch_size] for i in range(steps)]


def train_supervised(model: CeModel, train: LabeledImageSet, val: LabeledImageSet,
                     config: TrainConfig, log: Callable[[str], None] | None = None) -> TrainResult:
    """Minimise per-attribute BCE with Adam; keep the best-validation parameters."""
    config.validate()
    for name, ds in (("train", train), ("val", val)):
        if ds.labels.shape[1] != model.classes:
            raise ShapeError(f"{name} set has {ds.labels.shape[1]} labels, model has {model.classes} outputs")
    if config.sample_weights is not None and len(config.sample_weights) != len(train):
        raise ValueError("sample_weights needs one entry per training example")
    model = model.copy()
    rng = derive_rng(config.seed, 30)
    opt = AdamState(config.learning_rate, config.beta1, config.beta2, config.epsilon)
    weights = None if config.class_weights is None else np.asarray(config.class_weights, np.float32)
    step_losses, rows = [], []
    best, best_acc, best_epoch = model.copy(), -1.0, 0
    steps = 0
    for epoch in range(1, config.epochs + 1):
        epoch_losses = []
        for idx in _batches(len(train), config, rng):
            pred, cache = ce_forward(model, train.images[idx], True)
            loss = bce_loss(pred, train.labels[idx], weights)
            if not math.isfinite(loss.value):
                raise DivergedError(steps + 1, f"loss={loss.value}")
            adam_step(opt, model.params, ce_backward(model, cache, loss.grad))
            step_losses.append(loss.value)
            epoch_losses.append(loss.value)
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                break
        val_pred = predict(model, val.images)
        report = evaluate(val_pred, val.labels, model.attribute_names)
        row = EpochLog(epoch, steps, float(np.mean(epoch_losses)),
                       bce_loss(val_pred, val.labels).value,
                       report.overall_accuracy_macro, report.overall_precision_macro)
        rows.append(row)
        if log:
            log(f"epoch {epoch}: train_loss={row.train_loss:.4f} val_loss={row.val_loss:.4f} "
                f"val_acc={row.val_accuracy_macro:.4f}")
        if row.val_accuracy_macro > best_acc:
            best, best_acc, best_epoch = model.copy(), row.val_accuracy_macro, epoch
        if config.max_steps is not None and steps >= config.max_steps:
            break
    return TrainResult(best, model, rows, step_losses, best_epoch)


# ---------------------------------------------------------------- sweep

@dataclass
class SweepRow:
    ce_layers: tuple[int, int]
    val_accuracy: float | None
    error: str = ""
    best: bool = False

    @property
    def label(self) -> str:
        lo, hi = self.ce_layers
        return ", ".join(str(n) for n in range(lo, hi + 1))


def sweep_ce_layers(disc_spec: ArchitectureSpec, checkpoints: Sequence[GanCheckpoint],
                    ranges: Sequence[tuple[int, int]], train: LabeledImageSet, val: LabeledImageSet,
                    config: TrainConfig, frozen: bool = False,
                    log: Callable[[str], None] | None = None) -> list[SweepRow]:
    """Train one CE model per layer range with the same budget and seed and
    report best validation macro accuracy. The first maximum is marked."""
    rows = []
    for lo, hi in ranges:
        ce = CeConfig((lo, hi), frozen, len(checkpoints))
        try:
            model = assemble_ce_model(disc_spec, checkpoints, ce, config.seed, train.attribute_names)
            result = train_supervised(model, train, val, config)
            acc = max(r.val_accuracy_macro for r in result.log)
            rows.append(SweepRow((lo, hi), acc))
        except (AssemblyError, DivergedError, ShapeError) as e:
            rows.append(SweepRow((lo, hi), None, str(e)))
        if log:
            log(f"CE layers {lo}..{hi}: {rows[-1].val_accuracy if rows[-1].error == '' else rows[-1].error}")
    scored = [r for r in rows if r.val_accuracy is not None]
    if scored:
        top = max(r.val_accuracy for r in scored)
        next(r for r in scored if r.val_accuracy == top).best = True
    return rows


# ---------------------------------------------------------------- persistence

def save_model(model: CeModel, path: str | Path, extra: dict | None = None):
    meta = {"kind": "classifier", "variant": model.variant, "spec": model.spec.to_json(),
            "ce": None if model.ce is None else asdict(model.ce),
            "attribute_names": model.attribute_names, "trainable": model.params.trainable,
            **(extra or {})}
    fileformat.write_tensor_file(path, fileformat.MODEL_MAGIC, 0, meta, model.params.entries)


def load_model(path: str | Path) -> CeModel:
    _, meta, tensors = fileformat.read_tensor_file(path, fileformat.MODEL_MAGIC)
    try:
        spec = ArchitectureSpec.from_json(meta["spec"])
        ce = None if meta["ce"] is None else CeConfig(tuple(meta["ce"]["ce_layers"]),
                                                      bool(meta["ce"]["frozen"]),
                                                      int(meta["ce"]["classes"]))
        trunk, branch, head = _split_arch(spec, ce)
        params = ParamSet(tensors, {k: bool(meta["trainable"].get(k, True)) for k in tensors})
        model = CeModel(spec, ce, trunk, branch, head, params, list(meta["attribute_names"]),
                        meta.get("variant", "baseline"))
    except (KeyError, TypeError, ValueError) as e:
        raise fileformat.FormatError(f"{path}: invalid model metadata: {e}") from e
    expected = {}
    for prefix, arch in _parts(model):
        expected.update({prefix + k: v for k, v in param_shapes(arch).items()})
    if {k: v.shape for k, v in tensors.items()} != expected:
        raise fileformat.FormatError(f"{path}: tensors do not match the stored architecture")
    return model


def _parts(model: CeModel):
    if model.trunk is not None:
        yield "trunk.", model.trunk
    for k in range(model.n_branches):
        yield f"branch{k}.", model.branch
    yield "head.", model.head
