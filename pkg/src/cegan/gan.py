"""Per-class GAN pretraining (original GAN objective, non-saturating G loss)."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fileformat
from .data import LabeledImageSet, from_gan_range, to_gan_range
from .layers import (ArchitectureSpec, InfeasibleArchitecture, LayerSpec, ParamSet, backward,
                     forward, init_params, load_builtin, output_shape, param_shapes)
from .optim import AdamState, adam_step, gan_d_loss, gan_g_loss
from .tensor import derive_rng, tensor_randn


class DivergedError(RuntimeError):
    def __init__(self, iteration: int, what: str):
        super().__init__(f"training diverged at iteration {iteration}: {what}")
        self.iteration = iteration


@dataclass
class GanConfig:
    latent_dim: int = 100
    iterations: int = 2000
    batch_size: int = 32
    d_steps_per_g_step: int = 1
    seed: int = 0
    learning_rate: float = 0.001
    generator_spec: str = "desk_generator"
    discriminator_spec: str = "desk_discriminator"

    def validate(self):
        for name in ("latent_dim", "iterations", "d_steps_per_g_step"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm)")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class GanCheckpoint:
    class_id: int
    generator_arch: ArchitectureSpec
    discriminator_arch: ArchitectureSpec  # with the 1-unit real/fake head
    generator_params: ParamSet
    discriminator_params: ParamSet
    config: GanConfig
    final_losses: tuple[float, float] = (math.nan, math.nan)
    iteration: int = 0
    attribute_name: str = ""


def real_fake_head(disc: ArchitectureSpec) -> ArchitectureSpec:
    """The discriminator with its last layer swapped for one sigmoid unit."""
    last = disc.layers[-1]
    if last.kind != "fully_connected":
        raise InfeasibleArchitecture(disc.first_index + len(disc.layers) - 1,
                                     "discriminator must end in a fully connected layer")
    head = replace(last, out_channels=1, activation="sigmoid", printed_output=None)
    return replace(disc, name=f"{disc.name}+real_fake", layers=(*disc.layers[:-1], head))


def build_gan(gen_spec: ArchitectureSpec, disc_spec: ArchitectureSpec, seed: int = 0):
    """Initialise a generator/discriminator pair.

    Returns ``(generator_arch, discriminator_arch, generator_params,
    discriminator_params)`` where the discriminator carries a real/fake head.
    """
    gen_out = output_shape(gen_spec)
    if tuple(gen_out) != tuple(disc_spec.input_shape):
        raise InfeasibleArchitecture(
            len(gen_spec.layers), f"generator output {gen_out} does not match discriminator "
                                  f"input {tuple(disc_spec.input_shape)}")
    disc = real_fake_head(disc_spec)
    output_shape(disc)  # raises on an infeasible discriminator
    g = init_params(gen_spec, derive_rng(seed, 10))
    d = init_params(disc, derive_rng(seed, 11))
    return gen_spec, disc, g, d


def latent(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    return tensor_randn((n, dim, 1, 1), rng, 1.0)


def _finite(*values) -> bool:
    return all(math.isfinite(v) for v in values)


def train_gan(dataset: LabeledImageSet, config: GanConfig, class_id: int = 0,
              gen_spec: ArchitectureSpec | None = None,
              disc_spec: ArchitectureSpec | None = None,
              log_every: int = 0, log=None) -> GanCheckpoint:
    """Train one GAN on the images of ``dataset`` (all positives of one class)."""
    config.validate()
    if len(dataset) < 1:
        raise ValueError("cannot pretrain on an empty dataset")
    if class_id < dataset.labels.shape[1] and not np.all(dataset.labels[:, class_id] == 1):
        raise ValueError(f"pretraining set for class {class_id} contains negatives")
    gen_spec = gen_spec or load_builtin(config.generator_spec)
    disc_spec = disc_spec or load_builtin(config.discriminator_spec)
    if gen_spec.input_shape[0] != config.latent_dim:
        raise ValueError(f"latent_dim {config.latent_dim} does not match generator input "
                         f"{gen_spec.input_shape}")
    g_arch, d_arch, g_params, d_params = build_gan(gen_spec, disc_spec, config.seed)
    rng = derive_rng(config.seed, 12)
    real_all = to_gan_range(dataset.images).astype(np.float32)
    n, bs = len(real_all), config.batch_size
    g_opt = AdamState(config.learning_rate)
    d_opt = AdamState(config.learning_rate)
    d_loss = g_loss = math.nan
    for it in range(1, config.iterations + 1):
        for _ in range(config.d_steps_per_g_step):
            real = real_all[rng.choice(n, size=bs, replace=n < bs)]
            fake, _ = forward(g_arch, g_params, latent(bs, config.latent_dim, rng), True)
            # one joint batch so batch-norm statistics match what inference sees
            p, cache = forward(d_arch, d_params, np.concatenate([real, fake]), True)
            dl = gan_d_loss(p[:bs], p[bs:])
            _, gd = backward(d_arch, d_params, cache, np.concatenate([dl.grad_real, dl.grad_fake]),
                             need_input_grad=False)
            adam_step(d_opt, d_params, gd)
            d_loss = dl.value
        real = real_all[rng.choice(n, size=bs, replace=n < bs)]
        fake, c_gen = forward(g_arch, g_params, latent(bs, config.latent_dim, rng), True)
        p, cache = forward(d_arch, d_params, np.concatenate([real, fake]), True, update_running=False)
        gl = gan_g_loss(p[bs:])
        g_in, _ = backward(d_arch, d_params, cache, np.concatenate([np.zeros_like(gl.grad), gl.grad]))
        _, gg = backward(g_arch, g_params, c_gen, g_in[bs:], need_input_grad=False)
        adam_step(g_opt, g_params, gg)
        g_loss = gl.value
        if not _finite(d_loss, g_loss):
            raise DivergedError(it, f"d_loss={d_loss}, g_loss={g_loss}")
        if log and log_every and it % log_every == 0:
            log(f"class {class_id} iter {it}: d_loss={d_loss:.4f} g_loss={g_loss:.4f}")
    return GanCheckpoint(class_id, g_arch, d_arch, g_params, d_params, config,
                         (float(d_loss), float(g_loss)), config.iterations,
                         dataset.attribute_names[class_id] if class_id < len(dataset.attribute_names) else "")


def generate(ckpt: GanCheckpoint, n: int, seed: int) -> np.ndarray:
    """Raw generator output in the [-1, 1] GAN range."""
    if n < 1:
        raise ValueError("n must be >= 1")
    z = latent(n, ckpt.config.latent_dim, derive_rng(seed, 13))
    out, _ = forward(ckpt.generator_arch, ckpt.generator_params, z, training=False)
    return out


def sample_images(ckpt: GanCheckpoint, n: int, seed: int) -> np.ndarray:
    """``n`` generated images mapped back to the [0, 1] data range."""
    return from_gan_range(generate(ckpt, n, seed)).astype(np.float32)


def discriminate(ckpt: GanCheckpoint, images_gan_range: np.ndarray) -> np.ndarray:
    p, _ = forward(ckpt.discriminator_arch, ckpt.discriminator_params, images_gan_range, training=False)
    return p[:, 0]


def discriminator_accuracy(ckpt: GanCheckpoint, real_images: np.ndarray, n_fake: int, seed: int) -> float:
    """Real-vs-fake accuracy at threshold 0.5 on ``real_images`` (data range)
    plus ``n_fake`` fresh generator samples."""
    p_real = discriminate(ckpt, to_gan_range(real_images).astype(np.float32))
    p_fake = discriminate(ckpt, generate(ckpt, n_fake, seed))
    correct = int((p_real >= 0.5).sum() + (p_fake < 0.5).sum())
    return correct / (len(p_real) + len(p_fake))


# ---------------------------------------------------------------- persistence

def save_checkpoint(ckpt: GanCheckpoint, path: str | Path):
    meta = {"kind": "gan_checkpoint", "config": asdict(ckpt.config),
            "final_losses": list(ckpt.final_losses), "iteration": ckpt.iteration,
            "attribute_name": ckpt.attribute_name,
            "generator_arch": ckpt.generator_arch.to_json(),
            "discriminator_arch": ckpt.discriminator_arch.to_json(),
            "trainable": {**{f"generator.{k}": v for k, v in ckpt.generator_params.trainable.items()},
                          **{f"discriminator.{k}": v for k, v in ckpt.discriminator_params.trainable.items()}}}
    tensors = {**ckpt.generator_params.prefixed("generator.").entries,
               **ckpt.discriminator_params.prefixed("discriminator.").entries}
    fileformat.write_tensor_file(path, fileformat.CKPT_MAGIC, ckpt.class_id, meta, tensors)


def load_checkpoint(path: str | Path) -> GanCheckpoint:
    class_id, meta, tensors = fileformat.read_tensor_file(path, fileformat.CKPT_MAGIC)
    try:
        params = ParamSet(tensors, {k: bool(meta["trainable"].get(k, True)) for k in tensors})
        ckpt = GanCheckpoint(
            class_id=class_id,
            generator_arch=ArchitectureSpec.from_json(meta["generator_arch"]),
            discriminator_arch=ArchitectureSpec.from_json(meta["discriminator_arch"]),
            generator_params=params.strip("generator."),
            discriminator_params=params.strip("discriminator."),
            config=GanConfig(**meta["config"]),
            final_losses=tuple(meta["final_losses"]),
            iteration=int(meta["iteration"]),
            attribute_name=meta.get("attribute_name", ""))
    except (KeyError, TypeError, ValueError) as e:
        raise fileformat.FormatError(f"{path}: invalid checkpoint metadata: {e}") from e
    for arch, ps in ((ckpt.generator_arch, ckpt.generator_params),
                     (ckpt.discriminator_arch, ckpt.discriminator_params)):
        expected = param_shapes(arch)
        got = {k: v.shape for k, v in ps.entries.items()}
        if got != expected:
            raise fileformat.FormatError(f"{path}: tensors do not match {arch.name}")
    return ckpt
