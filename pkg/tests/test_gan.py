import math
from dataclasses import replace

import numpy as np
import pytest

from cegan.data import SynthConfig, single_class_subset, synth_generate
from cegan.fileformat import FormatError
from cegan.gan import (DivergedError, GanCheckpoint, GanConfig, build_gan, discriminator_accuracy,
                       generate, load_checkpoint, sample_images, save_checkpoint, train_gan)
from cegan.layers import (ArchitectureSpec, InfeasibleArchitecture, init_params, load_builtin,
                          param_shapes)
from cegan.tensor import make_rng


@pytest.fixture(scope="module")
def class_set():
    ds = synth_generate(SynthConfig(n_examples=400, seed=5))
    return single_class_subset(ds, 2)


@pytest.fixture(scope="module")
def short_ckpt(class_set):
    return train_gan(class_set, GanConfig(iterations=5, batch_size=8, seed=1), class_id=2)


def test_build_desk_gan():
    g_arch, d_arch, g, d = build_gan(load_builtin("desk_generator"), load_builtin("desk_discriminator"))
    assert d_arch.layers[-1].out_channels == 1 and d_arch.layers[-1].activation == "sigmoid"
    assert set(g.names()) == set(param_shapes(g_arch))
    assert set(d.names()) == set(param_shapes(d_arch))


def test_build_rejects_mismatch():
    disc = load_builtin("desk_discriminator")
    other = replace(disc, input_shape=(3, 32, 32))
    with pytest.raises(InfeasibleArchitecture):
        build_gan(load_builtin("desk_generator"), other)


def test_build_table_specs_flags_table2_layer7():
    with pytest.raises(InfeasibleArchitecture) as e:
        build_gan(load_builtin("table1_generator"), load_builtin("table2_discriminator"))
    assert e.value.layer == 7


def test_table1_generator_sample_shape():
    gen = load_builtin("table1_generator")
    disc = load_builtin("desk_discriminator")
    ck = GanCheckpoint(0, gen, disc, init_params(gen, make_rng(0)), init_params(disc, make_rng(1)),
                       GanConfig())
    out = sample_images(ck, 2, seed=0)
    assert out.shape == (2, 3, 218, 178)
    assert out.min() >= 0 and out.max() <= 1


def test_train_smoke_and_iteration_field(short_ckpt, class_set):
    assert short_ckpt.iteration == 5 and short_ckpt.class_id == 2
    assert all(math.isfinite(v) for v in short_ckpt.final_losses)
    one = train_gan(class_set, GanConfig(iterations=1, batch_size=4), class_id=2)
    assert one.iteration == 1


def test_train_deterministic(class_set, short_ckpt):
    again = train_gan(class_set, GanConfig(iterations=5, batch_size=8, seed=1), class_id=2)
    assert again.final_losses == short_ckpt.final_losses
    for k in short_ckpt.discriminator_params.names():
        np.testing.assert_array_equal(again.discriminator_params[k], short_ckpt.discriminator_params[k])


def test_train_rejects_negatives_and_bad_config(class_set):
    ds = synth_generate(SynthConfig(n_examples=100))
    with pytest.raises(ValueError):
        train_gan(ds, GanConfig(iterations=1), class_id=0)
    with pytest.raises(ValueError):
        train_gan(class_set, GanConfig(iterations=0), class_id=2)
    with pytest.raises(ValueError):
        train_gan(class_set, GanConfig(latent_dim=7, iterations=1), class_id=2)


def test_divergence_aborts(class_set, monkeypatch):
    import cegan.gan as G
    real = G.gan_g_loss

    def nan_loss(p):
        out = real(p)
        out.value = float("nan")
        return out

    monkeypatch.setattr(G, "gan_g_loss", nan_loss)
    with pytest.raises(DivergedError) as e:
        train_gan(class_set, GanConfig(iterations=3, batch_size=4), class_id=2)
    assert e.value.iteration == 1


def test_sampling(short_ckpt):
    a = sample_images(short_ckpt, 16, seed=3)
    assert a.shape == (16, 3, 28, 24)
    np.testing.assert_array_equal(a, sample_images(short_ckpt, 16, seed=3))
    raw = generate(short_ckpt, 4, seed=0)
    assert raw.min() >= -1 and raw.max() <= 1
    with pytest.raises(ValueError):
        sample_images(short_ckpt, 0, seed=0)


def test_checkpoint_roundtrip(tmp_path, short_ckpt):
    p = tmp_path / "c.ckpt"
    save_checkpoint(short_ckpt, p)
    back = load_checkpoint(p)
    assert back.class_id == 2 and back.iteration == 5 and back.config == short_ckpt.config
    assert back.final_losses == pytest.approx(short_ckpt.final_losses)
    for part in ("generator_params", "discriminator_params"):
        a, b = getattr(short_ckpt, part), getattr(back, part)
        assert a.names() == b.names() and a.trainable == b.trainable
        for k in a.names():
            np.testing.assert_array_equal(a[k], b[k])
    np.testing.assert_array_equal(sample_images(back, 4, 9), sample_images(short_ckpt, 4, 9))
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(FormatError):
        load_checkpoint(p)


def test_discriminator_accuracy_range(short_ckpt, class_set):
    acc = discriminator_accuracy(short_ckpt, class_set.images[:20], 20, seed=0)
    assert 0.0 <= acc <= 1.0
