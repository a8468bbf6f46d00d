import numpy as np
import pytest
import torch

from slsr.data import ImageRecord
from slsr.gan import Discriminator, GanConfig, Generator, init_pair, pseudo_generator_sample, sample, train_gan


def cluster_images(corpus, c=0):
    return [r for r in corpus.train if corpus.planted_clusters[r.identity] == c]


def small_cfg(**kw):
    kw.setdefault("base_channels", 8)
    kw.setdefault("batch_size", 16)
    return GanConfig.desk(**kw)


def test_defaults():
    cfg = GanConfig()
    assert (cfg.latent_dim, cfg.adam_lr, cfg.adam_beta1, cfg.epochs) == (100, 0.0002, 0.5, 30)
    assert cfg.image_size == 128 and GanConfig.desk().image_size == 32
    with pytest.raises(ValueError):
        GanConfig(image_size=40)
    with pytest.raises(ValueError):
        GanConfig(latent_dim=0)


def test_full_size_generator_shape():
    g = Generator(100, 128, 64)
    assert g.project[0].out_features == 8 * 8 * 512
    assert sum(isinstance(m, torch.nn.ConvTranspose2d) for m in g.modules()) == 4


def test_zero_epochs(corpus):
    pair = train_gan(cluster_images(corpus), small_cfg(epochs=0))
    assert pair.steps_trained == 0 and pair.history == []


def test_short_run_is_finite_and_deterministic(corpus):
    imgs = cluster_images(corpus)
    a = train_gan(imgs, small_cfg(max_steps=15, seed=3))
    b = train_gan(imgs, small_cfg(max_steps=15, seed=3))
    assert a.steps_trained == 15
    for h in a.history:
        assert all(np.isfinite(v) for v in h.values())
    assert a.history == b.history
    x, y = sample(a, 6, seed=1), sample(b, 6, seed=1)
    assert all(np.array_equal(p.pixels, q.pixels) for p, q in zip(x, y))


def test_minimax_mode_runs(corpus):
    pair = train_gan(cluster_images(corpus), small_cfg(max_steps=3, loss="minimax"))
    assert pair.steps_trained == 3 and pair.history[-1]["g_loss"] <= 0


def test_size_mismatch(corpus):
    with pytest.raises(ValueError):
        train_gan(cluster_images(corpus), small_cfg(image_size=64, max_steps=1))


def test_sample_contract():
    pair = init_pair(GanConfig(image_size=128, base_channels=8), cluster_id=2)
    out = sample(pair, 4, seed=0)
    assert len(out) == 4
    for r in out:
        assert r.pixels.shape == (128, 128, 3)
        assert r.pixels.min() >= -1 and r.pixels.max() <= 1
        assert (r.split, r.camera, r.cluster) == ("generated", 0, 2)
    assert out[0].image_id == "gen_c2_000000"
    again = sample(pair, 4, seed=0)
    assert all(np.array_equal(p.pixels, q.pixels) for p, q in zip(out, again))
    assert not np.array_equal(out[0].pixels, sample(pair, 4, seed=1)[0].pixels)
    with pytest.raises(ValueError):
        sample(pair, 0, seed=0)


def test_generator_range_for_random_parameters():
    gen = torch.Generator().manual_seed(0)
    for _ in range(5):
        g = Generator(10, 16, 4)
        with torch.no_grad():
            for p in g.parameters():
                p.copy_(torch.randn(p.shape, generator=gen) * 3)
        x = g(torch.rand(8, 10, generator=gen) * 2 - 1)
        assert x.min() >= -1 and x.max() <= 1


def test_discriminator_output_in_open_interval():
    gen = torch.Generator().manual_seed(1)
    for _ in range(5):
        d = Discriminator(16, 4).double().eval()
        with torch.no_grad():
            for p in d.parameters():
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.1)
        prob = d(torch.randn(8, 3, 16, 16, generator=gen, dtype=torch.float64))
        assert torch.all((prob > 0) & (prob < 1))


def test_generator_update_moves_parameters(corpus):
    cfg = small_cfg(max_steps=1)
    before = [p.detach().clone() for p in init_pair(cfg).generator.parameters()]
    after = list(train_gan(cluster_images(corpus), cfg).generator.parameters())
    assert any(not torch.equal(a, b) for a, b in zip(before, after))


def test_pseudo_generator(corpus):
    imgs = cluster_images(corpus, 1)
    exact = pseudo_generator_sample(imgs, 10, 0.0, seed=0, cluster_id=1)
    pool = {r.pixels.tobytes() for r in imgs}
    assert all(r.pixels.tobytes() in pool for r in exact)
    noisy = pseudo_generator_sample(imgs, 50, 5.0, seed=0, cluster_id=1)
    assert all(r.pixels.min() >= -1 and r.pixels.max() <= 1 for r in noisy)
    assert all(r.split == "generated" and r.cluster == 1 and r.camera == 0 for r in noisy)
    with pytest.raises(ValueError):
        pseudo_generator_sample([], 1, 0.1, seed=0)
    with pytest.raises(ValueError):
        pseudo_generator_sample(imgs, 1, -0.1, seed=0)


def test_pseudo_samples_stay_in_source_cluster(corpus):
    X = np.stack([r.pixels.reshape(-1) for r in corpus.train])
    fam = np.array([corpus.planted_clusters[r.identity] for r in corpus.train])
    hits = total = 0
    for c in range(3):
        out = pseudo_generator_sample(cluster_images(corpus, c), 100, 0.1, seed=c, cluster_id=c)
        for r in out:
            nn = np.argmin(((X - r.pixels.reshape(-1)) ** 2).sum(1))
            hits += fam[nn] == c
            total += 1
    assert hits / total >= 0.95
