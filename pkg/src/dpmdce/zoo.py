"""Training recipes for the model inventory: classifiers, a GAN, an autoencoder.

Classifier trunks are relu ladders ending at the 64-wide feature layer and a
linear 10-way head; the "depth" tag counts the relu layers. Each trained
classifier must clear a test-accuracy gate before anything downstream may use
it, and the achieved accuracy travels in the net's metadata.

None of the hyperparameters below are claims about anything; they are just
defaults that train quickly and stably on CPU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (
    Adam,
    DenseNet,
    TrainingError,
    backprop_batch,
    cross_entropy_loss,
    forward_batch,
    init_dense_net,
    output_batch,
    train_step,
)

FEATURE_DIM = 64
N_CLASSES = 10
ACCURACY_GATE = 0.70
RECON_GATE = 0.05
LATENT_DIM = 64  # generator input width
AE_LATENT = 32

# relu trunk widths by depth tag; the 64-wide layer is the feature space
BLACKBOX_WIDTHS = {
    5: [256, 256, 128, 128, FEATURE_DIM],
    7: [256, 256, 256, 128, 128, 128, FEATURE_DIM],
    9: [256, 256, 256, 256, 128, 128, 128, 128, FEATURE_DIM],
}


class AccuracyGateError(TrainingError):
    def __init__(self, accuracy: float, gate: float = ACCURACY_GATE):
        super().__init__(f"test accuracy {accuracy:.4f} below the {gate:.2f} gate")
        self.accuracy = accuracy


class ReconstructionGateError(TrainingError):
    def __init__(self, mse: float, gate: float = RECON_GATE):
        super().__init__(f"reconstruction MSE {mse:.5f} above the {gate:.3f} gate")
        self.mse = mse


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    early_stop_acc: float | None = None  # stop once test accuracy clears this


@dataclass
class GanConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 2e-4
    beta1: float = 0.5
    latent_dim: int = LATENT_DIM
    real_label: float = 0.9  # one-sided smoothing
    seed: int = 0


def blackbox_dims(depth: int) -> tuple[list[int], list[str]]:
    if depth not in BLACKBOX_WIDTHS:
        raise ValueError(f"depth must be one of {sorted(BLACKBOX_WIDTHS)}, got {depth}")
    widths = BLACKBOX_WIDTHS[depth]
    return [784] + widths + [N_CLASSES], ["relu"] * len(widths) + ["identity"]


def evaluate_accuracy(net: DenseNet, dataset, chunk: int = 2048) -> float:
    hits = 0
    for i in range(0, len(dataset), chunk):
        logits = output_batch(net, dataset.images[i : i + chunk])
        hits += int(np.sum(np.argmax(logits, axis=1) == dataset.labels[i : i + chunk]))
    return hits / len(dataset)


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_blackbox(depth: int, train_data, test_data, config: TrainConfig | None = None) -> DenseNet:
    """Train one classifier and enforce the test-accuracy gate."""
    cfg = config or TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    dims, acts = blackbox_dims(depth)
    net = init_dense_net(dims, acts, rng, role="blackbox")
    opt = Adam(cfg.lr)
    epochs_run = 0
    for _ in range(cfg.epochs):
        for idx in _epoch_batches(len(train_data), cfg.batch_size, rng):
            yb = train_data.labels[idx]
            train_step(net, train_data.images[idx], lambda lg: cross_entropy_loss(lg, yb), opt)
        epochs_run += 1
        if cfg.early_stop_acc is not None:
            if evaluate_accuracy(net, test_data) >= cfg.early_stop_acc:
                break
    accuracy = evaluate_accuracy(net, test_data)
    if accuracy <= ACCURACY_GATE:
        raise AccuracyGateError(accuracy)
    net.meta.update(
        depth=depth, accuracy=accuracy, seed=cfg.seed, epochs=epochs_run, trained_on=len(train_data)
    )
    return net


# ---------------------------------------------------------------------------
# GAN

def generator_net(rng: np.random.Generator, latent_dim: int = LATENT_DIM) -> DenseNet:
    # tanh hiddens: relu generators mode-collapse on near-discrete data
    return init_dense_net([latent_dim, 256, 512, 784], ["tanh", "tanh", "sigmoid"], rng, "generator")


def discriminator_net(rng: np.random.Generator) -> DenseNet:
    return init_dense_net([784, 256, 128, 1], ["tanh", "tanh", "identity"], rng, "discriminator")


def _bce_rows(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    l = logits.ravel()
    t = targets.ravel()
    loss = float(np.mean(np.maximum(l, 0.0) - l * t + np.log1p(np.exp(-np.abs(l)))))
    sig = 1.0 / (1.0 + np.exp(-np.clip(l, -40.0, 40.0)))
    return loss, ((sig - t) / l.size).reshape(logits.shape)


def sample_generator(generator: DenseNet, n: int, rng: np.random.Generator) -> np.ndarray:
    return output_batch(generator, rng.standard_normal((n, generator.in_dim)))


def train_gan(train_data, config: GanConfig | None = None) -> tuple[DenseNet, DenseNet]:
    """Alternating single steps with the non-saturating generator loss.

    Acceptance downstream is property-based (output range, sample diversity),
    not visual fidelity. A collapse check runs at the end and only warns via
    metadata; collapsed generators still return.
    """
    cfg = config or GanConfig()
    rng = np.random.default_rng(cfg.seed)
    gen = generator_net(rng, cfg.latent_dim)
    dis = discriminator_net(rng)
    g_opt = Adam(cfg.lr, beta1=cfg.beta1)
    d_opt = Adam(cfg.lr, beta1=cfg.beta1)

    for _ in range(cfg.epochs):
        for idx in _epoch_batches(len(train_data), cfg.batch_size, rng):
            real = train_data.images[idx]
            n = real.shape[0]
            z = rng.standard_normal((n, cfg.latent_dim))
            fake = output_batch(gen, z)

            # discriminator on real + detached fake in one concatenated batch
            batch = np.concatenate([real, fake])
            targets = np.concatenate([np.full(n, cfg.real_label), np.zeros(n)])
            train_step(dis, batch, lambda lg: _bce_rows(lg, targets), d_opt)

            # generator chases D's judgment of fresh fakes
            z = rng.standard_normal((n, cfg.latent_dim))
            g_acts = forward_batch(gen, z)
            d_acts = forward_batch(dis, g_acts[-1])
            loss, dlogits = _bce_rows(d_acts[-1], np.ones(n))
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite generator loss: {loss!r}")
            _, _, dfake = backprop_batch(dis, g_acts[-1], d_acts, dlogits)
            wg, bg, _ = backprop_batch(gen, z, g_acts, dfake)
            g_opt.apply(gen, wg, bg)

    samples = sample_generator(gen, 256, np.random.default_rng(cfg.seed + 1))
    pixel_var = float(np.mean(np.var(samples, axis=0)))
    gen.meta.update(seed=cfg.seed, epochs=cfg.epochs, sample_pixel_var=pixel_var)
    if pixel_var < 1e-4:
        gen.meta["mode_collapse_warning"] = True
    dis.meta.update(seed=cfg.seed, epochs=cfg.epochs)
    return gen, dis


# ---------------------------------------------------------------------------
# autoencoder

def train_autoencoder(train_data, test_data, config: TrainConfig | None = None) -> tuple[DenseNet, DenseNet]:
    """Joint MSE training of the encoder/decoder pair, gated on test MSE."""
    cfg = config or TrainConfig(epochs=10)
    rng = np.random.default_rng(cfg.seed)
    enc = init_dense_net([784, 256, AE_LATENT], ["relu", "identity"], rng, "encoder")
    dec = init_dense_net([AE_LATENT, 256, 784], ["relu", "sigmoid"], rng, "decoder")
    e_opt = Adam(cfg.lr)
    d_opt = Adam(cfg.lr)

    for _ in range(cfg.epochs):
        for idx in _epoch_batches(len(train_data), cfg.batch_size, rng):
            xb = train_data.images[idx]
            e_acts = forward_batch(enc, xb)
            d_acts = forward_batch(dec, e_acts[-1])
            diff = d_acts[-1] - xb
            loss = float(np.mean(diff * diff))
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite reconstruction loss: {loss!r}")
            grad = (2.0 / diff.size) * diff
            dw, db, dlat = backprop_batch(dec, e_acts[-1], d_acts, grad)
            d_opt.apply(dec, dw, db)
            ew, eb, _ = backprop_batch(enc, xb, e_acts, dlat)
            e_opt.apply(enc, ew, eb)

    mse = reconstruction_mse(enc, dec, test_data)
    if mse >= RECON_GATE:
        raise ReconstructionGateError(mse)
    for net in (enc, dec):
        net.meta.update(seed=cfg.seed, epochs=cfg.epochs, test_mse=mse)
    return enc, dec


def reconstruction_mse(encoder: DenseNet, decoder: DenseNet, dataset, chunk: int = 2048) -> float:
    total, count = 0.0, 0
    for i in range(0, len(dataset), chunk):
        xb = dataset.images[i : i + chunk]
        recon = output_batch(decoder, output_batch(encoder, xb))
        total += float(np.sum((recon - xb) ** 2))
        count += xb.size
    return total / count
