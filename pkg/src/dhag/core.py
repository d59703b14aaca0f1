"""Encoder / perturbators / discriminator model, its losses and the training loop."""

import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .exceptions import ConfigError, DimensionError, NonFiniteError
from .nn import MLP, Adam, Conv1d, Linear, Module

logger = logging.getLogger(__name__)

PERTURB_MODES = ("latent", "feature")
PERTURBATOR_ARCHS = ("cnn", "mlp")


@dataclass
class TrainConfig:
    lambda1: float = 0.1
    lambda2: float = 0.1
    n_augment: int = 50  # K
    n_perturbators: int = 3  # L
    batch_size: int = 512  # m
    lr_encoder: float = 5e-3
    lr_discriminator: float = 5e-3
    lr_perturbator: float = 1e-5
    epochs: int = 200
    seed: int = 0
    perturb_mode: str = "latent"
    gamma: float = 0.0
    adversarial_perturbators: bool = False

    def validate(self):
        problems = []
        if self.lambda1 < 0 or self.lambda2 < 0:
            problems.append("lambda1 and lambda2 must be non-negative")
        if self.n_perturbators < 1:
            problems.append("n_perturbators must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not 0 <= self.n_augment <= self.batch_size:
            problems.append(f"n_augment must lie in [0, batch_size={self.batch_size}]")
        if min(self.lr_encoder, self.lr_discriminator, self.lr_perturbator) < 0:
            problems.append("learning rates must be non-negative")
        if self.epochs < 0:
            problems.append("epochs must be non-negative")
        if self.perturb_mode not in PERTURB_MODES:
            problems.append(f"perturb_mode must be one of {PERTURB_MODES}")
        if not 0.0 <= self.gamma < 1.0:
            problems.append("gamma must lie in [0, 1)")
        if problems:
            raise ConfigError("; ".join(problems))
        return self


@dataclass
class ArchConfig:
    """Network sizes. None of these are fixed by the method; all are tunable."""

    latent_dim: int = 32
    encoder_hidden: tuple = (64,)
    discriminator_hidden: tuple = (32,)
    perturbator_channels: tuple = (32, 32)
    perturbator_arch: str = "cnn"

    def __post_init__(self):
        self.encoder_hidden = tuple(int(v) for v in self.encoder_hidden)
        self.discriminator_hidden = tuple(int(v) for v in self.discriminator_hidden)
        self.perturbator_channels = tuple(int(v) for v in self.perturbator_channels)
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.perturbator_arch not in PERTURBATOR_ARCHS:
            raise ConfigError(f"perturbator_arch must be one of {PERTURBATOR_ARCHS}")


@dataclass
class LossReport:
    l_ce: float
    l_norm: float
    l_div: float
    l_aug: float
    l_total: float

    def as_dict(self):
        return dataclasses.asdict(self)


_LOSS_FIELDS = tuple(f.name for f in dataclasses.fields(LossReport))


class Perturbator(Module):
    """Noise-conditioned generator ``x -> eps``.

    A standard-normal noise value is appended to each row as an extra
    feature. In ``cnn`` mode the (d+1) values are channels of a length-1
    signal passed through width-1 convolutions; ``mlp`` uses linear layers.
    """

    def __init__(self, n_features, out_dim, rng, channels=(32, 32), arch="cnn"):
        c_in = n_features + 1
        self.arch = arch
        sizes = [c_in, *channels]
        if arch == "cnn":
            self.convs = [
                Conv1d(sizes[i], sizes[i + 1], 1, rng, scheme="kaiming")
                for i in range(len(channels))
            ]
        else:
            self.convs = [
                Linear(sizes[i], sizes[i + 1], rng, scheme="kaiming") for i in range(len(channels))
            ]
        self.head = Linear(sizes[-1], out_dim, rng)

    def forward(self, x, noise):
        h = ag.concat_channel(x, noise)
        m = h.shape[0]
        if self.arch == "cnn":
            h = ag.reshape(h, (m, h.shape[1], 1))
            for conv in self.convs:
                h = ag.relu(conv(h))
            h = ag.reshape(h, (m, h.shape[1] * h.shape[2]))
        else:
            for layer in self.convs:
                h = ag.relu(layer(h))
        return self.head(h)


class DhagModel(Module):
    def __init__(self, n_features, n_perturbators=3, arch=None, perturb_mode="latent", rng=None):
        arch = arch or ArchConfig()
        if n_perturbators < 1:
            raise ConfigError("need at least one perturbator")
        if perturb_mode not in PERTURB_MODES:
            raise ConfigError(f"perturb_mode must be one of {PERTURB_MODES}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_features = int(n_features)
        self.arch = arch
        self.perturb_mode = perturb_mode
        z = arch.latent_dim
        self.encoder = MLP([n_features, *arch.encoder_hidden, z], rng)
        self.discriminator = MLP([z, *arch.discriminator_hidden, 1], rng, output="sigmoid")
        out_dim = z if perturb_mode == "latent" else n_features
        self.perturbators = [
            Perturbator(n_features, out_dim, rng, arch.perturbator_channels, arch.perturbator_arch)
            for _ in range(n_perturbators)
        ]

    @property
    def n_perturbators(self):
        return len(self.perturbators)

    @property
    def latent_dim(self):
        return self.arch.latent_dim

    def architecture(self):
        return {
            "n_features": self.n_features,
            "n_perturbators": self.n_perturbators,
            "perturb_mode": self.perturb_mode,
            "latent_dim": self.arch.latent_dim,
            "encoder_hidden": list(self.arch.encoder_hidden),
            "discriminator_hidden": list(self.arch.discriminator_hidden),
            "perturbator_channels": list(self.arch.perturbator_channels),
            "perturbator_arch": self.arch.perturbator_arch,
        }

    @classmethod
    def from_architecture(cls, meta):
        arch = ArchConfig(
            latent_dim=meta["latent_dim"],
            encoder_hidden=meta["encoder_hidden"],
            discriminator_hidden=meta["discriminator_hidden"],
            perturbator_channels=meta["perturbator_channels"],
            perturbator_arch=meta["perturbator_arch"],
        )
        return cls(meta["n_features"], meta["n_perturbators"], arch, meta["perturb_mode"])

    def parameter_groups(self):
        return {
            "encoder": self.encoder.parameters(),
            "discriminator": self.discriminator.parameters(),
            "perturbators": [p for g in self.perturbators for p in g.parameters()],
        }

    def encode(self, x):
        return self.encoder(x)

    def discriminate(self, z):
        p = self.discriminator(z)
        return ag.reshape(p, (p.shape[0],))

    def perturb(self, x, noise):
        """Perturbations of shape (L, m, out_dim); ``noise`` has shape (L, m)."""
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != (self.n_perturbators, x.shape[0]):
            raise DimensionError(
                f"noise must have shape ({self.n_perturbators}, {x.shape[0]}), got {noise.shape}"
            )
        return ag.stack([g.forward(x, noise[i]) for i, g in enumerate(self.perturbators)])


def _as_input(model, x):
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 2 or x.shape[1] != model.n_features:
        raise DimensionError(f"expected input of shape (n, {model.n_features}), got {x.shape}")
    return x


def sample_noise(model, m, rng):
    """One standard-normal scalar per row, per perturbator."""
    return rng.standard_normal((model.n_perturbators, m))


def generate_perturbations(model, x, rng):
    x = _as_input(model, x)
    return model.perturb(x, sample_noise(model, x.shape[0], rng))


def perturbation_norms(eps):
    e = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
    return np.sqrt(np.sum(e * e, axis=-1))


def labels_from_norms(norms, k):
    """Per row of ``norms`` (L, m): the k smallest get 0, the rest 1; ties by index."""
    norms = np.atleast_2d(np.asarray(norms, dtype=np.float64))
    m = norms.shape[1]
    if not 0 <= k <= m:
        raise ConfigError(f"K={k} must lie in [0, m={m}]")
    order = np.argsort(norms, axis=1, kind="stable")
    labels = np.ones(norms.shape, dtype=np.int64)
    rows = np.arange(norms.shape[0])[:, None]
    labels[rows, order[:, :k]] = 0
    return labels


def assign_pseudo_labels(eps, k):
    """Pseudo-labels (L, m) for perturbations ``eps`` (L, m, z)."""
    return labels_from_norms(perturbation_norms(eps), k)


def loss_ce(model, x, eps, pseudo_labels):
    """Clean rows labelled 0 plus the mean over perturbators of perturbed rows vs pseudo-labels."""
    x = _as_input(model, x)
    pseudo_labels = np.asarray(pseudo_labels)
    n_pert = eps.shape[0]
    z = model.encode(x)
    clean = ag.bce(model.discriminate(z), np.zeros(x.shape[0]))
    perturbed = None
    for i in range(n_pert):
        e = ag.take(eps, i)
        if model.perturb_mode == "latent":
            zt = ag.add(z, e)
        else:
            zt = model.encode(ag.add(x, e))
        term = ag.bce(model.discriminate(zt), pseudo_labels[i])
        perturbed = term if perturbed is None else ag.add(perturbed, term)
    per_row = ag.add(clean, ag.mul(perturbed, 1.0 / n_pert))
    return ag.mean(per_row)


def loss_norm(eps):
    return ag.mean(ag.row_l2_norm(eps))


def loss_div(eps):
    """Mean cosine similarity over ordered pairs of distinct perturbators, per row."""
    n_pert, m, _ = eps.shape
    if n_pert < 2:
        warnings.warn("diversity loss is 0 with a single perturbator", RuntimeWarning, stacklevel=2)
        return Tensor(0.0)
    per_row = ag.permute(eps, (1, 0, 2))  # (m, L, z)
    gram = ag.matmul(per_row, ag.transpose(per_row))
    norms = ag.row_l2_norm(per_row)
    denom = ag.add(
        ag.matmul(ag.reshape(norms, (m, n_pert, 1)), ag.reshape(norms, (m, 1, n_pert))),
        ag.COSINE_EPS,
    )
    if np.any(norms.data == 0.0):
        warnings.warn("zero perturbation vector; its cosine similarities count as 0", RuntimeWarning, stacklevel=2)
    sims = ag.div(gram, denom)
    off_diag = np.broadcast_to(1.0 - np.eye(n_pert), (m, n_pert, n_pert))
    total = ag.sum(ag.mul(sims, Tensor(off_diag)))
    return ag.mul(total, 1.0 / (m * n_pert * (n_pert - 1)))


def loss_total(l_ce, l_norm, l_div, lambda1, lambda2, l_aug=None):
    out = ag.add(ag.add(l_ce, ag.mul(l_norm, float(lambda1))), ag.mul(l_div, float(lambda2)))
    if l_aug is not None:
        out = ag.add(out, l_aug)
    return out


def semi_sup_loss(model, x_anom):
    """Cross-entropy of known anomalies against label 1."""
    n_s = x_anom.shape[0] if isinstance(x_anom, Tensor) else len(x_anom)
    if n_s == 0:
        raise ConfigError("semi-supervised loss needs at least one labelled anomaly")
    x_anom = _as_input(model, x_anom)
    p = model.discriminate(model.encode(x_anom))
    return ag.mean(ag.bce(p, np.ones(x_anom.shape[0])))


def make_optimizers(model, config):
    groups = model.parameter_groups()
    return {
        "encoder": Adam(groups["encoder"], config.lr_encoder),
        "discriminator": Adam(groups["discriminator"], config.lr_discriminator),
        "perturbators": Adam(groups["perturbators"], config.lr_perturbator),
    }


def compute_losses(model, x, noise, config, x_anom=None):
    """Build the full objective for one batch.

    Returns ``(total, parts)`` where ``parts`` maps loss names to Tensors and
    also carries the perturbations and pseudo-labels.
    """
    eps = model.perturb(x, noise)
    k = min(config.n_augment, x.shape[0])
    labels = assign_pseudo_labels(eps, k)
    eps_ce = ag.grad_reverse(eps) if config.adversarial_perturbators else eps
    l_ce = loss_ce(model, x, eps_ce, labels)
    l_norm = loss_norm(eps)
    l_div = loss_div(eps)
    l_aug = semi_sup_loss(model, x_anom) if x_anom is not None and len(x_anom) else None
    total = loss_total(l_ce, l_norm, l_div, config.lambda1, config.lambda2, l_aug)
    parts = {
        "l_ce": l_ce,
        "l_norm": l_norm,
        "l_div": l_div,
        "l_aug": l_aug,
        "eps": eps,
        "labels": labels,
    }
    return total, parts


def _diagnostics(model, x, parts):
    with ag.no_grad():
        p = model.discriminate(model.encode(x)).data
    norms = perturbation_norms(parts["eps"])
    return (
        f"max perturbation norm={np.max(norms):.6g}, "
        f"clean probability range=[{np.min(p):.6g}, {np.max(p):.6g}]"
    )


def train_step(model, x, config, optimizers, rng, x_anom=None, aug_batch_size=None):
    """One iteration: perturb, pseudo-label, build the objective, backprop, update all groups.

    ``x_anom`` is the pool of labelled anomalies; a random sub-batch of at
    most ``aug_batch_size`` (default: the batch size) rows enters the
    objective. No random numbers are drawn for it when the pool is empty.
    """
    x = _as_input(model, x)
    noise = sample_noise(model, x.shape[0], rng)
    anom_batch = None
    if x_anom is not None and len(x_anom):
        limit = aug_batch_size or config.batch_size
        if len(x_anom) > limit:
            anom_batch = np.asarray(x_anom)[np.sort(rng.choice(len(x_anom), limit, replace=False))]
        else:
            anom_batch = np.asarray(x_anom)
    total, parts = compute_losses(model, x, noise, config, anom_batch)
    if not math.isfinite(float(total.data)):
        raise NonFiniteError(f"non-finite training loss; {_diagnostics(model, x, parts)}")
    for opt in optimizers.values():
        opt.zero_grad()
    total.backward()
    for opt in optimizers.values():
        opt.step()
    return LossReport(
        l_ce=float(parts["l_ce"].data),
        l_norm=float(parts["l_norm"].data),
        l_div=float(parts["l_div"].data),
        l_aug=0.0 if parts["l_aug"] is None else float(parts["l_aug"].data),
        l_total=float(total.data),
    )


@dataclass
class TrainResult:
    model: DhagModel
    history: list = field(default_factory=list)  # per-epoch mean LossReport


def build_model(n_features, config, arch=None, rng=None):
    init_rng, _ = seeded_streams(config.seed) if rng is None else (rng, None)
    return DhagModel(n_features, config.n_perturbators, arch, config.perturb_mode, init_rng)


def seeded_streams(seed):
    """Independent generators for initialisation and for training."""
    init_ss, train_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(train_ss)


def fit(model, x_train, config, x_anom=None, rng=None, on_step=None):
    """Train ``model`` for ``config.epochs`` epochs of shuffled mini-batches.

    ``x_train`` holds normal rows only. ``on_step(epoch, step, report)`` is
    called after every update.
    """
    config.validate()
    x_train = np.asarray(x_train, dtype=np.float64)
    if x_train.ndim != 2 or x_train.shape[1] != model.n_features:
        raise DimensionError(f"expected training data (n, {model.n_features}), got {x_train.shape}")
    if config.gamma > 0 and (x_anom is None or len(x_anom) == 0):
        raise ConfigError("gamma > 0 requires at least one labelled anomaly")
    if rng is None:
        _, rng = seeded_streams(config.seed)
    optimizers = make_optimizers(model, config)
    n = x_train.shape[0]
    m = config.batch_size
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        reports = []
        for step, start in enumerate(range(0, n, m)):
            batch = x_train[order[start : start + m]]
            report = train_step(model, batch, config, optimizers, rng, x_anom)
            reports.append(report)
            if on_step is not None:
                on_step(epoch, step, report)
        means = {k: float(np.mean([getattr(r, k) for r in reports])) for k in _LOSS_FIELDS}
        history.append(LossReport(**means))
        logger.debug("epoch %d: %s", epoch, history[-1])
    return TrainResult(model, history)


def anomaly_score(model, x):
    """Probability of being anomalous for each row of ``x``."""
    x = _as_input(model, x)
    with ag.no_grad():
        p = model.discriminate(model.encode(x)).data
    # keep the open interval even where the sigmoid saturates in float64
    return np.clip(p, np.finfo(np.float64).tiny, np.nextafter(1.0, 0.0))


def classify(scores, delta=0.5):
    """1 where the score is strictly greater than ``delta``."""
    if not 0.0 < delta < 1.0:
        raise ConfigError("delta must lie in (0, 1)")
    return (np.asarray(scores) > delta).astype(np.int64)
