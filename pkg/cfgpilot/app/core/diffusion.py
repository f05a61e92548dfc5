"""Toy class-conditional pixel-space diffusion: shapes dataset, noise schedule, denoiser,
DDIM sampling with classifier-free guidance and the proxy classifier."""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from ..models import ClassifierConfig, DenoiserConfig, ScheduleConfig
from . import diffcore
from .diffcore import AdamState, DenseNet, cosine_lr

logger = logging.getLogger(__name__)

CLASS_NAMES = ("disk", "square", "cross", "stripes")
N_CLASSES = len(CLASS_NAMES)
IMAGE_SIZE = 16
GUIDANCE_MIN = 1.0
GUIDANCE_MAX = 12.0
TEST_EVERY = 5  # every fifth shuffled image of a class goes to the test split


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------

@dataclass
class NoiseSchedule:
    """Cumulative products ``alpha_bars[t]`` for t = 0..T_train, with alpha_bars[0] = 1."""
    alpha_bars: np.ndarray
    t_sample: int

    def __post_init__(self):
        self.alpha_bars = np.asarray(self.alpha_bars, dtype=np.float64)
        if self.alpha_bars[0] != 1.0:
            raise ValueError("alpha_bars[0] must be 1")
        if np.any(self.alpha_bars[1:] <= 0.0) or np.any(np.diff(self.alpha_bars) >= 0.0):
            raise ValueError("alpha_bars must be strictly decreasing within (0, 1]")
        if not 1 <= self.t_sample <= self.t_train:
            raise ValueError(f"t_sample must be in [1, {self.t_train}], got {self.t_sample}")

    @classmethod
    def linear(cls, t_train: int = 200, t_sample: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02):
        betas = np.linspace(beta_start, beta_end, t_train)
        alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(alpha_bars, t_sample)

    @classmethod
    def from_config(cls, config: ScheduleConfig) -> "NoiseSchedule":
        return cls.linear(config.t_train, config.t_sample, config.beta_start, config.beta_end)

    @property
    def t_train(self) -> int:
        return len(self.alpha_bars) - 1

    @property
    def betas(self) -> np.ndarray:
        return 1.0 - self.alpha_bars[1:] / self.alpha_bars[:-1]

    @property
    def timesteps(self) -> np.ndarray:
        """Sampling subsequence from T_train down to 0, ``t_sample + 1`` entries."""
        return np.rint(np.linspace(self.t_train, 0, self.t_sample + 1)).astype(int)

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.t_train:
            raise ValueError(f"timestep {t} outside [0, {self.t_train}]")
        return float(self.alpha_bars[t])


def q_sample(schedule: NoiseSchedule, x0, t: int, eps) -> np.ndarray:
    """Closed-form forward noising x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    if not 1 <= t <= schedule.t_train:
        raise ValueError(f"q_sample timestep {t} outside [1, {schedule.t_train}]")
    ab = schedule.alpha_bars[t]
    return math.sqrt(ab) * np.asarray(x0) + math.sqrt(1.0 - ab) * np.asarray(eps)


def predict_x0(schedule: NoiseSchedule, x_t, eps_hat, t: int, clamp: bool = True) -> np.ndarray:
    ab = schedule.alpha_bar(t)
    x0 = (np.asarray(x_t) - math.sqrt(1.0 - ab) * np.asarray(eps_hat)) / math.sqrt(ab)
    return np.clip(x0, -1.0, 1.0) if clamp else x0


def ddim_step(schedule: NoiseSchedule, x_t, eps_hat, t: int, t_prev: int, clamp: bool = True) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update from t to t_prev.

    With ``clamp`` the direction term uses the noise implied by the clamped x0.
    """
    if not 0 <= t_prev < t <= schedule.t_train:
        raise ValueError(f"DDIM step requires 0 <= t_prev < t <= {schedule.t_train}, got t={t}, t_prev={t_prev}")
    x0 = predict_x0(schedule, x_t, eps_hat, t, clamp=clamp)
    eps_hat = np.asarray(eps_hat)
    if clamp:
        ab = schedule.alpha_bars[t]
        eps_hat = (np.asarray(x_t) - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)
    ab_prev = schedule.alpha_bars[t_prev]
    return math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps_hat


def cfg_combine(eps_uncond, eps_cond, g: float) -> np.ndarray:
    eps_uncond = np.asarray(eps_uncond)
    return eps_uncond + g * (np.asarray(eps_cond) - eps_uncond)


def clip_guidance(cfg0: float, action: float) -> float:
    return float(np.clip(cfg0 + action, GUIDANCE_MIN, GUIDANCE_MAX))


# ---------------------------------------------------------------------------
# Procedural dataset
# ---------------------------------------------------------------------------

@dataclass
class ShapeDataset:
    images: np.ndarray  # (n, H, W) in [-1, 1]
    labels: np.ndarray  # (n,)
    is_test: np.ndarray  # (n,) bool
    seed: int
    class_names: Tuple[str, ...] = CLASS_NAMES

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    @property
    def train_images(self) -> np.ndarray:
        return self.images[~self.is_test]

    @property
    def train_labels(self) -> np.ndarray:
        return self.labels[~self.is_test]

    @property
    def test_images(self) -> np.ndarray:
        return self.images[self.is_test]

    @property
    def test_labels(self) -> np.ndarray:
        return self.labels[self.is_test]

    def class_counts(self) -> Dict[str, int]:
        return {name: int(np.sum(self.labels == i)) for i, name in enumerate(self.class_names)}


def render_shape(label: int, rng: np.random.Generator, size: int = IMAGE_SIZE, noise_std: float = 0.05) -> np.ndarray:
    """Render one jittered shape of class ``label`` on a -1 background."""
    centre = (size - 1) / 2.0
    cy, cx = centre + rng.uniform(-2.0, 2.0, size=2)
    jitter = rng.uniform(-1.0, 1.0)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx

    name = CLASS_NAMES[label]
    if name == "disk":
        r = 5.0 + jitter
        mask = dy * dy + dx * dx <= r * r
    elif name == "square":
        s = 4.0 + jitter
        mask = (np.abs(dy) <= s) & (np.abs(dx) <= s)
    elif name == "cross":
        arm = 5.0 + jitter
        mask = ((np.abs(dx) <= 1.0) & (np.abs(dy) <= arm)) | ((np.abs(dy) <= 1.0) & (np.abs(dx) <= arm))
    elif name == "stripes":
        half = 5.0 + jitter
        band = np.floor(dy + half).astype(int) % 4 < 2
        mask = (np.abs(dy) <= half) & (np.abs(dx) <= half) & band
    else:
        raise ValueError(f"unknown class label {label}")

    image = np.where(mask, 1.0, -1.0) + rng.normal(0.0, noise_std, size=(size, size))
    return np.clip(image, -1.0, 1.0)


def gen_dataset(seed: int, n_per_class: int, image_size: int = IMAGE_SIZE) -> ShapeDataset:
    """Class-balanced shapes with a seeded 80/20 train/test split inside each class."""
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(N_CLASSES), n_per_class)
    images = np.stack([render_shape(int(y), rng, image_size) for y in labels])

    is_test = np.zeros(len(labels), dtype=bool)
    for c in range(N_CLASSES):
        members = np.flatnonzero(labels == c)
        order = rng.permutation(members)
        is_test[order[TEST_EVERY - 1::TEST_EVERY]] = True
    return ShapeDataset(images, labels, is_test, seed)


# ---------------------------------------------------------------------------
# Denoiser
# ---------------------------------------------------------------------------

def time_embedding(t, dim: int = 16) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (*t.shape, dim)."""
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


class Denoiser:
    """Dense noise predictor over [image, time embedding, class embedding].

    Row ``n_classes`` of the class table is the null (unconditional) embedding.
    """

    def __init__(self, net: DenseNet, class_embedding: np.ndarray, time_dim: int, image_size: int = IMAGE_SIZE):
        self.net = net
        self.class_embedding = np.asarray(class_embedding, dtype=np.float64)
        self.time_dim = time_dim
        self.image_size = image_size
        expected = self.pixels + time_dim + self.class_embedding.shape[1]
        if net.input_dim != expected or net.output_dim != self.pixels:
            raise ValueError(f"denoiser net widths {net.widths} do not fit {self.pixels} pixels + embeddings")

    @classmethod
    def create(cls, config: DenoiserConfig, rng: np.random.Generator, image_size: int = IMAGE_SIZE) -> "Denoiser":
        pixels = image_size * image_size
        widths = [pixels + config.time_dim + config.class_dim, *config.hidden, pixels]
        net = DenseNet.create(widths, rng, hidden_activation="relu")
        embedding = rng.normal(0.0, 1.0, size=(N_CLASSES + 1, config.class_dim))
        return cls(net, embedding, config.time_dim, image_size)

    @property
    def pixels(self) -> int:
        return self.image_size * self.image_size

    @property
    def null_label(self) -> int:
        return self.class_embedding.shape[0] - 1

    @property
    def class_dim(self) -> int:
        return self.class_embedding.shape[1]

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {f"net.{k}": v for k, v in self.net.parameters().items()}
        params["class_embedding"] = self.class_embedding
        return params

    def set_parameters(self, params: Dict[str, np.ndarray]):
        embedding = np.asarray(params["class_embedding"], dtype=np.float64)
        if embedding.shape != self.class_embedding.shape:
            raise ValueError(f"class_embedding: shape {embedding.shape} != {self.class_embedding.shape}")
        self.class_embedding = embedding.copy()
        self.net.set_parameters({k[len("net."):]: v for k, v in params.items() if k.startswith("net.")})

    def param_count(self) -> int:
        return self.net.param_count() + self.class_embedding.size

    def _inputs(self, x_t: np.ndarray, t, labels) -> np.ndarray:
        n = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t), (n,))
        labels = np.broadcast_to(np.asarray(labels, dtype=int), (n,))
        return np.concatenate([x_t, time_embedding(t, self.time_dim), self.class_embedding[labels]], axis=1)

    def predict(self, x_t, t, labels) -> np.ndarray:
        """Predicted noise for flat images (D,) or (B, D)."""
        x_t = np.asarray(x_t, dtype=np.float64)
        single = x_t.ndim == 1
        x = x_t[None, :] if single else x_t
        out, _ = diffcore.forward(self.net, self._inputs(x, t, labels))
        return out[0] if single else out

    def predict_pair(self, x_t, t: int, label: int) -> Tuple[np.ndarray, np.ndarray]:
        """(unconditional, conditional) predictions for one flat image, evaluated as one batch."""
        x = np.asarray(x_t, dtype=np.float64).reshape(1, -1)
        out = self.predict(np.repeat(x, 2, axis=0), t, [self.null_label, label])
        return out[0], out[1]


@dataclass
class TrainingHistory:
    losses: List[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def _denoiser_batch(denoiser, schedule, images, labels, rng, p_uncond):
    n = images.shape[0]
    t = rng.integers(1, schedule.t_train + 1, size=n)
    eps = rng.standard_normal(images.shape)
    ab = schedule.alpha_bars[t][:, None]
    x_t = np.sqrt(ab) * images + np.sqrt(1.0 - ab) * eps
    drop = rng.random(n) < p_uncond
    labels = np.where(drop, denoiser.null_label, labels)
    return x_t, t, labels, eps


def train_denoiser(
    dataset: ShapeDataset,
    schedule: NoiseSchedule,
    config: DenoiserConfig,
    rng: np.random.Generator,
    progress: bool = True,
) -> Tuple[Denoiser, TrainingHistory]:
    """Minimize E||eps - eps_theta(x_t, t, c)||^2 with condition dropout (classifier-free training)."""
    images = dataset.train_images.reshape(len(dataset.train_images), -1)
    labels = dataset.train_labels
    if len(images) == 0:
        raise ValueError("cannot train the denoiser on an empty dataset")

    denoiser = Denoiser.create(config, rng, dataset.image_size)
    adam = AdamState.for_params(denoiser.parameters(), config.lr)
    history = TrainingHistory()

    for epoch in tqdm(range(config.epochs), desc="denoiser", disable=not progress):
        adam.lr = cosine_lr(config.lr, config.lr_min, epoch, config.epochs)
        order = rng.permutation(len(images))
        total, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            x_t, t, batch_labels, eps = _denoiser_batch(denoiser, schedule, images[idx], labels[idx], rng, config.p_uncond)
            inputs = denoiser._inputs(x_t, t, batch_labels)
            pred, tape = diffcore.forward(denoiser.net, inputs)
            diff = pred - eps
            loss = float(np.mean(diff * diff))
            if not math.isfinite(loss):
                raise FloatingPointError(f"denoiser training diverged at epoch {epoch}, batch starting {start}")

            net_grads, d_inputs = diffcore.backward(denoiser.net, tape, 2.0 * diff / diff.size)
            emb_grad = np.zeros_like(denoiser.class_embedding)
            np.add.at(emb_grad, batch_labels, d_inputs[:, -denoiser.class_dim:])
            grads = {f"net.{k}": v for k, v in net_grads.items()}
            grads["class_embedding"] = emb_grad

            params, adam = diffcore.adam_step(denoiser.parameters(), grads, adam)
            denoiser.set_parameters(params)
            total += loss * len(idx)
            seen += len(idx)

        history.losses.append(total / seen)
        logger.debug("denoiser epoch %d loss %.5f", epoch, history.losses[-1])

    if config.p_uncond >= 1.0:
        # Purely unconditional model: every class row is the null row.
        denoiser.class_embedding[:] = denoiser.class_embedding[denoiser.null_label]

    logger.info("Denoiser trained: %d epochs, loss %.5f -> %.5f", config.epochs, history.losses[0], history.final_loss)
    return denoiser, history


def denoiser_loss(denoiser: Denoiser, schedule: NoiseSchedule, images, labels, seed: int) -> float:
    """Seeded noise-prediction loss on a fixed set of images (validation metric)."""
    rng = np.random.default_rng(seed)
    images = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    x_t, t, labels, eps = _denoiser_batch(denoiser, schedule, images, np.asarray(labels), rng, 0.0)
    pred = denoiser.predict(x_t, t, labels)
    return float(np.mean((pred - eps) ** 2))


def ddim_sample(
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    labels: Sequence[int],
    guidance: Union[float, Callable[[int], float]],
    x_T: np.ndarray,
) -> np.ndarray:
    """Batched guided DDIM sampling with a fixed or step-indexed guidance scale; returns (B, D)."""
    labels = np.asarray(labels, dtype=int)
    x = np.asarray(x_T, dtype=np.float64).reshape(len(labels), -1)
    nulls = np.full_like(labels, denoiser.null_label)
    steps = schedule.timesteps
    for k in range(schedule.t_sample):
        t, t_prev = int(steps[k]), int(steps[k + 1])
        g = guidance(k) if callable(guidance) else guidance
        out = denoiser.predict(np.concatenate([x, x]), t, np.concatenate([nulls, labels]))
        eps_hat = cfg_combine(out[:len(labels)], out[len(labels):], g)
        x = ddim_step(schedule, x, eps_hat, t, t_prev)
    return x


# ---------------------------------------------------------------------------
# Proxy classifier
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


class ProxyClassifier:
    """Small dense classifier used for rewards, accuracy and perceptual features."""

    def __init__(self, net: DenseNet):
        if net.output_dim != N_CLASSES:
            raise ValueError(f"classifier must output {N_CLASSES} logits, got {net.output_dim}")
        self.net = net

    @classmethod
    def create(cls, config: ClassifierConfig, rng: np.random.Generator, image_size: int = IMAGE_SIZE):
        return cls(DenseNet.create([image_size * image_size, config.hidden, N_CLASSES], rng))

    def parameters(self) -> Dict[str, np.ndarray]:
        return {f"net.{k}": v for k, v in self.net.parameters().items()}

    def set_parameters(self, params: Dict[str, np.ndarray]):
        self.net.set_parameters({k[len("net."):]: v for k, v in params.items()})

    def param_count(self) -> int:
        return self.net.param_count()

    def _flat(self, images) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.size % self.net.input_dim:
            raise ValueError(f"image of shape {images.shape} does not have {self.net.input_dim} pixels")
        return images.reshape(-1, self.net.input_dim)

    def probabilities(self, images) -> np.ndarray:
        flat = self._flat(images)
        logits, _ = diffcore.forward(self.net, flat)
        probs = softmax(logits)
        single = np.asarray(images).size == self.net.input_dim
        return probs[0] if single else probs

    def hidden_activations(self, image) -> List[np.ndarray]:
        """Activations of every hidden layer for a single image."""
        _, tape = diffcore.forward(self.net, self._flat(image))
        return [out[0] for out in tape.outputs[:-1]]


def classify(clf: ProxyClassifier, image) -> np.ndarray:
    """Class probabilities of one image (or a batch)."""
    return clf.probabilities(image)


def classifier_accuracy(clf: ProxyClassifier, images, labels) -> float:
    probs = clf.probabilities(np.asarray(images).reshape(len(labels), -1))
    return float(np.mean(np.argmax(probs, axis=-1) == np.asarray(labels)))


def train_classifier(
    dataset: ShapeDataset,
    config: ClassifierConfig,
    rng: np.random.Generator,
    progress: bool = True,
) -> Tuple[ProxyClassifier, TrainingHistory, float]:
    """Cross-entropy training on clean images; returns the frozen classifier, losses and test accuracy."""
    images = dataset.train_images.reshape(len(dataset.train_images), -1)
    labels = dataset.train_labels
    if len(images) == 0:
        raise ValueError("cannot train the classifier on an empty dataset")

    clf = ProxyClassifier.create(config, rng, dataset.image_size)
    adam = AdamState.for_params(clf.parameters(), config.lr)
    history = TrainingHistory()
    onehot = np.eye(N_CLASSES)

    for epoch in tqdm(range(config.epochs), desc="classifier", disable=not progress):
        order = rng.permutation(len(images))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            logits, tape = diffcore.forward(clf.net, images[idx])
            probs = softmax(logits)
            loss = float(-np.mean(np.log(probs[np.arange(len(idx)), labels[idx]] + 1e-300)))
            if not math.isfinite(loss):
                raise FloatingPointError(f"classifier training diverged at epoch {epoch}, batch starting {start}")
            grads, _ = diffcore.backward(clf.net, tape, (probs - onehot[labels[idx]]) / len(idx))
            params, adam = diffcore.adam_step(clf.parameters(), {f"net.{k}": v for k, v in grads.items()}, adam)
            clf.set_parameters(params)
            total += loss * len(idx)
        history.losses.append(total / len(images))

    test_accuracy = float("nan")
    if len(dataset.test_images):
        test_accuracy = classifier_accuracy(clf, dataset.test_images, dataset.test_labels)
    logger.info("Classifier trained: loss %.4f, test accuracy %.3f", history.final_loss, test_accuracy)
    return clf, history, test_accuracy


# ---------------------------------------------------------------------------
# RL state
# ---------------------------------------------------------------------------

def build_state(t, t_sample: int, z, eps_hat, a_prev: float, p_proxy: float) -> np.ndarray:
    """[t/T, ||z||/sqrt(D), ||eps||/sqrt(D), <z, eps>/D, a_prev, p_proxy]."""
    z = np.asarray(z, dtype=np.float64).ravel()
    eps_hat = np.asarray(eps_hat, dtype=np.float64).ravel()
    d = z.size
    return np.array([
        t / t_sample,
        np.linalg.norm(z) / math.sqrt(d),
        np.linalg.norm(eps_hat) / math.sqrt(d),
        float(z @ eps_hat) / d,
        a_prev,
        p_proxy,
    ])
