"""Training harness: loss, optimizer, schedule, metric, and synthetic scenes.

Scenes are generated rather than loaded: labeled surfaces meeting at edges,
with class-colored features and label noise concentrated in a band around
each edge, so that neighborhoods straddling a boundary carry genuinely
mixed evidence. Everything is deterministic from the seeds involved.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud
from .network import NetConfig, UNetParams, UnetPlan, build_plan, unet_forward
from .tensor import Tensor, backward, log_softmax, take_per_row

Array = np.ndarray

GEOMETRIES = ("two_planes_corner", "plane_plus_sphere", "boundary_noise")

# half-width of the label-noise band around each class edge, in scene units
EDGE_BAND = 0.05

_PALETTE = np.array([
    [1.0, 0.1, 0.1],
    [0.1, 1.0, 0.1],
    [0.1, 0.1, 1.0],
    [1.0, 1.0, 0.1],
    [1.0, 0.1, 1.0],
    [0.1, 1.0, 1.0],
])


class TrainingDiverged(RuntimeError):
    """Loss left the finite range; carries epoch, lr, and gradient norms."""


@dataclass
class OptimState:
    """Adam state: first/second moments per parameter plus the step count."""

    lr: float
    m: list[Array]
    v: list[Array]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0001
    eps: float = 1e-8

    @staticmethod
    def init(params: list[Tensor], lr: float, weight_decay: float = 0.0001) -> "OptimState":
        return OptimState(lr=lr,
                          m=[np.zeros_like(p.data) for p in params],
                          v=[np.zeros_like(p.data) for p in params],
                          weight_decay=weight_decay)


def adam_step(params: list[Tensor], state: OptimState) -> None:
    """One bias-corrected Adam update with decoupled weight decay.

    Decay shrinks parameters before the adaptive step; parameters whose
    gradient is absent are still decayed.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for i, p in enumerate(params):
        if state.weight_decay:
            p.data = p.data - state.lr * state.weight_decay * p.data
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class TrainConfig:
    """Optimization schedule: the published recipe, desk-scale defaults."""

    epochs: int
    initial_lr: float = 0.001
    decay_factor: float = 0.5
    decay_every_epochs: int = 80
    seed: int = 0
    class_weights: Array | None = None
    weight_decay: float = 0.0001
    eval_every: int = 1


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Piecewise-constant schedule: halved (by default) at epoch multiples."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    return cfg.initial_lr * cfg.decay_factor ** (epoch // cfg.decay_every_epochs)


def weighted_cross_entropy(logits: Tensor, labels: Array, weights: Array) -> Tensor:
    """Class-weighted negative log-likelihood, normalized by the weight mass."""
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=np.float64)
    if (weights <= 0).any():
        raise ValueError("class weights must be positive")
    picked = take_per_row(log_softmax(logits), labels)
    w = weights[labels]
    return (picked * Tensor(-w / w.sum())).sum()


def miou(pred_labels: Array, true_labels: Array, num_classes: int) -> tuple[Array, float]:
    """Per-class intersection over union and its mean.

    Classes absent from both prediction and truth carry nan and are excluded
    from the mean.
    """
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    per_class = np.full(num_classes, np.nan)
    for c in range(num_classes):
        tp = int(((pred == c) & (true == c)).sum())
        fp = int(((pred == c) & (true != c)).sum())
        fn = int(((pred != c) & (true == c)).sum())
        if tp + fp + fn > 0:
            per_class[c] = tp / (tp + fp + fn)
    mean = float(np.nanmean(per_class)) if np.isfinite(per_class).any() else float("nan")
    return per_class, mean


def class_weights_from(clouds: list[PointCloud], num_classes: int) -> Array:
    """Inverse-log-frequency weights, normalized to mean one."""
    counts = np.zeros(num_classes)
    for cloud in clouds:
        counts += np.bincount(cloud.labels, minlength=num_classes)
    freq = counts / max(counts.sum(), 1.0)
    w = 1.0 / np.log(1.02 + freq)
    return w / w.mean()


# -- synthetic scenes -----------------------------------------------------------

@dataclass
class SynthSceneSpec:
    """Recipe for one synthetic labeled scene."""

    num_points: int
    num_classes: int
    geometry: str = "boundary_noise"
    noise_sigma: float = 0.3
    boundary_label_flip_rate: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.geometry not in GEOMETRIES:
            raise ValueError(f"unknown geometry {self.geometry!r}")
        if self.num_classes < 2 or self.num_classes > len(_PALETTE):
            raise ValueError(f"num_classes must be in [2, {len(_PALETTE)}]")
        if self.geometry != "boundary_noise" and self.num_classes != 2:
            raise ValueError(f"{self.geometry} is a two-class geometry")


def _quantize(a: Array) -> Array:
    """Round to float32 so on-disk round-trips are exact, compute in float64."""
    return a.astype(np.float32).astype(np.float64)


def _boundary_noise_positions(spec: SynthSceneSpec, rng: np.random.Generator):
    """Class strips along x, folded into a zigzag so edges are real 3-d folds."""
    c = spec.num_classes
    xy = rng.uniform(0.0, 1.0, (spec.num_points, 2))
    u = xy[:, 0] * c
    tri = np.abs(np.mod(u, 2.0) - 1.0)          # triangle wave, period 2
    z = 0.15 * (1.0 - tri) + rng.normal(0.0, 0.005, spec.num_points)
    positions = _quantize(np.column_stack([xy[:, 0], xy[:, 1], z]))
    labels = np.minimum((positions[:, 0] * c).astype(np.int64), c - 1)
    return positions, labels


def _two_planes_positions(spec: SynthSceneSpec, rng: np.random.Generator):
    n = spec.num_points
    n_floor = n // 2
    floor = np.column_stack([rng.uniform(0, 1, n_floor), rng.uniform(0, 1, n_floor),
                             rng.normal(0.0, 0.005, n_floor)])
    n_wall = n - n_floor
    wall = np.column_stack([rng.normal(0.0, 0.005, n_wall), rng.uniform(0, 1, n_wall),
                            rng.uniform(0, 1, n_wall)])
    positions = np.concatenate([floor, wall])
    labels = np.concatenate([np.zeros(n_floor, np.int64), np.ones(n_wall, np.int64)])
    return positions, labels


def _plane_sphere_positions(spec: SynthSceneSpec, rng: np.random.Generator):
    n = spec.num_points
    n_plane = (6 * n) // 10
    plane = np.column_stack([rng.uniform(0, 1, n_plane), rng.uniform(0, 1, n_plane),
                             rng.normal(0.0, 0.005, n_plane)])
    n_sph = n - n_plane
    d = rng.normal(size=(n_sph, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    sphere = np.array([0.5, 0.5, 0.25]) + 0.25 * d
    sphere += rng.normal(0.0, 0.005, (n_sph, 3))
    positions = np.concatenate([plane, sphere])
    labels = np.concatenate([np.zeros(n_plane, np.int64), np.ones(n_sph, np.int64)])
    return positions, labels


def edge_band_mask(spec: SynthSceneSpec, positions: Array) -> Array:
    """True for points inside the label-noise band around the class edges."""
    p = np.asarray(positions)
    if spec.geometry == "boundary_noise":
        bounds = np.arange(1, spec.num_classes) / spec.num_classes
        return (np.abs(p[:, 0:1] - bounds[None, :]) < EDGE_BAND).any(axis=1)
    if spec.geometry == "two_planes_corner":
        return np.sqrt(p[:, 0] ** 2 + p[:, 2] ** 2) < 2 * EDGE_BAND
    return np.linalg.norm(p - np.array([0.5, 0.5, 0.0]), axis=1) < 3 * EDGE_BAND


def _flip_labels(labels: Array, band: Array, spec: SynthSceneSpec,
                 rng: np.random.Generator) -> Array:
    """Flip banded labels to a neighboring class at the configured rate."""
    u = rng.uniform(0.0, 1.0, labels.shape[0])
    flip = band & (u < spec.boundary_label_flip_rate)
    out = labels.copy()
    if spec.num_classes == 2:
        out[flip] = 1 - out[flip]
    else:
        step = np.where(out[flip] == 0, 1,
                        np.where(out[flip] == spec.num_classes - 1, -1,
                                 np.where(u[flip] < spec.boundary_label_flip_rate / 2, -1, 1)))
        out[flip] = out[flip] + step
    return out


def generate_scene(spec: SynthSceneSpec) -> PointCloud:
    """Deterministic labeled scene; values are quantized to float32 so that
    on-disk round-trips are exact."""
    rng = np.random.default_rng(spec.seed)
    if spec.geometry == "boundary_noise":
        positions, labels = _boundary_noise_positions(spec, rng)
    elif spec.geometry == "two_planes_corner":
        positions, labels = _two_planes_positions(spec, rng)
    else:
        positions, labels = _plane_sphere_positions(spec, rng)
    positions = _quantize(positions)
    features = _quantize(_PALETTE[labels] + rng.normal(0.0, spec.noise_sigma,
                                                       (spec.num_points, 3)))
    band = edge_band_mask(spec, positions)
    labels = _flip_labels(labels, band, spec, rng)
    return PointCloud(positions, features, labels)


# -- training and evaluation loops ----------------------------------------------

@dataclass
class SegModel:
    """A network configuration together with its parameters."""

    config: NetConfig
    params: UNetParams

    @staticmethod
    def create(config: NetConfig, seed: int = 0) -> "SegModel":
        return SegModel(config, UNetParams.create(config, np.random.default_rng(seed)))

    def forward(self, cloud: PointCloud, plan: UnetPlan | None = None, *,
                training: bool = False, capture=None) -> Tensor:
        return unet_forward(cloud, self.config, self.params, plan,
                            training=training, capture=capture)

    def predict_labels(self, cloud: PointCloud, plan: UnetPlan | None = None) -> Array:
        return np.argmax(self.forward(cloud, plan).data, axis=1)


@dataclass
class TrainReport:
    """Per-epoch log: loss, learning rate, and latest evaluation mIoU."""

    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    def final_miou(self) -> float:
        return self.rows[-1][3] if self.rows else float("nan")

    def to_text(self) -> str:
        lines = ["epoch,loss,lr,miou"]
        for epoch, loss, lr, mi in self.rows:
            lines.append(f"{epoch},{loss!r},{lr!r},{mi!r}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "TrainReport":
        rows = []
        for line in text.strip().splitlines()[1:]:
            e, lo, lr, mi = line.split(",")
            rows.append((int(e), float(lo), float(lr), float(mi)))
        return TrainReport(rows)


def evaluate(model: SegModel, clouds: list[PointCloud],
             plans: list[UnetPlan] | None = None) -> tuple[Array, float]:
    """Aggregate IoU over a dataset: one confusion pool across all clouds."""
    num_classes = model.config.num_classes
    tp = np.zeros(num_classes)
    fp = np.zeros(num_classes)
    fn = np.zeros(num_classes)
    for i, cloud in enumerate(clouds):
        pred = model.predict_labels(cloud, plans[i] if plans else None)
        for c in range(num_classes):
            tp[c] += ((pred == c) & (cloud.labels == c)).sum()
            fp[c] += ((pred == c) & (cloud.labels != c)).sum()
            fn[c] += ((pred != c) & (cloud.labels == c)).sum()
    denom = tp + fp + fn
    per_class = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
    mean = float(np.nanmean(per_class)) if np.isfinite(per_class).any() else float("nan")
    return per_class, mean


def train(model: SegModel, train_clouds: list[PointCloud], cfg: TrainConfig,
          val_clouds: list[PointCloud] | None = None, *,
          plans: list[UnetPlan] | None = None,
          val_plans: list[UnetPlan] | None = None) -> TrainReport:
    """Full-cloud Adam training with the step schedule; deterministic per seed.

    Neighborhood plans depend only on geometry and may be passed in to be
    shared across runs on the same dataset.
    """
    if plans is None:
        plans = [build_plan(c, model.config) for c in train_clouds]
    if val_clouds is None:
        val_clouds, val_plans = train_clouds, plans
    elif val_plans is None:
        val_plans = [build_plan(c, model.config) for c in val_clouds]
    weights = cfg.class_weights
    if weights is None:
        weights = class_weights_from(train_clouds, model.config.num_classes)
    trainable = model.params.trainable()
    state = OptimState.init(trainable, cfg.initial_lr, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport()
    last_miou = float("nan")
    for epoch in range(cfg.epochs):
        state.lr = lr_at(epoch, cfg)
        losses = []
        for idx in rng.permutation(len(train_clouds)):
            cloud, plan = train_clouds[idx], plans[idx]
            model.params.zero_grad()
            logits = model.forward(cloud, plan, training=True)
            loss = weighted_cross_entropy(logits, cloud.labels, weights)
            value = float(loss.data)
            if not np.isfinite(value):
                backward(loss)
                norms = [float(np.abs(t.grad).max()) for t in trainable
                         if t.grad is not None]
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch} (lr {state.lr}, "
                    f"max grad {max(norms) if norms else float('nan')})")
            backward(loss)
            adam_step(trainable, state)
            losses.append(value)
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            _, last_miou = evaluate(model, val_clouds, val_plans)
        report.rows.append((epoch, float(np.mean(losses)), state.lr, last_miou))
    return report
