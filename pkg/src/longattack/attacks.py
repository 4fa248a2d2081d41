"""Adversarial attacks against the Source model, for transfer to the Target.

All L-inf attacks share one ascent loop: compute the input gradient of the
chosen objective, step along its sign, and project back onto the epsilon-ball
intersected with the valid image range [-1, 1]. Objectives are plain
cross-entropy, a signed feature-space distance to the Prior exam, or their
weighted sum; the knowledge-guided attack additionally selects among the
boundary-crossing iterates of the trajectory. The Prior exam itself is never
perturbed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .optim import Optimizer
from .tensor import Tensor

__all__ = [
    "ATTACK_NAMES",
    "DISPLAY_NAMES",
    "NEEDS_PRIOR",
    "AdversarialExample",
    "AttackConfig",
    "AttackTrajectory",
    "CWConfig",
    "TrajectoryPoint",
    "cw_l2",
    "distance_guided_attack",
    "distance_loss",
    "distance_reg_attack",
    "feature_distance",
    "fgsm",
    "ifgsm",
    "knowledge_guided_attack",
    "mifgsm",
    "pgd",
    "run_attack",
    "select_adversarial_candidate",
]


@dataclass
class CWConfig:
    """Hyperparameters for the L2 optimization attack.

    ``tradeoff`` is used as a fixed loss weight when ``search_steps`` is 0;
    otherwise the weight is found by geometric bisection in [c_lo, c_hi].
    """

    confidence: float = 0.0
    tradeoff: float = 1.0
    steps: int = 100
    learning_rate: float = 0.1
    c_lo: float = 1e-2
    c_hi: float = 1e2
    search_steps: int = 5

    def to_json(self):
        return {
            "confidence": self.confidence,
            "tradeoff": self.tradeoff,
            "steps": self.steps,
            "learning_rate": self.learning_rate,
            "c_lo": self.c_lo,
            "c_hi": self.c_hi,
            "search_steps": self.search_steps,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CWConfig":
        allowed = set(cls().to_json())
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"cw config: unknown key(s) {sorted(unknown)}")
        return cls(**d)


@dataclass
class AttackConfig:
    """Shared attack hyperparameters.

    ``epsilon`` is the L-inf budget in normalized pixel units ([-1, 1] range),
    ``iterations`` the step count for iterative attacks, ``step_size`` the
    per-iteration step (defaults to max(epsilon/iterations, epsilon/10)),
    ``momentum`` the decay of the accumulated gradient, ``lam`` the distance
    regularization weight.
    """

    epsilon: float = 0.01
    iterations: int = 15
    step_size: float | None = None
    momentum: float = 1.0
    lam: float = 0.05
    norm: str = "inf"
    seed: int = 0
    cw: CWConfig = field(default_factory=CWConfig)

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 2.0:
            raise ValueError(f"epsilon must lie in [0, 2], got {self.epsilon}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.momentum < 0:
            raise ValueError(f"momentum must be >= 0, got {self.momentum}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.norm not in ("inf", "2"):
            raise ValueError(f"norm must be 'inf' or '2', got {self.norm!r}")
        if self.step_size is not None and self.step_size * self.iterations < self.epsilon:
            raise ValueError(
                f"step_size * iterations = {self.step_size * self.iterations} "
                f"cannot reach epsilon = {self.epsilon}"
            )

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return max(self.epsilon / self.iterations, self.epsilon / 10.0)

    def to_json(self):
        return {
            "epsilon": self.epsilon,
            "iterations": self.iterations,
            "step_size": self.step_size,
            "momentum": self.momentum,
            "lambda": self.lam,
            "seed": self.seed,
            "cw": self.cw.to_json(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        allowed = {"epsilon", "iterations", "step_size", "momentum", "lambda", "seed", "cw"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"attack config: unknown key(s) {sorted(unknown)}")
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        if "cw" in d:
            d["cw"] = CWConfig.from_json(d["cw"])
        return cls(**d)


@dataclass
class TrajectoryPoint:
    """One attack iterate: its image, prediction, objective value, and whether
    the Source model's decision differs from the true label."""

    image: np.ndarray
    predicted: int
    loss: float
    crossed: bool


@dataclass
class AttackTrajectory:
    points: list

    def __len__(self):
        return len(self.points)


@dataclass
class AdversarialExample:
    """An adversarial Current exam plus where it came from.

    ``selected_iterate_index`` is the trajectory index the image was taken
    from; ``feature_distance_to_prior`` is filled only by the Prior-aware
    attacks; ``success`` records whether the Source model is fooled.
    """

    image: np.ndarray
    source_prediction: np.ndarray
    selected_iterate_index: int
    feature_distance_to_prior: float | None
    success: bool


def _project(adv: np.ndarray, clean: np.ndarray, eps: float) -> np.ndarray:
    """Project onto the L-inf eps-ball around ``clean``, then into [-1, 1]."""
    delta = np.clip(adv - clean, -eps, eps)
    return np.clip(clean + delta, -1.0, 1.0)


def _eval_grad(objective, img: np.ndarray):
    """Objective value, class probabilities, and input gradient at ``img``."""
    x = Tensor(img, requires_grad=True)
    loss, logits = objective(x)
    grads = T.backward(loss)
    probs = T.softmax(Tensor(logits.data), axis=-1).data
    return loss.item(), probs, grads.get(x, np.zeros_like(img))


def _eval(objective, img: np.ndarray):
    loss, logits = objective(Tensor(img))
    probs = T.softmax(Tensor(logits.data), axis=-1).data
    return loss.item(), probs


def _ce_objective(model, label: int):
    def fn(x):
        logits = model.logits(x)
        return T.cross_entropy(logits, label), logits

    return fn


def _signed_distance(feats: Tensor, prior_feats: np.ndarray, label: int) -> Tensor:
    diff = feats - Tensor(prior_feats)
    dist = T.sqrt(T.sum_(diff * diff))
    return dist * (-1.0 if label == 1 else 1.0)


def _distance_objective(model, prior: np.ndarray, label: int):
    prior_feats = model.features(Tensor(prior)).data

    def fn(x):
        feats, logits = model.features_and_logits(x)
        return _signed_distance(feats, prior_feats, label), logits

    return fn


def _regularized_objective(model, prior: np.ndarray, label: int, lam: float):
    prior_feats = model.features(Tensor(prior)).data

    def fn(x):
        feats, logits = model.features_and_logits(x)
        ce = T.cross_entropy(logits, label)
        return ce + _signed_distance(feats, prior_feats, label) * lam, logits

    return fn


def _ascend(objective, clean, label, eps, alpha, steps, start=None, momentum=None):
    """Common sign-gradient ascent loop.

    Returns the TrajectoryPoints visited (steps + 1 entries, the first being
    ``start`` or the clean input) plus the per-iterate class probabilities.
    ``momentum`` of None means the raw gradient sign; a float enables
    L1-normalized gradient accumulation.
    """
    cur = np.array(clean if start is None else start, dtype=np.float64)
    points, probs_hist = [], []
    g_acc = np.zeros_like(cur)
    for _ in range(steps):
        loss, probs, g = _eval_grad(objective, cur)
        pred = int(probs.argmax())
        points.append(TrajectoryPoint(cur.copy(), pred, loss, pred != label))
        probs_hist.append(probs)
        if momentum is None:
            direction = np.sign(g)
        else:
            l1 = np.abs(g).sum()
            g_acc = momentum * g_acc + (g / l1 if l1 > 0 else np.zeros_like(g))
            direction = np.sign(g_acc)
        cur = _project(cur + alpha * direction, clean, eps)
    loss, probs = _eval(objective, cur)
    pred = int(probs.argmax())
    points.append(TrajectoryPoint(cur.copy(), pred, loss, pred != label))
    probs_hist.append(probs)
    return points, probs_hist


def _example_from(points, probs_hist, idx, distance=None) -> AdversarialExample:
    p = points[idx]
    return AdversarialExample(
        image=p.image.copy(),
        source_prediction=probs_hist[idx].copy(),
        selected_iterate_index=idx,
        feature_distance_to_prior=distance,
        success=bool(p.crossed),
    )


def fgsm(model, x, label: int, epsilon: float) -> AdversarialExample:
    """Single-step sign-gradient attack: x + eps * sign(d CE / dx), clipped."""
    points, probs = _ascend(_ce_objective(model, label), np.asarray(x, float),
                            label, epsilon, epsilon, 1)
    return _example_from(points, probs, 1)


def ifgsm(model, x, label: int, cfg: AttackConfig, objective=None):
    """Iterative sign-gradient attack.

    Returns the adversarial example and the full trajectory (clean input
    first, every iterate recorded with its prediction and loss).
    """
    objective = objective or _ce_objective(model, label)
    points, probs = _ascend(objective, np.asarray(x, float), label,
                            cfg.epsilon, cfg.alpha, cfg.iterations)
    return _example_from(points, probs, len(points) - 1), AttackTrajectory(points)


def mifgsm(model, x, label: int, cfg: AttackConfig) -> AdversarialExample:
    """Iterative attack with L1-normalized gradient accumulation."""
    points, probs = _ascend(_ce_objective(model, label), np.asarray(x, float), label,
                            cfg.epsilon, cfg.alpha, cfg.iterations, momentum=cfg.momentum)
    return _example_from(points, probs, len(points) - 1)


def pgd(model, x, label: int, cfg: AttackConfig, rng_seed: int,
        start_radius: float | None = None) -> AdversarialExample:
    """I-FGSM preceded by a uniform random start inside the eps-ball."""
    clean = np.asarray(x, float)
    radius = cfg.epsilon if start_radius is None else start_radius
    rng = np.random.default_rng([int(rng_seed), 7919])
    start = _project(clean + rng.uniform(-radius, radius, clean.shape), clean, cfg.epsilon)
    points, probs = _ascend(_ce_objective(model, label), clean, label,
                            cfg.epsilon, cfg.alpha, cfg.iterations, start=start)
    return _example_from(points, probs, len(points) - 1)


def feature_distance(a, b) -> float:
    """Euclidean distance between two feature vectors."""
    da = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64).reshape(-1)
    db = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64).reshape(-1)
    if da.shape != db.shape:
        raise T.ShapeError(f"feature_distance: dimensions {da.shape} vs {db.shape}")
    return float(np.linalg.norm(da - db))


def distance_loss(feature_fn, x_adv, x_prior, label: int) -> Tensor:
    """Signed feature distance between an image and the Prior exam.

    Negative distance for cancer cases (maximizing pulls the adversarial
    Current toward the Prior), positive for controls (maximizing pushes it
    away).
    """
    xt = x_adv if isinstance(x_adv, Tensor) else Tensor(x_adv)
    prior_feats = feature_fn(Tensor(np.asarray(x_prior, float)))
    prior_arr = prior_feats.data if isinstance(prior_feats, Tensor) else np.asarray(prior_feats)
    return _signed_distance(feature_fn(xt), prior_arr, label)


def distance_guided_attack(variant: str, model, x, x_prior, label: int,
                           cfg: AttackConfig) -> AdversarialExample:
    """FGSM or I-FGSM driven purely by the signed distance objective."""
    objective = _distance_objective(model, np.asarray(x_prior, float), label)
    return _prior_attack(variant, objective, model, x, x_prior, label, cfg)


def distance_reg_attack(variant: str, model, x, x_prior, label: int,
                        cfg: AttackConfig) -> AdversarialExample:
    """FGSM or I-FGSM maximizing cross-entropy plus lambda * distance loss."""
    objective = _regularized_objective(model, np.asarray(x_prior, float), label, cfg.lam)
    return _prior_attack(variant, objective, model, x, x_prior, label, cfg)


def _prior_attack(variant, objective, model, x, x_prior, label, cfg):
    if variant not in ("fgsm", "ifgsm"):
        raise ValueError(f"unknown attack variant {variant!r}")
    clean = np.asarray(x, float)
    if variant == "fgsm":
        points, probs = _ascend(objective, clean, label, cfg.epsilon, cfg.epsilon, 1)
    else:
        points, probs = _ascend(objective, clean, label, cfg.epsilon, cfg.alpha, cfg.iterations)
    idx = len(points) - 1
    dist = feature_distance(model.features(Tensor(points[idx].image)),
                            model.features(Tensor(np.asarray(x_prior, float))))
    return _example_from(points, probs, idx, distance=dist)


def select_adversarial_candidate(candidates: AttackTrajectory, prior_feature,
                                 feature_fn, label: int) -> int:
    """Pick the boundary-crossing iterate closest to (cancer) or farthest
    from (control) the Prior exam in feature space.

    Ties break toward the lowest iterate index; if nothing crossed the
    boundary the final iterate's index is returned.
    """
    points = candidates.points
    if not points:
        raise ValueError("empty trajectory")
    prior_arr = np.asarray(prior_feature.data if isinstance(prior_feature, Tensor)
                           else prior_feature, dtype=np.float64)
    best_idx, best_dist = None, None
    for i, p in enumerate(points):
        if not p.crossed:
            continue
        d = feature_distance(feature_fn(p.image), prior_arr)
        if best_idx is None or (d < best_dist if label == 1 else d > best_dist):
            best_idx, best_dist = i, d
    if best_idx is None:
        return len(points) - 1
    return best_idx


def knowledge_guided_attack(model, x_current, x_prior, label: int,
                            cfg: AttackConfig) -> AdversarialExample:
    """I-FGSM plus selection of the iterate whose Source features best exploit
    the Prior/Current relationship; the Prior exam is left untouched."""
    clean = np.asarray(x_current, float)
    prior = np.asarray(x_prior, float)
    objective = _ce_objective(model, label)
    points, probs = _ascend(objective, clean, label, cfg.epsilon, cfg.alpha, cfg.iterations)
    traj = AttackTrajectory(points)
    prior_feats = model.features(Tensor(prior)).data

    def feat(img):
        return model.features(Tensor(img)).data

    idx = select_adversarial_candidate(traj, prior_feats, feat, label)
    image = _project(points[idx].image, clean, cfg.epsilon)
    example = AdversarialExample(
        image=image,
        source_prediction=probs[idx].copy(),
        selected_iterate_index=idx,
        feature_distance_to_prior=feature_distance(feat(image), prior_feats),
        success=any(p.crossed for p in points),
    )
    return example


def cw_l2(model, x, label: int, cfg: AttackConfig) -> AdversarialExample:
    """L2 optimization attack in tanh space.

    Minimizes ||delta||_2^2 + c * hinge(margin + kappa) with Adam; the
    tradeoff c is bisected geometrically when search is enabled. Returns the
    successful iterate with the smallest L2 norm, or the final iterate
    flagged unsuccessful.
    """
    clean = np.asarray(x, float)
    cw = cfg.cw
    box = 1.0 - 1e-12
    w0 = np.arctanh(np.clip(clean, -box, box))
    select = np.zeros(2)
    select[label] = 1.0
    select[1 - label] = -1.0  # margin = z_t - z_other

    def objective(wt, c):
        xt = T.tanh(wt)
        delta = xt - Tensor(clean)
        l2sq = T.sum_(delta * delta)
        logits = model.logits(xt)
        margin = T.sum_(logits * Tensor(select))
        return l2sq + T.relu(margin + cw.confidence) * c, xt, logits

    best = None  # (l2, image, probs, step_index)
    last = None
    lo, hi = cw.c_lo, cw.c_hi
    rounds = max(cw.search_steps, 1)
    for r in range(rounds):
        c = float(np.sqrt(lo * hi)) if cw.search_steps > 0 else cw.tradeoff
        wt = Tensor(w0.copy(), requires_grad=True)
        opt = Optimizer("adam", learning_rate=cw.learning_rate)
        succeeded = False
        for step in range(cw.steps + 1):
            loss, xt, logits = objective(wt, c)
            probs = T.softmax(Tensor(logits.data), axis=-1).data
            image = xt.data.copy()
            ok = int(probs.argmax()) != label
            if ok:
                l2 = float(np.linalg.norm(image - clean))
                if best is None or l2 < best[0]:
                    best = (l2, image, probs, step)
                succeeded = True
            last = (image, probs, step)
            if step == cw.steps:
                break
            grads = T.backward(loss)
            opt.step([wt], [grads[wt]])
        if cw.search_steps == 0:
            break
        if succeeded:
            hi = c
        else:
            lo = c

    if best is not None:
        _, image, probs, step = best
        return AdversarialExample(image, probs, step, None, True)
    image, probs, step = last
    return AdversarialExample(image, probs, step, None, False)


ATTACK_NAMES = (
    "fgsm",
    "distance_guided_fgsm",
    "distance_reg_fgsm",
    "ifgsm",
    "distance_guided_ifgsm",
    "distance_reg_ifgsm",
    "mifgsm",
    "pgd",
    "cw",
    "knowledge_guided",
)

DISPLAY_NAMES = {
    "none": "No Adversarial Attack",
    "fgsm": "FGSM",
    "distance_guided_fgsm": "Distance-guided FGSM",
    "distance_reg_fgsm": "Distance Reg. FGSM",
    "ifgsm": "I-FGSM",
    "distance_guided_ifgsm": "Distance-guided I-FGSM",
    "distance_reg_ifgsm": "Distance Reg. I-FGSM",
    "mifgsm": "MI-FGSM",
    "pgd": "PGD",
    "cw": "C&W",
    "knowledge_guided": "Knowledge-guided",
}

NEEDS_PRIOR = frozenset({
    "distance_guided_fgsm",
    "distance_reg_fgsm",
    "distance_guided_ifgsm",
    "distance_reg_ifgsm",
    "knowledge_guided",
})


def run_attack(name: str, model, current, label: int, cfg: AttackConfig,
               prior=None, rng_seed: int | None = None) -> AdversarialExample:
    """Dispatch an attack by registry name."""
    if name not in ATTACK_NAMES:
        raise ValueError(f"unknown attack {name!r}; choose from {ATTACK_NAMES}")
    if name in NEEDS_PRIOR and prior is None:
        raise ValueError(f"attack {name!r} needs the Prior exam")
    seed = cfg.seed if rng_seed is None else rng_seed
    if name == "fgsm":
        return fgsm(model, current, label, cfg.epsilon)
    if name == "ifgsm":
        return ifgsm(model, current, label, cfg)[0]
    if name == "mifgsm":
        return mifgsm(model, current, label, cfg)
    if name == "pgd":
        return pgd(model, current, label, cfg, rng_seed=seed)
    if name == "cw":
        return cw_l2(model, current, label, cfg)
    if name == "knowledge_guided":
        return knowledge_guided_attack(model, current, prior, label, cfg)
    variant = "fgsm" if name.endswith("_fgsm") else "ifgsm"
    if name.startswith("distance_guided"):
        return distance_guided_attack(variant, model, current, prior, label, cfg)
    return distance_reg_attack(variant, model, current, prior, label, cfg)
