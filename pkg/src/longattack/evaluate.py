"""Training and the cross-validated transfer-attack protocol.

Per fold: fit a Source and a Target model on the training split, craft
adversarial Current exams against the Source model on the test split, then
score (a) the Source model on the adversarial Currents and (b) the Target
model on (clean Prior, adversarial Current). Optionally an adversarially
trained Target is evaluated on the same examples. Results aggregate to
mean +/- std across folds.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attacks import run_attack
from .data import split_folds
from .models import (
    BackboneConfig,
    init_source,
    init_target,
    set_trainable,
)
from .optim import Optimizer
from .tensor import Tensor

__all__ = [
    "AdvTrainConfig",
    "EvalReport",
    "FoldResult",
    "SweepResult",
    "TrainConfig",
    "TrainingDiverged",
    "adversarial_train",
    "cohort_distance_stats",
    "compute_auc",
    "derive_seed",
    "run_sweep",
    "run_transfer_experiment",
    "train_model",
]


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


@dataclass
class AdvTrainConfig:
    """Adversarial-training settings: I-FGSM examples are regenerated against
    the current model state each batch and mixed 50/50 with clean data."""

    attack: str = "ifgsm"
    epsilon: float = 0.01
    batch_size: int = 32
    iterations: int = 5

    def __post_init__(self):
        if self.attack != "ifgsm":
            raise ValueError(f"adversarial training supports 'ifgsm', got {self.attack!r}")
        if not 0.0 <= self.epsilon <= 2.0:
            raise ValueError(f"epsilon must lie in [0, 2], got {self.epsilon}")
        if self.batch_size < 1 or self.iterations < 1:
            raise ValueError("batch_size and iterations must be positive")


@dataclass
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 2e-3
    batch_size: int = 32
    augment_flip: bool = True
    augment_rotate: bool = True
    seed: int = 0
    adversarial_training: AdvTrainConfig | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def derive_seed(*parts) -> int:
    """Stable sub-seed from integer parts (purpose-tagged seeding)."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _stack(pairs):
    priors = np.stack([p.prior for p in pairs])
    currents = np.stack([p.current for p in pairs])
    labels = np.array([p.label for p in pairs], dtype=np.int64)
    return priors, currents, labels


def _augment(priors, currents, rng, flip, rotate):
    """Seeded per-sample flips/right-angle rotations, identical for both exams."""
    priors = priors.copy()
    currents = currents.copy()
    n = priors.shape[0]
    square = priors.shape[-1] == priors.shape[-2]
    for i in range(n):
        if flip and rng.uniform() < 0.5:
            priors[i] = priors[i, :, :, ::-1]
            currents[i] = currents[i, :, :, ::-1]
        if rotate:
            k = int(rng.integers(0, 4)) if square else int(rng.choice([0, 2]))
            if k:
                priors[i] = np.rot90(priors[i], k, axes=(-2, -1))
                currents[i] = np.rot90(currents[i], k, axes=(-2, -1))
    return priors, currents


def _batch_logits(model, priors, currents):
    cur = currents if isinstance(currents, Tensor) else Tensor(currents)
    if model.kind == "source":
        return model.logits(cur)
    return model.logits(Tensor(priors), cur)


def _batched_ifgsm(model, priors, currents, labels, adv: AdvTrainConfig):
    """I-FGSM on a whole batch at once (per-sample gradients are independent)."""
    set_trainable(model, False)
    clean = currents
    cur = currents.copy()
    alpha = max(adv.epsilon / adv.iterations, adv.epsilon / 10.0)
    for _ in range(adv.iterations):
        x = Tensor(cur, requires_grad=True)
        loss = T.cross_entropy(_batch_logits(model, priors, x), labels, reduction="sum")
        g = T.backward(loss)[x]
        delta = np.clip(cur + alpha * np.sign(g) - clean, -adv.epsilon, adv.epsilon)
        cur = np.clip(clean + delta, -1.0, 1.0)
    set_trainable(model, True)
    return cur


def _fit(kind, pairs, cfg: TrainConfig, model_cfg: BackboneConfig, adversarial: bool):
    if not pairs:
        raise ValueError("empty training set")
    adv = cfg.adversarial_training
    if adversarial and adv is None:
        raise ValueError("adversarial training requested but not configured")
    model = (init_source if kind == "source" else init_target)(model_cfg, seed=cfg.seed)
    set_trainable(model, True)
    params = [p for _, p in model.parameters()]
    opt = Optimizer("adam", learning_rate=cfg.learning_rate)
    priors0, currents0, labels0 = _stack(pairs)
    batch_size = adv.batch_size if adversarial else cfg.batch_size
    losses = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([int(cfg.seed), 23, epoch])
        order = rng.permutation(len(pairs))
        priors, currents = _augment(priors0[order], currents0[order], rng,
                                    cfg.augment_flip, cfg.augment_rotate)
        labels = labels0[order]
        epoch_losses = []
        for lo in range(0, len(pairs), batch_size):
            bp = priors[lo : lo + batch_size]
            bc = currents[lo : lo + batch_size]
            by = labels[lo : lo + batch_size]
            if adversarial:
                adv_c = _batched_ifgsm(model, bp, bc, by, adv)
                bp = np.concatenate([bp, bp])
                bc = np.concatenate([bc, adv_c])
                by = np.concatenate([by, by])
            loss = T.cross_entropy(_batch_logits(model, bp, bc), by)
            grads = T.backward(loss)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            epoch_losses.append(value)
            opt.step(params, [grads[p] for p in params])
        losses.append(float(np.mean(epoch_losses)))
    set_trainable(model, False)
    model.meta.update({"epochs": cfg.epochs, "final_loss": losses[-1],
                       "adversarial_training": bool(adversarial)})
    return model, losses


def train_model(kind: str, pairs, cfg: TrainConfig, model_cfg: BackboneConfig | None = None):
    """Train a Source or Target classifier; returns (model, per-epoch losses)."""
    if kind not in ("source", "target"):
        raise ValueError(f"kind must be 'source' or 'target', got {kind!r}")
    return _fit(kind, pairs, cfg, model_cfg or BackboneConfig(), adversarial=False)


def adversarial_train(kind: str, pairs, cfg: TrainConfig,
                      model_cfg: BackboneConfig | None = None):
    """Train with each batch augmented by I-FGSM counterparts (50/50 mix)."""
    if kind not in ("source", "target"):
        raise ValueError(f"kind must be 'source' or 'target', got {kind!r}")
    return _fit(kind, pairs, cfg, model_cfg or BackboneConfig(), adversarial=True)


def compute_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 * P(tie)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores {s.shape} and labels {y.shape} must be equal-length 1D")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("compute_auc needs both classes present")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and sorted_s[j] == sorted_s[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j - 1) + 1.0  # average rank, 1-based
        i = j
    rank_sum_pos = ranks[y == 1].sum()
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class FoldResult:
    """One fold's AUCs. ``timing`` is diagnostic only and never serialized."""

    fold: int
    clean: dict
    attacks: dict
    timing: dict = field(default_factory=dict)

    def to_json_dict(self):
        return {"fold": self.fold, "clean": dict(self.clean),
                "attacks": {k: dict(v) for k, v in self.attacks.items()}}


def _mean_std(values):
    vals = np.asarray(values, dtype=np.float64)
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return {"mean": float(np.mean(vals)), "std": std}


def summarize(folds) -> dict:
    """Aggregate fold results to mean +/- std per column."""
    clean = {key: _mean_std([f.clean[key] for f in folds]) for key in folds[0].clean}
    attacks = {}
    for name in folds[0].attacks:
        attacks[name] = {
            metric: _mean_std([f.attacks[name][metric] for f in folds])
            for metric in folds[0].attacks[name]
        }
    return {"clean": clean, "attacks": attacks}


@dataclass
class EvalReport:
    cohort: dict
    config: dict
    folds: list
    summary: dict

    def to_json_dict(self):
        return {
            "cohort": self.cohort,
            "config": self.config,
            "folds": [f.to_json_dict() for f in self.folds],
            "summary": self.summary,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "EvalReport":
        folds = [FoldResult(fold=f["fold"], clean=f["clean"], attacks=f["attacks"])
                 for f in d["folds"]]
        return cls(cohort=d["cohort"], config=d["config"], folds=folds, summary=d["summary"])


def _source_scores(model, currents) -> np.ndarray:
    return model.probs(currents)[:, 1]


def _target_scores(model, priors, currents) -> np.ndarray:
    return model.probs(priors, currents)[:, 1]


def _train_fold_models(train_pairs, train_cfg, model_cfg, seed, fold, defended):
    src, _ = train_model("source", train_pairs,
                         replace(train_cfg, seed=derive_seed(seed, fold, 1)), model_cfg)
    tgt, _ = train_model("target", train_pairs,
                         replace(train_cfg, seed=derive_seed(seed, fold, 2)), model_cfg)
    adv_tgt = None
    if defended:
        adv_tgt, _ = adversarial_train(
            "target", train_pairs,
            replace(train_cfg, seed=derive_seed(seed, fold, 3)), model_cfg)
    return src, tgt, adv_tgt


def _clean_aucs(models, test_pairs):
    src, tgt, adv_tgt = models
    priors, currents, labels = _stack(test_pairs)
    clean = {
        "source": compute_auc(_source_scores(src, currents), labels),
        "target": compute_auc(_target_scores(tgt, priors, currents), labels),
    }
    if adv_tgt is not None:
        clean["target_advtrain"] = compute_auc(_target_scores(adv_tgt, priors, currents), labels)
    return clean


def _evaluate_attacks(models, test_pairs, attack_specs, seed, fold):
    src, tgt, adv_tgt = models
    priors, _, labels = _stack(test_pairs)
    results = {}
    for ai, (name, acfg) in enumerate(attack_specs):
        adv_imgs, src_scores, successes = [], [], []
        for si, pair in enumerate(test_pairs):
            ex = run_attack(name, src, pair.current, pair.label, acfg,
                            prior=pair.prior, rng_seed=derive_seed(seed, fold, 40 + ai, si))
            adv_imgs.append(ex.image)
            src_scores.append(float(ex.source_prediction[1]))
            successes.append(ex.success)
        adv_batch = np.stack(adv_imgs)
        entry = {
            "source_auc": compute_auc(np.array(src_scores), labels),
            "target_auc": compute_auc(_target_scores(tgt, priors, adv_batch), labels),
            "success_rate": float(np.mean(successes)),
        }
        if adv_tgt is not None:
            entry["target_advtrain_auc"] = compute_auc(
                _target_scores(adv_tgt, priors, adv_batch), labels)
        results[name] = entry
    return results


def _fold_job(args):
    (fold, train_pairs, test_pairs, attack_specs, train_cfg, model_cfg,
     seed, defended) = args
    t0 = time.perf_counter()
    models = _train_fold_models(train_pairs, train_cfg, model_cfg, seed, fold, defended)
    t1 = time.perf_counter()
    clean = _clean_aucs(models, test_pairs)
    attacks = _evaluate_attacks(models, test_pairs, attack_specs, seed, fold)
    t2 = time.perf_counter()
    return FoldResult(fold=fold, clean=clean, attacks=attacks,
                      timing={"train_s": t1 - t0, "attacks_s": t2 - t1})


def _worker_count(k: int) -> int:
    try:
        requested = int(os.environ.get("LONGATTACK_THREADS", "1"))
    except ValueError:
        requested = 1
    return max(1, min(requested, k))


def _cohort_summary(cohort) -> dict:
    labels = [p.label for p in cohort]
    shape = list(cohort[0].current.shape)
    return {"patients": len(cohort), "cancer": int(sum(labels)),
            "control": int(len(labels) - sum(labels)), "image_shape": shape}


def run_transfer_experiment(cohort, attack_specs, train_cfg: TrainConfig,
                            model_cfg: BackboneConfig | None = None,
                            k: int = 5, seed: int = 0) -> EvalReport:
    """Patient-wise k-fold transfer-attack evaluation.

    ``attack_specs`` is a list of (attack name, AttackConfig). An
    adversarially trained Target column is included when
    ``train_cfg.adversarial_training`` is set.
    """
    model_cfg = model_cfg or BackboneConfig()
    defended = train_cfg.adversarial_training is not None
    folds = split_folds(cohort, k, seed)
    jobs = [(f, train, test, list(attack_specs), train_cfg, model_cfg, seed, defended)
            for f, (train, test) in enumerate(folds)]
    workers = _worker_count(k)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            fold_results = list(pool.map(_fold_job, jobs))
    else:
        fold_results = [_fold_job(job) for job in jobs]
    config = {
        "folds": k,
        "seed": seed,
        "model": _backbone_dict(model_cfg),
        "train": _train_dict(train_cfg),
        "attacks": [{"attack": name, **acfg.to_json()} for name, acfg in attack_specs],
    }
    return EvalReport(cohort=_cohort_summary(cohort), config=config,
                      folds=fold_results, summary=summarize(fold_results))


def _backbone_dict(cfg: BackboneConfig) -> dict:
    return {
        "input_shape": list(cfg.input_shape),
        "conv_channels": list(cfg.conv_channels),
        "embed_dim": cfg.embed_dim,
        "heads": cfg.heads,
        "tokens": cfg.tokens,
    }


def _train_dict(cfg: TrainConfig) -> dict:
    adv = cfg.adversarial_training
    return {
        "epochs": cfg.epochs,
        "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size,
        "augment_flip": cfg.augment_flip,
        "augment_rotate": cfg.augment_rotate,
        "seed": cfg.seed,
        "adversarial_training": None if adv is None else {
            "attack": adv.attack, "epsilon": adv.epsilon,
            "batch_size": adv.batch_size, "iterations": adv.iterations,
        },
    }


@dataclass
class SweepResult:
    """Grid of transfer experiments over (epsilon, iterations)."""

    epsilons: list
    iterations: list
    attacks: list
    defended: bool
    cells: dict  # (epsilon, iterations) -> EvalReport

    def summary_rows(self):
        """One row per (attack, epsilon, iterations): fold-mean target AUC."""
        rows = []
        for eps in self.epsilons:
            for it in self.iterations:
                report = self.cells[(eps, it)]
                for name in self.attacks:
                    entry = report.summary["attacks"][name]
                    rows.append({
                        "attack": name, "epsilon": eps, "iterations": it,
                        "defended": 0, "auc": entry["target_auc"]["mean"],
                        "auc_std": entry["target_auc"]["std"],
                    })
                    if self.defended:
                        rows.append({
                            "attack": name, "epsilon": eps, "iterations": it,
                            "defended": 1, "auc": entry["target_advtrain_auc"]["mean"],
                            "auc_std": entry["target_advtrain_auc"]["std"],
                        })
        return rows

    def long_rows(self):
        """Per-fold rows matching the sweep CSV schema."""
        rows = []
        for eps in self.epsilons:
            for it in self.iterations:
                report = self.cells[(eps, it)]
                for name in self.attacks:
                    for f in report.folds:
                        rows.append({
                            "attack": name, "epsilon": eps, "iterations": it,
                            "defended": 0, "fold": f.fold,
                            "auc": f.attacks[name]["target_auc"],
                        })
                        if self.defended:
                            rows.append({
                                "attack": name, "epsilon": eps, "iterations": it,
                                "defended": 1, "fold": f.fold,
                                "auc": f.attacks[name]["target_advtrain_auc"],
                            })
        return rows


def _sweep_fold_job(args):
    (fold, train_pairs, test_pairs, cells_specs, train_cfg, model_cfg,
     seed, defended) = args
    models = _train_fold_models(train_pairs, train_cfg, model_cfg, seed, fold, defended)
    clean = _clean_aucs(models, test_pairs)
    per_cell = {}
    for key, specs in cells_specs:
        per_cell[key] = _evaluate_attacks(models, test_pairs, specs, seed, fold)
    return fold, clean, per_cell


def run_sweep(cohort, attack_specs, grid: dict, train_cfg: TrainConfig,
              model_cfg: BackboneConfig | None = None,
              k: int = 5, seed: int = 0) -> SweepResult:
    """Transfer experiments over an (epsilon, iterations) grid.

    Models are trained once per fold and reused across grid cells; only the
    attack generation varies. ``grid`` holds optional ``epsilon`` and
    ``iterations`` lists; a missing axis keeps each attack's configured value.
    """
    if not grid or not any(grid.get(a) for a in ("epsilon", "iterations")):
        raise ValueError("sweep grid needs at least one of 'epsilon'/'iterations'")
    unknown = set(grid) - {"epsilon", "iterations"}
    if unknown:
        raise ValueError(f"sweep grid: unknown axis {sorted(unknown)}")
    model_cfg = model_cfg or BackboneConfig()
    defended = train_cfg.adversarial_training is not None
    base_eps = sorted({acfg.epsilon for _, acfg in attack_specs})
    base_it = sorted({acfg.iterations for _, acfg in attack_specs})
    epsilons = [float(e) for e in grid.get("epsilon") or base_eps]
    iterations = [int(i) for i in grid.get("iterations") or base_it]

    cells_specs = []
    for eps in epsilons:
        for it in iterations:
            specs = [(name, replace(acfg, epsilon=eps, iterations=it))
                     for name, acfg in attack_specs]
            cells_specs.append(((eps, it), specs))

    folds = split_folds(cohort, k, seed)
    jobs = [(f, train, test, cells_specs, train_cfg, model_cfg, seed, defended)
            for f, (train, test) in enumerate(folds)]
    workers = _worker_count(k)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_sweep_fold_job, jobs))
    else:
        outputs = [_sweep_fold_job(job) for job in jobs]

    cohort_desc = _cohort_summary(cohort)
    names = [name for name, _ in attack_specs]
    cells = {}
    for (key, specs) in cells_specs:
        fold_results = []
        for fold, clean, per_cell in outputs:
            fold_results.append(FoldResult(fold=fold, clean=clean, attacks=per_cell[key]))
        config = {
            "folds": k, "seed": seed, "model": _backbone_dict(model_cfg),
            "train": _train_dict(train_cfg),
            "attacks": [{"attack": n, **c.to_json()} for n, c in specs],
        }
        cells[key] = EvalReport(cohort=cohort_desc, config=config,
                                folds=fold_results, summary=summarize(fold_results))
    return SweepResult(epsilons=epsilons, iterations=iterations, attacks=names,
                       defended=defended, cells=cells)


def cohort_distance_stats(cohort, feature_model):
    """Mean Euclidean feature distance between Prior and Current, per class.

    Returns (mean_control_distance, mean_cancer_distance) under the given
    trained backbone.
    """
    priors, currents, labels = _stack(cohort)
    fp = feature_model.features(Tensor(priors)).data
    fc = feature_model.features(Tensor(currents)).data
    d = np.linalg.norm(fp - fc, axis=1)
    if not (labels == 0).any() or not (labels == 1).any():
        raise ValueError("cohort must contain both classes")
    return float(d[labels == 0].mean()), float(d[labels == 1].mean())
