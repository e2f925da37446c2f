"""White-box attacks, additive and impulse noise, and the epsilon sweep.

Attacks accept either a model (anything with ``logits`` and ``parameters``)
or a plain callable mapping an input :class:`Tensor` to logits.  Models are
put in evaluation mode and their parameters are frozen while input
gradients are taken, so parameter gradients are never touched.
"""

from __future__ import annotations

import contextlib
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .evaluation import CRITERIA, EvalReport, confusion, metrics, predict
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)

__all__ = [
    "ATTACKS",
    "NOISES",
    "KINDS",
    "EPSILONS",
    "PerturbationSpec",
    "AttackResult",
    "attack_gradient",
    "attack_deepfool",
    "add_noise",
    "perturb",
    "corrupted_fraction",
    "sweep",
    "SweepResult",
]

ATTACKS = ("fgm", "fgsm", "pgd", "deepfool")
NOISES = ("gaussian", "salt-pepper", "uniform", "exponential", "rayleigh", "erlang")
KINDS = ATTACKS + NOISES
EPSILONS = tuple(0.001 * 2**n for n in range(9))


@dataclass(frozen=True)
class PerturbationSpec:
    """One perturbation kind at one magnitude.

    ``epsilon`` bounds the attack (L2 for fgm, Linf otherwise).  For the
    additive noises it is the noise standard deviation as a fraction of the
    valid range; for salt-pepper it is the fraction of corrupted pixels.
    """

    kind: str
    epsilon: float
    steps: int = 10
    step_size: float | None = None
    max_iters: int = 50
    overshoot: float = 0.02
    erlang_k: int = 2
    valid_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ContractError(f"unknown perturbation {self.kind!r}; expected one of {KINDS}")
        if not self.epsilon >= 0.0:
            raise ContractError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.kind == "salt-pepper" and self.epsilon > 1.0:
            raise ContractError(f"salt-pepper fraction must be <= 1, got {self.epsilon}")
        if self.steps < 1 or self.max_iters < 1 or self.erlang_k < 1:
            raise ContractError("steps, max_iters and erlang_k must be positive")
        if self.step_size is not None and not 0.0 <= self.step_size <= self.epsilon:
            raise ContractError(f"pgd step size {self.step_size} must lie in [0, epsilon={self.epsilon}]")
        lo, hi = self.valid_range
        if not lo < hi:
            raise ContractError(f"invalid range {self.valid_range}")

    @property
    def alpha(self) -> float:
        return self.epsilon / 4.0 if self.step_size is None else self.step_size


@dataclass
class AttackResult:
    x: np.ndarray
    # per-sample flags: fgm zero gradient / deepfool not converged
    failed: np.ndarray
    iterations: np.ndarray | None = None

    @property
    def converged(self) -> np.ndarray:
        return ~self.failed


# ---------------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------------

@contextlib.contextmanager
def _frozen(model):
    """Evaluation mode with parameter gradients disabled; restores both on exit."""
    if not hasattr(model, "parameters"):
        yield model
        return
    params = model.parameters()
    was_training = model.training
    model.eval()
    for p in params:
        p.requires_grad = False
    try:
        yield model
    finally:
        for p in params:
            p.requires_grad = True
        model.train(was_training)


def _logits_fn(model) -> Callable[[Tensor], Tensor]:
    return model.logits if hasattr(model, "logits") else model


def _input_dtype(model) -> str:
    cfg = getattr(model, "config", None)
    return cfg.compute_dtype if cfg is not None else "fp64"


def _leaf(x: np.ndarray, model) -> Tensor:
    return Tensor(np.array(x), requires_grad=True, dtype=_input_dtype(model))


def loss_gradient(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of each sample's own cross-entropy with respect to its input."""
    with _frozen(model):
        xt = _leaf(x, model)
        logits = _logits_fn(model)(xt)
        loss = T.cross_entropy(logits, y) * float(len(y))
        loss.backward()
    return np.asarray(xt.grad, dtype=np.float64)


def _clip(x: np.ndarray, spec: PerturbationSpec) -> np.ndarray:
    return np.clip(x, *spec.valid_range)


def _project_linf(adv: np.ndarray, x: np.ndarray, eps: float, spec: PerturbationSpec) -> np.ndarray:
    """Clip into the valid range and the Linf ball, so ``|adv - x| <= eps`` holds in floating point."""
    adv = _clip(np.clip(adv, x - eps, x + eps), spec)
    for _ in range(8):
        over = np.abs(adv - x) > eps
        if not over.any():
            break
        adv[over] = np.nextafter(adv[over], x[over])
    return adv


def _per_sample_norm(g: np.ndarray) -> np.ndarray:
    return np.sqrt((g.reshape(len(g), -1) ** 2).sum(axis=1))


def _expand(v: np.ndarray, like: np.ndarray) -> np.ndarray:
    return v.reshape((len(v),) + (1,) * (like.ndim - 1))


def attack_gradient(model, x: np.ndarray, y: np.ndarray, spec: PerturbationSpec) -> AttackResult:
    """fgm, fgsm or pgd against the true labels.

    fgm steps ``eps * g / ||g||_2``; fgsm steps ``eps * sign(g)``; pgd takes
    ``spec.steps`` sign steps of ``spec.alpha`` and projects back into the
    Linf ball after each one.  Results are clipped to the valid range.
    """
    if spec.kind not in ("fgm", "fgsm", "pgd"):
        raise ContractError(f"attack_gradient handles fgm/fgsm/pgd, not {spec.kind!r}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    failed = np.zeros(len(x), dtype=bool)
    if spec.epsilon == 0.0:
        return AttackResult(x.copy(), failed)
    eps = spec.epsilon
    if spec.kind == "fgm":
        g = loss_gradient(model, x, y)
        norm = _per_sample_norm(g)
        failed = ~(norm > 0) | ~np.isfinite(norm)
        safe = np.where(failed, 1.0, norm)
        step = np.where(_expand(failed, g), 0.0, eps * g / _expand(safe, g))
        return AttackResult(_clip(x + step, spec), failed)
    if spec.kind == "fgsm":
        g = loss_gradient(model, x, y)
        return AttackResult(_project_linf(x + eps * np.sign(g), x, eps, spec), failed)
    adv = x.copy()
    for _ in range(spec.steps):
        g = loss_gradient(model, adv, y)
        adv = adv + spec.alpha * np.sign(g)
        adv = _project_linf(adv, x, eps, spec)
    return AttackResult(adv, failed)


def _jacobian(model, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Logits ``[B, K]`` and their input gradients ``[K, B, ...]``."""
    with _frozen(model):
        xt = _leaf(x, model)
        logits = _logits_fn(model)(xt)
        k = logits.shape[1]
        grads = []
        for c in range(k):
            xt.grad = None
            T.tsum(logits[:, c]).backward()
            grads.append(np.asarray(xt.grad, dtype=np.float64))
    return np.asarray(logits.data, dtype=np.float64), np.stack(grads)


def attack_deepfool(
    model,
    x: np.ndarray,
    max_iters: int = 50,
    overshoot: float = 0.02,
    valid_range: tuple[float, float] | None = (0.0, 1.0),
    y: np.ndarray | None = None,
) -> AttackResult:
    """Multi-class DeepFool.

    Each iteration linearizes the logits and accumulates the smallest step
    reaching the nearest boundary; the image is ``x + (1 + overshoot) * r``.
    A sample stops once its prediction differs from the clean one.  With
    ``y`` given, samples already misclassified are left untouched.
    ``failed`` marks samples still unflipped after ``max_iters``.
    """
    x = np.asarray(x, dtype=np.float64)
    rows = np.arange(len(x))
    logits, jac = _jacobian(model, x)
    orig = logits.argmax(axis=1)
    active = np.ones(len(x), dtype=bool) if y is None else orig == np.asarray(y)
    r_tot = np.zeros_like(x)
    adv = x.copy()
    iters = np.zeros(len(x), dtype=np.int64)
    for _ in range(max_iters):
        active &= logits.argmax(axis=1) == orig
        if not active.any():
            break
        w = jac - jac[orig, rows][None]
        f = logits.T - logits[rows, orig][None]
        wn = np.sqrt((w.reshape(w.shape[0], len(x), -1) ** 2).sum(axis=2))
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.abs(f) / wn
        dist[orig, rows] = np.inf
        dist[~np.isfinite(dist)] = np.inf
        nearest = dist.argmin(axis=0)
        # a zero logit-gap gradient leaves no boundary to walk to
        active &= np.isfinite(dist[nearest, rows])
        for b in np.flatnonzero(active):
            k = nearest[b]
            r_tot[b] += abs(f[k, b]) / wn[k, b] ** 2 * w[k, b]
        iters[active] += 1
        adv = x + (1.0 + overshoot) * r_tot
        if valid_range is not None:
            adv = np.clip(adv, *valid_range)
        logits, jac = _jacobian(model, adv)
    flipped = logits.argmax(axis=1) != orig
    if y is not None:
        flipped |= orig != np.asarray(y)
    return AttackResult(adv, ~flipped, iters)


# ---------------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------------

def add_noise(x: np.ndarray, spec: PerturbationSpec, seed: int) -> np.ndarray:
    """Seeded noise; every additive kind is zero-mean with standard deviation eps * range."""
    if spec.kind not in NOISES:
        raise ContractError(f"add_noise handles {NOISES}, not {spec.kind!r}")
    x = np.asarray(x, dtype=np.float64)
    if spec.epsilon == 0.0:
        return x.copy()
    rng = np.random.default_rng(seed)
    lo, hi = spec.valid_range
    sigma = spec.epsilon * (hi - lo)
    kind = spec.kind
    if kind == "salt-pepper":
        return _salt_pepper(x, spec.epsilon, lo, hi, rng)
    if kind == "gaussian":
        noise = rng.normal(0.0, sigma, x.shape)
    elif kind == "uniform":
        half = math.sqrt(3.0) * sigma
        noise = rng.uniform(-half, half, x.shape)
    elif kind == "exponential":
        noise = rng.exponential(sigma, x.shape) - sigma
    elif kind == "rayleigh":
        scale = sigma / math.sqrt((4.0 - math.pi) / 2.0)
        noise = rng.rayleigh(scale, x.shape) - scale * math.sqrt(math.pi / 2.0)
    else:
        theta = sigma / math.sqrt(spec.erlang_k)
        noise = rng.gamma(spec.erlang_k, theta, x.shape) - spec.erlang_k * theta
    return np.clip(x + noise, lo, hi)


def _salt_pepper(x: np.ndarray, fraction: float, lo: float, hi: float, rng) -> np.ndarray:
    # images are [..., C, H, W]; a corrupted pixel gets the same value in every channel
    if x.ndim < 3:
        raise ContractError(f"salt-pepper needs [..., C, H, W] images, got shape {x.shape}")
    h, w = x.shape[-2:]
    count = int(round(fraction * h * w))
    out = x.reshape((-1,) + x.shape[-3:]).copy()
    for img in out:
        where = rng.choice(h * w, size=count, replace=False)
        rr, cc = np.divmod(where, w)
        img[:, rr, cc] = np.where(rng.random(count) < 0.5, lo, hi)[None, :]
    return out.reshape(x.shape)


def corrupted_fraction(x: np.ndarray, x_noisy: np.ndarray) -> float:
    changed = (x != x_noisy).any(axis=-3) if x.ndim >= 3 else x != x_noisy
    return float(changed.mean())


# ---------------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------------

def perturb(model, x: np.ndarray, y: np.ndarray, spec: PerturbationSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Perturbed batch and per-sample failure flags.

    Failed samples (zero fgm gradient, non-finite output, unconverged
    DeepFool) are returned unperturbed.
    """
    x = np.asarray(x, dtype=np.float64)
    if spec.kind in NOISES:
        return add_noise(x, spec, seed), np.zeros(len(x), dtype=bool)
    if spec.epsilon == 0.0:
        return x.copy(), np.zeros(len(x), dtype=bool)
    if spec.kind == "deepfool":
        res = attack_deepfool(model, x, spec.max_iters, spec.overshoot, spec.valid_range, y)
        adv = _project_linf(res.x, x, spec.epsilon, spec)
    else:
        res = attack_gradient(model, x, y, spec)
        adv = res.x
    failed = res.failed | ~np.isfinite(adv.reshape(len(x), -1)).all(axis=1)
    adv = np.where(_expand(failed, adv), x, adv)
    return adv, failed


@dataclass
class SweepResult:
    kinds: list[str]
    epsilons: list[float]
    reports: dict[tuple[str, float], EvalReport] = field(default_factory=dict)
    failures: dict[tuple[str, float], int] = field(default_factory=dict)

    def grid(self) -> np.ndarray:
        """``[kinds, epsilons, 4]`` array of criteria, NaN where undefined."""
        out = np.full((len(self.kinds), len(self.epsilons), len(CRITERIA)), np.nan)
        for i, k in enumerate(self.kinds):
            for j, e in enumerate(self.epsilons):
                vals = self.reports[(k, e)].as_dict()
                out[i, j] = [np.nan if vals[c] is None else vals[c] for c in CRITERIA]
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "epsilon", *CRITERIA, "failures"])
            for k in self.kinds:
                for e in self.epsilons:
                    w.writerow([k, f"{e:g}", *self.reports[(k, e)].to_csv_row(), self.failures[(k, e)]])

    def write_long(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "epsilon", "criterion", "value"])
            for k in self.kinds:
                for e in self.epsilons:
                    for c, v in self.reports[(k, e)].as_dict().items():
                        w.writerow([k, f"{e:g}", c, "" if v is None else repr(v)])

    @property
    def total_failures(self) -> int:
        return int(sum(self.failures.values()))


def sweep(
    model,
    dataset,
    kinds: Iterable[str] = KINDS,
    seed: int = 0,
    *,
    epsilons: Sequence[float] = EPSILONS,
    debug: bool = False,
    batch: int = 16,
    positive: int = 0,
    spec_overrides: dict | None = None,
) -> SweepResult:
    """Evaluate ``model`` on ``dataset`` under every (kind, epsilon) pair.

    With ``debug`` an ``epsilon = 0`` column is prepended, which must equal
    the clean evaluation.
    """
    kinds = list(kinds)
    for k in kinds:
        if k not in KINDS:
            raise ContractError(f"unknown perturbation {k!r}; expected one of {KINDS}")
    levels = ([0.0] if debug else []) + [float(e) for e in epsilons]
    x_all, y_all = dataset.images().astype(np.float64), dataset.labels()
    result = SweepResult(kinds, levels)
    for ki, kind in enumerate(kinds):
        for ei, eps in enumerate(levels):
            spec = PerturbationSpec(kind, eps, **(spec_overrides or {}))
            preds, fails = [], 0
            for bi, lo in enumerate(range(0, len(x_all), batch)):
                xb, yb = x_all[lo : lo + batch], y_all[lo : lo + batch]
                try:
                    adv, failed = perturb(model, xb, yb, spec, seed=_batch_seed(seed, ki, ei, bi))
                except (FloatingPointError, ArithmeticError) as exc:
                    log.warning("%s eps=%g batch %d failed (%s); evaluating clean", kind, eps, bi, exc)
                    adv, failed = xb, np.ones(len(xb), dtype=bool)
                fails += int(failed.sum())
                preds.append(predict(model, adv.astype(np.float32), batch))
            cm = confusion(np.concatenate(preds), y_all, dataset.num_classes, positive)
            result.reports[(kind, eps)] = metrics(cm)
            result.failures[(kind, eps)] = fails
            log.info("%s eps=%g: %s (failures %d)", kind, eps, result.reports[(kind, eps)], fails)
    return result


def _batch_seed(seed: int, *parts: int) -> int:
    return int(np.random.SeedSequence([seed, *parts]).generate_state(1)[0])
