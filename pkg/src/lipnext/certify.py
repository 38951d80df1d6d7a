"""Deterministic l2 certification from margins and Lipschitz bounds."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

TABLE_EPSILONS = (0.0, 36 / 255, 72 / 255, 108 / 255, 1.0)


def pair_lipschitz(V) -> np.ndarray:
    """``P[i, j] = ||V_i - V_j||_2``."""
    V = np.asarray(V, dtype=np.float64)
    diff = V[:, None, :] - V[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _radius_from(logits: np.ndarray, pairs: np.ndarray, bound: float):
    """Shared core: returns (predicted, margins, pair norms, radius) for one example."""
    y = int(np.argmax(logits))
    others = np.arange(logits.shape[0]) != y
    margins = logits[y] - logits[others]
    norms = pairs[y, others]
    if np.any(margins <= 0):
        # tie at the top (or a degenerate zero-gap pair): nothing is certified
        return y, margins, norms, 0.0
    with np.errstate(divide="ignore"):
        r = np.where(norms > 0, margins / (bound * np.where(norms > 0, norms, 1.0)), np.inf)
    return y, margins, norms, float(np.min(r)) if r.size else float("inf")


def certified_radius(logits, V, backbone_bound: float = 1.0) -> float:
    """Largest l2 radius around the input on which the argmax cannot change.

    Ties at the top give 0.  Competitors whose head rows coincide with the
    winner's can never overtake it and are skipped.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    if backbone_bound <= 0:
        raise ValueError("backbone_bound must be positive")
    return _radius_from(logits, pair_lipschitz(V), backbone_bound)[3]


@dataclass
class CertRecord:
    predicted: int
    label: int | None
    logits: np.ndarray
    margins: np.ndarray
    pair_lipschitz: np.ndarray
    radius: float
    certified_at: dict = field(default_factory=dict)

    @property
    def correct(self) -> bool:
        return self.label is not None and self.predicted == self.label


def certify_batch(logits, V, labels=None, eps_list=(), backbone_bound: float = 1.0) -> list[CertRecord]:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    pairs = pair_lipschitz(V)
    records = []
    for i, row in enumerate(logits):
        y, margins, norms, r = _radius_from(row, pairs, backbone_bound)
        label = None if labels is None else int(labels[i])
        rec = CertRecord(y, label, row.copy(), margins, norms, r)
        rec.certified_at = {float(e): bool(rec.correct and r >= e and r > 0) for e in eps_list}
        records.append(rec)
    return records


@dataclass
class LipschitzLedger:
    """Per-layer Lipschitz factors; the backbone bound is their product."""

    factors: list = field(default_factory=list)

    def add(self, name: str, factor: float) -> None:
        if factor < 0:
            raise ValueError("Lipschitz factor must be non-negative")
        self.factors.append((name, float(factor)))

    @property
    def backbone_bound(self) -> float:
        out = 1.0
        for _, f in self.factors:
            out *= f
        return out

    @classmethod
    def for_model(cls, model) -> "LipschitzLedger":
        """Every backbone stage is 1-Lipschitz by construction: isometric stem,
        orthogonal mixing, shifts (permutations or zero-padded restrictions),
        1-Lipschitz activations and the l2 pool."""
        ledger = cls()
        ledger.add("stem.patchify", 1.0)
        ledger.add("stem.channel_lift", 1.0)
        for i in range(model.spec.depth):
            for part in ("R", "shift", "RtM", "act"):
                ledger.add(f"block{i}.{part}", 1.0)
        ledger.add("pool.l2", 1.0)
        return ledger


@dataclass
class CRAReport:
    eps_list: list
    clean_acc: float
    cra: list
    n_examples: int

    def rows(self):
        return [(e, self.clean_acc, c, self.n_examples) for e, c in zip(self.eps_list, self.cra)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epsilon", "clean_acc", "cra", "n_examples"])
        for e, acc, c, n in self.rows():
            w.writerow([repr(float(e)), f"{acc:.6f}", f"{c:.6f}", n])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'epsilon':>10}  {'clean_acc':>9}  {'cra':>7}  n_examples", "-" * 42]
        for e, acc, c, n in self.rows():
            lines.append(f"{e:>10.6f}  {acc:>9.4f}  {c:>7.4f}  {n}")
        return "\n".join(lines)


def evaluate_cra(model, images, labels, eps_list, batch_size: int = 512, backbone_bound=None) -> CRAReport:
    """Clean accuracy and certified robust accuracy at each radius in ``eps_list``.

    Certification runs in float64 regardless of the training precision.
    """
    eps_list = [float(e) for e in eps_list]
    if not eps_list or any(e < 0 for e in eps_list):
        raise ValueError("eps_list must be non-empty with non-negative values")
    n = len(labels)
    if n == 0:
        raise ValueError("empty dataset")
    if backbone_bound is None:
        backbone_bound = LipschitzLedger.for_model(model).backbone_bound
    radii = np.empty(n)
    correct = np.empty(n, dtype=bool)
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        recs = certify_batch(model.logits(images[sl]), model.head_V, labels[sl], (), backbone_bound)
        radii[sl] = [r.radius for r in recs]
        correct[sl] = [r.correct for r in recs]
    cra = [float(np.mean(correct & (radii >= e) & (radii > 0))) for e in eps_list]
    return CRAReport(eps_list, float(np.mean(correct)), cra, n)


def empirical_lipschitz_lower_bound(model, trials: int = 100, seed: int = 0, dtype=np.float64) -> float:
    """Largest observed ``||f(x) - f(x')|| / ||x - x'||`` for the backbone.

    Half the probes are independent random pairs, half are small
    perturbations around a random point.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    shape = model.spec.input_shape
    x = rng.random((trials,) + shape)
    y = rng.random((trials,) + shape)
    near = trials // 2
    y[:near] = x[:near] + 1e-3 * rng.standard_normal((near,) + shape)
    fx = model.backbone(x, dtype)
    fy = model.backbone(y, dtype)
    num = np.linalg.norm((fx - fy).reshape(trials, -1), axis=1)
    den = np.linalg.norm((x - y).reshape(trials, -1), axis=1)
    return float(np.max(num / den))
