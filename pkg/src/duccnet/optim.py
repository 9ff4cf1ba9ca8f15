"""ADAM optimizer, binary cross-entropy, and classification metrics."""

from dataclasses import dataclass, field

import numpy as np

# probability clamp: the loss is undefined at p in {0, 1}
BCE_CLAMP = 1e-7

# a sample counts as crack-detected iff p > threshold; ties go to non-crack
DECISION_THRESHOLD = 0.5


@dataclass
class AdamState:
    """Moment estimates keyed like the parameter dict they mirror."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict):
    """One ADAM update, in place on the parameter tensors.

    m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;
    p <- p - lr * mhat / (sqrt(vhat) + eps) with bias correction.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {key}")
        if key not in state.m:
            state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        m = state.m[key]
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (state.lr / c1) * m / (np.sqrt(v / c2) + p.dtype.type(state.eps))
    return params


def bce_loss(pred, labels):
    """Mean binary cross-entropy and its gradient with respect to pred.

    Probabilities are clamped to [BCE_CLAMP, 1 - BCE_CLAMP] before the logs;
    the gradient is computed at the clamped value and passed through, not
    zeroed, so saturated predictions still learn.
    """
    p = np.asarray(pred)
    x = np.asarray(labels)
    if p.shape != x.shape:
        raise ValueError(f"pred shape {p.shape} != labels shape {x.shape}")
    if not np.isin(x, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    x = x.astype(p.dtype)
    clamp = p.dtype.type(BCE_CLAMP)
    pc = np.clip(p, clamp, 1 - clamp)
    n = p.dtype.type(p.size)
    loss = float(-(x * np.log(pc) + (1 - x) * np.log1p(-pc)).sum() / n)
    grad = (pc - x) / (pc * (1 - pc)) / n
    return loss, grad


@dataclass
class Metrics:
    """Confusion counts for the two classes (crack = positive)."""

    n_crack_total: int = 0
    n_nocrack_total: int = 0
    n_crack_correct: int = 0
    n_nocrack_correct: int = 0

    def update(self, probs, labels):
        """Accumulate from probabilities and 0/1 labels."""
        pred = np.asarray(probs).ravel() > DECISION_THRESHOLD
        lab = np.asarray(labels).ravel().astype(bool)
        self.n_crack_total += int(lab.sum())
        self.n_nocrack_total += int((~lab).sum())
        self.n_crack_correct += int((pred & lab).sum())
        self.n_nocrack_correct += int((~pred & ~lab).sum())
        return self

    def merge(self, other):
        self.n_crack_total += other.n_crack_total
        self.n_nocrack_total += other.n_nocrack_total
        self.n_crack_correct += other.n_crack_correct
        self.n_nocrack_correct += other.n_nocrack_correct
        return self

    def confusion(self):
        """((TP, FN), (FP, TN)) with crack as the positive class."""
        tp = self.n_crack_correct
        fn = self.n_crack_total - self.n_crack_correct
        tn = self.n_nocrack_correct
        fp = self.n_nocrack_total - self.n_nocrack_correct
        return ((tp, fn), (fp, tn))


def validation_accuracy(metrics: Metrics) -> float:
    """Correct fraction of the held-out set as a percentage."""
    total = metrics.n_crack_total + metrics.n_nocrack_total
    if total == 0:
        raise ValueError("empty evaluation set")
    return (metrics.n_crack_correct + metrics.n_nocrack_correct) / total * 100.0
