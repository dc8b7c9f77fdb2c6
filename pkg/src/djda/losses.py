"""Classification, marginal (MDA) and conditional (CDA) adaptation losses.

Every loss returns raw gradients: discriminator/classifier parameter grads
plus ``dL/df`` for the features it consumed. Nothing here reverses a
gradient; the trainer decides how each feature gradient enters the
extractor (see :func:`djda.trainer.compose_gradients`).

Row convention for a batch: features ``f`` stack source rows first, then
target rows. Domain labels are 0 for source and 1 for target.
"""

import warnings
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .autodiff import as_matrix, softmax, softmax_cross_entropy
from .errors import ShapeError, ValidationError
from .model import classifier_logits, forward_features

PROB_TOL = 1e-6


@dataclass
class Batch:
    x_s: np.ndarray
    y_s: np.ndarray
    y_sp: np.ndarray
    x_t: np.ndarray

    def __post_init__(self):
        self.x_s = as_matrix(self.x_s, "x_s")
        self.x_t = as_matrix(self.x_t, "x_t") if np.size(self.x_t) else np.zeros((0, self.x_s.shape[1]))
        self.y_s = np.asarray(self.y_s, dtype=np.int64)
        self.y_sp = np.asarray(self.y_sp, dtype=np.int64)
        if self.x_s.shape[0] < 1:
            raise ValidationError("a batch needs at least one source sample")
        if self.x_t.shape[1] != self.x_s.shape[1]:
            raise ShapeError("source and target feature widths differ")
        if self.y_s.shape != (self.n_s,) or self.y_sp.shape != (self.n_s,):
            raise ShapeError("label vectors must have one entry per source sample")

    @property
    def n_s(self):
        return self.x_s.shape[0]

    @property
    def n_t(self):
        return self.x_t.shape[0]

    @property
    def domain(self):
        return np.concatenate([np.zeros(self.n_s, np.int64), np.ones(self.n_t, np.int64)])

    def check_labels(self, c, k):
        if self.y_s.min() < 0 or self.y_s.max() >= c:
            raise ValidationError(f"emotion labels must lie in [0, {c})")
        if self.y_sp.min() < 0 or self.y_sp.max() >= k:
            raise ValidationError(f"speaker labels must lie in [0, {k})")


class Forward(NamedTuple):
    f: np.ndarray
    caches: list
    n_s: int


class Gradients(NamedTuple):
    params: dict
    features: np.ndarray


class CeResult(NamedTuple):
    l_ce: float
    errors: int
    grads: Gradients


class MdaResult(NamedTuple):
    l_md: float
    l_st: float
    l_sp: float
    err_st: float
    err_sp: float
    grads: Gradients


class CdaResult(NamedTuple):
    loss: float
    err: np.ndarray  # probability-weighted error rate per class
    wrong: np.ndarray  # probability-weighted misclassification mass per class
    mass: np.ndarray  # total probability mass per class
    grads: Gradients


@dataclass
class LossReport:
    l_ce: float = 0.0
    l_st: float = 0.0
    l_sp: float = 0.0
    l_md: float = 0.0
    l_dcd: float = 0.0
    l_scd: float = 0.0
    l_cd: float = 0.0
    l_total: float = 0.0
    err_st: float = 0.0
    err_sp: float = 0.0
    err_cst: list = field(default_factory=list)
    err_csp: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["err_cst"] = [float(v) for v in d["err_cst"]]
        d["err_csp"] = [float(v) for v in d["err_csp"]]
        return d


def forward_batch(model, batch):
    f, caches = forward_features(model, np.vstack([batch.x_s, batch.x_t]))
    return Forward(f, caches, batch.n_s)


def check_probs(probs, n, c):
    probs = as_matrix(probs, "probs")
    if probs.shape != (n, c):
        raise ShapeError(f"probs shape {probs.shape}, expected {(n, c)}")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > PROB_TOL):
        raise ValidationError("probability rows must be non-negative and sum to 1")
    return probs


def _disc_term(stack, prefix, inputs, targets, weights=None):
    logits, caches = stack.forward(inputs)
    loss, g_logits, errors = softmax_cross_entropy(logits, targets, weights)
    g_in, g_layers = stack.backward(g_logits, caches)
    wrong = np.argmax(logits, axis=1) != targets
    return loss, errors, wrong, stack.named_grads(prefix, g_layers), g_in


def _classwise(model, family, f, probs, targets):
    n, c = probs.shape
    total = 0.0
    params = {}
    g_f = np.zeros_like(f)
    wrong_mass, mass = np.zeros(c), np.zeros(c)
    stacks = model.cst if family == "cst" else model.csp
    for m in range(c):
        p = probs[:, m]
        loss, _, wrong, grads, g_in = _disc_term(stacks[m], f"{family}.{m}", p[:, None] * f,
                                                 targets, weights=p)
        total += loss
        params.update(grads)
        g_f += p[:, None] * g_in
        wrong_mass[m] = float(np.sum(p * wrong))
        mass[m] = float(np.sum(p))
    err = np.divide(wrong_mass, mass, out=np.zeros(c), where=mass > 0)
    return total, err, wrong_mass, mass, Gradients(params, g_f)


def classification_loss(model, x_s, y_s, fwd=None):
    """Mean emotion cross-entropy of ``G_cls(G_f(x_s))`` on source rows.

    With ``fwd`` given (shared batch forward), only its first ``n_s`` rows are
    used and the feature gradient spans all rows, zero on target rows.
    """
    y_s = np.asarray(y_s, dtype=np.int64)
    if fwd is None:
        f, caches = forward_features(model, x_s)
        fwd = Forward(f, caches, f.shape[0])
    if fwd.n_s < 1:
        raise ValidationError("classification loss needs at least one source sample")
    logits, caches = classifier_logits(model, fwd.f[: fwd.n_s])
    loss, g_logits, errors = softmax_cross_entropy(logits, y_s)
    g_in, g_layers = model.classifier.backward(g_logits, caches)
    g_f = np.zeros_like(fwd.f)
    g_f[: fwd.n_s] = g_in
    return CeResult(loss, errors, Gradients(model.classifier.named_grads("classifier", g_layers), g_f))


def mda_loss(model, batch, fwd=None, use_st=True, use_sp=True):
    """``l_md = l_st + l_sp``.

    ``l_st``: mean CE of the source/target discriminator over all rows.
    ``l_sp``: mean CE of the speaker discriminator over the source rows.
    """
    batch.check_labels(model.config.c, model.config.k)
    if batch.n_t == 0 and use_st:
        warnings.warn("batch has no target rows; l_st sees the source domain only", stacklevel=2)
    fwd = fwd or forward_batch(model, batch)
    params = {}
    g_f = np.zeros_like(fwd.f)
    l_st = l_sp = err_st = err_sp = 0.0
    if use_st:
        l_st, errors, _, grads, g_in = _disc_term(model.st, "st", fwd.f, batch.domain)
        params.update(grads)
        g_f += g_in
        err_st = errors / fwd.f.shape[0]
    if use_sp:
        l_sp, errors, _, grads, g_in = _disc_term(model.sp, "sp", fwd.f[: batch.n_s], batch.y_sp)
        params.update(grads)
        g_f[: batch.n_s] += g_in
        err_sp = errors / batch.n_s
    return MdaResult(l_st + l_sp, l_st, l_sp, err_st, err_sp, Gradients(params, g_f))


def cda_domain_loss(model, batch, probs, fwd=None):
    """Class-wise source/target loss over all rows, normalised by ``n_s + n_t``.

    Discriminator ``m`` sees ``probs[:, m] * f`` and each sample's CE term is
    weighted by ``probs[:, m]``; the probabilities are treated as constants.
    """
    fwd = fwd or forward_batch(model, batch)
    probs = check_probs(probs, fwd.f.shape[0], model.config.c)
    loss, err, wrong, mass, grads = _classwise(model, "cst", fwd.f, probs, batch.domain)
    return CdaResult(loss, err, wrong, mass, grads)


def cda_speaker_loss(model, batch, probs_source, fwd=None):
    """Class-wise speaker loss over the source rows, normalised by ``n_s``."""
    batch.check_labels(model.config.c, model.config.k)
    fwd = fwd or forward_batch(model, batch)
    probs = check_probs(probs_source, batch.n_s, model.config.c)
    loss, err, wrong, mass, grads = _classwise(model, "csp", fwd.f[: batch.n_s], probs, batch.y_sp)
    g_f = np.zeros_like(fwd.f)
    g_f[: batch.n_s] = grads.features
    return CdaResult(loss, err, wrong, mass, Gradients(grads.params, g_f))


def batch_probs(model, fwd):
    """Classifier probabilities for every row of a shared forward (no gradient)."""
    logits, _ = classifier_logits(model, fwd.f)
    return softmax(logits)


def total_loss(l_ce, l_md, l_cd, w, eta):
    """``l_ce - eta * ((1 - w) * l_md + w * l_cd)``, for logging."""
    if not 0.0 <= w <= 1.0:
        raise ValidationError(f"balance factor w must lie in [0, 1], got {w}")
    if eta < 0:
        raise ValidationError(f"eta must be >= 0, got {eta}")
    return l_ce - eta * ((1.0 - w) * l_md + w * l_cd)


def extractor_grads(model, fwd, grad_f):
    _, g_layers = model.extractor.backward(grad_f, fwd.caches)
    return model.extractor.named_grads("extractor", g_layers)


def term_gradients(model, batch, term, probs=None):
    """Loss value and full raw gradient (extractor included) of one loss term.

    ``term`` is one of ``ce``, ``st``, ``sp``, ``dcd``, ``scd``. ``probs``
    pins the class weights of the CDA terms (all rows, source first);
    by default they come from the current classifier. Used for
    finite-difference checks; training goes through the trainer instead.
    """
    fwd = forward_batch(model, batch)
    if probs is None and term in ("dcd", "scd"):
        probs = batch_probs(model, fwd)
    if term == "ce":
        res = classification_loss(model, batch.x_s, batch.y_s, fwd=fwd)
        loss, grads = res.l_ce, res.grads
    elif term in ("st", "sp"):
        res = mda_loss(model, batch, fwd=fwd, use_st=term == "st", use_sp=term == "sp")
        loss, grads = (res.l_st if term == "st" else res.l_sp), res.grads
    elif term == "dcd":
        res = cda_domain_loss(model, batch, probs, fwd=fwd)
        loss, grads = res.loss, res.grads
    elif term == "scd":
        res = cda_speaker_loss(model, batch, probs[: batch.n_s], fwd=fwd)
        loss, grads = res.loss, res.grads
    else:
        raise ValidationError(f"unknown loss term {term!r}")
    params = dict(grads.params)
    params.update(extractor_grads(model, fwd, grads.features))
    return loss, params
