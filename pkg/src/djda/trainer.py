"""DJDA training: one simultaneous update per batch through reversal points.

Each adversarial branch's feature gradient reaches the extractor reversed,
with strength ``eta * (1 - w)`` for the marginal branches (st, sp) and
``eta * w`` for the class-wise ones (cst, csp). Discriminators and the
classifier receive their ordinary gradients, so a single Adam step over all
parameters realises ``l_ce - eta * ((1 - w) * l_md + w * l_cd)``.

``w`` starts at 0.5 and is refreshed after every epoch from that epoch's
discriminator error rates.
"""

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autodiff import AdamState, adam_step, grad_reverse
from .data import LosoFold, make_batches
from .dynamic import INITIAL_W, EpochStats, balance_factor, estimate_distances
from .errors import DivergenceError, ValidationError
from .losses import (
    LossReport,
    batch_probs,
    cda_domain_loss,
    cda_speaker_loss,
    classification_loss,
    extractor_grads,
    forward_batch,
    mda_loss,
    total_loss,
)
from .metrics import confusion, uar, war
from .model import ModelConfig, build_model, forward_features, predict_emotion

log = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ["epoch", "w", "d_md", "sum_d_cd", "l_ce", "l_st", "l_sp", "l_md",
                      "l_dcd", "l_scd", "l_cd", "l_total", "war", "uar", "eta"]


@dataclass
class EtaSchedule:
    """``constant``: eta = value. ``ramp``: eta = 2 / (1 + exp(-value * p)) - 1."""

    kind: str = "ramp"
    value: float = 10.0

    def __post_init__(self):
        if self.kind not in ("constant", "ramp"):
            raise ValidationError(f"unknown eta schedule {self.kind!r}")
        if self.value < 0 or not math.isfinite(self.value):
            raise ValidationError("eta schedule value must be finite and >= 0")


def eta_value(schedule: EtaSchedule, p):
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"progress must lie in [0, 1], got {p}")
    if schedule.kind == "constant":
        return float(schedule.value)
    return 2.0 / (1.0 + math.exp(-schedule.value * p)) - 1.0


@dataclass
class TrainConfig:
    epochs: int = 120
    batch_size: int = 32
    lr: float = 5e-4
    eta_schedule: EtaSchedule = field(default_factory=EtaSchedule)
    use_md: bool = True
    use_cd: bool = True
    use_st_branch: bool = True
    use_sp_branch: bool = True
    seed: int = 0
    eval_every: int = 1
    divergence_factor: float = 10.0
    divergence_patience: int = 3

    def __post_init__(self):
        if isinstance(self.eta_schedule, dict):
            self.eta_schedule = EtaSchedule(**self.eta_schedule)

    def validate(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2")
        if not self.lr > 0:
            raise ValidationError("lr must be > 0")
        if self.eval_every < 1:
            raise ValidationError("eval_every must be >= 1")
        return self

    @property
    def use_st(self):
        return self.use_md and self.use_st_branch

    @property
    def use_sp(self):
        return self.use_md and self.use_sp_branch

    @property
    def use_cst(self):
        return self.use_cd and self.use_st_branch

    @property
    def use_csp(self):
        return self.use_cd and self.use_sp_branch

    @property
    def has_md(self):
        return self.use_st or self.use_sp

    @property
    def has_cd(self):
        return self.use_cst or self.use_csp

    @property
    def variant(self):
        """Name of the configuration, as the ablation study labels it."""
        if self.eta_schedule.kind == "constant" and self.eta_schedule.value == 0:
            return "source-only"
        if not self.has_md and not self.has_cd:
            return "source-only"
        off = []
        if not self.use_md:
            off.append("w/o L_md")
        if not self.use_cd:
            off.append("w/o L_cd")
        if not self.use_st_branch:
            off.append("w/o L_st&L_cst")
        if not self.use_sp_branch:
            off.append("w/o L_sp&L_csp")
        return ", ".join(off) if off else "DJDA"

    @property
    def adaptation_enabled(self):
        return self.variant != "source-only"

    def to_dict(self):
        return asdict(self)


def effective_w(config: TrainConfig, w):
    """With one adaptation family switched off the other takes full weight."""
    if not config.has_md and config.has_cd:
        return 1.0
    if not config.has_cd and config.has_md:
        return 0.0
    return w


@dataclass
class StepResult:
    report: LossReport
    grads: dict
    mda: object = None
    cda_domain: object = None
    cda_speaker: object = None


def _check_finite(branch, grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in branch {branch!r} (parameter {name})")


def compose_gradients(model, batch, w, eta, config: TrainConfig):
    """Forward every active branch once and assemble the full gradient.

    Returns a :class:`StepResult` whose ``grads`` covers the extractor, the
    classifier and every active discriminator; parameters of inactive
    branches are absent.
    """
    if not 0.0 <= w <= 1.0:
        raise ValidationError(f"balance factor w must lie in [0, 1], got {w}")
    fwd = forward_batch(model, batch)
    ce = classification_loss(model, batch.x_s, batch.y_s, fwd=fwd)
    _check_finite("classifier", ce.grads.params)
    grads = dict(ce.grads.params)
    g_f = ce.grads.features.copy()
    lam_md, lam_cd = eta * (1.0 - w), eta * w
    res = StepResult(LossReport(l_ce=ce.l_ce, err_cst=[0.0] * model.config.c,
                                err_csp=[0.0] * model.config.c), grads)
    rep = res.report

    if config.has_md:
        res.mda = mda = mda_loss(model, batch, fwd=fwd, use_st=config.use_st, use_sp=config.use_sp)
        _check_finite("mda", mda.grads.params)
        grads.update(mda.grads.params)
        g_f += grad_reverse(mda.grads.features, lam_md)
        rep.l_st, rep.l_sp, rep.l_md = mda.l_st, mda.l_sp, mda.l_md
        rep.err_st, rep.err_sp = mda.err_st, mda.err_sp

    if config.has_cd:
        probs = batch_probs(model, fwd)
        if config.use_cst:
            res.cda_domain = dcd = cda_domain_loss(model, batch, probs, fwd=fwd)
            _check_finite("cst", dcd.grads.params)
            grads.update(dcd.grads.params)
            g_f += grad_reverse(dcd.grads.features, lam_cd)
            rep.l_dcd, rep.err_cst = dcd.loss, dcd.err.tolist()
        if config.use_csp:
            res.cda_speaker = scd = cda_speaker_loss(model, batch, probs[: batch.n_s], fwd=fwd)
            _check_finite("csp", scd.grads.params)
            grads.update(scd.grads.params)
            g_f += grad_reverse(scd.grads.features, lam_cd)
            rep.l_scd, rep.err_csp = scd.loss, scd.err.tolist()
        rep.l_cd = rep.l_dcd + rep.l_scd

    ext = extractor_grads(model, fwd, g_f)
    _check_finite("extractor", ext)
    grads.update(ext)
    rep.l_total = total_loss(rep.l_ce, rep.l_md, rep.l_cd, w, eta)
    return res


def train_step(model, batch, w, eta, state: AdamState, config: TrainConfig):
    """One forward/backward over all active branches and one Adam step."""
    res = compose_gradients(model, batch, w, eta, config)
    adam_step(model.parameters(), res.grads, state, model.layers_by_name())
    return model, res


@dataclass
class EpochRecord:
    epoch: int
    w: float
    eta: float
    d_md: float
    d_cd: list
    sum_d_cd: float
    losses: LossReport
    war: float = None
    uar: float = None
    confusion: list = None

    def row(self):
        l = self.losses
        vals = {"epoch": self.epoch, "w": self.w, "d_md": self.d_md, "sum_d_cd": self.sum_d_cd,
                "l_ce": l.l_ce, "l_st": l.l_st, "l_sp": l.l_sp, "l_md": l.l_md, "l_dcd": l.l_dcd,
                "l_scd": l.l_scd, "l_cd": l.l_cd, "l_total": l.l_total, "war": self.war,
                "uar": self.uar, "eta": self.eta}
        return ["" if vals[c] is None else repr(vals[c]) if isinstance(vals[c], float) else str(vals[c])
                for c in TRAJECTORY_COLUMNS]

    def to_dict(self):
        d = {k: getattr(self, k) for k in ("epoch", "w", "eta", "d_md", "d_cd", "sum_d_cd", "war", "uar")}
        d["losses"] = self.losses.to_dict()
        return d


@dataclass
class Trajectory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def w(self):
        return [r.w for r in self.records]

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRAJECTORY_COLUMNS)
        for r in self.records:
            writer.writerow(r.row())
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def model_config_for(fold: LosoFold, seed, **overrides):
    return ModelConfig(input_dim=fold.source.feature_dim, c=fold.source.c, k=fold.source.k,
                       seed=seed, **overrides)


def predict(model, x):
    f, _ = forward_features(model, x)
    return np.argmax(predict_emotion(model, f), axis=1)


def evaluate_target(model, fold: LosoFold):
    cm = confusion(predict(model, fold.target.x), fold.target.eval_labels(), model.config.c)
    return cm


def _mean_report(reports, w, eta):
    out = LossReport()
    n = len(reports)
    for f in fields(LossReport):
        if f.name in ("err_cst", "err_csp"):
            setattr(out, f.name, np.mean([getattr(r, f.name) for r in reports], axis=0).tolist())
        elif f.name != "l_total":
            setattr(out, f.name, float(sum(getattr(r, f.name) for r in reports) / n))
    out.l_total = total_loss(out.l_ce, out.l_md, out.l_cd, w, eta)
    return out


def train(config: TrainConfig, fold: LosoFold, model_config: ModelConfig = None):
    """Train on one fold. Returns ``(model, trajectory)``.

    Raises :class:`DivergenceError` (with the partial trajectory attached)
    when ``l_ce`` exceeds ``divergence_factor`` times its first-epoch value
    for ``divergence_patience`` consecutive epochs, or a gradient goes
    non-finite.
    """
    config.validate()
    model_config = model_config or model_config_for(fold, config.seed)
    model = build_model(model_config)
    state = AdamState(lr=config.lr)
    traj = Trajectory()
    w = effective_w(config, INITIAL_W)
    first_ce = None
    strikes = 0
    for epoch in range(1, config.epochs + 1):
        eta = eta_value(config.eta_schedule, epoch / config.epochs)
        stats = EpochStats(model.config.c, model.config.k, use_st=config.use_st, use_sp=config.use_sp)
        reports = []
        for batch in make_batches(fold, config.batch_size, config.seed, epoch):
            try:
                _, res = train_step(model, batch, w, eta, state, config)
            except DivergenceError as exc:
                exc.trajectory = traj
                raise
            reports.append(res.report)
            mda = res.mda
            stats.add_batch(mda.err_st if mda else 0.0, batch.n_s + batch.n_t,
                            mda.err_sp if mda else 0.0, batch.n_s,
                            res.cda_domain, res.cda_speaker)
        est = estimate_distances(stats, epoch)
        rec = EpochRecord(epoch, w, eta, est.d_md, est.d_cd, est.sum_d_cd,
                          _mean_report(reports, w, eta))
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            cm = evaluate_target(model, fold)
            rec.war, rec.uar, rec.confusion = war(cm), uar(cm), cm.tolist()
        traj.records.append(rec)
        log.debug("epoch %d w=%.4f l_ce=%.4f uar=%s", epoch, w, rec.losses.l_ce, rec.uar)

        first_ce = rec.losses.l_ce if first_ce is None else first_ce
        strikes = strikes + 1 if rec.losses.l_ce > config.divergence_factor * first_ce else 0
        if strikes >= config.divergence_patience:
            raise DivergenceError(
                f"l_ce exceeded {config.divergence_factor}x its initial value for "
                f"{strikes} consecutive epochs (epoch {epoch})", traj)
        if config.has_md and config.has_cd:
            w = balance_factor(est.d_md, est.d_cd)
    return model, traj
