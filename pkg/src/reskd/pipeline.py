"""Residual-guided distillation: train S0 from the teacher, then a chain of
res-students on successive teacher-student residuals until the combined
student is about as confident as the teacher on a held-out split."""
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .artifact import StageArtifact, StageRecord
from .data_io import Dataset, split_indices
from .errors import ConfigError, DivergenceError, DomainError, ShapeError, TrainingError
from .kd_loss import CeTargetMode, KdLossParams, LossKind, kd_loss
from .net import backward, forward, init_mlp, sgd_step

log = logging.getLogger(__name__)

TEACHER_STREAM = 0
S0_STREAM = 1


@dataclass
class DistillConfig:
    tau_s0: float = 0.5
    tau_res: float = 0.1
    temperature: float = 20.0
    loss_kind: str = "l2logit"
    ce_target_mode: str = "combined"
    epochs: int = 100
    teacher_epochs: int = 300
    batch_size: int = 32
    lr: float = 1e-4
    teacher_lr: float = 0.02
    lr_decay_epochs: List[int] = field(default_factory=lambda: [75])
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    energy_fraction: float = 0.9
    th_scale: float = 0.9
    max_stages: int = 3
    val_fraction: float = 0.1
    seed: int = 0
    activation: str = "tanh"
    teacher_widths: List[int] = field(default_factory=lambda: [64, 64])
    s0_widths: List[int] = field(default_factory=lambda: [4])
    res_widths: List[List[int]] = field(default_factory=lambda: [[4], [4], [4]])

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ConfigError(problems)

    def violations(self):
        v = []

        def num(name, lo=None, hi=None, lo_open=False, hi_open=False, integer=False):
            val = getattr(self, name)
            if isinstance(val, bool) or not isinstance(val, (int, float)) or (
                    integer and not isinstance(val, int)):
                v.append(f"{name}: expected {'integer' if integer else 'number'}, got {val!r}")
                return
            if lo is not None and (val <= lo if lo_open else val < lo):
                v.append(f"{name}: must be {'>' if lo_open else '>='} {lo}, got {val}")
            if hi is not None and (val >= hi if hi_open else val > hi):
                v.append(f"{name}: must be {'<' if hi_open else '<='} {hi}, got {val}")

        def widths(name, val):
            if not isinstance(val, list) or not all(
                    isinstance(w, int) and not isinstance(w, bool) and w >= 1 for w in val):
                v.append(f"{name}: expected a list of positive integers, got {val!r}")
                return False
            return True

        num("tau_s0", 0, 1)
        num("tau_res", 0, 1)
        num("temperature", 0, lo_open=True)
        num("epochs", 0, integer=True)
        num("teacher_epochs", 0, integer=True)
        num("batch_size", 1, integer=True)
        num("lr", 0, lo_open=True)
        num("teacher_lr", 0, lo_open=True)
        num("lr_decay_factor", 0, lo_open=True)
        num("momentum", 0, 1, hi_open=True)
        num("weight_decay", 0)
        num("energy_fraction", 0, 1, lo_open=True)
        num("th_scale", 0, 1, lo_open=True)
        num("max_stages", 1, integer=True)
        num("val_fraction", 0, 1, lo_open=True, hi_open=True)
        num("seed", 0, integer=True)
        if self.loss_kind not in [k.value for k in LossKind]:
            v.append(f"loss_kind: must be one of kl, l2prob, l2logit, got {self.loss_kind!r}")
        if self.ce_target_mode not in [m.value for m in CeTargetMode]:
            v.append(f"ce_target_mode: must be combined or residual_only, got {self.ce_target_mode!r}")
        if self.activation not in ("tanh", "relu"):
            v.append(f"activation: must be tanh or relu, got {self.activation!r}")
        if not isinstance(self.lr_decay_epochs, list) or not all(
                isinstance(e, int) and e >= 0 for e in self.lr_decay_epochs):
            v.append(f"lr_decay_epochs: expected a list of non-negative integers, got {self.lr_decay_epochs!r}")
        widths("teacher_widths", self.teacher_widths)
        widths("s0_widths", self.s0_widths)
        if not isinstance(self.res_widths, list):
            v.append(f"res_widths: expected a list of width lists, got {self.res_widths!r}")
        else:
            for i, w in enumerate(self.res_widths):
                widths(f"res_widths[{i}]", w)
            if isinstance(self.max_stages, int) and len(self.res_widths) < self.max_stages:
                v.append(f"res_widths: needs at least max_stages={self.max_stages} entries, "
                         f"got {len(self.res_widths)}")
        return v

    @classmethod
    def from_dict(cls, obj):
        """Build a config, reporting every unknown key and invalid value at once."""
        if not isinstance(obj, dict):
            raise ConfigError(["config must be a JSON object"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = [f"{k}: unknown field" for k in sorted(set(obj) - known)]
        kwargs = {k: obj[k] for k in obj if k in known}
        try:
            cfg = cls(**kwargs)
        except ConfigError as exc:
            raise ConfigError(unknown + exc.violations) from None
        if unknown:
            raise ConfigError(unknown)
        return cfg

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def loss_params(self, tau):
        return KdLossParams(tau, self.temperature, self.loss_kind, self.ce_target_mode)


def _rng(config, stream):
    return np.random.default_rng([config.seed, stream])


def _lr_at(base_lr, epoch, config):
    return base_lr * config.lr_decay_factor ** sum(epoch >= e for e in config.lr_decay_epochs)


def _fit(net, data, teacher_logits, params, config, rng, lr, epochs, ce_offset=None, stage=None):
    n = len(data)
    state = None
    for epoch in range(epochs):
        step_lr = _lr_at(lr, epoch, config)
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            logits, trace = forward(net, data.X[idx])
            offset = None if ce_offset is None else ce_offset[idx]
            loss, g = kd_loss(logits, teacher_logits[idx], data.y[idx], params, ce_offset=offset)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}", stage)
            try:
                net, state = sgd_step(net, backward(net, trace, g), step_lr,
                                      config.momentum, config.weight_decay, state)
            except DivergenceError as exc:
                raise TrainingError(f"{exc} at epoch {epoch}", stage) from exc
    if not all(np.all(np.isfinite(w)) for w in net.weights):
        raise TrainingError("weights became non-finite", stage)
    return net


def _full_widths(data, hidden, num_classes):
    return [data.dim, *hidden, num_classes]


def train_teacher(data: Dataset, widths, config: DistillConfig, stream=TEACHER_STREAM):
    """Plain cross-entropy training (the tau = 0 path); ``widths`` are hidden sizes."""
    rng = _rng(config, stream)
    net = init_mlp(_full_widths(data, widths, data.num_classes), config.activation, rng)
    dummy = np.zeros((len(data), data.num_classes))
    return _fit(net, data, dummy, config.loss_params(0.0), config, rng,
                config.teacher_lr, config.teacher_epochs, stage="teacher")


def train_student(teacher_logits, data: Dataset, widths, tau, config: DistillConfig,
                  stream=S0_STREAM, ce_offset=None, stage=0, lr=None, epochs=None):
    """Minimize the distillation loss against fixed teacher logits.

    ``teacher_logits`` is an (N, K) array aligned with ``data`` or a callable
    mapping a feature matrix to logits; it is evaluated once, never
    differentiated.  ``ce_offset`` (frozen logits of the previous student)
    enters only the cross-entropy term.
    """
    rng = _rng(config, stream)
    net = init_mlp(_full_widths(data, widths, data.num_classes), config.activation, rng)
    t_logits = teacher_logits(data.X) if callable(teacher_logits) else teacher_logits
    t_logits = np.asarray(t_logits, dtype=np.float64)
    if t_logits.shape != (len(data), data.num_classes):
        raise ShapeError(f"teacher logits shape {t_logits.shape} != {(len(data), data.num_classes)}")
    return _fit(net, data, t_logits, config.loss_params(tau), config, rng,
                config.lr if lr is None else lr,
                config.epochs if epochs is None else epochs,
                ce_offset=ce_offset, stage=stage)


def residual_teacher(prev_teacher_logits, latest_student_logits):
    """Next-stage target: ``T_{i+1} = T_i - R_i`` (``T_1 = T - S_0``)."""
    a = np.asarray(prev_teacher_logits, dtype=np.float64)
    b = np.asarray(latest_student_logits, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"teacher logits {a.shape} and student logits {b.shape} differ")
    return a - b


def combined_logits(artifact: StageArtifact, x, upto=None):
    """Logits of S_upto = S0 + R_1 + ... + R_upto, summed left to right."""
    upto = artifact.n if upto is None else upto
    if not 0 <= upto <= artifact.n:
        raise IndexError(f"stage {upto} out of range 0..{artifact.n}")
    out = artifact.s0(x)
    for r in artifact.res_students[:upto]:
        out = out + r(x)
    return out[0] if np.ndim(x) == 1 else out


def energy_sample(logits):
    """Squared L2 norm of softmax(logits); rows are handled independently."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] == 0:
        raise DomainError("energy of an empty logits row")
    if not np.all(np.isfinite(z)):
        raise DomainError("non-finite logits")
    # sum(e^2) / sum(e)^2 equals sum(p^2); uniform rows give exactly K / K^2 = 1/K
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    out = np.sum(e * e, axis=-1) / np.sum(e, axis=-1) ** 2
    # rounding can step an ulp outside the exact range [1/K, 1]
    out = np.clip(out, 1.0 / z.shape[-1], 1.0)
    return float(out) if np.ndim(out) == 0 else out


def energy_dataset(logits_provider, X):
    """Mean per-sample energy; ``logits_provider`` is a callable or a logits matrix."""
    X = np.asarray(X)
    if X.shape[0] == 0:
        raise DomainError("energy of an empty dataset")
    logits = logits_provider(X) if callable(logits_provider) else logits_provider
    return float(np.mean(energy_sample(logits)))


def accuracy(logits, labels):
    # argmax breaks ties toward the lowest class index
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def mean_l2(a, b):
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def run_reskd(data: Dataset, config: DistillConfig, teacher=None) -> StageArtifact:
    """Full training pipeline; returns the artifact (teacher, S0, R_1..R_n, threshold).

    A validation split is held out from ``data`` and every network (teacher
    included, unless supplied) trains on the remainder.  The loop always
    trains at least R_1, then stops once Energy(S_i) exceeds
    ``energy_fraction * Energy(T)`` on the validation split, or at
    ``max_stages`` (artifact.termination == "stage_cap").
    """
    train_idx, val_idx = split_indices(len(data), config.val_fraction, config.seed)
    train, val = data.subset(train_idx), data.subset(val_idx)

    if teacher is None:
        log.info("training teacher %s", config.teacher_widths)
        teacher = train_teacher(train, config.teacher_widths, config)
    t_train, t_val = teacher(train.X), teacher(val.X)
    teacher_energy = energy_dataset(t_val, val.X)
    target = t_train

    log.info("training S0 %s", config.s0_widths)
    s0 = train_student(t_train, train, config.s0_widths, config.tau_s0, config,
                       stream=S0_STREAM, stage=0)
    s_train, s_val = s0(train.X), s0(val.X)
    records = [_record(0, s_train, s_val, train, val, t_val)]

    combined_ce = CeTargetMode(config.ce_target_mode) is CeTargetMode.COMBINED
    res_students = []
    termination = "stage_cap"
    latest = s_train
    for i in range(1, config.max_stages + 1):
        target = residual_teacher(target, latest)
        log.info("training R%d %s", i, config.res_widths[i - 1])
        r = train_student(target, train, config.res_widths[i - 1], config.tau_res, config,
                          stream=S0_STREAM + i, stage=i,
                          ce_offset=s_train if combined_ce else None)
        res_students.append(r)
        latest = r(train.X)
        s_train = s_train + latest
        s_val = s_val + r(val.X)
        records.append(_record(i, s_train, s_val, train, val, t_val))
        if records[-1].val_energy > config.energy_fraction * teacher_energy:
            termination = "energy"
            break

    th = config.th_scale * records[-1].val_energy
    return StageArtifact(teacher, s0, res_students, th, termination, records,
                         teacher_energy, val_idx)


def _record(stage, s_train, s_val, train, val, t_val):
    rec = StageRecord(
        stage=stage,
        val_energy=energy_dataset(s_val, val.X),
        train_accuracy=accuracy(s_train, train.y),
        val_accuracy=accuracy(s_val, val.y),
        mean_l2_to_teacher=mean_l2(s_val, t_val),
    )
    log.info("stage %d: %s", stage, rec)
    return rec
