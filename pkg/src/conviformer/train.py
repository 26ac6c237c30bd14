"""Training loop, AdamW, metrics and the resolution experiment driver."""

from __future__ import annotations

import logging
import math
from importlib import resources
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import yaml

from . import ops
from .data import SynthDataset, SynthSpec, generate, to_input, triplet_batches
from .errors import ConfigError, NonFiniteError
from .losses import LOSS_MODES, MINING, LossWeights, PhyloMatrix, cross_entropy, loss_terms
from .model import Conviformer, ConviformerConfig, patch_count
from .rng import stream
from .tensor import GradTape, Tensor, backward, set_finite_check

log = logging.getLogger(__name__)

NO_DECAY = ("cls_token",)


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class Stage:
    loss: str
    epochs: int
    level: Optional[str] = None

    def __post_init__(self):
        if self.loss not in LOSS_MODES:
            raise ConfigError(f"stage loss must be one of {LOSS_MODES}, got {self.loss!r}")
        if self.epochs < 1:
            raise ConfigError(f"stage epochs must be >= 1, got {self.epochs}")


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings. ``stages`` empty means one stage of ``loss`` for ``epochs``."""

    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_epochs: int = 0
    schedule: str = "cosine"
    min_lr_ratio: float = 0.0
    seed: int = 0
    loss: str = "ce"
    weights: LossWeights = field(default_factory=LossWeights)
    level: Optional[str] = None
    mining: str = "random"
    input_res: Optional[int] = None
    dropout: float = 0.0
    stages: tuple[Stage, ...] = ()
    eval_every: int = 1
    target_top1: Optional[float] = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights.from_dict(self.weights))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "stages", tuple(s if isinstance(s, Stage) else Stage(**s) for s in self.stages))
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("learning_rate and weight_decay must be >= 0, eps > 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")
        if not 0 <= self.min_lr_ratio <= 1 or self.warmup_epochs < 0:
            raise ConfigError("min_lr_ratio must be in [0, 1] and warmup_epochs >= 0")
        if self.loss not in LOSS_MODES:
            raise ConfigError(f"loss must be one of {LOSS_MODES}, got {self.loss!r}")
        if self.mining not in MINING:
            raise ConfigError(f"mining must be one of {MINING}, got {self.mining!r}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.input_res is not None and self.input_res < 1:
            raise ConfigError("input_res must be positive")
        if self.target_top1 is not None and not 0 < self.target_top1 <= 1:
            raise ConfigError(f"target_top1 must be in (0, 1], got {self.target_top1}")
        if self.target_top1 is not None and not self.eval_every:
            raise ConfigError("target_top1 needs eval_every > 0")

    @property
    def plan(self) -> tuple[Stage, ...]:
        return self.stages or (Stage(self.loss, self.epochs, self.level),)

    @property
    def total_epochs(self) -> int:
        return sum(s.epochs for s in self.plan)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["stages"] = [asdict(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown training config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        data = yaml.safe_load(Path(path).read_text()) or {}
        return cls.from_dict(data.get("train", data))


# ---------------------------------------------------------------- optimiser


def lr_at(step: int, total_steps: int, base: float, warmup_steps: int = 0, schedule: str = "cosine",
          min_ratio: float = 0.0) -> float:
    """Linear warmup to ``base``, then cosine decay to ``base * min_ratio`` (or constant)."""
    if warmup_steps and step < warmup_steps:
        return base * (step + 1) / warmup_steps
    if schedule == "constant":
        return base
    span = max(1, total_steps - warmup_steps)
    frac = min(1.0, (step - warmup_steps) / span)
    return base * (min_ratio + (1 - min_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))


class AdamW:
    """Adam with decoupled weight decay.

    Per step ``t`` with gradient ``g``::

        p <- p * (1 - lr * wd)
        m <- b1 m + (1 - b1) g          v <- b2 v + (1 - b2) g^2
        p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)

    Parameters whose name is in ``no_decay`` or which have fewer than two
    dimensions skip the decay factor. Parameters with ``grad is None`` are
    left untouched and do not advance their step count.
    """

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0,
                 no_decay: Sequence[str] = NO_DECAY):
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def decays(self, name: str, p: Tensor) -> bool:
        return self.weight_decay > 0 and p.ndim >= 2 and name not in self.no_decay

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        for name, p in params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NonFiniteError(f"gradient of {name} is not finite")
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            t = self.t.get(name, 0) + 1
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            else:
                v = self.v[name]
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * (g * g)
            if self.decays(name, p):
                p.data = p.data * p.data.dtype.type(1 - lr * self.weight_decay)
            mhat = m / (1 - self.b1 ** t)
            vhat = v / (1 - self.b2 ** t)
            p.data = (p.data - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype, copy=False)
            self.m[name], self.v[name], self.t[name] = m, v, t


def optimizer_step(params: dict[str, Tensor], opt: AdamW, lr: float) -> dict[str, Tensor]:
    """Apply one update from the ``.grad`` fields in place and return ``params``."""
    opt.step(params, lr)
    return params


# ---------------------------------------------------------------- metrics


@dataclass
class EvalReport:
    top1: float
    macro_f1: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    confusion: np.ndarray
    loss: float = float("nan")
    n: int = 0

    def summary(self) -> dict:
        return {"top1": self.top1, "macro_f1": self.macro_f1, "loss": self.loss, "n": self.n}


def classification_metrics(y_true, y_pred, n_classes: int) -> EvalReport:
    """Top-1 and macro-F1 over all ``n_classes`` classes.

    Precision of a never-predicted class and recall of a class absent from the
    truth are 0, so a class absent from both contributes F1 = 0 to the mean.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ConfigError("cannot evaluate an empty dataset")
    if y_true.shape != y_pred.shape:
        raise ConfigError("prediction and truth lengths differ")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    tp = np.diag(cm).astype(np.float64)
    pred_n = cm.sum(axis=0)
    true_n = cm.sum(axis=1)
    precision = np.divide(tp, pred_n, out=np.zeros(n_classes), where=pred_n > 0)
    recall = np.divide(tp, true_n, out=np.zeros(n_classes), where=true_n > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    return EvalReport(top1=float(tp.sum() / y_true.size), macro_f1=float(f1.mean()), precision=precision,
                      recall=recall, f1=f1, confusion=cm, n=int(y_true.size))


def prepare_inputs(model: Conviformer, dataset: SynthDataset, input_res: Optional[int] = None) -> np.ndarray:
    """Area-downsample the dataset to the model resolution and normalise to NCHW."""
    res = input_res or model.input_res
    if res != model.input_res:
        raise ConfigError(f"input_res {res} does not match the model's {model.input_res}")
    S = dataset.img_size
    if S != res:
        if res > S or S % res:
            raise ConfigError(f"cannot bring {S}px images to {res}px by integer downsampling")
        dataset = dataset.downsample(S // res)
    return to_input(dataset.images, dtype=model.dtype)


def evaluate(model: Conviformer, dataset: SynthDataset, batch_size: int = 64, level: str = "taxon",
             inputs: Optional[np.ndarray] = None) -> EvalReport:
    """Top-1, macro-F1 and mean CE of the ``level`` head. Does not touch the model."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate an empty dataset")
    head = {"taxon": "label_tax", "genus": "label_gen", "family": "label_fam"}[level]
    x = prepare_inputs(model, dataset) if inputs is None else inputs
    y = dataset.labels.level(level)
    preds, loss_sum = [], 0.0
    for i in range(0, len(dataset), batch_size):
        logits = model(x[i:i + batch_size])[head]
        preds.append(logits.data.argmax(axis=1))
        loss_sum += float(cross_entropy(logits, y[i:i + batch_size]).data) * logits.shape[0]
    n_classes = {"taxon": model.cfg.n_taxa, "genus": model.cfg.n_genus, "family": model.cfg.n_family}[level]
    report = classification_metrics(y, np.concatenate(preds), n_classes)
    report.loss = loss_sum / len(dataset)
    return report


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: Conviformer
    history: list[dict]
    stats: Counter


def _batches(dataset: SynthDataset, cfg: TrainConfig, stage: Stage, epoch: int) -> list[np.ndarray]:
    if stage.loss.endswith("trip"):
        level = stage.level or ("taxon" if stage.loss == "ce+trip" else "genus")
        return list(triplet_batches(dataset.labels, level, cfg.batch_size, cfg.seed, epoch=epoch))
    perm = stream(cfg.seed, "batches", epoch).permutation(len(dataset))
    return [perm[i:i + cfg.batch_size] for i in range(0, len(perm), cfg.batch_size)]


def _train_step(model, x, labels, stage, cfg, phylo, stats, rng_drop, rng_mine):
    prev = set_finite_check(False)
    try:
        with GradTape():
            out = model(x, rng=rng_drop if cfg.dropout > 0 else None)
            terms = loss_terms(stage.loss, out, labels, cfg.weights, phylo=phylo, level=stage.level,
                               rng=rng_mine, stats=stats, strategy=cfg.mining)
            total = None
            for t in terms.values():
                total = t if total is None else ops.add(total, t)
    finally:
        set_finite_check(prev)
    bad = [k for k, t in terms.items() if not np.isfinite(t.data).all()]
    if bad:
        return None, terms, bad
    backward(total)
    return total, terms, []


def train(model: Conviformer, dataset: SynthDataset, cfg: TrainConfig, eval_data: Optional[SynthDataset] = None,
          phylo: Optional[PhyloMatrix] = None, callback: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Run every stage of ``cfg.plan`` in order with one optimiser and one LR schedule.

    History holds one record per epoch: stage, loss mode, lr, mean total loss,
    mean per-term losses, and train/eval metrics every ``eval_every`` epochs.
    With ``target_top1`` set, training stops after the first evaluated epoch
    whose train accuracy reaches it.
    Raises NonFiniteError naming epoch, batch and loss term on a NaN loss.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    if cfg.input_res is not None and cfg.input_res != model.input_res:
        raise ConfigError(f"config input_res {cfg.input_res} does not match the model's {model.input_res}")
    if any(s.loss == "hier+phylo" for s in cfg.plan) and phylo is None:
        raise ConfigError("a hier+phylo stage needs a phylo matrix")
    model.cfg = model.cfg.replace(dropout=cfg.dropout)
    x_all = prepare_inputs(model, dataset)
    x_eval = prepare_inputs(model, eval_data) if eval_data is not None else None
    opt = AdamW(cfg.betas, cfg.eps, cfg.weight_decay)
    steps_per_epoch = [len(_batches(dataset, cfg, s, 0)) for s in cfg.plan]
    total_steps = sum(n * s.epochs for n, s in zip(steps_per_epoch, cfg.plan))
    warmup = cfg.warmup_epochs * steps_per_epoch[0]
    stats: Counter = Counter()
    history: list[dict] = []
    step = epoch = 0
    for si, stage in enumerate(cfg.plan):
        for _ in range(stage.epochs):
            sums: Counter = Counter()
            seen = 0
            lr = cfg.learning_rate
            for bi, idx in enumerate(_batches(dataset, cfg, stage, epoch)):
                lr = lr_at(step, total_steps, cfg.learning_rate, warmup, cfg.schedule, cfg.min_lr_ratio)
                model.zero_grad()
                total, terms, bad = _train_step(
                    model, x_all[idx], dataset.labels.subset(idx), stage, cfg, phylo, stats,
                    stream(cfg.seed, "dropout", epoch, bi), stream(cfg.seed, "mining", epoch, bi))
                if bad:
                    raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {bi}: term {bad[0]!r} "
                                         f"(all non-finite terms: {bad})")
                try:
                    opt.step(model.params, lr)
                except NonFiniteError as exc:
                    raise NonFiniteError(f"epoch {epoch}, batch {bi}: {exc}") from exc
                n = len(idx)
                seen += n
                sums["loss"] += float(total.data) * n
                for k, t in terms.items():
                    sums[k] += float(t.data) * n
                step += 1
            rec = {"epoch": epoch, "stage": si, "loss_mode": stage.loss, "lr": lr}
            rec.update({k: v / seen for k, v in sums.items()})
            if cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.total_epochs):
                tr = evaluate(model, dataset, inputs=x_all)
                rec.update(train_top1=tr.top1, train_macro_f1=tr.macro_f1)
                if eval_data is not None:
                    ev = evaluate(model, eval_data, inputs=x_eval)
                    rec.update(eval_top1=ev.top1, eval_macro_f1=ev.macro_f1, eval_loss=ev.loss)
            history.append(rec)
            log.info("epoch %d %s", epoch, rec)
            if callback is not None:
                callback(rec)
            epoch += 1
            if cfg.target_top1 is not None and rec.get("train_top1", 0.0) >= cfg.target_top1:
                return TrainResult(model, history, stats)
    return TrainResult(model, history, stats)


# ---------------------------------------------------------------- experiments


PRESETS = ("toy", "resolution")


def preset(name: str) -> dict:
    """Committed experiment settings: ``{"data": SynthSpec, "model": ConviformerConfig, "train": TrainConfig}``."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")
    return load_experiment(resources.files("conviformer") / "configs" / f"{name}.yaml")


def load_experiment(path) -> dict:
    """Read a YAML file with optional ``data``, ``model``, ``train`` and ``resolutions``/``seeds`` sections."""
    raw = yaml.safe_load(Path(path).read_text()) or {}
    unknown = set(raw) - {"data", "model", "train", "resolutions", "seeds"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    return {
        "data": SynthSpec.from_dict(raw.get("data", {})),
        "model": ConviformerConfig.from_dict({**ConviformerConfig.tiny().to_dict(), **raw.get("model", {})}),
        "train": TrainConfig.from_dict(raw.get("train", {})),
        "resolutions": list(raw.get("resolutions", [])),
        "seeds": list(raw.get("seeds", [0])),
    }


def gradient_suite(model_cfg: ConviformerConfig, modes: Sequence[str] = LOSS_MODES, input_res: int = 64,
                   probes: int = 3, seed: int = 0) -> dict[str, float]:
    """Largest finite-difference relative error over all parameters, per loss mode.

    Runs in float64 with dropout off on a fixed six-sample batch whose labels
    admit triplets at the taxon and genus levels.
    """
    from .data import phylo_matrix
    from .gradcheck import check_gradients, max_rel_err
    from .labels import Hierarchy
    from .losses import combined_loss

    cfg = model_cfg.replace(dtype="float64", dropout=0.0, seed=seed)
    hierarchy = Hierarchy.balanced(cfg.n_taxa, cfg.n_genus, cfg.n_family)
    taxa = np.array([0, 0, 1, cfg.n_taxa - 1, cfg.n_taxa - 1, cfg.n_taxa // 2])
    labels = hierarchy.labels(taxa)
    phylo = phylo_matrix(hierarchy, seed) if cfg.n_genus > 1 else None
    x = stream(seed, "gradcheck-input").standard_normal((taxa.size, 3, input_res, input_res))
    out = {}
    for mode in modes:
        model = Conviformer(cfg, input_res)

        def loss():
            return combined_loss(mode, model(x), labels, LossWeights(), phylo=phylo, hierarchy=hierarchy,
                                 rng=stream(seed, "gradcheck-mining"))

        out[mode] = max_rel_err(check_gradients(loss, model.params, probes=probes, seed=seed))
    return out


@dataclass
class ResolutionRun:
    resolution: int
    t_p: int
    t_p_convit: int
    attention_proxy: int
    accuracies: list[float]
    macro_f1: list[float]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies))


@dataclass
class ResolutionReport:
    runs: list[ResolutionRun]
    seeds: list[int]

    def accuracy(self, resolution: int) -> list[float]:
        return next(r.accuracies for r in self.runs if r.resolution == resolution)

    def to_dict(self) -> dict:
        return {"seeds": self.seeds, "runs": [asdict(r) | {"mean_accuracy": r.mean_accuracy} for r in self.runs]}


def resolution_experiment(spec: SynthSpec, resolutions: Sequence[int], model_cfg: ConviformerConfig,
                          train_cfg: TrainConfig, seeds: Sequence[int] = (0,), test_fraction: float = 0.3,
                          callback: Optional[Callable[[dict], None]] = None) -> ResolutionReport:
    """Train identical models at each resolution and record test accuracy per seed.

    The dataset is generated once at ``spec.img_size``; lower resolutions are
    area-downsampled copies. ``model_cfg.base_res`` should be the lowest
    resolution, so Conviformer keeps the token count fixed while the
    front-end sees more pixels.
    """
    resolutions = sorted(int(r) for r in resolutions)
    if len(resolutions) < 2:
        raise ConfigError("resolution_experiment needs at least two resolutions")
    data = generate(spec)
    runs = []
    for res in resolutions:
        grid_cfg = model_cfg.replace(mode="convit")
        t_p = patch_count(res, res, model_cfg, "conviformer")
        run = ResolutionRun(res, t_p, patch_count(res, res, grid_cfg, "convit"), t_p * t_p, [], [])
        for seed in seeds:
            train_set, test_set = data.split(test_fraction, seed=seed)
            model = Conviformer(model_cfg.replace(seed=seed), res)
            result = train(model, train_set, replace(train_cfg, seed=seed, eval_every=0, target_top1=None))
            report = evaluate(result.model, test_set)
            run.accuracies.append(report.top1)
            run.macro_f1.append(report.macro_f1)
            if callback is not None:
                callback({"resolution": res, "seed": seed, "t_p": t_p, "test_top1": report.top1,
                          "test_macro_f1": report.macro_f1})
        runs.append(run)
    return ResolutionReport(runs, list(seeds))
