"""End-to-end training, evaluation, and experiment orchestration.

Two trainers share the same backbone, optimizer, and schedule:

* ``train_uncertainty_guided`` — the full method: per sample, the
  uncertainty net estimates per-source reliability maps, calibration maps
  are derived, the quality gate routes the sample to the primary or
  auxiliary head (after a warm-up period with routing disabled), and the
  combined weighted objective is backpropagated jointly through the
  backbone, the routed head, and the uncertainty net.
* ``train_majority_vote`` — the fusion baseline: the same backbone trained
  with plain CE + Dice against the per-sample majority-vote mask, primary
  head only.

Everything is deterministic given TrainConfig.seed; the learning rate after
epoch e is exactly lr0 * decay**e; batch size is one sample (the quality
gate and the loss normalizations are per-sample).
"""

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .corpus import majority_vote
from .losses import (
    LossWeights,
    calibration_maps,
    plain_ce_dice,
    total_loss,
)
from .metrics import aggregate_reports, evaluate_masks
from .models import (
    SegBackboneConfig,
    SegmentationNet,
    UncertaintyNet,
    UncertaintyNetConfig,
)
from .quality import HIGH_QUALITY, LOW_QUALITY, route_sample


class TrainingDiverged(RuntimeError):
    """Raised on non-finite loss/gradient; carries the last good state."""

    def __init__(self, reason, last_good):
        super().__init__(reason)
        self.last_good = last_good


@dataclass
class TrainConfig:
    epochs: int = 24
    batch_size: int = 1
    lr0: float = 1e-3
    lr_decay: float = 0.96
    tau_a: float = 0.2
    tau_b: float = 0.2
    lam: float = 1.0
    warmup_fraction: float = 0.2
    seed: int = 0
    alpha_max: float = 1.0         # 0 disables the consistency term
    routing_enabled: bool = True   # False trains the primary head on everything

    def __post_init__(self):
        if self.lr0 <= 0.0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError(f"lr_decay must be in (0,1], got {self.lr_decay}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError(
                f"warmup_fraction must be in [0,1), got {self.warmup_fraction}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported (per-sample routing)")

    def warmup_epochs(self):
        return int(math.floor(self.warmup_fraction * self.epochs + 1e-9))


class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8, bias correction).

    Parameters update in place; per-parameter step counters advance only
    when that parameter is part of a step, so an unselected head's state is
    bitwise untouched.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {n: np.zeros_like(v) for n, v in params.items()}
        self.v = {n: np.zeros_like(v) for n, v in params.items()}
        self.t = {n: 0 for n in params}

    def step(self, grads, lr, names=None):
        names = list(self.params) if names is None else names
        for name in names:
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(
                    f"non-finite gradient in parameter {name!r}", None)
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            self.params[name] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class EpochStats:
    epoch: int
    mean_total: float
    mean_weighted_ce: float
    mean_weighted_dice: float
    mean_consistency: float
    low_quality_fraction: float
    alpha: float
    lr: float


@dataclass
class RunRecord:
    method: str
    seed: int
    config: dict
    epochs: list = field(default_factory=list)       # EpochStats
    routing_log: list = field(default_factory=list)  # (epoch, id, u_a, u_b, route)
    final_rows: list = field(default_factory=list)   # (sample_id, MetricReport)
    final: object = None                             # aggregate MetricReport

    def to_json_dict(self):
        return {
            "method": self.method,
            "seed": self.seed,
            "config": self.config,
            "epochs": [asdict(e) for e in self.epochs],
            "final": None if self.final is None else self.final.as_dict(),
            "final_rows": [
                {"sample_id": sid, **rep.as_dict()} for sid, rep in self.final_rows
            ],
        }


def write_routing_log(path, routing_log):
    """Per-epoch routing audit CSV: epoch, sample_id, u_a, u_b, route."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "sample_id", "u_a", "u_b", "route"])
        for epoch, sid, u_a, u_b, route in routing_log:
            writer.writerow([epoch, sid, repr(u_a), repr(u_b), route])


def _image_3d(sample):
    return sample.image.reshape(1, *sample.image.shape)


def _derived_seed(seed, salt):
    return int(np.random.SeedSequence((seed, 101, salt)).generate_state(1)[0])


def _check_finite_loss(value, state_fn):
    if not math.isfinite(value):
        raise TrainingDiverged(f"loss became non-finite ({value})", state_fn())


def evaluate(seg_net, samples):
    """Threshold the primary head at 0.5 and score against clean truth.

    Returns (per-sample rows, aggregate MetricReport). Inference touches
    only the backbone and the primary head.
    """
    rows = []
    for s in samples:
        prob = seg_net.predict(_image_3d(s))[0]
        pred = prob >= 0.5
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rows.append((s.id, evaluate_masks(pred, s.clean_mask.astype(bool))))
    return rows, aggregate_reports([r for _, r in rows])


def train_uncertainty_guided(corpus, cfg, backbone_cfg=None, unc_cfg=None,
                             num_sources=None):
    """Train the full uncertainty-guided model on the corpus' train split.

    num_sources restricts training to the first so-many annotation sources
    (annotation-count sweep); default uses all of them.
    """
    samples = corpus.split("train")
    if not samples:
        raise ValueError("corpus has no train split")
    m = num_sources or corpus.num_sources
    backbone_cfg = backbone_cfg or SegBackboneConfig()
    unc_cfg = unc_cfg or UncertaintyNetConfig(num_sources=m)
    if unc_cfg.num_sources != m:
        raise ValueError(
            f"uncertainty net expects {unc_cfg.num_sources} sources, "
            f"corpus provides {m}")
    seg = SegmentationNet(backbone_cfg, seed=_derived_seed(cfg.seed, 1))
    unc = UncertaintyNet(unc_cfg, seed=_derived_seed(cfg.seed, 2))
    weights = LossWeights(lam=cfg.lam, alpha_max=cfg.alpha_max)
    seg_opt = Adam(seg.params)
    unc_opt = Adam(unc.params)
    shuffle = np.random.default_rng(_derived_seed(cfg.seed, 3))

    record = RunRecord(method="uma", seed=cfg.seed, config=asdict(cfg))
    trunk = seg.trunk_param_names()
    head_names = {h: seg.head_param_names(h) for h in ("primary", "aux")}
    unc_names = list(unc.params)
    total_steps = cfg.epochs * len(samples)
    warmup = cfg.warmup_epochs()
    last_good = (seg.state(), unc.state())
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr0 * cfg.lr_decay ** epoch
        sums = np.zeros(4)
        low_count = 0
        alpha = 0.0
        for idx in shuffle.permutation(len(samples)):
            s = samples[idx]
            ann = s.annotations[:m].astype(np.float64)
            tape = ad.Tape()
            unc_leaves = unc.bind(tape)
            uset = unc.forward(tape, _image_3d(s), ann, unc_leaves)
            calib = calibration_maps(ann, uset.sigma)
            verdict = route_sample(calib, cfg.tau_a, cfg.tau_b)
            routing_active = cfg.routing_enabled and epoch >= warmup
            use_aux = routing_active and not verdict.is_high_quality
            route = LOW_QUALITY if use_aux else HIGH_QUALITY
            record.routing_log.append(
                (epoch, s.id, verdict.u_a, verdict.u_b, route))
            low_count += use_aux

            seg_leaves = seg.bind(tape)
            out = seg.forward(tape, _image_3d(s), seg_leaves)
            pred = out.auxiliary_prob if use_aux else out.primary_prob
            loss, parts = total_loss(pred, ann, uset.sigma, weights,
                                     step / total_steps)
            _check_finite_loss(parts.total, lambda: last_good)
            tape.backward(loss)

            head = "aux" if use_aux else "primary"
            seg_grads = {n: seg_leaves[n].grad for n in trunk + head_names[head]}
            unc_grads = {n: unc_leaves[n].grad for n in unc_names}
            try:
                seg_opt.step(seg_grads, lr, trunk + head_names[head])
                unc_opt.step(unc_grads, lr, unc_names)
            except TrainingDiverged as exc:
                raise TrainingDiverged(str(exc), last_good) from None
            sums += (parts.total, parts.weighted_ce, parts.weighted_dice,
                     parts.consistency)
            alpha = parts.alpha
            step += 1
        n = len(samples)
        record.epochs.append(EpochStats(
            epoch=epoch, mean_total=sums[0] / n, mean_weighted_ce=sums[1] / n,
            mean_weighted_dice=sums[2] / n, mean_consistency=sums[3] / n,
            low_quality_fraction=low_count / n, alpha=alpha, lr=lr))
        last_good = (seg.state(), unc.state())

    record.final_rows, record.final = evaluate(seg, corpus.split("test"))
    return seg, unc, record


def train_majority_vote(corpus, cfg, backbone_cfg=None):
    """Train the same backbone against per-sample majority-vote masks."""
    samples = corpus.split("train")
    if not samples:
        raise ValueError("corpus has no train split")
    backbone_cfg = backbone_cfg or SegBackboneConfig()
    seg = SegmentationNet(backbone_cfg, seed=_derived_seed(cfg.seed, 1))
    seg_opt = Adam(seg.params)
    shuffle = np.random.default_rng(_derived_seed(cfg.seed, 3))
    fused = {s.id: majority_vote(s.annotations).astype(np.float64)
             for s in samples}

    record = RunRecord(method="mv-baseline", seed=cfg.seed, config=asdict(cfg))
    update_names = seg.trunk_param_names() + seg.head_param_names("primary")
    last_good = (seg.state(), None)
    for epoch in range(cfg.epochs):
        lr = cfg.lr0 * cfg.lr_decay ** epoch
        total = 0.0
        for idx in shuffle.permutation(len(samples)):
            s = samples[idx]
            tape = ad.Tape()
            seg_leaves = seg.bind(tape)
            out = seg.forward(tape, _image_3d(s), seg_leaves)
            loss = plain_ce_dice(out.primary_prob, fused[s.id], lam=cfg.lam)
            _check_finite_loss(loss.item(), lambda: last_good)
            tape.backward(loss)
            grads = {n: seg_leaves[n].grad for n in update_names}
            try:
                seg_opt.step(grads, lr, update_names)
            except TrainingDiverged as exc:
                raise TrainingDiverged(str(exc), last_good) from None
            total += loss.item()
        n = len(samples)
        record.epochs.append(EpochStats(
            epoch=epoch, mean_total=total / n, mean_weighted_ce=float("nan"),
            mean_weighted_dice=float("nan"), mean_consistency=float("nan"),
            low_quality_fraction=0.0, alpha=0.0, lr=lr))
        last_good = (seg.state(), None)

    record.final_rows, record.final = evaluate(seg, corpus.split("test"))
    return seg, record


def subset_bitmask(count, total):
    return "".join("1" if i < count else "0" for i in range(total))


def run_annotation_count_sweep(corpus, counts, cfg, backbone_cfg=None):
    """Train + evaluate once per source count (prefix subsets of sources).

    Returns one row dict per count with the subset bitmask and the final
    aggregate metrics.
    """
    rows = []
    for count in counts:
        if not 2 <= count <= corpus.num_sources:
            raise ValueError(
                f"count {count} outside [2, {corpus.num_sources}]")
        _, _, record = train_uncertainty_guided(
            corpus, cfg, backbone_cfg=backbone_cfg, num_sources=count)
        rows.append({
            "count": count,
            "bitmask": subset_bitmask(count, corpus.num_sources),
            **record.final.as_dict(),
        })
    return rows
