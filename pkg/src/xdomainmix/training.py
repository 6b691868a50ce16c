"""Two-phase training with ERM, XDomainMix, MixStyle and DSU.

Every run derives four independent streams from its seed (in this order):
parameter init, batch sampling, augmentation draws, evaluation draws. Methods
that draw nothing (ERM, warm-up steps) therefore see exactly the same batches
as methods that do.

Losses per step:

* class objective: cross-entropy on the original features during warm-up and
  for ERM; afterwards the mean of the original and augmented cross-entropies;
* domain objective: cross-entropy of the domain head on *detached* original
  features, so it never shapes the extractor. With
  ``domain_head_on_augmented`` the augmented rows add a soft-label binary
  cross-entropy term.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import augmentation as aug
from . import metrics, models
from .data import DatasetBundle, make_batches
from .decomposition import compute_masks, score_features
from .optim import AdamState, optimizer_step

logger = logging.getLogger(__name__)

__all__ = [
    "Method", "TrainConfig", "EvalConfig", "TrainResult", "tau_d_level", "erm_loss",
    "domain_loss", "aug_loss", "optimizer_step", "AdamState", "train", "augment_features",
    "build_step", "train_step", "StepGraph", "balanced_chunks",
]


class Method(str, enum.Enum):
    ERM = "erm"
    XDOMAINMIX = "xdomainmix"
    MIXSTYLE = "mixstyle"
    DSU = "dsu"


@dataclass(frozen=True)
class TrainConfig:
    method: Method = Method.XDOMAINMIX
    warmup_steps: int = 500
    total_steps: int = 3000
    n_tau: int = 100
    p_discard: float = aug.P_DISCARD
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 30
    pairing_strategy: aug.PairingStrategy = aug.PairingStrategy.DIFF_CLASS_DIFF_DOMAIN
    domain_head_on_augmented: bool = False
    mix_cd: bool = True
    mix_ncd: bool = True
    discard_cd: bool = True
    seed: int = 0
    # fixed domain quantile level instead of the cyclic schedule
    tau_d_override: Optional[float] = None
    mixstyle_prob: float = aug.MIXSTYLE_PROB
    mixstyle_alpha: float = aug.MIXSTYLE_ALPHA
    dsu_prob: float = aug.DSU_PROB
    dsu_eps: float = aug.STAT_EPS

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "pairing_strategy", aug.PairingStrategy(self.pairing_strategy))
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if self.n_tau < 1:
            raise ValueError("n_tau must be >= 1")
        if not 0.0 <= self.p_discard <= 1.0:
            raise ValueError("p_discard must lie in [0, 1]")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")

    @property
    def effective_p_discard(self) -> float:
        return self.p_discard if self.discard_cd else 0.0


@dataclass(frozen=True)
class EvalConfig:
    eval_interval: int = 100
    mmd_points: int = 480
    bandwidth: Optional[float] = None


@dataclass
class TrainResult:
    params: models.ModelParams  # checkpoint with the best pooled validation accuracy
    final_params: models.ModelParams
    log: list
    selected: metrics.MetricsRecord
    losses: list = field(default_factory=list)  # (class loss, domain loss) per step


def tau_d_level(step_after_warmup: int, n: int) -> float:
    """Cyclic domain quantile: 0.9 down to 0.5 in 0.1 steps, each held for n steps."""
    if step_after_warmup < 0 or n < 1:
        raise ValueError("need step >= 0 and n >= 1")
    return 0.9 - 0.1 * ((step_after_warmup % (5 * n)) // n)


def erm_loss(class_logits: ad.Tensor, labels) -> ad.Tensor:
    return ad.softmax_cross_entropy(class_logits, labels)


def domain_loss(domain_logits: ad.Tensor, domain_labels, aug_logits: Optional[ad.Tensor] = None,
                soft_labels=None) -> ad.Tensor:
    """Cross-entropy on original features; optional soft-label BCE on augmented ones."""
    if domain_logits.shape[1] < 2:
        raise ValueError("domain classification needs at least 2 training domains")
    loss = ad.softmax_cross_entropy(domain_logits, domain_labels)
    if aug_logits is None:
        return loss
    soft = ad.binary_cross_entropy_with_logits(aug_logits, soft_labels)
    return ad.scale(ad.add(loss, soft), 0.5)


def aug_loss(class_logits_orig: ad.Tensor, class_logits_aug: ad.Tensor, labels) -> ad.Tensor:
    if class_logits_orig.shape != class_logits_aug.shape:
        raise ad.ShapeError("original and augmented logits differ in shape")
    return ad.scale(ad.add(ad.softmax_cross_entropy(class_logits_orig, labels),
                           ad.softmax_cross_entropy(class_logits_aug, labels)), 0.5)


def _streams(seed: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def _domain_level(config: TrainConfig, step: int) -> float:
    if config.tau_d_override is not None:
        return config.tau_d_override
    return tau_d_level(step - config.warmup_steps, config.n_tau)


def augment_features(method, params: models.ModelParams, z, classes, domains, rng,
                     config: TrainConfig, q_domain: float = 0.9) -> np.ndarray:
    """Augment one batch of extracted features outside the graph."""
    method = Method(method)
    z = np.asarray(z, dtype=np.float64)
    if method is Method.ERM:
        return z.copy()
    if method is Method.MIXSTYLE:
        return aug.mixstyle(z, config.mixstyle_prob, config.mixstyle_alpha, rng)
    if method is Method.DSU:
        return aug.dsu(z, config.dsu_prob, config.dsu_eps, rng)
    scores = score_features(params, z, classes, domains)
    masks = compute_masks(scores.class_scores, scores.domain_scores, q_domain)
    plan = aug.draw_plan(classes, domains, rng, strategy=config.pairing_strategy,
                         p_discard=config.effective_p_discard, mix_cd=config.mix_cd,
                         mix_ncd=config.mix_ncd)
    return aug.xdomainmix_array(z, masks, plan)


def balanced_chunks(domains, per_domain: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Split row indices into batches holding ``per_domain`` rows of every domain."""
    domains = np.asarray(domains)
    pools = [rng.permutation(np.flatnonzero(domains == d)) for d in np.unique(domains)]
    count = min(len(p) for p in pools) // per_domain
    return [np.concatenate([p[b * per_domain:(b + 1) * per_domain] for p in pools]) for b in range(count)]


class _Evaluator:
    """Fixed evaluation views of a bundle; produces one MetricsRecord per call."""

    def __init__(self, bundle: DatasetBundle, config: TrainConfig, eval_config: EvalConfig,
                 rng: np.random.Generator):
        self.bundle = bundle
        self.config = config
        self.eval_config = eval_config
        self.train = bundle.select("train")
        self.val = bundle.select("val")
        self.test = bundle.select("test")
        self.seed_seq = int(rng.integers(2**63 - 1))
        per = config.batch_size // bundle.num_domains
        chunks = balanced_chunks(self.val[2], per, rng) if len(self.val[2]) else []
        keep = max(1, eval_config.mmd_points // config.batch_size)
        self.probe = np.concatenate(chunks[:keep]) if chunks else np.array([], dtype=np.int64)

    def _acc(self, params, part) -> float:
        x, y, _ = part
        if len(y) == 0:
            return 0.0
        z = models.forward_array(params.extractor, x)
        return metrics.accuracy(models.forward_array(params.class_head, z), y)

    def mmd_aug(self, params, step: int) -> float:
        cfg = self.config
        if cfg.method is Method.ERM or len(self.probe) < 2:
            return 0.0
        x, y, d = (a[self.probe] for a in self.val)
        z = models.forward_array(params.extractor, x)
        rng = np.random.default_rng([self.seed_seq, step])
        q = _domain_level(cfg, max(step, cfg.warmup_steps))
        bs = cfg.batch_size
        out = np.vstack([
            augment_features(cfg.method, params, z[s:s + bs], y[s:s + bs], d[s:s + bs], rng, cfg, q)
            for s in range(0, len(z), bs)
        ])
        bw = self.eval_config.bandwidth
        if bw is None:
            bw = metrics.median_heuristic(z, z)
            if bw == 0.0:
                return 0.0
        return metrics.mmd(out, z, bw)

    def __call__(self, params, step: int) -> metrics.MetricsRecord:
        xv, yv, dv = self.val
        zv = models.forward_array(params.extractor, xv)
        logits = models.forward_array(params.class_head, zv)
        risks = metrics.domain_risks(logits, yv, dv)
        return metrics.MetricsRecord(
            seed=self.config.seed,
            method=self.config.method.value,
            step=step,
            train_acc=self._acc(params, self.train),
            val_acc=metrics.accuracy(logits, yv),
            test_acc=self._acc(params, self.test),
            cov_distance=metrics.covariance_distance(zv, yv, dv),
            risk_variance=metrics.risk_variance(risks) if len(risks) > 1 else 0.0,
            mmd_aug=self.mmd_aug(params, step),
        )


@dataclass
class StepGraph:
    """One step's bound parameters and the two loss tensors, before backward."""

    params: models.ModelParams
    class_loss: ad.Tensor
    domain_loss: ad.Tensor
    plan: Optional[aug.AugmentationPlan] = None


def build_step(params: models.ModelParams, batch, config: TrainConfig, step: int,
               rng: np.random.Generator, num_domains: int) -> StepGraph:
    graph = ad.Graph()
    p = params.bind(graph)
    z = models.extract(p, graph.constant(batch.x))
    logits = models.classify(p, z)
    d_logits = models.domain_classify(p, graph.constant(z.value))

    phase2 = step >= config.warmup_steps and config.method is not Method.ERM
    aug_d_logits = soft = plan = None
    if not phase2:
        class_loss = erm_loss(logits, batch.y)
    elif config.method is Method.XDOMAINMIX:
        scores = score_features(params, z.value, batch.y, batch.domain)
        masks = compute_masks(scores.class_scores, scores.domain_scores, _domain_level(config, step))
        plan = aug.draw_plan(batch.y, batch.domain, rng, strategy=config.pairing_strategy,
                             p_discard=config.effective_p_discard, mix_cd=config.mix_cd,
                             mix_ncd=config.mix_ncd)
        z_aug = aug.xdomainmix_tensor(z, masks, plan)
        class_loss = aug_loss(logits, models.classify(p, z_aug), batch.y)
        if config.domain_head_on_augmented:
            aug_d_logits = models.domain_classify(p, graph.constant(z_aug.value))
            soft = aug.soft_domain_labels(plan, batch.domain, num_domains)
    else:
        if config.method is Method.MIXSTYLE:
            affine = aug.draw_mixstyle(z.value, rng, config.mixstyle_prob, config.mixstyle_alpha)
        else:
            affine = aug.draw_dsu(z.value, rng, config.dsu_prob, config.dsu_eps)
        z_aug = z if affine is None else affine.apply_tensor(z)
        class_loss = aug_loss(logits, models.classify(p, z_aug), batch.y)

    dom_loss = domain_loss(d_logits, batch.domain, aug_d_logits, soft)
    return StepGraph(p, class_loss, dom_loss, plan)


def train_step(params: models.ModelParams, batch, config: TrainConfig, step: int,
               rng: np.random.Generator, num_domains: int):
    """Gradients by parameter name, class loss and domain loss for one step."""
    sg = build_step(params, batch, config, step, rng, num_domains)
    grads = ad.backward(ad.add(sg.class_loss, sg.domain_loss))
    named = {k: grads[t] for k, t in sg.params.named().items()}
    return named, float(sg.class_loss.value), float(sg.domain_loss.value)


def train(config: TrainConfig, data: DatasetBundle, arch: Optional[models.ArchConfig] = None,
          eval_config: EvalConfig = EvalConfig()) -> TrainResult:
    if config.method is Method.XDOMAINMIX and data.num_domains < 2:
        raise ValueError("XDomainMix needs at least 2 training domains")
    if arch is None:
        arch = models.ArchConfig(data.input_dim, data.num_classes, data.num_domains, init_seed=config.seed)
    if (arch.input_dim, arch.num_classes, arch.num_domains) != (data.input_dim, data.num_classes, data.num_domains):
        raise ValueError("architecture does not match the dataset")
    init_rng, batch_rng, aug_rng, eval_rng = _streams(config.seed)
    params = models.init(arch, init_rng)
    evaluator = _Evaluator(data, config, eval_config, eval_rng)
    batches = make_batches(data, config.batch_size, batch_rng)
    state = AdamState()
    log, losses = [], []
    best: Optional[tuple[metrics.MetricsRecord, models.ModelParams]] = None
    named = params.named()
    for step in range(config.total_steps):
        grads, cl, dl = train_step(params, next(batches), config, step, aug_rng, data.num_domains)
        losses.append((cl, dl))
        named = optimizer_step(named, grads, state, config.learning_rate, config.weight_decay)
        params = models.ModelParams.from_named(named, arch)
        done = step + 1
        if done % eval_config.eval_interval == 0 or done == config.total_steps:
            record = evaluator(params, done)
            log.append(record)
            logger.info("step %d val %.4f test %.4f", done, record.val_acc, record.test_acc)
            if best is None or record.val_acc > best[0].val_acc:
                best = (record, params)
    if best is None:
        record = evaluator(params, 0)
        log.append(record)
        best = (record, params)
    return TrainResult(params=best[1], final_params=params, log=log, selected=best[0], losses=losses)
