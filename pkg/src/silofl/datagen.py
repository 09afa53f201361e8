"""Teacher-ensemble DP generator training and budgeted synthesis.

Each client trains one small generator per class it owns. A class's secret
samples are split into disjoint shards, one per teacher discriminator; every
training round the teachers take a discrimination step against the current
generator output, then each teacher's per-sample realness gradient is top-k
sign-compressed, noisily summed and thresholded into a consensus direction
that shifts the generator's targets. Only those noisy votes reach the
generator, so the privacy cost is one Gaussian-mechanism charge per round
(sensitivity 2*sqrt(k)), booked pre-charge: a round runs only if the budget
survives it. Sampling from a trained generator is post-processing and costs
nothing.

Convention used throughout: G is the student generator, D the teacher
discriminators; the discriminator loss is -log D(real) - log(1 - D(G(z))),
the generator regresses onto the frozen target G(z) + guide_lr * votes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import nn, privacy
from .privacy import BudgetExhaustedError
from .util import stable_hash


@dataclass(frozen=True)
class DpGanConfig:
    n_teachers: int = 5
    top_k: int = 16
    noise_sigma: float = 5000.0
    vote_threshold: float = 0.7
    guide_lr: float = 0.05
    epsilon_target: float = 1.0
    delta: float = 1e-5
    latent_dim: int = 8
    max_steps_per_class: int = 40
    teacher_hidden: int = 16
    generator_hidden: int = 16
    batch_size: int = 8
    teacher_rounds: int = 1
    teacher_lr: float = 0.05
    student_lr: float = 0.05
    clip_norm: float = 1.0
    output_center: float = 0.5
    dp_enabled: bool = True
    stochastic_sign: bool = True
    optimizer: str = "adam"

    def __post_init__(self):
        if self.n_teachers < 2:
            raise ValueError("need at least two teachers")
        if not 0.0 < self.vote_threshold <= 1.0:
            raise ValueError("vote_threshold must lie in (0, 1]")
        if self.dp_enabled and self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be positive when DP is enabled")
        if self.dp_enabled and self.epsilon_target <= 0:
            raise ValueError("epsilon_target must be positive")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.latent_dim < 1 or self.batch_size < 1 or self.max_steps_per_class < 0:
            raise ValueError("latent_dim/batch_size must be >= 1, step cap >= 0")
        if self.teacher_rounds < 1:
            raise ValueError("teacher_rounds must be >= 1")

    def hash(self) -> str:
        return stable_hash(self.__dict__)


def teacher_spec(sample_dim: int, hidden: int) -> nn.NetworkSpec:
    """Discriminator emitting one pre-sigmoid realness logit."""
    return nn.mlp((sample_dim, hidden, 1), classifier=False)


def generator_spec(latent_dim: int, hidden: int, sample_dim: int) -> nn.NetworkSpec:
    return nn.mlp((latent_dim, hidden, sample_dim), classifier=False)


def init_generator_params(
    spec: nn.NetworkSpec, rng: np.random.Generator, center: float
) -> nn.ParamSet:
    """Standard init with the final bias set to a data-independent constant.

    Starting generator outputs at the middle of the [0, 1] sample cube keeps
    the first teacher votes on-manifold; the constant never sees any data, so
    it costs no budget.
    """
    params = nn.init_params(spec, rng)
    entries = {k: v for k, v in params.items()}
    last = sorted(entries)[-1]
    w, b = entries[last]
    if b is not None:
        entries[last] = (w, np.full_like(b, center))
    return nn.ParamSet(entries)


@dataclass
class TeacherEnsemble:
    """One discriminator per disjoint shard of a class's secret samples."""

    spec: nn.NetworkSpec
    params: list[nn.ParamSet]
    opt_states: list[nn.OptimState]
    shards: list[np.ndarray]

    @property
    def n_teachers(self) -> int:
        return len(self.params)


def partition_disjoint(samples: np.ndarray, n_shards: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle rows into n_shards disjoint shards whose sizes differ by <= 1."""
    n = samples.shape[0]
    if n < n_shards:
        raise ValueError(f"cannot split {n} samples into {n_shards} shards")
    perm = rng.permutation(n)
    return [samples[np.sort(chunk)] for chunk in np.array_split(perm, n_shards)]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)


def discriminator_loss(
    spec: nn.NetworkSpec, params: nn.ParamSet, real_batch: np.ndarray, fake_batch: np.ndarray
) -> float:
    """-log D(real) - log(1 - D(fake)), each term averaged over its batch."""
    zr = nn.forward(spec, params, real_batch)[:, 0]
    zf = nn.forward(spec, params, fake_batch)[:, 0]
    return float(np.mean(_softplus(-zr)) + np.mean(_softplus(zf)))


def teacher_train_step(
    spec: nn.NetworkSpec,
    params: nn.ParamSet,
    opt_state: nn.OptimState,
    real_batch: np.ndarray,
    fake_batch: np.ndarray,
    lr: float,
) -> tuple[nn.ParamSet, nn.OptimState, float]:
    """One optimizer step on the discrimination loss over the teacher's own shard."""
    if real_batch.shape[0] == 0 or fake_batch.shape[0] == 0:
        raise ValueError("batches must be non-empty")
    loss = discriminator_loss(spec, params, real_batch, fake_batch)
    zr = nn.forward(spec, params, real_batch)
    zf = nn.forward(spec, params, fake_batch)
    d_real = (_sigmoid(zr) - 1.0) / real_batch.shape[0]
    d_fake = _sigmoid(zf) / fake_batch.shape[0]
    g_real, _ = nn.backprop(spec, params, real_batch, d_real)
    g_fake, _ = nn.backprop(spec, params, fake_batch, d_fake)
    grads = nn.map2(lambda a, b: a + b, g_real, g_fake)
    opt_state, params = nn.optimizer_step(opt_state, params, grads, lr)
    return params, opt_state, loss


def teacher_direction(spec: nn.NetworkSpec, params: nn.ParamSet, samples: np.ndarray) -> np.ndarray:
    """Gradient of each sample's pre-sigmoid realness logit w.r.t. that sample."""
    samples = np.atleast_2d(samples)
    _, gx = nn.backprop(spec, params, samples, np.ones((samples.shape[0], 1)))
    return gx


def vote_alpha(cfg: DpGanConfig):
    """Per-aggregation RDP charge as a function of the order."""
    s = privacy.l2_sensitivity_topk(cfg.top_k)
    return lambda lam: privacy.rdp_gaussian(lam, s, cfg.noise_sigma)


def dp_gradient_round(
    teachers: TeacherEnsemble,
    student: tuple[nn.NetworkSpec, nn.ParamSet],
    z_batch: np.ndarray,
    cfg: DpGanConfig,
    accountant: Optional[privacy.RdpAccountant],
    rng: np.random.Generator,
    epsilon_cap: Optional[float] = None,
) -> tuple[np.ndarray, Optional[privacy.RdpAccountant]]:
    """Per-sample consensus votes in {-1, 0, +1} plus the charged accountant.

    One call books one aggregation. Raises BudgetExhaustedError before doing
    any work if the post-charge epsilon would exceed the cap; the charge
    depends only on (top_k, noise_sigma), never on the data.
    """
    gen_spec, gen_params = student
    sample_dim = gen_spec.out_dim
    if cfg.top_k > sample_dim:
        raise ValueError(f"top_k {cfg.top_k} exceeds sample dim {sample_dim}")
    if cfg.dp_enabled:
        if accountant is None:
            raise ValueError("DP mode needs an accountant")
        cap = cfg.epsilon_target if epsilon_cap is None else epsilon_cap
        charged = privacy.accountant_compose(accountant, vote_alpha(cfg), 1)
        if privacy.best_epsilon(charged).epsilon > cap:
            raise BudgetExhaustedError(
                f"aggregation would spend past epsilon cap {cap:.6g}"
            )
    else:
        charged = accountant

    fake = nn.forward(gen_spec, gen_params, z_batch)
    directions = [teacher_direction(teachers.spec, p, fake) for p in teachers.params]
    sigma = cfg.noise_sigma if cfg.dp_enabled else 0.0
    votes = np.zeros_like(fake)
    for j in range(fake.shape[0]):
        compressed = [
            privacy.topk_sign_compress(
                d[j], cfg.top_k, cfg.clip_norm, rng=rng, stochastic=cfg.stochastic_sign
            )
            for d in directions
        ]
        noisy = privacy.dp_sum_aggregate(compressed, sigma, rng=rng, dim=sample_dim)
        votes[j] = privacy.threshold_votes(noisy, cfg.vote_threshold, teachers.n_teachers)
    return votes, charged


def student_update(
    student_spec: nn.NetworkSpec,
    student_params: nn.ParamSet,
    opt_state: nn.OptimState,
    z_batch: np.ndarray,
    votes: np.ndarray,
    guide_lr: float,
    lr: float,
) -> tuple[nn.ParamSet, nn.OptimState, float]:
    """One step of MSE regression onto the frozen target G(z) + guide_lr * votes."""
    out = nn.forward(student_spec, student_params, z_batch)
    if votes.shape != out.shape:
        raise ValueError(f"votes shape {votes.shape} does not match output {out.shape}")
    target = out + guide_lr * votes
    diff = out - target
    loss = float(np.mean(diff * diff))
    dlogits = 2.0 * diff / diff.size
    grads, _ = nn.backprop(student_spec, student_params, z_batch, dlogits)
    opt_state, params = nn.optimizer_step(opt_state, student_params, grads, lr)
    return params, opt_state, loss


@dataclass
class DpGeneratorSet:
    """Per-class trained generators plus the ledger that paid for them."""

    sample_dim: int
    class_ids: list[int]
    specs: dict[int, nn.NetworkSpec]
    params: dict[int, nn.ParamSet]
    accountant: Optional[privacy.RdpAccountant]
    report: dict
    config: DpGanConfig

    def epsilon_spent(self) -> float:
        """Converted spend; exactly 0 when no aggregation ever ran."""
        if not self.config.dp_enabled or self.accountant is None:
            return math.inf
        if self.report.get("total_steps", 0) == 0:
            return 0.0
        return privacy.best_epsilon(self.accountant).epsilon


def train_dp_generator(
    samples: np.ndarray, labels: np.ndarray, cfg: DpGanConfig, rng: np.random.Generator
) -> DpGeneratorSet:
    """Train one generator per class under an evenly split privacy budget.

    The budget epsilon_target is allotted evenly: while training class number
    i (0-based, in sorted class order), rounds are admitted only while the
    cumulative spend stays within (i+1)/n_classes of the target. Classes with
    fewer samples than teachers get a reduced ensemble (minimum 2); a class
    with fewer than 2 samples keeps its freshly initialized generator. Both
    degradations are warned about in the report.
    """
    samples = np.asarray(samples, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    class_ids = sorted(int(c) for c in np.unique(labels))
    sample_dim = samples.shape[1]
    if cfg.top_k > sample_dim:
        raise ValueError(f"top_k {cfg.top_k} exceeds sample dim {sample_dim}")

    acc = privacy.fresh_accountant(cfg.delta) if cfg.dp_enabled else None
    specs: dict[int, nn.NetworkSpec] = {}
    params: dict[int, nn.ParamSet] = {}
    warnings: list[str] = []
    steps_per_class: dict[int, int] = {}

    for order, c in enumerate(class_ids):
        class_rng = rng.spawn(1)[0]
        class_samples = samples[labels == c]
        gen_spec = generator_spec(cfg.latent_dim, cfg.generator_hidden, sample_dim)
        gen_params = init_generator_params(gen_spec, class_rng, cfg.output_center)
        specs[c] = gen_spec
        steps_per_class[c] = 0

        if class_samples.shape[0] < 2:
            warnings.append(f"class {c}: fewer than 2 samples, generator left at initialization")
            params[c] = gen_params
            continue
        n_teachers = min(cfg.n_teachers, class_samples.shape[0])
        if n_teachers < cfg.n_teachers:
            n_teachers = max(2, n_teachers)
            warnings.append(
                f"class {c}: only {class_samples.shape[0]} samples, ensemble reduced to {n_teachers}"
            )

        t_spec = teacher_spec(sample_dim, cfg.teacher_hidden)
        shards = partition_disjoint(class_samples, n_teachers, class_rng)
        teacher_params = [nn.init_params(t_spec, class_rng) for _ in range(n_teachers)]
        ensemble = TeacherEnsemble(
            spec=t_spec,
            params=teacher_params,
            opt_states=[nn.make_optimizer(cfg.optimizer, p) for p in teacher_params],
            shards=shards,
        )
        gen_opt = nn.make_optimizer(cfg.optimizer, gen_params)
        cls_cfg = replace(cfg, n_teachers=n_teachers)
        cap = cfg.epsilon_target * (order + 1) / len(class_ids) if cfg.dp_enabled else None

        for step in range(cfg.max_steps_per_class):
            teacher_rngs = class_rng.spawn(n_teachers + 1)
            round_rng = teacher_rngs[-1]
            for i in range(n_teachers):
                shard = ensemble.shards[i]
                bsz = min(cfg.batch_size, shard.shape[0])
                for sub in range(cfg.teacher_rounds):
                    start = ((step * cfg.teacher_rounds + sub) * bsz) % shard.shape[0]
                    rows = np.arange(start, start + bsz) % shard.shape[0]
                    z = teacher_rngs[i].normal(size=(bsz, cfg.latent_dim))
                    fake = nn.forward(gen_spec, gen_params, z)
                    ensemble.params[i], ensemble.opt_states[i], _ = teacher_train_step(
                        t_spec, ensemble.params[i], ensemble.opt_states[i],
                        shard[rows], fake, cfg.teacher_lr,
                    )
            z_batch = round_rng.normal(size=(cfg.batch_size, cfg.latent_dim))
            try:
                votes, acc = dp_gradient_round(
                    ensemble, (gen_spec, gen_params), z_batch, cls_cfg, acc, round_rng,
                    epsilon_cap=cap,
                )
            except BudgetExhaustedError:
                break
            gen_params, gen_opt, _ = student_update(
                gen_spec, gen_params, gen_opt, z_batch, votes, cfg.guide_lr, cfg.student_lr
            )
            steps_per_class[c] += 1

        params[c] = gen_params

    total_steps = int(sum(steps_per_class.values()))
    report = {
        "steps_per_class": steps_per_class,
        "total_steps": total_steps,
        "warnings": warnings,
        "epsilon_spent": (
            (privacy.best_epsilon(acc).epsilon if total_steps else 0.0)
            if cfg.dp_enabled
            else math.inf
        ),
        "delta": cfg.delta,
        "top_k": cfg.top_k,
        "noise_sigma": cfg.noise_sigma,
        "dp_enabled": cfg.dp_enabled,
        "config_hash": cfg.hash(),
    }
    return DpGeneratorSet(
        sample_dim=sample_dim,
        class_ids=class_ids,
        specs=specs,
        params=params,
        accountant=acc,
        report=report,
        config=cfg,
    )


@dataclass(frozen=True)
class SyntheticDataset:
    """Labeled synthetic samples plus the provenance of the budget they cost."""

    samples: np.ndarray
    labels: np.ndarray
    n_classes: int
    client_id: int
    epsilon_spent: float
    delta: float
    config_hash: str

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


def synthesize(
    genset: DpGeneratorSet,
    n_per_class: int,
    rng: np.random.Generator,
    client_id: int = 0,
    n_classes: Optional[int] = None,
) -> SyntheticDataset:
    """Sample labeled data from the trained generators; free post-processing."""
    xs, ys = [], []
    for c in genset.class_ids:
        z = rng.normal(size=(n_per_class, genset.config.latent_dim))
        out = nn.forward(genset.specs[c], genset.params[c], z)
        xs.append(np.clip(out, 0.0, 1.0))
        ys.append(np.full(n_per_class, c, dtype=np.int64))
    return SyntheticDataset(
        samples=np.concatenate(xs, axis=0),
        labels=np.concatenate(ys),
        n_classes=(max(genset.class_ids) + 1 if n_classes is None else n_classes),
        client_id=client_id,
        epsilon_spent=genset.epsilon_spent(),
        delta=genset.config.delta,
        config_hash=genset.config.hash(),
    )
