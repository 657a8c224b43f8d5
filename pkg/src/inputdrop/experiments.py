"""Training loops, baselines and ensembles on the synthetic tasks."""

from __future__ import annotations

import hashlib
import json
import math
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import metrics
from .adapt import BackboneKind, BackboneSpec, build_backbone, build_moddrop_baseline
from .losses import DehazeLossWeights, PerceptualExtractorSpec, dehaze_generator_loss, gan_losses
from .modality import DropoutMode, DropoutPolicy, MultimodalBatch, Phase, apply_input_dropout
from .seeding import derive_seed, torch_generator
from .stats import Comparison, RunResult, compare_methods
from .synthdata import (
    DehazeSplit,
    LabeledSplit,
    SynthClassTaskSpec,
    SynthDehazeTaskSpec,
    generate_classification_dataset,
    generate_dehaze_dataset,
)


class ConfigError(ValueError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class Task(str, Enum):
    CLASSIFICATION = "classification"
    DEHAZING = "dehazing"


class Method(str, Enum):
    RGB_ONLY = "rgb_only"
    INPUT_DROPOUT_ADDIT = "input_dropout_addit"
    INPUT_DROPOUT_BOTH = "input_dropout_both"
    MODDROP_BASELINE = "moddrop_baseline"
    RGBD_UPPER_BOUND = "rgbd_upper_bound"
    DEPTH_ONLY = "depth_only"


DEHAZING_METHODS = (Method.RGB_ONLY, Method.INPUT_DROPOUT_ADDIT)
# methods whose test inputs are RGB only
RGB_TESTED = (Method.RGB_ONLY, Method.INPUT_DROPOUT_ADDIT, Method.INPUT_DROPOUT_BOTH, Method.MODDROP_BASELINE)


@dataclass(frozen=True)
class OptimizerSettings:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    steps: int = 600
    batch_size: int = 32
    schedule: str = "cosine"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("must be positive", "optimizer.lr")
        if not 0 <= self.momentum < 1:
            raise ConfigError("must lie in [0, 1)", "optimizer.momentum")
        if self.steps < 0:
            raise ConfigError("must be non-negative", "optimizer.steps")
        if self.batch_size <= 0:
            raise ConfigError("must be positive", "optimizer.batch_size")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError("must be 'constant' or 'cosine'", "optimizer.schedule")

    def lr_at(self, step: int) -> float:
        if self.schedule == "constant":
            return self.lr
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * step / max(1, self.steps)))


@dataclass(frozen=True)
class BackboneSettings:
    width: int = 16
    depth: int = 4
    stem_stride: int = 2

    def __post_init__(self):
        for name in ("width", "depth", "stem_stride"):
            if getattr(self, name) <= 0:
                raise ConfigError("must be positive", f"backbone.{name}")


@dataclass(frozen=True)
class DehazeSettings:
    lambda1: float = 10.0
    lambda2: float = 10.0
    generator_width: int = 8
    generator_blocks: int = 3
    discriminator_width: int = 8
    discriminator_layers: int = 3
    perceptual_seed: int = 0

    @property
    def weights(self) -> DehazeLossWeights:
        return DehazeLossWeights(self.lambda1, self.lambda2)


@dataclass(frozen=True)
class ExperimentConfig:
    """One (task, method) cell of an experiment."""

    experiment: str
    task: Task
    method: Method
    dataset: SynthClassTaskSpec | SynthDehazeTaskSpec
    backbone: BackboneSettings = BackboneSettings()
    dropout: DropoutPolicy | None = None
    optimizer: OptimizerSettings = OptimizerSettings()
    dehaze: DehazeSettings = DehazeSettings()
    eval_batch_size: int = 256

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "method", Method(self.method))
        if self.dropout is None:
            mode = DropoutMode.BOTH if self.method is Method.INPUT_DROPOUT_BOTH else DropoutMode.ADDIT
            object.__setattr__(self, "dropout", DropoutPolicy(mode))
        if self.method is Method.INPUT_DROPOUT_BOTH and self.dropout.mode is not DropoutMode.BOTH:
            object.__setattr__(self, "dropout", DropoutPolicy(DropoutMode.BOTH, None, self.dropout.rng_stream))
        if self.method is Method.INPUT_DROPOUT_ADDIT and self.dropout.mode is not DropoutMode.ADDIT:
            raise ConfigError("input_dropout_addit needs an addit dropout policy", "dropout.mode")
        if self.task is Task.DEHAZING:
            if self.method is Method.INPUT_DROPOUT_BOTH:
                raise ConfigError(
                    "dehazing cannot drop the RGB input (a clear image cannot be recovered from depth alone); "
                    "use input_dropout_addit",
                    "method",
                )
            if self.method not in DEHAZING_METHODS:
                raise ConfigError(f"dehazing supports {[m.value for m in DEHAZING_METHODS]}", "method")
            if not isinstance(self.dataset, SynthDehazeTaskSpec):
                raise ConfigError("dehazing needs a dehaze dataset spec", "dataset")
        elif not isinstance(self.dataset, SynthClassTaskSpec):
            raise ConfigError("classification needs a classification dataset spec", "dataset")

    def to_dict(self) -> dict:
        d = {
            "experiment": self.experiment,
            "task": self.task.value,
            "method": self.method.value,
            "dataset": asdict(self.dataset),
            "backbone": asdict(self.backbone),
            "dropout": {"mode": self.dropout.mode.value, "p_drop": self.dropout.p_drop, "rng_stream": self.dropout.rng_stream},
            "optimizer": asdict(self.optimizer),
            "eval_batch_size": self.eval_batch_size,
        }
        if self.task is Task.DEHAZING:
            d["dehaze"] = asdict(self.dehaze)
        return d

    @property
    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass
class TrainedRun:
    model: nn.Module
    result: RunResult
    test_probs: torch.Tensor | None = None
    curve: list[tuple[int, float]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# inputs per method


def model_input(
    batch: MultimodalBatch,
    method: Method,
    phase: Phase,
    policy: DropoutPolicy | None = None,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """Tensor fed to the network for ``method``.

    RGB-tested methods never see the additional modality at evaluation: it
    is either sliced away or zeroed before the forward pass.
    """
    if method is Method.RGB_ONLY:
        return batch.modality(batch.layout.canonical)
    if method is Method.DEPTH_ONLY:
        return batch.modality(batch.layout.additional[0])
    if method is Method.RGBD_UPPER_BOUND:
        return batch.data
    if method in (Method.INPUT_DROPOUT_ADDIT, Method.INPUT_DROPOUT_BOTH):
        return apply_input_dropout(batch, policy, phase, rng)[0].data
    if method is Method.MODDROP_BASELINE:
        if phase is Phase.EVAL:
            return apply_input_dropout(batch, DropoutPolicy(DropoutMode.ADDIT), Phase.EVAL)[0].data
        return batch.data
    raise ConfigError(f"unknown method {method}")


def _in_channels(method: Method, layout) -> int:
    if method is Method.RGB_ONLY:
        return dict(layout.entries)[layout.canonical]
    if method is Method.DEPTH_ONLY:
        return dict(layout.entries)[layout.additional[0]]
    return layout.total_channels


def _set_lr(opt: torch.optim.Optimizer, lr: float):
    for group in opt.param_groups:
        group["lr"] = lr


def _sgd(params, o: OptimizerSettings) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=o.lr, momentum=o.momentum, weight_decay=o.weight_decay)


# ---------------------------------------------------------------------------
# classification


def _forward(model: nn.Module, x: torch.Tensor, method: Method, phase: Phase) -> torch.Tensor:
    if method is Method.MODDROP_BASELINE and phase is Phase.EVAL:
        return model(x, missing=(1,))
    return model(x)


@torch.no_grad()
def predict_logits(
    model: nn.Module, split: LabeledSplit, method: Method, batch_size: int = 256
) -> torch.Tensor:
    model.eval()
    outs = []
    data = split.batch
    for start in range(0, len(data), batch_size):
        chunk = MultimodalBatch(data.data[start : start + batch_size], data.layout)
        x = model_input(chunk, method, Phase.EVAL)
        outs.append(_forward(model, x, method, Phase.EVAL))
    return torch.cat(outs) if outs else torch.zeros(0)


def evaluate_classifier(
    model: nn.Module, split: LabeledSplit, method: Method, batch_size: int = 256
) -> tuple[dict[str, float], torch.Tensor]:
    """Test accuracy and class probabilities under the method's test-time inputs."""
    logits = predict_logits(model, split, method, batch_size)
    acc = metrics.classification_accuracy(logits, split.labels)
    return {"accuracy": acc}, torch.softmax(logits.double(), dim=1)


def _classifier_spec(config: ExperimentConfig, in_channels: int, num_classes: int, layout) -> BackboneSpec:
    b = config.backbone
    if config.method is Method.MODDROP_BASELINE:
        sizes = tuple(c for _, c in layout.entries)
        return BackboneSpec(
            BackboneKind.MODDROP_BRANCH_NET, in_channels, b.width, b.depth, num_classes, b.stem_stride, sizes
        )
    return BackboneSpec(BackboneKind.SMALL_RESNET_CLASSIFIER, in_channels, b.width, b.depth, num_classes, b.stem_stride)


def train_classifier(
    config: ExperimentConfig,
    seed: int,
    master_seed: int = 0,
    data: dict[str, LabeledSplit] | None = None,
    curve_every: int = 25,
) -> TrainedRun:
    """Train one classifier and score it on the test split.

    ``seed`` is the run index; the model-init, minibatch and masking
    streams are derived from ``(master_seed, seed)``.
    """
    if config.task is not Task.CLASSIFICATION:
        raise ConfigError("train_classifier needs a classification config", "task")
    data = data if data is not None else generate_classification_dataset(config.dataset)
    train = data["train"]
    layout = train.batch.layout
    method = config.method
    spec = _classifier_spec(config, _in_channels(method, layout), config.dataset.num_classes, layout)
    init_seed = derive_seed(master_seed, seed, "init")
    if method is Method.MODDROP_BASELINE:
        model = build_moddrop_baseline(spec, init_seed)
        model.branch_rng = torch_generator(derive_seed(master_seed, seed, "moddrop"))
    else:
        model = build_backbone(spec, init_seed)
    g_data = torch_generator(derive_seed(master_seed, seed, "minibatch"))
    g_drop = torch_generator(derive_seed(master_seed, seed, config.dropout.rng_stream))
    opt = _sgd(model.parameters(), config.optimizer)
    n = len(train)
    curve = []
    model.train()
    for step in range(config.optimizer.steps):
        _set_lr(opt, config.optimizer.lr_at(step))
        idx = torch.randint(0, n, (config.optimizer.batch_size,), generator=g_data)
        batch = MultimodalBatch(train.batch.data[idx], layout)
        x = model_input(batch, method, Phase.TRAIN, config.dropout, g_drop)
        loss = F.cross_entropy(model(x), train.labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % curve_every == 0 or step == config.optimizer.steps - 1:
            curve.append((step, float(loss.item())))
    scores, probs = evaluate_classifier(model, data["test"], method, config.eval_batch_size)
    result = RunResult(config.experiment, seed, scores, config.config_hash, method.value)
    return TrainedRun(model, result, probs, curve)


def ensemble_predict(models: Sequence[Callable], inputs) -> torch.Tensor:
    """Uniform average of per-model softmax probabilities.

    ``inputs`` is either one tensor shared by all models or one tensor per
    model (models may consume different channel subsets).
    """
    if not models:
        raise ValueError("ensemble needs at least one model")
    if isinstance(inputs, torch.Tensor):
        inputs = [inputs] * len(models)
    if len(inputs) != len(models):
        raise ValueError("one input per model required")
    probs = []
    with torch.no_grad():
        for model, x in zip(models, inputs):
            if isinstance(model, nn.Module):
                model.eval()
            probs.append(torch.softmax(model(x).double(), dim=1))
    return average_probabilities(probs)


def average_probabilities(probs: Sequence[torch.Tensor]) -> torch.Tensor:
    dims = {tuple(p.shape) for p in probs}
    if len(dims) != 1:
        raise ValueError(f"ensemble members disagree on output shape: {sorted(dims)}")
    return torch.stack([p.double() for p in probs]).mean(dim=0)


# ---------------------------------------------------------------------------
# dehazing


def _dehaze_specs(config: ExperimentConfig, in_channels: int) -> tuple[BackboneSpec, BackboneSpec]:
    d = config.dehaze
    gen = BackboneSpec(BackboneKind.RESNET_GENERATOR, in_channels, d.generator_width, d.generator_blocks, 3)
    # conditional critic: hazy RGB next to the candidate clear image
    disc = BackboneSpec(BackboneKind.PATCH_DISCRIMINATOR, 6, d.discriminator_width, d.discriminator_layers, 1)
    return gen, disc


@torch.no_grad()
def evaluate_dehazer(
    generator: Callable, split: DehazeSplit, method: Method, batch_size: int = 64
) -> dict[str, float]:
    """Mean per-image PSNR and SSIM of the generator output on ``split``."""
    if isinstance(generator, nn.Module):
        generator.eval()
    psnrs, ssims = [], []
    data = split.batch
    for start in range(0, len(data), batch_size):
        chunk = MultimodalBatch(data.data[start : start + batch_size], data.layout)
        out = generator(model_input(chunk, method, Phase.EVAL))
        target = split.clear[start : start + batch_size]
        for p, t in zip(out, target):
            psnrs.append(metrics.psnr(p, t, peak=1.0))
            ssims.append(metrics.ssim(p, t, peak=1.0))
    return {"psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims))}


def train_dehazer(
    config: ExperimentConfig,
    seed: int,
    master_seed: int = 0,
    data: dict[str, DehazeSplit] | None = None,
    curve_every: int = 25,
) -> TrainedRun:
    """Adversarial + L1 + perceptual training of a dehazing generator."""
    if config.task is not Task.DEHAZING:
        raise ConfigError("train_dehazer needs a dehazing config", "task")
    if config.method not in DEHAZING_METHODS:
        raise ConfigError(f"method {config.method.value} is not valid for dehazing", "method")
    data = data if data is not None else generate_dehaze_dataset(config.dataset)
    train = data["train"]
    layout = train.batch.layout
    method = config.method
    gen_spec, disc_spec = _dehaze_specs(config, _in_channels(method, layout))
    generator = build_backbone(gen_spec, derive_seed(master_seed, seed, "init"))
    critic = build_backbone(disc_spec, derive_seed(master_seed, seed, "init/critic"))
    extractor = PerceptualExtractorSpec(seed=config.dehaze.perceptual_seed)
    weights = config.dehaze.weights
    g_data = torch_generator(derive_seed(master_seed, seed, "minibatch"))
    g_drop = torch_generator(derive_seed(master_seed, seed, config.dropout.rng_stream))
    opt_g = _sgd(generator.parameters(), config.optimizer)
    opt_d = _sgd(critic.parameters(), config.optimizer)
    n = len(train)
    curve = []
    generator.train()
    critic.train()
    for step in range(config.optimizer.steps):
        lr = config.optimizer.lr_at(step)
        _set_lr(opt_g, lr)
        _set_lr(opt_d, lr)
        idx = torch.randint(0, n, (config.optimizer.batch_size,), generator=g_data)
        batch = MultimodalBatch(train.batch.data[idx], layout)
        hazy = batch.modality(layout.canonical)
        target = train.clear[idx]
        fake = generator(model_input(batch, method, Phase.TRAIN, config.dropout, g_drop))

        real_score = critic(torch.cat([hazy, target], dim=1))
        fake_score = critic(torch.cat([hazy, fake.detach()], dim=1))
        _, d_loss = gan_losses(real_score, fake_score)
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        g_loss = dehaze_generator_loss(fake, target, critic(torch.cat([hazy, fake], dim=1)), weights, extractor)
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()
        if step % curve_every == 0 or step == config.optimizer.steps - 1:
            curve.append((step, float(g_loss.item())))
    scores = evaluate_dehazer(generator, data["test"], method, config.eval_batch_size)
    result = RunResult(config.experiment, seed, scores, config.config_hash, method.value)
    return TrainedRun(generator, result, None, curve)


def train_run(config: ExperimentConfig, seed: int, master_seed: int = 0, data=None) -> TrainedRun:
    if config.task is Task.CLASSIFICATION:
        return train_classifier(config, seed, master_seed, data)
    return train_dehazer(config, seed, master_seed, data)


# ---------------------------------------------------------------------------
# method matrix

ENSEMBLES = {
    "ensemble:rgb_only+rgb_only": (Method.RGB_ONLY, Method.RGB_ONLY),
    "ensemble:input_dropout_addit+rgb_only": (Method.INPUT_DROPOUT_ADDIT, Method.RGB_ONLY),
}
ENSEMBLE_BASELINE = "ensemble:rgb_only+rgb_only"


def primary_metric(task: Task) -> str:
    return "accuracy" if task is Task.CLASSIFICATION else "psnr"


def ensemble_runs(
    runs: dict[str, list[TrainedRun]], labels: torch.Tensor, experiment: str
) -> dict[str, list[RunResult]]:
    """Pair run ``i`` of the first member with run ``i+1`` of the second.

    Both ensembles share the same RGB-only partner for a given ``i`` so the
    comparison between them is paired.
    """
    out: dict[str, list[RunResult]] = {}
    for name, (first, second) in ENSEMBLES.items():
        a, b = runs.get(first.value), runs.get(second.value)
        if not a or not b or len(b) < 2:
            continue
        a = sorted(a, key=lambda r: r.result.seed)
        b = sorted(b, key=lambda r: r.result.seed)
        results = []
        for i, ra in enumerate(a):
            rb = b[(i + 1) % len(b)]
            probs = average_probabilities([ra.test_probs, rb.test_probs])
            acc = metrics.classification_accuracy(probs, labels)
            h = hashlib.sha256((ra.result.config_hash + rb.result.config_hash).encode()).hexdigest()[:16]
            results.append(RunResult(experiment, ra.result.seed, {"accuracy": acc}, h, name))
        out[name] = results
    return out


@dataclass
class MatrixResult:
    runs: dict[str, list[RunResult]]
    comparisons: dict[str, Comparison]
    curves: dict[tuple[str, int], list[tuple[int, float]]]
    errors: list[dict] = field(default_factory=list)


def comparison_table(
    runs: dict[str, list[RunResult]], task: Task, alpha: float, baseline: str = Method.RGB_ONLY.value
) -> dict[str, Comparison]:
    metric = primary_metric(task)
    rows = {}
    base = runs.get(baseline)
    for name, results in runs.items():
        if not results or name == baseline or name == ENSEMBLE_BASELINE:
            continue
        ref = runs.get(ENSEMBLE_BASELINE) if name.startswith("ensemble:") else base
        if not ref:
            continue
        rows[name] = compare_methods(ref, results, metric, alpha)
    return rows


def _job(cfg: ExperimentConfig, seed: int, master_seed: int, data) -> TrainedRun:
    torch.set_num_threads(1)
    return train_run(cfg, seed, master_seed, data)


def load_task_data(config: ExperimentConfig):
    if config.task is Task.CLASSIFICATION:
        return generate_classification_dataset(config.dataset)
    return generate_dehaze_dataset(config.dataset)


def run_method_matrix(
    configs: Sequence[ExperimentConfig],
    seeds: Sequence[int],
    master_seed: int = 0,
    alpha: float = 0.05,
    ensembles: bool = True,
    on_run: Callable[[TrainedRun], None] | None = None,
    data=None,
    jobs: int = 1,
) -> MatrixResult:
    """Train every (config, seed) pair, add ensembles, compare to rgb_only.

    With ``jobs > 1`` runs execute in worker processes; results are keyed
    by (method, seed) so the outcome does not depend on completion order.
    """
    if not configs:
        raise ConfigError("no methods configured")
    if len({c.dataset for c in configs}) != 1:
        raise ConfigError("all methods must share one dataset spec", "dataset")
    if len({c.task for c in configs}) != 1:
        raise ConfigError("all methods must share one task", "task")
    task = configs[0].task
    data = data if data is not None else load_task_data(configs[0])
    pending = [(cfg, s) for cfg in configs for s in seeds]
    trained: dict[str, list[TrainedRun]] = {}
    errors = []

    def record(cfg, s, run=None, exc=None):
        if exc is not None:
            errors.append({"experiment": cfg.experiment, "method": cfg.method.value, "seed": s, "error": repr(exc)})
            return
        trained.setdefault(cfg.method.value, []).append(run)
        if on_run:
            on_run(run)

    if jobs <= 1:
        for cfg, s in pending:
            try:
                run = train_run(cfg, s, master_seed, data)
            except Exception as exc:  # recorded per run, the matrix continues
                record(cfg, s, exc=exc)
            else:
                record(cfg, s, run)
    else:
        ctx = mp.get_context("spawn")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            futures = {pool.submit(_job, cfg, s, master_seed, data): (cfg, s) for cfg, s in pending}
            for fut in as_completed(futures):
                cfg, s = futures[fut]
                try:
                    run = fut.result()
                except Exception as exc:
                    record(cfg, s, exc=exc)
                else:
                    record(cfg, s, run)
    for v in trained.values():
        v.sort(key=lambda r: r.result.seed)
    runs = {k: [r.result for r in v] for k, v in trained.items()}
    if ensembles and task is Task.CLASSIFICATION:
        runs.update(ensemble_runs(trained, data["test"].labels, configs[0].experiment))
    curves = {(k, r.result.seed): r.curve for k, v in trained.items() for r in v}
    return MatrixResult(runs, comparison_table(runs, task, alpha), curves, errors)
