"""Two-phase training loop, parameter counting and checkpoint-backed evaluation."""

from __future__ import annotations

import json
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt_io
from .autograd import Tensor
from .config import TrainConfig
from .data import (
    SyntheticDataset,
    batch_iterator,
    dataset_exists,
    generate,
    load_dataset,
)
from .errors import ConfigError, NonFiniteError
from .losses import (
    MixupSpec,
    Phase,
    bimixco_loss,
    mixup,
    mse_loss,
    phase_for_epoch,
    softclip_loss,
    total_loss,
)
from .model import VoxelFormer
from .nn import Module
from .optim import Adam, cosine_lr
from .retrieval import (
    RetrievalReport,
    evaluate,
    image_embeddings,
    orthonormal_projection,
)

# independent streams derived from the single run seed
STREAM_INIT, STREAM_SHUFFLE, STREAM_MIXUP, STREAM_DROPOUT, STREAM_PROJECTION = range(5)


def stream(seed: int, which: int) -> np.random.Generator:
    return np.random.default_rng([seed, which])


@dataclass
class ParamCount:
    total: int
    breakdown: dict[str, int]

    def table(self) -> str:
        width = max([len(k) for k in self.breakdown] + [5])
        rows = [f"{name:<{width}}  {count:>10,d}" for name, count in self.breakdown.items()]
        rows.append(f"{'total':<{width}}  {self.total:>10,d}")
        return "\n".join(rows)


def count_params(module: Module, depth: int = 2) -> ParamCount:
    """Exact trainable scalar count, grouped by the first ``depth`` name components."""
    breakdown: dict[str, int] = {}
    total = 0
    for name, p in module.named_parameters():
        key = ".".join(name.split(".")[:depth])
        breakdown[key] = breakdown.get(key, 0) + p.size
        total += p.size
    return ParamCount(total, breakdown)


def first_nonfinite(root: Tensor) -> str | None:
    """Describe the earliest tensor (in evaluation order) holding a NaN or inf."""
    for i, node in enumerate(ag._topological_order(root)):
        if not np.all(np.isfinite(node.data)):
            return f"node {i} ({node._op}, shape {node.shape})"
    return None


def build_projection(cfg: TrainConfig) -> np.ndarray:
    return orthonormal_projection(cfg.model.target_size, cfg.model.retrieval_dim,
                                  [cfg.seed, STREAM_PROJECTION])


def embedder(model: VoxelFormer) -> Callable:
    def embed(responses, coords):
        was_training = model.training
        model.eval()
        try:
            with ag.no_grad():
                return model(responses, coords).embedding.data
        finally:
            model.train(was_training)
    return embed


@dataclass
class TrainResult:
    model: VoxelFormer
    optimizer: Adam
    projection: np.ndarray
    metrics: list[dict] = field(default_factory=list)
    report: RetrievalReport | None = None


def _step_losses(model, batch, phase: Phase, cfg: TrainConfig, projection, mix_rng):
    image = Tensor(image_embeddings(batch.targets, projection))
    coords = batch.coords[0]
    if phase is Phase.BIMIXCO:
        spec = MixupSpec.sample(len(batch), mix_rng, cfg.mixup_alpha)
        out = model(mixup(batch.responses, spec), coords)
        mse = mse_loss(out.prior, Tensor(mixup(batch.targets, spec)))
        contrastive = bimixco_loss(out.embedding, image, spec, cfg.tau)
    else:
        out = model(batch.responses, coords)
        mse = mse_loss(out.prior, Tensor(batch.targets))
        contrastive = softclip_loss(out.embedding, image, cfg.tau)
    return mse, contrastive


def load_or_generate(cfg: TrainConfig) -> SyntheticDataset:
    if cfg.dataset_path:
        if not dataset_exists(cfg.dataset_path):
            raise ConfigError(f"no dataset at {cfg.dataset_path}")
        return load_dataset(cfg.dataset_path)
    return generate(cfg.data, cfg.model.merge, cfg.model.layers)


def train(cfg: TrainConfig, dataset: SyntheticDataset | None = None, out_dir=None,
          log: Callable[[str], None] | None = None, evaluate_at_end: bool = True,
          on_epoch: Callable[[int, TrainResult], None] | None = None) -> TrainResult:
    """Run ``cfg.epochs`` epochs; write metrics and checkpoints under ``out_dir`` if given.

    Metrics are one JSON object per line: a ``params`` record, then one
    ``epoch`` record per epoch, then an optional ``eval`` record.  ``on_epoch``
    is called after each epoch's checkpoint is written.
    """
    dataset = dataset if dataset is not None else load_or_generate(cfg)
    cfg.validate([s.n_voxels for s in dataset.subjects])
    log = log or (lambda _msg: None)
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out_dir / "metrics.jsonl", "w")

    model = VoxelFormer(cfg.model, stream(cfg.seed, STREAM_INIT))
    model.set_dropout_rng(stream(cfg.seed, STREAM_DROPOUT))
    model.train()
    optimizer = Adam(model.parameters(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
    projection = build_projection(cfg)
    shuffle_rng, mix_rng = stream(cfg.seed, STREAM_SHUFFLE), stream(cfg.seed, STREAM_MIXUP)
    result = TrainResult(model, optimizer, projection)
    steps_per_epoch = sum(1 for _ in batch_iterator(dataset, cfg.batch_size, "train"))
    total_steps = steps_per_epoch * cfg.epochs

    def emit(record: dict) -> None:
        result.metrics.append(record)
        if metrics_file is not None:
            metrics_file.write(json.dumps(record, sort_keys=True) + "\n")
            metrics_file.flush()

    def save(epoch: int) -> None:
        if out_dir is not None:
            state = ckpt_io.capture(model, epoch, cfg.to_dict(), optimizer, {"projection": projection})
            ckpt_io.save(out_dir / "checkpoint.bin", state)

    try:
        count = count_params(model)
        emit({"record": "params", "total": count.total, "breakdown": count.breakdown})
        log(f"parameters: {count.total:,d}")
        start = time.perf_counter()
        for epoch in range(cfg.epochs):
            phase = phase_for_epoch(epoch, cfg.epochs)
            sums = np.zeros(3)
            batches = 0
            for batch in batch_iterator(dataset, cfg.batch_size, "train", shuffle_rng):
                mse, contrastive = _step_losses(model, batch, phase, cfg, projection, mix_rng)
                loss = total_loss(mse, contrastive, cfg.loss_weights)
                if not np.isfinite(loss.data):
                    where = first_nonfinite(loss)
                    raise NonFiniteError(f"epoch {epoch}: non-finite loss; first non-finite tensor is {where}")
                optimizer.zero_grad()
                loss.backward()
                lr = cosine_lr(cfg.lr, optimizer.step_count, total_steps, cfg.lr_floor) if cfg.cosine_decay else cfg.lr
                optimizer.step(lr)
                sums += (loss.item(), mse.item(), contrastive.item())
                batches += 1
            mean = sums / batches
            record = {"record": "epoch", "epoch": epoch, "phase": phase.value, "loss": mean[0], "mse": mean[1],
                      "contrastive": mean[2], "wall_time": time.perf_counter() - start}
            emit(record)
            log(f"epoch {epoch:3d}  {phase.value:8s}  loss {mean[0]:.4f}  mse {mean[1]:.4f}  "
                f"contrastive {mean[2]:.4f}  {record['wall_time']:.1f}s")
            save(epoch)
            if on_epoch is not None:
                on_epoch(epoch, result)
        if evaluate_at_end and dataset.test_ids.size >= cfg.eval_pool_size:
            report = evaluate(embedder(model), dataset, projection, cfg.eval_pool_size, cfg.eval_trials, cfg.seed)
            result.report = report
            emit({"record": "eval", "pool_size": report.pool_size, "trials": report.trials,
                  "fwd_top1": report.fwd_top1, "bwd_top1": report.bwd_top1})
            log(f"retrieval @ pool {report.pool_size}: fwd {report.fwd_top1:.3f}  bwd {report.bwd_top1:.3f}")
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return result


def load_trained(path) -> tuple[VoxelFormer, np.ndarray, TrainConfig, ckpt_io.Checkpoint]:
    """Rebuild the model, projection and config stored in a checkpoint."""
    state = ckpt_io.load(path)
    cfg = TrainConfig.from_dict(state.config)
    model = VoxelFormer(cfg.model, stream(cfg.seed, STREAM_INIT))
    ckpt_io.restore(state, model)
    model.eval()
    projection = state.tensors.get("buffer/projection")
    if projection is None:
        projection = build_projection(cfg)
    return model, projection, cfg, state
