"""Losses and the optimization loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, TextIO

import numpy as np

from .data import Dataset
from .errors import TrainingDivergedError
from .field import FieldModel, field_backward, field_forward
from .metrics import mse_to_psnr
from .nn_core import AdamState, LrSchedule, adam_step, lr_at
from .render import composite, composite_backward, render_image
from .sampler import DEFAULT_STEP, OccupancyGrid, march_rays, update_occupancy

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    iterations: int = 20000
    rays_per_batch: int = 4096
    lambda_sparsity: float = 2.0e-5
    lr_schedule: LrSchedule = field(default_factory=LrSchedule)
    seed: int = 0
    step: float = DEFAULT_STEP
    occ_resolution: int = 128
    occ_threshold: float = 0.01
    occ_decay: float = 0.95
    occ_update_interval: int = 16
    occ_warmup_iters: int = 256
    eval_every: int = 1000
    log_every: int = 100

    def __post_init__(self) -> None:
        if isinstance(self.lr_schedule, dict):
            d = dict(self.lr_schedule)
            d["decay_points"] = tuple(d.get("decay_points", ()))
            self.lr_schedule = LrSchedule(**d)
        if self.lambda_sparsity < 0:
            raise ValueError("lambda_sparsity must be >= 0")
        if self.rays_per_batch < 1:
            raise ValueError("rays_per_batch must be positive")

    def make_occupancy(self) -> OccupancyGrid:
        return OccupancyGrid(
            self.occ_resolution, self.occ_threshold, self.occ_decay, self.occ_update_interval, self.occ_warmup_iters
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_schedule"]["decay_points"] = list(d["lr_schedule"]["decay_points"])
        return d


def recon_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over rays of the squared color error, and its gradient w.r.t. ``pred``."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise ValueError(f"prediction/target shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    n = len(diff)
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def sparsity_loss(sigma: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over samples of ``log(1 + 2 sigma^2)`` (Cauchy penalty), and its gradient."""
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if sigma.size == 0:
        return 0.0, sigma.copy()
    s2 = 2.0 * sigma * sigma
    return float(np.mean(np.log1p(s2))), (4.0 * sigma / (1.0 + s2)) / sigma.size


def make_rngs(seed: int) -> dict[str, np.random.Generator]:
    """Independent streams for init, batch sampling, pixel jitter and occupancy probes."""
    names = ("init", "batch", "jitter", "occupancy")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


@dataclass
class RayBatch:
    origins: np.ndarray  # unit-cube coordinates
    dirs: np.ndarray
    targets: np.ndarray


class RaySampler:
    """Draws random jittered training rays from all pixels of a dataset."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self.rot = np.stack([c.pose[:3, :3] for c in dataset.cameras])
        self.orig = np.stack([c.pose[:3, 3] for c in dataset.cameras])
        self.focal = np.array([c.focal for c in dataset.cameras])
        self.pixels = dataset.images.reshape(len(dataset), -1, 3)

    def sample(self, n: int, rng: np.random.Generator, jitter_rng: np.random.Generator | None) -> RayBatch:
        ds = self.dataset
        h, w = ds.height, ds.width
        img = rng.integers(0, len(ds), n)
        flat = rng.integers(0, h * w, n)
        i, j = flat % w, flat // w
        jit = jitter_rng.uniform(-0.5, 0.5, (n, 2)) if jitter_rng is not None else np.zeros((n, 2))
        f = self.focal[img]
        d_cam = np.stack([(i + 0.5 + jit[:, 0] - w / 2) / f, -(j + 0.5 + jit[:, 1] - h / 2) / f, -np.ones(n)], axis=-1)
        d = np.einsum("nij,nj->ni", self.rot[img], d_cam)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        o = ds.scene_transform.to_unit(self.orig[img])
        return RayBatch(o, d, self.pixels[img, flat].astype(np.float64))


def loss_and_grad(
    model: FieldModel,
    occ: OccupancyGrid | None,
    batch: RayBatch,
    lambda_sparsity: float,
    step: float,
    background=(1.0, 1.0, 1.0),
    backward: bool = True,
) -> tuple[float, float, float, int]:
    """Total, recon and sparsity loss of one batch; accumulates parameter grads when ``backward``."""
    samples = march_rays(occ, batch.origins, batch.dirs, step)
    n_rays = len(batch.origins)
    dirs = batch.dirs[samples.ray_idx].astype(model.dtype)
    if len(samples):
        sigma, rgb, cache = field_forward(model, samples.positions.astype(model.dtype), dirs)
    else:
        sigma, rgb, cache = np.zeros(0), np.zeros((0, 3)), None
    res = composite(sigma, rgb, samples.deltas, samples.ray_idx, n_rays, background)
    l_rec, d_pred = recon_loss(res.color, batch.targets)
    l_sp, d_sp = sparsity_loss(sigma)
    total = l_rec + lambda_sparsity * l_sp
    if backward and cache is not None and np.isfinite(total):
        dsigma, dcolor = composite_backward(sigma, rgb, samples.deltas, res, d_pred, background)
        dsigma += lambda_sparsity * d_sp
        field_backward(model, cache, dsigma, dcolor)
    return total, l_rec, l_sp, len(samples)


def train_step(
    model: FieldModel,
    occ: OccupancyGrid,
    adam: AdamState,
    batch: RayBatch,
    config: TrainConfig,
    it: int,
    occ_rng: np.random.Generator,
    background=(1.0, 1.0, 1.0),
) -> dict:
    """Occupancy refresh on schedule, forward, backward and one Adam update."""
    update_occupancy(occ, model, it, occ_rng)
    lr = lr_at(config.lr_schedule, it)
    total, l_rec, l_sp, n_samples = loss_and_grad(model, occ, batch, config.lambda_sparsity, config.step, background)
    if not np.isfinite(total):
        raise TrainingDivergedError(
            f"non-finite loss at iter {it} (lr={lr:.3g}, rays={len(batch.origins)}, samples={n_samples}, "
            f"recon={l_rec}, sparsity={l_sp})"
        )
    adam_step(model.parameters(), adam, lr)
    model.version += 1
    return {
        "loss": total,
        "loss_recon": l_rec,
        "loss_sparsity": l_sp,
        "lr": lr,
        "n_samples": n_samples,
        "psnr_batch": mse_to_psnr(l_rec / 3.0),
    }


def evaluate(model: FieldModel, occ: OccupancyGrid, dataset: Dataset, step: float) -> tuple[float, list[np.ndarray]]:
    """Mean PSNR over the dataset's views with deterministic rendering."""
    from .metrics import psnr

    images = [render_image(model, occ, cam, dataset.scene_transform, step, dataset.background) for cam in dataset.cameras]
    return float(np.mean([psnr(im, gt) for im, gt in zip(images, dataset.images)])), images


@dataclass
class TrainResult:
    model: FieldModel
    occupancy: OccupancyGrid
    records: list[dict]


def train(
    model: FieldModel,
    dataset: Dataset,
    config: TrainConfig,
    test_dataset: Dataset | None = None,
    log_file: TextIO | None = None,
    echo: bool = True,
    callback: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Run ``config.iterations`` steps; evaluates on ``test_dataset`` every ``eval_every`` iterations.

    One JSON record per logged iteration goes to ``log_file`` and, with
    ``echo``, to stdout.
    """
    rngs = make_rngs(config.seed)
    occ = config.make_occupancy()
    adam = AdamState()
    sampler = RaySampler(dataset)
    records: list[dict] = []
    loss_window: list[float] = []
    t_last = time.perf_counter()
    for it in range(config.iterations):
        batch = sampler.sample(config.rays_per_batch, rngs["batch"], rngs["jitter"])
        stats = train_step(model, occ, adam, batch, config, it, rngs["occupancy"], dataset.background)
        loss_window.append(stats["loss"])
        if callback is not None:
            callback(it, stats)
        last = it == config.iterations - 1
        do_eval = test_dataset is not None and config.eval_every > 0 and ((it + 1) % config.eval_every == 0 or last)
        if do_eval or (it + 1) % config.log_every == 0 or last:
            now = time.perf_counter()
            rec = {
                "iter": it + 1,
                "loss": float(np.mean(loss_window)),
                "loss_recon": stats["loss_recon"],
                "loss_sparsity": stats["loss_sparsity"],
                "lr": stats["lr"],
                "psnr_eval": evaluate(model, occ, test_dataset, config.step)[0] if do_eval else None,
                "occ_fraction": occ.occupied_fraction,
                "n_samples": stats["n_samples"],
                "wall_ms": round((now - t_last) * 1000.0, 3),
            }
            loss_window = []
            t_last = now
            records.append(rec)
            line = json.dumps(rec)
            if log_file is not None:
                log_file.write(line + "\n")
                log_file.flush()
            if echo:
                print(line, flush=True)
    return TrainResult(model, occ, records)
