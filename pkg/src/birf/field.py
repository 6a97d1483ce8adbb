"""The radiance field: hybrid grid features -> density MLP -> color MLP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn_core
from .binarize import BinaryTensor
from .errors import ConfigError
from .grid import GridConfig, HybridGrid, encode, encode_backward
from .nn_core import MlpCache, MlpSpec, ParamTensor, mlp_backward, mlp_forward, pe_width, positional_encode, sh_encode

DENSITY_CLAMP = 15.0


@dataclass
class FieldModel:
    grid: HybridGrid
    density_spec: MlpSpec
    density_params: list[ParamTensor]
    color_spec: MlpSpec
    color_params: list[ParamTensor]
    pe_freqs: int = 4
    embedding_width: int = 15
    # bumped by the optimizer; caches from an older version are rejected
    version: int = 0

    def __post_init__(self) -> None:
        want = pe_width(self.pe_freqs) + self.grid.config.feature_width
        if self.density_spec.input_width != want:
            raise ConfigError(f"density head input width {self.density_spec.input_width} != {want}")
        if self.density_spec.output_width != 1 + self.embedding_width:
            raise ConfigError("density head must emit 1 + embedding_width values")
        if self.color_spec.input_width != self.embedding_width + nn_core.SH_WIDTH:
            raise ConfigError("color head input must be embedding_width + 16")
        if self.color_spec.output_width != 3 or self.color_spec.output_activation != "sigmoid":
            raise ConfigError("color head must emit 3 sigmoid channels")

    @classmethod
    def create(
        cls,
        grid_config: GridConfig,
        rng: np.random.Generator,
        hidden_width: int = 128,
        pe_freqs: int = 4,
        embedding_width: int = 15,
        dtype=np.float32,
    ) -> "FieldModel":
        grid = HybridGrid.create(grid_config, rng, dtype=dtype)
        dspec = MlpSpec(pe_width(pe_freqs) + grid_config.feature_width, 1 + embedding_width, hidden_width, 1, "none")
        cspec = MlpSpec(embedding_width + nn_core.SH_WIDTH, 3, hidden_width, 2, "sigmoid")
        return cls(
            grid,
            dspec,
            nn_core.init_mlp(dspec, rng, dtype, "density"),
            cspec,
            nn_core.init_mlp(cspec, rng, dtype, "color"),
            pe_freqs,
            embedding_width,
        )

    @property
    def dtype(self):
        return self.density_params[0].values.dtype

    def mlp_params(self) -> list[ParamTensor]:
        return self.density_params + self.color_params

    def grid_params(self) -> list[BinaryTensor]:
        return self.grid.tensors()

    def parameters(self) -> list:
        return self.mlp_params() + self.grid_params()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


@dataclass
class FieldCache:
    version: int
    x: np.ndarray
    density: MlpCache
    raw: np.ndarray
    sigma: np.ndarray
    color: MlpCache | None = None


def density_input(model: FieldModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Density-head input ``[pe(x), f]`` and the clamped positions it was built from."""
    x = np.clip(np.atleast_2d(x), 0.0, 1.0).astype(model.dtype, copy=False)
    f = encode(model.grid, x)
    pe = positional_encode(x, model.pe_freqs).astype(model.dtype, copy=False)
    return np.concatenate([pe, f.astype(model.dtype, copy=False)], axis=-1), x


def query_density(model: FieldModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, FieldCache]:
    """Density ``sigma`` (n,) and embedding (n, embedding_width) at points ``x``."""
    inp, xc = density_input(model, x)
    out, dcache = mlp_forward(model.density_spec, model.density_params, inp)
    raw = out[:, 0]
    sigma = np.exp(np.clip(raw, -DENSITY_CLAMP, DENSITY_CLAMP))
    cache = FieldCache(model.version, xc, dcache, raw, sigma)
    return sigma, out[:, 1:], cache


def query_color(model: FieldModel, embedding: np.ndarray, d: np.ndarray, cache: FieldCache | None = None) -> np.ndarray:
    """RGB in (0, 1) from the density head's embedding and view direction ``d``."""
    embedding = np.atleast_2d(embedding)
    sh = sh_encode(np.atleast_2d(d)).astype(model.dtype, copy=False)
    if sh.shape[0] == 1 and embedding.shape[0] > 1:
        sh = np.broadcast_to(sh, (embedding.shape[0], sh.shape[1]))
    rgb, ccache = mlp_forward(model.color_spec, model.color_params, np.concatenate([embedding, sh], axis=-1))
    if cache is not None:
        cache.color = ccache
    return rgb


def field_forward(model: FieldModel, x: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray, FieldCache]:
    sigma, emb, cache = query_density(model, x)
    rgb = query_color(model, emb, d, cache)
    return sigma, rgb, cache


def field_backward(
    model: FieldModel,
    cache: FieldCache,
    dsigma: np.ndarray | None,
    dcolor: np.ndarray | None,
) -> None:
    """Accumulate gradients into both MLPs and the grid latents."""
    if cache is None or cache.version != model.version:
        raise ValueError("field cache is missing or stale (parameters changed since the forward pass)")
    n = cache.raw.shape[0]
    dout = np.zeros((n, model.density_spec.output_width), dtype=model.dtype)
    if dcolor is not None:
        if cache.color is None:
            raise ValueError("color gradient given but the forward pass did not evaluate color")
        dcin = mlp_backward(model.color_spec, model.color_params, cache.color, np.asarray(dcolor, dtype=model.dtype))
        dout[:, 1:] = dcin[:, : model.embedding_width]
    if dsigma is not None:
        inside = np.abs(cache.raw) <= DENSITY_CLAMP
        dout[:, 0] = np.asarray(dsigma) * cache.sigma * inside
    dinp = mlp_backward(model.density_spec, model.density_params, cache.density, dout)
    encode_backward(model.grid, cache.x, dinp[:, pe_width(model.pe_freqs) :])
