"""Small residual attention/MLP noise predictor over (batch, frames, dim) inputs."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..rng import Rng
from ..tensor import Tensor
from .data import DATASETS
from .layers import Linear

BLOCK_LAYERS = ("attn_q", "attn_k", "attn_v", "attn_o", "mlp_in", "mlp_out")
LAYER_GROUPS = {"attention": ("attn_q", "attn_k", "attn_v", "attn_o"), "mlp": ("mlp_in", "mlp_out")}


@dataclass
class DenoiserConfig:
    width: int = 64
    depth: int = 2
    frames: int = 4
    data_dim: int = 2
    num_classes: int = 8
    mlp_ratio: int = 2
    time_features: int = 16
    noise_steps: int = 100
    quantized_layers: tuple[str, ...] = BLOCK_LAYERS

    @classmethod
    def for_dataset(cls, dataset: str, **kw) -> "DenoiserConfig":
        """Label embedding sized to the dataset's classes so the sampler never sees unused labels."""
        if dataset not in DATASETS:
            raise ValueError(f"unknown dataset {dataset!r}; choose from {sorted(DATASETS)}")
        return cls(num_classes=DATASETS[dataset], **kw)


def timestep_features(tau: np.ndarray, N: int, count: int) -> np.ndarray:
    """Sinusoidal features of tau / N, shape (2 * count, batch)."""
    x = np.asarray(tau, dtype=np.float64) / N
    freqs = np.exp(np.linspace(0.0, np.log(200.0), count))
    ang = freqs[:, None] * x[None, :] * np.pi
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=0)


class Block:
    def __init__(self, cfg: DenoiserConfig, rng: Rng):
        w, h = cfg.width, cfg.width * cfg.mlp_ratio
        self.layers = {
            "attn_q": Linear(w, w, rng, bias=False),
            "attn_k": Linear(w, w, rng, bias=False),
            "attn_v": Linear(w, w, rng, bias=False),
            "attn_o": Linear(w, w, rng, bias=False, gain=0.5),
            "mlp_in": Linear(h, w, rng, bias=False),
            "mlp_out": Linear(w, h, rng, bias=False, gain=0.5),
        }
        self.frames = cfg.frames

    def __call__(self, h: Tensor) -> Tensor:
        width, tokens = h.shape
        batch = tokens // self.frames
        L = self.layers

        def heads(x):  # (width, B*f) -> (B, f, width)
            return T.permute(T.reshape(x, (width, batch, self.frames)), (1, 2, 0))

        q, k, v = heads(L["attn_q"](h)), heads(L["attn_k"](h)), heads(L["attn_v"](h))
        scores = T.mul(T.bmm(q, T.permute(k, (0, 2, 1))), 1.0 / np.sqrt(width))
        att = T.bmm(T.softmax(scores, axis=-1), v)
        att = T.reshape(T.permute(att, (2, 0, 1)), (width, tokens))
        h = T.add(h, L["attn_o"](att))
        return T.add(h, L["mlp_out"](T.silu(L["mlp_in"](h))))


class Denoiser:
    def __init__(self, cfg: DenoiserConfig, rng: Rng):
        self.cfg = cfg
        w = cfg.width
        self.inp = Linear(w, cfg.data_dim, rng)
        self.time = Linear(w, 2 * cfg.time_features, rng)
        self.label = Tensor(rng.normal((w, cfg.num_classes), 0.5), requires_grad=True)
        self.frame = Tensor(rng.normal((w, cfg.frames), 0.5), requires_grad=True)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.depth)]
        self.out = Linear(cfg.data_dim, w, rng, gain=0.5)

    # -- parameters -----------------------------------------------------------------
    def quant_layers(self):
        """Yield ``(name, group, Linear)`` for every block layer selected for quantization."""
        for i, blk in enumerate(self.blocks):
            for key, layer in blk.layers.items():
                if key in self.cfg.quantized_layers:
                    group = "attention" if key.startswith("attn") else "mlp"
                    yield f"blocks.{i}.{key}", group, layer

    def named_parameters(self):
        yield from self.inp.named_parameters("inp")
        yield from self.time.named_parameters("time")
        yield "label", self.label
        yield "frame", self.frame
        for i, blk in enumerate(self.blocks):
            for key, layer in blk.layers.items():
                yield from layer.named_parameters(f"blocks.{i}.{key}")
        yield from self.out.named_parameters("out")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def freeze(self) -> "Denoiser":
        for p in self.parameters():
            p.requires_grad = False
            p.node_id = None
            p.grad = None
        return self

    def clone(self, trainable: bool = True) -> "Denoiser":
        twin = copy.deepcopy(self)
        if trainable:
            for p in twin.parameters():
                p.requires_grad = True
                p.node_id = next(T._node_ids)
        return twin

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    # -- forward --------------------------------------------------------------------
    def __call__(self, x_tau: np.ndarray, cond: np.ndarray, tau: np.ndarray) -> Tensor:
        x_tau = T.as_tensor(x_tau)
        batch, frames, dim = x_tau.shape
        if frames != self.cfg.frames or dim != self.cfg.data_dim:
            raise T.ShapeError(f"model expects (B, {self.cfg.frames}, {self.cfg.data_dim}), got {x_tau.shape}")
        w = self.cfg.width
        tokens = batch * frames
        X = T.reshape(T.permute(x_tau, (2, 0, 1)), (dim, tokens))
        h = self.inp(X)

        feats = Tensor(timestep_features(tau, self.cfg.noise_steps, self.cfg.time_features))
        onehot = np.zeros((self.cfg.num_classes, batch))
        onehot[np.asarray(cond, dtype=np.int64), np.arange(batch)] = 1.0
        ctx = T.add(T.silu(self.time(feats)), T.matmul(self.label, Tensor(onehot)))
        ctx = T.reshape(T.expand(T.reshape(ctx, (w, batch, 1)), (w, batch, frames)), (w, tokens))
        pos = T.reshape(T.expand(T.reshape(self.frame, (w, 1, frames)), (w, batch, frames)), (w, tokens))
        h = T.add(T.add(h, ctx), pos)

        for blk in self.blocks:
            h = blk(h)
        Y = self.out(h)
        return T.permute(T.reshape(Y, (dim, batch, frames)), (1, 2, 0))
