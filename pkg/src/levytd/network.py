"""Two-output residual network: (t, x) -> (solution, non-local term)."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .stochastic import NET_INIT

__all__ = ["CHECKPOINT_HEADER", "NetConfig", "ResidualNet", "load_checkpoint", "save_checkpoint"]

CHECKPOINT_HEADER = "levytd-ckpt-v1"


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    width: int = 25
    blocks: int = 5
    activation: str = "tanh"

    def __post_init__(self):
        if self.input_dim < 2:
            raise ValueError(f"input_dim counts time plus space, must be >= 2, got {self.input_dim}")
        if self.width < 1 or self.blocks < 1:
            raise ValueError(f"width and blocks must be >= 1, got {self.width}, {self.blocks}")
        if self.activation != "tanh":
            raise ValueError(f"only tanh activation is supported, got {self.activation!r}")

    @classmethod
    def for_dimension(cls, d: int, blocks: int = 5) -> NetConfig:
        """Width 25 in one dimension, d + 10 otherwise."""
        return cls(input_dim=d + 1, width=25 if d == 1 else d + 10, blocks=blocks)

    def layer_shapes(self) -> list[tuple[str, tuple[int, int]]]:
        shapes = [("lift", (self.width, self.input_dim))]
        for i in range(self.blocks):
            shapes.append((f"block{i}.inner", (self.width, self.width)))
            shapes.append((f"block{i}.outer", (self.width, self.width)))
        shapes.append(("head", (2, self.width)))
        return shapes


class ResidualNet:
    """lift -> ``blocks`` x [tanh(W2 tanh(W1 a + b1) + b2) + a] -> head."""

    def __init__(self, config: NetConfig, params: dict[str, ad.Tensor]):
        self.config = config
        self.params = params
        for name, shape in config.layer_shapes():
            w, b = params[f"{name}.weight"], params[f"{name}.bias"]
            if w.shape != shape or b.shape != (shape[0],):
                raise ValueError(f"{name}: expected weight {shape}, got {w.shape} / {b.shape}")

    @classmethod
    def init(cls, config: NetConfig, seed=0) -> ResidualNet:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
        seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed, spawn_key=(NET_INIT,))
        rng = np.random.Generator(np.random.PCG64(seq))
        params = {}
        for name, (fan_out, fan_in) in config.layer_shapes():
            bound = 1.0 / np.sqrt(fan_in)
            params[f"{name}.weight"] = ad.Tensor(rng.uniform(-bound, bound, (fan_out, fan_in)), requires_grad=True, name=f"{name}.weight")
            params[f"{name}.bias"] = ad.Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.bias")
        return cls(config, params)

    @property
    def d(self) -> int:
        return self.config.input_dim - 1

    def parameters(self) -> list[ad.Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> ResidualNet:
        return ResidualNet(
            self.config,
            {k: ad.Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()},
        )

    def _layer(self, name, a):
        return ad.affine(self.params[f"{name}.weight"], a, self.params[f"{name}.bias"])

    def __call__(self, inputs: ad.Tensor) -> ad.Tensor:
        """Rows of (t, x) to rows of (n1, n2)."""
        if inputs.ndim != 2 or inputs.shape[1] != self.config.input_dim:
            raise ad.DimensionError(
                f"network expects rows of width {self.config.input_dim}, got shape {inputs.shape}"
            )
        a = self._layer("lift", inputs)
        for i in range(self.config.blocks):
            inner = ad.tanh(self._layer(f"block{i}.inner", a))
            a = ad.tanh(self._layer(f"block{i}.outer", inner)) + a
        return self._layer("head", a)

    def forward(self, t, x) -> tuple[np.ndarray, np.ndarray]:
        """Evaluate (n1, n2) on a batch without recording."""
        with ad.no_record():
            out = self(ad.Tensor(stack_inputs(t, x, self.d))).data
        return out[:, 0].copy(), out[:, 1].copy()

    def grad_x_n1(self, t, x) -> np.ndarray:
        """Spatial gradient of n1 for every row; the time derivative is dropped."""
        inputs = ad.Tensor(stack_inputs(t, x, self.d), requires_grad=True)
        with ad.Tape() as tape:
            n1 = self(inputs)[:, 0]
            total = ad.sum(n1)
        (g,) = tape.gradient(total, [inputs])
        return g.data[:, 1:].copy()


def stack_inputs(t, x, d: int) -> np.ndarray:
    """Rows of (t, x); ``t`` may be a scalar or one time per row."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, d) if d > 1 else x.reshape(-1, 1)
    if x.shape[1] != d:
        raise ad.DimensionError(f"expected points of dimension {d}, got shape {x.shape}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    return np.column_stack([t, x])


def save_checkpoint(net: ResidualNet, path: str | os.PathLike) -> None:
    cfg = net.config
    lines = [
        CHECKPOINT_HEADER,
        f"config input_dim={cfg.input_dim} width={cfg.width} blocks={cfg.blocks} activation={cfg.activation}",
    ]
    for name, tensor in net.params.items():
        lines.append(f"tensor {name} " + " ".join(str(s) for s in tensor.shape))
        lines.append(" ".join(f"{v:.17g}" for v in tensor.data.ravel()))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path: str | os.PathLike) -> ResidualNet:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_HEADER:
        raise ValueError(f"{path}: not a {CHECKPOINT_HEADER} checkpoint")
    fields = dict(kv.split("=", 1) for kv in lines[1].split()[1:])
    config = NetConfig(
        input_dim=int(fields["input_dim"]),
        width=int(fields["width"]),
        blocks=int(fields["blocks"]),
        activation=fields["activation"],
    )
    params = {}
    for header, values in zip(lines[2::2], lines[3::2]):
        _, name, *dims = header.split()
        shape = tuple(int(s) for s in dims)
        data = np.array([float(v) for v in values.split()], dtype=np.float64).reshape(shape)
        params[name] = ad.Tensor(data, requires_grad=True, name=name)
    return ResidualNet(config, params)
