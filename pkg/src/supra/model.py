"""The full neural operator: lifting, residual attention blocks, projection head.

Each block projects the hidden channel functions onto the model's basis, runs
multi-head attention between the coordinate vectors, reconstructs point
samples, and follows with a pointwise two-layer MLP; both sub-steps are
residual.  Normalization placement depends on the configured kind: instance
normalization acts on channel functions before projection, layer
normalization acts on coordinate vectors after projection (and over channels
at each sample point before the MLP).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import HeadParams, supra_attention
from .autodiff import Tape, Tensor
from .basis import Basis
from .ndbin import read_ndbin, write_ndbin

__all__ = ["ModelConfig", "SupraOperator", "ModelError", "save_model", "load_model"]

FORMAT_VERSION = 1
NORM_KINDS = ("layer", "instance", "none")


class ModelError(ValueError):
    """Invalid model configuration, geometry mismatch, or archive problem."""


@dataclass
class ModelConfig:
    in_channels: int = 1
    out_channels: int = 1
    hidden: int = 32
    layers: int = 4
    n_basis: int = 64
    heads: int = 4
    norm: str = "instance"
    mlp_ratio: int = 2
    seed: int = 0
    use_coords: bool = True

    def validate(self) -> None:
        if not (self.hidden >= self.heads >= 1):
            raise ModelError(f"need hidden >= heads >= 1, got {self.hidden} and {self.heads}")
        if self.n_basis % self.heads != 0:
            raise ModelError(f"n_basis {self.n_basis} not divisible by {self.heads} heads")
        if self.layers < 1:
            raise ModelError("layers must be >= 1")
        if self.norm not in NORM_KINDS:
            raise ModelError(f"unknown norm {self.norm!r}, expected one of {NORM_KINDS}")
        if self.in_channels < 1 or self.out_channels < 1 or self.mlp_ratio < 1:
            raise ModelError("channel counts and mlp_ratio must be >= 1")

    @property
    def lift_inputs(self) -> int:
        return self.in_channels + (2 if self.use_coords else 0)


def _param_plan(config: ModelConfig) -> list[tuple[str, tuple, str]]:
    """Ordered (name, shape, init kind) for every parameter; fixes RNG order."""
    c, n = config.hidden, config.n_basis
    d = n // config.heads
    r = config.mlp_ratio
    plan: list[tuple[str, tuple, str]] = [
        ("lift.weight", (c, config.lift_inputs), "uniform"),
        ("lift.bias", (c,), "zero"),
    ]
    for i in range(config.layers):
        if config.norm != "none":
            norm1_size = c if config.norm == "instance" else n
            plan.append((f"block{i}.norm1.gain", (norm1_size,), "one"))
            plan.append((f"block{i}.norm1.bias", (norm1_size,), "zero"))
        for j in range(config.heads):
            plan.append((f"block{i}.head{j}.wq", (d, d), "uniform"))
            plan.append((f"block{i}.head{j}.wk", (d, d), "uniform"))
            plan.append((f"block{i}.head{j}.wv", (d, d), "uniform"))
        if config.norm != "none":
            plan.append((f"block{i}.norm2.gain", (c,), "one"))
            plan.append((f"block{i}.norm2.bias", (c,), "zero"))
        plan.append((f"block{i}.mlp.w1", (r * c, c), "uniform"))
        plan.append((f"block{i}.mlp.b1", (r * c,), "zero"))
        plan.append((f"block{i}.mlp.w2", (c, r * c), "uniform"))
        plan.append((f"block{i}.mlp.b2", (c,), "zero"))
    plan.append(("head.weight", (config.out_channels, c), "uniform"))
    plan.append(("head.bias", (config.out_channels,), "zero"))
    return plan


class SupraOperator:
    """Neural operator bound to one shared basis; parameters are numpy arrays."""

    def __init__(self, config: ModelConfig, basis: Basis,
                 params: dict[str, np.ndarray] | None = None):
        config.validate()
        self.config = config
        self.basis = basis
        self.plan = _param_plan(config)
        if params is None:
            params = self._init_params()
        for name, shape, _ in self.plan:
            if name not in params or params[name].shape != shape:
                got = params.get(name)
                raise ModelError(
                    f"parameter {name}: expected shape {shape}, got "
                    f"{None if got is None else got.shape}")
        self.params = {name: np.asarray(params[name], dtype=np.float64)
                       for name, _, _ in self.plan}

    def _init_params(self) -> dict[str, np.ndarray]:
        # weights uniform(+-1/sqrt(fan_in)); biases zero; norm gains one
        rng = np.random.default_rng(self.config.seed)
        out = {}
        for name, shape, kind in self.plan:
            if kind == "uniform":
                bound = 1.0 / np.sqrt(shape[-1])
                out[name] = rng.uniform(-bound, bound, size=shape)
            elif kind == "one":
                out[name] = np.ones(shape)
            else:
                out[name] = np.zeros(shape)
        return out

    def num_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape, _ in self.plan)

    # -- parameter packing (used by the finite-difference checker) ----------

    def pack_params(self) -> np.ndarray:
        return np.concatenate([self.params[name].reshape(-1) for name, _, _ in self.plan])

    def unpack_params(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        out, pos = {}, 0
        for name, shape, _ in self.plan:
            size = int(np.prod(shape))
            out[name] = flat[pos:pos + size].reshape(shape)
            pos += size
        if pos != flat.size:
            raise ModelError(f"flat vector has {flat.size} entries, expected {pos}")
        return out

    # -- forward -------------------------------------------------------------

    def wrap_params(self, tape: Tape, trainable: bool = True) -> dict[str, Tensor]:
        make = tape.param if trainable else tape.constant
        return {name: make(arr) for name, arr in self.params.items()}

    def wrap_flat(self, tape: Tape, theta: Tensor) -> dict[str, Tensor]:
        """Slice a packed parameter vector into named taped parameters."""
        row = ad.reshape(theta, (1, theta.value.size))
        out, pos = {}, 0
        for name, shape, _ in self.plan:
            size = int(np.prod(shape))
            out[name] = ad.reshape(ad.slice_cols(row, pos, pos + size), shape)
            pos += size
        return out

    def forward_from(self, tape: Tape, params: dict[str, Tensor],
                     inputs: np.ndarray) -> Tensor:
        inputs = np.asarray(inputs, dtype=np.float64)
        cfg = self.config
        if inputs.ndim != 2 or inputs.shape[0] != cfg.in_channels:
            raise ModelError(
                f"inputs must be {cfg.in_channels} x M, got shape {inputs.shape}")
        if inputs.shape[1] != self.basis.num_points:
            raise ModelError(
                f"inputs sampled at {inputs.shape[1]} points, basis has {self.basis.num_points}")
        if cfg.use_coords:
            inputs = np.vstack([inputs, self.basis.points.T])
        x = tape.constant(inputs)
        hidden = self._affine(params, "lift", x)
        for i in range(cfg.layers):
            hidden = self._block(tape, params, i, hidden)
        return self._affine(params, "head", hidden)

    def _affine(self, params, prefix: str, x: Tensor) -> Tensor:
        w, b = params[f"{prefix}.weight"], params[f"{prefix}.bias"]
        out_dim = w.value.shape[0]
        return ad.add(ad.matmul(w, x), ad.reshape(b, (out_dim, 1)))

    def _block(self, tape: Tape, params, i: int, hidden: Tensor) -> Tensor:
        cfg = self.config
        heads = [HeadParams(params[f"block{i}.head{j}.wq"],
                            params[f"block{i}.head{j}.wk"],
                            params[f"block{i}.head{j}.wv"])
                 for j in range(cfg.heads)]

        if cfg.norm == "instance":
            pre = ad.instance_norm(hidden, params[f"block{i}.norm1.gain"],
                                   params[f"block{i}.norm1.bias"])
            coords = self.basis.project(pre)
        elif cfg.norm == "layer":
            coords = ad.layer_norm(self.basis.project(hidden),
                                   params[f"block{i}.norm1.gain"],
                                   params[f"block{i}.norm1.bias"])
        else:
            coords = self.basis.project(hidden)
        mixed = self.basis.reconstruct(supra_attention(coords, heads))
        u1 = ad.add(hidden, mixed)

        if cfg.norm == "instance":
            pre2 = ad.instance_norm(u1, params[f"block{i}.norm2.gain"],
                                    params[f"block{i}.norm2.bias"])
        elif cfg.norm == "layer":
            # per-sample normalization over channels: transpose, normalize rows
            pre2 = ad.transpose(ad.layer_norm(ad.transpose(u1),
                                              params[f"block{i}.norm2.gain"],
                                              params[f"block{i}.norm2.bias"]))
        else:
            pre2 = u1
        h1 = ad.gelu(ad.add(ad.matmul(params[f"block{i}.mlp.w1"], pre2),
                            ad.reshape(params[f"block{i}.mlp.b1"], (-1, 1))))
        h2 = ad.add(ad.matmul(params[f"block{i}.mlp.w2"], h1),
                    ad.reshape(params[f"block{i}.mlp.b2"], (-1, 1)))
        return ad.add(u1, h2)

    def predict(self, inputs: np.ndarray, geometry: str | None = None) -> np.ndarray:
        """Inference on one sample; verifies the sample geometry if given."""
        if geometry is not None:
            self.check_geometry(geometry)
        tape = Tape()
        return self.forward_from(tape, self.wrap_params(tape, trainable=False), inputs).value

    def check_geometry(self, geometry: str) -> None:
        expected = self.basis.geometry_ref()
        if geometry != expected:
            raise ModelError(
                f"sample geometry {geometry!r} does not match model basis geometry "
                f"{expected!r}")


# ---------------------------------------------------------------------------
# archive: directory of ndbin tensors plus config.json


def save_model(model: SupraOperator, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "supra-model",
        "version": FORMAT_VERSION,
        "config": asdict(model.config),
        "basis_fingerprint": model.basis.fingerprint(),
        "geometry": model.basis.geometry_ref(),
        "params": {name: list(shape) for name, shape, _ in model.plan},
    }
    (directory / "config.json").write_text(json.dumps(manifest, indent=2))
    for name in model.params:
        write_ndbin(directory / f"{name}.ndbin", model.params[name])


def load_model(directory, basis: Basis) -> SupraOperator:
    directory = Path(directory)
    manifest = json.loads((directory / "config.json").read_text())
    if manifest.get("format") != "supra-model" or manifest.get("version") != FORMAT_VERSION:
        raise ModelError(f"{directory}: not a recognized model archive")
    stored = manifest["basis_fingerprint"]
    actual = basis.fingerprint()
    if stored != actual:
        raise ModelError(
            f"model archive was built for basis {stored} but got basis {actual}")
    config = ModelConfig(**manifest["config"])
    params = {}
    for name, shape in manifest["params"].items():
        arr = read_ndbin(directory / f"{name}.ndbin")
        if list(arr.shape) != shape:
            raise ModelError(
                f"{directory}: parameter {name} has shape {list(arr.shape)}, archive "
                f"manifest says {shape}")
        params[name] = arr
    return SupraOperator(config, basis, params=params)
