"""Two-projector multimodal network and the plain fusion baseline.

Parameter keys follow ``<module>.l<i>.<W|b>``, e.g. ``enc_m0.l0.W``. Modules:

* ``enc_m{0,1}``  per-modality encoder MLP (ReLU on its output features)
* ``sp_m{0,1}``   self-projector, feeds fusion and the shared classifier
* ``ip_m{0,1}``   infiltration projector, trained only by distillation; never
  leaves the client
* ``sc_m{0,1}``   linear shared classifier applied to both SP and IP outputs
* ``joint``       linear classifier on the fused SP features

The ``plain`` architecture keeps only the encoders and ``joint``.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterError, ShapeError
from .rng import stream

CKPT_MAGIC = b"FCMP"
CKPT_VERSION = 1

MODALITIES = (0, 1)


@dataclass(frozen=True)
class ArchConfig:
    dim_m0: int
    dim_m1: int
    num_classes: int
    feature_dim: int = 16
    hidden_dim: int = 32
    encoder_layers: int = 2
    projector_layers: int = 2
    fusion: str = "concat"
    arch: str = "fedcmi"
    init_seed: int = 0

    def validate(self) -> None:
        if min(self.dim_m0, self.dim_m1, self.feature_dim, self.hidden_dim) < 1:
            raise ParameterError("all dimensions must be >= 1")
        if self.num_classes < 2:
            raise ParameterError("num_classes must be >= 2")
        if self.encoder_layers < 1 or self.projector_layers < 1:
            raise ParameterError("layer counts must be >= 1")
        if self.fusion not in ("concat", "sum"):
            raise ParameterError(f"unknown fusion {self.fusion!r}")
        if self.arch not in ("fedcmi", "plain"):
            raise ParameterError(f"unknown arch {self.arch!r}")

    def input_dim(self, m: int) -> int:
        return (self.dim_m0, self.dim_m1)[m]

    @property
    def fused_dim(self) -> int:
        return 2 * self.feature_dim if self.fusion == "concat" else self.feature_dim


def module_of(key: str) -> str:
    return key.split(".", 1)[0]


def is_local_only(key: str) -> bool:
    return module_of(key).startswith("ip_")


def modality_of(key: str) -> int | None:
    """Modality a per-modality module belongs to, or None for ``joint``."""
    mod = module_of(key)
    if mod.endswith("_m0"):
        return 0
    if mod.endswith("_m1"):
        return 1
    return None


@dataclass
class ModelParams:
    cfg: ArchConfig
    tensors: dict = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: np.array(ad.value(v), copy=True) for k, v in self.tensors.items()})

    def bind(self, tape: ad.Tape, keys=None) -> "ModelParams":
        """View whose selected tensors are leaves on ``tape``."""
        return ModelParams(self.cfg, tape.bind(self.tensors, keys))

    def num_params(self, keys=None) -> int:
        keys = self.tensors if keys is None else keys
        return int(sum(np.size(ad.value(self.tensors[k])) for k in keys))

    def keys_of(self, module: str) -> list[str]:
        return [k for k in self.tensors if module_of(k) == module]

    def modules(self) -> list[str]:
        return list(dict.fromkeys(module_of(k) for k in self.tensors))

    def has(self, module: str) -> bool:
        return any(module_of(k) == module for k in self.tensors)


@dataclass
class ForwardOutputs:
    joint: object
    sp_logits: list  # per modality, None for plain arch
    ip_logits: list
    z: list
    z_sp: list
    z_ip: list


# ---------------------------------------------------------------------------
# construction


def _layer_dims(d_in: int, d_hidden: int, d_out: int, n_layers: int) -> list[tuple[int, int]]:
    dims = [d_in] + [d_hidden] * (n_layers - 1) + [d_out]
    return list(zip(dims[:-1], dims[1:]))


def _init_mlp(tensors: dict, name: str, dims, rng: np.random.Generator) -> None:
    for i, (fan_in, fan_out) in enumerate(dims):
        tensors[f"{name}.l{i}.W"] = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        tensors[f"{name}.l{i}.b"] = np.zeros(fan_out)


def init_model(cfg: ArchConfig) -> ModelParams:
    """He-scaled weights, zero biases; a pure function of ``cfg``."""
    cfg.validate()
    dz = cfg.feature_dim
    t: dict[str, np.ndarray] = {}
    layout = []
    for m in MODALITIES:
        layout.append((f"enc_m{m}", _layer_dims(cfg.input_dim(m), cfg.hidden_dim, dz, cfg.encoder_layers)))
    if cfg.arch == "fedcmi":
        for kind in ("sp", "ip"):
            for m in MODALITIES:
                layout.append((f"{kind}_m{m}", _layer_dims(dz, dz, dz, cfg.projector_layers)))
        for m in MODALITIES:
            layout.append((f"sc_m{m}", [(dz, cfg.num_classes)]))
    layout.append(("joint", [(cfg.fused_dim, cfg.num_classes)]))
    for name, dims in layout:
        _init_mlp(t, name, dims, stream(cfg.init_seed, f"init/{name}"))
    return ModelParams(cfg, t)


# ---------------------------------------------------------------------------
# forward pieces


def mlp(p: ModelParams, name: str, x):
    """Affine layers of module ``name`` with ReLU between them (not after the last)."""
    t = p.tensors
    i = 0
    h = x
    while f"{name}.l{i}.W" in t:
        if i:
            h = ad.relu(h)
        h = ad.affine(h, t[f"{name}.l{i}.W"], t[f"{name}.l{i}.b"])
        i += 1
    if i == 0:
        raise KeyError(f"module {name!r} not present")
    return h


def _check_input(p: ModelParams, m: int, x) -> None:
    xv = ad.value(x)
    if xv.ndim != 2 or xv.shape[1] != p.cfg.input_dim(m):
        raise ShapeError(f"modality m{m} input must have {p.cfg.input_dim(m)} columns, got shape {xv.shape}")


def encode(p: ModelParams, m: int, x):
    _check_input(p, m, x)
    return ad.relu(mlp(p, f"enc_m{m}", x))


def fuse(p: ModelParams, h0, h1):
    return ad.concat(h0, h1) if p.cfg.fusion == "concat" else ad.add(h0, h1)


def joint_head(p: ModelParams, fused):
    return mlp(p, "joint", fused)


def branch_logits(p: ModelParams, kind: str, m: int, z):
    """``SC_m(kind_m(z))`` for kind in {"sp", "ip"}; returns (features, logits)."""
    h = mlp(p, f"{kind}_m{m}", z)
    return h, mlp(p, f"sc_m{m}", h)


def forward_full(p: ModelParams, x_m0, x_m1, with_ip: bool = True) -> ForwardOutputs:
    xs = (x_m0, x_m1)
    z = [encode(p, m, xs[m]) for m in MODALITIES]
    if p.cfg.arch == "plain":
        return ForwardOutputs(joint_head(p, fuse(p, z[0], z[1])), [None, None], [None, None], z, [None, None], [None, None])
    z_sp, sp_logits, z_ip, ip_logits = [], [], [None, None], [None, None]
    for m in MODALITIES:
        h, lg = branch_logits(p, "sp", m, z[m])
        z_sp.append(h)
        sp_logits.append(lg)
        if with_ip:
            z_ip[m], ip_logits[m] = branch_logits(p, "ip", m, z[m])
    joint = joint_head(p, fuse(p, z_sp[0], z_sp[1]))
    return ForwardOutputs(joint, sp_logits, ip_logits, z, z_sp, z_ip)


def forward_unimodal(p: ModelParams, m: int, x):
    """Logits from one modality alone.

    For the two-projector network this is the self-projector branch through
    the shared classifier. For the plain network it is the joint head with the
    missing modality's fused contribution set to zero.
    """
    if m not in MODALITIES:
        raise ParameterError(f"modality must be 0 or 1, got {m!r}")
    z = encode(p, m, x)
    if p.cfg.arch == "fedcmi":
        return branch_logits(p, "sp", m, z)[1]
    zeros = np.zeros((ad.value(z).shape[0], p.cfg.feature_dim))
    pair = (z, zeros) if m == 0 else (zeros, z)
    return joint_head(p, fuse(p, *pair))


def teacher_logits(p: ModelParams, m: int, x) -> np.ndarray:
    """Untraced SP-branch logits, used for the frozen global teacher."""
    return ad.value(forward_unimodal(p, m, x))


# ---------------------------------------------------------------------------
# base / local split and checkpoints


def split_base(p: ModelParams) -> tuple[dict, dict]:
    base = {k: v for k, v in p.tensors.items() if not is_local_only(k)}
    local = {k: v for k, v in p.tensors.items() if is_local_only(k)}
    return base, local


def serialize(cfg: ArchConfig, tensors: Mapping[str, np.ndarray]) -> bytes:
    """Little-endian checkpoint: magic, version, JSON header, then f64 blocks in key order."""
    keys = list(tensors)
    header = json.dumps(
        {"arch": dataclasses.asdict(cfg), "keys": [[k, list(np.shape(tensors[k]))] for k in keys]},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    blocks = [np.ascontiguousarray(ad.value(tensors[k]), dtype="<f8").tobytes() for k in keys]
    return CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)) + header + b"".join(blocks)


def deserialize(buf: bytes) -> tuple[ArchConfig, dict[str, np.ndarray]]:
    if buf[:4] != CKPT_MAGIC:
        raise ValueError("not an FCMP checkpoint")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(buf[12 : 12 + hlen].decode("utf-8"))
    cfg = ArchConfig(**header["arch"])
    off = 12 + hlen
    out = {}
    for key, shape in header["keys"]:
        n = int(np.prod(shape)) if shape else 1
        out[key] = np.frombuffer(buf, "<f8", n, off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(buf):
        raise ValueError("checkpoint has trailing bytes")
    return cfg, out


def payload_keys(buf: bytes) -> list[str]:
    hlen = struct.unpack_from("<I", buf, 8)[0]
    return [k for k, _ in json.loads(buf[12 : 12 + hlen].decode("utf-8"))["keys"]]
