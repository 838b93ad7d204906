"""Server rounds, client local updates and per-module aggregation."""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterError, UsageError
from .data import Availability, ClientAssignment, MultimodalDataset
from .imbalance import (
    DiscrepancyStats,
    LossBreakdown,
    LossConfig,
    adapt_temperature,
    assemble_total_loss,
    batch_discrepancy_ratio,
    choose_teacher,
    classwise_discrepancy,
)
from .metrics import RoundMetrics, evaluate
from .model import (
    ArchConfig,
    ForwardOutputs,
    ModelParams,
    branch_logits,
    deserialize,
    forward_full,
    forward_unimodal,
    init_model,
    is_local_only,
    modality_of,
    module_of,
    serialize,
    split_base,
)
from .rng import stream

log = logging.getLogger(__name__)

STRATEGIES = ("fedcmi", "mfedavg", "mfedprox")


@dataclass(frozen=True)
class FedConfig:
    num_clients: int = 20
    clients_per_round: int = 5
    rounds: int = 60
    local_epochs: int = 5
    batch_size: int = 8  # 0 means one full-shard batch
    lr: float = 1e-3
    kappa: float = 2.0
    mu: float = 1.0
    temperature: float = 3.0
    beta: float = 1.0
    t_min: float = 0.1
    t2_scaling: bool = False
    strategy: str = "fedcmi"
    fusion: str = "concat"
    feature_dim: int = 32
    hidden_dim: int = 128
    encoder_layers: int = 2
    projector_layers: int = 2
    seed: int = 0
    workers: int = 1

    def resolved(self) -> "FedConfig":
        """Apply the strategy's forced settings and validate."""
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"unknown strategy {self.strategy!r}")
        cfg = self
        if self.strategy == "mfedavg":
            cfg = dataclasses.replace(self, kappa=0.0, mu=0.0)
        elif self.strategy == "mfedprox":
            cfg = dataclasses.replace(self, kappa=0.0)
        if not 1 <= cfg.clients_per_round <= cfg.num_clients:
            raise ParameterError("need 1 <= clients_per_round <= num_clients")
        if cfg.local_epochs < 1:
            raise ParameterError("local_epochs must be >= 1")
        if cfg.rounds < 0 or cfg.batch_size < 0 or cfg.lr < 0:
            raise ParameterError("rounds, batch_size and lr must be non-negative")
        return cfg

    @property
    def arch(self) -> str:
        return "fedcmi" if self.strategy == "fedcmi" else "plain"

    def arch_config(self, dim_m0: int, dim_m1: int, num_classes: int) -> ArchConfig:
        return ArchConfig(
            dim_m0=dim_m0,
            dim_m1=dim_m1,
            num_classes=num_classes,
            feature_dim=self.feature_dim,
            hidden_dim=self.hidden_dim,
            encoder_layers=self.encoder_layers,
            projector_layers=self.projector_layers,
            fusion=self.fusion,
            arch=self.arch,
            init_seed=self.seed,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(kappa=self.kappa, mu=self.mu, temperature=self.temperature, t2_scaling=self.t2_scaling)


@dataclass
class ClientState:
    id: int
    shard: MultimodalDataset
    availability: Availability
    ip: dict = field(default_factory=dict)  # persists across rounds, never sent

    def __post_init__(self):
        if len(self.shard) == 0:
            raise ParameterError(f"client {self.id} has an empty shard")


@dataclass
class ClientUpdate:
    client_id: int
    base: dict  # only the keys this client trained
    ip: dict
    num_samples: int
    availability: Availability
    loss: LossBreakdown
    rho_overall: float | None


@dataclass
class RoundRecord:
    round: int
    selected: list[int]
    loss: LossBreakdown
    metrics: RoundMetrics


@dataclass
class FederationResult:
    records: list[RoundRecord]
    params: ModelParams
    clients: list[ClientState]


# ---------------------------------------------------------------------------


def select_clients(num_clients: int, k: int, round_idx: int, seed: int) -> list[int]:
    if k > num_clients or k < 0:
        raise ParameterError(f"cannot select {k} of {num_clients} clients")
    return sorted(int(i) for i in stream(seed, "select", round_idx).choice(num_clients, size=k, replace=False))


def slots(key: str, arch_cfg: ArchConfig) -> list[tuple[slice | None, int | None]]:
    """Aggregation slots of one parameter as (column slice, modality) pairs.

    Under concat fusion the joint weight's column blocks read one modality's
    features each, so they aggregate separately. Everything else is a single
    slot tagged with its module's modality (None for shared parts).
    """
    if key == "joint.l0.W" and arch_cfg.fusion == "concat":
        dz = arch_cfg.feature_dim
        return [(slice(0, dz), 0), (slice(dz, 2 * dz), 1)]
    return [(None, modality_of(key))]


def contributes(availability: Availability, arch: str, key: str, slot_modality: int | None) -> bool:
    """Whether a client with ``availability`` trains and sends this slot."""
    if is_local_only(key):
        return False
    if availability is Availability.BOTH:
        return True
    m = 0 if availability is Availability.M0 else 1
    if slot_modality != m:
        return False
    module = module_of(key)
    if arch == "plain":
        # the plain network's only unimodal path is the joint head with the other branch zeroed
        return module == f"enc_m{m}" or module == "joint"
    return module != "joint"


def trained_keys(arch_cfg: ArchConfig, keys, availability: Availability) -> list[str]:
    """Parameters a client updates locally; base ones among them are what it sends back."""
    if availability is Availability.BOTH:
        return list(keys)
    return [k for k in keys if any(contributes(availability, arch_cfg.arch, k, sm) for _, sm in slots(k, arch_cfg))]


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    size = n if batch_size <= 0 else batch_size
    for start in range(0, n, size):
        yield order[start : start + size]


def _epoch_stats(params: ModelParams, shard: MultimodalDataset, cfg: FedConfig) -> DiscrepancyStats:
    lg0 = ad.value(forward_unimodal(params, 0, shard.x_m0))
    lg1 = ad.value(forward_unimodal(params, 1, shard.x_m1))
    rho_c, rho = classwise_discrepancy(lg0, lg1, shard.y, params.cfg.num_classes)
    temps = adapt_temperature(rho_c, rho, cfg.temperature, cfg.beta, cfg.t_min)
    return DiscrepancyStats(rho_c, rho, temps)


def local_update(
    client: ClientState,
    global_base: Mapping[str, np.ndarray],
    arch_cfg: ArchConfig,
    cfg: FedConfig,
    round_idx: int,
) -> ClientUpdate:
    """Run ``local_epochs`` of mini-batch SGD from the received base modules."""
    avail = client.availability
    shard = client.shard
    if shard.x_m0.shape[1] != arch_cfg.dim_m0 or shard.x_m1.shape[1] != arch_cfg.dim_m1:
        raise UsageError(f"client {client.id}: shard dims do not match the model")
    if avail is Availability.BOTH and not shard.mask.all():
        raise UsageError(f"client {client.id}: multimodal client is missing modality data")
    global_base = {k: np.asarray(v) for k, v in global_base.items()}
    params = ModelParams(arch_cfg, {**{k: v.copy() for k, v in global_base.items()}, **{k: v.copy() for k, v in client.ip.items()}})
    keys = trained_keys(arch_cfg, params.tensors, avail)
    base_keys = [k for k in keys if not is_local_only(k)]
    loss_cfg = cfg.loss_config()
    multimodal = avail is Availability.BOTH
    two_proj = arch_cfg.arch == "fedcmi"
    single = None if multimodal else (0 if avail is Availability.M0 else 1)

    teacher_all = None
    if multimodal and two_proj:
        frozen = ModelParams(arch_cfg, global_base)
        teacher_all = [ad.value(forward_unimodal(frozen, m, shard.modality(m))) for m in (0, 1)]

    breakdowns: list[LossBreakdown] = []
    rho_overall = None
    for epoch in range(cfg.local_epochs):
        stats = None
        if multimodal:
            stats = _epoch_stats(params, shard, cfg)
            rho_overall = stats.rho_overall
        rng = stream(cfg.seed, "batches", client.id, round_idx, epoch)
        for idx in _batches(len(shard), cfg.batch_size, rng):
            y = shard.y[idx]
            tape = ad.Tape()
            bound = params.bind(tape, keys)
            extra = {}
            if multimodal:
                out = forward_full(bound, shard.x_m0[idx], shard.x_m1[idx], with_ip=False)
                if two_proj:
                    rho_t = batch_discrepancy_ratio(ad.value(out.sp_logits[0]), ad.value(out.sp_logits[1]), y)
                    teacher = choose_teacher(rho_t)
                    student = 1 - teacher
                    _, s_logits = branch_logits(bound, "ip", student, out.z[student])
                    extra = dict(
                        stats=dataclasses.replace(stats, rho_batch=rho_t),
                        teacher=teacher,
                        teacher_logits=teacher_all[teacher][idx],
                        student_logits=s_logits,
                    )
                kind = "multimodal"
            else:
                logits = forward_unimodal(bound, single, shard.modality(single)[idx])
                sp = [None, None]
                sp[single] = logits
                out = ForwardOutputs(None, sp, [None, None], [None, None], [None, None], [None, None])
                kind = "unimodal"
            local_b = {k: bound.tensors[k] for k in base_keys}
            global_b = {k: global_base[k] for k in base_keys}
            loss, bd = assemble_total_loss(out, y, loss_cfg, local_b, global_b, client_kind=kind, modality=single, **extra)
            grads = ad.backward(tape, loss)
            params.tensors.update(ad.sgd_step({k: params.tensors[k] for k in keys}, grads, cfg.lr))
            breakdowns.append(bd)

    return ClientUpdate(
        client_id=client.id,
        base={k: params.tensors[k] for k in base_keys},
        ip={k: v for k, v in params.tensors.items() if is_local_only(k)},
        num_samples=len(shard),
        availability=avail,
        loss=LossBreakdown.mean(breakdowns),
        rho_overall=rho_overall,
    )


def aggregation_weights(updates: Sequence[ClientUpdate], arch_cfg: ArchConfig, key: str, slot_modality=None) -> dict[int, float]:
    """Sample-count weights over the clients that sent a slot, renormalised to sum to 1."""
    contrib = [u for u in updates if key in u.base and contributes(u.availability, arch_cfg.arch, key, slot_modality)]
    total = sum(u.num_samples for u in contrib)
    return {u.client_id: u.num_samples / total for u in contrib}


def aggregate(updates: Sequence[ClientUpdate], previous: Mapping[str, np.ndarray], arch_cfg: ArchConfig) -> dict[str, np.ndarray]:
    """Per-slot weighted average over contributing clients in ascending id order.

    Slots nobody sent keep their previous global value.
    """
    if not updates:
        raise UsageError("nothing to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    out = {}
    for key, prev in previous.items():
        new = np.array(prev, dtype=np.float64, copy=True)
        for cols, sm in slots(key, arch_cfg):
            weights = aggregation_weights(ordered, arch_cfg, key, sm)
            if not weights:
                continue
            sel = (slice(None), cols) if cols is not None else slice(None)
            acc = np.zeros_like(new[sel])
            for u in ordered:
                if u.client_id in weights:
                    acc = acc + weights[u.client_id] * u.base[key][sel]
            new[sel] = acc
        out[key] = new
    return out


def make_clients(train: MultimodalDataset, assignment: ClientAssignment, init: ModelParams) -> list[ClientState]:
    _, ip = split_base(init)
    return [
        ClientState(i, train.subset(idx).with_availability(av), av, {k: v.copy() for k, v in ip.items()})
        for i, (idx, av) in enumerate(zip(assignment.indices, assignment.availability))
    ]


def _assemble(template: ModelParams, base: Mapping, local: Mapping) -> ModelParams:
    """Global model in the template's key order; the server keeps its initial IP."""
    merged = {**base, **local}
    return ModelParams(template.cfg, {k: merged[k] for k in template.tensors})


PayloadHook = Callable[[str, int, int, bytes], None]


def run_federation(
    cfg: FedConfig,
    train: MultimodalDataset,
    test: MultimodalDataset,
    assignment: ClientAssignment,
    *,
    payload_hook: PayloadHook | None = None,
    round_hook: Callable[[RoundRecord, ModelParams], None] | None = None,
    workers: int | None = None,
) -> FederationResult:
    """Select, distribute, train locally, aggregate and evaluate for ``cfg.rounds`` rounds.

    Every base payload crosses the client boundary in checkpoint byte form, so
    ``payload_hook(direction, client_id, round, payload)`` sees exactly what
    would go over the wire.
    """
    cfg = cfg.resolved()
    if assignment.num_clients != cfg.num_clients:
        raise ParameterError(f"assignment has {assignment.num_clients} clients, config {cfg.num_clients}")
    arch_cfg = cfg.arch_config(train.x_m0.shape[1], train.x_m1.shape[1], train.num_classes)
    model = init_model(arch_cfg)
    clients = make_clients(train, assignment, model)
    global_base, server_ip = split_base(model)
    records: list[RoundRecord] = []
    workers = cfg.workers if workers is None else workers

    def run_client(cid: int, down: bytes, r: int) -> ClientUpdate:
        _, received = deserialize(down)
        return local_update(clients[cid], received, arch_cfg, cfg, r)

    for r in range(1, cfg.rounds + 1):
        selected = select_clients(cfg.num_clients, cfg.clients_per_round, r, cfg.seed)
        down = serialize(arch_cfg, global_base)
        for cid in selected:
            if payload_hook:
                payload_hook("down", cid, r, down)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                updates = list(pool.map(lambda c: run_client(c, down, r), selected))
        else:
            updates = [run_client(c, down, r) for c in selected]
        received = []
        for upd in sorted(updates, key=lambda u: u.client_id):
            up = serialize(arch_cfg, upd.base)
            if payload_hook:
                payload_hook("up", upd.client_id, r, up)
            _, base = deserialize(up)
            clients[upd.client_id].ip = upd.ip
            received.append(dataclasses.replace(upd, base=base))
        global_base = aggregate(received, global_base, arch_cfg)
        current = _assemble(model, global_base, server_ip)
        metrics = evaluate(current, test)
        metrics.loss = LossBreakdown.mean([u.loss for u in received])
        rhos = [u.rho_overall for u in received if u.rho_overall is not None]
        metrics.rho_mean = float(np.mean(rhos)) if rhos else 1.0
        rec = RoundRecord(r, selected, metrics.loss, metrics)
        records.append(rec)
        if round_hook:
            round_hook(rec, current)
        log.debug("round %d joint=%.4f m0=%.4f m1=%.4f", r, metrics.joint_acc, metrics.acc_m0, metrics.acc_m1)

    return FederationResult(records, _assemble(model, global_base, server_ip), clients)
