"""Plain-loop reference trainers used as oracles for the federated code paths."""

import numpy as np

from fedcmi import autodiff as ad
from fedcmi.model import ModelParams, forward_full
from fedcmi.rng import stream


def joint_ce_grad(params: ModelParams, x0, x1, y) -> dict:
    tape = ad.Tape()
    bound = params.bind(tape)
    loss = ad.softmax_cross_entropy(forward_full(bound, x0, x1, with_ip=False).joint, y)
    return ad.backward(tape, loss)


def centralized_sgd(params: ModelParams, data, *, rounds, epochs, batch_size, lr, seed, client_id=0):
    """Mini-batch SGD on the joint cross-entropy, drawing batch orders the way client 0 would."""
    p = params.copy()
    n = len(data)
    for r in range(1, rounds + 1):
        for e in range(epochs):
            order = stream(seed, "batches", client_id, r, e).permutation(n)
            for start in range(0, n, batch_size):
                idx = order[start : start + batch_size]
                g = joint_ce_grad(p, data.x_m0[idx], data.x_m1[idx], data.y[idx])
                p.tensors = {k: v - lr * g[k] for k, v in p.tensors.items()}
    return p
