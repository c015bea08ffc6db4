"""Domain discriminator and the memory-vs-current minimax objective.

The discriminator labels memory representations 1 and current-domain
representations 0. Updates alternate: the discriminator maximizes the core
objective on detached representations, then the encoder minimizes it (plus
the mean-discrepancy term) through a frozen copy of the discriminator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_FLOOR = 1e-12


@dataclass
class AdvBatch:
    memory_reprs: list[Tensor]
    current_reprs: list[Tensor]

    def validate(self):
        if not self.memory_reprs or not self.current_reprs:
            raise ValueError("adversarial batch needs non-empty memory and current sides")


class Discriminator:
    """Three affine layers h -> h -> h/2 -> 1 with a sigmoid output."""

    def __init__(self, hidden: int, rng: np.random.Generator):
        h2 = max(1, hidden // 2)
        self.hidden = hidden
        self.params: dict[str, Tensor] = {}

        def p(name, arr):
            self.params[name] = Tensor(arr, requires_grad=True)

        std = 0.05
        p("w1", rng.normal(0.0, std, (hidden, hidden)))
        p("b1", np.zeros(hidden))
        p("w2", rng.normal(0.0, std, (hidden, h2)))
        p("b2", np.zeros(h2))
        p("w3", rng.normal(0.0, std, (h2, 1)))
        p("b3", np.zeros(1))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def frozen_params(self) -> dict[str, Tensor]:
        """Constant copies; gradients flow only to the input representations."""
        return {k: Tensor(v.data.copy()) for k, v in self.params.items()}

    def forward(self, reprs: Tensor, params: dict[str, Tensor] | None = None) -> Tensor:
        """Probability that each row of (n, h) comes from memory."""
        P = self.params if params is None else params
        x = ad.gelu(ad.matmul(reprs, P["w1"]) + P["b1"])
        x = ad.gelu(ad.matmul(x, P["w2"]) + P["b2"])
        logit = ad.matmul(x, P["w3"]) + P["b3"]
        return ad.sigmoid(ad.reshape(logit, (reprs.data.shape[0],)))


def discriminate(disc: Discriminator, repr_vec: Tensor) -> Tensor:
    """Scalar memory-probability for a single h-vector."""
    out = disc.forward(ad.reshape(repr_vec, (1, disc.hidden)))
    return ad.index(out, 0)


def mmd(memory_reprs: Tensor, current_reprs: Tensor) -> Tensor:
    """Linear-kernel MMD: squared norm of the difference of batch means."""
    if memory_reprs.data.shape[0] == 0 or current_reprs.data.shape[0] == 0:
        raise ValueError("mmd requires non-empty representation sets")
    diff = ad.tmean(memory_reprs, axis=0) - ad.tmean(current_reprs, axis=0)
    return ad.tsum(ad.square(diff))


def mmd_rbf(memory_reprs: Tensor, current_reprs: Tensor, bandwidth: float = 1.0) -> Tensor:
    """Gaussian-kernel MMD estimate; optional alternative to the linear form."""
    def pair_kernel_mean(x: Tensor, y: Tensor) -> Tensor:
        x2 = ad.reshape(ad.tsum(ad.square(x), axis=1), (x.data.shape[0], 1))
        y2 = ad.reshape(ad.tsum(ad.square(y), axis=1), (1, y.data.shape[0]))
        d2 = x2 + y2 - 2.0 * ad.matmul(x, ad.transpose(y, (1, 0)))
        return ad.tmean(ad.exp(d2 * (-1.0 / (2.0 * bandwidth ** 2))))

    return (pair_kernel_mean(memory_reprs, memory_reprs)
            + pair_kernel_mean(current_reprs, current_reprs)
            - 2.0 * pair_kernel_mean(memory_reprs, current_reprs))


def _mmd_by_kind(mem: Tensor, cur: Tensor, kernel: str) -> Tensor:
    if kernel == "linear":
        return mmd(mem, cur)
    if kernel == "rbf":
        return mmd_rbf(mem, cur)
    raise ValueError(f"unknown mmd kernel {kernel!r}")


def _core_loss(disc: Discriminator, mem: Tensor, cur: Tensor,
               params: dict[str, Tensor] | None, include_mmd: bool,
               kernel: str = "linear") -> Tensor:
    d_mem = disc.forward(mem, params)
    d_cur = disc.forward(cur, params)
    core = -ad.tmean(ad.log(d_mem, floor=LOG_FLOOR)) \
        - ad.tmean(ad.log(Tensor(1.0) - d_cur, floor=LOG_FLOOR))
    if include_mmd:
        core = core + _mmd_by_kind(mem, cur, kernel)
    return core


def adversarial_losses(disc: Discriminator, batch: AdvBatch) -> tuple[Tensor, Tensor]:
    """(L_D, L_T): negated core for the discriminator, core for the encoder.

    L_D is built on detached representations, so minimizing it moves only
    discriminator parameters; L_T runs through a frozen discriminator copy,
    so its gradient reaches only the representations (and the encoder above
    them). The mean-discrepancy term has no discriminator gradient either
    way and is included in both values for reporting symmetry.
    """
    batch.validate()
    mem = ad.concat([ad.reshape(r, (1, disc.hidden)) for r in batch.memory_reprs], axis=0)
    cur = ad.concat([ad.reshape(r, (1, disc.hidden)) for r in batch.current_reprs], axis=0)
    mem_det = Tensor(mem.data.copy())
    cur_det = Tensor(cur.data.copy())
    l_d = -_core_loss(disc, mem_det, cur_det, None, include_mmd=True)
    l_t = _core_loss(disc, mem, cur, disc.frozen_params(), include_mmd=True)
    return l_d, l_t


def discriminator_step(disc: Discriminator, opt: ad.Adam,
                       mem_reprs: np.ndarray, cur_reprs: np.ndarray) -> float:
    """One maximizing update on detached representations; returns L_D."""
    mem = Tensor(mem_reprs)
    cur = Tensor(cur_reprs)
    l_d = -_core_loss(disc, mem, cur, None, include_mmd=True)
    opt.zero_grad()
    ad.backward(l_d)
    opt.step()
    return l_d.item()


def encoder_adversarial_loss(disc: Discriminator, mem: Tensor, cur: Tensor,
                             kernel: str = "linear") -> Tensor:
    """Encoder-side core loss through a frozen discriminator copy."""
    return _core_loss(disc, mem, cur, disc.frozen_params(), include_mmd=True,
                      kernel=kernel)


def minimax_step(disc: Discriminator, disc_opt: ad.Adam,
                 mem_pooled: Tensor, cur_pooled: Tensor) -> tuple[float, Tensor]:
    """One alternation of the two-player game on pooled (n, h) representations.

    Sub-step (a) updates the discriminator on detached copies; sub-step (b)
    returns the encoder-side loss tensor for accumulation into the joint
    objective. Neither sub-step touches the other player's parameters.
    """
    if mem_pooled.data.shape[0] == 0 or cur_pooled.data.shape[0] == 0:
        raise ValueError("minimax step needs non-empty memory and current batches")
    l_d = discriminator_step(disc, disc_opt, mem_pooled.data, cur_pooled.data)
    l_t = encoder_adversarial_loss(disc, mem_pooled, cur_pooled)
    return l_d, l_t


def discriminator_accuracy(disc: Discriminator, mem_reprs: np.ndarray,
                           cur_reprs: np.ndarray) -> float:
    """Classification accuracy at threshold 0.5, memory labeled positive."""
    p_mem = disc.forward(Tensor(mem_reprs)).data
    p_cur = disc.forward(Tensor(cur_reprs)).data
    correct = float((p_mem > 0.5).sum() + (p_cur <= 0.5).sum())
    return correct / (p_mem.size + p_cur.size)


def _probe_step(disc: Discriminator, opt: ad.Adam,
                mem_reprs: np.ndarray, cur_reprs: np.ndarray) -> float:
    """Plain classification update: memory toward 1, current toward 0.

    This is the ordinary BCE direction, not the game's L_D, which per the
    minimax sign convention trains the discriminator against these labels.
    """
    d_mem = disc.forward(Tensor(mem_reprs))
    d_cur = disc.forward(Tensor(cur_reprs))
    bce = -ad.tmean(ad.log(d_mem, floor=LOG_FLOOR)) \
        - ad.tmean(ad.log(Tensor(1.0) - d_cur, floor=LOG_FLOOR))
    opt.zero_grad()
    ad.backward(bce)
    opt.step()
    return bce.item()


def train_probe_discriminator(hidden: int, mem_reprs: np.ndarray, cur_reprs: np.ndarray,
                              rng: np.random.Generator, steps: int = 400,
                              lr: float = 1e-2, holdout_frac: float = 0.5):
    """Fit a fresh discriminator on half the data, report held-out accuracy.

    Used to check whether a representation space separates memory from
    current-domain inputs at all (the non-adversarial reference point).
    """
    def split(arr):
        idx = rng.permutation(arr.shape[0])
        cut = max(1, int(round(arr.shape[0] * (1.0 - holdout_frac))))
        return arr[idx[:cut]], arr[idx[cut:]]

    mem_tr, mem_ho = split(mem_reprs)
    cur_tr, cur_ho = split(cur_reprs)
    probe = Discriminator(hidden, rng)
    opt = ad.Adam(probe.parameters(), lr=lr)
    for _ in range(steps):
        _probe_step(probe, opt, mem_tr, cur_tr)
    return probe, discriminator_accuracy(probe, mem_ho, cur_ho)
