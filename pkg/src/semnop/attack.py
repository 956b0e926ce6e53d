"""The full adversarial-example loop against the image detector.

Each outer iteration runs a masked Carlini-Wagner optimization in image
space (perturbation confined to the inserted blocks, pixels clipped to
[-1,1]), then snaps every perturbation block to its nearest semantic NOP
sequence by Euclidean distance in byte space, and re-classifies. The loop
stops at the first benign classification or after a fixed iteration
threshold, restarting either from the failed viable example or from a
fresh random NOP initialization.
"""

from __future__ import annotations

import dataclasses
import random
import time
from dataclasses import dataclass, field

import numpy as np

from . import detector, images, isa, maskgen
from .errors import InvalidArgumentError, NumericalFailureError, UnfillableBlockError


@dataclass(frozen=True)
class AttackConfig:
    C: float = 1.0  # misclassification-loss weight
    step_size: float = 0.01
    inner_steps: int = 200  # CW gradient steps per outer iteration
    max_outer_iters: int = 10
    kappa: float = 0.0  # confidence margin of the CW loss
    restart_mode: str = "from_failed_ae"  # or "random_reinit"
    nop_limit: int | None = isa.DEFAULT_NOP_LIMIT
    seed: int = 0
    # Escalation between outer iterations. A static (C, kappa) stalls: the
    # best-loss CW iterate hugs the decision boundary and NOP substitution
    # rounds it straight back. On failure, C grows 10x while the margin is
    # unreachable; once reachable, kappa doubles so the optimal AE carries
    # enough confidence to survive quantization.
    c_search: bool = True
    kappa_search: bool = True

    def __post_init__(self):
        if self.C <= 0 or self.step_size <= 0 or self.inner_steps < 1:
            raise InvalidArgumentError("C, step_size, inner_steps must be positive")
        if self.max_outer_iters < 1:
            raise InvalidArgumentError("max_outer_iters must be >= 1")
        if self.kappa < 0:
            raise InvalidArgumentError("kappa must be >= 0")
        if self.restart_mode not in ("from_failed_ae", "random_reinit"):
            raise InvalidArgumentError(f"unknown restart_mode {self.restart_mode!r}")


@dataclass
class AttackState:
    x: images.NormalizedImage  # augmented malware image
    delta: np.ndarray  # same shape; zero off-mask at all times
    mask: np.ndarray  # binary, ones on inserted-block pixels
    iter: int = 0
    best_viable: object = None


@dataclass
class AttackResult:
    success: bool
    viable_binary: bytes
    viable_image: images.GrayImage
    outer_iters_used: int
    wall_time: float  # seconds
    expansion_rate: float
    distance_log: list = field(default_factory=list)
    final_cw_loss: float = float("nan")
    oscillated: bool = False


def cw_loss(logits, kappa: float = 0.0) -> float:
    """CW margin toward the benign class: max(logit_mal - logit_ben, -kappa)."""
    return float(max(logits[detector.MALWARE] - logits[detector.BENIGN], -kappa))


def _cw_loss_grad(kappa):
    def grad(logits):
        g = np.zeros(2)
        if logits[detector.MALWARE] - logits[detector.BENIGN] > -kappa:
            g[detector.MALWARE] = 1.0
            g[detector.BENIGN] = -1.0
        return g
    return grad


def cw_optimize(model, state: AttackState, cfg: AttackConfig) -> images.NormalizedImage:
    """Projected gradient descent on ||M*delta||_2^2 + C*f(x + M*delta).

    After every step the perturbation is re-masked and the perturbed image
    clipped back into [-1,1]. Returns the best-loss iterate; state.delta is
    left at the best perturbation found.
    """
    x = state.x.values.astype(model.dtype, copy=False)
    mask = state.mask.astype(model.dtype)
    delta = state.delta.astype(model.dtype) * mask
    loss_grad = _cw_loss_grad(cfg.kappa)

    best_loss, best_delta = np.inf, delta.copy()
    for step in range(cfg.inner_steps):
        perturbed = images.NormalizedImage(x + mask * delta, state.x.payload_len)
        logits, gnet = detector.value_and_grad(model, perturbed, loss_grad)
        f = cw_loss(logits, cfg.kappa)
        loss = float(np.sum((mask * delta) ** 2)) + cfg.C * f
        if not np.isfinite(loss):
            raise NumericalFailureError("non-finite CW loss", step)
        if loss < best_loss:
            best_loss, best_delta = loss, delta.copy()
        grad = 2.0 * mask * delta + cfg.C * mask * gnet
        delta = delta - cfg.step_size * grad
        delta *= mask
        np.clip(x + delta, -1.0, 1.0, out=delta)
        delta -= x
        delta *= mask

    state.delta = best_delta
    return images.NormalizedImage(x + mask * best_delta, state.x.payload_len)


def nearest_nop(block_pixels: np.ndarray, candidates: list) -> isa.NopSequence:
    """Argmin of Euclidean distance in byte space; ties go to the
    lexicographically smallest byte string."""
    if not candidates:
        raise UnfillableBlockError("empty candidate list")
    p = block_pixels.astype(np.int64)
    cand = np.array([list(c.bytes) for c in candidates], dtype=np.int64)
    d2 = ((cand - p[None, :]) ** 2).sum(axis=1)
    best = np.flatnonzero(d2 == d2.min())
    return min((candidates[i] for i in best), key=lambda c: c.bytes)


def ae_optimize(optimal_ae: images.GrayImage, aug: maskgen.AugmentedBinary,
                nop_lists: dict):
    """Snap each perturbation block of the optimal AE to its nearest
    semantic NOP; returns (viable AugmentedBinary, viable GrayImage, parts)."""
    flat = optimal_ae.pixels.reshape(-1)
    chosen = []
    for offset, length in aug.block_spans:
        seq = nearest_nop(flat[offset:offset + length], nop_lists[length])
        chosen.append(seq)
    viable = maskgen.replace_blocks(aug, [seq.bytes for seq in chosen])
    viable_img = images.bytes_to_image(viable.bytes, optimal_ae.width)
    return viable, viable_img, chosen


def run_attack(model, code: bytes, stream: isa.InstructionStream,
               mask_cfg: maskgen.MaskConfig, attack_cfg: AttackConfig,
               catalog=None) -> AttackResult:
    """Full attack on one code section; see module docstring."""
    start = time.perf_counter()
    code = bytes(code)
    orig_img = images.bytes_to_image(code, mask_cfg.width)
    if detector.predict(model, images.normalize(orig_img, model.dtype)) == detector.BENIGN:
        # Already misclassified: nothing to do.
        return AttackResult(
            success=True, viable_binary=code, viable_image=orig_img,
            outer_iters_used=0, wall_time=time.perf_counter() - start,
            expansion_rate=0.0, final_cw_loss=float("nan"),
        )

    candidates = isa.generate_nops(mask_cfg.block_size, attack_cfg.nop_limit,
                                   catalog=catalog)
    if not candidates:
        raise UnfillableBlockError(
            f"no semantic NOP sequence of {mask_cfg.block_size} bytes exists"
        )
    nop_lists = {mask_cfg.block_size: candidates}
    rng = random.Random(attack_cfg.seed)

    aug, img, mask = maskgen.augment(code, stream, mask_cfg,
                                     nop_candidates=candidates)
    x = images.normalize(img, model.dtype)
    state = AttackState(x=x, delta=np.zeros(x.values.shape, dtype=model.dtype),
                        mask=mask)
    seen = set()
    oscillated = False
    distance_log = []
    result = None
    c_now, kappa_now = attack_cfg.C, attack_cfg.kappa
    for outer in range(1, attack_cfg.max_outer_iters + 1):
        state.iter = outer
        step_cfg = dataclasses.replace(attack_cfg, C=c_now, kappa=kappa_now)
        optimal = cw_optimize(model, state, step_cfg)
        f_opt = cw_loss(detector.forward(model, optimal), kappa_now)
        viable, viable_img, _ = ae_optimize(images.denormalize(optimal), aug,
                                            nop_lists)
        viable_norm = images.normalize(viable_img, model.dtype)
        logits = detector.forward(model, viable_norm)
        f = cw_loss(logits, attack_cfg.kappa)
        l2 = float(np.sqrt(np.sum((state.mask * state.delta) ** 2)))
        state.best_viable = (viable, viable_img)
        if viable.bytes in seen:
            oscillated = True
        seen.add(viable.bytes)
        distance_log.append({"outer": outer, "l2": l2, "cw_loss": f,
                             "C": c_now, "kappa": kappa_now,
                             "cw_loss_optimal": f_opt})
        result = AttackResult(
            success=int(np.argmax(logits)) == detector.BENIGN,
            viable_binary=viable.bytes,
            viable_image=viable_img,
            outer_iters_used=outer,
            wall_time=time.perf_counter() - start,
            expansion_rate=maskgen.expansion_rate(viable),
            distance_log=distance_log,
            final_cw_loss=f,
            oscillated=oscillated,
        )
        if result.success:
            break
        margin_reached = f_opt <= -kappa_now + 1e-9
        if attack_cfg.c_search and not margin_reached:
            c_now *= 10.0
        if attack_cfg.kappa_search and margin_reached:
            kappa_now = max(2.0 * kappa_now, 2.0)
        if attack_cfg.restart_mode == "from_failed_ae":
            aug = viable
            x = viable_norm
        else:  # random_reinit
            aug = maskgen.replace_blocks(
                aug, [rng.choice(candidates).bytes for _ in aug.block_spans]
            )
            x = images.normalize(images.bytes_to_image(aug.bytes, mask_cfg.width),
                                 model.dtype)
        state.x = x
        state.delta = np.zeros(x.values.shape, dtype=model.dtype)
    return result
