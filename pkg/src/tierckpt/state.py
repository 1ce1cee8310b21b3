"""Synthetic training workload: sharded Adam over a least-squares problem.

Every rank holds the replicated half-precision weights and the float32
optimizer partition (master weights, first and second moments) it owns.
All arithmetic is float32 with per-step coefficients computed once in
:func:`step_coefficients`, so the sequential path here and the fused replay
kernels produce identical bits.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import kernels
from .errors import ConfigError, CorruptionError, ProtocolError

FP16_BYTES = 2
OPTIM_BYTES_PER_PARAM = 12  # master + m + v, float32 each
SAMPLE_POOL = 4
BATCH_SIZE = 2
NOISE_STD = 0.1
INITIAL_LOSS_SCALE = 65536.0


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"hp.lr: must be > 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 <= b < 1:
                raise ConfigError(f"hp.{name}: must be in [0, 1), got {b}")
        if not self.eps > 0:
            raise ConfigError(f"hp.eps: must be > 0, got {self.eps}")


def partition(phi: int, world: int) -> list[tuple[int, int]]:
    """Contiguous owned ranges; the first ``phi % world`` ranks get one extra element."""
    if phi < 1 or world < 1:
        raise ConfigError(f"partition: need phi >= 1 and world >= 1, got {phi}, {world}")
    base, extra = divmod(phi, world)
    ranges = []
    lo = 0
    for r in range(world):
        hi = lo + base + (1 if r < extra else 0)
        ranges.append((lo, hi))
        lo = hi
    return ranges


@dataclass
class TrainingState:
    phi: int
    rank: int
    world: int
    lo: int
    hi: int
    fp16_weights: np.ndarray  # float16[phi], replicated
    master_weights: np.ndarray  # float32[hi - lo]
    moment1: np.ndarray
    moment2: np.ndarray
    step: int = 0
    loss_scale: float = INITIAL_LOSS_SCALE
    # step at which the loss scaler was last advanced; only the native path touches it
    scaler_step: int = 0

    @property
    def shard_len(self) -> int:
        return self.hi - self.lo

    def nbytes(self) -> int:
        """Bytes this rank holds: replicated fp16 weights plus its optimizer partition."""
        return FP16_BYTES * self.phi + OPTIM_BYTES_PER_PARAM * self.shard_len

    def copy(self) -> "TrainingState":
        return replace(
            self,
            fp16_weights=self.fp16_weights.copy(),
            master_weights=self.master_weights.copy(),
            moment1=self.moment1.copy(),
            moment2=self.moment2.copy(),
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<QIIQQQdQ", self.phi, self.rank, self.world, self.lo, self.hi,
                             self.step, self.loss_scale, self.scaler_step))
        for arr in (self.fp16_weights, self.master_weights, self.moment1, self.moment2):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def bit_equal(self, other: "TrainingState") -> bool:
        return self.digest() == other.digest()


@dataclass(frozen=True)
class GradientShard:
    iteration: int
    rank: int
    values: np.ndarray  # float32 over the owned partition


def init_states(phi: int, world: int) -> list[TrainingState]:
    """Zero-initialised weights and moments, one state per rank."""
    weights = np.zeros(phi, dtype=np.float16)
    states = []
    for r, (lo, hi) in enumerate(partition(phi, world)):
        n = hi - lo
        states.append(TrainingState(
            phi=phi, rank=r, world=world, lo=lo, hi=hi,
            fp16_weights=weights.copy(),
            master_weights=np.zeros(n, np.float32),
            moment1=np.zeros(n, np.float32),
            moment2=np.zeros(n, np.float32),
        ))
    return states


@dataclass(frozen=True)
class RegressionProblem:
    """Per-coordinate least squares: sample s predicts ``y[s, j]`` from ``x[s, j] * w[j]``."""

    x: np.ndarray  # float32[SAMPLE_POOL, phi]
    y: np.ndarray  # float32[SAMPLE_POOL, phi]
    seed: int = field(default=0)

    def batch(self, iteration: int) -> tuple[int, ...]:
        return _batch_indices(self.seed, iteration)

    def loss(self, weights: np.ndarray) -> float:
        w = np.asarray(weights, dtype=np.float32)
        r = self.x * w - self.y
        return float(np.square(r).sum(dtype=np.float64) / r.size)


@lru_cache(maxsize=4096)
def _batch_indices(seed: int, iteration: int) -> tuple[int, ...]:
    rng = np.random.default_rng([seed, iteration, 0x5EED])
    return tuple(int(i) for i in np.sort(rng.choice(SAMPLE_POOL, size=BATCH_SIZE, replace=False)))


@lru_cache(maxsize=8)
def regression_problem(seed: int, phi: int) -> RegressionProblem:
    rng = np.random.default_rng([seed, phi])
    target = rng.standard_normal(phi).astype(np.float32)
    x = rng.uniform(0.5, 1.5, size=(SAMPLE_POOL, phi)).astype(np.float32)
    noise = (NOISE_STD * rng.standard_normal((SAMPLE_POOL, phi))).astype(np.float32)
    y = x * target + noise
    x.setflags(write=False)
    y.setflags(write=False)
    return RegressionProblem(x=x, y=y, seed=seed)


def compute_gradient(state: TrainingState, seed: int, iteration: int) -> GradientShard:
    """Minibatch MSE gradient on the rank's owned slice, from the fp16 weights."""
    if iteration != state.step:
        raise ProtocolError(f"compute_gradient: iteration {iteration} != state.step {state.step}")
    prob = regression_problem(seed, state.phi)
    lo, hi = state.lo, state.hi
    w = state.fp16_weights[lo:hi].astype(np.float32)
    acc = np.zeros(hi - lo, dtype=np.float32)
    for s in prob.batch(iteration):
        xs = prob.x[s, lo:hi]
        acc = acc + xs * (xs * w - prob.y[s, lo:hi])
    grad = np.float32(2.0 / BATCH_SIZE) * acc
    return GradientShard(iteration=iteration, rank=state.rank, values=grad)


def step_coefficients(hp: AdamHyper, step: int) -> np.ndarray:
    """float32 ``[b1, 1-b1, b2, 1-b2, bc1, bc2, lr, eps]`` for the update taking ``step`` to ``step+1``."""
    t = step + 1
    return np.array([
        hp.beta1, 1.0 - hp.beta1,
        hp.beta2, 1.0 - hp.beta2,
        1.0 - hp.beta1 ** t, 1.0 - hp.beta2 ** t,
        hp.lr, hp.eps,
    ], dtype=np.float32)


def adam_step(state: TrainingState, grad: GradientShard, hp: AdamHyper) -> TrainingState:
    """One native optimizer step on the owned partition; also ticks the loss scaler."""
    if grad.iteration != state.step:
        raise ProtocolError(f"adam_step: gradient for iteration {grad.iteration}, state at {state.step}")
    g = np.asarray(grad.values, dtype=np.float32)
    if g.shape != (state.shard_len,):
        raise CorruptionError(f"adam_step: gradient length {g.shape} != partition {state.shard_len}")
    b1, omb1, b2, omb2, bc1, bc2, lr, eps = step_coefficients(hp, state.step)
    m = b1 * state.moment1 + omb1 * g
    v = b2 * state.moment2 + omb2 * (g * g)
    mhat = m / bc1
    vhat = v / bc2
    master = state.master_weights - (lr * mhat) / (np.sqrt(vhat) + eps)
    fp16 = state.fp16_weights.copy()
    kernels.float_to_half_bits(master, fp16[state.lo:state.hi].view(np.uint16))
    return replace(
        state,
        fp16_weights=fp16,
        master_weights=master,
        moment1=m,
        moment2=v,
        step=state.step + 1,
        scaler_step=state.step + 1,
    )


def broadcast_weights(states: list[TrainingState]) -> list[TrainingState]:
    """Gather each owner's fp16 slice into one vector and hand every rank a copy."""
    if not states:
        return []
    steps = {s.step for s in states}
    if len(steps) != 1:
        raise ProtocolError(f"broadcast_weights: ranks at different steps {sorted(steps)}")
    phi = states[0].phi
    full = np.empty(phi, dtype=np.float16)
    for s in states:
        full[s.lo:s.hi] = s.fp16_weights[s.lo:s.hi]
    return [replace(s, fp16_weights=full.copy()) for s in states]


def train_step(states: list[TrainingState], seed: int, hp: AdamHyper) -> tuple[list[TrainingState], list[GradientShard]]:
    """Gradient, per-rank Adam and weight broadcast for one iteration."""
    t = states[0].step
    grads = [compute_gradient(s, seed, t) for s in states]
    updated = [adam_step(s, g, hp) for s, g in zip(states, grads)]
    return broadcast_weights(updated), grads


def global_loss(states: list[TrainingState], seed: int) -> float:
    return regression_problem(seed, states[0].phi).loss(states[0].fp16_weights)


# -- shard serialization ------------------------------------------------------

_SHARD_MAGIC = b"TCBS"
_SHARD_HEADER = struct.Struct("<4sIQIIQQQdQ")


def serialize_shard(state: TrainingState) -> bytes:
    """Owned fp16 slice plus float32 master/m/v; 14 bytes per owned parameter plus a header."""
    header = _SHARD_HEADER.pack(
        _SHARD_MAGIC, 1, state.phi, state.rank, state.world, state.lo, state.hi,
        state.step, state.loss_scale, state.scaler_step,
    )
    body = b"".join((
        np.ascontiguousarray(state.fp16_weights[state.lo:state.hi], dtype="<f2").tobytes(),
        np.ascontiguousarray(state.master_weights, dtype="<f4").tobytes(),
        np.ascontiguousarray(state.moment1, dtype="<f4").tobytes(),
        np.ascontiguousarray(state.moment2, dtype="<f4").tobytes(),
    ))
    return header + body


def shard_size(shard_len: int) -> int:
    return _SHARD_HEADER.size + (FP16_BYTES + OPTIM_BYTES_PER_PARAM) * shard_len


def deserialize_shard(payload: bytes) -> TrainingState:
    """Inverse of :func:`serialize_shard`. Non-owned fp16 entries are zero until broadcast."""
    if len(payload) < _SHARD_HEADER.size:
        raise CorruptionError("shard payload shorter than header")
    magic, fmt, phi, rank, world, lo, hi, step, loss_scale, scaler_step = _SHARD_HEADER.unpack_from(payload)
    if magic != _SHARD_MAGIC or fmt != 1:
        raise CorruptionError(f"bad shard header {magic!r} v{fmt}")
    n = hi - lo
    if len(payload) != shard_size(n):
        raise CorruptionError(f"shard payload is {len(payload)} bytes, expected {shard_size(n)}")
    if partition(phi, world)[rank] != (lo, hi):
        raise CorruptionError(f"shard for rank {rank} covers [{lo}, {hi}), not its owned range")
    off = _SHARD_HEADER.size
    fp16_slice = np.frombuffer(payload, dtype="<f2", count=n, offset=off)
    off += 2 * n
    arrays = []
    for _ in range(3):
        arrays.append(np.frombuffer(payload, dtype="<f4", count=n, offset=off).astype(np.float32))
        off += 4 * n
    weights = np.zeros(phi, dtype=np.float16)
    weights[lo:hi] = fp16_slice
    return TrainingState(
        phi=phi, rank=rank, world=world, lo=lo, hi=hi,
        fp16_weights=weights,
        master_weights=arrays[0], moment1=arrays[1], moment2=arrays[2],
        step=step, loss_scale=loss_scale, scaler_step=scaler_step,
    )


def restore_states(payloads: list[bytes]) -> list[TrainingState]:
    """Deserialize every rank's shard and rebuild the replicated weights."""
    states = sorted((deserialize_shard(p) for p in payloads), key=lambda s: s.rank)
    ranks = [s.rank for s in states]
    if ranks != list(range(states[0].world)):
        raise ProtocolError(f"restore_states: need one shard per rank, got {ranks}")
    return broadcast_weights(states)
