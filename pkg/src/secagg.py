"""
Secure aggregation of a group's models over a simulated network.

One-shot two-phase flow, run for one querying node (the aggregator):

  1. **Mask and share** -- every member j quantizes its parameters into the
     prime field, draws a uniform mask m_j and Shamir-shares m_j with the
     other members (evaluation point = member's position in the group + 1).
  2. **Masked upload** -- every member sends c_j = Q(w_j) + m_j to the
     aggregator.
  3. **Aggregated shares** -- every surviving member sums the mask shares it
     received from surviving uploaders and sends that single share to the
     aggregator.
  4. **Reconstruct** -- the aggregator interpolates the mask sum at zero,
     subtracts it from the ciphertext sum and dequantizes the average.

The aggregator only ever sees c_j and aggregated mask shares. Every message
that crosses a node boundary is recorded in a :class:`Transcript`.

Field arithmetic keeps elements in int64 arrays (all values < prime < 2^63);
products go through Python integers so nothing wraps.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveFloat, PositiveInt, model_validator

from src.errors import AggregationError, DomainError, ProtocolError

logger = logging.getLogger(__name__)

# Mersenne prime 2^61 - 1
DEFAULT_PRIME = (1 << 61) - 1

_MILLER_RABIN_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin for n < 3.3e24."""
    if n < 2:
        return False
    for p in _MILLER_RABIN_BASES:
        if n % p == 0:
            return n == p
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in _MILLER_RABIN_BASES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = pow(x, 2, n)
            if x == n - 1:
                break
        else:
            return False
    return True


class FieldParams(BaseModel):
    """Fixed-point encoding into the prime field."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    prime: PositiveInt = DEFAULT_PRIME
    frac_bits: PositiveInt = 16
    clip: PositiveFloat = 64.0
    max_group_size: PositiveInt = 16

    @model_validator(mode="after")
    def _check_field(self):
        if self.prime >= 1 << 63:
            raise ValueError(f"prime must fit in int64, got {self.prime}")
        if not is_prime(self.prime):
            raise ValueError(f"{self.prime} is not prime")
        if (self.max_group_size + 1) * self.clip * 2 ** self.frac_bits >= self.prime / 2:
            raise ValueError(
                f"sums of {self.max_group_size} clipped values wrap the field; "
                f"lower clip or frac_bits, or use a larger prime"
            )
        return self

    @property
    def scale(self) -> float:
        return float(2 ** self.frac_bits)


@dataclass
class QuantizationStats:
    clipped: int = 0


def quantize(x: np.ndarray, fp: FieldParams, stats: QuantizationStats | None = None) -> np.ndarray:
    """Encode reals as field elements; values beyond +-clip are clipped and counted."""
    x = np.asarray(x, dtype=np.float64)
    over = int(np.count_nonzero(np.abs(x) > fp.clip))
    if over:
        logger.debug(f"Clipping {over} parameter(s) to +-{fp.clip}")
        if stats is not None:
            stats.clipped += over
    v = np.rint(np.clip(x, -fp.clip, fp.clip) * fp.scale).astype(np.int64)
    return np.where(v < 0, v + fp.prime, v)


def dequantize(v: np.ndarray, fp: FieldParams) -> np.ndarray:
    v = np.asarray(v, dtype=np.int64)
    signed = np.where(v > fp.prime // 2, v - fp.prime, v)
    return signed.astype(np.float64) / fp.scale


def field_add(a: np.ndarray, b: np.ndarray, prime: int) -> np.ndarray:
    return (np.asarray(a, dtype=np.int64) + np.asarray(b, dtype=np.int64)) % prime


def field_sub(a: np.ndarray, b: np.ndarray, prime: int) -> np.ndarray:
    return (np.asarray(a, dtype=np.int64) - np.asarray(b, dtype=np.int64)) % prime


def field_scale(a: np.ndarray, scalar: int, prime: int) -> np.ndarray:
    product = np.asarray(a, dtype=np.int64).astype(object) * (scalar % prime) % prime
    return product.astype(np.int64)


@dataclass(frozen=True)
class ShamirShare:
    """Evaluation of the sharing polynomial(s) at a nonzero point."""

    eval_point: int
    value: np.ndarray

    def __post_init__(self):
        if self.eval_point == 0:
            raise ProtocolError("evaluation point 0 would reveal the secret")


def _evaluate_polynomial(coefficients: Sequence[np.ndarray], x: int, prime: int) -> np.ndarray:
    """Horner evaluation, coordinate-wise, in GF(prime)."""
    result = coefficients[-1].astype(object)
    for coefficient in reversed(coefficients[:-1]):
        result = (result * x + coefficient.astype(object)) % prime
    return result.astype(np.int64)


def share_secret(secret, n: int, t: int, rng: np.random.Generator, prime: int = DEFAULT_PRIME) -> list[ShamirShare]:
    """Split a field vector into n shares, any t of which reconstruct it."""
    if not 1 <= t <= n:
        raise DomainError(f"threshold {t} must lie in [1, {n}]")
    if n >= prime:
        raise DomainError(f"{n} holders need distinct nonzero points below {prime}")
    secret = np.atleast_1d(np.asarray(secret, dtype=np.int64)) % prime
    coefficients = [secret]
    for _ in range(t - 1):
        coefficients.append(np.asarray(rng.integers(0, prime, size=secret.shape, dtype=np.int64)))
    return [ShamirShare(k, _evaluate_polynomial(coefficients, k, prime)) for k in range(1, n + 1)]


def reconstruct(shares: Sequence[ShamirShare], t: int, prime: int = DEFAULT_PRIME) -> np.ndarray:
    """Lagrange interpolation at zero."""
    if len(shares) < t:
        raise ProtocolError(f"need at least {t} shares, got {len(shares)}")
    points = [s.eval_point % prime for s in shares]
    if len(set(points)) != len(points):
        raise ProtocolError(f"duplicate evaluation points: {points}")

    result = np.zeros_like(np.asarray(shares[0].value, dtype=np.int64)).astype(object)
    for i, xi in enumerate(points):
        numerator, denominator = 1, 1
        for j, xj in enumerate(points):
            if i != j:
                numerator = numerator * (-xj) % prime
                denominator = denominator * (xi - xj) % prime
        coefficient = numerator * pow(denominator, -1, prime) % prime
        result = (result + np.asarray(shares[i].value, dtype=np.int64).astype(object) * coefficient) % prime
    return result.astype(np.int64)


@dataclass(frozen=True)
class MaskedUpload:
    sender: int
    ciphertext: np.ndarray


@dataclass(frozen=True)
class Message:
    round: int
    sender: int
    receiver: int
    kind: str
    payload: np.ndarray

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.payload, dtype=np.int64).tobytes()).hexdigest()[:16]


@dataclass
class Transcript:
    """Every message of one aggregation, in send order."""

    aggregator: int
    round: int
    messages: list[Message] = field(default_factory=list)
    survivors: tuple[int, ...] = ()
    clipped: int = 0

    def send(self, sender: int, receiver: int, kind: str, payload: np.ndarray) -> None:
        self.messages.append(Message(self.round, sender, receiver, kind, np.array(payload, dtype=np.int64)))

    def of_kind(self, kind: str) -> list[Message]:
        return [m for m in self.messages if m.kind == kind]

    def audit(self, plaintexts: Mapping[int, np.ndarray]) -> bool:
        """True when no payload equals any member's quantized parameters."""
        for message in self.messages:
            for encoded in plaintexts.values():
                if message.payload.shape == encoded.shape and np.array_equal(message.payload, encoded):
                    return False
        return True

    def audit_records(self) -> Iterable[dict]:
        for m in self.messages:
            yield {"round": m.round, "sender": m.sender, "receiver": m.receiver, "kind": m.kind, "digest": m.digest()}


def write_audit_log(transcript: Transcript, audit_logger: logging.Logger) -> None:
    for record in transcript.audit_records():
        audit_logger.info("secagg", extra=record)


def secure_aggregate(
    aggregator: int,
    group: Iterable[int],
    params_of: Callable[[int], np.ndarray] | Mapping[int, np.ndarray],
    fp: FieldParams,
    t: int,
    rng: np.random.Generator,
    round: int = 0,
    dropout_prob: float = 0.0,
) -> tuple[np.ndarray, Transcript]:
    """
    Average the group's parameter vectors so the aggregator sees only the mean.

    Args:
        aggregator: id of the querying node
        group: member node ids
        params_of: member id -> real parameter vector
        fp: field encoding
        t: Shamir threshold on surviving members
        rng: seeded stream for masks, polynomial coefficients and dropouts
        round: round number stamped on transcript messages
        dropout_prob: chance a member vanishes after distributing its shares

    Returns:
        (mean parameter vector, transcript)

    Raises:
        AggregationError: fewer than t members survived
    """
    members = sorted(int(j) for j in group)
    if not members:
        raise DomainError("cannot aggregate an empty group")
    if len(members) > fp.max_group_size:
        raise DomainError(f"group of {len(members)} exceeds field headroom ({fp.max_group_size})")
    if not 1 <= t <= len(members):
        raise DomainError(f"threshold {t} must lie in [1, {len(members)}]")
    lookup = params_of if callable(params_of) else params_of.__getitem__
    prime = fp.prime
    transcript = Transcript(aggregator=aggregator, round=round)
    stats = QuantizationStats()

    # Phase 1: mask, share the mask, upload
    uploads: dict[int, MaskedUpload] = {}
    inbox: dict[int, dict[int, ShamirShare]] = {j: {} for j in members}
    for j in members:
        encoded = quantize(lookup(j), fp, stats)
        mask = rng.integers(0, prime, size=encoded.shape, dtype=np.int64)
        uploads[j] = MaskedUpload(j, field_add(encoded, mask, prime))
        for holder, share in zip(members, share_secret(mask, len(members), t, rng, prime)):
            inbox[holder][j] = share
            if holder != j:
                transcript.send(j, holder, "mask_share", share.value)

    survivors = [j for j in members if dropout_prob <= 0 or rng.random() >= dropout_prob]
    transcript.survivors = tuple(survivors)
    transcript.clipped = stats.clipped
    if stats.clipped:
        logger.warning(f"Node {aggregator} round {round}: clipped {stats.clipped} parameter value(s)")
    for j in survivors:
        transcript.send(j, aggregator, "masked_upload", uploads[j].ciphertext)
    if len(survivors) < t:
        raise AggregationError(
            f"node {aggregator} round {round}: {len(survivors)} of {len(members)} members survived, threshold {t}"
        )

    # Phase 2: aggregated mask shares over surviving uploads
    aggregated: list[ShamirShare] = []
    for holder in survivors:
        total = np.zeros_like(uploads[holder].ciphertext)
        for j in survivors:
            total = field_add(total, inbox[holder][j].value, prime)
        point = inbox[holder][survivors[0]].eval_point
        aggregated.append(ShamirShare(point, total))
        transcript.send(holder, aggregator, "aggregated_mask_share", total)

    mask_sum = reconstruct(aggregated, t, prime)
    transcript.send(aggregator, aggregator, "reconstruction", mask_sum)

    cipher_sum = np.zeros_like(mask_sum)
    for j in survivors:
        cipher_sum = field_add(cipher_sum, uploads[j].ciphertext, prime)
    field_sum = field_sub(cipher_sum, mask_sum, prime)
    return dequantize(field_sum, fp) / len(survivors), transcript
