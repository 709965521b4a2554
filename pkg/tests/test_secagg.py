import json
from itertools import combinations

import numpy as np
import pytest
from pydantic import ValidationError

from src.errors import AggregationError, DomainError, ProtocolError
from src.logging_setup import close_audit_log, open_audit_log
from src.secagg import (
    DEFAULT_PRIME,
    FieldParams,
    QuantizationStats,
    ShamirShare,
    dequantize,
    field_add,
    is_prime,
    quantize,
    reconstruct,
    secure_aggregate,
    share_secret,
    write_audit_log,
)


class PinnedRng:
    """Every coefficient draw returns the same value."""

    def __init__(self, value):
        self.value = value

    def integers(self, low, high, size=None, dtype=np.int64):
        return np.full(size, self.value, dtype=dtype)


class ScriptedDropouts:
    """Real generator for masks, scripted values for dropout draws."""

    def __init__(self, seed, draws):
        self._rng = np.random.default_rng(seed)
        self._draws = list(draws)

    def integers(self, *args, **kwargs):
        return self._rng.integers(*args, **kwargs)

    def random(self):
        return self._draws.pop(0)


@pytest.fixture
def fp():
    return FieldParams()


class TestFieldParams:

    def test_defaults(self, fp):
        assert fp.prime == DEFAULT_PRIME == 2 ** 61 - 1
        assert fp.frac_bits == 16
        assert fp.clip == 64.0

    def test_composite_modulus_rejected(self):
        with pytest.raises(ValidationError):
            FieldParams(prime=2 ** 61 + 1)

    def test_headroom_enforced(self):
        # 17 * clip * 2**16 must stay below prime / 2, so clip tops out near 1.03e12
        assert FieldParams(clip=1e12).clip == 1e12
        for clip in (1.1e12, 1e13):
            with pytest.raises(ValidationError):
                FieldParams(clip=clip)

    @pytest.mark.parametrize("n, expected", [(97, True), (2 ** 61 - 1, True), (91, False), (1, False)])
    def test_is_prime(self, n, expected):
        assert is_prime(n) is expected


class TestQuantization:

    def test_known_encodings(self, fp):
        encoded = quantize(np.array([1.5, -1.0, 0.0]), fp)
        assert encoded.tolist() == [98304, fp.prime - 65536, 0]

    def test_round_trip_within_half_step(self, fp, rng):
        x = rng.uniform(-64, 64, size=10_000)
        assert np.max(np.abs(dequantize(quantize(x, fp), fp) - x)) <= 2.0 ** -17

    def test_clipping_is_counted(self, fp):
        stats = QuantizationStats()
        encoded = quantize(np.array([100.0, -80.0, 3.0]), fp, stats)
        assert stats.clipped == 2
        np.testing.assert_array_equal(dequantize(encoded, fp), [64.0, -64.0, 3.0])


class TestShamir:

    def test_linear_polynomial_over_small_field(self):
        shares = share_secret(5, n=3, t=2, rng=PinnedRng(3), prime=97)
        assert [(s.eval_point, int(s.value[0])) for s in shares] == [(1, 8), (2, 11), (3, 14)]
        assert reconstruct([shares[0], shares[2]], t=2, prime=97).tolist() == [5]

    def test_every_t_subset_reconstructs(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 7))
            t = int(rng.integers(1, n + 1))
            secret = rng.integers(0, DEFAULT_PRIME, size=4, dtype=np.int64)
            shares = share_secret(secret, n, t, rng)
            for subset in combinations(shares, t):
                np.testing.assert_array_equal(reconstruct(list(subset), t), secret)

    def test_shares_are_linear(self, rng):
        a = rng.integers(0, DEFAULT_PRIME, size=5, dtype=np.int64)
        b = rng.integers(0, DEFAULT_PRIME, size=5, dtype=np.int64)
        sa, sb = share_secret(a, 4, 3, rng), share_secret(b, 4, 3, rng)
        summed = [ShamirShare(x.eval_point, field_add(x.value, y.value, DEFAULT_PRIME)) for x, y in zip(sa, sb)]
        np.testing.assert_array_equal(reconstruct(summed[1:], 3), field_add(a, b, DEFAULT_PRIME))

    def test_too_few_shares(self, rng):
        shares = share_secret(np.array([9]), 4, 3, rng)
        with pytest.raises(ProtocolError):
            reconstruct(shares[:2], 3)

    def test_duplicate_points(self, rng):
        shares = share_secret(np.array([9]), 3, 2, rng)
        with pytest.raises(ProtocolError):
            reconstruct([shares[0], shares[0]], 2)

    def test_threshold_above_holders(self, rng):
        with pytest.raises(DomainError):
            share_secret(np.array([1]), 2, 3, rng)

    def test_zero_evaluation_point(self):
        with pytest.raises(ProtocolError):
            ShamirShare(0, np.array([1]))


class TestSecureAggregate:

    def test_identical_vectors(self, fp, rng):
        w = rng.normal(size=20)
        mean, _ = secure_aggregate(0, [1, 2, 3], {1: w, 2: w, 3: w}, fp, 3, rng)
        assert np.max(np.abs(mean - w)) <= 2.0 ** -17

    def test_matches_plaintext_mean(self, fp, rng):
        worst = 0.0
        for _ in range(100):
            params = {j: rng.normal(scale=3.0, size=50) for j in (4, 7, 9)}
            mean, transcript = secure_aggregate(0, params, params, fp, 3, rng)
            worst = max(worst, np.max(np.abs(mean - np.mean(list(params.values()), axis=0))))
            assert transcript.audit({j: quantize(w, fp) for j, w in params.items()})
        assert worst <= 1e-4

    def test_field_domain_is_exact(self, fp, rng):
        params = {j: rng.normal(size=30) for j in (1, 2, 5)}
        _, transcript = secure_aggregate(0, params, params, fp, 3, rng)
        cipher_sum = np.zeros(30, dtype=np.int64)
        for message in transcript.of_kind("masked_upload"):
            cipher_sum = field_add(cipher_sum, message.payload, fp.prime)
        mask_sum = transcript.of_kind("reconstruction")[0].payload
        expected = np.zeros(30, dtype=np.int64)
        for w in params.values():
            expected = field_add(expected, quantize(w, fp), fp.prime)
        np.testing.assert_array_equal((cipher_sum - mask_sum) % fp.prime, expected)

    def test_transcript_shape(self, fp, rng):
        params = {j: rng.normal(size=8) for j in (1, 2, 3)}
        _, transcript = secure_aggregate(5, params, params, fp, 3, rng, round=7)
        assert len(transcript.of_kind("mask_share")) == 6
        assert {m.sender for m in transcript.of_kind("masked_upload")} == {1, 2, 3}
        assert all(m.receiver == 5 for m in transcript.of_kind("aggregated_mask_share"))
        assert all(m.round == 7 for m in transcript.messages)
        assert all(m.sender != m.receiver for m in transcript.of_kind("mask_share"))

    def test_masks_change_every_upload_coordinate(self, fp):
        params = {j: np.linspace(-1, 1, 40) * j for j in (1, 2, 3)}
        mean_a, ta = secure_aggregate(0, params, params, fp, 3, np.random.default_rng(1))
        mean_b, tb = secure_aggregate(0, params, params, fp, 3, np.random.default_rng(2))
        np.testing.assert_allclose(mean_a, mean_b, atol=2.0 ** -16)
        for ua, ub in zip(ta.of_kind("masked_upload"), tb.of_kind("masked_upload")):
            assert np.all(ua.payload != ub.payload)

    def test_linearity(self, fp, rng):
        w = {j: rng.normal(size=10) for j in (1, 2, 3)}
        v = {j: rng.normal(size=10) for j in (1, 2, 3)}
        both = {j: w[j] + v[j] for j in w}
        agg_w, _ = secure_aggregate(0, w, w, fp, 3, rng)
        agg_v, _ = secure_aggregate(0, v, v, fp, 3, rng)
        agg_both, _ = secure_aggregate(0, both, both, fp, 3, rng)
        assert np.max(np.abs(agg_both - (agg_w + agg_v))) <= 2 * 2.0 ** -16

    def test_one_dropout_below_threshold_still_reconstructs(self, fp):
        params = {j: np.full(6, float(j)) for j in (1, 2, 3)}
        rng = ScriptedDropouts(seed=0, draws=[0.9, 0.1, 0.9])
        mean, transcript = secure_aggregate(0, params, params, fp, 2, rng, dropout_prob=0.5)
        assert transcript.survivors == (1, 3)
        np.testing.assert_allclose(mean, np.full(6, 2.0), atol=2.0 ** -17)

    def test_too_many_dropouts(self, fp):
        params = {j: np.zeros(3) for j in (1, 2, 3)}
        rng = ScriptedDropouts(seed=0, draws=[0.1, 0.1, 0.9])
        with pytest.raises(AggregationError):
            secure_aggregate(0, params, params, fp, 2, rng, dropout_prob=0.5)

    def test_callable_lookup_and_bad_threshold(self, fp, rng):
        table = np.arange(12, dtype=np.float64).reshape(4, 3)
        mean, _ = secure_aggregate(0, [1, 3], table.__getitem__, fp, 2, rng)
        np.testing.assert_allclose(mean, table[[1, 3]].mean(axis=0), atol=2.0 ** -17)
        with pytest.raises(DomainError):
            secure_aggregate(0, [1, 3], table.__getitem__, fp, 3, rng)


class TestAuditLog:

    def test_one_json_line_per_message(self, fp, rng, tmp_path):
        params = {j: rng.normal(size=4) for j in (1, 2)}
        _, transcript = secure_aggregate(0, params, params, fp, 2, rng, round=3)
        path = tmp_path / "audit.jsonl"
        audit = open_audit_log(path)
        write_audit_log(transcript, audit)
        close_audit_log()
        records = [json.loads(line) for line in path.read_text().splitlines()]
        assert len(records) == len(transcript.messages)
        assert {r["kind"] for r in records} == {"mask_share", "masked_upload", "aggregated_mask_share", "reconstruction"}
        assert all(r["round"] == 3 and len(r["digest"]) == 16 for r in records)
