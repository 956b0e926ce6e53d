"""CW loss, masked optimization invariants, NOP substitution, attack loop."""

import random

import numpy as np
import pytest

from semnop import attack, corpus, detector, images, isa, maskgen
from semnop.errors import UnfillableBlockError


def test_cw_loss_margin_already_met():
    assert attack.cw_loss(np.array([2.0, 1.0]), kappa=0.0) == 0.0


def test_cw_loss_misclassified_target():
    assert attack.cw_loss(np.array([1.0, 2.0]), kappa=0.0) == 1.0


def test_cw_loss_kappa_clamp():
    assert attack.cw_loss(np.array([3.0, 1.0]), kappa=1.0) == -1.0


def _state(model, rng, h=16, w=16, mask=None):
    x = images.NormalizedImage(
        rng.uniform(-1, 1, size=(h, w)).astype(model.dtype), h * w)
    if mask is None:
        mask = (rng.random((h, w)) < 0.3).astype(np.uint8)
    return attack.AttackState(x=x, delta=np.zeros((h, w), dtype=model.dtype),
                              mask=mask)


def test_zero_mask_keeps_delta_zero():
    model = detector.init_model(seed=0)
    rng = np.random.default_rng(0)
    state = _state(model, rng, mask=np.zeros((16, 16), dtype=np.uint8))
    cfg = attack.AttackConfig(inner_steps=20)
    out = attack.cw_optimize(model, state, cfg)
    assert np.all(state.delta == 0)
    assert np.array_equal(out.values, state.x.values)


def test_masked_invariants_every_step():
    # drive the optimizer one step at a time and check the invariants at
    # every observable point
    rng = np.random.default_rng(1)
    model = detector.init_model(seed=1)
    for instance in range(5):
        state = _state(model, rng)
        cfg = attack.AttackConfig(C=100.0, step_size=0.05, inner_steps=1)
        for _ in range(30):
            out = attack.cw_optimize(model, state, cfg)
            off_mask = state.delta * (1 - state.mask)
            assert np.all(off_mask == 0)
            perturbed = state.x.values + state.mask * state.delta
            assert np.all(perturbed >= -1.0) and np.all(perturbed <= 1.0)
            assert np.all(out.values >= -1.0) and np.all(out.values <= 1.0)


def test_cw_drives_delta_down_when_c_tiny():
    model = detector.init_model(seed=2)
    rng = np.random.default_rng(2)
    state = _state(model, rng)
    state.delta = (rng.uniform(-0.5, 0.5, size=(16, 16)) * state.mask).astype(model.dtype)
    norm0 = float(np.sum(state.delta ** 2))
    cfg = attack.AttackConfig(C=1e-9, inner_steps=100, step_size=0.05,
                              c_search=False, kappa_search=False)
    attack.cw_optimize(model, state, cfg)
    assert float(np.sum(state.delta ** 2)) < 0.01 * norm0


# --------------------------------------------------------------------------
# AE optimizer


def _seq(hexstr):
    return isa.NopSequence(bytes.fromhex(hexstr), ())


def test_nearest_nop_zero_distance_fixpoint():
    cands = isa.generate_nops(2)
    for cand in cands:
        got = attack.nearest_nop(np.frombuffer(cand.bytes, dtype=np.uint8), cands)
        assert got.bytes == cand.bytes


def test_nearest_nop_example():
    p = np.array([0x89, 0xC1], dtype=np.uint8)
    got = attack.nearest_nop(p, [_seq("9090"), _seq("89c0")])
    assert got.bytes == bytes.fromhex("89c0")


def test_nearest_nop_tie_lexicographic():
    p = np.array([1], dtype=np.uint8)
    got = attack.nearest_nop(p, [_seq("02"), _seq("00")])
    assert got.bytes == b"\x00"


def test_nearest_nop_empty():
    with pytest.raises(UnfillableBlockError):
        attack.nearest_nop(np.array([0], dtype=np.uint8), [])


def test_nearest_nop_matches_brute_force():
    cands = isa.generate_nops(4, limit=None)
    rng = np.random.default_rng(3)
    for _ in range(300):
        p = rng.integers(0, 256, size=4).astype(np.uint8)
        got = attack.nearest_nop(p, cands)
        best = min(cands, key=lambda c: (sum((int(a) - int(b)) ** 2
                                             for a, b in zip(c.bytes, p)), c.bytes))
        assert got.bytes == best.bytes


def test_ae_optimize_preserves_original():
    code = corpus.synth_sample(random.Random(4), corpus.SynthSpec().malware, 30)
    stream = isa.decode(code)
    aug, img, mask = maskgen.augment(code, stream, maskgen.MaskConfig(block_size=3))
    cands = isa.generate_nops(3, limit=None)
    rng = np.random.default_rng(4)
    noisy = images.GrayImage(
        rng.integers(0, 256, size=img.pixels.shape).astype(np.uint8),
        img.payload_len)
    viable, viable_img, chosen = attack.ae_optimize(noisy, aug, {3: cands})
    assert maskgen.strip(viable) == code
    cand_bytes = {c.bytes for c in cands}
    for offset, length in viable.block_spans:
        assert viable.bytes[offset:offset + length] in cand_bytes
    assert images.image_to_bytes(viable_img) == viable.bytes


# --------------------------------------------------------------------------
# Full loop


def _malware_sample(n=200, seed=5):
    code = corpus.synth_sample(random.Random(seed), corpus.SynthSpec().malware, n)
    return code, isa.decode(code)


def test_run_attack_invariants():
    code, stream = _malware_sample()
    model = detector.init_model(seed=3)  # untrained: arbitrary boundary
    cfg = attack.AttackConfig(inner_steps=25, max_outer_iters=3)
    result = attack.run_attack(model, code, stream, maskgen.MaskConfig(), cfg)
    if result.outer_iters_used == 0:
        assert result.success and result.viable_binary == code
        return
    aug, _, _ = maskgen.augment(code, stream, maskgen.MaskConfig())
    rebuilt = maskgen.AugmentedBinary(result.viable_binary, aug.block_spans, {})
    assert maskgen.strip(rebuilt) == code
    cand_bytes = {c.bytes for c in isa.generate_nops(8, limit=None)}
    for offset, length in aug.block_spans:
        assert result.viable_binary[offset:offset + length] in cand_bytes
    assert result.outer_iters_used <= cfg.max_outer_iters
    assert len(result.distance_log) == result.outer_iters_used
    if result.success:
        img = images.normalize(result.viable_image)
        assert detector.predict(model, img) == detector.BENIGN


def test_run_attack_already_benign_noop():
    code, stream = _malware_sample(seed=6)
    # find a model that calls the original benign
    for seed in range(20):
        model = detector.init_model(seed=seed)
        img = images.normalize(images.bytes_to_image(code, 64))
        if detector.predict(model, img) == detector.BENIGN:
            break
    else:
        pytest.skip("no random model labels the sample benign")
    result = attack.run_attack(model, code, stream, maskgen.MaskConfig(),
                               attack.AttackConfig(inner_steps=5))
    assert result.success
    assert result.outer_iters_used == 0
    assert result.viable_binary == code
    assert result.expansion_rate == 0.0


def test_run_attack_random_reinit_mode():
    code, stream = _malware_sample(seed=7)
    model = detector.init_model(seed=4)
    cfg = attack.AttackConfig(inner_steps=10, max_outer_iters=2,
                              restart_mode="random_reinit", seed=9)
    result = attack.run_attack(model, code, stream, maskgen.MaskConfig(), cfg)
    assert result.outer_iters_used <= 2
