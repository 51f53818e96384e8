import numpy as np
import pytest

from jseg.config import Config
from jseg.errors import ContractError
from jseg.model import init_model
from jseg.pipeline import (
    BankEntry,
    MemoryBank,
    crop_policy,
    init_bank,
    maybe_update,
    segment_object,
    soft_aggregate,
    start_track,
)
from jseg.synth import SyntheticScenario, generate
from jseg.tensor import Tape, Tensor
from jseg.training import load_sequence


def _entry(idx, mask=None):
    return BankEntry(frame_index=idx, mask=mask)


def _nonempty_mask():
    m = np.zeros((16, 16, 1))
    m[4:8, 4:8] = 1.0
    return Tensor(m)


class TestMemoryBank:
    def test_init_pins_first_entry(self):
        bank = init_bank(_entry(0, _nonempty_mask()), capacity=20, period=5)
        assert len(bank) == 1
        assert bank.entries[0].frame_index == 0

    def test_init_rejects_empty_foreground(self):
        with pytest.raises(ContractError):
            init_bank(_entry(0, Tensor(np.zeros((16, 16, 1)))), capacity=20, period=5)

    def test_update_period(self):
        bank = init_bank(_entry(0, _nonempty_mask()), capacity=20, period=5)
        for t in range(1, 5):
            maybe_update(bank, _entry(t))
            assert len(bank) == 1
        maybe_update(bank, _entry(5))
        assert len(bank) == 2
        assert bank.entries[-1].frame_index == 5

    def test_eviction_keeps_pinned_first(self):
        bank = init_bank(_entry(0, _nonempty_mask()), capacity=4, period=1)
        for t in range(1, 10):
            maybe_update(bank, _entry(t))
            assert len(bank) <= 4
            assert bank.entries[0].frame_index == 0
        assert [e.frame_index for e in bank.entries] == [0, 7, 8, 9]

    def test_indices_must_increase(self):
        bank = init_bank(_entry(0, _nonempty_mask()), capacity=20, period=5)
        maybe_update(bank, _entry(5))
        with pytest.raises(ContractError):
            maybe_update(bank, _entry(5))
        with pytest.raises(ContractError):
            maybe_update(bank, _entry(3))

    def test_200_frame_simulation(self):
        bank = init_bank(_entry(0, _nonempty_mask()), capacity=20, period=5)
        for t in range(1, 201):
            maybe_update(bank, _entry(t))
        indices = [e.frame_index for e in bank.entries]
        assert indices == [0] + list(range(110, 201, 5))
        assert len(indices) == 20

    def test_model_based_against_reference_simulation(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            capacity = int(rng.integers(2, 8))
            period = int(rng.integers(1, 6))
            bank = init_bank(_entry(0, _nonempty_mask()), capacity=capacity, period=period)
            reference = [0]
            t = 0
            for _ in range(int(rng.integers(1, 60))):
                t += int(rng.integers(1, 4))
                maybe_update(bank, _entry(t))
                if t % period == 0:
                    reference.append(t)
                    if len(reference) > capacity:
                        del reference[1]
            assert [e.frame_index for e in bank.entries] == reference


class TestSoftAggregate:
    def test_single_object_half(self):
        merged = soft_aggregate([np.full((4, 4), 0.5)])
        assert np.array_equal(merged[0], np.full((4, 4), 0.5))
        assert np.array_equal(merged[1], np.full((4, 4), 0.5))

    def test_saturated_case(self):
        merged = soft_aggregate([np.full((2, 2), 1.0 - 1e-5)])
        assert np.all(merged[1] > 0.9999)

    def test_sums_to_one_and_argmax(self):
        rng = np.random.default_rng(1)
        p1 = rng.random((8, 8))
        p2 = rng.random((8, 8))
        merged = soft_aggregate([p1, p2])
        assert np.allclose(merged.sum(axis=0), 1.0, atol=1e-9)
        assert np.all(merged >= 0.0)
        p1_strong = np.full((4, 4), 0.95)
        p2_weak = np.full((4, 4), 0.05)
        merged = soft_aggregate([p1_strong, p2_weak])
        assert np.all(merged.argmax(axis=0) == 1)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(2)
        masks = [rng.random((6, 6)) for _ in range(3)]
        base = soft_aggregate(masks)
        perm = [2, 0, 1]
        permuted = soft_aggregate([masks[i] for i in perm])
        assert np.allclose(permuted[0], base[0], atol=1e-12)
        for out_idx, src_idx in enumerate(perm):
            assert np.allclose(permuted[out_idx + 1], base[src_idx + 1], atol=1e-12)

    def test_argmax_stable_under_clamp_choice(self):
        rng = np.random.default_rng(3)
        masks = [np.clip(rng.random((8, 8)), 0.05, 0.95) for _ in range(2)]
        reference = soft_aggregate(masks, eps=1e-5).argmax(axis=0)
        for eps in (1e-7, 1e-6, 1e-4):
            assert np.array_equal(soft_aggregate(masks, eps=eps).argmax(axis=0), reference)


class TestCropPolicy:
    def test_small_bbox_centered(self):
        mask = np.zeros((64, 64))
        mask[28:36, 28:36] = 1.0  # 8x8 box at the center
        top, left, ch, cw = crop_policy((64, 64), mask)
        assert (ch, cw) == (48, 48)  # 5*8=40 rounded up to 48
        assert (top, left) == (8, 8)

    def test_bbox_larger_than_fifth_gives_full_frame(self):
        mask = np.zeros((64, 64))
        mask[10:40, 10:40] = 1.0
        assert crop_policy((64, 64), mask) == (0, 0, 64, 64)

    def test_empty_mask_full_frame(self):
        assert crop_policy((48, 64), np.zeros((48, 64))) == (0, 0, 48, 64)

    def test_clipped_at_border(self):
        mask = np.zeros((64, 64))
        mask[0:8, 0:8] = 1.0
        top, left, ch, cw = crop_policy((64, 64), mask)
        assert (top, left) == (0, 0)
        assert (ch, cw) == (48, 48)


@pytest.fixture(scope="module")
def tiny_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    generate(SyntheticScenario(seed=5, size=(48, 48), num_objects=1, num_frames=6,
                               num_distractors=1), root / "seq")
    seq = load_sequence(root / "seq")
    cfg = Config(proc_size=48)
    model = init_model(cfg)
    return seq, model


class TestSegmentObject:
    def test_output_range_and_determinism(self, tiny_setup):
        seq, model = tiny_setup
        track = start_track(1, seq.frames[0], (seq.masks[0] == 1).astype(float), model)
        res1 = segment_object(track.bank, track.model, seq.frames[1],
                              track.prev_mask, model, inner_steps=0)
        res2 = segment_object(track.bank, track.model, seq.frames[1],
                              track.prev_mask, model, inner_steps=0)
        assert np.all(res1.full_mask >= 0.0) and np.all(res1.full_mask <= 1.0)
        assert np.array_equal(res1.full_mask, res2.full_mask)

    def test_empty_bank_rejected(self, tiny_setup):
        seq, model = tiny_setup
        bank = MemoryBank(capacity=20, period=5)
        with pytest.raises(ContractError):
            segment_object(bank, None, seq.frames[1], seq.masks[0].astype(float),
                           model, inner_steps=0)

    def test_tape_does_not_change_values(self, tiny_setup):
        # the inference path and the training-time path must agree bitwise
        seq, model = tiny_setup
        track = start_track(1, seq.frames[0], (seq.masks[0] == 1).astype(float), model)
        plain = segment_object(track.bank, track.model, seq.frames[1],
                               track.prev_mask, model, inner_steps=2)
        with Tape():
            taped = segment_object(track.bank, track.model, seq.frames[1],
                                   track.prev_mask, model, inner_steps=2)
        assert np.array_equal(plain.logits.data, taped.logits.data)

    def test_branch_disabling_zeroes_the_other_encoding(self, tiny_setup):
        seq, _ = tiny_setup
        for branches, zero_attr in (("tb", "enc_ind_star"), ("ib", "enc_tra_star")):
            cfg = Config(proc_size=48, branches=branches)
            model = init_model(cfg)
            track = start_track(1, seq.frames[0], (seq.masks[0] == 1).astype(float), model)
            res = segment_object(track.bank, track.model, seq.frames[1],
                                 track.prev_mask, model,
                                 inner_steps=2 if branches == "ib" else 0)
            assert np.all(getattr(res, zero_attr).data == 0.0)
