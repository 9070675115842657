import numpy as np
import pytest

from propetl import storage as stg
from propetl.backbone import TransformerConfig, encode, init_backbone
from propetl.petl import build_attachment


def oracle_propetl(variant, d, s, L, T=0):
    # written out independently of the group tables in the module
    if variant == "adapter":
        return 32 * (2 * s * d + s + d) + 2 * s * d * (L + T)
    if variant == "lora":
        return 32 * 4 * s * d + 4 * s * d * (L + T)
    return 32 * 2 * s * d + 2 * s * d * (L + T)


class TestBls:
    def test_examples(self):
        assert stg.bls([(100, 32), (100, 1)]) == 3300
        assert stg.bls([]) == 0
        assert stg.bls([(1_189_632, 32)]) == 38_068_224

    def test_errors(self):
        with pytest.raises(ValueError):
            stg.bls([(-1, 32)])
        with pytest.raises(ValueError):
            stg.bls([(1, 0)])
        with pytest.raises(OverflowError):
            stg.bls([(2**60, 32)])

    def test_propetl_examples(self):
        assert stg.bls_propetl("adapter", 768, 64, 12) == 4_352_000
        assert stg.bls_vanilla("adapter", 768, 64, 12) == 38_068_224
        assert stg.bls_propetl("prefix", 768, 64, 12) == 4_325_376
        assert stg.bls_propetl("lora", 768, 32, 12) == 4_325_376
        assert abs(4_352_000 / 38_068_224 - 0.1143) < 1e-4

    @pytest.mark.parametrize("variant", ["adapter", "lora", "prefix"])
    def test_propetl_matches_oracle(self, variant):
        for d, s, L, T in [(768, 64, 12, 0), (64, 16, 4, 0), (32, 3, 24, 8), (1, 1, 1, 1)]:
            assert stg.bls_propetl(variant, d, s, L, T) == oracle_propetl(variant, d, s, L, T)

    def test_ratio_below_bound_for_table_configs(self):
        for variant, s in (("adapter", 64), ("lora", 32), ("prefix", 64)):
            assert stg.bls_propetl(variant, 768, s, 12) / stg.bls_vanilla(variant, 768, s, 12) < 0.12

    def test_propetl_cheaper_than_vanilla_for_two_layers_up(self):
        for variant in ("adapter", "lora", "prefix"):
            for L in (2, 3, 12):
                assert stg.bls_propetl(variant, 64, 8, L) < stg.bls_vanilla(variant, 64, 8, L)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            stg.bls_propetl("bitfit", 768, 64, 12)

    def test_only_mask(self):
        assert stg.bls_only_mask("adapter", 768, 64, 12, 0.5) == 32 * (49_152 + 64 + 768) * 12 == 19_193_856
        for variant in ("adapter", "lora", "prefix"):
            assert stg.bls_only_mask(variant, 768, 64, 12, 1.0) == stg.bls_vanilla(variant, 768, 64, 12)
        assert stg.bls_only_mask("prefix", 768, 64, 12, 0.5, literal_prefix=True) == 2 * 64 * 768 * 12 // 2
        assert stg.bls_only_mask("lora", 8, 2, 3, 0.25) == 32 * 4 * 4 * 3
        with pytest.raises(ValueError):
            stg.bls_only_mask("adapter", 768, 64, 12, 0.0)

    def test_multitask(self):
        assert stg.bls_multitask(3_172_352, 24, 8) == 3_172_352 + 99_136 * 32 == 6_344_704
        p = 3_172_352
        assert stg.bls_multitask(p, 12, 0) == p + p * 12 // 32
        shares = [stg.bls_multitask(p, 12, T) / T for T in range(1, 17)]
        assert all(a > b for a, b in zip(shares, shares[1:]))
        with pytest.raises(ValueError):
            stg.bls_multitask(33, 12, 1)

    def test_report(self):
        r = stg.BlsReport(stg.propetl_groups("adapter", 768, 64, 12), baseline_bits=38_068_224,
                          full_model_bits=125_000_000 * 32)
        assert r.total_bits == 4_352_000
        text = r.render()
        assert "4,352,000" in text and "0.1143" in text

    def test_budget_matching(self):
        target = stg.bls_propetl("adapter", 64, 16, 4)
        s = stg.match_size(lambda x: stg.bls_vanilla("adapter", 64, x, 1), target, prefer_at_least=16)
        assert s == 18
        k = stg.match_sparsity("adapter", 64, 16, 4, target)
        assert abs(stg.bls_only_mask("adapter", 64, 16, 4, k) - target) / target < 0.01
        assert stg.match_size(lambda x: stg.bls_vanilla("adapter", 768, x, 1),
                              stg.bls_propetl("adapter", 768, 64, 12)) == 88


CFG = TransformerConfig(num_layers=3, d=16, num_heads=2, ffn_dim=32, vocab_size=8, max_seq_len=5)


def trained_like(variant, seed=0, **kw):
    att = build_attachment(variant, CFG.d, 4, CFG.num_layers, seed=seed, **kw)
    rng = np.random.default_rng(seed + 100)
    for p in att.prototype.params.values():
        p.data = rng.normal(0, 0.3, size=p.shape).astype(np.float32)
    return att


def logits(att, weights, task_id=None):
    X = np.random.default_rng(7).integers(CFG.vocab_size, size=(6, 5))
    return encode(X, weights, att, task_id=task_id).data


@pytest.fixture(scope="module")
def weights():
    return init_backbone(CFG, seed=3)


class TestCheckpoint:
    @pytest.mark.parametrize("variant", ["adapter", "lora", "prefix"])
    def test_round_trip_bit_identical(self, tmp_path, weights, variant):
        att = trained_like(variant, k=0.5)
        before = logits(att, weights)
        ck = stg.save_checkpoint(att, tmp_path / "m.pptl")
        loaded = stg.load_checkpoint(tmp_path / "m.pptl")
        assert not loaded.trainable
        assert logits(loaded, weights).tobytes() == before.tobytes()
        assert ck.payload_bits == stg.bls_propetl(variant, CFG.d, 4, CFG.num_layers)

    def test_multitask_round_trip(self, tmp_path, weights):
        att = trained_like("adapter", k=0.5, multitask=True, num_classes=(2, 3), k_task=0.3, combine_mode="AND")
        before = [logits(att, weights, t) for t in range(2)]
        ck = stg.save_checkpoint(att, tmp_path / "m.pptl")
        loaded = stg.load_checkpoint(tmp_path / "m.pptl")
        assert loaded.combine_mode == "AND" and loaded.k_task == 0.3
        for t in range(2):
            assert logits(loaded, weights, t).tobytes() == before[t].tobytes()
        assert ck.payload_bits == stg.bls_propetl("adapter", CFG.d, 4, CFG.num_layers, T=2)

    def test_no_scores_on_disk(self, tmp_path):
        att = trained_like("lora", k=0.5)
        ck = stg.save_checkpoint(att, tmp_path / "m.pptl")
        assert not any("scores" in s.name for s in ck.sections)
        score_bytes = att.layer_scores[0]["q_down"].data.tobytes()
        assert score_bytes not in (tmp_path / "m.pptl").read_bytes()

    def test_only_share_round_trip(self, tmp_path, weights):
        att = trained_like("adapter", mode="only_share")
        stg.save_checkpoint(att, tmp_path / "m.pptl")
        assert logits(stg.load_checkpoint(tmp_path / "m.pptl"), weights).tobytes() == logits(att, weights).tobytes()

    def test_layout_header(self, tmp_path):
        stg.save_checkpoint(trained_like("adapter", k=0.3), tmp_path / "m.pptl")
        data = (tmp_path / "m.pptl").read_bytes()
        assert data[:4] == b"PPTL" and data[4:6] == b"\x01\x00"
        ck = stg.read_checkpoint_file(tmp_path / "m.pptl")
        assert (ck.d, ck.size, ck.L, ck.T) == (16, 4, 3, 0)
        assert (ck.k.numerator, ck.k.denominator) == (3, 10)

    def test_tampered_mask_byte(self, tmp_path, weights):
        path = tmp_path / "m.pptl"
        att = trained_like("adapter", k=0.5)
        ck = stg.save_checkpoint(att, path)
        sec = ck.section("layer1.W_up")
        data = bytearray(path.read_bytes())
        start = bytes(data).index(sec.payload)
        # move one set bit to an unset position so the popcount stays valid
        pos = next(start + i for i, b in enumerate(sec.payload) if b not in (0x00, 0xFF))
        b = data[pos]
        on = next(i for i in range(8) if b >> i & 1)
        off = next(i for i in range(8) if not b >> i & 1)
        data[pos] = b ^ (1 << on) ^ (1 << off)
        path.write_bytes(bytes(data))
        with pytest.raises(stg.CheckpointError, match="CRC"):
            stg.load_checkpoint(path)
        loaded = stg.load_checkpoint(path, verify_crc=False)
        assert logits(loaded, weights).tobytes() != logits(att, weights).tobytes()

    def test_corruptions_rejected_with_location(self, tmp_path):
        path = tmp_path / "m.pptl"
        stg.save_checkpoint(trained_like("adapter", k=0.5), path)
        good = path.read_bytes()
        cases = {
            "magic": b"XXXX" + good[4:],
            "version": good[:4] + b"\x09\x00" + good[6:],
            "truncated": good[:len(good) // 2],
            "trailing": good + b"\x00",
        }
        for label, blob in cases.items():
            path.write_bytes(blob)
            with pytest.raises(stg.CheckpointError) as exc:
                stg.load_checkpoint(path)
            assert exc.value.location, label

    def test_inspect(self, tmp_path):
        path = tmp_path / "m.pptl"
        stg.save_checkpoint(trained_like("adapter", k=0.5, multitask=True, num_classes=(2, 2)), path)
        text = stg.inspect_checkpoint(path)
        assert "density=0.500000" in text and "layer 2 task 1" in text
