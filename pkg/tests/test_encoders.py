import numpy as np
import pytest

from stylediff import synthdata as sd
from stylediff.encoders import (
    EncoderConfig,
    PAD_ID,
    StyleEncoder,
    TextEncoder,
    Vocabulary,
    null_conditions,
    tokenize,
)
from stylediff.errors import ConfigError, ShapeError
from stylediff.rng import make_rng


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary(sd.dataset_vocab_tokens(sd.GeneratorConfig()))


@pytest.fixture(scope="module")
def cfg():
    return EncoderConfig()


class TestVocabulary:
    def test_round_trip(self, tmp_path, vocab):
        vocab.save(tmp_path / "v.txt")
        back = Vocabulary.load(tmp_path / "v.txt")
        assert back.tokens == vocab.tokens
        assert back.index == vocab.index

    def test_reserved_ids(self, vocab):
        assert vocab.index["<pad>"] == 0
        assert vocab.index["<cls>"] == 1


class TestTokenize:
    def test_empty_string_is_all_pad(self, vocab, cfg):
        ids = tokenize("", vocab, cfg.text_len)
        assert ids.shape == (cfg.text_len,)
        assert np.all(ids == PAD_ID)

    def test_known_words_then_padding(self, vocab, cfg):
        ids = tokenize("red checks tank", vocab, cfg.text_len)
        assert ids[0] == vocab.index["red"]
        assert ids[1] == vocab.index["checks"]
        assert ids[2] == vocab.index["tank"]
        assert np.all(ids[3:] == PAD_ID)

    def test_unknown_words_dropped(self, vocab, cfg):
        ids = tokenize("velvet red", vocab, cfg.text_len)
        assert ids[0] == vocab.index["red"]
        assert np.all(ids[1:] == PAD_ID)

    def test_truncation(self, vocab, cfg):
        words = " ".join(["red"] * (cfg.text_len + 5))
        ids = tokenize(words, vocab, cfg.text_len)
        assert ids.shape == (cfg.text_len,)
        assert np.all(ids == vocab.index["red"])


class TestTextEncoder:
    def test_output_shape(self, vocab, cfg):
        enc = TextEncoder(cfg, len(vocab), make_rng(0, "te"))
        out = enc(tokenize("red solid dress", vocab, cfg.text_len))
        assert out.shape == (cfg.text_len, cfg.width)

    def test_batched_matches_single(self, vocab, cfg):
        enc = TextEncoder(cfg, len(vocab), make_rng(1, "te"))
        a = tokenize("red solid dress", vocab, cfg.text_len)
        b = tokenize("blue dots tank", vocab, cfg.text_len)
        batch = enc(np.stack([a, b])).data
        np.testing.assert_allclose(batch[0], enc(a).data, atol=1e-6)
        np.testing.assert_allclose(batch[1], enc(b).data, atol=1e-6)

    def test_positional_encoding_breaks_symmetry(self, vocab, cfg):
        enc = TextEncoder(cfg, len(vocab), make_rng(2, "te"))
        a = enc(tokenize("red tank", vocab, cfg.text_len)).data
        b = enc(tokenize("tank red", vocab, cfg.text_len)).data
        assert not np.allclose(a, b)

    def test_deterministic(self, vocab, cfg):
        enc = TextEncoder(cfg, len(vocab), make_rng(3, "te"))
        ids = tokenize("green stripes skirt", vocab, cfg.text_len)
        np.testing.assert_array_equal(enc(ids).data, enc(ids).data)

    def test_out_of_range_id_rejected(self, vocab, cfg):
        enc = TextEncoder(cfg, len(vocab), make_rng(4, "te"))
        bad = np.full(cfg.text_len, len(vocab), dtype=np.int64)
        with pytest.raises(ShapeError):
            enc(bad)

    def test_all_pad_output_depends_only_on_pad_row(self, vocab, cfg):
        rng_seed = 5
        enc = TextEncoder(cfg, len(vocab), make_rng(rng_seed, "te"))
        ids, _ = null_conditions(cfg)
        base = enc(ids).data.copy()
        # perturb every non-reserved embedding row; all-PAD output must not move
        for row in range(2, len(vocab)):
            enc.embed.data[row] += 1.0
        np.testing.assert_array_equal(enc(ids).data, base)


class TestStyleEncoder:
    def test_token_count_from_patching(self, cfg):
        assert EncoderConfig(patch_size=16, patch_stride=8).style_len == 5
        assert cfg.style_len == (cfg.patch_size // cfg.patch_stride) ** 2 + 1

    def test_output_shape_and_determinism(self, cfg):
        enc = StyleEncoder(cfg, make_rng(0, "se"))
        patch = make_rng(1, "patch").uniform(-1, 1, (3, cfg.patch_size, cfg.patch_size)).astype(np.float32)
        a = enc(patch).data
        b = enc(patch).data
        assert a.shape == (cfg.style_len, cfg.width)
        np.testing.assert_array_equal(a, b)

    def test_batched_matches_single(self, cfg):
        enc = StyleEncoder(cfg, make_rng(2, "se"))
        rng = make_rng(3, "patches")
        patches = rng.uniform(-1, 1, (2, 3, cfg.patch_size, cfg.patch_size)).astype(np.float32)
        batch = enc(patches).data
        for i in range(2):
            np.testing.assert_allclose(batch[i], enc(patches[i]).data, atol=1e-6)

    def test_indivisible_patch_rejected(self):
        with pytest.raises(ConfigError):
            EncoderConfig(patch_size=10, patch_stride=4)

    def test_widths_match_for_concatenation(self, vocab, cfg):
        text_enc = TextEncoder(cfg, len(vocab), make_rng(6, "te"))
        style_enc = StyleEncoder(cfg, make_rng(7, "se"))
        ids, patch = null_conditions(cfg)
        f_t = text_enc(ids)
        f_s = style_enc(patch)
        assert f_t.shape[-1] == f_s.shape[-1] == cfg.width


class TestNullConditions:
    def test_null_text_is_all_pad(self, cfg):
        ids, _ = null_conditions(cfg)
        assert np.all(ids == PAD_ID)
        assert ids.shape == (cfg.text_len,)

    def test_null_patch_is_background_sentinel(self, cfg):
        _, patch = null_conditions(cfg)
        assert patch.shape == (3, cfg.patch_size, cfg.patch_size)
        assert np.all(patch == -3.0)

    def test_null_style_encoding_cacheable(self, cfg):
        enc = StyleEncoder(cfg, make_rng(8, "se"))
        _, patch = null_conditions(cfg)
        np.testing.assert_array_equal(enc(patch).data, enc(patch).data)
