"""Prompt registry, language-model clients, token embedding, pooling."""

import hashlib
import json

import numpy as np
import pytest

from microfusion import llm, nn, prompts, text_embed
from microfusion.errors import ConfigError, InvalidInputError, OfflineMissError
from microfusion.params import GradStore, make_rng, pack_grads


class TestPromptRegistry:
    def test_family_sizes(self):
        assert prompts.FAMILY_SIZES == {
            "nanomaterial": 6,
            "surface-defect": 8,
            "corrosion": 10,
            "general-material": 10,
        }

    def test_nanomaterial_rendering(self):
        rendered = prompts.build_cot_prompts("nanomaterial", "MEMS")
        assert len(rendered) == 6
        assert rendered[1].text.startswith("Definition and Structure")
        assert "MEMS" in rendered[0].body
        assert "{subject}" not in rendered[0].body

    def test_corrosion_rendering(self):
        rendered = prompts.build_cot_prompts("corrosion", "grade-7 panel")
        assert len(rendered) == 10
        assert rendered[0].title == "Corrosion Grading Overview"

    def test_deterministic(self):
        a = prompts.build_cot_prompts("general-material", "cotton")
        b = prompts.build_cot_prompts("general-material", "cotton")
        assert [p.text for p in a] == [p.text for p in b]

    def test_unknown_family(self):
        with pytest.raises(ConfigError):
            prompts.build_cot_prompts("alloys", "steel")

    def test_indices_are_one_based_and_ordered(self):
        for family in prompts.families():
            rendered = prompts.build_cot_prompts(family, "x")
            assert [p.index for p in rendered] == list(range(1, len(rendered) + 1))


class CountingStub:
    """Fake transport that counts outbound calls."""

    provider = "stub"

    def __init__(self):
        self.calls = 0

    def fetch_one(self, family, subject, prompt):
        self.calls += 1
        return f"stub text about {subject} for slot {prompt.index}", "2024-01-01T00:00:00Z"


class TestClients:
    def test_mock_fixture_serves_shipped_transcript(self):
        client = llm.MockFixtureClient()
        rendered = prompts.build_cot_prompts("nanomaterial", "MEMS")
        transcript = llm.query_llm(client, "nanomaterial", "MEMS", rendered)
        assert len(transcript.responses) == 6
        assert "Micro-Electro-Mechanical" in transcript.responses[0]
        assert transcript.provider == "mock-fixture"
        assert transcript.category == "MEMS"

    def test_mock_fixture_never_fabricates(self):
        client = llm.MockFixtureClient()
        rendered = prompts.build_cot_prompts("nanomaterial", "graphene")
        with pytest.raises(OfflineMissError) as exc:
            llm.query_llm(client, "nanomaterial", "graphene", rendered)
        assert "graphene" in exc.value.key

    def test_file_cache_fills_then_replays(self, tmp_path):
        stub = CountingStub()
        rendered = prompts.build_cot_prompts("surface-defect", "scratches")
        first_client = llm.FileCacheClient(str(tmp_path), inner=stub)
        first = llm.query_llm(first_client, "surface-defect", "scratches", rendered)
        assert stub.calls == 8

        replay_client = llm.FileCacheClient(str(tmp_path), inner=stub)
        second = llm.query_llm(replay_client, "surface-defect", "scratches", rendered)
        assert stub.calls == 8  # no further transport traffic
        assert second.responses == first.responses
        assert [r.encode() for r in second.responses] == [r.encode() for r in first.responses]

    def test_offline_cache_miss_names_key(self, tmp_path):
        client = llm.FileCacheClient(str(tmp_path), inner=None)
        rendered = prompts.build_cot_prompts("corrosion", "panel")
        with pytest.raises(OfflineMissError) as exc:
            llm.query_llm(client, "corrosion", "panel", rendered)
        assert exc.value.key == "corrosion/panel/prompt-1"

    def test_live_without_credential_degrades_to_offline(self, tmp_path):
        client = llm.make_client("live-http", cache_dir=str(tmp_path), environ={})
        assert isinstance(client, llm.FileCacheClient)
        assert client.inner is None

    def test_unknown_provider(self):
        with pytest.raises(ConfigError):
            llm.make_client("carrier-pigeon")

    def test_transcript_validation(self):
        t = llm.Transcript(category="x", family="nanomaterial",
                           responses=["ok", "  "], provider="stub")
        with pytest.raises(InvalidInputError):
            t.validate()
        with pytest.raises(InvalidInputError):
            llm.Transcript(category="x", family="nanomaterial",
                           responses=["ok"], provider="stub").validate(expected_count=2)

    def test_bundle_bytes_deterministic(self, tmp_path):
        bundle = {"family": "corrosion", "subject": "panel", "prompts": ["p"],
                  "provider": "stub", "responses": ["r"]}
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        llm.save_bundle(p1, bundle)
        llm.save_bundle(p2, json.loads(p1.read_text()))
        assert p1.read_bytes() == p2.read_bytes()


class TestTokenizer:
    def test_lowercases_and_splits_punctuation(self):
        assert text_embed.tokenize("Hello, World!") == ["hello", "world"]

    def test_keeps_digits(self):
        assert text_embed.tokenize("grade-7 panel") == ["grade", "7", "panel"]

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            text_embed.tokenize("  ... ")


class TestHashEmbedder:
    def test_repeated_token_rows_equal(self):
        emb = text_embed.HashEmbedder(dim=4, seed=3)
        matrix, cache = emb.embed(["a", "b", "a"])
        assert cache is None
        assert matrix.shape == (3, 4)
        np.testing.assert_array_equal(matrix[0], matrix[2])
        assert not np.array_equal(matrix[0], matrix[1])

    def test_matches_direct_hash_oracle(self):
        emb = text_embed.HashEmbedder(dim=4, seed=3)
        matrix, _ = emb.embed(["a", "b", "a"])
        for row, token in zip(matrix, ["a", "b", "a"]):
            for j in range(4):
                raw = f"3\x1f{token}\x1f{j}".encode()
                val = int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(),
                                     "big") / 2.0 ** 64 * 2.0 - 1.0
                assert row[j] == val

    def test_values_bounded(self):
        emb = text_embed.HashEmbedder(dim=16, seed=0)
        matrix, _ = emb.embed([f"tok{i}" for i in range(40)])
        assert np.all(matrix >= -1.0) and np.all(matrix < 1.0)

    def test_seed_changes_vectors(self):
        a, _ = text_embed.HashEmbedder(4, seed=0).embed(["carbon"])
        b, _ = text_embed.HashEmbedder(4, seed=1).embed(["carbon"])
        assert not np.array_equal(a, b)


class TestTrainableEmbedder:
    def test_vocab_sorted_with_unk_row(self):
        emb = text_embed.trainable_embedder_init(
            make_rng(0), ["beta alpha", "alpha gamma"], dim=3)
        assert emb.vocab == ["alpha", "beta", "gamma"]
        assert emb.table.shape == (4, 3)
        matrix, idx = emb.embed(["alpha", "delta"])
        np.testing.assert_array_equal(matrix[0], emb.table[0])
        np.testing.assert_array_equal(matrix[1], emb.table[3])
        assert list(idx) == [0, 3]

    def test_backward_scatters_by_index(self):
        emb = text_embed.trainable_embedder_init(make_rng(1), ["a b"], dim=2)
        _, idx = emb.embed(["a", "b", "a"])
        d_matrix = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 0.0]])
        store = GradStore()
        emb.backward(idx, d_matrix, store, "table")
        expected = np.zeros_like(emb.table)
        for i, row in zip(idx, d_matrix):  # loop oracle for the scatter-add
            expected[i] += row
        np.testing.assert_array_equal(store.get("table"), expected)


class TestAttentionPool:
    def test_single_row(self):
        h = np.array([[1.0, -2.0, 0.5]])
        pooled, alpha = text_embed.attention_pool(h, np.array([3.0, 1.0, 0.0]))
        np.testing.assert_allclose(alpha, [1.0], atol=1e-15)
        np.testing.assert_allclose(pooled, h[0], atol=1e-15)

    def test_identical_rows_convexity(self):
        h = np.tile(np.array([0.3, -0.7]), (5, 1))
        pooled, _ = text_embed.attention_pool(h, np.array([10.0, -4.0]))
        np.testing.assert_allclose(pooled, [0.3, -0.7], atol=1e-12)

    def test_matches_explicit_oracle(self):
        r = np.random.default_rng(17)
        h = r.normal(size=(3, 2))
        u = r.normal(size=2)
        pooled, alpha = text_embed.attention_pool(h, u)
        q = np.array([h[j] @ u for j in range(3)])
        e = np.exp(q - q.max())
        alpha_exp = e / e.sum()
        np.testing.assert_allclose(alpha, alpha_exp, atol=1e-12)
        np.testing.assert_allclose(pooled, sum(alpha_exp[j] * h[j] for j in range(3)),
                                   atol=1e-12)

    def test_alpha_normalized_and_permutation_equivariant(self):
        r = np.random.default_rng(18)
        h = r.normal(size=(6, 3))
        u = r.normal(size=3)
        pooled, alpha = text_embed.attention_pool(h, u)
        assert abs(alpha.sum() - 1.0) < 1e-9
        perm = r.permutation(6)
        pooled_p, alpha_p = text_embed.attention_pool(h[perm], u)
        np.testing.assert_allclose(alpha_p, alpha[perm], atol=1e-12)
        np.testing.assert_allclose(pooled_p, pooled, atol=1e-12)

    def test_output_within_column_bounds(self):
        r = np.random.default_rng(19)
        h = r.normal(size=(8, 4))
        pooled, _ = text_embed.attention_pool(h, r.normal(size=4))
        assert np.all(pooled >= h.min(axis=0) - 1e-12)
        assert np.all(pooled <= h.max(axis=0) + 1e-12)

    def test_backward_matches_finite_differences(self):
        r = np.random.default_rng(20)
        reduce_w = r.normal(size=4)

        def f(vec):
            h = vec[:12].reshape(3, 4)
            u = vec[12:]
            pooled, alpha = text_embed.attention_pool(h, u)
            loss = float(pooled @ reduce_w)
            d_h, d_u = text_embed.attention_pool_backward(h, u, alpha, reduce_w)
            return loss, np.concatenate([d_h.ravel(), d_u])

        assert nn.grad_check(f, r.normal(size=16), eps=1e-4) < 1e-4


class TestClassTextMatrix:
    def test_single_category(self):
        emb = text_embed.HashEmbedder(dim=4, seed=0)
        u = np.zeros(4)
        matrix = text_embed.build_class_text_matrix(
            ["films"], {"films": "thin films everywhere"}, emb, u)
        tokens = text_embed.tokenize("thin films everywhere")
        h, _ = emb.embed(tokens)
        pooled, _ = text_embed.attention_pool(h, u)
        np.testing.assert_allclose(matrix.rows[0], pooled, atol=1e-12)
        assert matrix.c == 1 and matrix.d == 4

    def test_ten_by_sixty_four(self):
        emb = text_embed.HashEmbedder(dim=64, seed=1)
        cats = [f"cat{i}" for i in range(10)]
        texts = {c: f"{c} description text block" for c in cats}
        matrix = text_embed.build_class_text_matrix(cats, texts, emb,
                                                    np.zeros(64))
        assert matrix.rows.shape == (10, 64)
        assert matrix.labels == cats

    def test_disjoint_vocab_rows_differ_and_match_recompute(self):
        emb = text_embed.HashEmbedder(dim=8, seed=2)
        u = np.random.default_rng(3).normal(size=8)
        texts = {"wires": "copper strands drawn thin",
                 "foams": "bubbly porous matrix voids"}
        matrix = text_embed.build_class_text_matrix(["wires", "foams"], texts,
                                                    emb, u)
        assert not np.allclose(matrix.rows[0], matrix.rows[1])
        # independent pooling oracle per category
        for i, name in enumerate(["wires", "foams"]):
            toks = text_embed.tokenize(texts[name])
            h = np.vstack([emb.token_vector(t) for t in toks])
            q = h @ u
            e = np.exp(q - q.max())
            a = e / e.sum()
            np.testing.assert_allclose(matrix.rows[i], a @ h, atol=1e-12)

    def test_missing_category_listed(self):
        emb = text_embed.HashEmbedder(dim=4)
        with pytest.raises(ConfigError, match="films"):
            text_embed.build_class_text_matrix(["films", "wires"],
                                               {"wires": "w"}, emb, np.zeros(4))

    def test_backward_through_table_and_query(self):
        texts = ["alpha beta gamma", "delta beta"]
        emb = text_embed.trainable_embedder_init(make_rng(4), texts, dim=3)
        cats = ["one", "two"]
        transcripts = {"one": texts[0], "two": texts[1]}
        reduce_w = np.random.default_rng(5).normal(size=(2, 3))

        import dataclasses

        @dataclasses.dataclass
        class Probe:
            table: np.ndarray
            u: np.ndarray

        probe = Probe(table=emb.table, u=np.random.default_rng(6).normal(size=3))

        def f(vec):
            probe.table = vec[:emb.table.size].reshape(emb.table.shape)
            probe.u = vec[emb.table.size:]
            emb.table = probe.table
            matrix, caches = text_embed.build_class_text_matrix(
                cats, transcripts, emb, probe.u, with_cache=True)
            loss = float(np.sum(matrix.rows * reduce_w))
            store = GradStore()
            text_embed.class_text_backward(caches, probe.u, reduce_w, store,
                                           "u", embedder=emb, table_path="table")
            return loss, pack_grads(probe, store)

        from microfusion.params import pack
        assert nn.grad_check(f, pack(probe), eps=1e-4) < 1e-4
