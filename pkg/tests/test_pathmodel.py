import numpy as np
import pytest
from conftest import model_for, random_path, toy_graph

from chainkb import checkpoint
from chainkb.kgraph import Path
from chainkb.numcore import check_gradients, derive_rng, matvec, relu, sigmoid
from chainkb.pathmodel import (
    ENTITY_MODES,
    PATHQUERY_VARIANTS,
    ModelConfig,
    UnknownIdError,
    encode_path,
    encode_path_backward,
    entity_vector,
    init_pathquery_params,
    pathquery_backward,
    pathquery_score,
    pathquery_scores,
    score_path,
    score_paths,
)


@pytest.fixture
def kg():
    return toy_graph()


def typed_entity(kg, n):
    return next(e for e, ts in enumerate(kg.entity_types) if len(ts) == n)


class TestEntityVector:
    def test_single_type(self, kg):
        p = model_for(kg, derive_rng(0), entity_mode="type_sum")
        e = typed_entity(kg, 1)
        assert np.array_equal(entity_vector(kg, p, e), p.arrays["type_emb"][kg.entity_types[e][0]])

    def test_no_types_zero(self, kg):
        p = model_for(kg, derive_rng(0), entity_mode="type_sum")
        assert entity_vector(kg, p, typed_entity(kg, 0)).tolist() == [0.0] * 4

    def test_two_types_sum(self, kg):
        p = model_for(kg, derive_rng(0), entity_mode="type_sum")
        e = typed_entity(kg, 2)
        t1, t2 = (p.arrays["type_emb"][t] for t in kg.entity_types[e])
        assert entity_vector(kg, p, e).tolist() == [a + b for a, b in zip(t1.tolist(), t2.tolist())]

    def test_learned_and_combined(self, kg):
        p = model_for(kg, derive_rng(0), entity_mode="entity_plus_type_sum")
        e = typed_entity(kg, 1)
        expect = p.arrays["ent_emb"][e] + p.arrays["type_emb"][kg.entity_types[e][0]]
        assert np.allclose(entity_vector(kg, p, e), expect, rtol=0, atol=1e-15)
        q = model_for(kg, derive_rng(0), entity_mode="learned_entity")
        assert np.array_equal(entity_vector(kg, q, 3), q.arrays["ent_emb"][3])

    def test_requires_entity_mode(self, kg):
        with pytest.raises(ValueError):
            entity_vector(kg, model_for(kg, derive_rng(0)), 0)


def oracle_encode(p, path, kg, prefix=""):
    """Step-by-step recurrence built from matvec."""
    A, cfg = p.arrays, p.config
    h = np.zeros(cfg.h)
    f = relu if cfg.activation == "relu" else sigmoid
    for r, e in path.steps:
        z = matvec(A[prefix + "W_hh"], h) + matvec(A[prefix + "W_ih"].T, A[prefix + "rel_emb"][r])
        if cfg.entity_mode != "none":
            ev = np.zeros(cfg.m)
            if cfg.uses_types:
                for t in kg.entity_types[e]:
                    ev = ev + A[prefix + "type_emb"][t]
            if cfg.uses_learned_entities:
                ev = ev + A[prefix + "ent_emb"][e]
            z = z + matvec(A[prefix + "W_eh"].T, ev)
        h = f(z)
    return h


class TestEncode:
    def test_length_one_identity(self, kg):
        p = model_for(kg, derive_rng(0))
        p.arrays["W_hh"][:] = 0
        p.arrays["W_ih"][:] = np.eye(8)
        path = Path(0, ((2, 1),))
        assert np.array_equal(encode_path(p, path, 0).y, relu(p.arrays["rel_emb"][2]))

    @pytest.mark.parametrize("act, value", [("relu", 0.0), ("sigmoid", 0.5)])
    def test_all_zero(self, kg, act, value):
        p = model_for(kg, derive_rng(0), activation=act, entity_mode="type_sum")
        for a in p.arrays.values():
            a[:] = 0
        enc = encode_path(p, Path(0, ((1, 2), (3, 4))), 0, kg)
        assert enc.y.tolist() == [value] * 8

    @pytest.mark.parametrize("mode", ENTITY_MODES)
    @pytest.mark.parametrize("act", ["relu", "sigmoid"])
    def test_three_hop_matches_oracle(self, kg, mode, act):
        rng = derive_rng(1, mode, act)
        p = model_for(kg, rng, activation=act, entity_mode=mode)
        path = random_path(rng, kg, 0, 5, 3)
        enc = encode_path(p, path, 1, kg)
        assert len(enc) == 3 and len(enc.hidden_states) == 3
        np.testing.assert_allclose(enc.y, oracle_encode(p, path, kg), rtol=0, atol=1e-12)

    def test_per_relation_uses_private_block(self, kg):
        rng = derive_rng(2)
        p = model_for(kg, rng, sharing="per_relation", activation="sigmoid")
        path = random_path(rng, kg, 0, 5, 3)
        y1 = encode_path(p, path, 1).y
        np.testing.assert_allclose(y1, oracle_encode(p, path, kg, "b1/"), rtol=0, atol=1e-12)
        before = encode_path(p, path, 0).y.copy()
        for name in p.arrays:
            if name.startswith("b1/"):
                p.arrays[name] += 1.0
        assert np.array_equal(encode_path(p, path, 0).y, before)

    def test_unknown_ids(self, kg):
        p = model_for(kg, derive_rng(0), entity_mode="learned_entity")
        with pytest.raises(UnknownIdError):
            encode_path(p, Path(0, ((99, 1),)), 0, kg)
        with pytest.raises(UnknownIdError):
            encode_path(p, Path(0, ((0, 99),)), 0, kg)
        with pytest.raises(UnknownIdError):
            encode_path(p, Path(0, ((0, 1),)), 7, kg)

    def test_shared_encoding_ignores_query(self, kg):
        rng = derive_rng(3)
        p = model_for(kg, rng, entity_mode="type_sum")
        path = random_path(rng, kg, 0, 4, 4)
        assert np.array_equal(encode_path(p, path, 0, kg).y, encode_path(p, path, 1, kg).y)

    def test_entity_free_scores_equal(self, kg):
        rng = derive_rng(4)
        p = model_for(kg, rng)
        a = Path(0, ((1, 2), (3, 4), (0, 6)))
        b = Path(5, ((1, 7), (3, 1), (0, 3)))
        s, _ = score_paths(p, kg, [a, b], [0, 0])
        assert s[0] == s[1]
        assert score_path(p, encode_path(p, a, 0)) == score_path(p, encode_path(p, b, 0))

    def test_types_can_break_tie(self, kg):
        rng = derive_rng(4)
        p = model_for(kg, rng, entity_mode="type_sum")
        e1, e2 = typed_entity(kg, 1), typed_entity(kg, 0)
        a, b = Path(0, ((1, e1), (3, 4))), Path(0, ((1, e2), (3, 4)))
        s, _ = score_paths(p, kg, [a, b], [0, 0])
        assert s[0] != s[1]

    def test_batched_equals_single(self, kg):
        rng = derive_rng(5)
        p = model_for(kg, rng, sharing="per_relation", entity_mode="entity_plus_type_sum")
        paths = [random_path(rng, kg, 0, 3, int(rng.integers(1, 5))) for _ in range(6)]
        qs = [i % 2 for i in range(6)]
        batched, _ = score_paths(p, kg, paths, qs)
        single = [score_path(p, encode_path(p, x, q, kg)) for x, q in zip(paths, qs)]
        np.testing.assert_allclose(batched, single, rtol=0, atol=1e-12)


class TestScore:
    def test_unit_vectors(self, kg):
        p = model_for(kg, derive_rng(0))
        enc = encode_path(p, Path(0, ((0, 1),)), 0)
        enc.trace.hidden[-1][0] = np.eye(8)[2]
        p.arrays["query"][0] = np.eye(8)[2]
        assert score_path(p, enc) == 1.0
        p.arrays["query"][0] = np.eye(8)[3]
        assert score_path(p, enc) == 0.0

    def test_dot_product(self, kg):
        p = model_for(kg, derive_rng(0))
        enc = encode_path(p, Path(0, ((0, 1), (2, 3))), 1)
        y, q = enc.y.tolist(), p.arrays["query"][1].tolist()
        assert score_path(p, enc) == pytest.approx(sum(a * b for a, b in zip(y, q)), abs=1e-15)


@pytest.mark.parametrize("mode", ENTITY_MODES)
@pytest.mark.parametrize("act", ["relu", "sigmoid"])
@pytest.mark.parametrize("length", [1, 4, 7])
def test_encode_backward_gradcheck(kg, mode, act, length):
    rng = derive_rng(6, mode, act, length)
    p = model_for(kg, rng, activation=act, entity_mode=mode)
    path = random_path(rng, kg, 0, 5, length)
    w = rng.normal(size=8)

    def loss(_):
        return float(encode_path(p, path, 0, kg).y @ w)

    grads = encode_path_backward(p, encode_path(p, path, 0, kg), w, {}, kg)
    kinks = (lambda _: np.concatenate(encode_path(p, path, 0, kg).pre_activations)) if act == "relu" else None
    rep = check_gradients(loss, p.arrays, grads, kink_fn=kinks)
    assert rep.passed, rep.summary()


class TestPathQuery:
    def params(self, seed=0, dim=6):
        return init_pathquery_params([f"n{i}" for i in range(5)], ["a", "b", "c"], dim, derive_rng(seed))

    def test_single_relation_identity(self):
        p = self.params()
        p.arrays["W_hh"][:] = 0
        p.arrays["W_ih"][:] = np.eye(6)
        xs, xt = p.arrays["ent_emb"][1], p.arrays["ent_emb"][3]
        expected = sum(a * b * c for a, b, c in zip(xs, relu(p.arrays["rel_emb"][2]), xt))
        assert pathquery_score(p, 1, [2], 3, "rnn_diag") == pytest.approx(expected, abs=1e-15)

    def test_rnn_diag_two_hop_oracle(self):
        p = self.params(1)
        A = p.arrays
        h1 = relu(matvec(A["W_ih"].T, A["rel_emb"][0]))
        h2 = relu(matvec(A["W_hh"], h1) + matvec(A["W_ih"].T, A["rel_emb"][2]))
        H = h1 + h2
        xs, xt = A["ent_emb"][4], A["ent_emb"][0]
        expected = sum(xs[i] * H[i] * xt[i] for i in range(6))
        assert pathquery_score(p, 4, [0, 2], 0, "rnn_diag") == pytest.approx(expected, abs=1e-12)

    def test_rnn_diag_symmetry(self):
        p = self.params(2)
        assert pathquery_score(p, 1, [0, 1, 2], 3, "rnn_diag") == pathquery_score(p, 3, [0, 1, 2], 1, "rnn_diag")

    def test_comp_transe_zero(self):
        p = self.params(3)
        A = p.arrays
        A["ent_emb"][2] = A["ent_emb"][0] + A["rel_emb"][1]
        assert pathquery_score(p, 0, [1], 2, "comp_transe") == 0.0

    def test_comp_bilinear_diag_oracle(self):
        p = self.params(4)
        A = p.arrays
        xs, xt = A["ent_emb"][0], A["ent_emb"][1]
        w1, w2 = A["rel_emb"][2], A["rel_emb"][0]
        expected = sum(xs[i] * w1[i] * w2[i] * xt[i] for i in range(6))
        assert pathquery_score(p, 0, [2, 0], 1, "comp_bilinear_diag") == pytest.approx(expected, abs=1e-15)

    def test_dimension_mismatch(self):
        p = self.params()
        p.arrays["ent_emb"] = np.zeros((5, 4))
        for v in PATHQUERY_VARIANTS:
            with pytest.raises(ValueError):
                pathquery_score(p, 0, [1], 2, v)

    @pytest.mark.parametrize("variant", PATHQUERY_VARIANTS)
    def test_gradcheck(self, variant):
        p = self.params(5, dim=4)
        rng = derive_rng(5, variant)
        src, seqs, tgt = [0, 1, 2, 3], [[0], [1, 2], [2, 0, 1], [1, 1]], [4, 0, 3, 2]
        w = rng.normal(size=4)

        def loss(_):
            return float(pathquery_scores(p, src, seqs, tgt, variant)[0] @ w)

        _, cache = pathquery_scores(p, src, seqs, tgt, variant)
        grads = pathquery_backward(p, cache, w, {})

        def kinks(_):
            _, c = pathquery_scores(p, src, seqs, tgt, variant)
            return np.concatenate([z.ravel() for g in c.groups if variant == "rnn_diag" for z in g[4].pre] or [np.ones(1)])

        rep = check_gradients(loss, p.arrays, grads, kink_fn=kinks)
        assert rep.passed, rep.summary()


class TestCheckpoint:
    @pytest.mark.parametrize("preset", ["pathrnn", "single+ent+types"])
    def test_roundtrip_bit_exact(self, kg, tmp_path, preset):
        p = model_for(kg, derive_rng(7), **{k: v for k, v in ModelConfig.preset(preset).to_dict().items() if k not in "dhm"})
        blob = checkpoint.to_bytes(p, {"seed": 7})
        q, extra = checkpoint.from_bytes(blob)
        assert extra == {"seed": 7}
        assert checkpoint.to_bytes(q, extra) == blob
        for k in p.arrays:
            assert p.arrays[k].tobytes() == q.arrays[k].tobytes()
        checkpoint.save(q, tmp_path / "m.ckpt", extra)
        assert (tmp_path / "m.ckpt").read_bytes() == blob

    def test_pathquery_roundtrip(self):
        p = init_pathquery_params(["x", "y"], ["r"], 3, derive_rng(0))
        q, _ = checkpoint.from_bytes(checkpoint.to_bytes(p))
        assert q.pathquery and checkpoint.to_bytes(q) == checkpoint.to_bytes(p)

    def test_corrupt(self, kg):
        blob = checkpoint.to_bytes(model_for(kg, derive_rng(0)))
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.from_bytes(b"NOPE" + blob[4:])
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.from_bytes(blob[:-8])
