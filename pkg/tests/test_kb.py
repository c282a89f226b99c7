import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from dualpost.kb import (
    IMAGE_DIM, TEXT_DIM, EmbeddingError, Exemplar, KBError, KnowledgeBase, LocalEncoder, _bucket, kb_build,
    make_encoder, read_refinements, retrieve, text_ngrams,
)
from dualpost.trajectory import Dataset
from conftest import make_traj, write_jsonl
from kb_fixtures import TableEncoder, random_kb
from oracles import cosine, scan_top1


def test_trigram_cosine_one_third():
    enc = LocalEncoder()
    grams = text_ngrams("abc") + text_ngrams("abd")
    assert grams == [" ab", "abc", "bc ", " ab", "abd", "bd "]
    # the value 1/3 assumes the five distinct trigrams land in distinct buckets
    assert len({_bucket(g, TEXT_DIM) for g in set(grams)}) == 5
    assert math.isclose(float(enc.embed_text("abc") @ enc.embed_text("abd")), 1 / 3, abs_tol=1e-12)


def test_text_normalization_and_case():
    enc = LocalEncoder()
    v = enc.embed_text("Pick  Coke Can")
    assert v.shape == (TEXT_DIM,) and math.isclose(np.linalg.norm(v), 1.0, abs_tol=1e-12)
    assert np.array_equal(v, enc.embed_text("pick coke can"))
    with pytest.raises(EmbeddingError):
        enc.embed_text("   ")


@given(st.text(alphabet="abcdefgh xyz", min_size=1, max_size=40).filter(str.strip))
def test_text_self_cosine(text):
    v = LocalEncoder().embed_text(text)
    assert abs(float(v @ v) - 1.0) <= 1e-9


def _png(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path)
    return path.name


def test_image_encoder(tmp_path):
    enc = LocalEncoder(tmp_path)
    grad = np.tile(np.arange(16, dtype=np.uint8) * 16, (16, 1))
    name = _png(tmp_path / "g.png", grad)
    v = enc.embed_image(name)
    assert v.shape == (IMAGE_DIM,) and math.isclose(np.linalg.norm(v), 1.0, abs_tol=1e-12)
    # box means over 2x2 blocks of the gradient image
    expected = np.tile((np.arange(8) * 32 + 8) / 255.0, 8)
    assert np.allclose(v, expected / np.linalg.norm(expected))
    black = enc.embed_image(_png(tmp_path / "k.png", np.zeros((8, 8))))
    assert np.allclose(black, np.full(IMAGE_DIM, 1 / 8))


def test_unreadable_image(tmp_path):
    (tmp_path / "x.png").write_bytes(b"not an image")
    enc = LocalEncoder(tmp_path)
    for ref in ("x.png", "missing.png", ""):
        with pytest.raises(EmbeddingError):
            enc.embed_image(ref)


def test_retrieval_matches_scan_oracle():
    rng = np.random.default_rng(7)
    for _ in range(200):
        kb, ids, text, image = random_kb(rng)
        q_text = rng.normal(size=text.shape[1])
        frames = rng.normal(size=(int(rng.integers(1, 4)), image.shape[1]))
        if rng.random() < 0.3:
            q_text = text[0] * 0.5
        enc = TableEncoder({"q": q_text}, {f"f{k}": f for k, f in enumerate(frames)})
        hit = retrieve(kb, "q", [f"f{k}" for k in range(len(frames))], enc)
        assert hit.text_hit.id == scan_top1(ids, text, q_text)
        assert hit.scene_hit.id == scan_top1(ids, image, frames.mean(axis=0))


def test_self_query_cosine_one(tmp_path):
    enc = LocalEncoder(tmp_path)
    trajs = []
    for k, colour in enumerate((30, 120, 220)):
        t = make_traj(f"ep{k}", 3)
        for f in t.frames:
            (tmp_path / f.observation_ref).parent.mkdir(exist_ok=True)
            _png(tmp_path / f.observation_ref, np.full((16, 16), colour + f.index * 10))
        trajs.append(t.with_frames(t.frames, instruction=f"task number {k} " * (k + 1)))
    kb = kb_build(Dataset(tuple(trajs)), {t.id: {"R": 1, "A": 2, "I": 3, "RA": 4} for t in trajs}, None, enc)
    for t in trajs:
        hit = retrieve(kb, t.instruction, [f.observation_ref for f in t.frames], enc)
        assert hit.text_hit.id == t.id and abs(hit.text_cosine - 1.0) <= 1e-9
        assert abs(hit.scene_cosine - 1.0) <= 1e-9


def test_scale_invariance():
    rng = np.random.default_rng(3)
    kb, ids, text, image = random_kb(rng, n=10, duplicates=False)
    q = rng.normal(size=text.shape[1])
    a = retrieve(kb, "q", ["f"], TableEncoder({"q": q}, {"f": image[4]}))
    b = retrieve(kb, "q", ["f"], TableEncoder({"q": q * 1e6}, {"f": image[4] * 1e-3}))
    assert (a.text_hit.id, a.scene_hit.id) == (b.text_hit.id, b.scene_hit.id)
    assert a.scene_hit.id == ids[4] or cosine(image[4], kb.by_id(a.scene_hit.id).image_embedding) > 1 - 1e-12


def test_tie_resolves_to_smallest_id():
    v = np.array([1.0, 0.0])
    ex = [Exemplar(i, "t", v * s, v, {}) for i, s in (("b", 1.0), ("a", 2.0), ("c", 1.0))]
    hit = retrieve(KnowledgeBase(ex), "q", ["f"], TableEncoder({"q": v}, {"f": v}))
    assert hit.text_hit.id == "a" and hit.scene_hit.id == "a"


def test_round_trip(tmp_path):
    kb, *_ = random_kb(np.random.default_rng(0), n=6)
    path = tmp_path / "kb.jsonl"
    kb.save(path)
    header = json.loads(path.read_text().splitlines()[0])
    assert header == {"kind": "header", "encoder": "table", "text_dim": 12, "image_dim": 8, "count": 6}
    back = KnowledgeBase.load(path)
    assert [e.id for e in back.exemplars] == [e.id for e in kb.exemplars]
    for x, y in zip(back.exemplars, kb.exemplars):
        assert np.array_equal(x.text_embedding, y.text_embedding) and x.scores == y.scores


def test_kb_rejects_bad_exemplars():
    v = np.ones(3)
    with pytest.raises(KBError):
        KnowledgeBase([Exemplar("a", "t", v, v), Exemplar("a", "t", v, v)])
    with pytest.raises(KBError):
        KnowledgeBase([Exemplar("a", "t", np.zeros(3), v)])
    with pytest.raises(KBError):
        KnowledgeBase([Exemplar("a", "t", v, v), Exemplar("b", "t", np.ones(4), v)])
    with pytest.raises(KBError):
        KnowledgeBase([Exemplar("a", "t", v, v, {"A": 11})])
    with pytest.raises(KBError):
        retrieve(KnowledgeBase([]), "q", ["f"], TableEncoder({"q": v}, {"f": v}))


class ConstEncoder:
    encoder_id = "const"

    def embed_text(self, text):
        return np.array([1.0, float(len(text))])

    def embed_image(self, ref):
        return np.array([1.0, 0.0])


def test_refinement_overrides(tmp_path):
    ds = Dataset((make_traj("a", 2), make_traj("b", 2)))
    verdicts = write_jsonl(tmp_path / "v.jsonl", [
        {"trajectory_id": "a", "R": 3, "A": 4, "I": 5, "RA": 6},
        {"trajectory_id": "b", "R": None, "A": 9, "I": 9, "RA": None},
    ])
    refine = write_jsonl(tmp_path / "r.jsonl", [{"id": "a", "overrides": {"A": 8}, "note": "grip was late"}])
    kb = kb_build(ds, verdicts, refine, ConstEncoder(), tmp_path / "kb.jsonl")
    a = kb.by_id("a")
    assert a.scores == {"R": 3, "A": 8, "I": 5, "RA": 6} and a.expert_note == "grip was late"
    assert kb.by_id("b").scores["R"] is None
    assert KnowledgeBase.load(tmp_path / "kb.jsonl").by_id("a").scores["A"] == 8


def test_build_errors(tmp_path):
    ds = Dataset((make_traj("a", 2),))
    enc = ConstEncoder()
    with pytest.raises(KBError, match="no verdict"):
        kb_build(ds, {}, None, enc)
    with pytest.raises(KBError, match="unknown id"):
        kb_build(ds, {"a": {"A": 1}}, {"zz": {"overrides": {}}}, enc)
    with pytest.raises(KBError):
        kb_build(ds, {"a": {"A": 12}}, None, enc)
    with pytest.raises(KBError, match="unknown score keys"):
        read_refinements(write_jsonl(tmp_path / "r.jsonl", [{"id": "a", "overrides": {"Z": 1}}]))
    with pytest.raises(KBError):
        read_refinements(write_jsonl(tmp_path / "r2.jsonl", [{"id": "a", "overrides": {"A": -1}}]))


def test_make_encoder(monkeypatch):
    assert isinstance(make_encoder(None), LocalEncoder)
    with pytest.raises(KBError):
        make_encoder({"kind": "psychic"})
    monkeypatch.delenv("DUALPOST_EMBED_KEY", raising=False)
    with pytest.raises(EmbeddingError, match="DUALPOST_EMBED_KEY"):
        make_encoder({"kind": "remote", "url": "https://e.example", "text_model": "t", "image_model": "i"})


def test_remote_encoder_requests(tmp_path):
    import httpx

    seen = []

    def handler(request):
        body = json.loads(request.content)
        seen.append((request.headers["Authorization"], body["model"], body["input"][:22]))
        return httpx.Response(200, json={"data": [{"embedding": [3.0, 4.0]}]})

    (tmp_path / "f.png").write_bytes(b"\x89PNG")
    from dualpost.kb import RemoteEncoder
    enc = RemoteEncoder("https://e.example/v1/embeddings", "txt", "img", api_key="s3", base_dir=tmp_path,
                        client=httpx.Client(transport=httpx.MockTransport(handler)))
    assert np.allclose(enc.embed_text("pick"), [0.6, 0.8])
    enc.embed_image("f.png")
    assert seen == [("Bearer s3", "txt", "pick"), ("Bearer s3", "img", "data:image/png;base64,")]
    bad = RemoteEncoder("https://e.example", "t", "i", api_key="k",
                        client=httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(200, json={}))))
    with pytest.raises(EmbeddingError, match="shape"):
        bad.embed_text("x")
