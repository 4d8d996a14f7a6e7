import json
import math
import os
import pathlib

import pytest

import ragopt

DATA = pathlib.Path(os.environ.get("RAGOPT_DATA_DIR", pathlib.Path(__file__).resolve().parents[2] / "data"))


def test_tokens_and_rewards():
    assert ragopt.count_tokens("fee?") == 2
    assert ragopt.count_tokens("annual fee for card") == 4
    assert ragopt.reward("FETCH") == 0.1
    assert ragopt.reward("NO_FETCH", "GOOD") == 2.0
    assert ragopt.reward("NO_FETCH", "BAD") == -1.0
    with pytest.raises(ragopt.RagoptError):
        ragopt.reward("NO_FETCH")


def test_returns_and_gate():
    g = ragopt.discounted_returns([0.1, 2.0], 0.1)
    assert g == pytest.approx([0.3, 2.0], abs=1e-12)
    assert ragopt.decide("SIMTHR", 0.95) == "STATIC"
    assert ragopt.decide("SIMTHR", 0.91) == "FETCH"
    assert ragopt.decide("SIMTHR_POLICY", 0.5, "NO_FETCH") == "NO_FETCH"
    with pytest.raises(ragopt.ValidationError):
        ragopt.decide("SIMTHR", 0.5, threshold=2.0)


def test_embedding_and_retrieval():
    v = ragopt.embed("annual fee")
    assert len(v) == 256
    assert math.isclose(ragopt.cosine(v, v), 1.0, abs_tol=1e-12)
    assert ragopt.cosine(v, ragopt.embed("annual fees")) > ragopt.cosine(v, ragopt.embed("weather today"))
    top = ragopt.retrieve(DATA / "faq_corpus.json", "is there an annual fee for the card", k=3)
    assert len(top) == 3
    assert top[0][0] == "annual_fee"
    assert top[0][1] >= top[1][1] >= top[2][1]


def test_state_round_trip():
    s = "[CLS] is there annual fee [SEP] [FETCH] can you reduce it [SEP]"
    prev, cur = ragopt.parse_state(s)
    assert prev == [("is there annual fee", "FETCH")]
    assert cur == "can you reduce it"
    assert ragopt.serialize_state(prev, cur) == s
    with pytest.raises(ragopt.ParseError):
        ragopt.parse_state("no cls here")


def test_small_end_to_end(tmp_path):
    cfg = {
        "corpus": str(DATA / "faq_corpus.json"),
        "train_sessions": str(DATA / "train_sessions.json"),
        "test_sessions": str(DATA / "test_session.json"),
        "ood_queries": str(DATA / "ood_queries.json"),
        "out_dir": str(tmp_path),
        "embed_epochs": 3,
        "train_per_faq": 8,
        "heldout_per_faq": 4,
        "policy_rounds": 1,
        "policy_samples": 1,
        "policy_epochs": 2,
    }
    emb = ragopt.embed_train(cfg)
    assert emb["loss"] == "infonce"
    assert (tmp_path / "head.json").exists()
    pol = ragopt.policy_train(cfg)
    assert pol["tuples"] == 168
    rows = ragopt.report(cfg)
    assert [r["setting"] for r in rows] == ["ALL_FETCH", "SIMTHR", "SIMTHR_POLICY"]
    assert rows[0]["saving"] == 0.0
    assert rows[1]["tokens"] <= rows[0]["tokens"]
    saved = json.loads((tmp_path / "report.json").read_text())
    assert saved["settings"][2]["tokens"] == rows[2]["tokens"]

    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({**cfg, "mode": "ALL_FETCH"}))
    sim = ragopt.simulate(str(cfg_path))
    assert sim["setting"] == "ALL_FETCH"
    assert all(r["route"] == "FETCH" for r in sim["trace"])


def test_defaults():
    d = ragopt.default_config()
    assert d["tau"] == 0.1 and d["batch_size"] == 8 and d["threshold"] == 0.92
    assert d["k"] == 3 and d["mc_passes"] == 10 and d["gamma"] == 0.1 and d["lambda"] == 0.1
    with pytest.raises(ragopt.ValidationError):
        ragopt.embed_train({"corpus": "/nonexistent/corpus.json"})
