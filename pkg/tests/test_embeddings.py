import json
import math

import httpx
import numpy as np
import pytest

from xtm.corpus_io import BowDocument, Vocabulary
from xtm.embeddings import (
    EmbeddingTable,
    EncoderProvider,
    document_embedding,
    load_doc_embeddings,
    load_word_embeddings,
    mean_of_words,
    text_key,
    topic_embedding,
)
from xtm.errors import (
    DimMismatch,
    MalformedHeader,
    MissingDocEmbedding,
    NoCoveredWords,
    NonFiniteVector,
    ProviderError,
)
from xtm.http import post_json
from xtm.refiner import RefinedTopic, TopicVotes


def _write(tmp_path, text, name="w.vec"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_word_table(tmp_path):
    t = load_word_embeddings(_write(tmp_path, "2 3\na 1 0 0\nb 0 1 0\n"))
    assert t.dim == 3 and len(t.word_vecs) == 2
    assert t.word("b").tolist() == [0.0, 1.0, 0.0]
    assert t.word("zzz") is None


def test_word_vectors_are_normalized(tmp_path):
    t = load_word_embeddings(_write(tmp_path, "1 2\na 3 4\n"))
    assert np.allclose(t.word("a"), [0.6, 0.8])


@pytest.mark.parametrize("text, err", [
    ("2 3\na 1 0\n", DimMismatch),
    ("1 3\na 1 nan 0\n", NonFiniteVector),
    ("1 3\na 0 0 0\n", NonFiniteVector),
    ("three\n", MalformedHeader),
    ("", MalformedHeader),
])
def test_word_table_errors(tmp_path, text, err):
    with pytest.raises(err) as e:
        load_word_embeddings(_write(tmp_path, text))
    if err is DimMismatch:
        assert e.value.token == "a"


def test_mean_of_words():
    t = EmbeddingTable(2, {"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0])})
    assert np.allclose(mean_of_words(["a", "b"], t), [1 / math.sqrt(2), 1 / math.sqrt(2)])
    t.word_vecs["c"] = np.array([0.6, 0.8])
    assert np.allclose(mean_of_words(["c", "missing"], t), [0.6, 0.8])
    with pytest.raises(NoCoveredWords):
        mean_of_words(["x", "y"], t)


def _refined(l1, l2):
    votes = TopicVotes(0, {w: 1 for w in l1}, {w: 1 for w in l2}, {w: 1 for w in l1}, {w: 1 for w in l2}, 1)
    return RefinedTopic(0, votes, tuple(l1), tuple(l2))


def test_precomputed_doc_vectors(tmp_path):
    t = EmbeddingTable(2)
    load_doc_embeddings(_write(tmp_path, json.dumps({"id": "d0", "vec": [3, 4]}) + "\n", "d.jsonl"), t)
    enc = EncoderProvider("fixture", str(tmp_path))
    doc = BowDocument("d0", "l1", {0: 1})
    assert np.allclose(document_embedding(doc, enc, t), [0.6, 0.8])
    with pytest.raises(MissingDocEmbedding):
        document_embedding(BowDocument("d1", "l1", {0: 1}), enc, t)


def test_mean_mode_document_is_count_weighted():
    t = EmbeddingTable(2, {"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0])})
    vocab = Vocabulary.from_tokens(["a", "b"])
    vec = document_embedding(BowDocument("d", "l1", {0: 3, 1: 1}), EncoderProvider("mean"), t, vocab)
    assert np.allclose(vec, np.array([3.0, 1.0]) / math.sqrt(10))


def test_fixture_encoder_is_deterministic(tmp_path):
    text = "song album"
    (tmp_path / f"{text_key(text)}.json").write_text(json.dumps({"vec": [1.0, 2.0, 2.0]}))
    enc = EncoderProvider("fixture", str(tmp_path))
    a = enc.encode(text)
    b = EncoderProvider("fixture", str(tmp_path)).encode(text)
    assert a.tobytes() == b.tobytes() and np.allclose(a, [1 / 3, 2 / 3, 2 / 3])
    t = EmbeddingTable(3)
    assert np.allclose(topic_embedding(_refined(["song"], ["album"]), enc, t), a)
    with pytest.raises(ProviderError):
        enc.encode("unknown text")


def _mock_client(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


def test_remote_encoder_retries_then_succeeds():
    seen = []

    def handler(request):
        seen.append(json.loads(request.content))
        if len(seen) < 3:
            return httpx.Response(503)
        return httpx.Response(200, json={"vec": [0.0, 2.0]})

    enc = EncoderProvider("remote", "http://enc", client=_mock_client(handler), backoff=0)
    assert np.allclose(enc.encode("hello"), [0.0, 1.0])
    assert seen == [{"text": "hello"}] * 3
    enc.encode("hello")
    assert len(seen) == 3  # memoized


@pytest.mark.parametrize("status, kind", [(401, "auth"), (403, "auth"), (404, "http"), (500, "http")])
def test_post_json_error_mapping(status, kind):
    client = _mock_client(lambda r: httpx.Response(status))
    with pytest.raises(ProviderError) as e:
        post_json(client, "http://x", {}, max_retries=1, backoff=0)
    assert e.value.kind == kind


def test_post_json_protocol_and_network_errors():
    with pytest.raises(ProviderError) as e:
        post_json(_mock_client(lambda r: httpx.Response(200, text="nope")), "http://x", {}, backoff=0)
    assert e.value.kind == "protocol"

    def boom(request):
        raise httpx.ConnectError("refused")
    with pytest.raises(ProviderError) as e:
        post_json(_mock_client(boom), "http://x", {}, max_retries=2, backoff=0)
    assert e.value.kind == "network"


def test_encoder_mode_validation(monkeypatch):
    monkeypatch.delenv("XTM_ENC_ENDPOINT", raising=False)
    with pytest.raises(ProviderError):
        EncoderProvider("remote")
    with pytest.raises(ValueError):
        EncoderProvider("bogus")
    with pytest.raises(ProviderError):
        EncoderProvider("mean").encode("text")
