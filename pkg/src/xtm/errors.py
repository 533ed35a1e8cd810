"""Exception hierarchy shared by every module.

The CLI prints ``type(err).__name__`` on failure, so class names double as
the user-facing error codes.
"""


class XtmError(Exception):
    """Base class for all package errors."""


# corpus / vocabulary loading
class IoError(XtmError):
    pass


class EmptyFile(XtmError):
    pass


class DuplicateToken(XtmError):
    def __init__(self, token, line):
        super().__init__(f"duplicate token {token!r} at line {line}")
        self.token = token
        self.line = line


class MalformedLine(XtmError):
    def __init__(self, line, reason=""):
        super().__init__(f"malformed line {line}" + (f": {reason}" if reason else ""))
        self.line = line


class BadLangTag(XtmError):
    pass


class IndexOutOfVocab(XtmError):
    def __init__(self, doc_id, index):
        super().__init__(f"document {doc_id!r}: index {index} outside vocabulary")
        self.doc_id = doc_id
        self.index = index


class DanglingPair(XtmError):
    def __init__(self, pair_id):
        super().__init__(f"pair_id {pair_id!r} present in only one language")
        self.pair_id = pair_id


# embeddings
class MalformedHeader(XtmError):
    pass


class DimMismatch(XtmError):
    def __init__(self, token, expected, got):
        super().__init__(f"{token!r}: expected {expected} components, got {got}")
        self.token = token


class NonFiniteVector(XtmError):
    def __init__(self, token):
        super().__init__(f"non-finite vector for {token!r}")
        self.token = token


class NoCoveredWords(XtmError):
    pass


class MissingDocEmbedding(XtmError):
    def __init__(self, doc_id):
        super().__init__(f"no embedding for document {doc_id!r}")
        self.doc_id = doc_id


class ProviderError(XtmError):
    """Network, auth or fixture failure of an external provider."""

    def __init__(self, kind, detail=""):
        super().__init__(kind if not detail else f"{kind}: {detail}")
        self.kind = kind


# training
class NonFiniteActivation(XtmError):
    pass


class NonFiniteLoss(XtmError):
    def __init__(self, term, epoch=None, batch=None):
        where = "" if epoch is None else f" (epoch {epoch}, batch {batch})"
        super().__init__(f"non-finite {term}{where}")
        self.term = term
        self.epoch = epoch
        self.batch = batch


class ConfigError(XtmError):
    pass


# LLM refinement
class EmptyBatch(XtmError):
    pass


class ParseError(XtmError):
    """Base for LLM response format violations (these trigger retries)."""


class MissingTopic(ParseError):
    def __init__(self, topic_id):
        super().__init__(f"topic {topic_id} missing from response")
        self.topic_id = topic_id


class WordCountMismatch(ParseError):
    def __init__(self, topic_id, lang, got):
        super().__init__(f"topic {topic_id} {lang}: expected 15 words, got {got}")
        self.topic_id = topic_id
        self.lang = lang
        self.got = got


class MultiwordToken(ParseError):
    def __init__(self, topic_id, lang, token):
        super().__init__(f"topic {topic_id} {lang}: multiword token {token!r}")
        self.topic_id = topic_id
        self.lang = lang
        self.token = token


class OutOfOrderTopics(ParseError):
    pass


class AllRetriesFailed(XtmError):
    def __init__(self, attempts, last_error=None):
        super().__init__(f"response unparseable after {attempts} attempts: {last_error}")
        self.attempts = attempts
        self.last_error = last_error


class NoSuccessfulRounds(XtmError):
    pass


# MMD / alignment
class EmptySupport(XtmError):
    pass


class DegenerateSupport(XtmError):
    pass


class ShapeMismatch(XtmError):
    pass


class NoTopicsEmbeddable(XtmError):
    pass


# evaluation
class EmptyReference(XtmError):
    pass


class SingleClassTraining(XtmError):
    pass


class UnparseableRating(XtmError):
    def __init__(self, topic, reply):
        super().__init__(f"topic {topic}: cannot parse rating from {reply!r}")
        self.topic = topic
        self.reply = reply
