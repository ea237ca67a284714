"""Exception hierarchy shared across the curation engine."""


class CuratorError(Exception):
    """Base class for all engine errors."""


# frame_io
class Y4MError(CuratorError):
    pass


class BadMagic(Y4MError):
    pass


class MissingField(Y4MError):
    pass


class UnsupportedChroma(Y4MError):
    pass


class TruncatedFrame(Y4MError):
    pass


class TemplateError(CuratorError):
    pass


class ProcessFailure(CuratorError):
    def __init__(self, job, returncode, stderr=""):
        self.job = job
        self.returncode = returncode
        self.stderr = stderr
        super().__init__(f"transcoder failed for {job.source_id} (exit {returncode}): {stderr.strip()[:200]}")


# clients
class ClientUnavailable(CuratorError):
    pass


class MalformedResponse(CuratorError):
    pass


# splitter / filters / dedup
class BinMismatch(CuratorError):
    pass


class DimensionMismatch(CuratorError):
    pass


class NonFiniteWeight(CuratorError):
    pass


class CategoryMismatch(CuratorError):
    pass


class ZeroObserved(CuratorError):
    pass


class EmptyCorpus(CuratorError):
    pass


class KTooLarge(CuratorError):
    pass


class EmptyInput(CuratorError):
    pass


class UnnormalizedInput(CuratorError):
    pass


class MissingEmbedding(CuratorError):
    pass


# shard_store
class InvalidDuration(CuratorError):
    pass


class PayloadMissing(CuratorError):
    pass


class WriteFailure(CuratorError):
    pass


class InvalidTransition(CuratorError):
    pass


# orchestrator
class Infeasible(CuratorError):
    pass


class GraphError(CuratorError):
    pass


class StagePanic(CuratorError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} panicked: {cause!r}")


class ConfigError(CuratorError):
    pass
