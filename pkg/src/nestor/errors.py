"""Exception hierarchy shared by all nestor subsystems."""


class NestorError(Exception):
    """Base class for all nestor-specific failures."""


class ProtocolError(NestorError):
    """A peer sent something that is not a valid wire message."""


# --- rendezvous -------------------------------------------------------------

class StoreUnreachable(NestorError):
    """The shared rendezvous store cannot be read or written."""


class NotHead(NestorError):
    """Caller tried to publish a head record without winning the election."""


class DiscoveryTimeout(NestorError):
    """No head record appeared within the discovery timeout."""


class MalformedRecord(NestorError):
    """A stored head record failed validation."""


class AuthRejected(NestorError):
    """Handshake rejected: token did not match the head's token."""


class VersionMismatch(NestorError):
    """Handshake rejected: peer speaks a different protocol version."""


class ConnectionFailed(NestorError):
    """TCP connection to the head could not be established or broke down."""


# --- fabric -----------------------------------------------------------------

class SpawnFailed(NestorError):
    """An agent process failed to start; the allocation was rolled back."""

    def __init__(self, node_index: int, reason: str = ""):
        super().__init__(f"failed to spawn agent for node {node_index}: {reason}")
        self.node_index = node_index


class DigestMismatch(NestorError):
    """A staged bundle entry does not match its manifest digest."""

    def __init__(self, node_index: int, entry: str):
        super().__init__(f"digest mismatch for entry {entry!r} on node {node_index}")
        self.node_index = node_index
        self.entry = entry


class StagingFailed(NestorError):
    """Bundle staging failed for a reason other than a digest mismatch."""


# --- scheduler --------------------------------------------------------------

class DuplicateJob(NestorError):
    """A job with this job_id was already submitted."""


class UnknownTaskKind(NestorError):
    """The job names a task kind that is not registered."""


class OversizedRequest(NestorError):
    """cpu_req exceeds the slot total of every worker in the cluster."""


class DuplicateArtifact(NestorError):
    """An artifact with this id already exists (or is claimed by another job)."""


class ArtifactNotFound(NestorError):
    """No artifact is stored under the requested id."""


class UnknownJob(NestorError):
    """No job was submitted under the requested job_id."""


class TaskContractViolation(NestorError):
    """A task body produced artifacts that disagree with its declaration."""


# --- orchestrator -----------------------------------------------------------

class ClusterExists(NestorError):
    """A cluster with this cluster_id is already up in the store."""


class FormationTimeout(NestorError):
    """The cluster did not reach Ready within the formation timeout."""


class ClusterNotReady(NestorError):
    """Operation requires a Ready cluster."""


class WorkloadFailed(NestorError):
    """A job of a submitted workload ended in the Failed phase."""

    def __init__(self, job_id: str, error: str):
        super().__init__(f"job {job_id!r} failed: {error}")
        self.job_id = job_id
        self.error = error


# --- bench ------------------------------------------------------------------

class SlotMismatch(NestorError):
    """Cluster worker slot total differs from the benchmark spec."""


class ActorFailed(NestorError):
    """A benchmark actor job did not succeed."""


class EmptyInput(NestorError):
    """Aggregation was asked to summarize zero records."""


# --- report -----------------------------------------------------------------

class ZeroBase(NestorError):
    """Speedup is undefined for a non-positive base throughput."""


class MissingBase(NestorError):
    """An environment group lacks a measurement at the base CPU count."""

    def __init__(self, env_name: str, base_cpus: int):
        super().__init__(f"no measurement for env {env_name!r} at base {base_cpus} CPUs")
        self.env_name = env_name
        self.base_cpus = base_cpus


class InconsistentUnits(NestorError):
    """Measurement rows disagree in schema or duplicate a configuration."""
