"""nestor: a scheduler inside a scheduler, at desk scale.

A batch-style node fabric launches N identical node-agent processes. The
agents self-organize through a shared-store rendezvous into one head plus
workers, forming a dependency-driven task cluster with a global object
store. On top of that sit throughput-scaling benchmarks and the report
generator that turns raw throughput measurements into speedup factors and
efficiency percentages.
"""

__version__ = "0.1.0"
