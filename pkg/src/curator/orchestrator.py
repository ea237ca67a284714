"""Stage graph execution: resource-aware replica scheduling, bounded-queue
streaming (live threads or a virtual clock) and run reports.
"""

from __future__ import annotations

import heapq
import json
import logging
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import GraphError, Infeasible, StagePanic

logger = logging.getLogger(__name__)

RESOURCE_KINDS = ("cpu", "decode", "accel", "net")
STREAMING = "streaming"
BARRIER = "barrier"
RETRY_BUDGET = 2
_EPS = 1e-9


class ResourceVector(dict):
    """Named non-negative amounts, e.g. ``{"cpu": 2, "accel": 1}``."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        for k, v in self.items():
            if not isinstance(k, str):
                raise TypeError("resource names must be strings")
            if v < 0:
                raise ValueError(f"negative amount for {k}: {v}")

    def fits_in(self, capacity: Mapping[str, float]) -> bool:
        return all(v <= capacity.get(k, 0.0) + _EPS for k, v in self.items() if v > 0)

    def l1(self) -> float:
        return float(sum(self.values()))


@dataclass
class StageSpec:
    name: str
    demand: ResourceVector = field(default_factory=ResourceVector)
    service_time: float = 1.0
    kind: str = STREAMING
    queue_capacity: int = 8

    def __post_init__(self):
        self.demand = ResourceVector(self.demand)
        if self.service_time <= 0:
            raise ValueError(f"stage {self.name}: service_time must be > 0")
        if self.kind not in (STREAMING, BARRIER):
            raise ValueError(f"stage {self.name}: unknown kind {self.kind!r}")
        if self.queue_capacity < 1:
            raise ValueError(f"stage {self.name}: queue_capacity must be >= 1")


@dataclass
class NodeSpec:
    node_id: str
    capacity: ResourceVector = field(default_factory=ResourceVector)

    def __post_init__(self):
        self.capacity = ResourceVector(self.capacity)


@dataclass
class Allocation:
    replicas: dict[str, int]
    placement: dict[str, dict[str, int]]  # node_id -> stage -> replica count
    throughput: float

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self, stages: Sequence[StageSpec], nodes: Sequence[NodeSpec]) -> None:
        by_name = {s.name: s for s in stages}
        for s in stages:
            if self.replicas.get(s.name, 0) < 1:
                raise Infeasible(f"stage {s.name} has no replica")
            placed = sum(p.get(s.name, 0) for p in self.placement.values())
            if placed != self.replicas[s.name]:
                raise Infeasible(f"stage {s.name}: {placed} placed vs {self.replicas[s.name]} replicas")
        for node in nodes:
            used: dict[str, float] = {}
            for name, count in self.placement.get(node.node_id, {}).items():
                for k, v in by_name[name].demand.items():
                    used[k] = used.get(k, 0.0) + v * count
            if not ResourceVector(used).fits_in(node.capacity):
                raise Infeasible(f"node {node.node_id} oversubscribed: {used} > {dict(node.capacity)}")


# -- scheduling ----------------------------------------------------------------------

def fragmentation_score(remaining: Mapping[str, float], capacity: Mapping[str, float]) -> float:
    """Variance across resource kinds of the fraction of capacity left free.

    Lower is better: placements that drain one resource while leaving
    others idle strand the leftovers.
    """
    fracs = [remaining.get(k, 0.0) / c for k, c in capacity.items() if c > 0]
    return float(np.var(fracs)) if fracs else 0.0


def _sub(rem: dict, demand: Mapping[str, float]) -> dict:
    out = dict(rem)
    for k, v in demand.items():
        out[k] = out.get(k, 0.0) - v
    return out


def _exact_pack(counts: Sequence[int], stages: Sequence[StageSpec], nodes: Sequence[NodeSpec], budget: int):
    """Backtracking search for any placement of ``counts`` replicas.

    Returns per-node lists of per-stage counts, or None when infeasible or
    when the search budget runs out.
    """
    order = sorted(range(len(stages)), key=lambda i: (-stages[i].demand.l1(), i))
    rem = [dict(n.capacity) for n in nodes]
    place = [[0] * len(stages) for _ in nodes]
    steps = [0]

    def fits(j, i, m):
        return all(v * m <= rem[j].get(k, 0.0) + _EPS for k, v in stages[i].demand.items() if v > 0)

    def go(pos: int, j: int, left: int) -> bool:
        steps[0] += 1
        if steps[0] > budget:
            raise TimeoutError
        if left == 0:
            if pos + 1 == len(order):
                return True
            return go(pos + 1, 0, counts[order[pos + 1]])
        if j == len(nodes):
            return False
        i = order[pos]
        for m in range(left, -1, -1):
            if not fits(j, i, m):
                continue
            for k, v in stages[i].demand.items():
                rem[j][k] = rem[j].get(k, 0.0) - v * m
            place[j][i] = m
            if go(pos, j + 1, left - m):
                return True
            for k, v in stages[i].demand.items():
                rem[j][k] += v * m
            place[j][i] = 0
        return False

    try:
        if not order:
            return place
        return place if go(0, 0, counts[order[0]]) else None
    except TimeoutError:
        logger.info("exact repack gave up after %d steps", budget)
        return None


def schedule(stages: Sequence[StageSpec], nodes: Sequence[NodeSpec], max_replicas: int = 64,
             search_budget: int = 200_000) -> Allocation:
    """Choose replica counts and placements maximising ``min_i replicas_i / service_time_i``.

    Starts from one replica per stage (first-fit decreasing by demand), then
    keeps adding a replica to the current bottleneck stage on the node with
    the lowest post-placement fragmentation score. When no node has room, an
    exact repack of the whole replica set is attempted before giving up.
    """
    stages = list(stages)
    nodes = list(nodes)
    if not stages:
        return Allocation({}, {n.node_id: {} for n in nodes}, 0.0)
    for s in stages:
        if not any(s.demand.fits_in(n.capacity) for n in nodes):
            short = [k for k, v in s.demand.items() if v > 0 and all(n.capacity.get(k, 0.0) + _EPS < v for n in nodes)]
            raise Infeasible(f"stage {s.name} needs {dict(s.demand)}; no node offers enough {', '.join(short) or 'capacity'}")
    n_s = len(stages)
    rem = [dict(n.capacity) for n in nodes]
    place = [[0] * n_s for _ in nodes]
    counts = [0] * n_s

    for i in sorted(range(n_s), key=lambda i: (-stages[i].demand.l1(), i)):
        for j in range(len(nodes)):
            if stages[i].demand.fits_in(rem[j]):
                rem[j] = _sub(rem[j], stages[i].demand)
                place[j][i] += 1
                counts[i] = 1
                break
    if 0 in counts:
        packed = _exact_pack([1] * n_s, stages, nodes, search_budget)
        if packed is None:
            raise Infeasible("one replica per stage does not fit on the given nodes")
        place, counts = packed, [1] * n_s
        rem = _remaining(place, stages, nodes)

    while True:
        b = min(range(n_s), key=lambda i: (counts[i] / stages[i].service_time, i))
        if counts[b] >= max_replicas:
            break
        best = None
        for j, node in enumerate(nodes):
            if stages[b].demand.fits_in(rem[j]):
                score = fragmentation_score(_sub(rem[j], stages[b].demand), node.capacity)
                if best is None or score < best[0] - 1e-12:
                    best = (score, j)
        if best is not None:
            j = best[1]
            rem[j] = _sub(rem[j], stages[b].demand)
            place[j][b] += 1
            counts[b] += 1
            continue
        trial = list(counts)
        trial[b] += 1
        packed = _exact_pack(trial, stages, nodes, search_budget)
        if packed is None:
            break
        place, counts = packed, trial
        rem = _remaining(place, stages, nodes)

    replicas = {s.name: counts[i] for i, s in enumerate(stages)}
    placement = {
        n.node_id: {stages[i].name: place[j][i] for i in range(n_s) if place[j][i]} for j, n in enumerate(nodes)
    }
    throughput = min(counts[i] / stages[i].service_time for i in range(n_s))
    alloc = Allocation(replicas, placement, throughput)
    alloc.validate(stages, nodes)
    return alloc


def _remaining(place, stages, nodes) -> list[dict]:
    rem = []
    for j, n in enumerate(nodes):
        r = dict(n.capacity)
        for i, s in enumerate(stages):
            for k, v in s.demand.items():
                r[k] = r.get(k, 0.0) - v * place[j][i]
        rem.append(r)
    return rem


# -- stage graph --------------------------------------------------------------------------

@dataclass
class StageGraph:
    stages: list[StageSpec]
    edges: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise GraphError("duplicate stage names")
        known = set(names)
        self.edges = [tuple(e) for e in self.edges]
        for a, b in self.edges:
            if a not in known or b not in known:
                raise GraphError(f"edge {a}->{b} names an unknown stage")
        self.order = self._toposort()

    @classmethod
    def chain(cls, stages: Sequence[StageSpec]) -> "StageGraph":
        return cls(list(stages), [(a.name, b.name) for a, b in zip(stages, stages[1:])])

    def _toposort(self) -> list[str]:
        indeg = {s.name: 0 for s in self.stages}
        for _, b in self.edges:
            indeg[b] += 1
        ready = [s.name for s in self.stages if indeg[s.name] == 0]
        order = []
        while ready:
            n = ready.pop(0)
            order.append(n)
            for a, b in self.edges:
                if a == n:
                    indeg[b] -= 1
                    if indeg[b] == 0:
                        ready.append(b)
        if len(order) != len(self.stages):
            raise GraphError("stage graph has a cycle")
        return order

    def spec(self, name: str) -> StageSpec:
        return next(s for s in self.stages if s.name == name)

    def preds(self, name: str) -> list[str]:
        return [a for a, b in self.edges if b == name]

    def succs(self, name: str) -> list[str]:
        return [b for a, b in self.edges if a == name]

    @property
    def sources(self) -> list[str]:
        return [n for n in self.order if not self.preds(n)]

    @property
    def sinks(self) -> list[str]:
        return [n for n in self.order if not self.succs(n)]

    @classmethod
    def from_dict(cls, doc: Mapping) -> "StageGraph":
        stages = [
            StageSpec(
                s["name"],
                ResourceVector(s.get("demand", {})),
                float(s.get("service_time_hint", s.get("service_time", 1.0))),
                s.get("kind", STREAMING),
                int(s.get("queue_capacity", 8)),
            )
            for s in doc["stages"]
        ]
        return cls(stages, [tuple(e) for e in doc.get("edges", [])])

    def to_dict(self) -> dict:
        return {
            "stages": [
                {"name": s.name, "kind": s.kind, "demand": dict(s.demand),
                 "service_time_hint": s.service_time, "queue_capacity": s.queue_capacity}
                for s in self.stages
            ],
            "edges": [list(e) for e in self.edges],
        }


def load_graph(path: str | Path) -> StageGraph:
    with open(path, encoding="utf-8") as fh:
        return StageGraph.from_dict(json.load(fh))


# -- reports -----------------------------------------------------------------------------

@dataclass
class StageReport:
    replicas: int = 0
    items_in: int = 0
    passed: int = 0  # inputs that produced at least one output
    out: int = 0
    filtered: int = 0
    failed: int = 0
    retries: int = 0
    peak_queue: int = 0
    busy: float = 0.0
    utilization: float = 0.0

    def conserved(self) -> bool:
        return self.items_in == self.passed + self.filtered + self.failed


@dataclass
class RunReport:
    mode: str
    duration: float = 0.0
    items_in: int = 0
    items_out: int = 0
    stages: dict[str, StageReport] = field(default_factory=dict)
    peak_buffered: int = 0
    buffer_bound: int = 0
    peak_barrier_held: int = 0
    predicted_throughput: float | None = None
    dead_letter: list[dict] = field(default_factory=list)
    panics: list[dict] = field(default_factory=list)
    outputs: list = field(default_factory=list, repr=False)
    extra: dict = field(default_factory=dict)

    @property
    def throughput(self) -> float:
        return self.items_out / self.duration if self.duration > 0 else 0.0

    def conservation_errors(self, graph: StageGraph) -> list[str]:
        errs = []
        for name, st in self.stages.items():
            if not st.conserved():
                errs.append(f"{name}: in={st.items_in} != passed {st.passed} + filtered {st.filtered} + failed {st.failed}")
        for name in graph.order:
            preds = graph.preds(name)
            expect = self.items_in if not preds else sum(self.stages[p].out for p in preds)
            if self.stages[name].items_in != expect:
                errs.append(f"{name}: received {self.stages[name].items_in}, upstream emitted {expect}")
        sink_out = sum(self.stages[s].out for s in graph.sinks)
        if sink_out != self.items_out:
            errs.append(f"sinks emitted {sink_out}, report counts {self.items_out}")
        return errs

    def to_dict(self) -> dict:
        d = {
            "mode": self.mode,
            "duration": self.duration,
            "items_in": self.items_in,
            "items_out": self.items_out,
            "throughput": self.throughput,
            "predicted_throughput": self.predicted_throughput,
            "peak_buffered": self.peak_buffered,
            "buffer_bound": self.buffer_bound,
            "peak_barrier_held": self.peak_barrier_held,
            "stages": {k: asdict(v) for k, v in self.stages.items()},
            "dead_letter": self.dead_letter,
            "panics": self.panics,
        }
        d.update(self.extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, default=str)


def _replica_nodes(graph: StageGraph, allocation: Allocation) -> dict[str, list[str | None]]:
    out: dict[str, list] = {s.name: [] for s in graph.stages}
    for node_id in sorted(allocation.placement):
        for name, count in sorted(allocation.placement[node_id].items()):
            if name in out:
                out[name] += [node_id] * count
    for s in graph.stages:
        want = allocation.replicas.get(s.name, 1)
        if len(out[s.name]) < want:
            out[s.name] += [None] * (want - len(out[s.name]))
        out[s.name] = out[s.name][:want]
        if not out[s.name]:
            raise GraphError(f"stage {s.name} has no replicas in the allocation")
    return out


# -- virtual-clock simulation ----------------------------------------------------------------

@dataclass
class _Rep:
    node: str | None
    state: str = "idle"  # idle | busy | blocked
    item: Any = None
    attempts: int = 0
    started: float = 0.0
    pending: deque = field(default_factory=deque)


def _service_sampler(distribution: str, mean: float, rng: np.random.Generator) -> Callable[[], float]:
    if distribution == "fixed":
        return lambda: mean
    if distribution == "exponential":
        return lambda: float(rng.exponential(mean))
    if distribution == "uniform":
        return lambda: float(mean * rng.uniform(0.5, 1.5))
    raise ValueError(f"unknown service-time distribution {distribution!r}")


def simulate(
    graph: StageGraph,
    allocation: Allocation,
    item_count: int | None = None,
    seed: int = 0,
    distribution: str = "fixed",
    functions: Mapping[str, Callable] | None = None,
    faults: Mapping[str, float] | None = None,
    retry_budget: int = RETRY_BUDGET,
    items: Iterable | None = None,
    observer: Callable[[float, int], None] | None = None,
) -> RunReport:
    """Discrete-event run of the stage graph on a virtual clock.

    Replicas serve one item at a time; a finished replica that cannot hand
    its output downstream (full queue) stays blocked, which is the
    backpressure path. Barrier stages hold their whole input until every
    upstream stage has drained. ``functions`` optionally maps stage names to
    the live callables (streaming: item -> list, barrier: list -> list);
    without them items pass straight through. ``faults`` gives a per-attempt
    failure probability per stage. ``observer(now, buffered)`` is called at
    every change of the buffered-item total.

    Identical arguments give identical reports.
    """
    functions = functions or {}
    faults = faults or {}
    if items is not None:
        source_items = deque(items)
    else:
        source_items = deque(range(item_count or 0))
    order = graph.order
    specs = {n: graph.spec(n) for n in order}
    preds = {n: graph.preds(n) for n in order}
    succs = {n: graph.succs(n) for n in order}
    sources = graph.sources
    nodes_for = _replica_nodes(graph, allocation)
    reps = {n: [_Rep(node) for node in nodes_for[n]] for n in order}
    stats = {n: StageReport(replicas=len(reps[n])) for n in order}
    report = RunReport("simulate", stages=stats, predicted_throughput=allocation.throughput)
    report.buffer_bound = sum(specs[n].queue_capacity for n in order if specs[n].kind == STREAMING)
    report.items_in = len(source_items)
    rngs = {n: np.random.default_rng([seed, i]) for i, n in enumerate(order)}
    fault_rngs = {n: np.random.default_rng([seed, i, 1]) for i, n in enumerate(order)}
    sample = {n: _service_sampler(distribution, specs[n].service_time, rngs[n]) for n in order}

    queues = {n: deque() for n in order}
    held = {n: [] for n in order}
    released = {n: False for n in order}
    work = {n: deque() for n in order}  # barrier items after release: (item, survives)
    heap: list = []
    seq = 0
    now = 0.0
    buffered = 0
    held_total = 0

    def note_buffer(delta):
        nonlocal buffered
        buffered += delta
        report.peak_buffered = max(report.peak_buffered, buffered)
        if observer is not None:
            observer(now, buffered)

    def can_put(n):
        return specs[n].kind == BARRIER or len(queues[n]) < specs[n].queue_capacity

    def put(n, item):
        nonlocal held_total
        stats[n].items_in += 1
        if specs[n].kind == BARRIER:
            held[n].append(item)
            held_total += 1
            report.peak_barrier_held = max(report.peak_barrier_held, held_total)
        else:
            queues[n].append(item)
            stats[n].peak_queue = max(stats[n].peak_queue, len(queues[n]))
            note_buffer(+1)

    finished_cache: dict[str, bool] = {}

    def finished(n) -> bool:
        if n in finished_cache:
            return finished_cache[n]
        up_done = all(finished(p) for p in preds[n]) and (bool(preds[n]) or not source_items)
        done = (
            up_done and not queues[n] and not work[n]
            and (specs[n].kind == STREAMING or released[n])
            and all(r.state == "idle" for r in reps[n])
        )
        finished_cache[n] = done
        return done

    def start(n, rep, item):
        nonlocal seq
        rep.state, rep.item, rep.started = "busy", item, now
        heapq.heappush(heap, (now + sample[n](), seq, n, reps[n].index(rep)))
        seq += 1

    def pump():
        nonlocal held_total
        changed = True
        while changed:
            changed = False
            for n in reversed(order):
                for rep in reps[n]:
                    if rep.state != "blocked":
                        continue
                    while rep.pending and can_put(rep.pending[0][0]):
                        dest, item = rep.pending.popleft()
                        put(dest, item)
                        changed = True
                    if not rep.pending:
                        rep.state, rep.item = "idle", None
                        changed = True
            while source_items and all(can_put(s) for s in sources):
                item = source_items.popleft()
                for s in sources:
                    put(s, item)
                changed = True
            finished_cache.clear()
            for n in order:
                if specs[n].kind != BARRIER or released[n]:
                    continue
                if all(finished(p) for p in preds[n]) and (preds[n] or not source_items):
                    batch = held[n]
                    held[n] = []
                    held_total -= len(batch)
                    keep = _barrier_keep(n, batch, functions.get(n))
                    work[n].extend(zip(batch, keep))
                    released[n] = True
                    changed = True
            for n in order:
                for rep in reps[n]:
                    if rep.state != "idle":
                        continue
                    if specs[n].kind == BARRIER:
                        if not work[n]:
                            break
                        item = work[n].popleft()
                    else:
                        if not queues[n]:
                            break
                        item = queues[n].popleft()
                        note_buffer(-1)
                    rep.attempts = 0
                    start(n, rep, item)
                    changed = True
            finished_cache.clear()

    def complete(n, idx):
        rep = reps[n][idx]
        stats[n].busy += now - rep.started
        item = rep.item
        outputs = None
        failed = fault_rngs[n].random() < faults.get(n, 0.0)
        if not failed:
            try:
                if specs[n].kind == BARRIER:
                    payload, keep = item
                    outputs = [payload] if keep else []
                elif n in functions:
                    outputs = list(functions[n](item))
                else:
                    outputs = [item]
            except Exception as exc:  # noqa: BLE001 - any stage error counts against the retry budget
                logger.debug("stage %s failed on %r: %s", n, item, exc)
                failed = True
        if failed:
            if rep.attempts < retry_budget:
                rep.attempts += 1
                stats[n].retries += 1
                start(n, rep, item)
                return
            stats[n].failed += 1
            report.dead_letter.append({"stage": n, "item": repr(item[0] if specs[n].kind == BARRIER else item)})
            rep.state, rep.item = "idle", None
            return
        if not outputs:
            stats[n].filtered += 1
            rep.state, rep.item = "idle", None
            return
        stats[n].passed += 1
        stats[n].out += len(outputs)
        if not succs[n]:
            report.items_out += len(outputs)
            report.outputs.extend(outputs)
            rep.state, rep.item = "idle", None
            return
        rep.pending = deque((d, o) for o in outputs for d in succs[n])
        rep.state = "blocked"

    pump()
    while heap:
        t, _, n, idx = heapq.heappop(heap)
        now = t
        complete(n, idx)
        pump()
    stuck = [n for n in order if not finished(n)]
    if stuck:
        raise RuntimeError(f"simulation stalled with unfinished stages {stuck}")
    report.duration = now
    for n in order:
        denom = len(reps[n]) * now
        stats[n].utilization = stats[n].busy / denom if denom > 0 else 0.0
    return report


def _barrier_keep(name: str, batch: list, fn: Callable | None) -> list[bool]:
    if fn is None:
        return [True] * len(batch)
    survivors = fn(list(batch))
    ids = {id(x) for x in survivors}
    if len(survivors) > len(batch) or not ids <= {id(x) for x in batch}:
        raise GraphError(f"barrier {name} must return a subset of its inputs")
    return [id(x) in ids for x in batch]


# -- live (threaded) execution --------------------------------------------------------------

class _End:
    pass


_END = _End()


class _Channel:
    """Bounded FIFO with producer counting; ``get`` returns _END once drained."""

    def __init__(self, capacity: int | None, meter: "_Meter", stats: StageReport):
        self.capacity = capacity
        self.items: deque = deque()
        self.cond = threading.Condition()
        self.producers = 0
        self.meter = meter
        self.stats = stats

    def put(self, item) -> None:
        with self.cond:
            while self.capacity is not None and len(self.items) >= self.capacity:
                self.cond.wait()
            self.items.append(item)
            self.stats.peak_queue = max(self.stats.peak_queue, len(self.items))
            self.meter.add(1, bounded=self.capacity is not None)
            self.cond.notify_all()

    def get(self):
        with self.cond:
            while not self.items and self.producers > 0:
                self.cond.wait()
            if not self.items:
                return _END
            item = self.items.popleft()
            self.meter.add(-1, bounded=self.capacity is not None)
            self.cond.notify_all()
            return item

    def open(self) -> None:
        with self.cond:
            self.producers += 1

    def close(self) -> None:
        with self.cond:
            self.producers -= 1
            self.cond.notify_all()


class _Meter:
    def __init__(self, report: RunReport):
        self.lock = threading.Lock()
        self.report = report
        self.bounded = 0
        self.unbounded = 0

    def add(self, delta: int, bounded: bool) -> None:
        with self.lock:
            if bounded:
                self.bounded += delta
                self.report.peak_buffered = max(self.report.peak_buffered, self.bounded)
            else:
                self.unbounded += delta
                self.report.peak_barrier_held = max(self.report.peak_barrier_held, self.unbounded)


def run_pipeline(
    graph: StageGraph,
    source: Iterable,
    allocation: Allocation,
    functions: Mapping[str, Callable] | None = None,
    mode: str = "live",
    retry_budget: int = RETRY_BUDGET,
    **sim_kwargs,
) -> RunReport:
    """Push ``source`` items through the graph.

    Streaming stage functions take one item and return a list of outputs
    (empty means filtered). Barrier functions take every upstream item at
    once and return the survivors. Item errors are retried up to
    ``retry_budget`` times and then dead-lettered. A barrier function that
    raises is a stage panic: its items count as failed, everything
    downstream drains empty, and the panic is listed in the report.
    """
    if mode == "simulate":
        return simulate(graph, allocation, items=list(source), functions=functions,
                        retry_budget=retry_budget, **sim_kwargs)
    if mode != "live":
        raise ValueError(f"unknown mode {mode!r}")
    functions = functions or {}
    order = graph.order
    nodes_for = _replica_nodes(graph, allocation)
    stats = {n: StageReport(replicas=len(nodes_for[n])) for n in order}
    report = RunReport("live", stages=stats, predicted_throughput=allocation.throughput)
    meter = _Meter(report)
    channels = {}
    for n in order:
        spec = graph.spec(n)
        channels[n] = _Channel(spec.queue_capacity if spec.kind == STREAMING else None, meter, stats[n])
    report.buffer_bound = sum(graph.spec(n).queue_capacity for n in order if graph.spec(n).kind == STREAMING)
    lock = threading.Lock()
    for n in order:
        preds = graph.preds(n)
        for _ in preds or [None]:
            channels[n].open()

    def emit(n, outputs):
        succs = graph.succs(n)
        with lock:
            stats[n].passed += 1
            stats[n].out += len(outputs)
            if not succs:
                report.items_out += len(outputs)
                report.outputs.extend(outputs)
        for o in outputs:
            for d in succs:
                channels[d].put(o)

    def streaming_worker(n, fn):
        ch = channels[n]
        while True:
            item = ch.get()
            if item is _END:
                return
            with lock:
                stats[n].items_in += 1
            t0 = time.perf_counter()
            outputs, err = None, None
            for attempt in range(retry_budget + 1):
                try:
                    outputs = list(fn(item)) if fn is not None else [item]
                    err = None
                    break
                except Exception as exc:  # noqa: BLE001
                    err = exc
                    if attempt < retry_budget:
                        with lock:
                            stats[n].retries += 1
            with lock:
                stats[n].busy += time.perf_counter() - t0
            if err is not None:
                logger.warning("stage %s dead-lettered %r: %s", n, item, err)
                with lock:
                    stats[n].failed += 1
                    report.dead_letter.append({"stage": n, "item": repr(item), "error": repr(err)})
                continue
            if not outputs:
                with lock:
                    stats[n].filtered += 1
                continue
            emit(n, outputs)

    def barrier_worker(n, fn):
        ch = channels[n]
        batch = []
        while True:
            item = ch.get()
            if item is _END:
                break
            batch.append(item)
            meter.add(1, bounded=False)
            with lock:
                stats[n].items_in += 1
        meter.add(-len(batch), bounded=False)
        t0 = time.perf_counter()
        try:
            survivors = list(fn(batch)) if fn is not None else batch
            keep = {id(x) for x in survivors}
            if len(survivors) > len(batch) or not keep <= {id(x) for x in batch}:
                raise GraphError(f"barrier {n} must return a subset of its inputs")
        except Exception as exc:  # noqa: BLE001
            panic = StagePanic(n, exc)
            logger.error("%s", panic)
            with lock:
                stats[n].failed += len(batch)
                report.panics.append({"stage": n, "error": repr(exc)})
                report.dead_letter.extend({"stage": n, "item": repr(x), "error": "panic"} for x in batch)
                stats[n].busy += time.perf_counter() - t0
            return
        with lock:
            stats[n].busy += time.perf_counter() - t0
        for x in batch:
            if id(x) in keep:
                emit(n, [x])
            else:
                with lock:
                    stats[n].filtered += 1

    def run_stage(n):
        spec = graph.spec(n)
        fn = functions.get(n)
        if spec.kind == BARRIER:
            threads = [threading.Thread(target=barrier_worker, args=(n, fn), name=f"{n}-0", daemon=True)]
        else:
            threads = [
                threading.Thread(target=streaming_worker, args=(n, fn), name=f"{n}-{i}", daemon=True)
                for i in range(len(nodes_for[n]))
            ]
        for t in threads:
            t.start()
        return threads

    def closer(n, threads):
        for t in threads:
            t.join()
        for d in graph.succs(n):
            channels[d].close()

    def feed():
        count = 0
        for item in source:
            count += 1
            for s in graph.sources:
                channels[s].put(item)
        with lock:
            report.items_in = count
        for s in graph.sources:
            channels[s].close()

    t_start = time.perf_counter()
    watchers = []
    for n in order:
        threads = run_stage(n)
        w = threading.Thread(target=closer, args=(n, threads), daemon=True)
        w.start()
        watchers.append(w)
    feeder = threading.Thread(target=feed, daemon=True)
    feeder.start()
    feeder.join()
    for w in watchers:
        w.join()
    report.duration = time.perf_counter() - t_start
    for n in order:
        denom = stats[n].replicas * report.duration
        stats[n].utilization = stats[n].busy / denom if denom > 0 else 0.0
    return report
