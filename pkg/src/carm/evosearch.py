"""Population-based search for accuracy/size Pareto-optimal model configurations.

A run evaluates ``generations`` populations of ``population`` genomes. Between
generations parents are picked by tournament on the weighted fitness ``S``,
recombined and mutated. The highest-S genome, together with the other front
members on the upper convex hull of (P, A), is carried over unchanged. The
returned front is taken over every genome evaluated during the run.
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .models.config import GENE_DOMAINS, Family, ModelConfig

log = logging.getLogger(__name__)

SHARED_GENES = ("window_samples", "learning_rate")
FITNESS_SCOPES = ("population", "history")


@dataclass(frozen=True)
class SearchConfig:
    population: int = 20
    generations: int = 10
    alpha: float = 0.85
    p_m: float = 0.2
    p_c: float = 0.7
    w_a: float = 0.7
    w_p: float = 0.3
    tournament_k: int = 3
    seed: int = 0
    elitism: bool = True
    # Replace offspring that repeat an already evaluated genome by unseen ones.
    novelty: bool = True
    fitness_scope: str = "population"

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        for name in ("p_m", "p_c"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in [0, 1]")
        if not self.w_a + self.w_p > 0:
            raise ValueError("w_a + w_p must be positive")
        if self.tournament_k < 2:
            raise ValueError("tournament_k must be >= 2")
        if self.fitness_scope not in FITNESS_SCOPES:
            raise ValueError(f"fitness_scope must be one of {FITNESS_SCOPES}")


@dataclass(frozen=True)
class ParetoCandidate:
    config: ModelConfig
    accuracy: float
    params: int
    fitness: float = 0.0
    failed: bool = False

    @property
    def point(self):
        return self.accuracy, self.params


# -- gene space ----------------------------------------------------------------

class GeneSpace:
    """Discrete per-family gene domains. Defaults to every model family."""

    def __init__(self, domains: dict | None = None, families: Sequence | None = None):
        domains = GENE_DOMAINS if domains is None else domains
        fams = list(domains) if families is None else [Family(f) for f in families]
        self.domains = {Family(f): {k: tuple(v) for k, v in domains[Family(f)].items()}
                        for f in fams}
        self.families = tuple(self.domains)
        if not self.families:
            raise ValueError("empty gene space")

    def domain(self, family, gene) -> tuple:
        return self.domains[Family(family)][gene]

    def size(self) -> int:
        return sum(math.prod(len(d) for d in dom.values()) for dom in self.domains.values())

    def enumerate(self):
        for fam, dom in self.domains.items():
            names = list(dom)
            for values in itertools.product(*(dom[n] for n in names)):
                yield ModelConfig(fam, dict(zip(names, values)))

    def _pick(self, rng, values):
        return values[int(rng.integers(len(values)))]

    def sample(self, rng) -> ModelConfig:
        fam = self._pick(rng, self.families)
        return ModelConfig(fam, {g: self._pick(rng, d) for g, d in self.domains[fam].items()})

    def contains(self, config: ModelConfig) -> bool:
        dom = self.domains.get(config.family)
        if dom is None or set(dom) != set(config.genes):
            return False
        return all(config.genes[g] in d for g, d in dom.items())


# -- scoring, selection and variation ------------------------------------------------

def _minmax(values):
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def fitness_score(cands: Sequence[ParetoCandidate], w_a: float = 0.7, w_p: float = 0.3,
                  reference: Sequence[ParetoCandidate] | None = None) -> list:
    """Weighted min-max fitness. Normalisation spans ``reference`` (default: ``cands``)."""
    cands = list(cands)
    if not cands:
        return []
    ref = list(reference) if reference is not None else cands
    acc = [c.accuracy for c in ref] + [c.accuracy for c in cands]
    par = [c.params for c in ref] + [c.params for c in cands]
    a = _minmax(acc)[len(ref):]
    p = _minmax(par)[len(ref):]
    return [replace(c, fitness=float(w_a * ai - w_p * pi)) for c, ai, pi in zip(cands, a, p)]


def _rank_key(pop, i):
    # larger is better: higher S, then lower P, then earlier insertion
    c = pop[i]
    return (c.fitness, -c.params, -i)


def tournament_select(pop: Sequence[ParetoCandidate], k: int, rng) -> ParetoCandidate:
    if k > len(pop):
        raise ValueError(f"tournament size {k} exceeds population {len(pop)}")
    drawn = rng.choice(len(pop), size=k, replace=False)
    return pop[max(drawn, key=lambda i: _rank_key(pop, int(i)))]


def crossover(a: ModelConfig, b: ModelConfig, p_c: float, rng, space: GeneSpace | None = None):
    """Uniform crossover. Across families only shared genes valid in both domains swap."""
    space = space or GeneSpace()
    if rng.random() >= p_c:
        return a.replace(), b.replace()
    ga, gb = dict(a.genes), dict(b.genes)
    if a.family is b.family:
        genes = sorted(ga)
    else:
        genes = [g for g in SHARED_GENES if g in ga and g in gb
                 and ga[g] in space.domains.get(b.family, {}).get(g, ())
                 and gb[g] in space.domains.get(a.family, {}).get(g, ())]
    for g in genes:
        if rng.random() < 0.5:
            ga[g], gb[g] = gb[g], ga[g]
    return ModelConfig(a.family, ga), ModelConfig(b.family, gb)


def mutate(m: ModelConfig, p_m: float, rng, space: GeneSpace | None = None) -> ModelConfig:
    """Resample each gene from its domain with probability ``p_m``; family is fixed."""
    space = space or GeneSpace()
    dom = space.domains[m.family]
    genes = dict(m.genes)
    for g in sorted(dom):
        if rng.random() < p_m:
            values = dom[g]
            genes[g] = values[int(rng.integers(len(values)))]
    return ModelConfig(m.family, genes)


def dominates(a: ParetoCandidate, b: ParetoCandidate) -> bool:
    return a.accuracy > b.accuracy and a.params <= b.params


def pareto_front(pop: Sequence[ParetoCandidate]) -> list:
    """Non-dominated members sorted by ascending params (ties: descending accuracy,
    then insertion order)."""
    pop = list(pop)
    order = sorted(range(len(pop)), key=lambda i: (pop[i].params, -pop[i].accuracy, i))
    front, best_acc = [], -math.inf
    # Scanning by ascending P: a member is dominated iff some earlier-or-equal-P
    # member has strictly higher accuracy.
    j = 0
    while j < len(order):
        group = [order[j]]
        while j + len(group) < len(order) and pop[order[j + len(group)]].params == pop[group[0]].params:
            group.append(order[j + len(group)])
        top = max(pop[i].accuracy for i in group)
        for i in group:
            if pop[i].accuracy >= top and pop[i].accuracy >= best_acc:
                front.append(pop[i])
        best_acc = max(best_acc, top)
        j += len(group)
    return front


def select_best(front: Sequence[ParetoCandidate], alpha: float) -> ParetoCandidate:
    front = list(front)
    if not front:
        raise ValueError("empty front")
    idx = range(len(front))
    ok = [i for i in idx if front[i].accuracy >= alpha]
    if ok:
        i = min(ok, key=lambda i: (front[i].params, i))
    else:
        i = min(idx, key=lambda i: (-front[i].accuracy, front[i].params, i))
    return front[i]


# -- the search loop ---------------------------------------------------------------

def individual_seed(run_seed: int, config: ModelConfig) -> int:
    h = hashlib.sha256(f"{run_seed}:{config.canonical()}".encode()).digest()
    return int.from_bytes(h[:4], "little")


@dataclass
class HistoryRow:
    generation: int
    candidate: ParetoCandidate
    elite: bool = False


@dataclass
class SearchResult:
    front: list
    best: ParetoCandidate
    history: list = field(default_factory=list)
    evaluated: dict = field(default_factory=dict)  # config key -> candidate
    failures: list = field(default_factory=list)

    def generation(self, g: int) -> list:
        return [r.candidate for r in self.history if r.generation == g]

    def in_front(self, cand: ParetoCandidate) -> bool:
        key = cand.config.key()
        return any(f.config.key() == key for f in self.front)


Evaluator = Callable[[ModelConfig, int], tuple]


class _Cache:
    def __init__(self, evaluator: Evaluator, seed: int, executor=None):
        self.evaluator = evaluator
        self.seed = seed
        self.executor = executor
        self.store: dict = {}
        self.order: list = []
        self.failures: list = []

    def _run(self, config):
        try:
            a, p = self.evaluator(config, individual_seed(self.seed, config))
            a = float(a)
            if not 0 <= a <= 1 or not math.isfinite(a):
                raise ValueError(f"accuracy {a} outside [0, 1]")
            p = int(p)
            if p < 1:
                raise ValueError(f"parameter count {p} must be positive")
            return ParetoCandidate(config, a, p)
        except Exception as exc:  # noqa: BLE001 - any evaluator failure scores zero
            log.warning("evaluation failed for %s: %s", config.canonical(), exc)
            self.failures.append((config, repr(exc)))
            return ParetoCandidate(config, 0.0, _fallback_params(config), failed=True)

    def evaluate(self, configs) -> list:
        todo = []
        for c in configs:
            if c.key() not in self.store and c.key() not in {t.key() for t in todo}:
                todo.append(c)
        if self.executor is not None:
            results = list(self.executor.map(self._run, todo))
        else:
            results = [self._run(c) for c in todo]
        for c, r in zip(todo, results):
            self.store[c.key()] = r
            self.order.append(c.key())
        return [self.store[c.key()] for c in configs]


def _fallback_params(config: ModelConfig) -> int:
    from .models.networks import network_param_count
    try:
        return max(1, network_param_count(config))
    except Exception:  # noqa: BLE001
        return 1


def _initial_population(space: GeneSpace, n: int, rng) -> list:
    pop, seen = [], set()
    attempts = 0
    while len(pop) < n:
        c = space.sample(rng)
        attempts += 1
        if c.key() in seen and attempts < 50 * n:
            continue
        seen.add(c.key())
        pop.append(c)
    return pop


def _novel(child, seen, space, cfg, rng):
    if child.key() not in seen:
        return child
    for _ in range(10):
        child = mutate(child, max(cfg.p_m, 0.5), rng, space)
        if child.key() not in seen:
            return child
    for _ in range(100):
        c = space.sample(rng)
        if c.key() not in seen:
            return c
    if space.size() <= 4096:
        unseen = [c for c in space.enumerate() if c.key() not in seen]
        if unseen:
            return unseen[int(rng.integers(len(unseen)))]
    return child


def _hull_elites(scored: list, limit: int) -> list:
    """Front members on the upper convex hull in the (P, A) plane, max-S member first.

    Every positive affine renormalisation of S is maximised at a hull vertex, so
    carrying these keeps the best S from dropping when fitness is recomputed over
    two consecutive generations together.
    """
    order = sorted(range(len(scored)), key=lambda i: _rank_key(scored, i), reverse=True)
    points = {}
    for c in pareto_front(scored):
        points.setdefault((c.params, c.accuracy), c)
    hull = []
    for p, a in sorted(points):
        while len(hull) >= 2:
            (p0, a0), (p1, a1) = hull[-2], hull[-1]
            if (p1 - p0) * (a - a0) - (a1 - a0) * (p - p0) >= 0:
                hull.pop()  # middle point on or under the chord
            else:
                break
        hull.append((p, a))
    keys = {points[h].config.key() for h in hull}
    out = [scored[order[0]]]
    for i in order[1:]:
        if len(out) >= limit:
            break
        if scored[i].config.key() in keys and scored[i].config.key() not in {c.config.key() for c in out}:
            out.append(scored[i])
    return out


def evolve(search: SearchConfig, evaluator: Evaluator, space: GeneSpace | None = None,
           executor=None) -> SearchResult:
    """Run the search; ``evaluator(config, seed) -> (accuracy, params)``."""
    space = space or GeneSpace()
    rng = np.random.default_rng(search.seed)
    cache = _Cache(evaluator, search.seed, executor)
    population = _initial_population(space, search.population, rng)
    elite_keys: set = set()
    history = []
    for g in range(search.generations):
        cands = cache.evaluate(population)
        ref = [cache.store[k] for k in cache.order] if search.fitness_scope == "history" else None
        scored = fitness_score(cands, search.w_a, search.w_p, reference=ref)
        for c in scored:
            history.append(HistoryRow(g, c, c.config.key() in elite_keys))
        log.info("generation %d: best S %.4f, max A %.4f", g,
                 max(c.fitness for c in scored), max(c.accuracy for c in scored))
        if g == search.generations - 1:
            break
        nxt = [c.config for c in _hull_elites(scored, search.population - 1)] \
            if search.elitism else []
        elite_keys = {c.key() for c in nxt}
        seen = set(cache.store) | {c.key() for c in nxt}
        while len(nxt) < search.population:
            pa = tournament_select(scored, search.tournament_k, rng).config
            pb = tournament_select(scored, search.tournament_k, rng).config
            for child in crossover(pa, pb, search.p_c, rng, space):
                if len(nxt) >= search.population:
                    break
                child = mutate(child, search.p_m, rng, space)
                if search.novelty:
                    child = _novel(child, seen, space, search, rng)
                seen.add(child.key())
                nxt.append(child)
        population = nxt
    archive = [cache.store[k] for k in cache.order]
    ok = [c for c in archive if not c.failed] or archive
    front = pareto_front(ok)
    best = select_best(front, search.alpha)
    return SearchResult(front, best, history, dict(cache.store), cache.failures)


# -- CSV output --------------------------------------------------------------------

HISTORY_FIELDS = ("generation", "config", "accuracy", "params", "fitness", "front", "failed")


def _row(gen, c, in_front):
    return {
        "generation": gen, "config": json.dumps(c.config.to_json(), sort_keys=True),
        "accuracy": repr(c.accuracy), "params": c.params, "fitness": repr(c.fitness),
        "front": int(in_front), "failed": int(c.failed),
    }


def write_history_csv(result: SearchResult, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, HISTORY_FIELDS)
        w.writeheader()
        for r in result.history:
            w.writerow(_row(r.generation, r.candidate, result.in_front(r.candidate)))


def write_front_csv(result: SearchResult, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, HISTORY_FIELDS)
        w.writeheader()
        for c in result.front:
            w.writerow(_row("", c, True))


def read_candidates_csv(path) -> list:
    with open(path, newline="") as f:
        return [ParetoCandidate(ModelConfig.from_json(json.loads(r["config"])),
                                float(r["accuracy"]), int(r["params"]),
                                float(r.get("fitness") or 0.0), bool(int(r.get("failed") or 0)))
                for r in csv.DictReader(f)]
