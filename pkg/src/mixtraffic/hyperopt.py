"""Hyperparameter space, random search and an elitist evolutionary algorithm."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .qlearn import NetSpec, TrainSchedule, TrainingDivergence, state_dim
from .sim import ObservationSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HyperConfig:
    lanes_side: int = 3
    patches_ahead: int = 30
    patches_behind: int = 13
    train_iterations: int = 100_000
    temporal_window: int = 0
    num_neurons: int = 21
    learning_rate: float = 0.00017
    momentum: float = 0.57
    batch_size: int = 53
    l2_decay: float = 0.01
    experience_size: int = 5000
    start_learn_threshold: int = 500
    gamma: float = 0.9
    learning_steps_total: int = 54129
    learning_steps_burnin: int = 1083
    epsilon_min: float = 0.86
    epsilon_test_time: float = 0.22
    number_of_layers: int = 7

    def obs_spec(self) -> ObservationSpec:
        return ObservationSpec(self.lanes_side, self.patches_ahead, self.patches_behind, self.temporal_window)

    def net_spec(self) -> NetSpec:
        # number_of_layers counts the input and output layers
        spec = self.obs_spec()
        return NetSpec(state_dim(spec.n_cells, self.temporal_window), self.number_of_layers - 2, self.num_neurons)

    def schedule(self, target_update_period: int = 0) -> TrainSchedule:
        return TrainSchedule(
            train_iterations=self.train_iterations,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            batch_size=self.batch_size,
            l2_decay=self.l2_decay,
            gamma=self.gamma,
            experience_size=self.experience_size,
            start_learn_threshold=self.start_learn_threshold,
            learning_steps_total=self.learning_steps_total,
            learning_steps_burnin=self.learning_steps_burnin,
            epsilon_min=self.epsilon_min,
            epsilon_test_time=self.epsilon_test_time,
            target_update_period=target_update_period,
        )

    def scaled(self, train_iterations: int) -> "HyperConfig":
        """Same configuration with the epsilon schedule stretched to a new training length."""
        f = train_iterations / self.train_iterations
        return replace(
            self,
            train_iterations=train_iterations,
            learning_steps_total=int(self.learning_steps_total * f),
            learning_steps_burnin=int(self.learning_steps_burnin * f),
        )

    def as_dict(self) -> dict:
        return asdict(self)

    def key(self) -> str:
        text = ";".join(f"{k}={v!r}" for k, v in asdict(self).items())
        return hashlib.sha256(text.encode()).hexdigest()[:16]


BEST_KNOWN = HyperConfig()
HYPER_FIELDS = tuple(f.name for f in fields(HyperConfig))
_INT_FIELDS = {f.name for f in fields(HyperConfig) if f.type in ("int", int)}


@dataclass(frozen=True)
class Gene:
    name: str
    kind: str  # "int" | "real" | "fixed"
    lo: float
    hi: float
    scale: str = "linear"  # "linear" | "log"

    def __post_init__(self):
        if self.kind not in ("int", "real", "fixed"):
            raise ValueError(f"gene {self.name}: unknown kind {self.kind!r}")
        if self.lo > self.hi:
            raise ValueError(f"gene {self.name}: lower bound exceeds upper bound")
        if self.scale == "log" and self.lo <= 0:
            raise ValueError(f"gene {self.name}: log scale needs a positive lower bound")

    @property
    def free(self) -> bool:
        return self.kind != "fixed"


def _default_genes() -> list[Gene]:
    return [
        Gene("lanes_side", "int", 3, 6),
        Gene("patches_ahead", "int", 1, 55),
        Gene("patches_behind", "int", 1, 20),
        Gene("train_iterations", "int", 10_000, 100_000),
        Gene("temporal_window", "fixed", 0, 0),
        Gene("num_neurons", "int", 1, 100),
        Gene("learning_rate", "real", 0.0001, 0.1, "log"),
        Gene("momentum", "real", 0.0, 1.0),
        Gene("batch_size", "int", 1, 128),
        Gene("l2_decay", "fixed", 0.01, 0.01),
        Gene("experience_size", "int", 3000, 10_000),
        Gene("start_learn_threshold", "fixed", 500, 500),
        Gene("gamma", "real", 0.8, 1.0),
        # upper bound: train_iterations
        Gene("learning_steps_total", "int", 10_000, 100_000),
        # upper bound: min(train_iterations // 2, learning_steps_total)
        Gene("learning_steps_burnin", "int", 1000, 50_000),
        Gene("epsilon_min", "real", 0.0, 1.0),
        Gene("epsilon_test_time", "real", 0.0, 1.0),
        Gene("number_of_layers", "int", 4, 7),
    ]


@dataclass(frozen=True)
class SearchSpace:
    genes: tuple[Gene, ...] = field(default_factory=lambda: tuple(_default_genes()))

    def __post_init__(self):
        names = [g.name for g in self.genes]
        if sorted(names) != sorted(HYPER_FIELDS):
            raise ValueError("search space must define exactly one gene per hyperparameter")
        ti = self.gene("train_iterations")
        if self.gene("learning_steps_total").lo > ti.lo:
            raise ValueError("learning_steps_total lower bound exceeds the smallest train_iterations")
        if self.gene("learning_steps_burnin").lo > ti.lo // 2:
            raise ValueError("learning_steps_burnin lower bound exceeds half the smallest train_iterations")
        if self.gene("learning_steps_burnin").lo > self.gene("learning_steps_total").lo:
            raise ValueError("learning_steps_burnin lower bound exceeds that of learning_steps_total")
        if self.gene("number_of_layers").lo < 2:
            raise ValueError("number_of_layers must be >= 2 (input and output)")

    def gene(self, name: str) -> Gene:
        for g in self.genes:
            if g.name == name:
                return g
        raise KeyError(name)

    @property
    def free_genes(self) -> list[Gene]:
        return [g for g in self.genes if g.free]

    def with_bounds(self, **bounds: tuple[float, float]) -> "SearchSpace":
        genes = []
        for g in self.genes:
            if g.name in bounds:
                lo, hi = bounds[g.name]
                if lo == hi:
                    kind = "fixed"
                elif g.kind == "fixed":
                    kind = "int" if g.name in _INT_FIELDS else "real"
                else:
                    kind = g.kind
                genes.append(replace(g, kind=kind, lo=lo, hi=hi))
            else:
                genes.append(g)
        unknown = set(bounds) - set(HYPER_FIELDS)
        if unknown:
            raise KeyError(f"unknown hyperparameters: {sorted(unknown)}")
        return SearchSpace(tuple(genes))

    def dependent_bounds(self, name: str, values: dict) -> tuple[float, float]:
        g = self.gene(name)
        ti = values["train_iterations"]
        if name == "learning_steps_total":
            return g.lo, min(g.hi, ti)
        if name == "learning_steps_burnin":
            return g.lo, min(g.hi, ti // 2, values["learning_steps_total"])
        return g.lo, g.hi

    def violations(self, lam: HyperConfig) -> list[str]:
        values = lam.as_dict()
        out = []
        for g in self.genes:
            lo, hi = self.dependent_bounds(g.name, values)
            v = values[g.name]
            if not lo <= v <= hi:
                out.append(f"{g.name}={v} outside [{lo}, {hi}]")
            if g.kind == "int" and v != int(v):
                out.append(f"{g.name}={v} is not an integer")
        return out

    def contains(self, lam: HyperConfig) -> bool:
        return not self.violations(lam)

    def normalized(self, lam: HyperConfig) -> dict[str, float]:
        """Free genes mapped to [0, 1] on their own scale."""
        out = {}
        values = lam.as_dict()
        for g in self.free_genes:
            v = values[g.name]
            if g.hi == g.lo:
                out[g.name] = 0.0
            elif g.scale == "log":
                out[g.name] = (math.log(v) - math.log(g.lo)) / (math.log(g.hi) - math.log(g.lo))
            else:
                out[g.name] = (v - g.lo) / (g.hi - g.lo)
        return out


def _draw(g: Gene, lo: float, hi: float, rng: np.random.Generator):
    if g.kind == "int":
        return int(rng.integers(int(lo), int(hi) + 1))
    if g.scale == "log":
        return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
    return float(rng.uniform(lo, hi))


def _fixed_value(g: Gene):
    return int(g.lo) if g.name in _INT_FIELDS else float(g.lo)


def _enforce(space: SearchSpace, values: dict) -> HyperConfig:
    for name in ("learning_steps_total", "learning_steps_burnin"):
        lo, hi = space.dependent_bounds(name, values)
        values[name] = int(min(max(values[name], lo), hi))
    return HyperConfig(**values)


def sample_config(space: SearchSpace, rng: np.random.Generator) -> HyperConfig:
    values: dict = {}
    # genes are drawn in declaration order so train_iterations precedes its dependants
    for g in space.genes:
        if not g.free:
            values[g.name] = _fixed_value(g)
            continue
        lo, hi = (g.lo, g.hi)
        if g.name in ("learning_steps_total", "learning_steps_burnin"):
            lo, hi = space.dependent_bounds(g.name, values)
        values[g.name] = _draw(g, lo, hi, rng)
    return HyperConfig(**values)


def _check_member(space: SearchSpace, *lams: HyperConfig) -> None:
    for lam in lams:
        bad = space.violations(lam)
        if bad:
            raise ValueError(f"configuration not in search space: {bad}")


def crossover(a: HyperConfig, b: HyperConfig, rng: np.random.Generator, p_cross: float, space: SearchSpace | None = None) -> HyperConfig:
    """Uniform crossover: each free gene comes from ``b`` with probability ``p_cross``."""
    space = space or SearchSpace()
    _check_member(space, a, b)
    va, vb = a.as_dict(), b.as_dict()
    free = space.free_genes
    take_b = rng.random(len(free)) < p_cross
    for g, flag in zip(free, take_b):
        if flag:
            va[g.name] = vb[g.name]
    return _enforce(space, va)


def mutate(lam: HyperConfig, rng: np.random.Generator, p_mut: float, space: SearchSpace | None = None) -> HyperConfig:
    """Resample each free gene with probability ``p_mut``.

    A full fresh candidate is drawn first and then merged gene by gene, so the
    RNG consumption does not depend on which genes end up mutating.
    """
    space = space or SearchSpace()
    _check_member(space, lam)
    fresh = sample_config(space, rng).as_dict()
    values = lam.as_dict()
    free = space.free_genes
    hit = rng.random(len(free)) < p_mut
    for g, flag in zip(free, hit):
        if flag:
            values[g.name] = fresh[g.name]
    return _enforce(space, values)


# --------------------------------------------------------------------------
# search drivers

Scored = tuple[HyperConfig, float]
FitnessFn = Callable[[HyperConfig], float]


def _evaluate(lams: Sequence[HyperConfig], fitness_fn, map_fn=None) -> list[float]:
    if hasattr(fitness_fn, "evaluate_many"):
        return list(fitness_fn.evaluate_many(lams))
    mapper = map_fn or map
    return [float(f) for f in mapper(fitness_fn, lams)]


def rank(scored: Iterable[Scored]) -> list[Scored]:
    """Sort by descending fitness; ties keep their original order."""
    return sorted(scored, key=lambda item: -item[1])


def random_search(space: SearchSpace, fitness_fn: FitnessFn, k: int = 15, seed: int = 0, map_fn=None) -> list[Scored]:
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    lams = [sample_config(space, rng) for _ in range(k)]
    return rank(zip(lams, _evaluate(lams, fitness_fn, map_fn)))


def select_top(ranked: Sequence[Scored], n: int = 5) -> list[Scored]:
    if n > len(ranked):
        raise ValueError(f"cannot select {n} of {len(ranked)} candidates")
    return list(rank(ranked))[:n]


@dataclass(frozen=True)
class EAConfig:
    mu: int = 5
    p_cross: float = 0.3
    p_mut: float = 0.1
    generations: int = 6
    elitist: bool = True

    def __post_init__(self):
        if self.mu < 2:
            raise ValueError("population size must be >= 2")
        if not (0 <= self.p_cross <= 1 and 0 <= self.p_mut <= 1):
            raise ValueError("rates must lie in [0, 1]")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")


@dataclass
class Generation:
    iteration: int
    population: list[Scored]

    @property
    def fitness(self) -> list[float]:
        return [f for _, f in self.population]

    @property
    def stats(self) -> tuple[float, float, float]:
        f = self.fitness
        return min(f), float(np.mean(f)), max(f)


@dataclass
class SearchHistory:
    generations: list[Generation] = field(default_factory=list)

    def add(self, iteration: int, population: Sequence[Scored]) -> None:
        self.generations.append(Generation(iteration, list(population)))

    @property
    def best(self) -> Scored:
        return rank(p for g in self.generations for p in g.population)[0]


class EvolutionAborted(RuntimeError):
    def __init__(self, message: str, history: SearchHistory):
        super().__init__(message)
        self.history = history


def _roulette(fitness: np.ndarray, rng: np.random.Generator) -> int:
    weights = np.clip(fitness, 0.0, None)
    total = weights.sum()
    if total <= 0:
        return int(rng.integers(len(fitness)))
    return int(rng.choice(len(fitness), p=weights / total))


def evolve(
    init_pop: Sequence[Scored],
    ea: EAConfig,
    fitness_fn: FitnessFn,
    seed: int,
    space: SearchSpace | None = None,
    first_iteration: int = 1,
    map_fn=None,
) -> SearchHistory:
    """Elitist EA: the best parent survives unchanged, the rest are offspring.

    The returned history starts with ``init_pop`` labelled ``first_iteration``
    and holds one entry per subsequent generation.
    """
    space = space or SearchSpace()
    if len(init_pop) != ea.mu:
        raise ValueError(f"initial population has {len(init_pop)} members, expected {ea.mu}")
    rng = np.random.default_rng(seed)
    history = SearchHistory()
    pop = list(init_pop)
    history.add(first_iteration, pop)
    best_so_far = max(f for _, f in pop)
    for gen in range(1, ea.generations + 1):
        fit = np.array([f for _, f in pop], dtype=float)
        elite = pop[int(np.argmax(fit))]
        children = []
        for _ in range(ea.mu - 1 if ea.elitist else ea.mu):
            a = pop[_roulette(fit, rng)][0]
            b = pop[_roulette(fit, rng)][0]
            child = mutate(crossover(a, b, rng, ea.p_cross, space), rng, ea.p_mut, space)
            children.append(child)
        try:
            scores = _evaluate(children, fitness_fn, map_fn)
        except Exception as exc:
            raise EvolutionAborted(f"fitness evaluation failed in generation {gen}: {exc}", history) from exc
        pop = ([elite] if ea.elitist else []) + list(zip(children, scores))
        history.add(first_iteration + gen, pop)
        top = max(f for _, f in pop)
        if ea.elitist and top < best_so_far:
            raise AssertionError(f"elitism violated in generation {gen}: {top} < {best_so_far}")
        best_so_far = max(best_so_far, top)
    return history


# --------------------------------------------------------------------------
# fitness


def stub_fitness(space: SearchSpace | None = None, noise: float = 0.0, seed: int = 0) -> FitnessFn:
    """Cheap deterministic stand-in: 80 mph times the mean normalized free gene.

    With ``noise > 0`` a seeded Gaussian term makes it stochastic.
    """
    space = space or SearchSpace()
    rng = np.random.default_rng(seed)

    def fitness(lam: HyperConfig) -> float:
        norm = space.normalized(lam)
        value = 80.0 * float(np.mean(list(norm.values())))
        if noise:
            value += float(rng.normal(0.0, noise))
        return float(min(max(value, 0.0), 80.0))

    return fitness


def _train_and_score(args) -> tuple[float, bool]:
    from .strategies import evaluate_policy, deploy_transfer, train_core

    lam, seed, sim_cfg, folds, eval_ticks, eval_seed = args
    try:
        core = train_core(lam, seed, sim_cfg).net
    except TrainingDivergence:
        return 0.0, True
    policy = deploy_transfer(core, 1, lam.obs_spec(), lam.epsilon_test_time)
    report = evaluate_policy(policy, 1, folds=folds, eval_ticks=eval_ticks, base_seed=eval_seed, sim_cfg=sim_cfg)
    return report.mean, False


class FitnessEvaluator:
    """Train a single-agent core network and score its mean evaluation speed.

    Results are cached by (configuration hash, seed). Diverged runs score 0 mph
    and are listed in ``flagged``.
    """

    def __init__(self, sim_cfg, seed: int, folds: int = 5, eval_ticks: int = 10_000, eval_seed: int = 0, jobs: int = 1):
        self.sim_cfg = sim_cfg
        self.seed = seed
        self.folds = folds
        self.eval_ticks = eval_ticks
        self.eval_seed = eval_seed
        self.jobs = jobs
        self.cache: dict[tuple[str, int], float] = {}
        self.flagged: list[HyperConfig] = []
        self.calls = 0

    def __call__(self, lam: HyperConfig) -> float:
        return self.evaluate_many([lam])[0]

    def evaluate_many(self, lams: Sequence[HyperConfig]) -> list[float]:
        todo = []
        for lam in lams:
            key = (lam.key(), self.seed)
            if key not in self.cache and all(key != (t.key(), self.seed) for t in todo):
                todo.append(lam)
        jobs = [(lam, self.seed, self.sim_cfg, self.folds, self.eval_ticks, self.eval_seed) for lam in todo]
        if self.jobs > 1 and len(jobs) > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(self.jobs) as pool:
                results = list(pool.map(_train_and_score, jobs))
        else:
            results = [_train_and_score(j) for j in jobs]
        for lam, (score, diverged) in zip(todo, results):
            self.calls += 1
            self.cache[(lam.key(), self.seed)] = score
            if diverged:
                log.warning("training diverged for %s; fitness set to 0", lam)
                self.flagged.append(lam)
        return [self.cache[(lam.key(), self.seed)] for lam in lams]


def fitness_of(lam: HyperConfig, seed: int, sim_cfg=None, folds: int = 5, eval_ticks: int = 10_000, eval_seed: int = 0) -> float:
    from .sim import SimConfig

    return _train_and_score((lam, seed, sim_cfg or SimConfig(), folds, eval_ticks, eval_seed))[0]
