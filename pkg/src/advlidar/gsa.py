"""Black-box perturbation search: binary-coded genetic algorithm hybridized
with simulated-annealing refinement.

A candidate solution is a set of ``n0`` points that must each stay within
``shell_distance`` meters of the target cloud. Every coordinate travels in
the chromosome as the 32 bits of its IEEE-754 single-precision pattern
(big-endian bit order), so crossover and mutation act on raw bits; decoded
points that come back non-finite or outside the shell are repaired before
any evaluation. Evaluation is scan-in-the-loop: the candidate points become
a union-of-icospheres mesh, the simulated scanner samples it, the returns
are merged into the scene and the oracle re-detects.

Fitness branches on the oracle verdict (S is the matched score, d1 the mean
nearest-neighbor distance from candidate points into the target, d2 their
mean pairwise spread):

    still recognized:   f = 1 - S
    hidden:             f = (1 - S) + alpha1 / (1 + d1) + beta1 / (1 + d2)
    misclassified:      f =      S  + alpha2 / (1 + d1) + beta2 / (1 + d2)

Successful individuals (hidden or misclassified) always outrank recognized
ones, whatever the raw fitness, and the elitist update plus that absorbing
rank mean the per-generation best never regresses.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import BudgetExhaustedError, ConfigError, ProtocolError, TransportError
from .oracle import OracleVerdict, VerdictCase, attack_success, classify_verdict
from .pointcloud import PointCloud, Scene, merge
from .scanner import ScanConfig, build_perturbation_mesh, default_scan_config, simulate_scan

BITS_PER_COORD = 32
COORDS_PER_POINT = 3
BITS_PER_POINT = BITS_PER_COORD * COORDS_PER_POINT  # 96


# -- configuration ---------------------------------------------------------------

@dataclass
class AttackConfig:
    """Attack hyperparameters. Defaults follow the published operating point.

    ``sigma`` is the population-init noise std-dev in meters (variance 0.01),
    ``sa_sigma`` the smaller annealing proposal noise. ``anneal_steps`` is the
    total annealing budget, spread evenly across generations; the temperature
    persists across generations and cools geometrically by ``lam`` per step
    until ``temp_min``.
    """

    population: int = 20
    sigma: float = 0.1
    generations: int = 1000
    k_c: float = 1.0
    k_m: float = 0.5
    temp0: float = 300.0
    anneal_steps: int = 500
    lam: float = 0.98
    temp_min: float = 1.4
    n0: int = 10
    shell_distance: float = 0.2
    alpha1: float = 0.5
    beta1: float = 0.5
    alpha2: float = 0.5
    beta2: float = 0.5
    seed: int = 0
    eval_budget: int = 1_000_000
    # operational knobs beyond the published table
    sa_sigma: float = 0.01
    elite_count: int = 1
    patience: int = 5
    mesh_radius: float = 0.09
    scan: ScanConfig | None = None

    def __post_init__(self):
        if self.population < 2:
            raise ConfigError(f"population must be >= 2: {self.population}")
        if self.generations < 0:
            raise ConfigError(f"generations must be >= 0: {self.generations}")
        if self.n0 < 1:
            raise ConfigError(f"n0 must be >= 1: {self.n0}")
        if not 0.0 < self.k_m < self.k_c <= 1.0:
            raise ConfigError(
                f"need 0 < k_m < k_c <= 1, got k_m={self.k_m}, k_c={self.k_c}"
            )
        if not 0.0 < self.lam < 1.0:
            raise ConfigError(f"lam must be in (0, 1): {self.lam}")
        if not 0.0 < self.temp_min < self.temp0:
            raise ConfigError(
                f"need 0 < temp_min < temp0, got {self.temp_min}, {self.temp0}"
            )
        if self.sigma < 0 or self.sa_sigma < 0:
            raise ConfigError("noise std-devs must be >= 0")
        if self.shell_distance <= 0:
            raise ConfigError(f"shell_distance must be > 0: {self.shell_distance}")
        if self.anneal_steps < 0:
            raise ConfigError(f"anneal_steps must be >= 0: {self.anneal_steps}")
        if self.eval_budget < 1:
            raise ConfigError(f"eval_budget must be >= 1: {self.eval_budget}")
        if not 1 <= self.elite_count < self.population:
            raise ConfigError(
                f"elite_count must be in [1, population): {self.elite_count}"
            )
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1: {self.patience}")
        if self.mesh_radius <= 0:
            raise ConfigError(f"mesh_radius must be > 0: {self.mesh_radius}")
        if not (0 <= self.seed < 2 ** 64):
            raise ConfigError("seed must fit in 64 bits")

    def scan_config(self) -> ScanConfig:
        return self.scan if self.scan is not None else default_scan_config()

    def to_dict(self) -> dict:
        d = {
            "population": self.population,
            "sigma": self.sigma,
            "generations": self.generations,
            "k_c": self.k_c,
            "k_m": self.k_m,
            "temp0": self.temp0,
            "anneal_steps": self.anneal_steps,
            "lambda": self.lam,
            "temp_min": self.temp_min,
            "n0": self.n0,
            "shell_distance": self.shell_distance,
            "alpha1": self.alpha1,
            "beta1": self.beta1,
            "alpha2": self.alpha2,
            "beta2": self.beta2,
            "seed": self.seed,
            "eval_budget": self.eval_budget,
            "sa_sigma": self.sa_sigma,
            "elite_count": self.elite_count,
            "patience": self.patience,
            "mesh_radius": self.mesh_radius,
        }
        if self.scan is not None:
            d["scan"] = self.scan.to_dict()
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "AttackConfig":
        doc = dict(doc)
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        scan = doc.pop("scan", None)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        if scan is not None:
            try:
                cfg.scan = ScanConfig.from_dict(scan)
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"bad scan section: {exc}") from exc
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "AttackConfig":
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if path.suffix.lower() == ".toml":
            try:
                import tomllib  # py311+
            except ModuleNotFoundError:
                import tomli as tomllib
            try:
                doc = tomllib.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, tomllib.TOMLDecodeError) as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        else:
            try:
                doc = json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config root must be a table/object")
        return cls.from_dict(doc)


# -- chromosome ---------------------------------------------------------------------

@dataclass(frozen=True)
class Chromosome:
    """Bit string stored as a uint8 array of 0/1, 96 bits per point."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.ascontiguousarray(np.asarray(self.bits, dtype=np.uint8))
        if bits.ndim != 1 or bits.size % BITS_PER_POINT:
            raise ValueError(
                f"bit length must be a positive multiple of {BITS_PER_POINT}: {bits.shape}"
            )
        if ((bits != 0) & (bits != 1)).any():
            raise ValueError("bits must be 0/1")
        object.__setattr__(self, "bits", bits)

    @property
    def n_points(self) -> int:
        return self.bits.size // BITS_PER_POINT

    def to_hex(self) -> str:
        return bytes(np.packbits(self.bits)).hex()

    @classmethod
    def from_hex(cls, text: str) -> "Chromosome":
        raw = bytes.fromhex(text)
        return cls(np.unpackbits(np.frombuffer(raw, dtype=np.uint8)))

    def __eq__(self, other) -> bool:
        return isinstance(other, Chromosome) and np.array_equal(self.bits, other.bits)


def encode(points) -> Chromosome:
    """Points -> big-endian float32 bit pattern per coordinate.

    Accepts a PointCloud or an (n, 3) array; all coordinates must be finite.
    Coordinates are cast to float32 first, so encode(decode(c)) == c.
    """
    xyz = points.xyz if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    xyz = xyz.reshape(-1, 3)
    if not len(xyz):
        raise ValueError("cannot encode zero points")
    if not np.isfinite(xyz).all():
        raise ValueError("non-finite coordinate")
    packed = np.ascontiguousarray(xyz.astype(">f4")).view(np.uint8)
    return Chromosome(np.unpackbits(packed.reshape(-1)))


def decode(chromosome: Chromosome, n0: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Chromosome -> ((n0, 3) float64 coordinates, per-point repair flags).

    NaN/Inf bit patterns decode to their float values and raise the matching
    repair flag instead of erroring; `repair` resolves them.
    """
    if n0 is not None and chromosome.n_points != n0:
        raise ValueError(f"chromosome holds {chromosome.n_points} points, expected {n0}")
    raw = np.packbits(chromosome.bits).tobytes()
    with np.errstate(invalid="ignore"):  # NaN patterns cast without complaint
        coords = np.frombuffer(raw, dtype=">f4").astype(np.float64).reshape(-1, 3)
    needs_repair = ~np.isfinite(coords).all(axis=1)
    return coords, needs_repair


# -- feasibility repair ----------------------------------------------------------------

def repair(
    points: np.ndarray,
    target: PointCloud,
    shell: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Project candidate points into the feasible shell around the target.

    Non-finite points are resampled near a random target point. Points
    farther than `shell` from their nearest target point are pulled radially
    along the ray from that nearest point until the constraint holds; the
    trailing loop absorbs last-ulp rounding so the output satisfies the shell
    distance exactly in float64.
    """
    pts = np.array(points, dtype=np.float64).reshape(-1, 3)
    if not len(target):
        raise ValueError("target cloud is empty")
    bad = ~np.isfinite(pts).all(axis=1)
    # coordinates whose squared distance would overflow float64 break the
    # kd-tree query (it returns its missing-neighbor sentinel); they are as
    # good as corrupt, so resample them the same way
    bad |= (np.abs(pts) > 1e150).any(axis=1)
    for i in np.flatnonzero(bad):
        anchor = target.xyz[int(rng.integers(len(target)))]
        pts[i] = anchor + rng.normal(0.0, shell / 4.0, 3)

    tree = target.kdtree()
    pull = shell  # radius to project onto; shrinks only if rounding overshoots
    for _ in range(8):
        dists, idx = tree.query(pts)
        over = dists > shell
        if not over.any():
            return pts
        anchors = target.xyz[idx[over]]
        offsets = pts[over] - anchors
        norms = np.linalg.norm(offsets, axis=1, keepdims=True)
        # zero-norm can't be "over", norms > shell > 0 here
        pts[over] = anchors + offsets * (pull / norms)
        pull = pull * (1.0 - 1e-12)
    raise AssertionError("shell projection failed to converge")


@dataclass
class Individual:
    """One population member: points, their bit encoding, cached evaluation."""

    points: np.ndarray
    chromosome: Chromosome
    fitness: float | None = None
    verdict: OracleVerdict | None = None

    @property
    def is_success(self) -> bool:
        return self.verdict is not None and attack_success(self.verdict)

    def rank_key(self) -> tuple[int, float]:
        """Sort key: attack success absorbs, then raw fitness."""
        if self.fitness is None:
            raise ValueError("individual not evaluated yet")
        return (1 if self.is_success else 0, self.fitness)

    def as_cloud(self, intensity: float = 1.0) -> PointCloud:
        return PointCloud.from_xyz(self.points, intensity=intensity)


def make_individual(
    raw_points: np.ndarray,
    target: PointCloud,
    shell: float,
    rng: np.random.Generator,
) -> Individual:
    """Canonical constructor: repair, quantize through the encoding, re-check.

    The stored points are always exactly decode(chromosome), and the shell
    constraint holds on the quantized float32 values, not just the repair
    output, so every emitted individual is feasible bit-for-bit.
    """
    pts = repair(raw_points, target, shell, rng)
    # float32 rounding can push a repaired point back over the shell by up to
    # ~|coord| * 2^-23 per axis, so the re-repair margin has to grow past the
    # quantization error instead of staying at a fixed epsilon
    margin = shell * 1e-7
    for _ in range(10):
        chrom = encode(pts)
        quantized, flags = decode(chrom)
        if flags.any():  # float32 overflow from huge float64 values
            quantized[flags] = pts[flags]  # keep repaired values, re-repair below
            pts = repair(quantized, target, shell, rng)
            continue
        dists, _ = target.kdtree().query(quantized)
        if (dists <= shell).all():
            return Individual(points=quantized, chromosome=chrom)
        pts = repair(quantized, target, shell - margin, rng)
        margin = min(margin * 8.0, shell * 0.5)
    raise AssertionError("quantized repair failed to converge")


# -- evaluation ------------------------------------------------------------------------

@dataclass
class EvalBudget:
    """Counts oracle calls against a hard limit."""

    limit: int
    used: int = 0

    def charge(self) -> None:
        if self.used >= self.limit:
            raise BudgetExhaustedError(f"oracle budget of {self.limit} calls exhausted")
        self.used += 1

    @property
    def remaining(self) -> int:
        return self.limit - self.used


def perturbation_distances(points: np.ndarray, target: PointCloud) -> tuple[float, float]:
    """(d1, d2): mean nearest-neighbor distance into the target, and mean
    pairwise distance among the candidate points (0 for a single point)."""
    dists, _ = target.kdtree().query(points)
    d1 = float(np.mean(dists))
    n = len(points)
    if n < 2:
        return d1, 0.0
    diff = points[:, None, :] - points[None, :, :]
    iu = np.triu_indices(n, k=1)
    d2 = float(np.linalg.norm(diff[iu[0], iu[1]], axis=1).mean())
    return d1, d2


def fitness_from_verdict(
    verdict: OracleVerdict, d1: float, d2: float, config: AttackConfig
) -> float:
    """The three-branch objective; S comes from the verdict."""
    s = verdict.score_s
    if verdict.case is VerdictCase.RECOGNIZED_CORRECT:
        return 1.0 - s
    if verdict.case is VerdictCase.HIDDEN:
        return (1.0 - s) + config.alpha1 / (1.0 + d1) + config.beta1 / (1.0 + d2)
    return s + config.alpha2 / (1.0 + d1) + config.beta2 / (1.0 + d2)


def scan_from_points(points: np.ndarray, config: AttackConfig) -> PointCloud:
    """Sphere-mesh the perturbation points and run them through the scanner."""
    mesh = build_perturbation_mesh(points, config.mesh_radius)
    return simulate_scan(mesh, config.scan_config())


def scan_and_classify(
    points: np.ndarray,
    scene: Scene,
    oracle,
    info,
    config: AttackConfig,
) -> tuple[OracleVerdict, PointCloud]:
    """Shared adversarial-example pipeline: mesh the points, scan the mesh,
    merge returns into the scene, re-detect, classify.

    Returns the verdict and the merged cloud (the detector's actual input).
    """
    scanned = scan_from_points(points, config)
    merged = merge(scene.background, scene.target, scanned)
    detections = oracle.detect(merged)
    return classify_verdict(detections, scene, info), merged


def evaluate(
    ind: Individual,
    scene: Scene,
    oracle,
    info,
    config: AttackConfig,
    budget: EvalBudget | None = None,
) -> float:
    """Scan-in-the-loop fitness; caches fitness and verdict on the individual.

    Raises BudgetExhaustedError when a budget is supplied and already spent.
    """
    if budget is not None:
        budget.charge()
    verdict, _ = scan_and_classify(ind.points, scene, oracle, info, config)
    d1, d2 = perturbation_distances(ind.points, scene.target)
    ind.fitness = fitness_from_verdict(verdict, d1, d2, config)
    ind.verdict = verdict
    return ind.fitness


# -- genetic operators ---------------------------------------------------------------

def init_population(
    scene: Scene,
    config: AttackConfig,
    rng: np.random.Generator,
    oracle=None,
    info=None,
    budget: EvalBudget | None = None,
) -> list[Individual]:
    """Seed the population on the target surface plus Gaussian noise.

    Base points are drawn uniformly from the target cloud; with sigma = 0
    every candidate point sits exactly on a target point. When an oracle is
    supplied each individual is evaluated immediately; if the budget runs
    out partway, the evaluated prefix is returned (possibly shorter than
    config.population) rather than losing the work.
    """
    population = []
    for _ in range(config.population):
        base = scene.target.xyz[rng.integers(len(scene.target), size=config.n0)]
        raw = base + rng.normal(0.0, config.sigma, size=(config.n0, 3))
        ind = make_individual(raw, scene.target, config.shell_distance, rng)
        if oracle is not None:
            try:
                evaluate(ind, scene, oracle, info, config, budget)
            except BudgetExhaustedError:
                return population
        population.append(ind)
    return population


FITNESS_FLOOR = 1e-9


def roulette_select(
    population: list[Individual],
    rng: np.random.Generator,
    floor: float | None = FITNESS_FLOOR,
) -> Individual:
    """Fitness-proportional selection over cumulative probability intervals."""
    fit = np.array([ind.fitness for ind in population], dtype=np.float64)
    if floor is not None:
        fit = np.maximum(fit, floor)
    total = fit.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise ValueError(f"total fitness must be positive and finite: {total}")
    cum = np.cumsum(fit / total)
    idx = int(np.searchsorted(cum, rng.random(), side="right"))
    return population[min(idx, len(population) - 1)]


def adaptive_pc(f_prime: float, f_max: float, f_avg: float, k_c: float) -> float:
    """Crossover probability: k_c below the mean, linearly annealed toward 0
    at the max. Degenerate populations (f_max == f_avg) use k_c."""
    if f_max < f_avg:
        raise ValueError(f"f_max {f_max} < f_avg {f_avg}")
    if f_max == f_avg or f_prime < f_avg:
        return k_c
    return k_c * (f_max - f_prime) / (f_max - f_avg)


def adaptive_pm(f: float, f_max: float, f_avg: float, k_m: float) -> float:
    """Mutation probability, same shape as adaptive_pc with k_m."""
    if f_max < f_avg:
        raise ValueError(f"f_max {f_max} < f_avg {f_avg}")
    if f_max == f_avg or f < f_avg:
        return k_m
    return k_m * (f_max - f) / (f_max - f_avg)


def crossover(
    a: Individual,
    b: Individual,
    pc: float,
    rng: np.random.Generator,
    target: PointCloud,
    shell: float,
) -> tuple[Individual, Individual]:
    """Single-point crossover at a uniform bit index in [1, L-1].

    With probability 1 - pc the parents are passed through unchanged
    (cached evaluations intact). Children are repaired and re-decoded.
    """
    if rng.random() >= pc:
        return a, b
    length = a.chromosome.bits.size
    cut = int(rng.integers(1, length))
    bits_a = a.chromosome.bits
    bits_b = b.chromosome.bits
    child_a = np.concatenate([bits_a[:cut], bits_b[cut:]])
    child_b = np.concatenate([bits_b[:cut], bits_a[cut:]])
    out = []
    for bits in (child_a, child_b):
        coords, flags = decode(Chromosome(bits))
        del flags  # make_individual repairs non-finite decodes itself
        out.append(make_individual(coords, target, shell, rng))
    return out[0], out[1]


def mutate(
    ind: Individual,
    pm: float,
    rng: np.random.Generator,
    target: PointCloud,
    shell: float,
) -> Individual:
    """Multipoint bit-flip: with probability pm, flip k ~ U{2..6} distinct bits."""
    if rng.random() >= pm:
        return ind
    length = ind.chromosome.bits.size
    k = int(rng.integers(2, 7))
    positions = rng.choice(length, size=min(k, length), replace=False)
    bits = ind.chromosome.bits.copy()
    bits[positions] ^= 1
    coords, _ = decode(Chromosome(bits))
    return make_individual(coords, target, shell, rng)


def elite_update(
    parents: list[Individual], offspring: list[Individual], e: int = 1
) -> list[Individual]:
    """Next generation: top-e parents plus top-(n-e) offspring by rank.

    Ranking is (success, fitness) descending: a successful individual beats
    every recognized one regardless of raw fitness. Ties keep earlier index.
    """
    n = len(parents)
    if not 1 <= e < n:
        raise ValueError(f"elite count must be in [1, {n}): {e}")
    if len(offspring) < n - e:
        raise ValueError(f"need at least {n - e} offspring, got {len(offspring)}")
    best_parents = sorted(parents, key=Individual.rank_key, reverse=True)[:e]
    best_children = sorted(offspring, key=Individual.rank_key, reverse=True)[: n - e]
    return best_parents + best_children


# -- simulated annealing ----------------------------------------------------------------

@dataclass
class Temperature:
    """Geometric cooling schedule, tracked by step count.

    ``current`` is computed as temp0 * lam**step (not by repeated in-place
    multiplication) so the temperature after k steps is exactly that power.
    """

    temp0: float
    lam: float
    step: int = 0

    @property
    def current(self) -> float:
        return self.temp0 * self.lam ** self.step

    def advance(self) -> None:
        self.step += 1


def anneal(
    ind: Individual,
    temp: "Temperature | float",
    steps: int,
    sigma_sa: float,
    scene: Scene,
    oracle,
    config: AttackConfig,
    rng: np.random.Generator,
    budget: EvalBudget | None = None,
) -> tuple[Individual, float]:
    """Metropolis local search around one individual.

    Each step perturbs every coordinate with N(0, sigma_sa^2), repairs,
    evaluates, and accepts improvements always and regressions with
    probability exp(df / temp); the schedule cools geometrically once per
    step and the walk stops early at the temperature floor. `temp` may be a
    shared Temperature schedule (cooling persists for the caller) or a bare
    starting value. Budget exhaustion propagates to the caller.

    Returns (best accepted individual by rank, temperature after the walk).
    """
    schedule = temp if isinstance(temp, Temperature) else Temperature(float(temp), config.lam)
    if schedule.current <= 0.0:
        raise ValueError(f"temperature must be positive: {schedule.current}")
    info = oracle.info
    current = ind
    best = ind
    for _ in range(steps):
        if schedule.current <= config.temp_min:
            break
        proposal = current.points + rng.normal(0.0, sigma_sa, size=current.points.shape)
        cand = make_individual(proposal, scene.target, config.shell_distance, rng)
        evaluate(cand, scene, oracle, info, config, budget)
        df = cand.fitness - current.fitness
        if df >= 0.0 or rng.random() < math.exp(df / schedule.current):
            current = cand
            if current.rank_key() > best.rank_key():
                best = current
        schedule.advance()
    return best, schedule.current


# -- attack loop -----------------------------------------------------------------------

@dataclass
class AttackResult:
    """Outcome of one attack run; JSON form excludes wall time (see to_json_dict)."""

    best: Individual
    verdict: OracleVerdict
    success: bool
    trace_best: list[float]
    trace_mean: list[float]
    trace_case: list[str]
    oracle_calls: int
    generations_run: int
    seed: int
    wall_time_s: float
    budget_exhausted: bool = False

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "success": self.success,
            "verdict": self.verdict.to_dict(),
            "best": {
                "points": [[float(v) for v in row] for row in self.best.points],
                "fitness": self.best.fitness,
                "chromosome_hex": self.best.chromosome.to_hex(),
            },
            "trace": {
                "best_fitness": self.trace_best,
                "mean_fitness": self.trace_mean,
                "best_case": self.trace_case,
            },
            "oracle_calls": self.oracle_calls,
            "generations_run": self.generations_run,
            "budget_exhausted": self.budget_exhausted,
        }


def _best_of(population: list[Individual]) -> Individual:
    best = population[0]
    for ind in population[1:]:
        if ind.rank_key() > best.rank_key():
            best = ind
    return best


def _sa_steps_for_generation(gen: int, total_steps: int, generations: int) -> int:
    """Even split of the annealing budget across generations (Bresenham)."""
    return (gen * total_steps) // generations - ((gen - 1) * total_steps) // generations


def _assert_feasible(population: list[Individual], scene: Scene, shell: float) -> None:
    pts = np.concatenate([ind.points for ind in population])
    dists, _ = scene.target.kdtree().query(pts)
    if (dists > shell).any():
        raise AssertionError("shell constraint violated inside the population")


def run_attack(scene: Scene, oracle, config: AttackConfig) -> AttackResult:
    """Full hybrid search against one scene.

    Per generation: roulette-select parent pairs, adaptive single-point
    crossover, adaptive multipoint mutation, evaluate the fresh offspring,
    elitist update, then spend this generation's annealing steps on the
    population best. Stops early when the budget runs out (partial trace
    preserved) or when the temperature has hit its floor and the best verdict
    has been a success for `patience` consecutive generations.
    """
    rng = np.random.default_rng(config.seed)
    info = oracle.info
    budget = EvalBudget(config.eval_budget)
    t_start = time.perf_counter()

    trace_best: list[float] = []
    trace_mean: list[float] = []
    trace_case: list[str] = []
    exhausted = False
    best: Individual | None = None
    generations_run = 0

    def record(pop: list[Individual]) -> Individual:
        gen_best = _best_of(pop)
        trace_best.append(float(gen_best.fitness))
        trace_mean.append(float(np.mean([ind.fitness for ind in pop])))
        trace_case.append(gen_best.verdict.case.value)
        return gen_best

    def build_result() -> AttackResult | None:
        if best is None:
            return None
        return AttackResult(
            best=best,
            verdict=best.verdict,
            success=best.is_success,
            trace_best=trace_best,
            trace_mean=trace_mean,
            trace_case=trace_case,
            oracle_calls=budget.used,
            generations_run=generations_run,
            seed=config.seed,
            wall_time_s=time.perf_counter() - t_start,
            budget_exhausted=exhausted,
        )

    try:
        population = init_population(scene, config, rng, oracle, info, budget)
        if len(population) < config.population:
            exhausted = True  # init_population stops short only on budget exhaustion
        if not population:
            raise ConfigError(
                f"eval budget {config.eval_budget} cannot evaluate a single individual"
            )

        best = record(population)
        schedule = Temperature(config.temp0, config.lam)
        success_streak = 1 if best.is_success else 0

        for gen in range(1, config.generations + 1):
            if exhausted:
                break
            fits = np.maximum(
                np.array([ind.fitness for ind in population]), FITNESS_FLOOR
            )
            f_max = float(fits.max())
            # the true mean never exceeds the max, but np.mean can round a
            # uniform population a couple ulp past it
            f_avg = min(float(fits.mean()), f_max)

            offspring: list[Individual] = []
            try:
                while len(offspring) < config.population:
                    pa = roulette_select(population, rng)
                    pb = roulette_select(population, rng)
                    f_pair = max(pa.fitness, pb.fitness, FITNESS_FLOOR)
                    pc = adaptive_pc(min(f_pair, f_max), f_max, f_avg, config.k_c)
                    ca, cb = crossover(
                        pa, pb, pc, rng, scene.target, config.shell_distance
                    )
                    pm = adaptive_pm(min(f_pair, f_max), f_max, f_avg, config.k_m)
                    for child in (ca, cb):
                        if len(offspring) >= config.population:
                            break
                        child = mutate(child, pm, rng, scene.target, config.shell_distance)
                        offspring.append(child)
                for child in offspring:
                    if child.fitness is None:
                        evaluate(child, scene, oracle, info, config, budget)
            except BudgetExhaustedError:
                exhausted = True
                break  # generation not applied; population/trace stay consistent

            population = elite_update(population, offspring, config.elite_count)

            sa_steps = _sa_steps_for_generation(
                gen, config.anneal_steps, config.generations
            )
            if sa_steps and schedule.current > config.temp_min:
                best_idx = max(
                    range(len(population)), key=lambda i: population[i].rank_key()
                )
                try:
                    annealed, _ = anneal(
                        population[best_idx], schedule, sa_steps, config.sa_sigma,
                        scene, oracle, config, rng, budget,
                    )
                    if annealed.rank_key() > population[best_idx].rank_key():
                        population[best_idx] = annealed
                except BudgetExhaustedError:
                    exhausted = True

            generations_run = gen
            _assert_feasible(population, scene, config.shell_distance)
            gen_best = record(population)
            if gen_best.rank_key() > best.rank_key():
                best = gen_best

            success_streak = success_streak + 1 if gen_best.is_success else 0
            if exhausted:
                break
            if schedule.current <= config.temp_min and success_streak >= config.patience:
                break
    except (TransportError, ProtocolError) as exc:
        # oracle failure aborts the attack; whatever trace exists rides along
        exc.partial_result = build_result()
        raise

    return build_result()


def load_result_points(path: str | Path) -> tuple[np.ndarray, dict]:
    """Read the best perturbation points back out of a result JSON file."""
    doc = json.loads(Path(path).read_text())
    pts = np.asarray(doc["best"]["points"], dtype=np.float64).reshape(-1, 3)
    return pts, doc
