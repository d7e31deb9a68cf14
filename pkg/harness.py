"""

Command-line experiment driver. Runs K seeded replications of an estimator for one (alpha, gamma) cell
or a grid of cells, aggregates them into efficiency metrics and renders CSV or a plain table.

    python harness.py estimate --method elm-a --alpha 0.2 --gamma 1e4 --d 10 --n-per-density 10000 --reps 30
    python harness.py sweep --method ak --alphas 0.2 0.9 --gammas 10 30 100 --reps 10 --format table
    python harness.py lower-bound --alpha 0.9 --gamma 30 --d 10

RE columns follow two conventions, labelled in `flags`: `re:within-run` is the sample-variance estimate
of a single run and `re:between-runs` is sd / (mean * sqrt(K)) over K runs. rtvp is always (K * per-run seconds) * rv,
and cpu_seconds is the mean wall time of one run.
"""

import argparse
import io
import logging
import math
import sys

import numpy as np
import pandas as pd
import yaml

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

from distributions import RandomStream
from elmCore import RE_UNAVAILABLE, SchemeAOptions, nominal_run, scheme_a_run
from errors import ConfigError, ElmError
from estimators import (
    WITHIN_RUN,
    EstimateReport,
    ak_estimate,
    cmc_estimate,
    efficiency_report,
    make_report,
    mcis_estimate,
    timed,
)
from lowerBound import SchemeBOptions, ce_maximize_bound, scheme_b_run
from samplers import ChainOptions, ProblemSpec, build_marginal_table, gibbs_fs

logger = logging.getLogger(__name__)

METHODS: Tuple[str, ...] = ("cmc", "ak", "mcis", "elm-a", "elm-a3", "elm-b", "elm-2", "lower-bound", "compare")
COMPARED: Tuple[str, ...] = ("elm-a", "mcis", "ak")
CSV_HEADER: Tuple[str, ...] = (
    "method", "alpha", "gamma", "d", "n", "reps", "ell_hat", "log10_ell", "re", "rtvp", "cpu_seconds", "flags",
)
FLAG_SEPARATOR: str = ";"

# number of densities each ELM method pools, used to validate per-density budgets
_DENSITIES: Dict[str, int] = {"elm-a": 4, "elm-a3": 3, "elm-b": 2, "elm-2": 2}
_LEVELS: Dict[int, int] = {0: logging.DEBUG, 1: logging.INFO, 2: logging.WARNING}

Budget = Union[int, List[int]]


@dataclass
class ExperimentConfig:
    """
    **Description**
    Everything one experiment needs. Budgets are per density: a single int applies to every density of an
    ELM method and is the sample size of cmc / ak / mcis; a list gives one budget per density.

    **Properties**
    - `method`: str, one of `METHODS`.
    - `alpha`, `gamma`, `d`: the problem.
    - `nPerDensity`: int or list of ints.
    - `reps`: int, independent replications K.
    - `seed`: int, root seed.
    - `subsample`: float, share of the zero-variance chain used for the marginal table.
    - `burnIn`, `thin`: Gibbs chain settings.
    - `out`: Optional[str], output path (stdout when None).
    - `format`: str, `csv` or `table`.
    - `solver`: str, `ipm` or `jacobi` for Scheme A.
    - `drawReference`: bool, real reference draws for Scheme B.
    - `budgetRatio`: float, Scheme-B n1 / n2 for a single budget.
    - `workers`: int, process pool size for replications.
    - `gammas`, `alphas`: Optional grids for `sweep`.
    - `verbosity`: int, 0, 1 or 2, larger for simpler output.

    **Methods**
    - `validate`: Raise ConfigError on the first invalid setting.
    - `spec`: The ProblemSpec of this cell.
    - `chain`: The ChainOptions of this config.
    """

    method: str = "cmc"
    alpha: float = 0.5
    gamma: float = 10.0
    d: int = 10
    nPerDensity: Budget = 10_000
    reps: int = 1
    seed: int = 0
    subsample: float = 0.5
    burnIn: int = 0
    thin: int = 1
    out: Optional[str] = None
    format: str = "csv"
    solver: str = "ipm"
    drawReference: bool = False
    budgetRatio: float = 1.0
    workers: int = 1
    gammas: Optional[List[float]] = None
    alphas: Optional[List[float]] = None
    verbosity: int = 1

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHODS:
            raise ConfigError(f"unknown method '{self.method}'; choose one of {', '.join(METHODS)}")
        if self.reps < 1:
            raise ConfigError(f"--reps must be >= 1, got {self.reps}")
        if self.workers < 1:
            raise ConfigError(f"--workers must be >= 1, got {self.workers}")
        if self.seed < 0:
            raise ConfigError(f"--seed must be >= 0, got {self.seed}")
        if int(self.d) != self.d or self.d < 1:
            raise ConfigError(f"--d must be a positive integer, got {self.d}")
        if not (self.alpha > 0) or not math.isfinite(self.alpha):
            raise ConfigError(f"--alpha must be positive, got {self.alpha}")
        if not (self.gamma >= 0) or not math.isfinite(self.gamma):
            raise ConfigError(f"--gamma must be finite and >= 0, got {self.gamma}")
        if self.method in ("elm-a", "elm-a3", "compare") and self.d < 2:
            raise ConfigError(f"method {self.method} needs --d >= 2 (the residual density is empty at d = 1)")
        if self.method in ("elm-b", "lower-bound") and self.alpha > 1:
            raise ConfigError(f"method {self.method} needs --alpha <= 1 (the tangent-plane bound needs a concave map)")
        budgets = self.budgets()
        if any(b < 1 for b in budgets):
            raise ConfigError(f"--n-per-density values must be >= 1, got {budgets}")
        expected = _DENSITIES.get(self.method, 1)
        if len(budgets) not in (1, expected):
            raise ConfigError(f"method {self.method} takes 1 or {expected} --n-per-density values, got {len(budgets)}")
        if not (0.0 < self.subsample <= 1.0):
            raise ConfigError(f"--subsample must lie in (0, 1], got {self.subsample}")
        if self.burnIn < 0 or self.thin < 1:
            raise ConfigError(f"need --burn-in >= 0 and --thin >= 1, got ({self.burnIn}, {self.thin})")
        if self.format not in ("csv", "table"):
            raise ConfigError(f"--format must be csv or table, got '{self.format}'")
        if self.solver not in ("ipm", "jacobi"):
            raise ConfigError(f"--solver must be ipm or jacobi, got '{self.solver}'")
        if not self.budgetRatio > 0:
            raise ConfigError(f"--budget-ratio must be positive, got {self.budgetRatio}")
        if self.verbosity not in _LEVELS:
            raise ConfigError(f"--verbosity must be 0, 1 or 2, got {self.verbosity}")
        return self

    def budgets(self) -> List[int]:
        if isinstance(self.nPerDensity, (list, tuple)):
            return [int(v) for v in self.nPerDensity]
        return [int(self.nPerDensity)]

    def budget(self) -> Budget:
        budgets = self.budgets()
        return budgets[0] if len(budgets) == 1 else budgets

    def spec(self) -> ProblemSpec:
        return ProblemSpec(int(self.d), float(self.alpha), float(self.gamma))

    def chain(self) -> ChainOptions:
        return ChainOptions(burnIn=int(self.burnIn), thin=int(self.thin))


@dataclass(frozen=True)
class ResultRow:
    """One rendered line: an aggregated estimate for (method, alpha, gamma)."""

    method: str
    alpha: float
    gamma: float
    d: int
    n: int
    reps: int
    ellHat: float
    re: float
    rtvp: float
    cpuSeconds: float
    flags: Tuple[str, ...] = field(default_factory=tuple)

    @property
    def log10Ell(self) -> float:
        return math.log10(self.ellHat) if self.ellHat > 0 else math.nan

    def toRecord(self) -> Dict[str, str]:
        return {
            "method": self.method,
            "alpha": repr(float(self.alpha)),
            "gamma": repr(float(self.gamma)),
            "d": str(self.d),
            "n": str(self.n),
            "reps": str(self.reps),
            "ell_hat": _number(self.ellHat),
            "log10_ell": _number(self.log10Ell),
            "re": _number(self.re),
            "rtvp": _number(self.rtvp),
            "cpu_seconds": _number(self.cpuSeconds),
            "flags": FLAG_SEPARATOR.join(self.flags),
        }


def _number(value: float) -> str:
    return "nan" if math.isnan(value) else f"{value:.16e}"


def cell_stream(seed: int, method: str, alpha: float, gamma: float) -> RandomStream:
    """The substream of one (method, alpha, gamma) cell; independent of the order cells run in."""
    return RandomStream(seed).derive(f"{method}|{float(alpha)!r}|{float(gamma)!r}")


def _sampleSize(cfg: ExperimentConfig, compare: bool) -> int:
    budgets = cfg.budgets()
    if compare:
        # matched total budget: one ELM run pools four densities
        return 4 * budgets[0]
    return int(sum(budgets))


def _runMethod(cfg: ExperimentConfig, method: str, rng: RandomStream, compare: bool = False) -> EstimateReport:
    spec = cfg.spec()
    if method == "cmc":
        return cmc_estimate(spec, _sampleSize(cfg, compare), rng)
    if method == "ak":
        return ak_estimate(spec, _sampleSize(cfg, compare), rng)
    if method == "mcis":
        n = _sampleSize(cfg, compare)
        chain = gibbs_fs(spec, max(1, n // 2), rng.spawn(0), cfg.chain())
        table = build_marginal_table(chain, cfg.subsample, True, rng.spawn(1), spec)
        report = mcis_estimate(spec, table, n, rng.spawn(2))
        return replace(report, n=n + max(1, n // 2))
    if method in ("elm-a", "elm-a3"):
        options = SchemeAOptions(
            includeF3=method == "elm-a",
            subsampleFraction=cfg.subsample,
            chain=cfg.chain(),
            solver=cfg.solver,
        )
        return scheme_a_run(spec, cfg.budget(), rng, options)[1]
    if method == "elm-b":
        options = SchemeBOptions(budgetRatio=cfg.budgetRatio, drawReference=cfg.drawReference, chain=cfg.chain())
        return scheme_b_run(spec, cfg.budget(), rng, options)[1]
    if method == "elm-2":
        return nominal_run(spec, cfg.budget(), rng, cfg.chain(), cfg.solver)[1]
    if method == "lower-bound":
        _, ellLower = ce_maximize_bound(spec, rng)
        return make_report(ellLower, math.nan, 0.0, 0, flags=(RE_UNAVAILABLE,))
    raise ConfigError(f"unknown method '{method}'")


def _replicate(cfg: ExperimentConfig, method: str, index: int, compare: bool = False) -> Tuple[EstimateReport, float]:
    stream = cell_stream(cfg.seed, method, cfg.alpha, cfg.gamma).spawn(index)
    report, seconds = timed(lambda: _runMethod(cfg, method, stream, compare))
    return report, seconds


def _replicates(cfg: ExperimentConfig, method: str, compare: bool) -> List[Tuple[EstimateReport, float]]:
    if cfg.workers > 1 and cfg.reps > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(_replicate, cfg, method, k, compare) for k in range(cfg.reps)]
            return [f.result() for f in futures]
    return [_replicate(cfg, method, k, compare) for k in range(cfg.reps)]


def _failedRow(cfg: ExperimentConfig, method: str, message: str, flags: Sequence[str] = ()) -> ResultRow:
    return ResultRow(method, float(cfg.alpha), float(cfg.gamma), int(cfg.d), 0, int(cfg.reps), math.nan, math.nan, math.nan, math.nan, tuple(flags) + (message,))


def _aggregate(cfg: ExperimentConfig, method: str, results: List[Tuple[EstimateReport, float]]) -> ResultRow:
    reports = [r for r, _ in results]
    seconds = [s for _, s in results]
    n = reports[0].n
    if len(results) == 1:
        report = make_report(reports[0].ellHat, reports[0].re, seconds[0], n, flags=reports[0].flags)
    else:
        carried: List[str] = []
        for r in reports:
            carried.extend(f for f in r.flags if f not in (WITHIN_RUN, RE_UNAVAILABLE) and f not in carried)
        report = efficiency_report([r.ellHat for r in reports], float(np.mean(seconds)), n, flags=carried)
    return ResultRow(
        method=method,
        alpha=float(cfg.alpha),
        gamma=float(cfg.gamma),
        d=int(cfg.d),
        n=int(report.n),
        reps=len(results),
        ellHat=report.ellHat,
        re=report.re,
        rtvp=report.rtvp,
        cpuSeconds=report.cpuSeconds,
        flags=report.flags,
    )


def run_experiment(cfg: ExperimentConfig) -> List[ResultRow]:
    """
    **Description**
    Run K replications of the configured method (or of elm-a, mcis and ak on matched budgets for
    `compare`) and aggregate them. Estimator failures become the row's flags instead of aborting.

    **Params**
    - `cfg`: ExperimentConfig.

    **Returns**
    - List[ResultRow], one per method.
    """
    cfg.validate()
    compare = cfg.method == "compare"
    methods = COMPARED if compare else (cfg.method,)
    rows = []
    for method in methods:
        try:
            results = _replicates(cfg, method, compare)
            rows.append(_aggregate(cfg, method, results))
        except (ElmError, FloatingPointError) as e:
            logger.warning("%s at alpha=%g gamma=%g failed: %s", method, cfg.alpha, cfg.gamma, e)
            rows.append(_failedRow(cfg, method, str(e)))
    for row in rows:
        logger.info("%s alpha=%g gamma=%g: ell=%.6g re=%.3g", row.method, row.alpha, row.gamma, row.ellHat, row.re)
    return rows


def sweep(
    template: ExperimentConfig,
    gammaList: Sequence[float],
    alphaList: Sequence[float]
) -> List[ResultRow]:
    """
    **Description**
    Run every (alpha, gamma) cell of the grid on its own derived substream. A cell with an invalid
    setting yields a flagged row and the sweep continues.

    **Params**
    - `template`: ExperimentConfig whose alpha and gamma are replaced per cell.
    - `gammaList`: non-empty thresholds.
    - `alphaList`: non-empty shapes.

    **Returns**
    - List[ResultRow] sorted by (method, gamma, alpha).
    """
    if not gammaList or not alphaList:
        raise ConfigError("sweep needs at least one gamma and one alpha")
    rows: List[ResultRow] = []
    for alpha in alphaList:
        for gamma in gammaList:
            cfg = replace(template, alpha=float(alpha), gamma=float(gamma))
            try:
                rows.extend(run_experiment(cfg))
            except ConfigError as e:
                logger.warning("skipping cell alpha=%g gamma=%g: %s", alpha, gamma, e)
                methods = COMPARED if cfg.method == "compare" else (cfg.method,)
                rows.extend(_failedRow(cfg, m, str(e)) for m in methods)
    return _sorted(rows)


def _sorted(rows: Iterable[ResultRow]) -> List[ResultRow]:
    return sorted(rows, key=lambda r: (r.method, r.gamma, r.alpha))


def render(rows: Sequence[ResultRow], fmt: str = "csv") -> str:
    """
    **Description**
    Render rows ordered by (method, gamma, alpha) as CSV with the fixed header, or as an aligned table.

    **Params**
    - `rows`: non-empty sequence of ResultRow.
    - `fmt`: `csv` or `table`.

    **Returns**
    - str, LF line endings.
    """
    if not rows:
        raise ConfigError("nothing to render")
    frame = pd.DataFrame([r.toRecord() for r in _sorted(rows)], columns=list(CSV_HEADER))
    if fmt == "csv":
        return frame.to_csv(index=False, lineterminator="\n")
    if fmt == "table":
        return frame.to_string(index=False) + "\n"
    raise ConfigError(f"unknown format '{fmt}'")


def read_rows(source: Union[str, Path, io.StringIO]) -> List[ResultRow]:
    """Parse a CSV written by `render` (a path or an open text buffer) back into rows."""
    frame = pd.read_csv(source, dtype=str, keep_default_na=False)
    if tuple(frame.columns) != CSV_HEADER:
        raise ConfigError(f"unexpected CSV header {list(frame.columns)}")
    return [
        ResultRow(
            method=rec["method"],
            alpha=float(rec["alpha"]),
            gamma=float(rec["gamma"]),
            d=int(rec["d"]),
            n=int(rec["n"]),
            reps=int(rec["reps"]),
            ellHat=float(rec["ell_hat"]),
            re=float(rec["re"]),
            rtvp=float(rec["rtvp"]),
            cpuSeconds=float(rec["cpu_seconds"]),
            flags=tuple(f for f in rec["flags"].split(FLAG_SEPARATOR) if f),
        )
        for rec in frame.to_dict("records")
    ]


# config-file keys (dashes or underscores) to ExperimentConfig fields
_KEYS: Dict[str, str] = {
    "method": "method",
    "alpha": "alpha",
    "gamma": "gamma",
    "d": "d",
    "n_per_density": "nPerDensity",
    "reps": "reps",
    "seed": "seed",
    "subsample": "subsample",
    "burn_in": "burnIn",
    "thin": "thin",
    "out": "out",
    "format": "format",
    "solver": "solver",
    "draw_reference": "drawReference",
    "budget_ratio": "budgetRatio",
    "workers": "workers",
    "gammas": "gammas",
    "alphas": "alphas",
    "verbosity": "verbosity",
}
_FLOATS = {"alpha", "gamma", "subsample", "budgetRatio"}
_INTS = {"d", "reps", "seed", "burnIn", "thin", "workers", "verbosity"}


def _coerce(name: str, value: Any) -> Any:
    try:
        if name in _FLOATS:
            return float(value)
        if name in _INTS:
            return int(value)
        if name in ("gammas", "alphas"):
            return [float(v) for v in (value if isinstance(value, list) else str(value).replace(",", " ").split())]
        if name == "nPerDensity":
            if isinstance(value, list):
                return [int(v) for v in value]
            parts = str(value).replace(",", " ").split()
            return int(float(parts[0])) if len(parts) == 1 else [int(float(v)) for v in parts]
        if name == "drawReference":
            return value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes", "on")
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value {value!r} for '{name}': {e}") from e
    return value


def load_config(path: Union[str, Path]) -> Dict[str, Any]:
    """
    **Description**
    Read a config file: either a YAML mapping or `key=value` lines with `#` comments. Values are typed
    with yaml.safe_load and then coerced to the field type.

    **Params**
    - `path`: file path.

    **Returns**
    - Dict of ExperimentConfig field names to values.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    try:
        document = yaml.safe_load(text)
    except yaml.YAMLError:
        document = None
    if not isinstance(document, dict):
        document = {}
        for number, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{number}: expected key=value, got '{line}'")
            key, value = (part.strip() for part in line.split("=", 1))
            document[key] = yaml.safe_load(value) if value else None
    values: Dict[str, Any] = {}
    for key, value in document.items():
        name = _KEYS.get(str(key).replace("-", "_"))
        if name is None:
            raise ConfigError(f"{path}: unknown key '{key}'; known keys: {', '.join(sorted(_KEYS))}")
        values[name] = _coerce(name, value)
    return values


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # defaults are None so only explicit flags override the config file
    common.add_argument("--alpha", type=float, default=None, help="Weibull shape")
    common.add_argument("--gamma", type=float, default=None, help="threshold")
    common.add_argument("--d", type=int, default=None, help="dimension")
    common.add_argument("--n-per-density", dest="nPerDensity", nargs="+", type=int, default=None, help="budget per density (one value or one per density)")
    common.add_argument("--reps", type=int, default=None, help="independent replications K")
    common.add_argument("--seed", type=int, default=None, help="root seed")
    common.add_argument("--subsample", type=float, default=None, help="share of the zero-variance chain used for the marginal table (default 0.5)")
    common.add_argument("--burn-in", dest="burnIn", type=int, default=None, help="Gibbs burn-in sweeps (default 0)")
    common.add_argument("--thin", type=int, default=None, help="Gibbs thinning (default 1)")
    common.add_argument("--solver", choices=("ipm", "jacobi"), default=None, help="Scheme-A solver")
    common.add_argument("--draw-reference", dest="drawReference", action="store_true", default=None, help="Scheme B: draw the reference block")
    common.add_argument("--budget-ratio", dest="budgetRatio", type=float, default=None, help="Scheme B: n1 / n2")
    common.add_argument("--workers", type=int, default=None, help="process pool size for replications")
    common.add_argument("--out", type=str, default=None, help="output path (stdout when omitted)")
    common.add_argument("--format", choices=("csv", "table"), default=None, help="output format")
    common.add_argument("--config", type=str, default=None, help="YAML or key=value config file; flags override it")
    common.add_argument("--verbosity", type=int, choices=(0, 1, 2), default=None, help="0, 1, 2, larger for simpler output")

    parser = argparse.ArgumentParser(description="Rare-event estimation for sums of Weibull variables")
    sub = parser.add_subparsers(dest="command", required=True)
    estimate = sub.add_parser("estimate", parents=[common], help="one (alpha, gamma) cell")
    estimate.add_argument("--method", choices=METHODS, default=None)
    grid = sub.add_parser("sweep", parents=[common], help="a grid of (alpha, gamma) cells")
    grid.add_argument("--method", choices=METHODS, default=None)
    grid.add_argument("--gammas", nargs="+", type=float, default=None)
    grid.add_argument("--alphas", nargs="+", type=float, default=None)
    sub.add_parser("lower-bound", parents=[common], help="cross-entropy maximized lower bound")
    return parser


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults, then the config file, then explicit flags."""
    values: Dict[str, Any] = load_config(args.config) if args.config else {}
    known = {f.name for f in fields(ExperimentConfig)}
    for name, value in vars(args).items():
        if name in known and value is not None:
            values[name] = value
    if args.command == "lower-bound":
        values["method"] = "lower-bound"
    if isinstance(values.get("nPerDensity"), list) and len(values["nPerDensity"]) == 1:
        values["nPerDensity"] = values["nPerDensity"][0]
    return ExperimentConfig(**values).validate()


def _write(text: str, out: Optional[str]) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    try:
        Path(out).write_text(text, encoding="utf-8", newline="\n")
    except OSError as e:
        raise ElmError(f"cannot write results to {out}: {e}") from e


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    level = _LEVELS.get(args.verbosity if args.verbosity is not None else 1, logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s: %(message)s")
    try:
        cfg = build_config(args)
        logging.getLogger().setLevel(_LEVELS[cfg.verbosity])
        logger.debug("config: %s", asdict(cfg))
        if args.command == "sweep":
            rows = sweep(cfg, cfg.gammas or [cfg.gamma], cfg.alphas or [cfg.alpha])
        else:
            rows = run_experiment(cfg)
        _write(render(rows, cfg.format), cfg.out)
    except ConfigError as e:
        logger.error("configuration error: %s", e)
        return 1
    except (ElmError, FloatingPointError) as e:
        logger.error("numerical failure: %s", e)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
