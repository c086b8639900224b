"""Command-line entry point: simulate, plan, estimate and campaign.

Every command accepts ``--config FILE`` with ``key = value`` lines (keys are
the long flag names, dashes or underscores); explicit flags win over the
file. Outputs go under ``--out DIR`` together with ``config_echo.json``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 phase error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .campaign import (BATCH1_REQUESTED, BATCH2_LABELED, BATCH2_REQUESTED, FINALIZED, STATE_FILE,
                       AwaitingLabels, Campaign, CampaignConfig, CampaignState, FileOracle,
                       OracleError, PhaseError)
from .crossfit import FINAL, assign, fit_folded
from .data import BINARY, CONTINUOUS, BudgetSpec, DataError, load_dataset
from .design import (DesignError, KernelSpec, global_allocation, optimal_pi_continuous,
                     per_arm_allocation, read_plan, relative_efficiency, sample_plan)
from .estimator import AIPW, EXTERNAL, RZ, estimate_ate, estimate_with_external_weights
from .learners import CLASSIFIERS, REGRESSORS, ClassifierSpec, RegressorSpec
from .nuisance import NuisanceSpecs, fit_continuous_nuisances, fit_nuisances
from .sim import (ADAPTIVE_AIPW, METHODS, UNIFORM, DgpSpec, budget_saved, run_trials)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PHASE = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines (``#`` comments allowed) into a dict."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        parser.read_string("[config]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return {k.replace("-", "_"): v for k, v in parser["config"].items()}


def _merge_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> argparse.Namespace:
    """Fill options left at their defaults from ``--config``; unknown keys are an error."""
    if not getattr(args, "config", None):
        return args
    values = read_config_file(args.config)
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config", "command")}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for key, raw in values.items():
        action = actions[key]
        if getattr(args, key) != action.default:
            continue  # explicit flag wins
        try:
            if isinstance(action, argparse._AppendAction):
                val = [s.strip() for s in raw.split(",") if s.strip()]
            elif isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                val = raw.strip().lower() in ("1", "true", "yes", "on")
            elif action.type is not None:
                val = action.type(raw.strip())
            else:
                val = raw.strip()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key {key}: {exc}") from None
        if action.choices is not None:
            bad = [v for v in (val if isinstance(val, list) else [val]) if v not in action.choices]
            if bad:
                raise ConfigError(f"config key {key}: {bad[0]!r} not in {sorted(action.choices)}")
        setattr(args, key, val)
    return args


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


_LEARNER_INT = {"k", "n_trees", "min_leaf", "min_split", "max_depth", "max_iter"}
_LEARNER_FLOAT = {"ridge_alpha", "l2", "tol", "sigma2_floor", "clip_lo", "clip_hi"}


def build_specs(pairs: list[str] | None) -> NuisanceSpecs:
    """NuisanceSpecs from ``key=value`` learner settings.

    ``outcome``, ``variance``, ``propensity`` and ``rz`` choose learner kinds;
    other keys are hyperparameters, optionally scoped as ``outcome.k=50``.
    """
    kinds: dict[str, str] = {}
    params: dict[str, dict] = {"outcome": {}, "variance": {}, "propensity": {}, "rz": {}}
    flags = {"use_context": False, "ensemble_context": False}
    floor = None
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"learner setting {pair!r} is not key=value")
        key, value = (s.strip() for s in pair.split("=", 1))
        key = key.replace("-", "_")
        if key in params:
            kinds[key] = value
            continue
        if key in flags:
            flags[key] = value.lower() in ("1", "true", "yes", "on")
            continue
        scope, _, name = key.rpartition(".")
        targets = [scope] if scope else list(params)
        if scope and scope not in params:
            raise ConfigError(f"unknown learner scope {scope!r}")
        if name == "sigma2_floor":
            floor = float(value)
            continue
        if name in _LEARNER_INT:
            val = None if value.lower() == "none" else int(value)
        elif name in _LEARNER_FLOAT:
            val = float(value)
        else:
            raise ConfigError(f"unknown learner key {key!r}")
        for t in targets:
            params[t][name] = val
    base = NuisanceSpecs()
    try:
        def reg(role, default):
            kw = {k: v for k, v in params[role].items() if k in RegressorSpec.__dataclass_fields__}
            return RegressorSpec(kinds.get(role, default.kind), **{**_fields(default), **kw})

        def clf(role, default):
            kw = {k: v for k, v in params[role].items() if k in ClassifierSpec.__dataclass_fields__}
            return ClassifierSpec(kinds.get(role, default.kind), **{**_fields(default), **kw})

        return NuisanceSpecs(
            outcome=reg("outcome", base.outcome), variance=reg("variance", base.variance),
            propensity=clf("propensity", base.propensity), rz=clf("rz", base.rz),
            sigma2_floor=base.sigma2_floor if floor is None else floor, **flags,
        )
    except ValueError as exc:
        raise ConfigError(f"learner settings: {exc} (regressors: {sorted(REGRESSORS)}, "
                          f"classifiers: {sorted(CLASSIFIERS)})") from None


def _fields(spec) -> dict:
    d = dict(spec.__dict__)
    d.pop("kind")
    return d


def _echo(args: argparse.Namespace, out: Path, extra: dict | None = None) -> dict:
    echo = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    echo.update(extra or {})
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_echo.json").write_text(json.dumps(echo, indent=2, sort_keys=True, default=str) + "\n")
    return echo


def _budget_spec(args) -> BudgetSpec:
    mode = getattr(args, "budget_mode", "global")
    try:
        if mode == "per-arm":
            return BudgetSpec("per-arm", B0=args.b0, B1=args.b1)
        if mode == "continuous":
            return BudgetSpec("continuous-local", B=args.budget, z0=args.z0, h=args.bandwidth)
        return BudgetSpec("global", B=args.budget)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    out = Path(args.out)
    methods = tuple(args.methods) if args.methods else METHODS
    budgets = args.budgets if args.budgets else ([args.budget] if args.budget else [0.1, 0.2, 0.3, 0.4])
    try:
        dgp = DgpSpec(n=args.n, theta0=args.theta0, noise_scale=args.noise_scale,
                      outcome_coupling=args.outcome_coupling)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    specs = build_specs(args.learner)
    _echo(args, out, {"budgets": budgets, "methods": list(methods), "dgp": dgp.to_dict(),
                      "specs": specs.to_dict()})
    try:
        metrics = run_trials(budgets, methods, args.trials, dgp, specs, seed=args.seed,
                             workers=args.workers, kappa=args.kappa, folds=args.folds,
                             alpha=args.alpha, pi_floor=args.pi_floor, holdout=args.holdout)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    metrics.write_long(out / "metrics_long.csv")
    metrics.write_aggregate(out / "metrics_agg.csv")
    print(f"{'method':<15}{'budget':>8}{'trials':>8}{'mse':>12}{'ci_width':>12}{'coverage':>10}")
    for a in metrics.aggregate():
        print(f"{a['method']:<15}{a['budget']:>8.3f}{a['trials']:>8d}{a['mse']:>12.5g}"
              f"{a['mean_ci_width']:>12.5g}{a['coverage']:>10.3f}")
    if ADAPTIVE_AIPW in methods and UNIFORM in methods and len(budgets) > 1:
        for b, s in budget_saved(metrics).items():
            bound = ">= " if s.lower_bound else ""
            print(f"budget saved at B={b:g}: {bound}{100 * s.savings:.1f}%")
    return EXIT_OK


def cmd_plan(args) -> int:
    out = Path(args.out)
    budget = _budget_spec(args)
    specs = build_specs(args.learner)
    _echo(args, out, {"budget_spec": budget.__dict__, "specs": specs.to_dict()})
    mode = CONTINUOUS if budget.kind == "continuous-local" else BINARY
    ds = load_dataset(args.data, mode=mode)
    if not ds.r.any():
        raise DataError("plan needs some annotated units to fit outcome and variance models")
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 7]))
    audit: dict = {"n": ds.n}
    if budget.kind == "continuous-local":
        nuis = fit_continuous_nuisances(ds, specs, seed=args.seed)
        kernel = KernelSpec(args.kernel, args.bandwidth)
        sol = optimal_pi_continuous(ds, nuis.sigma2, nuis.e, kernel, args.z0, budget.B, lo=0.0)
        pi = np.maximum(sol.pi, np.finfo(float).tiny)
        plan = sample_plan(ds.ids, pi, budget.B, rng, "continuous-local", sol.n_clip_low, sol.n_clip_high)
        audit.update(kernel_budget=sol.kernel_budget(), budget=budget.B, z0=args.z0)
    else:
        nuis = fit_nuisances(ds, specs, seed=args.seed)
        p = nuis.predict(ds)
        if budget.kind == "per-arm":
            sol = per_arm_allocation(p["s1"], p["s0"], p["e1"], ds.arm, budget.B0, budget.B1, args.pi_floor)
            audit.update(arm_fraction_0=sol.arm_fraction(0), arm_fraction_1=sol.arm_fraction(1),
                         B0=budget.B0, B1=budget.B1)
        else:
            sol = global_allocation(p["s1"], p["s0"], p["e1"], ds.arm, budget.B, args.pi_floor)
            audit.update(expected_fraction=sol.expected_fraction(), budget=budget.B,
                         relative_efficiency=relative_efficiency(ds, nuis, None, budget.B))
        plan = sample_plan(ds.ids, sol.realized, sol.budget, rng, sol.kind, sol.n_clip_low, sol.n_clip_high)
    audit.update(realized_fraction=plan.realized_fraction, n_clip_low=plan.n_clip_low,
                 n_clip_high=plan.n_clip_high)
    plan.to_csv(out / "plan.csv")
    (out / "plan_audit.json").write_text(json.dumps(audit, indent=2, sort_keys=True) + "\n")
    for k, v in audit.items():
        print(f"{k}: {v}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    out = Path(args.out)
    specs = build_specs(args.learner)
    _echo(args, out, {"specs": specs.to_dict()})
    ds = load_dataset(args.data)
    kind = args.estimator
    pi = None
    if kind != EXTERNAL or args.plan:
        if not args.plan:
            raise ConfigError("--plan is required for the aipw and rz estimators")
        plan = read_plan(args.plan)
        missing = [int(i) for i in ds.ids if int(i) not in plan]
        if missing:
            raise DataError(f"plan does not cover {len(missing)} units, e.g. id {missing[0]}")
        pi = np.array([plan[int(i)][0] for i in ds.ids])
    if args.folds > 1:
        asg = assign(ds.n, args.folds, 0.5, args.seed)
        nuis = fit_folded(ds, asg, FINAL, specs, seed=args.seed, with_rz=kind == RZ)
    else:
        nuis = fit_nuisances(ds, specs, seed=args.seed, with_rz=kind == RZ)
    extra = {"seed": args.seed, "data": str(args.data), "plan": str(args.plan or "")}
    if kind == EXTERNAL:
        if not args.weights:
            raise ConfigError("--weights is required for the external estimator")
        w = read_plan_weights(args.weights)
        missing = [int(i) for i in ds.ids if int(i) not in w]
        if missing:
            raise DataError(f"weights do not cover {len(missing)} units, e.g. id {missing[0]}")
        rep = estimate_with_external_weights(ds, nuis, [w[int(i)] for i in ds.ids], args.alpha, extra)
    else:
        rep = estimate_ate(ds, nuis, pi, kind, args.alpha, args.weight_cap, extra=extra)
    (out / "report.json").write_text(rep.to_json() + "\n")
    print(rep.to_json())
    return EXIT_OK


def read_plan_weights(path) -> dict[int, float]:
    out = {}
    with Path(path).open(newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                out[int(row["id"])] = float(row["w"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}: row {lineno}: {exc}") from None
    return out


def _next_action(camp: Campaign, out: Path) -> str:
    ph = camp.phase
    if ph in (BATCH1_REQUESTED, BATCH2_REQUESTED):
        return (f"annotate the ids in {out / 'requests.csv'} and write {out / 'labels.csv'} "
                "(columns id,y); then run `campaign step`")
    if ph == BATCH2_LABELED:
        return "run `campaign finalize`"
    if ph == FINALIZED:
        return f"done; report in {out / 'report.json'}"
    return "run `campaign step`"


def cmd_campaign_init(args) -> int:
    out = Path(args.out)
    budget = _budget_spec(args)
    if budget.kind == "continuous-local":
        raise ConfigError("campaigns support global and per-arm budgets only")
    specs = build_specs(args.learner)
    try:
        cfg = CampaignConfig(budget=budget, kappa=args.kappa, folds=args.folds, alpha=args.alpha,
                             planner=args.planner, estimators=tuple(args.estimators or [AIPW]),
                             score_pi=args.score_pi, pi_floor=args.pi_floor,
                             weight_cap=args.weight_cap, stratify=args.stratify, specs=specs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    _echo(args, out, {"campaign": cfg.to_dict()})
    state_path = out / STATE_FILE
    if state_path.exists() and not args.force:
        raise PhaseError(f"{state_path} exists; pass --force to start over")
    ds = load_dataset(args.data)
    try:
        camp = Campaign.start(ds, cfg, FileOracle(out), args.seed)
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise ConfigError(str(exc)) from None
    camp.state.dataset_ref = str(Path(args.data).resolve())
    camp.save(state_path)
    print(f"phase: {camp.phase}")
    print(f"next: {_next_action(camp, out)}")
    return EXIT_OK


def _load_campaign(out: Path, data: str | None) -> Campaign:
    state_path = out / STATE_FILE
    if not state_path.exists():
        raise PhaseError(f"no campaign at {state_path}; run `campaign init` first")
    state = CampaignState.load(state_path)
    ds = load_dataset(data or state.dataset_ref)
    return Campaign(ds, state, FileOracle(out))


def cmd_campaign_step(args) -> int:
    out = Path(args.out)
    camp = _load_campaign(out, args.data)
    state_path = out / STATE_FILE
    if camp.phase == FINALIZED:
        raise PhaseError("campaign already finalized")
    if camp.phase == BATCH2_LABELED:
        raise PhaseError("all labels are in; run `campaign finalize`")
    moved = False
    try:
        while camp.phase not in (BATCH2_LABELED, FINALIZED):
            before = camp.phase
            camp.advance()
            camp.save(state_path)
            moved = True
            print(f"{before} -> {camp.phase}")
            if camp.phase == "planned":
                _write_plan(camp, out)
    except AwaitingLabels as exc:
        if not moved:
            print(f"waiting: {exc}; {_next_action(camp, out)}", file=sys.stderr)
            return EXIT_PHASE
    print(f"phase: {camp.phase}")
    print(f"next: {_next_action(camp, out)}")
    return EXIT_OK


def _write_plan(camp: Campaign, out: Path) -> None:
    plan = camp.state.plan
    with (out / "plan.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "batch", "fold", "pi_star", "pi2", "pi"])
        asg = camp.assignment
        for k, i in enumerate(camp.state.ids):
            pi2 = plan["pi2"][k]
            w.writerow([i, int(asg.batch[k]), int(asg.fold[k]), repr(plan["pi_star"][k]),
                        "" if pi2 is None else repr(pi2), repr(plan["pi_mix"][k])])
    (out / "plan_audit.json").write_text(json.dumps(plan["audit"], indent=2, sort_keys=True) + "\n")


def cmd_campaign_finalize(args) -> int:
    out = Path(args.out)
    camp = _load_campaign(out, args.data)
    if camp.phase != BATCH2_LABELED:
        raise PhaseError(f"cannot finalize at phase {camp.phase!r}; {_next_action(camp, out)}")
    rep = camp.finalize()
    camp.save(out / STATE_FILE)
    reports = {k: r.to_dict() for k, r in camp.reports().items()}
    (out / "report.json").write_text(json.dumps(reports, indent=2, sort_keys=True) + "\n")
    print(rep.to_json())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, out_default: str = "out"):
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--learner", action="append", metavar="KEY=VALUE",
                   help="learner setting, e.g. outcome=forest or variance.ridge_alpha=10")
    p.add_argument("--out", default=out_default, help="output directory")


def _budget_flags(p: argparse.ArgumentParser, modes=("global", "per-arm")):
    p.add_argument("--budget", type=float, default=None)
    p.add_argument("--budget-mode", choices=list(modes), default="global")
    p.add_argument("--b0", type=float, default=None, help="per-arm budget for controls")
    p.add_argument("--b1", type=float, default=None, help="per-arm budget for treated")
    p.add_argument("--pi-floor", type=float, default=0.01)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="batchaipw", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Monte Carlo comparison of annotation strategies")
    _common(p)
    p.add_argument("--budget", type=float, default=None)
    p.add_argument("--budgets", type=_float_list, default=None)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--theta0", type=float, default=3.0)
    p.add_argument("--kappa", type=float, default=0.55)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--pi-floor", type=float, default=0.01)
    p.add_argument("--holdout", type=float, default=0.0)
    p.add_argument("--methods", action="append", choices=list(METHODS))
    p.add_argument("--noise-scale", choices=["sd", "variance"], default="sd")
    p.add_argument("--outcome-coupling", choices=["additive", "independent"], default="independent")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("plan", help="optimal annotation probabilities for a dataset")
    _common(p)
    _budget_flags(p, ("global", "per-arm", "continuous"))
    p.add_argument("--data", required=True)
    p.add_argument("--z0", type=float, default=None)
    p.add_argument("--bandwidth", type=float, default=None)
    p.add_argument("--kernel", choices=["gaussian", "box"], default="gaussian")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("estimate", help="ATE estimate from annotated data and a plan")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--plan", default=None)
    p.add_argument("--weights", default=None, help="CSV with columns id,w (external estimator)")
    p.add_argument("--estimator", choices=[AIPW, RZ, EXTERNAL], default=AIPW)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--weight-cap", type=float, default=None)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("campaign", help="two-batch annotation campaign with file hand-off")
    csub = p.add_subparsers(dest="action", required=True)
    c = csub.add_parser("init")
    _common(c)
    _budget_flags(c)
    c.add_argument("--data", required=True)
    c.add_argument("--kappa", type=float, default=0.55)
    c.add_argument("--folds", type=int, default=5)
    c.add_argument("--planner", choices=["adaptive", "uniform"], default="adaptive")
    c.add_argument("--estimator", dest="estimators", action="append", choices=[AIPW, RZ])
    c.add_argument("--score-pi", choices=["design", "reoptimized"], default="design")
    c.add_argument("--weight-cap", type=float, default=None)
    c.add_argument("--stratify", action="store_true")
    c.add_argument("--force", action="store_true")
    c.set_defaults(func=cmd_campaign_init)
    for name, fn in (("step", cmd_campaign_step), ("finalize", cmd_campaign_finalize)):
        c = csub.add_parser(name)
        c.add_argument("--config", help="key = value file")
        c.add_argument("--out", default="out")
        c.add_argument("--data", default=None, help="dataset path (defaults to the one given at init)")
        c.set_defaults(func=fn)
    return parser


def _subparser(parser: argparse.ArgumentParser, args) -> argparse.ArgumentParser:
    p = parser
    for name in (args.command, getattr(args, "action", None)):
        if name is None:
            break
        sub = next(a for a in p._actions if isinstance(a, argparse._SubParsersAction))
        p = sub.choices[name]
        if not any(isinstance(a, argparse._SubParsersAction) for a in p._actions):
            break
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _merge_config(args, _subparser(parser, args))
        return args.func(args)
    except (PhaseError, AwaitingLabels) as exc:
        print(f"phase error: {exc}", file=sys.stderr)
        return EXIT_PHASE
    except (DataError, DesignError, OracleError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
